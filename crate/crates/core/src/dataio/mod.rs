//! Spot-level multimodal datasets: on-disk layout, validation and
//! preprocessing.
//!
//! A dataset directory holds `meta.txt` (key=value), `image_features.mat`,
//! `gene_counts.mat`, `coords.mat` and optionally `labels.mat` and
//! `genes.txt` (one gene name per line; defaults to `g0, g1, ...`).

mod keyvalue;
mod knn;
mod matfile;
mod preprocess;

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub use keyvalue::KeyValues;
pub use knn::{knn_neighbors, NeighborIndex};
pub use matfile::{
    encode_binary, encode_text, read_matrix, write_matrix_binary, write_matrix_text, MATRIX_MAGIC,
};
pub use preprocess::{
    aggregate_cells_to_spots, compute_patch_size, normalize_expression, sample_variance_columns,
    select_hvg,
};

pub const META_FILE: &str = "meta.txt";
pub const IMAGE_FILE: &str = "image_features.mat";
pub const GENE_FILE: &str = "gene_counts.mat";
pub const COORDS_FILE: &str = "coords.mat";
pub const LABELS_FILE: &str = "labels.mat";
pub const GENE_NAMES_FILE: &str = "genes.txt";

/// One tissue section: paired histology embeddings and raw gene counts per
/// spot, with coordinates and optional binary cancer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotDataset {
    pub image_features: Array2<f64>,
    pub gene_counts: Array2<f64>,
    pub gene_names: Vec<String>,
    pub coords: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub spot_diameter: f64,
    pub pixel_resolution: f64,
    pub dataset_id: String,
    pub platform_tag: String,
}

pub fn default_gene_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("g{i}")).collect()
}

impl SpotDataset {
    pub fn n_spots(&self) -> usize {
        self.image_features.nrows()
    }

    pub fn d_img(&self) -> usize {
        self.image_features.ncols()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_counts.ncols()
    }

    pub fn labels_f64(&self) -> Option<Array1<f64>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&v| v as f64).collect())
    }

    /// Checks every structural and value invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.image_features.nrows();
        if n == 0 {
            return Err(Error::Validation(format!(
                "dataset `{}` has no spots",
                self.dataset_id
            )));
        }
        for (name, rows) in [
            ("gene_counts", self.gene_counts.nrows()),
            ("coords", self.coords.nrows()),
        ] {
            if rows != n {
                return Err(Error::Dimension(format!(
                    "{name} has {rows} rows, image_features has {n}"
                )));
            }
        }
        if self.coords.ncols() != 2 {
            return Err(Error::Dimension(format!(
                "coords must have 2 columns, found {}",
                self.coords.ncols()
            )));
        }
        if self.gene_names.len() != self.gene_counts.ncols() {
            return Err(Error::Dimension(format!(
                "{} gene names for {} gene columns",
                self.gene_names.len(),
                self.gene_counts.ncols()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Dimension(format!(
                    "labels has {} rows, image_features has {n}",
                    labels.len()
                )));
            }
            if let Some(bad) = labels.iter().position(|&l| l > 1) {
                return Err(Error::Validation(format!("label at spot {bad} is not 0 or 1")));
            }
        }
        for (name, m) in [
            ("image_features", &self.image_features),
            ("gene_counts", &self.gene_counts),
            ("coords", &self.coords),
        ] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{name} has a non-finite value at flat index {pos}"
                )));
            }
        }
        if let Some(((i, j), v)) = self.gene_counts.indexed_iter().find(|(_, v)| **v < 0.0) {
            return Err(Error::Validation(format!(
                "gene_counts[{i},{j}] = {v} is negative"
            )));
        }
        if !(self.spot_diameter > 0.0) || !(self.pixel_resolution > 0.0) {
            return Err(Error::Validation(
                "spot_diameter and pixel_resolution must be positive".into(),
            ));
        }
        Ok(())
    }

    fn meta(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n_spots", self.n_spots());
        kv.set("d_img", self.d_img());
        kv.set("n_genes", self.n_genes());
        kv.set("spot_diameter", self.spot_diameter);
        kv.set("pixel_resolution", self.pixel_resolution);
        kv.set("dataset_id", &self.dataset_id);
        kv.set("platform_tag", &self.platform_tag);
        kv.set("has_labels", u8::from(self.labels.is_some()));
        kv
    }

    /// Writes the dataset directory. `binary` selects the SPCD framing over
    /// TSV for the matrix files.
    pub fn write(&self, dir: &Path, binary: bool) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.meta().write(&dir.join(META_FILE))?;
        let write = |name: &str, m: &Array2<f64>| {
            let p = dir.join(name);
            if binary {
                write_matrix_binary(&p, m)
            } else {
                write_matrix_text(&p, m)
            }
        };
        write(IMAGE_FILE, &self.image_features)?;
        write(GENE_FILE, &self.gene_counts)?;
        write(COORDS_FILE, &self.coords)?;
        if let Some(labels) = &self.labels {
            let m = Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i] as f64);
            write(LABELS_FILE, &m)?;
        }
        if self.gene_names != default_gene_names(self.n_genes()) {
            let p = dir.join(GENE_NAMES_FILE);
            let mut text = self.gene_names.join("\n");
            text.push('\n');
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn require_file(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::format(&p, "required file is missing"))
    }
}

fn check_shape(name: &str, m: &Array2<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, meta declares {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<SpotDataset> {
    let meta_path = require_file(dir, META_FILE)?;
    let image_path = require_file(dir, IMAGE_FILE)?;
    let gene_path = require_file(dir, GENE_FILE)?;
    let coords_path = require_file(dir, COORDS_FILE)?;

    let meta = KeyValues::read(&meta_path)?;
    let n: usize = meta.require_parsed("n_spots", &meta_path)?;
    let d_img: usize = meta.require_parsed("d_img", &meta_path)?;
    let n_genes: usize = meta.require_parsed("n_genes", &meta_path)?;
    let spot_diameter: f64 = meta.require_parsed("spot_diameter", &meta_path)?;
    let pixel_resolution: f64 = meta.require_parsed("pixel_resolution", &meta_path)?;
    let dataset_id = meta.require("dataset_id", &meta_path)?.to_string();
    let platform_tag = meta.require("platform_tag", &meta_path)?.to_string();
    let has_labels: u8 = meta.require_parsed("has_labels", &meta_path)?;

    let image_features = read_matrix(&image_path)?;
    let gene_counts = read_matrix(&gene_path)?;
    let coords = read_matrix(&coords_path)?;
    if image_features.nrows() != gene_counts.nrows() || image_features.nrows() != coords.nrows() {
        return Err(Error::Dimension(format!(
            "row counts differ: image_features {}, gene_counts {}, coords {}",
            image_features.nrows(),
            gene_counts.nrows(),
            coords.nrows()
        )));
    }
    check_shape(IMAGE_FILE, &image_features, n, d_img)?;
    check_shape(GENE_FILE, &gene_counts, n, n_genes)?;
    check_shape(COORDS_FILE, &coords, n, 2)?;

    let labels = if has_labels == 1 {
        let p = require_file(dir, LABELS_FILE)?;
        let m = read_matrix(&p)?;
        check_shape(LABELS_FILE, &m, n, 1)?;
        let labels = m
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 || v == 1.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Validation(format!("label at spot {i} is {v}, not 0 or 1")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Some(labels)
    } else {
        None
    };

    let names_path = dir.join(GENE_NAMES_FILE);
    let gene_names = if names_path.is_file() {
        let text = std::fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if names.len() != n_genes {
            return Err(Error::Dimension(format!(
                "{GENE_NAMES_FILE} lists {} genes, meta declares {n_genes}",
                names.len()
            )));
        }
        names
    } else {
        default_gene_names(n_genes)
    };

    let ds = SpotDataset {
        image_features,
        gene_counts,
        gene_names,
        coords,
        labels,
        spot_diameter,
        pixel_resolution,
        dataset_id,
        platform_tag,
    };
    ds.validate()?;
    Ok(ds)
}
