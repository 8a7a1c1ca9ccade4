//! Turns raw datasets into model-ready features: normalized, log-transformed
//! expression restricted to a gene panel, image features, and the spatial
//! neighbor index.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use crate::dataio::{knn_neighbors, normalize_expression, select_hvg, NeighborIndex, SpotDataset};
use crate::diffcore::Mat;
use crate::error::{Error, Result};

/// How the highly variable genes are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvgMode {
    /// One panel ranked on the pooled source datasets; every dataset is
    /// projected onto it.
    SourceFit,
    /// Each dataset keeps its own top genes, columns ordered by rank.
    PerDataset,
}

impl HvgMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HvgMode::SourceFit => "source-fit",
            HvgMode::PerDataset => "per-dataset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source-fit" => Ok(HvgMode::SourceFit),
            "per-dataset" => Ok(HvgMode::PerDataset),
            other => Err(Error::Argument(format!(
                "hvg_mode must be source-fit or per-dataset, got `{other}`"
            ))),
        }
    }
}

/// The gene vocabulary a model was trained on.
#[derive(Debug, Clone, PartialEq)]
pub enum GenePanel {
    Fixed(Vec<String>),
    PerDataset(usize),
}

impl GenePanel {
    /// Fits the panel on the source datasets. For `SourceFit`, genes are the
    /// union of source vocabularies in first-seen order, each dataset is
    /// normalized on its own genes, missing genes count as zero, and the
    /// pooled rows are ranked by sample variance.
    pub fn fit(sources: &[&SpotDataset], mode: HvgMode, target_sum: f64, n_hvg: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Argument("no source datasets".into()));
        }
        if n_hvg == 0 {
            return Err(Error::Argument("n_hvg must be at least 1".into()));
        }
        match mode {
            HvgMode::PerDataset => {
                let min_genes = sources.iter().map(|d| d.n_genes()).min().unwrap_or(0);
                Ok(GenePanel::PerDataset(n_hvg.min(min_genes)))
            }
            HvgMode::SourceFit => {
                let mut union: Vec<String> = Vec::new();
                let mut seen: HashMap<&str, usize> = HashMap::new();
                for ds in sources {
                    for g in &ds.gene_names {
                        if !seen.contains_key(g.as_str()) {
                            seen.insert(g.as_str(), union.len());
                            union.push(g.clone());
                        }
                    }
                }
                let total: usize = sources.iter().map(|d| d.n_spots()).sum();
                let mut pooled = Array2::<f64>::zeros((total, union.len()));
                let mut row = 0;
                for ds in sources {
                    let norm = normalize_expression(ds.gene_counts.view(), target_sum)?;
                    for (j, g) in ds.gene_names.iter().enumerate() {
                        let col = seen[g.as_str()];
                        pooled
                            .slice_mut(ndarray::s![row..row + ds.n_spots(), col])
                            .assign(&norm.column(j));
                    }
                    row += ds.n_spots();
                }
                let top = select_hvg(pooled.view(), n_hvg.min(union.len()))?;
                Ok(GenePanel::Fixed(top.into_iter().map(|i| union[i].clone()).collect()))
            }
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            GenePanel::Fixed(g) => g.len(),
            GenePanel::PerDataset(n) => *n,
        }
    }

    /// Normalized expression of `ds` in panel column order. Panel genes the
    /// dataset lacks are an error listing them unless `fill_missing`, in which
    /// case they are zero-filled; the number filled is returned.
    pub fn project(&self, ds: &SpotDataset, target_sum: f64, fill_missing: bool) -> Result<(Mat, usize)> {
        let norm = normalize_expression(ds.gene_counts.view(), target_sum)?;
        match self {
            GenePanel::PerDataset(n) => {
                if ds.n_genes() < *n {
                    return Err(Error::Dimension(format!(
                        "dataset `{}` has {} genes, panel needs {n}",
                        ds.dataset_id,
                        ds.n_genes()
                    )));
                }
                let top = select_hvg(norm.view(), *n)?;
                Ok((norm.select(Axis(1), &top), 0))
            }
            GenePanel::Fixed(genes) => {
                let index: HashMap<&str, usize> = ds
                    .gene_names
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (g.as_str(), i))
                    .collect();
                let missing: Vec<&str> = genes
                    .iter()
                    .filter(|g| !index.contains_key(g.as_str()))
                    .map(String::as_str)
                    .collect();
                if !missing.is_empty() && !fill_missing {
                    let shown: Vec<&str> = missing.iter().take(20).copied().collect();
                    return Err(Error::Validation(format!(
                        "dataset `{}` lacks {} panel genes: {}{}",
                        ds.dataset_id,
                        missing.len(),
                        shown.join(", "),
                        if missing.len() > shown.len() { ", ..." } else { "" }
                    )));
                }
                let mut out = Mat::zeros((ds.n_spots(), genes.len()));
                for (j, g) in genes.iter().enumerate() {
                    if let Some(&src) = index.get(g.as_str()) {
                        out.column_mut(j).assign(&norm.column(src));
                    }
                }
                Ok((out, missing.len()))
            }
        }
    }
}

/// Model-ready view of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub id: String,
    pub image: Mat,
    pub gene: Mat,
    pub coords: Mat,
    pub labels: Option<Vec<u8>>,
    pub neighbors: NeighborIndex,
    pub missing_genes: usize,
}

impl PreparedDataset {
    pub fn n_spots(&self) -> usize {
        self.image.nrows()
    }

    pub fn labels_f64(&self) -> Option<Vec<f64>> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| f64::from(v)).collect())
    }
}

/// Normalizes, projects onto `panel` and builds the `k`-nearest-neighbor
/// index (capped at `n − 1` for tiny datasets).
pub fn prepare(
    ds: &SpotDataset,
    panel: &GenePanel,
    target_sum: f64,
    k: usize,
    fill_missing: bool,
) -> Result<PreparedDataset> {
    ds.validate()?;
    let (gene, missing_genes) = panel.project(ds, target_sum, fill_missing)?;
    let neighbors = knn_neighbors(ds.coords.view(), k.min(ds.n_spots().saturating_sub(1)))?;
    Ok(PreparedDataset {
        id: ds.dataset_id.clone(),
        image: ds.image_features.clone(),
        gene,
        coords: ds.coords.clone(),
        labels: ds.labels.clone(),
        neighbors,
        missing_genes,
    })
}
