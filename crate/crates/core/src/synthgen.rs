//! Synthetic cohorts of paired image-embedding / gene-count spots with
//! spatially contiguous cancer regions and per-dataset batch effects.
//!
//! Every spot draws a latent `z ~ N(0, I)` whose first coordinate is shifted
//! by +2 inside the cancer region. Image features are `z·A + noise`; gene
//! counts are `count_scale · softplus(z·B + noise)` rounded to integers. `A`
//! and `B` are shared across the cohort. Each dataset then gets its own
//! affine transform (per-feature scale in [0.8, 1.2], shift drawn from
//! `N(0, batch_shift_sd²)`) on both modalities.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::dataio::{default_gene_names, KeyValues, SpotDataset};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};

/// Latent shift applied to the first coordinate of cancer spots.
pub const CANCER_SHIFT: f64 = 2.0;
const GRID_SPACING: f64 = 100.0;
const COUNT_SCALE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_datasets: usize,
    pub spots_per_dataset: usize,
    pub grid_side: usize,
    pub latent_dim: usize,
    pub d_img: usize,
    pub n_genes: usize,
    pub cancer_fraction: f64,
    pub image_noise_sd: f64,
    pub gene_noise_sd: f64,
    /// Zero disables the batch transform entirely.
    pub batch_shift_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_datasets: 5,
            spots_per_dataset: 400,
            grid_side: 20,
            latent_dim: 8,
            d_img: 32,
            n_genes: 64,
            cancer_fraction: 0.4,
            image_noise_sd: 1.0,
            gene_noise_sd: 0.5,
            batch_shift_sd: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_datasets", self.n_datasets),
            ("spots_per_dataset", self.spots_per_dataset),
            ("grid_side", self.grid_side),
            ("latent_dim", self.latent_dim),
            ("d_img", self.d_img),
            ("n_genes", self.n_genes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be at least 1")));
        }
        if self.grid_side * self.grid_side < self.spots_per_dataset {
            return Err(Error::Argument(format!(
                "a {0}x{0} grid cannot hold {1} spots",
                self.grid_side, self.spots_per_dataset
            )));
        }
        if !(self.cancer_fraction > 0.0 && self.cancer_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "cancer_fraction {} outside (0, 1)",
                self.cancer_fraction
            )));
        }
        let n_cancer = self.n_cancer();
        if n_cancer == 0 || n_cancer >= self.spots_per_dataset {
            return Err(Error::Argument(format!(
                "cancer_fraction {} leaves a single class among {} spots",
                self.cancer_fraction, self.spots_per_dataset
            )));
        }
        for (name, v) in [
            ("image_noise_sd", self.image_noise_sd),
            ("gene_noise_sd", self.gene_noise_sd),
            ("batch_shift_sd", self.batch_shift_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    fn n_cancer(&self) -> usize {
        (self.cancer_fraction * self.spots_per_dataset as f64).round() as usize
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n_datasets", self.n_datasets);
        kv.set("spots_per_dataset", self.spots_per_dataset);
        kv.set("grid_side", self.grid_side);
        kv.set("latent_dim", self.latent_dim);
        kv.set("d_img", self.d_img);
        kv.set("n_genes", self.n_genes);
        kv.set("cancer_fraction", self.cancer_fraction);
        kv.set("image_noise_sd", self.image_noise_sd);
        kv.set("gene_noise_sd", self.gene_noise_sd);
        kv.set("batch_shift_sd", self.batch_shift_sd);
        kv.set("seed", self.seed);
        kv
    }

    /// Applies `key=value` overrides; unknown keys are an error naming the key.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Argument(format!("config key `{key}`: cannot parse `{v}`")))
        }
        for (k, v) in kv.iter() {
            match k {
                "n_datasets" => self.n_datasets = parse(k, v)?,
                "spots_per_dataset" => self.spots_per_dataset = parse(k, v)?,
                "grid_side" => self.grid_side = parse(k, v)?,
                "latent_dim" => self.latent_dim = parse(k, v)?,
                "d_img" => self.d_img = parse(k, v)?,
                "n_genes" => self.n_genes = parse(k, v)?,
                "cancer_fraction" => self.cancer_fraction = parse(k, v)?,
                "image_noise_sd" => self.image_noise_sd = parse(k, v)?,
                "gene_noise_sd" => self.gene_noise_sd = parse(k, v)?,
                "batch_shift_sd" => self.batch_shift_sd = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                other => return Err(Error::Argument(format!("unknown config key `{other}`"))),
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * sd
    })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Grows a 4-connected region of `target` cells by breadth-first search from
/// a random start, visiting each cell's neighbors in random order.
fn grow_region(positions: &[(usize, usize)], side: usize, target: usize, rng: &mut Rng) -> Vec<bool> {
    let mut at = vec![usize::MAX; side * side];
    for (i, &(r, c)) in positions.iter().enumerate() {
        at[r * side + c] = i;
    }
    let mut inside = vec![false; positions.len()];
    let start = rng.random_range(0..positions.len());
    let mut queue = VecDeque::from([start]);
    inside[start] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        if count == target {
            break;
        }
        let (r, c) = positions[i];
        let mut nbrs = Vec::with_capacity(4);
        if r > 0 {
            nbrs.push((r - 1, c));
        }
        if r + 1 < side {
            nbrs.push((r + 1, c));
        }
        if c > 0 {
            nbrs.push((r, c - 1));
        }
        if c + 1 < side {
            nbrs.push((r, c + 1));
        }
        nbrs.shuffle(rng);
        for (nr, nc) in nbrs {
            let j = at[nr * side + nc];
            if j != usize::MAX && !inside[j] && count < target {
                inside[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    inside
}

struct SharedMaps {
    image: Array2<f64>,
    gene: Array2<f64>,
    gene_bias: Array1<f64>,
}

/// Per-dataset affine batch transform (`x * scale + shift` per feature).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTransform {
    pub image_scale: Vec<f64>,
    pub image_shift: Vec<f64>,
    pub gene_scale: Vec<f64>,
    pub gene_shift: Vec<f64>,
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTruth {
    pub latent: Array2<f64>,
    pub batch: Option<BatchTransform>,
}

fn generate_one(
    cfg: &SynthConfig,
    maps: &SharedMaps,
    index: usize,
) -> Result<(SpotDataset, DatasetTruth)> {
    let mut rng = substream(cfg.seed, index as u64 + 1);
    let n = cfg.spots_per_dataset;
    let side = cfg.grid_side;
    let positions: Vec<(usize, usize)> = (0..n).map(|i| (i / side, i % side)).collect();
    let inside = grow_region(&positions, side, cfg.n_cancer(), &mut rng);

    let mut latent = gaussian_matrix(n, cfg.latent_dim, 1.0, &mut rng);
    for (i, &c) in inside.iter().enumerate() {
        if c {
            latent[[i, 0]] += CANCER_SHIFT;
        }
    }
    let mut image = latent.dot(&maps.image)
        + gaussian_matrix(n, cfg.d_img, cfg.image_noise_sd, &mut rng);
    let mut expr = latent.dot(&maps.gene)
        + &maps.gene_bias
        + gaussian_matrix(n, cfg.n_genes, cfg.gene_noise_sd, &mut rng);
    expr.mapv_inplace(|v| COUNT_SCALE * softplus(v));

    let batch = if cfg.batch_shift_sd > 0.0 {
        let scale = Uniform::new_inclusive(0.8, 1.2).expect("valid range");
        let shift = Normal::new(0.0, cfg.batch_shift_sd).expect("sd > 0");
        let mut draw = |k: usize| -> (Vec<f64>, Vec<f64>) {
            (0..k)
                .map(|_| (scale.sample(&mut rng), shift.sample(&mut rng)))
                .unzip()
        };
        let (image_scale, image_shift) = draw(cfg.d_img);
        let (gene_scale, gene_shift) = draw(cfg.n_genes);
        for (j, mut col) in image.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * image_scale[j] + image_shift[j]);
        }
        for (j, mut col) in expr.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v * gene_scale[j] + gene_shift[j] * COUNT_SCALE).max(0.0));
        }
        Some(BatchTransform {
            image_scale,
            image_shift,
            gene_scale,
            gene_shift,
        })
    } else {
        None
    };
    expr.mapv_inplace(f64::round);
    for mut row in expr.rows_mut() {
        if row.sum() == 0.0 {
            row[0] = 1.0;
        }
    }

    let coords = Array2::from_shape_fn((n, 2), |(i, j)| {
        let (r, c) = positions[i];
        GRID_SPACING * if j == 0 { c as f64 } else { r as f64 }
    });
    let ds = SpotDataset {
        image_features: image,
        gene_counts: expr,
        gene_names: default_gene_names(cfg.n_genes),
        coords,
        labels: Some(inside.iter().map(|&c| u8::from(c)).collect()),
        spot_diameter: 55.0,
        pixel_resolution: 0.5,
        dataset_id: format!("synth_{index}"),
        platform_tag: "synthetic".into(),
    };
    ds.validate()?;
    Ok((ds, DatasetTruth { latent, batch }))
}

/// Generates `cfg.n_datasets` datasets. Output depends only on `cfg`.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Vec<SpotDataset>> {
    Ok(generate_cohort_with_truth(cfg)?
        .into_iter()
        .map(|(ds, _)| ds)
        .collect())
}

/// As [`generate_cohort`], also returning latents and batch transforms.
pub fn generate_cohort_with_truth(cfg: &SynthConfig) -> Result<Vec<(SpotDataset, DatasetTruth)>> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, 0);
    let p = cfg.latent_dim as f64;
    let maps = SharedMaps {
        image: gaussian_matrix(cfg.latent_dim, cfg.d_img, 1.0 / p.sqrt(), &mut rng),
        gene: gaussian_matrix(cfg.latent_dim, cfg.n_genes, 1.0 / p.sqrt(), &mut rng),
        gene_bias: Array1::from_shape_simple_fn(cfg.n_genes, || rng.random_range(-1.0..1.0)),
    };
    crate::par::map_indexed(cfg.n_datasets, |d| generate_one(cfg, &maps, d))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn small() -> SynthConfig {
        SynthConfig {
            n_datasets: 2,
            spots_per_dataset: 100,
            grid_side: 10,
            cancer_fraction: 0.3,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    fn connected(ds: &SpotDataset, side: usize) -> bool {
        let labels = ds.labels.as_ref().unwrap();
        let n = labels.len();
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
        let mut seen = vec![false; n];
        let mut stack = vec![pos[0]];
        seen[pos[0]] = true;
        let mut reached = 1;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / side, i % side);
            let mut cand = vec![];
            if r > 0 {
                cand.push(i - side);
            }
            if c > 0 {
                cand.push(i - 1);
            }
            if c + 1 < side {
                cand.push(i + 1);
            }
            if i + side < n {
                cand.push(i + side);
            }
            for j in cand {
                if !seen[j] && labels[j] == 1 {
                    seen[j] = true;
                    reached += 1;
                    stack.push(j);
                }
            }
        }
        reached == pos.len()
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cancer_region_size_and_connectivity() {
        for seed in 0..10 {
            let cohort = generate_cohort(&SynthConfig { seed, ..small() }).unwrap();
            for ds in &cohort {
                let k: usize = ds.labels.as_ref().unwrap().iter().map(|&l| l as usize).sum();
                assert!((28..=32).contains(&k), "cancer count {k}");
                assert!(connected(ds, 10));
            }
        }
    }

    #[test]
    fn zero_batch_shift_means_no_transform() {
        let cfg = SynthConfig {
            batch_shift_sd: 0.0,
            ..small()
        };
        let cohort = generate_cohort_with_truth(&cfg).unwrap();
        assert!(cohort.iter().all(|(_, t)| t.batch.is_none()));
        let with = generate_cohort_with_truth(&small()).unwrap();
        assert!(with.iter().all(|(_, t)| t.batch.is_some()));
        assert_ne!(with[0].1.batch, with[1].1.batch);
    }

    #[test]
    fn batch_effect_is_detectable() {
        let cfg = SynthConfig {
            batch_shift_sd: 2.0,
            ..small()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let m0 = cohort[0].gene_counts.mean_axis(Axis(0)).unwrap();
        let m1 = cohort[1].gene_counts.mean_axis(Axis(0)).unwrap();
        let gap: f64 = (&m0 - &m1).mapv(f64::abs).sum() / m0.len() as f64;
        assert!(gap > 5.0, "mean column gap {gap}");
    }

    #[test]
    fn cancer_shift_lives_on_first_latent_coordinate() {
        let cfg = SynthConfig {
            spots_per_dataset: 400,
            grid_side: 20,
            ..small()
        };
        for (ds, truth) in generate_cohort_with_truth(&cfg).unwrap() {
            let labels = ds.labels.unwrap();
            let mean_of = |cls: u8, col: usize| {
                let v: Vec<f64> = (0..labels.len())
                    .filter(|&i| labels[i] == cls)
                    .map(|i| truth.latent[[i, col]])
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let gap0 = mean_of(1, 0) - mean_of(0, 0);
            let gap1 = mean_of(1, 1) - mean_of(0, 1);
            assert!((gap0 - CANCER_SHIFT).abs() < 0.4, "gap {gap0}");
            assert!(gap1.abs() < 0.4, "gap {gap1}");
        }
    }

    #[test]
    fn rejects_infeasible_configs() {
        assert!(generate_cohort(&SynthConfig { cancer_fraction: 0.001, ..small() }).is_err());
        assert!(generate_cohort(&SynthConfig { grid_side: 5, ..small() }).is_err());
        assert!(generate_cohort(&SynthConfig { cancer_fraction: 1.0, ..small() }).is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = small();
        let kv = KeyValues::parse("bogus=1\n", std::path::Path::new("c")).unwrap();
        let err = cfg.apply(&kv).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
