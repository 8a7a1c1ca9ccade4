//! Stage III: the cancer-likelihood classifier on `μ ‖ log σ²`, its joint
//! training with the fusion network, mixture-based thresholding and calls.

mod gmm;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::align::within_dataset_batches;
use crate::diffcore::{sigmoid, AdamConfig, Linear, Mat, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::fusion::{standard_normal, EmbeddedView, VrbcaModel};
use crate::rng::Rng;

pub use gmm::{
    binarize, fit_gmm_1d, gmm_threshold, threshold_coefficients, GmmParams, ThresholdMethod,
    ThresholdResult, VARIANCE_FLOOR,
};

pub const PREFIX: &str = "cls/";

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gamma: 0.1,
            epochs: 50,
            lr: 1e-5,
            batch_size: 128,
        }
    }
}

/// Two-layer MLP `2·latent → hidden → 1` producing a logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    pub cfg: DiscriminatorConfig,
    pub latent_dim: usize,
    pub store: ParamStore,
}

impl DiscriminatorModel {
    pub fn new(cfg: DiscriminatorConfig, latent_dim: usize, rng: &mut Rng) -> Result<Self> {
        if cfg.hidden == 0 || latent_dim == 0 {
            return Err(Error::Argument("classifier widths must be positive".into()));
        }
        if !(cfg.gamma >= 0.0) {
            return Err(Error::Argument(format!("gamma must be non-negative, got {}", cfg.gamma)));
        }
        let mut store = ParamStore::new();
        let model = Self {
            cfg,
            latent_dim,
            store: ParamStore::new(),
        };
        for l in model.layers() {
            l.init(&mut store, rng)?;
        }
        Ok(Self { store, ..model })
    }

    fn layers(&self) -> [Linear; 2] {
        [
            Linear::new("cls/fc1", 2 * self.latent_dim, self.cfg.hidden),
            Linear::new("cls/fc2", self.cfg.hidden, 1),
        ]
    }

    /// Logits (n×1) of `μ ‖ log σ²` rows.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mu: crate::diffcore::Var,
        logvar: crate::diffcore::Var,
    ) -> Result<crate::diffcore::Var> {
        let x = tape.concat_cols(&[mu, logvar])?;
        let [l1, l2] = self.layers();
        let h = l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        l2.forward(tape, store, h)
    }
}

/// Mean binary cross-entropy of probabilities, clipped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean binary cross-entropy of logits in the overflow-free form.
pub fn bce_loss_logits(logits: &[f64], labels: &[u8]) -> Result<f64> {
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Mat::from_shape_vec((logits.len(), 1), logits.to_vec()).map_err(|e| Error::Dimension(e.to_string()))?);
    let l = tape.bce_with_logits(x, &targets)?;
    Ok(tape.scalar(l))
}

/// Loss terms of one stage-III batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsLoss {
    pub total: f64,
    pub bce: f64,
    pub fused: f64,
}

/// `L_BCE + γ · L_fused` on spots `idx` with fixed noise `eps`, plus
/// gradients for both parameter groups. `vstore` and `dstore` may be the
/// same merged store.
pub fn cls_loss(
    vrbca: &VrbcaModel,
    vstore: &ParamStore,
    disc: &DiscriminatorModel,
    dstore: &ParamStore,
    data: &EmbeddedView<'_>,
    idx: &[usize],
    eps: &Mat,
) -> Result<(ClsLoss, BTreeMap<String, Mat>)> {
    let labels = data
        .labels
        .ok_or_else(|| Error::Validation("classifier training needs labeled spots".into()))?;
    let mut tape = Tape::new();
    let fused = vrbca.fused_loss_on_tape(&mut tape, vstore, data, idx, eps)?;
    let logits = disc.logits_on_tape(&mut tape, dstore, fused.mu, fused.logvar)?;
    let targets: Vec<f64> = idx.iter().map(|&i| f64::from(labels[i])).collect();
    let bce = tape.bce_with_logits(logits, &targets)?;
    let weighted = tape.scale(fused.loss, disc.cfg.gamma);
    let total = tape.add(bce, weighted)?;
    let loss = ClsLoss {
        total: tape.scalar(total),
        bce: tape.scalar(bce),
        fused: tape.scalar(fused.loss),
    };
    let grads = tape.backward(total)?;
    Ok((loss, grads.params))
}

/// Trains the classifier for `cfg.epochs` epochs while fine-tuning the fusion
/// network on the same objective. Returns both models and the mean total
/// loss of each epoch.
pub fn train_discriminator(
    mut vrbca: VrbcaModel,
    mut disc: DiscriminatorModel,
    data: &[EmbeddedView<'_>],
    rng: &mut Rng,
) -> Result<(VrbcaModel, DiscriminatorModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Argument("classifier needs at least one dataset".into()));
    }
    if let Some(i) = data.iter().position(|d| d.labels.is_none()) {
        return Err(Error::Validation(format!("source dataset {i} is unlabeled")));
    }
    if disc.latent_dim != vrbca.cfg.latent_dim {
        return Err(Error::Dimension(format!(
            "classifier expects latent width {}, fusion has {}",
            disc.latent_dim, vrbca.cfg.latent_dim
        )));
    }
    let cfg = disc.cfg.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let sizes: Vec<usize> = data.iter().map(EmbeddedView::n_spots).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = within_dataset_batches(&sizes, cfg.batch_size, rng);
        let mut total = 0.0;
        for (d, idx) in &batches {
            let eps = standard_normal(idx.len(), vrbca.cfg.latent_dim, rng);
            let (loss, grads) =
                cls_loss(&vrbca, &vrbca.store, &disc, &disc.store, &data[*d], idx, &eps)?;
            if !loss.total.is_finite() {
                return Err(Error::Training(format!("classifier loss became {}", loss.total)));
            }
            vrbca.store.update_owned(&grads, &[], &adam)?;
            disc.store.update_owned(&grads, &[], &adam)?;
            total += loss.total;
        }
        trace.push(total / batches.len().max(1) as f64);
    }
    Ok((vrbca, disc, trace))
}

/// Cancer likelihood of every spot: `sigmoid(f_cls(μ ‖ log σ²))`, with no
/// sampling.
pub fn predict_scores(vrbca: &VrbcaModel, disc: &DiscriminatorModel, data: &EmbeddedView<'_>) -> Result<Vec<f64>> {
    if data.h_img.ncols() != vrbca.cfg.d_model {
        return Err(Error::Dimension(format!(
            "embeddings have width {}, model expects {}",
            data.h_img.ncols(),
            vrbca.cfg.d_model
        )));
    }
    let idx: Vec<usize> = (0..data.n_spots()).collect();
    let mut tape = Tape::new();
    let fv = vrbca.forward_on_tape(&mut tape, &vrbca.store, data, &idx)?;
    let logits = disc.logits_on_tape(&mut tape, &disc.store, fv.mu, fv.logvar)?;
    let scores: Vec<f64> = tape.value(logits).iter().map(|&x| sigmoid(x)).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(scores)
}

/// One row of the scores table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub spot_index: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub call: u8,
    pub threshold_method: ThresholdMethod,
}

pub const SCORES_HEADER: &str = "spot_index\tx\ty\tscore\tcall\tthreshold_method";

pub fn write_scores_tsv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 48);
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.spot_index,
            r.x,
            r.y,
            r.score,
            r.call,
            r.threshold_method.as_str()
        )
        .expect("writing to a String cannot fail");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores_tsv(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SCORES_HEADER) {
        return Err(Error::format(path, "missing or unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            Ok(ScoreRow {
                spot_index: f[0].parse().map_err(|_| bad("bad spot_index"))?,
                x: f[1].parse().map_err(|_| bad("bad x"))?,
                y: f[2].parse().map_err(|_| bad("bad y"))?,
                score: f[3].parse().map_err(|_| bad("bad score"))?,
                call: match f[4] {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(bad("call must be 0 or 1")),
                },
                threshold_method: ThresholdMethod::parse(f[5]).ok_or_else(|| bad("bad threshold_method"))?,
            })
        })
        .collect()
}

/// Mixture fit, threshold and calls for one score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Calls {
    pub gmm: GmmParams,
    pub threshold: ThresholdResult,
    pub calls: Vec<u8>,
}

/// Fits the mixture on `fit_scores` and binarizes `scores` at its
/// intersection threshold (midpoint fallback when the fit degenerates).
pub fn call_spots(scores: &[f64], fit_scores: &[f64]) -> Result<Calls> {
    let gmm = fit_gmm_1d(fit_scores, 200, 1e-8)?;
    let threshold = if gmm.converged || gmm.iterations > 0 {
        gmm_threshold(&gmm)
    } else {
        ThresholdResult {
            theta: 0.5 * (gmm.mu[0] + gmm.mu[1]),
            method: ThresholdMethod::MidpointFallback,
            coefficients: None,
        }
    };
    Ok(Calls {
        calls: binarize(scores, threshold.theta),
        gmm,
        threshold,
    })
}
