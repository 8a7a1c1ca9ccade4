//! Stage II: neighbor-aware bidirectional cross-attention fusion trained as a
//! variational autoencoder whose prior mean depends on the spot's class.
//!
//! For spot `i` the context matrices stack the aligned embeddings of `i`
//! and its `k` nearest neighbors (center first). The image-guided block
//! queries with image rows and attends over gene rows, the gene-guided block
//! does the reverse, and the two center-row outputs are concatenated and
//! mapped back to `d_model` by a linear layer plus layer normalization. An
//! MLP encoder turns that fused vector into `(μ, log σ²)`, a decoder
//! reconstructs it from `z = μ + σ ⊙ ε`, and the KL term pulls `q(z)` toward
//! `N(c_y, I)` where `c_0`, `c_1` are learnable class centers.

use std::collections::BTreeMap;

use crate::align::within_dataset_batches;
use crate::dataio::NeighborIndex;
use crate::diffcore::{
    normal_init, uniform_init, AdamConfig, LayerNorm, Linear, Mat, ParamStore, Tape, Var,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PREFIX: &str = "vrbca/";
pub const CENTERS: &str = "vrbca/centers/means";
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Which fusion network is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    Full,
    /// Context rows are mean-pooled per modality and concatenated; no attention.
    MeanPoolConcat,
    /// Plain autoencoder: `z = μ`, no KL term, zero log-variance downstream.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VrbcaConfig {
    pub k: usize,
    pub heads: usize,
    pub d_model: usize,
    pub enc_hidden: [usize; 2],
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub center_offset: f64,
    pub center_sd: f64,
    pub variant: FusionVariant,
}

impl Default for VrbcaConfig {
    fn default() -> Self {
        Self {
            k: 6,
            heads: 8,
            d_model: 512,
            enc_hidden: [256, 128],
            latent_dim: 64,
            beta: 0.5,
            epochs: 50,
            lr: 1e-5,
            batch_size: 128,
            center_offset: 0.5,
            center_sd: 0.01,
            variant: FusionVariant::Full,
        }
    }
}

impl VrbcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.latent_dim == 0 || self.enc_hidden.contains(&0) {
            return Err(Error::Argument("encoder widths must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Argument(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Aligned embeddings of one dataset plus its spatial neighbors.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedView<'a> {
    pub h_img: &'a Mat,
    pub h_gene: &'a Mat,
    pub neighbors: &'a NeighborIndex,
    pub labels: Option<&'a [u8]>,
}

impl EmbeddedView<'_> {
    pub fn n_spots(&self) -> usize {
        self.h_img.nrows()
    }
}

/// Row indices of the context of each spot in `idx`: the spot itself, then
/// its neighbors nearest first.
pub fn context_rows(neighbors: &NeighborIndex, idx: &[usize]) -> Vec<usize> {
    let mut rows = Vec::with_capacity(idx.len() * (neighbors.k() + 1));
    for &i in idx {
        rows.push(i);
        rows.extend_from_slice(neighbors.row(i));
    }
    rows
}

/// `(H_img, H_gene)` for spot `i`, each `(k+1) × d` with the spot at row 0.
pub fn build_context(
    h_img: &Mat,
    h_gene: &Mat,
    neighbors: &NeighborIndex,
    i: usize,
) -> Result<(Mat, Mat)> {
    if i >= neighbors.n_spots() || i >= h_img.nrows() || h_img.dim() != h_gene.dim() {
        return Err(Error::Argument(format!(
            "spot {i} out of range for {} spots",
            h_img.nrows().min(neighbors.n_spots())
        )));
    }
    let rows = context_rows(neighbors, &[i]);
    Ok((
        h_img.select(ndarray::Axis(0), &rows),
        h_gene.select(ndarray::Axis(0), &rows),
    ))
}

/// `rows` of `all · w`, multiplying whichever side is smaller first.
fn project_rows(tape: &mut Tape, all: Var, w: Var, rows: &[usize]) -> Result<Var> {
    if rows.len() >= tape.shape(all).0 {
        let p = tape.matmul(all, w)?;
        tape.gather_rows(p, rows)
    } else {
        let g = tape.gather_rows(all, rows)?;
        tape.matmul(g, w)
    }
}

fn mlp_names(prefix: &str, dims: &[usize]) -> Vec<Linear> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(format!("{prefix}/fc{}", i + 1), w[0], w[1]))
        .collect()
}

/// Linear layers with ReLU between them (none after the last).
fn mlp_forward(tape: &mut Tape, store: &ParamStore, layers: &[Linear], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(tape, store, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Symbolic outputs of one forward pass.
pub struct FusionVars {
    pub h_star: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Loss pieces of one batch.
pub struct FusedLossVars {
    pub loss: Var,
    pub recon: Var,
    pub kl: Option<Var>,
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VrbcaModel {
    pub cfg: VrbcaConfig,
    pub store: ParamStore,
}

impl VrbcaModel {
    pub fn new(cfg: VrbcaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let bound = (6.0 / (2 * d) as f64).sqrt();
        for block in ["ca_img", "ca_gene"] {
            for leaf in ["wq", "wk", "wv", "wo"] {
                store.insert(&format!("vrbca/{block}/{leaf}"), uniform_init(d, d, bound, rng))?;
            }
        }
        let model = Self { cfg, store };
        let mut store = model.store.clone();
        model.fuse_linear().init(&mut store, rng)?;
        model.fuse_norm().init(&mut store)?;
        for l in model.encoder_trunk().iter().chain(&model.decoder()) {
            l.init(&mut store, rng)?;
        }
        model.mu_head().init(&mut store, rng)?;
        model.logvar_head().init(&mut store, rng)?;
        let (c, s, l) = (model.cfg.center_offset, model.cfg.center_sd, model.cfg.latent_dim);
        let mut centers = Mat::zeros((2, l));
        centers.row_mut(0).assign(&normal_init(1, l, -c, s, rng).row(0));
        centers.row_mut(1).assign(&normal_init(1, l, c, s, rng).row(0));
        store.insert(CENTERS, centers)?;
        Ok(Self { store, ..model })
    }

    fn fuse_linear(&self) -> Linear {
        Linear::new("vrbca/fuse/linear", 2 * self.cfg.d_model, self.cfg.d_model)
    }

    fn fuse_norm(&self) -> LayerNorm {
        LayerNorm::new("vrbca/fuse/norm", self.cfg.d_model)
    }

    fn encoder_trunk(&self) -> Vec<Linear> {
        let [h1, h2] = self.cfg.enc_hidden;
        mlp_names("vrbca/enc", &[self.cfg.d_model, h1, h2])
    }

    fn mu_head(&self) -> Linear {
        Linear::new("vrbca/enc/mu", self.cfg.enc_hidden[1], self.cfg.latent_dim)
    }

    fn logvar_head(&self) -> Linear {
        Linear::new("vrbca/enc/logvar", self.cfg.enc_hidden[1], self.cfg.latent_dim)
    }

    fn decoder(&self) -> Vec<Linear> {
        let [h1, h2] = self.cfg.enc_hidden;
        mlp_names("vrbca/dec", &[self.cfg.latent_dim, h2, h1, self.cfg.d_model])
    }

    /// Single cross-attention block: center queries from `q_all`, keys and
    /// values from the context rows of `kv_all`.
    #[allow(clippy::too_many_arguments)]
    fn cross_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &str,
        q_all: Var,
        kv_all: Var,
        centers: &[usize],
        ctx: &[usize],
    ) -> Result<Var> {
        let p = |leaf: &str| format!("vrbca/{block}/{leaf}");
        let wq = tape.param(store, &p("wq"))?;
        let wk = tape.param(store, &p("wk"))?;
        let wv = tape.param(store, &p("wv"))?;
        let wo = tape.param(store, &p("wo"))?;
        let q = project_rows(tape, q_all, wq, centers)?;
        let k = project_rows(tape, kv_all, wk, ctx)?;
        let v = project_rows(tape, kv_all, wv, ctx)?;
        let group = ctx.len() / centers.len();
        let heads = tape.grouped_attention(q, k, v, self.cfg.heads, 1, group)?;
        tape.matmul(heads, wo)
    }

    /// Fused vectors `h*` for the spots `centers`, whose contexts are the
    /// consecutive groups of `ctx` (each group starts with its center).
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_img: Var,
        h_gene: Var,
        centers: &[usize],
        ctx: &[usize],
    ) -> Result<Var> {
        for v in [h_img, h_gene] {
            if tape.shape(v).1 != self.cfg.d_model {
                return Err(Error::Dimension(format!(
                    "embedding width {} != d_model {}",
                    tape.shape(v).1,
                    self.cfg.d_model
                )));
            }
        }
        if centers.is_empty() || !ctx.len().is_multiple_of(centers.len()) {
            return Err(Error::Dimension("context rows do not tile the centers".into()));
        }
        let joined = match self.cfg.variant {
            FusionVariant::MeanPoolConcat => {
                let group = ctx.len() / centers.len();
                let gi = tape.gather_rows(h_img, ctx)?;
                let gg = tape.gather_rows(h_gene, ctx)?;
                let mi = tape.group_mean_rows(gi, group)?;
                let mg = tape.group_mean_rows(gg, group)?;
                tape.concat_cols(&[mi, mg])?
            }
            _ => {
                let z_img = self.cross_attend(tape, store, "ca_img", h_img, h_gene, centers, ctx)?;
                let z_gene = self.cross_attend(tape, store, "ca_gene", h_gene, h_img, centers, ctx)?;
                tape.concat_cols(&[z_img, z_gene])?
            }
        };
        let lin = self.fuse_linear().forward(tape, store, joined)?;
        self.fuse_norm().forward(tape, store, lin)
    }

    /// `(μ, log σ²)` of fused vectors, log-variance clamped to ±10. The
    /// deterministic variant returns a zero log-variance constant.
    pub fn encode_on_tape(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let trunk = mlp_forward(tape, store, &self.encoder_trunk(), h)?;
        let trunk = tape.relu(trunk);
        let mu = self.mu_head().forward(tape, store, trunk)?;
        let logvar = match self.cfg.variant {
            FusionVariant::Deterministic => tape.constant(Mat::zeros(tape.shape(mu))),
            _ => {
                let raw = self.logvar_head().forward(tape, store, trunk)?;
                tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
            }
        };
        Ok((mu, logvar))
    }

    pub fn decode_on_tape(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        mlp_forward(tape, store, &self.decoder(), z)
    }

    /// Fusion and encoding of the spots `idx` of `data`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        data: &EmbeddedView<'_>,
        idx: &[usize],
    ) -> Result<FusionVars> {
        if data.neighbors.k() != self.cfg.k.min(data.n_spots().saturating_sub(1)) {
            return Err(Error::Argument(format!(
                "neighbor index has k = {}, model expects {}",
                data.neighbors.k(),
                self.cfg.k
            )));
        }
        let h_img = tape.constant(data.h_img.clone());
        let h_gene = tape.constant(data.h_gene.clone());
        let ctx = context_rows(data.neighbors, idx);
        let h_star = self.fuse_on_tape(tape, store, h_img, h_gene, idx, &ctx)?;
        let (mu, logvar) = self.encode_on_tape(tape, store, h_star)?;
        Ok(FusionVars { h_star, mu, logvar })
    }

    /// Records the fused objective of the spots `idx`:
    /// `mean_i ‖ĥ*_i − h*_i‖² + β · mean_i KL(q_i ‖ N(c_{y_i}, I))`, with the
    /// caller-supplied noise `eps` (`|idx| × latent_dim`).
    pub fn fused_loss_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        data: &EmbeddedView<'_>,
        idx: &[usize],
        eps: &Mat,
    ) -> Result<FusedLossVars> {
        let labels = data
            .labels
            .ok_or_else(|| Error::Validation("fusion training needs labeled spots".into()))?;
        if eps.dim() != (idx.len(), self.cfg.latent_dim) {
            return Err(Error::Dimension(format!(
                "noise is {:?}, expected {:?}",
                eps.dim(),
                (idx.len(), self.cfg.latent_dim)
            )));
        }
        let fv = self.forward_on_tape(tape, store, data, idx)?;
        let b = idx.len() as f64;
        let deterministic = self.cfg.variant == FusionVariant::Deterministic;
        let z = if deterministic {
            fv.mu
        } else {
            let half = tape.scale(fv.logvar, 0.5);
            let sd = tape.exp(half);
            let noise = tape.mul_const(sd, eps.clone())?;
            tape.add(fv.mu, noise)?
        };
        let h_hat = self.decode_on_tape(tape, store, z)?;
        let r = tape.sub(h_hat, fv.h_star)?;
        let r2 = tape.mul(r, r)?;
        let r_sum = tape.sum(r2);
        let recon = tape.scale(r_sum, 1.0 / b);
        if deterministic {
            return Ok(FusedLossVars {
                loss: recon,
                recon,
                kl: None,
                mu: fv.mu,
                logvar: fv.logvar,
            });
        }
        let centers = tape.param(store, CENTERS)?;
        let ys: Vec<usize> = idx.iter().map(|&i| usize::from(labels[i])).collect();
        let c = tape.gather_rows(centers, &ys)?;
        let var = tape.exp(fv.logvar);
        let diff = tape.sub(fv.mu, c)?;
        let d2 = tape.mul(diff, diff)?;
        let t = tape.add(var, d2)?;
        let t = tape.sub(t, fv.logvar)?;
        let s = tape.sum(t);
        let s = tape.add_scalar(s, -(b * self.cfg.latent_dim as f64));
        let kl = tape.scale(s, 0.5 / b);
        let weighted = tape.scale(kl, self.cfg.beta);
        let loss = tape.add(recon, weighted)?;
        Ok(FusedLossVars {
            loss,
            recon,
            kl: Some(kl),
            mu: fv.mu,
            logvar: fv.logvar,
        })
    }

    /// Fused loss value and parameter gradients for `idx` with fixed noise.
    pub fn fused_loss(
        &self,
        store: &ParamStore,
        data: &EmbeddedView<'_>,
        idx: &[usize],
        eps: &Mat,
    ) -> Result<(f64, BTreeMap<String, Mat>)> {
        let mut tape = Tape::new();
        let out = self.fused_loss_on_tape(&mut tape, store, data, idx, eps)?;
        let value = tape.scalar(out.loss);
        let grads = tape.backward(out.loss)?;
        Ok((value, grads.params))
    }

    /// Inference over every spot: `(h*, μ, log σ²)`.
    pub fn embed(&self, data: &EmbeddedView<'_>) -> Result<(Mat, Mat, Mat)> {
        let idx: Vec<usize> = (0..data.n_spots()).collect();
        let mut tape = Tape::new();
        let fv = self.forward_on_tape(&mut tape, &self.store, data, &idx)?;
        let out = (
            tape.value(fv.h_star).clone(),
            tape.value(fv.mu).clone(),
            tape.value(fv.logvar).clone(),
        );
        if out.1.iter().chain(out.2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("fusion produced non-finite latents".into()));
        }
        Ok(out)
    }

    pub fn class_centers(&self) -> &Mat {
        self.store.get(CENTERS).expect("centers initialized")
    }
}

/// Fused vector of one spot from its context matrices (center at row 0).
pub fn bca_fuse(model: &VrbcaModel, h_img: &Mat, h_gene: &Mat) -> Result<Mat> {
    if h_img.dim() != h_gene.dim() || h_img.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "context shapes {:?} and {:?}",
            h_img.dim(),
            h_gene.dim()
        )));
    }
    let mut tape = Tape::new();
    let vi = tape.constant(h_img.clone());
    let vg = tape.constant(h_gene.clone());
    let ctx: Vec<usize> = (0..h_img.nrows()).collect();
    let h = model.fuse_on_tape(&mut tape, &model.store, vi, vg, &[0], &ctx)?;
    Ok(tape.value(h).clone())
}

/// `(μ, log σ²)` of fused row vectors.
pub fn rvae_encode(model: &VrbcaModel, h_star: &Mat) -> Result<(Mat, Mat)> {
    let mut tape = Tape::new();
    let h = tape.constant(h_star.clone());
    let (mu, lv) = model.encode_on_tape(&mut tape, &model.store, h)?;
    Ok((tape.value(mu).clone(), tape.value(lv).clone()))
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(mu: &Mat, logvar: &Mat, eps: &Mat) -> Result<Mat> {
    if mu.dim() != logvar.dim() || mu.dim() != eps.dim() {
        return Err(Error::Dimension("reparameterize: shape mismatch".into()));
    }
    Ok(mu + &(logvar.mapv(|v| (0.5 * v).exp()) * eps))
}

/// `½ Σ_j [σ_j² + (μ_j − c_j)² − log σ_j² − 1]`.
pub fn class_kl(mu: &[f64], logvar: &[f64], center: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .zip(center)
        .map(|((&m, &lv), &c)| lv.exp() + (m - c).powi(2) - lv - 1.0)
        .sum::<f64>()
}

pub(crate) fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    use rand_distr::{Distribution, StandardNormal};
    Mat::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Trains the fusion network on frozen stage-I embeddings for `cfg.epochs`
/// epochs of within-dataset batches, one noise draw per spot per step.
/// Returns the model and the mean loss of each epoch.
pub fn train_fusion(
    data: &[EmbeddedView<'_>],
    cfg: &VrbcaConfig,
    rng: &mut Rng,
) -> Result<(VrbcaModel, Vec<f64>)> {
    let model = VrbcaModel::new(cfg.clone(), rng)?;
    continue_fusion(model, data, rng)
}

/// Runs `model.cfg.epochs` further epochs of fusion training.
pub fn continue_fusion(
    mut model: VrbcaModel,
    data: &[EmbeddedView<'_>],
    rng: &mut Rng,
) -> Result<(VrbcaModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Argument("fusion needs at least one dataset".into()));
    }
    if let Some(i) = data.iter().position(|d| d.labels.is_none()) {
        return Err(Error::Validation(format!("source dataset {i} is unlabeled")));
    }
    let cfg = model.cfg.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let sizes: Vec<usize> = data.iter().map(EmbeddedView::n_spots).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = within_dataset_batches(&sizes, cfg.batch_size, rng);
        let mut total = 0.0;
        for (d, idx) in &batches {
            let eps = standard_normal(idx.len(), cfg.latent_dim, rng);
            let (loss, grads) = model.fused_loss(&model.store, &data[*d], idx, &eps)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("fused loss became {loss}")));
            }
            model.store.update_owned(&grads, &[], &adam)?;
            total += loss;
        }
        trace.push(total / batches.len().max(1) as f64);
    }
    Ok((model, trace))
}
