//! Stage I: contrastive alignment of image and gene embeddings.
//!
//! Two MLP encoders map each modality into a shared space with unit-norm
//! rows. Matched (image, gene) rows of a batch are positives, every other
//! pairing in the batch is a negative, and the loss is a weighted sum of the
//! row-wise and column-wise InfoNCE terms.

use ndarray::Axis;
use rand::seq::SliceRandom;

use crate::diffcore::{dropout, AdamConfig, BatchNorm, Linear, Mat, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Running-statistic updates recorded by batch normalization in training mode.
pub type BufferUpdates = Vec<(String, Mat)>;

pub const PREFIX: &str = "align/";

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub hidden: [usize; 2],
    pub proj_dim: usize,
    pub dropout: f64,
    pub tau: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            hidden: [1024, 512],
            proj_dim: 512,
            dropout: 0.2,
            tau: 0.07,
            alpha: 0.5,
            epochs: 100,
            lr: 1e-5,
            batch_size: 128,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Argument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Argument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size < 2 {
            return Err(Error::Argument("alignment batch size must be at least 2".into()));
        }
        if self.hidden.contains(&0) || self.proj_dim == 0 {
            return Err(Error::Argument("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Gene,
}

impl Modality {
    fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "align/img",
            Modality::Gene => "align/gene",
        }
    }
}

struct Encoder {
    hidden: Vec<(Linear, BatchNorm)>,
    out: Linear,
}

impl Encoder {
    fn new(modality: Modality, in_dim: usize, cfg: &AlignConfig) -> Self {
        let p = modality.prefix();
        let [h1, h2] = cfg.hidden;
        Self {
            hidden: vec![
                (Linear::new(format!("{p}/fc1"), in_dim, h1), BatchNorm::new(format!("{p}/bn1"), h1)),
                (Linear::new(format!("{p}/fc2"), h1, h2), BatchNorm::new(format!("{p}/bn2"), h2)),
            ],
            out: Linear::new(format!("{p}/out"), h2, cfg.proj_dim),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for (lin, bn) in &self.hidden {
            lin.init(store, rng)?;
            bn.init(store)?;
        }
        self.out.init(store, rng)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        drop_rate: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let mut h = x;
        for (lin, bn) in &self.hidden {
            h = lin.forward(tape, store, h)?;
            h = bn.forward(tape, store, h, training)?;
            h = tape.relu(h);
            h = dropout(tape, h, drop_rate, training, rng)?;
        }
        let out = self.out.forward(tape, store, h)?;
        Ok(tape.l2_normalize_rows(out))
    }
}

/// Image and gene encoders with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub cfg: AlignConfig,
    pub d_img: usize,
    pub n_genes: usize,
    pub store: ParamStore,
}

impl AlignmentModel {
    pub fn new(cfg: AlignConfig, d_img: usize, n_genes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        Encoder::new(Modality::Image, d_img, &cfg).init(&mut store, rng)?;
        Encoder::new(Modality::Gene, n_genes, &cfg).init(&mut store, rng)?;
        Ok(Self {
            cfg,
            d_img,
            n_genes,
            store,
        })
    }

    fn encoder(&self, modality: Modality) -> Encoder {
        let in_dim = match modality {
            Modality::Image => self.d_img,
            Modality::Gene => self.n_genes,
        };
        Encoder::new(modality, in_dim, &self.cfg)
    }

    fn check_input(&self, modality: Modality, x: &Mat) -> Result<()> {
        let want = match modality {
            Modality::Image => self.d_img,
            Modality::Gene => self.n_genes,
        };
        if x.ncols() != want {
            return Err(Error::Dimension(format!(
                "{modality:?} encoder expects {want} features, got {}",
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite {modality:?} input")));
        }
        Ok(())
    }

    /// Records the encoder forward pass on `tape`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        modality: Modality,
        x: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.encoder(modality)
            .forward(tape, store, x, self.cfg.dropout, training, rng)
    }

    fn encode(&self, modality: Modality, x: &Mat, training: bool, rng: &mut Rng) -> Result<Mat> {
        self.check_input(modality, x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = self.encode_on_tape(&mut tape, &self.store, modality, xv, training, rng)?;
        let out = tape.value(h).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{modality:?} encoder produced NaN")));
        }
        Ok(out)
    }

    /// Unit-norm image embeddings. In inference mode batch normalization
    /// uses running statistics and dropout is off, so each row is encoded
    /// independently of the rest of the batch.
    pub fn encode_image(&self, x: &Mat, training: bool, rng: &mut Rng) -> Result<Mat> {
        self.encode(Modality::Image, x, training, rng)
    }

    pub fn encode_gene(&self, x: &Mat, training: bool, rng: &mut Rng) -> Result<Mat> {
        self.encode(Modality::Gene, x, training, rng)
    }

    /// Both embeddings in inference mode.
    pub fn embed(&self, image: &Mat, gene: &Mat) -> Result<(Mat, Mat)> {
        // inference draws nothing from the generator
        let mut rng = crate::rng::seeded(0);
        Ok((
            self.encode_image(image, false, &mut rng)?,
            self.encode_gene(gene, false, &mut rng)?,
        ))
    }
}

/// `S_ij = (h_i^img · h_j^gene) / τ`.
pub fn similarity_matrix(h_img: &Mat, h_gene: &Mat, tau: f64) -> Result<Mat> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    if h_img.dim() != h_gene.dim() {
        return Err(Error::Dimension(format!(
            "similarity of {:?} and {:?} embeddings",
            h_img.dim(),
            h_gene.dim()
        )));
    }
    Ok(crate::diffcore::matmul(h_img.view(), h_gene.t()) / tau)
}

fn neg_log_softmax_diag(s: &Mat) -> Vec<f64> {
    s.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[i]
        })
        .collect()
}

/// Per-spot terms `−log softmax` of the matched pair, row-wise (image to
/// gene) and column-wise (gene to image).
pub fn infonce_terms(s: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.nrows() != s.ncols() || s.is_empty() {
        return Err(Error::Dimension(format!("InfoNCE needs a square matrix, got {:?}", s.dim())));
    }
    Ok((neg_log_softmax_diag(s), neg_log_softmax_diag(&s.t().to_owned())))
}

/// `α · L_img→gene + (1 − α) · L_gene→img`.
pub fn infonce_bidirectional(s: &Mat, alpha: f64) -> Result<f64> {
    let (rows, cols) = infonce_terms(s)?;
    let b = rows.len() as f64;
    let l_ig = rows.iter().sum::<f64>() / b;
    let l_gi = cols.iter().sum::<f64>() / b;
    Ok(alpha * l_ig + (1.0 - alpha) * l_gi)
}

/// Records the bidirectional InfoNCE loss of two embedding batches.
pub fn infonce_on_tape(tape: &mut Tape, h_img: Var, h_gene: Var, tau: f64, alpha: f64) -> Result<Var> {
    let raw = tape.matmul_nt(h_img, h_gene)?;
    let s = tape.scale(raw, 1.0 / tau);
    let st = tape.transpose(s);
    let rows = tape.diag_log_softmax_rows(s)?;
    let cols = tape.diag_log_softmax_rows(st)?;
    let l_ig = tape.mean(rows);
    let l_gi = tape.mean(cols);
    let a = tape.scale(l_ig, -alpha);
    let b = tape.scale(l_gi, -(1.0 - alpha));
    tape.add(a, b)
}

/// Contrastive loss of one batch plus parameter gradients. Used by training
/// and gradient checks.
pub fn contrastive_loss(
    model: &AlignmentModel,
    store: &ParamStore,
    image: &Mat,
    gene: &Mat,
    training: bool,
    rng: &mut Rng,
) -> Result<(f64, std::collections::BTreeMap<String, Mat>, BufferUpdates)> {
    let mut tape = Tape::new();
    let xi = tape.constant(image.clone());
    let xg = tape.constant(gene.clone());
    let hi = model.encode_on_tape(&mut tape, store, Modality::Image, xi, training, rng)?;
    let hg = model.encode_on_tape(&mut tape, store, Modality::Gene, xg, training, rng)?;
    let loss = infonce_on_tape(&mut tape, hi, hg, model.cfg.tau, model.cfg.alpha)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Training(format!("contrastive loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.params, tape.take_buffer_updates()))
}

/// Paired features of one dataset.
#[derive(Debug, Clone, Copy)]
pub struct PairedView<'a> {
    pub image: &'a Mat,
    pub gene: &'a Mat,
}

/// Shuffled within-dataset batches of at least two spots: the leftover
/// single spot of a dataset joins the previous batch.
pub(crate) fn within_dataset_batches(
    sizes: &[usize],
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<(usize, Vec<usize>)> {
    let mut batches = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let last = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").extend(last);
        }
        batches.extend(chunks.into_iter().filter(|c| c.len() >= 2).map(|c| (d, c)));
    }
    batches.shuffle(rng);
    batches
}

/// Trains both encoders for `cfg.epochs` epochs over shuffled within-dataset
/// batches. Returns the model and the mean loss of every epoch.
pub fn train_alignment(
    data: &[PairedView<'_>],
    cfg: &AlignConfig,
    rng: &mut Rng,
) -> Result<(AlignmentModel, Vec<f64>)> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Argument("alignment needs at least one dataset".into()))?;
    let (d_img, n_genes) = (first.image.ncols(), first.gene.ncols());
    for (i, v) in data.iter().enumerate() {
        if v.image.ncols() != d_img || v.gene.ncols() != n_genes {
            return Err(Error::Dimension(format!(
                "dataset {i} has {}/{} features, expected {d_img}/{n_genes}",
                v.image.ncols(),
                v.gene.ncols()
            )));
        }
        if v.image.nrows() != v.gene.nrows() {
            return Err(Error::Dimension(format!("dataset {i}: modality row counts differ")));
        }
    }
    let mut model = AlignmentModel::new(cfg.clone(), d_img, n_genes, rng)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let sizes: Vec<usize> = data.iter().map(|v| v.image.nrows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let batches = within_dataset_batches(&sizes, cfg.batch_size, rng);
        let mut total = 0.0;
        for (d, idx) in &batches {
            let image = data[*d].image.select(Axis(0), idx);
            let gene = data[*d].gene.select(Axis(0), idx);
            let (loss, grads, updates) =
                contrastive_loss(&model, &model.store, &image, &gene, true, rng)?;
            model.store.update_owned(&grads, &updates, &adam)?;
            total += loss;
        }
        trace.push(total / batches.len().max(1) as f64);
    }
    Ok((model, trace))
}
