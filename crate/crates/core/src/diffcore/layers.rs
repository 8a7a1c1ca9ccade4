//! Parameterized building blocks evaluated on a [`Tape`].

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::ParamStore;
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn normal_init(rows: usize, cols: usize, mean: f64, sd: f64, rng: &mut Rng) -> Mat {
    let dist = Normal::new(mean, sd).expect("sd >= 0");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Fully connected layer `x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}/weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}/bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let bound = 1.0 / (self.in_dim.max(1) as f64).sqrt();
        store.insert(&self.weight(), uniform_init(self.in_dim, self.out_dim, bound, rng))?;
        store.insert(&self.bias(), uniform_init(1, self.out_dim, bound, rng))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight())?;
        let b = tape.param(store, &self.bias())?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Row-wise normalization followed by a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&format!("{}/scale", self.name), Mat::ones((1, self.dim)))?;
        store.insert(&format!("{}/shift", self.name), Mat::zeros((1, self.dim)))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let scale = tape.param(store, &format!("{}/scale", self.name))?;
        let shift = tape.param(store, &format!("{}/shift", self.name))?;
        let xhat = tape.row_normalize(x, self.eps);
        let y = tape.mul_row(xhat, scale)?;
        tape.add_row(y, shift)
    }
}

/// Batch normalization: batch statistics while training (updating running
/// estimates), running estimates at inference so single rows are encoded
/// independently of their batch.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn key(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&self.key("gamma"), Mat::ones((1, self.dim)))?;
        store.insert(&self.key("beta"), Mat::zeros((1, self.dim)))?;
        store.insert_buffer(&self.key("running_mean"), Mat::zeros((1, self.dim)))?;
        store.insert_buffer(&self.key("running_var"), Mat::ones((1, self.dim)))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let gamma = tape.param(store, &self.key("gamma"))?;
        let beta = tape.param(store, &self.key("beta"))?;
        let xhat = if training {
            let rows = tape.shape(x).0;
            if rows < 2 {
                return Err(Error::Argument(
                    "batch normalization in training mode needs at least two rows".into(),
                ));
            }
            let (xhat, means, vars) = tape.col_normalize(x, self.eps);
            let rm = store.get(&self.key("running_mean")).expect("initialized");
            let rv = store.get(&self.key("running_var")).expect("initialized");
            let unbias = rows as f64 / (rows - 1) as f64;
            let m = self.momentum;
            let new_mean = Mat::from_shape_fn((1, self.dim), |(_, j)| {
                (1.0 - m) * rm[[0, j]] + m * means[j]
            });
            let new_var = Mat::from_shape_fn((1, self.dim), |(_, j)| {
                (1.0 - m) * rv[[0, j]] + m * vars[j] * unbias
            });
            tape.record_buffer_update(&self.key("running_mean"), new_mean);
            tape.record_buffer_update(&self.key("running_var"), new_var);
            xhat
        } else {
            let rm = store.get(&self.key("running_mean")).expect("initialized");
            let rv = store.get(&self.key("running_var")).expect("initialized");
            let neg_mean = tape.constant(rm.mapv(|v| -v));
            let inv_std = tape.constant(rv.mapv(|v| 1.0 / (v + self.eps).sqrt()));
            let centered = tape.add_row(x, neg_mean)?;
            tape.mul_row(centered, inv_std)?
        };
        let y = tape.mul_row(xhat, gamma)?;
        tape.add_row(y, beta)
    }
}

/// Inverted dropout: in training, zero each entry with probability `rate`
/// and scale survivors by `1/(1-rate)`; identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_simple_fn(tape.shape(x), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const(x, mask)
}

/// Multi-head attention with per-head projections stored side by side:
/// columns `h*d_h..(h+1)*d_h` of `wq`, `wk`, `wv` are head `h`'s
/// projections, and `wo` maps the concatenated heads back to `d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Argument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            name: name.into(),
            d_model,
            heads,
        })
    }

    pub fn key(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let d = self.d_model;
        let bound = (6.0 / (2 * d) as f64).sqrt();
        for leaf in ["wq", "wk", "wv", "wo"] {
            store.insert(&self.key(leaf), uniform_init(d, d, bound, rng))?;
        }
        Ok(())
    }

    /// `queries` has `groups * q_group` rows; `context` supplies keys and
    /// values with `groups * kv_group` rows. Each group attends only within
    /// itself.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
        q_group: usize,
        kv_group: usize,
    ) -> Result<Var> {
        for v in [queries, keys, values] {
            if tape.shape(v).1 != self.d_model {
                return Err(Error::Dimension(format!(
                    "attention input width {} != d_model {}",
                    tape.shape(v).1,
                    self.d_model
                )));
            }
        }
        let wq = tape.param(store, &self.key("wq"))?;
        let wk = tape.param(store, &self.key("wk"))?;
        let wv = tape.param(store, &self.key("wv"))?;
        let wo = tape.param(store, &self.key("wo"))?;
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys, wk)?;
        let v = tape.matmul(values, wv)?;
        let heads = tape.grouped_attention(q, k, v, self.heads, q_group, kv_group)?;
        tape.matmul(heads, wo)
    }
}

/// Standalone attention weights for [`multihead_cross_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl AttentionParams {
    pub fn identity(d_model: usize, heads: usize) -> Self {
        let eye = Mat::eye(d_model);
        Self {
            heads,
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn from_store(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let get = |leaf: &str| {
            store
                .get(&format!("{prefix}/{leaf}"))
                .cloned()
                .ok_or_else(|| Error::Argument(format!("missing `{prefix}/{leaf}`")))
        };
        Ok(Self {
            heads,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }
}

/// `x·W + b` on plain matrices.
pub fn linear(x: &Mat, weight: &Mat, bias: &Mat) -> Result<Mat> {
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(x.clone()), t.constant(weight.clone()), t.constant(bias.clone()));
    let xw = t.matmul(x, w)?;
    let y = t.add_row(xw, b)?;
    Ok(t.value(y).clone())
}

/// Per-row `(x - mean)/sqrt(var + eps)` followed by `scale`/`shift` rows.
pub fn layer_normalize(x: &Mat, scale: &Mat, shift: &Mat, eps: f64) -> Result<Mat> {
    let mut t = Tape::new();
    let x = t.constant(x.clone());
    let (sc, sh) = (t.constant(scale.clone()), t.constant(shift.clone()));
    let xhat = t.row_normalize(x, eps);
    let y = t.mul_row(xhat, sc)?;
    let y = t.add_row(y, sh)?;
    Ok(t.value(y).clone())
}

/// Multi-head cross attention of `q_in` (q×d) over keys `k_in` and values
/// `v_in` (s×d each).
pub fn multihead_cross_attention(
    q_in: &Mat,
    k_in: &Mat,
    v_in: &Mat,
    params: &AttentionParams,
) -> Result<Mat> {
    let d = params.d_model();
    for m in [q_in, k_in, v_in] {
        if m.ncols() != d {
            return Err(Error::Dimension(format!(
                "input width {} != d_model {d}",
                m.ncols()
            )));
        }
    }
    if k_in.nrows() != v_in.nrows() {
        return Err(Error::Dimension(format!(
            "{} keys vs {} values",
            k_in.nrows(),
            v_in.nrows()
        )));
    }
    let mut t = Tape::new();
    let (q, k, v) = (
        t.constant(q_in.clone()),
        t.constant(k_in.clone()),
        t.constant(v_in.clone()),
    );
    let wq = t.constant(params.wq.clone());
    let wk = t.constant(params.wk.clone());
    let wv = t.constant(params.wv.clone());
    let wo = t.constant(params.wo.clone());
    let qp = t.matmul(q, wq)?;
    let kp = t.matmul(k, wk)?;
    let vp = t.matmul(v, wv)?;
    let h = t.grouped_attention(qp, kp, vp, params.heads, q_in.nrows(), k_in.nrows())?;
    let out = t.matmul(h, wo)?;
    Ok(t.value(out).clone())
}
