//! Full-run configuration in the `key=value` dialect.
//!
//! Defaults are the published hyperparameters: α = β = 0.5, γ = 0.1, k = 6,
//! learning rate 1e-5, and 100/50/50 epochs for the three stages.

use std::path::Path;

use crate::align::AlignConfig;
use crate::dataio::KeyValues;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionVariant, VrbcaConfig};
use crate::prepare::HvgMode;

/// Component removed for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Mean-pooled context and concatenation instead of cross-attention.
    Bca,
    /// Deterministic bottleneck instead of the class-regularized VAE.
    Rvae,
    /// No contrastive training: encoders keep their random initialization.
    Cl,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Bca => "bca",
            Ablation::Rvae => "rvae",
            Ablation::Cl => "cl",
        }
    }

    pub fn parse(s: &str) -> Result<Option<Self>> {
        match s {
            "none" => Ok(None),
            "bca" => Ok(Some(Ablation::Bca)),
            "rvae" => Ok(Some(Ablation::Rvae)),
            "cl" => Ok(Some(Ablation::Cl)),
            other => Err(Error::Argument(format!(
                "ablate must be none, bca, rvae or cl, got `{other}`"
            ))),
        }
    }
}

/// Whether the score mixture is fitted per target dataset or once on the
/// pooled scores of all targets scored together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmmMode {
    PerDataset,
    Global,
}

impl GmmMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GmmMode::PerDataset => "per-dataset",
            GmmMode::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-dataset" => Ok(GmmMode::PerDataset),
            "global" => Ok(GmmMode::Global),
            other => Err(Error::Argument(format!(
                "gmm_mode must be per-dataset or global, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub align: AlignConfig,
    pub vrbca: VrbcaConfig,
    pub cls: DiscriminatorConfig,
    pub target_sum: f64,
    pub n_hvg: usize,
    pub hvg_mode: HvgMode,
    pub fill_missing_genes: bool,
    pub gmm_mode: GmmMode,
    pub seed: u64,
    pub deterministic: bool,
    pub ablate: Option<Ablation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            align: AlignConfig::default(),
            vrbca: VrbcaConfig::default(),
            cls: DiscriminatorConfig::default(),
            target_sum: 1e4,
            n_hvg: 3000,
            hvg_mode: HvgMode::SourceFit,
            fill_missing_genes: false,
            gmm_mode: GmmMode::PerDataset,
            seed: 0,
            deterministic: false,
            ablate: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Argument(format!("config key `{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Argument(format!("config key `{key}`: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    /// Reads overrides from a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&KeyValues::read(path)?)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; unknown keys are an error naming the key.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "alpha" => self.align.alpha = parse(key, v)?,
            "tau" => self.align.tau = parse(key, v)?,
            "dropout" => self.align.dropout = parse(key, v)?,
            "align_hidden1" => self.align.hidden[0] = parse(key, v)?,
            "align_hidden2" => self.align.hidden[1] = parse(key, v)?,
            "proj_dim" => {
                self.align.proj_dim = parse(key, v)?;
                self.vrbca.d_model = self.align.proj_dim;
            }
            "beta" => self.vrbca.beta = parse(key, v)?,
            "k" => self.vrbca.k = parse(key, v)?,
            "heads" => self.vrbca.heads = parse(key, v)?,
            "enc_hidden1" => self.vrbca.enc_hidden[0] = parse(key, v)?,
            "enc_hidden2" => self.vrbca.enc_hidden[1] = parse(key, v)?,
            "latent_dim" => self.vrbca.latent_dim = parse(key, v)?,
            "center_offset" => self.vrbca.center_offset = parse(key, v)?,
            "center_sd" => self.vrbca.center_sd = parse(key, v)?,
            "gamma" => self.cls.gamma = parse(key, v)?,
            "cls_hidden" => self.cls.hidden = parse(key, v)?,
            "lr" => {
                let lr: f64 = parse(key, v)?;
                self.align.lr = lr;
                self.vrbca.lr = lr;
                self.cls.lr = lr;
            }
            "batch_size" => {
                let b: usize = parse(key, v)?;
                self.align.batch_size = b;
                self.vrbca.batch_size = b;
                self.cls.batch_size = b;
            }
            "epochs_align" => self.align.epochs = parse(key, v)?,
            "epochs_fuse" => self.vrbca.epochs = parse(key, v)?,
            "epochs_cls" => self.cls.epochs = parse(key, v)?,
            "target_sum" => self.target_sum = parse(key, v)?,
            "n_hvg" => self.n_hvg = parse(key, v)?,
            "hvg_mode" => self.hvg_mode = HvgMode::parse(v)?,
            "fill_missing_genes" => self.fill_missing_genes = parse_bool(key, v)?,
            "gmm_mode" => self.gmm_mode = GmmMode::parse(v)?,
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "ablate" => self.ablate = Ablation::parse(v)?,
            other => return Err(Error::Argument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.vrbca.validate()?;
        if self.align.proj_dim != self.vrbca.d_model {
            return Err(Error::Argument("proj_dim and d_model must agree".into()));
        }
        if !(self.target_sum > 0.0) {
            return Err(Error::Argument("target_sum must be positive".into()));
        }
        if self.n_hvg == 0 {
            return Err(Error::Argument("n_hvg must be at least 1".into()));
        }
        if !(self.cls.gamma >= 0.0) {
            return Err(Error::Argument("gamma must be non-negative".into()));
        }
        Ok(())
    }

    /// Fusion settings with the ablation applied.
    pub fn effective_vrbca(&self) -> VrbcaConfig {
        let variant = match self.ablate {
            Some(Ablation::Bca) => FusionVariant::MeanPoolConcat,
            Some(Ablation::Rvae) => FusionVariant::Deterministic,
            _ => FusionVariant::Full,
        };
        VrbcaConfig {
            variant,
            ..self.vrbca.clone()
        }
    }

    /// The resolved configuration, every key in a fixed order.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let a = &self.align;
        let v = &self.vrbca;
        let c = &self.cls;
        kv.set("alpha", a.alpha);
        kv.set("beta", v.beta);
        kv.set("gamma", c.gamma);
        kv.set("tau", a.tau);
        kv.set("k", v.k);
        kv.set("heads", v.heads);
        kv.set("lr", a.lr);
        kv.set("epochs_align", a.epochs);
        kv.set("epochs_fuse", v.epochs);
        kv.set("epochs_cls", c.epochs);
        kv.set("batch_size", a.batch_size);
        kv.set("align_hidden1", a.hidden[0]);
        kv.set("align_hidden2", a.hidden[1]);
        kv.set("proj_dim", a.proj_dim);
        kv.set("dropout", a.dropout);
        kv.set("enc_hidden1", v.enc_hidden[0]);
        kv.set("enc_hidden2", v.enc_hidden[1]);
        kv.set("latent_dim", v.latent_dim);
        kv.set("center_offset", v.center_offset);
        kv.set("center_sd", v.center_sd);
        kv.set("cls_hidden", c.hidden);
        kv.set("target_sum", self.target_sum);
        kv.set("n_hvg", self.n_hvg);
        kv.set("hvg_mode", self.hvg_mode.as_str());
        kv.set("fill_missing_genes", self.fill_missing_genes);
        kv.set("gmm_mode", self.gmm_mode.as_str());
        kv.set("seed", self.seed);
        kv.set("deterministic", self.deterministic);
        kv.set("ablate", self.ablate.map_or("none", Ablation::as_str));
        kv
    }

    /// Short stable digest of the resolved configuration (64-bit FNV-1a).
    pub fn fingerprint(&self) -> String {
        let text = self.to_key_values().to_string();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
