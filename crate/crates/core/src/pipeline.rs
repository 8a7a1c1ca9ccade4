//! Orchestration of the three training stages, scoring, evaluation and the
//! on-disk artifacts behind the command-line tool.
//!
//! A model directory holds one checkpoint per stage: `align.ckpt` (encoders
//! and gene panel), `fuse.ckpt` (fusion network after stage II) and
//! `cls.ckpt` (fusion network fine-tuned in stage III plus the classifier),
//! and a `training_log.tsv` with one `stage, epoch, loss` row per epoch.
//! After each stage the parameters are rounded through the f32 checkpoint
//! encoding, so a run split across invocations matches a single full run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::align::{train_alignment, AlignmentModel, PairedView};
use crate::config::{Ablation, GmmMode, RunConfig};
use crate::dataio::{load_dataset, KeyValues, SpotDataset};
use crate::diffcore::{decode_checkpoint, encode_checkpoint, load_checkpoint, Mat, ParamStore};
use crate::discriminator::{
    call_spots, predict_scores, read_scores_tsv, train_discriminator, write_scores_tsv, Calls,
    DiscriminatorModel, ScoreRow,
};
use crate::error::{Error, Result};
use crate::fusion::{continue_fusion, EmbeddedView, VrbcaModel};
use crate::metrics::{build_report, ReportExtras, ScoreReport};
use crate::prepare::{prepare, GenePanel, HvgMode, PreparedDataset};
use crate::rng::{seeded, substream};
use crate::synthgen::{generate_cohort, SynthConfig};

pub const ALIGN_CKPT: &str = "align.ckpt";
pub const FUSE_CKPT: &str = "fuse.ckpt";
pub const CLS_CKPT: &str = "cls.ckpt";
pub const TRAIN_LOG: &str = "training_log.tsv";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Align,
    Fuse,
    Cls,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Fuse => "fuse",
            Stage::Cls => "cls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "align" => Ok(Stage::Align),
            "fuse" => Ok(Stage::Fuse),
            "cls" => Ok(Stage::Cls),
            other => Err(Error::Argument(format!("unknown stage `{other}`"))),
        }
    }

    fn checkpoint(self) -> &'static str {
        match self {
            Stage::Align => ALIGN_CKPT,
            Stage::Fuse => FUSE_CKPT,
            Stage::Cls => CLS_CKPT,
        }
    }
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
}

fn log_rows(stage: Stage, trace: &[f64]) -> Vec<LogRow> {
    trace
        .iter()
        .enumerate()
        .map(|(e, &loss)| LogRow {
            stage,
            epoch: e + 1,
            loss,
        })
        .collect()
}

/// Stage-I output: gene panel and encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignStage {
    pub panel: GenePanel,
    pub align: AlignmentModel,
}

/// A model with every stage trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub cfg: RunConfig,
    pub panel: GenePanel,
    pub align: AlignmentModel,
    pub vrbca: VrbcaModel,
    pub disc: DiscriminatorModel,
}

/// Rounds every parameter through the checkpoint's f32 encoding.
fn settle(store: &ParamStore) -> Result<ParamStore> {
    let bytes = encode_checkpoint(&KeyValues::new(), store);
    Ok(decode_checkpoint(&bytes, Path::new("<memory>"))?.1)
}

pub fn prepare_all(
    datasets: &[SpotDataset],
    panel: &GenePanel,
    cfg: &RunConfig,
) -> Result<Vec<PreparedDataset>> {
    datasets
        .iter()
        .map(|d| prepare(d, panel, cfg.target_sum, cfg.vrbca.k, cfg.fill_missing_genes))
        .collect()
}

fn check_labeled(sources: &[SpotDataset]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Argument("training needs at least one source dataset".into()));
    }
    match sources.iter().find(|d| d.labels.is_none()) {
        Some(d) => Err(Error::Validation(format!(
            "source dataset `{}` has no labels",
            d.dataset_id
        ))),
        None => Ok(()),
    }
}

/// Stage I: fits the gene panel and trains the encoders. Under the `cl`
/// ablation the encoders keep their random initialization.
pub fn run_align(sources: &[SpotDataset], cfg: &RunConfig) -> Result<(AlignStage, Vec<f64>)> {
    cfg.validate()?;
    check_labeled(sources)?;
    let refs: Vec<&SpotDataset> = sources.iter().collect();
    let panel = GenePanel::fit(&refs, cfg.hvg_mode, cfg.target_sum, cfg.n_hvg)?;
    let prepared = prepare_all(sources, &panel, cfg)?;
    let views: Vec<PairedView<'_>> = prepared
        .iter()
        .map(|p| PairedView {
            image: &p.image,
            gene: &p.gene,
        })
        .collect();
    let mut align_cfg = cfg.align.clone();
    if cfg.ablate == Some(Ablation::Cl) {
        align_cfg.epochs = 0;
    }
    let mut rng = substream(cfg.seed, 1);
    let (mut align, trace) = train_alignment(&views, &align_cfg, &mut rng)?;
    align.cfg.epochs = cfg.align.epochs;
    align.store = settle(&align.store)?;
    Ok((AlignStage { panel, align }, trace))
}

/// Frozen stage-I embeddings of prepared datasets.
pub fn embed_all(align: &AlignmentModel, prepared: &[PreparedDataset]) -> Result<Vec<(Mat, Mat)>> {
    prepared.iter().map(|p| align.embed(&p.image, &p.gene)).collect()
}

fn views<'a>(prepared: &'a [PreparedDataset], emb: &'a [(Mat, Mat)]) -> Vec<EmbeddedView<'a>> {
    prepared
        .iter()
        .zip(emb)
        .map(|(p, (hi, hg))| EmbeddedView {
            h_img: hi,
            h_gene: hg,
            neighbors: &p.neighbors,
            labels: p.labels.as_deref(),
        })
        .collect()
}

/// Stage II on frozen encoders.
pub fn run_fuse(stage1: &AlignStage, sources: &[SpotDataset], cfg: &RunConfig) -> Result<(VrbcaModel, Vec<f64>)> {
    cfg.validate()?;
    check_labeled(sources)?;
    let prepared = prepare_all(sources, &stage1.panel, cfg)?;
    let emb = embed_all(&stage1.align, &prepared)?;
    let mut rng = substream(cfg.seed, 2);
    let model = VrbcaModel::new(cfg.effective_vrbca(), &mut rng)?;
    let (mut vrbca, trace) = continue_fusion(model, &views(&prepared, &emb), &mut rng)?;
    vrbca.store = settle(&vrbca.store)?;
    Ok((vrbca, trace))
}

/// Stage III: classifier plus joint fine-tuning of the fusion network.
pub fn run_cls(
    stage1: &AlignStage,
    vrbca: VrbcaModel,
    sources: &[SpotDataset],
    cfg: &RunConfig,
) -> Result<(VrbcaModel, DiscriminatorModel, Vec<f64>)> {
    cfg.validate()?;
    check_labeled(sources)?;
    let prepared = prepare_all(sources, &stage1.panel, cfg)?;
    let emb = embed_all(&stage1.align, &prepared)?;
    let mut rng = substream(cfg.seed, 3);
    let disc = DiscriminatorModel::new(cfg.cls.clone(), vrbca.cfg.latent_dim, &mut rng)?;
    let (mut vrbca, mut disc, trace) = train_discriminator(vrbca, disc, &views(&prepared, &emb), &mut rng)?;
    vrbca.store = settle(&vrbca.store)?;
    disc.store = settle(&disc.store)?;
    Ok((vrbca, disc, trace))
}

/// Stages II and III on top of an existing stage-I result.
pub fn train_from_align(
    stage1: &AlignStage,
    sources: &[SpotDataset],
    cfg: &RunConfig,
) -> Result<(TrainedModel, Vec<LogRow>)> {
    let (vrbca, t2) = run_fuse(stage1, sources, cfg)?;
    let (vrbca, disc, t3) = run_cls(stage1, vrbca, sources, cfg)?;
    let mut log = log_rows(Stage::Fuse, &t2);
    log.extend(log_rows(Stage::Cls, &t3));
    Ok((
        TrainedModel {
            cfg: cfg.clone(),
            panel: stage1.panel.clone(),
            align: stage1.align.clone(),
            vrbca,
            disc,
        },
        log,
    ))
}

/// All three stages in order.
pub fn train_all(sources: &[SpotDataset], cfg: &RunConfig) -> Result<(TrainedModel, Vec<LogRow>)> {
    let (stage1, t1) = run_align(sources, cfg)?;
    let (model, rest) = train_from_align(&stage1, sources, cfg)?;
    let mut log = log_rows(Stage::Align, &t1);
    log.extend(rest);
    Ok((model, log))
}

/// Scores and calls for one target dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub dataset_id: String,
    pub coords: Mat,
    pub scores: Vec<f64>,
    pub calls: Calls,
}

impl Scored {
    pub fn rows(&self) -> Vec<ScoreRow> {
        self.scores
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoreRow {
                spot_index: i,
                x: self.coords[[i, 0]],
                y: self.coords[[i, 1]],
                score,
                call: self.calls.calls[i],
                threshold_method: self.calls.threshold.method,
            })
            .collect()
    }
}

/// Raw scores of one dataset (no thresholding).
pub fn score_dataset(model: &TrainedModel, target: &SpotDataset) -> Result<Vec<f64>> {
    let p = prepare(
        target,
        &model.panel,
        model.cfg.target_sum,
        model.cfg.vrbca.k,
        model.cfg.fill_missing_genes,
    )?;
    if p.missing_genes > 0 {
        log::warn!(
            "dataset `{}`: {} panel genes missing, zero-filled",
            p.id,
            p.missing_genes
        );
    }
    let (hi, hg) = model.align.embed(&p.image, &p.gene)?;
    let view = EmbeddedView {
        h_img: &hi,
        h_gene: &hg,
        neighbors: &p.neighbors,
        labels: None,
    };
    predict_scores(&model.vrbca, &model.disc, &view)
}

/// Scores every target and thresholds each with a mixture fitted on its own
/// scores, or on the pooled scores of all targets in global mode.
pub fn infer(model: &TrainedModel, targets: &[SpotDataset]) -> Result<Vec<Scored>> {
    let scores: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| score_dataset(model, t))
        .collect::<Result<_>>()?;
    let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    targets
        .iter()
        .zip(scores)
        .map(|(t, s)| {
            let fit = match model.cfg.gmm_mode {
                GmmMode::PerDataset => &s,
                GmmMode::Global => &pooled,
            };
            Ok(Scored {
                dataset_id: t.dataset_id.clone(),
                coords: t.coords.clone(),
                calls: call_spots(&s, fit)?,
                scores: s,
            })
        })
        .collect()
}

/// Metrics of scores against the dataset's labels.
pub fn evaluate(scored: &Scored, labels: &[u8], seed: u64, fingerprint: &str, scores_path: &str) -> Result<ScoreReport> {
    build_report(
        &scored.scores,
        labels,
        ReportExtras {
            dataset_id: scored.dataset_id.clone(),
            seed,
            config_fingerprint: fingerprint.to_string(),
            scores_path: scores_path.to_string(),
            gmm: Some(scored.calls.gmm.clone()),
            threshold: Some(scored.calls.threshold.clone()),
        },
    )
}

// ---------------------------------------------------------------------------
// persistence

fn model_meta(cfg: &RunConfig, stage: Stage, extra: &[(&str, String)]) -> KeyValues {
    let mut kv = cfg.to_key_values();
    kv.set("model.stage", stage.as_str());
    for (k, v) in extra {
        kv.set(k, v);
    }
    kv
}

fn config_from_meta(meta: &KeyValues) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in meta.iter().filter(|(k, _)| !k.starts_with("model.")) {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Verifies that `got` holds exactly the entries of `want` with equal shapes.
fn check_params(want: &ParamStore, got: &ParamStore, path: &Path) -> Result<()> {
    let a: Vec<(&str, (usize, usize))> = want.entries().map(|(k, m)| (k, m.dim())).collect();
    let b: Vec<(&str, (usize, usize))> = got.entries().map(|(k, m)| (k, m.dim())).collect();
    if a != b {
        return Err(Error::format(path, "parameters do not match the recorded configuration"));
    }
    Ok(())
}

pub fn save_align(dir: &Path, cfg: &RunConfig, s: &AlignStage) -> Result<()> {
    let (mode, genes) = match &s.panel {
        GenePanel::Fixed(g) => (HvgMode::SourceFit, g.join("\t")),
        GenePanel::PerDataset(n) => (HvgMode::PerDataset, n.to_string()),
    };
    let meta = model_meta(
        cfg,
        Stage::Align,
        &[
            ("model.d_img", s.align.d_img.to_string()),
            ("model.n_genes", s.align.n_genes.to_string()),
            ("model.panel_mode", mode.as_str().to_string()),
            ("model.panel", genes),
        ],
    );
    crate::diffcore::save_checkpoint(&dir.join(ALIGN_CKPT), &meta, &s.align.store)
}

fn require_ckpt(dir: &Path, stage: Stage) -> Result<PathBuf> {
    let p = dir.join(stage.checkpoint());
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Argument(format!(
            "no {} checkpoint in {}; run the {} stage first",
            stage.as_str(),
            dir.display(),
            stage.as_str()
        )))
    }
}

pub fn load_align(dir: &Path) -> Result<(RunConfig, AlignStage)> {
    let path = require_ckpt(dir, Stage::Align)?;
    let (meta, store) = load_checkpoint(&path)?;
    let cfg = config_from_meta(&meta)?;
    let d_img: usize = meta.require_parsed("model.d_img", &path)?;
    let n_genes: usize = meta.require_parsed("model.n_genes", &path)?;
    let panel = match HvgMode::parse(meta.require("model.panel_mode", &path)?)? {
        HvgMode::SourceFit => GenePanel::Fixed(
            meta.require("model.panel", &path)?
                .split('\t')
                .map(str::to_string)
                .collect(),
        ),
        HvgMode::PerDataset => GenePanel::PerDataset(meta.require_parsed("model.panel", &path)?),
    };
    let template = AlignmentModel::new(cfg.align.clone(), d_img, n_genes, &mut seeded(0))?;
    check_params(&template.store, &store, &path)?;
    Ok((
        cfg.clone(),
        AlignStage {
            panel,
            align: AlignmentModel { store, ..template },
        },
    ))
}

pub fn save_fuse(dir: &Path, cfg: &RunConfig, vrbca: &VrbcaModel) -> Result<()> {
    crate::diffcore::save_checkpoint(&dir.join(FUSE_CKPT), &model_meta(cfg, Stage::Fuse, &[]), &vrbca.store)
}

fn load_vrbca(cfg: &RunConfig, store: ParamStore, path: &Path) -> Result<VrbcaModel> {
    let template = VrbcaModel::new(cfg.effective_vrbca(), &mut seeded(0))?;
    let own = store.subset(crate::fusion::PREFIX);
    check_params(&template.store, &own, path)?;
    Ok(VrbcaModel { store: own, ..template })
}

pub fn load_fuse(dir: &Path) -> Result<(RunConfig, VrbcaModel)> {
    let path = require_ckpt(dir, Stage::Fuse)?;
    let (meta, store) = load_checkpoint(&path)?;
    let cfg = config_from_meta(&meta)?;
    Ok((cfg.clone(), load_vrbca(&cfg, store, &path)?))
}

pub fn save_cls(dir: &Path, cfg: &RunConfig, vrbca: &VrbcaModel, disc: &DiscriminatorModel) -> Result<()> {
    let mut store = vrbca.store.clone();
    store.merge(disc.store.clone())?;
    crate::diffcore::save_checkpoint(&dir.join(CLS_CKPT), &model_meta(cfg, Stage::Cls, &[]), &store)
}

/// Loads a fully trained model directory.
pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let (_, stage1) = load_align(dir)?;
    let path = require_ckpt(dir, Stage::Cls)?;
    let (meta, store) = load_checkpoint(&path)?;
    let cfg = config_from_meta(&meta)?;
    let vrbca = load_vrbca(&cfg, store.clone(), &path)?;
    let template = DiscriminatorModel::new(cfg.cls.clone(), cfg.vrbca.latent_dim, &mut seeded(0))?;
    let own = store.subset(crate::discriminator::PREFIX);
    check_params(&template.store, &own, &path)?;
    Ok(TrainedModel {
        cfg,
        panel: stage1.panel,
        align: stage1.align,
        vrbca,
        disc: DiscriminatorModel { store: own, ..template },
    })
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("stage\tepoch\tloss\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.stage.as_str(), r.epoch, r.loss).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::format(path, format!("bad log row `{l}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LogRow {
                stage: Stage::parse(f[0]).map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// commands

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

/// Writes a synthetic cohort: one dataset directory per dataset plus a
/// manifest listing their ids.
pub fn cmd_synth(cfg: &SynthConfig, out: &Path, force: bool) -> Result<Vec<String>> {
    if dir_is_nonempty(out) && !force {
        return Err(Error::Argument(format!(
            "{} exists and is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let cohort = generate_cohort(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = cfg.to_key_values();
    manifest.set("datasets", cohort.len());
    let mut ids = Vec::with_capacity(cohort.len());
    for (i, ds) in cohort.iter().enumerate() {
        ds.write(&out.join(&ds.dataset_id), true)?;
        manifest.set(&format!("dataset.{i}"), &ds.dataset_id);
        ids.push(ds.dataset_id.clone());
    }
    manifest.write(&out.join(MANIFEST))?;
    Ok(ids)
}

/// Which stages `cmd_train` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Only(Stage),
}

impl StageSelection {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(StageSelection::All)
        } else {
            Stage::parse(s).map(StageSelection::Only)
        }
    }

    fn stages(self) -> Vec<Stage> {
        match self {
            StageSelection::All => vec![Stage::Align, Stage::Fuse, Stage::Cls],
            StageSelection::Only(s) => vec![s],
        }
    }
}

/// Trains the selected stage(s) into `out`, loading earlier stages from the
/// checkpoints already there. Returns the log rows written by this call.
pub fn cmd_train(
    source_dirs: &[PathBuf],
    out: &Path,
    cfg: &RunConfig,
    stages: StageSelection,
    force: bool,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let sources: Vec<SpotDataset> = source_dirs
        .iter()
        .map(|d| load_dataset(d))
        .collect::<Result<_>>()?;
    let run = stages.stages();
    for s in &run {
        if out.join(s.checkpoint()).exists() && !force {
            return Err(Error::Argument(format!(
                "{} already holds a {} checkpoint (use --force to retrain)",
                out.display(),
                s.as_str()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log: Vec<LogRow> = if log_path.is_file() {
        read_log(&log_path)?
            .into_iter()
            .filter(|r| !run.contains(&r.stage))
            .collect()
    } else {
        Vec::new()
    };
    let mut new_rows = Vec::new();
    let mut stage1: Option<AlignStage> = None;
    let mut fused: Option<VrbcaModel> = None;
    for s in run {
        match s {
            Stage::Align => {
                let (st, trace) = run_align(&sources, cfg)?;
                save_align(out, cfg, &st)?;
                new_rows.extend(log_rows(Stage::Align, &trace));
                stage1 = Some(st);
            }
            Stage::Fuse => {
                let st = match stage1.take() {
                    Some(st) => st,
                    None => load_align(out)?.1,
                };
                let (v, trace) = run_fuse(&st, &sources, cfg)?;
                save_fuse(out, cfg, &v)?;
                new_rows.extend(log_rows(Stage::Fuse, &trace));
                stage1 = Some(st);
                fused = Some(v);
            }
            Stage::Cls => {
                let st = match stage1.take() {
                    Some(st) => st,
                    None => load_align(out)?.1,
                };
                let v = match fused.take() {
                    Some(v) => v,
                    None => load_fuse(out)?.1,
                };
                let (v, d, trace) = run_cls(&st, v, &sources, cfg)?;
                save_cls(out, cfg, &v, &d)?;
                new_rows.extend(log_rows(Stage::Cls, &trace));
            }
        }
    }
    log.extend(new_rows.iter().cloned());
    log.sort_by_key(|r| (r.stage, r.epoch));
    write_log(&log_path, &log)?;
    Ok(new_rows)
}

/// Scores each target and writes its TSV. With one target `out` is the TSV
/// path; with several it is a directory receiving `<dataset_id>.scores.tsv`.
pub fn cmd_infer(model_dir: &Path, data_dirs: &[PathBuf], out: &Path) -> Result<Vec<(PathBuf, Scored)>> {
    let model = load_model(model_dir)?;
    let targets: Vec<SpotDataset> = data_dirs
        .iter()
        .map(|d| load_dataset(d))
        .collect::<Result<_>>()?;
    let scored = infer(&model, &targets)?;
    let paths: Vec<PathBuf> = if scored.len() == 1 {
        vec![out.to_path_buf()]
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        scored
            .iter()
            .map(|s| out.join(format!("{}.scores.tsv", s.dataset_id)))
            .collect()
    };
    for (p, s) in paths.iter().zip(&scored) {
        write_scores_tsv(p, &s.rows())?;
        let meta = calls_meta(s, &model.cfg);
        meta.write(&threshold_path(p))?;
    }
    Ok(paths.into_iter().zip(scored).collect())
}

/// Sidecar with the mixture fit and threshold of a scores file.
pub fn threshold_path(scores: &Path) -> PathBuf {
    let mut name = scores.file_name().unwrap_or_default().to_os_string();
    name.push(".threshold.txt");
    scores.with_file_name(name)
}

fn calls_meta(s: &Scored, cfg: &RunConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    let g = &s.calls.gmm;
    kv.set("dataset_id", &s.dataset_id);
    kv.set("threshold", s.calls.threshold.theta);
    kv.set("threshold_method", s.calls.threshold.method.as_str());
    kv.set("gmm_pi1", g.pi[0]);
    kv.set("gmm_pi2", g.pi[1]);
    kv.set("gmm_mu1", g.mu[0]);
    kv.set("gmm_mu2", g.mu[1]);
    kv.set("gmm_var1", g.var[0]);
    kv.set("gmm_var2", g.var[1]);
    kv.set("gmm_log_likelihood", g.log_likelihood);
    kv.set("gmm_converged", u8::from(g.converged));
    kv.set("gmm_iterations", g.iterations);
    kv.set("seed", cfg.seed);
    kv.set("config_fingerprint", cfg.fingerprint());
    kv
}

/// Evaluates a scores TSV against a labeled dataset and writes the report.
pub fn cmd_eval(scores_path: &Path, data_dir: &Path, out: &Path) -> Result<ScoreReport> {
    let rows = read_scores_tsv(scores_path)?;
    let ds = load_dataset(data_dir)?;
    let labels = ds.labels.as_ref().ok_or_else(|| {
        Error::Validation(format!("dataset `{}` has no labels to evaluate against", ds.dataset_id))
    })?;
    if rows.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} spots",
            rows.len(),
            labels.len()
        )));
    }
    let mut scores = vec![0.0; rows.len()];
    for r in &rows {
        let slot = scores.get_mut(r.spot_index).ok_or_else(|| {
            Error::format(scores_path, format!("spot_index {} out of range", r.spot_index))
        })?;
        *slot = r.score;
    }
    let side = threshold_path(scores_path);
    let (gmm, threshold, seed, fingerprint) = if side.is_file() {
        let kv = KeyValues::read(&side)?;
        let parsed = ScoreReport::from_key_values(
            &{
                let mut k = kv.clone();
                for key in ["auc", "ap", "f1", "ks", "f1_threshold"] {
                    k.set(key, "null");
                }
                k.set("n_spots", 0);
                k.set("positive_fraction", 0);
                k.set("scores_path", "");
                k
            },
            &side,
        )?;
        (
            parsed.extras.gmm,
            parsed.extras.threshold,
            parsed.extras.seed,
            parsed.extras.config_fingerprint,
        )
    } else {
        (None, None, 0, String::new())
    };
    let report = build_report(
        &scores,
        labels,
        ReportExtras {
            dataset_id: ds.dataset_id.clone(),
            seed,
            config_fingerprint: fingerprint,
            scores_path: scores_path.display().to_string(),
            gmm,
            threshold,
        },
    )?;
    report.write(out)?;
    Ok(report)
}
