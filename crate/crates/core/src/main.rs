use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctrscan::config::{Ablation, RunConfig};
use ctrscan::dataio::KeyValues;
use ctrscan::metrics::MetricValue;
use ctrscan::pipeline::{cmd_eval, cmd_infer, cmd_synth, cmd_train, StageSelection};
use ctrscan::synthgen::SynthConfig;
use ctrscan::{Error, Result};

/// Cancer-region detection for spatial transcriptomics.
#[derive(Parser)]
#[command(name = "ctrscan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled cohort.
    Synth {
        /// key=value file overriding the generator defaults
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
        /// Print the resolved generator config and exit
        #[arg(long)]
        dump_config: bool,
    },
    /// Train the model on labeled source datasets.
    Train {
        /// Source dataset directory (repeatable)
        #[arg(long = "source", required_unless_present = "dump_config")]
        sources: Vec<PathBuf>,
        /// Model directory
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        /// all, align, fuse or cls
        #[arg(long, default_value = "all")]
        stage: String,
        #[command(flatten)]
        run: RunArgs,
        /// Retrain stages whose checkpoints already exist
        #[arg(long)]
        force: bool,
    },
    /// Score target datasets and call cancer spots.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Target dataset directory (repeatable)
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Scores TSV for one target, directory for several
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a scores TSV with a labeled dataset.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report file
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value file overriding the run defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, fully reproducible execution
    #[arg(long)]
    deterministic: bool,
    /// bca, rvae or cl
    #[arg(long)]
    ablate: Option<String>,
    /// Print the resolved run config and exit
    #[arg(long)]
    dump_config: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(a) = &self.ablate {
            cfg.ablate = Ablation::parse(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn synth_config(path: Option<&Path>, seed: Option<u64>) -> Result<SynthConfig> {
    let mut cfg = SynthConfig::default();
    if let Some(p) = path {
        cfg.apply(&KeyValues::read(p)?)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn show(v: &MetricValue) -> String {
    match v {
        MetricValue::Value(x) => format!("{x:.4}"),
        MetricValue::Undefined(why) => format!("undefined ({why})"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            force,
            dump_config,
        } => {
            let cfg = synth_config(config.as_deref(), seed)?;
            if dump_config {
                print!("{}", cfg.to_key_values());
                return Ok(());
            }
            let ids = cmd_synth(&cfg, &out, force)?;
            println!("wrote {} datasets to {}", ids.len(), out.display());
        }
        Command::Train {
            sources,
            out,
            stage,
            run,
            force,
        } => {
            let cfg = run.resolve()?;
            if run.dump_config {
                print!("{}", cfg.to_key_values());
                return Ok(());
            }
            let stages = StageSelection::parse(&stage)?;
            if cfg.deterministic {
                ctrscan::par::set_parallel(false);
            }
            let out = out.expect("clap requires --out");
            let rows = cmd_train(&sources, &out, &cfg, stages, force)?;
            for r in rows.iter().filter(|r| r.epoch == 1 || r.epoch % 10 == 0) {
                log::info!("{} epoch {} loss {:.6}", r.stage.as_str(), r.epoch, r.loss);
            }
            println!("model written to {} ({} epochs logged)", out.display(), rows.len());
        }
        Command::Infer { model, data, out } => {
            for (path, s) in cmd_infer(&model, &data, &out)? {
                let called = s.calls.calls.iter().filter(|&&c| c == 1).count();
                println!(
                    "{}: {} spots, threshold {:.6} ({}), {} called cancer -> {}",
                    s.dataset_id,
                    s.scores.len(),
                    s.calls.threshold.theta,
                    s.calls.threshold.method.as_str(),
                    called,
                    path.display()
                );
            }
        }
        Command::Eval { scores, data, out } => {
            let r = cmd_eval(&scores, &data, &out)?;
            println!(
                "auc {} ap {} f1 {} ks {}",
                show(&r.auc),
                show(&r.ap),
                show(&r.f1),
                show(&r.ks)
            );
            for (name, v) in [("auc", &r.auc), ("ap", &r.ap), ("f1", &r.f1), ("ks", &r.ks)] {
                if let MetricValue::Undefined(why) = v {
                    return Err(Error::UndefinedMetric(format!("{name}: {why}")));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
