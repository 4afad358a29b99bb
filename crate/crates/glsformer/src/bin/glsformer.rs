//! Command-line interface: dataset generation, training, evaluation,
//! per-video prediction, the gating/stride ablation, and a gradient check.
//!
//! Exit codes: 0 success, 2 missing input file, 3 invalid configuration or
//! malformed data, 4 gradient check tolerance breach.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glsformer::config::KeyValues;
use glsformer::model::{load_checkpoint, GatingMode, ModelConfig, ModelParams};
use glsformer::synth::{generate_split, load_dataset, save_dataset, Dataset, GeneratorSpec};
use glsformer::train::TrainConfig;
use glsformer::{eval, gradcheck, train, GlsError};

#[derive(Parser)]
#[command(name = "glsformer", about = "Online step recognition on synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value overrides applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<KeyValues, GlsError> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::new(),
        };
        kv.apply_overrides(&self.overrides)?;
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits
    Generate {
        /// output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        val: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and keep the best-validation checkpoint
    Train {
        /// dataset directory from `generate`
        #[arg(long)]
        data: PathBuf,
        /// output directory for model.ckpt, train_log.csv and the resolved
        /// config snapshot
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate checkpoints on a dataset split
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// one or more checkpoints; metrics report mean and standard
        /// deviation across them
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// evaluate every Nth frame
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Predict one video frame by frame, optionally rendering a ribbon
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// video index within the split
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// write a PPM ribbon of truth vs prediction here
        #[arg(long)]
        ribbon: Option<PathBuf>,
    },
    /// Train every gating mode and long-stream stride cell and tabulate
    /// test metrics
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// output CSV path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Verify reverse-mode gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// entries sampled per parameter tensor
        #[arg(long, default_value_t = 20)]
        samples: usize,
        /// maximum allowed relative error
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn split_videos<'a>(ds: &'a Dataset, split: &str) -> Result<&'a [glsformer::synth::LabeledVideo], GlsError> {
    match split {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        other => Err(GlsError::config(format!(
            "unknown split '{}', expected train/val/test",
            other
        ))),
    }
}

fn run() -> Result<ExitCode, GlsError> {
    match Cli::parse().command {
        Command::Generate {
            out,
            train,
            val,
            test,
            seed,
            cfg,
        } => {
            let kv = cfg.resolve()?;
            let spec = GeneratorSpec::from_kv(&kv)?;
            let ds = generate_split(&spec, train, val, test, seed)?;
            save_dataset(&out, &ds)?;
            println!(
                "wrote {} train, {} val, {} test videos to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Train { data, out, cfg } => {
            let ds = load_dataset(&data)?;
            let kv = cfg.resolve()?;
            let mcfg = ModelConfig::from_kv(&kv)?;
            let tcfg = TrainConfig::from_kv(&kv)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| GlsError::io(out.display().to_string(), e))?;
            let mut snapshot = mcfg.to_kv();
            for (k, v) in tcfg.to_kv().render().lines().filter_map(|l| l.split_once('=')) {
                snapshot.set(k, v);
            }
            snapshot.save(&out.join("resolved.config"))?;
            let outcome = train::train(&ds, &mcfg, &tcfg, Some(&out))?;
            for row in &outcome.log {
                println!(
                    "epoch {} train_loss {:.4} val_accuracy {:.2}",
                    row.epoch, row.train_loss, row.val_accuracy
                );
            }
            println!(
                "best val_accuracy {:.2} at epoch {}; checkpoint {}",
                outcome.best_val_accuracy,
                outcome.best_epoch,
                out.join("model.ckpt").display()
            );
        }
        Command::Evaluate {
            data,
            checkpoint,
            split,
            stride,
        } => {
            let ds = load_dataset(&data)?;
            let videos = split_videos(&ds, &split)?;
            let mut cfg: Option<ModelConfig> = None;
            let mut all: Vec<ModelParams> = Vec::new();
            for path in &checkpoint {
                let (c, p) = load_checkpoint(path)?;
                if let Some(prev) = &cfg {
                    if prev != &c {
                        return Err(GlsError::config(
                            "checkpoints were trained with different model configs",
                        ));
                    }
                }
                cfg = Some(c);
                all.push(p);
            }
            let cfg = cfg.expect("at least one checkpoint");
            let refs: Vec<&ModelParams> = all.iter().collect();
            let summary = eval::evaluate_checkpoints(&refs, &cfg, videos, stride)?;
            println!(
                "accuracy {:.2} ± {:.2}  precision {:.2} ± {:.2}  recall {:.2} ± {:.2}  jaccard {:.2} ± {:.2}",
                summary.mean.accuracy,
                summary.std.accuracy,
                summary.mean.precision,
                summary.std.precision,
                summary.mean.recall,
                summary.std.recall,
                summary.mean.jaccard,
                summary.std.jaccard
            );
        }
        Command::Predict {
            data,
            checkpoint,
            split,
            video,
            stride,
            ribbon,
        } => {
            let ds = load_dataset(&data)?;
            let videos = split_videos(&ds, &split)?;
            let v = videos.get(video).ok_or_else(|| {
                GlsError::config(format!(
                    "split '{}' has {} videos, index {} is out of range",
                    split,
                    videos.len(),
                    video
                ))
            })?;
            let (cfg, params) = load_checkpoint(&checkpoint)?;
            let track = eval::predict_track(&params, &cfg, v, &v.labels, stride)?;
            println!("frame,predicted,truth");
            for i in 0..track.frames.len() {
                println!("{},{},{}", track.frames[i], track.predicted[i], track.truth[i]);
            }
            if let Some(path) = ribbon {
                eval::render_ribbon(&path, &track)?;
                println!("wrote ribbon to {}", path.display());
            }
        }
        Command::Ablate { data, out, cfg } => {
            let ds = load_dataset(&data)?;
            let kv = cfg.resolve()?;
            let mcfg = ModelConfig::from_kv(&kv)?;
            let tcfg = TrainConfig::from_kv(&kv)?;
            let modes = [
                GatingMode::OnlyShortTerm,
                GatingMode::NoGating,
                GatingMode::FixedParam,
                GatingMode::Feature,
            ];
            let strides = [1, mcfg.s, 2 * mcfg.s];
            let rows = train::run_ablation(&ds, &mcfg, &tcfg, &modes, &strides, Some(&out))?;
            for r in &rows {
                println!(
                    "{} s={} accuracy {:.2} precision {:.2} recall {:.2} jaccard {:.2}",
                    r.gating_mode.name(),
                    r.s,
                    r.metrics.accuracy,
                    r.metrics.precision,
                    r.metrics.recall,
                    r.metrics.jaccard
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Gradcheck {
            seed,
            samples,
            tol,
            cfg,
        } => {
            let kv = cfg.resolve()?;
            let mcfg = if kv.render().is_empty() {
                ModelConfig::gradcheck_toy()
            } else {
                ModelConfig::from_kv(&kv)?
            };
            let report = gradcheck::check_model(&mcfg, seed, samples)?;
            println!(
                "checked {} entries, max relative error {:.3e} at {}",
                report.checked, report.max_rel_err, report.worst
            );
            if !report.passes(tol) {
                eprintln!(
                    "error: gradient check failed: {:.3e} exceeds tolerance {:.1e}",
                    report.max_rel_err, tol
                );
                return Ok(ExitCode::from(4));
            }
            println!("gradient check passed (tolerance {:.1e})", tol);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", err);
            let code = match &err {
                GlsError::Io { source, .. }
                    if source.kind() == std::io::ErrorKind::NotFound =>
                {
                    2
                }
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
