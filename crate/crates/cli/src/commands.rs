use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glims::config::RunConfig;
use glims::data::{self, Case, Dataset, LabelVolume, Volume};
use glims::engine::checkpoint::Checkpoint;
use glims::engine::{evaluate, predict_labels, EpochRecord, Trainer};
use glims::gradcheck::suite;
use glims::metrics::MetricsReport;
use glims::model::{GlimsModel, ModelConfig};
use glims::{par, Error, FormatError};

use crate::{Cli, Command, Split};

pub const NAN_DUMP: &str = "nan_abort.json";

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
pub struct GradcheckFailed(pub Vec<String>);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFiniteLoss { .. } => 2,
                Error::Io { .. } => 3,
                Error::Format(FormatError::FingerprintMismatch { .. }) => 1,
                Error::Format(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<GradcheckFailed>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn load_config(cli: &Cli, fallback: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => fallback,
    };
    let mut o = cli.common.overrides();
    if matches!(cli.command, Command::Generate) {
        if let Some(seed) = o.seed.take() {
            cfg.data.seed = seed;
        }
    }
    cfg.apply(&o);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let fallback = match cli.command {
        Command::Params { reduced: true, .. } => RunConfig {
            model: ModelConfig::reduced(),
            ..RunConfig::default()
        },
        _ => RunConfig::default(),
    };
    let cfg = load_config(cli, fallback)?;
    par::with_threads(cfg.infer.threads, || match &cli.command {
        Command::Generate => generate(cli, &cfg),
        Command::Train { data, resume } => train(cli, &cfg, data.as_deref(), *resume),
        Command::Eval {
            data,
            predictions,
            split,
        } => eval(cli, &cfg, data, predictions.as_deref(), *split),
        Command::Infer { data, input } => infer(cli, &cfg, data.as_deref(), input),
        Command::Params { json, .. } => params(&cfg, *json),
        Command::Gradcheck { filter } => gradcheck(filter),
    })
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.common.out_dir.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cli, "data");
    let ds = data::generate(&cfg.data.phantom, cfg.data.seed, cfg.data.count)?;
    ds.write(&dir, &cfg.data.phantom, cfg.data.seed)?;
    println!(
        "wrote {} train and {} validation phantoms ({:?} voxels) to {}",
        ds.train.len(),
        ds.val.len(),
        cfg.data.phantom.dims,
        dir.display()
    );
    Ok(())
}

fn load_checkpoint(cli: &Cli) -> Result<Checkpoint> {
    let Some(dir) = &cli.common.checkpoint else {
        bail!(Error::InvalidArgument("--checkpoint is required".into()));
    };
    Ok(Checkpoint::load(dir)?)
}

/// The checkpoint's own config, or the configured one when a config file
/// was given (its fingerprint must match).
fn checkpoint_model(cli: &Cli, cfg: &RunConfig, ckpt: &Checkpoint) -> Result<GlimsModel> {
    let expected = if cli.common.config.is_some() {
        &cfg.model
    } else {
        &ckpt.config
    };
    Ok(ckpt.model(expected)?)
}

fn print_epoch(r: &EpochRecord) {
    let val = r
        .val
        .as_ref()
        .map_or(String::new(), |v| format!("  val DSC {:.2}%", v.mean_dsc_percent));
    println!(
        "epoch {:>4}  lr {:.3e}  steps {}  loss {:.4}{}{}",
        r.epoch,
        r.lr,
        r.steps,
        r.train_loss.total,
        val,
        if r.improved { "  *" } else { "" }
    );
}

fn train(cli: &Cli, cfg: &RunConfig, data_dir: Option<&Path>, resume: bool) -> Result<()> {
    let mut dataset = match data_dir {
        Some(dir) => Dataset::read(dir)?,
        None => data::generate(&cfg.data.phantom, cfg.data.seed, cfg.data.count)?,
    };
    if cfg.data.train_on_all {
        let val = std::mem::take(&mut dataset.val);
        dataset.train.extend(val);
    }
    let dir = out_dir(cli, "runs/train");
    let mut trainer = if resume {
        let ckpt = load_checkpoint(cli)?;
        if cli.common.config.is_some() {
            checkpoint_model(cli, cfg, &ckpt)?;
        }
        Trainer::resume(&ckpt, cfg.train.clone(), Some(&dir))?
    } else {
        let model = GlimsModel::build(&cfg.model, cfg.seed)?;
        Trainer::new(model, cfg.train.clone(), cfg.seed, Some(&dir))?
    };
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    println!(
        "training {} parameters on {} volumes ({} validation), from epoch {}",
        trainer.model.count_parameters(),
        dataset.train.len(),
        dataset.val.len(),
        trainer.epoch
    );
    match trainer.fit(&dataset.train, &dataset.val, print_epoch) {
        Ok(log) => {
            if let Some(v) = log.iter().rev().find_map(|r| r.val.as_ref()) {
                print!("{}", v.to_text());
            }
            println!(
                "checkpoints and {} in {}",
                glims::engine::train::LOG_FILE,
                dir.display()
            );
            Ok(())
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            if let Error::NonFiniteLoss {
                value,
                epoch,
                step,
                batch,
            } = &e
            {
                // the loss itself is not representable in JSON
                let dump = serde_json::json!({
                    "value": value.to_string(),
                    "epoch": epoch,
                    "step": step,
                    "batch": batch,
                });
                write(&dir.join(NAN_DUMP), &(serde_json::to_string_pretty(&dump)? + "\n"))?;
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn select(ds: Dataset, split: Split) -> Vec<Case> {
    match split {
        Split::Train => ds.train,
        Split::Val => ds.val,
        Split::All => ds.train.into_iter().chain(ds.val).collect(),
    }
}

fn eval(cli: &Cli, cfg: &RunConfig, data_dir: &Path, predictions: Option<&Path>, split: Split) -> Result<()> {
    let cases = select(Dataset::read(data_dir)?, split);
    if cases.is_empty() {
        bail!(Error::InvalidArgument(format!(
            "split {split:?} of {} is empty",
            data_dir.display()
        )));
    }
    let report = match predictions {
        Some(pred_dir) => {
            let mut reports = Vec::new();
            for case in &cases {
                let pred = LabelVolume::read(&pred_dir.join(format!("{}.glvol", case.name)))?;
                reports.push(MetricsReport::evaluate(
                    &pred.data,
                    &case.labels.data,
                    case.labels.dims,
                    case.labels.spacing.map(f64::from),
                    cfg.model.num_classes,
                )?);
            }
            MetricsReport::average(&reports)
        }
        None => {
            let ckpt = load_checkpoint(cli)?;
            let model = checkpoint_model(cli, cfg, &ckpt)?;
            evaluate(&model, &cases, cfg.infer.overlap)?
        }
    };
    let dir = out_dir(cli, "eval");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("metrics.json"), &(report.to_json() + "\n"))?;
    write(&dir.join("metrics.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn infer(cli: &Cli, cfg: &RunConfig, data_dir: Option<&Path>, inputs: &[PathBuf]) -> Result<()> {
    let mut named: Vec<(String, PathBuf)> = Vec::new();
    if let Some(dir) = data_dir {
        let images = dir.join("images");
        let entries = fs::read_dir(&images).with_context(|| format!("listing {}", images.display()))?;
        for entry in entries {
            let path = entry.with_context(|| format!("listing {}", images.display()))?.path();
            if path.extension().is_some_and(|e| e == "glvol") {
                named.push((stem(&path), path));
            }
        }
    }
    named.extend(inputs.iter().map(|p| (stem(p), p.clone())));
    named.sort();
    let ckpt = load_checkpoint(cli)?;
    let model = checkpoint_model(cli, cfg, &ckpt)?;
    let dir = out_dir(cli, "predictions");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, path) in &named {
        let image = Volume::read(path)?;
        let labels = LabelVolume::new(
            image.dims,
            image.spacing,
            predict_labels(&model, &image, cfg.infer.overlap)?,
        )?;
        let out = dir.join(format!("{name}.glvol"));
        labels.write(&out)?;
        println!("{} -> {}", path.display(), out.display());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned())
}

fn params(cfg: &RunConfig, json: bool) -> Result<()> {
    let report = GlimsModel::build(&cfg.model, cfg.seed)?.param_report();
    if json {
        let groups: serde_json::Map<String, serde_json::Value> =
            report.groups.iter().map(|g| (g.name.clone(), g.count.into())).collect();
        let value = serde_json::json!({
            "total": report.total,
            "groups": groups,
            "flops": report.flops,
            "published": glims::model::PUBLISHED_PARAMS,
            "relative_delta": report.relative_delta(),
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn gradcheck(filter: &str) -> Result<()> {
    let reports = suite::run(filter, |r| println!("{r}"))?;
    if reports.is_empty() {
        bail!(Error::InvalidArgument(format!("no gradient check matches `{filter}`")));
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if !failed.is_empty() {
        return Err(GradcheckFailed(failed).into());
    }
    println!("{} checks passed", reports.len());
    Ok(())
}
