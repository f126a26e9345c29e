//! Training loop: random patches, deep supervision, AdamW on a per-epoch
//! cosine schedule, and best-validation checkpointing.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::infer::evaluate;
use crate::data::sample::{random_flip, sample_patch, stack};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::loss::{deep_supervision, LossOptions, LossReport};
use crate::metrics::MetricsReport;
use crate::model::GlimsModel;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::tensor::Var;

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const LOG_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub flips: bool,
    pub loss: LossOptions,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub val_overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr_min: 0.0,
            optimizer: AdamWConfig::default(),
            flips: true,
            loss: LossOptions::default(),
            max_steps: 0,
            val_every: 1,
            val_overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch size must be positive".to_string());
        }
        if self.val_every == 0 {
            errs.push("val_every must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.val_overlap) {
            errs.push(format!("validation overlap {} must be in [0, 1)", self.val_overlap));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || self.lr_min < 0.0 || self.lr_min > o.lr {
            errs.push(format!(
                "learning rates must satisfy 0 <= lr_min ({}) <= lr ({})",
                self.lr_min, o.lr
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            errs.push("betas must be in [0, 1)".to_string());
        }
        if !(o.eps > 0.0) || o.weight_decay < 0.0 {
            errs.push("eps must be positive and weight decay non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub train_loss: LossReport,
    pub val: Option<MetricsReport>,
    pub best_dsc: Option<f64>,
    pub improved: bool,
}

/// Owns the model, optimizer and sampling RNG across epochs.
pub struct Trainer {
    pub model: GlimsModel,
    pub optim: AdamW,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Next epoch to run.
    pub epoch: usize,
    pub steps: usize,
    pub best_dsc: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Sampling RNG for `seed`, on a stream separate from weight init.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl Trainer {
    pub fn new(model: GlimsModel, config: TrainConfig, seed: u64, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        Ok(Self {
            optim: AdamW::new(config.optimizer, &model.params),
            model,
            config,
            rng: sampling_rng(seed),
            epoch: 0,
            steps: 0,
            best_dsc: None,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::run_epoch`].
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        let model = checkpoint.model(&checkpoint.config)?;
        let mut t = Self::new(model, config, 0, out_dir)?;
        t.optim = checkpoint.optim.clone();
        t.rng = checkpoint.rng.restore();
        t.epoch = checkpoint.epoch + 1;
        t.steps = checkpoint.optim.step as usize;
        t.best_dsc = checkpoint.best_dsc;
        Ok(t)
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.epochs || (self.config.max_steps > 0 && self.steps >= self.config.max_steps)
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(
            self.epoch,
            self.config.epochs,
            self.config.optimizer.lr,
            self.config.lr_min,
        )
    }

    /// One optimizer step on a stacked batch; returns the loss report.
    pub fn step(&mut self, batch: &[&Case], lr: f64) -> Result<LossReport> {
        let patch = self.model.config.patch_size;
        let mut patches = Vec::with_capacity(batch.len());
        for case in batch {
            let mut p = sample_patch(&case.image, &case.labels, patch, &mut self.rng)?;
            if self.config.flips {
                random_flip(&mut p, &mut self.rng);
            }
            p.labels.check_classes(self.model.config.num_classes)?;
            patches.push(p);
        }
        let (x, labels) = stack(&patches)?;
        let (_tape, bound) = self.model.bind();
        let out = self.model.forward(&bound, &Var::constant(x))?;
        let (loss, report) = deep_supervision(&out.levels(), &labels, self.config.loss)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                value: report.total,
                epoch: self.epoch,
                step: self.steps,
                batch: batch.iter().map(|c| c.name.clone()).collect(),
            });
        }
        let grads = loss.backward()?;
        let per_param: Vec<_> = bound.vars().iter().map(|v| grads.get(v)).collect();
        self.optim.update(&mut self.model.params, &per_param, lr)?;
        self.steps += 1;
        Ok(report)
    }

    /// One epoch: one random patch per training volume in shuffled order,
    /// then validation and checkpointing.
    pub fn run_epoch(&mut self, train: &[Case], val: &[Case]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let lr = self.lr();
        let mut order: Vec<&Case> = train.iter().collect();
        order.shuffle(&mut self.rng);
        let mut reports = Vec::new();
        for batch in order.chunks(self.config.batch_size) {
            if self.config.max_steps > 0 && self.steps >= self.config.max_steps {
                break;
            }
            reports.push(self.step(batch, lr)?);
        }
        let epoch = self.epoch;
        let last =
            epoch + 1 >= self.config.epochs || (self.config.max_steps > 0 && self.steps >= self.config.max_steps);
        let val_report = if !val.is_empty() && ((epoch + 1) % self.config.val_every == 0 || last) {
            Some(evaluate(&self.model, val, self.config.val_overlap)?)
        } else {
            None
        };
        let mut improved = false;
        if let Some(v) = &val_report {
            let dsc = v.mean_dsc_percent / 100.0;
            if self.best_dsc.is_none_or(|b| dsc > b) {
                self.best_dsc = Some(dsc);
                improved = true;
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            steps: reports.len(),
            train_loss: mean_report(&reports),
            val: val_report,
            best_dsc: self.best_dsc,
            improved,
        };
        if let Some(dir) = self.out_dir.clone() {
            let ckpt = Checkpoint::capture(&self.model, &self.optim, epoch, self.best_dsc, &self.rng);
            if improved {
                ckpt.save(&dir.join(BEST_DIR))?;
            }
            ckpt.save(&dir.join(LAST_DIR))?;
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io(&path))?;
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(f, "{line}").map_err(io(&path))?;
        }
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until the configured epoch or step budget is spent.
    pub fn fit(
        &mut self,
        train: &[Case],
        val: &[Case],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::new();
        while !self.done() {
            let r = self.run_epoch(train, val)?;
            on_epoch(&r);
            log.push(r);
        }
        Ok(log)
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let levels = reports.first().map_or(0, |r| r.per_level.len());
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        per_level: (0..levels)
            .map(|i| reports.iter().map(|r| r.per_level[i]).sum::<f64>() / n)
            .collect(),
        dice_term: reports.iter().map(|r| r.dice_term).sum::<f64>() / n,
        ce_term: reports.iter().map(|r| r.ce_term).sum::<f64>() / n,
    }
}
