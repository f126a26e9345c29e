//! Run configuration file and command-line overrides.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! base_channels = 8
//! patch_size = 32
//!
//! [train]
//! epochs = 150
//!
//! [train.optimizer]
//! lr = 3e-3
//!
//! [data]
//! count = 4
//! seed = 11
//!
//! [data.phantom]
//! dims = [32, 32, 32]
//!
//! [infer]
//! overlap = 0.8
//! ```
//!
//! Every section is optional and every missing key takes its default.
//! Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PhantomSpec;
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    /// Train on every case and skip validation (overfit runs).
    pub train_on_all: bool,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            train_on_all: false,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub overlap: f64,
    /// Worker threads; 0 keeps the default pool.
    pub threads: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            overlap: 0.8,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight init and patch sampling.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub infer: InferConfig,
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub patch_size: Option<usize>,
    pub overlap: Option<f64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(errs) => {
                Error::InvalidConfig(errs.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            self.train.epochs = epochs;
        }
        if let Some(patch) = o.patch_size {
            self.model.patch_size = patch;
        }
        if let Some(overlap) = o.overlap {
            self.infer.overlap = overlap;
        }
        if let Some(threads) = o.threads {
            self.infer.threads = threads;
        }
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut collect = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::InvalidConfig(list)) => errs.extend(list.into_iter().map(|m| format!("[{section}] {m}"))),
            Err(e) => errs.push(format!("[{section}] {e}")),
        };
        collect("model", self.model.validate());
        collect("train", self.train.validate());
        collect("data.phantom", self.data.phantom.validate());
        if self.data.count == 0 {
            errs.push("[data] count must be positive".into());
        }
        if self.data.phantom.classes != self.model.num_classes {
            errs.push(format!(
                "[data] phantom classes {} differ from model classes {}",
                self.data.phantom.classes, self.model.num_classes
            ));
        }
        if self.data.phantom.channels != self.model.in_channels {
            errs.push(format!(
                "[data] phantom channels {} differ from model input channels {}",
                self.data.phantom.channels, self.model.in_channels
            ));
        }
        if !(0.0..1.0).contains(&self.infer.overlap) {
            errs.push(format!("[infer] overlap {} must be in [0, 1)", self.infer.overlap));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}
