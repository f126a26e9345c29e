//! Volume files, synthetic phantoms, patch sampling and dataset trees.
//!
//! A dataset directory holds `images/<case>.glvol`, `labels/<case>.glvol`
//! and a `dataset.json` manifest naming the train and validation cases.

pub mod phantom;
pub mod sample;
pub mod volume;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
pub use phantom::{Phantom, PhantomSpec};
pub use sample::{sample_patch, Patch};
pub use volume::{LabelVolume, Volume};

pub const MANIFEST: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub labels: LabelVolume,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

/// Number of training cases for an 80/20 split, keeping both sides
/// non-empty when there are at least two cases.
pub fn train_count(n: usize) -> usize {
    if n < 2 {
        n
    } else {
        (n * 4 / 5).clamp(1, n - 1)
    }
}

/// Phantoms `0..count` with per-volume seed `seed + i`, split in seed order.
pub fn generate(spec: &PhantomSpec, seed: u64, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let cases = par::map_range(count, |i| {
        let s = PhantomSpec {
            seed: seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        s.generate().map(|p| Case {
            name: case_name(i),
            image: p.image,
            labels: p.labels,
        })
    });
    let mut cases = cases.into_iter().collect::<Result<Vec<_>>>()?;
    let val = cases.split_off(train_count(count));
    Ok(Dataset { train: cases, val })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &Case> {
        self.train.iter().chain(&self.val)
    }

    pub fn write(&self, dir: &Path, spec: &PhantomSpec, seed: u64) -> Result<()> {
        create_dir(&dir.join("images"))?;
        create_dir(&dir.join("labels"))?;
        for case in self.all() {
            case.image
                .write(&dir.join("images").join(format!("{}.glvol", case.name)))?;
            case.labels
                .write(&dir.join("labels").join(format!("{}.glvol", case.name)))?;
        }
        let manifest = DatasetManifest {
            seed,
            spec: spec.clone(),
            train: self.train.iter().map(|c| c.name.clone()).collect(),
            val: self.val.iter().map(|c| c.name.clone()).collect(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let load = |names: &[String]| -> Result<Vec<Case>> { names.iter().map(|n| read_case(dir, n)).collect() };
        Ok(Self {
            train: load(&manifest.train)?,
            val: load(&manifest.val)?,
        })
    }
}

pub fn read_case(dir: &Path, name: &str) -> Result<Case> {
    let image = Volume::read(&dir.join("images").join(format!("{name}.glvol")))?;
    let labels = LabelVolume::read(&dir.join("labels").join(format!("{name}.glvol")))?;
    if image.dims != labels.dims {
        return Err(Error::shape(
            "read_case",
            format!("{name}: image {:?} and labels {:?} disagree", image.dims, labels.dims),
        ));
    }
    Ok(Case {
        name: name.to_string(),
        image,
        labels,
    })
}
