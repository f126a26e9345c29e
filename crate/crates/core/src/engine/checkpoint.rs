//! Checkpoint directories: a text manifest plus a little-endian `f32` blob.
//!
//! ```text
//! glims-checkpoint 1
//! epoch 12
//! best_dsc 0.9431
//! fingerprint 3f2a...
//! rng <64 hex seed> <stream> <word position>
//! optimizer_step 24
//! config {"in_channels":4,...}
//! tensor stem.weight f32 8,4,1,1,1 0 32
//! ```
//!
//! Tensor lines carry name, dtype, shape, byte offset and element count.
//! Optimizer moments are stored as `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, FormatError, Result};
use crate::model::{GlimsModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
const HEADER: &str = "glims-checkpoint 1";

/// Exact ChaCha stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optim: AdamW,
    pub epoch: usize,
    pub best_dsc: Option<f64>,
    pub fingerprint: String,
    pub rng: RngState,
}

fn manifest_err(line: usize, msg: impl Into<String>) -> Error {
    FormatError::Manifest { line, msg: msg.into() }.into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

impl Checkpoint {
    pub fn capture(model: &GlimsModel, optim: &AdamW, epoch: usize, best_dsc: Option<f64>, rng: &ChaCha8Rng) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            optim: optim.clone(),
            epoch,
            best_dsc,
            fingerprint: model.config.fingerprint(),
            rng: RngState::capture(rng),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = (String, &Tensor<f32>)> {
        let names = self.params.names();
        let params = self.params.iter().map(|(_, n, t)| (n.to_string(), t));
        let m = self.optim.m.iter().zip(names).map(|(t, n)| (format!("adam.m/{n}"), t));
        let v = self.optim.v.iter().zip(names).map(|(t, n)| (format!("adam.v/{n}"), t));
        params.chain(m).chain(v)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::new();
        let mut blob = Vec::new();
        text.push_str(HEADER);
        text.push('\n');
        text.push_str(&format!("epoch {}\n", self.epoch));
        match self.best_dsc {
            Some(d) => text.push_str(&format!("best_dsc {d:?}\n")),
            None => text.push_str("best_dsc none\n"),
        }
        text.push_str(&format!("fingerprint {}\n", self.fingerprint));
        text.push_str(&format!(
            "rng {} {} {}\n",
            hex(&self.rng.seed),
            self.rng.stream,
            self.rng.word_pos
        ));
        text.push_str(&format!("optimizer_step {}\n", self.optim.step));
        let oc = self.optim.config;
        text.push_str(&format!(
            "optimizer {:?} {:?} {:?} {:?} {:?}\n",
            oc.lr, oc.weight_decay, oc.beta1, oc.beta2, oc.eps
        ));
        text.push_str(&format!(
            "config {}\n",
            serde_json::to_string(&self.config).expect("config serialises")
        ));
        for (name, t) in self.tensors() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            text.push_str(&format!(
                "tensor {name} f32 {} {} {}\n",
                shape.join(","),
                blob.len(),
                t.numel()
            ));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mpath = dir.join(MANIFEST_FILE);
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let bpath = dir.join(BLOB_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(manifest_err(1, format!("expected `{HEADER}`"))),
        }
        let mut epoch = None;
        let mut best_dsc = None;
        let mut fingerprint = None;
        let mut rng = None;
        let mut step = None;
        let mut optim_config = None;
        let mut config = None;
        let mut entries = Vec::new();
        for (n, line) in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let bad = |what: &str| manifest_err(n, format!("malformed {what}: `{line}`"));
            match key {
                "epoch" => epoch = Some(rest.parse::<usize>().map_err(|_| bad("epoch"))?),
                "best_dsc" => {
                    best_dsc = Some(match rest {
                        "none" => None,
                        v => Some(v.parse::<f64>().map_err(|_| bad("best_dsc"))?),
                    })
                }
                "fingerprint" => fingerprint = Some(rest.to_string()),
                "rng" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad("rng"));
                    }
                    rng = Some(RngState {
                        seed: unhex(f[0]).ok_or_else(|| bad("rng seed"))?,
                        stream: f[1].parse().map_err(|_| bad("rng stream"))?,
                        word_pos: f[2].parse().map_err(|_| bad("rng position"))?,
                    });
                }
                "optimizer_step" => step = Some(rest.parse::<u64>().map_err(|_| bad("optimizer_step"))?),
                "optimizer" => {
                    let f: Vec<f64> = rest
                        .split(' ')
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("optimizer"))?;
                    if f.len() != 5 {
                        return Err(bad("optimizer"));
                    }
                    optim_config = Some(AdamWConfig {
                        lr: f[0],
                        weight_decay: f[1],
                        beta1: f[2],
                        beta2: f[3],
                        eps: f[4],
                    });
                }
                "config" => {
                    config = Some(
                        serde_json::from_str::<ModelConfig>(rest)
                            .map_err(|e| manifest_err(n, format!("config: {e}")))?,
                    )
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 || f[1] != "f32" {
                        return Err(bad("tensor entry"));
                    }
                    let shape = f[2]
                        .split(',')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| bad("tensor shape"))?;
                    let entry = Entry {
                        name: f[0].to_string(),
                        shape,
                        offset: f[3].parse().map_err(|_| bad("tensor offset"))?,
                        numel: f[4].parse().map_err(|_| bad("tensor size"))?,
                    };
                    if entry.shape.iter().product::<usize>() != entry.numel {
                        return Err(bad("tensor size"));
                    }
                    entries.push((n, entry));
                }
                "" => {}
                other => return Err(manifest_err(n, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| manifest_err(0, format!("missing `{what}`"));
        let config = config.ok_or_else(|| missing("config"))?;
        let fingerprint = fingerprint.ok_or_else(|| missing("fingerprint"))?;

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut end = 0;
        for (n, e) in entries {
            let bytes = e.numel * 4;
            if e.offset + bytes > blob.len() {
                return Err(FormatError::Truncated {
                    expected: e.offset + bytes,
                    actual: blob.len(),
                }
                .into());
            }
            let data = blob[e.offset..e.offset + bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            end = end.max(e.offset + bytes);
            if let Some(p) = e.name.strip_prefix("adam.m/") {
                check_order(n, p, params.names(), m.len())?;
                m.push(t);
            } else if let Some(p) = e.name.strip_prefix("adam.v/") {
                check_order(n, p, params.names(), v.len())?;
                v.push(t);
            } else {
                if params.find(&e.name).is_some() {
                    return Err(manifest_err(n, format!("duplicate tensor `{}`", e.name)));
                }
                params.add(e.name, t);
            }
        }
        if end != blob.len() {
            return Err(FormatError::TrailingBytes {
                expected: end,
                actual: blob.len(),
            }
            .into());
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(manifest_err(0, "optimizer moments do not cover every parameter"));
        }
        Ok(Self {
            config,
            params,
            optim: AdamW {
                config: optim_config.ok_or_else(|| missing("optimizer"))?,
                step: step.ok_or_else(|| missing("optimizer_step"))?,
                m,
                v,
            },
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            best_dsc: best_dsc.ok_or_else(|| missing("best_dsc"))?,
            fingerprint,
            rng: rng.ok_or_else(|| missing("rng"))?,
        })
    }

    /// Rebuilds the model, refusing a checkpoint written for another
    /// configuration.
    pub fn model(&self, expected: &ModelConfig) -> Result<GlimsModel> {
        let current = expected.fingerprint();
        if current != self.fingerprint || self.config.fingerprint() != self.fingerprint {
            return Err(FormatError::FingerprintMismatch {
                stored: self.fingerprint.clone(),
                current,
            }
            .into());
        }
        let mut model = GlimsModel::build(expected, 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (id, name, value) in self.params.iter() {
            let target = model
                .params
                .find(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}` in checkpoint")))?;
            debug_assert_eq!(target, id);
            model.params.set(target, value.clone())?;
        }
        Ok(model)
    }
}

fn check_order(line: usize, name: &str, names: &[String], i: usize) -> Result<()> {
    if names.get(i).map(String::as_str) != Some(name) {
        return Err(manifest_err(line, format!("optimizer moment `{name}` out of order")));
    }
    Ok(())
}
