//! Parameter breakdown and analytic FLOP estimate.

use std::fmt;

use super::{GlimsModel, ModelConfig};
use crate::blocks::Csab;
use crate::swin::WindowGrid;

/// Trainable parameter count published for the reference configuration.
pub const PUBLISHED_PARAMS: usize = 47_160_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub total: usize,
    pub groups: Vec<ParamGroup>,
    pub flops: u64,
    pub config: ModelConfig,
}

fn group_of(config: &ModelConfig, name: &str) -> &'static str {
    let head = name.split('.').next().unwrap_or(name);
    let level = |prefix: &str| head.strip_prefix(prefix).and_then(|l| l.parse::<usize>().ok());
    if head == "stem" {
        "stem"
    } else if head == "bottleneck" {
        "bottleneck transformer"
    } else if head.starts_with("csab") {
        "skip attention gates"
    } else if head == "head" || head.starts_with("aux") {
        "segmentation heads"
    } else if let Some(l) = level("enc") {
        if config.is_transformer_level(l) {
            "encoder transformer"
        } else {
            "encoder convolutional"
        }
    } else if let Some(l) = level("dec") {
        if config.is_transformer_level(l) {
            "decoder transformer"
        } else {
            "decoder convolutional"
        }
    } else {
        "other"
    }
}

impl ParamReport {
    pub fn new(model: &GlimsModel) -> Self {
        let mut groups: Vec<ParamGroup> = Vec::new();
        for (_, name, value) in model.params.iter() {
            let g = group_of(&model.config, name);
            match groups.iter_mut().find(|e| e.name == g) {
                Some(e) => e.count += value.numel(),
                None => groups.push(ParamGroup {
                    name: g.to_string(),
                    count: value.numel(),
                }),
            }
        }
        Self {
            total: model.count_parameters(),
            groups,
            flops: estimate_flops(&model.config, 1),
            config: model.config.clone(),
        }
    }

    /// `(total - published) / published`.
    pub fn relative_delta(&self) -> f64 {
        (self.total as f64 - PUBLISHED_PARAMS as f64) / PUBLISHED_PARAMS as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "{:<26} {:>14}", "group", "parameters")?;
        for g in &self.groups {
            writeln!(f, "{:<26} {:>14}", g.name, g.count)?;
        }
        writeln!(f, "{:<26} {:>14}", "total", self.total)?;
        writeln!(
            f,
            "published reference: {:.2}M, delta {:+.2}%",
            PUBLISHED_PARAMS as f64 / 1e6,
            100.0 * self.relative_delta()
        )?;
        writeln!(
            f,
            "estimated FLOPs for one {}^3 patch: {:.2}G (multiply-add = 2)",
            c.patch_size,
            self.flops as f64 / 1e9
        )?;
        writeln!(f, "reconstruction choices behind the count:")?;
        writeln!(
            f,
            "  aggregator fusion widths {}C -> 2C -> C, depth-wise kernels without bias",
            c.dilations.len()
        )?;
        writeln!(
            f,
            "  attention heads = C/{} (min 1), mlp ratio {}, qkv bias, no relative position table",
            c.head_dim, c.mlp_ratio
        )?;
        writeln!(
            f,
            "  skip gates: MLP C -> C/{} -> C with biases, 1x1x1 spatial conv (2 -> 1)",
            c.csab_reduction
        )?;
        writeln!(f, "  patch merge 8C -> 2C and patch expand C -> 4C, both with bias")?;
        write!(
            f,
            "  positional embeddings on encoder transformer levels and the bottleneck only"
        )
    }
}

fn dacb_flops(c: &ModelConfig, ch: u64, vox: u64) -> u64 {
    let d = c.dilations.len() as u64;
    2 * vox * (d * ch * 27 + d * ch * 2 * ch + 2 * ch * ch)
}

fn swin_block_flops(c: &ModelConfig, dim: u64, extent: usize, shifted: bool) -> u64 {
    let grid = WindowGrid::new([extent; 3], c.window, shifted).expect("valid grid");
    let padded = (grid.num_windows() * grid.tokens_per_window()) as u64;
    let t = grid.tokens_per_window() as u64;
    let vox = (extent as u64).pow(3);
    let hidden = c.mlp_ratio as u64 * dim;
    let qkv = 2 * padded * dim * 3 * dim;
    let attention = 4 * grid.num_windows() as u64 * t * t * dim;
    let proj = 2 * padded * dim * dim;
    let mlp = 4 * vox * dim * hidden;
    qkv + attention + proj + mlp
}

fn stage_flops(c: &ModelConfig, dim: u64, extent: usize, depth: usize) -> u64 {
    (0..depth).map(|i| swin_block_flops(c, dim, extent, i % 2 == 1)).sum()
}

/// Analytic FLOPs for one forward pass over `batch` patches, counting
/// convolutions, linear layers and the two attention products; a
/// multiply-add counts as two. Normalisation, activations and pooling are
/// left out.
pub fn estimate_flops(c: &ModelConfig, batch: usize) -> u64 {
    let vox = |l: usize| (c.extent(l) as u64).pow(3);
    let ch = |l: usize| c.channels(l) as u64;
    let k = c.num_classes as u64;
    let mut total = 2 * vox(0) * c.in_channels as u64 * ch(0);
    for l in 0..c.num_levels {
        let (cl, v) = (ch(l), vox(l));
        if c.is_transformer_level(l) {
            total += stage_flops(c, cl, c.extent(l), c.level_depth(l));
            total += 2 * (v / 8) * 8 * cl * 2 * cl;
            total += 2 * (v / 8) * 2 * cl * 8 * cl;
            total += 2 * v * 2 * cl * cl;
            total += stage_flops(c, cl, c.extent(l), c.level_depth(l));
        } else {
            total += 2 * dacb_flops(c, cl, v) + 2 * (v / 8) * 2 * cl * cl * 8;
            total += 2 * (v / 8) * 2 * cl * cl * 8 + 2 * v * 2 * cl * cl + 2 * dacb_flops(c, cl, v);
        }
        let hidden = Csab::hidden_width(c.channels(l), c.csab_reduction) as u64;
        total += 2 * 2 * 2 * cl * hidden + 2 * v * 2;
    }
    total += stage_flops(c, ch(c.num_levels), c.extent(c.num_levels), c.bottleneck_depth());
    total += 2 * vox(0) * ch(0) * k;
    total += (1..c.deep_supervision_levels)
        .map(|l| 2 * vox(l) * ch(l) * k)
        .sum::<u64>();
    total * batch as u64
}
