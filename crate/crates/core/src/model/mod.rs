//! Network assembly.

mod config;
mod report;

pub use config::ModelConfig;
pub use report::{estimate_flops, ParamGroup, ParamReport, PUBLISHED_PARAMS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Csab, Dmsf, Dmsu, Pointwise};
use crate::error::{Error, Result};
use crate::params::{check_unique, Bound, Init, ParamId, ParamStore};
use crate::swin::{PatchExpand, PatchMerge, StageSpec, SwinStage};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum EncoderLevel {
    Conv(Dmsf),
    Transformer { stage: SwinStage, merge: PatchMerge },
}

#[derive(Clone, Debug)]
pub enum DecoderLevel {
    Conv(Dmsu),
    Transformer {
        expand: PatchExpand,
        reduce: Pointwise,
        stage: SwinStage,
    },
}

/// Network structure; the parameter values live in a separate store.
#[derive(Clone, Debug)]
pub struct Glims {
    pub stem: Pointwise,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: SwinStage,
    pub gates: Vec<Csab>,
    /// Indexed by level, shallowest first.
    pub decoder: Vec<DecoderLevel>,
    pub head: Pointwise,
    /// Auxiliary heads for levels `1..deep_supervision_levels`.
    pub aux_heads: Vec<Pointwise>,
    pub in_channels: usize,
    pub patch_size: usize,
}

/// Attention factors of one skip gate.
#[derive(Clone, Debug)]
pub struct SkipAttention<T> {
    pub level: usize,
    pub channel: Tensor<T>,
    pub spatial: Tensor<T>,
}

pub struct ModelOutput<T> {
    pub logits: Var<T>,
    /// Auxiliary logits at levels 1, 2, ... (half, quarter, ... resolution).
    pub aux: Vec<Var<T>>,
    pub attention: Vec<SkipAttention<T>>,
}

impl<T: Element> ModelOutput<T> {
    /// Main logits followed by the auxiliary ones.
    pub fn levels(&self) -> Vec<Var<T>> {
        std::iter::once(self.logits.clone())
            .chain(self.aux.iter().cloned())
            .collect()
    }
}

impl Glims {
    fn build(config: &ModelConfig, store: &mut ParamStore<f32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(store, &mut rng);
        let c = config;
        let stem = Pointwise::new(&mut init.scope("stem"), c.in_channels, c.channels(0));

        let mut encoder = Vec::new();
        for level in 0..c.num_levels {
            let dim = c.channels(level);
            let mut scope = init.scope(&format!("enc{level}"));
            encoder.push(if c.is_transformer_level(level) {
                let extent = c.extent(level);
                let stage = SwinStage::new(
                    &mut scope,
                    &StageSpec {
                        dim,
                        heads: c.heads(dim),
                        depth: c.level_depth(level),
                        window: c.window,
                        mlp_ratio: c.mlp_ratio,
                        pos_extent: Some([extent; 3]),
                    },
                );
                let merge = PatchMerge::new(&mut scope.scope("merge"), dim);
                EncoderLevel::Transformer { stage, merge }
            } else {
                EncoderLevel::Conv(Dmsf::new(&mut scope, dim, &c.dilations))
            });
        }

        let dim = c.bottleneck_channels();
        let extent = c.extent(c.num_levels);
        let bottleneck = SwinStage::new(
            &mut init.scope("bottleneck"),
            &StageSpec {
                dim,
                heads: c.heads(dim),
                depth: c.bottleneck_depth(),
                window: c.window,
                mlp_ratio: c.mlp_ratio,
                pos_extent: Some([extent; 3]),
            },
        );

        let gates = (0..c.num_levels)
            .map(|l| Csab::new(&mut init.scope(&format!("csab{l}")), c.channels(l), c.csab_reduction))
            .collect();

        let mut decoder: Vec<DecoderLevel> = (0..c.num_levels)
            .rev()
            .map(|level| {
                let dim = c.channels(level);
                let mut scope = init.scope(&format!("dec{level}"));
                if c.is_transformer_level(level) {
                    DecoderLevel::Transformer {
                        expand: PatchExpand::new(&mut scope.scope("expand"), 2 * dim),
                        reduce: Pointwise::new(&mut scope.scope("reduce"), 2 * dim, dim),
                        stage: SwinStage::new(
                            &mut scope,
                            &StageSpec {
                                dim,
                                heads: c.heads(dim),
                                depth: c.level_depth(level),
                                window: c.window,
                                mlp_ratio: c.mlp_ratio,
                                pos_extent: None,
                            },
                        ),
                    }
                } else {
                    DecoderLevel::Conv(Dmsu::new(&mut scope, dim, &c.dilations))
                }
            })
            .collect();
        decoder.reverse();

        let head = Pointwise::new(&mut init.scope("head"), c.channels(0), c.num_classes);
        let aux_heads = (1..c.deep_supervision_levels)
            .map(|l| Pointwise::new(&mut init.scope(&format!("aux{l}")), c.channels(l), c.num_classes))
            .collect();

        Self {
            stem,
            encoder,
            bottleneck,
            gates,
            decoder,
            head,
            aux_heads,
            in_channels: c.in_channels,
            patch_size: c.patch_size,
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<ModelOutput<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [N, {}, D, H, W], got {s:?}", self.in_channels),
            ));
        }
        if let Some(axis) = (2..5).find(|&a| s[a] != self.patch_size) {
            return Err(Error::AxisMismatch {
                op: "forward",
                axis,
                expected: self.patch_size,
                actual: s[axis],
            });
        }

        let mut h = self.stem.forward(p, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            match level {
                EncoderLevel::Conv(dmsf) => {
                    let out = dmsf.forward(p, &h)?;
                    skips.push(out.skip);
                    h = out.down;
                }
                EncoderLevel::Transformer { stage, merge } => {
                    let y = stage.forward(p, &h)?;
                    h = merge.forward(p, &y)?;
                    skips.push(y);
                }
            }
        }
        h = self.bottleneck.forward(p, &h)?;

        let mut attention = Vec::with_capacity(skips.len());
        let mut decoded = vec![None; skips.len()];
        for level in (0..skips.len()).rev() {
            let gated = self.gates[level].forward(p, &skips[level])?;
            attention.push(SkipAttention {
                level,
                channel: gated.channel.value().clone(),
                spatial: gated.spatial.value().clone(),
            });
            h = match &self.decoder[level] {
                DecoderLevel::Conv(dmsu) => dmsu.forward(p, &h, &gated.refined)?,
                DecoderLevel::Transformer { expand, reduce, stage } => {
                    let up = expand.forward(p, &h)?;
                    let fused = reduce.forward(p, &Var::concat(&[up, gated.refined], 1)?)?;
                    stage.forward(p, &fused)?
                }
            };
            decoded[level] = Some(h.clone());
        }
        attention.reverse();

        let level = |l: usize| decoded[l].as_ref().expect("decoded level");
        let logits = self.head.forward(p, level(0))?;
        let aux = self
            .aux_heads
            .iter()
            .enumerate()
            .map(|(i, head)| head.forward(p, level(i + 1)))
            .collect::<Result<_>>()?;
        Ok(ModelOutput { logits, aux, attention })
    }

    /// Every parameter referenced by the structure, in visiting order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        for level in &self.encoder {
            match level {
                EncoderLevel::Conv(b) => ids.extend(b.param_ids()),
                EncoderLevel::Transformer { stage, merge } => {
                    ids.extend(stage.param_ids());
                    ids.extend(merge.param_ids());
                }
            }
        }
        ids.extend(self.bottleneck.param_ids());
        ids.extend(self.gates.iter().flat_map(Csab::param_ids));
        for level in &self.decoder {
            match level {
                DecoderLevel::Conv(b) => ids.extend(b.param_ids()),
                DecoderLevel::Transformer { expand, reduce, stage } => {
                    ids.extend(expand.param_ids());
                    ids.extend(reduce.param_ids());
                    ids.extend(stage.param_ids());
                }
            }
        }
        ids.extend(self.head.param_ids());
        ids.extend(self.aux_heads.iter().flat_map(Pointwise::param_ids));
        ids
    }
}

/// Network structure plus its `f32` parameters.
#[derive(Clone, Debug)]
pub struct GlimsModel {
    pub config: ModelConfig,
    pub net: Glims,
    pub params: ParamStore<f32>,
}

impl GlimsModel {
    /// Deterministic construction from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = Glims::build(config, &mut params, seed);
        Ok(Self {
            config: config.clone(),
            net,
            params,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Checks that no parameter is shared between blocks.
    pub fn check_unique_params(&self) -> std::result::Result<(), String> {
        check_unique(self.params.len(), &self.net.param_ids())
    }

    /// Forward pass on an arbitrary binding of the parameters.
    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<ModelOutput<T>> {
        self.net.forward(p, x)
    }

    /// Main logits without recording a tape.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = self.params.constants();
        Ok(self.net.forward(&p, &Var::constant(x.clone()))?.logits.value().clone())
    }

    /// Binds the parameters as leaves of a fresh tape.
    pub fn bind(&self) -> (Tape<f32>, Bound<f32>) {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        (tape, bound)
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::new(self)
    }
}
