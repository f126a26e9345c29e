//! Convolutional building blocks: point-wise projections, the dilated
//! aggregator block, the down/up sampling stages and the skip attention gate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::{cst, Conv3dOptions, Element, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

fn leaky<T: Element>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(cst(LEAKY_SLOPE))
}

fn check_channels(op: &'static str, x: &Var<impl Element>, expected: usize) -> Result<()> {
    if x.shape().len() != 5 {
        return Err(Error::shape(op, format!("need [N, C, D, H, W], got {:?}", x.shape())));
    }
    if x.shape()[1] != expected {
        return Err(Error::AxisMismatch {
            op,
            axis: 1,
            expected,
            actual: x.shape()[1],
        });
    }
    Ok(())
}

/// 1x1x1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, cin: usize, cout: usize) -> Self {
        Self {
            weight: init.conv_weight("weight", [cout, cin, 1, 1, 1]),
            bias: init.zeros("bias", &[cout]),
            cin,
            cout,
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("pointwise", x, self.cin)?;
        x.conv3d(&p[self.weight], Some(&p[self.bias]), Conv3dOptions::default())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Dilated feature aggregator: parallel dilated depth-wise 3x3x3 convolutions,
/// two point-wise fusion convolutions (3C -> 2C -> C), a residual add and
/// instance normalisation.
#[derive(Clone, Debug)]
pub struct Dacb {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub branches: Vec<ParamId>,
    pub fuse_in: Pointwise,
    pub fuse_out: Pointwise,
}

impl Dacb {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, dilations: &[usize]) -> Self {
        let branches = dilations
            .iter()
            .map(|d| init.conv_weight(&format!("dw{d}"), [channels, 1, 3, 3, 3]))
            .collect();
        let wide = dilations.len() * channels;
        let mid = 2 * channels;
        Self {
            channels,
            dilations: dilations.to_vec(),
            branches,
            fuse_in: Pointwise::new(&mut init.scope("fuse1"), wide, mid),
            fuse_out: Pointwise::new(&mut init.scope("fuse2"), mid, channels),
        }
    }

    /// `x + fused(x)`, the value before normalisation.
    pub fn forward_pre_norm<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("dacb", x, self.channels)?;
        let branches = self
            .branches
            .iter()
            .zip(&self.dilations)
            .map(|(&w, &d)| x.conv3d(&p[w], None, Conv3dOptions::depthwise(self.channels, d)))
            .collect::<Result<Vec<_>>>()?;
        let cat = Var::concat(&branches, 1)?;
        let fused = self.fuse_out.forward(p, &leaky(&self.fuse_in.forward(p, &cat)?))?;
        x.add(&fused)
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_pre_norm(p, x)?.instance_norm(cst(NORM_EPS))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.branches.clone();
        ids.extend(self.fuse_in.param_ids());
        ids.extend(self.fuse_out.param_ids());
        ids
    }
}

fn check_even(op: &'static str, x: &Var<impl Element>) -> Result<()> {
    for axis in 2..5 {
        if x.shape()[axis] % 2 != 0 {
            return Err(Error::shape(
                op,
                format!("axis {axis} has odd extent {}", x.shape()[axis]),
            ));
        }
    }
    Ok(())
}

/// Encoder stage: two aggregator blocks, then a strided 2x2x2 convolution
/// doubling the channels.
#[derive(Clone, Debug)]
pub struct Dmsf {
    pub blocks: [Dacb; 2],
    pub down_weight: ParamId,
    pub down_bias: ParamId,
    pub channels: usize,
}

/// Output of an encoder stage.
pub struct DownOutput<T> {
    pub skip: Var<T>,
    pub down: Var<T>,
}

impl Dmsf {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, dilations: &[usize]) -> Self {
        let blocks = [
            Dacb::new(&mut init.scope("dacb0"), channels, dilations),
            Dacb::new(&mut init.scope("dacb1"), channels, dilations),
        ];
        let mut down = init.scope("down");
        Self {
            blocks,
            down_weight: down.conv_weight("weight", [2 * channels, channels, 2, 2, 2]),
            down_bias: down.zeros("bias", &[2 * channels]),
            channels,
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<DownOutput<T>> {
        check_channels("dmsf", x, self.channels)?;
        check_even("dmsf", x)?;
        let skip = self.blocks[1].forward(p, &self.blocks[0].forward(p, x)?)?;
        let down = skip.conv3d(
            &p[self.down_weight],
            Some(&p[self.down_bias]),
            Conv3dOptions::strided(2),
        )?;
        Ok(DownOutput {
            down: leaky(&down),
            skip,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.blocks.iter().flat_map(Dacb::param_ids).collect();
        ids.extend([self.down_weight, self.down_bias]);
        ids
    }
}

/// Decoder stage: 2x2x2 transposed convolution halving the channels, fusion
/// with the refined skip through a point-wise convolution, then two
/// aggregator blocks.
#[derive(Clone, Debug)]
pub struct Dmsu {
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub fuse: Pointwise,
    pub blocks: [Dacb; 2],
    pub channels: usize,
}

impl Dmsu {
    /// `channels` is the output width `C`; the input carries `2C`.
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, dilations: &[usize]) -> Self {
        let mut up = init.scope("up");
        let up_weight = up.conv_transpose_weight("weight", [2 * channels, channels, 2, 2, 2]);
        let up_bias = up.zeros("bias", &[channels]);
        Self {
            up_weight,
            up_bias,
            fuse: Pointwise::new(&mut init.scope("fuse"), 2 * channels, channels),
            blocks: [
                Dacb::new(&mut init.scope("dacb0"), channels, dilations),
                Dacb::new(&mut init.scope("dacb1"), channels, dilations),
            ],
            channels,
        }
    }

    pub fn upsample<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        check_channels("dmsu", x, 2 * self.channels)?;
        Ok(leaky(&x.conv3d_transpose(&p[self.up_weight], Some(&p[self.up_bias]))?))
    }

    /// Point-wise reduction of `concat(up, skip)` back to `C` channels.
    pub fn fuse<T: Element>(&self, p: &Bound<T>, up: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        check_channels("dmsu", skip, self.channels)?;
        if up.shape()[2..] != skip.shape()[2..] {
            return Err(Error::shape(
                "dmsu",
                format!(
                    "upsampled extents {:?} differ from skip extents {:?}",
                    &up.shape()[2..],
                    &skip.shape()[2..]
                ),
            ));
        }
        self.fuse.forward(p, &Var::concat(&[up.clone(), skip.clone()], 1)?)
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>, skip: &Var<T>) -> Result<Var<T>> {
        let fused = self.fuse(p, &self.upsample(p, x)?, skip)?;
        self.blocks[1].forward(p, &self.blocks[0].forward(p, &fused)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.up_weight, self.up_bias];
        ids.extend(self.fuse.param_ids());
        ids.extend(self.blocks.iter().flat_map(Dacb::param_ids));
        ids
    }
}

/// Channel and spatial attention gate applied to a skip connection.
#[derive(Clone, Debug)]
pub struct Csab {
    pub channels: usize,
    pub hidden: usize,
    pub mlp_in_weight: ParamId,
    pub mlp_in_bias: ParamId,
    pub mlp_out_weight: ParamId,
    pub mlp_out_bias: ParamId,
    pub spatial: Pointwise,
}

/// Gated feature plus the two attention factors.
pub struct Gated<T> {
    pub refined: Var<T>,
    /// `[N, C, 1, 1, 1]`
    pub channel: Var<T>,
    /// `[N, 1, D, H, W]`
    pub spatial: Var<T>,
}

impl Csab {
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(1)
    }

    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, reduction: usize) -> Self {
        let hidden = Self::hidden_width(channels, reduction);
        let mut mlp = init.scope("mlp");
        let mlp_in_weight = mlp.trunc_normal("fc1.weight", &[hidden, channels]);
        let mlp_in_bias = mlp.zeros("fc1.bias", &[hidden]);
        let mlp_out_weight = mlp.trunc_normal("fc2.weight", &[channels, hidden]);
        let mlp_out_bias = mlp.zeros("fc2.bias", &[channels]);
        Self {
            channels,
            hidden,
            mlp_in_weight,
            mlp_in_bias,
            mlp_out_weight,
            mlp_out_bias,
            spatial: Pointwise::new(&mut init.scope("spatial"), 2, 1),
        }
    }

    fn mlp<T: Element>(&self, p: &Bound<T>, pooled: &Var<T>) -> Result<Var<T>> {
        let h = pooled.linear(&p[self.mlp_in_weight], Some(&p[self.mlp_in_bias]))?;
        leaky(&h).linear(&p[self.mlp_out_weight], Some(&p[self.mlp_out_bias]))
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, y: &Var<T>) -> Result<Gated<T>> {
        check_channels("csab", y, self.channels)?;
        let n = y.shape()[0];
        let flat = [n, self.channels];
        let max = y.max_axes(&[2, 3, 4])?.reshape(&flat)?;
        let avg = y.mean_axes(&[2, 3, 4])?.reshape(&flat)?;
        let logits = self.mlp(p, &max)?.add(&self.mlp(p, &avg)?)?;
        let channel = logits.sigmoid().reshape(&[n, self.channels, 1, 1, 1])?;

        let pooled = Var::concat(&[y.max_axes(&[1])?, y.mean_axes(&[1])?], 1)?;
        let spatial = self.spatial.forward(p, &pooled)?.sigmoid();

        let refined = y.mul(&channel)?.mul(&spatial)?;
        Ok(Gated {
            refined,
            channel,
            spatial,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.mlp_in_weight,
            self.mlp_in_bias,
            self.mlp_out_weight,
            self.mlp_out_bias,
        ];
        ids.extend(self.spatial.param_ids());
        ids
    }
}
