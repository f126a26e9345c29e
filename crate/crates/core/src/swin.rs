//! 3D (shifted) window self-attention.
//!
//! Windows are cut from a zero-padded grid; the shifted variant cyclically
//! rolls the padded grid by half a window first. Partitioning, rolling and
//! the reverse map are each a single gather, so round trips are exact and
//! the backward maps are exact scatters.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::kernels::ZERO_SLOT;
use crate::tensor::{cst, Element, Tensor, Var};

pub const MASK_VALUE: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

/// Window geometry over one `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub extent: [usize; 3],
    /// Window per axis, clamped to the extent.
    pub window: [usize; 3],
    pub padded: [usize; 3],
    /// Roll applied to the padded grid (zero for regular windows).
    pub shift: [usize; 3],
}

impl WindowGrid {
    pub fn new(extent: [usize; 3], window: usize, shifted: bool) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window size must be at least 1".into()));
        }
        if extent.contains(&0) {
            return Err(Error::shape("window", format!("empty grid {extent:?}")));
        }
        let win = extent.map(|e| window.min(e));
        let padded = [0, 1, 2].map(|a| extent[a].div_ceil(win[a]) * win[a]);
        let shift = if shifted { win.map(|m| m / 2) } else { [0; 3] };
        Ok(Self {
            extent,
            window: win,
            padded,
            shift,
        })
    }

    pub fn windows_per_axis(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.padded[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.windows_per_axis().iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    fn voxels(&self) -> usize {
        self.extent.iter().product()
    }

    /// Original (padded-grid) coordinate of token `t` of window `w`, or
    /// `None` for a padding token.
    fn source(&self, w: usize, t: usize) -> (Option<usize>, [usize; 3]) {
        let nw = self.windows_per_axis();
        let wc = [w / (nw[1] * nw[2]), (w / nw[2]) % nw[1], w % nw[2]];
        let m = self.window;
        let tc = [t / (m[1] * m[2]), (t / m[2]) % m[1], t % m[2]];
        let p = [0, 1, 2].map(|a| (wc[a] * m[a] + tc[a] + self.shift[a]) % self.padded[a]);
        let inside = (0..3).all(|a| p[a] < self.extent[a]);
        let flat = inside.then(|| (p[0] * self.extent[1] + p[1]) * self.extent[2] + p[2]);
        (flat, p)
    }

    /// `[N, C, D, H, W] -> [N * windows, tokens, C]`.
    pub fn partition<T: Element>(&self, x: &Var<T>) -> Result<Var<T>> {
        let (n, c) = self.check_grid(x)?;
        let (nw, tw, v) = (self.num_windows(), self.tokens_per_window(), self.voxels());
        let mut index = Vec::with_capacity(n * nw * tw * c);
        let sources: Vec<Option<usize>> = (0..nw)
            .flat_map(|w| (0..tw).map(move |t| (w, t)))
            .map(|(w, t)| self.source(w, t).0)
            .collect();
        for b in 0..n {
            for src in &sources {
                for ch in 0..c {
                    index.push(match src {
                        Some(s) => ((b * c + ch) * v + s) as u32,
                        None => ZERO_SLOT,
                    });
                }
            }
        }
        x.gather(&[n * nw, tw, c], Rc::new(index))
    }

    /// `[N * windows, tokens, C] -> [N, C, D, H, W]`, dropping padding.
    pub fn reverse<T: Element>(&self, tokens: &Var<T>, n: usize) -> Result<Var<T>> {
        let (nw, tw) = (self.num_windows(), self.tokens_per_window());
        let s = tokens.shape();
        if s.len() != 3 || s[0] != n * nw || s[1] != tw {
            return Err(Error::shape(
                "window_reverse",
                format!("expected [{}, {tw}, C], got {s:?}", n * nw),
            ));
        }
        let c = s[2];
        let mut slot = vec![0usize; self.voxels()];
        for w in 0..nw {
            for t in 0..tw {
                if let (Some(v), _) = self.source(w, t) {
                    slot[v] = w * tw + t;
                }
            }
        }
        let mut index = Vec::with_capacity(n * c * slot.len());
        for b in 0..n {
            for ch in 0..c {
                index.extend(slot.iter().map(|&wt| ((b * nw * tw + wt) * c + ch) as u32));
            }
        }
        let [d, h, w] = self.extent;
        tokens.gather(&[n, c, d, h, w], Rc::new(index))
    }

    fn check_grid<T: Element>(&self, x: &Var<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 5 || s[2..] != self.extent {
            return Err(Error::shape(
                "window_partition",
                format!("expected [N, C, {:?}], got {s:?}", self.extent),
            ));
        }
        Ok((s[0], s[1]))
    }

    /// Additive `[windows, tokens, tokens]` mask: keys that are padding, or
    /// that came from a different side of the roll than the query, get
    /// [`MASK_VALUE`]. `None` when nothing needs masking.
    pub fn mask<T: Element>(&self) -> Option<Tensor<T>> {
        let needs = self.shift.iter().any(|&s| s > 0) || self.padded != self.extent;
        if !needs {
            return None;
        }
        let (nw, tw) = (self.num_windows(), self.tokens_per_window());
        let big = cst::<T>(MASK_VALUE);
        let mut data = vec![T::zero(); nw * tw * tw];
        for w in 0..nw {
            let tokens: Vec<(bool, u8)> = (0..tw)
                .map(|t| {
                    let (src, p) = self.source(w, t);
                    let region = (0..3).fold(0u8, |r, a| r | (u8::from(p[a] < self.shift[a]) << a));
                    (src.is_some(), region)
                })
                .collect();
            for (i, &(_, ri)) in tokens.iter().enumerate() {
                for (j, &(real, rj)) in tokens.iter().enumerate() {
                    if !real || ri != rj {
                        data[(w * tw + i) * tw + j] = big;
                    }
                }
            }
        }
        Some(Tensor::new(&[nw, tw, tw], data).expect("mask shape"))
    }
}

/// Cyclic roll of the spatial axes: `out[p] = x[(p + offset) mod extent]`.
pub fn roll<T: Element>(x: &Var<T>, offset: [isize; 3]) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::shape("roll", format!("need 5-D input, got {s:?}")));
    }
    let ext = [s[2], s[3], s[4]];
    let index = crate::tensor::spatial_index_map(s, s, |o| {
        Some([0, 1, 2].map(|a| (o[a] as isize + offset[a]).rem_euclid(ext[a] as isize) as usize))
    });
    x.gather(s, Rc::new(index))
}

/// Multi-head attention inside windows: `softmax(q k^T / sqrt(d) + mask) v`.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl WindowAttention {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            qkv_weight: init.trunc_normal("qkv.weight", &[3 * dim, dim]),
            qkv_bias: init.zeros("qkv.bias", &[3 * dim]),
            proj_weight: init.trunc_normal("proj.weight", &[dim, dim]),
            proj_bias: init.zeros("proj.bias", &[dim]),
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, tokens: &Var<T>, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(p, tokens, mask)?.0)
    }

    /// Output tokens and the `[B, heads, T, T]` attention weights.
    pub fn forward_with_weights<T: Element>(
        &self,
        p: &Bound<T>,
        tokens: &Var<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<T>, Var<T>)> {
        let s = tokens.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "wmsa",
                format!("expected [B, T, {}], got {s:?}", self.dim),
            ));
        }
        let (b, t, c, h) = (s[0], s[1], self.dim, self.heads);
        if c % h != 0 {
            return Err(Error::shape("wmsa", format!("{h} heads do not divide width {c}")));
        }
        let d = c / h;
        let qkv = tokens
            .linear(&p[self.qkv_weight], Some(&p[self.qkv_bias]))?
            .reshape(&[b, t, 3, h, d])?
            .permute(&[2, 0, 3, 1, 4])?;
        let parts = qkv.split(0, &[1, 1, 1])?;
        let [q, k, v] = [0, 1, 2].map(|i| parts[i].reshape(&[b, h, t, d]));
        let (q, k, v) = (q?, k?, v?);
        let scale = T::one() / cst::<T>(d as f64).sqrt();
        let mut scores = q.scale(scale).matmul(&k.permute(&[0, 1, 3, 2])?)?;
        if let Some(m) = mask {
            let nw = m.shape()[0];
            if m.shape() != [nw, t, t] || nw == 0 || b % nw != 0 {
                return Err(Error::shape(
                    "wmsa",
                    format!("mask {:?} does not fit {b} windows of {t} tokens", m.shape()),
                ));
            }
            let m = Var::constant(m.clone().reshape(&[1, nw, 1, t, t])?);
            scores = scores
                .reshape(&[b / nw, nw, h, t, t])?
                .add(&m)?
                .reshape(&[b, h, t, t])?;
        }
        let weights = scores.softmax(3)?;
        let out = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, c])?
            .linear(&p[self.proj_weight], Some(&p[self.proj_bias]))?;
        Ok((out, weights))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.qkv_weight, self.qkv_bias, self.proj_weight, self.proj_bias]
    }
}

/// Layer norm affine pair.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, dim: usize) -> Self {
        Self {
            gamma: init.ones("gamma", &[dim]),
            beta: init.zeros("beta", &[dim]),
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(&p[self.gamma], &p[self.beta], cst(LN_EPS))
    }
}

/// Pre-norm transformer block over a `[N, C, D, H, W]` grid.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub dim: usize,
    pub window: usize,
    pub shifted: bool,
    pub norm1: Norm,
    pub attn: WindowAttention,
    pub norm2: Norm,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl SwinBlock {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
    ) -> Self {
        let hidden = mlp_ratio * dim;
        let norm1 = Norm::new(&mut init.scope("norm1"), dim);
        let attn = WindowAttention::new(&mut init.scope("attn"), dim, heads);
        let norm2 = Norm::new(&mut init.scope("norm2"), dim);
        let mut mlp = init.scope("mlp");
        Self {
            dim,
            window,
            shifted,
            norm1,
            attn,
            norm2,
            fc1_weight: mlp.trunc_normal("fc1.weight", &[hidden, dim]),
            fc1_bias: mlp.zeros("fc1.bias", &[hidden]),
            fc2_weight: mlp.trunc_normal("fc2.weight", &[dim, hidden]),
            fc2_bias: mlp.zeros("fc2.bias", &[dim]),
        }
    }

    pub fn grid(&self, x: &Var<impl Element>) -> Result<WindowGrid> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.dim {
            return Err(Error::shape(
                "swin_block",
                format!("expected [N, {}, D, H, W], got {s:?}", self.dim),
            ));
        }
        WindowGrid::new([s[2], s[3], s[4]], self.window, self.shifted)
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let grid = self.grid(x)?;
        let tokens = grid.partition(x)?;
        let attended = self
            .attn
            .forward(p, &self.norm1.forward(p, &tokens)?, grid.mask::<T>().as_ref())?;
        let x = x.add(&grid.reverse(&attended, x.shape()[0])?)?;

        let t = x.permute(&[0, 2, 3, 4, 1])?;
        let h = self
            .norm2
            .forward(p, &t)?
            .linear(&p[self.fc1_weight], Some(&p[self.fc1_bias]))?
            .gelu()
            .linear(&p[self.fc2_weight], Some(&p[self.fc2_bias]))?;
        t.add(&h)?.permute(&[0, 4, 1, 2, 3])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm1.gamma, self.norm1.beta];
        ids.extend(self.attn.param_ids());
        ids.extend([
            self.norm2.gamma,
            self.norm2.beta,
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
        ]);
        ids
    }
}

/// Sequence of blocks alternating regular and shifted windows, with an
/// optional learnable positional embedding added first.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub dim: usize,
    pub pos: Option<ParamId>,
    pub blocks: Vec<SwinBlock>,
}

pub struct StageSpec {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Grid extent when a positional embedding is wanted.
    pub pos_extent: Option<[usize; 3]>,
}

impl SwinStage {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, spec: &StageSpec) -> Self {
        let pos = match (spec.depth, spec.pos_extent) {
            (0, _) | (_, None) => None,
            (_, Some([d, h, w])) => Some(init.trunc_normal("pos", &[1, spec.dim, d, h, w])),
        };
        let blocks = (0..spec.depth)
            .map(|i| {
                SwinBlock::new(
                    &mut init.scope(&format!("block{i}")),
                    spec.dim,
                    spec.heads,
                    spec.window,
                    spec.mlp_ratio,
                    i % 2 == 1,
                )
            })
            .collect();
        Self {
            dim: spec.dim,
            pos,
            blocks,
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut x = match self.pos {
            Some(id) => {
                if x.shape()[1..] != p[id].shape()[1..] {
                    return Err(Error::shape(
                        "swin_stage",
                        format!("positional embedding {:?} does not fit {:?}", p[id].shape(), x.shape()),
                    ));
                }
                x.add(&p[id])?
            }
            None => x.clone(),
        };
        for block in &self.blocks {
            x = block.forward(p, &x)?;
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.pos.into_iter().collect();
        ids.extend(self.blocks.iter().flat_map(SwinBlock::param_ids));
        ids
    }
}

fn check_even_grid(op: &'static str, s: &[usize]) -> Result<()> {
    if s.len() != 5 {
        return Err(Error::shape(op, format!("need 5-D input, got {s:?}")));
    }
    if let Some(a) = (2..5).find(|&a| s[a] % 2 != 0) {
        return Err(Error::shape(op, format!("axis {a} has odd extent {}", s[a])));
    }
    Ok(())
}

/// Offsets of the 2x2x2 neighbourhood, in the channel order used by
/// [`PatchMerge`] and [`PatchExpand`].
const NEIGHBOURS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [0, 0, 1],
    [0, 1, 0],
    [0, 1, 1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, 0],
    [1, 1, 1],
];

/// Concatenates each 2x2x2 neighbourhood (8C) and projects it to 2C.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchMerge {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, dim: usize) -> Self {
        Self {
            dim,
            weight: init.trunc_normal("weight", &[2 * dim, 8 * dim]),
            bias: init.zeros("bias", &[2 * dim]),
        }
    }

    /// `[N, C, D, H, W] -> [N, D/2, H/2, W/2, 8C]`.
    pub fn gather_neighbourhoods<T: Element>(x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape().to_vec();
        check_even_grid("patch_merge", &s)?;
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let (d2, h2, w2) = (d / 2, h / 2, w / 2);
        let mut index = Vec::with_capacity(x.value().numel());
        for b in 0..n {
            for z in 0..d2 {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        for o in NEIGHBOURS {
                            let (zz, yy, xs) = (2 * z + o[0], 2 * y + o[1], 2 * xx + o[2]);
                            for ch in 0..c {
                                index.push(((((b * c + ch) * d + zz) * h + yy) * w + xs) as u32);
                            }
                        }
                    }
                }
            }
        }
        x.gather(&[n, d2, h2, w2, 8 * c], Rc::new(index))
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().get(1) != Some(&self.dim) {
            return Err(Error::shape(
                "patch_merge",
                format!("expected {} channels, got {:?}", self.dim, x.shape()),
            ));
        }
        Self::gather_neighbourhoods(x)?
            .linear(&p[self.weight], Some(&p[self.bias]))?
            .permute(&[0, 4, 1, 2, 3])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Projects C to 4C and scatters it over 2x2x2 voxels of C/2 channels.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchExpand {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, dim: usize) -> Self {
        Self {
            dim,
            weight: init.trunc_normal("weight", &[4 * dim, dim]),
            bias: init.zeros("bias", &[4 * dim]),
        }
    }

    /// `[N, D, H, W, 8K] -> [N, K, 2D, 2H, 2W]`, the inverse layout of
    /// [`PatchMerge::gather_neighbourhoods`].
    pub fn scatter_neighbourhoods<T: Element>(tokens: &Var<T>) -> Result<Var<T>> {
        let s = tokens.shape().to_vec();
        if s.len() != 5 || s[4] % 8 != 0 {
            return Err(Error::shape(
                "patch_expand",
                format!("expected [N, D, H, W, 8K], got {s:?}"),
            ));
        }
        let (n, d, h, w, k) = (s[0], s[1], s[2], s[3], s[4] / 8);
        let mut index = Vec::with_capacity(tokens.value().numel());
        for b in 0..n {
            for ch in 0..k {
                for zz in 0..2 * d {
                    for yy in 0..2 * h {
                        for xs in 0..2 * w {
                            let o = (zz % 2) * 4 + (yy % 2) * 2 + xs % 2;
                            let token = ((b * d + zz / 2) * h + yy / 2) * w + xs / 2;
                            index.push((token * 8 * k + o * k + ch) as u32);
                        }
                    }
                }
            }
        }
        tokens.gather(&[n, k, 2 * d, 2 * h, 2 * w], Rc::new(index))
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.dim || self.dim % 2 != 0 {
            return Err(Error::shape(
                "patch_expand",
                format!("expected [N, {}, D, H, W] with even width, got {s:?}", self.dim),
            ));
        }
        let t = x
            .permute(&[0, 2, 3, 4, 1])?
            .linear(&p[self.weight], Some(&p[self.bias]))?;
        Self::scatter_neighbourhoods(&t)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}
