//! 3D convolution and the 2x2x2 stride-2 transposed convolution.
//!
//! Three forward paths: point-wise (a GEMM per sample), depth-wise with unit
//! stride (direct loops per channel plane) and a general im2col + GEMM path.
//! Each backward map parallelises over outputs it owns exclusively, so the
//! results do not depend on the thread count.

use super::kernels::gemm;
use super::{Element, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv3dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv3dOptions {
    /// Shape-preserving dilated depth-wise 3x3x3 settings for `channels`.
    pub fn depthwise(channels: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation,
            groups: channels,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    groups: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, o: Conv3dOptions) -> Result<Self> {
        const OP: &str = "conv3d";
        if x.len() != 5 {
            return Err(Error::shape(OP, format!("input must be 5-D, got {x:?}")));
        }
        if w.len() != 5 {
            return Err(Error::shape(OP, format!("weight must be 5-D, got {w:?}")));
        }
        if o.stride == 0 || o.dilation == 0 || o.groups == 0 {
            return Err(Error::InvalidArgument(
                "conv3d: stride, dilation and groups must be positive".into(),
            ));
        }
        let (cin, cout, k) = (x[1], w[0], w[2]);
        if cin % o.groups != 0 {
            return Err(Error::shape(
                OP,
                format!("groups {} does not divide input channels {cin}", o.groups),
            ));
        }
        if cout % o.groups != 0 {
            return Err(Error::shape(
                OP,
                format!("groups {} does not divide output channels {cout}", o.groups),
            ));
        }
        if w[1] != cin / o.groups {
            return Err(Error::AxisMismatch {
                op: OP,
                axis: 1,
                expected: cin / o.groups,
                actual: w[1],
            });
        }
        for axis in 3..5 {
            if w[axis] != k {
                return Err(Error::AxisMismatch {
                    op: OP,
                    axis,
                    expected: k,
                    actual: w[axis],
                });
            }
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::shape(OP, format!("bias must have shape [{cout}], got {b:?}")));
            }
        }
        let mut output = [0; 3];
        for i in 0..3 {
            let span = o.dilation * (k - 1) + 1;
            let padded = x[2 + i] + 2 * o.padding;
            if padded < span || k == 0 {
                return Err(Error::shape(
                    OP,
                    format!("axis {}: padded extent {padded} smaller than kernel span {span}", 2 + i),
                ));
            }
            output[i] = (padded - span) / o.stride + 1;
        }
        Ok(Self {
            n: x[0],
            cin,
            cout,
            input: [x[2], x[3], x[4]],
            output,
            k,
            stride: o.stride,
            dilation: o.dilation,
            padding: o.padding,
            groups: o.groups,
        })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.output[0], self.output[1], self.output[2]]
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.stride == 1
    }

    /// Output positions `o` along `axis` for which input `o + t` is in range,
    /// where `t` is the signed tap offset (unit stride only).
    fn valid_range(&self, axis: usize, t: isize) -> (usize, usize) {
        let lo = (-t).max(0) as usize;
        let hi = (self.input[axis] as isize - t).min(self.output[axis] as isize);
        (lo.min(self.output[axis]), hi.max(lo as isize) as usize)
    }

    fn tap_offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.padding as isize
    }
}

/// Calls `f(tap, in_offset, out_offset, len)` for every contiguous run of
/// the unit-stride correlation between one input and one output plane.
fn for_each_run(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [ih, iw] = [g.input[1], g.input[2]];
    let [oh, ow] = [g.output[1], g.output[2]];
    for kd in 0..g.k {
        let td = g.tap_offset(kd);
        let (d0, d1) = g.valid_range(0, td);
        for kh in 0..g.k {
            let th = g.tap_offset(kh);
            let (h0, h1) = g.valid_range(1, th);
            for kw in 0..g.k {
                let tw = g.tap_offset(kw);
                let (w0, w1) = g.valid_range(2, tw);
                if w1 <= w0 {
                    continue;
                }
                let tap = (kd * g.k + kh) * g.k + kw;
                for od in d0..d1 {
                    let id = (od as isize + td) as usize;
                    for o_h in h0..h1 {
                        let i_h = (o_h as isize + th) as usize;
                        let out_off = (od * oh + o_h) * ow + w0;
                        let in_off = (id * ih + i_h) * iw + (w0 as isize + tw) as usize;
                        f(tap, in_off, out_off, w1 - w0);
                    }
                }
            }
        }
    }
}

fn im2col<T: Element>(g: &Geometry, x_group: &[T], cin_g: usize, col: &mut [T]) {
    let (iv, ov) = (g.in_vol(), g.out_vol());
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let taps = g.taps();
    for ci in 0..cin_g {
        let plane = &x_group[ci * iv..(ci + 1) * iv];
        for tap in 0..taps {
            let (kd, kh, kw) = (tap / (g.k * g.k), (tap / g.k) % g.k, tap % g.k);
            let row = &mut col[(ci * taps + tap) * ov..(ci * taps + tap + 1) * ov];
            let mut idx = 0;
            for z in 0..od {
                let zi = (z * g.stride + kd * g.dilation) as isize - g.padding as isize;
                for y in 0..oh {
                    let yi = (y * g.stride + kh * g.dilation) as isize - g.padding as isize;
                    for xo in 0..ow {
                        let xi = (xo * g.stride + kw * g.dilation) as isize - g.padding as isize;
                        row[idx] = if zi >= 0
                            && yi >= 0
                            && xi >= 0
                            && (zi as usize) < id
                            && (yi as usize) < ih
                            && (xi as usize) < iw
                        {
                            plane[((zi as usize) * ih + yi as usize) * iw + xi as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, col: &[T], cin_g: usize, dx_group: &mut [T]) {
    let (iv, ov) = (g.in_vol(), g.out_vol());
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let taps = g.taps();
    for ci in 0..cin_g {
        let plane = &mut dx_group[ci * iv..(ci + 1) * iv];
        for tap in 0..taps {
            let (kd, kh, kw) = (tap / (g.k * g.k), (tap / g.k) % g.k, tap % g.k);
            let row = &col[(ci * taps + tap) * ov..(ci * taps + tap + 1) * ov];
            let mut idx = 0;
            for z in 0..od {
                let zi = (z * g.stride + kd * g.dilation) as isize - g.padding as isize;
                for y in 0..oh {
                    let yi = (y * g.stride + kh * g.dilation) as isize - g.padding as isize;
                    for xo in 0..ow {
                        let xi = (xo * g.stride + kw * g.dilation) as isize - g.padding as isize;
                        if zi >= 0
                            && yi >= 0
                            && xi >= 0
                            && (zi as usize) < id
                            && (yi as usize) < ih
                            && (xi as usize) < iw
                        {
                            let p = ((zi as usize) * ih + yi as usize) * iw + xi as usize;
                            plane[p] = plane[p] + row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (iv, ov, taps) = (g.in_vol(), g.out_vol(), g.taps());
    let mut out = vec![T::zero(); g.n * g.cout * ov];
    if g.is_pointwise() {
        par::for_each_chunk_mut(&mut out, g.cout * ov, |n, o| {
            let xn = &x[n * g.cin * iv..(n + 1) * g.cin * iv];
            gemm(
                g.cout,
                g.cin,
                ov,
                T::one(),
                w,
                (g.cin, 1),
                xn,
                (iv, 1),
                T::zero(),
                o,
                (ov, 1),
            );
        });
    } else if g.is_depthwise() {
        par::for_each_chunk_mut(&mut out, ov, |plane, o| {
            let c = plane % g.cin;
            let xp = &x[plane * iv..(plane + 1) * iv];
            let wc = &w[c * taps..(c + 1) * taps];
            for_each_run(g, |tap, i0, o0, len| {
                let wt = wc[tap];
                for (dst, &src) in o[o0..o0 + len].iter_mut().zip(&xp[i0..i0 + len]) {
                    *dst = *dst + wt * src;
                }
            });
        });
    } else {
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        let kdim = cin_g * taps;
        par::for_each_chunk_mut(&mut out, g.cout * ov, |n, o| {
            let mut col = vec![T::zero(); kdim * ov];
            for grp in 0..g.groups {
                let xg = &x[(n * g.cin + grp * cin_g) * iv..(n * g.cin + (grp + 1) * cin_g) * iv];
                im2col(g, xg, cin_g, &mut col);
                let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let og = &mut o[grp * cout_g * ov..(grp + 1) * cout_g * ov];
                gemm(
                    cout_g,
                    kdim,
                    ov,
                    T::one(),
                    wg,
                    (kdim, 1),
                    &col,
                    (ov, 1),
                    T::zero(),
                    og,
                    (ov, 1),
                );
            }
        });
    }
    if let Some(b) = bias {
        par::for_each_chunk_mut(&mut out, ov, |plane, o| {
            let bc = b[plane % g.cout];
            o.iter_mut().for_each(|v| *v = *v + bc);
        });
    }
    out
}

fn conv_backward_input<T: Element>(g: &Geometry, dy: &[T], w: &[T]) -> Vec<T> {
    let (iv, ov, taps) = (g.in_vol(), g.out_vol(), g.taps());
    let mut dx = vec![T::zero(); g.n * g.cin * iv];
    if g.is_pointwise() {
        par::for_each_chunk_mut(&mut dx, g.cin * iv, |n, d| {
            let dyn_ = &dy[n * g.cout * ov..(n + 1) * g.cout * ov];
            gemm(
                g.cin,
                g.cout,
                iv,
                T::one(),
                w,
                (1, g.cin),
                dyn_,
                (ov, 1),
                T::zero(),
                d,
                (iv, 1),
            );
        });
    } else if g.is_depthwise() {
        par::for_each_chunk_mut(&mut dx, iv, |plane, d| {
            let c = plane % g.cin;
            let gp = &dy[plane * ov..(plane + 1) * ov];
            let wc = &w[c * taps..(c + 1) * taps];
            for_each_run(g, |tap, i0, o0, len| {
                let wt = wc[tap];
                for (dst, &src) in d[i0..i0 + len].iter_mut().zip(&gp[o0..o0 + len]) {
                    *dst = *dst + wt * src;
                }
            });
        });
    } else {
        let (cin_g, cout_g) = (g.cin / g.groups, g.cout / g.groups);
        let kdim = cin_g * taps;
        par::for_each_chunk_mut(&mut dx, g.cin * iv, |n, d| {
            let mut col = vec![T::zero(); kdim * ov];
            for grp in 0..g.groups {
                let wg = &w[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let gg = &dy[(n * g.cout + grp * cout_g) * ov..(n * g.cout + (grp + 1) * cout_g) * ov];
                gemm(
                    kdim,
                    cout_g,
                    ov,
                    T::one(),
                    wg,
                    (1, kdim),
                    gg,
                    (ov, 1),
                    T::zero(),
                    &mut col,
                    (ov, 1),
                );
                col2im(g, &col, cin_g, &mut d[grp * cin_g * iv..(grp + 1) * cin_g * iv]);
            }
        });
    }
    dx
}

fn conv_backward_weight<T: Element>(g: &Geometry, dy: &[T], x: &[T]) -> Vec<T> {
    let (iv, ov, taps) = (g.in_vol(), g.out_vol(), g.taps());
    let cin_g = g.cin / g.groups;
    let mut dw = vec![T::zero(); g.cout * cin_g * taps];
    if g.is_pointwise() {
        for n in 0..g.n {
            let gy = &dy[n * g.cout * ov..(n + 1) * g.cout * ov];
            let xn = &x[n * g.cin * iv..(n + 1) * g.cin * iv];
            gemm(
                g.cout,
                ov,
                g.cin,
                T::one(),
                gy,
                (ov, 1),
                xn,
                (1, iv),
                T::one(),
                &mut dw,
                (g.cin, 1),
            );
        }
    } else if g.is_depthwise() {
        par::for_each_chunk_mut(&mut dw, taps, |c, dwc| {
            for n in 0..g.n {
                let plane = n * g.cin + c;
                let xp = &x[plane * iv..(plane + 1) * iv];
                let gp = &dy[plane * ov..(plane + 1) * ov];
                for_each_run(g, |tap, i0, o0, len| {
                    let s: T = xp[i0..i0 + len]
                        .iter()
                        .zip(&gp[o0..o0 + len])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    dwc[tap] = dwc[tap] + s;
                });
            }
        });
    } else {
        let cout_g = g.cout / g.groups;
        let kdim = cin_g * taps;
        let mut col = vec![T::zero(); kdim * ov];
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xg = &x[(n * g.cin + grp * cin_g) * iv..(n * g.cin + (grp + 1) * cin_g) * iv];
                im2col(g, xg, cin_g, &mut col);
                let gg = &dy[(n * g.cout + grp * cout_g) * ov..(n * g.cout + (grp + 1) * cout_g) * ov];
                let dwg = &mut dw[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                gemm(
                    cout_g,
                    ov,
                    kdim,
                    T::one(),
                    gg,
                    (ov, 1),
                    &col,
                    (1, ov),
                    T::one(),
                    dwg,
                    (kdim, 1),
                );
            }
        }
    }
    dw
}

/// Per-channel sums of a `[N, C, ...]` gradient.
fn channel_sums<T: Element>(dy: &[T], n: usize, c: usize) -> Vec<T> {
    let vol = dy.len() / (n * c);
    par::map_range(c, |ch| {
        (0..n)
            .map(|i| {
                dy[(i * c + ch) * vol..(i * c + ch + 1) * vol]
                    .iter()
                    .copied()
                    .sum::<T>()
            })
            .fold(T::zero(), |a, b| a + b)
    })
}

fn transpose_shape_check(x: &[usize], w: &[usize], bias: Option<&[usize]>) -> Result<usize> {
    const OP: &str = "conv3d_transpose";
    if x.len() != 5 {
        return Err(Error::shape(OP, format!("input must be 5-D, got {x:?}")));
    }
    if w.len() != 5 || w[2..] != [2, 2, 2] {
        return Err(Error::shape(
            OP,
            format!("weight must be [Cin, Cout, 2, 2, 2], got {w:?}"),
        ));
    }
    if w[0] != x[1] {
        return Err(Error::AxisMismatch {
            op: OP,
            axis: 1,
            expected: w[0],
            actual: x[1],
        });
    }
    if let Some(b) = bias {
        if b != [w[1]] {
            return Err(Error::shape(OP, format!("bias must have shape [{}], got {b:?}", w[1])));
        }
    }
    Ok(w[1])
}

/// Position of input voxel `v` (flat in a `d x h x w` grid) after doubling,
/// shifted by the kernel tap `(a, b, c)` encoded as `a * 4 + b * 2 + c`.
#[inline]
fn upsampled_index(v: usize, [_, h, w]: [usize; 3], tap: usize) -> usize {
    let (z, y, x) = (v / (h * w), (v / w) % h, v % w);
    let (a, b, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
    ((2 * z + a) * (2 * h) + 2 * y + b) * (2 * w) + 2 * x + c
}

impl<T: Element> Var<T> {
    /// 3D cross-correlation with zero padding; `weight` is
    /// `[Cout, Cin / groups, k, k, k]`.
    pub fn conv3d(&self, weight: &Var<T>, bias: Option<&Var<T>>, opts: Conv3dOptions) -> Result<Var<T>> {
        let g = Geometry::new(self.shape(), weight.shape(), bias.map(|b| b.shape()), opts)?;
        let out = conv_forward(
            &g,
            self.value().data(),
            weight.value().data(),
            bias.map(|b| b.value().data()),
        );
        let (x, w) = (self.value_rc(), weight.value_rc());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Var::record(
            &inputs,
            Tensor::from_parts(g.out_shape(), out),
            move |dy, need| {
                let mut grads = vec![None, None];
                if need[0] {
                    let dx = conv_backward_input(&g, dy.data(), w.data());
                    grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if need[1] {
                    let dw = conv_backward_weight(&g, dy.data(), x.data());
                    grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), dw));
                }
                if need.len() > 2 {
                    grads.push(need[2].then(|| Tensor::from_parts(vec![g.cout], channel_sums(dy.data(), g.n, g.cout))));
                }
                grads
            },
        ))
    }

    /// Transposed 3D convolution with kernel 2 and stride 2; `weight` is
    /// `[Cin, Cout, 2, 2, 2]`. Spatial extents double exactly.
    pub fn conv3d_transpose(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let cout = transpose_shape_check(self.shape(), weight.shape(), bias.map(|b| b.shape()))?;
        let s = self.shape();
        let (n, cin) = (s[0], s[1]);
        let grid = [s[2], s[3], s[4]];
        let iv: usize = grid.iter().product();
        let ov = iv * 8;
        let m = cout * 8;
        let xd = self.value().data();
        let wd = weight.value().data();
        let bd = bias.map(|b| b.value().data());
        let mut out = vec![T::zero(); n * cout * ov];
        par::for_each_chunk_mut(&mut out, cout * ov, |i, o| {
            let mut tmp = vec![T::zero(); m * iv];
            let xn = &xd[i * cin * iv..(i + 1) * cin * iv];
            gemm(
                m,
                cin,
                iv,
                T::one(),
                wd,
                (1, m),
                xn,
                (iv, 1),
                T::zero(),
                &mut tmp,
                (iv, 1),
            );
            for co in 0..cout {
                let plane = &mut o[co * ov..(co + 1) * ov];
                let b = bd.map_or(T::zero(), |b| b[co]);
                for tap in 0..8 {
                    let row = &tmp[(co * 8 + tap) * iv..(co * 8 + tap + 1) * iv];
                    for (v, &val) in row.iter().enumerate() {
                        plane[upsampled_index(v, grid, tap)] = val + b;
                    }
                }
            }
        });
        let out_shape = vec![n, cout, 2 * grid[0], 2 * grid[1], 2 * grid[2]];
        let (x, w) = (self.value_rc(), weight.value_rc());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Var::record(
            &inputs,
            Tensor::from_parts(out_shape, out),
            move |dy, need| {
                let gd = dy.data();
                // regroup the gradient as [n][(co, tap) x voxel]
                let mut gathered = vec![T::zero(); n * m * iv];
                par::for_each_chunk_mut(&mut gathered, m * iv, |i, gt| {
                    for co in 0..cout {
                        let plane = &gd[(i * cout + co) * ov..(i * cout + co + 1) * ov];
                        for tap in 0..8 {
                            let row = &mut gt[(co * 8 + tap) * iv..(co * 8 + tap + 1) * iv];
                            for (v, dst) in row.iter_mut().enumerate() {
                                *dst = plane[upsampled_index(v, grid, tap)];
                            }
                        }
                    }
                });
                let mut grads = vec![None, None];
                if need[0] {
                    let mut dx = vec![T::zero(); n * cin * iv];
                    let wdat = w.data();
                    par::for_each_chunk_mut(&mut dx, cin * iv, |i, d| {
                        let gt = &gathered[i * m * iv..(i + 1) * m * iv];
                        gemm(cin, m, iv, T::one(), wdat, (m, 1), gt, (iv, 1), T::zero(), d, (iv, 1));
                    });
                    grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if need[1] {
                    let mut dw = vec![T::zero(); cin * m];
                    for i in 0..n {
                        let xn = &x.data()[i * cin * iv..(i + 1) * cin * iv];
                        let gt = &gathered[i * m * iv..(i + 1) * m * iv];
                        gemm(
                            cin,
                            iv,
                            m,
                            T::one(),
                            xn,
                            (iv, 1),
                            gt,
                            (1, iv),
                            T::one(),
                            &mut dw,
                            (m, 1),
                        );
                    }
                    grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), dw));
                }
                if need.len() > 2 {
                    grads.push(need[2].then(|| Tensor::from_parts(vec![cout], channel_sums(gd, n, cout))));
                }
                grads
            },
        ))
    }
}
