//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::index::{contiguous_strides, split_at_axis};
use super::kernels::{self, gemm, ZERO_SLOT};
use super::{cst, Element, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// Row block size for the parallel linear kernels.
const LINEAR_ROWS: usize = 256;

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

impl<T: Element> Var<T> {
    fn unary(&self, value: Tensor<T>, derivative: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let x = self.value_rc();
        let y = Rc::new(value.clone());
        let y_saved = Rc::clone(&y);
        Var::record(&[self], value, move |g, _| {
            let d = x
                .data()
                .iter()
                .zip(y_saved.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * derivative(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::record(&[self], self.value().map(|v| v * c), move |g, _| {
            vec![Some(g.map(|v| v * c))]
        })
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::record(&[self], self.value().map(|v| v + c), |g, _| vec![Some(g.clone())])
    }

    pub fn exp(&self) -> Var<T> {
        self.unary(self.value().map(T::exp), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(self.value().map(T::ln), |x, _| T::one() / x)
    }

    pub fn square(&self) -> Var<T> {
        self.unary(self.value().map(|v| v * v), |x, _| x + x)
    }

    pub fn sigmoid(&self) -> Var<T> {
        let y = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(y, |_, y| y * (T::one() - y))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let y = self.value().map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(y, move |x, _| if x > T::zero() { T::one() } else { slope })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        let half = cst::<T>(0.5);
        let inv_sqrt2 = cst::<T>(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = cst::<T>(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
        let y = self.value().map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.unary(y, move |x, _| {
            let cdf = half * (T::one() + (x * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * x * x).exp();
            cdf + x * pdf
        })
    }

    fn broadcast_op(
        &self,
        other: &Var<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[bool]) -> (Option<Tensor<T>>, Option<Tensor<T>>) + 'static,
    ) -> Result<Var<T>> {
        let out = kernels::binary(op, self.value(), other.value(), f)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        Ok(Var::record(&[self, other], out, move |g, need| {
            let (ga, gb) = grads(g, &a, &b, need);
            vec![
                ga.map(|t| kernels::sum_to_shape(&t, a.shape())),
                gb.map(|t| kernels::sum_to_shape(&t, b.shape())),
            ]
        }))
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(
            other,
            "add",
            |x, y| x + y,
            |g, _, _, need| (need[0].then(|| g.clone()), need[1].then(|| g.clone())),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(
            other,
            "sub",
            |x, y| x - y,
            |g, _, _, need| (need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v))),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(
            other,
            "mul",
            |x, y| x * y,
            |g, a, b, need| {
                let ga = need[0].then(|| kernels::binary("mul", g, b, |u, v| u * v).unwrap());
                let gb = need[1].then(|| kernels::binary("mul", g, a, |u, v| u * v).unwrap());
                (ga, gb)
            },
        )
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(
            other,
            "div",
            |x, y| x / y,
            |g, a, b, need| {
                let ga = need[0].then(|| kernels::binary("div", g, b, |u, v| u / v).unwrap());
                let gb = need[1].then(|| {
                    let q = kernels::binary("div", a, b, |u, v| u / (v * v)).unwrap();
                    kernels::binary("mul", g, &q, |u, v| -u * v).unwrap()
                });
                (ga, gb)
            },
        )
    }

    pub fn sum_all(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::record(&[self], Tensor::scalar(self.value().sum()), move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = cst::<T>(self.value().numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        for &a in axes {
            check_axis("sum_axes", a, self.shape().len())?;
        }
        let target = kernels::reduced_shape(self.shape(), axes);
        let out = kernels::sum_to_shape(self.value(), &target);
        let shape = self.shape().to_vec();
        Ok(Var::record(&[self], out, move |g, _| {
            vec![Some(kernels::broadcast_to(g, &shape))]
        }))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape().get(a).copied().unwrap_or(1))
            .product();
        Ok(self.sum_axes(axes)?.scale(T::one() / cst::<T>(count as f64)))
    }

    /// Max over `axes`, keeping them with extent 1. The gradient flows to the
    /// first maximal element.
    pub fn max_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        for &a in axes {
            check_axis("max_axes", a, self.shape().len())?;
        }
        let (out, arg) = kernels::max_axes(self.value(), axes);
        let shape = self.shape().to_vec();
        Ok(Var::record(&[self], out, move |g, _| {
            let mut d = Tensor::zeros(&shape);
            for (&src, &gv) in arg.iter().zip(g.data()) {
                d.data_mut()[src] = d.data()[src] + gv;
            }
            vec![Some(d)]
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        check_axis("softmax", axis, self.shape().len())?;
        let y = Rc::new(kernels::softmax(self.value(), axis));
        let saved = Rc::clone(&y);
        Ok(Var::record(&[self], (*y).clone(), move |g, _| {
            vec![Some(kernels::softmax_backward(&saved, g, axis))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.value().numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        let original = self.shape().to_vec();
        let out = Tensor::from_parts(shape.to_vec(), self.value().data().to_vec());
        Ok(Var::record(&[self], out, move |g, _| {
            vec![Some(Tensor::from_parts(original.clone(), g.data().to_vec()))]
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = kernels::permute(self.value(), perm);
        Ok(Var::record(&[self], out, move |g, _| {
            vec![Some(kernels::permute(g, &inverse))]
        }))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        check_axis("narrow", axis, self.shape().len())?;
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} exceeds extent {extent} on axis {axis}", start + len),
            ));
        }
        let (outer, _, inner) = split_at_axis(self.shape(), axis);
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        let full = shape.clone();
        shape[axis] = len;
        Ok(Var::record(&[self], Tensor::from_parts(shape, out), move |g, _| {
            let mut d = Tensor::zeros(&full);
            let gd = g.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                d.data_mut()[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        check_axis("split", axis, self.shape().len())?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not cover extent {}", self.shape()[axis]),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?;
        let rank = first.shape().len();
        check_axis("concat", axis, rank)?;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::shape("concat", "rank mismatch"));
            }
            for ax in (0..rank).filter(|&a| a != axis) {
                if p.shape()[ax] != first.shape()[ax] {
                    return Err(Error::AxisMismatch {
                        op: "concat",
                        axis: ax,
                        expected: first.shape()[ax],
                        actual: p.shape()[ax],
                    });
                }
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(Var::record(&refs, Tensor::from_parts(shape, out), move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            shapes
                .iter()
                .zip(&lens)
                .zip(need)
                .map(|((s, &len), &needed)| {
                    let start = offset;
                    offset += len;
                    needed.then(|| {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        Tensor::from_parts(s.clone(), d)
                    })
                })
                .collect()
        }))
    }

    /// Index map: `out[i] = x[index[i]]`, or zero where the index is
    /// [`ZERO_SLOT`]. Backward scatters (adds) into the sources.
    pub fn gather(&self, out_shape: &[usize], index: Rc<Vec<u32>>) -> Result<Var<T>> {
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", "index length does not match output shape"));
        }
        let len = self.value().numel();
        if index.iter().any(|&i| i != ZERO_SLOT && i as usize >= len) {
            return Err(Error::shape("gather", "index out of range"));
        }
        let out = Tensor::from_parts(out_shape.to_vec(), kernels::gather(self.value().data(), &index));
        let shape = self.shape().to_vec();
        Ok(Var::record(&[self], out, move |g, _| {
            let d = kernels::scatter_add(g.data(), &index, len);
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    /// Batched matrix product over the last two axes; leading axes must match.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() < 2 || a.len() != b.len() {
            return Err(Error::shape("matmul", format!("incompatible ranks {a:?} x {b:?}")));
        }
        let r = a.len();
        if a[..r - 2] != b[..r - 2] {
            return Err(Error::shape("matmul", format!("batch axes differ: {a:?} x {b:?}")));
        }
        if a[r - 1] != b[r - 2] {
            return Err(Error::AxisMismatch {
                op: "matmul",
                axis: r - 2,
                expected: a[r - 1],
                actual: b[r - 2],
            });
        }
        let (m, k, n) = (a[r - 2], a[r - 1], b[r - 1]);
        let batch: usize = a[..r - 2].iter().product();
        let (ad, bd) = (self.value_rc(), other.value_rc());
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (adat, bdat) = (ad.data(), bd.data());
            par::for_each_chunk_mut(&mut out, m * n, |i, c| {
                gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &adat[i * m * k..],
                    (k, 1),
                    &bdat[i * k * n..],
                    (n, 1),
                    T::zero(),
                    c,
                    (n, 1),
                );
            });
        }
        let mut shape = a.to_vec();
        shape[r - 1] = n;
        let (sa, sb) = (a.to_vec(), b.to_vec());
        Ok(Var::record(
            &[self, other],
            Tensor::from_parts(shape, out),
            move |g, need| {
                let gd = g.data();
                let (adat, bdat) = (ad.data(), bd.data());
                let da = need[0].then(|| {
                    let mut d = vec![T::zero(); batch * m * k];
                    par::for_each_chunk_mut(&mut d, m * k, |i, c| {
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[i * m * n..],
                            (n, 1),
                            &bdat[i * k * n..],
                            (1, n),
                            T::zero(),
                            c,
                            (k, 1),
                        );
                    });
                    Tensor::from_parts(sa.clone(), d)
                });
                let db = need[1].then(|| {
                    let mut d = vec![T::zero(); batch * k * n];
                    par::for_each_chunk_mut(&mut d, k * n, |i, c| {
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &adat[i * m * k..],
                            (1, k),
                            &gd[i * m * n..],
                            (n, 1),
                            T::zero(),
                            c,
                            (n, 1),
                        );
                    });
                    Tensor::from_parts(sb.clone(), d)
                });
                vec![da, db]
            },
        ))
    }

    /// `x W^T + b` over the last axis; `weight` is `[out, in]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if ws.len() != 2 || xs.is_empty() {
            return Err(Error::shape("linear", format!("bad operands {xs:?} x {ws:?}")));
        }
        let (fout, fin) = (ws[0], ws[1]);
        if *xs.last().unwrap() != fin {
            return Err(Error::AxisMismatch {
                op: "linear",
                axis: xs.len() - 1,
                expected: fin,
                actual: *xs.last().unwrap(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias must be [{fout}], got {:?}", b.shape()),
                ));
            }
        }
        let rows = self.value().numel() / fin.max(1);
        let (x, w) = (self.value_rc(), weight.value_rc());
        let mut out = vec![T::zero(); rows * fout];
        {
            let (xd, wd) = (x.data(), w.data());
            par::for_each_chunk_mut(&mut out, LINEAR_ROWS * fout.max(1), |i, c| {
                let r = c.len() / fout.max(1);
                let xs = &xd[i * LINEAR_ROWS * fin..];
                gemm(
                    r,
                    fin,
                    fout,
                    T::one(),
                    xs,
                    (fin, 1),
                    wd,
                    (1, fin),
                    T::zero(),
                    c,
                    (fout, 1),
                );
            });
        }
        if let Some(b) = bias {
            let bd = b.value().data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = fout;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(Var::record(&inputs, Tensor::from_parts(shape, out), move |g, need| {
            let gd = g.data();
            let mut grads = vec![None, None];
            if need[0] {
                let mut d = vec![T::zero(); rows * fin];
                let wd = w.data();
                par::for_each_chunk_mut(&mut d, LINEAR_ROWS * fin.max(1), |i, c| {
                    let r = c.len() / fin.max(1);
                    let gs = &gd[i * LINEAR_ROWS * fout..];
                    gemm(
                        r,
                        fout,
                        fin,
                        T::one(),
                        gs,
                        (fout, 1),
                        wd,
                        (fin, 1),
                        T::zero(),
                        c,
                        (fin, 1),
                    );
                });
                grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), d));
            }
            if need[1] {
                let mut d = vec![T::zero(); fout * fin];
                gemm(
                    fout,
                    rows,
                    fin,
                    T::one(),
                    gd,
                    (1, fout),
                    x.data(),
                    (fin, 1),
                    T::zero(),
                    &mut d,
                    (fin, 1),
                );
                grads[1] = Some(Tensor::from_parts(vec![fout, fin], d));
            }
            if need.len() > 2 {
                grads.push(need[2].then(|| {
                    let mut d = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        d.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    Tensor::from_parts(vec![fout], d)
                }));
            }
            grads
        }))
    }

    /// Instance normalisation over the spatial axes of `[N, C, ...]`, without
    /// a learned affine.
    pub fn instance_norm(&self, eps: T) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() < 3 {
            return Err(Error::shape("instance_norm", format!("need [N, C, ...], got {s:?}")));
        }
        let plane: usize = s[2..].iter().product();
        if plane == 0 {
            return Err(Error::shape("instance_norm", "empty spatial volume"));
        }
        let (xhat, inv) = kernels::standardize_rows(self.value().data(), plane, eps);
        let xhat = Rc::new(xhat);
        let saved = Rc::clone(&xhat);
        let shape = s.to_vec();
        Ok(Var::record(
            &[self],
            Tensor::from_parts(shape.clone(), (*xhat).clone()),
            move |g, _| {
                let d = kernels::standardize_rows_backward(&saved, &inv, g.data(), plane);
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            },
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine must be [{c}], got {:?}", p.shape()),
                ));
            }
        }
        let (xhat, inv) = kernels::standardize_rows(self.value().data(), c, eps);
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, &ga), &be) in row.iter_mut().zip(gd).zip(bd) {
                *v = *v * ga + be;
            }
        }
        let shape = self.shape().to_vec();
        let gamma_v = gamma.value_rc();
        Ok(Var::record(
            &[self, gamma, beta],
            Tensor::from_parts(shape.clone(), out),
            move |g, need| {
                let gdat = g.data();
                let dx = need[0].then(|| {
                    let gg: Vec<T> = gdat
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(gamma_v.data()).map(|(&a, &b)| a * b))
                        .collect();
                    Tensor::from_parts(shape.clone(), kernels::standardize_rows_backward(&xhat, &inv, &gg, c))
                });
                let dgamma = need[1].then(|| {
                    let mut d = vec![T::zero(); c];
                    for (row, xr) in gdat.chunks(c).zip(xhat.chunks(c)) {
                        for ((acc, &gv), &xv) in d.iter_mut().zip(row).zip(xr) {
                            *acc = *acc + gv * xv;
                        }
                    }
                    Tensor::from_parts(vec![c], d)
                });
                let dbeta = need[2].then(|| {
                    let mut d = vec![T::zero(); c];
                    for row in gdat.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    Tensor::from_parts(vec![c], d)
                });
                vec![dx, dgamma, dbeta]
            },
        ))
    }

    /// Zero padding of the three trailing spatial axes by `(before, after)`.
    pub fn pad3d(&self, pads: [(usize, usize); 3]) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::shape("pad3d", format!("need 5-D input, got {s:?}")));
        }
        let out: Vec<usize> = (0..5)
            .map(|a| {
                if a < 2 {
                    s[a]
                } else {
                    s[a] + pads[a - 2].0 + pads[a - 2].1
                }
            })
            .collect();
        let index = spatial_index_map(s, &out, |o| {
            let mut src = [0usize; 3];
            for a in 0..3 {
                let p = o[a] as isize - pads[a].0 as isize;
                if p < 0 || p as usize >= s[2 + a] {
                    return None;
                }
                src[a] = p as usize;
            }
            Some(src)
        });
        self.gather(&out, Rc::new(index))
    }

    /// Crops `[start, start + size)` on the three spatial axes.
    pub fn crop3d(&self, start: [usize; 3], size: [usize; 3]) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::shape("crop3d", format!("need 5-D input, got {s:?}")));
        }
        for a in 0..3 {
            if start[a] + size[a] > s[2 + a] {
                return Err(Error::AxisMismatch {
                    op: "crop3d",
                    axis: 2 + a,
                    expected: start[a] + size[a],
                    actual: s[2 + a],
                });
            }
        }
        let out = [s[0], s[1], size[0], size[1], size[2]];
        let index = spatial_index_map(s, &out, |o| Some([o[0] + start[0], o[1] + start[1], o[2] + start[2]]));
        self.gather(&out, Rc::new(index))
    }

    /// Nearest-neighbour upsampling by 2 on every spatial axis.
    pub fn upsample_nearest2(&self) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::shape("upsample_nearest2", format!("need 5-D input, got {s:?}")));
        }
        let out = [s[0], s[1], 2 * s[2], 2 * s[3], 2 * s[4]];
        let index = spatial_index_map(s, &out, |o| Some([o[0] / 2, o[1] / 2, o[2] / 2]));
        self.gather(&out, Rc::new(index))
    }
}

/// Builds a gather index for a map between two `[N, C, D, H, W]` grids that
/// only moves voxels within each `(n, c)` plane.
pub(crate) fn spatial_index_map(
    input: &[usize],
    output: &[usize],
    src_of: impl Fn([usize; 3]) -> Option<[usize; 3]>,
) -> Vec<u32> {
    let planes = output[0] * output[1];
    let (od, oh, ow) = (output[2], output[3], output[4]);
    let in_strides = contiguous_strides(&input[2..]);
    let in_plane: usize = input[2..].iter().product();
    let plane_map: Vec<Option<usize>> = (0..od * oh * ow)
        .map(|v| {
            let o = [v / (oh * ow), (v / ow) % oh, v % ow];
            src_of(o).map(|s| s[0] * in_strides[0] + s[1] * in_strides[1] + s[2])
        })
        .collect();
    let mut index = Vec::with_capacity(planes * plane_map.len());
    for p in 0..planes {
        index.extend(plane_map.iter().map(|m| match m {
            Some(off) => (p * in_plane + off) as u32,
            None => ZERO_SLOT,
        }));
    }
    index
}
