use rand::Rng as _;

use super::{numel, Result, Tensor, TensorError};
use crate::rng;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

/// `c (+)= a·b` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents, and `c` is a
    // dense m×n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strides aligned to `out` (right-aligned), zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total = numel(out);
    if total == 0 {
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the outer counter
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if counter[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn binary(op: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let name = match op {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    };
    let apply = move |x: f64, y: f64| match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| apply(x, y)).collect();
        let (ac, bc) = (a.clone(), b.clone());
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        return Ok(Tensor::from_op(data, a.shape().to_vec(), &[a, b], move |g, _| {
            let ga = need_a.then(|| match op {
                Binary::Mul => g.iter().zip(bc.data()).map(|(g, y)| g * y).collect(),
                _ => g.to_vec(),
            });
            let gb = need_b.then(|| match op {
                Binary::Add => g.to_vec(),
                Binary::Sub => g.iter().map(|g| -g).collect(),
                Binary::Mul => g.iter().zip(ac.data()).map(|(g, x)| g * x).collect(),
            });
            vec![ga, gb]
        }));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(name, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel(&out_shape)];
    {
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = apply(ad[ia], bd[ib]));
    }
    let (ac, bc) = (a.clone(), b.clone());
    let shape = out_shape.clone();
    Ok(Tensor::from_op(data, out_shape, &[a, b], move |g, _| {
        let mut ga = ac.requires_grad().then(|| vec![0.0; ac.numel()]);
        let mut gb = bc.requires_grad().then(|| vec![0.0; bc.numel()]);
        let (ad, bd) = (ac.data(), bc.data());
        for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
            let (da, db) = match op {
                Binary::Add => (1.0, 1.0),
                Binary::Sub => (1.0, -1.0),
                Binary::Mul => (bd[ib], ad[ia]),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += g[o] * da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += g[o] * db;
            }
        });
        vec![ga, gb]
    }))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(data, x.shape().to_vec(), &[x], move |g, out| {
        let gx = g
            .iter()
            .zip(xc.data())
            .zip(out)
            .map(|((g, &xv), &yv)| g * df(xv, yv))
            .collect();
        vec![Some(gx)]
    })
}

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

/// Convolution geometry: stride and zero padding per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

/// Max-pool geometry. With `ceil_mode`, a trailing partial window is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub ceil_mode: bool,
}

fn pooled_len(len: usize, k: usize, s: usize, ceil: bool) -> usize {
    if len < k {
        return usize::from(ceil && len > 0);
    }
    if ceil {
        (len - k).div_ceil(s) + 1
    } else {
        (len - k) / s + 1
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(Binary::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(Binary::Sub, self, other)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(Binary::Mul, self, other)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().map(|g| g * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    /// Natural log with inputs floored at the smallest positive normal.
    pub fn log(&self) -> Tensor {
        unary(
            self,
            |x| x.max(f64::MIN_POSITIVE).ln(),
            |x, _| if x > f64::MIN_POSITIVE { 1.0 / x } else { 0.0 },
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Matrix product. `self` is `[.., m, k]`; `other` is either a `[k, n]`
    /// matrix shared by every leading index, or `[.., k, n]` with the same
    /// leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.batched_matmul(other, false)
    }

    /// `self · otherᵀ` over the last two axes (`other` is `[.., n, k]`).
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.batched_matmul(other, true)
    }

    fn batched_matmul(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = if trans_b {
            (bsh[bsh.len() - 1], bsh[bsh.len() - 2])
        } else {
            (bsh[bsh.len() - 2], bsh[bsh.len() - 1])
        };
        if bk != k {
            return Err(mismatch("matmul", ash, bsh));
        }
        let shared_b = bsh.len() == 2;
        if !shared_b && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(mismatch("matmul", ash, bsh));
        }
        let batch = numel(&ash[..ash.len() - 2]);
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.extend([m, n]);
        // b as (rows=k, cols=n) strides
        let b_strides: (isize, isize) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut data = vec![0.0; batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, self.data(), (k as isize, 1), other.data(), b_strides, &mut data, false);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[bi * m * k..],
                    (k as isize, 1),
                    &other.data()[bi * k * n..],
                    b_strides,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, out_shape, &[self, other], move |g, _| {
            let (ad, bd) = (ac.data(), bc.data());
            let ga = ac.requires_grad().then(|| {
                // dA = dC · Bᵀ, with B viewed as k×n
                let bt: (isize, isize) = (b_strides.1, b_strides.0);
                let mut ga = vec![0.0; ad.len()];
                if shared_b {
                    gemm(batch * m, n, k, g, (n as isize, 1), bd, bt, &mut ga, false);
                } else {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n as isize, 1),
                            &bd[bi * k * n..],
                            bt,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![0.0; bd.len()];
                // dB (k×n) = Aᵀ · dC; stored transposed when trans_b
                let run = |a: &[f64], gc: &[f64], rows: usize, out: &mut [f64], acc: bool| {
                    if trans_b {
                        // out is n×k = dCᵀ · A
                        gemm(n, rows, k, gc, (1, n as isize), a, (k as isize, 1), out, acc);
                    } else {
                        gemm(k, rows, n, a, (1, k as isize), gc, (n as isize, 1), out, acc);
                    }
                };
                if shared_b {
                    run(ad, g, batch * m, &mut gb, false);
                } else {
                    for bi in 0..batch {
                        run(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            false,
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[base + j * inner] /= sum;
                }
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self], move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..n {
                        let idx = base + j * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Fused, max-shifted `log(softmax(x))` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("log_softmax", self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (x[base + j * inner] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    data[base + j * inner] = x[base + j * inner] - lse;
                }
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self], move |g, y| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let gsum: f64 = (0..n).map(|j| g[base + j * inner]).sum();
                    for j in 0..n {
                        let idx = base + j * inner;
                        gx[idx] = g[idx] - y[idx].exp() * gsum;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Normalizes along `axis` to zero mean / unit variance, then applies the
    /// per-feature affine `gamma`, `beta` (both shaped `[shape[axis]]`).
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("layer_norm", self.shape(), axis)?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(mismatch("layer_norm", gamma.shape(), beta.shape()));
        }
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).map(|j| x[base + j * inner]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (x[base + j * inner] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for j in 0..n {
                    let idx = base + j * inner;
                    xhat[idx] = (x[idx] - mean) * is;
                    data[idx] = xhat[idx] * gm[j] + bt[j];
                }
            }
        }
        let gc = gamma.clone();
        let (need_x, need_g, need_b) = (self.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self, gamma, beta], move |g, _| {
            let gm = gc.data();
            let mut gx = need_x.then(|| vec![0.0; xhat.len()]);
            let mut ggamma = vec![0.0; n];
            let mut gbeta = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..n {
                        let idx = base + j * inner;
                        let gh = g[idx] * gm[j];
                        mean_g += gh;
                        mean_gx += gh * xhat[idx];
                        ggamma[j] += g[idx] * xhat[idx];
                        gbeta[j] += g[idx];
                    }
                    mean_g /= n as f64;
                    mean_gx /= n as f64;
                    if let Some(gx) = gx.as_mut() {
                        let is = inv_std[o * inner + i];
                        for j in 0..n {
                            let idx = base + j * inner;
                            gx[idx] = is * (g[idx] * gm[j] - mean_g - xhat[idx] * mean_gx);
                        }
                    }
                }
            }
            vec![gx, need_g.then_some(ggamma), need_b.then_some(gbeta)]
        }))
    }

    /// Rows of the `[V, D]` table `self` selected by `ids`; output shape is
    /// `lead ++ [D]` with `numel(lead) == ids.len()`.
    pub fn embedding(&self, ids: &[usize], lead: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || numel(lead) != ids.len() {
            return Err(mismatch("embedding", self.shape(), lead));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} out of range for {v} rows")));
        }
        let table = self.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&table[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(data, shape, &[self], move |g, _| {
            let mut gt = vec![0.0; v * d];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    gt[id * d + c] += g[r * d + c];
                }
            }
            vec![Some(gt)]
        }))
    }

    /// 2-D cross-correlation of `self` `[B, C, H, W]` with `weight`
    /// `[O, C, KH, KW]` plus optional `bias` `[O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(mismatch("conv2d", ws, b.shape()));
            }
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(invalid("conv2d", format!("kernel {kh}x{kw} does not fit input {h}x{w}")));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let ckk = c * kh * kw;
        let npos = oh * ow;
        // im2col index map: for each (row in ckk, pos) the input offset or usize::MAX for padding
        let mut index = vec![usize::MAX; ckk * npos];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for y in 0..oh {
                        let iy = (y * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = (x * sw + kj) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            index[row * npos + y * ow + x] = (ci * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
            }
        }
        let xd = self.data();
        let mut cols = vec![0.0; bsz * ckk * npos];
        for b in 0..bsz {
            let img = &xd[b * c * h * w..(b + 1) * c * h * w];
            let dst = &mut cols[b * ckk * npos..(b + 1) * ckk * npos];
            for (d, &src) in dst.iter_mut().zip(&index) {
                if src != usize::MAX {
                    *d = img[src];
                }
            }
        }
        let mut data = vec![0.0; bsz * o * npos];
        for b in 0..bsz {
            let out = &mut data[b * o * npos..(b + 1) * o * npos];
            gemm(o, ckk, npos, weight.data(), (ckk as isize, 1), &cols[b * ckk * npos..], (npos as isize, 1), out, false);
            if let Some(bias) = bias {
                for (oc, &bv) in bias.data().iter().enumerate() {
                    out[oc * npos..(oc + 1) * npos].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let wc = weight.clone();
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(data, vec![bsz, o, oh, ow], &parents, move |g, _| {
            let mut gw = need_w.then(|| vec![0.0; o * ckk]);
            let mut gx = need_x.then(|| vec![0.0; bsz * c * h * w]);
            let mut gcols = vec![0.0; ckk * npos];
            for b in 0..bsz {
                let gout = &g[b * o * npos..(b + 1) * o * npos];
                if let Some(gw) = gw.as_mut() {
                    gemm(o, npos, ckk, gout, (npos as isize, 1), &cols[b * ckk * npos..], (1, npos as isize), gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(ckk, o, npos, wc.data(), (1, ckk as isize), gout, (npos as isize, 1), &mut gcols, false);
                    let img = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                    for (&gv, &src) in gcols.iter().zip(&index) {
                        if src != usize::MAX {
                            img[src] += gv;
                        }
                    }
                }
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(need_b.then(|| {
                    let mut gb = vec![0.0; o];
                    for b in 0..bsz {
                        for (oc, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[(b * o + oc) * npos..(b * o + oc + 1) * npos].iter().sum::<f64>();
                        }
                    }
                    gb
                }));
            }
            res
        }))
    }

    /// Max pooling over the last two axes of a `[.., H, W]` tensor.
    pub fn max_pool2d(&self, spec: PoolSpec) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() < 2 {
            return Err(invalid("max_pool2d", format!("needs rank ≥ 2, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = numel(&xs[..xs.len() - 2]);
        let (kh, kw) = spec.kernel;
        let (sh, sw) = spec.stride;
        let oh = pooled_len(h, kh, sh, spec.ceil_mode);
        let ow = pooled_len(w, kw, sw, spec.ceil_mode);
        let x = self.data();
        let mut data = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for i in y * sh..(y * sh + kh).min(h) {
                        for j in xo * sw..(xo * sw + kw).min(w) {
                            let idx = (p * h + i) * w + j;
                            if best_i == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (p * oh + y) * ow + xo;
                    data[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let mut shape = xs[..xs.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let n_in = x.len();
        Ok(Tensor::from_op(data, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; n_in];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Inverted dropout. Identity when `!train` or `p == 0`.
    pub fn dropout(&self, p: f64, seed: u64, train: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = rng::seeded(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        }))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let same = p.rank() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !same {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(data, shape, parts, move |g, _| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }))
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("slice", self.shape(), axis)?;
        if start > end || end > n {
            return Err(invalid("slice", format!("range {start}..{end} outside 0..{n}")));
        }
        let len = end - start;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n_in = x.len();
        Ok(Tensor::from_op(data, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; n_in];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + end) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps two axes (materializes the result).
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        let rank = self.rank();
        if d0 >= rank || d1 >= rank {
            return Err(invalid("transpose", format!("axes ({d0}, {d1}) for rank {rank}")));
        }
        if d0 == d1 {
            return Ok(self.clone());
        }
        let in_shape = self.shape().to_vec();
        let mut out_shape = in_shape.clone();
        out_shape.swap(d0, d1);
        // input strides permuted to output order
        let mut in_strides = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            in_strides[d] = acc;
            acc *= in_shape[d];
        }
        in_strides.swap(d0, d1);
        let perm_index = {
            let mut idx = vec![0usize; numel(&out_shape)];
            let zeros = vec![0; rank];
            for_each_broadcast(&out_shape, &in_strides, &zeros, |o, i, _| idx[o] = i);
            idx
        };
        let x = self.data();
        let data = perm_index.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(data, out_shape, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for (o, &i) in perm_index.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Sum of all elements (scalar result).
    pub fn reduce_sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// Mean of all elements (scalar result).
    pub fn reduce_mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.reduce_sum().scale(1.0 / n as f64)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = split_axis("sum_axis", self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += x[(o * n + j) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(data, shape, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    gx[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self.shape().get(axis).ok_or_else(|| invalid("mean_axis", "axis out of range"))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n.max(1) as f64))
    }
}
