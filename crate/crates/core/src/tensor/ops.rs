//! Differentiable primitives. Each primitive has a forward method on
//! [`Graph`] and a backward rule in [`backward`].

use serde::{Deserialize, Serialize};

use super::graph::{BnUpdate, Graph, Var};
use super::{numel, ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Below this norm `l2_normalize` returns zeros and flags the row.
pub const L2_EPS: f64 = 1e-12;
/// Below this norm `squash` drops the radial Jacobian term.
pub const SQUASH_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Pads `(k - 1) / 2` on each side.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// Output length of a strided convolution along one axis, or `None` when
/// the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

pub(crate) enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        /// Unfolded input, `[N, C·kh·kw, ho·wo]`; empty for pointwise kernels.
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Expand {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        degenerate: Vec<bool>,
    },
    Squash(Var),
    Softplus(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    PairTransform {
        u: Var,
        w: Var,
    },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { x, k, bias, .. } => {
                let mut v = vec![*x, *k];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::Squash(x)
            | Op::Softplus(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Permute { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Expand { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::PairTransform { u, w } => vec![*u, *w],
        }
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Per-row L2 normalisation along the last axis. Returns the normalised
/// rows and a degeneracy flag per row.
fn l2_rows<T: Real>(data: &[T], d: usize) -> (Vec<T>, Vec<bool>) {
    let eps = T::of(L2_EPS);
    let mut out = vec![T::zero(); data.len()];
    let mut flags = Vec::with_capacity(data.len() / d);
    for (row, o) in data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm > eps {
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = xi / norm;
            }
            flags.push(false);
        } else {
            flags.push(true);
        }
    }
    (out, flags)
}

fn squash_rows<T: Real>(data: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, o) in data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let n2 = row.iter().map(|&x| x * x).sum::<T>();
        // ‖s‖²/(1+‖s‖²) · s/‖s‖ written without the division by ‖s‖.
        let f = n2.sqrt() / (T::one() + n2);
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi * f;
        }
    }
    out
}

/// Squash along the last axis: `v = ‖s‖²/(1+‖s‖²) · s/‖s‖`, with `v = 0`
/// at `s = 0`.
pub fn squash<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let d = *s.shape().last().unwrap_or(&1);
    Tensor::new(s.shape(), squash_rows(s.data(), d)).expect("shape preserved")
}

/// Normalise a vector (or each row along the last axis) to unit length.
/// The flag is true when any row had norm ≤ [`L2_EPS`]; such rows come
/// back as zeros.
pub fn l2_normalize<T: Real>(v: &Tensor<T>) -> (Tensor<T>, bool) {
    let d = *v.shape().last().unwrap_or(&1);
    let (out, flags) = l2_rows(v.data(), d);
    (
        Tensor::new(v.shape(), out).expect("shape preserved"),
        flags.iter().any(|&f| f),
    )
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output columns `ox` whose input column `ox·stride + j − pad` lies inside
/// `0..w`.
fn valid_span(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = if g.pw > j { (g.pw - j).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pw > j {
        ((g.w + g.pw - j - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_span(g, j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + j - g.pw;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        let src = &src[first..];
                        for (t, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_span(g, j);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + j - g.pw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + first;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in dx[base..].iter_mut().step_by(g.stride).zip(line) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Batch-norm configuration for one call.
pub struct BatchNormArgs<'a, T> {
    pub train: bool,
    pub eps: T,
    pub momentum: T,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    /// Where to send batch statistics in train mode.
    pub running_ids: Option<(ParamId, ParamId)>,
}

impl<T: Real> Graph<T> {
    /// 2-D convolution of `x[N,C,H,W]` with `kernel[K,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d needs rank-4 input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {xs:?} vs kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = (padding.amount(ks[2]), padding.amount(ks[3]));
        let (Some(ho), Some(wo)) = (
            conv_out_len(xs[2], ks[2], stride, ph),
            conv_out_len(xs[3], ks[3], stride, pw),
        ) else {
            return Err(Error::dim(format!(
                "conv2d kernel {ks:?} larger than padded input {xs:?}"
            )));
        };
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    ks[0]
                )));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            ph,
            pw,
            ho,
            wo,
        };
        let (out, cols) = conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[geom.n, geom.k, ho, wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                k: kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Batch normalisation over every axis except axis 1 (channels).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        args: BatchNormArgs<'_, T>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("batch_norm needs rank >= 2, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {name} shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        if args.running_mean.shape() != [c] || args.running_var.shape() != [c] {
            return Err(Error::dim("batch_norm running stats must have shape [C]"));
        }
        if args.train && n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch_norm in train mode needs N >= 2, got N = {n}"
            )));
        }
        let inner = numel(&xs[2..]);
        let m = T::of((n * inner) as f64);
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if args.train {
            for b in 0..n {
                for ch in 0..c {
                    let row = &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    mean[ch] += row.iter().copied().sum::<T>();
                }
            }
            for mu in &mut mean {
                *mu = *mu / m;
            }
            for b in 0..n {
                for ch in 0..c {
                    let row = &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                    let mu = mean[ch];
                    var[ch] += row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
            }
            for v in &mut var {
                *v = *v / m;
            }
        } else {
            mean.copy_from_slice(args.running_mean.data());
            var.copy_from_slice(args.running_var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + args.eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for ((h, o), &v) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out[r.clone()])
                    .zip(&xd[r])
                {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = gd[ch] * *h + bd[ch];
                }
            }
        }
        if args.train {
            if let Some((rm, rv)) = args.running_ids {
                self.record_bn_update(BnUpdate {
                    running_mean: rm,
                    running_var: rv,
                    batch_mean: mean,
                    batch_var: var,
                    momentum: args.momentum,
                });
            }
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: args.train,
            },
        ))
    }

    /// Fully connected layer: `x[N,I] · w[I,O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::dim(format!(
                "affine shapes incompatible: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm_strided(
            n,
            i,
            o,
            self.value(x).data(),
            (i, 1),
            self.value(w).data(),
            (o, 1),
            &mut out,
            (o, 1),
            true,
        );
        let t = Tensor::new(&[n, o], out)?;
        Ok(self.push(t, Op::Affine { x, w, b }))
    }

    /// `a[m,k] · b[k,n]`, or `a · bᵀ` for `b[n,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 {
            return Err(Error::dim(format!("matmul needs matrices, got {as_:?} and {bs:?}")));
        }
        let (m, k) = (as_[0], as_[1]);
        let (kb, n) = if trans_b { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner dimension mismatch: {as_:?} x {bs:?} (trans_b = {trans_b})"
            )));
        }
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm_strided(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            b_strides,
            &mut out,
            (n, 1),
            false,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {xs:?}")));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |r: usize| (o * len + r) * inner + i;
                let max = (0..len).map(|r| xd[at(r)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for r in 0..len {
                    let e = (xd[at(r)] - max).exp();
                    out[at(r)] = e;
                    z += e;
                }
                for r in 0..len {
                    out[at(r)] = out[at(r)] / z;
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(self, a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for shape {xs:?}")));
        }
        let t = permute_tensor(self.value(x), perm);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim(format!("sum axis {axis} out of range for {xs:?}")));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..len {
                let src = &xd[(o * len + r) * inner..(o * len + r + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// Insert a new axis of size `n` at position `axis`, repeating values.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() || n == 0 {
            return Err(Error::dim(format!("cannot expand {xs:?} at axis {axis} by {n}")));
        }
        let outer = numel(&xs[..axis]);
        let inner = numel(&xs[axis..]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = xs;
        shape.insert(axis, n);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Expand { x, axis }))
    }

    /// L2-normalise each row along the last axis. Rows with norm ≤
    /// [`L2_EPS`] become zeros; see [`Graph::degenerate_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap_or(&1);
        let (out, degenerate) = l2_rows(self.value(x).data(), d);
        let t = Tensor::new(self.shape(x), out).expect("shape preserved");
        self.push(t, Op::L2Normalize { x, degenerate })
    }

    /// Capsule squash along the last axis.
    pub fn squash(&mut self, x: Var) -> Var {
        let t = squash(self.value(x));
        self.push(t, Op::Squash(x))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x))
    }

    /// Pick flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if idx.is_empty() {
            return Err(Error::dim("gather with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*xd.get(i).ok_or_else(|| {
                Error::dim(format!("gather index {i} out of range for {} elements", xd.len()))
            })?);
        }
        let t = Tensor::new(&[idx.len()], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Capsule prediction vectors: `û[n,i,j] = u[n,i] · W[i,j]` for
    /// `u[N,G,Din]` and `W[G,J,Din,Dout]`, giving `[N,G,J,Dout]`.
    pub fn pair_transform(&mut self, u: Var, w: Var) -> Result<Var> {
        let (us, ws) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[2] {
            return Err(Error::dim(format!(
                "capsule transform mismatch: poses {us:?} vs weights {ws:?} (need [N,G,Din] and [G,J,Din,Dout])"
            )));
        }
        let (n, gi, din) = (us[0], us[1], us[2]);
        let (j, dout) = (ws[1], ws[3]);
        let ud = self.value(u).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * gi * j * dout];
        for b in 0..n {
            for i in 0..gi {
                let urow = &ud[(b * gi + i) * din..(b * gi + i + 1) * din];
                for jj in 0..j {
                    let o = &mut out[((b * gi + i) * j + jj) * dout..((b * gi + i) * j + jj + 1) * dout];
                    let wij = &wd[(i * j + jj) * din * dout..(i * j + jj + 1) * din * dout];
                    for (k, &uk) in urow.iter().enumerate() {
                        for (oe, &we) in o.iter_mut().zip(&wij[k * dout..(k + 1) * dout]) {
                            *oe += uk * we;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[n, gi, j, dout], out)?;
        Ok(self.push(t, Op::PairTransform { u, w }))
    }
}

/// Returns the output and, unless the convolution is pointwise, the
/// unfolded input columns of every image for reuse in the backward pass.
fn conv_forward<T: Real>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let in_size = g.c * g.h * g.w;
    let out_size = g.k * hw;
    let mut out = vec![T::zero(); g.n * out_size];
    let mut all_cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.n * ckk * hw] };
    for b in 0..g.n {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let ob = &mut out[b * out_size..(b + 1) * out_size];
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_exact_mut(hw).zip(bias) {
                row.fill(bv);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            let cols = &mut all_cols[b * ckk * hw..(b + 1) * ckk * hw];
            im2col(xb, g, cols);
            cols
        };
        T::gemm_strided(g.k, ckk, hw, kernel, (ckk, 1), src, (hw, 1), ob, (hw, 1), bias.is_some());
    }
    (out, all_cols)
}

fn permute_tensor<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = t.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves size")
}

/// Local backward rule: gradients for each input of `op` that needs one.
pub(crate) fn backward<T: Real>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    graph: &Graph<T>,
    needs: &dyn Fn(Var) -> bool,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let val = |v: Var| graph.value(v);
    let like = |v: Var, data: Vec<T>| Tensor::new(graph.shape(v), data);
    let gd = g.data();
    let mut res = Vec::new();
    match op {
        Op::Constant | Op::Leaf | Op::Param(_) => {}
        Op::Conv2d { x, k, bias, geom, cols } => {
            let geo = *geom;
            let (ckk, hw) = (geo.ckk(), geo.hw_out());
            let in_size = geo.c * geo.h * geo.w;
            let out_size = geo.k * hw;
            let xd = val(*x).data();
            let kd = val(*k).data();
            let want_x = needs(*x);
            let want_k = needs(*k);
            let mut dk = vec![T::zero(); kd.len()];
            let mut dx = vec![T::zero(); if want_x { xd.len() } else { 0 }];
            let mut dcols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * hw }];
            for b in 0..geo.n {
                let gb = &gd[b * out_size..(b + 1) * out_size];
                let xb = &xd[b * in_size..(b + 1) * in_size];
                if want_k {
                    let src: &[T] = if geo.is_pointwise() {
                        xb
                    } else {
                        &cols[b * ckk * hw..(b + 1) * ckk * hw]
                    };
                    T::gemm_strided(geo.k, hw, ckk, gb, (hw, 1), src, (1, hw), &mut dk, (ckk, 1), true);
                }
                if want_x {
                    let dxb = &mut dx[b * in_size..(b + 1) * in_size];
                    if geo.is_pointwise() {
                        T::gemm_strided(ckk, geo.k, hw, kd, (1, ckk), gb, (hw, 1), dxb, (hw, 1), true);
                    } else {
                        T::gemm_strided(ckk, geo.k, hw, kd, (1, ckk), gb, (hw, 1), &mut dcols, (hw, 1), false);
                        col2im(&dcols, &geo, dxb);
                    }
                }
            }
            if want_x {
                res.push((*x, like(*x, dx)?));
            }
            if want_k {
                res.push((*k, like(*k, dk)?));
            }
            if let Some(bv) = bias {
                if needs(*bv) {
                    let mut db = vec![T::zero(); geo.k];
                    for b in 0..geo.n {
                        for (kk, row) in gd[b * out_size..(b + 1) * out_size].chunks_exact(hw).enumerate() {
                            db[kk] += row.iter().copied().sum::<T>();
                        }
                    }
                    res.push((*bv, like(*bv, db)?));
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let xs = graph.shape(*x);
            let (n, c) = (xs[0], xs[1]);
            let inner = numel(&xs[2..]);
            let m = T::of((n * inner) as f64);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                    for (&gv, &h) in gd[r.clone()].iter().zip(&xhat[r]) {
                        dgamma[ch] += gv * h;
                        dbeta[ch] += gv;
                    }
                }
            }
            if needs(*x) {
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        let scale = gam[ch] * inv_std[ch];
                        for ((d, &gv), &h) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                            *d = if *train {
                                scale * (gv - dbeta[ch] / m - h * dgamma[ch] / m)
                            } else {
                                scale * gv
                            };
                        }
                    }
                }
                res.push((*x, like(*x, dx)?));
            }
            if needs(*gamma) {
                res.push((*gamma, like(*gamma, dgamma)?));
            }
            if needs(*beta) {
                res.push((*beta, like(*beta, dbeta)?));
            }
        }
        Op::Affine { x, w, b } => {
            let (xs, ws) = (graph.shape(*x), graph.shape(*w));
            let (n, i, o) = (xs[0], xs[1], ws[1]);
            if needs(*x) {
                let mut dx = vec![T::zero(); n * i];
                T::gemm_strided(n, o, i, gd, (o, 1), val(*w).data(), (1, o), &mut dx, (i, 1), false);
                res.push((*x, like(*x, dx)?));
            }
            if needs(*w) {
                let mut dw = vec![T::zero(); i * o];
                T::gemm_strided(i, n, o, val(*x).data(), (1, i), gd, (o, 1), &mut dw, (o, 1), false);
                res.push((*w, like(*w, dw)?));
            }
            if needs(*b) {
                let mut db = vec![T::zero(); o];
                for row in gd.chunks_exact(o) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                res.push((*b, like(*b, db)?));
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (graph.shape(*a)[0], graph.shape(*a)[1]);
            let n = out.shape()[1];
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if needs(*a) {
                // da = g · bᵀ (or g · b when b was transposed)
                let b_strides = if *trans_b { (k, 1) } else { (1, n) };
                let mut da = vec![T::zero(); m * k];
                T::gemm_strided(m, n, k, gd, (n, 1), bd, b_strides, &mut da, (k, 1), false);
                res.push((*a, like(*a, da)?));
            }
            if needs(*b) {
                let mut db = vec![T::zero(); k * n];
                if *trans_b {
                    // db[n,k] = gᵀ · a
                    T::gemm_strided(n, m, k, gd, (1, n), ad, (k, 1), &mut db, (k, 1), false);
                } else {
                    // db[k,n] = aᵀ · g
                    T::gemm_strided(k, m, n, ad, (1, k), gd, (n, 1), &mut db, (n, 1), false);
                }
                res.push((*b, like(*b, db)?));
            }
        }
        Op::Relu(x) => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            res.push((*x, like(*x, dx)?));
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |r: usize| (o * len + r) * inner + i;
                    let dot = (0..len).map(|r| y[at(r)] * gd[at(r)]).sum::<T>();
                    for r in 0..len {
                        dx[at(r)] = y[at(r)] * (gd[at(r)] - dot);
                    }
                }
            }
            res.push((*x, like(*x, dx)?));
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if needs(v) {
                    res.push((v, g.clone()));
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                res.push((*a, g.clone()));
            }
            if needs(*b) {
                res.push((*b, g.map(|v| -v)));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                res.push((*a, like(*a, d)?));
            }
            if needs(*b) {
                let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                res.push((*b, like(*b, d)?));
            }
        }
        Op::Scale(x, c) => res.push((*x, g.map(|v| v * *c))),
        Op::AddScalar(x) => res.push((*x, g.clone())),
        Op::Reshape(x) => res.push((*x, like(*x, gd.to_vec())?)),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            res.push((*x, permute_tensor(g, &inv)));
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(graph.shape(*x), *axis);
            let mut dx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            res.push((*x, like(*x, dx)?));
        }
        Op::SumAll(x) => {
            res.push((*x, Tensor::full(graph.shape(*x), gd[0])));
        }
        Op::Expand { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let mut dx = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for r in 0..len {
                    let src = &gd[(o * len + r) * inner..(o * len + r + 1) * inner];
                    for (d, &v) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            res.push((*x, like(*x, dx)?));
        }
        Op::L2Normalize { x, degenerate } => {
            let d = *out.shape().last().unwrap_or(&1);
            let xd = val(*x).data();
            let y = out.data();
            let mut dx = vec![T::zero(); xd.len()];
            for (r, &deg) in degenerate.iter().enumerate() {
                if deg {
                    continue;
                }
                let s = r * d..(r + 1) * d;
                let norm = xd[s.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                let dot = y[s.clone()].iter().zip(&gd[s.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                for ((o, &yy), &gg) in dx[s.clone()].iter_mut().zip(&y[s.clone()]).zip(&gd[s]) {
                    *o = (gg - yy * dot) / norm;
                }
            }
            res.push((*x, like(*x, dx)?));
        }
        Op::Squash(x) => {
            let d = *out.shape().last().unwrap_or(&1);
            let xd = val(*x).data();
            let eps = T::of(SQUASH_EPS);
            let mut dx = vec![T::zero(); xd.len()];
            for ((o, s), gg) in dx
                .chunks_exact_mut(d)
                .zip(xd.chunks_exact(d))
                .zip(gd.chunks_exact(d))
            {
                let n2 = s.iter().map(|&v| v * v).sum::<T>();
                let n = n2.sqrt();
                let denom = T::one() + n2;
                let f = n / denom;
                let radial = if n > eps {
                    // f'(n)/n with f(n) = n/(1+n²)
                    (T::one() - n2) / (denom * denom * n)
                } else {
                    T::zero()
                };
                let sg = s.iter().zip(gg).map(|(&a, &b)| a * b).sum::<T>();
                for ((oi, &si), &gi) in o.iter_mut().zip(s).zip(gg) {
                    *oi = f * gi + radial * si * sg;
                }
            }
            res.push((*x, like(*x, dx)?));
        }
        Op::Softplus(x) => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| gv * sigmoid(v))
                .collect();
            res.push((*x, like(*x, dx)?));
        }
        Op::Gather { x, idx } => {
            let mut dx = vec![T::zero(); val(*x).len()];
            for (&i, &gv) in idx.iter().zip(gd) {
                dx[i] += gv;
            }
            res.push((*x, like(*x, dx)?));
        }
        Op::PairTransform { u, w } => {
            let (us, ws) = (graph.shape(*u), graph.shape(*w));
            let (n, gi, din) = (us[0], us[1], us[2]);
            let (j, dout) = (ws[1], ws[3]);
            let (ud, wd) = (val(*u).data(), val(*w).data());
            let want_u = needs(*u);
            let want_w = needs(*w);
            let mut du = vec![T::zero(); if want_u { ud.len() } else { 0 }];
            let mut dw = vec![T::zero(); if want_w { wd.len() } else { 0 }];
            for b in 0..n {
                for i in 0..gi {
                    for jj in 0..j {
                        let grow = &gd[((b * gi + i) * j + jj) * dout..((b * gi + i) * j + jj + 1) * dout];
                        let wbase = (i * j + jj) * din * dout;
                        for k in 0..din {
                            let wrow = &wd[wbase + k * dout..wbase + (k + 1) * dout];
                            if want_u {
                                du[(b * gi + i) * din + k] +=
                                    grow.iter().zip(wrow).map(|(&a, &c)| a * c).sum::<T>();
                            }
                            if want_w {
                                let uk = ud[(b * gi + i) * din + k];
                                for (dwe, &ge) in dw[wbase + k * dout..wbase + (k + 1) * dout].iter_mut().zip(grow) {
                                    *dwe += uk * ge;
                                }
                            }
                        }
                    }
                }
            }
            if want_u {
                res.push((*u, like(*u, du)?));
            }
            if want_w {
                res.push((*w, like(*w, dw)?));
            }
        }
    }
    Ok(res)
}
