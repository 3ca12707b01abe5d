//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! Every op evaluates eagerly when it is recorded. [`Graph::backward`]
//! walks the tape in reverse from a scalar and returns gradients for every
//! node that depends on a gradient-requiring leaf. The tape is not consumed,
//! so the same graph can be differentiated from several scalars.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Normalisation statistics source for [`Graph::batch_norm`].
pub enum NormStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Elu(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Exp(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reshape(Var),
    AvgPool {
        input: Var,
        out_h: usize,
        out_w: usize,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<T>,
    },
    Broadcast(Var),
    SqDistRows(Var, Var),
    SoftmaxRows(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MeanRows(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: Vec<Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bin `[start, end)` of adaptive average pooling.
fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

fn dims2(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape(what, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
        }
    }

    /// A tape on which [`Graph::param`] records constants and no backward
    /// buffers are kept.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A gradient-requiring leaf that is not tracked as a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable leaf. Parameters are remembered in registration order.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        if self.grad_enabled {
            self.params.push(v);
        }
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, h, w) = match *self.value(input).shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape("conv2d", format!("input shape {s:?} is not 4-d"))),
        };
        let (c_out, k) = match *self.value(weight).shape() {
            [o, i, kh, kw] if i == c_in && kh == kw => (o, kh),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight shape {s:?} does not fit {c_in} input channels"),
                ))
            }
        };
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} with padding {pad} does not fit a {h}x{w} input"),
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let (r, p) = (geom.patch(), geom.positions());
        let bp = batch * p;

        let x = self.value(input).data();
        let mut cols = vec![T::zero(); r * bp];
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * bp..][..bp];
                    for b in 0..batch {
                        let plane = &x[(b * c_in + ci) * h * w..][..h * w];
                        for oy in 0..geom.h_out {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..][..w];
                            let dst = &mut row[b * p + oy * geom.w_out..][..geom.w_out];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut y = vec![T::zero(); c_out * bp];
        T::gemm(
            c_out,
            r,
            bp,
            T::one(),
            self.value(weight).data(),
            (r as isize, 1),
            &cols,
            (bp as isize, 1),
            T::zero(),
            &mut y,
            (bp as isize, 1),
        );
        let mut out = vec![T::zero(); batch * c_out * p];
        for co in 0..c_out {
            for b in 0..batch {
                out[(b * c_out + co) * p..][..p].copy_from_slice(&y[co * bp + b * p..][..p]);
            }
        }
        let rg = self.rg(input) || self.rg(weight);
        if !(rg && self.grad_enabled) {
            cols = Vec::new();
        }
        let value = Tensor::new(&[batch, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel normalisation over every axis but axis 1, then `gamma * xhat + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", format!("input shape {shape:?} has no channel axis")));
        }
        let (batch, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batchnorm", format!("affine parameters do not match {c} channels")));
        }
        let n = batch * spatial;
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if n == 0 {
                    return Err(Error::shape("batchnorm", "empty batch"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..batch {
                        for &v in &x[(b * c + ch) * spatial..][..spatial] {
                            s = s + v;
                        }
                    }
                    let m = s / T::from_usize(n).unwrap();
                    let mut ss = T::zero();
                    for b in 0..batch {
                        for &v in &x[(b * c + ch) * spatial..][..spatial] {
                            ss = ss + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / T::from_usize(n).unwrap();
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let stats_out = batch_stats.then(|| BatchStats {
            mean,
            var,
            count: n,
        });
        let value = Tensor::new(&shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats_out))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, input: Var) -> Var {
        self.unary(
            input,
            |v| if v > T::zero() { v } else { v.exp_m1() },
            Op::Elu(input),
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(T::zero()), Op::Relu(input))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.exp(), Op::Exp(input))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        self.unary(input, |v| scale * v + shift, Op::Affine { input, scale })
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("operands {:?} and {:?} differ", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (batch, d_in) = dims2(self.value(input), "linear")?;
        let (d_out, w_in) = dims2(self.value(weight), "linear")?;
        if w_in != d_in || self.value(bias).len() != d_out {
            return Err(Error::shape(
                "linear",
                format!("input width {d_in} does not match weight {d_out}x{w_in}"),
            ));
        }
        let mut y = vec![T::zero(); batch * d_out];
        for row in y.chunks_mut(d_out) {
            row.copy_from_slice(self.value(bias).data());
        }
        T::gemm(
            batch,
            d_in,
            d_out,
            T::one(),
            self.value(input).data(),
            (d_in as isize, 1),
            self.value(weight).data(),
            (1, d_in as isize),
            T::one(),
            &mut y,
            (d_out as isize, 1),
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(&[batch, d_out], y)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// `a b` or `a b^T`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (br, bc) = dims2(self.value(b), "matmul")?;
        let (kb, n, bs) = if transpose_b {
            (bc, br, (1, bc as isize))
        } else {
            (br, bc, (bc as isize, 1))
        };
        if kb != k {
            return Err(Error::shape("matmul", format!("inner dimensions {k} and {kb} differ")));
        }
        let mut y = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            bs,
            T::zero(),
            &mut y,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[m, n], y)?;
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Adaptive average pooling of `[B, C, H, W]` down to `[B, C, out_h, out_w]`.
    pub fn avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = match *self.value(input).shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape("avg_pool", format!("input shape {s:?} is not 4-d"))),
        };
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::shape(
                "avg_pool",
                format!("cannot pool {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for plane in 0..b * c {
            let src = &x[plane * h * w..][..h * w];
            for oy in 0..out_h {
                let (y0, y1) = pool_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_bin(ox, w, out_w);
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s = s + src[yy * w + xx];
                        }
                    }
                    out[(plane * out_h + oy) * out_w + ox] =
                        s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AvgPool { input, out_h, out_w }, rg))
    }

    /// Row-wise L2 normalisation. An all-zero row maps to `e_0`.
    pub fn normalize_rows(&mut self, input: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(input), "normalize")?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); m * d];
        let mut norms = vec![T::zero(); m];
        for i in 0..m {
            let row = &x[i * d..][..d];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[i] = n;
            if n > T::zero() {
                for (o, &v) in out[i * d..][..d].iter_mut().zip(row) {
                    *o = v / n;
                }
            } else if d > 0 {
                out[i * d] = T::one();
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[m, d], out)?;
        Ok(self.push(value, Op::NormalizeRows { input, norms }, rg))
    }

    /// Repeats a `[1, d]` (or `[d]`) row `rows` times.
    pub fn broadcast_rows(&mut self, input: Var, rows: usize) -> Result<Var> {
        let x = self.value(input);
        let d = match *x.shape() {
            [d] | [1, d] => d,
            ref s => return Err(Error::shape("broadcast", format!("cannot broadcast shape {s:?}"))),
        };
        let data = x.data().iter().copied().cycle().take(rows * d).collect();
        let rg = self.rg(input);
        let value = Tensor::new(&[rows, d], data)?;
        Ok(self.push(value, Op::Broadcast(input), rg))
    }

    /// `||a_i - b_i||^2` for each row, shape `[M]`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(a), "sq_dist")?;
        if self.value(b).shape() != [m, d] {
            return Err(Error::shape("sq_dist", "operands differ in shape"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = (0..m)
            .map(|i| {
                xa[i * d..][..d]
                    .iter()
                    .zip(&xb[i * d..][..d])
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[m], data)?;
        Ok(self.push(value, Op::SqDistRows(a, b), rg))
    }

    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(input), "softmax")?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); m * d];
        for i in 0..m {
            softmax_into(&x[i * d..][..d], &mut out[i * d..][..d]);
        }
        let rg = self.rg(input);
        let value = Tensor::new(&[m, d], out)?;
        Ok(self.push(value, Op::SoftmaxRows(input), rg))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != m || targets.iter().any(|&t| t >= k) || m == 0 {
            return Err(Error::shape("cross_entropy", "targets do not match logits"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); m * k];
        let mut total = T::zero();
        for i in 0..m {
            let row = &x[i * k..][..k];
            let lse = log_sum_exp(row);
            total = total + lse - row[targets[i]];
            softmax_into(row, &mut probs[i * k..][..k]);
        }
        let rg = self.rg(logits);
        let value = Tensor::scalar(total / T::from_usize(m).unwrap());
        Ok(self.push(
            value,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Column means, shape `[1, d]`.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let (m, d) = dims2(self.value(input), "mean_rows")?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); d];
        for row in x.chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::from_usize(m).unwrap();
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(input);
        let value = Tensor::new(&[1, d], out)?;
        Ok(self.push(value, Op::MeanRows(input), rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = x.data().iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(s), Op::Mean(input), rg))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let mut contrib: Vec<(Var, Vec<T>)> = Vec::new();
            self.backprop_node(i, &dy, &mut contrib);
            grads[i] = Some(dy);
            for (v, g) in contrib {
                if !self.rg(v) {
                    continue;
                }
                debug_assert_eq!(g.len(), self.value(v).len());
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &[T], out: &mut Vec<(Var, Vec<T>)>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => self.backprop_conv(*input, *weight, geom, cols, dy, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (batch, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let n = T::from_usize(batch * spatial).unwrap();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for k in off..off + spatial {
                            dgamma[ch] = dgamma[ch] + dy[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + dy[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for b in 0..batch {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            let scale = g[ch] * inv_std[ch];
                            for k in off..off + spatial {
                                dx[k] = if *batch_stats {
                                    scale / n * (n * dy[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    scale * dy[k]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Elu(x) => {
                let xs = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xs.iter().zip(y))
                    .map(|(&d, (&xv, &yv))| if xv > T::zero() { d } else { d * (yv + T::one()) })
                    .collect();
                out.push((*x, dx));
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xs)
                    .map(|(&d, &xv)| if xv > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.iter().map(|&d| -d).collect()));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, dy.iter().zip(xb).map(|(&d, &v)| d * v).collect()));
                out.push((*b, dy.iter().zip(xa).map(|(&d, &v)| d * v).collect()));
            }
            Op::Affine { input, scale } => {
                out.push((*input, dy.iter().map(|&d| d * *scale).collect()));
            }
            Op::Exp(x) => {
                out.push((*x, dy.iter().zip(y).map(|(&d, &v)| d * v).collect()));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (batch, d_in) = dims2(self.value(*input), "linear").unwrap();
                let d_out = self.value(*bias).len();
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); batch * d_in];
                    T::gemm(
                        batch,
                        d_out,
                        d_in,
                        T::one(),
                        dy,
                        (d_out as isize, 1),
                        self.value(*weight).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dx,
                        (d_in as isize, 1),
                    );
                    out.push((*input, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        batch,
                        d_in,
                        T::one(),
                        dy,
                        (1, d_out as isize),
                        self.value(*input).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dw,
                        (d_in as isize, 1),
                    );
                    out.push((*weight, dw));
                }
                let mut db = vec![T::zero(); d_out];
                for row in dy.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                out.push((*bias, db));
            }
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = dims2(self.value(*a), "matmul").unwrap();
                let n = node.value.shape()[1];
                // b viewed as k x n.
                let b_strides = if *transpose_b {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                if self.rg(*a) {
                    // da = dy b^T : m x k
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dy,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (b_strides.1, b_strides.0),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    out.push((*a, da));
                }
                if self.rg(*b) {
                    // db (as k x n) = a^T dy, written with b's own layout.
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        (1, k as isize),
                        dy,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        b_strides,
                    );
                    out.push((*b, db));
                }
            }
            Op::Reshape(x) => out.push((*x, dy.to_vec())),
            Op::AvgPool {
                input,
                out_h,
                out_w,
            } => {
                let (h, w) = {
                    let s = self.value(*input).shape();
                    (s[2], s[3])
                };
                let planes = node.value.shape()[0] * node.value.shape()[1];
                let mut dx = vec![T::zero(); planes * h * w];
                for plane in 0..planes {
                    for oy in 0..*out_h {
                        let (y0, y1) = pool_bin(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = pool_bin(ox, w, *out_w);
                            let g = dy[(plane * out_h + oy) * out_w + ox]
                                / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let k = plane * h * w + yy * w + xx;
                                    dx[k] = dx[k] + g;
                                }
                            }
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::NormalizeRows { input, norms } => {
                let d = node.value.shape()[1];
                let mut dx = vec![T::zero(); dy.len()];
                for (i, &n) in norms.iter().enumerate() {
                    if n <= T::zero() {
                        continue;
                    }
                    let yr = &y[i * d..][..d];
                    let gr = &dy[i * d..][..d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                out.push((*input, dx));
            }
            Op::Broadcast(x) => {
                let d = self.value(*x).len();
                let mut dx = vec![T::zero(); d];
                for row in dy.chunks(d) {
                    dx.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                out.push((*x, dx));
            }
            Op::SqDistRows(a, b) => {
                let d = self.value(*a).shape()[1];
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<T> = (0..xa.len())
                    .map(|k| T::lit(2.0) * (xa[k] - xb[k]) * dy[k / d])
                    .collect();
                out.push((*b, da.iter().map(|&v| -v).collect()));
                out.push((*a, da));
            }
            Op::SoftmaxRows(x) => {
                let d = node.value.shape()[1];
                let mut dx = vec![T::zero(); dy.len()];
                for i in 0..y.len() / d.max(1) {
                    let yr = &y[i * d..][..d];
                    let gr = &dy[i * d..][..d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len();
                let k = probs.len() / m;
                let scale = dy[0] / T::from_usize(m).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] = dx[i * k + t] - scale;
                }
                out.push((*logits, dx));
            }
            Op::MeanRows(x) => {
                let m = self.value(*x).shape()[0];
                let inv = T::one() / T::from_usize(m).unwrap();
                let dx = dy.iter().map(|&g| g * inv).cycle().take(self.value(*x).len()).collect();
                out.push((*x, dx));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = dy[0] / T::from_usize(n).unwrap();
                out.push((*x, vec![g; n]));
            }
        }
    }

    fn backprop_conv(
        &self,
        input: Var,
        weight: Var,
        geom: &ConvGeom,
        cols: &[T],
        dy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let (r, p) = (geom.patch(), geom.positions());
        let bp = geom.batch * p;
        let c_out = geom.c_out;
        let mut dy_mat = vec![T::zero(); c_out * bp];
        for b in 0..geom.batch {
            for co in 0..c_out {
                dy_mat[co * bp + b * p..][..p].copy_from_slice(&dy[(b * c_out + co) * p..][..p]);
            }
        }
        if self.rg(weight) {
            let mut dw = vec![T::zero(); c_out * r];
            T::gemm(
                c_out,
                bp,
                r,
                T::one(),
                &dy_mat,
                (bp as isize, 1),
                cols,
                (1, bp as isize),
                T::zero(),
                &mut dw,
                (r as isize, 1),
            );
            out.push((weight, dw));
        }
        if self.rg(input) {
            let mut dcols = vec![T::zero(); r * bp];
            T::gemm(
                r,
                c_out,
                bp,
                T::one(),
                self.value(weight).data(),
                (1, r as isize),
                &dy_mat,
                (bp as isize, 1),
                T::zero(),
                &mut dcols,
                (bp as isize, 1),
            );
            let (k, h, w, s, pad) = (geom.k, geom.h, geom.w, geom.stride, geom.pad);
            let mut dx = vec![T::zero(); geom.batch * geom.c_in * h * w];
            for ci in 0..geom.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = &dcols[((ci * k + ky) * k + kx) * bp..][..bp];
                        for b in 0..geom.batch {
                            let plane = &mut dx[(b * geom.c_in + ci) * h * w..][..h * w];
                            for oy in 0..geom.h_out {
                                let iy = (oy * s + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src = &row[b * p + oy * geom.w_out..][..geom.w_out];
                                let dst = &mut plane[iy as usize * w..][..w];
                                for (ox, &g) in src.iter().enumerate() {
                                    let ix = (ox * s + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst[ix as usize] = dst[ix as usize] + g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out.push((input, dx));
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        s = s + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / s);
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like its value when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// Gradients of all registered parameters, in registration order.
    pub fn params(&self, graph: &Graph<T>) -> Vec<Tensor<T>> {
        graph.params().iter().map(|&v| self.get_or_zeros(graph, v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_loss_gives_ones() {
        let mut g = Graph::<f64>::new();
        let theta = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let m = g.mean(theta).unwrap();
        let loss = g.affine(m, 6.0, 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(theta).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn half_square_norm_gives_theta() {
        let data = [0.3, -1.2, 2.5, 4.0];
        let mut g = Graph::<f64>::new();
        let theta = g.param(t(&[4], &data));
        let sq = g.mul(theta, theta).unwrap();
        let m = g.mean(sq).unwrap();
        let loss = g.affine(m, 2.0, 0.0); // 4 * mean / 2
        let grads = g.backward(loss).unwrap();
        for (gv, &d) in grads.get(theta).unwrap().data().iter().zip(&data) {
            assert!((gv - d).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 3.0]));
        let e = g.exp(x);
        let l = g.mean(e).unwrap();
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        assert_eq!(a.get(x), b.get(x));
    }

    #[test]
    fn elu_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[0.0, -1e-12, 1e-12]));
        let y = g.elu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!(g.value(y).data()[1].abs() < 1e-11);
    }

    #[test]
    fn zero_row_normalizes_to_basis_vector() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[0.0, 0.0, 0.0, 3.0, 0.0, 4.0]));
        let y = g.normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let x_data: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w_data: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let x = g.constant(t(&[2, 2, 5, 4], &x_data));
        let w = g.param(t(&[3, 2, 3, 3], &w_data));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 3, 2]);
        let at = |b: usize, c: usize, i: isize, j: isize| {
            if i < 0 || j < 0 || i >= 5 || j >= 4 {
                0.0
            } else {
                x_data[((b * 2 + c) * 5 + i as usize) * 4 + j as usize]
            }
        };
        for b in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    s += w_data[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * at(b, ci, (oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                                }
                            }
                        }
                        let got = g.value(y).data()[((b * 3 + co) * 3 + oy) * 2 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.param(Tensor::zeros(&[2, 2, 3, 3]));
        let msg = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("conv2d"), "{msg}");
    }
}
