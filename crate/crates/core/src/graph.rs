//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output. [`Graph::backward`] walks the record in reverse and returns the
//! gradient of a scalar with respect to every node, including parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvShape {
    batch: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    h_out: usize,
    w_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    PowerNorm {
        x: Var,
        inv_rms: Vec<T>,
    },
    ComplexGain {
        x: Var,
        gains: Vec<(T, T)>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    KlStdNormal {
        mu: Var,
        sigma: Var,
    },
    WeightedSum(Vec<(Var, T)>),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients in the order parameters entered the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) without overflow
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Unfolds one `(c, h, w)` image into a `(c*k*k, ho*wo)` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(ch * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            x[(ch * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: &[T]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used for sensitivity checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a diverged run shows up in the loss
        let out = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// `(B, ...)` to `(B, rest)`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// `x (B, in) * w(out, in)^T + b(out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.shape().len(), 2, "linear expects a (batch, features) input");
        let (rows, d_in) = (xv.shape()[0], xv.shape()[1]);
        let d_out = wv.shape()[0];
        assert_eq!(wv.shape(), &[d_out, d_in], "linear weight shape");
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), d_out, "linear bias shape");
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            d_in,
            d_out,
            T::one(),
            xv.data(),
            d_in as isize,
            1,
            wv.data(),
            1,
            d_in as isize,
            T::one(),
            &mut out,
            d_out as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[rows, d_out], out).unwrap(),
            Op::Linear { x, w, b },
            rg,
        )
    }

    /// 2-D convolution, `x (B, C, H, W)`, `w (O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.shape().len(), 4, "conv2d expects (B, C, H, W)");
        let [batch, c_in, h_in, w_in] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (c_out, kernel) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape(), &[c_out, c_in, kernel, kernel], "conv2d weight shape");
        assert!(h_in + 2 * pad >= kernel && w_in + 2 * pad >= kernel, "conv2d kernel larger than input");
        let h_out = (h_in + 2 * pad - kernel) / stride + 1;
        let w_out = (w_in + 2 * pad - kernel) / stride + 1;
        let shape = ConvShape {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            h_out,
            w_out,
            kernel,
            stride,
            pad,
        };
        let ckk = c_in * kernel * kernel;
        let plane = h_out * w_out;
        let mut cols = vec![T::zero(); ckk * plane];
        let mut out = vec![T::zero(); batch * c_out * plane];
        let img = c_in * h_in * w_in;
        for n in 0..batch {
            im2col(&xv.data()[n * img..(n + 1) * img], c_in, h_in, w_in, kernel, stride, pad, h_out, w_out, &mut cols);
            let dst = &mut out[n * c_out * plane..(n + 1) * c_out * plane];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, &bias) in bv.iter().enumerate() {
                    dst[o * plane..(o + 1) * plane].fill(bias);
                }
            }
            T::gemm(c_out, ckk, plane, T::one(), wv.data(), ckk as isize, 1, &cols, plane as isize, 1, T::one(), dst, plane as isize, 1);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[batch, c_out, h_out, w_out], out).unwrap(),
            Op::Conv2d { x, w, b, shape },
            rg,
        )
    }

    /// Transposed convolution, `x (B, Cin, H, W)`, `w (Cin, Cout, k, k)`.
    ///
    /// Output side is `(H - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.shape().len(), 4, "conv_transpose2d expects (B, C, H, W)");
        let [batch, c_in, h_in, w_in] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (c_out, kernel) = (wv.shape()[1], wv.shape()[2]);
        assert_eq!(wv.shape(), &[c_in, c_out, kernel, kernel], "conv_transpose2d weight shape");
        assert!(output_pad < stride.max(1), "output padding must be smaller than stride");
        let h_out = (h_in - 1) * stride + kernel + output_pad - 2 * pad;
        let w_out = (w_in - 1) * stride + kernel + output_pad - 2 * pad;
        let shape = ConvShape {
            batch,
            c_in,
            h_in,
            w_in,
            c_out,
            h_out,
            w_out,
            kernel,
            stride,
            pad,
        };
        let ckk = c_out * kernel * kernel;
        let plane_in = h_in * w_in;
        let plane_out = h_out * w_out;
        let mut cols = vec![T::zero(); ckk * plane_in];
        let mut out = vec![T::zero(); batch * c_out * plane_out];
        for n in 0..batch {
            let xb = &xv.data()[n * c_in * plane_in..(n + 1) * c_in * plane_in];
            // cols = W^T (ckk x c_in) * x_b (c_in x plane_in)
            T::gemm(ckk, c_in, plane_in, T::one(), wv.data(), 1, ckk as isize, xb, plane_in as isize, 1, T::zero(), &mut cols, plane_in as isize, 1);
            let dst = &mut out[n * c_out * plane_out..(n + 1) * c_out * plane_out];
            col2im(&cols, c_out, h_out, w_out, kernel, stride, pad, h_in, w_in, dst);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, &bias) in bv.iter().enumerate() {
                    dst[o * plane_out..(o + 1) * plane_out].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[batch, c_out, h_out, w_out], out).unwrap(),
            Op::ConvTranspose2d { x, w, b, shape },
            rg,
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let dims = t.shape();
        assert!(axis < dims.len(), "softmax axis out of range");
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer = t.numel() / (len * inner).max(1);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(out[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let out = Tensor::from_vec(dims, out).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Softmax { x: a, len, inner }, rg)
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().expect("layer_norm on a scalar");
        assert_eq!(self.value(gamma).numel(), d, "layer_norm gamma length");
        assert_eq!(self.value(beta).numel(), d, "layer_norm beta length");
        let rows = t.numel() / d;
        let dt = T::lit(d as f64);
        let mut xhat = vec![T::zero(); t.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.numel()];
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let out = Tensor::from_vec(t.shape(), out).unwrap();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Concatenates `(B, w_i)` blocks along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.shape().len(), 2, "concat expects (batch, features) parts");
                assert_eq!(t.rows(), rows, "concat batch sizes differ");
                t.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_vec(&[rows, total], out).unwrap(),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Scales every row to unit mean-square power.
    pub fn power_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let l = t.row_len();
        let lt = T::lit(l as f64);
        let mut inv_rms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for r in 0..t.rows() {
            let row = &mut out[r * l..(r + 1) * l];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / lt;
            // non-finite rows stay non-finite so the trainer reports the loss
            if ms == T::zero() {
                return Err(Error::DegenerateSignal);
            }
            let inv = T::one() / ms.sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        let out = Tensor::from_vec(t.shape(), out).unwrap();
        let rg = self.rg(x);
        Ok(self.push(out, Op::PowerNorm { x, inv_rms }, rg))
    }

    /// Multiplies consecutive `(re, im)` pairs by fixed complex gains, one per pair.
    pub fn complex_gain(&mut self, x: Var, gains: Vec<(T, T)>) -> Var {
        let t = self.value(x);
        assert_eq!(t.numel(), 2 * gains.len(), "one complex gain per symbol pair");
        let mut out = t.data().to_vec();
        for (p, &(hr, hi)) in gains.iter().enumerate() {
            let (xr, xi) = (out[2 * p], out[2 * p + 1]);
            out[2 * p] = hr * xr - hi * xi;
            out[2 * p + 1] = hi * xr + hr * xi;
        }
        let out = Tensor::from_vec(t.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::ComplexGain { x, gains }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy: logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let n = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_label: n,
            });
        }
        let mut probs = vec![T::zero(); t.numel()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - row[label];
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute deviation from a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(format!(
                "l1 loss: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = T::lit(p.numel() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Batch mean of `KL(N(mu, sigma^2) || N(0, 1))` summed over latent dimensions.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        self.same_shape(mu, sigma, "kl");
        let m = self.value(mu);
        let s = self.value(sigma);
        if s.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("sigma must be strictly positive".into()));
        }
        let half = T::lit(0.5);
        let total = m
            .data()
            .iter()
            .zip(s.data())
            .map(|(&mu, &sg)| (mu * mu + sg * sg - T::one()) * half - sg.ln())
            .sum::<T>();
        let loss = total / T::lit(m.rows() as f64);
        let rg = self.rg(mu) || self.rg(sigma);
        Ok(self.push(Tensor::scalar(loss), Op::KlStdNormal { mu, sigma }, rg))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).numel(), 1, "weighted_sum expects scalars");
            total += w * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar; use backward_with");
        self.backward_with(loss, &[T::one()])
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: &[T]) -> Gradients<T> {
        assert_eq!(seed.len(), self.value(out).numel(), "seed length");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, usize)> = self.param_vars.iter().map(|(&p, &v)| (p, v.0)).collect();
        params.sort_by_key(|&(_, node)| node);
        Gradients { grads, params }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    let d: Vec<T> = g.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if want(*b) {
                    let d: Vec<T> = g.iter().zip(va).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<T> = g.iter().map(|&g| g * *s).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d: Vec<T> = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d: Vec<T> = g.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Softmax { x, len, inner } => {
                let y = node.value.data();
                let (len, inner) = (*len, *inner);
                let outer = y.len() / (len * inner).max(1);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot = (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum::<T>();
                        for j in 0..len {
                            let k = base + j * inner;
                            d[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::Conv2d { x, w, b, shape } => self.conv_backward(*x, *w, *b, shape, g, grads),
            Op::ConvTranspose2d { x, w, b, shape } => self.conv_t_backward(*x, *w, *b, shape, g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let rows = xhat.len() / d;
                let gm = self.value(*gamma).data();
                let dt = T::lit(d as f64);
                if want(*gamma) || want(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    if want(*gamma) {
                        accumulate(&mut grads[gamma.0], &dg);
                    }
                    if want(*beta) {
                        accumulate(&mut grads[beta.0], &db);
                    }
                }
                if want(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<T> = (0..d).map(|j| g[r * d + j] * gm[j]).collect();
                        let s1 = dxh.iter().copied().sum::<T>();
                        let s2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] / dt * (dt * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.row_len();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if want(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::PowerNorm { x, inv_rms } => {
                let y = node.value.data();
                let l = node.value.row_len();
                let lt = T::lit(l as f64);
                let mut d = vec![T::zero(); y.len()];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let span = r * l..(r + 1) * l;
                    let dot = y[span.clone()].iter().zip(&g[span.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                    for k in span {
                        d[k] = (g[k] - y[k] * dot / lt) * inv;
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::ComplexGain { x, gains } => {
                let mut d = vec![T::zero(); g.len()];
                for (p, &(hr, hi)) in gains.iter().enumerate() {
                    let (gr, gi) = (g[2 * p], g[2 * p + 1]);
                    d[2 * p] = hr * gr + hi * gi;
                    d[2 * p + 1] = hr * gi - hi * gr;
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * n + l] -= scale;
                }
                accumulate(&mut grads[logits.0], &d);
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred).data();
                let scale = g[0] / T::lit(p.len() as f64);
                let d: Vec<T> = p
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(&mut grads[pred.0], &d);
            }
            Op::KlStdNormal { mu, sigma } => {
                let scale = g[0] / T::lit(self.value(*mu).rows() as f64);
                if want(*mu) {
                    let d: Vec<T> = self.value(*mu).data().iter().map(|&m| m * scale).collect();
                    accumulate(&mut grads[mu.0], &d);
                }
                if want(*sigma) {
                    let d: Vec<T> = self
                        .value(*sigma)
                        .data()
                        .iter()
                        .map(|&s| (s - T::one() / s) * scale)
                        .collect();
                    accumulate(&mut grads[sigma.0], &d);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if want(v) {
                        accumulate(&mut grads[v.0], &[g[0] * w]);
                    }
                }
            }
            Op::SumAll(a) => {
                let d = vec![g[0]; self.value(*a).numel()];
                accumulate(&mut grads[a.0], &d);
            }
        }
    }

    fn linear_backward(&self, x: Var, w: Var, b: Option<Var>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, d_in) = (xv.shape()[0], xv.shape()[1]);
        let d_out = wv.shape()[0];
        if self.rg(x) {
            let mut dx = vec![T::zero(); rows * d_in];
            T::gemm(rows, d_out, d_in, T::one(), g, d_out as isize, 1, wv.data(), d_in as isize, 1, T::zero(), &mut dx, d_in as isize, 1);
            accumulate(&mut grads[x.0], &dx);
        }
        if self.rg(w) {
            let mut dw = vec![T::zero(); d_out * d_in];
            T::gemm(d_out, rows, d_in, T::one(), g, 1, d_out as isize, xv.data(), d_in as isize, 1, T::zero(), &mut dw, d_in as isize, 1);
            accumulate(&mut grads[w.0], &dw);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut db = vec![T::zero(); d_out];
            for r in 0..rows {
                for j in 0..d_out {
                    db[j] += g[r * d_out + j];
                }
            }
            accumulate(&mut grads[b.0], &db);
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, s: &ConvShape, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let ckk = s.c_in * s.kernel * s.kernel;
        let plane = s.h_out * s.w_out;
        let img = s.c_in * s.h_in * s.w_in;
        let mut cols = vec![T::zero(); ckk * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        let mut dw = vec![T::zero(); s.c_out * ckk];
        let mut dx = vec![T::zero(); if self.rg(x) { s.batch * img } else { 0 }];
        for n in 0..s.batch {
            let gb = &g[n * s.c_out * plane..(n + 1) * s.c_out * plane];
            if self.rg(w) {
                im2col(&xv[n * img..(n + 1) * img], s.c_in, s.h_in, s.w_in, s.kernel, s.stride, s.pad, s.h_out, s.w_out, &mut cols);
                T::gemm(s.c_out, plane, ckk, T::one(), gb, plane as isize, 1, &cols, 1, plane as isize, T::one(), &mut dw, ckk as isize, 1);
            }
            if self.rg(x) {
                T::gemm(ckk, s.c_out, plane, T::one(), wv, 1, ckk as isize, gb, plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1);
                col2im(&dcols, s.c_in, s.h_in, s.w_in, s.kernel, s.stride, s.pad, s.h_out, s.w_out, &mut dx[n * img..(n + 1) * img]);
            }
        }
        if self.rg(x) {
            accumulate(&mut grads[x.0], &dx);
        }
        if self.rg(w) {
            accumulate(&mut grads[w.0], &dw);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut db = vec![T::zero(); s.c_out];
            for n in 0..s.batch {
                for (o, slot) in db.iter_mut().enumerate() {
                    let start = (n * s.c_out + o) * plane;
                    *slot += g[start..start + plane].iter().copied().sum::<T>();
                }
            }
            accumulate(&mut grads[b.0], &db);
        }
    }

    fn conv_t_backward(&self, x: Var, w: Var, b: Option<Var>, s: &ConvShape, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let ckk = s.c_out * s.kernel * s.kernel;
        let plane_in = s.h_in * s.w_in;
        let plane_out = s.h_out * s.w_out;
        let mut gcols = vec![T::zero(); ckk * plane_in];
        let mut dw = vec![T::zero(); s.c_in * ckk];
        let mut dx = vec![T::zero(); if self.rg(x) { s.batch * s.c_in * plane_in } else { 0 }];
        for n in 0..s.batch {
            let gb = &g[n * s.c_out * plane_out..(n + 1) * s.c_out * plane_out];
            im2col(gb, s.c_out, s.h_out, s.w_out, s.kernel, s.stride, s.pad, s.h_in, s.w_in, &mut gcols);
            if self.rg(x) {
                let dst = &mut dx[n * s.c_in * plane_in..(n + 1) * s.c_in * plane_in];
                T::gemm(s.c_in, ckk, plane_in, T::one(), wv, ckk as isize, 1, &gcols, plane_in as isize, 1, T::zero(), dst, plane_in as isize, 1);
            }
            if self.rg(w) {
                let xb = &xv[n * s.c_in * plane_in..(n + 1) * s.c_in * plane_in];
                T::gemm(s.c_in, plane_in, ckk, T::one(), xb, plane_in as isize, 1, &gcols, 1, plane_in as isize, T::one(), &mut dw, ckk as isize, 1);
            }
        }
        if self.rg(x) {
            accumulate(&mut grads[x.0], &dx);
        }
        if self.rg(w) {
            accumulate(&mut grads[w.0], &dw);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut db = vec![T::zero(); s.c_out];
            for n in 0..s.batch {
                for (o, slot) in db.iter_mut().enumerate() {
                    let start = (n * s.c_out + o) * plane_out;
                    *slot += g[start..start + plane_out].iter().copied().sum::<T>();
                }
            }
            accumulate(&mut grads[b.0], &db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    /// Checks d(sum(c * f(x)))/dx against central differences for each input leaf.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let build = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
            let out = f(&mut g, &vars);
            let n = g.value(out).numel();
            let c = g.constant(Tensor::from_vec(g.shape(out), pseudo(n, 7)).unwrap());
            let prod = g.mul(out, c);
            let loss = g.sum_all(prod);
            (g, vars, loss)
        };
        let (g, vars, loss) = build(&inputs);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
            for i in 0..inputs[k].numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let (gp, _, lp) = build(&plus);
                let (gm, _, lm) = build(&minus);
                let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / (1e-6 + fd.abs().max(analytic[i].abs()));
                assert!(err < 1e-5, "input {k} elem {i}: fd {fd} vs analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn linear_gradients() {
        check(
            vec![t(&[3, 4], &pseudo(12, 1)), t(&[2, 4], &pseudo(8, 2)), t(&[2], &pseudo(2, 3))],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        );
    }

    #[test]
    fn conv2d_gradients() {
        check(
            vec![t(&[2, 2, 5, 5], &pseudo(100, 1)), t(&[3, 2, 3, 3], &pseudo(54, 2)), t(&[3], &pseudo(3, 3))],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        );
    }

    #[test]
    fn conv_transpose_gradients() {
        check(
            vec![t(&[2, 2, 3, 3], &pseudo(36, 4)), t(&[2, 3, 3, 3], &pseudo(54, 5)), t(&[3], &pseudo(3, 6))],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1),
        );
    }

    #[test]
    fn conv_transpose_output_size() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv_transpose2d(x, w, None, 2, 1, 1);
        assert_eq!(g.shape(y), &[1, 2, 16, 16]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for shared weights
        let x = t(&[1, 2, 6, 6], &pseudo(72, 1));
        let y = t(&[1, 3, 3, 3], &pseudo(27, 2));
        let wc = t(&[3, 2, 3, 3], &pseudo(54, 3));
        let wt = wc.clone();
        let mut g = Graph::<f64>::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let (wcv, wtv) = (g.constant(wc), g.constant(wt.reshape(&[3, 2, 3, 3]).unwrap()));
        let cx = g.conv2d(xv, wcv, None, 2, 1);
        let ty = g.conv_transpose2d(yv, wtv, None, 2, 1, 1);
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn pointwise_gradients() {
        check(vec![t(&[2, 3], &pseudo(6, 1))], |g, v| {
            let a = g.sigmoid(v[0]);
            let b = g.softplus(v[0]);
            let c = g.mul(a, b);
            let r = g.relu(v[0]);
            let s = g.add(c, r);
            let s = g.scale(s, 1.5);
            g.add_scalar(s, 0.25)
        });
    }

    #[test]
    fn softmax_gradients_both_axes() {
        check(vec![t(&[2, 3, 2, 2], &pseudo(24, 1))], |g, v| g.softmax(v[0], 1));
        check(vec![t(&[2, 3, 4], &pseudo(24, 2))], |g, v| g.softmax(v[0], 2));
    }

    #[test]
    fn layer_norm_gradients() {
        check(
            vec![t(&[3, 5], &pseudo(15, 1)), t(&[5], &pseudo(5, 2)), t(&[5], &pseudo(5, 3))],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        );
    }

    #[test]
    fn power_norm_and_gain_gradients() {
        check(vec![t(&[2, 4], &pseudo(8, 1))], |g, v| {
            let p = g.power_norm(v[0]).unwrap();
            g.complex_gain(p, vec![(0.5, -1.0), (2.0, 0.3), (-0.7, 0.1), (1.0, 1.0)])
        });
    }

    #[test]
    fn concat_reshape_gradients() {
        check(vec![t(&[2, 3], &pseudo(6, 1)), t(&[2, 2], &pseudo(4, 2))], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            g.reshape(c, &[5, 2])
        });
    }

    #[test]
    fn loss_gradients() {
        check(vec![t(&[3, 4], &pseudo(12, 1))], |g, v| g.cross_entropy(v[0], &[0, 3, 1]).unwrap());
        let target = t(&[2, 3], &pseudo(6, 9));
        check(vec![t(&[2, 3], &pseudo(6, 1))], move |g, v| g.l1_loss(v[0], &target).unwrap());
        check(
            vec![t(&[2, 3], &pseudo(6, 1)), t(&[2, 3], &pseudo(6, 2)).map(|s| s.abs() + 0.2)],
            |g, v| g.kl_std_normal(v[0], v[1]).unwrap(),
        );
    }

    #[test]
    fn weighted_sum_gradients() {
        check(vec![t(&[2, 2], &pseudo(4, 1)), t(&[3], &pseudo(3, 2))], |g, v| {
            let a = g.sum_all(v[0]);
            let b = g.sum_all(v[1]);
            g.weighted_sum(&[(a, 0.3), (b, -2.0)])
        });
    }

    #[test]
    fn power_norm_rejects_zero_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(g.power_norm(x), Err(Error::DegenerateSignal)));
    }

    #[test]
    fn shared_param_node_reused() {
        let mut store = ParameterStore::<f64>::new();
        let id = store.insert_constant("w", &[2], 1.0).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.param(id).unwrap(), &[2.0, 2.0]);
    }
}
