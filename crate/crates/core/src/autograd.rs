//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep in
//! [`Graph::backward`] visits every node after all of its consumers.
//! Kernels are single-threaded and iterate in a fixed order, which makes
//! every forward and backward pass bit-reproducible.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalise with batch statistics (training).
    Batch,
    /// Normalise with the supplied running statistics.
    Running,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        mode: BatchNormMode,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Upsample2x(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    SquaredDiff {
        a: Var,
        b: Var,
        divisor: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds above cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold one `[c, h, w]` image into `[c*kh*kw, ho*wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    img: &mut [f64],
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a `[c]` vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vb.len();
        assert_eq!(*vx.shape().last().unwrap(), c, "add_bias: width mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, bi) in row.iter_mut().zip(vb.data()) {
                *o += bi;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddBias(x, b), rg)
    }

    /// `x[..., cin] @ w[cin, cout] + b[cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let cin = vw.shape()[0];
        let cout = vw.shape()[1];
        assert_eq!(*vx.shape().last().unwrap(), cin, "linear: input width mismatch");
        let rows = vx.len() / cin;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, vx.data(), false, vw.data(), false, &mut out, false);
        if let Some(b) = b {
            let vb = self.value(b);
            for row in out.chunks_mut(cout) {
                for (o, bi) in row.iter_mut().zip(vb.data()) {
                    *o += bi;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, rg)
    }

    /// Batched matmul: `a[n, m, k] @ b[n, k, p]` (or `b[n, p, k]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(vb.shape()[0], n);
        let p = if transpose_b {
            assert_eq!(vb.shape()[2], k);
            vb.shape()[1]
        } else {
            assert_eq!(vb.shape()[1], k);
            vb.shape()[2]
        };
        let mut out = vec![0.0; n * m * p];
        for i in 0..n {
            gemm(
                m,
                k,
                p,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * p..(i + 1) * k * p],
                transpose_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, m, p], out), Op::Bmm { a, b, transpose_b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v.max(0.0)).collect());
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| gelu(v)).collect());
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *vx.shape().last().unwrap();
        assert_eq!(vg.len(), c);
        let rows = vx.len() / c;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// 2-D convolution of `x[b, cin, h, w]` with `w[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (bs, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, wcin, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let ckk = cin * kh * kw;
        let hw = ho * wo;
        let mut out = vec![0.0; bs * cout * hw];
        let mut cols = vec![0.0; ckk * hw];
        let img_len = cin * h * wd;
        for bi in 0..bs {
            let img = &vx.data()[bi * img_len..(bi + 1) * img_len];
            let dst = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                gemm(cout, ckk, hw, vw.data(), false, img, false, dst, false);
            } else {
                im2col(img, cin, h, wd, kh, kw, stride, pad, &mut cols);
                gemm(cout, ckk, hw, vw.data(), false, &cols, false, dst, false);
            }
        }
        if let Some(b) = b {
            let vb = self.value(b);
            for bi in 0..bs {
                for co in 0..cout {
                    let bias = vb.data()[co];
                    let start = (bi * cout + co) * hw;
                    for v in &mut out[start..start + hw] {
                        *v += bias;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![bs, cout, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        )
    }

    /// Per-channel normalisation of `x[b, c, h, w]`.
    ///
    /// In [`BatchNormMode::Batch`] mode returns the batch mean and unbiased
    /// variance so the caller can update its running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: BatchNormMode,
        eps: f64,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let hw = h * w;
        let count = (bs * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut stats = None;
        match mode {
            BatchNormMode::Batch => {
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..bs {
                        s += vx.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for bi in 0..bs {
                        ss += vx.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / count;
                }
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                stats = Some((mean.clone(), unbiased));
            }
            BatchNormMode::Running => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for bi in 0..bs {
            for ci in 0..c {
                let start = (bi * c + ci) * hw;
                for i in start..start + hw {
                    let hv = (vx.data()[i] - mean[ci]) * rstd[ci];
                    xhat[i] = hv;
                    out[i] = hv * vg.data()[ci] + vb.data()[ci];
                }
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                mode,
            },
            rg,
        );
        (v, stats)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(perm.len(), vx.shape().len());
        let (shape, data) = permute_data(vx.data(), vx.shape(), perm);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Permute(x, perm.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Nearest-neighbour 2x upsampling of `x[b, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut out = vec![0.0; bs * c * 4 * h * w];
        for plane in 0..bs * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![bs, c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows: trailing shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Gathers rows of the first dimension.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let vx = self.value(x);
        let n = vx.shape()[0];
        let stride = vx.len() / n.max(1);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            assert!(r < n, "select_rows: row {r} out of range {n}");
            data.extend_from_slice(&vx.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = rows.len();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::SelectRows(x, rows.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum((a - b)^2) / divisor`.
    pub fn squared_diff(&mut self, a: Var, b: Var, divisor: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "squared_diff: shape mismatch");
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / divisor), Op::SquaredDiff { a, b, divisor }, rg)
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let vl = self.value(logits);
        let k = vl.shape()[1];
        let rows = vl.shape()[0];
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let t = targets[r];
            // log-sum-exp form keeps the loss exact for saturated logits
            let logp = vl.data()[r * k + t] - max - sum.ln();
            for v in row.iter_mut() {
                *v /= sum;
            }
            if weights[r] != 0.0 {
                loss -= weights[r] * logp;
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// `sum_i weights[i] * sum_j smooth_l1(pred[i, j] - target[i, j])`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], weights: &[f64], beta: f64) -> Var {
        let vp = self.value(pred);
        let cols = vp.shape()[1];
        assert_eq!(target.len(), vp.len());
        assert_eq!(weights.len(), vp.shape()[0]);
        let mut loss = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for j in 0..cols {
                let d = (vp.data()[r * cols + j] - target[r * cols + j]).abs();
                loss += w * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            }
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                beta,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => {
                let t = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * s).collect());
                self.accumulate(grads, *a, t);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![c], gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (cin, cout) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / cin;
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, g.data(), false, vw.data(), true, &mut gx, false);
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; cin * cout];
                    gemm(cin, rows, cout, vx.data(), true, g.data(), false, &mut gw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![cin, cout], gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; cout];
                        for row in g.data().chunks(cout) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![cout], gb));
                    }
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let p = g.shape()[2];
                if self.rg(*a) {
                    let mut ga = vec![0.0; n * m * k];
                    for i in 0..n {
                        // ga = g @ b^T  (b is [k,p]) or g @ b (b is [p,k])
                        gemm(
                            m,
                            p,
                            k,
                            &g.data()[i * m * p..(i + 1) * m * p],
                            false,
                            &vb.data()[i * k * p..(i + 1) * k * p],
                            !transpose_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; n * k * p];
                    for i in 0..n {
                        let gi = &g.data()[i * m * p..(i + 1) * m * p];
                        let ai = &va.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * p..(i + 1) * k * p];
                        if *transpose_b {
                            // gb[p,k] = g^T @ a
                            gemm(p, m, k, gi, true, ai, false, dst, false);
                        } else {
                            // gb[k,p] = a^T @ g
                            gemm(k, m, p, ai, true, gi, false, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), d));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| gelu_grad(*v) * gv)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), d));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma);
                let c = vg.len();
                let rows = xhat.len() / c;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g.data()[r * c + j] * xhat[r * c + j];
                            gbeta[j] += g.data()[r * c + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], gg));
                    self.accumulate(grads, *beta, Tensor::new(vec![c], gbeta));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_gy = 0.0;
                        let mut mean_gyx = 0.0;
                        for j in 0..c {
                            let gy = g.data()[r * c + j] * vg.data()[j];
                            mean_gy += gy;
                            mean_gyx += gy * xhat[r * c + j];
                        }
                        mean_gy /= c as f64;
                        mean_gyx /= c as f64;
                        for j in 0..c {
                            let gy = g.data()[r * c + j] * vg.data()[j];
                            gx[r * c + j] = rstd[r] * (gy - mean_gy - xhat[r * c + j] * mean_gyx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (bs, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (cout, _, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let hw = ho * wo;
                let ckk = cin * kh * kw;
                let pointwise = kh == 1 && kw == 1 && *stride == 1 && *pad == 0;
                let img_len = cin * h * wd;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut gw = vec![0.0; if need_w { cout * ckk } else { 0 }];
                let mut gx = vec![0.0; if need_x { vx.len() } else { 0 }];
                let mut cols = vec![0.0; ckk * hw];
                let mut gcols = vec![0.0; ckk * hw];
                for bi in 0..bs {
                    let gb = &g.data()[bi * cout * hw..(bi + 1) * cout * hw];
                    let img = &vx.data()[bi * img_len..(bi + 1) * img_len];
                    if need_w {
                        if pointwise {
                            gemm(cout, hw, ckk, gb, false, img, true, &mut gw, true);
                        } else {
                            im2col(img, cin, h, wd, kh, kw, *stride, *pad, &mut cols);
                            gemm(cout, hw, ckk, gb, false, &cols, true, &mut gw, true);
                        }
                    }
                    if need_x {
                        let dst = &mut gx[bi * img_len..(bi + 1) * img_len];
                        if pointwise {
                            gemm(ckk, cout, hw, vw.data(), true, gb, false, dst, true);
                        } else {
                            gemm(ckk, cout, hw, vw.data(), true, gb, false, &mut gcols, false);
                            col2im(&gcols, cin, h, wd, kh, kw, *stride, *pad, dst);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(vw.shape().to_vec(), gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gbias = vec![0.0; cout];
                        for bi in 0..bs {
                            for (co, gbv) in gbias.iter_mut().enumerate() {
                                let start = (bi * cout + co) * hw;
                                *gbv += g.data()[start..start + hw].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![cout], gbias));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                mode,
            } => {
                let vg = self.value(*gamma);
                let shape = node.value.shape();
                let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let count = (bs * hw) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..bs {
                    for ci in 0..c {
                        let start = (bi * c + ci) * hw;
                        for i in start..start + hw {
                            sum_g[ci] += g.data()[i];
                            sum_gx[ci] += g.data()[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx.clone()));
                self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g.clone()));
                if self.rg(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let scale = vg.data()[ci] * rstd[ci];
                            let start = (bi * c + ci) * hw;
                            for i in start..start + hw {
                                gx[i] = match mode {
                                    BatchNormMode::Running => scale * g.data()[i],
                                    BatchNormMode::Batch => {
                                        scale * (g.data()[i] - sum_g[ci] / count - xhat[i] * sum_gx[ci] / count)
                                    }
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(shape.to_vec(), gx));
                }
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(g.data(), g.shape(), &inv);
                self.accumulate(grads, *x, Tensor::new(shape, data));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Upsample2x(x) => {
                let vx = self.value(*x);
                let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let mut d = vec![0.0; vx.len()];
                for plane in 0..bs * c {
                    let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let shape = self.shape(p).to_vec();
                    if self.rg(p) {
                        let t = Tensor::new(shape, g.data()[offset..offset + n].to_vec());
                        self.accumulate(grads, p, t);
                    }
                    offset += n;
                }
            }
            Op::SelectRows(x, rows) => {
                let vx = self.value(*x);
                let stride = vx.len() / vx.shape()[0].max(1);
                let mut d = vec![0.0; vx.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..stride {
                        d[r * stride + j] += g.data()[i * stride + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::SquaredDiff { a, b, divisor } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.item() / divisor;
                let diff: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| s * (x - y)).collect();
                if self.rg(*b) {
                    let neg = diff.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), neg));
                }
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), diff));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let shape = self.shape(*logits).to_vec();
                let k = shape[1];
                let gs = g.item();
                let mut d = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights[r] * gs;
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        d[r * k + j] = w * probs[r * k + j];
                    }
                    d[r * k + t] -= w;
                }
                self.accumulate(grads, *logits, Tensor::new(shape, d));
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
            } => {
                let vp = self.value(*pred);
                let cols = vp.shape()[1];
                let gs = g.item();
                let mut d = vec![0.0; vp.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..cols {
                        let i = r * cols + j;
                        let diff = vp.data()[i] - target[i];
                        let dd = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        d[i] = gs * w * dd;
                    }
                }
                self.accumulate(grads, *pred, Tensor::new(vp.shape().to_vec(), d));
            }
        }
    }
}
