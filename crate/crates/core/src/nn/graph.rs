//! Tape-based reverse-mode differentiation over coarse tensor operations.
//!
//! Every operation records its inputs plus whatever it needs for the
//! backward pass. A graph is built per forward pass and dropped afterwards.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::real::{Real, Strides};

const NORM_EPS: f64 = 1e-5;
/// Upper bound on patch-matrix elements per convolution slab.
const CONV_SLAB_ELEMS: usize = 1 << 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        spec: ConvSpec,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MulAdd {
        x: Var,
        mul: Vec<T>,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
    L1Target {
        x: Var,
        target: Vec<T>,
    },
    Focal {
        logits: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    frozen: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
            frozen: false,
        }
    }

    /// Graph whose parameters are constants: nothing is recorded for a
    /// backward pass, and convolutions run in bounded memory.
    pub fn inference() -> Self {
        Graph {
            frozen: true,
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(rng: ChaCha8Rng) -> Self {
        Graph {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf not tied to a parameter set.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds parameter `name`; repeated lookups share one leaf, so gradients
    /// from every use accumulate.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = if self.frozen { self.constant(t) } else { self.variable(t) };
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attention probabilities recorded by an attention node, `[heads, Nq, Nk]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    // ---- element-wise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| x * s).collect());
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().map(|&x| x.max(T::zero())).collect(),
        );
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = self.value(a);
        let out = Tensor::new(shape, va.data.clone());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Inverted dropout with rate `p`; identity when dropout is disabled.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let va = self.value(a);
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        );
        self.push(out, Op::Dropout { x: a, mask }, &[a])
    }

    /// `x ⊙ mul + add` with constant `mul` and `add` of the same shape as `x`.
    pub fn mul_add(&mut self, x: Var, mul: Vec<T>, add: &[T]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), mul.len());
        assert_eq!(vx.len(), add.len());
        let data = vx
            .data
            .iter()
            .zip(&mul)
            .zip(add)
            .map(|((&a, &m), &b)| a * m + b)
            .collect();
        let out = Tensor::new(vx.shape.clone(), data);
        self.push(out, Op::MulAdd { x, mul }, &[x])
    }

    // ---- matrix ----------------------------------------------------------

    /// Transpose of a tensor viewed as `[shape[0], rest]`.
    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data);
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::new(vec![index.len(), c], data);
        self.push(
            out,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, m) = (va.rows(), va.cols(), vb.cols());
        assert_eq!(vb.rows(), k, "matmul: inner dimension mismatch");
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            &va.data,
            Strides::rows(k),
            &vb.data,
            Strides::rows(m),
            T::zero(),
            &mut out,
            Strides::rows(m),
        );
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x·W + b` with `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, fin, fout) = (vx.rows(), vx.cols(), vw.cols());
        assert_eq!(vw.rows(), fin, "linear: input width mismatch");
        assert_eq!(vb.len(), fout, "linear: bias width mismatch");
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(&vb.data);
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            &vx.data,
            Strides::rows(fin),
            &vw.data,
            Strides::rows(fout),
            T::one(),
            &mut out,
            Strides::rows(fout),
        );
        self.push(
            Tensor::new(vec![n, fout], out),
            Op::Linear { x, w, b },
            &[x, w, b],
        )
    }

    /// Row-wise softmax of a `[R, C]` tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(va.shape.clone(), data);
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    // ---- normalization ---------------------------------------------------

    /// Normalizes each row of `[N, C]` over `C`, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (n, c) = (vx.rows(), vx.cols());
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert_eq!(g.len(), c);
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &vx.data[r * c..(r + 1) * c];
            let (xh, is) = normalize(row, &mut xhat[r * c..(r + 1) * c]);
            let _ = xh;
            inv_std[r] = is;
            for j in 0..c {
                out[r * c + j] = g[j] * xhat[r * c + j] + b[j];
            }
        }
        let out = Tensor::new(vec![n, c], out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalizes each channel of `[C, ...]` over its spatial extent.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (c, n) = (vx.rows(), vx.cols());
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert_eq!(g.len(), c);
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let (_, is) = normalize(&vx.data[ch * n..(ch + 1) * n], &mut xhat[ch * n..(ch + 1) * n]);
            inv_std[ch] = is;
            let (gc, bc) = (g[ch], b[ch]);
            for (o, &h) in out[ch * n..(ch + 1) * n].iter_mut().zip(&xhat[ch * n..(ch + 1) * n]) {
                *o = gc * h + bc;
            }
        }
        let out = Tensor::new(vx.shape.clone(), out);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    // ---- convolution -----------------------------------------------------

    /// 3D convolution of `x: [Ci, D, H, W]` with `w: [Co, Ci·k³]`, zero
    /// "same" padding, no bias. Output `[Co, ⌈D/s⌉, ⌈H/s⌉, ⌈W/s⌉]`.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.shape.len(), 4, "conv3d input must be [C, D, H, W]");
        let ci = vx.shape[0];
        let in_dims = [vx.shape[1], vx.shape[2], vx.shape[3]];
        let out_dims = in_dims.map(|n| spec.out_dim(n));
        let kk = ci * spec.kernel.pow(3);
        assert_eq!(vw.cols(), kk, "conv3d: weight shape does not match input channels");
        let co = vw.rows();
        let n_out: usize = out_dims.iter().product();
        let mut out = vec![T::zero(); co * n_out];
        for_slabs(kk, out_dims, |planes, col| {
            im2col(&vx.data, col, ci, in_dims, out_dims, spec, planes.clone());
            let plane = out_dims[1] * out_dims[2];
            let cols = planes.len() * plane;
            T::gemm(co, kk, cols, T::one(), &vw.data, Strides::rows(kk), col, Strides::rows(cols), T::zero(), &mut out[planes.start * plane..], Strides::rows(n_out));
        });
        let out = Tensor::new(vec![co, out_dims[0], out_dims[1], out_dims[2]], out);
        self.push(
            out,
            Op::Conv3d {
                x,
                w,
                spec,
                in_dims,
                out_dims,
            },
            &[x, w],
        )
    }

    // ---- attention -------------------------------------------------------

    /// Multi-head scaled dot-product attention on already projected inputs:
    /// per head, `softmax(Q_h K_hᵀ / √d_k + bias) V_h`, heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<&[T]>, heads: usize) -> Var {
        let (out, probs) = multi_head_attention(self.value(q), self.value(k), self.value(v), bias, heads);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    // ---- reductions / losses ---------------------------------------------

    /// `Σ x ⊙ weights` as a scalar.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), weights.len());
        let s = vx.data.iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.dot(x, vec![T::one(); n])
    }

    /// `Σ |x − target|` as a scalar.
    pub fn l1_to(&mut self, x: Var, target: &[T]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), target.len());
        let s = vx.data.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum();
        self.push(
            Tensor::scalar(s),
            Op::L1Target {
                x,
                target: target.to_vec(),
            },
            &[x],
        )
    }

    /// Heatmap focal loss on sigmoid probabilities of `logits` against soft
    /// `labels`; see [`crate::predictor::focal_terms`].
    pub fn focal(&mut self, logits: Var, labels: &[T], alpha: f64, beta: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.len(), labels.len());
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(labels.len());
        for (&z, &y) in vl.data.iter().zip(labels) {
            let (l, dz) = crate::predictor::focal_from_logit(z.to_f64_lossy(), y.to_f64_lossy(), alpha, beta);
            total += T::of(l);
            grad.push(T::of(dz));
        }
        self.push(Tensor::scalar(total), Op::Focal { logits, grad }, &[logits])
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            // only leaf gradients are reported; intermediate ones are freed early
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, &g.shape, |d| {
                            for (x, &y) in d.iter_mut().zip(&g.data) {
                                *x += y;
                            }
                        });
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, &g.shape, |d| {
                    for (x, &y) in d.iter_mut().zip(&g.data) {
                        *x += y * s;
                    }
                });
            }
            Op::Relu(a) => {
                let y = &node.value.data;
                accumulate(grads, *a, &g.shape, |d| {
                    for ((x, &gy), &yy) in d.iter_mut().zip(&g.data).zip(y) {
                        if yy > T::zero() {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape.clone();
                accumulate(grads, *a, &shape, |d| {
                    for (x, &y) in d.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, &g.shape, |d| {
                    for ((o, &gy), &m) in d.iter_mut().zip(&g.data).zip(mask) {
                        *o += gy * m;
                    }
                });
            }
            Op::MulAdd { x, mul } => {
                accumulate(grads, *x, &g.shape, |d| {
                    for ((o, &gy), &m) in d.iter_mut().zip(&g.data).zip(mul) {
                        *o += gy * m;
                    }
                });
            }
            Op::Transpose(a) => {
                let shape = self.value(*a).shape.clone();
                let (r, c) = (g.rows(), g.cols()); // output is [c_in, r_in]
                accumulate(grads, *a, &shape, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g.data[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let shape = self.value(*x).shape.clone();
                let c = g.cols();
                accumulate(grads, *x, &shape, |d| {
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g.data[k * c + j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    accumulate(grads, *a, &va.shape, |d| {
                        T::gemm(n, m, k, T::one(), &g.data, Strides::rows(m), &vb.data, Strides::transposed(m), T::one(), d, Strides::rows(k));
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, &vb.shape, |d| {
                        T::gemm(k, n, m, T::one(), &va.data, Strides::transposed(k), &g.data, Strides::rows(m), T::one(), d, Strides::rows(m));
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (vx.rows(), vx.cols(), vw.cols());
                if self.needs(*x) {
                    accumulate(grads, *x, &vx.shape, |d| {
                        T::gemm(n, fout, fin, T::one(), &g.data, Strides::rows(fout), &vw.data, Strides::transposed(fout), T::one(), d, Strides::rows(fin));
                    });
                }
                if self.needs(*w) {
                    accumulate(grads, *w, &vw.shape, |d| {
                        T::gemm(fin, n, fout, T::one(), &vx.data, Strides::transposed(fin), &g.data, Strides::rows(fout), T::one(), d, Strides::rows(fout));
                    });
                }
                if self.needs(*b) {
                    let shape = self.value(*b).shape.clone();
                    accumulate(grads, *b, &shape, |d| {
                        for row in g.data.chunks(fout) {
                            for (x, &y) in d.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                accumulate(grads, *a, &y.shape, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.data.chunks(c)).zip(y.data.chunks(c)) {
                        let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gy), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yy * (gy - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                self.norm_backward(grads, *x, *gamma, *beta, xhat, inv_std, &g.data, c, NormAxis::Rows);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                self.norm_backward(grads, *x, *gamma, *beta, xhat, inv_std, &g.data, n, NormAxis::Channels);
            }
            Op::Conv3d {
                x,
                w,
                spec,
                in_dims,
                out_dims,
            } => {
                let vw = self.value(*w);
                let vx = self.value(*x);
                let co = vw.rows();
                let kk = vw.cols();
                let ci = vx.shape[0];
                let n_out: usize = out_dims.iter().product();
                let plane = out_dims[1] * out_dims[2];
                if self.needs(*w) {
                    accumulate(grads, *w, &vw.shape, |d| {
                        // the patch matrix is rebuilt slab by slab instead of kept
                        for_slabs(kk, *out_dims, |planes, col| {
                            im2col(&vx.data, col, ci, *in_dims, *out_dims, *spec, planes.clone());
                            let cols = planes.len() * plane;
                            let gs = &g.data[planes.start * plane..];
                            T::gemm(co, cols, kk, T::one(), gs, Strides::rows(n_out), col, Strides::transposed(cols), T::one(), d, Strides::rows(kk));
                        });
                    });
                }
                if self.needs(*x) {
                    accumulate(grads, *x, &vx.shape, |d| {
                        for_slabs(kk, *out_dims, |planes, dcol| {
                            let cols = planes.len() * plane;
                            let gs = &g.data[planes.start * plane..];
                            T::gemm(kk, co, cols, T::one(), &vw.data, Strides::transposed(kk), gs, Strides::rows(n_out), T::zero(), dcol, Strides::rows(cols));
                            col2im(dcol, d, ci, *in_dims, *out_dims, *spec, planes.clone());
                        });
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = attention_backward(vq, vk, vv, probs, *heads, g);
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        accumulate(grads, var, &d.shape, |acc| {
                            for (a, &b) in acc.iter_mut().zip(&d.data) {
                                *a += b;
                            }
                        });
                    }
                }
            }
            Op::Dot { x, weights } => {
                let gs = g.item();
                let shape = self.value(*x).shape.clone();
                accumulate(grads, *x, &shape, |d| {
                    for (o, &w) in d.iter_mut().zip(weights) {
                        *o += gs * w;
                    }
                });
            }
            Op::L1Target { x, target } => {
                let gs = g.item();
                let vx = self.value(*x);
                accumulate(grads, *x, &vx.shape, |d| {
                    for ((o, &a), &b) in d.iter_mut().zip(&vx.data).zip(target) {
                        let diff = a - b;
                        if diff > T::zero() {
                            *o += gs;
                        } else if diff < T::zero() {
                            *o -= gs;
                        }
                    }
                });
            }
            Op::Focal { logits, grad } => {
                let gs = g.item();
                let shape = self.value(*logits).shape.clone();
                accumulate(grads, *logits, &shape, |d| {
                    for (o, &dz) in d.iter_mut().zip(grad) {
                        *o += gs * dz;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        g: &[T],
        group: usize,
        axis: NormAxis,
    ) {
        let gam = &self.value(gamma).data;
        if self.needs(gamma) || self.needs(beta) {
            let mut dg = vec![T::zero(); gam.len()];
            let mut db = vec![T::zero(); gam.len()];
            for (grp, (gs, hs)) in g.chunks(group).zip(xhat.chunks(group)).enumerate() {
                match axis {
                    NormAxis::Rows => {
                        for ((d, b), (&gv, &hv)) in dg.iter_mut().zip(db.iter_mut()).zip(gs.iter().zip(hs)) {
                            *d += gv * hv;
                            *b += gv;
                        }
                    }
                    NormAxis::Channels => {
                        dg[grp] += lane_dot(gs, hs);
                        db[grp] += lane_sum(gs);
                    }
                }
            }
            let shape = vec![gam.len()];
            if self.needs(gamma) {
                accumulate(grads, gamma, &shape, |d| {
                    for (o, &v) in d.iter_mut().zip(&dg) {
                        *o += v;
                    }
                });
            }
            if self.needs(beta) {
                accumulate(grads, beta, &shape, |d| {
                    for (o, &v) in d.iter_mut().zip(&db) {
                        *o += v;
                    }
                });
            }
        }
        if self.needs(x) {
            let shape = self.value(x).shape.clone();
            let n = T::of(group as f64);
            accumulate(grads, x, &shape, |d| {
                let mut dh = vec![T::zero(); group];
                for (grp, ((ds, gs), hs)) in d.chunks_mut(group).zip(g.chunks(group)).zip(xhat.chunks(group)).enumerate() {
                    match axis {
                        NormAxis::Rows => {
                            for ((o, &gv), &gm) in dh.iter_mut().zip(gs).zip(gam) {
                                *o = gv * gm;
                            }
                        }
                        NormAxis::Channels => {
                            let gm = gam[grp];
                            for (o, &gv) in dh.iter_mut().zip(gs) {
                                *o = gv * gm;
                            }
                        }
                    }
                    let mean_dh = lane_sum(&dh) / n;
                    let mean_dh_h = lane_dot(&dh, hs) / n;
                    let is = inv_std[grp];
                    for ((o, &a), &h) in ds.iter_mut().zip(&dh).zip(hs) {
                        *o += is * (a - mean_dh - h * mean_dh_h);
                    }
                }
            });
        }
    }
}

const LANES: usize = 8;

/// Sum with independent partial accumulators, so the loop vectorizes.
fn lane_sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().copied().sum::<T>()
}

fn lane_dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); LANES];
    let (cx, cy) = (x.chunks_exact(LANES), y.chunks_exact(LANES));
    let tail: T = cx.remainder().iter().zip(cy.remainder()).map(|(&a, &b)| a * b).sum();
    for (a8, b8) in cx.zip(cy) {
        for ((a, &u), &v) in acc.iter_mut().zip(a8).zip(b8) {
            *a += u * v;
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Sum of squared deviations from `mean`.
fn lane_sq_dev<T: Real>(x: &[T], mean: T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail: T = chunks.remainder().iter().map(|&v| (v - mean) * (v - mean)).sum();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += (v - mean) * (v - mean);
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

#[derive(Clone, Copy)]
enum NormAxis {
    /// One group per row, affine parameters indexed by column.
    Rows,
    /// One group per channel (row), affine parameters indexed by channel.
    Channels,
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()));
    }
    f(&mut slot.as_mut().unwrap().data);
}

/// Writes `(x − mean) / sqrt(var + eps)` into `out`, returning the mean and
/// the inverse standard deviation.
fn normalize<T: Real>(x: &[T], out: &mut [T]) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mean = lane_sum(x) / n;
    let var = lane_sq_dev(x, mean) / n;
    let inv_std = T::one() / (var + T::of(NORM_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    (mean, inv_std)
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head attention core, returning the concatenated head outputs
/// `[Nq, C]` and the attention probabilities `[heads, Nq, Nk]`.
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&[T]>,
    heads: usize,
) -> (Tensor<T>, Vec<T>) {
    let (nq, c) = (q.rows(), q.cols());
    let nk = k.rows();
    assert_eq!(k.cols(), c, "attention: key width mismatch");
    assert_eq!(v.rows(), nk, "attention: value count mismatch");
    assert_eq!(v.cols(), c, "attention: value width mismatch");
    assert!(heads >= 1 && c % heads == 0, "attention: heads must divide width");
    if let Some(b) = bias {
        assert_eq!(b.len(), nq * nk, "attention: bias shape mismatch");
    }
    let dk = c / heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut out = vec![T::zero(); nq * c];
    let mut probs = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let o = h * dk;
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        T::gemm(nq, dk, nk, scale, &q.data[o..], Strides::rows(c), &k.data[o..], Strides::transposed(c), T::zero(), p, Strides::rows(nk));
        if let Some(b) = bias {
            for (x, &y) in p.iter_mut().zip(b) {
                *x += y;
            }
        }
        for row in p.chunks_mut(nk) {
            softmax_in_place(row);
        }
        T::gemm(nq, nk, dk, T::one(), p, Strides::rows(nk), &v.data[o..], Strides::rows(c), T::zero(), &mut out[o..], Strides::rows(c));
    }
    (Tensor::new(vec![nq, c], out), probs)
}

fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    heads: usize,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nq, c) = (q.rows(), q.cols());
    let nk = k.rows();
    let dk = c / heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut dq = vec![T::zero(); nq * c];
    let mut dkey = vec![T::zero(); nk * c];
    let mut dv = vec![T::zero(); nk * c];
    let mut dp = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let o = h * dk;
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dP = dOut_h · V_hᵀ
        T::gemm(nq, dk, nk, T::one(), &g.data[o..], Strides::rows(c), &v.data[o..], Strides::transposed(c), T::zero(), &mut dp, Strides::rows(nk));
        // dV_h = Pᵀ · dOut_h
        T::gemm(nk, nq, dk, T::one(), p, Strides::transposed(nk), &g.data[o..], Strides::rows(c), T::zero(), &mut dv[o..], Strides::rows(c));
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (dprow, prow) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
            let s: T = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in dprow.iter_mut().zip(prow) {
                *d = pp * (*d - s);
            }
        }
        T::gemm(nq, nk, dk, scale, &dp, Strides::rows(nk), &k.data[o..], Strides::rows(c), T::zero(), &mut dq[o..], Strides::rows(c));
        T::gemm(nk, nq, dk, scale, &dp, Strides::transposed(nk), &q.data[o..], Strides::rows(c), T::zero(), &mut dkey[o..], Strides::rows(c));
    }
    (
        Tensor::new(vec![nq, c], dq),
        Tensor::new(vec![nk, c], dkey),
        Tensor::new(vec![nk, c], dv),
    )
}

/// Calls `f(planes, buffer)` for consecutive ranges of output planes whose
/// patch matrix fits the scratch bound; `buffer` holds `kk` rows for them.
fn for_slabs<T: Real>(kk: usize, out_dims: [usize; 3], mut f: impl FnMut(std::ops::Range<usize>, &mut [T])) {
    let plane = out_dims[1] * out_dims[2];
    let slab = (CONV_SLAB_ELEMS / (kk * plane).max(1)).clamp(1, out_dims[0].max(1));
    T::with_scratch(0, |buf| {
        let mut z0 = 0;
        while z0 < out_dims[0] {
            let z1 = (z0 + slab).min(out_dims[0]);
            let len = kk * (z1 - z0) * plane;
            if buf.len() < len {
                buf.resize(len, T::zero());
            }
            f(z0..z1, &mut buf[..len]);
            z0 = z1;
        }
    });
}

/// Lowers output planes `planes` of `x: [Ci, D, H, W]` into
/// `[Ci·k³, planes·Ho·Wo]` patch columns written to `col`.
fn im2col<T: Real>(
    x: &[T],
    col: &mut [T],
    ci: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    spec: ConvSpec,
    planes: std::ops::Range<usize>,
) {
    let [d, h, w] = in_dims;
    let [_, oh, ow] = out_dims;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding() as isize;
    let z0 = planes.start;
    let n_out = planes.len() * oh * ow;
    debug_assert_eq!(col.len(), ci * k * k * k * n_out);
    col.fill(T::zero());
    let mut row = 0;
    for c in 0..ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut col[row * n_out..(row + 1) * n_out];
                    for oz in planes.clone() {
                        let iz = (oz * s) as isize - p + kz as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s) as isize - p + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            let out = &mut dst[((oz - z0) * oh + oy) * ow..][..ow];
                            if s == 1 {
                                let shift = kx as isize - p;
                                let lo = (-shift).max(0) as usize;
                                let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                if lo < hi {
                                    let a = (lo as isize + shift) as usize;
                                    out[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                                }
                            } else {
                                for (ox, o) in out.iter_mut().enumerate() {
                                    let ix = (ox * s) as isize - p + kx as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *o = src[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients of output `planes`
/// back onto the input.
fn col2im<T: Real>(
    col: &[T],
    dx: &mut [T],
    ci: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    spec: ConvSpec,
    planes: std::ops::Range<usize>,
) {
    let [d, h, w] = in_dims;
    let [_, oh, ow] = out_dims;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding() as isize;
    let z0 = planes.start;
    let n_out = planes.len() * oh * ow;
    let mut row = 0;
    for c in 0..ci {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &col[row * n_out..(row + 1) * n_out];
                    for oz in planes.clone() {
                        let iz = (oz * s) as isize - p + kz as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s) as isize - p + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            let gin = &src[((oz - z0) * oh + oy) * ow..][..ow];
                            if s == 1 {
                                let shift = kx as isize - p;
                                let lo = (-shift).max(0) as usize;
                                let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                if lo < hi {
                                    let a = (lo as isize + shift) as usize;
                                    for (o, &gv) in dst[a..a + (hi - lo)].iter_mut().zip(&gin[lo..hi]) {
                                        *o += gv;
                                    }
                                }
                            } else {
                                for (ox, &gv) in gin.iter().enumerate() {
                                    let ix = (ox * s) as isize - p + kx as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst[ix as usize] += gv;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf (constant, variable or parameter).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a bound parameter; `None` if it did not influence the loss.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Adds every parameter gradient into `acc`, scaled by `weight`.
    pub fn accumulate_into(&self, acc: &mut ParamSet<T>, weight: T) {
        for (name, v) in &self.params {
            if let (Some(g), Some(dst)) = (self.get(*v), acc.get_mut(name)) {
                for (a, &b) in dst.data.iter_mut().zip(&g.data) {
                    *a += weight * b;
                }
            }
        }
    }
}
