//! Recording tape for reverse-mode differentiation.
//!
//! Nodes are appended in forward order, so ids are topologically sorted and
//! every input id is strictly smaller than the node that consumes it.
//! `backward` walks ids in descending order exactly once, accumulating
//! gradients into per-node slots, and returns the gradients of all named
//! leaves. A tape is single-owner; tensors from one tape must not be fed to
//! another (detected via a per-tape stamp).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor, TensorError};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle of a tracked tensor: which tape, which node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) id: usize,
}

#[derive(Debug, Clone)]
enum Op<E: Real> {
    /// Named parameter leaf; gradients are collected for these.
    Leaf(String),
    /// Internalized constant (no gradient).
    Const,
    /// inputs: [x, w] or [x, w, b]; x is [n, i] or [i], w is [i, o], b is [o]
    Dense,
    /// inputs: [x, w] or [x, w, b]; x [n,c,h,w], w [co,ci,3,3], zero pad 1
    Conv2d { stride: usize },
    LeakyRelu { slope: E },
    InstanceNorm { eps: E },
    /// inputs: [x, gamma, beta]; per-channel scale/shift of normalized x
    AdaIn { eps: E },
    Upsample2x,
    Add,
    Sub,
    Mul,
    ScalarMul { k: E },
    /// rank-1 window [start, start+len) of the input
    Slice { start: usize },
    Mean,
    AbsMean,
    SquareMean,
    Sigmoid,
    Tanh,
    LogSigmoid,
}

struct Node<E: Real> {
    op: Op<E>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<E>,
}

/// Named gradient map produced by [`Tape::backward`].
pub type Gradients<E> = BTreeMap<String, Tensor<E>>;

pub struct Tape<E: Real = f32> {
    stamp: u64,
    nodes: Vec<Node<E>>,
    leaf_names: Vec<String>,
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Self {
            stamp: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<E>, inputs: Vec<usize>, shape: Vec<usize>, value: Vec<E>) -> Tensor<E> {
        let id = self.nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        let t = Tensor::raw(shape.clone(), value.clone()).with_node(NodeRef {
            tape: self.stamp,
            id,
        });
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
        });
        t
    }

    /// Node id of `t` on this tape, internalizing untracked values as consts.
    fn internalize(&mut self, t: &Tensor<E>) -> Result<usize, TensorError> {
        match t.node() {
            Some(n) if n.tape == self.stamp => Ok(n.id),
            Some(_) => Err(TensorError::ForeignTape),
            None => {
                let id = self.nodes.len();
                self.nodes.push(Node {
                    op: Op::Const,
                    inputs: vec![],
                    shape: t.shape().to_vec(),
                    value: t.data().to_vec(),
                });
                Ok(id)
            }
        }
    }

    /// Pre-internalizes a constant so repeated uses share one node.
    pub fn constant(&mut self, value: &Tensor<E>) -> Tensor<E> {
        self.push(
            Op::Const,
            vec![],
            value.shape().to_vec(),
            value.data().to_vec(),
        )
    }

    /// Registers a named parameter leaf. Gradients are reported against the
    /// given name by `backward`.
    pub fn leaf(&mut self, name: impl Into<String>, value: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let name = name.into();
        if self.leaf_names.iter().any(|n| n == &name) {
            return Err(TensorError::DuplicateLeaf(name));
        }
        self.leaf_names.push(name.clone());
        Ok(self.push(
            Op::Leaf(name),
            vec![],
            value.shape().to_vec(),
            value.data().to_vec(),
        ))
    }

    // ---- op catalog -----------------------------------------------------

    /// Matrix multiply plus optional bias. `x` is `[n, i]` or `[i]`,
    /// `w` is `[i, o]`, `b` is `[o]`.
    pub fn dense(
        &mut self,
        x: &Tensor<E>,
        w: &Tensor<E>,
        b: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>, TensorError> {
        if w.shape().len() != 2 {
            return Err(TensorError::BadShape {
                op: "dense",
                shape: w.shape().to_vec(),
                detail: "weight must be rank 2".into(),
            });
        }
        let (i, o) = (w.shape()[0], w.shape()[1]);
        let (n, vector_input) = match x.shape() {
            [xi] if *xi == i => (1usize, true),
            [n, xi] if *xi == i => (*n, false),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "dense",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        if let Some(b) = b {
            if b.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "dense bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![o],
                });
            }
        }
        let xd = x.data();
        let wd = w.data();
        let mut out = vec![E::zero(); n * o];
        for r in 0..n {
            for (ii, &xv) in xd[r * i..(r + 1) * i].iter().enumerate() {
                let wrow = &wd[ii * o..(ii + 1) * o];
                let orow = &mut out[r * o..(r + 1) * o];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov = *ov + xv * wv;
                }
            }
            if let Some(b) = b {
                for (ov, &bv) in out[r * o..(r + 1) * o].iter_mut().zip(b.data()) {
                    *ov = *ov + bv;
                }
            }
        }
        let shape = if vector_input { vec![o] } else { vec![n, o] };
        let mut inputs = vec![self.internalize(x)?, self.internalize(w)?];
        if let Some(b) = b {
            inputs.push(self.internalize(b)?);
        }
        Ok(self.push(Op::Dense, inputs, shape, out))
    }

    /// 3x3 convolution, zero padding 1, stride 1 or 2, optional bias.
    /// `x` is `[n, ci, h, w]`, `kernel` is `[co, ci, 3, 3]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor<E>,
        kernel: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
    ) -> Result<Tensor<E>, TensorError> {
        if stride != 1 && stride != 2 {
            return Err(TensorError::BadAttr {
                op: "conv2d",
                detail: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let (n, ci, h, w) = match x.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => {
                return Err(TensorError::BadShape {
                    op: "conv2d",
                    shape: x.shape().to_vec(),
                    detail: "input must be rank 4".into(),
                })
            }
        };
        let co = match kernel.shape() {
            [co, kci, 3, 3] if *kci == ci => *co,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d kernel",
                    lhs: kernel.shape().to_vec(),
                    rhs: vec![0, ci, 3, 3],
                })
            }
        };
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![co],
                });
            }
        }
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let out = conv2d_forward(x.data(), kernel.data(), bias.map(|b| b.data()), n, ci, h, w, co, stride);
        let mut inputs = vec![self.internalize(x)?, self.internalize(kernel)?];
        if let Some(b) = bias {
            inputs.push(self.internalize(b)?);
        }
        Ok(self.push(Op::Conv2d { stride }, inputs, vec![n, co, oh, ow], out))
    }

    pub fn leaky_relu(&mut self, x: &Tensor<E>, slope: E) -> Result<Tensor<E>, TensorError> {
        let out = x
            .data()
            .iter()
            .map(|&v| if v > E::zero() { v } else { v * slope })
            .collect();
        let id = self.internalize(x)?;
        Ok(self.push(Op::LeakyRelu { slope }, vec![id], x.shape().to_vec(), out))
    }

    /// Per-channel normalization over spatial positions of a `[n, c, h, w]`
    /// input. A 1x1 spatial extent has zero variance; epsilon keeps the
    /// division finite and the output collapses to zero (documented, not an
    /// error).
    pub fn instance_norm(&mut self, x: &Tensor<E>, eps: E) -> Result<Tensor<E>, TensorError> {
        let dims = nchw(x, "instance_norm")?;
        let out = instance_norm_forward(x.data(), dims, eps);
        let id = self.internalize(x)?;
        Ok(self.push(Op::InstanceNorm { eps }, vec![id], x.shape().to_vec(), out))
    }

    /// Instance normalization followed by an externally supplied per-channel
    /// scale `gamma` and shift `beta` (each of shape `[c]`). With gamma = 1
    /// and beta = 0 this equals `instance_norm` exactly.
    pub fn adain(
        &mut self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<Tensor<E>, TensorError> {
        let dims = nchw(x, "adain")?;
        let (_, c, _, _) = dims;
        for (name, t) in [("adain gamma", gamma), ("adain beta", beta)] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: t.shape().to_vec(),
                    rhs: vec![c],
                });
            }
        }
        let normed = instance_norm_forward(x.data(), dims, eps);
        let (n, c, h, w) = dims;
        let hw = h * w;
        let mut out = normed;
        for ni in 0..n {
            for ch in 0..c {
                let g = gamma.data()[ch];
                let b = beta.data()[ch];
                for v in &mut out[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                    *v = *v * g + b;
                }
            }
        }
        let inputs = vec![
            self.internalize(x)?,
            self.internalize(gamma)?,
            self.internalize(beta)?,
        ];
        Ok(self.push(Op::AdaIn { eps }, inputs, x.shape().to_vec(), out))
    }

    /// Nearest-neighbour x2 upsampling of a `[n, c, h, w]` input.
    pub fn upsample_nearest(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (n, c, h, w) = nchw(x, "upsample_nearest")?;
        let mut out = vec![E::zero(); n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for img in 0..n * c {
            let src = &x.data()[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let id = self.internalize(x)?;
        Ok(self.push(Op::Upsample2x, vec![id], vec![n, c, oh, ow], out))
    }

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    fn binary(
        &mut self,
        a: &Tensor<E>,
        b: &Tensor<E>,
        op: Op<E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let inputs = vec![self.internalize(a)?, self.internalize(b)?];
        Ok(self.push(op, inputs, a.shape().to_vec(), out))
    }

    pub fn scalar_mul(&mut self, x: &Tensor<E>, k: E) -> Result<Tensor<E>, TensorError> {
        let out = x.data().iter().map(|&v| v * k).collect();
        let id = self.internalize(x)?;
        Ok(self.push(Op::ScalarMul { k }, vec![id], x.shape().to_vec(), out))
    }

    /// Contiguous window `[start, start+len)` of a rank-1 tensor.
    pub fn slice(&mut self, x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>, TensorError> {
        if x.shape().len() != 1 || start + len > x.numel() {
            return Err(TensorError::BadShape {
                op: "slice",
                shape: x.shape().to_vec(),
                detail: format!("window [{start}, {})", start + len),
            });
        }
        let out = x.data()[start..start + len].to_vec();
        let id = self.internalize(x)?;
        Ok(self.push(Op::Slice { start }, vec![id], vec![len], out))
    }

    pub fn mean(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.reduce(x, Op::Mean, |v| v, |s| s)
    }

    /// Mean absolute value (L1).
    pub fn abs_mean(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.reduce(x, Op::AbsMean, |v| v.abs(), |s| s)
    }

    /// Mean squared value (L2).
    pub fn square_mean(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.reduce(x, Op::SquareMean, |v| v * v, |s| s)
    }

    fn reduce(
        &mut self,
        x: &Tensor<E>,
        op: Op<E>,
        map: impl Fn(E) -> E,
        fin: impl Fn(E) -> E,
    ) -> Result<Tensor<E>, TensorError> {
        let mut s = E::zero();
        for &v in x.data() {
            s = s + map(v);
        }
        let out = fin(s / E::of(x.numel() as f64));
        let id = self.internalize(x)?;
        Ok(self.push(op, vec![id], vec![1], vec![out]))
    }

    pub fn sigmoid(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let id = self.internalize(x)?;
        Ok(self.push(Op::Sigmoid, vec![id], x.shape().to_vec(), out))
    }

    pub fn tanh(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let out = x.data().iter().map(|&v| v.tanh()).collect();
        let id = self.internalize(x)?;
        Ok(self.push(Op::Tanh, vec![id], x.shape().to_vec(), out))
    }

    /// Numerically stable log(sigmoid(x)); log(1 - sigmoid(x)) is
    /// `log_sigmoid(-x)`.
    pub fn log_sigmoid(&mut self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let out = x.data().iter().map(|&v| log_sigmoid(v)).collect();
        let id = self.internalize(x)?;
        Ok(self.push(Op::LogSigmoid, vec![id], x.shape().to_vec(), out))
    }

    /// Smallest distance of any kinked op's input (leaky_relu, abs_mean)
    /// from its kink at zero, over everything recorded so far. Central
    /// finite differences are only valid when this clearance exceeds the
    /// probe step times the point's parameter sensitivity; the gradient
    /// oracle uses it to reject evaluation points where the loss is not
    /// smooth within the step neighbourhood.
    pub fn kink_clearance(&self) -> f64 {
        let mut clearance = f64::INFINITY;
        for node in &self.nodes {
            if matches!(node.op, Op::LeakyRelu { .. } | Op::AbsMean) {
                for &v in &self.nodes[node.inputs[0]].value {
                    clearance = clearance.min(v.to64().abs());
                }
            }
        }
        clearance
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the tape and returns the
    /// gradient of the loss with respect to every named leaf (zeros for
    /// leaves the loss does not reach).
    pub fn backward(self, loss: &Tensor<E>) -> Result<Gradients<E>, TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let loss_id = match loss.node() {
            Some(n) if n.tape == self.stamp => n.id,
            Some(_) => return Err(TensorError::ForeignTape),
            None => return Err(TensorError::NotOnTape),
        };
        let mut slots: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss_id] = Some(vec![E::one()]);

        for id in (0..=loss_id).rev() {
            let Some(grad) = slots[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(name) => {
                    // Re-deposit: harvested below in leaf order.
                    slots[id] = Some(grad);
                    let _ = name;
                }
                Op::Const => {}
                Op::Dense => self.backward_dense(id, &grad, &mut slots),
                Op::Conv2d { stride } => self.backward_conv2d(id, *stride, &grad, &mut slots),
                Op::LeakyRelu { slope } => {
                    let x = &self.nodes[node.inputs[0]];
                    let g = x
                        .value
                        .iter()
                        .zip(&grad)
                        .map(|(&v, &g)| if v > E::zero() { g } else { g * *slope })
                        .collect();
                    accumulate(&mut slots, node.inputs[0], g);
                }
                Op::InstanceNorm { eps } => {
                    let xin = node.inputs[0];
                    let dims = nchw_dims(&self.nodes[xin].shape);
                    let gx = instance_norm_backward(&self.nodes[xin].value, dims, *eps, &grad, None);
                    accumulate(&mut slots, xin, gx.0);
                }
                Op::AdaIn { eps } => {
                    let (xin, gin, bin) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let dims = nchw_dims(&self.nodes[xin].shape);
                    let gamma = &self.nodes[gin].value;
                    let (gx, gg, gb) =
                        instance_norm_backward(&self.nodes[xin].value, dims, *eps, &grad, Some(gamma));
                    accumulate(&mut slots, xin, gx);
                    accumulate(&mut slots, gin, gg.expect("adain gamma grad"));
                    accumulate(&mut slots, bin, gb.expect("adain beta grad"));
                }
                Op::Upsample2x => {
                    let xin = node.inputs[0];
                    let (n, c, h, w) = nchw_dims(&self.nodes[xin].shape);
                    let ow = 2 * w;
                    let mut gx = vec![E::zero(); n * c * h * w];
                    for img in 0..n * c {
                        let src = &grad[img * 4 * h * w..(img + 1) * 4 * h * w];
                        let dst = &mut gx[img * h * w..(img + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..ow {
                                dst[(y / 2) * w + xx / 2] = dst[(y / 2) * w + xx / 2] + src[y * ow + xx];
                            }
                        }
                    }
                    accumulate(&mut slots, xin, gx);
                }
                Op::Add => {
                    accumulate(&mut slots, node.inputs[0], grad.clone());
                    accumulate(&mut slots, node.inputs[1], grad);
                }
                Op::Sub => {
                    let neg = grad.iter().map(|&g| -g).collect();
                    accumulate(&mut slots, node.inputs[0], grad);
                    accumulate(&mut slots, node.inputs[1], neg);
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let ga = self.nodes[b].value.iter().zip(&grad).map(|(&v, &g)| v * g).collect();
                    let gb = self.nodes[a].value.iter().zip(&grad).map(|(&v, &g)| v * g).collect();
                    accumulate(&mut slots, a, ga);
                    accumulate(&mut slots, b, gb);
                }
                Op::ScalarMul { k } => {
                    let g = grad.iter().map(|&g| g * *k).collect();
                    accumulate(&mut slots, node.inputs[0], g);
                }
                Op::Slice { start } => {
                    let xin = node.inputs[0];
                    let mut gx = vec![E::zero(); self.nodes[xin].value.len()];
                    for (i, &g) in grad.iter().enumerate() {
                        gx[start + i] = g;
                    }
                    accumulate(&mut slots, xin, gx);
                }
                Op::Mean => {
                    let xin = node.inputs[0];
                    let k = grad[0] / E::of(self.nodes[xin].value.len() as f64);
                    accumulate(&mut slots, xin, vec![k; self.nodes[xin].value.len()]);
                }
                Op::AbsMean => {
                    let xin = node.inputs[0];
                    let x = &self.nodes[xin].value;
                    let k = grad[0] / E::of(x.len() as f64);
                    let g = x
                        .iter()
                        .map(|&v| {
                            if v > E::zero() {
                                k
                            } else if v < E::zero() {
                                -k
                            } else {
                                E::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut slots, xin, g);
                }
                Op::SquareMean => {
                    let xin = node.inputs[0];
                    let x = &self.nodes[xin].value;
                    let k = E::of(2.0) * grad[0] / E::of(x.len() as f64);
                    let g = x.iter().map(|&v| v * k).collect();
                    accumulate(&mut slots, xin, g);
                }
                Op::Sigmoid => {
                    let g = node
                        .value
                        .iter()
                        .zip(&grad)
                        .map(|(&s, &g)| g * s * (E::one() - s))
                        .collect();
                    accumulate(&mut slots, node.inputs[0], g);
                }
                Op::Tanh => {
                    let g = node
                        .value
                        .iter()
                        .zip(&grad)
                        .map(|(&t, &g)| g * (E::one() - t * t))
                        .collect();
                    accumulate(&mut slots, node.inputs[0], g);
                }
                Op::LogSigmoid => {
                    let xin = node.inputs[0];
                    let g = self.nodes[xin]
                        .value
                        .iter()
                        .zip(&grad)
                        .map(|(&v, &g)| g * sigmoid(-v))
                        .collect();
                    accumulate(&mut slots, xin, g);
                }
            }
        }

        let mut grads = Gradients::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(name) = &node.op {
                let g = match slots[id].take() {
                    Some(v) => Tensor::raw(node.shape.clone(), v),
                    None => Tensor::zeros(&node.shape),
                };
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }

    fn backward_dense(&self, id: usize, grad: &[E], slots: &mut Vec<Option<Vec<E>>>) {
        let node = &self.nodes[id];
        let (xid, wid) = (node.inputs[0], node.inputs[1]);
        let (i, o) = {
            let ws = &self.nodes[wid].shape;
            (ws[0], ws[1])
        };
        let n = self.nodes[xid].value.len() / i;
        let xd = &self.nodes[xid].value;
        let wd = &self.nodes[wid].value;

        let mut gx = vec![E::zero(); n * i];
        let mut gw = vec![E::zero(); i * o];
        for r in 0..n {
            let grow = &grad[r * o..(r + 1) * o];
            for ii in 0..i {
                let wrow = &wd[ii * o..(ii + 1) * o];
                let mut acc = E::zero();
                for (g, w) in grow.iter().zip(wrow) {
                    acc = acc + *g * *w;
                }
                gx[r * i + ii] = gx[r * i + ii] + acc;
                let xv = xd[r * i + ii];
                for (gwv, g) in gw[ii * o..(ii + 1) * o].iter_mut().zip(grow) {
                    *gwv = *gwv + xv * *g;
                }
            }
        }
        accumulate(slots, xid, gx);
        accumulate(slots, wid, gw);
        if let Some(&bid) = node.inputs.get(2) {
            let mut gb = vec![E::zero(); o];
            for r in 0..n {
                for (gbv, g) in gb.iter_mut().zip(&grad[r * o..(r + 1) * o]) {
                    *gbv = *gbv + *g;
                }
            }
            accumulate(slots, bid, gb);
        }
    }

    fn backward_conv2d(&self, id: usize, stride: usize, grad: &[E], slots: &mut Vec<Option<Vec<E>>>) {
        let node = &self.nodes[id];
        let (xid, wid) = (node.inputs[0], node.inputs[1]);
        let (n, ci, h, w) = nchw_dims(&self.nodes[xid].shape);
        let co = self.nodes[wid].shape[0];
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let xd = &self.nodes[xid].value;
        let kd = &self.nodes[wid].value;

        let mut gx = vec![E::zero(); xd.len()];
        let mut gk = vec![E::zero(); kd.len()];
        let mut gb = vec![E::zero(); co];
        for ni in 0..n {
            for oc in 0..co {
                let obase = (ni * co + oc) * oh * ow;
                for &g in &grad[obase..obase + oh * ow] {
                    gb[oc] = gb[oc] + g;
                }
                for ic in 0..ci {
                    let xbase = (ni * ci + ic) * h * w;
                    let kbase = (oc * ci + ic) * 9;
                    for ky in 0..3usize {
                        let sy = ky as isize - 1;
                        let (oy0, oy1) = conv_span(stride, sy, h, oh);
                        for kx in 0..3usize {
                            let sx = kx as isize - 1;
                            let (ox0, ox1) = conv_span(stride, sx, w, ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let kidx = kbase + ky * 3 + kx;
                            let wgt = kd[kidx];
                            let mut kacc = E::zero();
                            for oy in oy0..oy1 {
                                let iy = ((oy * stride) as isize + sy) as usize;
                                let xrow = xbase as isize + (iy * w) as isize + sx;
                                let orow = obase + oy * ow;
                                if stride == 1 {
                                    let xs0 = (xrow + ox0 as isize) as usize;
                                    let span = ox1 - ox0;
                                    let gs = &grad[orow + ox0..orow + ox1];
                                    let xs = &xd[xs0..xs0 + span];
                                    let gxs = &mut gx[xs0..xs0 + span];
                                    for ((gxv, &xv), &g) in gxs.iter_mut().zip(xs).zip(gs) {
                                        kacc = kacc + g * xv;
                                        *gxv = *gxv + g * wgt;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let xi = (xrow + (ox * stride) as isize) as usize;
                                        let g = grad[orow + ox];
                                        kacc = kacc + g * xd[xi];
                                        gx[xi] = gx[xi] + g * wgt;
                                    }
                                }
                            }
                            gk[kidx] = gk[kidx] + kacc;
                        }
                    }
                }
            }
        }
        accumulate(slots, xid, gx);
        accumulate(slots, wid, gk);
        if let Some(&bid) = node.inputs.get(2) {
            accumulate(slots, bid, gb);
        }
    }
}

fn accumulate<E: Real>(slots: &mut Vec<Option<Vec<E>>>, id: usize, contrib: Vec<E>) {
    match &mut slots[id] {
        Some(slot) => {
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s = *s + c;
            }
        }
        empty => *empty = Some(contrib),
    }
}

fn nchw<E: Real>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(TensorError::BadShape {
            op,
            shape: t.shape().to_vec(),
            detail: "input must be rank 4".into(),
        }),
    }
}

fn nchw_dims(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn sigmoid<E: Real>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

fn log_sigmoid<E: Real>(v: E) -> E {
    // min(v, 0) - ln(1 + e^{-|v|})
    let m = if v < E::zero() { v } else { E::zero() };
    m - (E::one() + (-v.abs()).exp()).ln()
}

/// Output positions `o` with `0 <= o*stride + off < in_len`, clipped to
/// `out_len`, as a half-open range.
fn conv_span(stride: usize, off: isize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(stride)
    } else {
        0
    };
    let hi = if (in_len as isize) > off {
        (in_len as isize - off - 1) as usize / stride + 1
    } else {
        0
    };
    (lo.min(out_len), hi.min(out_len))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<E: Real>(
    x: &[E],
    k: &[E],
    bias: Option<&[E]>,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    stride: usize,
) -> Vec<E> {
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = vec![E::zero(); n * co * oh * ow];
    for ni in 0..n {
        for oc in 0..co {
            let obase = (ni * co + oc) * oh * ow;
            if let Some(b) = bias {
                for v in &mut out[obase..obase + oh * ow] {
                    *v = b[oc];
                }
            }
            for ic in 0..ci {
                let xbase = (ni * ci + ic) * h * w;
                let kbase = (oc * ci + ic) * 9;
                // Shift-and-add: one weighted row pass per kernel offset.
                for ky in 0..3usize {
                    let sy = ky as isize - 1;
                    let (oy0, oy1) = conv_span(stride, sy, h, oh);
                    for kx in 0..3usize {
                        let sx = kx as isize - 1;
                        let (ox0, ox1) = conv_span(stride, sx, w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wgt = k[kbase + ky * 3 + kx];
                        for oy in oy0..oy1 {
                            let iy = ((oy * stride) as isize + sy) as usize;
                            let xrow = xbase + iy * w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let xs0 = (xrow as isize + sx + ox0 as isize) as usize;
                                let xs = &x[xs0..xs0 + (ox1 - ox0)];
                                let os = &mut out[orow + ox0..orow + ox1];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o = *o + wgt * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let xi = (xrow as isize + (ox * stride) as isize + sx) as usize;
                                    out[orow + ox] = out[orow + ox] + wgt * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn instance_norm_forward<E: Real>(x: &[E], dims: (usize, usize, usize, usize), eps: E) -> Vec<E> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let mut out = vec![E::zero(); x.len()];
    for img in 0..n * c {
        let src = &x[img * hw..(img + 1) * hw];
        let mut mean = E::zero();
        for &v in src {
            mean = mean + v;
        }
        mean = mean / E::of(hw as f64);
        let mut var = E::zero();
        for &v in src {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / E::of(hw as f64);
        let inv = E::one() / (var + eps).sqrt();
        for (o, &v) in out[img * hw..(img + 1) * hw].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
    }
    out
}

/// Shared backward for instance_norm and adain. `gamma` present means the
/// incoming grad is with respect to `gamma * xhat + beta`; returns
/// (dx, dgamma, dbeta) with the latter two `None` in the plain case.
#[allow(clippy::type_complexity)]
fn instance_norm_backward<E: Real>(
    x: &[E],
    dims: (usize, usize, usize, usize),
    eps: E,
    grad: &[E],
    gamma: Option<&[E]>,
) -> (Vec<E>, Option<Vec<E>>, Option<Vec<E>>) {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let hw_e = E::of(hw as f64);
    let mut gx = vec![E::zero(); x.len()];
    let mut ggamma = gamma.map(|_| vec![E::zero(); c]);
    let mut gbeta = gamma.map(|_| vec![E::zero(); c]);

    for ni in 0..n {
        for ch in 0..c {
            let img = ni * c + ch;
            let src = &x[img * hw..(img + 1) * hw];
            let gout = &grad[img * hw..(img + 1) * hw];

            let mut mean = E::zero();
            for &v in src {
                mean = mean + v;
            }
            mean = mean / hw_e;
            let mut var = E::zero();
            for &v in src {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / hw_e;
            let inv = E::one() / (var + eps).sqrt();

            // Gradient w.r.t. the normalized value.
            let gscale = gamma.map(|g| g[ch]).unwrap_or_else(E::one);
            if let (Some(gg), Some(gb)) = (ggamma.as_mut(), gbeta.as_mut()) {
                for (&v, &g) in src.iter().zip(gout) {
                    let xhat = (v - mean) * inv;
                    gg[ch] = gg[ch] + g * xhat;
                    gb[ch] = gb[ch] + g;
                }
            }

            let mut gmean = E::zero();
            let mut gdot = E::zero();
            for (&v, &g) in src.iter().zip(gout) {
                let gh = g * gscale;
                let xhat = (v - mean) * inv;
                gmean = gmean + gh;
                gdot = gdot + gh * xhat;
            }
            gmean = gmean / hw_e;
            gdot = gdot / hw_e;
            for ((o, &v), &g) in gx[img * hw..(img + 1) * hw].iter_mut().zip(src).zip(gout) {
                let gh = g * gscale;
                let xhat = (v - mean) * inv;
                *o = inv * (gh - gmean - xhat * gdot);
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_matches_definition() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[2], &[-1.0, 2.0]);
        let y = tape.leaky_relu(&x, 0.2).unwrap();
        assert_eq!(y.data(), &[-0.2, 2.0]);
    }

    #[test]
    fn instance_norm_of_constant_channel_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(&[1, 1, 2, 3], 4.2);
        let y = tape.instance_norm(&x, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_ones_counts_overlap() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(&[1, 1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = tape.conv2d(&x, &k, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let expect = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let k = Tensor::zeros(&[3, 1, 3, 3]);
        let y = tape.conv2d(&x, &k, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn backward_of_elementwise_mean_is_linear() {
        // loss = mean(w * x), w = [1, 2], x = [3, 4] -> dloss/dw = [1.5, 2]
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf("w", &t(&[2], &[1.0, 2.0])).unwrap();
        let x = t(&[2], &[3.0, 4.0]);
        let p = tape.mul(&w, &x).unwrap();
        let loss = tape.mean(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.5, 2.0]);
    }

    #[test]
    fn backward_of_square_mean() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf("w", &t(&[1], &[2.0])).unwrap();
        let loss = tape.square_mean(&w).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads["w"].data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf("w", &t(&[2], &[1.0, 2.0])).unwrap();
        let y = tape.scalar_mul(&w, 2.0).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_rejects_untracked_loss() {
        let tape = Tape::<f64>::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(TensorError::NotOnTape)));
    }

    #[test]
    fn foreign_tape_tensor_is_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf("x", &t(&[1], &[1.0])).unwrap();
        assert!(matches!(
            b.scalar_mul(&x, 2.0),
            Err(TensorError::ForeignTape)
        ));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf("a", &t(&[2], &[1.0, 2.0])).unwrap();
        let _b = tape.leaf("b", &t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let loss = tape.mean(&a).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads["b"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads["b"].shape(), &[3]);
    }

    #[test]
    fn duplicate_leaf_name_errors() {
        let mut tape = Tape::<f64>::new();
        tape.leaf("w", &t(&[1], &[1.0])).unwrap();
        assert!(matches!(
            tape.leaf("w", &t(&[1], &[1.0])),
            Err(TensorError::DuplicateLeaf(_))
        ));
    }

    #[test]
    fn shared_leaf_accumulates_from_both_uses() {
        // loss = mean(w + w) -> d/dw = 2/n
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf("w", &t(&[2], &[1.0, -1.0])).unwrap();
        let s = tape.add(&w, &w).unwrap();
        let loss = tape.mean(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads["w"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let w = tape
                .leaf("w", &Tensor::from_vec(vec![4], vec![0.3, -0.7, 1.1, 0.05]).unwrap())
                .unwrap();
            let s = tape.sigmoid(&w).unwrap();
            let q = tape.square_mean(&s).unwrap();
            tape.backward(&q).unwrap()["w"].data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn instance_norm_statistics_are_normalized() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin() + 0.2).collect();
        let x = t(&[1, 2, 4, 4], &data);
        let y = tape.instance_norm(&x, 1e-5).unwrap();
        for ch in 0..2 {
            let v = &y.data()[ch * 16..(ch + 1) * 16];
            let mean: f64 = v.iter().sum::<f64>() / 16.0;
            let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-3, "var {var}");
        }
    }

    #[test]
    fn upsample_nearest_doubles_each_axis() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.upsample_nearest(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn slice_backward_scatters() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf("w", &t(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = tape.slice(&w, 1, 2).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0]);
        let loss = tape.mean(&s).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.5, 0.5, 0.0]);
    }
}
