//! Reverse-mode differentiation tape.
//!
//! Operations are recorded append-only; every node stores the handles of its
//! inputs, the forward values its backward rule needs, and the rule itself.
//! Rules are either built-in textbook derivatives or caller-supplied closures
//! registered through [`Tape::custom_vjp`] — the hook that lets a quantizer
//! replace the derivative of its round step with a surrogate.
//!
//! A tape is confined to one thread of control; tensors detached from it move
//! freely. Gradient accumulation walks the nodes once in reverse order, so
//! replays are bit-deterministic.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{broadcast_zip, NodeRef, TapeId, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule for a custom node: `(saved forward values, upstream gradient)
/// -> one gradient per input`.
pub type CustomBackward = dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>;

enum BackRule {
    Leaf,
    Add { a_shape: Vec<usize>, b_shape: Vec<usize> },
    Sub { a_shape: Vec<usize>, b_shape: Vec<usize> },
    Mul { a: Tensor, b: Tensor },
    Neg,
    Relu { x: Tensor },
    Tanh { y: Tensor },
    Exp { y: Tensor },
    Log { x: Tensor },
    Clamp { x: Tensor, lo: f64, hi: f64 },
    AddBias { rows: usize, cols: usize },
    ChannelBias { n: usize, c: usize, hw: usize },
    Matmul { a: Tensor, b: Tensor },
    Conv2d { input: Tensor, kernel: Tensor, stride: usize, padding: usize },
    Sum { in_shape: Vec<usize> },
    Mean { in_shape: Vec<usize> },
    MaxPool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Reshape { in_shape: Vec<usize> },
    Custom {
        saved: Vec<Tensor>,
        in_shapes: Vec<Vec<usize>>,
        back: Rc<CustomBackward>,
    },
}

struct Node {
    label: &'static str,
    /// Tape index per differentiable input; `None` marks a constant operand.
    inputs: Vec<Option<usize>>,
    out_shape: Vec<usize>,
    rule: BackRule,
}

/// Append-only record of differentiable operations.
pub struct Tape {
    id: TapeId,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TapeId(NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node index of a tensor on this tape, erroring on foreign handles.
    fn node_index(&self, t: &Tensor, op: &'static str) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(node) if node.tape == self.id => Ok(Some(node.index)),
            Some(_) => Err(Error::InvalidArgument(format!(
                "{op}: tensor belongs to a different tape"
            ))),
        }
    }

    fn push(&self, node: Node) -> NodeRef {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(node);
        NodeRef { tape: self.id, index }
    }

    fn record(
        &self,
        label: &'static str,
        inputs: &[&Tensor],
        out: Tensor,
        rule: BackRule,
    ) -> Result<Tensor> {
        let mut idxs = Vec::with_capacity(inputs.len());
        let mut any_recorded = false;
        for t in inputs {
            let idx = self.node_index(t, label)?;
            any_recorded |= idx.is_some();
            idxs.push(idx);
        }
        if !any_recorded {
            // Pure constant computation; nothing to differentiate.
            return Ok(out);
        }
        let node = Node { label, inputs: idxs, out_shape: out.shape().to_vec(), rule };
        let handle = self.push(node);
        Ok(out.with_node(handle))
    }

    /// Register a tensor as a differentiable leaf (weights, inputs under
    /// test). Returns a copy carrying a node handle.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let handle = self.push(Node {
            label: "leaf",
            inputs: vec![],
            out_shape: t.shape().to_vec(),
            rule: BackRule::Leaf,
        });
        t.detached().with_node(handle)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, data) = broadcast_zip("add", a, b, |x, y| x + y)?;
        let out = Tensor::new(shape, data)?;
        let rule =
            BackRule::Add { a_shape: a.shape().to_vec(), b_shape: b.shape().to_vec() };
        self.record("add", &[a, b], out, rule)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, data) = broadcast_zip("sub", a, b, |x, y| x - y)?;
        let out = Tensor::new(shape, data)?;
        let rule =
            BackRule::Sub { a_shape: a.shape().to_vec(), b_shape: b.shape().to_vec() };
        self.record("sub", &[a, b], out, rule)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, data) = broadcast_zip("mul", a, b, |x, y| x * y)?;
        let out = Tensor::new(shape, data)?;
        let rule = BackRule::Mul { a: a.detached(), b: b.detached() };
        self.record("mul", &[a, b], out, rule)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.map(|v| -v);
        self.record("neg", &[a], out, BackRule::Neg)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.map(|v| if v > 0.0 { v } else { 0.0 });
        self.record("relu", &[a], out, BackRule::Relu { x: a.detached() })
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.map(f64::tanh);
        let y = out.clone();
        self.record("tanh", &[a], out, BackRule::Tanh { y })
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.map(f64::exp);
        let y = out.clone();
        self.record("exp", &[a], out, BackRule::Exp { y })
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        let out = a.map(f64::ln);
        self.record("log", &[a], out, BackRule::Log { x: a.detached() })
    }

    /// Elementwise clamp; backward passes gradient iff `lo <= input <= hi`.
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = a.map(|v| v.clamp(lo, hi));
        self.record("clamp", &[a], out, BackRule::Clamp { x: a.detached(), lo, hi })
    }

    /// `a[m,n] + bias[n]` with the bias broadcast across rows.
    pub fn add_bias(&self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = match a.shape() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: a.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                })
            }
        };
        if bias.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = a.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias.data()[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.record("add_bias", &[a, bias], out, BackRule::AddBias { rows, cols })
    }

    /// `a[n,c,h,w] + bias[c]` with the bias broadcast per channel.
    pub fn add_channel_bias(&self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = match a.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "add_channel_bias",
                    lhs: a.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                })
            }
        };
        if bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = a.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] += bias.data()[ci];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.record("add_channel_bias", &[a, bias], out, BackRule::ChannelBias { n, c, hw })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ((m, k), (k2, n)) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) => ((*m, *k), (*k2, *n)),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_data(a.data(), b.data(), m, k, n))?;
        let rule = BackRule::Matmul { a: a.detached(), b: b.detached() };
        self.record("matmul", &[a, b], out, rule)
    }

    /// 2-D cross-correlation: input `[N,C,H,W]`, kernel `[F,C,kH,kW]`.
    pub fn conv2d(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let out = conv2d_value(input, kernel, stride, padding)?;
        let rule = BackRule::Conv2d {
            input: input.detached(),
            kernel: kernel.detached(),
            stride,
            padding,
        };
        self.record("conv2d", &[input, kernel], out, rule)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::InvalidArgument("sum of empty tensor".into()));
        }
        let out = Tensor::scalar(a.data().iter().sum());
        self.record("sum", &[a], out, BackRule::Sum { in_shape: a.shape().to_vec() })
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64);
        self.record("mean", &[a], out, BackRule::Mean { in_shape: a.shape().to_vec() })
    }

    /// Max pooling over `[N,C,H,W]`; gradient routes to the argmax only, ties
    /// broken to the first element in row-major order.
    pub fn max_pool2d(&self, a: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::InvalidArgument("max_pool2d of empty tensor".into()));
        }
        let (n, c, h, w) = match a.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "max_pool2d expects a 4-d tensor, got shape {other:?}"
                )))
            }
        };
        let ho = pool_out_dim(h, k, stride, "max_pool2d")?;
        let wo = pool_out_dim(w, k, stride, "max_pool2d")?;
        let mut data = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for u in 0..k {
                            for v in 0..k {
                                let idx = plane + (oi * stride + u) * w + (oj * stride + v);
                                if a.data()[idx] > best {
                                    best = a.data()[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ci) * ho + oi) * wo + oj;
                        data[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], data)?;
        let rule = BackRule::MaxPool { in_shape: a.shape().to_vec(), argmax };
        self.record("max_pool2d", &[a], out, rule)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::InvalidArgument(format!(
                "reshape {:?} -> {:?} changes element count",
                a.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), a.data().to_vec())?;
        let rule = BackRule::Reshape { in_shape: a.shape().to_vec() };
        self.record("reshape", &[a], out, rule)
    }

    // ── Custom rules ────────────────────────────────────────────────────

    /// Record a forward value whose backward is fully replaced by `back`.
    ///
    /// `forward` consumes the (detached) input values and returns the output
    /// together with whatever it wants saved for the backward pass. `back`
    /// receives `(saved, upstream)` and must return one gradient per input,
    /// shapes matching; mismatches surface as errors naming the node during
    /// [`Tape::backward`].
    pub fn custom_vjp<F>(
        &self,
        label: &'static str,
        inputs: &[&Tensor],
        forward: F,
        back: Rc<CustomBackward>,
    ) -> Result<Tensor>
    where
        F: FnOnce(&[Tensor]) -> Result<(Tensor, Vec<Tensor>)>,
    {
        let values: Vec<Tensor> = inputs.iter().map(|t| t.detached()).collect();
        let (out, saved) = forward(&values)?;
        let in_shapes = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let rule = BackRule::Custom { saved, in_shapes, back };
        self.record(label, inputs, out, rule)
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Accumulate gradients of a scalar loss with respect to every recorded
    /// node, in reverse topological order with seed 1.0.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_idx = self
            .node_index(loss, "backward")?
            .ok_or_else(|| Error::InvalidArgument("backward: loss is not on the tape".into()))?;
        if !loss.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            let upstream = match &grads[idx] {
                Some(g) => Tensor::new(nodes[idx].out_shape.clone(), g.clone())?,
                None => continue,
            };
            let node = &nodes[idx];
            let input_grads = apply_rule(node, &upstream)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                let Some(target) = slot else { continue };
                match &mut grads[*target] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad.data()) {
                            *a += g;
                        }
                    }
                    None => grads[*target] = Some(grad.data().to_vec()),
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.out_shape.clone()).collect();
        Ok(Gradients { tape: self.id, grads, shapes })
    }
}

/// Gradient map produced by [`Tape::backward`], keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: TapeId,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a recorded tensor; zero tensor for nodes the
    /// loss never reached (unused leaves).
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        let node = t
            .node()
            .expect("gradient requested for a tensor that is not on the tape");
        assert!(node.tape == self.tape, "gradient requested from a different tape");
        match &self.grads[node.index] {
            Some(g) => Tensor::new(self.shapes[node.index].clone(), g.clone()).unwrap(),
            None => Tensor::zeros(&self.shapes[node.index]),
        }
    }
}

// ── Rule application ────────────────────────────────────────────────────

/// Sum an upstream gradient down to a scalar operand's shape, or pass it
/// through unchanged when shapes already agree.
fn reduce_to(shape: &[usize], grad: &Tensor) -> Tensor {
    if grad.shape() == shape {
        grad.detached()
    } else {
        let total: f64 = grad.data().iter().sum();
        Tensor::new(shape.to_vec(), vec![total]).unwrap()
    }
}

/// Elementwise product where one side may be a broadcast scalar, reduced back
/// to `shape`.
fn mul_reduce(shape: &[usize], grad: &Tensor, other: &Tensor) -> Tensor {
    let full: Vec<f64> = if other.is_scalar() && !grad.is_scalar() {
        let s = other.data()[0];
        grad.data().iter().map(|&g| g * s).collect()
    } else {
        grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect()
    };
    let full = Tensor::new(grad.shape().to_vec(), full).unwrap();
    reduce_to(shape, &full)
}

fn apply_rule(node: &Node, upstream: &Tensor) -> Result<Vec<Tensor>> {
    let g = upstream;
    Ok(match &node.rule {
        BackRule::Leaf => vec![],
        BackRule::Add { a_shape, b_shape } => {
            vec![reduce_to(a_shape, g), reduce_to(b_shape, g)]
        }
        BackRule::Sub { a_shape, b_shape } => {
            let neg = g.map(|v| -v);
            vec![reduce_to(a_shape, g), reduce_to(b_shape, &neg)]
        }
        BackRule::Mul { a, b } => {
            vec![mul_reduce(a.shape(), g, b), mul_reduce(b.shape(), g, a)]
        }
        BackRule::Neg => vec![g.map(|v| -v)],
        BackRule::Relu { x } => {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        BackRule::Tanh { y } => {
            let data =
                g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
            vec![Tensor::new(y.shape().to_vec(), data)?]
        }
        BackRule::Exp { y } => {
            let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
            vec![Tensor::new(y.shape().to_vec(), data)?]
        }
        BackRule::Log { x } => {
            let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        BackRule::Clamp { x, lo, hi } => {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                .collect();
            vec![Tensor::new(x.shape().to_vec(), data)?]
        }
        BackRule::AddBias { rows, cols } => {
            let mut gb = vec![0.0; *cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    gb[c] += g.data()[r * cols + c];
                }
            }
            vec![g.detached(), Tensor::new(vec![*cols], gb)?]
        }
        BackRule::ChannelBias { n, c, hw } => {
            let mut gb = vec![0.0; *c];
            for ni in 0..*n {
                for ci in 0..*c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..*hw {
                        gb[ci] += g.data()[base + i];
                    }
                }
            }
            vec![g.detached(), Tensor::new(vec![*c], gb)?]
        }
        BackRule::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA = g · Bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g.data()[i * n + j] * b.data()[l * n + j];
                    }
                    da[i * k + l] = acc;
                }
            }
            // dB = Aᵀ · g
            let mut db = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a.data()[i * k + l] * g.data()[i * n + j];
                    }
                    db[l * n + j] = acc;
                }
            }
            vec![Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?]
        }
        BackRule::Conv2d { input, kernel, stride, padding } => {
            let (gi, gk) = conv2d_backward(input, kernel, g, *stride, *padding);
            vec![gi, gk]
        }
        BackRule::Sum { in_shape } => {
            vec![Tensor::full(in_shape, g.item())]
        }
        BackRule::Mean { in_shape } => {
            let n: usize = in_shape.iter().product();
            vec![Tensor::full(in_shape, g.item() / n as f64)]
        }
        BackRule::MaxPool { in_shape, argmax } => {
            let mut gi = vec![0.0; in_shape.iter().product()];
            for (o, &idx) in argmax.iter().enumerate() {
                gi[idx] += g.data()[o];
            }
            vec![Tensor::new(in_shape.clone(), gi)?]
        }
        BackRule::Reshape { in_shape } => {
            vec![Tensor::new(in_shape.clone(), g.data().to_vec())?]
        }
        BackRule::Custom { saved, in_shapes, back } => {
            let grads = back(saved, g)?;
            if grads.len() != in_shapes.len() {
                return Err(Error::InvalidArgument(format!(
                    "custom vjp '{}' returned {} gradients for {} inputs",
                    node.label,
                    grads.len(),
                    in_shapes.len()
                )));
            }
            for (i, (grad, shape)) in grads.iter().zip(in_shapes).enumerate() {
                if grad.shape() != shape.as_slice() {
                    return Err(Error::InvalidArgument(format!(
                        "custom vjp '{}': gradient {} has shape {:?}, expected {:?}",
                        node.label,
                        i,
                        grad.shape(),
                        shape
                    )));
                }
            }
            grads
        }
    })
}

// ── Shared numeric kernels ──────────────────────────────────────────────

pub(crate) fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: non-integral output size for input {size}, kernel {k}, \
             stride {stride}, padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn pool_out_dim(size: usize, k: usize, stride: usize, op: &str) -> Result<usize> {
    if size < k || (size - k) % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "{op}: window {k} stride {stride} does not tile input dim {size}"
        )));
    }
    Ok((size - k) / stride + 1)
}

/// Forward cross-correlation used by both the tape op and tests.
pub(crate) fn conv2d_value(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let (n, c, h, w) = match input.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects 4-d input, got shape {other:?}"
            )))
        }
    };
    let (f, ck, kh, kw) = match kernel.shape() {
        [f, ck, kh, kw] => (*f, *ck, *kh, *kw),
        other => {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects 4-d kernel, got shape {other:?}"
            )))
        }
    };
    if ck != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let ho = conv_out_dim(h, kh, stride, padding)?;
    let wo = conv_out_dim(w, kw, stride, padding)?;
    let mut out = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..kh {
                            let y = (oi * stride + u) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let x = (oj * stride + v) as isize - padding as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((ni * c + ci) * h + y as usize) * w + x as usize];
                                let kv = kernel.data()[((fi * c + ci) * kh + u) * kw + v];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, ho, wo], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut gi = vec![0.0; input.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    for ni in 0..n {
        for fi in 0..f {
            for oi in 0..ho {
                for oj in 0..wo {
                    let go = grad_out.data()[((ni * f + fi) * ho + oi) * wo + oj];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for u in 0..kh {
                            let y = (oi * stride + u) as isize - padding as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let x = (oj * stride + v) as isize - padding as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let in_idx =
                                    ((ni * c + ci) * h + y as usize) * w + x as usize;
                                let k_idx = ((fi * c + ci) * kh + u) * kw + v;
                                gi[in_idx] += go * kernel.data()[k_idx];
                                gk[k_idx] += go * input.data()[in_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).unwrap(),
        Tensor::new(kernel.shape().to_vec(), gk).unwrap(),
    )
}
