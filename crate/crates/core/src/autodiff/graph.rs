use super::kernels::{batched_matmul, linear, linear_backward, matmul_backward};
use super::tensor::{axis_blocks, broadcast_shape, reduce_to_shape, zip_broadcast, Tensor};
use super::AdError;

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Stable identifier of a trainable leaf, assigned in registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a trainable leaf node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Param {
    pub id: ParamId,
    pub node: NodeId,
}

/// Operation kinds understood by [`Graph::build`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[.., m, k] x [.., k, n]`; rank 2 or 3, a rank-2 operand is shared
    /// across the batch of the other.
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
    SumAxis(usize),
    MeanAxis(usize),
    LogSumExpAxis(usize),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Scale(f64),
    AddScalar(f64),
    SumAll,
    Reshape(Vec<usize>),
    /// Swaps the last two axes.
    Transpose,
    BroadcastTo(Vec<usize>),
    /// Selects rows along axis 0.
    Gather(Vec<usize>),
    /// `h * w[.., :n]^T + w[.., n]` for `h` of width `n`; `w` is shared
    /// (`[out, n + 1]`) or batched along axis 0 of a rank-3 `h`.
    Linear,
    /// Identity inside `[-knee, knee]`, saturating smoothly towards
    /// `±limit` outside.
    SoftClip { knee: f64, limit: f64 },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add_broadcast",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply",
            OpKind::Div => "divide",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Neg => "negate",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::LogSumExpAxis(_) => "logsumexp_axis",
            OpKind::Concat(_) => "concat_axis",
            OpKind::Slice { .. } => "slice",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::SumAll => "sum_all",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::BroadcastTo(_) => "broadcast_to",
            OpKind::Gather(_) => "gather",
            OpKind::Linear => "linear",
            OpKind::SoftClip { .. } => "soft_clip",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Linear | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => Some(2),
            OpKind::Concat(_) => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum NodeOp {
    Constant,
    Param,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    op: NodeOp,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in creation order,
/// which is a topological order.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar root with respect to every registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, param: &Param) -> &Tensor {
        &self.grads[param.id.0]
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
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

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeOp::Constant, Vec::new(), value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Param {
        let id = ParamId(self.params.len());
        let node = self.push(NodeOp::Param, Vec::new(), value, true);
        self.params.push(node);
        Param { id, node }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: NodeOp, parents: Vec<NodeId>, value: Tensor, rg: bool) -> NodeId {
        self.nodes.push(Node { op, parents, value, requires_grad: rg });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends an operation node, computing its forward value.
    pub fn build(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, AdError> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(AdError::InvalidArgument(format!(
                    "{}: expected {} inputs, got {}",
                    kind.name(),
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(AdError::InvalidArgument(format!("{}: no inputs", kind.name())));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let out = forward(&kind, &values)?;
        if !out.all_finite() {
            return Err(AdError::NonFinite { op: kind.name() });
        }
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(NodeOp::Op(kind), inputs.to_vec(), out, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AdError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(AdError::NotScalar { shape: root_value.shape().to_vec() });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let kind = match &node.op {
                NodeOp::Op(k) => k,
                _ => continue,
            };
            let Some(grad) = adjoints[i].take() else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = backward_op(kind, &inputs, &node.value, &grad, &needs);
            for (p, g) in node.parents.iter().zip(pgrads) {
                if let Some(g) = g {
                    match &mut adjoints[p.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            // keep leaf adjoints; interior ones were taken above
        }
        let grads = self
            .params
            .iter()
            .map(|&n| match adjoints.get(n.0).and_then(|a| a.clone()) {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[n.0].value.shape()),
            })
            .collect();
        Ok(Gradients { grads })
    }

    // Convenience wrappers, one per op kind.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Div, &[a, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Relu, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Tanh, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Log, &[x])
    }
    pub fn square(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Square, &[x])
    }
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Sqrt, &[x])
    }
    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Neg, &[x])
    }
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AdError> {
        self.build(OpKind::SumAxis(axis), &[x])
    }
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AdError> {
        self.build(OpKind::MeanAxis(axis), &[x])
    }
    pub fn logsumexp_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AdError> {
        self.build(OpKind::LogSumExpAxis(axis), &[x])
    }
    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, AdError> {
        self.build(OpKind::Concat(axis), xs)
    }
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AdError> {
        self.build(OpKind::Slice { axis, start, end }, &[x])
    }
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.build(OpKind::Scale(c), &[x])
    }
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.build(OpKind::AddScalar(c), &[x])
    }
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::SumAll, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        self.build(OpKind::Reshape(shape.to_vec()), &[x])
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Transpose, &[x])
    }
    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        self.build(OpKind::BroadcastTo(shape.to_vec()), &[x])
    }
    pub fn gather(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, AdError> {
        self.build(OpKind::Gather(rows.to_vec()), &[x])
    }
    pub fn linear(&mut self, h: NodeId, w: NodeId) -> Result<NodeId, AdError> {
        self.build(OpKind::Linear, &[h, w])
    }
    pub fn soft_clip(&mut self, x: NodeId, knee: f64, limit: f64) -> Result<NodeId, AdError> {
        self.build(OpKind::SoftClip { knee, limit }, &[x])
    }
}

fn soft_clip(v: f64, knee: f64, limit: f64) -> f64 {
    if v.abs() <= knee {
        v
    } else {
        v.signum() * (knee + (limit - knee) * ((v.abs() - knee) / (limit - knee)).tanh())
    }
}

fn shape_err(kind: &OpKind, a: &[usize], b: &[usize]) -> AdError {
    AdError::Shape(format!("{}: incompatible shapes {:?} and {:?}", kind.name(), a, b))
}

fn check_axis(kind: &OpKind, shape: &[usize], axis: usize) -> Result<(), AdError> {
    if axis >= shape.len() {
        return Err(AdError::Shape(format!(
            "{}: axis {} out of range for shape {:?}",
            kind.name(),
            axis,
            shape
        )));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn forward(kind: &OpKind, x: &[&Tensor]) -> Result<Tensor, AdError> {
    macro_rules! unary {
        ($f:expr) => {
            x[0].map($f)
        };
    }
    match kind {
        OpKind::MatMul => batched_matmul(x[0], x[1]).ok_or_else(|| shape_err(kind, x[0].shape(), x[1].shape())),
        OpKind::Linear => linear(x[0], x[1]).ok_or_else(|| shape_err(kind, x[0].shape(), x[1].shape())),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (x[0], x[1]);
            let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(kind, a.shape(), b.shape()))?;
            Ok(match kind {
                OpKind::Add => zip_broadcast(a, b, &shape, |p, q| p + q),
                OpKind::Sub => zip_broadcast(a, b, &shape, |p, q| p - q),
                OpKind::Mul => zip_broadcast(a, b, &shape, |p, q| p * q),
                _ => {
                    if b.data().contains(&0.0) {
                        return Err(AdError::Domain { op: "divide", detail: "division by zero".into() });
                    }
                    zip_broadcast(a, b, &shape, |p, q| p / q)
                }
            })
        }
        OpKind::Relu => Ok(unary!(|v| if v > 0.0 { v } else { 0.0 })),
        OpKind::Tanh => Ok(unary!(f64::tanh)),
        OpKind::Exp => Ok(unary!(f64::exp)),
        OpKind::Log => {
            if let Some(v) = x[0].data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(AdError::Domain { op: "log", detail: format!("non-positive operand {v}") });
            }
            Ok(unary!(f64::ln))
        }
        OpKind::Square => Ok(unary!(|v| v * v)),
        OpKind::Sqrt => {
            if let Some(v) = x[0].data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                return Err(AdError::Domain { op: "sqrt", detail: format!("negative operand {v}") });
            }
            Ok(unary!(f64::sqrt))
        }
        OpKind::Neg => Ok(unary!(|v| -v)),
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) | OpKind::LogSumExpAxis(axis) => {
            let t = x[0];
            check_axis(kind, t.shape(), *axis)?;
            let (outer, n, inner) = axis_blocks(t.shape(), *axis);
            if n == 0 {
                return Err(AdError::Shape(format!("{}: empty axis {}", kind.name(), axis)));
            }
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| d[(o * n + j) * inner + i];
                    out[o * inner + i] = match kind {
                        OpKind::SumAxis(_) => (0..n).fold(0.0, |s, j| s + at(j)),
                        OpKind::MeanAxis(_) => (0..n).fold(0.0, |s, j| s + at(j)) / n as f64,
                        _ => {
                            let m = (0..n).fold(f64::NEG_INFINITY, |m, j| m.max(at(j)));
                            if m == f64::NEG_INFINITY {
                                m
                            } else {
                                m + (0..n).fold(0.0, |s, j| s + (at(j) - m).exp()).ln()
                            }
                        }
                    };
                }
            }
            Tensor::new(reduced_shape(t.shape(), *axis), out)
        }
        OpKind::Concat(axis) => {
            let first = x[0].shape();
            check_axis(kind, first, *axis)?;
            let mut total = 0;
            for t in x {
                let s = t.shape();
                let ok = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(shape_err(kind, first, s));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = axis_blocks(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let n = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)
        }
        OpKind::Slice { axis, start, end } => {
            let t = x[0];
            check_axis(kind, t.shape(), *axis)?;
            if start >= end || *end > t.shape()[*axis] {
                return Err(AdError::Shape(format!(
                    "slice: range {}..{} invalid for axis {} of {:?}",
                    start, end, axis, t.shape()
                )));
            }
            let (outer, n, inner) = axis_blocks(t.shape(), *axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, out)
        }
        OpKind::Scale(c) => Ok(unary!(|v| v * c)),
        OpKind::AddScalar(c) => Ok(unary!(|v| v + c)),
        &OpKind::SoftClip { knee, limit } => {
            if !(knee >= 0.0 && limit > knee) {
                return Err(AdError::InvalidArgument(format!("soft_clip: need 0 <= knee < limit, got {knee}, {limit}")));
            }
            Ok(unary!(|v| soft_clip(v, knee, limit)))
        }
        OpKind::SumAll => Ok(Tensor::scalar(x[0].data().iter().sum())),
        OpKind::Reshape(shape) => x[0].clone().reshape(shape),
        OpKind::Transpose => {
            let t = x[0];
            let nd = t.ndim();
            if nd < 2 {
                return Err(AdError::Shape(format!("transpose: needs rank >= 2, got {:?}", t.shape())));
            }
            Ok(transpose_last2(t))
        }
        OpKind::BroadcastTo(shape) => {
            let t = x[0];
            match broadcast_shape(t.shape(), shape) {
                Some(s) if s == *shape => {
                    let zero = Tensor::zeros(&[1]);
                    Ok(zip_broadcast(t, &zero, shape, |p, _| p))
                }
                _ => Err(shape_err(kind, t.shape(), shape)),
            }
        }
        OpKind::Gather(rows) => {
            let t = x[0];
            let n = t.shape()[0];
            let width = t.len() / n.max(1);
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r >= n {
                    return Err(AdError::Shape(format!("gather: row {} out of range for {:?}", r, t.shape())));
                }
                out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, out)
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let nd = t.ndim();
    let (r, c) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let batch = t.len() / (r * c).max(1);
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = d[base + i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out).expect("transpose preserves size")
}

fn elementwise_grad(x: &Tensor, out: &Tensor, g: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let d: Vec<f64> =
        x.data().iter().zip(out.data()).zip(g.data()).map(|((&xi, &yi), &gi)| f(xi, yi, gi)).collect();
    Tensor::new(x.shape().to_vec(), d).expect("same shape")
}

fn backward_op(
    kind: &OpKind,
    x: &[&Tensor],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    macro_rules! elementwise {
        ($f:expr) => {
            vec![Some(elementwise_grad(x[0], out, g, $f))]
        };
    }
    match kind {
        OpKind::MatMul => {
            let (ga, gb) = matmul_backward(x[0], x[1], g, needs[0], needs[1]);
            vec![ga, gb]
        }
        OpKind::Linear => {
            let (gh, gw) = linear_backward(x[0], x[1], g, needs[0], needs[1]);
            vec![gh, gw]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (x[0], x[1]);
            let shape = g.shape();
            let ga = needs[0].then(|| match kind {
                OpKind::Add | OpKind::Sub => reduce_to_shape(g, a.shape()),
                OpKind::Mul => reduce_to_shape(&zip_broadcast(g, b, shape, |p, q| p * q), a.shape()),
                _ => reduce_to_shape(&zip_broadcast(g, b, shape, |p, q| p / q), a.shape()),
            });
            let gb = needs[1].then(|| match kind {
                OpKind::Add => reduce_to_shape(g, b.shape()),
                OpKind::Sub => reduce_to_shape(&g.map(|v| -v), b.shape()),
                OpKind::Mul => reduce_to_shape(&zip_broadcast(g, a, shape, |p, q| p * q), b.shape()),
                _ => {
                    // d(a/b)/db = -out / b
                    let t = zip_broadcast(g, out, shape, |p, q| -p * q);
                    reduce_to_shape(&zip_broadcast(&t, b, shape, |p, q| p / q), b.shape())
                }
            });
            vec![ga, gb]
        }
        OpKind::Relu => elementwise!(|xi, _, gi| if xi > 0.0 { gi } else { 0.0 }),
        OpKind::Tanh => elementwise!(|_, yi, gi| gi * (1.0 - yi * yi)),
        OpKind::Exp => elementwise!(|_, yi, gi| gi * yi),
        OpKind::Log => elementwise!(|xi, _, gi| gi / xi),
        OpKind::Square => elementwise!(|xi, _, gi| 2.0 * xi * gi),
        OpKind::Sqrt => elementwise!(|_, yi, gi| gi / (2.0 * yi)),
        OpKind::Neg => elementwise!(|_, _, gi| -gi),
        OpKind::Scale(c) => elementwise!(|_, _, gi| gi * c),
        OpKind::AddScalar(_) => elementwise!(|_, _, gi| gi),
        &OpKind::SoftClip { knee, limit } => elementwise!(|xi, _, gi| {
            if xi.abs() <= knee {
                gi
            } else {
                let t = ((xi.abs() - knee) / (limit - knee)).tanh();
                gi * (1.0 - t * t)
            }
        }),
        OpKind::SumAll => vec![Some(Tensor::full(x[0].shape(), g.item()))],
        OpKind::SumAxis(axis) | OpKind::MeanAxis(axis) | OpKind::LogSumExpAxis(axis) => {
            let t = x[0];
            let (outer, n, inner) = axis_blocks(t.shape(), *axis);
            let mut d = vec![0.0; t.len()];
            let td = t.data();
            for o in 0..outer {
                for i in 0..inner {
                    let gi = g.data()[o * inner + i];
                    let yi = out.data()[o * inner + i];
                    for j in 0..n {
                        let k = (o * n + j) * inner + i;
                        d[k] = match kind {
                            OpKind::SumAxis(_) => gi,
                            OpKind::MeanAxis(_) => gi / n as f64,
                            _ => gi * (td[k] - yi).exp(),
                        };
                    }
                }
            }
            vec![Some(Tensor::new(t.shape().to_vec(), d).expect("same shape"))]
        }
        OpKind::Concat(axis) => {
            let (outer, total, inner) = axis_blocks(g.shape(), *axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(x.len());
            for (t, &need) in x.iter().zip(needs) {
                let n = t.shape()[*axis];
                if need {
                    let mut d = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    grads.push(Some(Tensor::new(t.shape().to_vec(), d).expect("same shape")));
                } else {
                    grads.push(None);
                }
                offset += n;
            }
            grads
        }
        OpKind::Slice { axis, start, end } => {
            let t = x[0];
            let (outer, n, inner) = axis_blocks(t.shape(), *axis);
            let w = (end - start) * inner;
            let mut d = vec![0.0; t.len()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                d[dst..dst + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            vec![Some(Tensor::new(t.shape().to_vec(), d).expect("same shape"))]
        }
        OpKind::Reshape(_) => {
            vec![Some(g.clone().reshape(x[0].shape()).expect("same size"))]
        }
        OpKind::Transpose => vec![Some(transpose_last2(g))],
        OpKind::BroadcastTo(_) => vec![Some(reduce_to_shape(g, x[0].shape()))],
        OpKind::Gather(rows) => {
            let t = x[0];
            let width = t.len() / t.shape()[0].max(1);
            let mut d = vec![0.0; t.len()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    d[r * width + j] += g.data()[i * width + j];
                }
            }
            vec![Some(Tensor::new(t.shape().to_vec(), d).expect("same shape"))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn logsumexp_of_equal_entries() {
        let c = 3.7;
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![c, c]));
        let y = g.logsumexp_axis(x, 0).unwrap();
        assert!((g.value(y).item() - (c + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[4, 5]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add_broadcast"), "{msg}");
    }

    #[test]
    fn log_and_divide_domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(AdError::Domain { op: "log", .. })));
        let one = g.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(g.div(one, x), Err(AdError::Domain { op: "divide", .. })));
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(AdError::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(p.node).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(0.0));
        let r = g.relu(p.node).unwrap();
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get(&p).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p.node), Err(AdError::NotScalar { .. })));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, 2.0]));
        let q = g.param(Tensor::scalar(3.0));
        let s = g.sum_all(p.node).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&q).data(), &[0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x * x built as mul(x, x)
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(p.node, p.node).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(&p).item(), 6.0);
    }

    #[test]
    fn concat_slice_gather_forward() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = g.gather(c, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(r).shape(), &[3, 3]);
        assert_eq!(g.value(r).row(2), &[1.0, 3.0, 4.0]);
    }
}
