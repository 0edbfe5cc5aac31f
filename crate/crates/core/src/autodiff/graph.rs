use rand::Rng;

use super::tensor::{self, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Elu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Softmax(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Dropout(NodeId, Vec<f64>),
    Sum(NodeId),
    Mean(NodeId),
    Map(NodeId, fn(f64, f64) -> f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order of the (acyclic) expression graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| AutodiffError::NotMatrix {
        op,
        shape: t.shape().to_vec(),
    })
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn transpose_values(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

fn reduce_broadcast(grad: &Tensor, target: &Tensor, mode: Broadcast) -> Tensor {
    match mode {
        Broadcast::Same => grad.clone(),
        Broadcast::Scalar => Tensor::new(
            target.shape().to_vec(),
            vec![grad.values().iter().sum()],
        )
        .expect("scalar broadcast target has one value"),
        Broadcast::Row => {
            let cols = target.len();
            let mut out = vec![0.0; cols];
            for chunk in grad.values().chunks(cols) {
                for (o, g) in out.iter_mut().zip(chunk) {
                    *o += g;
                }
            }
            Tensor::new(target.shape().to_vec(), out).expect("row broadcast shape")
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as constant by [`Graph::backward`].
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = Tensor::matrix(m, n, tensor::matmul(av.values(), bv.values(), m, k, n))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn broadcast_mode(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return Ok(Broadcast::Same);
        }
        if bv.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let (Some((_, ac)), Some((1, bc))) = (av.dims2(), bv.dims2()) {
            if ac == bc {
                return Ok(Broadcast::Row);
            }
        }
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })
    }

    fn combine(
        &self,
        a: NodeId,
        b: NodeId,
        mode: Broadcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let bvals = bv.values();
        let values: Vec<f64> = match mode {
            Broadcast::Same => av.values().iter().zip(bvals).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.values().iter().map(|&x| f(x, bvals[0])).collect(),
            Broadcast::Row => av
                .values()
                .chunks(bvals.len().max(1))
                .flat_map(|row| row.iter().zip(bvals).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        Tensor::new(av.shape().to_vec(), values).expect("elementwise result keeps lhs shape")
    }

    /// `a + b`; `b` may be a single row (added to every row of `a`) or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast_mode("add", a, b)?;
        let out = self.combine(a, b, mode, |x, y| x + y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b, mode), rg))
    }

    /// `a - b` with the same broadcasting rules as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mode = self.broadcast_mode("sub", a, b)?;
        let out = self.combine(a, b, mode, |x, y| x - y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Sub(a, b, mode), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = self.combine(a, b, Broadcast::Same, |x, y| x * y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.req(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Concatenates 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs.first().ok_or(AutodiffError::Empty { op: "concat" })?;
        if axis > 1 {
            return Err(AutodiffError::BadAxis { op: "concat", axis });
        }
        let (r0, c0) = dims2("concat", self.value(first))?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (r, c) = dims2("concat", self.value(id))?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut values = Vec::with_capacity(rows * c0);
            for &id in inputs {
                values.extend_from_slice(self.value(id).values());
            }
            Tensor::matrix(rows, c0, values)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut values = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for (&id, &(_, c)) in inputs.iter().zip(&dims) {
                    values.extend_from_slice(&self.value(id).values()[r * c..(r + 1) * c]);
                }
            }
            Tensor::matrix(r0, cols, values)?
        };
        let rg = inputs.iter().any(|&id| self.req(id));
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// Rows (`axis` 0) or columns (`axis` 1) `start..end` of a 2-d tensor.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = dims2("slice", av)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(AutodiffError::BadAxis { op: "slice", axis }),
        };
        if start > end || end > extent {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: end,
                size: extent,
            });
        }
        let out = if axis == 0 {
            Tensor::matrix(end - start, c, av.values()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut values = Vec::with_capacity(r * w);
            for row in av.values().chunks(c) {
                values.extend_from_slice(&row[start..end]);
            }
            Tensor::matrix(r, w, values)?
        };
        let rg = self.req(a);
        Ok(self.push(out, Op::Slice(a, axis, start), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = dims2("transpose", av)?;
        let out = Tensor::matrix(c, r, transpose_values(av.values(), r, c))?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out = self.value(a).map(f);
        let rg = self.req(a);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, tensor::elu, Op::Elu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::exp);
        if !out.all_finite() {
            return Err(AutodiffError::NonFinite { op: "exp" });
        }
        let rg = self.req(a);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.values().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "log" });
        }
        let out = av.map(f64::ln);
        let rg = self.req(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, tensor::softplus, Op::Softplus(a))
    }

    /// Softmax of a 2-d tensor along `axis` (1 normalises each row).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = dims2("softmax", av)?;
        if axis > 1 {
            return Err(AutodiffError::BadAxis { op: "softmax", axis });
        }
        let mut values = av.values().to_vec();
        let (outer, inner, stride_outer, stride_inner) =
            if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let idx = |i: usize| o * stride_outer + i * stride_inner;
            let max = (0..inner).map(|i| values[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..inner {
                let e = (values[idx(i)] - max).exp();
                values[idx(i)] = e;
                total += e;
            }
            for i in 0..inner {
                values[idx(i)] /= total;
            }
        }
        let out = Tensor::matrix(r, c, values)?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Rows of a 2-d `table` selected by `indices` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (rows, cols) = dims2("gather", tv)?;
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    size: rows,
                });
            }
            values.extend_from_slice(&tv.values()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::matrix(indices.len(), cols, values)?;
        let rg = self.req(table);
        Ok(self.push(out, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`;
    /// otherwise the input node itself is returned.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: NodeId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::DropoutRate(rate));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let av = self.value(a);
        let values = av.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), values)?;
        let rg = self.req(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).values().iter().sum();
        let rg = self.req(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let m = av.values().iter().sum::<f64>() / av.len() as f64;
        let rg = self.req(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Elementwise `forward` with a caller-supplied derivative
    /// `derivative(x, forward(x))`.
    pub fn map(
        &mut self,
        a: NodeId,
        forward: fn(f64) -> f64,
        derivative: fn(f64, f64) -> f64,
    ) -> NodeId {
        self.unary(a, forward, Op::Map(a, derivative))
    }

    /// Gradients of the scalar `root` with respect to every node on a path
    /// from a [`Graph::param`] leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(AutodiffError::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::filled(rv.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let req = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let values = x
                .values()
                .iter()
                .zip(out.values())
                .zip(g.values())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Tensor::new(x.shape().to_vec(), values).expect("gradient keeps input shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("matmul lhs is 2-d");
                let n = val(*b).dims2().expect("matmul rhs is 2-d").1;
                if req(*a) {
                    let da = tensor::matmul_nt(g.values(), val(*b).values(), m, n, k);
                    accumulate(grads, *a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if req(*b) {
                    let db = tensor::matmul_tn(val(*a).values(), g.values(), m, k, n);
                    accumulate(grads, *b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Add(a, b, mode) => {
                if req(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if req(*b) {
                    accumulate(grads, *b, reduce_broadcast(g, val(*b), *mode));
                }
            }
            Op::Sub(a, b, mode) => {
                if req(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if req(*b) {
                    let neg = g.map(|v| -v);
                    accumulate(grads, *b, reduce_broadcast(&neg, val(*b), *mode));
                }
            }
            Op::Mul(a, b) => {
                let prod = |x: &Tensor| {
                    let values = x.values().iter().zip(g.values()).map(|(p, q)| p * q).collect();
                    Tensor::new(x.shape().to_vec(), values).expect("shape")
                };
                if req(*a) {
                    accumulate(grads, *a, prod(val(*b)));
                }
                if req(*b) {
                    accumulate(grads, *b, prod(val(*a)));
                }
            }
            Op::Scale(a, factor) => {
                if req(*a) {
                    accumulate(grads, *a, g.map(|v| v * factor));
                }
            }
            Op::Concat(inputs, axis) => {
                let (rows, cols) = out.dims2().expect("concat output is 2-d");
                let mut offset = 0;
                for &id in inputs {
                    let (r, c) = val(id).dims2().expect("concat input is 2-d");
                    if req(id) {
                        let part = if *axis == 0 {
                            g.values()[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut v = Vec::with_capacity(r * c);
                            for row in 0..rows {
                                v.extend_from_slice(
                                    &g.values()[row * cols + offset..row * cols + offset + c],
                                );
                            }
                            v
                        };
                        accumulate(grads, id, Tensor::matrix(r, c, part).expect("shape"));
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice(a, axis, start) => {
                if req(*a) {
                    let (r, c) = val(*a).dims2().expect("slice input is 2-d");
                    let mut full = vec![0.0; r * c];
                    let (gr, gc) = g.dims2().expect("slice output is 2-d");
                    for row in 0..gr {
                        for col in 0..gc {
                            let (tr, tc) = if *axis == 0 {
                                (row + start, col)
                            } else {
                                (row, col + start)
                            };
                            full[tr * c + tc] = g.values()[row * gc + col];
                        }
                    }
                    accumulate(grads, *a, Tensor::matrix(r, c, full).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                if req(*a) {
                    let (r, c) = out.dims2().expect("transpose output is 2-d");
                    let t = transpose_values(g.values(), r, c);
                    accumulate(grads, *a, Tensor::matrix(c, r, t).expect("shape"));
                }
            }
            Op::Sigmoid(a) => {
                if req(*a) {
                    accumulate(grads, *a, elementwise(val(*a), &|_, y, gv| gv * y * (1.0 - y)));
                }
            }
            Op::Tanh(a) => {
                if req(*a) {
                    accumulate(grads, *a, elementwise(val(*a), &|_, y, gv| gv * (1.0 - y * y)));
                }
            }
            Op::Elu(a) => {
                if req(*a) {
                    accumulate(
                        grads,
                        *a,
                        elementwise(val(*a), &|x, y, gv| if x > 0.0 { gv } else { gv * (y + 1.0) }),
                    );
                }
            }
            Op::Exp(a) => {
                if req(*a) {
                    accumulate(grads, *a, elementwise(val(*a), &|_, y, gv| gv * y));
                }
            }
            Op::Log(a) => {
                if req(*a) {
                    accumulate(grads, *a, elementwise(val(*a), &|x, _, gv| gv / x));
                }
            }
            Op::Softplus(a) => {
                if req(*a) {
                    accumulate(grads, *a, elementwise(val(*a), &|x, _, gv| gv * tensor::sigmoid(x)));
                }
            }
            Op::Softmax(a, axis) => {
                if req(*a) {
                    let (r, c) = out.dims2().expect("softmax output is 2-d");
                    let (outer, inner, so, si) =
                        if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    let y = out.values();
                    let gv = g.values();
                    let mut dx = vec![0.0; r * c];
                    for o in 0..outer {
                        let idx = |i: usize| o * so + i * si;
                        let dot: f64 = (0..inner).map(|i| y[idx(i)] * gv[idx(i)]).sum();
                        for i in 0..inner {
                            dx[idx(i)] = y[idx(i)] * (gv[idx(i)] - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::matrix(r, c, dx).expect("shape"));
                }
            }
            Op::Gather(table, indices) => {
                if req(*table) {
                    let (rows, cols) = val(*table).dims2().expect("gather table is 2-d");
                    let mut dt = vec![0.0; rows * cols];
                    for (k, &i) in indices.iter().enumerate() {
                        for (d, v) in dt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g.values()[k * cols..(k + 1) * cols])
                        {
                            *d += v;
                        }
                    }
                    accumulate(grads, *table, Tensor::matrix(rows, cols, dt).expect("shape"));
                }
            }
            Op::Dropout(a, mask) => {
                if req(*a) {
                    let values = g.values().iter().zip(mask).map(|(x, m)| x * m).collect();
                    accumulate(
                        grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), values).expect("shape"),
                    );
                }
            }
            Op::Sum(a) => {
                if req(*a) {
                    accumulate(grads, *a, Tensor::filled(val(*a).shape().to_vec(), g.item()));
                }
            }
            Op::Mean(a) => {
                if req(*a) {
                    let n = val(*a).len() as f64;
                    accumulate(
                        grads,
                        *a,
                        Tensor::filled(val(*a).shape().to_vec(), g.item() / n),
                    );
                }
            }
            Op::Map(a, derivative) => {
                if req(*a) {
                    let d = *derivative;
                    accumulate(grads, *a, elementwise(val(*a), &|x, y, gv| gv * d(x, y)));
                }
            }
        }
    }
}
