//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every intermediate value as a node. Parameters enter
//! the tape through [`Graph::param`], which remembers the parameter name so
//! that [`evaluate_and_backward`] can accumulate gradients back into the
//! owning [`ParamStore`]. Shapes are either scalars `[]`, vectors `[n]` or
//! row-major matrices `[rows, cols]`; binary elementwise ops require identical
//! shapes and broadcasting is explicit via [`Graph::broadcast_rows`].

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Silu(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clip(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    MeanCols(NodeId),
    BroadcastRows(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<Option<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m,n] = a[m,k] * b[k,n]`. Each output row depends only on its input
/// row and accumulates in a fixed order, so results do not depend on how
/// rows are batched together.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() == 1 {
            Ok(v[0])
        } else {
            Err(Error::shape(
                "scalar",
                format!("node has {} elements", v.len()),
            ))
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// A constant input (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} vs {} values", value.len()),
            ));
        }
        self.push("constant", shape, value, Op::Leaf, false)
    }

    /// A differentiable leaf with no backing store entry; gradients for it
    /// can be read with [`Graph::backward`].
    pub fn variable(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        let id = self.constant(shape, value)?;
        self.nodes[id.0].needs_grad = true;
        Ok(id)
    }

    /// Brings a stored parameter onto the tape. Whether it is differentiated
    /// follows the tensor's `requires_grad` flag.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let t = store.get(name)?;
        self.push(
            "param",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(name.to_string()),
            t.requires_grad,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = rows_cols(self.shape(a))
            .ok_or_else(|| Error::shape("matmul", "left operand must be 2-D"))?;
        let (k2, n) = rows_cols(self.shape(b))
            .ok_or_else(|| Error::shape("matmul", "right operand must be 2-D"))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let value = matmul_into(self.value(a), self.value(b), m, k, n);
        let g = self.grad_of(&[a, b]);
        self.push("matmul", vec![m, n], value, Op::MatMul(a, b), g)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a, b]);
        self.push(name, shape, value, op, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a]);
        self.push(name, shape, value, op, g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Clamp into `[lo, hi]`. The gradient is zero outside the interval.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clip bounds {lo} > {hi}")));
        }
        self.unary("clip", a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).iter().sum();
        let g = self.grad_of(&[a]);
        self.push("sum", vec![], vec![s], Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let g = self.grad_of(&[a]);
        self.push("mean", vec![], vec![s], Op::Mean(a), g)
    }

    /// Row means of a `[rows, cols]` matrix, giving `[rows]`.
    pub fn mean_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = rows_cols(self.shape(a))
            .ok_or_else(|| Error::shape("mean_cols", "operand must be 2-D"))?;
        if c == 0 {
            return Err(Error::shape("mean_cols", "zero columns"));
        }
        let v = self.value(a);
        let value = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let g = self.grad_of(&[a]);
        self.push("mean_cols", vec![r], value, Op::MeanCols(a), g)
    }

    /// Repeats a `[cols]` vector into a `[rows, cols]` matrix.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let c = match self.shape(a) {
            [c] => *c,
            s => {
                return Err(Error::shape(
                    "broadcast_rows",
                    format!("expected 1-D, got {s:?}"),
                ))
            }
        };
        let v = self.value(a);
        let mut value = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            value.extend_from_slice(v);
        }
        let g = self.grad_of(&[a]);
        self.push(
            "broadcast_rows",
            vec![rows, c],
            value,
            Op::BroadcastRows(a),
            g,
        )
    }

    /// Concatenates `[rows, c_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no operands"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(
                rows_cols(self.shape(p))
                    .ok_or_else(|| Error::shape("concat_cols", "operands must be 2-D"))?,
            );
        }
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {dims:?}"),
            ));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut value = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let g = self.grad_of(parts);
        self.push(
            "concat_cols",
            vec![rows, total],
            value,
            Op::ConcatCols(parts.to_vec()),
            g,
        )
    }

    /// Selects rows of a `[n, cols]` table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[Option<usize>]) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(table))
            .ok_or_else(|| Error::shape("gather_rows", "table must be 2-D"))?;
        let v = self.value(table);
        let mut value = Vec::with_capacity(idx.len() * c);
        for i in idx {
            match *i {
                Some(i) if i < n => value.extend_from_slice(&v[i * c..(i + 1) * c]),
                Some(i) => {
                    return Err(Error::shape("gather_rows", format!("row {i} of {n}")));
                }
                None => value.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let g = self.grad_of(&[table]);
        self.push(
            "gather_rows",
            vec![idx.len(), c],
            value,
            Op::GatherRows(table, idx.to_vec()),
            g,
        )
    }

    /// Reverse sweep from a scalar `root`. Returns the adjoint of every node
    /// that participates in differentiation.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Ok(adj);
        }
        adj[root.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, delta: Vec<f64>) {
            if !nodes[id.0].needs_grad {
                return;
            }
            match adj[id.0].as_mut() {
                Some(a) => a.iter_mut().zip(&delta).for_each(|(x, d)| *x += d),
                None => adj[id.0] = Some(delta),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            // Leaf adjoints stay in place for callers that read them.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(up) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = rows_cols(self.shape(*a)).unwrap();
                    let n = self.shape(*b)[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = urow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        acc(&mut adj, &self.nodes, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aval = av[i * k + p];
                                if aval == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, &u) in drow.iter_mut().zip(urow) {
                                    *d += aval * u;
                                }
                            }
                        }
                        acc(&mut adj, &self.nodes, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, &self.nodes, *a, up.clone());
                    acc(&mut adj, &self.nodes, *b, up);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, &self.nodes, *b, up.iter().map(|u| -u).collect());
                    acc(&mut adj, &self.nodes, *a, up);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = up.iter().zip(bv).map(|(u, y)| u * y).collect();
                    let db = up.iter().zip(av).map(|(u, x)| u * x).collect();
                    acc(&mut adj, &self.nodes, *a, da);
                    acc(&mut adj, &self.nodes, *b, db);
                }
                Op::Minimum(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let pick_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                    let da = up
                        .iter()
                        .zip(&pick_a)
                        .map(|(u, &p)| if p { *u } else { 0.0 })
                        .collect();
                    let db = up
                        .iter()
                        .zip(&pick_a)
                        .map(|(u, &p)| if p { 0.0 } else { *u })
                        .collect();
                    acc(&mut adj, &self.nodes, *a, da);
                    acc(&mut adj, &self.nodes, *b, db);
                }
                Op::Scale(a, s) => {
                    acc(
                        &mut adj,
                        &self.nodes,
                        *a,
                        up.iter().map(|u| u * s).collect(),
                    );
                }
                Op::AddScalar(a) => acc(&mut adj, &self.nodes, *a, up),
                Op::Tanh(a) => {
                    let d = up
                        .iter()
                        .zip(&node.value)
                        .map(|(u, y)| u * (1.0 - y * y))
                        .collect();
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::Silu(a) => {
                    let d = up
                        .iter()
                        .zip(self.value(*a))
                        .map(|(u, &x)| {
                            let s = sigmoid(x);
                            u * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::Square(a) => {
                    let d = up
                        .iter()
                        .zip(self.value(*a))
                        .map(|(u, x)| 2.0 * u * x)
                        .collect();
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::Exp(a) => {
                    let d = up.iter().zip(&node.value).map(|(u, y)| u * y).collect();
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::Log(a) => {
                    let d = up.iter().zip(self.value(*a)).map(|(u, x)| u / x).collect();
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::Clip(a, lo, hi) => {
                    let d = up
                        .iter()
                        .zip(self.value(*a))
                        .map(|(u, &x)| if x >= *lo && x <= *hi { *u } else { 0.0 })
                        .collect();
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, &self.nodes, *a, vec![up[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, &self.nodes, *a, vec![up[0] / n as f64; n]);
                }
                Op::MeanCols(a) => {
                    let (r, c) = rows_cols(self.shape(*a)).unwrap();
                    let mut d = Vec::with_capacity(r * c);
                    for u in up.iter().take(r) {
                        d.extend(std::iter::repeat_n(u / c as f64, c));
                    }
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::BroadcastRows(a) => {
                    let (r, c) = rows_cols(&node.shape).unwrap();
                    let mut d = vec![0.0; c];
                    for i in 0..r {
                        for (x, u) in d.iter_mut().zip(&up[i * c..(i + 1) * c]) {
                            *x += u;
                        }
                    }
                    acc(&mut adj, &self.nodes, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if self.nodes[p.0].needs_grad {
                            let mut d = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                d.extend_from_slice(
                                    &up[i * total + offset..i * total + offset + c],
                                );
                            }
                            acc(&mut adj, &self.nodes, p, d);
                        }
                        offset += c;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let c = self.shape(*table)[1];
                    let mut d = vec![0.0; self.value(*table).len()];
                    for (row, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for (x, u) in d[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&up[row * c..(row + 1) * c])
                            {
                                *x += u;
                            }
                        }
                    }
                    acc(&mut adj, &self.nodes, *table, d);
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of scalar `root` with respect to a leaf created by
    /// [`Graph::variable`] or [`Graph::param`].
    pub fn grad_wrt(&self, root: NodeId, leaf: NodeId) -> Result<Vec<f64>> {
        let adj = self.backward(root)?;
        Ok(adj[leaf.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.value(leaf).len()]))
    }
}

/// Runs the reverse sweep from scalar `root` and adds d(root)/d(param) into
/// the gradient buffer of every trainable parameter that appears on the tape.
/// Gradients accumulate across calls until the caller zeroes them.
pub fn evaluate_and_backward(graph: &Graph, root: NodeId, params: &mut ParamStore) -> Result<f64> {
    let value = graph.scalar(root)?;
    let adj = graph.backward(root)?;
    for (node, a) in graph.nodes.iter().zip(adj) {
        if let (Op::Param(name), Some(g)) = (&node.op, a) {
            let t = params.get_mut(name)?;
            if t.requires_grad {
                t.accumulate_grad(&g)?;
            }
        }
    }
    Ok(value)
}
