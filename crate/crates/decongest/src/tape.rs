//! Minimal reverse-mode autodiff tape for the relaxed mask objective.
//!
//! The differentiable proxy is a small, static computation graph: a tempered
//! softmax over mask logits, a handful of Gumbel top-k selection rounds, a
//! per-market linear score map, and a row-wise choice softmax feeding three
//! scalar reductions. Rather than pull in a general autodiff framework, this
//! tape implements exactly the operations that graph needs. Forward values
//! are computed eagerly as nodes are pushed; [`Tape::backward`] runs one
//! reverse sweep and returns adjoints for every node.

use std::sync::Arc;

use ndarray::Array2;

/// Handle to a node on the tape.
pub type NodeId = usize;

/// Suppression clamp: log(1 - alpha) is evaluated with alpha capped below 1.
pub const ONE_MINUS_EPS: f64 = 1.0 - 1e-12;

enum Op {
    /// Leaf whose adjoint is the gradient of interest.
    Input,
    /// Leaf treated as a constant (zero gradient).
    Const,
    /// Tempered softmax over the whole vector: y = softmax(x / temp).
    Softmax { src: NodeId, temp: f64 },
    /// Elementwise natural log.
    Log { src: NodeId },
    /// Elementwise sum of two nodes of equal length.
    AddVec { a: NodeId, b: NodeId },
    /// Add a constant vector elementwise (constant folded into the value).
    AddConstVec { src: NodeId },
    /// Add the same constant to every entry (constant folded into the value).
    AddScalarToAll { src: NodeId },
    /// Elementwise log(1 - min(x, ONE_MINUS_EPS)); gradient is zero where clamped.
    Log1mClamped { src: NodeId },
    /// Elementwise min(x, 1); gradient is zero where clamped.
    ClampUnit { src: NodeId },
    /// Elementwise 1 - x.
    OneMinus { src: NodeId },
    /// Elementwise max(x, 0); gradient is zero where clamped.
    Relu { src: NodeId },
    /// Constant matrix times node vector.
    MatVec { matrix: Arc<Array2<f64>>, src: NodeId },
    /// Row-wise tempered softmax over `rows x cols` scores with an appended
    /// fixed zero logit per row; output is `rows x (cols + 1)`, null column last.
    SoftmaxRowsWithNull { src: NodeId, rows: usize, cols: usize, temp: f64 },
    /// Column sums of a `rows x cols` node, dropping the last column.
    ColSumsDropLast { src: NodeId, rows: usize, cols: usize },
    /// Dot product with a constant weight vector (scalar output).
    Dot { src: NodeId, weights: Arc<Vec<f64>> },
    /// Sum of all entries (scalar output).
    Sum { src: NodeId },
    /// Affine combination of scalar nodes: sum of coeff * node + bias
    /// (bias folded into the value).
    Affine { terms: Vec<(NodeId, f64)> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Eagerly evaluated computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn softmax_tempered(x: &[f64], temp: f64) -> Vec<f64> {
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        hi = hi.max(v / temp);
    }
    let mut out: Vec<f64> = x.iter().map(|&v| (v / temp - hi).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn softmax(&mut self, src: NodeId, temp: f64) -> NodeId {
        let value = softmax_tempered(&self.nodes[src].value, temp);
        self.push(Op::Softmax { src, temp }, value)
    }

    pub fn log(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src].value.iter().map(|&v| v.ln()).collect();
        self.push(Op::Log { src }, value)
    }

    pub fn add_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len());
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(Op::AddVec { a, b }, value)
    }

    pub fn add_const_vec(&mut self, src: NodeId, offset: Arc<Vec<f64>>) -> NodeId {
        debug_assert_eq!(self.nodes[src].value.len(), offset.len());
        let value = self.nodes[src]
            .value
            .iter()
            .zip(offset.iter())
            .map(|(&x, &c)| x + c)
            .collect();
        self.push(Op::AddConstVec { src }, value)
    }

    pub fn add_scalar_to_all(&mut self, src: NodeId, offset: f64) -> NodeId {
        let value = self.nodes[src].value.iter().map(|&v| v + offset).collect();
        self.push(Op::AddScalarToAll { src }, value)
    }

    pub fn log1m_clamped(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src]
            .value
            .iter()
            .map(|&v| (1.0 - v.min(ONE_MINUS_EPS)).ln())
            .collect();
        self.push(Op::Log1mClamped { src }, value)
    }

    pub fn clamp_unit(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src].value.iter().map(|&v| v.min(1.0)).collect();
        self.push(Op::ClampUnit { src }, value)
    }

    pub fn one_minus(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src].value.iter().map(|&v| 1.0 - v).collect();
        self.push(Op::OneMinus { src }, value)
    }

    pub fn relu(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu { src }, value)
    }

    pub fn mat_vec(&mut self, matrix: Arc<Array2<f64>>, src: NodeId) -> NodeId {
        debug_assert_eq!(matrix.ncols(), self.nodes[src].value.len());
        let x = &self.nodes[src].value;
        let value = matrix
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum())
            .collect();
        self.push(Op::MatVec { matrix, src }, value)
    }

    pub fn softmax_rows_with_null(
        &mut self,
        src: NodeId,
        rows: usize,
        cols: usize,
        temp: f64,
    ) -> NodeId {
        debug_assert_eq!(self.nodes[src].value.len(), rows * cols);
        let x = &self.nodes[src].value;
        let mut value = vec![0.0; rows * (cols + 1)];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            // The null option contributes a fixed zero logit to every row.
            let mut hi: f64 = 0.0;
            for &v in row {
                hi = hi.max(v / temp);
            }
            let out = &mut value[i * (cols + 1)..(i + 1) * (cols + 1)];
            let mut total = 0.0;
            for (o, &v) in out[..cols].iter_mut().zip(row) {
                *o = (v / temp - hi).exp();
                total += *o;
            }
            out[cols] = (-hi).exp();
            total += out[cols];
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push(Op::SoftmaxRowsWithNull { src, rows, cols, temp }, value)
    }

    pub fn col_sums_drop_last(&mut self, src: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.nodes[src].value.len(), rows * cols);
        let x = &self.nodes[src].value;
        let mut value = vec![0.0; cols - 1];
        for i in 0..rows {
            for (j, v) in value.iter_mut().enumerate() {
                *v += x[i * cols + j];
            }
        }
        self.push(Op::ColSumsDropLast { src, rows, cols }, value)
    }

    pub fn dot(&mut self, src: NodeId, weights: Arc<Vec<f64>>) -> NodeId {
        debug_assert_eq!(self.nodes[src].value.len(), weights.len());
        let value = self.nodes[src]
            .value
            .iter()
            .zip(weights.iter())
            .map(|(&x, &w)| x * w)
            .sum();
        self.push(Op::Dot { src, weights }, vec![value])
    }

    pub fn sum(&mut self, src: NodeId) -> NodeId {
        let value = self.nodes[src].value.iter().sum();
        self.push(Op::Sum { src }, vec![value])
    }

    pub fn affine(&mut self, terms: Vec<(NodeId, f64)>, bias: f64) -> NodeId {
        let value = terms
            .iter()
            .map(|&(id, c)| {
                debug_assert_eq!(self.nodes[id].value.len(), 1);
                c * self.nodes[id].value[0]
            })
            .sum::<f64>()
            + bias;
        self.push(Op::Affine { terms }, vec![value])
    }

    /// Reverse sweep from a scalar `root`; returns one adjoint buffer per node.
    pub fn backward(&self, root: NodeId) -> Vec<Vec<f64>> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        adj[root][0] = 1.0;
        for id in (0..=root).rev() {
            // Split off this node's adjoint so upstream buffers stay borrowable.
            let g = std::mem::take(&mut adj[id]);
            if g.iter().all(|&v| v == 0.0) {
                adj[id] = g;
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Const => {}
                Op::Softmax { src, temp } => {
                    let y = &node.value;
                    let inner: f64 = y.iter().zip(&g).map(|(&q, &gq)| q * gq).sum();
                    for (a, (&q, &gq)) in adj[*src].iter_mut().zip(y.iter().zip(&g)) {
                        *a += q * (gq - inner) / temp;
                    }
                }
                Op::Log { src } => {
                    let x = &self.nodes[*src].value;
                    for (a, (&xv, &gv)) in adj[*src].iter_mut().zip(x.iter().zip(&g)) {
                        *a += gv / xv;
                    }
                }
                Op::AddVec { a, b } => {
                    for (dst, &gv) in adj[*a].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    for (dst, &gv) in adj[*b].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                }
                Op::AddConstVec { src } | Op::AddScalarToAll { src } => {
                    for (a, &gv) in adj[*src].iter_mut().zip(&g) {
                        *a += gv;
                    }
                }
                Op::Log1mClamped { src } => {
                    let x = &self.nodes[*src].value;
                    for (a, (&xv, &gv)) in adj[*src].iter_mut().zip(x.iter().zip(&g)) {
                        if xv < ONE_MINUS_EPS {
                            *a += -gv / (1.0 - xv);
                        }
                    }
                }
                Op::ClampUnit { src } => {
                    let x = &self.nodes[*src].value;
                    for (a, (&xv, &gv)) in adj[*src].iter_mut().zip(x.iter().zip(&g)) {
                        if xv <= 1.0 {
                            *a += gv;
                        }
                    }
                }
                Op::OneMinus { src } => {
                    for (a, &gv) in adj[*src].iter_mut().zip(&g) {
                        *a -= gv;
                    }
                }
                Op::Relu { src } => {
                    let x = &self.nodes[*src].value;
                    for (a, (&xv, &gv)) in adj[*src].iter_mut().zip(x.iter().zip(&g)) {
                        if xv > 0.0 {
                            *a += gv;
                        }
                    }
                }
                Op::MatVec { matrix, src } => {
                    let dst = &mut adj[*src];
                    for (row, &gv) in matrix.rows().into_iter().zip(&g) {
                        if gv == 0.0 {
                            continue;
                        }
                        for (a, &mv) in dst.iter_mut().zip(row.iter()) {
                            *a += gv * mv;
                        }
                    }
                }
                Op::SoftmaxRowsWithNull { src, rows, cols, temp } => {
                    let y = &node.value;
                    let dst = &mut adj[*src];
                    for i in 0..*rows {
                        let q = &y[i * (cols + 1)..(i + 1) * (cols + 1)];
                        let gr = &g[i * (cols + 1)..(i + 1) * (cols + 1)];
                        let inner: f64 = q.iter().zip(gr).map(|(&qa, &ga)| qa * ga).sum();
                        // The null logit is fixed, so only item columns receive gradient.
                        for j in 0..*cols {
                            dst[i * cols + j] += q[j] * (gr[j] - inner) / temp;
                        }
                    }
                }
                Op::ColSumsDropLast { src, rows, cols } => {
                    let dst = &mut adj[*src];
                    for i in 0..*rows {
                        for (j, &gv) in g.iter().enumerate() {
                            dst[i * cols + j] += gv;
                        }
                    }
                }
                Op::Dot { src, weights } => {
                    let gs = g[0];
                    for (a, &w) in adj[*src].iter_mut().zip(weights.iter()) {
                        *a += gs * w;
                    }
                }
                Op::Sum { src } => {
                    let gs = g[0];
                    for a in adj[*src].iter_mut() {
                        *a += gs;
                    }
                }
                Op::Affine { terms } => {
                    let gs = g[0];
                    for &(tid, c) in terms {
                        adj[tid][0] += gs * c;
                    }
                }
            }
            adj[id] = g;
        }
        adj
    }

    /// Gradient of scalar `root` with respect to the entries of `input`.
    pub fn gradient(&self, root: NodeId, input: NodeId) -> Vec<f64> {
        let mut adj = self.backward(root);
        std::mem::take(&mut adj[input])
    }
}
