//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A `Graph` is an append-only tape: every operation evaluates eagerly and
//! records enough to replay its local backward rule. Parents always have
//! lower indices than children, so one reverse sweep visits each node once.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Init, ParamStore};

/// Sentinel mask entries: keep is any finite 0/1, kill is -inf.
pub const MASK_KILL: f64 = f64::NEG_INFINITY;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRowBroadcast(usize, usize),
    Scale(usize, f64),
    ScaleByScalar(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    MaskedSoftmax { x: usize, keep: Vec<bool> },
    LayerNorm { x: usize, gain: usize, offset: usize, eps: f64 },
    Gather { table: usize, ids: Vec<usize>, zero_id: Option<usize> },
    Sum(usize),
    MeanRows { x: usize, rows: Vec<usize> },
    ConcatCols(usize, usize),
    SliceCol(usize, usize),
    Reshape(usize),
    BroadcastRow(usize),
    DiagToRow(usize),
    DiagFromRow(usize),
    Inverse(usize),
    BceLogitsMean { x: usize, targets: Matrix },
    BceProbsSum { p: usize, targets: Matrix },
    CrossEntropyLogits { logits: usize, label: usize },
}

struct NodeData {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

/// Computation tape. Cheap to build per record and discard after backward.
pub struct Graph {
    nodes: RefCell<Vec<NodeData>>,
    params: RefCell<Vec<(String, usize)>>,
    ridge_retries: Cell<usize>,
}

/// Handle to a node; copyable, valid for the graph's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            ridge_retries: Cell::new(0),
        }
    }

    /// Count of matrix inversions that needed a ridge fallback.
    pub fn ridge_retries(&self) -> usize {
        self.ridge_retries.get()
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let grad = Matrix::zeros(value.rows(), value.cols());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(NodeData { value, grad, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Matrix {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Matrix::from_vec(1, 1, vec![v]))
    }

    /// Leaf bound to a named parameter; gradients flow back to the store
    /// through `export_grads`. Initializes the parameter on first use.
    pub fn param(
        &self,
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Var<'_> {
        let value = store.get_or_init(name, rows, cols, init).clone();
        let var = self.push(value, Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), var.id));
        var
    }

    /// Adds this graph's parameter gradients into the store.
    pub fn export_grads(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        for (name, id) in self.params.borrow().iter() {
            store.add_grad(name, &nodes[*id].grad);
        }
    }

    pub fn reset_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad.data_mut().fill(0.0);
        }
    }

    pub fn add<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        let value = self.value_of(a.id).add(&self.nodes.borrow()[b.id].value);
        self.push(value, Op::Add(a.id, b.id))
    }

    pub fn sub<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        let value = self.value_of(a.id).sub(&self.nodes.borrow()[b.id].value);
        self.push(value, Op::Sub(a.id, b.id))
    }

    pub fn mul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        drop(nodes);
        self.push(value, Op::Mul(a.id, b.id))
    }

    pub fn matmul<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value.matmul(&nodes[b.id].value);
        drop(nodes);
        self.push(value, Op::MatMul(a.id, b.id))
    }

    /// x (n x d) + row (1 x d) broadcast over rows.
    pub fn add_row_broadcast<'g>(&'g self, x: Var<'g>, row: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let (vx, vr) = (&nodes[x.id].value, &nodes[row.id].value);
        assert_eq!(vr.rows(), 1, "broadcast operand must be a single row");
        assert_eq!(vr.cols(), vx.cols(), "broadcast width mismatch");
        let mut value = vx.clone();
        for r in 0..value.rows() {
            for c in 0..value.cols() {
                value.add_at(r, c, vr.get(0, c));
            }
        }
        drop(nodes);
        self.push(value, Op::AddRowBroadcast(x.id, row.id))
    }

    pub fn scale<'g>(&'g self, x: Var<'g>, c: f64) -> Var<'g> {
        let value = self.nodes.borrow()[x.id].value.scale(c);
        self.push(value, Op::Scale(x.id, c))
    }

    /// Scales every entry of `x` by the 1x1 node `s`.
    pub fn scale_by_scalar<'g>(&'g self, x: Var<'g>, s: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[s.id].value.shape(), (1, 1), "scalar operand must be 1x1");
        let sv = nodes[s.id].value.get(0, 0);
        let value = nodes[x.id].value.scale(sv);
        drop(nodes);
        self.push(value, Op::ScaleByScalar(x.id, s.id))
    }

    pub fn transpose<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let value = self.nodes.borrow()[x.id].value.transpose();
        self.push(value, Op::Transpose(x.id))
    }

    pub fn relu<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let value = self.nodes.borrow()[x.id].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(x.id))
    }

    pub fn sigmoid<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let value = self.nodes.borrow()[x.id].value.map(sigmoid);
        self.push(value, Op::Sigmoid(x.id))
    }

    pub fn exp<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let value = self.nodes.borrow()[x.id].value.map(f64::exp);
        self.push(value, Op::Exp(x.id))
    }

    pub fn clamp<'g>(&'g self, x: Var<'g>, lo: f64, hi: f64) -> Var<'g> {
        let value = self.nodes.borrow()[x.id].value.map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x.id, lo, hi))
    }

    /// Row softmax under a {0|1, -inf} mask; masked cells are exactly 0.
    ///
    /// Finite mask entries keep a cell, `-inf` kills it. A fully-killed row is
    /// rejected: its softmax is undefined.
    pub fn masked_softmax<'g>(&'g self, x: Var<'g>, mask: &Matrix) -> Result<Var<'g>> {
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        if mask.shape() != vx.shape() {
            return Err(Error::invalid(format!(
                "mask shape {:?} does not match scores shape {:?}",
                mask.shape(),
                vx.shape()
            )));
        }
        let mut keep = Vec::with_capacity(mask.len());
        for &m in mask.data() {
            if m == MASK_KILL {
                keep.push(false);
            } else if m == 0.0 || m == 1.0 {
                keep.push(true);
            } else {
                return Err(Error::invalid(format!(
                    "mask entries must be 0, 1, or -inf, found {m}"
                )));
            }
        }
        let value = softmax_rows_kept(vx, &keep).map_err(|row| {
            Error::invalid(format!("softmax row {row} is fully masked"))
        })?;
        drop(nodes);
        Ok(self.push(value, Op::MaskedSoftmax { x: x.id, keep }))
    }

    /// Unmasked row softmax.
    pub fn softmax_rows<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let (r, c) = self.nodes.borrow()[x.id].value.shape();
        let mask = Matrix::zeros(r, c);
        self.masked_softmax(x, &mask)
            .expect("all-keep mask cannot fail")
    }

    /// Per-row normalization: (x - mean)/sqrt(var + eps) * gain + offset.
    pub fn layer_norm<'g>(&'g self, x: Var<'g>, gain: Var<'g>, offset: Var<'g>, eps: f64) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        let vg = &nodes[gain.id].value;
        let vo = &nodes[offset.id].value;
        assert_eq!(vg.shape(), (1, vx.cols()), "layer norm gain shape");
        assert_eq!(vo.shape(), (1, vx.cols()), "layer norm offset shape");
        let mut value = Matrix::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            let (mean, inv) = row_norm_stats(vx.row(r), eps);
            for c in 0..vx.cols() {
                let xhat = (vx.get(r, c) - mean) * inv;
                value.set(r, c, xhat * vg.get(0, c) + vo.get(0, c));
            }
        }
        drop(nodes);
        self.push(
            value,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                offset: offset.id,
                eps,
            },
        )
    }

    /// Row lookup: output row i is `table` row `ids[i]`.
    ///
    /// When `zero_id` matches an id, that output row is constant zero and the
    /// table row is neither read nor updated; it stands for "no entry".
    pub fn gather<'g>(&'g self, table: Var<'g>, ids: &[usize], zero_id: Option<usize>) -> Result<Var<'g>> {
        let nodes = self.nodes.borrow();
        let vt = &nodes[table.id].value;
        let mut value = Matrix::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            if Some(id) == zero_id {
                continue;
            }
            if id >= vt.rows() {
                return Err(Error::invalid(format!(
                    "lookup id {id} out of range for table with {} rows",
                    vt.rows()
                )));
            }
            for c in 0..vt.cols() {
                value.set(r, c, vt.get(id, c));
            }
        }
        drop(nodes);
        Ok(self.push(
            value,
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
                zero_id,
            },
        ))
    }

    pub fn sum<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let total: f64 = self.nodes.borrow()[x.id].value.data().iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![total]), Op::Sum(x.id))
    }

    /// Mean of the selected rows, as a single row.
    pub fn mean_rows<'g>(&'g self, x: Var<'g>, rows: &[usize]) -> Var<'g> {
        assert!(!rows.is_empty(), "mean over empty row set");
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        let mut value = Matrix::zeros(1, vx.cols());
        for &r in rows {
            assert!(r < vx.rows(), "row index out of range");
            for c in 0..vx.cols() {
                value.add_at(0, c, vx.get(r, c));
            }
        }
        let scale = 1.0 / rows.len() as f64;
        let value = value.scale(scale);
        drop(nodes);
        self.push(
            value,
            Op::MeanRows {
                x: x.id,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_cols<'g>(&'g self, a: Var<'g>, b: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
        assert_eq!(va.rows(), vb.rows(), "concat row mismatch");
        let mut value = Matrix::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            for c in 0..va.cols() {
                value.set(r, c, va.get(r, c));
            }
            for c in 0..vb.cols() {
                value.set(r, va.cols() + c, vb.get(r, c));
            }
        }
        drop(nodes);
        self.push(value, Op::ConcatCols(a.id, b.id))
    }

    pub fn slice_col<'g>(&'g self, x: Var<'g>, col: usize) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        assert!(col < vx.cols(), "column out of range");
        let mut value = Matrix::zeros(vx.rows(), 1);
        for r in 0..vx.rows() {
            value.set(r, 0, vx.get(r, col));
        }
        drop(nodes);
        self.push(value, Op::SliceCol(x.id, col))
    }

    pub fn reshape<'g>(&'g self, x: Var<'g>, rows: usize, cols: usize) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        assert_eq!(vx.len(), rows * cols, "reshape size mismatch");
        let value = Matrix::from_vec(rows, cols, vx.data().to_vec());
        drop(nodes);
        self.push(value, Op::Reshape(x.id))
    }

    pub fn broadcast_row<'g>(&'g self, row: Var<'g>, count: usize) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vr = &nodes[row.id].value;
        assert_eq!(vr.rows(), 1, "broadcast source must be a single row");
        let mut value = Matrix::zeros(count, vr.cols());
        for r in 0..count {
            for c in 0..vr.cols() {
                value.set(r, c, vr.get(0, c));
            }
        }
        drop(nodes);
        self.push(value, Op::BroadcastRow(row.id))
    }

    pub fn diag_to_row<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        assert_eq!(vx.rows(), vx.cols(), "diagonal of a non-square matrix");
        let mut value = Matrix::zeros(1, vx.rows());
        for i in 0..vx.rows() {
            value.set(0, i, vx.get(i, i));
        }
        drop(nodes);
        self.push(value, Op::DiagToRow(x.id))
    }

    pub fn diag_from_row<'g>(&'g self, row: Var<'g>) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vr = &nodes[row.id].value;
        assert_eq!(vr.rows(), 1, "diagonal source must be a single row");
        let n = vr.cols();
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            value.set(i, i, vr.get(0, i));
        }
        drop(nodes);
        self.push(value, Op::DiagFromRow(row.id))
    }

    /// Matrix inverse; on a singular input retries once with a 1e-9 ridge.
    pub fn inverse<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        let vx = self.value_of(x.id);
        let value = match vx.inverse() {
            Ok(inv) => inv,
            Err(Error::Numerical(_)) => {
                self.ridge_retries.set(self.ridge_retries.get() + 1);
                let ridged = vx.add(&Matrix::identity(vx.rows()).scale(1e-9));
                ridged.inverse()?
            }
            Err(e) => return Err(e),
        };
        Ok(self.push(value, Op::Inverse(x.id)))
    }

    /// Mean over all cells of the binary cross-entropy between sigmoid(x)
    /// and binary targets, in the numerically stable logits form.
    pub fn bce_logits_mean<'g>(&'g self, x: Var<'g>, targets: &Matrix) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vx = &nodes[x.id].value;
        assert_eq!(vx.shape(), targets.shape(), "target shape mismatch");
        let mut total = 0.0;
        for (&a, &y) in vx.data().iter().zip(targets.data()) {
            total += a.max(0.0) - a * y + (-a.abs()).exp().ln_1p();
        }
        let value = Matrix::from_vec(1, 1, vec![total / vx.len() as f64]);
        drop(nodes);
        self.push(
            value,
            Op::BceLogitsMean {
                x: x.id,
                targets: targets.clone(),
            },
        )
    }

    /// Sum over all cells of the binary cross-entropy between probabilities
    /// (clamped to [1e-12, 1 - 1e-12]) and binary targets.
    pub fn bce_probs_sum<'g>(&'g self, p: Var<'g>, targets: &Matrix) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vp = &nodes[p.id].value;
        assert_eq!(vp.shape(), targets.shape(), "target shape mismatch");
        let mut total = 0.0;
        for (&p_raw, &y) in vp.data().iter().zip(targets.data()) {
            let p = clamp_prob(p_raw);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let value = Matrix::from_vec(1, 1, vec![total]);
        drop(nodes);
        self.push(
            value,
            Op::BceProbsSum {
                p: p.id,
                targets: targets.clone(),
            },
        )
    }

    /// -ln softmax(logits)[label] for a single-row logits matrix.
    pub fn cross_entropy_logits<'g>(&'g self, logits: Var<'g>, label: usize) -> Var<'g> {
        let nodes = self.nodes.borrow();
        let vl = &nodes[logits.id].value;
        assert_eq!(vl.rows(), 1, "logits must be a single row");
        assert!(label < vl.cols(), "label out of range");
        let row = vl.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let value = Matrix::from_vec(1, 1, vec![lse - row[label]]);
        drop(nodes);
        self.push(
            value,
            Op::CrossEntropyLogits {
                logits: logits.id,
                label,
            },
        )
    }

    /// Seeds the scalar loss gradient and sweeps the tape in reverse.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let l = &nodes[loss.id];
            if l.value.shape() != (1, 1) {
                return Err(Error::invalid(format!(
                    "backward requires a scalar loss, got {:?}",
                    l.value.shape()
                )));
            }
            if !l.value.get(0, 0).is_finite() {
                return Err(Error::numerical("loss is not finite"));
            }
        }
        nodes[loss.id].grad.set(0, 0, 1.0);

        for i in (0..=loss.id).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            backward_step(node, before);
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Matrix {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn grad(&self) -> Matrix {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "not a scalar node");
        v.get(0, 0)
    }
}

/// Nonlinearity applied by the graph-convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// One graph-convolution layer: act(A * H * W + b) with b broadcast over rows.
pub fn graph_conv<'g>(
    g: &'g Graph,
    a: Var<'g>,
    h: Var<'g>,
    w: Var<'g>,
    b: Var<'g>,
    act: Activation,
) -> Var<'g> {
    let pre = g.add_row_broadcast(g.matmul(g.matmul(a, h), w), b);
    match act {
        Activation::Relu => g.relu(pre),
        Activation::Sigmoid => g.sigmoid(pre),
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

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Row softmax over kept cells only; killed cells become exactly 0.
/// Returns Err(row index) if some row keeps nothing.
fn softmax_rows_kept(x: &Matrix, keep: &[bool]) -> std::result::Result<Matrix, usize> {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            if keep[r * cols + c] {
                max = max.max(x.get(r, c));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(r);
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if keep[r * cols + c] {
                let e = (x.get(r, c) - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..cols {
            if keep[r * cols + c] {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
    }
    Ok(out)
}

fn backward_step(node: &NodeData, before: &mut [NodeData]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(&mut before[*a].grad, g.data());
            accumulate(&mut before[*b].grad, g.data());
        }
        Op::Sub(a, b) => {
            accumulate(&mut before[*a].grad, g.data());
            for (d, s) in before[*b].grad.data_mut().iter_mut().zip(g.data()) {
                *d -= s;
            }
        }
        Op::Mul(a, b) => {
            // Contributions are computed first so a == b works (e.g. x*x).
            let da: Vec<f64> = g
                .data()
                .iter()
                .zip(before[*b].value.data())
                .map(|(gv, v)| gv * v)
                .collect();
            let db: Vec<f64> = g
                .data()
                .iter()
                .zip(before[*a].value.data())
                .map(|(gv, v)| gv * v)
                .collect();
            accumulate(&mut before[*a].grad, &da);
            accumulate(&mut before[*b].grad, &db);
        }
        Op::MatMul(a, b) => {
            let da = g.matmul(&before[*b].value.transpose());
            let db = before[*a].value.transpose().matmul(g);
            accumulate(&mut before[*a].grad, da.data());
            accumulate(&mut before[*b].grad, db.data());
        }
        Op::AddRowBroadcast(x, row) => {
            accumulate(&mut before[*x].grad, g.data());
            let rg = &mut before[*row].grad;
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    rg.add_at(0, c, g.get(r, c));
                }
            }
        }
        Op::Scale(x, c) => {
            for (d, s) in before[*x].grad.data_mut().iter_mut().zip(g.data()) {
                *d += s * c;
            }
        }
        Op::ScaleByScalar(x, s) => {
            let sv = before[*s].value.get(0, 0);
            let dot: f64 = g
                .data()
                .iter()
                .zip(before[*x].value.data())
                .map(|(gv, xv)| gv * xv)
                .sum();
            for (d, gv) in before[*x].grad.data_mut().iter_mut().zip(g.data()) {
                *d += gv * sv;
            }
            before[*s].grad.add_at(0, 0, dot);
        }
        Op::Transpose(x) => {
            let gt = g.transpose();
            accumulate(&mut before[*x].grad, gt.data());
        }
        Op::Relu(x) => {
            let nx = &mut before[*x];
            for i in 0..g.len() {
                if nx.value.data()[i] > 0.0 {
                    nx.grad.data_mut()[i] += g.data()[i];
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            let nx = &mut before[*x];
            for i in 0..g.len() {
                let v = y.data()[i];
                nx.grad.data_mut()[i] += g.data()[i] * v * (1.0 - v);
            }
        }
        Op::Exp(x) => {
            let y = &node.value;
            let nx = &mut before[*x];
            for i in 0..g.len() {
                nx.grad.data_mut()[i] += g.data()[i] * y.data()[i];
            }
        }
        Op::Clamp(x, lo, hi) => {
            let nx = &mut before[*x];
            for i in 0..g.len() {
                let v = nx.value.data()[i];
                if v > *lo && v < *hi {
                    nx.grad.data_mut()[i] += g.data()[i];
                }
            }
        }
        Op::MaskedSoftmax { x, keep } => {
            let y = &node.value;
            let cols = y.cols();
            let nx = &mut before[*x];
            for r in 0..y.rows() {
                let mut dot = 0.0;
                for c in 0..cols {
                    if keep[r * cols + c] {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                }
                for c in 0..cols {
                    if keep[r * cols + c] {
                        let v = y.get(r, c) * (g.get(r, c) - dot);
                        nx.grad.add_at(r, c, v);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, offset, eps } => {
            // Recompute per-row stats from the stored input.
            let (xv, cols) = {
                let nx = &before[*x];
                (nx.value.clone(), nx.value.cols())
            };
            let gv = before[*gain].value.clone();
            let d = cols as f64;
            for r in 0..xv.rows() {
                let (mean, inv) = row_norm_stats(xv.row(r), *eps);
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                let mut dxhat = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                for c in 0..cols {
                    xhat[c] = (xv.get(r, c) - mean) * inv;
                    dxhat[c] = g.get(r, c) * gv.get(0, c);
                    sum_dxhat += dxhat[c];
                    sum_dxhat_xhat += dxhat[c] * xhat[c];
                    before[*gain].grad.add_at(0, c, g.get(r, c) * xhat[c]);
                    before[*offset].grad.add_at(0, c, g.get(r, c));
                }
                for c in 0..cols {
                    let v = inv * (dxhat[c] - sum_dxhat / d - xhat[c] * sum_dxhat_xhat / d);
                    before[*x].grad.add_at(r, c, v);
                }
            }
        }
        Op::Gather { table, ids, zero_id } => {
            let nt = &mut before[*table];
            for (r, &id) in ids.iter().enumerate() {
                if Some(id) == *zero_id {
                    continue;
                }
                for c in 0..g.cols() {
                    nt.grad.add_at(id, c, g.get(r, c));
                }
            }
        }
        Op::Sum(x) => {
            let gv = g.get(0, 0);
            for d in before[*x].grad.data_mut().iter_mut() {
                *d += gv;
            }
        }
        Op::MeanRows { x, rows } => {
            let scale = 1.0 / rows.len() as f64;
            let nx = &mut before[*x];
            for &r in rows {
                for c in 0..g.cols() {
                    nx.grad.add_at(r, c, g.get(0, c) * scale);
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let a_cols = before[*a].value.cols();
            let b_cols = before[*b].value.cols();
            for r in 0..g.rows() {
                for c in 0..a_cols {
                    before[*a].grad.add_at(r, c, g.get(r, c));
                }
            }
            for r in 0..g.rows() {
                for c in 0..b_cols {
                    before[*b].grad.add_at(r, c, g.get(r, a_cols + c));
                }
            }
        }
        Op::SliceCol(x, col) => {
            let nx = &mut before[*x];
            for r in 0..g.rows() {
                nx.grad.add_at(r, *col, g.get(r, 0));
            }
        }
        Op::Reshape(x) => {
            accumulate(&mut before[*x].grad, g.data());
        }
        Op::BroadcastRow(row) => {
            let nr = &mut before[*row];
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    nr.grad.add_at(0, c, g.get(r, c));
                }
            }
        }
        Op::DiagToRow(x) => {
            let nx = &mut before[*x];
            for i in 0..g.cols() {
                nx.grad.add_at(i, i, g.get(0, i));
            }
        }
        Op::DiagFromRow(row) => {
            let nr = &mut before[*row];
            for i in 0..g.rows() {
                nr.grad.add_at(0, i, g.get(i, i));
            }
        }
        Op::Inverse(x) => {
            // dX = -Y^T G Y^T with Y the stored inverse.
            let yt = node.value.transpose();
            let dx = yt.matmul(g).matmul(&yt).scale(-1.0);
            accumulate(&mut before[*x].grad, dx.data());
        }
        Op::BceLogitsMean { x, targets } => {
            let gv = g.get(0, 0) / targets.len() as f64;
            let nx = &mut before[*x];
            for i in 0..targets.len() {
                let a = nx.value.data()[i];
                let y = targets.data()[i];
                nx.grad.data_mut()[i] += gv * (sigmoid(a) - y);
            }
        }
        Op::BceProbsSum { p, targets } => {
            let gv = g.get(0, 0);
            let np = &mut before[*p];
            for i in 0..targets.len() {
                let raw = np.value.data()[i];
                if raw <= 1e-12 || raw >= 1.0 - 1e-12 {
                    continue;
                }
                let y = targets.data()[i];
                np.grad.data_mut()[i] += gv * (raw - y) / (raw * (1.0 - raw));
            }
        }
        Op::CrossEntropyLogits { logits, label } => {
            let gv = g.get(0, 0);
            let nl = &mut before[*logits];
            let row = nl.value.row(0);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let sm: Vec<f64> = row.iter().map(|&v| (v - max).exp() / sum).collect();
            for (c, smc) in sm.iter().enumerate() {
                let onehot = if c == *label { 1.0 } else { 0.0 };
                nl.grad.add_at(0, c, gv * (smc - onehot));
            }
        }
    }
}

fn accumulate(dst: &mut Matrix, src: &[f64]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}
