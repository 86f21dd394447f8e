//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! A [`Graph`] is a flat tape of nodes. Every op appends a node whose inputs
//! refer to earlier nodes, so node ids are already in topological order and
//! [`Graph::backward`] is a single reverse sweep. All values are `f64`
//! matrices; scalars are 1x1 and row vectors are 1xN.

use ndarray::{concatenate, s, Array2, Axis};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a (m,k) . b (k,n)
    MatMul(NodeId, NodeId),
    /// a (m,k) . b^T where b is (n,k)
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// matrix (m,n) + row (1,n), broadcast over rows
    AddRow(NodeId, NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    /// per-row normalization with learned gain/bias rows (1,n)
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// gather rows of a table; repeated indices accumulate gradient
    RowSelect(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    /// column-wise mean over rows -> (1,n)
    MeanRows(NodeId),
    /// mean over all entries -> (1,1)
    MeanAll(NodeId),
    /// sum over all entries -> (1,1)
    SumAll(NodeId),
    /// mean over row-masked cross-entropy of softmax(logits) vs target ids -> (1,1)
    MaskedNll {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of matrix ops supporting a single backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, or zeros of the given shape when none flowed.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on node of shape {:?}", v.dim());
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Trainable input; gradients will be computed for it.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.nodes[a].value.dim();
        let (br, bc) = self.nodes[b].value.dim();
        assert_eq!(ac, br, "matmul {}x{} . {}x{}", ar, ac, br, bc);
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// a . b^T without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.nodes[a].value.dim();
        let (br, bc) = self.nodes[b].value.dim();
        assert_eq!(ac, bc, "matmul_nt {}x{} . ({}x{})^T", ar, ac, br, bc);
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim(), "add");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim(), "sub");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim(), "mul");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        let ng = self.nodes[a].needs_grad;
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, ac) = self.nodes[a].value.dim();
        let (rr, rc) = self.nodes[row].value.dim();
        assert_eq!((rr, rc), (1, ac), "add_row: row shape {}x{}", rr, rc);
        let v = &self.nodes[a].value + &self.nodes[row].value;
        let ng = self.any_grad(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        let ng = self.nodes[a].needs_grad;
        self.push(v, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows_val(&self.nodes[a].value);
        let ng = self.nodes[a].needs_grad;
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (_, n) = self.nodes[x].value.dim();
        assert_eq!(self.nodes[gain].value.dim(), (1, n), "layer_norm gain");
        assert_eq!(self.nodes[bias].value.dim(), (1, n), "layer_norm bias");
        let xv = &self.nodes[x].value;
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|e| (e - mean).powi(2)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, &e) in row.iter().enumerate() {
                v[(i, j)] = (e - mean) * inv * self.nodes[gain].value[(0, j)]
                    + self.nodes[bias].value[(0, j)];
            }
        }
        let ng = self.any_grad(&[x, gain, bias]);
        self.push(v, Op::LayerNorm { x, gain, bias }, ng)
    }

    pub fn row_select(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let (rows, _) = self.nodes[table].value.dim();
        for &i in indices {
            assert!(i < rows, "row_select index {} out of {} rows", i, rows);
        }
        let v = self.nodes[table].value.select(Axis(0), indices);
        let ng = self.nodes[table].needs_grad;
        self.push(v, Op::RowSelect(table, indices.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column widths differ");
        let ng = self.any_grad(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = self.any_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (_, n) = self.nodes[a].value.dim();
        assert!(start < end && end <= n, "slice_cols {}..{} of {}", start, end, n);
        let v = self.nodes[a].value.slice(s![.., start..end]).to_owned();
        let ng = self.nodes[a].needs_grad;
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .nodes[a]
            .value
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let ng = self.nodes[a].needs_grad;
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a].value.mean().expect("mean_all of empty matrix");
        let ng = self.nodes[a].needs_grad;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a].value.sum();
        let ng = self.nodes[a].needs_grad;
        self.push(Array2::from_elem((1, 1), m), Op::SumAll(a), ng)
    }

    /// Squared Frobenius norm of (a - b) as a scalar node.
    pub fn sq_diff_sum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.sum_all(d2)
    }

    /// Mean negative log-likelihood of `targets[i]` under softmax of row i,
    /// over rows where `mask[i]` is true. Numerically stable (log-sum-exp).
    pub fn masked_nll(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let (rows, cols) = self.nodes[logits].value.dim();
        assert_eq!(targets.len(), rows, "masked_nll: {} targets for {} rows", targets.len(), rows);
        assert_eq!(mask.len(), rows, "masked_nll: {} mask bits for {} rows", mask.len(), rows);
        let n_active = mask.iter().filter(|&&m| m).count();
        assert!(n_active > 0, "masked_nll: empty mask");
        let lv = &self.nodes[logits].value;
        let mut total = 0.0;
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            assert!(targets[i] < cols, "masked_nll: target {} out of vocab {}", targets[i], cols);
            let row = lv.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.mapv(|x| (x - mx).exp()).sum().ln();
            total += lse - row[targets[i]];
        }
        let v = Array2::from_elem((1, 1), total / n_active as f64);
        let ng = self.nodes[logits].needs_grad;
        self.push(
            v,
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; nodes the
    /// root does not depend on (or that were built from constants) carry none.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::ones((1, 1)));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn bump(
        &self,
        grads: &mut [Option<Array2<f64>>],
        target: NodeId,
        delta: &Array2<f64>,
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[*b].value.t());
                let db = self.nodes[*a].value.t().dot(g);
                self.bump(grads, *a, &da);
                self.bump(grads, *b, &db);
            }
            Op::MatMulNT(a, b) => {
                // y = a . b^T  =>  da = g . b ; db = g^T . a
                let da = g.dot(&self.nodes[*b].value);
                let db = g.t().dot(&self.nodes[*a].value);
                self.bump(grads, *a, &da);
                self.bump(grads, *b, &db);
            }
            Op::Add(a, b) => {
                self.bump(grads, *a, g);
                self.bump(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.bump(grads, *a, g);
                let neg = g.mapv(|x| -x);
                self.bump(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da = g * &self.nodes[*b].value;
                let db = g * &self.nodes[*a].value;
                self.bump(grads, *a, &da);
                self.bump(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da = g * *c;
                self.bump(grads, *a, &da);
            }
            Op::AddRow(a, row) => {
                self.bump(grads, *a, g);
                let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.bump(grads, *row, &drow);
            }
            Op::Silu(a) => {
                let da = self.nodes[*a].value.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                }) * g;
                self.bump(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut da = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(yj, gj)| yj * gj).sum();
                    for j in 0..y.ncols() {
                        da[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                self.bump(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (rows, n) = xv.dim();
                let nf = n as f64;
                let mut dx = Array2::zeros((rows, n));
                let mut dgain = Array2::zeros((1, n));
                let mut dbias = Array2::zeros((1, n));
                for i in 0..rows {
                    let row = xv.row(i);
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|e| (e - mean).powi(2)).mean().unwrap();
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    // dxh_j = g_j * gain_j ; standard layer-norm backward
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g[(i, j)] * gv[(0, j)];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[(0, j)] += g[(i, j)] * xh;
                        dbias[(0, j)] += g[(i, j)];
                    }
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = g[(i, j)] * gv[(0, j)];
                        dx[(i, j)] = inv * (dxh - sum_dxh / nf - xh * sum_dxh_xh / nf);
                    }
                }
                self.bump(grads, *x, &dx);
                self.bump(grads, *gain, &dgain);
                self.bump(grads, *bias, &dbias);
            }
            Op::RowSelect(table, indices) => {
                let (rows, cols) = self.nodes[*table].value.dim();
                let mut dt = Array2::zeros((rows, cols));
                for (out_row, &idx) in indices.iter().enumerate() {
                    for j in 0..cols {
                        dt[(idx, j)] += g[(out_row, j)];
                    }
                }
                self.bump(grads, *table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p].value.nrows();
                    let dp = g.slice(s![offset..offset + r, ..]).to_owned();
                    self.bump(grads, p, &dp);
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.ncols();
                    let dp = g.slice(s![.., offset..offset + c]).to_owned();
                    self.bump(grads, p, &dp);
                    offset += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (rows, cols) = self.nodes[*a].value.dim();
                let mut da = Array2::zeros((rows, cols));
                da.slice_mut(s![.., *start..*end]).assign(g);
                self.bump(grads, *a, &da);
            }
            Op::MeanRows(a) => {
                let rows = self.nodes[*a].value.nrows();
                let factor = 1.0 / rows as f64;
                let mut da = Array2::zeros(self.nodes[*a].value.dim());
                for i in 0..rows {
                    for j in 0..da.ncols() {
                        da[(i, j)] = g[(0, j)] * factor;
                    }
                }
                self.bump(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let dim = self.nodes[*a].value.dim();
                let factor = g[(0, 0)] / (dim.0 * dim.1) as f64;
                let da = Array2::from_elem(dim, factor);
                self.bump(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let dim = self.nodes[*a].value.dim();
                let da = Array2::from_elem(dim, g[(0, 0)]);
                self.bump(grads, *a, &da);
            }
            Op::MaskedNll {
                logits,
                targets,
                mask,
            } => {
                let lv = &self.nodes[*logits].value;
                let n_active = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g[(0, 0)] / n_active;
                let mut dl = Array2::zeros(lv.dim());
                for i in 0..lv.nrows() {
                    if !mask[i] {
                        continue;
                    }
                    let row = lv.row(i);
                    let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let exps = row.mapv(|x| (x - mx).exp());
                    let denom = exps.sum();
                    for j in 0..lv.ncols() {
                        let p = exps[j] / denom;
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[(i, j)] = scale * (p - onehot);
                    }
                }
                self.bump(grads, *logits, &dl);
            }
        }
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

fn softmax_rows_val(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps = row.mapv(|e| (e - mx).exp());
        let sum = exps.sum();
        for (j, e) in exps.iter().enumerate() {
            out[(i, j)] = e / sum;
        }
    }
    out
}
