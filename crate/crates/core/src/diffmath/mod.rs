//! Reverse-mode automatic differentiation over dense real matrices.
//!
//! Operations are recorded on an append-only [`Tape`]; forward values are
//! computed eagerly at record time. The reverse pass ([`Tape::grad_nodes`])
//! builds the adjoints *as new tape nodes*, so a gradient is itself a
//! differentiable value. That is what lets an optimizer step consume a
//! gradient and still be differentiated later: a chain of parameter updates
//! (including Adam moment arithmetic) stays a closed expression on the tape,
//! and an outer objective can be backpropagated through all of it.
//!
//! The op set is intentionally small: elementwise arithmetic, matrix product,
//! reductions, row-wise (masked) softmax/entropy, and the gather/scatter and
//! segment ops used to build pairwise-weighted sums over trajectories.

mod mat;

pub mod gradcheck;

pub use mat::Mat;

use std::collections::BTreeMap;
use std::sync::Arc;

/// Index of a node on a tape. Dense and strictly increasing; every input of a
/// node has a smaller id than the node itself.
pub type NodeId = usize;

/// Handle to a tape node, carrying its shape. Cheap to copy; only meaningful
/// together with the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiffValue {
    id: NodeId,
    rows: usize,
    cols: usize,
}

impl DiffValue {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: non-finite value at node {node}")]
    NonFinite { op: &'static str, node: NodeId },
    #[error("{op}: domain violation at node {node} ({detail})")]
    Domain { op: &'static str, node: NodeId, detail: &'static str },
    #[error("backward: objective must be a scalar, got {rows}x{cols}")]
    NonScalarObjective { rows: usize, cols: usize },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

type Result<T> = std::result::Result<T, DiffError>;

#[derive(Clone)]
enum Op {
    /// Input node. `differentiable` distinguishes params from constants.
    Leaf { differentiable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// Elementwise product with a scalar *node*.
    ScaleBy { a: NodeId, s: NodeId },
    /// Fill a rows x cols matrix with the value of a scalar node.
    BroadcastScalar { s: NodeId },
    Neg(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    SoftmaxRows(NodeId),
    RowSums(NodeId),
    /// Replicate an r x 1 column across `cols` columns.
    BroadcastCol { v: NodeId },
    /// Zero all entries at column >= counts[row].
    MaskRows { a: NodeId, counts: Arc<Vec<usize>> },
    /// Row-wise log-softmax over the first counts[row] entries; masked
    /// entries are 0 in the output and never receive or propagate gradient.
    LogSoftmaxRowsMasked { a: NodeId, counts: Arc<Vec<usize>> },
    /// Row-wise entropy of the masked softmax, as an r x 1 column.
    EntropyRowsMasked { a: NodeId, counts: Arc<Vec<usize>> },
    /// Column vector of a[pairs[k]] for each (row, col) pair.
    Gather { a: NodeId, pairs: Arc<Vec<(usize, usize)>> },
    /// Adjoint of Gather: scatter-add a column vector into a rows x cols
    /// matrix (duplicate pairs accumulate).
    Scatter { v: NodeId, pairs: Arc<Vec<(usize, usize)>> },
    /// Sum consecutive runs of a column vector; lengths give the run lengths.
    SegmentSum { v: NodeId, lengths: Arc<Vec<usize>> },
    /// Adjoint of SegmentSum: repeat each entry of a k x 1 column lengths[k]
    /// times.
    ExpandSegments { v: NodeId, lengths: Arc<Vec<usize>> },
    /// Stack column vectors on top of each other.
    ConcatRows(Vec<NodeId>),
    SliceRows { v: NodeId, start: usize, len: usize },
}

struct Node {
    op: Op,
    value: Mat,
}

/// Append-only record of operations with cached forward values.
///
/// Single-writer: one tape per experiment step. Independent tapes can run on
/// different threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: DiffValue) -> &Mat {
        &self.nodes[v.id].value
    }

    fn push(&mut self, op: Op, value: Mat, name: &'static str) -> Result<DiffValue> {
        if !value.is_all_finite() {
            return Err(DiffError::NonFinite { op: name, node: self.nodes.len() });
        }
        let id = self.nodes.len();
        let (rows, cols) = value.shape();
        self.nodes.push(Node { op, value });
        Ok(DiffValue { id, rows, cols })
    }

    // ---- leaves ---------------------------------------------------------

    /// Non-differentiable input. Rejects non-finite values.
    pub fn constant(&mut self, values: Mat) -> Result<DiffValue> {
        self.push(Op::Leaf { differentiable: false }, values, "constant")
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<DiffValue> {
        self.constant(Mat::scalar(value))
    }

    pub fn constant_col(&mut self, values: &[f64]) -> Result<DiffValue> {
        self.constant(Mat::col(values))
    }

    /// Differentiable leaf; appears in gradient maps.
    pub fn param(&mut self, values: Mat) -> Result<DiffValue> {
        self.push(Op::Leaf { differentiable: true }, values, "param")
    }

    /// Whether a node is a differentiable leaf.
    pub fn is_param(&self, v: DiffValue) -> bool {
        matches!(self.nodes[v.id].op, Op::Leaf { differentiable: true })
    }

    // ---- elementwise ----------------------------------------------------

    fn require_same_shape(op: &'static str, a: DiffValue, b: DiffValue) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(DiffError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        Self::require_same_shape("add", a, b)?;
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, |x, y| x + y);
        self.push(Op::Add(a.id, b.id), value, "add")
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        Self::require_same_shape("sub", a, b)?;
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, |x, y| x - y);
        self.push(Op::Sub(a.id, b.id), value, "sub")
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        Self::require_same_shape("mul", a, b)?;
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, |x, y| x * y);
        self.push(Op::Mul(a.id, b.id), value, "mul")
    }

    pub fn div(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        Self::require_same_shape("div", a, b)?;
        if self.nodes[b.id].value.as_slice().contains(&0.0) {
            return Err(DiffError::Domain { op: "div", node: b.id, detail: "zero denominator" });
        }
        let value = self.nodes[a.id].value.zip(&self.nodes[b.id].value, |x, y| x / y);
        self.push(Op::Div(a.id, b.id), value, "div")
    }

    pub fn add_scalar(&mut self, a: DiffValue, c: f64) -> Result<DiffValue> {
        let value = self.nodes[a.id].value.map(|x| x + c);
        self.push(Op::AddScalar(a.id), value, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: DiffValue, c: f64) -> Result<DiffValue> {
        let value = self.nodes[a.id].value.map(|x| x * c);
        self.push(Op::MulScalar(a.id, c), value, "mul_scalar")
    }

    /// Elementwise product of `a` with the value of scalar node `s`.
    pub fn scale_by(&mut self, a: DiffValue, s: DiffValue) -> Result<DiffValue> {
        if !s.is_scalar() {
            return Err(DiffError::ShapeMismatch { op: "scale_by", lhs: a.shape(), rhs: s.shape() });
        }
        let sv = self.nodes[s.id].value.scalar_value();
        let value = self.nodes[a.id].value.map(|x| x * sv);
        self.push(Op::ScaleBy { a: a.id, s: s.id }, value, "scale_by")
    }

    /// Fill a rows x cols matrix with the value of scalar node `s`.
    pub fn broadcast_scalar(&mut self, s: DiffValue, rows: usize, cols: usize) -> Result<DiffValue> {
        if !s.is_scalar() {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: s.shape(),
                rhs: (1, 1),
            });
        }
        let sv = self.nodes[s.id].value.scalar_value();
        self.push(Op::BroadcastScalar { s: s.id }, Mat::full(rows, cols, sv), "broadcast_scalar")
    }

    pub fn neg(&mut self, a: DiffValue) -> Result<DiffValue> {
        let value = self.nodes[a.id].value.map(|x| -x);
        self.push(Op::Neg(a.id), value, "neg")
    }

    pub fn log(&mut self, a: DiffValue) -> Result<DiffValue> {
        if self.nodes[a.id].value.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(DiffError::Domain { op: "log", node: a.id, detail: "non-positive input" });
        }
        let value = self.nodes[a.id].value.map(f64::ln);
        self.push(Op::Log(a.id), value, "log")
    }

    pub fn exp(&mut self, a: DiffValue) -> Result<DiffValue> {
        let value = self.nodes[a.id].value.map(f64::exp);
        self.push(Op::Exp(a.id), value, "exp")
    }

    pub fn sqrt(&mut self, a: DiffValue) -> Result<DiffValue> {
        if self.nodes[a.id].value.as_slice().iter().any(|&v| v < 0.0) {
            return Err(DiffError::Domain { op: "sqrt", node: a.id, detail: "negative input" });
        }
        let value = self.nodes[a.id].value.map(f64::sqrt);
        self.push(Op::Sqrt(a.id), value, "sqrt")
    }

    pub fn square(&mut self, a: DiffValue) -> Result<DiffValue> {
        let value = self.nodes[a.id].value.map(|x| x * x);
        self.push(Op::Square(a.id), value, "square")
    }

    pub fn sigmoid(&mut self, a: DiffValue) -> Result<DiffValue> {
        let value = self.nodes[a.id].value.map(stable_sigmoid);
        self.push(Op::Sigmoid(a.id), value, "sigmoid")
    }

    // ---- matrix / reductions -------------------------------------------

    pub fn matmul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        if a.cols != b.rows {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: a.shape(), rhs: b.shape() });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let aip = av[(i, p)];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += aip * bv[(p, j)];
                }
            }
        }
        self.push(Op::MatMul(a.id, b.id), out, "matmul")
    }

    pub fn transpose(&mut self, a: DiffValue) -> Result<DiffValue> {
        let av = &self.nodes[a.id].value;
        let mut out = Mat::zeros(a.cols, a.rows);
        for r in 0..a.rows {
            for c in 0..a.cols {
                out[(c, r)] = av[(r, c)];
            }
        }
        self.push(Op::Transpose(a.id), out, "transpose")
    }

    pub fn sum(&mut self, a: DiffValue) -> Result<DiffValue> {
        let total: f64 = self.nodes[a.id].value.as_slice().iter().sum();
        self.push(Op::Sum(a.id), Mat::scalar(total), "sum")
    }

    pub fn mean(&mut self, a: DiffValue) -> Result<DiffValue> {
        if a.rows * a.cols == 0 {
            return Err(DiffError::Invalid { op: "mean", detail: "empty input".into() });
        }
        let n = (a.rows * a.cols) as f64;
        let total: f64 = self.nodes[a.id].value.as_slice().iter().sum();
        self.push(Op::Mean(a.id), Mat::scalar(total / n), "mean")
    }

    /// Frobenius inner product (usual dot product for vectors).
    pub fn dot(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        Self::require_same_shape("dot", a, b)?;
        let av = self.nodes[a.id].value.as_slice();
        let bv = self.nodes[b.id].value.as_slice();
        let total: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a.id, b.id), Mat::scalar(total), "dot")
    }

    // ---- row-wise -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: DiffValue) -> Result<DiffValue> {
        let av = &self.nodes[a.id].value;
        let mut out = Mat::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            softmax_into(av.row(r), a.cols, |c, p| out[(r, c)] = p);
        }
        self.push(Op::SoftmaxRows(a.id), out, "softmax_rows")
    }

    pub fn row_sums(&mut self, a: DiffValue) -> Result<DiffValue> {
        let av = &self.nodes[a.id].value;
        let mut out = Mat::zeros(a.rows, 1);
        for r in 0..a.rows {
            out[(r, 0)] = av.row(r).iter().sum();
        }
        self.push(Op::RowSums(a.id), out, "row_sums")
    }

    pub fn broadcast_col(&mut self, v: DiffValue, cols: usize) -> Result<DiffValue> {
        if v.cols != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_col",
                lhs: v.shape(),
                rhs: (v.rows, 1),
            });
        }
        let vv = &self.nodes[v.id].value;
        let mut out = Mat::zeros(v.rows, cols);
        for r in 0..v.rows {
            for c in 0..cols {
                out[(r, c)] = vv[(r, 0)];
            }
        }
        self.push(Op::BroadcastCol { v: v.id }, out, "broadcast_col")
    }

    fn require_counts(op: &'static str, a: DiffValue, counts: &[usize]) -> Result<()> {
        if counts.len() != a.rows {
            return Err(DiffError::Invalid {
                op,
                detail: format!("{} counts for {} rows", counts.len(), a.rows),
            });
        }
        if counts.iter().any(|&c| c == 0 || c > a.cols) {
            return Err(DiffError::Invalid {
                op,
                detail: format!("counts must be in 1..={}", a.cols),
            });
        }
        Ok(())
    }

    /// Zero all entries at column index >= counts[row].
    pub fn mask_rows(&mut self, a: DiffValue, counts: &Arc<Vec<usize>>) -> Result<DiffValue> {
        Self::require_counts("mask_rows", a, counts)?;
        let av = &self.nodes[a.id].value;
        let mut out = Mat::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            for c in 0..counts[r] {
                out[(r, c)] = av[(r, c)];
            }
        }
        self.push(Op::MaskRows { a: a.id, counts: Arc::clone(counts) }, out, "mask_rows")
    }

    /// Row-wise log-softmax over the first counts[row] entries of each row,
    /// computed with max subtraction. Masked entries are 0 in the output and
    /// receive no gradient.
    pub fn log_softmax_rows_masked(
        &mut self,
        a: DiffValue,
        counts: &Arc<Vec<usize>>,
    ) -> Result<DiffValue> {
        Self::require_counts("log_softmax_rows_masked", a, counts)?;
        let av = &self.nodes[a.id].value;
        let mut out = Mat::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            let row = &av.row(r)[..counts[r]];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for c in 0..counts[r] {
                out[(r, c)] = av[(r, c)] - lse;
            }
        }
        self.push(
            Op::LogSoftmaxRowsMasked { a: a.id, counts: Arc::clone(counts) },
            out,
            "log_softmax_rows_masked",
        )
    }

    /// Row-wise entropy of the masked softmax distribution, as an r x 1
    /// column. Rows with a single valid entry have entropy 0.
    pub fn entropy_rows_masked(
        &mut self,
        a: DiffValue,
        counts: &Arc<Vec<usize>>,
    ) -> Result<DiffValue> {
        Self::require_counts("entropy_rows_masked", a, counts)?;
        let av = &self.nodes[a.id].value;
        let mut out = Mat::zeros(a.rows, 1);
        for r in 0..a.rows {
            let row = &av.row(r)[..counts[r]];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            let mut h = 0.0;
            for &x in row {
                let logp = x - lse;
                h -= logp.exp() * logp;
            }
            out[(r, 0)] = h;
        }
        self.push(
            Op::EntropyRowsMasked { a: a.id, counts: Arc::clone(counts) },
            out,
            "entropy_rows_masked",
        )
    }

    // ---- structured -----------------------------------------------------

    /// Column vector of a[(r, c)] for each pair. Duplicate pairs are allowed;
    /// their gradient contributions accumulate.
    pub fn gather(&mut self, a: DiffValue, pairs: &Arc<Vec<(usize, usize)>>) -> Result<DiffValue> {
        if pairs.iter().any(|&(r, c)| r >= a.rows || c >= a.cols) {
            return Err(DiffError::Invalid { op: "gather", detail: "pair out of range".into() });
        }
        let av = &self.nodes[a.id].value;
        let data: Vec<f64> = pairs.iter().map(|&(r, c)| av[(r, c)]).collect();
        self.push(
            Op::Gather { a: a.id, pairs: Arc::clone(pairs) },
            Mat::col(&data),
            "gather",
        )
    }

    /// Scatter-add a column vector into a rows x cols matrix.
    pub fn scatter(
        &mut self,
        v: DiffValue,
        pairs: &Arc<Vec<(usize, usize)>>,
        rows: usize,
        cols: usize,
    ) -> Result<DiffValue> {
        if v.cols != 1 || v.rows != pairs.len() {
            return Err(DiffError::Invalid {
                op: "scatter",
                detail: format!("{} values for {} pairs", v.rows * v.cols, pairs.len()),
            });
        }
        if pairs.iter().any(|&(r, c)| r >= rows || c >= cols) {
            return Err(DiffError::Invalid { op: "scatter", detail: "pair out of range".into() });
        }
        let vv = &self.nodes[v.id].value;
        let mut out = Mat::zeros(rows, cols);
        for (i, &(r, c)) in pairs.iter().enumerate() {
            out[(r, c)] += vv[(i, 0)];
        }
        self.push(Op::Scatter { v: v.id, pairs: Arc::clone(pairs) }, out, "scatter")
    }

    /// Sum consecutive runs of a column vector: lengths [3, 2] maps a 5-vector
    /// to a 2-vector of run sums. Zero-length runs yield 0.
    pub fn segment_sum(&mut self, v: DiffValue, lengths: &Arc<Vec<usize>>) -> Result<DiffValue> {
        let total: usize = lengths.iter().sum();
        if v.cols != 1 || v.rows != total {
            return Err(DiffError::Invalid {
                op: "segment_sum",
                detail: format!("segment lengths sum to {total}, input has {} rows", v.rows),
            });
        }
        let vv = &self.nodes[v.id].value;
        let mut data = Vec::with_capacity(lengths.len());
        let mut offset = 0;
        for &len in lengths.iter() {
            data.push((0..len).map(|i| vv[(offset + i, 0)]).sum());
            offset += len;
        }
        self.push(
            Op::SegmentSum { v: v.id, lengths: Arc::clone(lengths) },
            Mat::col(&data),
            "segment_sum",
        )
    }

    /// Repeat entry k of a column vector lengths[k] times.
    pub fn expand_segments(
        &mut self,
        v: DiffValue,
        lengths: &Arc<Vec<usize>>,
    ) -> Result<DiffValue> {
        if v.cols != 1 || v.rows != lengths.len() {
            return Err(DiffError::Invalid {
                op: "expand_segments",
                detail: format!("{} lengths for {} rows", lengths.len(), v.rows),
            });
        }
        let vv = &self.nodes[v.id].value;
        let mut data = Vec::with_capacity(lengths.iter().sum());
        for (k, &len) in lengths.iter().enumerate() {
            data.extend(std::iter::repeat_n(vv[(k, 0)], len));
        }
        self.push(
            Op::ExpandSegments { v: v.id, lengths: Arc::clone(lengths) },
            Mat::col(&data),
            "expand_segments",
        )
    }

    /// Stack column vectors on top of each other.
    pub fn concat_rows(&mut self, parts: &[DiffValue]) -> Result<DiffValue> {
        if parts.is_empty() {
            return Err(DiffError::Invalid { op: "concat_rows", detail: "no inputs".into() });
        }
        let mut data = Vec::new();
        for p in parts {
            if p.cols != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: p.shape(),
                    rhs: (p.rows, 1),
                });
            }
            data.extend_from_slice(self.nodes[p.id].value.as_slice());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        self.push(Op::ConcatRows(ids), Mat::col(&data), "concat_rows")
    }

    pub fn slice_rows(&mut self, v: DiffValue, start: usize, len: usize) -> Result<DiffValue> {
        if v.cols != 1 || start + len > v.rows {
            return Err(DiffError::Invalid {
                op: "slice_rows",
                detail: format!("slice {start}..{} of a {}-row column", start + len, v.rows),
            });
        }
        let data = self.nodes[v.id].value.as_slice()[start..start + len].to_vec();
        self.push(Op::SliceRows { v: v.id, start, len }, Mat::col(&data), "slice_rows")
    }

    // ---- reverse pass ---------------------------------------------------

    /// Build the adjoints of `objective` with respect to each value in `wrt`
    /// as new tape nodes. Returns one handle per target; `None` when no
    /// differentiable path exists. The adjoint of a target is the sum over
    /// all tape paths from the objective to that node, so the result is
    /// itself differentiable (this is what makes composed update chains
    /// differentiable end to end).
    ///
    /// Existing forward values are never mutated.
    pub fn grad_nodes(
        &mut self,
        objective: DiffValue,
        wrt: &[DiffValue],
    ) -> Result<Vec<Option<DiffValue>>> {
        if !objective.is_scalar() {
            return Err(DiffError::NonScalarObjective {
                rows: objective.rows,
                cols: objective.cols,
            });
        }
        let bound = objective.id + 1;

        // A node is relevant when some target is in its input closure; the
        // reverse pass only descends into relevant nodes.
        let mut relevant = vec![false; bound];
        for w in wrt {
            if w.id < bound {
                relevant[w.id] = true;
            }
        }
        for id in 0..bound {
            if relevant[id] {
                continue;
            }
            let mut any = false;
            self.for_each_input(id, |input| any |= relevant[input]);
            relevant[id] = any;
        }

        let mut adjoints: Vec<Option<DiffValue>> = vec![None; bound];
        adjoints[objective.id] = Some(self.constant_scalar(1.0)?);

        for id in (0..bound).rev() {
            if !relevant[id] {
                continue;
            }
            let adj = match adjoints[id] {
                Some(a) => a,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            self.backprop_op(id, &op, adj, &relevant, &mut adjoints)?;
        }

        Ok(wrt
            .iter()
            .map(|w| if w.id < bound { adjoints[w.id] } else { None })
            .collect())
    }

    /// Gradient map of a scalar objective for every differentiable leaf.
    /// Leaves with no path to the objective get a zero matrix; constants do
    /// not appear.
    pub fn backward(&mut self, objective: DiffValue) -> Result<BTreeMap<NodeId, Mat>> {
        let wrt: Vec<DiffValue> = (0..self.nodes.len())
            .filter(|&id| matches!(self.nodes[id].op, Op::Leaf { differentiable: true }))
            .map(|id| self.handle(id))
            .collect();
        let grads = self.grad_nodes(objective, &wrt)?;
        let mut map = BTreeMap::new();
        for (p, g) in wrt.iter().zip(grads) {
            let mat = match g {
                Some(v) => self.nodes[v.id].value.clone(),
                None => Mat::zeros(p.rows, p.cols),
            };
            map.insert(p.id, mat);
        }
        Ok(map)
    }

    fn handle(&self, id: NodeId) -> DiffValue {
        let (rows, cols) = self.nodes[id].value.shape();
        DiffValue { id, rows, cols }
    }

    fn for_each_input(&self, id: NodeId, mut f: impl FnMut(NodeId)) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b) => {
                f(*a);
                f(*b);
            }
            Op::ScaleBy { a, s } => {
                f(*a);
                f(*s);
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Neg(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::RowSums(a)
            | Op::MaskRows { a, .. }
            | Op::LogSoftmaxRowsMasked { a, .. }
            | Op::EntropyRowsMasked { a, .. }
            | Op::Gather { a, .. } => f(*a),
            Op::BroadcastScalar { s } => f(*s),
            Op::BroadcastCol { v }
            | Op::Scatter { v, .. }
            | Op::SegmentSum { v, .. }
            | Op::ExpandSegments { v, .. }
            | Op::SliceRows { v, .. } => f(*v),
            Op::ConcatRows(ids) => {
                for &i in ids {
                    f(i);
                }
            }
        }
    }

    fn accumulate(
        &mut self,
        adjoints: &mut [Option<DiffValue>],
        relevant: &[bool],
        target: NodeId,
        contribution: DiffValue,
    ) -> Result<()> {
        if target >= relevant.len() || !relevant[target] {
            return Ok(());
        }
        adjoints[target] = Some(match adjoints[target] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn backprop_op(
        &mut self,
        id: NodeId,
        op: &Op,
        adj: DiffValue,
        relevant: &[bool],
        adjoints: &mut [Option<DiffValue>],
    ) -> Result<()> {
        let out = self.handle(id);
        match *op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(adjoints, relevant, a, adj)?;
                self.accumulate(adjoints, relevant, b, adj)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoints, relevant, a, adj)?;
                let nb = self.neg(adj)?;
                self.accumulate(adjoints, relevant, b, nb)?;
            }
            Op::Mul(a, b) => {
                if relevant[a] {
                    let hb = self.handle(b);
                    let da = self.mul(adj, hb)?;
                    self.accumulate(adjoints, relevant, a, da)?;
                }
                if relevant[b] {
                    let ha = self.handle(a);
                    let db = self.mul(adj, ha)?;
                    self.accumulate(adjoints, relevant, b, db)?;
                }
            }
            Op::Div(a, b) => {
                if relevant[a] {
                    let hb = self.handle(b);
                    let da = self.div(adj, hb)?;
                    self.accumulate(adjoints, relevant, a, da)?;
                }
                if relevant[b] {
                    // d(a/b)/db = -out/b
                    let hb = self.handle(b);
                    let t = self.mul(adj, out)?;
                    let t = self.div(t, hb)?;
                    let db = self.neg(t)?;
                    self.accumulate(adjoints, relevant, b, db)?;
                }
            }
            Op::AddScalar(a) => self.accumulate(adjoints, relevant, a, adj)?,
            Op::MulScalar(a, c) => {
                let da = self.mul_scalar(adj, c)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::ScaleBy { a, s } => {
                if relevant[a] {
                    let hs = self.handle(s);
                    let da = self.scale_by(adj, hs)?;
                    self.accumulate(adjoints, relevant, a, da)?;
                }
                if relevant[s] {
                    let ha = self.handle(a);
                    let ds = self.dot(adj, ha)?;
                    self.accumulate(adjoints, relevant, s, ds)?;
                }
            }
            Op::BroadcastScalar { s } => {
                let ds = self.sum(adj)?;
                self.accumulate(adjoints, relevant, s, ds)?;
            }
            Op::Neg(a) => {
                let da = self.neg(adj)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Log(a) => {
                let ha = self.handle(a);
                let da = self.div(adj, ha)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Exp(a) => {
                let da = self.mul(adj, out)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Sqrt(a) => {
                // d(sqrt x)/dx = 1 / (2 sqrt x)
                let two = self.mul_scalar(out, 2.0)?;
                let da = self.div(adj, two)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Square(a) => {
                let ha = self.handle(a);
                let twoa = self.mul_scalar(ha, 2.0)?;
                let da = self.mul(adj, twoa)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Sigmoid(a) => {
                // out * (1 - out)
                let nout = self.neg(out)?;
                let one_minus = self.add_scalar(nout, 1.0)?;
                let deriv = self.mul(out, one_minus)?;
                let da = self.mul(adj, deriv)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::MatMul(a, b) => {
                if relevant[a] {
                    let hb = self.handle(b);
                    let bt = self.transpose(hb)?;
                    let da = self.matmul(adj, bt)?;
                    self.accumulate(adjoints, relevant, a, da)?;
                }
                if relevant[b] {
                    let ha = self.handle(a);
                    let at = self.transpose(ha)?;
                    let db = self.matmul(at, adj)?;
                    self.accumulate(adjoints, relevant, b, db)?;
                }
            }
            Op::Transpose(a) => {
                let da = self.transpose(adj)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Sum(a) => {
                let ha = self.handle(a);
                let da = self.broadcast_scalar(adj, ha.rows, ha.cols)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Mean(a) => {
                let ha = self.handle(a);
                let filled = self.broadcast_scalar(adj, ha.rows, ha.cols)?;
                let da = self.mul_scalar(filled, 1.0 / (ha.rows * ha.cols) as f64)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Dot(a, b) => {
                if relevant[a] {
                    let hb = self.handle(b);
                    let da = self.scale_by(hb, adj)?;
                    self.accumulate(adjoints, relevant, a, da)?;
                }
                if relevant[b] {
                    let ha = self.handle(a);
                    let db = self.scale_by(ha, adj)?;
                    self.accumulate(adjoints, relevant, b, db)?;
                }
            }
            Op::SoftmaxRows(a) => {
                // dx = p * (adj - rowsum(adj * p))
                let prod = self.mul(adj, out)?;
                let sums = self.row_sums(prod)?;
                let bc = self.broadcast_col(sums, out.cols)?;
                let centered = self.sub(adj, bc)?;
                let da = self.mul(out, centered)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::RowSums(a) => {
                let ha = self.handle(a);
                let da = self.broadcast_col(adj, ha.cols)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::BroadcastCol { v } => {
                let dv = self.row_sums(adj)?;
                self.accumulate(adjoints, relevant, v, dv)?;
            }
            Op::MaskRows { a, ref counts } => {
                let da = self.mask_rows(adj, counts)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::LogSoftmaxRowsMasked { a, ref counts } => {
                // dx = masked(adj) - p * rowsum(masked(adj)), with p the
                // masked softmax recovered as masked(exp(out)).
                let madj = self.mask_rows(adj, counts)?;
                let expl = self.exp(out)?;
                let p = self.mask_rows(expl, counts)?;
                let sums = self.row_sums(madj)?;
                let bc = self.broadcast_col(sums, out.cols)?;
                let sub = self.mul(p, bc)?;
                let da = self.sub(madj, sub)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::EntropyRowsMasked { a, ref counts } => {
                // dH/dx = -p * (logp + H) per row, 0 at masked entries.
                let ha = self.handle(a);
                let logp = self.log_softmax_rows_masked(ha, counts)?;
                let expl = self.exp(logp)?;
                let p = self.mask_rows(expl, counts)?;
                let hb = self.broadcast_col(out, ha.cols)?;
                let inner = self.add(logp, hb)?;
                let term = self.mul(p, inner)?;
                let adjb = self.broadcast_col(adj, ha.cols)?;
                let scaled = self.mul(adjb, term)?;
                let da = self.neg(scaled)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Gather { a, ref pairs } => {
                let ha = self.handle(a);
                let da = self.scatter(adj, pairs, ha.rows, ha.cols)?;
                self.accumulate(adjoints, relevant, a, da)?;
            }
            Op::Scatter { v, ref pairs } => {
                let dv = self.gather(adj, pairs)?;
                self.accumulate(adjoints, relevant, v, dv)?;
            }
            Op::SegmentSum { v, ref lengths } => {
                let dv = self.expand_segments(adj, lengths)?;
                self.accumulate(adjoints, relevant, v, dv)?;
            }
            Op::ExpandSegments { v, ref lengths } => {
                let dv = self.segment_sum(adj, lengths)?;
                self.accumulate(adjoints, relevant, v, dv)?;
            }
            Op::ConcatRows(ref ids) => {
                let mut offset = 0;
                for &i in ids {
                    let len = self.nodes[i].value.rows();
                    if relevant[i] {
                        let di = self.slice_rows(adj, offset, len)?;
                        self.accumulate(adjoints, relevant, i, di)?;
                    }
                    offset += len;
                }
            }
            Op::SliceRows { v, start, len } => {
                let hv = self.handle(v);
                let pairs: Arc<Vec<(usize, usize)>> =
                    Arc::new((start..start + len).map(|r| (r, 0)).collect());
                let dv = self.scatter(adj, &pairs, hv.rows, 1)?;
                self.accumulate(adjoints, relevant, v, dv)?;
            }
        }
        Ok(())
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], cols: usize, mut write: impl FnMut(usize, f64)) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &x in row {
        z += (x - max).exp();
    }
    for c in 0..cols {
        write(c, (row[c] - max).exp() / z);
    }
}
