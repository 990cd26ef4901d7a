//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`] walks the tape
//! in reverse, accumulating vector-Jacobian products, and deposits parameter gradients
//! into the [`ParamStore`] the graph read its parameters from. The tape is consumed by
//! the backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::gemm;
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Compressed sparse row matrix used as a constant linear operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

/// Uniform lattice over `[-1, 1]^3` with `cells` cells per axis, nodes indexed
/// `(iz * (cells + 1) + iy) * (cells + 1) + ix`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub cells: usize,
}

impl Lattice {
    pub fn nodes_per_axis(self) -> usize {
        self.cells + 1
    }

    pub fn node_count(self) -> usize {
        self.nodes_per_axis().pow(3)
    }

    pub fn spacing(self) -> f64 {
        2.0 / self.cells as f64
    }

    pub fn node_index(self, ix: usize, iy: usize, iz: usize) -> usize {
        let n = self.nodes_per_axis();
        (iz * n + iy) * n + ix
    }

    pub fn node_position(self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let h = self.spacing();
        [
            -1.0 + ix as f64 * h,
            -1.0 + iy as f64 * h,
            -1.0 + iz as f64 * h,
        ]
    }

    /// Cell base index and in-cell fraction along each axis, or `None` outside the box.
    pub(crate) fn locate(self, p: &[f64]) -> Option<([usize; 3], [f64; 3])> {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let scale = self.cells as f64 / 2.0;
        for a in 0..3 {
            let u = (p[a] + 1.0) * scale;
            if !(0.0..=self.cells as f64).contains(&u) {
                return None;
            }
            let i = (u.floor() as usize).min(self.cells - 1);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        Some((base, frac))
    }
}

/// Lattices whose nodes are sparse combinations of a shared set of sources. Reading a
/// point interpolates trilinearly on each lattice and averages over lattices, which gives
/// the point's weight on every source.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeStack {
    pub sources: usize,
    /// Per lattice, the `nodes x sources` operator.
    pub levels: Vec<(Lattice, Csr)>,
}

impl LatticeStack {
    /// Calls `f(source, weight, d weight / d point)` for every contribution at `p`.
    fn for_each(&self, p: &[f64], mut f: impl FnMut(usize, f64, [f64; 3])) {
        let norm = 1.0 / self.levels.len() as f64;
        for (lattice, splat) in &self.levels {
            let Some((base, fr)) = lattice.locate(p) else { continue };
            let inv_h = lattice.cells as f64 / 2.0;
            for corner in 0..8 {
                let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let lin = |a: usize| if bits[a] == 1 { fr[a] } else { 1.0 - fr[a] };
                let dlin = |a: usize| if bits[a] == 1 { inv_h } else { -inv_h };
                let (wx, wy, wz) = (lin(0), lin(1), lin(2));
                let w = wx * wy * wz * norm;
                let dw = [dlin(0) * wy * wz * norm, wx * dlin(1) * wz * norm, wx * wy * dlin(2) * norm];
                let node = lattice.node_index(base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]);
                for k in splat.indptr[node]..splat.indptr[node + 1] {
                    let v = splat.values[k];
                    f(splat.indices[k], w * v, [dw[0] * v, dw[1] * v, dw[2] * v]);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `act(x · w + b)`, with a rectifier when the flag is set
    Linear(Var, Var, Var, bool),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    LogClamp(Var, f64),
    Square(Var),
    SumAll(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<Option<usize>>>),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    PosEnc(Var, usize, bool),
    CumsumExclusive(Var),
    SegmentWeightedSum(Var, Var),
    SparseMatMul(Arc<Csr>, Var),
    Trilinear(Var, Var, Lattice),
    LatticeWeights(Var, Arc<LatticeStack>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear(..) => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::LogClamp(..) => "log",
            Op::Square(_) => "square",
            Op::SumAll(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::PosEnc(..) => "positional_encoding",
            Op::CumsumExclusive(_) => "cumsum_exclusive",
            Op::SegmentWeightedSum(..) => "segment_weighted_sum",
            Op::SparseMatMul(..) => "sparse_matmul",
            Op::Trilinear(..) => "trilinear",
            Op::LatticeWeights(..) => "lattice_weights",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::SegmentWeightedSum(a, b)
            | Op::Trilinear(a, b, _) => vec![*a, *b],
            Op::Linear(x, w, b, _) => vec![*x, *w, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::LogClamp(a, _)
            | Op::Square(a)
            | Op::SumAll(a)
            | Op::RowSum(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::PosEnc(a, ..)
            | Op::CumsumExclusive(a)
            | Op::SparseMatMul(_, a)
            | Op::LatticeWeights(a, _) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether a parameter or tracked input feeds this node.
    tracked: bool,
}

/// Recording of a computation. Values are immutable once pushed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    first_non_finite: Option<(usize, &'static str)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.push_node(value, op, tracked)
    }

    fn push_node(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Errors if any recorded op produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some((idx, name)) => Err(Error::NonFinite(format!("op `{name}` (node {idx})"))),
        }
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Graph::gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Constant, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// Affine map `x · w + b` (bias row broadcast), optionally followed by a rectifier.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Var {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        assert_eq!(k, k2, "linear inner dimensions {m}x{k} · {k2}x{n}");
        assert_eq!(self.shape(b), (1, n), "linear bias must be 1x{n}");
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        if relu {
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::Linear(x, w, b, relu))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a[n, m] + row[1, m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row expects a 1x{m} row");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(m.max(1)).take(n) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(Tensor::matrix(n, m, out), Op::AddRow(a, row))
    }

    /// `a[n, m] * col[n, 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col expects a {n}x1 column");
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (r, chunk) in out.chunks_exact_mut(m.max(1)).take(n).enumerate() {
            for o in chunk {
                *o *= c[r];
            }
        }
        self.push(Tensor::matrix(n, m, out), Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.map(a, |x| x.max(floor).ln());
        self.push(v, Op::LogClamp(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all elements as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let t = self.value(a);
        let out = (0..n)
            .map(|r| t.data()[r * m..(r + 1) * m].iter().sum())
            .collect();
        self.push(Tensor::matrix(n, 1, out), Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.shape(*p);
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::matrix(n, total, out), Op::ConcatCols(parts.to_vec()))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            assert_eq!(c, m, "concat_rows column mismatch");
            out.extend_from_slice(self.value(*p).data());
            rows += r;
        }
        self.push(Tensor::matrix(rows, m, out), Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, m) = self.shape(a);
        assert!(start <= end && end <= m, "slice {start}..{end} of {m} columns");
        let t = self.value(a);
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&t.data()[r * m + start..r * m + end]);
        }
        self.push(Tensor::matrix(n, end - start, out), Op::SliceCols(a, start))
    }

    /// Output row `i` is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<Option<usize>>>) -> Var {
        let (n, m) = self.shape(a);
        let t = self.value(a);
        let mut out = vec![0.0; index.len() * m];
        for (i, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                assert!(s < n, "gather index {s} out of {n} rows");
                out[i * m..(i + 1) * m].copy_from_slice(&t.data()[s * m..(s + 1) * m]);
            }
        }
        let rows = index.len();
        self.push(Tensor::matrix(rows, m, out), Op::GatherRows(a, index))
    }

    /// Repeat a single row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(self.shape(a).0, 1, "broadcast_rows expects one row");
        self.gather_rows(a, Arc::new(vec![Some(0); n]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(m.max(1)).take(n) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in chunk.iter_mut() {
                *v /= z;
            }
        }
        self.push(Tensor::matrix(n, m, out), Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let t = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                out[c * n + r] = t[r * m + c];
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshaped(vec![rows, cols]);
        let t = t.unwrap_or_else(|e| panic!("{e}"));
        self.push(t, Op::Reshape(a))
    }

    /// Sinusoidal encoding of every scalar: `[q?, sin(2^0 π q), cos(2^0 π q), …,
    /// sin(2^{L-1} π q), cos(2^{L-1} π q)]`, blocks laid out scalar by scalar.
    pub fn positional_encoding(&mut self, a: Var, levels: usize, include_raw: bool) -> Var {
        let (n, d) = self.shape(a);
        let per = 2 * levels + usize::from(include_raw);
        let t = self.value(a).data();
        let mut out = Vec::with_capacity(n * d * per);
        for &q in t.iter().take(n * d) {
            crate::encoders::encode_scalar_into(q, levels, include_raw, &mut out);
        }
        self.push(Tensor::matrix(n, d * per, out), Op::PosEnc(a, levels, include_raw))
    }

    /// Exclusive prefix sum along each row: `y[r, i] = Σ_{j<i} a[r, j]`.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let t = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..m {
                out[r * m + c] = acc;
                acc += t[r * m + c];
            }
        }
        self.push(Tensor::matrix(n, m, out), Op::CumsumExclusive(a))
    }

    /// `out[r, :] = Σ_s w[r, s] · x[r·S + s, :]` for `w` of shape `[R, S]`.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var) -> Var {
        let (r_count, s_count) = self.shape(w);
        let (rows, c) = self.shape(x);
        assert_eq!(rows, r_count * s_count, "segment_weighted_sum row count");
        let wt = self.value(w).data();
        let xt = self.value(x).data();
        let mut out = vec![0.0; r_count * c];
        for r in 0..r_count {
            let o = &mut out[r * c..(r + 1) * c];
            for s in 0..s_count {
                let wv = wt[r * s_count + s];
                let row = &xt[(r * s_count + s) * c..(r * s_count + s + 1) * c];
                for (ov, xv) in o.iter_mut().zip(row) {
                    *ov += wv * xv;
                }
            }
        }
        self.push(Tensor::matrix(r_count, c, out), Op::SegmentWeightedSum(w, x))
    }

    /// Constant sparse operator applied to a dense matrix.
    pub fn sparse_matmul(&mut self, s: Arc<Csr>, x: Var) -> Var {
        let (rows, c) = self.shape(x);
        assert_eq!(s.cols, rows, "sparse_matmul inner dimension");
        let xt = self.value(x).data();
        let mut out = vec![0.0; s.rows * c];
        for r in 0..s.rows {
            let o = &mut out[r * c..(r + 1) * c];
            for k in s.indptr[r]..s.indptr[r + 1] {
                let w = s.values[k];
                let src = &xt[s.indices[k] * c..(s.indices[k] + 1) * c];
                for (ov, xv) in o.iter_mut().zip(src) {
                    *ov += w * xv;
                }
            }
        }
        let rows_out = s.rows;
        self.push(Tensor::matrix(rows_out, c, out), Op::SparseMatMul(s, x))
    }

    /// Trilinear interpolation of per-node features `grid[nodes, C]` at `points[N, 3]`.
    /// Points outside `[-1, 1]^3` read zeros.
    pub fn trilinear(&mut self, grid: Var, points: Var, lattice: Lattice) -> Var {
        let (nodes, c) = self.shape(grid);
        assert_eq!(nodes, lattice.node_count(), "grid rows vs lattice nodes");
        let (n, d) = self.shape(points);
        assert_eq!(d, 3, "trilinear expects 3D points");
        let g = self.value(grid).data();
        let p = self.value(points).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let Some((base, f)) = lattice.locate(&p[i * 3..i * 3 + 3]) else {
                continue;
            };
            let o = &mut out[i * c..(i + 1) * c];
            for corner in 0..8 {
                let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                if w == 0.0 {
                    continue;
                }
                let node = lattice.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
                for (ov, gv) in o.iter_mut().zip(&g[node * c..(node + 1) * c]) {
                    *ov += w * gv;
                }
            }
        }
        self.push(Tensor::matrix(n, c, out), Op::Trilinear(grid, points, lattice))
    }

    /// Per-source weights `[N, sources]` of `points[N, 3]` read through `stack`.
    pub fn lattice_weights(&mut self, points: Var, stack: Arc<LatticeStack>) -> Var {
        let (n, d) = self.shape(points);
        assert_eq!(d, 3, "lattice weights expect 3D points");
        let s = stack.sources;
        let p = self.value(points).data();
        let mut out = vec![0.0; n * s];
        for i in 0..n {
            let row = &mut out[i * s..(i + 1) * s];
            stack.for_each(&p[i * 3..i * 3 + 3], |src, w, _| row[src] += w);
        }
        self.push(Tensor::matrix(n, s, out), Op::LatticeWeights(points, stack))
    }

    /// Reverse pass from a scalar output. Parameter gradients are accumulated into
    /// `store`; the tape is consumed.
    pub fn backward(self, output: Var, store: &mut ParamStore) -> Result<()> {
        let out_len = self.value(output).len();
        if out_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {} elements",
                out_len
            )));
        }
        let grads = self.gradients(output);
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    /// Gradients of scalar `output` with respect to every node (None where unreachable).
    pub fn gradients(&self, output: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Param(_) | Op::Constant) {
                grads[i] = Some(g);
            }
        }
        grads
    }

    /// Gradients of scalar `output` with respect to `wrt`, zero where `output` does not
    /// depend on a node.
    pub fn gradients_wrt(&self, output: Var, wrt: &[Var]) -> Vec<Tensor> {
        let grads = self.gradients(output);
        wrt.iter()
            .map(|v| grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.value(*v).shape())))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        if !node.tracked {
            return;
        }
        let y = &node.value;
        let gd = g.data();
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let elementwise = |v: Var, f: &dyn Fn(usize) -> f64| {
            Tensor::new(shape_of(v), (0..self.value(v).len()).map(f).collect()).unwrap()
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                    acc(*a, Tensor::matrix(m, k, da));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    acc(*b, Tensor::matrix(k, n, db));
                }
            }
            Op::Linear(x, w, b, relu) => {
                let (m, k) = self.shape(*x);
                let n = self.shape(*w).1;
                let masked;
                let gz: &[f64] = if *relu {
                    let yd = y.data();
                    masked = gd
                        .iter()
                        .zip(yd)
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect::<Vec<_>>();
                    &masked
                } else {
                    gd
                };
                if tracked(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, gz, false, self.value(*w).data(), true, &mut dx, false);
                    acc(*x, Tensor::matrix(m, k, dx));
                }
                if tracked(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*x).data(), true, gz, false, &mut dw, false);
                    acc(*w, Tensor::matrix(k, n, dw));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; n];
                    for row in gz.chunks_exact(n.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::matrix(1, n, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, elementwise(*b, &|j| -gd[j]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, elementwise(*a, &|j| gd[j] * vb[j]));
                acc(*b, elementwise(*b, &|j| gd[j] * va[j]));
            }
            Op::AddRow(a, row) => {
                let m = self.shape(*a).1;
                let mut dr = vec![0.0; m];
                for chunk in gd.chunks_exact(m.max(1)) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*a, g.clone());
                acc(*row, Tensor::matrix(1, m, dr));
            }
            Op::MulCol(a, col) => {
                let (n, m) = self.shape(*a);
                let c = self.value(*col).data();
                let va = self.value(*a).data();
                acc(*a, elementwise(*a, &|j| gd[j] * c[j / m]));
                let dc = (0..n)
                    .map(|r| (0..m).map(|k| gd[r * m + k] * va[r * m + k]).sum())
                    .collect();
                acc(*col, Tensor::matrix(n, 1, dc));
            }
            Op::Scale(a, s) => acc(*a, elementwise(*a, &|j| gd[j] * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, elementwise(*a, &|j| if x[j] > 0.0 { gd[j] } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                acc(*a, elementwise(*a, &|j| gd[j] * yd[j] * (1.0 - yd[j])));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc(*a, elementwise(*a, &|j| gd[j] * sigmoid(x[j])));
            }
            Op::Exp(a) => {
                let yd = y.data();
                acc(*a, elementwise(*a, &|j| gd[j] * yd[j]));
            }
            Op::LogClamp(a, floor) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    elementwise(*a, &|j| if x[j] > *floor { gd[j] / x[j] } else { 0.0 }),
                );
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, elementwise(*a, &|j| 2.0 * x[j] * gd[j]));
            }
            Op::SumAll(a) => {
                let s = gd[0];
                acc(*a, Tensor::full(&shape_of(*a), s));
            }
            Op::RowSum(a) => {
                let m = self.shape(*a).1;
                acc(*a, elementwise(*a, &|j| gd[j / m]));
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let (n, w) = self.shape(*p);
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(*p, Tensor::matrix(n, w, d));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    acc(*p, Tensor::matrix(r, c, gd[offset..offset + r * c].to_vec()));
                    offset += r * c;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.shape(*a);
                let w = y.cols();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    d[r * m + start..r * m + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*a, Tensor::matrix(n, m, d));
            }
            Op::GatherRows(a, index) => {
                let (n, m) = self.shape(*a);
                let mut d = vec![0.0; n * m];
                for (i, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        for (dv, gv) in d[s * m..(s + 1) * m].iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                            *dv += gv;
                        }
                    }
                }
                acc(*a, Tensor::matrix(n, m, d));
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = self.shape(*a);
                let yd = y.data();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let row = r * m..(r + 1) * m;
                    let dot: f64 = yd[row.clone()].iter().zip(&gd[row.clone()]).map(|(p, q)| p * q).sum();
                    for j in row {
                        d[j] = yd[j] * (gd[j] - dot);
                    }
                }
                acc(*a, Tensor::matrix(n, m, d));
            }
            Op::Transpose(a) => {
                let (n, m) = self.shape(*a);
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        d[r * m + c] = gd[c * n + r];
                    }
                }
                acc(*a, Tensor::matrix(n, m, d));
            }
            Op::Reshape(a) => {
                acc(*a, Tensor::new(shape_of(*a), gd.to_vec()).unwrap());
            }
            Op::PosEnc(a, levels, raw) => {
                let per = 2 * levels + usize::from(*raw);
                let yd = y.data();
                let x = self.value(*a);
                let mut d = vec![0.0; x.len()];
                for (q, dq) in d.iter_mut().enumerate() {
                    let base = q * per;
                    let mut s = 0.0;
                    let mut off = base;
                    if *raw {
                        s += gd[off];
                        off += 1;
                    }
                    for l in 0..*levels {
                        let w = (1u64 << l) as f64 * std::f64::consts::PI;
                        // d sin = w cos, d cos = -w sin
                        s += gd[off] * w * yd[off + 1] - gd[off + 1] * w * yd[off];
                        off += 2;
                    }
                    *dq = s;
                }
                acc(*a, Tensor::new(shape_of(*a), d).unwrap());
            }
            Op::CumsumExclusive(a) => {
                let (n, m) = self.shape(*a);
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let mut acc_g = 0.0;
                    for c in (0..m).rev() {
                        d[r * m + c] = acc_g;
                        acc_g += gd[r * m + c];
                    }
                }
                acc(*a, Tensor::matrix(n, m, d));
            }
            Op::SegmentWeightedSum(w, x) => {
                let (r_count, s_count) = self.shape(*w);
                let c = self.shape(*x).1;
                let wt = self.value(*w).data();
                let xt = self.value(*x).data();
                let mut dw = vec![0.0; r_count * s_count];
                let mut dx = vec![0.0; r_count * s_count * c];
                for r in 0..r_count {
                    let gr = &gd[r * c..(r + 1) * c];
                    for s in 0..s_count {
                        let row = (r * s_count + s) * c;
                        let wv = wt[r * s_count + s];
                        let mut dot = 0.0;
                        for k in 0..c {
                            dot += gr[k] * xt[row + k];
                            dx[row + k] = wv * gr[k];
                        }
                        dw[r * s_count + s] = dot;
                    }
                }
                acc(*w, Tensor::matrix(r_count, s_count, dw));
                acc(*x, Tensor::matrix(r_count * s_count, c, dx));
            }
            Op::SparseMatMul(s, x) => {
                let (rows, c) = self.shape(*x);
                let mut d = vec![0.0; rows * c];
                for r in 0..s.rows {
                    let gr = &gd[r * c..(r + 1) * c];
                    for k in s.indptr[r]..s.indptr[r + 1] {
                        let w = s.values[k];
                        let dst = &mut d[s.indices[k] * c..(s.indices[k] + 1) * c];
                        for (dv, gv) in dst.iter_mut().zip(gr) {
                            *dv += w * gv;
                        }
                    }
                }
                acc(*x, Tensor::matrix(rows, c, d));
            }
            Op::Trilinear(grid, points, lattice) => {
                let (nodes, c) = self.shape(*grid);
                let n = self.shape(*points).0;
                let gv = self.value(*grid).data();
                let p = self.value(*points).data();
                let mut dgrid = vec![0.0; nodes * c];
                let mut dp = vec![0.0; n * 3];
                let inv_h = lattice.cells as f64 / 2.0;
                for i in 0..n {
                    let Some((base, f)) = lattice.locate(&p[i * 3..i * 3 + 3]) else {
                        continue;
                    };
                    let gi = &gd[i * c..(i + 1) * c];
                    for corner in 0..8 {
                        let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                        let lin = |a: usize| if bits[a] == 1 { f[a] } else { 1.0 - f[a] };
                        let dlin = |a: usize| if bits[a] == 1 { inv_h } else { -inv_h };
                        let (wx, wy, wz) = (lin(0), lin(1), lin(2));
                        let node = lattice.node_index(base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]);
                        let gn = &gv[node * c..(node + 1) * c];
                        let dot: f64 = gi.iter().zip(gn).map(|(a, b)| a * b).sum();
                        dp[i * 3] += dot * dlin(0) * wy * wz;
                        dp[i * 3 + 1] += dot * wx * dlin(1) * wz;
                        dp[i * 3 + 2] += dot * wx * wy * dlin(2);
                        let w = wx * wy * wz;
                        if w != 0.0 {
                            for (dv, gval) in dgrid[node * c..(node + 1) * c].iter_mut().zip(gi) {
                                *dv += w * gval;
                            }
                        }
                    }
                }
                acc(*grid, Tensor::matrix(nodes, c, dgrid));
                acc(*points, Tensor::matrix(n, 3, dp));
            }
            Op::LatticeWeights(points, stack) => {
                let n = self.shape(*points).0;
                let s = stack.sources;
                let p = self.value(*points).data();
                let mut dp = vec![0.0; n * 3];
                for i in 0..n {
                    let gi = &gd[i * s..(i + 1) * s];
                    let mut d = [0.0; 3];
                    stack.for_each(&p[i * 3..i * 3 + 3], |src, _, dw| {
                        for a in 0..3 {
                            d[a] += gi[src] * dw[a];
                        }
                    });
                    dp[i * 3..i * 3 + 3].copy_from_slice(&d);
                }
                acc(*points, Tensor::matrix(n, 3, dp));
            }
        }
    }
}
