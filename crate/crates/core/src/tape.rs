//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Values are
//! always two-dimensional (`n × m`); scalars are `1 × 1`. Graph message passing
//! is expressed through two index structures that stay constant for the life of
//! a tape: [`SparseMat`] (a fixed linear operator such as a normalized adjacency,
//! a row gather or a segment mean) and [`EdgeIndex`] (destination-grouped edge
//! lists used by attention).

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// ELU with alpha = 1.
    Elu,
    /// GELU, tanh approximation.
    Gelu,
    Sigmoid,
    LeakyRelu(f64),
    Softplus,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Sigmoid => sigmoid(x),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A constant sparse linear operator in coordinate form.
#[derive(Clone, Debug)]
pub struct SparseMat {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMat {
    pub fn new(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        debug_assert!(entries.iter().all(|&(r, c, _)| r < rows && c < cols));
        Self { rows, cols, entries }
    }

    /// Selects `indices[k]` as output row `k`.
    pub fn gather(indices: &[usize], cols: usize) -> Self {
        let entries = indices.iter().enumerate().map(|(r, &c)| (r, c, 1.0)).collect();
        Self::new(indices.len(), cols, entries)
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(self.cols, x.nrows(), "sparse operator width mismatch");
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(r).scaled_add(v, &x.row(c));
        }
        out
    }

    fn apply_transpose(&self, g: &Mat) -> Mat {
        let mut out = Mat::zeros((self.cols, g.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(c).scaled_add(v, &g.row(r));
        }
        out
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.rows, self.cols));
        for &(r, c, v) in &self.entries {
            out[[r, c]] += v;
        }
        out
    }
}

/// Directed edges `src -> dst`, grouped by destination.
///
/// Edge `e` in segment `offsets[d]..offsets[d + 1]` delivers a message from
/// `src[e]` to destination `d`.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub n_dst: usize,
    pub n_src: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl EdgeIndex {
    pub fn from_pairs(n_dst: usize, n_src: usize, pairs: &[(usize, usize)]) -> Self {
        let mut sorted: Vec<(usize, usize)> = pairs.to_vec();
        sorted.sort_unstable();
        let mut offsets = vec![0usize; n_dst + 1];
        for &(d, s) in &sorted {
            assert!(d < n_dst && s < n_src, "edge ({d}, {s}) out of range");
            offsets[d + 1] += 1;
        }
        for i in 0..n_dst {
            offsets[i + 1] += offsets[i];
        }
        Self {
            n_dst,
            n_src,
            dst: sorted.iter().map(|p| p.0).collect(),
            src: sorted.iter().map(|p| p.1).collect(),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn segment(&self, d: usize) -> std::ops::Range<usize> {
        self.offsets[d]..self.offsets[d + 1]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    Sparse(Rc<SparseMat>, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    RowNorm(Var),
    SumAll(Var),
    EdgeDot(Rc<EdgeIndex>, Var, Var),
    EdgeSoftmax(Rc<EdgeIndex>, Var),
    EdgeSum(Rc<EdgeIndex>, Var, Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence
    /// the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1 × m) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ∘ row` with `row` (1 × m) broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is n × 1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    /// Scales `a` by the 1 × 1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddConst(a))
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let v = self.value(a).mapv(|x| f.apply(x));
        self.push(v, Op::Act(a, f))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `op · a` for a constant sparse operator.
    pub fn sparse(&mut self, op: &Rc<SparseMat>, a: Var) -> Var {
        let v = op.apply(self.value(a));
        self.push(v, Op::Sparse(Rc::clone(op), a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Mat::from_shape_vec(shape, flat).expect("reshape: element count differs");
        self.push(v, Op::Reshape(a))
    }

    /// Euclidean norm of each row, as an n × 1 column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let norms = self.value(a).map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1));
        self.push(norms, Op::RowNorm(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-edge dot product `q[dst] · k[src]`, as an E × 1 column.
    pub fn edge_dot(&mut self, edges: &Rc<EdgeIndex>, q: Var, k: Var) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.nrows(), edges.n_dst);
        assert_eq!(kv.nrows(), edges.n_src);
        let mut out = Mat::zeros((edges.len(), 1));
        for e in 0..edges.len() {
            out[[e, 0]] = qv.row(edges.dst[e]).dot(&kv.row(edges.src[e]));
        }
        self.push(out, Op::EdgeDot(Rc::clone(edges), q, k))
    }

    /// Softmax of edge scores within each destination segment.
    pub fn edge_softmax(&mut self, edges: &Rc<EdgeIndex>, scores: Var) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.dim(), (edges.len(), 1));
        let mut out = Mat::zeros((edges.len(), 1));
        for d in 0..edges.n_dst {
            let seg = edges.segment(d);
            if seg.is_empty() {
                continue;
            }
            let max = seg.clone().map(|e| sv[[e, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in seg.clone() {
                let x = (sv[[e, 0]] - max).exp();
                out[[e, 0]] = x;
                sum += x;
            }
            for e in seg {
                out[[e, 0]] /= sum;
            }
        }
        self.push(out, Op::EdgeSoftmax(Rc::clone(edges), scores))
    }

    /// `out[d] = Σ_{e ∈ seg(d)} w[e] · values[src[e]]`.
    pub fn edge_sum(&mut self, edges: &Rc<EdgeIndex>, weights: Var, values: Var) -> Var {
        let (wv, vv) = (self.value(weights), self.value(values));
        assert_eq!(wv.dim(), (edges.len(), 1));
        assert_eq!(vv.nrows(), edges.n_src);
        let mut out = Mat::zeros((edges.n_dst, vv.ncols()));
        for e in 0..edges.len() {
            out.row_mut(edges.dst[e]).scaled_add(wv[[e, 0]], &vv.row(edges.src[e]));
        }
        self.push(out, Op::EdgeSum(Rc::clone(edges), weights, values))
    }

    /// Back-propagates from the 1 × 1 value `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, d: Mat| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b));
                    acc(*b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    acc(*row, (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, &g * self.value(*row));
                }
                Op::MulCol(a, col) => {
                    acc(*col, (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(*a, &g * self.value(*col));
                }
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    acc(*s, Mat::from_elem((1, 1), (&g * self.value(*a)).sum()));
                    acc(*a, &g * k);
                }
                Op::Scale(a, k) => acc(*a, &g * *k),
                Op::AddConst(a) => acc(*a, g.clone()),
                Op::Act(a, f) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d).and(x).and(&node.value).for_each(|d, &x, &y| *d *= f.derivative(x, y));
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.dim());
                    for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot = yr.dot(&gr);
                        dr.assign(&(&yr * &(&gr - dot)));
                    }
                    acc(*a, d);
                }
                Op::Sparse(op, a) => acc(*a, op.apply_transpose(&g)),
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Mat::from_shape_vec(shape, flat).expect("reshape grad"));
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.dim());
                    for (i, (mut dr, xr)) in d.rows_mut().into_iter().zip(x.rows()).enumerate() {
                        let n = node.value[[i, 0]];
                        // subgradient 0 at the origin
                        if n > 0.0 {
                            dr.assign(&(&xr * (g[[i, 0]] / n)));
                        }
                    }
                    acc(*a, d);
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).dim();
                    acc(*a, Mat::from_elem(shape, g[[0, 0]]));
                }
                Op::EdgeDot(edges, q, k) => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let mut dq = Mat::zeros(qv.dim());
                    let mut dk = Mat::zeros(kv.dim());
                    for e in 0..edges.len() {
                        let (d, s) = (edges.dst[e], edges.src[e]);
                        let ge = g[[e, 0]];
                        dq.row_mut(d).scaled_add(ge, &kv.row(s));
                        dk.row_mut(s).scaled_add(ge, &qv.row(d));
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                }
                Op::EdgeSoftmax(edges, scores) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.dim());
                    for dst in 0..edges.n_dst {
                        let seg = edges.segment(dst);
                        let dot: f64 = seg.clone().map(|e| y[[e, 0]] * g[[e, 0]]).sum();
                        for e in seg {
                            d[[e, 0]] = y[[e, 0]] * (g[[e, 0]] - dot);
                        }
                    }
                    acc(*scores, d);
                }
                Op::EdgeSum(edges, w, vals) => {
                    let (wv, vv) = (self.value(*w), self.value(*vals));
                    let mut dw = Mat::zeros(wv.dim());
                    let mut dv = Mat::zeros(vv.dim());
                    for e in 0..edges.len() {
                        let (d, s) = (edges.dst[e], edges.src[e]);
                        dw[[e, 0]] = g.row(d).dot(&vv.row(s));
                        dv.row_mut(s).scaled_add(wv[[e, 0]], &g.row(d));
                    }
                    acc(*w, dw);
                    acc(*vals, dv);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}
