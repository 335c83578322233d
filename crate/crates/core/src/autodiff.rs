//! A small reverse-mode automatic differentiation tape over 2-D `f64` arrays.
//!
//! Every value is an [`Array2<f64>`]; vectors are `1×n` rows or `n×1`
//! columns and scalars are `1×1`. Nodes are appended in evaluation order so
//! the backward sweep is a single reverse pass over the tape. Binary
//! elementwise ops broadcast either operand along a unit dimension.

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather { x: Var, idx: Vec<(usize, usize)> },
    GatherRows { x: Var, rows: Vec<usize> },
    SumAll(Var),
    SumRows(Var),
    MaxRows { x: Var, arg: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require a gradient or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-6;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_broadcast(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// The single entry of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Offset(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let d = v.ncols() as f64;
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|x| x - mean);
            let var = row.fold(0.0, |acc, &x| acc + x * x) / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| x * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Scale every row to unit L2 norm. All-zero rows stay zero and pass no
    /// gradient, so cosine against a zero vector evaluates to 0.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::NormalizeRows { x: a, norms }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows { x: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size mismatch");
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("reshape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Pick individual entries of `a` into a new `rows×cols` array, filled
    /// row-major from `idx`.
    pub fn gather(&mut self, a: Var, idx: Vec<(usize, usize)>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather size mismatch");
        let src = self.value(a);
        let data: Vec<f64> = idx.iter().map(|&(r, c)| src[[r, c]]).collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("gather");
        let rg = self.rg(&[a]);
        self.push(v, Op::Gather { x: a, idx }, rg)
    }

    /// Stack the listed rows of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows { x: a, rows }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Sum across columns: `r×c → r×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(v, Op::SumRows(a), rg)
    }

    /// Max across columns: `r×c → r×1`; ties resolve to the lowest column.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut arg = Vec::with_capacity(src.nrows());
        let mut vals = Vec::with_capacity(src.nrows());
        for row in src.rows() {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            arg.push(best);
            vals.push(row[best]);
        }
        let v = Array2::from_shape_vec((vals.len(), 1), vals).expect("max_rows");
        let rg = self.rg(&[a]);
        self.push(v, Op::MaxRows { x: a, arg }, rg)
    }

    /// Max over every entry, as a `1×1` node.
    pub fn max_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let flat = self.reshape(a, 1, n);
        self.max_rows(flat)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits` (one row per sample).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "one label per logits row");
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let v = Array2::from_elem((1, 1), loss / labels.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            v,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).dim()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let emit = |v: Var, d: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        emit(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.requires_grad(*b) {
                        emit(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.requires_grad(*a) {
                        emit(*a, g.dot(self.value(*b)), &mut grads);
                    }
                    if self.requires_grad(*b) {
                        emit(*b, g.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::Transpose(a) => emit(*a, g.t().to_owned(), &mut grads),
                Op::Add(a, b) => {
                    emit(*a, reduce_to(g.clone(), self.value(*a).dim()), &mut grads);
                    emit(*b, reduce_to(g, self.value(*b).dim()), &mut grads);
                }
                Op::Sub(a, b) => {
                    emit(*a, reduce_to(g.clone(), self.value(*a).dim()), &mut grads);
                    emit(*b, reduce_to(-g, self.value(*b).dim()), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        emit(*a, reduce_to(zip_broadcast(&g, bv, |x, y| x * y), av.dim()), &mut grads);
                    }
                    if self.requires_grad(*b) {
                        emit(*b, reduce_to(zip_broadcast(&g, av, |x, y| x * y), bv.dim()), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        emit(*a, reduce_to(zip_broadcast(&g, bv, |x, y| x / y), av.dim()), &mut grads);
                    }
                    if self.requires_grad(*b) {
                        // d(a/b)/db = -(a/b)/b = -out/b
                        let q = zip_broadcast(&node.value, bv, |o, y| -o / y);
                        emit(*b, reduce_to(g * &q, bv.dim()), &mut grads);
                    }
                }
                Op::Scale(a, c) => emit(*a, g * *c, &mut grads),
                Op::Offset(a) => emit(*a, g, &mut grads),
                Op::Square(a) => {
                    let d = &g * &self.value(*a).mapv(|x| 2.0 * x);
                    emit(*a, d, &mut grads)
                }
                Op::Abs(a) => {
                    let d = &g * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                    emit(*a, d, &mut grads)
                }
                Op::Sigmoid(a) => {
                    let d = &g * &node.value.mapv(|y| y * (1.0 - y));
                    emit(*a, d, &mut grads)
                }
                Op::Gelu(a) => {
                    let d = &g * &self.value(*a).mapv(gelu_grad);
                    emit(*a, d, &mut grads)
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * s);
                    }
                    emit(*a, d, &mut grads)
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut d = g.clone();
                    for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let gsum = drow.sum();
                        let gy = drow.dot(&yrow);
                        let inv = inv_std[r];
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dv, &yv| *dv = inv * (*dv - gsum / n - yv * gy / n));
                    }
                    emit(*x, d, &mut grads)
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                        let n = norms[r];
                        if n == 0.0 {
                            drow.fill(0.0);
                            continue;
                        }
                        let yrow = y.row(r);
                        let gy = drow.dot(&yrow);
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv = (*dv - yv * gy) / n);
                    }
                    emit(*x, d, &mut grads)
                }
                Op::SliceRows { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    emit(*x, d, &mut grads)
                }
                Op::SliceCols { x, start } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    emit(*x, d, &mut grads)
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let r = self.value(*p).nrows();
                        emit(*p, g.slice(s![at..at + r, ..]).to_owned(), &mut grads);
                        at += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        emit(*p, g.slice(s![.., at..at + c]).to_owned(), &mut grads);
                        at += c;
                    }
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    emit(*a, Array2::from_shape_vec(dim, data).expect("reshape back"), &mut grads)
                }
                Op::Gather { x, idx } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (&(r, c), &gv) in idx.iter().zip(g.iter()) {
                        d[[r, c]] += gv;
                    }
                    emit(*x, d, &mut grads)
                }
                Op::GatherRows { x, rows } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (gr, &r) in g.rows().into_iter().zip(rows) {
                        let mut dr = d.row_mut(r);
                        dr += &gr;
                    }
                    emit(*x, d, &mut grads)
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    emit(*a, d, &mut grads)
                }
                Op::SumRows(a) => {
                    let dim = self.value(*a).dim();
                    let d = g.broadcast(dim).expect("sum_rows grad").to_owned();
                    emit(*a, d, &mut grads)
                }
                Op::MaxRows { x, arg } => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (r, &c) in arg.iter().enumerate() {
                        d[[r, c]] = g[[r, 0]];
                    }
                    emit(*x, d, &mut grads)
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        d[[r, y]] -= 1.0;
                    }
                    d *= g[[0, 0]] / n;
                    emit(*logits, d, &mut grads)
                }
            }
        }
        Gradients { grads }
    }
}
