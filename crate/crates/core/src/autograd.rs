//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough information to push gradients back to its inputs. Parameters are bound
//! from a [`ParamStore`] once per graph, so a whole batch shares the same
//! parameter nodes and their gradients accumulate naturally.
//!
//! Everything is two-dimensional. Row vectors are `1 × n` matrices and scalars
//! are `1 × 1`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Mat),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every bound parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::from_index(i), g)))
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Tape of operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    /// Binds a parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(x) + r;
        self.push(value, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        self.push(value, Op::AddScalar(x))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Mat) -> Var {
        let value = self.value(x) * &c;
        self.push(value, Op::MulConst(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.push(value, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|u| 0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh()));
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with a `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|u| (u - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Columns whose `key_mask` entry is `false` receive
    /// exactly zero weight and never influence the result.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), xv.ncols(), "key mask width mismatch");
        }
        let mut value = Mat::zeros(xv.raw_dim());
        for (src, mut dst) in xv.rows().into_iter().zip(value.rows_mut()) {
            let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
            let max = src
                .iter()
                .enumerate()
                .filter(|(j, _)| valid(*j))
                .map(|(_, u)| *u)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, (d, u)) in dst.iter_mut().zip(src.iter()).enumerate() {
                if valid(j) {
                    *d = (u - max).exp();
                    total += *d;
                }
            }
            dst.mapv_inplace(|d| d / total);
        }
        self.push(value, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|u| (u - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|u| u - lse);
        }
        self.push(value, Op::LogSoftmax(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push(value, Op::Transpose(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(x, start))
    }

    /// Rows `indices[i]` of `table`, stacked.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((indices.len(), t.ncols()));
        for (mut dst, &i) in value.rows_mut().into_iter().zip(indices) {
            dst.assign(&t.row(i));
        }
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|u| u / n);
            norms.push(n);
        }
        self.push(value, Op::NormalizeRows(x, norms))
    }

    /// Inverted dropout with a precomputed keep mask (already scaled).
    pub fn dropout(&mut self, x: Var, keep_scaled: Mat) -> Var {
        self.mul_const(x, keep_scaled)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every bound
    /// parameter that influenced `loss`.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut out = ParamGrads { grads: Vec::new() };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    if out.grads.len() <= id.index() {
                        out.grads.resize(id.index() + 1, None);
                    }
                    out.grads[id.index()] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = dy.dot(&self.value(*b).t());
                        acc(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = self.value(*a).t().dot(&dy);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = dy.dot(self.value(*b));
                        acc(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = dy.t().dot(self.value(*a));
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&dy);
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *x, dy);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, dy * *c),
                Op::AddScalar(x) => acc(&mut grads, *x, dy),
                Op::MulConst(x, c) => acc(&mut grads, *x, dy * c),
                Op::Exp(x) => acc(&mut grads, *x, dy * &node.value),
                Op::Gelu(x) => {
                    let mut dx = dy;
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &u| {
                        let inner = GELU_K * (u + GELU_C * u * u * u);
                        let th = inner.tanh();
                        let dinner = GELU_K * (1.0 + 3.0 * GELU_C * u * u);
                        *d *= 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner;
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(
                        &mut grads,
                        *gain,
                        (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    acc(&mut grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    if self.nodes[x.0].needs_grad {
                        let dxhat = &dy * self.value(*gain);
                        let n = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.raw_dim());
                        for (r, mut out_row) in dx.rows_mut().into_iter().enumerate() {
                            let g = dxhat.row(r);
                            let h = xhat.row(r);
                            let sum_g = g.sum();
                            let sum_gh = g.dot(&h);
                            let inv = inv_std[r];
                            for ((o, &gi), &hi) in out_row.iter_mut().zip(g).zip(h) {
                                *o = inv / n * (n * gi - sum_g - hi * sum_gh);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = &dy * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(yrow).for_each(|d, &yi| *d -= yi * dot);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = dy.clone();
                    for (mut row, (yrow, dyrow)) in
                        dx.rows_mut().into_iter().zip(y.rows().into_iter().zip(dy.rows()))
                    {
                        let total = dyrow.sum();
                        Zip::from(&mut row)
                            .and(yrow)
                            .for_each(|d, &yi| *d -= yi.exp() * total);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, dy.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, dy.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        acc(&mut grads, *p, dy.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Mat::zeros(self.value(*x).raw_dim());
                        dx.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::SliceCols(x, start) => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Mat::zeros(self.value(*x).raw_dim());
                        dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::GatherRows(table, indices) => {
                    let mut dt = Mat::zeros(self.value(*table).raw_dim());
                    for (row, &i) in dy.rows().into_iter().zip(indices) {
                        let mut dst = dt.row_mut(i);
                        dst += &row;
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::MeanRows(x) => {
                    let shape = self.value(*x).raw_dim();
                    let n = shape[0] as f64;
                    let row = dy.row(0).mapv(|d| d / n);
                    let dx = row.broadcast(shape).expect("mean_rows broadcast").to_owned();
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let dx = Mat::from_elem(self.value(*x).raw_dim(), dy[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::NormalizeRows(x, norms) => {
                    let y = &node.value;
                    let mut dx = dy.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(r);
                        let dot = dy.row(r).dot(&yrow);
                        let n = norms[r];
                        Zip::from(&mut row)
                            .and(yrow)
                            .for_each(|d, &yi| *d = (*d - yi * dot) / n);
                    }
                    acc(&mut grads, *x, dx);
                }
            }
        }
        out
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Const | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b)
        | Op::MatMulNT(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::MulConst(x, _)
        | Op::Exp(x)
        | Op::Gelu(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Transpose(x)
        | Op::SliceRows(x, _)
        | Op::SliceCols(x, _)
        | Op::GatherRows(x, _)
        | Op::MeanRows(x)
        | Op::Sum(x)
        | Op::NormalizeRows(x, _) => vec![*x],
        Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
