//! Reverse-mode automatic differentiation over batched 2-D arrays.
//!
//! A [`Graph`] evaluates operations eagerly and records them on a tape.
//! [`Graph::backward`] walks the tape in reverse and returns exact gradients
//! for every parameter of the bound [`ParamStore`]. Rows are batch items
//! throughout; sequences are laid out time-major, `T` blocks of `B` rows.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::ParamStore;
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + row`, `row` being `1 x n`.
    AddRow(Var, Var),
    /// Each row of `a` multiplied by a constant per-row weight (`B x 1`).
    ScaleRows(Var, Array2<F>),
    Scale(Var, F),
    Offset(Var),
    Exp(Var),
    Square(Var),
    Transpose(Var),
    /// Fused LSTM cell: pre-activations `[i f o g]` and previous cell state;
    /// output is `[h c]`. Caches the activated gates.
    LstmCell {
        pre: Var,
        c_prev: Option<Var>,
        gates: Array2<F>,
    },
    /// Whole-sequence LSTM layer. Pre-activations at step `t` are
    /// `per_step[t] + shared + h[t-1] w_hh`; output is every hidden state,
    /// time-major. Caches activated gates and cell states.
    LstmSeq {
        per_step: Option<Var>,
        shared: Option<Var>,
        w_hh: Var,
        batch: usize,
        gates: Array2<F>,
        cells: Array2<F>,
        tanh_c: Array2<F>,
    },
    ColSlice {
        a: Var,
        start: usize,
    },
    RowSlice {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    SumRows(Var),
    SumAll(Var),
    /// Row-wise log-softmax evaluated at one target column per row.
    LogSoftmaxPick {
        logits: Var,
        targets: Vec<usize>,
        softmax: Array2<F>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    /// Whether any parameter flows into this node.
    tracked: bool,
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::ScaleRows(a, _)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Transpose(a)
            | Op::ColSlice { a, .. }
            | Op::RowSlice { a, .. }
            | Op::SumRows(a)
            | Op::SumAll(a) => vec![*a],
            Op::LstmCell { pre, c_prev, .. } => std::iter::once(*pre).chain(*c_prev).collect(),
            Op::LstmSeq {
                per_step, shared, w_hh, ..
            } => per_step.iter().chain(shared).copied().chain(std::iter::once(*w_hh)).collect(),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::LogSoftmaxPick { logits, .. } => vec![*logits],
        }
    }
}

pub struct Graph<'p, F: Real> {
    nodes: Vec<Node<F>>,
    params: Option<&'p ParamStore<F>>,
    bound: HashMap<usize, Var>,
}

fn logistic<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `tanh` through a single `exp`, cheaper than the libm routine for `f32`.
fn fast_tanh<F: Real>(x: F) -> F {
    let two = F::one() + F::one();
    if x.abs() < F::from_f64(1e-4).expect("representable") {
        return x.tanh();
    }
    let e = (-two * x.abs()).exp();
    let t = (F::one() - e) / (F::one() + e);
    if x < F::zero() { -t } else { t }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'p, F: Real> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
        }
    }

    /// Graph whose [`Graph::param`] lookups resolve against `params`.
    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        let tracked = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a named parameter of the bound store. Repeated lookups return
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::Config("graph has no parameter store bound".into()))?;
        let id = store
            .id(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter {name:?}")))?;
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.array(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(shape_err("matmul", x.shape(), y.shape()));
        }
        let v = x.dot(y);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(shape_err("matmul_bt", x.shape(), y.shape()));
        }
        let v = x.dot(&y.t());
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(shape_err(op, x.shape(), y.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(shape_err("add_row", x.shape(), r.shape()));
        }
        let mut v = x.clone();
        let r = r.row(0);
        for mut dst in v.rows_mut() {
            dst += &r;
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale_rows(&mut self, a: Var, weights: &[F]) -> Result<Var> {
        let x = self.value(a);
        if weights.len() != x.nrows() {
            return Err(shape_err("scale_rows", x.shape(), &[weights.len()]));
        }
        let w = Array2::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("column shape");
        let v = x * &w;
        Ok(self.push(v, Op::ScaleRows(a, w)))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: F) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(F::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// LSTM cell over a batch. `pre` is `B x 4H` in gate order input, forget,
    /// output, candidate; `c_prev` of `None` means a zero cell state.
    /// Returns `[h c]` as `B x 2H`.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Option<Var>) -> Result<Var> {
        let p = self.value(pre);
        let (b, h4) = p.dim();
        if h4 % 4 != 0 {
            return Err(Error::Dimension(format!("lstm_cell: {h4} pre-activations is not 4H")));
        }
        let h = h4 / 4;
        if let Some(c) = c_prev {
            let cv = self.value(c);
            if cv.dim() != (b, h) {
                return Err(shape_err("lstm_cell", p.shape(), cv.shape()));
            }
        }
        let mut gates = p.clone();
        gates.slice_mut(s![.., ..3 * h]).mapv_inplace(logistic);
        gates.slice_mut(s![.., 3 * h..]).mapv_inplace(F::tanh);
        let mut out = Array2::zeros((b, 2 * h));
        {
            let (mut h_out, mut c_out) = out.view_mut().split_at(Axis(1), h);
            let i = gates.slice(s![.., ..h]);
            let f = gates.slice(s![.., h..2 * h]);
            let o = gates.slice(s![.., 2 * h..3 * h]);
            let g = gates.slice(s![.., 3 * h..]);
            Zip::from(&mut c_out).and(&i).and(&g).for_each(|c, &i, &g| *c = i * g);
            if let Some(cp) = c_prev {
                Zip::from(&mut c_out)
                    .and(&f)
                    .and(self.value(cp))
                    .for_each(|c, &f, &cp| *c += f * cp);
            }
            Zip::from(&mut h_out).and(&o).and(&c_out).for_each(|h, &o, &c| *h = o * c.tanh());
        }
        Ok(self.push(out, Op::LstmCell { pre, c_prev, gates }))
    }

    /// LSTM layer over `steps` time-major blocks of `batch` rows, starting from
    /// zero hidden and cell states. `per_step` is `steps * batch x 4H`,
    /// `shared` is `batch x 4H` and added at every step; at least one must be
    /// given. Returns all hidden states, `steps * batch x H`.
    pub fn lstm_sequence(
        &mut self,
        per_step: Option<Var>,
        shared: Option<Var>,
        w_hh: Var,
        steps: usize,
        batch: usize,
    ) -> Result<Var> {
        let w = self.value(w_hh);
        let (h, h4) = w.dim();
        if h4 != 4 * h || h == 0 {
            return Err(Error::Dimension(format!("lstm_sequence: w_hh is {h} x {h4}, expected H x 4H")));
        }
        if per_step.is_none() && shared.is_none() {
            return Err(Error::Dimension("lstm_sequence: no input".into()));
        }
        if let Some(p) = per_step {
            if self.value(p).dim() != (steps * batch, h4) {
                return Err(shape_err("lstm_sequence", self.value(p).shape(), &[steps * batch, h4]));
            }
        }
        if let Some(sh) = shared {
            if self.value(sh).dim() != (batch, h4) {
                return Err(shape_err("lstm_sequence", self.value(sh).shape(), &[batch, h4]));
            }
        }
        let one = F::one();
        let n = steps * batch;
        let mut gates = vec![F::zero(); n * h4];
        let mut cells = vec![F::zero(); n * h];
        let mut tanh_c = vec![F::zero(); n * h];
        let mut out = Array2::<F>::zeros((n, h));
        let mut pre = Array2::<F>::zeros((batch, h4));
        for t in 0..steps {
            let rows = t * batch..(t + 1) * batch;
            match (per_step, shared) {
                (Some(p), Some(sh)) => Zip::from(&mut pre)
                    .and(self.value(p).slice(s![rows.clone(), ..]))
                    .and(self.value(sh))
                    .for_each(|d, &a, &b| *d = a + b),
                (Some(p), None) => pre.assign(&self.value(p).slice(s![rows.clone(), ..])),
                (None, Some(sh)) => pre.assign(self.value(sh)),
                (None, None) => unreachable!(),
            }
            if t > 0 {
                let prev = out.slice(s![(t - 1) * batch..t * batch, ..]);
                general_mat_mul(one, &prev, w, one, &mut pre);
            }
            let pre_s = pre.as_slice().expect("standard layout");
            let out_s = out.as_slice_mut().expect("standard layout");
            for r in 0..batch {
                let row = t * batch + r;
                let p = &pre_s[r * h4..(r + 1) * h4];
                let gr = &mut gates[row * h4..(row + 1) * h4];
                for k in 0..h {
                    let i = logistic(p[k]);
                    let f = logistic(p[h + k]);
                    let o = logistic(p[2 * h + k]);
                    let g = fast_tanh(p[3 * h + k]);
                    let cp = if t > 0 { cells[(row - batch) * h + k] } else { F::zero() };
                    let c = i * g + f * cp;
                    let tc = fast_tanh(c);
                    gr[k] = i;
                    gr[h + k] = f;
                    gr[2 * h + k] = o;
                    gr[3 * h + k] = g;
                    cells[row * h + k] = c;
                    tanh_c[row * h + k] = tc;
                    out_s[row * h + k] = o * tc;
                }
            }
        }
        let gates = Array2::from_shape_vec((n, h4), gates).expect("sized");
        let cells = Array2::from_shape_vec((n, h), cells).expect("sized");
        let tanh_c = Array2::from_shape_vec((n, h), tanh_c).expect("sized");
        Ok(self.push(
            out,
            Op::LstmSeq {
                per_step,
                shared,
                w_hh,
                batch,
                gates,
                cells,
                tanh_c,
            },
        ))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.ncols() {
            return Err(Error::Dimension(format!("col_slice {start}+{len} of {} columns", x.ncols())));
        }
        let v = x.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(v, Op::ColSlice { a, start }))
    }

    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.nrows() {
            return Err(Error::Dimension(format!("row_slice {start}+{len} of {} rows", x.nrows())));
        }
        let v = x.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(v, Op::RowSlice { a, start }))
    }

    fn concat(&mut self, parts: Vec<Var>, axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero arrays".into()));
        }
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(axis, &views).map_err(|e| Error::Dimension(format!("concat: {e}")))?;
        let op = if axis == Axis(0) {
            Op::ConcatRows(parts)
        } else {
            Op::ConcatCols(parts)
        };
        Ok(self.push(v, op))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.concat(parts, Axis(1))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.concat(parts, Axis(0))
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.nrows()) {
            return Err(Error::Index(format!("row {bad} of a {}-row table", t.nrows())));
        }
        let v = t.select(Axis(0), rows);
        Ok(self.push(v, Op::GatherRows { table, rows: rows.to_vec() }))
    }

    /// `B x n -> B x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// `out[b] = logits[b, targets[b]] - logsumexp(logits[b, ..])`, `B x 1`.
    pub fn log_softmax_pick(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (b, k) = x.dim();
        if targets.len() != b {
            return Err(shape_err("log_softmax_pick", x.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target {bad} among {k} candidates")));
        }
        let mut softmax = Array2::zeros((b, k));
        let mut out = Array2::zeros((b, 1));
        for (r, (row, mut sm)) in x.rows().into_iter().zip(softmax.rows_mut()).enumerate() {
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut total = F::zero();
            for (s, &v) in sm.iter_mut().zip(row.iter()) {
                *s = (v - max).exp();
                total += *s;
            }
            sm.mapv_inplace(|s| s / total);
            out[[r, 0]] = row[targets[r]] - max - total.ln();
        }
        Ok(self.push(
            out,
            Op::LogSoftmaxPick {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
        ))
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every parameter of
    /// the bound store. Parameters that do not reach `loss` get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<ParamStore<F>> {
        let store = self
            .params
            .ok_or_else(|| Error::Config("graph has no parameter store bound".into()))?;
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Dimension(format!("loss must be 1 x 1, got {:?}", lv.shape())));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut out = store.zeros_like();

        let tracked = |v: &Var| self.nodes[v.0].tracked;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => *out.array_mut(*id) += &g,
                Op::MatMul(a, b) => {
                    if tracked(a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if tracked(b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if tracked(a) {
                        accumulate(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if tracked(b) {
                        accumulate(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if tracked(a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if tracked(b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::ScaleRows(a, w) => accumulate(&mut grads, *a, &g * w),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Square(a) => {
                    let two = F::one() + F::one();
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| *g = *g * two * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::LstmCell { pre, c_prev, gates } => {
                    let (gpre, gc_prev) = lstm_cell_backward(&g, gates, &node.value, c_prev.map(|c| self.value(c)));
                    accumulate(&mut grads, *pre, gpre);
                    if let Some(c) = c_prev {
                        accumulate(&mut grads, *c, gc_prev);
                    }
                }
                Op::LstmSeq {
                    per_step,
                    shared,
                    w_hh,
                    batch,
                    gates,
                    cells,
                    tanh_c,
                } => {
                    let w = self.value(*w_hh);
                    let dpre = lstm_seq_backward(&g, gates, cells, tanh_c, w, *batch);
                    let (rows, h) = node.value.dim();
                    if rows > *batch {
                        let prev = node.value.slice(s![..rows - *batch, ..]);
                        let later = dpre.slice(s![*batch.., ..]);
                        let acc = grads[w_hh.0].get_or_insert_with(|| Array2::zeros((h, 4 * h)));
                        general_mat_mul(F::one(), &prev.t(), &later, F::one(), acc);
                    }
                    if let Some(sh) = shared.filter(|v| tracked(v)) {
                        let mut gs = Array2::zeros((*batch, 4 * h));
                        for block in dpre.axis_chunks_iter(Axis(0), *batch) {
                            gs += &block;
                        }
                        accumulate(&mut grads, sh, gs);
                    }
                    if let Some(p) = per_step.filter(|v| tracked(v)) {
                        accumulate(&mut grads, p, dpre);
                    }
                }
                Op::ColSlice { a, start } => {
                    let acc = grads[a.0].get_or_insert_with(|| Array2::zeros(self.value(*a).dim()));
                    let mut dst = acc.slice_mut(s![.., *start..*start + g.ncols()]);
                    dst += &g;
                }
                Op::RowSlice { a, start } => {
                    let acc = grads[a.0].get_or_insert_with(|| Array2::zeros(self.value(*a).dim()));
                    let mut dst = acc.slice_mut(s![*start..*start + g.nrows(), ..]);
                    dst += &g;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accumulate(&mut grads, p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::GatherRows { table, rows } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SumRows(a) => {
                    let ga = Array2::from_shape_fn(self.value(*a).dim(), |(r, _)| g[[r, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxPick {
                    logits,
                    targets,
                    softmax,
                } => {
                    let mut ga = softmax.clone();
                    for (r, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let gr = g[[r, 0]];
                        row.mapv_inplace(|p| -p * gr);
                        row[targets[r]] += gr;
                    }
                    accumulate(&mut grads, *logits, ga);
                }
            }
        }
        if out.iter().any(|(_, a)| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(out)
    }
}

/// Untracked targets are filtered by `backward`, which skips them.
fn accumulate<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn lstm_cell_backward<F: Real>(
    g: &Array2<F>,
    gates: &Array2<F>,
    out: &Array2<F>,
    c_prev: Option<&Array2<F>>,
) -> (Array2<F>, Array2<F>) {
    let (b, h2) = g.dim();
    let h = h2 / 2;
    let one = F::one();
    let mut gpre = Array2::zeros((b, 4 * h));
    let mut gc_prev = Array2::zeros((b, h));
    for r in 0..b {
        for k in 0..h {
            let (i, f, o, gg) = (gates[[r, k]], gates[[r, h + k]], gates[[r, 2 * h + k]], gates[[r, 3 * h + k]]);
            let c = out[[r, h + k]];
            let tc = c.tanh();
            let dh = g[[r, k]];
            let dc = g[[r, h + k]] + dh * o * (one - tc * tc);
            let cp = c_prev.map_or(F::zero(), |cp| cp[[r, k]]);
            gpre[[r, k]] = dc * gg * i * (one - i);
            gpre[[r, h + k]] = dc * cp * f * (one - f);
            gpre[[r, 2 * h + k]] = dh * tc * o * (one - o);
            gpre[[r, 3 * h + k]] = dc * i * (one - gg * gg);
            gc_prev[[r, k]] = dc * f;
        }
    }
    (gpre, gc_prev)
}

/// Gradient with respect to the pre-activations of every step of an
/// [`Graph::lstm_sequence`] node, given the gradient of its hidden states.
fn lstm_seq_backward<F: Real>(
    g: &Array2<F>,
    gates: &Array2<F>,
    cells: &Array2<F>,
    tanh_c: &Array2<F>,
    w_hh: &Array2<F>,
    batch: usize,
) -> Array2<F> {
    let (rows, h) = g.dim();
    let h4 = 4 * h;
    let steps = rows / batch;
    let one = F::one();
    let g = g.as_standard_layout();
    let (gs, gates, cells, tanh_c) = (
        g.as_slice().expect("standard layout"),
        gates.as_slice().expect("standard layout"),
        cells.as_slice().expect("standard layout"),
        tanh_c.as_slice().expect("standard layout"),
    );
    let mut dpre = Array2::zeros((rows, h4));
    let mut dh_next = Array2::<F>::zeros((batch, h));
    let mut dc_next = vec![F::zero(); batch * h];
    for t in (0..steps).rev() {
        {
            let dps = dpre.as_slice_mut().expect("standard layout");
            let dhn = dh_next.as_slice().expect("standard layout");
            for r in 0..batch {
                let row = t * batch + r;
                let gr = &gates[row * h4..(row + 1) * h4];
                let dp = &mut dps[row * h4..(row + 1) * h4];
                for k in 0..h {
                    let (i, f, o, gg) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
                    let tc = tanh_c[row * h + k];
                    let dh = gs[row * h + k] + dhn[r * h + k];
                    let dc = dc_next[r * h + k] + dh * o * (one - tc * tc);
                    let cp = if t > 0 { cells[(row - batch) * h + k] } else { F::zero() };
                    dp[k] = dc * gg * i * (one - i);
                    dp[h + k] = dc * cp * f * (one - f);
                    dp[2 * h + k] = dh * tc * o * (one - o);
                    dp[3 * h + k] = dc * i * (one - gg * gg);
                    dc_next[r * h + k] = dc * f;
                }
            }
        }
        if t > 0 {
            let block = dpre.slice(s![t * batch..(t + 1) * batch, ..]);
            general_mat_mul(one, &block, &w_hh.t(), F::zero(), &mut dh_next);
        }
    }
    dpre
}

/// Evaluates `loss_fn` on a graph bound to `params` and returns the scalar
/// loss with its gradient store.
pub fn compute_gradients<F, L>(params: &ParamStore<F>, loss_fn: L) -> Result<(F, ParamStore<F>)>
where
    F: Real,
    L: for<'g> FnOnce(&mut Graph<'g, F>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let loss = loss_fn(&mut g)?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("a", array![[1.0, -2.0], [0.5, 3.0]]).unwrap();
        p.insert("b", array![[0.25, -1.0, 2.0], [1.5, 0.5, -0.75]]).unwrap();
        p.insert("unused", array![[9.0]]).unwrap();
        p
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_theta() {
        let p = store();
        let (loss, grads) = compute_gradients(&p, |g| {
            let a = g.param("a")?;
            let sq = g.square(a);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(loss, 1.0 + 4.0 + 0.25 + 9.0);
        assert_eq!(grads.get("a").unwrap(), &(p.get("a").unwrap() * 2.0));
        assert!(grads.get("b").unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(grads.get("unused").unwrap()[[0, 0]], 0.0);
    }

    /// Central differences over every parameter entry.
    fn check<L>(p: &ParamStore<f64>, f: L)
    where
        L: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
    {
        let (_, grads) = compute_gradients(p, &f).unwrap();
        let h = 1e-6;
        for (name, arr) in p.iter() {
            for idx in 0..arr.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
                let lp = compute_gradients(&plus, &f).unwrap().0;
                let lm = compute_gradients(&minus, &f).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(name).unwrap().as_slice().unwrap()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{name}[{idx}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        check(&store(), |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let ab = g.matmul(a, b)?;
            let t = g.transpose(ab);
            let bt = g.matmul_bt(b, b)?;
            let m = g.mul(a, bt)?;
            let s = g.sub(m, a)?;
            let sc = g.scale(s, 0.3);
            let ex = g.exp(sc);
            let sq = g.square(t);
            let r1 = g.sum(ex);
            let r2 = g.sum(sq);
            let tot = g.add(r1, r2)?;
            Ok(g.offset(tot, 1.0))
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(&store(), |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let row = g.row_slice(b, 1, 1)?;
            let bias = g.col_slice(row, 0, 2)?;
            let ar = g.add_row(a, bias)?;
            let cat = g.concat_cols(vec![ar, b])?;
            let rows = g.concat_rows(vec![cat, cat])?;
            let gathered = g.gather_rows(rows, &[0, 3, 3, 1])?;
            let sr = g.sum_rows(gathered);
            let w = g.scale_rows(sr, &[1.0, -2.0, 0.5, 3.0])?;
            let sq = g.square(w);
            let logits = g.matmul(a, b)?;
            let lp = g.log_softmax_pick(logits, &[2, 0])?;
            let s1 = g.sum(sq);
            let s2 = g.sum(lp);
            g.sub(s1, s2)
        });
    }

    #[test]
    fn lstm_cell_matches_finite_differences() {
        let mut p = ParamStore::<f64>::new();
        p.insert("pre", Array2::from_shape_fn((3, 8), |(r, c)| ((r * 8 + c) as f64 * 0.37).sin())).unwrap();
        p.insert("c0", Array2::from_shape_fn((3, 2), |(r, c)| ((r * 2 + c) as f64 * 0.71).cos())).unwrap();
        check(&p, |g| {
            let pre = g.param("pre")?;
            let c0 = g.param("c0")?;
            let hc = g.lstm_cell(pre, Some(c0))?;
            let h = g.col_slice(hc, 0, 2)?;
            let c = g.col_slice(hc, 2, 2)?;
            let hc2 = g.lstm_cell(pre, Some(c))?;
            let s = g.square(hc2);
            let a = g.sum(s);
            let b = g.sum(h);
            g.add(a, b)
        });
    }

    #[test]
    fn lstm_sequence_matches_finite_differences() {
        let (steps, batch, h) = (3, 2, 2);
        let mut p = ParamStore::<f64>::new();
        let f = |n: usize, r: usize, c: usize, k: f64| Array2::from_shape_fn((r, c), move |(i, j)| ((i * c + j + n) as f64 * k).sin());
        p.insert("xs", f(0, steps * batch, 4 * h, 0.37)).unwrap();
        p.insert("sh", f(5, batch, 4 * h, 0.53)).unwrap();
        p.insert("w", f(2, h, 4 * h, 0.91)).unwrap();
        check(&p, |g| {
            let xs = g.param("xs")?;
            let sh = g.param("sh")?;
            let w = g.param("w")?;
            let a = g.lstm_sequence(Some(xs), Some(sh), w, steps, batch)?;
            let b = g.lstm_sequence(None, Some(sh), w, steps, batch)?;
            let sa = g.square(a);
            let last = g.row_slice(b, (steps - 1) * batch, batch)?;
            let x = g.sum(sa);
            let y = g.sum(last);
            g.add(x, y)
        });
    }

    #[test]
    fn lstm_sequence_equals_unrolled_cells() {
        let (steps, batch, h) = (4, 3, 2);
        let mut g = Graph::<f64>::new();
        let xs = g.input(Array2::from_shape_fn((steps * batch, 4 * h), |(i, j)| ((i * 7 + j) as f64 * 0.29).cos()));
        let w = g.input(Array2::from_shape_fn((h, 4 * h), |(i, j)| ((i * 3 + j) as f64 * 0.61).sin()));
        let fused = g.lstm_sequence(Some(xs), None, w, steps, batch).unwrap();
        let (mut hid, mut cell) = (None, None);
        for t in 0..steps {
            let mut pre = g.row_slice(xs, t * batch, batch).unwrap();
            if let Some(hp) = hid {
                let rec = g.matmul(hp, w).unwrap();
                pre = g.add(pre, rec).unwrap();
            }
            let hc = g.lstm_cell(pre, cell).unwrap();
            hid = Some(g.col_slice(hc, 0, h).unwrap());
            cell = Some(g.col_slice(hc, h, h).unwrap());
            let want = g.value(hid.unwrap()).clone();
            let got = g.value(fused).slice(s![t * batch..(t + 1) * batch, ..]).to_owned();
            assert!((want - got).iter().all(|d| d.abs() < 1e-14));
        }
    }

    #[test]
    fn log_softmax_pick_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(array![[0.0, 0.0], [0.0, -20.0], [3.0, 1.0]]);
        let out = g.log_softmax_pick(x, &[1, 0, 0]).unwrap();
        let v = g.value(out);
        assert!((v[[0, 0]] - 0.5f64.ln()).abs() < 1e-12);
        assert!((v[[1, 0]] + (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-15);
        assert!((v[[2, 0]] + (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!(g.log_softmax_pick(x, &[2, 0, 0]).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Array2::zeros((2, 3)));
        let b = g.input(Array2::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let c = g.input(Array2::zeros((3, 2)));
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
        assert!(matches!(g.param("x"), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let p = store();
        let res = compute_gradients(&p, |g| {
            let a = g.param("a")?;
            let big = g.scale(a, 1e300);
            let e = g.exp(big);
            Ok(g.sum(e))
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
