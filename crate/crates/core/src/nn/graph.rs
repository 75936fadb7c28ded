//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are referenced from a borrowed [`ParamStore`] without copying;
//! [`Graph::backward`] returns the gradients of a scalar node with respect to
//! every parameter and input leaf that reaches it.

use std::rc::Rc;

use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-major boolean attention mask; `true` lets a query attend to a key.
pub type Mask = Rc<Vec<bool>>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, s: f64 },
    ScaleByEntry { x: Var, s: Var, idx: usize },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    RepeatRow { a: Var },
    Nll { logits: Var, targets: Vec<usize>, probs: Matrix },
    Sum(Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient reaching node `v`, if any flowed there.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, summed over every reference to the same parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = Vec::new();
        for &(pid, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match out.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((pid, g.clone())),
            }
        }
        out
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(pid)) => self.store.value(*pid),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = maybe_t(self.value(a), ta);
        let bv = maybe_t(self.value(b), tb);
        let out = av.matmul(&bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// Multiplies every row of `a` elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "mul_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, s }, ng)
    }

    /// `s[0, idx] · x` for a 1×k row of scalars `s`.
    pub fn scale_by_entry(&mut self, x: Var, s: Var, idx: usize) -> Var {
        let factor = self.value(s).data[idx];
        let out = self.value(x).scale(factor);
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleByEntry { x, s, idx }, ng)
    }

    /// Row-wise softmax. Masked-out entries (`false`) get probability 0; a
    /// row with no admissible entry becomes all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Var {
        let av = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), av.data.len(), "softmax mask size mismatch");
        }
        let out = softmax_rows(av, mask.map(|m| m.as_slice()));
        let ng = self.ng(a);
        self.push(out, Op::Softmax { a }, ng)
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { a, inv_std }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let out = Matrix::from_vec(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    /// Stacks the single row of `a` `n` times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, 1, "repeat_row expects a single row");
        let mut data = Vec::with_capacity(n * av.cols);
        for _ in 0..n {
            data.extend_from_slice(&av.data);
        }
        let out = Matrix::from_vec(n, av.cols, data);
        let ng = self.ng(a);
        self.push(out, Op::RepeatRow { a }, ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; a 1×1 node.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "nll target count mismatch");
        let probs = softmax_rows(lv, None);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += log_sum_exp(lv.row(r)) - lv.get(r, t);
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut params = Vec::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let send = |v: Var, g: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Input => {}
                Op::Param(pid) => params.push((*pid, i)),
                Op::MatMul { a, b, ta, tb } => {
                    let av = maybe_t(self.value(*a), *ta);
                    let bv = maybe_t(self.value(*b), *tb);
                    if self.ng(*a) {
                        let da = dy.matmul(&bv.transpose());
                        send(*a, if *ta { da.transpose() } else { da }, &mut grads);
                    }
                    if self.ng(*b) {
                        let db = av.transpose().matmul(&dy);
                        send(*b, if *tb { db.transpose() } else { db }, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut grads);
                    send(*b, dy.clone(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(*a, elementwise(&dy, bv, |g, x| g * x), &mut grads);
                    }
                    if self.ng(*b) {
                        send(*b, elementwise(&dy, av, |g, x| g * x), &mut grads);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.ng(*row) {
                        send(*row, col_sums(&dy), &mut grads);
                    }
                    send(*a, dy.clone(), &mut grads);
                }
                Op::MulRow { a, row } => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    if self.ng(*row) {
                        send(*row, col_sums(&elementwise(&dy, av, |g, x| g * x)), &mut grads);
                    }
                    if self.ng(*a) {
                        let mut da = dy.clone();
                        for r in 0..da.rows {
                            for (d, s) in da.row_mut(r).iter_mut().zip(&rv.data) {
                                *d *= s;
                            }
                        }
                        send(*a, da, &mut grads);
                    }
                }
                Op::Scale { a, s } => send(*a, dy.scale(*s), &mut grads),
                Op::ScaleByEntry { x, s, idx } => {
                    let sv = self.value(*s);
                    if self.ng(*s) {
                        let xv = self.value(*x);
                        let dot: f64 = dy.data.iter().zip(&xv.data).map(|(g, v)| g * v).sum();
                        let mut ds = Matrix::zeros(sv.rows, sv.cols);
                        ds.data[*idx] = dot;
                        send(*s, ds, &mut grads);
                    }
                    if self.ng(*x) {
                        send(*x, dy.scale(sv.data[*idx]), &mut grads);
                    }
                }
                Op::Softmax { a } => {
                    let y = self.value(Var(i));
                    let mut da = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    send(*a, da, &mut grads);
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = self.value(Var(i));
                    let mut da = Matrix::zeros(y.rows, y.cols);
                    let n = y.cols as f64;
                    for (r, &istd) in inv_std.iter().enumerate().take(y.rows) {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(g, v)| g * v).sum::<f64>() / n;
                        for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                            *d = istd * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    send(*a, da, &mut grads);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    send(*a, elementwise(&dy, x, |g, v| g * gelu_grad(v)), &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    send(*a, elementwise(&dy, y, |g, s| g * s * (1.0 - s)), &mut grads);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    send(*table, dt, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let g = Matrix::from_vec(
                            rows,
                            cols,
                            dy.data[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        send(p, g, &mut grads);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut g = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            g.row_mut(r)
                                .copy_from_slice(&dy.row(r)[offset..offset + cols]);
                        }
                        send(p, g, &mut grads);
                        offset += cols;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    g.data[start * cols..start * cols + dy.data.len()].copy_from_slice(&dy.data);
                    send(*a, g, &mut grads);
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    send(*a, g, &mut grads);
                }
                Op::RepeatRow { a } => send(*a, col_sums(&dy), &mut grads),
                Op::Nll {
                    logits,
                    targets,
                    probs,
                } => {
                    let upstream = dy.data[0];
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = dl.get(r, t);
                        dl.set(r, t, v - 1.0);
                    }
                    send(*logits, dl.scale(upstream), &mut grads);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    send(*a, Matrix::filled(rows, cols, dy.data[0]), &mut grads);
                }
            }
            // Keep gradients of leaves for the caller.
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(dy);
            }
        }
        Gradients { grads, params }
    }
}

fn maybe_t(m: &Matrix, t: bool) -> std::borrow::Cow<'_, Matrix> {
    if t {
        std::borrow::Cow::Owned(m.transpose())
    } else {
        std::borrow::Cow::Borrowed(m)
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, v) in out.data.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(m: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let keep = |c: usize| mask.is_none_or(|mk| mk[r * m.cols + c]);
        let max = (0..m.cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut z = 0.0;
        for c in 0..m.cols {
            if keep(c) {
                o[c] = (row[c] - max).exp();
                z += o[c];
            }
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
