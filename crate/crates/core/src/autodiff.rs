//! A small reverse-mode automatic differentiation tape over `f64` matrices.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse.
//! Constants (including `detach`ed copies) never receive gradient, so
//! stop-gradient is structural rather than numerical.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Transpose(Var),
    MaskedSoftmax(Var, Rc<Vec<bool>>),
    LogSoftmax(Var),
    /// Per-row standardisation; aux holds 1/σ per row.
    RowNorm(Var),
    /// Per-row division by max(‖x‖, ε); aux holds the divisor per row.
    L2NormalizeRows(Var, f64),
    RowDot(Var, Var),
    RowSum(Var),
    Sum(Var),
    /// out[i] = x[i + offset], zero outside the range.
    ShiftRows(Var, isize),
    ConcatRows(Vec<Var>),
    SelectRow(Var, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    aux: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when none flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(like.raw_dim()))
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

    fn push(&mut self, value: Array2<f64>, op: Op, aux: Option<Vec<f64>>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), None, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), None, &[a, b])
    }

    /// `a` (r×c) plus the row vector `b` (1×c) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b), None, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), None, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), None, &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), None, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), None, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), None, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a), None, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a), None, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a), None, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), None, &[a])
    }

    /// Row-wise softmax over columns where `mask` is true; masked entries are 0.
    /// Every row must have at least one unmasked column.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), mask.len(), "mask length must equal column count");
        let mut out = Array2::zeros(x.raw_dim());
        for (row, mut o) in x.outer_iter().zip(out.outer_iter_mut()) {
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ((o, &v), &m) in o.iter_mut().zip(row.iter()).zip(mask.iter()) {
                if m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            o.mapv_inplace(|e| e / total);
        }
        self.push(out, Op::MaskedSoftmax(a, mask), None, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(a), None, &[a])
    }

    /// Per-row zero mean, unit (biased) variance with `eps` inside the root.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.outer_iter_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::RowNorm(a), Some(inv_std), &[a])
    }

    /// Divide each row by max(‖row‖₂, eps).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut divisors = Vec::with_capacity(x.nrows());
        for mut row in out.outer_iter_mut() {
            let norm = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|v| v / norm);
            divisors.push(norm);
        }
        self.push(out, Op::L2NormalizeRows(a, eps), Some(divisors), &[a])
    }

    /// Per-row dot product, r×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowDot(a, b), None, &[a, b])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a), None, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a), None, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let out = shifted(x, offset);
        self.push(out, Op::ShiftRows(a, offset), None, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()), None, parts)
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let out = self.value(a).slice(s![row..row + 1, ..]).to_owned();
        self.push(out, Op::SelectRow(a, row), None, &[a])
    }

    /// `x·w + b` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Row-wise cosine similarity with each norm floored at `eps`, r×1.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let na = self.l2_normalize_rows(a, eps);
        let nb = self.l2_normalize_rows(b, eps);
        self.row_dot(na, nb)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= sign(x));
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= 2.0 * x);
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::MaskedSoftmax(a, mask) => {
                let mut d = Array2::zeros(y.raw_dim());
                for ((yr, gr), mut dr) in y.outer_iter().zip(g.outer_iter()).zip(d.outer_iter_mut()) {
                    let inner = yr.dot(&gr);
                    for j in 0..yr.len() {
                        if mask[j] {
                            dr[j] = yr[j] * (gr[j] - inner);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for (yr, mut dr) in y.outer_iter().zip(d.outer_iter_mut()) {
                    let total = dr.sum();
                    Zip::from(&mut dr).and(&yr).for_each(|d, &l| *d -= l.exp() * total);
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowNorm(a) => {
                let inv_std = node.aux.as_ref().expect("row_norm aux");
                let c = y.ncols() as f64;
                let mut d = Array2::zeros(y.raw_dim());
                for (i, ((yr, gr), mut dr)) in y
                    .outer_iter()
                    .zip(g.outer_iter())
                    .zip(d.outer_iter_mut())
                    .enumerate()
                {
                    let g_mean = gr.sum() / c;
                    let gy_mean = gr.dot(&yr) / c;
                    for j in 0..yr.len() {
                        dr[j] = inv_std[i] * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows(a, eps) => {
                let divisors = node.aux.as_ref().expect("l2 aux");
                let mut d = Array2::zeros(y.raw_dim());
                for (i, ((yr, gr), mut dr)) in y
                    .outer_iter()
                    .zip(g.outer_iter())
                    .zip(d.outer_iter_mut())
                    .enumerate()
                {
                    let n = divisors[i];
                    // At the floor the divisor is a constant.
                    let clamped = n <= *eps;
                    let proj = if clamped { 0.0 } else { yr.dot(&gr) };
                    for j in 0..yr.len() {
                        dr[j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowDot(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, self.value(*b) * g);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a) * g);
                }
            }
            Op::RowSum(a) => {
                let shape = self.value(*a).raw_dim();
                let d = g.broadcast(shape).expect("row_sum broadcast").to_owned();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::ShiftRows(a, offset) => self.accumulate(grads, *a, shifted(g, -offset)),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::SelectRow(a, row) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.row_mut(*row).assign(&g.row(0));
                self.accumulate(grads, *a, d);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn shifted(x: &Array2<f64>, offset: isize) -> Array2<f64> {
    let n = x.nrows() as isize;
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..n {
        let src = i + offset;
        if (0..n).contains(&src) {
            out.row_mut(i as usize).assign(&x.row(src as usize));
        }
    }
    out
}
