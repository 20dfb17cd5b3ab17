//! Tape-based reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; row vectors are `1 × n`
//! and scalars are `1 × 1`. Operations append a node recording their
//! inputs, and [`Graph::backward`] walks the tape once in reverse.
//!
//! Nodes built only from constants carry no gradient and are skipped
//! during the reverse sweep.

use ndarray::{s, Array1, Array2, Axis, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Mask(Var, Array2<f64>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LnFloor(Var, f64),
    Normalize { x: Var, inv_std: Array1<f64> },
    MaxRows { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LogSumExp(Var),
    Dot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Recording tape. Values are computed eagerly as operations are added.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence
    /// the output through any tracked path.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn accumulate_view(slot: &mut Option<Array2<f64>>, g: ndarray::ArrayView2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), t)
    }

    /// `a ⊙ row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::MulRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, k), t)
    }

    /// Element-wise product with a constant mask (used for dropout).
    pub fn mask(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let value = self.value(a) * &mask;
        let t = self.tracked(a);
        self.push(value, Op::Mask(a, mask), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulBt(a, b), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let t = self.tracked(a);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let t = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let t = self.tracked(a);
        self.push(value, Op::LogSoftmaxRows(a), t)
    }

    /// `ln(max(a, floor))`; no gradient where `a < floor`.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|v| v.max(floor).ln());
        let t = self.tracked(a);
        self.push(value, Op::LnFloor(a, floor), t)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *is = 1.0 / (var + eps).sqrt();
            let k = *is;
            row.mapv_inplace(|v| v * k);
        }
        let t = self.tracked(a);
        self.push(out, Op::Normalize { x: a, inv_std }, t)
    }

    /// Column-wise maximum over rows, giving a `1 × n` row. Ties resolve
    /// to the first row attaining the maximum.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.ncols();
        let mut argmax = vec![0usize; cols];
        let mut out = Array2::from_elem((1, cols), f64::NEG_INFINITY);
        for (r, row) in x.rows().into_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > out[[0, c]] {
                    out[[0, c]] = v;
                    argmax[c] = r;
                }
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::MaxRows { x: a, argmax }, t)
    }

    /// Mean over rows, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let t = self.tracked(a);
        self.push(value, Op::MeanRows(a), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(value, Op::SumAll(a), t)
    }

    /// `ln Σ exp(a)` over every entry, as a `1 × 1` scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = self.tracked(a);
        self.push(Array2::from_elem((1, 1), lse), Op::LogSumExp(a), t)
    }

    /// Inner product of two equally shaped nodes, as a `1 × 1` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = (self.value(a) * self.value(b)).sum();
        let t = self.tracked(a) || self.tracked(b);
        self.push(Array2::from_elem((1, 1), v), Op::Dot(a, b), t)
    }

    /// Rows `start .. start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let t = self.tracked(a);
        self.push(value, Op::SliceRows { x: a, start }, t)
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let t = self.tracked(a);
        self.push(value, Op::SliceCols { x: a, start }, t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        self.backward_seeded(&[(output, Array2::ones((1, 1)))])
    }

    /// Reverse sweep starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], -g);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.tracked(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*row));
                }
                if self.tracked(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[a.0], g * *k),
            Op::Mask(a, m) => accumulate(&mut grads[a.0], g * m),
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(&mut grads[a.0], d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(y)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                accumulate(&mut grads[a.0], d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &p| *d -= p * s);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &ly| *d -= ly.exp() * s);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::LnFloor(a, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d = if x < *floor { 0.0 } else { *d / x });
                accumulate(&mut grads[a.0], d);
            }
            Op::Normalize { x, inv_std } => {
                let n = y.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), &is) in
                    d.rows_mut().into_iter().zip(y.rows()).zip(inv_std.iter())
                {
                    let sum_g = drow.sum();
                    let sum_gy = drow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &yh| *d = is * (*d - sum_g / n - yh * sum_gy / n));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::MaxRows { x, argmax } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Array2::zeros((rows, cols));
                for (c, &r) in argmax.iter().enumerate() {
                    d[[r, c]] = g[[0, c]];
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let row = g.row(0).mapv(|v| v / rows as f64);
                let d = row
                    .broadcast((rows, cols))
                    .expect("row broadcast")
                    .to_owned();
                accumulate(&mut grads[a.0], d);
            }
            Op::SumAll(a) => {
                let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                accumulate(&mut grads[a.0], d);
            }
            Op::LogSumExp(a) => {
                let lse = y[[0, 0]];
                let gs = g[[0, 0]];
                let d = self.value(*a).mapv(|v| gs * (v - lse).exp());
                accumulate(&mut grads[a.0], d);
            }
            Op::Dot(a, b) => {
                let gs = g[[0, 0]];
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], self.value(*b) * gs);
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], self.value(*a) * gs);
                }
            }
            Op::SliceRows { x, start } => {
                let mut d = Array2::zeros(self.shape(*x));
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::SliceCols { x, start } => {
                let mut d = Array2::zeros(self.shape(*x));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[x.0], d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = self.shape(*p).0;
                    if self.tracked(*p) {
                        accumulate_view(&mut grads[p.0], g.slice(s![off..off + r, ..]));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if self.tracked(*p) {
                        accumulate_view(&mut grads[p.0], g.slice(s![.., off..off + c]));
                    }
                    off += c;
                }
            }
        }
    }
}
