//! Reverse-accumulation tape over dense row-major matrices.
//!
//! Every node stores its forward value; [`Tape::backward`] walks the nodes in
//! reverse and accumulates adjoints. Leaves either own their value or borrow
//! it (parameters), so binding a parameter set costs no copies.
//!
//! Batched graph data is laid out as stacked blocks: a batch of `B` samples
//! with `n` agents contributes `B * n` consecutive rows, sample `b` owning rows
//! `b*n .. (b+1)*n`. The grouped ops below rely on that layout.

use std::rc::Rc;

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Mat),
    Borrowed(&'p Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentSum(Var, usize),
    RepeatRows(Var, usize),
    GraphMix(Rc<Vec<Mat>>, Var),
    GroupedLogits(Var, Var, usize, usize),
    GroupedMix(Var, Var, usize, usize),
    Transpose(Var),
    SumAll(Var),
    SumCols(Var),
    JacobianLogNorm { tau: Var, a: Var, f: Var, graphs: Rc<Vec<Mat>>, argmax: (usize, usize, usize) },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Adjoints indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

/// `a @ b`, each output row accumulated in a fixed order so results do not
/// depend on how many rows are stacked.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch {:?} x {:?}", a.dim(), b.dim());
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Mat::zeros((n, m));
    let (av, bv) = (a.as_standard_layout(), b.as_standard_layout());
    let (ad, bd) = (av.as_slice().unwrap(), bv.as_slice().unwrap());
    let od = out.as_slice_mut().unwrap();
    for i in 0..n {
        let orow = &mut od[i * m..(i + 1) * m];
        for p in 0..k {
            let s = ad[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

fn col_sums(m: &Mat) -> Mat {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn add_into(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Row `(q, i)` of the sign-corrected log-norm of the vec(x) Jacobian of
/// `-(tau + f) o x - S x A`:
/// `-tau_q - f_iq - A_qq S_ii + sum_{(p,j) != (q,i)} |A_pq S_ij|`.
pub(crate) fn jacobian_row(tau: &[f64], a: &Mat, s: &Mat, f_row: &[f64], q: usize, i: usize) -> f64 {
    let col_abs: f64 = a.column(q).iter().map(|v| v.abs()).sum();
    let row_abs: f64 = s.row(i).iter().map(|v| v.abs()).sum();
    -tau[q] - f_row[q] - a[[q, q]] * s[[i, i]] + col_abs * row_abs - a[[q, q]].abs() * s[[i, i]].abs()
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: &'p Mat) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).mapv(f);
        self.push(v, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "{what}: shape mismatch");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    /// `a + 1 row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x c row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1 x c row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "minimum");
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, y| *x = x.min(*y));
        self.push(v, Op::Minimum(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, Rc::new(idx)))
    }

    /// Sums consecutive groups of `group` rows.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % group, 0, "segment_sum: rows not divisible by group");
        let mut v = Mat::zeros((x.nrows() / group, x.ncols()));
        for (r, row) in x.rows().into_iter().enumerate() {
            let mut out = v.row_mut(r / group);
            out += &row;
        }
        self.push(v, Op::SegmentSum(a, group))
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let idx: Vec<usize> = (0..x.nrows() * times).map(|r| r / times).collect();
        let v = x.select(Axis(0), &idx);
        self.push(v, Op::RepeatRows(a, times))
    }

    /// Block-diagonal product: sample b's rows are multiplied by `graphs[b]`.
    pub fn graph_mix(&mut self, graphs: Rc<Vec<Mat>>, x: Var) -> Var {
        let xv = self.value(x);
        let n = graphs.first().map_or(0, |g| g.nrows());
        assert_eq!(graphs.len() * n, xv.nrows(), "graph_mix: rows do not match graph blocks");
        let mut v = Mat::zeros(xv.dim());
        for (b, s) in graphs.iter().enumerate() {
            let block = xv.slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned();
            v.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&matmul(s, &block));
        }
        self.push(v, Op::GraphMix(graphs, x))
    }

    /// `out[b*n+i, c] = h[b*n+i] . phi[b*m+c]`.
    pub fn grouped_logits(&mut self, h: Var, phi: Var, n: usize, m: usize) -> Var {
        let (hv, pv) = (self.value(h), self.value(phi));
        let batches = hv.nrows() / n;
        assert_eq!(pv.nrows(), batches * m, "grouped_logits: batch mismatch");
        let mut v = Mat::zeros((hv.nrows(), m));
        for b in 0..batches {
            for i in 0..n {
                for c in 0..m {
                    v[[b * n + i, c]] = hv.row(b * n + i).dot(&pv.row(b * m + c));
                }
            }
        }
        self.push(v, Op::GroupedLogits(h, phi, n, m))
    }

    /// `out[b*n+i] = sum_c w[b*n+i, c] * phi[b*m+c]`.
    pub fn grouped_mix(&mut self, w: Var, phi: Var, n: usize, m: usize) -> Var {
        let (wv, pv) = (self.value(w), self.value(phi));
        let batches = wv.nrows() / n;
        assert_eq!(pv.nrows(), batches * m, "grouped_mix: batch mismatch");
        let mut v = Mat::zeros((wv.nrows(), pv.ncols()));
        for b in 0..batches {
            for i in 0..n {
                let mut out = v.row_mut(b * n + i);
                for c in 0..m {
                    out.scaled_add(wv[[b * n + i, c]], &pv.row(b * m + c));
                }
            }
        }
        self.push(v, Op::GroupedMix(w, phi, n, m))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as a column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Worst case over the batch of the infinity log-norm of the Jacobian of
    /// `-(tau + f) o x - S x A` with respect to vec(x). `tau` is `1 x F`, `a` is
    /// `F x F`, `f` stacks `n x F` blocks, one per graph.
    pub fn jacobian_log_norm(&mut self, tau: Var, a: Var, f: Var, graphs: Rc<Vec<Mat>>) -> Var {
        let (tv, av, fv) = (self.value(tau), self.value(a), self.value(f));
        let n = graphs.first().map_or(0, |g| g.nrows());
        let width = av.nrows();
        assert_eq!(fv.nrows(), graphs.len() * n, "jacobian_log_norm: f rows do not match graphs");
        let tau_s = tv.row(0).to_vec();
        let mut best = (f64::NEG_INFINITY, (0, 0, 0));
        for (b, s) in graphs.iter().enumerate() {
            for i in 0..n {
                let f_row = fv.row(b * n + i).to_vec();
                for q in 0..width {
                    let val = jacobian_row(&tau_s, av, s, &f_row, q, i);
                    if val > best.0 {
                        best = (val, (b, i, q));
                    }
                }
            }
        }
        let v = Mat::from_elem((1, 1), best.0);
        self.push(v, Op::JacobianLogNorm { tau, a, f, graphs, argmax: best.1 })
    }

    /// Adjoints of every node with respect to the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = node.value.get();
        let val = |v: &Var| self.value(*v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                add_into(&mut grads[a.0], matmul(g, &val(b).t().to_owned()));
                add_into(&mut grads[b.0], matmul(&val(a).t().to_owned(), g));
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], -g);
            }
            Op::Mul(a, b) => {
                add_into(&mut grads[a.0], g * val(b));
                add_into(&mut grads[b.0], g * val(a));
            }
            Op::Div(a, b) => {
                let bv = val(b);
                add_into(&mut grads[a.0], g / bv);
                add_into(&mut grads[b.0], -(g * out) / bv);
            }
            Op::AddRow(a, row) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[row.0], col_sums(g));
            }
            Op::MulRow(a, row) => {
                add_into(&mut grads[a.0], g * val(row));
                add_into(&mut grads[row.0], col_sums(&(g * val(a))));
            }
            Op::Scale(a, c) => add_into(&mut grads[a.0], g * *c),
            Op::AddScalar(a) => add_into(&mut grads[a.0], g.clone()),
            Op::Tanh(a) => add_into(&mut grads[a.0], g * &out.mapv(|y| 1.0 - y * y)),
            Op::Relu(a) => add_into(&mut grads[a.0], g * &val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Softplus(a) => add_into(&mut grads[a.0], g * &val(a).mapv(sigmoid)),
            Op::Exp(a) => add_into(&mut grads[a.0], g * out),
            Op::Log(a) => add_into(&mut grads[a.0], g / val(a)),
            Op::Square(a) => add_into(&mut grads[a.0], g * &val(a).mapv(|x| 2.0 * x)),
            Op::Clamp(a, lo, hi) => {
                let mask = val(a).mapv(|x| if *lo <= x && x <= *hi { 1.0 } else { 0.0 });
                add_into(&mut grads[a.0], g * &mask);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(a), val(b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(&mut gb).and(av).and(bv).for_each(|x, y, a, b| {
                    if a <= b {
                        *y = 0.0;
                    } else {
                        *x = 0.0;
                    }
                });
                add_into(&mut grads[a.0], ga);
                add_into(&mut grads[b.0], gb);
            }
            Op::SoftmaxRows(a) => {
                let gy = g * out;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                add_into(&mut grads[a.0], &gy - &(out * &dot));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(p).ncols();
                    add_into(&mut grads[p.0], g.slice(ndarray::s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut full = Mat::zeros(val(a).dim());
                full.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(g);
                add_into(&mut grads[a.0], full);
            }
            Op::GatherRows(a, idx) => {
                let mut full = Mat::zeros(val(a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = full.row_mut(src);
                    row += &g.row(r);
                }
                add_into(&mut grads[a.0], full);
            }
            Op::SegmentSum(a, group) => {
                let idx: Vec<usize> = (0..val(a).nrows()).map(|r| r / group).collect();
                add_into(&mut grads[a.0], g.select(Axis(0), &idx));
            }
            Op::RepeatRows(a, times) => {
                let mut full = Mat::zeros(val(a).dim());
                for (r, row) in g.rows().into_iter().enumerate() {
                    let mut acc = full.row_mut(r / times);
                    acc += &row;
                }
                add_into(&mut grads[a.0], full);
            }
            Op::GraphMix(graphs, x) => {
                let n = graphs[0].nrows();
                let mut full = Mat::zeros(val(x).dim());
                for (b, s) in graphs.iter().enumerate() {
                    let gb = g.slice(ndarray::s![b * n..(b + 1) * n, ..]).to_owned();
                    full.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&matmul(&s.t().to_owned(), &gb));
                }
                add_into(&mut grads[x.0], full);
            }
            Op::GroupedLogits(h, phi, n, m) => {
                let (hv, pv) = (val(h), val(phi));
                let mut gh = Mat::zeros(hv.dim());
                let mut gp = Mat::zeros(pv.dim());
                for b in 0..hv.nrows() / n {
                    for i in 0..*n {
                        for c in 0..*m {
                            let w = g[[b * n + i, c]];
                            gh.row_mut(b * n + i).scaled_add(w, &pv.row(b * m + c));
                            gp.row_mut(b * m + c).scaled_add(w, &hv.row(b * n + i));
                        }
                    }
                }
                add_into(&mut grads[h.0], gh);
                add_into(&mut grads[phi.0], gp);
            }
            Op::GroupedMix(w, phi, n, m) => {
                let (wv, pv) = (val(w), val(phi));
                let mut gw = Mat::zeros(wv.dim());
                let mut gp = Mat::zeros(pv.dim());
                for b in 0..wv.nrows() / n {
                    for i in 0..*n {
                        for c in 0..*m {
                            gw[[b * n + i, c]] = g.row(b * n + i).dot(&pv.row(b * m + c));
                            gp.row_mut(b * m + c).scaled_add(wv[[b * n + i, c]], &g.row(b * n + i));
                        }
                    }
                }
                add_into(&mut grads[w.0], gw);
                add_into(&mut grads[phi.0], gp);
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.t().to_owned()),
            Op::SumAll(a) => add_into(&mut grads[a.0], Mat::from_elem(val(a).dim(), g[[0, 0]])),
            Op::SumCols(a) => {
                let d = val(a).dim();
                let col = g.column(0).to_owned();
                add_into(&mut grads[a.0], Mat::from_shape_fn(d, |(r, _)| col[r]));
            }
            Op::JacobianLogNorm { tau, a, f, graphs, argmax: (b, i, q) } => {
                let (b, i, q) = (*b, *i, *q);
                let scale = g[[0, 0]];
                let s = &graphs[b];
                let n = s.nrows();
                let av = val(a);
                let mut gt = Mat::zeros(val(tau).dim());
                gt[[0, q]] = -scale;
                let mut gf = Mat::zeros(val(f).dim());
                gf[[b * n + i, q]] = -scale;
                let row_abs: f64 = s.row(i).iter().map(|v| v.abs()).sum();
                let mut ga = Mat::zeros(av.dim());
                for p in 0..av.nrows() {
                    ga[[p, q]] = scale * av[[p, q]].signum() * row_abs;
                }
                ga[[q, q]] += scale * (-s[[i, i]] - av[[q, q]].signum() * s[[i, i]].abs());
                add_into(&mut grads[tau.0], gt);
                add_into(&mut grads[f.0], gf);
                add_into(&mut grads[a.0], ga);
            }
        }
    }
}
