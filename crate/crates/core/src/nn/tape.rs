//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node holding its value; `backward` walks the
//! nodes in reverse and accumulates adjoints. Nodes created from parameter
//! blocks report their gradients by block index.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    SelectCols(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    MulRows(Var, Var),
    AbsPercentSum(Var, Vec<f64>),
    Sum(Vec<Var>),
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Array2<f64>>,
    /// Whether a parameter leaf is upstream of the node.
    live: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        let live = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::MulRows(a, b) => {
                self.live[a.0] || self.live[b.0]
            }
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::GatherRows(x, _)
            | Op::ScatterAddRows(x, _)
            | Op::SliceRows(x, _)
            | Op::SliceCols(x, _)
            | Op::SelectCols(x, _)
            | Op::SegmentSoftmax(x, _)
            | Op::AbsPercentSum(x, _) => self.live[x.0],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) | Op::Sum(parts) => {
                parts.iter().any(|p| self.live[p.0])
            }
        };
        self.live.push(live);
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A parameter block whose gradient is reported under `block`.
    pub fn param(&mut self, block: usize, value: Array2<f64>) -> Var {
        self.push(Op::Param(block), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// Adds the `1 x m` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(Op::AddBias(x, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.push(Op::Scale(x, c), v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { slope * a });
        self.push(Op::LeakyRelu(x, slope), v)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let v = self.value(x).select(Axis(0), &idx);
        self.push(Op::GatherRows(x, idx), v)
    }

    /// Row `i` of `x` is added into output row `idx[i]`, in order.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Var {
        let src = self.value(x);
        let mut out = Array2::zeros((rows, src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            let mut row = out.row_mut(r);
            row += &src.row(i);
        }
        self.push(Op::ScatterAddRows(x, idx), out)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<ArrayView2<'_, f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts), v)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<ArrayView2<'_, f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(Op::ConcatRows(parts), v)
    }

    pub fn slice_rows(&mut self, x: Var, r: Range<usize>) -> Var {
        let v = self.value(x).slice(s![r.clone(), ..]).to_owned();
        self.push(Op::SliceRows(x, r), v)
    }

    pub fn slice_cols(&mut self, x: Var, r: Range<usize>) -> Var {
        let v = self.value(x).slice(s![.., r.clone()]).to_owned();
        self.push(Op::SliceCols(x, r), v)
    }

    /// Column `cols[i]` of row `i`, as an `n x 1` column.
    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let src = self.value(x);
        let v = Array2::from_shape_fn((cols.len(), 1), |(i, _)| src[[i, cols[i]]]);
        self.push(Op::SelectCols(x, cols), v)
    }

    /// Softmax of an `n x 1` column within groups sharing `segment[i]`.
    pub fn segment_softmax(&mut self, x: Var, segment: Vec<usize>) -> Var {
        let src = self.value(x);
        let groups = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (i, &g) in segment.iter().enumerate() {
            max[g] = max[g].max(src[[i, 0]]);
        }
        let mut v = Array2::zeros((segment.len(), 1));
        let mut total = vec![0.0; groups];
        for (i, &g) in segment.iter().enumerate() {
            let e = (src[[i, 0]] - max[g]).exp();
            v[[i, 0]] = e;
            total[g] += e;
        }
        for (i, &g) in segment.iter().enumerate() {
            v[[i, 0]] /= total[g];
        }
        self.push(Op::SegmentSoftmax(x, segment), v)
    }

    /// Scales row `i` of `x` by the scalar `s[i, 0]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let v = self.value(x) * self.value(s);
        self.push(Op::MulRows(x, s), v)
    }

    /// `sum_i |x_i - y_i| / y_i` over an `n x 1` column.
    pub fn abs_percent_sum(&mut self, x: Var, labels: Vec<f64>) -> Var {
        let src = self.value(x);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (src[[i, 0]] - y).abs() / y)
            .sum();
        self.push(Op::AbsPercentSum(x, labels), Array2::from_elem((1, 1), total))
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v += self.value(p);
        }
        self.push(Op::Sum(parts), v)
    }

    /// Adjoints of every parameter leaf with respect to the scalar `root`,
    /// as `(block, gradient)` pairs in tape order.
    pub fn backward(&self, root: Var) -> Vec<(usize, Array2<f64>)> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.ops.len()];
        if !self.live[root.0] {
            return Vec::new();
        }
        grads[root.0] = Some(Array2::ones(self.values[root.0].raw_dim()));
        let mut out = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let live = &self.live;
            let mut acc = |v: Var, d: Array2<f64>| {
                if !live[v.0] {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param(block) => out.push((*block, g)),
                Op::MatMul(a, b) => {
                    if live[a.0] {
                        acc(*a, g.dot(&self.values[b.0].t()));
                    }
                    if live[b.0] {
                        acc(*b, self.values[a.0].t().dot(&g));
                    }
                }
                Op::AddBias(x, b) => {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Scale(x, c) => acc(*x, g * *c),
                Op::Relu(x) => {
                    let mut d = g;
                    d.zip_mut_with(&self.values[x.0], |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*x, d);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut d = g;
                    d.zip_mut_with(&self.values[x.0], |d, &a| {
                        if a <= 0.0 {
                            *d *= slope
                        }
                    });
                    acc(*x, d);
                }
                Op::GatherRows(x, idx) => {
                    let src = &self.values[x.0];
                    let mut d = Array2::zeros(src.raw_dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    acc(*x, d);
                }
                Op::ScatterAddRows(x, idx) => acc(*x, g.select(Axis(0), idx)),
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.values[p.0].ncols();
                        acc(p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.values[p.0].nrows();
                        acc(p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::SliceRows(x, r) => {
                    let mut d = Array2::zeros(self.values[x.0].raw_dim());
                    d.slice_mut(s![r.clone(), ..]).assign(&g);
                    acc(*x, d);
                }
                Op::SliceCols(x, r) => {
                    let mut d = Array2::zeros(self.values[x.0].raw_dim());
                    d.slice_mut(s![.., r.clone()]).assign(&g);
                    acc(*x, d);
                }
                Op::SelectCols(x, cols) => {
                    let mut d = Array2::zeros(self.values[x.0].raw_dim());
                    for (k, &c) in cols.iter().enumerate() {
                        d[[k, c]] = g[[k, 0]];
                    }
                    acc(*x, d);
                }
                Op::SegmentSoftmax(x, segment) => {
                    let y = &self.values[i];
                    let groups = segment.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; groups];
                    for (k, &s) in segment.iter().enumerate() {
                        dot[s] += g[[k, 0]] * y[[k, 0]];
                    }
                    let d = Array2::from_shape_fn(y.raw_dim(), |(k, _)| {
                        y[[k, 0]] * (g[[k, 0]] - dot[segment[k]])
                    });
                    acc(*x, d);
                }
                Op::MulRows(x, sc) => {
                    let xv = &self.values[x.0];
                    let sv = &self.values[sc.0];
                    if live[sc.0] {
                        acc(*sc, (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if live[x.0] {
                        acc(*x, &g * sv);
                    }
                }
                Op::AbsPercentSum(x, labels) => {
                    let xv = &self.values[x.0];
                    let g0 = g[[0, 0]];
                    let d = Array2::from_shape_fn(xv.raw_dim(), |(k, _)| {
                        let diff = xv[[k, 0]] - labels[k];
                        g0 * diff.signum() * f64::from(u8::from(diff != 0.0)) / labels[k]
                    });
                    acc(*x, d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(p, g.clone());
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x` against the analytic adjoint.
    fn check(x0: Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone());
        let y = f(&mut tape, x);
        let grads = tape.backward(y);
        let mut analytic = Array2::zeros(x0.raw_dim());
        for (_, g) in grads {
            analytic += &g;
        }
        let eps = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let v = t.param(0, xp);
                let out = f(&mut t, v);
                t.scalar(out)
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(
                (fd - analytic[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry {idx}: fd {fd} vs analytic {}",
                analytic[[r, c]]
            );
        }
    }

    /// A generic scalar readout `r^T v c` with distinct weights.
    fn total(t: &mut Tape, v: Var) -> Var {
        let (n, m) = t.value(v).dim();
        let r = t.leaf(Array2::from_shape_fn((1, n), |(_, i)| 0.4 + 0.3 * i as f64));
        let c = t.leaf(Array2::from_shape_fn((m, 1), |(j, _)| -0.6 + 0.5 * j as f64));
        let rv = t.matmul(r, v);
        t.matmul(rv, c)
    }

    #[test]
    fn matmul_bias_activations() {
        let x0 = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        check(x0.clone(), |t, x| {
            let w = t.leaf(array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.6]]);
            let b = t.leaf(array![[0.05, -0.02]]);
            let y = t.matmul(x, w);
            let y = t.add_bias(y, b);
            let y = t.relu(y);
            total(t, y)
        });
        check(x0, |t, x| {
            let y = t.leaky_relu(x, 0.2);
            let z = t.scale(y, 1.7);
            total(t, z)
        });
    }

    #[test]
    fn structural_ops() {
        let x0 = array![[0.3, -0.7], [0.5, 0.2], [1.5, -0.4]];
        check(x0, |t, x| {
            let g = t.gather_rows(x, vec![2, 0, 2, 1]);
            let s = t.scatter_add_rows(g, vec![1, 1, 0, 3], 4);
            let top = t.slice_rows(s, 0..2);
            let bottom = t.slice_rows(s, 2..4);
            let c = t.concat_cols(vec![top, bottom]);
            let r = t.concat_rows(vec![c, c]);
            let sc = t.slice_cols(r, 1..3);
            total(t, sc)
        });
    }

    #[test]
    fn softmax_select_and_losses() {
        let x0 = array![[0.3, -0.7], [0.5, 0.2], [1.5, -0.4], [0.1, 0.9]];
        check(x0, |t, x| {
            let sel = t.select_cols(x, vec![0, 1, 1, 0]);
            let a = t.segment_softmax(sel, vec![0, 1, 0, 0]);
            let m = t.mul_rows(x, a);
            let col = t.slice_cols(m, 0..1);
            let l = t.abs_percent_sum(col, vec![2.0, 3.0, 0.5, 1.0]);
            let k = total(t, m);
            t.sum(vec![l, k])
        });
    }

    #[test]
    fn softmax_groups_normalize() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0], [2.0], [3.0], [-1.0]]);
        let a = t.segment_softmax(x, vec![0, 1, 0, 1]);
        let v = t.value(a);
        assert!((v[[0, 0]] + v[[2, 0]] - 1.0).abs() < 1e-15);
        assert!((v[[1, 0]] + v[[3, 0]] - 1.0).abs() < 1e-15);
    }
}
