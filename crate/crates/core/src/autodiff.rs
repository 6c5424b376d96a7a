//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Values are computed eagerly as nodes are pushed. Parameters are borrowed
//! from a [`ParameterRegistry`] rather than copied, so one graph per episode
//! costs only the activations it creates. Every value is a 2-D array; scalars
//! are `1×1` and vectors are single rows.
//!
//! Shape errors inside the graph are programming errors and panic. The
//! public operations in the model modules validate their inputs first.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Gradients, ParamId, ParameterRegistry};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// `a · b`
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1·b` where `b` is a single row.
    AddRow(Var, Var),
    /// Column vector `v` (L×1) to L×L with `out[i][j] = v[i] + v[j]`.
    PairSum(Var),
    Scale(Var, f64),
    Tanh(Var),
    /// Rows rescaled to a fixed Euclidean norm; keeps the input row norms.
    NormalizeRows(Var, f64, Vec<f64>),
    SoftmaxRows(Var),
    /// Row gather, used for embedding lookup.
    Gather(Var, Vec<usize>),
    /// `out[i] = a[i - offset]`, zero where out of range.
    Shift(Var, isize),
    /// `a[start] + a[end]` as a single row.
    RowPair(Var, usize, usize),
    Sum(Vec<Var>),
    /// Scalars laid out as one row.
    Concat(Vec<Var>),
    /// Euclidean distance between two rows.
    Distance(Var, Var),
    /// `-log softmax(a)[target]` for a single-row `a`.
    NegLogSoftmax(Var, usize),
    /// `max(0, margin - a)` for a scalar `a`.
    Hinge(Var, f64),
    /// `log(1 + Σ_{i<=j} exp(sign_ij · a_ij))`, `sign = -1` on positive cells.
    SpanLoss(Var, Array2<bool>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameters, whose values live in the registry.
    value: Option<Array2<f64>>,
}

pub struct Graph<'p> {
    params: Option<&'p ParameterRegistry>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with inputs only.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParameterRegistry) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self
                .params
                .expect("parameter node without registry")
                .value(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    /// The single entry of a `1×1` value.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "not a scalar");
        a[[0, 0]]
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    /// Leaf for a registry parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "graph has no parameter registry");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dim(), y.dim(), "add shape mismatch");
        let out = x + y;
        self.push(Op::Add(a, b), out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        assert_eq!(x.ncols(), r.ncols(), "add_row width mismatch");
        let out = x + r;
        self.push(Op::AddRow(a, row), out)
    }

    pub fn pair_sum(&mut self, v: Var) -> Var {
        let col = self.value(v);
        assert_eq!(col.ncols(), 1, "pair_sum expects a column");
        let n = col.nrows();
        let out = Array2::from_shape_fn((n, n), |(i, j)| col[[i, 0]] + col[[j, 0]]);
        self.push(Op::PairSum(v), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(Op::Scale(a, c), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    /// Rescales every row to Euclidean norm `scale`.
    pub fn normalize_rows(&mut self, a: Var, scale: f64) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|x| scale * x / n);
            norms.push(n);
        }
        self.push(Op::NormalizeRows(a, scale, norms), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(Op::Gather(a, rows), out)
    }

    pub fn shift(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let n = x.nrows() as isize;
        let mut out = Array2::zeros(x.raw_dim());
        for i in 0..n {
            let src = i - offset;
            if (0..n).contains(&src) {
                out.row_mut(i as usize).assign(&x.row(src as usize));
            }
        }
        self.push(Op::Shift(a, offset), out)
    }

    pub fn row_pair(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        let out = (&x.row(start) + &x.row(end)).insert_axis(Axis(0));
        self.push(Op::RowPair(a, start, end), out)
    }

    pub fn sum(&mut self, vars: Vec<Var>) -> Var {
        assert!(!vars.is_empty(), "sum of nothing");
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            out += self.value(*v);
        }
        self.push(Op::Sum(vars), out)
    }

    pub fn mean(&mut self, vars: Vec<Var>) -> Var {
        let n = vars.len() as f64;
        let total = self.sum(vars);
        self.scale(total, 1.0 / n)
    }

    pub fn concat(&mut self, scalars: Vec<Var>) -> Var {
        let row: Vec<f64> = scalars.iter().map(|&v| self.scalar(v)).collect();
        let out = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
        self.push(Op::Concat(scalars), out)
    }

    pub fn distance(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dim(), y.dim(), "distance shape mismatch");
        let d = Zip::from(x).and(y).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q)).sqrt();
        self.push(Op::Distance(a, b), Array2::from_elem((1, 1), d))
    }

    pub fn neg_log_softmax(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), 1, "neg_log_softmax expects a row");
        let lse = log_sum_exp(x.iter().copied());
        let out = lse - x[[0, target]];
        self.push(Op::NegLogSoftmax(logits, target), Array2::from_elem((1, 1), out))
    }

    pub fn hinge(&mut self, a: Var, margin: f64) -> Var {
        let out = (margin - self.scalar(a)).max(0.0);
        self.push(Op::Hinge(a, margin), Array2::from_elem((1, 1), out))
    }

    /// Span loss over the upper triangle of a square score matrix. Cells below
    /// the diagonal never enter the sum.
    pub fn span_loss(&mut self, scores: Var, target: Array2<bool>) -> Var {
        let f = self.value(scores);
        assert_eq!(f.dim(), target.dim(), "span_loss shape mismatch");
        let loss = span_loss_value(f, &target);
        self.push(Op::SpanLoss(scores, target), Array2::from_elem((1, 1), loss))
    }

    /// Reverse pass from a scalar. Returns the gradient of every node.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = || node.value.as_ref().expect("computed node");
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, grow);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::PairSum(v) => {
                    let gv = (&g.sum_axis(Axis(1)) + &g.sum_axis(Axis(0))).insert_axis(Axis(1));
                    accumulate(&mut grads, *v, gv);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Tanh(a) => {
                    let y = out();
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, scale, norms) => {
                    let y = out();
                    let mut ga = g.clone();
                    for ((mut gr, yr), &n) in ga.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let along = gr.dot(&yr) / (scale * scale);
                        gr.zip_mut_with(&yr, |gi, &yi| *gi = (scale / n) * (*gi - along * yi));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = out();
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Shift(a, offset) => {
                    let n = g.nrows() as isize;
                    let mut ga = Array2::zeros(g.raw_dim());
                    for i in 0..n {
                        let src = i - offset;
                        if (0..n).contains(&src) {
                            let mut dst = ga.row_mut(src as usize);
                            dst += &g.row(i as usize);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowPair(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    {
                        let mut r = ga.row_mut(*start);
                        r += &g.row(0);
                    }
                    {
                        let mut r = ga.row_mut(*end);
                        r += &g.row(0);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(vars) => {
                    for v in vars {
                        accumulate(&mut grads, *v, g.clone());
                    }
                }
                Op::Concat(vars) => {
                    for (k, v) in vars.iter().enumerate() {
                        accumulate(&mut grads, *v, Array2::from_elem((1, 1), g[[0, k]]));
                    }
                }
                Op::Distance(a, b) => {
                    let d = out()[[0, 0]];
                    if d > 0.0 {
                        let diff = self.value(*a) - self.value(*b);
                        let ga = diff * (g[[0, 0]] / d);
                        accumulate(&mut grads, *b, -&ga);
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::NegLogSoftmax(logits, target) => {
                    let x = self.value(*logits);
                    let lse = log_sum_exp(x.iter().copied());
                    let mut ga = x.mapv(|v| (v - lse).exp());
                    ga[[0, *target]] -= 1.0;
                    accumulate(&mut grads, *logits, ga * g[[0, 0]]);
                }
                Op::Hinge(a, margin) => {
                    if margin - self.scalar(*a) > 0.0 {
                        accumulate(&mut grads, *a, Array2::from_elem((1, 1), -g[[0, 0]]));
                    }
                }
                Op::SpanLoss(scores, target) => {
                    let f = self.value(*scores);
                    let loss = out()[[0, 0]];
                    let n = f.nrows();
                    let mut ga = Array2::zeros((n, n));
                    for i in 0..n {
                        for j in i..n {
                            let sign = if target[[i, j]] { -1.0 } else { 1.0 };
                            ga[[i, j]] = sign * (sign * f[[i, j]] - loss).exp() * g[[0, 0]];
                        }
                    }
                    accumulate(&mut grads, *scores, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Backward { grads }
    }

    /// Reverse pass collecting only parameter gradients.
    pub fn param_gradients(&self, loss: Var) -> Gradients {
        let n = self.params.map_or(0, ParameterRegistry::len);
        let mut out = Gradients::empty(n);
        let back = self.backward(loss);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = back.grad(v) {
                out.add(id, g);
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Backward {
    grads: Vec<Option<Array2<f64>>>,
}

impl Backward {
    /// `None` when the node does not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(1 + Σ exp(z))` over the signed upper-triangle cells, via log-sum-exp
/// with the leading `1` treated as an extra `exp(0)` term.
pub(crate) fn span_loss_value(f: &Array2<f64>, target: &Array2<bool>) -> f64 {
    let n = f.nrows();
    let cells = (0..n).flat_map(|i| {
        f.slice(s![i, i..])
            .iter()
            .zip(target.slice(s![i, i..]).iter())
            .map(|(&x, &pos)| if pos { -x } else { x })
            .collect::<Vec<_>>()
    });
    log_sum_exp(std::iter::once(0.0).chain(cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around `x`.
    fn numeric(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += eps;
            let mut m = x.clone();
            m[[r, c]] -= eps;
            g[[r, c]] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn check(x: Array2<f64>, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let loss = build(&mut g, v);
        let analytic = g.backward(loss).grad(v).cloned().unwrap_or_else(|| Array2::zeros(x.raw_dim()));
        let numeric = numeric(&x, |p| {
            let mut g = Graph::new();
            let v = g.input(p.clone());
            let l = build(&mut g, v);
            g.scalar(l)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    fn sum_all(g: &mut Graph, v: Var) -> Var {
        let cols = g.value(v).ncols();
        let rows = g.value(v).nrows();
        let ones_r = g.input(Array2::ones((1, rows)));
        let ones_c = g.input(Array2::ones((cols, 1)));
        let t = g.matmul(ones_r, v);
        g.matmul(t, ones_c)
    }

    fn x3() -> Array2<f64> {
        array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4], [-0.7, 0.6, 1.1]]
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let w = array![[0.2, -0.3, 0.5], [1.0, 0.4, -0.1], [0.3, 0.3, 0.8]];
        check(x3(), |g, v| {
            let w = g.input(w.clone());
            let a = g.matmul(v, w);
            let b = g.matmul_t(a, v);
            let c = g.tanh(b);
            let d = g.softmax_rows(c);
            let e = g.shift(d, 1);
            let f = g.shift(e, -2);
            let h = g.add(f, d);
            let row = g.gather(v, vec![2]);
            let k = g.add_row(h, row);
            let k = g.scale(k, 0.7);
            sum_all(g, k)
        });
    }

    #[test]
    fn normalized_rows() {
        let w = array![[0.2, -0.3, 0.5], [1.0, 0.4, -0.1], [0.3, 0.3, 0.8]];
        check(x3(), |g, v| {
            let n = g.normalize_rows(v, 1.7);
            let w = g.input(w.clone());
            let a = g.matmul(n, w);
            let a = g.tanh(a);
            sum_all(g, a)
        });
        let mut g = Graph::new();
        let v = g.input(x3());
        let n = g.normalize_rows(v, 2.0);
        for row in g.value(n).rows() {
            assert!((row.dot(&row).sqrt() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_sum_and_span_loss() {
        let target = array![[true, false, false], [false, false, true], [false, false, false]];
        check(x3(), |g, v| {
            let col = g.gather(v, vec![0, 1, 2]);
            let qk = g.matmul_t(col, v);
            let ones = g.input(Array2::ones((3, 1)));
            let c = g.matmul(v, ones);
            let p = g.pair_sum(c);
            let f = g.add(qk, p);
            g.span_loss(f, target.clone())
        });
    }

    #[test]
    fn distance_softmax_hinge() {
        check(x3(), |g, v| {
            let u = g.row_pair(v, 0, 2);
            let c1 = g.gather(v, vec![1]);
            let c2 = g.gather(v, vec![2]);
            let d1 = g.distance(u, c1);
            let d2 = g.distance(u, c2);
            let n1 = g.scale(d1, -1.0);
            let n2 = g.scale(d2, -1.0);
            let logits = g.concat(vec![n1, n2]);
            let p = g.neg_log_softmax(logits, 1);
            let h1 = g.hinge(d1, 3.0);
            let h2 = g.hinge(d2, 0.1);
            g.sum(vec![p, h1, h2])
        });
    }

    #[test]
    fn distance_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0]]);
        let b = g.input(array![[1.0, 2.0]]);
        let d = g.distance(a, b);
        assert_eq!(g.scalar(d), 0.0);
        let back = g.backward(d);
        assert!(back.grad(a).is_none() || back.grad(a).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn span_loss_is_stable_for_large_scores() {
        let f = array![[800.0, -800.0], [0.0, -900.0]];
        let t = array![[false, false], [false, false]];
        let v = span_loss_value(&f, &t);
        assert!((v - 800.0).abs() < 1e-9);
    }

    #[test]
    fn params_are_borrowed_and_reported() {
        let mut reg = ParameterRegistry::new();
        let w = reg.register("w", array![[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let mut g = Graph::with_params(&reg);
        let x = g.input(array![[1.0, 1.0]]);
        let wv = g.param(w);
        assert_eq!(g.param(w), wv);
        let y = g.matmul(x, wv);
        let ones = g.input(Array2::ones((2, 1)));
        let s = g.matmul(y, ones);
        let grads = g.param_gradients(s);
        assert_eq!(grads.get(w).unwrap(), &array![[1.0, 1.0], [1.0, 1.0]]);
    }
}
