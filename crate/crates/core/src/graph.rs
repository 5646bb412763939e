//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled in from a borrowed [`ParameterTree`] and share storage with it, so
//! building a graph never copies weights. Calling [`Graph::backward`] on a
//! scalar node yields gradients for every node that influenced it.
//!
//! Edges with an exactly-zero weight in [`Graph::weighted_sum`] do not carry
//! gradient, so parameters reachable only through them receive no gradient
//! at all (rather than a zero one).

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{Mat, ParameterTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major boolean mask: `true` marks an allowed (key) position.
pub type Mask = Arc<Array2<bool>>;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleConst(Var, f64),
    ScaleVar(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Mask>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    SumAll(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    PickPerRow(Var, Vec<usize>),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

pub struct Graph<'p> {
    params: Option<&'p ParameterTree>,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    attention: Option<Vec<Var>>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            attention: None,
        }
    }

    pub fn with_params(params: &'p ParameterTree) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            attention: None,
        }
    }

    pub fn params(&self) -> &'p ParameterTree {
        self.params.expect("graph built without a parameter tree")
    }

    /// Starts collecting every attention-weight node built from now on.
    pub fn record_attention(&mut self) {
        self.attention = Some(Vec::new());
    }

    pub fn note_attention(&mut self, weights: Var) {
        if let Some(log) = &mut self.attention {
            log.push(weights);
        }
    }

    pub fn attention_weights(&self) -> &[Var] {
        self.attention.as_deref().unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.push(Array2::from_elem((1, 1), x), Op::Leaf)
    }

    /// Leaf for a named parameter; repeated requests return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        let tree = self.params();
        let index = tree
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.param_vars.get(&index) {
            return v;
        }
        let value = Arc::clone(tree.shared(index));
        let v = self.push_shared(value, Op::Param);
        self.param_vars.insert(index, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.ncols(),
            "matmul_t {:?} x {:?}ᵀ",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(&vb.t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise mul");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(row).1, self.shape(a).1, "add_row width");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(row).1, self.shape(a).1, "mul_row width");
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    /// Multiplies every column of `a` elementwise by an `m × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1);
        assert_eq!(self.shape(col).0, self.shape(a).0, "mul_col height");
        let out = self.value(a) * self.value(col);
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::ScaleConst(a, c))
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let out = self.value(a) * c;
        self.push(out, Op::ScaleVar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise softmax. Masked-out entries get exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<Mask>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "softmax mask shape");
        }
        let mut out = Array2::zeros(x.dim());
        for (r, (xr, mut yr)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
            let max = (0..xr.len())
                .filter(|&c| allowed(c))
                .map(|c| xr[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for c in 0..xr.len() {
                if allowed(c) {
                    let e = (xr[c] - max).exp();
                    yr[c] = e;
                    total += e;
                }
            }
            yr.mapv_inplace(|e| e / total);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax. Masked-out entries are reported as 0 and carry no gradient.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Mask>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "log_softmax mask shape");
        }
        let mut out = Array2::zeros(x.dim());
        for (r, (xr, mut yr)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
            let max = (0..xr.len())
                .filter(|&c| allowed(c))
                .map(|c| xr[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let total: f64 = (0..xr.len())
                .filter(|&c| allowed(c))
                .map(|c| (xr[c] - max).exp())
                .sum();
            let lse = max + total.ln();
            for c in 0..xr.len() {
                if allowed(c) {
                    yr[c] = xr[c] - lse;
                }
            }
        }
        self.push(out, Op::LogSoftmax(a, mask))
    }

    /// Per-row layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scales each row to unit Euclidean norm: `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .outer_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = xv.clone();
        for (mut row, &n) in out.outer_iter_mut().zip(&norms) {
            row.mapv_inplace(|v| v / (n + eps));
        }
        self.push(out, Op::L2Normalize { x, norms, eps })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(out, Op::SelectRows(a, rows))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.select_rows(a, (start..end).collect())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start, end))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Picks `a[i, cols[i]]` for every row, giving an `m × 1` column.
    pub fn pick_per_row(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(cols.len(), x.nrows(), "pick_per_row length");
        let out = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| x[[i, cols[i]]]);
        self.push(out, Op::PickPerRow(a, cols))
    }

    pub fn diagonal(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        self.pick_per_row(a, (0..n).collect())
    }

    /// `Σ wᵢ·termᵢ` over same-shaped terms. Zero-weight terms receive no gradient.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Array2::zeros(self.shape(terms[0].0));
        for &(v, w) in terms {
            if w != 0.0 {
                out.scaled_add(w, self.value(v));
            }
        }
        self.push(out, Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Parameter gradients keyed by tree index. Parameters outside the
    /// gradient path are absent.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Mat)> {
        let mut out: Vec<(usize, Mat)> = self
            .param_vars
            .iter()
            .filter_map(|(&idx, &v)| grads.get(v).map(|g| (idx, g.clone())))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &Mat { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.dot(val(*b)));
                accumulate(grads, *b, g.t().dot(val(*a)));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * val(*b));
                accumulate(grads, *b, g * val(*a));
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                accumulate(grads, *a, g * val(*r));
                let gr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *r, gr);
            }
            Op::MulCol(a, c) => {
                accumulate(grads, *a, g * val(*c));
                let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(grads, *c, gc);
            }
            Op::ScaleConst(a, c) => accumulate(grads, *a, g * *c),
            Op::ScaleVar(a, s) => {
                let c = val(*s)[[0, 0]];
                accumulate(grads, *a, g * c);
                let gs = (g * val(*a)).sum();
                accumulate(grads, *s, Array2::from_elem((1, 1), gs));
            }
            Op::Exp(a) => accumulate(grads, *a, g * &*node.value),
            Op::Log(a) => accumulate(grads, *a, g / val(*a)),
            Op::Tanh(a) => {
                let d = node.value.mapv(|y| 1.0 - y * y);
                accumulate(grads, *a, g * &d);
            }
            Op::Sigmoid(a) => {
                let d = node.value.mapv(|y| y * (1.0 - y));
                accumulate(grads, *a, g * &d);
            }
            Op::Gelu(a) => {
                let d = val(*a).mapv(|x| {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
                });
                accumulate(grads, *a, g * &d);
            }
            Op::Softmax(a) => {
                let y = &*node.value;
                let mut dx = Array2::zeros(y.dim());
                Zip::from(dx.rows_mut())
                    .and(y.rows())
                    .and(g.rows())
                    .for_each(|mut dr, yr, gr| {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..yr.len() {
                            dr[c] = yr[c] * (gr[c] - dot);
                        }
                    });
                accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a, mask) => {
                let y = &*node.value;
                let mut dx = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[[r, c]]);
                    let gsum: f64 = (0..y.ncols())
                        .filter(|&c| allowed(c))
                        .map(|c| g[[r, c]])
                        .sum();
                    for c in 0..y.ncols() {
                        if allowed(c) {
                            dx[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                accumulate(
                    grads,
                    *gamma,
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * gam;
                let n = xhat.ncols() as f64;
                let mut dx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dr = dxhat.row(r);
                    let xr = xhat.row(r);
                    let mean_d = dr.sum() / n;
                    let mean_dx: f64 =
                        dr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = inv_std[r] * (dr[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms, eps } => {
                let xv = val(*x);
                let mut dx = Array2::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let n = norms[r];
                    let s = n + eps;
                    let dot: f64 = xv
                        .row(r)
                        .iter()
                        .zip(g.row(r).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    for c in 0..xv.ncols() {
                        let radial = if n > 0.0 {
                            dot / (s * s) * xv[[r, c]] / n
                        } else {
                            0.0
                        };
                        dx[[r, c]] = g[[r, c]] / s - radial;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(a) => {
                let shape = val(*a).dim();
                accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SelectRows(a, rows) => {
                let mut dx = Array2::zeros(val(*a).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = dx.row_mut(r);
                    dst += &g.row(k);
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    accumulate(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut dx = Array2::zeros(val(*a).dim());
                dx.slice_mut(s![.., *start..*end]).assign(g);
                accumulate(grads, *a, dx);
            }
            Op::PickPerRow(a, cols) => {
                let mut dx = Array2::zeros(val(*a).dim());
                for (i, &c) in cols.iter().enumerate() {
                    dx[[i, c]] = g[[i, 0]];
                }
                accumulate(grads, *a, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if w != 0.0 {
                        accumulate(grads, v, g * w);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
