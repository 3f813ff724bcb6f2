//! Reverse-mode recording. A [`Tape`] lives for one forward/backward pass;
//! parameters are read from a [`ParamStore`] and their gradients written back
//! into its accumulators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::special::{digamma, ln_gamma, sigmoid, softplus, trigamma};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameters with same-shape gradient accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor2>,
    pub grads: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor2) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.into());
        self.grads.push(Tensor2::zeros(value.rows, value.cols));
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Xavier-uniform weight of shape `fan_in × fan_out`.
    pub fn add_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<ParamId> {
        let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor2::from_vec(fan_in, fan_out, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().flat_map(|g| &g.data).map(|v| v * v).sum())
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= c);
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    AddScalar(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ConcatCols(Var, Var),
    BroadcastCol(Var),
    BroadcastRowT(Var),
    RowSoftmax(Var),
    SumAll(Var),
    DirichletLogPdf(Var, Tensor2),
    DirichletEntropy(Var),
}

struct Node {
    value: Tensor2,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.values[id.0].clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + b` with `b` a `1 × cols` row broadcast over every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if bs != (1, xs.1) {
            return Err(shape_err("row bias", xs, bs));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data.clone();
        for r in 0..xs.0 {
            for (c, bv) in bias.iter().enumerate() {
                out.data[r * xs.1 + c] += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// `s · x` with `s` a learnable `1 × 1` scalar.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(shape_err("scale_by scalar", self.value(s).shape(), (1, 1)));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(out, Op::ScaleBy(s, x)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(shape_err("concat", ta.shape(), tb.shape()));
        }
        let mut out = Tensor2::zeros(ta.rows, ta.cols + tb.cols);
        for r in 0..ta.rows {
            out.data[r * out.cols..r * out.cols + ta.cols].copy_from_slice(ta.row(r));
            out.data[r * out.cols + ta.cols..(r + 1) * out.cols].copy_from_slice(tb.row(r));
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// `n × 1` column repeated into `n × width`: `out[i][j] = x[i]`.
    pub fn broadcast_col(&mut self, x: Var, width: usize) -> Result<Var> {
        let t = self.value(x);
        if t.cols != 1 {
            return Err(shape_err("broadcast_col", t.shape(), (t.rows, 1)));
        }
        let mut out = Tensor2::zeros(t.rows, width);
        for i in 0..t.rows {
            for j in 0..width {
                out.set(i, j, t.data[i]);
            }
        }
        Ok(self.push(out, Op::BroadcastCol(x)))
    }

    /// `n × 1` column laid along rows into `height × n`: `out[i][j] = x[j]`.
    pub fn broadcast_row_t(&mut self, x: Var, height: usize) -> Result<Var> {
        let t = self.value(x);
        if t.cols != 1 {
            return Err(shape_err("broadcast_row_t", t.shape(), (t.rows, 1)));
        }
        let mut out = Tensor2::zeros(height, t.rows);
        for i in 0..height {
            out.data[i * t.rows..(i + 1) * t.rows].copy_from_slice(&t.data);
        }
        Ok(self.push(out, Op::BroadcastRowT(x)))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::RowSoftmax(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2::scalar(s), Op::SumAll(x))
    }

    /// Sum over rows of the Dirichlet log-density of row `i` of `points`
    /// under concentrations in row `i` of `conc`. Differentiable in `conc`.
    pub fn dirichlet_logpdf(&mut self, conc: Var, points: &Tensor2) -> Result<Var> {
        let c = self.value(conc);
        if c.shape() != points.shape() {
            return Err(shape_err("dirichlet_logpdf", c.shape(), points.shape()));
        }
        let total = super::dirichlet::logpdf_rows(c, points)?;
        Ok(self.push(Tensor2::scalar(total), Op::DirichletLogPdf(conc, points.clone())))
    }

    /// Sum over rows of the Dirichlet differential entropy.
    pub fn dirichlet_entropy(&mut self, conc: Var) -> Result<Var> {
        let c = self.value(conc);
        let mut total = 0.0;
        for r in 0..c.rows {
            total += super::dirichlet::entropy(c.row(r))?;
        }
        Ok(self.push(Tensor2::scalar(total), Op::DirichletEntropy(conc)))
    }

    /// Backpropagate from scalar `out`, adding parameter gradients into `store`.
    pub fn backward(&self, out: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(out)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.grads[id.0].add_assign(&g);
            }
        }
        Ok(())
    }

    /// Gradient of scalar `out` with respect to every node on the tape.
    pub fn gradients(&self, out: Var) -> Result<Vec<Option<Tensor2>>> {
        if self.value(out).shape() != (1, 1) {
            return Err(shape_err("backward needs a scalar", self.value(out).shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor2::scalar(1.0));
        fn acc(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        for idx in (0..=out.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRowBias(x, b) => {
                    let mut gb = Tensor2::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.get(r, c);
                        }
                    }
                    acc(&mut grads, *x, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv });
                    acc(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv));
                    acc(&mut grads, *x, gx);
                }
                Op::AddScalar(x) => acc(&mut grads, *x, g.clone()),
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, g.map(|v| v * c));
                }
                Op::ScaleBy(s, x) => {
                    let k = self.value(*s).item();
                    let gs = g.zip_map(self.value(*x), |gv, xv| gv * xv).sum();
                    acc(&mut grads, *s, Tensor2::scalar(gs));
                    acc(&mut grads, *x, g.map(|v| v * k));
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.value(*a).cols;
                    let wb = self.value(*b).cols;
                    let mut ga = Tensor2::zeros(g.rows, wa);
                    let mut gb = Tensor2::zeros(g.rows, wb);
                    for r in 0..g.rows {
                        ga.data[r * wa..(r + 1) * wa].copy_from_slice(&g.row(r)[..wa]);
                        gb.data[r * wb..(r + 1) * wb].copy_from_slice(&g.row(r)[wa..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::BroadcastCol(x) => {
                    let gx = (0..g.rows).map(|i| g.row(i).iter().sum()).collect();
                    acc(&mut grads, *x, Tensor2::from_vec(g.rows, 1, gx)?);
                }
                Op::BroadcastRowT(x) => {
                    let mut gx = Tensor2::zeros(g.cols, 1);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            gx.data[j] += g.get(i, j);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RowSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor2::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let t = self.value(*x);
                    acc(&mut grads, *x, Tensor2::filled(t.rows, t.cols, g.item()));
                }
                Op::DirichletLogPdf(conc, points) => {
                    let c = self.value(*conc);
                    let gv = g.item();
                    let mut gc = Tensor2::zeros(c.rows, c.cols);
                    for r in 0..c.rows {
                        let x = super::dirichlet::interior(points.row(r));
                        let psi0 = digamma(c.row(r).iter().sum());
                        for k in 0..c.cols {
                            gc.set(r, k, gv * (psi0 - digamma(c.get(r, k)) + libm::log(x[k])));
                        }
                    }
                    acc(&mut grads, *conc, gc);
                }
                Op::DirichletEntropy(conc) => {
                    let c = self.value(*conc);
                    let gv = g.item();
                    let mut gc = Tensor2::zeros(c.rows, c.cols);
                    let k_dim = c.cols as f64;
                    for r in 0..c.rows {
                        let a0: f64 = c.row(r).iter().sum();
                        let t0 = (a0 - k_dim) * trigamma(a0);
                        for k in 0..c.cols {
                            let a = c.get(r, k);
                            gc.set(r, k, gv * (t0 - (a - 1.0) * trigamma(a)));
                        }
                    }
                    acc(&mut grads, *conc, gc);
                }
            }
        }
        Ok(grads)
    }
}

/// `ln Γ`-based log multivariate beta of a concentration row.
pub(crate) fn ln_beta(conc: &[f64]) -> f64 {
    conc.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(conc.iter().sum())
}
