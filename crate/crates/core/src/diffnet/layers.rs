//! Dense and graph layers built on the tape.

use alloc::format;
use rand::Rng;

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Negative slope of the attention logits' leaky ReLU.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add_xavier(&format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = store.add(&format!("{name}.b"), Tensor2::zeros(1, fan_out))?;
        Ok(Dense { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row_bias(xw, b)
    }
}

/// Single-head attention over the complete graph.
///
/// For nodes `i, j`: `e_ij = leaky_relu(a_srcᵀ W h_i + a_dstᵀ W h_j + b · m_ij)`,
/// `att_ij = softmax_j(e_ij)`, output row `i = Σ_j att_ij W h_j`. `m` is the
/// normalized travel-time matrix, so edges carry travel time into the logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatLayer {
    pub w: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
    pub edge: ParamId,
}

impl GatLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GatLayer {
            w: store.add_xavier(&format!("{name}.w"), fan_in, width, rng)?,
            att_src: store.add_xavier(&format!("{name}.att_src"), width, 1, rng)?,
            att_dst: store.add_xavier(&format!("{name}.att_dst"), width, 1, rng)?,
            edge: store.add(&format!("{name}.edge"), Tensor2::scalar(0.0))?,
        })
    }

    /// Returns `(embeddings, attention)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, travel: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).rows;
        if tape.value(travel).shape() != (n, n) {
            return Err(Error::Shape(format!("attention needs a {n}x{n} travel matrix")));
        }
        let w = tape.param(store, self.w);
        let a_src = tape.param(store, self.att_src);
        let a_dst = tape.param(store, self.att_dst);
        let b = tape.param(store, self.edge);
        let wh = tape.matmul(x, w)?;
        let s_src = tape.matmul(wh, a_src)?;
        let s_dst = tape.matmul(wh, a_dst)?;
        let src = tape.broadcast_col(s_src, n)?;
        let dst = tape.broadcast_row_t(s_dst, n)?;
        let edge = tape.scale_by(b, travel)?;
        let logits = tape.add(src, dst)?;
        let logits = tape.add(logits, edge)?;
        let logits = tape.leaky_relu(logits, ATTENTION_SLOPE);
        let att = tape.row_softmax(logits);
        let out = tape.matmul(att, wh)?;
        Ok((out, att))
    }
}

/// Graph convolution with a skip connection: `h' = relu(P h W) + h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnLayer {
    pub w: ParamId,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(GcnLayer { w: store.add_xavier(&format!("{name}.w"), width, width, rng)? })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, propagation: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let (rows, cols) = tape.value(w).shape();
        if rows != cols || tape.value(h).cols != rows {
            return Err(Error::Shape(format!(
                "skip connection needs equal widths: input {} vs weight {rows}x{cols}",
                tape.value(h).cols
            )));
        }
        let ph = tape.matmul(propagation, h)?;
        let phw = tape.matmul(ph, w)?;
        let act = tape.relu(phw);
        tape.add(act, h)
    }
}

/// Symmetric-normalized propagation `D^{-1/2} (A_w + I) D^{-1/2}` with
/// `A_w[i][j] = exp(-m_ij / tau)` over normalized travel times `m`.
pub fn gcn_propagation(travel_norm: &Tensor2, tau: f64) -> Result<Tensor2> {
    let n = travel_norm.rows;
    if travel_norm.cols != n {
        return Err(Error::Shape("propagation needs a square matrix".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("propagation temperature must be positive, got {tau}")));
    }
    let mut a = travel_norm.map(|m| libm::exp(-m / tau));
    for i in 0..n {
        a.set(i, i, a.get(i, i) + 1.0);
    }
    let d: alloc::vec::Vec<f64> = (0..n).map(|i| 1.0 / libm::sqrt(a.row(i).iter().sum::<f64>())).collect();
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, a.get(i, j) * d[i] * d[j]);
        }
    }
    Ok(a)
}

/// Per-node pooling: `[Σ_{j≠i} h_j ‖ h_i]`.
pub fn neighbor_sum_pool(tape: &mut Tape, h: Var) -> Result<Var> {
    let n = tape.value(h).rows;
    let mut mask = Tensor2::filled(n, n, 1.0);
    for i in 0..n {
        mask.set(i, i, 0.0);
    }
    let mask = tape.constant(mask);
    let neigh = tape.matmul(mask, h)?;
    tape.concat_cols(neigh, h)
}

/// Global pooling: `Σ_i h_i` as a `1 × width` row.
pub fn global_sum_pool(tape: &mut Tape, h: Var) -> Result<Var> {
    let n = tape.value(h).rows;
    let ones = tape.constant(Tensor2::filled(1, n, 1.0));
    tape.matmul(ones, h)
}
