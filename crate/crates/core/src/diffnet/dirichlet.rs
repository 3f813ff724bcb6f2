//! Dirichlet distribution: sampling through normalized Gamma draws, log-density
//! and entropy. Gradients with respect to the concentrations live on the tape.

use alloc::format;
use alloc::vec::Vec;
use rand::Rng;

use super::special::digamma;
use super::tape::ln_beta;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Lower bound applied to simplex coordinates before taking logs.
pub const SIMPLEX_EPS: f64 = 1e-6;

/// Default floor for network-produced concentrations.
pub const CONC_EPS: f64 = 1e-3;

/// Clamp a simplex point away from the boundary and renormalize.
pub fn interior(x: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = x.iter().map(|&v| v.max(SIMPLEX_EPS)).collect();
    let s: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / s).collect()
}

fn check_conc(conc: &[f64]) -> Result<()> {
    if conc.is_empty() {
        return Err(Error::Distribution("empty concentration vector".into()));
    }
    if let Some(a) = conc.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Error::Distribution(format!("concentration must be positive and finite, got {a}")));
    }
    Ok(())
}

/// Log-density at `x` (clamped into the interior first).
pub fn logpdf(conc: &[f64], x: &[f64]) -> Result<f64> {
    check_conc(conc)?;
    if conc.len() != x.len() {
        return Err(Error::Shape(format!("{} concentrations vs {} coordinates", conc.len(), x.len())));
    }
    let x = interior(x);
    let body: f64 = conc.iter().zip(&x).map(|(&a, &xi)| (a - 1.0) * libm::log(xi)).sum();
    Ok(body - ln_beta(conc))
}

/// Gradient of [`logpdf`] with respect to the concentrations.
pub fn logpdf_grad(conc: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_conc(conc)?;
    let x = interior(x);
    let psi0 = digamma(conc.iter().sum());
    Ok(conc.iter().zip(&x).map(|(&a, &xi)| psi0 - digamma(a) + libm::log(xi)).collect())
}

pub(crate) fn logpdf_rows(conc: &Tensor2, points: &Tensor2) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..conc.rows {
        total += logpdf(conc.row(r), points.row(r))?;
    }
    Ok(total)
}

/// Differential entropy.
pub fn entropy(conc: &[f64]) -> Result<f64> {
    check_conc(conc)?;
    let k = conc.len() as f64;
    let a0: f64 = conc.iter().sum();
    Ok(ln_beta(conc) + (a0 - k) * digamma(a0) - conc.iter().map(|&a| (a - 1.0) * digamma(a)).sum::<f64>())
}

pub fn mean(conc: &[f64]) -> Result<Vec<f64>> {
    check_conc(conc)?;
    let s: f64 = conc.iter().sum();
    Ok(conc.iter().map(|a| a / s).collect())
}

/// Standard normal draw (Box-Muller, one variate per call).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Gamma(shape, 1) draw by Marsaglia-Tsang, boosted for shape < 1.
pub fn gamma(shape: f64, rng: &mut impl Rng) -> f64 {
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.gen::<f64>();
        return gamma(shape + 1.0, rng) * libm::pow(u, 1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / libm::sqrt(9.0 * d);
    loop {
        let z = standard_normal(rng);
        let v = 1.0 + c * z;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = 1.0 - rng.gen::<f64>();
        if libm::log(u) < 0.5 * z * z + d - d * v + d * libm::log(v) {
            return d * v;
        }
    }
}

/// One simplex point drawn from Dir(conc).
pub fn sample(conc: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_conc(conc)?;
    let draws: Vec<f64> = conc.iter().map(|&a| gamma(a, rng)).collect();
    let s: f64 = draws.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        // All draws underflowed (tiny concentrations); fall back to the heaviest coordinate.
        let best = conc
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        return Ok((0..conc.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect());
    }
    Ok(draws.into_iter().map(|g| g / s).collect())
}
