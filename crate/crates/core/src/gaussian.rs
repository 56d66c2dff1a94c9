//! Diagonal Gaussian embeddings: Wasserstein-2, KL divergence and
//! reparameterized sampling, as plain functions and as tape operations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Lower bound applied to every variance before a distance is evaluated.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `N(mean, diag(variance))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Dimension { expected: mean.len(), got: variance.len() });
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Data(format!("variance entries must be positive and finite, got {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("mean entries must be finite".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_pair(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension { expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `|m1 - m2|^2 + sum_j (sqrt(v1_j) - sqrt(v2_j))^2`.
pub fn w2_squared(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_pair(a, b)?;
    let mut total = 0.0;
    for j in 0..a.dim() {
        let dm = a.mean[j] - b.mean[j];
        let ds = a.variance[j].max(VARIANCE_FLOOR).sqrt() - b.variance[j].max(VARIANCE_FLOOR).sqrt();
        total += dm * dm + ds * ds;
    }
    Ok(total)
}

/// `KL(a || b)` for diagonal Gaussians.
pub fn kl_divergence(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_pair(a, b)?;
    let mut total = 0.0;
    for j in 0..a.dim() {
        let va = a.variance[j].max(VARIANCE_FLOOR);
        let vb = b.variance[j].max(VARIANCE_FLOOR);
        let dm = b.mean[j] - a.mean[j];
        total += va / vb + dm * dm / vb - 1.0 + (vb / va).ln();
    }
    Ok(0.5 * total)
}

/// `mean + sqrt(variance) * eps`.
pub fn reparameterized_sample(g: &GaussianEmbedding, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(Error::Dimension { expected: g.dim(), got: eps.len() });
    }
    Ok(g.mean.iter().zip(&g.variance).zip(eps).map(|((m, v), e)| m + v.sqrt() * e).collect())
}

/// A Gaussian whose mean and variance live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub variance: Var,
}

impl GaussianVars {
    pub fn read(&self, tape: &Tape) -> GaussianEmbedding {
        GaussianEmbedding { mean: tape.value(self.mean).to_vec(), variance: tape.value(self.variance).to_vec() }
    }
}

pub fn w2_squared_var(tape: &mut Tape, a: GaussianVars, b: GaussianVars) -> Var {
    let dm = tape.sub(a.mean, b.mean);
    let mean_term = tape.sq_norm(dm);
    let va = tape.floor(a.variance, VARIANCE_FLOOR);
    let vb = tape.floor(b.variance, VARIANCE_FLOOR);
    let sa = tape.sqrt(va);
    let sb = tape.sqrt(vb);
    let ds = tape.sub(sa, sb);
    let var_term = tape.sq_norm(ds);
    let both = tape.concat(&[mean_term, var_term]);
    tape.sum(both)
}

pub fn kl_divergence_var(tape: &mut Tape, a: GaussianVars, b: GaussianVars) -> Var {
    let va = tape.floor(a.variance, VARIANCE_FLOOR);
    let vb = tape.floor(b.variance, VARIANCE_FLOOR);
    let ratio = tape.div(va, vb);
    let dm = tape.sub(b.mean, a.mean);
    let dm2 = tape.square(dm);
    let maha = tape.div(dm2, vb);
    let lb = tape.ln(vb);
    let la = tape.ln(va);
    let logs = tape.sub(lb, la);
    let s1 = tape.add(ratio, maha);
    let s2 = tape.add(s1, logs);
    let s3 = tape.offset(s2, -1.0);
    let total = tape.sum(s3);
    tape.scale(total, 0.5)
}

pub fn reparameterized_sample_var(tape: &mut Tape, g: GaussianVars, eps: &[f64]) -> Var {
    assert_eq!(eps.len(), tape.dim(g.mean), "noise dimension");
    let sd = tape.sqrt(g.variance);
    let e = tape.input(eps);
    let scaled = tape.mul(sd, e);
    tape.add(g.mean, scaled)
}
