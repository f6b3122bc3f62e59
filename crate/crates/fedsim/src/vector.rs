//! Flat parameter vectors and the fixed summation-order policy.
//!
//! All reductions over clients (weighted averages, dot products, weighted
//! losses) accumulate in client-index order with Neumaier compensated
//! summation, so results never depend on how many workers executed the
//! round.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Compensated (Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator, in iteration order.
pub fn ksum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for x in it {
        acc.add(x);
    }
    acc.value()
}

/// Flat real-valued model parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        ksum(self.0.iter().zip(&other.0).map(|(a, b)| a * b))
    }

    pub fn norm_sq(&self) -> f64 {
        ksum(self.0.iter().map(|a| a * a))
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        ksum(self.0.iter().zip(&other.0).map(|(a, b)| {
            let d = a - b;
            d * d
        }))
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(FedError::Config(format!(
                "non-finite parameter vector after {context}"
            )))
        }
    }
}

/// Coordinate-wise Σ alpha_j w_j, accumulated in list order with
/// compensated summation.
///
/// Callers that need order independence (the aggregation step) must pass
/// the vectors already sorted by client id.
pub fn weighted_average(params: &[&ParamVector], alphas: &[f64]) -> Result<ParamVector> {
    if params.is_empty() || params.len() != alphas.len() {
        return Err(FedError::Aggregation(format!(
            "weighted_average: {} vectors vs {} coefficients",
            params.len(),
            alphas.len()
        )));
    }
    let total = ksum(alphas.iter().copied());
    if (total - 1.0).abs() > 1e-9 {
        return Err(FedError::Aggregation(format!(
            "coefficients sum to {total}, expected 1 within 1e-9"
        )));
    }
    if let Some(a) = alphas.iter().find(|a| **a < 0.0) {
        return Err(FedError::Aggregation(format!("negative coefficient {a}")));
    }
    let dim = params[0].dim();
    if params.iter().any(|p| p.dim() != dim) {
        return Err(FedError::Aggregation("dimension mismatch".into()));
    }
    let mut out = Vec::with_capacity(dim);
    for c in 0..dim {
        let mut acc = KahanSum::new();
        for (w, &a) in params.iter().zip(alphas) {
            acc.add(a * w.0[c]);
        }
        out.push(acc.value());
    }
    let v = ParamVector(out);
    v.check_finite("weighted_average")?;
    Ok(v)
}
