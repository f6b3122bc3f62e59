//! The four aggregation strategies producing coefficient vectors α_t, and
//! the aggregation step itself.
//!
//! All strategies rank clients by the loss gap F_i − F_i\*. Reports are
//! kept in client-id order so that the weighted average accumulates in a
//! fixed order regardless of how the round was scheduled.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::vector::{ksum, weighted_average, ParamVector};

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub id: usize,
    pub p: f64,
    pub w_local: ParamVector,
    /// F_i evaluated per the configured evaluation-point policy.
    pub loss_final: f64,
    /// F_i\*, or the documented fallback 0 when unknown.
    pub f_star: f64,
}

impl ClientReport {
    pub fn gap(&self) -> f64 {
        self.loss_final - self.f_star
    }
}

/// Probability vector of aggregation coefficients, one per client.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector(pub Vec<f64>);

impl AlphaVector {
    fn checked(alphas: Vec<f64>) -> Result<Self> {
        let total = ksum(alphas.iter().copied());
        if (total - 1.0).abs() > 1e-9 || alphas.iter().any(|a| *a < 0.0) {
            return Err(FedError::Aggregation(format!(
                "invalid coefficient vector (sum {total})"
            )));
        }
        Ok(AlphaVector(alphas))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Fedmax,
    FedmaxK { k: usize },
    Fedsoftmax { temperature: f64 },
}

impl Strategy {
    pub fn alphas(&self, reports: &[ClientReport]) -> Result<AlphaVector> {
        match *self {
            Strategy::Fedavg => alphas_fedavg(reports),
            Strategy::Fedmax => alphas_fedmax(reports),
            Strategy::FedmaxK { k } => alphas_fedmax_k(reports, k),
            Strategy::Fedsoftmax { temperature } => alphas_fedsoftmax(reports, temperature),
        }
    }

    /// Whether every coefficient is strictly positive by construction.
    pub fn strictly_positive(&self) -> bool {
        matches!(self, Strategy::Fedavg | Strategy::Fedsoftmax { .. })
    }
}

/// Generalized FedAvg: α_i = p_i.
pub fn alphas_fedavg(reports: &[ClientReport]) -> Result<AlphaVector> {
    AlphaVector::checked(reports.iter().map(|r| r.p).collect())
}

/// All mass uniformly on the argmax set of the loss gap; exact ties keep
/// every tied client.
pub fn alphas_fedmax(reports: &[ClientReport]) -> Result<AlphaVector> {
    if reports.is_empty() {
        return Err(FedError::Aggregation("no reports".into()));
    }
    let max_gap = reports.iter().map(|r| r.gap()).fold(f64::NEG_INFINITY, f64::max);
    let in_argmax: Vec<bool> = reports.iter().map(|r| r.gap() == max_gap).collect();
    let count = in_argmax.iter().filter(|x| **x).count();
    let share = 1.0 / count as f64;
    AlphaVector::checked(
        in_argmax
            .iter()
            .map(|&m| if m { share } else { 0.0 })
            .collect(),
    )
}

/// Uniform 1/k over the k largest gaps; ties at the boundary go to the
/// smaller client id.
pub fn alphas_fedmax_k(reports: &[ClientReport], k: usize) -> Result<AlphaVector> {
    if k == 0 || k > reports.len() {
        return Err(FedError::Usage(format!(
            "k = {k} out of range for {} clients",
            reports.len()
        )));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .gap()
            .partial_cmp(&reports[a].gap())
            .unwrap()
            .then(reports[a].id.cmp(&reports[b].id))
    });
    let mut alphas = vec![0.0; reports.len()];
    for &i in order.iter().take(k) {
        alphas[i] = 1.0 / k as f64;
    }
    AlphaVector::checked(alphas)
}

/// α_i ∝ p_i · exp(gap_i / temperature), renormalized. The maximum gap is
/// subtracted inside the exponent; renormalization makes this exact.
pub fn alphas_fedsoftmax(reports: &[ClientReport], temperature: f64) -> Result<AlphaVector> {
    if temperature <= 0.0 {
        return Err(FedError::Usage("temperature must be positive".into()));
    }
    let max_gap = reports.iter().map(|r| r.gap()).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = reports
        .iter()
        .map(|r| r.p * ((r.gap() - max_gap) / temperature).exp())
        .collect();
    let total = ksum(raw.iter().copied());
    AlphaVector::checked(raw.into_iter().map(|x| x / total).collect())
}

/// Eq.-style aggregation: the α-weighted average of the local models.
/// Reports must be sorted by client id.
pub fn aggregate(reports: &[ClientReport], alphas: &AlphaVector) -> Result<ParamVector> {
    debug_assert!(reports.windows(2).all(|w| w[0].id < w[1].id));
    let params: Vec<&ParamVector> = reports.iter().map(|r| &r.w_local).collect();
    weighted_average(&params, &alphas.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: usize, p: f64, loss: f64, f_star: f64) -> ClientReport {
        ClientReport {
            id,
            p,
            w_local: ParamVector(vec![id as f64]),
            loss_final: loss,
            f_star,
        }
    }

    #[test]
    fn fedavg_is_p() {
        let rs: Vec<_> = (0..4).map(|i| report(i, 0.25, i as f64, 0.0)).collect();
        assert_eq!(alphas_fedavg(&rs).unwrap().0, vec![0.25; 4]);
        let rs = vec![report(0, 0.7, 9.0, 0.0), report(1, 0.3, 1.0, 0.0)];
        assert_eq!(alphas_fedavg(&rs).unwrap().0, vec![0.7, 0.3]);
    }

    #[test]
    fn fedavg_ignores_losses() {
        let a = alphas_fedavg(&[report(0, 0.6, 1.0, 0.0), report(1, 0.4, 5.0, 0.0)]).unwrap();
        let b = alphas_fedavg(&[report(0, 0.6, 5.0, 0.0), report(1, 0.4, 1.0, 0.0)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fedmax_two_quadratic_clients() {
        // w = 0.5 against centers 0 and 2: gaps 0.125 and 1.125
        let rs = vec![report(0, 0.5, 0.125, 0.0), report(1, 0.5, 1.125, 0.0)];
        assert_eq!(alphas_fedmax(&rs).unwrap().0, vec![0.0, 1.0]);
    }

    #[test]
    fn fedmax_exact_tie_uniform() {
        let rs: Vec<_> = (0..5).map(|i| report(i, 0.2, 3.0, 1.0)).collect();
        assert_eq!(alphas_fedmax(&rs).unwrap().0, vec![0.2; 5]);
    }

    #[test]
    fn fedmax_single_client() {
        assert_eq!(alphas_fedmax(&[report(0, 1.0, 2.0, 0.0)]).unwrap().0, vec![1.0]);
    }

    #[test]
    fn fedmax_k_edges() {
        let rs = vec![
            report(0, 0.3, 5.0, 0.0),
            report(1, 0.3, 3.0, 0.0),
            report(2, 0.4, 1.0, 0.0),
        ];
        assert_eq!(alphas_fedmax_k(&rs, 1).unwrap(), alphas_fedmax(&rs).unwrap());
        assert_eq!(alphas_fedmax_k(&rs, 3).unwrap().0, vec![1.0 / 3.0; 3]);
        assert_eq!(alphas_fedmax_k(&rs, 2).unwrap().0, vec![0.5, 0.5, 0.0]);
        assert!(alphas_fedmax_k(&rs, 0).is_err());
        assert!(alphas_fedmax_k(&rs, 4).is_err());
    }

    #[test]
    fn fedmax_k_boundary_tie_prefers_smaller_id() {
        let rs = vec![
            report(0, 0.25, 2.0, 0.0),
            report(1, 0.25, 5.0, 0.0),
            report(2, 0.25, 2.0, 0.0),
            report(3, 0.25, 1.0, 0.0),
        ];
        assert_eq!(alphas_fedmax_k(&rs, 2).unwrap().0, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn fedsoftmax_hand_value() {
        let rs = vec![report(0, 0.5, 0.125, 0.0), report(1, 0.5, 1.125, 0.0)];
        let a = alphas_fedsoftmax(&rs, 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((a.0[1] - expected).abs() < 1e-12);
        assert!((a.0[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn fedsoftmax_high_temperature_limit_is_p() {
        let rs = vec![report(0, 0.7, 4.0, 0.0), report(1, 0.3, 1.0, 0.0)];
        let a = alphas_fedsoftmax(&rs, 1e9).unwrap();
        assert!((a.0[0] - 0.7).abs() < 1e-9);
        assert!((a.0[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn fedsoftmax_equal_gaps_returns_p() {
        let rs = vec![report(0, 0.6, 2.5, 0.5), report(1, 0.4, 3.0, 1.0)];
        let a = alphas_fedsoftmax(&rs, 2.0).unwrap();
        assert_eq!(a.0, vec![0.6, 0.4]);
    }

    #[test]
    fn aggregate_fedmax_returns_argmax_model_bitwise() {
        let rs = vec![report(0, 0.5, 0.1, 0.0), report(1, 0.5, 2.0, 0.0)];
        let a = alphas_fedmax(&rs).unwrap();
        let w = aggregate(&rs, &a).unwrap();
        assert_eq!(w.0, rs[1].w_local.0);
    }

    #[test]
    fn aggregate_identical_models_under_fedavg() {
        let mut rs = vec![report(0, 0.5, 0.1, 0.0), report(1, 0.5, 2.0, 0.0)];
        rs[0].w_local = ParamVector(vec![1.5, -2.0]);
        rs[1].w_local = ParamVector(vec![1.5, -2.0]);
        let a = alphas_fedavg(&rs).unwrap();
        assert_eq!(aggregate(&rs, &a).unwrap().0, vec![1.5, -2.0]);
    }

    #[test]
    fn shift_invariance_of_max_selection() {
        let rs = vec![
            report(0, 0.3, 5.0, 1.0),
            report(1, 0.3, 3.0, 0.5),
            report(2, 0.4, 1.0, 0.0),
        ];
        let shifted: Vec<_> = rs
            .iter()
            .map(|r| report(r.id, r.p, r.loss_final + 10.0, r.f_star))
            .collect();
        assert_eq!(alphas_fedmax(&rs).unwrap(), alphas_fedmax(&shifted).unwrap());
        assert_eq!(
            alphas_fedmax_k(&rs, 2).unwrap(),
            alphas_fedmax_k(&shifted, 2).unwrap()
        );
    }

    #[test]
    fn fedsoftmax_gap_temperature_scale_property() {
        let rs = vec![
            report(0, 0.3, 5.0, 1.0),
            report(1, 0.3, 3.0, 0.5),
            report(2, 0.4, 1.0, 0.0),
        ];
        let scaled: Vec<_> = rs
            .iter()
            .map(|r| report(r.id, r.p, 3.0 * (r.loss_final - r.f_star), 0.0))
            .collect();
        let a = alphas_fedsoftmax(&rs, 2.0).unwrap();
        let b = alphas_fedsoftmax(&scaled, 6.0).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fedsoftmax_low_temperature_approaches_fedmax() {
        let rs = vec![
            report(0, 0.3, 5.0, 1.0),
            report(1, 0.3, 3.0, 0.5),
            report(2, 0.4, 1.0, 0.0),
        ];
        let soft = alphas_fedsoftmax(&rs, 1e-6).unwrap();
        let hard = alphas_fedmax(&rs).unwrap();
        for (x, y) in soft.0.iter().zip(&hard.0) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
