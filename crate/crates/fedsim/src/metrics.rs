//! Analysis quantities: heterogeneity Γ, weighting skew ρ, κ/π/Π
//! statistics, the per-step convergence bound and its corollary
//! estimators, the discrepancy bound, and the evaluation metrics
//! (rounds-to-threshold with confidence intervals, stability index,
//! α→p convergence tracking).

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::model::{GlobalObjective, LocalOptimum};
use crate::vector::{ksum, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Estimated,
}

/// Problem constants entering the convergence bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub mu: f64,
    pub l_smooth: f64,
    /// Bound on the stochastic gradient's expected squared norm.
    pub g2: f64,
    /// Gradient-noise variance bound.
    pub sigma2: f64,
    pub mu_provenance: Provenance,
    pub l_provenance: Provenance,
    pub g2_provenance: Provenance,
    pub sigma2_provenance: Provenance,
}

impl TheoryConstants {
    pub fn gamma(&self) -> f64 {
        4.0 * self.l_smooth / self.mu
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu <= 0.0 || self.mu > self.l_smooth || self.g2 < 0.0 || self.sigma2 < 0.0 {
            return Err(FedError::Config(format!(
                "inconsistent theory constants: mu={}, L={}, G2={}, sigma2={}",
                self.mu, self.l_smooth, self.g2, self.sigma2
            )));
        }
        Ok(())
    }
}

/// Safety factor applied on top of the largest observed ‖g‖².
pub const G2_SAFETY: f64 = 1.5;

/// Fold observed squared gradient norms into a G² estimate.
pub fn estimate_g2(grad_sq_samples: impl IntoIterator<Item = f64>) -> f64 {
    let max = grad_sq_samples
        .into_iter()
        .fold(0.0_f64, f64::max);
    G2_SAFETY * max
}

/// Γ = F\* − Σ p_i F_i\* (nonnegative by optimality of per-client minima).
pub fn heterogeneity_gamma(
    obj: &GlobalObjective,
    tol: f64,
    max_iters: usize,
) -> Result<f64> {
    let f_star = match obj.global_optimum(tol, max_iters)? {
        LocalOptimum::Known { value, .. } => value,
        LocalOptimum::Unknown => {
            return Err(FedError::Config(
                "heterogeneity undefined without a computable global optimum".into(),
            ))
        }
    };
    let mut f_stars = Vec::new();
    for (m, _) in obj.clients() {
        f_stars.push(m.local_optimum(tol, max_iters)?.value_or_zero());
    }
    Ok(gamma_from_parts(f_star, &f_stars, &obj.weights()))
}

pub fn gamma_from_parts(f_star_global: f64, f_stars: &[f64], p: &[f64]) -> f64 {
    f_star_global - ksum(f_stars.iter().zip(p).map(|(f, p)| p * f))
}

/// Weighting skew ρ = Σ α_i (F_i(w) − F_i\*) / (F(w) − Σ p_i F_i\*).
///
/// Returns None when the denominator is degenerate (the footnote guard);
/// the run continues with a null entry in the record.
pub fn weighting_skew(
    alphas: &[f64],
    losses_at_eval: &[f64],
    f_stars: &[f64],
    p: &[f64],
    global_loss_at_eval: f64,
) -> Option<f64> {
    let denom = global_loss_at_eval - ksum(f_stars.iter().zip(p).map(|(f, p)| p * f));
    if denom.abs() <= 1e-12 {
        return None;
    }
    let num = ksum(
        alphas
            .iter()
            .zip(losses_at_eval.iter().zip(f_stars))
            .map(|(a, (l, f))| a * (l - f)),
    );
    Some(num / denom)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KappaStats {
    /// min over rounds and clients of α_t^i / p_i.
    pub pi: f64,
    /// max over rounds and clients of α_t^i / p_i.
    pub cap_pi: f64,
    /// 1/(π · min p_i) − N; infinite when π = 0.
    pub error_bound: f64,
}

/// κ_t^i = α_t^i / p_i over a whole series of rounds.
pub fn kappa_stats(alphas_series: &[Vec<f64>], p: &[f64]) -> KappaStats {
    let mut pi = f64::INFINITY;
    let mut cap_pi = f64::NEG_INFINITY;
    for alphas in alphas_series {
        for (a, pi_i) in alphas.iter().zip(p) {
            let kappa = a / pi_i;
            pi = pi.min(kappa);
            cap_pi = cap_pi.max(kappa);
        }
    }
    let min_p = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let error_bound = if pi > 0.0 {
        1.0 / (pi * min_p) - p.len() as f64
    } else {
        f64::INFINITY
    };
    KappaStats { pi, cap_pi, error_bound }
}

/// One application of the per-step convergence recursion:
/// (1 − η μ (1 + 3ρ̄/8)) Δ + η² (32 E² G² + 6 ρ̄ L Γ + σ²) + 2 η Γ (ρ̃ − ρ̄).
///
/// Returns the value together with a flag telling whether the contraction
/// sanity condition η μ (1 + 3ρ̄/8) < 1 held.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_rhs(
    delta: f64,
    consts: &TheoryConstants,
    epochs: usize,
    rho_bar: f64,
    rho_tilde: f64,
    gamma_het: f64,
    eta: f64,
) -> (f64, bool) {
    let e2 = (epochs * epochs) as f64;
    let contraction = eta * consts.mu * (1.0 + 0.375 * rho_bar);
    let value = (1.0 - contraction) * delta
        + eta * eta * (32.0 * e2 * consts.g2 + 6.0 * rho_bar * consts.l_smooth * gamma_het + consts.sigma2)
        + 2.0 * eta * gamma_het * (rho_tilde - rho_bar);
    (value, contraction < 1.0)
}

/// Upper envelope for Δ after one communication round: the single-step
/// recursion composed over the round's learning rates.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_round_envelope(
    delta_start: f64,
    consts: &TheoryConstants,
    epochs: usize,
    rho_bar: f64,
    rho_tilde: f64,
    gamma_het: f64,
    etas: &[f64],
) -> (f64, bool) {
    let mut delta = delta_start;
    let mut ok = true;
    for &eta in etas {
        let (next, contraction_ok) =
            theorem1_rhs(delta, consts, epochs, rho_bar, rho_tilde, gamma_het, eta);
        ok &= contraction_ok;
        delta = next;
    }
    (delta, ok)
}

/// Corollary estimators: convergence-speed term V, learning-error term E,
/// and the minimal speed value V_min.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorollaryEstimators {
    pub speed: f64,
    pub error: f64,
    pub speed_min: f64,
}

pub fn corollary_estimators(
    consts: &TheoryConstants,
    epochs: usize,
    rho_bar: f64,
    rho_tilde: f64,
    gamma_het: f64,
    w0_dist_sq: f64,
) -> CorollaryEstimators {
    let l = consts.l_smooth;
    let mu = consts.mu;
    let gamma = consts.gamma();
    let e2 = (epochs * epochs) as f64;
    let speed_min = 8.0 * l * l * gamma_het / (mu * mu) + l * gamma * w0_dist_sq / 2.0;
    let speed = 4.0 * l * (32.0 * e2 * consts.g2 + consts.sigma2) / (3.0 * mu * mu * rho_bar)
        + speed_min;
    let error = 8.0 * l * gamma_het / (3.0 * mu) * (rho_tilde / rho_bar - 1.0);
    CorollaryEstimators { speed, error, speed_min }
}

/// Single-run sample of the average discrepancy Σ α_i ‖w_t − w_t^i‖²
/// against its bound 16 η_t² E² G².
pub fn discrepancy_check(
    client_positions: &[&ParamVector],
    virtual_mean: &ParamVector,
    alphas: &[f64],
    eta: f64,
    epochs: usize,
    g2: f64,
) -> (f64, f64, bool) {
    let lhs = ksum(
        client_positions
            .iter()
            .zip(alphas)
            .map(|(w, a)| a * virtual_mean.dist_sq(w)),
    );
    let rhs = 16.0 * eta * eta * (epochs * epochs) as f64 * g2;
    (lhs, rhs, lhs <= rhs)
}

/// Rounds-to-threshold statistics over per-seed accuracy curves.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThresholdCrossing {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Curves that never crossed the threshold (excluded from the CI).
    pub failed: usize,
}

/// First round at which each curve reaches `threshold`, with a 95% normal
/// confidence interval over the curves that cross.
pub fn r90_ci(curves: &[Vec<f64>], threshold: f64) -> Result<ThresholdCrossing> {
    if curves.is_empty() {
        return Err(FedError::Usage("need at least one curve".into()));
    }
    if !(0.0..1.0).contains(&threshold) || threshold <= 0.0 {
        return Err(FedError::Usage("threshold must lie in (0, 1)".into()));
    }
    let crossings: Vec<f64> = curves
        .iter()
        .filter_map(|c| c.iter().position(|&a| a >= threshold).map(|r| r as f64))
        .collect();
    let failed = curves.len() - crossings.len();
    if crossings.is_empty() {
        return Err(FedError::Usage("no curve crossed the threshold".into()));
    }
    let n = crossings.len() as f64;
    let mean = ksum(crossings.iter().copied()) / n;
    // sample standard deviation; degenerate (width 0) for a single curve
    let var = if crossings.len() > 1 {
        ksum(crossings.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0)
    } else {
        0.0
    };
    let half = 1.96 * var.sqrt() / n.sqrt();
    Ok(ThresholdCrossing {
        mean,
        lo: mean - half,
        hi: mean + half,
        failed,
    })
}

/// Coefficient of variation of the round-to-round accuracy variations:
/// sd(Δ)/|mean(Δ)| with Δ_t = a_{t+1} − a_t. Infinite when the mean
/// variation vanishes.
pub fn stability_index(curve: &[f64]) -> Result<f64> {
    if curve.len() < 3 {
        return Err(FedError::Usage("curve too short for stability index".into()));
    }
    let deltas: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    let n = deltas.len() as f64;
    let mean = ksum(deltas.iter().copied()) / n;
    let var = ksum(deltas.iter().map(|d| (d - mean) * (d - mean))) / (n - 1.0);
    if mean.abs() < 1e-12 {
        return Ok(f64::INFINITY);
    }
    Ok(var.sqrt() / mean.abs())
}

/// Per-round max_i |α_t^i − p_i| plus the least-squares slope of
/// log(deviation) against log(round) over the second half of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaConvergence {
    pub deviations: Vec<f64>,
    /// None when deviations vanish (nothing to fit).
    pub slope: Option<f64>,
}

pub fn alpha_convergence(alphas_series: &[Vec<f64>], p: &[f64]) -> Result<AlphaConvergence> {
    if alphas_series.len() < 10 {
        return Err(FedError::Usage("need at least 10 rounds".into()));
    }
    let deviations: Vec<f64> = alphas_series
        .iter()
        .map(|alphas| {
            alphas
                .iter()
                .zip(p)
                .map(|(a, pi)| (a - pi).abs())
                .fold(0.0_f64, f64::max)
        })
        .collect();
    let start = deviations.len() / 2;
    let points: Vec<(f64, f64)> = (start..deviations.len())
        .filter(|&t| deviations[t] > 0.0 && t > 0)
        .map(|t| ((t as f64).ln(), deviations[t].ln()))
        .collect();
    let slope = if points.len() < 2 {
        None
    } else {
        let n = points.len() as f64;
        let mx = points.iter().map(|(x, _)| x).sum::<f64>() / n;
        let my = points.iter().map(|(_, y)| y).sum::<f64>() / n;
        let sxy = ksum(points.iter().map(|(x, y)| (x - mx) * (y - my)));
        let sxx = ksum(points.iter().map(|(x, _)| (x - mx) * (x - mx)));
        if sxx == 0.0 {
            None
        } else {
            Some(sxy / sxx)
        }
    };
    Ok(AlphaConvergence { deviations, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GlobalObjective, LossModel, Quadratic};

    fn quad(center: Vec<f64>, a: f64) -> LossModel {
        LossModel::Quadratic(Quadratic::noiseless(ParamVector(center), a, 1))
    }

    fn consts(mu: f64, l: f64, g2: f64, sigma2: f64) -> TheoryConstants {
        TheoryConstants {
            mu,
            l_smooth: l,
            g2,
            sigma2,
            mu_provenance: Provenance::Analytic,
            l_provenance: Provenance::Analytic,
            g2_provenance: Provenance::Estimated,
            sigma2_provenance: Provenance::Analytic,
        }
    }

    #[test]
    fn gamma_identical_clients_is_zero() {
        let obj = GlobalObjective::new(vec![
            (quad(vec![1.0], 1.0), 0.5),
            (quad(vec![1.0], 1.0), 0.5),
        ])
        .unwrap();
        assert!(heterogeneity_gamma(&obj, 1e-10, 100).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gamma_two_client_hand_value_and_homogeneity() {
        let obj = GlobalObjective::new(vec![
            (quad(vec![0.0], 1.0), 0.5),
            (quad(vec![2.0], 1.0), 0.5),
        ])
        .unwrap();
        assert!((heterogeneity_gamma(&obj, 1e-10, 100).unwrap() - 0.5).abs() < 1e-12);
        let doubled = GlobalObjective::new(vec![
            (quad(vec![0.0], 2.0), 0.5),
            (quad(vec![2.0], 2.0), 0.5),
        ])
        .unwrap();
        assert!((heterogeneity_gamma(&doubled, 1e-10, 100).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skew_with_p_weights_is_one() {
        let p = [0.5, 0.5];
        let losses = [0.125, 1.125];
        let f_stars = [0.0, 0.0];
        let global = 0.625; // Σ p F_i
        let rho = weighting_skew(&p, &losses, &f_stars, &p, global).unwrap();
        assert!((rho - 1.0).abs() < 1e-15);
    }

    #[test]
    fn skew_fedmax_hand_value() {
        // 2-client quadratic at w = 0.5: gaps 0.125 / 1.125, denominator 0.625
        let alphas = [0.0, 1.0];
        let rho = weighting_skew(&alphas, &[0.125, 1.125], &[0.0, 0.0], &[0.5, 0.5], 0.625).unwrap();
        assert!((rho - 1.8).abs() < 1e-12);
        let min_side = weighting_skew(&[1.0, 0.0], &[0.125, 1.125], &[0.0, 0.0], &[0.5, 0.5], 0.625)
            .unwrap();
        assert!((min_side - 0.2).abs() < 1e-12);
        assert!(min_side < 1.0);
    }

    #[test]
    fn skew_degenerate_denominator_is_none() {
        assert!(weighting_skew(&[1.0], &[0.5], &[0.5], &[1.0], 0.5).is_none());
    }

    #[test]
    fn kappa_uniform_fedavg() {
        let p = vec![0.25; 4];
        let series = vec![p.clone(), p.clone()];
        let k = kappa_stats(&series, &p);
        assert_eq!(k.pi, 1.0);
        assert_eq!(k.cap_pi, 1.0);
        assert!(k.error_bound.abs() < 1e-12);
    }

    #[test]
    fn kappa_fedmax_unbounded() {
        let p = vec![0.5, 0.5];
        let series = vec![vec![0.0, 1.0]];
        let k = kappa_stats(&series, &p);
        assert_eq!(k.pi, 0.0);
        assert!(k.error_bound.is_infinite());
    }

    #[test]
    fn kappa_near_one_for_near_p_series() {
        let p = vec![0.5, 0.5];
        let series = vec![vec![0.5 + 1e-7, 0.5 - 1e-7]];
        let k = kappa_stats(&series, &p);
        assert!((k.pi - 1.0).abs() < 1e-6);
        assert!((k.cap_pi - 1.0).abs() < 1e-6);
    }

    #[test]
    fn theorem_rhs_zero_eta_returns_delta() {
        let c = consts(1.0, 1.0, 1.0, 0.0);
        let (v, ok) = theorem1_rhs(3.5, &c, 2, 1.0, 1.0, 0.5, 0.0);
        assert_eq!(v, 3.5);
        assert!(ok);
    }

    #[test]
    fn theorem_rhs_hand_value() {
        // Γ=0, σ=0, ρ̄=1, μ=L=1, E=1, G²=1, η=0.1, Δ=1
        let c = consts(1.0, 1.0, 1.0, 0.0);
        let (v, ok) = theorem1_rhs(1.0, &c, 1, 1.0, 1.0, 0.0, 0.1);
        assert!((v - 1.1825).abs() < 1e-12);
        assert!(ok);
    }

    #[test]
    fn theorem_rhs_equal_rhos_kill_linear_term() {
        let c = consts(1.0, 2.0, 1.0, 0.1);
        let (with_gap, _) = theorem1_rhs(1.0, &c, 2, 1.0, 1.0, 7.0, 0.05);
        let (zero_gamma, _) = theorem1_rhs(1.0, &c, 2, 1.0, 1.5, 0.0, 0.05);
        // both drop the 2ηΓ(ρ̃−ρ̄) term; with Γ=7 and ρ̃=ρ̄ the η² term differs only via 6ρ̄LΓ
        let expected = (1.0 - 0.05 * 1.375) + 0.0025 * (32.0 * 4.0 + 6.0 * 2.0 * 7.0 + 0.1);
        assert!((with_gap - expected).abs() < 1e-12);
        let expected0 = (1.0 - 0.05 * 1.375) + 0.0025 * (32.0 * 4.0 + 0.1);
        assert!((zero_gamma - expected0).abs() < 1e-12);
    }

    #[test]
    fn corollary_hand_value() {
        // μ=L=1, E=1, G²=1, σ²=0, ρ̄=1, Γ=0, w0_dist2=1 → V = 128/3 + 2
        let c = consts(1.0, 1.0, 1.0, 0.0);
        let est = corollary_estimators(&c, 1, 1.0, 1.0, 0.0, 1.0);
        assert!((est.speed - (128.0 / 3.0 + 2.0)).abs() < 1e-12);
        assert_eq!(est.error, 0.0);
        assert_eq!(est.speed_min, 2.0);
    }

    #[test]
    fn corollary_zero_gamma() {
        let c = consts(0.5, 2.0, 3.0, 0.25);
        let est = corollary_estimators(&c, 2, 1.3, 2.0, 0.0, 4.0);
        assert_eq!(est.error, 0.0);
        assert_eq!(est.speed_min, c.l_smooth * c.gamma() * 4.0 / 2.0);
    }

    #[test]
    fn corollary_equal_rhos_zero_error() {
        let c = consts(0.5, 2.0, 3.0, 0.25);
        let est = corollary_estimators(&c, 2, 1.3, 1.3, 5.0, 4.0);
        assert_eq!(est.error, 0.0);
    }

    #[test]
    fn discrepancy_at_sync_point() {
        let w = ParamVector(vec![1.0, 2.0]);
        let (lhs, rhs, ok) = discrepancy_check(&[&w, &w], &w, &[0.5, 0.5], 0.1, 2, 1.0);
        assert_eq!(lhs, 0.0);
        assert!(ok && rhs > 0.0);
        let (lhs0, rhs0, ok0) = discrepancy_check(&[&w, &w], &w, &[0.5, 0.5], 0.0, 2, 1.0);
        assert_eq!((lhs0, rhs0), (0.0, 0.0));
        assert!(ok0);
    }

    #[test]
    fn discrepancy_hand_iterated_quadratic_step() {
        // 2 clients, centers 0 and 2, start w=1, one step η=0.1, a=1:
        // w^1 = 1 − 0.1·1 = 0.9, w^2 = 1 − 0.1·(−1) = 1.1, mean = 1
        let w1 = ParamVector(vec![0.9]);
        let w2 = ParamVector(vec![1.1]);
        let mean = ParamVector(vec![1.0]);
        // analytic G² on this step: ‖g‖² = 1
        let (lhs, rhs, ok) = discrepancy_check(&[&w1, &w2], &mean, &[0.5, 0.5], 0.1, 1, 1.0);
        assert!((lhs - 0.01).abs() < 1e-15);
        assert!((rhs - 0.16).abs() < 1e-15);
        assert!(ok);
    }

    #[test]
    fn r90_first_crossing() {
        let curves = vec![vec![0.5, 0.85, 0.91, 0.95], vec![0.5, 0.85, 0.91, 0.95]];
        let r = r90_ci(&curves, 0.9).unwrap();
        assert_eq!(r.mean, 2.0);
        assert_eq!(r.lo, r.hi);
    }

    #[test]
    fn r90_ci_arithmetic() {
        let mk = |r: usize| {
            let mut c = vec![0.0; 12];
            for a in c.iter_mut().skip(r) {
                *a = 0.95;
            }
            c
        };
        let curves = vec![mk(7), mk(8), mk(9)];
        let r = r90_ci(&curves, 0.9).unwrap();
        assert!((r.mean - 8.0).abs() < 1e-12);
        // sample sd of {7,8,9} is exactly 1
        let half = 1.96 / 3.0f64.sqrt();
        assert!((r.hi - (8.0 + half)).abs() < 1e-12);
    }

    #[test]
    fn r90_no_crossing_is_error() {
        let curves = vec![vec![0.1, 0.2], vec![0.1, 0.3]];
        assert!(r90_ci(&curves, 0.9).is_err());
    }

    #[test]
    fn stability_linear_curve_is_zero() {
        let curve: Vec<f64> = (0..10).map(|t| 0.1 * t as f64).collect();
        assert!(stability_index(&curve).unwrap() < 1e-12);
    }

    #[test]
    fn stability_alternating_hand_value() {
        // Δ = (1, −1, 1, −1, 1): mean 0.2, sample sd ≈ 1.0954
        let curve = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let idx = stability_index(&curve).unwrap();
        assert!((idx - 1.2f64.sqrt() / 0.2).abs() < 1e-12);
        assert!((idx - 5.477).abs() < 1e-3);
    }

    #[test]
    fn stability_scale_invariant() {
        let curve = vec![0.1, 0.4, 0.5, 0.65, 0.9, 0.92];
        let scaled: Vec<f64> = curve.iter().map(|x| 10.0 * x).collect();
        let a = stability_index(&curve).unwrap();
        let b = stability_index(&scaled).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn stability_short_curve_rejected() {
        assert!(stability_index(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn alpha_convergence_fedavg_zero() {
        let p = vec![0.5, 0.5];
        let series = vec![p.clone(); 20];
        let r = alpha_convergence(&series, &p).unwrap();
        assert!(r.deviations.iter().all(|d| *d == 0.0));
        assert!(r.slope.is_none());
    }

    #[test]
    fn alpha_convergence_one_over_t_slope() {
        let p = vec![0.5, 0.5];
        let series: Vec<Vec<f64>> = (1..=200)
            .map(|t| vec![0.5 + 1.0 / t as f64, 0.5 - 1.0 / t as f64])
            .collect();
        let r = alpha_convergence(&series, &p).unwrap();
        let slope = r.slope.unwrap();
        assert!((slope + 1.0).abs() < 0.05, "slope {slope}");
    }
}
