//! Learning-rate schedules.
//!
//! The theoretical schedule is indexed by the global mini-batch step t;
//! the exponential schedule is constant within a communication round and
//! decays per round.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// η_t = 1 / (μ (t + γ)), with γ = 4L/μ by default.
    Theoretical { mu: f64, gamma: f64 },
    /// η = η₀ · decay^r where r is the communication round.
    Exponential { eta0: f64, decay: f64 },
}

impl LrSchedule {
    pub fn theoretical(mu: f64, l_smooth: f64) -> Self {
        LrSchedule::Theoretical {
            mu,
            gamma: 4.0 * l_smooth / mu,
        }
    }

    /// Learning rate at global step `t`, inside communication round `round`.
    pub fn lr_at(&self, t: u64, round: u64) -> f64 {
        match *self {
            LrSchedule::Theoretical { mu, gamma } => 1.0 / (mu * (t as f64 + gamma)),
            LrSchedule::Exponential { eta0, decay } => eta0 * decay.powi(round as i32),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_round_zero_and_one() {
        let s = LrSchedule::Exponential { eta0: 1e-4, decay: 0.99 };
        assert_eq!(s.lr_at(0, 0), 1e-4);
        assert!((s.lr_at(5, 1) - 9.9e-5).abs() < 1e-19);
    }

    #[test]
    fn theoretical_first_step() {
        let s = LrSchedule::theoretical(1.0, 1.0);
        assert_eq!(s.lr_at(0, 0), 0.25);
    }

    #[test]
    fn theoretical_nonincreasing() {
        let s = LrSchedule::theoretical(0.5, 2.0);
        let mut last = f64::INFINITY;
        for t in 0..100 {
            let lr = s.lr_at(t, 0);
            assert!(lr > 0.0 && lr <= last);
            last = lr;
        }
    }
}
