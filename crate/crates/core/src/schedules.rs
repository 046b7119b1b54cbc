//! Hyperparameters prescribed by the convergence theorems.
//!
//! Heavy-ball Muon has three regimes: batch size one with `β = 1 − α`
//! tied to the horizon, any constant `β` with `B = T`, and any constant `β`
//! with `B = ⌈T^p⌉`. All of them use
//!
//! ```text
//! η = sqrt(4R / ((10/(1−β) + 2n) T L))
//! ```
//!
//! Spectral descent only caps the step size:
//! `η ≤ (1/8L) sqrt((1 − 2β) / (2β))`, which is positive only for `β < 1/2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("invalid schedule input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    Thm22BatchFree,
    Thm22BigBatch,
    Thm22PowerBatch,
    Thm31,
}

impl Theorem {
    pub fn name(self) -> &'static str {
        match self {
            Theorem::Thm22BatchFree => "thm22-batch-free",
            Theorem::Thm22BigBatch => "thm22-big-batch",
            Theorem::Thm22PowerBatch => "thm22-power-batch",
            Theorem::Thm31 => "thm31",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            Theorem::Thm22BatchFree,
            Theorem::Thm22BigBatch,
            Theorem::Thm22PowerBatch,
            Theorem::Thm31,
        ]
        .into_iter()
        .find(|t| t.name() == name || format!("{t:?}").eq_ignore_ascii_case(name))
    }

    pub fn is_thm22(self) -> bool {
        !matches!(self, Theorem::Thm31)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub theorem: Theorem,
    /// `1 − β`.
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub batch: usize,
    pub valid: bool,
    pub reason: String,
}

impl ScheduleParams {
    /// Structured `key = value` rendering used by the CLI.
    pub fn to_text(&self) -> String {
        format!(
            "theorem = {}\nalpha = {}\nbeta = {}\neta = {}\nbatch = {}\nvalid = {}\nreason = {}\n",
            self.theorem.name(),
            self.alpha,
            self.beta,
            self.eta,
            self.batch,
            self.valid,
            self.reason
        )
    }
}

fn positive(name: &str, v: f64) -> Result<(), ScheduleError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ScheduleError::InvalidInput(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

fn open_unit(name: &str, v: f64) -> Result<(), ScheduleError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(ScheduleError::InvalidInput(format!(
            "{name} must lie in (0, 1), got {v}"
        )))
    }
}

fn counts(n: usize, horizon: usize) -> Result<(), ScheduleError> {
    if horizon == 0 {
        return Err(ScheduleError::InvalidInput("T must be >= 1".into()));
    }
    if n == 0 {
        return Err(ScheduleError::InvalidInput("n must be >= 1".into()));
    }
    Ok(())
}

/// `η = sqrt(4R / ((10/α + 2n) T L))`.
pub fn thm22_eta(r: f64, lipschitz: f64, n: usize, horizon: usize, alpha: f64) -> f64 {
    (4.0 * r / ((10.0 / alpha + 2.0 * n as f64) * horizon as f64 * lipschitz)).sqrt()
}

/// Batch size one with `α = min(sqrt(RL) / (σ sqrt(T)), 1)` and `β = 1 − α`.
/// `σ = 0` takes the `α = 1` branch.
pub fn thm22_batch_free(
    r: f64,
    lipschitz: f64,
    sigma: f64,
    n: usize,
    horizon: usize,
) -> Result<ScheduleParams, ScheduleError> {
    positive("R", r)?;
    positive("L", lipschitz)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(ScheduleError::InvalidInput(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    counts(n, horizon)?;
    let alpha = if sigma == 0.0 {
        1.0
    } else {
        ((r * lipschitz).sqrt() / (sigma * (horizon as f64).sqrt())).min(1.0)
    };
    Ok(ScheduleParams {
        theorem: Theorem::Thm22BatchFree,
        alpha,
        beta: 1.0 - alpha,
        eta: thm22_eta(r, lipschitz, n, horizon, alpha),
        batch: 1,
        valid: true,
        reason: "batch size one, beta tied to the horizon".into(),
    })
}

/// Constant `β` with batch size `T`.
pub fn thm22_big_batch(
    r: f64,
    lipschitz: f64,
    n: usize,
    horizon: usize,
    beta: f64,
) -> Result<ScheduleParams, ScheduleError> {
    positive("R", r)?;
    positive("L", lipschitz)?;
    counts(n, horizon)?;
    open_unit("beta", beta)?;
    let alpha = 1.0 - beta;
    Ok(ScheduleParams {
        theorem: Theorem::Thm22BigBatch,
        alpha,
        beta,
        eta: thm22_eta(r, lipschitz, n, horizon, alpha),
        batch: horizon,
        valid: true,
        reason: "constant beta, batch size equal to the horizon".into(),
    })
}

/// `⌈x⌉`, except that values within rounding of an integer snap to it.
fn ceil_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Constant `β` with batch size `⌈T^power⌉`, `power ∈ (0, 1)`.
pub fn thm22_power_batch(
    r: f64,
    lipschitz: f64,
    n: usize,
    horizon: usize,
    beta: f64,
    power: f64,
) -> Result<ScheduleParams, ScheduleError> {
    open_unit("power", power)?;
    let mut p = thm22_big_batch(r, lipschitz, n, horizon, beta)?;
    p.theorem = Theorem::Thm22PowerBatch;
    p.batch = ceil_snapped((horizon as f64).powf(power)) as usize;
    p.reason = format!("constant beta, batch size ceil(T^{power})");
    Ok(p)
}

/// Step-size cap for spectral descent. Invalidity (`β ≥ 1/2`) is reported in
/// the returned parameters, not as an error.
pub fn thm31_eta_cap(lipschitz: f64, beta: f64) -> Result<ScheduleParams, ScheduleError> {
    positive("L", lipschitz)?;
    open_unit("beta", beta)?;
    let (eta, valid, reason) = if beta < 0.5 {
        (
            ((1.0 - 2.0 * beta) / (2.0 * beta)).sqrt() / (8.0 * lipschitz),
            true,
            "upper bound on eta; any positive eta at or below it is admissible".to_string(),
        )
    } else {
        (
            0.0,
            false,
            format!(
                "beta = {beta} >= 1/2 makes the eta cap (1/8L)sqrt((1-2beta)/(2beta)) nonpositive"
            ),
        )
    };
    Ok(ScheduleParams {
        theorem: Theorem::Thm31,
        alpha: 1.0 - beta,
        beta,
        eta,
        batch: 1,
        valid,
        reason,
    })
}

/// Step size used for spectral-descent experiments: half the cap.
pub const THM31_DEFAULT_CAP_FRACTION: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn batch_free_examples() {
        let p = thm22_batch_free(1.0, 1.0, 1.0, 2, 100).unwrap();
        assert!(close(p.alpha, 0.1, 1e-15));
        assert!(close(p.beta, 0.9, 1e-15));
        assert!(close(p.eta, (4.0_f64 / 10400.0).sqrt(), 1e-15));
        assert!(close(p.eta, 0.019612, 1e-6));
        assert_eq!(p.batch, 1);

        assert_eq!(thm22_batch_free(1.0, 1.0, 0.0, 2, 100).unwrap().alpha, 1.0);

        let p = thm22_batch_free(1.0, 1.0, 1.0, 1, 1).unwrap();
        assert_eq!(p.alpha, 1.0);
        assert!(close(p.eta, (4.0_f64 / 12.0).sqrt(), 1e-15));
        assert!(close(p.eta, 0.57735, 1e-5));
    }

    #[test]
    fn batch_free_rejects_bad_input() {
        assert!(thm22_batch_free(0.0, 1.0, 1.0, 2, 10).is_err());
        assert!(thm22_batch_free(1.0, -1.0, 1.0, 2, 10).is_err());
        assert!(thm22_batch_free(1.0, 1.0, 1.0, 2, 0).is_err());
        assert!(thm22_batch_free(1.0, 1.0, -0.1, 2, 10).is_err());
    }

    #[test]
    fn big_batch_examples() {
        let p = thm22_big_batch(1.0, 1.0, 2, 100, 0.5).unwrap();
        assert!(close(p.eta, (4.0_f64 / 2400.0).sqrt(), 1e-15));
        assert!(close(p.eta, 0.040825, 1e-6));
        assert_eq!(p.batch, 100);
        let tiny = thm22_big_batch(1.0, 1.0, 2, 100, 1e-12).unwrap();
        let free = thm22_batch_free(1.0, 1.0, 0.0, 2, 100).unwrap();
        assert!(close(tiny.eta, free.eta, 1e-12));
        assert!(thm22_big_batch(1.0, 1.0, 2, 0, 0.5).is_err());
        assert!(thm22_big_batch(1.0, 1.0, 2, 10, 1.0).is_err());
    }

    #[test]
    fn power_batch_examples() {
        assert_eq!(
            thm22_power_batch(1.0, 1.0, 2, 100, 0.5, 0.5).unwrap().batch,
            10
        );
        assert!(thm22_power_batch(1.0, 1.0, 2, 100, 0.5, 1.0).is_err());
        assert_eq!(
            thm22_power_batch(1.0, 1.0, 2, 1000, 0.5, 0.5)
                .unwrap()
                .batch,
            32
        );
    }

    #[test]
    fn thm31_examples() {
        let p = thm31_eta_cap(1.0, 0.25).unwrap();
        assert!(p.valid);
        assert!(close(p.eta, 0.125, 1e-15));
        let p = thm31_eta_cap(1.0, 0.5).unwrap();
        assert!(!p.valid);
        assert!(!p.reason.is_empty());
        let p = thm31_eta_cap(2.0, 0.1).unwrap();
        assert!(close(p.eta, 0.125, 1e-15));
        assert!(!thm31_eta_cap(1.0, 0.9).unwrap().valid);
    }

    #[test]
    fn balance_point_round_trip() {
        // At the prescribed η the two η-dependent terms of the summed bound
        // are equal, each 2 sqrt((10/(1−β) + 2n) R T L).
        for &(r, l, n, t, beta) in &[(1.0, 1.0, 2, 100, 0.5), (3.0, 0.2, 7, 5000, 0.9)] {
            let p = thm22_big_batch(r, l, n, t, beta).unwrap();
            let c = 10.0 / (1.0 - beta) + 2.0 * n as f64;
            let balance = 2.0 * (c * r * t as f64 * l).sqrt();
            let split = 4.0 * r / p.eta;
            let linear = c * t as f64 * l * p.eta;
            assert!((split - balance).abs() <= 1e-10 * balance);
            assert!((linear - balance).abs() <= 1e-10 * balance);
        }
    }

    #[test]
    fn names_round_trip() {
        for t in [
            Theorem::Thm22BatchFree,
            Theorem::Thm22BigBatch,
            Theorem::Thm22PowerBatch,
            Theorem::Thm31,
        ] {
            assert_eq!(Theorem::from_name(t.name()), Some(t));
        }
        assert_eq!(Theorem::from_name("nope"), None);
    }
}
