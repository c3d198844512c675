//! Variance-preserving diffusion over flat tensors.
//!
//! Timesteps are 1-based: `tau ∈ 1..=T`, with `ᾱ_0 = 1`. The reverse step uses
//! the Gaussian posterior `q(x_{τ-1} | x_τ, x̂_0)`, which matches the forward
//! marginal at `τ-1` exactly when `x̂_0` is correct.

pub mod denoiser;
pub mod losses;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("timestep {tau} outside 1..={t}")]
    TauOutOfRange { tau: usize, t: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch set is empty")]
    EmptyPatchSet,
    #[error("patch center ({0}, {1}) outside the feature map")]
    CenterOutOfBounds(usize, usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas, each strictly inside (0, 1).
    pub fn new(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        Ok(Self::build(betas))
    }

    /// Linearly spaced betas from `start` to `end` over `steps` steps.
    pub fn linear(start: f64, end: f64, steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        let betas = if steps == 1 {
            vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::new(betas)
    }

    /// All-zero betas: every step is the identity. Only useful in tests.
    pub fn identity(steps: usize) -> Self {
        Self::build(vec![0.0; steps.max(1)])
    }

    fn build(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.betas[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alphas[tau - 1]
    }

    /// `ᾱ_τ`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bars[tau - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_tau(&self, tau: usize) -> Result<(), DiffusionError> {
        if tau == 0 || tau > self.steps() {
            return Err(DiffusionError::TauOutOfRange { tau, t: self.steps() });
        }
        Ok(())
    }

    /// Posterior mean coefficients `(c_x0, c_xt)` and variance for jumping from
    /// `t` down to `s < t`. With `s = t - 1` these are the one-step DDPM
    /// posterior constants.
    pub fn posterior(&self, t: usize, s: usize) -> (f64, f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_s = self.alpha_bar(s);
        let a_ts = ab_t / ab_s;
        let b_ts = 1.0 - a_ts;
        let denom = 1.0 - ab_t;
        if denom <= 0.0 {
            // zero-noise schedule: the chain carries x_t unchanged
            return (0.0, a_ts.sqrt().recip(), 0.0);
        }
        let c_x0 = ab_s.sqrt() * b_ts / denom;
        let c_xt = a_ts.sqrt() * (1.0 - ab_s) / denom;
        let var = b_ts * (1.0 - ab_s) / denom;
        (c_x0, c_xt, var)
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::ShapeMismatch(format!("{what}: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Closed-form corruption `√ᾱ_τ x0 + √(1-ᾱ_τ) ε`.
pub fn forward_noise(x0: &[f64], tau: usize, noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_tau(tau)?;
    same_len(x0, noise, "x0/noise")?;
    let ab = schedule.alpha_bar(tau);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// One ancestral step `x_τ → x_{τ-1}` given a clean estimate. At `τ = 1` the
/// estimate itself is returned.
pub fn reverse_step(
    x_tau: &[f64],
    x0_hat: &[f64],
    tau: usize,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_tau(tau)?;
    if tau == 1 {
        same_len(x_tau, x0_hat, "x_tau/x0_hat")?;
        return Ok(x0_hat.to_vec());
    }
    reverse_jump(x_tau, x0_hat, tau, tau - 1, schedule, noise)
}

/// Ancestral step from `t` to any earlier `s ≥ 1`, used for strided sampling.
pub fn reverse_jump(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check_tau(t)?;
    schedule.check_tau(s)?;
    if s >= t {
        return Err(DiffusionError::TauOutOfRange { tau: s, t: t - 1 });
    }
    same_len(x_t, x0_hat, "x_t/x0_hat")?;
    same_len(x_t, noise, "x_t/noise")?;
    let (c0, ct, var) = schedule.posterior(t, s);
    let sd = var.max(0.0).sqrt();
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .zip(noise)
        .map(|((xt, x0), e)| c0 * x0 + ct * xt + sd * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1e-4, 0.1, 50).unwrap()
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = default_schedule();
        for t in 1..s.steps() {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert!(s.alpha_bar(1) <= 1.0);
        assert!(NoiseSchedule::new(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::new(vec![]).is_err());
    }

    #[test]
    fn identity_schedule_forward_is_identity() {
        let s = NoiseSchedule::identity(10);
        let x0 = vec![0.3, -1.2, 4.0];
        for tau in 1..=10 {
            assert_eq!(forward_noise(&x0, tau, &[7.0, 8.0, 9.0], &s).unwrap(), x0);
        }
    }

    #[test]
    fn forward_closed_form_quarter() {
        // ᾱ = 0.25 after one step with β = 0.75
        let s = NoiseSchedule::new(vec![0.75]).unwrap();
        let out = forward_noise(&[1.0; 4], 1, &[0.0; 4], &s).unwrap();
        assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn forward_errors() {
        let s = default_schedule();
        assert_eq!(
            forward_noise(&[1.0], 0, &[0.0], &s).unwrap_err(),
            DiffusionError::TauOutOfRange { tau: 0, t: 50 }
        );
        assert!(matches!(forward_noise(&[1.0], 51, &[0.0], &s), Err(DiffusionError::TauOutOfRange { .. })));
        assert!(matches!(forward_noise(&[1.0, 2.0], 3, &[0.0], &s), Err(DiffusionError::ShapeMismatch(_))));
    }

    #[test]
    fn reverse_terminal_step_returns_estimate() {
        let s = default_schedule();
        let out = reverse_step(&[9.0, 9.0], &[0.1, 0.2], 1, &s, &[5.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.1, 0.2]);
    }

    #[test]
    fn noiseless_reverse_hits_previous_marginal() {
        let s = default_schedule();
        let x0 = vec![0.7, -0.4, 1.0, 0.0];
        for tau in 2..=s.steps() {
            let xt = forward_noise(&x0, tau, &[0.0; 4], &s).unwrap();
            let prev = reverse_step(&xt, &x0, tau, &s, &[0.0; 4]).unwrap();
            let expect = forward_noise(&x0, tau - 1, &[0.0; 4], &s).unwrap();
            for (a, b) in prev.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_coefficient_bound() {
        for s in [default_schedule(), NoiseSchedule::linear(1e-3, 0.5, 20).unwrap()] {
            for tau in 2..=s.steps() {
                let lhs = s.alpha_bar(tau - 1).sqrt() * s.beta(tau) + s.alpha(tau).sqrt() * (1.0 - s.alpha_bar(tau - 1));
                let rhs = (1.0 - s.alpha_bar(tau)) * 1f64.max(1.0 / s.alpha_bar(tau).sqrt());
                assert!(lhs <= rhs + 1e-12);
            }
        }
    }

    #[test]
    fn forward_variance_monte_carlo() {
        // Var[forward_noise(0, τ, ε)] = 1 - ᾱ_τ
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        for tau in [1, 10, 50] {
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = forward_noise(&vec![0.0; n], tau, &eps, &s).unwrap();
            let var = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let target = 1.0 - s.alpha_bar(tau);
            // standard error of a variance estimate: σ²·√(2/n)
            assert!((var - target).abs() < 3.0 * target * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn strided_jump_matches_marginal() {
        let s = default_schedule();
        let x0 = vec![0.5, -0.5];
        let xt = forward_noise(&x0, 40, &[0.0; 2], &s).unwrap();
        let xs = reverse_jump(&xt, &x0, 40, 25, &s, &[0.0; 2]).unwrap();
        let expect = forward_noise(&x0, 25, &[0.0; 2], &s).unwrap();
        assert!((xs[0] - expect[0]).abs() < 1e-12 && (xs[1] - expect[1]).abs() < 1e-12);
        assert!(reverse_jump(&xt, &x0, 10, 10, &s, &[0.0; 2]).is_err());
    }
}
