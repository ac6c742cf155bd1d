//! Worst-case scale-invariant deviation of an explanation over an ℓ∞ ball:
//! `max_{‖Δ‖∞ ≤ ε} min_{γ>0} ‖φ(x+Δ) − γ φ(x)‖₂`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Explainer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::xmanip::hvp_fn;

/// Lower clamp on the closed-form optimal scale.
pub const GAMMA_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub epsilon: f64,
    /// Sign-ascent steps per restart.
    pub steps: usize,
    pub restarts: usize,
    /// First step length as a fraction of `epsilon`.
    pub initial_step: f64,
    /// Geometric decay of the step length per iteration.
    pub decay: f64,
    pub hvp_step: f64,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 30,
            restarts: 4,
            initial_step: 0.5,
            decay: 0.9,
            hvp_step: 1e-3,
            seed: 0,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "stability radius must be positive, got {}",
                self.epsilon
            )));
        }
        if self.restarts == 0 {
            return Err(Error::config("stability search needs at least one restart"));
        }
        if !(self.initial_step > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(
                "stability step schedule must be positive with decay in (0, 1]",
            ));
        }
        if !(self.hvp_step > 0.0) {
            return Err(Error::config("hvp step must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub value: f64,
    /// Optimal scale at the worst case found.
    pub gamma: f64,
    pub delta: Tensor,
    /// The worst case had `⟨φ(x+Δ), φ(x)⟩ ≤ 0`; `value` is then `‖φ(x+Δ)‖`.
    pub anti_aligned: bool,
    /// Number of explanation evaluations spent.
    pub evaluations: usize,
}

struct Candidate {
    value: f64,
    gamma: f64,
    anti_aligned: bool,
    /// Unit gradient of the residual norm with respect to `φ(x+Δ)`, or
    /// `None` when the residual vanishes.
    ascent: Option<Tensor>,
}

fn score(phi0: &Tensor, phi0_sq: f64, phi: &Tensor) -> Candidate {
    let dot = phi.dot(phi0);
    if dot <= 0.0 {
        let norm = phi.norm_l2();
        return Candidate {
            value: norm,
            gamma: GAMMA_MIN,
            anti_aligned: true,
            ascent: (norm > 0.0).then(|| phi.scale(1.0 / norm)),
        };
    }
    let gamma = (dot / phi0_sq).max(GAMMA_MIN);
    let residual = phi.axpy(-gamma, phi0);
    let value = residual.norm_l2();
    Candidate {
        value,
        gamma,
        anti_aligned: false,
        ascent: (value > 0.0).then(|| residual.scale(1.0 / value)),
    }
}

fn search(
    explainer: &dyn Explainer,
    x: &Tensor,
    cfg: &StabilityConfig,
    warm_start: Option<&Tensor>,
) -> Result<StabilityReport> {
    cfg.validate()?;
    let phi0 = explainer.explain(x)?;
    let phi0_sq = phi0.dot(&phi0);
    if phi0_sq == 0.0 {
        return Err(Error::degenerate("explanation at x is identically zero"));
    }
    let eps = cfg.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts: Vec<Tensor> = (0..cfg.restarts)
        .map(|_| {
            let data = (0..x.len()).map(|_| rng.random_range(-eps..=eps)).collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    if let Some(w) = warm_start {
        starts.push(w.clamp(-eps, eps));
    }

    let mut best: Option<StabilityReport> = None;
    let mut evaluations = 1;
    for mut delta in starts {
        let mut step = eps * cfg.initial_step;
        for t in 0..=cfg.steps {
            let point = x.axpy(1.0, &delta);
            let cand = score(&phi0, phi0_sq, &explainer.explain(&point)?);
            evaluations += 1;
            if best.as_ref().is_none_or(|b| cand.value > b.value) {
                best = Some(StabilityReport {
                    value: cand.value,
                    gamma: cand.gamma,
                    delta: delta.clone(),
                    anti_aligned: cand.anti_aligned,
                    evaluations: 0,
                });
            }
            let Some(dir) = cand.ascent else { break };
            if t == cfg.steps {
                break;
            }
            // Hessian is symmetric, so H·dir is the gradient of the residual norm.
            let g = hvp_fn(explainer, &point, &dir, cfg.hvp_step)?;
            evaluations += 2;
            delta = delta.axpy(step, &g.sign()).clamp(-eps, eps);
            step *= cfg.decay;
        }
    }
    let mut report = best.expect("at least one restart");
    report.evaluations = evaluations;
    Ok(report)
}

/// Sign-gradient ascent with random restarts; returns the largest
/// deviation found.
pub fn stability(explainer: &dyn Explainer, x: &Tensor, cfg: &StabilityConfig) -> Result<StabilityReport> {
    search(explainer, x, cfg, None)
}

/// Stability at increasing radii. Each search also restarts from the best
/// perturbation of the previous radius, so the values never decrease.
pub fn stability_curve(
    explainer: &dyn Explainer,
    x: &Tensor,
    radii: &[f64],
    cfg: &StabilityConfig,
) -> Result<Vec<StabilityReport>> {
    if radii.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("stability radii must be non-decreasing"));
    }
    let mut out: Vec<StabilityReport> = Vec::with_capacity(radii.len());
    for &eps in radii {
        let c = StabilityConfig { epsilon: eps, ..*cfg };
        let warm = out.last().map(|r| r.delta.clone());
        out.push(search(explainer, x, &c, warm.as_ref())?);
    }
    Ok(out)
}
