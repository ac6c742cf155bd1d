//! Fine-tuning a student against a fixed teacher with samples placed along
//! and perpendicular to the explanation direction:
//!
//! `J = L(g(x), f(x)) + α Σ_{xⁱ} Σ_{xᵖ} L(g(xᵖ), f(xⁱ))`
//!
//! with `xⁱ = x + δ₁ φ̂` and `xᵖ = xⁱ + δ₂ φ̂⊥`, `L` the soft-target
//! cross-entropy.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::explain::{
    smoothgrad, stability, vanilla_gradient, ClassGradient, SmoothGradConfig, StabilityConfig,
};
use crate::metrics::spearman;
use crate::model::{accuracy, AdamConfig, Fitter, Network, SoftExample};
use crate::tensor::{argmax, Tensor};
use crate::xmanip::{manipulate, ManipulationConfig};

/// Relative tolerance of the orthogonality invariant `⟨xᵖ − xⁱ, φ⟩ = 0`.
pub const ORTHOGONALITY_TOL: f64 = 1e-6;
/// Relative tolerance of the shift-length invariant `‖xⁱ − x‖ = |δ₁|`.
pub const SHIFT_TOL: f64 = 1e-9;
const MAX_PERPENDICULAR_DRAWS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionSource {
    /// Refresh sampling directions from the current student every iteration.
    #[default]
    Student,
    /// Keep using the original teacher's explanations.
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtexConfig {
    /// Radius of shifts along the explanation.
    pub delta1: f64,
    /// Radius of shifts perpendicular to it.
    pub delta2: f64,
    /// Samples along the explanation per instance.
    pub n_i: usize,
    /// Perpendicular samples per along-sample.
    pub n_p: usize,
    pub alpha: f64,
    pub iterations: usize,
    /// Distillation epochs per iteration.
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Seed instances drawn per iteration; `None` uses the whole set.
    pub instances_per_iteration: Option<usize>,
    pub smoothgrad: SmoothGradConfig,
    pub directions: DirectionSource,
    /// Pairs whose clipping removes more than this share of the shift are
    /// dropped.
    pub max_clip_loss: f64,
    pub seed: u64,
}

impl AtexConfig {
    /// Defaults with `Δ₁ = Δ₂ = epsilon`.
    pub fn new(epsilon: f64) -> Self {
        Self {
            delta1: epsilon,
            delta2: epsilon,
            n_i: 5,
            n_p: 2,
            alpha: 1.0,
            iterations: 5,
            epochs: 1,
            adam: AdamConfig::default(),
            batch_size: 32,
            instances_per_iteration: None,
            smoothgrad: SmoothGradConfig::default(),
            directions: DirectionSource::Student,
            max_clip_loss: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta1 > 0.0 && self.delta2 > 0.0) {
            return Err(Error::config("ATEX radii must be positive"));
        }
        if self.n_i == 0 || self.n_p == 0 {
            return Err(Error::config("ATEX sample counts must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "ATEX alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_clip_loss) {
            return Err(Error::config("max_clip_loss must lie in [0, 1]"));
        }
        self.adam.validate()?;
        self.smoothgrad.validate()
    }
}

/// Fraction of the shift `s` from `base` that survives clipping to `[0, 1]`.
fn kept_fraction(base: &Tensor, shift: &Tensor, clipped: &Tensor) -> f64 {
    let full = shift.norm_l2();
    if full == 0.0 {
        1.0
    } else {
        clipped.sub(base).norm_l2() / full
    }
}

/// A point shifted from `origin` by `shift`, clipped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedSample {
    pub point: Tensor,
    /// Shift before clipping.
    pub shift: Tensor,
    /// Signed step length along the unit direction.
    pub step: f64,
    /// `‖point − origin‖ / ‖shift‖`.
    pub kept: f64,
}

fn shifted(origin: &Tensor, unit: &Tensor, step: f64) -> ShiftedSample {
    let shift = unit.scale(step);
    let point = origin.axpy(1.0, &shift).clamp(0.0, 1.0);
    let kept = kept_fraction(origin, &shift, &point);
    ShiftedSample {
        point,
        shift,
        step,
        kept,
    }
}

/// `n_i` points `x + δ₁ φ/‖φ‖₂` with `δ₁ ~ U[−Δ₁, Δ₁]`.
pub fn sample_along_explanation(
    x: &Tensor,
    phi: &Tensor,
    delta1: f64,
    n_i: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ShiftedSample>> {
    let norm = phi.norm_l2();
    if norm == 0.0 {
        return Err(Error::degenerate("explanation direction is zero"));
    }
    let unit = phi.scale(1.0 / norm);
    Ok((0..n_i)
        .map(|_| shifted(x, &unit, rng.random_range(-delta1..=delta1)))
        .collect())
}

/// `u − φ ⟨u, φ⟩ / ‖φ‖²`, projected twice for accuracy; `None` when `u` is
/// (numerically) parallel to `φ`.
pub fn perpendicular_direction(phi: &Tensor, u: &Tensor) -> Option<Tensor> {
    let phi_sq = phi.dot(phi);
    if phi_sq == 0.0 {
        return None;
    }
    let once = u.axpy(-u.dot(phi) / phi_sq, phi);
    let twice = once.axpy(-once.dot(phi) / phi_sq, phi);
    (twice.norm_l2() > 1e-12 * u.norm_l2()).then_some(twice)
}

/// `n_p` points `xⁱ + δ₂ φ⊥/‖φ⊥‖` with `δ₂ ~ U[−Δ₂, Δ₂]`, where `φ⊥` is
/// the part of a random `u ~ U(0, Δ₂)ⁿ` orthogonal to `φ`. Only the direction
/// of `u` matters, so it is drawn on the unit scale.
pub fn sample_perpendicular(
    xi: &Tensor,
    phi: &Tensor,
    delta2: f64,
    n_p: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ShiftedSample>> {
    if phi.norm_l2() == 0.0 {
        return Err(Error::degenerate("explanation direction is zero"));
    }
    (0..n_p)
        .map(|_| {
            for _ in 0..MAX_PERPENDICULAR_DRAWS {
                let data = (0..phi.len()).map(|_| rng.random_range(0.0..1.0)).collect();
                let u = Tensor::new(phi.shape().to_vec(), data)?;
                if let Some(perp) = perpendicular_direction(phi, &u) {
                    let unit = perp.scale(1.0 / perp.norm_l2());
                    return Ok(shifted(xi, &unit, rng.random_range(-delta2..=delta2)));
                }
            }
            Err(Error::degenerate(
                "no perpendicular direction after repeated draws",
            ))
        })
        .collect()
}

/// One regularizer term: the student is asked to predict `soft_target`
/// (the teacher at `xⁱ`) at `input` (`xᵖ`).
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub input: Tensor,
    pub soft_target: Vec<f64>,
    pub seed_instance: usize,
    pub delta1: f64,
    pub delta2: f64,
    /// Unclipped `xⁱ − x`.
    pub along: Tensor,
    /// Unclipped `xᵖ − xⁱ`.
    pub across: Tensor,
    /// The explanation both shifts were derived from.
    pub direction: Arc<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGeometry {
    /// `|‖xⁱ − x‖ − |δ₁||`
    pub shift_error: f64,
    /// `|⟨xᵖ − xⁱ, φ⟩| / (‖xᵖ − xⁱ‖ ‖φ‖)`, zero for a zero shift.
    pub orthogonality: f64,
}

impl PairGeometry {
    pub fn holds(&self, delta1: f64) -> bool {
        self.shift_error <= SHIFT_TOL * delta1.abs().max(1.0) && self.orthogonality <= ORTHOGONALITY_TOL
    }
}

impl AugmentedPair {
    pub fn geometry(&self) -> PairGeometry {
        let denom = self.across.norm_l2() * self.direction.norm_l2();
        PairGeometry {
            shift_error: (self.along.norm_l2() - self.delta1.abs()).abs(),
            orthogonality: if denom == 0.0 {
                0.0
            } else {
                self.across.dot(&self.direction).abs() / denom
            },
        }
    }

    pub fn satisfies_invariants(&self) -> bool {
        self.geometry().holds(self.delta1)
    }
}

/// Pairs for one seed instance, or `None` if its explanation vanished.
#[allow(clippy::too_many_arguments)]
pub fn augment_instance(
    teacher: &Network,
    direction_net: &Network,
    x: &Tensor,
    class: usize,
    instance: usize,
    cfg: &AtexConfig,
    seed: u64,
) -> Result<Option<Vec<AugmentedPair>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = smoothgrad(direction_net, x, class, &cfg.smoothgrad, rng.next_u64())?.values;
    let along = match sample_along_explanation(x, &phi, cfg.delta1, cfg.n_i, &mut rng) {
        Ok(a) => a,
        Err(Error::Degenerate(_)) => {
            log::warn!("instance {instance}: zero explanation, skipped");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let direction = Arc::new(phi);
    let keep = 1.0 - cfg.max_clip_loss;
    let mut pairs = Vec::with_capacity(cfg.n_i * cfg.n_p);
    for xi in along {
        // Draw the perpendicular samples even for dropped points so the
        // random stream does not depend on clipping.
        let perps = sample_perpendicular(&xi.point, &direction, cfg.delta2, cfg.n_p, &mut rng)?;
        if xi.kept < keep {
            continue;
        }
        let soft_target = teacher.predict(&xi.point)?;
        for xp in perps.into_iter().filter(|p| p.kept >= keep) {
            pairs.push(AugmentedPair {
                input: xp.point,
                soft_target: soft_target.clone(),
                seed_instance: instance,
                delta1: xi.step,
                delta2: xp.step,
                along: xi.shift.clone(),
                across: xp.shift,
                direction: Arc::clone(&direction),
            });
        }
    }
    Ok(Some(pairs))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub seed_instances: usize,
    pub skipped_instances: usize,
    pub pairs: usize,
    /// Pairs (or whole along-samples, counted as `n_p` pairs) lost to clipping.
    pub dropped_pairs: usize,
    pub geometry_violations: usize,
    pub mean_objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtexReport {
    pub iterations: Vec<IterationStats>,
}

fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    for &p in parts {
        rng = ChaCha8Rng::seed_from_u64(rng.next_u64() ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    rng.next_u64()
}

/// Runs ATEX from `teacher` on `data`. `observer` sees the student before
/// the first iteration (index 0) and after each iteration.
pub fn atex_finetune(
    teacher: &Network,
    data: &LabeledDataset,
    cfg: &AtexConfig,
    mut observer: impl FnMut(usize, &Network, &[AugmentedPair]) -> Result<()>,
) -> Result<(Network, AtexReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("ATEX needs a non-empty dataset"));
    }
    let teacher_probs: Vec<Vec<f64>> = data
        .images
        .par_iter()
        .map(|x| teacher.predict(x))
        .collect::<Result<_>>()?;
    let classes: Vec<usize> = teacher_probs.iter().map(|p| argmax(p)).collect();

    let mut student = teacher.clone();
    let mut fitter = Fitter::new(cfg.adam, &student)?;
    let mut report = AtexReport::default();
    observer(0, &student, &[])?;

    for iteration in 1..=cfg.iterations {
        let mut seeds: Vec<usize> = (0..data.len()).collect();
        if let Some(n) = cfg.instances_per_iteration {
            seeds.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[iteration as u64],
            )));
            seeds.truncate(n);
        }
        let mut stats = IterationStats {
            iteration,
            seed_instances: seeds.len(),
            ..Default::default()
        };
        let mut objective_sum = 0.0;
        let mut last_pairs = Vec::new();
        let mut plan = BatchPlan::new(cfg.batch_size, derive_seed(cfg.seed, &[iteration as u64, 1]))?;
        for epoch in 0..cfg.epochs {
            let direction_net = match cfg.directions {
                DirectionSource::Student => student.clone(),
                DirectionSource::Teacher => teacher.clone(),
            };
            for batch in plan.next_epoch(seeds.len()) {
                let members: Vec<usize> = batch.iter().map(|&b| seeds[b]).collect();
                let pairs: Vec<Option<Vec<AugmentedPair>>> = if cfg.alpha > 0.0 {
                    members
                        .par_iter()
                        .map(|&i| {
                            let seed = derive_seed(cfg.seed, &[iteration as u64, epoch as u64, i as u64]);
                            augment_instance(
                                teacher,
                                &direction_net,
                                &data.images[i],
                                classes[i],
                                i,
                                cfg,
                                seed,
                            )
                        })
                        .collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                let pairs: Vec<AugmentedPair> = pairs
                    .into_iter()
                    .filter_map(|p| {
                        if p.is_none() {
                            stats.skipped_instances += 1;
                        }
                        p
                    })
                    .flatten()
                    .collect();
                stats.pairs += pairs.len();
                stats.geometry_violations += pairs.iter().filter(|p| !p.satisfies_invariants()).count();

                let mut examples: Vec<SoftExample> = members
                    .iter()
                    .map(|&i| SoftExample {
                        input: &data.images[i],
                        target: &teacher_probs[i],
                        weight: 1.0,
                    })
                    .collect();
                examples.extend(pairs.iter().map(|p| SoftExample {
                    input: &p.input,
                    target: &p.soft_target,
                    weight: cfg.alpha,
                }));
                objective_sum += fitter
                    .step(&mut student, &examples, members.len() as f64)
                    .map_err(|e| Error::Training {
                        epoch: iteration,
                        message: format!("ATEX iteration {iteration}: {e}"),
                    })?
                    * members.len() as f64;
                last_pairs = pairs;
            }
        }
        if cfg.alpha > 0.0 {
            let expected = (stats.seed_instances - stats.skipped_instances) * cfg.n_i * cfg.n_p * cfg.epochs;
            stats.dropped_pairs = expected.saturating_sub(stats.pairs);
        }
        stats.mean_objective = objective_sum / (seeds.len() * cfg.epochs).max(1) as f64;
        log::info!(
            "ATEX iteration {iteration}: objective {:.4}, {} pairs ({} dropped)",
            stats.mean_objective,
            stats.pairs,
            stats.dropped_pairs
        );
        observer(iteration, &student, &last_pairs)?;
        report.iterations.push(stats);
    }
    Ok((student, report))
}

/// Per-iteration telemetry of an ATEX run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub clean_acc: f64,
    pub mean_stability: f64,
    pub mean_rank_corr_under_attack: f64,
}

/// Fixed probe used to measure a model during ATEX.
#[derive(Clone, Debug)]
pub struct TelemetryProbe {
    pub accuracy_set: LabeledDataset,
    pub probe: Vec<Tensor>,
    pub stability: StabilityConfig,
    pub attack: ManipulationConfig,
}

impl TelemetryProbe {
    pub fn row(&self, iteration: usize, net: &Network) -> Result<TelemetryRow> {
        let clean_acc = accuracy(net, &self.accuracy_set)?;
        let per_instance: Vec<(Option<f64>, Option<f64>)> = self
            .probe
            .par_iter()
            .map(|x| {
                let class = net.predict_class(x)?;
                let stab = match stability(&ClassGradient::logit(net, class), x, &self.stability) {
                    Ok(r) => Some(r.value),
                    Err(Error::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                };
                let attacked = match manipulate(net, x, &self.attack) {
                    Ok(r) => r,
                    Err(Error::Degenerate(_)) => return Ok((stab, None)),
                    Err(e) => return Err(e),
                };
                let before = vanilla_gradient(net, x, class)?.values;
                let after = vanilla_gradient(net, &attacked.x_adv, class)?.values;
                Ok((stab, spearman(&before, &after)?))
            })
            .collect::<Result<_>>()?;
        Ok(TelemetryRow {
            iteration,
            clean_acc,
            mean_stability: mean(per_instance.iter().filter_map(|p| p.0)),
            mean_rank_corr_under_attack: mean(per_instance.iter().filter_map(|p| p.1)),
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn write_telemetry_csv(path: impl AsRef<std::path::Path>, rows: &[TelemetryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
