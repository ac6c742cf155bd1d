//! Explanation manipulation: perturb `x` inside an ℓ∞ ball so that its
//! saliency map moves toward (targeted) or away from (untargeted) a feature
//! set, while the prediction stays put.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{smoothgrad, ClassGradient, Explainer, SmoothGradConfig};
use crate::metrics::top_k_indices;
use crate::model::{ClassScore, Network};
use crate::tensor::{argmax, softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Raise the importance share of the feature set.
    Targeted,
    /// Suppress the importance share of the feature set.
    Untargeted,
}

impl Mode {
    fn sign(self) -> f64 {
        match self {
            Mode::Targeted => 1.0,
            Mode::Untargeted => -1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Mode::Targeted => "targeted",
            Mode::Untargeted => "untargeted",
        }
    }
}

/// How the attacked feature set is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSet {
    /// Flat indices into the input.
    Explicit { indices: Vec<usize> },
    /// The `m` largest-magnitude features of the clean SmoothGrad map.
    TopM { m: usize },
    /// A `size × size` pixel square at a seeded random position.
    RandomRegion { size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationConfig {
    pub mode: Mode,
    pub features: FeatureSet,
    /// ℓ∞ radius of the perturbation.
    pub epsilon: f64,
    /// Largest allowed change of the predicted-class probability.
    pub drift_bound: f64,
    /// Ascent step; `None` means `epsilon / 10`.
    pub step: Option<f64>,
    pub iterations: usize,
    pub hvp_step: f64,
    /// Map used to pick `TopM` features.
    pub selection: SmoothGradConfig,
    pub seed: u64,
}

impl ManipulationConfig {
    /// Defaults for `mode`: top-50 clean SmoothGrad pixels when untargeted,
    /// a random 5×5 region when targeted.
    pub fn new(mode: Mode, epsilon: f64) -> Self {
        let features = match mode {
            Mode::Targeted => FeatureSet::RandomRegion { size: 5 },
            Mode::Untargeted => FeatureSet::TopM { m: 50 },
        };
        Self {
            mode,
            features,
            epsilon,
            drift_bound: 0.1,
            step: None,
            iterations: 100,
            hvp_step: 1e-3,
            selection: SmoothGradConfig::default(),
            seed: 0,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("drift_bound", self.drift_bound),
            ("step", self.step_size()),
            ("hvp_step", self.hvp_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "manipulation {name} must be positive, got {v}"
                )));
            }
        }
        match &self.features {
            FeatureSet::Explicit { indices } if indices.is_empty() => {
                Err(Error::config("manipulation feature set is empty"))
            }
            FeatureSet::TopM { m: 0 } | FeatureSet::RandomRegion { size: 0 } => {
                Err(Error::config("manipulation feature set is empty"))
            }
            FeatureSet::TopM { .. } => self.selection.validate(),
            _ => Ok(()),
        }
    }
}

/// `±Σ_{t∈T} |φ_t| / ‖φ‖₁`, positive for targeted mode.
pub fn objective_d(phi: &Tensor, targets: &[usize], mode: Mode) -> Result<f64> {
    let l1 = phi.norm_l1();
    if l1 == 0.0 {
        return Err(Error::degenerate("saliency map is identically zero"));
    }
    let share: f64 = targets.iter().map(|&t| phi.data()[t].abs()).sum();
    Ok(mode.sign() * share / l1)
}

/// `∂d/∂φ`, taking `sign(0) = 0` as the subgradient of `|·|`.
pub fn objective_gradient(phi: &Tensor, targets: &[usize], mode: Mode) -> Result<Tensor> {
    let l1 = phi.norm_l1();
    if l1 == 0.0 {
        return Err(Error::degenerate("saliency map is identically zero"));
    }
    let share: f64 = targets.iter().map(|&t| phi.data()[t].abs()).sum();
    let mut in_t = vec![false; phi.len()];
    for &t in targets {
        in_t[t] = true;
    }
    let s = mode.sign();
    let sign = phi.sign();
    let data = sign
        .data()
        .iter()
        .zip(&in_t)
        .map(|(&sg, &member)| s * (f64::from(u8::from(member)) * sg / l1 - share * sg / (l1 * l1)))
        .collect();
    Tensor::new(phi.shape().to_vec(), data)
}

/// Central-difference Hessian-vector product of the function whose gradient
/// `grad` computes: `(∇f(x + h v̂) − ∇f(x − h v̂)) ‖v‖ / (2h)`.
pub fn hvp_fn(grad: &dyn Explainer, x: &Tensor, v: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::config(format!("hvp step must be positive, got {h}")));
    }
    v.ensure_shape("hvp direction", x.shape())?;
    let norm = v.norm_l2();
    if norm == 0.0 {
        return Err(Error::degenerate("hvp direction is the zero vector"));
    }
    let unit = v.scale(1.0 / norm);
    let plus = grad.explain(&x.axpy(h, &unit))?;
    let minus = grad.explain(&x.axpy(-h, &unit))?;
    Ok(plus.sub(&minus).scale(norm / (2.0 * h)))
}

/// Hessian of the class-`class` logit applied to `v`.
pub fn hvp(net: &Network, x: &Tensor, class: usize, v: &Tensor, h: f64) -> Result<Tensor> {
    hvp_fn(&ClassGradient::logit(net, class), x, v, h)
}

fn image_dims(x: &Tensor) -> (usize, usize) {
    match x.shape() {
        [.., h, w] => (*h, *w),
        [n] => (1, *n),
        [] => (1, 1),
    }
}

/// Resolves the configured feature set for one input.
pub fn resolve_features(
    net: &Network,
    x: &Tensor,
    class: usize,
    cfg: &ManipulationConfig,
) -> Result<Vec<usize>> {
    let targets = match &cfg.features {
        FeatureSet::Explicit { indices } => indices.clone(),
        FeatureSet::TopM { m } => {
            let map = smoothgrad(net, x, class, &cfg.selection, cfg.seed)?;
            top_k_indices(map.values.data(), (*m).min(x.len()))
        }
        FeatureSet::RandomRegion { size } => {
            let (h, w) = image_dims(x);
            if *size > h || *size > w {
                return Err(Error::config(format!(
                    "{size}x{size} region does not fit a {h}x{w} image"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            (top..top + size)
                .flat_map(|r| (left..left + size).map(move |c| r * w + c))
                .collect()
        }
    };
    if let Some(&bad) = targets.iter().find(|&&t| t >= x.len()) {
        return Err(Error::config(format!(
            "feature index {bad} outside input of {} features",
            x.len()
        )));
    }
    Ok(targets)
}

/// Clamps `candidate` into `[x − ε, x + ε] ∩ [0, 1]` so that `|x' − x| ≤ ε`
/// holds exactly in floating point.
pub fn project(x: &Tensor, candidate: &Tensor, eps: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(&x0, &c)| {
            let mut v = c.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
            while v - x0 > eps {
                v = v.next_down();
            }
            while x0 - v > eps {
                v = v.next_up();
            }
            v
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("projection of finite values is finite")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    /// `d` at this iterate; `None` if its map vanished.
    pub objective: Option<f64>,
    /// Best `d` over feasible iterates so far.
    pub best_objective: f64,
    pub linf: f64,
    pub drift: f64,
    pub class_preserved: bool,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManipulationResult {
    /// Best feasible iterate (the clean input if nothing improved).
    pub x_adv: Tensor,
    pub class: usize,
    pub targets: Vec<usize>,
    pub initial_objective: f64,
    pub objective: f64,
    pub trace: Vec<TraceStep>,
    /// `‖x' − x‖∞`
    pub linf: f64,
    /// `|p_c(x') − p_c(x)|`
    pub drift: f64,
    pub class_preserved: bool,
    pub feasible: bool,
    /// Whether some feasible iterate beat the clean objective.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationRecord {
    pub instance: usize,
    pub mode: Mode,
    pub epsilon: f64,
    pub class: usize,
    pub linf: f64,
    pub drift: f64,
    pub class_preserved: bool,
    pub feasible: bool,
    pub improved: bool,
    pub initial_objective: f64,
    pub objective: f64,
    pub best_trace: Vec<f64>,
}

impl ManipulationResult {
    pub fn record(&self, instance: usize, cfg: &ManipulationConfig) -> ManipulationRecord {
        ManipulationRecord {
            instance,
            mode: cfg.mode,
            epsilon: cfg.epsilon,
            class: self.class,
            linf: self.linf,
            drift: self.drift,
            class_preserved: self.class_preserved,
            feasible: self.feasible,
            improved: self.improved,
            initial_objective: self.initial_objective,
            objective: self.objective,
            best_trace: self.trace.iter().map(|s| s.best_objective).collect(),
        }
    }
}

/// Iterated sign ascent on `d` through finite-difference HVPs, keeping the
/// best iterate that satisfies both the radius and prediction constraints.
pub fn manipulate(net: &Network, x: &Tensor, cfg: &ManipulationConfig) -> Result<ManipulationResult> {
    cfg.validate()?;
    let logits0 = net.logits(x)?;
    let class = argmax(&logits0);
    let (_, phi0) = net.score_gradient(x, class, ClassScore::Logit)?;
    let p0 = softmax(&logits0)[class];
    let targets = resolve_features(net, x, class, cfg)?;
    let d0 = objective_d(&phi0, &targets, cfg.mode)?;
    let eta = cfg.step_size();

    let mut best = (x.clone(), d0, 0.0, 0.0);
    let mut improved = false;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut current = x.clone();
    let mut phi = phi0;
    for iteration in 1..=cfg.iterations {
        let Ok(v) = objective_gradient(&phi, &targets, cfg.mode) else {
            break;
        };
        if v.norm_l2() == 0.0 {
            break;
        }
        let hv = hvp(net, &current, class, &v, cfg.hvp_step)?;
        current = project(x, &current.axpy(eta, &hv.sign()), cfg.epsilon);
        let (logits, g) = net.score_gradient(&current, class, ClassScore::Logit)?;
        phi = g;
        let drift = (softmax(&logits)[class] - p0).abs();
        let linf = current.sub(x).norm_linf();
        let class_preserved = argmax(&logits) == class;
        let objective = objective_d(&phi, &targets, cfg.mode).ok();
        let feasible = class_preserved && drift <= cfg.drift_bound && linf <= cfg.epsilon;
        if let (true, Some(d)) = (feasible, objective) {
            if d > best.1 {
                best = (current.clone(), d, linf, drift);
                improved = true;
            }
        }
        trace.push(TraceStep {
            iteration,
            objective,
            best_objective: best.1,
            linf,
            drift,
            class_preserved,
            feasible,
        });
    }

    let (x_adv, objective, linf, drift) = best;
    Ok(ManipulationResult {
        x_adv,
        class,
        targets,
        initial_objective: d0,
        objective,
        trace,
        linf,
        drift,
        class_preserved: true,
        feasible: true,
        improved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn objective_examples() {
        let phi = t(&[1.0, 1.0, 2.0]);
        assert_eq!(objective_d(&phi, &[2], Mode::Targeted).unwrap(), 0.5);
        assert_eq!(objective_d(&phi, &[2], Mode::Untargeted).unwrap(), -0.5);
        let any = t(&[0.3, -4.0, 1.1]);
        assert!((objective_d(&any, &[0, 1, 2], Mode::Targeted).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            objective_d(&t(&[0.0, 0.0]), &[0], Mode::Targeted),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let phi = t(&[0.7, -1.3, 0.4, 2.1, -0.2]);
        let targets = [1, 3];
        for mode in [Mode::Targeted, Mode::Untargeted] {
            let g = objective_gradient(&phi, &targets, mode).unwrap();
            let fd =
                crate::tensor::finite_difference_gradient(|p| objective_d(p, &targets, mode), &phi, 1e-6)
                    .unwrap();
            for (a, b) in g.data().iter().zip(fd.data()) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn hvp_of_quadratic_is_exact() {
        // f(x) = ½ xᵀAx, ∇f = Ax.
        let a = [[2.0, 0.5], [0.5, -1.0]];
        let grad = |x: &Tensor| {
            let d = x.data();
            Tensor::vector(vec![
                a[0][0] * d[0] + a[0][1] * d[1],
                a[1][0] * d[0] + a[1][1] * d[1],
            ])
        };
        let v = t(&[0.3, -2.0]);
        let hv = hvp_fn(&grad, &t(&[1.0, 4.0]), &v, 1e-3).unwrap();
        assert!((hv.data()[0] - (2.0 * 0.3 - 0.5 * 2.0)).abs() < 1e-8);
        assert!((hv.data()[1] - (0.5 * 0.3 + 2.0)).abs() < 1e-8);
    }

    #[test]
    fn hvp_of_linear_model_is_zero() {
        let net = Network::init(NetworkSpec::mlp(4, &[], 10), 1).unwrap();
        let hv = hvp(
            &net,
            &t(&[0.1, 0.2, 0.3, 0.4]),
            5,
            &t(&[1.0, -1.0, 0.5, 2.0]),
            1e-3,
        )
        .unwrap();
        assert!(hv.norm_linf() < 1e-9);
    }

    #[test]
    fn hvp_rejects_zero_direction_and_bad_step() {
        let id = |x: &Tensor| Ok(x.clone());
        assert!(matches!(
            hvp_fn(&id, &t(&[1.0]), &t(&[0.0]), 1e-3),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            hvp_fn(&id, &t(&[1.0]), &t(&[1.0]), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projection_is_exact_at_the_boundary() {
        let x = Tensor::vector((0..100).map(|i| i as f64 / 99.0).collect()).unwrap();
        for eps in [0.02, 0.04, 0.08, 0.1, 1.0 / 3.0] {
            let far = x.map(|v| v + 1.0);
            let near = x.map(|v| v - 1.0);
            for p in [project(&x, &far, eps), project(&x, &near, eps)] {
                assert!(p.sub(&x).norm_linf() <= eps);
                assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    fn small_net() -> Network {
        let mut net = Network::init(NetworkSpec::mlp(16, &[12], 10), 7).unwrap();
        for p in net.params_mut() {
            *p = p.scale(2.0);
        }
        net
    }

    fn x16() -> Tensor {
        Tensor::vector(
            (0..16)
                .map(|i| 0.2 + 0.6 * ((i * 7) % 16) as f64 / 15.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_return_the_input() {
        let mut cfg = ManipulationConfig::new(Mode::Untargeted, 0.1);
        cfg.iterations = 0;
        cfg.features = FeatureSet::TopM { m: 4 };
        cfg.selection.samples = 4;
        let r = manipulate(&small_net(), &x16(), &cfg).unwrap();
        assert_eq!(r.x_adv, x16());
        assert_eq!(r.objective, r.initial_objective);
        assert!(r.feasible && !r.improved);
    }

    #[test]
    fn linear_model_cannot_be_manipulated() {
        let net = Network::init(NetworkSpec::mlp(16, &[], 10), 2).unwrap();
        let mut cfg = ManipulationConfig::new(Mode::Targeted, 0.1);
        cfg.features = FeatureSet::Explicit {
            indices: vec![0, 1, 2],
        };
        cfg.iterations = 5;
        let r = manipulate(&net, &x16(), &cfg).unwrap();
        assert!(!r.improved);
        assert_eq!(r.objective, r.initial_objective);
    }

    #[test]
    fn attack_respects_constraints_and_best_trace_is_monotone() {
        let net = small_net();
        for mode in [Mode::Targeted, Mode::Untargeted] {
            let mut cfg = ManipulationConfig::new(mode, 0.1);
            cfg.features = FeatureSet::Explicit {
                indices: vec![0, 5, 9],
            };
            cfg.iterations = 20;
            let r = manipulate(&net, &x16(), &cfg).unwrap();
            assert!(r.linf <= cfg.epsilon);
            assert!(r.drift <= cfg.drift_bound);
            assert_eq!(net.predict_class(&r.x_adv).unwrap(), r.class);
            assert!(r.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(r
                .trace
                .windows(2)
                .all(|w| w[1].best_objective >= w[0].best_objective));
            assert!(r.improved, "{mode:?} made no progress");
            assert!(r.objective > r.initial_objective);
        }
    }

    #[test]
    fn random_region_is_a_square_inside_the_image() {
        let net = Network::init(NetworkSpec::small_cnn(), 0).unwrap();
        let x = Tensor::filled(&[1, 28, 28], 0.5);
        let mut cfg = ManipulationConfig::new(Mode::Targeted, 0.1);
        cfg.seed = 42;
        let idx = resolve_features(&net, &x, 0, &cfg).unwrap();
        assert_eq!(idx.len(), 25);
        let (r0, c0) = (idx[0] / 28, idx[0] % 28);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!((i / 28, i % 28), (r0 + k / 5, c0 + k % 5));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ManipulationConfig::new(Mode::Targeted, 0.0);
        assert!(cfg.validate().is_err());
        cfg.epsilon = 0.1;
        cfg.features = FeatureSet::Explicit { indices: vec![] };
        assert!(cfg.validate().is_err());
    }
}
