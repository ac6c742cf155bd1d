//! Experiment pipeline: a JSON configuration drives staged runs (train,
//! ATEX, attacks, adversarial fine-tuning, evaluation, report) whose
//! artifacts live in one output directory.

mod report;
mod stages;

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advrob::AdvConfig;
use crate::atex::{AtexConfig, DirectionSource};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::explain::{SmoothGradConfig, StabilityConfig};
use crate::model::{AdamConfig, ClassScore, TrainConfig};
use crate::xmanip::{FeatureSet, ManipulationConfig, Mode};

pub use report::{
    read_report_table, smoothness_study, ReportRow, SmoothnessLine, SmoothnessRow, SmoothnessSummary,
    REPORT_TABLE,
};
pub use stages::{
    cmd_advtrain, cmd_atex, cmd_attack_explain, cmd_attack_fgsm, cmd_eval, cmd_report, cmd_train, run_all,
    AdvRecord, AttackCell, AttackInstance, AttackSummary, EvalSummary, FgsmSummary, ModelRobustness, Stage,
    TrainSummary,
};

/// Seed for per-instance work, independent of scheduling order.
pub(crate) fn instance_seed(base: u64, instance: usize) -> u64 {
    ChaCha8Rng::seed_from_u64(base ^ (instance as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64()
}

/// Process exit status for an error: 2 validation, 3 missing dependency,
/// 4 numeric failure, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Config(_) | Error::Json(_) => 2,
        Error::Dependency { .. } => 3,
        Error::Numeric(_) | Error::Training { .. } | Error::Degenerate(_) => 4,
        _ => 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Softplus sharpness.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            beta: 1.0,
            epochs: 5,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub modes: Vec<Mode>,
    pub iterations: usize,
    /// Step as a fraction of ε₁.
    pub step_fraction: f64,
    pub drift_bound: f64,
    pub hvp_step: f64,
    /// Untargeted: number of top SmoothGrad pixels suppressed.
    pub top_m: usize,
    /// Targeted: side of the random square region.
    pub region_size: usize,
    pub selection_samples: usize,
    pub selection_sigma: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.02, 0.04, 0.08],
            modes: vec![Mode::Untargeted, Mode::Targeted],
            iterations: 100,
            step_fraction: 0.1,
            drift_bound: 0.1,
            hvp_step: 1e-3,
            top_m: 50,
            region_size: 5,
            selection_samples: 100,
            selection_sigma: 0.1,
        }
    }
}

impl AttackSection {
    pub fn manipulation(&self, mode: Mode, epsilon: f64, seed: u64) -> ManipulationConfig {
        ManipulationConfig {
            mode,
            features: match mode {
                Mode::Untargeted => FeatureSet::TopM { m: self.top_m },
                Mode::Targeted => FeatureSet::RandomRegion {
                    size: self.region_size,
                },
            },
            epsilon,
            drift_bound: self.drift_bound,
            step: Some(self.step_fraction * epsilon),
            iterations: self.iterations,
            hvp_step: self.hvp_step,
            selection: SmoothGradConfig {
                samples: self.selection_samples,
                sigma: self.selection_sigma,
                score: ClassScore::Logit,
            },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtexSection {
    /// ℓ₂ length of shifts along the explanation; `None` uses
    /// `radius_scale · max(attack.epsilons)`.
    pub delta1: Option<f64>,
    /// ℓ₂ length of perpendicular shifts; same default as `delta1`.
    pub delta2: Option<f64>,
    pub radius_scale: f64,
    pub n_i: usize,
    pub n_p: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub instances_per_iteration: Option<usize>,
    pub smoothgrad_samples: usize,
    pub smoothgrad_sigma: f64,
    pub directions: DirectionSource,
    pub max_clip_loss: f64,
}

impl Default for AtexSection {
    fn default() -> Self {
        let base = AtexConfig::new(1.0);
        Self {
            delta1: None,
            delta2: None,
            radius_scale: 1.0,
            n_i: base.n_i,
            n_p: base.n_p,
            alpha: base.alpha,
            iterations: base.iterations,
            epochs: base.epochs,
            batch_size: base.batch_size,
            adam: base.adam,
            instances_per_iteration: None,
            smoothgrad_samples: base.smoothgrad.samples,
            smoothgrad_sigma: base.smoothgrad.sigma,
            directions: base.directions,
            max_clip_loss: base.max_clip_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvSection {
    pub epsilon: f64,
    pub signed: bool,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// ATEX iterations whose checkpoints are adversarially fine-tuned.
    pub atex_iterations: Vec<usize>,
    /// Independent fine-tuning repetitions per checkpoint.
    pub repeats: usize,
    /// Test instances used for robust accuracy; `None` uses the whole split.
    pub eval_size: Option<usize>,
}

impl Default for AdvSection {
    fn default() -> Self {
        let base = AdvConfig::default();
        Self {
            epsilon: base.epsilon,
            signed: base.signed,
            samples: base.samples,
            epochs: base.epochs,
            batch_size: base.batch_size,
            adam: base.adam,
            atex_iterations: vec![0, 5],
            repeats: 1,
            eval_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetrySection {
    pub enabled: bool,
    pub probe_size: usize,
    pub accuracy_size: usize,
    pub stability: StabilityConfig,
    pub attack_epsilon: f64,
}

impl Default for TelemetrySection {
    fn default() -> Self {
        Self {
            enabled: false,
            probe_size: 20,
            accuracy_size: 1000,
            stability: StabilityConfig::default(),
            attack_epsilon: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// First correctly classified test instances used by attacks and
    /// evaluation.
    pub size: usize,
    pub top_k: usize,
    /// SmoothGrad reference for the smoothness comparison.
    pub smoothgrad_samples: usize,
    pub smoothgrad_sigma: f64,
    /// Number of instances whose maps are written as PGM images.
    pub saliency_images: usize,
    /// Instances checked for the explanation/attack-direction identity.
    pub theorem_instances: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            size: 200,
            top_k: crate::metrics::DEFAULT_TOP_K,
            smoothgrad_samples: 100,
            smoothgrad_sigma: 0.1,
            saliency_images: 8,
            theorem_instances: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory holding `mnist/` and `fashion/`; `None` consults
    /// `XSTAB_DATA_DIR`, then `./data`.
    pub data_dir: Option<PathBuf>,
    /// Class-stratified training subset size; `None` uses every example.
    pub train_size: Option<usize>,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub atex: AtexSection,
    pub adv: AdvSection,
    pub telemetry: TelemetrySection,
    pub eval: EvalSection,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            train_size: Some(10_000),
            model: ModelSection::default(),
            attack: AttackSection::default(),
            atex: AtexSection::default(),
            adv: AdvSection::default(),
            telemetry: TelemetrySection::default(),
            eval: EvalSection::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_string(),
        message: message.into(),
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be a positive number, got {v}")))
    }
}

fn at_least_one(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(invalid(path, "must be at least 1"))
    } else {
        Ok(())
    }
}

/// Re-labels a library config error with the config path it came from.
fn under(path: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(m) => invalid(path, m),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().to_string())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.train_size {
            at_least_one("train_size", n)?;
        }
        positive("model.beta", self.model.beta)?;
        at_least_one("model.batch_size", self.model.batch_size)?;
        under("model.adam", self.model.adam.validate())?;

        let a = &self.attack;
        if a.epsilons.is_empty() {
            return Err(invalid("attack.epsilons", "must list at least one radius"));
        }
        for (i, &e) in a.epsilons.iter().enumerate() {
            positive(&format!("attack.epsilons[{i}]"), e)?;
        }
        if a.modes.is_empty() {
            return Err(invalid("attack.modes", "must list at least one mode"));
        }
        positive("attack.step_fraction", a.step_fraction)?;
        positive("attack.drift_bound", a.drift_bound)?;
        positive("attack.hvp_step", a.hvp_step)?;
        at_least_one("attack.top_m", a.top_m)?;
        at_least_one("attack.region_size", a.region_size)?;
        at_least_one("attack.selection_samples", a.selection_samples)?;
        if a.region_size > 28 || a.top_m > 784 {
            return Err(invalid("attack", "feature set does not fit a 28x28 image"));
        }
        for &mode in &a.modes {
            under("attack", a.manipulation(mode, a.epsilons[0], 0).validate())?;
        }

        let t = &self.atex;
        if let Some(d) = t.delta1 {
            positive("atex.delta1", d)?;
        }
        if let Some(d) = t.delta2 {
            positive("atex.delta2", d)?;
        }
        positive("atex.radius_scale", t.radius_scale)?;
        if t.instances_per_iteration == Some(0) {
            return Err(invalid("atex.instances_per_iteration", "must be at least 1"));
        }
        under("atex", self.atex_config().validate())?;

        under("adv", self.adv_config(0).validate())?;
        at_least_one("adv.repeats", self.adv.repeats)?;
        if let Some(&bad) = self.adv.atex_iterations.iter().find(|&&i| i > t.iterations) {
            return Err(invalid(
                "adv.atex_iterations",
                format!("iteration {bad} exceeds atex.iterations = {}", t.iterations),
            ));
        }
        if self.adv.eval_size == Some(0) {
            return Err(invalid("adv.eval_size", "must be at least 1"));
        }

        if self.telemetry.enabled {
            at_least_one("telemetry.probe_size", self.telemetry.probe_size)?;
            at_least_one("telemetry.accuracy_size", self.telemetry.accuracy_size)?;
            under("telemetry.stability", self.telemetry.stability.validate())?;
            positive("telemetry.attack_epsilon", self.telemetry.attack_epsilon)?;
        }

        let e = &self.eval;
        at_least_one("eval.size", e.size)?;
        if e.top_k == 0 || e.top_k > 784 {
            return Err(invalid(
                "eval.top_k",
                format!("must lie in 1..=784, got {}", e.top_k),
            ));
        }
        at_least_one("eval.smoothgrad_samples", e.smoothgrad_samples)?;
        if !(e.smoothgrad_sigma >= 0.0 && e.smoothgrad_sigma.is_finite()) {
            return Err(invalid("eval.smoothgrad_sigma", "must be >= 0"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Seed of one pipeline stage, a pure function of the master seed and
    /// the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let tag = crc::Crc::<u64>::new(&crc::CRC_64_XZ).checksum(stage.as_bytes());
        ChaCha8Rng::seed_from_u64(self.seed ^ tag).next_u64()
    }

    pub fn data_root(&self) -> PathBuf {
        match &self.data_dir {
            Some(d) => d.clone(),
            None => crate::data::data_root("data"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: self.model.adam,
            epochs: self.model.epochs,
            batch_size: self.model.batch_size,
            seed: self.stage_seed("train"),
        }
    }

    pub fn atex_config(&self) -> AtexConfig {
        let t = &self.atex;
        let eps = self.attack.epsilons.iter().cloned().fold(0.0, f64::max);
        let default_radius = t.radius_scale * eps;
        AtexConfig {
            delta1: t.delta1.unwrap_or(default_radius),
            delta2: t.delta2.unwrap_or(default_radius),
            n_i: t.n_i,
            n_p: t.n_p,
            alpha: t.alpha,
            iterations: t.iterations,
            epochs: t.epochs,
            adam: t.adam,
            batch_size: t.batch_size,
            instances_per_iteration: t.instances_per_iteration,
            smoothgrad: SmoothGradConfig {
                samples: t.smoothgrad_samples,
                sigma: t.smoothgrad_sigma,
                score: ClassScore::Logit,
            },
            directions: t.directions,
            max_clip_loss: t.max_clip_loss,
            seed: self.stage_seed("atex"),
        }
    }

    /// Adversarial fine-tuning settings for repetition `repeat`.
    pub fn adv_config(&self, repeat: usize) -> AdvConfig {
        let a = &self.adv;
        AdvConfig {
            epsilon: a.epsilon,
            signed: a.signed,
            samples: a.samples,
            epochs: a.epochs,
            adam: a.adam,
            batch_size: a.batch_size,
            seed: self.stage_seed(&format!("advtrain/{repeat}")),
        }
    }

    pub fn smoothness_reference(&self) -> SmoothGradConfig {
        SmoothGradConfig {
            samples: self.eval.smoothgrad_samples,
            sigma: self.eval.smoothgrad_sigma,
            score: ClassScore::Logit,
        }
    }
}
