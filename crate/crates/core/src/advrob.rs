//! FGSM perturbations, the explanation/attack-direction identity, and
//! adversarial fine-tuning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{one_hot, AdamConfig, ClassScore, Fitter, Network, SoftExample};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    /// ℓ∞ attack step.
    pub epsilon: f64,
    pub signed: bool,
    /// Adversarial examples generated from the training data.
    pub samples: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            signed: true,
            samples: 50_000,
            epochs: 1,
            adam: AdamConfig::default(),
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "FGSM epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    /// The loss gradient vanished, so `delta` is zero.
    pub degenerate: bool,
}

/// One FGSM step against cross-entropy with label `y`: `ε·sign(∇ₓL)` when
/// signed, otherwise `∇ₓL` rescaled to ℓ∞ norm `ε`.
pub fn fgsm(net: &Network, x: &Tensor, y: usize, epsilon: f64, signed: bool) -> Result<Perturbation> {
    if y >= net.num_classes() {
        return Err(Error::config(format!("label {y} out of range")));
    }
    let (_, g) = net.loss_input_gradient(x, &one_hot(y, net.num_classes()))?;
    let peak = g.norm_linf();
    if peak == 0.0 {
        return Ok(Perturbation {
            delta: Tensor::zeros(x.shape()),
            degenerate: true,
        });
    }
    let delta = if signed {
        g.sign().scale(epsilon)
    } else {
        g.scale(epsilon / peak)
    };
    Ok(Perturbation {
        delta,
        degenerate: false,
    })
}

/// `clip(x + δ, 0, 1)` for the FGSM perturbation of `(x, y)`.
pub fn adversarial_example(
    net: &Network,
    x: &Tensor,
    y: usize,
    epsilon: f64,
    signed: bool,
) -> Result<Tensor> {
    Ok(x.axpy(1.0, &fgsm(net, x, y, epsilon, signed)?.delta)
        .clamp(0.0, 1.0))
}

fn theorem1_cosine(net: &Network, x: &Tensor, class: usize, score: ClassScore) -> Result<f64> {
    let (_, phi) = net.score_gradient(x, class, score)?;
    // Unsigned FGSM direction toward class `class`, before rescaling.
    let (_, delta) = net.loss_input_gradient(x, &one_hot(class, net.num_classes()))?;
    phi.cosine(&delta.scale(-1.0))
        .ok_or_else(|| Error::degenerate("explanation or attack direction is zero"))
}

/// Cosine between the probability-gradient explanation of class `class` and
/// the negated unsigned FGSM direction for label `class`. Analytically
/// `∇L = −∇p_c / p_c`, so the result is 1 up to rounding.
pub fn check_theorem1(net: &Network, x: &Tensor, class: usize) -> Result<f64> {
    theorem1_cosine(net, x, class, ClassScore::Probability)
}

/// The same cosine with the explanation taken of the logit instead, for
/// which the identity does not hold.
pub fn theorem1_logit_variant(net: &Network, x: &Tensor, class: usize) -> Result<f64> {
    theorem1_cosine(net, x, class, ClassScore::Logit)
}

/// Accuracy on FGSM examples crafted against `net` itself.
pub fn robust_accuracy(net: &Network, data: &LabeledDataset, epsilon: f64, signed: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("robust accuracy of an empty dataset is undefined"));
    }
    let correct: Vec<bool> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| {
            let adv = adversarial_example(net, x, y, epsilon, signed)?;
            Ok(argmax(&net.logits(&adv)?) == y)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvReport {
    pub adversarial_examples: usize,
    pub degenerate_perturbations: usize,
    pub epoch_losses: Vec<f64>,
}

/// FGSM examples of `samples` training instances, generated once against
/// the incoming parameters, mixed with the clean training set for
/// fine-tuning.
pub fn adv_finetune(
    net: &Network,
    train_set: &LabeledDataset,
    cfg: &AdvConfig,
) -> Result<(Network, AdvReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let picks: Vec<usize> = order.iter().cycle().take(cfg.samples).copied().collect();

    let snapshot = net.clone();
    let perturbed: Vec<(Tensor, bool)> = picks
        .par_iter()
        .map(|&i| {
            let p = fgsm(
                &snapshot,
                &train_set.images[i],
                train_set.labels[i],
                cfg.epsilon,
                cfg.signed,
            )?;
            Ok((
                train_set.images[i].axpy(1.0, &p.delta).clamp(0.0, 1.0),
                p.degenerate,
            ))
        })
        .collect::<Result<_>>()?;
    let degenerate = perturbed.iter().filter(|p| p.1).count();

    let classes = net.num_classes();
    let targets: Vec<Vec<f64>> = (0..classes).map(|c| one_hot(c, classes)).collect();
    let inputs: Vec<(&Tensor, usize)> = train_set
        .images
        .iter()
        .zip(train_set.labels.iter().copied())
        .chain(
            perturbed
                .iter()
                .map(|p| &p.0)
                .zip(picks.iter().map(|&i| train_set.labels[i])),
        )
        .collect();

    let mut tuned = net.clone();
    let mut fitter = Fitter::new(cfg.adam, &tuned)?;
    let mut plan = BatchPlan::new(cfg.batch_size, cfg.seed)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in plan.next_epoch(inputs.len()) {
            let examples: Vec<SoftExample> = batch
                .iter()
                .map(|&i| SoftExample {
                    input: inputs[i].0,
                    target: &targets[inputs[i].1],
                    weight: 1.0,
                })
                .collect();
            let loss = fitter
                .step(&mut tuned, &examples, examples.len() as f64)
                .map_err(|e| Error::Training {
                    epoch,
                    message: e.to_string(),
                })?;
            sum += loss * examples.len() as f64;
        }
        epoch_losses.push(sum / inputs.len() as f64);
    }
    Ok((
        tuned,
        AdvReport {
            adversarial_examples: perturbed.len(),
            degenerate_perturbations: degenerate,
            epoch_losses,
        },
    ))
}

/// One point of a robust-accuracy curve over ATEX iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub atex_iteration: usize,
    pub robust_accuracy: f64,
    pub clean_accuracy: f64,
}

pub fn write_robustness_csv(path: impl AsRef<Path>, points: &[RobustnessPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;
    use crate::tensor::softmax;

    fn x() -> Tensor {
        Tensor::vector(vec![0.2, 0.7, 0.4, 0.9, 0.1]).unwrap()
    }

    fn net() -> Network {
        Network::init(NetworkSpec::mlp(5, &[7], 10), 12).unwrap()
    }

    #[test]
    fn signed_fgsm_components_are_plus_minus_epsilon_or_zero() {
        let p = fgsm(&net(), &x(), 3, 0.1, true).unwrap();
        assert!(!p.degenerate);
        assert!(p.delta.data().iter().all(|&v| v == 0.1 || v == -0.1 || v == 0.0));
        assert_eq!(p.delta.norm_linf(), 0.1);
    }

    #[test]
    fn unsigned_fgsm_has_linf_epsilon_and_gradient_direction() {
        let n = net();
        let p = fgsm(&n, &x(), 3, 0.05, false).unwrap();
        assert!((p.delta.norm_linf() - 0.05).abs() < 1e-15);
        let (_, g) = n.loss_input_gradient(&x(), &one_hot(3, 10)).unwrap();
        assert!((p.delta.cosine(&g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_class_linear_softmax_matches_closed_form() {
        // z = W x + b with two classes: ∂CE/∂x = (p - onehot(y))ᵀ W.
        let spec = NetworkSpec::mlp(3, &[], 2);
        let w = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, -0.3, 0.8, 1.5]).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]).unwrap();
        let n = Network::from_params(spec, vec![w.clone(), b]).unwrap();
        let x = Tensor::vector(vec![0.3, 0.6, 0.9]).unwrap();
        let p = softmax(&n.logits(&x).unwrap());
        let expected: Vec<f64> = (0..3)
            .map(|j| (p[0] - 1.0) * w.data()[j] + p[1] * w.data()[3 + j])
            .collect();
        let d = fgsm(&n, &x, 0, 0.1, false).unwrap().delta;
        let e = Tensor::vector(expected).unwrap();
        assert!((d.cosine(&e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_flagged() {
        let n = Network::from_params(
            NetworkSpec::mlp(5, &[], 10),
            vec![Tensor::zeros(&[10, 5]), Tensor::zeros(&[10])],
        )
        .unwrap();
        // Uniform prediction, but the loss gradient is (p − e_y)ᵀW = 0 with W = 0.
        let p = fgsm(&n, &x(), 1, 0.1, true).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.delta.norm_linf(), 0.0);
    }

    #[test]
    fn theorem1_identity_and_its_logit_counterexample() {
        let n = Network::init(NetworkSpec::mlp(5, &[8], 10), 3).unwrap();
        for c in 0..10 {
            assert!(check_theorem1(&n, &x(), c).unwrap() >= 0.999999);
        }
        let logit = theorem1_logit_variant(&n, &x(), 0).unwrap();
        assert!(logit < 0.9999, "{logit}");
    }

    #[test]
    fn attack_direction_scales_inversely_with_probability() {
        // A linear model whose class-0 probability we steer with the bias.
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let mut norms = vec![];
        for bias in [5.0, -2.2] {
            let n = Network::from_params(
                NetworkSpec::mlp(2, &[], 2),
                vec![w.clone(), Tensor::vector(vec![bias, 0.0]).unwrap()],
            )
            .unwrap();
            let p0 = n.predict(&x).unwrap()[0];
            let (_, phi) = n.score_gradient(&x, 0, ClassScore::Probability).unwrap();
            let (_, delta) = n.loss_input_gradient(&x, &one_hot(0, 2)).unwrap();
            assert!((delta.norm_l2() - phi.norm_l2() / p0).abs() < 1e-12);
            assert!(check_theorem1(&n, &x, 0).unwrap() >= 0.999999);
            norms.push((p0, delta.norm_l2() / phi.norm_l2()));
        }
        let ratio = norms[1].1 / norms[0].1;
        assert!((ratio - norms[0].0 / norms[1].0).abs() < 1e-9);
    }

    #[test]
    fn zero_samples_is_plain_fine_tuning() {
        let images = (0..20).map(|i| Tensor::filled(&[5], i as f64 / 20.0)).collect();
        let labels = (0..20).map(|i| usize::from(i >= 10)).collect();
        let data = LabeledDataset::new("ramp", images, labels).unwrap();
        let cfg = AdvConfig {
            samples: 0,
            epochs: 1,
            ..Default::default()
        };
        let (_, report) = adv_finetune(&net(), &data, &cfg).unwrap();
        assert_eq!(report.adversarial_examples, 0);
        assert_eq!(report.epoch_losses.len(), 1);
    }

    #[test]
    fn robustness_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_robustness_csv(
            &path,
            &[RobustnessPoint {
                atex_iteration: 5,
                robust_accuracy: 0.5,
                clean_accuracy: 0.9,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "atex_iteration,robust_accuracy,clean_accuracy\n5,0.5,0.9\n");
    }
}
