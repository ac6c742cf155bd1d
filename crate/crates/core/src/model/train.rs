use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{one_hot, Adam, AdamConfig, Network, NetworkSpec};
use crate::data::{BatchPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// One weighted soft-target cross-entropy term.
#[derive(Clone, Copy, Debug)]
pub struct SoftExample<'a> {
    pub input: &'a Tensor,
    pub target: &'a [f64],
    pub weight: f64,
}

/// Adam state bound to one network's parameter layout.
pub struct Fitter {
    adam: Adam,
}

impl Fitter {
    pub fn new(cfg: AdamConfig, net: &Network) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(cfg, net.params())?,
        })
    }

    /// One optimizer step on `sum_i w_i CE(net(x_i), t_i) / normalizer`.
    /// Returns the objective evaluated before the step.
    pub fn step(&mut self, net: &mut Network, batch: &[SoftExample<'_>], normalizer: f64) -> Result<f64> {
        if !(normalizer > 0.0) {
            return Err(Error::config("batch normalizer must be positive"));
        }
        let mut acc: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut total = 0.0;
        for ex in batch {
            if ex.weight == 0.0 {
                continue;
            }
            let (loss, _, grads) = net.loss_param_gradients(ex.input, ex.target)?;
            total += ex.weight * loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign_scaled(ex.weight / normalizer, g);
            }
        }
        let objective = total / normalizer;
        if !objective.is_finite() || acc.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("training objective is not finite"));
        }
        self.adam.step(net.params_mut(), &acc);
        Ok(objective)
    }
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("accuracy of an empty dataset is undefined"));
    }
    let correct: Vec<bool> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| Ok(argmax(&net.logits(x)?) == y))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

/// Trains a freshly initialized network with Adam on cross-entropy.
pub fn train(
    spec: NetworkSpec,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut net = Network::init(spec, cfg.seed)?;
    let mut fitter = Fitter::new(cfg.adam, &net)?;
    let mut plan = BatchPlan::new(cfg.batch_size, cfg.seed)?;
    let targets: Vec<Vec<f64>> = train_set
        .labels
        .iter()
        .map(|&y| one_hot(y, net.num_classes()))
        .collect();

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in plan.next_epoch(train_set.len()) {
            let examples: Vec<SoftExample> = batch
                .iter()
                .map(|&i| SoftExample {
                    input: &train_set.images[i],
                    target: &targets[i],
                    weight: 1.0,
                })
                .collect();
            let loss = fitter
                .step(&mut net, &examples, examples.len() as f64)
                .map_err(|e| Error::Training {
                    epoch,
                    message: e.to_string(),
                })?;
            sum += loss * examples.len() as f64;
        }
        let mean = sum / train_set.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }

    let train_accuracy = accuracy(&net, train_set)?;
    let test_accuracy = test_set.map(|t| accuracy(&net, t)).transpose()?;
    net.meta.epochs = cfg.epochs;
    net.meta.seed = cfg.seed;
    net.meta.dataset = train_set.name.clone();
    net.meta.train_accuracy = Some(train_accuracy);
    net.meta.test_accuracy = test_accuracy;
    Ok((
        net,
        TrainReport {
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    ))
}
