//! Gradient saliency maps, relative importance, and explanation stability.

mod export;
mod stability;

pub use export::{map_to_csv_row, write_pgm};
pub use stability::{stability, stability_curve, StabilityConfig, StabilityReport};

use crc::{Crc, CRC_64_XZ};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassScore, Network};
use crate::tensor::Tensor;

/// Anything that produces an explanation (an input-shaped attribution) at a
/// point. Closures over a network and class are the usual implementors.
pub trait Explainer: Sync {
    fn explain(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F> Explainer for F
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    fn explain(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

/// Input gradient of one class score of a network.
#[derive(Clone, Copy, Debug)]
pub struct ClassGradient<'n> {
    pub net: &'n Network,
    pub class: usize,
    pub score: ClassScore,
}

impl<'n> ClassGradient<'n> {
    pub fn logit(net: &'n Network, class: usize) -> Self {
        Self {
            net,
            class,
            score: ClassScore::Logit,
        }
    }
}

impl Explainer for ClassGradient<'_> {
    fn explain(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.score_gradient(x, self.class, self.score)?.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    SmoothGrad,
}

/// Attribution of one class prediction for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub class: usize,
    pub method: Method,
    /// CRC-64 of the source input's bit pattern.
    pub source: u64,
}

/// Content hash identifying an input tensor.
pub fn instance_hash(x: &Tensor) -> u64 {
    let crc = Crc::<u64>::new(&CRC_64_XZ);
    let mut digest = crc.digest();
    for v in x.data() {
        digest.update(&v.to_bits().to_le_bytes());
    }
    digest.finalize()
}

pub fn vanilla_gradient(net: &Network, x: &Tensor, class: usize) -> Result<SaliencyMap> {
    vanilla_gradient_of(net, x, class, ClassScore::Logit)
}

pub fn vanilla_gradient_of(
    net: &Network,
    x: &Tensor,
    class: usize,
    score: ClassScore,
) -> Result<SaliencyMap> {
    let (_, values) = net.score_gradient(x, class, score)?;
    Ok(SaliencyMap {
        values,
        class,
        method: Method::Vanilla,
        source: instance_hash(x),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradConfig {
    pub samples: usize,
    /// Standard deviation of the pixel noise, in `[0, 1]` pixel units.
    pub sigma: f64,
    #[serde(default)]
    pub score: ClassScore,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            sigma: 0.1,
            score: ClassScore::Logit,
        }
    }
}

impl SmoothGradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("smoothgrad needs at least one sample"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "smoothgrad sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// The noisy inputs SmoothGrad averages over, in draw order.
pub fn noisy_copies(x: &Tensor, samples: usize, sigma: f64, seed: u64) -> Result<Vec<Tensor>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let data = x.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect()
}

/// Mean explanation over Gaussian-noised copies of `x`. With `sigma == 0`
/// every copy is `x` itself, so the explanation at `x` is returned as is.
pub fn smoothgrad_with(
    explainer: &dyn Explainer,
    x: &Tensor,
    samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<Tensor> {
    if sigma == 0.0 {
        return explainer.explain(x);
    }
    let mut sum = Tensor::zeros(x.shape());
    for xs in noisy_copies(x, samples, sigma, seed)? {
        sum.add_assign_scaled(1.0, &explainer.explain(&xs)?);
    }
    Ok(sum.scale(1.0 / samples as f64))
}

pub fn smoothgrad(
    net: &Network,
    x: &Tensor,
    class: usize,
    cfg: &SmoothGradConfig,
    seed: u64,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    let explainer = ClassGradient {
        net,
        class,
        score: cfg.score,
    };
    Ok(SaliencyMap {
        values: smoothgrad_with(&explainer, x, cfg.samples, cfg.sigma, seed)?,
        class,
        method: Method::SmoothGrad,
        source: instance_hash(x),
    })
}

/// `|φ_t| / ‖φ‖₁` per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeImportance {
    pub values: Tensor,
    /// Set when `φ` is identically zero; `values` is then all zeros.
    pub degenerate: bool,
}

pub fn relative_importance(map: &Tensor) -> RelativeImportance {
    let l1 = map.norm_l1();
    if l1 == 0.0 {
        return RelativeImportance {
            values: Tensor::zeros(map.shape()),
            degenerate: true,
        };
    }
    RelativeImportance {
        values: map.map(|v| v.abs() / l1),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    fn linear_net() -> Network {
        Network::init(NetworkSpec::mlp(6, &[], 10), 4).unwrap()
    }

    fn x6() -> Tensor {
        Tensor::vector(vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.7]).unwrap()
    }

    #[test]
    fn linear_logit_map_is_the_weight_row() {
        let net = linear_net();
        let w = &net.params()[0];
        for x in [x6(), Tensor::filled(&[6], 0.4)] {
            let map = vanilla_gradient(&net, &x, 3).unwrap();
            assert_eq!(map.values.data(), &w.data()[18..24]);
        }
    }

    #[test]
    fn relative_importance_examples() {
        let r = relative_importance(&Tensor::vector(vec![1.0, -1.0, 2.0]).unwrap());
        assert_eq!(r.values.data(), &[0.25, 0.25, 0.5]);
        assert!(!r.degenerate);
        let z = relative_importance(&Tensor::zeros(&[3]));
        assert!(z.degenerate);
        assert_eq!(z.values.data(), &[0.0; 3]);
    }

    #[test]
    fn relative_importance_is_scale_invariant() {
        let phi = Tensor::vector(vec![0.3, -1.7, 2.2, 0.0]).unwrap();
        let base = relative_importance(&phi);
        for a in [0.5, 2.0, 1e3] {
            let r = relative_importance(&phi.scale(a));
            for (p, q) in r.values.data().iter().zip(base.values.data()) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scaling_logits_scales_map_but_not_importance() {
        let net = Network::init(NetworkSpec::mlp(6, &[5], 10), 2).unwrap();
        let mut params = net.params().to_vec();
        let n = params.len();
        params[n - 2] = params[n - 2].scale(2.0);
        params[n - 1] = params[n - 1].scale(2.0);
        let doubled = Network::from_params(net.spec().clone(), params).unwrap();
        let a = vanilla_gradient(&net, &x6(), 1).unwrap().values;
        let b = vanilla_gradient(&doubled, &x6(), 1).unwrap().values;
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((2.0 * p - q).abs() < 1e-14);
        }
        let (ra, rb) = (relative_importance(&a), relative_importance(&b));
        for (p, q) in ra.values.data().iter().zip(rb.values.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_sigma_smoothgrad_is_vanilla_bit_for_bit() {
        let net = Network::init(NetworkSpec::mlp(6, &[5], 10), 2).unwrap();
        let v = vanilla_gradient(&net, &x6(), 4).unwrap();
        for n in [1, 7] {
            let cfg = SmoothGradConfig {
                samples: n,
                sigma: 0.0,
                ..Default::default()
            };
            let s = smoothgrad(&net, &x6(), 4, &cfg, 9).unwrap();
            assert_eq!(s.values, v.values);
            assert_eq!(s.method, Method::SmoothGrad);
        }
    }

    #[test]
    fn single_sample_smoothgrad_is_vanilla_at_the_noisy_point() {
        let net = Network::init(NetworkSpec::mlp(6, &[5], 10), 2).unwrap();
        let cfg = SmoothGradConfig {
            samples: 1,
            sigma: 0.2,
            ..Default::default()
        };
        let s = smoothgrad(&net, &x6(), 4, &cfg, 11).unwrap();
        let noisy = &noisy_copies(&x6(), 1, 0.2, 11).unwrap()[0];
        assert_ne!(noisy, &x6());
        assert_eq!(s.values, vanilla_gradient(&net, noisy, 4).unwrap().values);
    }

    #[test]
    fn smoothgrad_of_linear_logit_is_the_weight_row() {
        let net = linear_net();
        let cfg = SmoothGradConfig {
            samples: 25,
            sigma: 0.3,
            ..Default::default()
        };
        let s = smoothgrad(&net, &x6(), 3, &cfg, 5).unwrap();
        for (p, q) in s.values.data().iter().zip(&net.params()[0].data()[18..24]) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn smoothgrad_is_seed_deterministic() {
        let net = Network::init(NetworkSpec::mlp(6, &[5], 10), 2).unwrap();
        let cfg = SmoothGradConfig {
            samples: 8,
            ..Default::default()
        };
        let a = smoothgrad(&net, &x6(), 0, &cfg, 1).unwrap();
        let b = smoothgrad(&net, &x6(), 0, &cfg, 1).unwrap();
        let c = smoothgrad(&net, &x6(), 0, &cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn invalid_smoothgrad_config() {
        let cfg = SmoothGradConfig {
            samples: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn instance_hash_distinguishes_inputs() {
        assert_eq!(instance_hash(&x6()), instance_hash(&x6()));
        assert_ne!(instance_hash(&x6()), instance_hash(&Tensor::zeros(&[6])));
    }
}
