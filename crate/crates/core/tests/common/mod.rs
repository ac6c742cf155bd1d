//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance suite. Each one is written independently of the library code
//! it checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xstab::explain::Explainer;
use xstab::model::{LayerSpec, Network, NetworkSpec};
use xstab::Tensor;

/// `x` with the listed coordinates shifted.
pub fn perturbed(x: &Tensor, shifts: &[(usize, f64)]) -> Tensor {
    let mut data = x.data().to_vec();
    for &(i, d) in shifts {
        data[i] += d;
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Central differences of the class logit, one coordinate at a time.
pub fn fd_logit_gradient(net: &Network, x: &Tensor, class: usize, h: f64) -> Vec<f64> {
    let f = |p: Tensor| net.logits(&p).unwrap()[class];
    (0..x.len())
        .map(|i| (f(perturbed(x, &[(i, h)])) - f(perturbed(x, &[(i, -h)]))) / (2.0 * h))
        .collect()
}

/// Largest coordinate-wise relative error, with `floor` guarding against
/// division by tiny magnitudes.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Full Hessian of the class logit from second differences of the logit
/// itself (no gradients involved).
pub fn hessian_by_differences(net: &Network, x: &Tensor, class: usize, h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let f = |dx: &[(usize, f64)]| net.logits(&perturbed(x, dx)).unwrap()[class];
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            hess[i][j] = (f(&[(i, h), (j, h)]) - f(&[(i, h), (j, -h)]) - f(&[(i, -h), (j, h)])
                + f(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
        }
    }
    hess
}

/// Spearman's rho of |a| and |b| from explicitly counted average ranks and
/// the textbook two-pass Pearson formula.
pub fn spearman_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        let m: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        m.iter()
            .map(|&x| {
                let below = m.iter().filter(|&&y| y < x).count() as f64;
                let equal = m.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Top-k by repeated selection of the largest remaining magnitude (first
/// index wins ties).
pub fn topk_oracle(a: &[f64], b: &[f64], k: usize) -> f64 {
    let select = |v: &[f64]| -> Vec<usize> {
        let mut taken = vec![false; v.len()];
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..v.len() {
                if !taken[i] && best.is_none_or(|j| v[i].abs() > v[j].abs()) {
                    best = Some(i);
                }
            }
            let i = best.unwrap();
            taken[i] = true;
            out.push(i);
        }
        out
    };
    let sa = select(a);
    let sb = select(b);
    sa.iter().filter(|i| sb.contains(i)).count() as f64 / k as f64
}

/// Mean SSIM with an explicit 11x11 two-dimensional Gaussian window and
/// per-window statistics computed directly, on inputs already in [0, 1].
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=h - N {
        for c in 0..=w - N {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let g = win[i][j] / total;
                    ma += g * a[(r + i) * w + c + j];
                    mb += g * b[(r + i) * w + c + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let g = win[i][j] / total;
                    let (p, q) = (a[(r + i) * w + c + j] - ma, b[(r + i) * w + c + j] - mb);
                    va += g * p * p;
                    vb += g * q * q;
                    cov += g * p * q;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Min-max scaled magnitudes, the preprocessing applied before SSIM.
pub fn minmax(v: &[f64]) -> Vec<f64> {
    let m: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m.iter()
        .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

/// Exhaustive search of the scale-invariant explanation deviation over a
/// `n x n` lattice covering the l-infinity box of radius `eps` around a
/// 2-D input.
pub fn lattice_stability(explainer: &dyn Explainer, x: &Tensor, eps: f64, n: usize) -> f64 {
    let phi0 = explainer.explain(x).unwrap();
    let p0 = phi0.data();
    let p0_sq = p0[0] * p0[0] + p0[1] * p0[1];
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dx = -eps + 2.0 * eps * i as f64 / (n - 1) as f64;
            let dy = -eps + 2.0 * eps * j as f64 / (n - 1) as f64;
            let p = Tensor::vector(vec![x.data()[0] + dx, x.data()[1] + dy]).unwrap();
            let phi = explainer.explain(&p).unwrap();
            let q = phi.data();
            let dot = q[0] * p0[0] + q[1] * p0[1];
            let value = if dot <= 0.0 {
                (q[0] * q[0] + q[1] * q[1]).sqrt()
            } else {
                let g = dot / p0_sq;
                ((q[0] - g * p0[0]).powi(2) + (q[1] - g * p0[1]).powi(2)).sqrt()
            };
            best = best.max(value);
        }
    }
    best
}

/// A randomly shaped small softplus network; every third one is
/// convolutional.
pub fn random_small_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = rng.random_range(0.5..4.0);
    let classes = rng.random_range(2..=10);
    let spec = if seed.is_multiple_of(3) {
        NetworkSpec {
            input_shape: vec![1, 9, 9],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: rng.random_range(2..=4),
                    kernel: 3,
                    stride: rng.random_range(1..=2),
                },
                LayerSpec::Dense {
                    width: rng.random_range(3..=8),
                },
                LayerSpec::Dense { width: classes },
            ],
            softplus_beta: beta,
            num_classes: classes,
        }
    } else {
        let inputs = rng.random_range(3..=16);
        let depth = rng.random_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=12)).collect();
        NetworkSpec::mlp(inputs, &hidden, classes).with_beta(beta)
    };
    Network::init(spec, seed).unwrap()
}

pub fn random_input(net: &Network, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = net.spec().input_shape.clone();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Random 16x16 fixture pair whose second map is a noisy copy of the first.
pub fn fixture_pair(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mix = rng.random_range(0.0..1.0);
    let b = a
        .iter()
        .map(|v| mix * v + (1.0 - mix) * rng.random_range(-1.0..1.0))
        .collect();
    (a, b)
}
