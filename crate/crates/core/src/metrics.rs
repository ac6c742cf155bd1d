//! Explanation similarity: Spearman rank correlation, top-k intersection and
//! SSIM, all computed on attribution magnitudes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 50;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    /// `None` when either map has all-tied magnitudes.
    pub spearman: Option<f64>,
    pub topk: f64,
    pub k: usize,
    pub ssim: f64,
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    b.ensure_shape("compared saliency map", a.shape())
}

/// 1-based ranks, tied values sharing the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    // sqrt(s * s) == s exactly in IEEE arithmetic, so identical rankings give 1.0.
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho between the magnitude rankings of two maps.
pub fn spearman(a: &Tensor, b: &Tensor) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let ra = average_ranks(&a.data().iter().map(|v| v.abs()).collect::<Vec<_>>());
    let rb = average_ranks(&b.data().iter().map(|v| v.abs()).collect::<Vec<_>>());
    Ok(pearson(&ra, &rb))
}

/// Indices of the `k` largest magnitudes; equal magnitudes prefer the lower
/// index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    order.truncate(k);
    order
}

/// `|topk(a) ∩ topk(b)| / k`.
pub fn topk_intersection(a: &Tensor, b: &Tensor, k: usize) -> Result<f64> {
    check_pair(a, b)?;
    if k == 0 || k > a.len() {
        return Err(Error::config(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            a.len()
        )));
    }
    let mut in_a = vec![false; a.len()];
    for i in top_k_indices(a.data(), k) {
        in_a[i] = true;
    }
    let shared = top_k_indices(b.data(), k)
        .into_iter()
        .filter(|&i| in_a[i])
        .count();
    Ok(shared as f64 / k as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable Gaussian filtering of an `h × w` image.
fn filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&img[r * w + c..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(r + k) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` images on unit dynamic range, over every fully
/// contained 11×11 Gaussian window.
pub fn ssim_images(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape {
            context: "ssim image",
            expected: vec![h, w],
            found: vec![a.len().max(b.len())],
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter(a, h, w, &taps);
    let mu_b = filter(b, h, w, &taps);
    let e_aa = filter(&prod(a, a), h, w, &taps);
    let e_bb = filter(&prod(b, b), h, w, &taps);
    let e_ab = filter(&prod(a, b), h, w, &taps);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// `|v|` rescaled so the smallest magnitude maps to 0 and the largest to 1;
/// a constant map becomes all zeros.
pub fn minmax_magnitude(values: &[f64]) -> Vec<f64> {
    let mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        mags.iter().map(|m| (m - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; mags.len()]
    }
}

fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::Shape {
            context: "ssim map (expected [.., h, w] with unit leading dims)",
            expected: vec![1, 28, 28],
            found: s.to_vec(),
        });
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// SSIM between two saliency maps after min-max scaling their magnitudes.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = image_dims(a)?;
    ssim_images(&minmax_magnitude(a.data()), &minmax_magnitude(b.data()), h, w)
}

pub fn compare(a: &Tensor, b: &Tensor, k: usize) -> Result<SimilarityScores> {
    Ok(SimilarityScores {
        spearman: spearman(a, b)?,
        topk: topk_intersection(a, b, k)?,
        k,
        ssim: ssim(a, b)?,
    })
}
