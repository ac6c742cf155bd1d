use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::instance_seed;
use crate::error::{Error, Result};
use crate::explain::{smoothgrad, vanilla_gradient, SmoothGradConfig};
use crate::metrics::ssim;
use crate::model::Network;
use crate::tensor::Tensor;
use crate::xmanip::Mode;

/// File names inside the report directory.
pub const REPORT_TABLE: &str = "table.csv";
pub(crate) const SMOOTHNESS_CSV: &str = "smoothness.csv";
pub(crate) const EFFICACY_CSV: &str = "efficacy.csv";

/// One line of the attack comparison table: post-attack similarity of the
/// ATEX model next to the undefended baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub epsilon: f64,
    pub mode: Mode,
    pub accuracy_atex: f64,
    pub accuracy_baseline: f64,
    pub rank_corr_atex: f64,
    pub rank_corr_baseline: f64,
    pub topk_atex: f64,
    pub topk_baseline: f64,
    pub eval_count: usize,
}

pub fn read_report_table(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    Ok(csv::Reader::from_path(path)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// SSIM of each model's vanilla map against the baseline's SmoothGrad map
/// for one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRow {
    pub test_index: usize,
    pub class: usize,
    pub ssim_atex: f64,
    pub ssim_baseline: f64,
    /// The reference compared with itself.
    pub self_check: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessSummary {
    pub count: usize,
    pub mean_ssim_atex: f64,
    pub mean_ssim_baseline: f64,
    pub mean_self_check: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessLine {
    pub model: String,
    pub mean_ssim: f64,
    pub count: usize,
}

impl SmoothnessSummary {
    pub fn table(&self) -> Vec<SmoothnessLine> {
        [
            ("atex", self.mean_ssim_atex),
            ("baseline", self.mean_ssim_baseline),
            ("self_check", self.mean_self_check),
        ]
        .into_iter()
        .map(|(m, v)| SmoothnessLine {
            model: m.into(),
            mean_ssim: v,
            count: self.count,
        })
        .collect()
    }
}

/// Per instance, SSIM(vanilla(atex), SmoothGrad(baseline)) next to
/// SSIM(vanilla(baseline), SmoothGrad(baseline)), for the baseline's
/// predicted class.
pub fn smoothness_study(
    baseline: &Network,
    atex: &Network,
    instances: &[(usize, Tensor)],
    reference: &SmoothGradConfig,
    seed: u64,
) -> Result<(Vec<SmoothnessRow>, SmoothnessSummary)> {
    if instances.is_empty() {
        return Err(Error::Validation {
            path: "eval.size".into(),
            message: "smoothness study needs at least one instance".into(),
        });
    }
    let rows: Vec<SmoothnessRow> = instances
        .par_iter()
        .map(|(index, x)| {
            let class = baseline.predict_class(x)?;
            let sg = smoothgrad(baseline, x, class, reference, instance_seed(seed, *index))?.values;
            Ok(SmoothnessRow {
                test_index: *index,
                class,
                ssim_atex: ssim(&vanilla_gradient(atex, x, class)?.values, &sg)?,
                ssim_baseline: ssim(&vanilla_gradient(baseline, x, class)?.values, &sg)?,
                self_check: ssim(&sg, &sg)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let summary = SmoothnessSummary {
        count: rows.len(),
        mean_ssim_atex: rows.iter().map(|r| r.ssim_atex).sum::<f64>() / n,
        mean_ssim_baseline: rows.iter().map(|r| r.ssim_baseline).sum::<f64>() / n,
        mean_self_check: rows.iter().map(|r| r.self_check).sum::<f64>() / n,
    };
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    fn images(n: usize) -> Vec<(usize, Tensor)> {
        (0..n)
            .map(|i| {
                let data = (0..784).map(|p| ((p * 7 + i * 13) % 29) as f64 / 28.0).collect();
                (i, Tensor::new(vec![1, 28, 28], data).unwrap())
            })
            .collect()
    }

    fn reference() -> SmoothGradConfig {
        SmoothGradConfig {
            samples: 3,
            ..Default::default()
        }
    }

    #[test]
    fn identical_models_give_identical_columns() {
        let net = Network::init(NetworkSpec::small_cnn(), 2).unwrap();
        let (rows, summary) = smoothness_study(&net, &net, &images(3), &reference(), 9).unwrap();
        for r in &rows {
            assert_eq!(r.ssim_atex, r.ssim_baseline);
            assert_eq!(r.self_check, 1.0);
        }
        assert_eq!(summary.mean_ssim_atex, summary.mean_ssim_baseline);
        assert_eq!(summary.mean_self_check, 1.0);
    }

    #[test]
    fn empty_instance_list_is_a_validation_error() {
        let net = Network::init(NetworkSpec::small_cnn(), 2).unwrap();
        assert!(matches!(
            smoothness_study(&net, &net, &[], &reference(), 0),
            Err(Error::Validation { .. })
        ));
    }
}
