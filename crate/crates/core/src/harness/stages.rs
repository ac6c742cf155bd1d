use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{
    smoothness_study, write_csv, ReportRow, SmoothnessSummary, EFFICACY_CSV, REPORT_TABLE, SMOOTHNESS_CSV,
};
use super::{instance_seed, ExperimentConfig};
use crate::advrob::{adv_finetune, check_theorem1, robust_accuracy, theorem1_logit_variant, RobustnessPoint};
use crate::atex::{atex_finetune, write_telemetry_csv, AtexReport, TelemetryProbe, TelemetryRow};
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::explain::{smoothgrad, vanilla_gradient, write_pgm};
use crate::metrics::compare;
use crate::model::{accuracy, load, save, train, Network, NetworkSpec, TrainReport};
use crate::tensor::Tensor;
use crate::xmanip::{manipulate, ManipulationRecord, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    Atex,
    AttackExplain,
    AttackFgsm,
    Advtrain,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Train,
        Stage::Atex,
        Stage::AttackExplain,
        Stage::AttackFgsm,
        Stage::Advtrain,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Atex => "atex",
            Stage::AttackExplain => "attack-explain",
            Stage::AttackFgsm => "attack-fgsm",
            Stage::Advtrain => "advtrain",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    fn dir(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.root.join(stage.name());
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn baseline(&self) -> PathBuf {
        self.root.join("train/baseline.ckpt")
    }

    fn atex_iteration(&self, i: usize) -> PathBuf {
        self.root.join(format!("atex/iter_{i:03}.ckpt"))
    }

    fn attack_summary(&self) -> PathBuf {
        self.root.join("attack-explain/summary.json")
    }

    fn eval_summary(&self) -> PathBuf {
        self.root.join("eval/summary.json")
    }

    fn robustness(&self) -> PathBuf {
        self.root.join("advtrain/robustness.csv")
    }
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            stage: stage.name(),
            path: path.to_path_buf(),
        })
    }
}

fn load_from(path: &Path, stage: Stage) -> Result<Network> {
    require(path, stage)?;
    load(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    require(path, stage)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(
        path,
    )?))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn train_set(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let full = LabeledDataset::load(cfg.data_root(), cfg.dataset, Split::Train)?;
    Ok(match cfg.train_size {
        Some(n) => full.stratified_subset(n, cfg.stage_seed("subset")),
        None => full,
    })
}

fn test_set(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    LabeledDataset::load(cfg.data_root(), cfg.dataset, Split::Test)
}

/// The first `eval.size` test instances the baseline classifies correctly,
/// as `(test index, image)`.
fn eval_set(
    cfg: &ExperimentConfig,
    baseline: &Network,
    test: &LabeledDataset,
) -> Result<Vec<(usize, Tensor)>> {
    let mut out = Vec::with_capacity(cfg.eval.size);
    for (i, (x, &y)) in test.images.iter().zip(&test.labels).enumerate() {
        if out.len() == cfg.eval.size {
            break;
        }
        if baseline.predict_class(x)? == y {
            out.push((i, x.clone()));
        }
    }
    if out.is_empty() {
        return Err(Error::Validation {
            path: "eval.size".into(),
            message: "evaluation set is empty: no correctly classified test instance".into(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset: String,
    pub train_size: usize,
    pub report: TrainReport,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let train_data = train_set(cfg)?;
    let test = test_set(cfg)?;
    let spec = NetworkSpec::small_cnn().with_beta(cfg.model.beta);
    log::info!(
        "training on {} examples of {}",
        train_data.len(),
        cfg.dataset.tag()
    );
    let (net, report) = train(spec, &train_data, Some(&test), &cfg.train_config())?;
    let dir = layout.dir(Stage::Train)?;
    save(&net, layout.baseline())?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            dataset: cfg.dataset.tag().into(),
            train_size: train_data.len(),
            report: report.clone(),
        },
    )?;
    Ok(report)
}

pub fn cmd_atex(cfg: &ExperimentConfig) -> Result<AtexReport> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let teacher = load_from(&layout.baseline(), Stage::Train)?;
    let train_data = train_set(cfg)?;
    let probe = if cfg.telemetry.enabled {
        let test = test_set(cfg)?;
        let t = &cfg.telemetry;
        let probe: Vec<Tensor> = eval_set(cfg, &teacher, &test)?
            .into_iter()
            .take(t.probe_size)
            .map(|p| p.1)
            .collect();
        Some(TelemetryProbe {
            accuracy_set: test.head(t.accuracy_size),
            probe,
            stability: crate::explain::StabilityConfig {
                seed: cfg.stage_seed("telemetry"),
                ..t.stability
            },
            attack: cfg
                .attack
                .manipulation(Mode::Untargeted, t.attack_epsilon, cfg.stage_seed("telemetry")),
        })
    } else {
        None
    };
    let dir = layout.dir(Stage::Atex)?;
    let mut rows: Vec<TelemetryRow> = Vec::new();
    let mut geometry_failures = 0usize;
    let (_, report) = atex_finetune(
        &teacher,
        &train_data,
        &cfg.atex_config(),
        |iteration, student, pairs| {
            geometry_failures += pairs.iter().filter(|p| !p.satisfies_invariants()).count();
            save(student, layout.atex_iteration(iteration))?;
            if let Some(p) = &probe {
                let row = p.row(iteration, student)?;
                log::info!("telemetry {row:?}");
                rows.push(row);
            }
            Ok(())
        },
    )?;
    if geometry_failures > 0 {
        log::warn!("{geometry_failures} augmented pairs violated the sampling geometry");
    }
    write_json(&dir.join("report.json"), &report)?;
    if probe.is_some() {
        write_telemetry_csv(dir.join("telemetry.csv"), &rows)?;
    }
    Ok(report)
}

/// One attacked evaluation instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackInstance {
    pub model: String,
    pub test_index: usize,
    /// Rank correlation of the clean and attacked maps; `None` when
    /// undefined.
    pub spearman: Option<f64>,
    pub topk: f64,
    pub ssim: f64,
    pub manipulation: ManipulationRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub model: String,
    pub mode: Mode,
    pub epsilon: f64,
    pub count: usize,
    pub mean_spearman: f64,
    /// Instances whose rank correlation was defined.
    pub spearman_count: usize,
    pub mean_topk: f64,
    pub mean_ssim: f64,
    pub improved: usize,
    pub clean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub top_k: usize,
    pub cells: Vec<AttackCell>,
}

impl AttackSummary {
    pub fn cell(&self, model: &str, mode: Mode, epsilon: f64) -> Option<&AttackCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.mode == mode && c.epsilon == epsilon)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = values.fold((0.0, 0), |(s, n), v| (s + v, n + 1));
    (if n == 0 { f64::NAN } else { s / n as f64 }, n)
}

fn attack_model(
    cfg: &ExperimentConfig,
    name: &str,
    net: &Network,
    eval: &[(usize, Tensor)],
    mode: Mode,
    epsilon: f64,
) -> Result<Vec<AttackInstance>> {
    let base_seed = cfg.stage_seed("attack-explain");
    eval.par_iter()
        .map(|(index, x)| {
            // Seeds depend on the instance only, so both models face the same
            // targeted regions and selection noise.
            let mcfg = cfg
                .attack
                .manipulation(mode, epsilon, instance_seed(base_seed, *index));
            let res = manipulate(net, x, &mcfg)?;
            let before = vanilla_gradient(net, x, res.class)?.values;
            let after = vanilla_gradient(net, &res.x_adv, res.class)?.values;
            let scores = compare(&before, &after, cfg.eval.top_k)?;
            Ok(AttackInstance {
                model: name.to_string(),
                test_index: *index,
                spearman: scores.spearman,
                topk: scores.topk,
                ssim: scores.ssim,
                manipulation: res.record(*index, &mcfg),
            })
        })
        .collect()
}

pub fn cmd_attack_explain(cfg: &ExperimentConfig) -> Result<AttackSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let baseline = load_from(&layout.baseline(), Stage::Train)?;
    let atex = load_from(&layout.atex_iteration(cfg.atex.iterations), Stage::Atex)?;
    let test = test_set(cfg)?;
    let eval = eval_set(cfg, &baseline, &test)?;
    let dir = layout.dir(Stage::AttackExplain)?;
    let mut cells = Vec::new();
    for (name, net) in [("atex", &atex), ("baseline", &baseline)] {
        let clean_accuracy = accuracy(net, &test)?;
        for &mode in &cfg.attack.modes {
            for &epsilon in &cfg.attack.epsilons {
                let records = attack_model(cfg, name, net, &eval, mode, epsilon)?;
                write_jsonl(
                    &dir.join(format!("{name}_{}_eps{epsilon}.jsonl", mode.tag())),
                    &records,
                )?;
                let (mean_spearman, spearman_count) = mean(records.iter().filter_map(|r| r.spearman));
                let cell = AttackCell {
                    model: name.to_string(),
                    mode,
                    epsilon,
                    count: records.len(),
                    mean_spearman,
                    spearman_count,
                    mean_topk: mean(records.iter().map(|r| r.topk)).0,
                    mean_ssim: mean(records.iter().map(|r| r.ssim)).0,
                    improved: records.iter().filter(|r| r.manipulation.improved).count(),
                    clean_accuracy,
                };
                log::info!(
                    "{name} {} eps {epsilon}: rank corr {:.4}, top-k {:.4}",
                    mode.tag(),
                    cell.mean_spearman,
                    cell.mean_topk
                );
                cells.push(cell);
            }
        }
    }
    let summary = AttackSummary {
        top_k: cfg.eval.top_k,
        cells,
    };
    write_json(&layout.attack_summary(), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRobustness {
    pub model: String,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgsmSummary {
    pub epsilon: f64,
    pub theorem_instances: usize,
    pub min_cosine: f64,
    pub mean_cosine: f64,
    /// Largest cosine when the explanation is taken of the logit instead.
    pub max_logit_cosine: f64,
    pub models: Vec<ModelRobustness>,
}

fn robust_eval_set(cfg: &ExperimentConfig, test: &LabeledDataset) -> LabeledDataset {
    match cfg.adv.eval_size {
        Some(n) => test.head(n),
        None => test.clone(),
    }
}

pub fn cmd_attack_fgsm(cfg: &ExperimentConfig) -> Result<FgsmSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let baseline = load_from(&layout.baseline(), Stage::Train)?;
    let atex = load_from(&layout.atex_iteration(cfg.atex.iterations), Stage::Atex)?;
    let test = test_set(cfg)?;
    let probe: Vec<(usize, Tensor)> = eval_set(cfg, &baseline, &test)?
        .into_iter()
        .take(cfg.eval.theorem_instances)
        .collect();
    let cosines: Vec<(f64, f64)> = probe
        .par_iter()
        .map(|(_, x)| {
            let c = baseline.predict_class(x)?;
            Ok((
                check_theorem1(&baseline, x, c)?,
                theorem1_logit_variant(&baseline, x, c)?,
            ))
        })
        .collect::<Result<_>>()?;
    let robust_set = robust_eval_set(cfg, &test);
    let models = [("atex", &atex), ("baseline", &baseline)]
        .into_iter()
        .map(|(name, net)| {
            Ok(ModelRobustness {
                model: name.into(),
                clean_accuracy: accuracy(net, &robust_set)?,
                robust_accuracy: robust_accuracy(net, &robust_set, cfg.adv.epsilon, cfg.adv.signed)?,
            })
        })
        .collect::<Result<_>>()?;
    let summary = FgsmSummary {
        epsilon: cfg.adv.epsilon,
        theorem_instances: cosines.len(),
        min_cosine: cosines.iter().map(|c| c.0).fold(f64::INFINITY, f64::min),
        mean_cosine: mean(cosines.iter().map(|c| c.0)).0,
        max_logit_cosine: cosines.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max),
        models,
    };
    write_json(&layout.dir(Stage::AttackFgsm)?.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvRecord {
    pub atex_iteration: usize,
    pub repeat: usize,
    pub robust_accuracy: f64,
    pub clean_accuracy: f64,
    pub adversarial_examples: usize,
    pub degenerate_perturbations: usize,
    pub epoch_losses: Vec<f64>,
}

/// Robust accuracy after adversarial fine-tuning of each requested ATEX
/// checkpoint, averaged over repetitions.
pub fn cmd_advtrain(cfg: &ExperimentConfig) -> Result<Vec<RobustnessPoint>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let checkpoints: Vec<(usize, Network)> = cfg
        .adv
        .atex_iterations
        .iter()
        .map(|&i| Ok((i, load_from(&layout.atex_iteration(i), Stage::Atex)?)))
        .collect::<Result<_>>()?;
    let train_data = train_set(cfg)?;
    let robust_set = robust_eval_set(cfg, &test_set(cfg)?);
    let mut records = Vec::new();
    let mut points = Vec::new();
    for (iteration, net) in &checkpoints {
        let mut robust = Vec::new();
        let mut clean = Vec::new();
        for repeat in 0..cfg.adv.repeats {
            let (tuned, report) = adv_finetune(net, &train_data, &cfg.adv_config(repeat))?;
            let r = robust_accuracy(&tuned, &robust_set, cfg.adv.epsilon, cfg.adv.signed)?;
            let c = accuracy(&tuned, &robust_set)?;
            log::info!("ATEX iteration {iteration}, repeat {repeat}: robust {r:.4}, clean {c:.4}");
            robust.push(r);
            clean.push(c);
            records.push(AdvRecord {
                atex_iteration: *iteration,
                repeat,
                robust_accuracy: r,
                clean_accuracy: c,
                adversarial_examples: report.adversarial_examples,
                degenerate_perturbations: report.degenerate_perturbations,
                epoch_losses: report.epoch_losses,
            });
        }
        points.push(RobustnessPoint {
            atex_iteration: *iteration,
            robust_accuracy: mean(robust.into_iter()).0,
            clean_accuracy: mean(clean.into_iter()).0,
        });
    }
    let dir = layout.dir(Stage::Advtrain)?;
    write_jsonl(&dir.join("records.jsonl"), &records)?;
    crate::advrob::write_robustness_csv(layout.robustness(), &points)?;
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub eval_count: usize,
    pub baseline_accuracy: f64,
    pub atex_accuracy: f64,
    pub smoothness: SmoothnessSummary,
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let baseline = load_from(&layout.baseline(), Stage::Train)?;
    let atex = load_from(&layout.atex_iteration(cfg.atex.iterations), Stage::Atex)?;
    let test = test_set(cfg)?;
    let eval = eval_set(cfg, &baseline, &test)?;
    let reference = cfg.smoothness_reference();
    let seed = cfg.stage_seed("eval");
    let (rows, smoothness) = smoothness_study(&baseline, &atex, &eval, &reference, seed)?;
    let summary = EvalSummary {
        eval_count: eval.len(),
        baseline_accuracy: accuracy(&baseline, &test)?,
        atex_accuracy: accuracy(&atex, &test)?,
        smoothness,
    };

    let dir = layout.dir(Stage::Eval)?;
    write_csv(&dir.join("smoothness.csv"), &rows)?;
    let maps = dir.join("maps");
    fs::create_dir_all(&maps)?;
    for (index, x) in eval.iter().take(cfg.eval.saliency_images) {
        let class = baseline.predict_class(x)?;
        let sg = smoothgrad(&baseline, x, class, &reference, instance_seed(seed, *index))?;
        write_pgm(maps.join(format!("{index:05}_input.pgm")), x)?;
        write_pgm(
            maps.join(format!("{index:05}_baseline_smoothgrad.pgm")),
            &sg.values,
        )?;
        write_pgm(
            maps.join(format!("{index:05}_baseline_vanilla.pgm")),
            &vanilla_gradient(&baseline, x, class)?.values.map(f64::abs),
        )?;
        write_pgm(
            maps.join(format!("{index:05}_atex_vanilla.pgm")),
            &vanilla_gradient(&atex, x, class)?.values.map(f64::abs),
        )?;
    }
    write_json(&layout.eval_summary(), &summary)?;
    Ok(summary)
}

/// Assembles the comparison table, the smoothness comparison and the
/// adversarial-training efficacy curve from earlier stages' artifacts.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let attacks: AttackSummary = read_json(&layout.attack_summary(), Stage::AttackExplain)?;
    let eval: EvalSummary = read_json(&layout.eval_summary(), Stage::Eval)?;
    require(&layout.robustness(), Stage::Advtrain)?;
    let efficacy: Vec<RobustnessPoint> = csv::Reader::from_path(layout.robustness())?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;

    let mut rows = Vec::new();
    for &mode in &cfg.attack.modes {
        for &epsilon in &cfg.attack.epsilons {
            let find = |model: &str| {
                attacks
                    .cell(model, mode, epsilon)
                    .ok_or_else(|| Error::Dependency {
                        stage: Stage::AttackExplain.name(),
                        path: layout.attack_summary(),
                    })
            };
            let (a, b) = (find("atex")?, find("baseline")?);
            rows.push(ReportRow {
                epsilon,
                mode,
                accuracy_atex: a.clean_accuracy,
                accuracy_baseline: b.clean_accuracy,
                rank_corr_atex: a.mean_spearman,
                rank_corr_baseline: b.mean_spearman,
                topk_atex: a.mean_topk,
                topk_baseline: b.mean_topk,
                eval_count: a.count.min(b.count),
            });
        }
    }
    let dir = layout.dir(Stage::Report)?;
    write_csv(&dir.join(REPORT_TABLE), &rows)?;
    write_csv(&dir.join(SMOOTHNESS_CSV), &eval.smoothness.table())?;
    write_csv(&dir.join(EFFICACY_CSV), &efficacy)?;
    Ok(rows)
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), cfg)?;
    cmd_train(cfg)?;
    cmd_atex(cfg)?;
    cmd_attack_explain(cfg)?;
    cmd_attack_fgsm(cfg)?;
    cmd_advtrain(cfg)?;
    cmd_eval(cfg)?;
    cmd_report(cfg)
}
