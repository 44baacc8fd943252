//! Benchmark harness: per-subsystem and global F1/precision/recall for all
//! four model kinds, score-distribution summaries per fault scenario, and
//! ranking statistics between fault and healthy score groups.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, SubsystemSignalsMap};
use crate::error::{CoreError, Result};
use crate::eval::{
    binarize, calibrate_thresholds, score_batch, write_scores_csv,
    write_thresholds_json, ScoreRecord, ThresholdSet,
};
use crate::model::ModelKind;
use crate::sim::FaultKind;
use crate::stats::{quantile, DistributionSummary};
use crate::train::{grid_search, train, write_history_csv, TrainConfig, TrainedModel};

/// Standard binary-classification metrics. When nothing is predicted
/// positive, precision is defined as 0 and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// True when the classifier produced no positive predictions.
    pub zero_predictions: bool,
}

pub fn metrics(pred: &[u8], labels: &[u8]) -> Result<Metrics> {
    if pred.len() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} predictions", labels.len()),
            got: format!("{}", pred.len()),
        });
    }
    if !labels.iter().any(|&l| l == 1) {
        return Err(CoreError::SingleClassLabels);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let zero_predictions = tp + fp == 0;
    let precision = if zero_predictions { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics { f1, precision, recall, zero_predictions })
}

/// Probability that a fault-group score exceeds a healthy one, ties counted
/// one half (the Mann-Whitney U statistic normalized to [0, 1]; 0.5 means
/// the groups are indistinguishable).
pub fn separation_stats(fault_scores: &[f64], healthy_scores: &[f64]) -> Result<f64> {
    if fault_scores.is_empty() {
        return Err(CoreError::EmptyGroup("fault".into()));
    }
    if healthy_scores.is_empty() {
        return Err(CoreError::EmptyGroup("healthy".into()));
    }
    let mut wins = 0.0;
    for f in fault_scores {
        for h in healthy_scores {
            if f > h {
                wins += 1.0;
            } else if f == h {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (fault_scores.len() * healthy_scores.len()) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalTrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// KL warm-up span for every VAE training in the benchmark.
    #[serde(default = "default_benchmark_warmup")]
    pub kl_warmup_epochs: usize,
}

fn default_benchmark_warmup() -> usize {
    15
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Training seeds; headline numbers are medians across them.
    pub seeds: Vec<u64>,
    pub tuning: TuningConfig,
    pub training: FinalTrainConfig,
    pub gmm_k_grid: Vec<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seeds: vec![11, 12, 13],
            tuning: TuningConfig {
                max_epochs: 25,
                patience: 24,
                learning_rate_grid: vec![3e-3, 1e-3],
                beta_grid: vec![0.1, 0.5, 1.0],
            },
            training: FinalTrainConfig {
                max_epochs: 250,
                patience: 25,
                batch_size: 8,
                kl_warmup_epochs: 15,
            },
            gmm_k_grid: vec![1, 2, 4, 8],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CoreError::Config("need at least one seed".into()));
        }
        if self.tuning.learning_rate_grid.is_empty() || self.tuning.beta_grid.is_empty() {
            return Err(CoreError::EmptyGrid);
        }
        if self.gmm_k_grid.is_empty() {
            return Err(CoreError::EmptyGrid);
        }
        if self.tuning.patience >= self.tuning.max_epochs
            || self.training.patience >= self.training.max_epochs
        {
            return Err(CoreError::Config("patience must be smaller than max_epochs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationStat {
    pub target: String,
    pub fault: String,
    pub statistic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub target: String,
    pub fault: String,
    #[serde(flatten)]
    pub summary: DistributionSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_val_loss: f64,
    pub metrics: Vec<TargetMetrics>,
    pub separation: Vec<SeparationStat>,
    pub distributions: Vec<ScoreDistribution>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedHyperparameters {
    pub learning_rate: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub kind: String,
    /// Tuned hyperparameters (VAE kinds only).
    pub tuned: Option<TunedHyperparameters>,
    pub parameter_count: Option<usize>,
    pub latent_dims: Option<usize>,
    pub seeds: Vec<SeedResult>,
    pub median_metrics: Vec<TargetMetrics>,
    pub median_separation: Vec<SeparationStat>,
    pub runtime_seconds: f64,
    /// Present when this model failed; other models still report.
    pub error: Option<String>,
}

impl ModelReport {
    pub fn median_metric(&self, target: &str) -> Option<&TargetMetrics> {
        self.median_metrics.iter().find(|m| m.target == target)
    }

    pub fn median_separation_stat(&self, target: &str, fault: FaultKind) -> Option<f64> {
        self.median_separation
            .iter()
            .find(|s| s.target == target && s.fault == fault.name())
            .map(|s| s.statistic)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub models: Vec<ModelReport>,
    pub total_seconds: f64,
}

impl BenchmarkReport {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.kind == kind.name())
    }
}

fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

fn targets(map: &SubsystemSignalsMap) -> Vec<String> {
    let mut out: Vec<String> = map.subsystems().to_vec();
    out.push("all".into());
    out
}

/// Per-seed evaluation: thresholds, metrics, separations and distribution
/// summaries derived from one set of test scores.
fn evaluate_scores(
    records: &[ScoreRecord],
    bundle: &DatasetBundle,
) -> Result<(ThresholdSet, Vec<TargetMetrics>, Vec<SeparationStat>, Vec<ScoreDistribution>)> {
    let thresholds = calibrate_thresholds(records, &bundle.labels, &bundle.map)?;
    let healths = binarize(records, &thresholds)?;

    let mut target_metrics = Vec::new();
    for target in targets(&bundle.map) {
        let preds: Vec<u8> = healths
            .iter()
            .map(|h| {
                Ok(if target == "all" {
                    h.global as u8
                } else {
                    h.get(&target)? as u8
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bits = bundle.label_bits(&target)?;
        let m = metrics(&preds, &bits)?;
        // consistency: thresholding metrics must equal the calibration's
        let entry = thresholds.entry(&target)?;
        debug_assert!((m.f1 - entry.f1).abs() < 1e-12);
        target_metrics.push(TargetMetrics {
            target: target.clone(),
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
        });
    }

    let mut separation = Vec::new();
    let mut distributions = Vec::new();
    for target in targets(&bundle.map) {
        let scores_of = |kind: FaultKind| -> Result<Vec<f64>> {
            records
                .iter()
                .zip(&bundle.labels)
                .filter(|(_, l)| l.fault_kind == kind)
                .map(|(r, _)| r.target_score(&target))
                .collect()
        };
        let healthy = scores_of(FaultKind::Healthy)?;
        distributions.push(ScoreDistribution {
            target: target.clone(),
            fault: FaultKind::Healthy.name().into(),
            summary: DistributionSummary::from_samples(&healthy),
        });
        for fault in FaultKind::FAULTS {
            let fault_scores = scores_of(fault)?;
            separation.push(SeparationStat {
                target: target.clone(),
                fault: fault.name().into(),
                statistic: separation_stats(&fault_scores, &healthy)?,
            });
            distributions.push(ScoreDistribution {
                target: target.clone(),
                fault: fault.name().into(),
                summary: DistributionSummary::from_samples(&fault_scores),
            });
        }
    }
    Ok((thresholds, target_metrics, separation, distributions))
}

fn median_metrics(seeds: &[SeedResult], map: &SubsystemSignalsMap) -> Vec<TargetMetrics> {
    let mut out = Vec::new();
    for target in targets(map) {
        let pick = |f: &dyn Fn(&TargetMetrics) -> f64| -> f64 {
            let vals: Vec<f64> = seeds
                .iter()
                .filter_map(|s| s.metrics.iter().find(|m| m.target == target))
                .map(|m| f(m))
                .collect();
            median(&vals)
        };
        out.push(TargetMetrics {
            target: target.clone(),
            f1: pick(&|m| m.f1),
            precision: pick(&|m| m.precision),
            recall: pick(&|m| m.recall),
        });
    }
    out
}

fn median_separation(seeds: &[SeedResult], map: &SubsystemSignalsMap) -> Vec<SeparationStat> {
    let mut out = Vec::new();
    for target in targets(map) {
        for fault in FaultKind::FAULTS {
            let vals: Vec<f64> = seeds
                .iter()
                .filter_map(|s| {
                    s.separation
                        .iter()
                        .find(|x| x.target == target && x.fault == fault.name())
                })
                .map(|x| x.statistic)
                .collect();
            if !vals.is_empty() {
                out.push(SeparationStat {
                    target: target.clone(),
                    fault: fault.name().into(),
                    statistic: median(&vals),
                });
            }
        }
    }
    out
}

fn run_dir(out_dir: Option<&Path>, kind: ModelKind, seed: u64) -> Option<std::path::PathBuf> {
    out_dir.map(|d| d.join("runs").join(kind.name()).join(format!("seed-{seed}")))
}

fn benchmark_one_model(
    kind: ModelKind,
    bundle: &DatasetBundle,
    cfg: &BenchmarkConfig,
    out_dir: Option<&Path>,
) -> Result<ModelReport> {
    let started = Instant::now();
    let base_train = TrainConfig {
        model_kind: kind,
        learning_rate: 1e-3,
        batch_size: cfg.training.batch_size,
        max_epochs: cfg.training.max_epochs,
        patience: cfg.training.patience,
        beta: 0.5,
        seed: cfg.seeds[0],
        grid: None,
        channels: None,
        kl_warmup_epochs: cfg.training.kl_warmup_epochs,
    };

    // Hyperparameter tuning on the first seed (VAE kinds); the GMM tunes its
    // component count inside the fit by validation likelihood.
    let tuned = if kind == ModelKind::Gmm {
        None
    } else {
        let mut tune_cfg = base_train.clone();
        tune_cfg.max_epochs = cfg.tuning.max_epochs;
        tune_cfg.patience = cfg.tuning.patience;
        let mut grid = BTreeMap::new();
        grid.insert("learning_rate".to_string(), cfg.tuning.learning_rate_grid.clone());
        grid.insert("beta".to_string(), cfg.tuning.beta_grid.clone());
        tune_cfg.grid = Some(grid);
        let out = grid_search(&tune_cfg, bundle)?;
        Some(TunedHyperparameters {
            learning_rate: out.best.learning_rate,
            beta: out.best.beta,
        })
    };

    let mut seed_results = Vec::new();
    let mut parameter_count = None;
    let mut latent_dims = None;
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let mut train_cfg = base_train.clone();
        train_cfg.seed = seed;
        if let Some(t) = &tuned {
            train_cfg.learning_rate = t.learning_rate;
            train_cfg.beta = t.beta;
        }
        if kind == ModelKind::Gmm {
            let mut grid = BTreeMap::new();
            grid.insert("k".to_string(), cfg.gmm_k_grid.iter().map(|&k| k as f64).collect());
            train_cfg.grid = Some(grid);
        }
        let outcome = train(&train_cfg, bundle)?;
        if let TrainedModel::Vae(vae) = &outcome.model {
            parameter_count = Some(vae.param_count());
            latent_dims = Some(vae.arch.total_latent_dim());
        }
        let records = score_batch(&outcome.model, &bundle.test, &bundle.map)?;
        let (thresholds, target_metrics, separation, distributions) =
            evaluate_scores(&records, bundle)?;

        if let Some(dir) = run_dir(out_dir, kind, seed) {
            std::fs::create_dir_all(&dir)?;
            outcome.model.save_checkpoint(&dir.join("checkpoint.json"))?;
            write_history_csv(&dir.join("history.csv"), &outcome.history)?;
            write_scores_csv(&dir.join("scores.csv"), &records, &bundle.labels, &bundle.map)?;
            write_thresholds_json(&dir.join("thresholds.json"), &thresholds)?;
        }

        seed_results.push(SeedResult {
            seed,
            best_val_loss: outcome.best_val_loss,
            metrics: target_metrics,
            separation,
            distributions,
            train_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(ModelReport {
        kind: kind.name().into(),
        tuned,
        parameter_count,
        latent_dims,
        median_metrics: median_metrics(&seed_results, &bundle.map),
        median_separation: median_separation(&seed_results, &bundle.map),
        seeds: seed_results,
        runtime_seconds: started.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Run the full benchmark: tune, train and evaluate every model kind across
/// all seeds. A failing model is reported while the others proceed.
pub fn run_benchmark(
    bundle: &DatasetBundle,
    cfg: &BenchmarkConfig,
    out_dir: Option<&Path>,
) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let started = Instant::now();
    let kinds = [
        ModelKind::Gmm,
        ModelKind::Univariate,
        ModelKind::Vanilla,
        ModelKind::Composite,
    ];
    let mut models = Vec::new();
    for kind in kinds {
        match benchmark_one_model(kind, bundle, cfg, out_dir) {
            Ok(report) => models.push(report),
            Err(err) => models.push(ModelReport {
                kind: kind.name().into(),
                tuned: None,
                parameter_count: None,
                latent_dims: None,
                seeds: Vec::new(),
                median_metrics: Vec::new(),
                median_separation: Vec::new(),
                runtime_seconds: 0.0,
                error: Some(err.to_string()),
            }),
        }
    }
    Ok(BenchmarkReport { seeds: cfg.seeds.clone(), models, total_seconds: started.elapsed().as_secs_f64() })
}

/// Render the Table-2-shaped Markdown summary.
pub fn render_markdown(report: &BenchmarkReport, map: &SubsystemSignalsMap) -> String {
    let mut out = String::new();
    out.push_str("# Benchmark report\n\n");
    out.push_str(&format!(
        "Seeds: {:?} (headline numbers are medians across seeds). Total runtime: {:.1}s.\n\n",
        report.seeds, report.total_seconds
    ));
    out.push_str("## Evaluation results across subsystems\n\n");
    out.push_str("| Model | Subsys. | F1 | Precision | Recall |\n");
    out.push_str("|-------|---------|-----|-----------|--------|\n");
    let display = |kind: &str| -> String {
        match kind {
            "gmm" => "GMM".into(),
            "univariate" => "Univar. TCN-VAE".into(),
            "vanilla" => "Vanilla TCN-VAE".into(),
            "composite" => "Composite (ours)".into(),
            other => other.to_string(),
        }
    };
    for target in targets(map) {
        for model in &report.models {
            if let Some(m) = model.median_metric(&target) {
                out.push_str(&format!(
                    "| {} | {} | {:.3} | {:.3} | {:.3} |\n",
                    display(&model.kind),
                    target,
                    m.f1,
                    m.precision,
                    m.recall
                ));
            } else if let Some(err) = &model.error {
                out.push_str(&format!(
                    "| {} | {} | failed | failed | failed |\n",
                    display(&model.kind),
                    target
                ));
                let _ = err;
            }
        }
    }
    out.push_str("\n## Fault-vs-healthy separation (median U statistic)\n\n");
    out.push_str("| Model | Target | Fault | U |\n|---|---|---|---|\n");
    for model in &report.models {
        for s in &model.median_separation {
            out.push_str(&format!(
                "| {} | {} | {} | {:.3} |\n",
                display(&model.kind),
                s.target,
                s.fault,
                s.statistic
            ));
        }
    }
    for model in &report.models {
        if let Some(err) = &model.error {
            out.push_str(&format!("\nModel `{}` failed: {}\n", model.kind, err));
        }
    }
    out
}

pub fn write_report(report: &BenchmarkReport, map: &SubsystemSignalsMap, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut f, report)?;
    use std::io::Write;
    f.write_all(b"\n")?;
    f.flush()?;
    std::fs::write(dir.join("report.md"), render_markdown(report, map))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_basics() {
        // pred == labels -> all ones
        let m = metrics(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.f1, m.precision, m.recall), (1.0, 1.0, 1.0));

        // all-negative predictions with positives present
        let m = metrics(&[0, 0, 0], &[1, 0, 1]).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
        assert!(m.zero_predictions);

        // TP=2, FP=1, FN=0 -> precision 2/3, recall 1, f1 0.8
        let m = metrics(&[1, 1, 1, 0], &[1, 1, 0, 0]).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.8).abs() < 1e-12);

        assert!(metrics(&[1, 0], &[1, 0, 1]).is_err());
        assert!(matches!(metrics(&[0, 0], &[0, 0]), Err(CoreError::SingleClassLabels)));
    }

    #[test]
    fn separation_statistic_cases() {
        // identical groups are indistinguishable
        let u = separation_stats(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((u - 0.5).abs() < 1e-12);
        // fully separated
        let u = separation_stats(&[5.0, 6.0], &[1.0, 2.0]).unwrap();
        assert_eq!(u, 1.0);
        // brute-force oracle over all four pairs of {2,3} vs {1,2}:
        // (2>1) + (2=2)/2 + (3>1) + (3>2) = 3.5 of 4
        let u = separation_stats(&[2.0, 3.0], &[1.0, 2.0]).unwrap();
        assert!((u - 0.875).abs() < 1e-12);
        assert!(separation_stats(&[], &[1.0]).is_err());
        assert!(separation_stats(&[1.0], &[]).is_err());
    }

    #[test]
    fn median_is_seed_median() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
