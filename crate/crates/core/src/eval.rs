//! Residual evaluation: reconstructions to anomaly scores, best-F1
//! thresholds, binary health vectors and the observation export consumed by
//! consistency-based diagnosis.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HealthVector, SubsystemSignalsMap, WindowBatch, WindowLabel};
use crate::error::{CoreError, Result};
use crate::model::ModelKind;
use crate::train::TrainedModel;

/// Per-window anomaly scores: one per subsystem plus one global.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub window_id: u64,
    /// Subsystem scores in map order.
    pub per_subsystem: Vec<(String, f64)>,
    pub global: f64,
}

impl ScoreRecord {
    pub fn subsystem_score(&self, id: &str) -> Result<f64> {
        self.per_subsystem
            .iter()
            .find(|(s, _)| s == id)
            .map(|(_, v)| *v)
            .ok_or_else(|| CoreError::UnknownSubsystem(id.to_string()))
    }

    /// Score for a named target: a subsystem id or "all".
    pub fn target_score(&self, target: &str) -> Result<f64> {
        if target == "all" {
            Ok(self.global)
        } else {
            self.subsystem_score(target)
        }
    }
}

/// Mean squared error over all entries of a `(channels, len)` slice pair,
/// accumulated in index order.
fn window_mse(xhat: &ArrayView2<f64>, x: &ArrayView2<f64>) -> f64 {
    debug_assert_eq!(xhat.shape(), x.shape());
    let mut sum = 0.0;
    ndarray::Zip::from(xhat).and(x).for_each(|&a, &b| {
        let d = a - b;
        sum += d * d;
    });
    sum / xhat.len() as f64
}

/// Scoring chunk size; windows are independent, so this only affects
/// parallel granularity.
const SCORE_CHUNK: usize = 16;

fn score_vae_chunk(
    model: &crate::model::MultiVae,
    batch: &WindowBatch,
    map: &SubsystemSignalsMap,
    lo: usize,
    hi: usize,
) -> Result<Vec<ScoreRecord>> {
    let values = batch.values.slice(ndarray::s![lo..hi, .., ..]);
    let rec = model.reconstruct(&values)?;
    let x_groups = model.group_inputs(&values)?;
    let n = hi - lo;
    let kind = model.arch.kind;
    let mut out = Vec::with_capacity(n);
    for w in 0..n {
        let mut per_subsystem = Vec::with_capacity(map.subsystems().len());
        let global;
        match kind {
            ModelKind::Composite => {
                // groups are the subsystems; global comes from the dedicated
                // decoder over the composite latent
                for (g, spec) in model.arch.groups.iter().enumerate() {
                    let mse = window_mse(
                        &rec.group_xhat[g].index_axis(ndarray::Axis(0), w),
                        &x_groups[g].index_axis(ndarray::Axis(0), w),
                    );
                    per_subsystem.push((spec.id.clone(), mse));
                }
                let xhat = rec.global_xhat.as_ref().ok_or_else(|| {
                    CoreError::CheckpointMismatch("composite model lacks a global decoder".into())
                })?;
                let full = full_window(&values, w);
                global = window_mse(&xhat.index_axis(ndarray::Axis(0), w), &full.view());
            }
            ModelKind::Vanilla => {
                // one reconstruction of everything; subsystem score is the
                // average error over the subsystem's columns
                let xhat = rec.group_xhat[0].index_axis(ndarray::Axis(0), w);
                let x = x_groups[0].index_axis(ndarray::Axis(0), w);
                for sub in map.subsystems() {
                    let cols = map.columns_of(sub)?;
                    let mut sum = 0.0;
                    for &c in cols {
                        for t in 0..x.shape()[1] {
                            let d = xhat[[c, t]] - x[[c, t]];
                            sum += d * d;
                        }
                    }
                    per_subsystem.push((sub.clone(), sum / (cols.len() * x.shape()[1]) as f64));
                }
                global = window_mse(&xhat, &x);
            }
            ModelKind::Univariate => {
                // per-signal errors aggregated by mean
                let mut signal_mse = Vec::with_capacity(model.arch.groups.len());
                for (g, spec) in model.arch.groups.iter().enumerate() {
                    let mse = window_mse(
                        &rec.group_xhat[g].index_axis(ndarray::Axis(0), w),
                        &x_groups[g].index_axis(ndarray::Axis(0), w),
                    );
                    signal_mse.push((spec.id.clone(), mse));
                }
                for sub in map.subsystems() {
                    let sigs = map.signals_of(sub)?;
                    let mut sum = 0.0;
                    for s in &sigs {
                        sum += signal_mse
                            .iter()
                            .find(|(id, _)| id == s)
                            .map(|(_, v)| *v)
                            .ok_or_else(|| CoreError::UnknownSignal(s.clone()))?;
                    }
                    per_subsystem.push((sub.clone(), sum / sigs.len() as f64));
                }
                global =
                    signal_mse.iter().map(|(_, v)| v).sum::<f64>() / signal_mse.len() as f64;
            }
            ModelKind::Gmm => unreachable!("GMM is scored separately"),
        }
        out.push(ScoreRecord {
            window_id: batch.ids[lo + w],
            per_subsystem,
            global,
        });
    }
    Ok(out)
}

fn full_window(values: &ndarray::ArrayView3<f64>, w: usize) -> ndarray::Array2<f64> {
    let (t, p) = (values.shape()[1], values.shape()[2]);
    ndarray::Array2::from_shape_fn((p, t), |(c, l)| values[[w, l, c]])
}

fn score_gmm(
    set: &crate::gmm::GmmSet,
    batch: &WindowBatch,
    map: &SubsystemSignalsMap,
) -> Result<Vec<ScoreRecord>> {
    let n = batch.n_windows();
    let records: Vec<Result<ScoreRecord>> = (0..n)
        .into_par_iter()
        .map(|w| {
            let mut per_subsystem = Vec::new();
            for sub in map.subsystems() {
                let cols = map.columns_of(sub)?;
                let t_len = batch.window_len();
                let mut win = ndarray::Array2::<f64>::zeros((t_len, cols.len()));
                for t in 0..t_len {
                    for (c, &col) in cols.iter().enumerate() {
                        win[[t, c]] = batch.values[[w, t, col]];
                    }
                }
                let score = set.model_of(sub)?.score_window(&win.view())?;
                per_subsystem.push((sub.clone(), score));
            }
            // the global GMM score aggregates the per-subsystem negative
            // log-likelihoods, mirroring the univariate aggregation rule
            let global =
                per_subsystem.iter().map(|(_, v)| v).sum::<f64>() / per_subsystem.len() as f64;
            Ok(ScoreRecord { window_id: batch.ids[w], per_subsystem, global })
        })
        .collect();
    records.into_iter().collect()
}

/// Score every window of a batch. Deterministic: VAE kinds reconstruct from
/// the posterior mean, and windows are independent.
pub fn score_batch(
    model: &TrainedModel,
    batch: &WindowBatch,
    map: &SubsystemSignalsMap,
) -> Result<Vec<ScoreRecord>> {
    match model {
        TrainedModel::Vae(vae) => {
            let n = batch.n_windows();
            let mut ranges = Vec::new();
            let mut lo = 0;
            while lo < n {
                let hi = (lo + SCORE_CHUNK).min(n);
                ranges.push((lo, hi));
                lo = hi;
            }
            let parts: Vec<Result<Vec<ScoreRecord>>> = ranges
                .par_iter()
                .map(|&(lo, hi)| score_vae_chunk(vae, batch, map, lo, hi))
                .collect();
            let mut out = Vec::with_capacity(n);
            for p in parts {
                out.extend(p?);
            }
            Ok(out)
        }
        TrainedModel::Gmm(set) => score_gmm(set, batch, map),
    }
}

/// A chosen threshold with the metrics it achieves on the calibration
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Best-F1 thresholds per subsystem plus the global one.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    /// In map order.
    pub per_subsystem: Vec<(String, ThresholdEntry)>,
    pub global: ThresholdEntry,
}

impl ThresholdSet {
    pub fn entry(&self, target: &str) -> Result<&ThresholdEntry> {
        if target == "all" {
            Ok(&self.global)
        } else {
            self.per_subsystem
                .iter()
                .find(|(s, _)| s == target)
                .map(|(_, e)| e)
                .ok_or_else(|| CoreError::MissingThreshold(target.to_string()))
        }
    }
}

fn confusion_f1(scores: &[f64], labels: &[u8], threshold: f64) -> (f64, f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (s, &l) in scores.iter().zip(labels) {
        let pred = *s > threshold;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (f1, precision, recall)
}

/// Choose the threshold maximizing F1 of the rule `score > threshold`.
/// Candidates are the midpoints between consecutive distinct sorted scores
/// plus sentinels below the minimum and above the maximum; ties prefer the
/// larger threshold (fewer alarms).
pub fn best_f1_threshold(scores: &[f64], labels: &[u8]) -> Result<ThresholdEntry> {
    if scores.len() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(CoreError::SingleClassLabels);
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(distinct[0] - 1.0);
    for pair in distinct.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(distinct[distinct.len() - 1] + 1.0);

    let mut best: Option<ThresholdEntry> = None;
    for &t in &candidates {
        let (f1, precision, recall) = confusion_f1(scores, labels, t);
        let take = match &best {
            None => true,
            Some(b) => f1 > b.f1 || (f1 == b.f1 && t > b.threshold),
        };
        if take {
            best = Some(ThresholdEntry { threshold: t, f1, precision, recall });
        }
    }
    Ok(best.expect("candidates are nonempty"))
}

/// Calibrate thresholds for every subsystem plus the global target from
/// labeled test scores.
pub fn calibrate_thresholds(
    records: &[ScoreRecord],
    labels: &[WindowLabel],
    map: &SubsystemSignalsMap,
) -> Result<ThresholdSet> {
    if records.len() != labels.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} labels", records.len()),
            got: format!("{}", labels.len()),
        });
    }
    let mut per_subsystem = Vec::new();
    for sub in map.subsystems() {
        let scores: Vec<f64> = records
            .iter()
            .map(|r| r.subsystem_score(sub))
            .collect::<Result<Vec<_>>>()?;
        let bits: Vec<u8> = labels
            .iter()
            .map(|l| match sub.as_str() {
                "a" => l.label_a,
                "b" => l.label_b,
                _ => 0,
            })
            .collect();
        per_subsystem.push((sub.clone(), best_f1_threshold(&scores, &bits)?));
    }
    let global_scores: Vec<f64> = records.iter().map(|r| r.global).collect();
    let global_bits: Vec<u8> = labels.iter().map(|l| l.label_all).collect();
    let global = best_f1_threshold(&global_scores, &global_bits)?;
    Ok(ThresholdSet { per_subsystem, global })
}

/// Binarize scores into health vectors: `1` ("not OK") iff the score
/// strictly exceeds the threshold.
pub fn binarize(records: &[ScoreRecord], thresholds: &ThresholdSet) -> Result<Vec<HealthVector>> {
    records
        .iter()
        .map(|r| {
            let per_subsystem = r
                .per_subsystem
                .iter()
                .map(|(sub, score)| {
                    let entry = thresholds
                        .per_subsystem
                        .iter()
                        .find(|(s, _)| s == sub)
                        .map(|(_, e)| e)
                        .ok_or_else(|| CoreError::MissingThreshold(sub.clone()))?;
                    Ok((sub.clone(), *score > entry.threshold))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(HealthVector { per_subsystem, global: r.global > thresholds.global.threshold })
        })
        .collect()
}

fn health_to_json(window_id: u64, health: &HealthVector) -> serde_json::Value {
    let mut obs = serde_json::Map::new();
    for (sub, bit) in &health.per_subsystem {
        obs.insert(
            sub.clone(),
            serde_json::Value::String(if *bit { "NOT_OK" } else { "OK" }.to_string()),
        );
    }
    serde_json::json!({
        "window_id": window_id,
        "observations": serde_json::Value::Object(obs),
        "global": if health.global { "NOT_OK" } else { "OK" },
    })
}

/// Write one JSON line per window: the observation input for
/// consistency-based diagnosis.
pub fn export_observations(
    ids: &[u64],
    healths: &[HealthVector],
    out: &mut dyn Write,
) -> Result<()> {
    if ids.len() != healths.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("{} health vectors", ids.len()),
            got: format!("{}", healths.len()),
        });
    }
    for (id, h) in ids.iter().zip(healths) {
        serde_json::to_writer(&mut *out, &health_to_json(*id, h))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Write `scores.csv`: ids, per-subsystem and global scores, label bits.
pub fn write_scores_csv(
    path: &Path,
    records: &[ScoreRecord],
    labels: &[WindowLabel],
    map: &SubsystemSignalsMap,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["window_id".to_string()];
    for sub in map.subsystems() {
        header.push(format!("score_{sub}"));
    }
    header.push("score_global".into());
    header.push("label_a".into());
    header.push("label_b".into());
    header.push("label_all".into());
    w.write_record(&header)?;
    for (r, l) in records.iter().zip(labels) {
        let mut rec = vec![r.window_id.to_string()];
        for (_, v) in &r.per_subsystem {
            rec.push(format!("{v:.15e}"));
        }
        rec.push(format!("{:.15e}", r.global));
        rec.push(l.label_a.to_string());
        rec.push(l.label_b.to_string());
        rec.push(l.label_all.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read `scores.csv` back into records and label bits.
pub fn read_scores_csv(
    path: &Path,
    map: &SubsystemSignalsMap,
) -> Result<(Vec<ScoreRecord>, Vec<(u8, u8, u8)>)> {
    let schema_err = |message: String| CoreError::Schema { file: "scores.csv".into(), message };
    let mut r = csv::Reader::from_path(path)?;
    let mut expected = vec!["window_id".to_string()];
    for sub in map.subsystems() {
        expected.push(format!("score_{sub}"));
    }
    expected.extend(["score_global".into(), "label_a".into(), "label_b".into(), "label_all".into()]);
    let got: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if got != expected {
        return Err(schema_err(format!("bad header {got:?}")));
    }
    let n_subs = map.subsystems().len();
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: u64 = rec[0].parse().map_err(|_| schema_err("bad window_id".into()))?;
        let mut per_subsystem = Vec::new();
        for (i, sub) in map.subsystems().iter().enumerate() {
            let v: f64 = rec[1 + i].parse().map_err(|_| schema_err("bad score".into()))?;
            per_subsystem.push((sub.clone(), v));
        }
        let global: f64 = rec[1 + n_subs].parse().map_err(|_| schema_err("bad score".into()))?;
        let la: u8 = rec[2 + n_subs].parse().map_err(|_| schema_err("bad label".into()))?;
        let lb: u8 = rec[3 + n_subs].parse().map_err(|_| schema_err("bad label".into()))?;
        let lall: u8 = rec[4 + n_subs].parse().map_err(|_| schema_err("bad label".into()))?;
        records.push(ScoreRecord { window_id: id, per_subsystem, global });
        labels.push((la, lb, lall));
    }
    Ok((records, labels))
}

/// Serialize thresholds in the published schema.
pub fn thresholds_to_json(set: &ThresholdSet) -> serde_json::Value {
    let mut per_sub = serde_json::Map::new();
    let mut f1 = serde_json::Map::new();
    let mut precision = serde_json::Map::new();
    let mut recall = serde_json::Map::new();
    for (sub, e) in &set.per_subsystem {
        per_sub.insert(sub.clone(), serde_json::json!(e.threshold));
        f1.insert(sub.clone(), serde_json::json!(e.f1));
        precision.insert(sub.clone(), serde_json::json!(e.precision));
        recall.insert(sub.clone(), serde_json::json!(e.recall));
    }
    f1.insert("all".into(), serde_json::json!(set.global.f1));
    precision.insert("all".into(), serde_json::json!(set.global.precision));
    recall.insert("all".into(), serde_json::json!(set.global.recall));
    serde_json::json!({
        "per_subsystem": serde_json::Value::Object(per_sub),
        "global": set.global.threshold,
        "achieved_f1": serde_json::Value::Object(f1),
        "achieved_precision": serde_json::Value::Object(precision),
        "achieved_recall": serde_json::Value::Object(recall),
    })
}

pub fn write_thresholds_json(path: &Path, set: &ThresholdSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &thresholds_to_json(set))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_thresholds_json(path: &Path, map: &SubsystemSignalsMap) -> Result<ThresholdSet> {
    let doc: serde_json::Value =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let mut per_subsystem = Vec::new();
    for sub in map.subsystems() {
        let t = doc["per_subsystem"][sub].as_f64().ok_or_else(|| CoreError::Schema {
            file: "thresholds.json".into(),
            message: format!("missing threshold for '{sub}'"),
        })?;
        let f1 = doc["achieved_f1"][sub].as_f64().unwrap_or(f64::NAN);
        let precision = doc["achieved_precision"][sub].as_f64().unwrap_or(f64::NAN);
        let recall = doc["achieved_recall"][sub].as_f64().unwrap_or(f64::NAN);
        per_subsystem.push((sub.clone(), ThresholdEntry { threshold: t, f1, precision, recall }));
    }
    let global = ThresholdEntry {
        threshold: doc["global"].as_f64().ok_or_else(|| CoreError::Schema {
            file: "thresholds.json".into(),
            message: "missing global threshold".into(),
        })?,
        f1: doc["achieved_f1"]["all"].as_f64().unwrap_or(f64::NAN),
        precision: doc["achieved_precision"]["all"].as_f64().unwrap_or(f64::NAN),
        recall: doc["achieved_recall"]["all"].as_f64().unwrap_or(f64::NAN),
    };
    Ok(ThresholdSet { per_subsystem, global })
}
