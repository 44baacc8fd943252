//! End-to-end wiring on a miniature dataset: simulate -> persist -> load ->
//! train -> score -> threshold -> binarize -> export, plus artifact
//! recomputation.

use std::collections::BTreeMap;

use symptom_core::data::{load_dataset, write_dataset};
use symptom_core::error::CoreError;
use symptom_core::eval::{
    binarize, calibrate_thresholds, export_observations, read_scores_csv, read_thresholds_json,
    score_batch, write_scores_csv, write_thresholds_json,
};
use symptom_core::model::ModelKind;
use symptom_core::report::{metrics, run_benchmark, BenchmarkConfig, FinalTrainConfig, TuningConfig};
use symptom_core::sim::{build_dataset, SimConfig};
use symptom_core::train::{train, TrainConfig, TrainedModel};

fn tiny_sim() -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.window_len = 64;
    cfg.n_train_windows = 16;
    cfg.n_val_windows = 8;
    cfg.n_test_per_fault = 4;
    cfg.fault3_shift = 12;
    cfg.causal.min_duration = 40;
    cfg.causal.max_duration = 80;
    cfg.causal.b_delay = 6;
    cfg.derived.second_order_natural_freq = 0.6;
    cfg.derived.first_order_tau = 4;
    cfg.derived.lowpass_alpha = 0.4;
    cfg.derived.highpass_alpha = 0.2;
    cfg
}

fn tiny_train(kind: ModelKind, seed: u64) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        learning_rate: 3e-3,
        batch_size: 8,
        max_epochs: 4,
        patience: 3,
        beta: 0.1,
        seed,
        grid: None,
        channels: Some((6, 6)),
        kl_warmup_epochs: 10,
    }
}

#[test]
fn dataset_roundtrip_through_disk() {
    let bundle = build_dataset(&tiny_sim()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&bundle, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();

    assert_eq!(loaded.map, bundle.map);
    assert_eq!(loaded.labels, bundle.labels);
    assert_eq!(loaded.train.ids, bundle.train.ids);
    let max_err = bundle
        .test
        .values
        .iter()
        .zip(loaded.test.values.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0f64, f64::max);
    assert!(max_err < 1e-9, "roundtrip relative error {max_err}");
}

#[test]
fn load_rejects_corrupt_header_and_missing_labels() {
    let bundle = build_dataset(&tiny_sim()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&bundle, dir.path()).unwrap();

    // corrupt a header column name
    let train_csv = dir.path().join("train.csv");
    let text = std::fs::read_to_string(&train_csv).unwrap();
    std::fs::write(&train_csv, text.replacen("a2", "zz", 1)).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    match err {
        CoreError::Schema { message, .. } => assert!(message.contains("a2"), "{message}"),
        other => panic!("expected schema error, got {other}"),
    }

    // restore, then drop one label row
    write_dataset(&bundle, dir.path()).unwrap();
    let labels_csv = dir.path().join("test_labels.csv");
    let text = std::fs::read_to_string(&labels_csv).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(3);
    std::fs::write(&labels_csv, lines.join("\n")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    match err {
        CoreError::LabelJoin { missing, .. } => assert_eq!(missing, vec![2]),
        other => panic!("expected label join error, got {other}"),
    }
}

#[test]
fn full_pipeline_to_observations() {
    let bundle = build_dataset(&tiny_sim()).unwrap();
    let out = train(&tiny_train(ModelKind::Composite, 3), &bundle).unwrap();
    let records = score_batch(&out.model, &bundle.test, &bundle.map).unwrap();
    assert_eq!(records.len(), bundle.test.n_windows());

    let thresholds = calibrate_thresholds(&records, &bundle.labels, &bundle.map).unwrap();
    let healths = binarize(&records, &thresholds).unwrap();
    assert_eq!(healths.len(), records.len());

    let dir = tempfile::tempdir().unwrap();
    write_scores_csv(&dir.path().join("scores.csv"), &records, &bundle.labels, &bundle.map).unwrap();
    write_thresholds_json(&dir.path().join("thresholds.json"), &thresholds).unwrap();

    // report metrics recompute exactly from artifacts on disk
    let (records2, bits) = read_scores_csv(&dir.path().join("scores.csv"), &bundle.map).unwrap();
    let thresholds2 = read_thresholds_json(&dir.path().join("thresholds.json"), &bundle.map).unwrap();
    let healths2 = binarize(&records2, &thresholds2).unwrap();
    for target in ["a", "b", "all"] {
        let pred: Vec<u8> = healths
            .iter()
            .map(|h| if target == "all" { h.global as u8 } else { h.get(target).unwrap() as u8 })
            .collect();
        let pred2: Vec<u8> = healths2
            .iter()
            .map(|h| if target == "all" { h.global as u8 } else { h.get(target).unwrap() as u8 })
            .collect();
        assert_eq!(pred, pred2, "binarization differs after disk roundtrip for {target}");
        let labels: Vec<u8> = bits
            .iter()
            .map(|(a, b, all)| match target {
                "a" => *a,
                "b" => *b,
                _ => *all,
            })
            .collect();
        let m1 = metrics(&pred, &labels).unwrap();
        let m2 = metrics(&pred2, &labels).unwrap();
        assert_eq!(m1, m2);
    }

    let ids: Vec<u64> = records.iter().map(|r| r.window_id).collect();
    let mut buf = Vec::new();
    export_observations(&ids, &healths, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), records.len());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["observations"]["a"].is_string());
        assert!(v["observations"]["b"].is_string());
        assert!(v["global"].is_string());
    }
}

#[test]
fn grid_search_integrates_with_training() {
    let bundle = build_dataset(&tiny_sim()).unwrap();
    let mut cfg = tiny_train(ModelKind::Vanilla, 5);
    let mut grid = BTreeMap::new();
    grid.insert("learning_rate".into(), vec![3e-3, 1e-3]);
    cfg.grid = Some(grid);
    let out = symptom_core::train::grid_search(&cfg, &bundle).unwrap();
    assert_eq!(out.evaluations.len(), 2);
    let outcome = train(&out.best, &bundle).unwrap();
    assert!(matches!(outcome.model, TrainedModel::Vae(_)));
}

#[test]
fn tiny_benchmark_produces_all_models() {
    let bundle = build_dataset(&tiny_sim()).unwrap();
    let cfg = BenchmarkConfig {
        seeds: vec![3],
        tuning: TuningConfig {
            max_epochs: 2,
            patience: 1,
            learning_rate_grid: vec![3e-3],
            beta_grid: vec![0.1],
        },
        training: FinalTrainConfig {
            max_epochs: 3,
            patience: 2,
            batch_size: 8,
            kl_warmup_epochs: 1,
        },
        gmm_k_grid: vec![1, 2],
    };
    let dir = tempfile::tempdir().unwrap();
    let report = run_benchmark(&bundle, &cfg, Some(dir.path())).unwrap();
    assert_eq!(report.models.len(), 4);
    for model in &report.models {
        assert!(model.error.is_none(), "{} failed: {:?}", model.kind, model.error);
        assert!(!model.median_metrics.is_empty());
        let run_dir = dir.path().join("runs").join(&model.kind).join("seed-3");
        for f in ["checkpoint.json", "history.csv", "scores.csv", "thresholds.json"] {
            assert!(run_dir.join(f).exists(), "missing {}/{f}", model.kind);
        }
    }
    assert!(dir.path().join("runs").exists());
    // the report is reproducible from its inputs
    let again = run_benchmark(&bundle, &cfg, None).unwrap();
    for (a, b) in report.models.iter().zip(&again.models) {
        assert_eq!(a.median_metrics.len(), b.median_metrics.len());
        for (x, y) in a.median_metrics.iter().zip(&b.median_metrics) {
            assert_eq!(x.f1, y.f1, "{} {} f1 differs between runs", a.kind, x.target);
        }
    }
}
