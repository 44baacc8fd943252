//! End-to-end tests of the `symptom-bench` binary: simulate -> train ->
//! evaluate -> export-observations on a miniature config, exit-code
//! contracts, and rerun determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symptom-bench"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_SIM: &str = r#"
seed = 7
window_len = 64
n_train_windows = 16
n_val_windows = 8
n_test_per_fault = 4
fault3_shift = 12

[causal]
low_value = -1.0
high_value = 1.0
min_duration = 40
max_duration = 80
b_delay = 6

[derived]
second_order_damping = 0.3
second_order_natural_freq = 0.6
first_order_tau = 4
noise_sigma = 0.1
lowpass_alpha = 0.4
highpass_alpha = 0.2
"#;

fn tiny_train(dataset: &Path) -> String {
    format!(
        r#"
model_kind = "composite"
dataset = "{}"
learning_rate = 3e-3
batch_size = 8
max_epochs = 3
patience = 2
beta = 0.1
seed = 5
channels = [6, 6]
"#,
        dataset.display()
    )
}

#[test]
fn pipeline_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let sim_cfg = dir.path().join("sim.toml");
    std::fs::write(&sim_cfg, TINY_SIM).unwrap();

    // simulate
    let data = dir.path().join("data");
    let out = run(&[
        "simulate",
        "--config",
        sim_cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for f in ["meta.json", "train.csv", "val.csv", "test.csv", "test_labels.csv", "manifest.json"] {
        assert!(data.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["config_digest"].as_str().unwrap().starts_with("sha256:"));

    // train
    let train_cfg = dir.path().join("train.toml");
    std::fs::write(&train_cfg, tiny_train(&data)).unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for f in ["checkpoint.json", "history.csv", "train_summary.json", "manifest.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    // evaluate
    let eval_cfg = dir.path().join("eval.toml");
    std::fs::write(
        &eval_cfg,
        format!(
            "dataset = \"{}\"\ncheckpoint = \"{}\"\n",
            data.display(),
            run_dir.join("checkpoint.json").display()
        ),
    )
    .unwrap();
    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "evaluate",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for f in ["scores.csv", "thresholds.json", "metrics.json", "manifest.json"] {
        assert!(eval_dir.join(f).exists(), "missing {f}");
    }

    // export observations
    let export_cfg = dir.path().join("export.toml");
    std::fs::write(
        &export_cfg,
        format!(
            "dataset = \"{}\"\nscores = \"{}\"\nthresholds = \"{}\"\n",
            data.display(),
            eval_dir.join("scores.csv").display(),
            eval_dir.join("thresholds.json").display()
        ),
    )
    .unwrap();
    let obs_dir = dir.path().join("obs");
    let out = run(&[
        "export-observations",
        "--config",
        export_cfg.to_str().unwrap(),
        "--out",
        obs_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let obs = std::fs::read_to_string(obs_dir.join("observations.jsonl")).unwrap();
    assert_eq!(obs.lines().count(), 8 * 4); // 4 per fault * 4 + 16 healthy
    let first: serde_json::Value = serde_json::from_str(obs.lines().next().unwrap()).unwrap();
    assert!(first["observations"]["a"].is_string());
    assert!(first["global"].is_string());
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sim_cfg = dir.path().join("sim.toml");
    std::fs::write(&sim_cfg, TINY_SIM).unwrap();
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    for d in [&d1, &d2] {
        let out = run(&[
            "simulate",
            "--config",
            sim_cfg.to_str().unwrap(),
            "--out",
            d.to_str().unwrap(),
            "--seed",
            "42",
        ]);
        assert_code(&out, 0);
    }
    for f in ["meta.json", "train.csv", "val.csv", "test.csv", "test_labels.csv"] {
        let a = std::fs::read(d1.join(f)).unwrap();
        let b = std::fs::read(d2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }

    // train twice with the same seed: identical history files
    let train_cfg = dir.path().join("train.toml");
    std::fs::write(&train_cfg, tiny_train(&d1)).unwrap();
    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    for r in [&r1, &r2] {
        let out = run(&[
            "train",
            "--config",
            train_cfg.to_str().unwrap(),
            "--out",
            r.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert_code(&out, 0);
    }
    assert_eq!(
        std::fs::read(r1.join("history.csv")).unwrap(),
        std::fs::read(r2.join("history.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(r1.join("checkpoint.json")).unwrap(),
        std::fs::read(r2.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn exit_codes_for_bad_usage_and_bad_config() {
    // unknown subcommand
    let out = run(&["frobnicate"]);
    assert_code(&out, 1);

    // unknown flag
    let out = run(&["simulate", "--config", "x.toml", "--out", "y", "--bogus"]);
    assert_code(&out, 1);

    // --help exits 0 and documents every flag
    let out = run(&["--help"]);
    assert_code(&out, 0);
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["simulate", "train", "evaluate", "benchmark", "export-observations"] {
        assert!(help.contains(sub), "help missing {sub}");
    }
    let out = run(&["simulate", "--help"]);
    assert_code(&out, 0);
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--out", "--seed"] {
        assert!(help.contains(flag), "help missing {flag}");
    }

    // missing config file
    let out = run(&["simulate", "--config", "/nonexistent.toml", "--out", "/tmp/x"]);
    assert_code(&out, 1);

    // config with an unknown key
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, format!("{TINY_SIM}\nbogus_key = 1\n")).unwrap();
    let out = run(&[
        "simulate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    // train without any seed source
    let data = dir.path().join("data");
    let sim_cfg = dir.path().join("sim.toml");
    std::fs::write(&sim_cfg, TINY_SIM).unwrap();
    assert_code(
        &run(&["simulate", "--config", sim_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0,
    );
    let train_cfg = dir.path().join("train.toml");
    let cfg_text = tiny_train(&data).replace("seed = 5\n", "");
    std::fs::write(&train_cfg, cfg_text).unwrap();
    let out = bin()
        .args(["train", "--config", train_cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()])
        .env_remove("SYMPTOM_BENCH_SEED")
        .output()
        .unwrap();
    assert_code(&out, 1);

    // same command picks the seed from the environment fallback
    let out = bin()
        .args(["train", "--config", train_cfg.to_str().unwrap(), "--out", dir.path().join("r2").to_str().unwrap()])
        .env("SYMPTOM_BENCH_SEED", "9")
        .output()
        .unwrap();
    assert_code(&out, 0);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("r2").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn tiny_benchmark_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("benchmark.toml");
    std::fs::write(
        &cfg,
        r#"
[benchmark]
seeds = [3]
gmm_k_grid = [1, 2]

[benchmark.tuning]
max_epochs = 2
patience = 1
learning_rate_grid = [3e-3]
beta_grid = [0.1]

[benchmark.training]
max_epochs = 3
patience = 2
batch_size = 8

[simulator]
seed = 7
window_len = 64
n_train_windows = 16
n_val_windows = 8
n_test_per_fault = 4
fault3_shift = 12

[simulator.causal]
low_value = -1.0
high_value = 1.0
min_duration = 40
max_duration = 80
b_delay = 6

[simulator.derived]
second_order_damping = 0.3
second_order_natural_freq = 0.6
first_order_tau = 4
noise_sigma = 0.1
lowpass_alpha = 0.4
highpass_alpha = 0.2
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("bench");
    let out = run(&[
        "benchmark",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let models = report["models"].as_array().unwrap();
    assert_eq!(models.len(), 4);
    let kinds: Vec<&str> = models.iter().map(|m| m["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["gmm", "univariate", "vanilla", "composite"]);
    for m in models {
        assert!(m["error"].is_null(), "{} failed: {}", m["kind"], m["error"]);
    }
    assert!(out_dir.join("report.md").exists());
    assert!(out_dir.join("data").join("train.csv").exists());
}


#[test]
fn shipped_benchmark_config_matches_builtin_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/benchmark.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let parsed: symptom_core::config::BenchmarkFileConfig =
        symptom_core::config::parse_toml(&text, "configs/benchmark.toml").unwrap();
    let default = symptom_core::config::BenchmarkFileConfig::default();
    assert_eq!(parsed.simulator, default.simulator);
    assert_eq!(parsed.benchmark.seeds, default.benchmark.seeds);
    assert_eq!(parsed.benchmark.gmm_k_grid, default.benchmark.gmm_k_grid);
    assert_eq!(parsed.benchmark.tuning.max_epochs, default.benchmark.tuning.max_epochs);
    assert_eq!(
        parsed.benchmark.tuning.learning_rate_grid,
        default.benchmark.tuning.learning_rate_grid
    );
    assert_eq!(parsed.benchmark.tuning.beta_grid, default.benchmark.tuning.beta_grid);
    assert_eq!(parsed.benchmark.training.max_epochs, default.benchmark.training.max_epochs);
    assert_eq!(parsed.benchmark.training.patience, default.benchmark.training.patience);
    assert_eq!(parsed.benchmark.training.batch_size, default.benchmark.training.batch_size);
    assert_eq!(
        parsed.benchmark.training.kl_warmup_epochs,
        default.benchmark.training.kl_warmup_epochs
    );
}
