//! Criterion benchmarks for the hot paths: window generation, the
//! convolutional forward/backward pass, mixture scoring and threshold
//! search.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;

use symptom_core::eval::best_f1_threshold;
use symptom_core::gmm::{gmm_fit, EmOptions};
use symptom_core::model::{ModelKind, MultiVae, VaeArch};
use symptom_core::nn::standard_normal_matrix;
use symptom_core::rng::{substream, StreamDomain};
use symptom_core::sim::{build_dataset, generate_causal, SimConfig};
use symptom_core::SubsystemSignalsMap;

fn small_sim_config() -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.n_train_windows = 8;
    cfg.n_val_windows = 4;
    cfg.n_test_per_fault = 2;
    cfg
}

fn bench_simulator(c: &mut Criterion) {
    let cfg = small_sim_config();
    c.bench_function("simulator/generate_causal_20k", |b| {
        b.iter(|| generate_causal(&cfg, 20_000).unwrap())
    });
    c.bench_function("simulator/build_dataset_small", |b| {
        b.iter(|| build_dataset(&cfg).unwrap())
    });
}

fn bench_model(c: &mut Criterion) {
    let map = SubsystemSignalsMap::simulated();
    let arch = VaeArch::for_kind(ModelKind::Composite, &map, 500, 0.1, 3).unwrap();
    let model = MultiVae::new(arch).unwrap();
    let bundle = build_dataset(&small_sim_config()).unwrap();
    let batch = bundle
        .train
        .values
        .slice(ndarray::s![0..4, .., ..])
        .to_owned();
    let m = model.arch.total_latent_dim();

    c.bench_function("model/composite_reconstruct_4w", |b| {
        b.iter(|| model.reconstruct(&batch.view()).unwrap())
    });
    c.bench_function("model/composite_loss_and_grads_4w", |b| {
        let mut rng = substream(5, StreamDomain::ReparamNoise, 0);
        let noise = standard_normal_matrix(&mut rng, 4, m);
        b.iter(|| model.loss_and_grads(&batch.view(), &noise).unwrap())
    });
}

fn bench_gmm(c: &mut Criterion) {
    let mut rng = substream(7, StreamDomain::GmmInit, 0);
    let samples: Array2<f64> = standard_normal_matrix(&mut rng, 4000, 3);
    c.bench_function("gmm/fit_k4_4000pts", |b| {
        b.iter_batched(
            || samples.clone(),
            |s| gmm_fit(&s.view(), 4, 1, EmOptions { max_iters: 50, tol: 1e-6, restarts: 1 }).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let fit = gmm_fit(&samples.view(), 4, 1, EmOptions::default()).unwrap();
    let window = standard_normal_matrix(&mut rng, 500, 3);
    c.bench_function("gmm/score_window_500", |b| {
        b.iter(|| fit.model.score_window(&window.view()).unwrap())
    });
}

fn bench_thresholds(c: &mut Criterion) {
    let mut rng = substream(9, StreamDomain::Trace, 0);
    use rand::Rng;
    let scores: Vec<f64> = (0..800).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..800).map(|i| (i % 2) as u8).collect();
    c.bench_function("eval/best_f1_threshold_800", |b| {
        b.iter(|| best_f1_threshold(&scores, &labels).unwrap())
    });
}

criterion_group!(benches, bench_simulator, bench_model, bench_gmm, bench_thresholds);
criterion_main!(benches);
