//! Deterministic simulator for the two-subsystem, six-signal benchmark
//! system: a square-wave steering signal `a`, its delayed copy `b`, six
//! derived sensor signals, and four labeled fault scenarios.
//!
//! Every window draws its randomness from a counter-based substream of the
//! dataset seed, so generation is parallel yet bit-reproducible.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Standardization, SubsystemSignalsMap, WindowBatch, WindowLabel};
use crate::error::{CoreError, Result};
use crate::rng::{substream, StreamDomain};

/// Square-wave steering-signal parameters. Segment durations are sampled
/// uniformly from `[min_duration, max_duration]` timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalSignalSpec {
    pub low_value: f64,
    pub high_value: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Delay of `b` behind `a`, in timesteps.
    pub b_delay: usize,
}

impl CausalSignalSpec {
    fn validate(&self) -> Result<()> {
        if self.min_duration == 0 || self.max_duration == 0 {
            return Err(CoreError::Config("segment durations must be positive".into()));
        }
        if self.min_duration > self.max_duration {
            return Err(CoreError::Config("min_duration must be <= max_duration".into()));
        }
        if self.b_delay >= self.min_duration {
            return Err(CoreError::Config("b_delay must be smaller than min_duration".into()));
        }
        if !(self.low_value < self.high_value) {
            return Err(CoreError::Config("low_value must be below high_value".into()));
        }
        Ok(())
    }
}

/// Parameters of the six derived sensor signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedSignalParams {
    /// Damping ratio of the second-order response (0 < zeta < 1).
    pub second_order_damping: f64,
    /// Natural frequency of the second-order response, rad/timestep.
    pub second_order_natural_freq: f64,
    /// First-order tracking time constant, timesteps.
    pub first_order_tau: usize,
    /// Standard deviation of the additive noise on `b1`.
    pub noise_sigma: f64,
    /// Single-pole low-pass coefficient for `b2`, in (0, 1).
    pub lowpass_alpha: f64,
    /// Pole of the low-pass subtracted to form the high-pass `b3`, in (0, 1).
    pub highpass_alpha: f64,
}

impl DerivedSignalParams {
    fn validate(&self) -> Result<()> {
        let z = self.second_order_damping;
        if !(z > 0.0 && z < 1.0) {
            return Err(CoreError::Config("second_order_damping must lie in (0, 1)".into()));
        }
        if self.second_order_natural_freq <= 0.0 {
            return Err(CoreError::Config("second_order_natural_freq must be positive".into()));
        }
        if self.first_order_tau < 1 {
            return Err(CoreError::Config("first_order_tau must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::Config("noise_sigma must be >= 0".into()));
        }
        for (name, a) in [("lowpass_alpha", self.lowpass_alpha), ("highpass_alpha", self.highpass_alpha)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(CoreError::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// The four fault scenarios plus the healthy regime, with the Table-1 label
/// allocation `(subsystem a, subsystem b, all signals)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    Healthy,
    Fault1StuckAt,
    Fault2Offset,
    Fault3Shift,
    Fault4Frequency,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::Healthy,
        FaultKind::Fault1StuckAt,
        FaultKind::Fault2Offset,
        FaultKind::Fault3Shift,
        FaultKind::Fault4Frequency,
    ];

    pub const FAULTS: [FaultKind; 4] = [
        FaultKind::Fault1StuckAt,
        FaultKind::Fault2Offset,
        FaultKind::Fault3Shift,
        FaultKind::Fault4Frequency,
    ];

    /// Label bits `(label_a, label_b, label_all)`.
    pub fn labels(self) -> (u8, u8, u8) {
        match self {
            FaultKind::Healthy => (0, 0, 0),
            FaultKind::Fault1StuckAt => (1, 0, 1),
            FaultKind::Fault2Offset => (0, 1, 1),
            FaultKind::Fault3Shift => (0, 0, 1),
            FaultKind::Fault4Frequency => (1, 1, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Healthy => "healthy",
            FaultKind::Fault1StuckAt => "fault1_stuck_at",
            FaultKind::Fault2Offset => "fault2_offset",
            FaultKind::Fault3Shift => "fault3_shift",
            FaultKind::Fault4Frequency => "fault4_frequency",
        }
    }

    pub fn parse(s: &str) -> Option<FaultKind> {
        FaultKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Full simulator configuration. An identical config (including the seed)
/// produces a bit-identical dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub window_len: usize,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    /// Test windows per fault scenario; the healthy test share is four times
    /// this so labels stay balanced.
    pub n_test_per_fault: usize,
    /// Additional delay applied to subsystem b under fault 3, timesteps.
    pub fault3_shift: usize,
    pub causal: CausalSignalSpec,
    pub derived: DerivedSignalParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 7,
            window_len: 500,
            n_train_windows: 256,
            n_val_windows: 64,
            n_test_per_fault: 100,
            fault3_shift: 100,
            causal: CausalSignalSpec {
                low_value: -1.0,
                high_value: 1.0,
                min_duration: 500,
                max_duration: 1000,
                b_delay: 50,
            },
            derived: DerivedSignalParams {
                second_order_damping: 0.3,
                second_order_natural_freq: 0.31,
                first_order_tau: 10,
                noise_sigma: 0.1,
                lowpass_alpha: 0.15,
                highpass_alpha: 0.05,
            },
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(CoreError::Config("window_len must be positive".into()));
        }
        if self.n_train_windows == 0 || self.n_val_windows == 0 || self.n_test_per_fault == 0 {
            return Err(CoreError::Config("window counts must be positive".into()));
        }
        self.causal.validate()?;
        self.derived.validate()?;
        Ok(())
    }

    /// Timesteps needed ahead of a window for all filter transients from
    /// earlier segments to decay below 0.1%.
    fn settle_margin(&self) -> usize {
        let d = &self.derived;
        let ln1000 = 1000f64.ln();
        let n_second = ln1000 / (d.second_order_damping * d.second_order_natural_freq);
        let n_first = ln1000 * d.first_order_tau as f64;
        let n_low = ln1000 / -(1.0 - d.lowpass_alpha).ln();
        let n_high = ln1000 / -(1.0 - d.highpass_alpha).ln();
        n_second.max(n_first).max(n_low).max(n_high).ceil() as usize
    }
}

/// Alternating two-level trace with uniformly distributed segment durations
/// and a stationary start: the first segment is length-biased and entered at
/// a uniform position, so a trace behaves like a slice of an infinitely long
/// run.
fn alternating_trace(
    rng: &mut ChaCha8Rng,
    spec: &CausalSignalSpec,
    min_d: usize,
    max_d: usize,
    len: usize,
) -> Vec<f64> {
    let mut high = rng.gen::<bool>();
    let first_total = loop {
        let d = rng.gen_range(min_d..=max_d);
        if rng.gen::<f64>() * max_d as f64 <= d as f64 {
            break d;
        }
    };
    let mut remaining = first_total - rng.gen_range(0..first_total);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let level = if high { spec.high_value } else { spec.low_value };
        let take = remaining.min(len - out.len());
        out.extend(std::iter::repeat(level).take(take));
        high = !high;
        remaining = rng.gen_range(min_d..=max_d);
    }
    out
}

/// Generate the two causal signals over `n_steps`: `a` alternates between
/// the configured levels and `b` is `a` delayed by `b_delay` (the delay is
/// backed by generated prehistory, so `b` is a true shifted copy).
pub fn generate_causal(cfg: &SimConfig, n_steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_steps == 0 {
        return Err(CoreError::Config("n_steps must be positive".into()));
    }
    cfg.validate()?;
    let mut rng = substream(cfg.seed, StreamDomain::Trace, 0);
    let delay = cfg.causal.b_delay;
    let c = alternating_trace(
        &mut rng,
        &cfg.causal,
        cfg.causal.min_duration,
        cfg.causal.max_duration,
        n_steps + delay,
    );
    let a = c[delay..].to_vec();
    let b = c[..n_steps].to_vec();
    Ok((a, b))
}

/// The six derived signals of one generation pass.
#[derive(Debug, Clone)]
pub struct DerivedSignals {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub a3: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Exact zero-order-hold step of the underdamped second-order system
/// `x'' + 2*zeta*wn*x' + wn^2 x = wn^2 u`. State is propagated relative to
/// the equilibrium `(u, 0)`, which is exact for piecewise-constant input.
struct SecondOrderZoh {
    a11: f64,
    a12: f64,
    a21: f64,
    a22: f64,
}

impl SecondOrderZoh {
    fn new(zeta: f64, wn: f64) -> Self {
        let wd = wn * (1.0 - zeta * zeta).sqrt();
        let e = (-zeta * wn).exp();
        let (s, c) = wd.sin_cos();
        SecondOrderZoh {
            a11: e * (c + zeta * wn * s / wd),
            a12: e * (s / wd),
            a21: -e * (wn * wn * s / wd),
            a22: e * (c - zeta * wn * s / wd),
        }
    }

    fn step(&self, x: f64, v: f64, u: f64) -> (f64, f64) {
        let dx = x - u;
        (u + self.a11 * dx + self.a12 * v, self.a21 * dx + self.a22 * v)
    }
}

/// Derive the six sensor signals from the causal pair. Filters start at the
/// steady state of the first sample, so callers wanting stationary windows
/// should pass a settling margin of prehistory.
pub fn derive_signals(
    a: &[f64],
    b: &[f64],
    params: &DerivedSignalParams,
    rng: &mut ChaCha8Rng,
) -> Result<DerivedSignals> {
    if a.len() != b.len() {
        return Err(CoreError::ShapeMismatch {
            expected: format!("b of length {}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    params.validate()?;
    let n = a.len();

    let a1 = a.to_vec();

    let zoh = SecondOrderZoh::new(params.second_order_damping, params.second_order_natural_freq);
    let mut a2 = Vec::with_capacity(n);
    let (mut x, mut v) = (a[0], 0.0);
    for &u in a {
        a2.push(x);
        let (nx, nv) = zoh.step(x, v, u);
        x = nx;
        v = nv;
    }

    let alpha1 = 1.0 - (-1.0 / params.first_order_tau as f64).exp();
    let mut a3 = Vec::with_capacity(n);
    let mut y = a[0];
    for &u in a {
        a3.push(y);
        y += alpha1 * (u - y);
    }

    let mut b1 = Vec::with_capacity(n);
    for &u in b {
        let noise: f64 = StandardNormal.sample(rng);
        b1.push(u + params.noise_sigma * noise);
    }

    let mut b2 = Vec::with_capacity(n);
    let mut lp = b[0];
    for &u in b {
        lp += params.lowpass_alpha * (u - lp);
        b2.push(lp);
    }

    let mut b3 = Vec::with_capacity(n);
    let mut lp_h = b[0];
    for &u in b {
        lp_h += params.highpass_alpha * (u - lp_h);
        b3.push(u - lp_h);
    }

    Ok(DerivedSignals { a1, a2, a3, b1, b2, b3 })
}

/// Generate one raw (unstandardized) window of shape `(window_len, 6)` for
/// the given scenario from a dedicated random stream.
fn gen_window(cfg: &SimConfig, rng: &mut ChaCha8Rng, kind: FaultKind) -> Array2<f64> {
    let t_len = cfg.window_len;
    let margin = cfg.settle_margin();
    let delay = match kind {
        FaultKind::Fault3Shift => cfg.causal.b_delay + cfg.fault3_shift,
        _ => cfg.causal.b_delay,
    };
    let (min_d, max_d) = match kind {
        FaultKind::Fault4Frequency => {
            ((cfg.causal.min_duration / 2).max(1), (cfg.causal.max_duration / 2).max(1))
        }
        _ => (cfg.causal.min_duration, cfg.causal.max_duration),
    };

    let total = margin + delay + t_len;
    let c = alternating_trace(rng, &cfg.causal, min_d, max_d, total);
    let a_series = &c[delay..];
    let b_series = &c[..total - delay];
    let derived = derive_signals(a_series, b_series, &cfg.derived, rng)
        .expect("equal-length series from one trace");

    let offset = a_series.len() - t_len;
    let mut w = Array2::<f64>::zeros((t_len, 6));
    for t in 0..t_len {
        w[[t, 0]] = derived.a1[offset + t];
        w[[t, 1]] = derived.a2[offset + t];
        w[[t, 2]] = derived.a3[offset + t];
        w[[t, 3]] = derived.b1[offset + t];
        w[[t, 4]] = derived.b2[offset + t];
        w[[t, 5]] = derived.b3[offset + t];
    }

    match kind {
        FaultKind::Fault1StuckAt => {
            // Stuck at the low level, which lies inside the healthy range of
            // a1 — a univariate view cannot tell it from a resting state.
            for t in 0..t_len {
                w[[t, 0]] = cfg.causal.low_value;
            }
        }
        FaultKind::Fault2Offset => {
            for t in 0..t_len {
                w[[t, 5]] += 1.0;
            }
        }
        _ => {}
    }
    w
}

/// Apply a fault scenario to a batch of raw healthy windows. Faults 1 and 2
/// post-process the given windows; faults 3 and 4 regenerate each window
/// from the configured causal process (per-window substreams of the config
/// seed), since they alter the underlying causal signals.
pub fn inject_fault(batch: &WindowBatch, kind: FaultKind, cfg: &SimConfig) -> Result<WindowBatch> {
    cfg.validate()?;
    match kind {
        FaultKind::Healthy => Ok(batch.clone()),
        FaultKind::Fault1StuckAt => {
            let mut values = batch.values.clone();
            values
                .index_axis_mut(Axis(2), 0)
                .mapv_inplace(|_| cfg.causal.low_value);
            WindowBatch::new(batch.ids.clone(), values)
        }
        FaultKind::Fault2Offset => {
            let mut values = batch.values.clone();
            values.index_axis_mut(Axis(2), 5).mapv_inplace(|x| x + 1.0);
            WindowBatch::new(batch.ids.clone(), values)
        }
        FaultKind::Fault3Shift | FaultKind::Fault4Frequency => {
            let windows: Vec<Array2<f64>> = (0..batch.n_windows())
                .into_par_iter()
                .map(|i| {
                    let mut rng = substream(cfg.seed, StreamDomain::FaultInjection, i as u64);
                    gen_window(cfg, &mut rng, kind)
                })
                .collect();
            WindowBatch::new(batch.ids.clone(), stack_windows(&windows))
        }
    }
}

fn stack_windows(windows: &[Array2<f64>]) -> Array3<f64> {
    let n = windows.len();
    let (t, p) = (windows[0].shape()[0], windows[0].shape()[1]);
    let mut out = Array3::<f64>::zeros((n, t, p));
    for (i, w) in windows.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(w);
    }
    out
}

fn gen_split(cfg: &SimConfig, domain: StreamDomain, kinds: &[FaultKind]) -> Array3<f64> {
    let windows: Vec<Array2<f64>> = kinds
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut rng = substream(cfg.seed, domain, i as u64);
            gen_window(cfg, &mut rng, kind)
        })
        .collect();
    stack_windows(&windows)
}

/// Build the full dataset: healthy train/val splits, the labeled test split
/// (4*n healthy + n per fault), and train-statistics standardization across
/// all splits.
pub fn build_dataset(cfg: &SimConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let map = SubsystemSignalsMap::simulated();

    let train_kinds = vec![FaultKind::Healthy; cfg.n_train_windows];
    let val_kinds = vec![FaultKind::Healthy; cfg.n_val_windows];
    let mut test_kinds = vec![FaultKind::Healthy; 4 * cfg.n_test_per_fault];
    for kind in FaultKind::FAULTS {
        test_kinds.extend(std::iter::repeat(kind).take(cfg.n_test_per_fault));
    }

    let mut train = gen_split(cfg, StreamDomain::TrainWindows, &train_kinds);
    let mut val = gen_split(cfg, StreamDomain::ValWindows, &val_kinds);
    let mut test = gen_split(cfg, StreamDomain::TestWindows, &test_kinds);

    // Standardize with train statistics only.
    let p = map.n_signals();
    let mut mean = vec![0.0; p];
    let mut std = vec![0.0; p];
    let n_train_vals = (train.shape()[0] * train.shape()[1]) as f64;
    for c in 0..p {
        let col = train.index_axis(Axis(2), c);
        let m = col.sum() / n_train_vals;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n_train_vals;
        if var.sqrt() < 1e-12 {
            return Err(CoreError::Degenerate {
                what: format!("train variance of signal '{}'", map.signals()[c]),
            });
        }
        mean[c] = m;
        std[c] = var.sqrt();
    }
    for split in [&mut train, &mut val, &mut test] {
        for c in 0..p {
            let (m, s) = (mean[c], std[c]);
            split.index_axis_mut(Axis(2), c).mapv_inplace(|x| (x - m) / s);
        }
    }

    let labels: Vec<WindowLabel> = test_kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let (label_a, label_b, label_all) = kind.labels();
            WindowLabel { window_id: i as u64, fault_kind: kind, label_a, label_b, label_all }
        })
        .collect();

    Ok(DatasetBundle {
        config: cfg.clone(),
        map,
        train: WindowBatch::new((0..cfg.n_train_windows as u64).collect(), train)?,
        val: WindowBatch::new((0..cfg.n_val_windows as u64).collect(), val)?,
        test: WindowBatch::new((0..test_kinds.len() as u64).collect(), test)?,
        labels,
        standardization: Standardization { mean, std },
    })
}
