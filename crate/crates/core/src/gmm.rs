//! Per-subsystem Gaussian mixture baseline, fitted with EM on individual
//! time points. Scores are mean negative log-densities over a window, so the
//! model sees value distributions but no temporal structure.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

/// E-step point chunk; fixed so reductions are schedule-independent.
const E_STEP_CHUNK: usize = 8192;

use crate::data::{SubsystemSignalsMap, WindowBatch};
use crate::error::{CoreError, Result};
use crate::model::{CHECKPOINT_FORMAT, CHECKPOINT_SCHEMA_VERSION};
use crate::rng::{substream, StreamDomain};

const COV_JITTER: f64 = 1e-6;

/// A single Gaussian mixture with full covariances.
#[derive(Debug, Clone)]
pub struct Gmm {
    pub weights: Vec<f64>,
    /// `(k, d)` component means.
    pub means: Array2<f64>,
    /// `k` full covariance matrices, `(d, d)` each.
    pub covariances: Vec<Array2<f64>>,
    /// Cached Cholesky factors of the covariances.
    chols: Vec<Array2<f64>>,
}

/// Lower-triangular Cholesky factor; `None` when the matrix is not positive
/// definite.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.shape()[0];
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for p in 0..j {
                sum -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

impl Gmm {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    fn from_parts(weights: Vec<f64>, means: Array2<f64>, covariances: Vec<Array2<f64>>) -> Result<Gmm> {
        let chols = covariances
            .iter()
            .map(|c| {
                cholesky(c).ok_or_else(|| CoreError::Degenerate {
                    what: "covariance after jitter".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gmm { weights, means, covariances, chols })
    }

    /// Log-density of one point under the mixture (log-sum-exp over
    /// components).
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(CoreError::ShapeMismatch {
                expected: format!("point of dim {d}"),
                got: format!("{}", x.len()),
            });
        }
        let mut terms = Vec::with_capacity(self.n_components());
        for j in 0..self.n_components() {
            terms.push(self.weights[j].ln() + self.log_normal(j, x));
        }
        Ok(log_sum_exp(&terms))
    }

    fn log_normal(&self, j: usize, x: &[f64]) -> f64 {
        let d = self.dim();
        let l = &self.chols[j];
        // forward substitution: L y = (x - mu)
        let mut y = vec![0.0; d];
        let mut logdet = 0.0;
        for i in 0..d {
            let mut v = x[i] - self.means[[j, i]];
            for p in 0..i {
                v -= l[[i, p]] * y[p];
            }
            y[i] = v / l[[i, i]];
            logdet += l[[i, i]].ln();
        }
        let quad: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + quad) - logdet
    }

    /// Mean negative log-density over the window's timesteps. Per-timestep
    /// values are accumulated in sorted order, so the score is invariant to
    /// any permutation of the timesteps, bit for bit.
    pub fn score_window(&self, window: &ArrayView2<f64>) -> Result<f64> {
        let t_len = window.shape()[0];
        let mut nlls = Vec::with_capacity(t_len);
        let mut point = vec![0.0; self.dim()];
        for t in 0..t_len {
            for (c, v) in point.iter_mut().enumerate() {
                *v = window[[t, c]];
            }
            nlls.push(-self.log_density(&point)?);
        }
        nlls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(nlls.iter().sum::<f64>() / t_len as f64)
    }

    /// Mean log-likelihood per point over a sample matrix.
    pub fn mean_log_likelihood(&self, samples: &ArrayView2<f64>) -> Result<f64> {
        let n = samples.shape()[0];
        let mut total = 0.0;
        let mut point = vec![0.0; self.dim()];
        for i in 0..n {
            for (c, v) in point.iter_mut().enumerate() {
                *v = samples[[i, c]];
            }
            total += self.log_density(&point)?;
        }
        Ok(total / n as f64)
    }
}

/// Result of one EM fit: the model plus the (non-decreasing) mean
/// log-likelihood trace of the winning restart.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: Gmm,
    pub ll_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iters: 500, tol: 1e-6, restarts: 5 }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Fit a `k`-component mixture by EM: best of `restarts` seeded restarts by
/// final log-likelihood, each run to convergence (mean-LL improvement below
/// `tol`) or `max_iters`.
pub fn gmm_fit(samples: &ArrayView2<f64>, k: usize, seed: u64, opts: EmOptions) -> Result<GmmFit> {
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    if k == 0 {
        return Err(CoreError::Config("k must be positive".into()));
    }
    if n < 10 * k * d {
        return Err(CoreError::Config(format!(
            "need at least {} samples for k={k}, d={d}; got {n}",
            10 * k * d
        )));
    }

    let mut best: Option<GmmFit> = None;
    for restart in 0..opts.restarts.max(1) {
        let fit = em_single(samples, k, seed, restart as u64, opts)?;
        let better = match &best {
            None => true,
            Some(b) => fit.ll_history.last() > b.ll_history.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn em_single(
    samples: &ArrayView2<f64>,
    k: usize,
    seed: u64,
    restart: u64,
    opts: EmOptions,
) -> Result<GmmFit> {
    let (n, d) = (samples.shape()[0], samples.shape()[1]);
    let mut rng = substream(seed, StreamDomain::GmmInit, restart);

    // init: k distinct sample points as means, data covariance everywhere
    let mut mean_idx = Vec::with_capacity(k);
    while mean_idx.len() < k {
        let i = rng.gen_range(0..n);
        if !mean_idx.contains(&i) {
            mean_idx.push(i);
        }
    }
    let mut means = Array2::<f64>::zeros((k, d));
    for (j, &i) in mean_idx.iter().enumerate() {
        for c in 0..d {
            means[[j, c]] = samples[[i, c]];
        }
    }
    let grand_mean: Vec<f64> = (0..d)
        .map(|c| samples.column(c).sum() / n as f64)
        .collect();
    let mut data_cov = Array2::<f64>::zeros((d, d));
    for i in 0..n {
        for r in 0..d {
            let dr = samples[[i, r]] - grand_mean[r];
            for c in 0..d {
                data_cov[[r, c]] += dr * (samples[[i, c]] - grand_mean[c]);
            }
        }
    }
    data_cov /= n as f64;
    for r in 0..d {
        data_cov[[r, r]] += COV_JITTER;
    }
    let mut covariances = vec![data_cov; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut model = Gmm::from_parts(weights.clone(), means.clone(), covariances.clone())?;
    let mut ll_history: Vec<f64> = Vec::new();
    let mut resp = Array2::<f64>::zeros((n, k));

    for _ in 0..opts.max_iters {
        // E-step, parallel over fixed point chunks
        let resp_flat = resp.as_slice_mut().expect("contiguous");
        let partial_ll: Vec<f64> = resp_flat
            .par_chunks_mut(E_STEP_CHUNK * k)
            .enumerate()
            .map(|(chunk_idx, resp_chunk)| {
                let start = chunk_idx * E_STEP_CHUNK;
                let mut point = vec![0.0; d];
                let mut terms = vec![0.0; k];
                let mut ll_sum = 0.0;
                for (row, resp_row) in resp_chunk.chunks_mut(k).enumerate() {
                    let i = start + row;
                    for (c, v) in point.iter_mut().enumerate() {
                        *v = samples[[i, c]];
                    }
                    for j in 0..k {
                        terms[j] = model.weights[j].ln() + model.log_normal(j, &point);
                    }
                    let lse = log_sum_exp(&terms);
                    ll_sum += lse;
                    for j in 0..k {
                        resp_row[j] = (terms[j] - lse).exp();
                    }
                }
                ll_sum
            })
            .collect();
        let ll = partial_ll.iter().sum::<f64>() / n as f64;
        if let Some(&prev) = ll_history.last() {
            if (ll - prev).abs() < opts.tol {
                ll_history.push(ll);
                break;
            }
        }
        ll_history.push(ll);

        // M-step
        for j in 0..k {
            let nj: f64 = resp.column(j).sum();
            weights[j] = nj / n as f64;
            for c in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += resp[[i, j]] * samples[[i, c]];
                }
                means[[j, c]] = s / nj;
            }
            let mut cov = Array2::<f64>::zeros((d, d));
            for i in 0..n {
                let w = resp[[i, j]];
                for r in 0..d {
                    let dr = samples[[i, r]] - means[[j, r]];
                    for c in 0..d {
                        cov[[r, c]] += w * dr * (samples[[i, c]] - means[[j, c]]);
                    }
                }
            }
            cov /= nj;
            for r in 0..d {
                cov[[r, r]] += COV_JITTER;
            }
            covariances[j] = cov;
        }
        model = Gmm::from_parts(weights.clone(), means.clone(), covariances.clone())?;
    }
    Ok(GmmFit { model, ll_history })
}

/// One mixture per subsystem plus the map, ready to score windows.
#[derive(Debug, Clone)]
pub struct GmmSet {
    pub map: SubsystemSignalsMap,
    pub models: Vec<(String, Gmm)>,
    pub chosen_k: Vec<(String, usize)>,
    pub seed: u64,
}

/// Flatten a window batch's subsystem columns into an `(n*t, d)` point
/// matrix.
pub fn subsystem_points(
    batch: &WindowBatch,
    map: &SubsystemSignalsMap,
    subsystem: &str,
) -> Result<Array2<f64>> {
    let cols = map.columns_of(subsystem)?;
    let (n, t) = (batch.n_windows(), batch.window_len());
    let mut out = Array2::<f64>::zeros((n * t, cols.len()));
    for i in 0..n {
        for ti in 0..t {
            for (c, &col) in cols.iter().enumerate() {
                out[[i * t + ti, c]] = batch.values[[i, ti, col]];
            }
        }
    }
    Ok(out)
}

/// Fit one mixture per subsystem, tuning `k` over `k_grid` by validation
/// log-likelihood (independently per subsystem).
pub fn fit_gmm_set(
    train: &WindowBatch,
    val: &WindowBatch,
    map: &SubsystemSignalsMap,
    k_grid: &[usize],
    seed: u64,
    opts: EmOptions,
) -> Result<GmmSet> {
    if k_grid.is_empty() {
        return Err(CoreError::EmptyGrid);
    }
    let mut models = Vec::new();
    let mut chosen_k = Vec::new();
    for sub in map.subsystems() {
        let train_pts = subsystem_points(train, map, sub)?;
        let val_pts = subsystem_points(val, map, sub)?;
        let fits: Vec<Result<(usize, GmmFit, f64)>> = k_grid
            .par_iter()
            .map(|&k| {
                let fit = gmm_fit(&train_pts.view(), k, seed, opts)?;
                let val_ll = fit.model.mean_log_likelihood(&val_pts.view())?;
                Ok((k, fit, val_ll))
            })
            .collect();
        let mut best: Option<(usize, GmmFit, f64)> = None;
        for r in fits {
            let (k, fit, val_ll) = r?;
            let better = match &best {
                None => true,
                Some((_, _, best_ll)) => val_ll > *best_ll,
            };
            if better {
                best = Some((k, fit, val_ll));
            }
        }
        let (k, fit, _) = best.expect("nonempty grid");
        models.push((sub.clone(), fit.model));
        chosen_k.push((sub.clone(), k));
    }
    Ok(GmmSet { map: map.clone(), models, chosen_k, seed })
}

impl GmmSet {
    pub fn model_of(&self, subsystem: &str) -> Result<&Gmm> {
        self.models
            .iter()
            .find(|(s, _)| s == subsystem)
            .map(|(_, m)| m)
            .ok_or_else(|| CoreError::UnknownSubsystem(subsystem.to_string()))
    }

    pub fn to_checkpoint_json(&self) -> serde_json::Value {
        let mut params = serde_json::Map::new();
        for (sub, gmm) in &self.models {
            params.insert(format!("gmm.{sub}.weights"), serde_json::json!(gmm.weights));
            let means: Vec<Vec<f64>> = gmm
                .means
                .outer_iter()
                .map(|r| r.to_vec())
                .collect();
            params.insert(format!("gmm.{sub}.means"), serde_json::json!(means));
            let covs: Vec<Vec<Vec<f64>>> = gmm
                .covariances
                .iter()
                .map(|c| c.outer_iter().map(|r| r.to_vec()).collect())
                .collect();
            params.insert(format!("gmm.{sub}.covariances"), serde_json::json!(covs));
        }
        serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "arch": {
                "kind": "gmm",
                "map": self.map.to_json(),
                "k": self.chosen_k.iter().map(|(s, k)| (s.clone(), *k)).collect::<std::collections::BTreeMap<_, _>>(),
                "seed": self.seed,
            },
            "params": serde_json::Value::Object(params),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &self.to_checkpoint_json())?;
        use std::io::Write;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, expected_map: &SubsystemSignalsMap) -> Result<GmmSet> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let doc: serde_json::Value = serde_json::from_reader(reader)?;
        Self::from_checkpoint_json(&doc, expected_map)
    }

    pub fn from_checkpoint_json(
        doc: &serde_json::Value,
        expected_map: &SubsystemSignalsMap,
    ) -> Result<GmmSet> {
        if doc["format"].as_str() != Some(CHECKPOINT_FORMAT) {
            return Err(CoreError::CheckpointMismatch("not a model checkpoint".into()));
        }
        if doc["arch"]["kind"].as_str() != Some("gmm") {
            return Err(CoreError::KindMismatch {
                expected: "gmm".into(),
                got: doc["arch"]["kind"].as_str().unwrap_or("?").into(),
            });
        }
        let stored_map = SubsystemSignalsMap::from_json(&doc["arch"]["map"])?;
        if &stored_map != expected_map {
            return Err(CoreError::CheckpointMismatch(
                "stored subsystem-signals map differs from the requested one".into(),
            ));
        }
        let seed = doc["arch"]["seed"].as_u64().unwrap_or(0);
        let mut models = Vec::new();
        let mut chosen_k = Vec::new();
        for sub in stored_map.subsystems() {
            let weights: Vec<f64> = serde_json::from_value(doc["params"][format!("gmm.{sub}.weights")].clone())
                .map_err(|_| CoreError::CheckpointMismatch(format!("missing gmm.{sub}.weights")))?;
            let means_v: Vec<Vec<f64>> = serde_json::from_value(doc["params"][format!("gmm.{sub}.means")].clone())
                .map_err(|_| CoreError::CheckpointMismatch(format!("missing gmm.{sub}.means")))?;
            let covs_v: Vec<Vec<Vec<f64>>> =
                serde_json::from_value(doc["params"][format!("gmm.{sub}.covariances")].clone())
                    .map_err(|_| CoreError::CheckpointMismatch(format!("missing gmm.{sub}.covariances")))?;
            let k = weights.len();
            let d = means_v.first().map(|m| m.len()).unwrap_or(0);
            let mut means = Array2::<f64>::zeros((k, d));
            for (j, row) in means_v.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    means[[j, c]] = *v;
                }
            }
            let covariances: Vec<Array2<f64>> = covs_v
                .iter()
                .map(|m| {
                    let mut a = Array2::<f64>::zeros((d, d));
                    for (r, row) in m.iter().enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            a[[r, c]] = *v;
                        }
                    }
                    a
                })
                .collect();
            chosen_k.push((sub.clone(), k));
            models.push((sub.clone(), Gmm::from_parts(weights, means, covariances)?));
        }
        Ok(GmmSet { map: stored_map, models, chosen_k, seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal_matrix;

    fn two_cluster_samples(n_per: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, StreamDomain::GmmInit, 77);
        let noise = standard_normal_matrix(&mut rng, 2 * n_per, 2);
        let mut out = Array2::<f64>::zeros((2 * n_per, 2));
        for i in 0..2 * n_per {
            let center = if i < n_per { [-2.0, -2.0] } else { [2.0, 2.0] };
            for c in 0..2 {
                out[[i, c]] = center[c] + 0.1 * noise[[i, c]];
            }
        }
        out
    }

    #[test]
    fn single_component_matches_sample_moments() {
        let samples = two_cluster_samples(200, 1);
        let fit = gmm_fit(&samples.view(), 1, 3, EmOptions::default()).unwrap();
        let n = samples.shape()[0] as f64;
        for c in 0..2 {
            let mean = samples.column(c).sum() / n;
            assert!((fit.model.means[[0, c]] - mean).abs() < 1e-8);
        }
        for r in 0..2 {
            for c in 0..2 {
                let mr = samples.column(r).sum() / n;
                let mc = samples.column(c).sum() / n;
                let mut cov = 0.0;
                for i in 0..samples.shape()[0] {
                    cov += (samples[[i, r]] - mr) * (samples[[i, c]] - mc);
                }
                cov /= n;
                let expected = cov + if r == c { COV_JITTER } else { 0.0 };
                assert!(
                    (fit.model.covariances[0][[r, c]] - expected).abs() < 1e-8,
                    "cov[{r}{c}]"
                );
            }
        }
    }

    #[test]
    fn two_separated_clusters_recovered() {
        let samples = two_cluster_samples(400, 5);
        let fit = gmm_fit(&samples.view(), 2, 11, EmOptions::default()).unwrap();
        let mut found = [false, false];
        for j in 0..2 {
            let m = [fit.model.means[[j, 0]], fit.model.means[[j, 1]]];
            for (t, target) in [[-2.0, -2.0], [2.0, 2.0]].iter().enumerate() {
                let dist = ((m[0] - target[0]).powi(2) + (m[1] - target[1]).powi(2)).sqrt();
                if dist < 0.05 {
                    found[t] = true;
                }
            }
        }
        assert!(found[0] && found[1], "means {:?}", fit.model.means);
    }

    #[test]
    fn log_likelihood_is_monotone_nondecreasing() {
        let samples = two_cluster_samples(300, 9);
        let fit = gmm_fit(&samples.view(), 4, 13, EmOptions::default()).unwrap();
        assert!(fit.ll_history.len() >= 2);
        for w in fit.ll_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "LL decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn nll_at_mode_of_unit_gaussian() {
        let d = 3;
        let means = Array2::<f64>::zeros((1, d));
        let covs = vec![Array2::<f64>::eye(d)];
        let gmm = Gmm::from_parts(vec![1.0], means, covs).unwrap();
        let nll = -gmm.log_density(&[0.0, 0.0, 0.0]).unwrap();
        let expected = d as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll - expected).abs() < 1e-12);
    }

    #[test]
    fn score_decreases_toward_high_density() {
        let means = Array2::<f64>::zeros((1, 2));
        let covs = vec![Array2::<f64>::eye(2)];
        let gmm = Gmm::from_parts(vec![1.0], means, covs).unwrap();
        let mut last = f64::NEG_INFINITY;
        for dist in [3.0, 2.0, 1.0, 0.0] {
            let ld = gmm.log_density(&[dist, 0.0]).unwrap();
            assert!(ld > last);
            last = ld;
        }
    }

    /// Brute-force mixture density with explicit Gauss-Jordan inversion.
    fn oracle_density(gmm: &Gmm, x: &[f64]) -> f64 {
        let d = gmm.dim();
        let mut total = 0.0;
        for j in 0..gmm.n_components() {
            let cov = &gmm.covariances[j];
            // invert via Gauss-Jordan
            let mut aug = Array2::<f64>::zeros((d, 2 * d));
            for r in 0..d {
                for c in 0..d {
                    aug[[r, c]] = cov[[r, c]];
                }
                aug[[r, d + r]] = 1.0;
            }
            let mut det = 1.0;
            for col in 0..d {
                let mut piv = col;
                for r in col + 1..d {
                    if aug[[r, col]].abs() > aug[[piv, col]].abs() {
                        piv = r;
                    }
                }
                if piv != col {
                    for c in 0..2 * d {
                        let tmp = aug[[col, c]];
                        aug[[col, c]] = aug[[piv, c]];
                        aug[[piv, c]] = tmp;
                    }
                    det = -det;
                }
                det *= aug[[col, col]];
                let p = aug[[col, col]];
                for c in 0..2 * d {
                    aug[[col, c]] /= p;
                }
                for r in 0..d {
                    if r != col {
                        let f = aug[[r, col]];
                        for c in 0..2 * d {
                            aug[[r, c]] -= f * aug[[col, c]];
                        }
                    }
                }
            }
            let mut quad = 0.0;
            for r in 0..d {
                for c in 0..d {
                    quad += (x[r] - gmm.means[[j, r]]) * aug[[r, d + c]] * (x[c] - gmm.means[[j, c]]);
                }
            }
            let norm = ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt();
            total += gmm.weights[j] / norm * (-0.5 * quad).exp();
        }
        total
    }

    #[test]
    fn density_matches_bruteforce_summation() {
        let samples = two_cluster_samples(300, 21);
        let fit = gmm_fit(&samples.view(), 2, 23, EmOptions::default()).unwrap();
        let mut rng = substream(33, StreamDomain::GmmInit, 5);
        for _ in 0..50 {
            let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let fast = fit.model.log_density(&x).unwrap().exp();
            let slow = oracle_density(&fit.model, &x);
            let rel = (fast - slow).abs() / slow.abs().max(1e-300);
            assert!(rel < 1e-10, "density mismatch: {fast} vs {slow} ({rel})");
        }
    }

    #[test]
    fn window_score_is_permutation_invariant() {
        let samples = two_cluster_samples(200, 41);
        let fit = gmm_fit(&samples.view(), 2, 43, EmOptions::default()).unwrap();
        let mut rng = substream(44, StreamDomain::GmmInit, 9);
        let window = standard_normal_matrix(&mut rng, 64, 2);
        let base = fit.model.score_window(&window.view()).unwrap();
        // reverse the timesteps
        let mut reversed = Array2::<f64>::zeros((64, 2));
        for t in 0..64 {
            for c in 0..2 {
                reversed[[t, c]] = window[[63 - t, c]];
            }
        }
        let r = fit.model.score_window(&reversed.view()).unwrap();
        assert_eq!(base, r);
        // random shuffle
        let mut order: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut shuffled = Array2::<f64>::zeros((64, 2));
        for (t, &src) in order.iter().enumerate() {
            for c in 0..2 {
                shuffled[[t, c]] = window[[src, c]];
            }
        }
        let s = fit.model.score_window(&shuffled.view()).unwrap();
        assert_eq!(base, s);
    }

    #[test]
    fn rejects_insufficient_samples() {
        let samples = Array2::<f64>::zeros((30, 2));
        assert!(gmm_fit(&samples.view(), 2, 1, EmOptions::default()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let map = SubsystemSignalsMap::new(vec![
            ("a".into(), vec!["x".into(), "y".into()]),
        ])
        .unwrap();
        let samples = two_cluster_samples(200, 51);
        let fit = gmm_fit(&samples.view(), 2, 53, EmOptions::default()).unwrap();
        let set = GmmSet {
            map: map.clone(),
            models: vec![("a".into(), fit.model)],
            chosen_k: vec![("a".into(), 2)],
            seed: 53,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmm.json");
        set.save_checkpoint(&path).unwrap();
        let loaded = GmmSet::load_checkpoint(&path, &map).unwrap();
        let m0 = &set.models[0].1;
        let m1 = &loaded.models[0].1;
        assert_eq!(m0.weights, m1.weights);
        assert_eq!(m0.means, m1.means);
        assert_eq!(m0.covariances, m1.covariances);
    }
}
