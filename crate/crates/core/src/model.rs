//! The TCN-VAE family: per-group temporal-convolution encoders and decoders
//! over a composite latent space.
//!
//! Three wirings share this implementation:
//! - composite: one encoder/decoder per subsystem plus a global decoder that
//!   reads the concatenated latent, so cross-subsystem structure is scored
//!   without leaking information between subsystem reconstructions;
//! - vanilla: a single encoder/decoder over all signals;
//! - univariate: an independent encoder/decoder per signal.
//!
//! Group reconstructions depend only on their own group's input columns by
//! construction: there is no parameter path from encoder `j` to
//! reconstruction `i != j`.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SubsystemSignalsMap;
use crate::error::{CoreError, Result};
use crate::nn::{
    maxpool2, maxpool2_backward, relu2, relu2_backward, upsample2,
    upsample2_backward, BlockCache, Conv1d, Dense, LayoutBuilder, ParamLayout, ResidualBlock,
    TensorSpec,
};
use crate::rng::{substream, StreamDomain};

pub const CHECKPOINT_FORMAT: &str = "symptom-checkpoint";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Composite,
    Vanilla,
    Univariate,
    Gmm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Composite => "composite",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Univariate => "univariate",
            ModelKind::Gmm => "gmm",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "composite" => Some(ModelKind::Composite),
            "vanilla" => Some(ModelKind::Vanilla),
            "univariate" => Some(ModelKind::Univariate),
            "gmm" => Some(ModelKind::Gmm),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One encoding group: a subsystem (composite), all signals (vanilla) or a
/// single signal (univariate).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub id: String,
    pub signals: Vec<String>,
    pub cols: Vec<usize>,
    pub latent_dim: usize,
}

/// Architecture description; fully determines the parameter layout.
#[derive(Debug, Clone)]
pub struct VaeArch {
    pub kind: ModelKind,
    pub map: SubsystemSignalsMap,
    pub window_len: usize,
    pub groups: Vec<GroupSpec>,
    /// Channel widths of the two encoder stacks (decoder mirrors them).
    pub channels: (usize, usize),
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub beta: f64,
    pub has_global_decoder: bool,
    pub seed: u64,
}

impl VaeArch {
    /// Default architecture for a model kind on the given map.
    pub fn for_kind(
        kind: ModelKind,
        map: &SubsystemSignalsMap,
        window_len: usize,
        beta: f64,
        seed: u64,
    ) -> Result<VaeArch> {
        let mk_group = |id: String, signals: Vec<String>, latent| -> Result<GroupSpec> {
            let cols = signals
                .iter()
                .map(|s| map.signal_index(s))
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupSpec { id, signals, cols, latent_dim: latent })
        };
        let (groups, channels, has_global) = match kind {
            ModelKind::Composite => {
                let n = map.subsystems().len();
                let latent = (12 / n).max(1);
                let groups = map
                    .subsystems()
                    .iter()
                    .map(|s| mk_group(s.clone(), map.signals_of(s)?, latent))
                    .collect::<Result<Vec<_>>>()?;
                (groups, (24, 12), true)
            }
            ModelKind::Vanilla => {
                let g = mk_group("all".into(), map.signals().to_vec(), 12)?;
                (vec![g], (24, 12), false)
            }
            ModelKind::Univariate => {
                let latent = (12 / map.n_signals()).max(1);
                let groups = map
                    .signals()
                    .iter()
                    .map(|s| mk_group(s.clone(), vec![s.clone()], latent))
                    .collect::<Result<Vec<_>>>()?;
                (groups, (16, 8), false)
            }
            ModelKind::Gmm => {
                return Err(CoreError::Config("GMM is not a VAE architecture".into()))
            }
        };
        let arch = VaeArch {
            kind,
            map: map.clone(),
            window_len,
            groups,
            channels,
            kernel_size: 8,
            dilations: vec![1, 2, 4],
            beta,
            has_global_decoder: has_global,
            seed,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn total_latent_dim(&self) -> usize {
        self.groups.iter().map(|g| g.latent_dim).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len % 4 != 0 || self.window_len == 0 {
            return Err(CoreError::Config(format!(
                "window_len must be a positive multiple of 4 (two pooling halvings), got {}",
                self.window_len
            )));
        }
        if self.dilations.is_empty() {
            return Err(CoreError::Config("need at least one dilation".into()));
        }
        for d in &self.dilations {
            if !d.is_power_of_two() {
                return Err(CoreError::Config("dilations must be powers of two".into()));
            }
        }
        if self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config("dilations must increase within a stack".into()));
        }
        if self.beta < 0.0 {
            return Err(CoreError::Config("beta must be >= 0".into()));
        }
        let n_signals: usize = self.groups.iter().map(|g| g.cols.len()).sum();
        let m = self.total_latent_dim();
        if m * 10 > self.window_len * n_signals {
            return Err(CoreError::Config(format!(
                "latent dim {m} too large: must satisfy m <= window_len * n_signals / 10"
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct EncoderNet {
    blocks1: Vec<ResidualBlock>,
    blocks2: Vec<ResidualBlock>,
    head: Dense,
    latent_dim: usize,
    c2: usize,
    l4: usize,
}

struct EncCache {
    caches1: Vec<BlockCache>,
    idx1: Array3<u8>,
    caches2: Vec<BlockCache>,
    idx2: Array3<u8>,
    flat: Array2<f64>,
    logvar_raw: Array2<f64>,
}

impl EncoderNet {
    fn new(lb: &mut LayoutBuilder, name: &str, c_in: usize, arch: &VaeArch, latent: usize) -> Self {
        let (c1, c2) = arch.channels;
        let k = arch.kernel_size;
        let mut blocks1 = Vec::new();
        let mut blocks2 = Vec::new();
        for (i, &d) in arch.dilations.iter().enumerate() {
            let cin = if i == 0 { c_in } else { c1 };
            blocks1.push(ResidualBlock::new(lb, &format!("{name}.stack1.block{i}"), cin, c1, k, d));
        }
        for (i, &d) in arch.dilations.iter().enumerate() {
            let cin = if i == 0 { c1 } else { c2 };
            blocks2.push(ResidualBlock::new(lb, &format!("{name}.stack2.block{i}"), cin, c2, k, d));
        }
        let l4 = arch.window_len / 4;
        let head = Dense::new(lb, &format!("{name}.head"), c2 * l4, 2 * latent);
        EncoderNet { blocks1, blocks2, head, latent_dim: latent, c2, l4 }
    }

    fn forward(&self, params: &[f64], x: Array3<f64>) -> (Array2<f64>, Array2<f64>, EncCache) {
        let batch = x.shape()[0];
        let mut caches1 = Vec::with_capacity(self.blocks1.len());
        let mut h = x;
        for blk in &self.blocks1 {
            let (y, c) = blk.forward(params, h);
            caches1.push(c);
            h = y;
        }
        let (p1, idx1) = maxpool2(&h);
        let mut caches2 = Vec::with_capacity(self.blocks2.len());
        let mut h = p1;
        for blk in &self.blocks2 {
            let (y, c) = blk.forward(params, h);
            caches2.push(c);
            h = y;
        }
        let (p2, idx2) = maxpool2(&h);
        let flat = p2
            .into_shape_with_order((batch, self.c2 * self.l4))
            .expect("contiguous reshape");
        let out = self.head.forward(params, &flat);
        let m = self.latent_dim;
        let mu = out.slice(ndarray::s![.., ..m]).to_owned();
        let logvar_raw = out.slice(ndarray::s![.., m..]).to_owned();
        let logvar = logvar_raw.mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        (mu, logvar, EncCache { caches1, idx1, caches2, idx2, flat, logvar_raw })
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &EncCache,
        dmu: &Array2<f64>,
        dlogvar: &Array2<f64>,
        grads: &mut [f64],
    ) {
        let batch = dmu.shape()[0];
        let m = self.latent_dim;
        let mut dhead = Array2::<f64>::zeros((batch, 2 * m));
        dhead.slice_mut(ndarray::s![.., ..m]).assign(dmu);
        {
            let mut right = dhead.slice_mut(ndarray::s![.., m..]);
            right.assign(dlogvar);
            // clamp: zero gradient outside the active range
            ndarray::Zip::from(&mut right).and(&cache.logvar_raw).for_each(|g, &raw| {
                if raw.abs() > LOGVAR_CLAMP {
                    *g = 0.0;
                }
            });
        }
        let dflat = self.head.backward(params, &cache.flat, &dhead, grads);
        let dp2 = dflat
            .into_shape_with_order((batch, self.c2, self.l4))
            .expect("contiguous reshape");
        let mut d = maxpool2_backward(&dp2, &cache.idx2);
        for (blk, c) in self.blocks2.iter().zip(&cache.caches2).rev() {
            d = blk.backward(params, c, d, grads);
        }
        let mut d = maxpool2_backward(&d, &cache.idx1);
        for (blk, c) in self.blocks1.iter().zip(&cache.caches1).rev() {
            d = blk.backward(params, c, d, grads);
        }
        // input gradients are not needed further
    }
}

#[derive(Debug)]
struct DecoderNet {
    head: Dense,
    blocks_a: Vec<ResidualBlock>,
    blocks_b: Vec<ResidualBlock>,
    out: Conv1d,
    c2: usize,
    l4: usize,
}

struct DecCache {
    z: Array2<f64>,
    head_act: Array2<f64>,
    caches_a: Vec<BlockCache>,
    caches_b: Vec<BlockCache>,
    pre_out: Array3<f64>,
}

impl DecoderNet {
    fn new(lb: &mut LayoutBuilder, name: &str, c_out: usize, arch: &VaeArch, latent: usize) -> Self {
        let (c1, c2) = arch.channels;
        let k = arch.kernel_size;
        let l4 = arch.window_len / 4;
        let head = Dense::new(lb, &format!("{name}.head"), latent, c2 * l4);
        let mut blocks_a = Vec::new();
        let mut blocks_b = Vec::new();
        for (i, &d) in arch.dilations.iter().enumerate() {
            blocks_a.push(ResidualBlock::new(lb, &format!("{name}.stack1.block{i}"), c2, c2, k, d));
        }
        for (i, &d) in arch.dilations.iter().enumerate() {
            let cin = if i == 0 { c2 } else { c1 };
            blocks_b.push(ResidualBlock::new(lb, &format!("{name}.stack2.block{i}"), cin, c1, k, d));
        }
        let out = Conv1d::new(lb, &format!("{name}.out"), c1, c_out, k, 1);
        DecoderNet { head, blocks_a, blocks_b, out, c2, l4 }
    }

    fn forward(&self, params: &[f64], z: Array2<f64>) -> (Array3<f64>, DecCache) {
        let batch = z.shape()[0];
        let head_act = relu2(&self.head.forward(params, &z));
        let mut h = head_act
            .clone()
            .into_shape_with_order((batch, self.c2, self.l4))
            .expect("contiguous reshape");
        let mut caches_a = Vec::with_capacity(self.blocks_a.len());
        for blk in &self.blocks_a {
            let (y, c) = blk.forward(params, h);
            caches_a.push(c);
            h = y;
        }
        let mut h = upsample2(&h);
        let mut caches_b = Vec::with_capacity(self.blocks_b.len());
        for blk in &self.blocks_b {
            let (y, c) = blk.forward(params, h);
            caches_b.push(c);
            h = y;
        }
        let pre_out = upsample2(&h);
        let xhat = self.out.forward(params, &pre_out);
        (xhat, DecCache { z, head_act, caches_a, caches_b, pre_out })
    }

    fn backward(
        &self,
        params: &[f64],
        cache: &DecCache,
        dxhat: &Array3<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let batch = dxhat.shape()[0];
        let dpre = self.out.backward(params, &cache.pre_out, dxhat, grads);
        let mut d = upsample2_backward(&dpre);
        for (blk, c) in self.blocks_b.iter().zip(&cache.caches_b).rev() {
            d = blk.backward(params, c, d, grads);
        }
        let mut d = upsample2_backward(&d);
        for (blk, c) in self.blocks_a.iter().zip(&cache.caches_a).rev() {
            d = blk.backward(params, c, d, grads);
        }
        let mut dflat = d
            .into_shape_with_order((batch, self.c2 * self.l4))
            .expect("contiguous reshape");
        relu2_backward(&mut dflat, &cache.head_act);
        self.head.backward(params, &cache.z, &dflat, grads)
    }
}

/// `z = mu + exp(logvar / 2) * noise`, elementwise.
pub fn reparameterize(mu: &Array2<f64>, logvar: &Array2<f64>, noise: &Array2<f64>) -> Array2<f64> {
    let mut z = mu.clone();
    ndarray::Zip::from(&mut z).and(logvar).and(noise).for_each(|z, &lv, &e| {
        *z += (0.5 * lv).exp() * e;
    });
    z
}

/// Loss components of one forward pass (means over the batch).
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_group_mse: Vec<(String, f64)>,
    pub per_group_kl: Vec<(String, f64)>,
    pub global_mse: Option<f64>,
}

/// Outputs of a deterministic (posterior-mean) forward pass.
pub struct Reconstruction {
    pub group_xhat: Vec<Array3<f64>>,
    pub global_xhat: Option<Array3<f64>>,
    pub mus: Vec<Array2<f64>>,
    pub logvars: Vec<Array2<f64>>,
}

/// A group-structured TCN-VAE with a flat parameter vector.
#[derive(Debug)]
pub struct MultiVae {
    pub arch: VaeArch,
    layout: ParamLayout,
    pub params: Vec<f64>,
    encoders: Vec<EncoderNet>,
    decoders: Vec<DecoderNet>,
    global_decoder: Option<DecoderNet>,
}

impl MultiVae {
    pub fn new(arch: VaeArch) -> Result<MultiVae> {
        arch.validate()?;
        let mut lb = LayoutBuilder::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for g in &arch.groups {
            encoders.push(EncoderNet::new(
                &mut lb,
                &format!("encoder.{}", g.id),
                g.cols.len(),
                &arch,
                g.latent_dim,
            ));
        }
        for g in &arch.groups {
            decoders.push(DecoderNet::new(
                &mut lb,
                &format!("decoder.{}", g.id),
                g.cols.len(),
                &arch,
                g.latent_dim,
            ));
        }
        let global_decoder = if arch.has_global_decoder {
            let n_signals: usize = arch.groups.iter().map(|g| g.cols.len()).sum();
            Some(DecoderNet::new(
                &mut lb,
                "decoder.global",
                n_signals,
                &arch,
                arch.total_latent_dim(),
            ))
        } else {
            None
        };
        let layout = lb.finish();
        let mut rng = substream(arch.seed, StreamDomain::ModelInit, 0);
        let mut params = layout.init_params(&mut rng);
        // posteriors start narrow (sigma ~ 0.14) so early reconstruction
        // learning is not drowned by reparameterization noise
        for enc in &encoders {
            let m = enc.latent_dim;
            let bias = enc.head.b;
            for v in &mut params[bias.offset + m..bias.offset + 2 * m] {
                *v = -4.0;
            }
        }
        Ok(MultiVae { arch, layout, params, encoders, decoders, global_decoder })
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Enforce the benchmark parameter budget.
    pub fn validate_budget(&self) -> Result<()> {
        let n = self.param_count();
        if !(100_000..=1_000_000).contains(&n) {
            return Err(CoreError::Config(format!(
                "{} model has {n} parameters, outside [100k, 1M]",
                self.arch.kind
            )));
        }
        Ok(())
    }

    /// Extract per-group inputs of shape `(batch, group_channels, len)` from
    /// a `(batch, len, signals)` window batch.
    pub fn group_inputs(&self, values: &ArrayView3<f64>) -> Result<Vec<Array3<f64>>> {
        let (b, t, p) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        if t != self.arch.window_len || p != self.arch.map.n_signals() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("(_, {}, {})", self.arch.window_len, self.arch.map.n_signals()),
                got: format!("({b}, {t}, {p})"),
            });
        }
        Ok(self
            .arch
            .groups
            .iter()
            .map(|g| {
                Array3::from_shape_fn((b, g.cols.len(), t), |(bi, ci, li)| {
                    values[[bi, li, g.cols[ci]]]
                })
            })
            .collect())
    }

    /// Full-signal target of shape `(batch, signals, len)`.
    fn full_target(&self, values: &ArrayView3<f64>) -> Array3<f64> {
        let (b, t, p) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        Array3::from_shape_fn((b, p, t), |(bi, ci, li)| values[[bi, li, ci]])
    }

    /// Posterior parameters per group. Encoder `i` sees only the columns of
    /// group `i`.
    pub fn encode(&self, values: &ArrayView3<f64>) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let xs = self.group_inputs(values)?;
        Ok(xs
            .into_iter()
            .zip(&self.encoders)
            .map(|(x, enc)| {
                let (mu, lv, _) = enc.forward(&self.params, x);
                (mu, lv)
            })
            .collect())
    }

    /// Deterministic reconstruction with `z = mu`.
    pub fn reconstruct(&self, values: &ArrayView3<f64>) -> Result<Reconstruction> {
        let xs = self.group_inputs(values)?;
        let mut mus = Vec::new();
        let mut logvars = Vec::new();
        let mut group_xhat = Vec::new();
        for (x, (enc, dec)) in xs.into_iter().zip(self.encoders.iter().zip(&self.decoders)) {
            let (mu, lv, _) = enc.forward(&self.params, x);
            let (xhat, _) = dec.forward(&self.params, mu.clone());
            group_xhat.push(xhat);
            mus.push(mu);
            logvars.push(lv);
        }
        let global_xhat = self.global_decoder.as_ref().map(|dec| {
            let zc = concat_cols(&mus);
            dec.forward(&self.params, zc).0
        });
        Ok(Reconstruction { group_xhat, global_xhat, mus, logvars })
    }

    /// Loss of a batch under given reparameterization noise (columns of
    /// `noise` follow group order). Pass zero noise for the deterministic
    /// objective.
    pub fn loss(&self, values: &ArrayView3<f64>, noise: &Array2<f64>) -> Result<LossBreakdown> {
        let (breakdown, _, _) = self.forward_train(values, noise)?;
        Ok(breakdown)
    }

    fn forward_train(
        &self,
        values: &ArrayView3<f64>,
        noise: &Array2<f64>,
    ) -> Result<(LossBreakdown, TrainState, Vec<Array3<f64>>)> {
        let xs = self.group_inputs(values)?;
        let batch = values.shape()[0];
        if noise.shape() != [batch, self.arch.total_latent_dim()] {
            return Err(CoreError::ShapeMismatch {
                expected: format!("noise ({batch}, {})", self.arch.total_latent_dim()),
                got: format!("{:?}", noise.shape()),
            });
        }
        let mut enc_caches = Vec::new();
        let mut dec_caches = Vec::new();
        let mut mus = Vec::new();
        let mut logvars = Vec::new();
        let mut noises = Vec::new();
        let mut zs = Vec::new();
        let mut group_xhat = Vec::new();
        let mut off = 0usize;
        for (g, (x, (enc, dec))) in xs
            .into_iter()
            .zip(self.encoders.iter().zip(&self.decoders))
            .enumerate()
        {
            let m = self.arch.groups[g].latent_dim;
            let eps = noise.slice(ndarray::s![.., off..off + m]).to_owned();
            off += m;
            let (mu, lv, ec) = enc.forward(&self.params, x);
            let z = reparameterize(&mu, &lv, &eps);
            let (xhat, dc) = dec.forward(&self.params, z.clone());
            enc_caches.push(ec);
            dec_caches.push(dc);
            mus.push(mu);
            logvars.push(lv);
            noises.push(eps);
            zs.push(z);
            group_xhat.push(xhat);
        }
        let (global_xhat, global_cache) = match &self.global_decoder {
            Some(dec) => {
                let zc = concat_cols(&zs);
                let (xhat, c) = dec.forward(&self.params, zc);
                (Some(xhat), Some(c))
            }
            None => (None, None),
        };

        let x_groups = self.group_inputs(values)?;
        let full = self.full_target(values);
        let breakdown = self.breakdown(&x_groups, &group_xhat, &mus, &logvars, &full, &global_xhat)?;
        let state = TrainState {
            enc_caches,
            dec_caches,
            global_cache,
            mus,
            logvars,
            noises,
            x_groups,
            full,
            global_xhat,
        };
        Ok((breakdown, state, group_xhat))
    }

    fn breakdown(
        &self,
        x_groups: &[Array3<f64>],
        group_xhat: &[Array3<f64>],
        mus: &[Array2<f64>],
        logvars: &[Array2<f64>],
        full: &Array3<f64>,
        global_xhat: &Option<Array3<f64>>,
    ) -> Result<LossBreakdown> {
        let n_groups = self.arch.groups.len() as f64;
        let mut per_group_mse = Vec::new();
        let mut per_group_kl = Vec::new();
        let mut total = 0.0;
        for (g, spec) in self.arch.groups.iter().enumerate() {
            let mse = mean_squared_error(&group_xhat[g], &x_groups[g]);
            if !mse.is_finite() {
                return Err(CoreError::NonFinite { term: format!("mse[{}]", spec.id) });
            }
            let kl = kl_to_standard_normal(&mus[g], &logvars[g]);
            if !kl.is_finite() {
                return Err(CoreError::NonFinite { term: format!("kl[{}]", spec.id) });
            }
            total += (mse + self.arch.beta * kl) / n_groups;
            per_group_mse.push((spec.id.clone(), mse));
            per_group_kl.push((spec.id.clone(), kl));
        }
        let global_mse = match global_xhat {
            Some(xhat) => {
                let mse = mean_squared_error(xhat, full);
                if !mse.is_finite() {
                    return Err(CoreError::NonFinite { term: "global mse".into() });
                }
                total += mse;
                Some(mse)
            }
            None => None,
        };
        if !total.is_finite() {
            return Err(CoreError::NonFinite { term: "total loss".into() });
        }
        Ok(LossBreakdown { total, per_group_mse, per_group_kl, global_mse })
    }

    /// Loss and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        values: &ArrayView3<f64>,
        noise: &Array2<f64>,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let (breakdown, state, group_xhat) = self.forward_train(values, noise)?;
        let mut grads = vec![0.0; self.layout.len()];
        let batch = values.shape()[0];
        let n_groups = self.arch.groups.len() as f64;

        // global reconstruction path
        let mut dzc: Option<Array2<f64>> = None;
        if let (Some(dec), Some(cache), Some(xhat)) =
            (&self.global_decoder, &state.global_cache, &state.global_xhat)
        {
            let scale = 2.0 / xhat.len() as f64;
            let dxhat = azip_sub_scale(xhat, &state.full, scale);
            dzc = Some(dec.backward(&self.params, cache, &dxhat, &mut grads));
        }

        let mut off = 0usize;
        for (g, spec) in self.arch.groups.iter().enumerate() {
            let m = spec.latent_dim;
            let xhat = &group_xhat[g];
            let scale = 2.0 / (xhat.len() as f64 * n_groups);
            let dxhat = azip_sub_scale(xhat, &state.x_groups[g], scale);
            let mut dz = self.decoders[g].backward(&self.params, &state.dec_caches[g], &dxhat, &mut grads);
            if let Some(dzc) = &dzc {
                dz += &dzc.slice(ndarray::s![.., off..off + m]);
            }
            off += m;

            // z = mu + exp(lv/2) * eps
            let kl_scale = self.arch.beta / (n_groups * batch as f64);
            let mu = &state.mus[g];
            let lv = &state.logvars[g];
            let eps = &state.noises[g];
            let mut dmu = dz.clone();
            ndarray::Zip::from(&mut dmu).and(mu).for_each(|d, &muv| {
                *d += kl_scale * muv;
            });
            let mut dlv = dz;
            ndarray::Zip::from(&mut dlv).and(lv).and(eps).for_each(|d, &lvv, &e| {
                *d = *d * e * 0.5 * (0.5 * lvv).exp() + kl_scale * (-0.5) * (1.0 - lvv.exp());
            });
            self.encoders[g].backward(&self.params, &state.enc_caches[g], &dmu, &dlv, &mut grads);
        }
        Ok((breakdown, grads))
    }

    pub fn tensor_specs(&self) -> &[TensorSpec] {
        self.layout.specs()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} params", self.layout.len()),
                got: format!("{}", params.len()),
            });
        }
        self.params = params;
        Ok(())
    }

    /// Serialize the checkpoint document (arch echo plus named tensors).
    pub fn to_checkpoint_json(&self) -> serde_json::Value {
        let arch = &self.arch;
        let groups: Vec<serde_json::Value> = arch
            .groups
            .iter()
            .map(|g| {
                serde_json::json!({
                    "id": g.id,
                    "signals": g.signals,
                    "latent_dim": g.latent_dim,
                })
            })
            .collect();
        let mut tensors = serde_json::Map::new();
        for spec in self.layout.specs() {
            tensors.insert(
                spec.name.clone(),
                serde_json::json!({
                    "shape": spec.shape,
                    "data": self.params[spec.offset..spec.offset + spec.len].to_vec(),
                }),
            );
        }
        serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "arch": {
                "kind": arch.kind.name(),
                "window_len": arch.window_len,
                "beta": arch.beta,
                "kernel_size": arch.kernel_size,
                "dilations": arch.dilations,
                "channels": [arch.channels.0, arch.channels.1],
                "seed": arch.seed,
                "has_global_decoder": arch.has_global_decoder,
                "groups": groups,
                "map": arch.map.to_json(),
            },
            "params": serde_json::Value::Object(tensors),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let doc = self.to_checkpoint_json();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &doc)?;
        use std::io::Write;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Load a checkpoint, validating the stored arch against the requested
    /// map (and kind, when given).
    pub fn load_checkpoint(
        path: &Path,
        expected_map: &SubsystemSignalsMap,
        expected_kind: Option<ModelKind>,
    ) -> Result<MultiVae> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let doc: serde_json::Value = serde_json::from_reader(reader)?;
        Self::from_checkpoint_json(&doc, expected_map, expected_kind)
    }

    pub fn from_checkpoint_json(
        doc: &serde_json::Value,
        expected_map: &SubsystemSignalsMap,
        expected_kind: Option<ModelKind>,
    ) -> Result<MultiVae> {
        if doc["format"].as_str() != Some(CHECKPOINT_FORMAT) {
            return Err(CoreError::CheckpointMismatch("not a model checkpoint".into()));
        }
        let arch_doc = &doc["arch"];
        let kind = arch_doc["kind"]
            .as_str()
            .and_then(ModelKind::parse)
            .ok_or_else(|| CoreError::CheckpointMismatch("missing or unknown kind".into()))?;
        if let Some(expected) = expected_kind {
            if expected != kind {
                return Err(CoreError::KindMismatch {
                    expected: expected.name().into(),
                    got: kind.name().into(),
                });
            }
        }
        let stored_map = SubsystemSignalsMap::from_json(&arch_doc["map"])?;
        if &stored_map != expected_map {
            return Err(CoreError::CheckpointMismatch(
                "stored subsystem-signals map differs from the requested one".into(),
            ));
        }
        let mut groups = Vec::new();
        for g in arch_doc["groups"].as_array().unwrap_or(&Vec::new()) {
            let id = g["id"].as_str().unwrap_or_default().to_string();
            let signals: Vec<String> = g["signals"]
                .as_array()
                .unwrap_or(&Vec::new())
                .iter()
                .filter_map(|s| s.as_str().map(String::from))
                .collect();
            let latent_dim = g["latent_dim"].as_u64().unwrap_or(0) as usize;
            let cols = signals
                .iter()
                .map(|s| expected_map.signal_index(s))
                .collect::<Result<Vec<_>>>()?;
            groups.push(GroupSpec { id, signals, cols, latent_dim });
        }
        if groups.is_empty() {
            return Err(CoreError::CheckpointMismatch("checkpoint has no groups".into()));
        }
        let dil: Vec<usize> = arch_doc["dilations"]
            .as_array()
            .unwrap_or(&Vec::new())
            .iter()
            .filter_map(|v| v.as_u64().map(|x| x as usize))
            .collect();
        let channels = (
            arch_doc["channels"][0].as_u64().unwrap_or(0) as usize,
            arch_doc["channels"][1].as_u64().unwrap_or(0) as usize,
        );
        let arch = VaeArch {
            kind,
            map: stored_map,
            window_len: arch_doc["window_len"].as_u64().unwrap_or(0) as usize,
            groups,
            channels,
            kernel_size: arch_doc["kernel_size"].as_u64().unwrap_or(0) as usize,
            dilations: dil,
            beta: arch_doc["beta"].as_f64().unwrap_or(0.0),
            has_global_decoder: arch_doc["has_global_decoder"].as_bool().unwrap_or(false),
            seed: arch_doc["seed"].as_u64().unwrap_or(0),
        };
        let mut model = MultiVae::new(arch)?;
        let tensors = doc["params"]
            .as_object()
            .ok_or_else(|| CoreError::CheckpointMismatch("missing params".into()))?;
        if tensors.len() != model.layout.specs().len() {
            return Err(CoreError::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                model.layout.specs().len(),
                tensors.len()
            )));
        }
        for spec in model.layout.specs().to_vec() {
            let entry = tensors.get(&spec.name).ok_or_else(|| {
                CoreError::CheckpointMismatch(format!("missing tensor '{}'", spec.name))
            })?;
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .unwrap_or(&Vec::new())
                .iter()
                .filter_map(|v| v.as_u64().map(|x| x as usize))
                .collect();
            if shape != spec.shape {
                return Err(CoreError::CheckpointMismatch(format!(
                    "tensor '{}' has shape {shape:?}, expected {:?}",
                    spec.name, spec.shape
                )));
            }
            let data = entry["data"].as_array().ok_or_else(|| {
                CoreError::CheckpointMismatch(format!("tensor '{}' missing data", spec.name))
            })?;
            if data.len() != spec.len {
                return Err(CoreError::CheckpointMismatch(format!(
                    "tensor '{}' has {} values, expected {}",
                    spec.name,
                    data.len(),
                    spec.len
                )));
            }
            for (i, v) in data.iter().enumerate() {
                model.params[spec.offset + i] = v.as_f64().ok_or_else(|| {
                    CoreError::CheckpointMismatch(format!("tensor '{}' has non-numeric data", spec.name))
                })?;
            }
        }
        Ok(model)
    }
}

struct TrainState {
    enc_caches: Vec<EncCache>,
    dec_caches: Vec<DecCache>,
    global_cache: Option<DecCache>,
    mus: Vec<Array2<f64>>,
    logvars: Vec<Array2<f64>>,
    noises: Vec<Array2<f64>>,
    x_groups: Vec<Array3<f64>>,
    full: Array3<f64>,
    global_xhat: Option<Array3<f64>>,
}

fn concat_cols(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("matching batch dims")
}

fn mean_squared_error(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut sum = 0.0;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x - y;
        sum += d * d;
    });
    sum / a.len() as f64
}

/// Closed-form KL(q || N(0, I)) summed over latent dims, averaged over the
/// batch: `-0.5 * sum(1 + lv - mu^2 - exp(lv))`.
pub fn kl_to_standard_normal(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    let batch = mu.shape()[0] as f64;
    let mut sum = 0.0;
    ndarray::Zip::from(mu).and(logvar).for_each(|&m, &lv| {
        sum += -0.5 * (1.0 + lv - m * m - lv.exp());
    });
    sum / batch
}

fn azip_sub_scale(a: &Array3<f64>, b: &Array3<f64>, scale: f64) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros(a.raw_dim());
    ndarray::Zip::from(&mut out).and(a).and(b).for_each(|o, &x, &y| {
        *o = scale * (x - y);
    });
    out
}
