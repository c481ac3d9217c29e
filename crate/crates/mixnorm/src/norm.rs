//! Normalization variants for test-time adaptation.
//!
//! The central objects are per-channel `ChannelStats` and a `MixNormState`
//! holding the exponential-moving global statistics. On top of those sit the
//! per-sample mix-norm update, its batch variant with adaptive moving speed,
//! and the ablation variants (instance / augmentation-local / fixed-global /
//! moving-global / online-batch).
//!
//! Note the normalization formula keeps epsilon OUTSIDE the square root,
//! `alpha * (F - mu) / (eps + sqrt(var)) + beta`. This differs from the usual
//! batch-norm `sqrt(var + eps)` and is intentional.

use crate::error::{Error, Result};
use crate::tensor::{affine_map, reduce_mean, reduce_var, Tensor};

/// Per-channel mean and variance vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::usage("mean/var length mismatch"));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::usage("negative variance"));
        }
        Ok(ChannelStats { mean, var })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Learnable per-channel scale/shift plus the stabilizing epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl AffineParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        AffineParams {
            alpha: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        }
    }
}

/// Per-sample mix-norm configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixNormConfig {
    /// Exponential moving speed for the global statistics.
    pub tau: f64,
    /// Convex mixing weight of local statistics.
    pub m: f64,
}

impl Default for MixNormConfig {
    fn default() -> Self {
        MixNormConfig { tau: 1e-3, m: 0.05 }
    }
}

/// Batch mix-norm configuration; tau is adapted from the batch size unless
/// overridden.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixNormBnConfig {
    pub tau_max: f64,
    pub m: f64,
    /// Fixed tau replacing the adaptive rule; used by equivalence tests.
    pub tau_override: Option<f64>,
}

impl Default for MixNormBnConfig {
    fn default() -> Self {
        MixNormBnConfig { tau_max: 0.9, m: 0.05, tau_override: None }
    }
}

/// Mutable state of one normalization slot during adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixNormState {
    pub global: ChannelStats,
    pub affine: AffineParams,
    pub step: u64,
    pub affine_frozen: bool,
}

impl MixNormState {
    /// Build a state from pretrained batch-norm statistics and parameters.
    pub fn init_from_pretrained(
        bn_mean: Vec<f64>,
        bn_var: Vec<f64>,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        eps: f64,
    ) -> Result<Self> {
        let d = bn_mean.len();
        if bn_var.len() != d || alpha.len() != d || beta.len() != d {
            return Err(Error::usage("pretrained vectors must share one length"));
        }
        if eps <= 0.0 {
            return Err(Error::usage("eps must be > 0"));
        }
        let global = ChannelStats::new(bn_mean, bn_var)?;
        Ok(MixNormState {
            global,
            affine: AffineParams { alpha, beta, eps },
            step: 0,
            affine_frozen: false,
        })
    }
}

/// Per-channel mean/variance pooled over every non-channel axis.
/// `channel_axis` selects the channel dimension (0 for D.H.W, 1 for B.D.H.W).
pub fn channel_stats(t: &Tensor, channel_axis: usize) -> Result<ChannelStats> {
    let axes: Vec<usize> = (0..t.rank()).filter(|&a| a != channel_axis).collect();
    let mean = reduce_mean(t, &axes)?;
    let var = reduce_var(t, &mean, &axes)?;
    ChannelStats::new(mean.into_values(), var.into_values())
}

/// Statistics of a single D.H.W feature map over its spatial axes.
pub fn sample_stats(f: &Tensor) -> Result<ChannelStats> {
    if f.rank() != 3 {
        return Err(Error::usage(format!("sample_stats expects rank 3, got {}", f.rank())));
    }
    channel_stats(f, 0)
}

/// Statistics pooled over views and spatial axes of an Nv.D.H.W stack.
pub fn local_stats(views: &Tensor) -> Result<ChannelStats> {
    if views.rank() != 4 {
        return Err(Error::usage(format!("local_stats expects rank 4, got {}", views.rank())));
    }
    channel_stats(views, 1)
}

/// global <- (1 - tau) * global + tau * s, for mean and variance alike.
pub fn ema_update(state: &mut MixNormState, s: &ChannelStats, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::usage(format!("tau out of [0,1]: {tau}")));
    }
    if s.channels() != state.global.channels() {
        return Err(Error::usage("channel count mismatch in ema_update"));
    }
    for c in 0..s.channels() {
        state.global.mean[c] = (1.0 - tau) * state.global.mean[c] + tau * s.mean[c];
        state.global.var[c] = (1.0 - tau) * state.global.var[c] + tau * s.var[c];
    }
    state.step += 1;
    Ok(())
}

/// Convex combination of global and local statistics.
pub fn mix_stats(global: &ChannelStats, local: &ChannelStats, m: f64) -> Result<ChannelStats> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::usage(format!("mixing scale out of [0,1]: {m}")));
    }
    if global.channels() != local.channels() {
        return Err(Error::usage("channel count mismatch in mix_stats"));
    }
    let mean = global
        .mean
        .iter()
        .zip(&local.mean)
        .map(|(&g, &l)| (1.0 - m) * g + m * l)
        .collect();
    let var = global
        .var
        .iter()
        .zip(&local.var)
        .map(|(&g, &l)| (1.0 - m) * g + m * l)
        .collect();
    ChannelStats::new(mean, var)
}

fn channel_axis_for(t: &Tensor) -> Result<usize> {
    match t.rank() {
        3 => Ok(0),
        4 => Ok(1),
        5 => Ok(2),
        r => Err(Error::usage(format!("no channel convention for rank {r}"))),
    }
}

/// (F - mu) / (eps + sqrt(var)) per channel; no affine applied.
pub fn standardize(f: &Tensor, stats: &ChannelStats, eps: f64) -> Result<Tensor> {
    let axis = channel_axis_for(f)?;
    let d = f.shape()[axis];
    if stats.channels() != d {
        return Err(Error::usage("stats length does not match channel extent"));
    }
    let scale: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (eps + v.sqrt())).collect();
    let shift: Vec<f64> = stats
        .mean
        .iter()
        .zip(&scale)
        .map(|(&mu, &s)| -mu * s)
        .collect();
    affine_map(f, &scale, &shift, axis)
}

/// alpha * (F - mu) / (eps + sqrt(var)) + beta, broadcast per channel.
pub fn normalize(f: &Tensor, stats: &ChannelStats, affine: &AffineParams) -> Result<Tensor> {
    let axis = channel_axis_for(f)?;
    let hat = standardize(f, stats, affine.eps)?;
    affine_map(&hat, &affine.alpha, &affine.beta, axis)
}

/// tau_max * 10^(-3/B), clamped to [0, 1].
pub fn adaptive_tau(batch_size: usize, tau_max: f64) -> f64 {
    let tau = tau_max * 10f64.powf(-3.0 / batch_size as f64);
    tau.clamp(0.0, 1.0)
}

/// Mixed statistics driving one per-sample mix-norm step: EMA-update the
/// global pair with the sample's own spatial statistics, pool local
/// statistics over the sample and its views, then mix. The returned stats
/// use the post-update global pair.
pub fn mixnorm_step_stats(
    state: &mut MixNormState,
    cfg: &MixNormConfig,
    f: &Tensor,
    views: &Tensor,
) -> Result<ChannelStats> {
    if views.rank() != 4 || views.shape()[0] == 0 {
        return Err(Error::usage("views must be a nonempty N.D.H.W stack"));
    }
    let s = sample_stats(f)?;
    ema_update(state, &s, cfg.tau)?;
    let mut rows: Vec<Tensor> = vec![f.clone()];
    for i in 0..views.shape()[0] {
        rows.push(views.index_axis0(i)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    let local = local_stats(&Tensor::stack(&refs)?)?;
    mix_stats(&state.global, &local, cfg.m)
}

/// One Algorithm-1 forward: returns the normalized sample, normalized views
/// and mutates the state's EMA.
pub fn mixnorm_forward(
    state: &mut MixNormState,
    cfg: &MixNormConfig,
    f: &Tensor,
    views: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mixed = mixnorm_step_stats(state, cfg, f, views)?;
    let f_out = normalize(f, &mixed, &state.affine)?;
    let views_out = normalize(views, &mixed, &state.affine)?;
    Ok((f_out, views_out))
}

/// Mixed statistics for one batch mix-norm step. `batch` is B.D.H.W and
/// `views` is B.N.D.H.W; the EMA uses statistics pooled over the originals,
/// local statistics pool originals and views together.
pub fn mixnormbn_step_stats(
    state: &mut MixNormState,
    cfg: &MixNormBnConfig,
    batch: &Tensor,
    views: &Tensor,
) -> Result<ChannelStats> {
    if batch.rank() != 4 {
        return Err(Error::usage("batch must be B.D.H.W"));
    }
    if views.rank() != 5 || views.shape()[0] != batch.shape()[0] {
        return Err(Error::usage("views must be B.N.D.H.W matching the batch"));
    }
    let b = batch.shape()[0];
    let tau = cfg
        .tau_override
        .unwrap_or_else(|| adaptive_tau(b, cfg.tau_max))
        .clamp(0.0, 1.0);
    let s = channel_stats(batch, 1)?;
    ema_update(state, &s, tau)?;
    let d = batch.shape()[1];
    let h = batch.shape()[2];
    let w = batch.shape()[3];
    let n = views.shape()[1];
    let flat_views = views.reshape(&[b * n, d, h, w])?;
    let mut all = batch.values().to_vec();
    all.extend_from_slice(flat_views.values());
    let stacked = Tensor::new(&[b + b * n, d, h, w], all)?;
    let local = local_stats(&stacked)?;
    mix_stats(&state.global, &local, cfg.m)
}

/// One Algorithm-2 forward over a batch.
pub fn mixnormbn_forward(
    state: &mut MixNormState,
    cfg: &MixNormBnConfig,
    batch: &Tensor,
    views: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mixed = mixnormbn_step_stats(state, cfg, batch, views)?;
    let b_out = normalize(batch, &mixed, &state.affine)?;
    let v_out = normalize(views, &mixed, &state.affine)?;
    Ok((b_out, v_out))
}

/// Ablation ways of collecting normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Instance,
    AugmentationLocal,
    FixedGlobal,
    MovingGlobal,
    OnlineBatch,
}

impl VariantKind {
    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::Instance => "instance",
            VariantKind::AugmentationLocal => "augmentation_local",
            VariantKind::FixedGlobal => "fixed_global",
            VariantKind::MovingGlobal => "moving_global",
            VariantKind::OnlineBatch => "online_batch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(VariantKind::Instance),
            "augmentation_local" => Ok(VariantKind::AugmentationLocal),
            "fixed_global" => Ok(VariantKind::FixedGlobal),
            "moving_global" => Ok(VariantKind::MovingGlobal),
            "online_batch" => Ok(VariantKind::OnlineBatch),
            _ => Err(Error::usage(format!("unknown variant kind: {s}"))),
        }
    }
}

/// Moving speed used by the moving-global ablation.
pub const MOVING_GLOBAL_TAU: f64 = 1e-3;

/// Statistics for one ablation-variant step on a B.D.H.W batch (per-sample
/// variants are exercised with B = 1 by the harness). `views` is B.N.D.H.W
/// and consulted only by the augmentation-local variant.
pub fn variant_step_stats(
    kind: VariantKind,
    state: &mut MixNormState,
    batch: &Tensor,
    views: Option<&Tensor>,
) -> Result<ChannelStats> {
    if batch.rank() != 4 {
        return Err(Error::usage("variant batch must be B.D.H.W"));
    }
    match kind {
        VariantKind::Instance => channel_stats(batch, 1),
        VariantKind::AugmentationLocal => {
            let views = views
                .ok_or_else(|| Error::usage("augmentation_local requires views"))?;
            if views.rank() != 5 || views.shape()[0] != batch.shape()[0] {
                return Err(Error::usage("views must be B.N.D.H.W matching the batch"));
            }
            let (b, n, d, h, w) = (
                views.shape()[0],
                views.shape()[1],
                views.shape()[2],
                views.shape()[3],
                views.shape()[4],
            );
            let mut all = batch.values().to_vec();
            all.extend_from_slice(views.values());
            let stacked = Tensor::new(&[b + b * n, d, h, w], all)?;
            local_stats(&stacked)
        }
        VariantKind::FixedGlobal => Ok(state.global.clone()),
        VariantKind::MovingGlobal => {
            let s = channel_stats(batch, 1)?;
            ema_update(state, &s, MOVING_GLOBAL_TAU)?;
            Ok(state.global.clone())
        }
        VariantKind::OnlineBatch => channel_stats(batch, 1),
    }
}
