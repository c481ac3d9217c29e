//! A small convolutional classifier with pluggable normalization slots,
//! entropy / cross-entropy losses, and hand-written gradients.
//!
//! Two gradient paths exist:
//!   * source training: full-network backprop with train-mode batch norm
//!     (statistics differentiated through, conventional sqrt(var + eps));
//!   * test-time adaptation: gradients restricted to the norm slots' affine
//!     parameters, with the step's mixed statistics treated as constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::norm::{
    channel_stats, mixnorm_step_stats, mixnormbn_step_stats, variant_step_stats, AffineParams,
    ChannelStats, MixNormBnConfig, MixNormConfig, MixNormState, VariantKind,
};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3x3 { in_ch: usize, out_ch: usize },
    NormSlot { channels: usize },
    Relu,
    GlobalAvgPool,
    Dense { in_dim: usize, out_dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    Conv { w: Vec<f64>, b: Vec<f64> },
    Dense { w: Vec<f64>, b: Vec<f64> },
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub weights: Vec<LayerWeights>,
    /// Learned scale/shift per norm slot, in slot order.
    pub norm_affine: Vec<AffineParams>,
    /// Running statistics recorded during source training, in slot order.
    pub bn_training_stats: Vec<ChannelStats>,
    pub input_dims: [usize; 3],
    pub num_classes: usize,
    pub trained: bool,
    pub clean_val_error: Option<f64>,
}

/// The reference backbone: two conv+norm+relu stages, global average
/// pooling, one dense head.
pub fn reference_backbone(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv3x3 { in_ch: 3, out_ch: 16 },
        LayerSpec::NormSlot { channels: 16 },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_ch: 16, out_ch: 32 },
        LayerSpec::NormSlot { channels: 32 },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { in_dim: 32, out_dim: num_classes },
    ]
}

impl Network {
    pub fn init(
        layers: Vec<LayerSpec>,
        input_dims: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b21);
        let mut weights = Vec::with_capacity(layers.len());
        let mut norm_affine = Vec::new();
        let mut bn_training_stats = Vec::new();
        for l in &layers {
            match *l {
                LayerSpec::Conv3x3 { in_ch, out_ch } => {
                    let fan_in = (in_ch * 9) as f64;
                    let limit = (6.0 / fan_in).sqrt();
                    let w = (0..out_ch * in_ch * 9)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect();
                    weights.push(LayerWeights::Conv { w, b: vec![0.0; out_ch] });
                }
                LayerSpec::Dense { in_dim, out_dim } => {
                    let limit = (6.0 / in_dim as f64).sqrt();
                    let w = (0..out_dim * in_dim)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect();
                    weights.push(LayerWeights::Dense { w, b: vec![0.0; out_dim] });
                }
                LayerSpec::NormSlot { channels } => {
                    norm_affine.push(AffineParams::identity(channels, BN_EPS));
                    bn_training_stats.push(
                        ChannelStats::new(vec![0.0; channels], vec![0.0; channels]).unwrap(),
                    );
                    weights.push(LayerWeights::None);
                }
                _ => weights.push(LayerWeights::None),
            }
        }
        Network {
            layers,
            weights,
            norm_affine,
            bn_training_stats,
            input_dims,
            num_classes,
            trained: false,
            clean_val_error: None,
        }
    }

    pub fn num_norm_slots(&self) -> usize {
        self.norm_affine.len()
    }
}

// ---------------------------------------------------------------------------
// layer primitives (flat row-major buffers)
// ---------------------------------------------------------------------------

fn conv3x3_forward(
    x: &[f64],
    rows: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; rows * cout * hw];
    for r in 0..rows {
        for co in 0..cout {
            let ob = (r * cout + co) * hw;
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        let ib = (r * cin + ci) * hw;
                        let kb = (co * cin + ci) * 9;
                        for ky in 0..3usize {
                            let sy = y as i64 + ky as i64 - 1;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = xo as i64 + kx as i64 - 1;
                                if sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                acc += wgt[kb + ky * 3 + kx] * x[ib + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[ob + y * w + xo] = acc;
                }
            }
        }
    }
    out
}

fn conv3x3_backward_input(
    dy: &[f64],
    rows: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut dx = vec![0.0; rows * cin * hw];
    for r in 0..rows {
        for co in 0..cout {
            let ob = (r * cout + co) * hw;
            for y in 0..h {
                for xo in 0..w {
                    let g = dy[ob + y * w + xo];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let ib = (r * cin + ci) * hw;
                        let kb = (co * cin + ci) * 9;
                        for ky in 0..3usize {
                            let sy = y as i64 + ky as i64 - 1;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = xo as i64 + kx as i64 - 1;
                                if sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                dx[ib + sy as usize * w + sx as usize] += g * wgt[kb + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv3x3_backward_params(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut dw = vec![0.0; cout * cin * 9];
    let mut db = vec![0.0; cout];
    for r in 0..rows {
        for co in 0..cout {
            let ob = (r * cout + co) * hw;
            for y in 0..h {
                for xo in 0..w {
                    let g = dy[ob + y * w + xo];
                    if g == 0.0 {
                        continue;
                    }
                    db[co] += g;
                    for ci in 0..cin {
                        let ib = (r * cin + ci) * hw;
                        let kb = (co * cin + ci) * 9;
                        for ky in 0..3usize {
                            let sy = y as i64 + ky as i64 - 1;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = xo as i64 + kx as i64 - 1;
                                if sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                dw[kb + ky * 3 + kx] += g * x[ib + sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db)
}

// ---------------------------------------------------------------------------
// adaptation-time forward/backward
// ---------------------------------------------------------------------------

/// Which statistics a norm slot uses during adaptation.
#[derive(Clone, Debug)]
pub enum NormOp {
    /// Pretrained statistics, conventional sqrt(var + eps) (the unadapted
    /// source model).
    EvalBn,
    /// Per-sample mix-norm; the forward batch must hold exactly one sample.
    MixNorm(MixNormConfig),
    MixNormBn(MixNormBnConfig),
    Variant(VariantKind),
}

/// One adaptation session's normalization state, one entry per norm slot.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub op: NormOp,
    pub states: Vec<MixNormState>,
}

impl AdaptState {
    pub fn new(net: &Network, op: NormOp, affine_frozen: bool) -> Result<AdaptState> {
        if !net.trained {
            return Err(Error::usage("network has not been source-trained"));
        }
        let mut states = Vec::with_capacity(net.num_norm_slots());
        for (stats, affine) in net.bn_training_stats.iter().zip(&net.norm_affine) {
            let mut st = MixNormState::init_from_pretrained(
                stats.mean.clone(),
                stats.var.clone(),
                affine.alpha.clone(),
                affine.beta.clone(),
                affine.eps,
            )?;
            st.affine_frozen = affine_frozen;
            states.push(st);
        }
        Ok(AdaptState { op, states })
    }
}

struct NormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Everything the affine-gradient backward pass needs from a forward call.
pub struct Trace {
    layer_inputs: Vec<Vec<f64>>,
    norm_caches: Vec<Option<NormCache>>,
    /// Statistics each norm slot actually used, in slot order.
    pub pinned_stats: Vec<ChannelStats>,
    b: usize,
    n_views: usize,
    spatial: (usize, usize),
}

fn apply_norm_rows(
    x: &[f64],
    rows: usize,
    c: usize,
    hw: usize,
    stats: &ChannelStats,
    affine: &AffineParams,
    eps_inside_sqrt: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = stats
        .var
        .iter()
        .map(|&v| {
            if eps_inside_sqrt {
                1.0 / (v + affine.eps).sqrt()
            } else {
                1.0 / (affine.eps + v.sqrt())
            }
        })
        .collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for ch in 0..c {
            let base = (r * c + ch) * hw;
            let (mu, is) = (stats.mean[ch], inv_std[ch]);
            let (a, b) = (affine.alpha[ch], affine.beta[ch]);
            for i in 0..hw {
                let xh = (x[base + i] - mu) * is;
                x_hat[base + i] = xh;
                out[base + i] = a * xh + b;
            }
        }
    }
    (out, x_hat, inv_std)
}

/// Forward a batch of originals (B.C.H.W) plus optional views (B.N.C.H.W)
/// through the network with the session's normalization binding. Logits are
/// produced only for the originals; views feed statistics and are dropped at
/// the pooling layer.
pub fn forward_adapt(
    net: &Network,
    adapt: &mut AdaptState,
    originals: &Tensor,
    views: Option<&Tensor>,
) -> Result<(Tensor, Trace)> {
    if originals.rank() != 4 {
        return Err(Error::usage("originals must be B.C.H.W"));
    }
    let b = originals.shape()[0];
    let [cin, h, w] = net.input_dims;
    if originals.shape()[1..] != [cin, h, w] {
        return Err(Error::usage(format!(
            "input shape {:?} does not match network {:?}",
            originals.shape(),
            net.input_dims
        )));
    }
    let n_views = match views {
        Some(v) => {
            if v.rank() != 5 || v.shape()[0] != b || v.shape()[2..] != [cin, h, w] {
                return Err(Error::usage("views must be B.N.C.H.W matching the batch"));
            }
            v.shape()[1]
        }
        None => 0,
    };
    if matches!(adapt.op, NormOp::MixNorm(_)) {
        if b != 1 {
            return Err(Error::usage("per-sample mix-norm requires batch size 1"));
        }
        if n_views == 0 {
            return Err(Error::usage("per-sample mix-norm requires at least one view"));
        }
    }
    let needs_views = matches!(
        adapt.op,
        NormOp::MixNorm(_) | NormOp::MixNormBn(_) | NormOp::Variant(VariantKind::AugmentationLocal)
    );
    if matches!(adapt.op, NormOp::MixNormBn(_)) && n_views == 0 {
        return Err(Error::usage("batch mix-norm requires at least one view"));
    }
    if matches!(adapt.op, NormOp::Variant(VariantKind::AugmentationLocal)) && n_views == 0 {
        return Err(Error::usage("augmentation_local requires views"));
    }

    // rows = originals followed by all views
    let rows = b + b * n_views;
    let mut x = originals.values().to_vec();
    if let Some(v) = views {
        if needs_views {
            x.extend_from_slice(v.values());
        }
    }
    let rows = if needs_views { rows } else { b };

    let mut cur_c = cin;
    let hw = h * w;
    let mut layer_inputs: Vec<Vec<f64>> = Vec::with_capacity(net.layers.len());
    let mut norm_caches: Vec<Option<NormCache>> = Vec::with_capacity(net.layers.len());
    let mut pinned_stats = Vec::new();
    let mut slot = 0usize;
    let mut pooled = false;

    for (li, layer) in net.layers.iter().enumerate() {
        layer_inputs.push(x.clone());
        let mut cache = None;
        match layer {
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                if *in_ch != cur_c || pooled {
                    return Err(Error::usage("conv layer dims do not compose"));
                }
                let (wgt, bias) = match &net.weights[li] {
                    LayerWeights::Conv { w, b } => (w, b),
                    _ => return Err(Error::usage("missing conv weights")),
                };
                x = conv3x3_forward(&x, rows, cur_c, h, w, wgt, bias, *out_ch);
                cur_c = *out_ch;
            }
            LayerSpec::NormSlot { channels } => {
                if *channels != cur_c || pooled {
                    return Err(Error::usage("norm slot dims do not compose"));
                }
                let act = Tensor::new(&[rows, cur_c, h, w], x.clone())?;
                let batch_part = Tensor::new(
                    &[b, cur_c, h, w],
                    x[..b * cur_c * hw].to_vec(),
                )?;
                let state = &mut adapt.states[slot];
                let (stats, eps_inside) = match &adapt.op {
                    NormOp::EvalBn => (state.global.clone(), true),
                    NormOp::MixNorm(cfg) => {
                        let f = batch_part.reshape(&[cur_c, h, w])?;
                        let view_rows = Tensor::new(
                            &[n_views, cur_c, h, w],
                            x[b * cur_c * hw..].to_vec(),
                        )?;
                        (mixnorm_step_stats(state, cfg, &f, &view_rows)?, false)
                    }
                    NormOp::MixNormBn(cfg) => {
                        let view_rows = Tensor::new(
                            &[b, n_views, cur_c, h, w],
                            x[b * cur_c * hw..].to_vec(),
                        )?;
                        (mixnormbn_step_stats(state, cfg, &batch_part, &view_rows)?, false)
                    }
                    NormOp::Variant(kind) => {
                        let view_rows = if needs_views {
                            Some(Tensor::new(
                                &[b, n_views, cur_c, h, w],
                                x[b * cur_c * hw..].to_vec(),
                            )?)
                        } else {
                            None
                        };
                        (
                            variant_step_stats(*kind, state, &batch_part, view_rows.as_ref())?,
                            false,
                        )
                    }
                };
                let (out, x_hat, inv_std) = apply_norm_rows(
                    act.values(),
                    rows,
                    cur_c,
                    hw,
                    &stats,
                    &state.affine,
                    eps_inside,
                );
                x = out;
                cache = Some(NormCache { x_hat, inv_std });
                pinned_stats.push(stats);
                slot += 1;
            }
            LayerSpec::Relu => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::GlobalAvgPool => {
                // views stop contributing here; keep originals only
                let mut out = vec![0.0; b * cur_c];
                for r in 0..b {
                    for ch in 0..cur_c {
                        let base = (r * cur_c + ch) * hw;
                        out[r * cur_c + ch] =
                            x[base..base + hw].iter().sum::<f64>() / hw as f64;
                    }
                }
                x = out;
                pooled = true;
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if !pooled || *in_dim != cur_c {
                    return Err(Error::usage("dense layer dims do not compose"));
                }
                let (wgt, bias) = match &net.weights[li] {
                    LayerWeights::Dense { w, b } => (w, b),
                    _ => return Err(Error::usage("missing dense weights")),
                };
                let mut out = vec![0.0; b * out_dim];
                for r in 0..b {
                    for o in 0..*out_dim {
                        let mut acc = bias[o];
                        for i in 0..*in_dim {
                            acc += wgt[o * in_dim + i] * x[r * in_dim + i];
                        }
                        out[r * out_dim + o] = acc;
                    }
                }
                x = out;
                cur_c = *out_dim;
            }
        }
        norm_caches.push(cache);
    }
    let logits = Tensor::new(&[b, net.num_classes], x)?;
    Ok((
        logits,
        Trace {
            layer_inputs,
            norm_caches,
            pinned_stats,
            b,
            n_views,
            spatial: (h, w),
        },
    ))
}

/// Forward originals with every norm slot pinned to externally supplied
/// statistics (paper-form normalization) and explicit affine parameters.
/// Used by the finite-difference gradient oracle.
pub fn forward_pinned(
    net: &Network,
    affines: &[AffineParams],
    originals: &Tensor,
    pinned: &[ChannelStats],
) -> Result<Tensor> {
    if affines.len() != net.num_norm_slots() || pinned.len() != net.num_norm_slots() {
        return Err(Error::usage("pinned stats/affine count mismatch"));
    }
    let b = originals.shape()[0];
    let [cin, h, w] = net.input_dims;
    let hw = h * w;
    let mut x = originals.values().to_vec();
    let mut cur_c = cin;
    let mut slot = 0;
    for (li, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv3x3 { out_ch, .. } => {
                let (wgt, bias) = match &net.weights[li] {
                    LayerWeights::Conv { w, b } => (w, b),
                    _ => unreachable!(),
                };
                x = conv3x3_forward(&x, b, cur_c, h, w, wgt, bias, *out_ch);
                cur_c = *out_ch;
            }
            LayerSpec::NormSlot { .. } => {
                let (out, _, _) =
                    apply_norm_rows(&x, b, cur_c, hw, &pinned[slot], &affines[slot], false);
                x = out;
                slot += 1;
            }
            LayerSpec::Relu => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::GlobalAvgPool => {
                let mut out = vec![0.0; b * cur_c];
                for r in 0..b {
                    for ch in 0..cur_c {
                        let base = (r * cur_c + ch) * hw;
                        out[r * cur_c + ch] = x[base..base + hw].iter().sum::<f64>() / hw as f64;
                    }
                }
                x = out;
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                let (wgt, bias) = match &net.weights[li] {
                    LayerWeights::Dense { w, b } => (w, b),
                    _ => unreachable!(),
                };
                let mut out = vec![0.0; b * out_dim];
                for r in 0..b {
                    for o in 0..*out_dim {
                        let mut acc = bias[o];
                        for i in 0..*in_dim {
                            acc += wgt[o * in_dim + i] * x[r * in_dim + i];
                        }
                        out[r * out_dim + o] = acc;
                    }
                }
                x = out;
                cur_c = *out_dim;
            }
        }
    }
    Tensor::new(&[b, net.num_classes], x)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

fn softmax_row(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean over the batch of the softmax entropy, in nats.
pub fn entropy_loss(logits: &Tensor) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[1] < 2 {
        return Err(Error::usage("entropy_loss expects B.K logits with K >= 2"));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for r in 0..b {
        let p = softmax_row(&logits.values()[r * k..(r + 1) * k]);
        let h: f64 = p.iter().map(|&pi| if pi > 0.0 { -pi * pi.ln() } else { 0.0 }).sum();
        total += h;
    }
    Ok(total / b as f64)
}

/// d(entropy_loss)/d(logits), mean-reduced over the batch.
pub fn entropy_grad(logits: &Tensor) -> Result<Tensor> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut g = vec![0.0; b * k];
    for r in 0..b {
        let p = softmax_row(&logits.values()[r * k..(r + 1) * k]);
        let h: f64 = p.iter().map(|&pi| if pi > 0.0 { -pi * pi.ln() } else { 0.0 }).sum();
        for j in 0..k {
            let pj = p[j];
            let lg = if pj > 0.0 { pj.ln() } else { 0.0 };
            g[r * k + j] = -pj * (lg + h) / b as f64;
        }
    }
    Tensor::new(logits.shape(), g)
}

/// Cross entropy (mean) and its logit gradient.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Vec<f64>) {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * k];
    for r in 0..b {
        let p = softmax_row(&logits.values()[r * k..(r + 1) * k]);
        loss += -(p[labels[r]].max(1e-300)).ln();
        for j in 0..k {
            grad[r * k + j] = (p[j] - if j == labels[r] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

// ---------------------------------------------------------------------------
// affine gradients (adaptation path)
// ---------------------------------------------------------------------------

/// Per-slot (d_alpha, d_beta) of the mean entropy loss, statistics constant.
pub fn grad_affine(
    net: &Network,
    adapt: &AdaptState,
    trace: &Trace,
    logits: &Tensor,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let (h, w) = trace.spatial;
    let hw = h * w;
    let b = trace.b;
    let mut dy = entropy_grad(logits)?.into_values();
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = adapt
        .states
        .iter()
        .map(|s| (vec![0.0; s.affine.alpha.len()], vec![0.0; s.affine.beta.len()]))
        .collect();
    let mut slot = net.num_norm_slots();
    let mut spatial = false; // walking backward: false until we pass the pool
    let mut cur_c = net.num_classes;
    for (li, layer) in net.layers.iter().enumerate().rev() {
        match layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let wgt = match &net.weights[li] {
                    LayerWeights::Dense { w, .. } => w,
                    _ => unreachable!(),
                };
                let mut dx = vec![0.0; b * in_dim];
                for r in 0..b {
                    for o in 0..*out_dim {
                        let g = dy[r * out_dim + o];
                        for i in 0..*in_dim {
                            dx[r * in_dim + i] += g * wgt[o * in_dim + i];
                        }
                    }
                }
                dy = dx;
                cur_c = *in_dim;
            }
            LayerSpec::GlobalAvgPool => {
                let mut dx = vec![0.0; b * cur_c * hw];
                for r in 0..b {
                    for ch in 0..cur_c {
                        let g = dy[r * cur_c + ch] / hw as f64;
                        let base = (r * cur_c + ch) * hw;
                        for i in 0..hw {
                            dx[base + i] = g;
                        }
                    }
                }
                dy = dx;
                spatial = true;
            }
            LayerSpec::Relu => {
                let x = &trace.layer_inputs[li];
                for (i, g) in dy.iter_mut().enumerate() {
                    if x[i] <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            LayerSpec::NormSlot { channels } => {
                slot -= 1;
                let cache = trace.norm_caches[li]
                    .as_ref()
                    .ok_or_else(|| Error::usage("trace missing norm cache"))?;
                let affine = &adapt.states[slot].affine;
                let (da, db) = &mut grads[slot];
                debug_assert!(spatial);
                for r in 0..b {
                    for ch in 0..*channels {
                        let base = (r * channels + ch) * hw;
                        for i in 0..hw {
                            let g = dy[base + i];
                            da[ch] += g * cache.x_hat[base + i];
                            db[ch] += g;
                            dy[base + i] = g * affine.alpha[ch] * cache.inv_std[ch];
                        }
                    }
                }
                if slot == 0 {
                    break; // nothing below the first norm slot needs gradients
                }
                cur_c = *channels;
            }
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let wgt = match &net.weights[li] {
                    LayerWeights::Conv { w, .. } => w,
                    _ => unreachable!(),
                };
                dy = conv3x3_backward_input(&dy, b, *in_ch, h, w, wgt, *out_ch);
                cur_c = *in_ch;
            }
        }
    }
    let _ = trace.n_views;
    Ok(grads)
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: lr, beta1: 0.0, beta2: 0.0, eps: 0.0 }
    }
}

/// Moment buffers for a fixed collection of parameter groups.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, group_sizes: &[usize]) -> Self {
        OptimizerState {
            cfg,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update over aligned (params, grads) groups.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::usage("optimizer group count mismatch"));
        }
        self.t += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// source training (full backprop, train-mode batch norm)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            bn_momentum: 0.1,
        }
    }
}

struct TrainNormCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Train-mode forward over a labeled batch; batch statistics per norm slot,
/// conventional sqrt(var + eps). Updates running stats when asked.
fn forward_train(
    net: &mut Network,
    batch: &Tensor,
    update_running: bool,
    bn_momentum: f64,
) -> Result<(Tensor, Vec<Vec<f64>>, Vec<Option<TrainNormCache>>)> {
    let b = batch.shape()[0];
    let [cin, h, w] = net.input_dims;
    let hw = h * w;
    let mut x = batch.values().to_vec();
    let mut cur_c = cin;
    let mut inputs = Vec::new();
    let mut caches: Vec<Option<TrainNormCache>> = Vec::new();
    let mut slot = 0;
    for (li, layer) in net.layers.iter().enumerate() {
        inputs.push(x.clone());
        let mut cache = None;
        match layer {
            LayerSpec::Conv3x3 { out_ch, .. } => {
                let (wgt, bias) = match &net.weights[li] {
                    LayerWeights::Conv { w, b } => (w, b),
                    _ => unreachable!(),
                };
                x = conv3x3_forward(&x, b, cur_c, h, w, wgt, bias, *out_ch);
                cur_c = *out_ch;
            }
            LayerSpec::NormSlot { .. } => {
                let act = Tensor::new(&[b, cur_c, h, w], x.clone())?;
                let stats = channel_stats(&act, 1)?;
                if update_running {
                    let run = &mut net.bn_training_stats[slot];
                    for c in 0..cur_c {
                        run.mean[c] = (1.0 - bn_momentum) * run.mean[c] + bn_momentum * stats.mean[c];
                        run.var[c] = (1.0 - bn_momentum) * run.var[c] + bn_momentum * stats.var[c];
                    }
                }
                let (out, x_hat, inv_std) =
                    apply_norm_rows(&x, b, cur_c, hw, &stats, &net.norm_affine[slot], true);
                x = out;
                cache = Some(TrainNormCache { x_hat, inv_std });
                slot += 1;
            }
            LayerSpec::Relu => {
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::GlobalAvgPool => {
                let mut out = vec![0.0; b * cur_c];
                for r in 0..b {
                    for ch in 0..cur_c {
                        let base = (r * cur_c + ch) * hw;
                        out[r * cur_c + ch] = x[base..base + hw].iter().sum::<f64>() / hw as f64;
                    }
                }
                x = out;
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                let (wgt, bias) = match &net.weights[li] {
                    LayerWeights::Dense { w, b } => (w, b),
                    _ => unreachable!(),
                };
                let mut out = vec![0.0; b * out_dim];
                for r in 0..b {
                    for o in 0..*out_dim {
                        let mut acc = bias[o];
                        for i in 0..*in_dim {
                            acc += wgt[o * in_dim + i] * x[r * in_dim + i];
                        }
                        out[r * out_dim + o] = acc;
                    }
                }
                x = out;
                cur_c = *out_dim;
            }
        }
        caches.push(cache);
    }
    Ok((Tensor::new(&[b, net.num_classes], x)?, inputs, caches))
}

/// Full backward over every parameter. Returns grads aligned with the layer
/// list: conv/dense layers get (w, b), norm slots get (alpha, beta).
fn backward_train(
    net: &Network,
    inputs: &[Vec<f64>],
    caches: &[Option<TrainNormCache>],
    dlogits: Vec<f64>,
    b: usize,
) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
    let [_, h, w] = net.input_dims;
    let hw = h * w;
    let mut dy = dlogits;
    let mut grads: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; net.layers.len()];
    let mut cur_c = net.num_classes;
    let mut slot = net.num_norm_slots();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        match layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let wgt = match &net.weights[li] {
                    LayerWeights::Dense { w, .. } => w,
                    _ => unreachable!(),
                };
                let x = &inputs[li];
                let mut dw = vec![0.0; out_dim * in_dim];
                let mut db = vec![0.0; *out_dim];
                let mut dx = vec![0.0; b * in_dim];
                for r in 0..b {
                    for o in 0..*out_dim {
                        let g = dy[r * out_dim + o];
                        db[o] += g;
                        for i in 0..*in_dim {
                            dw[o * in_dim + i] += g * x[r * in_dim + i];
                            dx[r * in_dim + i] += g * wgt[o * in_dim + i];
                        }
                    }
                }
                grads[li] = Some((dw, db));
                dy = dx;
                cur_c = *in_dim;
            }
            LayerSpec::GlobalAvgPool => {
                let mut dx = vec![0.0; b * cur_c * hw];
                for r in 0..b {
                    for ch in 0..cur_c {
                        let g = dy[r * cur_c + ch] / hw as f64;
                        let base = (r * cur_c + ch) * hw;
                        for i in 0..hw {
                            dx[base + i] = g;
                        }
                    }
                }
                dy = dx;
            }
            LayerSpec::Relu => {
                let x = &inputs[li];
                for (i, g) in dy.iter_mut().enumerate() {
                    if x[i] <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            LayerSpec::NormSlot { channels } => {
                slot -= 1;
                let cache = caches[li].as_ref().expect("train cache");
                let affine = &net.norm_affine[slot];
                let c = *channels;
                let count = (b * hw) as f64;
                let mut da = vec![0.0; c];
                let mut db_ = vec![0.0; c];
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for r in 0..b {
                    for ch in 0..c {
                        let base = (r * c + ch) * hw;
                        for i in 0..hw {
                            let g = dy[base + i];
                            sum_dy[ch] += g;
                            sum_dy_xhat[ch] += g * cache.x_hat[base + i];
                        }
                    }
                }
                for ch in 0..c {
                    da[ch] = sum_dy_xhat[ch];
                    db_[ch] = sum_dy[ch];
                }
                // standard batch-norm input gradient (stats differentiated)
                for r in 0..b {
                    for ch in 0..c {
                        let base = (r * c + ch) * hw;
                        let k = affine.alpha[ch] * cache.inv_std[ch];
                        for i in 0..hw {
                            let g = dy[base + i];
                            dy[base + i] = k
                                * (g - sum_dy[ch] / count
                                    - cache.x_hat[base + i] * sum_dy_xhat[ch] / count);
                        }
                    }
                }
                grads[li] = Some((da, db_));
                cur_c = c;
            }
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let wgt = match &net.weights[li] {
                    LayerWeights::Conv { w, .. } => w,
                    _ => unreachable!(),
                };
                let x = &inputs[li];
                let (dw, db) = conv3x3_backward_params(&dy, x, b, *in_ch, h, w, *out_ch);
                grads[li] = Some((dw, db));
                if li > 0 {
                    dy = conv3x3_backward_input(&dy, b, *in_ch, h, w, wgt, *out_ch);
                }
                cur_c = *in_ch;
            }
        }
    }
    grads
}

/// Supervised source training. Deterministic for a fixed seed; records
/// running batch-norm statistics and the clean validation error.
pub fn train_source(
    layers: Vec<LayerSpec>,
    input_dims: [usize; 3],
    num_classes: usize,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Network> {
    if train.is_empty() {
        return Err(Error::usage("training dataset is empty"));
    }
    let mut net = Network::init(layers, input_dims, num_classes, seed);
    if cfg.epochs == 0 {
        // initialization-only network; zero-filled running stats stay invalid
        net.trained = false;
        return Ok(net);
    }
    // parameter groups: one (w,b)-style pair per parametric layer
    let mut group_sizes = Vec::new();
    for (li, l) in net.layers.iter().enumerate() {
        match l {
            LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. } => match &net.weights[li] {
                LayerWeights::Conv { w, b } | LayerWeights::Dense { w, b } => {
                    group_sizes.push(w.len());
                    group_sizes.push(b.len());
                }
                _ => unreachable!(),
            },
            LayerSpec::NormSlot { channels } => {
                group_sizes.push(*channels);
                group_sizes.push(*channels);
            }
            _ => {}
        }
    }
    let mut opt = OptimizerState::new(cfg.optimizer, &group_sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e21_0001);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for _epoch in 0..cfg.epochs {
        // Fisher-Yates with the session rng
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let stacked = Tensor::stack(&refs)?;
            let batch = stacked.reshape(&[
                chunk.len(),
                input_dims[0],
                input_dims[1],
                input_dims[2],
            ])?;
            let (logits, inputs, caches) =
                forward_train(&mut net, &batch, true, cfg.bn_momentum)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::numeric("training loss diverged (NaN/Inf)"));
            }
            let grads = backward_train(&net, &inputs, &caches, dlogits, chunk.len());
            // collect aligned param/grad groups
            let mut grad_groups: Vec<&[f64]> = Vec::new();
            for (li, l) in net.layers.iter().enumerate() {
                match l {
                    LayerSpec::Conv3x3 { .. }
                    | LayerSpec::Dense { .. }
                    | LayerSpec::NormSlot { .. } => {
                        let (gw, gb) = grads[li].as_ref().expect("grad present");
                        grad_groups.push(gw);
                        grad_groups.push(gb);
                    }
                    _ => {}
                }
            }
            let layers_snapshot = net.layers.clone();
            let mut param_groups: Vec<&mut [f64]> = Vec::new();
            let mut slot_iter = net.norm_affine.iter_mut();
            let mut weight_iter = net.weights.iter_mut();
            for l in layers_snapshot.iter() {
                let wslot = weight_iter.next().expect("weights aligned");
                match l {
                    LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. } => match wslot {
                        LayerWeights::Conv { w, b } | LayerWeights::Dense { w, b } => {
                            param_groups.push(w.as_mut_slice());
                            param_groups.push(b.as_mut_slice());
                        }
                        _ => unreachable!(),
                    },
                    LayerSpec::NormSlot { .. } => {
                        let aff = slot_iter.next().expect("affine aligned");
                        param_groups.push(aff.alpha.as_mut_slice());
                        param_groups.push(aff.beta.as_mut_slice());
                    }
                    _ => {}
                }
            }
            opt.step(&mut param_groups, &grad_groups)?;
        }
    }
    net.trained = true;
    if !val.is_empty() {
        net.clean_val_error = Some(eval_error(&net, val)?);
    }
    Ok(net)
}

/// Eval-mode (pretrained statistics) error rate on a labeled set.
pub fn eval_error(net: &Network, data: &[(Tensor, usize)]) -> Result<f64> {
    let mut adapt = AdaptState::new(net, NormOp::EvalBn, true)?;
    let mut wrong = 0usize;
    for chunk in data.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().map(|(t, _)| t).collect();
        let stacked = Tensor::stack(&refs)?;
        let batch = stacked.reshape(&[
            chunk.len(),
            net.input_dims[0],
            net.input_dims[1],
            net.input_dims[2],
        ])?;
        let (logits, _) = forward_adapt(net, &mut adapt, &batch, None)?;
        for (r, (_, label)) in chunk.iter().enumerate() {
            if argmax_row(&logits, r) != *label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

pub fn argmax_row(logits: &Tensor, row: usize) -> usize {
    let k = logits.shape()[1];
    let vals = &logits.values()[row * k..(row + 1) * k];
    let mut best = 0;
    for j in 1..k {
        if vals[j] > vals[best] {
            best = j;
        }
    }
    best
}
