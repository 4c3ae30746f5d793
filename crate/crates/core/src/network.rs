//! Layer operations over `[M, N_s, H, W]` feature maps: the multiscale first
//! layer, the joint space-scale convolution in naive and decomposed form,
//! scale-axis padding, batch normalization, pooling, and the feature stacks
//! the measurement harness runs on.
//!
//! Scale-axis tap orientation: tap `l_a` of a joint filter reads the input at
//! scale index `a + l_a` of the padded feature, where `L_alpha - 1` slices are
//! prepended at the fine end of the scale axis. Reads therefore extend only
//! below the fine boundary, which is where the one-sided replicate padding
//! applies; the coarse end never needs material.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{
    make_scale_basis, make_spatial_basis, mu_of, spatial_modes, SamplingRule, ScaleBasis, ScaleGrid,
    SpatialBasis,
};
use crate::filterbank::{init_coefficients, synthesize_filters, CoefficientBlock};
use crate::tensor::{conv2d_valid, pad_spatial, FlopCounter, Tensor};
use crate::{Error, Result};

/// Padding mode for the truncated scale axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

impl PadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadMode::Zero),
            "replicate" => Ok(PadMode::Replicate),
            other => Err(Error::Config(format!("unknown scale padding mode '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PadMode::Zero => "zero",
            PadMode::Replicate => "replicate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// One convolutional block of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub m_out: usize,
    /// Spatial tap count (odd).
    pub l: usize,
    /// Scale tap count; only meaningful for layers after the first.
    pub l_alpha: usize,
    /// 2x2 average pooling after the activation.
    pub avg_pool: bool,
    pub batchnorm: bool,
}

/// Full network topology shared by the harness stacks and the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub m_in: usize,
    pub grid: ScaleGrid,
    pub k: usize,
    pub k_alpha: usize,
    /// Support exponent of the first layer's filters, in its own pixel units.
    pub j0: f64,
    pub padding: PadMode,
    pub activation: Activation,
    pub rule: SamplingRule,
    pub layers: Vec<ConvLayerSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.l % 2 == 0 {
                return Err(Error::Config(format!("layer {}: spatial taps L must be odd", i + 1)));
            }
            if layer.l_alpha == 0 {
                return Err(Error::Config(format!("layer {}: L_alpha must be >= 1", i + 1)));
            }
            if layer.m_out == 0 {
                return Err(Error::Config(format!("layer {}: output channels must be >= 1", i + 1)));
            }
        }
        Ok(())
    }

    /// Physical support exponent of layer `l` (1-based): the sampling exponent
    /// plus one per pooling stage crossed before the layer.
    pub fn j_physical(&self, l: usize) -> f64 {
        let pools = self.layers[..l - 1].iter().filter(|s| s.avg_pool).count();
        self.j0 + pools as f64
    }

    pub fn m_of_layer(&self, l: usize) -> usize {
        if l == 0 {
            self.m_in
        } else {
            self.layers[l - 1].m_out
        }
    }
}

/// A `[M, N_s, H, W]` activation tensor plus the validity of each scale
/// channel. Forward passes produce all-valid maps; group actions on the scale
/// axis mark the channels they shifted in from outside the interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub valid: Vec<bool>,
    pub layer: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, layer: usize) -> Self {
        let n_s = data.shape()[1];
        FeatureMap {
            data,
            valid: vec![true; n_s],
            layer,
        }
    }

    pub fn m(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_s(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Extend the scale axis at the fine end by `l_alpha - 1` slices so a joint
/// convolution can read below the boundary. `Zero` prepends zeros,
/// `Replicate` repeats the boundary slice. With one tap this is the identity.
pub fn pad_scale(x: &Tensor, l_alpha: usize, mode: PadMode) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::shape(x.shape().len(), "pad_scale expects [M, N_s, H, W]"));
    }
    let (m, n_s, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = l_alpha - 1;
    if p == 0 {
        return Ok(x.clone());
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[m, n_s + p, h, w]);
    for c in 0..m {
        for a in 0..n_s {
            let src = &x.data()[(c * n_s + a) * hw..][..hw];
            let dst = &mut out.data_mut()[(c * (n_s + p) + a + p) * hw..][..hw];
            dst.copy_from_slice(src);
        }
        if mode == PadMode::Replicate {
            let fine = x.data()[(c * n_s) * hw..][..hw].to_vec();
            for a in 0..p {
                out.data_mut()[(c * (n_s + p) + a) * hw..][..hw].copy_from_slice(&fine);
            }
        }
    }
    Ok(out)
}

/// First-layer multiscale convolution: for each scale channel, a same-padded
/// spatial correlation of the input with the synthesized rescaled filter,
/// plus bias and activation.
pub fn first_layer_forward(
    x0: &Tensor,
    block: &CoefficientBlock,
    spatial: &SpatialBasis,
    act: Activation,
    counter: &mut FlopCounter,
) -> Result<Tensor> {
    if x0.shape().len() != 3 {
        return Err(Error::shape(x0.shape().len(), "first layer expects [M0, H, W]"));
    }
    if block.layer != 1 {
        return Err(Error::Config("first_layer_forward needs a layer-1 block".into()));
    }
    let (m0, h, w) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    if m0 != block.m_in() {
        return Err(Error::shape(0, "input channels do not match block"));
    }
    let m1 = block.m_out();
    let n_s = spatial.scale_grid.len();
    let l = spatial.grid.len();
    let scale_unused = make_scale_basis(1, 1)?;
    let filters = synthesize_filters(block, spatial, &scale_unused)?; // [M0, M1, N_s, L, L]
    let padded = pad_spatial(x0, (l - 1) / 2)?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[m1, n_s, h, w]);
    let ll = l * l;
    for lo in 0..m1 {
        for a in 0..n_s {
            // Gather the [M0, L, L] kernel for this (output channel, scale).
            let mut kernel = Tensor::zeros(&[m0, l, l]);
            for li in 0..m0 {
                let src = &filters.data()[((li * m1 + lo) * n_s + a) * ll..][..ll];
                kernel.data_mut()[li * ll..(li + 1) * ll].copy_from_slice(src);
            }
            let conv = conv2d_valid(&padded, &kernel, counter)?;
            let b = block.b.data()[lo];
            let dst = &mut out.data_mut()[(lo * n_s + a) * hw..][..hw];
            for (d, s) in dst.iter_mut().zip(conv.data()) {
                *d = act.apply(s + b);
            }
        }
    }
    counter.add(2 * (h * w * n_s * m1) as u64); // bias + activation
    Ok(out)
}

/// Direct evaluation of the joint space-scale convolution: for every
/// (scale channel, scale tap) pair a same-padded spatial correlation with the
/// synthesized joint filter slice, summed over taps with the chosen scale
/// padding, then bias and activation.
pub fn joint_layer_forward_naive(
    x: &Tensor,
    block: &CoefficientBlock,
    spatial: &SpatialBasis,
    scale: &ScaleBasis,
    mode: PadMode,
    act: Activation,
    counter: &mut FlopCounter,
) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::shape(x.shape().len(), "joint layer expects [M, N_s, H, W]"));
    }
    let (m_in, n_s, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if m_in != block.m_in() {
        return Err(Error::shape(0, "input channels do not match block"));
    }
    let m_out = block.m_out();
    let l = spatial.grid.len();
    let l_alpha = scale.grid.len();
    let ll = l * l;
    let hw = h * w;
    let filters = synthesize_filters(block, spatial, scale)?; // [M', M, N_s, L_a, L, L]
    let xp = pad_scale(x, l_alpha, mode)?;
    let n_sp = n_s + l_alpha - 1;
    // Spatially pad every (channel, padded scale) slice once.
    let sp = (l - 1) / 2;
    let xp_sp = pad_spatial(&xp.clone().reshape(vec![m_in * n_sp, h, w])?, sp)?;
    let (hp, wp) = (h + 2 * sp, w + 2 * sp);

    let mut out = Tensor::zeros(&[m_out, n_s, h, w]);
    let mut pair_acc = vec![0.0; hw];
    for lo in 0..m_out {
        for a in 0..n_s {
            let mut total = vec![0.0; hw];
            for li in 0..m_in {
                for v in pair_acc.iter_mut() {
                    *v = 0.0;
                }
                for t in 0..l_alpha {
                    // Slice of the padded input at scale index a + t.
                    let slice = Tensor::new(
                        vec![1, hp, wp],
                        xp_sp.data()[((li * n_sp) + a + t) * hp * wp..][..hp * wp].to_vec(),
                    )?;
                    let kbase = (((li * m_out + lo) * n_s + a) * l_alpha + t) * ll;
                    let kernel = Tensor::new(vec![1, l, l], filters.data()[kbase..kbase + ll].to_vec())?;
                    let conv = conv2d_valid(&slice, &kernel, counter)?;
                    for (acc, c) in pair_acc.iter_mut().zip(conv.data()) {
                        *acc += c;
                    }
                }
                counter.add((l_alpha * hw) as u64); // scale-tap summation
                for (t, p) in total.iter_mut().zip(pair_acc.iter()) {
                    *t += p;
                }
            }
            let b = block.b.data()[lo];
            let dst = &mut out.data_mut()[(lo * n_s + a) * hw..][..hw];
            for (d, s) in dst.iter_mut().zip(total.iter()) {
                *d = act.apply(s + b);
            }
            counter.add(((m_in + 2) * hw) as u64); // channel sum + bias + activation
        }
    }
    Ok(out)
}

/// Intermediates of the decomposed forward pass kept for the backward pass.
#[derive(Debug, Clone)]
pub struct JointCache {
    /// `[M_in, K_alpha, N_s, H, W]`: scale-axis correlations with each phi.
    pub y: Tensor,
}

/// Decomposed joint convolution: scale-axis correlation with each scale basis
/// function, spatial correlation with each rescaled spatial basis function,
/// then contraction with the coefficients.
pub fn joint_layer_forward_decomposed(
    x: &Tensor,
    block: &CoefficientBlock,
    spatial: &SpatialBasis,
    scale: &ScaleBasis,
    mode: PadMode,
    act: Activation,
    counter: &mut FlopCounter,
) -> Result<(Tensor, JointCache)> {
    if x.shape().len() != 4 {
        return Err(Error::shape(x.shape().len(), "joint layer expects [M, N_s, H, W]"));
    }
    let (m_in, n_s, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if m_in != block.m_in() {
        return Err(Error::shape(0, "input channels do not match block"));
    }
    let m_out = block.m_out();
    let k = block.k();
    let k_alpha = block.k_alpha();
    if k_alpha != scale.k_alpha {
        return Err(Error::shape(3, "block K_alpha does not match scale basis"));
    }
    let l = spatial.grid.len();
    let l_alpha = scale.grid.len();
    let ll = l * l;
    let hw = h * w;
    let xp = pad_scale(x, l_alpha, mode)?;
    let n_sp = n_s + l_alpha - 1;

    // Step 1: y[li, m, a] = sum_t xp[li, a + t] * phi_m[t].
    let mut y = Tensor::zeros(&[m_in, k_alpha, n_s, h, w]);
    for li in 0..m_in {
        for m in 0..k_alpha {
            for a in 0..n_s {
                let dst = &mut y.data_mut()[((li * k_alpha + m) * n_s + a) * hw..][..hw];
                for t in 0..l_alpha {
                    let phi = scale.samples.data()[m * l_alpha + t];
                    let src = &xp.data()[(li * n_sp + a + t) * hw..][..hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += phi * s;
                    }
                }
            }
        }
    }
    counter.add((2 * l_alpha * n_s * hw * k_alpha * m_in) as u64);

    // Step 2 + 3 fused per (li, m, k): spatial correlation with psi_k at each
    // scale, then accumulation into every output channel weighted by the
    // coefficients. Per output element the terms arrive in a fixed
    // (li, m, k) order.
    let sp = (l - 1) / 2;
    let mut pre = Tensor::zeros(&[m_out, n_s, h, w]);
    for li in 0..m_in {
        for m in 0..k_alpha {
            // Pad the y[li, m] stack spatially once.
            let yp = pad_spatial(
                &Tensor::new(
                    vec![n_s, h, w],
                    y.data()[(li * k_alpha + m) * n_s * hw..][..n_s * hw].to_vec(),
                )?,
                sp,
            )?;
            let (hp, wp) = (h + 2 * sp, w + 2 * sp);
            // The (k, a) loops are swapped so each padded slice is extracted
            // once; per output element the accumulation order stays (li, m, k).
            for a in 0..n_s {
                let slice = Tensor::new(
                    vec![1, hp, wp],
                    yp.data()[a * hp * wp..][..hp * wp].to_vec(),
                )?;
                for kk in 0..k {
                    let kbase = (kk * n_s + a) * ll;
                    let kernel =
                        Tensor::new(vec![1, l, l], spatial.samples.data()[kbase..kbase + ll].to_vec())?;
                    let z = conv2d_valid(&slice, &kernel, counter)?;
                    for lo in 0..m_out {
                        let c = block.a.at4(li, lo, kk, m);
                        let dst = &mut pre.data_mut()[(lo * n_s + a) * hw..][..hw];
                        for (d, s) in dst.iter_mut().zip(z.data()) {
                            *d += c * s;
                        }
                    }
                }
            }
        }
    }
    counter.add((2 * hw * n_s * m_out * k * k_alpha * m_in) as u64); // step-3 contraction

    let mut out = pre;
    for lo in 0..m_out {
        let b = block.b.data()[lo];
        let dst = &mut out.data_mut()[lo * n_s * hw..][..n_s * hw];
        for d in dst.iter_mut() {
            *d = act.apply(*d + b);
        }
    }
    counter.add((2 * hw * n_s * m_out) as u64); // bias + activation

    Ok((out, JointCache { y }))
}

/// Closed form for the naive joint layer's flop count.
pub fn naive_joint_flops(h: usize, w: usize, n_s: usize, m_in: usize, m_out: usize, l: usize, l_alpha: usize) -> u64 {
    (h * w * n_s * m_out) as u64 * (2 * l * l * l_alpha * m_in + l_alpha * m_in + m_in + 2) as u64
}

/// Closed form for the decomposed joint layer's flop count.
#[allow(clippy::too_many_arguments)]
pub fn decomposed_joint_flops(
    h: usize,
    w: usize,
    n_s: usize,
    m_in: usize,
    m_out: usize,
    l: usize,
    l_alpha: usize,
    k: usize,
    k_alpha: usize,
) -> u64 {
    2 * (h * w * n_s) as u64
        * (k * k_alpha * m_in * m_out + m_out + l * l * m_in * k_alpha * k + l_alpha * k_alpha * m_in) as u64
}

/// 2x2 average pooling over the spatial axes of a `[M, N_s, H, W]` feature.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::shape(x.shape().len(), "avg_pool2 expects [M, N_s, H, W]"));
    }
    let (m, n_s, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[m, n_s, ho, wo]);
    for c in 0..m * n_s {
        for i in 0..ho {
            for j in 0..wo {
                let base = c * h * w;
                let s = x.data()[base + (2 * i) * w + 2 * j]
                    + x.data()[base + (2 * i) * w + 2 * j + 1]
                    + x.data()[base + (2 * i + 1) * w + 2 * j]
                    + x.data()[base + (2 * i + 1) * w + 2 * j + 1];
                out.data_mut()[c * ho * wo + i * wo + j] = s / 4.0;
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling for a `[M, H, W]` map.
pub fn avg_pool2_3d(x: &Tensor) -> Result<Tensor> {
    let (m, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pooled = avg_pool2(&x.clone().reshape(vec![m, 1, h, w])?)?;
    let (ho, wo) = (pooled.shape()[2], pooled.shape()[3]);
    pooled.reshape(vec![m, ho, wo])
}

/// Elementwise max over the scale axis, with the argmax channels for backward.
pub fn scale_maxpool(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.shape().len() != 4 {
        return Err(Error::shape(x.shape().len(), "scale_maxpool expects [M, N_s, H, W]"));
    }
    let (m, n_s, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[m, h, w]);
    let mut arg = vec![0usize; m * hw];
    for c in 0..m {
        for p in 0..hw {
            let mut best = x.data()[(c * n_s) * hw + p];
            let mut best_a = 0;
            for a in 1..n_s {
                let v = x.data()[(c * n_s + a) * hw + p];
                if v > best {
                    best = v;
                    best_a = a;
                }
            }
            out.data_mut()[c * hw + p] = best;
            arg[c * hw + p] = best_a;
        }
    }
    Ok((out, arg))
}

/// Which reduction set batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnAxes {
    /// Statistics per unstructured channel over (batch, scale, space) --
    /// the scale axis is normalized together with space.
    ChannelOnly,
    /// Statistics per (channel, scale channel) over (batch, space). Breaks
    /// scale-shift equivariance; kept for the harness A/B measurement.
    PerScale,
}

/// Running state of one batch-normalization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Batch normalization over a batch of `[M, ...]` tensors, statistics per
/// channel over everything else. In training mode batch statistics are used
/// and the running estimates updated; in inference mode the running
/// estimates normalize.
pub fn batchnorm_forward(batch: &mut [Tensor], state: &mut BatchNormState, training: bool) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("batchnorm needs a non-empty batch".into()));
    }
    let m = batch[0].shape()[0];
    if m != state.gamma.len() {
        return Err(Error::shape(0, "batchnorm channel count mismatch"));
    }
    let per = batch[0].len() / m;
    let n = (batch.len() * per) as f64;
    for c in 0..m {
        let (mean, var) = if training {
            let mut sum = 0.0;
            for t in batch.iter() {
                for v in &t.data()[c * per..(c + 1) * per] {
                    sum += v;
                }
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for t in batch.iter() {
                for v in &t.data()[c * per..(c + 1) * per] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let var = sq / n;
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var;
            (mean, var)
        } else {
            (state.running_mean[c], state.running_var[c])
        };
        let inv = 1.0 / (var + state.eps).sqrt();
        let (g, s) = (state.gamma[c], state.shift[c]);
        for t in batch.iter_mut() {
            for v in &mut t.data_mut()[c * per..(c + 1) * per] {
                *v = g * (*v - mean) * inv + s;
            }
        }
    }
    Ok(())
}

/// Per-(channel, scale) normalization used only for the axis A/B experiment.
pub fn batchnorm_forward_per_scale(batch: &mut [Tensor], eps: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("batchnorm needs a non-empty batch".into()));
    }
    let shape = batch[0].shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(shape.len(), "per-scale batchnorm expects [M, N_s, H, W]"));
    }
    let (m, n_s, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = (batch.len() * hw) as f64;
    for c in 0..m {
        for a in 0..n_s {
            let mut sum = 0.0;
            for t in batch.iter() {
                for v in &t.data()[(c * n_s + a) * hw..][..hw] {
                    sum += v;
                }
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for t in batch.iter() {
                for v in &t.data()[(c * n_s + a) * hw..][..hw] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let inv = 1.0 / (sq / n + eps).sqrt();
            for t in batch.iter_mut() {
                for v in &mut t.data_mut()[(c * n_s + a) * hw..][..hw] {
                    *v = (*v - mean) * inv;
                }
            }
        }
    }
    Ok(())
}

/// Which joint-convolution evaluation a stack runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    Naive,
    Decomposed,
}

/// A feature-extraction stack (no classifier head) used by the harness:
/// first layer, then joint layers, each optionally batch-normalized,
/// activated, and pooled.
#[derive(Debug, Clone)]
pub struct ScdcfStack {
    pub spec: NetworkSpec,
    pub blocks: Vec<CoefficientBlock>,
    pub spatial: Vec<SpatialBasis>,
    pub scale: Vec<ScaleBasis>,
    pub path: ConvPath,
    pub bn_axes: BnAxes,
}

impl ScdcfStack {
    /// Build a stack with Gaussian coefficients normalized to `target_a` per
    /// layer. Bias stays zero so random stacks are positively homogeneous.
    pub fn random(spec: NetworkSpec, seed: u64, target_a: f64) -> Result<Self> {
        spec.validate()?;
        let mus: Vec<f64> = spatial_modes(spec.k).iter().map(|&(p, q)| mu_of(p, q)).collect();
        let mut blocks = Vec::new();
        let mut spatial = Vec::new();
        let mut scale = Vec::new();
        let mut m_prev = spec.m_in;
        for (i, layer) in spec.layers.iter().enumerate() {
            let l_idx = i + 1;
            let mut block = init_coefficients(
                seed.wrapping_add(i as u64).wrapping_mul(0x9e3779b97f4a7c15),
                l_idx.min(2),
                m_prev,
                layer.m_out,
                spec.k,
                spec.k_alpha,
                spec.j_physical(l_idx),
                target_a,
                &mus,
            )?;
            block.layer = l_idx;
            blocks.push(block);
            spatial.push(make_spatial_basis(spec.k, layer.l, &spec.grid, spec.j0, spec.rule)?);
            scale.push(make_scale_basis(spec.k_alpha, layer.l_alpha)?);
            m_prev = layer.m_out;
        }
        Ok(ScdcfStack {
            spec,
            blocks,
            spatial,
            scale,
            path: ConvPath::Decomposed,
            bn_axes: BnAxes::ChannelOnly,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Run the stack on one `[M0, H, W]` image, returning the feature map
    /// after every layer (post-activation, post-pooling).
    pub fn forward_features(&self, x0: &Tensor, counter: &mut FlopCounter) -> Result<Vec<FeatureMap>> {
        let mut outputs = Vec::with_capacity(self.depth());
        let mut current: Option<Tensor> = None;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let mut feat = if i == 0 {
                first_layer_forward(x0, &self.blocks[0], &self.spatial[0], Activation::Identity, counter)?
            } else {
                let x = current.as_ref().unwrap();
                match self.path {
                    ConvPath::Naive => joint_layer_forward_naive(
                        x,
                        &self.blocks[i],
                        &self.spatial[i],
                        &self.scale[i],
                        self.spec.padding,
                        Activation::Identity,
                        counter,
                    )?,
                    ConvPath::Decomposed => {
                        joint_layer_forward_decomposed(
                            x,
                            &self.blocks[i],
                            &self.spatial[i],
                            &self.scale[i],
                            self.spec.padding,
                            Activation::Identity,
                            counter,
                        )?
                        .0
                    }
                }
            };
            if layer.batchnorm {
                match self.bn_axes {
                    BnAxes::ChannelOnly => {
                        let mut state = BatchNormState::new(layer.m_out);
                        let mut batch = [feat];
                        batchnorm_forward(&mut batch, &mut state, true)?;
                        let [f] = batch;
                        feat = f;
                    }
                    BnAxes::PerScale => {
                        let mut batch = [feat];
                        batchnorm_forward_per_scale(&mut batch, 1e-5)?;
                        let [f] = batch;
                        feat = f;
                    }
                }
            }
            for v in feat.data_mut() {
                *v = self.spec.activation.apply(*v);
            }
            if layer.avg_pool {
                feat = avg_pool2(&feat)?;
            }
            outputs.push(FeatureMap::new(feat.clone(), i + 1));
            current = Some(feat);
        }
        Ok(outputs)
    }
}

/// A plain CNN stack with the same block structure but no scale axis:
/// random same-padded spatial convolutions, activation, optional pooling.
#[derive(Debug, Clone)]
pub struct CnnStack {
    pub kernels: Vec<Tensor>, // [M_in, M_out, L, L]
    pub avg_pool: Vec<bool>,
    pub activation: Activation,
}

impl CnnStack {
    pub fn random(m_in: usize, layers: &[(usize, usize, bool)], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kernels = Vec::new();
        let mut pools = Vec::new();
        let mut m_prev = m_in;
        for &(m_out, l, pool) in layers {
            if l % 2 == 0 {
                return Err(Error::Config("CNN kernels must be odd-sized".into()));
            }
            let n = m_prev * m_out * l * l;
            let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut k = Tensor::new(vec![m_prev, m_out, l, l], data)?;
            // Keep responses O(1): normalize by fan-in.
            let norm = (k.data().iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            k.scale(1.0 / (norm * (m_prev * l * l) as f64).max(1e-12));
            kernels.push(k);
            pools.push(pool);
            m_prev = m_out;
        }
        Ok(CnnStack {
            kernels,
            avg_pool: pools,
            activation,
        })
    }

    /// Per-layer `[M, H, W]` features.
    pub fn forward_features(&self, x0: &Tensor, counter: &mut FlopCounter) -> Result<Vec<Tensor>> {
        let mut outputs = Vec::new();
        let mut x = x0.clone();
        for (idx, kern) in self.kernels.iter().enumerate() {
            let (m_in, m_out, l) = (kern.shape()[0], kern.shape()[1], kern.shape()[2]);
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let padded = pad_spatial(&x, (l - 1) / 2)?;
            let mut out = Tensor::zeros(&[m_out, h, w]);
            let ll = l * l;
            for lo in 0..m_out {
                let mut kernel = Tensor::zeros(&[m_in, l, l]);
                for li in 0..m_in {
                    let src = &kern.data()[(li * m_out + lo) * ll..][..ll];
                    kernel.data_mut()[li * ll..(li + 1) * ll].copy_from_slice(src);
                }
                let conv = conv2d_valid(&padded, &kernel, counter)?;
                let dst = &mut out.data_mut()[lo * h * w..][..h * w];
                for (d, s) in dst.iter_mut().zip(conv.data()) {
                    *d = self.activation.apply(*s);
                }
            }
            if self.avg_pool[idx] {
                out = avg_pool2_3d(&out)?;
            }
            outputs.push(out.clone());
            x = out;
        }
        Ok(outputs)
    }
}
