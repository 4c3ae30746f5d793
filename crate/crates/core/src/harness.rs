//! Quantitative experiments: relative equivariance error, depth and padding
//! sweeps, scale-interval truncation decay, and deformation-stability bound
//! checks. Each run condenses into an `ExperimentRecord` row destined for
//! CSV.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::actions::{apply_d, apply_deformation, apply_t, DeformationField, GroupElement};
use crate::basis::{mu_of, spatial_modes, SamplingRule, ScaleGrid};
use crate::filterbank::compute_a_l;
use crate::network::{Activation, CnnStack, ConvLayerSpec, FeatureMap, NetworkSpec, PadMode, ScdcfStack};
use crate::tensor::{FlopCounter, Tensor};
use crate::{Error, Result};

/// One row of a sweep: configuration echo, the measured error, and the
/// theoretical bound when one applies.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub id: String,
    pub seed: u64,
    pub depth: usize,
    pub l_alpha: usize,
    pub n_s: usize,
    pub t: f64,
    pub padding: String,
    pub k: usize,
    pub k_alpha: usize,
    pub beta: f64,
    pub v: [f64; 2],
    pub grad_inf: f64,
    pub tau_inf: f64,
    pub measured_error: f64,
    pub theoretical_bound: Option<f64>,
}

/// Norm of a feature map: sup over valid scale channels of the per-channel
/// mean spatial L2, with pixel area `1/(H W)` approximating the unit-domain
/// integral.
pub fn feature_norm(x: &FeatureMap) -> Result<f64> {
    if !x.valid.iter().any(|&v| v) {
        return Err(Error::Undefined("feature has no valid scale channel".into()));
    }
    let (m, n_s, h, w) = (x.m(), x.n_s(), x.h(), x.w());
    let hw = h * w;
    let area = 1.0 / hw as f64;
    let mut sup = 0.0_f64;
    for a in 0..n_s {
        if !x.valid[a] {
            continue;
        }
        let mut s = 0.0;
        for c in 0..m {
            for v in &x.data.data()[(c * n_s + a) * hw..][..hw] {
                s += v * v;
            }
        }
        sup = sup.max(s * area / m as f64);
    }
    Ok(sup.sqrt())
}

/// Norm of a plain `[M, H, W]` map under the same convention.
pub fn image_norm(x: &Tensor) -> f64 {
    let (m, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let area = 1.0 / (h * w) as f64;
    let s: f64 = x.data().iter().map(|v| v * v).sum();
    (s * area / m as f64).sqrt()
}

/// Relative equivariance error of one layer: per valid scale channel and
/// aggregated over the common valid domain.
#[derive(Debug, Clone)]
pub struct EqError {
    pub aggregate: f64,
    /// `(scale channel index, relative error)` for every common valid channel.
    pub per_scale: Vec<(usize, f64)>,
}

/// Run both branches of the equivariance identity at layer `layer` (1-based)
/// and return the relative discrepancy on the common valid scale domain.
pub fn equivariance_error(stack: &ScdcfStack, x0: &Tensor, g: GroupElement, layer: usize) -> Result<EqError> {
    let mut fc = FlopCounter::new();
    let transformed = apply_d(x0, g)?;
    let feats_a = stack.forward_features(&transformed, &mut fc)?;
    let feats_b = stack.forward_features(x0, &mut fc)?;
    let fa = &feats_a[layer - 1];
    let fb_raw = &feats_b[layer - 1];
    // Pooling shrinks the pixel grid; the translation component acts in the
    // layer's own pixel units.
    let pools = stack.spec.layers[..layer].iter().filter(|l| l.avg_pool).count();
    let g_layer = GroupElement {
        beta: g.beta,
        v: [g.v[0] / 2f64.powi(pools as i32), g.v[1] / 2f64.powi(pools as i32)],
    };
    let fb = apply_t(fb_raw, g_layer, stack.spec.grid.delta())?;
    eq_error_between(fa, &fb)
}

fn eq_error_between(fa: &FeatureMap, fb: &FeatureMap) -> Result<EqError> {
    let (m, n_s, h, w) = (fa.m(), fa.n_s(), fa.h(), fa.w());
    let hw = h * w;
    let mut per_scale = Vec::new();
    let mut num_total = 0.0;
    let mut den_total = 0.0;
    let mut common = 0usize;
    for a in 0..n_s {
        if !(fa.valid[a] && fb.valid[a]) {
            continue;
        }
        common += 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..m {
            let sa = &fa.data.data()[(c * n_s + a) * hw..][..hw];
            let sb = &fb.data.data()[(c * n_s + a) * hw..][..hw];
            for (x, y) in sa.iter().zip(sb) {
                num += (x - y) * (x - y);
                den += y * y;
            }
        }
        // A channel whose reference is identically zero has no per-channel
        // relative error; it still contributes to the aggregate.
        if den > 0.0 {
            per_scale.push((a, (num / den).sqrt()));
        }
        num_total += num;
        den_total += den;
    }
    if common == 0 {
        return Err(Error::Undefined("no common valid scale channel".into()));
    }
    if den_total == 0.0 {
        return Err(Error::Undefined("zero reference norm on the common domain".into()));
    }
    Ok(EqError {
        aggregate: (num_total / den_total).sqrt(),
        per_scale,
    })
}

/// The plain-CNN analogue: with no scale axis, the feature action reads as
/// the input action.
pub fn equivariance_error_cnn(stack: &CnnStack, x0: &Tensor, g: GroupElement, layer: usize) -> Result<f64> {
    let mut fc = FlopCounter::new();
    let transformed = apply_d(x0, g)?;
    let fa = &stack.forward_features(&transformed, &mut fc)?[layer - 1];
    let fb_raw = &stack.forward_features(x0, &mut fc)?[layer - 1];
    let pools = stack.avg_pool[..layer].iter().filter(|&&p| p).count();
    let g_layer = GroupElement {
        beta: g.beta,
        v: [g.v[0] / 2f64.powi(pools as i32), g.v[1] / 2f64.powi(pools as i32)],
    };
    let fb = apply_d(fb_raw, g_layer)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in fa.data().iter().zip(fb.data()) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        return Err(Error::Undefined("zero reference norm".into()));
    }
    Ok((num / den).sqrt())
}

/// Smooth band-limited test input: a sum of Gaussians with seeded centers,
/// widths, and amplitudes, kept away from the image border.
pub fn make_blob_image(seed: u64, h: usize, blobs: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Tensor::zeros(&[1, h, h]);
    let hf = h as f64;
    for _ in 0..blobs {
        let cr = rng.gen_range(0.32 * hf..0.68 * hf);
        let cc = rng.gen_range(0.32 * hf..0.68 * hf);
        let sigma = rng.gen_range(0.07 * hf..0.125 * hf);
        let amp = rng.gen_range(0.5..1.0);
        for r in 0..h {
            for c in 0..h {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                let v = img.at3(0, r, c) + amp * (-d2 / (2.0 * sigma * sigma)).exp();
                img.set3(0, r, c, v);
            }
        }
    }
    img
}

/// Configuration template for sweeps: the two-layer verification network
/// extended by repetition.
#[derive(Debug, Clone)]
pub struct SweepTemplate {
    pub m: usize,
    pub k: usize,
    pub k_alpha: usize,
    pub l: usize,
    pub l_alpha: usize,
    pub t: f64,
    pub n_s: usize,
    pub j0: f64,
    pub input_hw: usize,
    pub target_a: f64,
    pub blobs: usize,
}

impl SweepTemplate {
    pub fn verification_default() -> Self {
        SweepTemplate {
            m: 4,
            k: 8,
            k_alpha: 3,
            l: 7,
            l_alpha: 3,
            t: 2.0,
            n_s: 9,
            j0: 1.0,
            input_hw: 32,
            target_a: 1.0,
            blobs: 3,
        }
    }

    /// Network of `depth` conv layers (first + joint repeats), no pooling, no
    /// batch norm, zero biases.
    pub fn spec(&self, depth: usize, padding: PadMode) -> Result<NetworkSpec> {
        let layers = (0..depth)
            .map(|_| ConvLayerSpec {
                m_out: self.m,
                l: self.l,
                l_alpha: self.l_alpha,
                avg_pool: false,
                batchnorm: false,
            })
            .collect();
        Ok(NetworkSpec {
            m_in: 1,
            grid: ScaleGrid::new(self.t, self.n_s)?,
            k: self.k,
            k_alpha: self.k_alpha,
            j0: self.j0,
            padding,
            activation: Activation::Relu,
            rule: SamplingRule::CellAverage,
            layers,
        })
    }
}

/// For each (depth, padding mode, seed), build a random-coefficient network
/// on the template and record the equivariance error at the deepest layer
/// for a one-grid-step scaling.
pub fn depth_sweep(
    template: &SweepTemplate,
    depths: &[usize],
    modes: &[PadMode],
    seeds: &[u64],
) -> Result<Vec<ExperimentRecord>> {
    let mut jobs = Vec::new();
    for &d in depths {
        for &mode in modes {
            for &seed in seeds {
                jobs.push((d, mode, seed));
            }
        }
    }
    let records: Vec<ExperimentRecord> = jobs
        .par_iter()
        .map(|&(depth, mode, seed)| -> Result<ExperimentRecord> {
            let spec = template.spec(depth, mode)?;
            let delta = spec.grid.delta();
            let stack = ScdcfStack::random(spec, seed, template.target_a)?;
            let x0 = make_blob_image(seed.wrapping_add(500), template.input_hw, template.blobs);
            let g = GroupElement::scaling(delta);
            let err = equivariance_error(&stack, &x0, g, depth)?;
            Ok(ExperimentRecord {
                experiment: "depth_sweep".into(),
                id: format!("d{}_{}_s{}", depth, mode.name(), seed),
                seed,
                depth,
                l_alpha: template.l_alpha,
                n_s: template.n_s,
                t: template.t,
                padding: mode.name().into(),
                k: template.k,
                k_alpha: template.k_alpha,
                beta: g.beta,
                v: g.v,
                grad_inf: 0.0,
                tau_inf: 0.0,
                measured_error: err.aggregate,
                theoretical_bound: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records)
}

/// Least-squares slope of `log2(err)` against `t`.
pub fn fit_log2_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    // Exact-zero gaps (delta-regime filters) are floored so the fit stays finite.
    let ys: Vec<f64> = points.iter().map(|p| p.1.max(1e-12).log2()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Truncation error of a stack against a reference stack with a much larger
/// interval but identical coefficients: sup over the truncated stack's
/// channels of the per-channel relative feature gap at the deepest layer.
fn truncation_gap(
    template: &SweepTemplate,
    t: f64,
    t_ref: f64,
    depth: usize,
    mode: PadMode,
    seed: u64,
) -> Result<f64> {
    let delta = 2.0 * template.t / (template.n_s - 1) as f64;
    let n_s = (2.0 * t / delta).round() as usize + 1;
    let n_s_ref = (2.0 * t_ref / delta).round() as usize + 1;
    let mut tpl_t = template.clone();
    tpl_t.t = t;
    tpl_t.n_s = n_s;
    let mut tpl_ref = template.clone();
    tpl_ref.t = t_ref;
    tpl_ref.n_s = n_s_ref;
    // Identical coefficient tensors: shapes do not involve N_s and the seeds
    // match, so both stacks share exactly the same trainable state.
    let stack_t = ScdcfStack::random(tpl_t.spec(depth, mode)?, seed, template.target_a)?;
    let stack_ref = ScdcfStack::random(tpl_ref.spec(depth, mode)?, seed, template.target_a)?;
    let x0 = make_blob_image(seed.wrapping_add(900), template.input_hw, template.blobs);
    let mut fc = FlopCounter::new();
    let feat_t = &stack_t.forward_features(&x0, &mut fc)?[depth - 1];
    let feat_ref = &stack_ref.forward_features(&x0, &mut fc)?[depth - 1];
    // Channel alpha of the truncated net sits at offset (t_ref - t)/delta in
    // the reference grid.
    let off = ((t_ref - t) / delta).round() as usize;
    let (m, h, w) = (feat_t.m(), feat_t.h(), feat_t.w());
    let hw = h * w;
    let mut sup = 0.0_f64;
    for a in 0..n_s {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..m {
            let st = &feat_t.data.data()[(c * n_s + a) * hw..][..hw];
            let sr = &feat_ref.data.data()[(c * n_s_ref + a + off) * hw..][..hw];
            for (x, y) in st.iter().zip(sr) {
                num += (x - y) * (x - y);
                den += y * y;
            }
        }
        if den > 0.0 {
            sup = sup.max((num / den).sqrt());
        }
    }
    Ok(sup)
}

/// Sweep the scale half-width at fixed spacing and record the truncation
/// error per (T, padding mode, seed). The spacing is inherited from the
/// template; `beta` is echoed into the records for context.
pub fn truncation_sweep(
    template: &SweepTemplate,
    t_values: &[f64],
    depth: usize,
    modes: &[PadMode],
    seeds: &[u64],
    beta: f64,
) -> Result<Vec<ExperimentRecord>> {
    if t_values.is_empty() {
        return Err(Error::Config("truncation sweep needs T values".into()));
    }
    for w in t_values.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "T values must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let delta = 2.0 * template.t / (template.n_s - 1) as f64;
    for &t in t_values {
        let ratio = 2.0 * t / delta;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "T = {} is not representable on the spacing {}",
                t, delta
            )));
        }
    }
    let t_ref = t_values.last().unwrap() + 1.0;
    let mut jobs = Vec::new();
    for &t in t_values {
        for &mode in modes {
            for &seed in seeds {
                jobs.push((t, mode, seed));
            }
        }
    }
    let records: Vec<ExperimentRecord> = jobs
        .par_iter()
        .map(|&(t, mode, seed)| -> Result<ExperimentRecord> {
            let err = truncation_gap(template, t, t_ref, depth, mode, seed)?;
            let n_s = (2.0 * t / delta).round() as usize + 1;
            Ok(ExperimentRecord {
                experiment: "truncation_sweep".into(),
                id: format!("T{}_{}_s{}", t, mode.name(), seed),
                seed,
                depth,
                l_alpha: template.l_alpha,
                n_s,
                t,
                padding: mode.name().into(),
                k: template.k,
                k_alpha: template.k_alpha,
                beta,
                v: [0.0, 0.0],
                grad_inf: 0.0,
                tau_inf: 0.0,
                measured_error: err,
                theoretical_bound: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records)
}

/// Seed-averaged slope of `log2(truncation error)` vs `T` for one padding
/// mode.
pub fn truncation_slope(records: &[ExperimentRecord], mode: PadMode) -> f64 {
    let mut by_t: Vec<(f64, f64, usize)> = Vec::new();
    for r in records.iter().filter(|r| r.padding == mode.name()) {
        if let Some(e) = by_t.iter_mut().find(|(t, ..)| *t == r.t) {
            e.1 += r.measured_error;
            e.2 += 1;
        } else {
            by_t.push((r.t, r.measured_error, 1));
        }
    }
    let pts: Vec<(f64, f64)> = by_t.iter().map(|&(t, s, n)| (t, s / n as f64)).collect();
    fit_log2_slope(&pts)
}

/// Measure one deformation-stability instance against the theoretical bound
/// `2^{beta+1} (4 L |grad tau| + 2^{-j_L} |tau|) ||x0||` and record both.
pub fn stability_check(
    stack: &ScdcfStack,
    x0: &Tensor,
    g: GroupElement,
    field: &DeformationField,
    seed: u64,
) -> Result<ExperimentRecord> {
    let mus: Vec<f64> = spatial_modes(stack.spec.k).iter().map(|&(p, q)| mu_of(p, q)).collect();
    for block in &stack.blocks {
        let a_l = compute_a_l(block, &mus);
        if a_l > 1.0 + 1e-9 {
            return Err(Error::State(format!(
                "layer {} has regularity norm {} > 1; project the coefficients first",
                block.layer, a_l
            )));
        }
    }
    if field.grad_inf >= 0.2 {
        return Err(Error::Config(format!(
            "deformation gradient {} violates the < 1/5 budget",
            field.grad_inf
        )));
    }
    let mut fc = FlopCounter::new();
    let deformed = apply_deformation(x0, field)?;
    let branch_a_input = apply_d(&deformed, g)?;
    let depth = stack.depth();
    let fa = &stack.forward_features(&branch_a_input, &mut fc)?[depth - 1];
    let fb_raw = &stack.forward_features(x0, &mut fc)?[depth - 1];
    let pools = stack.spec.layers.iter().filter(|l| l.avg_pool).count();
    let g_layer = GroupElement {
        beta: g.beta,
        v: [g.v[0] / 2f64.powi(pools as i32), g.v[1] / 2f64.powi(pools as i32)],
    };
    let fb = apply_t(fb_raw, g_layer, stack.spec.grid.delta())?;

    // Sup over the common valid channels of the per-channel-mean L2 of the
    // difference.
    let (m, n_s, h, w) = (fa.m(), fa.n_s(), fa.h(), fa.w());
    let hw = h * w;
    let area = 1.0 / hw as f64;
    let mut measured = 0.0_f64;
    let mut any = false;
    for a in 0..n_s {
        if !(fa.valid[a] && fb.valid[a]) {
            continue;
        }
        any = true;
        let mut s = 0.0;
        for c in 0..m {
            let xa = &fa.data.data()[(c * n_s + a) * hw..][..hw];
            let xb = &fb.data.data()[(c * n_s + a) * hw..][..hw];
            for (x, y) in xa.iter().zip(xb) {
                s += (x - y) * (x - y);
            }
        }
        measured = measured.max((s * area / m as f64).sqrt());
    }
    if !any {
        return Err(Error::Undefined("no common valid scale channel".into()));
    }
    let j_last = stack.blocks.last().unwrap().j;
    let input_norm = image_norm(x0);
    let bound = 2f64.powf(g.beta + 1.0)
        * (4.0 * depth as f64 * field.grad_inf + 2f64.powf(-j_last) * field.tau_inf)
        * input_norm;
    Ok(ExperimentRecord {
        experiment: "stability".into(),
        id: format!("stab_s{}", seed),
        seed,
        depth,
        l_alpha: stack.spec.layers.last().unwrap().l_alpha,
        n_s: stack.spec.grid.n_s(),
        t: stack.spec.grid.t(),
        padding: stack.spec.padding.name().into(),
        k: stack.spec.k,
        k_alpha: stack.spec.k_alpha,
        beta: g.beta,
        v: g.v,
        grad_inf: field.grad_inf,
        tau_inf: field.tau_inf,
        measured_error: measured,
        theoretical_bound: Some(bound),
    })
}

/// Format a float with nine significant digits, stable across runs.
pub fn format_float(v: f64) -> String {
    format!("{:.8e}", v)
}

pub const CSV_HEADER: &str =
    "experiment,id,seed,depth,L_alpha,N_s,T,padding,K,K_alpha,beta,v_x,v_y,grad_inf,tau_inf,measured_error,theoretical_bound";

/// Write records as CSV with the fixed column order.
pub fn emit_csv(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.id,
            r.seed,
            r.depth,
            r.l_alpha,
            r.n_s,
            format_float(r.t),
            r.padding,
            r.k,
            r.k_alpha,
            format_float(r.beta),
            format_float(r.v[0]),
            format_float(r.v[1]),
            format_float(r.grad_inf),
            format_float(r.tau_inf),
            format_float(r.measured_error),
            r.theoretical_bound.map(format_float).unwrap_or_default(),
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}
