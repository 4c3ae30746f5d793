//! Trainable expansion coefficients, on-demand filter synthesis, and the
//! weighted coefficient norms that gate non-expansiveness and the stability
//! bound.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{psi_eval, psi_grad, Mode, ScaleBasis, SpatialBasis};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Truncated expansion coefficients of one convolutional layer.
///
/// `a` has shape `[M_in, M_out, K]` for the first layer and
/// `[M_in, M_out, K, K_alpha]` for joint layers; `b` is the `[M_out]` bias.
/// `j` is the spatial support exponent of the layer's filters.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBlock {
    pub layer: usize,
    pub a: Tensor,
    pub b: Tensor,
    pub j: f64,
}

impl CoefficientBlock {
    pub fn new(layer: usize, a: Tensor, b: Tensor, j: f64) -> Result<Self> {
        let dims = a.shape().len();
        if layer == 0 {
            return Err(Error::Config("layer index is 1-based".into()));
        }
        if layer == 1 && dims != 3 {
            return Err(Error::shape(dims, "first-layer coefficients must be [M_in, M_out, K]"));
        }
        if layer > 1 && dims != 4 {
            return Err(Error::shape(
                dims,
                "joint-layer coefficients must be [M_in, M_out, K, K_alpha]",
            ));
        }
        if a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(1, "bias length must match output channels"));
        }
        if !a.all_finite() || !b.all_finite() {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        Ok(CoefficientBlock { layer, a, b, j })
    }

    pub fn m_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn m_out(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.a.shape()[2]
    }

    pub fn k_alpha(&self) -> usize {
        if self.layer == 1 {
            1
        } else {
            self.a.shape()[3]
        }
    }

    fn coeff(&self, li: usize, lo: usize, k: usize, m: usize) -> f64 {
        if self.layer == 1 {
            self.a.at3(li, lo, k)
        } else {
            self.a.at4(li, lo, k, m)
        }
    }
}

/// Synthesize the discrete filters of a block.
///
/// First layer: `[M_in, M_out, N_s, L, L]` with
/// `F = sum_k a(k) * psi_sample[k]`. Joint layers:
/// `[M_in, M_out, N_s, L_alpha, L, L]` with
/// `F = sum_{k,m} a(k,m) * psi_sample[k] (x) phi_sample[m]`.
pub fn synthesize_filters(
    block: &CoefficientBlock,
    spatial: &SpatialBasis,
    scale: &ScaleBasis,
) -> Result<Tensor> {
    if block.k() != spatial.k {
        return Err(Error::shape(2, "coefficient K does not match spatial basis"));
    }
    let (m_in, m_out) = (block.m_in(), block.m_out());
    let n_s = spatial.scale_grid.len();
    let l = spatial.grid.len();
    let ll = l * l;
    if block.layer == 1 {
        let mut out = Tensor::zeros(&[m_in, m_out, n_s, l, l]);
        for li in 0..m_in {
            for lo in 0..m_out {
                for k in 0..block.k() {
                    let c = block.a.at3(li, lo, k);
                    if c == 0.0 {
                        continue;
                    }
                    for a in 0..n_s {
                        let src = &spatial.samples.data()[(k * n_s + a) * ll..][..ll];
                        let dst = &mut out.data_mut()[((li * m_out + lo) * n_s + a) * ll..][..ll];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += c * s;
                        }
                    }
                }
            }
        }
        Ok(out)
    } else {
        if block.k_alpha() != scale.k_alpha {
            return Err(Error::shape(3, "coefficient K_alpha does not match scale basis"));
        }
        let l_alpha = scale.grid.len();
        let mut out = Tensor::zeros(&[m_in, m_out, n_s, l_alpha, l, l]);
        for li in 0..m_in {
            for lo in 0..m_out {
                for k in 0..block.k() {
                    for m in 0..block.k_alpha() {
                        let c = block.a.at4(li, lo, k, m);
                        if c == 0.0 {
                            continue;
                        }
                        for a in 0..n_s {
                            let src = &spatial.samples.data()[(k * n_s + a) * ll..][..ll];
                            for t in 0..l_alpha {
                                let w = c * scale.samples.data()[m * l_alpha + t];
                                let base = (((li * m_out + lo) * n_s + a) * l_alpha + t) * ll;
                                let dst = &mut out.data_mut()[base..base + ll];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += w * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `sqrt(sum_k mu_k a(k)^2)`.
pub fn weighted_mu_norm(a: &[f64], mus: &[f64]) -> f64 {
    a.iter()
        .zip(mus)
        .map(|(c, mu)| mu * c * c)
        .sum::<f64>()
        .sqrt()
}

/// The layer regularity norm: pi times the larger of the two channel-sum
/// aggregates of the weighted coefficient norms. Joint layers carry the
/// extra factor 2 and sum over scale modes outside the input-channel sup.
pub fn compute_a_l(block: &CoefficientBlock, mus: &[f64]) -> f64 {
    let (m_in, m_out) = (block.m_in(), block.m_out());
    let k = block.k();
    let k_alpha = block.k_alpha();
    let norm = |li: usize, lo: usize, m: usize| -> f64 {
        let coeffs: Vec<f64> = (0..k).map(|ki| block.coeff(li, lo, ki, m)).collect();
        weighted_mu_norm(&coeffs, mus)
    };
    if block.layer == 1 {
        let mut sup_out = 0.0_f64;
        for lo in 0..m_out {
            let s: f64 = (0..m_in).map(|li| norm(li, lo, 0)).sum();
            sup_out = sup_out.max(s);
        }
        let mut sup_in = 0.0_f64;
        for li in 0..m_in {
            let s: f64 = (0..m_out).map(|lo| norm(li, lo, 0)).sum();
            sup_in = sup_in.max(s);
        }
        PI * sup_out.max(m_in as f64 / m_out as f64 * sup_in)
    } else {
        let mut sup_out = 0.0_f64;
        for lo in 0..m_out {
            let mut s = 0.0;
            for li in 0..m_in {
                for m in 0..k_alpha {
                    s += norm(li, lo, m);
                }
            }
            sup_out = sup_out.max(s);
        }
        let mut per_mode = 0.0_f64;
        for m in 0..k_alpha {
            let mut sup_in = 0.0_f64;
            for li in 0..m_in {
                let s: f64 = (0..m_out).map(|lo| norm(li, lo, m)).sum();
                sup_in = sup_in.max(s);
            }
            per_mode += sup_in;
        }
        PI * sup_out.max(2.0 * m_in as f64 / m_out as f64 * per_mode)
    }
}

/// Per-layer regularity report: the coefficient norm `a_l` plus the filter
/// integral norms evaluated by quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    pub a_l: f64,
    pub b_l: f64,
    pub c_l: f64,
    pub d_l: f64,
}

/// Quadrature evaluation of the filter integral norms on a refinement grid.
///
/// For each channel pair (and scale mode), the synthesized continuous filter
/// `w(u) = sum_k a(k) psi_k(u)` is integrated on `[-1,1]^2` with trapezoid
/// weights and analytic gradients; the rescaling to support `2^j` leaves
/// `B = int |w|` and `C = int |u| |grad w|` unchanged and scales
/// `D = int |grad w|` by `2^{-j}`.
pub fn compute_regularity(block: &CoefficientBlock, modes: &[Mode], grid_n: usize) -> RegularityReport {
    let mus: Vec<f64> = modes.iter().map(|&(p, q)| crate::basis::mu_of(p, q)).collect();
    let a_l = compute_a_l(block, &mus);
    let (m_in, m_out) = (block.m_in(), block.m_out());
    let k = block.k();
    let k_alpha = block.k_alpha();

    let h = 2.0 / (grid_n - 1) as f64;
    let pts: Vec<f64> = (0..grid_n).map(|i| -1.0 + i as f64 * h).collect();
    let mut wts = vec![h; grid_n];
    wts[0] = h / 2.0;
    wts[grid_n - 1] = h / 2.0;

    // Tables of psi and grad psi per mode on the refinement grid.
    let n2 = grid_n * grid_n;
    let mut val = vec![0.0; k * n2];
    let mut gx = vec![0.0; k * n2];
    let mut gy = vec![0.0; k * n2];
    for (ki, &(p, q)) in modes.iter().take(k).enumerate() {
        for (i, &x) in pts.iter().enumerate() {
            for (jj, &y) in pts.iter().enumerate() {
                let idx = ki * n2 + i * grid_n + jj;
                val[idx] = psi_eval(p, q, x, y);
                let (dx, dy) = psi_grad(p, q, x, y);
                gx[idx] = dx;
                gy[idx] = dy;
            }
        }
    }

    // Per (channel pair, scale mode) integral norms on the unit square.
    let pair_norms = |li: usize, lo: usize, m: usize| -> (f64, f64, f64) {
        let coeffs: Vec<f64> = (0..k).map(|ki| block.coeff(li, lo, ki, m)).collect();
        let (mut b, mut c, mut d) = (0.0, 0.0, 0.0);
        for (i, &x) in pts.iter().enumerate() {
            for (jj, &y) in pts.iter().enumerate() {
                let mut w = 0.0;
                let mut wx = 0.0;
                let mut wy = 0.0;
                for ki in 0..k {
                    let cc = coeffs[ki];
                    if cc == 0.0 {
                        continue;
                    }
                    let idx = ki * n2 + i * grid_n + jj;
                    w += cc * val[idx];
                    wx += cc * gx[idx];
                    wy += cc * gy[idx];
                }
                let area = wts[i] * wts[jj];
                let gn = (wx * wx + wy * wy).sqrt();
                b += area * w.abs();
                c += area * (x * x + y * y).sqrt() * gn;
                d += area * gn;
            }
        }
        (b, c, d)
    };

    let mut bs = vec![vec![vec![0.0; k_alpha]; m_out]; m_in];
    let mut cs = vec![vec![vec![0.0; k_alpha]; m_out]; m_in];
    let mut ds = vec![vec![vec![0.0; k_alpha]; m_out]; m_in];
    for li in 0..m_in {
        for lo in 0..m_out {
            for m in 0..k_alpha {
                let (b, c, d) = pair_norms(li, lo, m);
                bs[li][lo][m] = b;
                cs[li][lo][m] = c;
                ds[li][lo][m] = d * 2f64.powf(-block.j);
            }
        }
    }

    let aggregate = |per: &Vec<Vec<Vec<f64>>>| -> f64 {
        if block.layer == 1 {
            let mut sup_out = 0.0_f64;
            for lo in 0..m_out {
                let s: f64 = (0..m_in).map(|li| per[li][lo][0]).sum();
                sup_out = sup_out.max(s);
            }
            let mut sup_in = 0.0_f64;
            for li in 0..m_in {
                let s: f64 = (0..m_out).map(|lo| per[li][lo][0]).sum();
                sup_in = sup_in.max(s);
            }
            sup_out.max(m_in as f64 / m_out as f64 * sup_in)
        } else {
            let mut sup_out = 0.0_f64;
            for lo in 0..m_out {
                let mut s = 0.0;
                for li in 0..m_in {
                    for m in 0..k_alpha {
                        s += per[li][lo][m];
                    }
                }
                sup_out = sup_out.max(s);
            }
            let mut per_mode = 0.0_f64;
            for m in 0..k_alpha {
                let mut sup_in = 0.0_f64;
                for li in 0..m_in {
                    let s: f64 = (0..m_out).map(|lo| per[li][lo][m]).sum();
                    sup_in = sup_in.max(s);
                }
                per_mode += sup_in;
            }
            sup_out.max(2.0 * m_in as f64 / m_out as f64 * per_mode)
        }
    };

    RegularityReport {
        a_l,
        b_l: aggregate(&bs),
        c_l: aggregate(&cs),
        d_l: aggregate(&ds),
    }
}

/// If the regularity norm exceeds 1, rescale the coefficients (not the bias)
/// uniformly so it equals 1; otherwise leave the block untouched.
/// Returns the pre-projection norm.
pub fn project_to_a2(block: &mut CoefficientBlock, mus: &[f64]) -> f64 {
    let a_l = compute_a_l(block, mus);
    if a_l > 1.0 {
        block.a.scale(1.0 / a_l);
    }
    a_l
}

/// Gaussian-initialize a coefficient block, then rescale it so its
/// regularity norm equals `target_a` exactly. Biases start at zero.
#[allow(clippy::too_many_arguments)]
pub fn init_coefficients(
    seed: u64,
    layer: usize,
    m_in: usize,
    m_out: usize,
    k: usize,
    k_alpha: usize,
    j: f64,
    target_a: f64,
    mus: &[f64],
) -> Result<CoefficientBlock> {
    if target_a <= 0.0 || target_a.is_nan() {
        return Err(Error::Config("target regularity norm must be > 0".into()));
    }
    let shape = if layer == 1 {
        vec![m_in, m_out, k]
    } else {
        vec![m_in, m_out, k, k_alpha]
    };
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a = Tensor::new(shape, data)?;
    let b = Tensor::zeros(&[m_out]);
    let mut block = CoefficientBlock::new(layer, a, b, j)?;
    let a_l = compute_a_l(&block, mus);
    if a_l > 0.0 {
        block.a.scale(target_a / a_l);
    }
    Ok(block)
}

/// Trainable parameters of the decomposed layer over those of the
/// undecomposed `L x L x L_alpha` layer: `K K_alpha / (L^2 L_alpha)`.
pub fn parameter_ratio(block: &CoefficientBlock, l: usize, l_alpha: usize) -> f64 {
    let decomposed = block.a.len() as f64;
    let dense = (block.m_in() * block.m_out() * l * l * l_alpha) as f64;
    decomposed / dense
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_scale_basis, make_spatial_basis, spatial_modes, SamplingRule, ScaleGrid};
    use rand::{Rng, SeedableRng};

    fn mus(k: usize) -> Vec<f64> {
        spatial_modes(k)
            .iter()
            .map(|&(p, q)| crate::basis::mu_of(p, q))
            .collect()
    }

    fn random_block(seed: u64, layer: usize, m_in: usize, m_out: usize, k: usize, k_alpha: usize) -> CoefficientBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = if layer == 1 {
            vec![m_in, m_out, k]
        } else {
            vec![m_in, m_out, k, k_alpha]
        };
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        CoefficientBlock::new(layer, Tensor::new(shape, data).unwrap(), Tensor::zeros(&[m_out]), 0.0).unwrap()
    }

    #[test]
    fn synthesize_unit_coefficient_reproduces_basis() {
        let grid = ScaleGrid::new(1.0, 3).unwrap();
        let spatial = make_spatial_basis(4, 5, &grid, 0.0, SamplingRule::CellCenter).unwrap();
        let scale = make_scale_basis(2, 3).unwrap();
        let mut a = Tensor::zeros(&[1, 1, 4]);
        a.data_mut()[0] = 1.0; // k = 1
        let block = CoefficientBlock::new(1, a, Tensor::zeros(&[1]), 0.0).unwrap();
        let f = synthesize_filters(&block, &spatial, &scale).unwrap();
        assert_eq!(f.shape(), &[1, 1, 3, 5, 5]);
        for ai in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(f.data()[(ai * 5 + i) * 5 + j], spatial.samples.at4(0, ai, i, j));
                }
            }
        }
    }

    #[test]
    fn synthesize_zero_coefficients() {
        let grid = ScaleGrid::new(1.0, 2).unwrap();
        let spatial = make_spatial_basis(3, 3, &grid, 0.0, SamplingRule::CellCenter).unwrap();
        let scale = make_scale_basis(2, 2).unwrap();
        let block = random_block(0, 2, 2, 2, 3, 2);
        let mut zero = block.clone();
        zero.a.scale(0.0);
        let f = synthesize_filters(&zero, &spatial, &scale).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_matches_triple_loop_oracle() {
        let grid = ScaleGrid::new(1.0, 3).unwrap();
        let spatial = make_spatial_basis(5, 5, &grid, 1.0, SamplingRule::CellAverage).unwrap();
        let scale = make_scale_basis(3, 3).unwrap();
        let block = random_block(42, 2, 2, 3, 5, 3);
        let f = synthesize_filters(&block, &spatial, &scale).unwrap();
        let mut max_diff = 0.0_f64;
        for li in 0..2 {
            for lo in 0..3 {
                for a in 0..3 {
                    for t in 0..3 {
                        for i in 0..5 {
                            for j in 0..5 {
                                let mut s = 0.0;
                                for k in 0..5 {
                                    for m in 0..3 {
                                        s += block.a.at4(li, lo, k, m)
                                            * spatial.samples.at4(k, a, i, j)
                                            * scale.samples.data()[m * 3 + t];
                                    }
                                }
                                let idx = ((((li * 3 + lo) * 3 + a) * 3 + t) * 5 + i) * 5 + j;
                                max_diff = max_diff.max((f.data()[idx] - s).abs());
                            }
                        }
                    }
                }
            }
        }
        assert!(max_diff < 1e-12, "max diff {}", max_diff);
    }

    #[test]
    fn weighted_norm_examples() {
        let m = mus(4);
        assert!((weighted_mu_norm(&[1.0, 0.0, 0.0, 0.0], &m) - PI / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(weighted_mu_norm(&[0.0; 4], &m), 0.0);
        let want = (PI * PI / 2.0 + 5.0 * PI * PI / 4.0).sqrt();
        assert!((weighted_mu_norm(&[1.0, 1.0], &m[..2]) - want).abs() < 1e-12);
    }

    #[test]
    fn a1_single_coefficient() {
        let m = mus(3);
        for &c in &[0.25, -1.5, 2.0] {
            let mut a = Tensor::zeros(&[1, 1, 3]);
            a.data_mut()[0] = c;
            let block = CoefficientBlock::new(1, a, Tensor::zeros(&[1]), 0.0).unwrap();
            let want = PI * (PI / 2f64.sqrt()) * c.abs();
            assert!((compute_a_l(&block, &m) - want).abs() < 1e-12);
        }
        let zero = CoefficientBlock::new(1, Tensor::zeros(&[2, 2, 3]), Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(compute_a_l(&zero, &m), 0.0);
    }

    /// Independent re-reading of the layer norm definition, written as plain
    /// loops over the formula rather than reusing the implementation helpers.
    fn a_l_oracle(block: &CoefficientBlock, m: &[f64]) -> f64 {
        let (mi, mo, k) = (block.m_in(), block.m_out(), block.k());
        let nrm = |li: usize, lo: usize, mm: usize| {
            let mut s = 0.0;
            for ki in 0..k {
                let c = if block.layer == 1 {
                    block.a.at3(li, lo, ki)
                } else {
                    block.a.at4(li, lo, ki, mm)
                };
                s += m[ki] * c * c;
            }
            s.sqrt()
        };
        if block.layer == 1 {
            let t1 = (0..mo)
                .map(|lo| (0..mi).map(|li| nrm(li, lo, 0)).sum::<f64>())
                .fold(0.0_f64, f64::max);
            let t2 = (0..mi)
                .map(|li| (0..mo).map(|lo| nrm(li, lo, 0)).sum::<f64>())
                .fold(0.0_f64, f64::max);
            PI * t1.max(mi as f64 / mo as f64 * t2)
        } else {
            let ka = block.k_alpha();
            let t1 = (0..mo)
                .map(|lo| {
                    (0..mi)
                        .flat_map(|li| (0..ka).map(move |mm| (li, mm)))
                        .map(|(li, mm)| nrm(li, lo, mm))
                        .sum::<f64>()
                })
                .fold(0.0_f64, f64::max);
            let t2: f64 = (0..ka)
                .map(|mm| {
                    (0..mi)
                        .map(|li| (0..mo).map(|lo| nrm(li, lo, mm)).sum::<f64>())
                        .fold(0.0_f64, f64::max)
                })
                .sum();
            PI * t1.max(2.0 * mi as f64 / mo as f64 * t2)
        }
    }

    #[test]
    fn a_l_matches_independent_formula() {
        let m = mus(4);
        let block = random_block(7, 2, 2, 2, 4, 2);
        assert!((compute_a_l(&block, &m) - a_l_oracle(&block, &m)).abs() < 1e-12);
        let b1 = random_block(8, 1, 3, 2, 4, 1);
        assert!((compute_a_l(&b1, &m) - a_l_oracle(&b1, &m)).abs() < 1e-12);
    }

    #[test]
    fn a_l_homogeneous() {
        let m = mus(4);
        let block = random_block(3, 2, 3, 2, 4, 2);
        let base = compute_a_l(&block, &m);
        for &c in &[0.5, -2.0, 3.7] {
            let mut scaled = block.clone();
            scaled.a.scale(c);
            assert!((compute_a_l(&scaled, &m) - c.abs() * base).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_behavior() {
        let m = mus(3);
        let mut small = random_block(1, 1, 2, 2, 3, 1);
        let a0 = compute_a_l(&small, &m);
        small.a.scale(0.5 / a0);
        let before = small.clone();
        project_to_a2(&mut small, &m);
        assert_eq!(small, before); // A = 0.5 stays untouched

        let mut big = random_block(2, 2, 2, 2, 3, 2);
        let a0 = compute_a_l(&big, &m);
        big.a.scale(2.0 / a0); // A = 2
        let halved: Vec<f64> = big.a.data().iter().map(|v| v / 2.0).collect();
        project_to_a2(&mut big, &m);
        for (got, want) in big.a.data().iter().zip(&halved) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((compute_a_l(&big, &m) - 1.0).abs() < 1e-12);

        let mut random = random_block(5, 2, 3, 3, 3, 2);
        project_to_a2(&mut random, &m);
        assert!(compute_a_l(&random, &m) <= 1.0 + 1e-12);
    }

    #[test]
    fn init_is_deterministic_and_hits_target() {
        let m = mus(5);
        let b1 = init_coefficients(9, 2, 2, 3, 5, 2, 1.0, 1.0, &m).unwrap();
        let b2 = init_coefficients(9, 2, 2, 3, 5, 2, 1.0, 1.0, &m).unwrap();
        assert_eq!(b1.a.data(), b2.a.data());
        assert!((compute_a_l(&b1, &m) - 1.0).abs() < 1e-12);
        let b3 = init_coefficients(10, 2, 2, 3, 5, 2, 1.0, 1.0, &m).unwrap();
        assert!(b1.a.data().iter().zip(b3.a.data()).any(|(x, y)| x != y));
        let b4 = init_coefficients(9, 2, 2, 3, 5, 2, 1.0, 0.25, &m).unwrap();
        assert!((compute_a_l(&b4, &m) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lemma_bounds_hold_under_quadrature() {
        let modes = spatial_modes(5);
        for seed in 0..4 {
            for layer in [1, 2] {
                let mut block = random_block(100 + seed, layer, 2, 2, 5, 2);
                block.j = 1.0;
                let r = compute_regularity(&block, &modes, 101);
                let tol = 1e-3 * r.a_l.max(1.0);
                assert!(r.b_l <= r.a_l + tol, "B {} > A {}", r.b_l, r.a_l);
                assert!(r.c_l <= r.a_l + tol, "C {} > A {}", r.c_l, r.a_l);
                assert!(
                    2f64.powf(block.j) * r.d_l <= r.a_l + tol,
                    "2^j D {} > A {}",
                    2f64.powf(block.j) * r.d_l,
                    r.a_l
                );
            }
        }
    }

    #[test]
    fn parameter_ratio_exact() {
        let block = random_block(0, 2, 4, 4, 8, 3);
        assert_eq!(parameter_ratio(&block, 5, 5), 0.192);
    }
}
