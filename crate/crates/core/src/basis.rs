//! Separable Dirichlet-Laplacian eigenbases on the square `[-1,1]^2` (space)
//! and the interval `[-1,1]` (scale), plus their multiscale sampling on the
//! filter tap grid.
//!
//! Spatial modes are `psi_{p,q}(u) = sin(p*pi*(u1+1)/2) * sin(q*pi*(u2+1)/2)`
//! with eigenvalue `mu = (pi/2)^2 (p^2 + q^2)`; both factors have unit L2 norm
//! on `[-1,1]`, vanish on the boundary, and are extended by zero outside.
//! Scale modes are `phi_m(a) = sin(m*pi*(a+1)/2)` with `nu_m = (m*pi/2)^2`.

use std::f64::consts::PI;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Uniform discretization of the truncated scale interval `[-T, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    t: f64,
    n_s: usize,
}

impl ScaleGrid {
    pub fn new(t: f64, n_s: usize) -> Result<Self> {
        if t <= 0.0 || t.is_nan() {
            return Err(Error::Config(format!("scale half-width T must be > 0, got {}", t)));
        }
        if n_s == 0 {
            return Err(Error::Config("scale channel count N_s must be >= 1".into()));
        }
        Ok(ScaleGrid { t, n_s })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    /// Endpoint-inclusive spacing `2T/(N_s-1)`; zero when there is a single channel.
    pub fn delta(&self) -> f64 {
        if self.n_s <= 1 {
            0.0
        } else {
            2.0 * self.t / (self.n_s - 1) as f64
        }
    }

    /// Strictly increasing grid values, symmetric about zero, `alpha = +-T`
    /// included when `N_s > 1`.
    pub fn values(&self) -> Vec<f64> {
        if self.n_s == 1 {
            return vec![0.0];
        }
        let d = self.delta();
        (0..self.n_s).map(|i| -self.t + i as f64 * d).collect()
    }
}

/// Spatial mode index pair `(p, q)`, both >= 1.
pub type Mode = (u32, u32);

/// The K lowest modes in the canonical order: ascending eigenvalue, ties
/// broken lexicographically by `(p, q)`.
pub fn spatial_modes(k: usize) -> Vec<Mode> {
    // p^2 + q^2 <= bound is reached well inside a (k+2)-sided square of indices.
    let side = ((k as f64).sqrt() as u32 + 2).max(2);
    let mut all: Vec<Mode> = Vec::new();
    let mut grow = side;
    loop {
        all.clear();
        for p in 1..=grow {
            for q in 1..=grow {
                all.push((p, q));
            }
        }
        all.sort_by_key(|&(p, q)| (p * p + q * q, p, q));
        // The enumeration square is large enough once the k-th eigenvalue is
        // below anything only reachable outside it.
        if all.len() >= k && all[k - 1].0 * all[k - 1].0 + all[k - 1].1 * all[k - 1].1 < grow * grow + 1 {
            break;
        }
        grow *= 2;
    }
    all.truncate(k);
    all
}

/// Eigenvalue `mu_k = (pi/2)^2 (p^2 + q^2)` of the k-th canonical mode (1-based).
pub fn eigenvalue_of(k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("mode index k is 1-based".into()));
    }
    let modes = spatial_modes(k);
    let (p, q) = modes[k - 1];
    Ok(mu_of(p, q))
}

pub fn mu_of(p: u32, q: u32) -> f64 {
    (PI / 2.0).powi(2) * (p * p + q * q) as f64
}

/// `nu_m = (m*pi/2)^2`.
pub fn nu_of(m: u32) -> f64 {
    (m as f64 * PI / 2.0).powi(2)
}

/// Analytic `psi_{p,q}` on `[-1,1]^2`, extended by zero outside.
pub fn psi_eval(p: u32, q: u32, u1: f64, u2: f64) -> f64 {
    if u1.abs() > 1.0 || u2.abs() > 1.0 {
        return 0.0;
    }
    (p as f64 * PI * (u1 + 1.0) / 2.0).sin() * (q as f64 * PI * (u2 + 1.0) / 2.0).sin()
}

/// Analytic gradient of `psi_{p,q}` inside the square (zero outside).
pub fn psi_grad(p: u32, q: u32, u1: f64, u2: f64) -> (f64, f64) {
    if u1.abs() > 1.0 || u2.abs() > 1.0 {
        return (0.0, 0.0);
    }
    let (pf, qf) = (p as f64, q as f64);
    let s1 = (pf * PI * (u1 + 1.0) / 2.0).sin();
    let c1 = (pf * PI * (u1 + 1.0) / 2.0).cos();
    let s2 = (qf * PI * (u2 + 1.0) / 2.0).sin();
    let c2 = (qf * PI * (u2 + 1.0) / 2.0).cos();
    (pf * PI / 2.0 * c1 * s2, s1 * qf * PI / 2.0 * c2)
}

/// Analytic `phi_m` on `[-1,1]`, zero outside.
pub fn phi_eval(m: u32, a: f64) -> f64 {
    if a.abs() > 1.0 {
        return 0.0;
    }
    (m as f64 * PI * (a + 1.0) / 2.0).sin()
}

/// `int_a^b sin(p*pi*(x+1)/2) dx` with the integrand extended by zero
/// outside `[-1, 1]`.
fn sine_integral(p: u32, a: f64, b: f64) -> f64 {
    let lo = a.max(-1.0);
    let hi = b.min(1.0);
    if hi <= lo {
        return 0.0;
    }
    let pf = p as f64;
    let prim = |x: f64| -(2.0 / (pf * PI)) * (pf * PI * (x + 1.0) / 2.0).cos();
    prim(hi) - prim(lo)
}

/// How the continuous rescaled filters are reduced to tap values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingRule {
    /// Point evaluation at the cell-centered tap coordinates.
    CellCenter,
    /// Exact integral of the filter over each unit tap cell. Preserves the
    /// discrete filter mass at every scale, so fine-scale filters converge to
    /// a bounded delta tap instead of blowing up with the amplitude factor.
    CellAverage,
}

/// Sampled spatial eigenbasis: the K lowest modes, rescaled per scale channel
/// and reduced to an `[K, N_s, L, L]` tap tensor.
#[derive(Debug, Clone)]
pub struct SpatialBasis {
    pub k: usize,
    pub modes: Vec<Mode>,
    pub eigenvalues: Vec<f64>,
    /// `[K, N_s, L, L]` tap values of `2^{-2(j+alpha)} psi_k(2^{-(j+alpha)} u)`.
    pub samples: Tensor,
    /// The L cell-centered tap offsets in pixel units.
    pub grid: Vec<f64>,
    /// The N_s scale channel values `alpha`.
    pub scale_grid: Vec<f64>,
    pub j: f64,
    pub rule: SamplingRule,
}

/// Cell-centered tap offsets over a window of half-width `L/2`:
/// `u_i = -L/2 + (i + 0.5)`, i.e. integers for odd L.
pub fn tap_offsets(l: usize) -> Vec<f64> {
    (0..l).map(|i| i as f64 + 0.5 - l as f64 / 2.0).collect()
}

/// Build the sampled spatial basis for support exponent `j`: channel `alpha`
/// holds `2^{-2(j+alpha)} psi_k(2^{-(j+alpha)} u)` reduced to the L x L tap
/// grid by `rule`.
pub fn make_spatial_basis(
    k: usize,
    l: usize,
    scale_grid: &ScaleGrid,
    j: f64,
    rule: SamplingRule,
) -> Result<SpatialBasis> {
    if k == 0 {
        return Err(Error::Config("spatial mode count K must be >= 1".into()));
    }
    if l == 0 {
        return Err(Error::Config("spatial tap count L must be >= 1".into()));
    }
    let modes = spatial_modes(k);
    let eigenvalues: Vec<f64> = modes.iter().map(|&(p, q)| mu_of(p, q)).collect();
    let taps = tap_offsets(l);
    let alphas = scale_grid.values();
    let n_s = alphas.len();
    let mut samples = Tensor::zeros(&[k, n_s, l, l]);
    for (ki, &(p, q)) in modes.iter().enumerate() {
        for (ai, &alpha) in alphas.iter().enumerate() {
            // Factored as 2^{-2a} * [2^{-2j} psi(2^{-j} (2^{-a} u))] so channel
            // alpha equals the alpha = 0 samples evaluated at 2^{-alpha} u and
            // scaled by 2^{-2 alpha}, bit for bit.
            let za = 2f64.powf(-alpha);
            let zj = 2f64.powf(-j);
            let scale = za * zj;
            for (i, &ti) in taps.iter().enumerate() {
                for (jj, &tj) in taps.iter().enumerate() {
                    let v = match rule {
                        SamplingRule::CellCenter => {
                            za * za * (zj * zj * psi_eval(p, q, zj * (za * ti), zj * (za * tj)))
                        }
                        SamplingRule::CellAverage => {
                            // Substituting w = 2^{-(j+alpha)} u turns the cell
                            // integral of the rescaled filter into a plain
                            // integral of psi over the rescaled cell.
                            sine_integral(p, scale * (ti - 0.5), scale * (ti + 0.5))
                                * sine_integral(q, scale * (tj - 0.5), scale * (tj + 0.5))
                        }
                    };
                    samples.set4(ki, ai, i, jj, v);
                }
            }
        }
    }
    Ok(SpatialBasis {
        k,
        modes,
        eigenvalues,
        samples,
        grid: taps,
        scale_grid: alphas,
        j,
        rule,
    })
}

/// Sampled scale eigenbasis: `phi_m` at the `L_alpha` cell centers of `[-1,1]`.
#[derive(Debug, Clone)]
pub struct ScaleBasis {
    pub k_alpha: usize,
    /// `[K_alpha, L_alpha]`.
    pub samples: Tensor,
    pub eigenvalues: Vec<f64>,
    pub grid: Vec<f64>,
}

pub fn make_scale_basis(k_alpha: usize, l_alpha: usize) -> Result<ScaleBasis> {
    if k_alpha == 0 {
        return Err(Error::Config("scale mode count K_alpha must be >= 1".into()));
    }
    if l_alpha == 0 {
        return Err(Error::Config("scale tap count L_alpha must be >= 1".into()));
    }
    let grid: Vec<f64> = (0..l_alpha)
        .map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / l_alpha as f64)
        .collect();
    let mut samples = Tensor::zeros(&[k_alpha, l_alpha]);
    for m in 1..=k_alpha {
        for (i, &c) in grid.iter().enumerate() {
            samples.data_mut()[(m - 1) * l_alpha + i] = phi_eval(m as u32, c);
        }
    }
    let eigenvalues = (1..=k_alpha).map(|m| nu_of(m as u32)).collect();
    Ok(ScaleBasis {
        k_alpha,
        samples,
        eigenvalues,
        grid,
    })
}
