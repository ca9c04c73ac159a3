//! Differentiable viscosity physics graph.
//!
//! Melt viscosity is modeled in log10 space as the composition of three
//! empirical laws: a piecewise power law in molecular weight (entanglement
//! transition at `Mcr`), a WLF shift in temperature, and a Cross-type
//! shear-thinning law beyond a critical shear rate. Piecewise switches are
//! replaced by a logistic blend so the whole graph stays differentiable.
//!
//! All functions here are unit-agnostic: they evaluate the same formulas
//! whether the inputs are in scaled graph coordinates (the training domain)
//! or physical log10/Kelvin units. The bounding map [`bound_params`] is the
//! only place where the scaled-domain parameter ranges are baked in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transition sharpness of the shear-thinning switch. Fixed, not learned.
pub const BETA_SHEAR: f64 = 30.0;

/// Smallest admissible WLF denominator `C2 + (T - Tr)`.
pub const EPS_WLF_DENOM: f64 = 1e-6;

/// Number of empirical parameters (10 learned + the fixed shear beta).
pub const N_PARAMS: usize = 11;
/// Number of learned raw parameters entering [`bound_params`].
pub const N_RAW: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    /// `C2 + (T - Tr)` fell at or below [`EPS_WLF_DENOM`]; the queried
    /// temperature is outside the WLF validity window.
    #[error("WLF denominator {0:.3e} at or below {EPS_WLF_DENOM:.0e}")]
    DenominatorTooSmall(f64),
}

/// The empirical parameters of the viscosity laws.
///
/// Field order defines the gradient component order used throughout
/// (`log_k1, alpha1, alpha2, log_mcr, beta_mw, c1, c2, tr, n, log_gcr, beta_g`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalParams {
    /// log10 y-intercept of the Mw power law.
    pub log_k1: f64,
    /// Low-Mw (unentangled) slope, ~1.
    pub alpha1: f64,
    /// High-Mw (entangled) slope, ~3.4.
    pub alpha2: f64,
    /// log10 critical molecular weight.
    pub log_mcr: f64,
    /// Sharpness of the Mw transition.
    pub beta_mw: f64,
    /// WLF numerator constant.
    pub c1: f64,
    /// WLF denominator constant.
    pub c2: f64,
    /// WLF reference temperature.
    pub tr: f64,
    /// Shear-thinning exponent, < 1 for thinning fluids.
    pub n: f64,
    /// log10 critical shear rate.
    pub log_gcr: f64,
    /// Sharpness of the shear transition (fixed at 30 in the graph).
    pub beta_g: f64,
}

/// Bounding ranges applied by [`bound_params`], in raw-vector order
/// (same as the learned field order).
pub const PARAM_BOUNDS: [(f64, f64); N_RAW] = [
    (-1.5, 0.5), // log_k1
    (0.0, 3.0),  // alpha1
    (0.0, 6.0),  // alpha2
    (-1.0, 1.0), // log_mcr
    (20.0, 50.0),// beta_mw
    (0.0, 2.0),  // c1
    (0.0, 2.0),  // c2
    (-1.5, 1.0), // tr
    (0.0, 1.0),  // n
    (-1.0, 1.0), // log_gcr
];

impl EmpiricalParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.log_k1, self.alpha1, self.alpha2, self.log_mcr, self.beta_mw,
            self.c1, self.c2, self.tr, self.n, self.log_gcr, self.beta_g,
        ]
    }

    pub fn from_array(a: &[f64; N_PARAMS]) -> Self {
        Self {
            log_k1: a[0], alpha1: a[1], alpha2: a[2], log_mcr: a[3], beta_mw: a[4],
            c1: a[5], c2: a[6], tr: a[7], n: a[8], log_gcr: a[9], beta_g: a[10],
        }
    }

    /// Whether the parameters lie inside the scaled-domain ranges enforced
    /// by [`bound_params`]. Parameters expressed in physical units will
    /// generally not satisfy this.
    pub fn in_scaled_bounds(&self) -> bool {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return false;
        }
        self.beta_g == BETA_SHEAR
            && PARAM_BOUNDS
                .iter()
                .zip(a.iter())
                .all(|(&(lo, hi), &v)| v > lo && v < hi)
    }
}

/// Conditions at which the graph is evaluated, in graph coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConditions {
    pub log_mw: f64,
    pub t: f64,
    pub log_g: f64,
}

/// Logistic blend `1 / (1 + exp(-beta * x))`, numerically stable for any
/// finite `beta * x` (saturates to exactly 0.0 / 1.0 past the representable
/// range of `exp`).
pub fn smooth_heaviside(x: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let z = beta * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Zero-shear viscosity dependence on molecular weight: the two log-domain
/// power-law branches blended at `log_mcr` with sharpness `beta_mw`. The
/// branches intersect at `log_mcr`, which encodes the entangled intercept
/// `k2 = k1 * Mcr^(alpha1 - alpha2)`.
pub fn log_eta_mw(log_mw: f64, p: &EmpiricalParams) -> f64 {
    let low = p.log_k1 + p.alpha1 * log_mw;
    let high = p.log_k1 + (p.alpha1 - p.alpha2) * p.log_mcr + p.alpha2 * log_mw;
    let w_high = smooth_heaviside(log_mw - p.log_mcr, p.beta_mw);
    // weights sum to 1 exactly: sigma(x) + sigma(-x) = 1
    (1.0 - w_high) * low + w_high * high
}

/// WLF temperature shift `-C1 (T - Tr) / (C2 + (T - Tr))` in log10 units.
pub fn wlf_log_shift(t: f64, p: &EmpiricalParams) -> Result<f64, PhysicsError> {
    let dt = t - p.tr;
    let denom = p.c2 + dt;
    if denom <= EPS_WLF_DENOM {
        return Err(PhysicsError::DenominatorTooSmall(denom));
    }
    Ok(-p.c1 * dt / denom)
}

/// log10 zero-shear viscosity: Mw law plus WLF shift, additive in log space.
pub fn log_eta0(log_mw: f64, t: f64, p: &EmpiricalParams) -> Result<f64, PhysicsError> {
    Ok(log_eta_mw(log_mw, p) + wlf_log_shift(t, p)?)
}

/// log10 viscosity: zero-shear plateau blended into the shear-thinning
/// power law `(n - 1) * (log_g - log_gcr)` with sharpness `beta_g`.
pub fn log_eta(cond: &PhysicalConditions, p: &EmpiricalParams) -> Result<f64, PhysicsError> {
    let e0 = log_eta0(cond.log_mw, cond.t, p)?;
    let r = cond.log_g - p.log_gcr;
    let w_thin = smooth_heaviside(r, p.beta_g);
    Ok(e0 + w_thin * (p.n - 1.0) * r)
}

/// Sigmoid bounding map from unconstrained raw network outputs to the
/// physically meaningful parameter ranges. The raw vector carries the 10
/// learned entries; `beta_g` is the fixed constant 30.
pub fn bound_params(raw: &[f64]) -> EmpiricalParams {
    let (p, _) = bound_params_with_grad(raw);
    p
}

/// As [`bound_params`], also returning `d bounded_i / d raw_i` for each of
/// the 10 learned components (the map is diagonal).
pub fn bound_params_with_grad(raw: &[f64]) -> (EmpiricalParams, [f64; N_RAW]) {
    assert!(raw.len() >= N_RAW, "raw parameter vector too short: {}", raw.len());
    let mut v = [0.0; N_RAW];
    let mut g = [0.0; N_RAW];
    for i in 0..N_RAW {
        let (lo, hi) = PARAM_BOUNDS[i];
        let s = smooth_heaviside(raw[i], 1.0);
        v[i] = lo + (hi - lo) * s;
        g[i] = (hi - lo) * s * (1.0 - s);
    }
    let p = EmpiricalParams {
        log_k1: v[0], alpha1: v[1], alpha2: v[2], log_mcr: v[3], beta_mw: v[4],
        c1: v[5], c2: v[6], tr: v[7], n: v[8], log_gcr: v[9],
        beta_g: BETA_SHEAR,
    };
    (p, g)
}

/// Value of [`log_eta`] together with exact analytic partials with respect
/// to all 11 parameters (field order) and the 3 conditions
/// `(log_mw, t, log_g)`.
pub fn log_eta_with_grad(
    cond: &PhysicalConditions,
    p: &EmpiricalParams,
) -> Result<(f64, [f64; N_PARAMS], [f64; 3]), PhysicsError> {
    let denom = p.c2 + (cond.t - p.tr);
    if denom <= EPS_WLF_DENOM {
        return Err(PhysicsError::DenominatorTooSmall(denom));
    }
    Ok(grad_core(cond, p, denom, 1.0))
}

/// As [`log_eta_with_grad`], but the WLF denominator is passed through a
/// smooth softplus floor at `floor`, so the value and gradient stay finite
/// on the whole parameter domain. Gradient-based training uses this to
/// survive transient optimizer steps that cross the WLF pole; the penalized
/// value steers parameters back without aborting.
pub fn log_eta_with_grad_guarded(
    cond: &PhysicalConditions,
    p: &EmpiricalParams,
    floor: f64,
) -> (f64, [f64; N_PARAMS], [f64; 3]) {
    debug_assert!(floor > 0.0);
    const K: f64 = 20.0;
    let denom = p.c2 + (cond.t - p.tr);
    let z = K * (denom - floor);
    let softplus = if z > 30.0 { z } else { z.exp().ln_1p() };
    let d = floor + softplus / K;
    let d_sigma = smooth_heaviside(z, 1.0);
    grad_core(cond, p, d, d_sigma)
}

/// Shared gradient computation; `denom` is the (possibly floored) WLF
/// denominator and `denom_grad` its derivative with respect to the raw
/// denominator `c2 + (t - tr)`.
fn grad_core(
    cond: &PhysicalConditions,
    p: &EmpiricalParams,
    denom: f64,
    denom_grad: f64,
) -> (f64, [f64; N_PARAMS], [f64; 3]) {
    // Mw branch: emw = log_k1 + alpha1*m + w2*(alpha2 - alpha1)*u, u = m - mcr
    let m = cond.log_mw;
    let u = m - p.log_mcr;
    let w2 = smooth_heaviside(u, p.beta_mw);
    let s2 = w2 * (1.0 - w2);
    let da = p.alpha2 - p.alpha1;
    let emw = p.log_k1 + p.alpha1 * m + w2 * da * u;

    let d_log_k1 = 1.0;
    let d_alpha1 = m - w2 * u;
    let d_alpha2 = w2 * u;
    let switch_mw = w2 + u * p.beta_mw * s2;
    let d_log_mcr = -da * switch_mw;
    let d_beta_mw = da * u * u * s2;
    let d_m = p.alpha1 + da * switch_mw;

    // WLF shift
    let dt = cond.t - p.tr;
    let shift = -p.c1 * dt / denom;
    let d_c1 = -dt / denom;
    // chain through the denominator transform (identity when unfloored)
    let via_denom = p.c1 * dt / (denom * denom) * denom_grad;
    let d_c2 = via_denom;
    let d_t = -p.c1 / denom + via_denom;
    let d_tr = -d_t;

    // shear thinning
    let r = cond.log_g - p.log_gcr;
    let v2 = smooth_heaviside(r, p.beta_g);
    let t2 = v2 * (1.0 - v2);
    let nm1 = p.n - 1.0;
    let value = emw + shift + v2 * nm1 * r;

    let d_n = v2 * r;
    let switch_g = v2 + r * p.beta_g * t2;
    let d_log_gcr = -nm1 * switch_g;
    let d_beta_g = nm1 * r * r * t2;
    let d_g = nm1 * switch_g;

    let grad_p = [
        d_log_k1, d_alpha1, d_alpha2, d_log_mcr, d_beta_mw,
        d_c1, d_c2, d_tr, d_n, d_log_gcr, d_beta_g,
    ];
    let grad_c = [d_m, d_t, d_g];
    (value, grad_p, grad_c)
}

/// Exact (unsmoothed) piecewise Mw law, used for smoothing-consistency
/// checks and as the ground-truth fitting target.
pub fn log_eta_mw_piecewise(log_mw: f64, log_k1: f64, alpha1: f64, alpha2: f64, log_mcr: f64) -> f64 {
    if log_mw < log_mcr {
        log_k1 + alpha1 * log_mw
    } else {
        log_k1 + (alpha1 - alpha2) * log_mcr + alpha2 * log_mw
    }
}
