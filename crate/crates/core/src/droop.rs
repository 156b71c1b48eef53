//! Volt-var / volt-watt droop controller model.
//!
//! The optimizer works with droop curves that are affine in the *squared*
//! voltage magnitude `v`; real inverters follow curves affine in the voltage
//! magnitude `V = sqrt(v)`. The two are related by a first-order Taylor
//! expansion of `v` around a chosen point `v₀` ("taylor_v0"): the
//! squared-voltage curve with slope `α` maps to a magnitude curve with slope
//! `α* = 2 α sqrt(v₀)` and reference `Vref* = (vref + v₀) / (2 sqrt(v₀))`.
//! Dropping the second-order term makes the squared-voltage model a lower
//! bound on the exact injection, with branchwise mismatch
//! `-α (V - sqrt(v₀))²` — zero exactly at `V = sqrt(v₀)`, which is why the
//! expansion point defaults to the bus's maximum allowed voltage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `v - v0p` when checking a claimed activation state.
pub const ACTIVATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DroopError {
    #[error("activation flag y={y} contradicts v={v} vs v0p={v0p}")]
    InconsistentActivation { y: bool, v: f64, v0p: f64 },
}

/// Droop parameters in squared-voltage coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopParameters {
    /// Active-power slope, p.u. power per p.u.² voltage. Non-negative.
    pub alpha_p: f64,
    /// Reactive-power slope. Non-negative.
    pub alpha_q: f64,
    /// Squared-voltage references, p.u.²
    pub v0p: f64,
    pub v0q: f64,
    /// Reactive reference, p.u.
    pub q_g0: f64,
}

/// The equivalent exact curves against voltage magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactDroopCurve {
    pub alpha_p_star: f64,
    pub alpha_q_star: f64,
    /// Voltage-magnitude references, p.u.
    pub vref_p_star: f64,
    pub vref_q_star: f64,
    pub q_g0: f64,
    /// Squared expansion point used by the mapping, p.u.²
    pub taylor_v0: f64,
}

/// Map squared-voltage droop parameters to the exact magnitude-domain curve.
pub fn approx_to_exact(params: &DroopParameters, taylor_v0: f64) -> ExactDroopCurve {
    debug_assert!(taylor_v0 > 0.0);
    let root = taylor_v0.sqrt();
    ExactDroopCurve {
        alpha_p_star: params.alpha_p * 2.0 * root,
        alpha_q_star: params.alpha_q * 2.0 * root,
        vref_p_star: (params.v0p + taylor_v0) / (2.0 * root),
        vref_q_star: (params.v0q + taylor_v0) / (2.0 * root),
        q_g0: params.q_g0,
        taylor_v0,
    }
}

/// Inverse of [`approx_to_exact`]; the mapping is an affine bijection.
pub fn exact_to_approx(curve: &ExactDroopCurve) -> DroopParameters {
    let root = curve.taylor_v0.sqrt();
    DroopParameters {
        alpha_p: curve.alpha_p_star / (2.0 * root),
        alpha_q: curve.alpha_q_star / (2.0 * root),
        v0p: curve.vref_p_star * 2.0 * root - curve.taylor_v0,
        v0q: curve.vref_q_star * 2.0 * root - curve.taylor_v0,
        q_g0: curve.q_g0,
    }
}

/// Evaluate the exact piecewise curves at voltage magnitude `v_mag`.
/// Outputs are not capability-clipped; callers enforce the inverter limits.
pub fn eval_exact_droop(curve: &ExactDroopCurve, v_mag: f64, p_ava: f64) -> (f64, f64) {
    debug_assert!(v_mag > 0.0 && p_ava >= 0.0);
    let q_g = curve.q_g0 - curve.alpha_q_star * (v_mag - curve.vref_q_star);
    let p_g = if v_mag <= curve.vref_p_star {
        p_ava
    } else {
        p_ava - curve.alpha_p_star * (v_mag - curve.vref_p_star)
    };
    (p_g, q_g)
}

/// Evaluate the squared-voltage model at squared voltage `v` with an explicit
/// activation flag `y` (the mixed-integer model's binary). The flag must
/// agree with the `v` vs `v0p` comparison.
pub fn eval_approx_droop(
    params: &DroopParameters,
    v: f64,
    p_ava: f64,
    y: bool,
) -> Result<(f64, f64), DroopError> {
    let gap = v - params.v0p;
    let consistent = if y {
        gap >= -ACTIVATION_TOL
    } else {
        gap <= ACTIVATION_TOL
    };
    if !consistent {
        return Err(DroopError::InconsistentActivation {
            y,
            v,
            v0p: params.v0p,
        });
    }
    let q_g = params.q_g0 - params.alpha_q * (v - params.v0q);
    let p_g = if y { p_ava - params.alpha_p * gap } else { p_ava };
    Ok((p_g, q_g))
}

/// Difference `approx(V²) - exact(V)` for both branches. On matching branch
/// states this equals `-α (V - sqrt(v₀))²` componentwise, so the
/// squared-voltage model never overstates the injection.
pub fn approximation_error(
    params: &DroopParameters,
    curve: &ExactDroopCurve,
    v_mag: f64,
    p_ava: f64,
) -> (f64, f64) {
    let v = v_mag * v_mag;
    let y = v > params.v0p;
    let (p_a, q_a) =
        eval_approx_droop(params, v, p_ava, y).expect("activation derived from comparison");
    let (p_e, q_e) = eval_exact_droop(curve, v_mag, p_ava);
    (p_a - p_e, q_a - q_e)
}

/// Decompose the squared-voltage model at a given activation state into a
/// constant-power part `(p, q)` and a constant-impedance admittance
/// `(g, b)`; recombining as `(p - g·v, q - b·v)` reproduces
/// [`eval_approx_droop`] exactly.
pub fn constant_impedance_equivalent(
    params: &DroopParameters,
    y: bool,
    p_ava: f64,
) -> ((f64, f64), (f64, f64)) {
    let q_const = params.q_g0 + params.alpha_q * params.v0q;
    if y {
        (
            (p_ava + params.alpha_p * params.v0p, q_const),
            (params.alpha_p, params.alpha_q),
        )
    } else {
        ((p_ava, q_const), (0.0, params.alpha_q))
    }
}
