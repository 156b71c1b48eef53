//! A-priori feasibility certificate for the restricted conic OPF.
//!
//! From the topology, the effective constant-impedance shunts (network loads
//! plus droop admittances in their active state), and an envelope on flows
//! and injections, this module assembles the matrices that control whether
//! a solution of the augmented relaxation corresponds to a physical power
//! flow, and evaluates the four pass/fail conditions. Checks run before any
//! optimization and are pure functions of the inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{RadialNetwork, TopologyMatrices};
use crate::par;

/// Entry of the sensitivity matrix treated as zero when checking ratios.
pub const TOL_POS: f64 = 1e-12;
/// Negative slack absorbed as floating-point noise in the nonnegativity check.
pub const TOL_NEG: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("voltage recovery system is singular (condition on the shunt norm failed)")]
    SingularSystem,
    #[error("zero path impedance for droop unit at bus {bus} with epsilon = 0")]
    ZeroPathImpedance { bus: usize },
    #[error("no condition break found in scale range [{lo}, {hi}]")]
    NoBreakFound { lo: f64, hi: f64 },
    #[error("power flow oracle failed during break search: {0}")]
    Oracle(String),
}

/// Flow and injection envelope entering the condition matrices: per-line flow
/// caps, per-bus injection caps, and the nominal loads.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionEnvelope {
    pub flow_p_max: DVector<f64>,
    pub flow_q_max: DVector<f64>,
    pub inj_p_max: DVector<f64>,
    pub inj_q_max: DVector<f64>,
    pub load_p: DVector<f64>,
    pub load_q: DVector<f64>,
}

impl InjectionEnvelope {
    /// Envelope from the case data: flow caps from the line records,
    /// injection caps from the installed IBDG capability per bus.
    pub fn nominal(net: &RadialNetwork) -> InjectionEnvelope {
        let n = net.n_lines();
        let mut inj_p = DVector::zeros(n);
        let mut inj_q = DVector::zeros(n);
        for unit in &net.ibdgs {
            let l = net.line_of_bus(unit.bus);
            inj_p[l] += unit.p_max;
            inj_q[l] += unit.q_max;
        }
        InjectionEnvelope {
            flow_p_max: DVector::from_iterator(n, net.lines.iter().map(|l| l.p_max)),
            flow_q_max: DVector::from_iterator(n, net.lines.iter().map(|l| l.q_max)),
            inj_p_max: inj_p,
            inj_q_max: inj_q,
            load_p: net.load_p_vec(),
            load_q: net.load_q_vec(),
        }
    }
}

/// The matrices behind the feasibility conditions. The topology closure is
/// carried along so the report can be computed without re-deriving it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrices {
    /// Resistive and reactive shunt couplings `2 diag(r) H diag(g)`,
    /// `2 diag(x) H diag(b)`.
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    /// Inverse of the voltage recovery system `I - Gᵀ + M1 + M2`.
    pub c: DMatrix<f64>,
    /// Sensitivity of nodal voltages to squared line currents.
    pub d: DMatrix<f64>,
    /// Flow envelope vectors and the contraction matrix built from them.
    pub flow_env_p: DVector<f64>,
    pub flow_env_q: DVector<f64>,
    pub flow_env_sq: DVector<f64>,
    pub e: DMatrix<f64>,
    pub closure: DMatrix<f64>,
    /// Sign and log10-magnitude of `det(C⁻¹)`, kept in log form so deep
    /// feeders cannot overflow the determinant.
    pub det_sign: f64,
    pub det_log10: f64,
}

/// Pass/fail record for the four a-priori conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub norm_8a: f64,
    pub min_d: f64,
    pub norm_e: f64,
    /// Tightest entrywise ratio certifying the last condition, when it exists.
    pub eta: Option<f64>,
    pub pass_8a: bool,
    pub pass_8b: bool,
    pub pass_8c: bool,
    pub pass_8d: bool,
    pub overall: bool,
}

impl ConditionReport {
    /// Names of the failed conditions in check order.
    pub fn violated(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.pass_8a {
            v.push("8.a");
        }
        if !self.pass_8b {
            v.push("8.b");
        }
        if !self.pass_8c {
            v.push("8.c");
        }
        if !self.pass_8d {
            v.push("8.d");
        }
        v
    }
}

/// Effective per-line shunt admittances: network constant-impedance loads
/// plus the droop admittances `(α^p, α^q)` in the active state. `slopes`
/// holds one `(alpha_p, alpha_q)` pair per droop unit, in
/// [`RadialNetwork::droop_units`] order.
pub fn effective_shunts(
    net: &RadialNetwork,
    slopes: &[(f64, f64)],
) -> (DVector<f64>, DVector<f64>) {
    let mut g = net.shunt_g_vec();
    let mut b = net.shunt_b_vec();
    for (k, &unit_idx) in net.droop_units().iter().enumerate() {
        let l = net.line_of_bus(net.ibdgs[unit_idx].bus);
        g[l] += slopes[k].0;
        b[l] += slopes[k].1;
    }
    (g, b)
}

fn diag_times(d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..d.len() {
        for j in 0..m.ncols() {
            out[(i, j)] *= d[i];
        }
    }
    out
}

fn times_diag(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..d.len() {
        for i in 0..m.nrows() {
            out[(i, j)] *= d[j];
        }
    }
    out
}

/// Assemble the condition matrices for the given effective shunts and
/// envelope.
pub fn compute_condition_matrices(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    shunt_g: &DVector<f64>,
    shunt_b: &DVector<f64>,
    envelope: &InjectionEnvelope,
) -> Result<ConditionMatrices, ConditionError> {
    let n = net.n_lines();
    let h = &topo.closure;
    let r = net.r_vec();
    let x = net.x_vec();
    let z_sq = net.z_sq_vec();

    let m1 = diag_times(&(2.0 * &r), &times_diag(h, shunt_g));
    let m2 = diag_times(&(2.0 * &x), &times_diag(h, shunt_b));

    let system = DMatrix::identity(n, n) - topo.adjacency.transpose() + &m1 + &m2;
    let lu = system.lu();
    let mut det_sign: f64 = lu.p().determinant();
    let mut det_log10 = 0.0;
    for u in lu.u().diagonal().iter() {
        if *u == 0.0 {
            det_sign = 0.0;
            break;
        }
        det_sign *= u.signum();
        det_log10 += u.abs().log10();
    }
    let c = lu.try_inverse().ok_or(ConditionError::SingularSystem)?;

    let h_minus_i = h - DMatrix::identity(n, n);
    let d = &c * times_diag(&diag_times(&(2.0 * &r), &h_minus_i), &r)
        + &c * times_diag(&diag_times(&(2.0 * &x), &h_minus_i), &x)
        + times_diag(&c, &z_sq);

    let net_p = h * (&envelope.load_p - &envelope.inj_p_max);
    let net_q = h * (&envelope.load_q - &envelope.inj_q_max);
    let v_min = net.v_min_vec();
    let flow_env_p = DVector::from_fn(n, |l, _| {
        envelope.flow_p_max[l].max(net_p[l].abs()) / v_min[l]
    });
    let flow_env_q = DVector::from_fn(n, |l, _| {
        envelope.flow_q_max[l].max(net_q[l].abs()) / v_min[l]
    });
    let flow_env_sq = DVector::from_fn(n, |l, _| {
        flow_env_p[l] * flow_env_p[l] + flow_env_q[l] * flow_env_q[l]
    });

    let e = diag_times(&(2.0 * &flow_env_p), &times_diag(h, &r))
        + diag_times(&(2.0 * &flow_env_q), &times_diag(h, &x))
        + diag_times(&flow_env_sq, &d);

    Ok(ConditionMatrices {
        m1,
        m2,
        c,
        d,
        flow_env_p,
        flow_env_q,
        flow_env_sq,
        e,
        closure: h.clone(),
        det_sign,
        det_log10,
    })
}

/// Evaluate the four conditions on assembled matrices.
pub fn check_conditions(m: &ConditionMatrices) -> ConditionReport {
    let norm_8a = (m.closure.transpose() * (-&m.m1 - &m.m2)).norm();
    let min_d = m.d.iter().copied().fold(f64::INFINITY, f64::min);
    let norm_e = m.e.norm();

    let de = &m.d * &m.e;
    let mut eta = Some(0.0f64);
    for i in 0..m.d.nrows() {
        for j in 0..m.d.ncols() {
            if m.d[(i, j)] > TOL_POS {
                if let Some(cur) = eta {
                    eta = Some(cur.max(de[(i, j)] / m.d[(i, j)]));
                }
            } else if de[(i, j)] > TOL_POS {
                // a ratio certificate cannot exist on a zero entry
                eta = None;
            }
        }
    }

    let pass_8a = norm_8a < 1.0;
    let pass_8b = min_d >= -TOL_NEG;
    let pass_8c = norm_e < 1.0;
    let pass_8d = matches!(eta, Some(e) if e < 0.5);
    ConditionReport {
        norm_8a,
        min_d,
        norm_e,
        eta,
        pass_8a,
        pass_8b,
        pass_8c,
        pass_8d,
        overall: pass_8a && pass_8b && pass_8c && pass_8d,
    }
}

/// Equilibrium-safe droop slopes: the reciprocal of each droop bus's total
/// path impedance, with margin `epsilon`. Returns one `(alpha_p, alpha_q)`
/// pair per droop unit in [`RadialNetwork::droop_units`] order.
pub fn tune_droop_slopes(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    epsilon: f64,
) -> Result<Vec<(f64, f64)>, ConditionError> {
    debug_assert!(epsilon >= 0.0);
    let mut slopes = Vec::new();
    for &unit_idx in &net.droop_units() {
        let bus = net.ibdgs[unit_idx].bus;
        let l = net.line_of_bus(bus);
        let sum_r: f64 = topo.path_r.column(l).sum();
        let sum_x: f64 = topo.path_x.column(l).sum();
        if sum_r + epsilon == 0.0 || sum_x + epsilon == 0.0 {
            return Err(ConditionError::ZeroPathImpedance { bus });
        }
        slopes.push((1.0 / (sum_r + epsilon), 1.0 / (sum_x + epsilon)));
    }
    Ok(slopes)
}

/// One row of the margin sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub det_sign: f64,
    pub det_log10: f64,
    pub min_d: f64,
}

/// Evaluate `det(C⁻¹)` and `min(D)` across a grid of slope margins, folding
/// the tuned droop slopes into the effective shunts. Rows are independent
/// and evaluated in parallel.
pub fn sweep_epsilon(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    grid: &[f64],
) -> Result<Vec<SweepRow>, ConditionError> {
    assert!(!grid.is_empty(), "sweep grid must be non-empty");
    let envelope = InjectionEnvelope::nominal(net);
    let rows = par::map_slice(grid, |&epsilon| {
        let slopes = tune_droop_slopes(net, topo, epsilon)?;
        let (g, b) = effective_shunts(net, &slopes);
        let m = compute_condition_matrices(net, topo, &g, &b, &envelope)?;
        Ok(SweepRow {
            epsilon,
            det_sign: m.det_sign,
            det_log10: m.det_log10,
            min_d: m.d.iter().copied().fold(f64::INFINITY, f64::min),
        })
    });
    rows.into_iter().collect()
}

/// Report from [`find_condition_break`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakReport {
    /// Smallest injection scale at which the overall check fails.
    pub scale: f64,
    pub report: ConditionReport,
    /// First violated condition at the break scale, in check order.
    pub first_violated: String,
    /// Maximum voltage magnitude from an exact power flow with injections at
    /// the scaled envelope caps.
    pub oracle_v_max: f64,
}

/// Options for the break search.
#[derive(Debug, Clone, Copy)]
pub struct BreakSearch {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub tol: f64,
    /// Slope margin whose tuned droop admittances are folded into the
    /// effective shunts; `None` stresses the bare network.
    pub slope_margin: Option<f64>,
}

impl Default for BreakSearch {
    fn default() -> Self {
        BreakSearch {
            scale_lo: 1.0,
            scale_hi: 64.0,
            tol: 1e-3,
            slope_margin: Some(0.05),
        }
    }
}

/// Scale per-bus injections along `direction` until the overall condition
/// check first fails, by bisection. The experiment stresses the plain
/// network (the droop-slope admittances belong to the margin sweep, not to
/// this scaling test): injection caps follow the direction, reactive caps at
/// 62% of the active caps, and flow caps track 110% of the worst downstream
/// net flow the scaled envelope can produce.
pub fn find_condition_break(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    direction: &DVector<f64>,
    search: BreakSearch,
) -> Result<BreakReport, ConditionError> {
    assert!(
        direction.iter().all(|d| *d >= 0.0) && direction.iter().any(|d| *d > 0.0),
        "direction must be non-negative and nonzero"
    );
    let (g, b) = match search.slope_margin {
        Some(margin) => {
            let slopes = tune_droop_slopes(net, topo, margin)?;
            effective_shunts(net, &slopes)
        }
        None => (net.shunt_g_vec(), net.shunt_b_vec()),
    };

    let h = &topo.closure;
    let load_p = net.load_p_vec();
    let load_q = net.load_q_vec();
    let envelope_at = |scale: f64| -> InjectionEnvelope {
        let inj_p = scale * direction;
        let inj_q = DVector::from_fn(net.n_lines(), |l, _| 0.62 * inj_p[l]);
        let down_net_p = h * (&inj_p - &load_p);
        let down_net_q = h * (&inj_q - &load_q);
        InjectionEnvelope {
            flow_p_max: DVector::from_fn(net.n_lines(), |l, _| 1.1 * down_net_p[l].abs()),
            flow_q_max: DVector::from_fn(net.n_lines(), |l, _| 1.1 * down_net_q[l].abs()),
            inj_p_max: inj_p,
            inj_q_max: inj_q,
            load_p: load_p.clone(),
            load_q: load_q.clone(),
        }
    };
    // Only the envelope-dependent conditions can flip under injection
    // scaling; the shunt-norm and sensitivity-sign conditions are constant
    // along the path and appear in the report as-is.
    let report_at = |scale: f64| -> Result<ConditionReport, ConditionError> {
        let m = compute_condition_matrices(net, topo, &g, &b, &envelope_at(scale))?;
        Ok(check_conditions(&m))
    };
    let envelope_pass = |r: &ConditionReport| r.pass_8c && r.pass_8d;

    if !envelope_pass(&report_at(search.scale_lo)?) {
        return Err(ConditionError::NoBreakFound {
            lo: search.scale_lo,
            hi: search.scale_lo,
        });
    }
    if envelope_pass(&report_at(search.scale_hi)?) {
        return Err(ConditionError::NoBreakFound {
            lo: search.scale_lo,
            hi: search.scale_hi,
        });
    }

    let (mut lo, mut hi) = (search.scale_lo, search.scale_hi);
    while hi - lo > search.tol {
        let mid = 0.5 * (lo + hi);
        if envelope_pass(&report_at(mid)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let report = report_at(hi)?;
    let first_violated = if !report.pass_8d && report.pass_8c {
        "8.d"
    } else if !report.pass_8c && report.pass_8d {
        "8.c"
    } else {
        "8.c+8.d"
    }
    .to_string();

    // Exact power flow with injections at the scaled caps: the worst-case
    // operating point the broken envelope admits.
    let envelope = envelope_at(hi);
    let state = crate::powerflow::solve_fixed_injections(
        net,
        &load_p,
        &load_q,
        &envelope.inj_p_max,
        &envelope.inj_q_max,
        1e-10,
    )
    .map_err(|e| ConditionError::Oracle(e.to_string()))?;
    let oracle_v_max = state.v.iter().copied().fold(0.0f64, f64::max).sqrt();

    Ok(BreakReport {
        scale: hi,
        report,
        first_violated,
        oracle_v_max,
    })
}
