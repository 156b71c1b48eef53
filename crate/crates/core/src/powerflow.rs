//! Ground-truth nonlinear power flow for radial feeders.
//!
//! Three solvers share the branch-flow state `(P, Q, f, v)`:
//! backward/forward sweeps with fixed constant-power injections (the inner
//! engine), the matrix-form fixed-point iteration used to realize a
//! physically exact operating point from a feasible point of the restricted
//! program, and an outer loop that re-evaluates the exact piecewise droop
//! curves until the injections settle. A closed-form solver for networks of
//! at most three buses serves as an independent reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::droop::{eval_exact_droop, DroopParameters, ExactDroopCurve};
use crate::grid::{IbdgSpec, RadialNetwork, TopologyMatrices};

/// Default stopping threshold on successive squared currents (matrix-form
/// iteration).
pub const ADHOC_EPS: f64 = 1e-10;
/// Default outer tolerance on voltage magnitudes (droop loop).
pub const DROOP_TOL: f64 = 1e-8;
/// Outer iteration cap for the droop loop.
pub const MAX_OUTER: usize = 200;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("iteration diverged after {iterations} iterations")]
    Diverged { iterations: usize },
    #[error("non-positive squared voltage at bus {bus}")]
    NonPositiveVoltage { bus: usize },
    #[error("droop loop did not converge within {outer} outer passes")]
    NotConverged { outer: usize },
    #[error("no real power-flow solution (beyond loadability)")]
    NoRealSolution,
    #[error("state for timestep {timestep} is not converged")]
    UnconvergedState { timestep: usize },
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),
}

/// Branch-flow state at a fixed point of the nonlinear equations.
/// `p`/`q` are sending-end flows, `f` squared currents, `v` squared
/// voltages, all line-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowState {
    pub v: DVector<f64>,
    pub f: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

/// One security violation found by [`verify_security`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub quantity: String,
    pub index: usize,
    pub timestep: usize,
    pub amount: f64,
}

/// Aggregated limit check over a horizon of converged states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityVerdict {
    pub worst_v_hi: f64,
    pub worst_v_lo: f64,
    pub worst_current_ratio: f64,
    pub violations: Vec<Violation>,
}

impl SecurityVerdict {
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Clip an injection to the inverter capability region: active power into
/// `[0, p_max]`, the power-factor wedge, the reactive box, then the apparent
/// power cap by shrinking the reactive component.
pub fn clip_capability(unit: &IbdgSpec, p: f64, q: f64) -> (f64, f64) {
    let p = p.clamp(0.0, unit.p_max);
    let wedge = unit.wedge_slope() * p;
    let q = q.clamp((-wedge).max(unit.q_min), wedge.min(unit.q_max));
    let s_sq = unit.s_max * unit.s_max;
    let q = if p * p + q * q > s_sq {
        (s_sq - p * p).max(0.0).sqrt().copysign(q)
    } else {
        q
    };
    (p, q)
}

/// Max residual of the three branch-flow equations at `state`, with the
/// current equation in its sending-end form `f = (P² + Q²) / v_up`.
pub fn equation_residuals(
    net: &RadialNetwork,
    state: &PowerFlowState,
    net_p: &DVector<f64>,
    net_q: &DVector<f64>,
    shunt_g: &DVector<f64>,
    shunt_b: &DVector<f64>,
) -> f64 {
    let children = net.child_lines();
    let mut worst = 0.0f64;
    for (l, line) in net.lines.iter().enumerate() {
        let bus = net.bus_of_line(l);
        let mut p_children = 0.0;
        let mut q_children = 0.0;
        for &m in &children[bus] {
            p_children += state.p[m];
            q_children += state.q[m];
        }
        let res_p = state.p[l]
            - (net_p[l] + state.v[l] * shunt_g[l] + p_children + line.r * state.f[l]);
        let res_q = state.q[l]
            - (net_q[l] + state.v[l] * shunt_b[l] + q_children + line.x * state.f[l]);
        let v_up = if line.up == 0 {
            net.v0
        } else {
            state.v[net.line_of_bus(line.up)]
        };
        let res_v = state.v[l]
            - (v_up - 2.0 * (line.r * state.p[l] + line.x * state.q[l]) + line.z_sq() * state.f[l]);
        let res_f = state.f[l] - (state.p[l] * state.p[l] + state.q[l] * state.q[l]) / v_up;
        worst = worst
            .max(res_p.abs())
            .max(res_q.abs())
            .max(res_v.abs())
            .max(res_f.abs());
    }
    worst
}

/// Backward/forward sweep with fixed constant-power injections. Network
/// constant-impedance shunts are honored; droop behavior is the caller's
/// concern.
pub fn solve_fixed_injections(
    net: &RadialNetwork,
    load_p: &DVector<f64>,
    load_q: &DVector<f64>,
    inj_p: &DVector<f64>,
    inj_q: &DVector<f64>,
    tol: f64,
) -> Result<PowerFlowState, PowerFlowError> {
    let n = net.n_lines();
    let shunt_g = net.shunt_g_vec();
    let shunt_b = net.shunt_b_vec();
    let net_p = load_p - inj_p;
    let net_q = load_q - inj_q;
    sweep(
        net,
        &net_p,
        &net_q,
        &shunt_g,
        &shunt_b,
        tol,
        DVector::from_element(n, net.v0),
    )
}

/// Sweep engine over net consumptions and explicit shunt vectors.
pub(crate) fn sweep(
    net: &RadialNetwork,
    net_p: &DVector<f64>,
    net_q: &DVector<f64>,
    shunt_g: &DVector<f64>,
    shunt_b: &DVector<f64>,
    tol: f64,
    v_start: DVector<f64>,
) -> Result<PowerFlowState, PowerFlowError> {
    let n = net.n_lines();
    let order = net.lines_root_first();
    let children = net.child_lines();

    let mut v = v_start;
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    let mut f = DVector::zeros(n);

    let max_iters = 1000;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        // backward: receiving-end aggregation, leaves towards the root
        for &l in order.iter().rev() {
            let bus = net.bus_of_line(l);
            let mut p_rec = net_p[l] + shunt_g[l] * v[l];
            let mut q_rec = net_q[l] + shunt_b[l] * v[l];
            for &m in &children[bus] {
                p_rec += p[m];
                q_rec += q[m];
            }
            if v[l] <= 0.0 {
                return Err(PowerFlowError::NonPositiveVoltage { bus });
            }
            let fl = (p_rec * p_rec + q_rec * q_rec) / v[l];
            f[l] = fl;
            p[l] = p_rec + net.lines[l].r * fl;
            q[l] = q_rec + net.lines[l].x * fl;
        }
        // forward: voltage drops, root towards the leaves
        let mut dv_max = 0.0f64;
        for &l in &order {
            let line = &net.lines[l];
            let v_up = if line.up == 0 {
                net.v0
            } else {
                v[net.line_of_bus(line.up)]
            };
            let v_new = v_up - 2.0 * (line.r * p[l] + line.x * q[l]) + line.z_sq() * f[l];
            if v_new <= 0.0 {
                return Err(PowerFlowError::NonPositiveVoltage {
                    bus: net.bus_of_line(l),
                });
            }
            dv_max = dv_max.max((v_new - v[l]).abs());
            v[l] = v_new;
        }
        if dv_max <= tol {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(PowerFlowError::Diverged {
            iterations: max_iters,
        });
    }
    let state = PowerFlowState {
        residual: 0.0,
        converged,
        iterations,
        v,
        f,
        p,
        q,
    };
    let residual = equation_residuals(net, &state, net_p, net_q, shunt_g, shunt_b);
    Ok(PowerFlowState { residual, ..state })
}

/// The matrix-form fixed-point iteration: starting from a feasible point of
/// the restricted program, repeat
/// `f ← (P² + Q²)/v_up`, `v ← v̂ − D f`,
/// `P ← H(p + diag(g) v + diag(r) f)`, `Q ← H(q + diag(b) v + diag(x) f)`
/// until successive squared currents agree. `net_p`/`net_q` are net
/// consumptions (load minus the constant-power part of every injection);
/// `shunt_g`/`shunt_b` include the droop admittances.
#[allow(clippy::too_many_arguments)]
pub fn adhoc_iteration(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    v_hat: &DVector<f64>,
    d_matrix: &DMatrix<f64>,
    net_p: &DVector<f64>,
    net_q: &DVector<f64>,
    shunt_g: &DVector<f64>,
    shunt_b: &DVector<f64>,
    start: &PowerFlowState,
    eps_stop: f64,
) -> Result<PowerFlowState, PowerFlowError> {
    let n = net.n_lines();
    let h = &topo.closure;
    let r = net.r_vec();
    let x = net.x_vec();

    let mut v = start.v.clone();
    let mut p = start.p.clone();
    let mut q = start.q.clone();
    let mut f = start.f.clone();

    let max_iters = 20_000;
    let mut iterations = 0;
    let mut best_df = f64::INFINITY;
    let mut stalled = 0usize;
    loop {
        iterations += 1;
        let mut f_new = DVector::zeros(n);
        for (l, line) in net.lines.iter().enumerate() {
            let v_up = if line.up == 0 {
                net.v0
            } else {
                v[net.line_of_bus(line.up)]
            };
            if v_up <= 0.0 {
                return Err(PowerFlowError::NonPositiveVoltage { bus: line.up });
            }
            f_new[l] = (p[l] * p[l] + q[l] * q[l]) / v_up;
        }
        let df = (&f_new - &f).amax();
        f = f_new;
        v = v_hat - d_matrix * &f;
        for (l, vl) in v.iter().enumerate() {
            if *vl <= 0.0 {
                return Err(PowerFlowError::NonPositiveVoltage {
                    bus: net.bus_of_line(l),
                });
            }
        }
        let gp = DVector::from_fn(n, |l, _| net_p[l] + shunt_g[l] * v[l] + r[l] * f[l]);
        let gq = DVector::from_fn(n, |l, _| net_q[l] + shunt_b[l] * v[l] + x[l] * f[l]);
        p = h * gp;
        q = h * gq;

        if df <= eps_stop {
            break;
        }
        if df < best_df {
            best_df = df;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > 50 || !df.is_finite() {
                return Err(PowerFlowError::Diverged { iterations });
            }
        }
        if iterations >= max_iters {
            return Err(PowerFlowError::Diverged { iterations });
        }
    }

    let state = PowerFlowState {
        residual: 0.0,
        converged: true,
        iterations,
        v,
        f,
        p,
        q,
    };
    let residual = equation_residuals(net, &state, net_p, net_q, shunt_g, shunt_b);
    Ok(PowerFlowState { residual, ..state })
}

/// Exact a-posteriori droop power flow: an outer fixed point over the
/// piecewise droop injections evaluated at the running voltage magnitudes
/// (capability-clipped), with a backward/forward sweep as the inner engine.
/// `curves` holds one exact curve per droop unit in
/// [`RadialNetwork::droop_units`] order; `avail` has one entry per IBDG.
pub fn exact_droop_powerflow(
    net: &RadialNetwork,
    curves: &[ExactDroopCurve],
    avail: &[f64],
    tol: f64,
) -> Result<PowerFlowState, PowerFlowError> {
    let n = net.n_lines();
    let droop_units = net.droop_units();
    assert_eq!(curves.len(), droop_units.len());
    assert_eq!(avail.len(), net.ibdgs.len());

    // constant part: loads minus the non-droop injections
    let mut base_p = net.load_p_vec();
    let base_q = net.load_q_vec();
    for (u, unit) in net.ibdgs.iter().enumerate() {
        if !unit.dispatchable {
            base_p[net.line_of_bus(unit.bus)] -= avail[u];
        }
    }

    let shunt_g = net.shunt_g_vec();
    let shunt_b = net.shunt_b_vec();

    let mut inj_p = vec![0.0; droop_units.len()];
    let mut inj_q = vec![0.0; droop_units.len()];
    let mut v = DVector::from_element(n, net.v0);
    for outer in 0..MAX_OUTER {
        // relaxation engages if the piecewise switching oscillates
        let relax = if outer >= 20 { 0.5 } else { 1.0 };
        let mut net_p = base_p.clone();
        let mut net_q = base_q.clone();
        let mut moved = 0.0f64;
        for (k, &u) in droop_units.iter().enumerate() {
            let unit = &net.ibdgs[u];
            let v_mag = v[net.line_of_bus(unit.bus)].sqrt();
            let (p_raw, q_raw) = eval_exact_droop(&curves[k], v_mag, avail[u]);
            let (p_new, q_new) = clip_capability(unit, p_raw, q_raw);
            let p_next = inj_p[k] + relax * (p_new - inj_p[k]);
            let q_next = inj_q[k] + relax * (q_new - inj_q[k]);
            moved = moved
                .max((p_next - inj_p[k]).abs())
                .max((q_next - inj_q[k]).abs());
            inj_p[k] = p_next;
            inj_q[k] = q_next;
        }
        for (k, &u) in droop_units.iter().enumerate() {
            let l = net.line_of_bus(net.ibdgs[u].bus);
            net_p[l] -= inj_p[k];
            net_q[l] -= inj_q[k];
        }
        let solved = sweep(net, &net_p, &net_q, &shunt_g, &shunt_b, (tol * 1e-3).max(1e-14), v.clone())?;
        let dv_mag = solved
            .v
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a.sqrt() - b.sqrt()).abs())
            .fold(0.0f64, f64::max);
        v = solved.v.clone();
        if dv_mag <= tol && moved <= tol {
            return Ok(solved);
        }
    }
    Err(PowerFlowError::NotConverged { outer: MAX_OUTER })
}

/// Compare converged per-step states against the network limits.
pub fn verify_security(
    states: &[PowerFlowState],
    net: &RadialNetwork,
) -> Result<SecurityVerdict, PowerFlowError> {
    for (t, s) in states.iter().enumerate() {
        if !s.converged {
            return Err(PowerFlowError::UnconvergedState { timestep: t });
        }
    }
    let slack_mag = net.v0.sqrt();
    let mut verdict = SecurityVerdict {
        worst_v_hi: slack_mag,
        worst_v_lo: slack_mag,
        worst_current_ratio: 0.0,
        violations: Vec::new(),
    };
    for (t, s) in states.iter().enumerate() {
        for l in 0..net.n_lines() {
            let bus = &net.buses[net.bus_of_line(l)];
            let v_mag = s.v[l].sqrt();
            verdict.worst_v_hi = verdict.worst_v_hi.max(v_mag);
            verdict.worst_v_lo = verdict.worst_v_lo.min(v_mag);
            let hi = bus.v_max.sqrt();
            let lo = bus.v_min.sqrt();
            if v_mag > hi {
                verdict.violations.push(Violation {
                    quantity: "v_hi".into(),
                    index: bus.id,
                    timestep: t,
                    amount: v_mag - hi,
                });
            }
            if v_mag < lo {
                verdict.violations.push(Violation {
                    quantity: "v_lo".into(),
                    index: bus.id,
                    timestep: t,
                    amount: lo - v_mag,
                });
            }
            let ratio = s.f[l] / net.lines[l].i_max;
            verdict.worst_current_ratio = verdict.worst_current_ratio.max(ratio);
            if ratio > 1.0 {
                verdict.violations.push(Violation {
                    quantity: "current".into(),
                    index: net.lines[l].id,
                    timestep: t,
                    amount: s.f[l] - net.lines[l].i_max,
                });
            }
        }
    }
    Ok(verdict)
}

/// Closed-form reference for networks of at most three buses: per-line
/// quadratic elimination from the leaves, with a bracketed scalar root
/// search joining the two levels of a chain. Injections are fixed.
pub fn brute_force_small(
    net: &RadialNetwork,
    inj_p: &DVector<f64>,
    inj_q: &DVector<f64>,
) -> Result<PowerFlowState, PowerFlowError> {
    let n = net.n_lines();
    if net.n_buses() > 3 {
        return Err(PowerFlowError::UnsupportedTopology(format!(
            "{} buses (max 3)",
            net.n_buses()
        )));
    }
    let net_p = net.load_p_vec() - inj_p;
    let net_q = net.load_q_vec() - inj_q;
    let g = net.shunt_g_vec();
    let b = net.shunt_b_vec();

    // quadratic in v for one line given the parent voltage and aggregated
    // child sending-end flows; returns (v, f, P, Q)
    let solve_line =
        |l: usize, v_up: f64, p_child: f64, q_child: f64| -> Option<(f64, f64, f64, f64)> {
            let line = &net.lines[l];
            let z2 = line.z_sq();
            let a_coef =
                1.0 + 2.0 * line.r * g[l] + 2.0 * line.x * b[l] + z2 * (g[l] * g[l] + b[l] * b[l]);
            let ap = net_p[l] + p_child;
            let bq = net_q[l] + q_child;
            let b_coef =
                -v_up + 2.0 * line.r * ap + 2.0 * line.x * bq + 2.0 * z2 * (ap * g[l] + bq * b[l]);
            let c_coef = z2 * (ap * ap + bq * bq);
            let disc = b_coef * b_coef - 4.0 * a_coef * c_coef;
            if disc < 0.0 {
                return None;
            }
            let v = (-b_coef + disc.sqrt()) / (2.0 * a_coef);
            if v <= 0.0 {
                return None;
            }
            let p_rec = ap + g[l] * v;
            let q_rec = bq + b[l] * v;
            let f = (p_rec * p_rec + q_rec * q_rec) / v;
            Some((v, f, p_rec + line.r * f, q_rec + line.x * f))
        };

    let mut v = DVector::zeros(n);
    let mut f = DVector::zeros(n);
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);

    let chain_leaf = net.lines.iter().position(|l| l.up != 0);
    match chain_leaf {
        None => {
            // every line hangs off the slack: independent quadratics
            for l in 0..n {
                let (vl, fl, pl, ql) =
                    solve_line(l, net.v0, 0.0, 0.0).ok_or(PowerFlowError::NoRealSolution)?;
                v[l] = vl;
                f[l] = fl;
                p[l] = pl;
                q[l] = ql;
            }
        }
        Some(leaf) => {
            // two-level chain: the root line feeds the leaf line's parent bus
            let root = net.line_of_bus(net.lines[leaf].up);
            // residual of the root line's quadratic at a trial parent voltage
            let residual = |v1: f64| -> Option<f64> {
                let (_, _, pl, ql) = solve_line(leaf, v1, 0.0, 0.0)?;
                let line = &net.lines[root];
                let z2 = line.z_sq();
                let a_coef = 1.0
                    + 2.0 * line.r * g[root]
                    + 2.0 * line.x * b[root]
                    + z2 * (g[root] * g[root] + b[root] * b[root]);
                let ap = net_p[root] + pl;
                let bq = net_q[root] + ql;
                let b_coef = -net.v0
                    + 2.0 * line.r * ap
                    + 2.0 * line.x * bq
                    + 2.0 * z2 * (ap * g[root] + bq * b[root]);
                let c_coef = z2 * (ap * ap + bq * bq);
                Some(a_coef * v1 * v1 + b_coef * v1 + c_coef)
            };
            // scan from the high-voltage end for the first sign change
            let hi = 2.5 * net.v0;
            let steps = 4000;
            let mut bracket = None;
            let mut prev: Option<(f64, f64)> = None;
            for i in 0..=steps {
                let v1 = hi - (hi - 0.02) * (i as f64) / (steps as f64);
                if let Some(res) = residual(v1) {
                    if let Some((pv, pres)) = prev {
                        if pres.signum() != res.signum() {
                            bracket = Some((v1, pv));
                            break;
                        }
                    }
                    prev = Some((v1, res));
                } else {
                    prev = None;
                }
            }
            let (mut lo_v, mut hi_v) = bracket.ok_or(PowerFlowError::NoRealSolution)?;
            for _ in 0..200 {
                let mid = 0.5 * (lo_v + hi_v);
                let r_mid = residual(mid).ok_or(PowerFlowError::NoRealSolution)?;
                let r_hi = residual(hi_v).ok_or(PowerFlowError::NoRealSolution)?;
                if r_mid.signum() == r_hi.signum() {
                    hi_v = mid;
                } else {
                    lo_v = mid;
                }
            }
            let v1 = 0.5 * (lo_v + hi_v);
            let (vl, fl, pl, ql) =
                solve_line(leaf, v1, 0.0, 0.0).ok_or(PowerFlowError::NoRealSolution)?;
            v[leaf] = vl;
            f[leaf] = fl;
            p[leaf] = pl;
            q[leaf] = ql;
            let (vr, fr, pr, qr) =
                solve_line(root, net.v0, pl, ql).ok_or(PowerFlowError::NoRealSolution)?;
            debug_assert!((vr - v1).abs() < 1e-8);
            v[root] = vr;
            f[root] = fr;
            p[root] = pr;
            q[root] = qr;
        }
    }

    let state = PowerFlowState {
        residual: 0.0,
        converged: true,
        iterations: 1,
        v,
        f,
        p,
        q,
    };
    let residual = equation_residuals(net, &state, &net_p, &net_q, &g, &b);
    Ok(PowerFlowState { residual, ..state })
}

/// Net consumptions and effective shunts of the squared-voltage droop model
/// at a fixed activation state, for handing to [`adhoc_iteration`].
pub fn approx_droop_equivalent(
    net: &RadialNetwork,
    params: &[DroopParameters],
    active: &[bool],
    avail: &[f64],
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let droop_units = net.droop_units();
    assert_eq!(params.len(), droop_units.len());
    assert_eq!(active.len(), droop_units.len());
    let mut net_p = net.load_p_vec();
    let mut net_q = net.load_q_vec();
    let mut g = net.shunt_g_vec();
    let mut b = net.shunt_b_vec();
    for (u, unit) in net.ibdgs.iter().enumerate() {
        if !unit.dispatchable {
            net_p[net.line_of_bus(unit.bus)] -= avail[u];
        }
    }
    for (k, &u) in droop_units.iter().enumerate() {
        let l = net.line_of_bus(net.ibdgs[u].bus);
        let ((cp, cq), (gg, bb)) =
            crate::droop::constant_impedance_equivalent(&params[k], active[k], avail[u]);
        net_p[l] -= cp;
        net_q[l] -= cq;
        g[l] += gg;
        b[l] += bb;
    }
    (net_p, net_q, g, b)
}
