//! Iterative solution-quality improvement over activation sets.
//!
//! A pair (line, timestep) is *active* when the flow-sensitivity inequality
//! says the lossless proxy flow lower-bounds the true flow there, and the
//! proxy magnitude stays below the lower-bound flow. For active pairs the
//! four-combination cone family can use the proxy flow instead of the
//! lower-bound flow, which can only shrink the current upper bound. Each
//! iteration re-solves the modified program, re-checks the inequalities at
//! the new solution for every modified pair, and accepts the solution as
//! incumbent only when they still hold (and the objective did not regress —
//! the sets are not nested between iterations, so consistency alone cannot
//! guarantee a monotone trace). Discarded iterations still seed the next
//! iteration's sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{compute_condition_matrices, ConditionError, InjectionEnvelope};
use crate::grid::{RadialNetwork, TopologyMatrices};
use crate::program::{
    apply_refinement, ConicProgram, ProgramError, Quantity,
};
use crate::solver::{solve_misocp, Solution, SolveStatus, SolverConfig, SolverError};

/// Slack on both membership inequalities.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
/// Two consecutive accepted objectives closer than this stop the loop.
pub const OBJECTIVE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("initial droop-design solve returned {0:?}; no incumbent to refine")]
    NoIncumbent(SolveStatus),
}

/// The (line, timestep) pairs where the refinement applies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationSets {
    pub wp: Vec<(usize, usize)>,
    pub wq: Vec<(usize, usize)>,
}

/// One loop iteration: objective, the sets computed *at* this solution, and
/// whether the solution passed the consistency check / became incumbent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub h: usize,
    pub objective: f64,
    pub wp_len: usize,
    pub wq_len: usize,
    pub consistent: bool,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub steps: Vec<RefinementStep>,
    pub hit_cap: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    pub max_iterations: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { max_iterations: 10 }
    }
}

/// Per-timestep sensitivity matrices `H (diag(r) - diag(g_eff) D)` and the
/// reactive analogue, with the droop admittances in the activation state the
/// solution selected.
fn sensitivity_pair(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    slopes: &[(f64, f64)],
    active: &[bool],
) -> Result<(DMatrix<f64>, DMatrix<f64>), ConditionError> {
    let n = net.n_lines();
    let mut g = net.shunt_g_vec();
    let mut b = net.shunt_b_vec();
    for (k, &u) in net.droop_units().iter().enumerate() {
        let l = net.line_of_bus(net.ibdgs[u].bus);
        if active[k] {
            g[l] += slopes[k].0;
        }
        b[l] += slopes[k].1;
    }
    let envelope = InjectionEnvelope {
        flow_p_max: DVector::zeros(n),
        flow_q_max: DVector::zeros(n),
        inj_p_max: DVector::zeros(n),
        inj_q_max: DVector::zeros(n),
        load_p: DVector::zeros(n),
        load_q: DVector::zeros(n),
    };
    let m = compute_condition_matrices(net, topo, &g, &b, &envelope)?;
    let h = &topo.closure;
    let r = net.r_vec();
    let x = net.x_vec();
    let mut dr = DMatrix::zeros(n, n);
    let mut dx = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (mut vr, mut vx) = if i == j { (r[i], x[i]) } else { (0.0, 0.0) };
            vr -= g[i] * m.d[(i, j)];
            vx -= b[i] * m.d[(i, j)];
            dr[(i, j)] = vr;
            dx[(i, j)] = vx;
        }
    }
    Ok((h * dr, h * dx))
}

fn activation_state(
    net: &RadialNetwork,
    program: &ConicProgram,
    solution: &Solution,
    t: usize,
) -> Vec<bool> {
    (0..net.droop_units().len())
        .map(|k| {
            program
                .map
                .get(Quantity::Activation, k, t)
                .map(|id| solution.values[id] > 0.5)
                .unwrap_or(false)
        })
        .collect()
}

/// Evaluate both membership inequalities of one pair at a solution.
fn pair_holds(
    net: &RadialNetwork,
    program: &ConicProgram,
    solution: &Solution,
    sand: &DMatrix<f64>,
    l: usize,
    t: usize,
    reactive: bool,
) -> bool {
    let n = net.n_lines();
    let mut lhs = 0.0;
    for k in 0..n {
        lhs += sand[(l, k)] * solution.value(program, Quantity::CurrSq, k, t);
    }
    if lhs < -MEMBERSHIP_TOL {
        return false;
    }
    let (hat_q, lo_q) = if reactive {
        (Quantity::HatFlowQ, Quantity::LoFlowQ)
    } else {
        (Quantity::HatFlowP, Quantity::LoFlowP)
    };
    let hat = solution.value(program, hat_q, l, t).abs();
    let lo = solution.value(program, lo_q, l, t);
    hat <= lo + MEMBERSHIP_TOL
}

/// Membership evaluation over every pair of a solved program.
pub fn compute_activation_sets(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    program: &ConicProgram,
    solution: &Solution,
    slopes: &[(f64, f64)],
) -> Result<ActivationSets, ConditionError> {
    let mut sets = ActivationSets::default();
    for t in 0..program.n_timesteps {
        let active = activation_state(net, program, solution, t);
        let (sand_p, sand_q) = sensitivity_pair(net, topo, slopes, &active)?;
        for l in 0..net.n_lines() {
            if pair_holds(net, program, solution, &sand_p, l, t, false) {
                sets.wp.push((l, t));
            }
            if pair_holds(net, program, solution, &sand_q, l, t, true) {
                sets.wq.push((l, t));
            }
        }
    }
    Ok(sets)
}

/// Run the improvement loop starting from an unmodified droop-design
/// program. Returns the incumbent solution, the program it solves, and the
/// per-iteration trace. The incumbent is always an accepted solution.
pub fn refine_loop(
    net: &RadialNetwork,
    topo: &TopologyMatrices,
    base: &ConicProgram,
    slopes: &[(f64, f64)],
    solver_cfg: &SolverConfig,
    cfg: &RefineConfig,
) -> Result<(Solution, ConicProgram, RefinementTrace), RefineError> {
    let mut trace = RefinementTrace::default();

    let first = solve_misocp(base, solver_cfg)?;
    if !matches!(first.status, SolveStatus::Optimal | SolveStatus::GapLimit) {
        return Err(RefineError::NoIncumbent(first.status));
    }
    let mut sets = compute_activation_sets(net, topo, base, &first, slopes)?;
    trace.steps.push(RefinementStep {
        h: 1,
        objective: first.objective,
        wp_len: sets.wp.len(),
        wq_len: sets.wq.len(),
        consistent: true,
        accepted: true,
    });
    let mut incumbent = first;
    let mut incumbent_program = base.clone();
    let mut last_accepted = incumbent.objective;

    for h in 2..=cfg.max_iterations {
        // with empty sets the modified program equals the base program; the
        // repeat solve confirms the objective and the stop rule ends the loop
        let prev_sets = sets.clone();
        let program = apply_refinement(base, &prev_sets.wp, &prev_sets.wq)?;
        let solution = solve_misocp(&program, solver_cfg)?;
        if !matches!(solution.status, SolveStatus::Optimal | SolveStatus::GapLimit) {
            trace.steps.push(RefinementStep {
                h,
                objective: f64::INFINITY,
                wp_len: prev_sets.wp.len(),
                wq_len: prev_sets.wq.len(),
                consistent: false,
                accepted: false,
            });
            break;
        }

        // consistency: the inequalities that licensed each modification must
        // still hold at the new solution
        let mut consistent = true;
        'outer: for t in 0..program.n_timesteps {
            let active = activation_state(net, &program, &solution, t);
            let (sand_p, sand_q) = sensitivity_pair(net, topo, slopes, &active)?;
            for &(l, pt) in &prev_sets.wp {
                if pt == t && !pair_holds(net, &program, &solution, &sand_p, l, t, false) {
                    consistent = false;
                    break 'outer;
                }
            }
            for &(l, pt) in &prev_sets.wq {
                if pt == t && !pair_holds(net, &program, &solution, &sand_q, l, t, true) {
                    consistent = false;
                    break 'outer;
                }
            }
        }

        let accepted = consistent && solution.objective <= incumbent.objective + OBJECTIVE_TOL;
        sets = compute_activation_sets(net, topo, &program, &solution, slopes)?;
        trace.steps.push(RefinementStep {
            h,
            objective: solution.objective,
            wp_len: sets.wp.len(),
            wq_len: sets.wq.len(),
            consistent,
            accepted,
        });
        if accepted {
            let done = (solution.objective - last_accepted).abs() <= OBJECTIVE_TOL;
            last_accepted = solution.objective;
            if solution.objective <= incumbent.objective {
                incumbent = solution;
                incumbent_program = program;
            }
            if done {
                return Ok((incumbent, incumbent_program, trace));
            }
        }
        if h == cfg.max_iterations {
            trace.hit_cap = true;
        }
    }

    Ok((incumbent, incumbent_program, trace))
}
