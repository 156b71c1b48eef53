//! Conic solves and branch-and-bound over the activation binaries.
//!
//! Continuous programs go to Clarabel (primal-dual interior point with
//! Nesterov-Todd scaling); rotated cones are lowered to standard
//! second-order cones at this boundary only. The mixed-integer layer is a
//! deterministic single-worker best-first branch-and-bound: nodes are ordered
//! by (bound, id), branching picks the most fractional binary with ties
//! broken by (timestep, index).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use thiserror::Error;

use crate::program::{ConicProgram, LinExpr, Quantity, Sense, VarId};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("program still has {0} free binaries; fix them or use the mixed-integer solve")]
    FreeBinaries(usize),
    #[error("numerical breakdown in the conic solve: {0}")]
    NumericalBreakdown(String),
    #[error("program is unbounded below")]
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    /// Stopped with an incumbent whose gap exceeds the target.
    GapLimit,
    /// Iteration or node budget exhausted.
    IterLimit,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_iters: u32,
    /// Relative MIP gap at which the search stops.
    pub bb_gap: f64,
    pub bb_node_limit: usize,
    pub time_limit: Option<f64>,
    /// Integrality tolerance on binaries.
    pub int_tol: f64,
    pub presolve_fix_vars: bool,
    pub presolve_dedup_rows: bool,
    pub presolve_tighten_binaries: bool,
    /// Stream per-iteration residuals and per-node bounds to stdout.
    pub log: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: 1e-8,
            opt_tol: 1e-8,
            max_iters: 200,
            bb_gap: 1e-6,
            bb_node_limit: 10_000,
            time_limit: None,
            int_tol: 1e-6,
            presolve_fix_vars: true,
            presolve_dedup_rows: true,
            presolve_tighten_binaries: true,
            log: false,
        }
    }
}

/// Branch-and-bound statistics; bound/incumbent histories are recorded per
/// processed node.
#[derive(Debug, Clone, Default)]
pub struct BbStats {
    pub nodes: usize,
    pub best_bound: f64,
    pub bound_history: Vec<f64>,
    pub incumbent_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    /// Primal values keyed by variable id; empty when infeasible.
    pub values: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub bb: Option<BbStats>,
}

impl Solution {
    /// Convenience accessor through the program's variable map.
    pub fn value(&self, program: &ConicProgram, q: Quantity, idx: usize, t: usize) -> f64 {
        self.values[program.map.id(q, idx, t)]
    }

    /// Max violation of rows, cones, and bounds at the stored point.
    pub fn primal_residual(&self, program: &ConicProgram) -> f64 {
        let x = &self.values;
        let mut worst = 0.0f64;
        for (i, v) in program.vars.iter().enumerate() {
            if v.lb.is_finite() {
                worst = worst.max(v.lb - x[i]);
            }
            if v.ub.is_finite() {
                worst = worst.max(x[i] - v.ub);
            }
        }
        for row in &program.rows {
            let lhs: f64 = row.terms.iter().map(|(id, c)| c * x[*id]).sum();
            let gap = match row.sense {
                Sense::Le => lhs - row.rhs,
                Sense::Ge => row.rhs - lhs,
                Sense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(gap);
        }
        for cone in &program.cones {
            let u_sq: f64 = cone.u.iter().map(|e| e.eval(x).powi(2)).sum();
            let a = cone.a.eval(x);
            let b = cone.b.eval(x);
            worst = worst.max(u_sq - a * b).max(-a).max(-b);
        }
        worst
    }
}

/// Bound overrides applied per branch-and-bound node.
type BoundPatch = Vec<(VarId, f64, f64)>;

struct ClarabelModel {
    /// effective bounds after patches
    lb: Vec<f64>,
    ub: Vec<f64>,
}

impl ClarabelModel {
    fn new(program: &ConicProgram, patch: &BoundPatch) -> ClarabelModel {
        let mut lb: Vec<f64> = program.vars.iter().map(|v| v.lb).collect();
        let mut ub: Vec<f64> = program.vars.iter().map(|v| v.ub).collect();
        for &(id, l, u) in patch {
            lb[id] = lb[id].max(l);
            ub[id] = ub[id].min(u);
        }
        ClarabelModel { lb, ub }
    }
}

fn solve_clarabel(
    program: &ConicProgram,
    model: &ClarabelModel,
    config: &SolverConfig,
) -> Result<Solution, SolverError> {
    let n = program.n_vars();
    for i in 0..n {
        if model.lb[i] > model.ub[i] + 1e-15 {
            // contradictory box: trivially infeasible node
            return Ok(Solution {
                status: SolveStatus::Infeasible,
                values: Vec::new(),
                objective: f64::INFINITY,
                dual_objective: f64::INFINITY,
                iterations: 0,
                bb: None,
            });
        }
    }

    // fixed variables are substituted when the presolve toggle is on,
    // otherwise pinned with equality rows
    let fixed: Vec<Option<f64>> = (0..n)
        .map(|i| {
            if config.presolve_fix_vars && model.lb[i] == model.ub[i] {
                Some(model.lb[i])
            } else {
                None
            }
        })
        .collect();
    let mut col_of = vec![usize::MAX; n];
    let mut n_free = 0;
    for i in 0..n {
        if fixed[i].is_none() {
            col_of[i] = n_free;
            n_free += 1;
        }
    }

    // rows are gathered as triplets per constraint block; Clarabel wants
    // zero-cone rows first, then nonnegative, then the SOC blocks
    struct RowBuf {
        triplets: Vec<(usize, usize, f64)>,
        rhs: Vec<f64>,
    }
    impl RowBuf {
        fn push(
            &mut self,
            terms: &[(VarId, f64)],
            rhs: f64,
            fixed: &[Option<f64>],
            col_of: &[usize],
        ) {
            let row = self.rhs.len();
            let mut b = rhs;
            for (id, c) in terms {
                match fixed[*id] {
                    Some(val) => b -= c * val,
                    None => self.triplets.push((row, col_of[*id], *c)),
                }
            }
            self.rhs.push(b);
        }
    }

    let mut eq = RowBuf {
        triplets: Vec::new(),
        rhs: Vec::new(),
    };
    let mut ineq = RowBuf {
        triplets: Vec::new(),
        rhs: Vec::new(),
    };

    let mut seen_rows = std::collections::HashSet::new();
    for row in &program.rows {
        if config.presolve_dedup_rows {
            let mut terms = row.terms.clone();
            terms.sort_by_key(|(id, _)| *id);
            let key = format!(
                "{:?}|{}|{:?}",
                row.sense,
                row.rhs,
                terms
                    .iter()
                    .map(|(id, c)| (*id, c.to_bits()))
                    .collect::<Vec<_>>()
            );
            if !seen_rows.insert(key) {
                continue;
            }
        }
        match row.sense {
            Sense::Eq => eq.push(&row.terms, row.rhs, &fixed, &col_of),
            Sense::Le => ineq.push(&row.terms, row.rhs, &fixed, &col_of),
            Sense::Ge => {
                // -lhs <= -rhs
                let negated: Vec<(VarId, f64)> =
                    row.terms.iter().map(|(id, c)| (*id, -c)).collect();
                ineq.push(&negated, -row.rhs, &fixed, &col_of);
            }
        }
    }
    // pinned fixed variables when substitution is off
    if !config.presolve_fix_vars {
        for i in 0..n {
            if model.lb[i] == model.ub[i] {
                eq.push(&[(i, 1.0)], model.lb[i], &fixed, &col_of);
            }
        }
    }
    // finite bounds as nonnegative-cone rows
    for i in 0..n {
        if fixed[i].is_some() || model.lb[i] == model.ub[i] {
            continue;
        }
        if model.ub[i].is_finite() {
            ineq.push(&[(i, 1.0)], model.ub[i], &fixed, &col_of);
        }
        if model.lb[i].is_finite() {
            ineq.push(&[(i, -1.0)], -model.lb[i], &fixed, &col_of);
        }
    }

    // SOC lowering: ‖u‖² <= a·b  ≡  ‖(a − b, 2u)‖ <= a + b
    let mut soc_triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut soc_rhs: Vec<f64> = Vec::new();
    let mut soc_dims: Vec<usize> = Vec::new();
    {
        let mut push_expr = |row: usize, expr: &LinExpr, scale: f64, rhs_acc: &mut f64| {
            *rhs_acc += scale * expr.constant;
            for (id, c) in &expr.terms {
                match fixed[*id] {
                    Some(val) => *rhs_acc += scale * c * val,
                    None => soc_triplets.push((row, col_of[*id], -scale * c)),
                }
            }
        };
        for cone in &program.cones {
            let base = soc_rhs.len();
            soc_dims.push(cone.u.len() + 2);
            // s = b_vec - A x must equal the cone member expressions
            let mut acc = 0.0;
            push_expr(base, &cone.a, 1.0, &mut acc);
            push_expr(base, &cone.b, 1.0, &mut acc);
            soc_rhs.push(acc);
            let mut acc = 0.0;
            push_expr(base + 1, &cone.a, 1.0, &mut acc);
            push_expr(base + 1, &cone.b, -1.0, &mut acc);
            soc_rhs.push(acc);
            for (k, u) in cone.u.iter().enumerate() {
                let mut acc = 0.0;
                push_expr(base + 2 + k, u, 2.0, &mut acc);
                soc_rhs.push(acc);
            }
        }
    }

    let n_eq = eq.rhs.len();
    let n_ineq = ineq.rhs.len();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    triplets.extend(eq.triplets);
    triplets.extend(ineq.triplets.into_iter().map(|(r, c, v)| (r + n_eq, c, v)));
    triplets.extend(
        soc_triplets
            .into_iter()
            .map(|(r, c, v)| (r + n_eq + n_ineq, c, v)),
    );
    let mut b: Vec<f64> = Vec::with_capacity(n_eq + n_ineq + soc_rhs.len());
    b.extend(eq.rhs);
    b.extend(ineq.rhs);
    b.extend(soc_rhs);

    let m = b.len();
    // triplets to CSC
    triplets.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut colptr = vec![0usize; n_free + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    for (r, c, v) in triplets {
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..n_free {
        colptr[c + 1] += colptr[c];
    }
    let a_mat = CscMatrix::new(m, n_free, colptr, rowval, nzval);
    let p_mat = CscMatrix::zeros((n_free, n_free));

    let mut q = vec![0.0; n_free];
    let mut obj_fixed = program.obj_constant;
    for (id, c) in &program.objective {
        match fixed[*id] {
            Some(val) => obj_fixed += c * val,
            None => q[col_of[*id]] += c,
        }
    }

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }
    if n_ineq > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_ineq));
    }
    for d in soc_dims {
        cones.push(SupportedConeT::SecondOrderConeT(d));
    }

    let settings = DefaultSettings {
        verbose: config.log,
        max_iter: config.max_iters,
        tol_feas: config.feas_tol,
        tol_gap_abs: config.opt_tol,
        tol_gap_rel: config.opt_tol,
        time_limit: config.time_limit.unwrap_or(f64::INFINITY),
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings)
        .map_err(|e| SolverError::NumericalBreakdown(format!("{e:?}")))?;
    solver.solve();

    let status = match solver.solution.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(SolverError::Unbounded)
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime | SolverStatus::AlmostSolved => {
            SolveStatus::IterLimit
        }
        other => {
            return Err(SolverError::NumericalBreakdown(format!("{other:?}")));
        }
    };

    let mut values = vec![0.0; n];
    if status != SolveStatus::Infeasible {
        for i in 0..n {
            values[i] = match fixed[i] {
                Some(v) => v,
                None => solver.solution.x[col_of[i]],
            };
        }
    } else {
        values.clear();
    }
    let objective = if values.is_empty() {
        f64::INFINITY
    } else {
        program
            .objective
            .iter()
            .map(|(id, c)| c * values[*id])
            .sum::<f64>()
            + program.obj_constant
    };
    Ok(Solution {
        status,
        values,
        objective,
        // the backend optimizes q'x over free variables only; the fixed part
        // shifts both primal and dual objectives equally
        dual_objective: solver.solution.obj_val_dual + obj_fixed,
        iterations: solver.solution.iterations as usize,
        bb: None,
    })
}

/// Solve a continuous conic program. Binaries must be fixed (equal bounds);
/// use [`solve_misocp`] otherwise.
pub fn solve_socp(program: &ConicProgram, config: &SolverConfig) -> Result<Solution, SolverError> {
    let free = program
        .vars
        .iter()
        .filter(|v| v.binary && v.lb < v.ub)
        .count();
    if free > 0 {
        return Err(SolverError::FreeBinaries(free));
    }
    solve_clarabel(program, &ClarabelModel::new(program, &Vec::new()), config)
}

#[derive(Debug)]
struct Node {
    id: u64,
    bound: f64,
    fixes: BoundPatch,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}
impl Eq for Node {}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (bound, id) through reversed comparison
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.id.cmp(&self.id))
    }
}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Tighten binary bounds implied by single rows (a binary whose 0 or 1 state
/// contradicts a row given the other variables' bounds gets fixed).
fn tighten_binaries(program: &ConicProgram, lb: &mut [f64], ub: &mut [f64]) {
    for row in &program.rows {
        let binaries: Vec<usize> = row
            .terms
            .iter()
            .filter(|(id, _)| program.vars[*id].binary)
            .map(|(id, _)| *id)
            .collect();
        if binaries.len() != 1 {
            continue;
        }
        let y = binaries[0];
        if lb[y] == ub[y] {
            continue;
        }
        let c_y = row
            .terms
            .iter()
            .find(|(id, _)| *id == y)
            .map(|(_, c)| *c)
            .unwrap();
        let min_rest: f64 = row
            .terms
            .iter()
            .filter(|(id, _)| *id != y)
            .map(|(id, c)| {
                if *c >= 0.0 {
                    c * lb[*id]
                } else {
                    c * ub[*id]
                }
            })
            .sum();
        if !min_rest.is_finite() {
            continue;
        }
        match row.sense {
            Sense::Le => {
                // y = 0 impossible if min_rest > rhs
                if min_rest > row.rhs + 1e-12 {
                    lb[y] = 1.0;
                }
                if min_rest + c_y > row.rhs + 1e-12 {
                    ub[y] = 0.0;
                }
            }
            Sense::Ge => {
                let max_rest: f64 = row
                    .terms
                    .iter()
                    .filter(|(id, _)| *id != y)
                    .map(|(id, c)| {
                        if *c >= 0.0 {
                            c * ub[*id]
                        } else {
                            c * lb[*id]
                        }
                    })
                    .sum();
                if !max_rest.is_finite() {
                    continue;
                }
                if max_rest < row.rhs - 1e-12 {
                    lb[y] = 1.0;
                }
                if max_rest + c_y < row.rhs - 1e-12 {
                    ub[y] = 0.0;
                }
            }
            Sense::Eq => {}
        }
    }
}

/// Map each activation binary to the voltage/reference pair of its interval
/// row, recovered structurally from rows of the form
/// `v - v0p - M y <= 0`.
fn activation_structure(program: &ConicProgram) -> Vec<(VarId, VarId, VarId)> {
    let mut out = Vec::new();
    for row in &program.rows {
        if row.sense != Sense::Le || row.terms.len() != 3 || row.rhs != 0.0 {
            continue;
        }
        let mut y = None;
        let mut plus = None;
        let mut minus_unit = None;
        for &(id, c) in &row.terms {
            if program.vars[id].binary && c < 0.0 {
                y = Some(id);
            } else if c == 1.0 {
                plus = Some(id);
            } else if c == -1.0 {
                minus_unit = Some(id);
            }
        }
        if let (Some(y), Some(v), Some(v0)) = (y, plus, minus_unit) {
            out.push((y, v, v0));
        }
    }
    out
}

/// Fix binaries from a fractional relaxation and resolve; used to seed the
/// incumbent before branching.
fn rounding_heuristic(
    program: &ConicProgram,
    relaxed: &Solution,
    binaries: &[VarId],
    config: &SolverConfig,
) -> Result<Option<Solution>, SolverError> {
    let structure = activation_structure(program);
    let mut candidates: Vec<BoundPatch> = Vec::new();

    // structural rounding: active iff the relaxed voltage sits above the
    // relaxed reference
    if !structure.is_empty() {
        let mut patch = BoundPatch::new();
        for &(y, v, v0) in &structure {
            let on = relaxed.values[v] >= relaxed.values[v0];
            let val = if on { 1.0 } else { 0.0 };
            patch.push((y, val, val));
        }
        if patch.len() == binaries.len() {
            candidates.push(patch);
        }
    }
    // nearest-integer rounding
    candidates.push(
        binaries
            .iter()
            .map(|&y| {
                let val = if relaxed.values[y] >= 0.5 { 1.0 } else { 0.0 };
                (y, val, val)
            })
            .collect(),
    );
    // all-active fallback
    candidates.push(binaries.iter().map(|&y| (y, 1.0, 1.0)).collect());

    for patch in candidates {
        let sol = solve_clarabel(program, &ClarabelModel::new(program, &patch), config)?;
        if sol.status == SolveStatus::Optimal {
            return Ok(Some(sol));
        }
    }
    Ok(None)
}

/// Deterministic best-first branch-and-bound over the activation binaries.
pub fn solve_misocp(
    program: &ConicProgram,
    config: &SolverConfig,
) -> Result<Solution, SolverError> {
    let binaries = program.binaries();
    if binaries.is_empty() {
        return solve_socp(program, config);
    }

    // reverse lookup for the deterministic tie-break (timestep, index)
    let mut tie = vec![(usize::MAX, usize::MAX); program.n_vars()];
    for ((q, idx, t), id) in program.map.iter() {
        if *q == Quantity::Activation {
            tie[*id] = (*t, *idx);
        }
    }

    let mut root_patch: BoundPatch = Vec::new();
    if config.presolve_tighten_binaries {
        let mut lb: Vec<f64> = program.vars.iter().map(|v| v.lb).collect();
        let mut ub: Vec<f64> = program.vars.iter().map(|v| v.ub).collect();
        tighten_binaries(program, &mut lb, &mut ub);
        for &y in &binaries {
            if lb[y] > program.vars[y].lb || ub[y] < program.vars[y].ub {
                root_patch.push((y, lb[y], ub[y]));
            }
        }
    }

    let start = std::time::Instant::now();
    let mut stats = BbStats::default();
    let mut incumbent: Option<Solution> = None;
    let mut next_id: u64 = 1;
    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    heap.push(Node {
        id: 0,
        bound: f64::NEG_INFINITY,
        fixes: root_patch,
    });

    let gap_of = |inc: f64, bound: f64| -> f64 { (inc - bound).max(0.0) / inc.abs().max(1.0) };

    let mut exhausted = true;
    while let Some(node) = heap.pop() {
        let inc_obj = incumbent.as_ref().map(|s| s.objective);
        // best-first: the popped bound is the global best bound
        stats.best_bound = stats.best_bound.max(node.bound.max(f64::MIN));
        if let Some(inc) = inc_obj {
            if gap_of(inc, node.bound) <= config.bb_gap {
                break;
            }
        }
        if stats.nodes >= config.bb_node_limit {
            exhausted = false;
            break;
        }
        if let Some(limit) = config.time_limit {
            if start.elapsed().as_secs_f64() > limit {
                exhausted = false;
                break;
            }
        }

        stats.nodes += 1;
        let relaxed = solve_clarabel(program, &ClarabelModel::new(program, &node.fixes), config)?;
        let node_bound = node.bound.max(relaxed.objective);
        stats.bound_history.push(node.bound.max(stats.best_bound));
        stats
            .incumbent_history
            .push(inc_obj.unwrap_or(f64::INFINITY));
        if config.log {
            println!(
                "bb-node id={} depth={} bound={:.9e} incumbent={:.9e}",
                node.id,
                node.fixes.len(),
                node_bound,
                inc_obj.unwrap_or(f64::INFINITY)
            );
        }

        match relaxed.status {
            SolveStatus::Infeasible => continue,
            SolveStatus::Optimal | SolveStatus::IterLimit => {}
            SolveStatus::GapLimit => {}
        }
        if let Some(inc) = inc_obj {
            if node_bound >= inc - config.bb_gap * inc.abs().max(1.0) {
                continue; // dominated
            }
        }

        // fractionality check
        let mut worst_frac = 0.0;
        let mut branch_var: Option<VarId> = None;
        for &y in &binaries {
            let val = relaxed.values[y];
            let frac = val.min(1.0 - val).max(0.0);
            let better = frac > worst_frac + 1e-12
                || (frac > worst_frac - 1e-12
                    && branch_var.is_some_and(|b| tie[y] < tie[b]));
            if frac > config.int_tol && better {
                worst_frac = frac;
                branch_var = Some(y);
            }
        }

        // a fractional root seeds the incumbent through rounding so the
        // best-first search prunes from the start
        if node.id == 0 && branch_var.is_some() {
            if let Some(heur) = rounding_heuristic(program, &relaxed, &binaries, config)? {
                if config.log {
                    println!("bb-heuristic incumbent={:.9e}", heur.objective);
                }
                if incumbent
                    .as_ref()
                    .is_none_or(|s| heur.objective < s.objective)
                {
                    incumbent = Some(heur);
                }
            }
        }

        match branch_var {
            None => {
                // integral: candidate incumbent
                if inc_obj.is_none_or(|inc| relaxed.objective < inc - 1e-12) {
                    incumbent = Some(Solution {
                        bb: None,
                        ..relaxed
                    });
                }
            }
            Some(y) => {
                for (lo, hi) in [(0.0, 0.0), (1.0, 1.0)] {
                    let mut fixes = node.fixes.clone();
                    fixes.push((y, lo, hi));
                    heap.push(Node {
                        id: next_id,
                        bound: node_bound,
                        fixes,
                    });
                    next_id += 1;
                }
            }
        }
    }

    let final_bound = heap
        .iter()
        .map(|n| n.bound)
        .fold(f64::INFINITY, f64::min)
        .min(incumbent.as_ref().map(|s| s.objective).unwrap_or(f64::INFINITY));
    stats.best_bound = if final_bound.is_finite() {
        final_bound.max(stats.best_bound)
    } else {
        incumbent
            .as_ref()
            .map(|s| s.objective)
            .unwrap_or(stats.best_bound)
    };

    match incumbent {
        Some(mut sol) => {
            let gap = gap_of(sol.objective, stats.best_bound);
            sol.status = if exhausted || gap <= config.bb_gap {
                SolveStatus::Optimal
            } else {
                SolveStatus::GapLimit
            };
            sol.bb = Some(stats);
            Ok(sol)
        }
        None => Ok(Solution {
            status: if exhausted {
                SolveStatus::Infeasible
            } else {
                SolveStatus::IterLimit
            },
            values: Vec::new(),
            objective: f64::INFINITY,
            dual_objective: f64::INFINITY,
            iterations: 0,
            bb: Some(stats),
        }),
    }
}
