//! Conic program representation and the OPF compilers.
//!
//! Programs are built over named scalar variables with bounds, sparse linear
//! rows, and rotated second-order cones `‖u‖² ≤ a·b` whose members are affine
//! expressions. Three compilers share one emission path:
//!
//! * the plain relaxation: branch-flow equalities plus the relaxed current
//!   cone, with voltage and current limits imposed directly on `v` and `f`;
//! * the restricted relaxation: adds the lossless proxy system (hatted), the
//!   lower/upper bounding flow systems, the four-combination cone family for
//!   the current upper bound `f̄`, and moves the binding limits onto the
//!   conservative variables;
//! * the droop-design problem: multiple timesteps, shared droop references,
//!   mixed-integer activation of the volt-watt branch, and the deviation
//!   objective.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{RadialNetwork, TopologyMatrices};
use crate::scenario::Snapshot;

pub type VarId = usize;

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("big-M constant {m} cannot cover the value range {range} for {what}")]
    InfeasibleBigM { m: f64, range: f64, what: String },
    #[error("unknown (line, timestep) pair ({line}, {t}) in refinement set")]
    UnknownPair { line: usize, t: usize },
    #[error("program is not a droop-design program (missing {0})")]
    MissingQuantity(String),
}

/// Variable kinds addressable through the [`VariableMap`]. Flow-like kinds
/// are indexed by line, injection kinds by IBDG, droop references by droop
/// unit (timestep 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    FlowP,
    FlowQ,
    VoltSq,
    CurrSq,
    HatFlowP,
    HatFlowQ,
    HatVoltSq,
    LoFlowP,
    LoFlowQ,
    UpFlowP,
    UpFlowQ,
    UpCurrSq,
    InjP,
    InjQ,
    HatInjP,
    HatInjQ,
    VoltDev,
    Activation,
    RefVp,
    RefVq,
    RefQ0,
}

/// Bijective lookup from `(kind, index, timestep)` to variable ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableMap {
    lookup: HashMap<(Quantity, usize, usize), VarId>,
}

impl VariableMap {
    pub fn get(&self, q: Quantity, idx: usize, t: usize) -> Option<VarId> {
        self.lookup.get(&(q, idx, t)).copied()
    }

    /// Panics when the variable does not exist; use for quantities the
    /// program mode guarantees.
    pub fn id(&self, q: Quantity, idx: usize, t: usize) -> VarId {
        self.lookup[&(q, idx, t)]
    }

    pub fn insert(&mut self, q: Quantity, idx: usize, t: usize, id: VarId) {
        let old = self.lookup.insert((q, idx, t), id);
        debug_assert!(old.is_none(), "duplicate variable key");
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Quantity, usize, usize), &VarId)> {
        self.lookup.iter()
    }

    pub fn len(&self) -> usize {
        self.lookup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lookup.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDef {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
    pub binary: bool,
}

/// Affine expression over program variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(id: VarId) -> LinExpr {
        LinExpr {
            terms: vec![(id, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant(c: f64) -> LinExpr {
        LinExpr {
            terms: vec![],
            constant: c,
        }
    }

    /// Evaluate at a primal point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(id, c)| c * x[*id]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinRow {
    pub label: String,
    pub terms: Vec<(VarId, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// Identity of a cone within the program, used by the refinement surgery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeKind {
    /// Relaxed current equation of a line at a timestep.
    Relaxation { line: usize, t: usize },
    /// One of the four combinations bounding the current upper bound;
    /// `a_is_lo`/`b_is_lo` mark whether the P/Q member is the lower-bound
    /// flow variable.
    UpCurrent {
        line: usize,
        t: usize,
        a_is_lo: bool,
        b_is_lo: bool,
    },
    /// Apparent-power capability disc of an IBDG.
    Capability { unit: usize, t: usize },
}

/// Rotated second-order cone `‖u‖² ≤ a·b` with affine members.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedCone {
    pub label: String,
    pub kind: ConeKind,
    pub u: Vec<LinExpr>,
    pub a: LinExpr,
    pub b: LinExpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub w_pc: f64,
    pub w_pl: f64,
    pub w_v: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        // curtailment, losses, deviation
        ObjectiveWeights {
            w_pc: 0.6,
            w_pl: 0.3,
            w_v: 0.1,
        }
    }
}

/// Which relaxation family a program carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignMode {
    Ropf,
    Maropf,
}

/// A compiled conic program plus its variable map and bookkeeping needed to
/// decompose the objective afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub vars: Vec<VarDef>,
    pub rows: Vec<LinRow>,
    pub cones: Vec<RotatedCone>,
    /// Linear objective to minimize, plus a constant offset.
    pub objective: Vec<(VarId, f64)>,
    pub obj_constant: f64,
    pub map: VariableMap,
    pub n_timesteps: usize,
    pub mode: DesignMode,
    pub weights: ObjectiveWeights,
    /// Available power per timestep per IBDG (crate order); used for the
    /// curtailment part of the objective breakdown.
    pub avail_per_step: Vec<Vec<f64>>,
}

impl ConicProgram {
    fn new(mode: DesignMode, weights: ObjectiveWeights) -> ConicProgram {
        ConicProgram {
            vars: Vec::new(),
            rows: Vec::new(),
            cones: Vec::new(),
            objective: Vec::new(),
            obj_constant: 0.0,
            map: VariableMap::default(),
            n_timesteps: 0,
            mode,
            weights,
            avail_per_step: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add_var(
        &mut self,
        q: Quantity,
        idx: usize,
        t: usize,
        name: String,
        lb: f64,
        ub: f64,
        binary: bool,
    ) -> VarId {
        let id = self.vars.len();
        self.vars.push(VarDef {
            name,
            lb,
            ub,
            binary,
        });
        self.map.insert(q, idx, t, id);
        id
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn binaries(&self) -> Vec<VarId> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.binary)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace the objective with explicit linear terms.
    pub fn set_linear_objective(&mut self, terms: Vec<(VarId, f64)>, constant: f64) {
        self.objective = terms;
        self.obj_constant = constant;
    }

    /// Structural self-checks: every referenced variable exists, cone `a`/`b`
    /// members have nonnegative lower bounds, and no two linear rows are
    /// exact duplicates.
    pub fn check_consistency(&self) -> Result<(), String> {
        let n = self.vars.len();
        let check_expr = |e: &LinExpr| -> Result<(), String> {
            for (id, _) in &e.terms {
                if *id >= n {
                    return Err(format!("expression references unknown variable {id}"));
                }
            }
            Ok(())
        };
        let lower_bound = |e: &LinExpr| -> f64 {
            e.constant
                + e.terms
                    .iter()
                    .map(|(id, c)| {
                        if *c >= 0.0 {
                            c * self.vars[*id].lb
                        } else {
                            c * self.vars[*id].ub
                        }
                    })
                    .sum::<f64>()
        };
        for row in &self.rows {
            for (id, _) in &row.terms {
                if *id >= n {
                    return Err(format!("row {} references unknown variable {id}", row.label));
                }
            }
        }
        for cone in &self.cones {
            for u in &cone.u {
                check_expr(u)?;
            }
            check_expr(&cone.a)?;
            check_expr(&cone.b)?;
            if lower_bound(&cone.a) < 0.0 || lower_bound(&cone.b) < 0.0 {
                return Err(format!(
                    "cone {} has a scalar member without a nonnegative bound",
                    cone.label
                ));
            }
        }
        for (id, _) in &self.objective {
            if *id >= n {
                return Err(format!("objective references unknown variable {id}"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for row in &self.rows {
            let mut terms = row.terms.clone();
            terms.sort_by_key(|(id, _)| *id);
            let key = format!(
                "{:?}|{}|{}",
                row.sense,
                row.rhs,
                terms
                    .iter()
                    .map(|(id, c)| format!("{id}:{c}"))
                    .collect::<Vec<_>>()
                    .join(",")
            );
            if !seen.insert(key) {
                return Err(format!("duplicate row {}", row.label));
            }
        }
        Ok(())
    }

    /// Line-oriented text dump for external cross-checking.
    pub fn dump(&self) -> String {
        let fmt_expr = |e: &LinExpr| -> String {
            let mut s = format!("{}", e.constant);
            for (id, c) in &e.terms {
                s.push_str(&format!(" {id}:{c}"));
            }
            s
        };
        let mut out = String::from("# conic program dump v1\n");
        out.push_str(&format!(
            "# vars {} rows {} cones {} timesteps {}\n",
            self.vars.len(),
            self.rows.len(),
            self.cones.len(),
            self.n_timesteps
        ));
        for (i, v) in self.vars.iter().enumerate() {
            out.push_str(&format!(
                "var {i} {} {} {}{}\n",
                v.name,
                v.lb,
                v.ub,
                if v.binary { " bin" } else { "" }
            ));
        }
        for row in &self.rows {
            let sense = match row.sense {
                Sense::Le => "<=",
                Sense::Eq => "=",
                Sense::Ge => ">=",
            };
            out.push_str(&format!("row {} {} {}", row.label, sense, row.rhs));
            for (id, c) in &row.terms {
                out.push_str(&format!(" {id}:{c}"));
            }
            out.push('\n');
        }
        for cone in &self.cones {
            out.push_str(&format!(
                "cone {} a {} ; b {} ; u",
                cone.label,
                fmt_expr(&cone.a),
                fmt_expr(&cone.b)
            ));
            for u in &cone.u {
                out.push_str(&format!(" [{}]", fmt_expr(u)));
            }
            out.push('\n');
        }
        out.push_str("obj");
        for (id, c) in &self.objective {
            out.push_str(&format!(" {id}:{c}"));
        }
        out.push_str(&format!(" const {}\n", self.obj_constant));
        out
    }
}

/// Per-droop-unit slopes `(alpha_p, alpha_q)` in squared-voltage coordinates.
pub type DroopSlopes = [(f64, f64)];

struct Builder<'a> {
    net: &'a RadialNetwork,
    program: ConicProgram,
    maropf: bool,
}

const INF: f64 = f64::INFINITY;

impl<'a> Builder<'a> {
    fn new(net: &'a RadialNetwork, mode: DesignMode, weights: ObjectiveWeights) -> Builder<'a> {
        Builder {
            net,
            program: ConicProgram::new(mode, weights),
            maropf: mode == DesignMode::Maropf,
        }
    }

    fn var(&mut self, q: Quantity, idx: usize, t: usize, tag: &str, lb: f64, ub: f64) -> VarId {
        self.program
            .add_var(q, idx, t, format!("{tag}_{idx}_{t}"), lb, ub, false)
    }

    fn binary(&mut self, q: Quantity, idx: usize, t: usize, tag: &str) -> VarId {
        self.program
            .add_var(q, idx, t, format!("{tag}_{idx}_{t}"), 0.0, 1.0, true)
    }

    fn row(&mut self, label: String, terms: Vec<(VarId, f64)>, sense: Sense, rhs: f64) {
        self.program.rows.push(LinRow {
            label,
            terms,
            sense,
            rhs,
        });
    }

    /// Declare the per-line state variables of one timestep.
    fn flow_vars(&mut self, t: usize) {
        let net = self.net;
        for l in 0..net.n_lines() {
            let bus = &net.buses[net.bus_of_line(l)];
            self.var(Quantity::FlowP, l, t, "P", -INF, INF);
            self.var(Quantity::FlowQ, l, t, "Q", -INF, INF);
            if self.maropf {
                // upper voltage limit moves to the lossless proxy
                self.var(Quantity::VoltSq, l, t, "v", bus.v_min, INF);
                self.var(Quantity::CurrSq, l, t, "f", 0.0, INF);
                self.var(Quantity::HatFlowP, l, t, "Ph", -INF, INF);
                self.var(Quantity::HatFlowQ, l, t, "Qh", -INF, INF);
                self.var(Quantity::HatVoltSq, l, t, "vh", 0.0, bus.v_max);
                self.var(Quantity::LoFlowP, l, t, "Plo", -INF, INF);
                self.var(Quantity::LoFlowQ, l, t, "Qlo", -INF, INF);
                self.var(Quantity::UpFlowP, l, t, "Pup", -INF, net.lines[l].p_max);
                self.var(Quantity::UpFlowQ, l, t, "Qup", -INF, net.lines[l].q_max);
                self.var(Quantity::UpCurrSq, l, t, "fup", 0.0, net.lines[l].i_max);
            } else {
                self.var(Quantity::VoltSq, l, t, "v", bus.v_min, bus.v_max);
                self.var(Quantity::CurrSq, l, t, "f", 0.0, net.lines[l].i_max);
            }
        }
    }

    /// Kirchhoff rows and the relaxed current cone for one timestep.
    /// `inj` maps an IBDG index to its (p, q) variable pair.
    fn flow_rows(&mut self, t: usize, snap: &Snapshot, inj: &[(VarId, VarId)]) {
        let net = self.net;
        let children = net.child_lines();
        let map = self.program.map.clone();
        for l in 0..net.n_lines() {
            let line = net.lines[l].clone();
            let bus_id = net.bus_of_line(l);
            let bus = net.buses[bus_id].clone();
            let p = map.id(Quantity::FlowP, l, t);
            let q = map.id(Quantity::FlowQ, l, t);
            let v = map.id(Quantity::VoltSq, l, t);
            let f = map.id(Quantity::CurrSq, l, t);

            // sending-end balance: P - r f - g v - sum(child P) + sum(p^g) = load_p
            let mut terms_p = vec![(p, 1.0), (f, -line.r), (v, -bus.shunt_g)];
            let mut terms_q = vec![(q, 1.0), (f, -line.x), (v, -bus.shunt_b)];
            for &m in &children[bus_id] {
                terms_p.push((map.id(Quantity::FlowP, m, t), -1.0));
                terms_q.push((map.id(Quantity::FlowQ, m, t), -1.0));
            }
            for (u, unit) in net.ibdgs.iter().enumerate() {
                if unit.bus == bus_id {
                    terms_p.push((inj[u].0, 1.0));
                    terms_q.push((inj[u].1, 1.0));
                }
            }
            self.row(
                format!("balance_p_{l}_{t}"),
                terms_p,
                Sense::Eq,
                snap.load_p[l],
            );
            self.row(
                format!("balance_q_{l}_{t}"),
                terms_q,
                Sense::Eq,
                snap.load_q[l],
            );

            // voltage drop: v - v_up + 2 r P + 2 x Q - |z|^2 f = 0
            let mut terms_v = vec![
                (v, 1.0),
                (p, 2.0 * line.r),
                (q, 2.0 * line.x),
                (f, -line.z_sq()),
            ];
            let rhs = if line.up == 0 {
                net.v0
            } else {
                terms_v.push((map.id(Quantity::VoltSq, net.line_of_bus(line.up), t), -1.0));
                0.0
            };
            self.row(format!("voltage_{l}_{t}"), terms_v, Sense::Eq, rhs);

            // relaxed current equation as a rotated cone; the denominator is
            // the parent-bus voltage, matching the sending-end flow definition
            let b_expr = if line.up == 0 {
                LinExpr::constant(net.v0)
            } else {
                LinExpr::var(map.id(Quantity::VoltSq, net.line_of_bus(line.up), t))
            };
            self.program.cones.push(RotatedCone {
                label: format!("relax_{l}_{t}"),
                kind: ConeKind::Relaxation { line: l, t },
                u: vec![LinExpr::var(p), LinExpr::var(q)],
                a: LinExpr::var(f),
                b: b_expr,
            });
        }
    }

    /// The restricted systems of one timestep: lossless proxy flows, flow
    /// bounds, and the four-combination cone family for the current upper
    /// bound. `hat_inj` maps an IBDG index to the injections used by the
    /// proxy system (the plain pair unless droop decouples them).
    fn restricted_rows(
        &mut self,
        t: usize,
        snap: &Snapshot,
        inj: &[(VarId, VarId)],
        hat_inj: &[(VarId, VarId)],
    ) {
        let net = self.net;
        let children = net.child_lines();
        let map = self.program.map.clone();
        for l in 0..net.n_lines() {
            let line = net.lines[l].clone();
            let bus_id = net.bus_of_line(l);
            let bus = net.buses[bus_id].clone();
            let p = map.id(Quantity::FlowP, l, t);
            let q = map.id(Quantity::FlowQ, l, t);
            let v = map.id(Quantity::VoltSq, l, t);
            let p_hat = map.id(Quantity::HatFlowP, l, t);
            let q_hat = map.id(Quantity::HatFlowQ, l, t);
            let v_hat = map.id(Quantity::HatVoltSq, l, t);
            let p_lo = map.id(Quantity::LoFlowP, l, t);
            let q_lo = map.id(Quantity::LoFlowQ, l, t);
            let p_up = map.id(Quantity::UpFlowP, l, t);
            let q_up = map.id(Quantity::UpFlowQ, l, t);
            let f_up = map.id(Quantity::UpCurrSq, l, t);

            // lossless proxy balance, shunt power from the proxy voltage
            let mut terms_ph = vec![(p_hat, 1.0), (v_hat, -bus.shunt_g)];
            let mut terms_qh = vec![(q_hat, 1.0), (v_hat, -bus.shunt_b)];
            // lower bounds: no loss term, shunt power from the true voltage
            let mut terms_pl = vec![(p_lo, 1.0), (v, -bus.shunt_g)];
            let mut terms_ql = vec![(q_lo, 1.0), (v, -bus.shunt_b)];
            // upper bounds: loss term from the current upper bound
            let mut terms_pu = vec![(p_up, 1.0), (v, -bus.shunt_g), (f_up, -line.r)];
            let mut terms_qu = vec![(q_up, 1.0), (v, -bus.shunt_b), (f_up, -line.x)];
            for &m in &children[bus_id] {
                terms_ph.push((map.id(Quantity::HatFlowP, m, t), -1.0));
                terms_qh.push((map.id(Quantity::HatFlowQ, m, t), -1.0));
                terms_pl.push((map.id(Quantity::LoFlowP, m, t), -1.0));
                terms_ql.push((map.id(Quantity::LoFlowQ, m, t), -1.0));
                terms_pu.push((map.id(Quantity::UpFlowP, m, t), -1.0));
                terms_qu.push((map.id(Quantity::UpFlowQ, m, t), -1.0));
            }
            for (u, unit) in net.ibdgs.iter().enumerate() {
                if unit.bus == bus_id {
                    terms_ph.push((hat_inj[u].0, 1.0));
                    terms_qh.push((hat_inj[u].1, 1.0));
                    terms_pl.push((inj[u].0, 1.0));
                    terms_ql.push((inj[u].1, 1.0));
                    terms_pu.push((inj[u].0, 1.0));
                    terms_qu.push((inj[u].1, 1.0));
                }
            }
            self.row(format!("hat_p_{l}_{t}"), terms_ph, Sense::Eq, snap.load_p[l]);
            self.row(format!("hat_q_{l}_{t}"), terms_qh, Sense::Eq, snap.load_q[l]);
            self.row(format!("lo_p_{l}_{t}"), terms_pl, Sense::Eq, snap.load_p[l]);
            self.row(format!("lo_q_{l}_{t}"), terms_ql, Sense::Eq, snap.load_q[l]);
            self.row(format!("up_p_{l}_{t}"), terms_pu, Sense::Eq, snap.load_p[l]);
            self.row(format!("up_q_{l}_{t}"), terms_qu, Sense::Eq, snap.load_q[l]);

            // lossless voltage drop
            let mut terms_vh = vec![(v_hat, 1.0), (p_hat, 2.0 * line.r), (q_hat, 2.0 * line.x)];
            let rhs = if line.up == 0 {
                net.v0
            } else {
                terms_vh.push((
                    map.id(Quantity::HatVoltSq, net.line_of_bus(line.up), t),
                    -1.0,
                ));
                0.0
            };
            self.row(format!("hat_voltage_{l}_{t}"), terms_vh, Sense::Eq, rhs);

            // the true flows stay below their upper bounds
            self.row(
                format!("cap_p_{l}_{t}"),
                vec![(p, 1.0), (p_up, -1.0)],
                Sense::Le,
                0.0,
            );
            self.row(
                format!("cap_q_{l}_{t}"),
                vec![(q, 1.0), (q_up, -1.0)],
                Sense::Le,
                0.0,
            );

            // four-combination cone family against the parent voltage
            let b_expr = if line.up == 0 {
                LinExpr::constant(net.v0)
            } else {
                LinExpr::var(map.id(Quantity::VoltSq, net.line_of_bus(line.up), t))
            };
            for (a_is_lo, a_var) in [(false, p_up), (true, p_lo)] {
                for (b_is_lo, bq_var) in [(false, q_up), (true, q_lo)] {
                    self.program.cones.push(RotatedCone {
                        label: format!(
                            "fup_{l}_{t}_{}{}",
                            if a_is_lo { "lo" } else { "up" },
                            if b_is_lo { "lo" } else { "up" }
                        ),
                        kind: ConeKind::UpCurrent {
                            line: l,
                            t,
                            a_is_lo,
                            b_is_lo,
                        },
                        u: vec![LinExpr::var(a_var), LinExpr::var(bq_var)],
                        a: LinExpr::var(f_up),
                        b: b_expr.clone(),
                    });
                }
            }
        }
    }

    /// Injection variables of one timestep with the capability region of
    /// each unit. Non-dispatchable units inject their available power at
    /// unity power factor.
    fn injection_vars(&mut self, t: usize, snap: &Snapshot) -> Vec<(VarId, VarId)> {
        let net = self.net;
        let mut pairs = Vec::with_capacity(net.ibdgs.len());
        for (u, unit) in net.ibdgs.iter().enumerate() {
            let unit = unit.clone();
            if !unit.dispatchable {
                let avail = snap.avail[u];
                let p = self.var(Quantity::InjP, u, t, "pg", avail, avail);
                let q = self.var(Quantity::InjQ, u, t, "qg", 0.0, 0.0);
                pairs.push((p, q));
                continue;
            }
            let p_cap = unit.p_max.min(snap.avail[u]);
            let p = self.var(Quantity::InjP, u, t, "pg", 0.0, p_cap);
            let q = self.var(Quantity::InjQ, u, t, "qg", unit.q_min, unit.q_max);
            self.capability_rows(t, u, &unit, p, q);
            pairs.push((p, q));
        }
        pairs
    }

    /// Power-factor wedge and apparent-power disc for one unit.
    fn capability_rows(
        &mut self,
        t: usize,
        u: usize,
        unit: &crate::grid::IbdgSpec,
        p: VarId,
        q: VarId,
    ) {
        let wedge = unit.wedge_slope();
        self.row(
            format!("wedge_hi_{u}_{t}"),
            vec![(q, 1.0), (p, -wedge)],
            Sense::Le,
            0.0,
        );
        self.row(
            format!("wedge_lo_{u}_{t}"),
            vec![(q, -1.0), (p, -wedge)],
            Sense::Le,
            0.0,
        );
        self.program.cones.push(RotatedCone {
            label: format!("smax_{u}_{t}"),
            kind: ConeKind::Capability { unit: u, t },
            u: vec![LinExpr::var(p), LinExpr::var(q)],
            a: LinExpr::constant(unit.s_max),
            b: LinExpr::constant(unit.s_max),
        });
    }

    /// Weighted objective over all timesteps emitted so far.
    fn weighted_objective(&mut self, with_deviation: bool) {
        let net = self.net;
        let w = self.program.weights;
        let mut terms: Vec<(VarId, f64)> = Vec::new();
        let mut constant = 0.0;
        for t in 0..self.program.n_timesteps {
            for (u, unit) in net.ibdgs.iter().enumerate() {
                if unit.dispatchable {
                    terms.push((self.program.map.id(Quantity::InjP, u, t), -w.w_pc));
                    constant += w.w_pc * self.program.avail_per_step[t][u];
                }
            }
            for l in 0..net.n_lines() {
                let f = self.program.map.id(Quantity::CurrSq, l, t);
                terms.push((f, w.w_pl * net.lines[l].r));
                if with_deviation {
                    terms.push((self.program.map.id(Quantity::VoltDev, l, t), w.w_v));
                }
            }
        }
        self.program.objective = terms;
        self.program.obj_constant = constant;
    }
}

/// Compile the plain relaxed OPF for a single snapshot: branch-flow
/// equalities, the relaxed current cone, and limits imposed directly on the
/// voltage and current variables.
pub fn build_ropf(
    net: &RadialNetwork,
    _topo: &TopologyMatrices,
    snap: &Snapshot,
    weights: ObjectiveWeights,
) -> ConicProgram {
    let mut b = Builder::new(net, DesignMode::Ropf, weights);
    b.program.n_timesteps = 1;
    b.program.avail_per_step = vec![snap.avail.clone()];
    b.flow_vars(0);
    let inj = b.injection_vars(0, snap);
    b.flow_rows(0, snap, &inj);
    b.weighted_objective(false);
    b.program
}

/// Compile the restricted relaxation for a single snapshot.
pub fn build_maropf(
    net: &RadialNetwork,
    _topo: &TopologyMatrices,
    snap: &Snapshot,
    weights: ObjectiveWeights,
) -> ConicProgram {
    let mut b = Builder::new(net, DesignMode::Maropf, weights);
    b.program.n_timesteps = 1;
    b.program.avail_per_step = vec![snap.avail.clone()];
    b.flow_vars(0);
    let inj = b.injection_vars(0, snap);
    b.flow_rows(0, snap, &inj);
    b.restricted_rows(0, snap, &inj, &inj);
    b.weighted_objective(false);
    b.program
}

/// Compile the multi-period droop-design problem. `slopes` carries the
/// given droop slopes per droop unit; the decision variables are the shared
/// references (squared-voltage and reactive) plus the per-step activation
/// binaries and injections. `mode` selects the restricted (default) or the
/// plain-relaxation variant used for comparison studies.
pub fn build_droop_design(
    net: &RadialNetwork,
    _topo: &TopologyMatrices,
    steps: &[Snapshot],
    slopes: &DroopSlopes,
    weights: ObjectiveWeights,
    mode: DesignMode,
) -> Result<ConicProgram, ProgramError> {
    assert!(!steps.is_empty(), "droop design needs at least one timestep");
    let droop_units = net.droop_units();
    assert_eq!(slopes.len(), droop_units.len());

    let mut b = Builder::new(net, mode, weights);
    b.program.n_timesteps = steps.len();
    b.program.avail_per_step = steps.iter().map(|s| s.avail.clone()).collect();

    // shared droop references
    for (k, &u) in droop_units.iter().enumerate() {
        let unit = &net.ibdgs[u];
        let bus = &net.buses[unit.bus];
        b.var(Quantity::RefVp, k, 0, "v0p", bus.v_min, bus.v_max);
        b.var(Quantity::RefVq, k, 0, "v0q", bus.v_min, bus.v_max);
        b.var(Quantity::RefQ0, k, 0, "qg0", unit.q_min, unit.q_max);
    }

    for (t, snap) in steps.iter().enumerate() {
        b.flow_vars(t);
        // voltage deviation epigraph variables for every bus
        for l in 0..net.n_lines() {
            b.var(Quantity::VoltDev, l, t, "vdev", 0.0, INF);
        }

        // injections: droop-coupled for droop units, boxes otherwise
        let mut inj = Vec::with_capacity(net.ibdgs.len());
        let mut hat_inj = Vec::with_capacity(net.ibdgs.len());
        for (u, unit) in net.ibdgs.iter().enumerate() {
            let unit = unit.clone();
            if !unit.dispatchable {
                let avail = snap.avail[u];
                let p = b.var(Quantity::InjP, u, t, "pg", avail, avail);
                let q = b.var(Quantity::InjQ, u, t, "qg", 0.0, 0.0);
                inj.push((p, q));
                hat_inj.push((p, q));
            } else {
                // either activation state keeps p at or below the available
                // power (idle pins it, active subtracts a nonnegative term),
                // so the box carries that cap; the proxy-side injection has
                // no such bound since the proxy voltage may sit below the
                // reference
                let p_cap = unit.p_max.min(snap.avail[u]);
                let p = b.var(Quantity::InjP, u, t, "pg", -INF, p_cap);
                let q = b.var(Quantity::InjQ, u, t, "qg", unit.q_min, unit.q_max);
                b.capability_rows(t, u, &unit, p, q);
                inj.push((p, q));
                if mode == DesignMode::Maropf {
                    let ph = b.var(Quantity::HatInjP, u, t, "pgh", -INF, INF);
                    let qh = b.var(Quantity::HatInjQ, u, t, "qgh", -INF, INF);
                    hat_inj.push((ph, qh));
                } else {
                    hat_inj.push((p, q));
                }
            }
        }

        b.flow_rows(t, snap, &inj);
        if mode == DesignMode::Maropf {
            b.restricted_rows(t, snap, &inj, &hat_inj);
        }

        // droop coupling rows
        for (k, &u) in droop_units.iter().enumerate() {
            let unit = &net.ibdgs[u];
            let bus = &net.buses[unit.bus];
            let l = net.line_of_bus(unit.bus);
            let (alpha_p, alpha_q) = slopes[k];
            let avail = snap.avail[u];

            let m_v = 2.0 * (bus.v_max - bus.v_min);
            // the activation interval itself enforces |v - v0p| <= m_v, so
            // the watt rows only ever need to absorb alpha_p * m_v
            let m_p = alpha_p * m_v;
            // the proxy voltage has no activation interval; its rows keep
            // the coarser constant
            let m_ph = 2.0 * (unit.p_max + alpha_p * bus.v_max);
            if m_v < bus.v_max - bus.v_min {
                return Err(ProgramError::InfeasibleBigM {
                    m: m_v,
                    range: bus.v_max - bus.v_min,
                    what: format!("activation at bus {}", unit.bus),
                });
            }
            if m_ph < unit.p_max {
                return Err(ProgramError::InfeasibleBigM {
                    m: m_ph,
                    range: unit.p_max,
                    what: format!("volt-watt at bus {}", unit.bus),
                });
            }

            let v = b.program.map.id(Quantity::VoltSq, l, t);
            let y = b.binary(Quantity::Activation, k, t, "y");
            let v0p = b.program.map.id(Quantity::RefVp, k, 0);
            let v0q = b.program.map.id(Quantity::RefVq, k, 0);
            let qg0 = b.program.map.id(Quantity::RefQ0, k, 0);
            let (pg, qg) = inj[u];

            // volt-var: q = qg0 - alpha_q (v - v0q)
            b.row(
                format!("droop_q_{k}_{t}"),
                vec![(qg, 1.0), (v, alpha_q), (v0q, -alpha_q), (qg0, -1.0)],
                Sense::Eq,
                0.0,
            );
            // activation interval: v0p - M(1-y) <= v <= v0p + M y
            b.row(
                format!("act_lo_{k}_{t}"),
                vec![(v, 1.0), (v0p, -1.0), (y, -m_v)],
                Sense::Ge,
                -m_v,
            );
            b.row(
                format!("act_hi_{k}_{t}"),
                vec![(v, 1.0), (v0p, -1.0), (y, -m_v)],
                Sense::Le,
                0.0,
            );
            // active branch: |p - (avail - alpha_p (v - v0p))| <= M (1-y)
            b.row(
                format!("watt_on_hi_{k}_{t}"),
                vec![(pg, 1.0), (v, alpha_p), (v0p, -alpha_p), (y, m_p)],
                Sense::Le,
                avail + m_p,
            );
            b.row(
                format!("watt_on_lo_{k}_{t}"),
                vec![(pg, 1.0), (v, alpha_p), (v0p, -alpha_p), (y, -m_p)],
                Sense::Ge,
                avail - m_p,
            );
            // idle branch: |p - avail| <= M y
            b.row(
                format!("watt_off_hi_{k}_{t}"),
                vec![(pg, 1.0), (y, -m_p)],
                Sense::Le,
                avail,
            );
            b.row(
                format!("watt_off_lo_{k}_{t}"),
                vec![(pg, 1.0), (y, m_p)],
                Sense::Ge,
                avail,
            );

            if mode == DesignMode::Maropf {
                // the proxy-side droop shares the binaries
                let v_hat = b.program.map.id(Quantity::HatVoltSq, l, t);
                let (pgh, qgh) = hat_inj[u];
                b.row(
                    format!("droop_qh_{k}_{t}"),
                    vec![(qgh, 1.0), (v_hat, alpha_q), (v0q, -alpha_q), (qg0, -1.0)],
                    Sense::Eq,
                    0.0,
                );
                b.row(
                    format!("watt_on_hi_h_{k}_{t}"),
                    vec![(pgh, 1.0), (v_hat, alpha_p), (v0p, -alpha_p), (y, m_ph)],
                    Sense::Le,
                    avail + m_ph,
                );
                b.row(
                    format!("watt_on_lo_h_{k}_{t}"),
                    vec![(pgh, 1.0), (v_hat, alpha_p), (v0p, -alpha_p), (y, -m_ph)],
                    Sense::Ge,
                    avail - m_ph,
                );
                b.row(
                    format!("watt_off_hi_h_{k}_{t}"),
                    vec![(pgh, 1.0), (y, -m_ph)],
                    Sense::Le,
                    avail,
                );
                b.row(
                    format!("watt_off_lo_h_{k}_{t}"),
                    vec![(pgh, 1.0), (y, m_ph)],
                    Sense::Ge,
                    avail,
                );
            }
        }

        // deviation epigraph: vdev >= |v - v_target| - threshold, one pair
        // of half-planes per bus
        for l in 0..net.n_lines() {
            let bus = &net.buses[net.bus_of_line(l)];
            let v = b.program.map.id(Quantity::VoltSq, l, t);
            let d = b.program.map.id(Quantity::VoltDev, l, t);
            b.row(
                format!("dev_hi_{l}_{t}"),
                vec![(d, 1.0), (v, -1.0)],
                Sense::Ge,
                -(bus.v_target + bus.v_threshold),
            );
            b.row(
                format!("dev_lo_{l}_{t}"),
                vec![(d, 1.0), (v, 1.0)],
                Sense::Ge,
                bus.v_target - bus.v_threshold,
            );
        }
    }

    b.weighted_objective(true);
    Ok(b.program)
}

/// Rewrite every four-combination cone family into the receiving-end form:
/// upper-bound members become `P̄ - r f̄` / `Q̄ - x f̄` and the denominator
/// moves from the parent voltage to the line's own ending-bus voltage. The
/// printed sending-end form stays the default; this variant exists for
/// cross-checking the two readings against each other.
pub fn with_receiving_end_cones(program: &ConicProgram, net: &RadialNetwork) -> ConicProgram {
    let mut out = program.clone();
    for cone in out.cones.iter_mut() {
        if let ConeKind::UpCurrent {
            line,
            t,
            a_is_lo,
            b_is_lo,
        } = cone.kind
        {
            let f_up = program.map.id(Quantity::UpCurrSq, line, t);
            if !a_is_lo {
                cone.u[0] = LinExpr {
                    terms: vec![
                        (program.map.id(Quantity::UpFlowP, line, t), 1.0),
                        (f_up, -net.lines[line].r),
                    ],
                    constant: 0.0,
                };
            }
            if !b_is_lo {
                cone.u[1] = LinExpr {
                    terms: vec![
                        (program.map.id(Quantity::UpFlowQ, line, t), 1.0),
                        (f_up, -net.lines[line].x),
                    ],
                    constant: 0.0,
                };
            }
            cone.b = LinExpr::var(program.map.id(Quantity::VoltSq, line, t));
        }
    }
    out
}

/// Rewrite the four-combination cone families for the given `(line, t)`
/// pairs: members using the lower-bound flow are replaced by the lossless
/// proxy flow on the P side (`wp`) or the Q side (`wq`).
pub fn apply_refinement(
    program: &ConicProgram,
    wp: &[(usize, usize)],
    wq: &[(usize, usize)],
) -> Result<ConicProgram, ProgramError> {
    let mut out = program.clone();
    let check = |line: usize, t: usize| -> Result<(), ProgramError> {
        if program.map.get(Quantity::UpCurrSq, line, t).is_none() {
            return Err(ProgramError::UnknownPair { line, t });
        }
        if program.map.get(Quantity::HatFlowP, line, t).is_none() {
            return Err(ProgramError::MissingQuantity("proxy flows".into()));
        }
        Ok(())
    };
    for &(l, t) in wp.iter().chain(wq.iter()) {
        check(l, t)?;
    }
    let in_set = |set: &[(usize, usize)], l: usize, t: usize| set.contains(&(l, t));

    for cone in out.cones.iter_mut() {
        if let ConeKind::UpCurrent {
            line,
            t,
            a_is_lo,
            b_is_lo,
        } = cone.kind
        {
            if a_is_lo && in_set(wp, line, t) {
                cone.u[0] = LinExpr::var(program.map.id(Quantity::HatFlowP, line, t));
            }
            if b_is_lo && in_set(wq, line, t) {
                cone.u[1] = LinExpr::var(program.map.id(Quantity::HatFlowQ, line, t));
            }
        }
    }
    Ok(out)
}
