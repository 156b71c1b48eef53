//! Balanced radial distribution network in per-unit quantities.
//!
//! Conventions: bus 0 is the slack with fixed squared voltage `v0`; every
//! non-slack bus `l` is the ending bus of exactly one line, and that line
//! shares the bus index. All voltages are squared magnitudes (p.u.²), all
//! currents are squared magnitudes, powers are per-unit on the system base.
//! Per-line vectors therefore have length `n_lines = n_buses - 1`, entry `i`
//! belonging to line/bus `i + 1`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closure identity `H (I - G) = I` must hold to this tolerance.
pub const CLOSURE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cycle detected at bus {bus}")]
    CycleDetected { bus: usize },
    #[error("bus {bus} is not connected to the slack")]
    DisconnectedBus { bus: usize },
    #[error("network failed radiality validation: {0}")]
    InvalidNetwork(String),
    #[error("non-positive base quantity: {0}")]
    NonPositiveBase(String),
    #[error("closure identity violated: max residual {residual:e}")]
    ClosureCheckFailed { residual: f64 },
}

/// Constant-power and constant-impedance demand plus voltage limits at a bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    /// Constant-power load, p.u.
    pub load_p: f64,
    pub load_q: f64,
    /// Constant-impedance load admittance (consumption `v*(g + jb)`), p.u.
    pub shunt_g: f64,
    pub shunt_b: f64,
    /// Squared voltage-magnitude bounds, p.u.²
    pub v_min: f64,
    pub v_max: f64,
    /// Squared target voltage and deviation threshold for the voltage
    /// objective, p.u.²
    pub v_target: f64,
    pub v_threshold: f64,
}

/// A distribution line; `id` equals its ending bus, `up` is the parent bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: usize,
    pub up: usize,
    /// Longitudinal impedance, p.u. `x` may be negative (capacitive branch).
    pub r: f64,
    pub x: f64,
    /// Squared ampacity, p.u.²
    pub i_max: f64,
    /// Flow caps on sending-end active/reactive power, p.u.
    pub p_max: f64,
    pub q_max: f64,
}

impl Line {
    pub fn z_sq(&self) -> f64 {
        self.r * self.r + self.x * self.x
    }
}

/// Capability envelope of an inverter-based generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbdgSpec {
    pub bus: usize,
    /// Dispatchable units carry droop regulators; non-dispatchable units
    /// inject their available power at unity power factor.
    pub dispatchable: bool,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub s_max: f64,
    /// Minimum allowed power factor, (0, 1].
    pub mu_min: f64,
    /// Column id of this unit's available-power profile.
    pub availability: String,
}

impl IbdgSpec {
    /// Slope of the power-factor wedge `|q| <= tan(acos(mu_min)) * p`.
    pub fn wedge_slope(&self) -> f64 {
        (1.0 - self.mu_min * self.mu_min).sqrt() / self.mu_min
    }
}

/// Voltage/power bases used for per-unit conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub v_base_kv: f64,
    pub s_base_mva: f64,
}

impl Bases {
    pub fn z_base_ohm(&self) -> f64 {
        self.v_base_kv * self.v_base_kv / self.s_base_mva
    }
}

/// A validated radial network in per-unit quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub ibdgs: Vec<IbdgSpec>,
    /// Squared slack voltage, p.u.²
    pub v0: f64,
    pub bases: Bases,
}

/// Structural problems found by [`validate_radial`].
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    CycleDetected { bus: usize },
    DisconnectedBus { bus: usize },
    NonContiguousIndex { what: String },
    InvalidField { what: String },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::CycleDetected { bus } => write!(f, "cycle detected at bus {bus}"),
            Diagnostic::DisconnectedBus { bus } => write!(f, "bus {bus} disconnected"),
            Diagnostic::NonContiguousIndex { what } => write!(f, "non-contiguous index: {what}"),
            Diagnostic::InvalidField { what } => write!(f, "invalid field: {what}"),
        }
    }
}

impl RadialNetwork {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// Number of lines; equals `n_buses - 1` on a valid network.
    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Line index (0-based) of the line ending at non-slack bus `bus`.
    pub fn line_of_bus(&self, bus: usize) -> usize {
        bus - 1
    }

    /// Bus id at the end of line index `idx`.
    pub fn bus_of_line(&self, idx: usize) -> usize {
        idx + 1
    }

    /// Child line indices per bus id (0..n_buses).
    pub fn child_lines(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.n_buses()];
        for (idx, line) in self.lines.iter().enumerate() {
            if line.up < children.len() {
                children[line.up].push(idx);
            }
        }
        children
    }

    /// Line indices ordered root-first (every line after its parent line).
    pub fn lines_root_first(&self) -> Vec<usize> {
        let children = self.child_lines();
        let mut order = Vec::with_capacity(self.n_lines());
        let mut stack: Vec<usize> = children[0].iter().rev().copied().collect();
        while let Some(idx) = stack.pop() {
            order.push(idx);
            let bus = self.bus_of_line(idx);
            stack.extend(children[bus].iter().rev());
        }
        order
    }

    pub fn r_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_lines(), self.lines.iter().map(|l| l.r))
    }

    pub fn x_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_lines(), self.lines.iter().map(|l| l.x))
    }

    pub fn z_sq_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_lines(), self.lines.iter().map(|l| l.z_sq()))
    }

    pub fn i_max_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_lines(), self.lines.iter().map(|l| l.i_max))
    }

    /// Per-line vector of the named bus field, entry `i` for bus `i + 1`.
    fn bus_vec(&self, f: impl Fn(&Bus) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.n_lines(), self.buses[1..].iter().map(f))
    }

    pub fn load_p_vec(&self) -> DVector<f64> {
        self.bus_vec(|b| b.load_p)
    }

    pub fn load_q_vec(&self) -> DVector<f64> {
        self.bus_vec(|b| b.load_q)
    }

    pub fn shunt_g_vec(&self) -> DVector<f64> {
        self.bus_vec(|b| b.shunt_g)
    }

    pub fn shunt_b_vec(&self) -> DVector<f64> {
        self.bus_vec(|b| b.shunt_b)
    }

    pub fn v_min_vec(&self) -> DVector<f64> {
        self.bus_vec(|b| b.v_min)
    }

    pub fn v_max_vec(&self) -> DVector<f64> {
        self.bus_vec(|b| b.v_max)
    }

    /// Indicator of lines whose parent is the slack bus.
    pub fn slack_adjacent_vec(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_lines(),
            self.lines.iter().map(|l| if l.up == 0 { 1.0 } else { 0.0 }),
        )
    }

    /// Indices into `ibdgs` of the droop-regulated (dispatchable) units.
    pub fn droop_units(&self) -> Vec<usize> {
        self.ibdgs
            .iter()
            .enumerate()
            .filter(|(_, u)| u.dispatchable)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Topology-derived matrices. `adjacency` is the directed line graph G
/// (`G[k][l] = 1` iff line k's ending bus is the parent of line l),
/// `closure` is `H = (I - G)^-1` (`H[k][l] = 1` iff line k lies on the
/// slack-to-l path), and `path_r`/`path_x` are the Gram-form path impedance
/// matrices `R = Hᵀ diag(r) H`, `X = Hᵀ diag(x) H`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMatrices {
    pub adjacency: DMatrix<f64>,
    pub closure: DMatrix<f64>,
    pub path_r: DMatrix<f64>,
    pub path_x: DMatrix<f64>,
}

/// Check that the line graph is a spanning tree rooted at bus 0 and that
/// indices are contiguous. Field-range invariants are reported as
/// `InvalidField` diagnostics.
pub fn validate_radial(net: &RadialNetwork) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let n_buses = net.buses.len();

    for (i, bus) in net.buses.iter().enumerate() {
        if bus.id != i {
            diags.push(Diagnostic::NonContiguousIndex {
                what: format!("bus at position {i} has id {}", bus.id),
            });
        }
        if !(bus.v_min > 0.0 && bus.v_min < bus.v_max) {
            diags.push(Diagnostic::InvalidField {
                what: format!("bus {}: require 0 < v_min < v_max", bus.id),
            });
        }
        if bus.shunt_g < 0.0 {
            diags.push(Diagnostic::InvalidField {
                what: format!("bus {}: shunt_g must be >= 0", bus.id),
            });
        }
        if bus.v_threshold < 0.0 {
            diags.push(Diagnostic::InvalidField {
                what: format!("bus {}: v_threshold must be >= 0", bus.id),
            });
        }
    }

    if net.lines.len() + 1 != n_buses {
        diags.push(Diagnostic::NonContiguousIndex {
            what: format!("{} lines for {} buses", net.lines.len(), n_buses),
        });
    }

    // One parent per non-slack bus; a second line ending at a bus closes a
    // cycle through its first parent.
    let mut seen_end = vec![false; n_buses];
    for (i, line) in net.lines.iter().enumerate() {
        if line.id == 0 || line.id >= n_buses || line.up >= n_buses {
            diags.push(Diagnostic::NonContiguousIndex {
                what: format!("line at position {i} references unknown bus"),
            });
            continue;
        }
        if seen_end[line.id] {
            diags.push(Diagnostic::CycleDetected { bus: line.id });
        } else if line.id != i + 1 {
            diags.push(Diagnostic::NonContiguousIndex {
                what: format!("line at position {i} has id {}", line.id),
            });
        }
        seen_end[line.id] = true;
        if line.r < 0.0 {
            diags.push(Diagnostic::InvalidField {
                what: format!("line {}: r must be >= 0", line.id),
            });
        }
        if line.i_max <= 0.0 {
            diags.push(Diagnostic::InvalidField {
                what: format!("line {}: i_max must be > 0", line.id),
            });
        }
    }

    // Walk each bus towards the slack; failing to reach it within n_buses
    // hops means a cycle or a dangling parent chain.
    for bus in 1..n_buses {
        if !seen_end.get(bus).copied().unwrap_or(false) {
            diags.push(Diagnostic::DisconnectedBus { bus });
            continue;
        }
        let mut cur = bus;
        let mut hops = 0;
        loop {
            if cur == 0 {
                break;
            }
            if hops > n_buses {
                diags.push(Diagnostic::CycleDetected { bus });
                break;
            }
            let line = &net.lines[net.line_of_bus(cur)];
            if line.id != cur {
                break; // already reported as non-contiguous
            }
            cur = line.up;
            hops += 1;
        }
    }

    for unit in &net.ibdgs {
        if unit.bus == 0 || unit.bus >= n_buses {
            diags.push(Diagnostic::NonContiguousIndex {
                what: format!("ibdg references unknown bus {}", unit.bus),
            });
        }
        if unit.s_max < unit.p_max {
            diags.push(Diagnostic::InvalidField {
                what: format!("ibdg at bus {}: s_max must be >= p_max", unit.bus),
            });
        }
        if !(unit.mu_min > 0.0 && unit.mu_min <= 1.0) {
            diags.push(Diagnostic::InvalidField {
                what: format!("ibdg at bus {}: mu_min must be in (0, 1]", unit.bus),
            });
        }
    }

    diags
}

/// Build G, H, R, X. H is assembled by walking each line's slack path and
/// then verified against the closure identity `H (I - G) = I`.
pub fn build_topology(net: &RadialNetwork) -> Result<TopologyMatrices, GridError> {
    let diags = validate_radial(net);
    for d in &diags {
        match d {
            Diagnostic::CycleDetected { bus } => {
                return Err(GridError::CycleDetected { bus: *bus })
            }
            Diagnostic::DisconnectedBus { bus } => {
                return Err(GridError::DisconnectedBus { bus: *bus })
            }
            _ => {}
        }
    }
    if !diags.is_empty() {
        return Err(GridError::InvalidNetwork(
            diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }

    let n = net.n_lines();
    let mut adjacency = DMatrix::zeros(n, n);
    for (l, line) in net.lines.iter().enumerate() {
        if line.up >= 1 {
            adjacency[(net.line_of_bus(line.up), l)] = 1.0;
        }
    }

    let mut closure = DMatrix::zeros(n, n);
    for l in 0..n {
        let mut bus = net.bus_of_line(l);
        while bus != 0 {
            let k = net.line_of_bus(bus);
            closure[(k, l)] = 1.0;
            bus = net.lines[k].up;
        }
    }

    let identity = DMatrix::identity(n, n);
    let residual = (&closure * (&identity - &adjacency) - &identity)
        .iter()
        .fold(0.0f64, |m, v| m.max(f64::abs(*v)));
    if residual > CLOSURE_TOL {
        return Err(GridError::ClosureCheckFailed { residual });
    }

    let r = net.r_vec();
    let x = net.x_vec();
    let weighted = |w: &DVector<f64>| -> DMatrix<f64> {
        let mut wh = closure.clone();
        for k in 0..n {
            let wk = w[k];
            for l in 0..n {
                wh[(k, l)] *= wk;
            }
        }
        closure.transpose() * wh
    };

    Ok(TopologyMatrices {
        path_r: weighted(&r),
        path_x: weighted(&x),
        adjacency,
        closure,
    })
}

/// Raw (physical-unit) case description as stored in case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCase {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub notes: String,
    pub bases: Bases,
    /// Slack voltage magnitude, p.u.
    pub slack_v0_pu: f64,
    pub buses: Vec<RawBus>,
    pub lines: Vec<RawLine>,
    #[serde(default)]
    pub ibdgs: Vec<RawIbdg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBus {
    pub id: usize,
    pub load_p_mw: f64,
    pub load_q_mvar: f64,
    #[serde(default)]
    pub shunt_g_s: f64,
    #[serde(default)]
    pub shunt_b_s: f64,
    /// Voltage-magnitude limits, p.u.
    pub v_min_pu: f64,
    pub v_max_pu: f64,
    pub v_target_pu: f64,
    /// Deviation threshold on the squared voltage, p.u.²
    pub v_threshold_pu2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLine {
    pub id: usize,
    pub up: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    /// Squared ampacity, p.u.² (already on the system base).
    pub i_max_pu2: f64,
    pub p_max_mw: f64,
    pub q_max_mvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawIbdg {
    pub bus: usize,
    pub dispatchable: bool,
    pub p_max_mw: f64,
    pub q_min_mvar: f64,
    pub q_max_mvar: f64,
    pub s_max_mva: f64,
    pub mu_min: f64,
    pub availability: String,
}

/// Convert a raw case to per-unit: impedances over `Z_base = V_base²/S_base`,
/// powers over `S_base`, voltage limits squared.
pub fn to_per_unit(raw: &RawCase) -> Result<RadialNetwork, GridError> {
    if raw.bases.v_base_kv <= 0.0 {
        return Err(GridError::NonPositiveBase(format!(
            "v_base_kv = {}",
            raw.bases.v_base_kv
        )));
    }
    if raw.bases.s_base_mva <= 0.0 {
        return Err(GridError::NonPositiveBase(format!(
            "s_base_mva = {}",
            raw.bases.s_base_mva
        )));
    }
    let z_base = raw.bases.z_base_ohm();
    let s_base = raw.bases.s_base_mva;

    let buses = raw
        .buses
        .iter()
        .map(|b| Bus {
            id: b.id,
            load_p: b.load_p_mw / s_base,
            load_q: b.load_q_mvar / s_base,
            shunt_g: b.shunt_g_s * z_base,
            shunt_b: b.shunt_b_s * z_base,
            v_min: b.v_min_pu * b.v_min_pu,
            v_max: b.v_max_pu * b.v_max_pu,
            v_target: b.v_target_pu * b.v_target_pu,
            v_threshold: b.v_threshold_pu2,
        })
        .collect();

    let lines = raw
        .lines
        .iter()
        .map(|l| Line {
            id: l.id,
            up: l.up,
            r: l.r_ohm / z_base,
            x: l.x_ohm / z_base,
            i_max: l.i_max_pu2,
            p_max: l.p_max_mw / s_base,
            q_max: l.q_max_mvar / s_base,
        })
        .collect();

    let ibdgs = raw
        .ibdgs
        .iter()
        .map(|u| IbdgSpec {
            bus: u.bus,
            dispatchable: u.dispatchable,
            p_max: u.p_max_mw / s_base,
            q_min: u.q_min_mvar / s_base,
            q_max: u.q_max_mvar / s_base,
            s_max: u.s_max_mva / s_base,
            mu_min: u.mu_min,
            availability: u.availability.clone(),
        })
        .collect();

    Ok(RadialNetwork {
        buses,
        lines,
        ibdgs,
        v0: raw.slack_v0_pu * raw.slack_v0_pu,
        bases: raw.bases,
    })
}

/// Inverse of [`to_per_unit`], used for round-trip checks and case export.
pub fn from_per_unit(net: &RadialNetwork, name: &str) -> RawCase {
    let z_base = net.bases.z_base_ohm();
    let s_base = net.bases.s_base_mva;
    RawCase {
        schema_version: crate::io::CASE_SCHEMA_VERSION,
        name: name.to_string(),
        notes: String::new(),
        bases: net.bases,
        slack_v0_pu: net.v0.sqrt(),
        buses: net
            .buses
            .iter()
            .map(|b| RawBus {
                id: b.id,
                load_p_mw: b.load_p * s_base,
                load_q_mvar: b.load_q * s_base,
                shunt_g_s: b.shunt_g / z_base,
                shunt_b_s: b.shunt_b / z_base,
                v_min_pu: b.v_min.sqrt(),
                v_max_pu: b.v_max.sqrt(),
                v_target_pu: b.v_target.sqrt(),
                v_threshold_pu2: b.v_threshold,
            })
            .collect(),
        lines: net
            .lines
            .iter()
            .map(|l| RawLine {
                id: l.id,
                up: l.up,
                r_ohm: l.r * z_base,
                x_ohm: l.x * z_base,
                i_max_pu2: l.i_max,
                p_max_mw: l.p_max * s_base,
                q_max_mvar: l.q_max * s_base,
            })
            .collect(),
        ibdgs: net
            .ibdgs
            .iter()
            .map(|u| RawIbdg {
                bus: u.bus,
                dispatchable: u.dispatchable,
                p_max_mw: u.p_max * s_base,
                q_min_mvar: u.q_min * s_base,
                q_max_mvar: u.q_max * s_base,
                s_max_mva: u.s_max * s_base,
                mu_min: u.mu_min,
                availability: u.availability.clone(),
            })
            .collect(),
    }
}
