//! Case and profile file ingestion plus the bundled benchmark cases.
//!
//! Case files are JSON documents matching [`crate::grid::RawCase`]
//! (schema version [`CASE_SCHEMA_VERSION`]). Profiles are comma-delimited
//! text with a header row: first column `time` with "HH:MM" labels, then one
//! column per bus id (load multipliers) or per availability id (IBDG
//! available power, p.u.).

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::grid::{self, RadialNetwork, RawCase};
use crate::scenario::ScenarioHorizon;

pub const CASE_SCHEMA_VERSION: u32 = 1;

const IEEE34_CASE: &str = include_str!("../data/ieee34.json");
const IEEE34_LOAD: &str = include_str!("../data/ieee34_load.csv");
const IEEE34_PV: &str = include_str!("../data/ieee34_pv.csv");
const IEEE85_CASE: &str = include_str!("../data/ieee85.json");
const IEEE85_LOAD: &str = include_str!("../data/ieee85_load.csv");
const IEEE85_PV: &str = include_str!("../data/ieee85_pv.csv");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("parse error in {context}: {message}")]
    ParseError { context: String, message: String },
    #[error("case schema version {0} is not supported (expected {CASE_SCHEMA_VERSION})")]
    SchemaVersionUnsupported(u32),
    #[error("profile length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unknown id {0}")]
    UnknownId(String),
    #[error("unknown bundled case {0:?} and no such file")]
    UnknownCase(String),
    #[error("network validation failed: {0}")]
    InvalidNetwork(String),
    #[error(transparent)]
    Grid(#[from] grid::GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Resolve a bundled case name ("ieee34", "ieee85") or a file path to a
/// validated per-unit network.
pub fn load_case(name_or_path: &str) -> Result<RadialNetwork, IoError> {
    let raw = load_raw_case(name_or_path)?;
    case_from_raw(&raw, name_or_path)
}

pub fn load_raw_case(name_or_path: &str) -> Result<RawCase, IoError> {
    let text: String = match name_or_path {
        "ieee34" => IEEE34_CASE.to_string(),
        "ieee85" => IEEE85_CASE.to_string(),
        path => {
            if !Path::new(path).exists() {
                return Err(IoError::UnknownCase(path.to_string()));
            }
            std::fs::read_to_string(path)?
        }
    };
    parse_case_str(&text, name_or_path)
}

pub fn parse_case_str(text: &str, context: &str) -> Result<RawCase, IoError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let raw: RawCase =
        serde_path_to_error::deserialize(&mut de).map_err(|e| IoError::ParseError {
            context: context.to_string(),
            message: format!("field {}: {}", e.path(), e.inner()),
        })?;
    if raw.schema_version != CASE_SCHEMA_VERSION {
        return Err(IoError::SchemaVersionUnsupported(raw.schema_version));
    }
    Ok(raw)
}

fn case_from_raw(raw: &RawCase, context: &str) -> Result<RadialNetwork, IoError> {
    let net = grid::to_per_unit(raw)?;
    let diags = grid::validate_radial(&net);
    if !diags.is_empty() {
        return Err(IoError::InvalidNetwork(format!(
            "{context}: {}",
            diags
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(net)
}

/// Load the bundled or on-disk profile pair for a case and assemble the
/// horizon. `name_or_path` is either a bundled case name or the path of the
/// load-multiplier CSV, with the availability CSV passed as `pv_path`.
pub fn load_profiles(
    name_or_path: &str,
    pv_path: Option<&str>,
    net: &RadialNetwork,
) -> Result<ScenarioHorizon, IoError> {
    let (load_text, pv_text): (String, String) = match (name_or_path, pv_path) {
        ("ieee34", None) => (IEEE34_LOAD.to_string(), IEEE34_PV.to_string()),
        ("ieee85", None) => (IEEE85_LOAD.to_string(), IEEE85_PV.to_string()),
        (load_path, Some(pv)) => (
            std::fs::read_to_string(load_path)?,
            std::fs::read_to_string(pv)?,
        ),
        (other, None) => return Err(IoError::UnknownCase(other.to_string())),
    };
    profiles_from_strs(&load_text, &pv_text, net)
}

pub fn profiles_from_strs(
    load_text: &str,
    pv_text: &str,
    net: &RadialNetwork,
) -> Result<ScenarioHorizon, IoError> {
    let load = parse_table(load_text, "load profile")?;
    let pv = parse_table(pv_text, "pv profile")?;

    if load.labels != pv.labels {
        return Err(IoError::LengthMismatch(format!(
            "load profile has {} steps, pv profile has {}",
            load.labels.len(),
            pv.labels.len()
        )));
    }
    let t_len = load.labels.len();
    if t_len < 2 {
        return Err(IoError::LengthMismatch(
            "profiles need at least two steps".into(),
        ));
    }
    let step_minutes = {
        let a = crate::scenario::parse_hhmm(&load.labels[0])
            .map_err(|m| IoError::ParseError {
                context: "load profile".into(),
                message: m,
            })?;
        let b = crate::scenario::parse_hhmm(&load.labels[1])
            .map_err(|m| IoError::ParseError {
                context: "load profile".into(),
                message: m,
            })?;
        b.saturating_sub(a).max(1)
    };

    // Load columns are keyed by bus id; every non-slack bus must be present.
    let mut load_cols = Vec::with_capacity(net.n_buses());
    load_cols.push(usize::MAX); // slack has no column
    for bus in 1..net.n_buses() {
        let key = bus.to_string();
        let col = *load
            .columns
            .get(&key)
            .ok_or_else(|| IoError::UnknownId(format!("load profile column {key}")))?;
        load_cols.push(col);
    }
    let mut pv_cols = Vec::with_capacity(net.ibdgs.len());
    for unit in &net.ibdgs {
        let col = *pv
            .columns
            .get(&unit.availability)
            .ok_or_else(|| IoError::UnknownId(format!("pv profile column {}", unit.availability)))?;
        pv_cols.push(col);
    }

    let mut load_multipliers = Vec::with_capacity(t_len);
    let mut availability = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = Vec::with_capacity(net.n_buses());
        row.push(1.0);
        row.extend(load_cols[1..].iter().map(|&c| load.values[t][c]));
        load_multipliers.push(row);
        availability.push(pv_cols.iter().map(|&c| pv.values[t][c]).collect());
    }

    let horizon = ScenarioHorizon {
        step_minutes,
        labels: load.labels,
        load_multipliers,
        availability,
    };
    horizon
        .validate(net)
        .map_err(IoError::LengthMismatch)?;
    Ok(horizon)
}

struct Table {
    labels: Vec<String>,
    columns: HashMap<String, usize>,
    values: Vec<Vec<f64>>,
}

fn parse_table(text: &str, context: &str) -> Result<Table, IoError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| IoError::ParseError {
        context: context.into(),
        message: "empty file".into(),
    })?;
    let mut fields = header.split(',').map(str::trim);
    match fields.next() {
        Some("time") => {}
        other => {
            return Err(IoError::ParseError {
                context: context.into(),
                message: format!("first header field must be 'time', got {other:?}"),
            })
        }
    }
    let mut columns = HashMap::new();
    for (i, name) in fields.enumerate() {
        columns.insert(name.to_string(), i);
    }

    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut fields = line.split(',').map(str::trim);
        let label = fields.next().unwrap_or_default().to_string();
        let row: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let row = row.map_err(|e| IoError::ParseError {
            context: context.into(),
            message: format!("row {} ({label}): {e}", lineno + 2),
        })?;
        if row.len() != columns.len() {
            return Err(IoError::LengthMismatch(format!(
                "{context} row {} has {} values for {} columns",
                lineno + 2,
                row.len(),
                columns.len()
            )));
        }
        labels.push(label);
        values.push(row);
    }
    Ok(Table {
        labels,
        columns,
        values,
    })
}

/// Small synthetic networks shared by unit tests, integration tests, and
/// benches.
pub mod test_networks {
    use crate::grid::{Bases, Bus, IbdgSpec, Line, RadialNetwork};

    fn bus(id: usize) -> Bus {
        Bus {
            id,
            load_p: 0.0,
            load_q: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
            v_min: 0.81,
            v_max: 1.1025,
            v_target: 1.0,
            v_threshold: 0.1,
        }
    }

    fn line(id: usize, up: usize, r: f64, x: f64) -> Line {
        Line {
            id,
            up,
            r,
            x,
            i_max: 25.0,
            p_max: 10.0,
            q_max: 10.0,
        }
    }

    /// Chain 0 -> 1 -> ... -> n with the given per-line impedances.
    pub fn chain(impedances: &[(f64, f64)]) -> RadialNetwork {
        let n = impedances.len();
        RadialNetwork {
            buses: (0..=n).map(bus).collect(),
            lines: impedances
                .iter()
                .enumerate()
                .map(|(i, &(r, x))| line(i + 1, i, r, x))
                .collect(),
            ibdgs: vec![],
            v0: 1.0,
            bases: Bases {
                v_base_kv: 12.66,
                s_base_mva: 1.0,
            },
        }
    }

    /// Star: every line hangs directly off the slack.
    pub fn star(impedances: &[(f64, f64)]) -> RadialNetwork {
        let n = impedances.len();
        RadialNetwork {
            buses: (0..=n).map(bus).collect(),
            lines: impedances
                .iter()
                .enumerate()
                .map(|(i, &(r, x))| line(i + 1, 0, r, x))
                .collect(),
            ibdgs: vec![],
            v0: 1.0,
            bases: Bases {
                v_base_kv: 12.66,
                s_base_mva: 1.0,
            },
        }
    }

    /// Two-bus network with a constant-power load at bus 1.
    pub fn two_bus(r: f64, x: f64, load_p: f64, load_q: f64) -> RadialNetwork {
        let mut net = chain(&[(r, x)]);
        net.buses[1].load_p = load_p;
        net.buses[1].load_q = load_q;
        net
    }

    /// Attach a droop-capable IBDG to an existing bus.
    pub fn with_ibdg(mut net: RadialNetwork, bus: usize, p_max: f64) -> RadialNetwork {
        let tag = format!("pv{}", net.ibdgs.len() + 1);
        net.ibdgs.push(IbdgSpec {
            bus,
            dispatchable: true,
            p_max,
            q_min: -0.6 * p_max,
            q_max: 0.6 * p_max,
            s_max: 1.2 * p_max,
            mu_min: 0.85,
            availability: tag,
        });
        net
    }
}
