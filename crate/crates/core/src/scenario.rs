//! Time horizons: per-step load multipliers and IBDG available power.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::grid::RadialNetwork;

/// An ordered list of instants with per-bus load multipliers and per-IBDG
/// available active power (absolute, p.u.).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHorizon {
    pub step_minutes: u32,
    /// "HH:MM" labels, one per step.
    pub labels: Vec<String>,
    /// Per step, one multiplier per bus id (entry 0 is the slack, unused).
    pub load_multipliers: Vec<Vec<f64>>,
    /// Per step, one available-power value per IBDG (crate order).
    pub availability: Vec<Vec<f64>>,
}

/// Injection data at a single instant, in per-line alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Constant-power load per line-ending bus, p.u.
    pub load_p: DVector<f64>,
    pub load_q: DVector<f64>,
    /// Available active power per IBDG, p.u.
    pub avail: Vec<f64>,
}

impl ScenarioHorizon {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// All profile rows non-negative and of consistent width.
    pub fn validate(&self, net: &RadialNetwork) -> Result<(), String> {
        let t = self.len();
        if self.load_multipliers.len() != t || self.availability.len() != t {
            return Err(format!(
                "profile lengths {} / {} do not match horizon length {t}",
                self.load_multipliers.len(),
                self.availability.len()
            ));
        }
        for (i, row) in self.load_multipliers.iter().enumerate() {
            if row.len() != net.n_buses() {
                return Err(format!("load row {i} has {} entries", row.len()));
            }
            if row.iter().any(|m| *m < 0.0) {
                return Err(format!("negative load multiplier at step {i}"));
            }
        }
        for (i, row) in self.availability.iter().enumerate() {
            if row.len() != net.ibdgs.len() {
                return Err(format!("availability row {i} has {} entries", row.len()));
            }
            if row.iter().any(|m| *m < 0.0) {
                return Err(format!("negative availability at step {i}"));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, net: &RadialNetwork, t: usize) -> Snapshot {
        let mult = &self.load_multipliers[t];
        let n = net.n_lines();
        Snapshot {
            load_p: DVector::from_iterator(
                n,
                net.buses[1..].iter().map(|b| b.load_p * mult[b.id]),
            ),
            load_q: DVector::from_iterator(
                n,
                net.buses[1..].iter().map(|b| b.load_q * mult[b.id]),
            ),
            avail: self.availability[t].clone(),
        }
    }

    /// Steps whose label lies in `[start, end)`, both "HH:MM".
    pub fn window(&self, start: &str, end: &str) -> Result<ScenarioHorizon, String> {
        let lo = parse_hhmm(start)?;
        let hi = parse_hhmm(end)?;
        let keep: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                parse_hhmm(l).map(|m| m >= lo && m < hi).unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect();
        if keep.is_empty() {
            return Err(format!("window {start}-{end} selects no steps"));
        }
        Ok(self.select(&keep))
    }

    /// Evenly thin the horizon down to at most `max_steps` steps.
    pub fn thin(&self, max_steps: usize) -> ScenarioHorizon {
        let t = self.len();
        if max_steps == 0 || t <= max_steps {
            return self.clone();
        }
        let keep: Vec<usize> = (0..max_steps)
            .map(|i| i * t / max_steps)
            .collect();
        self.select(&keep)
    }

    fn select(&self, keep: &[usize]) -> ScenarioHorizon {
        ScenarioHorizon {
            step_minutes: self.step_minutes,
            labels: keep.iter().map(|&i| self.labels[i].clone()).collect(),
            load_multipliers: keep.iter().map(|&i| self.load_multipliers[i].clone()).collect(),
            availability: keep.iter().map(|&i| self.availability[i].clone()).collect(),
        }
    }
}

impl Snapshot {
    /// Nominal loads and a fixed availability for every IBDG.
    pub fn nominal(net: &RadialNetwork, avail_frac: f64) -> Snapshot {
        Snapshot {
            load_p: net.load_p_vec(),
            load_q: net.load_q_vec(),
            avail: net.ibdgs.iter().map(|u| u.p_max * avail_frac).collect(),
        }
    }
}

pub(crate) fn parse_hhmm(s: &str) -> Result<u32, String> {
    let (h, m) = s
        .split_once(':')
        .ok_or_else(|| format!("bad time label {s:?}"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad hour in {s:?}"))?;
    let m: u32 = m.parse().map_err(|_| format!("bad minute in {s:?}"))?;
    if h > 23 || m > 59 {
        return Err(format!("time {s:?} out of range"));
    }
    Ok(h * 60 + m)
}
