//! Counting-day throughput model.
//!
//! EVMs are apportioned to counting centers by voter share, counting units
//! likewise, and each center works through its EVMs in balanced rounds: with
//! `E` EVMs and `U` units a center needs `⌈E / U⌉` rounds of
//! `per_evm_minutes` each. The overall makespan is the slowest center.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Days the manual process was estimated to add for 50% verification; kept
/// for comparison in reports, never simulated.
pub const MANUAL_BASELINE_DAYS: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{units} units cannot cover {centers} counting centers")]
    TooFewUnits { units: u64, centers: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub center_id: String,
    pub voter_share: f64,
}

/// Optional per-EVM processing-time jitter. Each EVM's time is increased by
/// a uniform draw from `[0, max_extra_minutes]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub max_extra_minutes: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub total_voters: u64,
    #[serde(default = "defaults::voters_per_booth")]
    pub voters_per_booth: u64,
    pub units_available: u64,
    #[serde(default = "defaults::capture_minutes")]
    pub capture_minutes_per_evm: f64,
    #[serde(default = "defaults::predict_ms")]
    pub predict_ms_per_slip: f64,
    #[serde(default = "defaults::slips_per_evm")]
    pub slips_per_evm: u64,
    #[serde(default = "defaults::overhead_minutes")]
    pub handling_overhead_minutes: f64,
    #[serde(default = "defaults::centers")]
    pub centers: Vec<Center>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<Jitter>,
}

mod defaults {
    use super::Center;

    pub fn voters_per_booth() -> u64 {
        1500
    }
    pub fn capture_minutes() -> f64 {
        10.0
    }
    pub fn predict_ms() -> f64 {
        40.0
    }
    pub fn slips_per_evm() -> u64 {
        1500
    }
    pub fn overhead_minutes() -> f64 {
        4.0
    }
    pub fn centers() -> Vec<Center> {
        vec![Center {
            center_id: "center-1".into(),
            voter_share: 1.0,
        }]
    }
}

/// Named scenarios shipped with the simulator.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper-state", "60M-voter state, 100% of EVMs, 1500 units, one center"),
    ("paper-state-50pct", "60M-voter state, 50% of EVMs, 1500 units, one center"),
    ("national-1-per-segment", "4,125 EVMs (1 per assembly segment), 1500 units"),
    ("national-5-per-segment", "20,625 EVMs (5 per assembly segment), 1500 units"),
];

impl SimConfig {
    /// Defaults with the given voters and units and a single center.
    pub fn new(total_voters: u64, units_available: u64) -> Self {
        SimConfig {
            total_voters,
            voters_per_booth: defaults::voters_per_booth(),
            units_available,
            capture_minutes_per_evm: defaults::capture_minutes(),
            predict_ms_per_slip: defaults::predict_ms(),
            slips_per_evm: defaults::slips_per_evm(),
            handling_overhead_minutes: defaults::overhead_minutes(),
            centers: defaults::centers(),
            jitter: None,
        }
    }

    /// Config whose booth count is exactly `evms`.
    fn with_evms(evms: u64, units: u64) -> Self {
        Self::new(evms * defaults::voters_per_booth(), units)
    }

    pub fn preset(name: &str) -> std::result::Result<Self, SimError> {
        match name {
            "paper-state" => Ok(Self::new(60_000_000, 1500)),
            "paper-state-50pct" => Ok(Self::with_evms(20_000, 1500)),
            "national-1-per-segment" => Ok(Self::with_evms(4_125, 1500)),
            "national-5-per-segment" => Ok(Self::with_evms(20_625, 1500)),
            other => Err(SimError::UnknownPreset(other.to_string())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0);
            Error::parse(path, line, e.message())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> std::result::Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if self.total_voters == 0 {
            return bad("total_voters must be positive");
        }
        if self.voters_per_booth == 0 {
            return bad("voters_per_booth must be positive");
        }
        if self.units_available == 0 {
            return bad("units_available must be positive");
        }
        if self.slips_per_evm == 0 {
            return bad("slips_per_evm must be positive");
        }
        for (name, v) in [
            ("capture_minutes_per_evm", self.capture_minutes_per_evm),
            ("predict_ms_per_slip", self.predict_ms_per_slip),
            ("handling_overhead_minutes", self.handling_overhead_minutes),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be finite and ≥ 0")));
            }
        }
        if per_evm_minutes(self) <= 0.0 {
            return bad("per-EVM time must be positive");
        }
        validate_shares(&self.centers)?;
        if let Some(j) = &self.jitter {
            if !(j.max_extra_minutes.is_finite() && j.max_extra_minutes >= 0.0) {
                return bad("jitter.max_extra_minutes must be finite and ≥ 0");
            }
        }
        Ok(())
    }
}

fn validate_shares(centers: &[Center]) -> std::result::Result<(), SimError> {
    if centers.is_empty() {
        return Err(SimError::InvalidConfig("at least one center is required".into()));
    }
    let mut ids: Vec<&str> = centers.iter().map(|c| c.center_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(SimError::InvalidConfig("center ids must be unique".into()));
    }
    if centers
        .iter()
        .any(|c| !(c.voter_share.is_finite() && c.voter_share > 0.0))
    {
        return Err(SimError::InvalidConfig("voter shares must be positive".into()));
    }
    let total: f64 = centers.iter().map(|c| c.voter_share).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SimError::InvalidConfig(format!(
            "voter shares sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Minutes to process one EVM: capture, prediction of every slip, handling.
pub fn per_evm_minutes(config: &SimConfig) -> f64 {
    config.capture_minutes_per_evm
        + config.slips_per_evm as f64 * config.predict_ms_per_slip / 60_000.0
        + config.handling_overhead_minutes
}

/// Largest-remainder apportionment of `total` by share. Remainder ties go to
/// the lower center id. Returned in input order.
fn largest_remainder(centers: &[Center], total: u64) -> Vec<u64> {
    let quotas: Vec<f64> = centers.iter().map(|c| c.voter_share * total as f64).collect();
    // tolerate quotas like 2.9999999999 that are integral up to rounding
    let mut alloc: Vec<u64> = quotas.iter().map(|q| (q + 1e-9).floor() as u64).collect();
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - alloc[a] as f64;
        let rb = quotas[b] - alloc[b] as f64;
        rb.total_cmp(&ra)
            .then_with(|| centers[a].center_id.cmp(&centers[b].center_id))
    });
    let assigned: u64 = alloc.iter().sum();
    if assigned <= total {
        for &i in order.iter().cycle().take((total - assigned) as usize) {
            alloc[i] += 1;
        }
    } else {
        // only reachable when shares overshoot 1 within tolerance
        let mut excess = assigned - total;
        for &i in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if alloc[i] > 0 {
                alloc[i] -= 1;
                excess -= 1;
            }
        }
    }
    alloc
}

/// Apportion counting units to centers by voter share. Every center gets at
/// least one unit: a center left empty by the largest-remainder pass takes
/// one from the best-supplied center (lowest id on ties).
pub fn allocate_units(
    centers: &[Center],
    total_units: u64,
) -> std::result::Result<BTreeMap<String, u64>, SimError> {
    validate_shares(centers)?;
    if total_units < centers.len() as u64 {
        return Err(SimError::TooFewUnits {
            units: total_units,
            centers: centers.len(),
        });
    }
    let mut alloc = largest_remainder(centers, total_units);
    let mut by_id: Vec<usize> = (0..centers.len()).collect();
    by_id.sort_by(|&a, &b| centers[a].center_id.cmp(&centers[b].center_id));
    for &i in &by_id {
        if alloc[i] == 0 {
            let donor = by_id
                .iter()
                .copied()
                .fold(by_id[0], |best, c| if alloc[c] > alloc[best] { c } else { best });
            alloc[donor] -= 1;
            alloc[i] += 1;
        }
    }
    Ok(centers
        .iter()
        .zip(alloc)
        .map(|(c, n)| (c.center_id.clone(), n))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterReport {
    pub center_id: String,
    pub evms: u64,
    pub units: u64,
    pub makespan_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub booths: u64,
    pub per_evm_minutes: f64,
    pub per_center: Vec<CenterReport>,
    pub makespan_minutes: f64,
}

impl SimReport {
    pub fn makespan_hours(&self) -> f64 {
        self.makespan_minutes / 60.0
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "booths (EVMs):     {}", self.booths);
        let _ = writeln!(out, "minutes per EVM:   {:.2}", self.per_evm_minutes);
        let _ = writeln!(
            out,
            "makespan:          {:.2} min ({:.2} h; manual baseline {MANUAL_BASELINE_DAYS} days)",
            self.makespan_minutes,
            self.makespan_hours()
        );
        let width = self
            .per_center
            .iter()
            .map(|c| c.center_id.len())
            .max()
            .unwrap_or(0)
            .max("center".len());
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>6}  {:>14}",
            "center", "evms", "units", "makespan_min"
        );
        for c in &self.per_center {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>6}  {:>14.2}",
                c.center_id, c.evms, c.units, c.makespan_minutes
            );
        }
        out
    }
}

/// Run the counting-day model.
pub fn simulate_counting(config: &SimConfig) -> std::result::Result<SimReport, SimError> {
    config.validate()?;
    let booths = config.total_voters.div_ceil(config.voters_per_booth);
    let per_evm = per_evm_minutes(config);
    let evms = largest_remainder(&config.centers, booths);
    let units = allocate_units(&config.centers, config.units_available)?;
    let mut rng = config
        .jitter
        .as_ref()
        .map(|j| ChaCha8Rng::seed_from_u64(j.seed));

    let per_center: Vec<CenterReport> = config
        .centers
        .iter()
        .zip(evms)
        .map(|(center, evms)| {
            let units = units[&center.center_id];
            let makespan_minutes = match (&config.jitter, rng.as_mut()) {
                (Some(j), Some(rng)) => {
                    let times: Vec<f64> = (0..evms)
                        .map(|_| per_evm + rng.random_range(0.0..=j.max_extra_minutes))
                        .collect();
                    round_robin_makespan(&times, units)
                }
                _ => evms.div_ceil(units) as f64 * per_evm,
            };
            CenterReport {
                center_id: center.center_id.clone(),
                evms,
                units,
                makespan_minutes,
            }
        })
        .collect();
    let makespan_minutes = per_center
        .iter()
        .map(|c| c.makespan_minutes)
        .fold(0.0, f64::max);
    Ok(SimReport {
        booths,
        per_evm_minutes: per_evm,
        per_center,
        makespan_minutes,
    })
}

/// Makespan when EVM `i` goes to unit `i mod units` and each unit processes
/// its EVMs back to back.
pub fn round_robin_makespan(evm_minutes: &[f64], units: u64) -> f64 {
    let units = units.max(1) as usize;
    let mut load = vec![0.0; units];
    for (i, t) in evm_minutes.iter().enumerate() {
        load[i % units] += t;
    }
    load.into_iter().fold(0.0, f64::max)
}
