//! System parameters and the on-disk configuration format.
//!
//! The file format is TOML. Top-level keys carry the physical and
//! algorithmic parameters, the `[channel]` table carries the finite-state
//! channel. Values in the file use the units engineers quote them in and
//! are converted to SI (plus milliseconds for time) on load:
//!
//! | key               | file unit        | stored as        |
//! |-------------------|------------------|------------------|
//! | `input_size`      | KB (1000 bytes)  | bits             |
//! | `cycles`          | Megacycles       | cycles           |
//! | `local_freq`      | GHz              | Hz               |
//! | `edge_freq`       | GHz              | Hz               |
//! | `bandwidth`       | MHz              | Hz               |
//! | `distance`        | km               | km               |
//! | `tx_power`        | dBm              | dBm              |
//! | `noise_power`     | dBm              | dBm              |
//! | `wait_grid`       | ms               | ms               |
//! | `t_min`           | ms               | ms               |
//! | `perturbation`    | -                | -                |
//! | `step_factor`     | -                | -                |
//! | `stop_tol`        | -                | -                |
//! | `max_outer_iters` | count            | count            |
//!
//! `[channel]` holds `states = [{ label, tx_time }, ...]` (tx_time in ms)
//! and `transition`, the row-stochastic channel matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::channel::{ChannelModel, ChannelState};
use super::ConfigError;

/// The bundled default scenario (face-recognition workload, three-state channel).
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../config/default.toml");

const BITS_PER_KB: f64 = 8_000.0;
const CYCLES_PER_MEGACYCLE: f64 = 1e6;
const HZ_PER_GHZ: f64 = 1e9;
const HZ_PER_MHZ: f64 = 1e6;

/// Physical and algorithmic parameters. Frequencies are in Hz, sizes in
/// bits, times in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Input data size of one status update, bits.
    pub input_size: f64,
    /// CPU cycles needed to process one update.
    pub cycles: f64,
    /// Local processor frequency, Hz.
    pub local_freq: f64,
    /// Edge server frequency, Hz.
    pub edge_freq: f64,
    /// Uplink bandwidth, Hz.
    pub bandwidth: f64,
    /// Device to edge distance, km.
    pub distance: f64,
    /// Transmit power, dBm.
    pub tx_power: f64,
    /// Background noise plus interference, dBm.
    pub noise_power: f64,
    /// Admissible waiting times, ms. Ascending, starts at 0.
    pub wait_grid: Vec<f64>,
    /// Minimum average sampling duration, ms. Zero disables the constraint.
    pub t_min: f64,
    /// Multiplier perturbation used by the mixture refinement.
    pub perturbation: f64,
    /// Scale of the modified Robbins-Monro step `step_factor / k`.
    pub step_factor: f64,
    /// Stop tolerance on successive multiplier iterates.
    pub stop_tol: f64,
    /// Iteration cap of the multiplier search.
    pub max_outer_iters: usize,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("input_size", self.input_size),
            ("cycles", self.cycles),
            ("local_freq", self.local_freq),
            ("edge_freq", self.edge_freq),
            ("bandwidth", self.bandwidth),
            ("distance", self.distance),
            ("step_factor", self.step_factor),
            ("stop_tol", self.stop_tol),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::NotPositive { field, value });
            }
        }
        for (field, value) in [
            ("tx_power", self.tx_power),
            ("noise_power", self.noise_power),
        ] {
            if !value.is_finite() {
                return Err(ConfigError::NotFinite { field });
            }
        }
        if !(self.t_min.is_finite() && self.t_min >= 0.0) {
            return Err(ConfigError::Invalid {
                field: "t_min",
                reason: format!("must be a finite non-negative duration, got {}", self.t_min),
            });
        }
        if !(self.perturbation > 0.0 && self.perturbation < 0.1) {
            return Err(ConfigError::Invalid {
                field: "perturbation",
                reason: format!("must lie in (0, 0.1), got {}", self.perturbation),
            });
        }
        if self.max_outer_iters == 0 {
            return Err(ConfigError::Invalid {
                field: "max_outer_iters",
                reason: "must be at least 1".into(),
            });
        }
        validate_wait_grid(&self.wait_grid)
    }

    /// Local processing time `c / f_l`, ms.
    pub fn local_processing_time(&self) -> f64 {
        local_processing_time(self)
    }

    /// Edge execution time `c / f_e`, ms.
    pub fn edge_execution_time(&self) -> f64 {
        edge_execution_time(self)
    }
}

fn validate_wait_grid(grid: &[f64]) -> Result<(), ConfigError> {
    let bad = |reason: &str| ConfigError::Invalid {
        field: "wait_grid",
        reason: reason.to_string(),
    };
    match grid.first() {
        None => return Err(bad("must not be empty")),
        Some(&first) if first != 0.0 => return Err(bad("first element must be 0")),
        _ => {}
    }
    if grid.iter().any(|w| !w.is_finite()) {
        return Err(bad("entries must be finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("must be strictly ascending without duplicates"));
    }
    Ok(())
}

/// Local processing time `t_l = c / f_l` in milliseconds.
pub fn local_processing_time(cfg: &SystemConfig) -> f64 {
    cfg.cycles / cfg.local_freq * 1e3
}

/// Edge execution time `t_ex = c / f_e` in milliseconds.
pub fn edge_execution_time(cfg: &SystemConfig) -> f64 {
    cfg.cycles / cfg.edge_freq * 1e3
}

/// Distance-dependent path loss `140.7 + 36.7 log10(d)` in dB, `d` in km.
pub fn path_loss_db(distance_km: f64) -> Result<f64, ConfigError> {
    if !(distance_km.is_finite() && distance_km > 0.0) {
        return Err(ConfigError::NotPositive {
            field: "distance",
            value: distance_km,
        });
    }
    Ok(140.7 + 36.7 * distance_km.log10())
}

pub fn dbm_to_milliwatts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// `W log2(1 + snr)` in bits/second.
pub fn shannon_rate(bandwidth_hz: f64, snr: f64) -> f64 {
    bandwidth_hz * (1.0 + snr).log2()
}

/// Received SNR with the path loss applied as attenuation.
pub fn link_snr(cfg: &SystemConfig) -> Result<f64, ConfigError> {
    let gain = 10f64.powf(-path_loss_db(cfg.distance)? / 10.0);
    Ok(dbm_to_milliwatts(cfg.tx_power) * gain / dbm_to_milliwatts(cfg.noise_power))
}

/// Uplink offloading rate in bits/second.
pub fn offloading_rate(cfg: &SystemConfig) -> Result<f64, ConfigError> {
    Ok(shannon_rate(cfg.bandwidth, link_snr(cfg)?))
}

/// Input transmission time `l / r` in milliseconds.
///
/// Only used to help pick channel-state transmission times; the solver
/// reads those from [`ChannelModel`].
pub fn transmission_time_from_rate(cfg: &SystemConfig) -> Result<f64, ConfigError> {
    let rate = offloading_rate(cfg)?;
    if rate.is_nan() || rate <= 0.0 {
        return Err(ConfigError::ZeroRate);
    }
    Ok(cfg.input_size / rate * 1e3)
}

/// Raw TOML layout, in file units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub input_size: f64,
    pub cycles: f64,
    pub local_freq: f64,
    pub edge_freq: f64,
    pub bandwidth: f64,
    pub distance: f64,
    pub tx_power: f64,
    pub noise_power: f64,
    pub wait_grid: Vec<f64>,
    pub t_min: f64,
    pub perturbation: f64,
    pub step_factor: f64,
    pub stop_tol: f64,
    pub max_outer_iters: usize,
    pub channel: ChannelFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelFile {
    pub states: Vec<ChannelStateFile>,
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStateFile {
    pub label: String,
    pub tx_time: f64,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn default_scenario() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML).expect("bundled config parses")
    }

    /// Converts to internal units and validates both parts.
    pub fn to_model_inputs(&self) -> Result<(SystemConfig, ChannelModel), ConfigError> {
        let system = SystemConfig {
            input_size: self.input_size * BITS_PER_KB,
            cycles: self.cycles * CYCLES_PER_MEGACYCLE,
            local_freq: self.local_freq * HZ_PER_GHZ,
            edge_freq: self.edge_freq * HZ_PER_GHZ,
            bandwidth: self.bandwidth * HZ_PER_MHZ,
            distance: self.distance,
            tx_power: self.tx_power,
            noise_power: self.noise_power,
            wait_grid: self.wait_grid.clone(),
            t_min: self.t_min,
            perturbation: self.perturbation,
            step_factor: self.step_factor,
            stop_tol: self.stop_tol,
            max_outer_iters: self.max_outer_iters,
        };
        system.validate()?;
        let states = self
            .channel
            .states
            .iter()
            .map(|s| ChannelState {
                label: s.label.clone(),
                tx_time: s.tx_time,
            })
            .collect();
        let channel = ChannelModel::new(states, self.channel.transition.clone())?;
        Ok((system, channel))
    }
}

/// Reads a config file and applies `key=value` overrides on top.
///
/// Override keys are dotted paths into the TOML document; integer
/// segments index arrays (`channel.states.1.tx_time=700`). A key that does
/// not already exist in the document is rejected.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<(ConfigFile, toml::Table), ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?,
        None => DEFAULT_CONFIG_TOML.to_string(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let file = ConfigFile::from_table(table.clone())?;
    Ok((file, table))
}

/// Splits `KEY=VALUE`.
pub fn parse_override(raw: &str) -> Result<(String, String), ConfigError> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Override {
            key: raw.to_string(),
            reason: "expected KEY=VALUE".into(),
        }),
    }
}

pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let fail = |reason: &str| ConfigError::Override {
        key: key.to_string(),
        reason: reason.to_string(),
    };
    let value = parse_value(raw);
    let segments: Vec<&str> = key.split('.').collect();
    let (last, parents) = segments.split_last().ok_or_else(|| fail("empty key"))?;

    let mut slot: &mut toml::Value = match parents.first() {
        Some(first) => table.get_mut(*first).ok_or_else(|| fail("unknown key"))?,
        None => {
            let existing = table.get_mut(*last).ok_or_else(|| fail("unknown key"))?;
            *existing = coerce(existing, value);
            return Ok(());
        }
    };
    for segment in parents.iter().skip(1) {
        slot = descend(slot, segment).ok_or_else(|| fail("unknown key"))?;
    }
    let target = descend(slot, last).ok_or_else(|| fail("unknown key"))?;
    *target = coerce(target, value);
    Ok(())
}

fn descend<'a>(value: &'a mut toml::Value, segment: &str) -> Option<&'a mut toml::Value> {
    match value {
        toml::Value::Table(t) => t.get_mut(segment),
        toml::Value::Array(a) => segment.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    toml::from_str::<toml::Table>(&doc)
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

// `--set t_min=0` parses as an integer; keep floats floats.
fn coerce(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}
