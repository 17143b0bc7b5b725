//! Single-reservoir heat model for the worker device.

use std::fmt;
use std::path::Path;

use crate::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ThermalState {
    Minimal = 0,
    Fair = 1,
    Serious = 2,
}

impl ThermalState {
    pub fn from_code(code: u8) -> Option<ThermalState> {
        match code {
            0 => Some(ThermalState::Minimal),
            1 => Some(ThermalState::Fair),
            2 => Some(ThermalState::Serious),
            _ => None,
        }
    }
}

impl fmt::Display for ThermalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThermalState::Minimal => "Minimal",
            ThermalState::Fair => "Fair",
            ThermalState::Serious => "Serious",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalConfig {
    /// Heat units per busy second.
    pub gain: f64,
    /// Heat units shed per idle second.
    pub dissipation: f64,
    pub fair_at: f64,
    pub serious_at: f64,
    /// Multiplier on simulated compute time while Serious.
    pub throttle_factor: f64,
}

impl Default for ThermalConfig {
    fn default() -> Self {
        ThermalConfig {
            gain: 1.0,
            dissipation: 1.0,
            fair_at: 100.0,
            serious_at: 200.0,
            throttle_factor: 1.05,
        }
    }
}

impl ThermalConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let ok = self.gain >= 0.0
            && self.dissipation >= 0.0
            && self.fair_at > 0.0
            && self.fair_at < self.serious_at
            && self.serious_at.is_finite()
            && self.throttle_factor >= 1.0
            && self.throttle_factor.is_finite();
        if ok {
            Ok(())
        } else {
            Err(RuntimeError::Config(format!("invalid thermal config {self:?}")))
        }
    }

    /// `key=value` lines; `#` starts a comment; missing keys keep defaults.
    pub fn parse(text: &str) -> Result<ThermalConfig, RuntimeError> {
        let mut cfg = ThermalConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| RuntimeError::Config(format!("thermal config line {}: {m}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| err(format!("bad number {:?}", v.trim())))?;
            match k.trim() {
                "gain" => cfg.gain = v,
                "dissipation" => cfg.dissipation = v,
                "fair_at" => cfg.fair_at = v,
                "serious_at" => cfg.serious_at = v,
                "throttle_factor" => cfg.throttle_factor = v,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ThermalConfig, RuntimeError> {
        ThermalConfig::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalModel {
    pub config: ThermalConfig,
    pub heat: f64,
}

impl ThermalModel {
    pub fn new(config: ThermalConfig) -> ThermalModel {
        ThermalModel { config, heat: 0.0 }
    }

    pub fn state(&self) -> ThermalState {
        if self.heat < self.config.fair_at {
            ThermalState::Minimal
        } else if self.heat < self.config.serious_at {
            ThermalState::Fair
        } else {
            ThermalState::Serious
        }
    }

    pub fn advance(&mut self, busy_s: f64, idle_s: f64) -> ThermalState {
        let busy = busy_s.max(0.0);
        let idle = idle_s.max(0.0);
        self.heat = (self.heat + self.config.gain * busy - self.config.dissipation * idle).max(0.0);
        self.state()
    }

    /// Multiplier for simulated compute starting now.
    pub fn throttle(&self) -> f64 {
        if self.state() == ThermalState::Serious {
            self.config.throttle_factor
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalBatch {
    /// 1-based batch number.
    pub batch: usize,
    /// Simulated batch compute time, seconds.
    pub busy_s: f64,
    pub heat_after: f64,
    pub state_after: ThermalState,
}

/// Runs `batches` batches of `busy_s` compute followed by `idle_s` rest.
/// A batch that starts in Serious takes `busy_s * throttle_factor`.
pub fn simulate_run(config: ThermalConfig, batches: usize, busy_s: f64, idle_s: f64) -> Vec<ThermalBatch> {
    let mut model = ThermalModel::new(config);
    (1..=batches)
        .map(|batch| {
            let busy = busy_s * model.throttle();
            let state_after = model.advance(busy, idle_s);
            ThermalBatch {
                batch,
                busy_s: busy,
                heat_after: model.heat,
                state_after,
            }
        })
        .collect()
}

/// First batch whose post-batch state is at least `state`.
pub fn first_batch_in(run: &[ThermalBatch], state: ThermalState) -> Option<usize> {
    run.iter().find(|b| b.state_after >= state).map(|b| b.batch)
}
