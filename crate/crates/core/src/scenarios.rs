//! Builders for the four reference scenarios.
//!
//! | kind | global loop | individual loop | defectors |
//! |------|-------------|-----------------|-----------|
//! | I    | on          | off             | none      |
//! | II   | on          | on              | none      |
//! | III  | off         | on              | 10% until k = 100 |
//! | IV   | on          | on              | 10% until k = 100 |

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::config::SimConfig;
use crate::error::ConfigError;
use crate::ledger::PolicyKind;
use crate::model::ControlConfig;
use crate::rng::{rng_from_seed, stream_seed, DEFECTOR_STREAM};

pub const DEFAULT_AGENTS: usize = 1000;
pub const DEFAULT_Q_LOW: f64 = 0.1;
pub const DEFAULT_Q_HIGH: f64 = 0.35;
pub const DEFAULT_HORIZON: u64 = 500;
pub const DEFAULT_REPS: usize = 150;
pub const DEFAULT_DEFECTOR_FRACTION: f64 = 0.10;
pub const DEFAULT_DEFECT_UNTIL: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    GlobalOnly,
    Both,
    IndividualOnlyDefectors,
    BothDefectors,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::GlobalOnly,
        ScenarioKind::Both,
        ScenarioKind::IndividualOnlyDefectors,
        ScenarioKind::BothDefectors,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::GlobalOnly => "I",
            ScenarioKind::Both => "II",
            ScenarioKind::IndividualOnlyDefectors => "III",
            ScenarioKind::BothDefectors => "IV",
        }
    }

    pub fn has_defectors(self) -> bool {
        matches!(self, ScenarioKind::IndividualOnlyDefectors | ScenarioKind::BothDefectors)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(ScenarioKind::GlobalOnly),
            "II" | "2" => Ok(ScenarioKind::Both),
            "III" | "3" => Ok(ScenarioKind::IndividualOnlyDefectors),
            "IV" | "4" => Ok(ScenarioKind::BothDefectors),
            other => Err(format!("unknown scenario '{other}' (expected I, II, III or IV)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DefectorSelection {
    /// Uniformly random subset drawn from the selection seed.
    #[default]
    Random,
    /// The lowest agent ids; handy when debugging.
    LowestIndex,
}

impl FromStr for DefectorSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(DefectorSelection::Random),
            "lowest" => Ok(DefectorSelection::LowestIndex),
            other => Err(format!("unknown defector selection '{other}' (expected random or lowest)")),
        }
    }
}

impl fmt::Display for DefectorSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefectorSelection::Random => "random",
            DefectorSelection::LowestIndex => "lowest",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectorConfig {
    pub fraction: f64,
    /// Defectors refuse to comply on every draw at step `k <= defect_until`.
    pub defect_until: u64,
    pub selection_seed: u64,
    pub selection: DefectorSelection,
}

impl DefectorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.fraction >= 0.0 && self.fraction < 1.0) {
            return Err(ConfigError::OutOfRange {
                name: "defector_frac",
                value: self.fraction,
                expected: "0 <= defector_frac < 1",
            });
        }
        Ok(())
    }

    pub fn count(&self, n: usize) -> usize {
        (self.fraction * n as f64).round() as usize
    }

    /// Membership mask over agent ids.
    pub fn select(&self, n: usize) -> Vec<bool> {
        let count = self.count(n).min(n);
        let mut mask = vec![false; n];
        match self.selection {
            DefectorSelection::LowestIndex => mask[..count].iter_mut().for_each(|m| *m = true),
            DefectorSelection::Random => {
                let mut rng = rng_from_seed(stream_seed(self.selection_seed, DEFECTOR_STREAM));
                for i in sample(&mut rng, n, count) {
                    mask[i] = true;
                }
            }
        }
        mask
    }

    pub fn is_active(&self, draw_step: u64) -> bool {
        draw_step <= self.defect_until
    }
}

/// Optional changes applied on top of a scenario's defaults.
#[derive(Debug, Clone, Default)]
pub struct ScenarioOverrides {
    pub n: Option<usize>,
    pub horizon: Option<u64>,
    pub reps: Option<usize>,
    pub base_seed: Option<u64>,
    pub defector_fraction: Option<f64>,
    pub defect_until: Option<u64>,
    pub policy: Option<PolicyKind>,
}

pub fn build_scenario(kind: ScenarioKind, overrides: &ScenarioOverrides) -> Result<SimConfig, ConfigError> {
    let base_seed = overrides.base_seed.unwrap_or(0);
    let control = ControlConfig {
        enable_global: kind != ScenarioKind::IndividualOnlyDefectors,
        enable_individual: kind != ScenarioKind::GlobalOnly,
        ..ControlConfig::DEFAULT
    };
    let fraction = overrides
        .defector_fraction
        .unwrap_or(if kind.has_defectors() { DEFAULT_DEFECTOR_FRACTION } else { 0.0 });
    let defectors = DefectorConfig {
        fraction,
        defect_until: overrides.defect_until.unwrap_or(DEFAULT_DEFECT_UNTIL),
        selection_seed: base_seed,
        selection: DefectorSelection::Random,
    };
    defectors.validate()?;
    let cfg = SimConfig {
        n: overrides.n.unwrap_or(DEFAULT_AGENTS),
        control,
        scaling: None,
        q_low: DEFAULT_Q_LOW,
        q_high: DEFAULT_Q_HIGH,
        horizon: overrides.horizon.unwrap_or(DEFAULT_HORIZON),
        scenario: kind,
        defectors: (fraction > 0.0).then_some(defectors),
        policy: overrides.policy.unwrap_or(PolicyKind::AdaptivePenalty),
        unit_scale: crate::config::DEFAULT_UNIT_SCALE,
        contract_length: 0,
        mbar_init: crate::config::MbarInit::Zero,
        reps: overrides.reps.unwrap_or(DEFAULT_REPS),
        base_seed,
        record_diagnostics: false,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `n` independent uniform draws on `[low, high]`.
pub fn sample_proclivities(n: usize, low: f64, high: f64, seed: u64) -> Vec<f64> {
    if low == high {
        return vec![low; n];
    }
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random_range(low..=high)).collect()
}
