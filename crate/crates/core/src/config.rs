//! Experiment configuration and its flat `key = value` text form.
//!
//! Recognised keys: `n`, `alpha`, `beta`, `gamma`, `qstar`, `epsilon`, `w`,
//! `alpha0`, `beta0`, `q_low`, `q_high`, `horizon`, `scenario`,
//! `defector_frac`, `defect_until`, `defector_selection`, `policy`,
//! `unit_scale`, `contract_length`, `mbar_init`, `reps`, `seed`,
//! `record_diagnostics`. Anything after `#` is a comment. Missing keys take
//! the defaults of the chosen scenario (II when `scenario` is absent).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::ConfigError;
use crate::ledger::{PolicyKind, MICRO_PER_TOKEN};
use crate::model::{derive_gains, ControlConfig, ScalingParams};
use crate::rng::{stream_seed, PROCLIVITY_STREAM};
use crate::scenarios::{
    build_scenario, sample_proclivities, DefectorConfig, DefectorSelection, ScenarioKind, ScenarioOverrides,
    DEFAULT_DEFECT_UNTIL,
};

/// One token per unit of price signal.
pub const DEFAULT_UNIT_SCALE: u64 = MICRO_PER_TOKEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MbarInit {
    /// `M̄_i(0) = 0`, the empty average.
    #[default]
    Zero,
    /// `M̄_i(0) = Q*`.
    Target,
}

impl FromStr for MbarInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero" => Ok(MbarInit::Zero),
            "target" => Ok(MbarInit::Target),
            other => Err(format!("unknown mbar_init '{other}' (expected zero or target)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    /// Gains actually used; derived from `scaling` when that is set.
    pub control: ControlConfig,
    pub scaling: Option<ScalingParams>,
    pub q_low: f64,
    pub q_high: f64,
    pub horizon: u64,
    pub scenario: ScenarioKind,
    pub defectors: Option<DefectorConfig>,
    pub policy: PolicyKind,
    pub unit_scale: u64,
    /// Fixed-penalty contract length in steps; 0 means the full horizon.
    pub contract_length: u64,
    pub mbar_init: MbarInit,
    pub reps: usize,
    pub base_seed: u64,
    pub record_diagnostics: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        build_scenario(ScenarioKind::Both, &ScenarioOverrides::default()).expect("scenario II defaults are valid")
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::Invalid("n must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(ConfigError::Invalid("horizon must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(ConfigError::Invalid("reps must be at least 1".into()));
        }
        if self.unit_scale == 0 {
            return Err(ConfigError::Invalid("unit_scale must be at least 1".into()));
        }
        if !(self.q_low.is_finite() && self.q_high.is_finite() && 0.0 <= self.q_low && self.q_low <= self.q_high && self.q_high <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "proclivity range [{}, {}] must satisfy 0 <= q_low <= q_high <= 1",
                self.q_low, self.q_high
            )));
        }
        self.control.validate()?;
        if let Some(s) = &self.scaling {
            let derived = derive_gains(s, self.control.q_star)?;
            if (derived.alpha, derived.beta, derived.gamma) != (self.control.alpha, self.control.beta, self.control.gamma) {
                return Err(ConfigError::Invalid("control gains disagree with the scaling parameters".into()));
            }
        }
        if let Some(d) = &self.defectors {
            d.validate()?;
        }
        Ok(())
    }

    /// Proclivities shared by every repetition; depend only on `n`, the range and `base_seed`.
    pub fn proclivities(&self) -> Vec<f64> {
        sample_proclivities(self.n, self.q_low, self.q_high, stream_seed(self.base_seed, PROCLIVITY_STREAM))
    }

    pub fn initial_mbar(&self) -> f64 {
        match self.mbar_init {
            MbarInit::Zero => 0.0,
            MbarInit::Target => self.control.q_star,
        }
    }

    /// Switch to scaling-mode gains, keeping the scenario's loop switches.
    pub fn with_scaling(mut self, scaling: ScalingParams) -> Result<Self, ConfigError> {
        let derived = derive_gains(&scaling, self.control.q_star)?;
        self.control = ControlConfig {
            enable_global: self.control.enable_global,
            enable_individual: self.control.enable_individual,
            ..derived
        };
        self.scaling = Some(scaling);
        Ok(self)
    }
}

const KEYS: &[&str] = &[
    "n",
    "alpha",
    "beta",
    "gamma",
    "qstar",
    "epsilon",
    "w",
    "alpha0",
    "beta0",
    "q_low",
    "q_high",
    "horizon",
    "scenario",
    "defector_frac",
    "defect_until",
    "defector_selection",
    "policy",
    "unit_scale",
    "contract_length",
    "mbar_init",
    "reps",
    "seed",
    "record_diagnostics",
];

const RAW_GAIN_KEYS: &[&str] = &["alpha", "beta", "gamma"];
const SCALING_KEYS: &[&str] = &["epsilon", "w", "alpha0", "beta0"];

struct Entries<'a> {
    map: BTreeMap<&'a str, (usize, &'a str)>,
}

impl<'a> Entries<'a> {
    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |&(line, _)| line)
    }

    fn get<T: FromStr>(&self, key: &'static str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(&(line, raw)) => raw.parse::<T>().map(Some).map_err(|e| ConfigError::Parse {
                line,
                message: format!("{key}: cannot parse '{raw}': {e}"),
            }),
        }
    }

    fn located(&self, key: &str, err: ConfigError) -> ConfigError {
        ConfigError::Parse {
            line: self.line(key),
            message: format!("{key}: {err}"),
        }
    }
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got '{other}'")),
    }
}

/// Parse a flat `key = value` configuration.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut map = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Parse {
                line,
                message: format!("expected 'key = value', got '{content}'"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::Parse {
                line,
                message: format!("unknown key '{key}'"),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::Parse {
                line,
                message: format!("{key}: missing value"),
            });
        }
        if map.insert(key, (line, value)).is_some() {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key '{key}'"),
            });
        }
    }
    let e = Entries { map };

    let raw_given = RAW_GAIN_KEYS.iter().find(|k| e.map.contains_key(**k));
    let scaling_given = SCALING_KEYS.iter().find(|k| e.map.contains_key(**k));
    if let (Some(_), Some(s)) = (raw_given, scaling_given) {
        return Err(ConfigError::Parse {
            line: e.line(s),
            message: ConfigError::ConflictingGainSources.to_string(),
        });
    }

    let scenario = e.get::<ScenarioKind>("scenario")?.unwrap_or(ScenarioKind::Both);
    let seed = e.get::<u64>("seed")?.unwrap_or(0);
    let overrides = ScenarioOverrides {
        n: e.get("n")?,
        horizon: e.get("horizon")?,
        reps: e.get("reps")?,
        base_seed: Some(seed),
        defector_fraction: e.get("defector_frac")?,
        defect_until: e.get("defect_until")?,
        policy: e.get("policy")?,
    };
    if let Some(f) = overrides.defector_fraction {
        if !(0.0..1.0).contains(&f) {
            return Err(e.located(
                "defector_frac",
                ConfigError::OutOfRange {
                    name: "defector_frac",
                    value: f,
                    expected: "0 <= defector_frac < 1",
                },
            ));
        }
    }
    let mut cfg = build_scenario(scenario, &ScenarioOverrides { n: None, horizon: None, reps: None, ..overrides.clone() })
        .map_err(|err| e.located("scenario", err))?;
    if let Some(n) = overrides.n {
        cfg.n = n;
    }
    if let Some(h) = overrides.horizon {
        cfg.horizon = h;
    }
    if let Some(r) = overrides.reps {
        cfg.reps = r;
    }
    if let Some(sel) = e.get::<DefectorSelection>("defector_selection")? {
        if let Some(d) = cfg.defectors.as_mut() {
            d.selection = sel;
        }
    }

    if let Some(q) = e.get::<f64>("qstar")? {
        cfg.control.q_star = q;
    }
    for (key, slot) in [("alpha", 0), ("beta", 1), ("gamma", 2)] {
        if let Some(v) = e.get::<f64>(key)? {
            match slot {
                0 => cfg.control.alpha = v,
                1 => cfg.control.beta = v,
                _ => cfg.control.gamma = v,
            }
        }
    }
    for key in ["alpha", "beta", "gamma", "qstar"] {
        if e.map.contains_key(key) {
            cfg.control.validate().map_err(|err| e.located(key, err))?;
        }
    }
    if let Some(first_scaling_key) = scaling_given {
        let Some(epsilon) = e.get::<f64>("epsilon")? else {
            return Err(ConfigError::Parse {
                line: e.line(first_scaling_key),
                message: "scaling mode requires 'epsilon'".into(),
            });
        };
        let scaling = ScalingParams {
            epsilon,
            w: e.get("w")?.unwrap_or(1.0),
            alpha0: e.get("alpha0")?.unwrap_or(1.0),
            beta0: e.get("beta0")?.unwrap_or(1.0),
        };
        cfg = cfg.with_scaling(scaling).map_err(|err| e.located("epsilon", err))?;
    }

    if let Some(v) = e.get("q_low")? {
        cfg.q_low = v;
    }
    if let Some(v) = e.get("q_high")? {
        cfg.q_high = v;
    }
    if let Some(v) = e.get("unit_scale")? {
        cfg.unit_scale = v;
    }
    if let Some(v) = e.get("contract_length")? {
        cfg.contract_length = v;
    }
    if let Some(v) = e.get("mbar_init")? {
        cfg.mbar_init = v;
    }
    if let Some((line, raw)) = e.map.get("record_diagnostics") {
        cfg.record_diagnostics = parse_bool(raw).map_err(|message| ConfigError::Parse {
            line: *line,
            message: format!("record_diagnostics: {message}"),
        })?;
    }
    cfg.validate().map_err(|err| ConfigError::Parse {
        line: 0,
        message: err.to_string(),
    })?;
    Ok(cfg)
}

/// Render a configuration so that [`parse_config`] reproduces it exactly.
pub fn to_config_text(cfg: &SimConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("scenario", cfg.scenario.to_string());
    kv("n", cfg.n.to_string());
    match &cfg.scaling {
        Some(s) => {
            kv("epsilon", s.epsilon.to_string());
            kv("w", s.w.to_string());
            kv("alpha0", s.alpha0.to_string());
            kv("beta0", s.beta0.to_string());
        }
        None => {
            kv("alpha", cfg.control.alpha.to_string());
            kv("beta", cfg.control.beta.to_string());
            kv("gamma", cfg.control.gamma.to_string());
        }
    }
    kv("qstar", cfg.control.q_star.to_string());
    kv("q_low", cfg.q_low.to_string());
    kv("q_high", cfg.q_high.to_string());
    kv("horizon", cfg.horizon.to_string());
    match &cfg.defectors {
        Some(d) => {
            kv("defector_frac", d.fraction.to_string());
            kv("defect_until", d.defect_until.to_string());
            kv("defector_selection", d.selection.to_string());
        }
        None => {
            kv("defector_frac", "0".into());
            kv("defect_until", DEFAULT_DEFECT_UNTIL.to_string());
        }
    }
    kv("policy", cfg.policy.to_string());
    kv("unit_scale", cfg.unit_scale.to_string());
    kv("contract_length", cfg.contract_length.to_string());
    kv(
        "mbar_init",
        match cfg.mbar_init {
            MbarInit::Zero => "zero".into(),
            MbarInit::Target => "target".into(),
        },
    );
    kv("reps", cfg.reps.to_string());
    kv("seed", cfg.base_seed.to_string());
    kv("record_diagnostics", cfg.record_diagnostics.to_string());
    out
}
