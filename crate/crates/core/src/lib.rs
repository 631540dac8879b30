//! Simulation of compliance with a social rule priced through per-agent token
//! deposits and steered by a global and an individual feedback signal.
//!
//! Layout:
//! - [`model`]: agent state, compliance draws and the two controllers.
//! - [`ledger`]: integer token ledger and penalty policies.
//! - [`reference`]: deterministic mean-field map and ODE.
//! - [`montecarlo`]: seeded, thread-count-independent ensembles.
//! - [`scenarios`]: the four reference scenarios.
//! - [`config`], [`io`], [`cli`]: configuration files, CSV output, command line.

pub mod audit;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod ledger;
pub mod model;
pub mod montecarlo;
pub mod reference;
pub mod rng;
pub mod scenarios;
pub mod stats;

pub use config::{parse_config, to_config_text, SimConfig};
pub use error::{ConfigError, LedgerError};
pub use ledger::{Ledger, LedgerTransaction, PolicyKind, TokenAmount};
pub use model::{clamp_probability, ControlConfig, ScalingParams};
pub use montecarlo::{run_ensemble, run_single, AggregateResult, RunConfig, RunResult};
pub use scenarios::{build_scenario, ScenarioKind};
