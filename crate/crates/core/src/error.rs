use thiserror::Error;

/// Rejections raised while validating parameters and configurations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("{name} = {value} is out of range: {expected}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("epsilon * w = {product} must be < 1 so that gamma stays in [0, 1)")]
    WindowTooShort { product: f64 },
    #[error("both raw gains (alpha/beta/gamma) and scaling parameters (epsilon/w/alpha0/beta0) were given")]
    ConflictingGainSources,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Failures while reading, appending to, or auditing a token ledger.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("agent {agent_id} out of range for a ledger of {agents} agents")]
    UnknownAgent { agent_id: usize, agents: usize },
    #[error("step {step}, agent {agent_id}: withdrawing {amount} exceeds outstanding stake {stake}")]
    Overdraw {
        step: u64,
        agent_id: usize,
        amount: u64,
        stake: u64,
    },
    #[error("token arithmetic overflow")]
    Overflow,
    #[error("transaction order violated at step {step}, agent {agent_id}")]
    OutOfOrder { step: u64, agent_id: usize },
    #[error("ledger line {line}: {message}")]
    Parse { line: usize, message: String },
}
