//! Append-only token-bond ledger and the three bond policies.
//!
//! Amounts are integer micro-tokens (1 token = 10⁶ micro-tokens). The ledger
//! keeps every transaction plus a per-agent record of outstanding stakes and
//! running totals, so that
//!
//! ```text
//! Σ deposits = Σ returns + Σ forfeits + Σ outstanding stakes
//! ```
//!
//! holds exactly after every append.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::LedgerError;

pub const MICRO_PER_TOKEN: u64 = 1_000_000;
pub const LEDGER_HEADER: &str = "# ledger v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenAmount(pub u64);

impl TokenAmount {
    pub const ZERO: TokenAmount = TokenAmount(0);

    pub fn micro(self) -> u64 {
        self.0
    }

    pub fn checked_add(self, rhs: TokenAmount) -> Option<TokenAmount> {
        self.0.checked_add(rhs.0).map(TokenAmount)
    }

    pub fn checked_sub(self, rhs: TokenAmount) -> Option<TokenAmount> {
        self.0.checked_sub(rhs.0).map(TokenAmount)
    }
}

impl fmt::Display for TokenAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bond for signals `C + c`: `round(unit_scale · max(0, C + c))` micro-tokens, halves rounded up.
pub fn bond_price(c_global: f64, c: f64, unit_scale: u64) -> TokenAmount {
    let signal = (c_global + c).max(0.0);
    // Float-to-int casts saturate, so absurd signals cap at u64::MAX.
    TokenAmount((unit_scale as f64 * signal + 0.5).floor() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// One deposit per contract, returned at contract end only if the agent complied throughout.
    FixedPenalty,
    /// Contract reissued every step: return on compliance, forfeit otherwise, then re-stake.
    AdaptivePenalty,
    /// Stake stays put while the agent complies; each violation forfeits it and forces a fresh deposit.
    EventDriven,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FixedPenalty => "fixed",
            PolicyKind::AdaptivePenalty => "adaptive",
            PolicyKind::EventDriven => "event",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" | "fixedpenalty" | "fixed_penalty" => Ok(PolicyKind::FixedPenalty),
            "adaptive" | "adaptivepenalty" | "adaptive_penalty" => Ok(PolicyKind::AdaptivePenalty),
            "event" | "eventdriven" | "event_driven" => Ok(PolicyKind::EventDriven),
            other => Err(format!("unknown policy '{other}' (expected fixed, adaptive or event)")),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxKind {
    Deposit,
    Return,
    Forfeit,
}

impl TxKind {
    pub fn code(self) -> &'static str {
        match self {
            TxKind::Deposit => "DEP",
            TxKind::Return => "RET",
            TxKind::Forfeit => "FOR",
        }
    }
}

impl FromStr for TxKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DEP" => Ok(TxKind::Deposit),
            "RET" => Ok(TxKind::Return),
            "FOR" => Ok(TxKind::Forfeit),
            other => Err(format!("unknown transaction kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LedgerTransaction {
    pub step: u64,
    pub agent_id: usize,
    pub kind: TxKind,
    pub amount: TokenAmount,
}

impl LedgerTransaction {
    pub fn new(step: u64, agent_id: usize, kind: TxKind, amount: TokenAmount) -> Self {
        Self {
            step,
            agent_id,
            kind,
            amount,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    log: Vec<LedgerTransaction>,
    stakes: Vec<TokenAmount>,
    deposited_total: TokenAmount,
    returned_total: TokenAmount,
    forfeited_total: TokenAmount,
}

impl Ledger {
    pub fn new(agents: usize) -> Self {
        Self {
            log: Vec::new(),
            stakes: vec![TokenAmount::ZERO; agents],
            deposited_total: TokenAmount::ZERO,
            returned_total: TokenAmount::ZERO,
            forfeited_total: TokenAmount::ZERO,
        }
    }

    /// Assemble a ledger from raw records without replaying them; used to
    /// examine externally supplied state with [`verify_conservation`].
    pub fn from_parts(log: Vec<LedgerTransaction>, stakes: Vec<TokenAmount>, forfeited_total: TokenAmount) -> Self {
        let sum = |kind| {
            TokenAmount(
                log.iter()
                    .filter(|t: &&LedgerTransaction| t.kind == kind)
                    .map(|t| t.amount.0)
                    .sum(),
            )
        };
        let deposited_total = sum(TxKind::Deposit);
        let returned_total = sum(TxKind::Return);
        Self {
            log,
            stakes,
            deposited_total,
            returned_total,
            forfeited_total,
        }
    }

    /// Rebuild a ledger by appending every transaction in order.
    pub fn replay(agents: usize, log: &[LedgerTransaction]) -> Result<Self, LedgerError> {
        let mut ledger = Ledger::new(agents);
        for tx in log {
            ledger.append(*tx)?;
        }
        Ok(ledger)
    }

    pub fn agents(&self) -> usize {
        self.stakes.len()
    }

    pub fn log(&self) -> &[LedgerTransaction] {
        &self.log
    }

    pub fn stakes(&self) -> &[TokenAmount] {
        &self.stakes
    }

    pub fn stake(&self, agent_id: usize) -> TokenAmount {
        self.stakes[agent_id]
    }

    pub fn forfeited_total(&self) -> TokenAmount {
        self.forfeited_total
    }

    pub fn deposited_total(&self) -> TokenAmount {
        self.deposited_total
    }

    pub fn returned_total(&self) -> TokenAmount {
        self.returned_total
    }

    /// Append one transaction, updating the stake record and running totals.
    ///
    /// Transactions must arrive ordered by `(step, agent_id)`; withdrawals
    /// larger than the outstanding stake are rejected and leave the ledger
    /// untouched.
    pub fn append(&mut self, tx: LedgerTransaction) -> Result<(), LedgerError> {
        let agents = self.stakes.len();
        if tx.agent_id >= agents {
            return Err(LedgerError::UnknownAgent {
                agent_id: tx.agent_id,
                agents,
            });
        }
        if let Some(last) = self.log.last() {
            if (tx.step, tx.agent_id) < (last.step, last.agent_id) {
                return Err(LedgerError::OutOfOrder {
                    step: tx.step,
                    agent_id: tx.agent_id,
                });
            }
        }
        let stake = self.stakes[tx.agent_id];
        match tx.kind {
            TxKind::Deposit => {
                let new_stake = stake.checked_add(tx.amount).ok_or(LedgerError::Overflow)?;
                let total = self.deposited_total.checked_add(tx.amount).ok_or(LedgerError::Overflow)?;
                self.stakes[tx.agent_id] = new_stake;
                self.deposited_total = total;
            }
            TxKind::Return | TxKind::Forfeit => {
                let new_stake = stake.checked_sub(tx.amount).ok_or(LedgerError::Overdraw {
                    step: tx.step,
                    agent_id: tx.agent_id,
                    amount: tx.amount.0,
                    stake: stake.0,
                })?;
                let slot = if tx.kind == TxKind::Return {
                    &mut self.returned_total
                } else {
                    &mut self.forfeited_total
                };
                *slot = slot.checked_add(tx.amount).ok_or(LedgerError::Overflow)?;
                self.stakes[tx.agent_id] = new_stake;
            }
        }
        self.log.push(tx);
        Ok(())
    }

    /// Conservation check against the running totals, O(agents).
    pub fn running_totals_conserved(&self) -> bool {
        let outstanding: u128 = self.stakes.iter().map(|s| u128::from(s.0)).sum();
        u128::from(self.deposited_total.0)
            == u128::from(self.returned_total.0) + u128::from(self.forfeited_total.0) + outstanding
    }

    /// Tokens the agent paid in and did not get back: deposits minus returns.
    pub fn net_flow(&self, agent_id: usize) -> i128 {
        self.log
            .iter()
            .filter(|t| t.agent_id == agent_id)
            .map(|t| match t.kind {
                TxKind::Deposit => i128::from(t.amount.0),
                TxKind::Return => -i128::from(t.amount.0),
                TxKind::Forfeit => 0,
            })
            .sum()
    }

    pub fn write_to<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_log(&self.log, out)
    }
}

/// True iff deposits equal returns plus forfeits plus recorded stakes, and the
/// recorded forfeit total matches the log, recomputed from scratch in exact integers.
pub fn verify_conservation(ledger: &Ledger) -> bool {
    let mut deposits: u128 = 0;
    let mut returns: u128 = 0;
    let mut forfeits: u128 = 0;
    for tx in &ledger.log {
        let amount = u128::from(tx.amount.0);
        match tx.kind {
            TxKind::Deposit => deposits += amount,
            TxKind::Return => returns += amount,
            TxKind::Forfeit => forfeits += amount,
        }
    }
    let outstanding: u128 = ledger.stakes.iter().map(|s| u128::from(s.0)).sum();
    deposits == returns + forfeits + outstanding && forfeits == u128::from(ledger.forfeited_total.0)
}

pub fn write_log<W: Write>(log: &[LedgerTransaction], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LEDGER_HEADER}")?;
    for tx in log {
        writeln!(out, "{},{},{},{}", tx.step, tx.agent_id, tx.kind.code(), tx.amount.0)?;
    }
    out.flush()
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<LedgerTransaction>, LedgerError> {
    let mut log = Vec::new();
    let mut saw_header = false;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| LedgerError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if !saw_header {
            if trimmed != LEDGER_HEADER {
                return Err(LedgerError::Parse {
                    line: line_no,
                    message: format!("expected header '{LEDGER_HEADER}'"),
                });
            }
            saw_header = true;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let err = |message: String| LedgerError::Parse { line: line_no, message };
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let step = fields[0].parse().map_err(|e| err(format!("step: {e}")))?;
        let agent_id = fields[1].parse().map_err(|e| err(format!("agent_id: {e}")))?;
        let kind = fields[2].parse().map_err(err)?;
        let amount = fields[3].parse().map_err(|e| err(format!("amount: {e}")))?;
        log.push(LedgerTransaction::new(step, agent_id, kind, TokenAmount(amount)));
    }
    if !saw_header {
        return Err(LedgerError::Parse {
            line: 1,
            message: format!("expected header '{LEDGER_HEADER}'"),
        });
    }
    Ok(log)
}

/// Per-agent bookkeeping for a bond policy over one run.
#[derive(Debug, Clone)]
pub struct PolicyEngine {
    kind: PolicyKind,
    contract_length: u64,
    horizon: u64,
    clean: Vec<bool>,
}

impl PolicyEngine {
    /// `contract_length` only matters for [`PolicyKind::FixedPenalty`]; 0 means "the whole horizon".
    pub fn new(kind: PolicyKind, agents: usize, horizon: u64, contract_length: u64) -> Self {
        let contract_length = if contract_length == 0 { horizon.max(1) } else { contract_length };
        Self {
            kind,
            contract_length,
            horizon,
            clean: vec![true; agents],
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    /// Initial stake at step 0.
    pub fn enroll(&mut self, ledger: &mut Ledger, agent_id: usize, price: TokenAmount) -> Result<Vec<LedgerTransaction>, LedgerError> {
        self.clean[agent_id] = true;
        let tx = LedgerTransaction::new(0, agent_id, TxKind::Deposit, price);
        ledger.append(tx)?;
        Ok(vec![tx])
    }

    /// Settle agent `agent_id` after its draw at `step` (≥ 1) and re-stake at `price`.
    ///
    /// At the final step of the horizon nothing is re-staked and any
    /// remaining stake of a compliant agent is returned.
    pub fn apply(
        &mut self,
        ledger: &mut Ledger,
        step: u64,
        agent_id: usize,
        complied: bool,
        price: TokenAmount,
    ) -> Result<Vec<LedgerTransaction>, LedgerError> {
        let last = step >= self.horizon;
        let stake = ledger.stake(agent_id);
        let mut txs = Vec::with_capacity(2);
        match self.kind {
            PolicyKind::AdaptivePenalty => {
                let kind = if complied { TxKind::Return } else { TxKind::Forfeit };
                txs.push(LedgerTransaction::new(step, agent_id, kind, stake));
                if !last {
                    txs.push(LedgerTransaction::new(step, agent_id, TxKind::Deposit, price));
                }
            }
            PolicyKind::FixedPenalty => {
                self.clean[agent_id] &= complied;
                if last || step.is_multiple_of(self.contract_length) {
                    let kind = if self.clean[agent_id] { TxKind::Return } else { TxKind::Forfeit };
                    txs.push(LedgerTransaction::new(step, agent_id, kind, stake));
                    self.clean[agent_id] = true;
                    if !last {
                        txs.push(LedgerTransaction::new(step, agent_id, TxKind::Deposit, price));
                    }
                }
            }
            PolicyKind::EventDriven => {
                if !complied {
                    txs.push(LedgerTransaction::new(step, agent_id, TxKind::Forfeit, stake));
                    if !last {
                        txs.push(LedgerTransaction::new(step, agent_id, TxKind::Deposit, price));
                    }
                } else if last {
                    if stake > TokenAmount::ZERO {
                        txs.push(LedgerTransaction::new(step, agent_id, TxKind::Return, stake));
                    }
                } else if stake == TokenAmount::ZERO && price > TokenAmount::ZERO {
                    // Zero-stake agents re-enroll at the current price.
                    txs.push(LedgerTransaction::new(step, agent_id, TxKind::Deposit, price));
                }
            }
        }
        for tx in &txs {
            ledger.append(*tx)?;
        }
        Ok(txs)
    }

    /// Whether a draw at `step` can be read back from the ledger: a settlement is
    /// emitted at every step whether the agent complied or not.
    pub fn settles_every_step(&self) -> bool {
        match self.kind {
            PolicyKind::AdaptivePenalty => true,
            PolicyKind::FixedPenalty => self.contract_length == 1,
            PolicyKind::EventDriven => false,
        }
    }
}
