//! Ledger replay audit.
//!
//! Under a policy that settles every agent at every step, the public log
//! reveals each draw `M_i(k)` (a return means compliance, a forfeit means
//! violation). Feeding those draws back through the controller updates
//! reproduces `C(k)` and `c_i(k)` with the same floating-point operations as
//! the simulator, so any participant can recompute every posted bond price.

use std::fmt;

use crate::config::SimConfig;
use crate::ledger::{bond_price, verify_conservation, Ledger, LedgerTransaction, PolicyKind, TokenAmount, TxKind};
use crate::model::ema_update;

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `C(k)` for every reconstructed step, starting at `k = 0`.
    pub c_global: Vec<f64>,
    /// `c_i(k)`, step-major.
    pub c_individual: Vec<Vec<f64>>,
    /// Inferred draws `M_i(k)` for `k = 1..`, step-major (entry 0 is step 1).
    pub compliance: Vec<Vec<u8>>,
    /// False when some draw could not be inferred and the series stop early.
    pub complete: bool,
}

impl Reconstruction {
    pub fn steps(&self) -> usize {
        self.c_global.len()
    }
}

fn settles_every_step(cfg: &SimConfig) -> bool {
    match cfg.policy {
        PolicyKind::AdaptivePenalty => true,
        PolicyKind::FixedPenalty => cfg.contract_length == 1 || cfg.horizon == 1,
        PolicyKind::EventDriven => false,
    }
}

/// Draws readable from the log, `None` where the ledger is silent or ambiguous.
fn infer_compliance(log: &[LedgerTransaction], cfg: &SimConfig) -> Vec<Vec<Option<u8>>> {
    let n = cfg.n;
    let horizon = cfg.horizon as usize;
    let mut out = vec![vec![None; n]; horizon];
    let every_step = settles_every_step(cfg);
    let forfeit_is_violation = every_step || cfg.policy == PolicyKind::EventDriven;
    for tx in log {
        let k = tx.step as usize;
        if k == 0 || k > horizon || tx.agent_id >= n {
            continue;
        }
        let slot = &mut out[k - 1][tx.agent_id];
        match tx.kind {
            TxKind::Forfeit if forfeit_is_violation => *slot = Some(0),
            TxKind::Return if every_step => *slot = Some(1),
            _ => {}
        }
    }
    out
}

/// Replay the controller from the compliance record implied by `log`.
pub fn reconstruct_signals(log: &[LedgerTransaction], cfg: &SimConfig) -> Reconstruction {
    let n = cfg.n;
    let control = &cfg.control;
    let inferred = infer_compliance(log, cfg);

    let mut c_global = 0.0f64;
    let mut c = vec![0.0f64; n];
    let mut m_bar = vec![cfg.initial_mbar(); n];
    let mut last_m = vec![0u8; n];

    let mut rec = Reconstruction {
        c_global: vec![c_global],
        c_individual: vec![c.clone()],
        compliance: Vec::new(),
        complete: true,
    };
    for row in &inferred {
        let Some(draws) = row.iter().copied().collect::<Option<Vec<u8>>>() else {
            rec.complete = false;
            break;
        };
        let complied: u64 = last_m.iter().map(|&m| u64::from(m)).sum();
        c_global = control.next_global(c_global, complied as f64 / n as f64);
        for i in 0..n {
            c[i] = control.next_individual(c[i], m_bar[i]);
            m_bar[i] = ema_update(m_bar[i], draws[i], control.gamma);
        }
        last_m.clone_from(&draws);
        rec.c_global.push(c_global);
        rec.c_individual.push(c.clone());
        rec.compliance.push(draws);
    }
    rec
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub transactions: usize,
    pub problems: Vec<String>,
    pub reconstruction: Reconstruction,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} transactions, signals reconstructed for k = 0..={}{}",
            self.transactions,
            self.reconstruction.steps().saturating_sub(1),
            if self.reconstruction.complete { "" } else { " (partial)" }
        )?;
        if self.problems.is_empty() {
            write!(f, "audit passed")
        } else {
            for p in &self.problems {
                writeln!(f, "  - {p}")?;
            }
            write!(f, "audit FAILED with {} problem(s)", self.problems.len())
        }
    }
}

const MAX_REPORTED: usize = 20;

/// Check a log against the configuration that produced it: ordering and
/// overdraw rules, conservation, full-stake settlements, closing balances,
/// and every deposit against the price implied by the reconstructed signals.
pub fn audit_ledger(log: &[LedgerTransaction], cfg: &SimConfig) -> AuditReport {
    let reconstruction = reconstruct_signals(log, cfg);
    let mut problems = Vec::new();
    let mut push = |p: String| {
        if problems.len() < MAX_REPORTED {
            problems.push(p);
        }
    };

    if settles_every_step(cfg) && !reconstruction.complete {
        push(format!(
            "compliance could not be inferred for step {}",
            reconstruction.compliance.len() + 1
        ));
    }

    let mut ledger = Ledger::new(cfg.n);
    for tx in log {
        if tx.step > cfg.horizon {
            push(format!("step {} beyond horizon {}", tx.step, cfg.horizon));
        }
        if tx.agent_id < cfg.n && matches!(tx.kind, TxKind::Return | TxKind::Forfeit) {
            let stake = ledger.stake(tx.agent_id);
            if tx.amount != stake {
                push(format!(
                    "step {}, agent {}: {} of {} does not settle the full stake {}",
                    tx.step,
                    tx.agent_id,
                    tx.kind.code(),
                    tx.amount,
                    stake
                ));
            }
        }
        if tx.kind == TxKind::Deposit {
            let k = tx.step as usize;
            if k < reconstruction.steps() && tx.agent_id < cfg.n {
                let expected = bond_price(reconstruction.c_global[k], reconstruction.c_individual[k][tx.agent_id], cfg.unit_scale);
                if tx.amount != expected {
                    push(format!(
                        "step {}, agent {}: deposit {} but the signals price the bond at {}",
                        tx.step, tx.agent_id, tx.amount, expected
                    ));
                }
            }
        }
        if let Err(e) = ledger.append(*tx) {
            push(e.to_string());
            break;
        }
    }
    if !verify_conservation(&ledger) {
        push("conservation identity violated".into());
    }
    if log.last().is_some_and(|t| t.step == cfg.horizon) {
        let open = ledger.stakes().iter().filter(|s| **s != TokenAmount::ZERO).count();
        if open > 0 {
            push(format!("{open} agent(s) still hold stakes after the final step"));
        }
    } else if !log.is_empty() {
        push(format!("log ends before the final step {}", cfg.horizon));
    }

    AuditReport {
        transactions: log.len(),
        problems,
        reconstruction,
    }
}
