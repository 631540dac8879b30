//! Seeded Monte Carlo engine.
//!
//! Repetition `r` of a configuration runs with seed [`mix_seed`]`(base_seed, r)`.
//! Repetitions execute on a rayon pool but are collected in index order and
//! reduced sequentially, so every aggregate is identical at any thread count.

use rayon::prelude::*;

use crate::config::SimConfig;
use crate::error::ConfigError;
use crate::error::LedgerError;
use crate::ledger::{bond_price, Ledger, PolicyEngine};
use crate::model::{EnsembleState, ScalingParams};
use crate::rng::{mix_seed, rng_from_seed};
use crate::stats;

/// Trailing window, in steps, for per-agent compliance rates.
pub const TRAILING_WINDOW: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub seed: u64,
    pub horizon: u64,
}

impl RunConfig {
    pub fn new(sim: SimConfig, seed: u64) -> Self {
        let horizon = sim.horizon;
        Self { sim, seed, horizon }
    }

    /// Configuration of repetition `rep` of `sim`.
    pub fn for_rep(sim: &SimConfig, rep: usize) -> Self {
        Self::new(sim.clone(), mix_seed(sim.base_seed, rep as u64))
    }
}

/// Optional per-run recordings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capture {
    /// Keep the token ledger (first repetition only inside an ensemble).
    pub ledger: bool,
    /// Keep every `c_i(k)` (first repetition only inside an ensemble).
    pub signals: bool,
    /// Keep `M̄_i(k)` for the last `window` steps of every repetition.
    pub window: u64,
}

/// Per-step ensemble series, each of length `horizon + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub mean_m: Vec<f64>,
    pub mean_mbar: Vec<f64>,
    pub c_global: Vec<f64>,
    pub mean_c: Vec<f64>,
    pub mbar_p10: Vec<f64>,
    pub mbar_p90: Vec<f64>,
}

impl Series {
    fn with_capacity(len: usize) -> Self {
        Self {
            mean_m: Vec::with_capacity(len),
            mean_mbar: Vec::with_capacity(len),
            c_global: Vec::with_capacity(len),
            mean_c: Vec::with_capacity(len),
            mbar_p10: Vec::with_capacity(len),
            mbar_p90: Vec::with_capacity(len),
        }
    }

    pub fn len(&self) -> usize {
        self.mean_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_m.is_empty()
    }

    fn columns(&self) -> [&Vec<f64>; 6] {
        [&self.mean_m, &self.mean_mbar, &self.c_global, &self.mean_c, &self.mbar_p10, &self.mbar_p90]
    }

    fn columns_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.mean_m,
            &mut self.mean_mbar,
            &mut self.c_global,
            &mut self.mean_c,
            &mut self.mbar_p10,
            &mut self.mbar_p90,
        ]
    }

    fn record(&mut self, state: &EnsembleState, scratch: &mut Vec<f64>) {
        let n = state.len() as f64;
        scratch.clear();
        scratch.extend(state.agents.iter().map(|a| a.state.m_bar));
        self.mean_m.push(state.mean_m());
        self.mean_mbar.push(scratch.iter().sum::<f64>() / n);
        self.c_global.push(state.global.c_global);
        self.mean_c.push(state.agents.iter().map(|a| a.state.c).sum::<f64>() / n);
        scratch.sort_unstable_by(f64::total_cmp);
        self.mbar_p10.push(stats::percentile_sorted(scratch, 0.1));
        self.mbar_p90.push(stats::percentile_sorted(scratch, 0.9));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSummary {
    pub id: usize,
    pub q: f64,
    pub final_mbar: f64,
    /// Fraction of compliant draws over the last `min(100, horizon)` steps.
    pub compliance_rate: f64,
    pub final_c: f64,
}

/// Martingale bookkeeping for the compliance innovation `ξ_i(k) = M_i(k) − p_i(k)`,
/// where `p_i(k)` is the probability used for that draw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Agent mean of `(Σ_{j≤k} ξ_i(j))²`, index `k`.
    pub partial_sum_sq: Vec<f64>,
    /// Agent mean of the conditional variance `p_i(k)(1 − p_i(k))`, index `k` (0 at k = 0).
    pub conditional_var: Vec<f64>,
}

/// Full signal history of one run, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalHistory {
    pub c_global: Vec<f64>,
    pub c_individual: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub series: Series,
    pub agents: Vec<AgentSummary>,
    pub diagnostics: Option<Diagnostics>,
    /// `M̄_i(k)` for the captured trailing window, step-major.
    pub trailing_mbar: Vec<Vec<f64>>,
    pub ledger: Option<Ledger>,
    /// False if the running conservation identity ever failed after a step.
    pub conserved_every_step: bool,
    pub signals: Option<SignalHistory>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub fn run_single(cfg: &RunConfig) -> Result<RunResult, RunError> {
    run_single_with(cfg, &Capture::default())
}

pub fn run_single_with(cfg: &RunConfig, capture: &Capture) -> Result<RunResult, RunError> {
    let sim = &cfg.sim;
    sim.validate()?;
    if cfg.horizon == 0 {
        return Err(ConfigError::Invalid("horizon must be at least 1".into()).into());
    }
    let horizon = cfg.horizon;
    let n = sim.n;
    let control = &sim.control;
    let q = sim.proclivities();
    let defect_mask = sim.defectors.map(|d| (d, d.select(n)));
    let mut state = EnsembleState::new(&q, sim.initial_mbar());
    let mut rng = rng_from_seed(cfg.seed);

    let len = horizon as usize + 1;
    let mut series = Series::with_capacity(len);
    let mut scratch = Vec::with_capacity(n);
    series.record(&state, &mut scratch);

    let mut diagnostics = sim.record_diagnostics.then(|| Diagnostics {
        partial_sum_sq: vec![0.0],
        conditional_var: vec![0.0],
    });
    let mut partial_sums = vec![0.0f64; if diagnostics.is_some() { n } else { 0 }];

    let mut signals = capture.signals.then(|| SignalHistory {
        c_global: vec![state.global.c_global],
        c_individual: vec![state.agents.iter().map(|a| a.state.c).collect()],
    });

    let mut ledger_parts = if capture.ledger {
        let mut ledger = Ledger::new(n);
        let mut engine = PolicyEngine::new(sim.policy, n, horizon, sim.contract_length);
        for agent in &state.agents {
            let price = bond_price(state.global.c_global, agent.state.c, sim.unit_scale);
            engine.enroll(&mut ledger, agent.params.id, price)?;
        }
        Some((ledger, engine))
    } else {
        None
    };
    let mut conserved_every_step = ledger_parts.as_ref().is_none_or(|(l, _)| l.running_totals_conserved());

    let window = TRAILING_WINDOW.min(horizon);
    let mut complied_in_window = vec![0u32; n];
    let mut trailing_mbar = Vec::new();

    for k in 0..horizon {
        let draw_step = k + 1;
        if let Some((d, mask)) = &defect_mask {
            let active = d.is_active(draw_step);
            for (agent, &is_defector) in state.agents.iter_mut().zip(mask) {
                agent.state.defecting = active && is_defector;
            }
        }
        state.step(control, &mut rng);

        if let Some(diag) = diagnostics.as_mut() {
            let mut sq = 0.0;
            let mut var = 0.0;
            for (s, agent) in partial_sums.iter_mut().zip(&state.agents) {
                let p = agent.state.last_prob;
                *s += f64::from(agent.state.last_m) - p;
                sq += *s * *s;
                var += p * (1.0 - p);
            }
            diag.partial_sum_sq.push(sq / n as f64);
            diag.conditional_var.push(var / n as f64);
        }
        if draw_step > horizon - window {
            for (count, agent) in complied_in_window.iter_mut().zip(&state.agents) {
                *count += u32::from(agent.state.last_m);
            }
        }
        if capture.window > 0 && draw_step + capture.window > horizon {
            trailing_mbar.push(state.agents.iter().map(|a| a.state.m_bar).collect());
        }
        if let Some((ledger, engine)) = ledger_parts.as_mut() {
            for agent in &state.agents {
                let price = bond_price(state.global.c_global, agent.state.c, sim.unit_scale);
                engine.apply(ledger, draw_step, agent.params.id, agent.state.last_m == 1, price)?;
            }
            conserved_every_step &= ledger.running_totals_conserved();
        }
        if let Some(sig) = signals.as_mut() {
            sig.c_global.push(state.global.c_global);
            sig.c_individual.push(state.agents.iter().map(|a| a.state.c).collect());
        }
        series.record(&state, &mut scratch);
    }

    let agents = state
        .agents
        .iter()
        .zip(&complied_in_window)
        .map(|(a, &count)| AgentSummary {
            id: a.params.id,
            q: a.params.q,
            final_mbar: a.state.m_bar,
            compliance_rate: f64::from(count) / window as f64,
            final_c: a.state.c,
        })
        .collect();

    Ok(RunResult {
        seed: cfg.seed,
        series,
        agents,
        diagnostics,
        trailing_mbar,
        ledger: ledger_parts.map(|(l, _)| l),
        conserved_every_step,
        signals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub reps: usize,
    pub mean: Series,
    pub std: Series,
    /// Per-agent summaries averaged over repetitions (proclivities are shared).
    pub agents: Vec<AgentSummary>,
    /// Repetition mean of each run's diagnostics, when recorded.
    pub diagnostics: Option<Diagnostics>,
    pub runs: Vec<RunResult>,
}

impl AggregateResult {
    /// Order-preserving reduction of repetition results.
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        assert!(!runs.is_empty(), "aggregate needs at least one run");
        let reps = runs.len();
        let len = runs[0].series.len();
        let mut mean = Series::default();
        let mut std = Series::default();
        let mut column = Vec::with_capacity(reps);
        for (c, (m_col, s_col)) in mean.columns_mut().into_iter().zip(std.columns_mut()).enumerate() {
            for k in 0..len {
                column.clear();
                column.extend(runs.iter().map(|r| r.series.columns()[c][k]));
                m_col.push(stats::mean(&column));
                s_col.push(stats::std_dev(&column));
            }
        }
        let agents = (0..runs[0].agents.len())
            .map(|i| {
                let avg = |f: fn(&AgentSummary) -> f64| runs.iter().map(|r| f(&r.agents[i])).sum::<f64>() / reps as f64;
                AgentSummary {
                    id: runs[0].agents[i].id,
                    q: runs[0].agents[i].q,
                    final_mbar: avg(|a| a.final_mbar),
                    compliance_rate: avg(|a| a.compliance_rate),
                    final_c: avg(|a| a.final_c),
                }
            })
            .collect();
        let diagnostics = runs.iter().all(|r| r.diagnostics.is_some()).then(|| {
            let avg = |f: fn(&Diagnostics) -> &Vec<f64>| {
                (0..len)
                    .map(|k| runs.iter().map(|r| f(r.diagnostics.as_ref().unwrap())[k]).sum::<f64>() / reps as f64)
                    .collect()
            };
            Diagnostics {
                partial_sum_sq: avg(|d| &d.partial_sum_sq),
                conditional_var: avg(|d| &d.conditional_var),
            }
        });
        Self {
            reps,
            mean,
            std,
            agents,
            diagnostics,
            runs,
        }
    }

    /// Mean over `k ∈ [from, to]` of the repetition-mean compliance series.
    pub fn mean_compliance_between(&self, from: usize, to: usize) -> f64 {
        stats::mean(&self.mean.mean_m[from..=to])
    }
}

/// Run `sim.reps` repetitions; `threads = None` uses the global rayon pool.
pub fn run_ensemble(sim: &SimConfig, capture: &Capture, threads: Option<usize>) -> Result<AggregateResult, RunError> {
    sim.validate()?;
    let job = || -> Result<Vec<RunResult>, RunError> {
        (0..sim.reps)
            .into_par_iter()
            .map(|rep| {
                let rep_capture = Capture {
                    ledger: capture.ledger && rep == 0,
                    signals: capture.signals && rep == 0,
                    window: capture.window,
                };
                run_single_with(&RunConfig::for_rep(sim, rep), &rep_capture)
            })
            .collect()
    };
    let runs = match threads {
        None => job()?,
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| RunError::Pool(e.to_string()))?
            .install(job)?,
    };
    Ok(AggregateResult::from_runs(runs))
}

/// Pooled fraction of captured `(rep, agent, step)` samples with `|M̄ − Q*| > δ`.
pub fn deviation_probability(runs: &[RunResult], q_star: f64, delta: f64) -> Option<f64> {
    let mut total = 0u64;
    let mut hits = 0u64;
    for run in runs {
        for row in &run.trailing_mbar {
            total += row.len() as u64;
            hits += row.iter().filter(|m| (*m - q_star).abs() > delta).count() as u64;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Same estimate kept separate per agent.
pub fn deviation_probability_per_agent(runs: &[RunResult], q_star: f64, delta: f64) -> Vec<f64> {
    let n = runs.first().and_then(|r| r.trailing_mbar.first()).map_or(0, Vec::len);
    let mut hits = vec![0u64; n];
    let mut samples = 0u64;
    for run in runs {
        for row in &run.trailing_mbar {
            samples += 1;
            for (h, m) in hits.iter_mut().zip(row) {
                *h += u64::from((m - q_star).abs() > delta);
            }
        }
    }
    hits.into_iter().map(|h| h as f64 / samples as f64).collect()
}

/// Mean of `(M̄ − Q*)²` over the captured window, with its standard error across repetitions.
pub fn mean_squared_deviation(runs: &[RunResult], q_star: f64) -> (f64, f64) {
    let per_rep: Vec<f64> = runs
        .iter()
        .map(|run| {
            let count: usize = run.trailing_mbar.iter().map(Vec::len).sum();
            let sum: f64 = run.trailing_mbar.iter().flatten().map(|m| (m - q_star) * (m - q_star)).sum();
            sum / count as f64
        })
        .collect();
    let se = if per_rep.len() > 1 {
        let m = stats::mean(&per_rep);
        (per_rep.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (per_rep.len() - 1) as f64 / per_rep.len() as f64).sqrt()
    } else {
        0.0
    };
    (stats::mean(&per_rep), se)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub reps: usize,
    /// Transient discarded before the window, in units of `1/w` of continuous time `t = εk`.
    pub settle_time: f64,
    pub window_time: f64,
    pub delta: f64,
    pub threads: Option<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            reps: 50,
            settle_time: 40.0,
            window_time: 20.0,
            delta: 0.1,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub horizon: u64,
    pub window: u64,
    pub msd: f64,
    pub msd_se: f64,
    pub deviation: f64,
    /// `sqrt(msd / (4ε))`, the constant in `msd ≤ (2 ε^{1/2} K₃)²` at equality.
    pub k3_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `ln msd` against `ln ε`; NaN with fewer than two rows.
    pub slope: f64,
}

/// Run the ensemble at each `ε` with gains from the scaling relations and
/// report trailing-window statistics of `M̄_i` around `Q*`.
pub fn epsilon_sweep(base: &SimConfig, scaling: ScalingParams, eps_list: &[f64], opts: &SweepOptions) -> Result<SweepTable, RunError> {
    let mut rows = Vec::with_capacity(eps_list.len());
    for &epsilon in eps_list {
        let s = ScalingParams { epsilon, ..scaling };
        let mut sim = base.clone().with_scaling(s)?;
        let steps_per_unit = 1.0 / (epsilon * s.w);
        let window = (opts.window_time * steps_per_unit).ceil().max(1.0) as u64;
        sim.horizon = (opts.settle_time * steps_per_unit).ceil() as u64 + window;
        sim.reps = opts.reps;
        let capture = Capture {
            window,
            ..Capture::default()
        };
        let agg = run_ensemble(&sim, &capture, opts.threads)?;
        let q_star = sim.control.q_star;
        let (msd, msd_se) = mean_squared_deviation(&agg.runs, q_star);
        rows.push(SweepRow {
            epsilon,
            alpha: sim.control.alpha,
            beta: sim.control.beta,
            gamma: sim.control.gamma,
            horizon: sim.horizon,
            window,
            msd,
            msd_se,
            deviation: deviation_probability(&agg.runs, q_star, opts.delta).unwrap_or(f64::NAN),
            k3_hat: (msd / (4.0 * epsilon)).sqrt(),
        });
    }
    let slope = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.epsilon.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.msd.ln()).collect();
        stats::ols_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(SweepTable { rows, slope })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub w: f64,
    /// `E[‖Σ_{j≤k} θ(j)‖²]` with `θ₁ = w ξ`, index `k`.
    pub second_moment: Vec<f64>,
    /// Upper bound `w² k / 4`, index `k`.
    pub bound: Vec<f64>,
}

impl MartingaleReport {
    /// `second_moment[k] / (w² k)` for `k ≥ 1`.
    pub fn ratio(&self, k: usize) -> f64 {
        self.second_moment[k] / (self.w * self.w * k as f64)
    }

    pub fn max_ratio(&self) -> f64 {
        (1..self.second_moment.len()).map(|k| self.ratio(k)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Whether every `k` satisfies `second_moment ≤ bound · (1 + margin)`.
    pub fn within_bound(&self, margin: f64) -> bool {
        self.second_moment
            .iter()
            .zip(&self.bound)
            .all(|(m, b)| *m <= b * (1.0 + margin))
    }
}

/// Empirical second moment of the partial sums of `θ₁ = w ξ`, pooled over agents and repetitions.
pub fn martingale_diagnostic(runs: &[RunResult], w: f64) -> Option<MartingaleReport> {
    let first = runs.first()?.diagnostics.as_ref()?;
    let len = first.partial_sum_sq.len();
    let mut second_moment = vec![0.0; len];
    for run in runs {
        let d = run.diagnostics.as_ref()?;
        for (acc, v) in second_moment.iter_mut().zip(&d.partial_sum_sq) {
            *acc += v;
        }
    }
    let w2 = w * w;
    for v in &mut second_moment {
        *v *= w2 / runs.len() as f64;
    }
    let bound = (0..len).map(|k| w2 * k as f64 / 4.0).collect();
    Some(MartingaleReport { w, second_moment, bound })
}
