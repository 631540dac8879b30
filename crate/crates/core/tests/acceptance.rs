//! End-to-end checks of the reference scenarios, the epsilon scaling, the
//! martingale bound, the reference ODE, the ledger and run determinism.
//! Each test prints one `criterion N: PASS|FAIL` line before asserting.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compliance_lab::audit::reconstruct_signals;
use compliance_lab::config::to_config_text;
use compliance_lab::ledger::{verify_conservation, write_log, Ledger, TokenAmount, TxKind};
use compliance_lab::model::ScalingParams;
use compliance_lab::montecarlo::{epsilon_sweep, martingale_diagnostic, run_ensemble, AggregateResult, Capture, SweepOptions};
use compliance_lab::reference::{
    lyapunov_value, ode_integrate, region_excursion_solution, region_excursion_z1, stability_eigenvalues, RefParams, RefPoint,
};
use compliance_lab::scenarios::{build_scenario, ScenarioKind, ScenarioOverrides};
use compliance_lab::stats;
use compliance_lab::SimConfig;

const BIN: &str = env!("CARGO_BIN_EXE_compliance-lab");

/// Written straight to stderr so the line shows up even when output is captured.
fn verdict(n: u32, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn scenario(kind: ScenarioKind, diagnostics: bool, capture: Capture) -> AggregateResult {
    let mut sim = build_scenario(kind, &ScenarioOverrides::default()).unwrap();
    sim.record_diagnostics = diagnostics;
    run_ensemble(&sim, &capture, None).unwrap()
}

fn scenario_two() -> &'static AggregateResult {
    static CELL: OnceLock<AggregateResult> = OnceLock::new();
    CELL.get_or_init(|| {
        scenario(
            ScenarioKind::Both,
            true,
            Capture {
                ledger: true,
                signals: true,
                window: 0,
            },
        )
    })
}

fn scenario_three() -> &'static AggregateResult {
    static CELL: OnceLock<AggregateResult> = OnceLock::new();
    CELL.get_or_init(|| scenario(ScenarioKind::IndividualOnlyDefectors, false, Capture::default()))
}

fn scenario_four() -> &'static AggregateResult {
    static CELL: OnceLock<AggregateResult> = OnceLock::new();
    CELL.get_or_init(|| scenario(ScenarioKind::BothDefectors, false, Capture::default()))
}

fn rate_spread(agg: &AggregateResult) -> f64 {
    let rates: Vec<f64> = agg.agents.iter().map(|a| a.compliance_rate).collect();
    stats::percentile(&rates, 0.9) - stats::percentile(&rates, 0.1)
}

#[test]
fn criterion_01_scenario_two_reaches_target() {
    let agg = scenario_two();
    let m = agg.mean_compliance_between(400, 500);
    let final_mbar = *agg.mean.mean_mbar.last().unwrap();
    verdict(
        1,
        (m - 0.85).abs() <= 0.02 && (0.83..=0.87).contains(&final_mbar),
        format!("mean M over k in [400, 500] = {m:.4}, final mean Mbar = {final_mbar:.4}"),
    );
}

#[test]
fn criterion_02_scenario_one_is_unfair() {
    let one = scenario(ScenarioKind::GlobalOnly, false, Capture::default());
    let m = one.mean_compliance_between(400, 500);
    let qs: Vec<f64> = one.agents.iter().map(|a| a.q).collect();
    let rates: Vec<f64> = one.agents.iter().map(|a| a.compliance_rate).collect();
    let rho = stats::spearman(&qs, &rates);
    let spread_one = rate_spread(&one);
    let spread_two = rate_spread(scenario_two());
    verdict(
        2,
        (m - 0.85).abs() <= 0.02 && rho >= 0.9 && spread_one >= 3.0 * spread_two,
        format!("mean = {m:.4}, spearman = {rho:.4}, p90-p10 spread I = {spread_one:.4} vs II = {spread_two:.4}"),
    );
}

#[test]
fn criterion_03_scenario_three_fails_then_recovers() {
    let agg = scenario_three();
    let during = agg.mean_compliance_between(60, 100);
    let after = agg.mean_compliance_between(400, 500);
    assert!(agg.mean.c_global.iter().all(|&c| c == 0.0));
    verdict(
        3,
        during <= 0.80 && (after - 0.85).abs() <= 0.02,
        format!("mean over [60, 100] = {during:.4}, over [400, 500] = {after:.4}"),
    );
}

#[test]
fn criterion_04_global_signal_corrects_defection() {
    let three = scenario_three();
    let four = scenario_four();
    let during = four.mean_compliance_between(60, 100);
    let window_mean = |r: &compliance_lab::RunResult| stats::mean(&r.series.mean_m[60..=100]);
    let wins = three
        .runs
        .iter()
        .zip(&four.runs)
        .inspect(|(a, b)| assert_eq!(a.seed, b.seed))
        .filter(|(a, b)| window_mean(b) > window_mean(a))
        .count();
    let share = wins as f64 / four.runs.len() as f64;
    verdict(
        4,
        during >= 0.82 && share >= 0.9,
        format!("scenario IV mean over [60, 100] = {during:.4}, paired wins over III = {wins}/{}", four.runs.len()),
    );
}

#[test]
fn criterion_05_epsilon_scaling() {
    let base = SimConfig {
        n: 200,
        base_seed: 5,
        ..SimConfig::default()
    };
    let scaling = ScalingParams {
        epsilon: 0.08,
        w: 1.0,
        alpha0: 1.0,
        beta0: 1.0,
    };
    let opts = SweepOptions {
        reps: 50,
        ..SweepOptions::default()
    };
    let table = epsilon_sweep(&base, scaling, &[0.08, 0.04, 0.02], &opts).unwrap();
    let dev: Vec<f64> = table.rows.iter().map(|r| r.deviation).collect();
    let monotone = dev.windows(2).all(|w| w[1] <= w[0]);
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("eps {} msd {:.3e} dev {:.4}", r.epsilon, r.msd, r.deviation))
        .collect();
    verdict(
        5,
        (0.5..=1.5).contains(&table.slope) && monotone,
        format!("slope = {:.3}; {}", table.slope, rows.join("; ")),
    );
}

#[test]
fn criterion_06_martingale_variance_bound() {
    let synthetic = SimConfig {
        n: 20,
        q_low: 0.5,
        q_high: 0.5,
        horizon: 200,
        reps: 500,
        base_seed: 11,
        record_diagnostics: true,
        control: compliance_lab::ControlConfig {
            enable_global: false,
            enable_individual: false,
            ..compliance_lab::ControlConfig::DEFAULT
        },
        ..SimConfig::default()
    };
    let agg = run_ensemble(&synthetic, &Capture::default(), None).unwrap();
    let report = martingale_diagnostic(&agg.runs, 1.0).unwrap();
    let ratio = report.ratio(200);
    let live = martingale_diagnostic(&scenario_two().runs, 1.0).unwrap();
    verdict(
        6,
        (0.23..=0.27).contains(&ratio) && live.within_bound(0.05),
        format!("synthetic ratio at k = 200: {ratio:.4}; scenario II max ratio {:.4}", live.max_ratio()),
    );
}

#[test]
fn criterion_07_reference_ode() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let starts: Vec<RefPoint> = (0..100).map(|_| RefPoint::new(rng.random(), rng.random())).collect();
    let mut failures = Vec::new();
    let mut excursions = 0;
    let mut worst_closed_form = 0.0f64;
    for (w, beta0) in [(1.0, 1.0), (1.0, 0.5), (2.0, 1.0)] {
        let p = RefParams {
            w,
            beta0,
            q_star: 0.85,
            epsilon: 0.0,
        };
        let exit_time = 1.0 / (w * (1.0 - p.q_star));
        for &z0 in &starts {
            let traj = ode_integrate(z0, &p, 200.0 / w, p.default_dt());
            if traj.last().dist(p.fixed_point()) > 1e-6 {
                failures.push(format!("w {w} beta0 {beta0} start {z0:?} ends at {:?}", traj.last()));
            }
            for pair in traj.z.windows(2) {
                if pair[0].in_unit_square() && pair[1].in_unit_square() {
                    let (v0, v1) = (lyapunov_value(pair[0], &p), lyapunov_value(pair[1], &p));
                    if v1 > v0 + 1e-9 {
                        failures.push(format!("V rose from {v0} to {v1}"));
                        break;
                    }
                }
            }
            // Excursions into z2 >= 1 entered from below.
            let mut i = 1;
            while i < traj.z.len() {
                if traj.z[i].y2 >= 1.0 && traj.z[i - 1].y2 < 1.0 {
                    excursions += 1;
                    let entry = traj.z[i];
                    let t0 = traj.t[i];
                    let mut j = i;
                    let mut peak = entry.y2;
                    while j < traj.z.len() && traj.z[j].y2 >= 1.0 {
                        let t = traj.t[j] - t0;
                        let z2 = region_excursion_solution(entry.y2, entry.y1, &p, t);
                        let z1 = region_excursion_z1(entry.y1, &p, t);
                        let err = (z2 - traj.z[j].y2).abs().max((z1 - traj.z[j].y1).abs());
                        worst_closed_form = worst_closed_form.max(err);
                        peak = peak.max(traj.z[j].y2);
                        j += 1;
                    }
                    let duration = traj.t[j.min(traj.z.len() - 1)] - t0;
                    if peak > 1.0 + beta0 || duration >= exit_time {
                        failures.push(format!("excursion peak {peak} duration {duration}"));
                    }
                    i = j;
                }
                i += 1;
            }
        }
    }
    verdict(
        7,
        failures.is_empty() && excursions > 0 && worst_closed_form <= 1e-6,
        format!(
            "{} problems, {excursions} excursions, worst closed-form gap {worst_closed_form:.2e}{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    );
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Sum of terms given as exact (hi, lo) pairs, carried in double-double.
fn exact_sum(terms: &[(f64, f64)]) -> f64 {
    let (mut hi, mut lo) = (0.0, 0.0);
    for &(th, tl) in terms {
        let (s, e) = two_sum(hi, th);
        hi = s;
        lo += e + tl;
    }
    hi + lo
}

/// `λ² + λ + c` at `z`, evaluated with error-free transforms so that the
/// value stays accurate next to a double root.
fn poly(z: Complex64, c: f64) -> Complex64 {
    let (x, y) = (z.re, z.im);
    let xx = two_prod(x, x);
    let yy = two_prod(y, y);
    let xy = two_prod(2.0 * x, y);
    let re = exact_sum(&[xx, (-yy.0, -yy.1), (x, 0.0), (c, 0.0)]);
    let im = exact_sum(&[xy, (y, 0.0)]);
    Complex64::new(re, im)
}

/// Durand-Kerner for both roots of `λ² + λ + c`, then Newton polishing with
/// compensated evaluation.
fn quadratic_roots_numeric(c: f64) -> [Complex64; 2] {
    let mut r = [Complex64::new(0.4, 0.9), Complex64::new(0.4, 0.9).powu(2)];
    for _ in 0..500 {
        let a = r[0] - poly(r[0], c) / (r[0] - r[1]);
        let b = r[1] - poly(r[1], c) / (r[1] - a);
        if a.is_finite() && b.is_finite() {
            r = [a, b];
        }
    }
    for z in &mut r {
        for _ in 0..200 {
            let f = poly(*z, c);
            let d = *z * 2.0 + 1.0;
            if f == Complex64::new(0.0, 0.0) || d.norm() == 0.0 {
                break;
            }
            *z -= f / d;
        }
    }
    r
}

#[test]
fn criterion_08_stability_eigenvalues() {
    let mut worst = 0.0f64;
    let mut stable = true;
    for beta0 in [0.1, 0.25, 0.5, 1.0] {
        let closed = stability_eigenvalues(beta0);
        let numeric = quadratic_roots_numeric(beta0);
        // Match irrespective of ordering.
        let direct = (closed[0] - numeric[0]).norm().max((closed[1] - numeric[1]).norm());
        let swapped = (closed[0] - numeric[1]).norm().max((closed[1] - numeric[0]).norm());
        worst = worst.max(direct.min(swapped));
        stable &= closed.iter().all(|l| l.re < 0.0);
    }
    verdict(8, worst <= 1e-12 && stable, format!("max root mismatch {worst:.2e}, all real parts negative: {stable}"));
}

fn run_cli(args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("COMPLIANCE_LAB_THREADS", t),
        None => cmd.env_remove("COMPLIANCE_LAB_THREADS"),
    };
    cmd.output().expect("binary runs")
}

#[test]
fn criterion_09_ledger_integrity() {
    let agg = scenario_two();
    let run = &agg.runs[0];
    let ledger = run.ledger.as_ref().unwrap();
    let signals = run.signals.as_ref().unwrap();
    let sim = build_scenario(ScenarioKind::Both, &ScenarioOverrides::default()).unwrap();

    // Conservation at every step boundary, recomputed by replay.
    let mut replay = Ledger::new(sim.n);
    let mut per_step_ok = run.conserved_every_step;
    let log = ledger.log();
    for (i, tx) in log.iter().enumerate() {
        replay.append(*tx).unwrap();
        if log.get(i + 1).is_none_or(|next| next.step != tx.step) {
            per_step_ok &= replay.running_totals_conserved();
        }
    }
    per_step_ok &= verify_conservation(ledger) && verify_conservation(&replay);

    // Every agent pays exactly what it forfeited, so a clean record nets zero.
    let mut forfeits = vec![0i128; sim.n];
    for tx in log.iter().filter(|t| t.kind == TxKind::Forfeit) {
        forfeits[tx.agent_id] += i128::from(tx.amount.0);
    }
    let flows_ok = (0..sim.n).all(|i| ledger.net_flow(i) == forfeits[i]);

    let short = SimConfig { horizon: 3, reps: 1, ..sim.clone() };
    let short_run = &run_ensemble(&short, &Capture { ledger: true, ..Capture::default() }, None).unwrap().runs[0];
    let short_ledger = short_run.ledger.as_ref().unwrap();
    let clean: Vec<usize> = (0..short.n)
        .filter(|&i| !short_ledger.log().iter().any(|t| t.agent_id == i && t.kind == TxKind::Forfeit))
        .collect();
    let clean_ok = !clean.is_empty() && clean.iter().all(|&i| short_ledger.net_flow(i) == 0);

    let rec = reconstruct_signals(log, &sim);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let signals_ok = rec.complete
        && bits(&rec.c_global) == bits(&signals.c_global)
        && rec.c_individual.len() == signals.c_individual.len()
        && rec.c_individual.iter().zip(&signals.c_individual).all(|(a, b)| bits(a) == bits(b));

    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.txt");
    std::fs::write(&cfg_path, to_config_text(&sim)).unwrap();
    let write = |path: &Path, log: &[compliance_lab::LedgerTransaction]| {
        write_log(log, std::io::BufWriter::new(std::fs::File::create(path).unwrap())).unwrap();
    };
    let good = dir.path().join("ledger.txt");
    write(&good, log);
    let mut tampered_log = log.to_vec();
    let idx = tampered_log.iter().position(|t| t.step == 250 && t.kind == TxKind::Deposit).unwrap();
    tampered_log[idx].amount = TokenAmount(tampered_log[idx].amount.0 + 1);
    let bad = dir.path().join("tampered.txt");
    write(&bad, &tampered_log);
    let cfg = cfg_path.to_str().unwrap();
    let good_status = run_cli(&["audit", "--ledger", good.to_str().unwrap(), "--config", cfg], None).status.code();
    let bad_status = run_cli(&["audit", "--ledger", bad.to_str().unwrap(), "--config", cfg], None).status.code();

    verdict(
        9,
        per_step_ok && flows_ok && clean_ok && signals_ok && good_status == Some(0) && bad_status == Some(2),
        format!(
            "conservation {per_step_ok}, net flows {flows_ok}, {} clean agents net zero {clean_ok}, \
             signals bit-identical {signals_ok}, audit exit {good_status:?} / tampered {bad_status:?}",
            clean.len()
        ),
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_10_determinism_across_thread_counts() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("sim.txt");
    std::fs::write(&cfg, "n = 150\nhorizon = 120\nreps = 9\nseed = 3\nscenario = IV\ndefector_frac = 0.1\nrecord_diagnostics = true\n").unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let invocations: Vec<Vec<&str>> = vec![
        vec!["scenario", "--kind", "IV", "--reps", "12", "--seed", "7", "--n", "200", "--horizon", "150"],
        vec!["scenario", "--kind", "I", "--reps", "5", "--seed", "1", "--n", "100", "--horizon", "80", "--policy", "event"],
        vec!["simulate", "--config", &cfg],
        vec!["sweep", "--epsilons", "0.08,0.04", "--w", "1", "--alpha0", "1", "--beta0", "1", "--n", "30", "--reps", "6"],
        vec!["ode", "--beta0", "0.5", "--w", "1", "--qstar", "0.85", "--start", "0.1,0.9", "--T", "20"],
    ];
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (i, args) in invocations.iter().enumerate() {
        let mut outputs = Vec::new();
        for (j, threads) in [Some("1"), Some("4"), None].into_iter().enumerate() {
            let out = root.path().join(format!("run{i}_{j}"));
            let mut full = args.clone();
            full.extend(["--out", out.to_str().unwrap()]);
            let result = run_cli(&full, threads);
            assert_eq!(result.status.code(), Some(0), "{full:?}: {}", String::from_utf8_lossy(&result.stderr));
            outputs.push(dir_bytes(&out));
        }
        files += outputs[0].len();
        if outputs.iter().any(|o| *o != outputs[0]) {
            mismatches.push(args.join(" "));
        }
    }
    verdict(
        10,
        mismatches.is_empty() && files > 0,
        format!("{files} files compared over 3 thread settings; mismatching invocations: {mismatches:?}"),
    );
}
