//! CSV emission and the matching readers.
//!
//! Floats are printed with 10 significant digits and no locale dependence, so
//! every file is byte-stable for fixed inputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::montecarlo::{AgentSummary, AggregateResult, MartingaleReport, Series, SweepTable};
use crate::reference::{lyapunov_value, RefParams, Trajectory};

pub const TIMESERIES_HEADER: &str = "k,mean_m,mean_mbar,C,mean_c,mbar_p10,mbar_p90";
pub const AGENTS_HEADER: &str = "agent_id,q,final_mbar,compliance_rate_last100,final_c";
pub const SWEEP_HEADER: &str = "epsilon,alpha,beta,gamma,horizon,window,msd,msd_se,deviation_prob,k3_hat";
pub const TRAJECTORY_HEADER: &str = "t,z1,z2,V";
pub const DIAGNOSTICS_HEADER: &str = "k,second_moment,bound,ratio";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ten significant digits, fixed notation for moderate magnitudes, trailing zeros trimmed.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..=14).contains(&exp) {
        return format!("{x:.9e}");
    }
    let decimals = (9 - exp).max(0) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_with(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), IoError> {
    let mut out = create(path)?;
    body(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

pub fn write_series<W: Write>(series: &Series, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{TIMESERIES_HEADER}")?;
    for k in 0..series.len() {
        writeln!(
            out,
            "{k},{},{},{},{},{},{}",
            format_sig(series.mean_m[k]),
            format_sig(series.mean_mbar[k]),
            format_sig(series.c_global[k]),
            format_sig(series.mean_c[k]),
            format_sig(series.mbar_p10[k]),
            format_sig(series.mbar_p90[k]),
        )?;
    }
    Ok(())
}

/// Repetition-mean series of `agg`, one row per step.
pub fn write_timeseries(agg: &AggregateResult, path: &Path) -> Result<(), IoError> {
    write_with(path, |out| write_series(&agg.mean, out))
}

fn parse_rows(path: &Path, header: &str, width: usize) -> Result<Vec<Vec<f64>>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let parse_err = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if i == 0 {
            if line != header {
                return Err(parse_err(format!("expected header '{header}'")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(format!("expected {width} fields, found {}", fields.len())));
        }
        let row = fields
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("'{f}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_timeseries(path: &Path) -> Result<Series, IoError> {
    let rows = parse_rows(path, TIMESERIES_HEADER, 7)?;
    let mut s = Series::default();
    for (k, row) in rows.iter().enumerate() {
        if row[0] != k as f64 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                message: format!("expected step {k}"),
            });
        }
        s.mean_m.push(row[1]);
        s.mean_mbar.push(row[2]);
        s.c_global.push(row[3]);
        s.mean_c.push(row[4]);
        s.mbar_p10.push(row[5]);
        s.mbar_p90.push(row[6]);
    }
    Ok(s)
}

/// Per-agent summaries sorted by id.
pub fn write_agents(agents: &[AgentSummary], path: &Path) -> Result<(), IoError> {
    let mut sorted: Vec<&AgentSummary> = agents.iter().collect();
    sorted.sort_by_key(|a| a.id);
    write_with(path, |out| {
        writeln!(out, "{AGENTS_HEADER}")?;
        for a in sorted {
            writeln!(
                out,
                "{},{},{},{},{}",
                a.id,
                format_sig(a.q),
                format_sig(a.final_mbar),
                format_sig(a.compliance_rate),
                format_sig(a.final_c)
            )?;
        }
        Ok(())
    })
}

pub fn read_agents(path: &Path) -> Result<Vec<AgentSummary>, IoError> {
    Ok(parse_rows(path, AGENTS_HEADER, 5)?
        .into_iter()
        .map(|r| AgentSummary {
            id: r[0] as usize,
            q: r[1],
            final_mbar: r[2],
            compliance_rate: r[3],
            final_c: r[4],
        })
        .collect())
}

pub fn write_sweep(table: &SweepTable, path: &Path) -> Result<(), IoError> {
    write_with(path, |out| {
        writeln!(out, "{SWEEP_HEADER}")?;
        for r in &table.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                format_sig(r.epsilon),
                format_sig(r.alpha),
                format_sig(r.beta),
                format_sig(r.gamma),
                r.horizon,
                r.window,
                format_sig(r.msd),
                format_sig(r.msd_se),
                format_sig(r.deviation),
                format_sig(r.k3_hat)
            )?;
        }
        Ok(())
    })
}

pub fn write_trajectory(traj: &Trajectory, params: &RefParams, path: &Path) -> Result<(), IoError> {
    write_with(path, |out| {
        writeln!(out, "{TRAJECTORY_HEADER}")?;
        for (t, z) in traj.t.iter().zip(&traj.z) {
            writeln!(
                out,
                "{},{},{},{}",
                format_sig(*t),
                format_sig(z.y1),
                format_sig(z.y2),
                format_sig(lyapunov_value(*z, params))
            )?;
        }
        Ok(())
    })
}

pub fn write_diagnostics(report: &MartingaleReport, path: &Path) -> Result<(), IoError> {
    write_with(path, |out| {
        writeln!(out, "{DIAGNOSTICS_HEADER}")?;
        for k in 0..report.second_moment.len() {
            let ratio = if k == 0 { 0.0 } else { report.ratio(k) };
            writeln!(
                out,
                "{k},{},{},{}",
                format_sig(report.second_moment[k]),
                format_sig(report.bound[k]),
                format_sig(ratio)
            )?;
        }
        Ok(())
    })
}

pub fn write_text(text: &str, path: &Path) -> Result<(), IoError> {
    write_with(path, |out| out.write_all(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(-0.0), "0");
        assert_eq!(format_sig(0.85), "0.85");
        assert_eq!(format_sig(1.0 / 3.0), "0.3333333333");
        assert_eq!(format_sig(-2.0 / 3.0), "-0.6666666667");
        assert_eq!(format_sig(123456.789012345), "123456.789");
        assert_eq!(format_sig(500.0), "500");
        assert_eq!(format_sig(1.5e-9), "1.500000000e-9");
    }

    #[test]
    fn formatting_is_idempotent_after_parse() {
        for x in [0.123456789012, 8.5e-7, 0.02125, 1.48212, 2.0f64.sqrt(), 0.99999999999] {
            let once = format_sig(x);
            let back: f64 = once.parse().unwrap();
            assert_eq!(format_sig(back), once);
            assert!((back - x).abs() <= 1e-9 * x.abs());
        }
    }

    fn sample_series(len: usize) -> Series {
        let f = |o: f64| (0..len).map(|k| (k as f64 + o) / 7.0).collect::<Vec<_>>();
        Series {
            mean_m: f(0.1),
            mean_mbar: f(0.2),
            c_global: f(-0.3),
            mean_c: f(0.4),
            mbar_p10: f(0.5),
            mbar_p90: f(0.6),
        }
    }

    #[test]
    fn timeseries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.csv");
        let s = sample_series(25);
        write_with(&path, |out| write_series(&s, out)).unwrap();
        let back = read_timeseries(&path).unwrap();
        let path2 = dir.path().join("ts2.csv");
        write_with(&path2, |out| write_series(&back, out)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        for (a, b) in s.mean_m.iter().zip(&back.mean_m) {
            assert_eq!(format_sig(*a), format_sig(*b));
        }
    }

    #[test]
    fn zero_step_series_has_one_row() {
        let mut buf = Vec::new();
        write_series(&sample_series(1), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(TIMESERIES_HEADER));
    }

    #[test]
    fn agents_are_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agents.csv");
        let a = |id| AgentSummary {
            id,
            q: 0.2,
            final_mbar: 0.85,
            compliance_rate: 0.86,
            final_c: 0.6,
        };
        write_agents(&[a(2), a(0), a(1)], &path).unwrap();
        let ids: Vec<usize> = read_agents(&path).unwrap().iter().map(|a| a.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn io_errors_name_the_path() {
        let err = read_timeseries(Path::new("/nonexistent/ts.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ts.csv"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, format!("{TIMESERIES_HEADER}\n0,1,2\n")).unwrap();
        let err = read_timeseries(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
