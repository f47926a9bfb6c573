//! SweepReport CSV: `alpha,mode,downstream_acc,robustness,fewshot_mean,fewshot_std,checkpoint_fingerprint`,
//! accuracies as percentages with two decimals, rows in descending α.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::wise::{SweepMode, SweepRow};

pub const HEADER: &str = "alpha,mode,downstream_acc,robustness,fewshot_mean,fewshot_std,checkpoint_fingerprint";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn alpha_str(a: f64) -> String {
    let s = format!("{a}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn row_fields(r: &SweepRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        alpha_str(r.alpha),
        r.mode,
        pct(r.downstream_acc),
        pct(r.robustness),
        r.fewshot_mean.map(pct).unwrap_or_default(),
        r.fewshot_std.map(pct).unwrap_or_default(),
        r.checkpoint_fingerprint
    )
}

pub fn render(rows: &[SweepRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&row_fields(r));
        s.push('\n');
    }
    s
}

/// Rows from several runs, prefixed with a `seed` column.
pub fn render_merged(runs: &[(u64, Vec<SweepRow>)]) -> String {
    let mut s = format!("seed,{HEADER}\n");
    for (seed, rows) in runs {
        for r in rows {
            writeln!(s, "{seed},{}", row_fields(r)).unwrap();
        }
    }
    s
}

pub fn emit_report(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<(), ReportError> {
    fs::write(path, render(rows))?;
    Ok(())
}

/// Parses a report; percentages come back as fractions.
pub fn parse(text: &str) -> Result<Vec<SweepRow>, ReportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        _ => {
            return Err(ReportError::Parse {
                line: 1,
                msg: "missing or unexpected header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| ReportError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let opt = |s: &str| -> Result<Option<f64>, ReportError> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                num(s).map(|v| Some(v / 100.0))
            }
        };
        rows.push(SweepRow {
            alpha: num(f[0])?,
            mode: f[1].parse().map_err(err)?,
            downstream_acc: num(f[2])? / 100.0,
            robustness: num(f[3])? / 100.0,
            fewshot_mean: opt(f[4])?,
            fewshot_std: opt(f[5])?,
            checkpoint_fingerprint: f[6].to_string(),
        });
    }
    Ok(rows)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<SweepRow>, ReportError> {
    parse(&fs::read_to_string(path)?)
}

/// Keeps only rows of one mode, preserving order.
pub fn filter_mode(rows: &[SweepRow], mode: SweepMode) -> Vec<SweepRow> {
    rows.iter().filter(|r| r.mode == mode).cloned().collect()
}
