//! CSV schemas and readers/writers for the two row types the toolkit emits:
//! per-iteration training-log records and per-step episode traces. Headers
//! are mandatory; floats use Rust's shortest round-trip formatting so files
//! are byte-reproducible for identical runs.

use crate::error::{Error, Result};
use std::path::Path;

/// One training-log record, one per update iteration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_r0: f64,
    pub mean_r1: f64,
    pub mean_episode_len: f64,
    pub mean_updates_per_episode: f64,
    pub mean_power_w: f64,
    pub constraint_violations: usize,
    pub lambda: f64,
    pub drift_mean: f64,
}

const LOG_HEADER: [&str; 10] = [
    "iteration",
    "env_steps",
    "mean_r0",
    "mean_r1",
    "mean_episode_len",
    "mean_updates_per_episode",
    "mean_power_w",
    "constraint_violations",
    "lambda",
    "drift_mean",
];

/// One per-step trace row of an evaluation or baseline episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub k: u64,
    pub x_d: f64,
    pub x_r: f64,
    pub u: f64,
    pub beta: bool,
    pub effective_beta: bool,
    /// Achieved per-user rates in bit/s, URLLC users first.
    pub rates: Vec<f64>,
    pub total_power_w: f64,
    pub r0: f64,
    pub r1: f64,
}

/// Write a training log, header row first.
pub fn write_training_log(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOG_HEADER)?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.env_steps.to_string(),
            r.mean_r0.to_string(),
            r.mean_r1.to_string(),
            r.mean_episode_len.to_string(),
            r.mean_updates_per_episode.to_string(),
            r.mean_power_w.to_string(),
            r.constraint_violations.to_string(),
            r.lambda.to_string(),
            r.drift_mean.to_string(),
        ])?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

fn malformed(path: &Path, row: usize, why: impl Into<String>) -> Error {
    Error::MalformedRow {
        path: path.display().to_string(),
        row,
        why: why.into(),
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &Path,
    row: usize,
) -> Result<T> {
    let raw = record
        .get(idx)
        .ok_or_else(|| malformed(path, row, format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| malformed(path, row, format!("column {name}: cannot parse '{raw}'")))
}

/// Read a training log written by [`write_training_log`].
pub fn read_training_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| malformed(path, 1, "empty file, expected a header row"))??;
    let got: Vec<&str> = header.iter().collect();
    if got != LOG_HEADER {
        return Err(malformed(path, 1, format!("unexpected header {got:?}")));
    }
    let mut out = Vec::new();
    for (i, record) in rows.enumerate() {
        let record = record?;
        let row = i + 2;
        out.push(IterationRecord {
            iteration: parse_field(&record, 0, "iteration", path, row)?,
            env_steps: parse_field(&record, 1, "env_steps", path, row)?,
            mean_r0: parse_field(&record, 2, "mean_r0", path, row)?,
            mean_r1: parse_field(&record, 3, "mean_r1", path, row)?,
            mean_episode_len: parse_field(&record, 4, "mean_episode_len", path, row)?,
            mean_updates_per_episode: parse_field(
                &record,
                5,
                "mean_updates_per_episode",
                path,
                row,
            )?,
            mean_power_w: parse_field(&record, 6, "mean_power_w", path, row)?,
            constraint_violations: parse_field(&record, 7, "constraint_violations", path, row)?,
            lambda: parse_field(&record, 8, "lambda", path, row)?,
            drift_mean: parse_field(&record, 9, "drift_mean", path, row)?,
        });
    }
    Ok(out)
}

fn trace_header(n_users: usize) -> Vec<String> {
    let mut h = vec![
        "k".to_string(),
        "x_d".to_string(),
        "x_r".to_string(),
        "u".to_string(),
        "beta".to_string(),
        "effective_beta".to_string(),
    ];
    for n in 0..n_users {
        h.push(format!("rate_{n}"));
    }
    h.extend(["total_power_w".to_string(), "r0".to_string(), "r1".to_string()]);
    h
}

/// Write an episode trace; the rate columns expand to one per user.
pub fn write_trace(path: &Path, steps: &[TraceStep], n_users: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trace_header(n_users))?;
    for s in steps {
        if s.rates.len() != n_users {
            return Err(Error::Domain {
                what: "trace rates",
                why: format!("step {} has {} rates, expected {n_users}", s.k, s.rates.len()),
            });
        }
        let mut rec = vec![
            s.k.to_string(),
            s.x_d.to_string(),
            s.x_r.to_string(),
            s.u.to_string(),
            (s.beta as u8).to_string(),
            (s.effective_beta as u8).to_string(),
        ];
        rec.extend(s.rates.iter().map(|r| r.to_string()));
        rec.push(s.total_power_w.to_string());
        rec.push(s.r0.to_string());
        rec.push(s.r1.to_string());
        w.write_record(rec)?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

/// Read an episode trace written by [`write_trace`], inferring the user count
/// from the header.
pub fn read_trace(path: &Path) -> Result<Vec<TraceStep>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| malformed(path, 1, "empty file, expected a header row"))??;
    let cols: Vec<&str> = header.iter().collect();
    let n_users = cols.iter().filter(|c| c.starts_with("rate_")).count();
    if cols != trace_header(n_users).iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        return Err(malformed(path, 1, format!("unexpected header {cols:?}")));
    }
    let mut out = Vec::new();
    for (i, record) in rows.enumerate() {
        let record = record?;
        let row = i + 2;
        let beta: u8 = parse_field(&record, 4, "beta", path, row)?;
        let eff: u8 = parse_field(&record, 5, "effective_beta", path, row)?;
        if beta > 1 || eff > 1 {
            return Err(malformed(path, row, "beta flags must be 0 or 1"));
        }
        let mut rates = Vec::with_capacity(n_users);
        for n in 0..n_users {
            rates.push(parse_field(&record, 6 + n, &format!("rate_{n}"), path, row)?);
        }
        out.push(TraceStep {
            k: parse_field(&record, 0, "k", path, row)?,
            x_d: parse_field(&record, 1, "x_d", path, row)?,
            x_r: parse_field(&record, 2, "x_r", path, row)?,
            u: parse_field(&record, 3, "u", path, row)?,
            beta: beta == 1,
            effective_beta: eff == 1,
            rates,
            total_power_w: parse_field(&record, 6 + n_users, "total_power_w", path, row)?,
            r0: parse_field(&record, 7 + n_users, "r0", path, row)?,
            r1: parse_field(&record, 8 + n_users, "r1", path, row)?,
        });
    }
    Ok(out)
}
