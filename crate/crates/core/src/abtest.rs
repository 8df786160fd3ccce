//! A/B experiment support: stable group assignment, developer-day
//! aggregation of acceptance logs and Welch's two-sample t-test.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic group for a developer within an experiment.
pub fn assign_group<'g, S: AsRef<str>>(experiment_id: &str, developer_id: &str, groups: &'g [S]) -> Result<&'g str> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no groups to assign".into()));
    }
    let mut h = Sha256::new();
    h.update(experiment_id.as_bytes());
    h.update([0u8]);
    h.update(developer_id.as_bytes());
    let d = h.finalize();
    let v = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    Ok(groups[(v % groups.len() as u64) as usize].as_ref())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AbObservation {
    pub developer_id: String,
    pub day: NaiveDate,
    pub accept_count: u64,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Aggregated {
    pub observations: Vec<AbObservation>,
    /// Records missing a developer, timestamp or group.
    pub skipped: usize,
}

#[derive(Deserialize)]
struct LogFields {
    developer_id: Option<String>,
    timestamp: Option<i64>,
    group: Option<String>,
}

/// Counts acceptances per (developer, UTC day, group).
pub fn aggregate<'a>(lines: impl IntoIterator<Item = &'a str>) -> Aggregated {
    let mut counts: BTreeMap<(String, NaiveDate, String), u64> = BTreeMap::new();
    let mut skipped = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str::<LogFields>(line).ok().and_then(|f| {
            let day = DateTime::from_timestamp(f.timestamp?, 0)?.date_naive();
            Some((f.developer_id?, day, f.group?))
        });
        match rec {
            Some(key) => *counts.entry(key).or_default() += 1,
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} acceptance records with missing fields");
    }
    Aggregated {
        observations: counts
            .into_iter()
            .map(|((developer_id, day, group), accept_count)| AbObservation {
                developer_id,
                day,
                accept_count,
                group,
            })
            .collect(),
        skipped,
    }
}

pub fn aggregate_file(path: &Path) -> Result<Aggregated> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    Ok(aggregate(lines.iter().map(String::as_str)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub std_dev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, std_dev: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_dev = if n < 2 {
            f64::NAN
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { n, mean, std_dev }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() || df.is_nan() || df <= 0.0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Welch's unequal-variance t-test from summary statistics, with
/// Welch–Satterthwaite degrees of freedom. `None` when either group has
/// fewer than two observations or both variances vanish with equal means.
pub fn welch(a: &Summary, b: &Summary) -> Option<WelchTest> {
    if a.n < 2 || b.n < 2 {
        return None;
    }
    let va = a.std_dev * a.std_dev / a.n as f64;
    let vb = b.std_dev * b.std_dev / b.n as f64;
    let se2 = va + vb;
    let diff = b.mean - a.mean;
    if se2 == 0.0 {
        if diff == 0.0 {
            return None;
        }
        return Some(WelchTest {
            t: diff.signum() * f64::INFINITY,
            df: (a.n + b.n - 2) as f64,
            p_value: 0.0,
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    Some(WelchTest {
        t,
        df,
        p_value: t_two_sided(t, df),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub observations: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub unique_developers: usize,
}

impl GroupStats {
    pub fn summary(&self) -> Summary {
        Summary {
            n: self.observations,
            mean: self.mean,
            std_dev: self.std_dev,
        }
    }
}

pub fn group_stats(group: &str, obs: &[AbObservation]) -> GroupStats {
    let values: Vec<f64> = obs.iter().map(|o| o.accept_count as f64).collect();
    let s = Summary::of(&values);
    GroupStats {
        group: group.to_string(),
        observations: s.n,
        mean: s.mean,
        std_dev: s.std_dev,
        unique_developers: obs.iter().map(|o| o.developer_id.as_str()).collect::<BTreeSet<_>>().len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub control: GroupStats,
    pub experiment: GroupStats,
    /// Relative lift of the experiment mean over the control mean.
    pub improvement: f64,
    pub p_value: f64,
    pub t: f64,
    pub df: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn improvement(control_mean: f64, experiment_mean: f64) -> Result<f64> {
    if control_mean == 0.0 || !control_mean.is_finite() {
        return Err(Error::UndefinedMetric(format!("control mean {control_mean}")));
    }
    Ok((experiment_mean - control_mean) / control_mean)
}

/// Compares two groups given their statistics.
pub fn compare_stats(control: GroupStats, experiment: GroupStats) -> Result<AbReport> {
    let improvement = improvement(control.mean, experiment.mean)?;
    let (t, df, p_value, warning) = match welch(&control.summary(), &experiment.summary()) {
        Some(w) => (w.t, w.df, w.p_value, None),
        None => (
            0.0,
            f64::NAN,
            1.0,
            Some("test undefined (fewer than two observations or no variance); p-value set to 1".to_string()),
        ),
    };
    if let Some(w) = &warning {
        log::warn!("{}: {w}", experiment.group);
    }
    Ok(AbReport {
        control,
        experiment,
        improvement,
        p_value,
        t,
        df,
        warning,
    })
}

pub fn compare(control: &[AbObservation], experiment: &[AbObservation]) -> Result<AbReport> {
    let name = |o: &[AbObservation], d: &str| o.first().map_or(d.to_string(), |x| x.group.clone());
    compare_stats(
        group_stats(&name(control, "control"), control),
        group_stats(&name(experiment, "experiment"), experiment),
    )
}

/// Compares every other group in `obs` against `control`.
pub fn compare_all(obs: &[AbObservation], control: &str) -> Result<Vec<AbReport>> {
    let mut by_group: BTreeMap<&str, Vec<AbObservation>> = BTreeMap::new();
    for o in obs {
        by_group.entry(o.group.as_str()).or_default().push(o.clone());
    }
    let ctrl = by_group
        .get(control)
        .ok_or_else(|| Error::InvalidArgument(format!("control group {control:?} has no observations")))?;
    let ctrl_stats = group_stats(control, ctrl);
    by_group
        .iter()
        .filter(|(g, _)| **g != control)
        .map(|(g, o)| compare_stats(ctrl_stats.clone(), group_stats(g, o)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TableRow<'a> {
    group: &'a str,
    observations: usize,
    mean: f64,
    std_dev: f64,
    unique_developers: usize,
    improvement: Option<f64>,
    p_value: Option<f64>,
}

/// Table rows: the control first, then one row per experiment group.
pub fn write_csv(reports: &[AbReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = reports.first() {
        let c = &first.control;
        w.serialize(TableRow {
            group: &c.group,
            observations: c.observations,
            mean: c.mean,
            std_dev: c.std_dev,
            unique_developers: c.unique_developers,
            improvement: None,
            p_value: None,
        })?;
    } else {
        w.write_record(["group", "observations", "mean", "std_dev", "unique_developers", "improvement", "p_value"])?;
    }
    for r in reports {
        let e = &r.experiment;
        w.serialize(TableRow {
            group: &e.group,
            observations: e.observations,
            mean: e.mean,
            std_dev: e.std_dev,
            unique_developers: e.unique_developers,
            improvement: Some(r.improvement),
            p_value: Some(r.p_value),
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
