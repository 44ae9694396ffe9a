//! Verification accuracy per group, fairness summaries (average, STD, SER)
//! and the error/bias Pareto frontier across training runs.

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::manifest::GroupSet;
use crate::numeric;
use crate::scoring::csv_writer;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unknown group `{group}` (line {line})")]
    UnknownGroup { group: String, line: u64 },
    #[error("group `{0}` has pairs of only one class; similarity mode needs genuine and impostor pairs")]
    SingleClass(String),
    #[error("group `{0}` has fewer than two distinct similarities; no threshold candidate")]
    NoThreshold(String),
    #[error("pair record does not match mode `{0}`")]
    ModeMismatch(AccuracyMode),
    #[error("need at least 2 accuracies, got {0}")]
    TooFewGroups(usize),
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AccuracyMode {
    /// Each pair is already marked correct or incorrect.
    Outcomes,
    /// Each pair has a similarity and a ground-truth genuine flag.
    Similarity,
}

impl fmt::Display for AccuracyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccuracyMode::Outcomes => "outcomes",
            AccuracyMode::Similarity => "similarity",
        })
    }
}

impl FromStr for AccuracyMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "outcomes" => Ok(AccuracyMode::Outcomes),
            "similarity" => Ok(AccuracyMode::Similarity),
            other => Err(format!("unknown mode `{other}` (expected outcomes or similarity)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum PairRecord {
    Outcome {
        group: usize,
        correct: bool,
    },
    Scored {
        group: usize,
        similarity: f64,
        is_genuine: bool,
    },
}

impl PairRecord {
    pub fn group(&self) -> usize {
        match *self {
            PairRecord::Outcome { group, .. } | PairRecord::Scored { group, .. } => group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub pairs: usize,
    /// `None` when the group has no pairs.
    pub accuracy: Option<f64>,
    /// Decision threshold (similarity mode): a pair is called genuine when
    /// its similarity exceeds this value.
    pub threshold: Option<f64>,
}

/// Per-group accuracy. In similarity mode each group gets its own best
/// threshold, chosen among midpoints of consecutive distinct similarities
/// (lowest threshold wins ties).
pub fn group_accuracy(
    pairs: &[PairRecord],
    mode: AccuracyMode,
    groups: &GroupSet,
) -> Result<Vec<GroupAccuracy>> {
    let d = groups.len();
    let mut per_group: Vec<Vec<&PairRecord>> = vec![Vec::new(); d];
    for p in pairs {
        let ok = matches!(
            (mode, p),
            (AccuracyMode::Outcomes, PairRecord::Outcome { .. })
                | (AccuracyMode::Similarity, PairRecord::Scored { .. })
        );
        if !ok {
            return Err(MetricsError::ModeMismatch(mode));
        }
        per_group[p.group()].push(p);
    }
    let mut out = Vec::with_capacity(d);
    for (g, recs) in per_group.iter().enumerate() {
        let name = groups.name(g).to_string();
        if recs.is_empty() {
            out.push(GroupAccuracy {
                group: name,
                pairs: 0,
                accuracy: None,
                threshold: None,
            });
            continue;
        }
        let (accuracy, threshold) = match mode {
            AccuracyMode::Outcomes => {
                let correct = recs
                    .iter()
                    .filter(|p| matches!(p, PairRecord::Outcome { correct: true, .. }))
                    .count();
                (correct as f64 / recs.len() as f64, None)
            }
            AccuracyMode::Similarity => {
                let scored: Vec<(f64, bool)> = recs
                    .iter()
                    .map(|p| match **p {
                        PairRecord::Scored {
                            similarity,
                            is_genuine,
                            ..
                        } => (similarity, is_genuine),
                        PairRecord::Outcome { .. } => unreachable!(),
                    })
                    .collect();
                let (acc, t) = best_threshold(&scored, &name)?;
                (acc, Some(t))
            }
        };
        out.push(GroupAccuracy {
            group: name,
            pairs: recs.len(),
            accuracy: Some(accuracy),
            threshold,
        });
    }
    Ok(out)
}

/// Single sorted sweep over candidate thresholds.
fn best_threshold(pairs: &[(f64, bool)], group: &str) -> Result<(f64, f64)> {
    let genuine_total = pairs.iter().filter(|p| p.1).count();
    if genuine_total == 0 || genuine_total == pairs.len() {
        return Err(MetricsError::SingleClass(group.to_string()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    let n = sorted.len();
    // Below the running boundary everything is called impostor.
    let mut impostors_below = 0usize;
    let mut genuine_below = 0usize;
    let mut best: Option<(usize, f64)> = None;
    let mut i = 0;
    while i < n {
        let v = sorted[i].0;
        while i < n && sorted[i].0 == v {
            if sorted[i].1 {
                genuine_below += 1;
            } else {
                impostors_below += 1;
            }
            i += 1;
        }
        if i == n {
            break;
        }
        let threshold = v + (sorted[i].0 - v) / 2.0;
        let correct = impostors_below + (genuine_total - genuine_below);
        if best.is_none_or(|(c, _)| correct > c) {
            best = Some((correct, threshold));
        }
    }
    let (correct, threshold) = best.ok_or_else(|| MetricsError::NoThreshold(group.to_string()))?;
    Ok((correct as f64 / n as f64, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    /// Fractions in [0, 1], group order.
    pub per_group_accuracy: Vec<f64>,
    /// Mean accuracy, fraction.
    pub average: f64,
    /// Sample standard deviation of the accuracies in percentage points.
    pub std: f64,
    /// Skewed error rate `(1 - min) / (1 - max)`; infinite when a group is
    /// perfect (flagged).
    pub ser: f64,
    pub flags: Vec<String>,
}

pub const FLAG_SER_INFINITE: &str = "ser_infinite";

pub fn fairness_report(accuracies: &[f64]) -> Result<FairnessReport> {
    if accuracies.len() < 2 {
        return Err(MetricsError::TooFewGroups(accuracies.len()));
    }
    for &a in accuracies {
        if !(0.0..=1.0).contains(&a) {
            return Err(MetricsError::AccuracyOutOfRange(a));
        }
    }
    let percent: Vec<f64> = accuracies.iter().map(|a| a * 100.0).collect();
    let average = numeric::mean(accuracies).expect("non-empty");
    let std = numeric::sample_std(&percent).expect("at least two values");
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut flags = Vec::new();
    let ser = if max >= 1.0 {
        flags.push(FLAG_SER_INFINITE.to_string());
        f64::INFINITY
    } else {
        (1.0 - min) / (1.0 - max)
    };
    Ok(FairnessReport {
        per_group_accuracy: accuracies.to_vec(),
        average,
        std,
        ser,
        flags,
    })
}

impl FairnessReport {
    /// `{per_group:{...}, average, std, ser, flags:[...]}`, accuracies in
    /// percent. An infinite SER is written as `null`.
    pub fn to_json(&self, groups: &GroupSet) -> serde_json::Value {
        let mut per_group = serde_json::Map::new();
        for (g, a) in groups.labels().iter().zip(&self.per_group_accuracy) {
            per_group.insert(g.clone(), (a * 100.0).into());
        }
        let ser = if self.ser.is_finite() {
            serde_json::Value::from(self.ser)
        } else {
            serde_json::Value::Null
        };
        serde_json::json!({
            "per_group": per_group,
            "average": self.average * 100.0,
            "std": self.std,
            "ser": ser,
            "flags": self.flags,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BiasAxis {
    Std,
    Ser,
}

impl FromStr for BiasAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "std" => Ok(BiasAxis::Std),
            "ser" => Ok(BiasAxis::Ser),
            other => Err(format!("unknown bias axis `{other}` (expected std or ser)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunPoint {
    pub run_id: String,
    pub strategy: String,
    pub size: String,
    /// `1 - average accuracy`.
    pub error: f64,
    pub bias: f64,
}

impl RunPoint {
    pub fn from_report(
        run_id: impl Into<String>,
        strategy: impl Into<String>,
        size: impl Into<String>,
        report: &FairnessReport,
        axis: BiasAxis,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            strategy: strategy.into(),
            size: size.into(),
            error: 1.0 - report.average,
            bias: match axis {
                BiasAxis::Std => report.std,
                BiasAxis::Ser => report.ser,
            },
        }
    }

    /// Weakly better in both coordinates and strictly better in one.
    pub fn dominates(&self, other: &RunPoint) -> bool {
        self.error <= other.error
            && self.bias <= other.bias
            && (self.error < other.error || self.bias < other.bias)
    }
}

/// Which points are on the frontier (both coordinates minimised). Points
/// with a non-finite coordinate are never on it.
pub fn frontier_mask(points: &[RunPoint]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].error.is_finite() && points[i].bias.is_finite())
        .collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&points[a], &points[b]);
        pa.error
            .partial_cmp(&pb.error)
            .unwrap_or(Ordering::Equal)
            .then(pa.bias.partial_cmp(&pb.bias).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; points.len()];
    // Lowest bias among points with strictly smaller error.
    let mut best_prev = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let e = points[order[i]].error;
        let group_min = points[order[i]].bias;
        let mut j = i;
        while j < order.len() && points[order[j]].error == e {
            let p = &points[order[j]];
            mask[order[j]] = p.bias == group_min && group_min < best_prev;
            j += 1;
        }
        best_prev = best_prev.min(group_min);
        i = j;
    }
    mask
}

/// Non-dominated points, sorted by error then bias. Duplicates are kept.
pub fn pareto_frontier(points: &[RunPoint]) -> Vec<RunPoint> {
    let mask = frontier_mask(points);
    let mut out: Vec<RunPoint> = points
        .iter()
        .zip(&mask)
        .filter(|(_, &on)| on)
        .map(|(p, _)| p.clone())
        .collect();
    out.sort_by(|a, b| {
        a.error
            .partial_cmp(&b.error)
            .unwrap_or(Ordering::Equal)
            .then(a.bias.partial_cmp(&b.bias).unwrap_or(Ordering::Equal))
    });
    out
}

/// Accuracies given as percentages (any value above 1) are scaled to
/// fractions.
pub fn normalize_accuracy_scale(values: &[f64]) -> Vec<f64> {
    if values.iter().any(|&v| v > 1.0) {
        values.iter().map(|v| v / 100.0).collect()
    } else {
        values.to_vec()
    }
}

/// One row of a runs file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: String,
    pub size: String,
    /// Fractions, group order.
    pub accuracies: Vec<f64>,
    pub raw: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunsTable {
    pub header: Vec<String>,
    pub groups: GroupSet,
    pub runs: Vec<RunRecord>,
}

/// Reads `run_id,strategy,size,acc_<g1>,...,acc_<gd>`. Groups come from the
/// `acc_` columns in header order.
pub fn read_runs<R: Read>(r: R) -> Result<RunsTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MetricsError::MissingColumn(name.to_string()))
    };
    let (id_c, strat_c, size_c) = (col("run_id")?, col("strategy")?, col("size")?);
    let acc_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("acc_").map(|g| (i, g.to_string())))
        .collect();
    let groups = GroupSet::new(acc_cols.iter().map(|(_, g)| g.clone())).map_err(|e| {
        MetricsError::Parse {
            line: 1,
            reason: e.to_string(),
        }
    })?;
    let mut runs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let raw_acc = acc_cols
            .iter()
            .map(|(i, _)| {
                let s = &rec[*i];
                s.trim_end_matches('%')
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| MetricsError::Parse {
                        line,
                        reason: format!("bad accuracy `{s}`"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        runs.push(RunRecord {
            run_id: rec[id_c].to_string(),
            strategy: rec[strat_c].to_string(),
            size: rec[size_c].to_string(),
            accuracies: normalize_accuracy_scale(&raw_acc),
            raw: rec.iter().map(str::to_string).collect(),
        });
    }
    Ok(RunsTable {
        header,
        groups,
        runs,
    })
}

pub fn load_runs(path: &Path) -> Result<RunsTable> {
    read_runs(open(path)?)
}

impl RunsTable {
    pub fn points(&self, axis: BiasAxis) -> Result<Vec<RunPoint>> {
        self.runs
            .iter()
            .map(|r| {
                let rep = fairness_report(&r.accuracies)?;
                Ok(RunPoint::from_report(&r.run_id, &r.strategy, &r.size, &rep, axis))
            })
            .collect()
    }

    /// Input columns plus `on_frontier`.
    pub fn write_frontier_csv<W: Write>(&self, mask: &[bool], w: W) -> Result<()> {
        let mut wtr = csv_writer(w);
        let mut header = self.header.clone();
        header.push("on_frontier".into());
        wtr.write_record(&header)?;
        for (r, &on) in self.runs.iter().zip(mask) {
            let mut row = r.raw.clone();
            row.push(on.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_bool(raw: &str, line: u64, what: &str) -> Result<bool> {
    match raw {
        "1" | "true" | "True" | "TRUE" => Ok(true),
        "0" | "false" | "False" | "FALSE" => Ok(false),
        other => Err(MetricsError::Parse {
            line,
            reason: format!("bad {what} `{other}` (expected 0/1)"),
        }),
    }
}

/// Reads `group,correct` (outcomes) or `group,similarity,is_genuine`
/// (similarity) pairs.
pub fn read_pairs<R: Read>(r: R, mode: AccuracyMode, groups: &GroupSet) -> Result<Vec<PairRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MetricsError::MissingColumn(name.to_string()))
    };
    let group_c = col("group")?;
    let cols = match mode {
        AccuracyMode::Outcomes => (col("correct")?, 0),
        AccuracyMode::Similarity => (col("similarity")?, col("is_genuine")?),
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let name = &rec[group_c];
        let group = groups.index_of(name).ok_or_else(|| MetricsError::UnknownGroup {
            group: name.to_string(),
            line,
        })?;
        out.push(match mode {
            AccuracyMode::Outcomes => PairRecord::Outcome {
                group,
                correct: parse_bool(&rec[cols.0], line, "correct")?,
            },
            AccuracyMode::Similarity => {
                let raw = &rec[cols.0];
                let similarity = raw
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| MetricsError::Parse {
                        line,
                        reason: format!("bad similarity `{raw}`"),
                    })?;
                PairRecord::Scored {
                    group,
                    similarity,
                    is_genuine: parse_bool(&rec[cols.1], line, "is_genuine")?,
                }
            }
        });
    }
    Ok(out)
}

pub fn load_pairs(path: &Path, mode: AccuracyMode, groups: &GroupSet) -> Result<Vec<PairRecord>> {
    read_pairs(open(path)?, mode, groups)
}
