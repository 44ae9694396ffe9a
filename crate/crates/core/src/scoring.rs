//! Identity-level score vectors, the group-level score matrix, relabelling
//! and the external-score scatter export.
//!
//! The three protocols differ only in how image scores are aggregated:
//!
//! | protocol | identity vector        | group row                    |
//! |----------|------------------------|------------------------------|
//! | A        | mean over its images   | mean over its identities     |
//! | B        | sum over its images    | mean over its identities     |
//! | C        | sum over its images    | sum over its identities      |
//!
//! All sums are exact-then-rounded ([`ExactSum`]), so results do not depend
//! on accumulation order.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::manifest::{GroupSet, Manifest};
use crate::numeric::{self, ExactSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Protocol {
    A,
    B,
    C,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::A, Protocol::B, Protocol::C];

    /// Identity vectors are image means (A) rather than image sums (B, C).
    pub fn averages_images(self) -> bool {
        matches!(self, Protocol::A)
    }

    /// Group rows are identity means (A, B) rather than identity sums (C).
    pub fn averages_identities(self) -> bool {
        matches!(self, Protocol::A | Protocol::B)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Protocol::A => "A",
            Protocol::B => "B",
            Protocol::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Protocol {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Protocol::A),
            "B" | "b" => Ok(Protocol::B),
            "C" | "c" => Ok(Protocol::C),
            other => Err(ScoringError::UnknownProtocol(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("unknown protocol `{0}` (expected A, B or C)")]
    UnknownProtocol(String),
    #[error("empty group under mean protocol: `{group}` has no identities (protocol {protocol})")]
    EmptyGroup { group: String, protocol: Protocol },
    #[error("no manifest image has an external score")]
    EmptyIntersection,
    #[error("external scores: {0}")]
    ExternalScores(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-identity score vectors, aligned with [`Manifest::identities`].
#[derive(Debug, Clone, PartialEq)]
pub struct IdsTable {
    protocol: Protocol,
    groups: GroupSet,
    identity_ids: Vec<String>,
    assigned: Vec<usize>,
    values: Vec<Vec<f64>>,
}

impl IdsTable {
    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Vector of the identity at `pos` (first-appearance order).
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.values[pos]
    }

    pub fn get(&self, identity_id: &str) -> Option<&[f64]> {
        self.identity_ids
            .iter()
            .position(|i| i == identity_id)
            .map(|p| self.values[p].as_slice())
    }

    /// Score of each identity against its own assigned group.
    pub fn own_group(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.assigned)
            .map(|(v, &g)| v[g])
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, &[f64])> {
        self.identity_ids
            .iter()
            .zip(&self.assigned)
            .zip(&self.values)
            .map(|((id, &g), v)| (id.as_str(), g, v.as_slice()))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScoringError> {
        let mut wtr = csv_writer(w);
        let mut header = vec!["identity_id".to_string(), "group".to_string()];
        header.extend(self.groups.labels().iter().map(|g| format!("ids_{g}")));
        wtr.write_record(&header)?;
        for (id, g, v) in self.iter() {
            let mut row = vec![id.to_string(), self.groups.name(g).to_string()];
            row.extend(v.iter().map(f64::to_string));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn compute_ids(m: &Manifest, protocol: Protocol) -> IdsTable {
    let d = m.group_count();
    let images = m.images();
    let mut values = Vec::with_capacity(m.identity_count());
    for rec in m.identities() {
        let mut acc = vec![ExactSum::new(); d];
        for &i in &rec.images {
            for (a, s) in acc.iter_mut().zip(&images[i].scores) {
                a.add(*s);
            }
        }
        let count = rec.image_count() as f64;
        let v: Vec<f64> = acc
            .iter()
            .map(|a| {
                if protocol.averages_images() {
                    a.value() / count
                } else {
                    a.value()
                }
            })
            .collect();
        values.push(v);
    }
    IdsTable {
        protocol,
        groups: m.groups().clone(),
        identity_ids: m.identities().iter().map(|r| r.identity_id.clone()).collect(),
        assigned: m.identities().iter().map(|r| r.group).collect(),
        values,
    }
}

/// `d x d` group score matrix. Entry `(r, c)` scores the identities assigned
/// to group `r` against group `c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EsMatrix {
    protocol: Protocol,
    groups: GroupSet,
    values: Vec<Vec<f64>>,
}

impl EsMatrix {
    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn groups(&self) -> &GroupSet {
        &self.groups
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Own-group scores, one per group.
    pub fn diag(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.values[i][i]).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScoringError> {
        let mut wtr = csv_writer(w);
        let mut header = vec!["group".to_string()];
        header.extend(self.groups.labels().iter().cloned());
        wtr.write_record(&header)?;
        for (r, row) in self.values.iter().enumerate() {
            let mut out = vec![self.groups.name(r).to_string()];
            out.extend(row.iter().map(f64::to_string));
            wtr.write_record(&out)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut rows = serde_json::Map::new();
        for (r, row) in self.values.iter().enumerate() {
            let mut cols = serde_json::Map::new();
            for (c, v) in row.iter().enumerate() {
                cols.insert(self.groups.name(c).to_string(), (*v).into());
            }
            rows.insert(self.groups.name(r).to_string(), cols.into());
        }
        serde_json::json!({
            "protocol": self.protocol.to_string(),
            "groups": self.groups.labels(),
            "rows": rows,
            "diag": self.diag(),
        })
    }
}

pub fn compute_es(m: &Manifest, protocol: Protocol) -> Result<EsMatrix, ScoringError> {
    let ids = compute_ids(m, protocol);
    es_from_ids(m, &ids)
}

pub(crate) fn es_from_ids(m: &Manifest, ids: &IdsTable) -> Result<EsMatrix, ScoringError> {
    let protocol = ids.protocol;
    let d = m.group_count();
    let mut acc = vec![vec![ExactSum::new(); d]; d];
    for (pos, rec) in m.identities().iter().enumerate() {
        for (a, v) in acc[rec.group].iter_mut().zip(ids.row(pos)) {
            a.add(*v);
        }
    }
    let counts = m.group_counts();
    let mut values = Vec::with_capacity(d);
    for (g, row) in acc.iter().enumerate() {
        if protocol.averages_identities() && counts[g] == 0 {
            return Err(ScoringError::EmptyGroup {
                group: m.groups().name(g).to_string(),
                protocol,
            });
        }
        values.push(
            row.iter()
                .map(|a| {
                    if protocol.averages_identities() {
                        a.value() / counts[g] as f64
                    } else {
                        a.value()
                    }
                })
                .collect(),
        );
    }
    Ok(EsMatrix {
        protocol,
        groups: m.groups().clone(),
        values,
    })
}

/// Index of the largest component; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelabelChange {
    pub identity_id: String,
    pub from: String,
    pub to: String,
}

/// Reassigns every identity to the argmax of its mean score vector. Scores
/// are untouched; only group membership changes.
pub fn relabel(m: &Manifest) -> Manifest {
    relabel_with_changes(m).0
}

pub fn relabel_with_changes(m: &Manifest) -> (Manifest, Vec<RelabelChange>) {
    let ids = compute_ids(m, Protocol::A);
    let new_groups: Vec<usize> = (0..ids.len()).map(|p| argmax(ids.row(p))).collect();
    let changes = m
        .identities()
        .iter()
        .zip(&new_groups)
        .filter(|(rec, &g)| rec.group != g)
        .map(|(rec, &g)| RelabelChange {
            identity_id: rec.identity_id.clone(),
            from: m.groups().name(rec.group).to_string(),
            to: m.groups().name(g).to_string(),
        })
        .collect();
    (m.with_identity_groups(&new_groups), changes)
}

/// `identity_id,from,to`
pub fn write_relabel_changes<W: Write>(changes: &[RelabelChange], w: W) -> Result<(), ScoringError> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["identity_id", "from", "to"])?;
    for c in changes {
        wtr.write_record([&c.identity_id, &c.from, &c.to])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub image_id: String,
    pub group: String,
    pub own_group_score: f64,
    pub external_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCorrelation {
    pub group: String,
    pub n: usize,
    /// `None` when either variable is constant within the group.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterTable {
    pub rows: Vec<ScatterRow>,
    pub per_group: Vec<GroupCorrelation>,
    /// Manifest images with no external score.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

impl ScatterTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ScoringError> {
        let mut wtr = csv_writer(w);
        wtr.write_record(["image_id", "group", "own_group_score", "external_score"])?;
        for r in &self.rows {
            wtr.write_record([
                r.image_id.clone(),
                r.group.clone(),
                r.own_group_score.to_string(),
                r.external_score.to_string(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn correlations_json(&self) -> serde_json::Value {
        let mut per_group = serde_json::Map::new();
        for g in &self.per_group {
            per_group.insert(
                g.group.clone(),
                serde_json::json!({ "n": g.n, "pearson": g.pearson }),
            );
        }
        serde_json::json!({
            "per_group": per_group,
            "matched": self.rows.len(),
            "skipped": self.skipped,
            "warnings": self.warnings,
        })
    }
}

/// Pairs each image's own-group score with an externally supplied score
/// (e.g. a face-quality estimate) and correlates them per group.
pub fn score_scatter(
    m: &Manifest,
    external: &HashMap<String, f64>,
) -> Result<ScatterTable, ScoringError> {
    let d = m.group_count();
    let mut rows = Vec::new();
    let mut skipped = 0;
    let mut xs = vec![Vec::new(); d];
    let mut ys = vec![Vec::new(); d];
    for img in m.images() {
        let Some(&ext) = external.get(&img.image_id) else {
            skipped += 1;
            continue;
        };
        let own = img.scores[img.group];
        xs[img.group].push(own);
        ys[img.group].push(ext);
        rows.push(ScatterRow {
            image_id: img.image_id.clone(),
            group: m.groups().name(img.group).to_string(),
            own_group_score: own,
            external_score: ext,
        });
    }
    if rows.is_empty() {
        return Err(ScoringError::EmptyIntersection);
    }
    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(format!("{skipped} image(s) have no external score"));
    }
    let per_group = (0..d)
        .map(|g| {
            let name = m.groups().name(g).to_string();
            let pearson = numeric::pearson(&xs[g], &ys[g]);
            if pearson.is_none() && !xs[g].is_empty() {
                warnings.push(format!(
                    "correlation undefined for `{name}` (zero variance or fewer than 2 points)"
                ));
            }
            GroupCorrelation {
                group: name,
                n: xs[g].len(),
                pearson,
            }
        })
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ScatterTable {
        rows,
        per_group,
        skipped,
        warnings,
    })
}

/// Reads `image_id,score` CSV.
pub fn load_external_scores(path: &Path) -> Result<HashMap<String, f64>, ScoringError> {
    let file = std::fs::File::open(path).map_err(|source| ScoringError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ScoringError::ExternalScores(format!("missing column `{name}`")))
    };
    let (id_col, score_col) = (col("image_id")?, col("score")?);
    let mut out = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row.get(id_col).unwrap_or_default().to_string();
        let raw = row.get(score_col).unwrap_or_default();
        let v: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ScoringError::ExternalScores(format!("line {line}: bad score `{raw}`")))?;
        if out.insert(id.clone(), v).is_some() {
            return Err(ScoringError::ExternalScores(format!(
                "line {line}: duplicate image id `{id}`"
            )));
        }
    }
    Ok(out)
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}
