//! Score manifests: the dataset model, CSV load/write and descriptive summaries.
//!
//! A manifest is a list of images, each carrying its identity, the group
//! label assigned to that identity, and a score vector over the group set.
//! Rows stay in file order and identities are indexed in first-appearance
//! order; every downstream tie-break relies on that ordering.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;
use crate::numeric;
use crate::scoring::{compute_ids, Protocol};

/// Maximum allowed deviation of a raw score vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-3;
/// Score vectors closer than this to unit sum are left untouched at load, so
/// that load/write/load is bit-stable.
const RENORMALIZE_EPS: f64 = 1e-12;

pub const DEFAULT_GROUPS: [&str; 4] = ["African", "Asian", "Caucasian", "Indian"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid group set: {0}")]
    InvalidGroupSet(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("score column `{0}` does not match any group")]
    UnexpectedScoreColumn(String),
    #[error("{count} row(s) rejected; first at line {first_line}: {first_reason}")]
    RejectedRows {
        count: usize,
        first_line: u64,
        first_reason: String,
    },
    #[error(
        "identity `{identity_id}` is labelled `{first_group}` and `{other_group}` (line {line})"
    )]
    InconsistentIdentity {
        identity_id: String,
        first_group: String,
        other_group: String,
        line: u64,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("invalid image `{image_id}`: {reason}")]
    InvalidImage { image_id: String, reason: String },
    #[error("empty manifest")]
    Empty,
}

pub type Result<T, E = ManifestError> = std::result::Result<T, E>;

/// Ordered, distinct group labels. Column order everywhere follows this order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct GroupSet {
    labels: Vec<String>,
}

impl GroupSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(ManifestError::InvalidGroupSet(format!(
                "need at least 2 groups, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(ManifestError::InvalidGroupSet("empty group label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(ManifestError::InvalidGroupSet(format!(
                    "duplicate group label `{l}`"
                )));
            }
        }
        Ok(Self { labels })
    }

    /// Parses a comma-separated label list.
    pub fn parse_list(s: &str) -> Result<Self> {
        Self::new(s.split(',').map(str::trim))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

impl From<GroupSet> for Vec<String> {
    fn from(g: GroupSet) -> Self {
        g.labels
    }
}

impl TryFrom<Vec<String>> for GroupSet {
    type Error = ManifestError;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        GroupSet::new(labels)
    }
}

impl Default for GroupSet {
    fn default() -> Self {
        Self {
            labels: DEFAULT_GROUPS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity_id: String,
    /// Index into the manifest's [`GroupSet`].
    pub group: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRecord {
    pub identity_id: String,
    pub group: usize,
    /// Positions in [`Manifest::images`], in file order.
    pub images: Vec<usize>,
}

impl IdentityRecord {
    pub fn image_count(&self) -> usize {
        self.images.len()
    }
}

/// Immutable dataset view. Construct through [`Manifest::new`] or the loaders.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    groups: GroupSet,
    images: Vec<ImageRecord>,
    identities: Vec<IdentityRecord>,
    identity_index: HashMap<String, usize>,
    group_counts: Vec<usize>,
}

impl Manifest {
    /// Validates every record, renormalizes score vectors onto the simplex
    /// and builds the identity index.
    pub fn new(groups: GroupSet, mut images: Vec<ImageRecord>) -> Result<Self> {
        for img in &mut images {
            if let Err(reason) = validate_record(&groups, img) {
                return Err(ManifestError::InvalidImage {
                    image_id: img.image_id.clone(),
                    reason,
                });
            }
            normalize_scores(&mut img.scores);
        }
        Self::from_valid_records(groups, images)
    }

    /// Index construction for records whose scores are already validated.
    pub(crate) fn from_valid_records(groups: GroupSet, images: Vec<ImageRecord>) -> Result<Self> {
        let mut seen_images = HashSet::with_capacity(images.len());
        let mut identities: Vec<IdentityRecord> = Vec::new();
        let mut identity_index: HashMap<String, usize> = HashMap::new();
        for (pos, img) in images.iter().enumerate() {
            if !seen_images.insert(img.image_id.as_str()) {
                return Err(ManifestError::DuplicateImage(img.image_id.clone()));
            }
            match identity_index.get(&img.identity_id) {
                Some(&idx) => {
                    let rec = &mut identities[idx];
                    if rec.group != img.group {
                        return Err(ManifestError::InconsistentIdentity {
                            identity_id: img.identity_id.clone(),
                            first_group: groups.name(rec.group).to_string(),
                            other_group: groups.name(img.group).to_string(),
                            line: pos as u64 + 2,
                        });
                    }
                    rec.images.push(pos);
                }
                None => {
                    identity_index.insert(img.identity_id.clone(), identities.len());
                    identities.push(IdentityRecord {
                        identity_id: img.identity_id.clone(),
                        group: img.group,
                        images: vec![pos],
                    });
                }
            }
        }
        let mut group_counts = vec![0; groups.len()];
        for rec in &identities {
            group_counts[rec.group] += 1;
        }
        Ok(Self {
            groups,
            images,
            identities,
            identity_index,
            group_counts,
        })
    }

    pub fn groups(&self) -> &GroupSet {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    /// Identities in first-appearance order.
    pub fn identities(&self) -> &[IdentityRecord] {
        &self.identities
    }

    pub fn identity(&self, identity_id: &str) -> Option<&IdentityRecord> {
        self.identity_index
            .get(identity_id)
            .map(|&i| &self.identities[i])
    }

    pub fn identity_position(&self, identity_id: &str) -> Option<usize> {
        self.identity_index.get(identity_id).copied()
    }

    /// Identity counts per group (N_y).
    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Identity positions (first-appearance order) belonging to `group`.
    pub fn identities_in_group(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.identities
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.group == group)
            .map(|(i, _)| i)
    }

    /// Copy of the manifest without the identities at the given positions.
    pub fn without_identities(&self, removed: &HashSet<usize>) -> Manifest {
        let drop_ids: HashSet<&str> = removed
            .iter()
            .map(|&i| self.identities[i].identity_id.as_str())
            .collect();
        let images = self
            .images
            .iter()
            .filter(|img| !drop_ids.contains(img.identity_id.as_str()))
            .cloned()
            .collect();
        Self::from_valid_records(self.groups.clone(), images)
            .expect("subset of a valid manifest is valid")
    }

    /// Copy of the manifest with identity `i` moved to `new_groups[i]`.
    pub fn with_identity_groups(&self, new_groups: &[usize]) -> Manifest {
        assert_eq!(new_groups.len(), self.identities.len());
        let images = self
            .images
            .iter()
            .map(|img| {
                let pos = self.identity_index[&img.identity_id];
                ImageRecord {
                    group: new_groups[pos],
                    ..img.clone()
                }
            })
            .collect();
        Self::from_valid_records(self.groups.clone(), images)
            .expect("relabelling keeps identities consistent")
    }
}

fn validate_record(groups: &GroupSet, img: &ImageRecord) -> std::result::Result<(), String> {
    if img.image_id.is_empty() {
        return Err("empty image_id".into());
    }
    if img.identity_id.is_empty() {
        return Err("empty identity_id".into());
    }
    if img.group >= groups.len() {
        return Err(format!("group index {} out of range", img.group));
    }
    if img.scores.len() != groups.len() {
        return Err(format!(
            "expected {} scores, got {}",
            groups.len(),
            img.scores.len()
        ));
    }
    for (k, &s) in img.scores.iter().enumerate() {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(format!(
                "score for `{}` is {s}, outside [0, 1]",
                groups.name(k)
            ));
        }
    }
    let sum = numeric::exact_sum(&img.scores);
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(format!("scores sum to {sum}, expected 1 +/- {SUM_TOLERANCE}"));
    }
    Ok(())
}

fn normalize_scores(scores: &mut [f64]) {
    let sum = numeric::exact_sum(scores);
    let rescale = (sum - 1.0).abs() > RENORMALIZE_EPS;
    for s in scores.iter_mut() {
        if rescale {
            *s /= sum;
        }
        // Folds -0.0 into 0.0 so it never reaches the output as "-0".
        *s += 0.0;
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Expected groups. When absent, groups come from the `score_*` header
    /// columns in header order.
    pub groups: Option<GroupSet>,
    /// Skip invalid rows instead of failing. Inconsistent identity labels are
    /// fatal either way.
    pub permissive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowRejection {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: Manifest,
    pub rejected: Vec<RowRejection>,
}

/// Strict load: any invalid row is an error.
pub fn load_manifest(path: &Path, groups: Option<&GroupSet>) -> Result<Manifest> {
    let opts = LoadOptions {
        groups: groups.cloned(),
        permissive: false,
    };
    Ok(load_manifest_with(path, &opts)?.manifest)
}

pub fn load_manifest_with(path: &Path, opts: &LoadOptions) -> Result<Loaded> {
    let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_manifest(file, opts)
}

struct Columns {
    image_id: usize,
    identity_id: usize,
    group: usize,
    scores: Vec<usize>,
}

fn resolve_columns(
    header: &csv::StringRecord,
    wanted: Option<&GroupSet>,
) -> Result<(GroupSet, Columns)> {
    let mut seen = HashSet::new();
    for h in header.iter() {
        if !seen.insert(h) {
            return Err(ManifestError::DuplicateColumn(h.to_string()));
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ManifestError::MissingColumn(name.to_string()))
    };
    let image_id = find("image_id")?;
    let identity_id = find("identity_id")?;
    let group = find("group")?;

    let score_cols: Vec<(usize, &str)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("score_").map(|g| (i, g)))
        .collect();
    let groups = match wanted {
        Some(g) => {
            for (_, name) in &score_cols {
                if g.index_of(name).is_none() {
                    return Err(ManifestError::UnexpectedScoreColumn(format!("score_{name}")));
                }
            }
            g.clone()
        }
        None => GroupSet::new(score_cols.iter().map(|(_, g)| g.to_string()))?,
    };
    let scores = groups
        .labels()
        .iter()
        .map(|g| find(&format!("score_{g}")))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        groups,
        Columns {
            image_id,
            identity_id,
            group,
            scores,
        },
    ))
}

fn parse_row(
    groups: &GroupSet,
    cols: &Columns,
    row: &csv::StringRecord,
) -> std::result::Result<ImageRecord, String> {
    let field = |i: usize| row.get(i).ok_or_else(|| format!("missing field {}", i + 1));
    let group_name = field(cols.group)?;
    let group = groups
        .index_of(group_name)
        .ok_or_else(|| format!("unknown group `{group_name}`"))?;
    let scores = cols
        .scores
        .iter()
        .map(|&i| {
            let raw = field(i)?;
            raw.parse::<f64>()
                .map_err(|_| format!("cannot parse score `{raw}`"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let rec = ImageRecord {
        image_id: field(cols.image_id)?.to_string(),
        identity_id: field(cols.identity_id)?.to_string(),
        group,
        scores,
    };
    validate_record(groups, &rec)?;
    Ok(rec)
}

/// Reads a manifest CSV from any reader. LF and CRLF line endings accepted.
pub fn read_manifest<R: Read>(reader: R, opts: &LoadOptions) -> Result<Loaded> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let (groups, cols) = resolve_columns(&header, opts.groups.as_ref())?;

    let mut images = Vec::new();
    let mut rejected = Vec::new();
    let mut seen_images: HashSet<String> = HashSet::new();
    let mut identity_groups: HashMap<String, usize> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let mut rec = match parse_row(&groups, &cols, &row) {
            Ok(r) => r,
            Err(reason) => {
                rejected.push(RowRejection { line, reason });
                continue;
            }
        };
        if let Some(&g) = identity_groups.get(&rec.identity_id) {
            if g != rec.group {
                return Err(ManifestError::InconsistentIdentity {
                    identity_id: rec.identity_id,
                    first_group: groups.name(g).to_string(),
                    other_group: groups.name(rec.group).to_string(),
                    line,
                });
            }
        }
        if !seen_images.insert(rec.image_id.clone()) {
            rejected.push(RowRejection {
                line,
                reason: format!("duplicate image id `{}`", rec.image_id),
            });
            continue;
        }
        identity_groups.insert(rec.identity_id.clone(), rec.group);
        normalize_scores(&mut rec.scores);
        images.push(rec);
    }

    if !rejected.is_empty() {
        for r in &rejected {
            log::warn!("line {}: {}", r.line, r.reason);
        }
        if !opts.permissive {
            return Err(ManifestError::RejectedRows {
                count: rejected.len(),
                first_line: rejected[0].line,
                first_reason: rejected[0].reason.clone(),
            });
        }
    }
    if images.is_empty() {
        return Err(ManifestError::Empty);
    }
    let manifest = Manifest::from_valid_records(groups, images)?;
    Ok(Loaded { manifest, rejected })
}

pub fn manifest_header(groups: &GroupSet) -> Vec<String> {
    let mut h = vec!["image_id".into(), "identity_id".into(), "group".into()];
    h.extend(groups.labels().iter().map(|g| format!("score_{g}")));
    h
}

/// Writes the CSV form. Floats use the shortest representation that parses
/// back to the same value, so load(write(m)) == m.
pub fn write_manifest_to<W: Write>(m: &Manifest, w: W) -> Result<()> {
    if m.is_empty() {
        return Err(ManifestError::Empty);
    }
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    wtr.write_record(manifest_header(&m.groups))?;
    let mut row: Vec<String> = Vec::with_capacity(3 + m.group_count());
    for img in &m.images {
        row.clear();
        row.push(img.image_id.clone());
        row.push(img.identity_id.clone());
        row.push(m.groups.name(img.group).to_string());
        row.extend(img.scores.iter().map(|s| s.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|source| ManifestError::Io {
        path: PathBuf::from("<writer>"),
        source,
    })?;
    Ok(())
}

/// Atomic file write of [`write_manifest_to`].
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    if m.is_empty() {
        return Err(ManifestError::Empty);
    }
    let mut inner: Option<ManifestError> = None;
    let res = write_atomic(path, |w| {
        write_manifest_to(m, w).map_err(|e| match e {
            ManifestError::Io { source, .. } => source,
            other => {
                let msg = other.to_string();
                inner = Some(other);
                std::io::Error::other(msg)
            }
        })
    });
    match (res, inner) {
        (_, Some(e)) => Err(e),
        (Err(source), None) => Err(ManifestError::Io {
            path: path.to_path_buf(),
            source,
        }),
        (Ok(()), None) => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionSummary {
    pub mean: f64,
    /// `None` for fewer than two identities.
    pub std: Option<f64>,
    pub min: f64,
    pub max: f64,
    /// 10th, 20th, ..., 90th percentiles (linear interpolation).
    pub deciles: Vec<f64>,
}

impl DistributionSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean: numeric::mean(values)?,
            std: numeric::sample_std(values),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            deciles: (1..=9)
                .map(|k| numeric::quantile_sorted(&sorted, k as f64 / 10.0).unwrap())
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub identities: usize,
    pub images: usize,
    /// Distribution of the mean own-group score over this group's identities.
    pub own_group_score: Option<DistributionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestSummary {
    pub groups: Vec<String>,
    pub total_identities: usize,
    pub total_images: usize,
    pub per_group: Vec<GroupSummary>,
}

pub fn summarize(m: &Manifest) -> ManifestSummary {
    let ids = compute_ids(m, Protocol::A);
    let d = m.group_count();
    let mut own: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut image_counts = vec![0usize; d];
    for (pos, rec) in m.identities().iter().enumerate() {
        own[rec.group].push(ids.row(pos)[rec.group]);
        image_counts[rec.group] += rec.image_count();
    }
    let per_group = (0..d)
        .map(|g| GroupSummary {
            group: m.groups().name(g).to_string(),
            identities: m.group_counts()[g],
            images: image_counts[g],
            own_group_score: DistributionSummary::of(&own[g]),
        })
        .collect();
    ManifestSummary {
        groups: m.groups().labels().to_vec(),
        total_identities: m.identity_count(),
        total_images: m.image_count(),
        per_group,
    }
}

impl ManifestSummary {
    /// Stable-key-order JSON.
    pub fn to_json(&self) -> serde_json::Value {
        let mut per_group = serde_json::Map::new();
        for g in &self.per_group {
            per_group.insert(
                g.group.clone(),
                serde_json::json!({
                    "identities": g.identities,
                    "images": g.images,
                    "own_group_score": g.own_group_score,
                }),
            );
        }
        serde_json::json!({
            "groups": self.groups,
            "total_identities": self.total_identities,
            "total_images": self.total_images,
            "per_group": per_group,
        })
    }
}
