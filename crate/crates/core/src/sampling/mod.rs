//! Identity removal: the three greedy protocols, their literal reference
//! implementation, and the random / single-group baselines.
//!
//! Every run yields the reduced manifest plus a [`RemovalTrace`] recording
//! each removed identity and the own-group score vector (the diagonal of
//! the group score matrix) before and after the removal.

mod baselines;
mod greedy;
mod naive;
mod trace_io;

use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::manifest::{GroupSet, Manifest};
use crate::numeric::ExactSum;
use crate::scoring::{Protocol, ScoringError};

pub use baselines::{sample_random, sample_single_group, SingleStrategy};
pub use greedy::sample_protocol;
pub use naive::sample_naive;
pub use trace_io::{read_evolution, read_removal_log, write_evolution, write_removal_log, Evolution};

/// Incremental sums are compared against a from-scratch recomputation at
/// this interval.
pub const CHECKPOINT_INTERVAL: usize = 100;
pub const DRIFT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("removal budget {budget} invalid for {total} identities: {reason}")]
    InvalidBudget {
        budget: usize,
        total: usize,
        reason: String,
    },
    #[error("step {step}: removing from `{group}` would leave it empty (protocol {protocol})")]
    GroupExhausted {
        step: usize,
        group: String,
        protocol: Protocol,
        partial: Box<RemovalTrace>,
    },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(
        "internal invariant violated at step {step}: incremental score {incremental} for `{group}` \
         differs from recomputed {recomputed}"
    )]
    IncrementalDrift {
        step: usize,
        group: String,
        incremental: f64,
        recomputed: f64,
    },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("group `{0}` has no identities")]
    EmptyGroup(String),
    #[error("keep fraction must lie in (0, 1], got {0}")]
    InvalidKeepFraction(f64),
    #[error("group `{group}` must lose {quota} identities but has only {available}")]
    QuotaExceeded {
        group: String,
        quota: usize,
        available: usize,
    },
    #[error("strategy `{0}` needs a seed")]
    MissingSeed(String),
    #[error("unknown strategy `{0}` (expected min, max or rand)")]
    UnknownStrategy(String),
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("trace has no removal steps")]
    EmptyTrace,
    #[error("trace file: {0}")]
    TraceFormat(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SamplingError {
    /// True for failures that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, SamplingError::IncrementalDrift { .. })
    }
}

/// Number of identities to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RemovalBudget(pub usize);

impl RemovalBudget {
    /// Budget that brings the manifest down to `target` identities.
    pub fn to_target_size(m: &Manifest, target: usize) -> Result<Self, SamplingError> {
        let total = m.identity_count();
        if target == 0 || target > total {
            return Err(SamplingError::InvalidBudget {
                budget: total.saturating_sub(target),
                total,
                reason: format!("target size {target} must be in 1..={total}"),
            });
        }
        Ok(Self(total - target))
    }

    /// Static checks. Mean protocols must be able to keep one identity per
    /// group; everything else must keep one identity overall.
    pub(crate) fn check(self, m: &Manifest, keep_every_group: bool) -> Result<(), SamplingError> {
        let total = m.identity_count();
        let err = |reason: String| SamplingError::InvalidBudget {
            budget: self.0,
            total,
            reason,
        };
        if self.0 >= total {
            return Err(err("at least one identity must remain".into()));
        }
        if keep_every_group {
            let nonempty = m.group_counts().iter().filter(|&&c| c > 0).count();
            if self.0 > total - nonempty {
                return Err(err(format!(
                    "at most {} removals keep every group non-empty",
                    total - nonempty
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovalEvent {
    /// 1-based.
    pub step: usize,
    pub identity_id: String,
    pub group: usize,
    pub own_group_ids: f64,
    pub diag_before: Vec<f64>,
    pub diag_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovalTrace {
    /// `A`, `B`, `C`, `random`, or `single-<strategy>`.
    pub strategy: String,
    pub seed: Option<u64>,
    pub groups: GroupSet,
    /// Which aggregation the diagonal values follow.
    pub diag_protocol: Protocol,
    pub initial_diag: Vec<f64>,
    pub events: Vec<RemovalEvent>,
    pub warnings: Vec<String>,
}

impl RemovalTrace {
    pub(crate) fn new(
        strategy: impl Into<String>,
        seed: Option<u64>,
        groups: GroupSet,
        diag_protocol: Protocol,
        initial_diag: Vec<f64>,
    ) -> Self {
        Self {
            strategy: strategy.into(),
            seed,
            groups,
            diag_protocol,
            initial_diag,
            events: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn removed_ids(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.identity_id.as_str()).collect()
    }

    /// Diagonal after each step, starting with step 0 (before any removal).
    pub fn evolution(&self) -> Vec<Vec<f64>> {
        std::iter::once(self.initial_diag.clone())
            .chain(self.events.iter().map(|e| e.diag_after.clone()))
            .collect()
    }
}

/// Own-group score per group, maintained as exact (sum, count) pairs.
#[derive(Debug, Clone)]
pub(crate) struct DiagTracker {
    protocol: Protocol,
    sums: Vec<ExactSum>,
    counts: Vec<usize>,
}

impl DiagTracker {
    /// `own[pos]` is the own-group score of identity `pos`.
    pub(crate) fn new(m: &Manifest, protocol: Protocol, own: &[f64]) -> Self {
        let d = m.group_count();
        let mut sums = vec![ExactSum::new(); d];
        let mut counts = vec![0; d];
        for (pos, rec) in m.identities().iter().enumerate() {
            sums[rec.group].add(own[pos]);
            counts[rec.group] += 1;
        }
        Self {
            protocol,
            sums,
            counts,
        }
    }

    pub(crate) fn remove(&mut self, group: usize, own_value: f64) {
        self.sums[group].sub(own_value);
        self.counts[group] -= 1;
    }

    pub(crate) fn count(&self, group: usize) -> usize {
        self.counts[group]
    }

    /// Mean protocols report 0 for an empty group.
    pub(crate) fn value(&self, group: usize) -> f64 {
        let s = self.sums[group].value();
        if self.protocol.averages_identities() {
            if self.counts[group] == 0 {
                0.0
            } else {
                s / self.counts[group] as f64
            }
        } else {
            s
        }
    }

    pub(crate) fn diag(&self) -> Vec<f64> {
        (0..self.sums.len()).map(|g| self.value(g)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SpreadMode {
    /// `max - min`
    #[default]
    Absolute,
    /// `(max - min) / max`, for unnormalised (summed) scores.
    Relative,
}

pub fn spread(diag: &[f64], mode: SpreadMode) -> f64 {
    let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    match mode {
        SpreadMode::Absolute => max - min,
        SpreadMode::Relative if max > 0.0 => (max - min) / max,
        SpreadMode::Relative => 0.0,
    }
}

/// First step whose post-removal diagonal spread is below `epsilon`.
pub fn equilibrium_step(trace: &RemovalTrace, epsilon: f64) -> Result<Option<usize>, SamplingError> {
    equilibrium_step_with(trace, epsilon, SpreadMode::Absolute)
}

pub fn equilibrium_step_with(
    trace: &RemovalTrace,
    epsilon: f64,
    mode: SpreadMode,
) -> Result<Option<usize>, SamplingError> {
    let rows: Vec<(usize, &[f64])> = trace
        .events
        .iter()
        .map(|e| (e.step, e.diag_after.as_slice()))
        .collect();
    first_balanced(&rows, epsilon, mode)
}

/// Same scan over `(step, diag)` rows, e.g. read back from an evolution file.
/// Rows with step 0 are ignored.
pub fn first_balanced(
    rows: &[(usize, &[f64])],
    epsilon: f64,
    mode: SpreadMode,
) -> Result<Option<usize>, SamplingError> {
    if !(epsilon > 0.0) {
        return Err(SamplingError::InvalidEpsilon(epsilon));
    }
    let mut any = false;
    for &(step, diag) in rows {
        if step == 0 {
            continue;
        }
        any = true;
        if spread(diag, mode) < epsilon {
            return Ok(Some(step));
        }
    }
    if !any {
        return Err(SamplingError::EmptyTrace);
    }
    Ok(None)
}
