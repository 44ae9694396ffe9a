//! Balancing identity-labelled image datasets over continuous demographic
//! scores.
//!
//! Each image carries a score vector over a fixed set of groups. Scores are
//! aggregated per identity ([`scoring::compute_ids`]) and per group
//! ([`scoring::compute_es`]); greedy samplers ([`sampling`]) remove
//! identities until the per-group own scores even out. [`metrics`] turns
//! downstream verification accuracies into fairness summaries and Pareto
//! frontiers, and [`synth`] generates seeded test manifests.

pub mod io;
pub mod manifest;
pub mod metrics;
pub mod numeric;
pub mod rng;
pub mod sampling;
pub mod scoring;
pub mod synth;

pub use manifest::{
    load_manifest, summarize, write_manifest, GroupSet, IdentityRecord, ImageRecord, Manifest,
    ManifestError,
};
pub use metrics::{fairness_report, pareto_frontier, FairnessReport, MetricsError, RunPoint};
pub use sampling::{
    equilibrium_step, sample_naive, sample_protocol, sample_random, sample_single_group,
    RemovalBudget, RemovalEvent, RemovalTrace, SamplingError,
};
pub use scoring::{compute_es, compute_ids, relabel, EsMatrix, IdsTable, Protocol, ScoringError};
pub use synth::{generate, SynthConfig, SynthError};
