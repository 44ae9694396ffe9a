//! `contbal` command-line front end.
//!
//! Exit codes: 0 success, 1 data/validation error, 2 usage error,
//! 3 internal invariant violation. Diagnostics go to stderr; data goes to
//! stdout or to the files named by flags. Set `CONTBAL_LOG` (e.g. `info`,
//! `debug`) to change log verbosity.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use contbal::io::write_atomic;
use contbal::manifest::{self, GroupSet, LoadOptions, Manifest, ManifestError};
use contbal::metrics::{self, AccuracyMode, BiasAxis, MetricsError};
use contbal::sampling::{
    self, RemovalBudget, RemovalTrace, SamplingError, SingleStrategy, SpreadMode,
};
use contbal::scoring::{self, Protocol, ScoringError};
use contbal::synth::{self, SynthConfig, SynthError};

#[derive(Parser)]
#[command(name = "contbal", version, about = "Balance identity datasets over continuous demographic scores")]
#[command(propagate_version = true, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a score manifest and report its shape.
    Validate(ValidateArgs),
    /// Per-group counts and own-group score distributions (JSON).
    Summarize(ManifestIn),
    /// Per-identity score vectors (CSV).
    Ids(ScoreArgs),
    /// Group-level score matrix.
    Es(EsArgs),
    /// Reassign every identity to its highest-scoring group.
    Relabel(RelabelArgs),
    /// Remove identities greedily (protocol A/B/C) or at random.
    Sample(SampleArgs),
    /// Thin out a single group by score (min/max) or at random.
    Single(SingleArgs),
    /// Fairness report (average, STD, SER) from pairs or accuracies.
    Metrics(MetricsArgs),
    /// Error/bias Pareto frontier over a runs file.
    Pareto(ParetoArgs),
    /// Own-group score vs an external per-image score.
    Scatter(ScatterArgs),
    /// Generate a seeded synthetic manifest.
    Synth(SynthArgs),
    /// First step at which a trace's group scores are balanced.
    Equilibrium(EquilibriumArgs),
}

#[derive(Args)]
struct ManifestIn {
    /// Score manifest CSV.
    manifest: PathBuf,
    /// Expected groups, comma-separated (default: taken from the header).
    #[arg(long)]
    groups: Option<String>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    input: ManifestIn,
    /// Skip invalid rows instead of failing (inconsistent identities stay fatal).
    #[arg(long)]
    permissive: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    input: ManifestIn,
    #[arg(long, short, value_parser = parse_protocol)]
    protocol: Protocol,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EsArgs {
    #[command(flatten)]
    score: ScoreArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct RelabelArgs {
    manifest: PathBuf,
    #[arg(long)]
    groups: Option<String>,
    /// Relabelled manifest.
    #[arg(long)]
    out: PathBuf,
    /// CSV of changed identities (`identity_id,from,to`).
    #[arg(long)]
    changes: Option<PathBuf>,
}

#[derive(Args)]
struct RemovalCount {
    /// Number of identities to remove.
    #[arg(long, conflicts_with = "target_size", required_unless_present = "target_size")]
    remove: Option<usize>,
    /// Identity count to keep; same as `--remove (current - N)`.
    #[arg(long)]
    target_size: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    manifest: PathBuf,
    #[arg(long)]
    groups: Option<String>,
    /// A, B, C or random.
    #[arg(long, short)]
    protocol: String,
    #[command(flatten)]
    count: RemovalCount,
    /// Required for `random`.
    #[arg(long)]
    seed: Option<u64>,
    /// Relabel identities before sampling.
    #[arg(long)]
    relabel_first: bool,
    /// Use the full-rescan reference sampler.
    #[arg(long)]
    naive: bool,
    /// Removal log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Per-step group score CSV.
    #[arg(long)]
    evolution: Option<PathBuf>,
    /// Subset manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SingleArgs {
    manifest: PathBuf,
    #[arg(long)]
    groups: Option<String>,
    /// Group to thin out.
    #[arg(long)]
    group: String,
    /// min, max or rand.
    #[arg(long, value_parser = parse_strategy)]
    strategy: SingleStrategy,
    /// Fraction of the group's identities to keep, in (0, 1].
    #[arg(long)]
    keep_fraction: f64,
    /// Required for `rand`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Outcomes,
    Similarity,
}

#[derive(Args)]
struct MetricsArgs {
    /// Pairs CSV (`group,correct` or `group,similarity,is_genuine`).
    #[arg(long, conflicts_with = "accuracies", requires = "mode")]
    pairs: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Per-group accuracies, comma-separated; fractions or percentages.
    #[arg(long, value_delimiter = ',', required_unless_present = "pairs", allow_negative_numbers = true)]
    accuracies: Option<Vec<f64>>,
    /// Group names, comma-separated (default: African,Asian,Caucasian,Indian
    /// when there are four values, otherwise g1..gd).
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BiasArg {
    Std,
    Ser,
}

#[derive(Args)]
struct ParetoArgs {
    /// `run_id,strategy,size,acc_<g1>,...` CSV.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, value_enum, default_value = "std")]
    bias: BiasArg,
    /// Runs CSV with an added `on_frontier` column.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScatterArgs {
    manifest: PathBuf,
    #[arg(long)]
    groups: Option<String>,
    /// `image_id,score` CSV.
    #[arg(long)]
    external: PathBuf,
    /// Scatter CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-group correlations JSON (default: stdout).
    #[arg(long)]
    correlations: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config with the same field names as the flags (snake_case).
    #[arg(long, conflicts_with_all = ["seed", "groups", "identities_per_group", "images_per_identity", "concentration", "label_noise"])]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    seed: Option<u64>,
    #[arg(long)]
    groups: Option<String>,
    /// One count for every group, or one per group.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    identities_per_group: Vec<usize>,
    /// `N` or `MIN-MAX` (inclusive).
    #[arg(long, default_value = "1-5", value_parser = parse_range)]
    images_per_identity: (usize, usize),
    /// One value for every group, or one per group.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    concentration: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Manifest CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquilibriumArgs {
    /// Removal log or evolution CSV.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    epsilon: f64,
    /// Use (max - min) / max instead of max - min.
    #[arg(long)]
    relative: bool,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: ScoringError| e.to_string())
}

fn parse_strategy(s: &str) -> Result<SingleStrategy, String> {
    s.parse().map_err(|e: SamplingError| e.to_string())
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected N or MIN-MAX, got `{s}`");
    match s.split_once('-') {
        Some((a, b)) => Ok((
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

/// A failed command: message plus exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn data(message: impl fmt::Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }

    fn usage(message: impl fmt::Display) -> Self {
        Self { code: 2, message: message.to_string() }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::data(e)
            }
        }
    )*};
}
data_error!(ManifestError, ScoringError, MetricsError, SynthError);

impl From<SamplingError> for Failure {
    fn from(e: SamplingError) -> Self {
        let code = if e.is_internal() { 3 } else { 1 };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

/// Writes `body` to `path` atomically, or to stdout when no path is given.
fn emit<E, F>(path: Option<&Path>, body: F) -> CmdResult
where
    E: Into<Failure>,
    F: FnOnce(&mut dyn Write) -> Result<(), E>,
{
    match path {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock).map_err(Into::into)?;
            lock.flush().map_err(Failure::data)
        }
        Some(path) => {
            let mut inner: Option<Failure> = None;
            let res = write_atomic(path, |w| {
                body(w).map_err(|e| {
                    let f: Failure = e.into();
                    let msg = f.message.clone();
                    inner = Some(f);
                    std::io::Error::other(msg)
                })
            });
            match (inner, res) {
                (Some(f), _) => Err(f),
                (None, Err(e)) => Err(Failure::data(format!("{}: {e}", path.display()))),
                (None, Ok(())) => Ok(()),
            }
        }
    }
}

fn emit_json(path: Option<&Path>, value: &serde_json::Value) -> CmdResult {
    emit(path, |w| -> std::io::Result<()> {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e)
    }
}

fn group_option(groups: &Option<String>) -> Result<Option<GroupSet>, Failure> {
    groups
        .as_deref()
        .map(GroupSet::parse_list)
        .transpose()
        .map_err(Failure::usage)
}

fn load(path: &Path, groups: &Option<String>) -> Result<Manifest, Failure> {
    let groups = group_option(groups)?;
    Ok(manifest::load_manifest(path, groups.as_ref())?)
}

fn cmd_validate(a: ValidateArgs) -> CmdResult {
    let opts = LoadOptions {
        groups: group_option(&a.input.groups)?,
        permissive: a.permissive,
    };
    let loaded = manifest::load_manifest_with(&a.input.manifest, &opts)?;
    for r in &loaded.rejected {
        log::warn!("line {}: {}", r.line, r.reason);
    }
    let m = &loaded.manifest;
    let counts: serde_json::Map<String, serde_json::Value> = m
        .groups()
        .labels()
        .iter()
        .zip(m.group_counts())
        .map(|(g, &c)| (g.clone(), c.into()))
        .collect();
    emit_json(
        a.input.out.as_deref(),
        &json!({
            "valid": true,
            "groups": m.groups().labels(),
            "images": m.image_count(),
            "identities": m.identity_count(),
            "identities_per_group": counts,
            "rejected_rows": loaded.rejected,
        }),
    )
}

fn cmd_summarize(a: ManifestIn) -> CmdResult {
    let m = load(&a.manifest, &a.groups)?;
    emit_json(a.out.as_deref(), &manifest::summarize(&m).to_json())
}

fn cmd_ids(a: ScoreArgs) -> CmdResult {
    let m = load(&a.input.manifest, &a.input.groups)?;
    let ids = scoring::compute_ids(&m, a.protocol);
    emit(a.input.out.as_deref(), |w| ids.write_csv(w))
}

fn cmd_es(a: EsArgs) -> CmdResult {
    let input = &a.score.input;
    let m = load(&input.manifest, &input.groups)?;
    let es = scoring::compute_es(&m, a.score.protocol)?;
    match a.format {
        Format::Json => emit_json(input.out.as_deref(), &es.to_json()),
        Format::Csv => emit(input.out.as_deref(), |w| es.write_csv(w)),
    }
}

fn cmd_relabel(a: RelabelArgs) -> CmdResult {
    let m = load(&a.manifest, &a.groups)?;
    let (out, changes) = scoring::relabel_with_changes(&m);
    manifest::write_manifest(&out, &a.out)?;
    if let Some(path) = &a.changes {
        emit(Some(path), |w| scoring::write_relabel_changes(&changes, w))?;
    }
    log::info!("{} of {} identities relabelled", changes.len(), m.identity_count());
    emit_json(
        None,
        &json!({ "identities": m.identity_count(), "relabelled": changes.len() }),
    )
}


fn write_trace(trace: &RemovalTrace, log: Option<&Path>, evolution: Option<&Path>) -> CmdResult {
    if let Some(p) = log {
        emit(Some(p), |w| sampling::write_removal_log(trace, w))?;
    }
    if let Some(p) = evolution {
        emit(Some(p), |w| sampling::write_evolution(trace, w))?;
    }
    Ok(())
}

fn sample_summary(trace: &RemovalTrace, out: &Manifest) -> serde_json::Value {
    let final_diag = trace
        .events
        .last()
        .map(|e| e.diag_after.clone())
        .unwrap_or_else(|| trace.initial_diag.clone());
    json!({
        "strategy": trace.strategy,
        "seed": trace.seed,
        "removed": trace.len(),
        "remaining": out.identity_count(),
        "identities_per_group": out.group_counts(),
        "score_protocol": trace.diag_protocol.to_string(),
        "initial_diag": trace.initial_diag,
        "final_diag": final_diag,
        "warnings": trace.warnings,
    })
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    let random = a.protocol.eq_ignore_ascii_case("random");
    let protocol = if random {
        None
    } else {
        Some(a.protocol.parse::<Protocol>().map_err(Failure::usage)?)
    };
    if random && a.seed.is_none() {
        return Err(Failure::usage("--protocol random requires --seed"));
    }
    if random && a.naive {
        return Err(Failure::usage("--naive applies to protocols A, B and C only"));
    }
    if !random && a.seed.is_some() {
        log::warn!("--seed has no effect on deterministic protocol {}", a.protocol);
    }

    let mut m = load(&a.manifest, &a.groups)?;
    if a.relabel_first {
        m = scoring::relabel(&m);
    }
    let budget = match (a.count.remove, a.count.target_size) {
        (Some(z), _) => RemovalBudget(z),
        (None, Some(n)) => RemovalBudget::to_target_size(&m, n)?,
        (None, None) => unreachable!("clap requires one of --remove/--target-size"),
    };

    let result = match (protocol, a.seed) {
        (Some(p), _) if a.naive => sampling::sample_naive(&m, p, budget),
        (Some(p), _) => sampling::sample_protocol(&m, p, budget),
        (None, Some(seed)) => sampling::sample_random(&m, budget, seed),
        (None, None) => unreachable!(),
    };
    let (out, trace) = match result {
        Ok(r) => r,
        Err(SamplingError::GroupExhausted { step, group, protocol, partial }) => {
            // Keep whatever the run produced so it can be inspected.
            write_trace(&partial, a.log.as_deref(), a.evolution.as_deref())?;
            return Err(SamplingError::GroupExhausted { step, group, protocol, partial }.into());
        }
        Err(e) => return Err(e.into()),
    };
    manifest::write_manifest(&out, &a.out)?;
    write_trace(&trace, a.log.as_deref(), a.evolution.as_deref())?;
    emit_json(None, &sample_summary(&trace, &out))
}

fn cmd_single(a: SingleArgs) -> CmdResult {
    if a.strategy == SingleStrategy::Rand && a.seed.is_none() {
        return Err(Failure::usage("--strategy rand requires --seed"));
    }
    let m = load(&a.manifest, &a.groups)?;
    let (out, trace) = sampling::sample_single_group(&m, &a.group, a.strategy, a.keep_fraction, a.seed)?;
    manifest::write_manifest(&out, &a.out)?;
    write_trace(&trace, a.log.as_deref(), None)?;
    emit_json(None, &sample_summary(&trace, &out))
}

fn default_groups(d: usize) -> Result<GroupSet, Failure> {
    if d == manifest::DEFAULT_GROUPS.len() {
        Ok(GroupSet::default())
    } else {
        GroupSet::new((1..=d).map(|i| format!("g{i}"))).map_err(Failure::usage)
    }
}

fn cmd_metrics(a: MetricsArgs) -> CmdResult {
    let explicit = group_option(&a.groups)?;
    let (groups, accuracies, thresholds) = if let Some(values) = &a.accuracies {
        let groups = match explicit {
            Some(g) => g,
            None => default_groups(values.len())?,
        };
        if groups.len() != values.len() {
            return Err(Failure::usage(format!(
                "{} accuracies for {} groups",
                values.len(),
                groups.len()
            )));
        }
        (groups, metrics::normalize_accuracy_scale(values), None)
    } else {
        let path = a.pairs.as_deref().expect("clap requires --pairs or --accuracies");
        let mode = match a.mode.expect("clap requires --mode with --pairs") {
            ModeArg::Outcomes => AccuracyMode::Outcomes,
            ModeArg::Similarity => AccuracyMode::Similarity,
        };
        let groups = explicit.unwrap_or_default();
        let pairs = metrics::load_pairs(path, mode, &groups)?;
        let per_group = metrics::group_accuracy(&pairs, mode, &groups)?;
        let mut acc = Vec::with_capacity(per_group.len());
        for g in &per_group {
            acc.push(g.accuracy.ok_or_else(|| Failure::data(format!("group `{}` has no pairs", g.group)))?);
        }
        let thresholds = (mode == AccuracyMode::Similarity).then(|| {
            per_group
                .iter()
                .map(|g| (g.group.clone(), json!(g.threshold)))
                .collect::<serde_json::Map<_, _>>()
        });
        (groups, acc, thresholds)
    };
    let report = metrics::fairness_report(&accuracies)?;
    let mut value = report.to_json(&groups);
    if let Some(t) = thresholds {
        value["thresholds"] = t.into();
    }
    emit_json(a.out.as_deref(), &value)
}

fn cmd_pareto(a: ParetoArgs) -> CmdResult {
    let axis = match a.bias {
        BiasArg::Std => BiasAxis::Std,
        BiasArg::Ser => BiasAxis::Ser,
    };
    let table = metrics::load_runs(&a.runs)?;
    let points = table.points(axis)?;
    let mask = metrics::frontier_mask(&points);
    for (p, on) in points.iter().zip(&mask) {
        if !on && !p.bias.is_finite() {
            log::warn!("run `{}` has infinite bias and is excluded from the frontier", p.run_id);
        }
    }
    emit(a.out.as_deref(), |w| table.write_frontier_csv(&mask, w))
}

fn cmd_scatter(a: ScatterArgs) -> CmdResult {
    let m = load(&a.manifest, &a.groups)?;
    let external = scoring::load_external_scores(&a.external)?;
    let table = scoring::score_scatter(&m, &external)?;
    emit(Some(&a.out), |w| table.write_csv(w))?;
    emit_json(a.correlations.as_deref(), &table.correlations_json())
}

fn per_group<T: Copy>(values: &[T], d: usize, what: &str) -> Result<Vec<T>, Failure> {
    match values.len() {
        1 => Ok(vec![values[0]; d]),
        n if n == d => Ok(values.to_vec()),
        n => Err(Failure::usage(format!("--{what} needs 1 or {d} values, got {n}"))),
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(path) => SynthConfig::from_json_file(path)?,
        None => {
            let groups = group_option(&a.groups)?.unwrap_or_default();
            let d = groups.len();
            SynthConfig {
                seed: a.seed.expect("clap requires --seed without --config"),
                identities_per_group: per_group(&a.identities_per_group, d, "identities-per-group")?,
                images_per_identity: a.images_per_identity,
                concentration: per_group(&a.concentration, d, "concentration")?,
                label_noise: a.label_noise,
                groups,
            }
        }
    };
    let m = synth::generate(&cfg)?;
    emit(a.out.as_deref(), |w| manifest::write_manifest_to(&m, w))
}

fn cmd_equilibrium(a: EquilibriumArgs) -> CmdResult {
    let mode = if a.relative { SpreadMode::Relative } else { SpreadMode::Absolute };
    let text = std::fs::read_to_string(&a.trace)
        .map_err(|e| Failure::data(format!("{}: {e}", a.trace.display())))?;
    let is_log = text.starts_with("step,identity_id,");
    let (step, steps) = if is_log {
        let trace = sampling::read_removal_log(&a.trace)?;
        (sampling::equilibrium_step_with(&trace, a.epsilon, mode)?, trace.len())
    } else {
        let evo = sampling::read_evolution(&a.trace)?;
        let rows = evo.as_rows();
        let steps = rows.iter().filter(|(s, _)| *s > 0).count();
        (sampling::first_balanced(&rows, a.epsilon, mode)?, steps)
    };
    emit_json(
        None,
        &json!({
            "equilibrium_step": step,
            "epsilon": a.epsilon,
            "spread": if a.relative { "relative" } else { "absolute" },
            "steps_in_trace": steps,
        }),
    )
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::Ids(a) => cmd_ids(a),
        Command::Es(a) => cmd_es(a),
        Command::Relabel(a) => cmd_relabel(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Single(a) => cmd_single(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Scatter(a) => cmd_scatter(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Equilibrium(a) => cmd_equilibrium(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONTBAL_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
