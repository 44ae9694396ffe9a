use std::cmp::Ordering;
use std::collections::HashSet;

use crate::manifest::Manifest;
use crate::numeric::ExactSum;
use crate::scoring::{compute_ids, es_from_ids, Protocol};

use super::{
    DiagTracker, RemovalBudget, RemovalEvent, RemovalTrace, SamplingError, CHECKPOINT_INTERVAL,
    DRIFT_TOLERANCE,
};

/// Greedy identity removal under one of the three protocols.
///
/// Each step picks the target group (lowest own-group score for A and B,
/// highest for C) and removes that group's identity with the lowest
/// own-group identity score. Identity scores do not depend on labels or on
/// which other identities remain, so each group's candidates are sorted once
/// and consumed from the front; group scores are kept as exact running
/// sums. Ties: lowest group index, then earliest identity.
pub fn sample_protocol(
    m: &Manifest,
    protocol: Protocol,
    budget: RemovalBudget,
) -> Result<(Manifest, RemovalTrace), SamplingError> {
    budget.check(m, protocol.averages_identities())?;
    let ids = compute_ids(m, protocol);
    // Surfaces the empty-group error for mean protocols.
    es_from_ids(m, &ids)?;
    let own = ids.own_group();
    let d = m.group_count();

    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); d];
    for (pos, rec) in m.identities().iter().enumerate() {
        queues[rec.group].push(pos);
    }
    for q in &mut queues {
        q.sort_by(|&a, &b| {
            own[a]
                .partial_cmp(&own[b])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
    }
    let mut heads = vec![0usize; d];

    let mut tracker = DiagTracker::new(m, protocol, &own);
    let mut trace = RemovalTrace::new(
        protocol.to_string(),
        None,
        m.groups().clone(),
        protocol,
        tracker.diag(),
    );
    let mut removed = HashSet::with_capacity(budget.0);

    for step in 1..=budget.0 {
        let before = tracker.diag();
        let target = select_target(protocol, &before, &tracker);
        if protocol.averages_identities() && tracker.count(target) <= 1 {
            return Err(SamplingError::GroupExhausted {
                step,
                group: m.groups().name(target).to_string(),
                protocol,
                partial: Box::new(trace),
            });
        }
        let victim = queues[target][heads[target]];
        heads[target] += 1;
        tracker.remove(target, own[victim]);
        removed.insert(victim);
        trace.events.push(RemovalEvent {
            step,
            identity_id: m.identities()[victim].identity_id.clone(),
            group: target,
            own_group_ids: own[victim],
            diag_before: before,
            diag_after: tracker.diag(),
        });
        if step % CHECKPOINT_INTERVAL == 0 {
            verify_against_scratch(m, &own, &removed, &tracker, step)?;
        }
    }

    Ok((m.without_identities(&removed), trace))
}

fn select_target(protocol: Protocol, diag: &[f64], tracker: &DiagTracker) -> usize {
    let mut best: Option<usize> = None;
    for (g, &v) in diag.iter().enumerate() {
        if tracker.count(g) == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) if protocol.averages_identities() => v < diag[b],
            Some(b) => v > diag[b],
        };
        if better {
            best = Some(g);
        }
    }
    best.expect("budget check keeps at least one identity")
}

fn verify_against_scratch(
    m: &Manifest,
    own: &[f64],
    removed: &HashSet<usize>,
    tracker: &DiagTracker,
    step: usize,
) -> Result<(), SamplingError> {
    let d = m.group_count();
    let mut sums = vec![ExactSum::new(); d];
    let mut counts = vec![0usize; d];
    for (pos, rec) in m.identities().iter().enumerate() {
        if !removed.contains(&pos) {
            sums[rec.group].add(own[pos]);
            counts[rec.group] += 1;
        }
    }
    for g in 0..d {
        let scratch = if tracker.protocol.averages_identities() {
            if counts[g] == 0 {
                0.0
            } else {
                sums[g].value() / counts[g] as f64
            }
        } else {
            sums[g].value()
        };
        let incremental = tracker.value(g);
        if counts[g] != tracker.count(g) || (scratch - incremental).abs() > DRIFT_TOLERANCE {
            return Err(SamplingError::IncrementalDrift {
                step,
                group: m.groups().name(g).to_string(),
                incremental,
                recomputed: scratch,
            });
        }
    }
    Ok(())
}
