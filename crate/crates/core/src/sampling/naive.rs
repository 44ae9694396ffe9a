use std::collections::HashSet;

use crate::manifest::Manifest;
use crate::numeric::ExactSum;
use crate::scoring::{Protocol, ScoringError};

use super::{RemovalBudget, RemovalEvent, RemovalTrace, SamplingError};

/// Reference sampler: every iteration rescans all remaining identities and
/// images and rebuilds every score from scratch, then applies the same
/// selection rules as [`super::sample_protocol`]. Quadratic; exists to check
/// the incremental implementation.
pub fn sample_naive(
    m: &Manifest,
    protocol: Protocol,
    budget: RemovalBudget,
) -> Result<(Manifest, RemovalTrace), SamplingError> {
    budget.check(m, protocol.averages_identities())?;
    let mut removed: HashSet<usize> = HashSet::new();

    let first = rescan(m, protocol, &removed);
    if protocol.averages_identities() {
        if let Some(g) = first.counts.iter().position(|&k| k == 0) {
            return Err(ScoringError::EmptyGroup {
                group: m.groups().name(g).to_string(),
                protocol,
            }
            .into());
        }
    }
    let mut trace = RemovalTrace::new(
        protocol.to_string(),
        None,
        m.groups().clone(),
        protocol,
        first.group_scores.clone(),
    );

    let mut scan = first;
    for step in 1..=budget.0 {
        // Target group.
        let mut target: Option<usize> = None;
        for g in 0..m.group_count() {
            if scan.counts[g] == 0 {
                continue;
            }
            target = match target {
                None => Some(g),
                Some(t) => {
                    let better = if protocol.averages_identities() {
                        scan.group_scores[g] < scan.group_scores[t]
                    } else {
                        scan.group_scores[g] > scan.group_scores[t]
                    };
                    Some(if better { g } else { t })
                }
            };
        }
        let target = target.expect("at least one identity remains");
        if protocol.averages_identities() && scan.counts[target] == 1 {
            return Err(SamplingError::GroupExhausted {
                step,
                group: m.groups().name(target).to_string(),
                protocol,
                partial: Box::new(trace),
            });
        }

        // Lowest-scoring identity of the target group.
        let mut victim: Option<(usize, f64)> = None;
        for &(pos, score) in &scan.identity_scores {
            if m.identities()[pos].group != target {
                continue;
            }
            if victim.is_none_or(|(_, best)| score < best) {
                victim = Some((pos, score));
            }
        }
        let (victim, score) = victim.expect("target group is non-empty");
        removed.insert(victim);

        let next = rescan(m, protocol, &removed);
        trace.events.push(RemovalEvent {
            step,
            identity_id: m.identities()[victim].identity_id.clone(),
            group: target,
            own_group_ids: score,
            diag_before: scan.group_scores.clone(),
            diag_after: next.group_scores.clone(),
        });
        scan = next;
    }

    let kept_images = m
        .images()
        .iter()
        .filter(|img| {
            let pos = m.identity_position(&img.identity_id).unwrap();
            !removed.contains(&pos)
        })
        .cloned()
        .collect();
    let out = Manifest::new(m.groups().clone(), kept_images)
        .expect("subset of a valid manifest is valid");
    Ok((out, trace))
}

struct Scan {
    group_scores: Vec<f64>,
    counts: Vec<usize>,
    /// (identity position, own-group identity score) for every remaining
    /// identity, in first-appearance order.
    identity_scores: Vec<(usize, f64)>,
}

fn rescan(m: &Manifest, protocol: Protocol, removed: &HashSet<usize>) -> Scan {
    let d = m.group_count();
    let mut group_scores = vec![0.0; d];
    let mut counts = vec![0usize; d];
    let mut identity_scores = Vec::new();
    for (y, slot) in group_scores.iter_mut().enumerate() {
        let mut es = ExactSum::new();
        let mut k = 0usize;
        for (pos, rec) in m.identities().iter().enumerate() {
            if rec.group != y || removed.contains(&pos) {
                continue;
            }
            let mut ids = ExactSum::new();
            let mut images = 0usize;
            for &i in &rec.images {
                ids.add(m.images()[i].scores[y]);
                images += 1;
            }
            let ids = match protocol {
                Protocol::A => ids.value() / images as f64,
                Protocol::B | Protocol::C => ids.value(),
            };
            es.add(ids);
            k += 1;
            identity_scores.push((pos, ids));
        }
        *slot = match protocol {
            Protocol::A | Protocol::B if k == 0 => 0.0,
            Protocol::A | Protocol::B => es.value() / k as f64,
            Protocol::C => es.value(),
        };
        counts[y] = k;
    }
    identity_scores.sort_by_key(|&(pos, _)| pos);
    Scan {
        group_scores,
        counts,
        identity_scores,
    }
}
