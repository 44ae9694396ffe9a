use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::manifest::Manifest;
use crate::rng::SplitMix64;
use crate::scoring::{compute_ids, Protocol};

use super::{DiagTracker, RemovalBudget, RemovalEvent, RemovalTrace, SamplingError};

/// Protects `ceil` from float noise such as `0.3 * 10 = 3.0000000000000004`.
const KEEP_CEIL_SLACK: f64 = 1e-9;

/// Random removal that keeps per-group identity counts as even as possible:
/// every group loses `z / d`, and `z mod d` groups, drawn without replacement,
/// lose one more. Trace diagonals use mean-of-means (protocol A) scores.
pub fn sample_random(
    m: &Manifest,
    budget: RemovalBudget,
    seed: u64,
) -> Result<(Manifest, RemovalTrace), SamplingError> {
    budget.check(m, false)?;
    let d = m.group_count();
    let z = budget.0;
    let mut rng = SplitMix64::new(seed);

    let mut quota = vec![z / d; d];
    let remainder = z % d;
    for g in rng.sample_indices(d, remainder) {
        quota[g] += 1;
    }

    let mut warnings = Vec::new();
    let counts = m.group_counts();
    if remainder != 0 && counts.iter().all(|&c| c == counts[0]) {
        warnings.push(format!(
            "budget {z} is not a multiple of {d} groups; result is off balance by one identity in {remainder} group(s)"
        ));
    }

    let mut victims = Vec::with_capacity(z);
    for (g, &q) in quota.iter().enumerate() {
        let members: Vec<usize> = m.identities_in_group(g).collect();
        if q > members.len() {
            return Err(SamplingError::QuotaExceeded {
                group: m.groups().name(g).to_string(),
                quota: q,
                available: members.len(),
            });
        }
        victims.extend(
            rng.sample_indices(members.len(), q)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    rng.shuffle(&mut victims);

    for w in &warnings {
        log::warn!("{w}");
    }
    let (out, mut trace) = apply_removals(m, &victims, "random", Some(seed));
    trace.warnings = warnings;
    Ok((out, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SingleStrategy {
    /// Keep the identities with the lowest own-group score.
    Min,
    /// Keep the identities with the highest own-group score.
    Max,
    /// Keep a uniform random subset.
    Rand,
}

impl fmt::Display for SingleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SingleStrategy::Min => "min",
            SingleStrategy::Max => "max",
            SingleStrategy::Rand => "rand",
        })
    }
}

impl FromStr for SingleStrategy {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(SingleStrategy::Min),
            "max" => Ok(SingleStrategy::Max),
            "rand" => Ok(SingleStrategy::Rand),
            other => Err(SamplingError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Thins a single group down to `ceil(keep_fraction * N_g)` identities,
/// leaving every other group untouched. `seed` is required for `Rand`.
pub fn sample_single_group(
    m: &Manifest,
    group: &str,
    strategy: SingleStrategy,
    keep_fraction: f64,
    seed: Option<u64>,
) -> Result<(Manifest, RemovalTrace), SamplingError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SamplingError::InvalidKeepFraction(keep_fraction));
    }
    let g = m
        .groups()
        .index_of(group)
        .ok_or_else(|| SamplingError::UnknownGroup(group.to_string()))?;
    let members: Vec<usize> = m.identities_in_group(g).collect();
    if members.is_empty() {
        return Err(SamplingError::EmptyGroup(group.to_string()));
    }
    let n = members.len();
    let keep = ((keep_fraction * n as f64 - KEEP_CEIL_SLACK).ceil() as usize).clamp(1, n);
    let drop = n - keep;

    let ids = compute_ids(m, Protocol::A);
    let own = ids.own_group();
    let mut ascending = members.clone();
    ascending.sort_by(|&a, &b| {
        own[a]
            .partial_cmp(&own[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    // Removal order: least wanted first.
    let victims: Vec<usize> = match strategy {
        SingleStrategy::Max => ascending[..drop].to_vec(),
        SingleStrategy::Min => ascending[keep..].iter().rev().copied().collect(),
        SingleStrategy::Rand => {
            let seed = seed.ok_or_else(|| SamplingError::MissingSeed("rand".into()))?;
            let mut rng = SplitMix64::new(seed);
            rng.sample_indices(n, drop)
                .into_iter()
                .map(|i| members[i])
                .collect()
        }
    };
    let label = format!("single-{strategy}");
    let seed = if strategy == SingleStrategy::Rand { seed } else { None };
    Ok(apply_removals(m, &victims, &label, seed))
}

/// Removes `victims` in order, recording protocol-A diagonals.
fn apply_removals(
    m: &Manifest,
    victims: &[usize],
    label: &str,
    seed: Option<u64>,
) -> (Manifest, RemovalTrace) {
    let own = compute_ids(m, Protocol::A).own_group();
    let mut tracker = DiagTracker::new(m, Protocol::A, &own);
    let mut trace = RemovalTrace::new(label, seed, m.groups().clone(), Protocol::A, tracker.diag());
    for (i, &pos) in victims.iter().enumerate() {
        let group = m.identities()[pos].group;
        let before = tracker.diag();
        tracker.remove(group, own[pos]);
        trace.events.push(RemovalEvent {
            step: i + 1,
            identity_id: m.identities()[pos].identity_id.clone(),
            group,
            own_group_ids: own[pos],
            diag_before: before,
            diag_after: tracker.diag(),
        });
    }
    let removed: HashSet<usize> = victims.iter().copied().collect();
    (m.without_identities(&removed), trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{GroupSet, ImageRecord};

    fn balanced(per_group: usize) -> Manifest {
        let groups = GroupSet::default();
        let mut images = Vec::new();
        for g in 0..4 {
            for k in 0..per_group {
                let own = 0.3 + 0.6 * ((k * 7 + g * 3) % per_group) as f64 / per_group as f64;
                let mut scores = vec![(1.0 - own) / 3.0; 4];
                scores[g] = own;
                images.push(ImageRecord {
                    image_id: format!("img_{g}_{k}"),
                    identity_id: format!("id_{g}_{k}"),
                    group: g,
                    scores,
                });
            }
        }
        Manifest::new(groups, images).unwrap()
    }

    fn removed_per_group(m: &Manifest, t: &RemovalTrace) -> Vec<usize> {
        let mut c = vec![0; m.group_count()];
        for e in &t.events {
            c[e.group] += 1;
        }
        c
    }

    #[test]
    fn random_divisible_budget_is_even() {
        let m = balanced(50);
        let (out, t) = sample_random(&m, RemovalBudget(40), 11).unwrap();
        assert_eq!(removed_per_group(&m, &t), vec![10; 4]);
        assert_eq!(out.group_counts(), &[40; 4]);
        assert!(t.warnings.is_empty());
    }

    #[test]
    fn random_remainder_rule() {
        let m = balanced(20);
        let (_, t) = sample_random(&m, RemovalBudget(6), 5).unwrap();
        let mut c = removed_per_group(&m, &t);
        c.sort_unstable();
        assert_eq!(c, vec![1, 1, 2, 2]);
        assert_eq!(t.warnings.len(), 1);
        // Which groups get the extra removal depends on the seed.
        let patterns: HashSet<Vec<usize>> = (0..20)
            .map(|s| removed_per_group(&m, &sample_random(&m, RemovalBudget(6), s).unwrap().1))
            .collect();
        assert!(patterns.len() > 1);
    }

    #[test]
    fn random_is_deterministic() {
        let m = balanced(30);
        let a = sample_random(&m, RemovalBudget(17), 7).unwrap();
        let b = sample_random(&m, RemovalBudget(17), 7).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
        let c = sample_random(&m, RemovalBudget(17), 8).unwrap();
        assert_ne!(a.1.removed_ids(), c.1.removed_ids());
    }

    #[test]
    fn random_quota_exceeded() {
        // African thinned to one identity; an even split of 8 asks for two.
        let (m, _) = sample_single_group(&balanced(10), "African", SingleStrategy::Max, 0.1, None).unwrap();
        assert_eq!(m.group_counts(), &[1, 10, 10, 10]);
        assert!(matches!(
            sample_random(&m, RemovalBudget(8), 1),
            Err(SamplingError::QuotaExceeded { .. })
        ));
    }

    #[test]
    fn single_min_max_partition_the_group() {
        let m = balanced(10);
        let (min_out, _) = sample_single_group(&m, "Asian", SingleStrategy::Min, 0.5, None).unwrap();
        let (max_out, _) = sample_single_group(&m, "Asian", SingleStrategy::Max, 0.5, None).unwrap();
        let kept = |o: &Manifest| -> HashSet<String> {
            o.identities()
                .iter()
                .filter(|r| r.group == 1)
                .map(|r| r.identity_id.clone())
                .collect()
        };
        let (a, b) = (kept(&min_out), kept(&max_out));
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).count(), 10);
        assert_eq!(min_out.group_counts(), &[10, 5, 10, 10]);
    }

    #[test]
    fn single_keep_all_is_identity() {
        let m = balanced(8);
        for s in [SingleStrategy::Min, SingleStrategy::Max, SingleStrategy::Rand] {
            let (out, t) = sample_single_group(&m, "Indian", s, 1.0, Some(3)).unwrap();
            assert_eq!(out, m);
            assert!(t.is_empty());
        }
    }

    #[test]
    fn single_errors() {
        let m = balanced(8);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                sample_single_group(&m, "Asian", SingleStrategy::Max, f, None),
                Err(SamplingError::InvalidKeepFraction(_))
            ));
        }
        assert!(matches!(
            sample_single_group(&m, "Martian", SingleStrategy::Max, 0.5, None),
            Err(SamplingError::UnknownGroup(_))
        ));
        assert!(matches!(
            sample_single_group(&m, "Asian", SingleStrategy::Rand, 0.5, None),
            Err(SamplingError::MissingSeed(_))
        ));
    }

    #[test]
    fn keep_count_ignores_float_noise() {
        let m = balanced(10);
        let (out, _) = sample_single_group(&m, "African", SingleStrategy::Max, 0.3, None).unwrap();
        assert_eq!(out.group_counts()[0], 3);
    }
}
