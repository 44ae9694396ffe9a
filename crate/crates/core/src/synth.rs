//! Seeded synthetic score manifests.
//!
//! Every identity gets a uniform base level `u_id`, every image a uniform
//! jitter `u_img`. With `x = (3*u_id + u_img) / 4`, the odds `u = x / (1 - x)`
//! and the assigned group's concentration `c`, the sharpness is
//! `t = c*u / (1 + c*u)` and
//!
//! ```text
//! peak  = 1/d + (1 - 1/d) * t
//! other = (1 - peak) * ((1 - t) / (d - 1) + t * w_k)
//! ```
//!
//! where `w` are per-image random weights over the non-peak groups,
//! normalised to sum 1. `t -> 0` gives the uniform vector, `t -> 1` a
//! one-hot vector. Because the odds are heavy-tailed, even a group with low
//! concentration contains a few sharply peaked identities; `c` shifts how
//! common they are. Only `+ - * /` are used, so output is bit-identical on
//! every IEEE-754 platform.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{GroupSet, ImageRecord, Manifest, ManifestError};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("all groups are empty")]
    AllGroupsEmpty,
    #[error("config {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default)]
    pub groups: GroupSet,
    pub identities_per_group: Vec<usize>,
    /// Inclusive range.
    pub images_per_identity: (usize, usize),
    /// Per group, > 0. Larger values concentrate scores on the peak group.
    pub concentration: Vec<f64>,
    /// Probability that an identity's peak sits on a random other group.
    #[serde(default)]
    pub label_noise: f64,
}

impl SynthConfig {
    /// `identities` per group, one image each, concentration 10 everywhere.
    pub fn balanced(seed: u64, groups: GroupSet, identities: usize) -> Self {
        let d = groups.len();
        Self {
            seed,
            groups,
            identities_per_group: vec![identities; d],
            images_per_identity: (1, 1),
            concentration: vec![10.0; d],
            label_noise: 0.0,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, SynthError> {
        let text = crate::io::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SynthError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let d = self.groups.len();
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.identities_per_group.len() != d {
            return bad(format!(
                "identities_per_group has {} entries for {d} groups",
                self.identities_per_group.len()
            ));
        }
        if self.concentration.len() != d {
            return bad(format!(
                "concentration has {} entries for {d} groups",
                self.concentration.len()
            ));
        }
        if let Some(c) = self.concentration.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return bad(format!("concentration must be finite and > 0, got {c}"));
        }
        let (lo, hi) = self.images_per_identity;
        if lo == 0 || lo > hi {
            return bad(format!("images_per_identity must satisfy 1 <= min <= max, got ({lo}, {hi})"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad(format!("label_noise must be in [0, 1), got {}", self.label_noise));
        }
        if self.identities_per_group.iter().all(|&n| n == 0) {
            return Err(SynthError::AllGroupsEmpty);
        }
        Ok(())
    }
}

/// Builds the manifest for `cfg`. Identities are numbered `id00000, ...`
/// group by group; images `img000000, ...` in the same order.
pub fn generate(cfg: &SynthConfig) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let d = cfg.groups.len();
    let (lo, hi) = cfg.images_per_identity;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut images = Vec::new();
    let mut identity_no = 0usize;
    for (g, &n) in cfg.identities_per_group.iter().enumerate() {
        let c = cfg.concentration[g];
        for _ in 0..n {
            let identity_id = format!("id{identity_no:05}");
            identity_no += 1;
            let count = lo + rng.below((hi - lo + 1) as u64) as usize;
            let u_id = rng.next_f64();
            let peak_group = if rng.bernoulli(cfg.label_noise) {
                let other = rng.below((d - 1) as u64) as usize;
                if other >= g {
                    other + 1
                } else {
                    other
                }
            } else {
                g
            };
            for _ in 0..count {
                let x = (3.0 * u_id + rng.next_f64()) / 4.0;
                let u = x / (1.0 - x);
                let scores = score_vector(d, peak_group, c * u, &mut rng);
                images.push(ImageRecord {
                    image_id: format!("img{:06}", images.len()),
                    identity_id: identity_id.clone(),
                    group: g,
                    scores,
                });
            }
        }
    }
    Ok(Manifest::new(cfg.groups.clone(), images)?)
}

fn score_vector(d: usize, peak_group: usize, cu: f64, rng: &mut SplitMix64) -> Vec<f64> {
    let t = cu / (1.0 + cu);
    let df = d as f64;
    let peak = 1.0 / df + (1.0 - 1.0 / df) * t;
    let mut w: Vec<f64> = (0..d - 1).map(|_| rng.next_f64()).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / (df - 1.0));
    }
    let mut rest = w.into_iter();
    (0..d)
        .map(|k| {
            if k == peak_group {
                peak
            } else {
                let wk = rest.next().expect("d - 1 weights");
                (1.0 - peak) * ((1.0 - t) / (df - 1.0) + t * wk)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::write_manifest_to;
    use crate::scoring::{compute_es, relabel_with_changes, Protocol};

    fn cfg(seed: u64, conc: f64, noise: f64) -> SynthConfig {
        SynthConfig {
            seed,
            groups: GroupSet::default(),
            identities_per_group: vec![10; 4],
            images_per_identity: (1, 1),
            concentration: vec![conc; 4],
            label_noise: noise,
        }
    }

    #[test]
    fn sharp_limit_is_one_hot() {
        let m = generate(&cfg(1, 1e9, 0.0)).unwrap();
        let es = compute_es(&m, Protocol::A).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((es.get(r, c) - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn flat_limit_is_uniform() {
        let m = generate(&cfg(2, 1e-9, 0.0)).unwrap();
        for v in compute_es(&m, Protocol::A).unwrap().diag() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = SynthConfig {
            images_per_identity: (1, 5),
            label_noise: 0.1,
            ..cfg(7, 3.0, 0.0)
        };
        let bytes = |m: &Manifest| {
            let mut b = Vec::new();
            write_manifest_to(m, &mut b).unwrap();
            b
        };
        let a = bytes(&generate(&c).unwrap());
        assert_eq!(a, bytes(&generate(&c).unwrap()));
        assert_ne!(a, bytes(&generate(&SynthConfig { seed: 8, ..c }).unwrap()));
    }

    #[test]
    fn own_score_grows_with_concentration() {
        let mut prev = 0.0;
        for conc in [0.5, 2.0, 8.0, 32.0] {
            let m = generate(&cfg(3, conc, 0.0)).unwrap();
            let mean = compute_es(&m, Protocol::A).unwrap().diag().iter().sum::<f64>() / 4.0;
            assert!(mean > prev);
            prev = mean;
        }
    }

    #[test]
    fn noiseless_sharp_manifest_is_a_relabel_fixed_point() {
        let m = generate(&cfg(4, 50.0, 0.0)).unwrap();
        assert!(relabel_with_changes(&m).1.is_empty());
    }

    #[test]
    fn image_counts_in_range() {
        let c = SynthConfig {
            images_per_identity: (2, 4),
            ..cfg(5, 5.0, 0.0)
        };
        let m = generate(&c).unwrap();
        assert!(m.identities().iter().all(|r| (2..=4).contains(&r.image_count())));
        let counts: std::collections::HashSet<usize> =
            m.identities().iter().map(|r| r.image_count()).collect();
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn config_validation() {
        let ok = cfg(0, 1.0, 0.0);
        assert!(ok.validate().is_ok());
        let cases = [
            SynthConfig { identities_per_group: vec![0; 4], ..ok.clone() },
            SynthConfig { identities_per_group: vec![1; 3], ..ok.clone() },
            SynthConfig { concentration: vec![1.0, 1.0, 0.0, 1.0], ..ok.clone() },
            SynthConfig { images_per_identity: (0, 2), ..ok.clone() },
            SynthConfig { images_per_identity: (3, 2), ..ok.clone() },
            SynthConfig { label_noise: 1.0, ..ok.clone() },
        ];
        for c in cases {
            assert!(generate(&c).is_err(), "{c:?}");
        }
        // An empty group is fine as long as some group is populated.
        let partial = SynthConfig { identities_per_group: vec![3, 0, 2, 1], ..ok };
        assert_eq!(generate(&partial).unwrap().group_counts(), &[3, 0, 2, 1]);
    }

    #[test]
    fn json_field_names() {
        let text = r#"{"seed": 3, "groups": ["a", "b"], "identities_per_group": [2, 3],
                       "images_per_identity": [1, 2], "concentration": [1.5, 4.0],
                       "label_noise": 0.1}"#;
        let c: SynthConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.groups.labels(), ["a", "b"]);
        assert_eq!(c.images_per_identity, (1, 2));
        let back: SynthConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<SynthConfig>(r#"{"seed":1,"bogus":2}"#).is_err());
    }
}
