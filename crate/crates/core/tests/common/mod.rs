#![allow(dead_code)]

use contbal::manifest::{GroupSet, ImageRecord, Manifest};
use contbal::rng::SplitMix64;
use contbal::scoring::Protocol;
use contbal::synth::{generate, SynthConfig};

pub fn groups(d: usize) -> GroupSet {
    GroupSet::new((0..d).map(|g| format!("G{g}"))).unwrap()
}

/// Random manifest with `d` groups (each non-empty), `n` identities and
/// 1..=`max_images` images per identity. `coarse` snaps every score to a
/// multiple of 1/4 of a few integer weights so that ties are common.
pub fn random_manifest(rng: &mut SplitMix64, d: usize, n: usize, max_images: usize, coarse: bool) -> Manifest {
    assert!(n >= d);
    let mut counts = vec![1usize; d];
    for _ in d..n {
        counts[rng.below(d as u64) as usize] += 1;
    }
    if !coarse {
        let cfg = SynthConfig {
            seed: rng.next_u64(),
            groups: groups(d),
            identities_per_group: counts,
            images_per_identity: (1, max_images),
            concentration: (0..d).map(|_| 0.2 + 20.0 * rng.next_f64()).collect(),
            label_noise: 0.2 * rng.next_f64(),
        };
        return generate(&cfg).unwrap();
    }
    let mut images = Vec::new();
    let mut id = 0;
    for (g, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let m = 1 + rng.below(max_images as u64) as usize;
            for _ in 0..m {
                // Integer weights with a bias towards the own group.
                let mut w: Vec<u64> = (0..d).map(|_| rng.below(3)).collect();
                w[g] += 1 + rng.below(3);
                let total: u64 = w.iter().sum();
                images.push(ImageRecord {
                    image_id: format!("im{}", images.len()),
                    identity_id: format!("p{id}"),
                    group: g,
                    scores: w.iter().map(|&x| x as f64 / total as f64).collect(),
                });
            }
            id += 1;
        }
    }
    Manifest::new(groups(d), images).unwrap()
}

/// Per-identity score vectors by a direct loop over images (no shared code
/// with the library).
pub fn oracle_ids(m: &Manifest, p: Protocol) -> Vec<Vec<f64>> {
    let d = m.group_count();
    m.identities()
        .iter()
        .map(|rec| {
            let mut acc = vec![0.0; d];
            let mut count = 0.0;
            for img in m.images().iter().filter(|i| i.identity_id == rec.identity_id) {
                for k in 0..d {
                    acc[k] += img.scores[k];
                }
                count += 1.0;
            }
            if p == Protocol::A {
                acc.iter_mut().for_each(|v| *v /= count);
            }
            acc
        })
        .collect()
}

pub fn oracle_es(m: &Manifest, p: Protocol) -> Vec<Vec<f64>> {
    let d = m.group_count();
    let ids = oracle_ids(m, p);
    let mut es = vec![vec![0.0; d]; d];
    for r in 0..d {
        let mut n = 0.0;
        for (pos, rec) in m.identities().iter().enumerate() {
            if rec.group == r {
                for c in 0..d {
                    es[r][c] += ids[pos][c];
                }
                n += 1.0;
            }
        }
        if p != Protocol::C && n > 0.0 {
            es[r].iter_mut().for_each(|v| *v /= n);
        }
    }
    es
}
