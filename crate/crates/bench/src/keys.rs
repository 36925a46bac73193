//! Synthetic key-set generators, ordered roughly by how hard they are to
//! model: linear, uniform, lognormal, clustered.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistKind {
    Uniform,
    Linear,
    Lognormal,
    Clustered,
}

impl std::str::FromStr for DistKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(DistKind::Uniform),
            "linear" => Ok(DistKind::Linear),
            "lognormal" => Ok(DistKind::Lognormal),
            "clustered" => Ok(DistKind::Clustered),
            _ => Err(format!("unknown distribution {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyDistribution {
    pub kind: DistKind,
    /// Keys are drawn from `[0, universe)`.
    pub universe: u64,
    /// Number of dense clusters for `Clustered`.
    pub clusters: usize,
    /// Shape of `Lognormal`.
    pub sigma: f64,
}

impl KeyDistribution {
    pub fn new(kind: DistKind) -> Self {
        KeyDistribution {
            kind,
            universe: 1 << 62,
            clusters: 16,
            sigma: 2.0,
        }
    }
}

/// `n` unique keys in ascending order, deterministic for a given seed.
pub fn gen_keys(dist: &KeyDistribution, n: usize, seed: u64) -> Result<Vec<u64>> {
    let too_small = || BenchError::UniverseTooSmall {
        n: n as u64,
        universe: dist.universe,
    };
    if n as u64 > dist.universe {
        return Err(too_small());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = match dist.kind {
        DistKind::Linear => {
            let stride = if n == 0 { 1 } else { dist.universe / n as u64 };
            (0..n as u64).map(|i| i * stride).collect()
        }
        DistKind::Uniform => rand::seq::index::sample(&mut rng, dist.universe as usize, n)
            .into_iter()
            .map(|k| k as u64)
            .collect(),
        DistKind::Lognormal => lognormal(dist, n, &mut rng).ok_or_else(too_small)?,
        DistKind::Clustered => clustered(dist, n, &mut rng).ok_or_else(too_small)?,
    };
    keys.sort_unstable();
    debug_assert!(keys.windows(2).all(|w| w[0] < w[1]));
    Ok(keys)
}

fn lognormal(dist: &KeyDistribution, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<u64>> {
    let d = LogNormal::new(0.0, dist.sigma).ok()?;
    // Put the four-sigma quantile at the top of the universe.
    let scale = dist.universe as f64 / (4.0 * dist.sigma).exp();
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 20 * n + 1000 {
            return None;
        }
        let k = d.sample(rng) * scale;
        if k < dist.universe as f64 {
            let k = k as u64;
            if seen.insert(k) {
                out.push(k);
            }
        }
    }
    Some(out)
}

/// Dense clusters of uneven size and density separated by wide gaps; inside
/// a cluster the local gap changes every few hundred keys.
fn clustered(dist: &KeyDistribution, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<u64>> {
    let c = dist.clusters.max(1);
    let slot = dist.universe / c as u64;
    let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..1.7)).collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights.iter().map(|w| (w / total * n as f64) as usize).collect();
    let assigned: usize = sizes.iter().sum();
    sizes[c - 1] += n - assigned;
    let mut out = Vec::with_capacity(n);
    for (i, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        let room = slot / 4 * 3;
        if (size as u64) > room {
            return None;
        }
        let max_gap = rng.random_range(1..=64u64).min(room / size as u64).max(1);
        let mut k = slot * i as u64 + rng.random_range(0..slot / 4 + 1);
        let mut local = max_gap;
        for j in 0..size {
            if j % 512 == 0 {
                local = rng.random_range(1..=max_gap);
            }
            out.push(k);
            k += rng.random_range(1..=local);
        }
    }
    Some(out)
}

/// Reads a file of little-endian u64 keys prefixed by a u64 count, keeping
/// the unique keys in ascending order.
pub fn load_key_file(path: &Path) -> Result<Vec<u64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(BenchError::InvalidSpec(format!("{} is too short", path.display())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < n * 8 {
        return Err(BenchError::InvalidSpec(format!("{} holds fewer than {n} keys", path.display())));
    }
    let mut keys: Vec<u64> = body[..n * 8]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    Ok(keys)
}

/// A seeded permutation of `keys`.
pub fn shuffled(mut keys: Vec<u64>, seed: u64) -> Vec<u64> {
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    keys
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_an_arithmetic_progression() {
        let d = KeyDistribution {
            universe: 100,
            ..KeyDistribution::new(DistKind::Linear)
        };
        assert_eq!(gen_keys(&d, 5, 0).unwrap(), vec![0, 20, 40, 60, 80]);
    }

    #[test]
    fn every_kind_is_deterministic_unique_and_sized() {
        for kind in [DistKind::Uniform, DistKind::Linear, DistKind::Lognormal, DistKind::Clustered] {
            let d = KeyDistribution::new(kind);
            let a = gen_keys(&d, 20_000, 9).unwrap();
            assert_eq!(a, gen_keys(&d, 20_000, 9).unwrap());
            assert_eq!(a.len(), 20_000);
            assert!(a.windows(2).all(|w| w[0] < w[1]), "{kind:?}");
            assert!(a.iter().all(|&k| k < d.universe));
        }
    }

    #[test]
    fn too_many_keys_is_an_error() {
        let d = KeyDistribution {
            universe: 10,
            ..KeyDistribution::new(DistKind::Uniform)
        };
        assert!(matches!(gen_keys(&d, 11, 0), Err(BenchError::UniverseTooSmall { .. })));
        assert_eq!(gen_keys(&d, 10, 0).unwrap(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn clustered_has_separated_dense_clusters() {
        let d = KeyDistribution::new(DistKind::Clustered);
        let keys = gen_keys(&d, 100_000, 3).unwrap();
        let wide = d.universe / d.clusters as u64 / 8;
        let gaps = keys.windows(2).filter(|w| w[1] - w[0] > wide).count();
        assert!(gaps + 1 >= 10, "{gaps} wide gaps");
        let max_local = keys.windows(2).map(|w| w[1] - w[0]).filter(|&g| g <= wide).max().unwrap();
        assert!(max_local <= 64);
    }

    #[test]
    fn key_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("keys");
        let keys = [5u64, 1, 9, 5];
        let mut bytes = (keys.len() as u64).to_le_bytes().to_vec();
        for k in keys {
            bytes.extend_from_slice(&k.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_key_file(&p).unwrap(), vec![1, 5, 9]);
    }
}
