//! Workload descriptions: operation mixes, access skew and value sizes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::keys::{DistKind, KeyDistribution};

/// How reads and updates pick among existing keys.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Access {
    Uniform,
    /// Skewed toward a scrambled set of popular keys.
    Zipfian { s: f64 },
    /// Skewed toward the most recently inserted keys.
    Latest { s: f64 },
}

impl std::str::FromStr for Access {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Access::Uniform),
            "zipfian" => Ok(Access::Zipfian { s: 0.99 }),
            "latest" => Ok(Access::Latest { s: 0.99 }),
            _ => Err(format!("unknown access pattern {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ValueSize {
    Fixed(usize),
    /// Normal, truncated to `[1, 64 KiB]`.
    Normal { mean: f64, sigma: f64 },
}

impl ValueSize {
    /// Value-size mixes observed in production deployments.
    pub fn mix(name: &str) -> Option<ValueSize> {
        let (mean, sigma) = match name {
            "udb" => (126.7, 22.1),
            "zippydb" => (42.9, 26.1),
            "up2x" => (46.8, 11.6),
            _ => return None,
        };
        Some(ValueSize::Normal { mean, sigma })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ValueSize::Fixed(n) => n as f64,
            ValueSize::Normal { mean, .. } => mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            ValueSize::Fixed(n) => n,
            ValueSize::Normal { mean, sigma } => {
                let d = Normal::new(mean, sigma).expect("valid normal");
                loop {
                    let x = d.sample(rng).round();
                    if (1.0..=learnkv::types::MAX_VALUE_LEN as f64).contains(&x) {
                        return x as usize;
                    }
                }
            }
        }
    }
}

/// Fractions of each operation kind; they sum to one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpMix {
    pub read: f64,
    /// Overwrite of an existing key.
    pub update: f64,
    /// Write of a key not yet in the database.
    pub insert: f64,
    pub scan: f64,
    /// Read followed by a write of the same key.
    pub rmw: f64,
}

impl OpMix {
    fn validate(&self) -> Result<()> {
        let parts = [self.read, self.update, self.insert, self.scan, self.rmw];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(BenchError::InvalidSpec(format!("operation fractions {parts:?} must sum to 1")));
        }
        Ok(())
    }

    /// Whether the key universe must be written before the measured phase.
    pub fn needs_preload(&self) -> bool {
        self.read + self.update + self.scan + self.rmw > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Update,
    Insert,
    Scan,
    Rmw,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [OpKind::Read, OpKind::Update, OpKind::Insert, OpKind::Scan, OpKind::Rmw];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Update => "update",
            OpKind::Insert => "insert",
            OpKind::Scan => "scan",
            OpKind::Rmw => "rmw",
        }
    }
}

impl OpMix {
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> OpKind {
        let mut x: f64 = rng.random();
        for (f, k) in [
            (self.read, OpKind::Read),
            (self.update, OpKind::Update),
            (self.insert, OpKind::Insert),
            (self.scan, OpKind::Scan),
        ] {
            if x < f {
                return k;
            }
            x -= f;
        }
        if self.rmw > 0.0 {
            OpKind::Rmw
        } else {
            // Rounding slack lands on the last non-empty kind.
            [OpKind::Scan, OpKind::Insert, OpKind::Update, OpKind::Read]
                .into_iter()
                .zip([self.scan, self.insert, self.update, self.read])
                .find(|&(_, f)| f > 0.0)
                .map(|(k, _)| k)
                .unwrap_or(OpKind::Read)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    /// Operations in the measured phase.
    pub op_count: u64,
    /// Keys written before the measured phase (when the mix reads).
    pub key_count: u64,
    pub mix: OpMix,
    pub access: Access,
    pub scan_length: usize,
    pub threads: usize,
    pub value_size: ValueSize,
    pub seed: u64,
    pub dist: KeyDistribution,
    /// Write-only runs may switch key distribution every `phase_ops` inserts,
    /// cycling through `phases`.
    pub phases: Vec<KeyDistribution>,
    pub phase_ops: u64,
    /// Operations per throughput interval.
    pub interval_ops: u64,
    /// Record the latency of one in this many operations.
    pub latency_sample: u32,
}

impl WorkloadSpec {
    /// A named preset: `fillrandom`, `readrandom`, `balanced` or
    /// `ycsb-a` through `ycsb-f`.
    pub fn preset(name: &str) -> Result<WorkloadSpec> {
        let m = |read, update, insert, scan, rmw| OpMix {
            read,
            update,
            insert,
            scan,
            rmw,
        };
        let (mix, access) = match name {
            "fillrandom" => (m(0.0, 0.0, 1.0, 0.0, 0.0), Access::Uniform),
            "readrandom" => (m(1.0, 0.0, 0.0, 0.0, 0.0), Access::Uniform),
            "balanced" => (m(0.5, 0.5, 0.0, 0.0, 0.0), Access::Uniform),
            "ycsb-a" => (m(0.5, 0.5, 0.0, 0.0, 0.0), Access::Zipfian { s: 0.99 }),
            "ycsb-b" => (m(0.95, 0.05, 0.0, 0.0, 0.0), Access::Zipfian { s: 0.99 }),
            "ycsb-c" => (m(1.0, 0.0, 0.0, 0.0, 0.0), Access::Zipfian { s: 0.99 }),
            "ycsb-d" => (m(0.95, 0.0, 0.05, 0.0, 0.0), Access::Latest { s: 0.99 }),
            "ycsb-e" => (m(0.0, 0.0, 0.05, 0.95, 0.0), Access::Zipfian { s: 0.99 }),
            "ycsb-f" => (m(0.5, 0.0, 0.0, 0.0, 0.5), Access::Zipfian { s: 0.99 }),
            _ => return Err(BenchError::InvalidSpec(format!("unknown workload {name:?}"))),
        };
        Ok(WorkloadSpec {
            name: name.to_string(),
            op_count: 1_000_000,
            key_count: 1_000_000,
            mix,
            access,
            scan_length: 100,
            threads: 1,
            value_size: ValueSize::Fixed(100),
            seed: 42,
            dist: KeyDistribution::new(DistKind::Uniform),
            phases: Vec::new(),
            phase_ops: 0,
            interval_ops: 100_000,
            latency_sample: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        let bad = |m: &str| Err(BenchError::InvalidSpec(m.to_string()));
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.interval_ops == 0 || self.latency_sample == 0 {
            return bad("interval_ops and latency_sample must be positive");
        }
        if self.mix.needs_preload() && self.key_count == 0 && self.op_count > 0 {
            return bad("a workload that reads needs key_count > 0");
        }
        if !self.phases.is_empty() && (self.phase_ops == 0 || self.mix.insert != 1.0) {
            return bad("distribution phases need phase_ops > 0 and an insert-only mix");
        }
        if let ValueSize::Fixed(n) = self.value_size {
            if n > learnkv::types::MAX_VALUE_LEN {
                return bad("value size exceeds 64 KiB");
            }
        }
        Ok(())
    }
}

/// Picks ranks in `[0, n)` for an access pattern.
pub struct RankSampler {
    zipf: Option<Zipf<f64>>,
    n: u64,
}

impl RankSampler {
    pub fn new(access: Access, n: u64) -> Self {
        let zipf = match access {
            Access::Uniform => None,
            Access::Zipfian { s } | Access::Latest { s } => Some(Zipf::new(n.max(1) as f64, s).expect("valid zipf")),
        };
        RankSampler { zipf, n: n.max(1) }
    }

    /// Popularity rank: 0 is the most popular.
    pub fn rank<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.zipf {
            None => rng.random_range(0..self.n),
            Some(z) => (z.sample(rng) as u64).clamp(1, self.n) - 1,
        }
    }
}

/// Spreads popular ranks over the key space.
pub fn scramble(rank: u64, n: u64) -> u64 {
    let mut z = rank.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) % n.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zipf_top_item_frequency_matches_analytic_mass() {
        let n = 1000u64;
        let s = 0.99;
        let harmonic: f64 = (1..=n).map(|i| 1.0 / (i as f64).powf(s)).sum();
        let expected = 1.0 / harmonic;
        let sampler = RankSampler::new(Access::Zipfian { s }, n);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 400_000;
        let top = (0..draws).filter(|_| sampler.rank(&mut rng) == 0).count();
        let got = top as f64 / draws as f64;
        assert!((got - expected).abs() <= 0.1 * expected, "{got} vs {expected}");
    }

    #[test]
    fn presets_are_valid_and_fractions_sum_to_one() {
        for name in ["fillrandom", "readrandom", "balanced", "ycsb-a", "ycsb-b", "ycsb-c", "ycsb-d", "ycsb-e", "ycsb-f"] {
            WorkloadSpec::preset(name).unwrap().validate().unwrap();
        }
        assert!(WorkloadSpec::preset("ycsb-g").is_err());
        let mut s = WorkloadSpec::preset("balanced").unwrap();
        s.mix.read = 0.7;
        assert!(s.validate().is_err());
        s.mix.read = 0.5;
        s.threads = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn op_choice_follows_the_mix() {
        let mix = WorkloadSpec::preset("ycsb-b").unwrap().mix;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reads = (0..100_000).filter(|_| mix.choose(&mut rng) == OpKind::Read).count();
        assert!((94_000..96_000).contains(&reads), "{reads}");
    }

    #[test]
    fn value_mixes_match_the_truncated_normal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (name, mean, sigma) in [("udb", 126.7, 22.1), ("zippydb", 42.9, 26.1), ("up2x", 46.8, 11.6)] {
            // Mean of the normal rounded to integers and truncated below 1.
            let pdf = |x: f64| (-(x - mean) * (x - mean) / (2.0 * sigma * sigma)).exp();
            let (mut num, mut den) = (0.0, 0.0);
            for k in 1..2000 {
                let w: f64 = (0..100).map(|j| pdf(k as f64 - 0.5 + (j as f64 + 0.5) / 100.0)).sum();
                num += k as f64 * w;
                den += w;
            }
            let want = num / den;
            let v = ValueSize::mix(name).unwrap();
            let xs: Vec<f64> = (0..100_000).map(|_| v.sample(&mut rng) as f64).collect();
            assert!(xs.iter().all(|&x| x >= 1.0));
            let got = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((got - want).abs() < 0.01 * want, "{name}: {got} vs {want}");
        }
        assert_eq!(ValueSize::mix("other"), None);
    }

    #[test]
    fn scramble_stays_in_range() {
        assert!((0..10_000).all(|r| scramble(r, 777) < 777));
        assert_eq!(scramble(5, 0), 0);
    }
}
