//! Per-file Bloom filter with double hashing.

use crate::error::{Error, Result};

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn hashes(key: u64) -> (u64, u64) {
    let h1 = mix(key.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let h2 = mix(h1 ^ 0x6a09_e667_f3bc_c909) | 1;
    (h1, h2)
}

/// Number of probes for a given budget: `ceil(bits_per_key * ln 2)`.
pub fn probes_for(bits_per_key: u32) -> u32 {
    ((bits_per_key as f64 * std::f64::consts::LN_2).ceil() as u32).clamp(1, 30)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bloom {
    k: u32,
    bits: u64,
    data: Vec<u8>,
}

impl Bloom {
    pub fn build(keys: &[u64], bits_per_key: u32) -> Bloom {
        if keys.is_empty() {
            return Bloom {
                k: probes_for(bits_per_key),
                bits: 0,
                data: Vec::new(),
            };
        }
        let bits = (keys.len() as u64 * u64::from(bits_per_key)).max(64);
        let mut data = vec![0u8; bits.div_ceil(8) as usize];
        let k = probes_for(bits_per_key);
        for &key in keys {
            let (h1, h2) = hashes(key);
            let mut h = h1;
            for _ in 0..k {
                let bit = h % bits;
                data[(bit / 8) as usize] |= 1 << (bit % 8);
                h = h.wrapping_add(h2);
            }
        }
        Bloom { k, bits, data }
    }

    pub fn may_contain(&self, key: u64) -> bool {
        if self.bits == 0 {
            return false;
        }
        let (h1, h2) = hashes(key);
        let mut h = h1;
        for _ in 0..self.k {
            let bit = h % self.bits;
            if self.data[(bit / 8) as usize] & (1 << (bit % 8)) == 0 {
                return false;
            }
            h = h.wrapping_add(h2);
        }
        true
    }

    pub fn probes(&self) -> u32 {
        self.k
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    /// `[k u32][bits u64][bytes]`.
    pub fn serialize_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.bits.to_le_bytes());
        out.extend_from_slice(&self.data);
    }

    pub fn serialized_len(&self) -> usize {
        12 + self.data.len()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Bloom> {
        let bad = || Error::CorruptSst(String::new(), "bloom filter");
        if bytes.len() < 12 {
            return Err(bad());
        }
        let k = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let bits = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let data = bytes[12..].to_vec();
        if k == 0 || k > 30 || data.len() as u64 != bits.div_ceil(8) {
            return Err(bad());
        }
        Ok(Bloom { k, bits, data })
    }
}
