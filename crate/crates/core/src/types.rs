//! Keys, versioned records and the record wire format shared by the
//! memtable arena, the WAL and SST data blocks.
//!
//! ```text
//! [key: u64 BE][seq << 1 | kind: u64 LE][value_len: u32 LE][value bytes]
//! ```
//!
//! Keys are big-endian so byte order equals numeric order; everything else is
//! little-endian. `kind` occupies the low bit of the packed word (1 = put,
//! 0 = delete).

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

/// Largest value accepted by the engine.
pub const MAX_VALUE_LEN: usize = 64 * 1024;

/// Fixed bytes preceding the value in an encoded record.
pub const RECORD_HEADER_LEN: usize = 8 + 8 + 4;

/// Sequence numbers use 63 bits; the low bit of the packed word holds the kind.
pub const MAX_SEQ: u64 = (1 << 63) - 1;

/// A numeric user key. Ordering is integer ordering.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct UserKey(pub u64);

impl UserKey {
    pub const MIN: UserKey = UserKey(0);
    pub const MAX: UserKey = UserKey(u64::MAX);

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn to_be_bytes(self) -> [u8; 8] {
        self.0.to_be_bytes()
    }
}

impl From<u64> for UserKey {
    fn from(v: u64) -> Self {
        UserKey(v)
    }
}

impl fmt::Debug for UserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Put,
    Delete,
}

impl OpKind {
    #[inline]
    fn bit(self) -> u64 {
        match self {
            OpKind::Put => 1,
            OpKind::Delete => 0,
        }
    }
}

/// A single versioned entry: the unit moved through memtables, WAL, SSTs and
/// compaction.
#[derive(Clone, PartialEq, Eq)]
pub struct InternalRecord {
    pub key: UserKey,
    pub seq: u64,
    pub kind: OpKind,
    pub value: Vec<u8>,
}

impl InternalRecord {
    pub fn put(key: impl Into<UserKey>, seq: u64, value: impl Into<Vec<u8>>) -> Self {
        InternalRecord {
            key: key.into(),
            seq,
            kind: OpKind::Put,
            value: value.into(),
        }
    }

    pub fn delete(key: impl Into<UserKey>, seq: u64) -> Self {
        InternalRecord {
            key: key.into(),
            seq,
            kind: OpKind::Delete,
            value: Vec::new(),
        }
    }

    #[inline]
    pub fn is_tombstone(&self) -> bool {
        self.kind == OpKind::Delete
    }

    /// Size of this record in the wire format.
    #[inline]
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.value.len()
    }

    /// Appends the wire encoding to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        encode_parts(self.key, self.seq, self.kind, &self.value, out)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    /// Decodes exactly one record; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (rec, used) = decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::MalformedRecord("trailing bytes after record"));
        }
        Ok(rec)
    }
}

impl fmt::Debug for InternalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:?} k={} seq={} {}B)",
            self.kind,
            self.key,
            self.seq,
            self.value.len()
        )
    }
}

impl PartialOrd for InternalRecord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for InternalRecord {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_internal(self, other)
    }
}

/// Ascending key, then descending sequence number (newest version first).
#[inline]
pub fn compare_internal(a: &InternalRecord, b: &InternalRecord) -> Ordering {
    compare_key_seq(a.key, a.seq, b.key, b.seq)
}

#[inline]
pub fn compare_key_seq(ak: UserKey, aseq: u64, bk: UserKey, bseq: u64) -> Ordering {
    ak.cmp(&bk).then_with(|| bseq.cmp(&aseq))
}

pub fn encode_parts(
    key: UserKey,
    seq: u64,
    kind: OpKind,
    value: &[u8],
    out: &mut Vec<u8>,
) -> Result<()> {
    if value.len() > MAX_VALUE_LEN {
        return Err(Error::ValueTooLarge(value.len()));
    }
    if kind == OpKind::Delete && !value.is_empty() {
        return Err(Error::MalformedRecord("tombstone with a value"));
    }
    if seq > MAX_SEQ {
        return Err(Error::MalformedRecord("sequence number exceeds 63 bits"));
    }
    out.extend_from_slice(&key.0.to_be_bytes());
    out.extend_from_slice(&((seq << 1) | kind.bit()).to_le_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
    Ok(())
}

/// Zero-copy view of an encoded record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordRef<'a> {
    pub key: UserKey,
    pub seq: u64,
    pub kind: OpKind,
    pub value: &'a [u8],
}

impl RecordRef<'_> {
    pub fn to_owned(&self) -> InternalRecord {
        InternalRecord {
            key: self.key,
            seq: self.seq,
            kind: self.kind,
            value: self.value.to_vec(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.value.len()
    }
}

/// Parses one record from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_ref(bytes: &[u8]) -> Result<(RecordRef<'_>, usize)> {
    if bytes.len() < RECORD_HEADER_LEN {
        return Err(Error::MalformedRecord("truncated header"));
    }
    let key = u64::from_be_bytes(bytes[0..8].try_into().unwrap());
    let packed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if len > MAX_VALUE_LEN {
        return Err(Error::MalformedRecord("value length out of range"));
    }
    let end = RECORD_HEADER_LEN + len;
    if bytes.len() < end {
        return Err(Error::MalformedRecord("truncated value"));
    }
    let kind = if packed & 1 == 1 {
        OpKind::Put
    } else {
        OpKind::Delete
    };
    if kind == OpKind::Delete && len != 0 {
        return Err(Error::MalformedRecord("tombstone with a value"));
    }
    Ok((
        RecordRef {
            key: UserKey(key),
            seq: packed >> 1,
            kind,
            value: &bytes[RECORD_HEADER_LEN..end],
        },
        end,
    ))
}

pub fn decode_prefix(bytes: &[u8]) -> Result<(InternalRecord, usize)> {
    decode_ref(bytes).map(|(r, n)| (r.to_owned(), n))
}

/// Reads only the key of an encoded record.
#[inline]
pub fn peek_key(bytes: &[u8]) -> Option<u64> {
    bytes.get(0..8).map(|b| u64::from_be_bytes(b.try_into().unwrap()))
}

/// Decodes a concatenation of encoded records.
pub fn decode_stream(mut bytes: &[u8]) -> Result<Vec<InternalRecord>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (rec, used) = decode_prefix(bytes)?;
        out.push(rec);
        bytes = &bytes[used..];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(k: u64, seq: u64) -> InternalRecord {
        InternalRecord::put(k, seq, b"x".to_vec())
    }

    #[test]
    fn ordering_examples() {
        assert_eq!(compare_internal(&rec(5, 1), &rec(7, 9)), Ordering::Less);
        assert_eq!(compare_internal(&rec(5, 9), &rec(5, 1)), Ordering::Less);
        let r = rec(3, 3);
        assert_eq!(compare_internal(&r, &r), Ordering::Equal);
    }

    #[test]
    fn round_trip_put_and_tombstone() {
        let put = InternalRecord::put(1u64, 0, b"v".to_vec());
        assert_eq!(InternalRecord::decode(&put.encode().unwrap()).unwrap(), put);
        let del = InternalRecord::delete(1u64, 0);
        assert_eq!(InternalRecord::decode(&del.encode().unwrap()).unwrap(), del);
    }

    #[test]
    fn wire_layout_is_exact() {
        let r = InternalRecord::put(0x0102030405060708u64, 5, b"ab".to_vec());
        let b = r.encode().unwrap();
        assert_eq!(&b[0..8], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), (5 << 1) | 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        assert_eq!(&b[20..], b"ab");
        assert_eq!(b.len(), r.encoded_len());
    }

    #[test]
    fn rejects_oversized_and_malformed() {
        let big = InternalRecord::put(1u64, 1, vec![0; MAX_VALUE_LEN + 1]);
        assert!(matches!(big.encode(), Err(Error::ValueTooLarge(_))));
        let ok = InternalRecord::put(1u64, 1, vec![7; 10]).encode().unwrap();
        for cut in 0..ok.len() {
            assert!(matches!(
                InternalRecord::decode(&ok[..cut]),
                Err(Error::MalformedRecord(_))
            ));
        }
        let mut bad = InternalRecord::delete(1u64, 1).encode().unwrap();
        bad[16] = 1;
        bad.push(0);
        assert!(InternalRecord::decode(&bad).is_err());
    }

    #[test]
    fn hundred_thousand_random_records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut stream = Vec::new();
        let mut recs = Vec::new();
        for _ in 0..100_000 {
            let r = if rng.random_bool(0.1) {
                InternalRecord::delete(rng.random::<u64>(), rng.random_range(0..=MAX_SEQ))
            } else {
                let len = rng.random_range(0..300);
                let v: Vec<u8> = (0..len).map(|_| rng.random()).collect();
                InternalRecord::put(rng.random::<u64>(), rng.random_range(0..=MAX_SEQ), v)
            };
            let bytes = r.encode().unwrap();
            assert_eq!(InternalRecord::decode(&bytes).unwrap().encode().unwrap(), bytes);
            stream.extend_from_slice(&bytes);
            recs.push(r);
        }
        assert_eq!(decode_stream(&stream).unwrap(), recs);
    }

    fn arb_record() -> impl Strategy<Value = InternalRecord> {
        (any::<u64>(), 0..=MAX_SEQ, any::<bool>(), prop::collection::vec(any::<u8>(), 0..64)).prop_map(
            |(k, s, put, v)| {
                if put {
                    InternalRecord::put(k, s, v)
                } else {
                    InternalRecord::delete(k, s)
                }
            },
        )
    }

    proptest! {
        #[test]
        fn compare_is_antisymmetric(a in arb_record(), b in arb_record()) {
            prop_assert_eq!(compare_internal(&a, &b), compare_internal(&b, &a).reverse());
        }

        #[test]
        fn compare_is_transitive(a in arb_record(), b in arb_record(), c in arb_record()) {
            let mut v = [a, b, c];
            v.sort();
            prop_assert_ne!(compare_internal(&v[0], &v[1]), Ordering::Greater);
            prop_assert_ne!(compare_internal(&v[1], &v[2]), Ordering::Greater);
            prop_assert_ne!(compare_internal(&v[0], &v[2]), Ordering::Greater);
        }

        #[test]
        fn concatenated_encodings_decode_back(recs in prop::collection::vec(arb_record(), 0..20)) {
            let mut buf = Vec::new();
            for r in &recs {
                r.encode_into(&mut buf).unwrap();
            }
            prop_assert_eq!(decode_stream(&buf).unwrap(), recs);
        }
    }
}
