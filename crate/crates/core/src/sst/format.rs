//! File trailer: fixed-size footer and the properties record.

use crate::config::SstIndexKind;
use crate::error::{Error, Result};

pub const FOOTER_LEN: usize = 64;
pub const MAGIC: u64 = 0x4c45_4152_4e4b_5631;
pub const FORMAT_VERSION: u32 = 1;
pub const PROPS_LEN: usize = 8 * 6 + 4 + 4 + 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Region {
    pub offset: u64,
    pub length: u32,
}

impl Region {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset as usize..self.offset as usize + self.length as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footer {
    pub bloom: Region,
    pub index: Region,
    pub offsets: Region,
    pub props: Region,
    /// CRC32 of everything from the start of the bloom region to the end of
    /// the properties.
    pub meta_crc: u32,
}

impl Footer {
    pub fn encode(&self) -> [u8; FOOTER_LEN] {
        let mut out = [0u8; FOOTER_LEN];
        for (i, r) in [self.bloom, self.index, self.offsets, self.props].iter().enumerate() {
            out[i * 12..i * 12 + 8].copy_from_slice(&r.offset.to_le_bytes());
            out[i * 12 + 8..i * 12 + 12].copy_from_slice(&r.length.to_le_bytes());
        }
        out[48..52].copy_from_slice(&self.meta_crc.to_le_bytes());
        out[52..56].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        out[56..64].copy_from_slice(&MAGIC.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8], file_size: u64) -> Result<Footer> {
        let bad = |m| Error::CorruptSst(String::new(), m);
        if b.len() != FOOTER_LEN || u64::from_le_bytes(b[56..64].try_into().unwrap()) != MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(b[52..56].try_into().unwrap()) != FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let region = |i: usize| Region {
            offset: u64::from_le_bytes(b[i * 12..i * 12 + 8].try_into().unwrap()),
            length: u32::from_le_bytes(b[i * 12 + 8..i * 12 + 12].try_into().unwrap()),
        };
        let f = Footer {
            bloom: region(0),
            index: region(1),
            offsets: region(2),
            props: region(3),
            meta_crc: u32::from_le_bytes(b[48..52].try_into().unwrap()),
        };
        let chain = [f.bloom, f.index, f.offsets, f.props];
        for w in chain.windows(2) {
            if w[0].offset + u64::from(w[0].length) != w[1].offset {
                return Err(bad("metadata regions not contiguous"));
            }
        }
        if f.props.offset + u64::from(f.props.length) + FOOTER_LEN as u64 != file_size {
            return Err(bad("metadata does not end at footer"));
        }
        Ok(f)
    }

    pub fn meta_start(&self) -> u64 {
        self.bloom.offset
    }

    pub fn meta_end(&self) -> u64 {
        self.props.offset + u64::from(self.props.length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Properties {
    pub min_key: u64,
    pub max_key: u64,
    pub record_count: u64,
    pub block_count: u64,
    /// End of the data-block region; metadata starts here.
    pub data_end: u64,
    pub max_seq: u64,
    pub max_block_len: u32,
    pub tombstones: u32,
    pub index_kind: SstIndexKind,
}

impl Properties {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PROPS_LEN);
        for v in [
            self.min_key,
            self.max_key,
            self.record_count,
            self.block_count,
            self.data_end,
            self.max_seq,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.max_block_len.to_le_bytes());
        out.extend_from_slice(&self.tombstones.to_le_bytes());
        out.push(match self.index_kind {
            SstIndexKind::PgmFence => 1,
            SstIndexKind::FenceTableBaseline => 2,
        });
        out
    }

    pub fn decode(b: &[u8]) -> Result<Properties> {
        if b.len() != PROPS_LEN {
            return Err(Error::CorruptSst(String::new(), "properties length"));
        }
        let u = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        let index_kind = match b[56] {
            1 => SstIndexKind::PgmFence,
            2 => SstIndexKind::FenceTableBaseline,
            _ => return Err(Error::CorruptSst(String::new(), "index kind")),
        };
        Ok(Properties {
            min_key: u(0),
            max_key: u(1),
            record_count: u(2),
            block_count: u(3),
            data_end: u(4),
            max_seq: u(5),
            max_block_len: u32::from_le_bytes(b[48..52].try_into().unwrap()),
            tombstones: u32::from_le_bytes(b[52..56].try_into().unwrap()),
            index_kind,
        })
    }
}
