//! Block locators: the learned PGM fence index and the classic fence-pointer
//! table it replaces.

use crate::config::SstIndexKind;
use crate::error::{Error, Result};
use crate::pla::PgmModel;

const TAG_PGM: u8 = 1;
const TAG_TABLE: u8 = 2;

/// Serialized size of one block handle.
pub const HANDLE_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockHandle {
    pub offset: u64,
    pub length: u32,
}

impl BlockHandle {
    pub fn end(&self) -> u64 {
        self.offset + u64::from(self.length)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.length.to_le_bytes());
    }

    fn read(b: &[u8]) -> BlockHandle {
        BlockHandle {
            offset: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            length: u32::from_le_bytes(b[8..12].try_into().unwrap()),
        }
    }
}

fn corrupt(what: &'static str) -> Error {
    Error::CorruptSst(String::new(), what)
}

fn check_handles(handles: &[BlockHandle]) -> Result<()> {
    for w in handles.windows(2) {
        if w[0].end() != w[1].offset {
            return Err(corrupt("block handles not contiguous"));
        }
    }
    Ok(())
}

/// Learned fence index: a PGM model over block first keys plus the block
/// offsets it predicts into.
#[derive(Clone, Debug, PartialEq)]
pub struct FenceIndex {
    model: PgmModel,
    handles: Vec<BlockHandle>,
}

/// Predicted block and the ±1 window around it, clamped to the file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub predicted: usize,
    pub start: usize,
    pub end: usize,
}

impl FenceIndex {
    /// Trains on `fence_keys` (one per block, strictly increasing). The keys
    /// are consumed; only the model and handles are kept.
    pub fn train(fence_keys: Vec<u64>, handles: Vec<BlockHandle>, epsilon: u32) -> Result<Self> {
        assert_eq!(fence_keys.len(), handles.len());
        let model = PgmModel::build(&fence_keys, epsilon)?;
        drop(fence_keys);
        Ok(FenceIndex { model, handles })
    }

    pub fn model(&self) -> &PgmModel {
        &self.model
    }

    pub fn handles(&self) -> &[BlockHandle] {
        &self.handles
    }

    pub fn block_count(&self) -> usize {
        self.handles.len()
    }

    pub fn window(&self, key: u64) -> Window {
        let n = self.handles.len();
        let e = self.model.epsilon() as usize;
        let p = self.model.predict(key).min(n - 1);
        Window {
            predicted: p,
            start: p.saturating_sub(e),
            end: (p + e).min(n - 1),
        }
    }
}

/// Baseline: one `(first_key, handle)` entry per block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FenceTable {
    first_keys: Vec<u64>,
    handles: Vec<BlockHandle>,
}

impl FenceTable {
    pub fn new(first_keys: Vec<u64>, handles: Vec<BlockHandle>) -> Result<Self> {
        assert_eq!(first_keys.len(), handles.len());
        crate::pla::check_sorted(&first_keys)?;
        Ok(FenceTable { first_keys, handles })
    }

    pub fn handles(&self) -> &[BlockHandle] {
        &self.handles
    }

    pub fn first_keys(&self) -> &[u64] {
        &self.first_keys
    }

    /// The only block that can hold `key`: the last one whose first key is
    /// <= `key`, clamped to the first block.
    pub fn locate(&self, key: u64) -> usize {
        self.first_keys.partition_point(|&f| f <= key).saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockIndex {
    Pgm(FenceIndex),
    Table(FenceTable),
}

impl BlockIndex {
    pub fn build(
        kind: SstIndexKind,
        fence_keys: Vec<u64>,
        handles: Vec<BlockHandle>,
        epsilon: u32,
    ) -> Result<BlockIndex> {
        Ok(match kind {
            SstIndexKind::PgmFence => BlockIndex::Pgm(FenceIndex::train(fence_keys, handles, epsilon)?),
            SstIndexKind::FenceTableBaseline => BlockIndex::Table(FenceTable::new(fence_keys, handles)?),
        })
    }

    pub fn kind(&self) -> SstIndexKind {
        match self {
            BlockIndex::Pgm(_) => SstIndexKind::PgmFence,
            BlockIndex::Table(_) => SstIndexKind::FenceTableBaseline,
        }
    }

    pub fn handles(&self) -> &[BlockHandle] {
        match self {
            BlockIndex::Pgm(f) => f.handles(),
            BlockIndex::Table(t) => t.handles(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.handles().len()
    }

    /// Index region bytes and block-offsets region bytes. The fence table
    /// stores its handles inline, so its offsets region is empty.
    pub fn serialize(&self) -> (Vec<u8>, Vec<u8>) {
        match self {
            BlockIndex::Pgm(f) => {
                let mut idx = vec![TAG_PGM];
                f.model.serialize_into(&mut idx);
                let mut offs = Vec::with_capacity(f.handles.len() * HANDLE_LEN);
                for h in &f.handles {
                    h.write(&mut offs);
                }
                (idx, offs)
            }
            BlockIndex::Table(t) => {
                let mut idx = Vec::with_capacity(5 + t.first_keys.len() * (8 + HANDLE_LEN));
                idx.push(TAG_TABLE);
                idx.extend_from_slice(&(t.first_keys.len() as u32).to_le_bytes());
                for (k, h) in t.first_keys.iter().zip(&t.handles) {
                    idx.extend_from_slice(&k.to_le_bytes());
                    h.write(&mut idx);
                }
                (idx, Vec::new())
            }
        }
    }

    /// Total serialized footprint of the lookup structure.
    pub fn serialized_len(&self) -> usize {
        let (a, b) = self.serialize();
        a.len() + b.len()
    }

    pub fn deserialize(index: &[u8], offsets: &[u8]) -> Result<BlockIndex> {
        let (&tag, body) = index.split_first().ok_or(corrupt("empty index"))?;
        match tag {
            TAG_PGM => {
                let (model, used) = PgmModel::deserialize(body)?;
                if used != body.len() || offsets.len() % HANDLE_LEN != 0 {
                    return Err(corrupt("fence index length"));
                }
                let handles: Vec<_> = offsets.chunks_exact(HANDLE_LEN).map(BlockHandle::read).collect();
                if handles.is_empty() || model.key_count() != handles.len() {
                    return Err(corrupt("fence index block count"));
                }
                check_handles(&handles)?;
                Ok(BlockIndex::Pgm(FenceIndex { model, handles }))
            }
            TAG_TABLE => {
                if body.len() < 4 || !offsets.is_empty() {
                    return Err(corrupt("fence table length"));
                }
                let n = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
                let entries = &body[4..];
                if n == 0 || entries.len() != n * (8 + HANDLE_LEN) {
                    return Err(corrupt("fence table length"));
                }
                let mut first_keys = Vec::with_capacity(n);
                let mut handles = Vec::with_capacity(n);
                for e in entries.chunks_exact(8 + HANDLE_LEN) {
                    first_keys.push(u64::from_le_bytes(e[0..8].try_into().unwrap()));
                    handles.push(BlockHandle::read(&e[8..]));
                }
                check_handles(&handles)?;
                FenceTable::new(first_keys, handles)
                    .map(BlockIndex::Table)
                    .map_err(|_| corrupt("fence table keys"))
            }
            _ => Err(corrupt("unknown index tag")),
        }
    }
}
