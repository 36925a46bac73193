//! Immutable sorted files: data blocks, a per-file Bloom filter and either
//! the learned PGM fence index or a fence-pointer table.

pub mod block;
pub mod bloom;
pub mod builder;
pub mod cache;
pub mod fence;
pub mod format;
pub mod io;
pub mod table;

pub use block::{Block, BlockBuilder};
pub use bloom::Bloom;
pub use builder::{build_sst, SstBuilder, SstInfo, SstOptions};
pub use cache::BlockCache;
pub use fence::{BlockHandle, BlockIndex, FenceIndex, FenceTable, Window};
pub use format::{Footer, Properties};
pub use io::{CountingReader, ReadAt};
pub use table::{LookupTrace, Resolved, Table, TableIter, TableStats};

/// Prints the layout of the SST at `path`.
pub fn dump(path: &std::path::Path) -> crate::Result<String> {
    Table::open(path, 0, false, None).map(|t| t.describe())
}
