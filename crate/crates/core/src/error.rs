use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed record: {0}")]
    MalformedRecord(&'static str),

    #[error("value of {0} bytes exceeds the 64 KiB limit")]
    ValueTooLarge(usize),

    #[error("input keys are not strictly increasing at index {0}")]
    NotSorted(usize),

    #[error("memtable is full")]
    MemtableFull,

    #[error("memtable is immutable")]
    Immutable,

    #[error("memtable is empty")]
    EmptyMemtable,

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(&'static str),

    #[error("corrupt SST {0}: {1}")]
    CorruptSst(String, &'static str),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("write stalled: immutable memtable queue is full")]
    Stalled,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("engine is closed")]
    Closed,

    #[error("background error: {0}")]
    Background(String),
}

impl Error {
    /// Clones the error for reporting from background threads. I/O errors lose
    /// their source but keep kind and message.
    pub fn duplicate(&self) -> Error {
        match self {
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), e.to_string())),
            Error::MalformedRecord(s) => Error::MalformedRecord(s),
            Error::ValueTooLarge(n) => Error::ValueTooLarge(*n),
            Error::NotSorted(i) => Error::NotSorted(*i),
            Error::MemtableFull => Error::MemtableFull,
            Error::Immutable => Error::Immutable,
            Error::EmptyMemtable => Error::EmptyMemtable,
            Error::ChecksumMismatch(s) => Error::ChecksumMismatch(s),
            Error::CorruptSst(a, b) => Error::CorruptSst(a.clone(), b),
            Error::CorruptManifest(s) => Error::CorruptManifest(s.clone()),
            Error::Stalled => Error::Stalled,
            Error::InvalidConfig(s) => Error::InvalidConfig(s.clone()),
            Error::Closed => Error::Closed,
            Error::Background(s) => Error::Background(s.clone()),
        }
    }
}
