//! Append-only log of version edits, framed as `[len u32][crc32 u32][edits]`.
//! Opening replays the log and rewrites it as a single snapshot record.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "MANIFEST";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    AddFile { level: u8, id: u64 },
    RemoveFile { level: u8, id: u64 },
    NextFile(u64),
    /// WAL segments below this id are obsolete.
    LogNumber(u64),
    LastSeq(u64),
}

impl Edit {
    fn encode(&self, out: &mut Vec<u8>) {
        let (tag, a, b) = match *self {
            Edit::AddFile { level, id } => (1u8, u64::from(level), id),
            Edit::RemoveFile { level, id } => (2, u64::from(level), id),
            Edit::NextFile(v) => (3, 0, v),
            Edit::LogNumber(v) => (4, 0, v),
            Edit::LastSeq(v) => (5, 0, v),
        };
        out.push(tag);
        out.push(a as u8);
        out.extend_from_slice(&b.to_le_bytes());
    }

    fn decode(b: &[u8]) -> Option<Edit> {
        let v = u64::from_le_bytes(b[2..10].try_into().ok()?);
        Some(match b[0] {
            1 => Edit::AddFile { level: b[1], id: v },
            2 => Edit::RemoveFile { level: b[1], id: v },
            3 => Edit::NextFile(v),
            4 => Edit::LogNumber(v),
            5 => Edit::LastSeq(v),
            _ => return None,
        })
    }
}

const EDIT_LEN: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ManifestState {
    /// File ids per level in insertion order.
    pub levels: Vec<Vec<u64>>,
    pub next_file: u64,
    pub log_number: u64,
    pub last_seq: u64,
}

impl ManifestState {
    pub fn new(max_levels: usize) -> Self {
        ManifestState {
            levels: vec![Vec::new(); max_levels],
            next_file: 1,
            log_number: 0,
            last_seq: 0,
        }
    }

    pub fn apply(&mut self, e: &Edit) -> Result<()> {
        match *e {
            Edit::AddFile { level, id } => {
                let l = self
                    .levels
                    .get_mut(level as usize)
                    .ok_or_else(|| Error::CorruptManifest(format!("level {level} out of range")))?;
                l.push(id);
                self.next_file = self.next_file.max(id + 1);
            }
            Edit::RemoveFile { level, id } => {
                let l = self
                    .levels
                    .get_mut(level as usize)
                    .ok_or_else(|| Error::CorruptManifest(format!("level {level} out of range")))?;
                let before = l.len();
                l.retain(|&x| x != id);
                if l.len() == before {
                    return Err(Error::CorruptManifest(format!("removing unknown file {id} from L{level}")));
                }
            }
            Edit::NextFile(v) => self.next_file = self.next_file.max(v),
            Edit::LogNumber(v) => self.log_number = self.log_number.max(v),
            Edit::LastSeq(v) => self.last_seq = self.last_seq.max(v),
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<Edit> {
        let mut out = vec![
            Edit::NextFile(self.next_file),
            Edit::LogNumber(self.log_number),
            Edit::LastSeq(self.last_seq),
        ];
        for (level, ids) in self.levels.iter().enumerate() {
            out.extend(ids.iter().map(|&id| Edit::AddFile { level: level as u8, id }));
        }
        out
    }
}

fn frame(edits: &[Edit]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(edits.len() * EDIT_LEN);
    for e in edits {
        e.encode(&mut payload);
    }
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn replay(bytes: &[u8], max_levels: usize) -> Result<ManifestState> {
    let mut state = ManifestState::new(max_levels);
    let mut pos = 0;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            break;
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let end = pos + 8 + len;
        if end > bytes.len() {
            break;
        }
        let payload = &bytes[pos + 8..end];
        if crc32fast::hash(payload) != crc || len % EDIT_LEN != 0 {
            if end == bytes.len() {
                // Torn final append.
                break;
            }
            return Err(Error::CorruptManifest(format!("bad record at byte {pos}")));
        }
        for chunk in payload.chunks_exact(EDIT_LEN) {
            let e = Edit::decode(chunk).ok_or_else(|| Error::CorruptManifest(format!("bad edit at byte {pos}")))?;
            state.apply(&e)?;
        }
        pos = end;
    }
    Ok(state)
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

pub struct Manifest {
    file: File,
    path: PathBuf,
}

impl Manifest {
    /// Loads the manifest in `dir` (empty state if none exists) and rewrites
    /// it compactly.
    pub fn open(dir: &Path, max_levels: usize) -> Result<(Manifest, ManifestState)> {
        let path = dir.join(MANIFEST);
        let state = match fs::read(&path) {
            Ok(bytes) => replay(&bytes, max_levels)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ManifestState::new(max_levels),
            Err(e) => return Err(e.into()),
        };
        let tmp = dir.join("MANIFEST.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&frame(&state.snapshot()))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        sync_dir(dir)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok((Manifest { file, path }, state))
    }

    /// Durably appends one atomic group of edits.
    pub fn append(&mut self, edits: &[Edit]) -> Result<()> {
        self.file.write_all(&frame(edits))?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_gives_empty_state() {
        let dir = tempfile::tempdir().unwrap();
        let (_, s) = Manifest::open(dir.path(), 7).unwrap();
        assert_eq!(s, ManifestState::new(7));
        assert!(dir.path().join(MANIFEST).exists());
    }

    #[test]
    fn edits_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut m, _) = Manifest::open(dir.path(), 7).unwrap();
            m.append(&[Edit::AddFile { level: 0, id: 5 }, Edit::LastSeq(10)]).unwrap();
            m.append(&[Edit::AddFile { level: 0, id: 6 }, Edit::LogNumber(4)]).unwrap();
            m.append(&[
                Edit::RemoveFile { level: 0, id: 5 },
                Edit::RemoveFile { level: 0, id: 6 },
                Edit::AddFile { level: 1, id: 7 },
            ])
            .unwrap();
        }
        let (_, s) = Manifest::open(dir.path(), 7).unwrap();
        assert_eq!(s.levels[0], Vec::<u64>::new());
        assert_eq!(s.levels[1], vec![7]);
        assert_eq!((s.next_file, s.log_number, s.last_seq), (8, 4, 10));
        let (_, again) = Manifest::open(dir.path(), 7).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn torn_tail_is_ignored_but_mid_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut m, _) = Manifest::open(dir.path(), 7).unwrap();
            m.append(&[Edit::AddFile { level: 2, id: 9 }]).unwrap();
            m.append(&[Edit::AddFile { level: 2, id: 10 }]).unwrap();
        }
        let path = dir.path().join(MANIFEST);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let (_, s) = Manifest::open(dir.path(), 7).unwrap();
        assert_eq!(s.levels[2], vec![9]);

        let mut bytes = fs::read(&path).unwrap();
        let good_len = bytes.len();
        bytes.extend_from_slice(&frame(&[Edit::LastSeq(3)]));
        bytes[10] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Manifest::open(dir.path(), 7), Err(Error::CorruptManifest(_))));
        assert!(good_len > 0);
    }

    #[test]
    fn unknown_removal_is_corruption() {
        let mut s = ManifestState::new(3);
        assert!(s.apply(&Edit::RemoveFile { level: 1, id: 1 }).is_err());
        assert!(s.apply(&Edit::AddFile { level: 5, id: 1 }).is_err());
    }
}
