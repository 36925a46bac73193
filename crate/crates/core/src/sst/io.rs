//! Positional read sources for SST files.

use std::alloc::{self, Layout};
use std::fs::{File, OpenOptions};
use std::io;
use std::os::unix::fs::{FileExt, OpenOptionsExt};
use std::os::unix::io::AsRawFd;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::Arc;

use parking_lot::Mutex;

const DIRECT_ALIGN: usize = 4096;

pub trait ReadAt: Send + Sync {
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()>;
    fn size(&self) -> u64;
}

/// Buffered reads through the OS page cache.
pub struct FileSource {
    file: File,
    size: u64,
}

impl FileSource {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = File::open(path)?;
        let size = file.metadata()?.len();
        Ok(FileSource { file, size })
    }
}

impl ReadAt for FileSource {
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        self.file.read_exact_at(buf, offset)
    }

    fn size(&self) -> u64 {
        self.size
    }
}

struct AlignedBuf {
    ptr: *mut u8,
    layout: Layout,
}

impl AlignedBuf {
    fn new(len: usize) -> AlignedBuf {
        let layout = Layout::from_size_align(len.max(DIRECT_ALIGN), DIRECT_ALIGN).unwrap();
        // SAFETY: layout has non-zero size.
        let ptr = unsafe { alloc::alloc_zeroed(layout) };
        if ptr.is_null() {
            alloc::handle_alloc_error(layout);
        }
        AlignedBuf { ptr, layout }
    }

    fn as_mut_slice(&mut self) -> &mut [u8] {
        // SAFETY: ptr is a live allocation of layout.size() initialised bytes.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.layout.size()) }
    }
}

impl Drop for AlignedBuf {
    fn drop(&mut self) {
        // SAFETY: allocated with this layout in `new`.
        unsafe { alloc::dealloc(self.ptr, self.layout) }
    }
}

/// Reads that bypass the page cache. Uses `O_DIRECT` when the filesystem
/// supports it; otherwise reads normally and drops the cached pages after
/// each read.
pub struct DirectSource {
    file: File,
    size: u64,
    o_direct: bool,
}

impl DirectSource {
    pub fn open(path: &Path) -> io::Result<Self> {
        let (file, o_direct) = match OpenOptions::new().read(true).custom_flags(libc::O_DIRECT).open(path) {
            Ok(f) => (f, true),
            Err(e) if e.raw_os_error() == Some(libc::EINVAL) => {
                log::warn!("O_DIRECT unsupported for {}, using fadvise", path.display());
                (File::open(path)?, false)
            }
            Err(e) => return Err(e),
        };
        let size = file.metadata()?.len();
        Ok(DirectSource { file, size, o_direct })
    }

    pub fn is_o_direct(&self) -> bool {
        self.o_direct
    }
}

impl ReadAt for DirectSource {
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        if !self.o_direct {
            self.file.read_exact_at(buf, offset)?;
            // SAFETY: plain syscall on an owned descriptor.
            unsafe {
                libc::posix_fadvise(
                    self.file.as_raw_fd(),
                    offset as libc::off_t,
                    buf.len() as libc::off_t,
                    libc::POSIX_FADV_DONTNEED,
                );
            }
            return Ok(());
        }
        let align = DIRECT_ALIGN as u64;
        let start = offset / align * align;
        let end = (offset + buf.len() as u64).div_ceil(align) * align;
        let mut tmp = AlignedBuf::new((end - start) as usize);
        let want = (offset - start) as usize + buf.len();
        let slice = tmp.as_mut_slice();
        let mut got = 0;
        while got < want {
            let n = self.file.read_at(&mut slice[got..], start + got as u64)?;
            if n == 0 {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "short direct read"));
            }
            got += n;
        }
        let skip = (offset - start) as usize;
        buf.copy_from_slice(&slice[skip..skip + buf.len()]);
        Ok(())
    }

    fn size(&self) -> u64 {
        self.size
    }
}

pub fn open_source(path: &Path, direct: bool) -> io::Result<Arc<dyn ReadAt>> {
    Ok(if direct {
        Arc::new(DirectSource::open(path)?)
    } else {
        Arc::new(FileSource::open(path)?)
    })
}

/// Wraps a source and records every read issued through it.
pub struct CountingReader {
    inner: Arc<dyn ReadAt>,
    reads: AtomicU64,
    bytes: AtomicU64,
    log: Mutex<Vec<(u64, usize)>>,
}

impl CountingReader {
    pub fn new(inner: Arc<dyn ReadAt>) -> Self {
        CountingReader {
            inner,
            reads: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Relaxed)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes.load(Relaxed)
    }

    /// Returns and clears the `(offset, length)` log.
    pub fn take_log(&self) -> Vec<(u64, usize)> {
        std::mem::take(&mut *self.log.lock())
    }
}

impl ReadAt for CountingReader {
    fn read_exact_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        self.reads.fetch_add(1, Relaxed);
        self.bytes.fetch_add(buf.len() as u64, Relaxed);
        self.log.lock().push((offset, buf.len()));
        self.inner.read_exact_at(buf, offset)
    }

    fn size(&self) -> u64 {
        self.inner.size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn buffered_and_direct_reads_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        let data: Vec<u8> = (0..20_000u32).map(|i| (i * 7 % 251) as u8).collect();
        File::create(&path).unwrap().write_all(&data).unwrap();
        let a = FileSource::open(&path).unwrap();
        let b = DirectSource::open(&path).unwrap();
        assert_eq!(a.size(), 20_000);
        assert_eq!(b.size(), 20_000);
        for (off, len) in [(0u64, 10usize), (4095, 2), (5000, 9000), (19_990, 10), (1, 4096)] {
            let mut x = vec![0; len];
            let mut y = vec![0; len];
            a.read_exact_at(&mut x, off).unwrap();
            b.read_exact_at(&mut y, off).unwrap();
            assert_eq!(x, &data[off as usize..off as usize + len]);
            assert_eq!(x, y);
        }
        let mut past = vec![0; 20];
        assert!(b.read_exact_at(&mut past, 19_990).is_err());
    }

    #[test]
    fn counting_reader_logs_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        File::create(&path).unwrap().write_all(&[1u8; 100]).unwrap();
        let c = CountingReader::new(open_source(&path, false).unwrap());
        let mut buf = [0u8; 10];
        c.read_exact_at(&mut buf, 5).unwrap();
        c.read_exact_at(&mut buf, 50).unwrap();
        assert_eq!((c.reads(), c.bytes()), (2, 20));
        assert_eq!(c.take_log(), vec![(5, 10), (50, 10)]);
        assert!(c.take_log().is_empty());
    }
}
