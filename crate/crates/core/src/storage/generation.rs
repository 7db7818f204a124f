use std::fs::{File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use memmap2::{MmapMut, MmapOptions};
use parking_lot::Mutex;

use super::epoch::{EpochGuard, EpochManager};
use crate::error::{Error, IoContext, Result};

/// Every generation file starts with one header page owned by its user.
pub const HEADER_BYTES: u64 = 4096;

struct Mapping {
    map: MmapMut,
}

impl Mapping {
    fn new(file: &File, len: u64, path: &Path) -> Result<Box<Mapping>> {
        // SAFETY: the file is owned by this process for the mapping's lifetime
        // and is only ever grown, never shrunk, while mapped.
        let map = unsafe { MmapOptions::new().len(len as usize).map_mut(file) }
            .io_context(|| format!("mapping {}", path.display()))?;
        Ok(Box::new(Mapping { map }))
    }

    fn ptr(&self) -> *mut u8 {
        self.map.as_ptr() as *mut u8
    }

    fn len(&self) -> usize {
        self.map.len()
    }
}

/// A memory-mapped file that grows by doubling.
///
/// Growth maps the larger file at a new address, publishes it, and retires
/// the old mapping through the epoch manager, so a reader holding an
/// [`EpochGuard`] keeps a valid view of whatever mapping it loaded. Both
/// mappings share the page cache, so bytes written through either are
/// visible through both.
///
/// One writer at a time; readers are lock-free.
pub struct GenerationFile {
    path: PathBuf,
    generation: u32,
    file: File,
    mapping: AtomicPtr<Mapping>,
    capacity: AtomicU64,
    used: AtomicU64,
    epochs: Arc<EpochManager>,
    grow_lock: Mutex<()>,
    remove_on_drop: AtomicBool,
}

// SAFETY: the raw mapping pointer is only replaced under `grow_lock` and old
// mappings are reclaimed through EBR.
unsafe impl Send for GenerationFile {}
unsafe impl Sync for GenerationFile {}

impl GenerationFile {
    /// Creates a zero-filled file of `initial_capacity` bytes. The header
    /// page counts as used.
    pub fn create(
        path: impl AsRef<Path>,
        generation: u32,
        initial_capacity: u64,
        epochs: Arc<EpochManager>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if initial_capacity < HEADER_BYTES {
            return Err(Error::invalid(format!(
                "capacity {initial_capacity} is smaller than the {HEADER_BYTES}-byte header page"
            )));
        }
        let file = match OpenOptions::new().read(true).write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(Error::AlreadyExists(path))
            }
            Err(e) => return Err(Error::storage(format!("creating {}", path.display()), e)),
        };
        file.set_len(initial_capacity)
            .io_context(|| format!("sizing {}", path.display()))?;
        let mapping = Mapping::new(&file, initial_capacity, &path)?;
        Ok(GenerationFile {
            path,
            generation,
            file,
            mapping: AtomicPtr::new(Box::into_raw(mapping)),
            capacity: AtomicU64::new(initial_capacity),
            used: AtomicU64::new(HEADER_BYTES),
            epochs,
            grow_lock: Mutex::new(()),
            remove_on_drop: AtomicBool::new(false),
        })
    }

    /// Maps an existing file. `used` starts at the header size; owners
    /// restore the real value from their header.
    pub fn open(path: impl AsRef<Path>, generation: u32, epochs: Arc<EpochManager>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .io_context(|| format!("opening {}", path.display()))?;
        let len = file.metadata().io_context(|| format!("stat {}", path.display()))?.len();
        if len < HEADER_BYTES {
            return Err(Error::corrupt(&path, format!("file is {len} bytes, shorter than its header")));
        }
        let mapping = Mapping::new(&file, len, &path)?;
        Ok(GenerationFile {
            path,
            generation,
            file,
            mapping: AtomicPtr::new(Box::into_raw(mapping)),
            capacity: AtomicU64::new(len),
            used: AtomicU64::new(HEADER_BYTES),
            epochs,
            grow_lock: Mutex::new(()),
            remove_on_drop: AtomicBool::new(false),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn capacity(&self) -> u64 {
        self.capacity.load(Ordering::Acquire)
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Acquire)
    }

    pub fn set_used(&self, used: u64) {
        debug_assert!(used <= self.capacity());
        self.used.store(used, Ordering::Release);
    }

    pub fn epochs(&self) -> &Arc<EpochManager> {
        &self.epochs
    }

    /// Doubles the capacity until it is at least `required` bytes. Existing
    /// bytes are preserved; on failure the file stays at its old capacity.
    pub fn grow(&self, required: u64) -> Result<u64> {
        let _g = self.grow_lock.lock();
        let mut capacity = self.capacity();
        if required <= capacity {
            return Ok(capacity);
        }
        while capacity < required {
            capacity = capacity
                .checked_mul(2)
                .ok_or_else(|| Error::invalid(format!("cannot grow to {required} bytes")))?;
        }
        self.remap_locked(capacity)?;
        Ok(capacity)
    }

    fn remap_locked(&self, capacity: u64) -> Result<()> {
        self.file
            .set_len(capacity)
            .io_context(|| format!("growing {} to {capacity} bytes", self.path.display()))?;
        let fresh = Mapping::new(&self.file, capacity, &self.path)?;
        let old = self.mapping.swap(Box::into_raw(fresh), Ordering::AcqRel);
        self.capacity.store(capacity, Ordering::Release);
        // SAFETY: `old` came from Box::into_raw and is no longer reachable for
        // new readers; EBR keeps it alive for existing ones.
        self.epochs.retire(unsafe { Box::from_raw(old) });
        Ok(())
    }

    /// Bytes `[offset, offset + len)` of the current mapping, valid while the
    /// guard lives. Callers must not request ranges that a writer mutates
    /// concurrently; such fields go through the atomic accessors.
    pub fn slice<'a>(&'a self, _guard: &'a EpochGuard<'_>, offset: u64, len: usize) -> &'a [u8] {
        let m = self.mapping_ref();
        let end = offset as usize + len;
        assert!(end <= m.len(), "read {offset}+{len} beyond mapping of {} bytes", m.len());
        // SAFETY: in bounds of a mapping kept alive by the guard.
        unsafe { std::slice::from_raw_parts(m.ptr().add(offset as usize), len) }
    }

    /// Raw base pointer and length of the current mapping.
    pub fn raw<'a>(&'a self, _guard: &'a EpochGuard<'_>) -> (*const u8, usize) {
        let m = self.mapping_ref();
        (m.ptr() as *const u8, m.len())
    }

    pub fn atomic_u32<'a>(&'a self, _guard: &'a EpochGuard<'_>, offset: u64) -> &'a AtomicU32 {
        let m = self.mapping_ref();
        assert!(offset.is_multiple_of(4) && offset as usize + 4 <= m.len());
        // SAFETY: aligned, in bounds, and kept mapped by the guard.
        unsafe { &*(m.ptr().add(offset as usize) as *const AtomicU32) }
    }

    pub fn atomic_u64<'a>(&'a self, _guard: &'a EpochGuard<'_>, offset: u64) -> &'a AtomicU64 {
        let m = self.mapping_ref();
        assert!(offset.is_multiple_of(8) && offset as usize + 8 <= m.len());
        // SAFETY: aligned, in bounds, and kept mapped by the guard.
        unsafe { &*(m.ptr().add(offset as usize) as *const AtomicU64) }
    }

    /// Copies `data` into the file at `offset`. Writer side only.
    pub fn write_at(&self, offset: u64, data: &[u8]) -> Result<()> {
        let guard = self.epochs.pin();
        let (base, len) = self.raw(&guard);
        let end = offset as usize + data.len();
        if end > len {
            return Err(Error::invalid(format!(
                "write {offset}+{} beyond capacity {len} of {}",
                data.len(),
                self.path.display()
            )));
        }
        // SAFETY: bounds checked above; the single writer owns this range.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), (base as *mut u8).add(offset as usize), data.len()) };
        Ok(())
    }

    /// Flushes dirty pages and file metadata to disk.
    pub fn sync(&self) -> Result<()> {
        let guard = self.epochs.pin();
        self.mapping_ref_guarded(&guard)
            .map
            .flush()
            .io_context(|| format!("msync {}", self.path.display()))?;
        self.file
            .sync_all()
            .io_context(|| format!("fsync {}", self.path.display()))
    }

    /// Deletes the file when this handle is finally dropped (after EBR grace).
    pub fn remove_on_drop(&self) {
        self.remove_on_drop.store(true, Ordering::Release);
    }

    fn mapping_ref(&self) -> &Mapping {
        // SAFETY: callers hold an EpochGuard (enforced by the public signatures),
        // which keeps whichever mapping they load alive.
        unsafe { &*self.mapping.load(Ordering::Acquire) }
    }

    fn mapping_ref_guarded<'a>(&'a self, _guard: &'a EpochGuard<'_>) -> &'a Mapping {
        self.mapping_ref()
    }
}

impl Drop for GenerationFile {
    fn drop(&mut self) {
        let m = *self.mapping.get_mut();
        // SAFETY: we own the last reference; earlier mappings went through EBR.
        drop(unsafe { Box::from_raw(m) });
        if *self.remove_on_drop.get_mut() {
            if let Err(e) = std::fs::remove_file(&self.path) {
                log::warn!("removing retired generation {}: {e}", self.path.display());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epochs() -> Arc<EpochManager> {
        Arc::new(EpochManager::new())
    }

    #[test]
    fn create_sizes_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let f = GenerationFile::create(&p, 1, 1 << 20, epochs()).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 1 << 20);
        assert_eq!(f.capacity(), 1 << 20);
        assert_eq!(f.used(), HEADER_BYTES);
        assert_eq!(f.generation(), 1);
    }

    #[test]
    fn create_refuses_existing_and_tiny() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let _f = GenerationFile::create(&p, 1, 4096, epochs()).unwrap();
        let err = GenerationFile::create(&p, 1, 4096, epochs()).err().unwrap();
        assert!(err.to_string().contains("already exists"), "{err}");
        let err = GenerationFile::create(dir.path().join("h"), 1, 100, epochs()).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn grow_doubles_until_it_fits() {
        let dir = tempfile::tempdir().unwrap();
        let f = GenerationFile::create(dir.path().join("a"), 1, 4096, epochs()).unwrap();
        assert_eq!(f.grow(5000).unwrap(), 8192);
        let g = GenerationFile::create(dir.path().join("b"), 1, 4096, epochs()).unwrap();
        assert_eq!(g.grow(20000).unwrap(), 32768);
        assert_eq!(std::fs::metadata(dir.path().join("b")).unwrap().len(), 32768);
        assert_eq!(g.grow(100).unwrap(), 32768);
    }

    #[test]
    fn grow_preserves_content_and_retires_old_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let ebr = epochs();
        let f = GenerationFile::create(dir.path().join("a"), 1, 8192, ebr.clone()).unwrap();
        let pattern: Vec<u8> = (0..4096u32).map(|i| (i * 7) as u8).collect();
        f.write_at(HEADER_BYTES, &pattern).unwrap();
        let guard = ebr.pin();
        let before = f.slice(&guard, HEADER_BYTES, 4096).as_ptr();
        f.grow(1 << 16).unwrap();
        // The old view is still readable while the guard lives.
        let old = unsafe { std::slice::from_raw_parts(before, 4096) };
        assert_eq!(old, &pattern[..]);
        assert_eq!(f.slice(&guard, HEADER_BYTES, 4096), &pattern[..]);
        assert_eq!(ebr.stats().pending, 1);
        drop(guard);
        assert_eq!(ebr.reclaim_all(), 1);
    }

    #[test]
    fn reopen_sees_written_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        {
            let f = GenerationFile::create(&p, 3, 8192, epochs()).unwrap();
            f.write_at(5000, b"hello").unwrap();
            f.sync().unwrap();
        }
        let ebr = epochs();
        let f = GenerationFile::open(&p, 3, ebr.clone()).unwrap();
        let g = ebr.pin();
        assert_eq!(f.slice(&g, 5000, 5), b"hello");
        assert!(f.write_at(8190, b"xyz").is_err());
    }

    #[test]
    fn remove_on_drop_deletes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a");
        let f = GenerationFile::create(&p, 1, 4096, epochs()).unwrap();
        f.remove_on_drop();
        drop(f);
        assert!(!p.exists());
    }
}
