//! Append-only sidecar file for variable-length text.
//!
//! Blobs are raw bytes with no per-blob header, addressed by
//! [`BlobRef`]. The file starts with a 4096-byte header
//! (`"AEOB"`, version, generation, sealed used bytes) and grows by doubling.
//! Garbage collection copies the live blobs into the next generation; refs
//! into an older generation then fail with [`Error::Gone`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::storage::{le, EpochGuard, EpochManager, GenerationFile, HEADER_BYTES};

pub const BLOB_MAGIC: [u8; 4] = *b"AEOB";
pub const BLOB_VERSION: u32 = 1;
pub const MAX_BLOB_BYTES: usize = 64 << 20;
const INITIAL_CAPACITY: u64 = 64 << 10;

pub fn blob_file_name(generation: u32) -> String {
    format!("trace_blobs_gen{generation}.bin")
}

/// Location of one blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BlobRef {
    pub offset: u64,
    pub size: u32,
    pub generation: u32,
}

pub struct BlobArena {
    file: GenerationFile,
    generation: u32,
    cursor: AtomicU64,
    reads: AtomicU64,
}

impl BlobArena {
    pub fn create(path: impl AsRef<Path>, generation: u32, epochs: Arc<EpochManager>) -> Result<BlobArena> {
        let file = GenerationFile::create(path, generation, INITIAL_CAPACITY, epochs)?;
        let arena = BlobArena {
            file,
            generation,
            cursor: AtomicU64::new(HEADER_BYTES),
            reads: AtomicU64::new(0),
        };
        arena.write_header()?;
        Ok(arena)
    }

    /// Opens a sealed arena. Bytes past the sealed cursor are ignored and
    /// will be overwritten by later appends.
    pub fn open(path: impl AsRef<Path>, generation: u32, epochs: Arc<EpochManager>) -> Result<BlobArena> {
        let path = path.as_ref();
        let file = GenerationFile::open(path, generation, epochs)?;
        let (stored_gen, used) = {
            let guard = file.epochs().pin();
            let h = file.slice(&guard, 0, 24);
            if h[0..4] != BLOB_MAGIC {
                return Err(Error::corrupt(path, "bad blob arena magic"));
            }
            if le::get_u32(h, 4) != BLOB_VERSION {
                return Err(Error::corrupt(path, "unsupported blob arena version"));
            }
            (le::get_u32(h, 8), le::get_u64(h, 16))
        };
        if stored_gen != generation {
            return Err(Error::corrupt(path, format!("header says generation {stored_gen}, expected {generation}")));
        }
        if used < HEADER_BYTES || used > file.capacity() {
            return Err(Error::corrupt(path, format!("used bytes {used} out of range")));
        }
        file.set_used(used);
        Ok(BlobArena {
            file,
            generation,
            cursor: AtomicU64::new(used),
            reads: AtomicU64::new(0),
        })
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// End of the last appended blob, header included.
    pub fn used_bytes(&self) -> u64 {
        self.cursor.load(Ordering::Acquire)
    }

    pub fn capacity(&self) -> u64 {
        self.file.capacity()
    }

    /// Number of blob reads served since opening.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn path(&self) -> &Path {
        self.file.path()
    }

    /// Appends `bytes`. Callers serialize appends.
    pub fn append(&self, bytes: &[u8]) -> Result<BlobRef> {
        if bytes.len() > MAX_BLOB_BYTES {
            return Err(Error::invalid(format!(
                "blob of {} bytes exceeds the {MAX_BLOB_BYTES}-byte limit",
                bytes.len()
            )));
        }
        let offset = self.cursor.load(Ordering::Acquire);
        let end = offset + bytes.len() as u64;
        if end > self.file.capacity() {
            self.file.grow(end)?;
        }
        self.file.write_at(offset, bytes)?;
        self.file.set_used(end);
        self.cursor.store(end, Ordering::Release);
        Ok(BlobRef {
            offset,
            size: bytes.len() as u32,
            generation: self.generation,
        })
    }

    /// Borrows a blob straight from the mapping; no bytes are copied.
    pub fn read<'g>(&'g self, guard: &'g EpochGuard<'_>, r: BlobRef) -> Result<&'g [u8]> {
        if r.generation != self.generation {
            return Err(Error::Gone {
                requested: r.generation,
                current: self.generation,
            });
        }
        let end = r.offset + u64::from(r.size);
        if r.offset < HEADER_BYTES || end > self.used_bytes() {
            return Err(Error::invalid(format!(
                "blob {}+{} lies outside the {} used bytes",
                r.offset,
                r.size,
                self.used_bytes()
            )));
        }
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(self.file.slice(guard, r.offset, r.size as usize))
    }

    /// Records the cursor in the header and flushes the file.
    pub fn seal(&self) -> Result<()> {
        self.write_header()?;
        self.file.sync()
    }

    fn write_header(&self) -> Result<()> {
        let mut h = [0u8; 24];
        h[0..4].copy_from_slice(&BLOB_MAGIC);
        le::put_u32(&mut h, 4, BLOB_VERSION);
        le::put_u32(&mut h, 8, self.generation);
        le::put_u64(&mut h, 16, self.used_bytes());
        self.file.write_at(0, &h)
    }

    /// Copies the blobs in `live` into a new sealed arena at `path`,
    /// contiguously and in the order given. Duplicate refs are copied once.
    pub fn gc_copy_live(
        &self,
        live: &[BlobRef],
        path: impl AsRef<Path>,
        generation: u32,
    ) -> Result<(BlobArena, HashMap<BlobRef, BlobRef>)> {
        let next = BlobArena::create(path, generation, self.file.epochs().clone())?;
        let mut map = HashMap::with_capacity(live.len());
        let guard = self.file.epochs().pin();
        for &r in live {
            if map.contains_key(&r) {
                continue;
            }
            let bytes = self.read(&guard, r)?;
            map.insert(r, next.append(bytes)?);
        }
        next.seal()?;
        Ok((next, map))
    }

    /// Deletes the file once the arena is dropped.
    pub fn remove_on_drop(&self) {
        self.file.remove_on_drop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arena(dir: &Path, gen: u32) -> BlobArena {
        BlobArena::create(dir.join(blob_file_name(gen)), gen, Arc::new(EpochManager::new())).unwrap()
    }

    #[test]
    fn empty_and_small_appends() {
        let dir = tempfile::tempdir().unwrap();
        let a = arena(dir.path(), 1);
        let empty = a.append(b"").unwrap();
        assert_eq!(empty.size, 0);
        assert_eq!(a.used_bytes(), HEADER_BYTES);
        let hello = a.append(b"hello").unwrap();
        assert_eq!((hello.offset, hello.size), (4096, 5));
        let g = a.file.epochs().pin();
        assert_eq!(a.read(&g, hello).unwrap(), b"hello");
        assert_eq!(a.read(&g, empty).unwrap(), b"");
    }

    #[test]
    fn reads_are_views_of_the_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = arena(dir.path(), 1);
        let r = a.append(b"zero copy").unwrap();
        let g = a.file.epochs().pin();
        let (x, y) = (a.read(&g, r).unwrap(), a.read(&g, r).unwrap());
        assert_eq!(x.as_ptr(), y.as_ptr());
        assert_eq!(x.len(), y.len());
        assert_eq!(a.reads(), 2);
    }

    #[test]
    fn ten_thousand_blobs_read_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let a = arena(dir.path(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blobs: Vec<Vec<u8>> = (0..10_000)
            .map(|_| {
                let n = rng.gen_range(0..600);
                (0..n).map(|_| rng.gen()).collect()
            })
            .collect();
        let refs: Vec<BlobRef> = blobs.iter().map(|b| a.append(b).unwrap()).collect();
        let g = a.file.epochs().pin();
        for (b, r) in blobs.iter().zip(&refs) {
            assert_eq!(crc32c::crc32c(a.read(&g, *r).unwrap()), crc32c::crc32c(b));
            assert_eq!(a.read(&g, *r).unwrap(), &b[..]);
        }
        assert!(a.capacity().is_power_of_two());
    }

    #[test]
    fn gc_copies_only_live_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let a = arena(dir.path(), 1);
        let refs: Vec<BlobRef> = (0..10).map(|i| a.append(&vec![i as u8; 10 + i]).unwrap()).collect();
        let live = [refs[1], refs[4], refs[9]];
        let (b, map) = a.gc_copy_live(&live, dir.path().join(blob_file_name(2)), 2).unwrap();
        assert_eq!(b.used_bytes(), HEADER_BYTES + 11 + 14 + 19);
        let g = b.file.epochs().pin();
        for r in live {
            let new = map[&r];
            assert_eq!(new.generation, 2);
            assert_eq!(b.read(&g, new).unwrap(), a.read(&g, r).unwrap());
        }
        assert!(matches!(b.read(&g, refs[0]), Err(Error::Gone { requested: 1, current: 2 })));

        let (c, _) = a.gc_copy_live(&[], dir.path().join(blob_file_name(3)), 3).unwrap();
        assert_eq!(c.used_bytes(), HEADER_BYTES);
    }

    #[test]
    fn seal_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(blob_file_name(4));
        let epochs = Arc::new(EpochManager::new());
        let r = {
            let a = BlobArena::create(&path, 4, epochs.clone()).unwrap();
            let r = a.append(b"durable").unwrap();
            a.seal().unwrap();
            a.append(b"not sealed").unwrap();
            r
        };
        let a = BlobArena::open(&path, 4, epochs).unwrap();
        assert_eq!(a.used_bytes(), HEADER_BYTES + 7);
        let g = a.file.epochs().pin();
        assert_eq!(a.read(&g, r).unwrap(), b"durable");
    }

    #[test]
    fn rejects_out_of_range_refs() {
        let dir = tempfile::tempdir().unwrap();
        let a = arena(dir.path(), 1);
        let g = a.file.epochs().pin();
        let bogus = BlobRef {
            offset: 4096,
            size: 10,
            generation: 1,
        };
        assert!(matches!(a.read(&g, bogus), Err(Error::InvalidArgument(_))));
    }
}
