//! Write-ahead log.
//!
//! Records are laid out back to back with no padding:
//!
//! ```text
//! offset  size  field
//!      0     1  magic (0xA7)
//!      1     1  record type (1 = AtlasInsert, 2 = TraceAppend, 3 = Tombstone)
//!      2     2  reserved, zero
//!      4     4  payload length (u32 LE)
//!      8     4  CRC-32C of the payload (u32 LE)
//!     12     4  sequence number (u32 LE), strictly increasing
//!     16     …  payload
//! ```
//!
//! [`Wal::append`] runs the write path in three steps: the record is
//! encoded with no lock held; the log lock alone covers the file write and
//! `fdatasync`; the log lock is released before the delta lock is taken to
//! apply the record in memory. The two locks are never held together, so
//! readers of the delta buffer never wait on a disk flush.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, IoContext, Result};
use crate::storage::le;
use crate::sync::{AuditedMutex, AuditedRwLock, LockClass};

pub const WAL_MAGIC: u8 = 0xA7;
pub const WAL_HEADER_BYTES: usize = 16;
pub const MAX_PAYLOAD_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RecordType {
    AtlasInsert = 1,
    TraceAppend = 2,
    Tombstone = 3,
}

impl RecordType {
    pub fn from_u8(b: u8) -> Option<RecordType> {
        match b {
            1 => Some(RecordType::AtlasInsert),
            2 => Some(RecordType::TraceAppend),
            3 => Some(RecordType::Tombstone),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalRecordHeader {
    pub record_type: RecordType,
    pub payload_len: u32,
    pub crc32: u32,
    pub sequence: u32,
}

impl WalRecordHeader {
    pub fn encode(&self) -> [u8; WAL_HEADER_BYTES] {
        let mut b = [0u8; WAL_HEADER_BYTES];
        b[0] = WAL_MAGIC;
        b[1] = self.record_type as u8;
        le::put_u32(&mut b, 4, self.payload_len);
        le::put_u32(&mut b, 8, self.crc32);
        le::put_u32(&mut b, 12, self.sequence);
        b
    }

    /// Parses a header, rejecting bad magic, unknown types, nonzero reserved
    /// bytes and oversized lengths.
    pub fn decode(b: &[u8]) -> Option<WalRecordHeader> {
        if b.len() < WAL_HEADER_BYTES || b[0] != WAL_MAGIC || b[2] != 0 || b[3] != 0 {
            return None;
        }
        let record_type = RecordType::from_u8(b[1])?;
        let payload_len = le::get_u32(b, 4);
        if payload_len as usize > MAX_PAYLOAD_BYTES {
            return None;
        }
        Some(WalRecordHeader {
            record_type,
            payload_len,
            crc32: le::get_u32(b, 8),
            sequence: le::get_u32(b, 12),
        })
    }
}

/// A record handed to a replay handler.
#[derive(Debug)]
pub struct WalEntry<'a> {
    pub record_type: RecordType,
    pub sequence: u32,
    pub payload: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReplayOutcome {
    pub records_applied: u64,
    pub torn_bytes_discarded: u64,
    pub last_sequence: Option<u32>,
}

struct LogFile {
    file: File,
    len: u64,
    next_sequence: u32,
}

pub struct Wal {
    path: PathBuf,
    enabled: bool,
    log: AuditedMutex<LogFile>,
    appended: AtomicU64,
}

impl Wal {
    /// Opens (creating if needed) the log for appending. Run [`replay`]
    /// first so that `next_sequence` continues after the last valid record.
    pub fn open(path: impl AsRef<Path>, next_sequence: u32, enabled: bool) -> Result<Wal> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .io_context(|| format!("opening log {}", path.display()))?;
        let len = file
            .seek(SeekFrom::End(0))
            .io_context(|| format!("seeking log {}", path.display()))?;
        Ok(Wal {
            path,
            enabled,
            log: AuditedMutex::new(
                LockClass::Log,
                LogFile {
                    file,
                    len,
                    next_sequence: next_sequence.max(1),
                },
            ),
            appended: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Current length of the log file in bytes.
    pub fn len(&self) -> u64 {
        self.log.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn next_sequence(&self) -> u32 {
        self.log.lock().next_sequence
    }

    /// Records appended through this handle.
    pub fn appended(&self) -> u64 {
        self.appended.load(Ordering::Relaxed)
    }

    /// Logs one record and then applies it to `delta`.
    ///
    /// If the write or the sync fails the error is returned and `apply` is
    /// not called. The record may still be in the file; replay handlers
    /// treat records as idempotent.
    pub fn append<T, R>(
        &self,
        record_type: RecordType,
        payload: &[u8],
        delta: &AuditedRwLock<T>,
        apply: impl FnOnce(&mut T) -> R,
    ) -> Result<(u32, R)> {
        if payload.len() > MAX_PAYLOAD_BYTES {
            return Err(Error::invalid(format!(
                "payload of {} bytes exceeds the {MAX_PAYLOAD_BYTES}-byte record limit",
                payload.len()
            )));
        }

        // Step 1: serialize without any lock. The sequence is patched in
        // under the log lock so file order and sequence order agree.
        let mut record = Vec::with_capacity(WAL_HEADER_BYTES + payload.len());
        let header = WalRecordHeader {
            record_type,
            payload_len: payload.len() as u32,
            crc32: crc32c::crc32c(payload),
            sequence: 0,
        };
        record.extend_from_slice(&header.encode());
        record.extend_from_slice(payload);

        // Step 2: log lock only.
        let sequence = {
            let mut log = self.log.lock();
            let sequence = log.next_sequence;
            if self.enabled {
                le::put_u32(&mut record, 12, sequence);
                log.file.write_all(&record).map_err(Error::Durability)?;
                log.len += record.len() as u64;
                log.file.sync_data().map_err(Error::Durability)?;
            }
            log.next_sequence += 1;
            sequence
        };
        self.appended.fetch_add(1, Ordering::Relaxed);

        // Step 3: delta lock only.
        let mut target = delta.write();
        Ok((sequence, apply(&mut target)))
    }

    /// Re-reads the file length after an external [`replay`] and sets the
    /// next sequence number.
    pub fn reload(&self, next_sequence: u32) -> Result<()> {
        let mut log = self.log.lock();
        log.len = log
            .file
            .seek(SeekFrom::End(0))
            .io_context(|| format!("seeking log {}", self.path.display()))?;
        log.next_sequence = log.next_sequence.max(next_sequence).max(1);
        Ok(())
    }

    /// Empties the log. The sequence counter keeps counting.
    pub fn truncate(&self) -> Result<()> {
        let mut log = self.log.lock();
        if log.len == 0 {
            return Ok(());
        }
        log.file.set_len(0).map_err(Error::Durability)?;
        log.file.seek(SeekFrom::Start(0)).map_err(Error::Durability)?;
        log.file.sync_all().map_err(Error::Durability)?;
        log.len = 0;
        Ok(())
    }

    /// Drops the first `boundary` bytes, keeping any records appended after
    /// them. The surviving tail is written to a temporary file and renamed
    /// over the log, so a crash leaves either the old or the new log intact.
    pub fn discard_prefix(&self, boundary: u64) -> Result<()> {
        let mut log = self.log.lock();
        if boundary == 0 {
            return Ok(());
        }
        if boundary >= log.len {
            drop(log);
            return self.truncate();
        }
        let mut tail = Vec::with_capacity((log.len - boundary) as usize);
        log.file.seek(SeekFrom::Start(boundary)).map_err(Error::Durability)?;
        (&log.file).read_to_end(&mut tail).map_err(Error::Durability)?;
        let tmp = self.path.with_extension("wal.tmp");
        {
            let mut f = File::create(&tmp).map_err(Error::Durability)?;
            f.write_all(&tail).map_err(Error::Durability)?;
            f.sync_all().map_err(Error::Durability)?;
        }
        std::fs::rename(&tmp, &self.path).map_err(Error::Durability)?;
        sync_parent(&self.path)?;
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&self.path)
            .map_err(Error::Durability)?;
        file.seek(SeekFrom::End(0)).map_err(Error::Durability)?;
        log.file = file;
        log.len = tail.len() as u64;
        Ok(())
    }
}

pub(crate) fn sync_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
        File::open(dir)
            .and_then(|d| d.sync_all())
            .io_context(|| format!("syncing directory {}", dir.display()))?;
    }
    Ok(())
}

/// Replays the log at `path`, dispatching every valid record in order.
///
/// Reading stops at the first record with a bad header, a short payload, a
/// CRC mismatch or a non-increasing sequence number; everything from there
/// on is counted as torn and cut off the file. A missing file replays as
/// empty.
pub fn replay(
    path: impl AsRef<Path>,
    mut handler: impl FnMut(&WalEntry<'_>) -> Result<()>,
) -> Result<ReplayOutcome> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)
                .io_context(|| format!("reading log {}", path.display()))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ReplayOutcome::default()),
        Err(e) => return Err(Error::storage(format!("opening log {}", path.display()), e)),
    }

    let mut outcome = ReplayOutcome::default();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let Some(header) = WalRecordHeader::decode(&bytes[pos..]) else { break };
        let start = pos + WAL_HEADER_BYTES;
        let end = start + header.payload_len as usize;
        if end > bytes.len() {
            break;
        }
        let payload = &bytes[start..end];
        if crc32c::crc32c(payload) != header.crc32 {
            break;
        }
        if outcome.last_sequence.is_some_and(|last| header.sequence <= last) {
            break;
        }
        handler(&WalEntry {
            record_type: header.record_type,
            sequence: header.sequence,
            payload,
        })?;
        outcome.records_applied += 1;
        outcome.last_sequence = Some(header.sequence);
        pos = end;
    }

    outcome.torn_bytes_discarded = (bytes.len() - pos) as u64;
    if outcome.torn_bytes_discarded > 0 {
        log::warn!(
            "discarding {} torn bytes at offset {pos} of {}",
            outcome.torn_bytes_discarded,
            path.display()
        );
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .io_context(|| format!("opening log {} for truncation", path.display()))?;
        f.set_len(pos as u64)
            .and_then(|_| f.sync_all())
            .io_context(|| format!("truncating log {}", path.display()))?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::held_by_current_thread;

    fn delta() -> AuditedRwLock<Vec<u32>> {
        AuditedRwLock::new(LockClass::Delta, Vec::new())
    }

    #[test]
    fn crc32c_check_value() {
        assert_eq!(crc32c::crc32c(b"123456789"), 0xE306_9283);
    }

    #[test]
    fn header_is_sixteen_bytes_and_roundtrips() {
        let h = WalRecordHeader {
            record_type: RecordType::Tombstone,
            payload_len: 9,
            crc32: 0xDEAD_BEEF,
            sequence: 42,
        };
        let b = h.encode();
        assert_eq!(b.len(), 16);
        assert_eq!(b[0], 0xA7);
        assert_eq!(WalRecordHeader::decode(&b), Some(h));
        let mut bad = b;
        bad[2] = 1;
        assert_eq!(WalRecordHeader::decode(&bad), None);
    }

    #[test]
    fn append_grows_by_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let wal = Wal::open(dir.path().join("t.wal"), 1, true).unwrap();
        let d = delta();
        let (s1, _) = wal.append(RecordType::AtlasInsert, &[7u8; 100], &d, |v| v.push(1)).unwrap();
        assert_eq!(wal.len(), 116);
        let (s2, _) = wal.append(RecordType::AtlasInsert, &[], &d, |v| v.push(2)).unwrap();
        assert_eq!(s2, s1 + 1);
        assert_eq!(*d.read(), vec![1, 2]);
    }

    #[test]
    fn apply_runs_without_the_log_lock() {
        let dir = tempfile::tempdir().unwrap();
        let wal = Wal::open(dir.path().join("t.wal"), 1, true).unwrap();
        let d = delta();
        wal.append(RecordType::AtlasInsert, b"x", &d, |_| {
            assert_eq!(held_by_current_thread(LockClass::Log), 0);
            assert_eq!(held_by_current_thread(LockClass::Delta), 1);
        })
        .unwrap();
    }

    #[test]
    fn disabled_log_still_applies() {
        let dir = tempfile::tempdir().unwrap();
        let wal = Wal::open(dir.path().join("t.wal"), 1, false).unwrap();
        let d = delta();
        wal.append(RecordType::AtlasInsert, b"abc", &d, |v| v.push(9)).unwrap();
        assert_eq!(wal.len(), 0);
        assert_eq!(*d.read(), vec![9]);
    }

    #[test]
    fn replay_of_missing_or_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wal");
        assert_eq!(replay(&p, |_| Ok(())).unwrap(), ReplayOutcome::default());
        File::create(&p).unwrap();
        let out = replay(&p, |_| Ok(())).unwrap();
        assert_eq!((out.records_applied, out.torn_bytes_discarded), (0, 0));
    }

    #[test]
    fn replay_discards_and_truncates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wal");
        let wal = Wal::open(&p, 1, true).unwrap();
        let d = delta();
        for i in 0..4u8 {
            wal.append(RecordType::TraceAppend, &[i; 20], &d, |_| ()).unwrap();
        }
        drop(wal);
        // Cut the fourth record 7 bytes in.
        let full = std::fs::metadata(&p).unwrap().len();
        let f = OpenOptions::new().write(true).open(&p).unwrap();
        f.set_len(full - 36 + 7).unwrap();
        drop(f);

        let mut seen = Vec::new();
        let out = replay(&p, |e| {
            seen.push((e.sequence, e.payload[0]));
            Ok(())
        })
        .unwrap();
        assert_eq!((out.records_applied, out.torn_bytes_discarded), (3, 7));
        assert_eq!(seen, vec![(1, 0), (2, 1), (3, 2)]);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 3 * 36);
        let again = replay(&p, |_| Ok(())).unwrap();
        assert_eq!((again.records_applied, again.torn_bytes_discarded), (3, 0));
    }

    #[test]
    fn truncate_keeps_sequence_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wal");
        let wal = Wal::open(&p, 1, true).unwrap();
        let d = delta();
        wal.truncate().unwrap();
        wal.append(RecordType::AtlasInsert, b"a", &d, |_| ()).unwrap();
        wal.truncate().unwrap();
        assert_eq!(wal.len(), 0);
        let out = replay(&p, |_| Ok(())).unwrap();
        assert_eq!((out.records_applied, out.torn_bytes_discarded), (0, 0));
        let (seq, _) = wal.append(RecordType::AtlasInsert, b"b", &d, |_| ()).unwrap();
        assert_eq!(seq, 2);
        assert_eq!(replay(&p, |_| Ok(())).unwrap().records_applied, 1);
    }

    #[test]
    fn discard_prefix_keeps_tail_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wal");
        let wal = Wal::open(&p, 1, true).unwrap();
        let d = delta();
        wal.append(RecordType::AtlasInsert, b"old", &d, |_| ()).unwrap();
        let boundary = wal.len();
        wal.append(RecordType::AtlasInsert, b"new", &d, |_| ()).unwrap();
        wal.discard_prefix(boundary).unwrap();
        let mut payloads = Vec::new();
        replay(&p, |e| {
            payloads.push(e.payload.to_vec());
            Ok(())
        })
        .unwrap();
        assert_eq!(payloads, vec![b"new".to_vec()]);
        wal.append(RecordType::AtlasInsert, b"newer", &d, |_| ()).unwrap();
        assert_eq!(replay(&p, |_| Ok(())).unwrap().records_applied, 2);
    }

    #[test]
    fn any_single_bit_flip_cuts_the_log_there() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wal");
        let wal = Wal::open(&p, 1, true).unwrap();
        let d = delta();
        for i in 0..3u8 {
            wal.append(RecordType::AtlasInsert, &[i; 8], &d, |_| ()).unwrap();
        }
        drop(wal);
        let pristine = std::fs::read(&p).unwrap();
        // Flip each payload bit of the second record.
        let payload_start = 24 + 16;
        for byte in payload_start..payload_start + 8 {
            for bit in 0..8 {
                let mut bytes = pristine.clone();
                bytes[byte] ^= 1 << bit;
                std::fs::write(&p, &bytes).unwrap();
                let out = replay(&p, |_| Ok(())).unwrap();
                assert_eq!(out.records_applied, 1);
                assert_eq!(out.torn_bytes_discarded, 48);
            }
        }
    }
}
