//! The 512-byte event record.
//!
//! | offset | size | field                                  |
//! |-------:|-----:|----------------------------------------|
//! |      0 |    8 | event id                               |
//! |      8 |    4 | kind (1 user, 2 system, 3 concept)     |
//! |     12 |    4 | flags (bit 0 tombstone)                |
//! |     16 |    8 | timestamp, µs since the Unix epoch     |
//! |     24 |    8 | previous event id (0 = none)           |
//! |     32 |    8 | next event id (0 = none)               |
//! |     40 |  128 | 16 referenced atlas node ids (0 = free)|
//! |    168 |    8 | blob offset                            |
//! |    176 |    4 | blob size                              |
//! |    180 |    4 | blob generation                        |
//! |    192 |   64 | text preview, NUL-terminated           |
//! |    256 |  256 | reserved                               |

use crate::blob_arena::BlobRef;
use crate::error::{Error, Result};
use crate::storage::le;

pub const EVENT_BYTES: usize = 512;
pub const MAX_REFS: usize = 16;
pub const PREVIEW_BYTES: usize = 64;
pub const EVENT_FLAG_TOMBSTONE: u32 = 1;

pub(crate) const OFF_FLAGS: usize = 12;
pub(crate) const OFF_PREV: usize = 24;
pub(crate) const OFF_NEXT: usize = 32;
const OFF_REFS: usize = 40;
pub(crate) const OFF_BLOB: usize = 168;
const OFF_PREVIEW: usize = 192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum EventKind {
    User = 1,
    System = 2,
    Concept = 3,
}

impl EventKind {
    pub fn from_u32(v: u32) -> Result<EventKind> {
        match v {
            1 => Ok(EventKind::User),
            2 => Ok(EventKind::System),
            3 => Ok(EventKind::Concept),
            other => Err(Error::invalid(format!("unknown event kind {other}"))),
        }
    }
}

/// A decoded event record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub id: u64,
    pub kind: EventKind,
    pub tombstoned: bool,
    pub timestamp_us: u64,
    pub prev_id: u64,
    pub next_id: u64,
    pub refs: Vec<u64>,
    pub blob: BlobRef,
    /// Up to the first 63 bytes of the text.
    pub preview: Vec<u8>,
}

/// Builds a record with an empty blob ref; the ref is filled in when the
/// text is appended to the arena.
pub(crate) fn encode(
    id: u64,
    kind: EventKind,
    timestamp_us: u64,
    prev_id: u64,
    refs: &[u64],
    text: &[u8],
) -> [u8; EVENT_BYTES] {
    debug_assert!(refs.len() <= MAX_REFS);
    let mut r = [0u8; EVENT_BYTES];
    le::put_u64(&mut r, 0, id);
    le::put_u32(&mut r, 8, kind as u32);
    le::put_u64(&mut r, 16, timestamp_us);
    le::put_u64(&mut r, OFF_PREV, prev_id);
    for (i, &id) in refs.iter().enumerate() {
        le::put_u64(&mut r, OFF_REFS + 8 * i, id);
    }
    let n = text.len().min(PREVIEW_BYTES - 1);
    r[OFF_PREVIEW..OFF_PREVIEW + n].copy_from_slice(&text[..n]);
    r
}

pub(crate) fn set_blob(r: &mut [u8], blob: BlobRef) {
    le::put_u64(r, OFF_BLOB, blob.offset);
    le::put_u32(r, OFF_BLOB + 8, blob.size);
    le::put_u32(r, OFF_BLOB + 12, blob.generation);
}

pub(crate) fn id_of(r: &[u8]) -> u64 {
    le::get_u64(r, 0)
}

pub(crate) fn flags_of(r: &[u8]) -> u32 {
    le::get_u32(r, OFF_FLAGS)
}

pub(crate) fn blob_of(r: &[u8]) -> BlobRef {
    BlobRef {
        offset: le::get_u64(r, OFF_BLOB),
        size: le::get_u32(r, OFF_BLOB + 8),
        generation: le::get_u32(r, OFF_BLOB + 12),
    }
}

pub(crate) fn decode(r: &[u8]) -> Result<TraceEvent> {
    let refs = (0..MAX_REFS)
        .map(|i| le::get_u64(r, OFF_REFS + 8 * i))
        .filter(|&id| id != 0)
        .collect();
    let preview = &r[OFF_PREVIEW..OFF_PREVIEW + PREVIEW_BYTES];
    let end = preview.iter().position(|&b| b == 0).unwrap_or(PREVIEW_BYTES - 1);
    Ok(TraceEvent {
        id: id_of(r),
        kind: EventKind::from_u32(le::get_u32(r, 8))?,
        tombstoned: flags_of(r) & EVENT_FLAG_TOMBSTONE != 0,
        timestamp_us: le::get_u64(r, 16),
        prev_id: le::get_u64(r, OFF_PREV),
        next_id: le::get_u64(r, OFF_NEXT),
        refs,
        blob: blob_of(r),
        preview: preview[..end].to_vec(),
    })
}
