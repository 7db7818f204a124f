//! Episodic event log with block-indexed semantic search.
//!
//! Events are fixed 512-byte records in `trace_genN.bin`, linked in time
//! by `prev_id`/`next_id`, with full text in the blob arena and one FP32
//! embedding per event slot in `trace_embed_genN.bin`. Slots are grouped in
//! blocks of 1024 consecutive events, each with a centroid of its live
//! embeddings. Search scores all centroids, keeps the best `K` blocks and
//! scans only their events.
//!
//! File headers are written when a generation is sealed by compaction.
//! Events appended afterwards are recovered from the write-ahead log.

mod block;
pub mod event;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, MutexGuard};

pub use block::{TraceBlock, BLOCK_EVENTS};
pub use event::{EventKind, TraceEvent, EVENT_BYTES, MAX_REFS};

use crate::atlas::{tombstone_payload, TombstoneTarget};
use crate::blob_arena::{blob_file_name, BlobArena, BlobRef};
use crate::error::{Error, Result};
use crate::kernels;
use crate::storage::{le, EpochGuard, EpochManager, GenerationFile, HEADER_BYTES};
use crate::sync::{AuditedRwLock, LockClass};
use crate::wal::{RecordType, Wal};
use event::EVENT_FLAG_TOMBSTONE;

pub const TRACE_MAGIC: [u8; 4] = *b"AEOT";
pub const EMBED_MAGIC: [u8; 4] = *b"AEOE";
pub const TRACE_VERSION: u32 = 1;
const INITIAL_FILE_BYTES: u64 = 1 << 20;

pub fn trace_file_name(generation: u32) -> String {
    format!("trace_gen{generation}.bin")
}

pub fn embed_file_name(generation: u32) -> String {
    format!("trace_embed_gen{generation}.bin")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSearchResult {
    /// `(event id, similarity)`, best first.
    pub hits: Vec<(u64, f32)>,
    /// Centroid scores plus event scores.
    pub comparisons: u64,
    pub blocks: u64,
    pub blocks_scanned: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceStats {
    pub generation: u32,
    pub event_count: u64,
    pub live_count: u64,
    pub block_count: u64,
    pub blob_bytes: u64,
    pub event_file_bytes: u64,
    pub embed_file_bytes: u64,
}

struct TraceState {
    generation: u32,
    dim: usize,
    events: GenerationFile,
    embeds: GenerationFile,
    count: u64,
    live: u64,
    blocks: Vec<TraceBlock>,
}

impl TraceState {
    fn create(dir: &Path, generation: u32, dim: usize, epochs: &Arc<EpochManager>) -> Result<TraceState> {
        let events = GenerationFile::create(dir.join(trace_file_name(generation)), generation, INITIAL_FILE_BYTES, epochs.clone())?;
        let embeds = GenerationFile::create(dir.join(embed_file_name(generation)), generation, INITIAL_FILE_BYTES, epochs.clone())?;
        Ok(TraceState {
            generation,
            dim,
            events,
            embeds,
            count: 0,
            live: 0,
            blocks: Vec::new(),
        })
    }

    fn record<'g>(&'g self, guard: &'g EpochGuard<'_>, slot: u64) -> &'g [u8] {
        debug_assert!(slot < self.count);
        self.events.slice(guard, HEADER_BYTES + slot * EVENT_BYTES as u64, EVENT_BYTES)
    }

    fn embedding<'g>(&'g self, guard: &'g EpochGuard<'_>, slot: u64) -> &'g [f32] {
        let bytes = 4 * self.dim as u64;
        bytemuck::cast_slice(self.embeds.slice(guard, HEADER_BYTES + slot * bytes, bytes as usize))
    }

    fn is_tombstoned(&self, guard: &EpochGuard<'_>, slot: u64) -> bool {
        event::flags_of(self.record(guard, slot)) & EVENT_FLAG_TOMBSTONE != 0
    }

    /// Slots hold events in increasing id order.
    fn slot_of(&self, guard: &EpochGuard<'_>, id: u64) -> Option<u64> {
        let (mut lo, mut hi) = (0u64, self.count);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let mid_id = event::id_of(self.record(guard, mid));
            match mid_id.cmp(&id) {
                std::cmp::Ordering::Equal => return Some(mid),
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
            }
        }
        None
    }

    /// Appends a complete record and its embedding.
    fn push(&mut self, record: &[u8], embedding: &[u8], live: bool) -> Result<()> {
        let slot = self.count;
        let rec_end = HEADER_BYTES + (slot + 1) * EVENT_BYTES as u64;
        if rec_end > self.events.capacity() {
            self.events.grow(rec_end)?;
        }
        let emb_bytes = embedding.len() as u64;
        let emb_end = HEADER_BYTES + (slot + 1) * emb_bytes;
        if emb_end > self.embeds.capacity() {
            self.embeds.grow(emb_end)?;
        }
        self.events.write_at(rec_end - EVENT_BYTES as u64, record)?;
        self.embeds.write_at(emb_end - emb_bytes, embedding)?;
        self.events.set_used(rec_end);
        self.embeds.set_used(emb_end);
        if self.blocks.last().is_none_or(|b| b.is_full()) {
            self.blocks.push(TraceBlock::new(self.blocks.len() as u32, self.dim));
        }
        let e: Vec<f32> = embedding.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        self.blocks.last_mut().unwrap().add(&e, live);
        self.count += 1;
        if live {
            self.live += 1;
        }
        Ok(())
    }

    fn set_next(&self, slot: u64, next_id: u64) -> Result<()> {
        self.events
            .write_at(HEADER_BYTES + slot * EVENT_BYTES as u64 + event::OFF_NEXT as u64, &next_id.to_le_bytes())
    }

    fn apply_tombstone(&mut self, slot: u64) -> Result<bool> {
        let guard = self.events.epochs().pin();
        let flags = event::flags_of(self.record(&guard, slot));
        if flags & EVENT_FLAG_TOMBSTONE != 0 {
            return Ok(false);
        }
        let off = HEADER_BYTES + slot * EVENT_BYTES as u64 + event::OFF_FLAGS as u64;
        self.events.write_at(off, &(flags | EVENT_FLAG_TOMBSTONE).to_le_bytes())?;
        let e = self.embedding(&guard, slot).to_vec();
        self.blocks[(slot / BLOCK_EVENTS) as usize].remove(&e);
        self.live -= 1;
        Ok(true)
    }

    /// Writes both file headers with the current counts and syncs.
    fn seal(&self, next_event_id: u64) -> Result<()> {
        let mut h = [0u8; 32];
        h[0..4].copy_from_slice(&TRACE_MAGIC);
        le::put_u32(&mut h, 4, TRACE_VERSION);
        le::put_u32(&mut h, 8, self.generation);
        le::put_u32(&mut h, 12, self.dim as u32);
        le::put_u64(&mut h, 16, self.count);
        le::put_u64(&mut h, 24, next_event_id);
        self.events.write_at(0, &h)?;
        let mut e = [0u8; 16];
        e[0..4].copy_from_slice(&EMBED_MAGIC);
        le::put_u32(&mut e, 4, TRACE_VERSION);
        le::put_u32(&mut e, 8, self.generation);
        le::put_u32(&mut e, 12, self.dim as u32);
        self.embeds.write_at(0, &e)?;
        self.events.sync()?;
        self.embeds.sync()
    }

    fn remove_on_drop(&self) {
        self.events.remove_on_drop();
        self.embeds.remove_on_drop();
    }
}

/// A sealed next generation produced by [`Trace::build`].
pub(crate) struct TraceBuild {
    state: TraceState,
    arena: BlobArena,
    tail_id: u64,
    next_event_id: u64,
    pub events_copied: u64,
    pub blobs_copied: u64,
}

pub struct Trace {
    dir: PathBuf,
    dim: usize,
    epochs: Arc<EpochManager>,
    wal: Arc<Wal>,
    state: AuditedRwLock<TraceState>,
    blobs: AtomicPtr<BlobArena>,
    writer: Mutex<()>,
    next_event_id: AtomicU64,
    tail_id: AtomicU64,
    sealed_next_id: AtomicU64,
}

// SAFETY: `blobs` is replaced only by swapping in a new box and retiring the
// old one through EBR.
unsafe impl Send for Trace {}
unsafe impl Sync for Trace {}

impl Trace {
    pub(crate) fn create(
        dir: &Path,
        dim: u32,
        generation: u32,
        epochs: Arc<EpochManager>,
        wal: Arc<Wal>,
    ) -> Result<Trace> {
        if dim == 0 {
            return Err(Error::invalid("trace embedding dimension must be positive"));
        }
        let state = TraceState::create(dir, generation, dim as usize, &epochs)?;
        let arena = BlobArena::create(dir.join(blob_file_name(generation)), generation, epochs.clone())?;
        state.seal(1)?;
        arena.seal()?;
        Ok(Trace::assemble(dir, state, arena, 1, 0, epochs, wal))
    }

    pub(crate) fn open(dir: &Path, generation: u32, epochs: Arc<EpochManager>, wal: Arc<Wal>) -> Result<Trace> {
        let events_path = dir.join(trace_file_name(generation));
        let events = GenerationFile::open(&events_path, generation, epochs.clone())?;
        let (dim, count, next_event_id) = {
            let g = epochs.pin();
            let h = events.slice(&g, 0, 32);
            if h[0..4] != TRACE_MAGIC || le::get_u32(h, 4) != TRACE_VERSION {
                return Err(Error::corrupt(&events_path, "bad trace header"));
            }
            if le::get_u32(h, 8) != generation {
                return Err(Error::corrupt(&events_path, "generation mismatch"));
            }
            (le::get_u32(h, 12) as usize, le::get_u64(h, 16), le::get_u64(h, 24))
        };
        let embeds_path = dir.join(embed_file_name(generation));
        let embeds = GenerationFile::open(&embeds_path, generation, epochs.clone())?;
        {
            let g = epochs.pin();
            let h = embeds.slice(&g, 0, 16);
            if h[0..4] != EMBED_MAGIC || le::get_u32(h, 12) as usize != dim {
                return Err(Error::corrupt(&embeds_path, "bad embedding header"));
            }
        }
        if events.capacity() < HEADER_BYTES + count * EVENT_BYTES as u64
            || embeds.capacity() < HEADER_BYTES + count * 4 * dim as u64
        {
            return Err(Error::corrupt(&events_path, "trace files shorter than their sealed event count"));
        }
        let arena = BlobArena::open(dir.join(blob_file_name(generation)), generation, epochs.clone())?;

        // Rebuild the block index from the sealed records.
        let mut state = TraceState {
            generation,
            dim,
            events,
            embeds,
            count: 0,
            live: 0,
            blocks: Vec::new(),
        };
        let mut tail = 0;
        {
            let g = epochs.pin();
            for slot in 0..count {
                state.count = slot + 1;
                let rec = state.record(&g, slot);
                let live = event::flags_of(rec) & EVENT_FLAG_TOMBSTONE == 0;
                tail = event::id_of(rec);
                let emb = state.embedding(&g, slot).to_vec();
                if state.blocks.last().is_none_or(|b| b.is_full()) {
                    state.blocks.push(TraceBlock::new(state.blocks.len() as u32, dim));
                }
                state.blocks.last_mut().unwrap().add(&emb, live);
                if live {
                    state.live += 1;
                }
            }
        }
        state.count = count;
        state.events.set_used(HEADER_BYTES + count * EVENT_BYTES as u64);
        state.embeds.set_used(HEADER_BYTES + count * 4 * dim as u64);
        if count > 0 {
            // A link written after sealing may point at an event the log lost.
            state.set_next(count - 1, 0)?;
        }
        Ok(Trace::assemble(dir, state, arena, next_event_id.max(1), tail, epochs, wal))
    }

    fn assemble(
        dir: &Path,
        state: TraceState,
        arena: BlobArena,
        next_event_id: u64,
        tail_id: u64,
        epochs: Arc<EpochManager>,
        wal: Arc<Wal>,
    ) -> Trace {
        Trace {
            dir: dir.to_path_buf(),
            dim: state.dim,
            epochs,
            wal,
            state: AuditedRwLock::new(LockClass::Delta, state),
            blobs: AtomicPtr::new(Box::into_raw(Box::new(arena))),
            writer: Mutex::new(()),
            next_event_id: AtomicU64::new(next_event_id),
            tail_id: AtomicU64::new(tail_id),
            sealed_next_id: AtomicU64::new(next_event_id),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn arena<'g>(&self, _guard: &'g EpochGuard<'_>) -> &'g BlobArena {
        // SAFETY: arenas are retired through EBR.
        unsafe { &*self.blobs.load(Ordering::SeqCst) }
    }

    fn check_embedding(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding has {} components, trace dimension is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) || !kernels::is_normalized(v) {
            return Err(Error::invalid("embedding must be finite and unit-norm"));
        }
        Ok(())
    }

    /// Appends an event and returns its id. At most 16 nonzero atlas node
    /// ids may be referenced.
    pub fn append_event(&self, kind: EventKind, text: &[u8], embedding: &[f32], refs: &[u64]) -> Result<u64> {
        self.check_embedding(embedding)?;
        if refs.len() > MAX_REFS {
            return Err(Error::invalid(format!("{} refs exceed the limit of {MAX_REFS}", refs.len())));
        }
        if refs.contains(&0) {
            return Err(Error::invalid("node id 0 marks an empty ref slot and cannot be referenced"));
        }
        if text.len() > crate::blob_arena::MAX_BLOB_BYTES {
            return Err(Error::invalid("event text exceeds the blob size limit"));
        }
        let _writer = self.writer.lock();
        let id = self.next_event_id.load(Ordering::Acquire);
        let record = event::encode(id, kind, now_us(), self.tail_id.load(Ordering::Acquire), refs, text);
        let mut payload = Vec::with_capacity(EVENT_BYTES + 4 * self.dim + text.len());
        payload.extend_from_slice(&record);
        payload.extend_from_slice(bytemuck::cast_slice(embedding));
        payload.extend_from_slice(text);
        let (_, applied) = self
            .wal
            .append(RecordType::TraceAppend, &payload, &self.state, |st| self.apply_append(st, &payload))?;
        applied?;
        self.next_event_id.store(id + 1, Ordering::Release);
        self.tail_id.store(id, Ordering::Release);
        Ok(id)
    }

    fn apply_append(&self, st: &mut TraceState, payload: &[u8]) -> Result<()> {
        let emb_len = 4 * self.dim;
        if payload.len() < EVENT_BYTES + emb_len {
            return Err(Error::invalid("trace record payload is truncated"));
        }
        let (rec, rest) = payload.split_at(EVENT_BYTES);
        let (emb, text) = rest.split_at(emb_len);
        let guard = self.epochs.pin();
        let blob = self.arena(&guard).append(text)?;
        let mut rec: [u8; EVENT_BYTES] = rec.try_into().unwrap();
        event::set_blob(&mut rec, blob);
        let id = event::id_of(&rec);
        st.push(&rec, emb, true)?;
        if st.count > 1 {
            st.set_next(st.count - 2, id)?;
        }
        Ok(())
    }

    /// Marks an event deleted. Deleting an already deleted event is a no-op.
    pub fn tombstone_event(&self, id: u64) -> Result<()> {
        let _writer = self.writer.lock();
        let slot = {
            let st = self.state.read();
            let guard = self.epochs.pin();
            let Some(slot) = st.slot_of(&guard, id) else {
                // Issued ids that are gone were deleted and collected.
                if id >= 1 && id < self.next_event_id.load(Ordering::Acquire) {
                    return Ok(());
                }
                return Err(Error::NotFound(format!("trace event {id}")));
            };
            if st.is_tombstoned(&guard, slot) {
                return Ok(());
            }
            slot
        };
        let payload = tombstone_payload(TombstoneTarget::Trace, id);
        let (_, applied) = self
            .wal
            .append(RecordType::Tombstone, &payload, &self.state, |st| st.apply_tombstone(slot))?;
        applied?;
        Ok(())
    }

    pub fn get_event(&self, id: u64) -> Option<TraceEvent> {
        let st = self.state.read();
        let guard = self.epochs.pin();
        let slot = st.slot_of(&guard, id)?;
        event::decode(st.record(&guard, slot)).ok()
    }

    pub fn get_embedding(&self, id: u64) -> Option<Vec<f32>> {
        let st = self.state.read();
        let guard = self.epochs.pin();
        let slot = st.slot_of(&guard, id)?;
        Some(st.embedding(&guard, slot).to_vec())
    }

    /// Borrows a blob from the current arena for the guard's lifetime.
    pub fn read_blob<'g>(&self, guard: &'g EpochGuard<'_>, r: BlobRef) -> Result<&'g [u8]> {
        self.arena(guard).read(guard, r)
    }

    /// Copies out the full text of an event.
    pub fn read_text(&self, id: u64) -> Result<Vec<u8>> {
        let event = self.get_event(id).ok_or_else(|| Error::NotFound(format!("trace event {id}")))?;
        let guard = self.epochs.pin();
        Ok(self.read_blob(&guard, event.blob)?.to_vec())
    }

    /// Blob reads served by the current arena.
    pub fn blob_reads(&self) -> u64 {
        let guard = self.epochs.pin();
        self.arena(&guard).reads()
    }

    /// The `n` most recent live events, newest first, found by walking the
    /// `prev_id` chain from the tail. Only event records are read.
    pub fn get_recent(&self, n: usize) -> Vec<TraceEvent> {
        let mut out = Vec::with_capacity(n.min(1024));
        if n == 0 {
            return out;
        }
        let st = self.state.read();
        let guard = self.epochs.pin();
        let mut id = self.tail_id.load(Ordering::Acquire);
        let mut hint = st.count;
        while out.len() < n && id != 0 {
            // Chain order matches slot order, so the previous slot is the
            // usual answer.
            let slot = match hint.checked_sub(1) {
                Some(s) if event::id_of(st.record(&guard, s)) == id => s,
                _ => match st.slot_of(&guard, id) {
                    Some(s) => s,
                    None => break,
                },
            };
            let Ok(e) = event::decode(st.record(&guard, slot)) else { break };
            id = e.prev_id;
            hint = slot;
            if !e.tombstoned {
                out.push(e);
            }
        }
        out
    }

    /// Two-phase search: score every block centroid, keep the best
    /// `k_blocks`, then score the live events in those blocks.
    pub fn search(&self, query: &[f32], k_blocks: usize, top_n: usize) -> Result<TraceSearchResult> {
        self.check_embedding(query)?;
        if k_blocks == 0 {
            return Err(Error::invalid("at least one block must be selected"));
        }
        let st = self.state.read();
        let guard = self.epochs.pin();
        let mut result = TraceSearchResult {
            blocks: st.blocks.len() as u64,
            ..Default::default()
        };
        if st.count == 0 {
            return Ok(result);
        }
        let mut scored: Vec<(f32, usize)> = st
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (if b.live_count == 0 { f32::NEG_INFINITY } else { b.score(query) }, i))
            .collect();
        result.comparisons = scored.len() as u64;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut hits = Vec::new();
        for &(score, b) in scored.iter().take(k_blocks) {
            if score == f32::NEG_INFINITY {
                break;
            }
            let block = &st.blocks[b];
            result.blocks_scanned += 1;
            for slot in block.first_slot..block.first_slot + u64::from(block.count) {
                if st.is_tombstoned(&guard, slot) {
                    continue;
                }
                result.comparisons += 1;
                let s = kernels::dot_f32(query, st.embedding(&guard, slot));
                hits.push((event::id_of(st.record(&guard, slot)), s));
            }
        }
        result.hits = top(hits, top_n);
        Ok(result)
    }

    /// Exhaustive search over every live event.
    pub fn full_scan(&self, query: &[f32], top_n: usize) -> Result<TraceSearchResult> {
        self.check_embedding(query)?;
        let st = self.state.read();
        let guard = self.epochs.pin();
        let mut hits = Vec::with_capacity(st.live as usize);
        for slot in 0..st.count {
            if !st.is_tombstoned(&guard, slot) {
                hits.push((event::id_of(st.record(&guard, slot)), kernels::dot_f32(query, st.embedding(&guard, slot))));
            }
        }
        Ok(TraceSearchResult {
            comparisons: hits.len() as u64,
            blocks: st.blocks.len() as u64,
            blocks_scanned: st.blocks.len() as u64,
            hits: top(hits, top_n),
        })
    }

    /// Copies of the block index, for inspection.
    pub fn blocks(&self) -> Vec<TraceBlock> {
        self.state.read().blocks.clone()
    }

    /// Live member embeddings of block `index`.
    pub fn block_members(&self, index: usize) -> Vec<Vec<f32>> {
        let st = self.state.read();
        let guard = self.epochs.pin();
        let Some(b) = st.blocks.get(index) else { return Vec::new() };
        (b.first_slot..b.first_slot + u64::from(b.count))
            .filter(|&s| !st.is_tombstoned(&guard, s))
            .map(|s| st.embedding(&guard, s).to_vec())
            .collect()
    }

    pub fn stats(&self) -> TraceStats {
        let st = self.state.read();
        let guard = self.epochs.pin();
        TraceStats {
            generation: st.generation,
            event_count: st.count,
            live_count: st.live,
            block_count: st.blocks.len() as u64,
            blob_bytes: self.arena(&guard).used_bytes() - HEADER_BYTES,
            event_file_bytes: st.events.capacity(),
            embed_file_bytes: st.embeds.capacity(),
        }
    }

    pub fn next_event_id(&self) -> u64 {
        self.next_event_id.load(Ordering::Acquire)
    }

    // ---- compaction hooks ----

    pub(crate) fn lock_writer(&self) -> MutexGuard<'_, ()> {
        self.writer.lock()
    }

    /// Copies live events, their embeddings and their blobs into generation
    /// `generation`, relinking the time chain around deleted events.
    /// Callers hold the writer lock.
    pub(crate) fn build(&self, generation: u32) -> Result<TraceBuild> {
        let st = self.state.read();
        let guard = self.epochs.pin();
        let arena = self.arena(&guard);
        let live: Vec<u64> = (0..st.count).filter(|&s| !st.is_tombstoned(&guard, s)).collect();
        let refs: Vec<BlobRef> = live.iter().map(|&s| event::blob_of(st.record(&guard, s))).collect();
        let (next_arena, remap) = arena.gc_copy_live(&refs, self.dir.join(blob_file_name(generation)), generation)?;
        let mut next = match TraceState::create(&self.dir, generation, self.dim, &self.epochs) {
            Ok(n) => n,
            Err(e) => {
                next_arena.remove_on_drop();
                return Err(e);
            }
        };
        let result = (|| {
            let mut prev = 0u64;
            for (i, &slot) in live.iter().enumerate() {
                let mut rec: [u8; EVENT_BYTES] = st.record(&guard, slot).try_into().unwrap();
                let old_ref = event::blob_of(&rec);
                event::set_blob(&mut rec, remap[&old_ref]);
                le::put_u64(&mut rec, event::OFF_PREV, prev);
                let next_id = live.get(i + 1).map_or(0, |&s| event::id_of(st.record(&guard, s)));
                le::put_u64(&mut rec, event::OFF_NEXT, next_id);
                next.push(&rec, bytemuck::cast_slice(st.embedding(&guard, slot)), true)?;
                prev = event::id_of(&rec);
            }
            next.seal(self.next_event_id.load(Ordering::Acquire))?;
            Ok(prev)
        })();
        let tail_id = match result {
            Ok(t) => t,
            Err(e) => {
                next.remove_on_drop();
                next_arena.remove_on_drop();
                return Err(e);
            }
        };
        Ok(TraceBuild {
            events_copied: live.len() as u64,
            blobs_copied: remap.len() as u64,
            tail_id,
            next_event_id: self.next_event_id.load(Ordering::Acquire),
            state: next,
            arena: next_arena,
        })
    }

    /// Publishes a built generation. Constant work; `ops` counts the steps.
    // critical-section:begin trace-install
    pub(crate) fn install(&self, build: TraceBuild, ops: &mut u32) {
        let mut st = self.state.write();
        *ops += 1;
        let old = std::mem::replace(&mut *st, build.state);
        *ops += 1;
        old.remove_on_drop();
        self.epochs.retire(old);
        *ops += 1;
        let arena = Box::into_raw(Box::new(build.arena));
        let prev = self.blobs.swap(arena, Ordering::SeqCst);
        *ops += 1;
        // SAFETY: unreachable for new readers; EBR covers existing ones.
        let prev = unsafe { Box::from_raw(prev) };
        prev.remove_on_drop();
        self.epochs.retire(prev);
        *ops += 1;
        self.tail_id.store(build.tail_id, Ordering::Release);
        self.sealed_next_id.store(build.next_event_id, Ordering::Release);
        *ops += 1;
    }
    // critical-section:end trace-install

    /// Removes files of an abandoned build.
    pub(crate) fn discard(build: TraceBuild) {
        build.state.remove_on_drop();
        build.arena.remove_on_drop();
    }

    // ---- recovery ----

    pub(crate) fn replay_append(&self, payload: &[u8]) -> Result<bool> {
        if payload.len() < EVENT_BYTES {
            return Err(Error::invalid("trace record payload is truncated"));
        }
        let id = event::id_of(payload);
        if id < self.sealed_next_id.load(Ordering::Acquire) || id < self.next_event_id.load(Ordering::Acquire) {
            return Ok(false);
        }
        let mut st = self.state.write();
        self.apply_append(&mut st, payload)?;
        drop(st);
        self.next_event_id.store(id + 1, Ordering::Release);
        self.tail_id.store(id, Ordering::Release);
        Ok(true)
    }

    pub(crate) fn replay_tombstone(&self, id: u64) -> Result<bool> {
        let mut st = self.state.write();
        let slot = {
            let guard = self.epochs.pin();
            st.slot_of(&guard, id)
        };
        match slot {
            Some(slot) => st.apply_tombstone(slot),
            None => Ok(false),
        }
    }
}

impl Drop for Trace {
    fn drop(&mut self) {
        // SAFETY: no reader outlives the trace.
        drop(unsafe { Box::from_raw(*self.blobs.get_mut()) });
    }
}

fn top(mut hits: Vec<(u64, f32)>, n: usize) -> Vec<(u64, f32)> {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(n);
    hits
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as u64)
}
