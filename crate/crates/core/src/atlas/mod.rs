//! Hierarchical vector index.
//!
//! Sealed nodes live in a memory-mapped generation file laid out as a
//! B-ary tree (see [`layout`]). New nodes go to an in-memory delta buffer
//! through the write-ahead log and join the tree at the next compaction.
//! Queries descend the tree and then scan the delta.
//!
//! Readers pin an epoch, take the delta lock in shared mode and load the
//! current [`View`] (sealed generation plus frozen deltas). Freezing and
//! installing a generation each replace the view with one pointer swap.

mod build;
mod delta;
pub mod layout;
mod search;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};

pub use build::{hub_penalties, route, TreeShape};
pub(crate) use delta::Delta;
pub use layout::{node_stride, AtlasHeader, AtlasParams, NodeRef, Quantization};

use crate::error::{Error, Result};
use crate::kernels;
use crate::storage::{EpochGuard, EpochManager, GenerationFile, HEADER_BYTES};
use crate::sync::{AuditedRwLock, LockClass};
use crate::wal::{RecordType, Wal};
use layout::{Scorer, FLAG_TOMBSTONE};
use search::{Best, Counters, Tree};

pub fn atlas_file_name(generation: u32) -> String {
    format!("atlas_gen{generation}.bin")
}

/// Outcome of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub id: u64,
    /// Similarity at index precision.
    pub similarity: f32,
    /// Tree levels descended.
    pub hops: u32,
    /// Similarity evaluations, tree and delta together.
    pub comparisons: u64,
    /// Tree nodes whose children were scored.
    pub nodes_expanded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AtlasStats {
    pub generation: u32,
    /// Sealed plus buffered records, including tombstoned ones.
    pub node_count: u64,
    pub live_count: u64,
    pub depth: u64,
    pub slot_capacity: u64,
    pub file_bytes: u64,
    pub delta_nodes: u64,
    pub delta_bytes: u64,
}

/// A sealed, immutable-except-for-tombstones generation.
pub(crate) struct AtlasGeneration {
    file: GenerationFile,
    header: AtlasHeader,
    slots: HashMap<u64, u32>,
}

impl AtlasGeneration {
    fn from_file(file: GenerationFile, header: AtlasHeader) -> AtlasGeneration {
        let mut gen = AtlasGeneration {
            file,
            header,
            slots: HashMap::with_capacity(header.node_count as usize),
        };
        let guard = gen.file.epochs().clone();
        let guard = guard.pin();
        let ids: Vec<u64> = gen.tree(&guard).nodes().map(|n| n.id()).collect();
        gen.slots = ids.into_iter().enumerate().map(|(s, id)| (id, s as u32)).collect();
        gen
    }

    fn open(path: &Path, generation: u32, epochs: Arc<EpochManager>) -> Result<AtlasGeneration> {
        let file = GenerationFile::open(path, generation, epochs)?;
        let header = {
            let guard = file.epochs().pin();
            AtlasHeader::decode(file.slice(&guard, 0, HEADER_BYTES as usize), path)?
        };
        let need = header.params.file_bytes(header.node_count);
        if file.capacity() < need {
            return Err(Error::corrupt(path, format!("file holds {} bytes, need {need}", file.capacity())));
        }
        file.set_used(HEADER_BYTES + header.node_count * header.params.stride() as u64);
        Ok(AtlasGeneration::from_file(file, header))
    }

    fn tree<'g>(&'g self, guard: &'g EpochGuard<'_>) -> Tree<'g> {
        let (base, _) = self.file.raw(guard);
        // SAFETY: the header promises `node_count` records and the guard
        // keeps the mapping alive.
        unsafe { Tree::new(base, self.header.node_count, self.header.root_slot, &self.header.params) }
    }

    fn slot_of(&self, id: u64) -> Option<u32> {
        self.slots.get(&id).copied()
    }

    pub(crate) fn file(&self) -> &GenerationFile {
        &self.file
    }
}

/// What readers see besides the fresh delta.
struct View {
    gen: Arc<AtlasGeneration>,
    /// Deltas frozen by a compaction that has not been installed yet.
    frozen: Vec<Arc<Delta>>,
}

impl View {
    fn frozen_tombstone(&self, id: u64) -> bool {
        self.frozen.iter().any(|d| d.is_tombstoned(id))
    }
}

/// Source state captured by a freeze, consumed by a compaction build.
pub(crate) struct FrozenAtlas {
    gen: Arc<AtlasGeneration>,
    frozen: Vec<Arc<Delta>>,
    next_id: u64,
}

pub struct Atlas {
    params: AtlasParams,
    dir: PathBuf,
    epochs: Arc<EpochManager>,
    wal: Arc<Wal>,
    view: AtomicPtr<View>,
    fresh: AuditedRwLock<Delta>,
    writer: Mutex<()>,
    next_id: AtomicU64,
}

// SAFETY: `view` is only replaced by swapping in a new boxed View and
// retiring the old one through EBR.
unsafe impl Send for Atlas {}
unsafe impl Sync for Atlas {}

impl Atlas {
    /// Creates generation `generation` as an empty file in `dir`.
    pub(crate) fn create(
        dir: &Path,
        params: AtlasParams,
        generation: u32,
        epochs: Arc<EpochManager>,
        wal: Arc<Wal>,
    ) -> Result<Atlas> {
        let params = params.validated()?;
        let (file, header) =
            build::write_generation(&dir.join(atlas_file_name(generation)), &params, &[], generation, 1, epochs.clone())?;
        Ok(Atlas::assemble(dir, AtlasGeneration::from_file(file, header), epochs, wal))
    }

    pub(crate) fn open(dir: &Path, generation: u32, epochs: Arc<EpochManager>, wal: Arc<Wal>) -> Result<Atlas> {
        let gen = AtlasGeneration::open(&dir.join(atlas_file_name(generation)), generation, epochs.clone())?;
        Ok(Atlas::assemble(dir, gen, epochs, wal))
    }

    fn assemble(dir: &Path, gen: AtlasGeneration, epochs: Arc<EpochManager>, wal: Arc<Wal>) -> Atlas {
        let params = gen.header.params;
        let next_id = gen.header.next_id.max(1);
        let view = Box::new(View {
            gen: Arc::new(gen),
            frozen: Vec::new(),
        });
        Atlas {
            params,
            dir: dir.to_path_buf(),
            epochs,
            wal,
            view: AtomicPtr::new(Box::into_raw(view)),
            fresh: AuditedRwLock::new(LockClass::Delta, Delta::new(params)),
            writer: Mutex::new(()),
            next_id: AtomicU64::new(next_id),
        }
    }

    pub fn params(&self) -> &AtlasParams {
        &self.params
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn epochs(&self) -> &Arc<EpochManager> {
        &self.epochs
    }

    fn view<'g>(&self, _guard: &'g EpochGuard<'_>) -> &'g View {
        // SAFETY: views are retired through EBR, so the one loaded here
        // outlives the guard.
        unsafe { &*self.view.load(Ordering::SeqCst) }
    }

    fn check_vector(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.params.dim as usize {
            return Err(Error::invalid(format!(
                "vector has {} components, index dimension is {}",
                v.len(),
                self.params.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("vector has non-finite components"));
        }
        if !kernels::is_normalized(v) {
            return Err(Error::invalid(format!(
                "vector norm {} is not within {} of 1",
                kernels::norm(v),
                kernels::NORM_TOLERANCE
            )));
        }
        Ok(())
    }

    pub fn insert(&self, vector: &[f32]) -> Result<u64> {
        self.insert_with_metadata(vector, &[])
    }

    /// Logs and buffers a new node. `metadata` may use up to `M - 256` bytes.
    pub fn insert_with_metadata(&self, vector: &[f32], metadata: &[u8]) -> Result<u64> {
        self.check_vector(vector)?;
        if metadata.len() > self.params.extra_metadata_bytes() {
            return Err(Error::invalid(format!(
                "{} metadata bytes exceed the {} available per node",
                metadata.len(),
                self.params.extra_metadata_bytes()
            )));
        }
        let _writer = self.writer.lock();
        let id = self.next_id.load(Ordering::Acquire);
        let record = layout::encode_node(&self.params, id, vector, metadata);
        self.wal
            .append(RecordType::AtlasInsert, &record, &self.fresh, |d| d.push(&record))?;
        self.next_id.store(id + 1, Ordering::Release);
        Ok(id)
    }

    /// Marks a node deleted. Tombstoning an already deleted node is a no-op.
    pub fn tombstone(&self, id: u64) -> Result<()> {
        let _writer = self.writer.lock();
        match self.liveness(id) {
            // Ids are never reused, so an issued id that is gone was
            // deleted and compacted away.
            None if id >= 1 && id < self.next_id.load(Ordering::Acquire) => return Ok(()),
            None => return Err(Error::NotFound(format!("atlas node {id}"))),
            Some(false) => return Ok(()),
            Some(true) => {}
        }
        let payload = tombstone_payload(TombstoneTarget::Atlas, id);
        self.wal
            .append(RecordType::Tombstone, &payload, &self.fresh, |d| self.apply_tombstone(d, id))?;
        Ok(())
    }

    fn apply_tombstone(&self, fresh: &mut Delta, id: u64) {
        let guard = self.epochs.pin();
        let view = self.view(&guard);
        if let Some(slot) = view.gen.slot_of(id) {
            view.gen.tree(&guard).node(u64::from(slot)).flags_atomic().fetch_or(FLAG_TOMBSTONE, Ordering::AcqRel);
        }
        fresh.tombstone(id);
    }

    /// `Some(true)` for a live node, `Some(false)` for a tombstoned one and
    /// `None` for an unknown id.
    fn liveness(&self, id: u64) -> Option<bool> {
        let guard = self.epochs.pin();
        let fresh = self.fresh.read();
        let view = self.view(&guard);
        let dead = |flagged: bool| flagged || fresh.is_tombstoned(id) || view.frozen_tombstone(id);
        if let Some(i) = fresh.position(id) {
            return Some(!dead(fresh.record(i).is_tombstoned()));
        }
        for d in &view.frozen {
            if let Some(i) = d.position(id) {
                return Some(!dead(d.record(i).is_tombstoned()));
            }
        }
        let slot = view.gen.slot_of(id)?;
        Some(!dead(view.gen.tree(&guard).node(u64::from(slot)).is_tombstoned()))
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.liveness(id) == Some(true)
    }

    /// The stored vector of a live node, dequantized for INT8 indexes.
    pub fn get_vector(&self, id: u64) -> Option<Vec<f32>> {
        self.with_node(id, |n| n.to_f32())
    }

    pub fn get_metadata(&self, id: u64) -> Option<Vec<u8>> {
        self.with_node(id, |n| n.metadata().to_vec())
    }

    fn with_node<R>(&self, id: u64, f: impl FnOnce(NodeRef<'_>) -> R) -> Option<R> {
        if !self.is_live(id) {
            return None;
        }
        let guard = self.epochs.pin();
        let fresh = self.fresh.read();
        let view = self.view(&guard);
        if let Some(i) = fresh.position(id) {
            return Some(f(fresh.record(i)));
        }
        for d in &view.frozen {
            if let Some(i) = d.position(id) {
                return Some(f(d.record(i)));
            }
        }
        let slot = view.gen.slot_of(id)?;
        Some(f(view.gen.tree(&guard).node(u64::from(slot))))
    }

    /// Greedy descent to a leaf, then a scan of the delta buffers.
    pub fn query_greedy(&self, query: &[f32]) -> Result<SearchResult> {
        self.run_query(query, |tree, scorer, live, best, c| search::greedy(tree, scorer, &live, best, c))
    }

    /// Beam search of `width` nodes per level. With `csls`, the frontier is
    /// chosen by `2 * sim - hub_penalty`; reported similarities stay raw.
    pub fn query_beam(&self, query: &[f32], width: usize, csls: bool) -> Result<SearchResult> {
        if width == 0 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        self.run_query(query, |tree, scorer, live, best, c| {
            search::beam(tree, scorer, width, csls, &live, best, c)
        })
    }

    /// Exact search over every live node.
    pub fn flat_scan(&self, query: &[f32]) -> Result<SearchResult> {
        self.check_vector(query)?;
        let scorer = Scorer::new(&self.params, query);
        let guard = self.epochs.pin();
        let fresh = self.fresh.read();
        let view = self.view(&guard);
        let live = |n: NodeRef<'_>| is_live_in(n, &fresh, view);
        let (mut best, mut c) = (Best::default(), Counters::default());
        search::scan_live(view.gen.tree(&guard).nodes(), &scorer, &live, &mut best, &mut c);
        for d in &view.frozen {
            search::scan_live(d.records(), &scorer, &live, &mut best, &mut c);
        }
        search::scan_live(fresh.records(), &scorer, &live, &mut best, &mut c);
        finish(best, c)
    }

    fn run_query(
        &self,
        query: &[f32],
        descend: impl FnOnce(&Tree<'_>, &Scorer<'_>, &dyn Fn(NodeRef<'_>) -> bool, &mut Best, &mut Counters),
    ) -> Result<SearchResult> {
        self.check_vector(query)?;
        let scorer = Scorer::new(&self.params, query);
        let guard = self.epochs.pin();
        let fresh = self.fresh.read();
        let view = self.view(&guard);
        let live = |n: NodeRef<'_>| is_live_in(n, &fresh, view);
        let (mut best, mut c) = (Best::default(), Counters::default());
        descend(&view.gen.tree(&guard), &scorer, &live, &mut best, &mut c);
        for d in &view.frozen {
            search::scan(d.records(), &scorer, &live, &mut best, &mut c);
        }
        search::scan(fresh.records(), &scorer, &live, &mut best, &mut c);
        finish(best, c)
    }

    pub fn stats(&self) -> AtlasStats {
        let guard = self.epochs.pin();
        let fresh = self.fresh.read();
        let view = self.view(&guard);
        let live = |n: NodeRef<'_>| is_live_in(n, &fresh, view);
        let tree = view.gen.tree(&guard);
        let mut live_count = tree.nodes().filter(|n| live(*n)).count() as u64;
        let mut delta_nodes = fresh.len() as u64;
        let mut delta_bytes = fresh.bytes();
        live_count += fresh.records().filter(|n| live(*n)).count() as u64;
        for d in &view.frozen {
            live_count += d.records().filter(|n| live(*n)).count() as u64;
            delta_nodes += d.len() as u64;
            delta_bytes += d.bytes();
        }
        let h = view.gen.header;
        AtlasStats {
            generation: h.generation as u32,
            node_count: h.node_count + delta_nodes,
            live_count,
            depth: h.depth,
            slot_capacity: h.slot_capacity,
            file_bytes: view.gen.file.capacity(),
            delta_nodes,
            delta_bytes,
        }
    }

    pub fn generation(&self) -> u32 {
        let guard = self.epochs.pin();
        self.view(&guard).gen.header.generation as u32
    }

    pub fn next_id(&self) -> u64 {
        self.next_id.load(Ordering::Acquire)
    }

    /// Path of the current generation file.
    pub fn file_path(&self) -> PathBuf {
        let guard = self.epochs.pin();
        self.view(&guard).gen.file.path().to_path_buf()
    }

    // ---- compaction hooks ----

    pub(crate) fn lock_writer(&self) -> MutexGuard<'_, ()> {
        self.writer.lock()
    }

    /// Moves the fresh delta into the view as a frozen delta. Callers hold
    /// the writer lock. Constant work: `ops` counts the steps taken.
    // critical-section:begin atlas-freeze
    pub(crate) fn freeze(&self, ops: &mut u32) -> FrozenAtlas {
        let mut fresh = self.fresh.write();
        let frozen = Arc::new(fresh.take());
        *ops += 1;
        // SAFETY: the writer lock serializes view replacement.
        let old = unsafe { &*self.view.load(Ordering::SeqCst) };
        let gen = old.gen.clone();
        let mut list = old.frozen.clone();
        list.push(frozen);
        let view = Box::new(View {
            gen: gen.clone(),
            frozen: list.clone(),
        });
        *ops += 1;
        let prev = self.view.swap(Box::into_raw(view), Ordering::SeqCst);
        *ops += 1;
        // SAFETY: unreachable for new readers; EBR covers existing ones.
        self.epochs.retire(unsafe { Box::from_raw(prev) });
        *ops += 1;
        drop(fresh);
        FrozenAtlas {
            gen,
            frozen: list,
            next_id: self.next_id.load(Ordering::Acquire),
        }
    }
    // critical-section:end atlas-freeze

    /// Writes the live contents of a frozen snapshot as generation
    /// `generation`. Runs off the critical path.
    pub(crate) fn build(&self, src: &FrozenAtlas, generation: u32) -> Result<(AtlasGeneration, u64)> {
        let guard = self.epochs.pin();
        let tree = src.gen.tree(&guard);
        let dead = |n: NodeRef<'_>| n.is_tombstoned() || src.frozen.iter().any(|d| d.is_tombstoned(n.id()));
        let mut nodes: Vec<NodeRef<'_>> = tree.nodes().filter(|n| !dead(*n)).collect();
        for d in &src.frozen {
            nodes.extend(d.records().filter(|n| !dead(*n)));
        }
        let path = self.dir.join(atlas_file_name(generation));
        let (file, header) = build::write_generation(
            &path,
            &self.params,
            &nodes,
            generation,
            src.next_id,
            self.epochs.clone(),
        )?;
        let copied = nodes.len() as u64;
        Ok((AtlasGeneration::from_file(file, header), copied))
    }

    /// Publishes a built generation and drops the frozen deltas it absorbed.
    /// The previous generation file is deleted once no reader can see it.
    // critical-section:begin atlas-install
    pub(crate) fn install(&self, gen: AtlasGeneration, ops: &mut u32) {
        let gen = Arc::new(gen);
        *ops += 1;
        // SAFETY: compaction holds exclusive rights to replace the view here.
        let old = unsafe { &*self.view.load(Ordering::SeqCst) };
        old.gen.file.remove_on_drop();
        *ops += 1;
        let view = Box::new(View {
            gen,
            frozen: Vec::new(),
        });
        *ops += 1;
        let prev = self.view.swap(Box::into_raw(view), Ordering::SeqCst);
        *ops += 1;
        // SAFETY: as in `freeze`.
        self.epochs.retire(unsafe { Box::from_raw(prev) });
        *ops += 1;
    }
    // critical-section:end atlas-install

    pub(crate) fn generation_handle(&self) -> Arc<AtlasGeneration> {
        let guard = self.epochs.pin();
        self.view(&guard).gen.clone()
    }

    // ---- recovery ----

    /// Re-applies a logged insert. Records already sealed in the current
    /// generation, or already buffered, are skipped.
    pub(crate) fn replay_insert(&self, payload: &[u8]) -> Result<bool> {
        if payload.len() != self.params.stride() {
            return Err(Error::invalid(format!(
                "logged node record is {} bytes, stride is {}",
                payload.len(),
                self.params.stride()
            )));
        }
        let id = u64::from_le_bytes(payload[..8].try_into().unwrap());
        let sealed_next = self.generation_handle().header.next_id;
        let mut fresh = self.fresh.write();
        if id < sealed_next || fresh.contains(id) {
            return Ok(false);
        }
        fresh.push(payload);
        drop(fresh);
        self.next_id.fetch_max(id + 1, Ordering::AcqRel);
        Ok(true)
    }

    pub(crate) fn replay_tombstone(&self, id: u64) -> bool {
        if self.liveness(id).is_none() {
            return false;
        }
        let mut fresh = self.fresh.write();
        self.apply_tombstone(&mut fresh, id);
        true
    }
}

impl Drop for Atlas {
    fn drop(&mut self) {
        // SAFETY: no reader can outlive the atlas.
        drop(unsafe { Box::from_raw(*self.view.get_mut()) });
    }
}

fn is_live_in(n: NodeRef<'_>, fresh: &Delta, view: &View) -> bool {
    if n.is_tombstoned() {
        return false;
    }
    let id = n.id();
    !fresh.is_tombstoned(id) && !view.frozen_tombstone(id)
}

fn finish(best: Best, c: Counters) -> Result<SearchResult> {
    let (id, similarity) = best.hit.ok_or_else(|| Error::NotFound("no live nodes in the index".into()))?;
    Ok(SearchResult {
        id,
        similarity,
        hops: c.hops,
        comparisons: c.comparisons,
        nodes_expanded: c.expanded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TombstoneTarget {
    Atlas = 0,
    Trace = 1,
}

pub(crate) fn tombstone_payload(target: TombstoneTarget, id: u64) -> [u8; 16] {
    let mut p = [0u8; 16];
    p[0] = target as u8;
    p[8..].copy_from_slice(&id.to_le_bytes());
    p
}

pub(crate) fn parse_tombstone(payload: &[u8]) -> Result<(TombstoneTarget, u64)> {
    if payload.len() != 16 {
        return Err(Error::invalid(format!("tombstone record is {} bytes, expected 16", payload.len())));
    }
    let target = match payload[0] {
        0 => TombstoneTarget::Atlas,
        1 => TombstoneTarget::Trace,
        t => return Err(Error::invalid(format!("unknown tombstone target {t}"))),
    };
    Ok((target, u64::from_le_bytes(payload[8..].try_into().unwrap())))
}
