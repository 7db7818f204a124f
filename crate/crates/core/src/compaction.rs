//! Shadow compaction into the next generation.
//!
//! 1. Freeze: under the writer locks, move the fresh atlas delta aside and
//!    note the log position. Constant work.
//! 2. Copy: on a background thread, write the live atlas nodes (re-routed,
//!    with fresh hub penalties), the live trace events and their blobs into
//!    generation N+1, then point the manifest at it. Readers and atlas
//!    writers carry on meanwhile.
//! 3. Swap: publish the new generation handles. Constant work.
//! 4. Cleanup: retire the old files through EBR and drop the log prefix
//!    that generation N+1 now covers.
//!
//! If step 2 fails, its files are deleted, generation N stays current and
//! the log is left alone.

use std::time::{Duration, Instant};

use crate::atlas::atlas_file_name;
use crate::blob_arena::blob_file_name;
use crate::engine::{Engine, FreezeProbe, Manifest};
use crate::error::{Error, Result};
use crate::trace::{embed_file_name, trace_file_name, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompactionStats {
    pub generation: u32,
    pub freeze_duration: Duration,
    pub copy_duration: Duration,
    pub swap_duration: Duration,
    /// Steps taken inside the freeze section.
    pub freeze_ops: u32,
    /// Steps taken inside the swap section.
    pub swap_ops: u32,
    pub nodes_copied: u64,
    pub events_copied: u64,
    pub blobs_copied: u64,
    pub bytes_reclaimed: u64,
    pub wal_bytes_discarded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Fault {
    None,
    AfterCopy,
}

pub(crate) fn compact(engine: &Engine, fault: Fault) -> Result<CompactionStats> {
    let _one_at_a_time = engine.compaction.lock();
    let atlas = &engine.atlas;
    let trace = &engine.trace;
    let current = engine.generation();
    let next = current + 1;
    let mut stats = CompactionStats {
        generation: next,
        ..Default::default()
    };
    let old_bytes = file_bytes(engine, current);

    // Trace appends wait for the whole compaction.
    let trace_writer = trace.lock_writer();

    // Step 1.
    let t = Instant::now();
    // critical-section:begin compaction-freeze
    let atlas_writer = atlas.lock_writer();
    let frozen = atlas.freeze(&mut stats.freeze_ops);
    let boundary = engine.wal.len();
    let wal_sequence = engine.wal.next_sequence();
    stats.freeze_ops += 2;
    drop(atlas_writer);
    // critical-section:end compaction-freeze
    stats.freeze_duration = t.elapsed();

    // Step 2.
    let t = Instant::now();
    let built = std::thread::scope(|s| {
        s.spawn(|| -> Result<_> {
            let (gen, nodes) = atlas.build(&frozen, next)?;
            let events = match trace.build(next) {
                Ok(b) => b,
                Err(e) => {
                    gen.file().remove_on_drop();
                    return Err(e);
                }
            };
            let sealed = match fault {
                Fault::None => engine.write_manifest(Manifest {
                    generation: next,
                    wal_sequence,
                }),
                Fault::AfterCopy => Err(Error::storage(
                    "injected copy failure",
                    std::io::Error::other("injected"),
                )),
            };
            if let Err(e) = sealed {
                gen.file().remove_on_drop();
                Trace::discard(events);
                return Err(e);
            }
            Ok((gen, nodes, events))
        })
        .join()
        .unwrap_or_else(|panic| std::panic::resume_unwind(panic))
    });
    stats.copy_duration = t.elapsed();
    let (gen, nodes, events) = match built {
        Ok(b) => b,
        Err(e) => {
            log::warn!("compaction into generation {next} aborted: {e}");
            return Err(e);
        }
    };
    stats.nodes_copied = nodes;
    stats.events_copied = events.events_copied;
    stats.blobs_copied = events.blobs_copied;

    // Step 3.
    let t = Instant::now();
    // critical-section:begin compaction-swap
    let atlas_writer = atlas.lock_writer();
    atlas.install(gen, &mut stats.swap_ops);
    trace.install(events, &mut stats.swap_ops);
    engine.generation.store(next, std::sync::atomic::Ordering::Release);
    stats.swap_ops += 1;
    drop(atlas_writer);
    // critical-section:end compaction-swap
    stats.swap_duration = t.elapsed();
    drop(trace_writer);
    drop(frozen);

    // Step 4.
    let epochs = &engine.epochs;
    epochs.try_advance();
    epochs.try_advance();
    epochs.try_reclaim();
    let wal_before = engine.wal.len();
    engine.wal.discard_prefix(boundary)?;
    stats.wal_bytes_discarded = wal_before - engine.wal.len();
    stats.bytes_reclaimed = old_bytes.saturating_sub(file_bytes(engine, next));
    Ok(stats)
}

pub(crate) fn freeze_probe(engine: &Engine) -> FreezeProbe {
    let _one_at_a_time = engine.compaction.lock();
    let mut ops = 0;
    let t = Instant::now();
    let atlas_writer = engine.atlas.lock_writer();
    let _frozen = engine.atlas.freeze(&mut ops);
    drop(atlas_writer);
    FreezeProbe {
        duration: t.elapsed(),
        ops,
    }
}

/// Bytes on disk of one generation's data files.
fn file_bytes(engine: &Engine, generation: u32) -> u64 {
    [
        atlas_file_name(generation),
        trace_file_name(generation),
        embed_file_name(generation),
        blob_file_name(generation),
    ]
    .iter()
    .filter_map(|name| std::fs::metadata(engine.dir.join(name)).ok())
    .map(|m| m.len())
    .sum()
}

#[cfg(test)]
mod tests {
    /// Extracts the text of every marked critical section.
    fn sections(src: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut current: Option<(String, String)> = None;
        for line in src.lines() {
            let t = line.trim();
            if let Some(name) = t.strip_prefix("// critical-section:begin ") {
                assert!(current.is_none(), "nested section {name}");
                current = Some((name.to_string(), String::new()));
            } else if let Some(name) = t.strip_prefix("// critical-section:end ") {
                let (open, body) = current.take().expect("end without begin");
                assert_eq!(open, name);
                out.push((open, body));
            } else if t.starts_with("//") {
                continue;
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(t);
                body.push('\n');
            }
        }
        assert!(current.is_none(), "unterminated section");
        out
    }

    #[test]
    fn critical_sections_contain_no_per_item_work() {
        let files = [
            include_str!("compaction.rs"),
            include_str!("atlas/mod.rs"),
            include_str!("trace/mod.rs"),
        ];
        let all: Vec<(String, String)> = files.iter().flat_map(|f| sections(f)).collect();
        let names: Vec<&str> = all.iter().map(|(n, _)| n.as_str()).collect();
        for expected in ["compaction-freeze", "compaction-swap", "atlas-freeze", "atlas-install", "trace-install"] {
            assert!(names.contains(&expected), "missing section {expected}");
        }
        let banned = ["for ", "while ", "loop ", "loop{", ".iter(", ".for_each(", ".map(", ".filter(", ".collect("];
        for (name, body) in &all {
            for b in banned {
                assert!(!body.contains(b), "section {name} contains `{b}`");
            }
        }
    }
}
