//! A database directory: atlas, trace, blob arena, log and cache together.
//!
//! ```text
//! MANIFEST                      format, current generation, log sequence
//! aeon.wal                      write-ahead log
//! atlas_gen{N}.bin              sealed atlas
//! trace_gen{N}.bin              event records
//! trace_embed_gen{N}.bin        event embeddings
//! trace_blobs_gen{N}.bin        event text
//! ```
//!
//! Opening a directory removes files of any other generation, then replays
//! the log on top of the sealed generation named by the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::atlas::{parse_tombstone, Atlas, AtlasParams, AtlasStats, Quantization, TombstoneTarget};
use crate::compaction::{self, CompactionStats};
use crate::error::{Error, IoContext, Result};
use crate::slb::{Slb, SlbConfig, SlbStats, SlbVector, DEFAULT_HIT_THRESHOLD};
use crate::storage::EpochManager;
use crate::trace::{Trace, TraceStats};
use crate::wal::{self, RecordType, ReplayOutcome, Wal};

pub const MANIFEST_FILE: &str = "MANIFEST";
pub const WAL_FILE: &str = "aeon.wal";
const FORMAT: &str = "aeon-1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub wal_enabled: bool,
    pub slb_hit_threshold: f32,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            wal_enabled: true,
            slb_hit_threshold: DEFAULT_HIT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub atlas: AtlasParams,
    /// Dimension of trace event embeddings.
    pub trace_dim: u32,
    pub options: EngineOptions,
}

impl EngineConfig {
    /// Defaults: 256 metadata bytes, branching 64, trace embeddings of the
    /// same dimension, log enabled, cache threshold 0.90.
    pub fn new(dim: u32, quantization: Quantization) -> Result<EngineConfig> {
        Ok(EngineConfig {
            atlas: AtlasParams::new(dim, quantization)?,
            trace_dim: dim,
            options: EngineOptions::default(),
        })
    }

    pub fn with_wal(mut self, enabled: bool) -> Self {
        self.options.wal_enabled = enabled;
        self
    }

    pub fn with_trace_dim(mut self, dim: u32) -> Self {
        self.trace_dim = dim;
        self
    }

    pub fn with_hit_threshold(mut self, tau: f32) -> Self {
        self.options.slb_hit_threshold = tau;
        self
    }
}

/// Result of [`Engine::query_cached`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CachedQuery {
    pub node_id: u64,
    pub hit: bool,
    /// Cache comparisons plus, on a miss, tree comparisons.
    pub comparisons: u64,
}

/// Duration and step count of one freeze section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeProbe {
    pub duration: Duration,
    pub ops: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineStats {
    pub generation: u32,
    pub atlas: AtlasStats,
    pub trace: TraceStats,
    pub slb: SlbStats,
    pub wal_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Manifest {
    pub generation: u32,
    pub wal_sequence: u32,
}

pub struct Engine {
    pub(crate) dir: PathBuf,
    pub(crate) epochs: Arc<EpochManager>,
    pub(crate) wal: Arc<Wal>,
    pub(crate) atlas: Atlas,
    pub(crate) trace: Trace,
    slb: Slb,
    pub(crate) generation: AtomicU32,
    pub(crate) compaction: Mutex<()>,
    recovery: ReplayOutcome,
}

impl Engine {
    /// Creates a new database in `dir` (created if missing). Fails with
    /// [`Error::AlreadyExists`] if a database is already there.
    pub fn create(dir: impl AsRef<Path>, config: EngineConfig) -> Result<Engine> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.exists() {
            return Err(Error::AlreadyExists(manifest));
        }
        remove_stray_files(dir, None)?;
        let _ = fs::remove_file(dir.join(WAL_FILE));
        let epochs = Arc::new(EpochManager::new());
        let wal = Arc::new(Wal::open(dir.join(WAL_FILE), 1, config.options.wal_enabled)?);
        let atlas = Atlas::create(dir, config.atlas, 1, epochs.clone(), wal.clone())?;
        let trace = Trace::create(dir, config.trace_dim, 1, epochs.clone(), wal.clone())?;
        write_manifest(
            dir,
            Manifest {
                generation: 1,
                wal_sequence: 1,
            },
        )?;
        Engine::assemble(dir, epochs, wal, atlas, trace, 1, config.options, ReplayOutcome::default())
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Engine> {
        Engine::open_with(dir, EngineOptions::default())
    }

    /// Opens an existing database and replays its log.
    pub fn open_with(dir: impl AsRef<Path>, options: EngineOptions) -> Result<Engine> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        remove_stray_files(dir, Some(manifest.generation))?;
        let epochs = Arc::new(EpochManager::new());
        let wal_path = dir.join(WAL_FILE);
        let wal = Arc::new(Wal::open(&wal_path, manifest.wal_sequence, options.wal_enabled)?);
        let atlas = Atlas::open(dir, manifest.generation, epochs.clone(), wal.clone())?;
        let trace = Trace::open(dir, manifest.generation, epochs.clone(), wal.clone())?;
        let outcome = wal::replay(&wal_path, |entry| {
            match entry.record_type {
                RecordType::AtlasInsert => {
                    atlas.replay_insert(entry.payload)?;
                }
                RecordType::TraceAppend => {
                    trace.replay_append(entry.payload)?;
                }
                RecordType::Tombstone => match parse_tombstone(entry.payload)? {
                    (TombstoneTarget::Atlas, id) => {
                        atlas.replay_tombstone(id);
                    }
                    (TombstoneTarget::Trace, id) => {
                        trace.replay_tombstone(id)?;
                    }
                },
            }
            Ok(())
        })?;
        wal.reload(outcome.last_sequence.map_or(manifest.wal_sequence, |s| s.wrapping_add(1)))?;
        if outcome.records_applied > 0 || outcome.torn_bytes_discarded > 0 {
            log::info!(
                "replayed {} log records, discarded {} torn bytes",
                outcome.records_applied,
                outcome.torn_bytes_discarded
            );
        }
        Engine::assemble(dir, epochs, wal, atlas, trace, manifest.generation, options, outcome)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        dir: &Path,
        epochs: Arc<EpochManager>,
        wal: Arc<Wal>,
        atlas: Atlas,
        trace: Trace,
        generation: u32,
        options: EngineOptions,
        recovery: ReplayOutcome,
    ) -> Result<Engine> {
        let slb = Slb::new(SlbConfig::new(atlas.params().dim as usize).with_hit_threshold(options.slb_hit_threshold))?;
        Ok(Engine {
            dir: dir.to_path_buf(),
            epochs,
            wal,
            atlas,
            trace,
            slb,
            generation: AtomicU32::new(generation),
            compaction: Mutex::new(()),
            recovery,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn atlas(&self) -> &Atlas {
        &self.atlas
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn slb(&self) -> &Slb {
        &self.slb
    }

    pub fn wal(&self) -> &Wal {
        &self.wal
    }

    pub fn epochs(&self) -> &Arc<EpochManager> {
        &self.epochs
    }

    pub fn generation(&self) -> u32 {
        self.generation.load(Ordering::Acquire)
    }

    /// What the log replay did when this engine was opened.
    pub fn recovery(&self) -> ReplayOutcome {
        self.recovery
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            generation: self.generation(),
            atlas: self.atlas.stats(),
            trace: self.trace.stats(),
            slb: self.slb.stats(),
            wal_bytes: self.wal.len(),
        }
    }

    /// Cache-first nearest-node lookup. A miss runs a greedy query and
    /// caches the query vector under the answer's id.
    pub fn query_cached(&self, session_id: &str, query: &[f32]) -> Result<CachedQuery> {
        let cached = self.slb.lookup_validated(session_id, query, |id| self.atlas.is_live(id))?;
        if let Some(node_id) = cached.node_id() {
            return Ok(CachedQuery {
                node_id,
                hit: true,
                comparisons: u64::from(cached.comparisons()),
            });
        }
        let r = self.atlas.query_greedy(query)?;
        self.slb.insert(session_id, SlbVector::Fp32(query), r.id)?;
        Ok(CachedQuery {
            node_id: r.id,
            hit: false,
            comparisons: u64::from(cached.comparisons()) + r.comparisons,
        })
    }

    /// Runs a full shadow compaction into the next generation.
    pub fn compact(&self) -> Result<CompactionStats> {
        compaction::compact(self, compaction::Fault::None)
    }

    /// Compaction whose copy phase fails after writing its files, for
    /// exercising the abort path.
    #[doc(hidden)]
    pub fn compact_with_injected_failure(&self) -> Result<CompactionStats> {
        compaction::compact(self, compaction::Fault::AfterCopy)
    }

    /// Runs only the freeze section of a compaction and measures it. The
    /// frozen delta stays visible and is absorbed by the next compaction.
    pub fn freeze_window_probe(&self) -> FreezeProbe {
        compaction::freeze_probe(self)
    }

    /// Writes the manifest atomically.
    pub(crate) fn write_manifest(&self, m: Manifest) -> Result<()> {
        write_manifest(&self.dir, m)
    }
}

pub(crate) fn write_manifest(dir: &Path, m: Manifest) -> Result<()> {
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let body = format!("format={FORMAT}\ngeneration={}\nwal_sequence={}\n", m.generation, m.wal_sequence);
    {
        let mut f = fs::File::create(&tmp).io_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(body.as_bytes())
            .and_then(|_| f.sync_all())
            .io_context(|| format!("writing {}", tmp.display()))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &path).io_context(|| format!("renaming {} into place", tmp.display()))?;
    wal::sync_parent(&path)
}

pub(crate) fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("no database at {}", dir.display())))
        }
        Err(e) => return Err(Error::storage(format!("reading {}", path.display()), e)),
    };
    let (mut format, mut generation, mut wal_sequence) = (None, None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::corrupt(&path, format!("malformed line {line:?}")))?;
        match k.trim() {
            "format" => format = Some(v.trim().to_string()),
            "generation" => generation = v.trim().parse::<u32>().ok(),
            "wal_sequence" => wal_sequence = v.trim().parse::<u32>().ok(),
            _ => {}
        }
    }
    if format.as_deref() != Some(FORMAT) {
        return Err(Error::corrupt(&path, format!("unsupported format {format:?}")));
    }
    match (generation, wal_sequence) {
        (Some(generation), Some(wal_sequence)) if generation > 0 => Ok(Manifest {
            generation,
            wal_sequence,
        }),
        _ => Err(Error::corrupt(&path, "missing or invalid generation or wal_sequence")),
    }
}

/// Generation number encoded in a data file name, if it is one.
pub(crate) fn generation_of(name: &str) -> Option<u32> {
    let stem = name.strip_suffix(".bin")?;
    ["atlas_gen", "trace_embed_gen", "trace_blobs_gen", "trace_gen"]
        .iter()
        .find_map(|p| stem.strip_prefix(p))
        .and_then(|n| n.parse().ok())
}

/// Deletes data files of generations other than `keep` and leftover
/// temporary files.
pub(crate) fn remove_stray_files(dir: &Path, keep: Option<u32>) -> Result<()> {
    let entries = fs::read_dir(dir).io_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let entry = entry.io_context(|| format!("listing {}", dir.display()))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let stray = name.ends_with(".tmp") || generation_of(name).is_some_and(|g| Some(g) != keep);
        if stray {
            log::info!("removing stray file {name}");
            fs::remove_file(entry.path()).io_context(|| format!("removing {name}"))?;
        }
    }
    Ok(())
}
