//! Crash injection.
//!
//! A child process appends to an engine as fast as it can and acknowledges
//! each completed step on stdout. The parent kills it at a random moment,
//! reopens the engine and checks it against the deterministic workload:
//!
//! * step `i` inserts node `i` with vector `expected_vector(seed, i)`, then
//!   appends event `i` with text `event_text(i)` and the same embedding,
//!   then, when `i % 10 == 0`, deletes node `i - 5`;
//! * every acknowledged step survives, and nothing beyond the step in
//!   flight appears;
//! * nodes and events form gap-free id ranges with the right contents, and
//!   the index answers exact self-queries.
//!
//! Every `COMPACT_EVERY` steps the child also compacts, so kills land in
//! compactions too. A bit-flip round corrupts one payload bit in the log
//! after the kill and expects replay to cut the log there.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use aeon_core::atlas::Quantization;
use aeon_core::engine::WAL_FILE;
use aeon_core::trace::EventKind;
use aeon_core::wal::WAL_HEADER_BYTES;
use aeon_core::{Engine, EngineConfig};
use anyhow::{bail, Context, Result};
use rand::Rng;

use crate::dataset::{random_unit, rng};
use crate::report::Record;

pub const COMPACT_EVERY: u64 = 250;
const DELETE_EVERY: u64 = 10;
const DELETE_LAG: u64 = 5;

pub fn expected_vector(seed: u64, id: u64, dim: usize) -> Vec<f32> {
    random_unit(&mut rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id), dim)
}

pub fn event_text(id: u64) -> Vec<u8> {
    format!("step {id}").into_bytes()
}

fn deleted_by(id: u64) -> Option<u64> {
    (id.is_multiple_of(DELETE_EVERY) && id > DELETE_LAG).then(|| id - DELETE_LAG)
}

fn open_or_create(dir: &Path, dim: usize) -> Result<Engine> {
    if dir.join(aeon_core::engine::MANIFEST_FILE).exists() {
        Ok(Engine::open(dir)?)
    } else {
        std::fs::create_dir_all(dir)?;
        Ok(Engine::create(dir, EngineConfig::new(dim as u32, Quantization::Fp32)?)?)
    }
}

/// Body of the child process. Runs until killed or `limit` steps are done.
pub fn crash_child(dir: &Path, seed: u64, dim: usize, limit: Option<u64>) -> Result<()> {
    let engine = open_or_create(dir, dim)?;
    let (atlas, trace) = (engine.atlas(), engine.trace());
    // Finish a step the previous child was killed in the middle of.
    let last = atlas.next_id() - 1;
    if last > 0 {
        if trace.next_event_id() == last {
            trace.append_event(EventKind::User, &event_text(last), &expected_vector(seed, last, dim), &[last])?;
        }
        if let Some(victim) = deleted_by(last) {
            atlas.tombstone(victim)?;
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut done = 0u64;
    while limit.is_none_or(|l| done < l) {
        let id = atlas.next_id();
        let v = expected_vector(seed, id, dim);
        let got = atlas.insert(&v)?;
        if got != id {
            bail!("insert returned id {got}, expected {id}");
        }
        trace.append_event(EventKind::User, &event_text(id), &v, &[id])?;
        if let Some(victim) = deleted_by(id) {
            atlas.tombstone(victim)?;
        }
        writeln!(out, "{id}")?;
        out.flush()?;
        if id % COMPACT_EVERY == 0 {
            engine.compact()?;
        }
        done += 1;
    }
    Ok(())
}

/// Result of checking a reopened engine.
#[derive(Debug, Clone, Default)]
pub struct Verification {
    pub nodes: u64,
    pub events: u64,
    pub torn_bytes: u64,
    pub violations: Vec<String>,
}

/// Checks the engine in `dir` against the workload. `acked` is the highest
/// acknowledged step, `floor` the step count already verified durable.
pub fn verify(dir: &Path, seed: u64, dim: usize, acked: u64, floor: u64, strict: bool) -> Verification {
    let mut v = Verification::default();
    let engine = match Engine::open(dir) {
        Ok(e) => e,
        Err(e) => {
            v.violations.push(format!("reopen failed: {e}"));
            return v;
        }
    };
    let (atlas, trace) = (engine.atlas(), engine.trace());
    let n = atlas.next_id() - 1;
    let e = trace.next_event_id() - 1;
    v.nodes = n;
    v.events = e;
    v.torn_bytes = engine.recovery().torn_bytes_discarded;
    let mut fail = |msg: String| v.violations.push(msg);

    if strict && n < acked.max(floor) {
        fail(format!("acknowledged step {} lost: only {n} nodes", acked.max(floor)));
    }
    if strict && n > acked.max(floor) + 1 {
        fail(format!("{n} nodes but only {acked} steps acknowledged"));
    }
    if e > n || e + 1 < n {
        fail(format!("{e} events for {n} nodes"));
    }
    let mut live = 0u64;
    for id in 1..=n {
        let dead = (id + DELETE_LAG).is_multiple_of(DELETE_EVERY) && id + DELETE_LAG <= n;
        let dead_for_sure = dead && id + DELETE_LAG < n;
        match atlas.get_vector(id) {
            Some(got) => {
                live += 1;
                if dead_for_sure {
                    fail(format!("node {id} should have been deleted"));
                } else if got != expected_vector(seed, id, dim) {
                    fail(format!("node {id} has the wrong vector"));
                }
            }
            None if !dead => fail(format!("node {id} is missing")),
            None => {}
        }
    }
    if atlas.stats().live_count != live {
        fail(format!("live count {} but {live} readable nodes", atlas.stats().live_count));
    }
    for id in 1..=e {
        match trace.read_text(id) {
            Ok(t) if t == event_text(id) => {}
            Ok(_) => fail(format!("event {id} has the wrong text")),
            Err(err) => fail(format!("event {id} unreadable: {err}")),
        }
        if trace.get_embedding(id) != Some(expected_vector(seed, id, dim)) {
            fail(format!("event {id} has the wrong embedding"));
        }
    }
    let mut r = rng(seed ^ n);
    for _ in 0..20.min(n) {
        let id = r.gen_range(1..=n);
        if atlas.is_live(id) {
            match atlas.flat_scan(&expected_vector(seed, id, dim)) {
                Ok(s) if s.id == id => {}
                other => fail(format!("self-query for node {id} returned {other:?}")),
            }
        }
    }
    v
}

/// Flips one random bit inside the payload of a record from the back half
/// of the log. Returns false when the log has too few records.
pub fn flip_payload_bit(dir: &Path, seed: u64) -> Result<bool> {
    let path = dir.join(WAL_FILE);
    let mut bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(e).context("reading log"),
    };
    let mut payloads = Vec::new();
    let mut off = 0usize;
    while off + WAL_HEADER_BYTES <= bytes.len() {
        let len = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let start = off + WAL_HEADER_BYTES;
        if len == 0 || start + len > bytes.len() {
            break;
        }
        payloads.push((start, len));
        off = start + len;
    }
    if payloads.len() < 2 {
        return Ok(false);
    }
    let mut r = rng(seed);
    let (start, len) = payloads[r.gen_range(payloads.len() / 2..payloads.len())];
    let byte = start + r.gen_range(0..len);
    bytes[byte] ^= 1 << r.gen_range(0..8);
    std::fs::write(&path, &bytes).context("writing corrupted log")?;
    Ok(true)
}

#[derive(Debug, Clone)]
pub struct CrashParams {
    pub iterations: usize,
    pub seed: u64,
    pub dim: usize,
    /// Every this many rounds, corrupt the log before reopening.
    pub bit_flip_every: Option<usize>,
    /// Upper bound on acknowledged steps per round before the kill.
    pub max_steps_per_round: u64,
}

impl CrashParams {
    pub fn new(iterations: usize) -> CrashParams {
        CrashParams { iterations, seed: 7, dim: 32, bit_flip_every: Some(5), max_steps_per_round: 400 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CrashOutcome {
    pub iterations: usize,
    pub acked: u64,
    pub final_nodes: u64,
    pub final_events: u64,
    pub rounds_with_torn_tail: u64,
    pub bit_flip_rounds: u64,
    /// Bit-flip rounds in which replay cut the log.
    pub bit_flips_detected: u64,
    pub violations: Vec<String>,
}

impl CrashOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.bit_flips_detected == self.bit_flip_rounds
    }

    pub fn record(&self) -> Record {
        Record::counters_only("crash_test")
            .param("iterations", self.iterations)
            .timing("acknowledged_steps", self.acked)
            .timing("final_nodes", self.final_nodes)
            .timing("final_events", self.final_events)
            .timing("rounds_with_torn_tail", self.rounds_with_torn_tail)
            .counter("bit_flip_rounds", self.bit_flip_rounds)
            .counter("bit_flips_detected", self.bit_flips_detected)
            .counter("violations", self.violations.len() as u64)
    }
}

/// Runs `iterations` kill-and-verify rounds against `dir` using the child
/// binary `exe`, which must accept the hidden `crash-child` subcommand.
pub fn run(exe: &Path, dir: &Path, p: &CrashParams) -> Result<CrashOutcome> {
    let mut out = CrashOutcome { iterations: p.iterations, ..Default::default() };
    let mut r = rng(p.seed);
    let mut floor = 0u64;
    for round in 0..p.iterations {
        let target = r.gen_range(1..=p.max_steps_per_round);
        let mut child = Command::new(exe)
            .arg("--data-dir")
            .arg(dir)
            .args(["crash-child", "--seed", &p.seed.to_string(), "--dim", &p.dim.to_string()])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .with_context(|| format!("spawning {}", exe.display()))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                if let Ok(id) = line.trim().parse::<u64>() {
                    if tx.send(id).is_err() {
                        break;
                    }
                }
            }
        });
        let mut acked = 0u64;
        let mut seen = 0u64;
        while seen < target {
            match rx.recv_timeout(Duration::from_secs(30)) {
                Ok(id) => {
                    acked = acked.max(id);
                    seen += 1;
                }
                Err(_) => break,
            }
        }
        std::thread::sleep(Duration::from_micros(r.gen_range(0..2000)));
        child.kill().ok();
        let status = child.wait()?;
        reader.join().ok();
        acked = rx.try_iter().fold(acked, u64::max);
        if seen == 0 {
            let mut err = String::new();
            if let Some(mut e) = child.stderr.take() {
                std::io::Read::read_to_string(&mut e, &mut err).ok();
            }
            out.violations.push(format!("round {round}: child made no progress ({status}): {err}"));
            break;
        }
        out.acked += seen;

        let flip = p.bit_flip_every.is_some_and(|k| k > 0 && round % k == k - 1);
        let flipped = flip && flip_payload_bit(dir, p.seed ^ round as u64)?;
        let v = verify(dir, p.seed, p.dim, acked, floor, !flipped);
        if flipped {
            out.bit_flip_rounds += 1;
            out.bit_flips_detected += u64::from(v.torn_bytes > 0);
        } else if v.torn_bytes > 0 {
            out.rounds_with_torn_tail += 1;
        }
        out.violations.extend(v.violations.into_iter().map(|m| format!("round {round}: {m}")));
        floor = v.nodes;
        out.final_nodes = v.nodes;
        out.final_events = v.events;
    }
    Ok(out)
}
