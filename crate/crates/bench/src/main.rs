use std::path::PathBuf;
use std::time::Instant;

use aeon_bench::config::ConfigFile;
use aeon_bench::crash::{self, CrashParams};
use aeon_bench::dataset::{read_aedv, write_aedv, DenseForestSpec};
use aeon_bench::report::{MetricsReport, Record, REPEATS, REPORT_FILE};
use aeon_bench::suite::{self, compaction, ebr, kernels, slb, trace, traversal, wal};
use aeon_bench::walk::Drift;
use aeon_core::atlas::Quantization;
use aeon_core::{Engine, EngineConfig};
use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aeon-bench", version, about = "Datasets, index lifecycle and benchmarks for aeon-core")]
struct Cli {
    /// Directory for datasets, indexes and scratch engines.
    #[arg(long, env = "AEON_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    /// Optional key=value settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Metrics report path [default: <data-dir>/master_metrics.json].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a Dense Forest vector file.
    GenDataset {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        spread: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file [default: <data-dir>/dataset.aedv].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build an index from a vector file and compact it.
    Build {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Index directory name under the data directory.
        #[arg(long)]
        index: Option<String>,
        #[arg(long)]
        quantization: Option<String>,
        /// Skip the write-ahead log while loading.
        #[arg(long)]
        no_wal: bool,
    },
    /// Query a built index with every row of a vector file.
    Query {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        index: Option<String>,
        /// greedy, beam or flat.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        csls: bool,
        /// Print one line per query.
        #[arg(long)]
        verbose: bool,
    },
    /// Quantization accuracy and single-pair similarity cost.
    BenchKernels {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        vectors: Option<usize>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Traversal depth, comparisons, recall and file sizes.
    BenchTraversal {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// fp32, int8 or both.
        #[arg(long)]
        quantization: Option<String>,
        /// Skip the exact-scan recall oracle.
        #[arg(long)]
        no_recall: bool,
    },
    /// Insert throughput with the write-ahead log on and off.
    BenchWal {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Lookaside buffer scan cost, walk hit rate and isolation.
    BenchSlb {
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        /// Nodes in the index behind the cache.
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reader/writer stress on epoch-based reclamation.
    BenchEbr {
        #[arg(long)]
        readers: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Shadow compaction equivalence, garbage removal and section costs.
    BenchCompaction {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
    },
    /// Trace two-phase search and garbage collection.
    BenchTrace {
        #[arg(long)]
        events: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        gc_events: Option<usize>,
    },
    /// Kill a writer process repeatedly and verify recovery.
    CrashTest {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dim: Option<usize>,
        /// Corrupt one log payload bit every this many rounds; 0 disables.
        #[arg(long)]
        bit_flip_every: Option<usize>,
    },
    #[command(hide = true)]
    CrashChild {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        limit: Option<u64>,
    },
}

struct Ctx {
    data_dir: PathBuf,
    out: PathBuf,
    config: ConfigFile,
}

impl Ctx {
    fn get<T>(&self, cmd: &str, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.config.resolve(cmd, key, flag, default)
    }

    fn scratch(&self) -> Result<PathBuf> {
        let d = self.data_dir.join("bench");
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn publish(&self, records: Vec<Record>) -> Result<()> {
        let mut report = MetricsReport::load_or_default(&self.out)?;
        for r in records {
            report.upsert(r);
        }
        report.save(&self.out)?;
        println!("metrics written to {}", self.out.display());
        Ok(())
    }
}

fn parse_quantization(s: &str) -> Result<Quantization> {
    match s.to_ascii_lowercase().as_str() {
        "fp32" => Ok(Quantization::Fp32),
        "int8" => Ok(Quantization::Int8),
        other => bail!("unknown quantization {other:?}; expected fp32 or int8"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let data_dir = cli
        .data_dir
        .clone()
        .or_else(|| config.raw("data_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("aeon-data"));
    let out = cli
        .out
        .clone()
        .or_else(|| config.raw("out").map(PathBuf::from))
        .unwrap_or_else(|| data_dir.join(REPORT_FILE));
    let ctx = Ctx { data_dir, out, config };
    run(&ctx, cli.command)
}

fn run(ctx: &Ctx, cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenDataset { n, dim, clusters, spread, seed, output } => {
            let c = "gen-dataset";
            let n = ctx.get(c, "n", n, 10_000)?;
            let mut spec = DenseForestSpec::new(n, ctx.get(c, "dim", dim, 768)?);
            spec.clusters = ctx.get(c, "clusters", clusters, spec.clusters)?;
            spec.spread = ctx.get(c, "spread", spread, spec.spread)?;
            spec.seed = ctx.get(c, "seed", seed, spec.seed)?;
            let output = output.unwrap_or_else(|| ctx.data_dir.join("dataset.aedv"));
            std::fs::create_dir_all(&ctx.data_dir)?;
            let data = spec.generate()?;
            write_aedv(&output, spec.dim, &data.rows)?;
            println!("wrote {} vectors of dimension {} to {}", n, spec.dim, output.display());
        }
        Cmd::Build { input, index, quantization, no_wal } => {
            let c = "build";
            let input = input.unwrap_or_else(|| ctx.data_dir.join("dataset.aedv"));
            let index = ctx.get(c, "index", index, "index".to_string())?;
            let q = parse_quantization(&ctx.get(c, "quantization", quantization, "int8".to_string())?)?;
            let data = read_aedv(&input)?;
            ensure!(!data.is_empty(), "{} holds no vectors", input.display());
            let dir = ctx.data_dir.join(&index);
            ensure!(!dir.exists(), "{} already exists; remove it or pick another --index", dir.display());
            std::fs::create_dir_all(&dir)?;
            let engine = Engine::create(&dir, EngineConfig::new(data.dim as u32, q)?.with_wal(!no_wal))?;
            let start = Instant::now();
            let mut samples = Vec::with_capacity(data.len());
            for v in &data.rows {
                let t = Instant::now();
                engine.atlas().insert(v)?;
                samples.push(t.elapsed().as_nanos() as f64);
            }
            let loaded = start.elapsed();
            let s = engine.compact()?;
            let st = engine.atlas().stats();
            println!(
                "built {} ({} nodes, depth {}, {} bytes) in {:.2?} + {:.2?} compaction",
                dir.display(),
                st.node_count,
                st.depth,
                st.file_bytes,
                loaded,
                s.copy_duration
            );
            ctx.publish(vec![Record::from_repeats("build.insert", "ns", &[samples])
                .param("n", data.len())
                .param("dim", data.dim)
                .param("quantization", q.name())
                .counter("nodes", st.node_count)
                .counter("depth", st.depth)
                .counter("stride_bytes", engine.atlas().params().stride())
                .counter("file_bytes", st.file_bytes)
                .timing("compaction_copy_ns", s.copy_duration.as_nanos() as f64)])?;
        }
        Cmd::Query { input, index, mode, beam_width, csls, verbose } => {
            let c = "query";
            let input = input.with_context(|| "query needs --input <vector file>")?;
            let index = ctx.get(c, "index", index, "index".to_string())?;
            let mode = ctx.get(c, "mode", mode, "greedy".to_string())?;
            let width = ctx.get(c, "beam_width", beam_width, 3)?;
            ensure!(["greedy", "beam", "flat"].contains(&mode.as_str()), "unknown mode {mode:?}");
            let dir = ctx.data_dir.join(&index);
            ensure!(dir.exists(), "no index at {}; run build first", dir.display());
            let engine = Engine::open(&dir)?;
            let queries = read_aedv(&input)?;
            let run_one = |q: &[f32]| match mode.as_str() {
                "greedy" => engine.atlas().query_greedy(q),
                "beam" => engine.atlas().query_beam(q, width, csls),
                "flat" => engine.atlas().flat_scan(q),
                _ => unreachable!(),
            };
            let (mut hops, mut comps) = (0u64, 0u64);
            for (i, q) in queries.rows.iter().enumerate() {
                let r = run_one(q)?;
                hops += u64::from(r.hops);
                comps += r.comparisons;
                if verbose {
                    println!(
                        "{i}\tid={}\tsimilarity={:.6}\thops={}\tcomparisons={}",
                        r.id, r.similarity, r.hops, r.comparisons
                    );
                }
            }
            let mut reps = Vec::new();
            for _ in 0..REPEATS {
                let mut s = Vec::with_capacity(queries.len());
                for q in &queries.rows {
                    let t = Instant::now();
                    run_one(q)?;
                    s.push(t.elapsed().as_nanos() as f64);
                }
                reps.push(s);
            }
            let nq = queries.len().max(1) as f64;
            let rec = Record::from_repeats("query", "ns", &reps)
                .param("index", index.as_str())
                .param("mode", mode.as_str())
                .param("queries", queries.len())
                .counter("mean_hops", hops as f64 / nq)
                .counter("mean_comparisons", comps as f64 / nq);
            println!(
                "{} queries: median {:.0} ns, mean hops {:.2}, mean comparisons {:.1}",
                queries.len(),
                rec.median.unwrap_or(f64::NAN),
                hops as f64 / nq,
                comps as f64 / nq
            );
            ctx.publish(vec![rec])?;
        }
        Cmd::BenchKernels { dim, vectors, pairs, seed } => {
            let c = "bench-kernels";
            let d = kernels::KernelParams::default();
            let p = kernels::KernelParams {
                dim: ctx.get(c, "dim", dim, d.dim)?,
                vectors: ctx.get(c, "vectors", vectors, d.vectors)?,
                pairs: ctx.get(c, "pairs", pairs, d.pairs)?,
                seed: ctx.get(c, "seed", seed, d.seed)?,
            };
            let o = kernels::run(p);
            println!(
                "max roundtrip error {:.4} of scale/2; mean |int8 - fp32| = {:.5} over {} pairs",
                o.max_error_ratio, o.mean_abs_delta, p.pairs
            );
            ctx.publish(o.records())?;
        }
        Cmd::BenchTraversal { n, dim, queries, seed, quantization, no_recall } => {
            let c = "bench-traversal";
            let n = ctx.get(c, "n", n, 10_000)?;
            let dim = ctx.get(c, "dim", dim, 768)?;
            let which = ctx.get(c, "quantization", quantization, "both".to_string())?;
            let qs = match which.as_str() {
                "both" => vec![Quantization::Fp32, Quantization::Int8],
                other => vec![parse_quantization(other)?],
            };
            let mut base = traversal::TraversalParams::new(n, dim, qs[0]);
            base.forest.seed = ctx.get(c, "seed", seed, base.forest.seed)?;
            base.queries = ctx.get(c, "queries", queries, base.queries)?;
            base.recall = !no_recall;
            let data = base.forest.generate()?;
            let mut outcomes = Vec::new();
            let mut records = Vec::new();
            for q in qs {
                let o = traversal::run(&ctx.scratch()?, traversal::TraversalParams { quantization: q, ..base }, &data)?;
                println!(
                    "{}: stride {} B, file {} B, depth {}, mean hops {:.2}, mean comparisons {:.1} vs {} flat",
                    o.quantization, o.stride, o.file_bytes, o.depth, o.mean_hops, o.mean_comparisons, o.flat_comparisons
                );
                records.extend(o.records());
                outcomes.push(o);
            }
            if let [f, i] = outcomes.as_slice() {
                records.push(traversal::size_ratio(f, i));
            }
            ctx.publish(records)?;
        }
        Cmd::BenchWal { n, dim, seed } => {
            let c = "bench-wal";
            let mut p = wal::WalParams::new(ctx.get(c, "n", n, 10_000)?, ctx.get(c, "dim", dim, 768)?);
            p.forest.seed = ctx.get(c, "seed", seed, p.forest.seed)?;
            let data = p.forest.generate()?;
            let o = wal::run(&ctx.scratch()?, p, &data)?;
            println!("throughput ratio on/off {:.3}; co-held lock acquisitions {}", o.ratio(), o.co_held);
            ctx.publish(o.records())?;
        }
        Cmd::BenchSlb { dim, queries, nodes, seed } => {
            let c = "bench-slb";
            let dim = ctx.get(c, "dim", dim, 768)?;
            let queries = ctx.get(c, "queries", queries, 10_000)?;
            let seed = ctx.get(c, "seed", seed, 1)?;
            let (points, mut records) = slb::occupancy_sweep(dim, &[16, 32, 64], 2000, seed)?;
            for p in &points {
                println!("occupancy {}: {:.1} comparisons per lookup", p.occupancy, p.mean_comparisons);
            }
            let mut forest = DenseForestSpec::new(ctx.get(c, "nodes", nodes, 10_000)?, dim);
            forest.seed = seed;
            let engine = slb::walk_engine(&ctx.scratch()?, forest)?;
            for drift in [Drift::Gaussian, Drift::UnitStep] {
                let w = slb::walk(&engine, drift, queries, seed)?;
                println!(
                    "walk ({}): hit rate {:.3}, predicted {:.0} ns vs measured {:.0} ns",
                    drift.name(),
                    w.hit_rate(),
                    w.predicted_ns(),
                    w.measured_ns
                );
                records.push(w.record());
            }
            let violations = slb::isolation_trials(200, 300, seed)?;
            println!("isolation: {violations} violations in 200 trials");
            records.push(Record::counters_only("slb.isolation").param("trials", 200).counter("violations", violations));
            ctx.publish(records)?;
        }
        Cmd::BenchEbr { readers, iterations } => {
            let c = "bench-ebr";
            let d = ebr::EbrParams::default();
            let p = ebr::EbrParams {
                readers: ctx.get(c, "readers", readers, d.readers)?,
                iterations: ctx.get(c, "iterations", iterations, d.iterations)?,
            };
            let mut runs = Vec::new();
            for _ in 0..REPEATS {
                runs.push(ebr::run(&ctx.scratch()?, p)?);
            }
            let rec = ebr::EbrOutcome::record(&runs);
            println!(
                "{} runs: {} payload swaps, {} remaps, {} file replacements, torn {}, use-after-reclaim {}, retired {} reclaimed {}",
                runs.len(),
                rec.timings["payload_swaps"],
                rec.timings["remaps"],
                rec.timings["file_replacements"],
                rec.counters["torn_reads"],
                rec.counters["use_after_reclaim"],
                rec.timings["retired"],
                rec.timings["reclaimed"]
            );
            let failed = runs.iter().any(|r| !r.passed());
            ctx.publish(vec![rec])?;
            ensure!(!failed, "reclamation stress found violations");
        }
        Cmd::BenchCompaction { n, dim, queries } => {
            let c = "bench-compaction";
            let mut p = compaction::CompactionParams::new(ctx.get(c, "n", n, 10_000)?, ctx.get(c, "dim", dim, 128)?);
            p.queries = ctx.get(c, "queries", queries, p.queries)?;
            let mut runs = Vec::new();
            for rep in 0..REPEATS {
                p.forest.seed = rep as u64 + 1;
                runs.push(compaction::run(&ctx.scratch()?, p)?);
            }
            let small = compaction::run(
                &ctx.scratch()?,
                compaction::CompactionParams::new((p.forest.n / 10).max(10), p.forest.dim),
            )?;
            let o = &runs[0];
            println!(
                "answer mismatches {}, garbage free {}, log after replay ({}, {}), freeze ops {} (vs {} at n/10), swap ops {} (vs {})",
                o.answer_mismatches,
                o.garbage_free(),
                o.replay_records,
                o.replay_torn_bytes,
                o.freeze_ops,
                small.freeze_ops,
                o.swap_ops,
                small.swap_ops
            );
            let mut records = vec![o.record(), small.record()];
            records.extend(compaction::CompactionOutcome::timing_records(&runs));
            ctx.publish(records)?;
        }
        Cmd::BenchTrace { events, dim, k, queries, gc_events } => {
            let c = "bench-trace";
            let mut p = trace::TraceParams::new(ctx.get(c, "events", events, 10_000)?, ctx.get(c, "dim", dim, 128)?);
            p.k_blocks = ctx.get(c, "k", k, p.k_blocks)?;
            p.queries = ctx.get(c, "queries", queries, p.queries)?;
            let s = trace::run_search(&ctx.scratch()?, p)?;
            println!(
                "two-phase: max {} comparisons (bound {}), top-1 agreement {:.3}",
                s.max_comparisons, s.bound, s.top1_agreement
            );
            let gc = trace::run_gc(&ctx.scratch()?, ctx.get(c, "gc_events", gc_events, 100_000)?, p.dim, p.seed)?;
            println!("gc: {} of {} events kept, exact {}", gc.event_count_after, gc.events, gc.exact());
            let mut records = s.records();
            records.push(gc.record());
            ctx.publish(records)?;
        }
        Cmd::CrashTest { iterations, seed, dim, bit_flip_every } => {
            let c = "crash-test";
            let mut p = CrashParams::new(ctx.get(c, "iterations", iterations, 50)?);
            p.seed = ctx.get(c, "seed", seed, p.seed)?;
            p.dim = ctx.get(c, "dim", dim, p.dim)?;
            let every = ctx.get(c, "bit_flip_every", bit_flip_every, 5)?;
            p.bit_flip_every = (every > 0).then_some(every);
            let dir = suite::scratch_dir(&ctx.scratch()?, "crash")?;
            let exe = std::env::current_exe()?;
            let o = crash::run(&exe, &dir, &p)?;
            for v in &o.violations {
                eprintln!("violation: {v}");
            }
            println!(
                "{} rounds, {} acknowledged steps, {} violations, bit flips detected {}/{}",
                o.iterations,
                o.acked,
                o.violations.len(),
                o.bit_flips_detected,
                o.bit_flip_rounds
            );
            ctx.publish(vec![o.record()])?;
            ensure!(o.passed(), "crash test failed");
        }
        Cmd::CrashChild { seed, dim, limit } => {
            crash::crash_child(&ctx.data_dir, seed, dim, limit)?;
        }
    }
    Ok(())
}

