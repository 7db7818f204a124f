use std::path::Path;
use std::process::{Command, Output};

use aeon_bench::dataset::read_aedv;
use aeon_bench::report::{MetricsReport, REPORT_FILE};

fn bench(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aeon-bench"))
        .arg("--data-dir")
        .arg(data_dir)
        .args(args)
        .env_remove("AEON_DATA_DIR")
        .output()
        .expect("spawn aeon-bench")
}

fn ok(data_dir: &Path, args: &[&str]) -> String {
    let out = bench(data_dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn report(data_dir: &Path) -> MetricsReport {
    MetricsReport::load_or_default(&data_dir.join(REPORT_FILE)).unwrap()
}

#[test]
fn gen_dataset_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.aedv");
    let b = dir.path().join("b.aedv");
    let c = dir.path().join("c.aedv");
    for (path, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        ok(dir.path(), &["gen-dataset", "--n", "10", "--dim", "8", "--seed", seed, "--output", path.to_str().unwrap()]);
    }
    let (ba, bb, bc) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(ba, bb);
    assert_ne!(ba, bc);
    assert_eq!(&ba[..4], b"AEDV");
    assert_eq!(u64::from_le_bytes(ba[4..12].try_into().unwrap()), 10);
    assert_eq!(u32::from_le_bytes(ba[12..16].try_into().unwrap()), 8);
    assert_eq!(ba.len(), 16 + 10 * 8 * 4);
    for row in read_aedv(&a).unwrap().rows {
        let norm: f64 = row.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-4, "norm {norm}");
    }
}

#[test]
fn bad_spec_and_missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-dataset", "--n", "10", "--dim", "0"][..],
        &["gen-dataset", "--n", "ten"],
        &["build", "--input", "missing.aedv"],
        &["query", "--input", "missing.aedv"],
        &["bench-traversal", "--quantization", "fp16"],
    ] {
        let out = bench(dir.path(), args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty(), "{args:?} gave no diagnostic");
    }
}

#[test]
fn build_then_query_finds_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-dataset", "--n", "600", "--dim", "16"]);
    ok(d, &["build"]);
    assert!(!bench(d, &["build"]).status.success(), "rebuilding over an existing index must be refused");
    let data = d.join("dataset.aedv").to_str().unwrap().to_string();
    let out = ok(d, &["query", "--input", &data, "--mode", "flat", "--verbose"]);
    let lines: Vec<&str> = out.lines().filter(|l| l.contains("\tid=")).collect();
    assert_eq!(lines.len(), 600);
    // Node ids are issued from 1 in insertion order.
    for (i, l) in lines.iter().enumerate() {
        assert!(l.starts_with(&format!("{i}\tid={}\t", i + 1)), "{l}");
    }
    ok(d, &["query", "--input", &data, "--mode", "beam"]);
    let r = report(d);
    assert_eq!(r.get("build.insert").unwrap().counters["nodes"], 600);
    let flat = r.records.iter().find(|x| x.name == "query" && x.params["mode"] == "flat").unwrap();
    assert_eq!(flat.counters["mean_comparisons"], 600.0);
    assert_eq!(flat.repeats, 5);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_aeon-bench"))
        .args(["gen-dataset", "--n", "5", "--dim", "4"])
        .env("AEON_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("dataset.aedv").exists());
}

#[test]
fn config_file_fills_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("aeon.conf");
    std::fs::write(&cfg, "n = 7\ngen-dataset.dim = 3\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(dir.path(), &["--config", cfg, "gen-dataset"]);
    let d = read_aedv(&dir.path().join("dataset.aedv")).unwrap();
    assert_eq!((d.len(), d.dim), (7, 3));
    ok(dir.path(), &["--config", cfg, "gen-dataset", "--dim", "5"]);
    let d = read_aedv(&dir.path().join("dataset.aedv")).unwrap();
    assert_eq!((d.len(), d.dim), (7, 5));
}

#[test]
fn crash_test_with_no_rounds_passes_trivially() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["crash-test", "--iterations", "0"]);
    assert!(out.contains("0 violations"), "{out}");
}

#[test]
fn crash_test_survives_a_few_rounds() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["crash-test", "--iterations", "6", "--bit-flip-every", "2"]);
    let r = report(dir.path());
    let rec = r.get("crash_test").unwrap();
    assert_eq!(rec.counters["violations"], 0);
    assert_eq!(rec.counters["bit_flip_rounds"], rec.counters["bit_flips_detected"]);
}

/// Every counter in the report must come out identical for identical seeds.
#[test]
fn counters_are_reproducible() {
    let runs: &[&[&str]] = &[
        &["bench-kernels", "--dim", "64", "--vectors", "50", "--pairs", "200"],
        &["bench-traversal", "--n", "1500", "--dim", "32", "--queries", "100"],
        &["bench-slb", "--dim", "32", "--queries", "500", "--nodes", "500"],
        &["bench-ebr", "--readers", "2", "--iterations", "500"],
        &["bench-compaction", "--n", "400", "--dim", "16", "--queries", "50"],
        &["bench-trace", "--events", "2000", "--dim", "16", "--queries", "50", "--gc-events", "3000"],
        &["bench-wal", "--n", "200", "--dim", "16"],
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for args in runs {
        ok(a.path(), args);
        ok(b.path(), args);
    }
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(ra.records.len(), rb.records.len());
    assert!(ra.records.len() >= 15);
    for (x, y) in ra.records.iter().zip(&rb.records) {
        assert_eq!((&x.name, &x.params), (&y.name, &y.params));
        assert_eq!(x.counters, y.counters, "{} {:?}", x.name, x.params);
        if x.median.is_some() {
            assert_eq!(x.repeats, 5, "{}", x.name);
        }
    }
}
