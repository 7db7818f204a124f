//! The `master_metrics` report: one JSON document collecting every
//! benchmark record.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::stats::{median, Summary};

pub const REPORT_FORMAT: &str = "aeon-metrics-1";
pub const REPORT_FILE: &str = "master_metrics.json";
pub const REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub params: BTreeMap<String, Value>,
    /// Unit of `median`, `p50` and `p99`.
    pub unit: String,
    /// Median over repetitions of each repetition's mean.
    pub median: Option<f64>,
    /// Percentiles over the pooled samples of all repetitions.
    pub p50: Option<f64>,
    pub p99: Option<f64>,
    pub repeats: usize,
    /// Hardware-independent values: comparisons, hops, bytes, ratios.
    /// Reproducible exactly for a given seed.
    pub counters: BTreeMap<String, Value>,
    /// Values that depend on wall-clock time or thread scheduling:
    /// durations, rates, timing ratios, kill points.
    #[serde(default)]
    pub timings: BTreeMap<String, Value>,
}

impl Record {
    /// Builds a record from per-repetition samples.
    pub fn from_repeats(name: &str, unit: &str, repeats: &[Vec<f64>]) -> Record {
        let means: Vec<f64> = repeats.iter().map(|r| Summary::of(r).mean).collect();
        let pooled: Vec<f64> = repeats.iter().flatten().copied().collect();
        let s = Summary::of(&pooled);
        Record {
            name: name.to_string(),
            params: BTreeMap::new(),
            unit: unit.to_string(),
            median: Some(median(&means)),
            p50: Some(s.p50),
            p99: Some(s.p99),
            repeats: repeats.len(),
            counters: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// A record that carries only counters.
    pub fn counters_only(name: &str) -> Record {
        Record {
            name: name.to_string(),
            params: BTreeMap::new(),
            unit: String::new(),
            median: None,
            p50: None,
            p99: None,
            repeats: 0,
            counters: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn counter(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.counters.insert(key.to_string(), value.into());
        self
    }

    pub fn timing(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.timings.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub records: Vec<Record>,
}

impl Default for MetricsReport {
    fn default() -> Self {
        MetricsReport {
            format: REPORT_FORMAT.to_string(),
            records: Vec::new(),
        }
    }
}

impl MetricsReport {
    /// Loads an existing report, or starts an empty one if none exists.
    pub fn load_or_default(path: &Path) -> Result<MetricsReport> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(MetricsReport::default()),
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }

    /// Adds `record`, replacing any earlier record with the same name and
    /// parameters.
    pub fn upsert(&mut self, record: Record) {
        match self
            .records
            .iter_mut()
            .find(|r| r.name == record.name && r.params == record.params)
        {
            Some(slot) => *slot = record,
            None => self.records.push(record),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Writes the report through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming {} into place", tmp.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_repeat_means_and_pooled_percentiles() {
        let reps = vec![vec![1.0, 3.0], vec![10.0, 10.0], vec![4.0, 4.0], vec![0.0, 2.0], vec![5.0, 7.0]];
        let r = Record::from_repeats("x", "ns", &reps);
        assert_eq!((r.median, r.p50, r.p99), (Some(4.0), Some(4.0), Some(10.0)));
        assert_eq!(r.repeats, 5);
    }

    #[test]
    fn upsert_replaces_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(REPORT_FILE);
        let mut rep = MetricsReport::load_or_default(&path).unwrap();
        rep.upsert(Record::counters_only("a").counter("n", 1));
        rep.upsert(Record::counters_only("a").counter("n", 2));
        rep.upsert(Record::counters_only("a").param("dim", 8).counter("n", 3));
        assert_eq!(rep.records.len(), 2);
        rep.save(&path).unwrap();
        let back = MetricsReport::load_or_default(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.get("a").unwrap().counters["n"], 2);
    }
}
