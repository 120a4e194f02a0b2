//! Per-view records, fork detection and CSV/JSON export.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Digest;

/// Column order of the per-view CSV.
pub const CSV_COLUMNS: [&str; 12] = [
    "scenario",
    "seed",
    "view",
    "variant",
    "outcome",
    "latency_ticks",
    "discarded",
    "forks_cum",
    "chain_len_min",
    "chain_len_max",
    "awake",
    "byz_awake",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PvssBft,
    BaselineBft,
    LongestChain,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PvssBft => "pvss-bft",
            Variant::BaselineBft => "baseline-bft",
            Variant::LongestChain => "longest-chain",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Decided,
    Aborted,
    Forked,
}

/// One row per view (or slot, for the longest-chain baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub seed: u64,
    pub view: u64,
    pub variant: Variant,
    pub outcome: Outcome,
    pub latency_ticks: Option<u64>,
    pub discarded: u64,
    pub forks_cum: u64,
    pub chain_len_min: u64,
    pub chain_len_max: u64,
    pub awake: u32,
    pub byz_awake: u32,
}

/// Per-node state at the end of a view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub scenario: String,
    pub seed: u64,
    pub view: u64,
    pub node: u32,
    pub byzantine: bool,
    pub awake: bool,
    pub member: bool,
    pub decided: bool,
    pub chain_len: u64,
}

/// Participation and progress at one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub scenario: String,
    pub seed: u64,
    pub variant: Variant,
    pub tick: u64,
    pub stage: usize,
    pub awake: u32,
    pub byz_awake: u32,
    pub active: u32,
    pub height_max: u64,
}

/// Submission and confirmation of one client transaction; unconfirmed
/// transactions are censored at the end of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub scenario: String,
    pub seed: u64,
    pub variant: Variant,
    pub tx: u64,
    pub submitted: u64,
    pub confirmed: Option<u64>,
    pub latency_ticks: Option<u64>,
}

/// Two or more distinct blocks decided at one height.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForkEvent {
    pub height: u64,
    pub digests: Vec<Digest>,
}

/// Finds heights where the given chains disagree. Each chain lists block
/// digests from height 0 upwards.
pub fn detect_forks<C: AsRef<[Digest]>>(chains: &[C]) -> Vec<ForkEvent> {
    let mut at: BTreeMap<u64, Vec<Digest>> = BTreeMap::new();
    for chain in chains {
        for (h, d) in chain.as_ref().iter().enumerate() {
            let seen = at.entry(h as u64).or_default();
            if !seen.contains(d) {
                seen.push(*d);
            }
        }
    }
    at.into_iter()
        .filter(|(_, ds)| ds.len() > 1)
        .map(|(height, mut digests)| {
            digests.sort();
            ForkEvent { height, digests }
        })
        .collect()
}

/// Tracks the first decision seen at each height and counts conflicts.
#[derive(Clone, Debug, Default)]
pub struct ForkMonitor {
    first: BTreeMap<u64, Digest>,
    conflicting: BTreeMap<u64, Vec<Digest>>,
}

impl ForkMonitor {
    /// Records a decision; returns true if it conflicts with an earlier one.
    pub fn observe(&mut self, height: u64, digest: Digest) -> bool {
        match self.first.get(&height) {
            None => {
                self.first.insert(height, digest);
                false
            }
            Some(d) if *d == digest => false,
            Some(_) => {
                let c = self.conflicting.entry(height).or_default();
                if !c.contains(&digest) {
                    c.push(digest);
                }
                true
            }
        }
    }

    pub fn forks(&self) -> u64 {
        self.conflicting.values().map(|c| c.len() as u64).sum()
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Box<MetricsError> },
}

/// A record type with a fixed CSV header.
pub trait CsvRow: Serialize {
    const COLUMNS: &'static [&'static str];
}

impl CsvRow for MetricsRecord {
    const COLUMNS: &'static [&'static str] = &CSV_COLUMNS;
}

impl CsvRow for NodeRecord {
    const COLUMNS: &'static [&'static str] =
        &["scenario", "seed", "view", "node", "byzantine", "awake", "member", "decided", "chain_len"];
}

impl CsvRow for TickRecord {
    const COLUMNS: &'static [&'static str] =
        &["scenario", "seed", "variant", "tick", "stage", "awake", "byz_awake", "active", "height_max"];
}

impl CsvRow for TxRecord {
    const COLUMNS: &'static [&'static str] =
        &["scenario", "seed", "variant", "tx", "submitted", "confirmed", "latency_ticks"];
}

/// Writes the header row, even for no records, then one row per record.
pub fn write_csv<W: io::Write, T: CsvRow>(out: W, rows: &[T]) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(T::COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: CsvRow>(path: &Path, rows: &[T]) -> Result<(), MetricsError> {
    let write = || write_csv(io::BufWriter::new(std::fs::File::create(path)?), rows);
    write().map_err(|e| MetricsError::File { path: path.to_path_buf(), source: Box::new(e) })
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), MetricsError> {
    let write = || -> Result<(), MetricsError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(io::BufWriter::new(f), value)?;
        Ok(())
    };
    write().map_err(|e| MetricsError::File { path: path.to_path_buf(), source: Box::new(e) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub views: u64,
    pub decided: u64,
    pub aborted: u64,
    pub forked: u64,
    pub forks: u64,
    pub discarded: u64,
    pub decision_rate: f64,
    pub mean_latency_ticks: Option<f64>,
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let mut s = Summary { views: records.len() as u64, ..Summary::default() };
    let mut lat = Vec::new();
    for r in records {
        match r.outcome {
            Outcome::Decided => s.decided += 1,
            Outcome::Aborted => s.aborted += 1,
            Outcome::Forked => s.forked += 1,
        }
        s.discarded += r.discarded;
        s.forks = s.forks.max(r.forks_cum);
        if let Some(l) = r.latency_ticks {
            lat.push(l as f64);
        }
    }
    if s.views > 0 {
        s.decision_rate = s.decided as f64 / s.views as f64;
    }
    if !lat.is_empty() {
        s.mean_latency_ticks = Some(lat.iter().sum::<f64>() / lat.len() as f64);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(view: u64) -> MetricsRecord {
        MetricsRecord {
            scenario: "s".into(),
            seed: 1,
            view,
            variant: Variant::PvssBft,
            outcome: if view % 2 == 0 { Outcome::Decided } else { Outcome::Aborted },
            latency_ticks: (view % 2 == 0).then_some(4),
            discarded: 0,
            forks_cum: 0,
            chain_len_min: view / 2,
            chain_len_max: view / 2 + 1,
            awake: 40,
            byz_awake: 3,
        }
    }

    #[test]
    fn csv_header_and_roundtrip() {
        let rows: Vec<_> = (0..4).map(record).collect();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header, CSV_COLUMNS.join(","));
        assert_eq!(text.lines().nth(2).unwrap(), "s,1,1,pvss-bft,aborted,,0,0,0,1,40,3");
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);
    }

    fn serde_header<T: Serialize>(row: &T) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        text.lines().next().unwrap().to_string()
    }

    #[test]
    fn declared_columns_match_field_order() {
        assert_eq!(serde_header(&record(0)), MetricsRecord::COLUMNS.join(","));
        let node = NodeRecord {
            scenario: "s".into(),
            seed: 1,
            view: 0,
            node: 0,
            byzantine: false,
            awake: true,
            member: true,
            decided: true,
            chain_len: 1,
        };
        assert_eq!(serde_header(&node), NodeRecord::COLUMNS.join(","));
        let tick = TickRecord {
            scenario: "s".into(),
            seed: 1,
            variant: Variant::PvssBft,
            tick: 0,
            stage: 0,
            awake: 4,
            byz_awake: 0,
            active: 4,
            height_max: 0,
        };
        assert_eq!(serde_header(&tick), TickRecord::COLUMNS.join(","));
        let tx = TxRecord {
            scenario: "s".into(),
            seed: 1,
            variant: Variant::PvssBft,
            tx: 0,
            submitted: 0,
            confirmed: None,
            latency_ticks: None,
        };
        assert_eq!(serde_header(&tx), TxRecord::COLUMNS.join(","));
    }

    #[test]
    fn empty_csv_has_a_header() {
        let mut buf = Vec::new();
        write_csv::<_, MetricsRecord>(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", CSV_COLUMNS.join(",")));
        let err = write_csv_file::<MetricsRecord>(Path::new("/nonexistent/dir/x.csv"), &[]).unwrap_err();
        assert!(err.to_string().starts_with("/nonexistent/dir/x.csv: "), "{err}");
    }

    #[test]
    fn forks_are_found_per_height() {
        let a = vec![[0u8; 32], [1; 32], [2; 32]];
        let b = vec![[0u8; 32], [1; 32], [3; 32], [4; 32]];
        let f = detect_forks(&[a, b]);
        assert_eq!(f, vec![ForkEvent { height: 2, digests: vec![[2; 32], [3; 32]] }]);
        let mut m = ForkMonitor::default();
        assert!(!m.observe(1, [1; 32]));
        assert!(m.observe(1, [2; 32]));
        assert!(m.observe(1, [2; 32]));
        assert_eq!(m.forks(), 1);
    }

    #[test]
    fn summary_counts_outcomes() {
        let rows: Vec<_> = (0..4).map(record).collect();
        let s = summarize(&rows);
        assert_eq!((s.decided, s.aborted), (2, 2));
        assert_eq!(s.mean_latency_ticks, Some(4.0));
    }
}
