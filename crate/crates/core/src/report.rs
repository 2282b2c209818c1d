//! Metrics reports and the cross-report comparison table.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";
pub const ABSENT: &str = "absent";

/// Table columns of the CSV form, each mapped from a report key. The two
/// columns without a measurable counterpart are always `absent`.
pub const TABLE_COLUMNS: [(&str, Option<&str>); 7] = [
    ("toy-FID (Lower is better)", Some("toy_fid")),
    ("Alignment Score (Higher is better)", Some("alignment_matched")),
    ("Recall@10 (Higher is better)", Some("recall_at_10")),
    ("Computational Efficiency (%)", None),
    ("Training Time (hrs)", Some("training_hours")),
    ("Inference Time (ms per sample)", Some("inference_ms")),
    ("Energy Consumption (kWh)", None),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Absent,
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Absent => None,
        }
    }

    fn render(self) -> String {
        match self {
            Metric::Value(v) => format!("{v:?}"),
            Metric::Absent => ABSENT.into(),
        }
    }

    fn parse(s: &str) -> Result<Metric> {
        if s == ABSENT {
            return Ok(Metric::Absent);
        }
        let v: f64 = s.parse().map_err(|_| Error::format("report", format!("bad metric value {s:?}")))?;
        if !v.is_finite() {
            return Err(Error::format("report", format!("non-finite metric value {s:?}")));
        }
        Ok(Metric::Value(v))
    }
}

/// Ordered metric values plus run metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub meta: Vec<(String, String)>,
    pub values: Vec<(String, Metric)>,
}

impl MetricsReport {
    pub fn new(config: &RunConfig) -> Self {
        let mut r = MetricsReport::default();
        r.set_meta("schema_version", SCHEMA_VERSION);
        r.set_meta("seed", &config.seed.to_string());
        r.set_meta("config_hash", &config.hash());
        r
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.meta.push((key.to_string(), value.to_string())),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Non-finite values are recorded as absent.
    pub fn set(&mut self, key: &str, metric: Metric) {
        let metric = match metric {
            Metric::Value(v) if !v.is_finite() => Metric::Absent,
            m => m,
        };
        match self.values.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = metric,
            None => self.values.push((key.to_string(), metric)),
        }
    }

    pub fn get(&self, key: &str) -> Option<Metric> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, m)| *m)
    }

    /// Fills the headline keys behind [`TABLE_COLUMNS`]: toy-FID of the flow
    /// pathway when it exists, else of the token pathway, and the matching
    /// inference time.
    pub fn derive_headline(&mut self, train_seconds: Option<f64>) {
        let flow = self.get("toy_fid_flow").and_then(Metric::value);
        let (fid, ms) = match flow {
            Some(f) => (Metric::Value(f), self.get("inference_ms_flow")),
            None => (self.get("toy_fid_token").unwrap_or(Metric::Absent), self.get("inference_ms_token")),
        };
        self.set("toy_fid", fid);
        self.set("inference_ms", ms.unwrap_or(Metric::Absent));
        self.set(
            "training_hours",
            train_seconds.map_or(Metric::Absent, |s| Metric::Value(s / 3600.0)),
        );
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "{k}={v}");
        }
        for (k, m) in &self.values {
            let _ = writeln!(s, "metric.{k}={}", m.render());
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("report", format!("line without '=': {line:?}")))?;
            match k.strip_prefix("metric.") {
                Some(name) => r.values.push((name.to_string(), Metric::parse(v)?)),
                None => r.meta.push((k.to_string(), v.to_string())),
            }
        }
        if r.meta("schema_version") != Some(SCHEMA_VERSION) {
            return Err(Error::format("report", "missing or unsupported schema_version"));
        }
        Ok(r)
    }

    /// One-row CSV: the table columns, then every metric by key.
    pub fn to_csv(&self, name: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["Model".to_string()];
        let mut row = vec![name.to_string()];
        for (col, key) in TABLE_COLUMNS {
            header.push(col.to_string());
            let m = key.and_then(|k| self.get(k)).unwrap_or(Metric::Absent);
            row.push(m.render());
        }
        for (k, m) in &self.values {
            header.push(k.clone());
            row.push(m.render());
        }
        w.write_record(&header).map_err(csv_err)?;
        w.write_record(&row).map_err(csv_err)?;
        String::from_utf8(w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?)
            .map_err(|e| Error::format("csv", e.to_string()))
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::write(dir.join("metrics.txt"), self.to_kv())?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv(name)?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Lower,
    Higher,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Lower => "↓",
            Direction::Higher => "↑",
        }
    }

    /// An explicit "(Lower is better)" / "(Higher is better)" annotation
    /// wins; otherwise distances, times, energies and losses are
    /// lower-better and everything else is higher-better.
    pub fn of_column(name: &str) -> Direction {
        let l = name.to_ascii_lowercase();
        if l.contains("lower is better") {
            return Direction::Lower;
        }
        if l.contains("higher is better") {
            return Direction::Higher;
        }
        const LOWER: [&str; 8] = ["fid", "time", "energy", "loss", "_ms", "hours", "straightness", "unrefined_gap"];
        if LOWER.iter().any(|k| l.contains(k)) {
            Direction::Lower
        } else {
            Direction::Higher
        }
    }
}

/// Rows of named systems with raw cell strings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<String>>)>,
}

impl Table {
    /// Appends a CSV whose first column names the system.
    pub fn add_csv(&mut self, text: &str) -> Result<()> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header.len() < 2 {
            return Err(Error::format("csv", "need a name column and at least one metric column"));
        }
        let idx: Vec<usize> = header[1..].iter().map(|c| self.column_index(c)).collect();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let mut cells = vec![None; self.columns.len()];
            for (i, cell) in rec.iter().enumerate().skip(1) {
                if let Some(&c) = idx.get(i - 1) {
                    cells[c] = Some(cell.to_string());
                }
            }
            self.rows.push((rec.get(0).unwrap_or("").to_string(), cells));
        }
        Ok(())
    }

    /// Appends a key=value report as one row named `name`.
    pub fn add_report(&mut self, name: &str, report: &MetricsReport) -> Result<()> {
        self.add_csv(&report.to_csv(name)?)
    }

    fn column_index(&mut self, name: &str) -> usize {
        if let Some(i) = self.columns.iter().position(|c| c == name) {
            return i;
        }
        self.columns.push(name.to_string());
        for (_, cells) in &mut self.rows {
            cells.push(None);
        }
        self.columns.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedColumn {
    pub column: String,
    pub direction: Direction,
    /// `(system, raw value, rank)` in input order; rank 1 is best and ties
    /// share a rank.
    pub entries: Vec<(String, String, usize)>,
}

impl RankedColumn {
    pub fn winners(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| e.2 == 1).map(|e| e.0.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub systems: Vec<String>,
    pub columns: Vec<RankedColumn>,
}

/// Ranks every column in which at least two systems report a number.
pub fn compare(table: &Table) -> Result<Comparison> {
    if table.rows.len() < 2 {
        return Err(Error::NoOverlap);
    }
    let mut columns = Vec::new();
    for (c, name) in table.columns.iter().enumerate() {
        let numeric: Vec<(usize, &str, f64)> = table
            .rows
            .iter()
            .enumerate()
            .filter_map(|(r, (_, cells))| {
                let raw = cells[c].as_deref()?;
                let v: f64 = raw.parse().ok()?;
                v.is_finite().then_some((r, raw, v))
            })
            .collect();
        if numeric.len() < 2 {
            continue;
        }
        let direction = Direction::of_column(name);
        let better = |a: f64, b: f64| match direction {
            Direction::Lower => a < b,
            Direction::Higher => a > b,
        };
        let entries = numeric
            .iter()
            .map(|&(r, raw, v)| {
                let rank = 1 + numeric.iter().filter(|&&(_, _, w)| better(w, v)).count();
                (table.rows[r].0.clone(), raw.to_string(), rank)
            })
            .collect();
        columns.push(RankedColumn {
            column: name.clone(),
            direction,
            entries,
        });
    }
    if columns.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(Comparison {
        systems: table.rows.iter().map(|(n, _)| n.clone()).collect(),
        columns,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for col in &self.columns {
            let _ = writeln!(s, "{} {}", col.column, col.direction.arrow());
            let mut order: Vec<&(String, String, usize)> = col.entries.iter().collect();
            order.sort_by_key(|e| e.2);
            for (sys, v, rank) in order {
                let _ = writeln!(s, "  {rank}. {sys}: {v}");
            }
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["column", "direction", "system", "value", "rank"]).map_err(csv_err)?;
        for col in &self.columns {
            let dir = match col.direction {
                Direction::Lower => "lower",
                Direction::Higher => "higher",
            };
            for (sys, v, rank) in &col.entries {
                w.write_record([col.column.as_str(), dir, sys, v, &rank.to_string()]).map_err(csv_err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?)
            .map_err(|e| Error::format("csv", e.to_string()))
    }
}

/// Loads CSV tables and key=value reports (`metrics.txt`) into one table.
pub fn load_table(paths: &[&Path]) -> Result<Table> {
    let mut t = Table::default();
    for p in paths {
        let text = std::fs::read_to_string(p)?;
        if p.extension().is_some_and(|e| e == "csv") {
            t.add_csv(&text)?;
        } else {
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            t.add_report(&name, &MetricsReport::from_kv(&text)?)?;
        }
    }
    Ok(t)
}
