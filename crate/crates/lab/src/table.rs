//! Tab-separated tables. Floats use Rust's shortest round-trip formatting,
//! so equal values always print identically.

use std::fmt::Write as _;
use std::path::Path;

use dmvae_core::dm::{MetricRow, RunRecord};
use dmvae_core::flow::LossTrace;
use dmvae_core::metrics::MetricReport;

use crate::error::{io_err, LabResult};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Missing,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Float)
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Float(v) => write!(f, "{v}"),
            // Tabs and newlines would break the row structure.
            Cell::Text(s) => write!(f, "{}", s.replace(['\t', '\n'], " ")),
            Cell::Missing => write!(f, "NA"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join("\t"));
        }
        s
    }

    /// Writes and flushes the table.
    pub fn write(&self, path: &Path) -> LabResult<()> {
        std::fs::write(path, self.to_tsv()).map_err(io_err(path))
    }
}

pub const REPORT_COLUMNS: &[&str] = &[
    "mmd",
    "kl_knn",
    "mode_recall",
    "mode_precision",
    "energy_distance",
    "spread",
    "n_samples",
    "n_reference",
];

pub fn report_cells(m: &MetricReport) -> Vec<Cell> {
    vec![
        m.mmd.into(),
        m.kl_knn.into(),
        m.mode_recall.into(),
        m.mode_precision.into(),
        m.energy_distance.into(),
        m.spread.into(),
        m.n_samples.into(),
        m.n_reference.into(),
    ]
}

pub fn metrics_table(rows: &[MetricRow]) -> Table {
    let mut h = vec!["step", "recon_mse", "fake_loss", "align_grad_norm", "encoder_grad_norm"];
    h.extend_from_slice(REPORT_COLUMNS);
    let mut t = Table::new(&h);
    for r in rows {
        let mut row = vec![
            r.step.into(),
            r.recon_mse.into(),
            r.fake_loss.into(),
            r.align_grad_norm.into(),
            r.encoder_grad_norm.into(),
        ];
        row.extend(report_cells(&r.metrics));
        t.push(row);
    }
    t
}

pub fn trace_table(trace: &LossTrace) -> Table {
    let mut t = Table::new(&["step", "loss"]);
    for (s, l) in trace.steps.iter().zip(&trace.losses) {
        t.push(vec![(*s).into(), (*l).into()]);
    }
    t
}

/// Wall-clock data, kept apart from the reproducible metric tables.
pub fn timings_table(record: &RunRecord) -> Table {
    let mut t = Table::new(&["step", "seconds"]);
    for (s, c) in &record.timings {
        t.push(vec![(*s).into(), (*c).into()]);
    }
    t.push(vec!["align_seconds_per_call".into(), record.align_seconds_per_call().into()]);
    t
}
