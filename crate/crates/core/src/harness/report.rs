use std::fs;
use std::path::Path;

use serde::Serialize;

/// Marker written where a ratio could not be measured for lack of samples.
pub const INSUFFICIENT_DATA: &str = "insufficient_data";
/// Marker for a cell without concept neurons.
pub const NULL_CELL: &str = "null";

pub fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or_else(|| NULL_CELL.to_string(), |v| format!("{v:.6}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "row width of table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        w.into_inner().expect("in-memory csv")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.header.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }

    /// Column index by header name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub id: String,
    pub seed: u64,
    /// Effective configuration, enough to rerun the experiment.
    pub config: serde_json::Value,
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// `{table}.csv` per table, `config.json`, and `summary.md`. Only the
    /// summary carries `generated_at`, so the CSVs depend on inputs alone.
    pub fn write(&self, dir: &Path, generated_at: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
        }
        let config = serde_json::to_string_pretty(&self.config).expect("config serialises");
        fs::write(dir.join("config.json"), config + "\n")?;
        fs::write(dir.join("summary.md"), self.summary(generated_at))
    }

    pub fn summary(&self, generated_at: &str) -> String {
        let mut s = format!("# {}\n\nseed: {}  \ngenerated: {}\n", self.id, self.seed, generated_at);
        for t in &self.tables {
            s.push_str(&format!("\n## {}\n\n{}", t.name, t.to_markdown()));
        }
        if !self.notes.is_empty() {
            s.push_str("\n## notes\n\n");
            for n in &self.notes {
                s.push_str(&format!("- {n}\n"));
            }
        }
        s
    }
}
