use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value as Json};

use super::config::{ExperimentConfig, Format};
use super::CliError;
use crate::model::{Grid, QueueState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Json {
        match self {
            Cell::Int(v) => Json::from(*v),
            Cell::Float(v) => {
                serde_json::Number::from_f64(*v).map_or_else(|| Json::String(v.to_string()), Json::Number)
            }
            Cell::Bool(v) => Json::Bool(*v),
            Cell::Text(s) => Json::String(s.clone()),
            Cell::Empty => Json::Null,
        }
    }
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

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    /// A table whose first columns are the state coordinates `x1..xn`.
    pub fn with_coordinates(name: &str, grid: &Grid, columns: &[&str]) -> Self {
        let mut t = Self::new(name, &[]);
        t.columns = (1..=grid.n).map(|i| format!("x{i}")).chain(columns.iter().map(|c| c.to_string())).collect();
        t
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn push_state(&mut self, x: &QueueState, rest: Vec<Cell>) {
        let mut row: Vec<Cell> = x.lengths().iter().map(|&v| Cell::from(v)).collect();
        row.extend(rest);
        self.push(row);
    }
}

/// Provenance lines written ahead of every table.
pub fn metadata(command: &str, config: &ExperimentConfig, timestamp: bool) -> Vec<(String, String)> {
    let mut meta = vec![
        ("schema_version".to_string(), SCHEMA_VERSION.to_string()),
        ("generator".to_string(), format!("routeguard {}", env!("CARGO_PKG_VERSION"))),
        ("command".to_string(), command.to_string()),
    ];
    if timestamp {
        let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        meta.push(("generated_unix".to_string(), secs.to_string()));
    }
    if let Ok(grid) = config.grid() {
        meta.push(("grid.margin".to_string(), grid.margin.to_string()));
    }
    // Where the tables land is not part of how they were produced.
    let mut value = toml::Value::try_from(config).expect("config serializes");
    if let Some(out) = value.get_mut("output").and_then(toml::Value::as_table_mut) {
        out.remove("path");
    }
    flatten("", &value, &mut meta);
    meta
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn render(table: &Table, meta: &[(String, String)], format: Format) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => {
            for (k, v) in meta {
                writeln!(buf, "# {k}={v}").map_err(io)?;
            }
            writeln!(buf, "# table={}", table.name).map_err(io)?;
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&table.columns).map_err(|e| CliError::Io(e.to_string()))?;
            for row in &table.rows {
                w.write_record(row.iter().map(Cell::csv)).map_err(|e| CliError::Io(e.to_string()))?;
            }
            w.flush().map_err(io)?;
        }
        Format::Json => {
            let meta: Map<String, Json> = meta.iter().map(|(k, v)| (k.clone(), Json::String(v.clone()))).collect();
            let rows: Vec<Json> = table
                .rows
                .iter()
                .map(|r| Json::Object(table.columns.iter().cloned().zip(r.iter().map(Cell::json)).collect()))
                .collect();
            let doc = serde_json::json!({ "table": table.name, "meta": meta, "rows": rows });
            serde_json::to_writer_pretty(&mut buf, &doc).map_err(|e| CliError::Io(e.to_string()))?;
            buf.push(b'\n');
        }
    }
    Ok(buf)
}

fn io(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// Write each table to `<dir>/<name>.<ext>`, or to stdout when `dir` is absent.
pub fn emit(tables: &[Table], meta: &[(String, String)], format: Format, dir: Option<&Path>) -> Result<(), CliError> {
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let stdout = std::io::stdout();
    for (k, table) in tables.iter().enumerate() {
        let bytes = render(table, meta, format)?;
        match dir {
            Some(dir) => {
                let path = dir.join(format!("{}.{ext}", table.name));
                std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            None => {
                let mut out = stdout.lock();
                if k > 0 {
                    writeln!(out).map_err(io)?;
                }
                out.write_all(&bytes).map_err(io)?;
            }
        }
    }
    Ok(())
}

/// Read a `protect` column keyed by `x1..xn` from a CSV table.
pub fn read_policy_csv(path: &Path, grid: &Grid) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).flat_map(|l| [l, "\n"]).collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column {name}")));
    let coords = (1..=grid.n).map(|i| col(&format!("x{i}"))).collect::<Result<Vec<_>, _>>()?;
    let protect = col("protect")?;
    let mut probs = vec![f64::NAN; grid.len()];
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let parse_usize = |i: usize| record[i].trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        let x = QueueState::new(coords.iter().map(|&c| parse_usize(c)).collect::<Result<_, _>>()?);
        let idx = grid.index_of(&x).map_err(|e| bad(e.to_string()))?;
        probs[idx] = record[protect].trim().parse::<f64>().map_err(|e| bad(e.to_string()))?;
    }
    if let Some(idx) = probs.iter().position(|p| p.is_nan()) {
        return Err(bad(format!("no entry for state {}", grid.state_at(idx))));
    }
    Ok(probs)
}
