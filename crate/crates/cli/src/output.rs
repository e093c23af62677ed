//! Tables with a versioned schema line, written as CSV or JSON.

use std::io::Write;

use serde_json::{json, Map, Value};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn opt(x: Option<f64>) -> Cell {
        x.map(Cell::Num).unwrap_or(Cell::Empty)
    }

    fn csv(&self) -> String {
        match self {
            Cell::Num(x) => format!("{x}"),
            Cell::Int(k) => k.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) if x.is_finite() => json!(x),
            Cell::Num(x) => json!(x.to_string()),
            Cell::Int(k) => json!(k),
            Cell::Text(s) => json!(s),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// Schema name, e.g. "theory-sweep".
    pub kind: &'static str,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(kind: &'static str, columns: Vec<String>) -> Self {
        Table { kind, columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width for {}", self.kind);
        self.rows.push(row);
    }

    pub fn header_line(&self) -> String {
        format!("# rfcal {} schema v{}", self.kind, SCHEMA_VERSION)
    }

    pub fn write(&self, fmt: Format, out: &mut dyn Write) -> Result<(), CliError> {
        match fmt {
            Format::Csv => {
                writeln!(out, "{}", self.header_line())?;
                let mut w = csv::Writer::from_writer(out);
                w.write_record(&self.columns)?;
                for r in &self.rows {
                    w.write_record(r.iter().map(Cell::csv))?;
                }
                w.flush()?;
            }
            Format::Json => {
                let rows: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|r| {
                        let mut m = Map::new();
                        for (c, v) in self.columns.iter().zip(r) {
                            m.insert(c.clone(), v.json());
                        }
                        Value::Object(m)
                    })
                    .collect();
                let doc = json!({ "schema": self.kind, "version": SCHEMA_VERSION, "columns": self.columns, "rows": rows });
                serde_json::to_writer_pretty(&mut *out, &doc)?;
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn to_string(&self, fmt: Format) -> String {
        let mut buf = Vec::new();
        self.write(fmt, &mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 output")
    }
}

/// Rows of a CSV written by `Table::write`, keyed by column name.
#[derive(Debug, Clone)]
pub struct ReadTable {
    pub kind: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReadTable {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let kind = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# rfcal "))
            .and_then(|l| l.split_whitespace().next())
            .map(str::to_string);
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let rows = r.records().map(|rec| rec.map(|x| x.iter().map(str::to_string).collect())).collect::<Result<_, _>>()?;
        Ok(ReadTable { kind, columns, rows })
    }

    pub fn col(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let mut t = Table::new("demo", vec!["a".into(), "b".into(), "c".into()]);
        t.push(vec![Cell::Num(0.1), Cell::Empty, "x".into()]);
        t.push(vec![Cell::Num(1e-300), Cell::Int(3), "y,z".into()]);
        let s = t.to_string(Format::Csv);
        assert!(s.starts_with("# rfcal demo schema v1\n"));
        let back = ReadTable::parse(&s).unwrap();
        assert_eq!(back.kind.as_deref(), Some("demo"));
        assert_eq!(back.rows[0], vec!["0.1", "", "x"]);
        assert_eq!(back.rows[1][0].parse::<f64>().unwrap(), 1e-300);
        assert_eq!(back.rows[1][2], "y,z");
        let j: Value = serde_json::from_str(&t.to_string(Format::Json)).unwrap();
        assert!(j["rows"][0]["b"].is_null());
    }
}
