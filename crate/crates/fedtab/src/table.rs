//! Typed tabular dataset: explicit schema, CSV ingestion, column accessors.
//!
//! The schema is never inferred from data. It arrives as a JSON sidecar so a
//! silent type misclassification cannot corrupt downstream statistics.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column type: real-valued or categorical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Discrete,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnKind::Continuous => write!(f, "continuous"),
            ColumnKind::Discrete => write!(f, "discrete"),
        }
    }
}

/// One column declaration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub label: bool,
}

/// Validated, ordered set of column declarations.
///
/// Invariants: unique names, exactly one label column, label is discrete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schema {
    columns: Vec<ColumnSchema>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSchema>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Schema("schema has no columns".into()));
        }
        let mut names = HashSet::new();
        for c in &columns {
            if !names.insert(c.name.clone()) {
                return Err(Error::Schema(format!("duplicate column name '{}'", c.name)));
            }
        }
        let labels: Vec<&ColumnSchema> = columns.iter().filter(|c| c.label).collect();
        if labels.len() != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one label column, found {}",
                labels.len()
            )));
        }
        if labels[0].kind != ColumnKind::Discrete {
            return Err(Error::Schema(format!(
                "label column '{}' must be discrete",
                labels[0].name
            )));
        }
        Ok(Schema { columns })
    }

    pub fn columns(&self) -> &[ColumnSchema] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn label_index(&self) -> usize {
        self.columns.iter().position(|c| c.label).expect("validated")
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Indices of continuous columns, in schema order.
    pub fn continuous_indices(&self) -> Vec<usize> {
        self.indices_of(ColumnKind::Continuous)
    }

    /// Indices of discrete columns (label included), in schema order.
    pub fn discrete_indices(&self) -> Vec<usize> {
        self.indices_of(ColumnKind::Discrete)
    }

    fn indices_of(&self, kind: ColumnKind) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_continuous(&self) -> usize {
        self.continuous_indices().len()
    }

    pub fn n_discrete(&self) -> usize {
        self.discrete_indices().len()
    }

    /// Loads the JSON sidecar: `{"columns":[{"name":..,"kind":..,"label":..}]}`.
    pub fn load_json(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Sidecar {
            columns: Vec<ColumnSchema>,
        }
        let text = std::fs::read_to_string(path)?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        Schema::new(sidecar.columns)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            columns: &'a [ColumnSchema],
        }
        let text = serde_json::to_string_pretty(&Sidecar {
            columns: &self.columns,
        })?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// One cell: finite real for continuous columns, token for discrete ones.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Continuous(f64),
    Discrete(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Continuous(v) => Some(*v),
            Cell::Discrete(_) => None,
        }
    }

    pub fn as_token(&self) -> Option<&str> {
        match self {
            Cell::Discrete(t) => Some(t),
            Cell::Continuous(_) => None,
        }
    }
}

/// Immutable typed table. Safe to share read-only across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    schema: Arc<Schema>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    /// Builds a table, checking every row against the schema.
    pub fn new(schema: Arc<Schema>, rows: Vec<Vec<Cell>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} cells, schema has {} columns",
                    i,
                    row.len(),
                    schema.len()
                )));
            }
            for (col, cell) in schema.columns().iter().zip(row) {
                match (col.kind, cell) {
                    (ColumnKind::Continuous, Cell::Continuous(v)) => {
                        if !v.is_finite() {
                            return Err(Error::Schema(format!(
                                "row {}, column '{}': non-finite value",
                                i, col.name
                            )));
                        }
                    }
                    (ColumnKind::Discrete, Cell::Discrete(_)) => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "row {}, column '{}': cell type does not match {} column",
                            i, col.name, col.kind
                        )));
                    }
                }
            }
        }
        Ok(Table { schema, rows })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Values of a continuous column, in row order.
    pub fn continuous_column(&self, index: usize) -> Result<Vec<f64>> {
        self.check_kind(index, ColumnKind::Continuous)?;
        Ok(self
            .rows
            .iter()
            .map(|r| r[index].as_f64().expect("validated"))
            .collect())
    }

    /// Tokens of a discrete column, in row order.
    pub fn discrete_column(&self, index: usize) -> Result<Vec<&str>> {
        self.check_kind(index, ColumnKind::Discrete)?;
        Ok(self
            .rows
            .iter()
            .map(|r| r[index].as_token().expect("validated"))
            .collect())
    }

    /// Tokens of the label column, in row order.
    pub fn labels(&self) -> Vec<&str> {
        let idx = self.schema.label_index();
        self.rows
            .iter()
            .map(|r| r[idx].as_token().expect("validated"))
            .collect()
    }

    fn check_kind(&self, index: usize, kind: ColumnKind) -> Result<()> {
        let col = self
            .schema
            .columns()
            .get(index)
            .ok_or_else(|| Error::Schema(format!("column index {} out of range", index)))?;
        if col.kind != kind {
            return Err(Error::Schema(format!(
                "column '{}' is {}, expected {}",
                col.name, col.kind, kind
            )));
        }
        Ok(())
    }

    /// New table with the same schema and a subset of rows (by index).
    pub fn select_rows(&self, indices: &[usize]) -> Table {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Table {
            schema: Arc::clone(&self.schema),
            rows,
        }
    }

    /// Row-concatenation of two tables sharing a schema.
    pub fn concat(&self, other: &Table) -> Result<Table> {
        if self.schema.as_ref() != other.schema.as_ref() {
            return Err(Error::Schema(
                "cannot concatenate tables with different schemas".into(),
            ));
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        Ok(Table {
            schema: Arc::clone(&self.schema),
            rows,
        })
    }
}

/// Parses CSV bytes against an explicit schema.
///
/// The header must match the schema names in order. Continuous cells must be
/// finite reals; any missing or unparseable cell rejects the whole load with
/// the offending (row, column).
pub fn load_table(csv_bytes: &[u8], schema: Arc<Schema>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_bytes);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Ingestion {
            row: 0,
            column: String::new(),
            message: "empty file".into(),
        });
    }
    let names: Vec<&str> = schema.columns().iter().map(|c| c.name.as_str()).collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != names {
        for name in &names {
            if !got.contains(name) {
                return Err(Error::Ingestion {
                    row: 0,
                    column: (*name).to_string(),
                    message: "missing column in CSV header".into(),
                });
            }
        }
        return Err(Error::Ingestion {
            row: 0,
            column: String::new(),
            message: format!(
                "header order mismatch: csv has [{}], schema expects [{}]",
                got.join(", "),
                names.join(", ")
            ),
        });
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1; // 1-based data row, header is row 0
        if record.len() != schema.len() {
            return Err(Error::Ingestion {
                row: row_no,
                column: String::new(),
                message: format!(
                    "expected {} cells, found {}",
                    schema.len(),
                    record.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(schema.len());
        for (col, raw) in schema.columns().iter().zip(record.iter()) {
            if raw.is_empty() {
                return Err(Error::Ingestion {
                    row: row_no,
                    column: col.name.clone(),
                    message: "missing cell".into(),
                });
            }
            match col.kind {
                ColumnKind::Continuous => {
                    let v: f64 = raw.trim().parse().map_err(|_| Error::Ingestion {
                        row: row_no,
                        column: col.name.clone(),
                        message: format!("cannot parse '{}' as a real number", raw),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Ingestion {
                            row: row_no,
                            column: col.name.clone(),
                            message: format!("non-finite value '{}'", raw),
                        });
                    }
                    row.push(Cell::Continuous(v));
                }
                ColumnKind::Discrete => row.push(Cell::Discrete(raw.to_string())),
            }
        }
        rows.push(row);
    }
    Table::new(schema, rows)
}

/// Loads a table from a CSV file plus its JSON schema sidecar.
pub fn load_table_with_schema(csv_path: &Path, schema_path: &Path) -> Result<Table> {
    let schema = Arc::new(Schema::load_json(schema_path)?);
    let bytes = std::fs::read(csv_path)?;
    load_table(&bytes, schema)
}

/// Writes a table as RFC-4180 CSV. `synthetic` adds a trailing `__synthetic`
/// provenance column when given.
pub fn write_csv<W: std::io::Write>(
    table: &Table,
    writer: W,
    synthetic: Option<&[bool]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = table
        .schema()
        .columns()
        .iter()
        .map(|c| c.name.clone())
        .collect();
    if synthetic.is_some() {
        header.push("__synthetic".into());
    }
    w.write_record(&header)?;
    for (i, row) in table.rows().iter().enumerate() {
        let mut record: Vec<String> = row
            .iter()
            .map(|cell| match cell {
                Cell::Continuous(v) => format!("{}", v),
                Cell::Discrete(t) => t.clone(),
            })
            .collect();
        if let Some(flags) = synthetic {
            record.push(if flags[i] { "1".into() } else { "0".into() });
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
