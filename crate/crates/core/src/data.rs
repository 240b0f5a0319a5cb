//! Column-typed sample tables and CSV ingestion.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Numeric(_) => ColumnKind::Numeric,
            Column::Categorical(_) => ColumnKind::Categorical,
        }
    }

    fn cell(&self, row: usize) -> String {
        match self {
            Column::Numeric(v) => format!("{}", v[row]),
            Column::Categorical(v) => v[row].clone(),
        }
    }
}

/// Declared column types; undeclared columns are numeric.
pub type Schema = BTreeMap<String, ColumnKind>;

/// A table of samples with named, typed columns of equal length.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_column(mut self, name: impl Into<String>, column: Column) -> Result<Self> {
        self.push(name, column)?;
        Ok(self)
    }

    /// Single numeric column named `x`.
    pub fn from_values(values: Vec<f64>) -> Self {
        Dataset {
            names: vec!["x".into()],
            columns: vec![Column::Numeric(values)],
        }
    }

    /// Numeric columns `names[j]` from row-major samples.
    pub fn from_rows(names: &[&str], rows: &[Vec<f64>]) -> Result<Self> {
        let mut ds = Dataset::new();
        for (j, name) in names.iter().enumerate() {
            let col = rows
                .iter()
                .map(|r| {
                    r.get(j).copied().ok_or(Error::Shape {
                        expected: names.len(),
                        got: r.len(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            ds.push(*name, Column::Numeric(col))?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate column `{name}`")));
        }
        if let Some(first) = self.columns.first() {
            if first.len() != column.len() {
                return Err(Error::Shape {
                    expected: first.len(),
                    got: column.len(),
                });
            }
        }
        if let Column::Numeric(v) = &column {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Csv {
                    line: i + 2,
                    column: name,
                    message: "non-finite value".into(),
                });
            }
        }
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(Error::ColumnType {
                column: name.to_string(),
                expected: "numeric".into(),
            }),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&[String]> {
        match self.column(name)? {
            Column::Categorical(v) => Ok(v),
            Column::Numeric(_) => Err(Error::ColumnType {
                column: name.to_string(),
                expected: "categorical".into(),
            }),
        }
    }

    /// Names of every numeric column, in table order.
    pub fn numeric_names(&self) -> Vec<String> {
        self.names
            .iter()
            .zip(&self.columns)
            .filter(|(_, c)| c.kind() == ColumnKind::Numeric)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Row-major numeric samples over the listed columns.
    pub fn numeric_rows(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        let cols = names
            .iter()
            .map(|n| self.numeric(n))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.len())
            .map(|i| cols.iter().map(|c| c[i]).collect())
            .collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.names).map_err(csv_io)?;
        for i in 0..self.len() {
            out.write_record(self.columns.iter().map(|c| c.cell(i)))
                .map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Parses a headered CSV. Every column is numeric unless `schema` says otherwise.
pub fn parse_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().any(String::is_empty) {
        return Err(Error::Csv {
            line: 1,
            column: String::new(),
            message: "empty header".into(),
        });
    }
    for declared in schema.keys() {
        if !header.contains(declared) {
            return Err(Error::MissingColumn(declared.clone()));
        }
    }
    let kinds: Vec<ColumnKind> = header
        .iter()
        .map(|h| schema.get(h).copied().unwrap_or(ColumnKind::Numeric))
        .collect();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    let mut categorical: Vec<Vec<String>> = vec![Vec::new(); header.len()];

    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Csv {
            line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Csv {
                line,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let bad = |message: &str| Error::Csv {
                line,
                column: header[j].clone(),
                message: message.to_string(),
            };
            if cell.is_empty() {
                return Err(bad("empty cell"));
            }
            match kinds[j] {
                ColumnKind::Numeric => {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| bad(&format!("`{cell}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(bad("non-finite value"));
                    }
                    numeric[j].push(v);
                }
                ColumnKind::Categorical => categorical[j].push(cell.to_string()),
            }
        }
    }

    let mut ds = Dataset::new();
    for (j, name) in header.into_iter().enumerate() {
        let col = match kinds[j] {
            ColumnKind::Numeric => Column::Numeric(std::mem::take(&mut numeric[j])),
            ColumnKind::Categorical => Column::Categorical(std::mem::take(&mut categorical[j])),
        };
        ds.push(name, col)?;
    }
    Ok(ds)
}

pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(file, schema)
}

/// Mean and (population) standard deviation of a column.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = crate::numeric::compensated_sum(values.iter().copied()) / n;
    let var = crate::numeric::compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    (mean, var.sqrt())
}
