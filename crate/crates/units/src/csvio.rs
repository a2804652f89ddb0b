//! CSV tables: a header row, one row per timestep, one column per variable
//! and an optional integer label column.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use units_core::{Scalar, Tensor};

use crate::error::{Result, UnitsError};

/// Column name treated as labels when present and not listed as a variable.
pub const LABEL_COLUMN: &str = "label";

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    /// `[rows, columns.len()]`
    pub values: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| UnitsError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> UnitsError {
    let line = e.position().map_or(0, csv::Position::line);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => UnitsError::io(path, io),
        csv::ErrorKind::Utf8 { err, .. } => UnitsError::csv(path, line, format!("invalid UTF-8: {err}")),
        other => UnitsError::csv(path, line, format!("{other:?}")),
    }
}

/// Reads a table. `variables` selects and orders value columns (default:
/// every column except the label column); `label` names the label column,
/// which must exist when given explicitly.
pub fn read_table(path: &Path, variables: Option<&[String]>, label: Option<&str>) -> Result<Table> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(UnitsError::csv(path, 1, "empty file: missing header row"));
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let label_idx = match label {
        Some(l) => Some(find(l).ok_or_else(|| UnitsError::csv(path, 1, format!("no label column `{l}`")))?),
        None => find(LABEL_COLUMN).filter(|_| variables.is_none_or(|v| !v.iter().any(|c| c == LABEL_COLUMN))),
    };
    let var_idx: Vec<usize> = match variables {
        Some(cols) => cols
            .iter()
            .map(|c| find(c).ok_or_else(|| UnitsError::csv(path, 1, format!("no column `{c}`"))))
            .collect::<Result<_>>()?,
        None => (0..header.len()).filter(|&i| Some(i) != label_idx).collect(),
    };
    if var_idx.is_empty() {
        return Err(UnitsError::csv(path, 1, "no variable columns"));
    }

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, csv::Position::line);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != header.len() {
            return Err(UnitsError::csv(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        for &i in &var_idx {
            let v: Scalar = rec[i].parse().map_err(|_| {
                UnitsError::csv(path, line, format!("column `{}`: `{}` is not a number", header[i], &rec[i]))
            })?;
            values.push(v);
        }
        if let (Some(i), Some(ls)) = (label_idx, labels.as_mut()) {
            let l: usize = rec[i].parse().map_err(|_| {
                UnitsError::csv(path, line, format!("label `{}` is not a non-negative integer", &rec[i]))
            })?;
            ls.push(l);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(units_core::Error::Data(format!("{}: no data rows", path.display())).into());
    }
    Ok(Table {
        columns: var_idx.iter().map(|&i| header[i].clone()).collect(),
        values: Tensor::new(&[rows, var_idx.len()], values)?,
        labels,
    })
}

/// Writes a table; values use the shortest representation that parses
/// back to the same number.
pub fn write_table(path: &Path, table: &Table) -> Result<()> {
    let v = table.columns.len();
    if table.values.rank() != 2 || table.values.shape()[1] != v {
        return Err(UnitsError::Usage(format!(
            "table of shape {:?} does not match {v} columns",
            table.values.shape()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::with_capacity(v + 1);
    if table.labels.is_some() {
        header.push(LABEL_COLUMN);
    }
    header.extend(table.columns.iter().map(String::as_str));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (r, row) in table.values.data().chunks(v.max(1)).enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(v + 1);
        if let Some(ls) = &table.labels {
            fields.push(ls[r].to_string());
        }
        fields.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&fields).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| UnitsError::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| UnitsError::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| UnitsError::io(path, e))?;
    f.write_all(bytes).map_err(|e| UnitsError::io(path, e))
}

/// Single-column 0/1 mask, one row per timestep. A header-only file means
/// nothing is missing.
pub fn read_mask(path: &Path, rows: usize) -> Result<Vec<bool>> {
    let mut rdr = reader(path)?;
    rdr.headers().map_err(|e| csv_err(path, e))?;
    let mut mask = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, csv::Position::line);
        let flag = match rec.get(0) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            Some("") if rec.len() == 1 => continue,
            other => return Err(UnitsError::csv(path, line, format!("mask value {other:?} is not 0 or 1"))),
        };
        mask.push(flag);
    }
    if mask.is_empty() {
        return Ok(vec![false; rows]);
    }
    if mask.len() != rows {
        return Err(UnitsError::csv(path, 0, format!("mask has {} rows, input has {rows}", mask.len())));
    }
    Ok(mask)
}

/// Header row then one formatted row per record.
pub fn write_rows<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| UnitsError::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}
