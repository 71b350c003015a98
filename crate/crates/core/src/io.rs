//! Header-free numeric CSV for matrices and vectors, plus serde helpers.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serializer;

use crate::error::{Error, Result};

/// Parses a rectangular, header-free CSV of numbers (row-major).
pub fn read_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {c}",
                    r + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Parse(format!("row {}, column {}: not a number: {field:?}", r + 1, c + 1))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::Empty("csv matrix"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_matrix(file).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Accepts a single column or a single row.
pub fn read_vector_file(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let m = read_matrix_file(path)?;
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(DVector::from_iterator(m.len(), m.iter().copied()))
    } else {
        Err(Error::Parse(format!(
            "expected a vector, found a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn write_matrix<W: Write>(writer: W, m: &DMatrix<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|v| format_f64(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// One value per line.
pub fn write_vector<W: Write>(writer: W, v: &DVector<f64>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for x in v.iter() {
        wtr.write_record([format_f64(*x)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that round-trips.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn serialize_dvector<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

pub(crate) fn serialize_opt_dvector<S: Serializer>(
    v: &Option<DVector<f64>>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_seq(v.iter()),
        None => s.serialize_none(),
    }
}
