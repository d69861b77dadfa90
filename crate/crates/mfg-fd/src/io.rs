//! CSV and JSON artifacts: field dumps, turnpike curves, income-model tables.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::huggett::{BoundaryDiagnostics, HuggettParams, HuggettSolution};

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

pub fn fields_header(dim: usize) -> Vec<&'static str> {
    if dim == 2 {
        vec!["t", "x", "y", "u", "m"]
    } else {
        vec!["t", "x", "u", "m"]
    }
}

/// One row per node per level, levels outermost, then `y`, then `x`.
pub fn write_fields<W: Write>(out: W, grid: &Grid, u: &Field, m: &Field) -> Result<()> {
    if u.levels != m.levels || u.nodes != grid.nodes() || m.nodes != grid.nodes() {
        return Err(Error::Problem("field shapes do not match the grid".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(fields_header(grid.dim))?;
    for n in 0..u.levels {
        let t = fmt_f64(grid.time(n));
        for k in 0..grid.nodes() {
            let c = grid.coords(k);
            let mut rec = vec![t.clone(), fmt_f64(c[0])];
            if grid.dim == 2 {
                rec.push(fmt_f64(c[1]));
            }
            rec.push(fmt_f64(u.level(n)[k]));
            rec.push(fmt_f64(m.level(n)[k]));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_fields_file(path: &Path, grid: &Grid, u: &Field, m: &Field) -> Result<()> {
    write_fields(fs::File::create(path)?, grid, u, m)
}

/// Columns of a re-imported field dump.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldsTable {
    pub dim: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub m: Vec<f64>,
}

impl FieldsTable {
    pub fn rows(&self) -> usize {
        self.t.len()
    }
}

/// Parses a field dump; the header decides between the 1D and 2D layouts.
pub fn read_fields<R: Read>(input: R) -> Result<FieldsTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let dim = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["t", "x", "u", "m"] => 1,
        ["t", "x", "y", "u", "m"] => 2,
        other => return Err(Error::Config(format!("unexpected field header {other:?}"))),
    };
    let mut table = FieldsTable { dim, t: vec![], x: vec![], y: vec![], u: vec![], m: vec![] };
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Config(format!("row {}: expected {} columns", line + 2, header.len())));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for cell in rec.iter() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("row {}: `{cell}` is not a number", line + 2)))?;
            vals.push(v);
        }
        table.t.push(vals[0]);
        table.x.push(vals[1]);
        if dim == 2 {
            table.y.push(vals[2]);
        }
        table.u.push(vals[dim + 1]);
        table.m.push(vals[dim + 2]);
    }
    Ok(table)
}

pub fn read_fields_file(path: &Path) -> Result<FieldsTable> {
    read_fields(fs::File::open(path)?)
}

/// `(h^d sum (a - b)^2)^(1/2)`.
pub fn weighted_l2_distance(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    (grid.cell_volume() * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sqrt()
}

/// Distance of every density level to the stationary reference, summed in
/// quadrature over populations.
pub fn turnpike_curve(grid: &Grid, m: &[Field], reference: &[Vec<f64>]) -> Vec<f64> {
    (0..m[0].levels)
        .map(|n| {
            m.iter().zip(reference).map(|(f, r)| weighted_l2_distance(grid, f.level(n), r).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

pub fn write_turnpike(path: &Path, grid: &Grid, distance: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "distance"])?;
    for (n, d) in distance.iter().enumerate() {
        w.write_record([fmt_f64(grid.time(n)), fmt_f64(*d)])?;
    }
    w.flush()?;
    Ok(())
}

/// Named columns sharing the time axis, e.g. remaining mass per model.
pub fn write_series(path: &Path, grid: &Grid, names: &[&str], series: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t"];
    header.extend_from_slice(names);
    w.write_record(&header)?;
    for n in 0..series.first().map_or(0, Vec::len) {
        let mut rec = vec![fmt_f64(grid.time(n))];
        rec.extend(series.iter().map(|s| fmt_f64(s[n])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `x,income,v,m` with incomes numbered 1 and 2.
pub fn write_huggett_fields(path: &Path, p: &HuggettParams, sol: &HuggettSolution) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["x", "income", "v", "m"])?;
    for j in 0..2 {
        for i in 0..=p.n {
            w.write_record([fmt_f64(p.x(i)), (j + 1).to_string(), fmt_f64(sol.v[j][i]), fmt_f64(sol.m[j][i])])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_huggett_scalars(path: &Path, sol: &HuggettSolution, diag: &BoundaryDiagnostics) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["name", "value"])?;
    for (k, v) in [("r", sol.r), ("mu1", diag.mu1), ("mu2", diag.mu2)] {
        w.write_record([k.to_string(), fmt_f64(v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
