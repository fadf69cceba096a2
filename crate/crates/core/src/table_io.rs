//! Gain-table CSV format: `basis,mu_a,mu_b,Q,E`, one row per cell.
//!
//! Written values use scientific notation with 17 significant digits so a
//! table survives a write/read cycle bit-for-bit. The reader also accepts
//! error rates written as percentages (`29.5%`) and files that carry only one
//! basis; partial files are merged with [`PartialTable::merge`].

use std::io::{Read, Write};

use thiserror::Error;

use crate::model::{cell_keys, Basis, Cell, GainTable, Intensity, ModelError};

pub const GAIN_HEADER: [&str; 5] = ["basis", "mu_a", "mu_b", "Q", "E"];

#[derive(Debug, Error)]
pub enum TableError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("header must be {expected:?}, found {found:?}")]
    Header { expected: Vec<String>, found: Vec<String> },
    #[error("cell {basis} {ia}{ib} appears more than once")]
    Duplicate { basis: Basis, ia: Intensity, ib: Intensity },
    #[error("missing cells: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Formats a float the way table and sweep files carry it.
pub fn fmt_sci(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_gain_table<W: Write>(w: W, table: &GainTable) -> Result<(), TableError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(GAIN_HEADER)?;
    for (b, ia, ib, c) in table.iter() {
        out.write_record([b.label(), ia.label(), ib.label(), &fmt_sci(c.q), &fmt_sci(c.e)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn gain_table_to_string(table: &GainTable) -> String {
    let mut buf = Vec::new();
    write_gain_table(&mut buf, table).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Cells read from one file; any subset of the 18 may be present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialTable {
    cells: [[[Option<Cell>; 3]; 3]; 2],
}

impl PartialTable {
    pub fn get(&self, b: Basis, ia: Intensity, ib: Intensity) -> Option<Cell> {
        self.cells[b.index()][ia.index()][ib.index()]
    }

    pub fn set(&mut self, b: Basis, ia: Intensity, ib: Intensity, c: Cell) -> Result<(), TableError> {
        let slot = &mut self.cells[b.index()][ia.index()][ib.index()];
        if slot.is_some() {
            return Err(TableError::Duplicate { basis: b, ia, ib });
        }
        *slot = Some(c);
        Ok(())
    }

    pub fn merge(mut self, other: &PartialTable) -> Result<PartialTable, TableError> {
        for (b, ia, ib) in cell_keys() {
            if let Some(c) = other.get(b, ia, ib) {
                self.set(b, ia, ib, c)?;
            }
        }
        Ok(self)
    }

    pub fn has_basis(&self, b: Basis) -> bool {
        Intensity::ALL
            .iter()
            .all(|&ia| Intensity::ALL.iter().all(|&ib| self.get(b, ia, ib).is_some()))
    }

    pub fn complete(&self) -> Result<GainTable, TableError> {
        let missing: Vec<String> = cell_keys()
            .filter(|&(b, ia, ib)| self.get(b, ia, ib).is_none())
            .map(|(b, ia, ib)| format!("{b}{ia}{ib}"))
            .collect();
        if !missing.is_empty() {
            return Err(TableError::Incomplete(missing.join(",")));
        }
        Ok(GainTable::from_fn(|b, ia, ib| self.get(b, ia, ib).expect("checked"))?)
    }
}

impl From<&GainTable> for PartialTable {
    fn from(t: &GainTable) -> Self {
        let mut p = PartialTable::default();
        for (b, ia, ib, c) in t.iter() {
            p.cells[b.index()][ia.index()][ib.index()] = Some(c);
        }
        p
    }
}

fn parse_rate(s: &str) -> Option<f64> {
    let s = s.trim();
    match s.strip_suffix('%') {
        Some(p) => p.trim().parse::<f64>().ok().map(|v| v / 100.0),
        None => s.parse().ok(),
    }
}

pub fn read_partial_table<R: Read>(r: R) -> Result<PartialTable, TableError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != GAIN_HEADER {
        return Err(TableError::Header {
            expected: GAIN_HEADER.iter().map(|s| s.to_string()).collect(),
            found: header,
        });
    }
    let mut out = PartialTable::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let err = |msg: String| TableError::Parse { line, msg };
        if rec.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", rec.len())));
        }
        let b = Basis::parse(&rec[0]).ok_or_else(|| err(format!("unknown basis {:?}", &rec[0])))?;
        let ia = Intensity::parse(&rec[1]).ok_or_else(|| err(format!("unknown intensity {:?}", &rec[1])))?;
        let ib = Intensity::parse(&rec[2]).ok_or_else(|| err(format!("unknown intensity {:?}", &rec[2])))?;
        let q: f64 = rec[3].parse().map_err(|_| err(format!("bad gain {:?}", &rec[3])))?;
        let e = parse_rate(&rec[4]).ok_or_else(|| err(format!("bad error rate {:?}", &rec[4])))?;
        if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&e) {
            return Err(err(format!("cell values out of [0, 1]: Q={q}, E={e}")));
        }
        out.set(b, ia, ib, Cell { q, e })?;
    }
    Ok(out)
}

pub fn read_gain_table<R: Read>(r: R) -> Result<GainTable, TableError> {
    read_partial_table(r)?.complete()
}
