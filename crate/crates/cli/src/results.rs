//! Result rows and their CSV form. The column set is part of the external
//! interface: one row per run, header order fixed, floats printed with Rust's
//! shortest round-trip formatting so `parse(emit(rows)) == rows`.

use dpaudit_core::error::{Error, Result};
use std::io::Write;

pub const CSV_HEADER: &str =
    "run_id,seed,flow,canary_mode,m,n,eps_target,sigma,delta,r,w,eps_lower,eps_opt,auc,train_acc,test_acc,wall_seconds";

/// One completed (or failed) run. Fields that do not apply to a flow hold NaN:
/// audit flows have no train/test accuracy, the toy flow has no guesses, and
/// failed runs keep only their identity columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub flow: String,
    pub canary_mode: String,
    pub m: u64,
    pub n: u64,
    pub eps_target: f64,
    pub sigma: f64,
    pub delta: f64,
    pub r: u64,
    pub w: u64,
    pub eps_lower: f64,
    pub eps_opt: f64,
    pub auc: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.flow,
            self.canary_mode,
            self.m,
            self.n,
            self.eps_target,
            self.sigma,
            self.delta,
            self.r,
            self.w,
            self.eps_lower,
            self.eps_opt,
            self.auc,
            self.train_acc,
            self.test_acc,
            self.wall_seconds,
        )
    }

    pub fn from_csv_line(line: &str) -> Result<ResultRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 17 {
            return Err(Error::parse(format!(
                "expected 17 columns, found {} in {line:?}",
                parts.len()
            )));
        }
        fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::parse(format!("bad numeric field {s:?}")))
        }
        Ok(ResultRow {
            run_id: parts[0].to_string(),
            seed: num(parts[1])?,
            flow: parts[2].to_string(),
            canary_mode: parts[3].to_string(),
            m: num(parts[4])?,
            n: num(parts[5])?,
            eps_target: num(parts[6])?,
            sigma: num(parts[7])?,
            delta: num(parts[8])?,
            r: num(parts[9])?,
            w: num(parts[10])?,
            eps_lower: num(parts[11])?,
            eps_opt: num(parts[12])?,
            auc: num(parts[13])?,
            train_acc: num(parts[14])?,
            test_acc: num(parts[15])?,
            wall_seconds: num(parts[16])?,
        })
    }

    /// Lower bounds can never beat the perfect-auditor value at the same m:
    /// rows violating this indicate an estimator bug, not a strong audit.
    pub fn bound_is_consistent(&self) -> bool {
        !self.eps_lower.is_finite() || self.eps_lower <= self.eps_opt + 1e-9
    }
}

pub fn emit_csv(rows: &[ResultRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv_line())?;
    }
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        Some(h) => {
            return Err(Error::parse(format!("unexpected CSV header {h:?}")));
        }
        None => return Err(Error::parse("empty results file")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(ResultRow::from_csv_line)
        .collect()
}

/// Streams rows to disk as they finish, so an interrupted sweep keeps its
/// completed work. The header is written on creation, every row is flushed.
pub struct CsvWriter<W: Write> {
    inner: W,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        writeln!(inner, "{CSV_HEADER}")?;
        inner.flush()?;
        Ok(CsvWriter { inner })
    }

    pub fn write_row(&mut self, row: &ResultRow) -> Result<()> {
        writeln!(self.inner, "{}", row.to_csv_line())?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn create_csv_file(path: &std::path::Path) -> Result<CsvWriter<std::fs::File>> {
    let file = std::fs::File::create(path)?;
    CsvWriter::new(file)
}
