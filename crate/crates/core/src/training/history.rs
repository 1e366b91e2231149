//! Loss history CSV: `iteration,loss_d,loss_g,loss_c,wall_time`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::LossRecord;
use crate::error::{Error, Result};

pub const HEADER: [&str; 5] = ["iteration", "loss_d", "loss_g", "loss_c", "wall_time"];

fn row(r: &LossRecord) -> [String; 5] {
    [
        r.iteration.to_string(),
        r.loss_d.to_string(),
        r.loss_g.to_string(),
        r.loss_c.to_string(),
        r.wall_time.to_string(),
    ]
}

/// Appends records to a history file, flushing after each one.
pub struct HistoryWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl HistoryWriter {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(BufWriter::new(file)),
        };
        w.write_fields(&HEADER.map(String::from))?;
        Ok(w)
    }

    fn write_fields(&mut self, fields: &[String; 5]) -> Result<()> {
        self.inner
            .write_record(fields)
            .and_then(|_| self.inner.flush().map_err(csv::Error::from))
            .map_err(|e| Error::io(&self.path, std::io::Error::other(e)))
    }

    pub fn append(&mut self, r: &LossRecord) -> Result<()> {
        self.write_fields(&row(r))
    }
}

pub fn write_history(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = HistoryWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    Ok(())
}

/// Parses a history. A file without data rows is an error.
pub fn read_history(path: &Path) -> Result<Vec<LossRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_history(file)
}

pub fn parse_history(reader: impl std::io::Read) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = Vec::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if !saw_header {
            if rec.iter().collect::<Vec<_>>() != HEADER {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected header {}", HEADER.join(",")),
                });
            }
            saw_header = true;
            continue;
        }
        if rec.len() != HEADER.len() {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} fields, got {}", HEADER.len(), rec.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                reason: format!("{} is not a number: {:?}", HEADER[k], &rec[k]),
            })
        };
        let iteration = rec[0].trim().parse::<usize>().map_err(|_| Error::Parse {
            line,
            reason: format!("iteration is not a count: {:?}", &rec[0]),
        })?;
        records.push(LossRecord {
            iteration,
            loss_d: num(1)?,
            loss_g: num(2)?,
            loss_c: num(3)?,
            wall_time: num(4)?,
        });
    }
    if !saw_header {
        return Err(Error::Parse {
            line: 1,
            reason: "missing header".into(),
        });
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 2,
            reason: "history has no data rows".into(),
        });
    }
    Ok(records)
}
