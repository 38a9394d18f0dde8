//! Run log: CSV rows behind a schema line, and a reader that checks it.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const SCHEMA: &str = "wireleg-log v1";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log: {0}")]
    Csv(#[from] csv::Error),
    #[error("unsupported log schema {found:?}, expected {SCHEMA:?}")]
    Schema { found: String },
    #[error("log has no column {0:?}")]
    MissingColumn(String),
    #[error("column {column:?} row {row}: cannot parse {value:?}")]
    Parse {
        column: String,
        row: usize,
        value: String,
    },
}

/// Column names for a robot with `wires` wires and `payloads` payloads.
pub fn columns(wires: usize, payloads: usize) -> Vec<String> {
    let mut c: Vec<String> = [
        "time", "mode", "x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
        "vx_ref", "vy_ref", "vz_ref", "wx_ref", "wy_ref", "wz_ref",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 1..=wires {
        for prefix in ["l", "ldot", "ldot_ref", "f", "f_ref", "i"] {
            c.push(format!("{prefix}{i}"));
        }
    }
    c.extend(
        [
            "wheel_left",
            "wheel_right",
            "roll_l",
            "pitch_l",
            "knee_l",
            "roll_r",
            "pitch_r",
            "knee_r",
            "contact_wheel_left",
            "contact_wheel_right",
            "contact_knee_left",
            "contact_knee_right",
            "contact_body",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    for j in 1..=payloads {
        c.push(format!("payload{j}_z"));
    }
    c.push("events".into());
    c
}

/// Value of one log cell. `None` is written as an empty field.
pub enum Cell<'a> {
    Num(Option<f64>),
    Text(&'a str),
}

/// Streams rows into an in-memory CSV buffer.
pub struct LogWriter {
    inner: csv::Writer<Vec<u8>>,
    width: usize,
    rows: usize,
    scratch: String,
}

impl LogWriter {
    pub fn new(columns: &[String], run_hash: &str) -> Result<Self, LogError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(format!("# {SCHEMA} hash={run_hash}\n").as_bytes());
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(buf);
        inner.write_record(columns)?;
        Ok(Self {
            inner,
            width: columns.len(),
            rows: 0,
            scratch: String::new(),
        })
    }

    pub fn row(&mut self, cells: &[Cell]) -> Result<(), LogError> {
        debug_assert_eq!(cells.len(), self.width);
        for c in cells {
            match c {
                Cell::Num(Some(v)) => {
                    self.scratch.clear();
                    write!(self.scratch, "{v}").expect("write to String");
                    self.inner.write_field(&self.scratch)?;
                }
                Cell::Num(None) => self.inner.write_field("")?,
                Cell::Text(t) => self.inner.write_field(t)?,
            }
        }
        self.inner.write_record(None::<&[u8]>)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(self) -> Result<Vec<u8>, LogError> {
        self.inner
            .into_inner()
            .map_err(|e| LogError::Io(e.into_error()))
    }
}

/// A log read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LogTable {
    pub hash: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl LogTable {
    pub fn read(path: &Path) -> Result<Self, LogError> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, LogError> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .unwrap_or(bytes.len());
        let first = String::from_utf8_lossy(&bytes[..split]).into_owned();
        let rest = bytes.get(split + 1..).unwrap_or(&[]);
        let tail = first
            .strip_prefix("# ")
            .and_then(|l| l.strip_prefix(SCHEMA))
            .filter(|t| t.is_empty() || t.starts_with(' '))
            .ok_or_else(|| LogError::Schema {
                found: first.clone(),
            })?;
        let hash = tail.trim().strip_prefix("hash=").unwrap_or("").to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(rest);
        let columns = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            hash,
            columns,
            rows,
        })
    }

    pub fn index(&self, name: &str) -> Result<usize, LogError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| LogError::MissingColumn(name.to_string()))
    }

    /// Numeric column; empty cells read as NaN.
    pub fn column(&self, name: &str) -> Result<Vec<f64>, LogError> {
        let k = self.index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(row, r)| {
                let v = &r[k];
                if v.is_empty() {
                    return Ok(f64::NAN);
                }
                v.parse().map_err(|_| LogError::Parse {
                    column: name.to_string(),
                    row,
                    value: v.clone(),
                })
            })
            .collect()
    }

    pub fn text_column(&self, name: &str) -> Result<Vec<&str>, LogError> {
        let k = self.index(name)?;
        Ok(self.rows.iter().map(|r| r[k].as_str()).collect())
    }

    /// Number of wires, from the `l<i>` columns.
    pub fn wire_count(&self) -> usize {
        (1..)
            .take_while(|i| self.columns.iter().any(|c| *c == format!("l{i}")))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cols = columns(2, 1);
        let mut w = LogWriter::new(&cols, "abc").unwrap();
        let mut cells: Vec<Cell> = (0..cols.len())
            .map(|k| Cell::Num(Some(k as f64 * 0.1)))
            .collect();
        cells[1] = Cell::Text("Free+WheelDriving");
        cells[22] = Cell::Num(None);
        *cells.last_mut().unwrap() = Cell::Text("attach_wire;transition");
        w.row(&cells).unwrap();
        assert_eq!(w.rows(), 1);
        let bytes = w.finish().unwrap();
        let t = LogTable::parse(&bytes).unwrap();
        assert_eq!(t.hash, "abc");
        assert_eq!(t.wire_count(), 2);
        assert_eq!(t.column("x").unwrap(), vec![0.2]);
        assert!(t.column(&cols[22]).unwrap()[0].is_nan());
        assert_eq!(
            t.text_column("events").unwrap(),
            vec!["attach_wire;transition"]
        );
        assert!(matches!(t.column("nope"), Err(LogError::MissingColumn(_))));
    }

    #[test]
    fn schema_is_checked() {
        assert!(matches!(
            LogTable::parse(b"time,x\n0,1\n"),
            Err(LogError::Schema { .. })
        ));
        assert!(matches!(
            LogTable::parse(b"# wireleg-log v0\ntime\n"),
            Err(LogError::Schema { .. })
        ));
    }
}
