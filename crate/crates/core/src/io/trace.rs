//! Per-step trace CSV with a `#key=value` header block.

use std::fmt::Write as _;
use std::path::Path;

use crate::bisim::TraceRow;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 10] = [
    "t",
    "E_mean",
    "E_norm_mean",
    "grad_err",
    "conv_err",
    "slack_min",
    "agreement",
    "loss_qhat",
    "loss_ste",
    "lr",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceFile {
    pub header: Vec<(String, String)>,
    pub rows: Vec<TraceRow>,
}

impl TraceFile {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Header lines, the column line, then one line per row. Reals carry 17
    /// significant digits so every finite double round-trips exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "#{k}={v}");
        }
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        out.push_str(&self.body());
        out
    }

    /// The data rows alone, without header or column line.
    pub fn body(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = write!(out, "{}", r.t);
            for x in [
                r.e_mean,
                r.e_norm_mean,
                r.grad_err,
                r.conv_err,
                r.slack_min,
                r.agreement,
                r.loss_qhat,
                r.loss_ste,
                r.lr,
            ] {
                let _ = write!(out, ",{x:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = Vec::new();
        let mut rows = Vec::new();
        let mut seen_columns = false;
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            if !seen_columns {
                if let Some(kv) = line.strip_prefix('#') {
                    let (k, v) = kv.split_once('=').ok_or_else(|| Error::TraceRow {
                        row: 0,
                        msg: format!("header line without `=`: `{line}`"),
                    })?;
                    header.push((k.to_string(), v.to_string()));
                    continue;
                }
                if line != COLUMNS.join(",") {
                    return Err(Error::TraceRow {
                        row: 0,
                        msg: format!("unexpected column line `{line}`"),
                    });
                }
                seen_columns = true;
                continue;
            }
            rows.push(parse_row(line, rows.len())?);
        }
        if !seen_columns {
            return Err(Error::TraceRow {
                row: 0,
                msg: "missing column line".into(),
            });
        }
        Ok(Self { header, rows })
    }
}

fn parse_row(line: &str, row: usize) -> Result<TraceRow> {
    let err = |msg: String| Error::TraceRow { row, msg };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != COLUMNS.len() {
        return Err(err(format!(
            "expected {} fields, found {}",
            COLUMNS.len(),
            fields.len()
        )));
    }
    let t = fields[0]
        .parse::<u64>()
        .map_err(|_| err(format!("bad step `{}`", fields[0])))?;
    let mut x = [0.0f64; 9];
    for (slot, (field, name)) in x.iter_mut().zip(fields[1..].iter().zip(&COLUMNS[1..])) {
        *slot = field
            .parse()
            .map_err(|_| err(format!("bad {name} `{field}`")))?;
    }
    Ok(TraceRow {
        t,
        e_mean: x[0],
        e_norm_mean: x[1],
        grad_err: x[2],
        conv_err: x[3],
        slack_min: x[4],
        agreement: x[5],
        loss_qhat: x[6],
        loss_ste: x[7],
        lr: x[8],
    })
}

pub fn write_trace(path: &Path, trace: &TraceFile) -> Result<()> {
    std::fs::write(path, trace.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TraceFile::parse(&text)
}
