//! CSV reading and writing.
//!
//! Floats are written with 17 significant digits so a write-then-read
//! round trip is exact.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use pnrcal::calibration::{ScanData, ScanPoint, ScanSource};
use pnrcal::detector::TransferMatrix;

use crate::error::CliError;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Where a command's main CSV goes.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
        Some(p) => {
            let f = File::create(p).map_err(|e| io_err(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

pub fn io_err(path: &Path, source: io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `{prefix}_{name}.csv`
pub fn prefixed(prefix: &str, name: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}_{name}.csv"))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let message = match e.position() {
        Some(pos) => format!("line {}: {e}", pos.line()),
        None => e.to_string(),
    };
    CliError::Parse {
        path: path.display().to_string(),
        message,
    }
}

fn write_err(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("write failed: {e}"))
}

/// Scan as `t,clicks,trials`, with `# key=value` provenance lines first
/// and per-click-count columns `s0..sN` when histograms are present.
pub fn write_scan(out: &mut dyn Write, scan: &ScanData) -> Result<(), CliError> {
    writeln!(out, "# source={}", scan.source).map_err(write_err)?;
    for (k, v) in &scan.meta {
        if k != "source" {
            writeln!(out, "# {k}={v}").map_err(write_err)?;
        }
    }
    let hist_len = scan
        .points
        .iter()
        .filter_map(|p| p.histogram.as_ref().map(Vec::len))
        .max();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "clicks".into(), "trials".into()];
    if let Some(len) = hist_len {
        header.extend((0..len).map(|s| format!("s{s}")));
    }
    w.write_record(&header).map_err(write_err)?;
    for p in &scan.points {
        let mut row = vec![fmt_f64(p.t), p.clicks.to_string(), p.trials.to_string()];
        if let Some(len) = hist_len {
            let h = p.histogram.as_deref().unwrap_or(&[]);
            row.extend((0..len).map(|s| h.get(s).copied().unwrap_or(0).to_string()));
        }
        w.write_record(&row).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

pub fn read_scan(path: &Path) -> Result<ScanData, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_scan(&text, path)
}

pub fn parse_scan(text: &str, path: &Path) -> Result<ScanData, CliError> {
    let parse_err = |message: String| CliError::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut meta = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
    }
    let source = match meta.get("source") {
        Some(s) => s.parse::<ScanSource>().map_err(|e| parse_err(e.to_string()))?,
        None => ScanSource::Unknown,
    };

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(format!("missing column `{name}` (header must be t,clicks,trials)")))
    };
    let (ti, ci, ni) = (column("t")?, column("clicks")?, column("trials")?);
    let hist_cols: Vec<usize> = (0..)
        .map_while(|s| headers.iter().position(|h| h == format!("s{s}")))
        .collect();

    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .ok_or_else(|| parse_err(format!("line {line}: missing `{name}`")))
        };
        let bad = |name: &str, v: &str| parse_err(format!("line {line}: invalid {name} `{v}`"));
        let t_str = field(ti, "t")?;
        let t: f64 = t_str.parse().map_err(|_| bad("t", t_str))?;
        let c_str = field(ci, "clicks")?;
        let clicks: u64 = c_str.parse().map_err(|_| bad("clicks", c_str))?;
        let n_str = field(ni, "trials")?;
        let trials: u64 = n_str.parse().map_err(|_| bad("trials", n_str))?;
        let histogram = if hist_cols.is_empty() {
            None
        } else {
            let mut h = Vec::with_capacity(hist_cols.len());
            for &c in &hist_cols {
                let v = field(c, "histogram")?;
                h.push(v.parse().map_err(|_| bad("histogram count", v))?);
            }
            Some(h)
        };
        points.push(ScanPoint {
            t,
            clicks,
            trials,
            histogram,
        });
    }
    let mut scan = ScanData::new(points, source).map_err(|e| parse_err(e.to_string()))?;
    scan.meta = meta;
    Ok(scan)
}

/// Matrix with a header row of input indices; each row starts with its
/// output index.
pub fn write_matrix(out: &mut dyn Write, m: &TransferMatrix) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["out\\in".to_string()];
    header.extend((0..m.in_dim()).map(|j| j.to_string()));
    w.write_record(&header).map_err(write_err)?;
    for i in 0..m.out_dim() {
        let mut row = vec![i.to_string()];
        row.extend((0..m.in_dim()).map(|j| fmt_f64(m.entry(i, j))));
        w.write_record(&row).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// Writes a header and rows of pre-formatted cells.
pub fn write_table(out: &mut dyn Write, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(write_err)?;
    for r in rows {
        w.write_record(r).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}
