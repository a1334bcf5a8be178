//! Results CSV: one row per (method, n_labeled, seed, split).
//!
//! The file starts with a `# satlearn config <hash>` comment line followed
//! by the fixed header `method,n_labeled,seed,split,auc_pr,auc_roc,error`.
//! Appends take an exclusive advisory lock so parallel cells can share a
//! file.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use satlearn::metrics::{aggregate, AggregateRecord, EvalRecord, Split};

use crate::config::Method;
use crate::{hash_line, strip_hash_line, CliError, Result};

pub const HEADER: &str = "method,n_labeled,seed,split,auc_pr,auc_roc,error";
pub const SUMMARY_HEADER: &str =
    "method,n_labeled,split,auc_pr_mean,auc_pr_std,auc_roc_mean,auc_roc_std,seeds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n_labeled: usize,
    pub seed: u64,
    pub split: Split,
    pub auc_pr: Option<f64>,
    pub auc_roc: Option<f64>,
    pub error: Option<String>,
}

pub type RowKey = (String, usize, u64, Split);

impl ResultRow {
    pub fn new(method: Method, n_labeled: usize, seed: u64, split: Split) -> Self {
        Self {
            method: method.to_string(),
            n_labeled,
            seed,
            split,
            auc_pr: None,
            auc_roc: None,
            error: None,
        }
    }

    pub fn failed_cell(method: Method, n: usize, seed: u64, error: &str) -> Vec<Self> {
        [Split::InDomain, Split::OutOfDomain]
            .into_iter()
            .map(|split| Self {
                error: Some(error.to_string()),
                ..Self::new(method, n, seed, split)
            })
            .collect()
    }

    pub fn key(&self) -> RowKey {
        (self.method.clone(), self.n_labeled, self.seed, self.split)
    }

    /// Both metrics present, as needed for aggregation.
    pub fn record(&self) -> Option<EvalRecord> {
        Some(EvalRecord {
            method: self.method.clone(),
            n_labeled: self.n_labeled,
            seed: self.seed,
            split: self.split,
            auc_roc: self.auc_roc?,
            auc_pr: self.auc_pr?,
        })
    }
}

fn encode(rows: &[ResultRow], with_header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(with_header)
        .from_writer(Vec::new());
    for r in rows {
        let mut r = r.clone();
        r.error = r.error.map(|e| e.replace(['\n', '\r'], " "));
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Usage(format!("csv buffer: {e}")))
}

/// Parses results CSV text, returning the config hash and rows.
pub fn parse_rows(text: &str) -> Result<(Option<String>, Vec<ResultRow>)> {
    let (hash, body) = strip_hash_line(text, "config");
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    if body.trim().is_empty() {
        return Ok((hash.map(str::to_string), Vec::new()));
    }
    let header: Vec<&str> = reader.headers()?.iter().collect();
    if header.join(",") != HEADER {
        return Err(CliError::Usage(format!(
            "unexpected results header `{}`",
            header.join(",")
        )));
    }
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()?;
    Ok((hash.map(str::to_string), rows))
}

pub fn read_rows(path: &Path) -> Result<(Option<String>, Vec<ResultRow>)> {
    if !path.exists() {
        return Ok((None, Vec::new()));
    }
    parse_rows(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
}

/// Keys already present in the file.
pub fn completed(path: &Path) -> Result<BTreeSet<RowKey>> {
    Ok(read_rows(path)?.1.iter().map(ResultRow::key).collect())
}

/// Appends rows under an exclusive lock, writing the hash line and header
/// into a new file. Refuses to mix rows from a different config.
pub fn append_rows(path: &Path, hash: &str, rows: &[ResultRow]) -> Result<()> {
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    file.lock().map_err(|e| CliError::io(path, e))?;
    let mut existing = String::new();
    file.seek(SeekFrom::Start(0))
        .and_then(|_| file.read_to_string(&mut existing))
        .map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    if existing.trim().is_empty() {
        out.extend_from_slice(hash_line("config", hash).as_bytes());
        out.extend_from_slice(HEADER.as_bytes());
        out.push(b'\n');
    } else {
        let (found, _) = strip_hash_line(&existing, "config");
        if found != Some(hash) {
            return Err(CliError::Usage(format!(
                "{} holds results of a different config ({}); use another --out",
                path.display(),
                found.unwrap_or("no hash")
            )));
        }
        if !existing.ends_with('\n') {
            out.push(b'\n');
        }
    }
    out.extend(encode(rows, false)?);
    file.write_all(&out).map_err(|e| CliError::io(path, e))?;
    file.unlock().map_err(|e| CliError::io(path, e))
}

/// Aggregates rows with both metrics present.
pub fn summarize(rows: &[ResultRow]) -> Vec<AggregateRecord> {
    let records: Vec<EvalRecord> = rows.iter().filter_map(ResultRow::record).collect();
    aggregate(&records)
}

pub fn summary_csv(hash: &str, summary: &[AggregateRecord]) -> String {
    let mut s = hash_line("config", hash);
    s.push_str(SUMMARY_HEADER);
    s.push('\n');
    for a in summary {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.method,
            a.n_labeled,
            a.split,
            a.auc_pr_mean,
            a.auc_pr_std,
            a.auc_roc_mean,
            a.auc_roc_std,
            a.seeds
        ));
    }
    s
}

/// Rows as CSV text with the hash line and header, for stdout.
pub fn render(hash: &str, rows: &[ResultRow]) -> Result<String> {
    let mut s = hash_line("config", hash);
    s.push_str(&String::from_utf8(encode(rows, true)?).expect("csv is utf-8"));
    Ok(s)
}
