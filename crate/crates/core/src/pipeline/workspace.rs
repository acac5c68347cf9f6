//! Run directory: lockfile, append-only journal and artifact checksums.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

pub const LOCK_FILE: &str = "LOCK";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FAILED_FILE: &str = "failed.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn iteration_dir_name(t: usize) -> String {
    format!("iter_{t:03}")
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::WorkspaceLocked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub nodes: usize,
    pub source: usize,
    pub target: usize,
    pub edges: usize,
    pub isolated: usize,
    pub queries: usize,
    pub unscored_queries: usize,
    pub not_converged: usize,
    pub rank1: usize,
    pub matches: usize,
    pub labels: usize,
    pub suspicious_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreStats {
    pub fn of(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        Some(ScoreStats {
            min: s[0],
            median,
            max: s[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub status: String,
    /// Feature manifest the iteration started from.
    pub features_in: String,
    /// Prediction store the pseudo-labels drew from.
    pub predictions_in: String,
    pub w_t: f64,
    pub counts: IterationCounts,
    /// Statistics of the selected match scores.
    pub scores: Option<ScoreStats>,
    pub warnings: Vec<String>,
    pub trainer_exit: i32,
    pub eval: Option<EvalReport>,
    pub artifacts: Vec<Artifact>,
}

pub fn read_journal(run_dir: &Path) -> Result<Vec<IterationRecord>> {
    let path = run_dir.join(JOURNAL_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = String::from_utf8(binio::read_file(&path)?)
        .map_err(|_| Error::JournalCorrupt("journal is not UTF-8".into()))?;
    let mut records: Vec<IterationRecord> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let rec: IterationRecord = serde_json::from_str(line)
            .map_err(|e| Error::JournalCorrupt(format!("line {}: {e}", n + 1)))?;
        let expected = records.last().map_or(1, |r| r.t + 1);
        if rec.t != expected {
            return Err(Error::JournalCorrupt(format!(
                "line {}: iteration {} where {expected} was expected",
                n + 1,
                rec.t
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn append_journal(run_dir: &Path, record: &IterationRecord) -> Result<()> {
    let path = run_dir.join(JOURNAL_FILE);
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.write_all(&line).map_err(|e| Error::io(&path, e))?;
    f.sync_all().map_err(|e| Error::io(&path, e))
}

/// Checksums of every file under `dir` (recursively, sorted), with paths relative to `root`.
pub fn collect_artifacts(root: &Path, dir: &Path, skip: &[&str]) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("artifact under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if skip.iter().any(|s| rel.ends_with(s)) {
                continue;
            }
            out.push(Artifact {
                sha256: binio::file_checksum(&path)?,
                path: rel,
            });
        }
    }
    out.sort();
    Ok(out)
}

/// Problems found re-checking every journaled artifact; empty when all pass.
pub fn verify_run(run_dir: &Path) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    for rec in read_journal(run_dir)? {
        for a in &rec.artifacts {
            let path = run_dir.join(&a.path);
            if !path.exists() {
                problems.push(format!("t={}: missing {}", rec.t, a.path));
            } else if binio::file_checksum(&path)? != a.sha256 {
                problems.push(format!("t={}: checksum mismatch for {}", rec.t, a.path));
            }
        }
    }
    Ok(problems)
}
