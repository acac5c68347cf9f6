//! Rank-1 correspondences from diffusion scores, and their filtering.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::diffusion::ScoreTable;
use crate::error::{Error, Result};
use crate::ids::FragmentId;

/// Default absolute threshold on raw diffusion scores.
pub const DEFAULT_LAMBDA: f64 = 1e-8;
pub const DEFAULT_TOP_PERCENT: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub target_id: FragmentId,
    pub source_id: FragmentId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Keep pairs with `score >= lambda`.
    Threshold { lambda: f64 },
    /// Keep the `ceil(p * n)` best pairs.
    TopPercent { p: f64 },
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::Threshold {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl SelectionRule {
    fn validate(&self) -> Result<()> {
        match *self {
            SelectionRule::Threshold { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => Err(
                Error::InvalidParameter(format!("lambda must be finite and >= 0, got {lambda}")),
            ),
            SelectionRule::TopPercent { p } if !(p > 0.0 && p <= 1.0) => Err(Error::InvalidParameter(
                format!("top percent must lie in (0, 1], got {p}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Rank-1 pairs, best first (ties by target id), plus queries that had no scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankOne {
    pub pairs: Vec<MatchPair>,
    pub unscored: Vec<FragmentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMatches {
    pub pairs: Vec<MatchPair>,
    pub rule: SelectionRule,
    /// `Some("no-pairs-selected")` when nothing survived.
    pub warning: Option<&'static str>,
}

fn by_score_then_target(a: &MatchPair, b: &MatchPair) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.target_id.cmp(&b.target_id))
}

/// Highest-scoring source fragment per target query; ties go to the lower source id.
pub fn rank1_matches(table: &ScoreTable) -> Result<RankOne> {
    let mut out = RankOne::default();
    for row in &table.rows {
        let target_id = row.query.ok_or_else(|| {
            Error::InvalidParameter("batch-mode scores have no per-query rows to rank".into())
        })?;
        let best = row.entries.iter().copied().reduce(|best, e| {
            if e.1 > best.1 || (e.1 == best.1 && e.0 < best.0) {
                e
            } else {
                best
            }
        });
        match best {
            Some((source_id, score)) => out.pairs.push(MatchPair {
                target_id,
                source_id,
                score,
            }),
            None => out.unscored.push(target_id),
        }
    }
    out.pairs.sort_by(by_score_then_target);
    Ok(out)
}

/// Applies `rule` to score-descending rank-1 pairs; order is preserved.
pub fn filter(pairs: &[MatchPair], rule: SelectionRule) -> Result<FilteredMatches> {
    rule.validate()?;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(by_score_then_target);
    let kept: Vec<MatchPair> = match rule {
        SelectionRule::Threshold { lambda } => sorted.into_iter().filter(|m| m.score >= lambda).collect(),
        SelectionRule::TopPercent { p } => {
            let keep = top_count(p, sorted.len());
            sorted.truncate(keep);
            sorted
        }
    };
    let warning = if kept.is_empty() {
        warn!("no-pairs-selected: {} rank-1 pairs, none kept", pairs.len());
        Some("no-pairs-selected")
    } else {
        None
    };
    Ok(FilteredMatches {
        pairs: kept,
        rule,
        warning,
    })
}

/// `ceil(p * n)`, robust to `p * n` landing a rounding error above an integer.
pub fn top_count(p: f64, n: usize) -> usize {
    let raw = p * n as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (count as usize).min(n)
}

/// One `{target_id, source_id, score}` JSON object per line.
pub fn write_matches(path: &Path, pairs: &[MatchPair]) -> Result<()> {
    let mut out = String::new();
    for m in pairs {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    binio::write_file(path, out.as_bytes())
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchPair>> {
    let text = String::from_utf8(binio::read_file(path)?)
        .map_err(|_| Error::BadFormat(format!("{}: not UTF-8", path.display())))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: MatchPair = serde_json::from_str(line)
            .map_err(|e| Error::BadFormat(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if !(m.score.is_finite() && m.score >= 0.0) {
            return Err(Error::BadFormat(format!(
                "{} line {}: invalid score {}",
                path.display(),
                n + 1,
                m.score
            )));
        }
        pairs.push(m);
    }
    Ok(pairs)
}
