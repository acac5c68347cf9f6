//! `key = value` run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{SelectionRule, DEFAULT_LAMBDA, DEFAULT_TOP_PERCENT};
use crate::binio;
use crate::diffusion::{DiffusionConfig, Mode, Solver};
use crate::error::{Error, Result};
use crate::features::DEFAULT_GAMMA;
use crate::graph::DEFAULT_K;
use crate::patch::{Extent, DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::pseudolabel::WeightSchedule;

pub const DEFAULT_MAX_ITERATIONS: usize = 4;

/// Everything that determines a run. Paths are kept as written and resolved
/// against the directory of the config file, so the run id does not depend on
/// where the inputs live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub features: String,
    pub gt_dir: String,
    pub pred_dir: String,
    pub patches_dir: Option<String>,
    /// JSON object mapping target image number to its true count.
    pub eval_gt: Option<String>,
    pub window: Extent,
    pub stride: Extent,
    pub k: usize,
    pub gamma: f64,
    pub diffusion: DiffusionConfig,
    pub rule: SelectionRule,
    pub wt: WeightSchedule,
    pub max_iterations: usize,
    pub early_stop: bool,
    pub trainer: Vec<String>,
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// A config with defaults for everything but the inputs.
    pub fn new(features: &str, gt_dir: &str, pred_dir: &str) -> Self {
        RunConfig {
            features: features.into(),
            gt_dir: gt_dir.into(),
            pred_dir: pred_dir.into(),
            patches_dir: None,
            eval_gt: None,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            k: DEFAULT_K,
            gamma: DEFAULT_GAMMA,
            diffusion: DiffusionConfig::default(),
            rule: SelectionRule::default(),
            wt: WeightSchedule::Auto,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            early_stop: false,
            trainer: Vec::new(),
            seed: 0,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(binio::read_file(path)?)
            .map_err(|_| Error::InvalidConfig(format!("{}: not UTF-8", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut features = None;
        let mut gt_dir = None;
        let mut pred_dir = None;
        let mut cfg = RunConfig::new("", "", "");
        let mut rule_name = "threshold".to_string();
        let mut lambda = DEFAULT_LAMBDA;
        let mut top_percent = DEFAULT_TOP_PERCENT;

        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            let raw_value = value.trim();
            let value = unquote(raw_value);
            let bad = |what: &str| Error::InvalidConfig(format!("line {}: {key}: {what} (got {value:?})", n + 1));
            match key {
                "features" => features = Some(value.to_string()),
                "gt_dir" => gt_dir = Some(value.to_string()),
                "pred_dir" => pred_dir = Some(value.to_string()),
                "patches_dir" => cfg.patches_dir = Some(value.to_string()),
                "eval_gt" => cfg.eval_gt = Some(value.to_string()),
                "window" => cfg.window = parse_extent(value).ok_or_else(|| bad("expected N or HxW"))?,
                "stride" => cfg.stride = parse_extent(value).ok_or_else(|| bad("expected N or HxW"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("expected an integer"))?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad("expected a number"))?,
                "alpha" => cfg.diffusion.alpha = value.parse().map_err(|_| bad("expected a number"))?,
                "mode" => {
                    cfg.diffusion.mode = match value {
                        "per-query" => Mode::PerQuery,
                        "batch" => Mode::Batch,
                        _ => return Err(bad("expected per-query or batch")),
                    }
                }
                "solver" => {
                    cfg.diffusion.solver = match value {
                        "cg" => Solver::Cg,
                        "iterate" => Solver::Iterate,
                        "truncated" => Solver::Truncated,
                        _ => return Err(bad("expected cg, iterate or truncated")),
                    }
                }
                "nn" => cfg.diffusion.nn = value.parse().map_err(|_| bad("expected an integer"))?,
                "truncation" => {
                    cfg.diffusion.truncation = Some(value.parse().map_err(|_| bad("expected an integer"))?)
                }
                "tol" => cfg.diffusion.tol = value.parse().map_err(|_| bad("expected a number"))?,
                "max_iter" => cfg.diffusion.cg_max_iter = value.parse().map_err(|_| bad("expected an integer"))?,
                "walk_max_iter" => {
                    cfg.diffusion.walk_max_iter = value.parse().map_err(|_| bad("expected an integer"))?
                }
                "rule" => rule_name = value.to_string(),
                "lambda" => lambda = value.parse().map_err(|_| bad("expected a number"))?,
                "top_percent" => top_percent = value.parse().map_err(|_| bad("expected a number"))?,
                "wt" => {
                    cfg.wt = if value == "auto" {
                        WeightSchedule::Auto
                    } else {
                        WeightSchedule::Fixed(value.parse().map_err(|_| bad("expected auto or a number"))?)
                    }
                }
                "max_iterations" => cfg.max_iterations = value.parse().map_err(|_| bad("expected an integer"))?,
                "early_stop" => cfg.early_stop = value.parse().map_err(|_| bad("expected true or false"))?,
                "trainer" => cfg.trainer = split_command(raw_value).map_err(|e| bad(&e))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("expected an integer"))?,
                _ => return Err(Error::InvalidConfig(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        cfg.rule = match rule_name.as_str() {
            "threshold" => SelectionRule::Threshold { lambda },
            "top-percent" => SelectionRule::TopPercent { p: top_percent },
            other => return Err(Error::InvalidConfig(format!("rule: expected threshold or top-percent, got {other:?}"))),
        };
        let missing = |k: &str| Error::InvalidConfig(format!("missing required key {k:?}"));
        cfg.features = features.ok_or_else(|| missing("features"))?;
        cfg.gt_dir = gt_dir.ok_or_else(|| missing("gt_dir"))?;
        cfg.pred_dir = pred_dir.ok_or_else(|| missing("pred_dir"))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window.0 == 0 || self.window.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("window and stride must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        let d = &self.diffusion;
        if !(d.alpha > 0.0 && d.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", d.alpha));
        }
        if d.mode == Mode::Batch {
            return bad("batch mode gives no per-target ranking; the pipeline needs mode = per-query".into());
        }
        if d.nn == 0 || d.truncation == Some(0) || d.cg_max_iter == 0 || d.walk_max_iter == 0 {
            return bad("nn, truncation and iteration caps must be at least 1".into());
        }
        if !(d.tol > 0.0 && d.tol.is_finite()) {
            return bad(format!("tol must be positive, got {}", d.tol));
        }
        match self.rule {
            SelectionRule::Threshold { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                return bad(format!("lambda must be >= 0, got {lambda}"));
            }
            SelectionRule::TopPercent { p } if !(p > 0.0 && p <= 1.0) => {
                return bad(format!("top_percent must lie in (0, 1], got {p}"));
            }
            _ => {}
        }
        if let WeightSchedule::Fixed(w) = self.wt {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("wt must lie in [0, 1], got {w}"));
            }
        }
        if self.max_iterations > 0 && self.trainer.is_empty() {
            return bad("trainer command is required when max_iterations > 0".into());
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Canonical JSON of the config (paths as written).
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn run_id(&self) -> String {
        binio::sha256_hex(&self.canonical_json())[..16].to_string()
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

fn parse_extent(v: &str) -> Option<Extent> {
    match v.split_once('x') {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => {
            let n = v.parse().ok()?;
            Some((n, n))
        }
    }
}

/// Whitespace-separated words. Single or double quotes group words containing
/// spaces; inside single quotes every character is literal.
pub fn split_command(v: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut has_token = false;
    for ch in v.chars() {
        match (quote, ch) {
            (None, '"' | '\'') => {
                quote = Some(ch);
                has_token = true;
            }
            (Some(q), c) if c == q => quote = None,
            (None, c) if c.is_whitespace() => {
                if has_token {
                    out.push(std::mem::take(&mut cur));
                    has_token = false;
                }
            }
            (_, c) => {
                cur.push(c);
                has_token = true;
            }
        }
    }
    if quote.is_some() {
        return Err("unterminated quote".into());
    }
    if has_token {
        out.push(cur);
    }
    Ok(out)
}
