//! The iterative adaptation loop: graph, diffusion, alignment, pseudo-labels,
//! then an external fine-tuning step that refreshes the features.
//!
//! Run directory layout (`<workspace>/<run id>/`):
//!
//! ```text
//! config.json  LOCK  journal.jsonl  report.json  [failed.json]
//! iter_001/ graph.fgg scores.fgs matches.jsonl dataset/ features_out.json
//!           features_out.fgf [predictions/] trainer.log
//! ```

pub mod config;
pub mod trainer;
pub mod workspace;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::align::{self, filter, rank1_matches};
use crate::binio;
use crate::diffusion::diffuse;
use crate::error::{Error, Result};
use crate::features::{self, Domain, FeatureSet};
use crate::graph::{build_mutual_knn, Partition};
use crate::metrics::{evaluate, EvalReport};
use crate::patch::{stitch_counts, tiling_subset, TilingLayout};
use crate::pseudolabel::{build_dataset, DatasetSources};
use crate::raster::{DirStore, FragmentStore};

pub use config::RunConfig;
pub use trainer::{CommandTrainer, Trainer, TrainerRequest};
pub use workspace::{verify_run, Artifact, IterationCounts, IterationRecord, ScoreStats};

use workspace::*;

pub const FEATURES_OUT: &str = "features_out.json";
pub const PREDICTIONS_DIR: &str = "predictions";
const TRAINER_LOG: &str = "trainer.log";

/// Where an iteration reads its inputs from; `*_rel` are the journaled forms.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationInputs {
    pub features: PathBuf,
    pub features_rel: String,
    pub predictions: PathBuf,
    pub predictions_rel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub run_id: String,
    pub max_iterations: usize,
    pub iterations_completed: usize,
    /// Evaluation of the initial predictions.
    pub baseline: Option<EvalReport>,
    pub records: Vec<IterationRecord>,
    pub stopped_early: bool,
    pub stop_reason: Option<String>,
    /// Skipped iterations and similar non-fatal events.
    pub notices: Vec<String>,
}

#[derive(Debug, Serialize)]
struct FailureNote<'a> {
    t: usize,
    status: &'a str,
    reason: String,
}

pub struct RunContext<'a> {
    pub config: &'a RunConfig,
    pub run_dir: PathBuf,
    pub trainer: &'a dyn Trainer,
}

pub fn run_dir(config: &RunConfig, workspace: &Path) -> PathBuf {
    workspace.join(config.run_id())
}

fn load_eval_gt(config: &RunConfig) -> Result<Option<BTreeMap<u32, f64>>> {
    let Some(rel) = &config.eval_gt else {
        return Ok(None);
    };
    let path = config.resolve(rel);
    let raw: BTreeMap<String, f64> = serde_json::from_slice(&binio::read_file(&path)?)?;
    let mut out = BTreeMap::new();
    for (k, v) in raw {
        let image = k
            .parse::<u32>()
            .map_err(|_| Error::InvalidConfig(format!("{}: image key {k:?} is not a number", path.display())))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidConfig(format!("{}: count for {k} is invalid", path.display())));
        }
        out.insert(image, v);
    }
    Ok(Some(out))
}

/// Per-image counts from the non-overlapping tiling of each target image's
/// prediction fragments, against the configured ground-truth counts.
pub fn evaluate_predictions(
    config: &RunConfig,
    set: &FeatureSet,
    predictions: &dyn FragmentStore,
) -> Result<Option<EvalReport>> {
    let Some(gt) = load_eval_gt(config)? else {
        return Ok(None);
    };
    let mut by_image: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for r in set.records().iter().filter(|r| r.domain == Domain::Target) {
        by_image.entry(r.id.image).or_default().push(r.id);
    }
    let mut rows = Vec::with_capacity(gt.len());
    for (&image, &truth) in &gt {
        let ids = by_image
            .get(&image)
            .ok_or_else(|| Error::InvalidConfig(format!("evaluation image {image} has no target fragments")))?;
        let mut counts = Vec::new();
        for p in tiling_subset(ids, config.window, config.stride)? {
            let raster = predictions.fetch(p.id)?.ok_or(Error::MissingFragment {
                target_id: p.id,
                source_id: p.id,
                store: "prediction",
            })?;
            counts.push((p, raster.sum()));
        }
        let pred = stitch_counts(&counts, TilingLayout::tiles(config.window))?;
        rows.push((image.to_string(), pred, truth));
    }
    Ok(Some(evaluate(&rows)?))
}

fn inputs_for(config: &RunConfig, run_dir: &Path, t: usize) -> IterationInputs {
    let (features, features_rel) = if t == 1 {
        (config.resolve(&config.features), config.features.clone())
    } else {
        let rel = format!("{}/{FEATURES_OUT}", iteration_dir_name(t - 1));
        (run_dir.join(&rel), rel)
    };
    let mut predictions = (config.resolve(&config.pred_dir), config.pred_dir.clone());
    for s in (1..t).rev() {
        let rel = format!("{}/{PREDICTIONS_DIR}", iteration_dir_name(s));
        if run_dir.join(&rel).is_dir() {
            predictions = (run_dir.join(&rel), rel);
            break;
        }
    }
    IterationInputs {
        features,
        features_rel,
        predictions: predictions.0,
        predictions_rel: predictions.1,
    }
}

fn load_features(path: &Path) -> Result<FeatureSet> {
    if !path.exists() {
        return Err(Error::FeaturesMissing(path.to_path_buf()));
    }
    features::load(path)
}

fn record_failure(run_dir: &Path, t: usize, err: &Error) {
    let note = FailureNote {
        t,
        status: "failed",
        reason: err.to_string(),
    };
    if let Ok(mut json) = serde_json::to_vec_pretty(&note) {
        json.push(b'\n');
        let _ = binio::write_file(&run_dir.join(FAILED_FILE), &json);
    }
}

/// One full iteration `t`. Any previous partial output for `t` is discarded first.
pub fn run_iteration(ctx: &RunContext<'_>, t: usize, inputs: &IterationInputs) -> Result<IterationRecord> {
    let cfg = ctx.config;
    let dir = ctx.run_dir.join(iteration_dir_name(t));
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let set = load_features(&inputs.features)?;
    let (n_source, m_target) = set.counts();
    let graph = build_mutual_knn(&set, cfg.k, cfg.gamma)?;
    graph.save(&dir.join("graph.fgg"))?;
    let diag = graph.diagnostics();

    // target fragments query the labeled source gallery
    let partition = Partition::by_domain(&graph.domains, Domain::Target);
    let run = diffuse(&set, &graph, &partition, &cfg.diffusion)?;
    run.table.save(&dir.join("scores.fgs"))?;

    let rank1 = rank1_matches(&run.table)?;
    let filtered = filter(&rank1.pairs, cfg.rule)?;
    align::write_matches(&dir.join("matches.jsonl"), &filtered.pairs)?;

    let w_t = cfg.wt.weight(t);
    let gt = DirStore::new(cfg.resolve(&cfg.gt_dir));
    let preds = DirStore::new(&inputs.predictions);
    let patches = cfg.patches_dir.as_ref().map(|p| DirStore::new(cfg.resolve(p)));
    let sources = DatasetSources {
        gt: &gt,
        predictions: &preds,
        patches: patches.as_ref().map(|p| p as &(dyn FragmentStore + Sync)),
    };
    let dataset_dir = dir.join("dataset");
    let dataset = build_dataset(&filtered.pairs, &sources, w_t, t, &dataset_dir)?;

    let features_out = dir.join(FEATURES_OUT);
    let request = TrainerRequest {
        iteration: t,
        dataset: dataset_dir,
        features_in: inputs.features.clone(),
        features_out: features_out.clone(),
        seed: cfg.seed,
        log: dir.join(TRAINER_LOG),
    };
    let exit = ctx.trainer.train(&request)?;
    if exit != 0 {
        return Err(Error::TrainerFailed {
            iteration: t,
            status: format!("exit code {exit}"),
        });
    }
    let refreshed = load_features(&features_out)?;
    let before: Vec<_> = set.records().iter().map(|r| (r.domain, r.id)).collect();
    let after: Vec<_> = refreshed.records().iter().map(|r| (r.domain, r.id)).collect();
    if before != after {
        return Err(Error::ManifestMismatch(format!(
            "trainer output {} changed the fragment ids",
            features_out.display()
        )));
    }

    let next_preds = dir.join(PREDICTIONS_DIR);
    let eval = if next_preds.is_dir() {
        evaluate_predictions(cfg, &refreshed, &DirStore::new(&next_preds))?
    } else {
        evaluate_predictions(cfg, &refreshed, &preds)?
    };

    let mut warnings = Vec::new();
    if run.not_converged > 0 {
        warnings.push(format!("not-converged: {} queries", run.not_converged));
    }
    if let Some(w) = filtered.warning {
        warnings.push(w.to_string());
    }
    let scores: Vec<f64> = filtered.pairs.iter().map(|m| m.score).collect();
    Ok(IterationRecord {
        t,
        status: "completed".into(),
        features_in: inputs.features_rel.clone(),
        predictions_in: inputs.predictions_rel.clone(),
        w_t,
        counts: IterationCounts {
            nodes: set.len(),
            source: n_source,
            target: m_target,
            edges: diag.edges,
            isolated: diag.isolated_nodes,
            queries: run.table.rows.len(),
            unscored_queries: rank1.unscored.len(),
            not_converged: run.not_converged,
            rank1: rank1.pairs.len(),
            matches: filtered.pairs.len(),
            labels: dataset.entries.len(),
            suspicious_predictions: dataset.entries.iter().filter(|e| e.suspicious).count(),
        },
        scores: ScoreStats::of(&scores),
        warnings,
        trainer_exit: exit,
        eval,
        artifacts: collect_artifacts(&ctx.run_dir, &dir, &[TRAINER_LOG])?,
    })
}

fn non_improvement(prev: Option<f64>, rec: &IterationRecord) -> Option<String> {
    let (prev, cur) = (prev?, rec.eval.as_ref()?.mae);
    (cur >= prev).then(|| format!("early-stop: MAE {prev} -> {cur} at iteration {}", rec.t))
}

/// Runs iterations `1..=max_iterations`, skipping those already journaled.
pub fn run_pipeline(config: &RunConfig, workspace: &Path, trainer: &dyn Trainer) -> Result<PipelineReport> {
    config.validate()?;
    let dir = run_dir(config, workspace);
    let _lock = RunLock::acquire(&dir)?;
    let mut json = serde_json::to_vec_pretty(config)?;
    json.push(b'\n');
    binio::write_file(&dir.join(CONFIG_FILE), &json)?;
    let failed = dir.join(FAILED_FILE);
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
    }

    let mut records = read_journal(&dir)?;
    let first = load_features(&config.resolve(&config.features))?;
    let baseline = evaluate_predictions(config, &first, &DirStore::new(config.resolve(&config.pred_dir)))?;
    let mut prev_mae = baseline.as_ref().map(|e| e.mae);
    let mut notices = Vec::new();
    let mut stop_reason = None;
    let ctx = RunContext {
        config,
        run_dir: dir.clone(),
        trainer,
    };

    let mut processed = 0;
    for t in 1..=config.max_iterations {
        let rec = if let Some(rec) = records.get(t - 1) {
            let note = format!("already-complete: iteration {t}");
            info!("{note}");
            notices.push(note);
            rec.clone()
        } else {
            let inputs = inputs_for(config, &dir, t);
            info!("iteration {t}: features {}", inputs.features_rel);
            let rec = match run_iteration(&ctx, t, &inputs) {
                Ok(rec) => rec,
                Err(e) => {
                    record_failure(&dir, t, &e);
                    return Err(e);
                }
            };
            append_journal(&dir, &rec)?;
            records.push(rec.clone());
            rec
        };
        processed = t;
        if config.early_stop {
            if let Some(reason) = non_improvement(prev_mae, &rec) {
                warn!("{reason}");
                stop_reason = Some(reason);
                break;
            }
        }
        prev_mae = rec.eval.as_ref().map(|e| e.mae).or(prev_mae);
    }

    records.truncate(processed);
    let done = processed;
    let report = PipelineReport {
        run_id: config.run_id(),
        max_iterations: config.max_iterations,
        iterations_completed: done,
        baseline,
        records,
        stopped_early: stop_reason.is_some(),
        stop_reason,
        notices,
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    binio::write_file(&dir.join(REPORT_FILE), &json)?;
    Ok(report)
}
