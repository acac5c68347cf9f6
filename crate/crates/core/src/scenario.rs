//! Synthetic two-domain scenario on disk, plus stub trainers for exercising the loop.
//!
//! Layout of a scenario directory:
//!
//! ```text
//! features.json features.fgf  gt/     (source ground truth, by source id)
//! truth/ (target ground truth)  pred/  (initial target predictions)
//! eval_gt.json  shift.json  run.cfg
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::features::{self, synth_two_domain, Domain, SynthParams};
use crate::patch::{stitch_counts, tiling_subset, TilingLayout};
use crate::pipeline::{Trainer, TrainerRequest, PREDICTIONS_DIR};
use crate::pseudolabel::DatasetManifest;
use crate::raster::{DirStore, FragmentStore, Raster, RasterKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    /// Images per domain; each holds a 3x3 grid of fragments.
    pub images: usize,
    pub d: usize,
    pub clusters: usize,
    pub domain_shift: f64,
    pub noise: f64,
    pub seed: u64,
    /// Fragment side in pixels; the stride is half of it.
    pub fragment: usize,
    /// Initial target predictions are `truth * pred_scale`.
    pub pred_scale: f64,
    pub k: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            images: 10,
            d: 16,
            clusters: 5,
            domain_shift: 0.3,
            noise: 0.05,
            seed: 7,
            fragment: 8,
            pred_scale: 0.6,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftFile {
    shift: Vec<f64>,
    pred_scale: f64,
}

/// Density fragment for cluster `label`: one Gaussian bump whose position and
/// height depend on the cluster.
pub fn cluster_fragment(label: usize, side: usize) -> Raster {
    let cy = ((label * 3 + 1) % side) as f64;
    let cx = ((label * 5 + 2) % side) as f64;
    let peak = 0.2 + 0.15 * (label % 5) as f64;
    let mut values = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            values.push(peak * (-d2 / 4.5).exp());
        }
    }
    Raster::new(side, side, RasterKind::DensityMap, values).expect("valid fragment")
}

pub struct Scenario {
    pub root: PathBuf,
    pub config: PathBuf,
}

/// Writes a scenario to `dir`; `trainer` becomes the config's trainer line.
pub fn write_scenario(dir: &Path, params: &ScenarioParams, trainer: &str) -> Result<Scenario> {
    if params.fragment < 2 || !params.fragment.is_multiple_of(2) {
        return Err(Error::InvalidParameter("fragment side must be even and at least 2".into()));
    }
    let synth = synth_two_domain(&SynthParams {
        n_source: params.images * 9,
        m_target: params.images * 9,
        d: params.d,
        clusters: params.clusters,
        domain_shift: params.domain_shift,
        noise: params.noise,
        seed: params.seed,
    })?;
    features::save(&synth.set, &dir.join("features.json"))?;

    let gt = DirStore::new(dir.join("gt"));
    let truth = DirStore::new(dir.join("truth"));
    let pred = DirStore::new(dir.join("pred"));
    for (r, &label) in synth.set.records().iter().zip(&synth.labels) {
        let frag = cluster_fragment(label, params.fragment);
        match r.domain {
            Domain::Source => gt.put(r.id, &frag)?,
            Domain::Target => {
                truth.put(r.id, &frag)?;
                let scaled: Vec<f64> = frag.values().iter().map(|v| v * params.pred_scale).collect();
                pred.put(r.id, &Raster::new(frag.height(), frag.width(), RasterKind::DensityMap, scaled)?)?;
            }
        }
    }

    let window = (params.fragment, params.fragment);
    let stride = (params.fragment / 2, params.fragment / 2);
    let mut eval = std::collections::BTreeMap::new();
    for image in 0..params.images as u32 {
        let ids: Vec<_> = truth.ids()?.into_iter().filter(|id| id.image == image).collect();
        let mut counts = Vec::new();
        for p in tiling_subset(&ids, window, stride)? {
            let r = truth.fetch(p.id)?.expect("truth fragment written above");
            counts.push((p, r.sum()));
        }
        eval.insert(image.to_string(), stitch_counts(&counts, TilingLayout::tiles(window))?);
    }
    write_json(&dir.join("eval_gt.json"), &eval)?;
    write_json(
        &dir.join("shift.json"),
        &ShiftFile {
            shift: synth.shift.clone(),
            pred_scale: params.pred_scale,
        },
    )?;

    let config = dir.join("run.cfg");
    let text = format!(
        "# synthetic two-domain scenario\n\
         features = features.json\n\
         gt_dir = gt\n\
         pred_dir = pred\n\
         eval_gt = eval_gt.json\n\
         window = {f}\n\
         stride = {s}\n\
         k = {k}\n\
         gamma = 3\n\
         alpha = 0.99\n\
         solver = cg\n\
         nn = 10\n\
         rule = threshold\n\
         lambda = 1e-8\n\
         wt = auto\n\
         max_iterations = 4\n\
         seed = {seed}\n\
         trainer = {trainer}\n",
        f = params.fragment,
        s = params.fragment / 2,
        k = params.k,
        seed = params.seed,
    );
    binio::write_file(&config, text.as_bytes())?;
    Ok(Scenario {
        root: dir.to_path_buf(),
        config,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    binio::write_file(path, &json)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StubMode {
    /// Republishes the input features unchanged.
    Copy,
    /// Halves the remaining domain shift and prediction error every iteration.
    Improve { scenario: PathBuf },
}

/// In-process trainer implementing the stub behaviours.
#[derive(Debug, Clone, PartialEq)]
pub struct StubTrainer {
    pub mode: StubMode,
}

impl Trainer for StubTrainer {
    fn train(&self, request: &TrainerRequest) -> Result<i32> {
        run_stub(&self.mode, &request.dataset, &request.features_in, &request.features_out)?;
        Ok(0)
    }
}

pub fn run_stub(mode: &StubMode, dataset: &Path, features_in: &Path, features_out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(dataset)?;
    let set = features::load(features_in)?;
    match mode {
        StubMode::Copy => {
            features::save(&set, features_out)?;
        }
        StubMode::Improve { scenario } => {
            let shift: ShiftFile = serde_json::from_slice(&binio::read_file(&scenario.join("shift.json"))?)?;
            if shift.shift.len() != set.d() {
                return Err(Error::DimMismatch {
                    left: shift.shift.len(),
                    right: set.d(),
                });
            }
            let t = manifest.iteration as i32;
            let factor = 0.5f64.powi(t);
            let records = set
                .records()
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    if r.domain == Domain::Target {
                        for (v, s) in r.vector.iter_mut().zip(&shift.shift) {
                            *v = (f64::from(*v) - s * factor) as f32;
                        }
                    }
                    r
                })
                .collect();
            features::save(&set.with_records(records)?, features_out)?;

            // predictions after t steps: truth + (initial - truth) / 2^t
            let truth = DirStore::new(scenario.join("truth"));
            let out = DirStore::new(
                features_out
                    .parent()
                    .map_or_else(|| PathBuf::from(PREDICTIONS_DIR), |p| p.join(PREDICTIONS_DIR)),
            );
            let keep = 1.0 - (1.0 - shift.pred_scale) * factor;
            for id in truth.ids()? {
                let r = truth.fetch(id)?.expect("listed fragment exists");
                let values = r.values().iter().map(|v| v * keep).collect();
                out.put(id, &Raster::new(r.height(), r.width(), RasterKind::DensityMap, values)?)?;
            }
        }
    }
    Ok(())
}
