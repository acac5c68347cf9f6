//! Fused pseudo-labels for matched target fragments.
//!
//! `phi = (1 - w_t) g + w_t p` blends the matched source ground truth `g` with
//! the target prediction `p`; the label is `phi * 255 / max(phi)`, or all zeros
//! when `max(phi) < 0.1`.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::MatchPair;
use crate::binio;
use crate::error::{Error, Result};
use crate::ids::FragmentId;
use crate::raster::{FragmentStore, Raster, RasterKind};

/// Below this fused maximum the label is blank.
pub const LABEL_FLOOR: f64 = 0.1;
pub const LABEL_PEAK: f64 = 255.0;
/// Predictions peaking above this are reported as suspicious (expected range is `[0, 1]`).
pub const SUSPICIOUS_PREDICTION: f64 = 1.5;

pub fn fuse(g: &Raster, p: &Raster, w_t: f64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&w_t) {
        return Err(Error::InvalidParameter(format!("w_t must lie in [0, 1], got {w_t}")));
    }
    if g.dims() != p.dims() {
        return Err(Error::FragmentDimMismatch {
            left: g.dims(),
            right: p.dims(),
        });
    }
    let values = g
        .values()
        .iter()
        .zip(p.values())
        .map(|(&a, &b)| (1.0 - w_t) * a + w_t * b)
        .collect();
    Raster::new(g.height(), g.width(), RasterKind::DensityMap, values)
}

/// Scales `phi` so its maximum is exactly 255, or zeroes it when `max < 0.1`.
pub fn normalize_label(phi: &Raster) -> Raster {
    let peak = phi.max();
    let values = if peak < LABEL_FLOOR {
        vec![0.0; phi.values().len()]
    } else {
        // dividing first makes the peak pixel exactly 1, hence exactly 255
        phi.values().iter().map(|&v| (v / peak) * LABEL_PEAK).collect()
    };
    Raster::new(phi.height(), phi.width(), RasterKind::LabelMap, values).expect("scaled raster stays valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub label: Raster,
    pub target_id: FragmentId,
    pub source_id: FragmentId,
    pub w_t: f64,
    pub max_phi: f64,
}

pub fn pseudo_label(pair: &MatchPair, g: &Raster, p: &Raster, w_t: f64) -> Result<PseudoLabel> {
    let phi = fuse(g, p, w_t)?;
    Ok(PseudoLabel {
        label: normalize_label(&phi),
        target_id: pair.target_id,
        source_id: pair.source_id,
        w_t,
        max_phi: phi.max(),
    })
}

/// Fusion weight per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSchedule {
    /// `w_t = t / (t + 1)`.
    #[default]
    Auto,
    Fixed(f64),
}

impl WeightSchedule {
    pub fn weight(&self, t: usize) -> f64 {
        match *self {
            WeightSchedule::Auto => t as f64 / (t as f64 + 1.0),
            WeightSchedule::Fixed(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub target_id: FragmentId,
    pub source_id: FragmentId,
    pub score: f64,
    pub w_t: f64,
    pub max_phi: f64,
    /// Label path relative to the dataset directory.
    pub label: String,
    /// Target patch path relative to the dataset directory, when patches were supplied.
    pub patch: Option<String>,
    /// Prediction peaked above the expected `[0, 1]` range.
    pub suspicious: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub iteration: usize,
    pub w_t: f64,
    pub entries: Vec<DatasetEntry>,
}

pub const DATASET_MANIFEST: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATASET_MANIFEST);
        Ok(serde_json::from_slice(&binio::read_file(&path)?)?)
    }

    /// Dataset-relative paths of every file the manifest references, manifest included.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec![DATASET_MANIFEST.to_string()];
        for e in &self.entries {
            out.push(e.label.clone());
            out.extend(e.patch.clone());
        }
        out
    }
}

/// Fragment stores a dataset build draws from.
pub struct DatasetSources<'a> {
    /// Source-domain ground truth, by source id.
    pub gt: &'a (dyn FragmentStore + Sync),
    /// Target-domain predictions, by target id.
    pub predictions: &'a (dyn FragmentStore + Sync),
    /// Target image patches, copied next to the labels when present.
    pub patches: Option<&'a (dyn FragmentStore + Sync)>,
}

fn fetch(
    store: &(dyn FragmentStore + Sync),
    id: FragmentId,
    pair: &MatchPair,
    what: &'static str,
) -> Result<Raster> {
    store.fetch(id)?.ok_or(Error::MissingFragment {
        target_id: pair.target_id,
        source_id: pair.source_id,
        store: what,
    })
}

/// Writes `labels/<target>.fgr`, optional `patches/<target>.fgr` and
/// `manifest.json` under `out`, ordered by target id.
pub fn build_dataset(
    matches: &[MatchPair],
    sources: &DatasetSources<'_>,
    w_t: f64,
    iteration: usize,
    out: &Path,
) -> Result<DatasetManifest> {
    let mut seen = BTreeSet::new();
    for m in matches {
        if !seen.insert(m.target_id) {
            return Err(Error::DuplicateId(format!("target {} matched twice", m.target_id)));
        }
    }
    let mut ordered = matches.to_vec();
    ordered.sort_by_key(|m| m.target_id);

    let built = ordered
        .par_iter()
        .map(|m| -> Result<(PseudoLabel, Option<Raster>, bool)> {
            let g = fetch(sources.gt, m.source_id, m, "ground-truth")?;
            let p = fetch(sources.predictions, m.target_id, m, "prediction")?;
            let suspicious = p.max() > SUSPICIOUS_PREDICTION;
            let label = pseudo_label(m, &g, &p, w_t)?;
            let patch = match sources.patches {
                Some(store) => Some(fetch(store, m.target_id, m, "patch")?),
                None => None,
            };
            Ok((label, patch, suspicious))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(built.len());
    for (m, (label, patch, suspicious)) in ordered.iter().zip(built) {
        if suspicious {
            warn!("suspicious prediction for {}: peak above {SUSPICIOUS_PREDICTION}", m.target_id);
        }
        let label_rel = format!("labels/{}", m.target_id.file_name());
        label.label.save(&out.join(&label_rel))?;
        let patch_rel = match patch {
            Some(r) => {
                let rel = format!("patches/{}", m.target_id.file_name());
                r.save(&out.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(DatasetEntry {
            target_id: m.target_id,
            source_id: m.source_id,
            score: m.score,
            w_t,
            max_phi: label.max_phi,
            label: label_rel,
            patch: patch_rel,
            suspicious,
        });
    }
    let manifest = DatasetManifest {
        iteration,
        w_t,
        entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    binio::write_file(&out.join(DATASET_MANIFEST), &json)?;
    Ok(manifest)
}
