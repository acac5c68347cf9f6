//! Domain-tagged feature sets, their on-disk interchange format, and the
//! pairwise similarity used by graph construction.
//!
//! A feature set is persisted as a UTF-8 JSON manifest next to an `FGF1`
//! blob (magic `FGF1`, `u32` count, `u32` d, then `count * d` little-endian
//! `f32` values). The manifest carries the id table, domain tags and the
//! SHA-256 of the blob.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::ids::FragmentId;

/// Default exponent applied to the clamped cosine.
pub const DEFAULT_GAMMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// Labeled side.
    Source,
    /// Unlabeled side.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: FragmentId,
    pub domain: Domain,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    d: usize,
    records: Vec<FeatureRecord>,
}

impl FeatureSet {
    /// Validates dimensionality, finiteness and `(domain, id)` uniqueness.
    pub fn new(d: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("feature dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (index, r) in records.iter().enumerate() {
            if r.vector.len() != d {
                return Err(Error::ManifestMismatch(format!(
                    "record {index} has {} components, expected {d}",
                    r.vector.len()
                )));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptFeature { index });
            }
            if !seen.insert((r.domain, r.id)) {
                return Err(Error::DuplicateId(format!("{:?} {}", r.domain, r.id)));
            }
        }
        Ok(FeatureSet { d, records })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &FeatureRecord {
        &self.records[index]
    }

    pub fn domains(&self) -> Vec<Domain> {
        self.records.iter().map(|r| r.domain).collect()
    }

    /// `(n_source, m_target)`.
    pub fn counts(&self) -> (usize, usize) {
        let n = self
            .records
            .iter()
            .filter(|r| r.domain == Domain::Source)
            .count();
        (n, self.records.len() - n)
    }

    /// Node index of the record with this domain and id.
    pub fn position(&self, domain: Domain, id: FragmentId) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.domain == domain && r.id == id)
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(b"FGF1")
            .u32(self.records.len() as u32)
            .u32(self.d as u32);
        for r in &self.records {
            for &v in &r.vector {
                w.f32(v);
            }
        }
        w.buf
    }

    /// SHA-256 of the `FGF1` encoding; identifies the set in graph headers.
    pub fn checksum(&self) -> [u8; 32] {
        binio::sha256(&self.to_blob())
    }

    /// Unit-normalized `f64` copies of every vector.
    pub fn unit_vectors(&self) -> Result<Vec<Vec<f64>>> {
        self.records
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let v: Vec<f64> = r.vector.iter().map(|&x| f64::from(x)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroVector { index });
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }

    pub fn with_records(&self, records: Vec<FeatureRecord>) -> Result<Self> {
        FeatureSet::new(self.d, records)
    }
}

/// JSON manifest accompanying an `FGF1` blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub format: String,
    pub d: usize,
    pub count: usize,
    pub n_source: usize,
    pub m_target: usize,
    pub ids: Vec<FragmentId>,
    pub domains: Vec<Domain>,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub checksum: String,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .map_or_else(|| PathBuf::from(blob), |p| p.join(blob))
}

/// Writes `set` as `manifest_path` plus a sibling blob; returns the manifest.
pub fn save(set: &FeatureSet, manifest_path: &Path) -> Result<FeatureManifest> {
    let stem = manifest_path
        .file_stem()
        .map_or_else(|| "features".to_string(), |s| s.to_string_lossy().into_owned());
    let blob_name = format!("{stem}.fgf");
    let blob = set.to_blob();
    let (n_source, m_target) = set.counts();
    let manifest = FeatureManifest {
        format: "FGF1".into(),
        d: set.d,
        count: set.len(),
        n_source,
        m_target,
        ids: set.records.iter().map(|r| r.id).collect(),
        domains: set.domains(),
        blob: blob_name.clone(),
        checksum: binio::sha256_hex(&blob),
    };
    binio::write_file(&blob_path(manifest_path, &blob_name), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    binio::write_file(manifest_path, &json)?;
    Ok(manifest)
}

/// Reads and validates a manifest and its blob.
pub fn load(manifest_path: &Path) -> Result<FeatureSet> {
    let text = binio::read_file(manifest_path)?;
    let manifest: FeatureManifest = serde_json::from_slice(&text)?;
    if manifest.format != "FGF1" {
        return Err(Error::ManifestMismatch(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    if manifest.ids.len() != manifest.count || manifest.domains.len() != manifest.count {
        return Err(Error::ManifestMismatch(format!(
            "count {} but {} ids and {} domain tags",
            manifest.count,
            manifest.ids.len(),
            manifest.domains.len()
        )));
    }
    let n_source = manifest
        .domains
        .iter()
        .filter(|d| **d == Domain::Source)
        .count();
    if n_source != manifest.n_source || manifest.count - n_source != manifest.m_target {
        return Err(Error::ManifestMismatch(format!(
            "declared {}/{} source/target records, tags give {}/{}",
            manifest.n_source,
            manifest.m_target,
            n_source,
            manifest.count - n_source
        )));
    }

    let path = blob_path(manifest_path, &manifest.blob);
    let blob = binio::read_file(&path)?;
    let mut r = Reader::new(&blob, "FGF1");
    r.expect_magic(b"FGF1")?;
    let count = r.u32()? as usize;
    let d = r.u32()? as usize;
    if count != manifest.count || d != manifest.d {
        return Err(Error::ManifestMismatch(format!(
            "manifest declares {} x {}, blob holds {count} x {d}",
            manifest.count, manifest.d
        )));
    }
    if r.remaining() != count * d * 4 {
        return Err(Error::ManifestMismatch(format!(
            "blob payload is {} bytes, expected {}",
            r.remaining(),
            count * d * 4
        )));
    }
    if binio::sha256_hex(&blob) != manifest.checksum {
        return Err(Error::ChecksumMismatch(format!(
            "blob {} does not match manifest checksum",
            path.display()
        )));
    }
    let mut records = Vec::with_capacity(count);
    for (id, domain) in manifest.ids.iter().zip(&manifest.domains) {
        let mut vector = Vec::with_capacity(d);
        for _ in 0..d {
            vector.push(r.f32()?);
        }
        records.push(FeatureRecord {
            id: *id,
            domain: *domain,
            vector,
        });
    }
    FeatureSet::new(d, records)
}

/// Scales every vector to unit Euclidean norm; ids and order are kept.
pub fn normalize(set: &FeatureSet) -> Result<FeatureSet> {
    let units = set.unit_vectors()?;
    let records = set
        .records
        .iter()
        .zip(units)
        .map(|(r, u)| FeatureRecord {
            id: r.id,
            domain: r.domain,
            vector: u.into_iter().map(|x| x as f32).collect(),
        })
        .collect();
    FeatureSet::new(set.d, records)
}

#[inline]
pub(crate) fn score_from_cosine(cosine: f64, gamma: f64) -> f64 {
    cosine.clamp(0.0, 1.0).powf(gamma)
}

/// `max(0, cos(x, y))^gamma`.
///
/// The cosine is formed as `x.y / sqrt(|x|^2 |y|^2)`, so identical inputs
/// score exactly 1.
pub fn similarity(x: &[f32], y: &[f32], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok(score_from_cosine(dot / (nx * ny).sqrt(), gamma))
}

/// Parameters of the clustered two-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_source: usize,
    pub m_target: usize,
    pub d: usize,
    pub clusters: usize,
    /// Norm of the translation applied to every target point.
    pub domain_shift: f64,
    /// Per-component standard deviation of the isotropic noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_source: 200,
            m_target: 200,
            d: 32,
            clusters: 5,
            domain_shift: 0.2,
            noise: 0.05,
            seed: 7,
        }
    }
}

/// Generated features with ground-truth labels aligned to the records.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub set: FeatureSet,
    pub labels: Vec<usize>,
    /// The translation applied to the target domain.
    pub shift: Vec<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Synthetic id for the `i`-th generated record: 3x3 patches per image.
fn synth_id(i: usize) -> FragmentId {
    FragmentId::new((i / 9) as u32, ((i % 9) / 3) as u32, (i % 3) as u32)
}

/// Clustered source features and a translated copy of the clusters as target.
///
/// Points are assigned to clusters round-robin. Cluster centers are random
/// unit directions; the target shift is a single random direction scaled to
/// `domain_shift`. Sources come first, then targets. Pure in `(params)`.
pub fn synth_two_domain(params: &SynthParams) -> Result<SynthSet> {
    if params.clusters == 0 || params.d == 0 || params.n_source + params.m_target == 0 {
        return Err(Error::InvalidParameter(
            "clusters, d and the record count must be positive".into(),
        ));
    }
    if !(params.noise >= 0.0 && params.domain_shift >= 0.0) {
        return Err(Error::InvalidParameter("noise and shift must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let centers: Vec<Vec<f64>> = (0..params.clusters)
        .map(|_| unit(gaussian_vec(&mut rng, params.d)))
        .collect();
    let shift: Vec<f64> = unit(gaussian_vec(&mut rng, params.d))
        .into_iter()
        .map(|x| x * params.domain_shift)
        .collect();

    let mut records = Vec::with_capacity(params.n_source + params.m_target);
    let mut labels = Vec::with_capacity(records.capacity());
    for (domain, count) in [(Domain::Source, params.n_source), (Domain::Target, params.m_target)] {
        for i in 0..count {
            let label = i % params.clusters;
            let vector = centers[label]
                .iter()
                .enumerate()
                .map(|(c, &x)| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let offset = if domain == Domain::Target { shift[c] } else { 0.0 };
                    (x + offset + params.noise * noise) as f32
                })
                .collect();
            records.push(FeatureRecord {
                id: synth_id(i),
                domain,
                vector,
            });
            labels.push(label);
        }
    }
    Ok(SynthSet {
        set: FeatureSet::new(params.d, records)?,
        labels,
        shift,
    })
}

/// Two interleaved half circles per domain, lifted into 3-D so that cosine
/// similarity tracks planar distance.
///
/// Each domain holds `per_moon` points per moon. Target points are translated
/// by `(shift_x, shift_y)` and both domains receive planar Gaussian noise.
pub fn synth_two_moons(
    per_moon: usize,
    noise: f64,
    shift: (f64, f64),
    seed: u64,
) -> Result<SynthSet> {
    if per_moon == 0 {
        return Err(Error::InvalidParameter("per_moon must be positive".into()));
    }
    // height of the lift; large relative to the moon extent
    const LIFT: f64 = 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(4 * per_moon);
    let mut labels = Vec::with_capacity(4 * per_moon);
    for domain in [Domain::Source, Domain::Target] {
        let (dx, dy) = if domain == Domain::Target { shift } else { (0.0, 0.0) };
        for i in 0..2 * per_moon {
            let moon = i % 2;
            let t = std::f64::consts::PI * rng.random::<f64>();
            let (x, y) = if moon == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            let px = x + dx + noise * nx;
            let py = y + dy + noise * ny;
            records.push(FeatureRecord {
                id: synth_id(i),
                domain,
                vector: vec![px as f32, py as f32, LIFT as f32],
            });
            labels.push(moon);
        }
    }
    Ok(SynthSet {
        set: FeatureSet::new(3, records)?,
        labels,
        shift: vec![shift.0, shift.1, 0.0],
    })
}
