//! Single-channel rasters and the `FGR1` file format.
//!
//! `FGR1` layout, little-endian: magic `FGR1`, `u32` height, `u32` width,
//! `u8` kind, then `height * width` row-major `f32` values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::ids::FragmentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterKind {
    ImageGray,
    DensityMap,
    LabelMap,
}

impl RasterKind {
    fn tag(self) -> u8 {
        match self {
            RasterKind::ImageGray => 0,
            RasterKind::DensityMap => 1,
            RasterKind::LabelMap => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(RasterKind::ImageGray),
            1 => Ok(RasterKind::DensityMap),
            2 => Ok(RasterKind::LabelMap),
            other => Err(Error::BadFormat(format!("FGR1: unknown raster kind {other}"))),
        }
    }
}

/// A non-empty grid of finite, non-negative intensities in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    kind: RasterKind,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, kind: RasterKind, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidRaster(format!(
                "{} values for a {height}x{width} raster",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidRaster(format!(
                "value {} at index {pos} is not a finite non-negative number",
                values[pos]
            )));
        }
        Ok(Raster {
            height,
            width,
            kind,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, kind: RasterKind, value: f64) -> Result<Self> {
        Raster::new(height, width, kind, vec![value; height * width])
    }

    pub fn from_rows(kind: RasterKind, rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidRaster("ragged rows".into()));
        }
        Raster::new(height, width, kind, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kind(&self) -> RasterKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn with_kind(mut self, kind: RasterKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Copies the rectangle `[top, top + h) x [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Raster> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidRaster(format!(
                "crop {h}x{w} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(h * w);
        for r in top..top + h {
            let start = r * self.width + left;
            values.extend_from_slice(&self.values[start..start + w]);
        }
        Ok(Raster {
            height: h,
            width: w,
            kind: self.kind,
            values,
        })
    }

    /// Extends the raster to `new_h x new_w` by replicating the last row and column.
    pub fn pad_edge(&self, new_h: usize, new_w: usize) -> Raster {
        let new_h = new_h.max(self.height);
        let new_w = new_w.max(self.width);
        let mut values = Vec::with_capacity(new_h * new_w);
        for r in 0..new_h {
            let src = r.min(self.height - 1);
            for c in 0..new_w {
                values.push(self.get(src, c.min(self.width - 1)));
            }
        }
        Raster {
            height: new_h,
            width: new_w,
            kind: self.kind,
            values,
        }
    }

    pub fn to_fgr1(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(b"FGR1")
            .u32(self.height as u32)
            .u32(self.width as u32)
            .u8(self.kind.tag());
        for &v in &self.values {
            w.f32(v as f32);
        }
        w.buf
    }

    pub fn from_fgr1(bytes: &[u8]) -> Result<Raster> {
        let mut r = Reader::new(bytes, "FGR1");
        r.expect_magic(b"FGR1")?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let kind = RasterKind::from_tag(r.u8()?)?;
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::BadFormat("FGR1: dimensions overflow".into()))?;
        if r.remaining() != n * 4 {
            return Err(Error::BadFormat(format!(
                "FGR1: expected {} value bytes, found {}",
                n * 4,
                r.remaining()
            )));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from(r.f32()?));
        }
        r.finish()?;
        Raster::new(height, width, kind, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_fgr1())
    }

    pub fn load(path: &Path) -> Result<Raster> {
        Raster::from_fgr1(&binio::read_file(path)?)
    }
}

/// Lookup of fragment rasters by id.
pub trait FragmentStore {
    fn fetch(&self, id: FragmentId) -> Result<Option<Raster>>;
}

/// A directory holding one `<id>.fgr` file per fragment.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: FragmentId) -> PathBuf {
        self.root.join(id.file_name())
    }

    /// All fragment ids present, sorted.
    pub fn ids(&self) -> Result<Vec<FragmentId>> {
        let entries = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".fgr") {
                if let Ok(id) = stem.parse() {
                    ids.push(id);
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn put(&self, id: FragmentId, raster: &Raster) -> Result<()> {
        raster.save(&self.path_of(id))
    }
}

impl FragmentStore for DirStore {
    fn fetch(&self, id: FragmentId) -> Result<Option<Raster>> {
        let path = self.path_of(id);
        if !path.exists() {
            return Ok(None);
        }
        Raster::load(&path).map(Some)
    }
}

/// In-memory store, mostly for tests and synthetic scenarios.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    pub fragments: BTreeMap<FragmentId, Raster>,
}

impl FragmentStore for MemStore {
    fn fetch(&self, id: FragmentId) -> Result<Option<Raster>> {
        Ok(self.fragments.get(&id).cloned())
    }
}
