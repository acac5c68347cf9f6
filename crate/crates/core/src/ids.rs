use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Identity of a fragment: the patch at grid position (`row`, `col`) of image `image`.
///
/// Ordering is image first, then row-major within the image, which is the
/// ordering every artifact in the crate follows. The textual form is
/// `image_row_col` and doubles as the stem of per-fragment file names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FragmentId {
    pub image: u32,
    pub row: u32,
    pub col: u32,
}

impl FragmentId {
    pub const fn new(image: u32, row: u32, col: u32) -> Self {
        FragmentId { image, row, col }
    }

    /// File name used by directory-backed fragment stores.
    pub fn file_name(&self) -> String {
        format!("{self}.fgr")
    }
}

impl fmt::Display for FragmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_{}", self.image, self.row, self.col)
    }
}

impl FromStr for FragmentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::BadFormat(format!("fragment id {s:?} is not image_row_col"));
        let mut parts = s.split('_');
        let mut next = || -> Result<u32, Error> {
            parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())
        };
        let id = FragmentId::new(next()?, next()?, next()?);
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(id)
    }
}

impl Serialize for FragmentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FragmentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
