use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{GroundingExample, Platform};

/// Exact screenshot size, rendered `WIDTHxHEIGHT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s.split_once('x').ok_or_else(|| format!("bad resolution `{s}`"))?;
        Ok(Resolution {
            width: w.parse().map_err(|_| format!("bad resolution `{s}`"))?,
            height: h.parse().map_err(|_| format!("bad resolution `{s}`"))?,
        })
    }
}

impl Serialize for Resolution {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Resolution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Always carries all three platforms, zero counts included.
    pub per_platform_counts: BTreeMap<Platform, usize>,
    pub per_source_counts: BTreeMap<String, usize>,
    pub resolution_histogram: BTreeMap<Resolution, usize>,
    pub total: usize,
}

pub fn corpus_stats(examples: &[GroundingExample]) -> CorpusStats {
    let mut per_platform_counts: BTreeMap<Platform, usize> = Platform::ALL.iter().map(|p| (*p, 0)).collect();
    let mut per_source_counts = BTreeMap::new();
    let mut resolution_histogram = BTreeMap::new();
    for ex in examples {
        *per_platform_counts.entry(ex.platform).or_default() += 1;
        *per_source_counts.entry(ex.source.clone()).or_default() += 1;
        let res = Resolution {
            width: ex.image_width,
            height: ex.image_height,
        };
        *resolution_histogram.entry(res).or_default() += 1;
    }
    CorpusStats {
        per_platform_counts,
        per_source_counts,
        resolution_histogram,
        total: examples.len(),
    }
}
