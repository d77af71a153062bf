//! Unified grounding corpus: the example type, validation, canonical
//! line-delimited storage, per-source ingestion and summary statistics.

mod ingest;
mod stats;
pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::BBox;
use crate::PixelBox;

pub use ingest::{
    ingest_all, ingest_source, CoordinateConvention, IngestError, IngestOutcome, IngestPolicy, RecordError,
    SourceManifest,
};
pub use stats::{corpus_stats, CorpusStats, Resolution};

/// Device family of a screenshot. Declaration order is the fixed
/// platform-name order used wherever ties are broken deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Desktop,
    Mobile,
    Web,
}

impl Platform {
    pub const ALL: [Platform; 3] = [Platform::Desktop, Platform::Mobile, Platform::Web];

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Desktop => "desktop",
            Platform::Mobile => "mobile",
            Platform::Web => "web",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desktop" => Ok(Platform::Desktop),
            "mobile" => Ok(Platform::Mobile),
            "web" => Ok(Platform::Web),
            other => Err(format!("unknown platform `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Text,
    Icon,
}

impl ElementType {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementType::Text => "text",
            ElementType::Icon => "icon",
        }
    }
}

/// One screenshot, one instruction, one target box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingExample {
    pub id: String,
    pub image_ref: String,
    pub image_width: u32,
    pub image_height: u32,
    pub platform: Platform,
    pub source: String,
    pub instruction: String,
    pub bbox: PixelBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_type: Option<ElementType>,
}

/// A failed example invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    ZeroDimension,
    EmptyInstruction,
    DegenerateBbox,
    BboxOutOfBounds,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::EmptyId => "id is empty",
            Violation::ZeroDimension => "image dimensions must be positive",
            Violation::EmptyInstruction => "instruction is empty",
            Violation::DegenerateBbox => "degenerate bbox",
            Violation::BboxOutOfBounds => "bbox exceeds image bounds",
        })
    }
}

/// Invariant check shared by ingestion (which sees signed, possibly
/// converted boxes) and [`validate_example`].
pub(crate) fn check_fields(id: &str, width: u32, height: u32, instruction: &str, bbox: &BBox<i64>) -> Vec<Violation> {
    let mut out = Vec::new();
    if id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if width == 0 || height == 0 {
        out.push(Violation::ZeroDimension);
    }
    if instruction.trim().is_empty() {
        out.push(Violation::EmptyInstruction);
    }
    if !bbox.is_proper() {
        out.push(Violation::DegenerateBbox);
    }
    if !bbox.within(i64::from(width), i64::from(height)) {
        out.push(Violation::BboxOutOfBounds);
    }
    out
}

pub fn validate_example(ex: &GroundingExample) -> Result<(), Vec<Violation>> {
    let bbox = ex.bbox.cast::<i64>().expect("u32 fits in i64");
    let v = check_fields(&ex.id, ex.image_width, ex.image_height, &ex.instruction, &bbox);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("example `{id}` is invalid: {}", join_violations(.violations))]
    Invalid { id: String, violations: Vec<Violation> },
    #[error("unknown example id `{0}`")]
    UnknownId(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// An immutable, validated collection of examples with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    examples: Vec<GroundingExample>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(examples: Vec<GroundingExample>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if let Err(violations) = validate_example(ex) {
                return Err(CorpusError::Invalid {
                    id: ex.id.clone(),
                    violations,
                });
            }
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self { examples, index })
    }

    pub fn examples(&self) -> &[GroundingExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GroundingExample> {
        self.index.get(id).map(|&i| &self.examples[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Concatenation; fails if the id sets overlap.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus, CorpusError> {
        let mut all = self.examples.clone();
        all.extend(other.examples.iter().cloned());
        Corpus::new(all)
    }

    /// Examples matching `keep`, in corpus order.
    pub fn filter(&self, keep: impl Fn(&GroundingExample) -> bool) -> Corpus {
        let examples: Vec<_> = self.examples.iter().filter(|e| keep(e)).cloned().collect();
        let index = examples.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Corpus { examples, index }
    }

    /// Resolve ids to examples, preserving the order and repeats of `ids`.
    pub fn lookup<'a, I>(&self, ids: I) -> Result<Vec<&GroundingExample>, CorpusError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        ids.into_iter()
            .map(|id| self.get(id).ok_or_else(|| CorpusError::UnknownId(id.to_string())))
            .collect()
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for ex in &self.examples {
            h.update(serde_json::to_string(ex).expect("example serializes").as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Write the canonical format: one JSON record per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(io)?;
        fs::write(path, buf).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Corpus, CorpusError> {
        let examples: Vec<GroundingExample> = read_jsonl(path)?;
        Corpus::new(examples)
    }
}

/// Parse a line-delimited JSON file, skipping blank lines.
pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn example(id: &str, w: u32, h: u32, bbox: [u32; 4]) -> GroundingExample {
        GroundingExample {
            id: id.into(),
            image_ref: format!("img/{id}.png"),
            image_width: w,
            image_height: h,
            platform: Platform::Web,
            source: "showui-web".into(),
            instruction: "open settings".into(),
            bbox: bbox.into(),
            element_type: None,
        }
    }

    #[test]
    fn validate_accepts_interior_box() {
        assert!(validate_example(&example("a", 100, 100, [10, 10, 20, 20])).is_ok());
    }

    #[test]
    fn validate_accepts_box_touching_image_edges() {
        assert!(validate_example(&example("a", 100, 100, [0, 0, 100, 100])).is_ok());
    }

    #[test]
    fn validate_rejects_box_past_image() {
        let v = validate_example(&example("a", 100, 100, [90, 90, 110, 95])).unwrap_err();
        assert_eq!(v, vec![Violation::BboxOutOfBounds]);
        assert_eq!(v[0].to_string(), "bbox exceeds image bounds");
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut ex = example("", 0, 100, [5, 5, 5, 9]);
        ex.instruction = "   ".into();
        let v = validate_example(&ex).unwrap_err();
        assert!(v.contains(&Violation::EmptyId));
        assert!(v.contains(&Violation::ZeroDimension));
        assert!(v.contains(&Violation::EmptyInstruction));
        assert!(v.contains(&Violation::DegenerateBbox));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = example("a", 100, 100, [1, 1, 2, 2]);
        let err = Corpus::new(vec![a.clone(), a]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "a"));
    }

    #[test]
    fn element_type_omitted_when_absent() {
        let line = serde_json::to_string(&example("a", 100, 100, [1, 1, 2, 2])).unwrap();
        assert!(!line.contains("element_type"));
        assert!(line.contains("\"bbox\":[1,1,2,2]"));
    }

    #[test]
    fn lookup_keeps_repeats() {
        let c = Corpus::new(vec![
            example("a", 10, 10, [1, 1, 2, 2]),
            example("b", 10, 10, [1, 1, 2, 2]),
        ])
        .unwrap();
        let got = c.lookup(["b", "a", "b"]).unwrap();
        assert_eq!(got.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["b", "a", "b"]);
        assert!(c.lookup(["zz"]).is_err());
    }
}
