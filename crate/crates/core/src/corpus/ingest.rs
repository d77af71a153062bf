use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use super::{check_fields, Corpus, CorpusError, ElementType, GroundingExample, Platform, Violation};
use crate::geometry::BBox;
use crate::UnitBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateConvention {
    AbsolutePixels,
    NormalizedUnit,
}

/// Where one upstream source lives and how to read it.
///
/// Manifests are TOML files; relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceManifest {
    pub source_tag: String,
    pub platform_default: Platform,
    pub annotations_path: PathBuf,
    pub images_root: PathBuf,
    pub coordinate_convention: CoordinateConvention,
    #[serde(default)]
    pub license_note: String,
}

impl SourceManifest {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: SourceManifest = toml::from_str(&text).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        if m.annotations_path.is_relative() {
            m.annotations_path = base.join(&m.annotations_path);
        }
        if m.images_root.is_relative() {
            m.images_root = base.join(&m.images_root);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestPolicy {
    #[default]
    SkipAndReport,
    FailFast,
}

/// A rejected annotation record. `index` is the zero-based record position
/// (blank lines are not records).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub index: usize,
    pub reason: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}", self.index, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{source_tag}: {error}")]
    Record { source_tag: String, error: RecordError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub examples: Vec<GroundingExample>,
    pub skipped: Vec<RecordError>,
    pub warnings: Vec<String>,
}

/// Upstream record layout accepted by the ingester.
#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    image: String,
    width: u32,
    height: u32,
    instruction: String,
    bbox: [f64; 4],
    #[serde(default)]
    platform: Option<Platform>,
    #[serde(default)]
    element_type: Option<ElementType>,
}

fn convert(manifest: &SourceManifest, index: usize, raw: RawRecord) -> Result<GroundingExample, String> {
    let bbox: BBox<i64> = match manifest.coordinate_convention {
        CoordinateConvention::NormalizedUnit => UnitBox::from(raw.bbox).to_pixels(raw.width, raw.height),
        CoordinateConvention::AbsolutePixels => {
            if raw.bbox.iter().any(|v| v.fract() != 0.0 || !v.is_finite()) {
                return Err("non-integer pixel coordinate".into());
            }
            BBox::from(raw.bbox.map(|v| v as i64))
        }
    };
    let id = raw.id.unwrap_or_else(|| format!("{}-{index:06}", manifest.source_tag));
    let violations = check_fields(&id, raw.width, raw.height, &raw.instruction, &bbox);
    if !violations.is_empty() {
        return Err(violations
            .iter()
            .map(Violation::to_string)
            .collect::<Vec<_>>()
            .join(", "));
    }
    let bbox = bbox.cast::<u32>().ok_or("bbox exceeds image bounds")?;
    Ok(GroundingExample {
        id,
        image_ref: manifest.images_root.join(&raw.image).to_string_lossy().into_owned(),
        image_width: raw.width,
        image_height: raw.height,
        platform: raw.platform.unwrap_or(manifest.platform_default),
        source: manifest.source_tag.clone(),
        instruction: raw.instruction,
        bbox,
        element_type: raw.element_type,
    })
}

/// Read one source's annotation file into validated examples, in record
/// order.
pub fn ingest_source(manifest: &SourceManifest, policy: IngestPolicy) -> Result<IngestOutcome, IngestError> {
    let path = &manifest.annotations_path;
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.clone(),
        source,
    })?;
    let mut out = IngestOutcome::default();
    let mut seen = HashSet::new();
    let records = text.lines().filter(|l| !l.trim().is_empty());
    for (index, line) in records.enumerate() {
        let result = serde_json::from_str::<RawRecord>(line)
            .map_err(|e| format!("malformed record: {e}"))
            .and_then(|raw| convert(manifest, index, raw))
            .and_then(|ex| {
                if seen.insert(ex.id.clone()) {
                    Ok(ex)
                } else {
                    Err(format!("duplicate id `{}`", ex.id))
                }
            });
        match result {
            Ok(ex) => out.examples.push(ex),
            Err(reason) => {
                let error = RecordError { index, reason };
                if policy == IngestPolicy::FailFast {
                    return Err(IngestError::Record {
                        source_tag: manifest.source_tag.clone(),
                        error,
                    });
                }
                out.skipped.push(error);
            }
        }
    }
    if !out.skipped.is_empty() {
        let msg = format!(
            "{}: skipped {} malformed record(s)",
            manifest.source_tag,
            out.skipped.len()
        );
        warn!("{msg}");
        out.warnings.push(msg);
    }
    if out.examples.is_empty() && out.skipped.is_empty() {
        let msg = format!(
            "{}: annotation file {} has no records",
            manifest.source_tag,
            path.display()
        );
        warn!("{msg}");
        out.warnings.push(msg);
    }
    Ok(out)
}

/// Ingest several sources concurrently and concatenate them in manifest
/// order.
pub fn ingest_all(
    manifests: &[SourceManifest],
    policy: IngestPolicy,
) -> Result<(Corpus, Vec<IngestOutcome>), IngestError> {
    let results: Vec<Result<IngestOutcome, IngestError>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifests
            .iter()
            .map(|m| s.spawn(move || ingest_source(m, policy)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ingest worker panicked"))
            .collect()
    });
    let mut all = Vec::new();
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        let mut outcome = r?;
        all.append(&mut outcome.examples);
        outcomes.push(outcome);
    }
    Ok((Corpus::new(all)?, outcomes))
}
