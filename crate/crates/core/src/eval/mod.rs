//! ScreenSpot-style benchmark evaluation: load tasks, collect answers from a
//! backend, parse and score them, and aggregate into table-shaped reports.

mod parse;
mod report;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{Backend, ImageRef};
use crate::corpus::{validate_example, ElementType, GroundingExample};
use crate::geometry::score_click_pixels;
use crate::parallel::parallel_map;
use crate::ClickPoint;

pub use parse::{parse_prediction, ParseFailure};
pub use report::{
    aggregate, format_delta, format_percent, render_report, CellKey, CellStat, EvalReport, FailureEntry, ReportFormat,
    Table, PLATFORM_COLUMNS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Screenspot,
    ScreenspotV2,
    ScreenspotPro,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::Screenspot => "screenspot",
            Benchmark::ScreenspotV2 => "screenspot_v2",
            Benchmark::ScreenspotPro => "screenspot_pro",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Benchmark::Screenspot => "ScreenSpot",
            Benchmark::ScreenspotV2 => "ScreenSpot-v2",
            Benchmark::ScreenspotPro => "ScreenSpot-Pro",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "screenspot" => Ok(Benchmark::Screenspot),
            "screenspot_v2" => Ok(Benchmark::ScreenspotV2),
            "screenspot_pro" => Ok(Benchmark::ScreenspotPro),
            other => Err(format!("unknown benchmark `{other}`")),
        }
    }
}

/// Application group of a professional-software task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProGroup {
    Development,
    Creative,
    Cad,
    Scientific,
    Office,
    Os,
}

impl ProGroup {
    /// Column order of the professional-benchmark table.
    pub const ALL: [ProGroup; 6] = [
        ProGroup::Development,
        ProGroup::Creative,
        ProGroup::Cad,
        ProGroup::Scientific,
        ProGroup::Office,
        ProGroup::Os,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProGroup::Development => "development",
            ProGroup::Creative => "creative",
            ProGroup::Cad => "cad",
            ProGroup::Scientific => "scientific",
            ProGroup::Office => "office",
            ProGroup::Os => "os",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ProGroup::Development => "Development",
            ProGroup::Creative => "Creative",
            ProGroup::Cad => "CAD",
            ProGroup::Scientific => "Scientific",
            ProGroup::Office => "Office",
            ProGroup::Os => "OS",
        }
    }
}

/// A benchmark task: a grounding example plus benchmark fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    #[serde(flatten)]
    pub example: GroundingExample,
    pub benchmark: Benchmark,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ProGroup>,
}

impl BenchmarkTask {
    pub fn id(&self) -> &str {
        &self.example.id
    }

    fn image(&self) -> ImageRef<'_> {
        ImageRef {
            uri: &self.example.image_ref,
            width: self.example.image_width,
            height: self.example.image_height,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error("{path}: record {index}: {reason}")]
    Record {
        path: PathBuf,
        index: usize,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("task `{0}` has no prediction")]
    MissingPrediction(String),
    #[error("prediction for unknown or repeated task `{0}`")]
    UnexpectedPrediction(String),
    #[error("tasks from more than one benchmark")]
    MixedBenchmarks,
}

const REQUIRED: [&str; 8] = [
    "id",
    "image_ref",
    "image_width",
    "image_height",
    "platform",
    "source",
    "instruction",
    "bbox",
];

/// Load a benchmark file (canonical corpus lines plus `benchmark`, and for
/// the professional benchmark `group` and `element_type`). A missing
/// `benchmark` field defaults to `tag`.
pub fn load_benchmark(path: &Path, tag: Benchmark) -> Result<Vec<BenchmarkTask>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rec_err = |index, reason: String| EvalError::Record {
        path: path.to_path_buf(),
        index,
        reason,
    };
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut value: Value =
            serde_json::from_str(line).map_err(|e| rec_err(index, format!("malformed record: {e}")))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| rec_err(index, "record is not an object".into()))?;
        let mut required: Vec<&str> = REQUIRED.to_vec();
        if tag == Benchmark::ScreenspotPro {
            required.extend(["group", "element_type"]);
        }
        if let Some(missing) = required.iter().find(|f| obj.get(**f).is_none_or(Value::is_null)) {
            return Err(rec_err(index, format!("missing required field `{missing}`")));
        }
        obj.entry("benchmark")
            .or_insert_with(|| Value::String(tag.as_str().into()));
        let task: BenchmarkTask =
            serde_json::from_value(value).map_err(|e| rec_err(index, format!("invalid record: {e}")))?;
        if task.benchmark != tag {
            return Err(rec_err(
                index,
                format!("benchmark `{}` does not match `{tag}`", task.benchmark),
            ));
        }
        if let Err(v) = validate_example(&task.example) {
            let msg = v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
            return Err(rec_err(index, msg));
        }
        if !seen.insert(task.id().to_string()) {
            return Err(rec_err(index, format!("duplicate id `{}`", task.id())));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    Ok(tasks)
}

pub fn save_benchmark(path: &Path, tasks: &[BenchmarkTask]) -> std::io::Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

/// Wrap corpus examples as tasks of `benchmark`. Professional-benchmark
/// tasks get a group assigned round-robin and `text` where the element type
/// is unknown.
pub fn tasks_from_examples(examples: &[GroundingExample], benchmark: Benchmark) -> Vec<BenchmarkTask> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut example = ex.clone();
            let group = (benchmark == Benchmark::ScreenspotPro).then(|| {
                example.element_type.get_or_insert(ElementType::Text);
                ProGroup::ALL[i % ProGroup::ALL.len()]
            });
            BenchmarkTask {
                example,
                benchmark,
                group,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Unparseable,
    Transport,
    OutOfImage,
}

impl FailureKind {
    pub const ALL: [FailureKind; 3] = [
        FailureKind::Unparseable,
        FailureKind::Transport,
        FailureKind::OutOfImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Unparseable => "unparseable",
            FailureKind::Transport => "transport",
            FailureKind::OutOfImage => "out_of_image",
        }
    }
}

/// A scored answer to one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: String,
    pub raw_text: String,
    pub parsed_point: Option<ClickPoint>,
    pub hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_kind: Option<FailureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Parse and score one raw answer against its task.
pub fn score_answer(task: &BenchmarkTask, raw: &str) -> Prediction {
    let ex = &task.example;
    let (parsed_point, failure_kind) = match parse_prediction(raw, ex.image_width, ex.image_height) {
        Ok(p) => (Some(p), None),
        Err(ParseFailure::OutOfImage(p)) => (Some(p), Some(FailureKind::OutOfImage)),
        Err(ParseFailure::Unparseable) => (None, Some(FailureKind::Unparseable)),
    };
    let hit = failure_kind.is_none() && parsed_point.is_some_and(|p| score_click_pixels(p, &ex.bbox));
    Prediction {
        task_id: ex.id.clone(),
        raw_text: raw.to_string(),
        parsed_point,
        hit,
        failure_kind,
        error: None,
    }
}

/// Query the backend for every task, at most `parallelism` at a time.
/// Backend errors become transport misses; output follows task order.
pub fn evaluate<B: Backend + ?Sized>(tasks: &[BenchmarkTask], backend: &B, parallelism: usize) -> Vec<Prediction> {
    parallel_map(tasks, parallelism, |task| {
        match backend.predict(&task.image(), &task.example.instruction) {
            Ok(raw) => score_answer(task, &raw),
            Err(e) => Prediction {
                task_id: task.id().to_string(),
                raw_text: String::new(),
                parsed_point: None,
                hit: false,
                failure_kind: Some(FailureKind::Transport),
                error: Some(e.to_string()),
            },
        }
    })
}

pub fn save_predictions(path: &Path, preds: &[Prediction]) -> std::io::Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(index, line)| {
            serde_json::from_str(line).map_err(|e| EvalError::Record {
                path: path.to_path_buf(),
                index,
                reason: e.to_string(),
            })
        })
        .collect()
}
