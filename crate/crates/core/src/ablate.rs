//! Multi-run ablation experiments: each variant trains a fresh backend with
//! its own recipe and stage plan, then every variant is evaluated on the same
//! benchmark tasks and compared against the first (baseline) variant.
//!
//! Seeds are shared across variants: repetition `r` derives its recipe and
//! stage seeds from `(plan.seed, "rep/{r}/...")`, so only the training-side
//! choices differ between rows.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::{Backend, BackendError, LoraConfig};
use crate::corpus::{Corpus, Platform};
use crate::digest_json;
use crate::eval::{
    aggregate, evaluate, format_delta, format_percent, Benchmark, BenchmarkTask, CellKey, CellStat, EvalReport,
    FailureEntry, ReportFormat, Table, PLATFORM_COLUMNS,
};
use crate::recipe::{
    build_joint_recipe, build_stage1_recipe, build_stage2_recipe_for, Recipe, RecipeError, SampleCount, Selection,
    Stage,
};
use crate::seed::derive_seed;
use crate::trainer::{PromptTemplate, StageConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StagePlan {
    #[default]
    Single,
    TwoStage,
}

/// How a variant builds the recipe for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecipeSpec {
    /// `size` distinct ids split across platforms by `ratios` (1:1:1 when
    /// omitted).
    Balanced {
        size: usize,
        #[serde(default)]
        ratios: Option<BTreeMap<Platform, f64>>,
    },
    /// Uniform subsample of the whole corpus, no balancing.
    Joint { size: usize },
    /// Examples of one source.
    Source {
        source: String,
        #[serde(default = "all")]
        count: SampleCount,
    },
    /// Every example in the corpus.
    All,
    /// Explicit selections, optionally balanced.
    Selections {
        selections: Vec<Selection>,
        #[serde(default)]
        ratios: Option<BTreeMap<Platform, f64>>,
    },
}

fn all() -> SampleCount {
    SampleCount::All
}

impl RecipeSpec {
    pub fn build(&self, corpus: &Corpus, stage: Stage, seed: u64) -> Result<Recipe, RecipeError> {
        let mut recipe = match self {
            RecipeSpec::Balanced { size, ratios: None } => build_stage1_recipe(corpus, *size, seed)?,
            RecipeSpec::Balanced { size, ratios: Some(r) } => Recipe::new("balanced", stage, seed)
                .select(None, None, SampleCount::Count(*size))
                .with_ratios(r.clone())
                .resolve(corpus)?,
            RecipeSpec::Joint { size } => build_joint_recipe(corpus, *size, seed)?,
            RecipeSpec::Source { source, count } => build_stage2_recipe_for(corpus, source, *count, seed)?,
            RecipeSpec::All => Recipe::new("all", stage, seed)
                .select(None, None, SampleCount::All)
                .resolve(corpus)?,
            RecipeSpec::Selections { selections, ratios } => {
                let mut r = Recipe::new("selections", stage, seed);
                r.selections = selections.clone();
                r.platform_ratios = ratios.clone();
                r.resolve(corpus)?
            }
        };
        recipe.stage = stage;
        Ok(recipe)
    }
}

/// Fields that replace the stage defaults when set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub learning_rate: Option<f64>,
    pub micro_batch_size: Option<usize>,
    pub grad_accum_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub lora: Option<LoraConfig>,
}

impl StageOverrides {
    pub fn apply(&self, stage: Stage, seed: u64) -> StageConfig {
        let mut c = StageConfig::default_for(stage);
        c.seed = seed;
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.micro_batch_size {
            c.micro_batch_size = v;
        }
        if let Some(v) = self.grad_accum_steps {
            c.grad_accum_steps = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if self.steps_per_epoch.is_some() {
            c.steps_per_epoch = self.steps_per_epoch;
        }
        if let Some(l) = &self.lora {
            c.lora = l.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub stage_plan: StagePlan,
    pub stage1: RecipeSpec,
    #[serde(default)]
    pub stage2: Option<RecipeSpec>,
    #[serde(default)]
    pub stage1_config: StageOverrides,
    #[serde(default)]
    pub stage2_config: StageOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Concurrent prediction bound during evaluation.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub benchmarks: Vec<Benchmark>,
    pub variants: Vec<Variant>,
}

fn one() -> usize {
    1
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Error)]
pub enum AblateError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("cannot read plan {path}: {message}")]
    File { path: String, message: String },
    #[error("no tasks supplied for benchmark `{0}`")]
    MissingBenchmark(Benchmark),
}

impl AblationPlan {
    pub fn check(&self) -> Result<(), AblateError> {
        let bad = |m: String| Err(AblateError::Plan(m));
        if self.variants.len() < 2 {
            return bad("a plan needs at least two variants".into());
        }
        if self.benchmarks.is_empty() {
            return bad("a plan needs at least one benchmark".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        let mut labels = HashSet::new();
        for v in &self.variants {
            if !labels.insert(v.label.as_str()) {
                return bad(format!("duplicate variant label `{}`", v.label));
            }
            match (v.stage_plan, &v.stage2) {
                (StagePlan::TwoStage, None) => {
                    return bad(format!("variant `{}` is two_stage but has no stage2 recipe", v.label))
                }
                (StagePlan::Single, Some(_)) => {
                    return bad(format!("variant `{}` is single-stage but has a stage2 recipe", v.label))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, AblateError> {
        let plan: AblationPlan = toml::from_str(text).map_err(|e| AblateError::Plan(e.to_string()))?;
        plan.check()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, AblateError> {
        let text = fs::read_to_string(path).map_err(|e| AblateError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| AblateError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Outcome of one variant, pooled over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub stage_plan: StagePlan,
    /// Set when any repetition failed; the row then carries no results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Distinct stage-1 training ids.
    pub stage1_size: usize,
    /// Stage-1 draws per platform over all epochs and repetitions.
    pub stage1_draws: BTreeMap<Platform, usize>,
    pub lineage_len: usize,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    fn failed(v: &Variant, error: String) -> Self {
        Self {
            label: v.label.clone(),
            stage_plan: v.stage_plan,
            error: Some(error),
            stage1_size: 0,
            stage1_draws: BTreeMap::new(),
            lineage_len: 0,
            reports: Vec::new(),
        }
    }

    /// Share of stage-1 draws from `platform`, as an exact fraction.
    pub fn draw_share(&self, platform: Platform) -> (usize, usize) {
        let total = self.stage1_draws.values().sum();
        (self.stage1_draws.get(&platform).copied().unwrap_or(0), total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub benchmarks: Vec<Benchmark>,
    pub rows: Vec<AblationRow>,
}

/// Creates a fresh backend for each variant run.
pub type BackendFactory<'a> = dyn Fn(&Variant) -> Result<Box<dyn Backend>, BackendError> + Sync + 'a;

/// Train and evaluate every variant in plan order. A failing variant becomes
/// a failed row; the others still run. Run artifacts go under `out_dir`.
pub fn run_ablation(
    plan: &AblationPlan,
    factory: &BackendFactory<'_>,
    corpus: &Corpus,
    benchmarks: &BTreeMap<Benchmark, Vec<BenchmarkTask>>,
    template: &PromptTemplate,
    out_dir: &Path,
) -> Result<AblationResult, AblateError> {
    plan.check()?;
    for b in &plan.benchmarks {
        if benchmarks.get(b).is_none_or(Vec::is_empty) {
            return Err(AblateError::MissingBenchmark(*b));
        }
    }
    let rows = plan
        .variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            info!(variant = %v.label, "running ablation variant");
            let dir = out_dir.join(format!("{i:02}-{}", slug(&v.label)));
            run_variant(plan, v, factory, corpus, benchmarks, template, &dir).unwrap_or_else(|e| {
                warn!(variant = %v.label, error = %e, "variant failed");
                AblationRow::failed(v, e)
            })
        })
        .collect();
    Ok(AblationResult {
        name: plan.name.clone(),
        benchmarks: plan.benchmarks.clone(),
        rows,
    })
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    s.trim_matches('-').to_string()
}

fn run_variant(
    plan: &AblationPlan,
    v: &Variant,
    factory: &BackendFactory<'_>,
    corpus: &Corpus,
    benchmarks: &BTreeMap<Benchmark, Vec<BenchmarkTask>>,
    template: &PromptTemplate,
    dir: &Path,
) -> Result<AblationRow, String> {
    let mut per_bench: Vec<Vec<EvalReport>> = vec![Vec::new(); plan.benchmarks.len()];
    let mut draws: BTreeMap<Platform, usize> = BTreeMap::new();
    let mut stage1_size = 0;
    let mut lineage_len = 0;
    for rep in 0..plan.repetitions {
        let seed = |what: &str| derive_seed(plan.seed, &format!("rep/{rep}/{what}"));
        let mut backend = factory(v).map_err(|e| format!("backend: {e}"))?;
        let run_dir = dir.join(format!("rep{rep}"));
        let trainer = Trainer::new(corpus, template.clone(), &run_dir);
        let r1 = v
            .stage1
            .build(corpus, Stage::Stage1, seed("recipe/stage1"))
            .map_err(|e| e.to_string())?;
        let c1 = v.stage1_config.apply(Stage::Stage1, seed("train/stage1"));
        let runs = match (&v.stage_plan, &v.stage2) {
            (StagePlan::TwoStage, Some(spec2)) => {
                let r2 = spec2
                    .build(corpus, Stage::Stage2, seed("recipe/stage2"))
                    .map_err(|e| e.to_string())?;
                let c2 = v.stage2_config.apply(Stage::Stage2, seed("train/stage2"));
                trainer
                    .run_two_stage((&r1, &c1), (&r2, &c2), backend.as_mut())
                    .map_err(|e| e.to_string())?
                    .0
            }
            _ => vec![
                trainer
                    .run_single(&r1, &c1, backend.as_mut())
                    .map_err(|e| e.to_string())?
                    .0,
            ],
        };
        stage1_size = runs[0].record.resolved_count;
        for (p, n) in &runs[0].record.platform_draws {
            *draws.entry(*p).or_default() += n;
        }
        lineage_len = runs.last().map_or(0, |r| r.checkpoint.lineage.len());
        for (slot, b) in per_bench.iter_mut().zip(&plan.benchmarks) {
            let tasks = &benchmarks[b];
            let preds = evaluate(tasks, backend.as_ref(), plan.parallelism);
            slot.push(aggregate(&preds, tasks).map_err(|e| e.to_string())?);
        }
    }
    Ok(AblationRow {
        label: v.label.clone(),
        stage_plan: v.stage_plan,
        error: None,
        stage1_size,
        stage1_draws: draws,
        lineage_len,
        reports: per_bench
            .into_iter()
            .map(|reps| pool(reps).with_model_label(v.label.clone()))
            .collect(),
    })
}

/// Sum hits and attempts cell-wise over repetitions of the same benchmark.
fn pool(mut reps: Vec<EvalReport>) -> EvalReport {
    if reps.len() == 1 {
        return reps.pop().expect("one report");
    }
    let digests: Vec<&str> = reps.iter().map(|r| r.run_digest.as_str()).collect();
    let run_digest = digest_json(&digests);
    let sum = |cells: Vec<&CellStat>| {
        let (h, n) = cells.iter().fold((0, 0), |(h, n), c| (h + c.hits, n + c.total));
        CellStat {
            key: cells[0].key,
            hits: h,
            total: n,
            percent: format_percent(h, n),
        }
    };
    let cells = (0..reps[0].cells.len())
        .map(|i| sum(reps.iter().map(|r| &r.cells[i]).collect()))
        .collect();
    let overall = sum(reps.iter().map(|r| &r.overall).collect());
    let mut failures: BTreeMap<_, Vec<String>> = BTreeMap::new();
    for r in &reps {
        for f in &r.failures {
            failures.entry(f.kind).or_default().extend(f.task_ids.iter().cloned());
        }
    }
    let failures = failures
        .into_iter()
        .map(|(kind, task_ids)| FailureEntry {
            kind,
            count: task_ids.len() as u64,
            task_ids,
        })
        .collect();
    EvalReport {
        benchmark: reps[0].benchmark,
        model_label: reps[0].model_label.clone(),
        run_digest,
        cells,
        overall,
        failures,
    }
}

/// Training-set size in the `16.1K` style, exact below one thousand.
pub fn format_size(n: usize) -> String {
    if n < 1000 {
        return n.to_string();
    }
    let tenths = (n + 50) / 100;
    format!("{}.{}K", tenths / 10, tenths % 10)
}

fn column_label(cell: &CellStat) -> String {
    if cell.key == CellKey::default() {
        return "Avg.".into();
    }
    match cell.key.column() {
        (g, l) if g.is_empty() => l,
        (g, l) if g == "Avg." => l,
        (g, l) => format!("{g} {l}"),
    }
}

fn ablation_table(result: &AblationResult) -> Table {
    let mut t = Table::default();
    let mut push = |g: &str, l: String| {
        t.groups.push(g.to_string());
        t.columns.push(l);
    };
    push("", "Size".into());
    push("", "Stages".into());
    push("", "Lineage".into());
    for p in PLATFORM_COLUMNS {
        push("Stage-1 draws %", CellKey::platform(p).column().1);
    }
    let template = result.rows.iter().find(|r| r.error.is_none());
    for (bi, b) in result.benchmarks.iter().enumerate() {
        if let Some(row) = template {
            for c in row.reports[bi].columns() {
                push(b.title(), column_label(c));
            }
        }
        push(b.title(), "Delta".into());
    }
    let width = t.columns.len();
    let baseline = result.rows.first().filter(|r| r.error.is_none());
    for row in &result.rows {
        if row.error.is_some() {
            t.rows
                .push((format!("{} (failed)", row.label), vec!["-".into(); width]));
            continue;
        }
        let mut cells = vec![
            format_size(row.stage1_size),
            match row.stage_plan {
                StagePlan::Single => "1".into(),
                StagePlan::TwoStage => "2".into(),
            },
            row.lineage_len.to_string(),
        ];
        for p in PLATFORM_COLUMNS {
            let (k, n) = row.draw_share(p);
            cells.push(format_percent(k as u64, n as u64));
        }
        for (bi, report) in row.reports.iter().enumerate() {
            cells.extend(report.columns().map(|c| c.percent.clone()));
            cells.push(match baseline {
                Some(base) => format_delta(&report.overall, &base.reports[bi].overall),
                None => "--".into(),
            });
        }
        t.rows.push((row.label.clone(), cells));
    }
    t
}

/// Render a comparison table: rows are variants, columns are benchmark
/// cells plus the overall delta against the first row.
pub fn render_ablation(result: &AblationResult, format: ReportFormat) -> String {
    let table = ablation_table(result);
    match format {
        ReportFormat::Text => {
            let baseline = result.rows.first().map_or("", |r| r.label.as_str());
            let mut out = format!("{} | baseline: {baseline}\n\n", result.name);
            out.push_str(&table.to_text());
            let failed: Vec<_> = result.rows.iter().filter(|r| r.error.is_some()).collect();
            if !failed.is_empty() {
                out.push('\n');
                for r in failed {
                    let _ = writeln!(out, "{} failed: {}", r.label, r.error.as_deref().unwrap_or(""));
                }
            }
            out
        }
        ReportFormat::Csv => table.to_csv("variant"),
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(result).expect("ablation result serializes");
            s.push('\n');
            s
        }
    }
}
