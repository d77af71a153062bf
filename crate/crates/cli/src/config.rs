//! Run configuration: one TOML file drives every subcommand. Relative paths
//! resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use groundkit::ablate::StageOverrides;
use groundkit::backends::RemoteConfig;
use groundkit::corpus::synthetic::SyntheticSource;
use groundkit::corpus::Platform;
use groundkit::eval::{Benchmark, ReportFormat};
use groundkit::recipe::{SampleCount, WEBHYBRID_SOURCE};
use groundkit::trainer::PromptTemplate;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Concurrent predictions during evaluation.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub recipe: RecipeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub prompt: Option<PromptTemplate>,
    #[serde(default)]
    pub benchmarks: Vec<BenchmarkEntry>,
    #[serde(default)]
    pub ablation: Option<AblationSection>,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<String>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_parallelism() -> usize {
    4
}
fn default_formats() -> Vec<String> {
    vec!["text".into(), "csv".into(), "json".into()]
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Source manifests to ingest.
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    /// A corpus already in canonical JSONL form.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Vec<SyntheticSource>,
    /// Abort ingestion on the first bad record instead of skipping it.
    #[serde(default)]
    pub strict: bool,
    /// Base directory for relative image references.
    #[serde(default)]
    pub images_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSchedule {
    Single,
    #[default]
    TwoStage,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSection {
    /// Distinct stage-1 ids.
    #[serde(default = "default_stage1_size")]
    pub stage1_size: usize,
    /// Platform weights for stage 1; 1:1:1 when omitted.
    #[serde(default)]
    pub stage1_ratios: Option<BTreeMap<Platform, f64>>,
    /// Plain uniform subsample instead of balanced sampling.
    #[serde(default)]
    pub joint: bool,
    #[serde(default = "default_stage2_source")]
    pub stage2_source: String,
    #[serde(default = "all")]
    pub stage2_count: SampleCount,
}

fn default_stage1_size() -> usize {
    24_100
}
fn default_stage2_source() -> String {
    WEBHYBRID_SOURCE.into()
}
fn all() -> SampleCount {
    SampleCount::All
}

impl Default for RecipeSection {
    fn default() -> Self {
        Self {
            stage1_size: default_stage1_size(),
            stage1_ratios: None,
            joint: false,
            stage2_source: default_stage2_source(),
            stage2_count: SampleCount::All,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub stages: StageSchedule,
    #[serde(default)]
    pub stage1: StageOverrides,
    #[serde(default)]
    pub stage2: StageOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    /// Label printed in reports.
    #[serde(default)]
    pub label: Option<String>,
    /// Keyed reply script for the scripted backend.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Adapter directory the mock backend loads before evaluating.
    #[serde(default)]
    pub adapter: Option<PathBuf>,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    /// Environment variable holding the endpoint bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkEntry {
    pub benchmark: Benchmark,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub plan: PathBuf,
}

impl RunConfig {
    /// Parse, resolve relative paths and check that every referenced input
    /// exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        cfg.resolve(&base);
        cfg.check()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.corpus.manifests.iter_mut().for_each(fix);
        self.corpus.file.as_mut().map(fix);
        self.corpus.images_root.as_mut().map(fix);
        self.backend.script.as_mut().map(fix);
        self.backend.adapter.as_mut().map(fix);
        self.benchmarks.iter_mut().for_each(|b| fix(&mut b.path));
        if let Some(a) = &mut self.ablation {
            fix(&mut a.plan);
        }
        if let Some(r) = &mut self.backend.remote {
            r.images_root.as_mut().map(fix);
        }
    }

    fn check(&self) -> Result<()> {
        let must_exist = |what: &str, p: &Path| -> Result<()> {
            if !p.exists() {
                bail!("{what} not found: {}", p.display());
            }
            Ok(())
        };
        for m in &self.corpus.manifests {
            must_exist("corpus manifest", m)?;
        }
        if let Some(f) = &self.corpus.file {
            must_exist("corpus file", f)?;
        }
        for b in &self.benchmarks {
            must_exist("benchmark file", &b.path)?;
        }
        if let Some(a) = &self.ablation {
            must_exist("ablation plan", &a.plan)?;
        }
        match self.backend.kind {
            BackendKind::Scripted => match &self.backend.script {
                Some(s) => must_exist("backend script", s)?,
                None => bail!("backend kind `scripted` needs `backend.script`"),
            },
            BackendKind::Remote if self.backend.remote.is_none() => {
                bail!("backend kind `remote` needs a `[backend.remote]` section")
            }
            _ => {}
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if let Some(t) = &self.prompt {
            t.check().map_err(|e| anyhow::anyhow!("invalid prompt template: {e}"))?;
        }
        self.formats()?;
        Ok(())
    }

    pub fn template(&self) -> PromptTemplate {
        self.prompt.clone().unwrap_or_default()
    }

    pub fn formats(&self) -> Result<Vec<ReportFormat>> {
        self.report_formats
            .iter()
            .map(|f| f.parse::<ReportFormat>().map_err(anyhow::Error::msg))
            .collect()
    }
}
