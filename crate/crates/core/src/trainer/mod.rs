//! Two-stage fine-tuning orchestration.
//!
//! A stage resolves its recipe, builds one presentation schedule per epoch,
//! feeds micro-batches to the backend and commits an optimizer step every
//! `grad_accum_steps` micro-batches (a trailing partial group also commits).
//! Each stage writes a loss log and an adapter checkpoint under the run
//! directory:
//!
//! ```text
//! <run_dir>/manifest.json
//! <run_dir>/<stage>/loss.jsonl
//! <run_dir>/<stage>/adapter/{adapter_weights.json, adapter_meta.json}
//! ```

mod prompt;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{AdapterCheckpoint, Backend, BackendError, LineageEntry, LoraConfig, TrainItem};
use crate::corpus::{Corpus, Platform};
use crate::recipe::{build_epoch_schedule, build_natural_schedule, EpochSchedule, Recipe, RecipeError, Stage};
use crate::seed::derive_seed;
use crate::{digest_json, TOOLKIT_VERSION};

pub use prompt::{format_example, PromptTemplate, IMAGE_SLOT, INSTRUCTION_SLOT};

/// Hyperparameters of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default = "one")]
    pub micro_batch_size: usize,
    #[serde(default = "default_accum")]
    pub grad_accum_steps: usize,
    #[serde(default = "one")]
    pub epochs: usize,
    /// Fixes the epoch length to `steps * grad_accum_steps * micro_batch_size`
    /// draws; otherwise an epoch presents each resolved example once.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision_tag: String,
}

fn one() -> usize {
    1
}
fn default_accum() -> usize {
    48
}
fn default_precision() -> String {
    "fp16".into()
}

impl StageConfig {
    /// Stage defaults: micro-batch 1, 48 accumulation steps, LoRA rank 8 /
    /// alpha 16, fp16, one epoch; learning rate 2e-4 for the cross-platform
    /// stage and 5e-5 for the resolution stage.
    pub fn default_for(stage: Stage) -> Self {
        Self {
            stage,
            learning_rate: match stage {
                Stage::Stage1 => 2e-4,
                Stage::Stage2 => 5e-5,
            },
            lora: LoraConfig::default(),
            micro_batch_size: 1,
            grad_accum_steps: default_accum(),
            epochs: 1,
            steps_per_epoch: None,
            seed: 0,
            precision_tag: default_precision(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if self.micro_batch_size < 1 {
            return Err("micro_batch_size must be at least 1".into());
        }
        if self.grad_accum_steps < 1 {
            return Err("grad_accum_steps must be at least 1".into());
        }
        if self.epochs < 1 {
            return Err("epochs must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return Err("steps_per_epoch must be positive".into());
        }
        self.lora.check()
    }

    pub fn epoch_length(&self, resolved: usize) -> usize {
        match self.steps_per_epoch {
            Some(s) => s * self.grad_accum_steps * self.micro_batch_size,
            None => resolved,
        }
    }

    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error("backend failed after step {last_completed_step}: {source}")]
    Backend {
        last_completed_step: u64,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Adapter(BackendError),
    #[error("stage LoRA configs differ in `{field}`")]
    LoraMismatch { field: &'static str },
    #[error("missing stage-1 checkpoint at {path}: {source}")]
    MissingCheckpoint {
        path: PathBuf,
        #[source]
        source: BackendError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of a stage's loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Global optimizer step index (0-based) this line closes.
    pub step: u64,
    pub micro_batches: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub recipe_name: String,
    pub recipe_digest: String,
    pub config_digest: String,
    pub learning_rate: f64,
    pub resolved_count: usize,
    pub epoch_length: usize,
    pub epochs: usize,
    pub micro_batches: usize,
    pub start_step: u64,
    pub end_step: u64,
    pub final_loss: Option<f64>,
    /// Draws per platform over all epochs.
    pub platform_draws: BTreeMap<Platform, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub toolkit_version: String,
    pub corpus_digest: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn new(corpus: &Corpus, stages: Vec<StageRecord>) -> Self {
        let corpus_digest = corpus.digest();
        let keys: Vec<(&str, &str)> = stages
            .iter()
            .map(|s| (s.recipe_digest.as_str(), s.config_digest.as_str()))
            .collect();
        let run_id = digest_json(&(&corpus_digest, keys))[..16].to_string();
        Self {
            run_id,
            toolkit_version: TOOLKIT_VERSION.into(),
            corpus_digest,
            stages,
        }
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.learning_rate).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

/// Everything a completed stage produced.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub checkpoint: AdapterCheckpoint,
    pub record: StageRecord,
    pub schedules: Vec<EpochSchedule>,
}

/// Drives stages for one corpus into one run directory.
pub struct Trainer<'a> {
    corpus: &'a Corpus,
    template: PromptTemplate,
    run_dir: PathBuf,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, template: PromptTemplate, run_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus,
            template,
            run_dir: run_dir.into(),
        }
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn schedule(
        &self,
        recipe: &Recipe,
        ids: &[String],
        stage_corpus: &Corpus,
        config: &StageConfig,
        epoch: usize,
    ) -> Result<EpochSchedule, RecipeError> {
        let seed = derive_seed(config.seed, &format!("{}/epoch/{epoch}", config.stage));
        let len = config.epoch_length(ids.len());
        match &recipe.platform_ratios {
            Some(r) => build_epoch_schedule(stage_corpus, r, len, seed),
            None => build_natural_schedule(stage_corpus, ids, len, seed),
        }
    }

    /// Train one stage and save its adapter. Fails before any backend call
    /// if the recipe resolves to nothing.
    pub fn run_stage<B: Backend + ?Sized>(
        &self,
        recipe: &Recipe,
        config: &StageConfig,
        backend: &mut B,
    ) -> Result<StageRun, TrainError> {
        config.check().map_err(TrainError::Config)?;
        if !backend.capabilities().trainable {
            return Err(TrainError::Adapter(backend.not_trainable()));
        }
        if let Some(field) = backend.lora().and_then(|l| l.first_difference(&config.lora)) {
            return Err(TrainError::LoraMismatch { field });
        }
        let resolved = match &recipe.resolved_ids {
            Some(_) => recipe.clone(),
            None => recipe.resolve(self.corpus)?,
        };
        let ids = resolved.resolved_ids.clone().unwrap_or_default();
        if ids.is_empty() {
            return Err(RecipeError::EmptyRecipe.into());
        }
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        if let Some(missing) = wanted.iter().find(|id| self.corpus.get(id).is_none()) {
            return Err(RecipeError::UnknownId(missing.to_string()).into());
        }
        let stage_corpus = self.corpus.filter(|e| wanted.contains(e.id.as_str()));

        let stage_dir = self.run_dir.join(config.stage.as_str());
        fs::create_dir_all(&stage_dir).map_err(io_err(&stage_dir))?;
        let log_path = stage_dir.join("loss.jsonl");
        let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);

        let start_step = backend.step_count();
        let mut schedules = Vec::with_capacity(config.epochs);
        let mut platform_draws: BTreeMap<Platform, usize> = BTreeMap::new();
        let mut micro_batches = 0usize;
        let mut final_loss = None;
        let backend_err = |b: &B, source| TrainError::Backend {
            last_completed_step: b.step_count(),
            source,
        };

        for epoch in 0..config.epochs {
            let schedule = self.schedule(&resolved, &ids, &stage_corpus, config, epoch)?;
            for (p, n) in &schedule.realized_platform_counts {
                *platform_draws.entry(*p).or_default() += n;
            }
            let batches: Vec<&[String]> = schedule.ids.chunks(config.micro_batch_size).collect();
            for group in batches.chunks(config.grad_accum_steps) {
                let mut losses = Vec::with_capacity(group.len());
                for batch in group {
                    let items: Vec<TrainItem> = batch
                        .iter()
                        .map(|id| {
                            let ex = stage_corpus.get(id).expect("schedule ids come from the stage corpus");
                            let (prompt, target) = format_example(ex, &self.template);
                            TrainItem {
                                prompt,
                                target,
                                image_ref: ex.image_ref.clone(),
                            }
                        })
                        .collect();
                    let loss = backend
                        .train_step(&items, config.learning_rate)
                        .map_err(|e| backend_err(backend, e))?;
                    losses.push(loss);
                    micro_batches += 1;
                }
                let step = backend.step_count();
                backend.commit_step().map_err(|e| backend_err(backend, e))?;
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                final_loss = Some(mean);
                let rec = LossRecord {
                    stage: config.stage,
                    epoch,
                    step,
                    micro_batches: group.len(),
                    loss: mean,
                    lr: config.learning_rate,
                };
                serde_json::to_writer(&mut log, &rec).expect("loss record serializes");
                log.write_all(b"\n").map_err(io_err(&log_path))?;
            }
            schedules.push(schedule);
        }
        log.flush().map_err(io_err(&log_path))?;

        let recipe_digest = resolved.digest();
        let config_digest = config.digest();
        backend
            .record_stage(LineageEntry {
                stage: config.stage.as_str().into(),
                recipe_digest: recipe_digest.clone(),
                config_digest: config_digest.clone(),
            })
            .map_err(TrainError::Adapter)?;
        let checkpoint = backend
            .save_adapter(&stage_dir.join("adapter"))
            .map_err(TrainError::Adapter)?;

        Ok(StageRun {
            checkpoint,
            record: StageRecord {
                stage: config.stage,
                recipe_name: resolved.name.clone(),
                recipe_digest,
                config_digest,
                learning_rate: config.learning_rate,
                resolved_count: ids.len(),
                epoch_length: config.epoch_length(ids.len()),
                epochs: config.epochs,
                micro_batches,
                start_step,
                end_step: backend.step_count(),
                final_loss,
                platform_draws,
            },
            schedules,
        })
    }

    fn finish(&self, stages: Vec<StageRecord>) -> Result<RunManifest, TrainError> {
        let manifest = RunManifest::new(self.corpus, stages);
        fs::create_dir_all(&self.run_dir).map_err(io_err(&self.run_dir))?;
        manifest.write(&self.run_dir.join("manifest.json"))?;
        Ok(manifest)
    }

    /// A lone stage with its own manifest.
    pub fn run_single<B: Backend + ?Sized>(
        &self,
        recipe: &Recipe,
        config: &StageConfig,
        backend: &mut B,
    ) -> Result<(StageRun, RunManifest), TrainError> {
        let run = self.run_stage(recipe, config, backend)?;
        let manifest = self.finish(vec![run.record.clone()])?;
        Ok((run, manifest))
    }

    /// Stage 1, then stage 2 starting from the stage-1 adapter.
    pub fn run_two_stage<B: Backend + ?Sized>(
        &self,
        stage1: (&Recipe, &StageConfig),
        stage2: (&Recipe, &StageConfig),
        backend: &mut B,
    ) -> Result<(Vec<StageRun>, RunManifest), TrainError> {
        if stage1.1.stage != Stage::Stage1 || stage2.1.stage != Stage::Stage2 {
            return Err(TrainError::Config(
                "two-stage runs need a stage1 config followed by a stage2 config".into(),
            ));
        }
        if let Some(field) = stage1.1.lora.first_difference(&stage2.1.lora) {
            return Err(TrainError::LoraMismatch { field });
        }
        let first = self.run_stage(stage1.0, stage1.1, backend)?;
        backend.load_adapter(&first.checkpoint).map_err(TrainError::Adapter)?;
        let second = self.run_stage(stage2.0, stage2.1, backend)?;
        let manifest = self.finish(vec![first.record.clone(), second.record.clone()])?;
        Ok((vec![first, second], manifest))
    }

    /// Stage 2 alone, continuing from a saved stage-1 adapter.
    pub fn run_stage2_from<B: Backend + ?Sized>(
        &self,
        checkpoint_dir: &Path,
        recipe: &Recipe,
        config: &StageConfig,
        backend: &mut B,
    ) -> Result<(StageRun, RunManifest), TrainError> {
        let ckpt = AdapterCheckpoint::read(checkpoint_dir).map_err(|source| TrainError::MissingCheckpoint {
            path: checkpoint_dir.to_path_buf(),
            source,
        })?;
        if let Some(field) = ckpt.lora.first_difference(&config.lora) {
            return Err(TrainError::LoraMismatch { field });
        }
        backend.load_adapter(&ckpt).map_err(TrainError::Adapter)?;
        self.run_single(recipe, config, backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MemorizingBackend;
    use crate::corpus::synthetic::{generate, SyntheticSource};
    use crate::recipe::{build_stage1_recipe, SampleCount};

    fn mock() -> MemorizingBackend {
        MemorizingBackend::new(LoraConfig::default(), PromptTemplate::default())
    }

    fn web(n: usize) -> Corpus {
        generate(&[SyntheticSource::new("w", Platform::Web, n)], 0)
    }

    fn all_of(c: &Corpus) -> Recipe {
        Recipe::new("all", Stage::Stage1, 0)
            .select(None, None, SampleCount::All)
            .resolve(c)
            .unwrap()
    }

    #[test]
    fn forty_eight_micro_batches_one_step() {
        let c = web(48);
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(&c, PromptTemplate::default(), dir.path());
        let mut m = mock();
        let run = t
            .run_stage(&all_of(&c), &StageConfig::default_for(Stage::Stage1), &mut m)
            .unwrap();
        assert_eq!(m.call_log().len(), 48);
        assert!(m.call_log().iter().all(|c| c.step == 0));
        assert_eq!(run.record.end_step - run.record.start_step, 1);
        let log = fs::read_to_string(dir.path().join("stage1/loss.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 1);
    }

    #[test]
    fn partial_group_commits() {
        let c = web(50);
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(&c, PromptTemplate::default(), dir.path());
        let mut m = mock();
        let cfg = StageConfig {
            micro_batch_size: 2,
            grad_accum_steps: 4,
            ..StageConfig::default_for(Stage::Stage1)
        };
        let run = t.run_stage(&all_of(&c), &cfg, &mut m).unwrap();
        // 25 micro-batches of 2, groups of 4 -> 7 steps, last with one micro-batch.
        assert_eq!(run.record.micro_batches, 25);
        assert_eq!(run.record.end_step, 7);
        assert_eq!(m.call_log().last().unwrap().targets.len(), 2);
        assert_eq!(m.call_log().last().unwrap().step, 6);
    }

    #[test]
    fn empty_recipe_makes_no_calls() {
        let c = web(5);
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(&c, PromptTemplate::default(), dir.path());
        let mut m = mock();
        let mut r = all_of(&c);
        r.resolved_ids = Some(vec![]);
        let err = t
            .run_stage(&r, &StageConfig::default_for(Stage::Stage1), &mut m)
            .unwrap_err();
        assert_eq!(err.to_string(), "empty recipe");
        assert!(m.call_log().is_empty());
    }

    #[test]
    fn fixed_steps_per_epoch_sets_length() {
        let c = web(10);
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(&c, PromptTemplate::default(), dir.path());
        let mut m = mock();
        let cfg = StageConfig {
            steps_per_epoch: Some(3),
            grad_accum_steps: 4,
            epochs: 2,
            ..StageConfig::default_for(Stage::Stage1)
        };
        let run = t.run_stage(&all_of(&c), &cfg, &mut m).unwrap();
        assert_eq!(run.record.epoch_length, 12);
        assert_eq!(m.call_log().len(), 24);
        assert_eq!(run.record.end_step, 6);
    }

    #[test]
    fn lora_mismatch_between_stages() {
        let c = generate(
            &[
                SyntheticSource::new("m", Platform::Mobile, 5),
                SyntheticSource::new("d", Platform::Desktop, 5),
                SyntheticSource::new("w", Platform::Web, 5),
            ],
            0,
        );
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(&c, PromptTemplate::default(), dir.path());
        let r = build_stage1_recipe(&c, 6, 0).unwrap();
        let s1 = StageConfig::default_for(Stage::Stage1);
        let mut s2 = StageConfig::default_for(Stage::Stage2);
        s2.lora.alpha = 32.0;
        let mut m = mock();
        let err = t.run_two_stage((&r, &s1), (&r, &s2), &mut m).unwrap_err();
        assert!(matches!(err, TrainError::LoraMismatch { field: "alpha" }));
        assert!(m.call_log().is_empty());
    }

    #[test]
    fn non_trainable_backend_rejected() {
        let c = web(3);
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(&c, PromptTemplate::default(), dir.path());
        let mut b = crate::backends::ScriptedBackend::default();
        let err = t
            .run_stage(&all_of(&c), &StageConfig::default_for(Stage::Stage1), &mut b)
            .unwrap_err();
        assert!(matches!(err, TrainError::Adapter(BackendError::Capability(_))));
    }

    #[test]
    fn config_checks() {
        let mut c = StageConfig::default_for(Stage::Stage2);
        assert_eq!(c.learning_rate, 5e-5);
        c.grad_accum_steps = 0;
        assert!(c.check().is_err());
        let mut c = StageConfig::default_for(Stage::Stage1);
        c.learning_rate = 0.0;
        assert!(c.check().is_err());
    }
}
