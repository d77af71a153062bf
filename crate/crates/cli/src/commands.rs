//! Subcommand implementations. Module seeds derive from the root seed as
//! `derive_seed(root, name)` with the names `synthetic`, `sample`,
//! `recipe/stage1`, `recipe/stage2`, `train/stage1`, `train/stage2` and
//! `ablate` (the last only replaces a plan's own seed when `--seed` is
//! given).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::json;
use tracing::{info, warn};

use groundkit::ablate::{render_ablation, run_ablation, AblationPlan, Variant};
use groundkit::backends::{
    AdapterCheckpoint, Backend, BackendError, LoraConfig, MemorizingBackend, RemoteClient, ScriptedBackend,
};
use groundkit::corpus::synthetic::generate;
use groundkit::corpus::{corpus_stats, ingest_all, Corpus, IngestPolicy, SourceManifest};
use groundkit::eval::{
    aggregate, evaluate, load_benchmark, load_predictions, render_report, save_predictions, Benchmark, BenchmarkTask,
};
use groundkit::recipe::{
    build_joint_recipe, build_stage1_recipe, build_stage2_recipe_for, redundancy_report, sample_uniform, Recipe,
    SampleCount, Stage,
};
use groundkit::seed::derive_seed;
use groundkit::trainer::{StageConfig, Trainer};
use groundkit::TOOLKIT_VERSION;

use crate::config::{BackendKind, RunConfig, StageSchedule};
use crate::{Cli, Command, Failure, FailureExt};

struct Ctx {
    cfg: RunConfig,
    root_seed: u64,
    /// `--seed` was given, so it replaces seeds stored in plan files too.
    seed_override: bool,
    out: PathBuf,
}

impl Ctx {
    fn seed(&self, module: &str) -> u64 {
        derive_seed(self.root_seed, module)
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(&cli.config).usage()?;
    let root_seed = cli.seed.unwrap_or(cfg.seed);
    let out = cli.output.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let ctx = Ctx {
        cfg,
        root_seed,
        seed_override: cli.seed.is_some(),
        out,
    };
    let outputs = match &cli.command {
        Command::Ingest => ingest(&ctx)?,
        Command::Stats => stats(&ctx)?,
        Command::Sample { size, source, platform } => sample(&ctx, *size, source.as_deref(), *platform)?,
        Command::Recipe => recipes(&ctx)?,
        Command::Redundancy => redundancy(&ctx)?,
        Command::Train => train(&ctx)?,
        Command::Eval { adapter } => eval(&ctx, adapter.as_deref())?,
        Command::Ablate { plan } => ablate(&ctx, plan.as_deref())?,
        Command::Report { benchmark, format } => {
            let tasks = benchmark_tasks(&ctx, *benchmark)?;
            let preds_path = ctx.out.join("eval").join(benchmark.as_str()).join("predictions.jsonl");
            let preds = load_predictions(&preds_path).usage()?;
            let report = aggregate(&preds, &tasks).runtime()?.with_model_label(model_label(&ctx));
            print!("{}", render_report(&report, *format));
            return Ok(());
        }
    };
    write_run_record(&ctx, command_name(&cli.command), &outputs)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest => "ingest",
        Command::Stats => "stats",
        Command::Sample { .. } => "sample",
        Command::Recipe => "recipe",
        Command::Redundancy => "redundancy",
        Command::Train => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
    }
}

/// `<out>/runs/<command>.json`: what ran and what it wrote. Contains no
/// timestamps, so reruns with unchanged inputs rewrite it identically.
fn write_run_record(ctx: &Ctx, command: &str, outputs: &[PathBuf]) -> Result<(), Failure> {
    let rel: Vec<String> = outputs
        .iter()
        .map(|p| p.strip_prefix(&ctx.out).unwrap_or(p).display().to_string())
        .collect();
    let record = json!({
        "command": command,
        "toolkit_version": TOOLKIT_VERSION,
        "root_seed": ctx.root_seed,
        "outputs": rel,
    });
    write_json(&ctx.out.join("runs").join(format!("{command}.json")), &record)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .runtime()?;
    }
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .runtime()?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Every configured corpus source, concatenated: manifests, then the
/// canonical file, then synthetic sources.
fn load_corpus(ctx: &Ctx) -> Result<(Corpus, Vec<String>), Failure> {
    let c = &ctx.cfg.corpus;
    if c.manifests.is_empty() && c.file.is_none() && c.synthetic.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "no corpus configured: set corpus.manifests, corpus.file or corpus.synthetic"
        )));
    }
    let manifests = c
        .manifests
        .iter()
        .map(|p| SourceManifest::load(p))
        .collect::<Result<Vec<_>, _>>()
        .usage()?;
    let policy = if c.strict {
        IngestPolicy::FailFast
    } else {
        IngestPolicy::SkipAndReport
    };
    let (mut corpus, outcomes) = ingest_all(&manifests, policy).runtime()?;
    let mut notes: Vec<String> = outcomes.iter().flat_map(|o| o.warnings.iter().cloned()).collect();
    for (m, o) in manifests.iter().zip(&outcomes) {
        for e in &o.skipped {
            notes.push(format!("{}: {e}", m.source_tag));
        }
    }
    if let Some(f) = &c.file {
        corpus = corpus.concat(&Corpus::load(f).runtime()?).runtime()?;
    }
    if !c.synthetic.is_empty() {
        corpus = corpus
            .concat(&generate(&c.synthetic, ctx.seed("synthetic")))
            .runtime()?;
    }
    Ok((corpus, notes))
}

fn ingest(ctx: &Ctx) -> Result<Vec<PathBuf>, Failure> {
    let (corpus, notes) = load_corpus(ctx)?;
    let path = ctx.out.join("corpus.jsonl");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).runtime()?;
    }
    corpus.save(&path).runtime()?;
    let summary = json!({
        "examples": corpus.len(),
        "corpus_digest": corpus.digest(),
        "skipped_or_warned": notes,
    });
    let summary_path = write_json(&ctx.out.join("ingest.json"), &summary)?;
    for n in &notes {
        warn!("{n}");
    }
    println!("ingested {} examples ({} notes)", corpus.len(), notes.len());
    Ok(vec![path, summary_path])
}

fn stats(ctx: &Ctx) -> Result<Vec<PathBuf>, Failure> {
    let (corpus, _) = load_corpus(ctx)?;
    let stats = corpus_stats(corpus.examples());
    let path = write_json(&ctx.out.join("stats.json"), &stats)?;
    print!("{}", fs::read_to_string(&path).runtime()?);
    Ok(vec![path])
}

fn sample(
    ctx: &Ctx,
    size: usize,
    source: Option<&str>,
    platform: Option<groundkit::corpus::Platform>,
) -> Result<Vec<PathBuf>, Failure> {
    let (corpus, _) = load_corpus(ctx)?;
    let ids: Vec<&str> = corpus
        .examples()
        .iter()
        .filter(|e| source.is_none_or(|s| e.source == s) && platform.is_none_or(|p| e.platform == p))
        .map(|e| e.id.as_str())
        .collect();
    if ids.is_empty() {
        return Err(Failure::Usage(anyhow!("no examples match the sample filter")));
    }
    let drawn = sample_uniform(&ids, size, ctx.seed("sample"));
    let mut text = drawn.join("\n");
    text.push('\n');
    let path = write_text(&ctx.out.join("sample.txt"), &text)?;
    println!("sampled {} of {} ids", drawn.len(), ids.len());
    Ok(vec![path])
}

fn build_recipes(ctx: &Ctx, corpus: &Corpus) -> Result<(Recipe, Option<Recipe>), Failure> {
    let r = &ctx.cfg.recipe;
    let seed1 = ctx.seed("recipe/stage1");
    let stage1 = match (&r.stage1_ratios, r.joint) {
        (_, true) => build_joint_recipe(corpus, r.stage1_size, seed1),
        (Some(ratios), false) => Recipe::new("stage1-balanced", Stage::Stage1, seed1)
            .select(None, None, SampleCount::Count(r.stage1_size))
            .with_ratios(ratios.clone())
            .resolve(corpus),
        (None, false) => build_stage1_recipe(corpus, r.stage1_size, seed1),
    }
    .runtime()?;
    let stage2 = match ctx.cfg.train.stages {
        StageSchedule::Single => None,
        StageSchedule::TwoStage => Some(
            build_stage2_recipe_for(corpus, &r.stage2_source, r.stage2_count, ctx.seed("recipe/stage2")).runtime()?,
        ),
    };
    Ok((stage1, stage2))
}

fn recipes(ctx: &Ctx) -> Result<Vec<PathBuf>, Failure> {
    let (corpus, _) = load_corpus(ctx)?;
    let (s1, s2) = build_recipes(ctx, &corpus)?;
    let mut out = Vec::new();
    for r in std::iter::once(&s1).chain(s2.as_ref()) {
        let path = ctx.out.join("recipes").join(format!("{}.toml", r.stage));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).runtime()?;
        }
        r.save(&path).runtime()?;
        println!(
            "{}: {} ids, digest {}",
            r.stage,
            r.resolved_ids.as_ref().map_or(0, Vec::len),
            r.ids_digest().unwrap_or_default()
        );
        out.push(path);
    }
    Ok(out)
}

fn redundancy(ctx: &Ctx) -> Result<Vec<PathBuf>, Failure> {
    let (corpus, _) = load_corpus(ctx)?;
    let base = ctx.cfg.corpus.images_root.clone().unwrap_or_else(|| PathBuf::from("."));
    let report = redundancy_report(&corpus, &base, ctx.cfg.parallelism);
    let path = write_json(&ctx.out.join("redundancy.json"), &report)?;
    println!(
        "{} duplicate groups, largest {}, duplicate fraction {:.4}",
        report.duplicate_groups.len(),
        report.max_group_size,
        report.duplicate_fraction
    );
    Ok(vec![path])
}

fn stage_configs(ctx: &Ctx) -> (StageConfig, StageConfig) {
    let t = &ctx.cfg.train;
    (
        t.stage1.apply(Stage::Stage1, ctx.seed("train/stage1")),
        t.stage2.apply(Stage::Stage2, ctx.seed("train/stage2")),
    )
}

fn make_backend(ctx: &Ctx, lora: &LoraConfig) -> Result<Box<dyn Backend>, Failure> {
    let b = &ctx.cfg.backend;
    Ok(match b.kind {
        BackendKind::Mock => Box::new(MemorizingBackend::new(lora.clone(), ctx.cfg.template())),
        BackendKind::Scripted => {
            let script = b.script.as_ref().expect("checked at config load");
            Box::new(ScriptedBackend::load(script).usage()?)
        }
        BackendKind::Remote => {
            let mut rc = b.remote.clone().expect("checked at config load");
            if let Some(var) = &b.token_env {
                let token = std::env::var(var)
                    .map_err(|_| anyhow!("environment variable `{var}` (backend.token_env) is not set"))
                    .usage()?;
                rc.api_key = Some(token);
            }
            Box::new(RemoteClient::new(rc, ctx.cfg.template()).usage()?)
        }
    })
}

fn train(ctx: &Ctx) -> Result<Vec<PathBuf>, Failure> {
    if ctx.cfg.backend.kind != BackendKind::Mock {
        return Err(Failure::Usage(anyhow!(
            "backend `{:?}` cannot train; use kind = \"mock\"",
            ctx.cfg.backend.kind
        )));
    }
    let (corpus, _) = load_corpus(ctx)?;
    let (r1, r2) = build_recipes(ctx, &corpus)?;
    let (c1, c2) = stage_configs(ctx);
    c1.check().map_err(|e| anyhow!("train.stage1: {e}")).usage()?;
    c2.check().map_err(|e| anyhow!("train.stage2: {e}")).usage()?;
    let run_dir = ctx.out.join("train");
    let trainer = Trainer::new(&corpus, ctx.cfg.template(), &run_dir);
    let mut backend = make_backend(ctx, &c1.lora)?;
    let manifest = match &r2 {
        Some(r2) => {
            trainer
                .run_two_stage((&r1, &c1), (r2, &c2), backend.as_mut())
                .runtime()?
                .1
        }
        None => trainer.run_single(&r1, &c1, backend.as_mut()).runtime()?.1,
    };
    for s in &manifest.stages {
        println!(
            "{}: {} ids, lr {:e}, steps {}..{}, final loss {}",
            s.stage,
            s.resolved_count,
            s.learning_rate,
            s.start_step,
            s.end_step,
            s.final_loss.map_or("-".into(), |l| format!("{l:.6}"))
        );
    }
    Ok(vec![run_dir.join("manifest.json")])
}

fn benchmark_tasks(ctx: &Ctx, which: Benchmark) -> Result<Vec<BenchmarkTask>, Failure> {
    let entry = ctx
        .cfg
        .benchmarks
        .iter()
        .find(|b| b.benchmark == which)
        .ok_or_else(|| anyhow!("benchmark `{which}` is not configured"))
        .usage()?;
    load_benchmark(&entry.path, which).usage()
}

fn model_label(ctx: &Ctx) -> String {
    ctx.cfg
        .backend
        .label
        .clone()
        .unwrap_or_else(|| match ctx.cfg.backend.kind {
            BackendKind::Mock => "mock".into(),
            BackendKind::Scripted => "scripted".into(),
            BackendKind::Remote => ctx
                .cfg
                .backend
                .remote
                .as_ref()
                .map_or("remote".into(), |r| r.model.clone()),
        })
}

/// The adapter a mock evaluation should start from: the flag, the config,
/// or the last stage of a previous `train` run in the output directory.
fn eval_adapter(ctx: &Ctx, flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag.map(Path::to_path_buf).or_else(|| ctx.cfg.backend.adapter.clone()) {
        return Some(p);
    }
    ["stage2", "stage1"]
        .iter()
        .map(|s| ctx.out.join("train").join(s).join("adapter"))
        .find(|p| p.join(groundkit::backends::ADAPTER_META_FILE).exists())
}

fn eval(ctx: &Ctx, adapter: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
    if ctx.cfg.benchmarks.is_empty() {
        return Err(Failure::Usage(anyhow!("no benchmarks configured")));
    }
    let formats = ctx.cfg.formats().usage()?;
    let (c1, _) = stage_configs(ctx);
    let mut backend = make_backend(ctx, &c1.lora)?;
    if ctx.cfg.backend.kind == BackendKind::Mock {
        match eval_adapter(ctx, adapter) {
            Some(dir) => {
                let ckpt = AdapterCheckpoint::read(&dir)
                    .with_context(|| format!("cannot load adapter {}", dir.display()))
                    .usage()?;
                backend.load_adapter(&ckpt).runtime()?;
                info!(adapter = %dir.display(), "loaded adapter");
            }
            None => warn!("mock backend has no adapter; every answer will be the fallback point"),
        }
    }
    let mut outputs = Vec::new();
    for entry in &ctx.cfg.benchmarks {
        let tasks = load_benchmark(&entry.path, entry.benchmark).usage()?;
        let preds = evaluate(&tasks, backend.as_ref(), ctx.cfg.parallelism);
        let dir = ctx.out.join("eval").join(entry.benchmark.as_str());
        fs::create_dir_all(&dir).runtime()?;
        let pred_path = dir.join("predictions.jsonl");
        save_predictions(&pred_path, &preds).runtime()?;
        outputs.push(pred_path);
        let report = aggregate(&preds, &tasks).runtime()?.with_model_label(model_label(ctx));
        for f in &formats {
            outputs.push(write_text(
                &dir.join(format!("report.{}", f.extension())),
                &render_report(&report, *f),
            )?);
        }
        print!("{}", render_report(&report, groundkit::eval::ReportFormat::Text));
    }
    Ok(outputs)
}

fn ablate(ctx: &Ctx, plan_flag: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
    let plan_path = plan_flag
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.ablation.as_ref().map(|a| a.plan.clone()))
        .ok_or_else(|| anyhow!("no ablation plan: pass --plan or set ablation.plan"))
        .usage()?;
    let mut plan = AblationPlan::load(&plan_path).usage()?;
    if ctx.seed_override {
        plan.seed = ctx.seed("ablate");
    }
    let formats = ctx.cfg.formats().usage()?;
    let (corpus, _) = load_corpus(ctx)?;
    let mut benchmarks = BTreeMap::new();
    for b in &plan.benchmarks {
        benchmarks.insert(*b, benchmark_tasks(ctx, *b)?);
    }
    let template = ctx.cfg.template();
    let kind = ctx.cfg.backend.kind;
    let factory = |v: &Variant| -> Result<Box<dyn Backend>, BackendError> {
        if kind != BackendKind::Mock {
            return Err(BackendError::Capability(format!("backend `{kind:?}` cannot train")));
        }
        let lora = v.stage1_config.lora.clone().unwrap_or_default();
        Ok(Box::new(MemorizingBackend::new(lora, template.clone())))
    };
    let dir = ctx.out.join("ablate");
    let result = run_ablation(&plan, &factory, &corpus, &benchmarks, &template, &dir.join("runs")).runtime()?;
    let mut outputs = Vec::new();
    for f in &formats {
        outputs.push(write_text(
            &dir.join(format!("{}.{}", plan.name, f.extension())),
            &render_ablation(&result, *f),
        )?);
    }
    print!("{}", render_ablation(&result, groundkit::eval::ReportFormat::Text));
    Ok(outputs)
}
