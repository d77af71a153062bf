//! Training-data recipes: declarative selections over a corpus, resolved
//! deterministically into concrete example ids.

mod redundancy;
mod sampling;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, GroundingExample, Platform};
use crate::seed::derive_seed;

pub use redundancy::{redundancy_report, DuplicateGroup, RedundancyReport};
pub use sampling::{build_epoch_schedule, build_natural_schedule, sample_uniform, EpochSchedule};

/// Source tag of the multi-resolution web-hybrid data used by the second
/// stage.
pub const WEBHYBRID_SOURCE: &str = "uground-webhybrid";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How many examples a selection draws: `"all"` or a count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleCount {
    All,
    Count(usize),
}

impl Serialize for SampleCount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SampleCount::All => s.serialize_str("all"),
            SampleCount::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for SampleCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(SampleCount::Count(n as usize)),
            Raw::S(s) if s == "all" => Ok(SampleCount::All),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "expected a count or \"all\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<Platform>,
    pub count: SampleCount,
}

impl Selection {
    pub fn matches(&self, ex: &GroundingExample) -> bool {
        self.source.as_deref().is_none_or(|s| s == ex.source) && self.platform.is_none_or(|p| p == ex.platform)
    }

    fn describe(&self) -> String {
        format!(
            "source={} platform={}",
            self.source.as_deref().unwrap_or("*"),
            self.platform.map_or("*", Platform::as_str)
        )
    }
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("empty recipe")]
    EmptyRecipe,
    #[error("no examples for platform `{0}`")]
    MissingPlatform(Platform),
    #[error("no examples from source `{0}`")]
    NoMatchingSource(String),
    #[error("selection ({0}) matches no examples")]
    EmptySelection(String),
    #[error("invalid weight {weight} for platform `{platform}`")]
    InvalidRatio { platform: Platform, weight: f64 },
    #[error("platform ratios name no positive weight")]
    NoRatios,
    #[error("epoch length must be positive")]
    ZeroEpochLength,
    #[error("requested {requested} examples but only {available} are available")]
    Insufficient { requested: usize, available: usize },
    #[error("unknown example id `{0}`")]
    UnknownId(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// A seeded description of what one training stage draws.
///
/// With `platform_ratios`, counted selections are split across platforms by
/// those weights (capped by availability, shortfalls redistributed), and the
/// trainer presents the resolved set with a balanced epoch schedule. Without
/// them, selections are plain uniform subsamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub stage: Stage,
    pub selections: Vec<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform_ratios: Option<BTreeMap<Platform, f64>>,
    #[serde(with = "crate::seed::seed_serde")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_ids: Option<Vec<String>>,
}

impl Recipe {
    pub fn new(name: &str, stage: Stage, seed: u64) -> Self {
        Self {
            name: name.into(),
            stage,
            selections: Vec::new(),
            platform_ratios: None,
            seed,
            resolved_ids: None,
        }
    }

    pub fn select(mut self, source: Option<&str>, platform: Option<Platform>, count: SampleCount) -> Self {
        self.selections.push(Selection {
            source: source.map(str::to_string),
            platform,
            count,
        });
        self
    }

    pub fn with_ratios(mut self, ratios: BTreeMap<Platform, f64>) -> Self {
        self.platform_ratios = Some(ratios);
        self
    }

    /// Materialize the recipe against `corpus`. Pure in (corpus, recipe).
    pub fn resolve(&self, corpus: &Corpus) -> Result<Recipe, RecipeError> {
        let weights = self
            .platform_ratios
            .as_ref()
            .map(sampling::checked_weights)
            .transpose()?;

        let pools: Vec<Corpus> = self
            .selections
            .iter()
            .map(|sel| corpus.filter(|e| sel.matches(e)))
            .collect();
        for (sel, pool) in self.selections.iter().zip(&pools) {
            if pool.is_empty() {
                return Err(match (&sel.source, sel.platform) {
                    (Some(s), None) => RecipeError::NoMatchingSource(s.clone()),
                    _ => RecipeError::EmptySelection(sel.describe()),
                });
            }
        }
        if let Some(weights) = &weights {
            let present: HashSet<Platform> = pools
                .iter()
                .flat_map(|p| p.examples().iter().map(|e| e.platform))
                .collect();
            if let Some((p, _)) = weights.iter().find(|(p, _)| !present.contains(p)) {
                return Err(RecipeError::MissingPlatform(*p));
            }
        }

        let mut ids: Vec<String> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, (sel, pool)) in self.selections.iter().zip(&pools).enumerate() {
            let seed = derive_seed(self.seed, &format!("selection/{i}"));
            let drawn = match (sel.count, &weights) {
                (SampleCount::All, _) => pool.ids().map(str::to_string).collect(),
                (SampleCount::Count(n), Some(w)) => balanced_draw(pool, w, n, seed)?,
                (SampleCount::Count(n), None) => {
                    let pool_ids: Vec<&str> = pool.ids().collect();
                    sample_uniform(&pool_ids, n, seed)
                }
            };
            for id in drawn {
                if seen.insert(id.clone()) {
                    ids.push(id);
                }
            }
        }
        if ids.is_empty() {
            return Err(RecipeError::EmptyRecipe);
        }
        Ok(Recipe {
            resolved_ids: Some(ids),
            ..self.clone()
        })
    }

    /// SHA-256 over the resolved id list, one id per line.
    pub fn ids_digest(&self) -> Option<String> {
        self.resolved_ids.as_ref().map(|ids| ids_digest(ids))
    }

    /// SHA-256 of the recipe's canonical JSON form.
    pub fn digest(&self) -> String {
        crate::digest_json(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), RecipeError> {
        let file = RecipeFile {
            resolved_count: self.resolved_ids.as_ref().map(Vec::len),
            resolved_digest: self.ids_digest(),
            recipe: self.clone(),
        };
        let err = |message: String| RecipeError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = toml::to_string(&file).map_err(|e| err(e.to_string()))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
        }
        fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    /// Load a recipe file, checking the stored digest against the ids.
    pub fn load(path: &Path) -> Result<Recipe, RecipeError> {
        let err = |message: String| RecipeError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: RecipeFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        if let (Some(stored), Some(actual)) = (&file.resolved_digest, file.recipe.ids_digest()) {
            if *stored != actual {
                return Err(err("resolved id digest does not match resolved_ids".into()));
            }
        }
        if let Some(ids) = &file.recipe.resolved_ids {
            let unique: HashSet<&String> = ids.iter().collect();
            if unique.len() != ids.len() {
                return Err(err("resolved_ids contain duplicates".into()));
            }
        }
        Ok(file.recipe)
    }
}

/// On-disk recipe: the recipe plus size and digest of its resolution.
#[derive(Serialize, Deserialize)]
struct RecipeFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resolved_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resolved_digest: Option<String>,
    #[serde(flatten)]
    recipe: Recipe,
}

pub fn ids_digest(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Split `n` distinct draws across platforms by weight, capping each at its
/// pool size and handing any shortfall to platforms with spare examples.
fn balanced_draw(pool: &Corpus, weights: &[(Platform, f64)], n: usize, seed: u64) -> Result<Vec<String>, RecipeError> {
    let pools = sampling::by_platform(pool);
    let avail = |p: &Platform| pools.get(p).map_or(0, Vec::len);
    let available: usize = weights.iter().map(|(p, _)| avail(p)).sum();
    if n > available {
        return Err(RecipeError::Insufficient {
            requested: n,
            available,
        });
    }
    let mut alloc: BTreeMap<Platform, usize> = weights.iter().map(|(p, _)| (*p, 0)).collect();
    let mut remaining = n;
    while remaining > 0 {
        let active: Vec<(Platform, f64)> = weights.iter().copied().filter(|(p, _)| alloc[p] < avail(p)).collect();
        let mut given = 0;
        for (p, q) in sampling::quotas(remaining, &active) {
            let take = q.min(avail(&p) - alloc[&p]);
            *alloc.get_mut(&p).unwrap() += take;
            given += take;
        }
        remaining -= given;
    }
    let mut out = Vec::with_capacity(n);
    for (p, k) in alloc {
        if k == 0 {
            continue;
        }
        let seed = derive_seed(seed, &format!("platform/{p}"));
        out.extend(sample_uniform(&pools[&p], k, seed));
    }
    Ok(out)
}

fn one_to_one() -> BTreeMap<Platform, f64> {
    Platform::ALL.iter().map(|p| (*p, 1.0)).collect()
}

/// Cross-platform stage: `target_size` distinct ids over the whole corpus
/// with 1:1:1 platform ratios.
pub fn build_stage1_recipe(corpus: &Corpus, target_size: usize, seed: u64) -> Result<Recipe, RecipeError> {
    if target_size == 0 {
        return Err(RecipeError::EmptyRecipe);
    }
    Recipe::new("stage1-balanced", Stage::Stage1, seed)
        .select(None, None, SampleCount::Count(target_size))
        .with_ratios(one_to_one())
        .resolve(corpus)
}

/// Resolution-focused stage: every example of the web-hybrid source, with no
/// resolution filtering.
pub fn build_stage2_recipe(corpus: &Corpus, seed: u64) -> Result<Recipe, RecipeError> {
    build_stage2_recipe_for(corpus, WEBHYBRID_SOURCE, SampleCount::All, seed)
}

pub fn build_stage2_recipe_for(
    corpus: &Corpus,
    source: &str,
    count: SampleCount,
    seed: u64,
) -> Result<Recipe, RecipeError> {
    Recipe::new("stage2-resolution", Stage::Stage2, seed)
        .select(Some(source), None, count)
        .resolve(corpus)
}

/// Unbalanced mixture: a uniform subsample of the whole corpus.
pub fn build_joint_recipe(corpus: &Corpus, target_size: usize, seed: u64) -> Result<Recipe, RecipeError> {
    if target_size == 0 {
        return Err(RecipeError::EmptyRecipe);
    }
    Recipe::new("stage1-joint", Stage::Stage1, seed)
        .select(None, None, SampleCount::Count(target_size))
        .resolve(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate, SyntheticSource};
    use crate::corpus::Resolution;

    fn mixed() -> Corpus {
        generate(
            &[
                SyntheticSource::new("amex", Platform::Mobile, 300),
                SyntheticSource::new("showui-web", Platform::Web, 200),
                SyntheticSource::new("showui-desktop", Platform::Desktop, 50),
                SyntheticSource::new(WEBHYBRID_SOURCE, Platform::Web, 80).with_resolutions(&[
                    (448, 448),
                    (1344, 1344),
                    (1280, 720),
                ]),
            ],
            3,
        )
    }

    #[test]
    fn stage1_hits_target_with_unique_ids() {
        let c = mixed();
        let r = build_stage1_recipe(&c, 240, 1).unwrap();
        let ids = r.resolved_ids.as_ref().unwrap();
        assert_eq!(ids.len(), 240);
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 240);
        assert_eq!(r.platform_ratios, Some(one_to_one()));
        let per = |p| ids.iter().filter(|id| c.get(id).unwrap().platform == p).count();
        assert_eq!(per(Platform::Desktop), 50);
        assert_eq!(per(Platform::Mobile), 95);
        assert_eq!(per(Platform::Web), 95);
    }

    #[test]
    fn stage1_requires_every_platform() {
        let c = generate(
            &[
                SyntheticSource::new("amex", Platform::Mobile, 10),
                SyntheticSource::new("showui-web", Platform::Web, 10),
            ],
            0,
        );
        let err = build_stage1_recipe(&c, 10, 0).unwrap_err();
        assert!(matches!(err, RecipeError::MissingPlatform(Platform::Desktop)));
        assert!(matches!(
            build_stage1_recipe(&mixed(), 0, 0),
            Err(RecipeError::EmptyRecipe)
        ));
        assert_eq!(
            build_stage1_recipe(&mixed(), 0, 0).unwrap_err().to_string(),
            "empty recipe"
        );
    }

    #[test]
    fn stage1_more_than_corpus_is_an_error() {
        assert!(matches!(
            build_stage1_recipe(&mixed(), 10_000, 0),
            Err(RecipeError::Insufficient { .. })
        ));
    }

    #[test]
    fn stage2_keeps_only_webhybrid_and_all_resolutions() {
        let c = mixed();
        let r = build_stage2_recipe(&c, 5).unwrap();
        let ids = r.resolved_ids.unwrap();
        assert_eq!(ids.len(), 80);
        let exs = c.lookup(ids.iter().map(String::as_str)).unwrap();
        assert!(exs.iter().all(|e| e.source == WEBHYBRID_SOURCE));
        let res: HashSet<Resolution> = exs
            .iter()
            .map(|e| Resolution {
                width: e.image_width,
                height: e.image_height,
            })
            .collect();
        assert!(res.contains(&Resolution {
            width: 448,
            height: 448
        }));
        assert!(res.contains(&Resolution {
            width: 1344,
            height: 1344
        }));
    }

    #[test]
    fn stage2_without_source_fails() {
        let c = generate(&[SyntheticSource::new("showui-web", Platform::Web, 10)], 0);
        let err = build_stage2_recipe(&c, 0).unwrap_err();
        assert!(matches!(err, RecipeError::NoMatchingSource(s) if s == WEBHYBRID_SOURCE));
    }

    #[test]
    fn multi_selection_union() {
        let c = mixed();
        let r = Recipe::new("mix", Stage::Stage1, 9)
            .select(Some(WEBHYBRID_SOURCE), None, SampleCount::All)
            .select(Some("showui-web"), None, SampleCount::Count(120))
            .resolve(&c)
            .unwrap();
        assert_eq!(r.resolved_ids.unwrap().len(), 200);
    }

    #[test]
    fn recipe_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.toml");
        let r = build_stage1_recipe(&mixed(), 30, 4).unwrap();
        r.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("resolved_digest"));
        assert!(text.contains("seed = 4"));
        assert_eq!(Recipe::load(&path).unwrap(), r);

        let tampered = text.replacen("amex", "xmex", 1);
        fs::write(&path, tampered).unwrap();
        assert!(Recipe::load(&path).is_err());
    }

    #[test]
    fn large_seed_survives_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.toml");
        let r = build_stage1_recipe(&mixed(), 30, u64::MAX - 1).unwrap();
        r.save(&path).unwrap();
        assert!(fs::read_to_string(&path)
            .unwrap()
            .contains("seed = \"18446744073709551614\""));
        assert_eq!(Recipe::load(&path).unwrap(), r);
    }

    #[test]
    fn sample_count_forms() {
        #[derive(Deserialize)]
        struct W {
            c: SampleCount,
        }
        assert_eq!(toml::from_str::<W>("c = \"all\"").unwrap().c, SampleCount::All);
        assert_eq!(toml::from_str::<W>("c = 12").unwrap().c, SampleCount::Count(12));
        assert!(toml::from_str::<W>("c = \"some\"").is_err());
    }
}
