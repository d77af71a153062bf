//! Seeded subsampling and per-epoch presentation schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RecipeError;
use crate::corpus::{Corpus, Platform};
use crate::seed::{derive_seed, SeededRng};

/// `min(k, ids.len())` distinct ids drawn uniformly without replacement, in
/// draw order. With `k >= ids.len()` this is a seeded permutation of the
/// whole input.
pub fn sample_uniform<S: AsRef<str>>(ids: &[S], k: usize, seed: u64) -> Vec<String> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    let mut rng = SeededRng::new(seed);
    rng.partial_shuffle(&mut idx, k)
        .iter()
        .map(|&i| ids[i].as_ref().to_string())
        .collect()
}

/// Split `total` across weighted platforms: floor of each exact share, then
/// one extra unit to each platform in platform order until the remainder is
/// used up. Weights must be positive.
pub(crate) fn quotas(total: usize, weights: &[(Platform, f64)]) -> Vec<(Platform, usize)> {
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut out: Vec<(Platform, usize)> = weights
        .iter()
        .map(|&(p, w)| (p, (total as f64 * w / sum).floor() as usize))
        .collect();
    out.sort_by_key(|(p, _)| *p);
    let assigned: usize = out.iter().map(|(_, q)| q).sum();
    let mut rest = total.saturating_sub(assigned);
    for (_, q) in out.iter_mut() {
        if rest == 0 {
            break;
        }
        *q += 1;
        rest -= 1;
    }
    out
}

/// Positive weights in platform order; zero weights drop the platform.
pub(crate) fn checked_weights(ratios: &BTreeMap<Platform, f64>) -> Result<Vec<(Platform, f64)>, RecipeError> {
    let mut out = Vec::new();
    for (&p, &w) in ratios {
        if !w.is_finite() || w < 0.0 {
            return Err(RecipeError::InvalidRatio { platform: p, weight: w });
        }
        if w > 0.0 {
            out.push((p, w));
        }
    }
    if out.is_empty() {
        return Err(RecipeError::NoRatios);
    }
    Ok(out)
}

/// Ids grouped per platform in corpus order.
pub(crate) fn by_platform(corpus: &Corpus) -> BTreeMap<Platform, Vec<&str>> {
    let mut pools: BTreeMap<Platform, Vec<&str>> = BTreeMap::new();
    for ex in corpus.examples() {
        pools.entry(ex.platform).or_default().push(ex.id.as_str());
    }
    pools
}

/// The ordered ids presented during one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub ids: Vec<String>,
    pub seed: u64,
    pub realized_platform_counts: BTreeMap<Platform, usize>,
}

impl EpochSchedule {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fraction of draws from `platform`.
    pub fn share(&self, platform: Platform) -> f64 {
        if self.ids.is_empty() {
            return 0.0;
        }
        let n = self.realized_platform_counts.get(&platform).copied().unwrap_or(0);
        n as f64 / self.ids.len() as f64
    }
}

/// Platform-balanced epoch: each weighted platform gets its quota of draws,
/// sampled without replacement when its pool is large enough and with
/// replacement otherwise; the draws are then interleaved by a seeded shuffle.
pub fn build_epoch_schedule(
    corpus: &Corpus,
    ratios: &BTreeMap<Platform, f64>,
    epoch_length: usize,
    seed: u64,
) -> Result<EpochSchedule, RecipeError> {
    if epoch_length == 0 {
        return Err(RecipeError::ZeroEpochLength);
    }
    let weights = checked_weights(ratios)?;
    let pools = by_platform(corpus);
    for (p, _) in &weights {
        if pools.get(p).is_none_or(Vec::is_empty) {
            return Err(RecipeError::MissingPlatform(*p));
        }
    }
    let mut ids = Vec::with_capacity(epoch_length);
    let mut realized = BTreeMap::new();
    for (p, quota) in quotas(epoch_length, &weights) {
        let pool = &pools[&p];
        let mut rng = SeededRng::new(derive_seed(seed, &format!("epoch/{p}")));
        if quota <= pool.len() {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            ids.extend(
                rng.partial_shuffle(&mut idx, quota)
                    .iter()
                    .map(|&i| pool[i].to_string()),
            );
        } else {
            ids.extend((0..quota).map(|_| pool[rng.index(pool.len())].to_string()));
        }
        realized.insert(p, quota);
    }
    SeededRng::new(derive_seed(seed, "epoch/interleave")).shuffle(&mut ids);
    Ok(EpochSchedule {
        ids,
        seed,
        realized_platform_counts: realized,
    })
}

/// Unbalanced epoch over `ids` in their natural proportions: successive
/// seeded permutations of `ids`, truncated to `epoch_length`.
pub fn build_natural_schedule(
    corpus: &Corpus,
    ids: &[String],
    epoch_length: usize,
    seed: u64,
) -> Result<EpochSchedule, RecipeError> {
    if epoch_length == 0 {
        return Err(RecipeError::ZeroEpochLength);
    }
    if ids.is_empty() {
        return Err(RecipeError::EmptyRecipe);
    }
    let mut out = Vec::with_capacity(epoch_length);
    let mut pass = 0u64;
    while out.len() < epoch_length {
        let mut perm = ids.to_vec();
        SeededRng::new(derive_seed(seed, &format!("natural/{pass}"))).shuffle(&mut perm);
        let need = epoch_length - out.len();
        out.extend(perm.into_iter().take(need));
        pass += 1;
    }
    let mut realized = BTreeMap::new();
    for id in &out {
        let ex = corpus.get(id).ok_or_else(|| RecipeError::UnknownId(id.clone()))?;
        *realized.entry(ex.platform).or_insert(0) += 1;
    }
    Ok(EpochSchedule {
        ids: out,
        seed,
        realized_platform_counts: realized,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::corpus::synthetic::{generate, SyntheticSource};

    fn one_to_one() -> BTreeMap<Platform, f64> {
        Platform::ALL.iter().map(|p| (*p, 1.0)).collect()
    }

    #[test]
    fn quotas_floor_then_platform_order() {
        let w = [(Platform::Web, 1.0), (Platform::Mobile, 1.0), (Platform::Desktop, 1.0)];
        assert_eq!(
            quotas(10, &w),
            vec![(Platform::Desktop, 4), (Platform::Mobile, 3), (Platform::Web, 3)]
        );
        assert_eq!(
            quotas(11, &w),
            vec![(Platform::Desktop, 4), (Platform::Mobile, 4), (Platform::Web, 3)]
        );
        let w2 = [(Platform::Mobile, 2.0), (Platform::Web, 1.0)];
        assert_eq!(quotas(7, &w2), vec![(Platform::Mobile, 5), (Platform::Web, 2)]);
    }

    #[test]
    fn sample_uniform_distinct_and_bounded() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
        let s = sample_uniform(&ids, 30, 5);
        assert_eq!(s.len(), 30);
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 30);
        let all = sample_uniform(&ids, 500, 5);
        assert_eq!(all.len(), 100);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 100);
        assert_ne!(all, ids);
        assert!(sample_uniform::<String>(&[], 3, 1).is_empty());
    }

    #[test]
    fn balanced_when_already_balanced() {
        let c = generate(
            &[
                SyntheticSource::new("m", Platform::Mobile, 1000),
                SyntheticSource::new("w", Platform::Web, 1000),
                SyntheticSource::new("d", Platform::Desktop, 1000),
            ],
            1,
        );
        let s = build_epoch_schedule(&c, &one_to_one(), 3000, 4).unwrap();
        assert!(s.realized_platform_counts.values().all(|&n| n == 1000));
        // No platform is short of its quota, so nothing repeats.
        assert_eq!(s.ids.iter().collect::<HashSet<_>>().len(), 3000);
    }

    #[test]
    fn zero_weight_platform_may_be_absent() {
        let c = generate(&[SyntheticSource::new("m", Platform::Mobile, 10)], 1);
        let mut r = BTreeMap::new();
        r.insert(Platform::Mobile, 1.0);
        r.insert(Platform::Desktop, 0.0);
        let s = build_epoch_schedule(&c, &r, 25, 0).unwrap();
        assert_eq!(s.realized_platform_counts[&Platform::Mobile], 25);
    }

    #[test]
    fn missing_platform_named() {
        let c = generate(&[SyntheticSource::new("m", Platform::Mobile, 10)], 1);
        let err = build_epoch_schedule(&c, &one_to_one(), 30, 0).unwrap_err();
        assert!(matches!(err, RecipeError::MissingPlatform(Platform::Desktop)));
        assert!(err.to_string().contains("desktop"));
    }

    #[test]
    fn bad_ratios_rejected() {
        let c = generate(&[SyntheticSource::new("m", Platform::Mobile, 10)], 1);
        let mut r = BTreeMap::new();
        r.insert(Platform::Mobile, -1.0);
        assert!(matches!(
            build_epoch_schedule(&c, &r, 5, 0),
            Err(RecipeError::InvalidRatio { .. })
        ));
        assert!(matches!(
            build_epoch_schedule(&c, &BTreeMap::new(), 5, 0),
            Err(RecipeError::NoRatios)
        ));
        assert!(matches!(
            build_epoch_schedule(&c, &one_to_one(), 0, 0),
            Err(RecipeError::ZeroEpochLength)
        ));
    }

    #[test]
    fn natural_schedule_cycles() {
        let c = generate(&[SyntheticSource::new("m", Platform::Mobile, 4)], 1);
        let ids: Vec<String> = c.ids().map(str::to_string).collect();
        let s = build_natural_schedule(&c, &ids, 10, 2).unwrap();
        assert_eq!(s.len(), 10);
        let first: HashSet<_> = s.ids[..4].iter().collect();
        assert_eq!(first.len(), 4);
        assert_eq!(s.realized_platform_counts[&Platform::Mobile], 10);
    }
}
