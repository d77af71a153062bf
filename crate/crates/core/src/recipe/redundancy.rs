use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::corpus::Corpus;
use crate::parallel::parallel_map;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub content_hash: String,
    pub member_ids: Vec<String>,
}

/// Exact-duplicate screenshot report. Near-duplicates are not detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    /// Groups of two or more examples whose images hash identically, ordered
    /// by the corpus position of their first member.
    pub duplicate_groups: Vec<DuplicateGroup>,
    /// Largest group, or 0 when there are no groups.
    pub max_group_size: usize,
    /// `(total - distinct contents) / total`; 0 for an empty corpus.
    pub duplicate_fraction: f64,
    pub warnings: Vec<String>,
}

/// Hash every referenced image (relative references resolve against
/// `base_dir`) and group examples by content. Unreadable images count as
/// unique content.
pub fn redundancy_report(corpus: &Corpus, base_dir: &Path, parallelism: usize) -> RedundancyReport {
    let mut paths: Vec<&str> = corpus.examples().iter().map(|e| e.image_ref.as_str()).collect();
    paths.sort_unstable();
    paths.dedup();

    let hashes: Vec<Result<String, String>> = parallel_map(&paths, parallelism, |p| {
        let full = base_dir.join(p);
        fs::read(&full)
            .map(|bytes| hex::encode(Sha256::digest(&bytes)))
            .map_err(|e| format!("cannot read image {}: {e}", full.display()))
    });
    let by_path: HashMap<&str, &Result<String, String>> = paths.iter().copied().zip(&hashes).collect();

    let mut warnings = Vec::new();
    let mut groups: BTreeMap<String, (usize, Vec<String>)> = BTreeMap::new();
    let mut distinct = 0usize;
    for (pos, ex) in corpus.examples().iter().enumerate() {
        match by_path[ex.image_ref.as_str()] {
            Ok(h) => {
                let entry = groups.entry(h.clone()).or_insert_with(|| {
                    distinct += 1;
                    (pos, Vec::new())
                });
                entry.1.push(ex.id.clone());
            }
            Err(msg) => {
                warn!("{msg}");
                warnings.push(format!("{}: {msg}", ex.id));
                distinct += 1;
            }
        }
    }

    let mut duplicate_groups: Vec<(usize, DuplicateGroup)> = groups
        .into_iter()
        .filter(|(_, (_, members))| members.len() >= 2)
        .map(|(content_hash, (pos, member_ids))| {
            (
                pos,
                DuplicateGroup {
                    content_hash,
                    member_ids,
                },
            )
        })
        .collect();
    duplicate_groups.sort_by_key(|(pos, _)| *pos);
    let duplicate_groups: Vec<DuplicateGroup> = duplicate_groups.into_iter().map(|(_, g)| g).collect();

    let total = corpus.len();
    RedundancyReport {
        max_group_size: duplicate_groups.iter().map(|g| g.member_ids.len()).max().unwrap_or(0),
        duplicate_fraction: if total == 0 {
            0.0
        } else {
            (total - distinct) as f64 / total as f64
        },
        duplicate_groups,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GroundingExample, Platform};

    fn ex(id: &str, image: &str) -> GroundingExample {
        GroundingExample {
            id: id.into(),
            image_ref: image.into(),
            image_width: 10,
            image_height: 10,
            platform: Platform::Web,
            source: "s".into(),
            instruction: "x".into(),
            bbox: [1, 1, 2, 2].into(),
            element_type: None,
        }
    }

    #[test]
    fn identical_pair_is_half_redundant() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"same").unwrap();
        fs::write(dir.path().join("b.png"), b"same").unwrap();
        let c = Corpus::new(vec![ex("a", "a.png"), ex("b", "b.png")]).unwrap();
        let r = redundancy_report(&c, dir.path(), 2);
        assert_eq!(r.duplicate_groups.len(), 1);
        assert_eq!(r.duplicate_groups[0].member_ids, ["a", "b"]);
        assert_eq!(r.duplicate_fraction, 0.5);
    }

    #[test]
    fn unique_images_no_groups() {
        let dir = tempfile::tempdir().unwrap();
        let mut exs = Vec::new();
        for i in 0..4 {
            fs::write(dir.path().join(format!("{i}.png")), format!("img{i}")).unwrap();
            exs.push(ex(&format!("e{i}"), &format!("{i}.png")));
        }
        let r = redundancy_report(&Corpus::new(exs).unwrap(), dir.path(), 3);
        assert!(r.duplicate_groups.is_empty());
        assert_eq!(r.duplicate_fraction, 0.0);
        assert_eq!(r.max_group_size, 0);
    }

    #[test]
    fn copies_form_one_group() {
        // Ten images; image 0 plus two copies of it.
        let dir = tempfile::tempdir().unwrap();
        let mut exs = Vec::new();
        for i in 0..10 {
            let body = if i < 3 { "dup".to_string() } else { format!("img{i}") };
            fs::write(dir.path().join(format!("{i}.png")), body).unwrap();
            exs.push(ex(&format!("e{i}"), &format!("{i}.png")));
        }
        let r = redundancy_report(&Corpus::new(exs).unwrap(), dir.path(), 4);
        assert_eq!(r.max_group_size, 3);
        assert_eq!(r.duplicate_fraction, 0.2);
    }

    #[test]
    fn unreadable_image_is_singleton_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let c = Corpus::new(vec![ex("a", "a.png"), ex("b", "missing.png"), ex("c", "missing.png")]).unwrap();
        let r = redundancy_report(&c, dir.path(), 1);
        assert!(r.duplicate_groups.is_empty());
        assert_eq!(r.warnings.len(), 2);
        assert_eq!(r.duplicate_fraction, 0.0);
    }
}
