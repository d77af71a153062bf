//! Deterministic synthetic corpora for desk-scale runs and tests.
//!
//! Image references point at files that need not exist; only the memorizing
//! and scripted backends are meant to consume these corpora.

use serde::{Deserialize, Serialize};

use super::{Corpus, ElementType, GroundingExample, Platform};
use crate::geometry::BBox;
use crate::seed::{derive_seed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub tag: String,
    pub platform: Platform,
    pub count: usize,
    /// Screenshot sizes cycled through in order.
    #[serde(default = "default_resolutions")]
    pub resolutions: Vec<(u32, u32)>,
}

fn default_resolutions() -> Vec<(u32, u32)> {
    vec![(1920, 1080)]
}

impl SyntheticSource {
    pub fn new(tag: &str, platform: Platform, count: usize) -> Self {
        Self {
            tag: tag.into(),
            platform,
            count,
            resolutions: default_resolutions(),
        }
    }

    pub fn with_resolutions(mut self, res: &[(u32, u32)]) -> Self {
        self.resolutions = res.to_vec();
        self
    }
}

/// Examples `"{tag}-{i:06}"` for every source, in source order.
pub fn generate(sources: &[SyntheticSource], seed: u64) -> Corpus {
    let mut out = Vec::new();
    for src in sources {
        let mut rng = SeededRng::new(derive_seed(seed, &src.tag));
        let resolutions = if src.resolutions.is_empty() {
            default_resolutions()
        } else {
            src.resolutions.clone()
        };
        for i in 0..src.count {
            let (w, h) = resolutions[i % resolutions.len()];
            out.push(GroundingExample {
                id: format!("{}-{i:06}", src.tag),
                image_ref: format!("synthetic/{}/{i:06}.png", src.tag),
                image_width: w,
                image_height: h,
                platform: src.platform,
                source: src.tag.clone(),
                instruction: format!("select element {i} in {}", src.tag),
                bbox: random_box(&mut rng, w, h),
                element_type: Some(if rng.index(2) == 0 {
                    ElementType::Text
                } else {
                    ElementType::Icon
                }),
            });
        }
    }
    Corpus::new(out).expect("synthetic examples are valid and uniquely named")
}

/// A proper box inside `w x h`; images must be at least 2 pixels per side.
pub(crate) fn random_box(rng: &mut SeededRng, w: u32, h: u32) -> BBox<u32> {
    let side = |rng: &mut SeededRng, extent: u32| -> (u32, u32) {
        let max_len = (extent / 4).max(1) as usize;
        let len = 1 + rng.index(max_len) as u32;
        let start = rng.index((extent - len + 1) as usize) as u32;
        (start, start + len)
    };
    let (x0, x1) = side(rng, w);
    let (y0, y1) = side(rng, h);
    BBox::new(x0, y0, x1, y1)
}
