#![allow(dead_code)]

use std::fs;
use std::path::Path;

use groundkit::corpus::{ElementType, GroundingExample, Platform};
use groundkit::eval::{score_answer, Benchmark, BenchmarkTask, Prediction, ProGroup};
use groundkit::{BBox, PixelBox};

pub fn example(id: &str, w: u32, h: u32, bbox: [u32; 4], platform: Platform) -> GroundingExample {
    GroundingExample {
        id: id.into(),
        image_ref: format!("img/{id}.png"),
        image_width: w,
        image_height: h,
        platform,
        source: "fixture".into(),
        instruction: format!("click target {id}"),
        bbox: BBox::from(bbox),
        element_type: None,
    }
}

/// Half-pixel canvas with one box painted on it: cell `(x, y)` stands for
/// the point `(x / 2, y / 2)`. The canvas extends past the box by a margin
/// so membership is read from painted cells, never from the box bounds.
pub struct Raster {
    origin: i64,
    side: i64,
    cells: Vec<bool>,
}

const MARGIN: i64 = 64;

impl Raster {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        let (cx, cy) = (x - self.origin, y - self.origin);
        if cx < 0 || cy < 0 || cx >= self.side || cy >= self.side {
            return false;
        }
        self.cells[(cy * self.side + cx) as usize]
    }
}

pub fn raster(b: &PixelBox) -> Raster {
    let origin = -MARGIN;
    let side = 2 * b.x_max.max(b.y_max) as i64 + 2 * MARGIN;
    let mut cells = vec![false; (side * side) as usize];
    for y in 2 * b.y_min as i64..=2 * b.y_max as i64 {
        for x in 2 * b.x_min as i64..=2 * b.x_max as i64 {
            cells[((y - origin) * side + (x - origin)) as usize] = true;
        }
    }
    Raster { origin, side, cells }
}

const BOX: [u32; 4] = [100, 100, 200, 200];
const HIT: &str = "(150, 150)";

/// Miss answers cycle through a plain miss, garbage and an off-screen click.
fn miss(i: usize) -> &'static str {
    ["(500, 500)", "no idea", "(2000, 10)"][i % 3]
}

/// Hits per platform out of 12 tasks each: mobile 9, desktop 5, web 11.
pub const SCREENSPOT_HITS: [(Platform, u64); 3] = [(Platform::Mobile, 9), (Platform::Desktop, 5), (Platform::Web, 11)];

/// 36 tasks at 1000x1000, 12 per platform, with scripted answers.
pub fn screenspot_fixture() -> (Vec<BenchmarkTask>, Vec<Prediction>) {
    let mut tasks = Vec::new();
    let mut preds = Vec::new();
    for (p, hits) in SCREENSPOT_HITS {
        for i in 0..12 {
            let ex = example(&format!("ss-{}-{i:02}", p.as_str()), 1000, 1000, BOX, p);
            let task = BenchmarkTask {
                example: ex,
                benchmark: Benchmark::Screenspot,
                group: None,
            };
            let raw = if (i as u64) < hits { HIT } else { miss(i) };
            preds.push(score_answer(&task, raw));
            tasks.push(task);
        }
    }
    (tasks, preds)
}

/// Text and icon hits per group, out of 3 tasks each.
pub const PRO_HITS: [(ProGroup, u64, u64); 6] = [
    (ProGroup::Development, 3, 1),
    (ProGroup::Creative, 2, 0),
    (ProGroup::Cad, 1, 2),
    (ProGroup::Scientific, 3, 0),
    (ProGroup::Office, 2, 1),
    (ProGroup::Os, 0, 1),
];

/// 36 tasks at 3840x2160: six groups of three text and three icon tasks.
pub fn pro_fixture() -> (Vec<BenchmarkTask>, Vec<Prediction>) {
    let mut tasks = Vec::new();
    let mut preds = Vec::new();
    for (g, text_hits, icon_hits) in PRO_HITS {
        for (kind, hits) in [(ElementType::Text, text_hits), (ElementType::Icon, icon_hits)] {
            for i in 0..3 {
                let id = format!("pro-{}-{}-{i}", g.as_str(), kind.as_str());
                let mut ex = example(&id, 3840, 2160, BOX, Platform::Desktop);
                ex.element_type = Some(kind);
                let task = BenchmarkTask {
                    example: ex,
                    benchmark: Benchmark::ScreenspotPro,
                    group: Some(g),
                };
                let raw = if (i as u64) < hits { HIT } else { miss(i + 1) };
                preds.push(score_answer(&task, raw));
                tasks.push(task);
            }
        }
    }
    (tasks, preds)
}

/// Compare against a golden file; `GROUNDKIT_BLESS=1` rewrites it instead.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("GROUNDKIT_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        fs::write(&path, actual).map_err(|e| e.to_string())?;
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected != actual {
        return Err(format!("{name} differs from golden:\n{actual}"));
    }
    Ok(())
}
