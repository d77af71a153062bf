mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use groundkit::corpus::Platform;
use groundkit::eval::{aggregate, score_answer, tasks_from_examples, Benchmark};
use groundkit::geometry::score_click_pixels;
use groundkit::recipe::sample_uniform;
use groundkit::trainer::{format_example, PromptTemplate};
use groundkit::{score_click, BBox, ClickPoint};

use common::{example, raster};

fn bbox() -> impl Strategy<Value = [u32; 4]> {
    (0u32..200, 0u32..200, 1u32..60, 1u32..60).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #[test]
    fn score_click_matches_raster(b in bbox(), px in -20i64..540, py in -20i64..540) {
        let pb = BBox::from(b);
        let p = ClickPoint::new(px as f64 / 2.0, py as f64 / 2.0);
        let oracle = raster(&pb).contains(px, py);
        prop_assert_eq!(score_click(p, &pb.cast::<f64>().unwrap()), oracle);
        prop_assert_eq!(score_click_pixels(p, &pb), oracle);
    }

    #[test]
    fn training_target_hits_its_box(b in bbox()) {
        let ex = example("t", 400, 400, b, Platform::Web);
        let (_, target) = format_example(&ex, &PromptTemplate::default());
        let task = tasks_from_examples(&[ex], Benchmark::Screenspot).remove(0);
        prop_assert!(score_answer(&task, &target).hit, "{} misses {:?}", target, b);
    }

    #[test]
    fn hit_implies_inside_box(b in bbox(), x in -50.0f64..500.0, y in -50.0f64..500.0) {
        let ex = example("t", 400, 400, b, Platform::Web);
        let task = tasks_from_examples(&[ex], Benchmark::Screenspot).remove(0);
        let pred = score_answer(&task, &format!("({x:.1}, {y:.1})"));
        if pred.hit {
            let p = pred.parsed_point.unwrap();
            prop_assert!(p.x >= b[0] as f64 && p.x <= b[2] as f64 && p.y >= b[1] as f64 && p.y <= b[3] as f64);
            prop_assert!(pred.failure_kind.is_none());
        }
    }

    #[test]
    fn aggregate_ignores_prediction_order(seed in any::<u64>()) {
        let (tasks, preds) = common::screenspot_fixture();
        let mut shuffled = preds.clone();
        let order = sample_uniform(&(0..preds.len()).map(|i| i.to_string()).collect::<Vec<_>>(), preds.len(), seed);
        for (slot, i) in order.iter().enumerate() {
            shuffled[slot] = preds[i.parse::<usize>().unwrap()].clone();
        }
        let a = aggregate(&preds, &tasks).unwrap();
        let b = aggregate(&shuffled, &tasks).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn uniform_sample_is_distinct_subset(n in 0usize..300, k in 0usize..320, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id-{i}")).collect();
        let s = sample_uniform(&ids, k, seed);
        prop_assert_eq!(s.len(), k.min(n));
        let set: HashSet<&String> = s.iter().collect();
        prop_assert_eq!(set.len(), s.len());
        let all: HashSet<&String> = ids.iter().collect();
        prop_assert!(s.iter().all(|id| all.contains(id)));
    }
}
