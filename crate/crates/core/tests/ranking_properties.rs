use gliorank::fields::{InvasionMap, Segmentation, Shape};
use gliorank::ranking::{average_precision, evaluate, pr_curve};
use proptest::prelude::*;

/// Small instance: invasion times on a 1-D strip with a segmentation and an
/// evaluation region. Times come from a short list so ties are common.
#[derive(Debug, Clone)]
struct Instance {
    times: Vec<f64>,
    s: Vec<bool>,
    roi: Vec<bool>,
}

impl Instance {
    fn shape(&self) -> Shape {
        Shape::new([self.times.len(), 1, 1], 1.0).unwrap()
    }

    fn map(&self) -> InvasionMap {
        InvasionMap::new(self.shape(), self.times.clone()).unwrap()
    }

    fn seg(&self, mask: &[bool]) -> Segmentation {
        Segmentation::new(self.shape(), mask.to_vec()).unwrap()
    }

    fn ap(&self) -> f64 {
        average_precision(&pr_curve(&self.map(), &self.seg(&self.s), &self.seg(&self.roi)).unwrap())
    }
}

fn level() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => (0u8..6).prop_map(f64::from),
        1 => Just(f64::INFINITY),
    ]
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=12)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(level(), n),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(prop::bool::weighted(0.8), n),
                0..n,
            )
        })
        .prop_map(|(times, mut s, mut roi, anchor)| {
            // at least one positive inside the region
            s[anchor] = true;
            roi[anchor] = true;
            Instance { times, s, roi }
        })
}

/// Tests every prediction set `{T <= t}` for the distinct values of T in the
/// region, the last one being the whole region.
fn brute_force_ap(inst: &Instance) -> f64 {
    let idx: Vec<usize> = (0..inst.times.len()).filter(|&i| inst.roi[i]).collect();
    let positives = idx.iter().filter(|&&i| inst.s[i]).count() as f64;
    let mut levels: Vec<f64> = idx.iter().map(|&i| inst.times[i]).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in levels {
        let predicted: Vec<usize> = idx.iter().copied().filter(|&i| inst.times[i] <= t).collect();
        let tp = predicted.iter().filter(|&&i| inst.s[i]).count() as f64;
        let recall = tp / positives;
        let precision = tp / predicted.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_exhaustive_enumeration(inst in instance()) {
        let ap = inst.ap();
        prop_assert!((ap - brute_force_ap(&inst)).abs() <= 1e-12, "{ap} vs {}", brute_force_ap(&inst));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn increasing_transforms_leave_ap_unchanged(inst in instance(), a in 0.01f64..10.0, b in 0.0f64..5.0) {
        let ap = inst.ap();
        for f in [
            Box::new(move |t: f64| a * t + b) as Box<dyn Fn(f64) -> f64>,
            Box::new(|t: f64| t.powi(3) + t),
            Box::new(|t: f64| (t / 3.0).exp()),
        ] {
            let times = inst.times.iter().map(|&t| if t.is_finite() { f(t) } else { t }).collect();
            let moved = Instance { times, ..inst.clone() };
            prop_assert_eq!(moved.ap(), ap);
        }
    }

    #[test]
    fn voxel_order_does_not_matter(inst in instance(), rot in 0usize..12) {
        let n = inst.times.len();
        let r = rot % n;
        let rotate = |v: &[bool]| { let mut v = v.to_vec(); v.rotate_left(r); v };
        let mut times = inst.times.clone();
        times.rotate_left(r);
        let moved = Instance { times, s: rotate(&inst.s), roi: rotate(&inst.roi) };
        prop_assert_eq!(moved.ap(), inst.ap());
        let mut rev = inst.clone();
        rev.times.reverse();
        rev.s.reverse();
        rev.roi.reverse();
        prop_assert_eq!(rev.ap(), inst.ap());
    }

    #[test]
    fn content_outside_the_region_is_ignored(inst in instance(), junk in prop::collection::vec((level(), any::<bool>()), 12)) {
        let base = evaluate(&inst.map(), &inst.seg(&inst.s), &inst.seg(&inst.roi)).unwrap();
        let mut other = inst.clone();
        for (i, (t, s)) in junk.into_iter().enumerate().take(inst.times.len()) {
            if !inst.roi[i] {
                other.times[i] = t;
                other.s[i] = s;
            }
        }
        let moved = evaluate(&other.map(), &other.seg(&other.s), &other.seg(&other.roi)).unwrap();
        prop_assert_eq!(moved.ap, base.ap);
        prop_assert_eq!(moved.pr.points(), base.pr.points());
        prop_assert_eq!(moved.volume_matched_t.to_bits(), base.volume_matched_t.to_bits());
    }

    #[test]
    fn ap_lies_between_the_worst_ranking_and_one(inst in instance()) {
        // Lowest possible AP: every negative first, then the positives one at
        // a time, so the k-th positive enters at precision k / (N + k).
        let in_roi = |want: bool| (0..inst.times.len()).filter(|&i| inst.roi[i] && inst.s[i] == want).count();
        let (p, n) = (in_roi(true), in_roi(false));
        let worst = (1..=p).map(|k| k as f64 / (n + k) as f64).sum::<f64>() / p as f64;
        let best_times = inst.s.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
        let best = Instance { times: best_times, ..inst.clone() }.ap();
        let ap = inst.ap();
        prop_assert_eq!(best, 1.0);
        prop_assert!(ap >= worst - 1e-12 && ap <= 1.0, "{worst} <= {ap} <= 1");
    }
}

#[test]
fn tied_worst_ranking_equals_prevalence() {
    let inst = Instance {
        times: vec![3.0, 3.0, 0.0, 1.0, 2.0, 2.0],
        s: vec![true, true, false, false, false, false],
        roi: vec![true; 6],
    };
    assert_eq!(inst.ap(), 2.0 / 6.0);
}

#[test]
fn untied_worst_ranking_falls_below_prevalence() {
    let inst = Instance {
        times: vec![2.0, 3.0, 0.0],
        s: vec![true, true, false],
        roi: vec![true; 3],
    };
    // (1/2 + 2/3) / 2
    assert_eq!(inst.ap(), 7.0 / 12.0);
    assert!(inst.ap() < 2.0 / 3.0);
}
