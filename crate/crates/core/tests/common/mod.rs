//! Phantom cases shared by the integration and acceptance tests.
#![allow(dead_code)]

use gliorank::eikonal::{fast_march, seed_sources, speed_from_params};
use gliorank::fields::Segmentation;
use gliorank::fields::TissueModel;
use gliorank::growth::{ModelParams, SeedInit};
use gliorank::phantom::{build_tissue, generate_case, FaPattern, GeneratedCase, PhantomSpec, TissueLayout};
use gliorank::schemes::{default_param_sets, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameters of default sweep setting `id`.
pub fn setting(id: &str) -> ModelParams {
    default_param_sets()
        .into_iter()
        .find(|s| s.id == id)
        .expect("known setting")
        .params
}

/// 2-D phantoms generated with one of the default sweep settings:
/// (case id, generating setting, spec).
pub fn self_consistency_specs() -> Vec<(&'static str, &'static str, PhantomSpec)> {
    let base = |id: &str, layout, fa_pattern, times| PhantomSpec {
        layout,
        fa_pattern,
        seed: Some([52.0, 60.0, 0.0]),
        params: setting(id),
        times,
        ..PhantomSpec::default_2d()
    };
    vec![
        (
            "slab",
            "p3",
            base(
                "p3",
                TissueLayout::TwoLayerSlab,
                FaPattern::Zero,
                [500.0, 800.0, 1100.0],
            ),
        ),
        (
            "shells",
            "p5",
            base(
                "p5",
                TissueLayout::ConcentricShells,
                FaPattern::Zero,
                [500.0, 650.0, 800.0],
            ),
        ),
        (
            "fibers",
            "p2",
            base(
                "p2",
                TissueLayout::ConcentricShells,
                FaPattern::RadialFiber,
                [500.0, 800.0, 1100.0],
            ),
        ),
    ]
}

pub fn self_consistency_case(k: usize) -> (GeneratedCase, &'static str) {
    let (id, setting, spec) = self_consistency_specs().swap_remove(k);
    (generate_case(&spec, id).expect("phantom"), setting)
}

pub fn default_settings() -> Vec<ParamSet> {
    default_param_sets()
}

/// An initial segmentation grown by fast marching from a known point:
/// the 201 earliest voxels reached from the Gaussian seed at `p`.
pub struct EikonalBall {
    pub tissue: TissueModel,
    pub params: ModelParams,
    pub source: [f64; 3],
    pub s0: Segmentation,
}

/// Ten eikonal-ball phantoms on the default 2-D tissue with in-brain
/// sources drawn from a fixed stream.
pub fn eikonal_balls() -> Vec<EikonalBall> {
    let spec = PhantomSpec::default_2d();
    let tissue = build_tissue(&spec).expect("tissue");
    let speed = speed_from_params(&tissue, &spec.params);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..10)
        .map(|_| {
            let grid = tissue.grid();
            let p = loop {
                let p = [rng.random_range(30..98) as f64, rng.random_range(30..98) as f64, 0.0];
                if grid.contains(grid.shape().nearest_voxel(p).expect("on grid")) {
                    break p;
                }
            };
            let src = seed_sources(&SeedInit::gaussian(p), grid, spec.params.c_v).expect("sources");
            let t = fast_march(&speed, &src).expect("march");
            let mut finite: Vec<f64> = t.times().iter().copied().filter(|v| v.is_finite()).collect();
            finite.sort_by(f64::total_cmp);
            EikonalBall {
                tissue: tissue.clone(),
                params: spec.params,
                source: p,
                s0: t.threshold_set(finite[200]),
            }
        })
        .collect()
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}
