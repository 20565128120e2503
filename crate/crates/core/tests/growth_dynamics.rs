use gliorank::fields::{Segmentation, Shape, TissueClass, TissueModel, VoxelGrid};
use gliorank::growth::{
    assemble_diffusion, initialize_density, simulate, DiffusionField, GrowthSolver, ModelParams, Scheme, SeedInit,
    SimulationSettings,
};
use gliorank::phantom::{build_tissue, FaPattern, PhantomSpec, TissueLayout};
use gliorank::stats::spearman_rho;

fn isotropic(rho: f64, kappa: f64) -> ModelParams {
    ModelParams {
        rho,
        tau: 0.0,
        kappa_w: kappa,
        kappa_g: kappa,
        c_v: 0.5,
    }
}

fn anisotropic_tissue(dims: [usize; 3]) -> TissueModel {
    build_tissue(&PhantomSpec {
        dims,
        layout: TissueLayout::ConcentricShells,
        fa_pattern: FaPattern::RadialFiber,
        ..PhantomSpec::default_2d()
    })
    .unwrap()
}

fn uniform(dims: [usize; 3]) -> TissueModel {
    TissueModel::uniform(
        &VoxelGrid::full(Shape::new(dims, 1.0).unwrap()),
        TissueClass::WhiteMatter,
    )
}

#[test]
fn density_stays_in_the_unit_interval() {
    let tissue = anisotropic_tissue([40, 40, 1]);
    let params = ModelParams {
        rho: 0.05,
        tau: 0.5,
        kappa_w: 0.2,
        kappa_g: 0.02,
        c_v: 0.5,
    };
    let settings = SimulationSettings {
        t_max: 200.0,
        record_interval: Some(1),
        stop_when_saturated: false,
        ..SimulationSettings::default()
    };
    let out = simulate(&SeedInit::gaussian([20.0, 20.0, 0.0]), &tissue, &params, &settings).unwrap();
    // the initial condition is snapshot 0
    assert_eq!(out.snapshots.len(), settings.step_count() + 1);
    for snap in &out.snapshots {
        for &c in snap.density.values() {
            assert!((-1e-12..=1.0 + 1e-12).contains(&c), "c = {c} at step {}", snap.step);
        }
    }
}

#[test]
fn mass_is_conserved_without_proliferation_under_anisotropy() {
    let tissue = anisotropic_tissue([16, 16, 16]);
    let params = ModelParams {
        rho: 0.0,
        tau: 0.5,
        kappa_w: 0.1,
        kappa_g: 0.01,
        c_v: 0.5,
    };
    let diffusion = assemble_diffusion(&tissue, &params);
    let solver = GrowthSolver::new(tissue.grid(), &diffusion, &params).unwrap();
    let mut c = initialize_density(&SeedInit::gaussian([6.0, 8.0, 9.0]), tissue.grid(), &params).unwrap();
    let m0 = c.total();
    for scheme in [Scheme::Explicit, Scheme::SemiImplicit] {
        for _ in 0..500 {
            c = solver.step(&c, 0.5, scheme).unwrap();
        }
    }
    assert!(((c.total() - m0) / m0).abs() < 1e-6, "{} vs {m0}", c.total());
}

#[test]
fn zero_diffusion_follows_the_logistic_curve() {
    let tissue = uniform([3, 3, 1]);
    let params = isotropic(0.05, 0.01);
    let diffusion = DiffusionField::zero(*tissue.shape());
    let solver = GrowthSolver::new(tissue.grid(), &diffusion, &params).unwrap();
    let mut c = initialize_density(&SeedInit::gaussian([1.0, 1.0, 0.0]), tissue.grid(), &params).unwrap();
    let c0 = c.values().to_vec();
    for _ in 0..1000 {
        c = solver.step(&c, 0.1, Scheme::Explicit).unwrap();
    }
    let t = 100.0f64;
    for (a, &b) in c.values().iter().zip(&c0) {
        let exact = b / (b + (1.0 - b) * (-params.rho * t).exp());
        assert!((a - exact).abs() < 1e-4, "{a} vs {exact}");
    }
}

/// Images of a cube index under the 48 symmetries of the cube.
fn cube_images(n: usize, [x, y, z]: [usize; 3]) -> Vec<[usize; 3]> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let p = [x, y, z];
    let mut out = Vec::with_capacity(48);
    for perm in perms {
        for flips in 0..8 {
            let mut q = [0; 3];
            for a in 0..3 {
                let v = p[perm[a]];
                q[a] = if flips & (1 << a) != 0 { n - 1 - v } else { v };
            }
            out.push(q);
        }
    }
    out
}

#[test]
fn centred_seed_gives_a_cube_symmetric_invasion_map() {
    let n = 15;
    let tissue = uniform([n, n, n]);
    let settings = SimulationSettings {
        t_max: 60.0,
        ..SimulationSettings::default()
    };
    let out = simulate(
        &SeedInit::gaussian([7.0, 7.0, 7.0]),
        &tissue,
        &isotropic(0.1, 0.2),
        &settings,
    )
    .unwrap();
    let shape = *tissue.shape();
    let t = &out.invasion;
    let invaded = (0..shape.len()).filter(|&i| t.is_invaded(i)).count();
    assert!(invaded > 100, "only {invaded} voxels invaded");
    for i in 0..shape.len() {
        for q in cube_images(n, shape.coords(i)) {
            let j = shape.index(q[0], q[1], q[2]);
            let (a, b) = (t.get(i), t.get(j));
            assert!(
                a == b || (a - b).abs() <= 1e-9,
                "T({:?}) = {a}, T({q:?}) = {b}",
                shape.coords(i)
            );
        }
    }
}

#[test]
fn front_speed_approaches_the_travelling_wave_speed() {
    let n = 300;
    let tissue = uniform([n, 1, 1]);
    let params = isotropic(0.1, 0.1);
    let seed = Segmentation::from_indices(*tissue.shape(), 0..3);
    let settings = SimulationSettings {
        t_max: 1500.0,
        ..SimulationSettings::default()
    };
    let out = simulate(&SeedInit::Segmentation(seed), &tissue, &params, &settings).unwrap();
    let (a, b) = (150, 250);
    let speed = (b - a) as f64 / (out.invasion.get(b) - out.invasion.get(a));
    let kpp = 2.0 * (params.rho * params.kappa_w).sqrt();
    assert!((speed - kpp).abs() <= 0.25 * kpp, "speed {speed} vs {kpp}");
    // level sets advance monotonically away from the seed
    let times = out.invasion.times();
    assert!(times[3..b + 1].windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn explicit_and_semi_implicit_rank_voxels_alike() {
    let tissue = anisotropic_tissue([48, 48, 1]);
    let params = ModelParams {
        rho: 0.02,
        tau: 0.3,
        kappa_w: 0.1,
        kappa_g: 0.02,
        c_v: 0.5,
    };
    let run = |scheme| {
        let settings = SimulationSettings {
            t_max: 500.0,
            scheme,
            ..SimulationSettings::default()
        };
        simulate(&SeedInit::gaussian([24.0, 22.0, 0.0]), &tissue, &params, &settings)
            .unwrap()
            .invasion
    };
    let (e, s) = (run(Scheme::Explicit), run(Scheme::SemiImplicit));
    let both: Vec<usize> = (0..e.times().len())
        .filter(|&i| e.is_invaded(i) && s.is_invaded(i))
        .collect();
    assert!(both.len() > 100);
    let a: Vec<f64> = both.iter().map(|&i| e.get(i)).collect();
    let b: Vec<f64> = both.iter().map(|&i| s.get(i)).collect();
    let rho = spearman_rho(&a, &b).unwrap();
    assert!(rho > 0.99, "rho = {rho}");
}

#[test]
fn threshold_sets_of_a_simulation_are_nested() {
    let tissue = anisotropic_tissue([32, 32, 1]);
    let settings = SimulationSettings {
        t_max: 400.0,
        ..SimulationSettings::default()
    };
    let params = isotropic(0.02, 0.1);
    let t = simulate(&SeedInit::gaussian([16.0, 15.0, 0.0]), &tissue, &params, &settings)
        .unwrap()
        .invasion;
    let mut levels: Vec<f64> = t.times().iter().copied().filter(|v| v.is_finite()).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let step = (levels.len() / 20).max(1);
    let sets: Vec<Segmentation> = levels.iter().step_by(step).map(|&l| t.threshold_set(l)).collect();
    for w in sets.windows(2) {
        assert!(w[0].is_subset_of(&w[1]));
    }
}
