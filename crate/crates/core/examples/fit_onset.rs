//! Recovers a tumour onset from a single segmentation.
//!
//! cargo run --example fit_onset

use gliorank::eikonal::{fast_march, seed_sources, speed_from_params};
use gliorank::fitting::{fit_seed, FitConfig, SeedProblem};
use gliorank::growth::{ModelParams, SeedInit};
use gliorank::phantom::{build_tissue, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tissue = build_tissue(&PhantomSpec::default_2d())?;
    let params = ModelParams::default();
    let speed = speed_from_params(&tissue, &params);

    // observed tumour: everything the front reaches by t = 250
    let truth = [58.0, 70.0, 0.0];
    let sources = seed_sources(&SeedInit::gaussian(truth), tissue.grid(), params.c_v)?;
    let observed = fast_march(&speed, &sources)?.threshold_set(250.0);
    println!("observed tumour: {} voxels", observed.count());

    let problem = SeedProblem::new(tissue.grid(), &speed, &observed, params.c_v)?;
    let fit = fit_seed(&problem, &FitConfig::default())?;
    print!("{}", fit.report());
    let err = (0..3).map(|a| (fit.x_s_best[a] - truth[a]).powi(2)).sum::<f64>().sqrt();
    println!("distance to the true onset: {err:.2} voxels");
    Ok(())
}
