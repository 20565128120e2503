//! Grows a tumour on a two-dimensional phantom and reports how the
//! visible region expands.
//!
//! cargo run --example simulate_growth

use gliorank::growth::{simulate, ModelParams, Scheme, SeedInit, SimulationSettings};
use gliorank::phantom::{build_tissue, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PhantomSpec {
        dims: [64, 64, 1],
        ..PhantomSpec::default_2d()
    };
    let tissue = build_tissue(&spec)?;
    let params = ModelParams::new(0.01, 0.0, 0.1, 0.01)?;
    let settings = SimulationSettings {
        t_max: 900.0,
        scheme: Scheme::SemiImplicit,
        dt: 2.0,
        record_interval: Some(75),
        ..SimulationSettings::default()
    };
    let out = simulate(&SeedInit::gaussian([31.0, 31.0, 0.0]), &tissue, &params, &settings)?;

    // the narrow seed spreads below the visibility threshold before the
    // logistic term pushes it back up
    for snap in &out.snapshots {
        let visible = snap.density.values().iter().filter(|&&c| c >= params.c_v).count();
        println!(
            "t = {:>6.1}  mass = {:>9.3}  visible voxels = {visible}",
            snap.time,
            snap.density.total()
        );
    }
    let invaded = out.invasion.times().iter().filter(|t| t.is_finite()).count();
    println!("{invaded} voxels invaded after {} steps", out.steps);
    Ok(())
}
