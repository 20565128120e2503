//! Compares the eikonal front with straight-line distance and shows how
//! tissue speed shapes arrival times.
//!
//! cargo run --example eikonal_front

use gliorank::eikonal::{fast_march, seed_sources, speed_from_params, SpeedMap};
use gliorank::fields::{Shape, VoxelGrid};
use gliorank::growth::{ModelParams, SeedInit};
use gliorank::phantom::{build_tissue, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let grid = VoxelGrid::full(Shape::new([41, 41, 41], 1.0)?);
    let shape = *grid.shape();
    let centre = shape.index(20, 20, 20);
    let src = gliorank::fields::Segmentation::from_indices(shape, [centre]);
    let t = fast_march(&SpeedMap::uniform(&grid, 1.0)?, &src)?;
    for p in [[30, 20, 20], [27, 27, 20], [26, 26, 26]] {
        let d = p.iter().map(|&c| (c as f64 - 20.0).powi(2)).sum::<f64>().sqrt();
        println!(
            "{p:?}: T = {:.3}, distance = {d:.3}",
            t.get(shape.index(p[0], p[1], p[2]))
        );
    }

    // on tissue, arrival depends on the local diffusivity
    let tissue = build_tissue(&PhantomSpec::default_2d())?;
    let params = ModelParams::default();
    let speed = speed_from_params(&tissue, &params);
    let seed = SeedInit::gaussian([60.0, 64.0, 0.0]);
    let arrival = fast_march(&speed, &seed_sources(&seed, tissue.grid(), params.c_v)?)?;
    let s = *tissue.shape();
    for x in [70, 80, 90] {
        let i = s.index(x, 64, 0);
        println!("x = {x}: speed {:.4}, T = {:.1}", speed.get(i), arrival.get(i));
    }
    Ok(())
}
