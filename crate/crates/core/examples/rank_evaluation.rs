//! Scores an invasion-time ranking against a segmentation.
//!
//! cargo run --example rank_evaluation

use gliorank::fields::{InvasionMap, Segmentation, Shape};
use gliorank::ranking::evaluate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = Shape::new([6, 1, 1], 1.0)?;
    let t = InvasionMap::new(shape, vec![1.0, 2.0, 3.0, 4.0, 4.0, f64::INFINITY])?;
    let s = Segmentation::from_indices(shape, [0, 2, 4]);
    let roi = Segmentation::from_indices(shape, 0..6);

    let report = evaluate(&t, &s, &roi)?;
    println!("AP = {:.4}", report.ap);
    println!("volume-matched threshold = {}", report.volume_matched_t);
    print!("{}", report.pr.to_csv());

    // any strictly increasing rescaling of the times gives the same score
    let rescaled = t.map_finite(|v| 3.0 * v.powi(2) + 10.0);
    println!("AP after rescaling = {:.4}", evaluate(&rescaled, &s, &roi)?.ap);
    Ok(())
}
