//! Ranks parameter settings on a small cohort and relates fit quality to
//! prediction quality.
//!
//! cargo run --release --example parameter_sweep

use gliorank::fitting::FitConfig;
use gliorank::phantom::{generate_case, PhantomSpec};
use gliorank::schemes::{default_param_sets, fit_vs_prediction_report, parameter_sweep, EvalScheme, SweepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cases = [[52.0, 60.0, 0.0], [60.0, 64.0, 0.0]]
        .iter()
        .enumerate()
        .map(|(k, &seed)| {
            let spec = PhantomSpec {
                seed: Some(seed),
                ..PhantomSpec::default_2d()
            };
            generate_case(&spec, format!("case_{k:03}")).map(|g| g.case)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let config = SweepConfig {
        scheme: EvalScheme::Forward,
        fit: FitConfig {
            n_restarts: 3,
            ..FitConfig::default()
        },
        sim: Default::default(),
        jobs: None,
    };
    let sweep = parameter_sweep(&cases, &default_param_sets(), &config)?;
    print!("{}", sweep.to_csv());
    for case in &cases {
        let order: Vec<&str> = sweep
            .ranking_for_case(&case.id)
            .iter()
            .map(|r| r.param_id.as_str())
            .collect();
        println!("{}: {}", case.id, order.join(" > "));
    }
    match fit_vs_prediction_report(&sweep) {
        Ok(report) => print!("{}", report.to_text()),
        Err(e) => println!("no correlation: {e}"),
    }
    Ok(())
}
