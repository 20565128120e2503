//! Evaluates one parameter setting on a phantom case with both schemes.
//!
//! cargo run --example evaluation_schemes

use gliorank::fitting::FitConfig;
use gliorank::growth::SimulationSettings;
use gliorank::phantom::{generate_case, PhantomSpec};
use gliorank::schemes::{default_param_sets, evaluate_with_onset, fit_onset, EvalScheme};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PhantomSpec {
        seed: Some([52.0, 60.0, 0.0]),
        ..PhantomSpec::default_2d()
    };
    let generated = generate_case(&spec, "demo")?;
    let case = &generated.case;
    println!(
        "S0 {} voxels, S1 {}, S2 {}",
        case.s0.count(),
        case.s1.count(),
        case.s2.count()
    );

    let sim = SimulationSettings::default();
    for set in default_param_sets().iter().take(3) {
        // the onset fit is shared by both schemes
        let onset = fit_onset(case, &set.params, &FitConfig::default(), &sim)?;
        for scheme in [EvalScheme::Bidirectional, EvalScheme::Forward] {
            let out = evaluate_with_onset(case, &set.params, scheme, &onset, &sim)?;
            println!(
                "{} {:<13} ap_fit {:.4} ap_pred {:.4}",
                set.id,
                scheme.as_str(),
                out.ap_fit,
                out.ap_pred
            );
        }
    }
    Ok(())
}
