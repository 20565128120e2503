//! Generates a phantom case, writes it to disk and reads it back.
//!
//! cargo run --example phantom_case

use gliorank::phantom::{generate_case, manifest, read_case, sphericity, write_case, CavitySpec, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PhantomSpec {
        rng_seed: 11,
        cavity: Some(CavitySpec {
            center: [64.0, 64.0, 0.0],
            radius: 3.0,
        }),
        ..PhantomSpec::default_2d()
    };
    let generated = generate_case(&spec, "case_demo")?;
    print!("{}", manifest(&generated));
    println!("S0 sphericity {:.3}", sphericity(&generated.case.s0));

    let dir = tempfile::tempdir()?;
    write_case(&generated, dir.path())?;
    let back = read_case(dir.path())?;
    println!(
        "reloaded case equal: {}",
        back.s2 == generated.case.s2 && back.cavity == generated.case.cavity
    );
    println!(
        "forward region {} voxels, bidirectional region {} voxels",
        back.forward_roi().count(),
        back.bidirectional_roi().count()
    );
    Ok(())
}
