//! Writes typed volumes to `.grv` files and reads them back.
//!
//! cargo run --example grv_io

use gliorank::fields::{InvasionMap, Segmentation, Shape};
use gliorank::grv::{self, Payload, Volume};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let shape = Shape::new([4, 3, 1], 1.0)?;

    let times: Vec<f64> = (0..shape.len())
        .map(|i| if i % 5 == 4 { f64::INFINITY } else { i as f64 })
        .collect();
    let map = InvasionMap::new(shape, times)?;
    grv::write_invasion_map(&map, dir.path().join("T.grv"))?;
    let back = grv::read_invasion_map(dir.path().join("T.grv"))?;
    println!("invasion map round trip equal: {}", back.times() == map.times());

    let seg = Segmentation::from_indices(shape, [0, 1, 5]);
    grv::write_segmentation(&seg, dir.path().join("s.grv"))?;
    println!(
        "segmentation voxels after reload: {}",
        grv::read_segmentation(dir.path().join("s.grv"))?.count()
    );

    // raw volumes carry their element type in the header
    let raw = Volume::new(shape, Payload::F32(vec![0.25; shape.len()]))?;
    let bytes = raw.encode();
    let decoded = Volume::decode(&bytes)?;
    println!("{} bytes, dtype {:?}", bytes.len(), decoded.payload.dtype());
    Ok(())
}
