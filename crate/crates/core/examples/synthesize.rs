//! Generate the synthetic text–motion set, write it, reload it and cut training clips.
//!
//! cargo run --example synthesize -- [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use motion_diffuse::dataset::{generate_synthetic, load_dataset, training_clips, DatasetSpec, Family};
use motion_diffuse::motion::{PositionsFile, Skeleton};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("motion-synthetic"));
    let spec = DatasetSpec {
        samples_per_class: 4,
        ..DatasetSpec::default()
    };
    let samples = generate_synthetic(&spec, &out)?;
    println!("wrote {} motions to {}", samples.len(), out.display());
    for family in Family::ALL {
        println!("{:>10}: {}", family.name(), family.templates()[0]);
    }

    let loaded = load_dataset(&out)?;
    assert_eq!(loaded, samples);
    let clips = training_clips(&loaded, 64, 32)?;
    println!("{} clips of 64 frames (stride 32)", clips.len());

    let pos = PositionsFile::from_motion(&clips[0].motion, &Skeleton::default())?;
    let head = pos.frames.last().map(|f| f[15]).unwrap_or_default();
    println!("'{}': head at {:.3?} on the last frame", clips[0].text, head);
    Ok(())
}
