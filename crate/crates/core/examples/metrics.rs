//! Evaluation metrics on hand-built inputs: APE/AVE, Fréchet distance,
//! R-precision, multimodality and the contrastive loss.
//!
//! cargo run --release --example metrics

use anyhow::Result;
use motion_diffuse::dataset::{generate, DatasetSpec};
use motion_diffuse::extractor::info_nce;
use motion_diffuse::metrics::{ape, ave, frechet_distance, multimodality, positions_array, r_precision};
use motion_diffuse::motion::Skeleton;
use motion_diffuse::params::normal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = generate(&DatasetSpec { samples_per_class: 1, min_frames: 40, max_frames: 40, ..Default::default() })?;
    let skel = Skeleton::default();
    let walk = positions_array(&skel.positions(&data[0].motion)?);
    let raise = positions_array(&skel.positions(&data[1].motion)?);
    println!("{} vs {}", data[0].text, data[1].text);
    println!("APE {:?}", ape(&walk.view(), &raise.view())?);
    println!("AVE {:?}", ave(&walk.view(), &raise.view())?);

    let a = normal(&mut rng, 5000, 4, 1.0);
    let mut b = normal(&mut rng, 5000, 4, 1.0);
    b.column_mut(0).mapv_inplace(|x| x + 2.0);
    println!("FD(a, a) = {:.2e}, FD(a, b) = {:.4} (≈ 4)", frechet_distance(&a, &a)?, frechet_distance(&a, &b)?);

    // Random features: top-1 retrieval among 32 candidates lands near 1/32.
    let motions = normal(&mut rng, 2000, 8, 1.0);
    let pool = normal(&mut rng, 2000, 8, 1.0);
    let labels: Vec<String> = (0..2000).map(|i| i.to_string()).collect();
    let gt: Vec<usize> = (0..2000).collect();
    let chance = r_precision(&motions, &gt, &pool, &labels, 31, &mut rng)?;
    println!("chance R-precision {chance:?} (1/32 = {:.4})", 1.0 / 32.0);
    let aligned = r_precision(&pool, &gt, &pool, &labels, 31, &mut rng)?;
    println!("perfect R-precision {aligned:?}");

    let first = vec![normal(&mut rng, 10, 8, 1.0)];
    let second = vec![normal(&mut rng, 10, 8, 1.0)];
    println!("multimodality {:.4}", multimodality(&first, &second)?);

    let diag = ndarray::Array2::from_shape_fn((8, 8), |(i, j)| if i == j { 10.0 } else { 0.0 });
    println!("InfoNCE: aligned {:.4}, uniform {:.4} (ln 8 = {:.4})", info_nce(&diag), info_nce(&ndarray::Array2::zeros((8, 8))), 8f64.ln());
    Ok(())
}
