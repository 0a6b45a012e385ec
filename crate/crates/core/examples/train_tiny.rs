//! Train a small denoiser for a few hundred steps, checkpoint it and resume.
//!
//! cargo run --release --example train_tiny -- [steps]

use anyhow::Result;
use motion_diffuse::dataset::{generate, training_clips, DatasetSpec};
use motion_diffuse::denoiser::DenoiserConfig;
use motion_diffuse::diffusion::ScheduleConfig;
use motion_diffuse::trainer::{TrainConfig, Trainer};

fn main() -> Result<()> {
    env_logger::init();
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let data = training_clips(
        &generate(&DatasetSpec {
            samples_per_class: 4,
            min_frames: 32,
            max_frames: 48,
            ..Default::default()
        })?,
        32,
        16,
    )?;
    let model = DenoiserConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_frames: 32,
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        total_steps: steps / 2,
        batch_size: 8,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, ScheduleConfig { steps: 100, ..Default::default() }, cfg)?;
    trainer.fit(&data, |l| {
        if l.step % 25 == 0 {
            println!("step {:>4}  simple {:.4}  vlb {:+.4}  hybrid {:.4}", l.step, l.simple, l.vlb, l.hybrid);
        }
    })?;

    let path = std::env::temp_dir().join("train_tiny.ckpt");
    trainer.save(&path)?;
    let mut resumed = Trainer::load(&path)?;
    println!("checkpoint at step {} ({} parameters)", resumed.step, resumed.params.num_elements());
    resumed.cfg.total_steps = steps;
    resumed.fit(&data, |l| {
        if l.step % 25 == 0 {
            println!("step {:>4}  simple {:.4}  vlb {:+.4}  hybrid {:.4}", l.step, l.simple, l.vlb, l.hybrid);
        }
    })?;
    resumed.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
