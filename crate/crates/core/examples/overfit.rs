//! Overfits a small denoiser on the synthetic set and scores prompt retrieval.
//!
//! cargo run --release --example overfit -- [train_steps] [samples_per_prompt] [checkpoint] [ddpm|ddim]
//!
//! An existing checkpoint is loaded instead of training; otherwise the trained
//! model is written there.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use motion_diffuse::dataset::{generate, training_clips, DatasetSpec};
use motion_diffuse::denoiser::DenoiserConfig;
use motion_diffuse::diffusion::ScheduleConfig;
use motion_diffuse::evaluate::{clip_scores, TextPool};
use motion_diffuse::extractor::{train_feature_extractor, ExtractorConfig, ExtractorTrainConfig};
use motion_diffuse::metrics::r_precision;
use motion_diffuse::sampler::{sample_many, Method, SampleSpec};
use motion_diffuse::text::TextEncoder;
use motion_diffuse::trainer::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 40;

fn main() -> Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map(|a| a.parse()).transpose()?.unwrap_or(600);
    let per_prompt: usize = args.get(1).map(|a| a.parse()).transpose()?.unwrap_or(2);
    let ckpt = args.get(2).map(PathBuf::from);

    let spec = DatasetSpec {
        samples_per_class: 16,
        min_frames: FRAMES,
        max_frames: FRAMES,
        ..DatasetSpec::default()
    };
    let data = training_clips(&generate(&spec)?, FRAMES, FRAMES)?;
    println!("{} clips", data.len());

    let clock = Instant::now();
    let extractor = train_feature_extractor(
        &data,
        ExtractorConfig { max_frames: FRAMES, ..Default::default() },
        &ExtractorTrainConfig {
            steps: 300,
            batch_size: 8,
            ..Default::default()
        },
        |step, loss| {
            if step % 50 == 0 {
                println!("extractor step {step}: loss {loss:.4}");
            }
        },
    )?;
    println!("extractor trained in {:.1}s", clock.elapsed().as_secs_f64());
    {
        let pool = TextPool::new(&data);
        let pool_feats = extractor.encode_texts(pool.texts.iter().map(String::as_str))?;
        let feats = extractor.encode_motions(data.iter().map(|s| &s.motion))?;
        let (m, mm) = clip_scores(&feats, &pool, &pool_feats);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = r_precision(&feats, &pool.index, &pool_feats, &pool.labels, 31, &mut rng)?;
        println!("real data: mclip {m:.4} mismatched {mm:.4} r-precision {r:?}");
    }

    let model = DenoiserConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        dropout: 0.0,
        max_frames: FRAMES,
        ..DenoiserConfig::default()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        total_steps: steps,
        batch_size: 16,
        ema_decay: 0.99,
        ema_interval: 10,
        ..TrainConfig::default()
    };
    let trainer = match &ckpt {
        Some(path) if path.exists() => Trainer::load(path)?,
        _ => {
            let mut trainer = Trainer::new(model, ScheduleConfig { steps: 100, ..Default::default() }, cfg)?;
            let clock = Instant::now();
            trainer.fit(&data, |l| {
                if l.step % 250 == 0 {
                    println!("step {:>5} simple {:.4} vlb {:.4} |g| {:.3} ({:.0}s)", l.step, l.simple, l.vlb, l.grad_norm, clock.elapsed().as_secs_f64());
                }
            })?;
            if let Some(path) = &ckpt {
                trainer.save(path)?;
            }
            trainer
        }
    };

    let net = trainer.ema_model();
    let encoder = trainer.net.text_encoder(&trainer.ema);
    let null = encoder.encode("");
    let pool = TextPool::new(&data);
    let pool_feats = extractor.encode_texts(pool.texts.iter().map(String::as_str))?;
    let method = match args.get(3).map(String::as_str) {
        Some("ddim") => Method::Ddim,
        _ => Method::Ddpm,
    };
    let guidance = 8.0;
    for k in [100usize, 50, 25, 10, 5] {
        let clock = Instant::now();
        let mut gt = Vec::new();
        let jobs: Vec<_> = (0..pool.texts.len())
            .flat_map(|c| (0..per_prompt).map(move |r| (c, r)))
            .map(|(c, r)| {
                gt.push(c);
                let spec = SampleSpec { steps: Some(k), method, guidance_scale: guidance, ..SampleSpec::new(FRAMES, (c * 100 + r) as u64) };
                (encoder.encode(&pool.texts[c]), spec)
            })
            .collect();
        let motions = sample_many(&net, &trainer.schedule, &jobs, &null, 1).into_iter().collect::<Result<Vec<_>, _>>()?;
        let feats = extractor.encode_motions(&motions)?;
        let sub = TextPool { texts: pool.texts.clone(), labels: pool.labels.clone(), index: gt.clone() };
        let (m, mm) = clip_scores(&feats, &sub, &pool_feats);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = r_precision(&feats, &gt, &pool_feats, &pool.labels, 31, &mut rng);
        println!("K={k:>3}: mclip {m:.4} mismatched {mm:.4} r-precision {r:?} ({:.1}s)", clock.elapsed().as_secs_f64());
    }
    Ok(())
}
