//! Respaced sampling: DDPM and DDIM with fewer reverse steps than training steps.
//!
//! cargo run --release --example step_reduction -- [checkpoint]
//!
//! Without a checkpoint a randomly initialised model is used, which is enough
//! to see timing and the DDIM determinism property.

use std::time::Instant;

use anyhow::Result;
use motion_diffuse::denoiser::{Denoiser, DenoiserConfig};
use motion_diffuse::diffusion::DiffusionSchedule;
use motion_diffuse::sampler::{respace, sample, Method, SampleSpec, Sampler};
use motion_diffuse::text::TextEncoder;
use motion_diffuse::trainer::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let trainer = std::env::args().nth(1).map(|p| Trainer::load(p.as_ref())).transpose()?;
    let fallback;
    let (net, params, schedule) = match &trainer {
        Some(t) => (&t.net, &t.ema, t.schedule.clone()),
        None => {
            let cfg = DenoiserConfig { d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, max_frames: 40, ..Default::default() };
            fallback = Denoiser::new(cfg, 0)?;
            (&fallback.0, &fallback.1, DiffusionSchedule::cosine(100, 0.008)?)
        }
    };
    let model = net.with_params(params);
    let text = net.text_encoder(params);
    let (ctx, null) = (text.encode("a person squats down"), text.encode(""));
    let frames = 40.min(net.config().max_frames);

    let r = respace(&schedule, 25)?;
    println!("K = 25 visits {:?} … {:?}", &r.timesteps[..3], &r.timesteps[22..]);

    for method in [Method::Ddpm, Method::Ddim] {
        for k in [schedule.len(), 25, 10, 5] {
            let spec = SampleSpec { steps: Some(k), method, ..SampleSpec::new(frames, 0) };
            let clock = Instant::now();
            let m = sample(&model, &schedule, &ctx, &null, &spec)?;
            println!("{method:?} K = {k:>4}: {:>7.1} ms, mean {:+.4}", 1e3 * clock.elapsed().as_secs_f64(), m.data.mean().unwrap_or(0.0));
        }
    }

    // DDIM with η = 0 only depends on the starting noise.
    let spec = SampleSpec { steps: Some(10), method: Method::Ddim, ddim_eta: 0.0, ..SampleSpec::new(frames, 0) };
    let sampler = Sampler::new(&model, &schedule, spec)?;
    let x_t = sampler.initial_noise(&mut ChaCha8Rng::seed_from_u64(3));
    let a = sampler.denoise(x_t.clone(), &ctx, Some(&null), &mut ChaCha8Rng::seed_from_u64(10))?;
    let b = sampler.denoise(x_t, &ctx, Some(&null), &mut ChaCha8Rng::seed_from_u64(20))?;
    println!("DDIM η = 0 ignores the step RNG: {}", a == b);
    Ok(())
}
