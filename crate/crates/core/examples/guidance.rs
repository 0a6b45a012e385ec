//! Classifier-free guidance: how far guided noise moves from the unconditional
//! prediction as the scale grows, and samples at a few scales.
//!
//! cargo run --release --example guidance -- [checkpoint]
//!
//! The linearity check holds for any weights; sample statistics only mean
//! something for a trained checkpoint (see the `train_tiny` example).

use anyhow::Result;
use motion_diffuse::denoiser::{Denoiser, DenoiserConfig, EpsModel};
use motion_diffuse::diffusion::DiffusionSchedule;
use motion_diffuse::params::normal;
use motion_diffuse::sampler::{guided_epsilon, sample, sample_conditional, SampleSpec};
use motion_diffuse::text::TextEncoder;
use motion_diffuse::trainer::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn norm(m: &ndarray::Array2<f64>) -> f64 {
    m.mapv(|x| x * x).sum().sqrt()
}

fn main() -> Result<()> {
    let trainer = std::env::args().nth(1).map(|p| Trainer::load(p.as_ref())).transpose()?;
    let fallback;
    let (net, params, schedule) = match &trainer {
        Some(t) => (&t.net, &t.ema, t.schedule.clone()),
        None => {
            let cfg = DenoiserConfig { d_model: 32, n_layers: 2, n_heads: 4, d_ff: 64, max_frames: 24, ..Default::default() };
            fallback = Denoiser::new(cfg, 0)?;
            (&fallback.0, &fallback.1, DiffusionSchedule::cosine(50, 0.008)?)
        }
    };
    let model = net.with_params(params);
    let text = net.text_encoder(params);
    let (ctx, null) = (text.encode("a person jumps in place"), text.encode(""));

    let x = normal(&mut ChaCha8Rng::seed_from_u64(1), 24.min(net.config().max_frames), net.config().d_motion, 1.0);
    let cond = model.predict(&x, schedule.len() / 2, x.nrows(), &ctx)?.eps;
    let uncond = model.predict(&x, schedule.len() / 2, x.nrows(), &null)?.eps;
    let gap = norm(&(&cond - &uncond));
    for s in [0.0, 1.0, 2.5, 8.0] {
        let g = guided_epsilon(&cond, &uncond, s);
        println!("s = {s:>4}: |ε̂ − ε(∅)| = {:.5}  (s·gap = {:.5})", norm(&(&g - &uncond)), s * gap);
    }

    let frames = 24.min(net.config().max_frames);
    let spec = SampleSpec { guidance_scale: 1.0, ..SampleSpec::new(frames, 7) };
    let a = sample(&model, &schedule, &ctx, &null, &spec)?;
    let b = sample_conditional(&model, &schedule, &ctx, &spec)?;
    println!("s = 1 guided equals conditional-only: {}", a.data == b.data);
    for s in [1.0, 4.0, 8.0] {
        let m = sample(&model, &schedule, &ctx, &null, &SampleSpec { guidance_scale: s, ..spec })?;
        println!("s = {s}: sample std {:.4}", m.data.std(0.0));
    }
    Ok(())
}
