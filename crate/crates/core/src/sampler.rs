//! Reverse-process sampling: ancestral DDPM, DDIM, step respacing and
//! classifier-free guidance.

use std::thread;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::denoiser::EpsModel;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, DEFAULT_FPS};
use crate::text::TextContext;

pub const DEFAULT_GUIDANCE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            other => Err(Error::config(format!("unknown sampling method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub length: usize,
    pub guidance_scale: f64,
    /// Number of reverse steps; `None` runs every step of the schedule.
    pub steps: Option<usize>,
    pub method: Method,
    pub ddim_eta: f64,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(length: usize, seed: u64) -> Self {
        Self {
            length,
            guidance_scale: DEFAULT_GUIDANCE,
            steps: None,
            method: Method::Ddpm,
            ddim_eta: 0.0,
            seed,
        }
    }
}

/// `ε̂ = ε(∅) + s·(ε(c) − ε(∅))`, returning an exact copy of one input at `s ∈ {0, 1}`.
pub fn guided_epsilon(eps_cond: &Mat, eps_uncond: &Mat, s: f64) -> Mat {
    if s == 1.0 {
        eps_cond.clone()
    } else if s == 0.0 {
        eps_uncond.clone()
    } else {
        Zip::from(eps_cond)
            .and(eps_uncond)
            .map_collect(|&c, &u| u + s * (c - u))
    }
}

/// Subsequence of the base schedule and the schedule over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Respaced {
    /// Original step index for each respaced index `1..=K`.
    pub timesteps: Vec<usize>,
    pub schedule: DiffusionSchedule,
}

/// Evenly strided `K` of the `T` steps, always ending at `T`, with
/// `β'_i = 1 − ᾱ_{t_i}/ᾱ_{t_{i−1}}` so the selected marginals are unchanged.
pub fn respace(base: &DiffusionSchedule, k: usize) -> Result<Respaced> {
    let t = base.len();
    if k == 0 || k > t {
        return Err(Error::config(format!("sampling steps must be in 1..={t}, got {k}")));
    }
    if k == t {
        return Ok(Respaced {
            timesteps: (1..=t).collect(),
            schedule: base.clone(),
        });
    }
    let timesteps: Vec<usize> = (1..=k).map(|i| (i * t + k / 2) / k).collect();
    let alpha_bars = timesteps.iter().map(|&s| base.alpha_bar(s)).collect();
    Ok(Respaced {
        timesteps,
        schedule: DiffusionSchedule::from_alpha_bars(alpha_bars),
    })
}

/// One configured reverse chain over a model.
pub struct Sampler<'a, M: EpsModel + ?Sized> {
    model: &'a M,
    spec: SampleSpec,
    plan: Respaced,
}

impl<'a, M: EpsModel + ?Sized> Sampler<'a, M> {
    pub fn new(model: &'a M, base: &DiffusionSchedule, spec: SampleSpec) -> Result<Self> {
        if spec.length == 0 {
            return Err(Error::config("sample length must be positive"));
        }
        if spec.length > model.max_frames() {
            return Err(Error::Capacity(format!(
                "{} frames exceeds max_frames {}",
                spec.length,
                model.max_frames()
            )));
        }
        if !(spec.guidance_scale >= 0.0) {
            return Err(Error::config(format!(
                "guidance scale must be >= 0, got {}",
                spec.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&spec.ddim_eta) {
            return Err(Error::config(format!("ddim_eta must be in [0, 1], got {}", spec.ddim_eta)));
        }
        let plan = respace(base, spec.steps.unwrap_or(base.len()))?;
        Ok(Self { model, spec, plan })
    }

    pub fn spec(&self) -> &SampleSpec {
        &self.spec
    }

    /// Number of reverse steps `K`.
    pub fn len(&self) -> usize {
        self.plan.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.timesteps.is_empty()
    }

    /// Original step index of respaced index `i`; `0` for `i = 0`.
    pub fn timestep(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.plan.timesteps[i - 1]
        }
    }

    pub fn initial_noise(&self, rng: &mut ChaCha8Rng) -> Mat {
        gaussian(rng, self.spec.length, self.model.d_motion())
    }

    /// Noise prediction for respaced index `i`; `null = None` skips guidance.
    fn epsilon(&self, x: &Mat, i: usize, ctx: &TextContext, null: Option<&TextContext>) -> Result<(Mat, Mat)> {
        let t = self.timestep(i);
        let cond = self.model.predict(x, t, self.spec.length, ctx)?;
        let eps = match null {
            Some(null) => {
                let uncond = self.model.predict(x, t, self.spec.length, null)?;
                guided_epsilon(&cond.eps, &uncond.eps, self.spec.guidance_scale)
            }
            None => cond.eps,
        };
        Ok((eps, cond.v))
    }

    /// Maps `M_i` to `M_{i−1}`.
    pub fn step(
        &self,
        x: &Mat,
        i: usize,
        ctx: &TextContext,
        null: Option<&TextContext>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Mat> {
        let sched = &self.plan.schedule;
        let (eps, v) = self.epsilon(x, i, ctx, null)?;
        let next = match self.spec.method {
            Method::Ddpm => {
                let mean = sched.mean_from_epsilon(x, &eps, i)?;
                if i > 1 {
                    let log_var = sched.log_variance_from_raw(&v, i)?;
                    let z = gaussian(rng, x.nrows(), x.ncols());
                    Zip::from(&mean)
                        .and(&log_var)
                        .and(&z)
                        .map_collect(|&m, &lv, &z| m + (0.5 * lv).exp() * z)
                } else {
                    mean
                }
            }
            Method::Ddim => {
                let x0 = sched.predict_start(x, &eps, i)?;
                let ab = sched.alpha_bar(i);
                let ab_prev = sched.alpha_bar(i - 1);
                let sigma = self.spec.ddim_eta
                    * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
                    * (1.0 - ab / ab_prev).sqrt();
                let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                let a = ab_prev.sqrt();
                let mut out = Zip::from(&x0).and(&eps).map_collect(|&x0, &e| a * x0 + dir * e);
                if sigma > 0.0 && i > 1 {
                    let z = gaussian(rng, x.nrows(), x.ncols());
                    out.zip_mut_with(&z, |o, &z| *o += sigma * z);
                }
                out
            }
        };
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::NumericFailure {
                step: self.timestep(i),
                detail: format!("non-finite state after reverse step {i} of {}", self.len()),
            })
        }
    }

    /// Runs the whole chain from a given `M_T`.
    pub fn denoise(
        &self,
        x_t: Mat,
        ctx: &TextContext,
        null: Option<&TextContext>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Mat> {
        let mut x = x_t;
        for i in (1..=self.len()).rev() {
            x = self.step(&x, i, ctx, null, rng)?;
        }
        Ok(x)
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    use rand::Rng;
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Guided sample: two passes per step, conditional and `null`.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    base: &DiffusionSchedule,
    ctx: &TextContext,
    null: &TextContext,
    spec: &SampleSpec,
) -> Result<MotionSequence> {
    run(model, base, ctx, Some(null), spec)
}

/// Conditional-only sample: one pass per step, no guidance.
pub fn sample_conditional<M: EpsModel + ?Sized>(
    model: &M,
    base: &DiffusionSchedule,
    ctx: &TextContext,
    spec: &SampleSpec,
) -> Result<MotionSequence> {
    run(model, base, ctx, None, spec)
}

fn run<M: EpsModel + ?Sized>(
    model: &M,
    base: &DiffusionSchedule,
    ctx: &TextContext,
    null: Option<&TextContext>,
    spec: &SampleSpec,
) -> Result<MotionSequence> {
    let sampler = Sampler::new(model, base, *spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x_t = sampler.initial_noise(&mut rng);
    let data = sampler.denoise(x_t, ctx, null, &mut rng)?;
    Ok(MotionSequence::new(data, spec.length, DEFAULT_FPS).expect("valid length"))
}

/// Samples every `(ctx, spec)` job on up to `threads` worker threads.
/// Results come back in job order and do not depend on `threads`.
pub fn sample_many<M: EpsModel + ?Sized>(
    model: &M,
    base: &DiffusionSchedule,
    jobs: &[(TextContext, SampleSpec)],
    null: &TextContext,
    threads: usize,
) -> Vec<Result<MotionSequence>> {
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(|(c, s)| sample(model, base, c, null, s)).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(c, s)| sample(model, base, c, null, s))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sampling thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserOutput, DEFAULT_COSINE_OFFSET};
    use crate::params::normal;

    /// Predicts `ε = a·M_t + b·pooled[0]`, enough to exercise every code path.
    struct Linear {
        a: f64,
        b: f64,
        d: usize,
    }

    impl EpsModel for Linear {
        fn d_motion(&self) -> usize {
            self.d
        }

        fn max_frames(&self) -> usize {
            64
        }

        fn predict(&self, m_t: &Mat, t: usize, _length: usize, ctx: &TextContext) -> Result<DenoiserOutput> {
            let c = ctx.pooled[[0, 0]];
            Ok(DenoiserOutput {
                eps: m_t.mapv(|x| self.a * x + self.b * c + 1e-4 * t as f64),
                v: m_t.mapv(|x| (0.1 * x).tanh()),
            })
        }
    }

    fn ctx(v: f64) -> TextContext {
        TextContext {
            pooled: Mat::from_elem((1, 1), v),
            tokens: Mat::from_elem((1, 1), v),
            is_null: v == 0.0,
            ids: None,
        }
    }

    fn base() -> DiffusionSchedule {
        DiffusionSchedule::cosine(50, DEFAULT_COSINE_OFFSET).unwrap()
    }

    const MODEL: Linear = Linear { a: 0.3, b: 0.5, d: 4 };

    #[test]
    fn guidance_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = normal(&mut rng, 3, 2, 1.0);
        let u = normal(&mut rng, 3, 2, 1.0);
        assert_eq!(guided_epsilon(&c, &u, 1.0), c);
        assert_eq!(guided_epsilon(&c, &u, 0.0), u);
        assert_eq!(guided_epsilon(&c, &Mat::zeros((3, 2)), 8.0), c.mapv(|x| 8.0 * x));
        let s = 3.7;
        let g = guided_epsilon(&c, &u, s);
        let lhs = (&g - &u).mapv(|x| x * x).sum().sqrt();
        let rhs = s * (&c - &u).mapv(|x| x * x).sum().sqrt();
        assert!((lhs - rhs).abs() < 1e-12 * rhs);
    }

    #[test]
    fn respacing_preserves_marginals() {
        let b = DiffusionSchedule::cosine(1000, DEFAULT_COSINE_OFFSET).unwrap();
        let r = respace(&b, 25).unwrap();
        assert_eq!(r.timesteps.len(), 25);
        assert_eq!(*r.timesteps.last().unwrap(), 1000);
        assert!(r.timesteps.windows(2).all(|w| w[0] < w[1]));
        for (i, &t) in r.timesteps.iter().enumerate() {
            assert_eq!(r.schedule.alpha_bar(i + 1), b.alpha_bar(t));
        }
        let same = respace(&b, 1000).unwrap();
        assert_eq!(same.schedule, b);
        assert_eq!(same.timesteps, (1..=1000).collect::<Vec<_>>());
        assert!(matches!(respace(&b, 1001), Err(Error::Config(_))));
        assert!(respace(&b, 0).is_err());
        for k in [1, 3, 7, 333, 999] {
            let r = respace(&b, k).unwrap();
            assert_eq!(r.timesteps.len(), k);
            assert_eq!(*r.timesteps.last().unwrap(), 1000);
            assert!(r.timesteps.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn same_seed_same_output() {
        let spec = SampleSpec { guidance_scale: 2.5, ..SampleSpec::new(6, 11) };
        let a = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &spec).unwrap();
        let b = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &spec).unwrap();
        assert_eq!(a, b);
        let c = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &SampleSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_guidance_equals_conditional() {
        let spec = SampleSpec { guidance_scale: 1.0, ..SampleSpec::new(5, 3) };
        let guided = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &spec).unwrap();
        let plain = sample_conditional(&MODEL, &base(), &ctx(1.0), &spec).unwrap();
        assert_eq!(guided, plain);
    }

    #[test]
    fn full_respacing_is_bit_identical() {
        let spec = SampleSpec::new(5, 4);
        let a = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &spec).unwrap();
        let b = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &SampleSpec { steps: Some(50), ..spec }).unwrap();
        assert_eq!(a, b);
        let c = sample(&MODEL, &base(), &ctx(1.0), &ctx(0.0), &SampleSpec { steps: Some(10), ..spec }).unwrap();
        assert_eq!(c.data.dim(), a.data.dim());
    }

    #[test]
    fn ddim_deterministic_given_start() {
        let spec = SampleSpec { method: Method::Ddim, steps: Some(10), ..SampleSpec::new(5, 1) };
        let s = Sampler::new(&MODEL, &base(), spec).unwrap();
        let x_t = normal(&mut ChaCha8Rng::seed_from_u64(9), 5, 4, 1.0);
        let a = s.denoise(x_t.clone(), &ctx(1.0), Some(&ctx(0.0)), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = s.denoise(x_t, &ctx(1.0), Some(&ctx(0.0)), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_recovers_data_with_oracle_noise() {
        // with the exact noise for a fixed x0, every DDIM step stays on the
        // x0 trajectory and the chain returns x0
        struct Oracle {
            x0: Mat,
            ab: Vec<f64>,
        }
        impl EpsModel for Oracle {
            fn d_motion(&self) -> usize {
                self.x0.ncols()
            }
            fn max_frames(&self) -> usize {
                64
            }
            fn predict(&self, m_t: &Mat, t: usize, _: usize, _: &TextContext) -> Result<DenoiserOutput> {
                let ab = self.ab[t - 1];
                let eps = (m_t - &self.x0.mapv(|x| ab.sqrt() * x)).mapv(|x| x / (1.0 - ab).sqrt());
                Ok(DenoiserOutput { v: eps.mapv(|_| 0.0), eps })
            }
        }
        let b = base();
        let x0 = normal(&mut ChaCha8Rng::seed_from_u64(5), 3, 2, 1.0);
        let model = Oracle { x0: x0.clone(), ab: b.alpha_bars().to_vec() };
        let spec = SampleSpec { method: Method::Ddim, steps: Some(7), guidance_scale: 1.0, ..SampleSpec::new(3, 0) };
        let out = sample_conditional(&model, &b, &ctx(1.0), &spec).unwrap();
        for (a, e) in out.data.iter().zip(x0.iter()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn numeric_failure_reports_step() {
        struct Bad;
        impl EpsModel for Bad {
            fn d_motion(&self) -> usize {
                2
            }
            fn max_frames(&self) -> usize {
                8
            }
            fn predict(&self, m_t: &Mat, t: usize, _: usize, _: &TextContext) -> Result<DenoiserOutput> {
                let val = if t == 30 { f64::NAN } else { 0.0 };
                Ok(DenoiserOutput { eps: m_t.mapv(|_| val), v: m_t.mapv(|_| 0.0) })
            }
        }
        match sample_conditional(&Bad, &base(), &ctx(1.0), &SampleSpec::new(2, 0)) {
            Err(Error::NumericFailure { step, .. }) => assert_eq!(step, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        let b = base();
        assert!(matches!(Sampler::new(&MODEL, &b, SampleSpec::new(65, 0)), Err(Error::Capacity(_))));
        assert!(Sampler::new(&MODEL, &b, SampleSpec { steps: Some(51), ..SampleSpec::new(4, 0) }).is_err());
        assert!(Sampler::new(&MODEL, &b, SampleSpec { guidance_scale: -1.0, ..SampleSpec::new(4, 0) }).is_err());
        assert_eq!("DDIM".parse::<Method>().unwrap(), Method::Ddim);
    }

    #[test]
    fn parallel_jobs_match_serial() {
        let jobs: Vec<_> = (0..5).map(|i| (ctx(i as f64 * 0.2), SampleSpec::new(4, i))).collect();
        let serial = sample_many(&MODEL, &base(), &jobs, &ctx(0.0), 1);
        let parallel = sample_many(&MODEL, &base(), &jobs, &ctx(0.0), 3);
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.as_ref().unwrap(), b.as_ref().unwrap());
        }
    }
}
