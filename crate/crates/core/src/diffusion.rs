//! Noise schedule, forward process, reverse-process parameterisation and the
//! hybrid training objective.
//!
//! Step indices are 1-based throughout: `t ∈ 1..=T` names the transition from
//! `M_{t-1}` to `M_t`, and `ᾱ_0 := 1`. Arrays are stored 0-based internally, so
//! `alpha_bars[t - 1]` holds `ᾱ_t`.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_VLB_WEIGHT: f64 = 0.001;

/// Parameters that determine a schedule; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub cosine_offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            cosine_offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::cosine(self.steps, self.cosine_offset)
    }
}

/// Precomputed `β_t`, `α_t`, `ᾱ_t` and posterior variances `β̃_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    log_betas: Vec<f64>,
    /// `ln β̃_t`, with `t = 1` replaced by `ln β̃_2` (or `ln β_1` for a
    /// single-step schedule) so the learned variance never interpolates
    /// towards zero.
    log_posterior_vars_clipped: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cosine schedule: `ᾱ_t = f(t)/f(0)` with
    /// `f(t) = cos²(((t/T) + s)/(1 + s) · π/2)`, `β_t = 1 − ᾱ_t/ᾱ_{t−1}`
    /// clipped to [`MAX_BETA`].
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("diffusion steps must be >= 2, got {steps}")));
        }
        if !(offset > 0.0 && offset < 0.1) {
            return Err(Error::config(format!("cosine offset must be in (0, 0.1), got {offset}")));
        }
        let f = |t: f64| {
            let c = ((t / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2).cos();
            c * c
        };
        let f0 = f(0.0);
        let betas = (1..=steps)
            .map(|t| {
                let prev = f((t - 1) as f64) / f0;
                let cur = f(t as f64) / f0;
                (1.0 - cur / prev).min(MAX_BETA)
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self::assemble(betas, alphas, alpha_bars)
    }

    /// Builds a schedule whose cumulative products are exactly `alpha_bars`.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Self {
        let mut prev = 1.0;
        let betas: Vec<f64> = alpha_bars
            .iter()
            .map(|&ab| {
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        let alphas = betas.iter().map(|b| 1.0 - b).collect();
        Self::assemble(betas, alphas, alpha_bars)
    }

    fn assemble(betas: Vec<f64>, alphas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        let n = betas.len();
        let posterior_vars: Vec<f64> = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        let log_betas = betas.iter().map(|b| b.ln()).collect();
        let mut log_posterior_vars_clipped: Vec<f64> = posterior_vars.iter().map(|v| v.ln()).collect();
        if n > 0 {
            log_posterior_vars_clipped[0] = if n > 1 {
                posterior_vars[1].ln()
            } else {
                betas[0].ln()
            };
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
            log_betas,
            log_posterior_vars_clipped,
        }
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            Err(Error::StepIndex {
                index: t,
                max: self.len(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// Lower end of the learned-variance interpolation at step `t`.
    pub fn log_posterior_var_clipped(&self, t: usize) -> f64 {
        self.log_posterior_vars_clipped[t - 1]
    }

    /// `M_t = √ᾱ_t·M_0 + √(1−ᾱ_t)·ε`
    pub fn diffuse(&self, m0: &Mat, t: usize, noise: &Mat) -> Result<Mat> {
        let i = self.idx(t)?;
        same_shape("diffuse", m0, noise)?;
        let a = self.alpha_bars[i].sqrt();
        let b = (1.0 - self.alpha_bars[i]).sqrt();
        Ok(Zip::from(m0).and(noise).map_collect(|&x, &e| a * x + b * e))
    }

    /// One forward transition `M_t = √(1−β_t)·M_{t−1} + √β_t·ε`.
    pub fn forward_step(&self, prev: &Mat, t: usize, noise: &Mat) -> Result<Mat> {
        let i = self.idx(t)?;
        same_shape("forward_step", prev, noise)?;
        let a = self.alphas[i].sqrt();
        let b = self.betas[i].sqrt();
        Ok(Zip::from(prev).and(noise).map_collect(|&x, &e| a * x + b * e))
    }

    /// Tractable posterior `q(M_{t−1} | M_t, M_0)`.
    pub fn posterior(&self, m_t: &Mat, m0: &Mat, t: usize) -> Result<PosteriorGaussian> {
        let i = self.idx(t)?;
        same_shape("posterior", m_t, m0)?;
        let (c0, ct) = self.posterior_coefficients(t);
        let mean = Zip::from(m0).and(m_t).map_collect(|&x0, &xt| c0 * x0 + ct * xt);
        let log_variance = Mat::from_elem(m0.raw_dim(), self.posterior_vars[i].ln());
        Ok(PosteriorGaussian { mean, log_variance })
    }

    /// Coefficients `(c₀, c_t)` of `μ̃_t = c₀·M_0 + c_t·M_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    /// `μ_θ = (M_t − β_t/√(1−ᾱ_t)·ε_θ) / √α_t`
    pub fn mean_from_epsilon(&self, m_t: &Mat, eps: &Mat, t: usize) -> Result<Mat> {
        let i = self.idx(t)?;
        same_shape("mean_from_epsilon", m_t, eps)?;
        let inv_sqrt_alpha = 1.0 / self.alphas[i].sqrt();
        let k = self.betas[i] / (1.0 - self.alpha_bars[i]).sqrt();
        Ok(Zip::from(m_t)
            .and(eps)
            .map_collect(|&x, &e| inv_sqrt_alpha * (x - k * e)))
    }

    /// `x̂₀ = (M_t − √(1−ᾱ_t)·ε) / √ᾱ_t`
    pub fn predict_start(&self, m_t: &Mat, eps: &Mat, t: usize) -> Result<Mat> {
        let i = self.idx(t)?;
        same_shape("predict_start", m_t, eps)?;
        let a = self.alpha_bars[i].sqrt();
        let b = (1.0 - self.alpha_bars[i]).sqrt();
        Ok(Zip::from(m_t).and(eps).map_collect(|&x, &e| (x - b * e) / a))
    }

    /// Log-variance `frac·ln β_t + (1 − frac)·ln β̃_t` for an interpolation
    /// fraction already in `[0, 1]`.
    pub fn variance_from_v(&self, frac: &Mat, t: usize) -> Result<Mat> {
        let i = self.idx(t)?;
        let hi = self.log_betas[i];
        let lo = self.log_posterior_vars_clipped[i];
        Ok(frac.mapv(|f| f * hi + (1.0 - f) * lo))
    }

    /// Same as [`Self::variance_from_v`] for the raw network output, which is
    /// mapped to a fraction by `(v + 1)/2`.
    pub fn log_variance_from_raw(&self, raw_v: &Mat, t: usize) -> Result<Mat> {
        self.variance_from_v(&raw_v.mapv(|v| (v + 1.0) * 0.5), t)
    }

    /// Hybrid objective for one example. `valid_frames[f] == false` excludes
    /// frame `f` entirely; its content never reaches the result.
    pub fn loss_terms(
        &self,
        m0: &Mat,
        t: usize,
        noise: &Mat,
        output: &DenoiserOutput,
        lambda: f64,
        valid_frames: &[bool],
    ) -> Result<LossBreakdown> {
        if !(lambda >= 0.0) {
            return Err(Error::config(format!("vlb weight must be >= 0, got {lambda}")));
        }
        same_shape("loss_terms noise", m0, noise)?;
        same_shape("loss_terms eps", m0, &output.eps)?;
        same_shape("loss_terms v", m0, &output.v)?;
        if valid_frames.len() != m0.nrows() {
            return Err(Error::dim(format!(
                "valid mask has {} frames, motion has {}",
                valid_frames.len(),
                m0.nrows()
            )));
        }
        let rows: Vec<usize> = (0..m0.nrows()).filter(|&r| valid_frames[r]).collect();
        let pick = |m: &Mat| m.select(ndarray::Axis(0), &rows);
        let (m0, noise, eps, v) = (pick(m0), pick(noise), pick(&output.eps), pick(&output.v));
        let count = m0.len();
        if count == 0 {
            return Ok(LossBreakdown::new(0.0, 0.0, lambda));
        }

        let simple = Zip::from(&noise)
            .and(&eps)
            .fold(0.0, |acc, &n, &e| acc + (n - e) * (n - e))
            / count as f64;

        let m_t = self.diffuse(&m0, t, &noise)?;
        let mean = self.mean_from_epsilon(&m_t, &eps, t)?;
        let log_var = self.log_variance_from_raw(&v, t)?;
        let vlb_sum = if t == 1 {
            Zip::from(&m0)
                .and(&mean)
                .and(&log_var)
                .fold(0.0, |acc, &x, &mu, &lv| acc + gaussian_nll(x, mu, lv))
        } else {
            let post = self.posterior(&m_t, &m0, t)?;
            let log_post = self.posterior_vars[t - 1].ln();
            Zip::from(&post.mean)
                .and(&mean)
                .and(&log_var)
                .fold(0.0, |acc, &mq, &mp, &lv| acc + normal_kl(mq, log_post, mp, lv))
        };
        Ok(LossBreakdown::new(simple, vlb_sum / count as f64, lambda))
    }

    /// Graph form of [`Self::loss_terms`] for the first `valid_len` frames.
    ///
    /// Returns un-normalised sums so a batch can share one denominator. The
    /// variational term sees the predicted noise through a stop-gradient, so
    /// it only trains the variance head.
    pub fn loss_terms_graph(
        &self,
        g: &mut Graph,
        m0: &Mat,
        t: usize,
        noise: &Mat,
        eps: Var,
        v: Var,
        valid_len: usize,
    ) -> Result<GraphLoss> {
        self.idx(t)?;
        let m0 = m0.slice(ndarray::s![..valid_len, ..]).to_owned();
        let noise = noise.slice(ndarray::s![..valid_len, ..]).to_owned();
        let eps = g.slice_rows(eps, 0, valid_len);
        let v = g.slice_rows(v, 0, valid_len);

        let target = g.constant(noise.clone());
        let diff = g.sub(eps, target);
        let sq = g.mul(diff, diff);
        let simple_sum = g.sum(sq);

        let m_t = self.diffuse(&m0, t, &noise)?;
        let eps_value = g.value(eps).clone();
        let mean = self.mean_from_epsilon(&m_t, &eps_value, t)?;

        // log σ² = frac·ln β + (1−frac)·ln β̃ with frac = (v+1)/2
        let hi = self.log_betas[t - 1];
        let lo = self.log_posterior_vars_clipped[t - 1];
        let half_span = 0.5 * (hi - lo);
        let scaled = g.scale(v, half_span);
        let log_var = g.add_scalar(scaled, half_span + lo);
        let neg = g.scale(log_var, -1.0);
        let inv_var = g.exp(neg);

        let count = m0.len();
        let vlb_sum = if t == 1 {
            // 0.5·(ln 2π + log σ² + (M_0 − μ)²/σ²)
            let sq_err = Zip::from(&m0).and(&mean).map_collect(|&x, &mu| (x - mu) * (x - mu));
            let quad = g.mul_const(inv_var, sq_err);
            let body = g.add(log_var, quad);
            let body = g.add_scalar(body, (2.0 * PI).ln());
            let body = g.scale(body, 0.5);
            g.sum(body)
        } else {
            // 0.5·(−1 + log σ² − ln β̃ + (β̃ + (μ̃ − μ)²)/σ²)
            let post = self.posterior(&m_t, &m0, t)?;
            let post_var = self.posterior_vars[t - 1];
            let numer = Zip::from(&post.mean)
                .and(&mean)
                .map_collect(|&mq, &mp| post_var + (mq - mp) * (mq - mp));
            let quad = g.mul_const(inv_var, numer);
            let body = g.add(log_var, quad);
            let body = g.add_scalar(body, -1.0 - post_var.ln());
            let body = g.scale(body, 0.5);
            g.sum(body)
        };
        Ok(GraphLoss {
            simple_sum,
            vlb_sum,
            count,
        })
    }
}

fn same_shape(what: &str, a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::dim(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())))
    }
}

/// `KL(N(μ₁, e^{l₁}) ‖ N(μ₂, e^{l₂}))` for scalars.
pub fn normal_kl(mean1: f64, log_var1: f64, mean2: f64, log_var2: f64) -> f64 {
    0.5 * (-1.0 + log_var2 - log_var1
        + (log_var1 - log_var2).exp()
        + (mean1 - mean2) * (mean1 - mean2) * (-log_var2).exp())
}

/// Negative log-density of `x` under `N(μ, e^{l})`.
pub fn gaussian_nll(x: f64, mean: f64, log_var: f64) -> f64 {
    0.5 * ((2.0 * PI).ln() + log_var + (x - mean) * (x - mean) * (-log_var).exp())
}

/// Diagonal Gaussian over a motion tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mean: Mat,
    /// `ln β̃_t` broadcast to the motion shape; `-inf` at `t = 1`.
    pub log_variance: Mat,
}

impl PosteriorGaussian {
    pub fn variance(&self) -> Mat {
        self.log_variance.mapv(f64::exp)
    }
}

/// Per-frame network prediction: noise `eps` and raw variance coefficient `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps: Mat,
    pub v: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub simple: f64,
    pub vlb: f64,
    pub hybrid: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(simple: f64, vlb: f64, lambda: f64) -> Self {
        Self {
            simple,
            vlb,
            hybrid: simple + lambda * vlb,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.simple.is_finite() && self.vlb.is_finite() && self.hybrid.is_finite()
    }
}

/// Un-normalised loss sums from [`DiffusionSchedule::loss_terms_graph`].
#[derive(Debug, Clone, Copy)]
pub struct GraphLoss {
    pub simple_sum: Var,
    pub vlb_sum: Var,
    /// Number of valid elements summed over.
    pub count: usize,
}
