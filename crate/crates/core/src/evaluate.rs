//! End-to-end evaluation: sample one motion per reference, then score it.

use std::collections::BTreeMap;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::dataset::Sample;
use crate::denoiser::EpsModel;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::metrics::{
    ape_ave_mean, cosine, frechet_distance, mean_joint_variance, multimodality, positions_array, r_precision,
    MetricReport, Positions, DEFAULT_SL, R_PRECISION_NEGATIVES,
};
use crate::motion::{MotionSequence, Skeleton};
use crate::sampler::{sample_many, Method, SampleSpec, DEFAULT_GUIDANCE};
use crate::text::TextEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub guidance_scale: f64,
    pub steps: Option<usize>,
    pub method: Method,
    pub seed: u64,
    /// Samples per half-set for multimodality.
    pub sl: usize,
    /// Number of distinct prompts used for multimodality; 0 skips it.
    pub mm_texts: usize,
    pub negatives: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            guidance_scale: DEFAULT_GUIDANCE,
            steps: None,
            method: Method::Ddpm,
            seed: 0,
            sl: DEFAULT_SL,
            mm_texts: 8,
            negatives: R_PRECISION_NEGATIVES,
            threads: 1,
        }
    }
}

impl EvalConfig {
    fn spec(&self, length: usize, seed: u64) -> SampleSpec {
        SampleSpec {
            guidance_scale: self.guidance_scale,
            steps: self.steps,
            method: self.method,
            ..SampleSpec::new(length, seed)
        }
    }
}

/// Distinct prompts with their class, in first-seen order.
pub struct TextPool {
    pub texts: Vec<String>,
    pub labels: Vec<String>,
    /// Pool index of each sample's prompt.
    pub index: Vec<usize>,
}

impl TextPool {
    pub fn new(data: &[Sample]) -> Self {
        let mut seen = BTreeMap::new();
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        let index = data
            .iter()
            .map(|s| {
                *seen.entry(s.text.clone()).or_insert_with(|| {
                    texts.push(s.text.clone());
                    labels.push(s.label.clone().unwrap_or_else(|| s.text.clone()));
                    texts.len() - 1
                })
            })
            .collect();
        Self { texts, labels, index }
    }
}

fn positions(skel: &Skeleton, m: &MotionSequence) -> Result<Positions> {
    Ok(positions_array(&skel.positions(m)?))
}

fn collect(results: Vec<Result<MotionSequence>>) -> Result<Vec<MotionSequence>> {
    results.into_iter().collect()
}

/// Samples one motion per item of `data` and computes the full report.
pub fn evaluate<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    encoder: &dyn TextEncoder,
    extractor: &FeatureExtractor,
    data: &[Sample],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if data.len() < 2 {
        return Err(Error::config("evaluation needs at least 2 reference motions"));
    }
    let null = encoder.encode("");
    let lengths: Vec<usize> = data.iter().map(|s| s.motion.valid_len.min(model.max_frames())).collect();
    let jobs: Vec<_> = data
        .iter()
        .zip(&lengths)
        .enumerate()
        .map(|(i, (s, &len))| (encoder.encode(&s.text), cfg.spec(len, cfg.seed.wrapping_add(i as u64))))
        .collect();
    let generated = collect(sample_many(model, schedule, &jobs, &null, cfg.threads))?;

    let skel = Skeleton::default();
    let pairs = generated
        .iter()
        .zip(data)
        .zip(&lengths)
        .map(|((g, r), &len)| {
            let r = positions(&skel, &r.motion)?.slice(s![..len, .., ..]).to_owned();
            Ok((positions(&skel, g)?, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let (ape, ave) = ape_ave_mean(&pairs)?;
    let joint_variance =
        pairs.iter().map(|(g, _)| mean_joint_variance(&g.view())).sum::<Result<f64>>()? / pairs.len() as f64;

    let gen_feats = extractor.encode_motions(&generated)?;
    let real_feats = extractor.encode_motions(data.iter().map(|s| &s.motion))?;
    let fd = frechet_distance(&real_feats, &gen_feats)?;

    let pool = TextPool::new(data);
    let pool_feats = extractor.encode_texts(pool.texts.iter().map(String::as_str))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r_prec = r_precision(&gen_feats, &pool.index, &pool_feats, &pool.labels, cfg.negatives, &mut rng)?;
    let (mclip, mclip_mismatched) = clip_scores(&gen_feats, &pool, &pool_feats);

    let mm = if cfg.mm_texts > 0 {
        mm_score(model, schedule, encoder, extractor, data, &pool, cfg, &null)?
    } else {
        0.0
    };

    Ok(MetricReport {
        ape,
        ave,
        mclip,
        mclip_mismatched,
        fd,
        r_precision: r_prec,
        multimodality: mm,
        joint_variance,
        mid: None,
        samples: data.len(),
    })
}

/// Mean cosine to the prompt, and mean cosine to prompts of other classes.
pub fn clip_scores(motion_feats: &Mat, pool: &TextPool, pool_feats: &Mat) -> (f64, f64) {
    let n = motion_feats.nrows();
    let mut matched = 0.0;
    let mut mismatched = 0.0;
    let mut mismatched_n = 0usize;
    for (i, &gt) in pool.index.iter().enumerate().take(n) {
        let m = motion_feats.row(i);
        matched += cosine(m, pool_feats.row(gt));
        for j in (0..pool.texts.len()).filter(|&j| pool.labels[j] != pool.labels[gt]) {
            mismatched += cosine(m, pool_feats.row(j));
            mismatched_n += 1;
        }
    }
    (matched / n.max(1) as f64, mismatched / mismatched_n.max(1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn mm_score<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    encoder: &dyn TextEncoder,
    extractor: &FeatureExtractor,
    data: &[Sample],
    pool: &TextPool,
    cfg: &EvalConfig,
    null: &crate::text::TextContext,
) -> Result<f64> {
    if cfg.sl == 0 {
        return Err(Error::config("multimodality needs sl > 0"));
    }
    let prompts = pool.texts.len().min(cfg.mm_texts);
    let mut first = Vec::with_capacity(prompts);
    let mut second = Vec::with_capacity(prompts);
    for c in 0..prompts {
        let item = pool.index.iter().position(|&p| p == c).expect("every pool entry has a sample");
        let len = data[item].motion.valid_len.min(model.max_frames());
        let ctx = encoder.encode(&pool.texts[c]);
        let base = cfg.seed.wrapping_add(1_000_000).wrapping_add((c * 2 * cfg.sl) as u64);
        let jobs: Vec<_> = (0..2 * cfg.sl)
            .map(|k| (ctx.clone(), cfg.spec(len, base.wrapping_add(k as u64))))
            .collect();
        let motions = collect(sample_many(model, schedule, &jobs, null, cfg.threads))?;
        let feats = extractor.encode_motions(&motions)?;
        first.push(feats.slice(s![..cfg.sl, ..]).to_owned());
        second.push(feats.slice(s![cfg.sl.., ..]).to_owned());
    }
    multimodality(&first, &second)
}
