//! Denoiser training loop, weight averaging and checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"MDCKPT\0\0" | u32 version | u64 header length | JSON header
//! | f64 params | f64 ema | f64 adam m | f64 adam v | sha256 of everything before
//! ```
//!
//! Tensors appear in the order listed in the header, row-major.

use std::fs;
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mat};
use crate::dataset::{make_batch, Batch, Sample};
use crate::denoiser::{BoundDenoiser, Denoiser, DenoiserConfig};
use crate::diffusion::{DiffusionSchedule, LossBreakdown, ScheduleConfig, DEFAULT_VLB_WEIGHT};
use crate::error::{Error, Result};
use crate::nn::Dropout;
use crate::optim::{clip_grad_norm, ema_update, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::text::TextEncoder;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the variational term in the hybrid loss.
    pub lambda: f64,
    pub ema_decay: f64,
    pub ema_interval: u64,
    pub null_text_prob: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_text: bool,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lambda: DEFAULT_VLB_WEIGHT,
            ema_decay: 0.99,
            ema_interval: 10,
            null_text_prob: 0.25,
            total_steps: 1000,
            batch_size: 32,
            seed: 0,
            freeze_text: false,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("null_text_prob", self.null_text_prob)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if self.ema_interval == 0 || self.batch_size == 0 {
            return Err(Error::config("ema_interval and batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.lambda >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::config("lr, weight_decay, lambda and grad_clip must be >= 0"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub simple: f64,
    pub vlb: f64,
    pub hybrid: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model, averaged copy and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Denoiser,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    pub cfg: TrainConfig,
    pub schedule_cfg: ScheduleConfig,
    pub schedule: DiffusionSchedule,
}

impl Trainer {
    pub fn new(model: DenoiserConfig, schedule_cfg: ScheduleConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = schedule_cfg.build()?;
        let (net, mut params) = Denoiser::new(model, cfg.seed)?;
        if cfg.freeze_text {
            params.set_frozen(net.text_table(), true);
        }
        let opt = AdamW::new(&params, cfg.adamw());
        Ok(Self {
            net,
            ema: params.clone(),
            params,
            opt,
            step: 0,
            cfg,
            schedule_cfg,
            schedule,
        })
    }

    /// Averaged weights bound to the network, for sampling.
    pub fn ema_model(&self) -> BoundDenoiser<'_> {
        self.net.with_params(&self.ema)
    }

    pub fn model(&self) -> BoundDenoiser<'_> {
        self.net.with_params(&self.params)
    }

    /// Independent RNG for `purpose` at the current step; resuming from a
    /// checkpoint reproduces it exactly.
    fn step_rng(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step * 4 + purpose);
        rng
    }

    /// Draws a batch for the current step.
    pub fn draw_batch(&self, data: &[Sample]) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut rng = self.step_rng(0);
        let items: Vec<&Sample> = (0..self.cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        make_batch(&items, self.schedule.len(), self.cfg.null_text_prob, &mut rng)
    }

    /// Forward, hybrid loss, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<(LossBreakdown, f64)> {
        let encoder = self.net.text_encoder(&self.params);
        let mut dropout_rng = self.step_rng(1);
        let mut dropout = Dropout {
            rate: self.net.config().dropout,
            rng: Some(&mut dropout_rng),
        };
        let mut g = Graph::new();
        let mut simple_terms = Vec::new();
        let mut vlb_terms = Vec::new();
        let mut count = 0;
        for item in &batch.items {
            let ctx = encoder.encode(&item.text);
            let m_t = self.schedule.diffuse(&item.motion, item.t, &item.noise)?;
            let (eps, v) = self
                .net
                .forward_graph(&mut g, &self.params, &m_t, item.t, item.valid_len, &ctx, &mut dropout)?;
            let l = self
                .schedule
                .loss_terms_graph(&mut g, &item.motion, item.t, &item.noise, eps, v, item.valid_len)?;
            simple_terms.push(l.simple_sum);
            vlb_terms.push(l.vlb_sum);
            count += l.count;
        }
        let n = count.max(1) as f64;
        let simple = sum_all(&mut g, &simple_terms);
        let vlb = sum_all(&mut g, &vlb_terms);
        let simple = g.scale(simple, 1.0 / n);
        let vlb = g.scale(vlb, 1.0 / n);
        let weighted = g.scale(vlb, self.cfg.lambda);
        let loss = g.add(simple, weighted);
        let breakdown = LossBreakdown::new(g.scalar(simple), g.scalar(vlb), self.cfg.lambda);
        if !breakdown.is_finite() {
            let ts: Vec<usize> = batch.items.iter().map(|i| i.t).collect();
            return Err(Error::Numeric(format!(
                "training step {}: non-finite loss (simple {}, vlb {}) at t = {ts:?}",
                self.step, breakdown.simple, breakdown.vlb
            )));
        }
        let mut grads = g.backward(loss);
        let norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.opt.step(&mut self.params, &grads);
        self.step += 1;
        if self.step % self.cfg.ema_interval == 0 {
            ema_update(&mut self.ema, &self.params, self.cfg.ema_decay);
        }
        Ok((breakdown, norm))
    }

    /// Trains until `cfg.total_steps`, reporting every step to `log`.
    pub fn fit(&mut self, data: &[Sample], mut log: impl FnMut(&StepLog)) -> Result<()> {
        while self.step < self.cfg.total_steps {
            let batch = self.draw_batch(data)?;
            let (l, grad_norm) = self.train_step(&batch)?;
            let entry = StepLog {
                step: self.step,
                simple: l.simple,
                vlb: l.vlb,
                hybrid: l.hybrid,
                lr: self.cfg.lr,
                grad_norm,
            };
            debug!("{entry:?}");
            log(&entry);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            denoiser: self.net.config().clone(),
            schedule: self.schedule_cfg,
            train: self.cfg.clone(),
            step: self.step,
            adam_t: self.opt.t,
            tensors: self
                .params
                .iter()
                .map(|(_, e)| TensorInfo {
                    name: e.name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let sections: [Vec<&Mat>; 4] = [
            self.params.iter().map(|(_, e)| &e.value).collect(),
            self.ema.iter().map(|(_, e)| &e.value).collect(),
            self.opt.m.iter().collect(),
            self.opt.v.iter().collect(),
        ];
        for section in sections {
            for m in section {
                for x in m.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a checkpoint completely before building anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Data(format!("corrupted checkpoint: {msg}"));
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[20..hend]).map_err(|e| Error::Incompatible(e.to_string()))?;

        let mut trainer = Trainer::new(header.denoiser.clone(), header.schedule, header.train.clone())?;
        let layout_ok = trainer.params.len() == header.tensors.len()
            && trainer
                .params
                .iter()
                .zip(&header.tensors)
                .all(|((_, e), t)| e.name == t.name && [e.value.nrows(), e.value.ncols()] == t.shape);
        if !layout_ok {
            return Err(Error::Incompatible("parameter layout does not match this build".into()));
        }
        let per_section: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        let data = &body[hend..];
        if data.len() != 4 * per_section * 8 {
            return Err(corrupt("tensor data has the wrong length"));
        }
        let mut values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read = |shape: [usize; 2]| -> Mat {
            Mat::from_shape_simple_fn((shape[0], shape[1]), || values.next().expect("length checked"))
        };
        let params: Vec<Mat> = header.tensors.iter().map(|t| read(t.shape)).collect();
        let ema: Vec<Mat> = header.tensors.iter().map(|t| read(t.shape)).collect();
        let m: Vec<Mat> = header.tensors.iter().map(|t| read(t.shape)).collect();
        let v: Vec<Mat> = header.tensors.iter().map(|t| read(t.shape)).collect();

        for ((id, p), e) in trainer.params.ids().collect::<Vec<_>>().into_iter().zip(params).zip(ema) {
            *trainer.params.get_mut(id) = p;
            *trainer.ema.get_mut(id) = e;
        }
        trainer.opt.m = m;
        trainer.opt.v = v;
        trainer.opt.t = header.adam_t;
        trainer.step = header.step;
        Ok(trainer)
    }
}

fn sum_all(g: &mut Graph, terms: &[crate::autograd::Var]) -> crate::autograd::Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    step: u64,
    adam_t: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DatasetSpec, Family};
    use crate::motion::MOTION_DIMS;

    pub(crate) fn tiny_model() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            dropout: 0.1,
            d_motion: MOTION_DIMS,
            max_frames: 32,
            max_ctx_tokens: 8,
            d_text: None,
            vocab: 64,
            input_skip: true,
        }
    }

    fn data() -> Vec<Sample> {
        let spec = DatasetSpec {
            classes: vec![Family::Walk, Family::Squat],
            samples_per_class: 2,
            min_frames: 10,
            max_frames: 14,
            ..Default::default()
        };
        generate(&spec).unwrap()
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        Trainer::new(tiny_model(), ScheduleConfig { steps: 20, ..Default::default() }, cfg).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut tr = trainer(TrainConfig { lr: 0.0, batch_size: 2, ema_interval: 1, ..Default::default() });
        let before = tr.params.clone();
        let d = data();
        let b = tr.draw_batch(&d).unwrap();
        tr.train_step(&b).unwrap();
        assert_eq!(tr.params, before);
        for ((_, e), (_, p)) in tr.ema.iter().zip(before.iter()) {
            for (a, b) in e.value.iter().zip(p.value.iter()) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ema_with_zero_decay_copies() {
        let mut tr = trainer(TrainConfig { lr: 1e-2, batch_size: 2, ema_interval: 1, ema_decay: 0.0, ..Default::default() });
        let d = data();
        let b = tr.draw_batch(&d).unwrap();
        tr.train_step(&b).unwrap();
        assert_eq!(tr.ema, tr.params);
    }

    #[test]
    fn frozen_text_table_is_unchanged() {
        let mut tr = trainer(TrainConfig { lr: 1e-2, batch_size: 2, null_text_prob: 0.0, freeze_text: true, total_steps: 3, ..Default::default() });
        let id = tr.net.text_table();
        let before = tr.params.get(id).clone();
        tr.fit(&data(), |_| {}).unwrap();
        assert_eq!(tr.params.get(id), &before);
        let mut unfrozen = trainer(TrainConfig { lr: 1e-2, batch_size: 2, null_text_prob: 0.0, total_steps: 3, ..Default::default() });
        unfrozen.fit(&data(), |_| {}).unwrap();
        assert_ne!(unfrozen.params.get(id), &before);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = TrainConfig { lr: 1e-3, batch_size: 2, ema_interval: 2, total_steps: 6, ..Default::default() };
        let d = data();
        let mut full = trainer(cfg.clone());
        let mut full_log = Vec::new();
        full.fit(&d, |l| full_log.push(*l)).unwrap();

        let mut part = trainer(TrainConfig { total_steps: 3, ..cfg.clone() });
        let mut log = Vec::new();
        part.fit(&d, |l| log.push(*l)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        part.save(&path).unwrap();
        let mut resumed = Trainer::load(&path).unwrap();
        assert_eq!(resumed.params, part.params);
        assert_eq!(resumed.ema, part.ema);
        assert_eq!(resumed.opt, part.opt);
        resumed.cfg.total_steps = 6;
        resumed.fit(&d, |l| log.push(*l)).unwrap();
        assert_eq!(log, full_log);
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn corrupted_and_incompatible_checkpoints_rejected() {
        let tr = trainer(TrainConfig::default());
        let bytes = tr.to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Trainer::from_bytes(&flipped), Err(Error::Data(_))));
        assert!(Trainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(Trainer::from_bytes(&versioned), Err(Error::Incompatible(_))));
        assert!(Trainer::from_bytes(&bytes).is_ok());
    }
}
