//! Contrastive motion and text feature extractor used by the evaluation metrics.
//!
//! The motion side is a small transformer encoder with mean pooling over
//! valid frames; the text side averages hashed word embeddings and projects
//! them. Both outputs are unit-normalised and trained with a symmetric InfoNCE
//! loss over in-batch negatives.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use ndarray::{s, Array1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::motion::{write_file, MotionSequence, MOTION_DIMS};
use crate::nn::{sinusoidal_table, Attention, Dropout, FeedForward, LayerNorm, Linear};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::{normal, ParamStore};
use crate::text::{token_ids, DEFAULT_VOCAB};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_feat: usize,
    pub d_motion: usize,
    pub max_frames: usize,
    pub vocab: usize,
    pub temperature: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            d_feat: 64,
            d_motion: MOTION_DIMS,
            max_frames: 471,
            vocab: DEFAULT_VOCAB,
            temperature: 0.07,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_feat", self.d_feat),
            ("d_motion", self.d_motion),
            ("max_frames", self.max_frames),
        ] {
            if v == 0 {
                return Err(Error::config(format!("extractor {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("extractor d_model must divide into heads"));
        }
        if self.vocab < 2 {
            return Err(Error::config("extractor vocab must be at least 2"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Std of Gaussian noise added to motion inputs during training.
    pub augment_noise: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 300,
            batch_size: 16,
            augment_noise: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: ExtractorConfig,
    pub params: ParamStore,
    frame_in: Linear,
    blocks: Vec<EncoderBlock>,
    norm_out: LayerNorm,
    motion_head: Linear,
    words: crate::params::ParamId,
    text_hidden: Linear,
    text_head: Linear,
    positions: Mat,
}

/// Root ground-plane coordinates relative to the first frame, so features do
/// not depend on where a motion starts.
fn relative_root(m: &Mat, len: usize) -> Mat {
    let mut x = m.slice(s![..len, ..]).to_owned();
    if len > 0 && x.ncols() >= 3 {
        let (x0, z0) = (x[[0, 0]], x[[0, 2]]);
        for mut row in x.rows_mut() {
            row[0] -= x0;
            row[2] -= z0;
        }
    }
    x
}

impl FeatureExtractor {
    pub fn new(cfg: ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = cfg.d_model;
        let frame_in = Linear::new(&mut store, "motion.in", cfg.d_motion, d, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let n = format!("motion.block{i}");
                EncoderBlock {
                    norm_attn: LayerNorm::new(&mut store, &format!("{n}.norm_attn"), d),
                    attn: Attention::new(&mut store, &format!("{n}.attn"), d, d, cfg.n_heads, &mut rng),
                    norm_ff: LayerNorm::new(&mut store, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(&mut store, &format!("{n}.ff"), d, cfg.d_ff, &mut rng),
                }
            })
            .collect();
        let norm_out = LayerNorm::new(&mut store, "motion.norm_out", d);
        let motion_head = Linear::new(&mut store, "motion.head", d, cfg.d_feat, &mut rng);
        let words = store.add("text.words", normal(&mut rng, cfg.vocab, d, 1.0), true);
        let text_hidden = Linear::new(&mut store, "text.hidden", d, d, &mut rng);
        let text_head = Linear::new(&mut store, "text.head", d, cfg.d_feat, &mut rng);
        let positions = sinusoidal_table(cfg.max_frames, d);
        Ok(Self {
            cfg,
            params: store,
            frame_in,
            blocks,
            norm_out,
            motion_head,
            words,
            text_hidden,
            text_head,
            positions,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    /// `1 × d_feat` unit feature of the first `len` frames of `data`.
    pub fn motion_graph(&self, g: &mut Graph, data: &Mat, len: usize) -> Result<Var> {
        if data.ncols() != self.cfg.d_motion {
            return Err(Error::dim(format!("extractor expects {} motion dims, got {}", self.cfg.d_motion, data.ncols())));
        }
        if len == 0 || len > data.nrows() {
            return Err(Error::dim(format!("invalid motion length {len} for {} frames", data.nrows())));
        }
        if len > self.cfg.max_frames {
            return Err(Error::Capacity(format!("{len} frames exceed extractor limit {}", self.cfg.max_frames)));
        }
        let p = &self.params;
        let x = g.constant(relative_root(data, len));
        let x = self.frame_in.forward(g, p, x);
        let pos = g.constant(self.positions.slice(s![..len, ..]).to_owned());
        let mut x = g.add(x, pos);
        let mut off = Dropout::off();
        for b in &self.blocks {
            let h = b.norm_attn.forward(g, p, x);
            let h = b.attn.forward(g, p, h, h, None);
            x = g.add(x, h);
            let h = b.norm_ff.forward(g, p, x);
            let h = b.ff.forward(g, p, h, &mut off);
            x = g.add(x, h);
        }
        let x = self.norm_out.forward(g, p, x);
        let pooled = g.mean_rows(x);
        let f = self.motion_head.forward(g, p, pooled);
        Ok(g.normalize_rows(f))
    }

    /// `1 × d_feat` unit feature of a prompt.
    pub fn text_graph(&self, g: &mut Graph, text: &str) -> Var {
        let ids = token_ids(text, self.cfg.vocab);
        let table = g.param(&self.params, self.words);
        let emb = g.gather_rows(table, &ids);
        let pooled = g.mean_rows(emb);
        let h = self.text_hidden.forward(g, &self.params, pooled);
        let h = g.gelu(h);
        let f = self.text_head.forward(g, &self.params, h);
        g.normalize_rows(f)
    }

    pub fn encode_motion(&self, m: &MotionSequence) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let v = self.motion_graph(&mut g, &m.data, m.valid_len)?;
        Ok(g.value(v).row(0).to_owned())
    }

    pub fn encode_text(&self, text: &str) -> Array1<f64> {
        let mut g = Graph::new();
        let v = self.text_graph(&mut g, text);
        g.value(v).row(0).to_owned()
    }

    /// Motion features as rows.
    pub fn encode_motions<'a>(&self, ms: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Mat> {
        let rows = ms.into_iter().map(|m| self.encode_motion(m)).collect::<Result<Vec<_>>>()?;
        stack(&rows, self.cfg.d_feat)
    }

    pub fn encode_texts<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<Mat> {
        let rows: Vec<_> = texts.into_iter().map(|t| self.encode_text(t)).collect();
        stack(&rows, self.cfg.d_feat)
    }

    /// Symmetric InfoNCE loss on a batch of `(motion, length, text)` triples.
    /// Row `i` of the motions pairs with row `i` of the texts.
    pub fn loss_graph(&self, g: &mut Graph, batch: &[(Mat, usize, String)]) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::config(format!("contrastive batch needs at least 2 pairs, got {}", batch.len())));
        }
        let motions = batch
            .iter()
            .map(|(m, len, _)| self.motion_graph(g, m, *len))
            .collect::<Result<Vec<_>>>()?;
        let texts: Vec<Var> = batch.iter().map(|(_, _, t)| self.text_graph(g, t)).collect();
        let zm = g.concat_rows(&motions);
        let zt = g.concat_rows(&texts);
        let logits = g.matmul_nt(zm, zt);
        let logits = g.scale(logits, 1.0 / self.cfg.temperature);
        Ok(info_nce_graph(g, logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SavedExtractor {
            version: FORMAT_VERSION,
            config: self.cfg.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, e)| SavedTensor {
                    name: e.name.clone(),
                    shape: [e.value.nrows(), e.value.ncols()],
                    data: e.value.iter().copied().collect(),
                })
                .collect(),
        };
        let body = serde_json::to_vec(&file).map_err(|e| Error::Data(e.to_string()))?;
        write_file(path, &body)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: SavedExtractor = serde_json::from_slice(&body)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "extractor format {} is not supported (expected {FORMAT_VERSION})",
                file.version
            )));
        }
        let mut ex = Self::new(file.config, 0)?;
        let ids: Vec<_> = ex.params.ids().collect();
        if ids.len() != file.tensors.len() {
            return Err(Error::Incompatible("extractor tensor count does not match its config".into()));
        }
        for (id, t) in ids.into_iter().zip(file.tensors) {
            let entry = ex.params.entry(id);
            if entry.name != t.name || entry.value.dim() != (t.shape[0], t.shape[1]) {
                return Err(Error::Incompatible(format!("unexpected extractor tensor {}", t.name)));
            }
            *ex.params.get_mut(id) = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|e| Error::Data(format!("tensor {}: {e}", t.name)))?;
        }
        Ok(ex)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedExtractor {
    version: u32,
    config: ExtractorConfig,
    tensors: Vec<SavedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

fn stack(rows: &[Array1<f64>], width: usize) -> Result<Mat> {
    let mut out = Mat::zeros((rows.len(), width));
    for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(r);
    }
    Ok(out)
}

/// `−mean_i log softmax(L)_ii` over rows: cross-entropy of each row against
/// its diagonal entry.
pub fn row_cross_entropy(logits: &Mat) -> f64 {
    let n = logits.nrows();
    -logits
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mx = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + r.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            r[i] - lse
        })
        .sum::<f64>()
        / n as f64
}

/// Symmetric InfoNCE: the mean of the row-wise and column-wise cross-entropies.
pub fn info_nce(logits: &Mat) -> f64 {
    0.5 * (row_cross_entropy(logits) + row_cross_entropy(&logits.t().to_owned()))
}

fn info_nce_graph(g: &mut Graph, logits: Var) -> Var {
    let n = g.value(logits).nrows();
    let eye = Mat::eye(n);
    let rows = g.log_softmax(logits);
    let lt = g.transpose(logits);
    let cols = g.log_softmax(lt);
    let both = g.add(rows, cols);
    let diag = g.mul_const(both, eye);
    let total = g.sum(diag);
    g.scale(total, -0.5 / n as f64)
}

/// Grouping key for batch assembly: the label when present, else the prompt.
fn group_key(s: &Sample) -> &str {
    s.label.as_deref().unwrap_or(&s.text)
}

/// Draws a batch with at most one sample per group so no in-batch negative is
/// a paraphrase of the positive.
fn draw_batch<'a>(groups: &[Vec<&'a Sample>], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Sample> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .take(size)
        .map(|gi| groups[gi][rng.random_range(0..groups[gi].len())])
        .collect()
}

/// Trains a fresh extractor on `data`; `log` receives `(step, loss)`.
pub fn train_feature_extractor(
    data: &[Sample],
    cfg: ExtractorConfig,
    train: &ExtractorTrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<FeatureExtractor> {
    let mut by_group: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
    for s in data {
        by_group.entry(group_key(s)).or_default().push(s);
    }
    let groups: Vec<Vec<&Sample>> = by_group.into_values().collect();
    let size = train.batch_size.min(groups.len());
    if size < 2 {
        return Err(Error::config(format!(
            "contrastive training needs at least 2 distinct labels or prompts, got {}",
            groups.len()
        )));
    }
    let mut ex = FeatureExtractor::new(cfg, train.seed)?;
    let mut opt = AdamW::new(
        &ex.params,
        AdamWConfig {
            lr: train.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    for step in 1..=train.steps {
        let picked = draw_batch(&groups, size, &mut rng);
        let batch: Vec<(Mat, usize, String)> = picked
            .iter()
            .map(|s| {
                let mut m = s.motion.data.clone();
                if train.augment_noise > 0.0 {
                    m += &normal(&mut rng, m.nrows(), m.ncols(), train.augment_noise);
                }
                (m, s.motion.valid_len, s.text.clone())
            })
            .collect();
        let mut g = Graph::new();
        let loss = ex.loss_graph(&mut g, &batch)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("extractor loss is {value} at step {step}")));
        }
        let mut grads = g.backward(loss);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut ex.params, &grads);
        if step % 50 == 0 || step == train.steps {
            info!("extractor step {step}: loss {value:.4}");
        }
        log(step, value);
    }
    Ok(ex)
}
