//! Transformer denoiser predicting per-frame noise and variance coefficients.
//!
//! Token layout is `[TS, ML, CLS, frame_1 … frame_L]`. Frames past `length`
//! never enter the network and their outputs are zero, so padding cannot leak
//! into valid positions.

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::diffusion::DenoiserOutput;
use crate::error::{Error, Result};
use crate::motion::MOTION_DIMS;
use crate::nn::{sinusoidal, sinusoidal_table, Attention, Dropout, FeedForward, LayerNorm, Linear};
use crate::params::{normal, ParamId, ParamStore};
use crate::text::{ToyEncoder, TextContext, DEFAULT_VOCAB, MAX_WORDS};

/// Number of special tokens ahead of the frames.
pub const N_SPECIAL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub d_motion: usize,
    pub max_frames: usize,
    pub max_ctx_tokens: usize,
    /// Text embedding width; `None` means `d_model`.
    pub d_text: Option<usize>,
    pub vocab: usize,
    /// Adds a timestep-gated copy of the noisy input to the noise prediction,
    /// which lets narrow models pass `D_mo`-dimensional noise through.
    pub input_skip: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_layers: 8,
            n_heads: 8,
            d_ff: 2048,
            dropout: 0.1,
            d_motion: MOTION_DIMS,
            max_frames: 471,
            max_ctx_tokens: MAX_WORDS,
            d_text: None,
            vocab: DEFAULT_VOCAB,
            input_skip: true,
        }
    }
}

impl DenoiserConfig {
    pub fn d_text(&self) -> usize {
        self.d_text.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_motion", self.d_motion),
            ("max_frames", self.max_frames),
            ("max_ctx_tokens", self.max_ctx_tokens),
            ("d_text", self.d_text()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct TwoLayer {
    first: Linear,
    second: Linear,
}

impl TwoLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(g, store, x);
        let h = g.gelu(h);
        self.second.forward(g, store, h)
    }
}

/// Network architecture. Weights live in a separate [`ParamStore`] so the same
/// network can run with raw or averaged weights.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    text_table: ParamId,
    time_embed: TwoLayer,
    length_embed: TwoLayer,
    cls_proj: Linear,
    frame_in: Linear,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    head: Linear,
    skip_gate: Option<Linear>,
    positions: Mat,
}

/// Tokens and context entering the transformer stack.
pub struct Tokens {
    /// `(N_SPECIAL + length) × d_model`
    pub sequence: Var,
    /// `n_ctx × d_text`
    pub context: Var,
    /// `1 × d_model` timestep embedding.
    pub time: Var,
}

impl Denoiser {
    /// Builds the architecture and freshly initialised weights.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (d, dt) = (cfg.d_model, cfg.d_text());
        let text_table = store.add("text.table", normal(&mut rng, cfg.vocab, dt, 1.0), false);
        let two = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| TwoLayer {
            first: Linear::new(store, &format!("{name}.0"), d, d, rng),
            second: Linear::new(store, &format!("{name}.1"), d, d, rng),
        };
        let time_embed = two(&mut store, "time", &mut rng);
        let length_embed = two(&mut store, "length", &mut rng);
        let cls_proj = Linear::new(&mut store, "cls", dt, d, &mut rng);
        if dt == d {
            *store.get_mut(cls_proj.weight) = Mat::eye(d);
        }
        let frame_in = Linear::new(&mut store, "frame_in", cfg.d_motion, d, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|i| Block {
                norm_self: LayerNorm::new(&mut store, &format!("block{i}.norm_self"), d),
                self_attn: Attention::new(&mut store, &format!("block{i}.self"), d, d, cfg.n_heads, &mut rng),
                norm_cross: LayerNorm::new(&mut store, &format!("block{i}.norm_cross"), d),
                cross_attn: Attention::new(&mut store, &format!("block{i}.cross"), d, dt, cfg.n_heads, &mut rng),
                norm_ff: LayerNorm::new(&mut store, &format!("block{i}.norm_ff"), d),
                ff: FeedForward::new(&mut store, &format!("block{i}.ff"), d, cfg.d_ff, &mut rng),
            })
            .collect();
        let norm_out = LayerNorm::new(&mut store, "norm_out", d);
        let head = Linear::new(&mut store, "head", d, 2 * cfg.d_motion, &mut rng);
        let skip_gate = cfg.input_skip.then(|| {
            let gate = Linear::new(&mut store, "skip_gate", d, cfg.d_motion, &mut rng);
            store.get_mut(gate.weight).fill(0.0);
            gate
        });
        let positions = sinusoidal_table(cfg.max_frames, d);
        let net = Self {
            cfg,
            text_table,
            time_embed,
            length_embed,
            cls_proj,
            frame_in,
            blocks,
            norm_out,
            head,
            skip_gate,
            positions,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn text_table(&self) -> ParamId {
        self.text_table
    }

    /// Hashed encoder reading the current text table from `store`.
    pub fn text_encoder(&self, store: &ParamStore) -> ToyEncoder {
        ToyEncoder::new(store.get(self.text_table).clone()).expect("validated vocab")
    }

    pub fn with_params<'a>(&'a self, params: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, params }
    }

    fn check(&self, m_t: &Mat, length: usize, ctx: &TextContext) -> Result<()> {
        if m_t.ncols() != self.cfg.d_motion {
            return Err(Error::dim(format!(
                "motion has {} dims, model expects {}",
                m_t.ncols(),
                self.cfg.d_motion
            )));
        }
        if length > self.cfg.max_frames || m_t.nrows() > self.cfg.max_frames {
            return Err(Error::Capacity(format!(
                "{} frames exceeds max_frames {}",
                length.max(m_t.nrows()),
                self.cfg.max_frames
            )));
        }
        if length == 0 || length > m_t.nrows() {
            return Err(Error::dim(format!("length {length} not in 1..={}", m_t.nrows())));
        }
        if ctx.dim() != self.cfg.d_text() {
            return Err(Error::dim(format!(
                "text context width {} but model expects {}",
                ctx.dim(),
                self.cfg.d_text()
            )));
        }
        Ok(())
    }

    /// Special tokens, projected frames and the cross-attention context.
    pub fn build_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m_t: &Mat,
        t: usize,
        length: usize,
        ctx: &TextContext,
    ) -> Result<Tokens> {
        self.check(m_t, length, ctx)?;
        let d = self.cfg.d_model;
        let row = |v: Vec<f64>| Mat::from_shape_vec((1, d), v).expect("sinusoid width");

        let ts_in = g.constant(row(sinusoidal(t as f64, d)));
        let ts = self.time_embed.forward(g, store, ts_in);
        let ml_in = g.constant(row(sinusoidal(length as f64, d)));
        let ml = self.length_embed.forward(g, store, ml_in);

        let (pooled, words) = match &ctx.ids {
            Some(ids) => {
                let table = g.param(store, self.text_table);
                let words = g.gather_rows(table, ids);
                (g.mean_rows(words), words)
            }
            None => {
                let words = if ctx.is_empty() { ctx.pooled.clone() } else { ctx.tokens.clone() };
                (g.constant(ctx.pooled.clone()), g.constant(words))
            }
        };
        let cls = self.cls_proj.forward(g, store, pooled);
        let n_ctx = g.value(words).nrows().min(self.cfg.max_ctx_tokens);
        let context = if n_ctx == g.value(words).nrows() {
            words
        } else {
            g.slice_rows(words, 0, n_ctx)
        };

        let frames = g.constant(m_t.slice(s![..length, ..]).to_owned());
        let frames = self.frame_in.forward(g, store, frames);
        let pos = g.constant(self.positions.slice(s![..length, ..]).to_owned());
        let frames = g.add(frames, pos);
        let sequence = g.concat_rows(&[ts, ml, cls, frames]);
        Ok(Tokens {
            sequence,
            context,
            time: ts,
        })
    }

    /// Full forward pass; returns `(eps, v)`, each `frames × d_motion`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m_t: &Mat,
        t: usize,
        length: usize,
        ctx: &TextContext,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Var, Var)> {
        let Tokens { sequence, context, time } = self.build_tokens(g, store, m_t, t, length, ctx)?;
        let mut x = dropout.apply(g, sequence);
        for b in &self.blocks {
            let h = b.norm_self.forward(g, store, x);
            let h = b.self_attn.forward(g, store, h, h, None);
            let h = dropout.apply(g, h);
            x = g.add(x, h);

            let h = b.norm_cross.forward(g, store, x);
            let h = b.cross_attn.forward(g, store, h, context, None);
            let h = dropout.apply(g, h);
            x = g.add(x, h);

            let h = b.norm_ff.forward(g, store, x);
            let h = b.ff.forward(g, store, h, dropout);
            let h = dropout.apply(g, h);
            x = g.add(x, h);
        }
        let x = g.slice_rows(x, N_SPECIAL, length);
        let x = self.norm_out.forward(g, store, x);
        let out = self.head.forward(g, store, x);
        let dm = self.cfg.d_motion;
        let mut eps = g.slice_cols(out, 0, dm);
        if let Some(gate) = &self.skip_gate {
            let gate = gate.forward(g, store, time);
            let ones = g.constant(Mat::ones((length, 1)));
            let gate = g.matmul(ones, gate);
            let input = g.constant(m_t.slice(s![..length, ..]).to_owned());
            let skip = g.mul(gate, input);
            eps = g.add(eps, skip);
        }
        let mut v = g.slice_cols(out, dm, dm);
        let pad = m_t.nrows() - length;
        if pad > 0 {
            let zeros = g.constant(Mat::zeros((pad, dm)));
            eps = g.concat_rows(&[eps, zeros]);
            v = g.concat_rows(&[v, zeros]);
        }
        Ok((eps, v))
    }
}

/// Anything that predicts noise and variance coefficients for the sampler.
pub trait EpsModel: Sync {
    fn d_motion(&self) -> usize;
    fn max_frames(&self) -> usize;
    fn predict(&self, m_t: &Mat, t: usize, length: usize, ctx: &TextContext) -> Result<DenoiserOutput>;
}

/// A [`Denoiser`] paired with a set of weights, dropout off.
#[derive(Clone, Copy)]
pub struct BoundDenoiser<'a> {
    pub net: &'a Denoiser,
    pub params: &'a ParamStore,
}

impl EpsModel for BoundDenoiser<'_> {
    fn d_motion(&self) -> usize {
        self.net.cfg.d_motion
    }

    fn max_frames(&self) -> usize {
        self.net.cfg.max_frames
    }

    fn predict(&self, m_t: &Mat, t: usize, length: usize, ctx: &TextContext) -> Result<DenoiserOutput> {
        let mut g = Graph::new();
        let (eps, v) = self
            .net
            .forward_graph(&mut g, self.params, m_t, t, length, ctx, &mut Dropout::off())?;
        Ok(DenoiserOutput {
            eps: g.value(eps).clone(),
            v: g.value(v).clone(),
        })
    }
}
