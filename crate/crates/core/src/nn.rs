//! Transformer building blocks on top of [`crate::autograd`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::params::{xavier_uniform, ParamId, ParamStore};

/// Dropout state for one forward pass. `None` rate or missing rng disables it.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let dim = g.value(x).raw_dim();
                let mask = Mat::from_shape_fn(dim, |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                g.dropout(x, mask)
            }
            _ => x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, fan_in, fan_out),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Mat::zeros((1, fan_out)), false);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::ones((1, dim)), false),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, dim)), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one sequence,
/// keys and values from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_kv_in: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_kv_in, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_kv_in, d_model, rng),
            out: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            n_heads,
            d_model,
        }
    }

    /// `key_mask[j] == false` hides key `j` from every query.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, keys);
        let d_head = self.d_model / self.n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * d_head, d_head);
            let kh = g.slice_cols(k, h * d_head, d_head);
            let vh = g.slice_cols(v, h * d_head, d_head);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, key_mask);
            heads.push(g.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.out.forward(g, store, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: &mut Dropout<'_>) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        let h = dropout.apply(g, h);
        self.down.forward(g, store, h)
    }
}

/// Sinusoidal embedding of a scalar position, `[sin(x·ω_i) | cos(x·ω_i)]` with
/// geometrically spaced frequencies. Odd widths get a trailing zero.
pub fn sinusoidal(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (x * freq).sin();
        out[half + i] = (x * freq).cos();
    }
    out
}

/// `rows × dim` table of sinusoidal embeddings for positions `0..rows`.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros((rows, dim));
    for (r, mut row) in m.rows_mut().into_iter().enumerate() {
        for (dst, v) in row.iter_mut().zip(sinusoidal(r as f64, dim)) {
            *dst = v;
        }
    }
    m
}
