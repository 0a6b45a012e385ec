#![allow(dead_code)]

use motion_diffuse::autograd::{Graph, Mat};
use motion_diffuse::denoiser::{Denoiser, DenoiserConfig, EpsModel};
use motion_diffuse::diffusion::{DenoiserOutput, DiffusionSchedule};
use motion_diffuse::nn::Dropout;
use motion_diffuse::params::{normal, ParamStore};
use motion_diffuse::text::TextEncoder;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 2 layers, d_model 16, 6 motion dims.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        dropout: 0.0,
        d_motion: 6,
        max_frames: 8,
        max_ctx_tokens: 20,
        d_text: None,
        vocab: 16,
        input_skip: true,
    }
}

pub struct GradItem {
    pub m0: Mat,
    pub noise: Mat,
    pub t: usize,
    pub valid: usize,
    pub text: String,
}

/// Items covering the NLL branch, the KL branch, padding and the null prompt.
pub fn grad_items(d_motion: usize, frames: usize) -> Vec<GradItem> {
    let mut r = rng(11);
    [(1, frames, "walk forward"), (7, frames - 1, "raise both arms"), (4, frames, "")]
        .into_iter()
        .map(|(t, valid, text)| {
            let mut m0 = normal(&mut r, frames, d_motion, 0.5);
            let mut noise = normal(&mut r, frames, d_motion, 1.0);
            for f in valid..frames {
                m0.row_mut(f).fill(0.0);
                noise.row_mut(f).fill(0.0);
            }
            GradItem {
                m0,
                noise,
                t,
                valid,
                text: text.to_string(),
            }
        })
        .collect()
}

/// Hybrid loss and its gradient from the autodiff graph, exactly as training builds it.
pub fn graph_loss(
    net: &Denoiser,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    items: &[GradItem],
    lambda: f64,
) -> (f64, motion_diffuse::autograd::ParamGrads) {
    let enc = net.text_encoder(store);
    let mut g = Graph::new();
    let mut simple = Vec::new();
    let mut vlb = Vec::new();
    let mut count = 0;
    for it in items {
        let m_t = schedule.diffuse(&it.m0, it.t, &it.noise).unwrap();
        let (eps, v) = net
            .forward_graph(&mut g, store, &m_t, it.t, it.valid, &enc.encode(&it.text), &mut Dropout::off())
            .unwrap();
        let l = schedule
            .loss_terms_graph(&mut g, &it.m0, it.t, &it.noise, eps, v, it.valid)
            .unwrap();
        simple.push(l.simple_sum);
        vlb.push(l.vlb_sum);
        count += l.count;
    }
    let s = simple.iter().skip(1).fold(simple[0], |acc, &x| g.add(acc, x));
    let v = vlb.iter().skip(1).fold(vlb[0], |acc, &x| g.add(acc, x));
    let s = g.scale(s, 1.0 / count as f64);
    let v = g.scale(v, lambda / count as f64);
    let loss = g.add(s, v);
    (g.scalar(loss), g.backward(loss))
}

/// Reference loss evaluated without the graph: L_simple from the network's
/// ε, L_vlb from the plain [`DiffusionSchedule::loss_terms`] with ε held at
/// `frozen_eps` (the stop-gradient in training) and the network's current v.
pub fn reference_loss(
    net: &Denoiser,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    items: &[GradItem],
    frozen_eps: &[Mat],
    lambda: f64,
) -> f64 {
    let enc = net.text_encoder(store);
    let model = net.with_params(store);
    let mut simple_sum = 0.0;
    let mut vlb_sum = 0.0;
    let mut count = 0;
    for (it, eps0) in items.iter().zip(frozen_eps) {
        let m_t = schedule.diffuse(&it.m0, it.t, &it.noise).unwrap();
        let out = model.predict(&m_t, it.t, it.valid, &enc.encode(&it.text)).unwrap();
        let n = it.valid * it.m0.ncols();
        for f in 0..it.valid {
            for d in 0..it.m0.ncols() {
                let e = out.eps[[f, d]] - it.noise[[f, d]];
                simple_sum += e * e;
            }
        }
        let valid: Vec<bool> = (0..it.m0.nrows()).map(|f| f < it.valid).collect();
        let frozen = DenoiserOutput {
            eps: eps0.clone(),
            v: out.v,
        };
        let l = schedule.loss_terms(&it.m0, it.t, &it.noise, &frozen, lambda, &valid).unwrap();
        vlb_sum += l.vlb * n as f64;
        count += n;
    }
    (simple_sum + lambda * vlb_sum) / count as f64
}

/// Worst per-tensor relative error `‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖)`
/// between autodiff and central differences, with each tensor's name.
pub fn gradient_check(cfg: DenoiserConfig, seed: u64, lambda: f64) -> Vec<(String, f64)> {
    let (net, store) = Denoiser::new(cfg.clone(), seed).unwrap();
    let schedule = DiffusionSchedule::cosine(10, 0.008).unwrap();
    let items = grad_items(cfg.d_motion, 4);
    let (_, grads) = graph_loss(&net, &store, &schedule, &items, lambda);

    let enc = net.text_encoder(&store);
    let model = net.with_params(&store);
    let frozen: Vec<Mat> = items
        .iter()
        .map(|it| {
            let m_t = schedule.diffuse(&it.m0, it.t, &it.noise).unwrap();
            model.predict(&m_t, it.t, it.valid, &enc.encode(&it.text)).unwrap().eps
        })
        .collect();

    let h = 1e-5;
    let mut out = Vec::new();
    for (id, entry) in store.iter() {
        let auto = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(entry.value.raw_dim()));
        let mut fd = Mat::zeros(entry.value.raw_dim());
        for idx in 0..entry.value.len() {
            let (r, c) = (idx / entry.value.ncols(), idx % entry.value.ncols());
            let mut plus = store.clone();
            plus.get_mut(id)[[r, c]] += h;
            let mut minus = store.clone();
            minus.get_mut(id)[[r, c]] -= h;
            let lp = reference_loss(&net, &plus, &schedule, &items, &frozen, lambda);
            let lm = reference_loss(&net, &minus, &schedule, &items, &frozen, lambda);
            fd[[r, c]] = (lp - lm) / (2.0 * h);
        }
        let diff = (&auto - &fd).mapv(|x| x * x).sum().sqrt();
        let scale = auto.mapv(|x| x * x).sum().sqrt().max(fd.mapv(|x| x * x).sum().sqrt());
        // Key biases shift every attention score in a row equally; their true gradient is zero.
        let rel = if scale < 1e-8 { diff } else { diff / scale };
        out.push((entry.name.clone(), rel));
    }
    out
}

/// Matrix square root of an SPD matrix by Denman–Beavers iteration.
pub fn sqrtm_denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible");
        let zi = z.clone().try_inverse().expect("invertible");
        let y_next = (&y + &zi) * 0.5;
        let z_next = (&z + &yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta < 1e-14 * y.norm() {
            break;
        }
    }
    y
}

/// FD through the Denman–Beavers route: `Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` written
/// as `Tr(Σ₁ + Σ₂ − 2(√Σ₁ Σ₂ √Σ₁)^{1/2})`.
pub fn fd_oracle(a: &Mat, b: &Mat) -> f64 {
    let stats = |x: &Mat| {
        let n = x.nrows() as f64;
        let d = x.ncols();
        let mu: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n).collect();
        let mut cov = DMatrix::zeros(d, d);
        for row in x.rows() {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (row[i] - mu[i]) * (row[j] - mu[j]) / (n - 1.0);
                }
            }
        }
        (mu, cov)
    };
    let (m1, s1) = stats(a);
    let (m2, s2) = stats(b);
    let r1 = sqrtm_denman_beavers(&s1);
    let mid = &r1 * &s2 * &r1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let root = sqrtm_denman_beavers(&mid);
    let dm: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y) * (x - y)).sum();
    dm + s1.trace() + s2.trace() - 2.0 * root.trace()
}

/// Naive loop: mean over frames and joints of `‖g − r‖` on positions `[f][j][k]`.
pub fn loop_mean_dist(g: &[Vec<[f64; 3]>], r: &[Vec<[f64; 3]>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for f in 0..g.len() {
        for j in 0..g[f].len() {
            let mut s = 0.0;
            for k in 0..3 {
                s += (g[f][j][k] - r[f][j][k]).powi(2);
            }
            total += s.sqrt();
            n += 1.0;
        }
    }
    total / n
}

/// Naive loop: per-joint, per-axis variance with divisor F − 1.
pub fn loop_variance(p: &[Vec<[f64; 3]>]) -> Vec<[f64; 3]> {
    let f = p.len();
    let j = p[0].len();
    let mut out = vec![[0.0; 3]; j];
    for jj in 0..j {
        for k in 0..3 {
            let mean: f64 = (0..f).map(|ff| p[ff][jj][k]).sum::<f64>() / f as f64;
            out[jj][k] = (0..f).map(|ff| (p[ff][jj][k] - mean).powi(2)).sum::<f64>() / (f - 1) as f64;
        }
    }
    out
}

/// Positions array `[f][j][k]` as nested vectors.
pub fn nested(p: &ndarray::Array3<f64>) -> Vec<Vec<[f64; 3]>> {
    (0..p.dim().0)
        .map(|f| (0..p.dim().1).map(|j| [p[[f, j, 0]], p[[f, j, 1]], p[[f, j, 2]]]).collect())
        .collect()
}
