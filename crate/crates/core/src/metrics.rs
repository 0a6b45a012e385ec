//! Evaluation metrics on joint positions and feature vectors.
//!
//! Positions are `frames × joints × 3` arrays in meters with joint 0 the root.
//! APE variants: `root` (joint 0), `traj` (joint 0 on the ground plane, x and z),
//! `local` (joints 1.. relative to the root), `global` (all joints).

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array3, ArrayView1, ArrayView3, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const DEFAULT_SL: usize = 10;
pub const R_PRECISION_NEGATIVES: usize = 31;
const PSD_TOL: f64 = 1e-8;

/// Joint positions of one motion.
pub type Positions = Array3<f64>;

/// Converts forward-kinematics output to a positions array.
pub fn positions_array(frames: &[[[f64; 3]; crate::motion::N_JOINTS]]) -> Positions {
    Array3::from_shape_fn((frames.len(), crate::motion::N_JOINTS, 3), |(f, j, a)| frames[f][j][a])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Variants {
    pub root: f64,
    pub traj: f64,
    pub local: f64,
    pub global: f64,
}

impl Variants {
    fn mean(items: &[Variants]) -> Variants {
        let n = items.len().max(1) as f64;
        let mut acc = Variants::default();
        for v in items {
            acc.root += v.root / n;
            acc.traj += v.traj / n;
            acc.local += v.local / n;
            acc.global += v.global / n;
        }
        acc
    }
}

fn check_pair(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!("positions {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.dim().2 != 3 || a.dim().1 == 0 {
        return Err(Error::dim(format!("positions must be frames × joints × 3, got {:?}", a.dim())));
    }
    Ok(())
}

/// Root-relative positions of joints `1..`.
fn local(p: &ArrayView3<f64>) -> Array3<f64> {
    let root = p.slice(s![.., 0..1, ..]);
    &p.slice(s![.., 1.., ..]) - &root
}

fn ground(p: &ArrayView3<f64>) -> Array3<f64> {
    let mut out = Array3::zeros((p.dim().0, 1, 2));
    out.slice_mut(s![.., 0, 0]).assign(&p.slice(s![.., 0, 0]));
    out.slice_mut(s![.., 0, 1]).assign(&p.slice(s![.., 0, 2]));
    out
}

/// Mean over frames and joints of the per-joint Euclidean distance.
fn mean_distance(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    let (f, j, _) = a.dim();
    if f * j == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (ra, rb) in a.lanes(Axis(2)).into_iter().zip(b.lanes(Axis(2))) {
        total += ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    total / (f * j) as f64
}

/// Average positional error of one motion against its reference.
pub fn ape(gen: &ArrayView3<f64>, reference: &ArrayView3<f64>) -> Result<Variants> {
    check_pair(gen, reference)?;
    Ok(Variants {
        root: mean_distance(&gen.slice(s![.., 0..1, ..]), &reference.slice(s![.., 0..1, ..])),
        traj: mean_distance(&ground(gen).view(), &ground(reference).view()),
        local: mean_distance(&local(gen).view(), &local(reference).view()),
        global: mean_distance(gen, reference),
    })
}

/// Per-joint, per-axis temporal variance with divisor `F − 1`.
pub fn joint_variance(p: &ArrayView3<f64>) -> Result<Array3<f64>> {
    let f = p.dim().0;
    if f < 2 {
        return Err(Error::Numeric(format!("variance needs at least 2 frames, got {f}")));
    }
    let mean = p.mean_axis(Axis(0)).expect("frames > 0");
    let centered = p - &mean.insert_axis(Axis(0));
    let var = centered.mapv(|x| x * x).sum_axis(Axis(0)) / (f - 1) as f64;
    Ok(var.insert_axis(Axis(0)))
}

/// Average variance error of one motion against its reference.
pub fn ave(gen: &ArrayView3<f64>, reference: &ArrayView3<f64>) -> Result<Variants> {
    check_pair(gen, reference)?;
    let d = |a: Array3<f64>, b: Array3<f64>| -> Result<f64> {
        Ok(mean_distance(&joint_variance(&a.view())?.view(), &joint_variance(&b.view())?.view()))
    };
    Ok(Variants {
        root: d(gen.slice(s![.., 0..1, ..]).to_owned(), reference.slice(s![.., 0..1, ..]).to_owned())?,
        traj: d(ground(gen), ground(reference))?,
        local: d(local(gen), local(reference))?,
        global: d(gen.to_owned(), reference.to_owned())?,
    })
}

/// APE and AVE averaged over motion pairs.
pub fn ape_ave_mean(pairs: &[(Positions, Positions)]) -> Result<(Variants, Variants)> {
    let mut apes = Vec::with_capacity(pairs.len());
    let mut aves = Vec::with_capacity(pairs.len());
    for (g, r) in pairs {
        apes.push(ape(&g.view(), &r.view())?);
        aves.push(ave(&g.view(), &r.view())?);
    }
    Ok((Variants::mean(&apes), Variants::mean(&aves)))
}

/// Mean over joints of the variance vector norm; a diversity summary for one motion.
pub fn mean_joint_variance(p: &ArrayView3<f64>) -> Result<f64> {
    let v = joint_variance(p)?;
    let j = v.dim().1;
    Ok(v.lanes(Axis(2)).into_iter().map(|l| l.dot(&l).sqrt()).sum::<f64>() / j as f64)
}

fn mean_and_cov(x: &Mat) -> Result<(Array1<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::config(format!("Frechet distance needs at least 2 samples, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let c = x - &mean.view().insert_axis(Axis(0));
    let cov = c.t().dot(&c) / (n - 1) as f64;
    let d = cov.nrows();
    Ok((mean, DMatrix::from_fn(d, d, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]))))
}

/// Eigenvalues of a symmetric PSD matrix with small negatives clamped to zero.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let scale = m.abs().max().max(1.0);
    let mut e = SymmetricEigen::new(m);
    for l in e.eigenvalues.iter_mut() {
        if *l < -PSD_TOL * scale {
            return Err(Error::Numeric(format!("{what} is not positive semi-definite (eigenvalue {l:.3e})")));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})` between two feature sets (rows).
pub fn frechet_distance(a: &Mat, b: &Mat) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim(format!("feature widths {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu1, s1) = mean_and_cov(a)?;
    let (mu2, s2) = mean_and_cov(b)?;
    let dm = &mu1 - &mu2;
    let e1 = psd_eigen(s1.clone(), "first covariance")?;
    let sqrt_vals = e1.eigenvalues.map(f64::sqrt);
    let root1 = &e1.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * e1.eigenvectors.transpose();
    let mid = &root1 * &s2 * &root1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt: f64 = psd_eigen(mid, "covariance product")?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let fd = dm.dot(&dm) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

fn unit(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.mapv(|x| x / n)
    } else {
        v.to_owned()
    }
}

fn dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Retrieval accuracy of the ground-truth text among itself and `negatives`
/// texts drawn from the pool.
///
/// `gt[i]` is the pool index of motion `i`'s text. Negatives exclude pool
/// entries sharing the ground truth's label, so paraphrases of the same
/// prompt never count against a motion. Distances are Euclidean between
/// unit-normalised features; the ground truth is ranked after strictly
/// closer candidates only.
pub fn r_precision(
    motion_feats: &Mat,
    gt: &[usize],
    pool_feats: &Mat,
    pool_labels: &[String],
    negatives: usize,
    rng: &mut impl Rng,
) -> Result<TopK> {
    if motion_feats.nrows() != gt.len() || pool_feats.nrows() != pool_labels.len() {
        return Err(Error::dim("r-precision inputs disagree on counts"));
    }
    if motion_feats.ncols() != pool_feats.ncols() {
        return Err(Error::dim("motion and text features differ in width"));
    }
    let pool: Vec<Array1<f64>> = pool_feats.rows().into_iter().map(unit).collect();
    let mut hits = [0usize; 3];
    for (i, &g) in gt.iter().enumerate() {
        let eligible: Vec<usize> = (0..pool.len()).filter(|&j| pool_labels[j] != pool_labels[g]).collect();
        if eligible.len() < negatives {
            return Err(Error::config(format!(
                "r-precision needs {negatives} negative texts, pool offers {}",
                eligible.len()
            )));
        }
        let m = unit(motion_feats.row(i));
        let d_gt = dist(&m, &pool[g]);
        let closer = sample_indices(rng, eligible.len(), negatives)
            .into_iter()
            .filter(|&k| dist(&m, &pool[eligible[k]]) < d_gt)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if closer <= k {
                *h += 1;
            }
        }
    }
    let n = gt.len().max(1) as f64;
    Ok(TopK {
        top1: hits[0] as f64 / n,
        top2: hits[1] as f64 / n,
        top3: hits[2] as f64 / n,
    })
}

/// Mean distance between paired samples: `first[c]` and `second[c]` hold
/// `S_l` features each (rows) for text `c`.
pub fn multimodality(first: &[Mat], second: &[Mat]) -> Result<f64> {
    if first.len() != second.len() || first.is_empty() {
        return Err(Error::config("multimodality needs the same nonzero number of texts in both sets"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (a, b) in first.iter().zip(second) {
        if a.dim() != b.dim() || a.nrows() == 0 {
            return Err(Error::config(format!("sample sets {:?} and {:?} differ", a.dim(), b.dim())));
        }
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            total += dist(&ra.to_owned(), &rb.to_owned());
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        warn!("cosine similarity of a zero vector, reporting 0");
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Full evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Meters.
    pub ape: Variants,
    /// Square meters.
    pub ave: Variants,
    pub mclip: f64,
    /// Mean similarity of generated motions to prompts from other classes.
    pub mclip_mismatched: f64,
    pub fd: f64,
    pub r_precision: TopK,
    pub multimodality: f64,
    /// Mean per-joint variance norm of generated motions, square meters.
    pub joint_variance: f64,
    /// Not computed.
    pub mid: Option<f64>,
    pub samples: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, name: &str, v: f64| writeln!(f, "{name:<22} {v:>12.6}");
        writeln!(f, "{:<22} {:>12}", "metric", "value")?;
        row(f, "ape_root", self.ape.root)?;
        row(f, "ape_traj", self.ape.traj)?;
        row(f, "ape_local", self.ape.local)?;
        row(f, "ape_global", self.ape.global)?;
        row(f, "ave_root", self.ave.root)?;
        row(f, "ave_traj", self.ave.traj)?;
        row(f, "ave_local", self.ave.local)?;
        row(f, "ave_global", self.ave.global)?;
        row(f, "mclip", self.mclip)?;
        row(f, "mclip_mismatched", self.mclip_mismatched)?;
        row(f, "fd", self.fd)?;
        row(f, "r_precision_top1", self.r_precision.top1)?;
        row(f, "r_precision_top2", self.r_precision.top2)?;
        row(f, "r_precision_top3", self.r_precision.top3)?;
        row(f, "multimodality", self.multimodality)?;
        row(f, "joint_variance", self.joint_variance)?;
        writeln!(f, "{:<22} {:>12}", "mid", "n/a")?;
        write!(f, "{:<22} {:>12}", "samples", self.samples)
    }
}
