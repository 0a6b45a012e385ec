//! Mask-based editing: regenerate the masked-out part of a reference motion
//! while the rest follows the reference's own noising trajectory.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::denoiser::EpsModel;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::motion::{joint_dims, write_file, MotionSequence, MOTION_DIMS, N_JOINTS, ROOT_TRANSLATION};
use crate::sampler::{gaussian, SampleSpec, Sampler};
use crate::text::TextContext;

/// Pelvis, hips, knees, ankles and feet. Add [`ROOT_TRANSLATION`] to also pin the trajectory.
pub const LOWER_BODY: [usize; 9] = [0, 1, 2, 4, 5, 7, 8, 10, 11];
/// Spine, neck, head, collars, arms and hands.
pub const UPPER_BODY: [usize; 15] = [3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23];

/// `true` keeps the reference entry, `false` lets the model regenerate it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    grid: Array2<bool>,
}

impl EditMask {
    pub fn from_grid(grid: Array2<bool>) -> Self {
        Self { grid }
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self::from_grid(Array2::from_elem((frames, dims), false))
    }

    pub fn ones(frames: usize, dims: usize) -> Self {
        Self::from_grid(Array2::from_elem((frames, dims), true))
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn count_preserved(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &EditMask) -> Result<EditMask> {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &EditMask) -> Result<EditMask> {
        self.combine(other, |a, b| a && b)
    }

    fn combine(&self, other: &EditMask, f: impl Fn(bool, bool) -> bool) -> Result<EditMask> {
        if self.dim() != other.dim() {
            return Err(Error::dim(format!("mask {:?} vs {:?}", self.dim(), other.dim())));
        }
        Ok(Self::from_grid(
            Zip::from(&self.grid).and(&other.grid).map_collect(|&a, &b| f(a, b)),
        ))
    }

    /// Keeps whole frames in `[start, end)`.
    pub fn keep_frames(&mut self, start: usize, end: usize) -> Result<()> {
        if start >= end || end > self.grid.nrows() {
            return Err(Error::config(format!(
                "frame range [{start}, {end}) invalid for {} frames",
                self.grid.nrows()
            )));
        }
        self.grid.slice_mut(s![start..end, ..]).fill(true);
        Ok(())
    }

    /// Keeps the columns of `joint` on every frame; [`ROOT_TRANSLATION`] selects the root translation.
    pub fn keep_joint(&mut self, joint: usize) -> Result<()> {
        if self.grid.ncols() != MOTION_DIMS {
            return Err(Error::config("joint masks need the 147-dim layout"));
        }
        if joint > ROOT_TRANSLATION {
            return Err(Error::config(format!(
                "joint index {joint} out of range (0..{N_JOINTS}, {ROOT_TRANSLATION} for root translation)"
            )));
        }
        let cols = joint_dims(joint);
        self.grid.slice_mut(s![.., cols]).fill(true);
        Ok(())
    }
}

/// First `n_context` frames kept, the rest regenerated.
pub fn prediction_mask(frames: usize, dims: usize, n_context: usize) -> Result<EditMask> {
    if n_context == 0 || n_context >= frames {
        return Err(Error::config(format!(
            "context frames must be in 1..{frames}, got {n_context}"
        )));
    }
    let mut m = EditMask::zeros(frames, dims);
    m.keep_frames(0, n_context)?;
    Ok(m)
}

/// First `n_head` and last `n_tail` frames kept, the middle regenerated.
pub fn inbetween_mask(frames: usize, dims: usize, n_head: usize, n_tail: usize) -> Result<EditMask> {
    if n_head + n_tail >= frames {
        return Err(Error::config(format!(
            "head {n_head} + tail {n_tail} leaves nothing to edit in {frames} frames"
        )));
    }
    let mut m = EditMask::zeros(frames, dims);
    if n_head > 0 {
        m.keep_frames(0, n_head)?;
    }
    if n_tail > 0 {
        m.keep_frames(frames - n_tail, frames)?;
    }
    Ok(m)
}

/// Listed joints kept on every frame.
pub fn joint_mask(frames: usize, joints: &[usize]) -> Result<EditMask> {
    let mut m = EditMask::zeros(frames, MOTION_DIMS);
    for &j in joints {
        m.keep_joint(j)?;
    }
    Ok(m)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<Vec<Vec<u8>>>,
}

/// Parses `{"frames": [[a, b), …]}`, `{"joints": [...]}` (both together give
/// their union) or `{"grid": [[0|1, …], …]}`.
pub fn parse_mask(text: &str, frames: usize, dims: usize) -> Result<EditMask> {
    let file: MaskFile = serde_json::from_str(text)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    if let Some(grid) = file.grid {
        if file.frames.is_some() || file.joints.is_some() {
            return Err(Error::parse("/grid", "a dense grid cannot be combined with ranges or joints"));
        }
        if grid.len() != frames {
            return Err(Error::dim(format!("mask grid has {} rows, motion has {frames} frames", grid.len())));
        }
        let mut m = EditMask::zeros(frames, dims);
        for (f, row) in grid.iter().enumerate() {
            if row.len() != dims {
                return Err(Error::dim(format!("mask row {f} has {} entries, expected {dims}", row.len())));
            }
            for (d, &v) in row.iter().enumerate() {
                m.grid[[f, d]] = match v {
                    0 => false,
                    1 => true,
                    _ => return Err(Error::parse(format!("/grid/{f}/{d}"), "mask entries must be 0 or 1")),
                };
            }
        }
        return Ok(m);
    }
    let mut m = EditMask::zeros(frames, dims);
    for &[a, b] in file.frames.iter().flatten() {
        m.keep_frames(a, b)?;
    }
    for &j in file.joints.iter().flatten() {
        m.keep_joint(j)?;
    }
    Ok(m)
}

pub fn load_mask(path: &Path, frames: usize, dims: usize) -> Result<EditMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mask(&text, frames, dims)
}

/// Writes the dense grid form.
pub fn save_mask(mask: &EditMask, path: &Path) -> Result<()> {
    let file = MaskFile {
        grid: Some(mask.grid.rows().into_iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect()),
        ..Default::default()
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
    write_file(path, text.as_bytes())
}

fn select(mask: &Array2<bool>, keep: &Mat, other: &Mat) -> Mat {
    Zip::from(mask)
        .and(keep)
        .and(other)
        .map_collect(|&m, &k, &o| if m { k } else { o })
}

/// Edits the valid frames of `reference`. `spec.length` is ignored.
///
/// The model's trajectory draws from the same RNG stream as [`crate::sampler::sample`];
/// reference noise comes from a separate stream, so an all-false mask reproduces
/// `sample` exactly. Kept entries are copied, never recomputed.
pub fn edit<M: EpsModel + ?Sized>(
    model: &M,
    base: &DiffusionSchedule,
    reference: &MotionSequence,
    mask: &EditMask,
    ctx: &TextContext,
    null: &TextContext,
    spec: &SampleSpec,
) -> Result<MotionSequence> {
    if mask.dim() != reference.data.dim() {
        return Err(Error::dim(format!(
            "mask {:?} does not match reference {:?}",
            mask.dim(),
            reference.data.dim()
        )));
    }
    let len = reference.valid_len;
    if len == 0 {
        return Ok(reference.clone());
    }
    let ref0 = reference.valid_data().to_owned();
    let keep = mask.grid.slice(s![..len, ..]).to_owned();
    let spec = SampleSpec { length: len, ..*spec };
    let sampler = Sampler::new(model, base, spec)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ref_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ref_rng.set_stream(1);
    let marginal = |t: usize, rng: &mut ChaCha8Rng| -> Result<Mat> {
        let noise = gaussian(rng, ref0.nrows(), ref0.ncols());
        base.diffuse(&ref0, t, &noise)
    };

    let z = sampler.initial_noise(&mut rng);
    let mut x = select(&keep, &marginal(sampler.timestep(sampler.len()), &mut ref_rng)?, &z);
    for i in (1..=sampler.len()).rev() {
        let pred = sampler.step(&x, i, ctx, Some(null), &mut rng)?;
        x = if i > 1 {
            select(&keep, &marginal(sampler.timestep(i - 1), &mut ref_rng)?, &pred)
        } else {
            select(&keep, &ref0, &pred)
        };
    }
    let mut out = reference.data.clone();
    out.slice_mut(s![..len, ..]).assign(&x);
    reference.with_data(out)
}
