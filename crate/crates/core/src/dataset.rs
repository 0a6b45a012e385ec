//! Synthetic text–motion dataset, annotation files, clipping and batching.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::motion::{load_motion, matrix_to_rot6d, save_motion, MotionSequence, Pose, DEFAULT_FPS};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DEFAULT_NULL_PROB: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Walk,
    ArmRaise,
    Turn,
    Squat,
    Jump,
    Wave,
    KickLeft,
    KickRight,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Walk,
        Family::ArmRaise,
        Family::Turn,
        Family::Squat,
        Family::Jump,
        Family::Wave,
        Family::KickLeft,
        Family::KickRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Walk => "walk",
            Family::ArmRaise => "arm_raise",
            Family::Turn => "turn",
            Family::Squat => "squat",
            Family::Jump => "jump",
            Family::Wave => "wave",
            Family::KickLeft => "kick_left",
            Family::KickRight => "kick_right",
        }
    }

    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Family::Walk => &[
                "a person walks forward",
                "someone is walking straight ahead",
                "a man walks forward at a steady pace",
                "the person takes several steps forward",
                "a figure strolls forward in a straight line",
            ],
            Family::ArmRaise => &[
                "a person raises both arms above the head",
                "someone lifts their arms up high",
                "the person puts both hands up in the air",
                "a man raises his arms and lowers them again",
                "arms go up over the head and come back down",
            ],
            Family::Turn => &[
                "a person turns around in place",
                "someone spins to face the other way",
                "the person rotates on the spot",
                "a man turns around to look behind him",
                "turning around without moving forward",
            ],
            Family::Squat => &[
                "a person squats down and stands up",
                "someone bends the knees into a deep squat",
                "the person crouches low and rises again",
                "a man does a squat",
                "squatting down then standing back up",
            ],
            Family::Jump => &[
                "a person jumps up and down",
                "someone hops in place",
                "the person leaps into the air",
                "a man jumps on the spot",
                "jumping straight up several times",
            ],
            Family::Wave => &[
                "a person waves with the right hand",
                "someone waves hello",
                "the person raises a hand and waves",
                "a man waves his hand in greeting",
                "waving the right arm back and forth",
            ],
            Family::KickLeft => &[
                "a person kicks with the left leg",
                "someone kicks forward using the left foot",
                "the person does a left leg kick",
                "a man kicks with his left leg",
                "kicking the left foot out in front",
            ],
            Family::KickRight => &[
                "a person kicks with the right leg",
                "someone kicks forward using the right foot",
                "the person does a right leg kick",
                "a man kicks with his right leg",
                "kicking the right foot out in front",
            ],
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: Vec<Family>,
    pub samples_per_class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: u32,
    /// Standard deviation of per-frame angle jitter, radians.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: Family::ALL.to_vec(),
            samples_per_class: 32,
            min_frames: 96,
            max_frames: 160,
            fps: DEFAULT_FPS,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("a dataset needs at least 2 classes"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples per class must be positive"));
        }
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return Err(Error::config(format!(
                "frame range {}..={} is invalid",
                self.min_frames, self.max_frames
            )));
        }
        if self.fps == 0 {
            return Err(Error::config("fps must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be >= 0"));
        }
        Ok(())
    }
}

/// One motion with its prompt and family label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub motion: MotionSequence,
    pub text: String,
    pub label: Option<String>,
}

/// One line of the annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub motion: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

struct Jitter {
    amp: f64,
    freq: f64,
    phase: f64,
}

fn rot(axis: Vector3<f64>, angle: f64) -> [f64; 6] {
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    matrix_to_rot6d(r.matrix()).expect("axis-angle is a rotation")
}

const STANDING_HEIGHT: f64 = 0.93;

/// Renders one family at time `s` seconds into `duration` seconds.
fn pose_at(family: Family, s: f64, duration: f64, j: &Jitter, noise: &mut dyn FnMut() -> f64) -> Pose {
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let mut pose = Pose::default();
    let mut angles: Vec<(usize, Vector3<f64>, f64)> = Vec::new();
    let mut root = [0.0, STANDING_HEIGHT, 0.0];
    let w = 2.0 * PI * j.freq;
    let phase = w * s + j.phase;
    let envelope = (PI * s / duration).sin();
    // relaxed arms hang at the sides from a horizontal rest pose
    let arms_down = |angles: &mut Vec<(usize, Vector3<f64>, f64)>| {
        angles.push((16, z, -1.3));
        angles.push((17, z, 1.3));
    };
    match family {
        Family::Walk => {
            let speed = 1.1 * j.amp;
            root = [0.0, STANDING_HEIGHT + 0.02 * (2.0 * phase).sin(), speed * s];
            let swing = 0.45 * j.amp * phase.sin();
            angles.push((1, x, -swing));
            angles.push((2, x, swing));
            angles.push((4, x, 0.5 * j.amp * (phase.cos().max(0.0))));
            angles.push((5, x, 0.5 * j.amp * ((-phase.cos()).max(0.0))));
            arms_down(&mut angles);
            angles.push((16, x, 0.4 * swing));
            angles.push((17, x, -0.4 * swing));
        }
        Family::ArmRaise => {
            let lift = 2.6 * j.amp.min(1.15) * envelope;
            angles.push((16, z, -1.3 + lift));
            angles.push((17, z, 1.3 - lift));
        }
        Family::Turn => {
            let progress = (s / duration).clamp(0.0, 1.0);
            let turn = PI * j.amp * (0.5 - 0.5 * (PI * progress).cos());
            angles.push((0, y, turn));
            angles.push((1, x, -0.2 * (2.0 * phase).sin().max(0.0)));
            angles.push((2, x, -0.2 * (2.0 * phase).sin().min(0.0).abs()));
            arms_down(&mut angles);
        }
        Family::Squat => {
            let depth = 0.5 - 0.5 * phase.cos();
            let bend = 1.4 * j.amp * depth;
            root = [0.0, STANDING_HEIGHT - 0.35 * j.amp * depth, 0.0];
            angles.push((1, x, -bend));
            angles.push((2, x, -bend));
            angles.push((4, x, 2.0 * bend));
            angles.push((5, x, 2.0 * bend));
            angles.push((7, x, -bend));
            angles.push((8, x, -bend));
            arms_down(&mut angles);
            angles.push((16, x, -0.8 * depth));
            angles.push((17, x, -0.8 * depth));
        }
        Family::Jump => {
            let hop = phase.sin();
            root = [0.0, STANDING_HEIGHT + 0.3 * j.amp * hop.max(0.0) - 0.1 * (-hop).max(0.0), 0.0];
            let crouch = 0.6 * (-hop).max(0.0);
            angles.push((1, x, -crouch));
            angles.push((2, x, -crouch));
            angles.push((4, x, 2.0 * crouch));
            angles.push((5, x, 2.0 * crouch));
            angles.push((16, z, -1.3 + 1.6 * hop.max(0.0)));
            angles.push((17, z, 1.3 - 1.6 * hop.max(0.0)));
        }
        Family::Wave => {
            angles.push((16, z, -1.3));
            angles.push((17, z, 1.2 * j.amp.min(1.1)));
            angles.push((19, z, 1.0 + 0.5 * (2.0 * phase).sin()));
        }
        Family::KickLeft | Family::KickRight => {
            let (hip, knee, other_arm) = if family == Family::KickLeft { (1, 4, 17) } else { (2, 5, 16) };
            let kick = (phase.sin().max(0.0)).powi(2);
            angles.push((hip, x, -1.3 * j.amp * kick));
            angles.push((knee, x, 0.6 * (1.0 - kick) * kick.sqrt()));
            arms_down(&mut angles);
            angles.push((other_arm, x, -0.5 * kick));
        }
    }
    let mut composed: Vec<(usize, Rotation3<f64>)> = Vec::new();
    for (joint, axis, angle) in angles {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle + noise());
        match composed.iter_mut().find(|(k, _)| *k == joint) {
            Some((_, acc)) => *acc = r * *acc,
            None => composed.push((joint, r)),
        }
    }
    for (joint, r) in composed {
        pose.joint_rotations[joint] = matrix_to_rot6d(r.matrix()).expect("rotation");
    }
    // small sway on the spine so every frame carries some jitter
    let sway = rot(y, noise());
    pose.joint_rotations[3] = sway;
    pose.root_translation = root;
    if family != Family::Walk {
        pose.root_translation[0] += noise() * 0.1;
        pose.root_translation[2] += noise() * 0.1;
    }
    pose
}

/// Generates `samples_per_class` motions per class, deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    let noise_dist = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    for &family in &spec.classes {
        for _ in 0..spec.samples_per_class {
            let frames = rng.random_range(spec.min_frames..=spec.max_frames);
            let duration = frames as f64 / spec.fps as f64;
            let jit = Jitter {
                amp: rng.random_range(0.85..1.15),
                freq: rng.random_range(0.8..1.2) * match family {
                    Family::Walk => 1.0,
                    Family::Squat | Family::Jump | Family::KickLeft | Family::KickRight => 2.0 / duration,
                    Family::Wave => 1.5,
                    _ => 1.0 / duration,
                },
                phase: match family {
                    Family::Walk => rng.random_range(0.0..2.0 * PI),
                    _ => rng.random_range(-0.2..0.2),
                },
            };
            let mut noise = || if spec.noise > 0.0 { rng.sample(noise_dist) } else { 0.0 };
            let poses: Vec<Pose> = (0..frames)
                .map(|f| pose_at(family, f as f64 / spec.fps as f64, duration, &jit, &mut noise))
                .collect();
            let templates = family.templates();
            let text = templates[rng.random_range(0..templates.len())].to_string();
            out.push(Sample {
                motion: MotionSequence::from_poses(&poses, spec.fps)?,
                text,
                label: Some(family.name().to_string()),
            });
        }
    }
    Ok(out)
}

/// Writes `motions/*.json` and the annotation file under `dir`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let motions = dir.join("motions");
    fs::create_dir_all(&motions).map_err(|e| Error::io(&motions, e))?;
    let mut lines = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let stem = s.label.as_deref().unwrap_or("motion");
        let rel = format!("motions/{stem}_{i:04}.json");
        save_motion(&s.motion, &dir.join(&rel))?;
        let ann = Annotation {
            motion: rel,
            text: s.text.clone(),
            label: s.label.clone(),
        };
        lines.push(serde_json::to_string(&ann).map_err(|e| Error::Data(e.to_string()))?);
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Generates and writes a dataset; returns the samples.
pub fn generate_synthetic(spec: &DatasetSpec, dir: &Path) -> Result<Vec<Sample>> {
    let samples = generate(spec)?;
    write_dataset(&samples, dir)?;
    Ok(samples)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let body = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("annotation file {} not found", path.display())),
        _ => Error::io(path, e),
    })?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))
        })
        .collect()
}

/// Loads every annotated motion of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let anns = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    if anns.is_empty() {
        return Err(Error::Data(format!("{} has no annotations", dir.display())));
    }
    anns.into_iter()
        .map(|a| {
            let path: PathBuf = dir.join(&a.motion);
            Ok(Sample {
                motion: load_motion(&path)?,
                text: a.text,
                label: a.label,
            })
        })
        .collect()
}

/// Fixed-length clips: sliding windows over long motions, zero padding for short ones.
pub fn clip_to_length(m: &MotionSequence, target: usize, stride: usize) -> Result<Vec<MotionSequence>> {
    if target == 0 || stride == 0 {
        return Err(Error::config("clip length and stride must be positive"));
    }
    let len = m.valid_len;
    if len <= target {
        let mut data = Mat::zeros((target, m.dims()));
        data.slice_mut(s![..len, ..]).assign(&m.valid_data());
        return Ok(vec![MotionSequence::new(data, len, m.fps)?]);
    }
    let count = (len - target) / stride + 1;
    (0..count)
        .map(|w| {
            let start = w * stride;
            MotionSequence::new(m.data.slice(s![start..start + target, ..]).to_owned(), target, m.fps)
        })
        .collect()
}

/// Clips every sample, keeping text and label.
pub fn clip_samples(samples: &[Sample], target: usize, stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in samples {
        for motion in clip_to_length(&s.motion, target, stride)? {
            out.push(Sample {
                motion,
                text: s.text.clone(),
                label: s.label.clone(),
            });
        }
    }
    Ok(out)
}

/// Shifts the root so the first frame sits above the origin on the ground
/// plane. Height is left alone.
pub fn canonicalize_root(m: &mut MotionSequence) {
    if m.valid_len == 0 {
        return;
    }
    let (x0, z0) = (m.data[[0, 0]], m.data[[0, 2]]);
    let len = m.valid_len;
    for mut row in m.data.slice_mut(s![..len, ..]).rows_mut() {
        row[0] -= x0;
        row[2] -= z0;
    }
}

/// Clips every sample and canonicalizes each clip's root.
pub fn training_clips(samples: &[Sample], target: usize, stride: usize) -> Result<Vec<Sample>> {
    let mut clips = clip_samples(samples, target, stride)?;
    for c in &mut clips {
        canonicalize_root(&mut c.motion);
    }
    Ok(clips)
}

/// One training example after text dropout, step and noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    /// `frames × dims`, zero beyond `valid_len`.
    pub motion: Mat,
    pub valid_len: usize,
    /// Prompt, or `""` when replaced by the null condition.
    pub text: String,
    pub t: usize,
    /// Standard normal on valid frames, zero elsewhere.
    pub noise: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn null_count(&self) -> usize {
        self.items.iter().filter(|i| i.text.is_empty()).count()
    }

    /// Total number of valid elements across items.
    pub fn valid_elements(&self) -> usize {
        self.items.iter().map(|i| i.valid_len * i.motion.ncols()).sum()
    }
}

/// Pads items to a common length and draws null-text replacement, `t ~ U{1..T}`
/// and per-element noise, in that order per item.
pub fn make_batch(items: &[&Sample], steps: usize, null_prob: f64, rng: &mut impl Rng) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::config("a batch needs at least one item"));
    }
    if !(0.0..=1.0).contains(&null_prob) {
        return Err(Error::config(format!("null probability must be in [0, 1], got {null_prob}")));
    }
    let frames = items.iter().map(|s| s.motion.frames()).max().expect("nonempty");
    let dims = items[0].motion.dims();
    let mut out = Vec::with_capacity(items.len());
    for s in items {
        if s.motion.dims() != dims {
            return Err(Error::dim("batch items disagree on motion width"));
        }
        let len = s.motion.valid_len;
        let null = rng.random::<f64>() < null_prob;
        let t = rng.random_range(1..=steps);
        let mut motion = Mat::zeros((frames, dims));
        motion.slice_mut(s![..len, ..]).assign(&s.motion.valid_data());
        let mut noise = Mat::zeros((frames, dims));
        noise
            .slice_mut(s![..len, ..])
            .mapv_inplace(|_| rng.sample(StandardNormal));
        out.push(BatchItem {
            motion,
            valid_len: len,
            text: if null { String::new() } else { s.text.clone() },
            t,
            noise,
        });
    }
    Ok(Batch { items: out })
}
