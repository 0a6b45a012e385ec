//! 147-dimensional pose layout, 6D rotations, forward kinematics and motion files.
//!
//! A frame is `[root translation (3) | joint 0 rot6d (6) | … | joint 23 rot6d (6)]`
//! with joints in SMPL index order. Rotations are local to the parent joint.
//! World axes: `+y` up, `+z` forward, `+x` toward the body's left.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Matrix3, Vector3};
use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const N_JOINTS: usize = 24;
pub const ROOT_DIMS: usize = 3;
pub const ROT_DIMS: usize = 6;
pub const MOTION_DIMS: usize = ROOT_DIMS + N_JOINTS * ROT_DIMS;
pub const DEFAULT_FPS: u32 = 20;
/// Pseudo-joint index addressing the root-translation dims in joint masks.
pub const ROOT_TRANSLATION: usize = N_JOINTS;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const PARENTS: [i32; N_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

/// Bone offsets in meters from each joint's parent, rest pose facing `+z`.
pub const OFFSETS: [[f64; 3]; N_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.0],
    [0.0, -0.40, -0.03],
    [0.0, -0.40, -0.03],
    [0.0, 0.05, 0.02],
    [0.0, -0.05, 0.12],
    [0.0, -0.05, 0.12],
    [0.0, 0.21, -0.03],
    [0.08, 0.12, 0.0],
    [-0.08, 0.12, 0.0],
    [0.0, 0.09, 0.05],
    [0.10, 0.03, 0.0],
    [-0.10, 0.03, 0.0],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
    [0.08, 0.0, 0.0],
    [-0.08, 0.0, 0.0],
];

/// Columns of the flat frame vector that hold joint `j`, or the root
/// translation for [`ROOT_TRANSLATION`].
pub fn joint_dims(joint: usize) -> Range<usize> {
    if joint == ROOT_TRANSLATION {
        0..ROOT_DIMS
    } else {
        let start = ROOT_DIMS + joint * ROT_DIMS;
        start..start + ROT_DIMS
    }
}

/// Gram–Schmidt: `b₁ = â₁`, `b₂ = normalize(a₂ − (a₂·b₁)b₁)`, `b₃ = b₁ × b₂`.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Matrix3<f64> {
    const EPS: f64 = 1e-12;
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let b1 = match a1.try_normalize(EPS) {
        Some(b) => b,
        None => {
            warn!("degenerate 6D rotation {r:?}: zero first column, using x axis");
            Vector3::x()
        }
    };
    let b2 = match (a2 - b1 * a2.dot(&b1)).try_normalize(EPS) {
        Some(b) => b,
        None => {
            warn!("degenerate 6D rotation {r:?}: parallel columns, completing basis");
            least_aligned_axis(&b1)
        }
    };
    let b3 = b1.cross(&b2);
    Matrix3::from_columns(&[b1, b2, b3])
}

fn least_aligned_axis(b1: &Vector3<f64>) -> Vector3<f64> {
    let axis = [Vector3::x(), Vector3::y(), Vector3::z()]
        .into_iter()
        .min_by(|a, b| a.dot(b1).abs().total_cmp(&b.dot(b1).abs()))
        .expect("three axes");
    (axis - b1 * axis.dot(b1)).normalize()
}

/// First two columns of `m`, flattened column-major.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<[f64; 6]> {
    const TOL: f64 = 1e-6;
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !(ortho < TOL && (det - 1.0).abs() < TOL) {
        return Err(Error::Validation(format!(
            "not a rotation matrix (orthogonality error {ortho:.3e}, det {det:.6})"
        )));
    }
    Ok([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_translation: [f64; 3],
    pub joint_rotations: [[f64; 6]; N_JOINTS],
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            root_translation: [0.0; 3],
            joint_rotations: [IDENTITY_6D; N_JOINTS],
        }
    }
}

impl Pose {
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(MOTION_DIMS);
        out.extend_from_slice(&self.root_translation);
        for r in &self.joint_rotations {
            out.extend_from_slice(r);
        }
        out
    }

    pub fn unpack(flat: &[f64]) -> Result<Self> {
        if flat.len() != MOTION_DIMS {
            return Err(Error::dim(format!("pose needs {MOTION_DIMS} values, got {}", flat.len())));
        }
        let mut pose = Pose::default();
        pose.root_translation.copy_from_slice(&flat[..ROOT_DIMS]);
        for (j, r) in pose.joint_rotations.iter_mut().enumerate() {
            r.copy_from_slice(&flat[joint_dims(j)]);
        }
        Ok(pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub parents: Vec<i32>,
    pub offsets: Vec<Vector3<f64>>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self {
            parents: PARENTS.to_vec(),
            offsets: OFFSETS.iter().map(|o| Vector3::new(o[0], o[1], o[2])).collect(),
        }
    }
}

impl Skeleton {
    /// Checks that joint 0 is the only root and every parent precedes its child.
    pub fn validate(&self) -> Result<()> {
        if self.parents.len() != N_JOINTS || self.offsets.len() != N_JOINTS {
            return Err(Error::Validation(format!("skeleton must have {N_JOINTS} joints")));
        }
        if self.parents[0] != -1 {
            return Err(Error::Validation("joint 0 must be the root".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Validation(format!("joint {j} has invalid parent {p}")));
            }
        }
        if self.offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::Validation("non-finite bone offset".into()));
        }
        Ok(())
    }

    /// Parent–child pairs, one per bone.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        (1..self.parents.len()).map(|j| (self.parents[j] as usize, j)).collect()
    }

    /// World-space joint positions for one pose.
    pub fn forward_kinematics(&self, pose: &Pose) -> [[f64; 3]; N_JOINTS] {
        let mut rot = [Matrix3::identity(); N_JOINTS];
        let mut pos = [Vector3::zeros(); N_JOINTS];
        for j in 0..N_JOINTS {
            let local = rot6d_to_matrix(&pose.joint_rotations[j]);
            if self.parents[j] < 0 {
                rot[j] = local;
                pos[j] = Vector3::from(pose.root_translation);
            } else {
                let p = self.parents[j] as usize;
                pos[j] = pos[p] + rot[p] * self.offsets[j];
                rot[j] = rot[p] * local;
            }
        }
        pos.map(|v| [v.x, v.y, v.z])
    }

    /// Joint positions for the valid frames of `m`.
    pub fn positions(&self, m: &MotionSequence) -> Result<Vec<[[f64; 3]; N_JOINTS]>> {
        if m.dims() != MOTION_DIMS {
            return Err(Error::dim(format!(
                "forward kinematics needs {MOTION_DIMS}-dim frames, got {}",
                m.dims()
            )));
        }
        (0..m.valid_len)
            .map(|f| {
                let row = m.data.row(f);
                Pose::unpack(row.as_slice().expect("row-major motion")).map(|p| self.forward_kinematics(&p))
            })
            .collect()
    }
}

/// `frames × dims` motion with its valid length and frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub data: Mat,
    pub valid_len: usize,
    pub fps: u32,
}

impl MotionSequence {
    pub fn new(data: Mat, valid_len: usize, fps: u32) -> Result<Self> {
        if valid_len > data.nrows() {
            return Err(Error::Validation(format!(
                "valid_len {valid_len} exceeds frame count {}",
                data.nrows()
            )));
        }
        if fps == 0 {
            return Err(Error::Validation("fps must be positive".into()));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data, valid_len, fps })
    }

    /// Fully valid sequence at the default frame rate.
    pub fn from_data(data: Mat) -> Self {
        let n = data.nrows();
        Self::new(data, n, DEFAULT_FPS).expect("valid_len equals frame count")
    }

    pub fn from_poses(poses: &[Pose], fps: u32) -> Result<Self> {
        let mut data = Mat::zeros((poses.len(), MOTION_DIMS));
        for (mut row, p) in data.rows_mut().into_iter().zip(poses) {
            row.assign(&ndarray::ArrayView1::from(&p.pack()));
        }
        Self::new(data, poses.len(), fps)
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn valid_data(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![..self.valid_len, ..])
    }

    /// `valid[f] == true` for frames inside the valid length.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.frames()).map(|f| f < self.valid_len).collect()
    }

    /// Same metadata, new contents.
    pub fn with_data(&self, data: Mat) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::dim(format!(
                "expected {:?}, got {:?}",
                self.data.dim(),
                data.dim()
            )));
        }
        Ok(Self {
            data,
            valid_len: self.valid_len,
            fps: self.fps,
        })
    }

    pub fn pose(&self, frame: usize) -> Result<Pose> {
        Pose::unpack(&self.data.row(frame).to_vec())
    }
}

#[derive(Serialize)]
struct MotionFileOut<'a> {
    fps: u32,
    dims: usize,
    valid_len: usize,
    frames: Vec<&'a [f64]>,
}

/// Writes the motion JSON format.
pub fn save_motion(m: &MotionSequence, path: &Path) -> Result<()> {
    let file = MotionFileOut {
        fps: m.fps,
        dims: m.dims(),
        valid_len: m.valid_len,
        frames: m
            .data
            .rows()
            .into_iter()
            .map(|r| r.to_slice().expect("row-major motion"))
            .collect(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
    write_file(path, text.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a 147-dim motion file.
pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    load_motion_dims(path, MOTION_DIMS)
}

/// Loads a motion file whose `dims` must equal `expected_dims`.
pub fn load_motion_dims(path: &Path, expected_dims: usize) -> Result<MotionSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_motion(&text, expected_dims).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}#{location}", path.display()),
            message,
        },
        other => other,
    })
}

/// Parses motion JSON; errors carry a JSON pointer to the offending value.
pub fn parse_motion(text: &str, expected_dims: usize) -> Result<MotionSequence> {
    let root: Value = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let obj = root.as_object().ok_or_else(|| Error::parse("", "expected a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "fps" | "dims" | "valid_len" | "frames") {
            return Err(Error::parse(format!("/{key}"), "unknown field"));
        }
    }
    let uint = |key: &str| -> Result<Option<u64>> {
        match obj.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Error::parse(format!("/{key}"), "expected a non-negative integer")),
        }
    };
    let fps = match uint("fps")? {
        Some(f) if f > 0 && f <= u32::MAX as u64 => f as u32,
        Some(_) => return Err(Error::parse("/fps", "fps must be a positive integer")),
        None => {
            warn!("motion file has no fps, assuming {DEFAULT_FPS}");
            DEFAULT_FPS
        }
    };
    let dims = uint("dims")?.ok_or_else(|| Error::parse("/dims", "missing required field"))? as usize;
    if dims != expected_dims {
        return Err(Error::parse(
            "/dims",
            format!("motion has {dims} dims but {expected_dims} are required"),
        ));
    }
    let frames = obj
        .get("frames")
        .ok_or_else(|| Error::parse("/frames", "missing required field"))?
        .as_array()
        .ok_or_else(|| Error::parse("/frames", "expected an array of frames"))?;
    let mut data = Mat::zeros((frames.len(), dims));
    for (f, frame) in frames.iter().enumerate() {
        let row = frame
            .as_array()
            .ok_or_else(|| Error::parse(format!("/frames/{f}"), "expected an array"))?;
        if row.len() != dims {
            return Err(Error::parse(
                format!("/frames/{f}"),
                format!("expected {dims} values, got {}", row.len()),
            ));
        }
        for (d, v) in row.iter().enumerate() {
            data[[f, d]] = v
                .as_f64()
                .ok_or_else(|| Error::parse(format!("/frames/{f}/{d}"), "expected a number"))?;
        }
    }
    let valid_len = uint("valid_len")?.map_or(frames.len(), |v| v as usize);
    if valid_len > frames.len() {
        return Err(Error::parse(
            "/valid_len",
            format!("valid_len {valid_len} exceeds {} frames", frames.len()),
        ));
    }
    MotionSequence::new(data, valid_len, fps)
}

/// Joint-position sidecar consumed by renderers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionsFile {
    pub fps: u32,
    pub joints: Vec<String>,
    pub parents: Vec<i32>,
    /// `frames × 24 × 3`, meters.
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl PositionsFile {
    pub fn from_motion(m: &MotionSequence, skel: &Skeleton) -> Result<Self> {
        Ok(Self {
            fps: m.fps,
            joints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: skel.parents.clone(),
            frames: skel.positions(m)?.into_iter().map(|f| f.to_vec()).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::parse(
                format!("{}:{}:{}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })
    }
}

/// `out.json` → `out.pos.json`.
pub fn sidecar_path(motion_path: &Path) -> PathBuf {
    let stem = motion_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    motion_path.with_file_name(format!("{stem}.pos.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit, UnitQuaternion, Quaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let q = Quaternion::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }

    #[test]
    fn identity_6d() {
        assert_eq!(rot6d_to_matrix(&IDENTITY_6D), Matrix3::identity());
        assert_eq!(matrix_to_rot6d(&Matrix3::identity()).unwrap(), IDENTITY_6D);
    }

    #[test]
    fn round_trip_through_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r).unwrap());
            assert!((back - r).abs().max() < 1e-12);
        }
    }

    #[test]
    fn arbitrary_input_is_orthonormalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let m = rot6d_to_matrix(&r);
            assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
            let once = matrix_to_rot6d(&m).unwrap();
            let twice = matrix_to_rot6d(&rot6d_to_matrix(&once)).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_inputs_complete_to_rotation() {
        for r in [[0.0; 6], [1.0, 0.0, 0.0, 2.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]] {
            let m = rot6d_to_matrix(&r);
            assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_rotation_rejected() {
        let m = Matrix3::identity() * 2.0;
        assert!(matches!(matrix_to_rot6d(&m), Err(Error::Validation(_))));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_rot6d(&reflect).is_err());
    }

    #[test]
    fn pack_unpack() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flat: Vec<f64> = (0..MOTION_DIMS).map(|_| rng.random()).collect();
        assert_eq!(Pose::unpack(&flat).unwrap().pack(), flat);
        assert!(Pose::unpack(&flat[1..]).is_err());
        assert_eq!(joint_dims(0), 3..9);
        assert_eq!(joint_dims(23), 141..147);
        assert_eq!(joint_dims(ROOT_TRANSLATION), 0..3);
    }

    #[test]
    fn identity_fk_is_cumulative_offsets() {
        let skel = Skeleton::default();
        skel.validate().unwrap();
        let pos = skel.forward_kinematics(&Pose::default());
        for j in 0..N_JOINTS {
            let mut expected = Vector3::zeros();
            let mut k = j as i32;
            while k > 0 {
                expected += Vector3::from(OFFSETS[k as usize]);
                k = PARENTS[k as usize];
            }
            for a in 0..3 {
                assert!((pos[j][a] - expected[a]).abs() < 1e-15);
            }
        }
    }

    fn naive_fk(pose: &Pose, j: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let local = rot6d_to_matrix(&pose.joint_rotations[j]);
        if PARENTS[j] < 0 {
            return (local, Vector3::from(pose.root_translation));
        }
        let (pr, pp) = naive_fk(pose, PARENTS[j] as usize);
        (pr * local, pp + pr * Vector3::from(OFFSETS[j]))
    }

    #[test]
    fn fk_matches_recursive_oracle_and_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let skel = Skeleton::default();
        let mut pose = Pose::default();
        for r in pose.joint_rotations.iter_mut() {
            *r = matrix_to_rot6d(&random_rotation(&mut rng)).unwrap();
        }
        pose.root_translation = [0.3, 0.9, -1.2];
        let pos = skel.forward_kinematics(&pose);
        for (j, p) in pos.iter().enumerate() {
            let (_, expected) = naive_fk(&pose, j);
            for a in 0..3 {
                assert!((p[a] - expected[a]).abs() < 1e-12);
            }
        }
        let mut moved = pose.clone();
        moved.root_translation = [1.3, 0.4, 0.8];
        let shifted = skel.forward_kinematics(&moved);
        for j in 0..N_JOINTS {
            for a in 0..3 {
                let d = moved.root_translation[a] - pose.root_translation[a];
                assert!((shifted[j][a] - pos[j][a] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn root_rotation_rotates_descendants() {
        let skel = Skeleton::default();
        let rest = skel.forward_kinematics(&Pose::default());
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.2, 1.0, -0.3)), 0.9);
        let mut pose = Pose::default();
        pose.joint_rotations[0] = matrix_to_rot6d(r.matrix()).unwrap();
        let turned = skel.forward_kinematics(&pose);
        for j in 0..N_JOINTS {
            let expected = r * Vector3::from(rest[j]);
            for a in 0..3 {
                assert!((turned[j][a] - expected[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn motion_json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Mat::from_shape_fn((5, MOTION_DIMS), |_| rng.sample::<f64, _>(StandardNormal) * 1e3);
        let m = MotionSequence::new(data, 3, 30).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_motion(&m, &path).unwrap();
        assert_eq!(load_motion(&path).unwrap(), m);
    }

    #[test]
    fn parse_errors_point_at_the_value() {
        let bad_dims = r#"{"fps":20,"dims":64,"frames":[]}"#;
        match parse_motion(bad_dims, MOTION_DIMS) {
            Err(Error::Parse { location, message }) => {
                assert_eq!(location, "/dims");
                assert!(message.contains("64"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_motion(bad_dims, 64).is_ok());
        let bad_value = r#"{"dims":2,"frames":[[1,2],[3,"x"]]}"#;
        match parse_motion(bad_value, 2) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "/frames/1/1"),
            other => panic!("{other:?}"),
        }
        let short_row = r#"{"dims":2,"frames":[[1,2],[3]]}"#;
        assert!(matches!(parse_motion(short_row, 2), Err(Error::Parse { location, .. }) if location == "/frames/1"));
    }

    #[test]
    fn missing_fps_defaults() {
        let m = parse_motion(r#"{"dims":1,"frames":[[0.5]]}"#, 1).unwrap();
        assert_eq!(m.fps, DEFAULT_FPS);
        assert_eq!(m.valid_len, 1);
    }

    #[test]
    fn sidecar_naming_and_shape() {
        assert_eq!(sidecar_path(Path::new("out/a.json")), PathBuf::from("out/a.pos.json"));
        let m = MotionSequence::from_poses(&[Pose::default(), Pose::default()], 20).unwrap();
        let side = PositionsFile::from_motion(&m, &Skeleton::default()).unwrap();
        assert_eq!(side.frames.len(), 2);
        assert_eq!(side.frames[0].len(), N_JOINTS);
    }
}
