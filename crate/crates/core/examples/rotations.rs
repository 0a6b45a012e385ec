//! 6D rotation encoding and forward kinematics on the 24-joint skeleton.
//!
//! cargo run --example rotations

use anyhow::Result;
use motion_diffuse::motion::{
    matrix_to_rot6d, rot6d_to_matrix, Pose, Skeleton, JOINT_NAMES, MOTION_DIMS,
};
use nalgebra::{Rotation3, Vector3};

fn main() -> Result<()> {
    let r = Rotation3::from_euler_angles(0.3, -1.2, 2.0).into_inner();
    let six = matrix_to_rot6d(&r)?;
    println!("6D: {six:.4?}");
    println!("round-trip error: {:.2e}", (rot6d_to_matrix(&six) - r).abs().max());

    // Any 6 numbers decode to a proper rotation.
    let g = rot6d_to_matrix(&[2.0, 0.1, 0.0, 1.0, 1.0, 0.3]);
    println!("det {:.12}, |RᵀR − I| {:.2e}", g.determinant(), (g.transpose() * g - nalgebra::Matrix3::identity()).abs().max());

    let skel = Skeleton::default();
    let mut pose = Pose::default();
    pose.root_translation = [0.0, 0.9, 0.0];
    let elbow = JOINT_NAMES.iter().position(|&n| n == "left_elbow").unwrap_or(18);
    pose.joint_rotations[elbow] = matrix_to_rot6d(&Rotation3::from_axis_angle(&Vector3::z_axis(), 1.2).into_inner())?;
    let flat = pose.pack();
    assert_eq!(flat.len(), MOTION_DIMS);
    assert_eq!(Pose::unpack(&flat)?, pose);

    for (j, p) in skel.forward_kinematics(&pose).iter().enumerate().step_by(4) {
        println!("{:>15}: [{:+.3}, {:+.3}, {:+.3}]", JOINT_NAMES[j], p[0], p[1], p[2]);
    }
    Ok(())
}
