//! Seeded random fixtures shared by unit and integration tests.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Camera, Intrinsics, Pose, RotationMatrix};

/// Uniformly random rotation from a random axis and angle.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> RotationMatrix {
    let axis = Vector3::new(
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
        rng.gen::<f64>() - 0.5,
    );
    let axis = if axis.norm() < 1e-6 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        axis.normalize()
    };
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    let (s, c) = angle.sin_cos();
    let k = Matrix3::new(
        0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0,
    );
    let m = Matrix3::identity() + s * k + (1.0 - c) * (k * k);
    RotationMatrix::from_matrix(m).expect("Rodrigues matrix is a rotation")
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(
        random_rotation(rng),
        Vector3::new(
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
        ),
    )
    .expect("finite translation")
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let width = 16 + rng.gen_range(0..64);
    let height = 16 + rng.gen_range(0..64);
    let fx = 30.0 + rng.gen::<f64>() * 170.0;
    let fy = 30.0 + rng.gen::<f64>() * 170.0;
    let cx = width as f64 / 2.0 + rng.gen::<f64>() * 4.0 - 2.0;
    let cy = height as f64 / 2.0 + rng.gen::<f64>() * 4.0 - 2.0;
    Camera::new(
        random_pose(rng),
        Intrinsics::new(fx, fy, cx, cy).unwrap(),
        width,
        height,
    )
    .unwrap()
}
