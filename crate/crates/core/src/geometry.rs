//! Camera geometry: validated rotations, rigid world-to-camera poses,
//! pinhole projection, ray generation, and point sampling along rays.
//!
//! Conventions: right-handed coordinates, camera looks down +z with x right
//! and y down, extrinsics stored world-to-camera, and integer pixel
//! coordinates address pixel centers.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Orthonormality deviation accepted without repair.
pub const ROTATION_TOL: f64 = 1e-6;
/// Deviation up to which a matrix is re-orthonormalized; beyond it is rejected.
pub const ROTATION_REPAIR_TOL: f64 = 1e-4;

/// A proper rotation: orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

fn orthonormal_deviation(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m;
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - target).abs());
        }
    }
    dev
}

/// Nearest orthogonal matrix via the Newton iteration for the polar factor.
fn polar_orthonormalize(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let mut x = *m;
    for _ in 0..30 {
        let inv_t = x.try_inverse()?.transpose();
        x = 0.5 * (x + inv_t);
        if orthonormal_deviation(&x) < 1e-14 {
            break;
        }
    }
    Some(x)
}

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates orthonormality and determinant. Deviations within
    /// [`ROTATION_REPAIR_TOL`] are projected onto the nearest rotation;
    /// larger ones are rejected.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::pose("rotation matrix has non-finite entries"));
        }
        let dev = orthonormal_deviation(&m);
        let det = m.determinant();
        if dev <= ROTATION_TOL && (det - 1.0).abs() <= ROTATION_TOL {
            return Ok(RotationMatrix(m));
        }
        if dev <= ROTATION_REPAIR_TOL && det > 0.0 {
            let repaired = polar_orthonormalize(&m)
                .ok_or_else(|| Error::pose("rotation matrix is singular"))?;
            if orthonormal_deviation(&repaired) <= ROTATION_TOL
                && (repaired.determinant() - 1.0).abs() <= ROTATION_TOL
            {
                return Ok(RotationMatrix(repaired));
            }
        }
        Err(Error::pose(format!(
            "matrix is not a rotation (orthonormality deviation {dev:.3e}, det {det:.6})"
        )))
    }

    pub fn from_row_slice(rows: &[f64]) -> Result<Self> {
        if rows.len() != 9 {
            return Err(Error::pose(format!(
                "rotation needs 9 entries, got {}",
                rows.len()
            )));
        }
        Self::from_matrix(Matrix3::from_row_slice(rows))
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Transpose equals the inverse for a rotation.
    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * other.0)
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

/// World-to-camera rigid transform: `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::pose("translation has non-finite entries"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: RotationMatrix::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates: `-Rᵀ t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose().apply(&self.translation))
    }

    /// The optical axis (camera +z) expressed in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.transpose().apply(&Vector3::new(0.0, 0.0, 1.0))
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }

    /// Builds the world-to-camera pose of a camera placed at `eye` looking
    /// at `target`, with `up` fixing the roll (camera y points away from it).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        let norm = forward.norm();
        if norm < 1e-12 {
            return Err(Error::pose("look_at target coincides with eye"));
        }
        let z = forward / norm;
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            // Degenerate: looking along `up`; pick any perpendicular axis.
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
            if x.norm() < 1e-9 {
                x = z.cross(&Vector3::new(0.0, 0.0, 1.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = RotationMatrix::from_matrix(Matrix3::from_rows(&[
            x.transpose(),
            y.transpose(),
            z.transpose(),
        ]))?;
        let translation = -(rotation.apply(&eye));
        Pose::new(rotation, translation)
    }
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::argument("intrinsics must be finite"));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::argument("focal lengths must be positive"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }
}

/// A pinhole camera with image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn new(pose: Pose, intrinsics: Intrinsics, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::argument("image dimensions must be at least 1x1"));
        }
        Ok(Camera {
            pose,
            intrinsics,
            width,
            height,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.camera_center()
    }

    /// Back-projects continuous pixel coordinates into world-space rays.
    /// Out-of-image pixels are permitted (super-sampling).
    pub fn generate_rays(&self, pixels: &[(f64, f64)], near: f64, far: f64) -> Result<Vec<Ray>> {
        if !(near > 0.0 && far > near) {
            return Err(Error::argument(format!(
                "ray bounds must satisfy 0 < near < far, got [{near}, {far}]"
            )));
        }
        let origin = self.center();
        let rot_t = self.pose.rotation.transpose();
        let k = &self.intrinsics;
        pixels
            .iter()
            .map(|&(u, v)| {
                let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
                let dir_world = rot_t.apply(&dir_cam).normalize();
                Ray::new(origin, dir_world, near, far)
            })
            .collect()
    }

    /// Pinhole projection of a world point. Invalidity (behind the camera or
    /// outside the image rectangle) is reported via the flag, not an error.
    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        let p_cam = self.pose.world_to_camera(point);
        let depth = p_cam.z;
        if depth <= 0.0 {
            return Projection {
                u: 0.0,
                v: 0.0,
                depth,
                valid: false,
            };
        }
        let k = &self.intrinsics;
        let u = k.fx * p_cam.x / depth + k.cx;
        let v = k.fy * p_cam.y / depth + k.cy;
        // Pixel centers sit at integers, so the image extends half a pixel
        // beyond the outermost centers.
        let valid = u >= -0.5
            && u <= self.width as f64 - 0.5
            && v >= -0.5
            && v <= self.height as f64 - 0.5;
        Projection { u, v, depth, valid }
    }

    /// True when pose, intrinsics, and dimensions agree within `tol`.
    pub fn approx_eq(&self, other: &Camera, tol: f64) -> bool {
        let dr = (self.pose.rotation.matrix() - other.pose.rotation.matrix()).abs();
        let dt = (self.pose.translation - other.pose.translation).abs();
        self.width == other.width
            && self.height == other.height
            && dr.iter().all(|v| *v <= tol)
            && dt.iter().all(|v| *v <= tol)
            && (self.intrinsics.fx - other.intrinsics.fx).abs() <= tol
            && (self.intrinsics.fy - other.intrinsics.fy).abs() <= tol
            && (self.intrinsics.cx - other.intrinsics.cx).abs() <= tol
            && (self.intrinsics.cy - other.intrinsics.cy).abs() <= tol
    }
}

/// Relative rotation aligning a reference camera's frame with the target's:
/// `R_target · R_referenceᵀ` (the reference's camera-to-world rotation is the
/// inverse of its world-to-camera rotation).
pub fn compose_relative_rotation(target: &Pose, reference: &Pose) -> Result<RotationMatrix> {
    let product = target.rotation.matrix() * reference.rotation.matrix().transpose();
    RotationMatrix::from_matrix(product)
}

/// A ray with sampling bounds, `direction` unit-length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self> {
        if !(origin.iter().all(|v| v.is_finite()) && direction.iter().all(|v| v.is_finite())) {
            return Err(Error::argument("ray origin/direction must be finite"));
        }
        if (direction.norm() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::argument(format!(
                "ray direction must be unit length, norm is {}",
                direction.norm()
            )));
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::argument(format!(
                "ray bounds must satisfy 0 < near < far, got [{near}, {far}]"
            )));
        }
        Ok(Ray {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }

    /// Draws `count` depths in `[near, far]`, strictly increasing. Midpoint
    /// mode places them at the centers of a uniform partition; stratified
    /// mode draws one uniform sample per bin from the seeded stream.
    pub fn sample_points(&self, count: usize, mode: SampleMode) -> Result<Vec<SampledPoint>> {
        if count == 0 {
            return Err(Error::argument("sample count must be at least 1"));
        }
        let span = self.far - self.near;
        let bin = span / count as f64;
        let mut rng = match mode {
            SampleMode::Stratified { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            SampleMode::Midpoint => None,
        };
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let offset = match &mut rng {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            let t = self.near + (i as f64 + offset) * bin;
            out.push(SampledPoint {
                position: self.point_at(t),
                t,
                ray_direction: self.direction,
            });
        }
        Ok(out)
    }
}

/// How depths are drawn along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    Midpoint,
    Stratified { seed: u64 },
}

/// A point sampled along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPoint {
    pub position: Vector3<f64>,
    pub t: f64,
    pub ray_direction: Vector3<f64>,
}
