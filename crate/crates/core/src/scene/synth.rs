//! Procedural sphere-and-plane scenes with an analytic Lambertian ray
//! tracer. The tracer doubles as the ground-truth oracle for rendering and
//! training tests: generated images are its output quantized to the 8-bit
//! grid, so a re-render reproduces stored files bit-exactly.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, SceneBundle};
use crate::geometry::{Camera, Intrinsics, Pose, Ray};
use crate::{derive_seed, Error, Result};

/// Camera placement on a hemisphere around the scene centroid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub radius: f64,
    /// Elevation bounds in radians above the horizontal plane.
    pub elevation_range: (f64, f64),
    pub count: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            radius: 3.2,
            elevation_range: (0.45, 1.0),
            count: 8,
        }
    }
}

/// Recipe for a deterministic synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub name: String,
    pub sphere_count: usize,
    /// Horizontal half-extent of the box sphere centers are drawn from.
    pub placement_extent: f64,
    pub radius_range: (f64, f64),
    /// Per-channel albedo bounds for spheres.
    pub albedo_range: (f64, f64),
    pub ground_plane: bool,
    pub plane_albedo: [f64; 3],
    pub background_color: [f64; 3],
    /// Travel direction of the directional light (normalized on build).
    pub light_direction: [f64; 3],
    pub camera_rig: CameraRig,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            seed: 0,
            name: "scene".to_string(),
            sphere_count: 3,
            placement_extent: 0.8,
            radius_range: (0.25, 0.55),
            albedo_range: (0.15, 0.95),
            ground_plane: true,
            plane_albedo: [0.55, 0.55, 0.55],
            background_color: [0.2, 0.4, 0.8],
            light_direction: [-0.4, -1.0, -0.2],
            camera_rig: CameraRig::default(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius_range.0 <= 0.0 || self.radius_range.1 < self.radius_range.0 {
            return Err(Error::argument("sphere radius range must be positive"));
        }
        let (a0, a1) = self.albedo_range;
        if !(0.0..=1.0).contains(&a0) || !(0.0..=1.0).contains(&a1) || a1 < a0 {
            return Err(Error::argument("albedo range must lie in [0,1]"));
        }
        for c in self
            .background_color
            .iter()
            .chain(self.plane_albedo.iter())
        {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::argument("colors must lie in [0,1]"));
            }
        }
        if self.camera_rig.count == 0 {
            return Err(Error::argument("camera rig must have at least one view"));
        }
        if self.camera_rig.radius <= 0.0 {
            return Err(Error::argument("camera rig radius must be positive"));
        }
        let l = Vector3::from(self.light_direction);
        if l.norm() < 1e-9 {
            return Err(Error::argument("light direction must be nonzero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Analytic scene contents; `shade` is the ground-truth oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub spheres: Vec<Sphere>,
    pub ground_plane: bool,
    pub plane_albedo: [f64; 3],
    pub background: [f64; 3],
    /// Unit vector pointing from surfaces toward the light.
    pub toward_light: Vector3<f64>,
}

/// Closest intersection: returns `(t, normal, albedo)`.
fn intersect(
    geometry: &SceneGeometry,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>, [f64; 3])> {
    const T_MIN: f64 = 1e-9;
    let mut best: Option<(f64, Vector3<f64>, [f64; 3])> = None;
    for sphere in &geometry.spheres {
        let oc = origin - sphere.center;
        let b = oc.dot(dir);
        let c = oc.dot(&oc) - sphere.radius * sphere.radius;
        let disc = b * b - c;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let t = if -b - sq > T_MIN {
            -b - sq
        } else if -b + sq > T_MIN {
            -b + sq
        } else {
            continue;
        };
        if best.map_or(true, |(bt, _, _)| t < bt) {
            let normal = (origin + t * dir - sphere.center) / sphere.radius;
            best = Some((t, normal, sphere.albedo));
        }
    }
    if geometry.ground_plane && dir.y.abs() > 1e-12 {
        let t = -origin.y / dir.y;
        if t > T_MIN && best.map_or(true, |(bt, _, _)| t < bt) {
            best = Some((t, Vector3::new(0.0, 1.0, 0.0), geometry.plane_albedo));
        }
    }
    best
}

impl SceneGeometry {
    /// Lambertian shading of the closest hit, `albedo * max(0, n·l)`;
    /// misses return the background color. No quantization here.
    pub fn shade(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
        match intersect(self, origin, dir) {
            Some((_, normal, albedo)) => {
                let lambert = normal.dot(&self.toward_light).max(0.0);
                [
                    albedo[0] * lambert,
                    albedo[1] * lambert,
                    albedo[2] * lambert,
                ]
            }
            None => self.background,
        }
    }

    pub fn shade_ray(&self, ray: &Ray) -> [f64; 3] {
        self.shade(&ray.origin, &ray.direction)
    }

    /// Builds geometry and the bounding sphere `(centroid, radius)` of its
    /// solid contents, deterministically from the spec.
    pub fn from_spec(spec: &SyntheticSceneSpec) -> Result<(SceneGeometry, Vector3<f64>, f64)> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x5ce7e));
        let p = spec.placement_extent;
        let spheres: Vec<Sphere> = (0..spec.sphere_count)
            .map(|_| {
                let radius = rng.gen_range(spec.radius_range.0..=spec.radius_range.1);
                let x = rng.gen_range(-p..=p);
                let z = rng.gen_range(-p..=p);
                // Rest on or hover just above the ground plane.
                let y = radius + rng.gen_range(0.0..=0.25 * p.max(0.1));
                let albedo = [
                    rng.gen_range(spec.albedo_range.0..=spec.albedo_range.1),
                    rng.gen_range(spec.albedo_range.0..=spec.albedo_range.1),
                    rng.gen_range(spec.albedo_range.0..=spec.albedo_range.1),
                ];
                Sphere {
                    center: Vector3::new(x, y, z),
                    radius,
                    albedo,
                }
            })
            .collect();
        let centroid = if spheres.is_empty() {
            Vector3::new(0.0, 0.5 * p.max(0.2), 0.0)
        } else {
            spheres.iter().map(|s| s.center).sum::<Vector3<f64>>() / spheres.len() as f64
        };
        let bound = spheres
            .iter()
            .map(|s| (s.center - centroid).norm() + s.radius)
            .fold(0.3_f64, f64::max);
        let geometry = SceneGeometry {
            spheres,
            ground_plane: spec.ground_plane,
            plane_albedo: spec.plane_albedo,
            background: spec.background_color,
            toward_light: -Vector3::from(spec.light_direction).normalize(),
        };
        Ok((geometry, centroid, bound))
    }
}

/// Cameras on the rig, evenly spread in azimuth with seeded elevations,
/// all looking at the scene centroid.
fn rig_cameras(
    spec: &SyntheticSceneSpec,
    centroid: Vector3<f64>,
    bound: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xca3e2a));
    let rig = &spec.camera_rig;
    let (e0, e1) = rig.elevation_range;
    let mut cameras = Vec::with_capacity(rig.count);
    for i in 0..rig.count {
        let azimuth =
            std::f64::consts::TAU * i as f64 / rig.count as f64 + rng.gen_range(-0.05..0.05);
        let elevation = if e1 > e0 { rng.gen_range(e0..=e1) } else { e0 };
        let eye = centroid
            + rig.radius
                * Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.sin(),
                    elevation.cos() * azimuth.sin(),
                );
        let pose = Pose::look_at(eye, centroid, Vector3::new(0.0, 1.0, 0.0))?;
        // Frame the bounding sphere with a small margin.
        let half_angle = (bound * 1.35 / rig.radius).min(0.95).asin();
        let focal = 0.5 * width.min(height) as f64 / half_angle.tan();
        let intrinsics = Intrinsics::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        )?;
        cameras.push(Camera::new(pose, intrinsics, width, height)?);
    }
    Ok(cameras)
}

/// Renders every rig view with the analytic tracer. Deterministic for a
/// fixed spec; pixel values are quantized to the 8-bit grid so that scene
/// files reproduce the render bit-exactly.
pub fn generate_synthetic_scene(
    spec: &SyntheticSceneSpec,
    width: usize,
    height: usize,
) -> Result<SceneBundle> {
    if width == 0 || height == 0 {
        return Err(Error::argument("image dimensions must be at least 1x1"));
    }
    let (geometry, centroid, bound) = SceneGeometry::from_spec(spec)?;
    let cameras = rig_cameras(spec, centroid, bound, width, height)?;
    let near = (spec.camera_rig.radius - bound - 0.3).max(0.05);
    let far = spec.camera_rig.radius
        + bound
        + 0.3
        + if spec.ground_plane {
            spec.camera_rig.radius
        } else {
            0.0
        };
    let images = cameras
        .iter()
        .map(|camera| render_view(&geometry, camera, near, far))
        .collect::<Result<Vec<_>>>()?;
    SceneBundle::new(spec.name.clone(), images, cameras, near, far)
}

/// Traces one camera view and quantizes to the 8-bit grid.
pub fn render_view(
    geometry: &SceneGeometry,
    camera: &Camera,
    near: f64,
    far: f64,
) -> Result<Image> {
    let mut pixels = Vec::with_capacity(camera.width * camera.height);
    for v in 0..camera.height {
        for u in 0..camera.width {
            pixels.push((u as f64, v as f64));
        }
    }
    let rays = camera.generate_rays(&pixels, near, far)?;
    let mut image = Image::new(camera.width, camera.height);
    for (i, ray) in rays.iter().enumerate() {
        let rgb = geometry.shade_ray(ray);
        let d = image.data_mut();
        for c in 0..3 {
            d[i * 3 + c] = quantize(rgb[c]);
        }
    }
    Ok(image)
}

/// Rounds to the nearest representable 8-bit value in [0,1].
pub fn quantize(v: f64) -> f64 {
    (v * 255.0).round().clamp(0.0, 255.0) / 255.0
}
