//! Scene containers, the on-disk scene format, procedural generation, and
//! reference-view selection.
//!
//! A scene directory holds `scene.json` (name, bounds, per-view intrinsics
//! and world-to-camera pose, image path) plus one binary P6 PPM per view.

mod ppm;
pub mod synth;

pub use ppm::{read_ppm, write_ppm};
pub use synth::{
    generate_synthetic_scene, quantize, CameraRig, SceneGeometry, Sphere, SyntheticSceneSpec,
};

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Intrinsics, Pose, RotationMatrix};
use crate::{Error, Result};

/// RGB image with values in [0,1], row-major `(v, u, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != width * height * 3 {
            return Err(Error::argument(format!(
                "image payload length {} does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Images, cameras, and sampling bounds for one scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub name: String,
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub near: f64,
    pub far: f64,
}

impl SceneBundle {
    pub fn new(
        name: String,
        images: Vec<Image>,
        cameras: Vec<Camera>,
        near: f64,
        far: f64,
    ) -> Result<SceneBundle> {
        if images.is_empty() {
            return Err(Error::argument("a scene needs at least one image"));
        }
        if images.len() != cameras.len() {
            return Err(Error::argument(format!(
                "{} images vs {} cameras",
                images.len(),
                cameras.len()
            )));
        }
        let (w, h) = (images[0].width, images[0].height);
        if images.iter().any(|i| i.width != w || i.height != h) {
            return Err(Error::argument("images differ in dimensions"));
        }
        for (i, (img, cam)) in images.iter().zip(&cameras).enumerate() {
            if cam.width != img.width || cam.height != img.height {
                return Err(Error::argument(format!(
                    "view {i}: camera dims {}x{} vs image {}x{}",
                    cam.width, cam.height, img.width, img.height
                )));
            }
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::argument(format!(
                "scene bounds must satisfy 0 < near < far, got [{near}, {far}]"
            )));
        }
        Ok(SceneBundle {
            name,
            images,
            cameras,
            near,
            far,
        })
    }

    /// Writes `scene.json` plus one PPM per view into `directory`.
    pub fn save(&self, directory: &Path) -> Result<()> {
        fs::create_dir_all(directory)?;
        let views = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, camera)| {
                let image = format!("view_{i:03}.ppm");
                ViewRecord {
                    image,
                    width: camera.width,
                    height: camera.height,
                    fx: camera.intrinsics.fx,
                    fy: camera.intrinsics.fy,
                    cx: camera.intrinsics.cx,
                    cy: camera.intrinsics.cy,
                    rotation: camera.pose.rotation.row_major().to_vec(),
                    translation: vec![
                        camera.pose.translation.x,
                        camera.pose.translation.y,
                        camera.pose.translation.z,
                    ],
                }
            })
            .collect();
        let manifest = SceneManifest {
            name: self.name.clone(),
            near: self.near,
            far: self.far,
            views,
        };
        fs::write(
            directory.join("scene.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        for (i, image) in self.images.iter().enumerate() {
            write_ppm(image, &directory.join(format!("view_{i:03}.ppm")))?;
        }
        Ok(())
    }

    /// Loads a scene directory, validating every manifest field.
    pub fn load(directory: &Path) -> Result<SceneBundle> {
        let manifest_path = directory.join("scene.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::format(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: SceneManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("scene.json: {e}")))?;
        let mut images = Vec::with_capacity(manifest.views.len());
        let mut cameras = Vec::with_capacity(manifest.views.len());
        for (i, view) in manifest.views.iter().enumerate() {
            let field = |name: &str| format!("views[{i}].{name}");
            if view.rotation.len() != 9 {
                return Err(Error::format(format!(
                    "{}: expected 9 entries, got {}",
                    field("rotation"),
                    view.rotation.len()
                )));
            }
            if view.translation.len() != 3 {
                return Err(Error::format(format!(
                    "{}: expected 3 entries, got {}",
                    field("translation"),
                    view.translation.len()
                )));
            }
            let rotation = RotationMatrix::from_row_slice(&view.rotation)
                .map_err(|e| Error::format(format!("{}: {e}", field("rotation"))))?;
            let translation =
                Vector3::new(view.translation[0], view.translation[1], view.translation[2]);
            let pose = Pose::new(rotation, translation)
                .map_err(|e| Error::format(format!("{}: {e}", field("translation"))))?;
            let intrinsics = Intrinsics::new(view.fx, view.fy, view.cx, view.cy)
                .map_err(|e| Error::format(format!("{}: {e}", field("fx/fy/cx/cy"))))?;
            let camera = Camera::new(pose, intrinsics, view.width, view.height)
                .map_err(|e| Error::format(format!("{}: {e}", field("width/height"))))?;
            let image_path = directory.join(&view.image);
            if !image_path.is_file() {
                return Err(Error::format(format!(
                    "{}: missing image file {}",
                    field("image"),
                    image_path.display()
                )));
            }
            let image = read_ppm(&image_path)?;
            if image.width != view.width || image.height != view.height {
                return Err(Error::format(format!(
                    "{}: file is {}x{} but manifest says {}x{}",
                    field("image"),
                    image.width,
                    image.height,
                    view.width,
                    view.height
                )));
            }
            images.push(image);
            cameras.push(camera);
        }
        SceneBundle::new(manifest.name, images, cameras, manifest.near, manifest.far)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    name: String,
    near: f64,
    far: f64,
    views: Vec<ViewRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewRecord {
    image: String,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major world-to-camera rotation.
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

/// Picks the `n` pool cameras closest to the target under
/// `angle(optical axes) + ||center delta|| / rig diameter`, ties broken by
/// lower index. `exclude_identical` skips cameras equal to the target
/// within 1e-9.
pub fn select_reference_views(
    target: &Camera,
    pool: &[Camera],
    n: usize,
    exclude_identical: bool,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::argument("must select at least one reference view"));
    }
    let mut centers: Vec<Vector3<f64>> = pool.iter().map(|c| c.center()).collect();
    centers.push(target.center());
    let mut diameter: f64 = 0.0;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            diameter = diameter.max((centers[i] - centers[j]).norm());
        }
    }
    if diameter < 1e-12 {
        diameter = 1.0;
    }
    let target_axis = target.pose.optical_axis();
    let target_center = target.center();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for (i, camera) in pool.iter().enumerate() {
        if exclude_identical && camera.approx_eq(target, 1e-9) {
            continue;
        }
        let axis = camera.pose.optical_axis();
        let angle = target_axis.dot(&axis).clamp(-1.0, 1.0).acos();
        let dist = (camera.center() - target_center).norm() / diameter;
        scored.push((angle + dist, i));
    }
    if scored.len() < n {
        return Err(Error::argument(format!(
            "requested {n} reference views but only {} candidates",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(n).map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn rig_camera(azimuth_deg: f64) -> Camera {
        let a = azimuth_deg * PI / 180.0;
        let eye = Vector3::new(3.0 * a.cos(), 1.0, 3.0 * a.sin());
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        Camera::new(pose, Intrinsics::new(40.0, 40.0, 15.5, 11.5).unwrap(), 32, 24).unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let spec = synth::tests::small_spec(21);
        let bundle = generate_synthetic_scene(&spec, 10, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let loaded = SceneBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.name, bundle.name);
        assert_eq!(loaded.near, bundle.near);
        assert_eq!(loaded.far, bundle.far);
        for (a, b) in loaded.images.iter().zip(&bundle.images) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in loaded.cameras.iter().zip(&bundle.cameras) {
            assert!(a.approx_eq(b, 1e-9));
        }
    }

    #[test]
    fn missing_image_file_is_a_format_error() {
        let spec = synth::tests::small_spec(22);
        let bundle = generate_synthetic_scene(&spec, 8, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("view_001.ppm")).unwrap();
        match SceneBundle::load(dir.path()) {
            Err(Error::Format(msg)) => assert!(msg.contains("views[1].image"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn short_rotation_is_a_format_error_naming_the_field() {
        let spec = synth::tests::small_spec(23);
        let bundle = generate_synthetic_scene(&spec, 8, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let path = dir.path().join("scene.json");
        let mut manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let rot = manifest["views"][0]["rotation"].as_array_mut().unwrap();
        rot.truncate(6);
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        match SceneBundle::load(dir.path()) {
            Err(Error::Format(msg)) => assert!(msg.contains("views[0].rotation"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn reference_selection_prefers_nearby_azimuths() {
        let pool = vec![rig_camera(0.0), rig_camera(10.0), rig_camera(90.0)];
        let target = rig_camera(5.0);
        // Hand-computed scores: views at 0° and 10° are 5° away in angle and
        // equally near in center distance; 90° loses on both terms.
        let picked = select_reference_views(&target, &pool, 2, false).unwrap();
        assert_eq!(picked.len(), 2);
        assert!(picked.contains(&0) && picked.contains(&1), "{picked:?}");

        let all = select_reference_views(&target, &pool, 3, false).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2], 2, "azimuth 90 must rank last");
    }

    #[test]
    fn identical_camera_wins_unless_excluded() {
        let pool = vec![rig_camera(40.0), rig_camera(80.0), rig_camera(120.0), rig_camera(80.0)];
        let target = pool[3];
        let picked = select_reference_views(&target, &pool, 1, false).unwrap();
        // Zero score for both copies; the tie breaks to the lower index.
        assert_eq!(picked, vec![1]);
        let picked = select_reference_views(&target, &pool, 2, true).unwrap();
        assert!(!picked.contains(&1) && !picked.contains(&3), "{picked:?}");
        assert!(select_reference_views(&target, &pool, 3, true).is_err());
    }

    #[test]
    fn selection_is_sorted_and_duplicate_free() {
        let pool: Vec<Camera> = (0..8).map(|i| rig_camera(i as f64 * 45.0)).collect();
        let target = rig_camera(17.0);
        let picked = select_reference_views(&target, &pool, 8, false).unwrap();
        let mut seen = std::collections::HashSet::new();
        assert!(picked.iter().all(|i| seen.insert(*i)));
        assert_eq!(picked.len(), 8);
    }
}
