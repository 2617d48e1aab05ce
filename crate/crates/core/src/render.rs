//! The stacked view/ray attention backbone: per-point fusion of projected
//! reference features, semantic augmentation, self-attention along each
//! ray, and a pooled RGB head. No volume rendering and no density output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caesar::{calibrate, CalibratedSemantic, RefinementBlocks};
use crate::encoder::{Encoder, EncoderConfig};
use crate::geometry::{compose_relative_rotation, Camera, Ray, SampleMode, SampledPoint};
use crate::graph::{ParamGroup, ParamId, ParamStore, Shape, Tape, Tensor, Var};
use crate::nn::{positional_encoding, Activation, Attention, LayerNorm, Linear, Mlp};
use crate::scene::Image;
use crate::{derive_seed, Error, Result};

/// Stack geometry of the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    /// Number of view/ray transformer stages (K).
    pub stages: usize,
    pub heads: usize,
    /// Pixel feature width (must match the encoder).
    pub pixel_dim: usize,
    /// Semantic width (must match the encoder).
    pub semantic_dim: usize,
    /// Samples per ray (M).
    pub points_per_ray: usize,
    pub ff_width: usize,
    /// Frequencies for position/direction/depth encodings.
    pub posenc_freqs: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            stages: 4,
            heads: 4,
            pixel_dim: 64,
            semantic_dim: 96,
            points_per_ray: 32,
            ff_width: 128,
            posenc_freqs: 6,
        }
    }
}

/// Reading of the refinement attention; only the joint form (one attention
/// over all reference tokens) is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    #[default]
    Joint,
}

/// Switches for the scene-level semantic path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticConfig {
    pub enabled: bool,
    pub calibrate: bool,
    pub refine: bool,
    pub refine_heads: usize,
    pub refine_mode: RefineMode,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            enabled: true,
            calibrate: true,
            refine: true,
            refine_heads: 4,
            refine_mode: RefineMode::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stack: StackConfig,
    pub semantic: SemanticConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder
            .validate(self.semantic.enabled && self.semantic.calibrate)?;
        let s = &self.stack;
        if s.stages == 0 || s.points_per_ray == 0 || s.ff_width == 0 || s.posenc_freqs == 0 {
            return Err(Error::config("stack dims must all be at least 1"));
        }
        if s.pixel_dim != self.encoder.pixel_feature_dim {
            return Err(Error::config(format!(
                "stack pixel dim {} != encoder pixel dim {}",
                s.pixel_dim, self.encoder.pixel_feature_dim
            )));
        }
        if s.semantic_dim != self.encoder.semantic_dim {
            return Err(Error::config(format!(
                "stack semantic dim {} != encoder semantic dim {}",
                s.semantic_dim, self.encoder.semantic_dim
            )));
        }
        if s.heads == 0 || s.pixel_dim % s.heads != 0 {
            return Err(Error::config("head count must divide the pixel dim"));
        }
        if self.semantic.enabled
            && self.semantic.refine
            && (self.semantic.refine_heads == 0
                || s.semantic_dim % self.semantic.refine_heads != 0)
        {
            return Err(Error::config(
                "refinement head count must divide the semantic dim",
            ));
        }
        Ok(())
    }
}

/// RGB predicted for one ray, each channel squashed into [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPrediction {
    pub rgb: [f64; 3],
}

/// One view/ray transformer stage.
#[derive(Debug, Clone)]
pub struct StageBlock {
    pub view_attn: Attention,
    pub augment: Option<Mlp>,
    pub depth_proj: Linear,
    pub ray_ln1: LayerNorm,
    pub ray_attn: Attention,
    pub ray_ln2: LayerNorm,
    pub ray_ffn: Mlp,
}

impl StageBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        stack: &StackConfig,
        with_semantic: bool,
        rng: &mut ChaCha8Rng,
    ) -> StageBlock {
        let l = stack.pixel_dim;
        let c = stack.semantic_dim;
        let pe = 2 * 3 * stack.posenc_freqs * 2; // position + direction encodings
        let group = ParamGroup::Renderer;
        StageBlock {
            view_attn: Attention::init(
                store,
                &format!("{name}.view"),
                l + pe,
                l,
                l,
                stack.heads,
                group,
                rng,
            ),
            augment: with_semantic.then(|| {
                Mlp::init(
                    store,
                    &format!("{name}.augment"),
                    l + c,
                    l + c,
                    l,
                    Activation::Relu,
                    group,
                    rng,
                )
            }),
            depth_proj: Linear::init(
                store,
                &format!("{name}.depth_proj"),
                2 * stack.posenc_freqs,
                l,
                group,
                rng,
            ),
            ray_ln1: LayerNorm::init(store, &format!("{name}.ray_ln1"), l, group),
            ray_attn: Attention::init(
                store,
                &format!("{name}.ray"),
                l,
                l,
                l,
                stack.heads,
                group,
                rng,
            ),
            ray_ln2: LayerNorm::init(store, &format!("{name}.ray_ln2"), l, group),
            ray_ffn: Mlp::init(
                store,
                &format!("{name}.ray_ffn"),
                l,
                stack.ff_width,
                l,
                Activation::Silu,
                group,
                rng,
            ),
        }
    }

    /// Fuses the per-view features of one point: masked attention with the
    /// query built from the current token and the point encoding.
    pub fn view_transform(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query_in: Var,
        keys: Var,
        values: Var,
        mask: Vec<bool>,
    ) -> Var {
        let q = self.view_attn.wq.forward(tape, store, query_in);
        let attended = tape.mha(q, keys, values, self.view_attn.heads, Some(mask));
        self.view_attn.wo.forward(tape, store, attended)
    }

    /// Concatenates the semantic vector onto each token and projects back
    /// to the pixel width with the two-layer MLP.
    pub fn augment_with_semantic(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        semantic: Var,
    ) -> Var {
        let augment = self.augment.as_ref().expect("semantic path disabled");
        let rows = tape.value(tokens).shape().rows();
        let rep = tape.repeat_rows(semantic, rows);
        let joined = tape.concat_cols(&[tokens, rep]);
        augment.forward(tape, store, joined)
    }

    /// Pre-norm self-attention plus feed-forward along the ray; depth
    /// encoding is injected before attention.
    pub fn ray_transform(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        depth_enc: Var,
    ) -> Var {
        let dp = self.depth_proj.forward(tape, store, depth_enc);
        let x = tape.add(tokens, dp);
        let h = self.ray_ln1.forward(tape, store, x);
        let attended = self.ray_attn.forward(tape, store, h, h, None);
        let x = tape.add(x, attended);
        let h = self.ray_ln2.forward(tape, store, x);
        let ff = self.ray_ffn.forward(tape, store, h);
        tape.add(x, ff)
    }
}

/// Learned attention pooling over ray tokens followed by an affine head
/// and logistic squashing.
#[derive(Debug, Clone)]
pub struct RgbHead {
    pub pool_query: ParamId,
    pub affine: Linear,
}

impl RgbHead {
    fn init(store: &mut ParamStore, stack: &StackConfig, rng: &mut ChaCha8Rng) -> RgbHead {
        RgbHead {
            pool_query: store.add_uniform(
                "head.pool_query",
                Shape::d1(stack.pixel_dim),
                stack.pixel_dim,
                ParamGroup::Renderer,
                rng,
            ),
            affine: Linear::init(
                store,
                "head.affine",
                stack.pixel_dim,
                3,
                ParamGroup::Renderer,
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Var {
        let l = tape.value(tokens).shape().cols();
        let q = tape.param(store, self.pool_query);
        let q = tape.reshape(q, Shape::d2(l, 1));
        let scores = tape.matmul(tokens, q);
        let scores = tape.affine(scores, 1.0 / (l as f64).sqrt(), 0.0);
        let scores = tape.transpose(scores);
        let weights = tape.softmax_rows(scores);
        let pooled = tape.matmul(weights, tokens);
        let rgb = self.affine.forward(tape, store, pooled);
        tape.sigmoid(rgb)
    }
}

/// Geometry needed to project points into one reference view.
#[derive(Debug, Clone)]
pub struct RefGeometry {
    pub camera: Camera,
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl RefGeometry {
    fn feature_coords(&self, u: f64, v: f64) -> (f64, f64, bool) {
        let x = u / self.stride as f64;
        let y = v / self.stride as f64;
        let valid = x >= 0.0
            && y >= 0.0
            && x <= (self.grid_w - 1) as f64
            && y <= (self.grid_h - 1) as f64;
        (x, y, valid)
    }
}

/// Tape handles for the per-ray leaves a caller provides.
pub(crate) struct RayTapeVars {
    pub fmaps: Vec<Var>,
    /// One `[1, C]` var per stage; empty when the semantic path is off.
    pub semantics: Vec<Var>,
}

/// Optional instrumentation of a single-ray forward pass.
#[derive(Debug, Default, Clone)]
pub struct RenderProbe {
    /// Semantic vector consumed by each stage.
    pub per_stage_semantics: Vec<Vec<f64>>,
    /// Points whose projections missed every reference view.
    pub fallback_points: usize,
}

/// Everything precomputed for rendering rays of one target view.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub ref_geoms: Vec<RefGeometry>,
    pub fmap_values: Vec<Tensor>,
    /// Per-stage semantic vectors; empty when the semantic path is off.
    pub semantic_stages: Vec<Vec<f64>>,
    /// Raw per-view semantics `S_n`.
    pub raw_semantics: Vec<Vec<f64>>,
    /// Calibrated per-view semantics and their mean (when enabled).
    pub calibrated: Option<CalibratedSemantic>,
    pub near: f64,
    pub far: f64,
    pub scene_scale: f64,
}

/// The full renderer: encoder, transformer stack, refinement chain, and
/// RGB head over one shared parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub stages: Vec<StageBlock>,
    pub refine: RefinementBlocks,
    pub head: RgbHead,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::init(&mut params, config.encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.encoder.seed, 0x3e4de3));
        let stages = (0..config.stack.stages)
            .map(|k| {
                StageBlock::init(
                    &mut params,
                    &format!("stage{k}"),
                    &config.stack,
                    config.semantic.enabled,
                    &mut rng,
                )
            })
            .collect();
        let refine = if config.semantic.enabled && config.semantic.refine {
            RefinementBlocks::init(
                &mut params,
                "refine",
                config.stack.semantic_dim,
                config.semantic.refine_heads,
                config.stack.stages,
                ParamGroup::Renderer,
                &mut rng,
            )
        } else {
            RefinementBlocks {
                blocks: Vec::new(),
                dim: config.stack.semantic_dim,
            }
        };
        let head = RgbHead::init(&mut params, &config.stack, &mut rng);
        Ok(Model {
            config,
            params,
            encoder,
            stages,
            refine,
            head,
        })
    }

    /// Encodes the reference views and runs the semantic pipeline for one
    /// target camera.
    pub fn prepare(
        &self,
        target: &Camera,
        references: &[(&Camera, &Image)],
        near: f64,
        far: f64,
    ) -> Result<PreparedScene> {
        if references.is_empty() {
            return Err(Error::argument("rendering needs at least one reference"));
        }
        let mut ref_geoms = Vec::with_capacity(references.len());
        let mut fmap_values = Vec::with_capacity(references.len());
        let mut raw_semantics = Vec::with_capacity(references.len());
        for (camera, image) in references {
            let (fmap, semantic) = self.encoder.encode(&self.params, image)?;
            ref_geoms.push(RefGeometry {
                camera: **camera,
                stride: fmap.stride,
                grid_w: fmap.grid_width(),
                grid_h: fmap.grid_height(),
            });
            fmap_values.push(fmap.grid);
            raw_semantics.push(semantic.values);
        }
        let (semantic_stages, calibrated) = if self.config.semantic.enabled {
            let per_view = if self.config.semantic.calibrate {
                let mut out = Vec::with_capacity(references.len());
                for ((camera, _), semantic) in references.iter().zip(&raw_semantics) {
                    let rel = compose_relative_rotation(&target.pose, &camera.pose)?;
                    out.push(calibrate(semantic, &rel)?);
                }
                out
            } else {
                raw_semantics.clone()
            };
            let calibrated = CalibratedSemantic::new(per_view)?;
            let stages = self.semantic_schedule(calibrated.aggregate(), &raw_semantics)?;
            (stages, Some(calibrated))
        } else {
            (Vec::new(), None)
        };
        Ok(PreparedScene {
            ref_geoms,
            fmap_values,
            semantic_stages,
            raw_semantics,
            calibrated,
            near,
            far,
            scene_scale: far,
        })
    }

    /// Per-stage semantic vectors from the aggregate: the refinement chain
    /// when enabled, the constant aggregate otherwise.
    fn semantic_schedule(
        &self,
        aggregate: &[f64],
        raw_semantics: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let stages = self.config.stack.stages;
        if !(self.config.semantic.enabled && self.config.semantic.refine) {
            return Ok(vec![aggregate.to_vec(); stages]);
        }
        let c = self.config.stack.semantic_dim;
        let mut tape = Tape::new(false);
        let initial = tape.leaf(Tensor::matrix(1, c, aggregate.to_vec()));
        let originals = tape.leaf(Tensor::matrix(
            raw_semantics.len(),
            c,
            raw_semantics.iter().flatten().copied().collect(),
        ));
        let vars = self
            .refine
            .forward_chain(&mut tape, &self.params, initial, originals, stages);
        Ok(vars.into_iter().map(|v| tape.value(v).to_vec()).collect())
    }

    /// Records the transformer stack for one ray on a tape. The caller
    /// provides leaf vars for the reference feature maps and per-stage
    /// semantics so gradients can be routed across tapes.
    pub(crate) fn render_ray_graph(
        &self,
        tape: &mut Tape,
        points: &[SampledPoint],
        refs: &[RefGeometry],
        vars: &RayTapeVars,
        near: f64,
        far: f64,
        scene_scale: f64,
        mut probe: Option<&mut RenderProbe>,
    ) -> Result<Var> {
        let m = points.len();
        let n = refs.len();
        let l = self.config.stack.pixel_dim;
        let freqs = self.config.stack.posenc_freqs;
        if m == 0 || n == 0 {
            return Err(Error::argument("render needs points and references"));
        }

        // Project every point into every reference view and gather features.
        let mut valid = vec![vec![false; n]; m];
        let mut gathered = Vec::with_capacity(n);
        for (vi, geom) in refs.iter().enumerate() {
            let mut pts = Vec::with_capacity(m);
            for (pi, point) in points.iter().enumerate() {
                let proj = geom.camera.project(&point.position);
                let (x, y, ok) = if proj.valid {
                    geom.feature_coords(proj.u, proj.v)
                } else {
                    (0.0, 0.0, false)
                };
                valid[pi][vi] = ok;
                pts.push((x, y, ok));
            }
            gathered.push(tape.bilinear_gather(vars.fmaps[vi], pts));
        }

        let counts: Vec<usize> = valid.iter().map(|row| row.iter().filter(|v| **v).count()).collect();
        if let Some(probe) = probe.as_deref_mut() {
            probe.fallback_points += counts.iter().filter(|c| **c == 0).count();
        }

        // Initial token: mean of the valid per-view features (zero if none).
        let mut sum = gathered[0];
        for g in &gathered[1..] {
            sum = tape.add(sum, *g);
        }
        let inv_count: Vec<f64> = counts
            .iter()
            .flat_map(|&c| {
                let w = if c == 0 { 0.0 } else { 1.0 / c as f64 };
                std::iter::repeat(w).take(l)
            })
            .collect();
        let inv_count = tape.leaf(Tensor::matrix(m, l, inv_count));
        let mut tokens = tape.mul(sum, inv_count);

        // Constant encodings: position/direction for queries, depth for the
        // ray transformer, and the row mask for all-invalid fallbacks.
        let span = (far - near).max(1e-9);
        let mut point_enc = Vec::with_capacity(m * 4 * 3 * freqs);
        let mut depth_enc = Vec::with_capacity(m * 2 * freqs);
        for point in points {
            let p = point.position / scene_scale;
            point_enc.extend(positional_encoding(&[p.x, p.y, p.z], freqs));
            point_enc.extend(positional_encoding(
                &[
                    point.ray_direction.x,
                    point.ray_direction.y,
                    point.ray_direction.z,
                ],
                freqs,
            ));
            depth_enc.extend(positional_encoding(&[(point.t - near) / span], freqs));
        }
        let point_enc = tape.leaf(Tensor::matrix(m, 4 * 3 * freqs, point_enc));
        let depth_enc = tape.leaf(Tensor::matrix(m, 2 * freqs, depth_enc));
        let row_mask: Vec<f64> = counts
            .iter()
            .flat_map(|&c| std::iter::repeat(if c == 0 { 0.0 } else { 1.0 }).take(l))
            .collect();
        let row_mask = tape.leaf(Tensor::matrix(m, l, row_mask));

        // View-major stack of gathered features, rows v*m + p.
        let kv_base = tape.concat_rows(&gathered);

        // View-major key mask matching the kv_base row layout.
        let mut flat_mask = vec![false; n * m];
        for (pi, row) in valid.iter().enumerate() {
            for (vi, &ok) in row.iter().enumerate() {
                flat_mask[vi * m + pi] = ok;
            }
        }

        for (k, stage) in self.stages.iter().enumerate() {
            let keys_all = stage.view_attn.wk.forward(tape, &self.params, kv_base);
            let values_all = stage.view_attn.wv.forward(tape, &self.params, kv_base);
            let query_in = tape.concat_cols(&[tokens, point_enc]);
            let queries = stage.view_attn.wq.forward(tape, &self.params, query_in);
            let fused = tape.grouped_mha(
                queries,
                keys_all,
                values_all,
                stage.view_attn.heads,
                flat_mask.clone(),
            );
            let fused = stage.view_attn.wo.forward(tape, &self.params, fused);
            let fused = tape.mul(fused, row_mask);

            let augmented = if self.config.semantic.enabled {
                let semantic = vars.semantics[k];
                if let Some(probe) = probe.as_deref_mut() {
                    probe
                        .per_stage_semantics
                        .push(tape.value(semantic).to_vec());
                }
                stage.augment_with_semantic(tape, &self.params, fused, semantic)
            } else {
                fused
            };

            tokens = stage.ray_transform(tape, &self.params, augmented, depth_enc);
            tape.value(tokens)
                .ensure_finite(&format!("render stage {k}"))?;
        }

        Ok(self.head.forward(tape, &self.params, tokens))
    }

    /// Renders one ray in inference mode.
    pub fn render_ray(
        &self,
        prepared: &PreparedScene,
        ray: &Ray,
        mode: SampleMode,
    ) -> Result<RayPrediction> {
        self.render_ray_probed(prepared, ray, mode, None)
    }

    pub fn render_ray_probed(
        &self,
        prepared: &PreparedScene,
        ray: &Ray,
        mode: SampleMode,
        probe: Option<&mut RenderProbe>,
    ) -> Result<RayPrediction> {
        let points = ray.sample_points(self.config.stack.points_per_ray, mode)?;
        let mut tape = Tape::new(false);
        let vars = RayTapeVars {
            fmaps: prepared
                .fmap_values
                .iter()
                .map(|t| tape.leaf(t.clone()))
                .collect(),
            semantics: prepared
                .semantic_stages
                .iter()
                .map(|s| tape.leaf(Tensor::matrix(1, s.len(), s.clone())))
                .collect(),
        };
        let rgb = self.render_ray_graph(
            &mut tape,
            &points,
            &prepared.ref_geoms,
            &vars,
            prepared.near,
            prepared.far,
            prepared.scene_scale,
            probe,
        )?;
        let v = tape.value(rgb).data();
        Ok(RayPrediction {
            rgb: [v[0], v[1], v[2]],
        })
    }

    /// Renders a full image, tiling rays into `batch_size` chunks. The
    /// output does not depend on the batch size; rays are pure functions.
    pub fn render_image(
        &self,
        prepared: &PreparedScene,
        target: &Camera,
        batch_size: usize,
        mode: SampleMode,
    ) -> Result<Image> {
        if batch_size == 0 {
            return Err(Error::argument("batch size must be at least 1"));
        }
        let mut pixels = Vec::with_capacity(target.width * target.height);
        for v in 0..target.height {
            for u in 0..target.width {
                pixels.push((u as f64, v as f64));
            }
        }
        let rays = target.generate_rays(&pixels, prepared.near, prepared.far)?;
        let results: Vec<Result<RayPrediction>> = rays
            .par_chunks(batch_size)
            .flat_map_iter(|chunk| {
                chunk
                    .iter()
                    .map(|ray| self.render_ray(prepared, ray, mode))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut image = Image::new(target.width, target.height);
        for (i, res) in results.into_iter().enumerate() {
            let pred = res?;
            let d = image.data_mut();
            d[i * 3..i * 3 + 3].copy_from_slice(&pred.rgb);
        }
        Ok(image)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Vector3;
    use crate::scene::{generate_synthetic_scene, CameraRig, SyntheticSceneSpec};

    pub(crate) fn tiny_model_config(semantic: SemanticConfig) -> ModelConfig {
        let semantic = SemanticConfig {
            refine_heads: 2,
            ..semantic
        };
        ModelConfig {
            encoder: EncoderConfig {
                pixel_feature_dim: 8,
                semantic_dim: 6,
                downsample_stages: 2,
                base_channels: 2,
                seed: 11,
            },
            stack: StackConfig {
                stages: 2,
                heads: 2,
                pixel_dim: 8,
                semantic_dim: 6,
                points_per_ray: 4,
                ff_width: 16,
                posenc_freqs: 2,
            },
            semantic,
        }
    }

    fn small_scene(seed: u64, views: usize) -> crate::scene::SceneBundle {
        let spec = SyntheticSceneSpec {
            seed,
            name: "render-test".into(),
            sphere_count: 2,
            placement_extent: 0.6,
            radius_range: (0.3, 0.5),
            albedo_range: (0.2, 0.9),
            ground_plane: false,
            plane_albedo: [0.5; 3],
            background_color: [0.1, 0.2, 0.3],
            light_direction: [-0.3, -1.0, -0.2],
            camera_rig: CameraRig {
                radius: 3.0,
                elevation_range: (0.4, 0.9),
                count: views,
            },
        };
        generate_synthetic_scene(&spec, 24, 18).unwrap()
    }

    fn center_ray(scene: &crate::scene::SceneBundle, cam: usize) -> Ray {
        let camera = &scene.cameras[cam];
        camera
            .generate_rays(
                &[(camera.width as f64 / 2.0, camera.height as f64 / 2.0)],
                scene.near,
                scene.far,
            )
            .unwrap()[0]
    }

    #[test]
    fn rgb_stays_in_unit_interval_for_random_parameters() {
        let scene = small_scene(31, 3);
        for seed in 0..3 {
            let mut config = tiny_model_config(SemanticConfig::default());
            config.encoder.seed = seed;
            let model = Model::init(config).unwrap();
            let prepared = model
                .prepare(
                    &scene.cameras[0],
                    &[(&scene.cameras[1], &scene.images[1]), (&scene.cameras[2], &scene.images[2])],
                    scene.near,
                    scene.far,
                )
                .unwrap();
            let pred = model
                .render_ray(&prepared, &center_ray(&scene, 0), SampleMode::Midpoint)
                .unwrap();
            for c in pred.rgb {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn reference_permutation_leaves_output_unchanged() {
        let scene = small_scene(32, 4);
        let model = Model::init(tiny_model_config(SemanticConfig::default())).unwrap();
        let refs_a = [
            (&scene.cameras[1], &scene.images[1]),
            (&scene.cameras[2], &scene.images[2]),
            (&scene.cameras[3], &scene.images[3]),
        ];
        let refs_b = [refs_a[2], refs_a[0], refs_a[1]];
        let ray = center_ray(&scene, 0);
        let pa = model
            .prepare(&scene.cameras[0], &refs_a, scene.near, scene.far)
            .unwrap();
        let pb = model
            .prepare(&scene.cameras[0], &refs_b, scene.near, scene.far)
            .unwrap();
        let a = model.render_ray(&pa, &ray, SampleMode::Midpoint).unwrap();
        let b = model.render_ray(&pb, &ray, SampleMode::Midpoint).unwrap();
        for c in 0..3 {
            assert!((a.rgb[c] - b.rgb[c]).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn duplicated_reference_equals_single_reference() {
        let scene = small_scene(33, 2);
        let model = Model::init(tiny_model_config(SemanticConfig::default())).unwrap();
        let ray = center_ray(&scene, 0);
        let single = model
            .prepare(
                &scene.cameras[0],
                &[(&scene.cameras[1], &scene.images[1])],
                scene.near,
                scene.far,
            )
            .unwrap();
        let doubled = model
            .prepare(
                &scene.cameras[0],
                &[
                    (&scene.cameras[1], &scene.images[1]),
                    (&scene.cameras[1], &scene.images[1]),
                ],
                scene.near,
                scene.far,
            )
            .unwrap();
        let a = model.render_ray(&single, &ray, SampleMode::Midpoint).unwrap();
        let b = model.render_ray(&doubled, &ray, SampleMode::Midpoint).unwrap();
        for c in 0..3 {
            assert!((a.rgb[c] - b.rgb[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rays_outside_all_frusta_use_the_zero_fallback() {
        let scene = small_scene(34, 2);
        let model = Model::init(tiny_model_config(SemanticConfig::default())).unwrap();
        let prepared = model
            .prepare(
                &scene.cameras[0],
                &[(&scene.cameras[1], &scene.images[1])],
                scene.near,
                scene.far,
            )
            .unwrap();
        // A ray fired from far outside the rig pointing away from the scene.
        let ray = Ray::new(
            Vector3::new(50.0, 50.0, 50.0),
            Vector3::new(0.0, 1.0, 0.0),
            0.5,
            2.0,
        )
        .unwrap();
        let mut probe = RenderProbe::default();
        let pred = model
            .render_ray_probed(&prepared, &ray, SampleMode::Midpoint, Some(&mut probe))
            .unwrap();
        assert_eq!(probe.fallback_points, model.config.stack.points_per_ray);
        assert!(pred.rgb.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn semantic_wiring_constant_without_refinement_and_varying_with() {
        let scene = small_scene(35, 3);
        let ray = center_ray(&scene, 0);
        for (refine, expect_constant) in [(false, true), (true, false)] {
            let model = Model::init(tiny_model_config(SemanticConfig {
                refine,
                ..SemanticConfig::default()
            }))
            .unwrap();
            let prepared = model
                .prepare(
                    &scene.cameras[0],
                    &[
                        (&scene.cameras[1], &scene.images[1]),
                        (&scene.cameras[2], &scene.images[2]),
                    ],
                    scene.near,
                    scene.far,
                )
                .unwrap();
            let mut probe = RenderProbe::default();
            model
                .render_ray_probed(&prepared, &ray, SampleMode::Midpoint, Some(&mut probe))
                .unwrap();
            assert_eq!(probe.per_stage_semantics.len(), 2);
            let same = probe.per_stage_semantics[0] == probe.per_stage_semantics[1];
            assert_eq!(same, expect_constant);
        }
    }

    #[test]
    fn disabled_semantics_match_identity_augment_construction() {
        let scene = small_scene(36, 2);
        let ray = center_ray(&scene, 0);

        // Semantic path on, but the augment MLPs pinned to an exact
        // pass-through of the first L coordinates and the semantic input
        // forced to zero via the encoder FC.
        let mut with_semantic = Model::init(tiny_model_config(SemanticConfig {
            enabled: true,
            calibrate: false,
            refine: false,
            ..SemanticConfig::default()
        }))
        .unwrap();
        // Baseline without the semantic path, sharing every other weight.
        let mut baseline = Model::init(tiny_model_config(SemanticConfig {
            enabled: false,
            ..SemanticConfig::default()
        }))
        .unwrap();
        let names: Vec<String> = baseline
            .params
            .iter()
            .map(|(_, e)| e.name.clone())
            .collect();
        for name in names {
            let src = with_semantic.params.find(&name).unwrap();
            let dst = baseline.params.find(&name).unwrap();
            *baseline.params.value_mut(dst) = with_semantic.params.value(src).clone();
        }
        let l = with_semantic.config.stack.pixel_dim;
        let c = with_semantic.config.stack.semantic_dim;
        let shift = 30.0;
        for k in 0..with_semantic.config.stack.stages {
            let mlp = with_semantic.stages[k].augment.unwrap();
            let store = &mut with_semantic.params;
            let w1 = store.value_mut(mlp.l1.w);
            for (i, v) in w1.data_mut().iter_mut().enumerate() {
                let (r, col) = (i / (l + c), i % (l + c));
                *v = if r == col { 1.0 } else { 0.0 };
            }
            for v in store.value_mut(mlp.l1.b).data_mut() {
                *v = shift;
            }
            let w2 = store.value_mut(mlp.l2.w);
            for (i, v) in w2.data_mut().iter_mut().enumerate() {
                let (r, col) = (i / l, i % l);
                *v = if r == col { 1.0 } else { 0.0 };
            }
            for v in store.value_mut(mlp.l2.b).data_mut() {
                *v = -shift;
            }
        }
        for name in ["encoder.fc.w", "encoder.fc.b"] {
            let pid = with_semantic.params.find(name).unwrap();
            for v in with_semantic.params.value_mut(pid).data_mut() {
                *v = 0.0;
            }
        }

        let refs = [(&scene.cameras[1], &scene.images[1])];
        let pa = baseline
            .prepare(&scene.cameras[0], &refs, scene.near, scene.far)
            .unwrap();
        let pb = with_semantic
            .prepare(&scene.cameras[0], &refs, scene.near, scene.far)
            .unwrap();
        let a = baseline.render_ray(&pa, &ray, SampleMode::Midpoint).unwrap();
        let b = with_semantic
            .render_ray(&pb, &ray, SampleMode::Midpoint)
            .unwrap();
        for ch in 0..3 {
            assert!(
                (a.rgb[ch] - b.rgb[ch]).abs() < 1e-9,
                "{:?} vs {:?}",
                a.rgb,
                b.rgb
            );
        }
    }

    #[test]
    fn render_image_is_batch_size_invariant() {
        let scene = small_scene(37, 2);
        let mut config = tiny_model_config(SemanticConfig::default());
        config.stack.points_per_ray = 3;
        let model = Model::init(config).unwrap();
        let mut target = scene.cameras[0];
        target.width = 6;
        target.height = 5;
        let prepared = model
            .prepare(
                &target,
                &[(&scene.cameras[1], &scene.images[1])],
                scene.near,
                scene.far,
            )
            .unwrap();
        let a = model
            .render_image(&prepared, &target, 1, SampleMode::Midpoint)
            .unwrap();
        let b = model
            .render_image(&prepared, &target, 64, SampleMode::Midpoint)
            .unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.width, 6);
        assert_eq!(a.height, 5);
    }
}
