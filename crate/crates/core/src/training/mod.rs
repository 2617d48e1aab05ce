//! Training loop, optimizer schedule, losses, metrics, checkpoints,
//! gradient checking, and the ablation harness.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod losses;
pub mod metrics;

pub use ablation::{run_ablation, AblationConfig, AblationTable};
pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState};
pub use gradcheck::{run_suite as run_gradcheck, GradCheckReport};
pub use losses::{
    mse_grad, mse_loss, perceptual_loss, perceptual_loss_and_grad, total_loss, FeatureNet,
    LossBreakdown,
};
pub use metrics::{psnr, ssim};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caesar::calibrate_graph;
use crate::geometry::{compose_relative_rotation, SampleMode, SampledPoint};
use crate::graph::{GradStore, Precision, Tape, Tensor, Var};
use crate::render::{Model, RayTapeVars, RefGeometry};
use crate::scene::{select_reference_views, SceneBundle};
use crate::{derive_seed, Error, Result};

/// Optimization hyperparameters. Desk-scale defaults; paper-scale values
/// (4096 rays, 100k-iteration halving) stay reachable through the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_iteration: usize,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub halve_every: u64,
    pub lambda_central: f64,
    pub lambda_perceptual: f64,
    pub ref_views_min: usize,
    pub ref_views_max: usize,
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint_every: usize,
    pub stratified_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            rays_per_iteration: 512,
            lr_encoder: 1e-3,
            lr_rest: 5e-4,
            halve_every: 2000,
            lambda_central: 1.0,
            lambda_perceptual: 1e-3,
            ref_views_min: 2,
            ref_views_max: 4,
            seed: 0,
            precision: Precision::Double,
            checkpoint_every: 1000,
            stratified_sampling: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encoder > 0.0 && self.lr_rest > 0.0) && self.iterations > 0 {
            // Zero rates are permitted (no-op updates), negative are not.
            if self.lr_encoder < 0.0 || self.lr_rest < 0.0 {
                return Err(Error::config("learning rates must be non-negative"));
            }
        }
        if self.lambda_central < 0.0 || self.lambda_perceptual < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.rays_per_iteration == 0 {
            return Err(Error::config("rays per iteration must be at least 1"));
        }
        if self.ref_views_min == 0 || self.ref_views_max < self.ref_views_min {
            return Err(Error::config("reference view range is empty"));
        }
        if self.halve_every == 0 {
            return Err(Error::config("halve_every must be at least 1"));
        }
        Ok(())
    }
}

/// Step-dependent learning rates: base halved every `halve_every`
/// iterations, per group.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> (f64, f64) {
    let factor = 0.5_f64.powi((iteration / config.halve_every) as i32);
    (config.lr_encoder * factor, config.lr_rest * factor)
}

/// Mutable training state; deterministic given the seed.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub iteration: u64,
    pub config: TrainConfig,
    pub rng_seed: u64,
    rng: ChaCha8Rng,
    feature_net: FeatureNet,
}

/// Fixed chunk count for the deterministic parallel reduce over rays.
const RAY_CHUNKS: usize = 32;

impl TrainState {
    pub fn new(model: Model, config: TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let adam = Adam::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let feature_net = FeatureNet::new(derive_seed(config.seed, 0xfea7));
        Ok(TrainState {
            model,
            adam,
            iteration: 0,
            rng_seed: config.seed,
            rng,
            config,
            feature_net,
        })
    }

    pub fn from_checkpoint(state: CheckpointState) -> Result<TrainState> {
        state.train.validate()?;
        let feature_net = FeatureNet::new(derive_seed(state.train.seed, 0xfea7));
        Ok(TrainState {
            model: state.model,
            adam: state.adam,
            iteration: state.iteration,
            rng_seed: state.rng_seed,
            rng: state.rng,
            config: state.train,
            feature_net,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.model,
            &self.config,
            &self.adam,
            self.iteration,
            self.rng_seed,
            &self.rng,
        )
    }

    /// One optimization step: sample rays from one scene, render, apply the
    /// weighted losses, and take an Adam step with the two-group schedule.
    pub fn train_step(&mut self, scenes: &[SceneBundle]) -> Result<LossBreakdown> {
        if scenes.is_empty() {
            return Err(Error::argument("training needs at least one scene"));
        }
        let precision = self.config.precision;
        let scene = &scenes[self.rng.gen_range(0..scenes.len())];
        let n_views = scene.cameras.len();
        let target_idx = self.rng.gen_range(0..n_views);
        let target = scene.cameras[target_idx];
        let target_image = &scene.images[target_idx];

        let desired_refs = self
            .rng
            .gen_range(self.config.ref_views_min..=self.config.ref_views_max);
        let distinct = scene
            .cameras
            .iter()
            .filter(|c| !c.approx_eq(&target, 1e-9))
            .count();
        if distinct == 0 {
            return Err(Error::argument(format!(
                "scene {} has no reference views distinct from the target",
                scene.name
            )));
        }
        let n_refs = desired_refs.min(distinct);
        let ref_idx = select_reference_views(&target, &scene.cameras, n_refs, true)?;

        // Distinct training pixels via a partial Fisher-Yates shuffle.
        let total_px = target.width * target.height;
        let count = self.config.rays_per_iteration.min(total_px);
        let mut indices: Vec<usize> = (0..total_px).collect();
        for i in 0..count {
            let j = self.rng.gen_range(i..total_px);
            indices.swap(i, j);
        }
        indices.truncate(count);
        let positions: Vec<(usize, usize)> = indices
            .iter()
            .map(|&p| (p % target.width, p / target.width))
            .collect();
        let pixels: Vec<(f64, f64)> = positions
            .iter()
            .map(|&(u, v)| (u as f64, v as f64))
            .collect();
        let truth: Vec<[f64; 3]> = positions
            .iter()
            .map(|&(u, v)| target_image.pixel(u, v))
            .collect();
        let rays = target.generate_rays(&pixels, scene.near, scene.far)?;
        let ray_seed = self.rng.gen::<u64>();

        // Encoder plus semantic pipeline, recorded once per step.
        let mut t0 = Tape::with_precision(true, precision);
        let mut fmap_vars = Vec::with_capacity(n_refs);
        let mut fmap_values = Vec::with_capacity(n_refs);
        let mut sem_vars = Vec::with_capacity(n_refs);
        let mut ref_geoms = Vec::with_capacity(n_refs);
        let stride = self.model.config.encoder.stride();
        for &i in &ref_idx {
            let leaf = crate::encoder::Encoder::image_leaf(&mut t0, &scene.images[i]);
            let vars = self.model.encoder.encode_graph(&mut t0, &self.model.params, leaf);
            let fmap_value = t0.value(vars.fmap).clone();
            ref_geoms.push(RefGeometry {
                camera: scene.cameras[i],
                stride,
                grid_w: fmap_value.shape().dim(2),
                grid_h: fmap_value.shape().dim(1),
            });
            fmap_vars.push(vars.fmap);
            fmap_values.push(fmap_value);
            sem_vars.push(vars.semantic);
        }

        let semantic_on = self.model.config.semantic.enabled;
        let stages = self.model.config.stack.stages;
        let c_dim = self.model.config.stack.semantic_dim;
        let (stage_vars, stage_values, central_var, central_value) = if semantic_on {
            let calibrated: Vec<Var> = if self.model.config.semantic.calibrate {
                let mut out = Vec::with_capacity(n_refs);
                for (slot, &i) in ref_idx.iter().enumerate() {
                    let rel =
                        compose_relative_rotation(&target.pose, &scene.cameras[i].pose)?;
                    out.push(calibrate_graph(&mut t0, sem_vars[slot], &rel));
                }
                out
            } else {
                sem_vars.clone()
            };
            let stack = t0.concat_rows(&calibrated);
            let aggregate = t0.mean_rows(stack);
            let rep = t0.repeat_rows(aggregate, n_refs);
            let diff = t0.sub(stack, rep);
            let absdiff = t0.abs(diff);
            let sum = t0.sum_all(absdiff);
            let central = t0.affine(sum, 1.0 / n_refs as f64, 0.0);
            let originals = t0.concat_rows(&sem_vars);
            let stage_vars = if self.model.config.semantic.refine {
                self.model.refine.forward_chain(
                    &mut t0,
                    &self.model.params,
                    aggregate,
                    originals,
                    stages,
                )
            } else {
                vec![aggregate; stages]
            };
            let stage_values: Vec<Vec<f64>> =
                stage_vars.iter().map(|v| t0.value(*v).to_vec()).collect();
            let central_value = t0.value(central).item();
            (stage_vars, stage_values, Some(central), central_value)
        } else {
            (Vec::new(), Vec::new(), None, 0.0)
        };

        // Per-ray sample points, seeded per ray for reproducibility.
        let m = self.model.config.stack.points_per_ray;
        let all_points: Vec<Vec<SampledPoint>> = rays
            .iter()
            .enumerate()
            .map(|(i, ray)| {
                let mode = if self.config.stratified_sampling {
                    SampleMode::Stratified {
                        seed: derive_seed(ray_seed, i as u64),
                    }
                } else {
                    SampleMode::Midpoint
                };
                ray.sample_points(m, mode)
            })
            .collect::<Result<_>>()?;

        let chunk_size = count.div_ceil(RAY_CHUNKS).max(1);
        let ranges: Vec<(usize, usize)> = (0..count)
            .step_by(chunk_size)
            .map(|s| (s, (s + chunk_size).min(count)))
            .collect();
        let model = &self.model;
        let near = scene.near;
        let far = scene.far;

        // Phase A: recorded forward per ray; tapes are retained so the
        // backward pass can run once the perceptual seed is known.
        struct RayWork {
            tape: Tape,
            rgb: Var,
            vars: RayTapeVars,
        }
        let mut chunk_work: Vec<Vec<RayWork>> = ranges
            .par_iter()
            .map(|&(start, end)| {
                let mut out = Vec::with_capacity(end - start);
                for i in start..end {
                    let mut tape = Tape::with_precision(true, precision);
                    let vars = RayTapeVars {
                        fmaps: fmap_values.iter().map(|t| tape.input(t.clone())).collect(),
                        semantics: stage_values
                            .iter()
                            .map(|s| tape.input(Tensor::matrix(1, c_dim, s.clone())))
                            .collect(),
                    };
                    let rgb = model.render_ray_graph(
                        &mut tape,
                        &all_points[i],
                        &ref_geoms,
                        &vars,
                        near,
                        far,
                        far,
                        None,
                    )?;
                    out.push(RayWork { tape, rgb, vars });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<[f64; 3]> = chunk_work
            .iter()
            .flatten()
            .map(|w| {
                let v = w.tape.value(w.rgb).data();
                [v[0], v[1], v[2]]
            })
            .collect();

        let mse = mse_loss(&preds, &truth)?;
        let dmse = mse_grad(&preds, &truth);
        let (perceptual_value, dperc) =
            perceptual_loss_and_grad(&preds, &positions, target_image, &self.feature_net)?;
        let l1 = self.config.lambda_central;
        let l2 = self.config.lambda_perceptual;
        let seeds: Vec<[f64; 3]> = dmse
            .iter()
            .zip(&dperc)
            .map(|(a, b)| {
                [
                    a[0] + l2 * b[0],
                    a[1] + l2 * b[1],
                    a[2] + l2 * b[2],
                ]
            })
            .collect();

        // Phase B: backward over the retained tapes, reduced in chunk order
        // for determinism.
        struct ChunkGrads {
            params: GradStore,
            fmaps: Vec<Vec<f64>>,
            sems: Vec<Vec<f64>>,
        }
        let chunk_grads: Vec<ChunkGrads> = chunk_work
            .par_iter_mut()
            .zip(&ranges)
            .map(|(work, &(start, _))| {
                let mut params = GradStore::new(&model.params);
                let mut fmaps: Vec<Vec<f64>> =
                    fmap_values.iter().map(|t| vec![0.0; t.len()]).collect();
                let mut sems: Vec<Vec<f64>> = vec![vec![0.0; c_dim]; stage_values.len()];
                for (offset, ray_work) in work.drain(..).enumerate() {
                    let RayWork { tape, rgb, vars } = ray_work;
                    let node_grads =
                        tape.backward(&[(rgb, seeds[start + offset].to_vec())], &mut params);
                    for (slot, var) in vars.fmaps.iter().enumerate() {
                        if let Some(g) = node_grads.get(*var) {
                            for (acc, &v) in fmaps[slot].iter_mut().zip(g) {
                                *acc += v;
                            }
                        }
                    }
                    for (slot, var) in vars.semantics.iter().enumerate() {
                        if let Some(g) = node_grads.get(*var) {
                            for (acc, &v) in sems[slot].iter_mut().zip(g) {
                                *acc += v;
                            }
                        }
                    }
                }
                Ok(ChunkGrads {
                    params,
                    fmaps,
                    sems,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = GradStore::new(&model.params);
        let mut fmap_seeds: Vec<Vec<f64>> =
            fmap_values.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut sem_seeds: Vec<Vec<f64>> = vec![vec![0.0; c_dim]; stage_values.len()];
        for chunk in &chunk_grads {
            grads.merge(&chunk.params);
            for (acc, add) in fmap_seeds.iter_mut().zip(&chunk.fmaps) {
                for (a, &b) in acc.iter_mut().zip(add) {
                    *a += b;
                }
            }
            for (acc, add) in sem_seeds.iter_mut().zip(&chunk.sems) {
                for (a, &b) in acc.iter_mut().zip(add) {
                    *a += b;
                }
            }
        }

        // Close the chain through the encoder/semantic tape.
        let mut t0_seeds: Vec<(Var, Vec<f64>)> = Vec::new();
        for (var, seed) in fmap_vars.iter().zip(fmap_seeds) {
            t0_seeds.push((*var, seed));
        }
        for (var, seed) in stage_vars.iter().zip(sem_seeds) {
            t0_seeds.push((*var, seed));
        }
        if let Some(central) = central_var {
            t0_seeds.push((central, vec![l1]));
        }
        t0.backward(&t0_seeds, &mut grads);

        let breakdown = total_loss(mse, central_value, perceptual_value, l1, l2);
        if !breakdown.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at iteration {} on scene {} (mse {:.3e}, central {:.3e}, perceptual {:.3e})",
                self.iteration, scene.name, breakdown.mse, breakdown.central, breakdown.perceptual
            )));
        }

        let (lr_encoder, lr_rest) = lr_at(self.iteration, &self.config);
        self.adam
            .step(&mut self.model.params, &grads, lr_encoder, lr_rest);
        self.iteration += 1;
        Ok(breakdown)
    }
}

/// Mean held-out metrics of a model over the given scenes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalStats {
    pub psnr: f64,
    pub ssim: f64,
    pub views: usize,
}

pub fn evaluate_model(
    model: &Model,
    scenes: &[SceneBundle],
    n_refs: usize,
    views_per_scene: usize,
    batch: usize,
) -> Result<EvalStats> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut views = 0;
    for scene in scenes {
        for target_idx in 0..scene.cameras.len().min(views_per_scene) {
            let target = &scene.cameras[target_idx];
            let ref_idx = select_reference_views(target, &scene.cameras, n_refs, true)?;
            let refs: Vec<(&crate::geometry::Camera, &crate::scene::Image)> = ref_idx
                .iter()
                .map(|&i| (&scene.cameras[i], &scene.images[i]))
                .collect();
            let prepared = model.prepare(target, &refs, scene.near, scene.far)?;
            let rendered = model.render_image(&prepared, target, batch, SampleMode::Midpoint)?;
            psnr_sum += psnr(&rendered, &scene.images[target_idx])?;
            ssim_sum += ssim(&rendered, &scene.images[target_idx])?;
            views += 1;
        }
    }
    if views == 0 {
        return Err(Error::argument("no views evaluated"));
    }
    Ok(EvalStats {
        psnr: psnr_sum / views as f64,
        ssim: ssim_sum / views as f64,
        views,
    })
}
