//! Central-difference gradient checks (step 1e-5, double precision) for
//! every differentiable block and the full single-point pipeline.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::geometry::SampleMode;
use crate::graph::{GradStore, ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::nn::Linear;
use crate::render::{Model, ModelConfig, RayTapeVars, RefGeometry, SemanticConfig, StackConfig};
use crate::scene::{generate_synthetic_scene, CameraRig, SyntheticSceneSpec};
use crate::training::losses::{perceptual_loss_graph, FeatureNet};
use crate::{Error, Result};

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{}: max relative error {:.3e} (tolerance {:.1e}) ... {}",
                    e.name,
                    e.max_rel_err,
                    e.tolerance,
                    if e.passed { "ok" } else { "FAILED" }
                )
            })
            .collect()
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Sweeps every entry of every listed parameter with central differences.
fn fd_over_params(
    store: &ParamStore,
    analytic: &GradStore,
    eval: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let mut max = 0.0_f64;
    for (pid, entry) in store.iter() {
        let zero = vec![0.0; entry.value.len()];
        let grad = analytic.get(pid).unwrap_or(&zero);
        for i in 0..entry.value.len() {
            let mut p = store.clone();
            p.value_mut(pid).data_mut()[i] += FD_STEP;
            let plus = eval(&p);
            p.value_mut(pid).data_mut()[i] -= 2.0 * FD_STEP;
            let minus = eval(&p);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max = max.max(rel_err(grad[i], numeric));
        }
    }
    max
}

/// FD over a flat input vector for graphs without parameters.
fn fd_over_input(
    input: &Tensor,
    analytic: &[f64],
    eval: &dyn Fn(&Tensor) -> f64,
) -> f64 {
    let mut max = 0.0_f64;
    for i in 0..input.len() {
        let mut data = input.to_vec();
        data[i] += FD_STEP;
        let plus = eval(&Tensor::new(input.shape(), data.clone()));
        data[i] -= 2.0 * FD_STEP;
        let minus = eval(&Tensor::new(input.shape(), data));
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        max = max.max(rel_err(analytic[i], numeric));
    }
    max
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weighted_sum(tape: &mut Tape, var: Var, weights: &[f64]) -> Var {
    let w = tape.leaf(Tensor::new(tape.value(var).shape(), weights.to_vec()));
    let prod = tape.mul(var, w);
    tape.sum_all(prod)
}

fn check_linear_map() -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let lin = Linear::init(&mut store, "lin", 4, 3, ParamGroup::Renderer, &mut rng);
    let x = Tensor::matrix(2, 4, rand_vec(8, &mut rng));
    let w = rand_vec(6, &mut rng);
    let run = |store: &ParamStore, tape: &mut Tape| {
        let xv = tape.leaf(x.clone());
        let y = lin.forward(tape, store, xv);
        weighted_sum(tape, y, &w)
    };
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let loss = run(&store, &mut tape);
    tape.backward(&[(loss, vec![1.0])], &mut grads);
    let max = fd_over_params(&store, &grads, &|s| {
        let mut t = Tape::new(false);
        let l = run(s, &mut t);
        t.value(l).item()
    });
    entry("linear_map", max, 1e-6)
}

fn check_calibrate() -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rotation = crate::testing::random_rotation(&mut rng);
    let s = Tensor::vector(rand_vec(9, &mut rng));
    let w = rand_vec(9, &mut rng);
    let run = |input: &Tensor, tape: &mut Tape| -> (Var, Var) {
        let sv = tape.input(input.clone());
        let cal = crate::caesar::calibrate_graph(tape, sv, &rotation);
        let loss = weighted_sum(tape, cal, &w);
        (sv, loss)
    };
    let store = ParamStore::new();
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let (sv, loss) = run(&s, &mut tape);
    let mut node_grads = tape.backward(&[(loss, vec![1.0])], &mut grads);
    let analytic = node_grads.take(sv, 9);
    let max = fd_over_input(&s, &analytic, &|input| {
        let mut t = Tape::new(false);
        let (_, l) = run(input, &mut t);
        t.value(l).item()
    });
    entry("calibrate", max, 1e-6)
}

fn check_refine_step() -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let blocks = crate::caesar::RefinementBlocks::init(
        &mut store,
        "refine",
        6,
        2,
        3,
        ParamGroup::Renderer,
        &mut rng,
    );
    let initial = Tensor::matrix(1, 6, rand_vec(6, &mut rng));
    let originals = Tensor::matrix(2, 6, rand_vec(12, &mut rng));
    let w = rand_vec(6, &mut rng);
    let run = |store: &ParamStore, tape: &mut Tape| {
        let init = tape.leaf(initial.clone());
        let orig = tape.leaf(originals.clone());
        let chain = blocks.forward_chain(tape, store, init, orig, 3);
        weighted_sum(tape, chain[2], &w)
    };
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let loss = run(&store, &mut tape);
    tape.backward(&[(loss, vec![1.0])], &mut grads);
    let max = fd_over_params(&store, &grads, &|s| {
        let mut t = Tape::new(false);
        let l = run(s, &mut t);
        t.value(l).item()
    });
    entry("refine_step", max, 1e-4)
}

fn tiny_stack() -> StackConfig {
    StackConfig {
        stages: 1,
        heads: 2,
        pixel_dim: 6,
        semantic_dim: 6,
        points_per_ray: 3,
        ff_width: 8,
        posenc_freqs: 1,
    }
}

fn tiny_stage(seed: u64) -> (ParamStore, crate::render::StageBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stage = crate::render::StageBlock::init(&mut store, "stage", &tiny_stack(), true, &mut rng);
    (store, stage)
}

fn check_augment() -> GradCheckEntry {
    let (store, stage) = tiny_stage(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = Tensor::matrix(3, 6, rand_vec(18, &mut rng));
    let semantic = Tensor::matrix(1, 6, rand_vec(6, &mut rng));
    let w = rand_vec(18, &mut rng);
    let run = |store: &ParamStore, tape: &mut Tape| {
        let t = tape.leaf(tokens.clone());
        let s = tape.leaf(semantic.clone());
        let out = stage.augment_with_semantic(tape, store, t, s);
        weighted_sum(tape, out, &w)
    };
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let loss = run(&store, &mut tape);
    tape.backward(&[(loss, vec![1.0])], &mut grads);
    let max = fd_over_params(&store, &grads, &|s| {
        let mut t = Tape::new(false);
        let l = run(s, &mut t);
        t.value(l).item()
    });
    entry("augment_with_semantic", max, 1e-4)
}

fn check_view_transformer() -> GradCheckEntry {
    let (store, stage) = tiny_stage(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pe = 2 * 3 * 1 * 2;
    let query_in = Tensor::matrix(1, 6 + pe, rand_vec(6 + pe, &mut rng));
    let feats = Tensor::matrix(3, 6, rand_vec(18, &mut rng));
    let mask = vec![true, false, true];
    let w = rand_vec(6, &mut rng);
    let run = |store: &ParamStore, tape: &mut Tape| {
        let q = tape.leaf(query_in.clone());
        let f = tape.leaf(feats.clone());
        let keys = stage.view_attn.wk.forward(tape, store, f);
        let values = stage.view_attn.wv.forward(tape, store, f);
        let out = stage.view_transform(tape, store, q, keys, values, mask.clone());
        weighted_sum(tape, out, &w)
    };
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let loss = run(&store, &mut tape);
    tape.backward(&[(loss, vec![1.0])], &mut grads);
    let max = fd_over_params(&store, &grads, &|s| {
        let mut t = Tape::new(false);
        let l = run(s, &mut t);
        t.value(l).item()
    });
    entry("view_transformer", max, 1e-4)
}

fn check_ray_transformer() -> GradCheckEntry {
    let (store, stage) = tiny_stage(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = Tensor::matrix(3, 6, rand_vec(18, &mut rng));
    let depth = Tensor::matrix(3, 2, rand_vec(6, &mut rng));
    let w = rand_vec(18, &mut rng);
    let run = |store: &ParamStore, tape: &mut Tape| {
        let t = tape.leaf(tokens.clone());
        let d = tape.leaf(depth.clone());
        let out = stage.ray_transform(tape, store, t, d);
        weighted_sum(tape, out, &w)
    };
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let loss = run(&store, &mut tape);
    tape.backward(&[(loss, vec![1.0])], &mut grads);
    let max = fd_over_params(&store, &grads, &|s| {
        let mut t = Tape::new(false);
        let l = run(s, &mut t);
        t.value(l).item()
    });
    entry("ray_transformer", max, 1e-4)
}

fn check_perceptual() -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut image = crate::scene::Image::new(8, 6);
    for v in image.data_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let net = FeatureNet::new(11);
    let positions = vec![(1, 1), (6, 4), (3, 2)];
    let pred = Tensor::matrix(3, 3, rand_vec(9, &mut rng));
    let store = ParamStore::new();
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let pv = tape.input(pred.clone());
    let loss = perceptual_loss_graph(&mut tape, pv, &positions, &image, &net).unwrap();
    let mut node_grads = tape.backward(&[(loss, vec![1.0])], &mut grads);
    let analytic = node_grads.take(pv, 9);
    let max = fd_over_input(&pred, &analytic, &|input| {
        let mut t = Tape::new(false);
        let p = t.leaf(input.clone());
        let l = perceptual_loss_graph(&mut t, p, &positions, &image, &net).unwrap();
        t.value(l).item()
    });
    entry("perceptual_loss", max, 1e-4)
}

fn check_encoder() -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let config = EncoderConfig {
        pixel_feature_dim: 3,
        semantic_dim: 3,
        downsample_stages: 1,
        base_channels: 2,
        seed: 13,
    };
    let mut store = ParamStore::new();
    let encoder = Encoder::init(&mut store, config);
    let mut image = crate::scene::Image::new(8, 8);
    for v in image.data_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let wf = rand_vec(3 * 4 * 4, &mut rng);
    let ws = rand_vec(3, &mut rng);
    let run = |store: &ParamStore, tape: &mut Tape| {
        let leaf = Encoder::image_leaf(tape, &image);
        let vars = encoder.encode_graph(tape, store, leaf);
        let lf = weighted_sum(tape, vars.fmap, &wf);
        let ls = weighted_sum(tape, vars.semantic, &ws);
        tape.add(lf, ls)
    };
    let mut grads = GradStore::new(&store);
    let mut tape = Tape::new(true);
    let loss = run(&store, &mut tape);
    tape.backward(&[(loss, vec![1.0])], &mut grads);
    let max = fd_over_params(&store, &grads, &|s| {
        let mut t = Tape::new(false);
        let l = run(s, &mut t);
        t.value(l).item()
    });
    entry("encoder", max, 1e-4)
}

/// Full single-point pipeline: encoder, calibration, aggregation, one
/// stage, RGB head, chained across the encoder and ray tapes exactly as in
/// training.
fn check_pipeline() -> GradCheckEntry {
    let config = ModelConfig {
        encoder: EncoderConfig {
            pixel_feature_dim: 6,
            semantic_dim: 6,
            downsample_stages: 2,
            base_channels: 2,
            seed: 21,
        },
        stack: StackConfig {
            stages: 1,
            heads: 2,
            pixel_dim: 6,
            semantic_dim: 6,
            points_per_ray: 1,
            ff_width: 8,
            posenc_freqs: 1,
        },
        semantic: SemanticConfig {
            enabled: true,
            calibrate: true,
            refine: false,
            ..SemanticConfig::default()
        },
    };
    let spec = SyntheticSceneSpec {
        seed: 5,
        name: "gradcheck".into(),
        sphere_count: 1,
        placement_extent: 0.4,
        radius_range: (0.4, 0.5),
        albedo_range: (0.3, 0.9),
        ground_plane: false,
        plane_albedo: [0.5; 3],
        background_color: [0.2, 0.4, 0.6],
        light_direction: [-0.4, -1.0, -0.3],
        camera_rig: CameraRig {
            radius: 3.0,
            elevation_range: (0.5, 0.8),
            count: 2,
        },
    };
    let scene = generate_synthetic_scene(&spec, 8, 8).unwrap();
    let model = Model::init(config).unwrap();
    let target = scene.cameras[0];
    let ray = target
        .generate_rays(&[(4.0, 4.0)], scene.near, scene.far)
        .unwrap()[0];
    let points = ray.sample_points(1, SampleMode::Midpoint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = rand_vec(3, &mut rng);

    let eval = |model: &Model| -> f64 {
        let prepared = model
            .prepare(
                &target,
                &[(&scene.cameras[1], &scene.images[1])],
                scene.near,
                scene.far,
            )
            .unwrap();
        let pred = model
            .render_ray(&prepared, &ray, SampleMode::Midpoint)
            .unwrap();
        pred.rgb.iter().zip(&w).map(|(a, b)| a * b).sum()
    };

    // Analytic gradients, chained over the encoder tape and the ray tape.
    let mut grads = GradStore::new(&model.params);
    {
        let mut t0 = Tape::new(true);
        let leaf = Encoder::image_leaf(&mut t0, &scene.images[1]);
        let enc = model.encoder.encode_graph(&mut t0, &model.params, leaf);
        let rel = crate::geometry::compose_relative_rotation(
            &target.pose,
            &scene.cameras[1].pose,
        )
        .unwrap();
        let calibrated = crate::caesar::calibrate_graph(&mut t0, enc.semantic, &rel);
        let aggregate = t0.mean_rows(calibrated);
        let fmap_value = t0.value(enc.fmap).clone();
        let sem_value = t0.value(aggregate).to_vec();

        let geom = RefGeometry {
            camera: scene.cameras[1],
            stride: model.config.encoder.stride(),
            grid_w: fmap_value.shape().dim(2),
            grid_h: fmap_value.shape().dim(1),
        };
        let mut tape = Tape::new(true);
        let vars = RayTapeVars {
            fmaps: vec![tape.input(fmap_value.clone())],
            semantics: vec![tape.input(Tensor::matrix(1, 6, sem_value))],
        };
        let rgb = model
            .render_ray_graph(
                &mut tape,
                &points,
                &[geom],
                &vars,
                scene.near,
                scene.far,
                scene.far,
                None,
            )
            .unwrap();
        let mut node_grads = tape.backward(&[(rgb, w.clone())], &mut grads);
        let fmap_grad = node_grads.take(vars.fmaps[0], fmap_value.len());
        let sem_grad = node_grads.take(vars.semantics[0], 6);
        t0.backward(
            &[(enc.fmap, fmap_grad), (aggregate, sem_grad)],
            &mut grads,
        );
    }

    let mut max = 0.0_f64;
    for (pid, entry) in model.params.iter() {
        let zero = vec![0.0; entry.value.len()];
        let grad = grads.get(pid).unwrap_or(&zero);
        for i in 0..entry.value.len() {
            let mut perturbed = model.clone();
            perturbed.params.value_mut(pid).data_mut()[i] += FD_STEP;
            let plus = eval(&perturbed);
            perturbed.params.value_mut(pid).data_mut()[i] -= 2.0 * FD_STEP;
            let minus = eval(&perturbed);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max = max.max(rel_err(grad[i], numeric));
        }
    }
    entry("pipeline_k1_m1_n1", max, 1e-4)
}

fn entry(name: &str, max_rel_err: f64, tolerance: f64) -> GradCheckEntry {
    GradCheckEntry {
        name: name.to_string(),
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}

/// Runs the named checks (`None` or `"all"` for everything).
pub fn run_suite(scope: Option<&str>) -> Result<GradCheckReport> {
    let all: Vec<(&str, fn() -> GradCheckEntry)> = vec![
        ("linear_map", check_linear_map),
        ("calibrate", check_calibrate),
        ("refine_step", check_refine_step),
        ("augment_with_semantic", check_augment),
        ("view_transformer", check_view_transformer),
        ("ray_transformer", check_ray_transformer),
        ("perceptual_loss", check_perceptual),
        ("encoder", check_encoder),
        ("pipeline_k1_m1_n1", check_pipeline),
    ];
    let wanted: Option<Vec<&str>> = match scope {
        None => None,
        Some("all") | Some("") => None,
        Some(list) => Some(list.split(',').map(str::trim).collect()),
    };
    let mut report = GradCheckReport::default();
    for (name, check) in all {
        if wanted.as_ref().map_or(true, |w| w.contains(&name)) {
            report.entries.push(check());
        }
    }
    if report.entries.is_empty() {
        return Err(Error::argument(format!(
            "no gradient checks match scope {scope:?}"
        )));
    }
    Ok(report)
}
