//! Command-line driver: data generation, training, rendering, evaluation,
//! ablation, and gradient checking.
//!
//! Configuration is a JSON file merged with dotted-path flag overrides
//! (`--train.lr_encoder 0.001`); the effective config is echoed next to
//! every command's outputs for provenance. Exit codes: 0 success, 1
//! usage/config error, 2 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::render::{Model, ModelConfig};
use crate::scene::{generate_synthetic_scene, SceneBundle, SyntheticSceneSpec};
use crate::training::{
    evaluate_model, load_checkpoint, lr_at, run_ablation, run_gradcheck, AblationConfig,
    TrainConfig, TrainState,
};
use crate::{derive_seed, Error, Result};

/// Scene-set generation settings: how many scenes, their resolution, and
/// the per-scene template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub width: usize,
    pub height: usize,
    /// Draw each scene's background color from its seed.
    pub vary_background: bool,
    /// Draw each scene's light direction from its seed.
    pub vary_light: bool,
    pub scene: SyntheticSceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 8,
            eval_scenes: 2,
            width: 64,
            height: 64,
            vary_background: true,
            vary_light: true,
            scene: SyntheticSceneSpec::default(),
        }
    }
}

/// Top-level configuration for every command; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

/// Bundled desk-scale benchmark preset, reachable as `--config benchmark`.
pub const BENCHMARK_PRESET: &str = include_str!("../presets/benchmark.json");

/// Applies `--a.b.c value` pairs onto the JSON config tree.
fn apply_overrides(root: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    if overrides.len() % 2 != 0 {
        return Err(Error::config(format!(
            "override list must be --path value pairs, got odd count {}",
            overrides.len()
        )));
    }
    for pair in overrides.chunks_exact(2) {
        let key = pair[0]
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("override key {} must start with --", pair[0])))?;
        let parsed: serde_json::Value = serde_json::from_str(&pair[1])
            .unwrap_or_else(|_| serde_json::Value::String(pair[1].clone()));
        let mut node = &mut *root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = node
                .as_object_mut()
                .ok_or_else(|| Error::config(format!("override path {key} hits a non-object")))?;
            if i + 1 == parts.len() {
                map.insert(part.to_string(), parsed.clone());
                break;
            }
            node = map
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Loads a config file (or the `benchmark` preset, or defaults when absent)
/// and applies overrides; unknown keys anywhere are a config error.
pub fn load_config(path: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some("benchmark") => BENCHMARK_PRESET.to_string(),
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {p}: {e}")))?,
        None => serde_json::to_string(&RunConfig::default())?,
    };
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("config parse: {e}")))?;
    apply_overrides(&mut value, overrides)?;
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::config(format!("config: {e}")))?;
    Ok(config)
}

fn echo_config(config: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(())
}

/// Per-scene spec derived from the template: seeded name/seed and, when
/// enabled, seeded background color and light direction.
pub fn scene_spec_for(data: &DataConfig, kind: &str, index: usize) -> SyntheticSceneSpec {
    let kind_tag = match kind {
        "train" => 0x7a417,
        _ => 0xe7a1,
    };
    let mut spec = data.scene.clone();
    spec.seed = derive_seed(data.scene.seed, kind_tag + index as u64);
    spec.name = format!("{kind}_{index:03}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xc0104));
    if data.vary_background {
        spec.background_color = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
    }
    if data.vary_light {
        let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let down = rng.gen_range(0.6..1.4);
        spec.light_direction = [azimuth.cos() * 0.6, -down, azimuth.sin() * 0.6];
    }
    spec
}

/// Generates every scene of the set into `out`.
pub fn generate_dataset(data: &DataConfig, out: &Path) -> Result<Vec<(String, PathBuf)>> {
    fs::create_dir_all(out)?;
    let mut listing = Vec::new();
    for (kind, count) in [("train", data.train_scenes), ("eval", data.eval_scenes)] {
        for i in 0..count {
            let spec = scene_spec_for(data, kind, i);
            let bundle = generate_synthetic_scene(&spec, data.width, data.height)?;
            let dir = out.join(&spec.name);
            bundle.save(&dir)?;
            listing.push((spec.name.clone(), dir));
        }
    }
    Ok(listing)
}

/// Loads all scene directories under `dir` whose names start with `prefix`,
/// sorted by name.
pub fn load_scene_set(dir: &Path, prefix: &str) -> Result<Vec<SceneBundle>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("scene.json").is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| prefix.is_empty() || n.starts_with(prefix))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::argument(format!(
            "no scene directories with prefix '{prefix}' under {}",
            dir.display()
        )));
    }
    names
        .iter()
        .map(|n| SceneBundle::load(&dir.join(n)))
        .collect()
}

#[derive(Parser)]
#[command(name = "caesar", version, about = "Few-shot neural renderer with calibrated scene semantics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene sets with analytic ground truth.
    GenData {
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the template's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train a model on generated scenes.
    Train {
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the training seed and the model init seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint (its embedded configs take precedence).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Render views of a scene from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated view indices, or `all`.
        #[arg(long, default_value = "0")]
        views: String,
        #[arg(long, default_value_t = 3)]
        n_refs: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// Mean PSNR/SSIM over scenes for each reference count.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1,2,3")]
        n_refs: String,
        /// Scene-directory prefix to evaluate (empty = all).
        #[arg(long, default_value = "eval")]
        prefix: String,
        #[arg(long, default_value_t = 2)]
        views_per_scene: usize,
    },
    /// Train and evaluate the ablation variant grid.
    Ablate {
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Comma-separated check names, or `all`.
        #[arg(long, default_value = "all")]
        scope: String,
    },
}

/// Entry point for the binary; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            overrides,
        } => cmd_gen_data(config.as_deref(), &out, seed, &overrides),
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            overrides,
        } => cmd_train(config.as_deref(), &data, &out, seed, resume.as_deref(), &overrides),
        Command::Render {
            checkpoint,
            scene,
            out,
            views,
            n_refs,
            batch,
        } => cmd_render(&checkpoint, &scene, &out, &views, n_refs, batch),
        Command::Eval {
            checkpoint,
            data,
            out,
            n_refs,
            prefix,
            views_per_scene,
        } => cmd_eval(&checkpoint, &data, &out, &n_refs, &prefix, views_per_scene),
        Command::Ablate {
            config,
            data,
            out,
            overrides,
        } => cmd_ablate(config.as_deref(), &data, &out, &overrides),
        Command::Gradcheck { scope } => cmd_gradcheck(&scope),
    }
}

fn cmd_gen_data(
    config: Option<&str>,
    out: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<()> {
    let mut cfg = load_config(config, overrides)?;
    if let Some(seed) = seed {
        cfg.data.scene.seed = seed;
    }
    echo_config(&cfg, out)?;
    let listing = generate_dataset(&cfg.data, out)?;
    println!(
        "generated {} scenes at {}x{}:",
        listing.len(),
        cfg.data.width,
        cfg.data.height
    );
    for (name, dir) in listing {
        println!("  {name} -> {}", dir.display());
    }
    Ok(())
}

fn cmd_train(
    config: Option<&str>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let scenes = load_scene_set(data, "train")?;
    let mut state = match resume {
        Some(path) => {
            println!("resuming from {} (checkpoint configs take precedence)", path.display());
            let mut loaded = load_checkpoint(path)?;
            // `--train.*` overrides (typically a larger iteration budget)
            // still apply on top of the checkpoint's config.
            let train_overrides: Vec<String> = overrides
                .chunks_exact(2)
                .filter(|pair| pair[0].starts_with("--train."))
                .flat_map(|pair| {
                    [
                        pair[0].replacen("--train.", "--", 1),
                        pair[1].clone(),
                    ]
                })
                .collect();
            if !train_overrides.is_empty() {
                let mut value = serde_json::to_value(&loaded.train)?;
                apply_overrides(&mut value, &train_overrides)?;
                loaded.train = serde_json::from_value(value)
                    .map_err(|e| Error::config(format!("train overrides: {e}")))?;
            }
            TrainState::from_checkpoint(loaded)?
        }
        None => {
            let mut cfg = load_config(config, overrides)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
                cfg.model.encoder.seed = derive_seed(seed, 0x5eed);
            }
            let model = Model::init(cfg.model)?;
            TrainState::new(model, cfg.train.clone())?
        }
    };
    fs::create_dir_all(out)?;
    echo_config(
        &RunConfig {
            model: state.model.config,
            train: state.config.clone(),
            ..RunConfig::default()
        },
        out,
    )?;

    let log_path = out.join("loss_log.csv");
    let mut log = String::new();
    if !log_path.exists() {
        log.push_str("iteration,mse,central,perceptual,total,lr_encoder,lr_rest\n");
    }
    let mut last_checkpoint: Option<PathBuf> = None;
    let total = state.config.iterations as u64;
    let checkpoint_every = state.config.checkpoint_every.max(1) as u64;
    while state.iteration < total {
        let iteration = state.iteration;
        let (lr_encoder, lr_rest) = lr_at(iteration, &state.config);
        let step = state.train_step(&scenes);
        let breakdown = match step {
            Ok(b) => b,
            Err(e) => {
                fs::write(&log_path, &log)?;
                match &last_checkpoint {
                    Some(p) => eprintln!("numeric failure; last good checkpoint: {}", p.display()),
                    None => eprintln!("numeric failure before the first checkpoint"),
                }
                return Err(e);
            }
        };
        log.push_str(&format!(
            "{iteration},{:.17e},{:.17e},{:.17e},{:.17e},{lr_encoder:.12e},{lr_rest:.12e}\n",
            breakdown.mse, breakdown.central, breakdown.perceptual, breakdown.total
        ));
        if state.iteration % checkpoint_every == 0 || state.iteration == total {
            let path = out.join(format!("checkpoint_{:06}.ckpt", state.iteration));
            state.save(&path)?;
            last_checkpoint = Some(path);
        }
    }
    let final_path = out.join("checkpoint_final.ckpt");
    state.save(&final_path)?;
    let mut existing = fs::read_to_string(&log_path).unwrap_or_default();
    existing.push_str(&log);
    fs::write(&log_path, existing)?;
    println!(
        "trained to iteration {}; final checkpoint: {}",
        state.iteration,
        final_path.display()
    );
    Ok(())
}

fn cmd_render(
    checkpoint: &Path,
    scene_dir: &Path,
    out: &Path,
    views: &str,
    n_refs: usize,
    batch: usize,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let model = state.model;
    let scene = SceneBundle::load(scene_dir)?;
    let view_ids: Vec<usize> = if views == "all" {
        (0..scene.cameras.len()).collect()
    } else {
        views
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad view index '{v}'")))
            })
            .collect::<Result<_>>()?
    };
    fs::create_dir_all(out)?;
    for &idx in &view_ids {
        if idx >= scene.cameras.len() {
            return Err(Error::config(format!(
                "view {idx} out of range (scene has {})",
                scene.cameras.len()
            )));
        }
        let target = &scene.cameras[idx];
        let ref_idx = crate::scene::select_reference_views(target, &scene.cameras, n_refs, true)?;
        let refs: Vec<(&crate::geometry::Camera, &crate::scene::Image)> = ref_idx
            .iter()
            .map(|&i| (&scene.cameras[i], &scene.images[i]))
            .collect();
        let start = Instant::now();
        let prepared = model.prepare(target, &refs, scene.near, scene.far)?;
        let image = model.render_image(
            &prepared,
            target,
            batch,
            crate::geometry::SampleMode::Midpoint,
        )?;
        let elapsed = start.elapsed().as_secs_f64();
        let path = out.join(format!("render_{idx:03}.ppm"));
        crate::scene::write_ppm(&image, &path)?;
        let quality = crate::training::psnr(&image, &scene.images[idx])?;
        println!(
            "view {idx}: {:.2}s, psnr {quality:.2} dB vs ground truth, refs {ref_idx:?} -> {}",
            elapsed,
            path.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    n_refs: &str,
    prefix: &str,
    views_per_scene: usize,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let scenes = load_scene_set(data, prefix)?;
    let counts: Vec<usize> = n_refs
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad reference count '{v}'")))
        })
        .collect::<Result<_>>()?;
    let mut table = serde_json::Map::new();
    for &n in &counts {
        let stats = evaluate_model(&state.model, &scenes, n, views_per_scene, 256)?;
        println!(
            "n_refs {n}: psnr {:.2} dB, ssim {:.4} over {} views",
            stats.psnr, stats.ssim, stats.views
        );
        table.insert(n.to_string(), serde_json::to_value(stats)?);
    }
    let json = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "scenes": scenes.len(),
        "views_per_scene": views_per_scene,
        "n_refs": table,
    });
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, serde_json::to_string_pretty(&json)?)?;
    println!("metrics written to {}", out.display());
    Ok(())
}

fn cmd_ablate(
    config: Option<&str>,
    data: &Path,
    out: &Path,
    overrides: &[String],
) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    if load_scene_set(data, "train").is_err() {
        println!("no scenes under {}; generating the data set", data.display());
        generate_dataset(&cfg.data, data)?;
    }
    let train_scenes = load_scene_set(data, "train")?;
    let eval_scenes = load_scene_set(data, "eval")?;
    echo_config(&cfg, out)?;
    let table = run_ablation(
        &train_scenes,
        &eval_scenes,
        &cfg.model,
        &cfg.train,
        &cfg.ablation,
    )?;
    for row in &table.rows {
        println!(
            "{:<16} psnr {:6.2} dB  ssim {:.4}",
            row.variant, row.psnr, row.ssim
        );
    }
    fs::create_dir_all(out)?;
    let path = out.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&table)?)?;
    println!("table written to {}", path.display());
    Ok(())
}

fn cmd_gradcheck(scope: &str) -> Result<()> {
    let report = run_gradcheck(Some(scope))?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Error::numeric("gradient checks failed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields_and_reject_unknown_keys() {
        let cfg = load_config(
            None,
            &[
                "--train.lr_encoder".into(),
                "0.01".into(),
                "--data.width".into(),
                "32".into(),
                "--model.semantic.calibrate".into(),
                "false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr_encoder, 0.01);
        assert_eq!(cfg.data.width, 32);
        assert!(!cfg.model.semantic.calibrate);

        let err = load_config(None, &["--train.typo_key".into(), "1".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn benchmark_preset_parses_and_matches_documented_shape() {
        let cfg = load_config(Some("benchmark"), &[]).unwrap();
        assert_eq!(cfg.data.train_scenes, 8);
        assert_eq!(cfg.data.eval_scenes, 2);
        assert_eq!(cfg.data.width, 64);
        assert_eq!(cfg.model.stack.stages, 4);
        assert_eq!(cfg.model.stack.points_per_ray, 32);
        assert_eq!(cfg.train.iterations, 5000);
        cfg.model.validate().unwrap();
        cfg.train.validate().unwrap();
    }

    #[test]
    fn scene_specs_differ_across_indices_but_not_runs() {
        let data = DataConfig::default();
        let a = scene_spec_for(&data, "train", 0);
        let b = scene_spec_for(&data, "train", 1);
        let a2 = scene_spec_for(&data, "train", 0);
        assert_ne!(a.seed, b.seed);
        assert_ne!(a.background_color, b.background_color);
        assert_eq!(a, a2);
    }
}
