//! Ablation harness: trains the semantic-length / refinement / calibration
//! variant grid under an identical budget and seeds, then reports held-out
//! PSNR/SSIM per variant.

use serde::{Deserialize, Serialize};

use super::{evaluate_model, TrainConfig, TrainState};
use crate::render::{Model, ModelConfig, SemanticConfig};
use crate::scene::SceneBundle;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Training iterations per variant run (identical across variants).
    pub budget_iterations: usize,
    pub seeds: Vec<u64>,
    pub n_refs: usize,
    pub eval_views_per_scene: usize,
    /// Semantic lengths swept without calibration or refinement.
    pub semantic_lengths: Vec<usize>,
    /// Length used for the refinement/calibration rows.
    pub full_length: usize,
    pub eval_batch: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            budget_iterations: 250,
            seeds: vec![0, 1, 2],
            n_refs: 1,
            eval_views_per_scene: 1,
            semantic_lengths: vec![32, 64, 96, 128],
            full_length: 96,
            eval_batch: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub semantic_length: Option<usize>,
    pub sequential_refinement: bool,
    pub calibration: bool,
    pub psnr: f64,
    pub ssim: f64,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationMetadata {
    pub budget_iterations: usize,
    pub rays_per_iteration: usize,
    pub seeds: Vec<u64>,
    pub n_refs: usize,
    pub eval_views_per_scene: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub metadata: AblationMetadata,
    pub rows: Vec<VariantRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Debug, Clone, Copy)]
struct Variant {
    semantic_length: Option<usize>,
    refine: bool,
    calibrate: bool,
}

impl Variant {
    fn name(&self) -> String {
        match self.semantic_length {
            None => "baseline".to_string(),
            Some(len) => {
                let mut name = format!("+{len}");
                if self.refine {
                    name.push_str(" Seq.");
                }
                if self.calibrate {
                    name.push_str(" Cali.");
                }
                name
            }
        }
    }

    fn model_config(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        let mut config = *base;
        config.encoder.seed = seed;
        match self.semantic_length {
            None => {
                config.semantic = SemanticConfig {
                    enabled: false,
                    calibrate: false,
                    refine: false,
                    ..config.semantic
                };
            }
            Some(len) => {
                config.encoder.semantic_dim = len;
                config.stack.semantic_dim = len;
                config.semantic = SemanticConfig {
                    enabled: true,
                    calibrate: self.calibrate,
                    refine: self.refine,
                    ..config.semantic
                };
            }
        }
        config
    }
}

/// Trains and evaluates every variant of the grid. Row order mirrors the
/// ablation axes: baseline, the semantic-length sweep, then refinement,
/// calibration, and their combination at the full length.
pub fn run_ablation(
    train_scenes: &[SceneBundle],
    eval_scenes: &[SceneBundle],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    config: &AblationConfig,
) -> Result<AblationTable> {
    if train_scenes.is_empty() || eval_scenes.is_empty() {
        return Err(Error::argument("ablation needs train and eval scenes"));
    }
    if config.seeds.is_empty() {
        return Err(Error::argument("ablation needs at least one seed"));
    }
    let mut variants = vec![Variant {
        semantic_length: None,
        refine: false,
        calibrate: false,
    }];
    for &len in &config.semantic_lengths {
        variants.push(Variant {
            semantic_length: Some(len),
            refine: false,
            calibrate: false,
        });
    }
    for (refine, calibrate) in [(true, false), (false, true), (true, true)] {
        variants.push(Variant {
            semantic_length: Some(config.full_length),
            refine,
            calibrate,
        });
    }

    let mut rows = Vec::with_capacity(variants.len());
    for variant in &variants {
        let mut per_seed = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let model = Model::init(variant.model_config(base_model, seed))?;
            let mut train = base_train.clone();
            train.seed = seed;
            train.iterations = config.budget_iterations;
            let mut state = TrainState::new(model, train)?;
            for _ in 0..config.budget_iterations {
                state.train_step(train_scenes)?;
            }
            let stats = evaluate_model(
                &state.model,
                eval_scenes,
                config.n_refs,
                config.eval_views_per_scene,
                config.eval_batch,
            )?;
            per_seed.push(SeedOutcome {
                seed,
                psnr: stats.psnr,
                ssim: stats.ssim,
            });
        }
        let n = per_seed.len() as f64;
        rows.push(VariantRow {
            variant: variant.name(),
            semantic_length: variant.semantic_length,
            sequential_refinement: variant.refine,
            calibration: variant.calibrate,
            psnr: per_seed.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: per_seed.iter().map(|s| s.ssim).sum::<f64>() / n,
            per_seed,
        });
    }

    Ok(AblationTable {
        metadata: AblationMetadata {
            budget_iterations: config.budget_iterations,
            rays_per_iteration: base_train.rays_per_iteration,
            seeds: config.seeds.clone(),
            n_refs: config.n_refs,
            eval_views_per_scene: config.eval_views_per_scene,
            train_scenes: train_scenes.len(),
            eval_scenes: eval_scenes.len(),
        },
        rows,
    })
}
