//! Single-stage baseline: one velocity model mapping prompt encodings
//! directly to acoustic latents, sized to the two-stage parameter budget.

use std::path::Path;

use rand::Rng as _;

use flowplan_core::rng::{mix, seeded};
use flowplan_core::{
    train_velocity, Batch, Checkpoint, SamplerConfig, Tensor, TrainConfig, TrainStats, VelocityConfig, VelocityModel,
};
use flowplan_pipeline::{prompt_conditions, sample_rows, AcousticVae, PipelineError};
use flowplan_world::{Dataset, PromptSpec, COND_DIM};

pub const BASELINE_KIND: &str = "baseline";
/// Allowed relative gap between the baseline and two-stage parameter counts.
pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub model: VelocityModel,
}

/// Width whose parameter count is closest to `budget` for the given state,
/// condition and depth.
pub fn matched_width(state_dim: usize, cond_dim: usize, depth: usize, budget: usize) -> usize {
    let count = |width| {
        VelocityConfig {
            state_dim,
            cond_dim,
            width,
            depth,
        }
        .num_params()
    };
    let mut w = 1;
    while count(w + 1) <= budget {
        w += 1;
    }
    if budget.abs_diff(count(w + 1)) < budget.abs_diff(count(w)) {
        w + 1
    } else {
        w
    }
}

impl BaselineModel {
    pub fn num_params(&self) -> usize {
        self.model.params.num_scalars()
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<(), PipelineError> {
        let arch = serde_json::to_value(self.model.config()).expect("config serializes");
        Checkpoint::new(BASELINE_KIND, seed, arch, &self.model.params).save(dir, &self.model.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (ckpt, params) = Checkpoint::load(dir)?;
        ckpt.expect_kind(BASELINE_KIND)?;
        let config: VelocityConfig = serde_json::from_value(ckpt.architecture.clone())
            .map_err(|e| PipelineError::Config(format!("baseline architecture: {e}")))?;
        Ok(Self {
            model: VelocityModel::from_params(config, params)?,
        })
    }
}

/// Train the baseline on VAE latents with condition dropout from `train`.
pub fn train_baseline(
    ds: &Dataset,
    vae: &AcousticVae,
    width: usize,
    depth: usize,
    train: &TrainConfig,
) -> Result<(BaselineModel, TrainStats), PipelineError> {
    let latents = vae.encode_dataset(ds)?;
    let state_dim = vae.latent_dim();
    let mut model = VelocityModel::new(
        VelocityConfig {
            state_dim,
            cond_dim: COND_DIM,
            width,
            depth,
        },
        &mut seeded(mix(train.seed, 40)),
    )?;
    let stats = train_velocity(&mut model, train, |rng, b| {
        let mut x1 = Vec::with_capacity(b * state_dim);
        let mut cond = Vec::with_capacity(b * COND_DIM);
        for _ in 0..b {
            let i = rng.random_range(0..ds.len());
            x1.extend_from_slice(latents.row(i));
            cond.extend_from_slice(ds.condition(i));
        }
        Batch {
            x1: Tensor::from_parts(&[b, state_dim], x1).expect("batch shape"),
            cond: Tensor::from_parts(&[b, COND_DIM], cond).expect("batch shape"),
        }
    })?;
    model.params.quantize_to_f32();
    Ok((BaselineModel { model }, stats))
}

/// Prompt to spectrogram in one flow.
pub fn baseline_generate(
    baseline: &BaselineModel,
    vae: &AcousticVae,
    prompts: &[PromptSpec],
    sampler: &SamplerConfig,
) -> Result<Vec<Tensor>, PipelineError> {
    let conds = prompt_conditions(prompts)?;
    let z = sample_rows(&baseline.model, &conds, baseline.model.config().state_dim, sampler)?;
    vae.decode_batch(&z)
}
