//! Semantic planner: flow matching from Gaussian noise to frozen-head
//! projections of oracle semantics, conditioned on prompt encodings and
//! sampled with classifier-free guidance.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use flowplan_core::rng::{mix, seeded};
use flowplan_core::{
    train_velocity, Batch, Checkpoint, SamplerConfig, Tensor, TrainConfig, TrainStats, VelocityConfig, VelocityModel,
};
use flowplan_world::{encode_prompt, Dataset, PromptSpec, COND_DIM};

use crate::error::PipelineError;
use crate::head::FrozenHead;
use crate::sample_rows;
use crate::synth::{bound_meta, project_dataset, synth_sample, synth_sampler, SynthesizerModel};
use crate::vae::AcousticVae;

pub const PLANNER_KIND: &str = "planner";
pub const PLAN_STEPS: usize = 50;
pub const PLAN_GUIDANCE: f64 = 3.0;
pub const PLAN_COND_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub width: usize,
    pub depth: usize,
    pub train: TrainConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 3,
            train: TrainConfig {
                cond_dropout: PLAN_COND_DROPOUT,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerModel {
    pub model: VelocityModel,
    d: usize,
    head_checksum: String,
}

impl PlannerModel {
    /// Pair a velocity model with the frozen head that defines its targets.
    pub fn bind(model: VelocityModel, head: &FrozenHead) -> Result<Self, PipelineError> {
        let c = model.config();
        if c.state_dim != head.plan_dim() || c.cond_dim != COND_DIM {
            return Err(PipelineError::Config(format!(
                "planner shape {}→{} does not fit head plan size {} and condition size {COND_DIM}",
                c.cond_dim,
                c.state_dim,
                head.plan_dim()
            )));
        }
        Ok(Self {
            model,
            d: head.d(),
            head_checksum: head.checksum().to_string(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn head_checksum(&self) -> &str {
        &self.head_checksum
    }

    /// Fail unless both models were trained against the same frozen head.
    pub fn check_compatible(&self, synth: &SynthesizerModel) -> Result<(), PipelineError> {
        if self.d != synth.d() {
            return Err(PipelineError::DimMismatch {
                planner: self.d,
                synthesizer: synth.d(),
            });
        }
        if self.head_checksum != synth.head_checksum() {
            return Err(PipelineError::ChecksumMismatch {
                planner: self.head_checksum.clone(),
                synthesizer: synth.head_checksum().to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<(), PipelineError> {
        let arch = serde_json::to_value(self.model.config()).expect("config serializes");
        Checkpoint::new(PLANNER_KIND, seed, arch, &self.model.params)
            .with_meta("d", self.d)
            .with_meta("head_checksum", self.head_checksum.clone())
            .save(dir, &self.model.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (ckpt, params) = Checkpoint::load(dir)?;
        ckpt.expect_kind(PLANNER_KIND)?;
        let (config, d, head_checksum) = bound_meta(&ckpt)?;
        Ok(Self {
            model: VelocityModel::from_params(config, params)?,
            d,
            head_checksum,
        })
    }
}

/// Prompt encodings `[B, 44]`.
pub fn prompt_conditions(prompts: &[PromptSpec]) -> Result<Tensor, PipelineError> {
    let mut data = Vec::with_capacity(prompts.len() * COND_DIM);
    for p in prompts {
        data.extend(encode_prompt(p)?.flatten());
    }
    Ok(Tensor::from_parts(&[prompts.len(), COND_DIM], data)?)
}

/// Train the planner on frozen-head targets. Conditions are replaced by
/// zeros with probability `config.train.cond_dropout`.
pub fn train_planner(
    ds: &Dataset,
    head: &FrozenHead,
    config: &PlannerConfig,
) -> Result<(PlannerModel, TrainStats), PipelineError> {
    if ds.is_empty() {
        return Err(PipelineError::Config("empty dataset".into()));
    }
    let targets = project_dataset(head, ds)?;
    let plan_dim = head.plan_dim();
    let model = VelocityModel::new(
        VelocityConfig {
            state_dim: plan_dim,
            cond_dim: COND_DIM,
            width: config.width,
            depth: config.depth,
        },
        &mut seeded(mix(config.train.seed, 30)),
    )?;
    let mut planner = PlannerModel::bind(model, head)?;
    let stats = train_velocity(&mut planner.model, &config.train, |rng, b| {
        let mut x1 = Vec::with_capacity(b * plan_dim);
        let mut cond = Vec::with_capacity(b * COND_DIM);
        for _ in 0..b {
            let i = rng.random_range(0..ds.len());
            x1.extend_from_slice(targets.row(i));
            cond.extend_from_slice(ds.condition(i));
        }
        Batch {
            x1: Tensor::from_parts(&[b, plan_dim], x1).expect("batch shape"),
            cond: Tensor::from_parts(&[b, COND_DIM], cond).expect("batch shape"),
        }
    })?;
    planner.model.params.quantize_to_f32();
    Ok((planner, stats))
}

/// The default planner sampler: 50 Euler steps at guidance 3.
pub fn plan_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps: PLAN_STEPS,
        guidance_scale: PLAN_GUIDANCE,
        seed,
    }
}

/// Sample flattened plans `[B, 16·d]` for conditions `[B, 44]`, guided
/// against the all-zeros condition.
pub fn plan_sample(model: &PlannerModel, conds: &Tensor, config: &SamplerConfig) -> Result<Tensor, PipelineError> {
    sample_rows(&model.model, conds, model.model.config().state_dim, config)
}

/// Prompt to spectrogram with the default samplers: plan, synthesize,
/// decode. Fails before any sampling when the planner and synthesizer
/// disagree on the head.
pub fn generate_end_to_end(
    planner: &PlannerModel,
    synth: &SynthesizerModel,
    vae: &AcousticVae,
    prompts: &[PromptSpec],
    seed_plan: u64,
    seed_synth: u64,
) -> Result<Vec<Tensor>, PipelineError> {
    generate_with(
        planner,
        synth,
        vae,
        prompts,
        &plan_sampler(seed_plan),
        &synth_sampler(seed_synth),
    )
}

/// [`generate_end_to_end`] with explicit sampler settings.
pub fn generate_with(
    planner: &PlannerModel,
    synth: &SynthesizerModel,
    vae: &AcousticVae,
    prompts: &[PromptSpec],
    plan_cfg: &SamplerConfig,
    synth_cfg: &SamplerConfig,
) -> Result<Vec<Tensor>, PipelineError> {
    planner.check_compatible(synth)?;
    let conds = prompt_conditions(prompts)?;
    let plans = plan_sample(planner, &conds, plan_cfg)?;
    let latents = synth_sample(synth, &plans, synth_cfg)?;
    vae.decode_batch(&latents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{HeadConfig, ProjectionHead};

    fn head(seed: u64, d: usize) -> FrozenHead {
        ProjectionHead::new(HeadConfig { d, hidden: 8 }, &mut seeded(seed))
            .unwrap()
            .freeze()
    }

    fn planner(h: &FrozenHead) -> PlannerModel {
        let cfg = VelocityConfig {
            state_dim: h.plan_dim(),
            cond_dim: COND_DIM,
            width: 8,
            depth: 1,
        };
        PlannerModel::bind(VelocityModel::new(cfg, &mut seeded(0)).unwrap(), h).unwrap()
    }

    fn synth(h: &FrozenHead) -> SynthesizerModel {
        let cfg = VelocityConfig {
            state_dim: 12,
            cond_dim: h.plan_dim(),
            width: 8,
            depth: 1,
        };
        SynthesizerModel::bind(VelocityModel::new(cfg, &mut seeded(0)).unwrap(), h).unwrap()
    }

    #[test]
    fn checksum_binding() {
        let (h1, h2) = (head(1, 4), head(2, 4));
        assert_ne!(h1.checksum(), h2.checksum());
        assert!(planner(&h1).check_compatible(&synth(&h1)).is_ok());
        assert!(matches!(
            planner(&h1).check_compatible(&synth(&h2)),
            Err(PipelineError::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            planner(&h1).check_compatible(&synth(&head(1, 8))),
            Err(PipelineError::DimMismatch {
                planner: 4,
                synthesizer: 8
            })
        ));
    }

    #[test]
    fn mismatch_rejected_before_sampling() {
        let (h1, h2) = (head(1, 4), head(2, 4));
        let vae = AcousticVae::new(6, 4, &mut seeded(0)).unwrap();
        let prompts = vec![PromptSpec::new(vec![1]).unwrap()];
        let err = generate_end_to_end(&planner(&h1), &synth(&h2), &vae, &prompts, 0, 0);
        assert!(matches!(err, Err(PipelineError::ChecksumMismatch { .. })));
    }

    #[test]
    fn unit_guidance_is_pure_conditional_sampling() {
        let h = head(1, 4);
        let mut p = planner(&h);
        let out = p.model.params.id("out.w").unwrap();
        let w = Tensor::randn(&[8, h.plan_dim()], &mut seeded(5));
        p.model.params.set_value(out, w).unwrap();
        let conds = prompt_conditions(&[PromptSpec::new(vec![2, 5]).unwrap()]).unwrap();
        let cfg = SamplerConfig {
            steps: 10,
            guidance_scale: 1.0,
            seed: 3,
        };
        let guided = plan_sample(&p, &conds, &cfg).unwrap();
        let x0 = crate::initial_noise(3, 0, 1, h.plan_dim());
        let plain = flowplan_core::euler_integrate(
            &|t: f64, x: &Tensor, c: &Tensor| Ok(p.model.forward(t, x, c)?),
            &x0,
            &conds,
            &cfg,
        )
        .unwrap();
        assert_eq!(guided, plain);
        assert_eq!(guided, plan_sample(&p, &conds, &cfg).unwrap());
    }
}
