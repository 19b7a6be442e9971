//! Acoustic synthesizer: flow matching from Gaussian noise to VAE latents,
//! conditioned on projected semantics.
//!
//! The synthesizer and the projection head train jointly; gradients of the
//! flow-matching loss flow through the condition into the head. When
//! training ends the head is frozen and its checksum recorded in the model.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use flowplan_core::rng::{mix, seeded};
use flowplan_core::trainer::Ema;
use flowplan_core::velocity::fm_objective;
use flowplan_core::{
    sample_timestep, AdamW, Checkpoint, SamplerConfig, Tape, Tensor, TrainConfig, TrainError, TrainStats, Var,
    VelocityConfig, VelocityModel,
};
use flowplan_world::{Dataset, SEM_DIM, SEM_FRAMES};

use crate::error::PipelineError;
use crate::head::{FrozenHead, HeadConfig, ProjectionHead};
use crate::sample_rows;
use crate::vae::AcousticVae;

pub const SYNTH_KIND: &str = "synthesizer";
pub const SYNTH_STEPS: usize = 25;
pub const SYNTH_GUIDANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub head: HeadConfig,
    pub width: usize,
    pub depth: usize,
    /// Condition dropout is ignored: the synthesizer is always sampled
    /// unguided.
    pub train: TrainConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            width: 256,
            depth: 3,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizerModel {
    pub model: VelocityModel,
    d: usize,
    head_checksum: String,
}

impl SynthesizerModel {
    /// Pair a velocity model with the frozen head whose projections it is
    /// conditioned on.
    pub fn bind(model: VelocityModel, head: &FrozenHead) -> Result<Self, PipelineError> {
        if model.config().cond_dim != head.plan_dim() {
            return Err(PipelineError::Config(format!(
                "synthesizer condition width {} does not match head plan size {}",
                model.config().cond_dim,
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

    pub fn save(&self, dir: &Path, seed: u64) -> Result<(), PipelineError> {
        let arch = serde_json::to_value(self.model.config()).expect("config serializes");
        Checkpoint::new(SYNTH_KIND, seed, arch, &self.model.params)
            .with_meta("d", self.d)
            .with_meta("head_checksum", self.head_checksum.clone())
            .save(dir, &self.model.params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (ckpt, params) = Checkpoint::load(dir)?;
        ckpt.expect_kind(SYNTH_KIND)?;
        let (config, d, head_checksum) = bound_meta(&ckpt)?;
        Ok(Self {
            model: VelocityModel::from_params(config, params)?,
            d,
            head_checksum,
        })
    }
}

/// Architecture, `d` and head checksum stored with a head-bound model.
pub(crate) fn bound_meta(ckpt: &Checkpoint) -> Result<(VelocityConfig, usize, String), PipelineError> {
    let config: VelocityConfig = serde_json::from_value(ckpt.architecture.clone())
        .map_err(|e| PipelineError::Config(format!("{} architecture: {e}", ckpt.kind)))?;
    let d = ckpt
        .meta("d")?
        .as_u64()
        .ok_or_else(|| PipelineError::Config(format!("{}: metadata d is not an integer", ckpt.kind)))?
        as usize;
    let checksum = ckpt
        .meta("head_checksum")?
        .as_str()
        .ok_or_else(|| PipelineError::Config(format!("{}: head_checksum is not a string", ckpt.kind)))?
        .to_string();
    Ok((config, d, checksum))
}

/// Semantic frames `[B·16, 32]` for the given clip indices.
pub fn semantic_frames(ds: &Dataset, indices: &[usize]) -> Result<Tensor, PipelineError> {
    let mut data = Vec::with_capacity(indices.len() * SEM_FRAMES * SEM_DIM);
    for &i in indices {
        data.extend_from_slice(ds.semantics_slice(i));
    }
    Ok(Tensor::from_parts(&[indices.len() * SEM_FRAMES, SEM_DIM], data)?)
}

/// Project every clip of `ds` through a frozen head, giving `[count, 16·d]`.
pub fn project_dataset(head: &FrozenHead, ds: &Dataset) -> Result<Tensor, PipelineError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    head.project_batch(&semantic_frames(ds, &all)?)
}

/// Record the joint loss: the head projects `frames`, and the projection
/// conditions the synthesizer's flow-matching regression.
pub fn joint_objective(
    tape: &mut Tape,
    model: &VelocityModel,
    head: &ProjectionHead,
    frames: &Tensor,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
) -> Result<Var, PipelineError> {
    let fv = tape.constant(frames.clone());
    let cond = head.forward_tape(tape, fv)?;
    Ok(fm_objective(tape, model, x0, x1, t, cond)?)
}

/// Train the synthesizer and the projection head together, then freeze the
/// head. Both models are rounded to `f32` so their checkpoints reload
/// exactly.
pub fn train_synthesizer(
    ds: &Dataset,
    vae: &AcousticVae,
    config: &SynthConfig,
) -> Result<(SynthesizerModel, FrozenHead, TrainStats), PipelineError> {
    if ds.is_empty() {
        return Err(PipelineError::Config("empty dataset".into()));
    }
    let tc = &config.train;
    tc.schedule.validate()?;
    let latents = vae.encode_dataset(ds)?;
    let state_dim = vae.latent_dim();
    let mut head = ProjectionHead::new(config.head, &mut seeded(mix(tc.seed, 20)))?;
    let mut model = VelocityModel::new(
        VelocityConfig {
            state_dim,
            cond_dim: config.head.plan_dim(),
            width: config.width,
            depth: config.depth,
        },
        &mut seeded(mix(tc.seed, 21)),
    )?;
    let opt = AdamW::new(tc.adamw);
    let mut noise_rng = seeded(mix(tc.seed, 1));
    let mut data_rng = seeded(mix(tc.seed, 2));
    let mut ema = tc
        .ema_decay
        .map(|d| (Ema::new(d, &model.params), Ema::new(d, &head.params)));
    let mut tape = Tape::new();
    let mut stats = TrainStats::default();

    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..tc.batch_size).map(|_| data_rng.random_range(0..ds.len())).collect();
        let mut x1 = Vec::with_capacity(idx.len() * state_dim);
        for &i in &idx {
            x1.extend_from_slice(latents.row(i));
        }
        let x1 = Tensor::from_parts(&[idx.len(), state_dim], x1)?;
        let frames = semantic_frames(ds, &idx)?;
        let x0 = Tensor::randn(&[idx.len(), state_dim], &mut noise_rng);
        let t: Vec<f64> = idx
            .iter()
            .map(|_| sample_timestep(&mut noise_rng, tc.t_mu, tc.t_sigma))
            .collect();
        stats.total_rows += idx.len() as u64;

        tape.reset();
        let loss = joint_objective(&mut tape, &model, &head, &frames, &x0, &x1, &t)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::Diverged { step }.into());
        }
        tape.backward_many(loss, &mut [&mut model.params, &mut head.params])?;
        let lr = tc.schedule.lr_at(step + 1);
        opt.step(&mut model.params, lr)?;
        opt.step(&mut head.params, lr)?;
        if let Some((m, h)) = ema.as_mut() {
            m.update(&model.params)?;
            h.update(&head.params)?;
        }
        stats.losses.push(value);
    }
    if let Some((m, h)) = ema {
        m.apply(&mut model.params)?;
        h.apply(&mut head.params)?;
    }
    model.params.quantize_to_f32();
    let head = head.freeze();
    let synth = SynthesizerModel {
        model,
        d: config.head.d,
        head_checksum: head.checksum().to_string(),
    };
    Ok((synth, head, stats))
}

/// Generate flattened acoustic latents `[B, 64·C]` from plans `[B, 16·d]`.
/// Row `r` starts from noise stream `r` of `config.seed`.
pub fn synth_sample(model: &SynthesizerModel, plans: &Tensor, config: &SamplerConfig) -> Result<Tensor, PipelineError> {
    sample_rows(&model.model, plans, model.model.config().state_dim, config)
}

/// The default synthesizer sampler: 25 unguided Euler steps.
pub fn synth_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps: SYNTH_STEPS,
        guidance_scale: SYNTH_GUIDANCE,
        seed,
    }
}

/// Reconstruction losses between two spectrograms: mean absolute error at
/// full resolution, and the mean of mean absolute errors after average
/// pooling over 1, 2 and 4 frames.
pub fn recon_metrics(reference: &Tensor, generated: &Tensor) -> Result<(f64, f64), PipelineError> {
    if reference.shape() != generated.shape() || reference.shape().len() != 2 {
        return Err(flowplan_core::TensorError::ShapeMismatch {
            op: "recon_metrics",
            lhs: reference.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        }
        .into());
    }
    let (frames, channels) = (reference.rows(), reference.cols());
    let pooled_l1 = |p: usize| {
        let windows = frames / p;
        let mut total = 0.0;
        for w in 0..windows {
            for c in 0..channels {
                let mut diff = 0.0;
                for f in w * p..(w + 1) * p {
                    diff += reference.data()[f * channels + c] - generated.data()[f * channels + c];
                }
                total += (diff / p as f64).abs();
            }
        }
        total / (windows * channels) as f64
    };
    let mel = pooled_l1(1);
    let multiscale = [1, 2, 4].iter().map(|&p| pooled_l1(p)).sum::<f64>() / 3.0;
    Ok((mel, multiscale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recon_metric_examples() {
        let mut rng = seeded(0);
        let a = Tensor::randn(&[64, 16], &mut rng);
        assert_eq!(recon_metrics(&a, &a).unwrap(), (0.0, 0.0));
        let b = a.map(|v| v + 0.1);
        let (mel, ms) = recon_metrics(&a, &b).unwrap();
        assert!((mel - 0.1).abs() < 1e-12);
        assert!((ms - mel).abs() < 1e-12);
        assert!(recon_metrics(&a, &Tensor::zeros(&[64, 15])).is_err());
    }

    #[test]
    fn pooling_cancels_alternating_error() {
        let a = Tensor::zeros(&[4, 1]);
        let b = Tensor::new(&[4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (mel, ms) = recon_metrics(&a, &b).unwrap();
        assert_eq!(mel, 1.0);
        assert!((ms - 1.0 / 3.0).abs() < 1e-15);
    }
}
