//! The two-stage generation pipeline and its training-free editor.
//!
//! * [`vae`]: per-frame acoustic autoencoder mapping spectrograms to the
//!   compact latent the synthesizer generates.
//! * [`head`]: projection of oracle semantic features into the planning
//!   space; trained jointly with the synthesizer, then frozen.
//! * [`synth`]: flow-matching synthesizer of acoustic latents conditioned on
//!   projected semantics.
//! * [`planner`]: flow-matching planner of projected semantics conditioned
//!   on prompt encodings, sampled with classifier-free guidance.
//! * [`editor`]: delta-velocity editing of a source plan toward a target
//!   prompt, without inversion.

pub mod editor;
pub mod error;
pub mod head;
pub mod planner;
pub mod synth;
pub mod vae;

pub use editor::{
    averaged_delta, delta_velocity, edit_end_to_end, edit_semantics, source_plans, EditConfig, SourceCondition,
};
pub use error::PipelineError;
pub use head::{FrozenHead, HeadConfig, ProjectionHead};
pub use planner::{
    generate_end_to_end, generate_with, plan_sample, plan_sampler, prompt_conditions, train_planner, PlannerConfig,
    PlannerModel,
};
pub use synth::{
    project_dataset, recon_metrics, semantic_frames, synth_sample, synth_sampler, train_synthesizer, SynthConfig,
    SynthesizerModel,
};
pub use vae::{train_vae, AcousticVae, VaeConfig, VaeStats, LATENT_CHANNELS};

/// Number of rows evaluated per forward pass during batched sampling.
pub const SAMPLE_CHUNK: usize = 256;

use flowplan_core::rng::stream;
use flowplan_core::{euler_integrate, ConditionalField, SamplerConfig, Tensor};
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Gaussian starting states: row `r` is drawn from stream `first_row + r`
/// of `seed`, so a row's noise does not depend on its batch.
pub fn initial_noise(seed: u64, first_row: usize, rows: usize, dim: usize) -> Tensor {
    use rand::Rng as _;
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let mut rng = stream(seed, (first_row + r) as u64);
        data.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    Tensor::from_parts(&[rows, dim], data).expect("noise shape")
}

/// Integrate `field` from noise for every row of `cond`, in fixed chunks of
/// [`SAMPLE_CHUNK`] rows evaluated in parallel.
pub fn sample_rows<F: ConditionalField + Sync + ?Sized>(
    field: &F,
    cond: &Tensor,
    state_dim: usize,
    config: &SamplerConfig,
) -> Result<Tensor, PipelineError> {
    config.validate()?;
    let rows = cond.rows();
    let chunks: Vec<Tensor> = (0..rows.div_ceil(SAMPLE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * SAMPLE_CHUNK;
            let end = (start + SAMPLE_CHUNK).min(rows);
            let cond = row_range(cond, start, end)?;
            let x0 = initial_noise(config.seed, start, end - start, state_dim);
            Ok(euler_integrate(field, &x0, &cond, config)?)
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut data = Vec::with_capacity(rows * state_dim);
    for c in chunks {
        data.extend(c.into_data());
    }
    Ok(Tensor::from_parts(&[rows, state_dim], data)?)
}

/// Rows `start..end` of a matrix.
pub fn row_range(x: &Tensor, start: usize, end: usize) -> Result<Tensor, PipelineError> {
    let cols = x.cols();
    Ok(Tensor::from_parts(
        &[end - start, cols],
        x.data()[start * cols..end * cols].to_vec(),
    )?)
}
