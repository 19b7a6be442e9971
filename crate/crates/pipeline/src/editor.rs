//! Training-free editing with the planner's delta velocity field.
//!
//! The edited plan is `ŝ_src + Δ`. Starting from `Δ = 0` at `t_start`, each
//! Euler step adds `h · E_n[v(x_tgt, t, C_tgt) − v(x_src, t, C_src)]`, where
//! `x_src = (1 − t)·n + t·ŝ_src` and `x_tgt = x_src + Δ` share the noise `n`.
//! When the two conditions agree both branches see identical inputs, so the
//! delta is exactly zero and the edit is the identity.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowplan_core::rng::{stream, Rng};
use flowplan_core::{ConditionalField, FlowError, SamplerConfig, Tensor, TensorError};
use flowplan_world::{encode_semantics, PromptSpec, COND_DIM};

use crate::error::PipelineError;
use crate::head::FrozenHead;
use crate::planner::{prompt_conditions, PlannerModel};
use crate::synth::{synth_sample, SynthesizerModel};
use crate::vae::AcousticVae;

/// Rows edited together in one batched forward pass.
const EDIT_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceCondition {
    /// Condition the source branch on the source prompt.
    Prompt,
    /// Condition the source branch on the all-zeros condition.
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub n_avg: usize,
    pub steps: usize,
    pub t_start: f64,
    pub source: SourceCondition,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_avg: 8,
            steps: 50,
            t_start: 1.0 / 3.0,
            source: SourceCondition::Prompt,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n_avg == 0 {
            return Err(PipelineError::Config("n_avg must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(PipelineError::Config("edit steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.t_start) {
            return Err(PipelineError::Config(format!(
                "t_start {} must lie in [0, 1)",
                self.t_start
            )));
        }
        Ok(())
    }

    /// Grid indices `k` with `t_k = k / steps` in `[t_start, 1)`.
    pub fn grid(&self) -> std::ops::Range<usize> {
        let first = (self.t_start * self.steps as f64).ceil() as usize;
        first.min(self.steps)..self.steps
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `v(x_tgt, t, C_tgt) − v(x_src, t, C_src)`.
pub fn delta_velocity<F: ConditionalField + ?Sized>(
    field: &F,
    x_tgt: &Tensor,
    x_src: &Tensor,
    t: f64,
    c_tgt: &Tensor,
    c_src: &Tensor,
) -> Result<Tensor, FlowError> {
    same_shape("delta_velocity(state)", x_tgt, x_src)?;
    same_shape("delta_velocity(cond)", c_tgt, c_src)?;
    let v_tgt = field.velocity(t, x_tgt, c_tgt)?;
    let v_src = field.velocity(t, x_src, c_src)?;
    Ok(v_tgt.sub(&v_src)?)
}

fn repeat_rows(x: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.len() * times);
    for _ in 0..times {
        data.extend_from_slice(x.data());
    }
    Tensor::from_parts(&[x.rows() * times, x.cols()], data).expect("repeat shape")
}

/// Delta velocity averaged over `n_avg` noise draws. `rngs[r]` supplies the
/// noise for row `r`; the source and target branch share each draw.
#[allow(clippy::too_many_arguments)]
pub fn averaged_delta<F: ConditionalField + ?Sized>(
    field: &F,
    s_src: &Tensor,
    delta: &Tensor,
    t: f64,
    c_tgt: &Tensor,
    c_src: &Tensor,
    n_avg: usize,
    rngs: &mut [Rng],
) -> Result<Tensor, PipelineError> {
    same_shape("averaged_delta", s_src, delta)?;
    let (rows, dim) = (s_src.rows(), s_src.cols());
    if rngs.len() != rows || c_tgt.rows() != rows || c_src.rows() != rows || n_avg == 0 {
        return Err(PipelineError::Config(format!(
            "averaged_delta: {rows} rows, {} generators, {} target and {} source conditions, n_avg {n_avg}",
            rngs.len(),
            c_tgt.rows(),
            c_src.rows()
        )));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t).into());
    }
    // stacked realization-major: row i·rows + r is realization i of row r
    let mut noise = vec![0.0; n_avg * rows * dim];
    for (r, rng) in rngs.iter_mut().enumerate() {
        for i in 0..n_avg {
            let at = (i * rows + r) * dim;
            for v in &mut noise[at..at + dim] {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    let mut x_src = noise;
    for (j, v) in x_src.iter_mut().enumerate() {
        *v = (1.0 - t) * *v + t * s_src.data()[j % (rows * dim)];
    }
    let x_tgt: Vec<f64> = x_src
        .iter()
        .enumerate()
        .map(|(j, v)| v + delta.data()[j % (rows * dim)])
        .collect();
    let shape = [n_avg * rows, dim];
    let v = delta_velocity(
        field,
        &Tensor::from_parts(&shape, x_tgt)?,
        &Tensor::from_parts(&shape, x_src)?,
        t,
        &repeat_rows(c_tgt, n_avg),
        &repeat_rows(c_src, n_avg),
    )?;
    let mut mean = vec![0.0; rows * dim];
    for chunk in v.data().chunks(rows * dim) {
        for (m, x) in mean.iter_mut().zip(chunk) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n_avg as f64;
    }
    Ok(Tensor::from_parts(&[rows, dim], mean)?)
}

/// Integrate the averaged delta over rows `first_row..` of the batch.
fn edit_chunk<F: ConditionalField + ?Sized>(
    field: &F,
    s_src: &Tensor,
    c_tgt: &Tensor,
    c_src: &Tensor,
    config: &EditConfig,
    first_row: usize,
) -> Result<Tensor, PipelineError> {
    let mut rngs: Vec<Rng> = (0..s_src.rows())
        .map(|r| stream(config.seed, (first_row + r) as u64))
        .collect();
    let h = 1.0 / config.steps as f64;
    let mut delta = Tensor::zeros(s_src.shape());
    for k in config.grid() {
        let t = k as f64 * h;
        let v = averaged_delta(field, s_src, &delta, t, c_tgt, c_src, config.n_avg, &mut rngs)?;
        delta = delta.axpy(h, &v)?;
        if delta.check_finite().is_err() {
            return Err(FlowError::NonFiniteState { step: k }.into());
        }
    }
    Ok(s_src.add(&delta)?)
}

/// Edit plans `ŝ_src` (`[B, P]`) toward target conditions `[B, 44]`.
/// `c_src` is required in prompt mode and ignored in null mode. Row `r`
/// draws its noise from stream `r` of `config.seed`.
pub fn edit_semantics<F: ConditionalField + Sync + ?Sized>(
    field: &F,
    s_src: &Tensor,
    c_tgt: &Tensor,
    c_src: Option<&Tensor>,
    config: &EditConfig,
) -> Result<Tensor, PipelineError> {
    config.validate()?;
    let rows = s_src.rows();
    let null;
    let c_src = match config.source {
        SourceCondition::Prompt => {
            c_src.ok_or_else(|| PipelineError::Config("prompt-conditioned editing needs source conditions".into()))?
        }
        SourceCondition::Null => {
            null = Tensor::zeros(c_tgt.shape());
            &null
        }
    };
    same_shape("edit_semantics(cond)", c_tgt, c_src)?;
    if c_tgt.rows() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "edit_semantics",
            lhs: s_src.shape().to_vec(),
            rhs: c_tgt.shape().to_vec(),
        }
        .into());
    }
    let chunks: Vec<Tensor> = (0..rows.div_ceil(EDIT_CHUNK))
        .into_par_iter()
        .map(|c| {
            let (start, end) = (c * EDIT_CHUNK, ((c + 1) * EDIT_CHUNK).min(rows));
            edit_chunk(
                field,
                &crate::row_range(s_src, start, end)?,
                &crate::row_range(c_tgt, start, end)?,
                &crate::row_range(c_src, start, end)?,
                config,
                start,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut data = Vec::with_capacity(s_src.len());
    for c in chunks {
        data.extend(c.into_data());
    }
    Ok(Tensor::from_parts(s_src.shape(), data)?)
}

/// Source plans `[B, 16·d]` from source spectrograms.
pub fn source_plans(head: &FrozenHead, sources: &[Tensor]) -> Result<Tensor, PipelineError> {
    let mut frames = Vec::new();
    for s in sources {
        frames.extend(encode_semantics(s)?.0.into_data());
    }
    let frames = Tensor::from_parts(
        &[frames.len() / flowplan_world::SEM_DIM, flowplan_world::SEM_DIM],
        frames,
    )?;
    head.project_batch(&frames)
}

/// Edit source spectrograms toward target prompts and render the results.
/// `source_prompts` is read only in prompt mode.
#[allow(clippy::too_many_arguments)]
pub fn edit_end_to_end(
    planner: &PlannerModel,
    synth: &SynthesizerModel,
    vae: &AcousticVae,
    head: &FrozenHead,
    sources: &[Tensor],
    targets: &[PromptSpec],
    source_prompts: Option<&[PromptSpec]>,
    config: &EditConfig,
    synth_cfg: &SamplerConfig,
) -> Result<Vec<Tensor>, PipelineError> {
    planner.check_compatible(synth)?;
    if head.checksum() != planner.head_checksum() {
        return Err(PipelineError::ChecksumMismatch {
            planner: planner.head_checksum().to_string(),
            synthesizer: head.checksum().to_string(),
        });
    }
    if sources.len() != targets.len() {
        return Err(PipelineError::Config(format!(
            "{} sources but {} targets",
            sources.len(),
            targets.len()
        )));
    }
    let s_src = source_plans(head, sources)?;
    let c_tgt = prompt_conditions(targets)?;
    let c_src = match (config.source, source_prompts) {
        (SourceCondition::Prompt, Some(p)) => Some(prompt_conditions(p)?),
        (SourceCondition::Prompt, None) => {
            return Err(PipelineError::Config(
                "prompt-conditioned editing needs source prompts".into(),
            ))
        }
        (SourceCondition::Null, _) => None,
    };
    debug_assert_eq!(c_tgt.cols(), COND_DIM);
    let edited = edit_semantics(&planner.model, &s_src, &c_tgt, c_src.as_ref(), config)?;
    let latents = synth_sample(synth, &edited, synth_cfg)?;
    vae.decode_batch(&latents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowplan_core::rng::seeded;

    /// Exact velocity of a flow whose data is the single point `a(c) = c`.
    fn point_field(t: f64, x: &Tensor, c: &Tensor) -> Result<Tensor, FlowError> {
        Ok(c.sub(x)?.scale(1.0 / (1.0 - t)))
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn grid_bounds() {
        let c = EditConfig::default();
        assert_eq!(c.grid(), 17..50);
        assert_eq!(EditConfig { t_start: 0.0, ..c }.grid(), 0..50);
        assert!(EditConfig { n_avg: 0, ..c }.validate().is_err());
        assert!(EditConfig { t_start: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn equal_inputs_give_zero_delta() {
        let mut rng = seeded(0);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let c = Tensor::randn(&[3, 4], &mut rng);
        let d = delta_velocity(&point_field, &x, &x, 0.4, &c, &c).unwrap();
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn swapping_roles_negates() {
        let mut rng = seeded(1);
        let x = Tensor::randn(&[2, 3], &mut rng);
        let (a, b) = (Tensor::randn(&[2, 3], &mut rng), Tensor::randn(&[2, 3], &mut rng));
        let d1 = delta_velocity(&point_field, &x, &x, 0.5, &a, &b).unwrap();
        let d2 = delta_velocity(&point_field, &x, &x, 0.5, &b, &a).unwrap();
        assert_eq!(d1, d2.scale(-1.0));
    }

    #[test]
    fn point_field_edit_lands_on_target() {
        let src = row(&[0.5, -1.0, 2.0]);
        let tgt = row(&[-0.3, 0.7, 1.1]);
        let out = edit_semantics(&point_field, &src, &tgt, Some(&src), &EditConfig::default()).unwrap();
        assert!(out.max_abs_diff(&tgt).unwrap() < 1e-12);
    }

    #[test]
    fn single_realization_matches_direct_delta() {
        let s = row(&[0.2, 0.4]);
        let delta = row(&[0.1, -0.1]);
        let (ct, cs) = (row(&[1.0, 0.0]), row(&[0.0, 1.0]));
        let mut rngs = vec![stream(9, 0)];
        let avg = averaged_delta(&point_field, &s, &delta, 0.5, &ct, &cs, 1, &mut rngs).unwrap();
        let mut rng = stream(9, 0);
        let n = Tensor::randn(&[1, 2], &mut rng);
        let xs = n.scale(0.5).add(&s.scale(0.5)).unwrap();
        let xt = xs.add(&delta).unwrap();
        let direct = delta_velocity(&point_field, &xt, &xs, 0.5, &ct, &cs).unwrap();
        assert!(avg.max_abs_diff(&direct).unwrap() < 1e-15);
    }

    #[test]
    fn null_mode_ignores_source_prompt() {
        let src = row(&[0.5, -1.0]);
        let tgt = row(&[1.0, 2.0]);
        let cfg = EditConfig {
            source: SourceCondition::Null,
            ..Default::default()
        };
        let a = edit_semantics(&point_field, &src, &tgt, None, &cfg).unwrap();
        let b = edit_semantics(&point_field, &src, &tgt, Some(&row(&[9.0, 9.0])), &cfg).unwrap();
        assert_eq!(a, b);
        let prompt_mode = EditConfig::default();
        assert!(edit_semantics(&point_field, &src, &tgt, None, &prompt_mode).is_err());
    }
}
