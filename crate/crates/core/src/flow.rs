//! Flow-matching primitives: the straight interpolation path, the velocity
//! regression loss, logit-normal timestep sampling, Euler integration and
//! classifier-free guidance.
//!
//! Time runs from `t = 0` (Gaussian noise) to `t = 1` (data).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("non-finite state after Euler step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid sampler config: {0}")]
    Config(String),
}

/// A velocity field `v(t, x, cond)` evaluated on a batch: `x` is
/// `[batch, state]`, `cond` is `[batch, cond]`, and the result has the shape
/// of `x`.
pub trait ConditionalField {
    fn velocity(&self, t: f64, x: &Tensor, cond: &Tensor) -> Result<Tensor, FlowError>;
}

impl<F> ConditionalField for F
where
    F: Fn(f64, &Tensor, &Tensor) -> Result<Tensor, FlowError>,
{
    fn velocity(&self, t: f64, x: &Tensor, cond: &Tensor) -> Result<Tensor, FlowError> {
        self(t, x, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::Config("steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(FlowError::Config(format!(
                "guidance scale {} must be finite and non-negative",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// `(1 - t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    if x0.shape() != x1.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "interpolate",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        }
        .into());
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    Ok(x0.scale(1.0 - t).axpy(t, x1)?)
}

/// Row-wise interpolation with a separate time per batch row.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor, FlowError> {
    if x0.shape() != x1.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "interpolate",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        }
        .into());
    }
    if t.len() != x0.rows() {
        return Err(FlowError::Config(format!("{} times for {} rows", t.len(), x0.rows())));
    }
    let cols = x0.cols();
    let mut out = x0.clone();
    for (i, (row, &ti)) in out.data_mut().chunks_mut(cols).zip(t).enumerate() {
        if !(0.0..=1.0).contains(&ti) {
            return Err(FlowError::TimeOutOfRange(ti));
        }
        for (o, &b) in row.iter_mut().zip(x1.row(i)) {
            *o = (1.0 - ti) * *o + ti * b;
        }
    }
    Ok(out)
}

/// Mean squared error between a predicted velocity and the straight-path
/// target `x1 - x0`.
pub fn fm_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64, FlowError> {
    let target = x1.sub(x0)?;
    let diff = v_pred.sub(&target)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// [`fm_loss`] recorded on a tape, with `target = x1 - x0` precomputed.
pub fn fm_loss_tape(tape: &mut Tape, v_pred: Var, target: &Tensor) -> Result<Var, FlowError> {
    let target = tape.constant(target.clone());
    let diff = tape.sub(v_pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Logit-normal draw `sigmoid(mu + sigma·n)`, kept strictly inside (0, 1).
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64) -> f64 {
    assert!(sigma >= 0.0, "logit-normal sigma must be non-negative");
    let n: f64 = rng.sample(StandardNormal);
    sigmoid(mu + sigma * n).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// `v_uncond + g·(v_cond − v_uncond)`.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, g: f64) -> Result<Tensor, FlowError> {
    if g == 1.0 {
        if v_cond.shape() != v_uncond.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cfg_velocity",
                lhs: v_cond.shape().to_vec(),
                rhs: v_uncond.shape().to_vec(),
            }
            .into());
        }
        return Ok(v_cond.clone());
    }
    let delta = v_cond.sub(v_uncond)?;
    Ok(v_uncond.axpy(g, &delta)?)
}

/// Guided velocity at one point: the conditional field alone when the scale
/// is 1, otherwise CFG against an all-zeros condition.
pub fn guided_velocity<F: ConditionalField + ?Sized>(
    field: &F,
    t: f64,
    x: &Tensor,
    cond: &Tensor,
    guidance: f64,
) -> Result<Tensor, FlowError> {
    let v_cond = field.velocity(t, x, cond)?;
    if guidance == 1.0 {
        return Ok(v_cond);
    }
    let null = Tensor::zeros(cond.shape());
    let v_uncond = field.velocity(t, x, &null)?;
    cfg_velocity(&v_cond, &v_uncond, guidance)
}

/// Forward Euler from `t = 0` to `t = 1` on the uniform grid `k / steps`.
pub fn euler_integrate<F: ConditionalField + ?Sized>(
    field: &F,
    x_init: &Tensor,
    cond: &Tensor,
    config: &SamplerConfig,
) -> Result<Tensor, FlowError> {
    config.validate()?;
    let h = 1.0 / config.steps as f64;
    let mut x = x_init.clone();
    for k in 0..config.steps {
        let t = k as f64 * h;
        let v = guided_velocity(field, t, &x, cond, config.guidance_scale)?;
        x = x.axpy(h, &v)?;
        if x.check_finite().is_err() {
            return Err(FlowError::NonFiniteState { step: k });
        }
    }
    Ok(x)
}
