//! MLP velocity network `v(t, x, cond)`.
//!
//! Input is `[x, cond, time_embedding(t)]`; one dense SiLU layer lifts it to
//! the hidden width, each further layer adds a residual SiLU branch, and a
//! zero-initialized dense layer maps back to the state dimension.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::flow::{interpolate_rows, ConditionalField, FlowError};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TIME_EMBED_DIM: usize = 32;
const MAX_FREQ: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VelocityConfig {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub depth: usize,
}

impl VelocityConfig {
    pub fn input_dim(&self) -> usize {
        self.state_dim + self.cond_dim + TIME_EMBED_DIM
    }

    /// Scalar parameter count of a network with this shape.
    pub fn num_params(&self) -> usize {
        let w = self.width;
        (self.input_dim() + 1) * w + (self.depth - 1) * (w + 1) * w + (w + 1) * self.state_dim
    }

    fn validate(&self) -> Result<(), TensorError> {
        if self.state_dim == 0 || self.cond_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(TensorError::invalid(
                "velocity_config",
                format!("all dimensions must be positive: {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding with 16 geometric frequencies from 1 to 1000:
/// `[sin(f_0 t), …, sin(f_15 t), cos(f_0 t), …, cos(f_15 t)]`.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = MAX_FREQ.powf(i as f64 / (half - 1) as f64);
        out[i] = (freq * t).sin();
        out[half + i] = (freq * t).cos();
    }
    out
}

fn time_rows(t: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * TIME_EMBED_DIM);
    for &ti in t {
        data.extend_from_slice(&time_embedding(ti));
    }
    Tensor::from_parts(&[t.len(), TIME_EMBED_DIM], data).expect("non-empty batch")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    config: VelocityConfig,
    pub params: ParamStore,
    input: Dense,
    hidden: Vec<Dense>,
    output: Dense,
}

fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    let mut t = Tensor::zeros(&[rows, cols]);
    for v in t.data_mut() {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
    t
}

impl VelocityModel {
    pub fn new<R: Rng + ?Sized>(config: VelocityConfig, rng: &mut R) -> Result<Self, TensorError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let w = config.width;
        let input = Dense {
            w: params.add("in.w", init_matrix(config.input_dim(), w, rng))?,
            b: params.add("in.b", Tensor::zeros(&[w]))?,
        };
        let mut hidden = Vec::with_capacity(config.depth - 1);
        for l in 1..config.depth {
            hidden.push(Dense {
                w: params.add(format!("hidden{l}.w"), init_matrix(w, w, rng))?,
                b: params.add(format!("hidden{l}.b"), Tensor::zeros(&[w]))?,
            });
        }
        let output = Dense {
            w: params.add("out.w", Tensor::zeros(&[w, config.state_dim]))?,
            b: params.add("out.b", Tensor::zeros(&[config.state_dim]))?,
        };
        Ok(Self {
            config,
            params,
            input,
            hidden,
            output,
        })
    }

    /// Rebuild a model around a loaded parameter store, checking that every
    /// expected parameter is present with the right shape.
    pub fn from_params(config: VelocityConfig, params: ParamStore) -> Result<Self, TensorError> {
        config.validate()?;
        let w = config.width;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId, TensorError> {
            let id = params.id(name)?;
            if params.value(id).shape() != shape {
                return Err(TensorError::mismatch("from_params", shape, params.value(id).shape()));
            }
            Ok(id)
        };
        let input = Dense {
            w: get("in.w", &[config.input_dim(), w])?,
            b: get("in.b", &[w])?,
        };
        let hidden = (1..config.depth)
            .map(|l| {
                Ok(Dense {
                    w: get(&format!("hidden{l}.w"), &[w, w])?,
                    b: get(&format!("hidden{l}.b"), &[w])?,
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let output = Dense {
            w: get("out.w", &[w, config.state_dim])?,
            b: get("out.b", &[config.state_dim])?,
        };
        if params.len() != 2 * (config.depth + 1) {
            return Err(TensorError::invalid(
                "from_params",
                format!("expected {} tensors, found {}", 2 * (config.depth + 1), params.len()),
            ));
        }
        Ok(Self {
            config,
            params,
            input,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &VelocityConfig {
        &self.config
    }

    fn dense(&self, tape: &mut Tape, layer: Dense, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(&self.params, layer.w);
        let b = tape.param(&self.params, layer.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Record a forward pass. `t` holds one time per batch row.
    pub fn forward_tape(&self, tape: &mut Tape, t: &[f64], x: Var, cond: Var) -> Result<Var, TensorError> {
        let (xs, cs) = (tape.value(x).shape().to_vec(), tape.value(cond).shape().to_vec());
        if xs.len() != 2 || xs[1] != self.config.state_dim {
            return Err(TensorError::mismatch(
                "velocity_forward(state)",
                &xs,
                &[xs[0], self.config.state_dim],
            ));
        }
        if cs.len() != 2 || cs[1] != self.config.cond_dim || cs[0] != xs[0] {
            return Err(TensorError::mismatch(
                "velocity_forward(cond)",
                &cs,
                &[xs[0], self.config.cond_dim],
            ));
        }
        if t.len() != xs[0] {
            return Err(TensorError::invalid(
                "velocity_forward",
                format!("{} times for a batch of {}", t.len(), xs[0]),
            ));
        }
        let temb = tape.constant(time_rows(t));
        let inp = tape.concat_cols(&[x, cond, temb])?;
        let pre = self.dense(tape, self.input, inp)?;
        let mut h = tape.silu(pre);
        for &layer in &self.hidden {
            let pre = self.dense(tape, layer, h)?;
            let branch = tape.silu(pre);
            h = tape.add(h, branch)?;
        }
        self.dense(tape, self.output, h)
    }

    /// Tape-free forward pass with a single time for the whole batch.
    pub fn forward(&self, t: f64, x: &Tensor, cond: &Tensor) -> Result<Tensor, TensorError> {
        let times = vec![t; x.rows()];
        self.forward_rows(&times, x, cond)
    }

    pub fn forward_rows(&self, t: &[f64], x: &Tensor, cond: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let out = self.forward_tape(&mut tape, t, xv, cv)?;
        Ok(tape.value(out).clone())
    }
}

impl ConditionalField for VelocityModel {
    fn velocity(&self, t: f64, x: &Tensor, cond: &Tensor) -> Result<Tensor, FlowError> {
        Ok(self.forward(t, x, cond)?)
    }
}

/// Record the flow-matching loss for one batch: interpolate `x_t`, run the
/// model, and regress onto `x1 - x0`. `cond` may come from another
/// differentiable module on the same tape.
pub fn fm_objective(
    tape: &mut Tape,
    model: &VelocityModel,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
    cond: Var,
) -> Result<Var, FlowError> {
    let xt = interpolate_rows(x0, x1, t)?;
    let target = x1.sub(x0)?;
    let xv = tape.constant(xt);
    let pred = model.forward_tape(tape, t, xv, cond)?;
    crate::flow::fm_loss_tape(tape, pred, &target)
}
