//! Generic flow-matching training loop for a single [`VelocityModel`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::flow::{sample_timestep, FlowError};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::params::ParamStore;
use crate::rng::{seeded, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::velocity::{fm_objective, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adamw: AdamWConfig,
    /// Logit-normal timestep location.
    pub t_mu: f64,
    /// Logit-normal timestep scale.
    pub t_sigma: f64,
    /// Probability of replacing a row's condition with zeros.
    pub cond_dropout: f64,
    /// Exponential moving average of weights; `None` keeps raw weights.
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            schedule: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            t_mu: 0.4,
            t_sigma: 1.0,
            cond_dropout: 0.0,
            ema_decay: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub losses: Vec<f64>,
    pub dropped_rows: u64,
    pub total_rows: u64,
}

impl TrainStats {
    /// Mean loss over steps `start..end` (clamped to the recorded range).
    pub fn mean_loss(&self, start: usize, end: usize) -> f64 {
        let end = end.min(self.losses.len());
        let start = start.min(end);
        if start == end {
            return f64::NAN;
        }
        self.losses[start..end].iter().sum::<f64>() / (end - start) as f64
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropped_rows as f64 / self.total_rows.max(1) as f64
    }
}

/// A minibatch of data endpoints and their conditions.
pub struct Batch {
    /// `[batch, state]`
    pub x1: Tensor,
    /// `[batch, cond]`
    pub cond: Tensor,
}

/// Exponential moving average of a parameter store.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(decay: f64, store: &ParamStore) -> Self {
        Self {
            decay,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<(), TensorError> {
        for id in store.ids() {
            let blended = self
                .shadow
                .value(id)
                .scale(self.decay)
                .axpy(1.0 - self.decay, store.value(id))?;
            self.shadow.set_value(id, blended)?;
        }
        Ok(())
    }

    /// Copy the averaged weights into `store`.
    pub fn apply(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        for id in store.ids() {
            store.set_value(id, self.shadow.value(id).clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Train `model` by flow matching on batches produced by `next_batch`.
/// Noise, timesteps and condition dropout come from a generator seeded with
/// `config.seed`; `next_batch` receives its own generator derived from the
/// same seed.
pub fn train_velocity<F>(
    model: &mut VelocityModel,
    config: &TrainConfig,
    mut next_batch: F,
) -> Result<TrainStats, TrainError>
where
    F: FnMut(&mut Rng, usize) -> Batch,
{
    config.schedule.validate()?;
    let opt = AdamW::new(config.adamw);
    let mut noise_rng = seeded(crate::rng::mix(config.seed, 1));
    let mut data_rng = seeded(crate::rng::mix(config.seed, 2));
    let mut ema = config.ema_decay.map(|d| Ema::new(d, &model.params));
    let mut tape = Tape::new();
    let mut stats = TrainStats::default();
    let state_dim = model.config().state_dim;

    for step in 0..config.steps {
        let Batch { x1, mut cond } = next_batch(&mut data_rng, config.batch_size);
        let b = x1.rows();
        let x0 = Tensor::randn(&[b, state_dim], &mut noise_rng);
        let t: Vec<f64> = (0..b)
            .map(|_| sample_timestep(&mut noise_rng, config.t_mu, config.t_sigma))
            .collect();
        if config.cond_dropout > 0.0 {
            let cols = cond.cols();
            for row in cond.data_mut().chunks_mut(cols) {
                if noise_rng.random::<f64>() < config.cond_dropout {
                    row.fill(0.0);
                    stats.dropped_rows += 1;
                }
            }
        }
        stats.total_rows += b as u64;

        tape.reset();
        let cv = tape.constant(cond);
        let loss = fm_objective(&mut tape, model, &x0, &x1, &t, cv)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        tape.backward(loss, &mut model.params)?;
        opt.step(&mut model.params, config.schedule.lr_at(step + 1))?;
        if let Some(ema) = ema.as_mut() {
            ema.update(&model.params)?;
        }
        stats.losses.push(value);
    }
    if let Some(ema) = ema {
        ema.apply(&mut model.params)?;
    }
    Ok(stats)
}
