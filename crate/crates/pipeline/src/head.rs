//! Projection head from oracle semantic features to the planning space.
//!
//! [`ProjectionHead`] is trainable. [`ProjectionHead::freeze`] consumes it
//! and returns a [`FrozenHead`], which exposes no way to change its weights.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use flowplan_core::{Checkpoint, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use flowplan_world::{SEM_DIM, SEM_FRAMES};

use crate::error::PipelineError;

pub const HEAD_KIND: &str = "projection-head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Output dimension per semantic frame.
    pub d: usize,
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { d: 8, hidden: 32 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.d == 0 || self.d > SEM_DIM / 2 {
            return Err(PipelineError::Config(format!(
                "projection dimension d = {} must lie in 1..={}",
                self.d,
                SEM_DIM / 2
            )));
        }
        if self.hidden == 0 {
            return Err(PipelineError::Config("head hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Flattened plan size, `SEM_FRAMES · d`.
    pub fn plan_dim(&self) -> usize {
        SEM_FRAMES * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl HeadIds {
    fn lookup(params: &ParamStore) -> Result<Self, TensorError> {
        Ok(Self {
            w1: params.id("w1")?,
            b1: params.id("b1")?,
            w2: params.id("w2")?,
            b2: params.id("b2")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    config: HeadConfig,
    pub params: ParamStore,
    ids: HeadIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHead {
    config: HeadConfig,
    params: ParamStore,
    ids: HeadIds,
    checksum: String,
}

fn check_features(rows: usize, x: &Tensor) -> Result<(), PipelineError> {
    if x.shape() != [rows, SEM_DIM] {
        return Err(TensorError::ShapeMismatch {
            op: "project_semantics",
            lhs: x.shape().to_vec(),
            rhs: vec![rows, SEM_DIM],
        }
        .into());
    }
    Ok(())
}

/// Shared forward pass: `[B·16, 32]` frames to `[B, 16·d]` plans.
fn forward_tape(
    tape: &mut Tape,
    params: &ParamStore,
    ids: HeadIds,
    config: HeadConfig,
    frames: Var,
) -> Result<Var, TensorError> {
    let rows = tape.value(frames).rows();
    if !rows.is_multiple_of(SEM_FRAMES) {
        return Err(TensorError::Invalid {
            op: "project_semantics",
            msg: format!("{rows} frames is not a multiple of {SEM_FRAMES}"),
        });
    }
    let w1 = tape.param(params, ids.w1);
    let b1 = tape.param(params, ids.b1);
    let w2 = tape.param(params, ids.w2);
    let b2 = tape.param(params, ids.b2);
    let h = tape.matmul(frames, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.silu(h);
    let y = tape.matmul(h, w2)?;
    let y = tape.add_bias(y, b2)?;
    tape.reshape(y, &[rows / SEM_FRAMES, config.plan_dim()])
}

fn project(params: &ParamStore, ids: HeadIds, config: HeadConfig, frames: &Tensor) -> Result<Tensor, PipelineError> {
    check_features(frames.rows(), frames)?;
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone());
    let y = forward_tape(&mut tape, params, ids, config, x)?;
    Ok(tape.value(y).clone())
}

fn architecture(config: HeadConfig) -> serde_json::Value {
    serde_json::json!({
        "d": config.d,
        "hidden": config.hidden,
        "sem_dim": SEM_DIM,
        "sem_frames": SEM_FRAMES,
    })
}

fn load_parts(dir: &Path) -> Result<(Checkpoint, HeadConfig, ParamStore, HeadIds), PipelineError> {
    let (ckpt, params) = Checkpoint::load(dir)?;
    ckpt.expect_kind(HEAD_KIND)?;
    let config: HeadConfig = serde_json::from_value(ckpt.architecture.clone())
        .map_err(|e| PipelineError::Config(format!("head architecture: {e}")))?;
    config.validate()?;
    let ids = HeadIds::lookup(&params)?;
    let expect = |id: ParamId, shape: &[usize]| {
        if params.value(id).shape() != shape {
            return Err(PipelineError::Config(format!(
                "head parameter {} has shape {:?}, expected {shape:?}",
                params.name(id),
                params.value(id).shape()
            )));
        }
        Ok(())
    };
    expect(ids.w1, &[SEM_DIM, config.hidden])?;
    expect(ids.b1, &[config.hidden])?;
    expect(ids.w2, &[config.hidden, config.d])?;
    expect(ids.b2, &[config.d])?;
    Ok((ckpt, config, params, ids))
}

fn is_frozen(ckpt: &Checkpoint) -> bool {
    ckpt.metadata.get("frozen").and_then(|v| v.as_bool()) == Some(true)
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let init = |fan_in: usize, fan_out: usize, rng: &mut R| {
            let s = (1.0 / fan_in as f64).sqrt();
            Tensor::randn(&[fan_in, fan_out], rng).scale(s)
        };
        let w1 = params.add("w1", init(SEM_DIM, config.hidden, rng))?;
        let b1 = params.add("b1", Tensor::zeros(&[config.hidden]))?;
        let w2 = params.add("w2", init(config.hidden, config.d, rng))?;
        let b2 = params.add("b2", Tensor::zeros(&[config.d]))?;
        Ok(Self {
            config,
            params,
            ids: HeadIds { w1, b1, w2, b2 },
        })
    }

    pub fn config(&self) -> HeadConfig {
        self.config
    }

    /// Record a projection of `[B·16, 32]` frames, giving `[B, 16·d]`.
    pub fn forward_tape(&self, tape: &mut Tape, frames: Var) -> Result<Var, TensorError> {
        forward_tape(tape, &self.params, self.ids, self.config, frames)
    }

    pub fn project_batch(&self, frames: &Tensor) -> Result<Tensor, PipelineError> {
        project(&self.params, self.ids, self.config, frames)
    }

    /// Round weights to `f32` and give up mutable access for good.
    pub fn freeze(mut self) -> FrozenHead {
        self.params.quantize_to_f32();
        self.params.zero_grad();
        let checksum = self.params.checksum();
        FrozenHead {
            config: self.config,
            params: self.params,
            ids: self.ids,
            checksum,
        }
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<(), PipelineError> {
        Checkpoint::new(HEAD_KIND, seed, architecture(self.config), &self.params)
            .with_meta("frozen", false)
            .save(dir, &self.params)?;
        Ok(())
    }

    /// Load a trainable head; a frozen checkpoint is refused.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (ckpt, config, params, ids) = load_parts(dir)?;
        if is_frozen(&ckpt) {
            return Err(PipelineError::HeadFrozen);
        }
        Ok(Self { config, params, ids })
    }
}

impl FrozenHead {
    pub fn config(&self) -> HeadConfig {
        self.config
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn plan_dim(&self) -> usize {
        self.config.plan_dim()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Project one clip's features `[16, 32]` to `[16, d]`.
    pub fn project(&self, s: &Tensor) -> Result<Tensor, PipelineError> {
        check_features(SEM_FRAMES, s)?;
        Ok(self.project_batch(s)?.into_shape(&[SEM_FRAMES, self.config.d])?)
    }

    /// Project `[B·16, 32]` frames to flattened plans `[B, 16·d]`.
    pub fn project_batch(&self, frames: &Tensor) -> Result<Tensor, PipelineError> {
        project(&self.params, self.ids, self.config, frames)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<(), PipelineError> {
        Checkpoint::new(HEAD_KIND, seed, architecture(self.config), &self.params)
            .with_meta("frozen", true)
            .with_meta("checksum", self.checksum.clone())
            .save(dir, &self.params)?;
        Ok(())
    }

    /// Load a frozen head; a trainable checkpoint is refused.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (ckpt, config, params, ids) = load_parts(dir)?;
        if !is_frozen(&ckpt) {
            return Err(PipelineError::HeadNotFrozen);
        }
        let checksum = params.checksum();
        if let Some(stored) = ckpt.metadata.get("checksum").and_then(|v| v.as_str()) {
            if stored != checksum {
                return Err(PipelineError::ChecksumMismatch {
                    planner: stored.to_string(),
                    synthesizer: checksum,
                });
            }
        }
        Ok(Self {
            config,
            params,
            ids,
            checksum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowplan_core::rng::seeded;

    #[test]
    fn zero_features_zero_bias_gives_zero() {
        let head = ProjectionHead::new(HeadConfig::default(), &mut seeded(0))
            .unwrap()
            .freeze();
        let y = head.project(&Tensor::zeros(&[SEM_FRAMES, SEM_DIM])).unwrap();
        assert_eq!(y.shape(), &[SEM_FRAMES, 8]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn dimension_bounds() {
        for d in [4, 8, 16] {
            assert!(HeadConfig { d, hidden: 32 }.validate().is_ok());
        }
        assert!(HeadConfig { d: 17, hidden: 32 }.validate().is_err());
        assert!(HeadConfig { d: 0, hidden: 32 }.validate().is_err());
    }

    #[test]
    fn batch_projection_is_per_clip() {
        let mut rng = seeded(3);
        let head = ProjectionHead::new(HeadConfig { d: 4, hidden: 16 }, &mut rng)
            .unwrap()
            .freeze();
        let a = Tensor::randn(&[SEM_FRAMES, SEM_DIM], &mut rng);
        let b = Tensor::randn(&[SEM_FRAMES, SEM_DIM], &mut rng);
        let both = Tensor::from_parts(&[2 * SEM_FRAMES, SEM_DIM], [a.data(), b.data()].concat()).unwrap();
        let y = head.project_batch(&both).unwrap();
        assert_eq!(y.row(0), head.project(&a).unwrap().data());
        assert_eq!(y.row(1), head.project(&b).unwrap().data());
        assert!(head.project(&Tensor::zeros(&[SEM_FRAMES, 31])).is_err());
    }

    #[test]
    fn freeze_flag_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let head = ProjectionHead::new(HeadConfig::default(), &mut seeded(1)).unwrap();
        head.save(dir.path(), 1).unwrap();
        assert!(matches!(
            FrozenHead::load(dir.path()),
            Err(PipelineError::HeadNotFrozen)
        ));
        let trainable = ProjectionHead::load(dir.path()).unwrap();
        let frozen = trainable.freeze();
        frozen.save(dir.path(), 1).unwrap();
        assert!(matches!(
            ProjectionHead::load(dir.path()),
            Err(PipelineError::HeadFrozen)
        ));
        let again = FrozenHead::load(dir.path()).unwrap();
        assert_eq!(again.checksum(), frozen.checksum());
        assert_eq!(again, frozen);
    }
}
