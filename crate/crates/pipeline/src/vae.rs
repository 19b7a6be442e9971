//! Deterministic per-frame acoustic autoencoder.
//!
//! Each spectrogram frame (16 channels) is encoded independently by
//! `affine → SiLU → affine` into a few latent channels and decoded by the
//! mirror network. Latents are standardized per channel with statistics
//! measured on the training set, so the synthesizer sees unit-scale targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use flowplan_core::rng::{mix, seeded};
use flowplan_core::{AdamW, AdamWConfig, Checkpoint, LrSchedule, ParamId, ParamStore, Tape, Tensor, TrainError, Var};
use flowplan_world::{Dataset, CHANNELS, FRAMES};

use crate::error::PipelineError;

pub const LATENT_CHANNELS: usize = 6;
pub const VAE_KIND: &str = "acoustic-vae";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: u64,
    /// Clips per batch; every frame of each clip is used.
    pub clips_per_batch: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: LATENT_CHANNELS,
            hidden: 64,
            steps: 3000,
            clips_per_batch: 8,
            schedule: LrSchedule {
                base_lr: 3e-3,
                warmup_steps: 100,
                decay_interval: 1000,
                decay_factor: 0.5,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticVae {
    latent_channels: usize,
    hidden: usize,
    params: ParamStore,
    layers: [Layer; 4],
    latent_mean: Vec<f64>,
    latent_std: Vec<f64>,
}

fn dense<R: Rng + ?Sized>(
    params: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Layer, PipelineError> {
    let mut w = Tensor::randn(&[fan_in, fan_out], rng);
    let s = (1.0 / fan_in as f64).sqrt();
    for v in w.data_mut() {
        *v *= s;
    }
    Ok(Layer {
        w: params.add(format!("{name}.w"), w)?,
        b: params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
    })
}

impl AcousticVae {
    pub fn new<R: Rng + ?Sized>(latent_channels: usize, hidden: usize, rng: &mut R) -> Result<Self, PipelineError> {
        if latent_channels == 0 || hidden == 0 {
            return Err(PipelineError::Config("vae dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        let layers = [
            dense(&mut params, "enc1", CHANNELS, hidden, rng)?,
            dense(&mut params, "enc2", hidden, latent_channels, rng)?,
            dense(&mut params, "dec1", latent_channels, hidden, rng)?,
            dense(&mut params, "dec2", hidden, CHANNELS, rng)?,
        ];
        Ok(Self {
            latent_channels,
            hidden,
            params,
            layers,
            latent_mean: vec![0.0; latent_channels],
            latent_std: vec![1.0; latent_channels],
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Flattened latent size per clip.
    pub fn latent_dim(&self) -> usize {
        FRAMES * self.latent_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn layer(&self, tape: &mut Tape, l: Layer, x: Var) -> Result<Var, PipelineError> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    fn encode_raw_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, PipelineError> {
        let h = self.layer(tape, self.layers[0], x)?;
        let h = tape.silu(h);
        self.layer(tape, self.layers[1], h)
    }

    fn decode_raw_tape(&self, tape: &mut Tape, z: Var) -> Result<Var, PipelineError> {
        let h = self.layer(tape, self.layers[2], z)?;
        let h = tape.silu(h);
        self.layer(tape, self.layers[3], h)
    }

    /// Record the mean-squared reconstruction loss of frames `[rows, 16]`.
    pub fn recon_loss_tape(&self, tape: &mut Tape, frames: Tensor) -> Result<Var, PipelineError> {
        Self::check_rows(&frames, CHANNELS, "vae_recon_loss")?;
        let xv = tape.constant(frames);
        let z = self.encode_raw_tape(tape, xv)?;
        let y = self.decode_raw_tape(tape, z)?;
        let diff = tape.sub(y, xv)?;
        let sq = tape.square(diff);
        Ok(tape.mean(sq))
    }

    /// The same autoencoder with its weights replaced by `params`, which
    /// must have the same layout.
    pub fn with_params(&self, params: ParamStore) -> Result<Self, PipelineError> {
        let same = params.len() == self.params.len()
            && self.params.ids().zip(params.ids()).all(|(a, b)| {
                self.params.name(a) == params.name(b) && self.params.value(a).shape() == params.value(b).shape()
            });
        if !same {
            return Err(PipelineError::Config("vae parameter layout differs".into()));
        }
        Ok(Self { params, ..self.clone() })
    }

    fn check_rows(x: &Tensor, cols: usize, what: &'static str) -> Result<(), PipelineError> {
        if x.shape().len() != 2 || x.shape()[1] != cols {
            return Err(flowplan_core::TensorError::ShapeMismatch {
                op: what,
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), cols],
            }
            .into());
        }
        Ok(())
    }

    /// Encode frames `[rows, 16]` to standardized latents `[rows, C]`.
    pub fn encode_frames(&self, x: &Tensor) -> Result<Tensor, PipelineError> {
        Self::check_rows(x, CHANNELS, "vae_encode")?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.encode_raw_tape(&mut tape, xv)?;
        let mut z = tape.value(z).clone();
        let c = self.latent_channels;
        for row in z.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.latent_mean[j]) / self.latent_std[j];
            }
        }
        Ok(z)
    }

    /// Decode standardized latents `[rows, C]` to frames `[rows, 16]`.
    pub fn decode_frames(&self, z: &Tensor) -> Result<Tensor, PipelineError> {
        Self::check_rows(z, self.latent_channels, "vae_decode")?;
        let mut raw = z.clone();
        let c = self.latent_channels;
        for row in raw.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.latent_std[j] + self.latent_mean[j];
            }
        }
        let mut tape = Tape::new();
        let zv = tape.constant(raw);
        let x = self.decode_raw_tape(&mut tape, zv)?;
        Ok(tape.value(x).clone())
    }

    /// `[64, 16]` spectrogram to a `[64, C]` latent.
    pub fn encode(&self, spec: &Tensor) -> Result<Tensor, PipelineError> {
        if spec.shape() != [FRAMES, CHANNELS] {
            return Err(flowplan_core::TensorError::ShapeMismatch {
                op: "vae_encode",
                lhs: spec.shape().to_vec(),
                rhs: vec![FRAMES, CHANNELS],
            }
            .into());
        }
        self.encode_frames(spec)
    }

    /// `[64, C]` latent to a `[64, 16]` spectrogram.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, PipelineError> {
        if z.shape() != [FRAMES, self.latent_channels] {
            return Err(flowplan_core::TensorError::ShapeMismatch {
                op: "vae_decode",
                lhs: z.shape().to_vec(),
                rhs: vec![FRAMES, self.latent_channels],
            }
            .into());
        }
        self.decode_frames(z)
    }

    /// Decode a batch of flattened latents `[B, 64·C]` into spectrograms.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<Tensor>, PipelineError> {
        let frames = z.reshape(&[z.rows() * FRAMES, self.latent_channels])?;
        let x = self.decode_frames(&frames)?;
        Ok(x.reshape(&[z.rows(), FRAMES, CHANNELS])?.unstack())
    }

    /// Encode every clip of a dataset into flattened latents `[count, 64·C]`.
    pub fn encode_dataset(&self, ds: &Dataset) -> Result<Tensor, PipelineError> {
        let mut rows = Vec::with_capacity(ds.len() * FRAMES * CHANNELS);
        for i in 0..ds.len() {
            rows.extend_from_slice(ds.clip_slice(i));
        }
        let frames = Tensor::from_parts(&[ds.len() * FRAMES, CHANNELS], rows)?;
        Ok(self
            .encode_frames(&frames)?
            .into_shape(&[ds.len(), self.latent_dim()])?)
    }

    /// Mean squared reconstruction error over every frame of a dataset.
    pub fn recon_mse(&self, ds: &Dataset) -> Result<f64, PipelineError> {
        let mut total = 0.0;
        for i in 0..ds.len() {
            let x = ds.clip(i);
            let y = self.decode(&self.encode(&x)?)?;
            total += y.sub(&x)?.data().iter().map(|d| d * d).sum::<f64>();
        }
        Ok(total / (ds.len() * FRAMES * CHANNELS) as f64)
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "latent_channels": self.latent_channels,
            "hidden": self.hidden,
            "frames": FRAMES,
            "channels": CHANNELS,
        })
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::new(VAE_KIND, seed, self.architecture(), &self.params)
            .with_meta("latent_mean", self.latent_mean.clone())
            .with_meta("latent_std", self.latent_std.clone())
    }

    pub fn save(&self, dir: &std::path::Path, seed: u64) -> Result<(), PipelineError> {
        Ok(self.checkpoint(seed).save(dir, &self.params)?)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self, PipelineError> {
        let (ckpt, params) = Checkpoint::load(dir)?;
        ckpt.expect_kind(VAE_KIND)?;
        let arch: VaeArch = serde_json::from_value(ckpt.architecture.clone())
            .map_err(|e| PipelineError::Config(format!("vae architecture: {e}")))?;
        let vec_meta = |key: &str| -> Result<Vec<f64>, PipelineError> {
            serde_json::from_value(ckpt.meta(key)?.clone())
                .map_err(|e| PipelineError::Config(format!("vae {key}: {e}")))
        };
        let latent_mean = vec_meta("latent_mean")?;
        let latent_std = vec_meta("latent_std")?;
        let id = |n: &str| params.id(n);
        let layers = [
            Layer {
                w: id("enc1.w")?,
                b: id("enc1.b")?,
            },
            Layer {
                w: id("enc2.w")?,
                b: id("enc2.b")?,
            },
            Layer {
                w: id("dec1.w")?,
                b: id("dec1.b")?,
            },
            Layer {
                w: id("dec2.w")?,
                b: id("dec2.b")?,
            },
        ];
        if latent_mean.len() != arch.latent_channels || latent_std.len() != arch.latent_channels {
            return Err(PipelineError::Config(
                "vae latent statistics have the wrong length".into(),
            ));
        }
        Ok(Self {
            latent_channels: arch.latent_channels,
            hidden: arch.hidden,
            params,
            layers,
            latent_mean,
            latent_std,
        })
    }
}

#[derive(Deserialize)]
struct VaeArch {
    latent_channels: usize,
    hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeStats {
    pub losses: Vec<f64>,
    pub train_mse: f64,
}

/// Fit the autoencoder by mean-squared reconstruction of spectrogram frames.
/// Weights are rounded to `f32` at the end so a saved checkpoint reloads
/// bit-exactly.
pub fn train_vae(ds: &Dataset, config: &VaeConfig) -> Result<(AcousticVae, VaeStats), PipelineError> {
    if ds.is_empty() {
        return Err(PipelineError::Config("empty dataset".into()));
    }
    config.schedule.validate()?;
    let mut init_rng = seeded(mix(config.seed, 10));
    let mut vae = AcousticVae::new(config.latent_channels, config.hidden, &mut init_rng)?;
    let mut rng = seeded(mix(config.seed, 11));
    let opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let mut rows = Vec::with_capacity(config.clips_per_batch * FRAMES * CHANNELS);
        for _ in 0..config.clips_per_batch {
            rows.extend_from_slice(ds.clip_slice(rng.random_range(0..ds.len())));
        }
        let x = Tensor::from_parts(&[config.clips_per_batch * FRAMES, CHANNELS], rows)?;
        tape.reset();
        let loss = vae.recon_loss_tape(&mut tape, x)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TrainError::Diverged { step }.into());
        }
        tape.backward(loss, &mut vae.params)?;
        opt.step(&mut vae.params, config.schedule.lr_at(step + 1))?;
        losses.push(value);
    }
    vae.params.quantize_to_f32();

    // standardize latents with training-set statistics
    let z = vae.encode_dataset(ds)?;
    let c = vae.latent_channels;
    let n = (z.len() / c) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for row in z.data().chunks(c) {
        for j in 0..c {
            mean[j] += row[j] / n;
        }
    }
    for row in z.data().chunks(c) {
        for j in 0..c {
            sq[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    vae.latent_mean = mean.iter().map(|&m| m as f32 as f64).collect();
    vae.latent_std = sq.iter().map(|&v| (v.sqrt().max(1e-6)) as f32 as f64).collect();
    let train_mse = vae.recon_mse(ds)?;
    Ok((vae, VaeStats { losses, train_mse }))
}
