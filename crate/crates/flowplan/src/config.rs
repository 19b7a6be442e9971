//! Run configuration: a TOML file, `--set section.key=value` overrides and
//! the `FLOWPLAN_SEED` environment variable, resolved into [`Config`].
//!
//! Every key has a default except the dataset paths, which each subcommand
//! requires as needed. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use flowplan_core::{AdamWConfig, LrSchedule, SamplerConfig, TrainConfig};
use flowplan_pipeline::{EditConfig, HeadConfig, PlannerConfig, SourceCondition, SynthConfig, VaeConfig};
use flowplan_world::Grammar;

pub const SEED_ENV: &str = "FLOWPLAN_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("override `{0}` must have the form section.key=value")]
    Override(String),
    #[error("override `{key}` does not name a config key")]
    UnknownOverride { key: String },
    #[error("missing config key `{0}`")]
    Missing(&'static str),
    #[error("{SEED_ENV}={0:?} is not an unsigned integer")]
    SeedEnv(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seed for model initialization, training noise and sampling.
    pub seed: u64,
    /// Directory holding `<run-id>/` run directories.
    pub run_root: PathBuf,
    pub data: DataConfig,
    pub vae: VaeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub edit: EditSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            run_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            vae: VaeSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            edit: EditSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training shard directory.
    pub train: Option<PathBuf>,
    /// Held-out shard directory.
    pub heldout: Option<PathBuf>,
    pub train_count: usize,
    pub heldout_count: usize,
    pub train_seed: u64,
    pub heldout_seed: u64,
    pub grammar: Grammar,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            heldout: None,
            train_count: 8192,
            heldout_count: 200,
            train_seed: 1,
            heldout_seed: 2,
            grammar: Grammar::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: u64,
    pub clips_per_batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub decay_interval: u64,
    pub decay_factor: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        let v = VaeConfig::default();
        Self {
            latent_channels: v.latent_channels,
            hidden: v.hidden,
            steps: v.steps,
            clips_per_batch: v.clips_per_batch,
            lr: v.schedule.base_lr,
            warmup: v.schedule.warmup_steps,
            decay_interval: v.schedule.decay_interval,
            decay_factor: v.schedule.decay_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden width shared by the planner and the synthesizer.
    pub width: usize,
    pub depth: usize,
    /// Projected semantic dimension per frame.
    pub d: usize,
    pub head_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 3,
            d: 8,
            head_hidden: HeadConfig::default().hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub decay_interval: u64,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub ema_decay: Option<f64>,
    pub t_mu: f64,
    pub t_sigma: f64,
    /// Condition dropout for the planner and the baseline.
    pub cond_dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.schedule.base_lr,
            warmup: t.schedule.warmup_steps,
            decay_interval: t.schedule.decay_interval,
            decay_factor: t.schedule.decay_factor,
            weight_decay: t.adamw.weight_decay,
            beta1: t.adamw.beta1,
            beta2: t.adamw.beta2,
            eps: t.adamw.eps,
            grad_clip: t.adamw.grad_clip,
            ema_decay: t.ema_decay,
            t_mu: t.t_mu,
            t_sigma: t.t_sigma,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub plan_steps: usize,
    pub plan_guidance: f64,
    pub synth_steps: usize,
    pub synth_guidance: f64,
    pub baseline_steps: usize,
    pub baseline_guidance: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            plan_steps: 50,
            plan_guidance: 3.0,
            synth_steps: 25,
            synth_guidance: 1.0,
            baseline_steps: 50,
            baseline_guidance: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub n_avg: usize,
    pub steps: usize,
    pub t_start: f64,
    pub source: SourceCondition,
}

impl Default for EditSection {
    fn default() -> Self {
        let e = EditConfig::default();
        Self {
            n_avg: e.n_avg,
            steps: e.steps,
            t_start: e.t_start,
            source: e.source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out prompts used for generation metrics.
    pub prompts: usize,
    pub benchmark_sources: usize,
    pub perturbations: usize,
    pub benchmark_keep: usize,
    /// Held-out clips, disjoint from the benchmark sources, added to the
    /// editing reference set.
    pub reference_clips: usize,
    pub ablation_dims: Vec<usize>,
    /// Clips whose spectrograms are rendered as images per command.
    pub heatmaps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            prompts: 200,
            benchmark_sources: 50,
            perturbations: 10,
            benchmark_keep: 100,
            reference_clips: 50,
            ablation_dims: vec![4, 8, 16],
            heatmaps: 4,
        }
    }
}

/// Sub-seed salts, so each stochastic stage draws an independent stream.
pub mod salt {
    pub const PLAN: u64 = 100;
    pub const SYNTH: u64 = 101;
    pub const BASELINE: u64 = 102;
    pub const EDIT: u64 = 103;
    pub const EDIT_SYNTH: u64 = 104;
    pub const BENCHMARK: u64 = 105;
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `section.key=value` to a parsed table. The value is read as TOML
/// when it parses, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.to_string()));
    }
    // validate the path against the full default config
    let defaults = toml::Table::try_from(Config::default()).expect("defaults serialize");
    let parts: Vec<&str> = key.split('.').collect();
    let mut known = &defaults;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        match known.get(*p) {
            Some(toml::Value::Table(t)) if !last => known = t,
            Some(_) if last => {}
            None if last && is_optional_key(&parts) => {}
            _ => return Err(ConfigError::UnknownOverride { key: key.to_string() }),
        }
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::UnknownOverride { key: key.to_string() })?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Keys whose default is absent, so they do not appear in the serialized
/// defaults.
fn is_optional_key(parts: &[&str]) -> bool {
    matches!(
        parts,
        ["data", "train"] | ["data", "heldout"] | ["train", "grad_clip"] | ["train", "ema_decay"]
    )
}

impl Config {
    /// Parse TOML text, apply overrides, then the seed environment value.
    pub fn resolve(
        text: &str,
        origin: &str,
        overrides: &[String],
        seed_env: Option<&str>,
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: Config = table.try_into().map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        if let Some(raw) = seed_env {
            config.seed = raw.trim().parse().map_err(|_| ConfigError::SeedEnv(raw.to_string()))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(&text, &path.display().to_string(), overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, msg: &str| {
            Err(ConfigError::Invalid {
                key,
                msg: msg.to_string(),
            })
        };
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return invalid("train.steps", "steps and batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.train.cond_dropout) {
            return invalid("train.cond_dropout", "must lie in [0, 1)");
        }
        if self.train.lr <= 0.0 || self.vae.lr <= 0.0 {
            return invalid("train.lr", "learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.edit.t_start) {
            return invalid("edit.t_start", "must lie in [0, 1)");
        }
        if self.edit.n_avg == 0 || self.edit.steps == 0 {
            return invalid("edit.n_avg", "n_avg and steps must be at least 1");
        }
        if self.eval.ablation_dims.is_empty() {
            return invalid("eval.ablation_dims", "at least one dimension is needed");
        }
        if self.eval.prompts > self.data.heldout_count {
            return invalid("eval.prompts", "exceeds data.heldout_count");
        }
        if self.eval.benchmark_sources + self.eval.reference_clips > self.data.heldout_count {
            return invalid(
                "eval.reference_clips",
                "benchmark sources plus reference clips exceed data.heldout_count",
            );
        }
        Ok(())
    }

    pub fn train_path(&self) -> Result<&Path, ConfigError> {
        self.data.train.as_deref().ok_or(ConfigError::Missing("data.train"))
    }

    pub fn heldout_path(&self) -> Result<&Path, ConfigError> {
        self.data.heldout.as_deref().ok_or(ConfigError::Missing("data.heldout"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that determines trained artifacts: data, model,
    /// training settings and the seed. Sampling, editing and evaluation
    /// settings are excluded so they can change without retraining.
    pub fn run_id(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            seed: u64,
            data: &'a DataConfig,
            vae: &'a VaeSection,
            model: &'a ModelSection,
            train: &'a TrainSection,
        }
        let id = Identity {
            seed: self.seed,
            data: &self.data,
            vae: &self.vae,
            model: &self.model,
            train: &self.train,
        };
        short_hash(&serde_json::to_string(&id).expect("identity serializes"))
    }

    /// Hash of the whole resolved configuration.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(format!("run-{}", self.run_id()))
    }

    pub fn vae_config(&self) -> VaeConfig {
        let v = &self.vae;
        VaeConfig {
            latent_channels: v.latent_channels,
            hidden: v.hidden,
            steps: v.steps,
            clips_per_batch: v.clips_per_batch,
            schedule: LrSchedule {
                base_lr: v.lr,
                warmup_steps: v.warmup,
                decay_interval: v.decay_interval,
                decay_factor: v.decay_factor,
            },
            seed: self.seed,
        }
    }

    pub fn train_config(&self, cond_dropout: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            schedule: LrSchedule {
                base_lr: t.lr,
                warmup_steps: t.warmup,
                decay_interval: t.decay_interval,
                decay_factor: t.decay_factor,
            },
            adamw: AdamWConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
                grad_clip: t.grad_clip,
            },
            t_mu: t.t_mu,
            t_sigma: t.t_sigma,
            cond_dropout,
            ema_decay: t.ema_decay,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self, d: usize) -> SynthConfig {
        SynthConfig {
            head: HeadConfig {
                d,
                hidden: self.model.head_hidden,
            },
            width: self.model.width,
            depth: self.model.depth,
            train: self.train_config(0.0),
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            width: self.model.width,
            depth: self.model.depth,
            train: self.train_config(self.train.cond_dropout),
        }
    }

    pub fn plan_sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample.plan_steps,
            guidance_scale: self.sample.plan_guidance,
            seed,
        }
    }

    pub fn synth_sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample.synth_steps,
            guidance_scale: self.sample.synth_guidance,
            seed,
        }
    }

    pub fn baseline_sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.sample.baseline_steps,
            guidance_scale: self.sample.baseline_guidance,
            seed,
        }
    }

    pub fn edit_config(&self, source: SourceCondition, seed: u64) -> EditConfig {
        EditConfig {
            n_avg: self.edit.n_avg,
            steps: self.edit.steps,
            t_start: self.edit.t_start,
            source,
            seed,
        }
    }
}

pub fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\ntrain = \"d/train\"\nheldout = \"d/heldout\"\n";

    #[test]
    fn defaults_match_pipeline_defaults() {
        let c = Config::resolve(MINIMAL, "t", &[], None).unwrap();
        assert_eq!(c.train.steps, 20_000);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.warmup, 1000);
        assert_eq!(c.sample.plan_steps, 50);
        assert_eq!(c.sample.plan_guidance, 3.0);
        assert_eq!(c.sample.synth_steps, 25);
        assert_eq!(c.edit.n_avg, 8);
        assert_eq!(c.model.d, 8);
        assert_eq!(c.data.train_count, 8192);
        assert_eq!(c.train_config(0.1).t_mu, 0.4);
    }

    #[test]
    fn overrides_and_env_seed() {
        let sets = vec!["train.steps=200".to_string(), "edit.source=null".to_string()];
        let c = Config::resolve(MINIMAL, "t", &sets, Some("17")).unwrap();
        assert_eq!(c.train.steps, 200);
        assert_eq!(c.edit.source, SourceCondition::Null);
        assert_eq!(c.seed, 17);
        assert!(Config::resolve(MINIMAL, "t", &[], Some("x")).is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::resolve("[train]\nstepz = 3\n", "t", &[], None).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = Config::resolve(MINIMAL, "t", &["train.stepz=3".into()], None).unwrap_err();
        assert!(err.to_string().contains("train.stepz"), "{err}");
        assert!(Config::resolve(MINIMAL, "t", &["nonsense".into()], None).is_err());
    }

    #[test]
    fn missing_paths_name_the_key() {
        let c = Config::resolve("", "t", &[], None).unwrap();
        assert_eq!(
            c.train_path().unwrap_err().to_string(),
            "missing config key `data.train`"
        );
        assert!(c.heldout_path().unwrap_err().to_string().contains("data.heldout"));
    }

    #[test]
    fn run_id_ignores_evaluation_settings() {
        let a = Config::resolve(MINIMAL, "t", &[], None).unwrap();
        let b = Config::resolve(MINIMAL, "t", &["edit.n_avg=2".into()], None).unwrap();
        let c = Config::resolve(MINIMAL, "t", &["train.steps=5".into()], None).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = Config::resolve(MINIMAL, "t", &["train.grad_clip=1.0".into()], None).unwrap();
        let again = Config::resolve(&c.to_toml(), "snapshot", &[], None).unwrap();
        assert_eq!(again, c);
    }
}
