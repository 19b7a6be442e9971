//! The `flowplan` command line.
//!
//! Every subcommand resolves one [`Config`], derives the run directory
//! `<run_root>/run-<id>/` from it, and writes `config.toml`, `report.json`,
//! `report.csv` and any spectrogram images into `<run-dir>/<subcommand>/`.
//! Checkpoints live beside them in `vae/`, `synth/`, `head/`, `planner/`,
//! `baseline/` and `ablate/d<d>/`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use flowplan_core::rng::mix;
use flowplan_core::Tensor;
use flowplan_pipeline::{
    edit_end_to_end, generate_with, train_planner, train_synthesizer, train_vae, AcousticVae, FrozenHead, PlannerModel,
    SourceCondition, SynthesizerModel,
};
use flowplan_world::{decode_events, Dataset, PromptSpec};

use crate::baseline::{baseline_generate, train_baseline, BaselineModel};
use crate::config::{salt, Config, SEED_ENV};
use crate::experiments::{
    ablate_d, baseline_width, editing_benchmark, mean_alignment, run_editing_eval, run_generation_eval, train_row,
    two_stage_params, GenerationSamplers,
};
use crate::heatmap;
use crate::report::{MetricRow, Report};

/// Expected size of the hard editing benchmark.
const BENCHMARK_SIZE: usize = 100;

#[derive(Debug, Parser)]
#[command(
    name = "flowplan",
    version,
    about = "Two-stage flow-matching audio pipeline on a synthetic sound world",
    after_help = format!("The {SEED_ENV} environment variable overrides the config seed.")
)]
pub struct Cli {
    /// TOML config file; every key has a default except the dataset paths.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and held-out datasets.
    GenData {
        /// Overwrite existing dataset directories.
        #[arg(long)]
        force: bool,
    },
    /// Train the acoustic VAE.
    TrainVae,
    /// Jointly train the projection head and the synthesizer, then freeze the head.
    TrainSynth,
    /// Train the semantic planner against the frozen head.
    TrainPlanner,
    /// Train the parameter-matched single-stage baseline.
    TrainBaseline,
    /// Generate spectrograms for prompts.
    Sample {
        /// Prompt as comma-separated class indices, e.g. `3,1,4`. Repeatable.
        /// Defaults to the first held-out prompts.
        #[arg(long = "prompt", value_name = "CLASSES", value_parser = parse_prompt)]
        prompts: Vec<PromptSpec>,
        #[arg(long, value_enum, default_value_t = ModelArg::TwoStage)]
        model: ModelArg,
    },
    /// Edit one held-out clip toward a target prompt.
    Edit {
        /// Held-out clip to edit.
        #[arg(long)]
        source_index: usize,
        /// Target prompt as comma-separated class indices.
        #[arg(long, value_parser = parse_prompt)]
        target: PromptSpec,
        #[command(flatten)]
        edit: EditArgs,
        #[arg(long, value_enum)]
        source_cond: Option<SourceArg>,
    },
    /// Compare the two-stage pipeline with the baseline on held-out prompts.
    EvalGen,
    /// Run the hard editing benchmark in both source-condition modes.
    EvalEdit {
        #[command(flatten)]
        edit: EditArgs,
    },
    /// Train and evaluate the pipeline for each semantic dimension.
    Ablate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    TwoStage,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Prompt,
    Null,
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    /// Noise realizations averaged per edit step.
    #[arg(long)]
    pub n_avg: Option<usize>,
    /// Euler steps of the full grid.
    #[arg(long)]
    pub edit_steps: Option<usize>,
    /// Fraction of the trajectory skipped before editing starts.
    #[arg(long)]
    pub t_start: Option<f64>,
}

impl EditArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(v) = self.n_avg {
            out.push(format!("edit.n_avg={v}"));
        }
        if let Some(v) = self.edit_steps {
            out.push(format!("edit.steps={v}"));
        }
        if let Some(v) = self.t_start {
            out.push(format!("edit.t_start={v:?}"));
        }
        out
    }
}

fn parse_prompt(raw: &str) -> Result<PromptSpec, String> {
    let tokens = raw
        .split(',')
        .map(|t| t.trim().parse::<u8>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    PromptSpec::new(tokens).map_err(|e| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainVae => "train-vae",
            Command::TrainSynth => "train-synth",
            Command::TrainPlanner => "train-planner",
            Command::TrainBaseline => "train-baseline",
            Command::Sample { .. } => "sample",
            Command::Edit { .. } => "edit",
            Command::EvalGen => "eval-gen",
            Command::EvalEdit { .. } => "eval-edit",
            Command::Ablate => "ablate",
        }
    }

    /// Flag values that are recorded as config overrides.
    fn overrides(&self) -> Vec<String> {
        match self {
            Command::Edit { edit, source_cond, .. } => {
                let mut o = edit.overrides();
                if let Some(s) = source_cond {
                    let s = match s {
                        SourceArg::Prompt => "prompt",
                        SourceArg::Null => "null",
                    };
                    o.push(format!("edit.source={s:?}"));
                }
                o
            }
            Command::EvalEdit { edit } => edit.overrides(),
            _ => Vec::new(),
        }
    }
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p, overrides)?,
        None => {
            let env = std::env::var(SEED_ENV).ok();
            Config::resolve("", "<defaults>", overrides, env.as_deref())?
        }
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    overrides.extend(cli.command.overrides());
    let config = load_config(cli.config.as_deref(), &overrides)?;
    let run = Run::new(config, cli.command.name())?;
    match cli.command {
        Command::GenData { force } => run.gen_data(force),
        Command::TrainVae => run.train_vae(),
        Command::TrainSynth => run.train_synth(),
        Command::TrainPlanner => run.train_planner(),
        Command::TrainBaseline => run.train_baseline(),
        Command::Sample { prompts, model } => run.sample(prompts, model),
        Command::Edit {
            source_index, target, ..
        } => run.edit(source_index, target),
        Command::EvalGen => run.eval_gen(),
        Command::EvalEdit { .. } => run.eval_edit(),
        Command::Ablate => run.ablate(),
    }
}

struct Run {
    config: Config,
    command: &'static str,
    dir: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: Config, command: &'static str) -> Result<Self> {
        let dir = config.run_dir();
        let out = dir.join(command);
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let snapshot = out.join("config.toml");
        fs::write(&snapshot, config.to_toml()).with_context(|| format!("writing {}", snapshot.display()))?;
        Ok(Self {
            config,
            command,
            dir,
            out,
        })
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn finish(&self, rows: Vec<MetricRow>) -> Result<()> {
        let report = Report {
            run_id: self.config.run_id(),
            command: self.command.to_string(),
            config_hash: self.config.hash(),
            rows,
        };
        report.write(&self.out)?;
        println!("{}", report.to_csv()?.trim_end());
        println!("wrote {}", self.out.display());
        Ok(())
    }

    fn heatmap(&self, name: &str, spec: &Tensor) -> Result<()> {
        let path = self.out.join(format!("{name}.png"));
        heatmap::save(spec, &path).with_context(|| format!("writing {}", path.display()))
    }

    fn train_data(&self) -> Result<Dataset> {
        let path = self.config.train_path()?;
        Dataset::load(path).with_context(|| format!("loading training data from {}", path.display()))
    }

    fn heldout_data(&self) -> Result<Dataset> {
        let path = self.config.heldout_path()?;
        Dataset::load(path).with_context(|| format!("loading held-out data from {}", path.display()))
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn load<T, E>(&self, name: &str, producer: &str, f: impl FnOnce(&Path) -> Result<T, E>) -> Result<T>
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        let path = self.artifact(name);
        if !path.exists() {
            bail!(
                "no {name} checkpoint at {} (run `flowplan {producer}` first)",
                path.display()
            );
        }
        f(&path).with_context(|| format!("loading {name} checkpoint {}", path.display()))
    }

    fn vae(&self) -> Result<AcousticVae> {
        self.load("vae", "train-vae", AcousticVae::load)
    }

    fn head(&self) -> Result<FrozenHead> {
        self.load("head", "train-synth", FrozenHead::load)
    }

    fn synth(&self) -> Result<SynthesizerModel> {
        self.load("synth", "train-synth", SynthesizerModel::load)
    }

    fn planner(&self) -> Result<PlannerModel> {
        self.load("planner", "train-planner", PlannerModel::load)
    }

    fn baseline(&self) -> Result<BaselineModel> {
        self.load("baseline", "train-baseline", BaselineModel::load)
    }

    fn gen_data(&self, force: bool) -> Result<()> {
        let data = &self.config.data;
        let splits = [
            ("train", self.config.train_path()?, data.train_count, data.train_seed),
            (
                "heldout",
                self.config.heldout_path()?,
                data.heldout_count,
                data.heldout_seed,
            ),
        ];
        let mut rows = Vec::new();
        for (name, path, count, seed) in splits {
            let ds = Dataset::generate(count, seed, &data.grammar)?;
            ds.save(path, force)
                .with_context(|| format!("writing {name} data to {}", path.display()))?;
            rows.push(MetricRow {
                seed: Some(seed),
                samples: Some(count),
                ..MetricRow::new(self.command, name)
            });
        }
        self.finish(rows)
    }

    fn train_vae(&self) -> Result<()> {
        let train = self.train_data()?;
        let (vae, stats) = train_vae(&train, &self.config.vae_config())?;
        vae.save(&self.artifact("vae"), self.seed())?;
        println!("vae train reconstruction mse {:.6e}", stats.train_mse);
        self.finish(vec![train_row(self.command, "vae", None, self.seed(), &stats.losses)])
    }

    fn train_synth(&self) -> Result<()> {
        let train = self.train_data()?;
        let vae = self.vae()?;
        let d = self.config.model.d;
        let (synth, head, stats) = train_synthesizer(&train, &vae, &self.config.synth_config(d))?;
        synth.save(&self.artifact("synth"), self.seed())?;
        head.save(&self.artifact("head"), self.seed())?;
        println!("head checksum {}", head.checksum());
        self.finish(vec![train_row(
            self.command,
            "synthesizer",
            Some(d),
            self.seed(),
            &stats.losses,
        )])
    }

    fn train_planner(&self) -> Result<()> {
        let train = self.train_data()?;
        let head = self.head()?;
        let (planner, stats) = train_planner(&train, &head, &self.config.planner_config())?;
        planner.save(&self.artifact("planner"), self.seed())?;
        println!("condition dropout rate {:.4}", stats.dropout_rate());
        self.finish(vec![train_row(
            self.command,
            "planner",
            Some(head.d()),
            self.seed(),
            &stats.losses,
        )])
    }

    fn train_baseline(&self) -> Result<()> {
        let train = self.train_data()?;
        let vae = self.vae()?;
        let width = baseline_width(&self.config, vae.latent_dim());
        let tc = self.config.train_config(self.config.train.cond_dropout);
        let (baseline, stats) = train_baseline(&train, &vae, width, self.config.model.depth, &tc)?;
        baseline.save(&self.artifact("baseline"), self.seed())?;
        println!(
            "baseline width {width}: {} parameters, two-stage budget {}",
            baseline.num_params(),
            two_stage_params(&self.config, vae.latent_dim(), self.config.model.d)
        );
        self.finish(vec![train_row(
            self.command,
            "baseline",
            None,
            self.seed(),
            &stats.losses,
        )])
    }

    fn sample(&self, prompts: Vec<PromptSpec>, model: ModelArg) -> Result<()> {
        let prompts = if prompts.is_empty() {
            let heldout = self.heldout_data()?;
            let n = self.config.eval.heatmaps.min(heldout.len());
            heldout.prompts()[..n].to_vec()
        } else {
            prompts
        };
        let samplers = GenerationSamplers::from_config(&self.config);
        let vae = self.vae()?;
        let (name, d, specs) = match model {
            ModelArg::TwoStage => {
                let planner = self.planner()?;
                let synth = self.synth()?;
                let specs = generate_with(&planner, &synth, &vae, &prompts, &samplers.plan, &samplers.synth)?;
                ("two-stage", Some(planner.d()), specs)
            }
            ModelArg::Baseline => {
                let baseline = self.baseline()?;
                (
                    "baseline",
                    None,
                    baseline_generate(&baseline, &vae, &prompts, &samplers.baseline)?,
                )
            }
        };
        #[derive(Serialize)]
        struct Sample<'a> {
            prompt: &'a PromptSpec,
            decoded: Vec<u8>,
            image: String,
        }
        let mut listing = Vec::with_capacity(specs.len());
        for (i, (spec, prompt)) in specs.iter().zip(&prompts).enumerate() {
            let image = format!("{name}-{i}");
            self.heatmap(&image, spec)?;
            listing.push(Sample {
                prompt,
                decoded: decode_events(spec)?,
                image: image + ".png",
            });
        }
        let path = self.out.join("samples.json");
        fs::write(&path, serde_json::to_string_pretty(&listing)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        let (f1, order) = mean_alignment(&specs, &prompts)?;
        self.finish(vec![MetricRow {
            d,
            seed: Some(self.seed()),
            samples: Some(specs.len()),
            alignment_f1: Some(f1),
            order_accuracy: Some(order),
            ..MetricRow::new(self.command, name)
        }])
    }

    fn edit(&self, source_index: usize, target: PromptSpec) -> Result<()> {
        let heldout = self.heldout_data()?;
        if source_index >= heldout.len() {
            bail!(
                "--source-index {source_index} is out of range for {} held-out clips",
                heldout.len()
            );
        }
        let (vae, head, synth, planner) = (self.vae()?, self.head()?, self.synth()?, self.planner()?);
        let cfg = self
            .config
            .edit_config(self.config.edit.source, mix(self.seed(), salt::EDIT));
        let source = heldout.clip(source_index);
        let source_prompt = heldout.prompt(source_index).clone();
        let targets = [target];
        let edited = edit_end_to_end(
            &planner,
            &synth,
            &vae,
            &head,
            std::slice::from_ref(&source),
            &targets,
            (cfg.source == SourceCondition::Prompt).then_some(std::slice::from_ref(&source_prompt)),
            &cfg,
            &self.config.synth_sampler(mix(self.seed(), salt::EDIT_SYNTH)),
        )?;
        self.heatmap("source", &source)?;
        self.heatmap("edited", &edited[0])?;
        let mut rows = Vec::new();
        for (name, spec) in [("source", &source), ("edited", &edited[0])] {
            let (f1, order) = mean_alignment(std::slice::from_ref(spec), &targets)?;
            rows.push(MetricRow {
                d: Some(planner.d()),
                seed: Some(self.seed()),
                samples: Some(1),
                alignment_f1: Some(f1),
                order_accuracy: Some(order),
                ..MetricRow::new(self.command, name)
            });
        }
        self.finish(rows)
    }

    fn eval_gen(&self) -> Result<()> {
        let heldout = self.heldout_data()?;
        let (vae, synth, planner, baseline) = (self.vae()?, self.synth()?, self.planner()?, self.baseline()?);
        let eval = run_generation_eval(
            &planner,
            &synth,
            &vae,
            &baseline,
            &heldout,
            self.config.eval.prompts,
            &GenerationSamplers::from_config(&self.config),
            self.seed(),
        )?;
        for i in 0..self.config.eval.heatmaps.min(eval.two_stage.len()) {
            self.heatmap(&format!("two-stage-{i}"), &eval.two_stage[i])?;
            self.heatmap(&format!("baseline-{i}"), &eval.baseline[i])?;
        }
        self.finish(eval.rows)
    }

    fn eval_edit(&self) -> Result<()> {
        let heldout = self.heldout_data()?;
        let e = &self.config.eval;
        let benchmark = editing_benchmark(
            &heldout,
            e.benchmark_sources,
            e.perturbations,
            e.benchmark_keep,
            mix(self.seed(), salt::BENCHMARK),
        )?;
        if benchmark.pairs.len() != BENCHMARK_SIZE {
            eprintln!(
                "warning: hard benchmark has {} pairs, expected {BENCHMARK_SIZE}",
                benchmark.pairs.len()
            );
        }
        benchmark.save(&self.out.join("benchmark.json"))?;
        let (vae, head, synth, planner) = (self.vae()?, self.head()?, self.synth()?, self.planner()?);
        let eval = run_editing_eval(
            &benchmark,
            &heldout,
            e.reference_clips,
            &planner,
            &synth,
            &vae,
            &head,
            &self
                .config
                .edit_config(SourceCondition::Prompt, mix(self.seed(), salt::EDIT)),
            &self.config.synth_sampler(mix(self.seed(), salt::EDIT_SYNTH)),
        )?;
        let mut rows = eval.rows;
        for r in &mut rows {
            r.seed = Some(self.seed());
        }
        for i in 0..e.heatmaps.min(benchmark.pairs.len()) {
            self.heatmap(&format!("source-{i}"), &heldout.clip(benchmark.pairs[i].source_index))?;
            self.heatmap(&format!("edit-conditional-{i}"), &eval.conditional[i])?;
            self.heatmap(&format!("edit-unconditional-{i}"), &eval.unconditional[i])?;
        }
        self.finish(rows)
    }

    fn ablate(&self) -> Result<()> {
        let train = self.train_data()?;
        let heldout = self.heldout_data()?;
        let vae = self.vae()?;
        let points = ablate_d(&train, &heldout, &vae, &self.config, &self.config.eval.ablation_dims)?;
        let mut rows = Vec::with_capacity(points.len());
        for p in points {
            let dir = self.artifact("ablate").join(format!("d{}", p.d));
            p.synth.save(&dir.join("synth"), self.seed())?;
            p.head.save(&dir.join("head"), self.seed())?;
            p.planner.save(&dir.join("planner"), self.seed())?;
            rows.push(p.row);
        }
        self.finish(rows)
    }
}
