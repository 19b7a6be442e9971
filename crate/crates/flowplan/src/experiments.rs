//! Experiment runners shared by the command line and the acceptance suite:
//! the generation comparison against the single-stage baseline, the hard
//! editing benchmark, reconstruction from ground-truth plans, and the
//! semantic-dimension ablation.

use flowplan_core::rng::mix;
use flowplan_core::{SamplerConfig, Tensor, VelocityConfig};
use flowplan_pipeline::{
    edit_end_to_end, generate_with, project_dataset, recon_metrics, synth_sample, train_planner, train_synthesizer,
    AcousticVae, EditConfig, FrozenHead, PipelineError, PlannerModel, SourceCondition, SynthesizerModel,
};
use flowplan_world::{build_hard_benchmark, BenchmarkSet, Dataset, PromptSpec, COND_DIM, SEM_DIM};

use crate::baseline::{baseline_generate, matched_width, BaselineModel};
use crate::config::{salt, Config};
use crate::metrics::{
    class_distributions, frechet_distance, is_analog, kl_paired, spectrogram_alignment, FeatureStats, MetricError,
};
use crate::report::MetricRow;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    World(#[from] flowplan_world::WorldError),
    #[error("held-out set has {found} clips, {needed} needed")]
    HeldoutTooSmall { needed: usize, found: usize },
}

/// Steps averaged for the first and last training loss columns.
pub const LOSS_WINDOW: usize = 1000;

/// Mean loss over the first and last windows of a run. Runs shorter than
/// two windows use halves.
pub fn loss_window(losses: &[f64]) -> (f64, f64) {
    let n = losses.len();
    let w = LOSS_WINDOW.min(n / 2).max(1).min(n.max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(n)]), mean(&losses[n.saturating_sub(w)..]))
}

/// A report row summarizing one training run.
pub fn train_row(command: &str, model: &str, d: Option<usize>, seed: u64, losses: &[f64]) -> MetricRow {
    let (first, last) = loss_window(losses);
    MetricRow {
        d,
        seed: Some(seed),
        steps: Some(losses.len() as u64),
        loss_first: Some(first),
        loss_last: Some(last),
        ..MetricRow::new(command, model)
    }
}

/// Mean alignment of generated clips against their prompts.
pub fn mean_alignment(specs: &[Tensor], prompts: &[PromptSpec]) -> Result<(f64, f64), MetricError> {
    let mut f1 = 0.0;
    let mut order = 0.0;
    for (s, p) in specs.iter().zip(prompts) {
        let (a, b) = spectrogram_alignment(s, p)?;
        f1 += a;
        order += b;
    }
    let n = specs.len().max(1) as f64;
    Ok((f1 / n, order / n))
}

/// Alignment, Fréchet distance, paired KL, IS and paired reconstruction
/// losses of generated clips against index-aligned references.
pub fn score_generation(
    command: &str,
    model: &str,
    generated: &[Tensor],
    prompts: &[PromptSpec],
    references: &[Tensor],
) -> Result<MetricRow, ExperimentError> {
    let (f1, order) = mean_alignment(generated, prompts)?;
    let fd = frechet_distance(
        &FeatureStats::from_spectrograms(references)?,
        &FeatureStats::from_spectrograms(generated)?,
    )?;
    let gen_dists = class_distributions(generated)?;
    let kl = kl_paired(&class_distributions(references)?, &gen_dists)?;
    let mut mel = 0.0;
    let mut ms = 0.0;
    for (r, g) in references.iter().zip(generated) {
        let (a, b) = recon_metrics(r, g)?;
        mel += a;
        ms += b;
    }
    let n = generated.len() as f64;
    Ok(MetricRow {
        samples: Some(generated.len()),
        alignment_f1: Some(f1),
        order_accuracy: Some(order),
        fd: Some(fd),
        kl: Some(kl),
        is_analog: Some(is_analog(&gen_dists)?),
        mel_analog: Some(mel / n),
        multiscale: Some(ms / n),
        ..MetricRow::new(command, model)
    })
}

fn heldout_slice(heldout: &Dataset, n: usize) -> Result<(Vec<PromptSpec>, Vec<Tensor>), ExperimentError> {
    if heldout.len() < n {
        return Err(ExperimentError::HeldoutTooSmall {
            needed: n,
            found: heldout.len(),
        });
    }
    Ok((
        heldout.prompts()[..n].to_vec(),
        (0..n).map(|i| heldout.clip(i)).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationSamplers {
    pub plan: SamplerConfig,
    pub synth: SamplerConfig,
    pub baseline: SamplerConfig,
}

impl GenerationSamplers {
    pub fn from_config(config: &Config) -> Self {
        Self {
            plan: config.plan_sampler(mix(config.seed, salt::PLAN)),
            synth: config.synth_sampler(mix(config.seed, salt::SYNTH)),
            baseline: config.baseline_sampler(mix(config.seed, salt::BASELINE)),
        }
    }
}

pub struct GenerationEval {
    pub rows: Vec<MetricRow>,
    pub two_stage: Vec<Tensor>,
    pub baseline: Vec<Tensor>,
}

/// One clip per held-out prompt from each model, scored against the
/// held-out clip of the same prompt. Rows: `two-stage`, then `baseline`.
#[allow(clippy::too_many_arguments)]
pub fn run_generation_eval(
    planner: &PlannerModel,
    synth: &SynthesizerModel,
    vae: &AcousticVae,
    baseline: &BaselineModel,
    heldout: &Dataset,
    prompts: usize,
    samplers: &GenerationSamplers,
    seed: u64,
) -> Result<GenerationEval, ExperimentError> {
    let (prompts, references) = heldout_slice(heldout, prompts)?;
    let two_stage = generate_with(planner, synth, vae, &prompts, &samplers.plan, &samplers.synth)?;
    let base = baseline_generate(baseline, vae, &prompts, &samplers.baseline)?;
    let mut rows = Vec::with_capacity(2);
    for (name, specs) in [("two-stage", &two_stage), ("baseline", &base)] {
        let mut row = score_generation("eval-gen", name, specs, &prompts, &references)?;
        row.seed = Some(seed);
        row.d = (name == "two-stage").then_some(planner.d());
        rows.push(row);
    }
    Ok(GenerationEval {
        rows,
        two_stage,
        baseline: base,
    })
}

/// Hard benchmark over the first `sources` held-out prompts.
pub fn editing_benchmark(
    heldout: &Dataset,
    sources: usize,
    perturbations: usize,
    keep: usize,
    seed: u64,
) -> Result<BenchmarkSet, ExperimentError> {
    if heldout.len() < sources {
        return Err(ExperimentError::HeldoutTooSmall {
            needed: sources,
            found: heldout.len(),
        });
    }
    let src: Vec<(usize, PromptSpec)> = (0..sources).map(|i| (i, heldout.prompt(i).clone())).collect();
    Ok(build_hard_benchmark(&src, perturbations, keep, seed)?)
}

pub struct EditingEval {
    pub rows: Vec<MetricRow>,
    pub conditional: Vec<Tensor>,
    pub unconditional: Vec<Tensor>,
}

/// Edit every benchmark pair in prompt-conditioned and null-source modes.
/// Rows: `source`, `edit-conditional`, `edit-unconditional`, each with the
/// mean target-prompt alignment and the Fréchet distance to a reference set
/// of the benchmark source clips plus `reference_clips` disjoint held-out
/// clips. KL is not reported for editing.
#[allow(clippy::too_many_arguments)]
pub fn run_editing_eval(
    benchmark: &BenchmarkSet,
    heldout: &Dataset,
    reference_clips: usize,
    planner: &PlannerModel,
    synth: &SynthesizerModel,
    vae: &AcousticVae,
    head: &FrozenHead,
    edit: &EditConfig,
    synth_sampler: &SamplerConfig,
) -> Result<EditingEval, ExperimentError> {
    let pairs = &benchmark.pairs;
    let sources: Vec<Tensor> = pairs.iter().map(|p| heldout.clip(p.source_index)).collect();
    let targets: Vec<PromptSpec> = pairs.iter().map(|p| p.target.clone()).collect();
    let source_prompts: Vec<PromptSpec> = pairs.iter().map(|p| p.source.clone()).collect();

    let mut source_ids: Vec<usize> = pairs.iter().map(|p| p.source_index).collect();
    source_ids.sort_unstable();
    source_ids.dedup();
    let first_free = pairs.iter().map(|p| p.source_index + 1).max().unwrap_or(0);
    let needed = first_free + reference_clips;
    if heldout.len() < needed {
        return Err(ExperimentError::HeldoutTooSmall {
            needed,
            found: heldout.len(),
        });
    }
    let reference: Vec<Tensor> = source_ids
        .iter()
        .copied()
        .chain(first_free..needed)
        .map(|i| heldout.clip(i))
        .collect();
    let ref_stats = FeatureStats::from_spectrograms(&reference)?;

    let score = |model: &str, specs: &[Tensor]| -> Result<MetricRow, ExperimentError> {
        let (f1, order) = mean_alignment(specs, &targets)?;
        Ok(MetricRow {
            samples: Some(specs.len()),
            alignment_f1: Some(f1),
            order_accuracy: Some(order),
            fd: Some(frechet_distance(&ref_stats, &FeatureStats::from_spectrograms(specs)?)?),
            is_analog: Some(is_analog(&class_distributions(specs)?)?),
            ..MetricRow::new("eval-edit", model)
        })
    };

    let conditional = edit_end_to_end(
        planner,
        synth,
        vae,
        head,
        &sources,
        &targets,
        Some(&source_prompts),
        &EditConfig {
            source: SourceCondition::Prompt,
            ..*edit
        },
        synth_sampler,
    )?;
    let unconditional = edit_end_to_end(
        planner,
        synth,
        vae,
        head,
        &sources,
        &targets,
        None,
        &EditConfig {
            source: SourceCondition::Null,
            ..*edit
        },
        synth_sampler,
    )?;
    let mut rows = vec![
        score("source", &sources)?,
        score("edit-conditional", &conditional)?,
        score("edit-unconditional", &unconditional)?,
    ];
    for r in &mut rows {
        r.d = Some(planner.d());
    }
    Ok(EditingEval {
        rows,
        conditional,
        unconditional,
    })
}

/// Synthesize from the ground-truth plans of the first `n` held-out clips
/// and compare with the clips: mean `(mel_analog, multiscale)`.
pub fn reconstruction_eval(
    synth: &SynthesizerModel,
    head: &FrozenHead,
    vae: &AcousticVae,
    heldout: &Dataset,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<(f64, f64), ExperimentError> {
    let (_, references) = heldout_slice(heldout, n)?;
    let plans = project_dataset(head, heldout)?;
    let plans = flowplan_pipeline::row_range(&plans, 0, n)?;
    let specs = vae.decode_batch(&synth_sample(synth, &plans, sampler)?)?;
    let mut mel = 0.0;
    let mut ms = 0.0;
    for (r, g) in references.iter().zip(&specs) {
        let (a, b) = recon_metrics(r, g)?;
        mel += a;
        ms += b;
    }
    Ok((mel / n as f64, ms / n as f64))
}

/// Parameter count of the projection head, synthesizer and planner at
/// dimension `d`.
pub fn two_stage_params(config: &Config, latent_dim: usize, d: usize) -> usize {
    let plan_dim = flowplan_world::SEM_FRAMES * d;
    let h = config.model.head_hidden;
    let head = (SEM_DIM + 1) * h + (h + 1) * d;
    let net = |state_dim, cond_dim| {
        VelocityConfig {
            state_dim,
            cond_dim,
            width: config.model.width,
            depth: config.model.depth,
        }
        .num_params()
    };
    head + net(latent_dim, plan_dim) + net(plan_dim, COND_DIM)
}

/// Baseline width matching the two-stage budget at the configured `d`.
pub fn baseline_width(config: &Config, latent_dim: usize) -> usize {
    matched_width(
        latent_dim,
        COND_DIM,
        config.model.depth,
        two_stage_params(config, latent_dim, config.model.d),
    )
}

pub struct AblationPoint {
    pub d: usize,
    pub synth: SynthesizerModel,
    pub head: FrozenHead,
    pub planner: PlannerModel,
    pub row: MetricRow,
}

/// Train a synthesizer and planner for each `d` with identical seeds, and
/// report generation alignment and ground-truth-plan reconstruction.
pub fn ablate_d(
    train: &Dataset,
    heldout: &Dataset,
    vae: &AcousticVae,
    config: &Config,
    dims: &[usize],
) -> Result<Vec<AblationPoint>, ExperimentError> {
    let samplers = GenerationSamplers::from_config(config);
    let n = config.eval.prompts;
    let (prompts, references) = heldout_slice(heldout, n)?;
    let mut out = Vec::with_capacity(dims.len());
    for &d in dims {
        let (synth, head, _) = train_synthesizer(train, vae, &config.synth_config(d))?;
        let (planner, _) = train_planner(train, &head, &config.planner_config())?;
        let specs = generate_with(&planner, &synth, vae, &prompts, &samplers.plan, &samplers.synth)?;
        let mut row = score_generation("ablate", "two-stage", &specs, &prompts, &references)?;
        let (mel, ms) = reconstruction_eval(&synth, &head, vae, heldout, n, &samplers.synth)?;
        row.mel_analog = Some(mel);
        row.multiscale = Some(ms);
        row.d = Some(d);
        row.seed = Some(config.seed);
        row.steps = Some(config.train.steps);
        out.push(AblationPoint {
            d,
            synth,
            head,
            planner,
            row,
        });
    }
    Ok(out)
}
