//! Freeze, binding and joint-training contracts on a small trained stack.

use std::sync::OnceLock;

use flowplan_core::rng::{mix, seeded};
use flowplan_core::*;
use flowplan_pipeline::synth::{joint_objective, semantic_frames};
use flowplan_pipeline::*;
use flowplan_world::{Dataset, Grammar, PromptSpec};

struct Stack {
    ds: Dataset,
    vae: AcousticVae,
}

fn train_config(steps: u64, seed: u64, cond_dropout: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        schedule: LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 10,
            decay_interval: 100,
            decay_factor: 0.5,
        },
        cond_dropout,
        seed,
        ..Default::default()
    }
}

fn stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let ds = Dataset::generate(128, 7, &Grammar::default()).unwrap();
        let (vae, _) = train_vae(
            &ds,
            &VaeConfig {
                steps: 100,
                ..Default::default()
            },
        )
        .unwrap();
        Stack { ds, vae }
    })
}

fn synth_config(d: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        head: HeadConfig { d, hidden: 16 },
        width: 24,
        depth: 2,
        train: train_config(30, seed, 0.0),
    }
}

fn planner_config(seed: u64) -> PlannerConfig {
    PlannerConfig {
        width: 24,
        depth: 2,
        train: train_config(30, seed, 0.1),
    }
}

fn assert_same_values(a: &ParamStore, b: &ParamStore) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.ids().zip(b.ids()) {
        assert_eq!(a.name(x), b.name(y));
        assert_eq!(a.value(x), b.value(y), "{}", a.name(x));
    }
}

#[test]
fn frozen_head_is_bitwise_stable_across_planner_training() {
    let s = stack();
    let (_, head, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(4, 1)).unwrap();
    let checksum = head.checksum().to_string();
    let params = head.params().clone();
    let before = project_dataset(&head, &s.ds).unwrap();
    let (planner, _) = train_planner(&s.ds, &head, &planner_config(2)).unwrap();
    let after = project_dataset(&head, &s.ds).unwrap();
    assert_eq!(before.data(), after.data());
    assert_same_values(head.params(), &params);
    assert_eq!(head.checksum(), checksum);
    assert_eq!(planner.head_checksum(), checksum);
}

#[test]
fn checkpoint_round_trip_keeps_freeze_and_binding() {
    let s = stack();
    let (synth, head, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(4, 1)).unwrap();
    let (planner, _) = train_planner(&s.ds, &head, &planner_config(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (hd, sd, pd) = (
        dir.path().join("head"),
        dir.path().join("synth"),
        dir.path().join("planner"),
    );
    head.save(&hd, 1).unwrap();
    synth.save(&sd, 1).unwrap();
    planner.save(&pd, 1).unwrap();

    let head2 = FrozenHead::load(&hd).unwrap();
    assert_eq!(head2.checksum(), head.checksum());
    assert_same_values(head2.params(), head.params());
    let (synth2, planner2) = (SynthesizerModel::load(&sd).unwrap(), PlannerModel::load(&pd).unwrap());
    assert_same_values(&synth2.model.params, &synth.model.params);
    assert_same_values(&planner2.model.params, &planner.model.params);
    planner2.check_compatible(&synth2).unwrap();

    // a frozen head cannot be reopened for training
    assert!(matches!(ProjectionHead::load(&hd), Err(PipelineError::HeadFrozen)));

    // tampering with the recorded checksum is detected
    let meta = hd.join("model.json");
    let text = std::fs::read_to_string(&meta).unwrap();
    std::fs::write(&meta, text.replace(head.checksum(), &"0".repeat(head.checksum().len()))).unwrap();
    assert!(matches!(
        FrozenHead::load(&hd),
        Err(PipelineError::ChecksumMismatch { .. })
    ));
}

#[test]
fn unfrozen_head_is_rejected_as_planner_target() {
    let head = ProjectionHead::new(HeadConfig::default(), &mut seeded(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    head.save(dir.path(), 0).unwrap();
    assert!(matches!(
        FrozenHead::load(dir.path()),
        Err(PipelineError::HeadNotFrozen)
    ));
}

#[test]
fn mismatched_head_is_rejected() {
    let s = stack();
    let (synth_a, head_a, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(4, 1)).unwrap();
    let (synth_b, head_b, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(4, 9)).unwrap();
    assert_ne!(head_a.checksum(), head_b.checksum());
    let (planner, _) = train_planner(&s.ds, &head_a, &planner_config(2)).unwrap();
    planner.check_compatible(&synth_a).unwrap();
    assert!(matches!(
        planner.check_compatible(&synth_b),
        Err(PipelineError::ChecksumMismatch { .. })
    ));
    let prompts = [PromptSpec::new(vec![1, 2]).unwrap()];
    assert!(matches!(
        generate_end_to_end(&planner, &synth_b, &s.vae, &prompts, 0, 0),
        Err(PipelineError::ChecksumMismatch { .. })
    ));

    let (synth_c, _, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(2, 1)).unwrap();
    assert!(matches!(
        planner.check_compatible(&synth_c),
        Err(PipelineError::DimMismatch { .. })
    ));
}

#[test]
fn joint_loss_reaches_the_head() {
    let s = stack();
    let cfg = synth_config(4, 3);
    let mut head = ProjectionHead::new(cfg.head, &mut seeded(1)).unwrap();
    let mut model = VelocityModel::new(
        VelocityConfig {
            state_dim: s.vae.latent_dim(),
            cond_dim: cfg.head.plan_dim(),
            width: cfg.width,
            depth: cfg.depth,
        },
        &mut seeded(2),
    )
    .unwrap();
    // the output layer starts at zero, which would block every upstream
    // gradient, so perturb it first
    let out = model.params.id("out.w").unwrap();
    let w = Tensor::randn(model.params.value(out).shape(), &mut seeded(3)).scale(0.1);
    model.params.set_value(out, w).unwrap();

    let idx = [0usize, 5, 9, 17];
    let dim = s.vae.latent_dim();
    let lat = s.vae.encode_dataset(&s.ds).unwrap();
    let x1 = Tensor::new(&[4, dim], idx.iter().flat_map(|&i| lat.row(i).to_vec()).collect()).unwrap();
    let x0 = Tensor::randn(&[4, dim], &mut seeded(4));
    let frames = semantic_frames(&s.ds, &idx).unwrap();
    let mut tape = Tape::new();
    let loss = joint_objective(&mut tape, &model, &head, &frames, &x0, &x1, &[0.2, 0.4, 0.6, 0.8]).unwrap();
    assert!(tape.value(loss).item() > 0.0);
    tape.backward_many(loss, &mut [&mut model.params, &mut head.params])
        .unwrap();
    for id in head.params.ids() {
        let g = head.params.grad(id);
        assert!(
            g.max_abs() > 0.0,
            "no gradient for head parameter {}",
            head.params.name(id)
        );
    }
}

#[test]
fn planner_dropout_rate_over_ten_thousand_steps() {
    let s = stack();
    let (_, head, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(2, 1)).unwrap();
    let cfg = PlannerConfig {
        width: 4,
        depth: 1,
        train: TrainConfig {
            batch_size: 8,
            ..train_config(10_000, 4, 0.1)
        },
    };
    let (_, stats) = train_planner(&s.ds, &head, &cfg).unwrap();
    assert_eq!(stats.total_rows, 80_000);
    let rate = stats.dropout_rate();
    assert!((rate - 0.10).abs() <= 0.01, "dropout rate {rate}");
}

#[test]
fn generation_is_deterministic_given_seeds() {
    let s = stack();
    let (synth, head, _) = train_synthesizer(&s.ds, &s.vae, &synth_config(4, 1)).unwrap();
    let (planner, _) = train_planner(&s.ds, &head, &planner_config(2)).unwrap();
    let prompts: Vec<PromptSpec> = s.ds.prompts()[..6].to_vec();
    let a = generate_end_to_end(&planner, &synth, &s.vae, &prompts, 3, 4).unwrap();
    let b = generate_end_to_end(&planner, &synth, &s.vae, &prompts, 3, 4).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|x| x.shape() == [64, 16]));
    // a prompt's clip does not depend on the rest of the batch
    let single = generate_end_to_end(&planner, &synth, &s.vae, &prompts[..1], 3, 4).unwrap();
    assert_eq!(single[0], a[0]);

    let plan = plan_sample(
        &planner,
        &prompt_conditions(&prompts).unwrap(),
        &plan_sampler(mix(1, 2)),
    )
    .unwrap();
    let again = plan_sample(
        &planner,
        &prompt_conditions(&prompts).unwrap(),
        &plan_sampler(mix(1, 2)),
    )
    .unwrap();
    assert_eq!(plan, again);
}

#[test]
fn synthesizer_honours_weight_averaging() {
    let s = stack();
    let with = |ema_decay| {
        let mut cfg = synth_config(4, 1);
        cfg.train.ema_decay = ema_decay;
        train_synthesizer(&s.ds, &s.vae, &cfg).unwrap()
    };
    let (plain, plain_head, _) = with(None);
    // a zero decay tracks the raw weights exactly
    let (zero, zero_head, _) = with(Some(0.0));
    assert_same_values(&zero.model.params, &plain.model.params);
    assert_eq!(zero_head.checksum(), plain_head.checksum());
    let (avg, avg_head, _) = with(Some(0.9));
    assert_ne!(avg.model.params.checksum(), plain.model.params.checksum());
    assert_ne!(avg_head.checksum(), plain_head.checksum());
    assert_eq!(avg.head_checksum(), avg_head.checksum());
}
