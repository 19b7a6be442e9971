use flowplan_core::gradcheck::{check, rel_err};
use flowplan_core::rng::seeded;
use flowplan_core::{ParamStore, Tape, Tensor, VelocityConfig, VelocityModel};
use proptest::prelude::*;

/// Two-layer net with every recorded op kind: matmul, bias, SiLU, concat,
/// slice, mul, sub, scale, square, mean.
fn two_layer_loss(store: &ParamStore, x: &Tensor, y: &Tensor, tape: &mut Tape) -> flowplan_core::Var {
    let w1 = tape.param(store, store.id("w1").unwrap());
    let b1 = tape.param(store, store.id("b1").unwrap());
    let w2 = tape.param(store, store.id("w2").unwrap());
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let h = tape.matmul(xv, w1).unwrap();
    let h = tape.add_bias(h, b1).unwrap();
    let h = tape.silu(h);
    let left = tape.slice_cols(h, 0, 3).unwrap();
    let right = tape.slice_cols(h, 3, 6).unwrap();
    let gated = tape.mul(left, right).unwrap();
    let h = tape.concat_cols(&[gated, left]).unwrap();
    let out = tape.matmul(h, w2).unwrap();
    let out = tape.scale(out, 0.5);
    let diff = tape.sub(out, yv).unwrap();
    let sq = tape.square(diff);
    tape.mean(sq)
}

fn two_layer_store(seed: u64) -> (ParamStore, Tensor, Tensor) {
    let mut rng = seeded(seed);
    let mut s = ParamStore::new();
    s.add("w1", Tensor::randn(&[4, 6], &mut rng)).unwrap();
    s.add("b1", Tensor::randn(&[6], &mut rng)).unwrap();
    s.add("w2", Tensor::randn(&[6, 2], &mut rng)).unwrap();
    let x = Tensor::randn(&[5, 4], &mut rng);
    let y = Tensor::randn(&[5, 2], &mut rng);
    (s, x, y)
}

#[test]
fn two_layer_net_matches_finite_differences() {
    for seed in 0..10 {
        let (store, x, y) = two_layer_store(seed);
        let mut grads = store.clone();
        let mut tape = Tape::new();
        let loss = two_layer_loss(&grads, &x, &y, &mut tape);
        tape.backward(loss, &mut grads).unwrap();
        let report = check(
            &store,
            &grads,
            |s| {
                let mut t = Tape::new();
                let l = two_layer_loss(s, &x, &y, &mut t);
                t.value(l).item()
            },
            1e-5,
            usize::MAX,
        );
        assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn velocity_output_sum_matches_finite_differences() {
    let cfg = VelocityConfig {
        state_dim: 5,
        cond_dim: 3,
        width: 12,
        depth: 3,
    };
    for seed in 0..3 {
        let mut rng = seeded(100 + seed);
        let mut model = VelocityModel::new(cfg, &mut rng).unwrap();
        // give the zero-initialized head some weight so every path is live
        let out = model.params.id("out.w").unwrap();
        model.params.set_value(out, Tensor::randn(&[12, 5], &mut rng)).unwrap();
        let x = Tensor::randn(&[4, 5], &mut rng);
        let c = Tensor::randn(&[4, 3], &mut rng);
        let t = [0.1, 0.4, 0.6, 0.95];

        let forward_sum = |m: &VelocityModel| m.forward_rows(&t, &x, &c).unwrap().sum();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let y = model.forward_tape(&mut tape, &t, xv, cv).unwrap();
        let n = tape.value(y).len() as f64;
        let mean = tape.mean(y);
        let total = tape.scale(mean, n);
        tape.backward(total, &mut model.params).unwrap();

        let report = check(
            &model.params,
            &model.params,
            |s| forward_sum(&VelocityModel::from_params(cfg, s.clone()).unwrap()),
            1e-5,
            usize::MAX,
        );
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}

#[test]
fn reshape_routes_gradients() {
    for seed in 0..10 {
        let mut rng = seeded(200 + seed);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[3, 4], &mut rng)).unwrap();
        let x = Tensor::randn(&[6, 3], &mut rng);
        let loss_of = |s: &ParamStore, tape: &mut Tape| {
            let wv = tape.param(s, w);
            let xv = tape.constant(x.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.reshape(y, &[3, 8]).unwrap();
            let head = tape.slice_cols(y, 0, 5).unwrap();
            let sq = tape.square(head);
            let m = tape.silu(sq);
            tape.mean(m)
        };
        let mut grads = store.clone();
        let mut tape = Tape::new();
        let loss = loss_of(&grads, &mut tape);
        tape.backward(loss, &mut grads).unwrap();
        let report = check(
            &store,
            &grads,
            |s| {
                let mut t = Tape::new();
                let l = loss_of(s, &mut t);
                t.value(l).item()
            },
            1e-5,
            usize::MAX,
        );
        assert!(report.max_rel_err <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn input_gradients_are_available() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let sq = tape.square(x);
    let loss = tape.mean(sq);
    let grads = tape.gradients(loss).unwrap();
    let g = grads.of(x, &tape);
    for (gi, xi) in g.data().iter().zip([1.0, -2.0, 3.0]) {
        assert!(rel_err(*gi, 2.0 * xi / 3.0, 1e-12) < 1e-14);
    }
}

#[test]
fn training_step_is_bitwise_deterministic() {
    let run = || {
        let (mut store, x, y) = two_layer_store(42);
        let opt = flowplan_core::AdamW::default();
        let mut tape = Tape::new();
        for _ in 0..5 {
            tape.reset();
            let loss = two_layer_loss(&store, &x, &y, &mut tape);
            tape.backward(loss, &mut store).unwrap();
            opt.step(&mut store, 1e-2).unwrap();
        }
        store
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let (store, x, y) = two_layer_store(seed);
        let y2 = y.scale(-0.5);
        let grad_of = |combine: &dyn Fn(&mut Tape, flowplan_core::Var, flowplan_core::Var) -> flowplan_core::Var| {
            let mut s = store.clone();
            let mut tape = Tape::new();
            let f = two_layer_loss(&s, &x, &y, &mut tape);
            let g = two_layer_loss(&s, &x, &y2, &mut tape);
            let loss = combine(&mut tape, f, g);
            tape.backward(loss, &mut s).unwrap();
            s
        };
        let both = grad_of(&|t, f, g| {
            let a = t.scale(f, alpha);
            let b = t.scale(g, beta);
            t.add(a, b).unwrap()
        });
        let only_f = grad_of(&|_, f, _| f);
        let only_g = grad_of(&|_, _, g| g);
        for id in store.ids() {
            let expect = only_f.grad(id).scale(alpha).axpy(beta, only_g.grad(id)).unwrap();
            prop_assert!(both.grad(id).max_abs_diff(&expect).unwrap() <= 1e-12);
        }
    }
}
