use flowplan_core::rng::{seeded, stream};
use flowplan_world::oracle::decode_events;
use flowplan_world::*;
use proptest::prelude::*;

#[test]
fn class_and_length_frequencies_are_uniform() {
    let g = Grammar::default();
    let mut rng = seeded(0);
    let mut class_counts = [0usize; NUM_CLASSES];
    let mut len_counts = [0usize; 5];
    let mut tokens = 0usize;
    let n = 10_000;
    for _ in 0..n {
        let p = sample_prompt(&mut rng, &g);
        len_counts[p.len()] += 1;
        for &t in p.tokens() {
            class_counts[t as usize] += 1;
            tokens += 1;
        }
        assert!(p.tokens().windows(2).all(|w| w[0] != w[1]));
    }
    for c in class_counts {
        let f = c as f64 / tokens as f64;
        assert!((f - 0.125).abs() <= 0.02, "class frequency {f}");
    }
    for &c in &len_counts[1..] {
        let f = c as f64 / n as f64;
        assert!((f - 0.25).abs() <= 0.02, "length frequency {f}");
    }
}

#[test]
fn decode_recovers_rendered_timelines() {
    let g = Grammar::default();
    let mut ok = 0;
    for i in 0..1000 {
        let mut rng = stream(11, i);
        let p = sample_prompt(&mut rng, &g);
        let tl = realize_timeline(&p, &g, &mut rng);
        let clip = render_clip(&tl, &g, i, &mut rng);
        ok += (decode_events(&clip.spectrogram).unwrap() == p.tokens()) as usize;
    }
    assert!(ok >= 990, "{ok}/1000 decoded");
}

#[test]
fn semantic_features_are_noise_robust() {
    let g = Grammar::default();
    for i in 0..200 {
        let mut rng = stream(12, i);
        let p = sample_prompt(&mut rng, &g);
        let tl = realize_timeline(&p, &g, &mut rng);
        let a = render_clip(&tl, &g, 1, &mut seeded(1000 + i));
        let b = render_clip(&tl, &g, 2, &mut seeded(5000 + i));
        let fa = encode_semantics(&a.spectrogram).unwrap().0;
        let fb = encode_semantics(&b.spectrogram).unwrap().0;
        assert!(fa.max_abs_diff(&fb).unwrap() <= 0.1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbations_stay_valid_and_change_the_prompt(seed in 0u64..10_000) {
        let g = Grammar::default();
        let mut rng = seeded(seed);
        let p = sample_prompt(&mut rng, &g);
        let (_, q) = perturb_prompt(&p, &mut rng);
        prop_assert!(PromptSpec::new(q.tokens().to_vec()).is_ok());
        prop_assert_ne!(&q, &p);
        let s = similarity(&p, &q);
        prop_assert!((0.0..1.0).contains(&s));
        prop_assert_eq!(s, similarity(&q, &p));
    }
}
