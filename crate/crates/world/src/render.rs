//! Spectrogram rendering of event timelines.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use flowplan_core::Tensor;

use crate::prompt::Grammar;
use crate::timeline::EventTimeline;
use crate::{CHANNELS, FRAMES};

/// Width of each class's Gaussian channel profile.
pub const PROFILE_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedClip {
    /// `[FRAMES, CHANNELS]`, non-negative.
    pub spectrogram: Tensor,
    pub timeline: EventTimeline,
    pub seed: u64,
}

/// Channel profile of class `k`: a Gaussian bump centred on channel `2k`.
pub fn class_profile(k: usize) -> [f64; CHANNELS] {
    let mu = 2.0 * k as f64;
    let mut p = [0.0; CHANNELS];
    for (c, v) in p.iter_mut().enumerate() {
        let d = c as f64 - mu;
        *v = (-d * d / (2.0 * PROFILE_WIDTH * PROFILE_WIDTH)).exp();
    }
    p
}

/// Amplitude `tau` frames after onset: linear attack, then exponential decay.
pub fn envelope(tau: usize, grammar: &Grammar) -> f64 {
    let attack = grammar.attack_frames.max(1);
    if tau < attack {
        (tau + 1) as f64 / attack as f64
    } else {
        (-((tau + 1 - attack) as f64) / grammar.decay_frames).exp()
    }
}

/// Noise-free rendering.
pub fn render_clean(timeline: &EventTimeline, grammar: &Grammar) -> Tensor {
    let mut spec = Tensor::zeros(&[FRAMES, CHANNELS]);
    let data = spec.data_mut();
    for e in &timeline.events {
        let profile = class_profile(e.class as usize);
        for tau in 0..e.duration {
            let frame = e.onset + tau;
            if frame >= FRAMES {
                break;
            }
            let a = envelope(tau, grammar);
            for (c, p) in profile.iter().enumerate() {
                data[frame * CHANNELS + c] += a * p;
            }
        }
    }
    spec
}

/// Render with an i.i.d. Gaussian noise floor, clamped at zero.
pub fn render_clip<R: Rng + ?Sized>(
    timeline: &EventTimeline,
    grammar: &Grammar,
    seed: u64,
    rng: &mut R,
) -> RenderedClip {
    let mut spectrogram = render_clean(timeline, grammar);
    if grammar.noise_std > 0.0 {
        let noise = Normal::new(0.0, grammar.noise_std).expect("finite noise std");
        for v in spectrogram.data_mut() {
            *v = (*v + noise.sample(rng)).max(0.0);
        }
    }
    RenderedClip {
        spectrogram,
        timeline: timeline.clone(),
        seed,
    }
}
