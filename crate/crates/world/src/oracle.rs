//! Fixed oracle encoders and the event decoder.
//!
//! Everything here is a pure function of the spectrogram. Per semantic
//! window (4 pooled acoustic frames) the matched-filter energy of class `k`
//! is the inner product of the pooled frame with the class profile, divided
//! by the profile's squared norm, so an isolated unit-amplitude event of
//! class `k` has energy exactly 1 in its own filter.

use std::f64::consts::PI;

use flowplan_core::Tensor;

use crate::error::WorldError;
use crate::render::class_profile;
use crate::{CHANNELS, FRAMES, NUM_CLASSES, POOL, SEM_DIM, SEM_FRAMES};

/// Minimum matched-filter energy for a window to count as non-silent.
pub const DETECTION_THRESHOLD: f64 = 0.15;

/// Frame-level semantic features, `[SEM_FRAMES, SEM_DIM]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeatures(pub Tensor);

fn check_spectrogram(spec: &Tensor) -> Result<(), WorldError> {
    if spec.shape() != [FRAMES, CHANNELS] {
        return Err(WorldError::Shape {
            what: "spectrogram",
            expected: vec![FRAMES, CHANNELS],
            found: spec.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-window, per-class matched-filter energies.
pub fn matched_energies(spec: &Tensor) -> Result<[[f64; NUM_CLASSES]; SEM_FRAMES], WorldError> {
    check_spectrogram(spec)?;
    let profiles: Vec<[f64; CHANNELS]> = (0..NUM_CLASSES).map(class_profile).collect();
    let norms: Vec<f64> = profiles.iter().map(|p| p.iter().map(|v| v * v).sum()).collect();
    let mut out = [[0.0; NUM_CLASSES]; SEM_FRAMES];
    for (n, energies) in out.iter_mut().enumerate() {
        let mut pooled = [0.0; CHANNELS];
        for f in n * POOL..(n + 1) * POOL {
            for (acc, v) in pooled.iter_mut().zip(spec.row(f)) {
                *acc += v / POOL as f64;
            }
        }
        for (k, e) in energies.iter_mut().enumerate() {
            *e = pooled.iter().zip(&profiles[k]).map(|(a, b)| a * b).sum::<f64>() / norms[k];
        }
    }
    Ok(out)
}

/// Semantic features per window `n`: energies (dims 0..8), their first
/// difference over windows (8..16, zero at `n = 0`), and the energies
/// modulated by `sin(πn/N)` (16..24) and `cos(πn/N)` (24..32).
pub fn encode_semantics(spec: &Tensor) -> Result<SemanticFeatures, WorldError> {
    let energies = matched_energies(spec)?;
    let mut feats = Tensor::zeros(&[SEM_FRAMES, SEM_DIM]);
    let data = feats.data_mut();
    for n in 0..SEM_FRAMES {
        let phase = PI * n as f64 / SEM_FRAMES as f64;
        let (s, c) = phase.sin_cos();
        let row = &mut data[n * SEM_DIM..(n + 1) * SEM_DIM];
        for k in 0..NUM_CLASSES {
            let e = energies[n][k];
            row[k] = e;
            row[NUM_CLASSES + k] = if n == 0 { 0.0 } else { e - energies[n - 1][k] };
            row[2 * NUM_CLASSES + k] = e * s;
            row[3 * NUM_CLASSES + k] = e * c;
        }
    }
    Ok(SemanticFeatures(feats))
}

/// Class of the strongest filter, ties toward the lower class, or `None`
/// when no energy exceeds [`DETECTION_THRESHOLD`].
pub fn window_class(energies: &[f64; NUM_CLASSES]) -> Option<u8> {
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if energies[k] > energies[best] {
            best = k;
        }
    }
    (energies[best] > DETECTION_THRESHOLD).then_some(best as u8)
}

/// Decode the ordered event classes: classify every window, drop silent
/// windows, and merge runs of the same class.
pub fn decode_events(spec: &Tensor) -> Result<Vec<u8>, WorldError> {
    let energies = matched_energies(spec)?;
    let mut out: Vec<u8> = Vec::new();
    for e in &energies {
        if let Some(k) = window_class(e) {
            if out.last() != Some(&k) {
                out.push(k);
            }
        }
    }
    Ok(out)
}

/// Softmax over per-class matched-filter energies summed across windows.
pub fn class_distribution(spec: &Tensor) -> Result<[f64; NUM_CLASSES], WorldError> {
    let energies = matched_energies(spec)?;
    let mut totals = [0.0; NUM_CLASSES];
    for e in &energies {
        for (t, v) in totals.iter_mut().zip(e) {
            *t += v;
        }
    }
    let m = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = totals.map(|t| (t - m).exp());
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok(p)
}
