//! Evaluation metrics judged by the fixed oracle: event alignment,
//! Fréchet distance over pooled semantic features, class-distribution KL,
//! and the inception-score analog.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use flowplan_core::Tensor;
use flowplan_world::benchmark::lcs;
use flowplan_world::oracle::class_distribution;
use flowplan_world::{decode_events, encode_semantics, PromptSpec, WorldError, NUM_CLASSES, SEM_DIM};

/// Diagonal load added to every covariance before taking square roots.
pub const COV_EPS: f64 = 1e-6;
/// Additive smoothing inside the KL logarithm.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("feature statistics need at least one sample")]
    NoSamples,
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("eigendecomposition produced non-finite values")]
    Eigen,
}

/// Set F1 between the decoded and prompted class sets, and the LCS of the
/// two sequences divided by the prompt length.
pub fn alignment_score(decoded: &[u8], prompt: &PromptSpec) -> (f64, f64) {
    let set = |v: &[u8]| v.iter().fold(0u16, |m, &c| m | (1 << c));
    let (d, p) = (set(decoded), set(prompt.tokens()));
    let hit = (d & p).count_ones() as f64;
    let f1 = if hit == 0.0 {
        0.0
    } else {
        2.0 * hit / (d.count_ones() + p.count_ones()) as f64
    };
    let order = lcs(decoded, prompt.tokens()) as f64 / prompt.len() as f64;
    (f1, order)
}

/// Decode a spectrogram with the oracle and score it against a prompt.
pub fn spectrogram_alignment(spec: &Tensor, prompt: &PromptSpec) -> Result<(f64, f64), MetricError> {
    Ok(alignment_score(&decode_events(spec)?, prompt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim` covariance.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and covariance (divisor `n − 1`, or `1` for a single sample).
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self, MetricError> {
        let n = samples.len();
        let dim = samples.first().ok_or(MetricError::NoSamples)?.len();
        if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
            return Err(MetricError::Dim(dim, bad.len()));
        }
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n as f64;
            }
        }
        let denom = (n.max(2) - 1) as f64;
        let mut cov = vec![0.0; dim * dim];
        for s in samples {
            for i in 0..dim {
                let di = s[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (s[j] - mean[j]) / denom;
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov[i * dim + j] = cov[j * dim + i];
            }
        }
        Ok(Self { mean, cov })
    }

    /// Statistics of oracle semantic features averaged over frames.
    pub fn from_spectrograms(specs: &[Tensor]) -> Result<Self, MetricError> {
        let pooled = specs.iter().map(pooled_features).collect::<Result<Vec<_>, _>>()?;
        Self::from_samples(&pooled)
    }

    fn regularized(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov) + DMatrix::identity(d, d) * COV_EPS
    }
}

/// Semantic features of one spectrogram, averaged over frames (length 32).
pub fn pooled_features(spec: &Tensor) -> Result<Vec<f64>, MetricError> {
    let f = encode_semantics(spec)?.0;
    let mut out = vec![0.0; SEM_DIM];
    for n in 0..f.rows() {
        for (o, v) in out.iter_mut().zip(f.row(n)) {
            *o += v / f.rows() as f64;
        }
    }
    Ok(out)
}

/// Square root of a symmetric matrix, negative eigenvalues clamped to 0.
fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::Eigen);
    }
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2·(Σ1^½ Σ2 Σ1^½)^½)` on regularized
/// covariances. Clamped at zero.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::Dim(a.dim(), b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (s1, s2) = (a.regularized(), b.regularized());
    let r1 = sqrt_psd(s1.clone())?;
    let mut inner = &r1 * &s2 * &r1;
    // symmetrize away rounding before the second decomposition
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(inner)?.trace();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// `Σ p ln((p + ε) / (q + ε))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&p, &q)| p * ((p + KL_EPS) / (q + KL_EPS)).ln())
        .sum();
    kl.max(0.0)
}

/// Mean of the rows, shifted by the first row so identical rows give that
/// row back exactly.
fn mean_distribution(dists: &[[f64; NUM_CLASSES]]) -> [f64; NUM_CLASSES] {
    let base = dists[0];
    let mut m = base;
    for (k, mk) in m.iter_mut().enumerate() {
        let shift: f64 = dists.iter().map(|d| d[k] - base[k]).sum();
        *mk += shift / dists.len() as f64;
    }
    m
}

/// Mean per-pair `KL(ref_i ‖ gen_i)`.
pub fn kl_paired(reference: &[[f64; NUM_CLASSES]], generated: &[[f64; NUM_CLASSES]]) -> Result<f64, MetricError> {
    if reference.len() != generated.len() {
        return Err(MetricError::Dim(reference.len(), generated.len()));
    }
    if reference.is_empty() {
        return Err(MetricError::NoSamples);
    }
    let total: f64 = reference.iter().zip(generated).map(|(r, g)| kl_divergence(r, g)).sum();
    Ok(total / reference.len() as f64)
}

/// KL between the dataset-level mean distributions of two unpaired sets.
pub fn kl_marginal(reference: &[[f64; NUM_CLASSES]], generated: &[[f64; NUM_CLASSES]]) -> Result<f64, MetricError> {
    if reference.is_empty() || generated.is_empty() {
        return Err(MetricError::NoSamples);
    }
    Ok(kl_divergence(
        &mean_distribution(reference),
        &mean_distribution(generated),
    ))
}

/// `exp(mean_i KL(p_i ‖ p̄))`, clamped to its range `[1, NUM_CLASSES]`.
pub fn is_analog(dists: &[[f64; NUM_CLASSES]]) -> Result<f64, MetricError> {
    if dists.is_empty() {
        return Err(MetricError::NoSamples);
    }
    let marginal = mean_distribution(dists);
    let mean_kl: f64 = dists.iter().map(|p| kl_divergence(p, &marginal)).sum::<f64>() / dists.len() as f64;
    Ok(mean_kl.exp().clamp(1.0, NUM_CLASSES as f64))
}

pub fn class_distributions(specs: &[Tensor]) -> Result<Vec<[f64; NUM_CLASSES]>, MetricError> {
    Ok(specs.iter().map(class_distribution).collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(t: &[u8]) -> PromptSpec {
        PromptSpec::new(t.to_vec()).unwrap()
    }

    fn stats1(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: vec![mu],
            cov: vec![var],
        }
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment_score(&[1, 2], &p(&[2, 1])), (1.0, 0.5));
        assert_eq!(alignment_score(&[], &p(&[3])), (0.0, 0.0));
        assert_eq!(alignment_score(&[3, 4], &p(&[3, 4])), (1.0, 1.0));
        let (f1, _) = alignment_score(&[1], &p(&[1, 2]));
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn frechet_one_dimensional_cases() {
        let same = frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 1.0)).unwrap();
        assert!(same.abs() < 1e-6);
        let shifted = frechet_distance(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap();
        assert!((shifted - 1.0).abs() < 1e-6);
        let scaled = frechet_distance(&stats1(0.0, 4.0), &stats1(0.0, 1.0)).unwrap();
        assert!((scaled - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        let a = FeatureStats {
            mean: vec![0.0, 1.0],
            cov: vec![4.0, 0.0, 0.0, 9.0],
        };
        let b = FeatureStats {
            mean: vec![1.0, 1.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
        };
        // 1 + (2 − 1)² + (3 − 1)²
        assert!((frechet_distance(&a, &b).unwrap() - 6.0).abs() < 1e-5);
        assert!(frechet_distance(&a, &stats1(0.0, 1.0)).is_err());
    }

    #[test]
    fn kl_hand_computed() {
        let kl = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]);
        assert!((kl - 0.368).abs() < 1e-3);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn is_examples() {
        let mut d = [0.0; NUM_CLASSES];
        d[..3].copy_from_slice(&[0.2, 0.3, 0.5]);
        assert_eq!(is_analog(&[d, d, d]).unwrap(), 1.0);
        let onehots: Vec<[f64; NUM_CLASSES]> = (0..NUM_CLASSES)
            .map(|k| {
                let mut e = [0.0; NUM_CLASSES];
                e[k] = 1.0;
                e
            })
            .collect();
        assert!((is_analog(&onehots).unwrap() - 8.0).abs() < 1e-6);
    }

    #[test]
    fn sample_covariance() {
        let s = FeatureStats::from_samples(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 4.0]);
        assert_eq!(s.cov, vec![2.0, 4.0, 4.0, 8.0]);
        assert!(FeatureStats::from_samples(&[]).is_err());
    }

    fn dist() -> impl Strategy<Value = [f64; NUM_CLASSES]> {
        prop::array::uniform8(0.0f64..1.0).prop_filter_map("positive mass", |raw| {
            let z: f64 = raw.iter().sum();
            (z > 1e-3).then(|| raw.map(|v| v / z))
        })
    }

    fn stats(dim: usize) -> impl Strategy<Value = FeatureStats> {
        prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), 2..12)
            .prop_map(|s| FeatureStats::from_samples(&s).unwrap())
    }

    proptest! {
        #[test]
        fn kl_non_negative(a in dist(), b in dist()) {
            prop_assert!(kl_divergence(&a, &b) >= 0.0);
        }

        #[test]
        fn is_within_bounds(ds in prop::collection::vec(dist(), 1..20)) {
            let v = is_analog(&ds).unwrap();
            prop_assert!((1.0..=8.0).contains(&v));
        }

        #[test]
        fn frechet_symmetric_and_zero_on_self(a in stats(4), b in stats(4)) {
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        }
    }
}
