//! The hard editing benchmark: perturb source prompts, score each
//! (source, target) pair by symbolic similarity, keep the least similar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowplan_core::rng::{mix, seeded};

use crate::error::WorldError;
use crate::prompt::{perturb_prompt, PromptSpec};

pub const SOURCES: usize = 50;
pub const PERTURBATIONS: usize = 10;
pub const KEEP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPair {
    pub source_index: usize,
    pub perturbation_index: usize,
    pub source: PromptSpec,
    pub target: PromptSpec,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub seed: u64,
    pub candidates: usize,
    pub pairs: Vec<BenchmarkPair>,
}

/// Longest common subsequence length.
pub fn lcs(a: &[u8], b: &[u8]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

pub fn jaccard(a: &[u8], b: &[u8]) -> f64 {
    let set = |v: &[u8]| v.iter().fold(0u16, |m, &c| m | (1 << c));
    let (sa, sb) = (set(a), set(b));
    let union = (sa | sb).count_ones();
    if union == 0 {
        return 1.0;
    }
    (sa & sb).count_ones() as f64 / union as f64
}

/// `0.5·Jaccard(class sets) + 0.5·LCS / max(len)`.
pub fn similarity(a: &PromptSpec, b: &PromptSpec) -> f64 {
    let (a, b) = (a.tokens(), b.tokens());
    let longest = a.len().max(b.len()).max(1);
    0.5 * jaccard(a, b) + 0.5 * lcs(a, b) as f64 / longest as f64
}

/// Perturb every source `perturbations` times, each with its own sub-seed.
pub fn candidate_pairs(sources: &[(usize, PromptSpec)], perturbations: usize, seed: u64) -> Vec<BenchmarkPair> {
    let mut out = Vec::with_capacity(sources.len() * perturbations);
    for (source_index, source) in sources {
        for j in 0..perturbations {
            let sub = mix(seed, (*source_index as u64) << 16 | j as u64);
            let (_, target) = perturb_prompt(source, &mut seeded(sub));
            out.push(BenchmarkPair {
                source_index: *source_index,
                perturbation_index: j,
                similarity: similarity(source, &target),
                source: source.clone(),
                target,
            });
        }
    }
    out
}

/// Keep the `keep` least similar pairs. Ties break on
/// `(source_index, perturbation_index)`, so the result does not depend on
/// the order of `candidates`.
pub fn select_hard(mut candidates: Vec<BenchmarkPair>, keep: usize) -> Result<Vec<BenchmarkPair>, WorldError> {
    if candidates.len() < keep {
        return Err(WorldError::TooFewCandidates {
            needed: keep,
            found: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| {
        a.similarity
            .total_cmp(&b.similarity)
            .then(a.source_index.cmp(&b.source_index))
            .then(a.perturbation_index.cmp(&b.perturbation_index))
    });
    candidates.truncate(keep);
    Ok(candidates)
}

pub fn build_hard_benchmark(
    sources: &[(usize, PromptSpec)],
    perturbations: usize,
    keep: usize,
    seed: u64,
) -> Result<BenchmarkSet, WorldError> {
    let candidates = candidate_pairs(sources, perturbations, seed);
    let n = candidates.len();
    Ok(BenchmarkSet {
        seed,
        candidates: n,
        pairs: select_hard(candidates, keep)?,
    })
}

impl BenchmarkSet {
    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| WorldError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(WorldError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = fs::read_to_string(path).map_err(WorldError::io(path))?;
        serde_json::from_str(&text).map_err(|source| WorldError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{sample_prompt, Grammar};

    fn p(t: &[u8]) -> PromptSpec {
        PromptSpec::new(t.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&p(&[1, 2]), &p(&[2, 1])), 0.75);
        assert_eq!(similarity(&p(&[1, 2]), &p(&[1, 2])), 1.0);
        assert_eq!(similarity(&p(&[1]), &p(&[2])), 0.0);
        assert_eq!(lcs(&[1, 2, 3, 4], &[2, 4, 3]), 2);
    }

    fn sources(n: usize) -> Vec<(usize, PromptSpec)> {
        let g = Grammar::default();
        let mut rng = seeded(4);
        (0..n).map(|i| (i, sample_prompt(&mut rng, &g))).collect()
    }

    #[test]
    fn fifty_by_ten_keeps_hundred_hardest() {
        let set = build_hard_benchmark(&sources(50), 10, 100, 9).unwrap();
        assert_eq!(set.candidates, 500);
        assert_eq!(set.pairs.len(), 100);
        assert!(set.pairs.windows(2).all(|w| w[0].similarity <= w[1].similarity));
        let cutoff = set.pairs.last().unwrap().similarity;
        let all = candidate_pairs(&sources(50), 10, 9);
        let harder = all.iter().filter(|c| c.similarity < cutoff).count();
        assert!(harder <= 100);
        assert!(set.pairs.iter().all(|c| c.similarity < 1.0));
    }

    #[test]
    fn identical_pairs_are_not_retained() {
        let mut all = candidate_pairs(&sources(20), 10, 1);
        all.push(BenchmarkPair {
            source_index: 0,
            perturbation_index: 99,
            source: p(&[1, 2]),
            target: p(&[1, 2]),
            similarity: 1.0,
        });
        let kept = select_hard(all, 100).unwrap();
        assert!(kept.iter().all(|c| c.similarity < 1.0));
    }

    #[test]
    fn selection_ignores_input_order() {
        let all = candidate_pairs(&sources(50), 10, 3);
        let mut rev = all.clone();
        rev.reverse();
        assert_eq!(select_hard(all, 100).unwrap(), select_hard(rev, 100).unwrap());
    }

    #[test]
    fn too_few_candidates() {
        assert!(matches!(
            build_hard_benchmark(&sources(5), 10, 100, 0),
            Err(WorldError::TooFewCandidates { needed: 100, found: 50 })
        ));
    }

    #[test]
    fn perturbation_sub_seeds_are_distinct() {
        let all = candidate_pairs(&sources(1), 10, 3);
        let distinct: std::collections::HashSet<_> = all.iter().map(|c| c.target.clone()).collect();
        assert!(distinct.len() > 1);
    }
}
