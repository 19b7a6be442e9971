//! Symbolic prompts: ordered event-class tokens, their sampling grammar,
//! the oracle prompt encoders, and rule-based edit perturbations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use flowplan_core::Tensor;

use crate::error::WorldError;
use crate::{COND_DIM, MAX_TOKENS, NUM_CLASSES, TOKEN_DIM};

/// Sampling parameters for prompts, timelines and rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Frames of linear attack at the start of each event.
    pub attack_frames: usize,
    /// Exponential decay constant, in frames, after the attack.
    pub decay_frames: f64,
    /// Standard deviation of the additive noise floor.
    pub noise_std: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            min_tokens: 1,
            max_tokens: MAX_TOKENS,
            min_duration: 8,
            max_duration: 16,
            attack_frames: 2,
            decay_frames: 10.0,
            noise_std: 0.01,
        }
    }
}

/// An ordered list of event classes with no immediate repeats.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSpec {
    tokens: Vec<u8>,
}

impl PromptSpec {
    pub fn new(tokens: Vec<u8>) -> Result<Self, WorldError> {
        let invalid = |reason: &str| WorldError::InvalidPrompt {
            tokens: tokens.clone(),
            reason: reason.to_string(),
        };
        if tokens.is_empty() {
            return Err(WorldError::EmptyPrompt);
        }
        if tokens.len() > MAX_TOKENS {
            return Err(invalid("too many tokens"));
        }
        if tokens.iter().any(|&t| t as usize >= NUM_CLASSES) {
            return Err(invalid("class index out of range"));
        }
        if tokens.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("immediate repeat"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sample a prompt: uniform length in `[min_tokens, max_tokens]`, each token
/// uniform over the classes that differ from its predecessor.
pub fn sample_prompt<R: Rng + ?Sized>(rng: &mut R, grammar: &Grammar) -> PromptSpec {
    let len = rng.random_range(grammar.min_tokens..=grammar.max_tokens);
    let mut tokens: Vec<u8> = Vec::with_capacity(len);
    for _ in 0..len {
        let t = match tokens.last() {
            None => rng.random_range(0..NUM_CLASSES as u8),
            Some(&prev) => {
                // uniform over the other classes
                let r = rng.random_range(0..NUM_CLASSES as u8 - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            }
        };
        tokens.push(t);
    }
    PromptSpec { tokens }
}

/// Oracle prompt encodings: a global class histogram and per-token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCondition {
    /// `[NUM_CLASSES]`, token counts divided by prompt length.
    pub global: Tensor,
    /// `[MAX_TOKENS, TOKEN_DIM]`: one-hot class followed by `position / 4`;
    /// rows past the prompt length are zero.
    pub tokens: Tensor,
}

impl PromptCondition {
    /// `global ⊕ flatten(tokens)`, length [`COND_DIM`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(COND_DIM);
        v.extend_from_slice(self.global.data());
        v.extend_from_slice(self.tokens.data());
        v
    }

    /// The all-zeros null condition.
    pub fn null() -> Self {
        Self {
            global: Tensor::zeros(&[NUM_CLASSES]),
            tokens: Tensor::zeros(&[MAX_TOKENS, TOKEN_DIM]),
        }
    }
}

pub fn encode_prompt(prompt: &PromptSpec) -> Result<PromptCondition, WorldError> {
    if prompt.tokens.is_empty() {
        return Err(WorldError::EmptyPrompt);
    }
    let n = prompt.tokens.len() as f64;
    let mut global = Tensor::zeros(&[NUM_CLASSES]);
    let mut tokens = Tensor::zeros(&[MAX_TOKENS, TOKEN_DIM]);
    for (i, &t) in prompt.tokens.iter().enumerate() {
        global.data_mut()[t as usize] += 1.0 / n;
        let row = &mut tokens.data_mut()[i * TOKEN_DIM..(i + 1) * TOKEN_DIM];
        row[t as usize] = 1.0;
        row[NUM_CLASSES] = i as f64 / MAX_TOKENS as f64;
    }
    Ok(PromptCondition { global, tokens })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Replace,
    Swap,
    Insert,
    Delete,
}

fn no_repeats(tokens: &[u8]) -> bool {
    tokens.windows(2).all(|w| w[0] != w[1])
}

/// Every valid result of one edit of the given kind, in a fixed order.
fn candidates(tokens: &[u8], kind: EditKind) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let n = tokens.len();
    match kind {
        EditKind::Replace => {
            for i in 0..n {
                for c in 0..NUM_CLASSES as u8 {
                    if c == tokens[i] {
                        continue;
                    }
                    let mut v = tokens.to_vec();
                    v[i] = c;
                    if no_repeats(&v) {
                        out.push(v);
                    }
                }
            }
        }
        EditKind::Swap => {
            for i in 0..n.saturating_sub(1) {
                let mut v = tokens.to_vec();
                v.swap(i, i + 1);
                if no_repeats(&v) {
                    out.push(v);
                }
            }
        }
        EditKind::Insert if n < MAX_TOKENS => {
            for i in 0..=n {
                for c in 0..NUM_CLASSES as u8 {
                    let mut v = tokens.to_vec();
                    v.insert(i, c);
                    if no_repeats(&v) {
                        out.push(v);
                    }
                }
            }
        }
        EditKind::Delete if n >= 2 => {
            for i in 0..n {
                let mut v = tokens.to_vec();
                v.remove(i);
                if no_repeats(&v) && !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        _ => {}
    }
    out
}

/// Apply one edit chosen uniformly among the kinds that have at least one
/// valid outcome (replace, swap adjacent, insert, delete), then pick that
/// outcome uniformly.
pub fn perturb_prompt<R: Rng + ?Sized>(prompt: &PromptSpec, rng: &mut R) -> (EditKind, PromptSpec) {
    let kinds: Vec<(EditKind, Vec<Vec<u8>>)> = [EditKind::Replace, EditKind::Swap, EditKind::Insert, EditKind::Delete]
        .into_iter()
        .map(|k| (k, candidates(&prompt.tokens, k)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    // replace is always available for a valid prompt
    let (kind, options) = &kinds[rng.random_range(0..kinds.len())];
    let tokens = options[rng.random_range(0..options.len())].clone();
    (*kind, PromptSpec { tokens })
}
