//! Event timelines: where each prompted event sits in the clip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::prompt::{Grammar, PromptSpec};
use crate::FRAMES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub class: u8,
    /// First acoustic frame.
    pub onset: usize,
    /// Length in acoustic frames.
    pub duration: usize,
}

impl Event {
    pub fn end(&self) -> usize {
        self.onset + self.duration
    }
}

/// Non-overlapping events in prompt order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub events: Vec<Event>,
}

impl EventTimeline {
    pub fn classes(&self) -> Vec<u8> {
        self.events.iter().map(|e| e.class).collect()
    }

    pub fn is_valid(&self) -> bool {
        !self.events.is_empty()
            && self.events.len() <= crate::MAX_TOKENS
            && self.events.iter().all(|e| e.duration > 0 && e.end() <= FRAMES)
            && self.events.windows(2).all(|w| w[0].end() <= w[1].onset)
    }
}

/// Place the prompt's events in order. Durations are uniform in
/// `[min_duration, max_duration]`; the leftover frames are split into the
/// `n + 1` gaps around the events by a uniformly random composition, so the
/// events never overlap and always fit.
pub fn realize_timeline<R: Rng + ?Sized>(prompt: &PromptSpec, grammar: &Grammar, rng: &mut R) -> EventTimeline {
    let n = prompt.len();
    let mut durations: Vec<usize> = (0..n)
        .map(|_| rng.random_range(grammar.min_duration..=grammar.max_duration))
        .collect();
    // shrink evenly if an unusual grammar over-fills the clip
    while durations.iter().sum::<usize>() > FRAMES {
        let i = durations
            .iter()
            .enumerate()
            .max_by_key(|(i, d)| (**d, usize::MAX - i))
            .map(|(i, _)| i)
            .unwrap_or(0);
        durations[i] -= 1;
    }
    let slack = FRAMES - durations.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();

    let mut events = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for ((&class, &duration), &cut) in prompt.tokens().iter().zip(&durations).zip(&cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        events.push(Event {
            class,
            onset: cursor,
            duration,
        });
        cursor += duration;
    }
    EventTimeline { events }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::sample_prompt;
    use flowplan_core::rng::seeded;

    #[test]
    fn single_event_fits() {
        let p = PromptSpec::new(vec![5]).unwrap();
        let g = Grammar::default();
        let mut rng = seeded(0);
        for _ in 0..500 {
            let tl = realize_timeline(&p, &g, &mut rng);
            let e = tl.events[0];
            assert!(e.onset <= FRAMES - e.duration);
            assert!((8..=16).contains(&e.duration));
        }
    }

    #[test]
    fn random_prompts_give_valid_ordered_timelines() {
        let g = Grammar::default();
        let mut rng = seeded(1);
        for _ in 0..2000 {
            let p = sample_prompt(&mut rng, &g);
            let tl = realize_timeline(&p, &g, &mut rng);
            assert!(tl.is_valid(), "{tl:?}");
            assert_eq!(tl.classes(), p.tokens());
            assert!(tl.events.windows(2).all(|w| w[0].onset < w[1].onset));
        }
    }

    #[test]
    fn reproducible() {
        let p = PromptSpec::new(vec![2, 5]).unwrap();
        let g = Grammar::default();
        assert_eq!(
            realize_timeline(&p, &g, &mut seeded(3)),
            realize_timeline(&p, &g, &mut seeded(3))
        );
    }
}
