//! Seeded generators for small hierarchical corpora whose labels follow
//! from latent features rendered as word cues.
//!
//! Each example has a latent offensiveness bit and a latent target
//! (none, individual, group, other). The text always carries a cue word for
//! the target and carries insult cues when the latent bit is set. Sub-task A
//! is the latent bit flipped with probability `label_noise`; B and C follow
//! from A and the latent target, so every triple is consistent.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LabelTriple, LabeledExample, ScoredExample, TaskLabelA, TaskLabelB, TaskLabelC};
use crate::textnorm::{Normalizer, RawTweet};

const FILLER: &[&str] = &[
    "the", "a", "is", "was", "this", "that", "today", "really", "just", "so", "about", "with", "what", "again",
    "news", "game", "week", "think", "said", "going", "time", "people", "see", "know", "still", "never",
];
const INSULTS: &[&str] = &["idiot", "stupid", "trash", "pathetic", "moron", "disgusting", "clown", "liar"];
const MILD: &[&str] = &["crazy", "wild", "insane", "unreal"];
const NO_TARGET: &[&str] = &["damn", "ugh", "whatever", "seriously"];
const INDIVIDUAL: &[&str] = &["you", "he", "she", "@user"];
const GROUP: &[&str] = &["they", "liberals", "conservatives", "fans"];
const OTHER: &[&str] = &["media", "company", "government", "league"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

fn render(rng: &mut ChaCha8Rng, offensive: bool, target: TaskLabelC) -> String {
    let n_filler = rng.gen_range(3..8);
    let mut words: Vec<&str> = (0..n_filler).map(|_| pick(rng, FILLER)).collect();
    words.push(match target {
        TaskLabelC::Ind => pick(rng, INDIVIDUAL),
        TaskLabelC::Grp => pick(rng, GROUP),
        TaskLabelC::Oth => pick(rng, OTHER),
        TaskLabelC::Null => pick(rng, NO_TARGET),
    });
    if offensive {
        for _ in 0..rng.gen_range(1..3) {
            words.push(pick(rng, INSULTS));
        }
    } else if rng.gen_bool(0.3) {
        words.push(pick(rng, MILD));
    }
    words.shuffle(rng);
    words.join(" ")
}

fn labels(a: TaskLabelA, target: TaskLabelC) -> LabelTriple {
    let triple = match (a, target) {
        (TaskLabelA::Not, _) => (TaskLabelA::Not, TaskLabelB::Null, TaskLabelC::Null),
        (TaskLabelA::Off, TaskLabelC::Null) => (TaskLabelA::Off, TaskLabelB::Unt, TaskLabelC::Null),
        (TaskLabelA::Off, t) => (TaskLabelA::Off, TaskLabelB::Tin, t),
    };
    LabelTriple::new(triple.0, triple.1, triple.2).expect("generated triples are consistent")
}

/// `n` labeled examples with distinct texts; `label_noise` is the
/// probability that sub-task A disagrees with the latent bit.
pub fn hierarchical_corpus(n: usize, label_noise: f64, seed: u64) -> Vec<LabeledExample> {
    assert!((0.0..=1.0).contains(&label_noise), "label_noise must be a probability");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = [TaskLabelC::Ind, TaskLabelC::Grp, TaskLabelC::Oth, TaskLabelC::Null];
    let normalizer = Normalizer::default();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let offensive = rng.gen_bool(0.5);
        let target = targets[rng.gen_range(0..targets.len())];
        let text = render(&mut rng, offensive, target);
        if !seen.insert(text.clone()) {
            continue;
        }
        let flip = rng.gen_bool(label_noise);
        let a = if offensive != flip { TaskLabelA::Off } else { TaskLabelA::Not };
        out.push(LabeledExample {
            tweet: normalizer.normalize(&RawTweet::new(format!("syn{}", out.len()), text)),
            labels: labels(a, target),
            synthetic: false,
        });
    }
    out
}

/// `n` examples whose `avg_conf` grows with the number of insult cues in
/// the text.
pub fn scored_corpus(n: usize, seed: u64) -> Vec<ScoredExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalizer = Normalizer::default();
    (0..n)
        .map(|i| {
            let n_insults = rng.gen_range(0..4usize);
            let n_filler = rng.gen_range(3..8);
            let mut words: Vec<&str> = (0..n_filler).map(|_| pick(&mut rng, FILLER)).collect();
            words.extend((0..n_insults).map(|_| pick(&mut rng, INSULTS)));
            words.shuffle(&mut rng);
            let jitter: f64 = rng.gen_range(-0.05..0.05);
            let avg_conf = (0.1 + 0.25 * n_insults as f64 + jitter).clamp(0.0, 1.0);
            ScoredExample {
                tweet: normalizer.normalize(&RawTweet::new(format!("scored{i}"), words.join(" "))),
                avg_conf,
                std_conf: rng.gen_range(0.0..0.2),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_consistent_and_distinct() {
        let a = hierarchical_corpus(200, 0.1, 3);
        assert_eq!(a, hierarchical_corpus(200, 0.1, 3));
        assert_ne!(a, hierarchical_corpus(200, 0.1, 4));
        let texts: HashSet<_> = a.iter().map(|ex| ex.tweet.text.clone()).collect();
        assert_eq!(texts.len(), 200);
        assert!(a.iter().all(|ex| LabelTriple::is_consistent(ex.labels.a(), ex.labels.b(), ex.labels.c())));
        for label in [TaskLabelC::Ind, TaskLabelC::Grp, TaskLabelC::Oth] {
            assert!(a.iter().any(|ex| ex.labels.c() == label));
        }
        assert!(a.iter().any(|ex| ex.labels.b() == TaskLabelB::Unt));
    }

    #[test]
    fn noiseless_labels_follow_cues() {
        for ex in hierarchical_corpus(100, 0.0, 1) {
            let has_insult = ex.tweet.text.split(' ').any(|w| INSULTS.contains(&w));
            assert_eq!(has_insult, ex.labels.a() == TaskLabelA::Off);
        }
    }

    #[test]
    fn scored_targets_in_range() {
        let s = scored_corpus(100, 2);
        assert!(s.iter().all(|ex| (0.0..=1.0).contains(&ex.avg_conf)));
        assert_eq!(s, scored_corpus(100, 2));
    }
}
