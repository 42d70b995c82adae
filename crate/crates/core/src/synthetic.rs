//! Planted-trigger classification corpora.
//!
//! Every sentence carries exactly one trigger word whose class is the label,
//! optionally a negation word that flips a binary label, and filler drawn
//! from a distractor list. The planted words are recorded as the gold
//! rationale, so explanations can be scored against a known answer.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tokenizer::{pre_tokenize, Tokenizer, Vocab, UNK_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub token: String,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Negation {
    pub token: String,
    /// Chance that a sentence carries the negation word.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub triggers: Vec<Trigger>,
    pub distractors: Vec<String>,
    /// Inclusive range of distractor words per sentence.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Per-class sampling weights; uniform when empty.
    #[serde(default)]
    pub class_prior: Vec<f64>,
    #[serde(default)]
    pub negation: Option<Negation>,
    #[serde(default)]
    pub splits: SplitFractions,
}

const SINGLE_TRIGGER: &str = include_str!("../assets/single_trigger.json");
const TOPICS: &str = include_str!("../assets/topics.json");

impl SyntheticTaskSpec {
    /// Binary task: `good` marks class 1, `bad` class 0.
    pub fn single_trigger() -> Self {
        serde_json::from_str(SINGLE_TRIGGER).expect("bundled spec parses")
    }

    /// Four-class task with one topic word per class.
    pub fn topics() -> Self {
        serde_json::from_str(TOPICS).expect("bundled spec parses")
    }

    pub fn prior(&self) -> Vec<f64> {
        if self.class_prior.is_empty() {
            vec![1.0 / self.num_classes as f64; self.num_classes]
        } else {
            let total: f64 = self.class_prior.iter().sum();
            self.class_prior.iter().map(|p| p / total).collect()
        }
    }

    /// Checks internal consistency and that every word is a single
    /// vocabulary token.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail("a task needs at least two classes".into());
        }
        if self.min_distractors > self.max_distractors {
            return fail("min_distractors > max_distractors".into());
        }
        if !self.class_prior.is_empty()
            && (self.class_prior.len() != self.num_classes
                || self.class_prior.iter().any(|&p| !(p >= 0.0 && p.is_finite()))
                || self.class_prior.iter().sum::<f64>() <= 0.0)
        {
            return fail("class_prior must hold one nonnegative weight per class".into());
        }
        let s = &self.splits;
        if [s.train, s.validation, s.test].iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (s.train + s.validation + s.test - 1.0).abs() > 1e-9
        {
            return fail("split fractions must be in [0, 1] and sum to 1".into());
        }
        for class in 0..self.num_classes {
            if !self.triggers.iter().any(|t| t.class == class) {
                return fail(format!("class {class} has no trigger"));
            }
        }
        if let Some(t) = self.triggers.iter().find(|t| t.class >= self.num_classes) {
            return fail(format!("trigger {:?} has class {} out of range", t.token, t.class));
        }
        if let Some(neg) = &self.negation {
            if self.num_classes != 2 {
                return fail("negation requires a binary task".into());
            }
            if !(0.0..=1.0).contains(&neg.probability) {
                return fail("negation probability must be in [0, 1]".into());
            }
        }
        if self.max_distractors > 0 && self.distractors.is_empty() {
            return fail("no distractor words".into());
        }
        let special: BTreeSet<&str> = self
            .triggers
            .iter()
            .map(|t| t.token.as_str())
            .chain(self.negation.as_ref().map(|n| n.token.as_str()))
            .collect();
        if let Some(d) = self.distractors.iter().find(|d| special.contains(d.as_str())) {
            return fail(format!("distractor {d:?} is also a trigger or negation"));
        }
        let tokenizer = Tokenizer::new(vocab.clone());
        for word in special.iter().copied().chain(self.distractors.iter().map(String::as_str)) {
            let pieces = tokenizer.wordpiece(word);
            let words = pre_tokenize(word);
            if words.len() != 1 || pieces.len() != 1 || pieces[0].0 == UNK_ID {
                return fail(format!("{word:?} is not a single vocabulary token"));
            }
        }
        Ok(())
    }

    /// The label implied by a bag of words, or `None` when no single class
    /// is triggered.
    pub fn label_of(&self, words: &[&str]) -> Option<usize> {
        let classes: BTreeSet<usize> = self
            .triggers
            .iter()
            .filter(|t| words.contains(&t.token.as_str()))
            .map(|t| t.class)
            .collect();
        if classes.len() != 1 {
            return None;
        }
        let class = *classes.iter().next().unwrap();
        let negated = self
            .negation
            .as_ref()
            .is_some_and(|n| words.iter().filter(|&&w| w == n.token).count() % 2 == 1);
        Some(if negated { 1 - class } else { class })
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn generate_record(spec: &SyntheticTaskSpec, prior: &[f64], seed: u64, index: usize) -> Record {
    let mut rng = record_rng(seed, index);
    let label = sample_weighted(&mut rng, prior);
    let negate = spec
        .negation
        .as_ref()
        .is_some_and(|n| rng.random::<f64>() < n.probability);
    let trigger_class = if negate { 1 - label } else { label };
    let candidates: Vec<&Trigger> = spec.triggers.iter().filter(|t| t.class == trigger_class).collect();
    let trigger = candidates.choose(&mut rng).expect("validated: class has a trigger");

    let count = rng.random_range(spec.min_distractors..=spec.max_distractors);
    let mut words: Vec<&str> = (0..count)
        .map(|_| spec.distractors.choose(&mut rng).expect("validated").as_str())
        .collect();
    let trigger_at = rng.random_range(0..=words.len());
    words.insert(trigger_at, trigger.token.as_str());
    let mut rationale = vec![trigger_at];
    if negate {
        let neg = spec.negation.as_ref().unwrap();
        let at = rng.random_range(0..=words.len());
        words.insert(at, neg.token.as_str());
        rationale = vec![if trigger_at >= at { trigger_at + 1 } else { trigger_at }, at];
        rationale.sort_unstable();
    }

    let u: f64 = rng.random();
    let s = &spec.splits;
    let split = if u < s.train {
        Split::Train
    } else if u < s.train + s.validation {
        Split::Validation
    } else {
        Split::Test
    };
    Record {
        id: format!("{}-{index:06}", spec.name),
        text: words.join(" "),
        label,
        rationale,
        split,
    }
}

/// Generates `count` records. Record `i` depends only on `(seed, i)`.
pub fn generate_corpus(
    spec: &SyntheticTaskSpec,
    vocab: &Vocab,
    count: usize,
    seed: u64,
    exec: Exec,
) -> Result<Dataset> {
    spec.validate(vocab)?;
    let prior = spec.prior();
    let indices: Vec<usize> = (0..count).collect();
    let records = par::map(exec, &indices, |_, &i| generate_record(spec, &prior, seed, i));
    Ok(Dataset::new(records))
}
