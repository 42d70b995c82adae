//! Labelled sentences with gold rationales.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tokenizer::{TokenSequence, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default)]
    pub id: String,
    pub text: String,
    pub label: usize,
    /// Indices of the rationale words in the pre-tokenized text.
    #[serde(default)]
    pub rationale: Vec<usize>,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Self {
        Dataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn has_rationales(&self) -> bool {
        self.records.iter().any(|r| !r.rationale.is_empty())
    }

    /// Records used for evaluation: the test split, or everything when the
    /// dataset has no test split.
    pub fn eval_records(&self) -> Vec<&Record> {
        let test = self.split(Split::Test);
        if test.is_empty() {
            self.records.iter().collect()
        } else {
            test
        }
    }
}

/// A record after tokenization, with gold rationale word indices mapped to
/// token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub seq: TokenSequence,
    pub label: usize,
    pub gold: Vec<usize>,
}

impl Example {
    pub fn encode(tokenizer: &Tokenizer, record: &Record, seq_len: usize) -> Result<Self> {
        let seq = tokenizer.encode(&record.text, seq_len)?;
        let gold = seq.positions_of_words(&record.rationale);
        Ok(Example {
            id: record.id.clone(),
            seq,
            label: record.label,
            gold,
        })
    }
}

pub fn encode_records(tokenizer: &Tokenizer, records: &[&Record], seq_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| Example::encode(tokenizer, r, seq_len))
        .collect()
}
