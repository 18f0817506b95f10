//! Dataset records and split statistics.

use alloc::collections::BTreeSet;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::text::whitespace_tokens;

/// One sarcastic post: image reference, caption, gold explanation and the
/// annotated target of sarcasm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(rename = "image")]
    pub image_ref: String,
    pub caption: String,
    pub explanation: String,
    pub target: String,
}

impl Sample {
    /// Returns the name of the first field violating the record invariants.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if self.id.trim().is_empty() {
            Some("id")
        } else if self.caption.trim().is_empty() {
            Some("caption")
        } else if self.explanation.trim().is_empty() {
            Some("explanation")
        } else if self.target.trim().is_empty() {
            Some("target")
        } else {
            None
        }
    }
}

/// Per-split summary: sample count, average lengths and vocabulary sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sample_count: usize,
    pub avg_caption_len: f64,
    pub avg_explanation_len: f64,
    pub avg_target_len: f64,
    pub caption_vocab: usize,
    pub explanation_vocab: usize,
    pub target_vocab: usize,
}

#[derive(Default)]
struct FieldTally {
    tokens: usize,
    vocab: BTreeSet<String>,
}

impl FieldTally {
    fn add(&mut self, text: &str) {
        for t in whitespace_tokens(text) {
            self.tokens += 1;
            self.vocab.insert(t);
        }
    }

    fn average(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.tokens as f64 / n as f64
        }
    }
}

/// Averages are over lowercase whitespace tokens; vocabularies count distinct
/// lowercase tokens.
pub fn compute_stats<'a, I>(samples: I) -> SplitStats
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut n = 0;
    let (mut caption, mut explanation, mut target) =
        (FieldTally::default(), FieldTally::default(), FieldTally::default());
    for s in samples {
        n += 1;
        caption.add(&s.caption);
        explanation.add(&s.explanation);
        target.add(&s.target);
    }
    SplitStats {
        sample_count: n,
        avg_caption_len: caption.average(n),
        avg_explanation_len: explanation.average(n),
        avg_target_len: target.average(n),
        caption_vocab: caption.vocab.len(),
        explanation_vocab: explanation.vocab.len(),
        target_vocab: target.vocab.len(),
    }
}
