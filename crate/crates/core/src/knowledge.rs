//! One-hop external knowledge concepts for individual tokens.
//!
//! The network client and persistent cache live in the std companion crate;
//! this module defines the source contract, the in-memory fixture source and
//! the token-level enrichment and diagnostics built on top of it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::{is_queryable, is_stopword, lowercase};

/// Service weights at or below zero are clipped here so graph degrees stay positive.
pub const MIN_RELEVANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub source_token: String,
    pub concept_tokens: Vec<String>,
    pub relevance: f64,
}

impl ConceptEntry {
    /// Splits a (possibly multi-word) concept on whitespace and clips the
    /// weight. Returns `None` for blank concepts or non-finite weights.
    pub fn new(source_token: &str, concept: &str, weight: f64) -> Option<Self> {
        if !weight.is_finite() {
            return None;
        }
        let concept_tokens: Vec<String> = lowercase(concept)
            .split(|c: char| c.is_whitespace() || c == '_')
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        if concept_tokens.is_empty() {
            return None;
        }
        Some(Self {
            source_token: source_token.to_string(),
            concept_tokens,
            relevance: weight.max(MIN_RELEVANCE),
        })
    }
}

/// Per-token optional concepts, index-aligned with the queried tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptLookup {
    pub entries: Vec<Option<ConceptEntry>>,
}

impl ConceptLookup {
    pub fn absent(len: usize) -> Self {
        Self {
            entries: (0..len).map(|_| None).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn concat(mut self, other: ConceptLookup) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

/// Anything that can answer "top one-hop neighbour of this token".
///
/// `Ok(None)` means the source has no edge; transport failures are errors.
pub trait ConceptSource {
    fn lookup(&self, token: &str) -> Result<Option<ConceptEntry>>;
}

impl<S: ConceptSource + ?Sized> ConceptSource for &S {
    fn lookup(&self, token: &str) -> Result<Option<ConceptEntry>> {
        (**self).lookup(token)
    }
}

/// Queries a single token, enforcing the query preconditions.
pub fn fetch_concept(source: &dyn ConceptSource, token: &str) -> Result<Option<ConceptEntry>> {
    if token.trim().is_empty() {
        return Err(CoreError::EmptyToken);
    }
    if is_stopword(token) {
        return Err(CoreError::Stopword(token.to_string()));
    }
    source.lookup(&lowercase(token))
}

/// Positionally aligned lookup; stopwords and punctuation are never queried.
pub fn enrich_tokens<T: AsRef<str>>(source: &dyn ConceptSource, tokens: &[T]) -> Result<ConceptLookup> {
    let mut entries = Vec::with_capacity(tokens.len());
    for t in tokens {
        let t = t.as_ref();
        if !is_queryable(t) {
            entries.push(None);
            continue;
        }
        let mut entry = fetch_concept(source, t)?;
        if let Some(e) = entry.as_mut() {
            e.source_token = t.to_string();
        }
        entries.push(entry);
    }
    Ok(ConceptLookup { entries })
}

/// Tokens that were queried but yielded no concept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingReport {
    /// `(position, token)` pairs in sequence order.
    pub missing: Vec<(usize, String)>,
}

impl MissingReport {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn count(&self) -> usize {
        self.missing.len()
    }

    pub fn names(&self, token: &str) -> bool {
        self.missing.iter().any(|(_, t)| t == token)
    }
}

pub fn diagnose_missing<T: AsRef<str>>(lookup: &ConceptLookup, tokens: &[T]) -> Result<MissingReport> {
    if lookup.len() != tokens.len() {
        return Err(CoreError::Misaligned {
            segment: "diagnose",
            tokens: tokens.len(),
            lookup: lookup.len(),
        });
    }
    let missing = tokens
        .iter()
        .zip(&lookup.entries)
        .enumerate()
        .filter(|(_, (t, e))| e.is_none() && is_queryable(t.as_ref()))
        .map(|(i, (t, _))| (i, t.as_ref().to_string()))
        .collect();
    Ok(MissingReport { missing })
}

/// In-memory source backed by `token → [(concept, weight)]` edges.
///
/// This is also the on-disk fixture and cache layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureSource {
    pub edges: BTreeMap<String, Vec<(String, f64)>>,
}

impl FixtureSource {
    pub fn insert(&mut self, token: &str, concept: &str, weight: f64) {
        self.edges
            .entry(lowercase(token))
            .or_default()
            .push((concept.to_string(), weight));
    }
}

impl ConceptSource for FixtureSource {
    fn lookup(&self, token: &str) -> Result<Option<ConceptEntry>> {
        let Some(edges) = self.edges.get(&lowercase(token)) else {
            return Ok(None);
        };
        // first edge wins ties
        let best = edges
            .iter()
            .filter(|(_, w)| w.is_finite())
            .fold(None::<&(String, f64)>, |best, e| match best {
                Some(b) if b.1 >= e.1 => Some(b),
                _ => Some(e),
            });
        Ok(best.and_then(|(c, w)| ConceptEntry::new(token, c, *w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::cell::Cell;
    use proptest::prelude::*;

    fn fixture() -> FixtureSource {
        let mut f = FixtureSource::default();
        f.insert("snake", "reptile", 2.0);
        f.insert("cat", "feline", 1.0);
        f.insert("cat", "pet", 3.5);
        f.insert("cat", "animal", 2.0);
        f.insert("shovel", "dig tool", 1.2);
        f.insert("cold", "weather", -0.4);
        f
    }

    #[test]
    fn stopwords_violate_the_precondition() {
        let f = fixture();
        assert_eq!(fetch_concept(&f, "the"), Err(CoreError::Stopword("the".into())));
        assert_eq!(fetch_concept(&f, " "), Err(CoreError::EmptyToken));
    }

    #[test]
    fn fixture_echo_and_max_relevance() {
        let f = fixture();
        let snake = fetch_concept(&f, "snake").unwrap().unwrap();
        assert_eq!(snake.concept_tokens, ["reptile"]);
        assert_eq!(snake.relevance, 2.0);
        let cat = fetch_concept(&f, "Cat").unwrap().unwrap();
        assert_eq!(cat.concept_tokens, ["pet"]);
        assert_eq!(cat.relevance, 3.5);
    }

    #[test]
    fn weights_are_clipped_and_phrases_split() {
        let f = fixture();
        assert_eq!(fetch_concept(&f, "cold").unwrap().unwrap().relevance, MIN_RELEVANCE);
        assert_eq!(fetch_concept(&f, "shovel").unwrap().unwrap().concept_tokens, ["dig", "tool"]);
        assert!(ConceptEntry::new("x", "  ", 1.0).is_none());
        assert!(ConceptEntry::new("x", "y", f64::NAN).is_none());
    }

    #[test]
    fn rattlesnake_is_reported_missing() {
        let f = fixture();
        let toks = ["the", "rattlesnake"];
        let lookup = enrich_tokens(&f, &toks).unwrap();
        assert_eq!(lookup, ConceptLookup::absent(2));
        let report = diagnose_missing(&lookup, &toks).unwrap();
        assert_eq!(report.missing, vec![(1, "rattlesnake".into())]);
        assert!(report.names("rattlesnake"));
    }

    #[test]
    fn empty_and_resolved_cases() {
        let f = fixture();
        let empty: [&str; 0] = [];
        assert!(enrich_tokens(&f, &empty).unwrap().is_empty());
        let toks = ["the", "cat", "snake"];
        let lookup = enrich_tokens(&f, &toks).unwrap();
        assert!(diagnose_missing(&lookup, &toks).unwrap().is_empty());
        assert!(diagnose_missing(&lookup, &toks[..2]).is_err());
    }

    #[test]
    fn five_token_lookup_is_compositional() {
        let f = fixture();
        let toks = ["my", "cat", "bit", "a", "snake"];
        let lookup = enrich_tokens(&f, &toks).unwrap();
        for (t, e) in toks.iter().zip(&lookup.entries) {
            let single = if is_queryable(t) { fetch_concept(&f, t).unwrap() } else { None };
            assert_eq!(*e, single);
        }
    }

    struct Failing;
    impl ConceptSource for Failing {
        fn lookup(&self, token: &str) -> Result<Option<ConceptEntry>> {
            Err(CoreError::Source { token: token.into(), message: "offline".into() })
        }
    }

    #[test]
    fn source_errors_name_the_token() {
        let err = enrich_tokens(&Failing, &["the", "lamp"]).unwrap_err();
        assert!(matches!(err, CoreError::Source { ref token, .. } if token == "lamp"));
    }

    struct Counting<'a>(&'a FixtureSource, Cell<usize>);
    impl ConceptSource for Counting<'_> {
        fn lookup(&self, token: &str) -> Result<Option<ConceptEntry>> {
            self.1.set(self.1.get() + 1);
            self.0.lookup(token)
        }
    }

    #[test]
    fn stopwords_are_never_sent_to_the_source() {
        let f = fixture();
        let c = Counting(&f, Cell::new(0));
        enrich_tokens(&c, &["the", "and", "is", ",", "cat"]).unwrap();
        assert_eq!(c.1.get(), 1);
    }

    proptest! {
        #[test]
        fn enrichment_is_stateless_per_token(
            a in proptest::collection::vec(prop::sample::select(vec!["cat", "the", "snake", "dog", "shovel", "!", "cold"]), 0..8),
            b in proptest::collection::vec(prop::sample::select(vec!["cat", "the", "snake", "dog", "shovel", "!", "cold"]), 0..8),
        ) {
            let f = fixture();
            let joined: Vec<&str> = a.iter().chain(&b).copied().collect();
            let whole = enrich_tokens(&f, &joined).unwrap();
            let parts = enrich_tokens(&f, &a).unwrap().concat(enrich_tokens(&f, &b).unwrap());
            prop_assert_eq!(whole, parts);
        }

        #[test]
        fn report_equals_set_difference(
            toks in proptest::collection::vec(prop::sample::select(vec!["cat", "the", "snake", "dog", "lamp", "?", "shovel"]), 0..12),
        ) {
            let f = fixture();
            let lookup = enrich_tokens(&f, &toks).unwrap();
            let report = diagnose_missing(&lookup, &toks).unwrap();
            let oracle: Vec<(usize, String)> = toks
                .iter()
                .enumerate()
                .filter(|(_, t)| is_queryable(t) && !f.edges.contains_key(**t))
                .map(|(i, t)| (i, t.to_string()))
                .collect();
            prop_assert_eq!(report.missing, oracle);
        }
    }
}
