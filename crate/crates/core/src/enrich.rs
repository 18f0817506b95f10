//! Knowledge-enriched token sequences with provenance segments.
//!
//! The knowledge sequence is the concatenation
//! `caption + caption concepts + description + description concepts +
//! objects + object concepts`; the target-augmented sequence appends the
//! separator, the target of sarcasm and optionally the target's concepts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::knowledge::{ConceptLookup, MissingReport};

/// Reserved separator, resolved to the backbone's separator id by its tokenizer.
pub const SEPARATOR_TOKEN: &str = "<sep>";

/// Default sequence budget.
pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Caption,
    CaptionConcepts,
    Description,
    DescriptionConcepts,
    Objects,
    ObjectConcepts,
    Separator,
    Target,
    TargetConcepts,
}

impl SegmentKind {
    pub const KNOWLEDGE: [SegmentKind; 6] = [
        SegmentKind::Caption,
        SegmentKind::CaptionConcepts,
        SegmentKind::Description,
        SegmentKind::DescriptionConcepts,
        SegmentKind::Objects,
        SegmentKind::ObjectConcepts,
    ];

    /// For a concept segment, the segment holding its source tokens.
    pub fn source_of(self) -> Option<SegmentKind> {
        match self {
            SegmentKind::CaptionConcepts => Some(SegmentKind::Caption),
            SegmentKind::DescriptionConcepts => Some(SegmentKind::Description),
            SegmentKind::ObjectConcepts => Some(SegmentKind::Objects),
            SegmentKind::TargetConcepts => Some(SegmentKind::Target),
            _ => None,
        }
    }

    pub fn is_concepts(self) -> bool {
        self.source_of().is_some()
    }
}

/// Link from a source token to the span of its concept tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLink {
    pub source_index: usize,
    pub concept_start: usize,
    pub concept_end: usize,
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concept_links: Vec<ConceptLink>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedSequence {
    pub tokens: Vec<String>,
    pub segments: Vec<Segment>,
    pub truncated: bool,
}

/// A token sequence together with its aligned concept lookup.
#[derive(Debug, Clone, Copy)]
pub struct SourceTokens<'a> {
    pub tokens: &'a [String],
    pub lookup: &'a ConceptLookup,
}

impl<'a> SourceTokens<'a> {
    pub fn new(tokens: &'a [String], lookup: &'a ConceptLookup) -> Self {
        Self { tokens, lookup }
    }
}

impl EnrichedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn segment_tokens(&self, kind: SegmentKind) -> &[String] {
        self.segment(kind).map_or(&[], |s| &self.tokens[s.start..s.end])
    }

    pub fn has_target(&self) -> bool {
        self.segment(SegmentKind::Separator).is_some()
    }

    /// Length of the knowledge part (everything before the separator).
    pub fn knowledge_len(&self) -> usize {
        self.segment(SegmentKind::Separator).map_or(self.len(), |s| s.start)
    }

    /// Checks the partition, ordering and link invariants.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        let mut last_kind = None;
        for seg in &self.segments {
            if seg.start != cursor || seg.end < seg.start || last_kind.is_some_and(|k| k >= seg.kind) {
                return Err(CoreError::Config(alloc::format!("segment {:?} breaks the partition", seg.kind)));
            }
            cursor = seg.end;
            last_kind = Some(seg.kind);
            if !seg.concept_links.is_empty() {
                let source = seg.kind.source_of().and_then(|k| self.segment(k));
                let Some(source) = source else {
                    return Err(CoreError::DanglingLink {
                        source_index: seg.concept_links[0].source_index,
                    });
                };
                for l in &seg.concept_links {
                    let inside = l.concept_start < l.concept_end
                        && seg.start <= l.concept_start
                        && l.concept_end <= seg.end;
                    if !source.contains(l.source_index) || !inside {
                        return Err(CoreError::DanglingLink {
                            source_index: l.source_index,
                        });
                    }
                }
            }
        }
        if cursor != self.tokens.len() {
            return Err(CoreError::Config("segments do not cover the sequence".to_string()));
        }
        Ok(())
    }

    fn push_source(&mut self, kind: SegmentKind, tokens: &[String]) {
        let start = self.tokens.len();
        self.tokens.extend(tokens.iter().cloned());
        self.segments.push(Segment {
            kind,
            start,
            end: self.tokens.len(),
            concept_links: Vec::new(),
        });
    }

    /// Appends the concepts of the source segment `source_start..` in source order.
    fn push_concepts(&mut self, kind: SegmentKind, source_start: usize, lookup: &ConceptLookup) {
        let start = self.tokens.len();
        let mut links = Vec::new();
        for (offset, entry) in lookup.entries.iter().enumerate() {
            let Some(entry) = entry else { continue };
            let concept_start = self.tokens.len();
            self.tokens.extend(entry.concept_tokens.iter().cloned());
            links.push(ConceptLink {
                source_index: source_start + offset,
                concept_start,
                concept_end: self.tokens.len(),
                relevance: entry.relevance,
            });
        }
        self.segments.push(Segment {
            kind,
            start,
            end: self.tokens.len(),
            concept_links: links,
        });
    }

    /// Drops knowledge tokens from the tail until the knowledge part has at
    /// most `budget` tokens. Only valid before a target is appended.
    fn truncate_knowledge(&mut self, budget: usize) {
        debug_assert!(!self.has_target());
        if self.tokens.len() <= budget {
            return;
        }
        self.tokens.truncate(budget);
        self.truncated = true;
        for seg in &mut self.segments {
            seg.start = seg.start.min(budget);
            seg.end = seg.end.min(budget);
            seg.concept_links.retain_mut(|l| {
                l.concept_end = l.concept_end.min(budget);
                l.concept_start < budget && l.source_index < budget
            });
        }
    }
}

fn check_aligned(segment: &'static str, src: &SourceTokens<'_>) -> Result<()> {
    if src.tokens.len() != src.lookup.len() {
        return Err(CoreError::Misaligned {
            segment,
            tokens: src.tokens.len(),
            lookup: src.lookup.len(),
        });
    }
    Ok(())
}

/// Concatenates caption, description and objects with their concepts in
/// the fixed segment order, truncating from the tail to `max_len` (the
/// first caption token always survives).
pub fn build_knowledge_sequence(
    caption: SourceTokens<'_>,
    description: SourceTokens<'_>,
    objects: SourceTokens<'_>,
    max_len: Option<usize>,
) -> Result<EnrichedSequence> {
    check_aligned("caption", &caption)?;
    check_aligned("description", &description)?;
    check_aligned("objects", &objects)?;

    let mut seq = EnrichedSequence {
        tokens: Vec::new(),
        segments: Vec::new(),
        truncated: false,
    };
    for (src, kind, concept_kind) in [
        (caption, SegmentKind::Caption, SegmentKind::CaptionConcepts),
        (description, SegmentKind::Description, SegmentKind::DescriptionConcepts),
        (objects, SegmentKind::Objects, SegmentKind::ObjectConcepts),
    ] {
        let source_start = seq.tokens.len();
        seq.push_source(kind, src.tokens);
        seq.push_concepts(concept_kind, source_start, src.lookup);
    }
    if let Some(max_len) = max_len {
        seq.truncate_knowledge(max_len.max(1));
    }
    Ok(seq)
}

/// Appends `<sep> + target [+ target concepts]`. Target tokens are never
/// truncated; the knowledge tail gives way instead.
pub fn append_target(
    mut seq: EnrichedSequence,
    target_tokens: &[String],
    include_target_concepts: bool,
    target_lookup: &ConceptLookup,
    max_len: Option<usize>,
) -> Result<EnrichedSequence> {
    if seq.has_target() {
        return Err(CoreError::AlreadyAugmented);
    }
    let target = SourceTokens::new(target_tokens, target_lookup);
    if include_target_concepts {
        check_aligned("target", &target)?;
    }
    let concept_len: usize = if include_target_concepts {
        target_lookup.entries.iter().flatten().map(|e| e.concept_tokens.len()).sum()
    } else {
        0
    };
    let needed = 1 + target_tokens.len() + concept_len;
    if let Some(max_len) = max_len {
        // keep at least the first caption token
        if needed + 1 > max_len {
            return Err(CoreError::TargetTooLong {
                target: needed,
                max_len,
            });
        }
        seq.truncate_knowledge(max_len - needed);
    }
    seq.push_source(SegmentKind::Separator, &[SEPARATOR_TOKEN.to_string()]);
    let target_start = seq.tokens.len();
    seq.push_source(SegmentKind::Target, target_tokens);
    if include_target_concepts {
        seq.push_concepts(SegmentKind::TargetConcepts, target_start, target_lookup);
    }
    Ok(seq)
}

/// One sample after enrichment: the knowledge sequence plus the target
/// material needed to build any ablation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedRecord {
    pub id: String,
    pub image_ref: String,
    pub knowledge: EnrichedSequence,
    pub target_tokens: Vec<String>,
    pub target_lookup: ConceptLookup,
    pub explanation: String,
    #[serde(default)]
    pub missing: MissingReport,
}

impl EnrichedRecord {
    /// The knowledge sequence, optionally followed by the target segment.
    pub fn sequence(
        &self,
        include_target: bool,
        include_target_concepts: bool,
        max_len: Option<usize>,
    ) -> Result<EnrichedSequence> {
        if include_target {
            append_target(
                self.knowledge.clone(),
                &self.target_tokens,
                include_target_concepts,
                &self.target_lookup,
                max_len,
            )
        } else {
            let mut seq = self.knowledge.clone();
            if let Some(max_len) = max_len {
                seq.truncate_knowledge(max_len.max(1));
            }
            Ok(seq)
        }
    }
}
