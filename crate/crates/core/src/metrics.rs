//! Generation metrics: corpus BLEU-1..4, ROUGE-1/2/L, METEOR (exact
//! matching), BERTScore and SentBERT through a pluggable embedder.
//!
//! Text is lowercased and split with [`word_tokens`]. All reported values
//! are percentages.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hash::keyed_rng;
use crate::text::{lowercase, word_tokens, TOKENIZER_VERSION};

pub const METRIC_COLUMNS: [&str; 12] = [
    "B1", "B2", "B3", "B4", "RL", "R1", "R2", "METEOR", "BS-P", "BS-R", "BS-F1", "SentBERT",
];

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

pub fn metric_tokens(text: &str) -> Vec<String> {
    word_tokens(&lowercase(text))
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total.
fn clipped_matches(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    /// Epsilon added to zero higher-order match counts; `None` disables smoothing.
    pub epsilon: Option<f64>,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self { epsilon: Some(0.1) }
    }
}

/// Corpus BLEU-1..4 in `[0, 1]` with one reference per candidate.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>], config: BleuConfig) -> [f64; 4] {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=4 {
            let (m, t) = clipped_matches(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c_len += c.len();
        r_len += r.len();
    }
    if matched[0] == 0 || c_len == 0 {
        return [0.0; 4];
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        libm::exp(1.0 - r_len as f64 / c_len as f64)
    };
    let precision: Vec<f64> = (0..4)
        .map(|i| {
            let denom = total[i].max(1) as f64;
            match (matched[i], config.epsilon) {
                (0, Some(eps)) => eps / denom,
                (m, _) => m as f64 / denom,
            }
        })
        .collect();
    let mut out = [0.0; 4];
    for n in 1..=4 {
        if precision[..n].iter().any(|&p| p == 0.0) {
            out[n - 1] = 0.0;
            continue;
        }
        let log_mean = precision[..n].iter().map(|p| libm::log(*p)).sum::<f64>() / n as f64;
        out[n - 1] = bp * libm::exp(log_mean);
    }
    out
}

fn f_measure(matched: usize, cand: usize, refr: usize) -> f64 {
    if matched == 0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    let p = matched as f64 / cand as f64;
    let r = matched as f64 / refr as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let (m, c) = clipped_matches(candidate, reference, n);
    f_measure(m, c, reference.len().saturating_sub(n - 1))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    f_measure(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Exact-match alignment as `(candidate index, reference index)` pairs,
/// sorted by candidate index. Words are matched from the end of both
/// sequences, each reference word at most once.
fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut matches = Vec::new();
    for i in (0..candidate.len()).rev() {
        if let Some(j) = (0..reference.len()).rev().find(|&j| !used[j] && reference[j] == candidate[i]) {
            used[j] = true;
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    matches
}

pub fn meteor(candidate: &[String], reference: &[String]) -> f64 {
    let matches = meteor_alignment(candidate, reference);
    let m = matches.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let chunks = 1 + matches
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let frag = chunks as f64 / m as f64;
    (1.0 - METEOR_GAMMA * libm::pow(frag, METEOR_BETA)) * fmean
}

/// Token and sentence embeddings for the embedding-based metrics.
pub trait TextEmbedder {
    fn version(&self) -> String;
    /// One vector per token, for BERTScore.
    fn token_vectors(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>>;
    /// Sentence vector for SentBERT; mean-pooled token vectors by default.
    fn sentence_vector(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let vs = self.token_vectors(tokens)?;
        let Some(first) = vs.first() else { return Ok(Vec::new()) };
        let mut out = vec![0.0; first.len()];
        for v in &vs {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        let n = vs.len() as f64;
        Ok(out.into_iter().map(|x| x / n).collect())
    }
}

/// Deterministic stand-in embedder: each token maps to a fixed
/// non-negative pseudo-random vector derived from its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

impl TextEmbedder for HashEmbedder {
    fn version(&self) -> String {
        format!("hash-embed-v1/d{}/s{}", self.dim, self.seed)
    }

    fn token_vectors(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens
            .iter()
            .map(|t| {
                let mut rng = keyed_rng(t, self.seed);
                (0..self.dim).map(|_| rng.gen::<f64>()).collect()
            })
            .collect())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Greedy-matching BERTScore `(precision, recall, f1)` in `[0, 1]`.
pub fn bert_score(candidate: &[String], reference: &[String], embedder: &dyn TextEmbedder) -> Result<(f64, f64, f64)> {
    let c = embedder.token_vectors(candidate)?;
    let r = embedder.token_vectors(reference)?;
    if c.is_empty() || r.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let best = |from: &[Vec<f64>], to: &[Vec<f64>]| -> f64 {
        from.iter()
            .map(|x| to.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(&c, &r);
    let rc = best(&r, &c);
    Ok((p, rc, harmonic(p, rc)))
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn sentence_similarity(candidate: &[String], reference: &[String], embedder: &dyn TextEmbedder) -> Result<f64> {
    let a = embedder.sentence_vector(candidate)?;
    let b = embedder.sentence_vector(reference)?;
    if a.is_empty() || b.is_empty() {
        return Ok(0.0);
    }
    Ok(cosine(&a, &b).max(0.0))
}

/// One row of metric values in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub rl: f64,
    pub r1: f64,
    pub r2: f64,
    pub meteor: f64,
    pub bs_precision: f64,
    pub bs_recall: f64,
    pub bs_f1: f64,
    pub sent_bert: f64,
}

impl MetricScores {
    pub fn to_array(&self) -> [f64; 12] {
        [
            self.b1,
            self.b2,
            self.b3,
            self.b4,
            self.rl,
            self.r1,
            self.r2,
            self.meteor,
            self.bs_precision,
            self.bs_recall,
            self.bs_f1,
            self.sent_bert,
        ]
    }

    pub fn from_array(v: [f64; 12]) -> Self {
        Self {
            b1: v[0],
            b2: v[1],
            b3: v[2],
            b4: v[3],
            rl: v[4],
            r1: v[5],
            r2: v[6],
            meteor: v[7],
            bs_precision: v[8],
            bs_recall: v[9],
            bs_f1: v[10],
            sent_bert: v[11],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub index: usize,
    pub candidate: String,
    pub reference: String,
    /// Sentence-level values, same columns as the corpus row.
    pub scores: MetricScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tokenizer: String,
    pub embedder: String,
    pub scores: MetricScores,
    pub per_sample: Vec<SampleScores>,
}

fn pct(v: f64) -> f64 {
    (v * 100.0).clamp(0.0, 100.0)
}

struct SentenceValues {
    rl: f64,
    r1: f64,
    r2: f64,
    meteor: f64,
    bs: (f64, f64, f64),
    sent: f64,
}

fn sentence_values(c: &[String], r: &[String], embedder: &dyn TextEmbedder) -> Result<SentenceValues> {
    Ok(SentenceValues {
        rl: rouge_l(c, r),
        r1: rouge_n(c, r, 1),
        r2: rouge_n(c, r, 2),
        meteor: meteor(c, r),
        bs: bert_score(c, r, embedder)?,
        sent: sentence_similarity(c, r, embedder)?,
    })
}

/// BLEU is corpus-level; every other column is the mean of sentence
/// values, except BERTScore F1, which is the harmonic mean of the corpus
/// precision and recall.
pub fn evaluate_corpus<C: AsRef<str>, R: AsRef<str>>(
    candidates: &[C],
    references: &[R],
    embedder: &dyn TextEmbedder,
    bleu: BleuConfig,
) -> Result<EvalReport> {
    if candidates.len() != references.len() {
        return Err(CoreError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let cand: Vec<Vec<String>> = candidates.iter().map(|c| metric_tokens(c.as_ref())).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| metric_tokens(r.as_ref())).collect();
    let n = cand.len() as f64;
    let mut sums = [0.0f64; 12];
    let mut per_sample = Vec::with_capacity(cand.len());
    for (i, (c, r)) in cand.iter().zip(&refs).enumerate() {
        let v = sentence_values(c, r, embedder)?;
        let b = corpus_bleu(core::slice::from_ref(c), core::slice::from_ref(r), bleu);
        let row = [
            b[0], b[1], b[2], b[3], v.rl, v.r1, v.r2, v.meteor, v.bs.0, v.bs.1, v.bs.2, v.sent,
        ];
        for (s, x) in sums.iter_mut().zip(row) {
            *s += x;
        }
        per_sample.push(SampleScores {
            index: i,
            candidate: candidates[i].as_ref().to_string(),
            reference: references[i].as_ref().to_string(),
            scores: MetricScores::from_array(row.map(pct)),
        });
    }
    let b = corpus_bleu(&cand, &refs, bleu);
    let mean = |i: usize| sums[i] / n;
    let (bs_p, bs_r) = (mean(8), mean(9));
    let scores = MetricScores {
        b1: pct(b[0]),
        b2: pct(b[1]),
        b3: pct(b[2]),
        b4: pct(b[3]),
        rl: pct(mean(4)),
        r1: pct(mean(5)),
        r2: pct(mean(6)),
        meteor: pct(mean(7)),
        bs_precision: pct(bs_p),
        bs_recall: pct(bs_r),
        bs_f1: pct(harmonic(bs_p, bs_r)),
        sent_bert: pct(mean(11)),
    };
    Ok(EvalReport {
        tokenizer: TOKENIZER_VERSION.to_string(),
        embedder: embedder.version(),
        scores,
        per_sample,
    })
}

/// Aligned text table, one row per named score set, in the given order.
pub fn report_table(rows: &[(String, MetricScores)]) -> Result<String> {
    if rows.is_empty() {
        return Err(CoreError::EmptyCorpus);
    }
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max("Model".len());
    let col_w = METRIC_COLUMNS.iter().map(|c| c.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let pad = |s: &str, w: usize| -> String {
        let mut p = String::from(s);
        for _ in s.chars().count()..w {
            p.push(' ');
        }
        p
    };
    out.push_str(&pad("Model", name_w));
    for c in METRIC_COLUMNS {
        out.push_str(&format!("  {c:>col_w$}"));
    }
    out.push('\n');
    for (name, s) in rows {
        out.push_str(&pad(name, name_w));
        for v in s.to_array() {
            out.push_str(&format!("  {v:>col_w$.2}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        metric_tokens(s)
    }

    #[test]
    fn hand_counted_three_token_case() {
        let b = corpus_bleu(&[t("the cat sat")], &[t("the cat slept")], BleuConfig::default());
        assert!((b[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((b[1] - libm::sqrt(2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert!((b[2] - libm::cbrt(2.0 / 3.0 * 0.5 * 0.1)).abs() < 1e-12);
        assert!((rouge_n(&t("the cat sat"), &t("the cat slept"), 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge_n(&t("the cat sat"), &t("the cat slept"), 2) - 0.5).abs() < 1e-12);
        assert!((rouge_l(&t("the cat sat"), &t("the cat slept")) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unsmoothed_bleu_is_zero_without_higher_order_matches() {
        let b = corpus_bleu(&[t("the cat sat")], &[t("the cat slept")], BleuConfig { epsilon: None });
        assert!(b[1] > 0.0);
        assert_eq!(b[2], 0.0);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let b = corpus_bleu(&[t("a b")], &[t("a b c d")], BleuConfig::default());
        assert!((b[0] - libm::exp(1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn meteor_fragmentation() {
        // one chunk of three: fmean 1, penalty 0.5 (1/3)^3
        let m = meteor(&t("a b c"), &t("a b c"));
        assert!((m - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        // two chunks of one
        let m = meteor(&t("b a"), &t("a b"));
        assert!((m - (1.0 - 0.5)).abs() < 1e-12);
        assert_eq!(meteor(&t("x"), &t("y")), 0.0);
    }

    #[test]
    fn identical_strings_score_full_on_embedding_metrics() {
        let e = HashEmbedder::default();
        let (p, r, f) = bert_score(&t("hello world"), &t("hello world"), &e).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && (r - 1.0).abs() < 1e-12 && (f - 1.0).abs() < 1e-12);
        assert!((sentence_similarity(&t("x y"), &t("x y"), &e).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_bad_shapes() {
        let e = HashEmbedder::default();
        assert!(matches!(
            evaluate_corpus(&["a"], &["a", "b"], &e, BleuConfig::default()),
            Err(CoreError::LengthMismatch { .. })
        ));
        let none: [&str; 0] = [];
        assert_eq!(
            evaluate_corpus(&none, &none, &e, BleuConfig::default()),
            Err(CoreError::EmptyCorpus)
        );
    }

    #[test]
    fn table_keeps_row_order_and_twelve_columns() {
        let a = MetricScores::from_array([1.0; 12]);
        let b = MetricScores::from_array([99.0; 12]);
        let table = report_table(&[("low".into(), a), ("high".into(), b)]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("low"));
        assert_eq!(lines[1].split_whitespace().count(), 13);
        assert_eq!(lines[0].split_whitespace().skip(1).collect::<Vec<_>>(), METRIC_COLUMNS);
    }
}
