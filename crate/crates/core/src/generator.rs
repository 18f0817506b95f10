//! Explanation generation: input preparation, the full forward pass,
//! training and decoding.
//!
//! ```text
//! E_t = Enc(Embed(T_concat))
//! H_L = GCN(E_t, Â_norm)            F_SF = Fusion(E_t, P · V)
//! Z   = H_L + F_SF
//! y   = Dec(Enc(Z))
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, ParamStore, Session, Var};
use crate::backbone::{Backbone, TinyBackbone, TinyConfig, Vocab, BOS, EOS, PAD};
use crate::enrich::EnrichedRecord;
use crate::error::{CoreError, Result};
use crate::fusion::{shared_fusion_on_tape, AttentionScale, FusionParams};
use crate::graph::{build_graph, normalized_adjacency};
use crate::matrix::Matrix;
use crate::optim::{AdamW, AdamWConfig};
use crate::reasoner::{gcn_on_tape, GcnConfig, GcnParams};
use crate::visual::VisualFeatureMatrix;

pub const VISUAL_PROJECTION: &str = "proj.visual";

/// Model variants: the full model and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    PlusTsConcepts,
    MinusSfTs,
    MinusKgTs,
    MinusTs,
    MinusKg,
    MinusSf,
}

impl Variant {
    /// Report order.
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::PlusTsConcepts,
        Variant::MinusSfTs,
        Variant::MinusKgTs,
        Variant::MinusTs,
        Variant::MinusKg,
        Variant::MinusSf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "TURBO",
            Variant::PlusTsConcepts => "TURBO + TS Concepts",
            Variant::MinusSfTs => "TURBO − SF − TS",
            Variant::MinusKgTs => "TURBO − KG − TS",
            Variant::MinusTs => "TURBO − TS",
            Variant::MinusKg => "TURBO − KG",
            Variant::MinusSf => "TURBO − SF",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PlusTsConcepts => "plus_ts_concepts",
            Variant::MinusSfTs => "minus_sf_ts",
            Variant::MinusKgTs => "minus_kg_ts",
            Variant::MinusTs => "minus_ts",
            Variant::MinusKg => "minus_kg",
            Variant::MinusSf => "minus_sf",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.key() == key)
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, Variant::MinusKg | Variant::MinusKgTs)
    }

    pub fn uses_fusion(self) -> bool {
        !matches!(self, Variant::MinusSf | Variant::MinusSfTs)
    }

    /// Whether the separator and target segment are part of the input.
    pub fn includes_target(self) -> bool {
        !matches!(self, Variant::MinusTs | Variant::MinusSfTs | Variant::MinusKgTs)
    }

    pub fn includes_target_concepts(self) -> bool {
        self == Variant::PlusTsConcepts
    }
}

/// `Z` for a variant: `H_L + F_SF`, or whichever branch is enabled.
pub fn combine(h_l: Option<&Matrix>, f_sf: Option<&Matrix>) -> Result<Matrix> {
    match (h_l, f_sf) {
        (Some(h), Some(f)) => h.add(f),
        (Some(h), None) => Ok(h.clone()),
        (None, Some(f)) => Ok(f.clone()),
        (None, None) => Err(CoreError::Config(String::from("a variant needs the graph or the fusion branch"))),
    }
}

pub fn combine_on_tape(s: &mut Session<'_>, h_l: Option<Var>, f_sf: Option<Var>) -> Result<Var> {
    match (h_l, f_sf) {
        (Some(h), Some(f)) => s.tape.add(h, f),
        (Some(h), None) => Ok(h),
        (None, Some(f)) => Ok(f),
        (None, None) => Err(CoreError::Config(String::from("a variant needs the graph or the fusion branch"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Sequence length `N`.
    pub max_len: usize,
    /// Visual patches `m`.
    pub patches: usize,
    /// Longest explanation used as a training target, in tokens.
    pub max_target_len: usize,
    pub backbone: TinyConfig,
    pub gcn: GcnConfig,
    pub attention_scale: AttentionScale,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gcn.validate()?;
        if self.gcn.width != self.backbone.width {
            return Err(CoreError::Config(format!(
                "gcn width {} differs from backbone width {}",
                self.gcn.width, self.backbone.width
            )));
        }
        if self.max_len == 0 || self.patches == 0 || self.max_target_len == 0 {
            return Err(CoreError::Config(String::from("lengths must be positive")));
        }
        if self.backbone.max_positions < self.max_len.max(self.max_target_len + 1) {
            return Err(CoreError::Config(format!(
                "backbone has {} positions, needs {}",
                self.backbone.max_positions,
                self.max_len.max(self.max_target_len + 1)
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.backbone.width
    }
}

/// Everything the forward pass needs for one sample, already indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    /// Exactly `N` ids, padded with [`PAD`].
    pub input_ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub norm_adj: Matrix,
    /// `m×D` visual features.
    pub visual: Matrix,
    pub target_ids: Vec<usize>,
    pub reference: String,
}

pub fn prepare_sample(
    record: &EnrichedRecord,
    visual: &VisualFeatureMatrix,
    reference_tokens: &[String],
    variant: Variant,
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<PreparedSample> {
    let n = config.max_len;
    let seq = record.sequence(variant.includes_target(), variant.includes_target_concepts(), Some(n))?;
    let graph = build_graph(&seq)?;
    let norm_adj = normalized_adjacency(&graph, n)?;
    let mut input_ids = vocab.encode(&seq.tokens);
    let real = input_ids.len();
    input_ids.resize(n, PAD);
    let pad = (0..n).map(|i| i >= real).collect();
    if visual.values.shape() != (config.patches, config.width()) {
        return Err(CoreError::Shape {
            op: "visual features",
            lhs: visual.values.shape(),
            rhs: (config.patches, config.width()),
        });
    }
    let mut target_ids = vocab.encode(reference_tokens);
    target_ids.truncate(config.max_target_len);
    Ok(PreparedSample {
        id: record.id.clone(),
        input_ids,
        pad,
        norm_adj,
        visual: visual.values.clone(),
        target_ids,
        reference: record.explanation.clone(),
    })
}

/// Intermediate values of the encoder side, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub e_t: Var,
    pub e_v: Option<Var>,
    pub h_l: Option<Var>,
    pub f_sf: Option<Var>,
    pub z: Var,
    pub memory: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.backbone.vocab_size {
            return Err(CoreError::Config(format!(
                "vocabulary has {} tokens, backbone expects {}",
                vocab.len(),
                config.backbone.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        TinyBackbone::new(config.backbone)?.init_params(&mut params, &mut rng);
        GcnParams::init(&config.gcn, &mut rng).store_into(&mut params);
        FusionParams::init(config.width(), config.attention_scale, &mut rng).store_into(&mut params);
        let bound = libm::sqrt(6.0 / (config.max_len + config.patches) as f64);
        params.insert(
            VISUAL_PROJECTION,
            ParamGroup::Head,
            Matrix::random_uniform(config.max_len, config.patches, bound, &mut rng),
        );
        Ok(Self { config, vocab, params })
    }

    /// Checks that `params` has every tensor of a fresh model, with matching shapes.
    pub fn check_compatible(&self) -> Result<()> {
        let fresh = Model::init(self.config, self.vocab.clone(), 0)?;
        for (name, p) in &fresh.params.params {
            let have = self
                .params
                .params
                .get(name)
                .ok_or_else(|| CoreError::Incompatible(format!("missing parameter {name}")))?;
            if have.value.shape() != p.value.shape() {
                return Err(CoreError::Incompatible(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    have.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn backbone(&self) -> Result<TinyBackbone> {
        TinyBackbone::new(self.config.backbone)
    }

    pub fn encode(&self, s: &mut Session<'_>, sample: &PreparedSample, variant: Variant) -> Result<EncoderVars> {
        let bb = self.backbone()?;
        if sample.input_ids.len() != self.config.max_len {
            return Err(CoreError::Shape {
                op: "encode",
                lhs: (sample.input_ids.len(), 1),
                rhs: (self.config.max_len, 1),
            });
        }
        let x = bb.embed(s, &sample.input_ids)?;
        let e_t = bb.encode(s, x, &sample.pad)?;
        let h_l = if variant.uses_graph() {
            let adj = s.tape.leaf(sample.norm_adj.clone());
            Some(gcn_on_tape(s, e_t, adj, &self.config.gcn)?)
        } else {
            None
        };
        let (e_v, f_sf) = if variant.uses_fusion() {
            let proj = s.param(VISUAL_PROJECTION)?;
            let feats = s.tape.leaf(sample.visual.clone());
            let e_v = s.tape.matmul(proj, feats)?;
            let fused = shared_fusion_on_tape(s, e_t, e_v, self.config.attention_scale)?;
            (Some(e_v), Some(fused.f_sf))
        } else {
            (None, None)
        };
        let z = combine_on_tape(s, h_l, f_sf)?;
        let memory = bb.encode(s, z, &sample.pad)?;
        Ok(EncoderVars {
            e_t,
            e_v,
            h_l,
            f_sf,
            z,
            memory,
        })
    }

    /// Summed target cross-entropy and the number of scored tokens.
    pub fn loss(&self, s: &mut Session<'_>, sample: &PreparedSample, variant: Variant) -> Result<(Var, usize)> {
        let enc = self.encode(s, sample, variant)?;
        let mut prefix = Vec::with_capacity(sample.target_ids.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&sample.target_ids);
        let mut gold: Vec<Option<usize>> = sample.target_ids.iter().map(|&t| Some(t)).collect();
        gold.push(Some(EOS));
        let logits = self.backbone()?.decode(s, enc.memory, &sample.pad, &prefix)?;
        let ce = s.tape.cross_entropy(logits, &gold)?;
        Ok((ce, gold.len()))
    }

    /// Mean per-token loss over `samples` without updating anything.
    pub fn evaluate_loss(&self, samples: &[PreparedSample], variant: Variant) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for sample in samples {
            let mut s = Session::new(&self.params);
            let (ce, n) = self.loss(&mut s, sample, variant)?;
            total += s.tape.value(ce)[(0, 0)];
            tokens += n;
        }
        if tokens == 0 {
            return Err(CoreError::EmptyDataset);
        }
        Ok(total / tokens as f64)
    }

    pub fn generate(&self, sample: &PreparedSample, variant: Variant, decode: &DecodeConfig) -> Result<Vec<usize>> {
        let bb = self.backbone()?;
        let mut s = Session::new(&self.params);
        s.bind_all()?;
        let memory = self.encode(&mut s, sample, variant)?.memory;
        let mark = s.tape.len();
        let max_steps = decode.max_len.min(self.config.backbone.max_positions.saturating_sub(1));
        let mut next_log_probs = |prefix: &[usize]| -> Result<Vec<f64>> {
            let logits = bb.decode(&mut s, memory, &sample.pad, prefix)?;
            let row = log_softmax(s.tape.value(logits).row(prefix.len() - 1));
            s.tape.truncate(mark);
            Ok(row)
        };
        if decode.beam <= 1 {
            greedy(&mut next_log_probs, max_steps)
        } else {
            beam_search(&mut next_log_probs, decode.beam, max_steps, decode.length_penalty)
        }
    }

    pub fn generate_text(&self, sample: &PreparedSample, variant: Variant, decode: &DecodeConfig) -> Result<String> {
        let ids = self.generate(sample, variant, decode)?;
        Ok(self.vocab.decode(&ids).join(" "))
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn greedy(next: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>, max_steps: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    for _ in 0..max_steps {
        let tok = argmax(&next(&prefix)?);
        prefix.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(prefix.split_off(1))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    score: f64,
}

impl Hypothesis {
    fn normalized(&self, length_penalty: f64) -> f64 {
        let len = (self.ids.len() - 1).max(1) as f64;
        self.score / libm::pow(len, length_penalty)
    }
}

fn beam_search(
    next: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
    beam: usize,
    max_steps: usize,
    length_penalty: f64,
) -> Result<Vec<usize>> {
    let mut alive = vec![Hypothesis { ids: vec![BOS], score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_steps {
        let mut candidates = Vec::new();
        for h in &alive {
            let lp = next(&h.ids)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
            for &tok in order.iter().take(beam) {
                let mut ids = h.ids.clone();
                ids.push(tok);
                candidates.push(Hypothesis {
                    ids,
                    score: h.score + lp[tok],
                });
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        alive.clear();
        for c in candidates {
            if alive.len() >= beam {
                break;
            }
            if c.ids.last() == Some(&EOS) {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if finished.len() >= beam || alive.is_empty() {
            break;
        }
    }
    finished.extend(alive);
    let best = finished
        .iter()
        .fold(None::<&Hypothesis>, |best, h| match best {
            Some(b) if b.normalized(length_penalty) >= h.normalized(length_penalty) => Some(b),
            _ => Some(h),
        })
        .ok_or(CoreError::EmptyDataset)?;
    Ok(best.ids[1..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Beam width; `1` is greedy decoding.
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_len: 64,
            length_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many updates instead of after `epochs`.
    pub max_steps: Option<usize>,
    pub shuffle: bool,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            shuffle: true,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-token cross-entropy of the batch before the update.
    pub loss: f64,
    pub tokens: usize,
}

pub fn train(
    model: &mut Model,
    samples: &[PreparedSample],
    variant: Variant,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if samples.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(CoreError::Config(String::from("batch size must be positive")));
    }
    let batches_per_epoch = samples.len().div_ceil(config.batch_size);
    let total = config.max_steps.unwrap_or(config.epochs * batches_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            if step >= total {
                break;
            }
            let (loss, tokens, grads) = batch_gradients(model, samples, chunk, variant)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(CoreError::NonFiniteLoss { step, batch });
            }
            opt.step(&mut model.params, &grads)?;
            let rec = LossRecord {
                step,
                epoch,
                loss,
                tokens,
            };
            on_step(&rec);
            records.push(rec);
            step += 1;
        }
        epoch += 1;
    }
    Ok(records)
}

fn batch_gradients(
    model: &Model,
    samples: &[PreparedSample],
    indices: &[usize],
    variant: Variant,
) -> Result<(f64, usize, BTreeMap<String, Matrix>)> {
    let mut s = Session::new(&model.params);
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    for &i in indices {
        let (ce, n) = model.loss(&mut s, &samples[i], variant)?;
        tokens += n;
        total = Some(match total {
            Some(t) => s.tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or(CoreError::EmptyDataset)?;
    let mean = s.tape.scale(total, 1.0 / tokens as f64);
    let loss = s.tape.value(mean)[(0, 0)];
    let grads = s.param_gradients(mean)?;
    Ok((loss, tokens, grads))
}

/// A trained model together with what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub variant: Variant,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: Model,
    /// Versions of the tokenizer and external backends used to build inputs.
    pub versions: BTreeMap<String, String>,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CoreError::Incompatible(format!(
                "checkpoint format {} is not {CHECKPOINT_FORMAT}",
                self.format
            )));
        }
        self.model.check_compatible()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_keys_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_key(v.key()), Some(v));
        }
        assert!(Variant::Full.uses_graph() && Variant::Full.uses_fusion() && Variant::Full.includes_target());
        assert!(!Variant::MinusKgTs.uses_graph() && !Variant::MinusKgTs.includes_target());
        assert!(!Variant::MinusSf.uses_fusion() && Variant::MinusSf.includes_target());
    }

    #[test]
    fn combine_respects_enabled_branches() {
        let h = Matrix::filled(2, 2, 1.0);
        let f = Matrix::filled(2, 2, 2.0);
        assert_eq!(combine(Some(&h), Some(&f)).unwrap(), Matrix::filled(2, 2, 3.0));
        assert_eq!(combine(Some(&h), None).unwrap(), h);
        assert_eq!(combine(None, Some(&f)).unwrap(), f);
        assert!(combine(None, None).is_err());
    }

    fn scripted(table: Vec<Vec<f64>>) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| Ok(log_softmax(&table[(prefix.len() - 1).min(table.len() - 1)]))
    }

    #[test]
    fn beam_of_one_matches_greedy() {
        let table = vec![
            vec![0.0, 0.0, 0.1, 0.0, 2.0, 1.0],
            vec![0.0, 0.0, 0.5, 0.0, 0.4, 3.0],
            vec![0.0, 0.0, 4.0, 0.0, 0.1, 0.2],
        ];
        let g = greedy(&mut scripted(table.clone()), 10).unwrap();
        let b = beam_search(&mut scripted(table), 1, 10, 1.0).unwrap();
        assert_eq!(g, vec![4, 5, EOS]);
        assert_eq!(g, b);
    }

    #[test]
    fn beam_finds_a_better_path_than_greedy() {
        // greedy takes 4 then is stuck with a flat distribution; 5 leads to a confident end
        let mut next = |prefix: &[usize]| -> Result<Vec<f64>> {
            let row = match prefix {
                [BOS] => vec![-9.0, -9.0, -9.0, -9.0, 1.0, 0.9],
                [BOS, 4] => vec![-9.0, -9.0, 0.0, -9.0, 0.0, 0.0],
                [BOS, 5] => vec![-9.0, -9.0, 9.0, -9.0, 0.0, 0.0],
                _ => vec![-9.0, -9.0, 9.0, -9.0, 0.0, 0.0],
            };
            Ok(log_softmax(&row))
        };
        let g = greedy(&mut next, 5).unwrap();
        assert_eq!(g[0], 4);
        let b = beam_search(&mut next, 2, 5, 1.0).unwrap();
        assert_eq!(b, vec![5, EOS]);
    }
}
