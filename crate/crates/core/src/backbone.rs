//! Word vocabulary and a compact pre-norm transformer encoder-decoder.
//!
//! The pipeline only needs three operations from a generation backbone:
//! token embedding, encoding an `N×D` input, and decoding logits for a
//! prefix against an encoded memory. [`Backbone`] captures exactly that.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, ParamStore, Session, Var};
use crate::enrich::SEPARATOR_TOKEN;
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
/// End of sequence; also used as the knowledge/target separator.
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Special tokens first, then by descending frequency, ties by token.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            if !SPECIAL_TOKENS.contains(&t) && t != SEPARATOR_TOKEN {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(all.len()));
        all.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if token == SEPARATOR_TOKEN {
            return EOS;
        }
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens up to the first end marker, skipping padding and start markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

/// Generation backbone operations, recorded on a [`Session`] tape.
pub trait Backbone {
    fn width(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn init_params(&self, store: &mut ParamStore, rng: &mut dyn RngCore);
    /// Token plus position embeddings, `ids.len()×D`.
    fn embed(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var>;
    /// Encodes `N×D` input; `pad[i]` hides position `i` as a key.
    fn encode(&self, s: &mut Session<'_>, input: Var, pad: &[bool]) -> Result<Var>;
    /// Next-token logits (`prefix.len()×V`) for every prefix position.
    fn decode(&self, s: &mut Session<'_>, memory: Var, memory_pad: &[bool], prefix: &[usize]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.width == 0 || self.layers == 0 || self.ffn_width == 0 {
            return Err(CoreError::Config(format!("invalid backbone config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyBackbone {
    pub config: TinyConfig,
}

fn xavier(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Matrix {
    Matrix::random_uniform(rows, cols, libm::sqrt(6.0 / (rows + cols) as f64), rng)
}

fn key_mask(queries: usize, pad: &[bool], causal: bool) -> Matrix {
    Matrix::from_fn(queries, pad.len(), |i, j| {
        if pad[j] || (causal && j > i) {
            MASKED
        } else {
            0.0
        }
    })
}

impl TinyBackbone {
    pub fn new(config: TinyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn insert_attention(&self, store: &mut ParamStore, prefix: &str, rng: &mut dyn RngCore) {
        let d = self.config.width;
        for p in ["q", "k", "v", "o"] {
            store.insert(&format!("{prefix}.{p}"), ParamGroup::Backbone, xavier(d, d, rng));
        }
    }

    fn insert_norm(&self, store: &mut ParamStore, prefix: &str) {
        let d = self.config.width;
        store.insert(&format!("{prefix}.g"), ParamGroup::Backbone, Matrix::filled(1, d, 1.0));
        store.insert(&format!("{prefix}.b"), ParamGroup::Backbone, Matrix::zeros(1, d));
    }

    fn insert_ffn(&self, store: &mut ParamStore, prefix: &str, rng: &mut dyn RngCore) {
        let (d, f) = (self.config.width, self.config.ffn_width);
        store.insert(&format!("{prefix}.w1"), ParamGroup::Backbone, xavier(d, f, rng));
        store.insert(&format!("{prefix}.b1"), ParamGroup::Backbone, Matrix::zeros(1, f));
        store.insert(&format!("{prefix}.w2"), ParamGroup::Backbone, xavier(f, d, rng));
        store.insert(&format!("{prefix}.b2"), ParamGroup::Backbone, Matrix::zeros(1, d));
    }

    fn norm(&self, s: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
        let g = s.param(&format!("{prefix}.g"))?;
        let b = s.param(&format!("{prefix}.b"))?;
        s.tape.layer_norm(x, g, b)
    }

    fn attention(&self, s: &mut Session<'_>, prefix: &str, xq: Var, xkv: Var, mask: &Matrix) -> Result<Var> {
        let wq = s.param(&format!("{prefix}.q"))?;
        let wk = s.param(&format!("{prefix}.k"))?;
        let wv = s.param(&format!("{prefix}.v"))?;
        let wo = s.param(&format!("{prefix}.o"))?;
        let t = &mut s.tape;
        let q = t.matmul(xq, wq)?;
        let k = t.matmul(xkv, wk)?;
        let v = t.matmul(xkv, wv)?;
        let scores = t.matmul_t(q, k)?;
        let scores = t.scale(scores, 1.0 / libm::sqrt(self.config.width as f64));
        let scores = t.add_const(scores, mask)?;
        let probs = t.softmax_rows(scores);
        let out = t.matmul(probs, v)?;
        t.matmul(out, wo)
    }

    fn ffn(&self, s: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
        let w1 = s.param(&format!("{prefix}.w1"))?;
        let b1 = s.param(&format!("{prefix}.b1"))?;
        let w2 = s.param(&format!("{prefix}.w2"))?;
        let b2 = s.param(&format!("{prefix}.b2"))?;
        let t = &mut s.tape;
        let h = t.matmul(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.relu(h);
        let h = t.matmul(h, w2)?;
        t.add_row(h, b2)
    }

    fn residual(s: &mut Session<'_>, x: Var, delta: Var) -> Result<Var> {
        s.tape.add(x, delta)
    }
}

impl Backbone for TinyBackbone {
    fn width(&self) -> usize {
        self.config.width
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        let c = self.config;
        store.insert(
            "embed.tokens",
            ParamGroup::Backbone,
            Matrix::random_uniform(c.vocab_size, c.width, 0.1, rng),
        );
        store.insert(
            "embed.positions",
            ParamGroup::Backbone,
            Matrix::random_uniform(c.max_positions, c.width, 0.1, rng),
        );
        for l in 0..c.layers {
            self.insert_norm(store, &format!("enc.{l}.ln1"));
            self.insert_attention(store, &format!("enc.{l}.attn"), rng);
            self.insert_norm(store, &format!("enc.{l}.ln2"));
            self.insert_ffn(store, &format!("enc.{l}.ff"), rng);
            self.insert_norm(store, &format!("dec.{l}.ln1"));
            self.insert_attention(store, &format!("dec.{l}.self"), rng);
            self.insert_norm(store, &format!("dec.{l}.ln2"));
            self.insert_attention(store, &format!("dec.{l}.cross"), rng);
            self.insert_norm(store, &format!("dec.{l}.ln3"));
            self.insert_ffn(store, &format!("dec.{l}.ff"), rng);
        }
        self.insert_norm(store, "enc.ln_f");
        self.insert_norm(store, "dec.ln_f");
        store.insert("lm.w", ParamGroup::Backbone, xavier(c.width, c.vocab_size, rng));
        store.insert("lm.b", ParamGroup::Backbone, Matrix::zeros(1, c.vocab_size));
    }

    fn embed(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_positions {
            return Err(CoreError::Shape {
                op: "embed",
                lhs: (ids.len(), self.config.width),
                rhs: (self.config.max_positions, self.config.width),
            });
        }
        let table = s.param("embed.tokens")?;
        let positions = s.param("embed.positions")?;
        let tok = s.tape.gather(table, ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = s.tape.gather(positions, &pos_ids)?;
        s.tape.add(tok, pos)
    }

    fn encode(&self, s: &mut Session<'_>, input: Var, pad: &[bool]) -> Result<Var> {
        let mask = key_mask(pad.len(), pad, false);
        let mut x = input;
        for l in 0..self.config.layers {
            let h = self.norm(s, &format!("enc.{l}.ln1"), x)?;
            let a = self.attention(s, &format!("enc.{l}.attn"), h, h, &mask)?;
            x = Self::residual(s, x, a)?;
            let h = self.norm(s, &format!("enc.{l}.ln2"), x)?;
            let f = self.ffn(s, &format!("enc.{l}.ff"), h)?;
            x = Self::residual(s, x, f)?;
        }
        self.norm(s, "enc.ln_f", x)
    }

    fn decode(&self, s: &mut Session<'_>, memory: Var, memory_pad: &[bool], prefix: &[usize]) -> Result<Var> {
        let no_pad = alloc::vec![false; prefix.len()];
        let self_mask = key_mask(prefix.len(), &no_pad, true);
        let cross_mask = key_mask(prefix.len(), memory_pad, false);
        let mut x = self.embed(s, prefix)?;
        for l in 0..self.config.layers {
            let h = self.norm(s, &format!("dec.{l}.ln1"), x)?;
            let a = self.attention(s, &format!("dec.{l}.self"), h, h, &self_mask)?;
            x = Self::residual(s, x, a)?;
            let h = self.norm(s, &format!("dec.{l}.ln2"), x)?;
            let c = self.attention(s, &format!("dec.{l}.cross"), h, memory, &cross_mask)?;
            x = Self::residual(s, x, c)?;
            let h = self.norm(s, &format!("dec.{l}.ln3"), x)?;
            let f = self.ffn(s, &format!("dec.{l}.ff"), h)?;
            x = Self::residual(s, x, f)?;
        }
        let x = self.norm(s, "dec.ln_f", x)?;
        let w = s.param("lm.w")?;
        let b = s.param("lm.b")?;
        let logits = s.tape.matmul(x, w)?;
        s.tape.add_row(logits, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyBackbone {
        TinyBackbone::new(TinyConfig {
            vocab_size: 9,
            width: 4,
            layers: 1,
            ffn_width: 6,
            max_positions: 8,
        })
        .unwrap()
    }

    #[test]
    fn vocab_orders_by_frequency_and_maps_separator() {
        let v = Vocab::build(["b", "a", "b", "c", "<sep>"].into_iter(), None);
        assert_eq!(v.token(4), "b");
        assert_eq!(v.token(5), "a");
        assert_eq!(v.id(SEPARATOR_TOKEN), EOS);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 6]), vec!["b", "a"]);
        let capped = Vocab::build(["b", "a", "b"].into_iter(), Some(5));
        assert_eq!(capped.len(), 5);
    }

    #[test]
    fn decoder_is_causal() {
        let b = tiny();
        let mut store = ParamStore::default();
        b.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut s = Session::new(&store);
        let x = b.embed(&mut s, &[4, 5, 6]).unwrap();
        let mem = b.encode(&mut s, x, &[false, false, true]).unwrap();
        let full = b.decode(&mut s, mem, &[false, false, true], &[BOS, 4, 7]).unwrap();
        let short = b.decode(&mut s, mem, &[false, false, true], &[BOS, 4]).unwrap();
        let (f, sh) = (s.tape.value(full).clone(), s.tape.value(short).clone());
        for i in 0..2 {
            for j in 0..9 {
                assert!((f[(i, j)] - sh[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_keys_do_not_influence_memory() {
        let b = tiny();
        let mut store = ParamStore::default();
        b.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let mut s = Session::new(&store);
        let x1 = b.embed(&mut s, &[4, 5, PAD]).unwrap();
        let x2 = b.embed(&mut s, &[4, 5, 8]).unwrap();
        let m1 = b.encode(&mut s, x1, &[false, false, true]).unwrap();
        let m2 = b.encode(&mut s, x2, &[false, false, true]).unwrap();
        let (a, c) = (s.tape.value(m1), s.tape.value(m2));
        for i in 0..2 {
            for j in 0..4 {
                assert!((a[(i, j)] - c[(i, j)]).abs() < 1e-12);
            }
        }
    }
}
