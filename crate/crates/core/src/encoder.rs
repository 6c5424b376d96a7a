//! Trainable contextual token encoder.
//!
//! Token embeddings pass through `mixing_layers` residual blocks. Each block
//! mixes every position by softmax attention whose scores see a sinusoidal
//! position signal, adds projections of the left and right neighbours, and
//! applies `tanh` before the residual add. Blocks read a row-normalized copy
//! of the stream, so the embedding scale sets how much raw token identity
//! survives next to the context updates. A scaled copy of the position
//! signal also enters the residual stream. Only the leading columns of the
//! embedding table start random, which leaves the others free for context.
//! Output rows are rescaled to a fixed norm.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hasher;

use fnv::FnvHasher;
use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::LabeledSentence;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Embedding size `h`.
    pub dim: usize,
    pub max_len: usize,
    pub mixing_layers: usize,
    /// Hashed buckets shared by tokens missing from the vocabulary.
    pub oov_buckets: usize,
    /// Standard deviation of the initial token embeddings.
    pub embedding_scale: f64,
    /// Euclidean norm of every output row.
    pub output_norm: f64,
    /// Share of the leading embedding columns that start random; the rest
    /// start at zero and are left for context features.
    pub identity_fraction: f64,
    /// Scale of the position signal added to the residual stream.
    pub position_weight: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            max_len: 128,
            mixing_layers: 2,
            oov_buckets: 1024,
            embedding_scale: 2.0,
            output_norm: 2.0,
            identity_fraction: 0.5,
            position_weight: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("embedding dim must be at least 2".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max length must be at least 1".into()));
        }
        if self.oov_buckets < 1 {
            return Err(Error::Config("need at least one unknown-token bucket".into()));
        }
        if !(self.embedding_scale > 0.0) {
            return Err(Error::Config("embedding scale must be positive".into()));
        }
        if !(self.output_norm > 0.0 && self.output_norm.is_finite()) {
            return Err(Error::Config("output norm must be positive".into()));
        }
        if !(self.identity_fraction > 0.0 && self.identity_fraction <= 1.0) {
            return Err(Error::Config("identity fraction must lie in (0, 1]".into()));
        }
        if !self.position_weight.is_finite() {
            return Err(Error::Config("position weight must be finite".into()));
        }
        Ok(())
    }

    /// Embedding columns that start random.
    pub fn identity_dims(&self) -> usize {
        ((self.dim as f64 * self.identity_fraction).round() as usize).clamp(1, self.dim)
    }
}

/// Token to row index. Known tokens come first, then the hashed buckets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    oov_buckets: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    oov_buckets: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.oov_buckets)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            oov_buckets: v.oov_buckets,
        }
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, oov_buckets: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            oov_buckets: oov_buckets.max(1),
        }
    }

    /// Sorted distinct tokens of `sentences`.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a LabeledSentence>, oov_buckets: usize) -> Self {
        let distinct: BTreeSet<&str> = sentences
            .into_iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
            .collect();
        Self::from_tokens(distinct.into_iter().map(str::to_owned).collect(), oov_buckets)
    }

    pub fn known(&self) -> usize {
        self.tokens.len()
    }

    /// Rows in the embedding table.
    pub fn size(&self) -> usize {
        self.tokens.len() + self.oov_buckets
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.oov_index(token))
    }

    /// The hashed bucket of `token`, whether or not it is known.
    pub fn oov_index(&self, token: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        self.tokens.len() + (h.finish() % self.oov_buckets as u64) as usize
    }
}

/// Word types remapped to random unknown buckets for one training episode.
///
/// A substituted word keeps the same bucket everywhere in the episode, so it
/// looks like a consistent but unfamiliar word, the way an unseen word does
/// at test time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Substitution(HashMap<String, usize>);

impl Substitution {
    /// Picks each distinct word `w` with probability `p(w)`.
    pub fn sample<'a>(
        vocab: &Vocabulary,
        words: impl IntoIterator<Item = &'a str>,
        p: impl Fn(&str) -> f64,
        rng: &mut impl Rng,
    ) -> Self {
        let distinct: BTreeSet<&str> = words.into_iter().collect();
        let mut map = HashMap::new();
        for w in distinct {
            if rng.random::<f64>() < p(w) {
                map.insert(w.to_owned(), vocab.known() + rng.random_range(0..vocab.oov_buckets));
            }
        }
        Substitution(map)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Contextual embeddings `H`, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub h: Array2<f64>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }
}

#[derive(Debug, Clone)]
struct MixingBlock {
    attn_query: ParamId,
    attn_key: ParamId,
    value_out: ParamId,
    left: ParamId,
    right: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    embedding: ParamId,
    blocks: Vec<MixingBlock>,
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl Encoder {
    /// Registers the encoder's parameters with seeded initial values.
    pub fn new(
        config: EncoderConfig,
        vocab: Vocabulary,
        params: &mut ParameterRegistry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.dim;
        let w_std = 1.0 / (h as f64).sqrt();
        let mut table = normal_matrix(rng, vocab.size(), h, config.embedding_scale);
        table.slice_mut(s![.., config.identity_dims()..]).fill(0.0);
        let embedding = params.register("encoder.embedding", table)?;
        let mut blocks = Vec::with_capacity(config.mixing_layers);
        for l in 0..config.mixing_layers {
            let mut reg = |name: &str, value: Array2<f64>| params.register(format!("encoder.mix{l}.{name}"), value);
            blocks.push(MixingBlock {
                attn_query: reg("attn_query", normal_matrix(rng, h, h, w_std))?,
                attn_key: reg("attn_key", normal_matrix(rng, h, h, w_std))?,
                value_out: reg("value_out", normal_matrix(rng, h, h, w_std))?,
                left: reg("left", normal_matrix(rng, h, h, w_std))?,
                right: reg("right", normal_matrix(rng, h, h, w_std))?,
                bias: reg("bias", Array2::zeros((1, h)))?,
            });
        }
        Ok(Encoder {
            config,
            vocab,
            embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn check_length(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Invalid("cannot encode an empty token list".into()));
        }
        if len > self.config.max_len {
            return Err(Error::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Row indices for `tokens`, with substituted words taking their
    /// assigned bucket.
    pub fn token_ids(&self, tokens: &[String], substitution: Option<&Substitution>) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| match substitution.and_then(|s| s.0.get(t)) {
                Some(&row) => row,
                None => self.vocab.lookup(t),
            })
            .collect()
    }

    /// Adds the encoder computation for `ids` to `g` and returns `H`.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let h = self.config.dim;
        let table = g.param(self.embedding);
        let mut x = g.gather(table, ids.to_vec());
        if self.blocks.is_empty() {
            return g.normalize_rows(x, self.config.output_norm);
        }
        let pos = g.input(positions(ids.len(), h));
        if self.config.position_weight != 0.0 {
            let p = g.input(positions(ids.len(), h) * self.config.position_weight);
            x = g.add(x, p);
        }
        let scale = 1.0 / (h as f64).sqrt();
        for b in &self.blocks {
            // The update reads a unit-variance copy of the stream; the
            // residual keeps the raw scale.
            let x_in = g.normalize_rows(x, (h as f64).sqrt());
            let located = g.add(x_in, pos);
            let wq = g.param(b.attn_query);
            let wk = g.param(b.attn_key);
            let q = g.matmul(located, wq);
            let k = g.matmul(located, wk);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            let mixed = g.matmul(weights, x_in);
            let wo = g.param(b.value_out);
            let mixed = g.matmul(mixed, wo);
            let left = g.shift(x_in, 1);
            let wl = g.param(b.left);
            let left = g.matmul(left, wl);
            let right = g.shift(x_in, -1);
            let wr = g.param(b.right);
            let right = g.matmul(right, wr);
            let pre = g.sum(vec![mixed, left, right]);
            let bias = g.param(b.bias);
            let pre = g.add_row(pre, bias);
            let update = g.tanh(pre);
            x = g.add(x, update);
        }
        g.normalize_rows(x, self.config.output_norm)
    }

    pub fn encode(&self, sentence: &LabeledSentence, params: &ParameterRegistry) -> Result<EncodedSentence> {
        self.check_length(sentence.len())?;
        let ids = self.token_ids(&sentence.tokens, None);
        let mut g = Graph::with_params(params);
        let h = self.forward(&mut g, &ids);
        let h = g.value(h).clone();
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(EncodedSentence { h })
    }
}

/// Sinusoidal position signal, `len × dim`.
pub fn positions(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
