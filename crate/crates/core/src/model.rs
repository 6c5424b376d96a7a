//! The full two-stage model: a shared encoder feeding the span scorer and the
//! prototype classifier, plus checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::LabeledSentence;
use crate::encoder::{EncodedSentence, Encoder, EncoderConfig, Substitution, Vocabulary};
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::span::{BoundaryMatrix, SpanScorer, SpanScorerParams};

#[derive(Debug, Clone)]
pub struct SpanProto {
    pub encoder: Encoder,
    pub scorer: SpanScorer,
    pub params: ParameterRegistry,
}

impl SpanProto {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterRegistry::new();
        let dim = config.dim;
        let encoder = Encoder::new(config, vocab, &mut params, &mut rng)?;
        let scorer = SpanScorer::new(dim, &mut params, &mut rng)?;
        Ok(SpanProto {
            encoder,
            scorer,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.config().dim
    }

    /// Encodes `tokens` into `g`.
    pub fn encode_in(&self, g: &mut Graph, tokens: &[String], substitution: Option<&Substitution>) -> Result<Var> {
        self.encoder.check_length(tokens.len())?;
        let ids = self.encoder.token_ids(tokens, substitution);
        Ok(self.encoder.forward(g, &ids))
    }

    pub fn encode(&self, sentence: &LabeledSentence) -> Result<EncodedSentence> {
        self.encoder.encode(sentence, &self.params)
    }

    pub fn scorer_params(&self) -> SpanScorerParams {
        self.scorer.values(&self.params)
    }

    /// Encoding and boundary scores for one sentence.
    pub fn analyze(&self, sentence: &LabeledSentence) -> Result<(EncodedSentence, BoundaryMatrix)> {
        let mut g = Graph::with_params(&self.params);
        let h = self.encode_in(&mut g, &sentence.tokens, None)?;
        let f = self.scorer.forward(&mut g, h);
        let encoded = EncodedSentence { h: g.value(h).clone() };
        if encoded.h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok((encoded, BoundaryMatrix::new(g.value(f).clone())?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            encoder: self.encoder.config().clone(),
            vocab: self.encoder.vocab().clone(),
            params: self
                .params
                .ids()
                .map(|id| {
                    let v = self.params.value(id);
                    StoredTensor {
                        name: self.params.name(id).to_owned(),
                        shape: [v.nrows(), v.ncols()],
                        values: v.iter().copied().collect(),
                    }
                })
                .collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &checkpoint)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(checkpoint)
    }

    fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", checkpoint.format)));
        }
        let mut model = SpanProto::new(checkpoint.encoder, checkpoint.vocab, 0)?;
        if checkpoint.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                checkpoint.params.len()
            )));
        }
        for stored in checkpoint.params {
            let id = model
                .params
                .id(&stored.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", stored.name)))?;
            let expect = model.params.value(id).dim();
            let shape = (stored.shape[0], stored.shape[1]);
            if shape != expect {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {shape:?}, model expects {expect:?}",
                    stored.name
                )));
            }
            let value = Array2::from_shape_vec(shape, stored.values).map_err(|_| {
                Error::Checkpoint(format!("tensor `{}` value count does not match its shape", stored.name))
            })?;
            model.params.set(id, value)?;
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "spanproto-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    encoder: EncoderConfig,
    vocab: Vocabulary,
    params: Vec<StoredTensor>,
}

/// Row-major values with their shape.
#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SpanProto {
        let s = LabeledSentence::from_text("the cat sat", vec![]);
        let vocab = Vocabulary::build([&s], 4);
        let cfg = EncoderConfig {
            dim: 4,
            ..Default::default()
        };
        SpanProto::new(cfg, vocab, 3).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let back = SpanProto::load(&path).unwrap();
        for id in m.params.ids() {
            assert_eq!(m.params.value(id), back.params.value(id), "{}", m.params.name(id));
        }
        assert_eq!(back.encoder.vocab(), m.encoder.vocab());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save(&path).unwrap();
        let mut json: serde_json::Value = serde_json::from_reader(File::open(&path).unwrap()).unwrap();
        json["params"][1]["shape"] = serde_json::json!([3, 3]);
        serde_json::to_writer(File::create(&path).unwrap(), &json).unwrap();
        let err = SpanProto::load(&path).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, b"{\"format\": \"spanproto-chec").unwrap();
        assert!(matches!(SpanProto::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = model();
        let b = model();
        for id in a.params.ids() {
            assert_eq!(a.params.value(id), b.params.value(id));
        }
    }
}
