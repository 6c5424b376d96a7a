//! Episodic training.
//!
//! Each step samples an episode uniformly with replacement and builds one
//! objective:
//!
//! ```text
//! L = L_span_eps / |S| + λ / |Q| · (L_proto_eps + L_mrg_eps)
//! ```
//!
//! `L_span_eps` sums the span loss over support sentences, `L_proto_eps` and
//! `L_mrg_eps` sum the prototypical and margin losses over query sentences.
//! `λ` is 0 before the pretraining step count is reached and 1 afterwards.
//! False positives for the margin term come from decoding the query with
//! the current parameters; the selection itself carries no gradient.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::classifier::{margin_loss_in, proto_loss_in, prototypes_in, span_representation_in, MarginConfig};
use crate::data::{Episode, EpisodeDataset, Span};
use crate::encoder::{EncoderConfig, Substitution, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::model::SpanProto;
use crate::optim::{AdamW, OptimizerConfig};
use crate::params::Gradients;
use crate::span::{decode, span_loss_in, BoundaryMatrix, DecodeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Steps trained on the span loss alone.
    pub pretrain_steps: usize,
    pub optimizer: OptimizerConfig,
    pub decode: DecodeConfig,
    pub margin: MarginConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Episodes averaged per optimizer step.
    pub batch_size: usize,
    /// Chance that a word seen inside a training mention is swapped for a
    /// random unknown bucket throughout one training episode. Test types
    /// bring names the vocabulary has never seen.
    pub name_substitution: f64,
    /// The same chance for every other word.
    pub word_substitution: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            pretrain_steps: 200,
            optimizer: OptimizerConfig::default(),
            decode: DecodeConfig::default(),
            margin: MarginConfig::default(),
            encoder: EncoderConfig::default(),
            seed: 42,
            checkpoint_every: 500,
            batch_size: 1,
            name_substitution: 0.8,
            word_substitution: 0.2,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total steps must be positive".into()));
        }
        if self.pretrain_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "pretraining steps ({}) must be fewer than total steps ({})",
                self.pretrain_steps, self.total_steps
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for p in [self.name_substitution, self.word_substitution] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("substitution chances must lie in [0, 1]".into()));
            }
        }
        self.optimizer_config().validate()?;
        self.decode.validate()?;
        self.margin.validate()?;
        self.encoder.validate()
    }

    /// The optimizer settings with the schedule length tied to `total_steps`.
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            total_steps: self.total_steps,
            ..self.optimizer.clone()
        }
    }

    /// `λ` at 1-based step `st`.
    pub fn lambda(&self, st: usize) -> f64 {
        if st < self.pretrain_steps {
            0.0
        } else {
            1.0
        }
    }
}

/// Loss terms of one episode at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTerms {
    pub episode: usize,
    /// Sum of span losses over support sentences.
    pub span_loss: f64,
    /// Sum of prototypical losses over query sentences.
    pub proto_loss: f64,
    /// Sum of margin losses over query sentences.
    pub margin_loss: f64,
    pub support_size: usize,
    pub query_size: usize,
    /// False-positive count per query sentence.
    pub false_positives: Vec<usize>,
    pub total: f64,
}

impl EpisodeTerms {
    /// The objective recomputed from the summed terms.
    pub fn assembled(&self, lambda: f64) -> f64 {
        loss_assembly(
            self.span_loss,
            self.proto_loss,
            self.margin_loss,
            self.support_size,
            self.query_size,
            lambda,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub episodes: Vec<EpisodeTerms>,
    /// Mean of the episode objectives.
    pub total: f64,
}

/// `span / |S| + λ / |Q| · (proto + margin)` over already-summed terms.
pub fn loss_assembly(span: f64, proto: f64, margin: f64, support: usize, query: usize, lambda: f64) -> f64 {
    let span_term = span / support as f64;
    if lambda == 0.0 {
        return span_term;
    }
    span_term + lambda / query as f64 * (proto + margin)
}

/// Switches for [`episode_objective`].
#[derive(Clone, Copy)]
pub struct ObjectiveOptions<'a> {
    pub lambda: f64,
    pub decode: &'a DecodeConfig,
    pub margin: &'a MarginConfig,
    /// Use these false-positive sets instead of decoding the query.
    pub fixed_false_positives: Option<&'a [BTreeSet<Span>]>,
}

/// Builds the objective for one episode in `g`. Returns the loss node, its
/// terms, and the false-positive set used for each query sentence.
pub fn episode_objective(
    g: &mut Graph,
    model: &SpanProto,
    episode: &Episode,
    options: ObjectiveOptions,
    substitution: Option<&Substitution>,
) -> Result<(Var, EpisodeTerms, Vec<BTreeSet<Span>>)> {
    let encode = |g: &mut Graph, tokens: &[String]| model.encode_in(g, tokens, substitution);

    let mut span_terms = Vec::with_capacity(episode.support.len());
    let mut support = Vec::with_capacity(episode.support.len());
    for sentence in &episode.support {
        let h = encode(g, &sentence.tokens)?;
        let f = model.scorer.forward(g, h);
        span_terms.push(span_loss_in(g, f, sentence));
        support.push((h, sentence));
    }
    let span_sum = g.sum(span_terms);
    let prototypes = prototypes_in(g, &support, &episode.types)?;

    let mut class_terms = Vec::new();
    let (mut proto_sum, mut margin_sum) = (0.0, 0.0);
    let mut fp_sets = Vec::with_capacity(episode.query.len());
    for (qi, sentence) in episode.query.iter().enumerate() {
        let h = encode(g, &sentence.tokens)?;
        let mut gold = Vec::with_capacity(sentence.mentions.len());
        for m in &sentence.mentions {
            let t = episode.type_index(&m.label).ok_or_else(|| {
                Error::Invalid(format!("query mention type `{}` is not an episode type", m.label))
            })?;
            gold.push((span_representation_in(g, h, m.span), t));
        }
        if let Some(l) = proto_loss_in(g, &gold, &prototypes) {
            proto_sum += g.scalar(l);
            class_terms.push(l);
        }

        let fps = match options.fixed_false_positives {
            Some(sets) => sets[qi].clone(),
            None => {
                let f = model.scorer.forward(g, h);
                let scores = BoundaryMatrix::new(g.value(f).clone())?;
                let predicted = decode(&scores, options.decode);
                crate::classifier::false_positive_set(&predicted, &sentence.gold_spans().into_iter().collect())
            }
        };
        if options.margin.margin_loss {
            let reps: Vec<Var> = fps.iter().map(|&s| span_representation_in(g, h, s)).collect();
            if let Some(l) = margin_loss_in(g, &reps, &prototypes, options.margin.radius) {
                margin_sum += g.scalar(l);
                class_terms.push(l);
            }
        }
        fp_sets.push(fps);
    }

    let (s_len, q_len) = (episode.support.len(), episode.query.len());
    let mut total = g.scale(span_sum, 1.0 / s_len as f64);
    if options.lambda != 0.0 && !class_terms.is_empty() {
        let class_sum = g.sum(class_terms);
        let class_term = g.scale(class_sum, options.lambda / q_len as f64);
        total = g.add(total, class_term);
    }
    let terms = EpisodeTerms {
        episode: 0,
        span_loss: g.scalar(span_sum),
        proto_loss: proto_sum,
        margin_loss: margin_sum,
        support_size: s_len,
        query_size: q_len,
        false_positives: fp_sets.iter().map(BTreeSet::len).collect(),
        total: g.scalar(total),
    };
    Ok((total, terms, fp_sets))
}

/// Trains a fresh model. See [`train_with`].
pub fn train(data: &EpisodeDataset, config: &TrainConfig) -> Result<(SpanProto, Vec<StepReport>)> {
    let mut reports = Vec::with_capacity(config.total_steps);
    let model = train_with(data, config, |report, _| {
        reports.push(report.clone());
        Ok(())
    })?;
    Ok((model, reports))
}

/// Builds the vocabulary from `data`, initializes a model from `config.seed`
/// and runs the training loop. `observe` sees every step report together
/// with the parameters right after that step's update.
pub fn train_with(
    data: &EpisodeDataset,
    config: &TrainConfig,
    observe: impl FnMut(&StepReport, &SpanProto) -> Result<()>,
) -> Result<SpanProto> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training data has no episodes".into()));
    }
    data.validate()?;
    let vocab = Vocabulary::build(data.sentences(), config.encoder.oov_buckets);
    let model = SpanProto::new(config.encoder.clone(), vocab, config.seed)?;
    train_model(model, data, config, observe)
}

/// Words that occur inside some gold mention of `data`.
fn mention_words(data: &EpisodeDataset) -> BTreeSet<&str> {
    data.sentences()
        .flat_map(|s| {
            s.mentions
                .iter()
                .flat_map(move |m| s.tokens[m.span.start..=m.span.end].iter().map(String::as_str))
        })
        .collect()
}

/// Continues training an existing model.
pub fn train_model(
    mut model: SpanProto,
    data: &EpisodeDataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&StepReport, &SpanProto) -> Result<()>,
) -> Result<SpanProto> {
    config.validate()?;
    data.validate()?;
    let optim_config = config.optimizer_config();
    let mut optimizer = AdamW::new(&model.params);
    // Stream 1 keeps sampling independent of the initialization stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let names = mention_words(data);
    let chance = |w: &str| {
        if names.contains(w) {
            config.name_substitution
        } else {
            config.word_substitution
        }
    };

    for st in 1..=config.total_steps {
        let lambda = config.lambda(st);
        let picks: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.random_range(0..data.len()), rng.random()))
            .collect();

        let results = map_indexed(&picks, config.execution, |_, &(index, dropout_seed)| {
            let episode = &data.episodes[index];
            let mut g = Graph::with_params(&model.params);
            let substitution = (config.name_substitution > 0.0 || config.word_substitution > 0.0).then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let words = episode.support.iter().chain(&episode.query).flat_map(|s| s.tokens.iter().map(String::as_str));
                Substitution::sample(model.encoder.vocab(), words, chance, &mut rng)
            });
            let options = ObjectiveOptions {
                lambda,
                decode: &config.decode,
                margin: &config.margin,
                fixed_false_positives: None,
            };
            let (loss, mut terms, _) = episode_objective(&mut g, &model, episode, options, substitution.as_ref())?;
            terms.episode = index;
            Ok::<_, Error>((g.param_gradients(loss), terms))
        });

        let mut grads = Gradients::empty(model.params.len());
        let mut episodes = Vec::with_capacity(picks.len());
        for r in results {
            let (g, terms) = r?;
            grads.merge(&g);
            episodes.push(terms);
        }
        let batch = episodes.len() as f64;
        grads.scale(1.0 / batch);
        let report = StepReport {
            step: st,
            lambda,
            learning_rate: optim_config.learning_rate_at(st),
            total: episodes.iter().map(|e| e.total).sum::<f64>() / batch,
            episodes,
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {st}: {}",
                serde_json::to_string(&report)?
            )));
        }

        model.params.zero_grad();
        model.params.accumulate(&grads);
        optimizer.step(&mut model.params, &optim_config, st)?;
        observe(&report, &model)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembly_examples() {
        assert_eq!(loss_assembly(1.0 + 3.0, 123.0, 456.0, 2, 1, 0.0), 2.0);
        assert_eq!(loss_assembly(0.0, 0.5, 0.25, 1, 1, 1.0), 0.75);
        assert_eq!(loss_assembly(2.0, 1.0, 1.0, 2, 4, 1.0), 1.5);
    }

    #[test]
    fn lambda_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lambda(1), 0.0);
        assert_eq!(cfg.lambda(100), 0.0);
        assert_eq!(cfg.lambda(199), 0.0);
        assert_eq!(cfg.lambda(200), 1.0);
        assert_eq!(cfg.lambda(300), 1.0);
    }

    #[test]
    fn pretrain_must_be_shorter() {
        let cfg = TrainConfig {
            total_steps: 10,
            pretrain_steps: 10,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
