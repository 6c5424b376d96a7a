//! Two-stage inference on evaluation episodes and span-level scoring.
//!
//! Prototypes come from the support gold mentions. Each query sentence is
//! decoded, every candidate is classified against the prototypes with
//! rejection, and a prediction counts as correct only when its start, end and
//! type all match a gold mention. Rejected candidates are not predictions.

use std::collections::BTreeSet;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify, compute_prototypes, span_representation, MarginConfig, PrototypeSet, Verdict};
use crate::data::{Episode, EpisodeDataset, LabeledSentence, Span};
use crate::error::Result;
use crate::exec::{map_indexed, Execution};
use crate::model::SpanProto;
use crate::span::{decode, BoundaryMatrix, DecodeConfig};

pub type Labeled = (Span, String);

/// A decoded span with its representation and verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub span: Span,
    pub u: Array1<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction {
    pub scores: BoundaryMatrix,
    pub candidates: Vec<Candidate>,
}

impl QueryPrediction {
    pub fn predictions(&self) -> BTreeSet<Labeled> {
        self.candidates
            .iter()
            .filter_map(|c| c.verdict.label().map(|t| (c.span, t.to_owned())))
            .collect()
    }

    pub fn rejected(&self) -> usize {
        self.candidates.iter().filter(|c| c.verdict == Verdict::Rejected).count()
    }

    /// Re-runs classification with another radius on the same decode output.
    pub fn reclassify(&self, prototypes: &PrototypeSet, margin: &MarginConfig) -> QueryPrediction {
        QueryPrediction {
            scores: self.scores.clone(),
            candidates: self
                .candidates
                .iter()
                .map(|c| Candidate {
                    verdict: classify(&c.u, prototypes, margin),
                    ..c.clone()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePrediction {
    pub prototypes: PrototypeSet,
    pub queries: Vec<QueryPrediction>,
}

/// Runs both stages on one episode.
pub fn predict_episode(
    model: &SpanProto,
    episode: &Episode,
    decode_config: &DecodeConfig,
    margin: &MarginConfig,
) -> Result<EpisodePrediction> {
    let encoded = episode
        .support
        .iter()
        .map(|s| model.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let support: Vec<_> = encoded.iter().zip(&episode.support).collect();
    let prototypes = compute_prototypes(&support, &episode.types)?;

    let queries = episode
        .query
        .iter()
        .map(|sentence| {
            let (h, scores) = model.analyze(sentence)?;
            let candidates = decode(&scores, decode_config)
                .into_iter()
                .map(|span| {
                    let u = span_representation(&h, span)?.u;
                    let verdict = classify(&u, &prototypes, margin);
                    Ok(Candidate { span, u, verdict })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryPrediction { scores, candidates })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodePrediction { prototypes, queries })
}

pub fn gold_set(sentence: &LabeledSentence) -> BTreeSet<Labeled> {
    sentence.mentions.iter().map(|m| (m.span, m.label.clone())).collect()
}

/// Exact-match counts plus the false-positive breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    /// False positives whose boundaries match no gold span.
    pub fp_span: usize,
    /// False positives on a gold span with the wrong type.
    pub fp_type: usize,
}

impl Counts {
    pub fn of(predicted: &BTreeSet<Labeled>, gold: &BTreeSet<Labeled>) -> Counts {
        let gold_spans: BTreeSet<Span> = gold.iter().map(|(s, _)| *s).collect();
        let mut c = Counts {
            predicted: predicted.len(),
            gold: gold.len(),
            ..Default::default()
        };
        for p in predicted {
            if gold.contains(p) {
                c.true_positives += 1;
            } else if gold_spans.contains(&p.0) {
                c.fp_type += 1;
            } else {
                c.fp_span += 1;
            }
        }
        c
    }

    pub fn add(&mut self, other: &Counts) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.gold += other.gold;
        self.fp_span += other.fp_span;
        self.fp_type += other.fp_type;
    }

    pub fn false_positives(&self) -> usize {
        self.predicted - self.true_positives
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_positives, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positives, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub fp_span: usize,
    pub fp_type: usize,
    pub fp_span_pct: f64,
    pub fp_type_pct: f64,
    /// Set when there was no false positive; both percentages are then 0.
    pub no_false_positives: bool,
}

impl ErrorBreakdown {
    pub fn from_counts(c: &Counts) -> Self {
        let total = c.fp_span + c.fp_type;
        if total == 0 {
            return ErrorBreakdown {
                fp_span: 0,
                fp_type: 0,
                fp_span_pct: 0.0,
                fp_type_pct: 0.0,
                no_false_positives: true,
            };
        }
        ErrorBreakdown {
            fp_span: c.fp_span,
            fp_type: c.fp_type,
            fp_span_pct: 100.0 * c.fp_span as f64 / total as f64,
            fp_type_pct: 100.0 * c.fp_type as f64 / total as f64,
            no_false_positives: false,
        }
    }
}

/// FP-Span / FP-Type split over sentences given as `(predicted, gold)`.
pub fn error_analysis<'a>(
    sentences: impl IntoIterator<Item = (&'a BTreeSet<Labeled>, &'a BTreeSet<Labeled>)>,
) -> ErrorBreakdown {
    let mut total = Counts::default();
    for (p, g) in sentences {
        total.add(&Counts::of(p, g));
    }
    ErrorBreakdown::from_counts(&total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode: usize,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rejected: usize,
    pub decoded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of per-episode F1.
    pub macro_f1: f64,
    pub counts: Counts,
    pub errors: ErrorBreakdown,
    pub rejected: usize,
    pub decoded: usize,
    pub episodes: Vec<EpisodeEval>,
}

impl EvalReport {
    pub fn from_episodes(episodes: Vec<EpisodeEval>) -> Self {
        let mut counts = Counts::default();
        for e in &episodes {
            counts.add(&e.counts);
        }
        let macro_f1 = if episodes.is_empty() {
            0.0
        } else {
            episodes.iter().map(|e| e.f1).sum::<f64>() / episodes.len() as f64
        };
        EvalReport {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            macro_f1,
            errors: ErrorBreakdown::from_counts(&counts),
            rejected: episodes.iter().map(|e| e.rejected).sum(),
            decoded: episodes.iter().map(|e| e.decoded).sum(),
            counts,
            episodes,
        }
    }

    /// Per-episode precision, recall and F1 as CSV.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode,precision,recall,f1,true_positives,predicted,gold,rejected\n");
        for e in &self.episodes {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{},{},{},{}\n",
                e.episode, e.precision, e.recall, e.f1, e.counts.true_positives, e.counts.predicted, e.counts.gold, e.rejected
            ));
        }
        out
    }
}

pub fn score_episode(index: usize, episode: &Episode, prediction: &EpisodePrediction) -> EpisodeEval {
    let mut counts = Counts::default();
    for (sentence, q) in episode.query.iter().zip(&prediction.queries) {
        counts.add(&Counts::of(&q.predictions(), &gold_set(sentence)));
    }
    EpisodeEval {
        episode: index,
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
        rejected: prediction.queries.iter().map(QueryPrediction::rejected).sum(),
        decoded: prediction.queries.iter().map(|q| q.candidates.len()).sum(),
    }
}

pub fn evaluate(
    data: &EpisodeDataset,
    model: &SpanProto,
    decode_config: &DecodeConfig,
    margin: &MarginConfig,
) -> Result<EvalReport> {
    evaluate_with(data, model, decode_config, margin, Execution::default())
}

/// [`evaluate`] with an explicit execution mode; episodes are independent.
pub fn evaluate_with(
    data: &EpisodeDataset,
    model: &SpanProto,
    decode_config: &DecodeConfig,
    margin: &MarginConfig,
    exec: Execution,
) -> Result<EvalReport> {
    data.validate()?;
    let per_episode = map_indexed(&data.episodes, exec, |i, episode| {
        let prediction = predict_episode(model, episode, decode_config, margin)?;
        Ok(score_episode(i, episode, &prediction))
    });
    let episodes = per_episode.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_episodes(episodes))
}
