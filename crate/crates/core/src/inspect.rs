//! Serializable dumps of intermediate model state for one episode.

use serde::Serialize;

use crate::classifier::{MarginConfig, Verdict};
use crate::data::{Episode, Span};
use crate::error::Result;
use crate::evaluator::predict_episode;
use crate::model::SpanProto;
use crate::span::{sigmoid, DecodeConfig};

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryDump {
    pub query: usize,
    pub tokens: Vec<String>,
    /// Row `i`, column `j` holds the span probability for `i <= j`, null below
    /// the diagonal.
    pub probabilities: Vec<Vec<Option<f64>>>,
    pub decoded: Vec<Span>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpanDump {
    pub query: usize,
    pub span: Span,
    pub text: String,
    pub vector: Vec<f64>,
    pub distances: Vec<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrototypeDump {
    pub label: String,
    pub support_spans: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeDump {
    pub types: Vec<String>,
    pub threshold: f64,
    pub radius: f64,
    pub boundaries: Vec<BoundaryDump>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<Vec<PrototypeDump>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<SpanDump>>,
}

/// Boundary tables for every query sentence, plus span and prototype vectors
/// when `embeddings` is set.
pub fn dump_episode(
    model: &SpanProto,
    episode: &Episode,
    decode: &DecodeConfig,
    margin: &MarginConfig,
    embeddings: bool,
) -> Result<EpisodeDump> {
    let prediction = predict_episode(model, episode, decode, margin)?;
    let boundaries = prediction
        .queries
        .iter()
        .zip(&episode.query)
        .enumerate()
        .map(|(qi, (q, sentence))| {
            let n = q.scores.len();
            let probabilities = (0..n)
                .map(|i| (0..n).map(|j| (i <= j).then(|| sigmoid(q.scores.get(i, j)))).collect())
                .collect();
            BoundaryDump {
                query: qi,
                tokens: sentence.tokens.clone(),
                probabilities,
                decoded: q.candidates.iter().map(|c| c.span).collect(),
            }
        })
        .collect();

    let (prototypes, spans) = if embeddings {
        let protos = &prediction.prototypes;
        let prototypes = protos
            .types
            .iter()
            .enumerate()
            .map(|(t, label)| PrototypeDump {
                label: label.clone(),
                support_spans: protos.counts[t],
                vector: protos.centroids.row(t).to_vec(),
            })
            .collect();
        let mut spans = Vec::new();
        for (qi, (q, sentence)) in prediction.queries.iter().zip(&episode.query).enumerate() {
            for c in &q.candidates {
                spans.push(SpanDump {
                    query: qi,
                    span: c.span,
                    text: sentence.tokens[c.span.start..=c.span.end].join(" "),
                    vector: c.u.to_vec(),
                    distances: protos.distances(&c.u),
                    verdict: c.verdict.clone(),
                });
            }
        }
        (Some(prototypes), Some(spans))
    } else {
        (None, None)
    };

    Ok(EpisodeDump {
        types: episode.types.clone(),
        threshold: decode.threshold,
        radius: margin.radius,
        boundaries,
        prototypes,
        spans,
    })
}
