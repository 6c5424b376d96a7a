//! Mention classification against type prototypes.
//!
//! A span is represented by `u = h_start + h_end`. Each episode type gets a
//! prototype, the mean `u` of its support mentions. Training combines a
//! softmax over negative Euclidean distances with a hinge that pushes
//! extractor false positives at least `radius` away from every prototype.
//! At inference a span takes its nearest prototype's type unless every
//! prototype is farther than `radius`.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{LabeledSentence, Span};
use crate::encoder::EncodedSentence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpanRepresentation {
    pub u: Array1<f64>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// Type names in episode order.
    pub types: Vec<String>,
    /// One centroid per row, aligned with `types`.
    pub centroids: Array2<f64>,
    /// Support spans averaged into each centroid.
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.types.iter().position(|t| t == label)
    }

    pub fn distances(&self, u: &Array1<f64>) -> Vec<f64> {
        self.centroids
            .rows()
            .into_iter()
            .map(|c| euclidean(c.iter(), u.iter()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginConfig {
    /// Margin during training and rejection radius at inference.
    pub radius: f64,
    pub margin_loss: bool,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            radius: 3.0,
            margin_loss: true,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Type(String),
    Rejected,
}

impl Verdict {
    pub fn label(&self) -> Option<&str> {
        match self {
            Verdict::Type(t) => Some(t),
            Verdict::Rejected => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Type(t) => f.write_str(t),
            Verdict::Rejected => f.write_str("REJECTED"),
        }
    }
}

fn euclidean<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_span(h: &EncodedSentence, span: Span) -> Result<()> {
    if !span.is_valid_for(h.len()) {
        return Err(Error::Invalid(format!("span {span} out of range for {} tokens", h.len())));
    }
    Ok(())
}

pub fn span_representation(h: &EncodedSentence, span: Span) -> Result<SpanRepresentation> {
    check_span(h, span)?;
    let u = &h.h.row(span.start) + &h.h.row(span.end);
    Ok(SpanRepresentation { u, span })
}

/// Graph form: `u` as a single row.
pub fn span_representation_in(g: &mut Graph, h: Var, span: Span) -> Var {
    g.row_pair(h, span.start, span.end)
}

/// Graph form of prototype construction. `support` pairs each encoded
/// sentence with its gold annotation.
pub fn prototypes_in(g: &mut Graph, support: &[(Var, &LabeledSentence)], types: &[String]) -> Result<Vec<Var>> {
    let mut members: Vec<Vec<Var>> = vec![Vec::new(); types.len()];
    for &(h, sentence) in support {
        for m in &sentence.mentions {
            if let Some(t) = types.iter().position(|t| *t == m.label) {
                members[t].push(span_representation_in(g, h, m.span));
            }
        }
    }
    members
        .into_iter()
        .zip(types)
        .map(|(us, t)| {
            if us.is_empty() {
                Err(Error::PrototypeUndefined(t.clone()))
            } else {
                Ok(g.mean(us))
            }
        })
        .collect()
}

pub fn compute_prototypes(support: &[(&EncodedSentence, &LabeledSentence)], types: &[String]) -> Result<PrototypeSet> {
    let mut g = Graph::new();
    let mut inputs = Vec::with_capacity(support.len());
    for &(h, sentence) in support {
        if h.len() != sentence.len() {
            return Err(Error::Shape(format!(
                "encoding has {} rows for a {}-token sentence",
                h.len(),
                sentence.len()
            )));
        }
        for m in &sentence.mentions {
            check_span(h, m.span)?;
        }
        inputs.push((g.input(h.h.clone()), sentence));
    }
    let protos = prototypes_in(&mut g, &inputs, types)?;
    let rows: Vec<_> = protos.iter().map(|&p| g.value(p).view()).collect();
    let centroids = if rows.is_empty() {
        Array2::zeros((0, support.first().map_or(0, |(h, _)| h.dim())))
    } else {
        ndarray::concatenate(Axis(0), &rows).expect("equal widths")
    };
    let counts = types
        .iter()
        .map(|t| {
            support
                .iter()
                .flat_map(|(_, s)| &s.mentions)
                .filter(|m| &m.label == t)
                .count()
        })
        .collect();
    Ok(PrototypeSet {
        types: types.to_vec(),
        centroids,
        counts,
    })
}

/// Graph form of the prototypical loss: mean of `-log p(y | span)` with
/// `p = softmax_t(-d(u, c_t))`. `None` when there are no mentions.
pub fn proto_loss_in(g: &mut Graph, mentions: &[(Var, usize)], prototypes: &[Var]) -> Option<Var> {
    if mentions.is_empty() {
        return None;
    }
    let terms = mentions
        .iter()
        .map(|&(u, gold)| {
            let logits: Vec<Var> = prototypes
                .iter()
                .map(|&c| {
                    let d = g.distance(u, c);
                    g.scale(d, -1.0)
                })
                .collect();
            let logits = g.concat(logits);
            g.neg_log_softmax(logits, gold)
        })
        .collect();
    Some(g.mean(terms))
}

fn prototype_inputs(g: &mut Graph, prototypes: &PrototypeSet) -> Vec<Var> {
    prototypes
        .centroids
        .rows()
        .into_iter()
        .map(|c| g.input(c.to_owned().insert_axis(Axis(0))))
        .collect()
}

fn row_input(g: &mut Graph, u: &Array1<f64>) -> Var {
    g.input(u.clone().insert_axis(Axis(0)))
}

pub fn proto_loss(mentions: &[(SpanRepresentation, String)], prototypes: &PrototypeSet) -> Result<f64> {
    let mut g = Graph::new();
    let protos = prototype_inputs(&mut g, prototypes);
    let mut inputs = Vec::with_capacity(mentions.len());
    for (rep, label) in mentions {
        let gold = prototypes
            .index(label)
            .ok_or_else(|| Error::Invalid(format!("gold type `{label}` has no prototype")))?;
        inputs.push((row_input(&mut g, &rep.u), gold));
    }
    Ok(proto_loss_in(&mut g, &inputs, &protos).map_or(0.0, |l| g.scalar(l)))
}

/// `p(t | span)` for every type, in prototype order.
pub fn type_probabilities(u: &Array1<f64>, prototypes: &PrototypeSet) -> Vec<f64> {
    let logits: Vec<f64> = prototypes.distances(u).into_iter().map(|d| -d).collect();
    let lse = crate::autodiff::log_sum_exp(logits.iter().copied());
    logits.into_iter().map(|x| (x - lse).exp()).collect()
}

/// Predicted spans that are not gold spans. Types are not consulted.
pub fn false_positive_set<'a>(
    predicted: impl IntoIterator<Item = &'a Span>,
    gold: &BTreeSet<Span>,
) -> BTreeSet<Span> {
    predicted.into_iter().filter(|s| !gold.contains(s)).copied().collect()
}

/// Graph form of the margin loss:
/// `1/(|T|·|M⁻|) Σ_t Σ_fp max(0, r - d(u_fp, c_t))`. `None` when there are
/// no false positives.
pub fn margin_loss_in(g: &mut Graph, false_positives: &[Var], prototypes: &[Var], radius: f64) -> Option<Var> {
    if false_positives.is_empty() || prototypes.is_empty() {
        return None;
    }
    let mut terms = Vec::with_capacity(false_positives.len() * prototypes.len());
    for &c in prototypes {
        for &u in false_positives {
            let d = g.distance(u, c);
            terms.push(g.hinge(d, radius));
        }
    }
    Some(g.mean(terms))
}

pub fn margin_loss(false_positives: &[SpanRepresentation], prototypes: &PrototypeSet, config: &MarginConfig) -> f64 {
    let mut g = Graph::new();
    let protos = prototype_inputs(&mut g, prototypes);
    let fps: Vec<Var> = false_positives.iter().map(|r| row_input(&mut g, &r.u)).collect();
    margin_loss_in(&mut g, &fps, &protos, config.radius).map_or(0.0, |l| g.scalar(l))
}

/// Nearest prototype within `radius`, ties resolved by type order.
pub fn classify(u: &Array1<f64>, prototypes: &PrototypeSet, config: &MarginConfig) -> Verdict {
    let mut best: Option<(usize, f64)> = None;
    for (t, d) in prototypes.distances(u).into_iter().enumerate() {
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((t, d));
        }
    }
    match best {
        Some((t, d)) if d <= config.radius => Verdict::Type(prototypes.types[t].clone()),
        _ => Verdict::Rejected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mention;
    use ndarray::array;

    fn protos(types: &[&str], rows: Array2<f64>) -> PrototypeSet {
        PrototypeSet {
            types: types.iter().map(|s| s.to_string()).collect(),
            counts: vec![1; types.len()],
            centroids: rows,
        }
    }

    fn rep(u: Array1<f64>) -> SpanRepresentation {
        SpanRepresentation {
            u,
            span: Span::new(0, 0),
        }
    }

    #[test]
    fn boundary_representation() {
        let h = EncodedSentence {
            h: array![[1.0, 0.0], [7.0, 7.0], [0.0, 1.0]],
        };
        assert_eq!(span_representation(&h, Span::new(0, 2)).unwrap().u, array![1.0, 1.0]);
        assert_eq!(span_representation(&h, Span::new(1, 1)).unwrap().u, array![14.0, 14.0]);
        assert!(span_representation(&h, Span::new(1, 3)).is_err());
    }

    #[test]
    fn prototype_means() {
        let h = EncodedSentence {
            h: array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]],
        };
        let s = LabeledSentence::from_text("a b c", vec![Mention::new(0, 1, "X"), Mention::new(1, 2, "X")]);
        let p = compute_prototypes(&[(&h, &s)], &["X".to_string()]).unwrap();
        assert_eq!(p.centroids, array![[0.5, 0.5]]);
        assert_eq!(p.counts, vec![2]);
    }

    #[test]
    fn single_span_prototype_is_its_representation() {
        let h = EncodedSentence {
            h: array![[1.0, 2.0], [3.0, 5.0]],
        };
        let s = LabeledSentence::from_text("a b", vec![Mention::new(0, 1, "X"), Mention::new(1, 1, "Y")]);
        let p = compute_prototypes(&[(&h, &s)], &["X".into(), "Y".into()]).unwrap();
        assert_eq!(p.centroids.row(0).to_owned(), array![4.0, 7.0]);
        assert_eq!(p.centroids.row(1).to_owned(), array![6.0, 10.0]);
    }

    #[test]
    fn missing_type_is_undefined() {
        let h = EncodedSentence { h: array![[1.0, 2.0]] };
        let s = LabeledSentence::from_text("a", vec![Mention::new(0, 0, "X")]);
        match compute_prototypes(&[(&h, &s)], &["X".into(), "Z".into()]) {
            Err(Error::PrototypeUndefined(t)) => assert_eq!(t, "Z"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn proto_loss_two_types() {
        let p = protos(&["A", "B"], array![[0.0, 0.0], [2.0, 0.0]]);
        let loss = proto_loss(&[(rep(array![0.0, 0.0]), "A".into())], &p).unwrap();
        let expect = -(1.0 / (1.0 + (-2f64).exp())).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn proto_loss_limits() {
        let p = protos(&["A", "B"], array![[0.0, 0.0], [10.0, 0.0]]);
        let loss = proto_loss(&[(rep(array![0.0, 0.0]), "A".into())], &p).unwrap();
        assert!(loss < 1e-4);
        assert_eq!(proto_loss(&[], &p).unwrap(), 0.0);
        assert!(proto_loss(&[(rep(array![0.0, 0.0]), "C".into())], &p).is_err());
    }

    #[test]
    fn false_positives_are_set_difference() {
        let predicted = [Span::new(0, 1), Span::new(3, 3)];
        let gold: BTreeSet<_> = [Span::new(0, 1)].into();
        assert_eq!(false_positive_set(&predicted, &gold), [Span::new(3, 3)].into());
        assert!(false_positive_set(&[Span::new(0, 1)], &gold).is_empty());
    }

    #[test]
    fn figure_example_false_positives() {
        // "Jim" and "Patty Pravo" are gold; "Italian" and "2011" are not.
        let s = LabeledSentence::from_text(
            "Jim listens to Italian singer Patty Pravo since 2011",
            vec![Mention::new(0, 0, "person"), Mention::new(5, 6, "person")],
        );
        let predicted = [Span::new(0, 0), Span::new(3, 3), Span::new(5, 6), Span::new(8, 8)];
        let fps = false_positive_set(&predicted, &s.gold_spans().into_iter().collect());
        let words: Vec<_> = fps.iter().map(|sp| s.tokens[sp.start].as_str()).collect();
        assert_eq!(words, vec!["Italian", "2011"]);
    }

    #[test]
    fn margin_loss_cases() {
        let cfg = MarginConfig::default();
        let p = protos(&["A"], array![[0.0, 0.0]]);
        assert_eq!(margin_loss(&[], &p, &cfg), 0.0);
        assert_eq!(margin_loss(&[rep(array![1.0, 0.0])], &p, &cfg), 2.0);
        assert_eq!(margin_loss(&[rep(array![5.0, 0.0])], &p, &cfg), 0.0);

        let two = protos(&["A", "B"], array![[0.0, 0.0], [0.0, 4.0]]);
        let l = margin_loss(&[rep(array![0.0, 1.0]), rep(array![0.0, 10.0])], &two, &cfg);
        assert!((l - (2.0 + 0.0 + 0.0 + 0.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn classify_cases() {
        let cfg = MarginConfig::default();
        let p = protos(&["PER", "LOC"], array![[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(classify(&array![1.0, 0.0], &p, &cfg), Verdict::Type("PER".into()));
        assert_eq!(classify(&array![5.0, 0.0], &p, &cfg), Verdict::Rejected);

        let tie = protos(&["B", "A"], array![[-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(classify(&array![0.0, 0.0], &tie, &cfg), Verdict::Type("B".into()));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = protos(&["A", "B", "C"], array![[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]]);
        let probs = type_probabilities(&array![0.5, 0.5], &p);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
