#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanproto::autodiff::{Graph, Var};
use spanproto::params::Gradients;
use spanproto::span::SpanScorerParams;
use spanproto::{
    EncodedSentence, EncoderConfig, Episode, LabeledSentence, Mention, PrototypeSet, Span, SpanProto, SpanRepresentation,
    Vocabulary,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn vector(rng: &mut impl Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];

pub fn type_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("T{i}")).collect()
}

/// Random sentence of `len` tokens carrying up to `max_mentions` distinct spans.
pub fn random_sentence(rng: &mut impl Rng, len: usize, types: &[String], max_mentions: usize) -> LabeledSentence {
    // a few tokens fall outside WORDS so the unknown buckets get exercised
    let tokens: Vec<String> = (0..len)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                format!("oov{}", rng.random_range(0..100))
            } else {
                WORDS[rng.random_range(0..WORDS.len())].to_string()
            }
        })
        .collect();
    let mut spans = BTreeSet::new();
    let k = rng.random_range(0..=max_mentions);
    for _ in 0..k {
        let s = rng.random_range(0..len);
        let e = rng.random_range(s..len);
        spans.insert((s, e));
    }
    let mentions = spans
        .into_iter()
        .map(|(s, e)| Mention::new(s, e, types[rng.random_range(0..types.len())].clone()))
        .collect();
    LabeledSentence::new(tokens, mentions)
}

/// Random episode with every type present in the support set.
pub fn random_episode(rng: &mut impl Rng, ways: usize, max_len: usize, n_support: usize, n_query: usize) -> Episode {
    let types = type_names(ways);
    let mut support: Vec<LabeledSentence> = (0..n_support)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            random_sentence(rng, len, &types, 2)
        })
        .collect();
    for t in &types {
        let present = support.iter().flat_map(|s| &s.mentions).any(|m| &m.label == t);
        if !present {
            let len = rng.random_range(1..=max_len);
            let s = rng.random_range(0..len);
            let e = rng.random_range(s..len);
            let mut sentence = random_sentence(rng, len, &types, 0);
            sentence.mentions.push(Mention::new(s, e, t.clone()));
            support.push(sentence);
        }
    }
    let query = (0..n_query)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            random_sentence(rng, len, &types, 2)
        })
        .collect();
    Episode { types, support, query }
}

/// Small model with every parameter, biases included, set to random values.
pub fn random_model(rng: &mut impl Rng, dim: usize, layers: usize) -> SpanProto {
    let config = EncoderConfig {
        dim,
        max_len: 16,
        mixing_layers: layers,
        oov_buckets: 5,
        embedding_scale: 0.5,
        output_norm: 1.5,
        identity_fraction: 1.0,
        position_weight: 0.7,
    };
    let vocab = Vocabulary::from_tokens(WORDS.iter().map(|w| w.to_string()).collect(), 5);
    let mut model = SpanProto::new(config, vocab, rng.random()).expect("model");
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let (r, c) = model.params.value(id).dim();
        *model.params.value_mut(id) = matrix(rng, r, c, 0.6);
    }
    model
}

/// Max relative error between the analytic gradients of `loss` and central
/// differences with step `eps`, over every scalar of every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// gradients that are zero up to rounding from dividing by zero.
pub fn gradient_check(
    model: &SpanProto,
    eps: f64,
    floor: f64,
    loss: impl Fn(&mut Graph, &SpanProto) -> Var,
) -> (f64, String) {
    let analytic: Gradients = {
        let mut g = Graph::with_params(&model.params);
        let l = loss(&mut g, model);
        g.param_gradients(l)
    };
    let eval = |m: &SpanProto| {
        let mut g = Graph::with_params(&m.params);
        let l = loss(&mut g, m);
        g.scalar(l)
    };
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let shape = model.params.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let x = model.params.value(id)[[r, c]];
                probe.params.value_mut(id)[[r, c]] = x + eps;
                let up = eval(&probe);
                probe.params.value_mut(id)[[r, c]] = x - eps;
                let down = eval(&probe);
                probe.params.value_mut(id)[[r, c]] = x;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                if rel > worst.0 {
                    worst = (rel, format!("{}[{r},{c}] analytic {a:e} numeric {numeric:e}", model.params.name(id)));
                }
            }
        }
    }
    worst
}

pub fn encoded(h: Array2<f64>) -> EncodedSentence {
    EncodedSentence { h }
}

pub fn rep(u: Array1<f64>) -> SpanRepresentation {
    SpanRepresentation { u, span: Span::new(0, 0) }
}

/// Encoded support sentences where every type labels at least one span.
pub fn random_support(r: &mut impl Rng, h: usize, types: &[String]) -> Vec<(EncodedSentence, LabeledSentence)> {
    let mut out = Vec::new();
    for t in types {
        for _ in 0..r.random_range(1..=3) {
            let l = r.random_range(1..=6);
            let s = r.random_range(0..l);
            let e = r.random_range(s..l);
            let mut mentions = vec![Mention::new(s, e, t.clone())];
            if l > 1 && r.random::<bool>() {
                let other = &types[r.random_range(0..types.len())];
                let span = (r.random_range(0..l), l - 1);
                if span != (s, e) {
                    mentions.push(Mention::new(span.0, span.1, other.clone()));
                }
            }
            let tokens = (0..l).map(|i| format!("w{i}")).collect();
            out.push((encoded(matrix(r, l, h, 1.0)), LabeledSentence::new(tokens, mentions)));
        }
    }
    out
}

pub fn prototypes_of(support: &[(EncodedSentence, LabeledSentence)], types: &[String]) -> PrototypeSet {
    let pairs: Vec<_> = support.iter().map(|(e, s)| (e, s)).collect();
    spanproto::classifier::compute_prototypes(&pairs, types).expect("prototypes")
}

// Naive oracles, written with explicit loops and no shared helpers.

pub fn naive_scores(h: &Array2<f64>, p: &SpanScorerParams) -> Array2<f64> {
    let (l, d) = h.dim();
    let mut q = Array2::zeros((l, d));
    let mut k = Array2::zeros((l, d));
    for i in 0..l {
        for a in 0..d {
            let mut sq = p.b_q[[0, a]];
            let mut sk = p.b_k[[0, a]];
            for b in 0..d {
                sq += p.w_q[[a, b]] * h[[i, b]];
                sk += p.w_k[[a, b]] * h[[i, b]];
            }
            q[[i, a]] = sq;
            k[[i, a]] = sk;
        }
    }
    let mut f = Array2::zeros((l, l));
    for i in 0..l {
        for j in i..l {
            let mut s = 0.0;
            for a in 0..d {
                s += q[[i, a]] * k[[j, a]];
                s += p.w_v[[a, 0]] * (h[[i, a]] + h[[j, a]]);
            }
            f[[i, j]] = s;
        }
    }
    f
}

pub fn naive_span_loss(f: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let l = f.nrows();
    let mut total = 1.0;
    for i in 0..l {
        for j in i..l {
            let sign = if target[[i, j]] == 1.0 { -1.0 } else { 1.0 };
            total += (sign * f[[i, j]]).exp();
        }
    }
    total.ln()
}

pub fn naive_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

/// Centroid per type from `(u, label)` pairs, in `types` order.
pub fn naive_prototypes(mentions: &[(Vec<f64>, String)], types: &[String]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for t in types {
        let mut sum: Vec<f64> = Vec::new();
        let mut n = 0;
        for (u, label) in mentions {
            if label == t {
                if sum.is_empty() {
                    sum = vec![0.0; u.len()];
                }
                for i in 0..u.len() {
                    sum[i] += u[i];
                }
                n += 1;
            }
        }
        out.push(sum.into_iter().map(|x| x / n as f64).collect());
    }
    out
}

pub fn naive_proto_loss(mentions: &[(Vec<f64>, usize)], protos: &[Vec<f64>]) -> f64 {
    if mentions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (u, gold) in mentions {
        let mut z = 0.0;
        for c in protos {
            z += (-naive_distance(u, c)).exp();
        }
        let p = (-naive_distance(u, &protos[*gold])).exp() / z;
        total += -p.ln();
    }
    total / mentions.len() as f64
}

pub fn naive_margin_loss(fps: &[Vec<f64>], protos: &[Vec<f64>], r: f64) -> f64 {
    if fps.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for c in protos {
        for u in fps {
            let d = naive_distance(u, c);
            if r - d > 0.0 {
                total += r - d;
            }
        }
    }
    total / (fps.len() * protos.len()) as f64
}

pub fn naive_decode(f: &Array2<f64>, threshold: f64) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for i in 0..f.nrows() {
        for j in 0..f.ncols() {
            if i <= j && 1.0 / (1.0 + (-f[[i, j]]).exp()) >= threshold {
                out.insert((i, j));
            }
        }
    }
    out
}

// Loss builders for gradient checks. Each returns a scalar node built from
// the model's parameters.

pub fn span_objective(g: &mut Graph, model: &SpanProto, sentence: &LabeledSentence) -> Var {
    let h = model.encode_in(g, &sentence.tokens, None).expect("encode");
    let f = model.scorer.forward(g, h);
    spanproto::span::span_loss_in(g, f, sentence)
}

fn support_prototypes(g: &mut Graph, model: &SpanProto, episode: &Episode) -> Vec<Var> {
    let support: Vec<(Var, &LabeledSentence)> = episode
        .support
        .iter()
        .map(|s| (model.encode_in(g, &s.tokens, None).expect("encode"), s))
        .collect();
    spanproto::classifier::prototypes_in(g, &support, &episode.types).expect("prototypes")
}

/// Summed prototypical loss over query sentences with at least one mention.
pub fn proto_objective(g: &mut Graph, model: &SpanProto, episode: &Episode) -> Var {
    let protos = support_prototypes(g, model, episode);
    let mut terms = Vec::new();
    for q in &episode.query {
        let h = model.encode_in(g, &q.tokens, None).expect("encode");
        let gold: Vec<(Var, usize)> = q
            .mentions
            .iter()
            .map(|m| {
                let u = spanproto::classifier::span_representation_in(g, h, m.span);
                (u, episode.type_index(&m.label).expect("type"))
            })
            .collect();
        terms.extend(spanproto::classifier::proto_loss_in(g, &gold, &protos));
    }
    g.sum(terms)
}

/// Summed margin loss with the given false-positive spans per query.
pub fn margin_objective(
    g: &mut Graph,
    model: &SpanProto,
    episode: &Episode,
    fps: &[BTreeSet<spanproto::Span>],
    radius: f64,
) -> Var {
    let protos = support_prototypes(g, model, episode);
    let mut terms = Vec::new();
    for (q, spans) in episode.query.iter().zip(fps) {
        let h = model.encode_in(g, &q.tokens, None).expect("encode");
        let reps: Vec<Var> = spans
            .iter()
            .map(|&s| spanproto::classifier::span_representation_in(g, h, s))
            .collect();
        terms.extend(spanproto::classifier::margin_loss_in(g, &reps, &protos, radius));
    }
    g.sum(terms)
}

/// Random non-gold spans for each query sentence.
pub fn random_false_positives(rng: &mut impl Rng, episode: &Episode) -> Vec<BTreeSet<spanproto::Span>> {
    episode
        .query
        .iter()
        .map(|q| {
            let gold = q.gold_spans();
            let mut out = BTreeSet::new();
            for _ in 0..3 {
                let s = rng.random_range(0..q.len());
                let e = rng.random_range(s..q.len());
                let span = spanproto::Span::new(s, e);
                if !gold.contains(&span) {
                    out.insert(span);
                }
            }
            out
        })
        .collect()
}

/// Distances from every false positive to every prototype under the current
/// parameters, used to keep instances away from the hinge kink.
pub fn false_positive_distances(model: &SpanProto, episode: &Episode, fps: &[BTreeSet<spanproto::Span>]) -> Vec<f64> {
    let mut g = Graph::with_params(&model.params);
    let protos = support_prototypes(&mut g, model, episode);
    let mut out = Vec::new();
    for (q, spans) in episode.query.iter().zip(fps) {
        let h = model.encode_in(&mut g, &q.tokens, None).expect("encode");
        for &s in spans {
            let u = spanproto::classifier::span_representation_in(&mut g, h, s);
            for &c in &protos {
                let d = g.distance(u, c);
                out.push(g.scalar(d));
            }
        }
    }
    out
}

/// Random episode for gradient checks: `ways ≤ 3`, sentences of at most 6
/// tokens and at least one query mention.
pub fn gradient_episode(rng: &mut impl Rng) -> Episode {
    loop {
        let ways = rng.random_range(1..=3);
        let e = random_episode(rng, ways, 6, 2, 2);
        if e.query.iter().any(|q| !q.mentions.is_empty()) {
            return e;
        }
    }
}
