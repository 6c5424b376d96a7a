//! Class-agnostic span extraction over a global boundary matrix.
//!
//! Every token pair `(i, j)` with `i <= j` gets a score
//! `f(i, j) = q_iᵀ k_j + w_vᵀ (h_i + h_j)` with `q_i = W_q h_i + b_q` and
//! `k_i = W_k h_i + b_k`. Cells below the diagonal are never read.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{span_loss_value, Graph, Var};
use crate::data::{LabeledSentence, Span};
use crate::encoder::{normal_matrix, EncodedSentence};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterRegistry};

/// Plain-valued scorer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanScorerParams {
    pub w_q: Array2<f64>,
    pub b_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array2<f64>,
    /// `h × 1`
    pub w_v: Array2<f64>,
}

impl SpanScorerParams {
    pub fn zeros(h: usize) -> Self {
        SpanScorerParams {
            w_q: Array2::zeros((h, h)),
            b_q: Array2::zeros((1, h)),
            w_k: Array2::zeros((h, h)),
            b_k: Array2::zeros((1, h)),
            w_v: Array2::zeros((h, 1)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }

    fn check(&self, h: usize) -> Result<()> {
        let expect = [
            ("W_q", self.w_q.dim(), (h, h)),
            ("b_q", self.b_q.dim(), (1, h)),
            ("W_k", self.w_k.dim(), (h, h)),
            ("b_k", self.b_k.dim(), (1, h)),
            ("w_v", self.w_v.dim(), (h, 1)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }
}

/// Scores over token pairs. Only the upper triangle (`i <= j`) is meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMatrix {
    pub scores: Array2<f64>,
}

impl BoundaryMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if scores.nrows() != scores.ncols() {
            return Err(Error::Shape(format!("boundary matrix must be square, got {:?}", scores.dim())));
        }
        Ok(BoundaryMatrix { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[[i, j]]
    }

    /// Upper-triangle cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (i..n).map(move |j| (i, j, self.scores[[i, j]])))
    }

    fn positive_mask(&self) -> Array2<bool> {
        self.scores.mapv(|x| x > 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Probability threshold in `(0, 1)`, compared against `sigmoid(f)`.
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { threshold: 0.8 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "decode threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Graph form of `Q = H W_qᵀ + b_q`, `K = H W_kᵀ + b_k`.
pub fn project_qk_in(g: &mut Graph, h: Var, w_q: Var, b_q: Var, w_k: Var, b_k: Var) -> (Var, Var) {
    let q = g.matmul_t(h, w_q);
    let q = g.add_row(q, b_q);
    let k = g.matmul_t(h, w_k);
    let k = g.add_row(k, b_k);
    (q, k)
}

/// Graph form of the pair score matrix.
pub fn score_pairs_in(g: &mut Graph, h: Var, q: Var, k: Var, w_v: Var) -> Var {
    let bilinear = g.matmul_t(q, k);
    let unary = g.matmul(h, w_v);
    let unary = g.pair_sum(unary);
    g.add(bilinear, unary)
}

pub fn project_qk(h: &EncodedSentence, params: &SpanScorerParams) -> Result<(Array2<f64>, Array2<f64>)> {
    params.check(h.dim())?;
    let mut g = Graph::new();
    let hv = g.input(h.h.clone());
    let (wq, bq) = (g.input(params.w_q.clone()), g.input(params.b_q.clone()));
    let (wk, bk) = (g.input(params.w_k.clone()), g.input(params.b_k.clone()));
    let (q, k) = project_qk_in(&mut g, hv, wq, bq, wk, bk);
    Ok((g.value(q).clone(), g.value(k).clone()))
}

pub fn score_pairs(
    h: &EncodedSentence,
    q: &Array2<f64>,
    k: &Array2<f64>,
    params: &SpanScorerParams,
) -> Result<BoundaryMatrix> {
    let (l, dim) = h.h.dim();
    if q.dim() != (l, dim) || k.dim() != (l, dim) {
        return Err(Error::Shape(format!(
            "Q {:?} and K {:?} must match H {:?}",
            q.dim(),
            k.dim(),
            h.h.dim()
        )));
    }
    if params.w_v.dim() != (dim, 1) {
        return Err(Error::Shape(format!("w_v is {:?}, expected ({dim}, 1)", params.w_v.dim())));
    }
    let mut g = Graph::new();
    let hv = g.input(h.h.clone());
    let qv = g.input(q.clone());
    let kv = g.input(k.clone());
    let wv = g.input(params.w_v.clone());
    let f = score_pairs_in(&mut g, hv, qv, kv, wv);
    BoundaryMatrix::new(g.value(f).clone())
}

/// Binary target: 1 on gold span cells, 0 elsewhere in the upper triangle.
pub fn target_matrix(sentence: &LabeledSentence) -> BoundaryMatrix {
    let n = sentence.len();
    let mut omega = Array2::zeros((n, n));
    for m in &sentence.mentions {
        omega[[m.span.start, m.span.end]] = 1.0;
    }
    BoundaryMatrix { scores: omega }
}

pub fn span_loss(scores: &BoundaryMatrix, target: &BoundaryMatrix) -> Result<f64> {
    if scores.len() != target.len() {
        return Err(Error::Shape(format!(
            "scores are {}×{0}, target is {}×{1}",
            scores.len(),
            target.len()
        )));
    }
    if scores.cells().any(|(_, _, f)| !f.is_finite()) {
        return Err(Error::NonFinite("span scores".into()));
    }
    Ok(span_loss_value(&scores.scores, &target.positive_mask()))
}

/// Graph form of the span loss against a gold sentence.
pub fn span_loss_in(g: &mut Graph, scores: Var, sentence: &LabeledSentence) -> Var {
    let mask = target_matrix(sentence).positive_mask();
    g.span_loss(scores, mask)
}

/// All upper-triangle cells whose sigmoid score reaches the threshold.
/// Overlapping and nested spans are all kept.
pub fn decode(scores: &BoundaryMatrix, config: &DecodeConfig) -> BTreeSet<Span> {
    scores
        .cells()
        .filter(|&(_, _, f)| sigmoid(f) >= config.threshold)
        .map(|(i, j, _)| Span::new(i, j))
        .collect()
}

/// Scorer weights held in a [`ParameterRegistry`].
#[derive(Debug, Clone)]
pub struct SpanScorer {
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    b_k: ParamId,
    w_v: ParamId,
}

impl SpanScorer {
    pub fn new(dim: usize, params: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<Self> {
        let std = 0.5 / (dim as f64).sqrt();
        Ok(SpanScorer {
            w_q: params.register("span.w_q", normal_matrix(rng, dim, dim, std))?,
            b_q: params.register("span.b_q", Array2::zeros((1, dim)))?,
            w_k: params.register("span.w_k", normal_matrix(rng, dim, dim, std))?,
            b_k: params.register("span.b_k", Array2::zeros((1, dim)))?,
            w_v: params.register("span.w_v", normal_matrix(rng, dim, 1, std))?,
        })
    }

    pub fn values(&self, params: &ParameterRegistry) -> SpanScorerParams {
        SpanScorerParams {
            w_q: params.value(self.w_q).clone(),
            b_q: params.value(self.b_q).clone(),
            w_k: params.value(self.w_k).clone(),
            b_k: params.value(self.b_k).clone(),
            w_v: params.value(self.w_v).clone(),
        }
    }

    /// Pair scores for an encoded sentence already in `g`.
    pub fn forward(&self, g: &mut Graph, h: Var) -> Var {
        let (wq, bq) = (g.param(self.w_q), g.param(self.b_q));
        let (wk, bk) = (g.param(self.w_k), g.param(self.b_k));
        let wv = g.param(self.w_v);
        let (q, k) = project_qk_in(g, h, wq, bq, wk, bk);
        score_pairs_in(g, h, q, k, wv)
    }
}
