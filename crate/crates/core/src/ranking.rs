//! Linear scoring, deterministic ranking, the additive rank metric and nDCG@k.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Query;
use crate::scalar::{all_finite, dot, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum RankingError {
    #[error("model has {model} weights but query features have length {features}")]
    DimensionMismatch { model: usize, features: usize },
    #[error("doc_index {doc_index} out of range for a query with {len} candidates")]
    DocOutOfRange { doc_index: usize, len: usize },
    #[error("query reference {query_ref} out of range for a split of {len} queries")]
    QueryOutOfRange { query_ref: usize, len: usize },
    #[error("k must be at least 1")]
    ZeroCutoff,
    #[error("no query has a document with positive gain; nDCG is undefined")]
    NoRelevantDocuments,
}

/// `S_w(q, d) = <w, x_{q,d}>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LinearModel<F: Scalar> {
    pub weights: Vec<F>,
}

impl<F: Scalar> LinearModel<F> {
    pub fn new(weights: Vec<F>) -> Self {
        Self { weights }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![F::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.weights)
    }

    pub fn scaled(&self, c: F) -> Self {
        Self::new(self.weights.iter().map(|&w| w * c).collect())
    }
}

/// Rank weighting `λ` of the additive metric. Only the identity is provided;
/// any addition must stay convex, (sub)differentiable and increasing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankWeighting {
    #[default]
    Identity,
}

impl RankWeighting {
    #[inline]
    pub fn apply<F: Scalar>(self, rank: F) -> F {
        match self {
            RankWeighting::Identity => rank,
        }
    }

    /// `λ'(x)`, used to chain the surrogate's gradient.
    #[inline]
    pub fn derivative<F: Scalar>(self, _rank: F) -> F {
        match self {
            RankWeighting::Identity => F::one(),
        }
    }
}

/// Document indices ordered by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList(pub Vec<usize>);

impl RankedList {
    /// 1-based rank of every document, indexed by `doc_index`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.0.len()];
        for (pos, &doc) in self.0.iter().enumerate() {
            ranks[doc] = pos + 1;
        }
        ranks
    }
}

pub fn score<F: Scalar>(model: &LinearModel<F>, query: &Query<F>) -> Result<Vec<F>, RankingError> {
    if query.dim() != model.dim() {
        return Err(RankingError::DimensionMismatch {
            model: model.dim(),
            features: query.dim(),
        });
    }
    Ok(query
        .docs()
        .iter()
        .map(|d| dot(&model.weights, &d.features))
        .collect())
}

pub fn rank_scores<F: Scalar>(scores: &[F]) -> RankedList {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    RankedList(order)
}

pub fn rank_all<F: Scalar>(model: &LinearModel<F>, query: &Query<F>) -> Result<RankedList, RankingError> {
    Ok(rank_scores(&score(model, query)?))
}

pub fn rank_of<F: Scalar>(
    model: &LinearModel<F>,
    query: &Query<F>,
    doc_index: usize,
) -> Result<usize, RankingError> {
    if doc_index >= query.len() {
        return Err(RankingError::DocOutOfRange {
            doc_index,
            len: query.len(),
        });
    }
    let scores = score(model, query)?;
    Ok(rank_in_scores(&scores, doc_index))
}

pub(crate) fn rank_in_scores<F: Scalar>(scores: &[F], doc_index: usize) -> usize {
    let s = scores[doc_index];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &t)| t > s || (t == s && j < doc_index))
        .count()
}

/// `Δ(S_w | q) = Σ_d λ(rank(d)) · rel(q, d)` with grades 3-4 as relevant.
pub fn delta_metric<F: Scalar>(
    model: &LinearModel<F>,
    query: &Query<F>,
    weighting: RankWeighting,
) -> Result<F, RankingError> {
    let ranks = rank_all(model, query)?.ranks();
    Ok(query
        .docs()
        .iter()
        .filter(|d| d.is_relevant())
        .map(|d| weighting.apply(F::from_count(ranks[d.doc_index])))
        .fold(F::zero(), |a, b| a + b))
}

/// DCG@k of grades listed in ranked order, with gain `2^g - 1`.
pub fn dcg_at_k<F: Scalar>(ranked_grades: impl IntoIterator<Item = u8>, k: usize) -> F {
    ranked_grades
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| {
            let gain = F::lit(2f64.powi(g as i32) - 1.0);
            gain / F::from_count(i + 2).log2()
        })
        .fold(F::zero(), |a, b| a + b)
}

/// nDCG@k of one query, or `None` when its ideal DCG is zero.
pub fn query_ndcg<F: Scalar>(
    model: &LinearModel<F>,
    query: &Query<F>,
    k: usize,
) -> Result<Option<F>, RankingError> {
    if k == 0 {
        return Err(RankingError::ZeroCutoff);
    }
    let mut ideal: Vec<u8> = query.grades().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: F = dcg_at_k(ideal, k);
    if idcg <= F::zero() {
        return Ok(None);
    }
    let ranked = rank_all(model, query)?;
    let docs = query.docs();
    let dcg: F = dcg_at_k(ranked.0.iter().map(|&i| docs[i].relevance), k);
    Ok(Some(dcg / idcg))
}

/// Mean nDCG@k over queries with non-zero ideal DCG.
pub fn ndcg_at_k<F: Scalar>(
    model: &LinearModel<F>,
    queries: &[Query<F>],
    k: usize,
) -> Result<F, RankingError> {
    if k == 0 {
        return Err(RankingError::ZeroCutoff);
    }
    let mut sum = F::zero();
    let mut included = 0usize;
    for q in queries {
        if let Some(v) = query_ndcg(model, q, k)? {
            sum += v;
            included += 1;
        }
    }
    if included == 0 {
        return Err(RankingError::NoRelevantDocuments);
    }
    Ok(sum / F::from_count(included))
}

pub const NDCG_CUTOFF: usize = 10;
