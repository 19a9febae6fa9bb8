//! Per-click convex surrogate `f_i(w) = λ(hinge bound on rank(d_i))`, its
//! subgradient, and the IPS-weighted empirical risk.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Query};
use crate::ranking::{score, LinearModel, RankWeighting, RankingError};
use crate::scalar::{all_finite, Scalar};
use crate::simulation::ClickLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HingeConfig<F: Scalar> {
    pub margin: F,
    /// Drop the `d' = d` term of the pairwise sum. It only adds the
    /// constant `margin` and never contributes to the gradient.
    pub exclude_self: bool,
}

impl<F: Scalar> Default for HingeConfig<F> {
    fn default() -> Self {
        Self {
            margin: F::one(),
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<F>(pub Vec<F>);

impl<F: Scalar> Gradient<F> {
    pub fn is_finite(&self) -> bool {
        all_finite(&self.0)
    }

    pub fn norm(&self) -> F {
        crate::scalar::norm(&self.0)
    }
}

fn check_doc<F: Scalar>(query: &Query<F>, doc: usize) -> Result<(), RankingError> {
    if doc >= query.len() {
        return Err(RankingError::DocOutOfRange {
            doc_index: doc,
            len: query.len(),
        });
    }
    Ok(())
}

/// Hinge bound from precomputed scores.
pub(crate) fn bound_from_scores<F: Scalar>(scores: &[F], clicked: usize, cfg: &HingeConfig<F>) -> F {
    let s = scores[clicked];
    let mut bound = F::one();
    for (j, &t) in scores.iter().enumerate() {
        if j == clicked && cfg.exclude_self {
            continue;
        }
        bound += (cfg.margin - (s - t)).max(F::zero());
    }
    bound
}

/// `1 + Σ_{d'} max(0, margin - (S(d) - S(d')))`.
pub fn hinge_rank_bound<F: Scalar>(
    model: &LinearModel<F>,
    query: &Query<F>,
    clicked_doc: usize,
    cfg: &HingeConfig<F>,
) -> Result<F, RankingError> {
    check_doc(query, clicked_doc)?;
    let scores = score(model, query)?;
    Ok(bound_from_scores(&scores, clicked_doc, cfg))
}

pub fn loss_f<F: Scalar>(
    model: &LinearModel<F>,
    query: &Query<F>,
    clicked_doc: usize,
    weighting: RankWeighting,
    cfg: &HingeConfig<F>,
) -> Result<F, RankingError> {
    Ok(weighting.apply(hinge_rank_bound(model, query, clicked_doc, cfg)?))
}

/// Writes `∇f(w)` for one click into `out` and returns `f(w)`.
///
/// Pairs sitting exactly on the margin are treated as inactive.
pub(crate) fn click_loss_grad<F: Scalar>(
    weights: &[F],
    query: &Query<F>,
    clicked: usize,
    weighting: RankWeighting,
    cfg: &HingeConfig<F>,
    scores: &mut Vec<F>,
    out: &mut [F],
) -> F {
    let docs = query.docs();
    scores.clear();
    scores.extend(docs.iter().map(|d| crate::scalar::dot(weights, &d.features)));
    let s = scores[clicked];

    out.iter_mut().for_each(|g| *g = F::zero());
    let mut bound = F::one();
    let mut active = 0usize;
    for (j, &t) in scores.iter().enumerate() {
        if j == clicked {
            if !cfg.exclude_self {
                bound += cfg.margin.max(F::zero());
            }
            continue;
        }
        let slack = cfg.margin - (s - t);
        if slack > F::zero() {
            bound += slack;
            active += 1;
            for (g, &x) in out.iter_mut().zip(&docs[j].features) {
                *g += x;
            }
        }
    }
    if active > 0 {
        let k = F::from_count(active);
        for (g, &x) in out.iter_mut().zip(&docs[clicked].features) {
            *g -= k * x;
        }
    }
    let chain = weighting.derivative(bound);
    if chain != F::one() {
        out.iter_mut().for_each(|g| *g *= chain);
    }
    weighting.apply(bound)
}

pub fn grad_f<F: Scalar>(
    model: &LinearModel<F>,
    query: &Query<F>,
    clicked_doc: usize,
    weighting: RankWeighting,
    cfg: &HingeConfig<F>,
) -> Result<Gradient<F>, RankingError> {
    check_doc(query, clicked_doc)?;
    if query.dim() != model.dim() {
        return Err(RankingError::DimensionMismatch {
            model: model.dim(),
            features: query.dim(),
        });
    }
    let mut scores = Vec::with_capacity(query.len());
    let mut out = vec![F::zero(); model.dim()];
    click_loss_grad(&model.weights, query, clicked_doc, weighting, cfg, &mut scores, &mut out);
    Ok(Gradient(out))
}

fn entry_query<'a, F: Scalar>(dataset: &'a Dataset<F>, query_ref: usize) -> Result<&'a Query<F>, RankingError> {
    dataset.train.get(query_ref).ok_or(RankingError::QueryOutOfRange {
        query_ref,
        len: dataset.train.len(),
    })
}

/// `R_IPS(w) = (1/n) Σ_i (1/p_i) f_i(w)`.
pub fn r_ips<F: Scalar>(
    log: &ClickLog<F>,
    dataset: &Dataset<F>,
    model: &LinearModel<F>,
    weighting: RankWeighting,
    cfg: &HingeConfig<F>,
) -> Result<F, RankingError> {
    let mut total = F::zero();
    for e in &log.entries {
        let q = entry_query(dataset, e.query_ref)?;
        total += loss_f(model, q, e.clicked_doc, weighting, cfg)? / e.propensity;
    }
    Ok(total / F::from_count(log.len()))
}

/// Full gradient `(1/n) Σ_i (1/p_i) ∇f_i(w)`, summed in log order.
pub fn r_ips_grad<F: Scalar>(
    log: &ClickLog<F>,
    dataset: &Dataset<F>,
    model: &LinearModel<F>,
    weighting: RankWeighting,
    cfg: &HingeConfig<F>,
) -> Result<Gradient<F>, RankingError> {
    let mut total = vec![F::zero(); model.dim()];
    for e in &log.entries {
        let q = entry_query(dataset, e.query_ref)?;
        let g = grad_f(model, q, e.clicked_doc, weighting, cfg)?;
        for (t, gi) in total.iter_mut().zip(g.0) {
            *t += gi / e.propensity;
        }
    }
    let n = F::from_count(log.len());
    Ok(Gradient(total.into_iter().map(|t| t / n).collect()))
}
