//! Position-biased click simulation under the examination hypothesis, the
//! logging policy, click-log statistics and the JSON Lines log format.
//!
//! Randomness: session `s` of a log with seed `seed` draws from a ChaCha8
//! stream seeded with `seed` and stream id `s`. Each session consumes one
//! draw for the query followed by exactly one uniform per candidate, in rank
//! order, so sessions can be generated independently.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, Query};
use crate::optimization::{train_supervised, SupervisedConfig, TrainError};
use crate::ranking::{rank_all, LinearModel, RankingError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("invalid bias configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "click simulation cannot terminate: expected {expected_clicks_per_session:e} clicks \
         per session, {sessions} sessions produced {clicks} of {target} clicks"
    )]
    NonTerminating {
        expected_clicks_per_session: f64,
        sessions: u64,
        clicks: usize,
        target: usize,
    },
    #[error("click log is empty")]
    EmptyLog,
    #[error("click log line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `P(o(d)) = (1/rank)^γ`.
pub fn observation_propensity<F: Scalar>(rank: usize, gamma: F) -> F {
    assert!(rank >= 1, "ranks are 1-based");
    F::from_count(rank).recip().powf(gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BiasConfig<F: Scalar> {
    pub gamma: F,
    pub noise_click_prob: F,
    pub relevant_grades: Vec<u8>,
    pub n_clicks: usize,
}

impl<F: Scalar> Default for BiasConfig<F> {
    fn default() -> Self {
        Self {
            gamma: F::one(),
            noise_click_prob: F::lit(0.1),
            relevant_grades: vec![3, 4],
            n_clicks: 1_000_000,
        }
    }
}

impl<F: Scalar> BiasConfig<F> {
    fn validate(&self) -> Result<(), SimulationError> {
        if !(self.gamma.is_finite() && self.gamma >= F::zero()) {
            return Err(SimulationError::InvalidConfig(format!("gamma {} < 0", self.gamma)));
        }
        if !(self.noise_click_prob >= F::zero() && self.noise_click_prob <= F::one()) {
            return Err(SimulationError::InvalidConfig(format!(
                "noise_click_prob {} outside [0, 1]",
                self.noise_click_prob
            )));
        }
        if self.n_clicks == 0 {
            return Err(SimulationError::InvalidConfig("n_clicks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickLogEntry<F> {
    /// Index into the dataset's train split.
    pub query_ref: usize,
    pub clicked_doc: usize,
    pub propensity: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickLog<F> {
    pub entries: Vec<ClickLogEntry<F>>,
    pub gamma: F,
    pub policy_fingerprint: String,
    pub seed: u64,
}

impl<F: Scalar> ClickLog<F> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn propensities(&self) -> Vec<F> {
        self.entries.iter().map(|e| e.propensity).collect()
    }
}

/// Hex digest of the model's weights (as little-endian f64), 16 characters.
pub fn policy_fingerprint<F: Scalar>(model: &LinearModel<F>) -> String {
    let mut h = Sha256::new();
    for w in &model.weights {
        h.update(w.as_f64().to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Trains the logging policy on `⌈fraction · |train|⌉` uniformly chosen
/// train queries with full supervision.
pub fn train_logging_policy<F: Scalar>(
    dataset: &Dataset<F>,
    fraction: f64,
    seed: u64,
    supervised: &SupervisedConfig<F>,
) -> Result<LinearModel<F>, SimulationError> {
    let n = dataset.train.len();
    if n == 0 {
        return Err(SimulationError::EmptyTrainSplit);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SimulationError::InvalidConfig(format!(
            "logging fraction {fraction} outside (0, 1]"
        )));
    }
    let k = logging_subset_size(n, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let subset: Vec<Query<F>> = picked.into_iter().map(|i| dataset.train[i].clone()).collect();
    let cfg = SupervisedConfig {
        seed,
        ..supervised.clone()
    };
    Ok(train_supervised(&subset, &cfg)?)
}

pub fn logging_subset_size(n_train: usize, fraction: f64) -> usize {
    // Guard against 0.001 * 1000 = 1.0000000000000002 style round-up.
    let raw = fraction * n_train as f64;
    let k = (raw - 1e-9).ceil().max(1.0) as usize;
    k.min(n_train)
}

/// Per-query rank order under the policy and per-position click probabilities.
struct SessionPlan<F> {
    order: Vec<usize>,
    propensity: Vec<F>,
    click_prob: Vec<F>,
}

fn session_rng(seed: u64, session: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(session);
    rng
}

pub fn simulate_clicks<F: Scalar>(
    dataset: &Dataset<F>,
    policy: &LinearModel<F>,
    config: &BiasConfig<F>,
    seed: u64,
) -> Result<ClickLog<F>, SimulationError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(SimulationError::EmptyTrainSplit);
    }
    let plans = dataset
        .train
        .iter()
        .map(|q| {
            let order = rank_all(policy, q)?.0;
            let docs = q.docs();
            let propensity: Vec<F> = (1..=order.len())
                .map(|r| observation_propensity(r, config.gamma))
                .collect();
            let click_prob = order
                .iter()
                .zip(&propensity)
                .map(|(&d, &p)| {
                    if config.relevant_grades.contains(&docs[d].relevance) {
                        p
                    } else {
                        p * config.noise_click_prob
                    }
                })
                .collect();
            Ok(SessionPlan {
                order,
                propensity,
                click_prob,
            })
        })
        .collect::<Result<Vec<_>, RankingError>>()?;

    let expected: f64 = plans
        .iter()
        .map(|p| p.click_prob.iter().map(|c| c.as_f64()).sum::<f64>())
        .sum::<f64>()
        / plans.len() as f64;
    let target = config.n_clicks;
    if expected < 1e-9 {
        return Err(SimulationError::NonTerminating {
            expected_clicks_per_session: expected,
            sessions: 0,
            clicks: 0,
            target,
        });
    }
    let budget = (10.0 * target as f64 / expected).ceil() as u64 + 1000;

    let mut entries = Vec::with_capacity(target);
    let mut session = 0u64;
    while entries.len() < target {
        if session >= budget {
            return Err(SimulationError::NonTerminating {
                expected_clicks_per_session: expected,
                sessions: session,
                clicks: entries.len(),
                target,
            });
        }
        let mut rng = session_rng(seed, session);
        let query_ref = rng.random_range(0..plans.len());
        let plan = &plans[query_ref];
        for (pos, &doc) in plan.order.iter().enumerate() {
            let u: f64 = rng.random();
            if u < plan.click_prob[pos].as_f64() {
                entries.push(ClickLogEntry {
                    query_ref,
                    clicked_doc: doc,
                    propensity: plan.propensity[pos],
                });
                if entries.len() == target {
                    break;
                }
            }
        }
        session += 1;
    }

    Ok(ClickLog {
        entries,
        gamma: config.gamma,
        policy_fingerprint: policy_fingerprint(policy),
        seed,
    })
}

/// Checks every stored propensity against `(1/rank)^γ` under `policy`.
/// Returns the index of the first mismatching entry.
pub fn audit_propensities<F: Scalar>(
    log: &ClickLog<F>,
    dataset: &Dataset<F>,
    policy: &LinearModel<F>,
) -> Result<Option<usize>, RankingError> {
    let mut ranks: Vec<Option<Vec<usize>>> = vec![None; dataset.train.len()];
    for (i, e) in log.entries.iter().enumerate() {
        let Some(q) = dataset.train.get(e.query_ref) else {
            return Ok(Some(i));
        };
        if ranks[e.query_ref].is_none() {
            ranks[e.query_ref] = Some(rank_all(policy, q)?.ranks());
        }
        let r = ranks[e.query_ref].as_ref().expect("filled above");
        if e.clicked_doc >= r.len()
            || observation_propensity(r[e.clicked_doc], log.gamma) != e.propensity
        {
            return Ok(Some(i));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogStats {
    /// Largest IPS weight `max_i 1/p_i`.
    pub m: f64,
    /// Mean IPS weight `(1/n) Σ_i 1/p_i`.
    pub m_bar: f64,
}

impl LogStats {
    pub fn ratio(&self) -> f64 {
        self.m / self.m_bar
    }
}

pub fn log_stats<F: Scalar>(log: &ClickLog<F>) -> Result<LogStats, SimulationError> {
    propensity_stats(&log.propensities())
}

pub fn propensity_stats<F: Scalar>(propensities: &[F]) -> Result<LogStats, SimulationError> {
    if propensities.is_empty() {
        return Err(SimulationError::EmptyLog);
    }
    let mut m = 0.0f64;
    let mut sum = 0.0f64;
    for p in propensities {
        let w = p.recip().as_f64();
        m = m.max(w);
        sum += w;
    }
    let m_bar = (sum / propensities.len() as f64).min(m);
    Ok(LogStats { m, m_bar })
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    gamma: f64,
    seed: u64,
    policy: String,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    q: usize,
    d: usize,
    p: f64,
}

/// JSON Lines: one header line, then one `{"q","d","p"}` object per click.
pub fn write_click_log<F: Scalar, W: Write>(log: &ClickLog<F>, mut out: W) -> Result<(), SimulationError> {
    let header = LogHeader {
        gamma: log.gamma.as_f64(),
        seed: log.seed,
        policy: log.policy_fingerprint.clone(),
        n: log.entries.len(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for e in &log.entries {
        let line = LogLine {
            q: e.query_ref,
            d: e.clicked_doc,
            p: e.propensity.as_f64(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_click_log<F: Scalar, R: BufRead>(reader: R) -> Result<ClickLog<F>, SimulationError> {
    let mut lines = reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (_, first) = lines.next().ok_or(SimulationError::MalformedLog {
        line: 1,
        reason: "missing header".into(),
    })?;
    let header: LogHeader = serde_json::from_str(&first?).map_err(|e| SimulationError::MalformedLog {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut entries = Vec::with_capacity(header.n);
    for (i, line) in lines {
        let line = line?;
        let rec: LogLine = serde_json::from_str(&line).map_err(|e| SimulationError::MalformedLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if !(rec.p.is_finite() && rec.p > 0.0 && rec.p <= 1.0) {
            return Err(SimulationError::MalformedLog {
                line: i + 1,
                reason: format!("propensity {} outside (0, 1]", rec.p),
            });
        }
        entries.push(ClickLogEntry {
            query_ref: rec.q,
            clicked_doc: rec.d,
            propensity: F::lit(rec.p),
        });
    }
    if entries.len() != header.n {
        return Err(SimulationError::MalformedLog {
            line: 1,
            reason: format!("header declares {} clicks, found {}", header.n, entries.len()),
        });
    }
    Ok(ClickLog {
        entries,
        gamma: F::lit(header.gamma),
        policy_fingerprint: header.policy,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_ltr, Document, SyntheticConfig};
    use crate::optimization::OptimizerKind;
    use crate::ranking::ndcg_at_k;
    use proptest::prelude::*;

    fn synthetic(n_queries: usize, docs: usize, seed: u64) -> Dataset<f64> {
        generate_synthetic_ltr(&SyntheticConfig {
            n_queries,
            docs_per_query: docs,
            dim: 5,
            seed,
        })
        .unwrap()
    }

    fn quick_supervised() -> SupervisedConfig<f64> {
        SupervisedConfig {
            optimizer: OptimizerKind::Sgd,
            eta: Some(0.01),
            iterations: 2_000,
            seed: 0,
            ..SupervisedConfig::default()
        }
    }

    #[test]
    fn propensity_examples() {
        assert_eq!(observation_propensity(1, 2.7f64), 1.0);
        assert_eq!(observation_propensity(2, 1.0f64), 0.5);
        assert_eq!(observation_propensity(4, 0.5f64), 0.5);
        assert_eq!(observation_propensity(9, 0.0f64), 1.0);
    }

    #[test]
    fn stats_examples() {
        let s = propensity_stats(&[0.5, 0.25]).unwrap();
        assert_eq!((s.m, s.m_bar), (4.0, 3.0));
        let s = propensity_stats(&[0.2; 7]).unwrap();
        assert!((s.m - 5.0).abs() < 1e-12 && (s.m_bar - 5.0).abs() < 1e-12);
        assert!(matches!(
            propensity_stats::<f64>(&[]),
            Err(SimulationError::EmptyLog)
        ));
    }

    #[test]
    fn subset_size_rounds_up() {
        assert_eq!(logging_subset_size(1000, 0.001), 1);
        assert_eq!(logging_subset_size(1001, 0.001), 2);
        assert_eq!(logging_subset_size(120, 0.001), 1);
        assert_eq!(logging_subset_size(120, 1.0), 120);
    }

    #[test]
    fn deterministic_single_click_sessions() {
        let q = Query::new(
            "only",
            vec![Document {
                doc_index: 0,
                features: vec![1.0],
                relevance: 4,
            }],
        )
        .unwrap();
        let ds = Dataset::new(1, vec![q], vec![], vec![]).unwrap();
        let cfg = BiasConfig {
            gamma: 0.0,
            noise_click_prob: 0.0,
            n_clicks: 25,
            ..BiasConfig::default()
        };
        let log = simulate_clicks(&ds, &LinearModel::new(vec![1.0]), &cfg, 4).unwrap();
        assert_eq!(log.len(), 25);
        assert!(log.entries.iter().all(|e| e.propensity == 1.0 && e.clicked_doc == 0));
    }

    #[test]
    fn impossible_configuration_aborts() {
        let q = Query::new(
            "q",
            vec![Document {
                doc_index: 0,
                features: vec![1.0],
                relevance: 0,
            }],
        )
        .unwrap();
        let ds = Dataset::new(1, vec![q], vec![], vec![]).unwrap();
        let cfg = BiasConfig {
            noise_click_prob: 0.0,
            n_clicks: 10,
            ..BiasConfig::default()
        };
        let err = simulate_clicks(&ds, &LinearModel::new(vec![1.0]), &cfg, 0).unwrap_err();
        assert!(matches!(err, SimulationError::NonTerminating { .. }));
    }

    #[test]
    fn invalid_bias_config_rejected() {
        let ds = synthetic(5, 5, 0);
        let w = LinearModel::zeros(5);
        let bad = BiasConfig {
            gamma: -1.0,
            ..BiasConfig::default()
        };
        assert!(simulate_clicks(&ds, &w, &bad, 0).is_err());
        let bad = BiasConfig {
            noise_click_prob: 1.5,
            ..BiasConfig::default()
        };
        assert!(simulate_clicks(&ds, &w, &bad, 0).is_err());
    }

    #[test]
    fn logs_are_reproducible_and_auditable() {
        let ds = synthetic(30, 20, 1);
        let policy = LinearModel::new(vec![0.3, -0.2, 0.9, 0.0, 0.1]);
        let cfg = BiasConfig {
            gamma: 1.2,
            n_clicks: 3_000,
            ..BiasConfig::default()
        };
        let a = simulate_clicks(&ds, &policy, &cfg, 77).unwrap();
        let b = simulate_clicks(&ds, &policy, &cfg, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3_000);
        assert_eq!(audit_propensities(&a, &ds, &policy).unwrap(), None);

        let max_rank = a
            .entries
            .iter()
            .map(|e| rank_of_entry(&ds, &policy, e))
            .max()
            .unwrap();
        let min_p = a.entries.iter().map(|e| e.propensity).fold(1.0, f64::min);
        assert_eq!(min_p, observation_propensity(max_rank, 1.2));

        let stats = log_stats(&a).unwrap();
        assert!(stats.m_bar <= stats.m);
    }

    fn rank_of_entry(ds: &Dataset<f64>, w: &LinearModel<f64>, e: &ClickLogEntry<f64>) -> usize {
        crate::ranking::rank_of(w, &ds.train[e.query_ref], e.clicked_doc).unwrap()
    }

    #[test]
    fn skew_grows_with_gamma() {
        let ds = synthetic(40, 25, 2);
        let policy = LinearModel::new(vec![0.5, 0.1, -0.3, 0.2, 0.4]);
        let ratios: Vec<f64> = [0.5, 1.0, 1.5]
            .iter()
            .map(|&gamma| {
                let cfg = BiasConfig {
                    gamma,
                    n_clicks: 20_000,
                    ..BiasConfig::default()
                };
                log_stats(&simulate_clicks(&ds, &policy, &cfg, 5).unwrap())
                    .unwrap()
                    .ratio()
            })
            .collect();
        assert!(ratios[0] <= ratios[1] && ratios[1] <= ratios[2], "{ratios:?}");
    }

    /// Monte-Carlo check of the Bernoulli model: with every candidate
    /// relevant, each session clicks rank 1 for sure, so clicks at rank 1
    /// count sessions and the click-through rate at rank r must be 1/r.
    #[test]
    fn relevant_ctr_follows_inverse_rank() {
        let queries = (0..3)
            .map(|qi| {
                let docs = (0..10)
                    .map(|d| Document {
                        doc_index: d,
                        features: vec![(qi * 10 + d) as f64],
                        relevance: 4,
                    })
                    .collect();
                Query::new(qi.to_string(), docs).unwrap()
            })
            .collect();
        let ds = Dataset::new(1, queries, vec![], vec![]).unwrap();
        let policy = LinearModel::new(vec![-1.0]);
        // H_10 ≈ 2.929 clicks per session, ~10^5 sessions.
        let cfg = BiasConfig {
            gamma: 1.0,
            n_clicks: 292_897,
            ..BiasConfig::default()
        };
        let log = simulate_clicks(&ds, &policy, &cfg, 9).unwrap();
        let mut clicks = [0u64; 10];
        for e in &log.entries {
            let rank = (1.0 / e.propensity).round() as usize;
            assert_eq!(rank, crate::ranking::rank_of(&policy, &ds.train[e.query_ref], e.clicked_doc).unwrap());
            clicks[rank - 1] += 1;
        }
        let sessions = clicks[0] as f64;
        assert!((99_000.0..101_000.0).contains(&sessions), "{sessions}");
        for (pos, &c) in clicks.iter().enumerate().skip(1) {
            let p = 1.0 / (pos + 1) as f64;
            let rate = c as f64 / sessions;
            let se = (p * (1.0 - p) / sessions).sqrt();
            assert!((rate - p).abs() <= 3.0 * se, "rank {}: {rate} vs {p}", pos + 1);
        }
    }

    #[test]
    fn logging_policy_beats_zero_model() {
        let ds = synthetic(100, 20, 4);
        let policy = train_logging_policy(&ds, 0.05, 1, &quick_supervised()).unwrap();
        let zero = LinearModel::zeros(ds.dim);
        let p = ndcg_at_k(&policy, &ds.test, 10).unwrap();
        let z = ndcg_at_k(&zero, &ds.test, 10).unwrap();
        assert!(p > z, "{p} <= {z}");
    }

    #[test]
    fn logging_policy_full_fraction_and_errors() {
        let ds = synthetic(10, 10, 5);
        assert!(train_logging_policy(&ds, 1.0, 0, &quick_supervised()).is_ok());
        let empty = Dataset::<f64>::new(5, vec![], vec![], vec![]).unwrap();
        assert!(matches!(
            train_logging_policy(&empty, 0.1, 0, &quick_supervised()),
            Err(SimulationError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn empty_log_file_is_rejected() {
        assert!(read_click_log::<f64, _>("".as_bytes()).is_err());
        let text = "{\"gamma\":1.0,\"seed\":0,\"policy\":\"ab\",\"n\":2}\n{\"q\":0,\"d\":1,\"p\":0.5}\n";
        assert!(matches!(
            read_click_log::<f64, _>(text.as_bytes()),
            Err(SimulationError::MalformedLog { .. })
        ));
        let text = "{\"gamma\":1.0,\"seed\":0,\"policy\":\"ab\",\"n\":1}\n{\"q\":0,\"d\":1,\"p\":0}\n";
        assert!(read_click_log::<f64, _>(text.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn jsonl_round_trip_is_bit_exact(
            gamma in 0.0f64..3.0,
            seed in any::<u64>(),
            recs in prop::collection::vec((0usize..1000, 0usize..200, 1e-9f64..=1.0), 0..50),
        ) {
            let log = ClickLog {
                entries: recs
                    .into_iter()
                    .map(|(q, d, p)| ClickLogEntry { query_ref: q, clicked_doc: d, propensity: p })
                    .collect(),
                gamma,
                policy_fingerprint: "0123456789abcdef".into(),
                seed,
            };
            let mut buf = Vec::new();
            write_click_log(&log, &mut buf).unwrap();
            let back: ClickLog<f64> = read_click_log(&buf[..]).unwrap();
            prop_assert_eq!(&back, &log);
            let mut again = Vec::new();
            write_click_log(&back, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
