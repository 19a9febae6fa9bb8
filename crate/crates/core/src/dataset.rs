//! Supervised ranking data: SVMLight parsing, synthetic generation and
//! feature standardization.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot, Scalar};

/// Highest relevance grade accepted anywhere in the crate.
pub const MAX_GRADE: u8 = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate feature index {index}")]
    DuplicateFeature { line: usize, index: usize },
    #[error("line {line}: relevance grade {grade} outside 0..=4")]
    GradeOutOfRange { line: usize, grade: i64 },
    #[error("line {line}: feature index {index} exceeds declared dimensionality {dim}")]
    FeatureIndexTooLarge { line: usize, index: usize, dim: usize },
    #[error("query {query_id} has no candidate documents")]
    EmptyQuery { query_id: String },
    #[error("query {query_id}: document {position} has doc_index {doc_index}")]
    DocIndexGap {
        query_id: String,
        position: usize,
        doc_index: usize,
    },
    #[error("query {query_id}: feature vector length {len} != dataset dimensionality {dim}")]
    DimensionMismatch {
        query_id: String,
        len: usize,
        dim: usize,
    },
    #[error("query {query_id}: non-finite feature value")]
    NonFinite { query_id: String },
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document<F> {
    pub doc_index: usize,
    pub features: Vec<F>,
    pub relevance: u8,
}

impl<F: Scalar> Document<F> {
    /// Binary relevance used by clicks and the additive metric: grades 3 and 4.
    #[inline]
    pub fn is_relevant(&self) -> bool {
        self.relevance >= 3
    }
}

/// A query with its candidate set `D_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Query<F> {
    pub query_id: String,
    docs: Vec<Document<F>>,
}

impl<F: Scalar> Query<F> {
    pub fn new(query_id: impl Into<String>, docs: Vec<Document<F>>) -> Result<Self, DatasetError> {
        let query_id = query_id.into();
        if docs.is_empty() {
            return Err(DatasetError::EmptyQuery { query_id });
        }
        for (position, doc) in docs.iter().enumerate() {
            if doc.doc_index != position {
                return Err(DatasetError::DocIndexGap {
                    query_id,
                    position,
                    doc_index: doc.doc_index,
                });
            }
            if doc.relevance > MAX_GRADE {
                return Err(DatasetError::GradeOutOfRange {
                    line: 0,
                    grade: doc.relevance as i64,
                });
            }
            if !doc.features.iter().all(|v| v.is_finite()) {
                return Err(DatasetError::NonFinite { query_id });
            }
        }
        Ok(Self { query_id, docs })
    }

    pub fn docs(&self) -> &[Document<F>] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.docs[0].features.len()
    }

    pub fn grades(&self) -> impl Iterator<Item = u8> + '_ {
        self.docs.iter().map(|d| d.relevance)
    }

    pub fn has_relevant(&self) -> bool {
        self.docs.iter().any(Document::is_relevant)
    }

    fn pad_to(&mut self, dim: usize) {
        for doc in &mut self.docs {
            doc.features.resize(dim, F::zero());
        }
    }

    fn features_mut(&mut self) -> impl Iterator<Item = &mut Vec<F>> {
        self.docs.iter_mut().map(|d| &mut d.features)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub dim: usize,
    pub train: Vec<Query<F>>,
    pub validation: Vec<Query<F>>,
    pub test: Vec<Query<F>>,
}

impl<F: Scalar> Dataset<F> {
    /// Assembles splits, padding shorter feature vectors with zeros up to
    /// `dim` (SVMLight files omit trailing zero features).
    pub fn new(
        dim: usize,
        mut train: Vec<Query<F>>,
        mut validation: Vec<Query<F>>,
        mut test: Vec<Query<F>>,
    ) -> Result<Self, DatasetError> {
        for q in train.iter_mut().chain(&mut validation).chain(&mut test) {
            for doc in q.docs() {
                if doc.features.len() > dim {
                    return Err(DatasetError::DimensionMismatch {
                        query_id: q.query_id.clone(),
                        len: doc.features.len(),
                        dim,
                    });
                }
            }
            q.pad_to(dim);
        }
        Ok(Self {
            dim,
            train,
            validation,
            test,
        })
    }

    pub fn splits(&self) -> [&[Query<F>]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn n_queries(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Queries read from one SVMLight stream plus the inferred dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmlightData<F> {
    pub dim: usize,
    pub queries: Vec<Query<F>>,
}

/// Reads `<grade> qid:<id> <idx>:<value> ... [# comment]` lines.
///
/// Documents are grouped by consecutive `qid`. The dimensionality is the
/// largest feature index seen, unless `dim` pins it explicitly.
pub fn parse_svmlight<F: Scalar, R: BufRead>(
    reader: R,
    dim: Option<usize>,
) -> Result<SvmlightData<F>, DatasetError> {
    struct Pending<F> {
        qid: String,
        docs: Vec<Document<F>>,
    }

    let mut queries: Vec<Query<F>> = Vec::new();
    let mut pending: Option<Pending<F>> = None;
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_whitespace();
        let Some(grade_tok) = tokens.next() else {
            continue;
        };
        let malformed = |reason: String| DatasetError::Malformed {
            line: lineno,
            reason,
        };

        let grade: i64 = grade_tok
            .parse()
            .map_err(|_| malformed(format!("relevance grade '{grade_tok}' is not an integer")))?;
        if !(0..=MAX_GRADE as i64).contains(&grade) {
            return Err(DatasetError::GradeOutOfRange {
                line: lineno,
                grade,
            });
        }

        let qid_tok = tokens
            .next()
            .ok_or_else(|| malformed("missing qid".into()))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed(format!("expected qid:<id>, found '{qid_tok}'")))?;

        let mut pairs: Vec<(usize, F)> = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| malformed(format!("expected <index>:<value>, found '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| malformed(format!("bad feature index in '{tok}'")))?;
            if idx == 0 {
                return Err(malformed("feature indices start at 1".into()));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| malformed(format!("bad feature value in '{tok}'")))?;
            if !val.is_finite() {
                return Err(malformed(format!("non-finite feature value in '{tok}'")));
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(DatasetError::FeatureIndexTooLarge {
                        line: lineno,
                        index: idx,
                        dim: d,
                    });
                }
            }
            if pairs.iter().any(|&(i, _)| i == idx) {
                return Err(DatasetError::DuplicateFeature {
                    line: lineno,
                    index: idx,
                });
            }
            max_index = max_index.max(idx);
            pairs.push((idx, F::lit(val)));
        }

        let mut features = vec![F::zero(); pairs.iter().map(|p| p.0).max().unwrap_or(0)];
        for (idx, val) in pairs {
            features[idx - 1] = val;
        }

        match &mut pending {
            Some(p) if p.qid == qid => {}
            _ => {
                if let Some(done) = pending.take() {
                    queries.push(Query::new(done.qid, done.docs)?);
                }
                pending = Some(Pending {
                    qid: qid.to_string(),
                    docs: Vec::new(),
                });
            }
        }
        let p = pending.as_mut().expect("pending query");
        p.docs.push(Document {
            doc_index: p.docs.len(),
            features,
            relevance: grade as u8,
        });
    }
    if let Some(done) = pending.take() {
        queries.push(Query::new(done.qid, done.docs)?);
    }

    let dim = dim.unwrap_or(max_index);
    for q in &mut queries {
        q.pad_to(dim);
    }
    Ok(SvmlightData { dim, queries })
}

/// Writes queries in SVMLight form with every feature spelled out, so that
/// parsing the output reproduces the input exactly.
pub fn write_svmlight<F: Scalar, W: Write>(queries: &[Query<F>], mut out: W) -> std::io::Result<()> {
    for q in queries {
        for doc in q.docs() {
            write!(out, "{} qid:{}", doc.relevance, q.query_id)?;
            for (i, v) in doc.features.iter().enumerate() {
                write!(out, " {}:{}", i + 1, v.as_f64())?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Parameters of the synthetic stand-in for licensed LTR collections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Cumulative grade boundaries in percent: 50/20/15/10/5 for grades 0..4.
const GRADE_CUTS_PERCENT: [usize; 4] = [50, 70, 85, 95];
const LATENT_NOISE_SD: f64 = 0.5;

/// Grade of the document at ascending latent-score position `pos` among `n`.
fn quantile_grade(pos: usize, n: usize) -> u8 {
    GRADE_CUTS_PERCENT
        .iter()
        .filter(|&&cut| (pos + 1) * 100 > cut * n)
        .count() as u8
}

pub fn generate_synthetic_ltr<F: Scalar>(cfg: &SyntheticConfig) -> Result<Dataset<F>, DatasetError> {
    if cfg.n_queries == 0 || cfg.docs_per_query == 0 || cfg.dim == 0 {
        return Err(DatasetError::InvalidConfig(
            "n_queries, docs_per_query and dim must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, LATENT_NOISE_SD).expect("valid normal");

    let mut queries = Vec::with_capacity(cfg.n_queries);
    for qi in 0..cfg.n_queries {
        let raw: Vec<Vec<f64>> = (0..cfg.docs_per_query)
            .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let latent: Vec<f64> = raw
            .iter()
            .map(|x| dot(&hidden, x) + noise.sample(&mut rng))
            .collect();
        let mut order: Vec<usize> = (0..cfg.docs_per_query).collect();
        order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]).then(a.cmp(&b)));
        let mut grades = vec![0u8; cfg.docs_per_query];
        for (pos, &doc) in order.iter().enumerate() {
            grades[doc] = quantile_grade(pos, cfg.docs_per_query);
        }
        let docs = raw
            .into_iter()
            .zip(grades)
            .enumerate()
            .map(|(doc_index, (x, relevance))| Document {
                doc_index,
                features: x.into_iter().map(F::lit).collect(),
                relevance,
            })
            .collect();
        queries.push(Query::new(qi.to_string(), docs)?);
    }

    let n = cfg.n_queries;
    let n_train = (3 * n + 4) / 5;
    let n_valid = n / 5;
    let test = queries.split_off(n_train + n_valid);
    let validation = queries.split_off(n_train);
    Dataset::new(cfg.dim, queries, validation, test)
}

/// Z-scores every feature with train-split statistics. Zero-variance
/// features are left untouched.
pub fn standardize_features<F: Scalar>(dataset: &Dataset<F>, enabled: bool) -> Dataset<F> {
    let mut out = dataset.clone();
    if !enabled || dataset.train.is_empty() {
        return out;
    }
    let dim = dataset.dim;
    let mut mean = vec![0.0f64; dim];
    let mut count = 0usize;
    for doc in dataset.train.iter().flat_map(|q| q.docs()) {
        for (m, v) in mean.iter_mut().zip(&doc.features) {
            *m += v.as_f64();
        }
        count += 1;
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; dim];
    for doc in dataset.train.iter().flat_map(|q| q.docs()) {
        for ((s, v), m) in var.iter_mut().zip(&doc.features).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    let sd: Vec<Option<f64>> = var
        .iter()
        .map(|s| {
            let sd = (s / count as f64).sqrt();
            (sd > 0.0).then_some(sd)
        })
        .collect();

    for q in out
        .train
        .iter_mut()
        .chain(&mut out.validation)
        .chain(&mut out.test)
    {
        for features in q.features_mut() {
            for ((v, m), sd) in features.iter_mut().zip(&mean).zip(&sd) {
                if let Some(sd) = sd {
                    *v = F::lit((v.as_f64() - m) / sd);
                }
            }
        }
    }
    out
}
