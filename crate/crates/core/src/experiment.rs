//! Experiment runner behind the `cfltr` binary: configuration, sweeps over
//! (method, optimizer, batch size, γ, seed) cells, and the files they emit.
//!
//! Everything here runs in `f64`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    generate_synthetic_ltr, parse_svmlight, standardize_features, Dataset, DatasetError, SyntheticConfig,
};
use crate::optimization::{
    default_eta_grid, default_eval_every, grid_search_eta, regret, train, train_supervised, GoldNdcg, GridEntry,
    Method, OptimizerKind, SupervisedConfig, TrainConfig, TrainError,
};
use crate::ranking::{ndcg_at_k, LinearModel, NDCG_CUTOFF};
use crate::simulation::{
    log_stats, propensity_stats, read_click_log, simulate_clicks, train_logging_policy, write_click_log, BiasConfig,
    ClickLog, SimulationError,
};
use crate::toy_regression::{
    generate_toy, gradient_moments, run_toy_comparison, summarize_toy, ToySummaryRow, DEFAULT_TOY_ETAS,
    TOY_ITERATIONS,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("every learning rate diverged for: {}", .cells.join(", "))]
    AllDivergent { cells: Vec<String> },
}

impl ExperimentError {
    /// 1 for configuration problems, 3 for an all-divergent grid, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::AllDivergent { .. } => 3,
            ExperimentError::Train(TrainError::AllDivergent) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// One dataset per run seed, generated with `seed + run seed`.
    Synthetic {
        n_queries: usize,
        docs_per_query: usize,
        dim: usize,
        seed: u64,
    },
    Svmlight {
        train: PathBuf,
        validation: PathBuf,
        test: PathBuf,
        #[serde(default)]
        dim: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSweep {
    pub gammas: Vec<f64>,
    pub n_clicks: usize,
    pub noise_click_prob: f64,
    pub relevant_grades: Vec<u8>,
}

impl Default for BiasSweep {
    fn default() -> Self {
        let b = BiasConfig::<f64>::default();
        Self {
            gammas: vec![b.gamma],
            n_clicks: b.n_clicks,
            noise_click_prob: b.noise_click_prob,
            relevant_grades: b.relevant_grades,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSpec {
    Fixed(f64),
    Grid(Vec<f64>),
    DefaultGrid,
}

impl EtaSpec {
    fn grid(&self) -> Option<Vec<f64>> {
        match self {
            EtaSpec::Fixed(_) => None,
            EtaSpec::Grid(g) => Some(g.clone()),
            EtaSpec::DefaultGrid => Some(default_eta_grid()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub problem_seed: u64,
    pub etas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub iterations: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            problem_seed: 0,
            etas: DEFAULT_TOY_ETAS.to_vec(),
            seeds: (0..10).collect(),
            iterations: TOY_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub standardize: bool,
    pub bias: BiasSweep,
    /// Fraction of train queries the logging policy is fitted on.
    pub logging_fraction: f64,
    /// Iterations for the logging policy and the gold model.
    pub supervised_iterations: usize,
    pub methods: Vec<Method>,
    pub optimizers: Vec<OptimizerKind>,
    pub batch_sizes: Vec<usize>,
    pub iterations: usize,
    /// Defaults to `iterations / 100`.
    pub eval_every: Option<usize>,
    pub eta: EtaSpec,
    pub seeds: Vec<u64>,
    /// Worker threads; defaults to the number of cores.
    pub workers: Option<usize>,
    /// Not echoed into `config.json`, so reruns into different
    /// directories produce identical files.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub toy: ToySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                n_queries: 200,
                docs_per_query: 50,
                dim: 20,
                seed: 0,
            },
            standardize: false,
            bias: BiasSweep::default(),
            logging_fraction: 0.001,
            supervised_iterations: 100_000,
            methods: Method::ALL.to_vec(),
            optimizers: vec![OptimizerKind::Sgd],
            batch_sizes: vec![10],
            iterations: 100_000,
            eval_every: None,
            eta: EtaSpec::DefaultGrid,
            seeds: vec![0],
            workers: None,
            out_dir: PathBuf::from("out"),
            toy: ToySettings::default(),
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub gamma: Option<f64>,
    pub method: Option<Method>,
    pub optimizer: Option<OptimizerKind>,
    pub batch_size: Option<usize>,
    pub eta: Option<f64>,
    pub clicks: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seeds = vec![v];
            self.toy.problem_seed = v;
        }
        if let Some(v) = o.workers {
            self.workers = Some(v);
        }
        if let Some(v) = o.gamma {
            self.bias.gammas = vec![v];
        }
        if let Some(v) = o.method {
            self.methods = vec![v];
        }
        if let Some(v) = o.optimizer {
            self.optimizers = vec![v];
        }
        if let Some(v) = o.batch_size {
            self.batch_sizes = vec![v];
        }
        if let Some(v) = o.eta {
            self.eta = EtaSpec::Fixed(v);
            self.toy.etas = vec![v];
        }
        if let Some(v) = o.clicks {
            self.bias.n_clicks = v;
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.optimizers.is_empty() {
            return bad("at least one optimizer is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch sizes must be a non-empty list of positive integers");
        }
        if self.bias.gammas.is_empty() || self.bias.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad("gammas must be a non-empty list of finite values >= 0");
        }
        if !(0.0..=1.0).contains(&self.bias.noise_click_prob) {
            return bad("noise_click_prob must lie in [0, 1]");
        }
        if self.bias.n_clicks == 0 {
            return bad("n_clicks must be positive");
        }
        if !(self.logging_fraction > 0.0 && self.logging_fraction <= 1.0) {
            return bad("logging_fraction must lie in (0, 1]");
        }
        if self.iterations == 0 || self.supervised_iterations == 0 {
            return bad("iteration counts must be positive");
        }
        if let Some(e) = self.eval_every {
            if e == 0 || e > self.iterations {
                return bad("eval_every must lie in [1, iterations]");
            }
        }
        match &self.eta {
            EtaSpec::Fixed(e) if !(e.is_finite() && *e > 0.0) => return bad("eta must be positive"),
            EtaSpec::Grid(g) if g.is_empty() || g.iter().any(|e| !(e.is_finite() && *e > 0.0)) => {
                return bad("eta grid must be a non-empty list of positive values")
            }
            _ => {}
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        if let DataSource::Svmlight {
            train,
            validation,
            test,
            ..
        } = &self.data
        {
            for p in [train, validation, test] {
                if !p.is_file() {
                    return Err(ExperimentError::Config(format!("data file {} does not exist", p.display())));
                }
            }
        }
        if let DataSource::Synthetic {
            n_queries,
            docs_per_query,
            dim,
            ..
        } = &self.data
        {
            if *n_queries == 0 || *docs_per_query == 0 || *dim == 0 {
                return bad("synthetic data needs positive n_queries, docs_per_query and dim");
            }
        }
        Ok(())
    }

    fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or_else(|| default_eval_every(self.iterations))
    }

    fn bias_for(&self, gamma: f64) -> BiasConfig<f64> {
        BiasConfig {
            gamma,
            noise_click_prob: self.bias.noise_click_prob,
            relevant_grades: self.bias.relevant_grades.clone(),
            n_clicks: self.bias.n_clicks,
        }
    }

    fn supervised(&self, seed: u64) -> SupervisedConfig<f64> {
        SupervisedConfig {
            iterations: self.supervised_iterations,
            seed,
            ..SupervisedConfig::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, ExperimentError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = self.workers {
            b = b.num_threads(w);
        }
        b.build()
            .map_err(|e| ExperimentError::Config(format!("cannot start worker pool: {e}")))
    }
}

fn read_svmlight(path: &Path, dim: Option<usize>) -> Result<crate::dataset::SvmlightData<f64>, ExperimentError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(parse_svmlight(BufReader::new(f), dim)?)
}

/// The dataset used by run seed `seed`.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset<f64>, ExperimentError> {
    let ds = match &cfg.data {
        DataSource::Synthetic {
            n_queries,
            docs_per_query,
            dim,
            seed: base,
        } => generate_synthetic_ltr(&SyntheticConfig {
            n_queries: *n_queries,
            docs_per_query: *docs_per_query,
            dim: *dim,
            seed: base.wrapping_add(seed),
        })?,
        DataSource::Svmlight {
            train,
            validation,
            test,
            dim,
        } => {
            let tr = read_svmlight(train, *dim)?;
            let va = read_svmlight(validation, *dim)?;
            let te = read_svmlight(test, *dim)?;
            let d = dim.unwrap_or(tr.dim.max(va.dim).max(te.dim));
            Dataset::new(d, tr.queries, va.queries, te.queries)?
        }
    };
    Ok(standardize_features(&ds, cfg.standardize))
}

/// Everything a run seed shares across cells.
pub struct SeedContext {
    pub seed: u64,
    pub dataset: Dataset<f64>,
    pub policy: LinearModel<f64>,
    pub policy_ndcg: GoldNdcg<f64>,
    pub gold_ndcg: Option<GoldNdcg<f64>>,
    /// One log per configured γ, in config order.
    pub logs: Vec<ClickLog<f64>>,
}

fn split_ndcg(model: &LinearModel<f64>, ds: &Dataset<f64>) -> Result<GoldNdcg<f64>, ExperimentError> {
    let eval = |qs: &[crate::dataset::Query<f64>]| -> Result<Option<f64>, ExperimentError> {
        if qs.is_empty() {
            return Ok(None);
        }
        match ndcg_at_k(model, qs, NDCG_CUTOFF) {
            Ok(v) => Ok(Some(v)),
            Err(crate::ranking::RankingError::NoRelevantDocuments) => Ok(None),
            Err(e) => Err(SimulationError::from(e).into()),
        }
    };
    Ok(GoldNdcg {
        valid: eval(&ds.validation)?,
        test: eval(&ds.test)?,
    })
}

fn prepare_seed(cfg: &ExperimentConfig, seed: u64, with_gold: bool) -> Result<SeedContext, ExperimentError> {
    let dataset = load_dataset(cfg, seed)?;
    let policy = train_logging_policy(&dataset, cfg.logging_fraction, seed, &cfg.supervised(seed))?;
    let policy_ndcg = split_ndcg(&policy, &dataset)?;
    let gold_ndcg = if with_gold {
        let gold = train_supervised(&dataset.train, &cfg.supervised(seed))?;
        Some(split_ndcg(&gold, &dataset)?)
    } else {
        None
    };
    let logs = cfg
        .bias
        .gammas
        .iter()
        .map(|&g| simulate_clicks(&dataset, &policy, &cfg.bias_for(g), seed))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!("seed {seed}: dataset, logging policy and {} click logs ready", logs.len());
    Ok(SeedContext {
        seed,
        dataset,
        policy,
        policy_ndcg,
        gold_ndcg,
        logs,
    })
}

pub fn prepare(cfg: &ExperimentConfig, with_gold: bool) -> Result<Vec<SeedContext>, ExperimentError> {
    cfg.seeds
        .par_iter()
        .map(|&s| prepare_seed(cfg, s, with_gold))
        .collect()
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_config_echo(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)
}

pub fn log_file_name(gamma: f64, seed: u64) -> String {
    format!("clicks_g{gamma}_s{seed}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub gamma: f64,
    pub seed: u64,
    pub n_clicks: usize,
    pub m: f64,
    pub m_bar: f64,
    pub ratio: f64,
    pub policy_ndcg_test: Option<f64>,
}

/// Writes one JSONL click log per (γ, seed) plus `stats.json`.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<StatsRow>, ExperimentError> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let contexts = pool.install(|| prepare(cfg, false))?;
    write_config_echo(cfg)?;
    let log_dir = cfg.out_dir.join("logs");
    create_dir(&log_dir)?;
    let mut rows = Vec::new();
    for gi in 0..cfg.bias.gammas.len() {
        for ctx in &contexts {
            let log = &ctx.logs[gi];
            let path = log_dir.join(log_file_name(cfg.bias.gammas[gi], ctx.seed));
            let f = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            write_click_log(log, &mut w)?;
            w.flush().map_err(io_err(&path))?;
            let st = log_stats(log)?;
            rows.push(StatsRow {
                gamma: cfg.bias.gammas[gi],
                seed: ctx.seed,
                n_clicks: log.len(),
                m: st.m,
                m_bar: st.m_bar,
                ratio: st.ratio(),
                policy_ndcg_test: ctx.policy_ndcg.test,
            });
        }
    }
    write_json(&cfg.out_dir.join("stats.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub gamma_index: usize,
    pub seed_index: usize,
}

fn cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut out = Vec::new();
    for gamma_index in 0..cfg.bias.gammas.len() {
        for &batch_size in &cfg.batch_sizes {
            for &method in &cfg.methods {
                for &optimizer in &cfg.optimizers {
                    for seed_index in 0..cfg.seeds.len() {
                        out.push(CellKey {
                            method,
                            optimizer,
                            batch_size,
                            gamma_index,
                            seed_index,
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn curve_file_name(method: Method, optimizer: OptimizerKind, batch: usize, gamma: f64, seed: u64) -> String {
    format!("{}_{}_b{batch}_g{gamma}_s{seed}.csv", method.name(), optimizer.name())
}

fn cell_label(cfg: &ExperimentConfig, c: &CellKey) -> String {
    format!(
        "{}/{}/b{}/g{}/s{}",
        c.method.name(),
        c.optimizer.name(),
        c.batch_size,
        cfg.bias.gammas[c.gamma_index],
        cfg.seeds[c.seed_index]
    )
}

fn base_train_config(cfg: &ExperimentConfig, c: &CellKey, eta: f64) -> TrainConfig<f64> {
    let mut t = TrainConfig::new(c.method, c.optimizer, eta, cfg.iterations, cfg.seeds[c.seed_index]);
    t.batch_size = c.batch_size;
    t.eval_every = cfg.eval_every();
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Divergent,
    AllDivergent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub eta: Option<f64>,
    pub divergent_at: Option<usize>,
    pub regret_valid_x100: Option<f64>,
    pub regret_test_x100: Option<f64>,
    pub final_ndcg_valid: Option<f64>,
    pub final_ndcg_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub gold_ndcg_valid: Option<f64>,
    pub gold_ndcg_test: Option<f64>,
    pub policy_ndcg_valid: Option<f64>,
    pub policy_ndcg_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    /// Mean over seeds, one entry per optimizer column; `None` if any seed
    /// lacks a regret.
    pub values: Vec<Option<f64>>,
}

/// Mean regret ×100 with methods as rows and optimizers as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTable {
    pub gamma: f64,
    pub batch_size: usize,
    pub split: String,
    pub columns: Vec<OptimizerKind>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seeds: Vec<SeedSummary>,
    pub cells: Vec<CellSummary>,
    pub tables: Vec<RegretTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
    pub best_eta: Option<f64>,
    pub entries: Vec<GridRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub eta: f64,
    pub regret_valid_x100: f64,
    pub divergent: bool,
}

impl From<&GridEntry<f64>> for GridRow {
    fn from(e: &GridEntry<f64>) -> Self {
        GridRow {
            eta: e.eta,
            regret_valid_x100: e.regret * 100.0,
            divergent: e.divergent,
        }
    }
}

fn gold_valid(ctx: &SeedContext) -> Result<f64, ExperimentError> {
    ctx.gold_ndcg.and_then(|g| g.valid).ok_or_else(|| {
        ExperimentError::Config("the validation split has no relevant documents, so eta cannot be tuned".into())
    })
}

enum CellOutcome {
    Trained {
        result: crate::optimization::TrainResult<f64>,
        grid: Option<Vec<GridEntry<f64>>>,
    },
    AllDivergent(Vec<GridEntry<f64>>),
}

fn run_cell(cfg: &ExperimentConfig, ctx: &SeedContext, c: &CellKey) -> Result<CellOutcome, ExperimentError> {
    let log = &ctx.logs[c.gamma_index];
    let gold = ctx.gold_ndcg.expect("train runs compute the gold model");
    let (eta, grid) = match cfg.eta.grid() {
        None => match cfg.eta {
            EtaSpec::Fixed(e) => (e, None),
            _ => unreachable!(),
        },
        Some(grid) => {
            let base = base_train_config(cfg, c, grid[0]);
            match grid_search_eta(log, &ctx.dataset, &base, &grid, gold_valid(ctx)?) {
                Ok(g) => (g.best_eta, Some(g.entries)),
                Err(TrainError::AllDivergent) => {
                    let entries = grid
                        .iter()
                        .map(|&eta| GridEntry {
                            eta,
                            regret: gold.valid.unwrap_or(f64::NAN),
                            divergent: true,
                        })
                        .collect();
                    return Ok(CellOutcome::AllDivergent(entries));
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    let result = train(log, &ctx.dataset, &base_train_config(cfg, c, eta), Some(gold))?;
    log::info!("cell {} done (eta {eta:e})", cell_label(cfg, c));
    Ok(CellOutcome::Trained { result, grid })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_curve(path: &Path, result: &crate::optimization::TrainResult<f64>) -> Result<(), ExperimentError> {
    let mut s = String::from("t,ndcg_valid,ndcg_test\n");
    for c in &result.checkpoints {
        s.push_str(&format!("{},{},{}\n", c.t, fmt_opt(c.ndcg_valid), fmt_opt(c.ndcg_test)));
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Parses a curve CSV back into `(t, valid, test)` rows.
pub fn read_curve(path: &Path) -> Result<Vec<(usize, Option<f64>, Option<f64>)>, ExperimentError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            continue;
        }
        let bad = || ExperimentError::Config(format!("{}: malformed line {}", path.display(), i + 1));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>, ExperimentError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        rows.push((parts[0].parse().map_err(|_| bad())?, opt(parts[1])?, opt(parts[2])?));
    }
    Ok(rows)
}

/// Regret of parsed curve rows against a gold nDCG, on the test column if
/// `test` and the validation column otherwise.
pub fn regret_from_curve(rows: &[(usize, Option<f64>, Option<f64>)], gold: f64, test: bool) -> Option<f64> {
    let pts: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|&(t, v, te)| if test { te } else { v }.map(|x| (t, x)))
        .collect();
    regret(&pts, gold)
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for v in values {
        total += (*v)?;
    }
    Some(total / values.len() as f64)
}

fn build_tables(cfg: &ExperimentConfig, cells: &[CellSummary]) -> Vec<RegretTable> {
    let mut tables = Vec::new();
    for &gamma in &cfg.bias.gammas {
        for &batch_size in &cfg.batch_sizes {
            for split in ["test", "valid"] {
                let rows = cfg
                    .methods
                    .iter()
                    .map(|&method| TableRow {
                        method,
                        values: cfg
                            .optimizers
                            .iter()
                            .map(|&opt| {
                                let vals: Vec<Option<f64>> = cells
                                    .iter()
                                    .filter(|c| {
                                        c.gamma == gamma
                                            && c.batch_size == batch_size
                                            && c.method == method
                                            && c.optimizer == opt
                                    })
                                    .map(|c| {
                                        if split == "test" {
                                            c.regret_test_x100
                                        } else {
                                            c.regret_valid_x100
                                        }
                                    })
                                    .collect();
                                mean_of(&vals)
                            })
                            .collect(),
                    })
                    .collect();
                tables.push(RegretTable {
                    gamma,
                    batch_size,
                    split: split.to_string(),
                    columns: cfg.optimizers.clone(),
                    rows,
                });
            }
        }
    }
    tables
}

struct Sweep {
    summaries: Vec<CellSummary>,
    grids: Vec<GridReport>,
    contexts: Vec<SeedContext>,
    all_divergent: Vec<String>,
}

fn sweep(cfg: &ExperimentConfig, write_curves: bool) -> Result<Sweep, ExperimentError> {
    cfg.validate()?;
    let pool = cfg.pool()?;
    let contexts = pool.install(|| prepare(cfg, true))?;
    write_config_echo(cfg)?;
    let curve_dir = cfg.out_dir.join("curves");
    if write_curves {
        create_dir(&curve_dir)?;
    }
    let keys = cells(cfg);
    let outcomes: Vec<Result<CellOutcome, ExperimentError>> =
        pool.install(|| keys.par_iter().map(|c| run_cell(cfg, &contexts[c.seed_index], c)).collect());

    let mut summaries = Vec::new();
    let mut grids = Vec::new();
    let mut all_divergent = Vec::new();
    for (c, outcome) in keys.iter().zip(outcomes) {
        let gamma = cfg.bias.gammas[c.gamma_index];
        let seed = cfg.seeds[c.seed_index];
        let mut summary = CellSummary {
            method: c.method,
            optimizer: c.optimizer,
            batch_size: c.batch_size,
            gamma,
            seed,
            status: CellStatus::AllDivergent,
            eta: None,
            divergent_at: None,
            regret_valid_x100: None,
            regret_test_x100: None,
            final_ndcg_valid: None,
            final_ndcg_test: None,
        };
        let mut report = GridReport {
            method: c.method,
            optimizer: c.optimizer,
            batch_size: c.batch_size,
            gamma,
            seed,
            best_eta: None,
            entries: Vec::new(),
        };
        match outcome? {
            CellOutcome::AllDivergent(entries) => {
                all_divergent.push(cell_label(cfg, c));
                report.entries = entries.iter().map(GridRow::from).collect();
            }
            CellOutcome::Trained { result, grid } => {
                if write_curves {
                    let path = curve_dir.join(curve_file_name(c.method, c.optimizer, c.batch_size, gamma, seed));
                    write_curve(&path, &result)?;
                }
                let last = result.checkpoints.last();
                summary.status = if result.is_divergent() {
                    CellStatus::Divergent
                } else {
                    CellStatus::Ok
                };
                summary.eta = Some(result.config.eta);
                summary.divergent_at = result.divergent_at;
                summary.regret_valid_x100 = result.regret_valid.map(|r| r * 100.0);
                summary.regret_test_x100 = result.regret_test.map(|r| r * 100.0);
                summary.final_ndcg_valid = last.and_then(|c| c.ndcg_valid);
                summary.final_ndcg_test = last.and_then(|c| c.ndcg_test);
                report.best_eta = Some(result.config.eta);
                report.entries = grid.unwrap_or_default().iter().map(GridRow::from).collect();
            }
        }
        summaries.push(summary);
        grids.push(report);
    }
    Ok(Sweep {
        summaries,
        grids,
        contexts,
        all_divergent,
    })
}

fn seed_summaries(contexts: &[SeedContext]) -> Vec<SeedSummary> {
    contexts
        .iter()
        .map(|ctx| SeedSummary {
            seed: ctx.seed,
            gold_ndcg_valid: ctx.gold_ndcg.and_then(|g| g.valid),
            gold_ndcg_test: ctx.gold_ndcg.and_then(|g| g.test),
            policy_ndcg_valid: ctx.policy_ndcg.valid,
            policy_ndcg_test: ctx.policy_ndcg.test,
        })
        .collect()
}

/// Trains every cell, writing curves, `summary.json` and `grid.json`.
/// Returns the summary; an all-divergent cell is recorded and then
/// reported as an error after the files are written.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, ExperimentError> {
    let sw = sweep(cfg, true)?;
    let summary = TrainSummary {
        seeds: seed_summaries(&sw.contexts),
        tables: build_tables(cfg, &sw.summaries),
        cells: sw.summaries,
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    if cfg.eta.grid().is_some() {
        write_json(&cfg.out_dir.join("grid.json"), &sw.grids)?;
    }
    if !sw.all_divergent.is_empty() {
        return Err(ExperimentError::AllDivergent {
            cells: sw.all_divergent,
        });
    }
    Ok(summary)
}

/// Learning-rate search only: per-cell regrets for every grid value in
/// `grid.json`.
pub fn cmd_grid(cfg: &ExperimentConfig) -> Result<Vec<GridReport>, ExperimentError> {
    let mut cfg = cfg.clone();
    if cfg.eta.grid().is_none() {
        // A fixed eta is a grid of one.
        if let EtaSpec::Fixed(e) = cfg.eta {
            cfg.eta = EtaSpec::Grid(vec![e]);
        }
    }
    let sw = sweep(&cfg, false)?;
    write_json(&cfg.out_dir.join("grid.json"), &sw.grids)?;
    if !sw.all_divergent.is_empty() {
        return Err(ExperimentError::AllDivergent {
            cells: sw.all_divergent,
        });
    }
    Ok(sw.grids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub problem_seed: u64,
    pub iterations: usize,
    pub w_star: [f64; 2],
    pub m: f64,
    pub m_bar: f64,
    pub ips_second_moment_at_origin: f64,
    pub counter_sample_second_moment_at_origin: f64,
    pub rows: Vec<ToySummaryRow<f64>>,
}

/// Writes `toy_trajectories.csv` and `toy_summary.json`.
pub fn cmd_toy(cfg: &ExperimentConfig) -> Result<ToyReport, ExperimentError> {
    let toy = &cfg.toy;
    if toy.seeds.is_empty() || toy.etas.is_empty() || toy.iterations == 0 {
        return Err(ExperimentError::Config(
            "toy needs at least one eta, one seed and one iteration".into(),
        ));
    }
    if toy.etas.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(ExperimentError::Config("toy etas must be finite and >= 0".into()));
    }
    let problem = generate_toy::<f64>(toy.problem_seed);
    let trajectories = run_toy_comparison(&problem, &toy.etas, toy.iterations, &toy.seeds);
    write_config_echo(cfg)?;

    let mut csv = String::from("method,eta,seed,t,w1,w2,dist_to_wstar\n");
    for tr in &trajectories {
        for (i, w) in tr.points.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                tr.method.name(),
                tr.eta,
                tr.seed,
                i + 1,
                w[0],
                w[1],
                problem.distance_to_optimum(w)
            ));
        }
    }
    let path = cfg.out_dir.join("toy_trajectories.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;

    let stats = propensity_stats(&problem.propensities)?;
    let moments = gradient_moments(&problem, &[0.0, 0.0]);
    let report = ToyReport {
        problem_seed: toy.problem_seed,
        iterations: toy.iterations,
        w_star: problem.w_star,
        m: stats.m,
        m_bar: stats.m_bar,
        ips_second_moment_at_origin: moments.ips_second_moment,
        counter_sample_second_moment_at_origin: moments.counter_sample_second_moment,
        rows: summarize_toy(&problem, &trajectories),
    };
    write_json(&cfg.out_dir.join("toy_summary.json"), &report)?;
    Ok(report)
}

/// Counts of `1/p` per power-of-two bucket `[2^k, 2^(k+1))`, ascending `k`.
pub fn weight_histogram(propensities: &[f64]) -> Vec<(i32, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for &p in propensities {
        let w = 1.0 / p;
        let mut k = w.log2().floor() as i32;
        // log2 can land one bucket off near exact powers of two.
        if 2f64.powi(k) > w {
            k -= 1;
        } else if 2f64.powi(k + 1) <= w {
            k += 1;
        }
        *counts.entry(k).or_insert(0usize) += 1;
    }
    counts.into_iter().collect()
}

/// Human-readable M, M̄ and weight histogram of a click-log file.
pub fn cmd_stats(path: &Path) -> Result<String, ExperimentError> {
    let f = File::open(path).map_err(io_err(path))?;
    let log: ClickLog<f64> = read_click_log(BufReader::new(f))?;
    let props = log.propensities();
    let st = propensity_stats(&props)?;
    let mut out = format!(
        "clicks: {}\ngamma: {}\npolicy: {}\nM = {}\nM̄ = {}\nM/M̄ = {}\n1/p histogram:\n",
        log.len(),
        log.gamma,
        log.policy_fingerprint,
        st.m,
        st.m_bar,
        st.ratio()
    );
    for (k, n) in weight_histogram(&props) {
        let lo = 2f64.powi(k);
        let hi = 2f64.powi(k + 1);
        out.push_str(&format!("  [{lo}, {hi}): {n}\n"));
    }
    Ok(out)
}
