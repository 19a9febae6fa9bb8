//! Two-dimensional IPS-weighted least squares: 50 noiseless samples, one
//! propensity per sample, and a comparison of IPS-weighted SGD against
//! CounterSample on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::optimization::Method;
use crate::sampling::AliasTable;
use crate::scalar::Scalar;

pub const TOY_SAMPLES: usize = 50;
pub const TOY_W_STAR: [f64; 2] = [0.973, 1.144];
pub const TOY_PROPENSITY_MIN: f64 = 0.05;
pub const TOY_PROPENSITY_MAX: f64 = 1.0;
pub const TOY_ITERATIONS: usize = 50;
pub const DEFAULT_TOY_ETAS: [f64; 4] = [0.001, 0.005, 0.01, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ToyProblem<F: Scalar> {
    pub x: Vec<[F; 2]>,
    pub y: Vec<F>,
    pub propensities: Vec<F>,
    pub w_star: [F; 2],
}

#[inline]
fn dot2<F: Scalar>(a: &[F; 2], b: &[F; 2]) -> F {
    a[0] * b[0] + a[1] * b[1]
}

fn dist2<F: Scalar>(a: &[F; 2], b: &[F; 2]) -> F {
    let (d0, d1) = (a[0] - b[0], a[1] - b[1]);
    (d0 * d0 + d1 * d1).sqrt()
}

pub fn generate_toy<F: Scalar>(seed: u64) -> ToyProblem<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_star = [F::lit(TOY_W_STAR[0]), F::lit(TOY_W_STAR[1])];
    let mut x = Vec::with_capacity(TOY_SAMPLES);
    let mut propensities = Vec::with_capacity(TOY_SAMPLES);
    for _ in 0..TOY_SAMPLES {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        x.push([F::lit(a), F::lit(b)]);
        propensities.push(F::lit(rng.random_range(TOY_PROPENSITY_MIN..TOY_PROPENSITY_MAX)));
    }
    // Same expression as the residual so f_i(w*) is exactly zero.
    let y = x.iter().map(|xi| dot2(xi, &w_star)).collect();
    ToyProblem {
        x,
        y,
        propensities,
        w_star,
    }
}

impl<F: Scalar> ToyProblem<F> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    fn residual(&self, i: usize, w: &[F; 2]) -> F {
        dot2(&self.x[i], w) - self.y[i]
    }

    /// `f_i(w) = (⟨x_i, w⟩ - y_i)²`.
    pub fn sample_loss(&self, i: usize, w: &[F; 2]) -> F {
        let r = self.residual(i, w);
        r * r
    }

    /// `∇f_i(w) = 2(⟨x_i, w⟩ - y_i) x_i`.
    pub fn sample_grad(&self, i: usize, w: &[F; 2]) -> [F; 2] {
        let c = F::lit(2.0) * self.residual(i, w);
        [c * self.x[i][0], c * self.x[i][1]]
    }

    pub fn m_bar(&self) -> F {
        let n = F::from_count(self.len());
        self.propensities.iter().map(|p| p.recip()).sum::<F>() / n
    }

    pub fn distance_to_optimum(&self, w: &[F; 2]) -> F {
        dist2(w, &self.w_star)
    }
}

/// `R_IPS(w) = (1/n) Σ (1/p_i) f_i(w)`.
pub fn toy_loss<F: Scalar>(problem: &ToyProblem<F>, w: &[F; 2]) -> F {
    let n = F::from_count(problem.len());
    (0..problem.len())
        .map(|i| problem.sample_loss(i, w) / problem.propensities[i])
        .sum::<F>()
        / n
}

pub fn toy_grad<F: Scalar>(problem: &ToyProblem<F>, w: &[F; 2]) -> [F; 2] {
    let n = F::from_count(problem.len());
    let mut g = [F::zero(); 2];
    for i in 0..problem.len() {
        let gi = problem.sample_grad(i, w);
        let p = problem.propensities[i];
        g[0] += gi[0] / p;
        g[1] += gi[1] / p;
    }
    [g[0] / n, g[1] / n]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ToyTrajectory<F: Scalar> {
    pub method: Method,
    pub eta: F,
    pub seed: u64,
    /// `w_1 = 0, w_2, ...`; a divergent path ends with its first non-finite iterate.
    pub points: Vec<[F; 2]>,
    pub divergent_at: Option<usize>,
}

impl<F: Scalar> ToyTrajectory<F> {
    /// Distance of the last iterate to `w*`; infinite for divergent paths.
    pub fn final_distance(&self, problem: &ToyProblem<F>) -> F {
        match (self.divergent_at, self.points.last()) {
            (None, Some(w)) => problem.distance_to_optimum(w),
            _ => F::infinity(),
        }
    }
}

fn run_trajectory<F: Scalar>(
    problem: &ToyProblem<F>,
    table: &AliasTable<F>,
    method: Method,
    eta: F,
    iterations: usize,
    seed: u64,
) -> ToyTrajectory<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_bar = problem.m_bar();
    let mut w = [F::zero(); 2];
    let mut points = Vec::with_capacity(iterations + 1);
    points.push(w);
    let mut divergent_at = None;
    for t in 1..=iterations {
        let (i, scale) = match method {
            Method::CounterSample => (table.draw(&mut rng), m_bar),
            Method::IpsSgd => {
                let i = rng.random_range(0..problem.len());
                (i, problem.propensities[i].recip())
            }
            Method::Biased => (rng.random_range(0..problem.len()), F::one()),
        };
        let g = problem.sample_grad(i, &w);
        w = [w[0] - eta * scale * g[0], w[1] - eta * scale * g[1]];
        points.push(w);
        if !(w[0].is_finite() && w[1].is_finite()) {
            divergent_at = Some(t);
            break;
        }
    }
    ToyTrajectory {
        method,
        eta,
        seed,
        points,
        divergent_at,
    }
}

/// IPS-weighted SGD and CounterSample paths for every `(eta, seed)` pair,
/// ordered by eta, then seed, then method.
pub fn run_toy_comparison<F: Scalar>(
    problem: &ToyProblem<F>,
    etas: &[F],
    iterations: usize,
    seeds: &[u64],
) -> Vec<ToyTrajectory<F>> {
    let table = AliasTable::from_propensities(&problem.propensities).expect("toy propensities are positive");
    let mut out = Vec::with_capacity(etas.len() * seeds.len() * 2);
    for &eta in etas {
        for &seed in seeds {
            for method in [Method::IpsSgd, Method::CounterSample] {
                out.push(run_trajectory(problem, &table, method, eta, iterations, seed));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ToySummaryRow<F: Scalar> {
    pub method: Method,
    pub eta: F,
    /// `None` when any seed diverged.
    pub mean_final_distance: Option<F>,
    pub diverged_seeds: usize,
    pub final_distances: Vec<Option<F>>,
}

/// One row per `(method, eta)` in first-appearance order.
pub fn summarize_toy<F: Scalar>(problem: &ToyProblem<F>, trajectories: &[ToyTrajectory<F>]) -> Vec<ToySummaryRow<F>> {
    let mut rows: Vec<ToySummaryRow<F>> = Vec::new();
    for tr in trajectories {
        let d = tr.final_distance(problem);
        let d = d.is_finite().then_some(d);
        let row = match rows.iter_mut().find(|r| r.method == tr.method && r.eta == tr.eta) {
            Some(r) => r,
            None => {
                rows.push(ToySummaryRow {
                    method: tr.method,
                    eta: tr.eta,
                    mean_final_distance: None,
                    diverged_seeds: 0,
                    final_distances: Vec::new(),
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.final_distances.push(d);
    }
    for row in &mut rows {
        row.diverged_seeds = row.final_distances.iter().filter(|d| d.is_none()).count();
        if row.diverged_seeds == 0 && !row.final_distances.is_empty() {
            let n = F::from_count(row.final_distances.len());
            row.mean_final_distance = Some(row.final_distances.iter().map(|d| d.expect("finite")).sum::<F>() / n);
        }
    }
    rows
}

/// The eta with the smallest mean final distance for `method`; ties go to
/// the smaller eta, divergent etas are never chosen.
pub fn best_toy_eta<F: Scalar>(
    problem: &ToyProblem<F>,
    method: Method,
    etas: &[F],
    iterations: usize,
    seeds: &[u64],
) -> Option<F> {
    let table = AliasTable::from_propensities(&problem.propensities).expect("toy propensities are positive");
    let mut best: Option<(F, F)> = None;
    for &eta in etas {
        let mut total = F::zero();
        for &seed in seeds {
            total += run_trajectory(problem, &table, method, eta, iterations, seed).final_distance(problem);
        }
        if !total.is_finite() {
            continue;
        }
        best = match best {
            Some((be, bd)) if bd < total || (bd == total && be < eta) => Some((be, bd)),
            _ => Some((eta, total)),
        };
    }
    best.map(|(eta, _)| eta)
}

/// Exact first and second moments of the per-step gradient estimate at `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientMoments<F> {
    pub ips_mean: [F; 2],
    pub counter_sample_mean: [F; 2],
    /// `E‖g‖²` under uniform sampling with `(1/p_i)` weights.
    pub ips_second_moment: F,
    /// `E‖g‖²` under `P(i) ∝ 1/p_i` with `M̄` scaling.
    pub counter_sample_second_moment: F,
}

pub fn gradient_moments<F: Scalar>(problem: &ToyProblem<F>, w: &[F; 2]) -> GradientMoments<F> {
    let n = F::from_count(problem.len());
    let m_bar = problem.m_bar();
    let total_inv: F = problem.propensities.iter().map(|p| p.recip()).sum();
    let mut out = GradientMoments {
        ips_mean: [F::zero(); 2],
        counter_sample_mean: [F::zero(); 2],
        ips_second_moment: F::zero(),
        counter_sample_second_moment: F::zero(),
    };
    for i in 0..problem.len() {
        let g = problem.sample_grad(i, w);
        let sq = dot2(&g, &g);
        let inv_p = problem.propensities[i].recip();
        let q = inv_p / total_inv;
        for k in 0..2 {
            out.ips_mean[k] += inv_p * g[k] / n;
            out.counter_sample_mean[k] += q * m_bar * g[k];
        }
        out.ips_second_moment += inv_p * inv_p * sq / n;
        out.counter_sample_second_moment += q * m_bar * m_bar * sq;
    }
    out
}
