//! Sampling clicks proportionally to their inverse propensity with Vose's
//! alias method: O(n) construction, two uniforms per draw.

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::simulation::ClickLog;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("cannot sample from an empty set")]
    Empty,
    #[error("propensity at index {index} is {value}; propensities must be finite and > 0")]
    InvalidPropensity { index: usize, value: f64 },
    #[error("probability at index {index} is {value}; must be finite and > 0")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
}

/// A strictly positive distribution over `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution<F> {
    probs: Vec<F>,
}

impl<F: Scalar> SamplingDistribution<F> {
    pub fn new(probs: Vec<F>) -> Result<Self, SamplingError> {
        if probs.is_empty() {
            return Err(SamplingError::Empty);
        }
        for (index, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && p > F::zero()) {
                return Err(SamplingError::InvalidProbability {
                    index,
                    value: p.as_f64(),
                });
            }
        }
        let sum: f64 = probs.iter().map(|p| p.as_f64()).sum();
        let tol = 1e-12 + 4.0 * probs.len() as f64 * F::epsilon().as_f64();
        if (sum - 1.0).abs() > tol {
            return Err(SamplingError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[F] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `P(i) = (1/p_i) / Σ_j (1/p_j)`.
pub fn ips_distribution_from_propensities<F: Scalar>(
    propensities: &[F],
) -> Result<SamplingDistribution<F>, SamplingError> {
    if propensities.is_empty() {
        return Err(SamplingError::Empty);
    }
    let mut weights = Vec::with_capacity(propensities.len());
    for (index, &p) in propensities.iter().enumerate() {
        if !(p.is_finite() && p > F::zero()) {
            return Err(SamplingError::InvalidPropensity {
                index,
                value: p.as_f64(),
            });
        }
        weights.push(p.recip());
    }
    let total = weights.iter().fold(F::zero(), |a, &b| a + b);
    SamplingDistribution::new(weights.into_iter().map(|w| w / total).collect())
}

pub fn ips_distribution<F: Scalar>(log: &ClickLog<F>) -> Result<SamplingDistribution<F>, SamplingError> {
    let props: Vec<F> = log.entries.iter().map(|e| e.propensity).collect();
    ips_distribution_from_propensities(&props)
}

// Packed to 12 bytes for f64: the table is hit at random, so a smaller
// footprint means fewer cache and TLB misses on large logs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[repr(C, packed)]
struct Slot<F: Copy> {
    prob: F,
    alias: u32,
}

/// Walker/Vose alias table. Slot `i` keeps itself with probability
/// `prob(i)` and otherwise yields `alias(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable<F: Scalar> {
    // prob and alias interleaved so a draw touches one cache line.
    slots: Vec<Slot<F>>,
}

impl<F: Scalar> AliasTable<F> {
    pub fn new(dist: &SamplingDistribution<F>) -> Self {
        let n = dist.len();
        assert!(n <= u32::MAX as usize, "alias table limited to u32 indices");
        let nf = F::from_count(n);
        let mut scaled: Vec<F> = dist.probs().iter().map(|&p| p * nf).collect();
        let mut slots: Vec<Slot<F>> = (0..n)
            .map(|i| Slot {
                prob: F::one(),
                alias: i as u32,
            })
            .collect();

        let (mut small, mut large): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&i| scaled[i] < F::one());

        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            slots[s] = Slot {
                prob: scaled[s],
                alias: l as u32,
            };
            // (a + b) - 1 rather than a - (1 - b): keeps the donor's
            // residual exact to one rounding.
            scaled[l] = (scaled[l] + scaled[s]) - F::one();
            if scaled[l] < F::one() {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers on either list are 1 up to rounding.
        for i in small.into_iter().chain(large) {
            slots[i] = Slot {
                prob: F::one(),
                alias: i as u32,
            };
        }
        Self { slots }
    }

    pub fn from_propensities(propensities: &[F]) -> Result<Self, SamplingError> {
        Ok(Self::new(&ips_distribution_from_propensities(propensities)?))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn prob(&self, i: usize) -> F {
        self.slots[i].prob
    }

    pub fn alias(&self, i: usize) -> usize {
        self.slots[i].alias as usize
    }

    /// Probability of each index implied by the table.
    pub fn reconstruct(&self) -> Vec<F> {
        let mut mass: Vec<F> = self.slots.iter().map(|s| s.prob).collect();
        for s in &self.slots {
            mass[s.alias as usize] += F::one() - s.prob;
        }
        let nf = F::from_count(self.len());
        mass.into_iter().map(|m| m / nf).collect()
    }

    /// Draws one index using exactly two uniform `u64` words: slot, then coin.
    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.slots.len() as u128;
        // Multiply-shift maps a 64-bit word onto 0..n without a division.
        let i = ((rng.next_u64() as u128 * n) >> 64) as usize;
        let coin: f64 = rng.random();
        let slot = self.slots[i];
        // Branch-free select keeps consecutive draws independent, so cache
        // misses on large tables overlap.
        let keep = usize::from(coin < slot.prob.as_f64());
        keep * i + (1 - keep) * slot.alias as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> SamplingDistribution<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = w.iter().sum();
        SamplingDistribution::new(w.into_iter().map(|x| x / total).collect()).unwrap()
    }

    fn max_reconstruction_error(table: &AliasTable<f64>, dist: &SamplingDistribution<f64>) -> f64 {
        table
            .reconstruct()
            .iter()
            .zip(dist.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ips_distribution_examples() {
        let d = ips_distribution_from_propensities(&[0.5f64, 0.25]).unwrap();
        assert!((d.probs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.probs()[1] - 2.0 / 3.0).abs() < 1e-15);
        let d = ips_distribution_from_propensities(&[0.3f64; 5]).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let d = ips_distribution_from_propensities(&[0.7]).unwrap();
        assert_eq!(d.probs(), &[1.0]);
    }

    #[test]
    fn ips_distribution_rejects_bad_propensities() {
        assert_eq!(
            ips_distribution_from_propensities(&[0.5, 0.0]),
            Err(SamplingError::InvalidPropensity {
                index: 1,
                value: 0.0
            })
        );
        assert!(ips_distribution_from_propensities(&[-0.1f64]).is_err());
        assert_eq!(
            ips_distribution_from_propensities::<f64>(&[]),
            Err(SamplingError::Empty)
        );
    }

    #[test]
    fn distribution_validation() {
        assert!(SamplingDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(SamplingDistribution::new(vec![1.0, 0.0]).is_err());
        assert!(SamplingDistribution::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn uniform_table_keeps_every_slot() {
        let d = SamplingDistribution::new(vec![0.25; 4]).unwrap();
        let t = AliasTable::new(&d);
        assert!((0..4).all(|i| t.prob(i) == 1.0));
    }

    #[test]
    fn two_point_table_reconstructs() {
        let d = SamplingDistribution::new(vec![0.25, 0.75]).unwrap();
        let t = AliasTable::new(&d);
        assert!(max_reconstruction_error(&t, &d) <= 1e-12);
        assert_eq!(t.alias(0), 1);
    }

    #[test]
    fn thousand_element_table_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dist(&mut rng, 1000);
        let t = AliasTable::new(&d);
        assert!(max_reconstruction_error(&t, &d) < 1e-12);
    }

    #[test]
    fn singleton_always_zero() {
        let t = AliasTable::new(&SamplingDistribution::new(vec![1.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| t.draw(&mut rng) == 0));
    }

    #[test]
    fn draw_consumes_two_uniforms() {
        let d = SamplingDistribution::new(vec![0.1, 0.2, 0.7]).unwrap();
        let t = AliasTable::new(&d);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            t.draw(&mut a);
            b.next_u64();
            b.next_u64();
        }
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn uniform_pair_frequencies_within_band() {
        let t = AliasTable::new(&SamplingDistribution::new(vec![0.5, 0.5]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 1_000_000;
        let ones = (0..draws).filter(|_| t.draw(&mut rng) == 1).count();
        let f = ones as f64 / draws as f64;
        assert!((0.497..=0.503).contains(&f), "{f}");
    }

    #[test]
    fn third_two_thirds_tv_distance() {
        let d = ips_distribution_from_propensities(&[0.5, 0.25]).unwrap();
        let t = AliasTable::new(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let draws = 1_000_000;
        let mut counts = [0usize; 2];
        for _ in 0..draws {
            counts[t.draw(&mut rng)] += 1;
        }
        let tv = 0.5
            * counts
                .iter()
                .zip([1.0 / 3.0, 2.0 / 3.0])
                .map(|(&c, p)| (c as f64 / draws as f64 - p).abs())
                .sum::<f64>();
        assert!(tv <= 0.005, "{tv}");
    }

    #[test]
    fn f32_tables_work() {
        let t = AliasTable::<f32>::from_propensities(&[0.5, 0.25, 1.0]).unwrap();
        let r = t.reconstruct();
        assert!((r[1] - 4.0 / 7.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn reconstruction_invariant(seed in any::<u64>(), n in 1usize..=1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_dist(&mut rng, n);
            let t = AliasTable::new(&d);
            prop_assert!(max_reconstruction_error(&t, &d) <= 1e-12);
            prop_assert!((0..n).all(|i| t.alias(i) < n));
            prop_assert!((0..n).all(|i| (0.0..=1.0).contains(&t.prob(i))));
        }
    }
}
