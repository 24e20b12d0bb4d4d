//! Failure-weighted motion sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draws clip `i` with probability `∝ (failures_i + ε) / (samples_i + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSampler {
    pub failures: Vec<u64>,
    pub samples: Vec<u64>,
    pub epsilon: f64,
}

impl MotionSampler {
    pub fn new(n_clips: usize, epsilon: f64) -> Result<Self> {
        if n_clips == 0 {
            return Err(Error::Config("motion sampler needs at least one clip".into()));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("sampler epsilon must be finite and > 0, got {epsilon}")));
        }
        Ok(Self {
            failures: vec![0; n_clips],
            samples: vec![0; n_clips],
            epsilon,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn weights(&self) -> Vec<f64> {
        self.failures
            .iter()
            .zip(&self.samples)
            .map(|(&f, &s)| (f as f64 + self.epsilon) / (s as f64 + 1.0))
            .collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        WeightedIndex::new(self.weights()).expect("weights are positive").sample(rng)
    }

    /// Records the outcome of one finished episode on clip `clip`.
    pub fn record(&mut self, clip: usize, failed: bool) {
        self.samples[clip] += 1;
        self.failures[clip] += u64::from(failed);
    }

    pub fn total_failures(&self) -> u64 {
        self.failures.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_sampler_is_uniform() {
        let s = MotionSampler::new(4, 0.5).unwrap();
        assert_eq!(s.probabilities(), vec![0.25; 4]);
    }

    #[test]
    fn probabilities_follow_failure_rates() {
        let mut s = MotionSampler::new(3, 1e-12).unwrap();
        s.samples = vec![3, 3, 3];
        s.failures = vec![2, 1, 1];
        let p = s.probabilities();
        for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn draws_match_target_within_three_sigma() {
        let mut s = MotionSampler::new(4, 0.5).unwrap();
        s.samples = vec![10, 4, 7, 1];
        s.failures = vec![6, 0, 2, 1];
        let p = s.probabilities();
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..n {
            counts[s.sample(&mut rng)] += 1;
        }
        for i in 0..4 {
            let expected = n as f64 * p[i];
            let sigma = (n as f64 * p[i] * (1.0 - p[i])).sqrt();
            assert!((counts[i] as f64 - expected).abs() <= 3.0 * sigma, "clip {i}: {} vs {expected} ± {sigma}", counts[i]);
        }
    }

    #[test]
    fn rejects_empty_and_bad_epsilon() {
        assert!(MotionSampler::new(0, 0.5).is_err());
        assert!(MotionSampler::new(2, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_are_normalized_and_positive(
            counts in prop::collection::vec((0u64..50, 0u64..50), 1..8),
            eps in 1e-6f64..2.0,
        ) {
            let mut s = MotionSampler::new(counts.len(), eps).unwrap();
            for (i, (a, b)) in counts.iter().enumerate() {
                s.samples[i] = a + b;
                s.failures[i] = *a;
            }
            let p = s.probabilities();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }
    }
}
