//! Box-constrained global optimization: differential evolution, scatter
//! search, a quasi-Newton local polisher, and the hybrid loop that
//! interleaves them.
//!
//! Every routine takes the objective as `Fn(&[f64]) -> f64 + Sync` and keeps
//! a strict separation between random number draws (always serial, in a
//! fixed order) and objective evaluations (batched, possibly parallel).
//! That separation is what makes results bit-reproducible for a given seed
//! regardless of thread count.

mod de;
mod hybrid;
mod refine;
mod scatter;

pub use de::{de_minimize, de_mutation, DeConfig, DeState};
pub use hybrid::{hybrid_minimize, hybrid_minimize_from, HybridConfig};
pub use refine::{local_refine, RefineConfig};
pub use scatter::{scatter_minimize, visit_probabilities, ScatterConfig, ScatterState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular search region with strictly ordered finite bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Config(format!(
                "bounds need matching nonzero lengths, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || !(l < u) {
                return Err(Error::Config(format!(
                    "dimension {i} needs finite lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| v >= l && v <= u)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| v.clamp(l, u))
            .collect()
    }

    /// Folds a point into the box by mirror reflection at the faces, however
    /// far outside it lies. Non-finite components land at the dimension
    /// midpoint so one overflowed mutation cannot poison a population.
    pub fn reflect(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (l, u) = (self.lower[i], self.upper[i]);
                if !v.is_finite() {
                    return 0.5 * (l + u);
                }
                let w = u - l;
                let mut r = (v - l).rem_euclid(2.0 * w);
                if r > w {
                    r = 2.0 * w - r;
                }
                l + r
            })
            .collect()
    }

    /// Root-mean-square of the per-dimension offsets from the box center,
    /// each scaled by that dimension's width. Zero at the center, 0.5 at any
    /// corner.
    pub fn normalized_distance_to_center(&self, x: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (i, &v) in x.iter().enumerate() {
            let c = 0.5 * (self.lower[i] + self.upper[i]);
            let z = (v - c) / self.width(i);
            sum += z * z;
        }
        (sum / x.len() as f64).sqrt()
    }

    /// Distance between two points where each coordinate is scaled by the
    /// box width; used by the scatter search diversity ranking.
    pub fn normalized_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.dim() {
            let z = (a[i] - b[i]) / self.width(i);
            sum += z * z;
        }
        (sum / self.dim() as f64).sqrt()
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| rng.random_range(self.lower[i]..self.upper[i]))
            .collect()
    }
}

/// Why a search loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    /// The evaluation budget ran out.
    BudgetExhausted,
    /// All configured generations or passes completed.
    GenerationsExhausted,
    /// The best value dropped at or below the configured target.
    TargetReached,
    /// Gradient or step tolerances were met by the local refiner.
    Converged,
    /// The search could not improve on its starting value.
    NoImprovement,
}

/// Outcome of one optimizer run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    pub termination: TerminationReason,
    /// Best value after each generation or pass, in order.
    pub trace: Vec<f64>,
}

/// NaN objective values are treated as worst-possible so that comparisons
/// stay total; infinities pass through.
pub(crate) fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Order-preserving batch evaluation. RNG-free by construction, so it may
/// run on any number of threads without affecting results.
pub(crate) fn evaluate_batch<F>(objective: &F, points: &[Vec<f64>]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    use rayon::prelude::*;
    points
        .par_iter()
        .map(|p| sanitize(objective(p)))
        .collect()
}

/// Standard unconstrained test objectives, minimized at known points.
pub mod benchfns {
    /// Sum of squares; global minimum 0 at the origin.
    pub fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|&v| v * v).sum()
    }

    /// Highly multimodal with a lattice of local minima; global minimum 0 at
    /// the origin.
    pub fn rastrigin(x: &[f64]) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        10.0 * x.len() as f64
            + x.iter()
                .map(|&v| v * v - 10.0 * (two_pi * v).cos())
                .sum::<f64>()
    }

    /// Banana-valley objective; global minimum 0 at (1, ..., 1).
    pub fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_box(dim: usize) -> SearchBox {
        SearchBox::new(vec![0.0; dim], vec![1.0; dim]).unwrap()
    }

    #[test]
    fn rejects_malformed_bounds() {
        assert!(SearchBox::new(vec![], vec![]).is_err());
        assert!(SearchBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(SearchBox::new(vec![1.0], vec![0.0]).is_err());
        assert!(SearchBox::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(SearchBox::new(vec![f64::NEG_INFINITY], vec![1.0]).is_err());
    }

    #[test]
    fn reflection_folds_like_a_mirror() {
        let b = SearchBox::new(vec![0.0], vec![10.0]).unwrap();
        assert_relative_eq!(b.reflect(&[-3.0])[0], 3.0);
        assert_relative_eq!(b.reflect(&[13.0])[0], 7.0);
        assert_relative_eq!(b.reflect(&[23.0])[0], 3.0); // two folds
        assert_relative_eq!(b.reflect(&[7.0])[0], 7.0);
        assert_relative_eq!(b.reflect(&[f64::NAN])[0], 5.0);
        assert_relative_eq!(b.reflect(&[f64::INFINITY])[0], 5.0);
    }

    #[test]
    fn center_distance_is_zero_at_center_and_half_at_corner() {
        let b = SearchBox::new(vec![0.0, -2.0], vec![4.0, 2.0]).unwrap();
        assert_relative_eq!(b.normalized_distance_to_center(&b.center()), 0.0);
        assert_relative_eq!(b.normalized_distance_to_center(&[0.0, -2.0]), 0.5);
        assert_relative_eq!(b.normalized_distance_to_center(&[4.0, 2.0]), 0.5);
    }

    #[test]
    fn benchmark_minima_are_where_advertised() {
        assert_relative_eq!(benchfns::sphere(&[0.0; 5]), 0.0);
        assert_relative_eq!(benchfns::rastrigin(&[0.0; 5]), 0.0, epsilon = 1e-12);
        assert_relative_eq!(benchfns::rosenbrock(&[1.0; 4]), 0.0);
        assert!(benchfns::rastrigin(&[1.0, 0.0]) > 0.5); // nearest lattice minimum
    }

    #[test]
    fn nan_objective_values_become_infinite() {
        assert_eq!(sanitize(f64::NAN), f64::INFINITY);
        assert_eq!(sanitize(3.0), 3.0);
        assert_eq!(sanitize(f64::NEG_INFINITY), f64::NEG_INFINITY);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reflection_always_lands_inside(v in -1e6f64..1e6, dim in 1usize..5) {
            let b = unit_box(dim);
            let x = vec![v; dim];
            let r = b.reflect(&x);
            prop_assert!(b.contains(&r));
        }

        #[test]
        fn clamp_always_lands_inside(v in -1e6f64..1e6) {
            let b = SearchBox::new(vec![-3.0], vec![7.5]).unwrap();
            prop_assert!(b.contains(&b.clamp(&[v])));
        }
    }
}
