//! Differential evolution, rand/1/bin variant.
//!
//! Each generation builds one trial per member: a mutant
//! `v = x_r1 + F * (x_r2 - x_r3)` from three distinct other members, crossed
//! binomially with the member (one coordinate always comes from the mutant),
//! reflected into the box, then kept only if it does not score worse. The
//! per-member greedy selection makes every member's value non-increasing
//! over generations, which is a tested invariant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_batch, OptimResult, SearchBox, TerminationReason};
use crate::error::{Error, Result};

/// Differential evolution controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeConfig {
    pub population_size: usize,
    /// Amplification factor F applied to the member difference.
    pub amplification: f64,
    /// Binomial crossover probability CR.
    pub crossover_ratio: f64,
    pub max_generations: usize,
    pub max_evaluations: usize,
    pub target_value: Option<f64>,
    pub seed: u64,
}

impl DeConfig {
    /// Standard settings sized to the problem dimension: population
    /// `max(40, 10 * dim)`, F = 0.8, CR = 0.9.
    pub fn for_dim(dim: usize, seed: u64) -> Self {
        Self {
            population_size: (10 * dim).max(40),
            amplification: 0.8,
            crossover_ratio: 0.9,
            max_generations: 200,
            max_evaluations: usize::MAX,
            target_value: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::Config(format!(
                "differential evolution needs at least 4 members, got {}",
                self.population_size
            )));
        }
        if !(self.amplification >= 0.0 && self.amplification <= 2.0) {
            return Err(Error::Config(format!(
                "amplification factor must lie in [0, 2], got {}",
                self.amplification
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_ratio) {
            return Err(Error::Config(format!(
                "crossover ratio must lie in [0, 1], got {}",
                self.crossover_ratio
            )));
        }
        Ok(())
    }
}

/// Mutant vector `base + f * (a - b)`.
pub fn de_mutation(base: &[f64], a: &[f64], b: &[f64], f: f64) -> Vec<f64> {
    base.iter()
        .zip(a.iter().zip(b))
        .map(|(&x, (&p, &q))| x + f * (p - q))
        .collect()
}

/// Three indices in `0..n`, mutually distinct and distinct from `exclude`.
pub(crate) fn pick_three_distinct<R: Rng>(rng: &mut R, n: usize, exclude: usize) -> [usize; 3] {
    debug_assert!(n >= 4);
    let mut out = [exclude; 3];
    for k in 0..3 {
        loop {
            let cand = rng.random_range(0..n);
            if cand != exclude && !out[..k].contains(&cand) {
                out[k] = cand;
                break;
            }
        }
    }
    out
}

/// Live population; stepped one generation at a time so callers can
/// interleave other search phases or inject points between generations.
#[derive(Debug, Clone)]
pub struct DeState {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    rng: ChaCha8Rng,
    evaluations: usize,
    amplification: f64,
    crossover_ratio: f64,
}

impl DeState {
    /// Samples and scores the initial population.
    pub fn init<F>(objective: &F, bounds: &SearchBox, config: &DeConfig) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let points: Vec<Vec<f64>> = (0..config.population_size)
            .map(|_| bounds.sample_uniform(&mut rng))
            .collect();
        let values = evaluate_batch(objective, &points);
        Ok(Self {
            evaluations: points.len(),
            points,
            values,
            rng,
            amplification: config.amplification,
            crossover_ratio: config.crossover_ratio,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn best(&self) -> (usize, f64) {
        let mut idx = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[idx] {
                idx = i;
            }
        }
        (idx, self.values[idx])
    }

    /// Replaces the worst member with an externally scored point. Used to
    /// share discoveries from other search phases into the population.
    pub fn inject(&mut self, point: Vec<f64>, value: f64) {
        let mut worst = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[worst] {
                worst = i;
            }
        }
        if value < self.values[worst] {
            self.points[worst] = point;
            self.values[worst] = value;
        }
    }

    /// One generation. All random draws happen serially before the batched
    /// trial evaluation, so results do not depend on thread count. Returns
    /// true when any member improved.
    pub fn step<F>(&mut self, objective: &F, bounds: &SearchBox) -> bool
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let n = self.points.len();
        let dim = bounds.dim();
        let mut trials = Vec::with_capacity(n);
        for i in 0..n {
            let [r1, r2, r3] = pick_three_distinct(&mut self.rng, n, i);
            let mutant = de_mutation(
                &self.points[r1],
                &self.points[r2],
                &self.points[r3],
                self.amplification,
            );
            let j_rand = self.rng.random_range(0..dim);
            let mut trial = self.points[i].clone();
            for j in 0..dim {
                if j == j_rand || self.rng.random::<f64>() < self.crossover_ratio {
                    trial[j] = mutant[j];
                }
            }
            trials.push(bounds.reflect(&trial));
        }

        let trial_values = evaluate_batch(objective, &trials);
        self.evaluations += n;

        let mut improved = false;
        for (i, (trial, value)) in trials.into_iter().zip(trial_values).enumerate() {
            if value <= self.values[i] {
                improved |= value < self.values[i];
                self.points[i] = trial;
                self.values[i] = value;
            }
        }
        improved
    }
}

/// Runs differential evolution to completion under the configured limits.
pub fn de_minimize<F>(objective: &F, bounds: &SearchBox, config: &DeConfig) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut state = DeState::init(objective, bounds, config)?;
    let mut trace = Vec::with_capacity(config.max_generations);
    let mut termination = TerminationReason::GenerationsExhausted;

    for _ in 0..config.max_generations {
        if state.evaluations() + config.population_size > config.max_evaluations {
            termination = TerminationReason::BudgetExhausted;
            break;
        }
        state.step(objective, bounds);
        let (_, best) = state.best();
        trace.push(best);
        if config.target_value.is_some_and(|t| best <= t) {
            termination = TerminationReason::TargetReached;
            break;
        }
    }

    let (idx, best_value) = state.best();
    Ok(OptimResult {
        best_point: state.points[idx].clone(),
        best_value,
        evaluations: state.evaluations(),
        termination,
        trace,
    })
}
