//! Scatter search over a small elite reference set.
//!
//! Diversification splits every dimension into `m` segments and steers new
//! points toward rarely visited segments: segment `j` of dimension `i` is
//! chosen with probability proportional to `1 / f_ij`, where `f_ij` counts
//! prior visits. The reference set keeps the best points by objective in one
//! half and maximally spread points in the other; every pair is combined
//! through random line segments, and children replace the worst member when
//! they beat it. A pass with no replacement triggers regeneration of the
//! diverse half.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_batch, OptimResult, SearchBox, TerminationReason};
use crate::error::{Error, Result};

/// Scatter search controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterConfig {
    /// Segments per dimension in the diversification generator.
    pub segments: usize,
    /// Diverse candidates generated when building the reference set.
    pub first_population: usize,
    /// Reference set size; must be even, half fitness, half diversity.
    pub elite_count: usize,
    pub max_passes: usize,
    pub max_evaluations: usize,
    pub target_value: Option<f64>,
    pub seed: u64,
}

impl ScatterConfig {
    /// Standard settings: 4 segments per dimension, an initial diverse
    /// population of `10 * dim` (at least the reference set), 20 elites.
    pub fn for_dim(dim: usize, seed: u64) -> Self {
        let elite_count = 20;
        Self {
            segments: 4,
            first_population: (10 * dim).max(elite_count),
            elite_count,
            max_passes: 20,
            max_evaluations: usize::MAX,
            target_value: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.elite_count < 2 || self.elite_count % 2 != 0 {
            return Err(Error::Config(format!(
                "reference set size must be even and at least 2, got {}",
                self.elite_count
            )));
        }
        if self.first_population < self.segments {
            return Err(Error::Config(format!(
                "initial population ({}) must cover all {} segments",
                self.first_population, self.segments
            )));
        }
        if self.first_population < self.elite_count {
            return Err(Error::Config(format!(
                "initial population ({}) cannot fill a reference set of {}",
                self.first_population, self.elite_count
            )));
        }
        if self.segments < 2 {
            return Err(Error::Config(format!(
                "need at least 2 segments per dimension, got {}",
                self.segments
            )));
        }
        Ok(())
    }
}

/// Segment selection probabilities from visit counts: proportional to the
/// inverse count, so rarely visited segments are favored.
pub fn visit_probabilities(counts: &[f64]) -> Vec<f64> {
    debug_assert!(counts.iter().all(|&c| c > 0.0));
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|w| w / total).collect()
}

/// Frequency-steered diverse point source. The first `segments` vectors are
/// diagonal (every component of vector `j` lies in segment `j`), which
/// leaves exactly one visit in every cell of the count matrix; later vectors
/// sample segments by inverse visit frequency, updating counts per vector.
pub(crate) struct DiverseGenerator {
    counts: Vec<Vec<f64>>,
    emitted: usize,
}

impl DiverseGenerator {
    pub(crate) fn new(dim: usize, segments: usize) -> Self {
        Self {
            counts: vec![vec![0.0; segments]; dim],
            emitted: 0,
        }
    }

    #[cfg(test)]
    pub(crate) fn counts(&self) -> &[Vec<f64>] {
        &self.counts
    }

    pub(crate) fn next<R: Rng>(&mut self, rng: &mut R, bounds: &SearchBox) -> Vec<f64> {
        let m = self.counts[0].len();
        let dim = bounds.dim();
        let mut x = Vec::with_capacity(dim);
        for i in 0..dim {
            let seg = if self.emitted < m {
                self.emitted
            } else {
                let probs = visit_probabilities(&self.counts[i]);
                let u = rng.random::<f64>();
                let mut cum = 0.0;
                let mut chosen = m - 1;
                for (j, p) in probs.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        chosen = j;
                        break;
                    }
                }
                chosen
            };
            let w = bounds.width(i) / m as f64;
            let lo = bounds.lower()[i] + seg as f64 * w;
            x.push(rng.random_range(lo..lo + w));
            self.counts[i][seg] += 1.0;
        }
        self.emitted += 1;
        x
    }
}

/// The three line-segment combinations of a pair: with `d = r * (x2 - x1)`
/// componentwise, the children are `x1 - d` (outside, beyond the better
/// point), `x1 + d` (between), and `x2 + d` (outside, beyond the worse one).
pub(crate) fn combine_pair(x1: &[f64], x2: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d: Vec<f64> = r.iter().zip(x1.iter().zip(x2)).map(|(&ri, (&a, &b))| ri * (b - a)).collect();
    let t1 = x1.iter().zip(&d).map(|(&a, &di)| a - di).collect();
    let t2 = x1.iter().zip(&d).map(|(&a, &di)| a + di).collect();
    let t3 = x2.iter().zip(&d).map(|(&b, &di)| b + di).collect();
    (t1, t2, t3)
}

/// Live reference set, stepped one combination pass at a time.
pub struct ScatterState {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    generator: DiverseGenerator,
    rng: ChaCha8Rng,
    evaluations: usize,
}

impl ScatterState {
    pub fn init<F>(objective: &F, bounds: &SearchBox, config: &ScatterConfig) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut generator = DiverseGenerator::new(bounds.dim(), config.segments);
        let pool: Vec<Vec<f64>> = (0..config.first_population)
            .map(|_| generator.next(&mut rng, bounds))
            .collect();
        let pool_values = evaluate_batch(objective, &pool);
        let evaluations = pool.len();

        let (points, values) = build_refset(bounds, pool, pool_values, config.elite_count);
        Ok(Self {
            points,
            values,
            generator,
            rng,
            evaluations,
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

    fn worst(&self) -> usize {
        let mut idx = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[idx] {
                idx = i;
            }
        }
        idx
    }

    /// Replaces the worst member when the offered point beats it.
    pub fn inject(&mut self, point: Vec<f64>, value: f64) {
        let w = self.worst();
        if value < self.values[w] {
            self.points[w] = point;
            self.values[w] = value;
        }
    }

    /// One combination pass over every pair of the current reference set.
    /// Children counts depend on which halves the pair touches: two fitness
    /// members produce four children (the between-type twice), a mixed pair
    /// one of each type, two diversity members just two. Returns true when
    /// any child displaced a member.
    pub fn pass<F>(&mut self, objective: &F, bounds: &SearchBox) -> bool
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let n = self.points.len();
        let snapshot = self.points.clone();
        let snap_values = self.values.clone();

        // Fitness-half membership from the snapshot value ranking.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| snap_values[a].total_cmp(&snap_values[b]));
        let mut in_fit_half = vec![false; n];
        for &slot in order.iter().take(n / 2) {
            in_fit_half[slot] = true;
        }

        let dim = bounds.dim();
        let mut children: Vec<Vec<f64>> = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let (one, two) = if snap_values[a] <= snap_values[b] { (a, b) } else { (b, a) };
                let x1 = &snapshot[one];
                let x2 = &snapshot[two];
                let fit_members = in_fit_half[a] as usize + in_fit_half[b] as usize;

                let make = |state: &mut Self, which: u8| {
                    let r: Vec<f64> = (0..dim).map(|_| state.rng.random::<f64>()).collect();
                    let (t1, t2, t3) = combine_pair(x1, x2, &r);
                    match which {
                        0 => t1,
                        1 => t2,
                        _ => t3,
                    }
                };
                match fit_members {
                    2 => {
                        for which in [0u8, 1, 1, 2] {
                            let c = make(self, which);
                            children.push(bounds.reflect(&c));
                        }
                    }
                    1 => {
                        for which in [0u8, 1, 2] {
                            let c = make(self, which);
                            children.push(bounds.reflect(&c));
                        }
                    }
                    _ => {
                        let c = make(self, 1);
                        children.push(bounds.reflect(&c));
                        let which = if self.rng.random::<bool>() { 0 } else { 2 };
                        let c = make(self, which);
                        children.push(bounds.reflect(&c));
                    }
                }
            }
        }

        let child_values = evaluate_batch(objective, &children);
        self.evaluations += children.len();

        let mut replaced = false;
        for (child, value) in children.into_iter().zip(child_values) {
            let w = self.worst();
            if value < self.values[w] {
                self.points[w] = child;
                self.values[w] = value;
                replaced = true;
            }
        }
        replaced
    }

    /// Refreshes the worst half of the reference set with new
    /// frequency-steered diverse points. Called after a stalled pass.
    pub fn regenerate_diverse<F>(&mut self, objective: &F, bounds: &SearchBox)
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let n = self.points.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]));
        let refresh: Vec<usize> = order[n / 2..].to_vec();

        let fresh: Vec<Vec<f64>> = refresh
            .iter()
            .map(|_| self.generator.next(&mut self.rng, bounds))
            .collect();
        let fresh_values = evaluate_batch(objective, &fresh);
        self.evaluations += fresh.len();
        for ((slot, point), value) in refresh.into_iter().zip(fresh).zip(fresh_values) {
            self.points[slot] = point;
            self.values[slot] = value;
        }
    }
}

/// Best-by-objective half plus greedy max-min-distance diverse half.
fn build_refset(
    bounds: &SearchBox,
    pool: Vec<Vec<f64>>,
    pool_values: Vec<f64>,
    elite_count: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool_values[a].total_cmp(&pool_values[b]));

    let half = elite_count / 2;
    let mut chosen: Vec<usize> = order[..half].to_vec();
    let mut remaining: Vec<usize> = order[half..].to_vec();

    while chosen.len() < elite_count && !remaining.is_empty() {
        let (pick_pos, _) = remaining
            .iter()
            .enumerate()
            .map(|(pos, &cand)| {
                let d = chosen
                    .iter()
                    .map(|&c| bounds.normalized_distance(&pool[cand], &pool[c]))
                    .fold(f64::INFINITY, f64::min);
                (pos, d)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty remaining pool");
        chosen.push(remaining.swap_remove(pick_pos));
    }

    let points: Vec<Vec<f64>> = chosen.iter().map(|&i| pool[i].clone()).collect();
    let values: Vec<f64> = chosen.iter().map(|&i| pool_values[i]).collect();
    (points, values)
}

/// Runs scatter search standalone under the configured limits.
pub fn scatter_minimize<F>(objective: &F, bounds: &SearchBox, config: &ScatterConfig) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut state = ScatterState::init(objective, bounds, config)?;
    let mut trace = Vec::with_capacity(config.max_passes);
    let mut termination = TerminationReason::GenerationsExhausted;

    // Upper bound on one pass's evaluation count, for the budget check.
    let n = config.elite_count;
    let pass_cost = 4 * n * (n - 1) / 2;

    for _ in 0..config.max_passes {
        if state.evaluations() + pass_cost > config.max_evaluations {
            termination = TerminationReason::BudgetExhausted;
            break;
        }
        let replaced = state.pass(objective, bounds);
        let (_, best) = state.best();
        trace.push(best);
        if config.target_value.is_some_and(|t| best <= t) {
            termination = TerminationReason::TargetReached;
            break;
        }
        if !replaced {
            state.regenerate_diverse(objective, bounds);
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
