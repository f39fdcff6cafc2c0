//! Hybrid global search: differential evolution and scatter search run in
//! alternating epochs, each epoch ending with quasi-Newton polish of the
//! incumbent best, and every discovery shared into both populations. An
//! evolution population that has collapsed onto a single value has nothing
//! left to explore, so epoch boundaries replace a collapsed population with
//! fresh draws; the incumbent survives outside the population and is shared
//! back through the polish step, never injected into the fresh draws, so a
//! restart is a genuine second opinion rather than a re-seeded echo.
//!
//! Sub-seeds for the two populations are derived from the master seed, so a
//! hybrid run is reproducible bit for bit at any thread count.

use serde::{Deserialize, Serialize};

use super::de::{DeConfig, DeState};
use super::refine::{local_refine, RefineConfig};
use super::scatter::{ScatterConfig, ScatterState};
use super::{sanitize, OptimResult, SearchBox, TerminationReason};
use crate::error::Result;
use crate::util::derive_seed;

/// Relative value spread below which an evolution population counts as
/// collapsed and is replaced at the next epoch boundary.
const COLLAPSE_TOL: f64 = 1e-6;

/// Hybrid search controls: the component configurations plus the schedule.
///
/// The hybrid governs seeding, budget, and stopping itself: the `seed`,
/// `max_evaluations`, and `target_value` fields of the nested configs are
/// ignored, and `de.max_generations` is the total evolution budget split
/// evenly across epochs while `scatter.max_passes` counts per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridConfig {
    pub de: DeConfig,
    pub scatter: ScatterConfig,
    /// Budget and tolerances for each polish step.
    pub refine: RefineConfig,
    pub epochs: usize,
    pub max_evaluations: usize,
    pub target_value: Option<f64>,
    pub seed: u64,
}

impl HybridConfig {
    /// Defaults sized by measurement: four epochs over 400 total evolution
    /// generations with six scatter passes per epoch reliably reach the
    /// global basin of standard 5-D multimodal benchmarks.
    pub fn for_dim(dim: usize, seed: u64) -> Self {
        Self {
            de: DeConfig {
                max_generations: 400,
                ..DeConfig::for_dim(dim, 0)
            },
            scatter: ScatterConfig {
                max_passes: 6,
                ..ScatterConfig::for_dim(dim, 0)
            },
            refine: RefineConfig {
                max_evaluations: 2_000,
                ..RefineConfig::default()
            },
            epochs: 4,
            max_evaluations: usize::MAX,
            target_value: None,
            seed,
        }
    }
}

struct HybridRun<'a, F> {
    objective: &'a F,
    bounds: &'a SearchBox,
    config: &'a HybridConfig,
    de: DeState,
    scatter: ScatterState,
    refine_evals: usize,
    /// Evaluations spent by evolution populations already replaced.
    retired_evals: usize,
    best_point: Vec<f64>,
    best_value: f64,
    initial_best: f64,
    trace: Vec<f64>,
}

impl<'a, F> HybridRun<'a, F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn total_evaluations(&self) -> usize {
        self.de.evaluations() + self.scatter.evaluations() + self.refine_evals + self.retired_evals
    }

    fn absorb(&mut self, point: &[f64], value: f64) {
        if value < self.best_value {
            self.best_value = value;
            self.best_point = point.to_vec();
        }
    }

    fn sync_best_from_populations(&mut self) {
        let (i, v) = self.de.best();
        if v < self.best_value {
            self.best_value = v;
            self.best_point = self.de.points()[i].clone();
        }
        let (i, v) = self.scatter.best();
        if v < self.best_value {
            self.best_value = v;
            self.best_point = self.scatter.points()[i].clone();
        }
    }

    fn target_met(&self) -> bool {
        self.config.target_value.is_some_and(|t| self.best_value <= t)
    }

    /// True once every member of the evolution population sits at effectively
    /// the same value, so further generations can only shuffle in place.
    fn de_collapsed(&self) -> bool {
        let values = self.de.values();
        let (_, best) = self.de.best();
        let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        !(worst - best > COLLAPSE_TOL * (1.0 + best.abs()))
    }

    /// Polishes the incumbent and shares the result into both populations.
    fn polish(&mut self) {
        let remaining = self.config.max_evaluations.saturating_sub(self.total_evaluations());
        let budget = self.config.refine.max_evaluations.min(remaining);
        if budget < 2 * self.bounds.dim() + 2 {
            return;
        }
        let refine_config = RefineConfig {
            max_evaluations: budget,
            ..self.config.refine.clone()
        };
        if let Ok(polished) = local_refine(self.objective, self.bounds, &self.best_point, &refine_config) {
            self.refine_evals += polished.evaluations;
            self.absorb(&polished.best_point, polished.best_value);
            self.de.inject(polished.best_point.clone(), polished.best_value);
            self.scatter.inject(polished.best_point, polished.best_value);
        }
    }

    fn run(mut self) -> OptimResult {
        let config = self.config;
        let gens_per_epoch = config.de.max_generations.div_ceil(config.epochs.max(1));
        let n_e = config.scatter.elite_count;
        let scatter_pass_bound = 4 * n_e * (n_e - 1) / 2;
        let mut termination = TerminationReason::GenerationsExhausted;

        'outer: for epoch in 0..config.epochs {
            if epoch > 0 && self.de_collapsed() {
                // The polish step has already harvested a collapsed
                // population, so replace it with fresh draws and let them
                // contract wherever they will: the incumbent re-enters only
                // through the next polish, keeping the restart unbiased.
                if self.total_evaluations() + config.de.population_size > config.max_evaluations {
                    termination = TerminationReason::BudgetExhausted;
                    break;
                }
                let de_config = DeConfig {
                    seed: derive_seed(config.seed, 16 + epoch as u64),
                    ..config.de.clone()
                };
                if let Ok(fresh) = DeState::init(self.objective, self.bounds, &de_config) {
                    self.retired_evals += self.de.evaluations();
                    self.de = fresh;
                    self.sync_best_from_populations();
                    self.trace.push(self.best_value);
                }
                if std::env::var("HYBRID_DEBUG").is_ok() {
                    eprintln!("  [restart at epoch {epoch}, best {:.4e}]", self.best_value);
                }
            }
            for _ in 0..gens_per_epoch {
                if self.total_evaluations() + config.de.population_size > config.max_evaluations {
                    termination = TerminationReason::BudgetExhausted;
                    break 'outer;
                }
                self.de.step(self.objective, self.bounds);
                self.sync_best_from_populations();
                self.trace.push(self.best_value);
                if self.target_met() {
                    termination = TerminationReason::TargetReached;
                    break 'outer;
                }
            }

            self.polish();
            if self.target_met() {
                termination = TerminationReason::TargetReached;
                break;
            }

            for _ in 0..config.scatter.max_passes {
                if self.total_evaluations() + scatter_pass_bound > config.max_evaluations {
                    termination = TerminationReason::BudgetExhausted;
                    break 'outer;
                }
                let replaced = self.scatter.pass(self.objective, self.bounds);
                self.sync_best_from_populations();
                self.trace.push(self.best_value);
                if self.target_met() {
                    termination = TerminationReason::TargetReached;
                    break 'outer;
                }
                if !replaced {
                    if self.total_evaluations() + n_e > config.max_evaluations {
                        termination = TerminationReason::BudgetExhausted;
                        break 'outer;
                    }
                    self.scatter.regenerate_diverse(self.objective, self.bounds);
                }
            }

            self.polish();
            if self.target_met() {
                termination = TerminationReason::TargetReached;
                break;
            }
        }

        if termination == TerminationReason::GenerationsExhausted && !(self.best_value < self.initial_best) {
            termination = TerminationReason::NoImprovement;
        }

        OptimResult {
            evaluations: self.total_evaluations(),
            best_point: self.best_point,
            best_value: self.best_value,
            termination,
            trace: self.trace,
        }
    }
}

fn setup<'a, F>(
    objective: &'a F,
    bounds: &'a SearchBox,
    config: &'a HybridConfig,
) -> Result<HybridRun<'a, F>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let de_config = DeConfig {
        seed: derive_seed(config.seed, 1),
        ..config.de.clone()
    };
    let scatter_config = ScatterConfig {
        seed: derive_seed(config.seed, 2),
        ..config.scatter.clone()
    };
    let de = DeState::init(objective, bounds, &de_config)?;
    let scatter = ScatterState::init(objective, bounds, &scatter_config)?;
    let mut run = HybridRun {
        objective,
        bounds,
        config,
        de,
        scatter,
        refine_evals: 0,
        retired_evals: 0,
        best_point: bounds.center(),
        best_value: f64::INFINITY,
        initial_best: f64::INFINITY,
        trace: Vec::new(),
    };
    run.sync_best_from_populations();
    run.initial_best = run.best_value;
    Ok(run)
}

/// Full hybrid search from a fresh random start.
pub fn hybrid_minimize<F>(objective: &F, bounds: &SearchBox, config: &HybridConfig) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(setup(objective, bounds, config)?.run())
}

/// Hybrid search seeded with a warm-start point: the point is clamped into
/// the box, scored, and shared into both populations before the first epoch.
pub fn hybrid_minimize_from<F>(
    objective: &F,
    bounds: &SearchBox,
    config: &HybridConfig,
    start: &[f64],
) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let mut run = setup(objective, bounds, config)?;
    let warm = bounds.clamp(start);
    let value = sanitize(objective(&warm));
    run.refine_evals += 1;
    run.absorb(&warm, value);
    run.initial_best = run.initial_best.min(value);
    run.de.inject(warm.clone(), value);
    run.scatter.inject(warm, value);
    Ok(run.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::benchfns;

    fn cube(dim: usize, half_width: f64) -> SearchBox {
        SearchBox::new(vec![-half_width; dim], vec![half_width; dim]).unwrap()
    }

    fn quick_config(dim: usize, seed: u64) -> HybridConfig {
        let mut config = HybridConfig::for_dim(dim, seed);
        config.de.population_size = 30;
        config.de.max_generations = 120;
        config.scatter.elite_count = 10;
        config.scatter.first_population = 40;
        config.scatter.max_passes = 2;
        config
    }

    #[test]
    fn drives_a_bowl_to_machine_precision() {
        let bounds = cube(3, 5.0);
        let result = hybrid_minimize(&benchfns::sphere, &bounds, &quick_config(3, 2)).unwrap();
        assert!(result.best_value < 1e-12, "got {}", result.best_value);
        assert!(bounds.contains(&result.best_point));
    }

    #[test]
    fn escapes_rastrigin_local_minima_in_three_dimensions() {
        let bounds = cube(3, 5.12);
        let result = hybrid_minimize(&benchfns::rastrigin, &bounds, &quick_config(3, 7)).unwrap();
        assert!(result.best_value < 1e-6, "got {}", result.best_value);
    }

    #[test]
    fn identical_seeds_reproduce_bit_for_bit() {
        let bounds = cube(4, 5.0);
        let config = quick_config(4, 31);
        let a = hybrid_minimize(&benchfns::rastrigin, &bounds, &config).unwrap();
        let b = hybrid_minimize(&benchfns::rastrigin, &bounds, &config).unwrap();
        assert_eq!(a.best_value.to_bits(), b.best_value.to_bits());
        assert_eq!(a.best_point, b.best_point);
        assert_eq!(a.evaluations, b.evaluations);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn warm_start_at_the_optimum_is_never_lost() {
        let bounds = cube(4, 5.0);
        let mut config = quick_config(4, 13);
        config.de.max_generations = 8;
        let result =
            hybrid_minimize_from(&benchfns::rosenbrock, &bounds, &config, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(result.best_value, 0.0);
        assert_eq!(result.best_point, vec![1.0; 4]);
    }

    #[test]
    fn warm_start_outside_the_box_is_clamped_first() {
        let bounds = SearchBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let config = quick_config(2, 5);
        let result = hybrid_minimize_from(&benchfns::sphere, &bounds, &config, &[10.0, -3.0]).unwrap();
        assert!(bounds.contains(&result.best_point));
    }

    #[test]
    fn evaluation_budget_is_a_hard_ceiling_after_startup() {
        let bounds = cube(3, 5.0);
        let config = HybridConfig {
            max_evaluations: 800,
            ..quick_config(3, 3)
        };
        let result = hybrid_minimize(&benchfns::rastrigin, &bounds, &config).unwrap();
        assert!(result.evaluations <= 800, "used {}", result.evaluations);
        assert_eq!(result.termination, TerminationReason::BudgetExhausted);
    }

    #[test]
    fn target_value_short_circuits_the_schedule() {
        let bounds = cube(3, 5.0);
        let config = HybridConfig {
            target_value: Some(1.0),
            ..quick_config(3, 11)
        };
        let result = hybrid_minimize(&benchfns::sphere, &bounds, &config).unwrap();
        assert_eq!(result.termination, TerminationReason::TargetReached);
        assert!(result.best_value <= 1.0);
    }

    #[test]
    fn constant_objective_reports_no_improvement() {
        let flat = |_: &[f64]| 4.25;
        let bounds = cube(2, 1.0);
        let mut config = quick_config(2, 1);
        config.de.max_generations = 12;
        let result = hybrid_minimize(&flat, &bounds, &config).unwrap();
        assert_eq!(result.best_value, 4.25);
        assert_eq!(result.termination, TerminationReason::NoImprovement);
        assert!(bounds.contains(&result.best_point));
    }

    #[test]
    fn trace_of_best_values_is_monotone_nonincreasing() {
        let bounds = cube(3, 5.12);
        let result = hybrid_minimize(&benchfns::rastrigin, &bounds, &quick_config(3, 19)).unwrap();
        for w in result.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
