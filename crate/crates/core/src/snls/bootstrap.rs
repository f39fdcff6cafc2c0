//! Residual-bootstrap confidence intervals around a completed fit.
//!
//! Residuals are taken on each series' comparison scale, centered, resampled
//! with replacement, and added back onto the fitted trajectories to form
//! synthetic data sets. Each replicate is refit locally from the original
//! solution, and per-parameter percentile intervals plus pointwise bands for
//! the infection-rate curve are read off the replicate spread. Replicates are
//! independent of worker count: replicate `i` draws from a stream seeded by
//! `derive_seed(seed, i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::curve_eval;
use crate::data::{ObservationSet, ScaleKind};
use crate::error::{Error, Result};
use crate::optim::{local_refine, RefineConfig};
use crate::param::ParamName;
use crate::util::{derive_seed, quantile_sorted};

use super::{FitResult, SnlsProblem, PENALTY_FLOOR};

const LOWER_TAIL: f64 = 0.025;
const UPPER_TAIL: f64 = 0.975;
/// Dropping more than this fraction of replicates marks the result unreliable.
const DROP_TOLERANCE: f64 = 0.2;
/// Intervals missing the point estimate on more than this fraction of the
/// parameters raise the coverage warning.
const MISS_TOLERANCE: f64 = 0.1;

/// Percentile intervals for every free coordinate, the replicate matrix they
/// came from, and pointwise bands for the infection-rate curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Free coordinates, in vector order.
    pub names: Vec<ParamName>,
    /// Point estimate (the fit's free values).
    pub point: Vec<f64>,
    /// 95% percentile interval per free coordinate.
    pub intervals: Vec<[f64; 2]>,
    /// One row of refitted free values per kept replicate.
    pub replicates: Vec<Vec<f64>>,
    /// Grid carried over from the fit's dense rate curve.
    pub eta_times: Vec<f64>,
    /// Pointwise 95% band of the rate curve at each grid time.
    pub eta_bands: Vec<[f64; 2]>,
    pub b_requested: usize,
    pub b_kept: usize,
    pub seed: u64,
    /// Set when more than a fifth of the replicates had to be dropped.
    pub unreliable: bool,
    /// Set when the intervals miss the point estimate suspiciously often.
    pub coverage_warning: bool,
}

fn centered_residuals(observed: &[f64], fitted: &[f64], scale: ScaleKind) -> Result<Vec<f64>> {
    if observed.len() != fitted.len() {
        return Err(Error::Config(format!(
            "fitted series has {} values for {} observations",
            fitted.len(),
            observed.len()
        )));
    }
    let mut residuals: Vec<f64> = observed
        .iter()
        .zip(fitted)
        .map(|(&y, &f)| scale.apply(y) - scale.apply(f))
        .collect();
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::Data(
            "residuals are not finite; was this fit produced on these observations?".into(),
        ));
    }
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    for r in &mut residuals {
        *r -= mean;
    }
    Ok(residuals)
}

fn resample_series(
    fitted: &[f64],
    residuals: &[f64],
    scale: ScaleKind,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    fitted
        .iter()
        .map(|&f| scale.invert(scale.apply(f) + residuals[rng.random_range(0..residuals.len())]))
        .collect()
}

fn replicate_refine() -> RefineConfig {
    RefineConfig {
        max_iterations: 40,
        max_evaluations: 2_500,
        ..RefineConfig::default()
    }
}

fn run_replicate(
    obs: &ObservationSet,
    best: &FitResult,
    r_t: &[f64],
    r_v: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // All CD4 draws first, then all viral draws, so the streams are stable.
    let t_values = resample_series(&best.fitted_t, r_t, obs.t_scale(), &mut rng);
    let v_values = resample_series(&best.fitted_v, r_v, obs.v_scale(), &mut rng);
    let synthetic = ObservationSet::new(
        obs.t_times().to_vec(),
        t_values,
        obs.v_times().to_vec(),
        v_values,
    )?
    .with_scales(obs.t_scale(), obs.v_scale())?
    .with_weights(obs.t_weight(), obs.v_weight())?;

    let theta = &best.theta_hat;
    let problem = SnlsProblem::new(
        &synthetic,
        best.spline_spec.clone(),
        theta.layout(),
        best.fixed_initial_state,
        best.solver,
    )?;
    let free_box = theta.free_box()?;
    let bounds = theta.bounds().clone();
    let objective = |free: &[f64]| {
        let full = theta.expand_free(free);
        problem.penalized_rss(&full, &bounds)
    };
    let start = free_box.clamp(&theta.free_values());
    let refined = local_refine(&objective, &free_box, &start, &replicate_refine())?;
    if !(refined.best_value < PENALTY_FLOOR) {
        return Err(Error::FitFailure(
            "replicate refit never left the penalty band".into(),
        ));
    }
    Ok(refined.best_point)
}

/// Residual bootstrap around `best`, which must have been fit on `obs`.
/// Needs `b >= 2`; failed replicate refits are dropped, and fewer than two
/// survivors is an error.
pub fn bootstrap_ci(
    obs: &ObservationSet,
    best: &FitResult,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::Config(format!(
            "residual bootstrap needs at least two replicates, got {b}"
        )));
    }
    let r_t = centered_residuals(obs.t_values(), &best.fitted_t, obs.t_scale())?;
    let r_v = centered_residuals(obs.v_values(), &best.fitted_v, obs.v_scale())?;

    let names = best.theta_hat.free_names();
    let point = best.theta_hat.free_values();
    let n_free = names.len();

    if n_free == 0 {
        // Nothing to refit: every replicate reproduces the pinned point and
        // the rate curve verbatim.
        let eta_bands = best.eta_values.iter().map(|&v| [v, v]).collect();
        return Ok(BootstrapResult {
            names,
            point,
            intervals: Vec::new(),
            replicates: vec![Vec::new(); b],
            eta_times: best.eta_times.clone(),
            eta_bands,
            b_requested: b,
            b_kept: b,
            seed,
            unreliable: false,
            coverage_warning: false,
        });
    }

    let kept: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|i| run_replicate(obs, best, &r_t, &r_v, derive_seed(seed, i as u64)).ok())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let b_kept = kept.len();
    if b_kept < 2 {
        return Err(Error::FitFailure(format!(
            "only {b_kept} of {b} bootstrap refits succeeded"
        )));
    }
    let dropped = b - b_kept;
    let unreliable = dropped as f64 > DROP_TOLERANCE * b as f64;

    let intervals: Vec<[f64; 2]> = (0..n_free)
        .map(|j| {
            let mut column: Vec<f64> = kept.iter().map(|row| row[j]).collect();
            column.sort_by(f64::total_cmp);
            [
                quantile_sorted(&column, LOWER_TAIL),
                quantile_sorted(&column, UPPER_TAIL),
            ]
        })
        .collect();
    let missed = (0..n_free)
        .filter(|&j| point[j] < intervals[j][0] || point[j] > intervals[j][1])
        .count();
    let coverage_warning = missed as f64 > MISS_TOLERANCE * n_free as f64;

    let layout = best.theta_hat.layout();
    let curves: Vec<Vec<f64>> = kept
        .iter()
        .map(|row| {
            let full = best.theta_hat.expand_free(row);
            let coeffs = &full[5..5 + layout.n_coeffs()];
            best.eta_times
                .iter()
                .map(|&t| curve_eval(&best.spline_spec, coeffs, t))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let eta_bands: Vec<[f64; 2]> = (0..best.eta_times.len())
        .map(|k| {
            let mut column: Vec<f64> = curves.iter().map(|c| c[k]).collect();
            column.sort_by(f64::total_cmp);
            [
                quantile_sorted(&column, LOWER_TAIL),
                quantile_sorted(&column, UPPER_TAIL),
            ]
        })
        .collect();

    Ok(BootstrapResult {
        names,
        point,
        intervals,
        replicates: kept,
        eta_times: best.eta_times.clone(),
        eta_bands,
        b_requested: b,
        b_kept,
        seed,
        unreliable,
        coverage_warning,
    })
}
