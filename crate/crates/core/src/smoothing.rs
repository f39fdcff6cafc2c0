//! Local polynomial regression for curve and derivative estimation.
//!
//! At each evaluation point `t` a degree-`p` polynomial is fitted by weighted
//! least squares to the observations inside the kernel window, with weights
//! `K((t_i - t)/h) / h`. Writing the local model in scaled coordinates
//! `u = (t_i - t)/h` keeps the design well conditioned; the fitted coefficient
//! of `u^q` estimates `h^q * X^(q)(t) / q!`, so the derivative estimate is
//! `q! * beta_q / h^q`. Forgetting the `q!` factor halves every second
//! derivative, which is why the factor lives in exactly one place
//! ([`derivative_from_coeffs`]) with a dedicated regression test.
//!
//! Derivative order `q` is paired with degree `p = q + 1` (odd-order bias
//! behavior at the boundary). The base bandwidth is chosen for `q = 0` by
//! leave-one-out cross-validation and inflated for derivatives, since
//! derivative estimation needs wider windows than function estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bandwidth inflation applied to the cross-validated base bandwidth for
/// first- and second-derivative estimation.
pub const DERIV1_BANDWIDTH_FACTOR: f64 = 1.5;
pub const DERIV2_BANDWIDTH_FACTOR: f64 = 2.0;

/// Fraction of the observation span flagged as boundary at each end.
pub const BOUNDARY_FRACTION: f64 = 0.1;

/// Number of candidates in the default log-spaced bandwidth grid.
const DEFAULT_GRID_LEN: usize = 12;

/// Smoothing kernel. Only the compactly supported Epanechnikov parabola is
/// used; weights vanish smoothly at the window edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Epanechnikov,
}

impl KernelKind {
    /// Kernel value at scaled distance `u`; zero outside `|u| < 1`.
    pub fn weight(self, u: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Kernel plus bandwidth, fully determining one smoothing pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth_h: f64,
}

impl KernelSpec {
    pub fn epanechnikov(bandwidth_h: f64) -> Self {
        Self {
            kind: KernelKind::Epanechnikov,
            bandwidth_h,
        }
    }
}

/// Smoothed curve with first and second derivatives on an evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothEstimate {
    pub eval_times: Vec<f64>,
    /// Curve estimate (degree 1 fit).
    pub value: Vec<f64>,
    /// First derivative (degree 2 fit, bandwidth inflated by 1.5).
    pub deriv1: Vec<f64>,
    /// Second derivative (degree 3 fit, bandwidth inflated by 2.0).
    pub deriv2: Vec<f64>,
    /// Base, first- and second-derivative bandwidths actually used.
    pub bandwidths_used: [f64; 3],
    /// True where the evaluation point falls in the outer
    /// [`BOUNDARY_FRACTION`] of the observation span at either end.
    /// Boundary estimates are kept, the flag is advisory for consumers.
    pub boundary: Vec<bool>,
}

enum LocalIssue {
    TooFew(usize),
    Singular,
}

/// Weighted polynomial fit at one point, in scaled coordinates.
/// Returns the `p + 1` scaled coefficients; `skip` excludes one observation
/// (leave-one-out cross-validation).
fn fit_at(
    times: &[f64],
    values: &[f64],
    kind: KernelKind,
    h: f64,
    p: usize,
    t: f64,
    skip: Option<usize>,
) -> std::result::Result<Vec<f64>, LocalIssue> {
    // times is strictly increasing: binary search for the window bounds.
    let start = times.partition_point(|&x| x <= t - h);
    let stop = times.partition_point(|&x| x < t + h);
    let cols = p + 1;

    let mut rows: Vec<(f64, f64, f64)> = Vec::with_capacity(stop.saturating_sub(start));
    for i in start..stop {
        if skip == Some(i) {
            continue;
        }
        let u = (times[i] - t) / h;
        let w = kind.weight(u) / h;
        if w > 0.0 {
            rows.push((u, values[i], w));
        }
    }
    if rows.len() < cols {
        return Err(LocalIssue::TooFew(rows.len()));
    }

    let mut design = nalgebra::DMatrix::zeros(rows.len(), cols);
    let mut target = nalgebra::DVector::zeros(rows.len());
    for (r, &(u, y, w)) in rows.iter().enumerate() {
        let sw = w.sqrt();
        let mut monomial = sw;
        for c in 0..cols {
            design[(r, c)] = monomial;
            monomial *= u;
        }
        target[r] = sw * y;
    }

    let svd = design.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let eps = sigma_max * 1e-12;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if rank < cols {
        return Err(LocalIssue::Singular);
    }
    let beta = svd.solve(&target, eps).map_err(|_| LocalIssue::Singular)?;
    Ok(beta.iter().copied().collect())
}

/// Converts a scaled local-fit coefficient into a derivative estimate:
/// `X^(q)(t) = q! * beta_q / h^q`.
fn derivative_from_coeffs(beta: &[f64], q: usize, h: f64) -> f64 {
    let q_factorial: f64 = (1..=q).map(|k| k as f64).product::<f64>().max(1.0);
    q_factorial * beta[q] / h.powi(q as i32)
}

fn validate_series(times: &[f64], values: &[f64]) -> Result<()> {
    if times.len() != values.len() {
        return Err(Error::Data(format!(
            "times ({}) and values ({}) differ in length",
            times.len(),
            values.len()
        )));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Data(format!(
                "observation times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(bad) = times.iter().chain(values.iter()).find(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite observation entry {bad}")));
    }
    Ok(())
}

/// Estimates the `q`-th derivative of the regression function at each
/// evaluation time, using a degree-`p` local fit.
pub fn local_poly_fit(
    obs_times: &[f64],
    obs_values: &[f64],
    kernel: KernelSpec,
    degree_p: usize,
    deriv_q: usize,
    eval_times: &[f64],
) -> Result<Vec<f64>> {
    validate_series(obs_times, obs_values)?;
    if !(1..=3).contains(&degree_p) || deriv_q > degree_p {
        return Err(Error::Config(format!(
            "need degree p in 1..=3 and derivative order q <= p, got p = {degree_p}, q = {deriv_q}"
        )));
    }
    if !kernel.bandwidth_h.is_finite() || kernel.bandwidth_h <= 0.0 {
        return Err(Error::Config(format!(
            "bandwidth must be positive, got {}",
            kernel.bandwidth_h
        )));
    }
    if obs_times.len() < degree_p + 1 {
        return Err(Error::InsufficientData {
            needed: degree_p + 1,
            got: obs_times.len(),
        });
    }

    let mut out = Vec::with_capacity(eval_times.len());
    for &t in eval_times {
        if !t.is_finite() {
            return Err(Error::Data(format!("non-finite evaluation time {t}")));
        }
        match fit_at(obs_times, obs_values, kernel.kind, kernel.bandwidth_h, degree_p, t, None) {
            Ok(beta) => out.push(derivative_from_coeffs(&beta, deriv_q, kernel.bandwidth_h)),
            Err(LocalIssue::TooFew(m)) => {
                return Err(Error::SingularFit {
                    t,
                    detail: format!(
                        "only {m} observations carry weight in the window, need {}",
                        degree_p + 1
                    ),
                })
            }
            Err(LocalIssue::Singular) => {
                return Err(Error::SingularFit {
                    t,
                    detail: "weighted design is rank deficient".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Curve, first and second derivative estimates at arbitrary evaluation
/// times. `kernel.bandwidth_h` is the base (`q = 0`) bandwidth; derivative
/// passes use the documented inflation factors.
pub fn smooth_state_at(
    obs_times: &[f64],
    obs_values: &[f64],
    kernel: KernelSpec,
    eval_times: &[f64],
) -> Result<SmoothEstimate> {
    if obs_times.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: obs_times.len(),
        });
    }
    let h = kernel.bandwidth_h;
    let bands = [h, DERIV1_BANDWIDTH_FACTOR * h, DERIV2_BANDWIDTH_FACTOR * h];
    let value = local_poly_fit(
        obs_times,
        obs_values,
        KernelSpec { bandwidth_h: bands[0], ..kernel },
        1,
        0,
        eval_times,
    )?;
    let deriv1 = local_poly_fit(
        obs_times,
        obs_values,
        KernelSpec { bandwidth_h: bands[1], ..kernel },
        2,
        1,
        eval_times,
    )?;
    let deriv2 = local_poly_fit(
        obs_times,
        obs_values,
        KernelSpec { bandwidth_h: bands[2], ..kernel },
        3,
        2,
        eval_times,
    )?;

    let lo = obs_times[0];
    let hi = obs_times[obs_times.len() - 1];
    let margin = BOUNDARY_FRACTION * (hi - lo);
    let boundary = eval_times
        .iter()
        .map(|&t| t < lo + margin || t > hi - margin)
        .collect();

    Ok(SmoothEstimate {
        eval_times: eval_times.to_vec(),
        value,
        deriv1,
        deriv2,
        bandwidths_used: bands,
        boundary,
    })
}

/// [`smooth_state_at`] evaluated on the observation grid itself.
pub fn smooth_state(obs_times: &[f64], obs_values: &[f64], kernel: KernelSpec) -> Result<SmoothEstimate> {
    smooth_state_at(obs_times, obs_values, kernel, obs_times)
}

/// Log-spaced candidate bandwidths adapted to the observation grid: from a
/// couple of mean spacings up to a third of the span.
pub fn default_bandwidth_grid(obs_times: &[f64]) -> Vec<f64> {
    let n = obs_times.len();
    if n < 2 {
        return vec![1.0];
    }
    let span = obs_times[n - 1] - obs_times[0];
    let mean_dt = span / (n - 1) as f64;
    let mut lo = 2.0 * mean_dt;
    let hi = span / 3.0;
    if lo >= hi {
        lo = hi / 8.0;
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..DEFAULT_GRID_LEN)
        .map(|i| (llo + (lhi - llo) * i as f64 / (DEFAULT_GRID_LEN - 1) as f64).exp())
        .collect()
}

/// Selects the base bandwidth by leave-one-out cross-validation over an
/// explicit candidate list, then applies the derivative inflation factor.
///
/// Cross-validation scores the `q = 0` local linear fit; candidates where any
/// leave-one-out window drops below two usable points (or the fit is
/// singular) are discarded. Ties prefer the smaller bandwidth.
pub fn select_bandwidth_from(
    obs_times: &[f64],
    obs_values: &[f64],
    degree_p: usize,
    deriv_q: usize,
    candidates: &[f64],
) -> Result<f64> {
    validate_series(obs_times, obs_values)?;
    if deriv_q > 2 || degree_p != deriv_q + 1 {
        return Err(Error::Config(format!(
            "bandwidth selection pairs degree p = q + 1 with q in 0..=2, got p = {degree_p}, q = {deriv_q}"
        )));
    }
    if obs_times.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: obs_times.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Config("empty bandwidth candidate list".into()));
    }

    let mut best: Option<(f64, f64)> = None;
    for &h in candidates {
        if !h.is_finite() || h <= 0.0 {
            return Err(Error::Config(format!("bandwidth candidate {h} must be positive")));
        }
        let mut score = 0.0;
        let mut feasible = true;
        for i in 0..obs_times.len() {
            match fit_at(
                obs_times,
                obs_values,
                KernelKind::Epanechnikov,
                h,
                1,
                obs_times[i],
                Some(i),
            ) {
                Ok(beta) => {
                    let resid = obs_values[i] - beta[0];
                    score += resid * resid;
                }
                Err(_) => {
                    feasible = false;
                    break;
                }
            }
        }
        if feasible && best.map_or(true, |(_, s)| score < s) {
            best = Some((h, score));
        }
    }

    let (h, _) = best.ok_or_else(|| {
        Error::BandwidthSelection(format!(
            "all {} candidates left some leave-one-out window under-determined",
            candidates.len()
        ))
    })?;
    let factor = match deriv_q {
        0 => 1.0,
        1 => DERIV1_BANDWIDTH_FACTOR,
        _ => DERIV2_BANDWIDTH_FACTOR,
    };
    Ok(h * factor)
}

/// [`select_bandwidth_from`] over the default candidate grid.
pub fn select_bandwidth(
    obs_times: &[f64],
    obs_values: &[f64],
    degree_p: usize,
    deriv_q: usize,
) -> Result<f64> {
    let grid = default_bandwidth_grid(obs_times);
    select_bandwidth_from(obs_times, obs_values, degree_p, deriv_q, &grid)
}
