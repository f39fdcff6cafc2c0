//! Multistage smoothing-based estimation of all model parameters.
//!
//! No ODE solving is involved. Stage I smooths the observed series into
//! curve and derivative estimates ([`crate::smoothing`]). The model equations
//! then turn parameter estimation into two ordinary least squares problems.
//!
//! Stage II recovers `(c, lambda, rho)`: eliminating the unobserved split of
//! `T = T_u + T_i` from the system gives the linear relation
//!
//! ```text
//! V'(t) = alpha0 + alpha1 * T(t) + alpha2 * T'(t) - c * V(t)
//! alpha0 = -N delta lambda / (rho - delta)
//! alpha1 =  N delta rho    / (rho - delta)
//! alpha2 =  N delta        / (rho - delta)
//! ```
//!
//! so an OLS fit of `V'` on `(1, T, T', -V)` yields the alphas and `c`, and
//! `lambda = -alpha0/alpha2`, `rho = alpha1/alpha2` as long as `alpha2` is
//! away from zero.
//!
//! Stage III recovers `(delta, N, eta)`: substituting `T_i = (V' + cV)/(N
//! delta)` and `T_u = T - T_i` into the virion acceleration gives, with
//! `Z = V'' + c V'`,
//!
//! ```text
//! Z(t) = delta * U1(t) + eta(t) * U2(t) + (N delta eta(t)) * U3(t)
//! U1 = -(V' + cV),   U2 = -(V'V + cV^2),   U3 = T V
//! ```
//!
//! Expanding `eta(t) = sum_j a_j b_j(t)` in a B-spline basis makes this a
//! linear regression with `1 + 2s` columns whose coefficients are `delta`,
//! the `a_j`, and `g_j = N delta a_j`; the ratios `g_j / a_j` then give `N`.
//!
//! The pipeline entry point [`run_mssb`] chains the stages and also derives
//! per-parameter warm-start ranges for the nonlinear least squares refiner.

use serde::{Deserialize, Serialize};

use crate::bspline::{basis_eval, curve_eval, SplineSpec};
use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::optim::SearchBox;
use crate::param::ParamName;
use crate::smoothing::{select_bandwidth, smooth_state_at, KernelSpec, SmoothEstimate};
use crate::util::median;

/// `|alpha2|` below this times the coefficient scale blocks the
/// `lambda = -alpha0/alpha2`, `rho = alpha1/alpha2` recovery.
pub const ALPHA2_DEGENERACY_TOL: f64 = 1e-10;

/// Spline coefficients below this times `max_j |a_j|` are excluded from the
/// burst-size ratio `g_j / a_j`.
pub const COEFF_RATIO_GUARD: f64 = 1e-12;

/// Warm-start ranges span `[estimate / 5, estimate * 5]`.
pub const WARM_RANGE_FACTOR: f64 = 5.0;

/// Warm-start ranges stretch to cover `estimate +/- 3 se` when the stage
/// regression reports a standard error; see [`warm_range_se`].
pub const WARM_SE_FACTOR: f64 = 3.0;

/// Minimum observations per series for the full pipeline.
pub const MIN_OBS_PER_SERIES: usize = 10;

/// Relative singular-value cutoff for the rank checks (after column
/// equilibration).
const RANK_TOL: f64 = 1e-12;

/// Stage II output: the substitution-regression coefficients and the
/// constants recovered from them.
///
/// `lambda_hat = -alpha0/alpha2` and `rho_hat = alpha1/alpha2` by
/// construction whenever `|alpha2|` clears the degeneracy tolerance; both are
/// `None` otherwise (the alphas and `c_hat` are still reported).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsLSResult {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Clearance estimate: the coefficient on `-V` (or the supplied fixed value).
    pub c_hat: f64,
    pub lambda_hat: Option<f64>,
    pub rho_hat: Option<f64>,
    /// Regression residuals on the evaluation grid.
    pub residuals: Vec<f64>,
}

impl PsLSResult {
    /// True when `alpha2` was too small to recover `lambda` and `rho`.
    pub fn is_degenerate(&self) -> bool {
        self.lambda_hat.is_none()
    }
}

/// Stage III regression pieces on the evaluation grid, kept for diagnostics.
/// Built only from Stage I estimates and the Stage II clearance: no truth
/// values enter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageThreeDesign {
    /// Evaluation grid.
    pub times: Vec<f64>,
    /// Response `Z = V'' + c V'`.
    pub z: Vec<f64>,
    /// Regressor multiplying `delta`: `-(V' + cV)`.
    pub u1: Vec<f64>,
    /// Regressor multiplying `eta(t)`: `-(V'V + cV^2)`.
    pub u2: Vec<f64>,
    /// Regressor multiplying `N delta eta(t)`: `T V`.
    pub u3: Vec<f64>,
    /// `basis_matrix[j][i] = b_j(times[i])`; one column per basis function.
    pub basis_matrix: Vec<Vec<f64>>,
}

/// Stage III output: infected-cell death rate, spline coefficients of the
/// infection rate, and the burst size recovered from their products.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Estimate {
    pub delta_hat: f64,
    /// Spline coefficients `a_j` of `eta(t)`.
    pub eta_coeffs: Vec<f64>,
    /// Coefficients of the product terms, estimating `N * delta * a_j`.
    pub nde_coeffs: Vec<f64>,
    /// Burst size `median_j(nde_j / a_j) / delta`, over coefficients passing
    /// the magnitude guard; `None` when no ratio is trustworthy.
    pub n_hat: Option<f64>,
    pub residuals: Vec<f64>,
    /// OLS standard error of `delta_hat`; `None` when `delta` was pinned or
    /// the regression left no residual degrees of freedom. The regressors
    /// are smoothed curves, so this is a conditioning diagnostic rather than
    /// a calibrated confidence width: it blows up exactly when the design
    /// cannot separate the spline block from the product block.
    pub delta_se: Option<f64>,
    /// OLS standard errors of the `a_j`, under the same caveat.
    pub eta_coeff_se: Option<Vec<f64>>,
    /// OLS standard errors of the `nde_j`, under the same caveat.
    pub nde_coeff_se: Option<Vec<f64>>,
    pub design: StageThreeDesign,
}

/// Point estimates of the five kinetic constants, sign-unconstrained:
/// heavy noise can push any of them negative, and simulation scoring needs
/// the raw values. Convert with [`to_params`](ConstantEstimates::to_params)
/// where a validated positive set is required.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub lambda: f64,
    pub rho: f64,
    pub n_virions: f64,
    pub delta: f64,
    pub clearance: f64,
}

impl ConstantEstimates {
    /// Canonical order: `lambda, rho, n_virions, delta, clearance`.
    pub fn as_array(&self) -> [f64; 5] {
        [self.lambda, self.rho, self.n_virions, self.delta, self.clearance]
    }

    /// Validated positive parameter set, erring if any estimate is
    /// nonpositive or non-finite.
    pub fn to_params(&self) -> Result<crate::hiv::ConstantParams> {
        crate::hiv::ConstantParams::new(
            self.lambda,
            self.rho,
            self.n_virions,
            self.delta,
            self.clearance,
        )
    }
}

/// Initial-state point estimates read off the smoothed curves at the first
/// evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialStateEstimate {
    pub t_u0: f64,
    pub t_i0: f64,
    pub v0: f64,
}

/// Outer biological limits that warm-start ranges are clipped to, and the
/// fallback range for parameters whose point estimate is unusable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBounds {
    pub lambda: [f64; 2],
    pub rho: [f64; 2],
    pub n_virions: [f64; 2],
    pub delta: [f64; 2],
    pub clearance: [f64; 2],
    /// Applied to every spline coefficient of `eta(t)`.
    pub eta_coeff: [f64; 2],
    pub t_u0: [f64; 2],
    pub t_i0: [f64; 2],
    pub v0: [f64; 2],
}

impl Default for GlobalBounds {
    fn default() -> Self {
        Self {
            lambda: [1e-3, 1e4],
            rho: [1e-5, 10.0],
            n_virions: [1.0, 1e6],
            delta: [1e-3, 50.0],
            clearance: [1e-2, 100.0],
            eta_coeff: [0.0, 1e-2],
            t_u0: [1.0, 1e5],
            t_i0: [1e-3, 1e5],
            v0: [1.0, 1e9],
        }
    }
}

impl GlobalBounds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda", self.lambda),
            ("rho", self.rho),
            ("n", self.n_virions),
            ("delta", self.delta),
            ("c", self.clearance),
            ("eta coefficient", self.eta_coeff),
            ("t_u0", self.t_u0),
            ("t_i0", self.t_i0),
            ("v0", self.v0),
        ];
        for (name, [lo, hi]) in all {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi || lo < 0.0 {
                return Err(Error::Config(format!(
                    "global bounds for {name} must satisfy 0 <= lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter warm-start intervals handed to the nonlinear refiner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRanges {
    pub lambda: [f64; 2],
    pub rho: [f64; 2],
    pub n_virions: [f64; 2],
    pub delta: [f64; 2],
    pub clearance: [f64; 2],
    pub eta_coeffs: Vec<[f64; 2]>,
    pub t_u0: [f64; 2],
    pub t_i0: [f64; 2],
    pub v0: [f64; 2],
}

impl SearchRanges {
    /// Range for one named parameter; `None` for an out-of-range coefficient
    /// index.
    pub fn range(&self, name: ParamName) -> Option<[f64; 2]> {
        match name {
            ParamName::Lambda => Some(self.lambda),
            ParamName::Rho => Some(self.rho),
            ParamName::NVirions => Some(self.n_virions),
            ParamName::Delta => Some(self.delta),
            ParamName::Clearance => Some(self.clearance),
            ParamName::Coeff(j) => self.eta_coeffs.get(j).copied(),
            ParamName::TU0 => Some(self.t_u0),
            ParamName::TI0 => Some(self.t_i0),
            ParamName::V0 => Some(self.v0),
        }
    }

    /// Full search box in the canonical parameter order
    /// `lambda, rho, N, delta, c, a_1..a_s[, T_u(0), T_i(0), V(0)]`.
    pub fn to_search_box(&self, include_initial_state: bool) -> Result<SearchBox> {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        let push = |r: [f64; 2], lower: &mut Vec<f64>, upper: &mut Vec<f64>| {
            lower.push(r[0]);
            upper.push(r[1]);
        };
        for r in [self.lambda, self.rho, self.n_virions, self.delta, self.clearance] {
            push(r, &mut lower, &mut upper);
        }
        for &r in &self.eta_coeffs {
            push(r, &mut lower, &mut upper);
        }
        if include_initial_state {
            for r in [self.t_u0, self.t_i0, self.v0] {
                push(r, &mut lower, &mut upper);
            }
        }
        SearchBox::new(lower, upper)
    }
}

/// Complete multistage estimate: point estimates for everything, plus the
/// warm-start ranges derived from them.
///
/// Invariants: `eta_coeffs.len() == spline_spec.n_control()`, and every
/// search range contains its point estimate except for the parameters listed
/// in `clamped_to_global` (nonpositive, non-finite, or outside the global
/// bounds), whose range falls back to the global interval; a spline
/// coefficient listed there instead borrows the pooled scale of the usable
/// coefficients when at least one exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MssbEstimate {
    pub constants: ConstantEstimates,
    pub eta_coeffs: Vec<f64>,
    pub spline_spec: SplineSpec,
    pub search_ranges: SearchRanges,
    pub initial_state: InitialStateEstimate,
    /// Parameters whose warm range fell back to the global bounds.
    pub clamped_to_global: Vec<ParamName>,
    /// Base (curve) bandwidths used on the CD4 and viral-load series.
    pub bandwidths: [f64; 2],
    /// Stage II diagnostics.
    pub psls: PsLSResult,
}

impl MssbEstimate {
    /// Estimated infection rate `eta(t) = sum_j a_j b_j(t)`.
    pub fn eta_at(&self, t: f64) -> Result<f64> {
        curve_eval(&self.spline_spec, &self.eta_coeffs, t)
    }
}

/// Knobs for [`run_mssb_with`]. `kernel: None` selects the base bandwidth
/// per series by leave-one-out cross-validation. The fixed-parameter slots
/// support workflows where the clearance or the infected-cell death rate is
/// known from an earlier analysis.
#[derive(Debug, Clone, Default)]
pub struct MssbSettings {
    pub kernel: Option<KernelSpec>,
    pub fixed_clearance: Option<f64>,
    pub fixed_delta: Option<f64>,
    pub bounds: GlobalBounds,
}

/// One least-squares solve: coefficients, residuals, and per-coefficient
/// standard errors (`None` without residual degrees of freedom).
struct OlsFit {
    beta: Vec<f64>,
    residuals: Vec<f64>,
    se: Option<Vec<f64>>,
}

/// Ordinary least squares with column equilibration; errors when the scaled
/// design is rank deficient.
///
/// Standard errors come from the SVD of the equilibrated design:
/// `diag((X'X)^-1)_j = sum_k (V_jk / sigma_k)^2 / scale_j^2`, times the
/// residual variance. A nearly collinear design passes the rank check but
/// produces enormous errors on the coefficients it cannot separate, which is
/// exactly the signal downstream range construction needs.
fn ols(
    x: &nalgebra::DMatrix<f64>,
    y: &nalgebra::DVector<f64>,
    stage: &'static str,
) -> Result<OlsFit> {
    let cols = x.ncols();
    let mut scaled = x.clone();
    let mut col_scale = vec![1.0_f64; cols];
    for j in 0..cols {
        let norm = scaled.column(j).norm();
        if norm > 0.0 {
            col_scale[j] = norm;
            scaled.column_mut(j).unscale_mut(norm);
        }
    }

    let svd = scaled.svd(true, true);
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return Err(Error::RankDeficient { stage, rank: 0, cols });
    }
    let eps = sigma_max * RANK_TOL;
    let rank = svd.singular_values.iter().filter(|&&sv| sv > eps).count();
    if rank < cols {
        return Err(Error::RankDeficient { stage, rank, cols });
    }
    let beta_scaled = svd.solve(y, eps).map_err(|detail| Error::Degenerate {
        stage,
        detail: detail.to_string(),
    })?;

    let beta: Vec<f64> = (0..cols).map(|j| beta_scaled[j] / col_scale[j]).collect();
    let residuals: Vec<f64> = (0..x.nrows())
        .map(|i| y[i] - (0..cols).map(|j| x[(i, j)] * beta[j]).sum::<f64>())
        .collect();

    let dof = x.nrows() as f64 - cols as f64;
    let se = if dof > 0.0 {
        let sigma2 = residuals.iter().map(|r| r * r).sum::<f64>() / dof;
        let v_t = svd.v_t.as_ref().expect("svd was computed with V");
        Some(
            (0..cols)
                .map(|j| {
                    let diag: f64 = (0..svd.singular_values.len())
                        .map(|k| (v_t[(k, j)] / svd.singular_values[k]).powi(2))
                        .sum();
                    (sigma2 * diag).sqrt() / col_scale[j]
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(OlsFit { beta, residuals, se })
}

/// The two smoothed series must sit on one shared evaluation grid.
fn shared_grid<'a>(smooth_t: &'a SmoothEstimate, smooth_v: &SmoothEstimate) -> Result<&'a [f64]> {
    let a = &smooth_t.eval_times;
    let b = &smooth_v.eval_times;
    if a.len() != b.len() || a.iter().zip(b.iter()).any(|(x, y)| x != y) {
        return Err(Error::Config(
            "smoothed series must share one evaluation grid".into(),
        ));
    }
    Ok(a)
}

fn stage2_impl(
    smooth_t: &SmoothEstimate,
    smooth_v: &SmoothEstimate,
    fixed_c: Option<f64>,
) -> Result<PsLSResult> {
    let grid = shared_grid(smooth_t, smooth_v)?;
    let g = grid.len();
    if g < 5 {
        return Err(Error::InsufficientData { needed: 5, got: g });
    }

    let (alpha0, alpha1, alpha2, c_hat, residuals) = match fixed_c {
        None => {
            let x = nalgebra::DMatrix::from_fn(g, 4, |i, j| match j {
                0 => 1.0,
                1 => smooth_t.value[i],
                2 => smooth_t.deriv1[i],
                _ => -smooth_v.value[i],
            });
            let y = nalgebra::DVector::from_fn(g, |i, _| smooth_v.deriv1[i]);
            let fit = ols(&x, &y, "stage2")?;
            (fit.beta[0], fit.beta[1], fit.beta[2], fit.beta[3], fit.residuals)
        }
        Some(c) => {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "fixed clearance must be positive and finite, got {c}"
                )));
            }
            let x = nalgebra::DMatrix::from_fn(g, 3, |i, j| match j {
                0 => 1.0,
                1 => smooth_t.value[i],
                _ => smooth_t.deriv1[i],
            });
            let y =
                nalgebra::DVector::from_fn(g, |i, _| smooth_v.deriv1[i] + c * smooth_v.value[i]);
            let fit = ols(&x, &y, "stage2")?;
            (fit.beta[0], fit.beta[1], fit.beta[2], c, fit.residuals)
        }
    };

    let scale = 1.0_f64
        .max(alpha0.abs())
        .max(alpha1.abs())
        .max(c_hat.abs());
    let (lambda_hat, rho_hat) = if alpha2.abs() <= ALPHA2_DEGENERACY_TOL * scale {
        (None, None)
    } else {
        (Some(-alpha0 / alpha2), Some(alpha1 / alpha2))
    };

    Ok(PsLSResult {
        alpha0,
        alpha1,
        alpha2,
        c_hat,
        lambda_hat,
        rho_hat,
        residuals,
    })
}

/// Stage II: OLS of `V'` on `(1, T, T', -V)`, recovering `c` directly and
/// `lambda`, `rho` through the alpha ratios.
pub fn stage2_psls(smooth_t: &SmoothEstimate, smooth_v: &SmoothEstimate) -> Result<PsLSResult> {
    stage2_impl(smooth_t, smooth_v, None)
}

/// Stage II with the clearance pinned to a known value: OLS of `V' + cV` on
/// `(1, T, T')`.
pub fn stage2_psls_fixed_c(
    smooth_t: &SmoothEstimate,
    smooth_v: &SmoothEstimate,
    clearance: f64,
) -> Result<PsLSResult> {
    stage2_impl(smooth_t, smooth_v, Some(clearance))
}

/// Assembles the Stage III response, regressors, and basis columns on the
/// shared evaluation grid.
pub fn build_stage3_design(
    smooth_t: &SmoothEstimate,
    smooth_v: &SmoothEstimate,
    c_hat: f64,
    spec: &SplineSpec,
) -> Result<StageThreeDesign> {
    if !c_hat.is_finite() {
        return Err(Error::Config(format!(
            "stage three needs a finite clearance, got {c_hat}"
        )));
    }
    let grid = shared_grid(smooth_t, smooth_v)?;
    let g = grid.len();
    let s = spec.n_control();

    let mut z = Vec::with_capacity(g);
    let mut u1 = Vec::with_capacity(g);
    let mut u2 = Vec::with_capacity(g);
    let mut u3 = Vec::with_capacity(g);
    let mut basis_matrix = vec![Vec::with_capacity(g); s];
    for i in 0..g {
        let t = grid[i];
        let v = smooth_v.value[i];
        let vd = smooth_v.deriv1[i];
        let vdd = smooth_v.deriv2[i];
        z.push(vdd + c_hat * vd);
        u1.push(-(vd + c_hat * v));
        u2.push(-(vd * v + c_hat * v * v));
        u3.push(smooth_t.value[i] * v);
        let b = basis_eval(spec, t)?;
        for (j, col) in basis_matrix.iter_mut().enumerate() {
            col.push(b[j]);
        }
    }

    Ok(StageThreeDesign {
        times: grid.to_vec(),
        z,
        u1,
        u2,
        u3,
        basis_matrix,
    })
}

/// `N = median_j(nde_j / eta_j) / delta` over coefficients whose magnitude
/// clears [`COEFF_RATIO_GUARD`]; `None` when nothing clears it or `delta`
/// is unusable. The median keeps one small-coefficient blowup from wrecking
/// the recovery.
pub(crate) fn recover_n(delta: f64, eta_coeffs: &[f64], nde_coeffs: &[f64]) -> Option<f64> {
    if !delta.is_finite() || delta == 0.0 {
        return None;
    }
    let max_abs = eta_coeffs.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    if max_abs == 0.0 {
        return None;
    }
    let ratios: Vec<f64> = eta_coeffs
        .iter()
        .zip(nde_coeffs)
        .filter(|(a, _)| a.abs() >= COEFF_RATIO_GUARD * max_abs)
        .map(|(a, g)| g / a)
        .collect();
    median(&ratios).map(|m| m / delta)
}

/// Relative standard error of the recovered burst size, by the delta method
/// on `median_j(nde_j / a_j) / delta`: the median of the per-ratio relative
/// errors, in quadrature with the relative error of `delta` when present.
///
/// The two regression blocks behind `a_j` and `nde_j` are nearly collinear
/// (the design separates them only through curvature), so the ratio can sit
/// far from the truth while both numerator and denominator carry large
/// standard errors; this propagated figure is what reopens the warm range.
pub(crate) fn n_relative_se(stage3: &Stage3Estimate) -> Option<f64> {
    let (a_se, g_se) = match (&stage3.eta_coeff_se, &stage3.nde_coeff_se) {
        (Some(a), Some(g)) => (a, g),
        _ => return None,
    };
    let max_abs = stage3.eta_coeffs.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    if max_abs == 0.0 {
        return None;
    }
    let rel: Vec<f64> = stage3
        .eta_coeffs
        .iter()
        .zip(&stage3.nde_coeffs)
        .zip(a_se.iter().zip(g_se))
        .filter(|((a, _), _)| a.abs() >= COEFF_RATIO_GUARD * max_abs)
        .map(|((a, g), (sa, sg))| {
            let ra = sa / a.abs();
            let rg = if *g != 0.0 { sg / g.abs() } else { f64::INFINITY };
            (ra * ra + rg * rg).sqrt()
        })
        .collect();
    let ratio_rel = median(&rel)?;
    let delta_rel = match (stage3.delta_se, stage3.delta_hat) {
        (Some(se), d) if d != 0.0 => se / d.abs(),
        _ => 0.0,
    };
    Some((ratio_rel * ratio_rel + delta_rel * delta_rel).sqrt())
}

fn stage3_impl(
    smooth_t: &SmoothEstimate,
    smooth_v: &SmoothEstimate,
    c_hat: f64,
    spec: &SplineSpec,
    fixed_delta: Option<f64>,
) -> Result<Stage3Estimate> {
    let design = build_stage3_design(smooth_t, smooth_v, c_hat, spec)?;
    let g = design.z.len();
    let s = spec.n_control();

    let (delta_hat, eta_coeffs, nde_coeffs, residuals, delta_se, eta_coeff_se, nde_coeff_se) =
        match fixed_delta {
            None => {
                let cols = 1 + 2 * s;
                if g < cols {
                    return Err(Error::InsufficientData { needed: cols, got: g });
                }
                let x = nalgebra::DMatrix::from_fn(g, cols, |i, j| {
                    if j == 0 {
                        design.u1[i]
                    } else if j <= s {
                        design.basis_matrix[j - 1][i] * design.u2[i]
                    } else {
                        design.basis_matrix[j - 1 - s][i] * design.u3[i]
                    }
                });
                let y = nalgebra::DVector::from_fn(g, |i, _| design.z[i]);
                let fit = ols(&x, &y, "stage3")?;
                (
                    fit.beta[0],
                    fit.beta[1..=s].to_vec(),
                    fit.beta[s + 1..].to_vec(),
                    fit.residuals,
                    fit.se.as_ref().map(|se| se[0]),
                    fit.se.as_ref().map(|se| se[1..=s].to_vec()),
                    fit.se.map(|se| se[s + 1..].to_vec()),
                )
            }
            Some(d) => {
                if !d.is_finite() || d <= 0.0 {
                    return Err(Error::Config(format!(
                        "fixed infected-cell death rate must be positive and finite, got {d}"
                    )));
                }
                let cols = 2 * s;
                if g < cols {
                    return Err(Error::InsufficientData { needed: cols, got: g });
                }
                let x = nalgebra::DMatrix::from_fn(g, cols, |i, j| {
                    if j < s {
                        design.basis_matrix[j][i] * design.u2[i]
                    } else {
                        design.basis_matrix[j - s][i] * design.u3[i]
                    }
                });
                let y = nalgebra::DVector::from_fn(g, |i, _| design.z[i] - d * design.u1[i]);
                let fit = ols(&x, &y, "stage3")?;
                (
                    d,
                    fit.beta[..s].to_vec(),
                    fit.beta[s..].to_vec(),
                    fit.residuals,
                    None,
                    fit.se.as_ref().map(|se| se[..s].to_vec()),
                    fit.se.map(|se| se[s..].to_vec()),
                )
            }
        };

    let n_hat = recover_n(delta_hat, &eta_coeffs, &nde_coeffs);
    Ok(Stage3Estimate {
        delta_hat,
        eta_coeffs,
        nde_coeffs,
        n_hat,
        residuals,
        delta_se,
        eta_coeff_se,
        nde_coeff_se,
        design,
    })
}

/// Stage III: OLS of `Z` on `[U1 | b_j U2 | b_j U3]`, yielding the
/// infected-cell death rate, the infection-rate spline coefficients, and the
/// burst size.
pub fn stage3_semiparametric(
    smooth_t: &SmoothEstimate,
    smooth_v: &SmoothEstimate,
    c_hat: f64,
    spec: &SplineSpec,
) -> Result<Stage3Estimate> {
    stage3_impl(smooth_t, smooth_v, c_hat, spec, None)
}

/// Stage III with the infected-cell death rate pinned: OLS of `Z - delta U1`
/// on `[b_j U2 | b_j U3]`.
pub fn stage3_semiparametric_fixed_delta(
    smooth_t: &SmoothEstimate,
    smooth_v: &SmoothEstimate,
    c_hat: f64,
    spec: &SplineSpec,
    delta: f64,
) -> Result<Stage3Estimate> {
    stage3_impl(smooth_t, smooth_v, c_hat, spec, Some(delta))
}

/// Warm range for one positive parameter: `[est/5, est*5]` clipped to the
/// global interval. Falls back to the global interval (flagged `true`) when
/// the estimate is nonpositive, non-finite, or outside the global bounds.
pub(crate) fn warm_range(estimate: f64, global: [f64; 2]) -> ([f64; 2], bool) {
    if !estimate.is_finite() || estimate <= 0.0 || estimate < global[0] || estimate > global[1] {
        return (global, true);
    }
    (
        [
            (estimate / WARM_RANGE_FACTOR).max(global[0]),
            (estimate * WARM_RANGE_FACTOR).min(global[1]),
        ],
        false,
    )
}

/// [`warm_range`] stretched by estimation uncertainty: the multiplicative
/// rule is the floor, widened to cover `estimate +/- 3 se` (clipped to the
/// global interval) when a standard error is available.
///
/// The point of the stretch: a nearly collinear stage regression can park a
/// point estimate far from the truth while reporting, through its standard
/// error, that the value is barely determined. A fixed multiplicative box
/// around such an estimate excludes the truth and no downstream refinement
/// can recover; scaling the box by the reported uncertainty reopens it
/// (up to the global bounds) on exactly those fits, while well-conditioned
/// fits keep the tight multiplicative range.
pub(crate) fn warm_range_se(estimate: f64, se: Option<f64>, global: [f64; 2]) -> ([f64; 2], bool) {
    let (base, clamped) = warm_range(estimate, global);
    if clamped {
        return (base, true);
    }
    match se {
        // An infinite standard error widens all the way to the global
        // interval; NaN fails the comparison and keeps the floor.
        Some(s) if s > 0.0 => (
            [
                base[0].min(estimate - WARM_SE_FACTOR * s).max(global[0]),
                base[1].max(estimate + WARM_SE_FACTOR * s).min(global[1]),
            ],
            false,
        ),
        _ => (base, false),
    }
}

/// Multiplicative floor on the burst-size warm range: `[N/25, N*25]` even
/// when the reported standard error is small. The recovery divides one
/// nearly collinear regression block by another, and that ratio can be
/// confidently wrong by an order of magnitude while both blocks report
/// modest errors; a tenth of the observed-error headroom here costs the
/// search a fraction of a decade, while an excluding box is unrecoverable.
pub(crate) const WARM_N_FACTOR: f64 = 25.0;

/// [`warm_range`] with a multiplicative stretch: `floor_factor` sets the
/// minimum span, and the factor grows to `exp(3 rel_se)` when the relative
/// standard error demands more. The additive stretch of [`warm_range_se`]
/// suits quantities whose global interval is a handful of units wide; a
/// quantity estimated as a ratio and plausibly off by a factor rather than
/// an increment needs its box opened in log scale.
pub(crate) fn warm_range_rel_se(
    estimate: f64,
    rel_se: Option<f64>,
    floor_factor: f64,
    global: [f64; 2],
) -> ([f64; 2], bool) {
    let (_, clamped) = warm_range(estimate, global);
    if clamped {
        return (global, true);
    }
    // exp caps at an overflow-free argument; the global clip absorbs
    // anything larger, including an infinite relative error.
    let stretch = match rel_se {
        Some(r) if r > 0.0 => (WARM_SE_FACTOR * r).min(700.0).exp(),
        _ => 1.0,
    };
    let factor = floor_factor.max(stretch);
    (
        [
            (estimate / factor).max(global[0]),
            (estimate * factor).min(global[1]),
        ],
        false,
    )
}

/// Log-scale margin granted around the pooled scale of the usable spline
/// coefficients when standing in for an unusable one.
pub(crate) const BORROWED_SCALE_FACTOR: f64 = 10.0;

/// Replaces the global fallback on unusable spline-coefficient ranges with
/// the pooled range of the usable ones, widened tenfold each way and clipped
/// to the global interval.
///
/// All coefficients sample one smooth infection rate at neighboring control
/// sites, so even a garbage estimate (negative, non-finite) shares its
/// neighbors' order of magnitude. The global interval spans several more
/// decades than the plausible scale and survives only when every coefficient
/// is unusable.
pub(crate) fn borrow_coefficient_scale(ranges: &mut [[f64; 2]], clamped: &[bool], global: [f64; 2]) {
    let pool = ranges
        .iter()
        .zip(clamped)
        .filter(|(_, &c)| !c)
        .fold([f64::INFINITY, f64::NEG_INFINITY], |acc, (r, _)| {
            [acc[0].min(r[0]), acc[1].max(r[1])]
        });
    if pool[0] > pool[1] {
        return;
    }
    let borrowed = [
        (pool[0] / BORROWED_SCALE_FACTOR).max(global[0]),
        (pool[1] * BORROWED_SCALE_FACTOR).min(global[1]),
    ];
    for (r, _) in ranges.iter_mut().zip(clamped).filter(|(_, &c)| c) {
        *r = borrowed;
    }
}

/// Full pipeline with explicit settings; see [`run_mssb`] for the common
/// fixed-kernel form.
pub fn run_mssb_with(
    obs: &ObservationSet,
    spec: &SplineSpec,
    settings: &MssbSettings,
) -> Result<MssbEstimate> {
    settings.bounds.validate()?;
    for n in [obs.n_t(), obs.n_v()] {
        if n < MIN_OBS_PER_SERIES {
            return Err(Error::InsufficientData {
                needed: MIN_OBS_PER_SERIES,
                got: n,
            });
        }
    }
    let grid = obs.union_times();
    let s = spec.n_control();
    let needed = (1 + 2 * s).max(5);
    if grid.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: grid.len(),
        });
    }

    // Stage I: smooth each raw series onto the shared grid.
    let (kernel_t, kernel_v) = match settings.kernel {
        Some(k) => (k, k),
        None => {
            let h_t = select_bandwidth(obs.t_times(), obs.t_values(), 1, 0)
                .map_err(|e| e.in_stage("stage1"))?;
            let h_v = select_bandwidth(obs.v_times(), obs.v_values(), 1, 0)
                .map_err(|e| e.in_stage("stage1"))?;
            (KernelSpec::epanechnikov(h_t), KernelSpec::epanechnikov(h_v))
        }
    };
    let smooth_t = smooth_state_at(obs.t_times(), obs.t_values(), kernel_t, &grid)
        .map_err(|e| e.in_stage("stage1"))?;
    let smooth_v = smooth_state_at(obs.v_times(), obs.v_values(), kernel_v, &grid)
        .map_err(|e| e.in_stage("stage1"))?;

    // Stage II.
    let psls = match settings.fixed_clearance {
        Some(c) => stage2_psls_fixed_c(&smooth_t, &smooth_v, c),
        None => stage2_psls(&smooth_t, &smooth_v),
    }?;
    let (lambda, rho) = match (psls.lambda_hat, psls.rho_hat) {
        (Some(l), Some(r)) => (l, r),
        _ => {
            return Err(Error::Degenerate {
                stage: "stage2",
                detail: format!(
                    "|alpha2| = {:e} too small to recover lambda and rho",
                    psls.alpha2
                ),
            })
        }
    };

    // Stage III.
    let stage3 = match settings.fixed_delta {
        Some(d) => stage3_semiparametric_fixed_delta(&smooth_t, &smooth_v, psls.c_hat, spec, d),
        None => stage3_semiparametric(&smooth_t, &smooth_v, psls.c_hat, spec),
    }?;
    let n_hat = stage3.n_hat.ok_or_else(|| Error::Degenerate {
        stage: "stage3",
        detail: "no spline coefficient cleared the ratio guard for burst-size recovery".into(),
    })?;

    let constants = ConstantEstimates {
        lambda,
        rho,
        n_virions: n_hat,
        delta: stage3.delta_hat,
        clearance: psls.c_hat,
    };

    // Initial state read off the smoothed curves at the first grid point,
    // using T_i = (V' + cV) / (N delta).
    let v0 = smooth_v.value[0];
    let t_i0 = (smooth_v.deriv1[0] + psls.c_hat * v0) / (n_hat * stage3.delta_hat);
    let t_u0 = smooth_t.value[0] - t_i0;
    let initial_state = InitialStateEstimate { t_u0, t_i0, v0 };

    // Warm-start ranges, recording which estimates were unusable. The
    // stage-three quantities carry their regression standard errors into the
    // range so that an ill-conditioned coefficient split widens its own box
    // instead of trapping the refiner around a bad point, and a coefficient
    // whose estimate is outright garbage borrows its neighbors' scale.
    let b = &settings.bounds;
    let mut clamped_to_global = Vec::new();
    let ranged = |clamped_names: &mut Vec<ParamName>, name, est, se, global| {
        let (range, clamped) = warm_range_se(est, se, global);
        if clamped {
            clamped_names.push(name);
        }
        range
    };
    let mut eta_ranges = Vec::with_capacity(stage3.eta_coeffs.len());
    let mut eta_clamped = Vec::with_capacity(stage3.eta_coeffs.len());
    for (j, &a) in stage3.eta_coeffs.iter().enumerate() {
        let se = stage3.eta_coeff_se.as_ref().map(|se| se[j]);
        let before = clamped_to_global.len();
        eta_ranges.push(ranged(&mut clamped_to_global, ParamName::Coeff(j), a, se, b.eta_coeff));
        eta_clamped.push(clamped_to_global.len() > before);
    }
    borrow_coefficient_scale(&mut eta_ranges, &eta_clamped, b.eta_coeff);
    let (n_range, n_clamped) =
        warm_range_rel_se(n_hat, n_relative_se(&stage3), WARM_N_FACTOR, b.n_virions);
    if n_clamped {
        clamped_to_global.push(ParamName::NVirions);
    }
    let cl = &mut clamped_to_global;
    let search_ranges = SearchRanges {
        lambda: ranged(cl, ParamName::Lambda, lambda, None, b.lambda),
        rho: ranged(cl, ParamName::Rho, rho, None, b.rho),
        n_virions: n_range,
        delta: ranged(cl, ParamName::Delta, stage3.delta_hat, stage3.delta_se, b.delta),
        clearance: ranged(cl, ParamName::Clearance, psls.c_hat, None, b.clearance),
        eta_coeffs: eta_ranges,
        t_u0: ranged(cl, ParamName::TU0, t_u0, None, b.t_u0),
        t_i0: ranged(cl, ParamName::TI0, t_i0, None, b.t_i0),
        v0: ranged(cl, ParamName::V0, v0, None, b.v0),
    };

    Ok(MssbEstimate {
        constants,
        eta_coeffs: stage3.eta_coeffs,
        spline_spec: spec.clone(),
        search_ranges,
        initial_state,
        clamped_to_global,
        bandwidths: [kernel_t.bandwidth_h, kernel_v.bandwidth_h],
        psls,
    })
}

/// Full three-stage pipeline with one smoothing kernel for both series:
/// smooth, recover `(c, lambda, rho)`, recover `(delta, N, eta)`, and derive
/// warm-start ranges.
pub fn run_mssb(obs: &ObservationSet, spec: &SplineSpec, kernel: KernelSpec) -> Result<MssbEstimate> {
    run_mssb_with(
        obs,
        spec,
        &MssbSettings {
            kernel: Some(kernel),
            ..MssbSettings::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use crate::bspline::{make_spec, ControlSpacing};
    use crate::hiv::{integrate, rhs, ConstantParams, EtaFunction, StateVector};

    fn bench_params() -> ConstantParams {
        ConstantParams::new(36.0, 0.108, 1000.0, 0.5, 3.0).unwrap()
    }

    fn bench_init() -> StateVector {
        StateVector::new(600.0, 30.0, 1e5)
    }

    fn bench_eta() -> EtaFunction {
        EtaFunction::callable("9e-5*(1-0.9*cos(pi*t/1000))", (0.0, 20.0), |t| {
            9e-5 * (1.0 - 0.9 * (std::f64::consts::PI * t / 1000.0).cos())
        })
    }

    /// Exact state curves and derivatives on `grid`, packaged as smoothing
    /// output. Derivatives are computed from the model equations applied to
    /// the integrated states, so every substitution identity holds to machine
    /// precision and the regressions see their ideal inputs.
    fn plug_in_curves(
        params: &ConstantParams,
        eta: &EtaFunction,
        init: StateVector,
        grid: &[f64],
    ) -> (SmoothEstimate, SmoothEstimate) {
        let sol = integrate(init, params, eta, grid, 0.005).unwrap();
        let g = grid.len();
        let (mut tv, mut td1, mut td2) = (Vec::with_capacity(g), Vec::with_capacity(g), Vec::with_capacity(g));
        let (mut vv, mut vd1, mut vd2) = (Vec::with_capacity(g), Vec::with_capacity(g), Vec::with_capacity(g));
        for (i, state) in sol.states().iter().enumerate() {
            let d = rhs(state, grid[i], params, eta).unwrap();
            tv.push(state.total_t());
            td1.push(d.t_u + d.t_i);
            td2.push(-params.rho * d.t_u - params.delta * d.t_i);
            vv.push(state.v);
            vd1.push(d.v);
            vd2.push(params.n_virions * params.delta * d.t_i - params.clearance * d.v);
        }
        let wrap = |value: Vec<f64>, d1: Vec<f64>, d2: Vec<f64>| SmoothEstimate {
            eval_times: grid.to_vec(),
            value,
            deriv1: d1,
            deriv2: d2,
            bandwidths_used: [0.0; 3],
            boundary: vec![false; g],
        };
        (wrap(tv, td1, td2), wrap(vv, vd1, vd2))
    }

    fn fine_grid() -> Vec<f64> {
        (0..=200).map(|j| 0.1 * j as f64).collect()
    }

    #[test]
    fn stage2_recovers_alpha_oracle_from_exact_curves() {
        let params = bench_params();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &bench_eta(), bench_init(), &fine_grid());
        let r = stage2_psls(&smooth_t, &smooth_v).unwrap();
        // alpha0 = -N d l / (r - d) = 18000 / 0.392, and so on by hand.
        assert_relative_eq!(r.alpha0, 45918.36734693878, max_relative = 1e-6);
        assert_relative_eq!(r.alpha1, -137.7551020408163, max_relative = 1e-6);
        assert_relative_eq!(r.alpha2, -1275.5102040816328, max_relative = 1e-6);
        assert_relative_eq!(r.c_hat, 3.0, max_relative = 1e-6);
        assert!(!r.is_degenerate());
        assert_relative_eq!(r.lambda_hat.unwrap(), 36.0, max_relative = 1e-6);
        assert_relative_eq!(r.rho_hat.unwrap(), 0.108, max_relative = 1e-6);
        // The exact linear relation leaves only rounding in the residuals.
        let max_y = smooth_v.deriv1.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let max_resid = r.residuals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_resid <= 1e-8 * max_y, "residual {max_resid} vs scale {max_y}");
    }

    #[test]
    fn stage2_recovery_identities_hold_by_construction() {
        let params = bench_params();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &bench_eta(), bench_init(), &fine_grid());
        let r = stage2_psls(&smooth_t, &smooth_v).unwrap();
        assert_relative_eq!(r.lambda_hat.unwrap() * r.alpha2, -r.alpha0, max_relative = 1e-12);
        assert_relative_eq!(r.rho_hat.unwrap() * r.alpha2, r.alpha1, max_relative = 1e-12);
    }

    #[test]
    fn stage2_fixed_clearance_matches_free_fit() {
        let params = bench_params();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &bench_eta(), bench_init(), &fine_grid());
        let r = stage2_psls_fixed_c(&smooth_t, &smooth_v, 3.0).unwrap();
        assert_eq!(r.c_hat, 3.0);
        assert_relative_eq!(r.alpha0, 45918.36734693878, max_relative = 1e-6);
        assert_relative_eq!(r.alpha1, -137.7551020408163, max_relative = 1e-6);
        assert_relative_eq!(r.alpha2, -1275.5102040816328, max_relative = 1e-6);
        assert!(stage2_psls_fixed_c(&smooth_t, &smooth_v, -1.0).is_err());
    }

    #[test]
    fn stage2_is_invariant_to_duplicating_every_row() {
        let params = bench_params();
        let grid: Vec<f64> = (0..=40).map(|j| 0.5 * j as f64).collect();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &bench_eta(), bench_init(), &grid);
        let double = |s: &SmoothEstimate| SmoothEstimate {
            eval_times: [s.eval_times.clone(), s.eval_times.clone()].concat(),
            value: [s.value.clone(), s.value.clone()].concat(),
            deriv1: [s.deriv1.clone(), s.deriv1.clone()].concat(),
            deriv2: [s.deriv2.clone(), s.deriv2.clone()].concat(),
            bandwidths_used: s.bandwidths_used,
            boundary: [s.boundary.clone(), s.boundary.clone()].concat(),
        };
        let base = stage2_psls(&smooth_t, &smooth_v).unwrap();
        let doubled = stage2_psls(&double(&smooth_t), &double(&smooth_v)).unwrap();
        assert_relative_eq!(doubled.alpha0, base.alpha0, max_relative = 1e-9);
        assert_relative_eq!(doubled.alpha1, base.alpha1, max_relative = 1e-9);
        assert_relative_eq!(doubled.alpha2, base.alpha2, max_relative = 1e-9);
        assert_relative_eq!(doubled.c_hat, base.c_hat, max_relative = 1e-9);
    }

    fn synthetic_curves(g: usize, viral: impl Fn(usize) -> (f64, f64, f64)) -> (SmoothEstimate, SmoothEstimate) {
        let times: Vec<f64> = (0..g).map(|i| i as f64).collect();
        let t_value: Vec<f64> = (0..g).map(|i| 600.0 + 10.0 * i as f64).collect();
        let t_deriv: Vec<f64> = (0..g).map(|i| 10.0 + (i as f64).sin()).collect();
        let smooth_t = SmoothEstimate {
            eval_times: times.clone(),
            value: t_value,
            deriv1: t_deriv,
            deriv2: vec![0.0; g],
            bandwidths_used: [0.0; 3],
            boundary: vec![false; g],
        };
        let (mut v, mut vd1, mut vd2) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..g {
            let (a, b, c) = viral(i);
            v.push(a);
            vd1.push(b);
            vd2.push(c);
        }
        let smooth_v = SmoothEstimate {
            eval_times: times,
            value: v,
            deriv1: vd1,
            deriv2: vd2,
            bandwidths_used: [0.0; 3],
            boundary: vec![false; g],
        };
        (smooth_t, smooth_v)
    }

    #[test]
    fn stage2_constant_viral_load_is_rank_deficient() {
        // V constant makes the -V column collinear with the intercept.
        let (smooth_t, smooth_v) = synthetic_curves(8, |_| (5e4, 0.0, 0.0));
        match stage2_psls(&smooth_t, &smooth_v) {
            Err(Error::RankDeficient { stage, rank, cols }) => {
                assert_eq!(stage, "stage2");
                assert_eq!(cols, 4);
                assert!(rank < cols);
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn stage2_near_zero_alpha2_flags_degenerate_recovery() {
        // V' built without any T' contribution: alpha2 is exactly zero in
        // the population, so the fitted value sits at rounding level.
        let t_curve: Vec<f64> = (0..12).map(|i| 600.0 + 10.0 * i as f64).collect();
        let (smooth_t, smooth_v) = synthetic_curves(12, |i| {
            let v = 100.0 * (1.0 + 0.1 * (i as f64).cos());
            let vd = 10.0 + 2.0 * t_curve[i] - 3.0 * v;
            (v, vd, 0.0)
        });
        let r = stage2_psls(&smooth_t, &smooth_v).unwrap();
        assert!(r.is_degenerate());
        assert!(r.lambda_hat.is_none() && r.rho_hat.is_none());
        assert_relative_eq!(r.alpha0, 10.0, max_relative = 1e-6);
        assert_relative_eq!(r.alpha1, 2.0, max_relative = 1e-6);
        assert_relative_eq!(r.c_hat, 3.0, max_relative = 1e-6);
    }

    #[test]
    fn stage2_rejects_short_or_mismatched_grids() {
        let params = bench_params();
        let short: Vec<f64> = (0..4).map(|j| j as f64).collect();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &bench_eta(), bench_init(), &short);
        assert!(matches!(
            stage2_psls(&smooth_t, &smooth_v),
            Err(Error::InsufficientData { needed: 5, got: 4 })
        ));

        let (smooth_t, _) = plug_in_curves(&params, &bench_eta(), bench_init(), &fine_grid());
        let other: Vec<f64> = (0..=200).map(|j| 0.09 * j as f64).collect();
        let (_, smooth_v) = plug_in_curves(&params, &bench_eta(), bench_init(), &other);
        assert!(matches!(
            stage2_psls(&smooth_t, &smooth_v),
            Err(Error::Config(_))
        ));
    }

    fn spline_truth() -> (SplineSpec, Vec<f64>, EtaFunction) {
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        let coeffs = vec![5e-5, 1.2e-4, 8e-5];
        let eta = EtaFunction::spline(spec.clone(), coeffs.clone()).unwrap();
        (spec, coeffs, eta)
    }

    #[test]
    fn stage3_recovers_delta_coeffs_and_burst_size_exactly() {
        let params = bench_params();
        let (spec, coeffs, eta) = spline_truth();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &eta, bench_init(), &fine_grid());
        let r = stage3_semiparametric(&smooth_t, &smooth_v, 3.0, &spec).unwrap();
        assert_relative_eq!(r.delta_hat, 0.5, max_relative = 1e-6);
        for (a_hat, a) in r.eta_coeffs.iter().zip(&coeffs) {
            assert_relative_eq!(a_hat, a, max_relative = 1e-6);
        }
        for (g_hat, a) in r.nde_coeffs.iter().zip(&coeffs) {
            // g_j = N * delta * a_j = 500 a_j.
            assert_relative_eq!(g_hat, &(500.0 * a), max_relative = 1e-6);
        }
        assert_relative_eq!(r.n_hat.unwrap(), 1000.0, max_relative = 1e-6);
        assert_eq!(r.design.z.len(), fine_grid().len());
        assert_eq!(r.design.basis_matrix.len(), 3);
        // Exact curves leave almost no residual, so the reported standard
        // errors are negligible next to the coefficients themselves.
        let delta_se = r.delta_se.unwrap();
        assert!(delta_se.is_finite() && delta_se < 1e-6 * r.delta_hat.abs());
        for (se, a) in r.eta_coeff_se.as_ref().unwrap().iter().zip(&r.eta_coeffs) {
            assert!(se.is_finite() && *se >= 0.0 && *se < 1e-4 * a.abs());
        }
    }

    #[test]
    fn stage3_fixed_delta_variant_recovers_the_rest() {
        let params = bench_params();
        let (spec, coeffs, eta) = spline_truth();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &eta, bench_init(), &fine_grid());
        let r = stage3_semiparametric_fixed_delta(&smooth_t, &smooth_v, 3.0, &spec, 0.5).unwrap();
        assert_eq!(r.delta_hat, 0.5);
        for (a_hat, a) in r.eta_coeffs.iter().zip(&coeffs) {
            assert_relative_eq!(a_hat, a, max_relative = 1e-6);
        }
        assert_relative_eq!(r.n_hat.unwrap(), 1000.0, max_relative = 1e-6);
        assert!(
            stage3_semiparametric_fixed_delta(&smooth_t, &smooth_v, 3.0, &spec, 0.0).is_err()
        );
    }

    #[test]
    fn stage3_zero_viral_load_is_rank_deficient() {
        let (spec, _, _) = spline_truth();
        let (smooth_t, smooth_v) = synthetic_curves(9, |_| (0.0, 0.0, 0.0));
        match stage3_semiparametric(&smooth_t, &smooth_v, 3.0, &spec) {
            Err(Error::RankDeficient { stage, rank, .. }) => {
                assert_eq!(stage, "stage3");
                assert_eq!(rank, 0);
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn stage3_rejects_non_finite_clearance() {
        let params = bench_params();
        let (spec, _, eta) = spline_truth();
        let (smooth_t, smooth_v) = plug_in_curves(&params, &eta, bench_init(), &fine_grid());
        assert!(stage3_semiparametric(&smooth_t, &smooth_v, f64::NAN, &spec).is_err());
    }

    #[test]
    fn burst_size_recovery_guards_tiny_coefficients_and_uses_the_median() {
        // Middle coefficient is far below the guard; its junk ratio is
        // excluded and the remaining ratios agree on N * delta = 500.
        let n = recover_n(0.5, &[2e-5, 1e-30, 1e-5], &[0.01, 7.0, 0.005]).unwrap();
        assert_relative_eq!(n, 1000.0, max_relative = 1e-12);
        // Median of ratios [500, 400, 525] is 500.
        let n = recover_n(0.5, &[2e-5, 1e-5, 4e-5], &[0.01, 0.004, 0.021]).unwrap();
        assert_relative_eq!(n, 1000.0, max_relative = 1e-12);
        assert_eq!(recover_n(0.5, &[0.0, 0.0], &[1.0, 1.0]), None);
        assert_eq!(recover_n(0.0, &[1e-5], &[5e-3]), None);
        assert_eq!(recover_n(f64::NAN, &[1e-5], &[5e-3]), None);
    }

    fn sampled_observations(times: &[f64], eta: &EtaFunction) -> ObservationSet {
        let params = bench_params();
        let mut full = Vec::with_capacity(times.len() + 1);
        full.push(0.0);
        full.extend_from_slice(times);
        let sol = integrate(bench_init(), &params, eta, &full, 0.01).unwrap();
        let totals: Vec<f64> = sol.totals()[1..].to_vec();
        let viral: Vec<f64> = sol.viral()[1..].to_vec();
        ObservationSet::new(times.to_vec(), totals, times.to_vec(), viral).unwrap()
    }

    #[test]
    fn full_pipeline_on_dense_noiseless_data_recovers_all_constants() {
        let times: Vec<f64> = (1..=2000).map(|j| 0.01 * j as f64).collect();
        let obs = sampled_observations(&times, &bench_eta());
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        // Noiseless data: smoothing bias is the only error source, and the
        // product-regression split of stage three amplifies it, so the
        // window is made as narrow as the derivative passes allow at this
        // spacing. Estimates converge to truth as the bandwidth shrinks.
        let est = run_mssb(&obs, &spec, KernelSpec::epanechnikov(0.03)).unwrap();

        let truth = [36.0, 0.108, 1000.0, 0.5, 3.0];
        for (got, want) in est.constants.as_array().iter().zip(truth) {
            let are = (got - want).abs() / want;
            assert!(are < 0.05, "estimate {got} vs truth {want}: ARE {are:.3}");
        }

        // Warm ranges bracket their estimates; nothing was clamped.
        assert!(est.clamped_to_global.is_empty());
        let ranges = &est.search_ranges;
        for (r, e) in [
            (ranges.lambda, est.constants.lambda),
            (ranges.rho, est.constants.rho),
            (ranges.n_virions, est.constants.n_virions),
            (ranges.delta, est.constants.delta),
            (ranges.clearance, est.constants.clearance),
        ] {
            assert!(r[0] <= e && e <= r[1], "range {r:?} misses {e}");
        }
        for (r, e) in ranges.eta_coeffs.iter().zip(&est.eta_coeffs) {
            assert!(r[0] <= *e && *e <= r[1]);
        }

        // Initial-state estimates: the curve value is solid, the derivative
        // at the left boundary less so; assert honest windows around truth
        // T_u(0) = 600, T_i(0) = 30, V(0.01) about 9.7e4.
        assert!(est.initial_state.v0 > 0.9e5 * 0.95 && est.initial_state.v0 < 1.05e5);
        assert!(est.initial_state.t_i0 > 5.0 && est.initial_state.t_i0 < 120.0);
        assert!(est.initial_state.t_u0 > 480.0 && est.initial_state.t_u0 < 700.0);

        // Estimated eta is the spline it claims to be.
        let manual: f64 = est
            .eta_coeffs
            .iter()
            .zip(basis_eval(&spec, 10.0).unwrap())
            .map(|(a, b)| a * b)
            .sum();
        assert_relative_eq!(est.eta_at(10.0).unwrap(), manual, max_relative = 1e-12);
    }

    #[test]
    fn pipeline_rejects_short_series() {
        let times: Vec<f64> = (1..=5).map(|j| 4.0 * j as f64).collect();
        let obs = sampled_observations(&times, &bench_eta());
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        let err = run_mssb(&obs, &spec, KernelSpec::epanechnikov(2.0)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("at least 10"), "unexpected error: {text}");
    }

    #[test]
    fn warm_range_rule_and_fallbacks() {
        let global = [1e-3, 1e4];
        assert_eq!(warm_range(10.0, global), ([2.0, 50.0], false));
        // Upper end clipped to the global bound.
        assert_eq!(warm_range(5000.0, global), ([1000.0, 1e4], false));
        // Nonpositive, non-finite, or out-of-bounds estimates fall back.
        assert_eq!(warm_range(-2.0, global), (global, true));
        assert_eq!(warm_range(0.0, global), (global, true));
        assert_eq!(warm_range(f64::NAN, global), (global, true));
        assert_eq!(warm_range(1e-4, global), (global, true));
        assert_eq!(warm_range(2e4, global), (global, true));
    }

    #[test]
    fn warm_range_se_stretches_only_past_the_multiplicative_floor() {
        let global = [1e-3, 1e4];
        // No error, tiny error: the floor stands.
        assert_eq!(warm_range_se(10.0, None, global), ([2.0, 50.0], false));
        assert_eq!(warm_range_se(10.0, Some(0.5), global), ([2.0, 50.0], false));
        // A large error stretches both ends: 10 +/- 3*30 = [-80, 100],
        // lower end clipped to the global bound.
        assert_eq!(warm_range_se(10.0, Some(30.0), global), ([1e-3, 100.0], false));
        // Infinite error opens the full global interval; NaN keeps the floor.
        assert_eq!(warm_range_se(10.0, Some(f64::INFINITY), global), (global, false));
        assert_eq!(warm_range_se(10.0, Some(f64::NAN), global), ([2.0, 50.0], false));
        // A fallback estimate stays a fallback regardless of the error.
        assert_eq!(warm_range_se(-2.0, Some(1.0), global), (global, true));
    }

    #[test]
    fn search_ranges_flatten_to_a_box_in_canonical_order() {
        let ranges = SearchRanges {
            lambda: [1.0, 2.0],
            rho: [0.1, 0.2],
            n_virions: [100.0, 200.0],
            delta: [0.3, 0.4],
            clearance: [2.0, 4.0],
            eta_coeffs: vec![[1e-6, 1e-4], [2e-6, 2e-4]],
            t_u0: [500.0, 700.0],
            t_i0: [10.0, 50.0],
            v0: [1e4, 1e6],
        };
        let with_ics = ranges.to_search_box(true).unwrap();
        assert_eq!(with_ics.dim(), 10);
        assert_eq!(with_ics.lower()[0], 1.0);
        assert_eq!(with_ics.upper()[4], 4.0);
        assert_eq!(with_ics.lower()[5], 1e-6);
        assert_eq!(with_ics.upper()[9], 1e6);
        let without = ranges.to_search_box(false).unwrap();
        assert_eq!(without.dim(), 7);
        assert_eq!(ranges.range(ParamName::Coeff(1)), Some([2e-6, 2e-4]));
        assert_eq!(ranges.range(ParamName::Coeff(2)), None);
    }

    #[test]
    fn global_bounds_default_is_valid_and_bad_bounds_are_rejected() {
        GlobalBounds::default().validate().unwrap();
        let mut bad = GlobalBounds::default();
        bad.delta = [5.0, 5.0];
        assert!(bad.validate().is_err());
        bad.delta = [-1.0, 5.0];
        assert!(bad.validate().is_err());
    }

    proptest! {
        /// Any positive in-bounds estimate gets a bracketing range inside the
        /// global interval; everything else falls back to the global
        /// interval with the clamp flag set.
        #[test]
        fn warm_ranges_always_bracket_or_fall_back(est in -1e6_f64..1e6_f64) {
            let global = [1e-3, 1e4];
            let (range, clamped) = warm_range(est, global);
            prop_assert!(range[0] < range[1]);
            if clamped {
                prop_assert_eq!(range, global);
            } else {
                prop_assert!(range[0] <= est && est <= range[1]);
                prop_assert!(range[0] >= global[0] && range[1] <= global[1]);
            }
        }

        /// The uncertainty-stretched range always contains the plain range
        /// and stays inside the global interval.
        #[test]
        fn stretched_ranges_contain_the_plain_range(
            est in -1e6_f64..1e6_f64,
            se in proptest::option::of(0.0_f64..1e7),
        ) {
            let global = [1e-3, 1e4];
            let (plain, clamped_plain) = warm_range(est, global);
            let (wide, clamped_wide) = warm_range_se(est, se, global);
            prop_assert_eq!(clamped_plain, clamped_wide);
            prop_assert!(wide[0] <= plain[0] && plain[1] <= wide[1]);
            prop_assert!(wide[0] >= global[0] && wide[1] <= global[1]);
        }
    }
}
