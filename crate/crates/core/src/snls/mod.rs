//! Spline-enhanced nonlinear least squares: the refinement stage that turns a
//! multistage warm start into final parameter estimates.
//!
//! The model trajectory is integrated once per candidate parameter vector
//! over the merged observation grid, compared against both observed series on
//! their configured scales, and the weighted residual sum of squares is
//! minimized with the hybrid global optimizer over the free coordinates of a
//! [`ThetaVector`]. Model selection fits a grid of spline bases for the
//! infection rate and ranks them by the small-sample-corrected information
//! criterion; bootstrap resampling of centered residuals yields confidence
//! intervals around a finished fit.
//!
//! Parameter vectors that cannot be scored (trajectory blow-up, nonpositive
//! rates, values a log scale cannot compare) are never surfaced to the
//! optimizer as errors. They score in a penalty band at [`PENALTY_FLOOR`]
//! and above, graded by the distance to the search-box center so the search
//! is pushed back toward scoreable territory.

mod bootstrap;
mod criteria;
mod theta;

pub use bootstrap::{bootstrap_ci, BootstrapResult};
pub use criteria::{information_criteria, Criteria};
pub use theta::{ThetaLayout, ThetaVector};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bspline::{curve_eval, make_spec, ControlSpacing, SplineSpec};
use crate::data::{ObservationSet, ScaleKind};
use crate::error::{Error, Result};
use crate::hiv::{
    integrate_with_cap, ConstantParams, EtaFunction, StateVector, DEFAULT_STATE_CAP, DEFAULT_STEP,
};
use crate::mssb::{warm_range, GlobalBounds, MssbEstimate, SearchRanges};
use crate::optim::{
    hybrid_minimize, hybrid_minimize_from, DeConfig, HybridConfig, RefineConfig, ScatterConfig,
    SearchBox, TerminationReason,
};
use crate::param::ParamName;
use crate::util::derive_seed;

/// Smallest value an unscoreable parameter vector can receive; every genuine
/// residual sum of squares from a successful fit lies strictly below it.
pub const PENALTY_FLOOR: f64 = 1e12;

/// Points in the dense infection-rate curve attached to a fit, equally spaced
/// over the observation span.
pub const ETA_GRID_LEN: usize = 200;

/// ODE solver controls for objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Base RK4 step; sub-steps shrink to land on each output time.
    pub step: f64,
    /// Any state component beyond this aborts the trajectory as a blow-up.
    pub state_cap: f64,
    /// Time at which the initial state applies; at or before the first
    /// observation.
    pub t0: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            state_cap: DEFAULT_STATE_CAP,
            t0: 0.0,
        }
    }
}

/// A prepared least-squares problem: the data, the spline basis for the
/// infection rate, the coordinate layout, and the merged integration grid
/// with index maps back into each observed series.
#[derive(Debug, Clone)]
pub struct SnlsProblem {
    obs: ObservationSet,
    spec: SplineSpec,
    layout: ThetaLayout,
    fixed_init: Option<StateVector>,
    settings: SolverSettings,
    grid: Vec<f64>,
    t_slots: Vec<usize>,
    v_slots: Vec<usize>,
}

impl SnlsProblem {
    pub fn new(
        obs: &ObservationSet,
        spec: SplineSpec,
        layout: ThetaLayout,
        fixed_init: Option<StateVector>,
        settings: SolverSettings,
    ) -> Result<Self> {
        if layout.n_coeffs() != spec.n_control() {
            return Err(Error::Config(format!(
                "parameter layout carries {} spline coefficients but the basis has {}",
                layout.n_coeffs(),
                spec.n_control()
            )));
        }
        match (layout.with_initial_state(), &fixed_init) {
            (true, Some(_)) => {
                return Err(Error::Config(
                    "initial state is part of the parameter vector; drop the fixed one".into(),
                ));
            }
            (false, None) => {
                return Err(Error::Config(
                    "layout without initial-state coordinates needs a fixed initial state".into(),
                ));
            }
            _ => {}
        }
        if let Some(init) = &fixed_init {
            if !init.is_finite() || init.t_u < 0.0 || init.t_i < 0.0 || init.v < 0.0 {
                return Err(Error::Data(format!(
                    "fixed initial state must be finite and nonnegative, got {init:?}"
                )));
            }
        }
        if !settings.step.is_finite() || settings.step <= 0.0 {
            return Err(Error::Config(format!(
                "solver step must be positive, got {}",
                settings.step
            )));
        }
        if !settings.state_cap.is_finite() || settings.state_cap <= 0.0 {
            return Err(Error::Config(format!(
                "state cap must be positive, got {}",
                settings.state_cap
            )));
        }
        if !settings.t0.is_finite() {
            return Err(Error::Config(format!(
                "initial time must be finite, got {}",
                settings.t0
            )));
        }
        let first_obs = obs.t_times()[0].min(obs.v_times()[0]);
        let last_obs = obs.t_times()[obs.n_t() - 1].max(obs.v_times()[obs.n_v() - 1]);
        if settings.t0 > first_obs {
            return Err(Error::Config(format!(
                "initial time {} lies after the first observation at {first_obs}",
                settings.t0
            )));
        }
        let (lo, hi) = spec.domain();
        let tol = 1e-9 * (1.0 + (hi - lo).abs());
        if settings.t0 < lo - tol || last_obs > hi + tol {
            return Err(Error::Config(format!(
                "spline domain [{lo}, {hi}] must cover the integration span [{}, {last_obs}]",
                settings.t0
            )));
        }

        // Merged strictly-increasing grid starting at t0; an observation
        // exactly at t0 shares its slot with the initial state.
        let (a, b) = (obs.t_times(), obs.v_times());
        let mut grid = Vec::with_capacity(1 + obs.n_total());
        grid.push(settings.t0);
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            let next = match (a.get(i), b.get(j)) {
                (Some(&x), Some(&y)) => x.min(y),
                (Some(&x), None) => x,
                (None, Some(&y)) => y,
                (None, None) => unreachable!(),
            };
            if next > *grid.last().expect("grid starts with t0") {
                grid.push(next);
            }
            if i < a.len() && a[i] == next {
                i += 1;
            }
            if j < b.len() && b[j] == next {
                j += 1;
            }
        }
        let slot = |t: f64| {
            grid.binary_search_by(|g| g.partial_cmp(&t).expect("grid times are ordered"))
                .expect("grid contains every observation time")
        };
        let t_slots = a.iter().map(|&t| slot(t)).collect();
        let v_slots = b.iter().map(|&t| slot(t)).collect();

        Ok(Self {
            obs: obs.clone(),
            spec,
            layout,
            fixed_init,
            settings,
            grid,
            t_slots,
            v_slots,
        })
    }

    pub fn layout(&self) -> ThetaLayout {
        self.layout
    }

    pub fn spec(&self) -> &SplineSpec {
        &self.spec
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn settings(&self) -> SolverSettings {
        self.settings
    }

    fn unpack(&self, values: &[f64]) -> Result<(ConstantParams, EtaFunction, StateVector)> {
        debug_assert_eq!(values.len(), self.layout.dim());
        let params = ConstantParams::new(values[0], values[1], values[2], values[3], values[4])?;
        let coeffs = values[5..5 + self.layout.n_coeffs()].to_vec();
        let eta = EtaFunction::spline(self.spec.clone(), coeffs)?;
        let init = match self.fixed_init {
            Some(init) => init,
            None => {
                let base = 5 + self.layout.n_coeffs();
                StateVector::new(values[base], values[base + 1], values[base + 2])
            }
        };
        Ok((params, eta, init))
    }

    fn score(&self, params: &ConstantParams, eta: &EtaFunction, init: StateVector) -> Result<f64> {
        let sol = integrate_with_cap(
            init,
            params,
            eta,
            &self.grid,
            self.settings.step,
            self.settings.state_cap,
        )?;
        let states = sol.states();
        let sum_series = |slots: &[usize],
                          observed: &[f64],
                          scale: ScaleKind,
                          read: fn(&StateVector) -> f64|
         -> Result<f64> {
            let mut ss = 0.0;
            for (&slot, &y) in slots.iter().zip(observed) {
                let model = read(&states[slot]);
                if scale == ScaleKind::Log10 && !(model > 0.0) {
                    return Err(Error::Data(format!(
                        "model value {model} cannot be compared on the log10 scale"
                    )));
                }
                let r = scale.apply(y) - scale.apply(model);
                ss += r * r;
            }
            Ok(ss)
        };
        let ss_t = sum_series(&self.t_slots, self.obs.t_values(), self.obs.t_scale(), |s| {
            s.total_t()
        })?;
        let ss_v = sum_series(&self.v_slots, self.obs.v_values(), self.obs.v_scale(), |s| s.v)?;
        let rss = self.obs.t_weight() * ss_t + self.obs.v_weight() * ss_v;
        if !rss.is_finite() {
            return Err(Error::Data(format!("residual sum of squares overflowed: {rss}")));
        }
        Ok(rss)
    }

    /// Weighted residual sum of squares; an error when the trajectory cannot
    /// be scored at this point.
    pub fn try_rss(&self, values: &[f64]) -> Result<f64> {
        let (params, eta, init) = self.unpack(values)?;
        self.score(&params, &eta, init)
    }

    /// [`try_rss`](Self::try_rss) with the spline rate replaced by an
    /// explicit function; the coefficient block of `values` is ignored. This
    /// is the oracle used to validate the scoring path against simulation
    /// truth whose rate is not a spline.
    pub fn try_rss_with_eta(&self, values: &[f64], eta: &EtaFunction) -> Result<f64> {
        debug_assert_eq!(values.len(), self.layout.dim());
        let params = ConstantParams::new(values[0], values[1], values[2], values[3], values[4])?;
        let init = match self.fixed_init {
            Some(init) => init,
            None => {
                let base = 5 + self.layout.n_coeffs();
                StateVector::new(values[base], values[base + 1], values[base + 2])
            }
        };
        self.score(&params, eta, init)
    }

    /// Optimizer-facing value: the residual sum of squares, or a penalty of
    /// `PENALTY_FLOOR * (1 + d)` where `d` is the normalized distance from
    /// `values` to the center of `reference`.
    pub fn penalized_rss(&self, values: &[f64], reference: &SearchBox) -> f64 {
        match self.try_rss(values) {
            Ok(rss) => rss,
            Err(_) => PENALTY_FLOOR * (1.0 + reference.normalized_distance_to_center(values)),
        }
    }

    /// Model output at the two observation grids (raw scale).
    pub fn trajectories(&self, values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (params, eta, init) = self.unpack(values)?;
        let sol = integrate_with_cap(
            init,
            &params,
            &eta,
            &self.grid,
            self.settings.step,
            self.settings.state_cap,
        )?;
        let states = sol.states();
        let fitted_t = self.t_slots.iter().map(|&s| states[s].total_t()).collect();
        let fitted_v = self.v_slots.iter().map(|&s| states[s].v).collect();
        Ok((fitted_t, fitted_v))
    }
}

/// Standalone objective evaluation for a parameter vector that carries its
/// own initial state. Construction problems (coefficient-count mismatch,
/// uncovered domain) are errors; everything after that scores as a finite
/// value, with unscoreable vectors in the penalty band.
pub fn rss_objective(
    theta: &ThetaVector,
    obs: &ObservationSet,
    spec: &SplineSpec,
    solver: &SolverSettings,
) -> Result<f64> {
    if !theta.layout().with_initial_state() {
        return Err(Error::Config(
            "standalone objective evaluation needs the initial state inside the parameter vector"
                .into(),
        ));
    }
    let problem = SnlsProblem::new(obs, spec.clone(), theta.layout(), None, *solver)?;
    Ok(problem.penalized_rss(theta.values(), theta.bounds()))
}

/// Where the refinement starts from.
#[derive(Debug, Clone)]
pub enum WarmStart<'a> {
    /// Point estimates and per-parameter ranges from the multistage pass.
    Mssb(&'a MssbEstimate),
    /// An explicit full-layout search box, searched without a warm point.
    Bounds(SearchBox),
}

/// Controls for [`fit_snls`] and [`select_model`].
#[derive(Debug, Clone)]
pub struct SnlsSettings {
    pub solver: SolverSettings,
    /// `None` selects [`SnlsSettings::default_optimizer`] sized for the free
    /// dimension. The nested seed is overridden by `seed` either way.
    pub optimizer: Option<HybridConfig>,
    pub seed: u64,
    /// Coordinates pinned during the search.
    pub fixed: Vec<(ParamName, f64)>,
    /// Whether the initial state enters the parameter vector.
    pub estimate_initial_state: bool,
    /// Required when the initial state is not estimated.
    pub initial_state: Option<StateVector>,
    /// Outer limits used when coefficient ranges must be rebuilt for a basis
    /// the warm estimate was not computed on.
    pub bounds: GlobalBounds,
    /// Control-site spacing for bases built from scratch during model
    /// selection with a box warm start.
    pub spacing: ControlSpacing,
}

impl Default for SnlsSettings {
    fn default() -> Self {
        Self {
            solver: SolverSettings::default(),
            optimizer: None,
            seed: 0,
            fixed: Vec::new(),
            estimate_initial_state: true,
            initial_state: None,
            bounds: GlobalBounds::default(),
            spacing: ControlSpacing::Linear,
        }
    }
}

impl SnlsSettings {
    /// Hybrid schedule for ODE-backed objectives: smaller populations and
    /// fewer generations than the benchmark-grade defaults, leaning on the
    /// warm start and the quasi-Newton polisher to finish convergence.
    pub fn default_optimizer(dim: usize, seed: u64) -> HybridConfig {
        HybridConfig {
            de: DeConfig {
                population_size: (6 * dim).max(24),
                max_generations: 48,
                ..DeConfig::for_dim(dim, 0)
            },
            scatter: ScatterConfig {
                elite_count: 8,
                first_population: (4 * dim).max(16),
                max_passes: 3,
                ..ScatterConfig::for_dim(dim, 0)
            },
            refine: RefineConfig {
                max_iterations: 60,
                max_evaluations: 1_200,
                ..RefineConfig::default()
            },
            epochs: 3,
            max_evaluations: 60_000,
            target_value: None,
            seed,
        }
    }
}

/// How the search was seeded, distilled from a [`WarmStart`].
struct WarmPlan {
    bounds: SearchBox,
    start: Option<Vec<f64>>,
    bandwidths: Option<[f64; 2]>,
    label: &'static str,
    notes: Vec<String>,
}

fn warm_setup(
    warm: &WarmStart<'_>,
    layout: ThetaLayout,
    spec: &SplineSpec,
    global: &GlobalBounds,
) -> Result<WarmPlan> {
    match warm {
        WarmStart::Bounds(bounds) => {
            if bounds.dim() != layout.dim() {
                return Err(Error::Config(format!(
                    "warm search box has {} dimensions, the parameter vector {}",
                    bounds.dim(),
                    layout.dim()
                )));
            }
            Ok(WarmPlan {
                bounds: bounds.clone(),
                start: None,
                bandwidths: None,
                label: "search box",
                notes: Vec::new(),
            })
        }
        WarmStart::Mssb(est) => {
            let mut notes = Vec::new();
            let (ranges, coeffs) = if est.spline_spec == *spec {
                (est.search_ranges.clone(), est.eta_coeffs.clone())
            } else {
                // Re-express the warm rate in the candidate basis: a control
                // coefficient starts at the fitted curve's value at its site,
                // with the usual warm range around it. Each range also keeps
                // the envelope of the source ranges, so uncertainty the
                // multistage run reported about its own coefficients is not
                // lost in the projection.
                let (lo, hi) = est.spline_spec.domain();
                let coeffs: Vec<f64> = spec
                    .control_positions()
                    .iter()
                    .map(|&tau| est.eta_at(tau.clamp(lo, hi)).unwrap_or(0.0))
                    .collect();
                let envelope = est.search_ranges.eta_coeffs.iter().fold(
                    [f64::INFINITY, f64::NEG_INFINITY],
                    |acc, r| [acc[0].min(r[0]), acc[1].max(r[1])],
                );
                let eta_coeffs = coeffs
                    .iter()
                    .map(|&a| {
                        let r = warm_range(a, global.eta_coeff).0;
                        [r[0].min(envelope[0]), r[1].max(envelope[1])]
                    })
                    .collect();
                notes.push(format!(
                    "warm infection-rate coefficients projected onto an order-{} basis with {} controls",
                    spec.order(),
                    spec.n_control()
                ));
                let ranges = SearchRanges {
                    eta_coeffs,
                    ..est.search_ranges.clone()
                };
                (ranges, coeffs)
            };
            let bounds = ranges.to_search_box(layout.with_initial_state())?;
            let mut start = est.constants.as_array().to_vec();
            start.extend_from_slice(&coeffs);
            if layout.with_initial_state() {
                start.extend([
                    est.initial_state.t_u0,
                    est.initial_state.t_i0,
                    est.initial_state.v0,
                ]);
            }
            Ok(WarmPlan {
                bounds,
                start: Some(start),
                bandwidths: Some(est.bandwidths),
                label: "multistage estimate",
                notes,
            })
        }
    }
}

/// Ranges whose ends differ by more than this ratio are searched in log
/// scale; see [`SearchMap`].
const GEOMETRIC_RATIO: f64 = 100.0;

/// Per-coordinate transform between model values and search coordinates.
///
/// Population search samples a box uniformly in its own coordinates, so a
/// positive range spanning several decades starves the small end: uniform
/// draws from `[0, 1e-2]` essentially never land near `1e-5`, and no
/// mutation step recovers resolution the initialization never had. Wide
/// positive ranges are therefore searched on the log scale, giving every
/// decade equal weight; narrow and sign-crossing ranges stay linear.
#[derive(Debug, Clone, PartialEq)]
enum Axis {
    Linear,
    /// `u = ln(x + shift)`; the shift is zero for strictly positive ranges
    /// and lifts a zero lower end by a negligible offset.
    Log { shift: f64 },
}

#[derive(Debug, Clone)]
struct SearchMap {
    axes: Vec<Axis>,
    /// Raw-scale bounds, for clamping round-trip error back into the box.
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl SearchMap {
    fn for_box(bounds: &SearchBox) -> Self {
        let axes = bounds
            .lower()
            .iter()
            .zip(bounds.upper())
            .map(|(&lo, &hi)| {
                if lo >= 0.0 && hi > 0.0 {
                    // A zero lower end is lifted by a thousandth of the top,
                    // capping the axis at three decades: population stages
                    // waste draws below that resolution, and the local
                    // polish still reaches zero exactly.
                    let shift = if lo > 0.0 { 0.0 } else { hi * 1e-3 };
                    if (hi + shift) / (lo + shift) > GEOMETRIC_RATIO {
                        return Axis::Log { shift };
                    }
                }
                Axis::Linear
            })
            .collect();
        Self {
            axes,
            lower: bounds.lower().to_vec(),
            upper: bounds.upper().to_vec(),
        }
    }

    /// Count of log-scaled coordinates.
    fn n_geometric(&self) -> usize {
        self.axes.iter().filter(|a| **a != Axis::Linear).count()
    }

    /// Model values to search coordinates.
    fn to_search(&self, x: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .zip(x)
            .map(|(axis, &v)| match axis {
                Axis::Linear => v,
                Axis::Log { shift } => (v + shift).ln(),
            })
            .collect()
    }

    /// Search coordinates back to model values, clamped into the raw box so
    /// `exp(ln(x))` round-trip error cannot step outside it.
    fn to_model(&self, u: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .zip(u)
            .enumerate()
            .map(|(i, (axis, &v))| {
                let raw = match axis {
                    Axis::Linear => v,
                    Axis::Log { shift } => v.exp() - shift,
                };
                raw.clamp(self.lower[i], self.upper[i])
            })
            .collect()
    }

    /// The raw box in search coordinates.
    fn search_box(&self) -> Result<SearchBox> {
        SearchBox::new(self.to_search(&self.lower), self.to_search(&self.upper))
    }
}

/// Everything recorded about how a fit was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub warm_start: String,
    pub seed: u64,
    pub solver_step: f64,
    pub spline_order: usize,
    pub spline_controls: usize,
    /// Base smoothing bandwidths of the warm estimate, when it had them.
    pub smoothing_bandwidths: Option<[f64; 2]>,
    pub t_scale: ScaleKind,
    pub v_scale: ScaleKind,
    pub n_obs: usize,
    pub k_free: usize,
    /// Fraction of objective evaluations that landed in the penalty band.
    pub penalty_fraction: f64,
    pub notes: Vec<String>,
}

/// A completed fit: the refined parameter vector, goodness-of-fit criteria,
/// fitted trajectories at the observation grids (raw scale), and a dense
/// infection-rate curve over the observation span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: ThetaVector,
    pub rss: f64,
    pub criteria: Criteria,
    pub fitted_t: Vec<f64>,
    pub fitted_v: Vec<f64>,
    pub eta_times: Vec<f64>,
    pub eta_values: Vec<f64>,
    pub spline_spec: SplineSpec,
    pub solver: SolverSettings,
    /// The initial state used when it was not part of the parameter vector.
    pub fixed_initial_state: Option<StateVector>,
    pub evaluations: u64,
    pub termination: TerminationReason,
    /// Best objective value after each optimizer generation or pass.
    pub trace: Vec<f64>,
    pub provenance: Provenance,
}

fn observation_span(obs: &ObservationSet) -> (f64, f64) {
    let first = obs.t_times()[0].min(obs.v_times()[0]);
    let last = obs.t_times()[obs.n_t() - 1].max(obs.v_times()[obs.n_v() - 1]);
    (first, last)
}

fn dense_eta(spec: &SplineSpec, coeffs: &[f64], span: (f64, f64)) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = span;
    let mut times = Vec::with_capacity(ETA_GRID_LEN);
    let mut values = Vec::with_capacity(ETA_GRID_LEN);
    for k in 0..ETA_GRID_LEN {
        let frac = k as f64 / (ETA_GRID_LEN - 1) as f64;
        let t = a + frac * (b - a);
        times.push(t);
        values.push(curve_eval(spec, coeffs, t)?);
    }
    Ok((times, values))
}

/// Fits the model by minimizing the penalized residual sum of squares over
/// the free coordinates. With every coordinate fixed the optimizer is
/// skipped and the supplied point is scored directly.
///
/// Fails with [`Error::FitFailure`] when no evaluation ever escaped the
/// penalty band, naming the fraction that hit it.
pub fn fit_snls(
    obs: &ObservationSet,
    spec: &SplineSpec,
    warm: &WarmStart<'_>,
    settings: &SnlsSettings,
) -> Result<FitResult> {
    let layout = ThetaLayout::new(spec.n_control(), settings.estimate_initial_state)?;
    let plan = warm_setup(warm, layout, spec, &settings.bounds)?;
    let fixed_init = if settings.estimate_initial_state {
        if settings.initial_state.is_some() {
            return Err(Error::Config(
                "initial state is being estimated; drop the fixed initial_state".into(),
            ));
        }
        None
    } else {
        Some(settings.initial_state.ok_or_else(|| {
            Error::Config("initial_state is required when it is not estimated".into())
        })?)
    };
    let problem = SnlsProblem::new(obs, spec.clone(), layout, fixed_init, settings.solver)?;

    let start_full = match &plan.start {
        Some(start) => plan.bounds.clamp(start),
        None => plan.bounds.center(),
    };
    let mut theta = ThetaVector::new(layout, start_full, plan.bounds.clone())?;
    for &(name, value) in &settings.fixed {
        theta.fix(name, value)?;
    }

    let mut notes = plan.notes;
    if obs.t_scale() != ScaleKind::Raw {
        notes.push(format!("total CD4 compared on the {} scale", obs.t_scale()));
    }
    if obs.v_scale() != ScaleKind::Raw {
        notes.push(format!("viral load compared on the {} scale", obs.v_scale()));
    }
    if !settings.estimate_initial_state {
        notes.push("initial state held fixed rather than estimated".into());
    }
    if !settings.fixed.is_empty() {
        let names: Vec<String> = settings.fixed.iter().map(|(n, _)| n.to_string()).collect();
        notes.push(format!("pinned coordinates: {}", names.join(", ")));
    }

    let provenance = |method: &str, penalty_fraction: f64, k_free: usize, notes: Vec<String>| {
        Provenance {
            method: method.into(),
            warm_start: plan.label.into(),
            seed: settings.seed,
            solver_step: settings.solver.step,
            spline_order: spec.order(),
            spline_controls: spec.n_control(),
            smoothing_bandwidths: plan.bandwidths,
            t_scale: obs.t_scale(),
            v_scale: obs.v_scale(),
            n_obs: obs.n_total(),
            k_free,
            penalty_fraction,
            notes,
        }
    };

    let span = observation_span(obs);

    if theta.n_free() == 0 {
        let rss = match problem.try_rss(theta.values()) {
            Ok(rss) => rss,
            Err(e) => {
                return Err(Error::FitFailure(format!(
                    "every coordinate is fixed and the pinned point cannot be scored: {e}"
                )));
            }
        };
        let (fitted_t, fitted_v) = problem.trajectories(theta.values())?;
        let criteria = information_criteria(rss, obs.n_total(), 0)?;
        let (eta_times, eta_values) = dense_eta(spec, theta.coeffs(), span)?;
        let mut notes = notes;
        notes.push("every coordinate fixed; the optimizer was skipped".into());
        return Ok(FitResult {
            theta_hat: theta,
            rss,
            criteria,
            fitted_t,
            fitted_v,
            eta_times,
            eta_values,
            spline_spec: spec.clone(),
            solver: settings.solver,
            fixed_initial_state: fixed_init,
            evaluations: 1,
            termination: TerminationReason::NoImprovement,
            trace: vec![rss],
            provenance: provenance("fixed-point evaluation", 0.0, 0, notes),
        });
    }

    let free_idx = theta.free_indices();
    let free_box = theta.free_box()?;
    let template = theta.values().to_vec();
    let full_bounds = theta.bounds().clone();
    let map = SearchMap::for_box(&free_box);
    let search_box = map.search_box()?;
    if map.n_geometric() > 0 {
        notes.push(format!(
            "{} of {} free coordinates searched in log scale",
            map.n_geometric(),
            free_idx.len()
        ));
    }
    let evals = AtomicU64::new(0);
    let penalized = AtomicU64::new(0);
    let objective = |free: &[f64]| {
        let mut full = template.clone();
        for (&slot, v) in free_idx.iter().zip(map.to_model(free)) {
            full[slot] = v;
        }
        let value = problem.penalized_rss(&full, &full_bounds);
        evals.fetch_add(1, Ordering::Relaxed);
        if value >= PENALTY_FLOOR {
            penalized.fetch_add(1, Ordering::Relaxed);
        }
        value
    };

    let mut config = settings
        .optimizer
        .clone()
        .unwrap_or_else(|| SnlsSettings::default_optimizer(free_idx.len(), 0));
    config.seed = settings.seed;
    let outcome = match &plan.start {
        Some(_) => {
            let start = search_box.clamp(&map.to_search(&theta.free_values()));
            hybrid_minimize_from(&objective, &search_box, &config, &start)?
        }
        None => hybrid_minimize(&objective, &search_box, &config)?,
    };

    let total = evals.load(Ordering::Relaxed);
    let hit = penalized.load(Ordering::Relaxed);
    let penalty_fraction = hit as f64 / total.max(1) as f64;
    if !(outcome.best_value < PENALTY_FLOOR) {
        return Err(Error::FitFailure(format!(
            "no parameter vector produced a scoreable trajectory: {:.1}% of {} objective \
             evaluations hit the penalty band",
            100.0 * penalty_fraction,
            total
        )));
    }

    let theta_hat = theta.with_free_values(&map.to_model(&outcome.best_point))?;
    let rss = outcome.best_value;
    let (fitted_t, fitted_v) = problem.trajectories(theta_hat.values())?;
    let criteria = information_criteria(rss, obs.n_total(), theta_hat.n_free())?;
    let (eta_times, eta_values) = dense_eta(spec, theta_hat.coeffs(), span)?;
    let k_free = theta_hat.n_free();
    Ok(FitResult {
        theta_hat,
        rss,
        criteria,
        fitted_t,
        fitted_v,
        eta_times,
        eta_values,
        spline_spec: spec.clone(),
        solver: settings.solver,
        fixed_initial_state: fixed_init,
        evaluations: total,
        termination: outcome.termination,
        trace: outcome.trace,
        provenance: provenance("hybrid least squares", penalty_fraction, k_free, notes),
    })
}

/// One candidate basis in a model-selection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub order: usize,
    pub n_control: usize,
    pub outcome: CandidateOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CandidateOutcome {
    /// The candidate was fitted and can be ranked.
    Ranked {
        rss: f64,
        aic: f64,
        bic: f64,
        aicc: f64,
        k_free: usize,
    },
    /// The candidate could not be built, fitted, or given a corrected
    /// criterion.
    Unavailable { reason: String },
}

/// Outcome of [`select_model`]: every candidate's report (ranked candidates
/// first, in criterion order) and the winning fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSelection {
    pub reports: Vec<CandidateReport>,
    pub best_order: usize,
    pub best_n_control: usize,
    pub best: FitResult,
}

/// Fits every `(order, control-count)` candidate and ranks them by the
/// small-sample-corrected criterion. Candidates that cannot be built (too few
/// controls for the order), fail to fit, or have an undefined correction are
/// reported as unavailable rather than aborting the run. Each candidate
/// searches with a seed derived from its index, so adding or reordering
/// candidates does not disturb the others.
pub fn select_model(
    obs: &ObservationSet,
    candidates: &[(usize, usize)],
    warm: &WarmStart<'_>,
    settings: &SnlsSettings,
) -> Result<ModelSelection> {
    if candidates.is_empty() {
        return Err(Error::Config("model selection needs at least one candidate".into()));
    }
    let (domain, spacing) = match warm {
        WarmStart::Mssb(est) => (est.spline_spec.domain(), est.spline_spec.spacing()),
        WarmStart::Bounds(_) => {
            let (_, last) = observation_span(obs);
            ((settings.solver.t0, last), settings.spacing)
        }
    };

    let mut reports = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, usize, usize, FitResult)> = None;
    for (index, &(order, n_control)) in candidates.iter().enumerate() {
        let candidate_settings = SnlsSettings {
            seed: derive_seed(settings.seed, index as u64),
            ..settings.clone()
        };
        let fitted = make_spec(order, n_control, domain, spacing)
            .and_then(|spec| fit_snls(obs, &spec, warm, &candidate_settings));
        let outcome = match fitted {
            Ok(fit) => match fit.criteria.aicc {
                Some(aicc) => {
                    let replace = match &best {
                        Some((incumbent, ..)) => aicc.total_cmp(incumbent).is_lt(),
                        None => true,
                    };
                    if replace {
                        best = Some((aicc, order, n_control, fit.clone()));
                    }
                    CandidateOutcome::Ranked {
                        rss: fit.rss,
                        aic: fit.criteria.aic,
                        bic: fit.criteria.bic,
                        aicc,
                        k_free: fit.provenance.k_free,
                    }
                }
                None => CandidateOutcome::Unavailable {
                    reason: "small-sample correction undefined: n - k - 1 is not positive".into(),
                },
            },
            Err(e) => CandidateOutcome::Unavailable { reason: e.to_string() },
        };
        reports.push(CandidateReport {
            order,
            n_control,
            outcome,
        });
    }

    let key = |outcome: &CandidateOutcome| match outcome {
        CandidateOutcome::Ranked { aicc, rss, .. } => (*aicc, *rss),
        CandidateOutcome::Unavailable { .. } => (f64::INFINITY, f64::INFINITY),
    };
    reports.sort_by(|a, b| {
        let (a1, a2) = key(&a.outcome);
        let (b1, b2) = key(&b.outcome);
        a1.total_cmp(&b1).then(a2.total_cmp(&b2))
    });

    match best {
        Some((_, order, n_control, fit)) => Ok(ModelSelection {
            reports,
            best_order: order,
            best_n_control: n_control,
            best: fit,
        }),
        None => Err(Error::FitFailure(
            "model selection failed: no candidate produced a ranked fit".into(),
        )),
    }
}
