//! HIV target-cell / infected-cell / virion dynamics.
//!
//! State `(T_U, T_I, V)` evolves as
//!
//! ```text
//! dT_U/dt = lambda - rho * T_U - eta(t) * T_U * V
//! dT_I/dt = eta(t) * T_U * V - delta * T_I
//! dV/dt   = n_virions * delta * T_I - c * V
//! ```
//!
//! with a time-varying infection rate `eta(t)` (closed form or B-spline). The
//! observable series are total CD4 count `T = T_U + T_I` and viral load `V`.
//!
//! Integration is classical fixed-step RK4. Output times are hit exactly by
//! shrinking the final sub-step of each output interval; there is no
//! interpolation and no state clipping, so trajectories are deterministic
//! functions of (initial state, parameters, eta, grid, step). A configurable
//! magnitude cap aborts diverging integrations early with a diagnostic error.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bspline::{curve_eval, SplineSpec};
use crate::error::{Error, Result};

/// Default RK4 base step in days.
pub const DEFAULT_STEP: f64 = 0.01;
/// Default blow-up guard: any component beyond this aborts integration.
pub const DEFAULT_STATE_CAP: f64 = 1e12;

/// Model state. Concentrations are nonnegative in the model's domain, but no
/// component is clipped: noise-free dynamics keep them positive on their own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    /// Uninfected target cells `T_U`.
    pub t_u: f64,
    /// Infected cells `T_I`.
    pub t_i: f64,
    /// Free virions `V`.
    pub v: f64,
}

impl StateVector {
    pub fn new(t_u: f64, t_i: f64, v: f64) -> Self {
        Self { t_u, t_i, v }
    }

    /// Total CD4+ count `T = T_U + T_I`, the first observable.
    pub fn total_t(&self) -> f64 {
        self.t_u + self.t_i
    }

    pub fn is_finite(&self) -> bool {
        self.t_u.is_finite() && self.t_i.is_finite() && self.v.is_finite()
    }

    fn max_abs(&self) -> f64 {
        self.t_u.abs().max(self.t_i.abs()).max(self.v.abs())
    }
}

/// The five kinetic constants. Construct via [`ConstantParams::new`], which
/// enforces that every rate is strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantParams {
    /// Source rate of uninfected cells (`lambda`).
    pub lambda: f64,
    /// Death rate of uninfected cells (`rho`).
    pub rho: f64,
    /// Virions released per infected cell (`N`).
    pub n_virions: f64,
    /// Death rate of infected cells (`delta`).
    pub delta: f64,
    /// Viral clearance rate (`c`).
    pub clearance: f64,
}

impl ConstantParams {
    pub fn new(lambda: f64, rho: f64, n_virions: f64, delta: f64, clearance: f64) -> Result<Self> {
        let fields = [
            ("lambda", lambda),
            ("rho", rho),
            ("n", n_virions),
            ("delta", delta),
            ("c", clearance),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::Config(format!(
                    "constant parameter {name} must be strictly positive and finite, got {value}"
                )));
            }
        }
        Ok(Self {
            lambda,
            rho,
            n_virions,
            delta,
            clearance,
        })
    }
}

/// Time-varying infection rate `eta(t)`, defined over a closed time domain.
#[derive(Clone)]
pub enum EtaFunction {
    /// A B-spline curve; this is the form the estimators fit.
    Spline { spec: SplineSpec, coeffs: Vec<f64> },
    /// An arbitrary closed-form rate, used to generate simulation truth.
    Callable {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        domain: (f64, f64),
        label: String,
    },
}

impl fmt::Debug for EtaFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EtaFunction::Spline { spec, coeffs } => f
                .debug_struct("EtaFunction::Spline")
                .field("order", &spec.order())
                .field("n_control", &spec.n_control())
                .field("coeffs", coeffs)
                .finish(),
            EtaFunction::Callable { domain, label, .. } => f
                .debug_struct("EtaFunction::Callable")
                .field("label", label)
                .field("domain", domain)
                .finish(),
        }
    }
}

impl EtaFunction {
    pub fn spline(spec: SplineSpec, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != spec.n_control() {
            return Err(Error::Config(format!(
                "eta spline needs {} coefficients, got {}",
                spec.n_control(),
                coeffs.len()
            )));
        }
        Ok(EtaFunction::Spline { spec, coeffs })
    }

    pub fn callable(
        label: impl Into<String>,
        domain: (f64, f64),
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        EtaFunction::Callable {
            f: Arc::new(f),
            domain,
            label: label.into(),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        match self {
            EtaFunction::Spline { spec, .. } => spec.domain(),
            EtaFunction::Callable { domain, .. } => *domain,
        }
    }

    /// Evaluates `eta(t)`. The rate must be finite and nonnegative; `t` may
    /// sit within a small tolerance outside the domain (integrator round-off)
    /// and is clamped, anything farther out is an error.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        let tol = 1e-9 * (1.0 + (hi - lo).abs());
        if !t.is_finite() || t < lo - tol || t > hi + tol {
            return Err(Error::OutsideDomain { t, lo, hi });
        }
        let t = t.clamp(lo, hi);
        let value = match self {
            EtaFunction::Spline { spec, coeffs } => curve_eval(spec, coeffs, t)?,
            EtaFunction::Callable { f, .. } => f(t),
        };
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Data(format!(
                "eta({t}) = {value}; infection rate must be finite and nonnegative"
            )));
        }
        Ok(value)
    }
}

/// Right-hand side of the system. The returned vector holds the time
/// derivative of each state component.
pub fn rhs(state: &StateVector, t: f64, params: &ConstantParams, eta: &EtaFunction) -> Result<StateVector> {
    if !state.is_finite() || !t.is_finite() {
        return Err(Error::Data(format!(
            "rhs needs finite state and time, got state {state:?} at t = {t}"
        )));
    }
    let eta_t = eta.eval(t)?;
    let infection = eta_t * state.t_u * state.v;
    Ok(StateVector {
        t_u: params.lambda - params.rho * state.t_u - infection,
        t_i: infection - params.delta * state.t_i,
        v: params.n_virions * params.delta * state.t_i - params.clearance * state.v,
    })
}

fn axpy(y: &StateVector, h: f64, k: &StateVector) -> StateVector {
    StateVector {
        t_u: y.t_u + h * k.t_u,
        t_i: y.t_i + h * k.t_i,
        v: y.v + h * k.v,
    }
}

/// One classical RK4 step of size `h` from `(state, t)`.
pub fn rk4_step(
    state: &StateVector,
    t: f64,
    h: f64,
    params: &ConstantParams,
    eta: &EtaFunction,
) -> Result<StateVector> {
    let half = 0.5 * h;
    let k1 = rhs(state, t, params, eta)?;
    let k2 = rhs(&axpy(state, half, &k1), t + half, params, eta)?;
    let k3 = rhs(&axpy(state, half, &k2), t + half, params, eta)?;
    let k4 = rhs(&axpy(state, h, &k3), t + h, params, eta)?;
    let sixth = h / 6.0;
    Ok(StateVector {
        t_u: state.t_u + sixth * (k1.t_u + 2.0 * k2.t_u + 2.0 * k3.t_u + k4.t_u),
        t_i: state.t_i + sixth * (k1.t_i + 2.0 * k2.t_i + 2.0 * k3.t_i + k4.t_i),
        v: state.v + sixth * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
    })
}

/// Trajectory sampled on a strictly increasing grid. `states[0]` is exactly
/// the initial condition supplied to [`integrate`]; `times[0]` is its time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySolution {
    times: Vec<f64>,
    states: Vec<StateVector>,
    solver_step: f64,
}

impl TrajectorySolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn solver_step(&self) -> f64 {
        self.solver_step
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Total CD4 series `T = T_U + T_I` along the grid.
    pub fn totals(&self) -> Vec<f64> {
        self.states.iter().map(StateVector::total_t).collect()
    }

    /// Viral-load series along the grid.
    pub fn viral(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.v).collect()
    }
}

/// Integrates the system so that `states[i]` lands on `output_times[i]`.
///
/// `output_times[0]` is the initial time and its state is `init`, unmodified.
/// Each output interval is covered by full steps of `step` with the final
/// sub-step shrunk to land exactly on the next output time.
pub fn integrate(
    init: StateVector,
    params: &ConstantParams,
    eta: &EtaFunction,
    output_times: &[f64],
    step: f64,
) -> Result<TrajectorySolution> {
    integrate_with_cap(init, params, eta, output_times, step, DEFAULT_STATE_CAP)
}

/// [`integrate`] with an explicit blow-up cap.
pub fn integrate_with_cap(
    init: StateVector,
    params: &ConstantParams,
    eta: &EtaFunction,
    output_times: &[f64],
    step: f64,
    cap: f64,
) -> Result<TrajectorySolution> {
    if output_times.is_empty() {
        return Err(Error::Config("output_times must be non-empty".into()));
    }
    if !step.is_finite() || step <= 0.0 {
        return Err(Error::Config(format!("step must be positive, got {step}")));
    }
    if !cap.is_finite() || cap <= 0.0 {
        return Err(Error::Config(format!("state cap must be positive, got {cap}")));
    }
    if !init.is_finite() {
        return Err(Error::Data(format!("initial state must be finite, got {init:?}")));
    }
    let (lo, hi) = eta.domain();
    let tol = 1e-9 * (1.0 + (hi - lo).abs());
    for w in output_times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Data(format!(
                "output times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let first = output_times[0];
    let last = output_times[output_times.len() - 1];
    if !first.is_finite() || !last.is_finite() || first < lo - tol || last > hi + tol {
        return Err(Error::OutsideDomain {
            t: if first < lo - tol { first } else { last },
            lo,
            hi,
        });
    }

    let mut states = Vec::with_capacity(output_times.len());
    states.push(init);
    let mut current = init;
    for w in output_times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let span = t1 - t0;
        let n_sub = ((span / step) - 1e-9).ceil().max(1.0) as usize;
        for k in 0..n_sub {
            let t_k = t0 + k as f64 * step;
            let (h, t_end) = if k + 1 == n_sub {
                (t1 - t_k, t1)
            } else {
                (step, t_k + step)
            };
            current = rk4_step(&current, t_k, h, params, eta)?;
            if !current.is_finite() || current.max_abs() > cap {
                return Err(Error::Blowup { t: t_end, cap });
            }
        }
        states.push(current);
    }

    Ok(TrajectorySolution {
        times: output_times.to_vec(),
        states,
        solver_step: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bench_params() -> ConstantParams {
        ConstantParams::new(36.0, 0.108, 1000.0, 0.5, 3.0).unwrap()
    }

    fn bench_init() -> StateVector {
        StateVector::new(600.0, 30.0, 1e5)
    }

    fn bench_eta(hi: f64) -> EtaFunction {
        EtaFunction::callable("9e-5*(1-0.9*cos(pi*t/1000))", (0.0, hi), |t| {
            9e-5 * (1.0 - 0.9 * (std::f64::consts::PI * t / 1000.0).cos())
        })
    }

    fn zero_eta(hi: f64) -> EtaFunction {
        EtaFunction::callable("0", (0.0, hi), |_| 0.0)
    }

    fn grid(n: usize, span: f64) -> Vec<f64> {
        (0..=n).map(|j| span * j as f64 / n as f64).collect()
    }

    #[test]
    fn eta_closed_form_values() {
        let eta = bench_eta(2000.0);
        assert_relative_eq!(eta.eval(0.0).unwrap(), 9e-6, max_relative = 1e-12);
        assert_relative_eq!(eta.eval(1000.0).unwrap(), 1.71e-4, max_relative = 1e-12);
    }

    #[test]
    fn rhs_matches_hand_arithmetic_at_initial_state() {
        let d = rhs(&bench_init(), 0.0, &bench_params(), &bench_eta(20.0)).unwrap();
        // 36 - 0.108*600 - 9e-6*600*1e5 = 36 - 64.8 - 540
        assert_relative_eq!(d.t_u, -568.8, max_relative = 1e-12);
        // 540 - 0.5*30
        assert_relative_eq!(d.t_i, 525.0, max_relative = 1e-12);
        // 1000*0.5*30 - 3*1e5
        assert_relative_eq!(d.v, -285000.0, max_relative = 1e-12);
    }

    #[test]
    fn rhs_rejects_non_finite_inputs() {
        let params = bench_params();
        let eta = bench_eta(20.0);
        let bad = StateVector::new(f64::NAN, 1.0, 1.0);
        assert!(rhs(&bad, 0.0, &params, &eta).is_err());
        assert!(rhs(&bench_init(), f64::INFINITY, &params, &eta).is_err());
    }

    #[test]
    fn constant_params_require_strictly_positive_entries() {
        assert!(ConstantParams::new(0.0, 0.1, 1000.0, 0.5, 3.0).is_err());
        assert!(ConstantParams::new(36.0, -0.1, 1000.0, 0.5, 3.0).is_err());
        assert!(ConstantParams::new(36.0, 0.1, f64::NAN, 0.5, 3.0).is_err());
        assert!(ConstantParams::new(36.0, 0.1, 1000.0, 0.5, f64::INFINITY).is_err());
    }

    #[test]
    fn eta_rejects_negative_rates_and_out_of_domain_times() {
        let eta = EtaFunction::callable("negative", (0.0, 10.0), |_| -1.0);
        assert!(eta.eval(1.0).is_err());
        let eta = bench_eta(20.0);
        assert!(eta.eval(-1.0).is_err());
        assert!(eta.eval(21.0).is_err());
        // Round-off slack just outside the domain is clamped, not an error.
        assert!(eta.eval(20.0 + 1e-12).is_ok());
    }

    #[test]
    fn spline_eta_coefficient_count_checked() {
        let spec = crate::bspline::make_spec(2, 3, (0.0, 20.0), crate::bspline::ControlSpacing::Linear).unwrap();
        assert!(EtaFunction::spline(spec.clone(), vec![1e-5, 2e-5]).is_err());
        let eta = EtaFunction::spline(spec, vec![1e-5, 2e-5, 3e-5]).unwrap();
        assert_relative_eq!(eta.eval(0.0).unwrap(), 1e-5);
        assert_relative_eq!(eta.eval(20.0).unwrap(), 3e-5);
    }

    #[test]
    fn single_output_time_returns_initial_state_unchanged() {
        let sol = integrate(bench_init(), &bench_params(), &bench_eta(20.0), &[0.0], 0.01).unwrap();
        assert_eq!(sol.len(), 1);
        assert_eq!(sol.states()[0], bench_init());
    }

    /// With eta = 0 the system is linear: T_U relaxes to lambda/rho, T_I
    /// decays exponentially, V is a two-exponential transient.
    fn linear_closed_form(init: &StateVector, p: &ConstantParams, t: f64) -> StateVector {
        let tu_inf = p.lambda / p.rho;
        let t_u = tu_inf + (init.t_u - tu_inf) * (-p.rho * t).exp();
        let t_i = init.t_i * (-p.delta * t).exp();
        let forcing = p.n_virions * p.delta * init.t_i / (p.clearance - p.delta);
        let v = init.v * (-p.clearance * t).exp()
            + forcing * ((-p.delta * t).exp() - (-p.clearance * t).exp());
        StateVector::new(t_u, t_i, v)
    }

    #[test]
    fn matches_linear_closed_form_when_eta_is_zero() {
        let params = bench_params();
        let init = bench_init();
        let times = grid(200, 20.0);
        let sol = integrate(init, &params, &zero_eta(20.0), &times, 0.01).unwrap();
        for (i, &t) in times.iter().enumerate() {
            let exact = linear_closed_form(&init, &params, t);
            let got = sol.states()[i];
            assert_relative_eq!(got.t_u, exact.t_u, max_relative = 1e-5);
            assert_relative_eq!(got.t_i, exact.t_i, max_relative = 1e-5);
            // V crosses scales; compare with a scale-aware tolerance.
            assert!((got.v - exact.v).abs() <= 1e-5 * exact.v.abs().max(1.0));
        }
        // Frozen spot value: T_I(2) = 30 * exp(-1).
        let idx = times.iter().position(|&t| (t - 2.0).abs() < 1e-12).unwrap();
        assert_relative_eq!(sol.states()[idx].t_i, 11.036383235143269, max_relative = 1e-9);
    }

    #[test]
    fn output_grid_on_step_multiples_satisfies_discrete_rk4_identity() {
        let params = bench_params();
        let eta = bench_eta(20.0);
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.01).collect();
        let sol = integrate(bench_init(), &params, &eta, &times, 0.01).unwrap();
        for k in 0..10 {
            let h = times[k + 1] - times[k];
            let manual = rk4_step(&sol.states()[k], times[k], h, &params, &eta).unwrap();
            // Bit-exact: the interval is covered by exactly one internal step.
            assert_eq!(sol.states()[k + 1], manual);
        }
    }

    #[test]
    fn fourth_order_step_halving_ratio() {
        let params = bench_params();
        let eta = bench_eta(20.0);
        let init = bench_init();
        let times = grid(10, 20.0);
        let max_rel_diff = |a: &TrajectorySolution, b: &TrajectorySolution| {
            a.states()
                .iter()
                .zip(b.states())
                .map(|(x, y)| {
                    let scale = y.max_abs().max(1.0);
                    ((x.t_u - y.t_u).abs().max((x.t_i - y.t_i).abs()).max((x.v - y.v).abs())) / scale
                })
                .fold(0.0_f64, f64::max)
        };
        let coarse = integrate(init, &params, &eta, &times, 0.08).unwrap();
        let medium = integrate(init, &params, &eta, &times, 0.04).unwrap();
        let fine = integrate(init, &params, &eta, &times, 0.02).unwrap();
        let d1 = max_rel_diff(&coarse, &medium);
        let d2 = max_rel_diff(&medium, &fine);
        let ratio = d1 / d2;
        // Ideal RK4 ratio is 16; allow a factor of 4 either way.
        assert!(
            (4.0..=64.0).contains(&ratio),
            "step-halving ratio {ratio} outside [4, 64] (d1 = {d1}, d2 = {d2})"
        );
    }

    #[test]
    fn default_step_close_to_half_step_solution() {
        let params = bench_params();
        let eta = bench_eta(20.0);
        let times = grid(40, 20.0);
        let a = integrate(bench_init(), &params, &eta, &times, 0.01).unwrap();
        let b = integrate(bench_init(), &params, &eta, &times, 0.005).unwrap();
        for (x, y) in a.states().iter().zip(b.states()) {
            let scale = y.max_abs().max(1.0);
            assert!((x.t_u - y.t_u).abs() / scale < 1e-6);
            assert!((x.t_i - y.t_i).abs() / scale < 1e-6);
            assert!((x.v - y.v).abs() / scale < 1e-6);
        }
    }

    #[test]
    fn trajectory_stays_effectively_nonnegative() {
        let params = bench_params();
        let eta = bench_eta(20.0);
        let sol = integrate(bench_init(), &params, &eta, &grid(2000, 20.0), 0.01).unwrap();
        let mut running_max = StateVector::new(0.0, 0.0, 0.0);
        for s in sol.states() {
            running_max.t_u = running_max.t_u.max(s.t_u.abs());
            running_max.t_i = running_max.t_i.max(s.t_i.abs());
            running_max.v = running_max.v.max(s.v.abs());
            assert!(s.t_u >= -1e-8 * running_max.t_u);
            assert!(s.t_i >= -1e-8 * running_max.t_i);
            assert!(s.v >= -1e-8 * running_max.v);
        }
    }

    #[test]
    fn blowup_reports_time_and_cap() {
        // Strong constant infection rate with a huge burst size diverges.
        let params = ConstantParams::new(10.0, 0.01, 1e5, 1.0, 0.1).unwrap();
        let eta = EtaFunction::callable("1e-3", (0.0, 20.0), |_| 1e-3);
        let err = integrate_with_cap(bench_init(), &params, &eta, &grid(20, 20.0), 0.01, 1e8)
            .unwrap_err();
        match err {
            Error::Blowup { t, cap } => {
                assert!(t > 0.0 && t <= 20.0, "blow-up time {t} outside span");
                assert_eq!(cap, 1e8);
            }
            other => panic!("expected Blowup, got {other:?}"),
        }
    }

    #[test]
    fn integrate_validates_grid_and_domain() {
        let params = bench_params();
        let eta = bench_eta(20.0);
        let init = bench_init();
        assert!(integrate(init, &params, &eta, &[], 0.01).is_err());
        assert!(integrate(init, &params, &eta, &[0.0, 1.0, 1.0], 0.01).is_err());
        assert!(integrate(init, &params, &eta, &[0.0, 25.0], 0.01).is_err());
        assert!(integrate(init, &params, &eta, &[0.0, 1.0], -0.01).is_err());
        let bad_init = StateVector::new(f64::NAN, 0.0, 0.0);
        assert!(integrate(bad_init, &params, &eta, &[0.0, 1.0], 0.01).is_err());
    }
}
