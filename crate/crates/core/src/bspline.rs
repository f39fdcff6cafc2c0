//! Clamped B-spline bases for the time-varying infection rate.
//!
//! A basis is described by an order `k` (2 = piecewise linear, 3 = quadratic,
//! 4 = cubic), `s >= k` control-point sites, and a domain `[lo, hi]`. Control
//! sites are placed equally spaced either in `t` or in `log(t + 1)`; the knot
//! vector is then clamped (`k`-fold endpoint knots) with each interior knot at
//! the average of the `k - 1` control sites it spans, so the control sites are
//! the Greville abscissae of the basis and collocation at them is nonsingular.
//!
//! Evaluation uses the Cox-de Boor recurrence in its span-local triangular
//! form: at any `t` at most `k` basis functions are nonzero and they sum to
//! one exactly (the right endpoint is folded into the last nonempty span).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placement rule for control-point sites within the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlSpacing {
    /// Equally spaced in `t`.
    Linear,
    /// Equally spaced in `log(t + 1)`; resolves early fast dynamics.
    Log,
}

impl std::fmt::Display for ControlSpacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlSpacing::Linear => write!(f, "linear"),
            ControlSpacing::Log => write!(f, "log"),
        }
    }
}

/// A fully determined B-spline basis: order, control sites, knots, domain.
///
/// Constructed only through [`make_spec`], which establishes the invariants:
/// `knots.len() == n_control + order`, knots nondecreasing, endpoint knots
/// `order`-fold, control sites strictly increasing from `lo` to `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    order: usize,
    control_positions: Vec<f64>,
    knots: Vec<f64>,
    domain: (f64, f64),
    spacing: ControlSpacing,
}

/// Orders supported by the model-selection grid.
pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 4;

/// Builds a clamped basis with knot-average interior knots.
pub fn make_spec(
    order: usize,
    n_control: usize,
    domain: (f64, f64),
    spacing: ControlSpacing,
) -> Result<SplineSpec> {
    let (lo, hi) = domain;
    if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
        return Err(Error::Config(format!(
            "spline order must be in {MIN_ORDER}..={MAX_ORDER}, got {order}"
        )));
    }
    if n_control < order {
        return Err(Error::Config(format!(
            "need at least {order} control points for order {order}, got {n_control}"
        )));
    }
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::Config(format!(
            "spline domain must be finite with lo < hi, got [{lo}, {hi}]"
        )));
    }
    if spacing == ControlSpacing::Log && lo <= -1.0 {
        return Err(Error::Config(format!(
            "log spacing needs domain start > -1, got {lo}"
        )));
    }

    let s = n_control;
    let mut positions = Vec::with_capacity(s);
    for j in 0..s {
        let frac = j as f64 / (s - 1) as f64;
        let tau = match spacing {
            ControlSpacing::Linear => lo + frac * (hi - lo),
            ControlSpacing::Log => {
                let (ulo, uhi) = ((lo + 1.0).ln(), (hi + 1.0).ln());
                (ulo + frac * (uhi - ulo)).exp() - 1.0
            }
        };
        positions.push(tau);
    }
    // Guard the endpoints against transform round-off.
    positions[0] = lo;
    positions[s - 1] = hi;

    let mut knots = Vec::with_capacity(s + order);
    knots.extend(std::iter::repeat(lo).take(order));
    for j in 1..=(s - order) {
        // Average of the k-1 control sites positions[j..j+order-1] (0-based).
        let window = &positions[j..j + order - 1];
        knots.push(window.iter().sum::<f64>() / window.len() as f64);
    }
    knots.extend(std::iter::repeat(hi).take(order));
    debug_assert_eq!(knots.len(), s + order);
    debug_assert!(knots.windows(2).all(|w| w[0] <= w[1]));

    Ok(SplineSpec {
        order,
        control_positions: positions,
        knots,
        domain,
        spacing,
    })
}

impl SplineSpec {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis functions (= number of control points).
    pub fn n_control(&self) -> usize {
        self.control_positions.len()
    }

    pub fn control_positions(&self) -> &[f64] {
        &self.control_positions
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn spacing(&self) -> ControlSpacing {
        self.spacing
    }

    fn check_domain(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain;
        let tol = 1e-9 * (1.0 + (hi - lo).abs());
        if !t.is_finite() || t < lo - tol || t > hi + tol {
            return Err(Error::OutsideDomain { t, lo, hi });
        }
        Ok(t.clamp(lo, hi))
    }

    /// Index of the knot span containing `t`: `knots[i] <= t < knots[i+1]`,
    /// with `t == hi` assigned to the last nonempty span so the clamped
    /// endpoint basis still sums to one.
    fn find_span(&self, t: f64) -> usize {
        let k = self.order;
        let s = self.n_control();
        // Valid spans run from index k-1 to s-1 (0-based knots).
        if t >= self.knots[s] {
            return s - 1;
        }
        let mut lo = k - 1;
        let mut hi = s;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// The `order` (at most) nonzero basis values at `t`, plus the index of
    /// the first nonzero function. Triangular Cox-de Boor recurrence;
    /// zero-width spans contribute zero terms via the 0/0 := 0 convention.
    fn nonzero_basis(&self, t: f64) -> Result<(usize, [f64; MAX_ORDER])> {
        let t = self.check_domain(t)?;
        let k = self.order;
        let span = self.find_span(t);
        let knots = &self.knots;

        let mut values = [0.0_f64; MAX_ORDER];
        let mut left = [0.0_f64; MAX_ORDER];
        let mut right = [0.0_f64; MAX_ORDER];
        values[0] = 1.0;
        for j in 1..k {
            left[j] = t - knots[span + 1 - j];
            right[j] = knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let term = if denom == 0.0 { 0.0 } else { values[r] / denom };
                values[r] = saved + right[r + 1] * term;
                saved = left[j - r] * term;
            }
            values[j] = saved;
        }
        Ok((span + 1 - k, values))
    }
}

/// All `s` basis function values at `t`.
pub fn basis_eval(spec: &SplineSpec, t: f64) -> Result<Vec<f64>> {
    let (first, values) = spec.nonzero_basis(t)?;
    let mut out = vec![0.0; spec.n_control()];
    for (offset, &v) in values[..spec.order].iter().enumerate() {
        out[first + offset] = v;
    }
    Ok(out)
}

/// Evaluates the spline with the given coefficients at `t`.
pub fn curve_eval(spec: &SplineSpec, coeffs: &[f64], t: f64) -> Result<f64> {
    if coeffs.len() != spec.n_control() {
        return Err(Error::Config(format!(
            "expected {} coefficients, got {}",
            spec.n_control(),
            coeffs.len()
        )));
    }
    let (first, values) = spec.nonzero_basis(t)?;
    let mut acc = 0.0;
    for (offset, &v) in values[..spec.order].iter().enumerate() {
        acc += coeffs[first + offset] * v;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn order2_three_controls_linear_gives_expected_knots() {
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        assert_eq!(spec.control_positions(), &[0.0, 10.0, 20.0]);
        assert_eq!(spec.knots(), &[0.0, 0.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn order3_three_controls_has_no_interior_knots() {
        let spec = make_spec(3, 3, (1.0, 7.0), ControlSpacing::Linear).unwrap();
        assert_eq!(spec.knots(), &[1.0, 1.0, 1.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn log_spacing_places_middle_site_at_sqrt() {
        // Equally spaced in log(t+1) over [0, 20]: middle site exp(ln(21)/2) - 1.
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Log).unwrap();
        let expected = 21.0_f64.sqrt() - 1.0;
        assert_relative_eq!(spec.control_positions()[1], expected, max_relative = 1e-12);
        assert_eq!(spec.control_positions()[0], 0.0);
        assert_eq!(spec.control_positions()[2], 20.0);
    }

    #[test]
    fn order4_interior_knots_average_control_sites() {
        let spec = make_spec(4, 6, (0.0, 10.0), ControlSpacing::Linear).unwrap();
        let tau = spec.control_positions().to_vec();
        let knots = spec.knots();
        assert_eq!(knots.len(), 10);
        assert_relative_eq!(knots[4], (tau[1] + tau[2] + tau[3]) / 3.0);
        assert_relative_eq!(knots[5], (tau[2] + tau[3] + tau[4]) / 3.0);
    }

    #[test]
    fn hat_basis_values_at_knot_and_midpoint() {
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        let at_knot = basis_eval(&spec, 10.0).unwrap();
        assert_relative_eq!(at_knot[0], 0.0);
        assert_relative_eq!(at_knot[1], 1.0);
        assert_relative_eq!(at_knot[2], 0.0);
        let mid = basis_eval(&spec, 5.0).unwrap();
        assert_relative_eq!(mid[0], 0.5);
        assert_relative_eq!(mid[1], 0.5);
        assert_relative_eq!(mid[2], 0.0);
        assert_relative_eq!(curve_eval(&spec, &[0.0, 1.0, 0.0], 5.0).unwrap(), 0.5);
    }

    #[test]
    fn endpoints_are_interpolated() {
        for order in MIN_ORDER..=MAX_ORDER {
            let spec = make_spec(order, 5, (0.0, 20.0), ControlSpacing::Log).unwrap();
            let at_lo = basis_eval(&spec, 0.0).unwrap();
            let at_hi = basis_eval(&spec, 20.0).unwrap();
            assert_relative_eq!(at_lo[0], 1.0, epsilon = 1e-12);
            assert_relative_eq!(at_hi[4], 1.0, epsilon = 1e-12);
            assert!(at_lo[1..].iter().all(|&v| v.abs() < 1e-12));
            assert!(at_hi[..4].iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_configurations() {
        assert!(make_spec(5, 6, (0.0, 1.0), ControlSpacing::Linear).is_err());
        assert!(make_spec(1, 3, (0.0, 1.0), ControlSpacing::Linear).is_err());
        assert!(make_spec(3, 2, (0.0, 1.0), ControlSpacing::Linear).is_err());
        assert!(make_spec(2, 3, (1.0, 1.0), ControlSpacing::Linear).is_err());
        assert!(make_spec(2, 3, (-2.0, 1.0), ControlSpacing::Log).is_err());
        assert!(make_spec(2, 3, (f64::NAN, 1.0), ControlSpacing::Linear).is_err());
    }

    #[test]
    fn evaluation_outside_domain_errors() {
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        assert!(basis_eval(&spec, -0.5).is_err());
        assert!(basis_eval(&spec, 20.5).is_err());
        assert!(curve_eval(&spec, &[1.0, 1.0, 1.0], f64::NAN).is_err());
    }

    #[test]
    fn coefficient_count_is_checked() {
        let spec = make_spec(2, 3, (0.0, 20.0), ControlSpacing::Linear).unwrap();
        assert!(curve_eval(&spec, &[1.0, 2.0], 5.0).is_err());
    }

    /// Collocation round trip: sampling a spline at its own control sites and
    /// solving the collocation system recovers the coefficients. Exercises the
    /// knot-average construction (the collocation matrix must be nonsingular).
    fn round_trip_case(order: usize, s: usize, spacing: ControlSpacing, coeffs: &[f64]) {
        let spec = make_spec(order, s, (0.0, 20.0), spacing).unwrap();
        let n = spec.n_control();
        let mut collocation = nalgebra::DMatrix::zeros(n, n);
        let mut rhs = nalgebra::DVector::zeros(n);
        for (i, &tau) in spec.control_positions().iter().enumerate() {
            let basis = basis_eval(&spec, tau).unwrap();
            for j in 0..n {
                collocation[(i, j)] = basis[j];
            }
            rhs[i] = curve_eval(&spec, coeffs, tau).unwrap();
        }
        let solved = collocation
            .lu()
            .solve(&rhs)
            .expect("collocation matrix nonsingular");
        for j in 0..n {
            assert_relative_eq!(solved[j], coeffs[j], epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_nonnegative_local_support(
            order in 2usize..=4,
            s_extra in 0usize..=6,
            frac in 0.0f64..=1.0,
            spacing_log in proptest::bool::ANY,
        ) {
            let s = order + s_extra;
            let spacing = if spacing_log { ControlSpacing::Log } else { ControlSpacing::Linear };
            let spec = make_spec(order, s, (0.0, 20.0), spacing).unwrap();
            let t = 20.0 * frac;
            let basis = basis_eval(&spec, t).unwrap();
            let sum: f64 = basis.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(basis.iter().all(|&v| v >= -1e-15));
            let nonzero = basis.iter().filter(|&&v| v != 0.0).count();
            prop_assert!(nonzero <= order);
            // Constant reproduction follows from partition of unity.
            let kappa = 3.75;
            let c = vec![kappa; s];
            let value = curve_eval(&spec, &c, t).unwrap();
            prop_assert!((value - kappa).abs() < 1e-12 * kappa.abs());
        }

        #[test]
        fn collocation_round_trip(
            order in 2usize..=4,
            s_extra in 0usize..=4,
            raw in proptest::collection::vec(-5.0f64..5.0, 8),
            spacing_log in proptest::bool::ANY,
        ) {
            let s = order + s_extra;
            let spacing = if spacing_log { ControlSpacing::Log } else { ControlSpacing::Linear };
            round_trip_case(order, s, spacing, &raw[..s]);
        }
    }
}
