//! Flat parameter vector for the nonlinear least-squares refinement.
//!
//! One fit works on a single coordinate vector in the canonical order
//! `lambda, rho, N, delta, c, a_1..a_s[, T_u(0), T_i(0), V(0)]`, where the
//! `a_j` are the spline coefficients of the infection rate and the trailing
//! initial-state block is present only when the initial conditions are being
//! estimated. A boolean mask marks coordinates held fixed: the optimizer only
//! ever sees the free ones, so masked entries survive a fit bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiv::{ConstantParams, StateVector};
use crate::optim::SearchBox;
use crate::param::ParamName;

/// Coordinate layout: how many spline coefficients, and whether the initial
/// state is part of the vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaLayout {
    n_coeffs: usize,
    with_initial_state: bool,
}

impl ThetaLayout {
    pub fn new(n_coeffs: usize, with_initial_state: bool) -> Result<Self> {
        if n_coeffs == 0 {
            return Err(Error::Config(
                "parameter vector needs at least one spline coefficient".into(),
            ));
        }
        Ok(Self {
            n_coeffs,
            with_initial_state,
        })
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn with_initial_state(&self) -> bool {
        self.with_initial_state
    }

    /// Total coordinate count: five kinetic constants, the coefficients, and
    /// optionally the three initial conditions.
    pub fn dim(&self) -> usize {
        5 + self.n_coeffs + if self.with_initial_state { 3 } else { 0 }
    }

    /// Names of all coordinates in canonical order.
    pub fn names(&self) -> Vec<ParamName> {
        let mut names = Vec::with_capacity(self.dim());
        names.extend(ParamName::CONSTANTS);
        names.extend((0..self.n_coeffs).map(ParamName::Coeff));
        if self.with_initial_state {
            names.extend([ParamName::TU0, ParamName::TI0, ParamName::V0]);
        }
        names
    }

    pub fn index_of(&self, name: ParamName) -> Option<usize> {
        let ic = |offset: usize| self.with_initial_state.then_some(5 + self.n_coeffs + offset);
        match name {
            ParamName::Lambda => Some(0),
            ParamName::Rho => Some(1),
            ParamName::NVirions => Some(2),
            ParamName::Delta => Some(3),
            ParamName::Clearance => Some(4),
            ParamName::Coeff(j) => (j < self.n_coeffs).then_some(5 + j),
            ParamName::TU0 => ic(0),
            ParamName::TI0 => ic(1),
            ParamName::V0 => ic(2),
        }
    }

    pub fn name_of(&self, index: usize) -> Option<ParamName> {
        self.names().get(index).copied()
    }
}

/// A point in parameter space together with its search box and fixed mask.
///
/// Values must be finite but need not lie inside the box: a warm start is
/// clamped in before searching, and a coordinate fixed by the caller keeps
/// whatever value it was pinned at. The box must have strictly positive lower
/// bounds for the kinetic constants and the initial conditions; spline
/// coefficients may start at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    layout: ThetaLayout,
    values: Vec<f64>,
    fixed: Vec<bool>,
    bounds: SearchBox,
}

impl ThetaVector {
    /// Builds a fully free vector; use [`fix`](Self::fix) to pin coordinates.
    pub fn new(layout: ThetaLayout, values: Vec<f64>, bounds: SearchBox) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Config(format!(
                "parameter vector needs {} coordinates, got {}",
                layout.dim(),
                values.len()
            )));
        }
        if bounds.dim() != layout.dim() {
            return Err(Error::Config(format!(
                "search box has {} dimensions for a {}-coordinate vector",
                bounds.dim(),
                layout.dim()
            )));
        }
        for (i, name) in layout.names().iter().enumerate() {
            let positive_required = !matches!(name, ParamName::Coeff(_));
            if positive_required && !(bounds.lower()[i] > 0.0) {
                return Err(Error::Config(format!(
                    "search bounds for {name} must have a strictly positive lower edge, got {}",
                    bounds.lower()[i]
                )));
            }
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "parameter values must be finite, got {bad}"
            )));
        }
        let fixed = vec![false; values.len()];
        Ok(Self {
            layout,
            values,
            fixed,
            bounds,
        })
    }

    pub fn layout(&self) -> ThetaLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &SearchBox {
        &self.bounds
    }

    pub fn fixed_mask(&self) -> &[bool] {
        &self.fixed
    }

    pub fn value_of(&self, name: ParamName) -> Option<f64> {
        self.layout.index_of(name).map(|i| self.values[i])
    }

    /// Pins one coordinate at `value`; it is excluded from every later search.
    pub fn fix(&mut self, name: ParamName, value: f64) -> Result<()> {
        let i = self
            .layout
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("no coordinate named {name} in this layout")))?;
        if !value.is_finite() {
            return Err(Error::Data(format!("cannot fix {name} at {value}")));
        }
        self.values[i] = value;
        self.fixed[i] = true;
        Ok(())
    }

    pub fn n_free(&self) -> usize {
        self.fixed.iter().filter(|&&f| !f).count()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| !self.fixed[i]).collect()
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.free_indices().iter().map(|&i| self.values[i]).collect()
    }

    /// Names of the free coordinates, in canonical order.
    pub fn free_names(&self) -> Vec<ParamName> {
        let names = self.layout.names();
        self.free_indices().iter().map(|&i| names[i]).collect()
    }

    /// Search box restricted to the free coordinates.
    pub fn free_box(&self) -> Result<SearchBox> {
        let idx = self.free_indices();
        if idx.is_empty() {
            return Err(Error::Config(
                "every coordinate is fixed; there is nothing to search over".into(),
            ));
        }
        let lower = idx.iter().map(|&i| self.bounds.lower()[i]).collect();
        let upper = idx.iter().map(|&i| self.bounds.upper()[i]).collect();
        SearchBox::new(lower, upper)
    }

    /// Full coordinate vector with the free slots replaced from `free`.
    pub fn expand_free(&self, free: &[f64]) -> Vec<f64> {
        debug_assert_eq!(free.len(), self.n_free());
        let mut full = self.values.clone();
        for (slot, &v) in self.free_indices().iter().zip(free) {
            full[*slot] = v;
        }
        full
    }

    /// Copy of this vector with the free coordinates replaced; fixed entries
    /// are untouched.
    pub fn with_free_values(&self, free: &[f64]) -> Result<Self> {
        if free.len() != self.n_free() {
            return Err(Error::Config(format!(
                "expected {} free values, got {}",
                self.n_free(),
                free.len()
            )));
        }
        let mut out = self.clone();
        out.values = self.expand_free(free);
        Ok(out)
    }

    /// The five kinetic constants as validated model parameters.
    pub fn constants(&self) -> Result<ConstantParams> {
        ConstantParams::new(
            self.values[0],
            self.values[1],
            self.values[2],
            self.values[3],
            self.values[4],
        )
    }

    /// The spline coefficient block.
    pub fn coeffs(&self) -> &[f64] {
        &self.values[5..5 + self.layout.n_coeffs]
    }

    /// The initial-state block, when the layout carries one.
    pub fn initial_state(&self) -> Option<StateVector> {
        if !self.layout.with_initial_state {
            return None;
        }
        let base = 5 + self.layout.n_coeffs;
        Some(StateVector::new(
            self.values[base],
            self.values[base + 1],
            self.values[base + 2],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_for(layout: &ThetaLayout) -> SearchBox {
        let lower: Vec<f64> = layout
            .names()
            .iter()
            .map(|n| if matches!(n, ParamName::Coeff(_)) { 0.0 } else { 1e-3 })
            .collect();
        let upper = vec![1e6; layout.dim()];
        SearchBox::new(lower, upper).unwrap()
    }

    fn small_theta() -> ThetaVector {
        let layout = ThetaLayout::new(3, true).unwrap();
        let bounds = box_for(&layout);
        let values = vec![36.0, 0.108, 1000.0, 0.5, 3.0, 1e-5, 2e-5, 3e-5, 600.0, 30.0, 1e5];
        ThetaVector::new(layout, values, bounds).unwrap()
    }

    #[test]
    fn layout_orders_coordinates_canonically() {
        let layout = ThetaLayout::new(3, true).unwrap();
        assert_eq!(layout.dim(), 11);
        assert_eq!(
            layout.names(),
            vec![
                ParamName::Lambda,
                ParamName::Rho,
                ParamName::NVirions,
                ParamName::Delta,
                ParamName::Clearance,
                ParamName::Coeff(0),
                ParamName::Coeff(1),
                ParamName::Coeff(2),
                ParamName::TU0,
                ParamName::TI0,
                ParamName::V0,
            ]
        );
        for (i, name) in layout.names().into_iter().enumerate() {
            assert_eq!(layout.index_of(name), Some(i));
            assert_eq!(layout.name_of(i), Some(name));
        }
        assert_eq!(layout.name_of(11), None);

        let no_ics = ThetaLayout::new(4, false).unwrap();
        assert_eq!(no_ics.dim(), 9);
        assert_eq!(no_ics.index_of(ParamName::V0), None);
        assert_eq!(no_ics.index_of(ParamName::Coeff(3)), Some(8));
        assert_eq!(no_ics.index_of(ParamName::Coeff(4)), None);
    }

    #[test]
    fn fixing_pins_value_and_shrinks_the_free_set() {
        let mut theta = small_theta();
        assert_eq!(theta.n_free(), 11);
        theta.fix(ParamName::Delta, 0.75).unwrap();
        theta.fix(ParamName::V0, 99.0).unwrap();
        assert_eq!(theta.value_of(ParamName::Delta), Some(0.75));
        assert_eq!(theta.n_free(), 9);
        assert!(!theta.free_indices().contains(&3));
        assert!(theta.fixed_mask()[10]);
        assert!(!theta.free_names().contains(&ParamName::Delta));
    }

    #[test]
    fn free_coordinates_replace_while_fixed_stay_bit_identical() {
        let mut theta = small_theta();
        theta.fix(ParamName::Delta, 0.5).unwrap();
        theta.fix(ParamName::TI0, 30.0).unwrap();
        let replacement = vec![7.0; theta.n_free()];
        let updated = theta.with_free_values(&replacement).unwrap();
        assert_eq!(updated.value_of(ParamName::Delta).unwrap().to_bits(), 0.5f64.to_bits());
        assert_eq!(updated.value_of(ParamName::TI0).unwrap().to_bits(), 30.0f64.to_bits());
        assert_eq!(updated.value_of(ParamName::Lambda), Some(7.0));
        assert_eq!(updated.value_of(ParamName::Coeff(2)), Some(7.0));
        assert!(theta.with_free_values(&[1.0]).is_err());
    }

    #[test]
    fn free_box_selects_free_dimensions_in_order() {
        let mut theta = small_theta();
        theta.fix(ParamName::Lambda, 36.0).unwrap();
        theta.fix(ParamName::Coeff(1), 2e-5).unwrap();
        let sub = theta.free_box().unwrap();
        assert_eq!(sub.dim(), 9);
        // First free dimension is rho, whose lower edge is 1e-3; the first
        // coefficient keeps its zero lower edge.
        assert_eq!(sub.lower()[0], 1e-3);
        assert_eq!(sub.lower()[4], 0.0);
    }

    #[test]
    fn all_fixed_vector_has_no_free_box() {
        let mut theta = small_theta();
        for name in theta.layout().names() {
            let v = theta.value_of(name).unwrap();
            theta.fix(name, v).unwrap();
        }
        assert_eq!(theta.n_free(), 0);
        assert!(theta.free_box().is_err());
    }

    #[test]
    fn constants_and_blocks_read_back() {
        let theta = small_theta();
        let constants = theta.constants().unwrap();
        assert_eq!(constants.lambda, 36.0);
        assert_eq!(constants.clearance, 3.0);
        assert_eq!(theta.coeffs(), &[1e-5, 2e-5, 3e-5]);
        let init = theta.initial_state().unwrap();
        assert_eq!((init.t_u, init.t_i, init.v), (600.0, 30.0, 1e5));

        let layout = ThetaLayout::new(3, false).unwrap();
        let bounds = box_for(&layout);
        let values = vec![36.0, 0.108, 1000.0, 0.5, 3.0, 1e-5, 2e-5, 3e-5];
        let no_ics = ThetaVector::new(layout, values, bounds).unwrap();
        assert!(no_ics.initial_state().is_none());
    }

    #[test]
    fn rejects_nonpositive_lower_bounds_outside_the_coefficient_block() {
        let layout = ThetaLayout::new(2, false).unwrap();
        let mut lower = vec![1e-3; 7];
        lower[3] = 0.0; // delta
        let bounds = SearchBox::new(lower, vec![10.0; 7]).unwrap();
        let err = ThetaVector::new(layout, vec![1.0; 7], bounds).unwrap_err();
        assert!(err.to_string().contains("delta"));
    }

    #[test]
    fn rejects_mismatched_lengths_and_nonfinite_values() {
        let layout = ThetaLayout::new(3, true).unwrap();
        let bounds = box_for(&layout);
        assert!(ThetaVector::new(layout, vec![1.0; 5], bounds.clone()).is_err());
        let mut values = vec![1.0; 11];
        values[6] = f64::NAN;
        assert!(ThetaVector::new(layout, values, bounds).is_err());
        assert!(ThetaLayout::new(0, true).is_err());
    }
}
