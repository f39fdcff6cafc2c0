//! Observed data: paired, independently gridded CD4 and viral-load series.
//!
//! The two series may live on different time grids with different lengths
//! (clinical visits rarely measure both quantities at once). Values are
//! stored on the raw measurement scale; each series carries the scale on
//! which fits should compare it to model output, plus an optional scalar
//! weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale on which a series is compared to model output during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    /// Compare raw values.
    #[default]
    Raw,
    /// Compare base-10 logarithms; requires strictly positive data.
    Log10,
}

impl ScaleKind {
    /// Transforms one value onto this scale.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScaleKind::Raw => x,
            ScaleKind::Log10 => x.log10(),
        }
    }

    /// Maps a value on this scale back to the raw measurement scale.
    pub fn invert(self, y: f64) -> f64 {
        match self {
            ScaleKind::Raw => y,
            ScaleKind::Log10 => 10f64.powf(y),
        }
    }
}

impl std::fmt::Display for ScaleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleKind::Raw => write!(f, "raw"),
            ScaleKind::Log10 => write!(f, "log10"),
        }
    }
}

impl std::str::FromStr for ScaleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(ScaleKind::Raw),
            "log10" | "log" => Ok(ScaleKind::Log10),
            other => Err(Error::Config(format!(
                "unknown scale '{other}' (expected raw or log10)"
            ))),
        }
    }
}

/// One subject's observed total CD4 count and viral load over time.
///
/// Constructed through [`ObservationSet::new`] (raw scales, unit weights)
/// or the builder-style [`with_scales`](ObservationSet::with_scales) /
/// [`with_weights`](ObservationSet::with_weights); the constructors enforce
/// the invariants (strictly increasing finite times, finite values, positive
/// values wherever a log scale applies), so consumers can rely on them.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    t_times: Vec<f64>,
    t_values: Vec<f64>,
    v_times: Vec<f64>,
    v_values: Vec<f64>,
    t_scale: ScaleKind,
    v_scale: ScaleKind,
    t_weight: f64,
    v_weight: f64,
}

fn validate_series(name: &str, times: &[f64], values: &[f64]) -> Result<()> {
    if times.len() != values.len() {
        return Err(Error::Data(format!(
            "{name}: times ({}) and values ({}) differ in length",
            times.len(),
            values.len()
        )));
    }
    if times.is_empty() {
        return Err(Error::Data(format!("{name}: series is empty")));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Data(format!(
                "{name}: times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(bad) = times.iter().chain(values.iter()).find(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{name}: non-finite entry {bad}")));
    }
    Ok(())
}

fn validate_scale(name: &str, values: &[f64], scale: ScaleKind) -> Result<()> {
    if scale == ScaleKind::Log10 {
        if let Some(bad) = values.iter().find(|&&x| x <= 0.0) {
            return Err(Error::Data(format!(
                "{name}: log10 scale needs strictly positive values, got {bad}"
            )));
        }
    }
    Ok(())
}

impl ObservationSet {
    /// Raw-scale, unit-weight observation set.
    pub fn new(
        t_times: Vec<f64>,
        t_values: Vec<f64>,
        v_times: Vec<f64>,
        v_values: Vec<f64>,
    ) -> Result<Self> {
        validate_series("cd4 series", &t_times, &t_values)?;
        validate_series("viral-load series", &v_times, &v_values)?;
        Ok(Self {
            t_times,
            t_values,
            v_times,
            v_values,
            t_scale: ScaleKind::Raw,
            v_scale: ScaleKind::Raw,
            t_weight: 1.0,
            v_weight: 1.0,
        })
    }

    /// Sets the per-series comparison scales.
    pub fn with_scales(mut self, t_scale: ScaleKind, v_scale: ScaleKind) -> Result<Self> {
        validate_scale("cd4 series", &self.t_values, t_scale)?;
        validate_scale("viral-load series", &self.v_values, v_scale)?;
        self.t_scale = t_scale;
        self.v_scale = v_scale;
        Ok(self)
    }

    /// Sets the per-series scalar weights (both must be positive and finite).
    pub fn with_weights(mut self, t_weight: f64, v_weight: f64) -> Result<Self> {
        for (name, w) in [("cd4", t_weight), ("viral-load", v_weight)] {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} weight must be positive and finite, got {w}"
                )));
            }
        }
        self.t_weight = t_weight;
        self.v_weight = v_weight;
        Ok(self)
    }

    pub fn t_times(&self) -> &[f64] {
        &self.t_times
    }

    pub fn t_values(&self) -> &[f64] {
        &self.t_values
    }

    pub fn v_times(&self) -> &[f64] {
        &self.v_times
    }

    pub fn v_values(&self) -> &[f64] {
        &self.v_values
    }

    pub fn t_scale(&self) -> ScaleKind {
        self.t_scale
    }

    pub fn v_scale(&self) -> ScaleKind {
        self.v_scale
    }

    pub fn t_weight(&self) -> f64 {
        self.t_weight
    }

    pub fn v_weight(&self) -> f64 {
        self.v_weight
    }

    pub fn n_t(&self) -> usize {
        self.t_times.len()
    }

    pub fn n_v(&self) -> usize {
        self.v_times.len()
    }

    /// Total observation count across both series.
    pub fn n_total(&self) -> usize {
        self.n_t() + self.n_v()
    }

    /// Time window covered by both series: `[max of starts, min of ends]`.
    /// `None` when the series do not overlap.
    pub fn overlap_span(&self) -> Option<(f64, f64)> {
        let lo = self.t_times[0].max(self.v_times[0]);
        let hi = self.t_times[self.n_t() - 1].min(self.v_times[self.n_v() - 1]);
        (lo <= hi).then_some((lo, hi))
    }

    /// Sorted union of the two time grids, restricted to [`overlap_span`]
    /// (both endpoints included). Exact duplicates collapse to one entry.
    /// Empty when the series do not overlap in time.
    ///
    /// [`overlap_span`]: ObservationSet::overlap_span
    pub fn union_times(&self) -> Vec<f64> {
        let Some((lo, hi)) = self.overlap_span() else {
            return Vec::new();
        };
        let mut all: Vec<f64> = self
            .t_times
            .iter()
            .chain(self.v_times.iter())
            .copied()
            .filter(|&t| t >= lo && t <= hi)
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        all.dedup();
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simple_set() -> ObservationSet {
        ObservationSet::new(
            vec![0.0, 1.0, 2.0, 3.0],
            vec![600.0, 610.0, 620.0, 630.0],
            vec![0.5, 1.0, 2.5],
            vec![1e5, 9e4, 8e4],
        )
        .unwrap()
    }

    #[test]
    fn accepts_independent_grids_of_different_lengths() {
        let obs = simple_set();
        assert_eq!(obs.n_t(), 4);
        assert_eq!(obs.n_v(), 3);
        assert_eq!(obs.n_total(), 7);
        assert_eq!(obs.t_weight(), 1.0);
        assert_eq!(obs.v_weight(), 1.0);
        assert_eq!(obs.t_scale(), ScaleKind::Raw);
    }

    #[test]
    fn rejects_malformed_series() {
        // Length mismatch.
        assert!(ObservationSet::new(vec![0.0, 1.0], vec![1.0], vec![0.0], vec![1.0]).is_err());
        // Non-increasing times.
        assert!(
            ObservationSet::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![0.0], vec![1.0]).is_err()
        );
        // Empty series.
        assert!(ObservationSet::new(vec![], vec![], vec![0.0], vec![1.0]).is_err());
        // Non-finite value.
        assert!(
            ObservationSet::new(vec![0.0, 1.0], vec![1.0, f64::NAN], vec![0.0], vec![1.0])
                .is_err()
        );
    }

    #[test]
    fn log_scale_requires_positive_values() {
        let obs = ObservationSet::new(vec![0.0, 1.0], vec![5.0, -1.0], vec![0.0], vec![100.0])
            .unwrap();
        // Negative CD4 value blocks a log10 CD4 scale but not a raw one.
        assert!(obs.clone().with_scales(ScaleKind::Log10, ScaleKind::Raw).is_err());
        let obs = obs.with_scales(ScaleKind::Raw, ScaleKind::Log10).unwrap();
        assert_eq!(obs.v_scale(), ScaleKind::Log10);
        assert_relative_eq!(obs.v_scale().apply(100.0), 2.0);
        assert_relative_eq!(obs.t_scale().apply(-1.0), -1.0);
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(simple_set().with_weights(0.0, 1.0).is_err());
        assert!(simple_set().with_weights(1.0, f64::INFINITY).is_err());
        let obs = simple_set().with_weights(2.0, 0.5).unwrap();
        assert_eq!(obs.t_weight(), 2.0);
        assert_eq!(obs.v_weight(), 0.5);
    }

    #[test]
    fn union_grid_merges_dedups_and_restricts_to_overlap() {
        let obs = simple_set();
        // Overlap is [0.5, 2.5]: drops t = 0 and t = 3, merges the shared 1.0.
        assert_eq!(obs.overlap_span(), Some((0.5, 2.5)));
        assert_eq!(obs.union_times(), vec![0.5, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn disjoint_series_have_empty_union() {
        let obs = ObservationSet::new(
            vec![0.0, 1.0],
            vec![1.0, 2.0],
            vec![5.0, 6.0],
            vec![3.0, 4.0],
        )
        .unwrap();
        assert_eq!(obs.overlap_span(), None);
        assert!(obs.union_times().is_empty());
    }

    #[test]
    fn scale_kind_parses_and_prints() {
        assert_eq!("raw".parse::<ScaleKind>().unwrap(), ScaleKind::Raw);
        assert_eq!("Log10".parse::<ScaleKind>().unwrap(), ScaleKind::Log10);
        assert!("sqrt".parse::<ScaleKind>().is_err());
        assert_eq!(ScaleKind::Log10.to_string(), "log10");
    }
}
