//! Names for the fittable model parameters.
//!
//! One enum ties together the estimators, the parameter-vector layout, and the
//! CLI's `--fix name=value` syntax, so a parameter is addressed the same way
//! everywhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A single fittable quantity of the viral-dynamics model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamName {
    /// Source rate of uninfected target cells.
    Lambda,
    /// Death rate of uninfected target cells.
    Rho,
    /// Virions produced per infected cell (burst size).
    NVirions,
    /// Death rate of infected cells.
    Delta,
    /// Viral clearance rate.
    Clearance,
    /// B-spline coefficient `j` (0-based) of the time-varying infection rate.
    Coeff(usize),
    /// Initial uninfected target-cell concentration.
    TU0,
    /// Initial infected-cell concentration.
    TI0,
    /// Initial viral load.
    V0,
}

impl ParamName {
    /// The five kinetic constants, in canonical order.
    pub const CONSTANTS: [ParamName; 5] = [
        ParamName::Lambda,
        ParamName::Rho,
        ParamName::NVirions,
        ParamName::Delta,
        ParamName::Clearance,
    ];
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamName::Lambda => write!(f, "lambda"),
            ParamName::Rho => write!(f, "rho"),
            ParamName::NVirions => write!(f, "n"),
            ParamName::Delta => write!(f, "delta"),
            ParamName::Clearance => write!(f, "c"),
            ParamName::Coeff(j) => write!(f, "a{}", j + 1),
            ParamName::TU0 => write!(f, "t_u0"),
            ParamName::TI0 => write!(f, "t_i0"),
            ParamName::V0 => write!(f, "v0"),
        }
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "lambda" => Ok(ParamName::Lambda),
            "rho" => Ok(ParamName::Rho),
            "n" | "n_virions" => Ok(ParamName::NVirions),
            "delta" => Ok(ParamName::Delta),
            "c" | "clearance" => Ok(ParamName::Clearance),
            "t_u0" | "tu0" => Ok(ParamName::TU0),
            "t_i0" | "ti0" => Ok(ParamName::TI0),
            "v0" => Ok(ParamName::V0),
            other => {
                if let Some(idx) = other.strip_prefix('a') {
                    if let Ok(j) = idx.parse::<usize>() {
                        if j >= 1 {
                            return Ok(ParamName::Coeff(j - 1));
                        }
                    }
                }
                Err(Error::Config(format!(
                    "unknown parameter name '{other}' \
                     (expected lambda, rho, n, delta, c, a1.., t_u0, t_i0, v0)"
                )))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_display_and_parse() {
        let names = [
            ParamName::Lambda,
            ParamName::Rho,
            ParamName::NVirions,
            ParamName::Delta,
            ParamName::Clearance,
            ParamName::Coeff(0),
            ParamName::Coeff(6),
            ParamName::TU0,
            ParamName::TI0,
            ParamName::V0,
        ];
        for name in names {
            let parsed: ParamName = name.to_string().parse().unwrap();
            assert_eq!(parsed, name);
        }
    }

    #[test]
    fn rejects_unknown_and_zero_indexed_coefficients() {
        assert!("gamma".parse::<ParamName>().is_err());
        assert!("a0".parse::<ParamName>().is_err());
        assert!("a".parse::<ParamName>().is_err());
    }
}
