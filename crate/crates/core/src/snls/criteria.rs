//! Least-squares information criteria used to rank fitted models.
//!
//! For `n` observations, `k` free parameters, and residual sum of squares
//! `RSS`:
//!
//! ```text
//! AIC  = n ln(RSS / n) + 2 k
//! BIC  = n ln(RSS / n) + k ln n
//! AICc = AIC + 2 k (k + 1) / (n - k - 1)
//! ```
//!
//! The small-sample correction is undefined when `n - k - 1 <= 0`; such a
//! model is reported without an AICc and treated as unavailable for ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An exact fit would send `ln(RSS)` to negative infinity; flooring keeps the
/// criteria finite while still ranking a perfect fit ahead of any other.
const RSS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    pub aic: f64,
    pub bic: f64,
    /// `None` when the correction denominator `n - k - 1` is not positive.
    pub aicc: Option<f64>,
}

pub fn information_criteria(rss: f64, n_obs: usize, k_free: usize) -> Result<Criteria> {
    if !rss.is_finite() || rss < 0.0 {
        return Err(Error::Data(format!(
            "residual sum of squares must be finite and nonnegative, got {rss}"
        )));
    }
    if n_obs == 0 {
        return Err(Error::Config(
            "information criteria need at least one observation".into(),
        ));
    }
    let n = n_obs as f64;
    let k = k_free as f64;
    let base = n * (rss.max(RSS_FLOOR) / n).ln();
    let aic = base + 2.0 * k;
    let bic = base + k * n.ln();
    let aicc = (n_obs > k_free + 1).then(|| aic + 2.0 * k * (k + 1.0) / (n - k - 1.0));
    Ok(Criteria { aic, bic, aicc })
}
