//! Divergence kinds and their per-point algebra.
//!
//! Every supported divergence (except the Donsker–Varadhan variant) has the
//! variational form `D(μ, ν) = sup_f E_μ[f] − E_ν[h(f)]`, where `h` is the
//! kind's measurement function. This module holds `h`, `h'` and the potential
//! `f*` attaining the supremum, expressed through the density ratio `dμ/dν`.
//!
//! Conventions: squared Hellinger is `∫(√p − √q)²` (no factor 1/2, range
//! `[0, 2]`) and total variation is `∫|p − q|` (range `[0, 2]`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs at or above this value are rejected by the squared-Hellinger `h`.
pub const H2_UPPER_GUARD: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DivergenceKind {
    #[serde(rename = "kl")]
    Kl,
    /// KL through the Donsker–Varadhan log-mean-exp objective.
    #[serde(rename = "kl-dv")]
    KlDv,
    #[serde(rename = "chi2")]
    Chi2,
    #[serde(rename = "h2")]
    H2,
    #[serde(rename = "tv")]
    Tv,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 5] =
        [DivergenceKind::Kl, DivergenceKind::KlDv, DivergenceKind::Chi2, DivergenceKind::H2, DivergenceKind::Tv];

    /// The four kinds that carry a measurement function.
    pub const H_FORM: [DivergenceKind; 4] =
        [DivergenceKind::Kl, DivergenceKind::Chi2, DivergenceKind::H2, DivergenceKind::Tv];

    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::KlDv => "kl-dv",
            DivergenceKind::Chi2 => "chi2",
            DivergenceKind::H2 => "h2",
            DivergenceKind::Tv => "tv",
        }
    }

    /// The kind whose potential and oracle value this kind shares (DV → KL).
    pub fn base(self) -> DivergenceKind {
        match self {
            DivergenceKind::KlDv => DivergenceKind::Kl,
            other => other,
        }
    }

    /// Upper end of the value range, if bounded.
    pub fn max_value(self) -> Option<f64> {
        match self {
            DivergenceKind::H2 | DivergenceKind::Tv => Some(2.0),
            _ => None,
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(DivergenceKind::Kl),
            "kl-dv" => Ok(DivergenceKind::KlDv),
            "chi2" => Ok(DivergenceKind::Chi2),
            "h2" => Ok(DivergenceKind::H2),
            "tv" => Ok(DivergenceKind::Tv),
            _ => Err(Error::Parse {
                input: s.to_string(),
                pos: 0,
                expected: "one of kl, kl-dv, chi2, h2, tv".to_string(),
            }),
        }
    }
}

/// Radon–Nikodym value `(dμ/dν)(x)`; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RatioValue(f64);

impl RatioValue {
    pub fn new(r: f64) -> Result<Self> {
        if r > 0.0 && r.is_finite() {
            Ok(RatioValue(r))
        } else {
            Err(Error::Domain(format!("density ratio must be positive and finite, got {r}")))
        }
    }

    /// Builds the ratio from a log-ratio without leaving log space for the check.
    pub fn from_log(log_r: f64) -> Result<Self> {
        if log_r.is_nan() {
            return Err(Error::Domain("log density ratio is NaN".into()));
        }
        RatioValue::new(log_r.exp())
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn check_admissible(kind: DivergenceKind, x: f64) -> Result<()> {
    match kind {
        DivergenceKind::KlDv => Err(Error::UnsupportedKind(kind)),
        DivergenceKind::H2 if x >= H2_UPPER_GUARD || x.is_nan() => {
            Err(Error::Domain(format!("h2 measurement function needs x < 1, got {x}")))
        }
        _ => Ok(()),
    }
}

/// Measurement function `h(x)`.
pub fn h_value(kind: DivergenceKind, x: f64) -> Result<f64> {
    check_admissible(kind, x)?;
    Ok(match kind {
        DivergenceKind::Kl => x.exp_m1(),
        DivergenceKind::Chi2 => x + 0.25 * x * x,
        DivergenceKind::H2 => x / (1.0 - x),
        DivergenceKind::Tv => x,
        DivergenceKind::KlDv => unreachable!(),
    })
}

/// Derivative `h'(x)`.
pub fn h_derivative(kind: DivergenceKind, x: f64) -> Result<f64> {
    check_admissible(kind, x)?;
    Ok(match kind {
        DivergenceKind::Kl => x.exp(),
        DivergenceKind::Chi2 => 1.0 + 0.5 * x,
        DivergenceKind::H2 => {
            let u = 1.0 - x;
            1.0 / (u * u)
        }
        DivergenceKind::Tv => 1.0,
        DivergenceKind::KlDv => unreachable!(),
    })
}

/// Potential attaining the variational supremum at a point with ratio `r`.
///
/// The DV variant shares the KL potential (it is defined up to a constant).
pub fn optimal_potential(kind: DivergenceKind, r: RatioValue) -> f64 {
    let r = r.get();
    match kind.base() {
        DivergenceKind::Kl => r.ln(),
        DivergenceKind::Chi2 => 2.0 * (r - 1.0),
        DivergenceKind::H2 => 1.0 - r.powf(-0.5),
        // ties p = q fall on the +1 side
        DivergenceKind::Tv => {
            if r >= 1.0 {
                1.0
            } else {
                -1.0
            }
        }
        DivergenceKind::KlDv => unreachable!(),
    }
}

/// Same as [`optimal_potential`] but from `log(dμ/dν)`, which keeps the KL
/// case exact for extreme ratios.
pub fn optimal_potential_from_log(kind: DivergenceKind, log_r: f64) -> Result<f64> {
    if log_r.is_nan() {
        return Err(Error::Domain("log density ratio is NaN".into()));
    }
    Ok(match kind.base() {
        DivergenceKind::Kl => log_r,
        DivergenceKind::Chi2 => 2.0 * log_r.exp_m1(),
        DivergenceKind::H2 => -(-0.5 * log_r).exp_m1(),
        DivergenceKind::Tv => {
            if log_r >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        DivergenceKind::KlDv => unreachable!(),
    })
}
