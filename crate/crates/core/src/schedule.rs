//! Width-indexed class schedules: how the parameter bound `m_k`, the cap
//! offset `t_k` and the mask radius `r_k` grow with `k` for each divergence.

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::net::{Activation, NetClassSpec, OutputTransform};

/// Whether a bound `M` on the problem class is known when picking the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Regime {
    KnownM {
        m: f64,
    },
    UnknownM,
    /// Fixed bounds `(1, 1, 1, 0)` with the width tied to `n` (see
    /// [`consistency_width`]).
    Consistency {
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

fn default_rho() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Support {
    CompactUnitCube,
    /// Mask outside a ball; `radius: None` derives it from `k` and `M`.
    Ball {
        radius: Option<f64>,
    },
}

fn one() -> f64 {
    1.0
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRequest {
    pub kind: DivergenceKind,
    pub k: usize,
    pub d: usize,
    pub regime: Regime,
    pub support: Support,
    /// Hölder smoothness of the TV potential, `0 < s ≤ 1`.
    #[serde(default = "one")]
    pub smoothness: f64,
    /// Prefactor of the TV parameter bound.
    #[serde(default = "one")]
    pub c0: f64,
    /// Prefactor of the `√(ln k)` mask-radius growth.
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "relu")]
    pub activation: Activation,
}

impl ScheduleRequest {
    pub fn new(kind: DivergenceKind, k: usize, d: usize, regime: Regime, support: Support) -> Self {
        ScheduleRequest { kind, k, d, regime, support, smoothness: 1.0, c0: 1.0, c1: 1.0, activation: Activation::Relu }
    }

    pub fn with_k(&self, k: usize) -> Self {
        ScheduleRequest { k, ..self.clone() }
    }
}

/// A materialized schedule: the class plus the numbers it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub spec: NetClassSpec,
    pub m_k: f64,
    pub t_k: Option<f64>,
    pub r_k: Option<f64>,
}

/// Width used by the consistency regime for `n` samples.
///
/// KL: `⌊(1 − ρ)/4 · ln n⌋`; TV: `⌊n^{(1−ρ)/2}⌋`; at least 1.
pub fn consistency_width(kind: DivergenceKind, n: usize, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidRequest(format!("consistency rho must lie in (0, 1), got {rho}")));
    }
    let n = n.max(1) as f64;
    let k = match kind.base() {
        DivergenceKind::Kl => ((1.0 - rho) / 4.0 * n.ln()).floor(),
        DivergenceKind::Tv => n.powf((1.0 - rho) / 2.0).floor(),
        other => return Err(Error::InvalidRequest(format!("no consistency schedule for {other}"))),
    };
    Ok((k as usize).max(1))
}

fn known_m(regime: &Regime) -> Option<f64> {
    match regime {
        Regime::KnownM { m } => Some(*m),
        _ => None,
    }
}

/// Resolves a schedule request into a concrete class.
pub fn resolve_schedule(req: &ScheduleRequest) -> Result<Schedule> {
    if req.d == 0 {
        return Err(Error::InvalidRequest("d must be >= 1".into()));
    }
    if let Regime::KnownM { m } = req.regime {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidRequest(format!("known M must be positive, got {m}")));
        }
    }
    let consistency = matches!(req.regime, Regime::Consistency { .. });
    if consistency {
        if req.k < 1 {
            return Err(Error::InvalidRequest("k must be >= 1".into()));
        }
    } else if req.k < 2 {
        return Err(Error::InvalidRequest(format!("k must be >= 2 for log-k schedules, got {}", req.k)));
    }
    if !(req.smoothness > 0.0 && req.smoothness <= 1.0) {
        return Err(Error::InvalidRequest(format!("smoothness s must lie in (0, 1], got {}", req.smoothness)));
    }
    if !(req.c0 > 0.0 && req.c1 >= 0.0) {
        return Err(Error::InvalidRequest("schedule prefactors must be positive".into()));
    }

    let kf = req.k as f64;
    let ln_k = kf.ln();
    let m = known_m(&req.regime);

    let (m_k, t_k) = if consistency {
        match req.kind.base() {
            DivergenceKind::Kl | DivergenceKind::Tv => (1.0, None),
            other => return Err(Error::InvalidRequest(format!("no consistency schedule for {other}"))),
        }
    } else {
        match req.kind.base() {
            DivergenceKind::Kl => (m.unwrap_or_else(|| ln_k.ln().max(1.0)), None),
            DivergenceKind::Chi2 => (m.unwrap_or(ln_k), None),
            DivergenceKind::H2 => {
                let (a, t) = match m {
                    Some(m) => (m, m.powf(-0.5)),
                    None => (ln_k, 1.0 / ln_k),
                };
                if t >= 1.0 {
                    return Err(Error::InvalidRequest(format!(
                        "h2 cap offset t = {t} must be < 1 (need k >= 3, or M > 1)"
                    )));
                }
                (a, Some(t))
            }
            DivergenceKind::Tv => {
                let d = req.d as f64;
                let s = req.smoothness;
                (req.c0 * kf.powf((d + 2.0) / (2.0 * (s + d + 2.0))), None)
            }
            DivergenceKind::KlDv => unreachable!(),
        }
    };

    let mut spec = if consistency {
        NetClassSpec::star(req.d, req.k, req.activation)
    } else {
        match req.activation {
            Activation::Relu => NetClassSpec::relu(req.d, req.k, m_k),
            Activation::Sigmoid => NetClassSpec::sigmoid(req.d, req.k, m_k),
        }
    };
    spec.transform = match (req.kind.base(), t_k) {
        (DivergenceKind::H2, Some(t)) => OutputTransform::Cap { t },
        (DivergenceKind::Tv, _) => OutputTransform::Clip,
        _ => OutputTransform::Identity,
    };

    let r_k = match req.support {
        Support::CompactUnitCube => None,
        Support::Ball { radius: Some(r) } => {
            if !(r > 0.0) {
                return Err(Error::InvalidRequest(format!("ball radius must be > 0, got {r}")));
            }
            Some(r)
        }
        Support::Ball { radius: None } => {
            let m = m.ok_or_else(|| Error::InvalidRequest("automatic ball radius needs a known M".into()))?;
            Some(m.max(1.0) + req.c1 * ln_k.max(0.0).sqrt())
        }
    };
    spec.mask_radius = r_k;
    spec.validate()?;
    Ok(Schedule { spec, m_k, t_k, r_k })
}

/// The class prescribed for `req`.
pub fn class_schedule(req: &ScheduleRequest) -> Result<NetClassSpec> {
    resolve_schedule(req).map(|s| s.spec)
}
