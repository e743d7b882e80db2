//! Ground-truth divergence values: closed forms, tensor-grid quadrature in
//! `d ≤ 2`, and Monte-Carlo plug-in of the attaining potential in any `d`.

use serde::{Deserialize, Serialize};

use crate::distributions::{gaussian_mutual_information, log_ratio_from_logs, Distribution};
use crate::divergence::{optimal_potential_from_log, DivergenceKind};
use crate::error::{Error, Result};
use crate::quadrature::{pairwise_sum, GaussLegendre};
use crate::rng::derive_seed;

/// Default quadrature resolution (nodes per axis).
pub const DEFAULT_GRID: usize = 2048;
const GL_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ClosedForm,
    Quadrature,
    McPlugin,
}

impl std::fmt::Display for OracleMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleMethod::ClosedForm => "closed_form",
            OracleMethod::Quadrature => "quadrature",
            OracleMethod::McPlugin => "mc_plugin",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub method: OracleMethod,
    /// 0 for deterministic methods.
    pub stderr: f64,
    /// Nodes per axis (quadrature) or samples per distribution (Monte Carlo).
    pub detail: u64,
}

/// `KL(N(m_p, σ_p² I) ‖ N(m_q, σ_q² I))`.
pub fn kl_gaussian_closed_form(mp: &[f64], sp: f64, mq: &[f64], sq: f64) -> Result<OracleResult> {
    for s in [sp, sq] {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidSigma(s));
        }
    }
    if mp.len() != mq.len() {
        return Err(Error::DimensionMismatch { what: "gaussian means", expected: mp.len(), got: mq.len() });
    }
    let d = mp.len() as f64;
    let sq_dist: f64 = mp.iter().zip(mq).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = d * (sq / sp).ln() - 0.5 * d + 0.5 * d * sp * sp / (sq * sq) + sq_dist / (2.0 * sq * sq);
    Ok(OracleResult { value: value.max(0.0), method: OracleMethod::ClosedForm, stderr: 0.0, detail: 0 })
}

/// Closed form when one exists for `(kind, p, q)`: KL between isotropic
/// Gaussians, and KL of the bivariate joint against its marginal product.
pub fn closed_form(kind: DivergenceKind, p: &Distribution, q: &Distribution) -> Option<OracleResult> {
    if kind.base() != DivergenceKind::Kl {
        return None;
    }
    match (p, q) {
        (Distribution::Gaussian { mean: mp, sigma: sp }, Distribution::Gaussian { mean: mq, sigma: sq }) => {
            kl_gaussian_closed_form(mp, *sp, mq, *sq).ok()
        }
        (Distribution::MineJoint { rho }, Distribution::MineProduct { .. }) => Some(OracleResult {
            value: gaussian_mutual_information(*rho).ok()?,
            method: OracleMethod::ClosedForm,
            stderr: 0.0,
            detail: 0,
        }),
        _ => None,
    }
}

fn check_pair(p: &Distribution, q: &Distribution) -> Result<usize> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { what: "distribution pair", expected: p.dim(), got: q.dim() });
    }
    Ok(p.dim())
}

fn chi2_finiteness(p: &Distribution, q: &Distribution) -> Result<()> {
    if let (Distribution::Gaussian { sigma: sp, .. }, Distribution::Gaussian { sigma: sq, .. }) = (p, q) {
        if sp * sp >= 2.0 * sq * sq {
            return Err(Error::NonIntegrable(format!(
                "chi2 between Gaussians needs sigma_p^2 < 2 sigma_q^2 (sigma_p = {sp}, sigma_q = {sq})"
            )));
        }
    }
    Ok(())
}

/// Pointwise integrand of the defining integral, from log densities.
fn integrand(kind: DivergenceKind, lp: f64, lq: f64) -> Result<f64> {
    let p = lp.exp();
    let q = lq.exp();
    Ok(match kind.base() {
        DivergenceKind::Kl => {
            if p == 0.0 {
                0.0
            } else if lq == f64::NEG_INFINITY {
                return Err(Error::NonIntegrable("KL: q vanishes where p is positive".into()));
            } else {
                p * (lp - lq)
            }
        }
        DivergenceKind::Chi2 => {
            if lq == f64::NEG_INFINITY {
                if p > 0.0 {
                    return Err(Error::NonIntegrable("chi2: q vanishes where p is positive".into()));
                }
                0.0
            } else {
                let u = (lp - lq).exp_m1();
                q * u * u
            }
        }
        DivergenceKind::H2 => {
            let u = p.sqrt() - q.sqrt();
            u * u
        }
        DivergenceKind::Tv => (p - q).abs(),
        DivergenceKind::KlDv => unreachable!(),
    })
}

fn axis_rule(lo: f64, hi: f64, compact: bool, nodes: usize) -> GaussLegendre {
    let mut breaks = vec![lo, hi];
    if compact {
        for edge in [0.0, 1.0] {
            if edge > lo && edge < hi {
                breaks.push(edge);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    let panels = (nodes / GL_ORDER).max(1);
    GaussLegendre::composite_on_breaks(&breaks, panels, GL_ORDER)
}

/// Composite Gauss–Legendre tensor quadrature of the defining integral.
/// `nodes_per_axis` is rounded to a multiple of the per-panel order (8).
pub fn divergence_quadrature(
    kind: DivergenceKind,
    p: &Distribution,
    q: &Distribution,
    nodes_per_axis: usize,
) -> Result<OracleResult> {
    let d = check_pair(p, q)?;
    if d > 2 {
        return Err(Error::DimensionTooHigh(d));
    }
    if kind.base() == DivergenceKind::Chi2 {
        chi2_finiteness(p, q)?;
    }
    let wp = p.window();
    let wq = q.window();
    let compact = p.is_compact() || q.is_compact();
    let rules: Vec<GaussLegendre> =
        (0..d).map(|j| axis_rule(wp[j].0.min(wq[j].0), wp[j].1.max(wq[j].1), compact, nodes_per_axis)).collect();

    let value = if d == 1 {
        let r = &rules[0];
        let mut terms = Vec::with_capacity(r.len());
        for (&x, &w) in r.nodes.iter().zip(&r.weights) {
            let pt = [x];
            terms.push(w * integrand(kind, p.log_density_unchecked(&pt), q.log_density_unchecked(&pt))?);
        }
        pairwise_sum(&terms)
    } else {
        let (r0, r1) = (&rules[0], &rules[1]);
        let mut rows = Vec::with_capacity(r0.len());
        let mut row = Vec::with_capacity(r1.len());
        for (&x0, &w0) in r0.nodes.iter().zip(&r0.weights) {
            row.clear();
            for (&x1, &w1) in r1.nodes.iter().zip(&r1.weights) {
                let pt = [x0, x1];
                row.push(w1 * integrand(kind, p.log_density_unchecked(&pt), q.log_density_unchecked(&pt))?);
            }
            rows.push(w0 * pairwise_sum(&row));
        }
        pairwise_sum(&rows)
    };
    if !value.is_finite() {
        return Err(Error::NonIntegrable(format!("{kind} quadrature produced {value}")));
    }
    Ok(OracleResult {
        value: value.max(0.0),
        method: OracleMethod::Quadrature,
        stderr: 0.0,
        detail: rules[0].len() as u64,
    })
}

/// `h(f*(x))` written directly in the ratio, so that points where `p = 0`
/// (log-ratio `−∞`) stay finite.
pub fn h_of_potential(kind: DivergenceKind, log_r: f64) -> f64 {
    match kind.base() {
        DivergenceKind::Kl => log_r.exp_m1(),
        DivergenceKind::Chi2 => (2.0 * log_r).exp_m1(),
        DivergenceKind::H2 => (0.5 * log_r).exp_m1(),
        DivergenceKind::Tv => {
            if log_r >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        DivergenceKind::KlDv => unreachable!(),
    }
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let ss: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = if values.len() > 1 { pairwise_sum(&ss) / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Monte-Carlo plug-in: `mean_μ[f*] − mean_ν[h∘f*]` with the attaining
/// potential `f*`, each mean over `n` fresh samples. `KlDv` evaluates the
/// log-mean-exp form at `f_KL` instead.
pub fn divergence_mc_plugin(
    kind: DivergenceKind,
    p: &Distribution,
    q: &Distribution,
    n: usize,
    seed: u64,
) -> Result<OracleResult> {
    check_pair(p, q)?;
    if n < 2 {
        return Err(Error::InvalidRequest("mc plug-in needs n >= 2".into()));
    }
    let xs = p.sample(n, derive_seed(seed, 1))?;
    let ys = q.sample(n, derive_seed(seed, 2))?;

    let mut f_mu = Vec::with_capacity(n);
    for x in xs.iter() {
        let lr = log_ratio_from_logs(p.log_density_unchecked(x), q.log_density_unchecked(x))?;
        f_mu.push(optimal_potential_from_log(kind, lr)?);
    }
    let mut log_r_nu = Vec::with_capacity(n);
    for y in ys.iter() {
        log_r_nu.push(log_ratio_from_logs(p.log_density_unchecked(y), q.log_density_unchecked(y))?);
    }
    let nf = n as f64;
    let (m1, v1) = mean_and_var(&f_mu);
    let (value, stderr) = if kind == DivergenceKind::KlDv {
        let e: Vec<f64> = log_r_nu.iter().map(|lr| lr.exp()).collect();
        let (m2, v2) = mean_and_var(&e);
        (m1 - m2.ln(), (v1 / nf + v2 / (m2 * m2 * nf)).sqrt())
    } else {
        let hv: Vec<f64> = log_r_nu.iter().map(|&lr| h_of_potential(kind, lr)).collect();
        let (m2, v2) = mean_and_var(&hv);
        (m1 - m2, (v1 / nf + v2 / nf).sqrt())
    };
    if !value.is_finite() || !stderr.is_finite() {
        return Err(Error::NonFinite("mc plug-in oracle"));
    }
    Ok(OracleResult { value, method: OracleMethod::McPlugin, stderr, detail: n as u64 })
}

/// Which oracle to use for a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum OracleChoice {
    /// Closed form if available, else quadrature for `d ≤ 2`, else Monte Carlo.
    Auto,
    ClosedForm,
    Quadrature {
        nodes: usize,
    },
    McPlugin {
        n: usize,
        seed: u64,
    },
}

pub fn compute_oracle(
    kind: DivergenceKind,
    p: &Distribution,
    q: &Distribution,
    choice: OracleChoice,
) -> Result<OracleResult> {
    match choice {
        OracleChoice::ClosedForm => closed_form(kind, p, q)
            .ok_or_else(|| Error::InvalidRequest(format!("no closed form for {kind} between {p} and {q}"))),
        OracleChoice::Quadrature { nodes } => divergence_quadrature(kind, p, q, nodes),
        OracleChoice::McPlugin { n, seed } => divergence_mc_plugin(kind, p, q, n, seed),
        OracleChoice::Auto => {
            if let Some(r) = closed_form(kind, p, q) {
                Ok(r)
            } else if p.dim() <= 2 {
                divergence_quadrature(kind.base(), p, q, DEFAULT_GRID)
            } else {
                divergence_mc_plugin(kind, p, q, 1_000_000, 0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{h_value, optimal_potential, RatioValue};

    fn g(m: f64, s: f64) -> Distribution {
        Distribution::gaussian(vec![m], s).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(kl_gaussian_closed_form(&[0.3], 1.2, &[0.3], 1.2).unwrap().value, 0.0);
        let r = kl_gaussian_closed_form(&[0.0], 1.0, &[1.0], 1.0).unwrap();
        assert!((r.value - 0.5).abs() < 1e-15);
        let r = kl_gaussian_closed_form(&[0.0], 1.0, &[0.0], 2f64.sqrt()).unwrap();
        assert!((r.value - 0.096_573_590_279_972_65).abs() < 1e-12);
        assert!(matches!(kl_gaussian_closed_form(&[0.0], 0.0, &[0.0], 1.0), Err(Error::InvalidSigma(_))));
    }

    #[test]
    fn quadrature_of_identical_pairs_is_zero() {
        let t = Distribution::truncated_gaussian(vec![0.4], 0.2).unwrap();
        for kind in DivergenceKind::H_FORM {
            for d in [&g(0.0, 1.0), &t] {
                let r = divergence_quadrature(kind, d, d, DEFAULT_GRID).unwrap();
                assert!(r.value.abs() < 1e-10, "{kind}");
            }
        }
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let (p, q) = (g(0.0, 1.0), g(1.0, 1.0));
        let kl = divergence_quadrature(DivergenceKind::Kl, &p, &q, DEFAULT_GRID).unwrap();
        assert!((kl.value - 0.5).abs() < 1e-8);
        assert_eq!(kl.detail, 2048);
        // ∫|p − q| = 2(2Φ(1/2) − 1)
        let tv = divergence_quadrature(DivergenceKind::Tv, &p, &q, DEFAULT_GRID).unwrap();
        assert!((tv.value - 0.765_849_845_096_052_5).abs() < 1e-8, "{}", tv.value);
        // factor-2 Hellinger convention: 2(1 − e^{−1/8})
        let h2 = divergence_quadrature(DivergenceKind::H2, &p, &q, DEFAULT_GRID).unwrap();
        assert!((h2.value - 2.0 * (1.0 - (-0.125f64).exp())).abs() < 1e-10);
        // χ²(N(0,1) ‖ N(1,1)) = e − 1
        let c = divergence_quadrature(DivergenceKind::Chi2, &p, &q, DEFAULT_GRID).unwrap();
        assert!((c.value - (1f64.exp() - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn quadrature_2d_mine() {
        for (rho, expected) in [(0.5, 0.143_841_036_225_890_45), (0.9, 0.830_365_603_410_825_4)] {
            let (joint, prod) = crate::distributions::mine_pair(rho).unwrap();
            let r = divergence_quadrature(DivergenceKind::Kl, &joint, &prod, 512).unwrap();
            assert!((r.value - expected).abs() < 1e-6, "rho {rho}: {}", r.value);
            let c = closed_form(DivergenceKind::Kl, &joint, &prod).unwrap();
            assert!((c.value - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_converges_under_refinement() {
        let p = Distribution::truncated_gaussian(vec![0.35], 0.15).unwrap();
        let q = Distribution::truncated_gaussian(vec![0.6], 0.2).unwrap();
        for kind in [DivergenceKind::Kl, DivergenceKind::Chi2, DivergenceKind::H2] {
            let a = divergence_quadrature(kind, &p, &q, DEFAULT_GRID).unwrap().value;
            let b = divergence_quadrature(kind, &p, &q, 2 * DEFAULT_GRID).unwrap().value;
            assert!((a - b).abs() <= 1e-8, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn quadrature_refusals() {
        let p = Distribution::gaussian(vec![0.0; 3], 1.0).unwrap();
        assert!(matches!(divergence_quadrature(DivergenceKind::Kl, &p, &p, 64), Err(Error::DimensionTooHigh(3))));
        assert!(matches!(
            divergence_quadrature(DivergenceKind::Chi2, &g(0.0, 2.0), &g(0.0, 1.0), 64),
            Err(Error::NonIntegrable(_))
        ));
        let t = Distribution::truncated_gaussian(vec![0.5], 0.2).unwrap();
        assert!(matches!(
            divergence_quadrature(DivergenceKind::Kl, &g(0.0, 1.0), &t, 256),
            Err(Error::NonIntegrable(_))
        ));
    }

    #[test]
    fn h_of_potential_agrees_with_h_value() {
        for &r in &[0.05, 0.5, 1.0, 1.7, 9.0] {
            for kind in DivergenceKind::H_FORM {
                let f = optimal_potential(kind, RatioValue::new(r).unwrap());
                let a = h_value(kind, f).unwrap();
                let b = h_of_potential(kind, r.ln());
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{kind} r={r}");
            }
        }
    }

    #[test]
    fn mc_plugin_examples() {
        let (p, q) = (g(0.0, 1.0), g(1.0, 1.0));
        let same = divergence_mc_plugin(DivergenceKind::Kl, &p, &p, 10_000, 1).unwrap();
        assert_eq!(same.value, 0.0);
        let kl = divergence_mc_plugin(DivergenceKind::Kl, &p, &q, 100_000, 2).unwrap();
        assert!((kl.value - 0.5).abs() <= 3.0 * kl.stderr, "{kl:?}");
        let h2 = divergence_mc_plugin(DivergenceKind::H2, &p, &q, 100_000, 3).unwrap();
        assert!((h2.value - 0.235_006_194_830_809_1).abs() <= 3.0 * h2.stderr, "{h2:?}");
        let dv = divergence_mc_plugin(DivergenceKind::KlDv, &p, &q, 100_000, 4).unwrap();
        assert!((dv.value - 0.5).abs() <= 3.0 * dv.stderr, "{dv:?}");
    }

    #[test]
    fn mc_plugin_is_reproducible() {
        let p = Distribution::truncated_gaussian(vec![0.3], 0.2).unwrap();
        let q = Distribution::uniform(1).unwrap();
        let a = divergence_mc_plugin(DivergenceKind::Tv, &p, &q, 5000, 8).unwrap();
        let b = divergence_mc_plugin(DivergenceKind::Tv, &p, &q, 5000, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auto_choice() {
        let (p, q) = (g(0.0, 1.0), g(1.0, 1.0));
        assert_eq!(
            compute_oracle(DivergenceKind::Kl, &p, &q, OracleChoice::Auto).unwrap().method,
            OracleMethod::ClosedForm
        );
        assert_eq!(
            compute_oracle(DivergenceKind::Tv, &p, &q, OracleChoice::Auto).unwrap().method,
            OracleMethod::Quadrature
        );
        assert!(compute_oracle(DivergenceKind::Tv, &p, &q, OracleChoice::ClosedForm).is_err());
    }
}
