//! Sampleable laws with evaluable densities.

mod parse;

use std::f64::consts::{LN_2, PI};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, StreamRng};

pub use parse::parse_distribution;

/// Half-width of the integration window around a Gaussian mean, in σ.
pub const WINDOW_SIGMAS: f64 = 8.0;

/// Acceptance rates below this make the truncated-Gaussian sampler give up.
pub const MIN_ACCEPTANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distribution {
    /// Isotropic `N(mean, σ² I)`.
    Gaussian {
        mean: Vec<f64>,
        sigma: f64,
    },
    /// Isotropic Gaussian restricted to `[0, 1]^d` and renormalized.
    TruncatedGaussian {
        mean: Vec<f64>,
        sigma: f64,
        /// log of the parent Gaussian's mass on the unit cube.
        log_z: f64,
    },
    /// Uniform on `[0, 1]^d`.
    Uniform {
        d: usize,
    },
    Mixture {
        components: Vec<Distribution>,
        weights: Vec<f64>,
    },
    /// Bivariate standard Gaussian with correlation ρ.
    MineJoint {
        rho: f64,
    },
    /// Product of the two standard-normal marginals of [`Distribution::MineJoint`].
    MineProduct {
        rho: f64,
    },
}

/// `ln(Φ(b) − Φ(a))` for `a < b`, accurate in both tails.
fn ln_normal_mass(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mass = if a >= 0.0 {
        // upper tail: Φ(b) − Φ(a) = (erfc(a/√2) − erfc(b/√2)) / 2
        0.5 * (erfc(a * s) - erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * s) - erfc(-a * s))
    } else {
        1.0 - 0.5 * erfc(-a * s) - 0.5 * erfc(b * s)
    };
    mass.ln()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSigma(sigma))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidRho(rho))
    }
}

fn in_unit_cube(x: &[f64]) -> bool {
    x.iter().all(|&v| (0.0..=1.0).contains(&v))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Distribution {
    pub fn gaussian(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if mean.is_empty() {
            return Err(Error::InvalidRequest("gaussian needs d >= 1".into()));
        }
        Ok(Distribution::Gaussian { mean, sigma })
    }

    pub fn truncated_gaussian(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if mean.is_empty() {
            return Err(Error::InvalidRequest("truncated gaussian needs d >= 1".into()));
        }
        let log_z = mean.iter().map(|&m| ln_normal_mass(-m / sigma, (1.0 - m) / sigma)).sum();
        Ok(Distribution::TruncatedGaussian { mean, sigma, log_z })
    }

    pub fn uniform(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidRequest("uniform needs d >= 1".into()));
        }
        Ok(Distribution::Uniform { d })
    }

    pub fn mixture(components: Vec<Distribution>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::InvalidRequest(
                "mixture needs one weight per component and at least one component".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidRequest("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRequest(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::InvalidRequest("mixture components differ in dimension".into()));
        }
        Ok(Distribution::Mixture { components, weights })
    }

    pub fn mine_joint(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Distribution::MineJoint { rho })
    }

    pub fn mine_product(rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Distribution::MineProduct { rho })
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian { mean, .. } | Distribution::TruncatedGaussian { mean, .. } => mean.len(),
            Distribution::Uniform { d } => *d,
            Distribution::Mixture { components, .. } => components[0].dim(),
            Distribution::MineJoint { .. } | Distribution::MineProduct { .. } => 2,
        }
    }

    /// Whether the support is the unit cube (bounded) rather than all of `R^d`.
    pub fn is_compact(&self) -> bool {
        match self {
            Distribution::TruncatedGaussian { .. } | Distribution::Uniform { .. } => true,
            Distribution::Mixture { components, .. } => components.iter().all(Distribution::is_compact),
            _ => false,
        }
    }

    /// Per-axis window holding all but a negligible fraction of the mass.
    pub fn window(&self) -> Vec<(f64, f64)> {
        match self {
            Distribution::Gaussian { mean, sigma } => {
                mean.iter().map(|&m| (m - WINDOW_SIGMAS * sigma, m + WINDOW_SIGMAS * sigma)).collect()
            }
            Distribution::TruncatedGaussian { mean, .. } => vec![(0.0, 1.0); mean.len()],
            Distribution::Uniform { d } => vec![(0.0, 1.0); *d],
            Distribution::Mixture { components, .. } => {
                let mut out = components[0].window();
                for c in &components[1..] {
                    for (o, w) in out.iter_mut().zip(c.window()) {
                        o.0 = o.0.min(w.0);
                        o.1 = o.1.max(w.1);
                    }
                }
                out
            }
            Distribution::MineJoint { .. } | Distribution::MineProduct { .. } => {
                vec![(-WINDOW_SIGMAS, WINDOW_SIGMAS); 2]
            }
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { what: "distribution point", expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Log density; `-inf` outside the support.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Distribution::Gaussian { mean, sigma } => gaussian_log_density(mean, *sigma, x),
            Distribution::TruncatedGaussian { mean, sigma, log_z } => {
                if in_unit_cube(x) {
                    gaussian_log_density(mean, *sigma, x) - log_z
                } else {
                    f64::NEG_INFINITY
                }
            }
            Distribution::Uniform { .. } => {
                if in_unit_cube(x) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Distribution::Mixture { components, weights } => {
                let terms: Vec<f64> =
                    components.iter().zip(weights).map(|(c, &w)| w.ln() + c.log_density_unchecked(x)).collect();
                log_sum_exp(&terms)
            }
            Distribution::MineJoint { rho } => {
                let (a, b) = (x[0], x[1]);
                let one_m = 1.0 - rho * rho;
                -(2.0 * PI).ln() - 0.5 * one_m.ln() - (a * a - 2.0 * rho * a * b + b * b) / (2.0 * one_m)
            }
            Distribution::MineProduct { .. } => -(2.0 * PI).ln() - 0.5 * (x[0] * x[0] + x[1] * x[1]),
        }
    }

    /// Lebesgue density; 0 outside the support.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// `n` i.i.d. draws from a generator seeded with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleBatch> {
        let mut rng = rng_from_seed(seed);
        let mut batch = self.sample_with(n, &mut rng)?;
        batch.seed = seed;
        Ok(batch)
    }

    /// `n` i.i.d. draws from an existing generator.
    pub fn sample_with(&self, n: usize, rng: &mut StreamRng) -> Result<SampleBatch> {
        if n == 0 {
            return Err(Error::InvalidRequest("sample size must be >= 1".into()));
        }
        let d = self.dim();
        let mut points = vec![0.0; n * d];
        for row in points.chunks_mut(d) {
            self.draw_into(rng, row)?;
        }
        Ok(SampleBatch { d, points, seed: 0, source: self.to_string() })
    }

    fn draw_into(&self, rng: &mut StreamRng, out: &mut [f64]) -> Result<()> {
        match self {
            Distribution::Gaussian { mean, sigma } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = m + sigma * z;
                }
            }
            Distribution::TruncatedGaussian { mean, sigma, log_z } => {
                if log_z.exp() < MIN_ACCEPTANCE {
                    return Err(Error::RejectionStall { rate: log_z.exp() });
                }
                // axes are independent, so reject per axis
                for (o, &m) in out.iter_mut().zip(mean) {
                    let mut tries: u64 = 0;
                    loop {
                        let z: f64 = rng.sample(StandardNormal);
                        let v = m + sigma * z;
                        tries += 1;
                        if (0.0..=1.0).contains(&v) {
                            *o = v;
                            break;
                        }
                        if tries > 100_000_000 {
                            return Err(Error::RejectionStall { rate: 1.0 / tries as f64 });
                        }
                    }
                }
            }
            Distribution::Uniform { .. } => {
                for o in out.iter_mut() {
                    *o = rng.random::<f64>();
                }
            }
            Distribution::Mixture { components, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                components[pick].draw_into(rng, out)?;
            }
            Distribution::MineJoint { rho } => {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                out[0] = z1;
                out[1] = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
            }
            Distribution::MineProduct { .. } => {
                out[0] = rng.sample(StandardNormal);
                out[1] = rng.sample(StandardNormal);
            }
        }
        Ok(())
    }
}

fn gaussian_log_density(mean: &[f64], sigma: f64, x: &[f64]) -> f64 {
    let d = mean.len() as f64;
    let sq: f64 = mean.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
    -0.5 * d * (LN_2 + PI.ln() + 2.0 * sigma.ln()) - sq / (2.0 * sigma * sigma)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

/// Canonical spec string; round-trips through [`parse_distribution`].
impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Gaussian { mean, sigma } => {
                write!(f, "gauss:d={},mean={},sigma={sigma}", mean.len(), fmt_vec(mean))
            }
            Distribution::TruncatedGaussian { mean, sigma, .. } => {
                write!(f, "tgauss:d={},mean={},sigma={sigma}", mean.len(), fmt_vec(mean))
            }
            Distribution::Uniform { d } => write!(f, "uniform:d={d}"),
            Distribution::Mixture { components, weights } => {
                write!(f, "mix:w={}", fmt_vec(weights))?;
                for (i, c) in components.iter().enumerate() {
                    write!(f, ",c{}=({c})", i + 1)?;
                }
                Ok(())
            }
            Distribution::MineJoint { rho } => write!(f, "minejoint:rho={rho}"),
            Distribution::MineProduct { rho } => write!(f, "mineprod:rho={rho}"),
        }
    }
}

/// `n` points in `R^d`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub d: usize,
    pub points: Vec<f64>,
    pub seed: u64,
    /// Spec string of the generating distribution.
    pub source: String,
}

impl SampleBatch {
    pub fn from_points(d: usize, points: Vec<f64>) -> Result<Self> {
        if d == 0 || points.is_empty() || !points.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                what: "sample buffer length",
                expected: d.max(1),
                got: points.len(),
            });
        }
        Ok(SampleBatch { d, points, seed: 0, source: String::from("external") })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn iter(&self) -> std::slice::Chunks<'_, f64> {
        self.points.chunks(self.d)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for p in self.iter() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// `log p(x) − log q(x)`.
pub fn log_ratio(p: &Distribution, q: &Distribution, x: &[f64]) -> Result<f64> {
    let lp = p.log_density(x)?;
    let lq = q.log_density(x)?;
    log_ratio_from_logs(lp, lq)
}

pub(crate) fn log_ratio_from_logs(lp: f64, lq: f64) -> Result<f64> {
    if lq == f64::NEG_INFINITY {
        return Err(Error::Domain(if lp == f64::NEG_INFINITY {
            "density ratio undefined: both densities vanish".into()
        } else {
            "absolute continuity violated: q(x) = 0 < p(x)".into()
        }));
    }
    Ok(lp - lq)
}

/// Joint bivariate Gaussian with correlation ρ and the product of its marginals.
pub fn mine_pair(rho: f64) -> Result<(Distribution, Distribution)> {
    Ok((Distribution::mine_joint(rho)?, Distribution::mine_product(rho)?))
}

/// Mutual information of the bivariate Gaussian pair, `−½ ln(1 − ρ²)`.
pub fn gaussian_mutual_information(rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::GaussLegendre;

    fn integrate_1d(dist: &Distribution, lo: f64, hi: f64) -> f64 {
        let rule = GaussLegendre::composite(lo, hi, 256, 8);
        rule.nodes.iter().zip(&rule.weights).map(|(&x, &w)| w * dist.density(&[x]).unwrap()).sum()
    }

    #[test]
    fn density_examples() {
        let u = Distribution::uniform(2).unwrap();
        assert_eq!(u.density(&[0.3, 0.7]).unwrap(), 1.0);
        assert_eq!(u.density(&[1.3, 0.7]).unwrap(), 0.0);
        let g = Distribution::gaussian(vec![0.0], 1.0).unwrap();
        assert!((g.density(&[0.0]).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        let t = Distribution::truncated_gaussian(vec![0.5], 0.2).unwrap();
        assert_eq!(t.density(&[-0.1]).unwrap(), 0.0);
        assert!(matches!(g.density(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn truncated_gaussian_normalizes() {
        let t = Distribution::truncated_gaussian(vec![0.5], 0.2).unwrap();
        assert!((integrate_1d(&t, 0.0, 1.0) - 1.0).abs() < 1e-8);
        let t = Distribution::truncated_gaussian(vec![0.35], 0.15).unwrap();
        assert!((integrate_1d(&t, 0.0, 1.0) - 1.0).abs() < 1e-8);
        // far-tail truncation still normalizes via the erfc branch
        let t = Distribution::truncated_gaussian(vec![-2.0], 0.3).unwrap();
        assert!((integrate_1d(&t, 0.0, 1.0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn normalizer_is_box_mass() {
        // Φ(2.5) − Φ(−2.5) for mean 0.5, σ 0.2
        let t = Distribution::truncated_gaussian(vec![0.5], 0.2).unwrap();
        let Distribution::TruncatedGaussian { log_z, .. } = t else { unreachable!() };
        assert!((log_z.exp() - 0.987_580_669_348_447_7).abs() < 1e-12);
    }

    #[test]
    fn mixture_normalizes() {
        let m = Distribution::mixture(
            vec![Distribution::gaussian(vec![-1.0], 0.5).unwrap(), Distribution::gaussian(vec![2.0], 1.0).unwrap()],
            vec![0.3, 0.7],
        )
        .unwrap();
        assert!((integrate_1d(&m, -12.0, 12.0) - 1.0).abs() < 1e-8);
        assert!(Distribution::mixture(vec![Distribution::uniform(1).unwrap()], vec![0.5]).is_err());
    }

    #[test]
    fn sampling_moments() {
        let u = Distribution::uniform(1).unwrap().sample(100_000, 0).unwrap();
        assert!((u.mean()[0] - 0.5).abs() < 0.01);

        let t = Distribution::truncated_gaussian(vec![0.5], 0.2).unwrap();
        let s = t.sample(100_000, 1).unwrap();
        assert!(s.points.iter().all(|v| (0.0..=1.0).contains(v)));

        let g = Distribution::gaussian(vec![0.0], 1.0).unwrap().sample(1_000_000, 2).unwrap();
        let m = g.mean()[0];
        let var = g.points.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (g.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.01, "var = {var}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = Distribution::truncated_gaussian(vec![0.4, 0.6], 0.2).unwrap();
        assert_eq!(t.sample(500, 9).unwrap(), t.sample(500, 9).unwrap());
        assert_ne!(t.sample(500, 9).unwrap(), t.sample(500, 10).unwrap());
    }

    #[test]
    fn rejection_stall() {
        let t = Distribution::truncated_gaussian(vec![-5.0], 0.5).unwrap();
        assert!(matches!(t.sample(10, 0), Err(Error::RejectionStall { .. })));
        assert!(Distribution::uniform(1).unwrap().sample(0, 0).is_err());
    }

    #[test]
    fn log_ratio_examples() {
        let p = Distribution::gaussian(vec![0.0], 1.0).unwrap();
        let q = Distribution::gaussian(vec![1.0], 1.0).unwrap();
        assert_eq!(log_ratio(&p, &p, &[0.3]).unwrap(), 0.0);
        assert!(log_ratio(&p, &q, &[0.5]).unwrap().abs() < 1e-15);
        assert!((log_ratio(&p, &q, &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        let t = Distribution::truncated_gaussian(vec![0.5], 0.2).unwrap();
        assert!(matches!(log_ratio(&p, &t, &[2.0]), Err(Error::Domain(_))));
        // log-space keeps far-tail ratios finite
        assert!((log_ratio(&p, &q, &[-60.0]).unwrap() - 60.5).abs() < 1e-9);
    }

    #[test]
    fn log_ratio_antisymmetric() {
        let p = Distribution::truncated_gaussian(vec![0.35], 0.15).unwrap();
        let q = Distribution::truncated_gaussian(vec![0.6], 0.2).unwrap();
        for i in 0..=20 {
            let x = [i as f64 / 20.0];
            assert_eq!(log_ratio(&p, &q, &x).unwrap(), -log_ratio(&q, &p, &x).unwrap());
        }
    }

    #[test]
    fn mine_pair_independent_case() {
        let (joint, prod) = mine_pair(0.0).unwrap();
        let s = Distribution::gaussian(vec![0.0, 0.0], 2.0).unwrap().sample(100, 4).unwrap();
        for x in s.iter() {
            let a = joint.density(x).unwrap();
            let b = prod.density(x).unwrap();
            assert!((a - b).abs() <= 1e-15 * a.max(1e-300));
        }
        assert!(matches!(mine_pair(1.0), Err(Error::InvalidRho(_))));
        assert!(matches!(mine_pair(-1.2), Err(Error::InvalidRho(_))));
    }

    #[test]
    fn mine_joint_correlation() {
        let (joint, _) = mine_pair(0.5).unwrap();
        let s = joint.sample(200_000, 3).unwrap();
        let c: f64 = s.iter().map(|x| x[0] * x[1]).sum::<f64>() / s.len() as f64;
        assert!((c - 0.5).abs() < 0.01);
        assert!((gaussian_mutual_information(0.5).unwrap() - 0.143_841_036_225_890_45).abs() < 1e-12);
    }

    #[test]
    fn display_round_trips() {
        let dists = vec![
            Distribution::gaussian(vec![0.0, 1.5], 2.0).unwrap(),
            Distribution::truncated_gaussian(vec![0.4], 0.2).unwrap(),
            Distribution::uniform(3).unwrap(),
            Distribution::mine_joint(0.5).unwrap(),
            Distribution::mine_product(-0.25).unwrap(),
            Distribution::mixture(
                vec![Distribution::truncated_gaussian(vec![0.2], 0.1).unwrap(), Distribution::uniform(1).unwrap()],
                vec![0.25, 0.75],
            )
            .unwrap(),
        ];
        for d in dists {
            let s = d.to_string();
            assert_eq!(parse_distribution(&s).unwrap(), d, "{s}");
        }
    }
}
