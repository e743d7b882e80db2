//! Constrained shallow networks.
//!
//! A network of width `k` on `R^d` computes
//!
//! ```text
//! raw(x) = Σ_i β_i φ(w_i·x + b_i) + w0·x + b0
//! ```
//!
//! followed by an optional output transform (cap at `1 − t` or clip to
//! `[−1, 1]`) and an optional support mask that zeroes the output outside the
//! closed Euclidean ball of radius `r`. The feasible set of a class is
//!
//! ```text
//! max_i ‖w_i‖₁ ∨ |b_i| ≤ a1,   max_i |β_i| ≤ a2,   |b0| ≤ a3,   ‖w0‖₁ ≤ a4.
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Value and derivative; the ReLU derivative at the kink is 0.
    #[inline]
    pub fn apply_with_derivative(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                (s, s * (1.0 - s))
            }
        }
    }
}

/// Parameter bounds `(a1, a2, a3, a4)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Hidden weights (ℓ¹) and hidden biases.
    pub a1: f64,
    /// Outer weights.
    pub a2: f64,
    /// Affine bias.
    pub a3: f64,
    /// Affine weights (ℓ¹).
    pub a4: f64,
}

impl Bounds {
    pub const fn new(a1: f64, a2: f64, a3: f64, a4: f64) -> Self {
        Bounds { a1, a2, a3, a4 }
    }

    pub const ZERO: Bounds = Bounds::new(0.0, 0.0, 0.0, 0.0);
    pub const STAR: Bounds = Bounds::new(1.0, 1.0, 1.0, 0.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum OutputTransform {
    Identity,
    /// `min(1 − t, raw)`.
    Cap {
        t: f64,
    },
    /// `clamp(raw, −1, 1)`.
    Clip,
}

impl OutputTransform {
    /// Output and its derivative with respect to `raw` (0 when saturated,
    /// 1 on the boundary itself).
    #[inline]
    pub fn apply(self, raw: f64) -> (f64, f64) {
        match self {
            OutputTransform::Identity => (raw, 1.0),
            OutputTransform::Cap { t } => {
                let top = 1.0 - t;
                if raw > top {
                    (top, 0.0)
                } else {
                    (raw, 1.0)
                }
            }
            OutputTransform::Clip => {
                if raw > 1.0 {
                    (1.0, 0.0)
                } else if raw < -1.0 {
                    (-1.0, 0.0)
                } else {
                    (raw, 1.0)
                }
            }
        }
    }
}

/// A network class: architecture plus feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetClassSpec {
    pub d: usize,
    pub k: usize,
    pub activation: Activation,
    pub bounds: Bounds,
    pub transform: OutputTransform,
    /// `None` means no mask (radius ∞).
    pub mask_radius: Option<f64>,
}

impl NetClassSpec {
    pub fn new(d: usize, k: usize, activation: Activation, bounds: Bounds) -> Self {
        NetClassSpec { d, k, activation, bounds, transform: OutputTransform::Identity, mask_radius: None }
    }

    /// ReLU class with bounds `(1, 2a/k, a, a)`.
    pub fn relu(d: usize, k: usize, a: f64) -> Self {
        Self::new(d, k, Activation::Relu, Bounds::new(1.0, 2.0 * a / k as f64, a, a))
    }

    /// Sigmoid class with bounds `(√k ln k, 2a/k, a, 0)`.
    pub fn sigmoid(d: usize, k: usize, a: f64) -> Self {
        let kf = k as f64;
        Self::new(d, k, Activation::Sigmoid, Bounds::new(kf.sqrt() * kf.ln(), 2.0 * a / kf, a, 0.0))
    }

    /// Class with the fixed bounds `(1, 1, 1, 0)`.
    pub fn star(d: usize, k: usize, activation: Activation) -> Self {
        Self::new(d, k, activation, Bounds::STAR)
    }

    pub fn with_transform(mut self, transform: OutputTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn with_mask(mut self, radius: Option<f64>) -> Self {
        self.mask_radius = radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        for (name, v) in [("a1", b.a1), ("a2", b.a2), ("a3", b.a3), ("a4", b.a4)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidRequest(format!("bound {name} = {v} must be finite and >= 0")));
            }
        }
        if self.d == 0 {
            return Err(Error::InvalidRequest("dimension d must be >= 1".into()));
        }
        if let OutputTransform::Cap { t } = self.transform {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidRequest(format!("cap needs 0 < t < 1, got {t}")));
            }
        }
        if let Some(r) = self.mask_radius {
            if !(r > 0.0) {
                return Err(Error::InvalidRequest(format!("mask radius must be > 0, got {r}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn in_support(&self, x: &[f64]) -> bool {
        match self.mask_radius {
            None => true,
            Some(r) => x.iter().map(|v| v * v).sum::<f64>() <= r * r,
        }
    }
}

/// Trainable weights of one network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRecord", try_from = "ParamsRecord")]
pub struct NetParams {
    pub k: usize,
    pub d: usize,
    pub activation: Activation,
    pub beta: Vec<f64>,
    /// Row-major `k × d`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub w0: Vec<f64>,
    pub b0: f64,
}

const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    version: u32,
    k: usize,
    d: usize,
    activation: Activation,
    beta: Vec<f64>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    w0: Vec<f64>,
    b0: f64,
}

impl From<NetParams> for ParamsRecord {
    fn from(p: NetParams) -> Self {
        let w = if p.d == 0 { vec![Vec::new(); p.k] } else { p.w.chunks(p.d).map(<[f64]>::to_vec).collect() };
        ParamsRecord {
            version: PARAMS_VERSION,
            k: p.k,
            d: p.d,
            activation: p.activation,
            beta: p.beta,
            w,
            b: p.b,
            w0: p.w0,
            b0: p.b0,
        }
    }
}

impl TryFrom<ParamsRecord> for NetParams {
    type Error = String;

    fn try_from(r: ParamsRecord) -> std::result::Result<Self, String> {
        if r.version != PARAMS_VERSION {
            return Err(format!("unsupported parameter record version {}", r.version));
        }
        if r.beta.len() != r.k || r.b.len() != r.k || r.w.len() != r.k || r.w0.len() != r.d {
            return Err("parameter record lengths disagree with k and d".into());
        }
        if r.w.iter().any(|row| row.len() != r.d) {
            return Err("hidden weight rows must have length d".into());
        }
        Ok(NetParams {
            k: r.k,
            d: r.d,
            activation: r.activation,
            beta: r.beta,
            w: r.w.into_iter().flatten().collect(),
            b: r.b,
            w0: r.w0,
            b0: r.b0,
        })
    }
}

impl NetParams {
    pub fn zeros(spec: &NetClassSpec) -> Self {
        NetParams {
            k: spec.k,
            d: spec.d,
            activation: spec.activation,
            beta: vec![0.0; spec.k],
            w: vec![0.0; spec.k * spec.d],
            b: vec![0.0; spec.k],
            w0: vec![0.0; spec.d],
            b0: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetParams {
            k: self.k,
            d: self.d,
            activation: self.activation,
            beta: vec![0.0; self.k],
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.k],
            w0: vec![0.0; self.d],
            b0: 0.0,
        }
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.d..(i + 1) * self.d]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.k * (self.d + 2) + self.d + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view in the order `beta, w, b, w0, b0`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
        out.extend_from_slice(&self.w0);
        out.push(self.b0);
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat), reusing this shape.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.len(),
                got: flat.len(),
            });
        }
        let (k, d) = (self.k, self.d);
        let mut p = self.zeros_like();
        p.beta.copy_from_slice(&flat[..k]);
        p.w.copy_from_slice(&flat[k..k + k * d]);
        p.b.copy_from_slice(&flat[k + k * d..2 * k + k * d]);
        p.w0.copy_from_slice(&flat[2 * k + k * d..2 * k + k * d + d]);
        p.b0 = flat[flat.len() - 1];
        Ok(p)
    }

    /// `self += scale * other` over every parameter.
    pub fn add_scaled(&mut self, scale: f64, other: &NetParams) {
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            *a += scale * b;
        }
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += scale * b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += scale * b;
        }
        for (a, b) in self.w0.iter_mut().zip(&other.w0) {
            *a += scale * b;
        }
        self.b0 += scale * other.b0;
    }

    pub fn distance(&self, other: &NetParams) -> f64 {
        self.to_flat().iter().zip(other.to_flat()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Whether the parameters lie in the feasible set of `spec`, up to `tol`.
    pub fn is_feasible(&self, spec: &NetClassSpec, tol: f64) -> bool {
        let bd = &spec.bounds;
        let hidden_ok = (0..self.k).all(|i| {
            let l1: f64 = self.w_row(i).iter().map(|v| v.abs()).sum();
            l1 <= bd.a1 + tol && self.b[i].abs() <= bd.a1 + tol
        });
        hidden_ok
            && self.beta.iter().all(|v| v.abs() <= bd.a2 + tol)
            && self.b0.abs() <= bd.a3 + tol
            && self.w0.iter().map(|v| v.abs()).sum::<f64>() <= bd.a4 + tol
    }
}

pub(crate) fn check_shape(spec: &NetClassSpec, params: &NetParams) -> Result<()> {
    if params.k != spec.k {
        return Err(Error::DimensionMismatch { what: "width k", expected: spec.k, got: params.k });
    }
    if params.d != spec.d {
        return Err(Error::DimensionMismatch { what: "input dimension d", expected: spec.d, got: params.d });
    }
    if params.beta.len() != spec.k
        || params.b.len() != spec.k
        || params.w.len() != spec.k * spec.d
        || params.w0.len() != spec.d
    {
        return Err(Error::DimensionMismatch {
            what: "parameter buffers",
            expected: spec.k * (spec.d + 2) + spec.d + 1,
            got: params.beta.len() + params.w.len() + params.b.len() + params.w0.len() + 1,
        });
    }
    Ok(())
}

fn check_point(spec: &NetClassSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.d {
        return Err(Error::DimensionMismatch { what: "input point", expected: spec.d, got: x.len() });
    }
    Ok(())
}

/// Raw pre-transform output.
#[inline]
pub(crate) fn raw_output(activation: Activation, params: &NetParams, x: &[f64]) -> f64 {
    let d = params.d;
    let mut acc = params.b0;
    for (w0j, xj) in params.w0.iter().zip(x) {
        acc += w0j * xj;
    }
    for i in 0..params.k {
        let row = &params.w[i * d..(i + 1) * d];
        let mut z = params.b[i];
        for (wij, xj) in row.iter().zip(x) {
            z += wij * xj;
        }
        acc += params.beta[i] * activation.apply(z);
    }
    acc
}

/// Output and `∂out/∂raw` at `x`, assuming shapes were validated.
#[inline]
pub(crate) fn eval_with_slope(spec: &NetClassSpec, params: &NetParams, x: &[f64]) -> (f64, f64) {
    if !spec.in_support(x) {
        return (0.0, 0.0);
    }
    spec.transform.apply(raw_output(spec.activation, params, x))
}

/// Adds `coef · ∇_θ raw(x)` into `grad`. `coef` already includes the
/// transform and mask slopes.
#[inline]
pub(crate) fn accumulate_raw_gradient(
    activation: Activation,
    params: &NetParams,
    x: &[f64],
    coef: f64,
    grad: &mut NetParams,
) {
    if coef == 0.0 {
        return;
    }
    let d = params.d;
    for i in 0..params.k {
        let row = &params.w[i * d..(i + 1) * d];
        let mut z = params.b[i];
        for (wij, xj) in row.iter().zip(x) {
            z += wij * xj;
        }
        let (phi, dphi) = activation.apply_with_derivative(z);
        grad.beta[i] += coef * phi;
        let inner = coef * params.beta[i] * dphi;
        if inner != 0.0 {
            let grow = &mut grad.w[i * d..(i + 1) * d];
            for (g, xj) in grow.iter_mut().zip(x) {
                *g += inner * xj;
            }
            grad.b[i] += inner;
        }
    }
    for (g, xj) in grad.w0.iter_mut().zip(x) {
        *g += coef * xj;
    }
    grad.b0 += coef;
}

/// Network output at `x`: raw value, then transform, then mask.
pub fn net_eval(spec: &NetClassSpec, params: &NetParams, x: &[f64]) -> Result<f64> {
    check_shape(spec, params)?;
    check_point(spec, x)?;
    Ok(eval_with_slope(spec, params, x).0)
}

/// Gradient of the (transformed, masked) output with respect to every
/// parameter, returned in a [`NetParams`]-shaped container.
pub fn net_param_gradient(spec: &NetClassSpec, params: &NetParams, x: &[f64]) -> Result<NetParams> {
    check_shape(spec, params)?;
    check_point(spec, x)?;
    let mut grad = params.zeros_like();
    let (_, slope) = eval_with_slope(spec, params, x);
    accumulate_raw_gradient(spec.activation, params, x, slope, &mut grad);
    Ok(grad)
}

/// Euclidean projection onto the ℓ¹ ball `{u : ‖u‖₁ ≤ radius}`.
pub fn l1_ball_project(v: &[f64], radius: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    l1_ball_project_in_place(&mut out, radius);
    out
}

/// In-place form of [`l1_ball_project`]; sort-and-threshold, `O(m log m)`.
pub fn l1_ball_project_in_place(v: &mut [f64], radius: f64) {
    let radius = radius.max(0.0);
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= radius {
        return;
    }
    if radius == 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    if v.len() == 1 {
        v[0] = v[0].signum() * radius;
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - theta).max(0.0);
    }
}

/// Projection onto the feasible set of `spec` (a product of ℓ¹ balls and boxes).
pub fn project(spec: &NetClassSpec, params: &NetParams) -> Result<NetParams> {
    check_shape(spec, params)?;
    let mut p = params.clone();
    project_in_place(spec, &mut p);
    Ok(p)
}

pub(crate) fn project_in_place(spec: &NetClassSpec, p: &mut NetParams) {
    let bd = spec.bounds;
    let d = p.d;
    for i in 0..p.k {
        l1_ball_project_in_place(&mut p.w[i * d..(i + 1) * d], bd.a1);
    }
    p.b.iter_mut().for_each(|v| *v = v.clamp(-bd.a1, bd.a1));
    p.beta.iter_mut().for_each(|v| *v = v.clamp(-bd.a2, bd.a2));
    p.b0 = p.b0.clamp(-bd.a3, bd.a3);
    l1_ball_project_in_place(&mut p.w0, bd.a4);
}

fn uniform_symmetric<R: Rng + ?Sized>(rng: &mut R, a: f64) -> f64 {
    a * (2.0 * rng.random::<f64>() - 1.0)
}

/// Uniform draw from the ℓ¹ ball of the given radius: normalized exponential
/// spacings give a uniform point of the solid simplex, then random signs.
fn uniform_l1_ball<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], radius: f64) {
    let mut total = 0.0;
    for v in out.iter_mut() {
        let e = -(1.0 - rng.random::<f64>()).ln();
        *v = e;
        total += e;
    }
    // slack coordinate
    total += -(1.0 - rng.random::<f64>()).ln();
    for v in out.iter_mut() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        *v = sign * radius * *v / total;
    }
}

/// Random feasible parameters; deterministic given the generator state.
pub fn init_params<R: Rng + ?Sized>(spec: &NetClassSpec, rng: &mut R) -> NetParams {
    let bd = spec.bounds;
    let mut p = NetParams::zeros(spec);
    let d = spec.d;
    for i in 0..spec.k {
        uniform_l1_ball(rng, &mut p.w[i * d..(i + 1) * d], bd.a1);
        p.b[i] = uniform_symmetric(rng, bd.a1);
        p.beta[i] = uniform_symmetric(rng, bd.a2);
    }
    uniform_l1_ball(rng, &mut p.w0, bd.a4);
    p.b0 = uniform_symmetric(rng, bd.a3);
    // rounding in the ℓ¹ draw can land a hair outside the ball
    project_in_place(spec, &mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_relu() -> (NetClassSpec, NetParams) {
        let spec = NetClassSpec::relu(1, 1, 1.0);
        let mut p = NetParams::zeros(&spec);
        p.beta[0] = 1.0;
        p.w[0] = 1.0;
        (spec, p)
    }

    #[test]
    fn eval_examples() {
        let spec = NetClassSpec::relu(3, 4, 1.0);
        let mut p = NetParams::zeros(&spec);
        p.b0 = 0.7;
        assert_eq!(net_eval(&spec, &p, &[5.0, -2.0, 0.1]).unwrap(), 0.7);

        let (spec, p) = one_relu();
        assert_eq!(net_eval(&spec, &p, &[2.0]).unwrap(), 2.0);
        let capped = spec.clone().with_transform(OutputTransform::Cap { t: 0.5 });
        assert_eq!(net_eval(&capped, &p, &[2.0]).unwrap(), 0.5);
        let clipped = spec.with_transform(OutputTransform::Clip);
        assert_eq!(net_eval(&clipped, &p, &[2.0]).unwrap(), 1.0);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let (spec, p) = one_relu();
        assert!(matches!(net_eval(&spec, &p, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        let other = NetClassSpec::relu(1, 2, 1.0);
        assert!(matches!(net_eval(&other, &p, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gradient_examples() {
        let spec = NetClassSpec::sigmoid(2, 3, 1.0);
        let p = NetParams::zeros(&spec);
        let g = net_param_gradient(&spec, &p, &[0.3, -0.4]).unwrap();
        assert!(g.beta.iter().all(|&v| v == 0.5));

        let (spec, p) = one_relu();
        let g = net_param_gradient(&spec, &p, &[2.0]).unwrap();
        assert_eq!(g.beta[0], 2.0);
        assert_eq!(g.w[0], 2.0);
        assert_eq!(g.b[0], 1.0);
        assert_eq!(g.w0[0], 2.0);
        assert_eq!(g.b0, 1.0);

        // saturated cap → zero gradient
        let capped = spec.with_transform(OutputTransform::Cap { t: 0.5 });
        let g = net_param_gradient(&capped, &p, &[2.0]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let (spec, p) = one_relu();
        let g = net_param_gradient(&spec, &p, &[0.0]).unwrap();
        assert_eq!(g.w[0], 0.0);
        assert_eq!(g.b[0], 0.0);
    }

    #[test]
    fn boundary_of_cap_uses_interior_slope() {
        let (spec, mut p) = one_relu();
        p.beta[0] = 0.25;
        let capped = spec.with_transform(OutputTransform::Cap { t: 0.5 });
        // raw = 0.25 * 2 = 0.5 = 1 - t exactly
        let g = net_param_gradient(&capped, &p, &[2.0]).unwrap();
        assert_eq!(g.b0, 1.0);
    }

    #[test]
    fn gradient_matches_finite_difference_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetClassSpec::sigmoid(3, 5, 2.0);
        for _ in 0..20 {
            let mut p = init_params(&spec, &mut rng);
            // move weights off zero so every coordinate is exercised
            for v in p.beta.iter_mut() {
                *v += 0.3;
            }
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = net_param_gradient(&spec, &p, &x).unwrap().to_flat();
            let base = p.to_flat();
            let h = 1e-6;
            for j in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[j] += h;
                minus[j] -= h;
                let fp = net_eval(&spec, &p.with_flat(&plus).unwrap(), &x).unwrap();
                let fm = net_eval(&spec, &p.with_flat(&minus).unwrap(), &x).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (g[j] - fd).abs() / g[j].abs().max(1.0);
                assert!(rel <= 1e-6, "coord {j}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn l1_projection_examples() {
        assert_eq!(l1_ball_project(&[0.3, -0.2], 1.0), vec![0.3, -0.2]);
        assert_eq!(l1_ball_project(&[3.0, 0.0], 1.0), vec![1.0, 0.0]);
        let p = l1_ball_project(&[2.0, 1.0], 1.0);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15);
        assert_eq!(l1_ball_project(&[2.0, -1.0], 0.0), vec![0.0, 0.0]);
        let p = l1_ball_project(&[0.8, -0.6, 0.1], 1.0);
        // θ = 0.2 → (0.6, −0.4, 0)
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] + 0.4).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn project_examples() {
        let spec = NetClassSpec::relu(1, 1, 1.0);
        let mut p = NetParams::zeros(&spec);
        p.beta[0] = 5.0;
        assert_eq!(project(&spec, &p).unwrap().beta[0], 2.0);

        let spec = NetClassSpec::relu(2, 1, 1.0);
        let mut p = NetParams::zeros(&spec);
        p.w = vec![2.0, 1.0];
        p.b[0] = -3.0;
        p.b0 = 4.0;
        p.w0 = vec![0.5, 0.2];
        let q = project(&spec, &p).unwrap();
        assert!((q.w[0] - 1.0).abs() < 1e-15 && q.w[1].abs() < 1e-15);
        assert_eq!(q.b[0], -1.0);
        assert_eq!(q.b0, 1.0);
        assert_eq!(q.w0, vec![0.5, 0.2]);
        assert_eq!(project(&spec, &q).unwrap(), q);
    }

    #[test]
    fn init_is_feasible_and_deterministic() {
        let spec = NetClassSpec::relu(3, 16, 2.5);
        let a = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.is_feasible(&spec, 0.0));
        assert_eq!(project(&spec, &a).unwrap(), a);

        let zero = NetClassSpec::new(2, 4, Activation::Relu, Bounds::ZERO);
        let p = init_params(&zero, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_zeroes_outside_ball() {
        let spec = NetClassSpec::relu(2, 8, 3.0).with_mask(Some(1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params(&spec, &mut rng);
        assert_eq!(net_eval(&spec, &p, &[1.2, 1.2]).unwrap(), 0.0);
        let g = net_param_gradient(&spec, &p, &[1.2, 1.2]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        let unmasked = spec.clone().with_mask(None);
        let inside = [0.3, -0.4];
        assert_eq!(net_eval(&spec, &p, &inside).unwrap(), net_eval(&unmasked, &p, &inside).unwrap());
    }

    #[test]
    fn validate_rejects_bad_specs() {
        assert!(NetClassSpec::relu(1, 4, -1.0).validate().is_err());
        let s = NetClassSpec::relu(1, 4, 1.0).with_transform(OutputTransform::Cap { t: 1.0 });
        assert!(s.validate().is_err());
        let s = NetClassSpec::relu(1, 4, 1.0).with_mask(Some(0.0));
        assert!(s.validate().is_err());
        assert!(NetClassSpec::relu(1, 4, 1.0).validate().is_ok());
    }

    #[test]
    fn shorthand_bounds() {
        let r = NetClassSpec::relu(2, 8, 3.0);
        assert_eq!(r.bounds, Bounds::new(1.0, 0.75, 3.0, 3.0));
        let s = NetClassSpec::sigmoid(2, 16, 3.0);
        assert!((s.bounds.a1 - 4.0 * 16f64.ln()).abs() < 1e-12);
        assert_eq!(s.bounds.a4, 0.0);
        assert_eq!(NetClassSpec::star(2, 5, Activation::Relu).bounds, Bounds::STAR);
    }

    #[test]
    fn params_json_layout() {
        let spec = NetClassSpec::relu(2, 2, 1.0);
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["k"], 2);
        assert_eq!(v["d"], 2);
        assert_eq!(v["activation"], "relu");
        assert_eq!(v["w"].as_array().unwrap().len(), 2);
        assert_eq!(v["w"][0].as_array().unwrap().len(), 2);
        let back: NetParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
