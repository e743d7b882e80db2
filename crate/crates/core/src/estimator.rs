//! The neural estimator: empirical variational objectives over a network
//! class, their exact gradients, and projected gradient ascent with restarts.
//!
//! For the h-form kinds the objective is
//!
//! ```text
//! J(θ) = (1/n) Σ g_θ(X_i) − (1/m) Σ h(g_θ(Y_j))
//! ```
//!
//! and for `kl-dv` it is `(1/n) Σ g_θ(X_i) − ln((1/m) Σ exp g_θ(Y_j))`.
//!
//! Optimization runs in coordinates normalized by each parameter group's
//! bound, so every group's feasible set is a unit ball or box: the step taken
//! on a group with bound `a` is `a² · lr · ∂J`. The base rate follows a cosine
//! decay from `step_size` to `step_size / 100`. In full-batch mode a step that
//! lowers the objective is rejected and the rate multiplier halved (it
//! recovers by 10% per accepted step, up to 1).

use serde::{Deserialize, Serialize};

use crate::distributions::SampleBatch;
use crate::divergence::{h_derivative, h_value, DivergenceKind};
use crate::error::{Error, Result};
use crate::net::{
    check_shape, eval_with_slope, init_params, project_in_place, Activation, NetClassSpec, NetParams, OutputTransform,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::schedule::{consistency_width, resolve_schedule, Regime, ScheduleRequest};

fn default_steps() -> usize {
    2000
}
fn default_step_size() -> f64 {
    0.05
}
fn default_restarts() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// Mini-batch size per distribution; `None` is full batch.
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_trace: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: default_steps(),
            step_size: default_step_size(),
            batch: None,
            restarts: default_restarts(),
            seed: 0,
            record_trace: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidRequest("steps must be >= 1".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidRequest("restarts must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidRequest(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.batch == Some(0) {
            return Err(Error::InvalidRequest("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub kind: DivergenceKind,
    /// Best final full-data objective over the restarts, floored at the
    /// zero network's objective (0).
    pub value: f64,
    pub params: NetParams,
    pub per_restart: Vec<f64>,
    pub spec: NetClassSpec,
    pub n_mu: usize,
    pub n_nu: usize,
    /// Objective after every step of the winning restart, if requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<f64>>,
}

fn check_objective_inputs(
    kind: DivergenceKind,
    spec: &NetClassSpec,
    params: &NetParams,
    x: &SampleBatch,
    y: &SampleBatch,
) -> Result<()> {
    check_shape(spec, params)?;
    for batch in [x, y] {
        if batch.d != spec.d {
            return Err(Error::DimensionMismatch { what: "sample dimension", expected: spec.d, got: batch.d });
        }
        if batch.is_empty() {
            return Err(Error::InvalidRequest("sample batches must be nonempty".into()));
        }
    }
    match (kind, spec.transform) {
        (DivergenceKind::H2, OutputTransform::Cap { t }) if t > 0.0 => Ok(()),
        (DivergenceKind::H2, _) => Err(Error::TransformMismatch { kind, needed: "cap(t > 0)" }),
        (DivergenceKind::Tv, OutputTransform::Clip) => Ok(()),
        (DivergenceKind::Tv, _) => Err(Error::TransformMismatch { kind, needed: "clip" }),
        _ => Ok(()),
    }
}

/// Mean of `g` over a batch (optionally restricted to `idx`).
fn mean_output(spec: &NetClassSpec, params: &NetParams, batch: &SampleBatch, idx: Option<&[usize]>) -> f64 {
    match idx {
        Some(idx) => {
            idx.iter().map(|&i| eval_with_slope(spec, params, batch.point(i)).0).sum::<f64>() / idx.len() as f64
        }
        None => batch.iter().map(|x| eval_with_slope(spec, params, x).0).sum::<f64>() / batch.len() as f64,
    }
}

/// `ln mean exp(v)` with a max shift.
fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Empirical h-form objective `mean_X g − mean_Y h(g)`.
pub fn empirical_objective(
    kind: DivergenceKind,
    spec: &NetClassSpec,
    params: &NetParams,
    x: &SampleBatch,
    y: &SampleBatch,
) -> Result<f64> {
    if kind == DivergenceKind::KlDv {
        return Err(Error::UnsupportedKind(kind));
    }
    check_objective_inputs(kind, spec, params, x, y)?;
    let first = mean_output(spec, params, x, None);
    let mut second = 0.0;
    for yj in y.iter() {
        second += h_value(kind, eval_with_slope(spec, params, yj).0)?;
    }
    let value = first - second / y.len() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("empirical objective"));
    }
    Ok(value)
}

/// Donsker–Varadhan objective `mean_X g − ln mean_Y exp(g)`.
pub fn dv_objective(spec: &NetClassSpec, params: &NetParams, x: &SampleBatch, y: &SampleBatch) -> Result<f64> {
    check_objective_inputs(DivergenceKind::KlDv, spec, params, x, y)?;
    let first = mean_output(spec, params, x, None);
    let gy: Vec<f64> = y.iter().map(|yj| eval_with_slope(spec, params, yj).0).collect();
    let value = first - log_mean_exp(&gy);
    if !value.is_finite() {
        return Err(Error::NonFinite("dv objective"));
    }
    Ok(value)
}

/// Objective for any kind (dispatches to [`dv_objective`] for `kl-dv`).
pub fn objective(
    kind: DivergenceKind,
    spec: &NetClassSpec,
    params: &NetParams,
    x: &SampleBatch,
    y: &SampleBatch,
) -> Result<f64> {
    match kind {
        DivergenceKind::KlDv => dv_objective(spec, params, x, y),
        _ => empirical_objective(kind, spec, params, x, y),
    }
}

/// Dot product with eight independent accumulators (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Buffers for a layer-at-a-time pass: weights are held transposed
/// (`d × k`) so every inner loop runs over the `k` neurons.
struct Workspace {
    k: usize,
    d: usize,
    wt: Vec<f64>,
    z: Vec<f64>,
    phi: Vec<f64>,
    dphi: Vec<f64>,
    inner: Vec<f64>,
    grad_wt: Vec<f64>,
    grad_beta: Vec<f64>,
    grad_b: Vec<f64>,
    grad_w0: Vec<f64>,
    grad_b0: f64,
    ys: Vec<(f64, f64)>,
}

impl Workspace {
    fn new(k: usize, d: usize) -> Self {
        Workspace {
            k,
            d,
            wt: vec![0.0; k * d],
            z: vec![0.0; k],
            phi: vec![0.0; k],
            dphi: vec![0.0; k],
            inner: vec![0.0; k],
            grad_wt: vec![0.0; k * d],
            grad_beta: vec![0.0; k],
            grad_b: vec![0.0; k],
            grad_w0: vec![0.0; d],
            grad_b0: 0.0,
            ys: Vec::new(),
        }
    }

    fn load(&mut self, params: &NetParams) {
        let (k, d) = (self.k, self.d);
        for i in 0..k {
            for j in 0..d {
                self.wt[j * k + i] = params.w[i * d + j];
            }
        }
        self.grad_wt.iter_mut().for_each(|v| *v = 0.0);
        self.grad_beta.iter_mut().for_each(|v| *v = 0.0);
        self.grad_b.iter_mut().for_each(|v| *v = 0.0);
        self.grad_w0.iter_mut().for_each(|v| *v = 0.0);
        self.grad_b0 = 0.0;
    }

    /// Fills `phi`/`dphi` at `x` and returns `(g, ∂g/∂raw)`.
    #[inline]
    fn forward(&mut self, spec: &NetClassSpec, params: &NetParams, x: &[f64]) -> (f64, f64) {
        if !spec.in_support(x) {
            return (0.0, 0.0);
        }
        let k = self.k;
        self.z.copy_from_slice(&params.b);
        for (j, &xj) in x.iter().enumerate() {
            let col = &self.wt[j * k..(j + 1) * k];
            for (z, w) in self.z.iter_mut().zip(col) {
                *z += w * xj;
            }
        }
        let (z, phi, dphi) = (&self.z[..k], &mut self.phi[..k], &mut self.dphi[..k]);
        match spec.activation {
            Activation::Relu => {
                for i in 0..k {
                    let on = z[i] > 0.0;
                    phi[i] = if on { z[i] } else { 0.0 };
                    dphi[i] = if on { 1.0 } else { 0.0 };
                }
            }
            Activation::Sigmoid => {
                for i in 0..k {
                    let s = 1.0 / (1.0 + (-z[i]).exp());
                    phi[i] = s;
                    dphi[i] = s * (1.0 - s);
                }
            }
        }
        let mut raw = params.b0;
        for (w0j, xj) in params.w0.iter().zip(x) {
            raw += w0j * xj;
        }
        raw += dot(&params.beta, &self.phi);
        spec.transform.apply(raw)
    }

    /// Adds `coef · ∇_θ raw(x)` using the buffers of the last `forward`.
    #[inline]
    fn backward(&mut self, params: &NetParams, x: &[f64], coef: f64) {
        if coef == 0.0 {
            return;
        }
        let k = self.k;
        let (gb, gbias, inner) = (&mut self.grad_beta[..k], &mut self.grad_b[..k], &mut self.inner[..k]);
        let (phi, dphi, beta) = (&self.phi[..k], &self.dphi[..k], &params.beta[..k]);
        for i in 0..k {
            gb[i] += coef * phi[i];
            let v = coef * beta[i] * dphi[i];
            inner[i] = v;
            gbias[i] += v;
        }
        for (j, &xj) in x.iter().enumerate() {
            let col = &mut self.grad_wt[j * k..(j + 1) * k];
            for (g, v) in col.iter_mut().zip(&self.inner) {
                *g += v * xj;
            }
            self.grad_w0[j] += coef * xj;
        }
        self.grad_b0 += coef;
    }

    fn store(&self, grad: &mut NetParams) {
        let (k, d) = (self.k, self.d);
        for i in 0..k {
            for j in 0..d {
                grad.w[i * d + j] = self.grad_wt[j * k + i];
            }
        }
        grad.beta.copy_from_slice(&self.grad_beta);
        grad.b.copy_from_slice(&self.grad_b);
        grad.w0.copy_from_slice(&self.grad_w0);
        grad.b0 = self.grad_b0;
    }
}

/// Value and gradient in one pass; `grad` is overwritten. Subsets of rows can
/// be selected with `xi` / `yi`.
#[allow(clippy::too_many_arguments)]
fn value_and_gradient(
    kind: DivergenceKind,
    spec: &NetClassSpec,
    params: &NetParams,
    x: &SampleBatch,
    y: &SampleBatch,
    xi: Option<&[usize]>,
    yi: Option<&[usize]>,
    grad: &mut NetParams,
    ws: &mut Workspace,
) -> Result<f64> {
    ws.load(params);
    let nx = xi.map_or(x.len(), <[usize]>::len);
    let ny = yi.map_or(y.len(), <[usize]>::len);
    let x_row = |i: usize| x.point(xi.map_or(i, |idx| idx[i]));
    let y_row = |j: usize| y.point(yi.map_or(j, |idx| idx[j]));

    let inv_nx = 1.0 / nx as f64;
    let mut first = 0.0;
    for i in 0..nx {
        let p = x_row(i);
        let (g, slope) = ws.forward(spec, params, p);
        first += g;
        ws.backward(params, p, inv_nx * slope);
    }
    first *= inv_nx;

    let inv_ny = 1.0 / ny as f64;
    let value = if kind == DivergenceKind::KlDv {
        let mut ys = std::mem::take(&mut ws.ys);
        ys.clear();
        for j in 0..ny {
            let e = ws.forward(spec, params, y_row(j));
            ys.push(e);
        }
        let max = ys.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = ys.iter().map(|e| (e.0 - max).exp()).sum();
        for (j, &(g, slope)) in ys.iter().enumerate() {
            if slope != 0.0 {
                let p = y_row(j);
                ws.forward(spec, params, p);
                ws.backward(params, p, -(g - max).exp() / total * slope);
            }
        }
        ws.ys = ys;
        first - (max + (total * inv_ny).ln())
    } else {
        let mut second = 0.0;
        for j in 0..ny {
            let p = y_row(j);
            let (g, slope) = ws.forward(spec, params, p);
            second += h_value(kind, g)?;
            if slope != 0.0 {
                ws.backward(params, p, -inv_ny * h_derivative(kind, g)? * slope);
            }
        }
        first - second * inv_ny
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    ws.store(grad);
    Ok(value)
}

/// Exact gradient of the objective with respect to every parameter.
pub fn objective_gradient(
    kind: DivergenceKind,
    spec: &NetClassSpec,
    params: &NetParams,
    x: &SampleBatch,
    y: &SampleBatch,
) -> Result<NetParams> {
    check_objective_inputs(kind, spec, params, x, y)?;
    let mut grad = params.zeros_like();
    value_and_gradient(kind, spec, params, x, y, None, None, &mut grad, &mut Workspace::new(spec.k, spec.d))?;
    Ok(grad)
}

/// Applies `params += rate · D · grad`. `D` scales the affine group by its
/// squared bound and the per-neuron groups by `k` times theirs, so that each
/// group moves the network output by a comparable amount per step.
fn ascend(spec: &NetClassSpec, params: &mut NetParams, grad: &NetParams, rate: f64) {
    let bd = spec.bounds;
    let k = spec.k as f64;
    let s1 = rate * k * bd.a1 * bd.a1;
    let s2 = rate * k * bd.a2 * bd.a2;
    let s3 = rate * bd.a3 * bd.a3;
    let s4 = rate * bd.a4 * bd.a4;
    for (p, g) in params.beta.iter_mut().zip(&grad.beta) {
        *p += s2 * g;
    }
    for (p, g) in params.w.iter_mut().zip(&grad.w) {
        *p += s1 * g;
    }
    for (p, g) in params.b.iter_mut().zip(&grad.b) {
        *p += s1 * g;
    }
    for (p, g) in params.w0.iter_mut().zip(&grad.w0) {
        *p += s4 * g;
    }
    params.b0 += s3 * grad.b0;
}

fn cosine_rate(base: f64, step: usize, steps: usize) -> f64 {
    let floor = base / 100.0;
    let frac = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Full-batch projected ascent that only accepts non-decreasing steps.
/// `eval` returns the objective at its first argument and writes the gradient
/// into the second. Returns the final objective; `params` holds the final
/// iterate.
fn monotone_ascent<F>(
    spec: &NetClassSpec,
    params: &mut NetParams,
    opts: &TrainOptions,
    mut trace: Option<&mut Vec<f64>>,
    mut eval: F,
) -> Result<f64>
where
    F: FnMut(&NetParams, &mut NetParams) -> Result<f64>,
{
    let mut grad = params.zeros_like();
    let mut current = eval(params, &mut grad)?;
    let mut accepted_grad = grad.clone();
    let mut candidate = params.clone();
    let mut multiplier = 1.0;
    for step in 0..opts.steps {
        let rate = cosine_rate(opts.step_size, step, opts.steps) * multiplier;
        candidate.clone_from(params);
        ascend(spec, &mut candidate, &accepted_grad, rate);
        project_in_place(spec, &mut candidate);
        let value = eval(&candidate, &mut grad)?;
        if value >= current {
            std::mem::swap(params, &mut candidate);
            std::mem::swap(&mut accepted_grad, &mut grad);
            current = value;
            multiplier = (multiplier * 1.1).min(1.0);
        } else {
            multiplier *= 0.5;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(current);
        }
    }
    Ok(current)
}

/// Accelerated (Nesterov) projected ascent with function-value restarts:
/// whenever the extrapolated step fails to improve on the current iterate,
/// momentum is dropped and a plain step is tried instead.
fn accelerated_ascent<F>(spec: &NetClassSpec, params: &mut NetParams, opts: &TrainOptions, mut eval: F) -> Result<f64>
where
    F: FnMut(&NetParams, &mut NetParams) -> Result<f64>,
{
    let mut grad = params.zeros_like();
    let mut current = eval(params, &mut grad)?;
    let mut current_grad = grad.clone();
    let mut previous = params.clone();
    let mut lookahead = params.clone();
    let mut candidate = params.clone();
    let mut t = 1.0f64;
    let mut multiplier = 1.0;
    for step in 0..opts.steps {
        let rate = cosine_rate(opts.step_size, step, opts.steps) * multiplier;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let value = if momentum > 0.0 {
            lookahead.clone_from(params);
            for (l, (p, q)) in [
                (&mut lookahead.beta, (&params.beta, &previous.beta)),
                (&mut lookahead.w, (&params.w, &previous.w)),
                (&mut lookahead.b, (&params.b, &previous.b)),
                (&mut lookahead.w0, (&params.w0, &previous.w0)),
            ] {
                for (li, (pi, qi)) in l.iter_mut().zip(p.iter().zip(q.iter())) {
                    *li = pi + momentum * (pi - qi);
                }
            }
            lookahead.b0 = params.b0 + momentum * (params.b0 - previous.b0);
            project_in_place(spec, &mut lookahead);
            eval(&lookahead, &mut grad)?;
            candidate.clone_from(&lookahead);
            ascend(spec, &mut candidate, &grad, rate);
            project_in_place(spec, &mut candidate);
            eval(&candidate, &mut grad)?
        } else {
            f64::NEG_INFINITY
        };
        if value >= current {
            previous.clone_from(params);
            std::mem::swap(params, &mut candidate);
            std::mem::swap(&mut current_grad, &mut grad);
            current = value;
            t = t_next;
            continue;
        }
        // restart: plain step from the current iterate
        t = 1.0;
        candidate.clone_from(params);
        ascend(spec, &mut candidate, &current_grad, rate);
        project_in_place(spec, &mut candidate);
        let value = eval(&candidate, &mut grad)?;
        if value >= current {
            previous.clone_from(params);
            std::mem::swap(params, &mut candidate);
            std::mem::swap(&mut current_grad, &mut grad);
            current = value;
            multiplier = (multiplier * 1.1).min(1.0);
            t = 0.5 * (1.0 + 5f64.sqrt());
        } else {
            multiplier *= 0.5;
        }
    }
    Ok(current)
}

/// Puts every hidden unit's hyperplane through a data point, stratified by
/// position in the pooled `sets`, and zeroes the output layer so the network
/// starts at the zero function.
fn anchor_hidden_units<R: rand::Rng>(spec: &NetClassSpec, params: &mut NetParams, sets: &[&SampleBatch], rng: &mut R) {
    let d = spec.d;
    let total: usize = sets.iter().map(|s| s.len()).sum();
    for i in 0..spec.k {
        let row = &mut params.w[i * d..(i + 1) * d];
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v *= spec.bounds.a1 / norm);
        }
        let u: f64 = rng.random();
        let mut idx = ((((i as f64 + u) / spec.k as f64) * total as f64) as usize).min(total - 1);
        let mut anchor = None;
        for set in sets {
            if idx < set.len() {
                anchor = Some(set.point(idx));
                break;
            }
            idx -= set.len();
        }
        let mut b = -dot(row, anchor.expect("index within pooled sets"));
        if b.abs() > spec.bounds.a1 {
            let shrink = spec.bounds.a1 / b.abs();
            row.iter_mut().for_each(|v| *v *= shrink);
            b *= shrink;
        }
        params.b[i] = b;
    }
    params.beta.iter_mut().for_each(|v| *v = 0.0);
    params.w0.iter_mut().for_each(|v| *v = 0.0);
    params.b0 = 0.0;
    project_in_place(spec, params);
}

/// Least-squares fit of `targets` at `points` over the class. Hidden unit `i`
/// starts with its hyperplane through a point drawn from the `i`-th of `k`
/// equal index strata of `points`. The output layer is solved for those
/// units, then everything is trained jointly, then the output layer is
/// solved again. Returns the fitted params and
/// the final mean squared error.
pub fn fit_least_squares(
    spec: &NetClassSpec,
    points: &SampleBatch,
    targets: &[f64],
    opts: &TrainOptions,
    seed: u64,
) -> Result<(NetParams, f64)> {
    opts.validate()?;
    spec.validate()?;
    if points.d != spec.d {
        return Err(Error::DimensionMismatch { what: "sample dimension", expected: spec.d, got: points.d });
    }
    if points.len() != targets.len() || points.is_empty() {
        return Err(Error::InvalidRequest(format!("{} points but {} targets", points.len(), targets.len())));
    }
    let mut rng = rng_from_seed(seed);
    let mut params = init_params(spec, &mut rng);
    anchor_hidden_units(spec, &mut params, &[points], &mut rng);
    project_in_place(spec, &mut params);
    let inv_n = 1.0 / points.len() as f64;
    let start_mse = targets.iter().map(|t| t * t).sum::<f64>() * inv_n;
    polish_output_layer(spec, &mut params, points, targets, start_mse);
    let mut ws = Workspace::new(spec.k, spec.d);
    let neg_mse = accelerated_ascent(spec, &mut params, opts, |p, g| {
        ws.load(p);
        let mut loss = 0.0;
        for (x, &t) in points.iter().zip(targets) {
            let (out, slope) = ws.forward(spec, p, x);
            let r = out - t;
            loss += r * r;
            ws.backward(p, x, -2.0 * inv_n * r * slope);
        }
        ws.store(g);
        let value = -loss * inv_n;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("least-squares loss"))
        }
    })?;
    let mse = polish_output_layer(spec, &mut params, points, targets, -neg_mse);
    Ok((params, mse))
}

/// With the hidden units fixed, the least-squares problem in the output layer
/// `(β, w0, b0)` is a convex quadratic over a box and an ℓ¹ ball. Solves it
/// with restarted FISTA on the Gram matrix and keeps the result if it lowers
/// the error. Only applies to untransformed, unmasked classes.
///
/// Works in offsets `δ` from the current output layer: the loss change is
/// `2 δ·e + δ·Gδ` with `e = Φᵀr / n` built from the current residuals, which
/// keeps full precision when the residuals are already tiny.
fn polish_output_layer(
    spec: &NetClassSpec,
    params: &mut NetParams,
    points: &SampleBatch,
    targets: &[f64],
    mse: f64,
) -> f64 {
    if spec.transform != OutputTransform::Identity || spec.mask_radius.is_some() {
        return mse;
    }
    let (k, d) = (spec.k, spec.d);
    let m = k + d + 1;
    let n = points.len() as f64;
    let mut gram = vec![0.0; m * m];
    let mut e = vec![0.0; m];
    let mut row = vec![0.0; m];
    for (x, &t) in points.iter().zip(targets) {
        for (i, slot) in row[..k].iter_mut().enumerate() {
            *slot = spec.activation.apply(params.b[i] + dot(params.w_row(i), x));
        }
        row[k..k + d].copy_from_slice(x);
        row[m - 1] = 1.0;
        let r = eval_with_slope(spec, params, x).0 - t;
        for a in 0..m {
            let ra = row[a];
            e[a] += ra * r;
            for b in a..m {
                gram[a * m + b] += ra * row[b];
            }
        }
    }
    for a in 0..m {
        e[a] /= n;
        for b in a..m {
            gram[a * m + b] /= n;
            gram[b * m + a] = gram[a * m + b];
        }
    }
    // Jacobi scaling θ = D·u; the w0 block shares one scale so its ℓ¹
    // constraint stays an ℓ¹ ball
    let mut scale: Vec<f64> = (0..m).map(|a| gram[a * m + a]).collect();
    let w0_diag = scale[k..k + d].iter().sum::<f64>() / d as f64;
    scale[k..k + d].iter_mut().for_each(|v| *v = w0_diag);
    let scale: Vec<f64> = scale.iter().map(|&g| if g > 0.0 { 1.0 / g.sqrt() } else { 1.0 }).collect();
    for a in 0..m {
        e[a] *= scale[a];
        for b in 0..m {
            gram[a * m + b] *= scale[a] * scale[b];
        }
    }
    let quad = |delta: &[f64], out: &mut [f64]| {
        for a in 0..m {
            out[a] = dot(&gram[a * m..(a + 1) * m], delta);
        }
    };
    // loss change and its gradient at offset δ
    let change = |delta: &[f64], g_delta: &[f64]| 2.0 * dot(delta, &e) + dot(delta, g_delta);

    let mut v = vec![1.0; m];
    let mut gv = vec![0.0; m];
    let mut lambda = 0.0;
    for _ in 0..100 {
        quad(&v, &mut gv);
        let norm = dot(&gv, &gv).sqrt();
        if norm == 0.0 {
            return mse;
        }
        lambda = norm / dot(&v, &v).sqrt();
        v.iter_mut().zip(&gv).for_each(|(a, b)| *a = b / norm);
    }
    let step = 1.0 / (2.0 * lambda * 1.01);

    let bd = spec.bounds;
    let origin: Vec<f64> =
        params.beta.iter().chain(&params.w0).copied().chain([params.b0]).zip(&scale).map(|(v, s)| v / s).collect();
    let bound_of = |a: usize| {
        if a < k {
            bd.a2
        } else if a < k + d {
            bd.a4
        } else {
            bd.a3
        }
    };
    // projects the scaled point `origin + δ` and returns the feasible offset
    let project = |delta: &mut [f64]| {
        let mut abs: Vec<f64> = origin.iter().zip(delta.iter()).map(|(o, dl)| o + dl).collect();
        for (b, s) in abs[..k].iter_mut().zip(&scale) {
            *b = b.clamp(-bd.a2 / s, bd.a2 / s);
        }
        crate::net::l1_ball_project_in_place(&mut abs[k..k + d], bd.a4 / scale[k]);
        abs[m - 1] = abs[m - 1].clamp(-bd.a3 / scale[m - 1], bd.a3 / scale[m - 1]);
        for ((dl, a), o) in delta.iter_mut().zip(&abs).zip(&origin) {
            *dl = a - o;
        }
    };
    let (delta, best) = if d == 1 {
        let lo: Vec<f64> = (0..m).map(|a| -bound_of(a) / scale[a] - origin[a]).collect();
        let hi: Vec<f64> = (0..m).map(|a| bound_of(a) / scale[a] - origin[a]).collect();
        let delta = box_least_squares(&gram, &e, &lo, &hi);
        let mut g_delta = vec![0.0; m];
        quad(&delta, &mut g_delta);
        let best = change(&delta, &g_delta);
        (delta, best)
    } else {
        let mut delta = vec![0.0; m];
        let mut best = 0.0;
        let mut prev = delta.clone();
        let mut y = delta.clone();
        let mut gy = vec![0.0; m];
        let mut g_next = vec![0.0; m];
        let mut t = 1.0f64;
        let mut stalls = 0;
        for _ in 0..20_000 {
            quad(&y, &mut gy);
            let mut next: Vec<f64> =
                y.iter().zip(&gy).zip(&e).map(|((yi, gi), ei)| yi - step * 2.0 * (gi + ei)).collect();
            project(&mut next);
            quad(&next, &mut g_next);
            let value = change(&next, &g_next);
            if value > best {
                t = 1.0;
                y.clone_from(&delta);
                stalls += 1;
                if stalls > 50 {
                    break;
                }
                continue;
            }
            stalls = 0;
            best = value;
            prev.clone_from(&delta);
            delta = next;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mom = (t - 1.0) / t_next;
            for ((yi, di), pi) in y.iter_mut().zip(&delta).zip(&prev) {
                *yi = di + mom * (di - pi);
            }
            t = t_next;
        }
        (delta, best)
    };
    if !(best < 0.0) {
        return mse;
    }
    let mut candidate = params.clone();
    let abs: Vec<f64> = origin.iter().zip(&delta).zip(&scale).map(|((o, dl), s)| (o + dl) * s).collect();
    candidate.beta.copy_from_slice(&abs[..k]);
    candidate.w0.copy_from_slice(&abs[k..k + d]);
    candidate.b0 = abs[m - 1];
    let exact: f64 = points
        .iter()
        .zip(targets)
        .map(|(x, &t)| {
            let r = eval_with_slope(spec, &candidate, x).0 - t;
            r * r
        })
        .sum::<f64>()
        / n;
    if exact < mse {
        *params = candidate;
        exact
    } else {
        mse
    }
}

/// Minimizes `δ·Gδ + 2 e·δ` over the box `lo ≤ δ ≤ hi` (which must contain
/// 0) with a bounded-variable active-set method. `G` is symmetric positive
/// semidefinite, stored dense row-major.
fn box_least_squares(gram: &[f64], e: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let m = e.len();
    let ridge = 1e-12 * (0..m).map(|a| gram[a * m + a]).sum::<f64>() / m as f64;
    let mut x = vec![0.0; m];
    // true: clamped at a bound
    let mut fixed: Vec<bool> = (0..m).map(|a| lo[a] >= 0.0 || hi[a] <= 0.0).collect();
    let mut chol = Vec::new();
    for _ in 0..(4 * m + 20) {
        // solve on the free set
        loop {
            let free: Vec<usize> = (0..m).filter(|&a| !fixed[a]).collect();
            if free.is_empty() {
                break;
            }
            let nf = free.len();
            chol.clear();
            chol.resize(nf * nf, 0.0);
            let mut rhs = vec![0.0; nf];
            for (r, &a) in free.iter().enumerate() {
                for (c, &b) in free.iter().enumerate() {
                    chol[r * nf + c] = gram[a * m + b];
                }
                chol[r * nf + r] += ridge;
                rhs[r] = -e[a] - (0..m).filter(|&b| fixed[b]).map(|b| gram[a * m + b] * x[b]).sum::<f64>();
            }
            if !cholesky_solve(&mut chol, &mut rhs, nf) {
                return x;
            }
            // step from x toward the free solution until a bound is hit
            let mut alpha = 1.0f64;
            let mut blocking = None;
            for (r, &a) in free.iter().enumerate() {
                let dir = rhs[r] - x[a];
                let room = if dir > 0.0 { hi[a] - x[a] } else { lo[a] - x[a] };
                if dir != 0.0 && room / dir < alpha {
                    alpha = (room / dir).max(0.0);
                    blocking = Some(a);
                }
            }
            for (r, &a) in free.iter().enumerate() {
                x[a] = (x[a] + alpha * (rhs[r] - x[a])).clamp(lo[a], hi[a]);
            }
            match blocking {
                Some(a) => {
                    x[a] = if rhs[free.iter().position(|&f| f == a).unwrap()] > x[a] { hi[a] } else { lo[a] };
                    fixed[a] = true;
                }
                None => break,
            }
        }
        // release the clamped variable whose gradient points most inward
        let mut release = None;
        let mut worst = 0.0;
        for a in (0..m).filter(|&a| fixed[a]) {
            let grad = e[a] + (0..m).map(|b| gram[a * m + b] * x[b]).sum::<f64>();
            let at_lo = x[a] <= lo[a];
            let at_hi = x[a] >= hi[a];
            let inward = if at_lo && grad < 0.0 {
                -grad
            } else if at_hi && grad > 0.0 {
                grad
            } else {
                0.0
            };
            if inward > worst {
                worst = inward;
                release = Some(a);
            }
        }
        match release {
            Some(a) if worst > 1e-14 => fixed[a] = false,
            _ => break,
        }
    }
    x
}

/// In-place Cholesky factorization and solve of the `n × n` system; returns
/// false if the matrix is not positive definite.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for p in 0..j {
            diag -= a[j * n + p] * a[j * n + p];
        }
        if !(diag > 0.0) {
            return false;
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for p in 0..j {
                v -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = v / diag;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for p in 0..i {
            v -= a[i * n + p] * b[p];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for p in i + 1..n {
            v -= a[p * n + i] * b[p];
        }
        b[i] = v / a[i * n + i];
    }
    true
}

/// Result of one restart.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub value: f64,
    pub params: NetParams,
    pub trace: Option<Vec<f64>>,
}

/// One restart of projected gradient ascent. Starts from the zero function
/// with hidden hyperplanes anchored at random pooled sample points.
/// Deterministic given `seed`.
pub fn train(
    kind: DivergenceKind,
    spec: &NetClassSpec,
    x: &SampleBatch,
    y: &SampleBatch,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    opts.validate()?;
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = init_params(spec, &mut rng);
    check_objective_inputs(kind, spec, &params, x, y)?;
    anchor_hidden_units(spec, &mut params, &[x, y], &mut rng);

    let mut scratch = Workspace::new(spec.k, spec.d);
    let mut trace = opts.record_trace.then(|| Vec::with_capacity(opts.steps));

    let minibatch = opts.batch.filter(|&b| b < x.len().max(y.len()));
    match minibatch {
        None => {
            let value = monotone_ascent(spec, &mut params, opts, trace.as_mut(), |p, g| {
                value_and_gradient(kind, spec, p, x, y, None, None, g, &mut scratch)
            })?;
            Ok(TrainOutcome { value, params, trace })
        }
        Some(b) => {
            let bx = b.min(x.len());
            let by = b.min(y.len());
            let mut grad = params.zeros_like();
            let mut xi = vec![0usize; bx];
            let mut yi = vec![0usize; by];
            for step in 0..opts.steps {
                for v in xi.iter_mut() {
                    *v = rand::Rng::random_range(&mut rng, 0..x.len());
                }
                for v in yi.iter_mut() {
                    *v = rand::Rng::random_range(&mut rng, 0..y.len());
                }
                let rate = cosine_rate(opts.step_size, step, opts.steps);
                value_and_gradient(kind, spec, &params, x, y, Some(&xi), Some(&yi), &mut grad, &mut scratch)?;
                ascend(spec, &mut params, &grad, rate);
                project_in_place(spec, &mut params);
                if let Some(t) = trace.as_mut() {
                    t.push(objective(kind, spec, &params, x, y)?);
                }
            }
            let value = objective(kind, spec, &params, x, y)?;
            Ok(TrainOutcome { value, params, trace })
        }
    }
}

/// Either a concrete class or a schedule request to materialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassChoice {
    Spec(NetClassSpec),
    Schedule(ScheduleRequest),
}

impl ClassChoice {
    /// The class used for `n_mu`/`n_nu` samples. The consistency regime ties
    /// the width to `min(n_mu, n_nu)`.
    pub fn materialize(&self, n_mu: usize, n_nu: usize) -> Result<NetClassSpec> {
        match self {
            ClassChoice::Spec(s) => {
                s.validate()?;
                Ok(s.clone())
            }
            ClassChoice::Schedule(req) => {
                let req = match req.regime {
                    Regime::Consistency { rho } => req.with_k(consistency_width(req.kind, n_mu.min(n_nu), rho)?),
                    _ => req.clone(),
                };
                Ok(resolve_schedule(&req)?.spec)
            }
        }
    }
}

/// Runs `opts.restarts` independent restarts (seeds derived from
/// `opts.seed`) and keeps the best.
pub fn estimate(
    kind: DivergenceKind,
    class: &ClassChoice,
    x: &SampleBatch,
    y: &SampleBatch,
    opts: &TrainOptions,
) -> Result<EstimateResult> {
    opts.validate()?;
    let spec = class.materialize(x.len(), y.len())?;
    let mut best: Option<TrainOutcome> = None;
    let mut per_restart = Vec::with_capacity(opts.restarts);
    for r in 0..opts.restarts {
        let outcome = train(kind, &spec, x, y, opts, derive_seed(opts.seed, r as u64))?;
        per_restart.push(outcome.value);
        if best.as_ref().is_none_or(|b| outcome.value > b.value) {
            best = Some(outcome);
        }
    }
    let best = best.expect("at least one restart");
    let (value, params) = if best.value >= 0.0 {
        (best.value, best.params)
    } else {
        // the zero network is feasible in every class and scores exactly 0
        (0.0, NetParams::zeros(&spec))
    };
    Ok(EstimateResult { kind, value, params, per_restart, spec, n_mu: x.len(), n_nu: y.len(), trace: best.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Distribution;
    use crate::net::Bounds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batches(seed: u64, n: usize, d: usize) -> (SampleBatch, SampleBatch) {
        let p = Distribution::gaussian(vec![0.0; d], 1.0).unwrap();
        let q = Distribution::gaussian(vec![0.5; d], 1.2).unwrap();
        (p.sample(n, seed).unwrap(), q.sample(n + 3, seed + 1).unwrap())
    }

    fn constant_net(spec: &NetClassSpec, c: f64) -> NetParams {
        let mut p = NetParams::zeros(spec);
        p.b0 = c;
        p
    }

    #[test]
    fn zero_network_scores_zero() {
        let (x, y) = batches(1, 40, 2);
        for kind in DivergenceKind::H_FORM {
            let mut spec = NetClassSpec::relu(2, 4, 1.0);
            spec.transform = match kind {
                DivergenceKind::H2 => OutputTransform::Cap { t: 0.3 },
                DivergenceKind::Tv => OutputTransform::Clip,
                _ => OutputTransform::Identity,
            };
            let p = NetParams::zeros(&spec);
            assert_eq!(empirical_objective(kind, &spec, &p, &x, &y).unwrap(), 0.0);
        }
        let spec = NetClassSpec::relu(2, 4, 1.0);
        assert_eq!(dv_objective(&spec, &NetParams::zeros(&spec), &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn constant_network_examples() {
        let (x, y) = batches(2, 30, 1);
        let spec = NetClassSpec::relu(1, 3, 1.0);
        let p = constant_net(&spec, 0.2);
        let v = empirical_objective(DivergenceKind::Kl, &spec, &p, &x, &y).unwrap();
        assert!((v - (-0.021_402_758_160_169_844)).abs() < 1e-15);
        for c in [-0.9, 0.0, 0.2, 1.0] {
            let p = constant_net(&spec, c);
            assert!(dv_objective(&spec, &p, &x, &y).unwrap().abs() < 1e-15);
        }
        let tv = NetClassSpec::relu(1, 3, 5.0).with_transform(OutputTransform::Clip);
        let p = constant_net(&tv, 4.0);
        assert_eq!(empirical_objective(DivergenceKind::Tv, &tv, &p, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn transform_preconditions() {
        let (x, y) = batches(3, 10, 1);
        let spec = NetClassSpec::relu(1, 2, 1.0);
        let p = NetParams::zeros(&spec);
        assert!(matches!(
            empirical_objective(DivergenceKind::H2, &spec, &p, &x, &y),
            Err(Error::TransformMismatch { .. })
        ));
        assert!(matches!(
            empirical_objective(DivergenceKind::Tv, &spec, &p, &x, &y),
            Err(Error::TransformMismatch { .. })
        ));
        assert!(matches!(empirical_objective(DivergenceKind::KlDv, &spec, &p, &x, &y), Err(Error::UnsupportedKind(_))));
    }

    #[test]
    fn gradient_at_zero_network() {
        let (x, y) = batches(4, 25, 1);
        let spec = NetClassSpec::relu(1, 2, 1.0);
        let p = NetParams::zeros(&spec);
        for kind in [DivergenceKind::Kl, DivergenceKind::Chi2, DivergenceKind::KlDv] {
            let g = objective_gradient(kind, &spec, &p, &x, &y).unwrap();
            assert!(g.b0.abs() < 1e-15, "{kind}: {}", g.b0);
        }
    }

    fn fd_check(kind: DivergenceKind, spec: &NetClassSpec, p: &NetParams, x: &SampleBatch, y: &SampleBatch) {
        let g = objective_gradient(kind, spec, p, x, y).unwrap().to_flat();
        let base = p.to_flat();
        let h = 1e-5;
        for j in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = objective(kind, spec, &p.with_flat(&plus).unwrap(), x, y).unwrap();
            let fm = objective(kind, spec, &p.with_flat(&minus).unwrap(), x, y).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(1.0);
            assert!(rel <= 1e-5, "{kind} coord {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (x, y) = batches(5, 50, 2);
        for kind in [DivergenceKind::Kl, DivergenceKind::Chi2, DivergenceKind::KlDv] {
            let spec = NetClassSpec::sigmoid(2, 4, 1.5);
            let p = init_params(&spec, &mut rng);
            fd_check(kind, &spec, &p, &x, &y);
        }
        // H2 / TV with transforms far from saturation
        let h2 = NetClassSpec::new(2, 4, Activation::Sigmoid, Bounds::new(1.0, 0.1, 0.1, 0.0))
            .with_transform(OutputTransform::Cap { t: 0.2 });
        let p = init_params(&h2, &mut rng);
        fd_check(DivergenceKind::H2, &h2, &p, &x, &y);
        let tv = h2.clone().with_transform(OutputTransform::Clip);
        fd_check(DivergenceKind::Tv, &tv, &p, &x, &y);
    }

    #[test]
    fn degenerate_class_trains_to_zero() {
        let (x, y) = batches(6, 50, 1);
        let spec = NetClassSpec::new(1, 8, Activation::Relu, Bounds::ZERO);
        let opts = TrainOptions { steps: 20, restarts: 2, ..Default::default() };
        let r = estimate(DivergenceKind::Kl, &ClassChoice::Spec(spec), &x, &y, &opts).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.per_restart, vec![0.0, 0.0]);
    }

    #[test]
    fn trace_is_finite_and_monotone() {
        let (x, y) = batches(7, 200, 1);
        let spec = NetClassSpec::relu(1, 16, 2.0);
        let opts = TrainOptions { steps: 100, record_trace: true, ..Default::default() };
        let out = train(DivergenceKind::Kl, &spec, &x, &y, &opts, 3).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trace.iter().all(|v| v.is_finite()));
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*trace.last().unwrap(), out.value);
        // the training loop sums in a different order than `objective`
        let again = objective(DivergenceKind::Kl, &spec, &out.params, &x, &y).unwrap();
        assert!((again - out.value).abs() <= 1e-12 * again.abs().max(1.0));
        assert!(out.params.is_feasible(&spec, 1e-12));
    }

    #[test]
    fn minibatch_mode_runs() {
        let (x, y) = batches(8, 300, 1);
        let spec = NetClassSpec::relu(1, 8, 2.0);
        let opts = TrainOptions { steps: 50, batch: Some(32), record_trace: true, ..Default::default() };
        let a = train(DivergenceKind::Chi2, &spec, &x, &y, &opts, 1).unwrap();
        let b = train(DivergenceKind::Chi2, &spec, &x, &y, &opts, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn restarts_superset_dominates() {
        let (x, y) = batches(9, 100, 1);
        let spec = NetClassSpec::relu(1, 8, 2.0);
        let one = TrainOptions { steps: 60, restarts: 1, seed: 4, ..Default::default() };
        let five = TrainOptions { restarts: 5, ..one.clone() };
        let a = estimate(DivergenceKind::Kl, &ClassChoice::Spec(spec.clone()), &x, &y, &one).unwrap();
        let b = estimate(DivergenceKind::Kl, &ClassChoice::Spec(spec), &x, &y, &five).unwrap();
        assert_eq!(a.per_restart[0], b.per_restart[0]);
        assert!(b.value >= a.value);
    }

    #[test]
    fn dv_dominates_kl_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = NetClassSpec::relu(2, 6, 2.0);
        for t in 0..50 {
            let (x, y) = batches(100 + t, 20, 2);
            let p = init_params(&spec, &mut rng);
            let kl = empirical_objective(DivergenceKind::Kl, &spec, &p, &x, &y).unwrap();
            let dv = dv_objective(&spec, &p, &x, &y).unwrap();
            assert!(dv >= kl);
        }
    }

    #[test]
    fn options_validation() {
        let bad = TrainOptions { steps: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainOptions { restarts: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainOptions { step_size: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
