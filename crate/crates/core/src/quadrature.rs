//! Composite Gauss–Legendre rules.

use std::f64::consts::PI;

/// A 1-d quadrature rule: `∫ f ≈ Σ w_i f(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Nodes and weights of the `order`-point rule on `[-1, 1]` (Newton on `P_n`).
pub fn legendre_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "quadrature order must be >= 1");
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_and_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

impl GaussLegendre {
    /// `panels` equal panels on `[lo, hi]`, each with an `order`-point rule.
    pub fn composite(lo: f64, hi: f64, panels: usize, order: usize) -> Self {
        Self::composite_on_breaks(&[lo, hi], panels, order)
    }

    /// Composite rule whose panel edges include every break point. Panels are
    /// shared among segments in proportion to segment length (at least one each).
    pub fn composite_on_breaks(breaks: &[f64], panels: usize, order: usize) -> Self {
        let (ref_nodes, ref_weights) = legendre_rule(order);
        let total = breaks[breaks.len() - 1] - breaks[0];
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for seg in breaks.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if !(b > a) {
                continue;
            }
            let share = ((panels as f64) * (b - a) / total).round().max(1.0) as usize;
            let h = (b - a) / share as f64;
            for p in 0..share {
                let left = a + p as f64 * h;
                let mid = left + 0.5 * h;
                for (x, w) in ref_nodes.iter().zip(&ref_weights) {
                    nodes.push(mid + 0.5 * h * x);
                    weights.push(0.5 * h * w);
                }
            }
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        pairwise_sum(&self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).collect::<Vec<_>>())
    }
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
