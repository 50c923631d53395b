//! Quadrature helpers: fixed Gauss–Legendre panels and an adaptive
//! double-exponential integrator with bisection fallback.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

#[derive(Clone, Debug)]
pub struct GlRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GlRule {
    pub fn new(order: usize) -> Self {
        let rule = GaussLegendre::new(NonZeroUsize::new(order.max(1)).unwrap());
        let (nodes, weights) = rule.as_node_weight_pairs().iter().copied().unzip();
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn points(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let m = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (m + h * x, h * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.points(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Composite rule on panels with the given breakpoints.
    pub fn integrate_panels(&self, breaks: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
        breaks
            .windows(2)
            .filter(|p| p[1] > p[0])
            .map(|p| self.integrate(p[0], p[1], &mut f))
            .sum()
    }
}

/// Panel breakpoints on `[a, b]` refined geometrically toward `s` (inside or at an end).
pub fn graded_breaks(a: f64, b: f64, s: f64, depth: u32) -> Vec<f64> {
    let mut out = vec![a, b];
    for side in [(a, s), (s, b)] {
        let (lo, hi) = side;
        if hi <= lo {
            continue;
        }
        out.push(s.clamp(a, b));
        let far = if s <= lo { hi } else { lo };
        let mut h = (far - s).abs();
        for _ in 0..depth {
            h *= 0.5;
            out.push(s + h * (far - s).signum());
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Adaptive tanh-sinh with bisection when the error estimate exceeds `tol`.
pub fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    adaptive_depth(f, a, b, tol, 0)
}

fn adaptive_depth(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let out = quadrature::integrate(f, a, b, tol);
    if out.error_estimate <= tol.max(64.0 * f64::EPSILON * out.integral.abs()) || depth >= 40 {
        return out.integral;
    }
    let m = 0.5 * (a + b);
    adaptive_depth(f, a, m, 0.5 * tol, depth + 1) + adaptive_depth(f, m, b, 0.5 * tol, depth + 1)
}
