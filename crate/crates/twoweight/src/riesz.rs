//! Second Riesz transform on the plane for rectangles and tensor step
//! functions, and the oscillation estimates built on it.
//!
//! A step function `g` on a uniform grid is encoded by its jumps `c_j` at
//! `t_j`, so that
//! `R₂(g ⊗ 1_{[c,d)})(x) = c₂ [S(x₁, |x₂ − d|) − S(x₁, |x₂ − c|)]` with
//! `S(x₁, h) = Σ_j c_j asinh((x₁ − t_j)/h)`.
//! A whole line of `S` on the grid comes from one FFT convolution; scattered
//! far-field points use a multipole tree.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::characteristics::{CharacteristicReport, ReportKind, Square};
use crate::dyadic::StepWeight1D;
use crate::error::{Error, Result};
use crate::quad::{graded_breaks, GlRule};

/// `c₂ = Γ(3/2)/π^{3/2}`.
pub const C2: f64 = 1.0 / (2.0 * std::f64::consts::PI);

/// Rectangle `[a,b) × [c,d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect2D {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Rect2D {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        if !(a < b && c < d) {
            return Err(Error::Precondition(format!(
                "degenerate rectangle [{a},{b})x[{c},{d})"
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn from_square(q: &Square) -> Self {
        Self {
            a: q.x1,
            b: q.x1 + q.side,
            c: q.x2,
            d: q.x2 + q.side,
        }
    }

    pub fn area(&self) -> f64 {
        (self.b - self.a) * (self.d - self.c)
    }

    /// Closed horizontal edges, where the transform blows up logarithmically.
    pub fn on_singular_edge(&self, x1: f64, x2: f64) -> bool {
        (x2 == self.c || x2 == self.d) && self.a <= x1 && x1 <= self.b
    }
}

/// `asinh(u/h) − asinh(v/h)` without cancellation; `h = 0` gives the limit
/// when `u, v` share a sign and NaN otherwise.
pub fn asinh_diff(u: f64, v: f64, h: f64) -> f64 {
    if u < 0.0 && v <= 0.0 || u <= 0.0 && v < 0.0 {
        return -asinh_diff(-u, -v, h);
    }
    if h == 0.0 {
        return if u > 0.0 && v > 0.0 { (u / v).ln() } else { f64::NAN };
    }
    if u >= 0.0 && v >= 0.0 {
        ((u + u.hypot(h)) / (v + v.hypot(h))).ln()
    } else {
        (u / h).asinh() - (v / h).asinh()
    }
}

/// `R₂ 1_R(x)` in closed form.
pub fn riesz2_rect(x: (f64, f64), r: &Rect2D) -> Result<f64> {
    let (x1, x2) = x;
    if r.on_singular_edge(x1, x2) {
        return Err(Error::OnEdge(x1, x2));
    }
    let (u, v) = (x1 - r.a, x1 - r.b);
    Ok(C2 * (asinh_diff(u, v, (x2 - r.d).abs()) - asinh_diff(u, v, (x2 - r.c).abs())))
}

/// Weight on the plane that depends on `x₁` only; the profile is periodic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorWeight2D {
    pub horizontal: StepWeight1D,
}

impl TensorWeight2D {
    pub fn new(horizontal: StepWeight1D) -> Self {
        Self {
            horizontal: horizontal.with_periodic(true),
        }
    }

    pub fn value_at(&self, x1: f64, _x2: f64) -> f64 {
        self.horizontal.value_at(x1)
    }
}

/// `R₂(u 1_Q)(x)` as a sum over the horizontal steps of `u` inside `Q`.
pub fn riesz2_tensor_restricted(x: (f64, f64), u: &TensorWeight2D, q: &Rect2D) -> Result<f64> {
    let h = &u.horizontal;
    let n = h.values().len() as f64;
    let mut s = 0.0;
    let mut lo = q.a;
    while lo < q.b {
        let hi = (((lo * n).floor() + 1.0) / n).min(q.b);
        let v = h.value_at(0.5 * (lo + hi));
        if v != 0.0 {
            s += v * riesz2_rect(x, &Rect2D { a: lo, b: hi, ..*q })?;
        }
        lo = hi;
    }
    Ok(s)
}

fn phi(u: f64, h: f64) -> f64 {
    if h > 0.0 {
        (u / h).asinh()
    } else if u == 0.0 {
        0.0
    } else {
        u.signum() * (2.0 * u.abs()).ln()
    }
}

/// Value of `w` on cell `i` of the level-`level` grid (`level ≥ base_level`).
pub fn cell_value(w: &StepWeight1D, level: u32, i: i64) -> f64 {
    let n = 1i64 << level;
    let j = if w.periodic() {
        i.rem_euclid(n)
    } else if (0..n).contains(&i) {
        i
    } else {
        return 0.0;
    };
    let shift = level.saturating_sub(w.base_level());
    w.values()[(j >> shift) as usize]
}

/// Step function with cells `[(start+i)Δ, (start+i+1)Δ)`, `Δ = 2^-level`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub level: u32,
    pub start: i64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(level: u32, start: i64, values: Vec<f64>) -> Self {
        Self {
            level,
            start,
            values,
        }
    }

    /// Cells `start..start+n` of `w` on the level-`level` grid.
    pub fn sample(w: &StepWeight1D, level: u32, start: i64, n: usize) -> Self {
        let values = (0..n as i64).map(|i| cell_value(w, level, start + i)).collect();
        Self::new(level, start, values)
    }

    pub fn dx(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.start as f64 * self.dx()
    }

    pub fn hi(&self) -> f64 {
        (self.start + self.len() as i64) as f64 * self.dx()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Jump sizes at the `n + 1` grid points bounding the cells.
    pub fn jumps(&self) -> Vec<f64> {
        let n = self.len();
        (0..=n)
            .map(|j| {
                let right = if j < n { self.values[j] } else { 0.0 };
                let left = if j > 0 { self.values[j - 1] } else { 0.0 };
                right - left
            })
            .collect()
    }

    /// `∫ |g|^q`.
    pub fn norm_pow(&self, q: f64) -> f64 {
        self.values.iter().map(|v| v.abs().powf(q)).sum::<f64>() * self.dx()
    }

    /// `R₂(g ⊗ 1_{[c,d)})(x)` by direct summation over jumps.
    pub fn riesz2(&self, x: (f64, f64), c: f64, d: f64) -> Result<f64> {
        let (x1, x2) = x;
        if (x2 == c || x2 == d) && self.lo() <= x1 && x1 <= self.hi() {
            return Err(Error::OnEdge(x1, x2));
        }
        let (hd, hc) = ((x2 - d).abs(), (x2 - c).abs());
        let dx = self.dx();
        let s: f64 = self
            .jumps()
            .iter()
            .enumerate()
            .filter(|(_, &cj)| cj != 0.0)
            .map(|(j, &cj)| {
                let u = x1 - (self.start + j as i64) as f64 * dx;
                cj * (phi(u, hd) - phi(u, hc))
            })
            .sum();
        Ok(C2 * s)
    }
}

const TREE_ORDER: usize = 20;
const TREE_THETA: f64 = 0.35;
const TREE_LEAF: usize = 32;

#[derive(Clone, Debug)]
struct TreeNode {
    lo: usize,
    hi: usize,
    center: f64,
    half: f64,
    moments: [f64; TREE_ORDER + 1],
    kids: Option<(usize, usize)>,
}

/// Multipole tree for `S(x₁, h) = Σ c_j asinh((x₁ − t_j)/h)`.
#[derive(Clone, Debug)]
pub struct JumpTree {
    t: Vec<f64>,
    c: Vec<f64>,
    nodes: Vec<TreeNode>,
}

impl JumpTree {
    /// Jump locations must be sorted.
    pub fn new(t: Vec<f64>, c: Vec<f64>) -> Self {
        let (t, c): (Vec<f64>, Vec<f64>) = t.into_iter().zip(c).filter(|p| p.1 != 0.0).unzip();
        let mut tree = Self {
            t,
            c,
            nodes: Vec::new(),
        };
        if !tree.t.is_empty() {
            tree.build(0, tree.t.len());
        }
        tree
    }

    pub fn from_grid(g: &GridFunction) -> Self {
        let dx = g.dx();
        let t = (0..=g.len()).map(|j| (g.start + j as i64) as f64 * dx).collect();
        Self::new(t, g.jumps())
    }

    fn build(&mut self, lo: usize, hi: usize) -> usize {
        let center = 0.5 * (self.t[lo] + self.t[hi - 1]);
        let half = 0.5 * (self.t[hi - 1] - self.t[lo]);
        let mut moments = [0.0; TREE_ORDER + 1];
        for j in lo..hi {
            let d = self.t[j] - center;
            let mut pw = self.c[j];
            for m in moments.iter_mut() {
                *m += pw;
                pw *= d;
            }
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            lo,
            hi,
            center,
            half,
            moments,
            kids: None,
        });
        if hi - lo > TREE_LEAF {
            let mid = (lo + hi) / 2;
            let a = self.build(lo, mid);
            let b = self.build(mid, hi);
            self.nodes[id].kids = Some((a, b));
        }
        id
    }

    pub fn sum(&self, x1: f64, h: f64) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let mut s = 0.0;
        let mut stack = vec![0usize];
        while let Some(k) = stack.pop() {
            let nd = &self.nodes[k];
            let u0 = x1 - nd.center;
            let r = u0.hypot(h);
            if r > 0.0 && nd.half <= TREE_THETA * r {
                s += expand(u0, h, r, &nd.moments);
            } else if let Some((a, b)) = nd.kids {
                stack.push(a);
                stack.push(b);
            } else {
                s += (nd.lo..nd.hi)
                    .map(|j| self.c[j] * phi(x1 - self.t[j], h))
                    .sum::<f64>();
            }
        }
        s
    }

    /// `c₂ [S(x₁, |x₂−d|) − S(x₁, |x₂−c|)]`.
    pub fn riesz2(&self, x: (f64, f64), c: f64, d: f64) -> f64 {
        C2 * (self.sum(x.0, (x.1 - d).abs()) - self.sum(x.0, (x.1 - c).abs()))
    }
}

// Taylor expansion of asinh((u0 − δ)/h) in δ against the moments.
fn expand(u0: f64, h: f64, r: f64, mu: &[f64; TREE_ORDER + 1]) -> f64 {
    let r2 = r * r;
    let (mut a_prev, mut a) = (0.0, 1.0 / r);
    let mut s = phi(u0, h) * mu[0];
    let mut sign = -1.0;
    for k in 0..TREE_ORDER {
        s += sign * a / (k + 1) as f64 * mu[k + 1];
        sign = -sign;
        let kf = k as f64;
        let next = -((2.0 * kf + 1.0) * u0 * a + kf * a_prev) / ((kf + 1.0) * r2);
        a_prev = a;
        a = next;
    }
    s
}

// Smallest `2^a 3^b 5^c ≥ n`.
fn smooth_size(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p5 = 1;
    while p5 < best {
        let mut p3 = p5;
        while p3 < best {
            let mut v = p3;
            while v < n {
                v *= 2;
            }
            best = best.min(v);
            p3 *= 3;
        }
        p5 *= 5;
    }
    best
}

struct FftParts {
    size: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    spectrum: Vec<Complex<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

#[derive(Clone, Copy, Debug)]
enum Kernel {
    /// `φ(·, h_d) − φ(·, h_c)`.
    Diff { hd: f64, hc: f64 },
    /// `φ(·, 0) = sign · ln 2|·|`.
    Log,
    /// `sign · (φ(·, h) − φ(·, 0))`.
    Excess { h: f64, sign: f64 },
}

/// Jump sums against a kernel at `x₁ = (w0 + i + θ)Δ`, `i < m`.
struct LineConv {
    jumps: Vec<f64>,
    nonzero: Vec<usize>,
    n: usize,
    m: usize,
    base: i64,
    dx: f64,
    kernel: [Vec<f64>; 2],
    fft: Option<FftParts>,
}

impl LineConv {
    fn new(g: &GridFunction, w0: i64, m: usize, planner: &mut FftPlanner<f64>) -> Self {
        let jumps = g.jumps();
        let n = g.len();
        let nonzero: Vec<usize> = (0..=n).filter(|&j| jumps[j] != 0.0).collect();
        let len = n + m;
        let size = smooth_size(2 * n + m);
        let fft_cost = 6.0 * size as f64 * (size as f64).log2();
        let fft = if (nonzero.len() * m) as f64 > fft_cost {
            let fwd = planner.plan_fft_forward(size);
            let inv = planner.plan_fft_inverse(size);
            let mut spectrum: Vec<Complex<f64>> = (0..size)
                .map(|j| Complex::new(if j <= n { jumps[j] } else { 0.0 }, 0.0))
                .collect();
            let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
            let mut scratch = vec![Complex::default(); scratch_len];
            fwd.process_with_scratch(&mut spectrum, &mut scratch);
            Some(FftParts {
                size,
                fwd,
                inv,
                spectrum,
                buf: vec![Complex::default(); size],
                scratch,
            })
        } else {
            None
        };
        Self {
            jumps,
            nonzero,
            n,
            m,
            base: w0 - g.start - n as i64,
            dx: g.dx(),
            kernel: [vec![0.0; len], vec![0.0; len]],
            fft,
        }
    }

    fn uses_fft(&self) -> bool {
        self.fft.is_some()
    }

    fn fill_kernel(&mut self, slot: usize, theta: f64, which: Kernel) {
        let (base, dx) = (self.base, self.dx);
        // asinh(x) − ln 2x = x⁻²/4 − 3x⁻⁴/32 + 5x⁻⁶/96 − 35x⁻⁸/1024 + …
        let tail = |t: f64| t * (0.25 + t * (-3.0 / 32.0 + t * (5.0 / 96.0 - t * 35.0 / 1024.0)));
        let u_at = |r: usize| ((base + r as i64) as f64 + theta) * dx;
        let kernel = &mut self.kernel[slot];
        match which {
            Kernel::Diff { hd, hc } => {
                let far = 32.0 * hd.max(hc);
                let lr = if hd > 0.0 && hc > 0.0 { (hc / hd).ln() } else { f64::NAN };
                for (r, k) in kernel.iter_mut().enumerate() {
                    let u = u_at(r);
                    let au = u.abs();
                    *k = if au > far && lr.is_finite() {
                        let iu2 = 1.0 / (au * au);
                        u.signum() * (lr + tail(hd * hd * iu2) - tail(hc * hc * iu2))
                    } else {
                        phi(u, hd) - phi(u, hc)
                    };
                }
            }
            Kernel::Log => {
                for (r, k) in kernel.iter_mut().enumerate() {
                    *k = phi(u_at(r), 0.0);
                }
            }
            Kernel::Excess { h, sign } => {
                let far = 32.0 * h;
                let lh = h.ln();
                for (r, k) in kernel.iter_mut().enumerate() {
                    let u = u_at(r);
                    let au = u.abs();
                    *k = if h <= 0.0 {
                        0.0
                    } else if au > far {
                        sign * u.signum() * (tail(h * h / (au * au)) - lh)
                    } else {
                        sign * (phi(u, h) - phi(u, 0.0))
                    };
                }
            }
        }
    }

    /// Up to two offsets at once; `out[s][i]` receives the value at `θ_s`.
    fn eval(&mut self, thetas: &[f64], which: Kernel, out: &mut [Vec<f64>; 2]) {
        for (s, &th) in thetas.iter().enumerate() {
            self.fill_kernel(s, th, which);
        }
        let (n, m) = (self.n, self.m);
        match &mut self.fft {
            None => {
                for s in 0..thetas.len() {
                    let k = &self.kernel[s];
                    for (i, o) in out[s].iter_mut().enumerate().take(m) {
                        *o = self
                            .nonzero
                            .iter()
                            .map(|&j| self.jumps[j] * k[i + n - j])
                            .sum();
                    }
                }
            }
            Some(f) => {
                let two = thetas.len() == 2;
                for (r, b) in f.buf.iter_mut().enumerate() {
                    *b = if r < n + m {
                        Complex::new(self.kernel[0][r], if two { self.kernel[1][r] } else { 0.0 })
                    } else {
                        Complex::default()
                    };
                }
                f.fwd.process_with_scratch(&mut f.buf, &mut f.scratch);
                for (b, s) in f.buf.iter_mut().zip(&f.spectrum) {
                    *b *= s;
                }
                f.inv.process_with_scratch(&mut f.buf, &mut f.scratch);
                let scale = 1.0 / f.size as f64;
                for i in 0..m {
                    let z = f.buf[i + n];
                    out[0][i] = z.re * scale;
                    if two {
                        out[1][i] = z.im * scale;
                    }
                }
            }
        }
    }
}

/// Quadrature controls for the planar integrals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Gauss–Legendre order per vertical panel and per far-field panel.
    pub gauss_order: usize,
    /// Gauss–Legendre nodes per grid cell in `x₁`.
    pub cell_nodes: usize,
    /// Geometric refinement levels toward each horizontal edge.
    pub edge_depth: u32,
    /// Far field stops once the geometric tail is below this share of the total.
    pub tail_fraction: f64,
    pub max_rings: u32,
    /// Relative agreement required between a value and its refinement.
    pub tolerance: f64,
    /// Recompute every cube with halved panels and doubled cell nodes.
    pub certify: bool,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            gauss_order: 8,
            cell_nodes: 4,
            edge_depth: 20,
            tail_fraction: 0.01,
            max_rings: 48,
            tolerance: 1e-6,
            certify: false,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gauss_order == 0 || self.cell_nodes == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config("quadrature orders and tolerance must be positive".into()));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction < 1.0) {
            return Err(Error::Config("tail_fraction must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn refined(&self) -> Self {
        Self {
            cell_nodes: 2 * self.cell_nodes,
            edge_depth: self.edge_depth + 2,
            ..self.clone()
        }
    }
}

fn vertical_nodes(ylo: f64, yhi: f64, c: f64, d: f64, cfg: &QuadratureConfig) -> Vec<(f64, f64)> {
    let rule = GlRule::new(cfg.gauss_order);
    let mut pts = vec![ylo, yhi];
    pts.extend([c, d].iter().filter(|&&e| ylo < e && e < yhi));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let edge = |y: f64| y == c || y == d;
    let mut breaks = Vec::new();
    for w in pts.windows(2) {
        let (u, v) = (w[0], w[1]);
        let pieces: Vec<(f64, f64, Option<f64>)> = match (edge(u), edge(v)) {
            (true, true) => {
                let mid = 0.5 * (u + v);
                vec![(u, mid, Some(u)), (mid, v, Some(v))]
            }
            (true, false) => vec![(u, v, Some(u))],
            (false, true) => vec![(u, v, Some(v))],
            _ => vec![(u, v, None)],
        };
        for (a, b, s) in pieces {
            match s {
                Some(s) => breaks.extend(graded_breaks(a, b, s, cfg.edge_depth)),
                None => breaks.extend([a, b]),
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks
        .windows(2)
        .flat_map(|w| rule.points(w[0], w[1]).collect::<Vec<_>>())
        .collect()
}

/// `|x|^p` with fast paths for integer and third-integer exponents.
#[derive(Clone, Copy, Debug)]
struct Power {
    p: f64,
    int: Option<i32>,
    third: Option<i32>,
}

impl Power {
    fn new(p: f64) -> Self {
        let int = (p.fract() == 0.0 && p.abs() < 64.0).then_some(p as i32);
        let t = 3.0 * p;
        let third = ((t - t.round()).abs() < 1e-12 && t.abs() < 192.0).then_some(t.round() as i32);
        Self { p, int, third }
    }

    fn of(&self, x: f64) -> f64 {
        let a = x.abs();
        match (self.int, self.third) {
            (Some(k), _) => a.powi(k),
            (None, Some(k)) => a.cbrt().powi(k),
            _ => a.powf(self.p),
        }
    }
}

// Offsets in a unit cell, graded toward both ends when `depth > 0`.
fn cell_rule(k: usize, depth: u32) -> Vec<(f64, f64)> {
    if depth == 0 {
        return GlRule::new(k).points(0.0, 1.0).collect();
    }
    let rule = GlRule::new(k.min(3));
    let mut br = graded_breaks(0.0, 0.5, 0.0, depth);
    br.extend(graded_breaks(0.5, 1.0, 1.0, depth));
    br.sort_by(f64::total_cmp);
    br.dedup();
    br.windows(2).flat_map(|w| rule.points(w[0], w[1]).collect::<Vec<_>>()).collect()
}

const CHEB_ORDER: usize = 12;

/// `S(·, h)` on a window as piecewise Chebyshev series on panels of width `≤ h/3`.
struct ChebLine {
    width: f64,
    coeffs: Vec<[f64; CHEB_ORDER]>,
}

impl ChebLine {
    fn panels(span: f64, h: f64) -> usize {
        (3.0 * span / h).ceil().max(1.0) as usize
    }

    fn new(tree: &JumpTree, h: f64, x0: f64, span: f64) -> Self {
        let n = CHEB_ORDER;
        let count = Self::panels(span, h);
        let width = span / count as f64;
        let ang = |j: usize, k: usize| std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / n as f64;
        let coeffs = (0..count)
            .map(|p| {
                let mid = x0 + (p as f64 + 0.5) * width;
                let f: Vec<f64> = (0..n)
                    .map(|k| tree.sum(mid + 0.5 * width * ang(1, k).cos(), h))
                    .collect();
                let mut a = [0.0; CHEB_ORDER];
                for (j, aj) in a.iter_mut().enumerate() {
                    *aj = 2.0 / n as f64 * (0..n).map(|k| f[k] * ang(j, k).cos()).sum::<f64>();
                }
                a[0] *= 0.5;
                a
            })
            .collect();
        Self { width, coeffs }
    }

    /// `out[i] += sign · S((i + θ)Δ + x0, h)`.
    fn add_to(&self, theta: f64, dx: f64, sign: f64, out: &mut [f64]) {
        let last = self.coeffs.len() - 1;
        for (i, o) in out.iter_mut().enumerate() {
            let rel = (i as f64 + theta) * dx / self.width;
            let p = (rel as usize).min(last);
            let t = 2.0 * (rel - p as f64) - 1.0;
            let a = &self.coeffs[p];
            let (mut b1, mut b2) = (0.0, 0.0);
            for &aj in a[1..].iter().rev() {
                let b0 = aj + 2.0 * t * b1 - b2;
                b2 = b1;
                b1 = b0;
            }
            *o += sign * (a[0] + t * b1 - b2);
        }
    }
}

/// `∫_{x₁ ∈ window} ∫_{ylo}^{yhi} |R₂(g ⊗ 1_{[c,d)})|^p w(x₁) dx₂ dx₁`, where the
/// window is `m` grid cells from `w0` and `weights[i]` is the weight on cell `i`.
#[allow(clippy::too_many_arguments)]
fn box_integral(
    g: &GridFunction,
    c: f64,
    d: f64,
    p: f64,
    w0: i64,
    weights: &[f64],
    (ylo, yhi): (f64, f64),
    cfg: &QuadratureConfig,
    planner: &mut FftPlanner<f64>,
) -> f64 {
    let panels = (weights.len() / 1024).max(16);
    box_integral_with(g, c, d, p, w0, weights, (ylo, yhi), cfg, planner, panels)
}

// `max_panels = 0` forces every line through the convolution.
#[allow(clippy::too_many_arguments)]
fn box_integral_with(
    g: &GridFunction,
    c: f64,
    d: f64,
    p: f64,
    w0: i64,
    weights: &[f64],
    (ylo, yhi): (f64, f64),
    cfg: &QuadratureConfig,
    planner: &mut FftPlanner<f64>,
    max_panels: usize,
) -> f64 {
    let m = weights.len();
    if g.is_zero() || m == 0 || weights.iter().all(|&w| w == 0.0) {
        return 0.0;
    }
    let mid = 0.5 * (c + d);
    let symmetric = ((ylo + yhi) - (c + d)).abs() <= 1e-15 * (yhi - ylo);
    let top = if symmetric { mid } else { yhi };
    let ys = vertical_nodes(ylo, top, c, d, cfg);
    let mut rules: Vec<Option<Vec<(f64, f64)>>> = vec![None; 64];
    let mut conv = LineConv::new(g, w0, m, planner);
    let dx = g.dx();
    let (x0, span) = (w0 as f64 * dx, m as f64 * dx);
    let tree = conv.uses_fft().then(|| JumpTree::from_grid(g));
    let smooth = |h: f64| {
        tree.as_ref()
            .filter(|_| h > 0.0 && ChebLine::panels(span, h) <= max_panels)
            .map(|t| ChebLine::new(t, h, x0, span))
    };
    let mut logs: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut out = [vec![0.0; m], vec![0.0; m]];
    let pw = Power::new(p);
    let mut total = 0.0;
    let (nlines, mut evals) = (ys.len(), 0usize);
    for (y, wy) in ys {
        let (hd, hc) = ((y - d).abs(), (y - c).abs());
        let near = hd.min(hc) / dx;
        let depth = if near >= 2.0 { 0 } else { ((2.0 / near).log2().ceil() as u32).min(40) };
        let cells = rules[depth as usize].get_or_insert_with(|| cell_rule(cfg.cell_nodes, depth));
        let (sd, sc) = (smooth(hd), smooth(hc));
        let mut line = 0.0;
        for pair in cells.chunks(2) {
            let thetas: Vec<f64> = pair.iter().map(|t| t.0).collect();
            let log_sign = match (&sd, &sc) {
                (None, None) => {
                    conv.eval(&thetas, Kernel::Diff { hd, hc }, &mut out);
                    None
                }
                (Some(_), Some(_)) => {
                    out.iter_mut().for_each(|o| o.fill(0.0));
                    None
                }
                (Some(_), None) => {
                    conv.eval(&thetas, Kernel::Excess { h: hc, sign: -1.0 }, &mut out);
                    Some(-1.0)
                }
                (None, Some(_)) => {
                    conv.eval(&thetas, Kernel::Excess { h: hd, sign: 1.0 }, &mut out);
                    Some(1.0)
                }
            };
            if let Some(sign) = log_sign {
                let missing: Vec<f64> =
                    thetas.iter().copied().filter(|t| !logs.contains_key(&t.to_bits())).collect();
                if !missing.is_empty() {
                    if logs.len() * m > 1 << 25 {
                        logs.clear();
                    }
                    let mut tmp = [vec![0.0; m], vec![0.0; m]];
                    conv.eval(&missing, Kernel::Log, &mut tmp);
                    for (t, v) in missing.iter().zip(tmp) {
                        logs.insert(t.to_bits(), v);
                    }
                }
                for (s, t) in thetas.iter().enumerate() {
                    for (o, l) in out[s].iter_mut().zip(&logs[&t.to_bits()]) {
                        *o += sign * l;
                    }
                }
            }
            for (s, &t) in thetas.iter().enumerate() {
                if let Some(a) = &sd {
                    a.add_to(t, dx, 1.0, &mut out[s]);
                }
                if let Some(b) = &sc {
                    b.add_to(t, dx, -1.0, &mut out[s]);
                }
            }
            for (s, &(_, wt)) in pair.iter().enumerate() {
                line += wt
                    * out[s]
                        .iter()
                        .zip(weights)
                        .map(|(v, w)| pw.of(C2 * v) * w)
                        .sum::<f64>();
            }
        }
        total += wy * line * dx;
        evals += cells.len();
    }
    log::debug!("box integral: {} cells, {} lines, {} offset evaluations", m, nlines, evals);
    if symmetric {
        2.0 * total
    } else {
        total
    }
}

/// Planar integral split into the near box, the dyadic rings around it and a
/// geometric tail fitted to the last rings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneIntegral {
    pub near: f64,
    pub rings: f64,
    pub tail: f64,
    pub rings_used: u32,
    pub value: f64,
}

/// `∫_{ℝ²} |R₂(g ⊗ 1_{[c,d)})|^p w(x₁) dx`; `w ≡ 1` when absent.
pub fn plane_integral(
    g: &GridFunction,
    c: f64,
    d: f64,
    p: f64,
    weight: Option<&StepWeight1D>,
    cfg: &QuadratureConfig,
) -> Result<PlaneIntegral> {
    cfg.validate()?;
    if g.is_zero() {
        return Ok(PlaneIntegral {
            near: 0.0,
            rings: 0.0,
            tail: 0.0,
            rings_used: 0,
            value: 0.0,
        });
    }
    if let Some(w) = weight {
        if w.base_level() > g.level {
            return Err(Error::Precondition("weight finer than the grid".into()));
        }
    }
    let dx = g.dx();
    let n = g.len() as i64;
    let e_cells = n.max(((d - c) / dx).ceil() as i64);
    let e = e_cells as f64 * dx;
    let w0 = g.start - e_cells;
    let m = (n + 2 * e_cells) as usize;
    let weights: Vec<f64> = (0..m as i64)
        .map(|i| weight.map_or(1.0, |w| cell_value(w, g.level, w0 + i)))
        .collect();
    let mut planner = FftPlanner::new();
    let near = box_integral(g, c, d, p, w0, &weights, (c - e, d + e), cfg, &mut planner);

    let tree = JumpTree::from_grid(g);
    let rule = GlRule::new(cfg.gauss_order);
    let pw = Power::new(p);
    let (x0, x1) = (w0 as f64 * dx, (w0 + m as i64) as f64 * dx);
    let (xc, yc) = (0.5 * (x0 + x1), 0.5 * (c + d));
    let (hx, hy) = (0.5 * (x1 - x0), 0.5 * (d - c) + e);
    let mut rings = 0.0;
    let mut prev = f64::NAN;
    let mut tail = f64::INFINITY;
    let mut used = 0;
    for k in 1..=cfg.max_rings {
        let f = (k as f64).exp2();
        let (ax, ay) = (f * hx, f * hy);
        let mut ring = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if (1..=2).contains(&i) && (1..=2).contains(&j) {
                    continue;
                }
                let (xa, xb) = (xc - ax + i as f64 * ax / 2.0, xc - ax + (i + 1) as f64 * ax / 2.0);
                let (ya, yb) = (yc - ay + j as f64 * ay / 2.0, yc - ay + (j + 1) as f64 * ay / 2.0);
                for (px, wx) in rule.points(xa, xb) {
                    let wv = weight.map_or(1.0, |w| w.value_at(px));
                    if wv == 0.0 {
                        continue;
                    }
                    for (py, wy) in rule.points(ya, yb) {
                        ring += wx * wy * wv * pw.of(tree.riesz2((px, py), c, d));
                    }
                }
            }
        }
        rings += ring;
        used = k;
        if ring == 0.0 {
            tail = 0.0;
            break;
        }
        if k >= 4 {
            let rho = ring / prev;
            tail = if rho < 1.0 { ring * rho / (1.0 - rho) } else { f64::INFINITY };
            if tail <= cfg.tail_fraction * (near + rings) {
                break;
            }
        }
        prev = ring;
    }
    Ok(PlaneIntegral {
        near,
        rings,
        tail,
        rings_used: used,
        value: near + rings + tail,
    })
}

/// Finest dyadic grid level `≥ base` on which `q` is cell-aligned.
pub fn grid_level(q: &Square, base: u32) -> Result<u32> {
    (base..=52)
        .find(|&l| {
            let f = (l as f64).exp2();
            (q.x1 * f).fract() == 0.0 && (q.side * f).fract() == 0.0
        })
        .ok_or_else(|| Error::Precondition(format!("square {q:?} is not dyadically aligned")))
}

/// Snap a square onto the level-`level` grid (side at least one cell).
pub fn snap_square(q: &Square, level: u32) -> Square {
    let f = (level as f64).exp2();
    let side = (q.side * f).round().max(1.0) / f;
    Square::new((q.x1 * f).floor() / f, (q.x2 * f).floor() / f, side)
}

/// Per-cube testing value with its refinement check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeValue {
    pub square: Square,
    pub value: f64,
    pub refined: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleTesting {
    /// Value is the `p`-th root of the largest cube integral.
    pub report: CharacteristicReport,
    pub cubes: Vec<CubeValue>,
}

const MAX_CUBE_CELLS: usize = 1 << 22;

/// `(1/|Q|_σ) ∫_{3Q} |R₂(σ 1_Q)|^p dω` for one cell-aligned square.
pub fn triple_testing_cube(
    sigma: &TensorWeight2D,
    omega: &TensorWeight2D,
    p: f64,
    q: &Square,
    cfg: &QuadratureConfig,
) -> Result<CubeValue> {
    let (sh, wh) = (&sigma.horizontal, &omega.horizontal);
    let level = grid_level(q, sh.base_level().max(wh.base_level()))?;
    let f = (level as f64).exp2();
    let n = (q.side * f) as usize;
    if n > MAX_CUBE_CELLS {
        return Err(Error::TooLarge(level));
    }
    let i0 = (q.x1 * f) as i64;
    let g = GridFunction::sample(sh, level, i0, n);
    let mass = g.values.iter().sum::<f64>() / f * q.side;
    if mass <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let w0 = i0 - n as i64;
    let weights: Vec<f64> = (0..3 * n as i64).map(|i| cell_value(wh, level, w0 + i)).collect();
    let s = q.side;
    let mut planner = FftPlanner::new();
    let run = |c: &QuadratureConfig, pl: &mut FftPlanner<f64>| {
        box_integral(&g, 0.0, s, p, w0, &weights, (-s, 2.0 * s), c, pl) / mass
    };
    let value = run(cfg, &mut planner);
    let refined = cfg.certify.then(|| run(&cfg.refined(), &mut planner));
    let flagged = refined.is_some_and(|r| (r - value).abs() > cfg.tolerance * r.abs().max(1e-300));
    Ok(CubeValue {
        square: *q,
        value,
        refined,
        flagged,
    })
}

/// Triple testing over a family of squares; squares not aligned with the
/// weights' grid are snapped onto it first.
pub fn triple_testing_estimate(
    sigma: &TensorWeight2D,
    omega: &TensorWeight2D,
    p: f64,
    cubes: &[Square],
    cfg: &QuadratureConfig,
) -> Result<TripleTesting> {
    cfg.validate()?;
    if cubes.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let base = sigma.horizontal.base_level().max(omega.horizontal.base_level());
    let vals: Vec<CubeValue> = cubes
        .par_iter()
        .map(|q| {
            let own = base.max((-q.side.log2()).ceil().max(0.0) as u32);
            let q = if grid_level(q, base).is_ok_and(|l| l <= own) { *q } else { snap_square(q, base) };
            triple_testing_cube(sigma, omega, p, &q, cfg)
        })
        .collect::<Result<_>>()?;
    let max = vals.iter().map(|v| v.value).fold(0.0, f64::max);
    let flagged = vals.iter().filter(|v| v.flagged).count();
    let worst_rel = vals
        .iter()
        .filter_map(|v| v.refined.map(|r| (r - v.value).abs() / r.abs().max(1e-300)))
        .fold(0.0, f64::max);
    let mut report = CharacteristicReport::new(
        "triple_testing",
        max.powf(1.0 / p),
        ReportKind::LowerBound,
        &format!("squares[{}]", vals.len()),
    )
    .param("p", p)
    .param("pth_power", max)
    .param("flagged", flagged as f64);
    report.tolerance = worst_rel;
    Ok(TripleTesting {
        report,
        cubes: vals,
    })
}

/// CSV rows `x1, x2, side, value, flagged`.
pub fn write_cube_csv<W: Write>(w: W, cubes: &[CubeValue]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x1", "x2", "side", "value", "flagged"])?;
    for c in cubes {
        wr.write_record(&[
            c.square.x1.to_string(),
            c.square.x2.to_string(),
            c.square.side.to_string(),
            c.value.to_string(),
            c.flagged.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// One block of an alternating function: `steps` cells of length `Δ` from
/// cell `start`, the first carrying `first ∈ {−1, +1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternatingBlock {
    pub start: i64,
    pub steps: usize,
    pub first: i8,
}

/// Block-alternating function with step `Δ = 2^-level`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAlternating {
    pub level: u32,
    pub blocks: Vec<AlternatingBlock>,
}

impl BlockAlternating {
    pub fn new(level: u32, blocks: Vec<AlternatingBlock>) -> Result<Self> {
        for w in blocks.windows(2) {
            if w[0].start + w[0].steps as i64 > w[1].start {
                return Err(Error::Precondition("blocks overlap or are unsorted".into()));
            }
        }
        if blocks.iter().any(|b| b.steps == 0 || b.first.abs() != 1) {
            return Err(Error::Precondition("empty block or invalid sign".into()));
        }
        Ok(Self { level, blocks })
    }

    /// `b` equal blocks tiling `[lo, hi)`, each starting with `−1`.
    pub fn uniform(b: usize, level: u32, lo: f64, hi: f64) -> Result<Self> {
        let f = (level as f64).exp2();
        let (a, z) = ((lo * f).round() as i64, (hi * f).round() as i64);
        let cells = (z - a) as usize;
        if b == 0 || !cells.is_multiple_of(b) {
            return Err(Error::Precondition(format!("{cells} cells do not split into {b} blocks")));
        }
        let per = cells / b;
        Self::new(
            level,
            (0..b)
                .map(|k| AlternatingBlock {
                    start: a + (k * per) as i64,
                    steps: per,
                    first: -1,
                })
                .collect(),
        )
    }

    pub fn delta(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn b_delta(&self) -> f64 {
        self.block_count() as f64 * self.delta()
    }

    pub fn to_grid(&self) -> GridFunction {
        let (Some(f), Some(l)) = (self.blocks.first(), self.blocks.last()) else {
            return GridFunction::new(self.level, 0, Vec::new());
        };
        let start = f.start;
        let mut v = vec![0.0; (l.start + l.steps as i64 - start) as usize];
        for b in &self.blocks {
            for k in 0..b.steps {
                let s = if k % 2 == 0 { b.first } else { -b.first };
                v[(b.start - start) as usize + k] = s as f64;
            }
        }
        GridFunction::new(self.level, start, v)
    }
}

/// `∫_{ℝ²} |R₂(g ⊗ 1_{[−1,1)})|^q dx`.
pub fn block_decay_norm(g: &BlockAlternating, q: f64, cfg: &QuadratureConfig) -> Result<PlaneIntegral> {
    if !(q > 1.0) {
        return Err(Error::Precondition(format!("q = {q} must exceed 1")));
    }
    plane_integral(&g.to_grid(), -1.0, 1.0, q, None, cfg)
}

/// Outcome of the alternating-series comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternatingCheck {
    pub lhs: f64,
    pub bound: f64,
    pub pieces: usize,
}

impl AlternatingCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.bound
    }
}

pub const ALTERNATING_CONSTANT: f64 = 3.0;

/// `|∫ b g|` against `3 M B Δ ‖b‖_∞` for `b` monotone on each piece of `partition`.
pub fn alternating_series_check(
    b: &dyn Fn(f64) -> f64,
    partition: &[f64],
    g: &BlockAlternating,
) -> Result<AlternatingCheck> {
    if partition.len() < 2 || partition.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("partition must be strictly increasing".into()));
    }
    let grid = g.to_grid();
    let (plo, phi_) = (partition[0], partition[partition.len() - 1]);
    if !grid.is_empty() && (grid.lo() < plo || grid.hi() > phi_) {
        return Err(Error::Precondition("partition does not cover the support".into()));
    }
    const SAMPLES: usize = 257;
    let mut sup = 0.0f64;
    for w in partition.windows(2) {
        let (a, z) = (w[0], w[1]);
        let xs: Vec<f64> = (0..SAMPLES)
            .map(|k| a + (z - a) * (k as f64 + 0.5) / SAMPLES as f64)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| b(x)).collect();
        let scale = ys.iter().fold(0.0f64, |s, y| s.max(y.abs())).max(1e-300);
        let up = ys.windows(2).all(|p| p[1] >= p[0] - 1e-13 * scale);
        let down = ys.windows(2).all(|p| p[1] <= p[0] + 1e-13 * scale);
        if !(up || down) {
            return Err(Error::Precondition(format!("b is not monotone on [{a}, {z})")));
        }
        sup = sup.max(scale);
    }
    let rule = GlRule::new(8);
    let dx = grid.dx();
    let mut integral = 0.0;
    for (i, &v) in grid.values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let lo = (grid.start + i as i64) as f64 * dx;
        let hi = lo + dx;
        let mut cuts = vec![lo, hi];
        cuts.extend(partition.iter().filter(|&&x| lo < x && x < hi));
        cuts.sort_by(f64::total_cmp);
        integral += v * rule.integrate_panels(&cuts, |x| {
            let y = b(x);
            sup = sup.max(y.abs());
            y
        });
    }
    let pieces = partition.len() - 1;
    Ok(AlternatingCheck {
        lhs: integral.abs(),
        bound: ALTERNATING_CONSTANT * pieces as f64 * g.b_delta() * sup,
        pieces,
    })
}

/// The three oscillation integrals at one square, the weak one for both weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtValues {
    pub strong: f64,
    pub basic_weak: f64,
    pub weak_sigma: f64,
    pub weak_omega: f64,
}

impl UtValues {
    pub fn weak(&self) -> f64 {
        self.weak_sigma.abs().max(self.weak_omega.abs())
    }

    pub fn passes(&self, eps: f64) -> bool {
        self.strong < eps && self.basic_weak.abs() < eps && self.weak() < eps
    }
}

/// Smallest `t` with `ℓ(Q) ≥ 2^{−(k_0+…+k_t)}`.
pub fn ut_level(side: f64, schedule: &[u32]) -> Option<usize> {
    let mut k = 0u32;
    for (t, &kt) in schedule.iter().enumerate() {
        k += kt;
        if side >= (-(k as f64)).exp2() {
            return Some(t);
        }
    }
    None
}

/// Oscillation integrals for `Q` against `osc` at level `t` of `schedule`.
#[allow(clippy::too_many_arguments)]
pub fn ut_check(
    t: usize,
    schedule: &[u32],
    sigma_t: &StepWeight1D,
    omega_t: &StepWeight1D,
    osc: &StepWeight1D,
    q: &Square,
    p: f64,
    cfg: &QuadratureConfig,
) -> Result<UtValues> {
    if ut_level(q.side, schedule) != Some(t) {
        return Err(Error::Precondition(format!(
            "side {} does not select level {t} of {schedule:?}",
            q.side
        )));
    }
    let osc = osc.clone().with_periodic(true);
    if osc.values().iter().all(|&v| v == 0.0) {
        return Ok(UtValues::default());
    }
    let level = grid_level(
        q,
        osc.base_level().max(sigma_t.base_level()).max(omega_t.base_level()),
    )?;
    let f = (level as f64).exp2();
    let n = (q.side * f) as usize;
    if n > MAX_CUBE_CELLS {
        return Err(Error::TooLarge(level));
    }
    let i0 = (q.x1 * f) as i64;
    let s = q.side;
    let area = s * s;
    let local = GridFunction::sample(&osc, level, i0, n);
    let strong = plane_integral(&local, 0.0, s, p, None, cfg)?.value / area;
    let basic_weak = 3.0 * s * osc.integral(q.x1 - s, q.x1 + 2.0 * s) / area;
    let w0 = i0 - n as i64;
    let weights: Vec<f64> = (0..3 * n as i64).map(|i| cell_value(&osc, level, w0 + i)).collect();
    let mut planner = FftPlanner::new();
    let mut weak = |w: &StepWeight1D, e: f64| {
        let g = GridFunction::sample(&w.clone().with_periodic(true), level, i0, n);
        box_integral(&g, 0.0, s, e, w0, &weights, (-s, 2.0 * s), cfg, &mut planner) / area
    };
    let weak_sigma = weak(sigma_t, p);
    let weak_omega = weak(omega_t, p / (p - 1.0));
    Ok(UtValues {
        strong,
        basic_weak,
        weak_sigma,
        weak_omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(x: (f64, f64), y: (f64, f64)) -> f64 {
        let (a, b) = (x.0 - y.0, x.1 - y.1);
        C2 * b / (a * a + b * b).powf(1.5)
    }

    fn gl_adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, lo: &GlRule, hi: &GlRule, depth: u32) -> f64 {
        let (u, v) = (lo.integrate(a, b, f), hi.integrate(a, b, f));
        if (u - v).abs() <= tol || depth >= 40 {
            return v;
        }
        let m = 0.5 * (a + b);
        gl_adaptive(f, a, m, 0.5 * tol, lo, hi, depth + 1) + gl_adaptive(f, m, b, 0.5 * tol, lo, hi, depth + 1)
    }

    fn rect_integral(x: (f64, f64), a: f64, b: f64, c: f64, d: f64) -> f64 {
        if b <= a || d <= c {
            return 0.0;
        }
        let (lo, hi) = (GlRule::new(10), GlRule::new(20));
        let inner = |y1: f64| gl_adaptive(&|y2: f64| kernel(x, (y1, y2)), c, d, 1e-14, &lo, &hi, 0);
        gl_adaptive(&inner, a, b, 1e-13, &lo, &hi, 0)
    }

    // Principal value: the square of half-width δ around x integrates to zero.
    fn kernel_oracle(x: (f64, f64), r: &Rect2D) -> f64 {
        let inside = r.a < x.0 && x.0 < r.b && r.c < x.1 && x.1 < r.d;
        if !inside {
            return rect_integral(x, r.a, r.b, r.c, r.d);
        }
        let dl = (x.0 - r.a).min(r.b - x.0).min(x.1 - r.c).min(r.d - x.1);
        let (l, rr) = (x.0 - dl, x.0 + dl);
        let (bt, tp) = (x.1 - dl, x.1 + dl);
        rect_integral(x, r.a, l, r.c, r.d)
            + rect_integral(x, rr, r.b, r.c, r.d)
            + rect_integral(x, l, rr, r.c, bt)
            + rect_integral(x, l, rr, tp, r.d)
    }

    fn unit() -> Rect2D {
        Rect2D::new(-1.0, 1.0, -1.0, 1.0).unwrap()
    }

    #[test]
    fn center_vanishes() {
        let r = Rect2D::new(0.25, 1.5, -0.5, 2.0).unwrap();
        let v = riesz2_rect((0.875, 0.75), &r).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn midline_antisymmetry() {
        let r = Rect2D::new(0.0, 1.0, 0.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x1 = rng.random_range(-2048..3072) as f64 / 1024.0;
            let x2 = rng.random_range(-2048..3072) as f64 / 1024.0;
            if x2 == 0.0 || x2 == 0.5 {
                continue;
            }
            let a = riesz2_rect((x1, x2), &r).unwrap();
            let b = riesz2_rect((x1, 0.5 - x2), &r).unwrap();
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn far_point_matches_kernel_quadrature() {
        let v = riesz2_rect((0.0, 10.0), &unit()).unwrap();
        let o = kernel_oracle((0.0, 10.0), &unit());
        assert!(((v - o) / o).abs() <= 1e-8, "{v} vs {o}");
        assert!(v > 0.0);
    }

    #[test]
    fn halton_points_match_kernel_quadrature() {
        fn halton(i: usize, b: usize) -> f64 {
            let (mut f, mut r, mut k) = (1.0, 0.0, i);
            while k > 0 {
                f /= b as f64;
                r += f * (k % b) as f64;
                k /= b;
            }
            r
        }
        let r = Rect2D::new(0.0, 1.0, 0.0, 0.5).unwrap();
        let mut checked = 0;
        let mut i = 1;
        while checked < 100 {
            let x = (-1.0 + 3.0 * halton(i, 2), -1.0 + 2.5 * halton(i, 3));
            i += 1;
            let clear = [(x.0 - r.a).abs(), (x.0 - r.b).abs(), (x.1 - r.c).abs(), (x.1 - r.d).abs()]
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if clear < 0.05 * 0.5 {
                continue;
            }
            let v = riesz2_rect(x, &r).unwrap();
            let o = kernel_oracle(x, &r);
            assert!((v - o).abs() <= 1e-6 * o.abs().max(1e-3), "{x:?}: {v} vs {o}");
            checked += 1;
        }
    }

    #[test]
    fn far_field_decay_constant() {
        let r = Rect2D::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let ks: Vec<f64> = [4.0, 8.0, 16.0]
            .iter()
            .map(|&dist| {
                let v = riesz2_rect((0.5, 1.0 + dist), &r).unwrap();
                v.abs() * dist * dist / r.area()
            })
            .collect();
        let (lo, hi) = (ks.iter().cloned().fold(f64::INFINITY, f64::min), ks.iter().cloned().fold(0.0, f64::max));
        assert!(hi / lo <= 1.2, "{ks:?}");
    }

    #[test]
    fn edge_errors() {
        let r = unit();
        assert!(matches!(riesz2_rect((0.0, 1.0), &r), Err(Error::OnEdge(..))));
        assert!(matches!(riesz2_rect((-1.0, -1.0), &r), Err(Error::OnEdge(..))));
        assert!(riesz2_rect((1.0, 0.5), &r).unwrap().is_finite());
        assert!(riesz2_rect((3.0, 1.0), &r).unwrap().is_finite());
    }

    #[test]
    fn asinh_diff_matches_direct() {
        for &(u, v, h) in &[(3.0f64, 1.0f64, 0.5f64), (-3.0, -1.0, 0.5), (2.0, -1.0, 0.1), (1e8, 1e8 - 1.0, 1e-3)] {
            let direct = (u / h).asinh() - (v / h).asinh();
            let s = asinh_diff(u, v, h);
            assert!((s - direct).abs() <= 1e-9 * direct.abs().max(1.0), "{u} {v} {h}");
        }
        assert!((asinh_diff(2.0, 1.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(asinh_diff(1.0, -1.0, 0.0).is_nan());
    }

    #[test]
    fn tensor_restricted_linearity() {
        let q = Rect2D::new(0.25, 0.75, 0.0, 0.5).unwrap();
        let x = (0.3, 0.9);
        let one = TensorWeight2D::new(StepWeight1D::constant(1.0, 4));
        let a = riesz2_tensor_restricted(x, &one, &q).unwrap();
        assert!((a - riesz2_rect(x, &q).unwrap()).abs() < 1e-14);
        let halves = TensorWeight2D::new(StepWeight1D::constant(1.0, 1));
        let b = riesz2_tensor_restricted(x, &halves, &q).unwrap();
        assert!((a - b).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = StepWeight1D::from_cells(5, |_| rng.random_range(0.1..3.0)).unwrap();
        let tu = TensorWeight2D::new(u.clone());
        let q = Rect2D::new(3.0 / 32.0, 27.0 / 32.0, 0.0, 0.25).unwrap();
        for x in [(0.5, 0.6), (-0.2, 0.1), (0.33, 0.125)] {
            let v = riesz2_tensor_restricted(x, &tu, &q).unwrap();
            let oracle: f64 = (3..27)
                .map(|i| {
                    let cell = Rect2D::new(i as f64 / 32.0, (i + 1) as f64 / 32.0, 0.0, 0.25).unwrap();
                    u.values()[i] * riesz2_rect(x, &cell).unwrap()
                })
                .sum();
            assert!((v - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
            let g = GridFunction::sample(&u, 5, 3, 24);
            let w = g.riesz2(x, 0.0, 0.25).unwrap();
            assert!((w - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn tree_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..700).map(|_| rng.random_range(-1.0..2.0)).collect();
        let g = GridFunction::new(9, -100, vals);
        let tree = JumpTree::from_grid(&g);
        for _ in 0..200 {
            let x = (rng.random_range(-3.0..4.0), rng.random_range(-3.0..3.0));
            let a = tree.riesz2(x, -0.5, 0.75);
            let b = g.riesz2(x, -0.5, 0.75).unwrap();
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-2), "{x:?}: {a} vs {b}");
        }
    }

    #[test]
    fn line_conv_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = GridFunction::new(8, 40, vals);
        let mut planner = FftPlanner::new();
        let (w0, m) = (0i64, 500usize);
        let mut conv = LineConv::new(&g, w0, m, &mut planner);
        assert!(conv.fft.is_some());
        let mut out = [vec![0.0; m], vec![0.0; m]];
        let (hd, hc) = (0.01, 0.3);
        let asinh = |u: f64, h: f64| (u / h).asinh();
        let log = |u: f64| u.signum() * (2.0 * u.abs()).ln();
        let cases: [(Kernel, Box<dyn Fn(f64) -> f64>); 3] = [
            (Kernel::Diff { hd, hc }, Box::new(move |u| asinh(u, hd) - asinh(u, hc))),
            (Kernel::Log, Box::new(log)),
            (Kernel::Excess { h: hc, sign: -1.0 }, Box::new(move |u| log(u) - asinh(u, hc))),
        ];
        let dx = g.dx();
        let jumps = g.jumps();
        for (which, k) in &cases {
            conv.eval(&[0.2, 0.7], *which, &mut out);
            for i in (0..m).step_by(37) {
                for (s, th) in [0.2, 0.7].iter().enumerate() {
                    let x1 = (w0 as f64 + i as f64 + th) * dx;
                    let want: f64 = jumps
                        .iter()
                        .enumerate()
                        .map(|(j, c)| c * k(x1 - (g.start + j as i64) as f64 * dx))
                        .sum();
                    assert!((out[s][i] - want).abs() < 1e-9 * want.abs().max(1.0), "{which:?}");
                }
            }
        }
    }

    #[test]
    fn smooth_lines_match_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = GridFunction::new(9, 0, vals);
        let weights: Vec<f64> = (0..1536).map(|_| rng.random_range(0.5..2.0)).collect();
        let cfg = QuadratureConfig::default();
        let mut planner = FftPlanner::new();
        let run = |panels: usize, planner: &mut FftPlanner<f64>| {
            box_integral_with(&g, 0.0, 1.0, 4.0, -512, &weights, (-1.0, 2.0), &cfg, planner, panels)
        };
        let a = run(0, &mut planner);
        let b = run(64, &mut planner);
        assert!((a - b).abs() < 1e-9 * a, "{a} vs {b}");
    }

    #[test]
    fn l2_identity_for_square() {
        // ∫|R₂ 1_Q|² = |Q|/2 by the symmetry R₁ ↔ R₂ and Plancherel
        let g = GridFunction::new(0, 0, vec![1.0]);
        let v = plane_integral(&g, 0.0, 1.0, 2.0, None, &QuadratureConfig::default()).unwrap();
        assert!((v.value - 0.5).abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn constant_unit_square_triple_testing() {
        let one = TensorWeight2D::new(StepWeight1D::constant(1.0, 0));
        let q = Square::new(0.0, 0.0, 1.0);
        let cfg = QuadratureConfig::default();
        let v = triple_testing_cube(&one, &one, 2.0, &q, &cfg).unwrap().value;
        let r = Rect2D::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let f = |x2: f64| {
            let inner = |x1: f64| riesz2_rect((x1, x2), &r).unwrap().powi(2);
            [(-1.0, 0.0), (0.0, 1.0), (1.0, 2.0)]
                .iter()
                .map(|&(a, b)| adaptive(&inner, a, b, 1e-11))
                .sum::<f64>()
        };
        let oracle: f64 = [(-1.0, 0.0), (0.0, 0.5)]
            .iter()
            .map(|&(a, b)| adaptive(&f, a, b, 1e-9))
            .sum::<f64>()
            * 2.0;
        assert!(((v - oracle) / oracle).abs() <= 1e-4, "{v} vs {oracle}");
        let zero = TensorWeight2D::new(StepWeight1D::constant(0.0, 0));
        assert_eq!(triple_testing_cube(&one, &zero, 2.0, &q, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn block_decay_basics() {
        let cfg = QuadratureConfig::default();
        let empty = BlockAlternating::new(4, vec![]).unwrap();
        assert_eq!(block_decay_norm(&empty, 2.0, &cfg).unwrap().value, 0.0);
        let vals: Vec<f64> = (3..6)
            .map(|l| {
                let g = BlockAlternating::uniform(4, l, -1.0, 1.0).unwrap();
                block_decay_norm(&g, 2.0, &cfg).unwrap().value
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    }

    #[test]
    fn alternating_examples() {
        let g = BlockAlternating::uniform(1, 6, 0.0, 1.0).unwrap();
        let r = alternating_series_check(&|_| 2.0, &[0.0, 1.0], &g).unwrap();
        assert!(r.lhs < 1e-12 && r.holds());
        let r = alternating_series_check(&|x| x, &[0.0, 1.0], &g).unwrap();
        let delta = 1.0 / 64.0;
        assert!((r.lhs - delta / 2.0).abs() < 1e-14);
        assert!(r.lhs <= 3.0 * delta);
        let g8 = BlockAlternating::uniform(8, 7, 0.0, 1.0).unwrap();
        let tent = |x: f64| 1.0 - (2.0 * x - 1.0).abs();
        assert!(alternating_series_check(&tent, &[0.0, 0.5, 1.0], &g8).unwrap().holds());
        assert!(alternating_series_check(&tent, &[0.0, 1.0], &g8).is_err());
    }

    #[test]
    fn ut_zero_and_aligned() {
        let cfg = QuadratureConfig::default();
        let s = StepWeight1D::constant(1.0, 2);
        let q = Square::new(0.25, 0.0, 0.25);
        let sched = [0, 2];
        let zero = StepWeight1D::constant(0.0, 6);
        assert_eq!(ut_check(1, &sched, &s, &s, &zero, &q, 4.0, &cfg).unwrap(), UtValues::default());
        let osc = BlockAlternating::uniform(1, 6, 0.0, 1.0).unwrap().to_grid();
        let osc = StepWeight1D::new(6, osc.values).unwrap();
        let v = ut_check(1, &sched, &s, &s, &osc, &q, 4.0, &cfg).unwrap();
        assert_eq!(v.basic_weak, 0.0);
        assert!(v.strong > 0.0 && v.strong.is_finite());
        assert!(ut_check(0, &sched, &s, &s, &osc, &q, 4.0, &cfg).is_err());
    }
}
