//! Muckenhoupt-type characteristics: scalar `A_p`, the quadratic local and
//! offset functionals, the two-tailed condition via annuli, the rectangular
//! quadratic functional for tensor weights and the Whitney chain of a pair of
//! adjacent intervals.
//!
//! Supremum-type quantities are reported as lower bounds coming from an
//! explicit coefficient family.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicInterval, StepWeight1D};
use crate::error::{Error, Result};
use crate::riesz::TensorWeight2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    ExactMax,
    LowerBound,
    UpperBound,
    Estimate,
}

impl ReportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReportKind::ExactMax => "exact-max",
            ReportKind::LowerBound => "lower-bound",
            ReportKind::UpperBound => "upper-bound",
            ReportKind::Estimate => "estimate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicReport {
    pub name: String,
    pub value: f64,
    pub kind: ReportKind,
    pub family: String,
    pub params: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl CharacteristicReport {
    pub fn new(name: &str, value: f64, kind: ReportKind, family: &str) -> Self {
        Self {
            name: name.to_string(),
            value,
            kind,
            family: family.to_string(),
            params: BTreeMap::new(),
            tolerance: 0.0,
        }
    }

    pub fn param(mut self, key: &str, v: f64) -> Self {
        self.params.insert(key.to_string(), v);
        self
    }

    pub fn tol(mut self, t: f64) -> Self {
        self.tolerance = t;
        self
    }
}

/// Half-open real interval `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Concentric dilation by `f`.
    pub fn dilate(&self, f: f64) -> Self {
        let c = self.center();
        let h = 0.5 * f * self.len();
        Self::new(c - h, c + h)
    }
}

impl From<DyadicInterval> for Interval {
    fn from(d: DyadicInterval) -> Self {
        Self::new(d.left(), d.right())
    }
}

/// Axis-parallel square `[x1, x1+side) × [x2, x2+side)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Square {
    pub x1: f64,
    pub x2: f64,
    pub side: f64,
}

impl Square {
    pub fn new(x1: f64, x2: f64, side: f64) -> Self {
        Self { x1, x2, side }
    }

    pub fn dyadic(i: DyadicInterval, j: DyadicInterval) -> Self {
        assert_eq!(i.level, j.level);
        Self::new(i.left(), j.left(), i.len())
    }

    pub fn horizontal(&self) -> Interval {
        Interval::new(self.x1, self.x1 + self.side)
    }

    pub fn vertical(&self) -> Interval {
        Interval::new(self.x2, self.x2 + self.side)
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    pub fn dilate(&self, f: f64) -> Self {
        let h = self.horizontal().dilate(f);
        let v = self.vertical().dilate(f);
        Self::new(h.lo, v.lo, h.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CubeFamily {
    Dyadic(Vec<DyadicInterval>),
    Intervals(Vec<Interval>),
    Squares(Vec<Square>),
}

impl CubeFamily {
    pub fn len(&self) -> usize {
        match self {
            CubeFamily::Dyadic(v) => v.len(),
            CubeFamily::Intervals(v) => v.len(),
            CubeFamily::Squares(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Horizontal projections; tensor averages over a square reduce to these.
    pub fn horizontal(&self) -> Vec<Interval> {
        match self {
            CubeFamily::Dyadic(v) => v.iter().map(|&d| d.into()).collect(),
            CubeFamily::Intervals(v) => v.clone(),
            CubeFamily::Squares(v) => v.iter().map(|s| s.horizontal()).collect(),
        }
    }

    pub fn describe(&self) -> String {
        let kind = match self {
            CubeFamily::Dyadic(_) => "dyadic",
            CubeFamily::Intervals(_) => "intervals",
            CubeFamily::Squares(_) => "squares",
        };
        format!("{kind}[{}]", self.len())
    }

    /// All of `𝒟([0,1))` with level `≤ max_level`.
    pub fn dyadic_grid(max_level: u32) -> Self {
        CubeFamily::Dyadic(DyadicInterval::grid(max_level as i32).collect())
    }
}

/// Coefficients `a_J` attached to dyadic intervals; repeated entries are
/// separate terms of the square sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFamily {
    pub entries: Vec<(DyadicInterval, f64)>,
}

impl CoefficientFamily {
    pub fn new(entries: Vec<(DyadicInterval, f64)>) -> Self {
        Self { entries }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|(_, a)| *a == 0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_level(&self) -> i32 {
        self.entries.iter().map(|(j, _)| j.level).max().unwrap_or(0)
    }
}

fn interval_mean(w: &StepWeight1D, i: &Interval) -> f64 {
    w.integral(i.lo, i.hi) / i.len()
}

fn dual(p: f64) -> f64 {
    p / (p - 1.0)
}

/// `(E_I σ)^{1/p′} (E_I ω)^{1/p}`.
pub fn ap_product(es: f64, ew: f64, p: f64) -> f64 {
    es.powf(1.0 / dual(p)) * ew.powf(1.0 / p)
}

/// Exact max of the scalar characteristic over the family.
pub fn scalar_ap(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    family: &CubeFamily,
) -> Result<CharacteristicReport> {
    let ivs = family.horizontal();
    if ivs.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let (mut best, mut arg) = (f64::NEG_INFINITY, ivs[0]);
    for i in &ivs {
        let v = ap_product(interval_mean(sigma, i), interval_mean(omega, i), p);
        if v > best {
            best = v;
            arg = *i;
        }
    }
    Ok(
        CharacteristicReport::new("scalar_ap", best, ReportKind::ExactMax, &family.describe())
            .param("p", p)
            .param("argmax_lo", arg.lo)
            .param("argmax_hi", arg.hi),
    )
}

/// Scalar characteristic over `𝒟([0,1))` down to `max_level`, from the
/// average pyramids.
pub fn scalar_ap_dyadic(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    max_level: u32,
) -> CharacteristicReport {
    let top = max_level.min(sigma.base_level().max(omega.base_level()));
    let mut best = f64::NEG_INFINITY;
    let mut arg = DyadicInterval::UNIT;
    for t in 0..=top {
        for j in DyadicInterval::UNIT.descendants(t as i32) {
            let v = ap_product(sigma.mean(&j), omega.mean(&j), p);
            if v > best {
                best = v;
                arg = j;
            }
        }
    }
    CharacteristicReport::new(
        "scalar_ap",
        best,
        ReportKind::ExactMax,
        &format!("dyadic<= {top}"),
    )
    .param("p", p)
    .param("argmax_level", arg.level as f64)
    .param("argmax_index", arg.index as f64)
}

/// `∫ (Σ c_i 𝟏_{[lo_i, hi_i)})^{e} dμ`, exact on step weights.
pub fn power_integral(terms: &[(f64, f64, f64)], mu: &StepWeight1D, e: f64) -> f64 {
    let mut events: Vec<(f64, usize, bool)> = Vec::with_capacity(2 * terms.len());
    for (k, &(lo, hi, _)) in terms.iter().enumerate() {
        if hi > lo {
            events.push((lo, k, true));
            events.push((hi, k, false));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut active = 0usize;
    let mut level = 0.0f64;
    let mut total = 0.0;
    let mut x = f64::NEG_INFINITY;
    for (pos, k, open) in events {
        if active > 0 && pos > x && level > 0.0 {
            total += level.powf(e) * mu.integral(x, pos);
        }
        x = pos;
        if open {
            active += 1;
            level += terms[k].2;
        } else {
            active -= 1;
            level -= terms[k].2;
            if active == 0 {
                level = 0.0;
            }
        }
    }
    total
}

/// `‖(Σ a_J²(E_Jσ)²𝟏_J)^{1/2}‖_{L^p(ω)} / ‖(Σ a_J²𝟏_J)^{1/2}‖_{L^p(σ)}`.
pub fn quadratic_ap_functional(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    a: &CoefficientFamily,
) -> Result<CharacteristicReport> {
    let num_terms: Vec<_> = a
        .entries
        .iter()
        .map(|(j, c)| (j.left(), j.right(), c * c * sigma.mean(j).powi(2)))
        .collect();
    let den_terms: Vec<_> = a
        .entries
        .iter()
        .map(|(j, c)| (j.left(), j.right(), c * c))
        .collect();
    quadratic_ratio("quadratic_ap", &num_terms, &den_terms, sigma, omega, p, a.len())
}

fn quadratic_ratio(
    name: &str,
    num_terms: &[(f64, f64, f64)],
    den_terms: &[(f64, f64, f64)],
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    size: usize,
) -> Result<CharacteristicReport> {
    let num = power_integral(num_terms, omega, p / 2.0);
    let den = power_integral(den_terms, sigma, p / 2.0);
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    Ok(CharacteristicReport::new(
        name,
        (num / den).powf(1.0 / p),
        ReportKind::LowerBound,
        &format!("coefficients[{size}]"),
    )
    .param("p", p)
    .param("numerator", num)
    .param("denominator", den))
}

/// One offset term: coefficient `a` on `J` with partner `J*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetTerm {
    pub j: DyadicInterval,
    pub j_star: DyadicInterval,
    pub a: f64,
}

/// Offset functional: `(E_{J*}σ)² 𝟏_J` against `ω`, `𝟏_{J*}` against `σ`.
pub fn offset_ap_functional(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    terms: &[OffsetTerm],
    c0: f64,
) -> Result<CharacteristicReport> {
    for t in terms {
        if t.j.level != t.j_star.level || t.j.dist(&t.j_star) > c0 * t.j.len() {
            return Err(Error::Precondition(format!(
                "offset pair {:?}, {:?} violates the distance constraint",
                t.j, t.j_star
            )));
        }
    }
    let num: Vec<_> = terms
        .iter()
        .map(|t| (t.j.left(), t.j.right(), t.a * t.a * sigma.mean(&t.j_star).powi(2)))
        .collect();
    let den: Vec<_> = terms
        .iter()
        .map(|t| (t.j_star.left(), t.j_star.right(), t.a * t.a))
        .collect();
    Ok(quadratic_ratio("offset_ap", &num, &den, sigma, omega, p, terms.len())?.param("c0", c0))
}

/// Two-tailed characteristic: lower bound and certified upper bound per the
/// annular decomposition, maximized over the family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoTailed {
    pub lower: CharacteristicReport,
    pub upper: CharacteristicReport,
}

fn tensor_mass(w: &TensorWeight2D, q: &Square) -> f64 {
    q.side * w.horizontal.integral(q.x1, q.x1 + q.side)
}

/// Lower and upper bounds of `(1/|Q|)∫|Q|^p/[ℓ(Q)+dist(x,Q)]^{np} dμ`.
pub fn tail_integral_bounds(
    mu: &TensorWeight2D,
    q: &Square,
    p: f64,
    l_annuli: u32,
    doubling: f64,
) -> Result<(f64, f64)> {
    let n = 2.0;
    let limit = (n * (1.0 + (p - 1.0) / 2.0)).exp2();
    if doubling > limit {
        return Err(Error::TailDiverges {
            ratio: doubling,
            limit,
        });
    }
    let area = q.area();
    let m = |f: f64| tensor_mass(mu, &q.dilate(f));
    let mq = m(1.0);
    let m2 = m(2.0);
    let w_lo = |l: u32| (1.0 / (1.0 + n.sqrt() * ((l as f64 + 1.0).exp2() - 1.0) / 2.0)).powf(n * p);
    let w_up = |l: u32| (2.0 / ((l as f64).exp2() + 1.0)).powf(n * p);
    let mut lower = mq + w_lo(0) * (m2 - mq);
    let mut upper = m2;
    let mut prev = m2;
    for l in 1..=l_annuli {
        let next = m(((l + 1) as f64).exp2());
        let ring = (next - prev).max(0.0);
        lower += w_lo(l) * ring;
        upper += w_up(l) * ring;
        prev = next;
    }
    let r = doubling * (-n * p).exp2();
    let tail = (n * p).exp2() * (-(l_annuli as f64) * n * p).exp2() * prev * r / (1.0 - r);
    upper += tail;
    Ok((lower / area, upper / area))
}

/// Two-tailed characteristic over a family of squares.
pub fn two_tailed_ap_estimate(
    sigma: &TensorWeight2D,
    omega: &TensorWeight2D,
    p: f64,
    family: &[Square],
    l_annuli: u32,
    doubling: (f64, f64),
) -> Result<TwoTailed> {
    if family.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let pp = dual(p);
    let (mut lo, mut up) = (0.0f64, 0.0f64);
    for q in family {
        let (wl, wu) = tail_integral_bounds(omega, q, p, l_annuli, doubling.1)?;
        let (sl, su) = tail_integral_bounds(sigma, q, pp, l_annuli, doubling.0)?;
        lo = lo.max(wl.powf(1.0 / p) * sl.powf(1.0 / pp));
        up = up.max(wu.powf(1.0 / p) * su.powf(1.0 / pp));
    }
    let fam = format!("squares[{}]", family.len());
    let mk = |name: &str, v: f64, kind| {
        CharacteristicReport::new(name, v, kind, &fam)
            .param("p", p)
            .param("annuli", l_annuli as f64)
            .param("doubling_sigma", doubling.0)
            .param("doubling_omega", doubling.1)
    };
    Ok(TwoTailed {
        lower: mk("two_tailed_ap_lower", lo, ReportKind::LowerBound),
        upper: mk("two_tailed_ap_upper", up, ReportKind::UpperBound),
    })
}

/// `(𝔗ℜ^p + 2^{np+1} 𝒜_p^p)^{1/p}` bounding the full testing constant.
pub fn full_testing_bound(
    triple: &CharacteristicReport,
    two_tailed_upper: &CharacteristicReport,
    p: f64,
) -> CharacteristicReport {
    let n = 2.0;
    let c = (n * p + 1.0).exp2();
    let v = (triple.value.powf(p) + c * two_tailed_upper.value.powf(p)).powf(1.0 / p);
    CharacteristicReport::new("full_testing_bound", v, ReportKind::UpperBound, &triple.family)
        .param("p", p)
        .param("constant", c)
}

/// Rectangular quadratic functional over `ℰ` for tensor weights.
///
/// Square `I = I₁ × [0, ℓ)` carries `J(I) = I₁ × [10ℓ, 10ℓ + 100)`.
pub fn rect_quadratic_functional(
    sigma: &TensorWeight2D,
    omega: &TensorWeight2D,
    p: u32,
    a: &CoefficientFamily,
) -> Result<CharacteristicReport> {
    if p < 2 || !p.is_multiple_of(2) {
        return Err(Error::Precondition(format!("p = {p} must be even")));
    }
    if a.is_zero() {
        return Err(Error::ZeroDenominator);
    }
    let k = (p / 2) as i32;
    let sh = &sigma.horizontal;
    let wh = &omega.horizontal;
    let terms: Vec<(DyadicInterval, f64, f64)> = a
        .entries
        .iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(j, c)| (*j, c * c, sh.mean(j).powi(2)))
        .collect();

    // sweep in x1; on each segment integrate the x2 profile exactly
    let mut events: Vec<(f64, usize, bool)> = Vec::new();
    for (idx, (j, _, _)) in terms.iter().enumerate() {
        events.push((j.left(), idx, true));
        events.push((j.right(), idx, false));
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut active: Vec<usize> = Vec::new();
    let (mut num, mut den) = (0.0, 0.0);
    let mut x = f64::NEG_INFINITY;
    for (pos, idx, open) in events {
        if !active.is_empty() && pos > x {
            let (vn, vd) = vertical_profile(&terms, &active, k);
            num += vn * wh.integral(x, pos);
            den += vd * sh.integral(x, pos);
        }
        x = pos;
        if open {
            active.push(idx);
        } else if let Some(q) = active.iter().position(|&v| v == idx) {
            active.swap_remove(q);
        }
    }
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    let value = (num / den).powf(1.0 / p as f64);
    let reduced = quadratic_ap_functional(sh, wh, p as f64, a)?.value;
    let factor = (value / reduced).max(reduced / value);
    Ok(CharacteristicReport::new(
        "rect_quadratic_ap",
        value,
        ReportKind::LowerBound,
        &format!("rectangles[{}]", terms.len()),
    )
    .param("p", p as f64)
    .param("reduced_1d", reduced)
    .param("reduction_factor", factor)
    .tol(4.0))
}

// ∫ (Σ_active c e 𝟏_{[10ℓ,10ℓ+100)}(x2))^k dx2 for the numerator (e = (E σ)²) and denominator (e = 1)
fn vertical_profile(terms: &[(DyadicInterval, f64, f64)], active: &[usize], k: i32) -> (f64, f64) {
    let mut pts: Vec<f64> = Vec::with_capacity(2 * active.len());
    for &i in active {
        let l = terms[i].0.len();
        pts.push(10.0 * l);
        pts.push(10.0 * l + 100.0);
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let (mut vn, mut vd) = (0.0, 0.0);
    for w in pts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let (mut sn, mut sd) = (0.0, 0.0);
        for &i in active {
            let l = terms[i].0.len();
            if mid >= 10.0 * l && mid < 10.0 * l + 100.0 {
                sn += terms[i].1 * terms[i].2;
                sd += terms[i].1;
            }
        }
        vn += sn.powi(k) * (w[1] - w[0]);
        vd += sd.powi(k) * (w[1] - w[0]);
    }
    (vn, vd)
}

/// Whitney chain of `J* × J` toward the shared corner and the selected
/// product cells `K* × K` far from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhitneyDecomposition {
    pub chain: Vec<(DyadicInterval, DyadicInterval)>,
    pub cells: Vec<(DyadicInterval, DyadicInterval)>,
}

pub const WHITNEY_C1: f64 = 1.0;
pub const WHITNEY_C2: f64 = 4.0;

impl WhitneyDecomposition {
    /// Area of `∪ Ī` over the resolved chain (each cube minus its chain
    /// child), relative to `|J* × J|`.
    pub fn covered_fraction(&self) -> f64 {
        let top = self.chain[0].0.len().powi(2);
        let n = self.chain.len();
        self.chain
            .iter()
            .enumerate()
            .map(|(i, (a, _))| if i + 1 < n { 0.75 * a.len().powi(2) } else { 0.0 })
            .sum::<f64>()
            / top
    }

    /// `Σ |K* × K|` relative to `|J* × J|`.
    pub fn cell_fraction(&self) -> f64 {
        let top = self.chain[0].0.len().powi(2);
        self.cells.iter().map(|(a, _)| a.len().powi(2)).sum::<f64>() / top
    }
}

pub fn whitney_product_cells(
    j_star: DyadicInterval,
    j: DyadicInterval,
    depth: u32,
) -> Result<WhitneyDecomposition> {
    if j_star.level != j.level || (j_star.index - j.index).abs() != 1 {
        return Err(Error::Precondition(format!(
            "{j_star:?} and {j:?} are not adjacent of equal length"
        )));
    }
    // corner side: J* left of J means the shared point is J*'s right end
    let star_left = j_star.index < j.index;
    let mut chain = vec![(j_star, j)];
    let mut cells = Vec::new();
    let (mut a, mut b) = (j_star, j);
    for _ in 0..depth {
        let (al, ar) = a.children();
        let (bl, br) = b.children();
        let (near_a, far_a, near_b, far_b) = if star_left {
            (ar, al, bl, br)
        } else {
            (al, ar, br, bl)
        };
        cells.push((far_a, far_b));
        a = near_a;
        b = near_b;
        chain.push((a, b));
    }
    Ok(WhitneyDecomposition { chain, cells })
}

/// Sampled planar doubling `max |2Q|/|Q|` for a tensor weight.
pub fn planar_doubling_sample(w: &TensorWeight2D, squares: &[Square]) -> f64 {
    squares
        .iter()
        .map(|q| tensor_mass(w, &q.dilate(2.0)) / tensor_mass(w, q))
        .fold(1.0, f64::max)
}

/// Sampled non-dyadic doubling: worst ratio of the two halves of each interval.
pub fn interval_doubling_sample(w: &StepWeight1D, intervals: &[Interval]) -> f64 {
    intervals
        .iter()
        .map(|i| {
            let c = i.center();
            let a = w.integral(i.lo, c);
            let b = w.integral(c, i.hi);
            (a / b).max(b / a)
        })
        .fold(1.0, f64::max)
}

/// Uniformly placed squares with side `2^-u`, `u` uniform in `[lmin, lmax]`.
pub fn random_squares(seed: u64, n: usize, lmin: f64, lmax: f64) -> Vec<Square> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let side = (-rng.random_range(lmin..=lmax)).exp2();
            Square::new(rng.random::<f64>(), rng.random::<f64>(), side)
        })
        .collect()
}

pub fn random_intervals(seed: u64, n: usize, lmin: f64, lmax: f64) -> Vec<Interval> {
    random_squares(seed, n, lmin, lmax)
        .into_iter()
        .map(|s| s.horizontal())
        .collect()
}

/// Dyadic squares `I × [0, ℓ)` for `I ∈ 𝒟([0,1))` down to `max_level`, plus
/// their half-shifted translates.
pub fn dyadic_square_family(max_level: u32, shifted: bool) -> Vec<Square> {
    let mut out = Vec::new();
    for i in DyadicInterval::grid(max_level as i32) {
        out.push(Square::new(i.left(), 0.0, i.len()));
        if shifted {
            out.push(Square::new(i.left() + 0.5 * i.len(), 0.5 * i.len(), i.len()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: f64, l: u32) -> StepWeight1D {
        StepWeight1D::constant(v, l)
    }

    #[test]
    fn scalar_constants() {
        let fam = CubeFamily::dyadic_grid(3);
        let r = scalar_ap(&c(1.0, 3), &c(1.0, 3), 3.0, &fam).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        let r = scalar_ap(&c(2.0, 3), &c(0.5, 3), 2.0, &fam).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        assert_eq!(r.kind, ReportKind::ExactMax);
    }

    #[test]
    fn scalar_dyadic_matches_enumeration() {
        let s = StepWeight1D::from_cells(6, |i| 1.0 + (i % 7) as f64).unwrap();
        let w = StepWeight1D::from_cells(6, |i| 0.5 + ((i * 5) % 3) as f64).unwrap();
        let fast = scalar_ap_dyadic(&s, &w, 4.0, 6).value;
        let slow = scalar_ap(&s, &w, 4.0, &CubeFamily::dyadic_grid(6)).unwrap().value;
        assert!((fast - slow).abs() < 1e-13 * slow);
    }

    #[test]
    fn scalar_monotone_in_family() {
        let s = StepWeight1D::from_cells(5, |i| 1.0 + (i % 3) as f64).unwrap();
        let w = StepWeight1D::from_cells(5, |i| 2.0 - (i % 2) as f64).unwrap();
        let a = scalar_ap_dyadic(&s, &w, 2.0, 2).value;
        let b = scalar_ap_dyadic(&s, &w, 2.0, 5).value;
        assert!(a <= b);
    }

    #[test]
    fn quadratic_single_unit() {
        let fam = CoefficientFamily::new(vec![(DyadicInterval::UNIT, 1.0)]);
        let r = quadratic_ap_functional(&c(1.0, 2), &c(1.0, 2), 4.0, &fam).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        assert_eq!(r.kind, ReportKind::LowerBound);
    }

    #[test]
    fn quadratic_p2_single_interval() {
        let s = StepWeight1D::from_cells(4, |i| 1.0 + i as f64).unwrap();
        let w = StepWeight1D::from_cells(4, |i| 3.0 / (1.0 + i as f64)).unwrap();
        let j = DyadicInterval::new(2, 1);
        let fam = CoefficientFamily::new(vec![(j, 0.7)]);
        let r = quadratic_ap_functional(&s, &w, 2.0, &fam).unwrap();
        let expect = s.mean(&j).powi(2) * w.mass(&j) / s.mass(&j);
        assert!((r.value.powi(2) - expect).abs() < 1e-13 * expect);
    }

    #[test]
    fn quadratic_disjoint_pair_closed_form() {
        let s = StepWeight1D::from_cells(3, |i| 1.0 + i as f64).unwrap();
        let w = StepWeight1D::from_cells(3, |i| 9.0 - i as f64).unwrap();
        let (j1, j2) = (DyadicInterval::new(2, 0), DyadicInterval::new(2, 3));
        let (a1, a2) = (1.3f64, 0.4f64);
        let p = 4.0;
        let fam = CoefficientFamily::new(vec![(j1, a1), (j2, a2)]);
        let r = quadratic_ap_functional(&s, &w, p, &fam).unwrap();
        // disjoint supports: each term contributes |a|^p (Eσ)^p |J|_ω and |a|^p |J|_σ
        let num = a1.powf(p) * s.mean(&j1).powf(p) * w.mass(&j1)
            + a2.powf(p) * s.mean(&j2).powf(p) * w.mass(&j2);
        let den = a1.powf(p) * s.mass(&j1) + a2.powf(p) * s.mass(&j2);
        assert!((r.value - (num / den).powf(1.0 / p)).abs() < 1e-13);
    }

    #[test]
    fn quadratic_zero_rejected() {
        let fam = CoefficientFamily::new(vec![(DyadicInterval::UNIT, 0.0)]);
        assert!(quadratic_ap_functional(&c(1.0, 2), &c(1.0, 2), 4.0, &fam).is_err());
    }

    #[test]
    fn offset_reduces_and_constant() {
        let s = StepWeight1D::from_cells(4, |i| 1.0 + (i % 5) as f64).unwrap();
        let w = StepWeight1D::from_cells(4, |i| 2.0 + (i % 3) as f64).unwrap();
        let js = [DyadicInterval::new(1, 0), DyadicInterval::new(3, 5)];
        let terms: Vec<_> = js.iter().map(|&j| OffsetTerm { j, j_star: j, a: 1.5 }).collect();
        let fam = CoefficientFamily::new(js.iter().map(|&j| (j, 1.5)).collect());
        let a = offset_ap_functional(&s, &w, 4.0, &terms, 3.0).unwrap().value;
        let b = quadratic_ap_functional(&s, &w, 4.0, &fam).unwrap().value;
        assert!((a - b).abs() < 1e-14);

        let adj = [OffsetTerm {
            j: DyadicInterval::new(2, 1),
            j_star: DyadicInterval::new(2, 2),
            a: 1.0,
        }];
        let v = offset_ap_functional(&c(1.0, 4), &c(1.0, 4), 4.0, &adj, 3.0).unwrap().value;
        assert!((v - 1.0).abs() < 1e-14);
        let far = [OffsetTerm {
            j: DyadicInterval::new(3, 0),
            j_star: DyadicInterval::new(3, 7),
            a: 1.0,
        }];
        assert!(offset_ap_functional(&c(1.0, 4), &c(1.0, 4), 4.0, &far, 3.0).is_err());
    }

    #[test]
    fn two_tailed_lebesgue_series() {
        let one = TensorWeight2D::new(c(1.0, 0));
        let q = Square::new(0.0, 0.0, 1.0);
        // |2^{l+1}Q| = 4^{l+1}; upper integrand weight (2/(2^l+1))^{np}
        let p = 2.0;
        let series: f64 = 4.0
            + (1..200)
                .map(|l| (2.0 / ((l as f64).exp2() + 1.0)).powf(2.0 * p) * 3.0 * 4f64.powi(l))
                .sum::<f64>();
        let (_, up40) = tail_integral_bounds(&one, &q, p, 40, 4.0).unwrap();
        assert!((up40 - series).abs() < 1e-12 * series);
        let (lo5, up5) = tail_integral_bounds(&one, &q, p, 5, 4.0).unwrap();
        assert!(up5 >= series && lo5 <= series);
    }

    #[test]
    fn two_tailed_zero_and_divergence() {
        let one = TensorWeight2D::new(c(1.0, 0));
        let zero = TensorWeight2D::new(c(0.0, 0));
        let fam = [Square::new(0.0, 0.0, 0.5)];
        let r = two_tailed_ap_estimate(&one, &zero, 4.0, &fam, 6, (4.0, 4.0)).unwrap();
        assert_eq!(r.upper.value, 0.0);
        assert!(two_tailed_ap_estimate(&one, &one, 4.0 / 3.0, &fam, 6, (6.0, 6.0)).is_err());
    }

    #[test]
    fn rect_constant_and_errors() {
        let one = TensorWeight2D::new(c(1.0, 0));
        let fam = CoefficientFamily::new(vec![(DyadicInterval::new(2, 1), 1.0)]);
        let r = rect_quadratic_functional(&one, &one, 4, &fam).unwrap();
        assert!((r.value - 1.0).abs() < 1e-14);
        assert!(rect_quadratic_functional(&one, &one, 3, &fam).is_err());
        let zero = CoefficientFamily::new(vec![(DyadicInterval::UNIT, 0.0)]);
        assert!(rect_quadratic_functional(&one, &one, 4, &zero).is_err());
    }

    #[test]
    fn rect_matches_brute_force_grid() {
        let s = TensorWeight2D::new(StepWeight1D::from_cells(3, |i| 1.0 + i as f64).unwrap());
        let w = TensorWeight2D::new(StepWeight1D::from_cells(3, |i| 4.0 - 0.3 * i as f64).unwrap());
        let fam = CoefficientFamily::new(vec![
            (DyadicInterval::new(0, 0), 1.0),
            (DyadicInterval::new(1, 1), 2.0),
            (DyadicInterval::new(3, 6), 0.5),
        ]);
        let r = rect_quadratic_functional(&s, &w, 4, &fam).unwrap();
        // midpoint grid in x1 (cells of 1/8) and x2 (step 1/64 over [0, 111))
        let (mut num, mut den) = (0.0, 0.0);
        let h2 = 1.0 / 64.0;
        for cell in 0..8 {
            let x1 = (cell as f64 + 0.5) / 8.0;
            let mut x2 = 0.5 * h2;
            while x2 < 111.0 {
                let (mut sn, mut sd) = (0.0, 0.0);
                for (j, a) in &fam.entries {
                    let l = j.len();
                    if x1 >= j.left() && x1 < j.right() && x2 >= 10.0 * l && x2 < 10.0 * l + 100.0 {
                        sn += a * a * s.horizontal.mean(j).powi(2);
                        sd += a * a;
                    }
                }
                num += sn * sn * w.horizontal.value_at(x1) / 8.0 * h2;
                den += sd * sd * s.horizontal.value_at(x1) / 8.0 * h2;
                x2 += h2;
            }
        }
        let brute = (num / den).powf(0.25);
        assert!((r.value - brute).abs() < 1e-9 * brute, "{} vs {}", r.value, brute);
        assert!(r.params["reduction_factor"] <= 4.0);
    }

    #[test]
    fn whitney_depth_one_and_scan() {
        let d = whitney_product_cells(DyadicInterval::new(0, 0), DyadicInterval::new(0, 1), 1).unwrap();
        assert!(d.chain.contains(&(DyadicInterval::new(1, 1), DyadicInterval::new(1, 2))));
        assert_eq!(d.cells, vec![(DyadicInterval::new(1, 0), DyadicInterval::new(1, 3))]);

        let d = whitney_product_cells(DyadicInterval::new(0, 0), DyadicInterval::new(0, 1), 6).unwrap();
        for (a, b) in &d.cells {
            let r = a.dist(b) / b.len();
            assert!((WHITNEY_C1..=WHITNEY_C2).contains(&r));
            assert_eq!(a.level, b.level);
        }
        for (i, x) in d.cells.iter().enumerate() {
            for y in &d.cells[i + 1..] {
                assert!(!x.0.intersects(&y.0) && !x.1.intersects(&y.1));
            }
        }
        assert!(whitney_product_cells(DyadicInterval::new(0, 0), DyadicInterval::new(0, 2), 3).is_err());
    }

    #[test]
    fn whitney_coverage_tends_to_one() {
        let mut prev = 0.0;
        for depth in [2, 4, 8, 16] {
            let d = whitney_product_cells(DyadicInterval::new(3, 5), DyadicInterval::new(3, 4), depth).unwrap();
            let f = d.covered_fraction();
            assert!((f - (1.0 - 4f64.powi(-(depth as i32)))).abs() < 1e-15);
            assert!(f > prev);
            prev = f;
            assert!((d.cell_fraction() - (1.0 - 4f64.powi(-(depth as i32))) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn full_testing_combination() {
        let t = CharacteristicReport::new("t", 0.0, ReportKind::LowerBound, "x");
        let a = CharacteristicReport::new("a", 0.0, ReportKind::UpperBound, "x");
        assert_eq!(full_testing_bound(&t, &a, 4.0).value, 0.0);
    }
}
