//! Dyadic intervals, step weights on `[0,1)`, Haar coefficients and
//! martingale projections.
//!
//! A [`StepWeight1D`] keeps a pyramid of cell means so that every dyadic
//! average is a pairwise sum rather than a difference of prefix sums.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[index·2^-level, (index+1)·2^-level)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub level: i32,
    pub index: i64,
}

impl DyadicInterval {
    pub const UNIT: DyadicInterval = DyadicInterval { level: 0, index: 0 };

    pub fn new(level: i32, index: i64) -> Self {
        Self { level, index }
    }

    pub fn len(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    pub fn left(&self) -> f64 {
        self.index as f64 * self.len()
    }

    pub fn right(&self) -> f64 {
        (self.index + 1) as f64 * self.len()
    }

    pub fn center(&self) -> f64 {
        (self.index as f64 + 0.5) * self.len()
    }

    pub fn parent(&self) -> Self {
        Self::new(self.level - 1, self.index.div_euclid(2))
    }

    pub fn children(&self) -> (Self, Self) {
        (
            Self::new(self.level + 1, 2 * self.index),
            Self::new(self.level + 1, 2 * self.index + 1),
        )
    }

    pub fn sibling(&self) -> Self {
        Self::new(self.level, self.index ^ 1)
    }

    pub fn is_left_child(&self) -> bool {
        self.index.rem_euclid(2) == 0
    }

    /// Ancestor (or self) at a coarser `level`.
    pub fn ancestor_at(&self, level: i32) -> Self {
        debug_assert!(level <= self.level);
        let shift = (self.level - level) as u32;
        Self::new(level, self.index >> shift.min(63))
    }

    /// `self ⊇ other`.
    pub fn contains(&self, other: &Self) -> bool {
        other.level >= self.level && other.ancestor_at(self.level) == *self
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.contains(other) || other.contains(self)
    }

    /// Index range of the descendants at `level`.
    pub fn descendant_range(&self, level: i32) -> std::ops::Range<i64> {
        debug_assert!(level >= self.level);
        let shift = (level - self.level) as u32;
        (self.index << shift)..((self.index + 1) << shift)
    }

    pub fn descendants(&self, level: i32) -> impl Iterator<Item = DyadicInterval> {
        self.descendant_range(level).map(move |i| Self::new(level, i))
    }

    /// Dyadic interval of `level` containing the point `x`.
    pub fn containing(x: f64, level: i32) -> Self {
        Self::new(level, (x * (level as f64).exp2()).floor() as i64)
    }

    /// Gap between the intervals, zero if they touch or overlap.
    pub fn dist(&self, other: &Self) -> f64 {
        (other.left() - self.right()).max(self.left() - other.right()).max(0.0)
    }

    /// Translate by an integer, used for periodic reduction.
    pub fn reduce_mod1(&self) -> Self {
        if self.level <= 0 {
            return Self::UNIT;
        }
        Self::new(self.level, self.index.rem_euclid(1i64 << self.level))
    }

    /// All intervals of `𝒟([0,1))` with level in `0..=max_level`.
    pub fn grid(max_level: i32) -> impl Iterator<Item = DyadicInterval> {
        (0..=max_level).flat_map(|l| Self::UNIT.descendants(l))
    }
}

/// Free-function form of [`DyadicInterval::children`].
pub fn children(i: DyadicInterval) -> (DyadicInterval, DyadicInterval) {
    i.children()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawWeight {
    base_level: u32,
    values: Vec<f64>,
    periodic: bool,
}

/// Piecewise constant function on `[0,1)` with `2^base_level` cells.
///
/// Non-periodic weights vanish outside `[0,1)`; periodic ones repeat.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawWeight", into = "RawWeight")]
pub struct StepWeight1D {
    base_level: u32,
    periodic: bool,
    // pyramid[t][i] = mean over the i-th interval of level t; pyramid[base_level] = cells
    pyramid: Vec<Vec<f64>>,
}

impl TryFrom<RawWeight> for StepWeight1D {
    type Error = Error;
    fn try_from(r: RawWeight) -> Result<Self> {
        let mut w = Self::new(r.base_level, r.values)?;
        w.periodic = r.periodic;
        Ok(w)
    }
}

impl From<StepWeight1D> for RawWeight {
    fn from(w: StepWeight1D) -> Self {
        RawWeight {
            base_level: w.base_level,
            periodic: w.periodic,
            values: w.pyramid.into_iter().last().unwrap_or_default(),
        }
    }
}

impl PartialEq for StepWeight1D {
    fn eq(&self, other: &Self) -> bool {
        self.base_level == other.base_level
            && self.periodic == other.periodic
            && self.values() == other.values()
    }
}

impl StepWeight1D {
    pub fn new(base_level: u32, values: Vec<f64>) -> Result<Self> {
        if base_level > 30 || values.len() != 1usize << base_level {
            return Err(Error::CellCount {
                level: base_level,
                got: values.len(),
            });
        }
        let mut pyramid = vec![values];
        while pyramid[0].len() > 1 {
            let fine = &pyramid[0];
            let coarse: Vec<f64> = fine.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect();
            pyramid.insert(0, coarse);
        }
        Ok(Self {
            base_level,
            periodic: false,
            pyramid,
        })
    }

    pub fn constant(c: f64, base_level: u32) -> Self {
        Self::new(base_level, vec![c; 1 << base_level]).expect("level in range")
    }

    /// Cell values from a function of the cell index.
    pub fn from_cells(base_level: u32, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(base_level, (0..1usize << base_level).map(f).collect())
    }

    pub fn with_periodic(mut self, periodic: bool) -> Self {
        self.periodic = periodic;
        self
    }

    pub fn base_level(&self) -> u32 {
        self.base_level
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    pub fn values(&self) -> &[f64] {
        &self.pyramid[self.base_level as usize]
    }

    pub fn cell_len(&self) -> f64 {
        (-(self.base_level as f64)).exp2()
    }

    /// Means over all intervals of level `t ≤ base_level`.
    pub fn level_means(&self, t: u32) -> &[f64] {
        &self.pyramid[t.min(self.base_level) as usize]
    }

    pub fn min_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_weight(&self) -> bool {
        self.min_value() > 0.0
    }

    /// Mean over `[0,1)`.
    pub fn total_mean(&self) -> f64 {
        self.pyramid[0][0]
    }

    /// Integral over `[0,1)`, equal to the mean.
    pub fn total(&self) -> f64 {
        self.total_mean()
    }

    /// Average `E_I G`.
    pub fn mean(&self, i: &DyadicInterval) -> f64 {
        if i.level < 0 {
            if self.periodic {
                return self.total_mean();
            }
            // [0,1) sits inside I when I covers the origin from the right
            let inside = i.contains(&DyadicInterval::UNIT);
            return if inside { self.total_mean() / i.len() } else { 0.0 };
        }
        let n = 1i64 << i.level;
        let idx = if self.periodic {
            i.index.rem_euclid(n)
        } else if i.index < 0 || i.index >= n {
            return 0.0;
        } else {
            i.index
        };
        if i.level as u32 <= self.base_level {
            self.pyramid[i.level as usize][idx as usize]
        } else {
            let shift = i.level as u32 - self.base_level;
            self.values()[(idx >> shift) as usize]
        }
    }

    /// `|I|_G`.
    pub fn mass(&self, i: &DyadicInterval) -> f64 {
        self.mean(i) * i.len()
    }

    /// Value at a point (periodic reduction when periodic, zero outside otherwise).
    pub fn value_at(&self, x: f64) -> f64 {
        let y = if self.periodic { x - x.floor() } else { x };
        if !(0.0..1.0).contains(&y) {
            return 0.0;
        }
        let n = self.values().len();
        let k = ((y * n as f64) as usize).min(n - 1);
        self.values()[k]
    }

    /// `∫_x^y G` for `x ≤ y`, any real endpoints.
    pub fn integral(&self, x: f64, y: f64) -> f64 {
        if y <= x {
            return 0.0;
        }
        if self.periodic {
            let fx = x.floor();
            let fy = y.floor();
            if fx == fy {
                return self.integral_unit(x - fx, y - fx);
            }
            let whole = (fy - fx - 1.0).max(0.0) * self.total_mean();
            return self.integral_unit(x - fx, 1.0) + whole + self.integral_unit(0.0, y - fy);
        }
        self.integral_unit(x.max(0.0), y.min(1.0))
    }

    // ∫_x^y over [0,1) via cell decomposition: partial end cells plus a dyadic cover
    fn integral_unit(&self, x: f64, y: f64) -> f64 {
        if y <= x {
            return 0.0;
        }
        let n = self.values().len();
        let h = self.cell_len();
        let vals = self.values();
        let a = ((x / h).floor() as usize).min(n - 1);
        let b = ((y / h).ceil() as usize).clamp(1, n);
        if b - a == 1 {
            return vals[a] * (y - x);
        }
        let head = vals[a] * ((a + 1) as f64 * h - x);
        let tail = vals[b - 1] * (y - (b - 1) as f64 * h);
        head + tail + self.cell_range_sum(a + 1, b - 1) * h
    }

    /// `Σ_{c ∈ [lo, hi)} value_c` via a canonical dyadic cover.
    pub fn cell_range_sum(&self, mut lo: usize, hi: usize) -> f64 {
        let mut s = 0.0;
        let base = self.base_level as usize;
        while lo < hi {
            let mut k = 0usize;
            while k < base && lo.is_multiple_of(1 << (k + 1)) && lo + (1 << (k + 1)) <= hi {
                k += 1;
            }
            s += self.pyramid[base - k][lo >> k] * (1usize << k) as f64;
            lo += 1 << k;
        }
        s
    }

    /// Re-express on a finer grid (no-op if `level ≤ base_level`).
    pub fn refine(&self, level: u32) -> Self {
        if level <= self.base_level {
            return self.clone();
        }
        let r = 1usize << (level - self.base_level);
        let vals = self
            .values()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, r))
            .collect();
        Self::new(level, vals)
            .expect("level in range")
            .with_periodic(self.periodic)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.base_level, self.values().iter().map(|&v| f(v)).collect())
            .expect("same length")
            .with_periodic(self.periodic)
    }

    /// Haar coefficient `⟨G, h_I⟩ = |I|^{-1/2}(|I₊|_G − |I₋|_G)`.
    pub fn haar_coefficient(&self, i: &DyadicInterval) -> f64 {
        let (l, r) = i.children();
        (self.mass(&r) - self.mass(&l)) / i.len().sqrt()
    }

    /// Haar expansion over levels `< base_level`.
    pub fn haar_table(&self) -> HaarCoefficientTable {
        let coeffs = DyadicInterval::grid(self.base_level as i32 - 1)
            .map(|i| (i, self.haar_coefficient(&i)))
            .collect();
        HaarCoefficientTable {
            base_level: self.base_level,
            mean: self.total_mean(),
            coeffs,
        }
    }
}

/// `𝔼_t G`: averages on `𝒟_t`, expressed at level `min(t, base_level)`.
pub fn martingale_project(g: &StepWeight1D, t: u32) -> StepWeight1D {
    if t >= g.base_level {
        return g.clone();
    }
    StepWeight1D::new(t, g.level_means(t).to_vec())
        .expect("pyramid level")
        .with_periodic(g.periodic)
}

/// Haar coefficient of `g` on `i`.
pub fn haar_coefficient(g: &StepWeight1D, i: &DyadicInterval) -> f64 {
    g.haar_coefficient(i)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HaarCoefficientTable {
    pub base_level: u32,
    pub mean: f64,
    pub coeffs: BTreeMap<DyadicInterval, f64>,
}

impl HaarCoefficientTable {
    /// Mean plus Haar series, evaluated on every cell.
    pub fn reconstruct(&self) -> StepWeight1D {
        let n = 1usize << self.base_level;
        let mut vals = vec![self.mean; n];
        for (i, c) in &self.coeffs {
            let amp = c / i.len().sqrt();
            let (l, r) = i.children();
            for k in l.descendant_range(self.base_level as i32) {
                vals[k as usize] -= amp;
            }
            for k in r.descendant_range(self.base_level as i32) {
                vals[k as usize] += amp;
            }
        }
        StepWeight1D::new(self.base_level, vals).expect("cell count")
    }
}

/// Worst sibling mass ratio over the family.
pub fn doubling_ratio(g: &StepWeight1D, family: &[DyadicInterval]) -> Result<f64> {
    if family.is_empty() {
        return Err(Error::EmptyFamily);
    }
    Ok(family
        .iter()
        .map(|j| sibling_ratio(g, j))
        .fold(1.0, f64::max))
}

/// `max(|J₋|/|J₊|, |J₊|/|J₋|)`; 1 when both vanish.
pub fn sibling_ratio(g: &StepWeight1D, j: &DyadicInterval) -> f64 {
    let (l, r) = j.children();
    let (a, b) = (g.mass(&l), g.mass(&r));
    if a == 0.0 && b == 0.0 {
        1.0
    } else if a == 0.0 || b == 0.0 {
        f64::INFINITY
    } else {
        (a / b).max(b / a)
    }
}

/// Dyadic doubling ratio over all of `𝒟([0,1))` with level `< max_level`.
pub fn dyadic_doubling(g: &StepWeight1D, max_level: u32) -> f64 {
    let top = max_level.min(g.base_level);
    (0..top)
        .map(|t| {
            g.level_means(t + 1)
                .chunks(2)
                .map(|c| (c[0] / c[1]).max(c[1] / c[0]))
                .fold(1.0, f64::max)
        })
        .fold(1.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(level: u32, v: &[f64]) -> StepWeight1D {
        StepWeight1D::new(level, v.to_vec()).unwrap()
    }

    #[test]
    fn children_arithmetic() {
        let (a, b) = children(DyadicInterval::UNIT);
        assert_eq!((a.left(), a.right(), b.left(), b.right()), (0.0, 0.5, 0.5, 1.0));
        let (a, b) = DyadicInterval::new(1, 1).children();
        assert_eq!((a, b), (DyadicInterval::new(2, 2), DyadicInterval::new(2, 3)));
        let (a, b) = DyadicInterval::new(0, -1).children();
        assert_eq!((a, b), (DyadicInterval::new(1, -2), DyadicInterval::new(1, -1)));
    }

    #[test]
    fn negative_parent_closure() {
        let i = DyadicInterval::new(-2, -3);
        assert_eq!(i.children().0.parent(), i);
        assert_eq!(i.children().1.parent(), i);
        assert!(i.contains(&i.children().1));
    }

    #[test]
    fn project_small_cases() {
        let g = w(1, &[1.0, 3.0]);
        let p = martingale_project(&g, 0);
        assert_eq!(p.values(), &[2.0]);
        assert_eq!(martingale_project(&g, 5), g);
        let c = StepWeight1D::constant(4.0, 6);
        assert!(martingale_project(&c, 3).values().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn haar_examples() {
        let g = w(1, &[0.0, 1.0]);
        assert_eq!(g.haar_coefficient(&DyadicInterval::UNIT), 0.5);
        let c = StepWeight1D::constant(3.0, 4);
        assert_eq!(c.haar_coefficient(&DyadicInterval::new(2, 1)), 0.0);
    }

    #[test]
    fn doubling_examples() {
        let g = w(1, &[1.0, 3.0]);
        assert_eq!(doubling_ratio(&g, &[DyadicInterval::UNIT]).unwrap(), 3.0);
        assert_eq!(dyadic_doubling(&g, 5), 3.0);
        let c = StepWeight1D::constant(2.0, 5);
        assert_eq!(dyadic_doubling(&c, 5), 1.0);
        assert!(matches!(doubling_ratio(&g, &[]), Err(Error::EmptyFamily)));
    }

    #[test]
    fn doubling_matches_enumeration() {
        let g = StepWeight1D::from_cells(6, |i| 1.0 + ((i * 37) % 11) as f64).unwrap();
        let fam: Vec<_> = DyadicInterval::grid(5).collect();
        let brute = fam
            .iter()
            .map(|j| {
                let (l, r) = j.children();
                let a: f64 = l.descendant_range(6).map(|k| g.values()[k as usize]).sum();
                let b: f64 = r.descendant_range(6).map(|k| g.values()[k as usize]).sum();
                (a / b).max(b / a)
            })
            .fold(1.0, f64::max);
        assert!((doubling_ratio(&g, &fam).unwrap() - brute).abs() < 1e-12 * brute);
        assert!((dyadic_doubling(&g, 6) - brute).abs() < 1e-12 * brute);
    }

    #[test]
    fn periodic_integrals() {
        let g = w(2, &[1.0, 2.0, 3.0, 4.0]).with_periodic(true);
        assert!((g.integral(-1.0, 2.0) - 3.0 * 2.5).abs() < 1e-14);
        assert!((g.integral(0.9, 1.1) - (0.1 * 4.0 + 0.1 * 1.0)).abs() < 1e-14);
        assert_eq!(g.mean(&DyadicInterval::new(2, -1)), 4.0);
        assert_eq!(g.mean(&DyadicInterval::new(-3, 5)), 2.5);
        let h = w(2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(h.mean(&DyadicInterval::new(2, 4)), 0.0);
        assert_eq!(h.integral(-1.0, 2.0), 2.5);
    }

    #[test]
    fn json_shape() {
        let g = w(1, &[0.25, 1.0 / 3.0]).with_periodic(true);
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"base_level\":1") && s.contains("\"periodic\":true"));
        let back: StepWeight1D = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    fn weight_strategy() -> impl Strategy<Value = StepWeight1D> {
        (1u32..8).prop_flat_map(|l| {
            prop::collection::vec(0.01f64..100.0, 1usize << l)
                .prop_map(move |v| StepWeight1D::new(l, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn partition_sums(g in weight_strategy()) {
            for t in 0..=g.base_level() {
                let s: f64 = DyadicInterval::UNIT.descendants(t as i32).map(|i| g.mass(&i)).sum();
                prop_assert!((s - g.total()).abs() <= 1e-12 * g.total());
            }
        }

        #[test]
        fn haar_reconstruction(g in weight_strategy()) {
            let r = g.haar_table().reconstruct();
            for (a, b) in r.values().iter().zip(g.values()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn projections_compose(g in weight_strategy(), s in 0u32..8, t in 0u32..8) {
            let a = martingale_project(&martingale_project(&g, t), s);
            let b = martingale_project(&g, s.min(t));
            prop_assert_eq!(a.base_level(), b.base_level());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs());
            }
        }

        #[test]
        fn integral_additive(g in weight_strategy(), x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let mut v = [x, y, z];
            v.sort_by(f64::total_cmp);
            let lhs = g.integral(v[0], v[2]);
            let rhs = g.integral(v[0], v[1]) + g.integral(v[1], v[2]);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1e-300));
        }
    }
}
