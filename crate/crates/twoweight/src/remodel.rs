//! Remodeling with transition intervals.
//!
//! A schedule `k = (0, k₁, k₂, …)` defines grids `𝒦_t = 𝒟_{K_t}` with
//! `K_t = k₀ + … + k_t`. Inside each cell of `𝒦_t` the `𝒦_{t+1}` children
//! alternate between the left and right child of the cell's supervisor, so
//! the averages of `G̃` are transplanted onto high-frequency families. The two
//! children nearest each endpoint of a surviving cell are transition cells:
//! there the construction stops and the weight keeps the value of the
//! parent's supervisor, which is what upgrades dyadic doubling to doubling.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{ap_product, quadratic_ap_functional, CoefficientFamily};
use crate::dyadic::{DyadicInterval, StepWeight1D};
use crate::error::{Error, Result};

pub const MAX_TOTAL_LEVEL: u32 = 26;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleK {
    /// `k[0] = 0`, `k[t] ≥ 2` afterwards.
    pub k: Vec<u32>,
    /// Step level of the weight being remodeled.
    pub m: u32,
}

impl ScheduleK {
    pub fn new(k: Vec<u32>, m: u32) -> Result<Self> {
        let s = Self { k, m };
        s.validate()?;
        Ok(s)
    }

    /// `(0, k, …, k)` with `m` remodeled levels.
    pub fn uniform(k: u32, m: u32) -> Result<Self> {
        Self::new(std::iter::once(0).chain(std::iter::repeat_n(k, m as usize)).collect(), m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.first() != Some(&0) {
            return Err(Error::Config("schedule must start with k0 = 0".into()));
        }
        if let Some(t) = self.k.iter().skip(1).position(|&k| k < 2) {
            return Err(Error::Config(format!("k{} = {} is below 2", t + 1, self.k[t + 1])));
        }
        if self.cumulative(self.levels()) > MAX_TOTAL_LEVEL {
            return Err(Error::TooLarge(self.cumulative(self.levels())));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        self.k.len() as u32 - 1
    }

    /// `K_t`.
    pub fn cumulative(&self, t: u32) -> u32 {
        self.k[..=t as usize].iter().sum()
    }

    pub fn prefix(&self, t: u32) -> Self {
        Self {
            k: self.k[..=t as usize].to_vec(),
            m: self.m,
        }
    }

    /// `t` with `K_t = level`, if `level` is a grid level.
    pub fn grid_index(&self, level: i32) -> Option<u32> {
        (0..=self.levels()).find(|&t| self.cumulative(t) as i32 == level)
    }

    /// Position of the `𝒦_t` ancestor of `cell` inside its `𝒦_{t-1}` parent.
    fn block(&self, cell: &DyadicInterval, t: u32) -> i64 {
        let a = cell.ancestor_at(self.cumulative(t) as i32);
        a.index.rem_euclid(1 << self.k[t as usize])
    }

    fn is_transition_block(&self, b: i64, t: u32) -> bool {
        let n = 1i64 << self.k[t as usize];
        b < 2 || b >= n - 2
    }

    /// `supr(J)` for `J ∈ 𝒦`, reduced mod 1.
    pub fn supervisor(&self, j: &DyadicInterval) -> Option<DyadicInterval> {
        let t = self.grid_index(j.level)?;
        let mut sup = DyadicInterval::UNIT;
        for s in 1..=t {
            let (l, r) = sup.children();
            sup = if self.block(j, s) & 1 == 1 { r } else { l };
        }
        Some(sup)
    }

    /// First `t` with the `𝒦_t` ancestor of `cell` a transition cell.
    pub fn cut_level(&self, cell: &DyadicInterval, upto: u32) -> Option<u32> {
        (1..=upto).find(|&t| self.cumulative(t) as i32 <= cell.level && self.is_transition_block(self.block(cell, t), t))
    }

    /// `J ∈ 𝒦̂`.
    pub fn survives(&self, j: &DyadicInterval) -> bool {
        self.grid_index(j.level)
            .is_some_and(|t| self.cut_level(j, t).is_none())
    }
}

/// `(stop₋, stop₊)`: odd and even positions of `𝒟_k(I)` counted from one.
pub fn level_stopping(i: DyadicInterval, k: u32) -> Result<(Vec<DyadicInterval>, Vec<DyadicInterval>)> {
    if k == 0 {
        return Err(Error::Precondition("stopping depth must be positive".into()));
    }
    let (minus, plus) = i.descendants(i.level + k as i32).partition(|j| j.index & 1 == 0);
    Ok((minus, plus))
}

/// Transition cells and surviving cells of every level inside `[0,1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionLedger {
    pub schedule: ScheduleK,
    /// `transitions[t]` is `𝒯_t`; entry 0 is empty.
    pub transitions: Vec<Vec<DyadicInterval>>,
    /// `survivors[t]` is `𝒦̂_t`.
    pub survivors: Vec<Vec<DyadicInterval>>,
}

pub const LEDGER_CAP: usize = 1 << 22;

impl TransitionLedger {
    pub fn build(schedule: &ScheduleK) -> Result<Self> {
        schedule.validate()?;
        let mut transitions = vec![Vec::new()];
        let mut survivors = vec![vec![DyadicInterval::UNIT]];
        for t in 1..=schedule.levels() {
            let (tr, sv) = transition_family(survivors.last().unwrap(), schedule.k[t as usize])?;
            if sv.len() > LEDGER_CAP {
                return Err(Error::CellCount { level: schedule.cumulative(t), got: sv.len() });
            }
            transitions.push(tr);
            survivors.push(sv);
        }
        Ok(Self {
            schedule: schedule.clone(),
            transitions,
            survivors,
        })
    }

    pub fn transition_mass(&self) -> f64 {
        self.transitions.iter().flatten().map(|j| j.len()).sum()
    }

    /// `Σ_t 2^{2-k_t}`.
    pub fn transition_mass_bound(&self) -> f64 {
        self.schedule.k.iter().skip(1).map(|&k| (2.0 - k as f64).exp2()).sum()
    }

    /// Adjacent transition pairs (periodically) violating the two-level
    /// dichotomy.
    pub fn adjacency_violations(&self) -> Vec<(DyadicInterval, DyadicInterval)> {
        let s = &self.schedule;
        let mut all: Vec<(DyadicInterval, u32)> = self
            .transitions
            .iter()
            .enumerate()
            .flat_map(|(t, v)| v.iter().map(move |&j| (j, t as u32)))
            .collect();
        all.sort_by(|a, b| a.0.left().total_cmp(&b.0.left()));
        let n = all.len();
        let mut bad = Vec::new();
        for i in 0..n {
            let (a, ta) = all[i];
            let (b, tb) = all[(i + 1) % n];
            let wraps = i + 1 == n;
            let touching = if wraps { a.right() == 1.0 && b.left() == 0.0 } else { a.right() == b.left() };
            if !touching {
                continue;
            }
            let ok = if wraps {
                ta == 1 && tb == 1
            } else {
                let common = (0..ta.min(tb))
                    .rev()
                    .find(|&u| {
                        let l = s.cumulative(u) as i32;
                        a.ancestor_at(l) == b.ancestor_at(l)
                    })
                    .unwrap_or(0);
                ta - common <= 2 && tb - common <= 2
            };
            if !ok {
                bad.push((a, b));
            }
        }
        bad
    }
}

/// `(𝒯_{t+1}, 𝒦̂_{t+1})` from `𝒦̂_t`.
pub fn transition_family(
    survivors: &[DyadicInterval],
    k_next: u32,
) -> Result<(Vec<DyadicInterval>, Vec<DyadicInterval>)> {
    if k_next < 2 {
        return Err(Error::Precondition(format!("transition family needs k >= 2, got {k_next}")));
    }
    let n = 1i64 << k_next;
    let mut tr = Vec::with_capacity(4 * survivors.len());
    let mut sv = Vec::with_capacity(survivors.len() * (n as usize - 4));
    for q in survivors {
        for (b, j) in q.descendants(q.level + k_next as i32).enumerate() {
            if (b as i64) < 2 || b as i64 >= n - 2 {
                tr.push(j);
            } else {
                sv.push(j);
            }
        }
    }
    Ok((tr, sv))
}

/// `Osc^R_{k_{t+1}}` on one period, as values on `𝒟_{K_{t+1}}([0,1))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OscFunction {
    pub t: u32,
    pub root: DyadicInterval,
    pub level: u32,
    pub values: Vec<i8>,
}

impl OscFunction {
    pub fn integral(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() * (-(self.level as f64)).exp2()
    }

    /// `(breakpoint, value)` rows, merging equal neighbours.
    pub fn breakpoints(&self) -> Vec<(f64, i8)> {
        let h = (-(self.level as f64)).exp2();
        let mut out: Vec<(f64, i8)> = Vec::new();
        for (c, &v) in self.values.iter().enumerate() {
            if out.last().is_none_or(|l| l.1 != v) {
                out.push((c as f64 * h, v));
            }
        }
        out.push((1.0, self.values.first().copied().unwrap_or(0)));
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["breakpoint", "value"])?;
        for (x, v) in self.breakpoints() {
            wr.write_record([format!("{x:.17e}"), v.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn osc_build(root: DyadicInterval, schedule: &ScheduleK) -> Result<OscFunction> {
    let t = root.level.max(0) as u32;
    if root.level < 0 || !DyadicInterval::UNIT.contains(&root) || t >= schedule.levels() {
        return Err(Error::Precondition(format!("{root:?} needs a level below {}", schedule.levels())));
    }
    let level = schedule.cumulative(t + 1);
    let values = (0..1i64 << level)
        .into_par_iter()
        .map(|c| {
            let cell = DyadicInterval::new(level as i32, c);
            let parent = cell.ancestor_at(schedule.cumulative(t) as i32);
            if !schedule.survives(&parent) || schedule.supervisor(&parent) != Some(root) {
                return 0;
            }
            let b = schedule.block(&cell, t + 1);
            if schedule.is_transition_block(b, t + 1) {
                0
            } else if b & 1 == 1 {
                1
            } else {
                -1
            }
        })
        .collect();
    Ok(OscFunction { t, root, level, values })
}

/// `Ĝ_ℓ`, periodic, on `𝒟_{K_ℓ}`.
pub fn remodel_weight(g: &StepWeight1D, schedule: &ScheduleK, ell: u32) -> Result<StepWeight1D> {
    schedule.validate()?;
    if ell > schedule.levels() {
        return Err(Error::Precondition(format!(
            "{ell} levels requested, schedule has {}",
            schedule.levels()
        )));
    }
    let level = schedule.cumulative(ell);
    let values: Vec<f64> = (0..1i64 << level)
        .into_par_iter()
        .map(|c| {
            let cell = DyadicInterval::new(level as i32, c);
            let mut sup = DyadicInterval::UNIT;
            for t in 1..=ell {
                let b = schedule.block(&cell, t);
                if schedule.is_transition_block(b, t) {
                    break;
                }
                let (l, r) = sup.children();
                sup = if b & 1 == 1 { r } else { l };
            }
            g.mean(&sup)
        })
        .collect();
    if let Some(c) = values.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NotPositive {
            level: level as usize,
            min: values[c],
        });
    }
    Ok(StepWeight1D::new(level, values)?.with_periodic(true))
}

/// `Ĝ` of a step weight: all of its levels remodeled.
pub fn remodel_full(g: &StepWeight1D, schedule: &ScheduleK) -> Result<StepWeight1D> {
    remodel_weight(g, schedule, g.base_level().min(schedule.levels()))
}

/// `Q*` of the locally-constant case analysis for an arbitrary interval.
pub fn locally_constant_witness(lo: f64, hi: f64, schedule: &ScheduleK) -> Result<DyadicInterval> {
    let len = hi - lo;
    if !(len > 0.0) {
        return Err(Error::Precondition("empty interval".into()));
    }
    let Some(t) = (0..=schedule.levels()).find(|&t| (-(schedule.cumulative(t) as f64)).exp2() <= len) else {
        return Err(Error::Precondition("interval finer than the schedule".into()));
    };
    if t <= 1 {
        return Ok(DyadicInterval::UNIT);
    }
    // transition cells of levels 1..t-1 meeting [lo, hi)
    let mut hits: Vec<(DyadicInterval, u32)> = Vec::new();
    let fine = schedule.cumulative(t - 1) as i32;
    let (a, b) = (
        DyadicInterval::containing(lo, fine).index,
        DyadicInterval::containing(hi - len * 1e-12, fine).index,
    );
    for c in a..=b {
        let cell = DyadicInterval::new(fine, c);
        if let Some(u) = schedule.cut_level(&cell.reduce_mod1(), t - 1) {
            let tr = cell.ancestor_at(schedule.cumulative(u) as i32);
            if !hits.iter().any(|h| h.0 == tr) {
                hits.push((tr, u));
            }
        }
    }
    let k_parent = |j: &DyadicInterval, u: u32| j.ancestor_at(schedule.cumulative(u - 1) as i32);
    match hits.as_slice() {
        [] => Ok(DyadicInterval::containing(lo, schedule.cumulative(t - 2) as i32)),
        [(tr, u)] => Ok(k_parent(tr, *u)),
        [(t1, u1), (t2, u2), ..] => {
            let common = (0..(*u1).min(*u2)).rev().find(|&u| {
                let l = schedule.cumulative(u) as i32;
                t1.ancestor_at(l) == t2.ancestor_at(l)
            });
            Ok(match common {
                Some(u) => t1.ancestor_at(schedule.cumulative(u) as i32),
                None => DyadicInterval::UNIT,
            })
        }
    }
}

/// Largest ratio `E_J/E_I` or `E_I/E_J` over parents `I` and children `J`.
pub fn parent_child_ratio(g: &StepWeight1D) -> f64 {
    let mut rho = 1.0f64;
    for i in DyadicInterval::grid(g.base_level() as i32 - 1) {
        let e = g.mean(&i);
        let (l, r) = i.children();
        for c in [l, r] {
            let v = g.mean(&c);
            rho = rho.max(v / e).max(e / v);
        }
    }
    rho
}

/// Dyadic weight whose sibling means differ by the factor `1 + τ` exactly,
/// with the heavier side chosen at random.
pub fn tau_doubling_weight(tau: f64, m: u32, seed: u64) -> Result<StepWeight1D> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tau = {tau} must be nonnegative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = tau / (2.0 + tau);
    let mut vals = vec![1.0f64];
    for _ in 0..m {
        vals = vals
            .iter()
            .flat_map(|&v| {
                let s = if rng.random::<bool>() { delta } else { -delta };
                [v * (1.0 - s), v * (1.0 + s)]
            })
            .collect();
    }
    StepWeight1D::new(m, vals)
}

/// `A_p` over `𝒦([0,1))` cells of the grid levels up to `ℓ`.
pub fn ap_over_k(sigma: &StepWeight1D, omega: &StepWeight1D, p: f64, schedule: &ScheduleK, ell: u32) -> f64 {
    let mut best = 0.0f64;
    for t in 0..=ell.min(schedule.levels()) {
        for j in DyadicInterval::UNIT.descendants(schedule.cumulative(t) as i32) {
            best = best.max(ap_product(sigma.mean(&j), omega.mean(&j), p));
        }
    }
    best
}

/// `{J ∈ 𝒦̂_t : supr(J) = I}` for `I ∈ 𝒟_t([0,1))`.
pub fn supervised_survivors(i: &DyadicInterval, schedule: &ScheduleK) -> Result<Vec<DyadicInterval>> {
    if i.level < 0 || !DyadicInterval::UNIT.contains(i) || i.level as u32 > schedule.levels() {
        return Err(Error::Precondition(format!("{i:?} is not supervised by the schedule")));
    }
    let t = i.level as u32;
    let mut cur = vec![DyadicInterval::UNIT];
    for s in 1..=t {
        let bit = (i.index >> (t - s)) & 1;
        let k = schedule.k[s as usize];
        let n = 1i64 << k;
        let mut next = Vec::with_capacity(cur.len() * (n as usize / 2));
        for q in &cur {
            let base = q.index << k;
            next.extend((2..n - 2).filter(|b| b & 1 == bit).map(|b| DyadicInterval::new(q.level + k as i32, base + b)));
        }
        if next.len() > LEDGER_CAP {
            return Err(Error::CellCount {
                level: schedule.cumulative(s),
                got: next.len(),
            });
        }
        cur = next;
    }
    Ok(cur)
}

/// Measure of all transition cells, `Σ_t 4·2^{-k_t} Π_{s<t} (1 - 4·2^{-k_s})`.
pub fn transition_mass(schedule: &ScheduleK) -> f64 {
    let mut alive = 1.0;
    let mut total = 0.0;
    for &k in schedule.k.iter().skip(1) {
        let cut = 4.0 * (-(k as f64)).exp2();
        total += alive * cut;
        alive *= 1.0 - cut;
    }
    total
}

/// Every `J ∈ 𝒦̂_t` with `supr(J) = I` receives the coefficient of `I ∈ 𝒟_t`.
pub fn transplant_family(a: &CoefficientFamily, schedule: &ScheduleK) -> Result<CoefficientFamily> {
    let mut entries = Vec::new();
    for &(i, c) in &a.entries {
        entries.extend(supervised_survivors(&i, schedule)?.into_iter().map(|j| (j, c)));
    }
    Ok(CoefficientFamily::new(entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub before: f64,
    pub after: f64,
    /// Lebesgue measure of all transition cells.
    pub transition_mass: f64,
}

impl Retention {
    pub fn ratio(&self) -> f64 {
        self.after / self.before
    }
}

/// Quadratic functional before and after remodeling with transplanted
/// coefficients (entries deeper than the remodeled levels are dropped).
pub fn quadratic_retention(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    a: &CoefficientFamily,
    schedule: &ScheduleK,
) -> Result<Retention> {
    let ell = sigma.base_level().min(schedule.levels());
    let kept = CoefficientFamily::new(
        a.entries
            .iter()
            .copied()
            .filter(|(j, _)| j.level >= 0 && (j.level as u32) <= ell)
            .collect(),
    );
    if kept.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let before = quadratic_ap_functional(sigma, omega, p, &kept)?.value;
    let moved = transplant_family(&kept, &schedule.prefix(ell))?;
    if moved.is_empty() {
        return Err(Error::EmptyFamily);
    }
    let (sh, wh) = (remodel_weight(sigma, schedule, ell)?, remodel_weight(omega, schedule, ell)?);
    let after = quadratic_ap_functional(&sh, &wh, p, &moved)?.value;
    Ok(Retention {
        before,
        after,
        transition_mass: transition_mass(&schedule.prefix(ell)),
    })
}

/// Outcome of a schedule check: `None` passes, `Some(name)` names the failure.
pub type CheckOutcome = Option<String>;

/// Greedy schedule: each `k_{t+1}` doubles from 2 until `check` passes on the
/// extended prefix, capped at `k_cap`.
pub fn choose_schedule(
    levels: u32,
    m: u32,
    k_cap: u32,
    mut check: impl FnMut(&ScheduleK) -> Result<CheckOutcome>,
) -> Result<ScheduleK> {
    if k_cap < 2 {
        return Err(Error::Config(format!("k_cap = {k_cap} is below 2")));
    }
    let mut k = vec![0u32];
    for t in 1..=levels {
        let mut cand = 2u32;
        loop {
            let mut trial = k.clone();
            trial.push(cand);
            let s = ScheduleK { k: trial, m };
            let outcome = if s.cumulative(t) > MAX_TOTAL_LEVEL {
                Some("total level".to_string())
            } else {
                check(&s)?
            };
            match outcome {
                None => {
                    k.push(cand);
                    break;
                }
                Some(name) if cand >= k_cap => {
                    return Err(Error::ScheduleCap {
                        k_cap,
                        step: t as usize,
                        check: name,
                    })
                }
                Some(_) => cand = (2 * cand).min(k_cap),
            }
        }
    }
    ScheduleK::new(k, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::{interval_doubling_sample, random_intervals};

    fn haar_oracle(g: &StepWeight1D, s: &ScheduleK, ell: u32) -> Vec<f64> {
        let level = s.cumulative(ell);
        let mut out = vec![g.total_mean(); 1 << level];
        for t in 0..ell {
            for r in DyadicInterval::UNIT.descendants(t as i32) {
                let (l, rr) = r.children();
                let c = 0.5 * (g.mean(&rr) - g.mean(&l));
                let osc = osc_build(r, s).unwrap();
                let rep = 1usize << (level - osc.level);
                for (i, v) in out.iter_mut().enumerate() {
                    *v += c * osc.values[i / rep] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn stopping_parity() {
        let (m, p) = level_stopping(DyadicInterval::UNIT, 1).unwrap();
        assert_eq!((m, p), (vec![DyadicInterval::new(1, 0)], vec![DyadicInterval::new(1, 1)]));
        let (m, p) = level_stopping(DyadicInterval::UNIT, 2).unwrap();
        assert_eq!(m, vec![DyadicInterval::new(2, 0), DyadicInterval::new(2, 2)]);
        assert_eq!(p, vec![DyadicInterval::new(2, 1), DyadicInterval::new(2, 3)]);
        for k in 1..8 {
            let i = DyadicInterval::new(3, 5);
            let (m, p) = level_stopping(i, k).unwrap();
            let (a, b): (f64, f64) = (m.iter().map(|j| j.len()).sum(), p.iter().map(|j| j.len()).sum());
            assert_eq!(a, 0.5 * i.len());
            assert_eq!(b, 0.5 * i.len());
        }
    }

    #[test]
    fn transitions_of_the_unit() {
        let (tr, sv) = transition_family(&[DyadicInterval::UNIT], 3).unwrap();
        assert_eq!(tr, [0, 1, 6, 7].map(|i| DyadicInterval::new(3, i)).to_vec());
        assert_eq!(sv.len(), 4);
        let (tr, sv) = transition_family(&[DyadicInterval::UNIT], 2).unwrap();
        assert_eq!(tr.len(), 4);
        assert!(sv.is_empty());
        assert!(transition_family(&[DyadicInterval::UNIT], 1).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleK::new(vec![1, 3], 1).is_err());
        assert!(ScheduleK::new(vec![0, 1], 1).is_err());
        assert!(ScheduleK::new(vec![0, 20, 20], 2).is_err());
        let s = ScheduleK::new(vec![0, 3, 4], 2).unwrap();
        assert_eq!(s.cumulative(2), 7);
        assert_eq!(s.grid_index(3), Some(1));
        assert_eq!(s.grid_index(4), None);
    }

    #[test]
    fn ledger_invariants() {
        let s = ScheduleK::uniform(3, 3).unwrap();
        let l = TransitionLedger::build(&s).unwrap();
        let mut all: Vec<_> = l.transitions.iter().flatten().copied().collect();
        all.sort_by(|a, b| a.left().total_cmp(&b.left()));
        for w in all.windows(2) {
            assert!(w[0].right() <= w[1].left());
        }
        for t in 1..=3 {
            assert_eq!(l.transitions[t].len(), 4 * l.survivors[t - 1].len());
        }
        assert!(l.adjacency_violations().is_empty());
        assert!(l.transition_mass() <= l.transition_mass_bound());
        assert!((l.transition_mass() - transition_mass(&s)).abs() < 1e-15);
        for (t, sv) in l.survivors.iter().enumerate() {
            for i in DyadicInterval::UNIT.descendants(t as i32) {
                let mut want: Vec<_> = sv.iter().copied().filter(|j| s.supervisor(j) == Some(i)).collect();
                want.sort();
                let mut got = supervised_survivors(&i, &s).unwrap();
                got.sort();
                assert_eq!(got, want);
            }
        }
        for sv in &l.survivors {
            assert!(sv.iter().all(|j| s.survives(j)));
        }
    }

    #[test]
    fn osc_properties() {
        let s = ScheduleK::new(vec![0, 3, 4, 3], 3).unwrap();
        let l = TransitionLedger::build(&s).unwrap();
        for t in 0..3u32 {
            for r in DyadicInterval::UNIT.descendants(t as i32) {
                let o = osc_build(r, &s).unwrap();
                assert_eq!(o.integral(), 0.0);
                let h = (-(o.level as f64)).exp2();
                let mut zeros_in_supervised = 0.0;
                for (c, &v) in o.values.iter().enumerate() {
                    let cell = DyadicInterval::new(o.level as i32, c as i64);
                    let parent = cell.ancestor_at(s.cumulative(t) as i32);
                    let owned = s.survives(&parent) && s.supervisor(&parent) == Some(r);
                    if v != 0 {
                        assert!(owned);
                        assert_eq!(s.supervisor(&cell).unwrap().parent(), r);
                    } else if owned {
                        zeros_in_supervised += h;
                    }
                }
                let tr: f64 = l.transitions[t as usize + 1]
                    .iter()
                    .filter(|j| s.supervisor(&j.ancestor_at(s.cumulative(t) as i32)) == Some(r))
                    .map(|j| j.len())
                    .sum();
                assert!((zeros_in_supervised - tr).abs() < 1e-15);
                assert!(o.values.iter().any(|&v| v != 0));
            }
        }
        let o = osc_build(DyadicInterval::new(1, 1), &s).unwrap();
        let mut buf = Vec::new();
        o.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("breakpoint,value"));
    }

    #[test]
    fn remodel_matches_martingale_sum() {
        let g = tau_doubling_weight(0.3, 3, 7).unwrap();
        let s = ScheduleK::new(vec![0, 3, 4, 3], 3).unwrap();
        for ell in 0..=3 {
            let r = remodel_weight(&g, &s, ell).unwrap();
            let want = haar_oracle(&g, &s, ell);
            for (a, b) in r.values().iter().zip(&want) {
                assert!((a - b).abs() < 1e-13, "{a} vs {b}");
            }
            assert!((r.total_mean() - g.total_mean()).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_and_transplant_identity() {
        let s = ScheduleK::uniform(4, 3).unwrap();
        let c = remodel_full(&StepWeight1D::constant(2.0, 3), &s).unwrap();
        assert!(c.values().iter().all(|&v| v == 2.0));
        let g = tau_doubling_weight(0.5, 3, 1).unwrap();
        let r = remodel_full(&g, &s).unwrap();
        let l = TransitionLedger::build(&s).unwrap();
        for (t, sv) in l.survivors.iter().enumerate() {
            for j in sv {
                assert_eq!(r.mean(j), g.mean(&s.supervisor(j).unwrap()), "t = {t}");
            }
        }
        for (t, tr) in l.transitions.iter().enumerate().skip(1) {
            for j in tr {
                let sup = s.supervisor(&j.ancestor_at(s.cumulative(t as u32 - 1) as i32)).unwrap();
                assert_eq!(r.mean(j), g.mean(&sup));
            }
        }
    }

    #[test]
    fn ap_over_grid_bounded_by_seed() {
        let (a, b) = (tau_doubling_weight(0.4, 4, 2).unwrap(), tau_doubling_weight(0.4, 4, 3).unwrap());
        let w = b.map(|v| 1.0 / v);
        let s = ScheduleK::uniform(3, 4).unwrap();
        let (ah, wh) = (remodel_full(&a, &s).unwrap(), remodel_full(&w, &s).unwrap());
        let seed = crate::characteristics::scalar_ap_dyadic(&a, &w, 3.0, 4).value;
        assert!(ap_over_k(&ah, &wh, 3.0, &s, 4) <= seed * (1.0 + 1e-9));
    }

    #[test]
    fn smaller_tau_doubles_better() {
        let s = ScheduleK::new(vec![0, 4, 4], 2).unwrap();
        let iv = random_intervals(9, 2000, 1.0, 10.0);
        let d = |tau| {
            let g = tau_doubling_weight(tau, 2, 4).unwrap();
            interval_doubling_sample(&remodel_full(&g, &s).unwrap(), &iv)
        };
        let (lo, hi) = (d(0.1), d(0.3));
        assert!(lo <= hi, "{lo} vs {hi}");
    }

    #[test]
    fn witness_cases() {
        let s = ScheduleK::uniform(3, 3).unwrap();
        assert_eq!(locally_constant_witness(0.3, 0.9, &s).unwrap(), DyadicInterval::UNIT);
        assert_eq!(locally_constant_witness(0.3, 0.35, &s).unwrap(), DyadicInterval::UNIT);
        let g = tau_doubling_weight(0.2, 3, 5).unwrap();
        let rho = parent_child_ratio(&g);
        let env = rho.powi(3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let finest = s.cumulative(3) as f64;
        for _ in 0..2000 {
            let len = (-rng.random::<f64>() * finest).exp2();
            let lo = rng.random::<f64>() * 2.0 - 0.5;
            let t = (0..=3).find(|&t| (-(s.cumulative(t) as f64)).exp2() <= len).unwrap();
            let gt = remodel_weight(&g, &s, t).unwrap();
            let q = locally_constant_witness(lo, lo + len, &s).unwrap();
            let e = g.mean(&s.supervisor(&q.reduce_mod1()).unwrap());
            let h = gt.cell_len();
            let mut x = lo;
            while x < lo + len {
                let v = gt.value_at(x);
                assert!(v / e <= env && e / v <= env, "Q = [{lo}, {}) Q* = {q:?}", lo + len);
                x = (x / h).floor() * h + h;
            }
        }
    }

    #[test]
    fn greedy_schedule() {
        let s = choose_schedule(4, 4, 20, |_| Ok(None)).unwrap();
        assert_eq!(s.k, vec![0, 2, 2, 2, 2]);
        let s = choose_schedule(2, 2, 20, |s| Ok((*s.k.last().unwrap() < 5).then(|| "big".into()))).unwrap();
        assert_eq!(s.k, vec![0, 8, 8]);
        let e = choose_schedule(1, 1, 6, |_| Ok(Some("never".into()))).unwrap_err();
        assert!(matches!(e, Error::ScheduleCap { k_cap: 6, step: 1, .. }));
    }

    #[test]
    fn retention_on_transplanted_family() {
        let g = tau_doubling_weight(0.3, 3, 11).unwrap();
        let w = g.map(|v| v.powf(-0.5));
        let fam = CoefficientFamily::new((1..3).map(|k| (DyadicInterval::new(k, 0), k as f64)).collect());
        let s = ScheduleK::uniform(2, 3).unwrap();
        assert!(quadratic_retention(&g, &w, 4.0, &fam, &s).is_err());
        let mut prev = 0.0;
        for k in [3, 4, 5] {
            let s = ScheduleK::uniform(k, 3).unwrap();
            let r = quadratic_retention(&g, &w, 4.0, &fam, &s).unwrap();
            assert!(r.ratio() >= 1.0 - 4.0 * r.transition_mass, "{r:?}");
            assert!(r.ratio() >= prev - 1e-12);
            prev = r.ratio();
        }
    }
}
