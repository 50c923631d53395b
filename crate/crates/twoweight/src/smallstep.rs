//! Small-step disarrangement on the dyadic tree.
//!
//! Inside an interval `I` the walk `Σ` moves `−1` into a left child and `+1`
//! into a right child. The first dyadic subintervals where `Σ = ∓d` receive an
//! affine copy of the weight on `I∓`, and the construction repeats inside
//! every such stopping interval for a fixed number of generations. The walk is
//! explored to a finite depth; cells where it has not stopped keep the weight
//! they had before the step.
//!
//! Explicit stopping families can only be listed for small thresholds. The
//! disarranged weight itself is handled through walk-state probabilities, so
//! every dyadic average of the finite construction is available without
//! materializing its (very deep) cells.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::characteristics::{ap_product, power_integral, quadratic_ap_functional, CoefficientFamily};
use crate::dyadic::{DyadicInterval, StepWeight1D};
use crate::error::{Error, Result};

/// Values of `Σ_{I,k}` on `𝒟_k(I)`, left to right.
pub fn truncated_walk(i: DyadicInterval, k: u32) -> Vec<(DyadicInterval, i32)> {
    i.descendants(i.level + k as i32)
        .enumerate()
        .map(|(c, j)| (j, 2 * (c as u64).count_ones() as i32 - k as i32))
        .collect()
}

/// Absorption probabilities of the walk at `±d` within `r` further steps.
#[derive(Clone, Debug)]
pub struct WalkTable {
    d: i32,
    n: u32,
    minus: Vec<f64>,
    plus: Vec<f64>,
    alive: Vec<f64>,
}

impl WalkTable {
    pub fn new(d: u32, n: u32) -> Self {
        let d = d as i32;
        let w = (2 * d + 1) as usize;
        let rows = n as usize + 1;
        let (mut minus, mut plus, mut alive) = (vec![0.0; rows * w], vec![0.0; rows * w], vec![0.0; rows * w]);
        for r in 0..rows {
            for s in -d..=d {
                let at = r * w + (s + d) as usize;
                if s == -d {
                    minus[at] = 1.0;
                } else if s == d {
                    plus[at] = 1.0;
                } else if r == 0 {
                    alive[at] = 1.0;
                } else {
                    let (a, b) = (at - w - 1, at - w + 1);
                    minus[at] = 0.5 * (minus[a] + minus[b]);
                    plus[at] = 0.5 * (plus[a] + plus[b]);
                    alive[at] = 0.5 * (alive[a] + alive[b]);
                }
            }
        }
        Self {
            d,
            n,
            minus,
            plus,
            alive,
        }
    }

    fn at(&self, r: u32, s: i32) -> usize {
        r.min(self.n) as usize * (2 * self.d + 1) as usize + (s + self.d) as usize
    }

    /// `(P[stop at −d], P[stop at +d])` within `r` steps from state `s`.
    pub fn absorbed(&self, r: u32, s: i32) -> (f64, f64) {
        let k = self.at(r, s);
        (self.minus[k], self.plus[k])
    }

    /// Probability of staying strictly inside `(−d, d)` for `r` steps.
    pub fn survival(&self, r: u32, s: i32) -> f64 {
        self.alive[self.at(r, s)]
    }
}

pub const ENUMERATION_CAP: usize = 1 << 18;

/// First-passage stopping intervals of one root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoppingFamily {
    pub root: DyadicInterval,
    pub d: u32,
    pub n_explore: u32,
    pub minus: Vec<DyadicInterval>,
    pub plus: Vec<DyadicInterval>,
    pub unresolved: Vec<DyadicInterval>,
    /// False when the lists exceeded [`ENUMERATION_CAP`] and were dropped.
    pub enumerated: bool,
    /// Fractions of `|I|`.
    pub minus_mass: f64,
    pub plus_mass: f64,
    pub unresolved_mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopMember {
    pub interval: DyadicInterval,
    pub sign: i8,
}

impl StoppingFamily {
    pub fn members(&self) -> Vec<StopMember> {
        let tag = |sign| move |&interval| StopMember { interval, sign };
        let mut out: Vec<StopMember> = self.minus.iter().map(tag(-1)).chain(self.plus.iter().map(tag(1))).collect();
        out.sort_by_key(|m| (m.interval.left().to_bits(), m.interval.level));
        out
    }
}

pub fn stopping_family(i: DyadicInterval, d: u32, n_explore: u32) -> Result<StoppingFamily> {
    if d == 0 || n_explore < d {
        return Err(Error::Precondition(format!("need 1 <= d <= n_explore, got d = {d}, n_explore = {n_explore}")));
    }
    let table = WalkTable::new(d, n_explore);
    let (minus_mass, plus_mass) = table.absorbed(n_explore, 0);
    let unresolved_mass = table.survival(n_explore, 0);
    let di = d as i32;
    let mut live = vec![(i, 0i32)];
    let (mut minus, mut plus) = (Vec::new(), Vec::new());
    let mut enumerated = true;
    for _ in 0..n_explore {
        let mut next = Vec::with_capacity(live.len());
        for (j, s) in live {
            let (l, r) = j.children();
            for (c, t) in [(l, s - 1), (r, s + 1)] {
                match t {
                    t if t == -di => minus.push(c),
                    t if t == di => plus.push(c),
                    _ => next.push((c, t)),
                }
            }
        }
        live = next;
        if live.len() + minus.len() + plus.len() > ENUMERATION_CAP {
            enumerated = false;
            break;
        }
    }
    let unresolved = if enumerated {
        live.into_iter().map(|x| x.0).collect()
    } else {
        minus.clear();
        plus.clear();
        Vec::new()
    };
    Ok(StoppingFamily {
        root: i,
        d,
        n_explore,
        minus,
        plus,
        unresolved,
        enumerated,
        minus_mass,
        plus_mass,
        unresolved_mass,
    })
}

/// `G ∘ ψ_I` on `I`, `G` elsewhere, on a grid fine enough for every copy.
pub fn psi_apply(i: DyadicInterval, fam: &StoppingFamily, g: &StepWeight1D) -> Result<StepWeight1D> {
    if !fam.enumerated || fam.root != i {
        return Err(Error::Precondition("psi_apply needs the enumerated family of the same root".into()));
    }
    if i.level < 0 || !DyadicInterval::UNIT.contains(&i) {
        return Err(Error::Precondition(format!("{i:?} is not inside [0,1)")));
    }
    let base = g.base_level() as i32;
    let rel = (base - i.level - 1).max(0);
    let deepest = fam.minus.iter().chain(&fam.plus).map(|j| j.level).max().unwrap_or(i.level);
    let level = (deepest + rel).max(base);
    if level > 26 {
        return Err(Error::TooLarge(level as u32));
    }
    let mut out = g.refine(level as u32).values().to_vec();
    let (im, ip) = i.children();
    for (list, src) in [(&fam.minus, im), (&fam.plus, ip)] {
        for j in list.iter() {
            let shift = level - j.level;
            let start = (j.index << shift) as usize;
            for c in 0..1i64 << shift {
                let cell = DyadicInterval::new(src.level + shift, (src.index << shift) + c);
                out[start + c as usize] = g.mean(&cell);
            }
        }
    }
    StepWeight1D::new(level as u32, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallStepConfig {
    /// Walk threshold.
    pub d: u32,
    pub generations: u32,
    /// Exploration depth; `8·d²` when absent.
    pub n_explore: Option<u32>,
    /// Level of the materialized projection.
    pub resolution: u32,
    /// Deepest level entering the doubling and `A_p` audits.
    pub audit_level: u32,
}

impl Default for SmallStepConfig {
    fn default() -> Self {
        Self {
            d: 8,
            generations: 2,
            n_explore: None,
            resolution: 10,
            audit_level: 14,
        }
    }
}

impl SmallStepConfig {
    pub fn n_explore(&self) -> u32 {
        self.n_explore.unwrap_or(8 * self.d * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_explore() < self.d || self.n_explore() > 1 << 16 {
            return Err(Error::Config(format!(
                "need 1 <= d <= n_explore <= 65536, got d = {}, n_explore = {}",
                self.d,
                self.n_explore()
            )));
        }
        if self.resolution > 24 || self.audit_level > 24 {
            return Err(Error::Config("resolution and audit_level must be <= 24".into()));
        }
        Ok(())
    }
}

/// Position of a dyadic interval inside the finite construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    /// Inside a roof of `sup` at walk state `s`, `r` levels below the roof;
    /// `k` is the matching interval of the source copy.
    Corona {
        sup: DyadicInterval,
        s: i32,
        r: u32,
        k: DyadicInterval,
    },
    /// Plain copy of the seed on `k`.
    Copy { k: DyadicInterval, unresolved: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoofEntry {
    pub roof: DyadicInterval,
    pub supervisor: DyadicInterval,
}

/// Roofs met down to the audit level, sorted by roof.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SupervisorMap {
    pub roofs: Vec<RoofEntry>,
}

impl SupervisorMap {
    pub fn supervisor(&self, j: &DyadicInterval) -> Option<DyadicInterval> {
        self.roofs
            .binary_search_by(|e| e.roof.cmp(j))
            .ok()
            .map(|k| self.roofs[k].supervisor)
    }
}

/// The finite small-step construction applied to one seed weight.
#[derive(Clone, Debug)]
pub struct Disarrangement {
    seed: StepWeight1D,
    d: i32,
    n: u32,
    generations: u32,
    walk: WalkTable,
    full: HashMap<DyadicInterval, f64>,
    resolved: HashMap<DyadicInterval, f64>,
}

impl Disarrangement {
    pub fn new(seed: &StepWeight1D, cfg: &SmallStepConfig) -> Result<Self> {
        cfg.validate()?;
        if seed.periodic() {
            return Err(Error::Precondition("small-step input must live on [0,1)".into()));
        }
        let mut out = Self {
            seed: seed.clone(),
            d: cfg.d as i32,
            n: cfg.n_explore(),
            generations: cfg.generations,
            walk: WalkTable::new(cfg.d, cfg.n_explore()),
            full: HashMap::new(),
            resolved: HashMap::new(),
        };
        let top = out.active_levels();
        let (hm, hp) = out.walk.absorbed(out.n, 0);
        for level in (0..top as i32).rev() {
            for i in DyadicInterval::UNIT.descendants(level) {
                let (l, r) = i.children();
                let u = out.unresolved_integral(i, 0, 0) / i.len();
                let f = hm * out.roof_mean(&l) + hp * out.roof_mean(&r) + u;
                let res = (hm * out.resolved_roof_mean(&l) + hp * out.resolved_roof_mean(&r)) / (hm + hp);
                out.full.insert(i, f);
                out.resolved.insert(i, res);
            }
        }
        Ok(out)
    }

    pub fn seed(&self) -> &StepWeight1D {
        &self.seed
    }

    pub fn walk(&self) -> &WalkTable {
        &self.walk
    }

    /// Supervisors with level below this carry a walk; deeper ones are copies.
    fn active_levels(&self) -> u32 {
        self.generations.min(self.seed.base_level())
    }

    fn active(&self, i: &DyadicInterval) -> bool {
        i.level >= 0 && (i.level as u32) < self.active_levels()
    }

    /// Mean of the construction over any roof of `i`.
    pub fn roof_mean(&self, i: &DyadicInterval) -> f64 {
        self.full.get(i).copied().unwrap_or_else(|| self.seed.mean(i))
    }

    /// Mean over the resolved part of any roof of `i`.
    pub fn resolved_roof_mean(&self, i: &DyadicInterval) -> f64 {
        self.resolved.get(i).copied().unwrap_or_else(|| self.seed.mean(i))
    }

    /// `∫` of the seed over the part of `k` where the walk, started at state
    /// `s` with `r` steps already taken, never stops.
    fn unresolved_integral(&self, k: DyadicInterval, s: i32, r: u32) -> f64 {
        if r >= self.n {
            return self.seed.mass(&k);
        }
        if k.level >= self.seed.base_level() as i32 {
            return self.seed.mass(&k) * self.walk.survival(self.n - r, s);
        }
        let (l, rr) = k.children();
        [(l, s - 1), (rr, s + 1)]
            .into_iter()
            .filter(|(_, t)| t.abs() < self.d)
            .map(|(c, t)| self.unresolved_integral(c, t, r + 1))
            .sum()
    }

    pub fn root(&self) -> Node {
        let u = DyadicInterval::UNIT;
        if self.active(&u) {
            Node::Corona {
                sup: u,
                s: 0,
                r: 0,
                k: u,
            }
        } else {
            Node::Copy { k: u, unresolved: false }
        }
    }

    fn roof_node(&self, sup: DyadicInterval) -> Node {
        if self.active(&sup) {
            Node::Corona {
                sup,
                s: 0,
                r: 0,
                k: sup,
            }
        } else {
            Node::Copy {
                k: sup,
                unresolved: false,
            }
        }
    }

    /// Child node; the second entry is the supervisor when the child is a roof.
    pub fn child(&self, node: Node, right: bool) -> (Node, Option<DyadicInterval>) {
        let pick = |k: DyadicInterval| if right { k.children().1 } else { k.children().0 };
        match node {
            Node::Copy { k, unresolved } => (Node::Copy { k: pick(k), unresolved }, None),
            Node::Corona { sup, s, r, k } => {
                let t = if right { s + 1 } else { s - 1 };
                if t.abs() == self.d {
                    let ns = pick(sup);
                    (self.roof_node(ns), Some(ns))
                } else if r + 1 >= self.n {
                    (
                        Node::Copy {
                            k: pick(k),
                            unresolved: true,
                        },
                        None,
                    )
                } else {
                    (
                        Node::Corona {
                            sup,
                            s: t,
                            r: r + 1,
                            k: pick(k),
                        },
                        None,
                    )
                }
            }
        }
    }

    /// Node of an interval inside `[0,1)`.
    pub fn locate(&self, j: &DyadicInterval) -> Result<Node> {
        if j.level < 0 || !DyadicInterval::UNIT.contains(j) {
            return Err(Error::Precondition(format!("{j:?} is not inside [0,1)")));
        }
        let mut node = self.root();
        for b in (0..j.level).rev() {
            node = self.child(node, (j.index >> b) & 1 == 1).0;
        }
        Ok(node)
    }

    pub fn mean_at(&self, node: Node) -> f64 {
        match node {
            Node::Copy { k, .. } => self.seed.mean(&k),
            Node::Corona { sup, s, r, k } => {
                let (pm, pp) = self.walk.absorbed(self.n - r, s);
                let (l, rr) = sup.children();
                pm * self.roof_mean(&l) + pp * self.roof_mean(&rr) + self.unresolved_integral(k, s, r) / k.len()
            }
        }
    }

    pub fn resolved_mean_at(&self, node: Node) -> f64 {
        match node {
            Node::Copy { k, .. } => self.seed.mean(&k),
            Node::Corona { sup, s, r, .. } => {
                let (pm, pp) = self.walk.absorbed(self.n - r, s);
                let (l, rr) = sup.children();
                (pm * self.resolved_roof_mean(&l) + pp * self.resolved_roof_mean(&rr)) / (pm + pp)
            }
        }
    }

    /// `E_J G̃`.
    pub fn mean(&self, j: &DyadicInterval) -> Result<f64> {
        Ok(self.mean_at(self.locate(j)?))
    }

    /// Visit every node of level `≤ max_level` in depth-first order.
    pub fn visit(&self, max_level: u32, mut f: impl FnMut(DyadicInterval, Node, Option<DyadicInterval>)) {
        let mut stack = vec![(DyadicInterval::UNIT, self.root(), None)];
        while let Some((j, node, roof)) = stack.pop() {
            f(j, node, roof);
            if (j.level as u32) < max_level {
                let (l, r) = j.children();
                let (nr, sr) = self.child(node, true);
                let (nl, sl) = self.child(node, false);
                stack.push((r, nr, sr));
                stack.push((l, nl, sl));
            }
        }
    }

    /// `𝔼_L G̃`.
    pub fn project(&self, level: u32) -> Result<StepWeight1D> {
        if level > 24 {
            return Err(Error::TooLarge(level));
        }
        let mut vals = vec![0.0; 1 << level];
        self.visit(level, |j, node, _| {
            if j.level as u32 == level {
                vals[j.index as usize] = self.mean_at(node);
            }
        });
        StepWeight1D::new(level, vals)
    }

    pub fn supervisors(&self, max_level: u32) -> SupervisorMap {
        let mut roofs = Vec::new();
        self.visit(max_level, |j, _, sup| {
            if let Some(supervisor) = sup {
                roofs.push(RoofEntry { roof: j, supervisor });
            }
        });
        roofs.sort_by_key(|a| a.roof);
        SupervisorMap { roofs }
    }
}

/// `(𝔼_resolution G̃, supervisors down to the audit level)`.
pub fn smallstep_disarrange(g: &StepWeight1D, cfg: &SmallStepConfig) -> Result<(StepWeight1D, SupervisorMap)> {
    let dis = Disarrangement::new(g, cfg)?;
    Ok((dis.project(cfg.resolution)?, dis.supervisors(cfg.audit_level)))
}

/// Treatment of cells where the walk has not stopped at the exploration depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    /// Keep the weight unchanged there.
    Identity,
    /// Stop by the sign of the walk; a zero walk takes one more step. Halves
    /// of every roof then go to each side exactly, so `Φ` preserves measure.
    Forced,
}

/// The rearrangement `Φ` of the finite construction as dyadic pieces: each
/// output interval carries an affine copy of a source interval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rearrangement {
    /// `(output, source)`, sorted by output, tiling `[0,1)`.
    pub pieces: Vec<(DyadicInterval, DyadicInterval)>,
}

pub const PIECE_CAP: usize = 1 << 20;

impl Rearrangement {
    pub fn identity() -> Self {
        Self {
            pieces: vec![(DyadicInterval::UNIT, DyadicInterval::UNIT)],
        }
    }

    /// Explicit `Φ` for thresholds small enough to enumerate; supervisors
    /// at level `≥ min(generations, base_level)` are copied whole.
    pub fn build(cfg: &SmallStepConfig, base_level: u32, closure: Closure) -> Result<Self> {
        cfg.validate()?;
        let top = cfg.generations.min(base_level) as i32;
        let mut fams: HashMap<u32, StoppingFamily> = HashMap::new();
        let unit = stopping_family(DyadicInterval::UNIT, cfg.d, cfg.n_explore())?;
        if !unit.enumerated {
            return Err(Error::TooLarge(cfg.n_explore()));
        }
        fams.insert(0, unit);
        let mut pieces = Vec::new();
        let mut stack = vec![(DyadicInterval::UNIT, DyadicInterval::UNIT)];
        while let Some((roof, sup)) = stack.pop() {
            if sup.level >= top {
                pieces.push((roof, sup));
                continue;
            }
            let f = &fams[&0];
            let place = |j: &DyadicInterval| {
                let shift = j.level;
                DyadicInterval::new(roof.level + shift, (roof.index << shift) + j.index)
            };
            let (l, r) = sup.children();
            stack.extend(f.minus.iter().map(|j| (place(j), l)));
            stack.extend(f.plus.iter().map(|j| (place(j), r)));
            for u in &f.unresolved {
                match closure {
                    Closure::Identity => {
                        let shift = u.level;
                        pieces.push((place(u), DyadicInterval::new(sup.level + shift, (sup.index << shift) + u.index)));
                    }
                    Closure::Forced => {
                        let s = 2 * u.index.count_ones() as i32 - u.level;
                        let (ul, ur) = u.children();
                        match s.signum() {
                            -1 => stack.push((place(u), l)),
                            1 => stack.push((place(u), r)),
                            _ => stack.extend([(place(&ul), l), (place(&ur), r)]),
                        }
                    }
                }
            }
            if pieces.len() + stack.len() > PIECE_CAP {
                return Err(Error::CellCount {
                    level: cfg.n_explore(),
                    got: pieces.len() + stack.len(),
                });
            }
        }
        pieces.sort_by(|a, b| a.0.left().total_cmp(&b.0.left()));
        Ok(Self { pieces })
    }

    /// `∫_J g∘Φ` for a dyadic `J ⊆ [0,1)`.
    pub fn pullback_mass(&self, g: &StepWeight1D, j: &DyadicInterval) -> f64 {
        let k = self.pieces.partition_point(|p| p.0.right() <= j.left());
        let (out, src) = self.pieces[k];
        if out.contains(j) {
            return g.mass(&relocate(j, &out, &src)) * out.len() / src.len();
        }
        self.pieces[k..]
            .iter()
            .take_while(|p| p.0.left() < j.right())
            .map(|p| g.mass(&p.1) * p.0.len() / p.1.len())
            .sum()
    }

    /// Piece containing `j`, if any.
    pub fn piece_of(&self, j: &DyadicInterval) -> Option<(DyadicInterval, DyadicInterval)> {
        let k = self.pieces.partition_point(|p| p.0.right() <= j.left());
        self.pieces.get(k).copied().filter(|p| p.0.contains(j))
    }
}

/// Image of `j ⊆ out` under the affine map `out → src`.
pub fn relocate(j: &DyadicInterval, out: &DyadicInterval, src: &DyadicInterval) -> DyadicInterval {
    let shift = j.level - out.level;
    DyadicInterval::new(src.level + shift, (src.index << shift) + j.index - (out.index << shift))
}

/// Audit of the construction down to a fixed level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmallStepAudit {
    /// Worst sibling ratio over intervals carrying a walk.
    pub doubling_resolved: f64,
    /// Worst sibling ratio over every interval.
    pub doubling_all: f64,
    /// Worst relative gap between a resolved roof mean and its supervisor mean.
    pub transfer_error: f64,
    /// Worst excursion of a resolved corona mean outside the hull of the
    /// supervisor's children means.
    pub hull_violation: f64,
    pub roofs: usize,
}

pub fn audit(dis: &Disarrangement, max_level: u32) -> SmallStepAudit {
    let mut a = SmallStepAudit {
        doubling_resolved: 1.0,
        doubling_all: 1.0,
        ..Default::default()
    };
    dis.visit(max_level, |j, node, sup| {
        if let Some(s) = sup {
            let v = dis.resolved_mean_at(node);
            let e = dis.seed.mean(&s);
            a.transfer_error = a.transfer_error.max((v - e).abs() / e.abs().max(f64::MIN_POSITIVE));
            a.roofs += 1;
        }
        if let Node::Corona { sup, .. } = node {
            let (l, r) = sup.children();
            let (x, y) = (dis.seed.mean(&l), dis.seed.mean(&r));
            let v = dis.resolved_mean_at(node);
            let out = (x.min(y) - v).max(v - x.max(y)).max(0.0);
            a.hull_violation = a.hull_violation.max(out / x.max(y));
        }
        if (j.level as u32) < max_level {
            let ml = dis.mean_at(dis.child(node, false).0);
            let mr = dis.mean_at(dis.child(node, true).0);
            let ratio = (ml / mr).max(mr / ml);
            a.doubling_all = a.doubling_all.max(ratio);
            if matches!(node, Node::Corona { .. }) {
                a.doubling_resolved = a.doubling_resolved.max(ratio);
            }
        }
    });
    a
}

/// Largest `A_p` product over resolved means of the pair down to `max_level`.
pub fn resolved_ap(sigma: &Disarrangement, omega: &Disarrangement, p: f64, max_level: u32) -> f64 {
    let mut best = 0.0f64;
    sigma.visit(max_level, |j, node, _| {
        if let Node::Copy { unresolved: true, .. } = node {
            return;
        }
        let w = omega.locate(&j).map(|n| omega.resolved_mean_at(n)).unwrap_or(0.0);
        best = best.max(ap_product(sigma.resolved_mean_at(node), w, p));
    });
    best
}

/// Quadratic functional with coefficients moved onto roofs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransplantFunctional {
    /// On the seed pair with the original coefficients.
    pub seed: f64,
    /// On the resolved part of the construction with resolved roof means.
    pub resolved: f64,
    /// On the whole construction, unresolved cells included.
    pub full: f64,
}

pub fn transplanted_functional(
    sigma: &Disarrangement,
    omega: &Disarrangement,
    p: f64,
    a: &CoefficientFamily,
) -> Result<TransplantFunctional> {
    if sigma.d != omega.d || sigma.n != omega.n || sigma.active_levels() != omega.active_levels() {
        return Err(Error::Precondition("both weights need the same disarrangement".into()));
    }
    if a.is_zero() {
        return Err(Error::ZeroDenominator);
    }
    let coeff: HashMap<DyadicInterval, f64> = a.entries.iter().copied().collect();
    let seed = quadratic_ap_functional(sigma.seed(), omega.seed(), p, a)?.value;
    let ratio = |resolved: bool| -> Result<f64> {
        let mean = |j: &DyadicInterval| {
            if resolved {
                sigma.resolved_roof_mean(j)
            } else {
                sigma.roof_mean(j)
            }
        };
        let term = |j: &DyadicInterval| {
            coeff.get(j).map_or((0.0, 0.0), |c| {
                let c2 = c * c;
                (c2 * mean(j).powi(2), c2)
            })
        };
        let (n0, d0) = term(&DyadicInterval::UNIT);
        let (num, den) = transplant_rec(sigma, omega, p, a, &term, DyadicInterval::UNIT, n0, d0, resolved);
        if !(den > 0.0) {
            return Err(Error::ZeroDenominator);
        }
        Ok((num / den).powf(1.0 / p))
    };
    Ok(TransplantFunctional {
        seed,
        resolved: ratio(true)?,
        full: ratio(false)?,
    })
}

// Numerator and denominator per unit length of a roof of `i`, given the
// accumulated coefficient sums of the enclosing roofs.
#[allow(clippy::too_many_arguments)]
fn transplant_rec(
    sigma: &Disarrangement,
    omega: &Disarrangement,
    p: f64,
    a: &CoefficientFamily,
    term: &dyn Fn(&DyadicInterval) -> (f64, f64),
    i: DyadicInterval,
    cn: f64,
    cd: f64,
    resolved: bool,
) -> (f64, f64) {
    let e = p / 2.0;
    if !sigma.active(&i) {
        let inside = |f: &dyn Fn(&DyadicInterval, f64) -> f64| -> Vec<(f64, f64, f64)> {
            a.entries
                .iter()
                .filter(|(j, _)| i.contains(j) && *j != i)
                .map(|(j, c)| (j.left(), j.right(), f(j, *c)))
                .collect()
        };
        let mut tn = inside(&|j, c| c * c * sigma.seed.mean(j).powi(2));
        let mut td = inside(&|_, c| c * c);
        tn.push((i.left(), i.right(), cn));
        td.push((i.left(), i.right(), cd));
        let len = i.len();
        return (
            power_integral(&tn, omega.seed(), e) / len,
            power_integral(&td, sigma.seed(), e) / len,
        );
    }
    let (hm, hp) = sigma.walk.absorbed(sigma.n, 0);
    let (l, r) = i.children();
    let (ln, ld) = term(&l);
    let (rn, rd) = term(&r);
    let left = transplant_rec(sigma, omega, p, a, term, l, cn + ln, cd + ld, resolved);
    let right = transplant_rec(sigma, omega, p, a, term, r, cn + rn, cd + rd, resolved);
    let mut num = hm * left.0 + hp * right.0;
    let mut den = hm * left.1 + hp * right.1;
    if !resolved {
        let len = i.len();
        num += cn.powf(e) * omega.unresolved_integral(i, 0, 0) / len;
        den += cd.powf(e) * sigma.unresolved_integral(i, 0, 0) / len;
    }
    (num, den)
}
