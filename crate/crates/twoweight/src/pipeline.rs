//! End-to-end driver: seed, small-step disarrangement, remodeling, tensor
//! extension, characteristic battery and a machine-readable certification
//! bundle.
//!
//! The seed densities are built at the dual exponent and swapped, so the
//! pipeline pair at `p` is `σ := ω_{p′}`, `ω := σ_{p′}`. The small-step output
//! lives many dyadic levels deep; it is materialized as `𝔼_L G̃` with
//! `L = remodel.levels` before remodeling. The rectangular headline value is
//! the seed's rectangular functional carried through the exact transplant
//! identities and the measured remodel retention; the same functional on the
//! materialized final pair is reported next to it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::characteristics::{
    interval_doubling_sample, planar_doubling_sample, quadratic_ap_functional, random_intervals, random_squares,
    rect_quadratic_functional, scalar_ap, scalar_ap_dyadic, two_tailed_ap_estimate, full_testing_bound,
    CharacteristicReport, CoefficientFamily, CubeFamily, ReportKind, Square,
};
use crate::dyadic::{dyadic_doubling, StepWeight1D};
use crate::error::{Error, Result};
use crate::maximal::{
    fs_calibration, fs_envelope, indicator_tests, maximal_lp, maximal_norm_lower,
};
use crate::remodel::{
    ap_over_k, choose_schedule, quadratic_retention, remodel_weight, supervised_survivors, transplant_family, CheckOutcome, Retention,
    ScheduleK, MAX_TOTAL_LEVEL,
};
use crate::riesz::{triple_testing_estimate, ut_check, QuadratureConfig, TensorWeight2D, UtValues};
use crate::seed::{seed_functional, truncated_pair, SeedConfig};
use crate::smallstep::{
    audit, resolved_ap, transplanted_functional, Closure, Disarrangement, Rearrangement, SmallStepConfig,
};

/// Factor within which the testing estimates must stay of the scalar `A_p`.
pub const TESTING_FACTOR: f64 = 4.0;
/// Factor within which the two-tailed upper bound must stay of the scalar `A_p`.
pub const TWO_TAILED_FACTOR: f64 = 2.0;
/// Headline separation required of the rectangular lower bound.
pub const SEPARATION_TARGET: f64 = 2.0;
/// Relative slack for comparisons that hold exactly in exact arithmetic.
pub const EXACT_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedKind {
    #[default]
    Sawi,
    /// Both weights identically one; every characteristic equals one.
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulePolicy {
    #[default]
    Greedy,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemodelConfig {
    pub policy: SchedulePolicy,
    /// Materialization depth of `G̃` and number of remodeled levels.
    pub levels: u32,
    pub eps: f64,
    pub k_cap: u32,
    /// Used by the explicit policy; `k[0] = 0`.
    pub k: Vec<u32>,
}

impl Default for RemodelConfig {
    fn default() -> Self {
        Self {
            policy: SchedulePolicy::Greedy,
            levels: 3,
            eps: 0.1,
            k_cap: 8,
            k: vec![0, 4, 4, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    /// Random squares for the testing and two-tailed estimates.
    pub testing_squares: usize,
    /// Corner squares `[0,2^-l)²` added to the testing family.
    pub corner_squares: u32,
    /// Random intervals and squares for `A_p` and doubling samples.
    pub samples: usize,
    /// Testing squares span at most this many cells of the final grid.
    pub max_cube_cells: usize,
    pub annuli: u32,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            testing_squares: 24,
            corner_squares: 4,
            samples: 4000,
            max_cube_cells: 1024,
            annuli: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaximalConfig {
    pub alpha: f64,
    /// Exponent of the maximal inequality; the seed is built at this exponent.
    pub p: f64,
    pub m_start: u32,
    pub m_max: u32,
    pub growth_target: f64,
    /// Base level and small-step parameters of the monotonicity check.
    pub rearrangement_level: u32,
    pub smallstep: SmallStepConfig,
    pub fs_cases: usize,
}

impl Default for MaximalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            p: 4.0 / 3.0,
            m_start: 4,
            m_max: 12,
            growth_target: 2.0,
            rearrangement_level: 5,
            smallstep: SmallStepConfig {
                d: 2,
                generations: 3,
                n_explore: Some(9),
                ..SmallStepConfig::default()
            },
            fs_cases: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of every random sample; required.
    pub rng_seed: u64,
    #[serde(default)]
    pub seed_kind: SeedKind,
    /// Bound on the resolved dyadic doubling after the small step, `1 + τ`.
    #[serde(default = "default_tau")]
    pub tau_target: f64,
    #[serde(default)]
    pub seed: SeedConfig,
    #[serde(default)]
    pub smallstep: SmallStepConfig,
    #[serde(default)]
    pub remodel: RemodelConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub battery: BatteryConfig,
    #[serde(default)]
    pub maximal: MaximalConfig,
    /// Output directory; command line and environment take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

fn default_tau() -> f64 {
    0.2
}

impl PipelineConfig {
    pub fn with_rng_seed(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            seed_kind: SeedKind::default(),
            tau_target: default_tau(),
            seed: SeedConfig::default(),
            smallstep: SmallStepConfig::default(),
            remodel: RemodelConfig::default(),
            quadrature: QuadratureConfig::default(),
            battery: BatteryConfig::default(),
            maximal: MaximalConfig::default(),
            out_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.seed.validate()?;
        self.smallstep.validate()?;
        self.quadrature.validate()?;
        if !(self.tau_target > 0.0 && self.tau_target < 0.5) {
            return Err(Error::Config(format!("tau_target must lie in (0, 1/2), got {}", self.tau_target)));
        }
        let r = &self.remodel;
        if r.levels == 0 || r.levels > self.seed.m_max {
            return Err(Error::Config(format!("remodel.levels must lie in 1..=m_max, got {}", r.levels)));
        }
        if !(r.eps > 0.0 && r.eps < 1.0) {
            return Err(Error::Config(format!("remodel.eps must lie in (0,1), got {}", r.eps)));
        }
        if r.k_cap < 2 || r.k_cap as u64 * r.levels as u64 > MAX_TOTAL_LEVEL as u64 {
            return Err(Error::Config(format!(
                "need 2 <= k_cap and k_cap * levels <= {MAX_TOTAL_LEVEL}, got k_cap = {}",
                r.k_cap
            )));
        }
        if r.policy == SchedulePolicy::Explicit {
            if r.k.len() != r.levels as usize + 1 {
                return Err(Error::Config(format!("explicit schedule needs {} entries", r.levels + 1)));
            }
            ScheduleK::new(r.k.clone(), r.levels)?;
        }
        let b = &self.battery;
        if b.testing_squares + b.corner_squares as usize == 0 || b.samples == 0 || b.max_cube_cells == 0 {
            return Err(Error::Config("battery sizes must be positive".into()));
        }
        let m = &self.maximal;
        if !(m.alpha > 0.0 && m.alpha < 1.0 && m.p > 1.0) || m.m_start == 0 || m.m_start > m.m_max || m.m_max > 20 {
            return Err(Error::Config("maximal: need alpha in (0,1), p > 1, 1 <= m_start <= m_max <= 20".into()));
        }
        m.smallstep.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

const TEMPLATE_NOTES: &[(&str, &str)] = &[
    ("rng_seed", "required; seeds every random sample"),
    ("seed_kind", "sawi | constant"),
    ("tau_target", "resolved small-step doubling must stay below 1 + tau"),
    ("seed.p", "even exponent >= 4"),
    ("seed.alpha", "log exponent in (0,1)"),
    ("seed.m_max", "seed truncation level"),
    ("seed.gamma_target", "seed functional target at the dual exponent"),
    ("smallstep.d", "walk threshold; n_explore defaults to 8 d^2 when absent"),
    ("smallstep.generations", "nested small-step generations"),
    ("smallstep.resolution", "level of the dumped projection"),
    ("smallstep.audit_level", "deepest level of the doubling and A_p audits"),
    ("remodel.policy", "greedy | explicit"),
    ("remodel.levels", "materialization depth and remodeled levels"),
    ("remodel.eps", "tolerance of the oscillation checks and retention"),
    ("remodel.k_cap", "largest k tried per level"),
    ("remodel.k", "explicit schedule, k[0] = 0"),
    ("quadrature.gauss_order", "Gauss-Legendre order per panel"),
    ("quadrature.cell_nodes", "nodes per grid cell"),
    ("quadrature.edge_depth", "geometric refinement toward horizontal edges"),
    ("quadrature.tail_fraction", "far-field cutoff share"),
    ("quadrature.max_rings", "far-field ring cap"),
    ("quadrature.tolerance", "refinement agreement"),
    ("quadrature.certify", "recompute every cube refined"),
    ("battery.testing_squares", "random testing squares"),
    ("battery.corner_squares", "corner squares [0,2^-l)^2"),
    ("battery.samples", "random intervals and squares for A_p and doubling"),
    ("battery.max_cube_cells", "testing squares span at most this many final cells"),
    ("battery.annuli", "annuli of the two-tailed bound"),
    ("maximal.alpha", "seed log exponent"),
    ("maximal.p", "exponent of the maximal inequality"),
    ("maximal.m_start", "first seed level"),
    ("maximal.m_max", "last seed level"),
    ("maximal.growth_target", "required growth of the norm lower bound"),
    ("maximal.rearrangement_level", "seed level of the monotonicity check"),
    ("maximal.fs_cases", "random vector-valued spot checks per exponent"),
    ("maximal.smallstep.d", "walk threshold of the rearrangement"),
    ("maximal.smallstep.n_explore", "exploration depth of the rearrangement"),
];

/// Default configuration as TOML with every default annotated.
pub fn config_template() -> String {
    let text = toml::to_string(&PipelineConfig::with_rng_seed(0)).expect("config serializes");
    let mut section = String::new();
    let mut out = String::from("# twoweight pipeline configuration; all values shown are defaults\n");
    for line in text.lines() {
        let t = line.trim();
        if let Some(s) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = format!("{s}.");
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let key = t.split('=').next().unwrap_or("").trim();
        let full = format!("{section}{key}");
        match TEMPLATE_NOTES.iter().find(|(k, _)| *k == full) {
            Some((_, note)) => out.push_str(&format!("{line}  # {note}\n")),
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Seed,
    Smallstep,
    Remodel,
    Tensor,
    Certify,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Seed => "seed",
            Stage::Smallstep => "smallstep",
            Stage::Remodel => "remodel",
            Stage::Tensor => "tensor",
            Stage::Certify => "certify",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub reports: Vec<CharacteristicReport>,
}

/// Cell values of both weights at one stage, projected to at most `DUMP_LEVEL`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub stage: Stage,
    pub level: u32,
    pub full_level: u32,
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
}

pub const DUMP_LEVEL: u32 = 12;

impl StageWeights {
    fn new(stage: Stage, sigma: &StepWeight1D, omega: &StepWeight1D) -> Self {
        let full_level = sigma.base_level().max(omega.base_level());
        let level = full_level.min(DUMP_LEVEL);
        let at = |w: &StepWeight1D| w.refine(full_level).level_means(level).to_vec();
        Self {
            stage,
            level,
            full_level,
            sigma: at(sigma),
            omega: at(omega),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtRow {
    pub t: usize,
    pub k_next: u32,
    /// Whose oscillation enters: `sigma` or `omega`.
    pub weight: String,
    pub square: Square,
    pub values: UtValues,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    /// `stage/quantity` keys of the reports the verdict reads.
    pub refs: Vec<String>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub crate_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationBundle {
    pub provenance: Provenance,
    pub config: PipelineConfig,
    pub schedule: Option<ScheduleK>,
    pub weights: Vec<StageWeights>,
    pub stages: Vec<StageRecord>,
    pub ut_table: Vec<UtRow>,
    pub verdicts: Vec<Verdict>,
    pub separation_ratio: Option<f64>,
}

impl CertificationBundle {
    pub fn empty(cfg: &PipelineConfig) -> Self {
        Self {
            provenance: Provenance {
                config_hash: cfg.hash(),
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            config: cfg.clone(),
            schedule: None,
            weights: Vec::new(),
            stages: Vec::new(),
            ut_table: Vec::new(),
            verdicts: Vec::new(),
            separation_ratio: None,
        }
    }

    pub fn report(&self, stage: Stage, name: &str) -> Option<&CharacteristicReport> {
        self.stages
            .iter()
            .filter(|s| s.stage == stage)
            .flat_map(|s| &s.reports)
            .find(|r| r.name == name)
    }

    pub fn value(&self, stage: Stage, name: &str) -> Option<f64> {
        self.report(stage, name).map(|r| r.value)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    fn push(&mut self, stage: Stage, r: CharacteristicReport) {
        match self.stages.last_mut() {
            Some(s) if s.stage == stage => s.reports.push(r),
            _ => self.stages.push(StageRecord { stage, reports: vec![r] }),
        }
    }

    fn judge(&mut self, name: &str, pass: bool, refs: &[(Stage, &str)], detail: String) {
        for (s, q) in refs {
            debug_assert!(self.report(*s, q).is_some(), "verdict {name} reads missing {q}");
        }
        log::info!("verdict {name}: {} ({detail})", if pass { "pass" } else { "fail" });
        self.verdicts.push(Verdict {
            name: name.to_string(),
            pass,
            refs: refs.iter().map(|(s, q)| format!("{}/{q}", s.as_str())).collect(),
            detail,
        });
    }
}

fn named(mut r: CharacteristicReport, name: &str) -> CharacteristicReport {
    r.name = name.to_string();
    r
}

fn value(name: &str, v: f64, kind: ReportKind, family: &str) -> CharacteristicReport {
    CharacteristicReport::new(name, v, kind, family)
}

fn abort(stage: Stage, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.as_str().to_string(),
            reason: e.to_string(),
        },
    }
}

/// Extremal family `I_k = [0, 2^-k)`, `a_k = k^η`, `k = 1..=m`.
pub fn extremal_family(cfg: &SeedConfig, m: u32) -> CoefficientFamily {
    CoefficientFamily::new(
        (1..=m)
            .map(|k| (crate::dyadic::DyadicInterval::new(k as i32, 0), (k as f64).powf(cfg.eta())))
            .collect(),
    )
}

/// Pipeline pair at `p`: the dual-exponent densities, swapped.
pub fn pipeline_seed(cfg: &PipelineConfig) -> (StepWeight1D, StepWeight1D) {
    let m = cfg.seed.m_max;
    match cfg.seed_kind {
        SeedKind::Constant => (StepWeight1D::constant(1.0, m), StepWeight1D::constant(1.0, m)),
        SeedKind::Sawi => {
            let (s, w) = truncated_pair(cfg.seed.alpha, cfg.seed.q(), m);
            (w, s)
        }
    }
}

/// Where the staged run stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunUntil {
    Seed,
    Smallstep,
    Remodel,
    Full,
}

/// Every stage and the full battery.
pub fn build_counterexample(cfg: &PipelineConfig) -> Result<CertificationBundle> {
    run_pipeline(cfg, RunUntil::Full)
}

pub fn run_pipeline(cfg: &PipelineConfig, until: RunUntil) -> Result<CertificationBundle> {
    cfg.validate()?;
    let mut b = CertificationBundle::empty(cfg);
    let p = cfg.seed.p();
    let pp = cfg.seed.q();
    let m = cfg.seed.m_max;
    let fam = extremal_family(&cfg.seed, m);

    // seed
    log::info!("seed: M = {m}");
    let (sigma, omega) = pipeline_seed(cfg);
    let seed_ap = named(scalar_ap_dyadic(&sigma, &omega, p, m), "scalar_ap");
    let seed_quad = quadratic_ap_functional(&sigma, &omega, p, &fam).map_err(|e| abort(Stage::Seed, e))?;
    let dual = match cfg.seed_kind {
        SeedKind::Sawi => seed_functional(&cfg.seed, m).map_err(|e| abort(Stage::Seed, e))?,
        SeedKind::Constant => quadratic_ap_functional(&omega, &sigma, pp, &fam)
            .map_err(|e| abort(Stage::Seed, e))?
            .value,
    };
    let seed_rect = rect_quadratic_functional(
        &TensorWeight2D::new(sigma.clone()),
        &TensorWeight2D::new(omega.clone()),
        cfg.seed.p,
        &fam,
    )
    .map_err(|e| abort(Stage::Seed, e))?;
    b.weights.push(StageWeights::new(Stage::Seed, &sigma, &omega));
    b.push(Stage::Seed, seed_ap.clone());
    b.push(Stage::Seed, named(seed_quad.clone(), "quadratic_ap"));
    b.push(
        Stage::Seed,
        value("dual_quadratic_ap", dual, ReportKind::LowerBound, &format!("coefficients[{m}]")).param("p", pp),
    );
    b.push(Stage::Seed, named(seed_rect.clone(), "rect_quadratic_ap"));
    b.push(
        Stage::Seed,
        value(
            "dyadic_doubling_sigma",
            dyadic_doubling(&sigma, m),
            ReportKind::ExactMax,
            &format!("dyadic<= {m}"),
        ),
    );
    b.push(
        Stage::Seed,
        value(
            "dyadic_doubling_omega",
            dyadic_doubling(&omega, m),
            ReportKind::ExactMax,
            &format!("dyadic<= {m}"),
        ),
    );
    b.judge(
        "seed_target",
        dual >= cfg.seed.gamma_target,
        &[(Stage::Seed, "dual_quadratic_ap")],
        format!("{dual:.6} vs target {}", cfg.seed.gamma_target),
    );
    if until == RunUntil::Seed {
        return Ok(b);
    }

    // small step
    log::info!("smallstep: d = {}, generations = {}", cfg.smallstep.d, cfg.smallstep.generations);
    let st = Stage::Smallstep;
    let ss = &cfg.smallstep;
    let dis_s = Disarrangement::new(&sigma, ss).map_err(|e| abort(st, e))?;
    let dis_w = Disarrangement::new(&omega, ss).map_err(|e| abort(st, e))?;
    let (aud_s, aud_w) = (audit(&dis_s, ss.audit_level), audit(&dis_w, ss.audit_level));
    let ss_ap = resolved_ap(&dis_s, &dis_w, p, ss.audit_level);
    let tf = transplanted_functional(&dis_s, &dis_w, p, &fam).map_err(|e| abort(st, e))?;
    let unresolved = 1.0 - {
        let (a, c) = dis_s.walk().absorbed(ss.n_explore(), 0);
        a + c
    };
    let fam_audit = format!("dyadic<= {}", ss.audit_level);
    let doubling = aud_s.doubling_resolved.max(aud_w.doubling_resolved);
    b.push(st, value("resolved_scalar_ap", ss_ap, ReportKind::ExactMax, &fam_audit).param("p", p));
    b.push(st, value("resolved_doubling", doubling, ReportKind::ExactMax, &fam_audit));
    b.push(
        st,
        value(
            "doubling_all",
            aud_s.doubling_all.max(aud_w.doubling_all),
            ReportKind::ExactMax,
            &fam_audit,
        ),
    );
    b.push(
        st,
        value(
            "transfer_error",
            aud_s.transfer_error.max(aud_w.transfer_error),
            ReportKind::ExactMax,
            &fam_audit,
        )
        .param("roofs", (aud_s.roofs + aud_w.roofs) as f64),
    );
    b.push(
        st,
        value(
            "hull_violation",
            aud_s.hull_violation.max(aud_w.hull_violation),
            ReportKind::ExactMax,
            &fam_audit,
        ),
    );
    b.push(st, value("unresolved_mass", unresolved, ReportKind::Estimate, "walk"));
    let fam_desc = format!("coefficients[{}]", fam.len());
    b.push(st, value("transplanted_quadratic_ap", tf.resolved, ReportKind::LowerBound, &fam_desc).param("p", p));
    b.push(st, value("transplanted_quadratic_ap_full", tf.full, ReportKind::Estimate, &fam_desc).param("p", p));
    let ell = cfg.remodel.levels;
    let (sig_m, omg_m) = (
        dis_s.project(ell).map_err(|e| abort(st, e))?,
        dis_w.project(ell).map_err(|e| abort(st, e))?,
    );
    let mat_ap = scalar_ap_dyadic(&sig_m, &omg_m, p, ell).value;
    b.push(st, value("materialized_scalar_ap", mat_ap, ReportKind::ExactMax, &format!("dyadic<= {ell}")));
    let res = ss.resolution.min(ss.audit_level);
    b.weights.push(StageWeights::new(
        st,
        &dis_s.project(res).map_err(|e| abort(st, e))?,
        &dis_w.project(res).map_err(|e| abort(st, e))?,
    ));
    b.judge(
        "smallstep_transfer",
        aud_s.transfer_error.max(aud_w.transfer_error) <= 1e-12,
        &[(st, "transfer_error")],
        "resolved roof means equal supervisor means".into(),
    );
    let rel = (tf.resolved - tf.seed).abs() / tf.seed;
    b.judge(
        "smallstep_transplant",
        rel <= 1e-10,
        &[(st, "transplanted_quadratic_ap"), (Stage::Seed, "quadratic_ap")],
        format!("relative gap {rel:.3e}"),
    );
    b.judge(
        "smallstep_ap",
        ss_ap <= seed_ap.value * (1.0 + EXACT_SLACK),
        &[(st, "resolved_scalar_ap"), (Stage::Seed, "scalar_ap")],
        format!("{ss_ap:.6} vs seed {:.6}", seed_ap.value),
    );
    b.judge(
        "smallstep_doubling",
        doubling <= 1.0 + cfg.tau_target,
        &[(st, "resolved_doubling")],
        format!("{doubling:.4} vs 1 + {}", cfg.tau_target),
    );
    if until == RunUntil::Smallstep {
        return Ok(b);
    }

    // remodel
    let st = Stage::Remodel;
    let rc = &cfg.remodel;
    let quad = &cfg.quadrature;
    let ret_fam = CoefficientFamily::new(fam.entries.iter().copied().filter(|(j, _)| j.level as u32 <= ell).collect());
    let schedule = match rc.policy {
        SchedulePolicy::Explicit => ScheduleK::new(rc.k.clone(), ell).map_err(|e| abort(st, e))?,
        SchedulePolicy::Greedy => choose_schedule(ell, ell, rc.k_cap, |s| {
            let t = s.levels();
            log::info!("remodel: trying k = {:?}", s.k);
            let rows = ut_rows(&sig_m, &omg_m, s, t as usize - 1, p, rc.eps, quad)?;
            if let Some(r) = rows.iter().find(|r| !r.values.passes(rc.eps)) {
                return Ok(Some(format!("U_{} ({})", r.t, r.weight)));
            }
            retention_check(&sig_m, &omg_m, p, &ret_fam, s, rc.eps)
        })
        .map_err(|e| abort(st, e))?,
    };
    log::info!("remodel: schedule {:?}", schedule.k);
    let mut rows = Vec::new();
    for t in 0..ell as usize {
        rows.extend(ut_rows(&sig_m, &omg_m, &schedule.prefix(t as u32 + 1), t, p, rc.eps, quad).map_err(|e| abort(st, e))?);
    }
    let sig_h = remodel_weight(&sig_m, &schedule, ell).map_err(|e| abort(st, e))?;
    let omg_h = remodel_weight(&omg_m, &schedule, ell).map_err(|e| abort(st, e))?;
    let retention = quadratic_retention(&sig_m, &omg_m, p, &ret_fam, &schedule).map_err(|e| abort(st, e))?;
    let k_ap = ap_over_k(&sig_h, &omg_h, p, &schedule, ell);
    let final_level = schedule.cumulative(ell);
    let intervals = random_intervals(cfg.rng_seed, cfg.battery.samples, 0.0, final_level as f64 + 2.0);
    let ivs = CubeFamily::Intervals(intervals.clone());
    let sampled_ap = named(scalar_ap(&sig_h, &omg_h, p, &ivs).map_err(|e| abort(st, e))?, "sampled_scalar_ap");
    let dbl = interval_doubling_sample(&sig_h, &intervals).max(interval_doubling_sample(&omg_h, &intervals));
    b.push(st, value("k_scalar_ap", k_ap, ReportKind::ExactMax, &format!("k-grid<= {ell}")).param("p", p));
    b.push(st, sampled_ap.clone());
    b.push(st, value("interval_doubling", dbl, ReportKind::LowerBound, &ivs.describe()));
    push_retention(&mut b, &retention, &ret_fam);
    b.push(
        st,
        value(
            "ut_max",
            rows.iter().map(|r| r.values.strong.max(r.values.basic_weak.abs()).max(r.values.weak())).fold(0.0, f64::max),
            ReportKind::Estimate,
            &format!("squares[{}]", rows.len()),
        ),
    );
    b.weights.push(StageWeights::new(st, &sig_h, &omg_h));
    b.judge(
        "remodel_ap",
        k_ap <= mat_ap * (1.0 + EXACT_SLACK),
        &[(st, "k_scalar_ap"), (Stage::Smallstep, "materialized_scalar_ap")],
        format!("{k_ap:.6} vs {mat_ap:.6}"),
    );
    b.judge(
        "remodel_retention",
        retention.ratio() >= 1.0 - rc.eps,
        &[(st, "retention")],
        format!("ratio {:.6}", retention.ratio()),
    );
    let ut_ok = rows.iter().all(|r| r.pass);
    b.judge("ut_checks", ut_ok, &[(st, "ut_max")], format!("{} rows at eps {}", rows.len(), rc.eps));
    b.ut_table = rows;
    b.schedule = Some(schedule.clone());
    if until == RunUntil::Remodel {
        return Ok(b);
    }

    // tensor
    let st = Stage::Tensor;
    let (ts, tw) = (TensorWeight2D::new(sig_h.clone()), TensorWeight2D::new(omg_h.clone()));
    let squares = random_squares(cfg.rng_seed ^ 0x5a5a, cfg.battery.samples, 0.0, final_level as f64 + 2.0);
    let sq_fam = CubeFamily::Squares(squares.clone());
    let planar_ap = named(scalar_ap(&sig_h, &omg_h, p, &sq_fam).map_err(|e| abort(st, e))?, "planar_scalar_ap");
    let (ds, dw) = (planar_doubling_sample(&ts, &squares), planar_doubling_sample(&tw, &squares));
    b.push(st, planar_ap.clone());
    b.push(st, value("planar_doubling_sigma", ds, ReportKind::LowerBound, &sq_fam.describe()));
    b.push(st, value("planar_doubling_omega", dw, ReportKind::LowerBound, &sq_fam.describe()));

    // certify
    let st = Stage::Certify;
    let cubes = testing_squares(cfg, final_level);
    log::info!("certify: {} testing squares at final level {final_level}", cubes.len());
    let tt = triple_testing_estimate(&ts, &tw, p, &cubes, quad).map_err(|e| abort(st, e))?;
    let tt_dual = triple_testing_estimate(&tw, &ts, pp, &cubes, quad).map_err(|e| abort(st, e))?;
    let two = two_tailed_ap_estimate(&ts, &tw, p, &cubes, cfg.battery.annuli, (ds, dw)).map_err(|e| abort(st, e))?;
    let full = full_testing_bound(&tt.report, &two.upper, p);
    let moved = transplant_family(&ret_fam, &schedule).map_err(|e| abort(st, e))?;
    let rect_mat = rect_quadratic_functional(&ts, &tw, cfg.seed.p, &moved).map_err(|e| abort(st, e))?;
    let structural = seed_rect.value * (tf.resolved / tf.seed) * retention.ratio();
    let ap_max = [seed_ap.value, sampled_ap.value, planar_ap.value, k_ap].into_iter().fold(0.0, f64::max);
    let testing_max = tt.report.value.max(tt_dual.report.value);
    let ratio = structural / ap_max.max(testing_max);
    b.push(st, named(tt.report.clone(), "triple_testing"));
    b.push(st, named(tt_dual.report.clone(), "triple_testing_dual"));
    b.push(st, two.lower.clone());
    b.push(st, two.upper.clone());
    b.push(st, full);
    b.push(st, named(rect_mat, "rect_quadratic_ap_materialized"));
    b.push(
        st,
        value("rect_quadratic_ap", structural, ReportKind::Estimate, &seed_rect.family)
            .param("seed", seed_rect.value)
            .param("smallstep_factor", tf.resolved / tf.seed)
            .param("retention", retention.ratio()),
    );
    b.push(st, value("scalar_ap_max", ap_max, ReportKind::ExactMax, "stages"));
    b.push(st, value("separation_ratio", ratio, ReportKind::Estimate, "headline"));
    for (name, r) in [("testing_vs_ap", &tt.report), ("testing_dual_vs_ap", &tt_dual.report)] {
        b.judge(
            name,
            r.value <= TESTING_FACTOR * ap_max && r.value * TESTING_FACTOR >= ap_max,
            &[(st, if name == "testing_vs_ap" { "triple_testing" } else { "triple_testing_dual" }), (st, "scalar_ap_max")],
            format!("{:.4} within a factor {TESTING_FACTOR} of {ap_max:.4}", r.value),
        );
    }
    b.judge(
        "two_tailed_vs_ap",
        two.upper.value <= TWO_TAILED_FACTOR * ap_max,
        &[(st, "two_tailed_ap_upper"), (st, "scalar_ap_max")],
        format!("{:.4} vs {TWO_TAILED_FACTOR} x {ap_max:.4}", two.upper.value),
    );
    b.judge(
        "rect_vs_testing",
        structural >= SEPARATION_TARGET * testing_max,
        &[(st, "rect_quadratic_ap"), (st, "triple_testing"), (st, "triple_testing_dual")],
        format!("{structural:.4} vs {SEPARATION_TARGET} x {testing_max:.4}"),
    );
    b.judge(
        "separation",
        ratio > SEPARATION_TARGET,
        &[(st, "separation_ratio")],
        if ratio > SEPARATION_TARGET {
            format!("ratio {ratio:.4}")
        } else {
            format!("no separation: ratio {ratio:.4}")
        },
    );
    b.separation_ratio = Some(ratio);
    Ok(b)
}

fn push_retention(b: &mut CertificationBundle, r: &Retention, fam: &CoefficientFamily) {
    b.push(
        Stage::Remodel,
        value("retention", r.ratio(), ReportKind::Estimate, &format!("coefficients[{}]", fam.len()))
            .param("before", r.before)
            .param("after", r.after)
            .param("transition_mass", r.transition_mass),
    );
}

fn retention_check(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    p: f64,
    fam: &CoefficientFamily,
    s: &ScheduleK,
    eps: f64,
) -> Result<CheckOutcome> {
    let t = s.levels();
    if !fam.entries.iter().any(|(j, _)| j.level as u32 <= t) {
        return Ok(None);
    }
    let short = CoefficientFamily::new(fam.entries.iter().copied().filter(|(j, _)| j.level as u32 <= t).collect());
    for (j, _) in &short.entries {
        if supervised_survivors(j, s)?.is_empty() {
            return Ok(Some("retention".into()));
        }
    }
    match quadratic_retention(sigma, omega, p, &short, s) {
        Ok(r) if r.ratio() >= 1.0 - eps => Ok(None),
        Ok(_) | Err(Error::EmptyFamily) => Ok(Some("retention".into())),
        Err(e) => Err(e),
    }
}

/// Oscillation checks at level `t` of `s` for both weights on two squares.
pub fn ut_rows(
    sigma: &StepWeight1D,
    omega: &StepWeight1D,
    s: &ScheduleK,
    t: usize,
    p: f64,
    eps: f64,
    cfg: &QuadratureConfig,
) -> Result<Vec<UtRow>> {
    let tt = t as u32;
    let (s_t, w_t) = (remodel_weight(sigma, s, tt)?, remodel_weight(omega, s, tt)?);
    let side = (-(s.cumulative(tt) as f64)).exp2();
    let mut squares = vec![Square::new(0.0, 0.0, side)];
    if t > 0 {
        squares.push(Square::new(0.5, 0.0, side));
    }
    let mut rows = Vec::new();
    for (name, g, g_t) in [("sigma", sigma, &s_t), ("omega", omega, &w_t)] {
        let next = remodel_weight(g, s, tt + 1)?;
        let lvl = next.base_level();
        let coarse = g_t.refine(lvl);
        let osc = StepWeight1D::from_cells(lvl, |c| next.values()[c] - coarse.values()[c])?;
        for q in &squares {
            let v = ut_check(t, &s.k, &s_t, &w_t, &osc, q, p, cfg)?;
            rows.push(UtRow {
                t,
                k_next: s.k[t + 1],
                weight: name.to_string(),
                square: *q,
                pass: v.passes(eps),
                values: v,
            });
        }
    }
    Ok(rows)
}

fn testing_squares(cfg: &PipelineConfig, final_level: u32) -> Vec<Square> {
    let cap = cfg.battery.max_cube_cells as f64;
    let lmin = (final_level as f64 - cap.log2()).max(0.0).ceil();
    let mut out: Vec<Square> = (0..cfg.battery.corner_squares)
        .map(|j| {
            let side = (-(lmin + j as f64)).exp2();
            Square::new(0.0, 0.0, side)
        })
        .collect();
    out.extend(random_squares(cfg.rng_seed, cfg.battery.testing_squares, lmin, lmin + 4.0));
    out
}

/// Running order of the stages in a bundle.
pub fn stage_order(b: &CertificationBundle) -> Vec<Stage> {
    b.stages.iter().map(|s| s.stage).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: [&str; 6] = ["stage", "quantity", "kind", "value", "tolerance", "verdict"];

fn verdict_index(b: &CertificationBundle) -> BTreeMap<String, bool> {
    let mut idx: BTreeMap<String, bool> = BTreeMap::new();
    for v in &b.verdicts {
        for r in &v.refs {
            let e = idx.entry(r.clone()).or_insert(true);
            *e &= v.pass;
        }
    }
    idx
}

/// Serialized report; deterministic for a given bundle.
pub fn render_report(b: &CertificationBundle, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(b)?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let idx = verdict_index(b);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER)?;
            for s in &b.stages {
                for r in &s.reports {
                    let key = format!("{}/{}", s.stage.as_str(), r.name);
                    let verdict = idx.get(&key).map_or("", |&ok| if ok { "pass" } else { "fail" });
                    w.write_record([
                        s.stage.as_str(),
                        &r.name,
                        r.kind.as_str(),
                        &r.value.to_string(),
                        &r.tolerance.to_string(),
                        verdict,
                    ])?;
                }
            }
            for (i, row) in b.ut_table.iter().enumerate() {
                let v = &row.values;
                for (q, x) in [("strong", v.strong), ("basic_weak", v.basic_weak), ("weak", v.weak())] {
                    w.write_record([
                        "remodel",
                        &format!("ut_{q}#{i}"),
                        "estimate",
                        &x.to_string(),
                        &b.config.remodel.eps.to_string(),
                        if row.pass { "pass" } else { "fail" },
                    ])?;
                }
            }
            w.into_inner().map_err(|e| Error::Io(e.into_error()))
        }
    }
}

/// Write `report.json` or `report.csv` into `dir`.
pub fn emit_report(b: &CertificationBundle, format: ReportFormat, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(match format {
        ReportFormat::Json => "report.json",
        ReportFormat::Csv => "report.csv",
    });
    let mut f = std::fs::File::create(&path)?;
    f.write_all(&render_report(b, format)?)?;
    Ok(path)
}

/// Outcome of the maximal-function battery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximalBundle {
    pub reports: Vec<CharacteristicReport>,
    pub verdicts: Vec<Verdict>,
}

impl MaximalBundle {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.name == name).map(|r| r.value)
    }
}

/// Norm growth over the seed levels, monotonicity under the measure-preserving
/// rearrangement and vector-valued spot checks.
pub fn maximal_battery(cfg: &MaximalConfig, rng_seed: u64) -> Result<MaximalBundle> {
    let mut reports = Vec::new();
    let mut verdicts = Vec::new();
    let mut norms = Vec::new();
    for m in (cfg.m_start..=cfg.m_max).step_by(2) {
        let (s, w) = truncated_pair(cfg.alpha, cfg.p, m);
        let r = maximal_norm_lower(&s, &w, cfg.p, &indicator_tests(m))?.param("m", m as f64);
        norms.push((m, r.value));
        reports.push(named(r, &format!("maximal_norm_m{m}")));
    }
    let base = norms[0].1;
    let growth = norms.iter().map(|&(_, v)| v / base).fold(0.0, f64::max);
    reports.push(value("maximal_growth", growth, ReportKind::Estimate, "levels").param("m_start", cfg.m_start as f64));
    verdicts.push(Verdict {
        name: "maximal_growth".into(),
        pass: growth >= cfg.growth_target,
        refs: vec!["maximal_growth".into()],
        detail: format!("{growth:.4} vs {}", cfg.growth_target),
    });

    let lvl = cfg.rearrangement_level;
    let (s, w) = truncated_pair(cfg.alpha, cfg.p, lvl);
    let phi = Rearrangement::build(&cfg.smallstep, lvl, Closure::Forced)?;
    let mut tests = indicator_tests(lvl);
    tests.push(s.map(|v| v.powf(-1.0 / (cfg.p - 1.0))));
    let mut worst = f64::INFINITY;
    for f in &tests {
        let (n0, d0) = maximal_lp(&s, &w, f, cfg.p, &Rearrangement::identity());
        let (n1, d1) = maximal_lp(&s, &w, f, cfg.p, &phi);
        if d0 > 0.0 && n0 > 0.0 {
            worst = worst.min((n1 / d1) / (n0 / d0));
        }
    }
    reports.push(
        value("rearranged_over_seed", worst, ReportKind::ExactMax, &format!("tests[{}]", tests.len()))
            .param("pieces", phi.pieces.len() as f64),
    );
    verdicts.push(Verdict {
        name: "maximal_monotone".into(),
        pass: worst >= 1.0 - 1e-9,
        refs: vec!["rearranged_over_seed".into()],
        detail: format!("smallest ratio {worst:.12}"),
    });

    for (k, p) in [4.0 / 3.0, 2.0, 4.0].into_iter().enumerate() {
        let seen = fs_calibration(p, cfg.fs_cases, rng_seed.wrapping_add(k as u64 + 1))?;
        let env = fs_envelope(p).expect("frozen exponent");
        let name = format!("fs_ratio_p{p:.3}");
        reports.push(value(&name, seen, ReportKind::LowerBound, &format!("cases[{}]", cfg.fs_cases)).param("envelope", env));
        verdicts.push(Verdict {
            name: format!("fs_envelope_p{p:.3}"),
            pass: seen <= env,
            refs: vec![name],
            detail: format!("{seen:.4} vs {env}"),
        });
    }
    Ok(MaximalBundle { reports, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rng_seed: u64) -> PipelineConfig {
        let mut c = PipelineConfig::with_rng_seed(rng_seed);
        c.seed.m_max = 6;
        c.smallstep.audit_level = 8;
        c.smallstep.resolution = 6;
        c.battery = BatteryConfig {
            testing_squares: 2,
            corner_squares: 2,
            samples: 200,
            max_cube_cells: 64,
            annuli: 6,
        };
        c
    }

    #[test]
    fn template_parses_to_defaults() {
        let t = config_template();
        assert!(t.contains("# required"));
        let c = PipelineConfig::from_toml(&t).unwrap();
        assert_eq!(c, PipelineConfig::with_rng_seed(0));
    }

    #[test]
    fn rng_seed_is_mandatory() {
        assert!(matches!(PipelineConfig::from_toml("[seed]\np = 4\n"), Err(Error::Toml(_))));
        assert!(PipelineConfig::from_toml("rng_seed = 3\n").is_ok());
    }

    #[test]
    fn odd_p_rejected_up_front() {
        let e = PipelineConfig::from_toml("rng_seed = 1\n[seed]\np = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let mut c = PipelineConfig::with_rng_seed(1);
        c.seed.p = 3;
        assert!(matches!(build_counterexample(&c), Err(Error::Config(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = PipelineConfig::with_rng_seed(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.rng_seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn empty_bundle_has_header_only_csv() {
        let b = CertificationBundle::empty(&PipelineConfig::with_rng_seed(0));
        let out = String::from_utf8(render_report(&b, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(out, "stage,quantity,kind,value,tolerance,verdict\n");
    }

    #[test]
    fn seed_stage_json_round_trips() {
        let b = run_pipeline(&small(5), RunUntil::Seed).unwrap();
        assert_eq!(stage_order(&b), vec![Stage::Seed]);
        let text = render_report(&b, ReportFormat::Json).unwrap();
        let back: CertificationBundle = serde_json::from_slice(&text).unwrap();
        assert_eq!(back, b);
        assert_eq!(render_report(&back, ReportFormat::Json).unwrap(), text);
    }

    #[test]
    fn constant_seed_has_no_separation() {
        let mut c = small(9);
        c.seed_kind = SeedKind::Constant;
        c.seed.gamma_target = 0.5;
        let b = build_counterexample(&c).unwrap();
        for (stage, name) in [
            (Stage::Seed, "scalar_ap"),
            (Stage::Seed, "quadratic_ap"),
            (Stage::Seed, "rect_quadratic_ap"),
            (Stage::Smallstep, "resolved_scalar_ap"),
            (Stage::Remodel, "k_scalar_ap"),
            (Stage::Tensor, "planar_scalar_ap"),
            (Stage::Certify, "rect_quadratic_ap"),
        ] {
            let v = b.value(stage, name).unwrap();
            assert!((v - 1.0).abs() <= 1e-9, "{name}: {v}");
        }
        let r = b.separation_ratio.unwrap();
        assert!((r - 1.0).abs() <= 1e-9, "{r}");
        let v = b.verdict("separation").unwrap();
        assert!(!v.pass && v.detail.starts_with("no separation"));
    }

    #[test]
    fn stages_in_order_and_verdicts_resolve() {
        let b = build_counterexample(&small(3)).unwrap();
        assert_eq!(
            stage_order(&b),
            vec![Stage::Seed, Stage::Smallstep, Stage::Remodel, Stage::Tensor, Stage::Certify]
        );
        for v in &b.verdicts {
            for r in &v.refs {
                let (s, q) = r.split_once('/').unwrap();
                assert!(
                    b.stages.iter().any(|st| st.stage.as_str() == s && st.reports.iter().any(|x| x.name == q)),
                    "{r}"
                );
            }
        }
        let s = b.schedule.as_ref().unwrap();
        assert_eq!(s.k[0], 0);
        for t in 0..s.levels() as usize {
            let rows = ut_rows(
                &StepWeight1D::constant(1.0, 1),
                &StepWeight1D::constant(1.0, 1),
                &s.prefix(t as u32 + 1),
                t,
                4.0,
                0.1,
                &c_quad(),
            )
            .unwrap();
            assert!(rows.iter().all(|r| r.pass));
        }
        let csv = String::from_utf8(render_report(&b, ReportFormat::Csv).unwrap()).unwrap();
        assert!(csv.lines().count() > b.stages.iter().map(|s| s.reports.len()).sum::<usize>());
    }

    fn c_quad() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn explicit_schedule_is_used() {
        let mut c = small(4);
        c.remodel.policy = SchedulePolicy::Explicit;
        c.remodel.k = vec![0, 3, 3, 3];
        let b = run_pipeline(&c, RunUntil::Remodel).unwrap();
        assert_eq!(b.schedule.unwrap().k, vec![0, 3, 3, 3]);
        c.remodel.k = vec![0, 3, 1, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn maximal_battery_reports() {
        let cfg = MaximalConfig {
            m_max: 6,
            fs_cases: 10,
            ..MaximalConfig::default()
        };
        let m = maximal_battery(&cfg, 1).unwrap();
        assert!(m.value("maximal_norm_m4").unwrap() > 1.0);
        assert!(m.value("rearranged_over_seed").unwrap() >= 1.0 - 1e-9);
        assert!(m.verdicts.iter().any(|v| v.name == "fs_envelope_p4.000" && v.pass));
    }
}
