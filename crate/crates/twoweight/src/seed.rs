//! Seed pair: log-corrected power densities on `[0,½)`, rescaled to `[0,1)`
//! and truncated at a dyadic level, together with the extremal coefficient
//! family `I_k = [0, 2^-k)`, `a_k = k^η`.
//!
//! The densities are built with the dual exponent `q = p′`; the quadratic
//! functional grows at exponent `q` for `(σ_q, ω_q)`, which is the same as
//! growth of the dual functional at `p` for the swapped pair.

use serde::{Deserialize, Serialize};

use crate::characteristics::{quadratic_ap_functional, CoefficientFamily};
use crate::dyadic::{DyadicInterval, StepWeight1D};
use crate::error::{Error, Result};
use crate::quad;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sigma,
    Omega,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub p: u32,
    pub alpha: f64,
    #[serde(default)]
    pub eps: Option<f64>,
    pub m_max: u32,
    pub gamma_target: f64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            p: 4,
            alpha: 0.9,
            eps: None,
            m_max: 12,
            gamma_target: 1.06,
        }
    }
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 4 || !self.p.is_multiple_of(2) {
            return Err(Error::Config(format!("p must be an even integer >= 4, got {}", self.p)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        let e = self.eps();
        if !(e > 0.0 && e < self.alpha) {
            return Err(Error::Config(format!("eps must lie in (0, alpha), got {e}")));
        }
        if self.m_max == 0 || self.m_max > 26 {
            return Err(Error::Config(format!("m_max must lie in 1..=26, got {}", self.m_max)));
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or(self.alpha / 10.0)
    }

    pub fn p(&self) -> f64 {
        self.p as f64
    }

    /// Construction exponent `q = p′`.
    pub fn q(&self) -> f64 {
        let p = self.p();
        p / (p - 1.0)
    }

    /// `η` with `2η + 1 = (α − ε)·2/q`.
    pub fn eta(&self) -> f64 {
        (self.alpha - self.eps()) / self.q() - 0.5
    }
}

/// Density on `(0,½)` with exponent `q`; zero for `x ≥ ½`.
pub fn sawi_density(x: f64, role: Role, alpha: f64, q: f64) -> Result<f64> {
    if x <= 0.0 || x.is_nan() {
        return Err(Error::Precondition(format!("density queried at x = {x}")));
    }
    if x >= 0.5 {
        return Ok(0.0);
    }
    let l = (1.0 / x).ln();
    Ok(match role {
        Role::Sigma => 1.0 / (x * l.powf(1.0 + alpha)),
        Role::Omega => (x * l.powf(alpha)).powf(q - 1.0),
    })
}

/// `∫_a^b` of the density over `0 ≤ a < b ≤ ½`.
pub fn density_integral(role: Role, alpha: f64, q: f64, a: f64, b: f64) -> f64 {
    const TOL: f64 = 1e-12;
    if a > 0.0 {
        let f = |x: f64| sawi_density(x, role, alpha, q).unwrap_or(0.0);
        return quad::adaptive(&f, a, b, TOL * (b - a).min(1.0));
    }
    // u = ln(1/x), then t = 1/u maps [ln(1/b), ∞) onto (0, 1/ln(1/b)]
    let u0 = (1.0 / b).ln();
    let g = move |t: f64| -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let u = 1.0 / t;
        let v = match role {
            Role::Sigma => u.powf(-1.0 - alpha),
            Role::Omega => (-u * q).exp() * u.powf(alpha * (q - 1.0)),
        };
        v * u * u
    };
    quad::adaptive(&g, 0.0, 1.0 / u0, TOL)
}

/// Closed form `∫_0^x σ = (ln 1/x)^{-α}/α`, used as an oracle.
pub fn sigma_primitive(alpha: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (1.0 / x).ln().powf(-alpha) / alpha
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedPair {
    pub sigma: StepWeight1D,
    pub omega: StepWeight1D,
    pub m: u32,
    /// Exponent at which the extremal functional is evaluated.
    pub q: f64,
    pub a: Vec<f64>,
    pub intervals: Vec<DyadicInterval>,
    /// Functional value at the chosen level.
    pub functional: f64,
    /// Functional value for every level tried, starting at 1.
    pub history: Vec<f64>,
}

impl SeedPair {
    pub fn coefficients(&self) -> CoefficientFamily {
        extremal_family(self.m, self.a.clone())
    }
}

fn extremal_family(m: u32, a: Vec<f64>) -> CoefficientFamily {
    CoefficientFamily::new(
        (1..=m as i64)
            .zip(a)
            .map(|(k, ak)| (DyadicInterval::new(k as i32, 0), ak))
            .collect(),
    )
}

/// Truncated, rescaled densities at level `m` (cell means of the density).
pub fn truncated_pair(alpha: f64, q: f64, m: u32) -> (StepWeight1D, StepWeight1D) {
    let n = 1usize << m;
    // rescaled cell c covers [c/n, (c+1)/n); original coordinates are halved
    let cell = |role: Role, c: usize| {
        let a = c as f64 / n as f64 * 0.5;
        let b = (c + 1) as f64 / n as f64 * 0.5;
        density_integral(role, alpha, q, a, b) / (b - a)
    };
    let s = StepWeight1D::from_cells(m, |c| cell(Role::Sigma, c)).expect("level");
    let w = StepWeight1D::from_cells(m, |c| cell(Role::Omega, c)).expect("level");
    (s, w)
}

/// Extremal functional `(I_k, k^η)_{k ≤ m}` on the level-`m` truncation.
pub fn seed_functional(cfg: &SeedConfig, m: u32) -> Result<f64> {
    let (s, w) = truncated_pair(cfg.alpha, cfg.q(), m);
    let fam = extremal_family(m, (1..=m).map(|k| (k as f64).powf(cfg.eta())).collect());
    Ok(quadratic_ap_functional(&s, &w, cfg.q(), &fam)?.value)
}

/// Smallest `M ≤ m_max` whose functional exceeds the target.
pub fn build_seed_pair(cfg: &SeedConfig) -> Result<SeedPair> {
    cfg.validate()?;
    let q = cfg.q();
    let eta = cfg.eta();
    let mut history = Vec::new();
    for m in 1..=cfg.m_max {
        let (sigma, omega) = truncated_pair(cfg.alpha, q, m);
        let a: Vec<f64> = (1..=m).map(|k| (k as f64).powf(eta)).collect();
        let fam = extremal_family(m, a.clone());
        let value = quadratic_ap_functional(&sigma, &omega, q, &fam)?.value;
        history.push(value);
        log::debug!("seed level {m}: functional {value:.6}");
        if value > cfg.gamma_target {
            return Ok(SeedPair {
                sigma,
                omega,
                m,
                q,
                intervals: (1..=m as i64).map(|k| DyadicInterval::new(k as i32, 0)).collect(),
                a,
                functional: value,
                history,
            });
        }
    }
    let (best_m, achieved) = history
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as u32 + 1, v))
        .fold((0, f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
    Err(Error::TargetNotReached {
        target: cfg.gamma_target,
        m_max: cfg.m_max,
        achieved,
        best_m,
    })
}
