//! Dyadic maximal function on the seed pair: norm lower bounds by level, the
//! rearrangement check and the vector-valued spot checks.
use twoweight::pipeline::{maximal_battery, MaximalConfig};

fn main() -> twoweight::Result<()> {
    let cfg = MaximalConfig {
        m_max: 10,
        fs_cases: 50,
        ..MaximalConfig::default()
    };
    let b = maximal_battery(&cfg, 7)?;
    for r in &b.reports {
        println!("{:<24} {:.6}", r.name, r.value);
    }
    for v in &b.verdicts {
        println!("{:<24} {} ({})", v.name, if v.pass { "pass" } else { "FAIL" }, v.detail);
    }
    Ok(())
}
