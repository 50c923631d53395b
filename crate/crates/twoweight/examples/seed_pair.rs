//! Truncated seed pair: the extremal functional grows with the truncation
//! level while the scalar characteristic stays bounded.
use twoweight::characteristics::scalar_ap_dyadic;
use twoweight::seed::{build_seed_pair, seed_functional, truncated_pair, SeedConfig};

fn main() -> twoweight::Result<()> {
    let cfg = SeedConfig::default();
    println!("  M  functional  scalar A_p");
    for m in (2..=12).step_by(2) {
        let (s, w) = truncated_pair(cfg.alpha, cfg.q(), m);
        let ap = scalar_ap_dyadic(&s, &w, cfg.q(), m).value;
        println!("{m:3}  {:.6}    {ap:.6}", seed_functional(&cfg, m)?);
    }
    let pair = build_seed_pair(&SeedConfig { gamma_target: 1.03, ..cfg })?;
    println!("first level above 1.03: M = {} ({:.6})", pair.m, pair.functional);
    Ok(())
}
