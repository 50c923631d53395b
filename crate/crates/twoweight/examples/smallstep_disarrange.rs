//! Small-step disarrangement of the seed pair: resolved doubling drops toward
//! one while the resolved characteristic and the transplanted functional are
//! carried over from the seed.
use twoweight::characteristics::scalar_ap_dyadic;
use twoweight::pipeline::{extremal_family, pipeline_seed, PipelineConfig};
use twoweight::smallstep::{audit, resolved_ap, transplanted_functional, Disarrangement, SmallStepConfig};

fn main() -> twoweight::Result<()> {
    let mut cfg = PipelineConfig::with_rng_seed(0);
    cfg.seed.m_max = 8;
    let (sigma, omega) = pipeline_seed(&cfg);
    let p = cfg.seed.p();
    let fam = extremal_family(&cfg.seed, cfg.seed.m_max);
    println!("seed scalar A_p {:.6}", scalar_ap_dyadic(&sigma, &omega, p, 8).value);
    for d in [2, 4, 8] {
        let ss = SmallStepConfig { d, ..SmallStepConfig::default() };
        let (ds, dw) = (Disarrangement::new(&sigma, &ss)?, Disarrangement::new(&omega, &ss)?);
        let a = audit(&ds, ss.audit_level);
        let t = transplanted_functional(&ds, &dw, p, &fam)?;
        println!(
            "d = {d}: resolved doubling {:.4}, transfer error {:.1e}, resolved A_p {:.6}, functional {:.6} -> {:.6}",
            a.doubling_resolved,
            a.transfer_error,
            resolved_ap(&ds, &dw, p, ss.audit_level),
            t.seed,
            t.resolved
        );
    }
    Ok(())
}
