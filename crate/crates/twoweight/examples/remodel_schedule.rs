//! Remodeling with a fixed schedule: oscillation function, retained quadratic
//! functional and the remodeled characteristic level by level.
use twoweight::characteristics::scalar_ap_dyadic;
use twoweight::dyadic::DyadicInterval;
use twoweight::pipeline::{extremal_family, pipeline_seed, PipelineConfig};
use twoweight::remodel::{ap_over_k, osc_build, quadratic_retention, ScheduleK};

fn main() -> twoweight::Result<()> {
    let mut cfg = PipelineConfig::with_rng_seed(0);
    cfg.seed.m_max = 8;
    let (sigma, omega) = pipeline_seed(&cfg);
    let p = cfg.seed.p();
    let fam = extremal_family(&cfg.seed, cfg.seed.m_max);
    let schedule = ScheduleK::new(vec![0, 4, 4, 4], 8)?;

    let osc = osc_build(DyadicInterval::UNIT, &schedule)?;
    println!("oscillation at the root: {} cells, integral {:+.3e}", osc.values.len(), osc.integral());
    osc.write_csv(std::io::stdout().lock())?;

    println!("seed scalar A_p {:.6}", scalar_ap_dyadic(&sigma, &omega, p, 8).value);
    for ell in 1..=schedule.levels() {
        println!("ell = {ell}: A_p over K {:.6}", ap_over_k(&sigma, &omega, p, &schedule, ell));
    }
    let r = quadratic_retention(&sigma, &omega, p, &fam, &schedule)?;
    println!(
        "retention {:.4} ({:.6} -> {:.6}), transition mass {:.3e}",
        r.ratio(),
        r.before,
        r.after,
        r.transition_mass
    );
    Ok(())
}
