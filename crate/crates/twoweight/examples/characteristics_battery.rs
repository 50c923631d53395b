//! Characteristic battery on the seed pair extended to the plane: scalar and
//! quadratic characteristics, sampled planar doubling and two-tailed bounds.
use twoweight::characteristics::{
    dyadic_square_family, planar_doubling_sample, quadratic_ap_functional, random_squares,
    rect_quadratic_functional, scalar_ap_dyadic, two_tailed_ap_estimate,
};
use twoweight::pipeline::{extremal_family, pipeline_seed, PipelineConfig};
use twoweight::riesz::TensorWeight2D;
use twoweight::smallstep::{Disarrangement, SmallStepConfig};

fn main() -> twoweight::Result<()> {
    let mut cfg = PipelineConfig::with_rng_seed(3);
    cfg.seed.m_max = 8;
    let (sigma, omega) = pipeline_seed(&cfg);
    let p = cfg.seed.p();
    let fam = extremal_family(&cfg.seed, 8);

    println!("scalar A_p        {:.6}", scalar_ap_dyadic(&sigma, &omega, p, 8).value);
    println!("quadratic A_p     {:.6}", quadratic_ap_functional(&sigma, &omega, p, &fam)?.value);

    let (s2, w2) = (TensorWeight2D::new(sigma.clone()), TensorWeight2D::new(omega.clone()));
    println!("rect quadratic    {:.6}", rect_quadratic_functional(&s2, &w2, cfg.seed.p, &fam)?.value);
    let squares = random_squares(cfg.rng_seed, 2000, 0.0, 8.0);
    let ds = planar_doubling_sample(&s2, &squares);
    let dw = planar_doubling_sample(&w2, &squares);
    println!("planar doubling   {ds:.4} / {dw:.4}");

    let family = dyadic_square_family(4, true);
    if let Err(e) = two_tailed_ap_estimate(&s2, &w2, p, &family, 12, (ds, dw)) {
        println!("seed pair: {e}");
    }

    // after the small step the pair is doubling enough for the tail bound
    let ss = SmallStepConfig { d: 2, ..SmallStepConfig::default() };
    let project = |w| -> twoweight::Result<TensorWeight2D> {
        Ok(TensorWeight2D::new(Disarrangement::new(w, &ss)?.project(10)?))
    };
    let (s3, w3) = (project(&sigma)?, project(&omega)?);
    let (ds, dw) = (planar_doubling_sample(&s3, &squares), planar_doubling_sample(&w3, &squares));
    println!("planar doubling   {ds:.4} / {dw:.4} after the small step");
    let tt = two_tailed_ap_estimate(&s3, &w3, p, &family, 12, (ds, dw))?;
    println!("two-tailed        [{:.4}, {:.4}] over {} squares", tt.lower.value, tt.upper.value, family.len());
    Ok(())
}
