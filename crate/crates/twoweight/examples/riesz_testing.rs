//! Triple testing integrals of the second Riesz transform on tensor weights,
//! with the refined recomputation switched on.
use twoweight::characteristics::{dyadic_square_family, Square};
use twoweight::pipeline::{pipeline_seed, PipelineConfig};
use twoweight::riesz::{riesz2_rect, triple_testing_estimate, write_cube_csv, QuadratureConfig, Rect2D, TensorWeight2D};

fn main() -> twoweight::Result<()> {
    // closed form against the unit square from a point outside it
    let unit = Rect2D::new(0.0, 1.0, 0.0, 1.0)?;
    println!("R2(1_Q)(0.5, 2) = {:.12}", riesz2_rect((0.5, 2.0), &unit)?);

    let mut cfg = PipelineConfig::with_rng_seed(0);
    cfg.seed.m_max = 6;
    let (sigma, omega) = pipeline_seed(&cfg);
    let (s2, w2) = (TensorWeight2D::new(sigma), TensorWeight2D::new(omega));
    let quad = QuadratureConfig {
        certify: true,
        ..QuadratureConfig::default()
    };
    let mut cubes = dyadic_square_family(2, false);
    cubes.push(Square::new(0.25, 0.1, 0.5));
    let tt = triple_testing_estimate(&s2, &w2, cfg.seed.p(), &cubes, &quad)?;
    println!(
        "triple testing {:.6} over {} squares, worst refinement gap {:.2e}",
        tt.report.value,
        tt.cubes.len(),
        tt.report.tolerance
    );
    write_cube_csv(std::io::stdout().lock(), &tt.cubes)?;
    Ok(())
}
