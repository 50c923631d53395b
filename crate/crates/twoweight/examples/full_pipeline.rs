//! Whole pipeline from a configuration file, writing both report formats.
//!
//! `cargo run --release --example full_pipeline -- configs/smoke.toml /tmp/out`
use std::path::PathBuf;

use twoweight::pipeline::{emit_report, run_pipeline, PipelineConfig, ReportFormat, RunUntil};

fn main() -> twoweight::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args.next().unwrap_or_else(|| "configs/smoke.toml".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out".into()));
    let cfg = PipelineConfig::load(config.as_ref())?;
    let b = run_pipeline(&cfg, RunUntil::Full)?;
    std::fs::create_dir_all(&out)?;
    for f in [ReportFormat::Json, ReportFormat::Csv] {
        println!("wrote {}", emit_report(&b, f, &out)?.display());
    }
    println!("schedule {:?}", b.schedule);
    for v in &b.verdicts {
        println!("{:<24} {}", v.name, if v.pass { "pass" } else { "FAIL" });
    }
    if let Some(r) = b.separation_ratio {
        println!("separation ratio {r:.6}");
    }
    Ok(())
}
