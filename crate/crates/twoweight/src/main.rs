use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twoweight::pipeline::{
    emit_report, maximal_battery, run_pipeline, PipelineConfig, ReportFormat, RunUntil,
};
use twoweight::Error;

#[derive(Parser)]
#[command(name = "twoweight", version, about = "Two-weight Riesz counterexample pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Seed pair and its characteristics.
    Seed(Common),
    /// Seed and small-step stages.
    Smallstep(Common),
    /// Stages through remodeling, with the schedule and oscillation table.
    Remodel(Common),
    /// All stages and the characteristic battery.
    Certify(Common),
    /// Maximal-function battery.
    Maximal(Common),
    /// Certification plus the maximal battery and the resolved configuration.
    FullRun(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR", env = "TWOWEIGHT_OUT")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N", env = "TWOWEIGHT_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

const EXIT_USAGE: u8 = 1;
const EXIT_VERDICT: u8 = 2;
const EXIT_ABORT: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let (cmd, common) = match &cli.cmd {
        Cmd::Seed(c) => ("seed", c),
        Cmd::Smallstep(c) => ("smallstep", c),
        Cmd::Remodel(c) => ("remodel", c),
        Cmd::Certify(c) => ("certify", c),
        Cmd::Maximal(c) => ("maximal", c),
        Cmd::FullRun(c) => ("full-run", c),
    };
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cmd, common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERDICT),
        Err(e @ (Error::Config(_) | Error::Toml(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ABORT)
        }
    }
}

fn run(cmd: &str, common: &Common) -> twoweight::Result<bool> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        Error::Config(format!("cannot read {}: {e}", common.config.display()))
    })?;
    let cfg = PipelineConfig::from_toml(&text)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;

    if cmd == "maximal" {
        let m = maximal_battery(&cfg.maximal, cfg.rng_seed)?;
        std::fs::write(out.join("maximal.json"), serde_json::to_vec_pretty(&m)?)?;
        summarize(m.verdicts.iter().map(|v| (v.name.as_str(), v.pass)));
        return Ok(m.all_pass());
    }
    let until = match cmd {
        "seed" => RunUntil::Seed,
        "smallstep" => RunUntil::Smallstep,
        "remodel" => RunUntil::Remodel,
        _ => RunUntil::Full,
    };
    let bundle = run_pipeline(&cfg, until)?;
    emit_report(&bundle, ReportFormat::Json, &out)?;
    emit_report(&bundle, ReportFormat::Csv, &out)?;
    summarize(bundle.verdicts.iter().map(|v| (v.name.as_str(), v.pass)));
    let mut pass = bundle.all_pass();
    if cmd == "full-run" {
        let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(out.join("config.resolved.toml"), resolved)?;
        let m = maximal_battery(&cfg.maximal, cfg.rng_seed)?;
        std::fs::write(out.join("maximal.json"), serde_json::to_vec_pretty(&m)?)?;
        summarize(m.verdicts.iter().map(|v| (v.name.as_str(), v.pass)));
        pass &= m.all_pass();
    }
    if let Some(r) = bundle.separation_ratio {
        println!("separation ratio {r:.6}");
    }
    Ok(pass)
}

fn summarize<'a>(verdicts: impl Iterator<Item = (&'a str, bool)>) {
    for (name, pass) in verdicts {
        println!("{:<24} {}", name, if pass { "pass" } else { "FAIL" });
    }
}
