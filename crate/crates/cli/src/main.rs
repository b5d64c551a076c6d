//! Batch front-end: load a TOML run configuration, drive the library, write
//! CSV/JSON artifacts.
//!
//! Exit codes are a stable contract:
//!   0 success, 1 config or validation error, 2 series did not converge,
//!   3 property failure, 4 oracle mismatch, 5 statistical miss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use minq::config::{load_config, RunConfig};
use minq::kernel::{
    backward_residual, forward_residual, minimal_solution, minimal_solution_varying_start,
    regularity_defect,
};
use minq::policy::queue_metrics;
use minq::report::{self, BuildReport};
use minq::sampler::{sample_path_stream, TerminalStatus};
use minq::verify::{oracle_compare, run_verification_with, simulate_against_kernel};
use minq::Error;

/// Test hook: when set, `verify` corrupts one field entry before checking,
/// which must drive the property suite to failure (exit 3).
const CORRUPT_ENV: &str = "CTMC_TEST_CORRUPT_FIELD";

#[derive(Parser)]
#[command(
    name = "minq",
    about = "Minimal transition matrices of nonhomogeneous continuous-time Markov chains",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct the transition field; write field.csv and build_report.json
    Build(CommonArgs),
    /// Run the full verification suite; write verification_report.json
    Verify(CommonArgs),
    /// Compare the field against the exponential-product reference
    OracleCompare(CommonArgs),
    /// Monte Carlo simulation with a 3-sigma comparison against the kernel
    Simulate(SimulateArgs),
    /// Build the compiled-policy field and write queue metric curves
    Policy(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// RNG seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_thread_pool();
    let result = match cli.command {
        Command::Build(args) => with_config(&args, cmd_build),
        Command::Verify(args) => with_config(&args, cmd_verify),
        Command::OracleCompare(args) => with_config(&args, cmd_oracle_compare),
        Command::Simulate(args) => {
            let seed = args.seed;
            with_config(&args.common, |cfg, out| cmd_simulate(cfg, out, seed))
        }
        Command::Policy(args) => with_config(&args, cmd_policy),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NoConvergence { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Cap worker parallelism with CTMC_THREADS.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("CTMC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn with_config(
    args: &CommonArgs,
    f: impl FnOnce(RunConfig, &Path) -> minq::Result<ExitCode>,
) -> minq::Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.clone();
    f(cfg, &out)
}

fn cmd_build(cfg: RunConfig, out: &Path) -> minq::Result<ExitCode> {
    let sol = minimal_solution(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    let rev = minimal_solution_varying_start(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    let fwd = forward_residual(&cfg.rates, &sol)?;
    let bwd = backward_residual(&cfg.rates, &rev)?;
    let defect = regularity_defect(&sol, cfg.property_tol);

    report::write_field_csv(&out.join("field.csv"), &sol.field)?;
    let build = BuildReport::new(&sol, fwd, bwd, &defect);
    report::write_json(&out.join("build_report.json"), &build)?;
    println!(
        "build: order {} over {} segment(s), tail bound {:.3e}, max defect {:.3e} -> {}",
        build.series.series_order,
        build.series.segments,
        build.series.tail_bound,
        build.defect.max,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(cfg: RunConfig, out: &Path) -> minq::Result<ExitCode> {
    let mut sol = minimal_solution(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    let rev = minimal_solution_varying_start(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    if std::env::var_os(CORRUPT_ENV).is_some() {
        let mid = sol.field.matrices.len() / 2;
        sol.field.matrices[mid][[0, 0]] = -1e-3;
        eprintln!("note: {CORRUPT_ENV} is set; corrupting the field before verification");
    }
    let report_data = run_verification_with(&cfg.rates, &sol, &rev, &cfg.verify_options())?;
    report::write_json(&out.join("verification_report.json"), &report_data)?;
    if report_data.passed {
        println!(
            "verify: PASS (regular = {}, max defect {:.3e})",
            report_data.regularity.regular, report_data.regularity.max_defect
        );
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &report_data.failures {
            eprintln!("property failure: {f}");
        }
        Ok(ExitCode::from(3))
    }
}

fn cmd_oracle_compare(cfg: RunConfig, out: &Path) -> minq::Result<ExitCode> {
    let sol = minimal_solution(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    let cmp = oracle_compare(&cfg.rates, &sol, 10, cfg.oracle_tol)?;
    report::write_json(&out.join("oracle_report.json"), &cmp)?;
    if cmp.passed {
        println!(
            "oracle-compare: PASS (max discrepancy {:.3e} <= {:.3e})",
            cmp.max_discrepancy, cmp.tolerance
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "oracle mismatch: max discrepancy {:.3e} exceeds {:.3e}",
            cmp.max_discrepancy, cmp.tolerance
        );
        Ok(ExitCode::from(4))
    }
}

fn cmd_simulate(cfg: RunConfig, out: &Path, seed_override: Option<u64>) -> minq::Result<ExitCode> {
    let seed = seed_override.unwrap_or(cfg.seed);
    let sim = simulate_against_kernel(
        &cfg.rates,
        cfg.initial_state,
        cfg.s,
        cfg.t_end,
        cfg.n_paths,
        seed,
        &cfg.kernel,
    )?;
    report::write_json(&out.join("simulation_report.json"), &sim)?;
    if cfg.write_terminal_states {
        write_terminal_states(&cfg, seed, &out.join("terminal_states.csv"))?;
    }
    if sim.passed {
        println!(
            "simulate: PASS ({} paths, killed fraction {:.4})",
            sim.estimate.n_paths, sim.estimate.killed_freq
        );
        Ok(ExitCode::SUCCESS)
    } else {
        for c in sim.comparisons.iter().filter(|c| !c.within) {
            eprintln!(
                "statistical miss: {} empirical {:.5} vs kernel {:.5} (band {:.5})",
                c.target, c.empirical, c.kernel, c.band
            );
        }
        Ok(ExitCode::from(5))
    }
}

fn write_terminal_states(cfg: &RunConfig, seed: u64, path: &Path) -> minq::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "path,terminal,time")?;
    for k in 0..cfg.n_paths {
        let p = sample_path_stream(&cfg.rates, cfg.initial_state, cfg.s, cfg.t_end, seed, k)?;
        match p.status {
            TerminalStatus::Alive => {
                let label = cfg.rates.space().label(p.terminal_state()).to_string();
                writeln!(w, "{k},{label},{}", cfg.t_end)?;
            }
            TerminalStatus::Killed { at } => writeln!(w, "{k},killed,{at}")?,
        }
    }
    Ok(())
}

fn cmd_policy(cfg: RunConfig, out: &Path) -> minq::Result<ExitCode> {
    let sol = minimal_solution(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    let metrics = queue_metrics(&sol, cfg.initial_state)?;
    report::write_field_csv(&out.join("field.csv"), &sol.field)?;
    report::write_curves_csv(
        &out.join("queue_metrics.csv"),
        &[
            ("t", &metrics.times),
            ("expected_length", &metrics.expected_length),
            ("survival", &metrics.survival),
        ],
    )?;
    let rev = minimal_solution_varying_start(&cfg.rates, cfg.s, cfg.t_end, &cfg.kernel)?;
    let fwd = forward_residual(&cfg.rates, &sol)?;
    let bwd = backward_residual(&cfg.rates, &rev)?;
    let defect = regularity_defect(&sol, cfg.property_tol);
    report::write_json(
        &out.join("build_report.json"),
        &BuildReport::new(&sol, fwd, bwd, &defect),
    )?;
    let last = metrics.times.len() - 1;
    println!(
        "policy: E[length] {:.4} -> {:.4}, survival {:.4} at t={}",
        metrics.expected_length[0], metrics.expected_length[last], metrics.survival[last], cfg.t_end
    );
    Ok(ExitCode::SUCCESS)
}
