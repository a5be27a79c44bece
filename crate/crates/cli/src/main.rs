use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asymtori::report::{self, summary_json};
use asymtori::scenario::{run, FailureClass, Mode, RunError, Scenario, Summary};

const PASS: u8 = 0;
const CHECK_FAILED: u8 = 1;
const INPUT_ERROR: u8 = 2;
const NUMERICAL_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "asymtori", version, about = "Asymptotic KAM tori for Hamiltonians with decaying time dependence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Solver tolerance on the weighted residual.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Fourier band |k|_inf <= band.
    #[arg(long, global = true)]
    band: Option<usize>,
    /// Number of time nodes.
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Artifact directory (default: the scenario's `output`, else out/<name>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized property checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print summary.json to stdout instead of the human-readable report.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check the decay envelopes (condition (#), or divergence of the drift).
    CheckDecay { file: PathBuf },
    /// Solve for the torus, certify its decay and run the solver checks.
    Solve { file: PathBuf },
    /// Solve, then run the full verification plan.
    Verify { file: PathBuf },
    /// Run a divergent-drift scenario.
    Counterexample { file: PathBuf },
    /// Re-render the plots of a run directory and print its summary.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (file, mode) = match &cli.command {
        Command::CheckDecay { file } => (file, Mode::CheckDecay),
        Command::Solve { file } => (file, Mode::Solve),
        Command::Verify { file } => (file, Mode::Verify),
        Command::Counterexample { file } => (file, Mode::Counterexample),
        Command::Report { dir } => return ExitCode::from(report_dir(dir, cli.global.json)),
    };
    ExitCode::from(run_file(file, mode, &cli.global))
}

fn load(file: &Path, g: &Global) -> Result<Scenario, RunError> {
    let text = fs::read_to_string(file).map_err(|e| RunError { stage: asymtori::scenario::Stage::Parse, class: FailureClass::Input, message: format!("{}: {e}", file.display()) })?;
    let mut sc = Scenario::from_json(&text).map_err(|e| RunError { message: format!("{}: {}", file.display(), e.message), ..e })?;
    if let Some(tol) = g.tol {
        sc.solver.tol = tol;
    }
    if let Some(band) = g.band {
        sc.solver.band = band;
    }
    if let Some(nodes) = g.nodes {
        sc.solver.nodes = nodes;
    }
    if let Some(seed) = g.seed {
        sc.seed = seed;
    }
    if let Some(out) = &g.out {
        sc.output = Some(out.clone());
    }
    Ok(sc)
}

fn run_file(file: &Path, mode: Mode, g: &Global) -> u8 {
    let result = load(file, g).and_then(|sc| Ok((run(&sc, mode)?, sc.output_dir())));
    let (out, dir) = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return match e.class {
                FailureClass::Input => INPUT_ERROR,
                FailureClass::Numerical => NUMERICAL_ERROR,
            };
        }
    };
    if let Err(e) = report::write_run(&dir, &out) {
        eprintln!("error: report stage: {e}");
        return INPUT_ERROR;
    }
    if g.json {
        print!("{}", summary_json(&out.summary));
    } else {
        print_summary(&out.summary);
        println!("artifacts: {}", dir.display());
    }
    if out.summary.passed {
        PASS
    } else {
        CHECK_FAILED
    }
}

fn report_dir(dir: &Path, json: bool) -> u8 {
    let summary = match report::rerender(dir).and_then(|_| report::read_summary(dir)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: report stage: {e}");
            return INPUT_ERROR;
        }
    };
    if json {
        print!("{}", summary_json(&summary));
    } else {
        print_summary(&summary);
    }
    if summary.passed {
        PASS
    } else {
        CHECK_FAILED
    }
}

fn print_summary(s: &Summary) {
    println!("scenario {} ({}, {:?})", s.name, s.problem, s.mode);
    if let Some(d) = &s.decay {
        match &d.sharp {
            Some(r) => println!("  decay: {} (lambda_min {:.4}, upsilon {:.4})", d.note, r.lambda_min, r.upsilon_used),
            None => println!("  decay: {}", d.note),
        }
    }
    if let Some(v) = &s.solve {
        println!(
            "  solve: {:?} after {} iterations, residual {:.3e}, upsilon' {:.4}, T_max {:.2}",
            v.status, v.iterations, v.residual, v.upsilon_prime, v.t_max
        );
        if v.zero_torus {
            println!("  torus: u = v = 0");
        }
        for e in &v.escalations {
            println!("  escalated upsilon' {:.4} -> {:.4}: {}", e.from, e.to, e.reason);
        }
    }
    if let Some(c) = &s.certificate {
        println!("  decay constants: C_u {:.6e} ({:?}), C_v {:.6e} ({:?})", c.c_u, c.u_trend, c.c_v, c.v_trend);
    }
    if let Some(c) = &s.counterexample {
        println!("  {}: offset {:.6} at t0 + {}, integrator discrepancy {:.2e}", c.verdict, c.final_offset, c.horizon, c.max_discrepancy);
    }
    for c in &s.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let limit = c.threshold.map_or("no threshold".to_string(), |t| format!("threshold {t:.6e}"));
        println!("  {tag} {}: {:.6e} ({limit}) {}", c.check, c.value, c.detail);
    }
    println!("{}", if s.passed { "PASSED" } else { "FAILED" });
}
