//! Immersed-boundary fluid-structure-interaction lab: a reference
//! Navier-Stokes/IBM solver that generates the moving-disc cavity dataset,
//! plus physics-informed network training (Tanh MLPs and adaptive B-spline
//! networks, single-domain and Eulerian-Lagrangian variants) and the
//! evaluation/report tooling to compare them against that dataset.

pub mod autodiff;
pub mod nets;
pub mod pinn;
pub mod check;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod sampling;
pub mod solver;
pub mod spline;
pub mod tensor;

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cmd, config) = match cli::parse_args(&args) {
        Ok(parsed) => parsed,
        Err(cli::CliError::Usage(msg)) => {
            eprintln!("{msg}");
            return 2;
        }
        Err(e) => {
            eprintln!("fsilab: {e}");
            return e.exit_code();
        }
    };
    match cli::run(cmd, &config) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fsilab: {e}");
            e.exit_code()
        }
    }
}
