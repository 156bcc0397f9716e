//! Audit every analytic gradient against central finite differences.
//!
//! Runs the same check the `gradcheck` CLI command uses: for the plain
//! denoising loss and the prior-preserving loss, perturb each parameter in
//! turn by ±h and compare the analytic derivative against the symmetric
//! difference quotient. Everything should agree to a few parts in 1e5.
//!
//! Run with: cargo run --example gradient_check

use orchardgen::gradcheck::{run_gradcheck, GradCheckConfig};
use orchardgen::Result;

fn main() -> Result<()> {
    let config = GradCheckConfig {
        seeds: 3,
        ..GradCheckConfig::default()
    };
    println!(
        "checking {} seeds, fd step {:.0e}, tolerance {:.0e}\n",
        config.seeds, config.fd_step, config.tolerance
    );
    let report = run_gradcheck(&config)?;
    println!("{report}");
    assert!(report.passed(), "gradient check failed");
    Ok(())
}
