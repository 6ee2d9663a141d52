//! A small Monte Carlo strong-error study; writes rmse.csv and rates.csv.
//!
//! cargo run --example convergence_study -- out_dir

use std::path::PathBuf;

use levy_transport::{run_convergence_study, StudyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = StudyConfig {
        nu_list: vec![0.5, 1.0],
        h_exps: vec![2, 3, 4],
        ref_exp: 6,
        samples: 24,
        ..StudyConfig::default()
    };
    let report = run_convergence_study(&config)?;
    for c in &report.cells {
        println!(
            "nu={} h=2^-{} m={} N={} rmse={:.3e} [{:.3e}, {:.3e}]",
            c.nu, c.h_exp, c.m, c.n_modes, c.rmse, c.ci_lo, c.ci_hi
        );
    }
    for r in &report.rates {
        println!(
            "nu={}: fitted rate {:.3} +- {:.3} (equilibrated for {})",
            r.nu, r.slope, r.stderr, r.gamma
        );
    }
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir);
    let (rmse, rates) = report.write(&config, &dir)?;
    println!("wrote {} and {}", rmse.display(), rates.display());
    Ok(())
}
