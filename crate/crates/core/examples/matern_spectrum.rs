//! Nyström eigenpairs of the Matérn kernel and their decay.
//!
//! cargo run --example matern_spectrum -- 1.5

use levy_transport::harness::least_squares_slope;
use levy_transport::{nystrom_eigendecomposition, MaternSpec};

fn main() -> levy_transport::Result<()> {
    let nu: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let spec = MaternSpec::new(nu, 0.25)?;
    let d = nystrom_eigendecomposition(&spec, 512, 512)?;
    let eta = d.eigenvalues();

    println!("nu = {nu}, trace = {:.12}", d.trace());
    println!("{:>4} {:>14} {:>14}", "k", "eta_k", "tail");
    for k in [1, 2, 4, 8, 16, 32, 64, 128] {
        println!("{k:>4} {:>14.6e} {:>14.6e}", eta[k - 1], d.truncation_tail(k)?);
    }

    let pts: Vec<(f64, f64)> = (10..=100).map(|k| ((k as f64).ln(), eta[k - 1].ln())).collect();
    let (slope, stderr, _) = least_squares_slope(&pts);
    println!(
        "decay slope over k = 10..100: {slope:.3} +- {stderr:.3} (expected {})",
        -(1.0 + 2.0 * nu)
    );

    for target in [1e-2, 1e-4, 1e-6] {
        println!("modes for tail <= {target:e}: {}", d.modes_for_tail(target)?);
    }

    let x = 0.3;
    println!("e_1({x}) = {:.6}", d.eigenfunction_eval(0, x)?);
    Ok(())
}
