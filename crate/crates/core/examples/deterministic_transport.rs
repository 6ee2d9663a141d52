//! Noise-free transport of a bump compared with the exact shift.

use levy_transport::harness::least_squares_slope;
use levy_transport::solver::{deterministic_convergence, smooth_bump};

fn main() -> levy_transport::Result<()> {
    let runs = deterministic_convergence(smooth_bump, 1.0, 0.2, &[3, 4, 5, 6, 7], 1.0)?;
    println!("{:>10} {:>8} {:>12}", "h", "steps", "error");
    for r in &runs {
        println!("{:>10.6} {:>8} {:>12.4e}", r.h, r.m, r.error);
    }
    let pts: Vec<(f64, f64)> = runs.iter().map(|r| (r.h.ln(), r.error.ln())).collect();
    println!("observed order: {:.3}", least_squares_slope(&pts).0);
    Ok(())
}
