//! Thresholding of the right-hand mass matrix at `dt^2 ||M||_2`.

use levy_transport::solver::SolverConfig;
use levy_transport::{assemble, broken_norm, solve_path, ForwardModel, Mesh1D};

fn main() -> levy_transport::Result<()> {
    let mesh = Mesh1D::dyadic(6)?;
    println!(
        "{:>10} {:>10} {:>10} {:>12} {:>12}",
        "dt", "nnz", "kept", "threshold", "max dropped"
    );
    for steps in [4, 16, 64, 256, 1024] {
        let dt = 1.0 / steps as f64;
        let m = assemble(&mesh, dt, 1.0)?;
        let c = &m.compression;
        println!(
            "{dt:>10.6} {:>10} {:>10} {:>12.3e} {:>12.3e}",
            m.rhs_mass.nnz(),
            c.retained,
            c.threshold,
            c.max_dropped
        );
    }

    let model = ForwardModel {
        sigma: 0.0,
        ..ForwardModel::default()
    };
    let mut config = SolverConfig::new(mesh, 64, 1.0)?;
    let kept = solve_path(&config, &model, None)?;
    config.compressed = false;
    let full = solve_path(&config, &model, None)?;
    let mut diff = kept.final_state().clone();
    diff.axpy(-1.0, full.final_state());
    println!(
        "compressed vs full solve at T: {:.3e} (dt = {})",
        broken_norm(&diff),
        config.dt()
    );
    Ok(())
}
