//! One path of the nonlinear forward model with Matérn NIG noise.
//!
//! cargo run --example forward_path -- path.csv

use std::fs::File;
use std::io::BufWriter;

use levy_transport::harness::decomposition;
use levy_transport::solver::{Retention, SolverConfig};
use levy_transport::{solve_path, ForwardModel, LevySampler, MaternSpec, Mesh1D, NigParams, NoiseBasis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = Mesh1D::dyadic(5)?;
    let mut config = SolverConfig::new(mesh, 256, 1.0)?;
    config.retention = Retention::All;

    let decomp = decomposition(&MaternSpec::new(1.0, 0.25)?, 256, None)?;
    let n_modes = decomp.modes_for_tail(config.dt())?;
    let basis = NoiseBasis::new(&decomp, &mesh, n_modes)?;
    let model = ForwardModel::default();
    let mut sampler = LevySampler::new(NigParams::symmetric(model.alpha_hat, 1.0, true)?, n_modes, 3, 0)?;

    let path = solve_path(&config, &model, Some((&mut sampler, &basis)))?;
    println!("{n_modes} modes, {} stored states", path.states.len());
    for (step, state) in path.states.iter().step_by(64) {
        println!(
            "t = {:.3}: X(0) = {:.4}, X(0.5) = {:.4}, |X| = {:.4}",
            *step as f64 * path.dt,
            state.eval(0.0)?,
            state.eval(0.5)?,
            state.broken_norm()
        );
    }

    if let Some(out) = std::env::args().nth(1) {
        path.write_csv(
            BufWriter::new(File::create(&out)?),
            &["forward_path example".to_string()],
        )?;
        println!("wrote {out}");
    }
    Ok(())
}
