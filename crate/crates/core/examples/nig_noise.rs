//! NIG increments from the subordinated Gaussian construction, checked
//! against the characteristic function.

use levy_transport::levy::GhParams;
use levy_transport::{char_function_gh, LevySampler, NigParams};

fn main() -> levy_transport::Result<()> {
    let params = NigParams::symmetric(10.0, 1.0, false)?;
    let mut sampler = LevySampler::new(params.clone(), 3, 42, 0)?;
    let dt = 0.5;
    let n = 50_000;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| sampler.sample_nig_increment(dt))
        .collect::<Result<_, _>>()?;

    let gh = GhParams::from(&params);
    println!("{:>6} {:>12} {:>12}", "u", "empirical", "exact");
    for u in [0.5, 1.0, 2.0, 4.0] {
        let ecf = draws.iter().map(|d| (u * d[0]).cos()).sum::<f64>() / n as f64;
        let phi = char_function_gh(&[u], dt, &gh)?;
        println!("{u:>6} {ecf:>12.5} {:>12.5}", phi.re);
    }

    // coordinates share the clock: uncorrelated, but |l_1| and |l_2| are not
    let m = |f: &dyn Fn(&[f64]) -> f64| draws.iter().map(|d| f(d)).sum::<f64>() / n as f64;
    let cov = m(&|d| d[0] * d[1]);
    let abs_cov = m(&|d| d[0].abs() * d[1].abs()) - m(&|d| d[0].abs()) * m(&|d| d[1].abs());
    println!("cov(l1, l2) = {cov:.2e}, cov(|l1|, |l2|) = {abs_cov:.2e}");

    let normalized = NigParams::symmetric(10.0, 1.0, true)?;
    let mut sampler = LevySampler::new(normalized, 1, 42, 1)?;
    let var = (0..n)
        .map(|_| sampler.sample_nig_increment(dt).map(|v| v[0] * v[0]))
        .sum::<Result<f64, _>>()?
        / n as f64;
    println!("normalized variance at dt = {dt}: {var:.4}");
    Ok(())
}
