use levy_transport::bessel_k;

fn main() -> levy_transport::Result<()> {
    println!("{:>6} {:>8} {:>22}", "nu", "x", "K_nu(x)");
    for nu in [0.0, 0.5, 1.0, 1.5, 2.3] {
        for x in [0.01, 0.5, 2.0, 10.0, 50.0] {
            println!("{nu:>6} {x:>8} {:>22.15e}", bessel_k(nu, x)?);
        }
    }
    Ok(())
}
