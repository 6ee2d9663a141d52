//! Optimal test functions `v = (I - dt A*)^-1 w` and the discrete form they
//! are paired with.

use levy_transport::petrov::{
    bilinear_bh_quadrature, displayed_edge_sum, edge_sum_identity, inf_sup_spectrum, TestFunction, TestNorm,
};
use levy_transport::{DgFunction, Mesh1D};

fn main() -> levy_transport::Result<()> {
    let mesh = Mesh1D::new(8)?;
    let (dt, a) = (0.1, 1.0);

    let v = TestFunction::basis(&mesh, 5, dt, a)?;
    println!("test function of trial basis 5 (supported on element 2):");
    for i in 0..=16 {
        let x = i as f64 / 16.0;
        println!(
            "  v({x:.4}) = {:>10.6}  residual {:.1e}",
            v.eval(x)?,
            v.ode_residual(x)?
        );
    }

    let w = DgFunction::from_coefficients(mesh, (0..mesh.n_dofs()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect())?;
    let v = TestFunction::new(&w, dt, a)?;
    let bh = bilinear_bh_quadrature(&v, &v, &mesh, a, 16);
    println!("B_h(v, v)          = {bh:.12}");
    println!("face identity      = {:.12}", edge_sum_identity(&v, &mesh, a));
    println!("face sum, no extra = {:.12}", displayed_edge_sum(&v, &mesh, a));

    for e in 3..=6 {
        let mesh = Mesh1D::dyadic(e)?;
        let s = inf_sup_spectrum(&mesh, dt, a, TestNorm::Graph)?;
        let ones = s.iter().filter(|x| (*x - 1.0).abs() < 1e-8).count();
        println!(
            "h = 2^-{e}: inf-sup {:.4}, largest {:.4}, {ones} of {} singular values equal 1",
            s[0],
            s[s.len() - 1],
            s.len()
        );
    }
    Ok(())
}
