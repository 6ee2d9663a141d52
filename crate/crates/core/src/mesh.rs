//! Uniform meshes on (0, 1) and the discontinuous piecewise-linear space on them.
//!
//! Every element `K_k = [k h, (k + 1) h]` carries two local nodal values, the
//! traces of the function at its left and right endpoint. Values at a shared
//! interface are independent, so functions may jump across element boundaries.
//! The coefficient vector is laid out element by element:
//! `[u_0(x_0+), u_0(x_1-), u_1(x_1+), u_1(x_2-), ...]`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Gauss points per element used when projecting general functions.
pub const PROJECTION_POINTS: usize = 5;

/// Which one-sided limit to take at a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Limit from below, `x-`.
    Left,
    /// Limit from above, `x+`.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh1D {
    n_elements: usize,
    h: f64,
}

impl Mesh1D {
    pub fn new(n_elements: usize) -> Result<Self> {
        if n_elements == 0 {
            return Err(Error::InvalidArgument("mesh needs at least one element".into()));
        }
        Ok(Self {
            n_elements,
            h: 1.0 / n_elements as f64,
        })
    }

    /// Dyadic mesh with `h = 2^-exponent`.
    pub fn dyadic(exponent: u32) -> Result<Self> {
        if exponent > 30 {
            return Err(Error::InvalidArgument(format!("mesh exponent {exponent} too large")));
        }
        Self::new(1usize << exponent)
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of degrees of freedom, two per element.
    pub fn n_dofs(&self) -> usize {
        2 * self.n_elements
    }

    /// Coordinate of the `k`-th element boundary, `k = 0..=n_elements`.
    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_elements {
            1.0
        } else {
            k as f64 * self.h
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_elements).map(|k| self.node(k)).collect()
    }

    pub fn element_bounds(&self, k: usize) -> (f64, f64) {
        (self.node(k), self.node(k + 1))
    }

    /// Coordinate of degree of freedom `i`.
    pub fn dof_coordinate(&self, i: usize) -> f64 {
        self.node(i / 2 + i % 2)
    }

    /// Element owning `x` under the half-open convention `[x_l, x_r)`;
    /// `x = 1` belongs to the last element.
    pub fn locate(&self, x: f64) -> Result<usize> {
        self.locate_side(x, Side::Right)
    }

    /// Element whose closure contains `x` and whose interior approaches `x`
    /// from the requested side.
    pub fn locate_side(&self, x: f64, side: Side) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutOfDomain(x));
        }
        let raw = x * self.n_elements as f64;
        let mut k = raw.floor() as usize;
        if side == Side::Left && raw == raw.floor() && k > 0 {
            k -= 1;
        }
        Ok(k.min(self.n_elements - 1))
    }
}

/// A discontinuous piecewise-linear function on a [`Mesh1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct DgFunction {
    mesh: Mesh1D,
    coeffs: Vec<f64>,
}

impl DgFunction {
    pub fn zeros(mesh: Mesh1D) -> Self {
        Self {
            coeffs: vec![0.0; mesh.n_dofs()],
            mesh,
        }
    }

    pub fn from_coefficients(mesh: Mesh1D, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.n_dofs() {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                mesh.n_dofs(),
                coeffs.len()
            )));
        }
        Ok(Self { mesh, coeffs })
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coeffs
    }

    /// `(value at left end, value at right end)` of element `k`.
    pub fn element_values(&self, k: usize) -> (f64, f64) {
        (self.coeffs[2 * k], self.coeffs[2 * k + 1])
    }

    /// Point evaluation; at an interior interface this is the right element's
    /// left trace.
    pub fn eval(&self, x: f64) -> Result<f64> {
        self.eval_side(x, Side::Right)
    }

    pub fn eval_side(&self, x: f64, side: Side) -> Result<f64> {
        let k = self.mesh.locate_side(x, side)?;
        Ok(self.eval_in_element(k, x))
    }

    /// Affine evaluation of element `k`'s polynomial (extended if `x` lies outside).
    pub fn eval_in_element(&self, k: usize, x: f64) -> f64 {
        let (xl, _) = self.mesh.element_bounds(k);
        let t = (x - xl) / self.mesh.h;
        let (a, b) = self.element_values(k);
        a + (b - a) * t
    }

    /// Elementwise L2 inner product, exact for piecewise linears.
    pub fn broken_inner(&self, other: &DgFunction) -> Result<f64> {
        if self.mesh != other.mesh {
            return Err(Error::InvalidArgument("functions live on different meshes".into()));
        }
        let h = self.mesh.h;
        Ok(self
            .coeffs
            .chunks_exact(2)
            .zip(other.coeffs.chunks_exact(2))
            .map(|(u, v)| h * ((u[0] * v[0] + u[1] * v[1]) / 3.0 + (u[0] * v[1] + u[1] * v[0]) / 6.0))
            .sum())
    }

    pub fn broken_norm(&self) -> f64 {
        broken_norm(self)
    }

    pub fn axpy(&mut self, alpha: f64, other: &DgFunction) {
        debug_assert_eq!(self.mesh, other.mesh);
        for (u, v) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *u += alpha * v;
        }
    }

    /// Adds a constant to every nodal value.
    pub fn shifted(&self, c: f64) -> DgFunction {
        DgFunction {
            mesh: self.mesh,
            coeffs: self.coeffs.iter().map(|v| v + c).collect(),
        }
    }

    /// Writes one CSV row per element:
    /// `element_index,x_left,x_right,value_left,value_right`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "element_index,x_left,x_right,value_left,value_right")?;
        for k in 0..self.mesh.n_elements() {
            let (xl, xr) = self.mesh.element_bounds(k);
            let (a, b) = self.element_values(k);
            writeln!(out, "{k},{xl},{xr},{a},{b}")?;
        }
        Ok(())
    }
}

pub fn build_mesh(n_elements: usize) -> Result<Mesh1D> {
    Mesh1D::new(n_elements)
}

/// `(sum_K ||u||^2_{L2(K)})^{1/2}`, computed exactly.
pub fn broken_norm(u: &DgFunction) -> f64 {
    let h = u.mesh.h;
    u.coeffs
        .chunks_exact(2)
        .map(|c| h * (c[0] * c[0] + c[0] * c[1] + c[1] * c[1]) / 3.0)
        .sum::<f64>()
        .sqrt()
}

/// Elementwise L2-orthogonal projection onto the DG space, using a
/// [`PROJECTION_POINTS`]-point Gauss rule per element.
pub fn project_l2<F: Fn(f64) -> f64>(f: F, mesh: &Mesh1D) -> Result<DgFunction> {
    let rule = GaussLegendre::new(PROJECTION_POINTS);
    project_l2_with(&rule, f, mesh)
}

pub fn project_l2_with<F: Fn(f64) -> f64>(rule: &GaussLegendre, f: F, mesh: &Mesh1D) -> Result<DgFunction> {
    let h = mesh.h();
    let mut coeffs = Vec::with_capacity(mesh.n_dofs());
    for k in 0..mesh.n_elements() {
        let (xl, xr) = mesh.element_bounds(k);
        let (mut bl, mut br) = (0.0, 0.0);
        for (x, w) in rule.mapped(xl, xr) {
            let fx = f(x);
            if !fx.is_finite() {
                return Err(Error::NonFinite { x, value: fx });
            }
            let t = (x - xl) / h;
            bl += w * fx * (1.0 - t);
            br += w * fx * t;
        }
        // inverse of the local mass matrix h [[1/3, 1/6], [1/6, 1/3]]
        coeffs.push((4.0 * bl - 2.0 * br) / h);
        coeffs.push((4.0 * br - 2.0 * bl) / h);
    }
    DgFunction::from_coefficients(*mesh, coeffs)
}

/// Nodal interpolation of a function that is continuous on each closed element.
pub fn nodal_interpolate<F: Fn(f64) -> f64>(f: F, mesh: &Mesh1D) -> Result<DgFunction> {
    nodal_interpolate_one_sided(|x, _| f(x), mesh)
}

/// Nodal interpolation where `f(x, side)` returns the one-sided limit of the
/// function at `x`; each element requests the limit from its own interior.
pub fn nodal_interpolate_one_sided<F: Fn(f64, Side) -> f64>(f: F, mesh: &Mesh1D) -> Result<DgFunction> {
    let mut coeffs = Vec::with_capacity(mesh.n_dofs());
    for k in 0..mesh.n_elements() {
        let (xl, xr) = mesh.element_bounds(k);
        for (x, side) in [(xl, Side::Right), (xr, Side::Left)] {
            let v = f(x, side);
            if !v.is_finite() {
                return Err(Error::NonFinite { x, value: v });
            }
            coeffs.push(v);
        }
    }
    DgFunction::from_coefficients(*mesh, coeffs)
}

/// Broken L2 distance between a DG function and an arbitrary function,
/// evaluated with an `n_points` Gauss rule per element.
pub fn broken_distance<F: Fn(f64) -> f64>(u: &DgFunction, f: F, n_points: usize) -> f64 {
    let rule = GaussLegendre::new(n_points);
    let mesh = u.mesh();
    let mut total = 0.0;
    for k in 0..mesh.n_elements() {
        let (xl, xr) = mesh.element_bounds(k);
        for (x, w) in rule.mapped(xl, xr) {
            let d = u.eval_in_element(k, x) - f(x);
            total += w * d * d;
        }
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_empty_mesh() {
        assert!(build_mesh(0).is_err());
    }

    #[test]
    fn mesh_geometry() {
        let m = build_mesh(1).unwrap();
        assert_eq!(m.h(), 1.0);
        assert_eq!(m.element_bounds(0), (0.0, 1.0));

        let m = build_mesh(8).unwrap();
        assert_eq!(m.h(), 0.125);
        for k in 0..=8 {
            assert_eq!(m.node(k), k as f64 / 8.0);
        }

        let m = Mesh1D::dyadic(7).unwrap();
        assert_eq!(m.n_elements(), 128);
        assert_eq!(m.h(), 2f64.powi(-7));
        let total: f64 = (0..128).map(|k| m.element_bounds(k)).map(|(a, b)| b - a).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn locate_uses_half_open_elements() {
        let m = build_mesh(4).unwrap();
        assert_eq!(m.locate(0.0).unwrap(), 0);
        assert_eq!(m.locate(0.25).unwrap(), 1);
        assert_eq!(m.locate_side(0.25, Side::Left).unwrap(), 0);
        assert_eq!(m.locate(1.0).unwrap(), 3);
        assert!(m.locate(1.5).is_err());
        assert!(m.locate(-0.1).is_err());
    }

    #[test]
    fn eval_constants_linears_and_traces() {
        let m = build_mesh(4).unwrap();
        let c = nodal_interpolate(|_| 2.5, &m).unwrap();
        for x in [0.0, 0.1, 0.5, 0.99, 1.0] {
            assert_eq!(c.eval(x).unwrap(), 2.5);
        }
        let lin = nodal_interpolate(|x| x, &m).unwrap();
        assert!((lin.eval(0.3).unwrap() - 0.3).abs() < 1e-15);

        let mut jump = DgFunction::zeros(m);
        jump.coefficients_mut()[1] = 1.0; // right trace of element 0
        jump.coefficients_mut()[2] = -1.0; // left trace of element 1
        assert_eq!(jump.eval_side(0.25, Side::Left).unwrap(), 1.0);
        assert_eq!(jump.eval_side(0.25, Side::Right).unwrap(), -1.0);
        assert_eq!(jump.eval(0.25).unwrap(), -1.0);
        assert!(jump.eval(1.01).is_err());
    }

    #[test]
    fn broken_norm_examples() {
        let m = build_mesh(5).unwrap();
        assert_eq!(broken_norm(&DgFunction::zeros(m)), 0.0);
        let one = nodal_interpolate(|_| 1.0, &m).unwrap();
        assert!((broken_norm(&one) - 1.0).abs() < 1e-15);
        let x = nodal_interpolate(|x| x, &m).unwrap();
        assert!((broken_norm(&x) - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn interpolation_examples() {
        let m = build_mesh(2).unwrap();
        let sq = nodal_interpolate(|x| x * x, &m).unwrap();
        assert_eq!(sq.coefficients(), &[0.0, 0.25, 0.25, 1.0]);

        let ind = nodal_interpolate_one_sided(
            |x, side| {
                if x > 0.5 || (x == 0.5 && side == Side::Right) {
                    1.0
                } else {
                    0.0
                }
            },
            &m,
        )
        .unwrap();
        assert_eq!(ind.coefficients(), &[0.0, 0.0, 1.0, 1.0]);

        let aff = nodal_interpolate(|x| 3.0 * x - 1.0, &build_mesh(7).unwrap()).unwrap();
        for x in [0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((aff.eval(x).unwrap() - (3.0 * x - 1.0)).abs() < 1e-14);
        }
        assert!(nodal_interpolate(|x| 1.0 / (x - 0.5), &m).is_err());
    }

    #[test]
    fn projection_reproduces_linears() {
        for n in [1, 3, 16] {
            let m = build_mesh(n).unwrap();
            let p = project_l2(|x| x, &m).unwrap();
            let i = nodal_interpolate(|x| x, &m).unwrap();
            for (a, b) in p.coefficients().iter().zip(i.coefficients()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn projection_rejects_non_finite() {
        let m = build_mesh(4).unwrap();
        assert!(matches!(project_l2(|_| f64::NAN, &m), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn projection_error_is_second_order() {
        let f = |x: f64| (std::f64::consts::PI * x).sin();
        let mut logs = Vec::new();
        for e in 3..=7 {
            let m = Mesh1D::dyadic(e).unwrap();
            let p = project_l2(f, &m).unwrap();
            // 12-point oracle is far more accurate than the projection error
            let err = broken_distance(&p, f, 12);
            logs.push((m.h().ln(), err.ln()));
        }
        let slope = crate::harness::least_squares_slope(&logs).0;
        assert!((slope - 2.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn csv_rows() {
        let m = build_mesh(2).unwrap();
        let u = nodal_interpolate(|x| x, &m).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "element_index,x_left,x_right,value_left,value_right\n0,0,0.5,0,0.5\n1,0.5,1,0.5,1\n"
        );
    }

    fn random_dg(n: usize) -> impl Strategy<Value = DgFunction> {
        prop::collection::vec(-3.0..3.0f64, 2 * n)
            .prop_map(move |c| DgFunction::from_coefficients(Mesh1D::new(n).unwrap(), c).unwrap())
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(u in random_dg(9)) {
            let m = *u.mesh();
            let once = project_l2(|x| u.eval(x).unwrap(), &m).unwrap();
            for (a, b) in once.coefficients().iter().zip(u.coefficients()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let twice = project_l2(|x| once.eval(x).unwrap(), &m).unwrap();
            for (a, b) in once.coefficients().iter().zip(twice.coefficients()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn projection_residual_is_orthogonal(v in random_dg(6), freq in 0.5..6.0f64, phase in 0.0..3.0f64) {
            let f = move |x: f64| (freq * x + phase).sin() * (1.0 + x * x);
            let m = *v.mesh();
            let p = project_l2(f, &m).unwrap();
            // (f - P f, v) with f represented by the same per-element Gauss rule
            let rule = GaussLegendre::new(PROJECTION_POINTS);
            let mut inner = 0.0;
            for k in 0..m.n_elements() {
                let (xl, xr) = m.element_bounds(k);
                for (x, w) in rule.mapped(xl, xr) {
                    inner += w * (f(x) - p.eval_in_element(k, x)) * v.eval_in_element(k, x);
                }
            }
            prop_assert!(inner.abs() < 1e-10);
        }

        #[test]
        fn broken_norm_matches_gauss_oracle(u in random_dg(7)) {
            let rule = GaussLegendre::new(10);
            let m = *u.mesh();
            let mut total = 0.0;
            for k in 0..m.n_elements() {
                let (xl, xr) = m.element_bounds(k);
                total += rule.integrate(|x| u.eval_in_element(k, x).powi(2), xl, xr);
            }
            prop_assert!((broken_norm(&u) - total.sqrt()).abs() < 1e-12);
        }
    }
}
