//! Petrov-Galerkin test space and the time-step matrices.
//!
//! For a trial function `w` the optimal test function is
//! `v = (I - dt A*)^-1 w`, i.e. the solution of `v + eps v' = w` with
//! `v(0) = 0` and `eps = dt a`. On an element with `w(s) = alpha + beta s`
//! (local coordinate `s in [0, h]`) and incoming value `v_in` this is
//!
//! ```text
//! v(s) = (alpha - eps beta) + beta s + (v_in - alpha + eps beta) e^{-s/eps}
//! ```
//!
//! so `v` is continuous, vanishes left of the support of `w` and decays
//! exponentially to the right of it.
//!
//! Matrices are indexed `[test j][trial l]`: row `j` of `lhs` holds
//! `(w_l, v_j) + dt B_h(w_l, v_j)` over all trial functions `l`, so one time
//! step solves `lhs c_new = rhs_mass b`.

use crate::error::{Error, Result};
use crate::mesh::{DgFunction, Mesh1D};
use crate::quadrature::GaussLegendre;
use crate::sparse::{CsrBuilder, CsrMatrix, SparseLu};

/// Power iteration settings for the compression threshold.
pub const NORM_MAX_ITER: usize = 100;
pub const NORM_REL_TOL: f64 = 1e-6;
/// Assembled `lhs` entries within this many ulps of the largest entry are
/// cancellation noise and are stored as zeros.
pub const LHS_CANCELLATION_ULPS: f64 = 64.0;

/// `g_p(r) = int_0^1 t^p e^{-r t} dt` for `p = 0, 1`.
fn exp_moments(r: f64) -> (f64, f64) {
    if r < 1.0 {
        // alternating series, sum_k (-r)^k / (k! (k + p + 1))
        let (mut g0, mut g1) = (0.0, 0.0);
        let mut term = 1.0;
        for k in 0..40 {
            g0 += term / (k as f64 + 1.0);
            g1 += term / (k as f64 + 2.0);
            term *= -r / (k as f64 + 1.0);
        }
        (g0, g1)
    } else {
        let e = (-r).exp();
        let g0 = -(-r).exp_m1() / r;
        (g0, (g0 - e) / r)
    }
}

/// Closed form of `v = (I - dt A*)^-1 w` for a trial function `w`.
#[derive(Debug, Clone)]
pub struct TestFunction {
    mesh: Mesh1D,
    dt: f64,
    a: f64,
    eps: f64,
    g0: f64,
    g1: f64,
    /// `[c0, c1, c2]` per element: `v(s) = c0 + c1 s + c2 e^{-s/eps}`.
    coeffs: Vec<[f64; 3]>,
    /// Trial function the test function was built from.
    source: DgFunction,
}

impl TestFunction {
    pub fn new(source: &DgFunction, dt: f64, a: f64) -> Result<Self> {
        check_step(dt, a)?;
        let mesh = *source.mesh();
        let h = mesh.h();
        let eps = dt * a;
        let r = h / eps;
        let (g0, g1) = exp_moments(r);
        let decay = (-r).exp();
        let mut coeffs = Vec::with_capacity(mesh.n_elements());
        let mut v_in = 0.0;
        for k in 0..mesh.n_elements() {
            let (wl, wr) = source.element_values(k);
            let alpha = wl;
            let beta = (wr - wl) / h;
            let c0 = alpha - eps * beta;
            let c2 = v_in - c0;
            coeffs.push([c0, beta, c2]);
            v_in = c0 + beta * h + c2 * decay;
        }
        Ok(Self {
            mesh,
            dt,
            a,
            eps,
            g0,
            g1,
            coeffs,
            source: source.clone(),
        })
    }

    /// Test function of the `j`-th nodal trial basis function.
    pub fn basis(mesh: &Mesh1D, j: usize, dt: f64, a: f64) -> Result<Self> {
        if j >= mesh.n_dofs() {
            return Err(Error::InvalidArgument(format!("basis index {j} out of range")));
        }
        let mut w = DgFunction::zeros(*mesh);
        w.coefficients_mut()[j] = 1.0;
        Self::new(&w, dt, a)
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn source(&self) -> &DgFunction {
        &self.source
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn element_coefficients(&self, k: usize) -> [f64; 3] {
        self.coeffs[k]
    }

    fn local(&self, x: f64) -> Result<(usize, f64)> {
        let k = self.mesh.locate(x)?;
        Ok((k, x - self.mesh.node(k)))
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (k, s) = self.local(x)?;
        let [c0, c1, c2] = self.coeffs[k];
        Ok(c0 + c1 * s + c2 * (-s / self.eps).exp())
    }

    pub fn derivative(&self, x: f64) -> Result<f64> {
        let (k, s) = self.local(x)?;
        let [_, c1, c2] = self.coeffs[k];
        Ok(c1 - c2 / self.eps * (-s / self.eps).exp())
    }

    /// Residual `v + dt a v' - w` of `(I - dt A*) v = w` at `x`.
    pub fn ode_residual(&self, x: f64) -> Result<f64> {
        let (k, _) = self.local(x)?;
        let w = self.source.eval_in_element(k, x);
        Ok(self.eval(x)? + self.eps * self.derivative(x)? - w)
    }

    /// Value at the right end of element `k`.
    fn right_value(&self, k: usize) -> f64 {
        let [c0, c1, c2] = self.coeffs[k];
        let h = self.mesh.h();
        c0 + c1 * h + c2 * (-h / self.eps).exp()
    }

    /// `(int_K phi_L v, int_K phi_R v)` on element `k` for the nodal basis.
    fn mass_moments(&self, k: usize) -> (f64, f64) {
        let [c0, c1, c2] = self.coeffs[k];
        let h = self.mesh.h();
        (
            h * (0.5 * c0 + c1 * h / 6.0 + c2 * (self.g0 - self.g1)),
            h * (0.5 * c0 + c1 * h / 3.0 + c2 * self.g1),
        )
    }

    /// `(int_K phi_L v', int_K phi_R v')` on element `k`.
    fn derivative_moments(&self, k: usize) -> (f64, f64) {
        let [_, c1, c2] = self.coeffs[k];
        let h = self.mesh.h();
        let d = c2 / self.eps;
        (h * (0.5 * c1 - d * (self.g0 - self.g1)), h * (0.5 * c1 - d * self.g1))
    }
}

fn check_step(dt: f64, a: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "transport speed must be positive, got {a}"
        )));
    }
    Ok(())
}

pub fn test_function(w: &DgFunction, dt: f64, a: f64) -> Result<TestFunction> {
    TestFunction::new(w, dt, a)
}

/// Second argument of the discrete bilinear form: anything with element
/// integrals against linears and one-sided traces at element ends.
pub trait TestSide {
    /// `int_K w v` for `w` linear on element `k` with end values `(wl, wr)`.
    fn mass_pairing(&self, mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64;
    /// `int_K w v'` for `w` linear on element `k` with end values `(wl, wr)`.
    fn derivative_pairing(&self, mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64;
    /// `(v(x_k+), v(x_{k+1}-))`, the traces of element `k`.
    fn traces(&self, mesh: &Mesh1D, k: usize) -> (f64, f64);
    /// Value of the restriction to element `k` at `x`.
    fn value_in(&self, mesh: &Mesh1D, k: usize, x: f64) -> f64;
    /// Derivative of the restriction to element `k` at `x`.
    fn derivative_in(&self, mesh: &Mesh1D, k: usize, x: f64) -> f64;
}

impl TestSide for TestFunction {
    fn mass_pairing(&self, _mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64 {
        let (ml, mr) = self.mass_moments(k);
        wl * ml + wr * mr
    }

    fn derivative_pairing(&self, _mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64 {
        let (dl, dr) = self.derivative_moments(k);
        wl * dl + wr * dr
    }

    fn traces(&self, _mesh: &Mesh1D, k: usize) -> (f64, f64) {
        let [c0, _, c2] = self.coeffs[k];
        (c0 + c2, self.right_value(k))
    }

    fn value_in(&self, mesh: &Mesh1D, k: usize, x: f64) -> f64 {
        let s = x - mesh.node(k);
        let [c0, c1, c2] = self.coeffs[k];
        c0 + c1 * s + c2 * (-s / self.eps).exp()
    }

    fn derivative_in(&self, mesh: &Mesh1D, k: usize, x: f64) -> f64 {
        let s = x - mesh.node(k);
        let [_, c1, c2] = self.coeffs[k];
        c1 - c2 / self.eps * (-s / self.eps).exp()
    }
}

impl TestSide for DgFunction {
    fn mass_pairing(&self, mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64 {
        let (vl, vr) = self.element_values(k);
        mesh.h() * ((wl * vl + wr * vr) / 3.0 + (wl * vr + wr * vl) / 6.0)
    }

    fn derivative_pairing(&self, _mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64 {
        let (vl, vr) = self.element_values(k);
        0.5 * (wl + wr) * (vr - vl)
    }

    fn traces(&self, _mesh: &Mesh1D, k: usize) -> (f64, f64) {
        self.element_values(k)
    }

    fn value_in(&self, _mesh: &Mesh1D, k: usize, x: f64) -> f64 {
        self.eval_in_element(k, x)
    }

    fn derivative_in(&self, mesh: &Mesh1D, k: usize, _x: f64) -> f64 {
        let (vl, vr) = self.element_values(k);
        (vr - vl) / mesh.h()
    }
}

/// A smooth test function given with its derivative; element integrals use
/// a Gauss rule.
pub struct SmoothTest<F, D> {
    pub value: F,
    pub derivative: D,
    pub rule: GaussLegendre,
}

impl<F: Fn(f64) -> f64, D: Fn(f64) -> f64> SmoothTest<F, D> {
    pub fn new(value: F, derivative: D) -> Self {
        Self {
            value,
            derivative,
            rule: GaussLegendre::new(20),
        }
    }
}

impl<F: Fn(f64) -> f64, D: Fn(f64) -> f64> TestSide for SmoothTest<F, D> {
    fn mass_pairing(&self, mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64 {
        let (xl, xr) = mesh.element_bounds(k);
        self.rule
            .integrate(|x| (wl + (wr - wl) * (x - xl) / mesh.h()) * (self.value)(x), xl, xr)
    }

    fn derivative_pairing(&self, mesh: &Mesh1D, k: usize, wl: f64, wr: f64) -> f64 {
        let (xl, xr) = mesh.element_bounds(k);
        self.rule.integrate(
            |x| (wl + (wr - wl) * (x - xl) / mesh.h()) * (self.derivative)(x),
            xl,
            xr,
        )
    }

    fn traces(&self, mesh: &Mesh1D, k: usize) -> (f64, f64) {
        let (xl, xr) = mesh.element_bounds(k);
        ((self.value)(xl), (self.value)(xr))
    }

    fn value_in(&self, _mesh: &Mesh1D, _k: usize, x: f64) -> f64 {
        (self.value)(x)
    }

    fn derivative_in(&self, _mesh: &Mesh1D, _k: usize, x: f64) -> f64 {
        (self.derivative)(x)
    }
}

/// Interior upwind flux `({a w} - |a n|/2 [w]) [v]` at the interface between
/// a left element (traces `w_l`, `v_l`) and a right element (`w_r`, `v_r`).
fn interior_flux(a: f64, w_l: f64, w_r: f64, v_l: f64, v_r: f64) -> f64 {
    // outward normals: +1 for the left element, -1 for the right one
    let jump_w = w_l - w_r;
    let jump_v = v_l - v_r;
    let avg = 0.5 * a * (w_l + w_r);
    (avg - 0.5 * a.abs() * jump_w) * jump_v
}

/// `B_h(w, v) = -(w, A* v)_h - sum_E (n a w, v)_E`.
///
/// With `A* = -a d/dx` the volume term is `(w, a v')` elementwise. Interior
/// faces use the upwind flux; the inflow face `x = 1` contributes
/// `-(-a w(1-) v(1-))`, using the interior traces of both functions. No term
/// is assembled at the outflow point, where test functions vanish.
pub fn bilinear_bh<V: TestSide>(w: &DgFunction, v: &V, a: f64) -> f64 {
    let mesh = *w.mesh();
    let n = mesh.n_elements();
    let mut volume = 0.0;
    for k in 0..n {
        let (wl, wr) = w.element_values(k);
        volume += a * v.derivative_pairing(&mesh, k, wl, wr);
    }
    let mut flux = 0.0;
    for k in 1..n {
        let (_, w_l) = w.element_values(k - 1);
        let (w_r, _) = w.element_values(k);
        let (_, v_l) = v.traces(&mesh, k - 1);
        let (v_r, _) = v.traces(&mesh, k);
        flux += interior_flux(a, w_l, w_r, v_l, v_r);
    }
    let (_, w_end) = w.element_values(n - 1);
    let (_, v_end) = v.traces(&mesh, n - 1);
    let inflow = -a * w_end * v_end;
    volume - flux - inflow
}

/// `B_h(w, v)` for arbitrary elementwise-smooth arguments on both sides.
/// The volume term uses a 20-point Gauss rule on `subdivisions` equal
/// pieces of every element; faces are treated as in [`bilinear_bh`].
pub fn bilinear_bh_quadrature<W: TestSide, V: TestSide>(
    w: &W,
    v: &V,
    mesh: &Mesh1D,
    a: f64,
    subdivisions: usize,
) -> f64 {
    let rule = GaussLegendre::new(20);
    let n = mesh.n_elements();
    let piece = mesh.h() / subdivisions as f64;
    let mut volume = 0.0;
    for k in 0..n {
        let xl = mesh.node(k);
        for p in 0..subdivisions {
            let lo = xl + p as f64 * piece;
            volume += rule.integrate(
                |x| w.value_in(mesh, k, x) * a * v.derivative_in(mesh, k, x),
                lo,
                lo + piece,
            );
        }
    }
    let mut flux = 0.0;
    for k in 1..n {
        let (_, w_l) = w.traces(mesh, k - 1);
        let (w_r, _) = w.traces(mesh, k);
        let (_, v_l) = v.traces(mesh, k - 1);
        let (v_r, _) = v.traces(mesh, k);
        flux += interior_flux(a, w_l, w_r, v_l, v_r);
    }
    let (_, w_end) = w.traces(mesh, n - 1);
    let (_, v_end) = v.traces(mesh, n - 1);
    volume - flux + a * w_end * v_end
}

/// Broken `L2` pairing `(w, v)_h`.
pub fn mass_pairing<V: TestSide>(w: &DgFunction, v: &V) -> f64 {
    let mesh = *w.mesh();
    (0..mesh.n_elements())
        .map(|k| {
            let (wl, wr) = w.element_values(k);
            v.mass_pairing(&mesh, k, wl, wr)
        })
        .sum()
}

/// `B_h(v, v)` for a function with the given traces, rearranged into face
/// terms: `sum_int a/2 [v]^2 + 3a/2 v(1-)^2 - a/2 v(0+)^2`.
pub fn edge_sum_identity<V: TestSide>(v: &V, mesh: &Mesh1D, a: f64) -> f64 {
    let n = mesh.n_elements();
    let mut s = 0.0;
    for k in 1..n {
        let (_, v_l) = v.traces(mesh, k - 1);
        let (v_r, _) = v.traces(mesh, k);
        s += 0.5 * a * (v_l - v_r).powi(2);
    }
    let (v0, _) = v.traces(mesh, 0);
    let (_, v1) = v.traces(mesh, n - 1);
    s + 1.5 * a * v1 * v1 - 0.5 * a * v0 * v0
}

/// The face sum `sum_E int a/2 [v^2] + |a n|/2 [v]^2` taken over interior
/// faces and both boundary points. For continuous `v` with `v(0) = 0` it
/// equals `a v(1)^2`, which is `a/2 v(1)^2` less than `B_h(v, v)`.
pub fn displayed_edge_sum<V: TestSide>(v: &V, mesh: &Mesh1D, a: f64) -> f64 {
    let n = mesh.n_elements();
    let mut s = 0.0;
    for k in 1..n {
        let (_, v_l) = v.traces(mesh, k - 1);
        let (v_r, _) = v.traces(mesh, k);
        s += 0.5 * a * (v_l * v_l - v_r * v_r) + 0.5 * a.abs() * (v_l - v_r).powi(2);
    }
    let (v0, _) = v.traces(mesh, 0);
    let (_, v1) = v.traces(mesh, n - 1);
    // boundary faces: one-sided jumps with outward normals -1 at 0 and +1 at 1
    s + 0.5 * a * v1 * v1 + 0.5 * a.abs() * v1 * v1 - 0.5 * a * v0 * v0 + 0.5 * a.abs() * v0 * v0
}

/// Assembled matrices of one backward Euler / Petrov-Galerkin step.
#[derive(Debug, Clone)]
pub struct SchemeMatrices {
    pub mesh: Mesh1D,
    pub dt: f64,
    pub a: f64,
    /// `lhs[j][l] = (w_l, v_j) + dt B_h(w_l, v_j)`.
    pub lhs: CsrMatrix,
    /// `rhs_mass[j][l] = (w_l, v_j)`, every non-zero entry.
    pub rhs_mass: CsrMatrix,
    pub compression: Compression,
}

/// Result of thresholding the right-hand mass matrix.
#[derive(Debug, Clone)]
pub struct Compression {
    pub matrix: CsrMatrix,
    pub spectral_norm: f64,
    pub threshold: f64,
    pub retained: usize,
    /// Largest magnitude among dropped entries (0 if none were dropped).
    pub max_dropped: f64,
}

impl SchemeMatrices {
    pub fn rhs_compressed(&self) -> &CsrMatrix {
        &self.compression.matrix
    }

    pub fn factor(&self) -> Result<SparseLu> {
        SparseLu::factor(&self.lhs, 0.0)
    }

    /// The plain broken mass matrix `(w_l, w_j)`.
    pub fn dg_mass(mesh: &Mesh1D) -> CsrMatrix {
        let n = mesh.n_dofs();
        let h = mesh.h();
        let mut b = CsrBuilder::new(n, n);
        for j in 0..n {
            let e = j / 2;
            let (diag, off) = (h / 3.0, h / 6.0);
            if j % 2 == 0 {
                b.push(2 * e, diag);
                b.push(2 * e + 1, off);
            } else {
                b.push(2 * e, off);
                b.push(2 * e + 1, diag);
            }
            b.finish_row();
        }
        b.build()
    }

    /// Rank-one inflow correction `dt a w_l(1) v_j(1)`: a single column at
    /// the last trial function.
    pub fn inflow_correction(&self) -> Vec<f64> {
        (0..self.mesh.n_dofs())
            .map(|j| {
                let v = TestFunction::basis(&self.mesh, j, self.dt, self.a).expect("validated at assembly");
                let (_, v1) = v.traces(&self.mesh, self.mesh.n_elements() - 1);
                self.dt * self.a * v1
            })
            .collect()
    }
}

/// Assembles `lhs` and `rhs_mass` in closed form and compresses `rhs_mass`.
pub fn assemble(mesh: &Mesh1D, dt: f64, a: f64) -> Result<SchemeMatrices> {
    check_step(dt, a)?;
    if dt > 1.0 / 3.0 {
        log::warn!("time step {dt} exceeds 1/3; the discrete inf-sup bound is not guaranteed");
    }
    let n = mesh.n_dofs();
    let n_el = mesh.n_elements();
    let mut lhs_dense_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut rhs = CsrBuilder::new(n, n);
    let mut lhs_max = 0.0f64;
    for j in 0..n {
        let v = TestFunction::basis(mesh, j, dt, a)?;
        let (_, v_end) = v.traces(mesh, n_el - 1);
        let mut row = Vec::new();
        for k in j / 2..n_el {
            let [_, c1, c2] = v.coeffs[k];
            if c1 == 0.0 && c2 == 0.0 {
                // the exponential tail has underflowed; nothing further right
                break;
            }
            let (ml, mr) = v.mass_moments(k);
            let (dl, dr) = v.derivative_moments(k);
            for (col, m, d) in [(2 * k, ml, dl), (2 * k + 1, mr, dr)] {
                let w_end = if col == n - 1 { 1.0 } else { 0.0 };
                let entry = m + dt * a * (d + w_end * v_end);
                if m != 0.0 {
                    rhs.push(col, m);
                }
                lhs_max = lhs_max.max(entry.abs());
                row.push((col, entry));
            }
        }
        // the inflow term reaches the last column even when the tail underflowed
        if row.last().map(|&(c, _)| c) != Some(n - 1) && v_end != 0.0 {
            row.push((n - 1, dt * a * v_end));
        }
        rhs.finish_row();
        lhs_dense_rows.push(row);
    }
    let cutoff = LHS_CANCELLATION_ULPS * f64::EPSILON * lhs_max;
    let mut lhs = CsrBuilder::new(n, n);
    for row in lhs_dense_rows {
        for (col, v) in row {
            if v.abs() > cutoff {
                lhs.push(col, v);
            }
        }
        lhs.finish_row();
    }
    let rhs_mass = rhs.build();
    let compression = compress(&rhs_mass, dt);
    log::debug!(
        "assembled h = {}, dt = {dt}: rhs nnz {} -> {} after compression",
        mesh.h(),
        rhs_mass.nnz(),
        compression.retained
    );
    if compression.retained == 0 {
        log::warn!(
            "compression dropped every right-hand entry (h = {}, dt = {dt})",
            mesh.h()
        );
    }
    Ok(SchemeMatrices {
        mesh: *mesh,
        dt,
        a,
        lhs: lhs.build(),
        rhs_mass,
        compression,
    })
}

/// Keeps entries with `|m| >= dt^2 ||M||_2`.
pub fn compress(rhs_mass: &CsrMatrix, dt: f64) -> Compression {
    let spectral_norm = rhs_mass.spectral_norm_estimate(NORM_MAX_ITER, NORM_REL_TOL);
    compress_with_norm(rhs_mass, dt, spectral_norm)
}

fn compress_with_norm(rhs_mass: &CsrMatrix, dt: f64, spectral_norm: f64) -> Compression {
    let threshold = dt * dt * spectral_norm;
    let mut b = CsrBuilder::new(rhs_mass.n_rows(), rhs_mass.n_cols());
    let mut max_dropped = 0.0f64;
    let mut retained = 0;
    for i in 0..rhs_mass.n_rows() {
        let (cols, vals) = rhs_mass.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if v.abs() >= threshold {
                b.push(j, v);
                retained += 1;
            } else {
                max_dropped = max_dropped.max(v.abs());
            }
        }
        b.finish_row();
    }
    Compression {
        matrix: b.build(),
        spectral_norm,
        threshold,
        retained,
        max_dropped,
    }
}

/// Norm on the test space used by [`inf_sup_constant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestNorm {
    /// `||A* v||`.
    Adjoint,
    /// `||(I - dt A*) v||`.
    Graph,
}

/// Smallest singular value of `M_w^{-1/2} lhs^T G_v^{-1/2}`, where `M_w` is
/// the trial mass matrix and `G_v` the Gram matrix of the test basis in
/// `norm`: the discrete inf-sup constant of the assembled pairing.
/// The adjoint Gram matrix uses a 30-point Gauss rule per element, which
/// resolves the exponentials when `dt a` is not far below `h`.
pub fn inf_sup_constant(mesh: &Mesh1D, dt: f64, a: f64, norm: TestNorm) -> Result<f64> {
    let s = inf_sup_spectrum(mesh, dt, a, norm)?;
    Ok(s[0])
}

/// Singular values, ascending, of the pairing `(w, v) + dt B_h(w, v)` between
/// trial functions in the broken L2 norm and test functions in `norm`.
pub fn inf_sup_spectrum(mesh: &Mesh1D, dt: f64, a: f64, norm: TestNorm) -> Result<Vec<f64>> {
    use nalgebra::DMatrix;
    let m = assemble(mesh, dt, a)?;
    let n = mesh.n_dofs();
    let mass = DMatrix::from_row_slice(n, n, &SchemeMatrices::dg_mass(mesh).to_dense());
    let gram_v = match norm {
        // (I - dt A*) v_j = w_j, so the Gram matrix is the DG mass matrix
        TestNorm::Graph => mass.clone(),
        TestNorm::Adjoint => adjoint_gram(mesh, dt, a)?,
    };
    let inv_sqrt = |g: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let eig = g.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::Eigen("Gram matrix is not positive definite".into()));
        }
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
    };
    // lhs rows are test functions; transpose to pair trial rows with test columns
    let pairing = DMatrix::from_row_slice(n, n, &m.lhs.to_dense()).transpose();
    let normalized = inv_sqrt(mass)? * pairing * inv_sqrt(gram_v)?;
    let mut s: Vec<f64> = normalized.singular_values().iter().copied().collect();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Gram matrix of `A* v_j` over the test basis, by Gauss quadrature.
fn adjoint_gram(mesh: &Mesh1D, dt: f64, a: f64) -> Result<nalgebra::DMatrix<f64>> {
    use nalgebra::DMatrix;
    let n = mesh.n_dofs();
    let rule = GaussLegendre::new(30);
    let tests: Vec<TestFunction> = (0..n)
        .map(|j| TestFunction::basis(mesh, j, dt, a))
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for k in 0..mesh.n_elements() {
        let (xl, xr) = mesh.element_bounds(k);
        points.extend(rule.mapped(xl, xr));
    }
    let derivs = DMatrix::from_fn(n, points.len(), |j, p| {
        -a * tests[j].derivative(points[p].0).expect("inside the domain") * points[p].1.sqrt()
    });
    Ok(&derivs * derivs.transpose())
}
