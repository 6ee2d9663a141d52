//! Fully discrete time stepping for `dX = (a X' + F(X)) dt + G(X) dL` on (0, 1).
//!
//! States are stored in homogenized form, `X - c` with `c` the constant
//! inflow value at `x = 1`, so the scheme always sees zero inflow data.
//! Drift and diffusion are evaluated at the old state and interpolated at the
//! element nodes; the transport part is implicit.

use std::io::Write;

use crate::error::{Error, Result};
use crate::levy::{LevySampler, NoiseBasis};
use crate::mesh::{broken_distance, project_l2, DgFunction, Mesh1D};
use crate::petrov::{assemble, SchemeMatrices};
use crate::sparse::SparseLu;
use crate::special::bessel_k;

/// Paths are aborted once any nodal value exceeds this magnitude.
pub const BLOW_UP_GUARD: f64 = 1e6;

/// Drift `F`, diffusion `G`, transport speed and boundary/initial data.
///
/// `Local` caches whatever depends on `x` only, so the per-step work at a
/// node is a few multiplications.
pub trait Coefficients: Sync {
    type Local: Copy + Send + Sync;

    fn transport_speed(&self) -> f64;
    fn local(&self, x: f64) -> Self::Local;
    fn drift(&self, xi: f64, local: Self::Local) -> f64;
    fn diffusion(&self, xi: f64, local: Self::Local) -> f64;
    /// Constant value imposed at the inflow point `x = 1`.
    fn inflow_value(&self) -> f64;
    fn initial_condition(&self, x: f64) -> f64;
}

/// Energy forward model with `Sigma(xi, x) = sigma (e^{-alpha x} - e^{-alpha}) xi`,
/// `F = Sigma^2` and `G = Sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardModel {
    pub a: f64,
    pub alpha: f64,
    pub sigma: f64,
    /// NIG tail parameter entering the initial condition.
    pub alpha_hat: f64,
}

impl Default for ForwardModel {
    fn default() -> Self {
        Self {
            a: 1.0,
            alpha: 0.5,
            sigma: 1.0,
            alpha_hat: 10.0,
        }
    }
}

impl ForwardModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !(self.alpha > 0.0) || !(self.sigma >= 0.0) || !(self.alpha_hat > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid forward model {self:?}")));
        }
        Ok(())
    }

    /// `sigma (e^{-alpha x} - e^{-alpha})`, which vanishes at `x = 1`.
    pub fn sigma_factor(&self, x: f64) -> f64 {
        self.sigma * ((-self.alpha * x).exp() - (-self.alpha).exp())
    }

    pub fn sigma_coefficient(&self, xi: f64, x: f64) -> f64 {
        self.sigma_factor(x) * xi
    }
}

impl Coefficients for ForwardModel {
    type Local = f64;

    fn transport_speed(&self) -> f64 {
        self.a
    }

    fn local(&self, x: f64) -> f64 {
        self.sigma_factor(x)
    }

    fn drift(&self, xi: f64, s: f64) -> f64 {
        let g = s * xi;
        g * g
    }

    fn diffusion(&self, xi: f64, s: f64) -> f64 {
        s * xi
    }

    fn inflow_value(&self) -> f64 {
        (-self.alpha).exp()
    }

    fn initial_condition(&self, x: f64) -> f64 {
        initial_condition(x, self)
    }
}

/// `X_0(x) = e^{-alpha x} + sigma^2 K_0(alpha_hat) / (alpha pi) (1 - e^{-alpha x})`.
pub fn initial_condition(x: f64, model: &ForwardModel) -> f64 {
    let e = (-model.alpha * x).exp();
    let k0 = bessel_k(0.0, model.alpha_hat).expect("alpha_hat is positive");
    e + model.sigma * model.sigma * k0 / (model.alpha * std::f64::consts::PI) * (1.0 - e)
}

/// Pure transport `F = G = 0` of a given initial profile with zero inflow.
#[derive(Debug, Clone, Copy)]
pub struct PureTransport<F> {
    pub a: f64,
    pub x0: F,
}

impl<F: Fn(f64) -> f64 + Sync> Coefficients for PureTransport<F> {
    type Local = ();

    fn transport_speed(&self) -> f64 {
        self.a
    }

    fn local(&self, _x: f64) {}

    fn drift(&self, _xi: f64, _: ()) -> f64 {
        0.0
    }

    fn diffusion(&self, _xi: f64, _: ()) -> f64 {
        0.0
    }

    fn inflow_value(&self) -> f64 {
        0.0
    }

    fn initial_condition(&self, x: f64) -> f64 {
        (self.x0)(x)
    }
}

/// Additive noise `G = 1`, `F = 0`, with an optional constant inflow value.
#[derive(Debug, Clone, Copy)]
pub struct AdditiveNoise<F> {
    pub a: f64,
    pub inflow: f64,
    pub x0: F,
}

impl<F: Fn(f64) -> f64 + Sync> Coefficients for AdditiveNoise<F> {
    type Local = ();

    fn transport_speed(&self) -> f64 {
        self.a
    }

    fn local(&self, _x: f64) {}

    fn drift(&self, _xi: f64, _: ()) -> f64 {
        0.0
    }

    fn diffusion(&self, _xi: f64, _: ()) -> f64 {
        1.0
    }

    fn inflow_value(&self) -> f64 {
        self.inflow
    }

    fn initial_condition(&self, x: f64) -> f64 {
        (self.x0)(x)
    }
}

/// The model seen by the scheme after subtracting the inflow value:
/// `F_hom(xi) = F(xi + c)`, `G_hom(xi) = G(xi + c)`, `X_0 - c`.
#[derive(Debug, Clone, Copy)]
pub struct Homogenized<C> {
    pub inner: C,
    pub shift: f64,
}

pub fn homogenize<C: Coefficients>(model: C) -> Homogenized<C> {
    let shift = model.inflow_value();
    Homogenized { inner: model, shift }
}

impl<C: Coefficients> Homogenized<C> {
    /// Maps a homogenized state back to the original variables.
    pub fn restore(&self, state: &DgFunction) -> DgFunction {
        state.shifted(self.shift)
    }

    /// Maps a state in original variables to homogenized form.
    pub fn reduce(&self, state: &DgFunction) -> DgFunction {
        state.shifted(-self.shift)
    }
}

impl<C: Coefficients> Coefficients for Homogenized<C> {
    type Local = C::Local;

    fn transport_speed(&self) -> f64 {
        self.inner.transport_speed()
    }

    fn local(&self, x: f64) -> C::Local {
        self.inner.local(x)
    }

    fn drift(&self, xi: f64, local: C::Local) -> f64 {
        self.inner.drift(xi + self.shift, local)
    }

    fn diffusion(&self, xi: f64, local: C::Local) -> f64 {
        self.inner.diffusion(xi + self.shift, local)
    }

    fn inflow_value(&self) -> f64 {
        0.0
    }

    fn initial_condition(&self, x: f64) -> f64 {
        self.inner.initial_condition(x) - self.shift
    }
}

/// `[S(t) X_0](x) = X_0(x + a t)` inside the domain, zero beyond the inflow point.
pub fn exact_deterministic_solution<F: Fn(f64) -> f64>(x0: F, t: f64, a: f64) -> impl Fn(f64) -> f64 {
    move |x| {
        let y = x + a * t;
        if y > 0.0 && y < 1.0 {
            x0(y)
        } else {
            0.0
        }
    }
}

/// Time stepper for one mesh and step size; owns the factorized system and
/// per-node coefficient caches. Several steppers may share one assembly.
pub struct Stepper<'a, C: Coefficients> {
    model: &'a C,
    matrices: &'a SchemeMatrices,
    lu: &'a SparseLu,
    locals: Vec<C::Local>,
    compressed: bool,
    rhs_in: Vec<f64>,
    /// Per-column guard statistics for batched steps.
    peak: Vec<f64>,
    total: Vec<f64>,
}

impl<'a, C: Coefficients> Stepper<'a, C> {
    pub fn new(model: &'a C, matrices: &'a SchemeMatrices, lu: &'a SparseLu) -> Self {
        let mesh = matrices.mesh;
        let locals = (0..mesh.n_dofs())
            .map(|i| model.local(mesh.dof_coordinate(i)))
            .collect();
        Self {
            model,
            matrices,
            lu,
            locals,
            compressed: true,
            rhs_in: vec![0.0; mesh.n_dofs()],
            peak: Vec::new(),
            total: Vec::new(),
        }
    }

    /// Use the full right-hand matrix instead of the compressed one.
    pub fn uncompressed(mut self) -> Self {
        self.compressed = false;
        self
    }

    pub fn dt(&self) -> f64 {
        self.matrices.dt
    }

    /// Advances `state` (homogenized coefficients) by one step with noise
    /// increment `dl` given as DG coefficients; `None` means no noise.
    pub fn step(&mut self, state: &mut [f64], dl: Option<&[f64]>, step_index: usize) -> Result<()> {
        let dt = self.matrices.dt;
        match dl {
            Some(dl) => {
                for (((b, &c), &loc), &d) in self.rhs_in.iter_mut().zip(state.iter()).zip(&self.locals).zip(dl) {
                    *b = c + dt * self.model.drift(c, loc) + self.model.diffusion(c, loc) * d;
                }
            }
            None => {
                for ((b, &c), &loc) in self.rhs_in.iter_mut().zip(state.iter()).zip(&self.locals) {
                    *b = c + dt * self.model.drift(c, loc);
                }
            }
        }
        let rhs = if self.compressed {
            self.matrices.rhs_compressed()
        } else {
            &self.matrices.rhs_mass
        };
        rhs.mul_vec_into(&self.rhs_in, state);
        self.lu.solve_in_place(state);
        guard(state, step_index)
    }

    /// Advances `k` independent states stored row-major (`states[i * k + s]`)
    /// with increments in the same layout. Columns flagged in `failed` are
    /// skipped; a column that leaves the guard band is zeroed and flagged.
    pub fn step_batch(&mut self, states: &mut [f64], dl: &[f64], k: usize, failed: &mut [bool]) {
        let dt = self.matrices.dt;
        assert_eq!(failed.len(), k);
        self.rhs_in.resize(states.len(), 0.0);
        for (((b, c), &loc), d) in self
            .rhs_in
            .chunks_exact_mut(k)
            .zip(states.chunks_exact(k))
            .zip(&self.locals)
            .zip(dl.chunks_exact(k))
        {
            for ((b, &c), &d) in b.iter_mut().zip(c).zip(d) {
                *b = c + dt * self.model.drift(c, loc) + self.model.diffusion(c, loc) * d;
            }
        }
        let rhs = if self.compressed {
            self.matrices.rhs_compressed()
        } else {
            &self.matrices.rhs_mass
        };
        rhs.mul_multi_into(&self.rhs_in, states, k);
        self.lu.solve_multi_in_place(states, k);
        // max ignores NaN, the sum propagates it
        self.peak.clear();
        self.peak.resize(k, 0.0);
        self.total.clear();
        self.total.resize(k, 0.0);
        for row in states.chunks_exact(k) {
            for ((p, t), v) in self.peak.iter_mut().zip(self.total.iter_mut()).zip(row) {
                *p = p.max(v.abs());
                *t += v;
            }
        }
        for ((f, p), t) in failed.iter_mut().zip(&self.peak).zip(&self.total) {
            if *p > BLOW_UP_GUARD || !t.is_finite() {
                *f = true;
            }
        }
        if failed.iter().any(|&f| f) {
            for row in states.chunks_exact_mut(k) {
                for (v, &f) in row.iter_mut().zip(failed.iter()) {
                    if f {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

fn guard(state: &[f64], step: usize) -> Result<()> {
    for &v in state {
        if !v.is_finite() || v.abs() > BLOW_UP_GUARD {
            return Err(Error::BlowUp { step, value: v });
        }
    }
    Ok(())
}

/// Which states a path keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    FinalOnly,
    All,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub mesh: Mesh1D,
    pub m: usize,
    pub t_final: f64,
    pub retention: Retention,
    pub compressed: bool,
}

impl SolverConfig {
    pub fn new(mesh: Mesh1D, m: usize, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {t_final}"
            )));
        }
        Ok(Self {
            mesh,
            m,
            t_final,
            retention: Retention::FinalOnly,
            compressed: true,
        })
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.m.max(1) as f64
    }
}

/// States of one path in the original (inhomogeneous) variables.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `(step index, state)`; the last entry is the state at `T`.
    pub states: Vec<(usize, DgFunction)>,
    pub dt: f64,
    pub seed: Option<u64>,
    pub stream: Option<u64>,
    pub normalize_unit_variance: Option<bool>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DgFunction {
        &self
            .states
            .last()
            .expect("a trajectory holds at least the initial state")
            .1
    }

    /// `step,x_left,x_right,value_left,value_right` rows after a header.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        if let Some(seed) = self.seed {
            writeln!(out, "# seed={seed} stream={}", self.stream.unwrap_or(0))?;
        }
        if let Some(flag) = self.normalize_unit_variance {
            writeln!(out, "# normalize_unit_variance={flag}")?;
        }
        writeln!(out, "# dt={}", self.dt)?;
        writeln!(out, "step,x_left,x_right,value_left,value_right")?;
        for (step, state) in &self.states {
            let mesh = state.mesh();
            for k in 0..mesh.n_elements() {
                let (xl, xr) = mesh.element_bounds(k);
                let (a, b) = state.element_values(k);
                writeln!(out, "{step},{xl},{xr},{a},{b}")?;
            }
        }
        Ok(())
    }
}

/// One path: `X_0 = P_h(X_0 - c)` followed by `m` steps. Without a sampler
/// the noise term is dropped; otherwise the sampler must produce exactly
/// the modes held by `basis`.
pub fn solve_path<C: Coefficients>(
    config: &SolverConfig,
    model: &C,
    noise: Option<(&mut LevySampler, &NoiseBasis)>,
) -> Result<Trajectory> {
    let hom = homogenize(ModelRef(model));
    let mut state = project_l2(|x| hom.initial_condition(x), &config.mesh)?;
    let dt = config.dt();
    let mut states = Vec::new();
    if config.retention == Retention::All || config.m == 0 {
        states.push((0, hom.restore(&state)));
    }
    let (seed, stream, normalized) = match &noise {
        Some((s, _)) => (
            Some(s.seed()),
            Some(s.stream()),
            Some(s.params().normalize_unit_variance),
        ),
        None => (None, None, None),
    };
    if config.m > 0 {
        let matrices = assemble(&config.mesh, dt, model.transport_speed())?;
        let lu = matrices.factor()?;
        let mut stepper = Stepper::new(&hom, &matrices, &lu);
        if !config.compressed {
            stepper = stepper.uncompressed();
        }
        let mut noise = noise;
        if let Some((sampler, basis)) = &noise {
            if basis.mesh() != &config.mesh || sampler.n_modes() != basis.n_modes() {
                return Err(Error::InvalidArgument(
                    "noise basis does not match the sampler and mesh".into(),
                ));
            }
        }
        let n_nodes = config.mesh.n_elements() + 1;
        let mut nodes = vec![0.0; n_nodes];
        let mut dl = vec![0.0; config.mesh.n_dofs()];
        let mut inc = vec![0.0; noise.as_ref().map(|(s, _)| s.n_modes()).unwrap_or(0)];
        let coeffs = state.coefficients_mut();
        for i in 1..=config.m {
            match noise.as_mut() {
                Some((sampler, basis)) => {
                    sampler.fill_increment(dt, &mut inc)?;
                    basis.nodal_field(&inc, &mut nodes);
                    NoiseBasis::scatter_to_dofs(&nodes, &mut dl);
                    stepper.step(coeffs, Some(&dl), i)?;
                }
                None => stepper.step(coeffs, None, i)?,
            }
            if config.retention == Retention::All {
                let snapshot = DgFunction::from_coefficients(config.mesh, coeffs.to_vec())?;
                states.push((i, hom.restore(&snapshot)));
            }
        }
        if config.retention == Retention::FinalOnly {
            states.push((config.m, hom.restore(&state)));
        }
    }
    Ok(Trajectory {
        states,
        dt,
        seed,
        stream,
        normalize_unit_variance: normalized,
    })
}

/// Borrowed model so `homogenize` can wrap a reference.
struct ModelRef<'a, C>(&'a C);

impl<C: Coefficients> Coefficients for ModelRef<'_, C> {
    type Local = C::Local;

    fn transport_speed(&self) -> f64 {
        self.0.transport_speed()
    }

    fn local(&self, x: f64) -> C::Local {
        self.0.local(x)
    }

    fn drift(&self, xi: f64, local: C::Local) -> f64 {
        self.0.drift(xi, local)
    }

    fn diffusion(&self, xi: f64, local: C::Local) -> f64 {
        self.0.diffusion(xi, local)
    }

    fn inflow_value(&self) -> f64 {
        self.0.inflow_value()
    }

    fn initial_condition(&self, x: f64) -> f64 {
        self.0.initial_condition(x)
    }
}

/// A `C^2` bump supported in `(0.3, 0.6)`: `(1 - r^2)^3` with `r = (x - 0.45) / 0.15`.
pub fn smooth_bump(x: f64) -> f64 {
    let r = (x - 0.45) / 0.15;
    if r.abs() < 1.0 {
        (1.0 - r * r).powi(3)
    } else {
        0.0
    }
}

/// Noise-free transport of `x0` measured against the shift oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicRun {
    pub h: f64,
    pub m: usize,
    pub error: f64,
}

/// Solves pure transport of `x0` up to `t_final` on each dyadic mesh with
/// `m = ceil(t_final / (dt_scale h^2))` steps and records the broken-norm
/// error against the exact shifted profile.
pub fn deterministic_convergence<F: Fn(f64) -> f64 + Sync + Copy>(
    x0: F,
    a: f64,
    t_final: f64,
    h_exps: &[u32],
    dt_scale: f64,
) -> Result<Vec<DeterministicRun>> {
    let model = PureTransport { a, x0 };
    let exact = exact_deterministic_solution(x0, t_final, a);
    h_exps
        .iter()
        .map(|&e| {
            let mesh = Mesh1D::dyadic(e)?;
            let h = mesh.h();
            let m = (t_final / (dt_scale * h * h)).ceil() as usize;
            let config = SolverConfig::new(mesh, m, t_final)?;
            let path = solve_path(&config, &model, None)?;
            let error = broken_distance(path.final_state(), &exact, 10);
            Ok(DeterministicRun { h, m, error })
        })
        .collect()
}
