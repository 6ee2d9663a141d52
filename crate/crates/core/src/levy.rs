//! Normal-inverse-Gaussian Lévy fields.
//!
//! The N-dimensional NIG process is a Brownian motion with drift, run on an
//! inverse-Gaussian clock shared by all coordinates. Over a step `dt` the
//! clock advances by `s ~ IG(delta dt / gamma, (delta dt)^2)` and every
//! coordinate receives `mu dt + s theta + sqrt(s) z` with independent standard
//! normals `z`. The coordinates are uncorrelated but not independent.

use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::covariance::KlDecomposition;
use crate::error::{Error, Result};
use crate::mesh::{DgFunction, Mesh1D};
use crate::special::bessel_k;

/// Parameters of an NIG field with identity correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NigParams {
    pub alpha: f64,
    pub delta: f64,
    /// Skewness per coordinate; empty means zero.
    pub theta: Vec<f64>,
    /// Drift per coordinate; empty means zero.
    pub mu: Vec<f64>,
    /// Rescale every coordinate to `Var l_k(t) = t`.
    pub normalize_unit_variance: bool,
}

impl Default for NigParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            delta: 1.0,
            theta: Vec::new(),
            mu: Vec::new(),
            normalize_unit_variance: true,
        }
    }
}

impl NigParams {
    /// The GH index of the NIG subclass.
    pub const LAMBDA: f64 = -0.5;

    pub fn symmetric(alpha: f64, delta: f64, normalize_unit_variance: bool) -> Result<Self> {
        let p = Self {
            alpha,
            delta,
            normalize_unit_variance,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        let tt: f64 = self.theta.iter().map(|t| t * t).sum();
        if self.alpha * self.alpha <= tt {
            return Err(Error::InvalidArgument("alpha^2 must exceed theta . theta".into()));
        }
        Ok(())
    }

    pub fn theta_at(&self, k: usize) -> f64 {
        self.theta.get(k).copied().unwrap_or(0.0)
    }

    pub fn mu_at(&self, k: usize) -> f64 {
        self.mu.get(k).copied().unwrap_or(0.0)
    }

    /// `sqrt(alpha^2 - theta . theta)`, the rate of the subordinator.
    pub fn gamma(&self) -> f64 {
        let tt: f64 = self.theta.iter().map(|t| t * t).sum();
        (self.alpha * self.alpha - tt).sqrt()
    }

    /// Standard deviation of coordinate `k` at `t = 1` before normalization.
    pub fn marginal_sd(&self, k: usize) -> f64 {
        let g = self.gamma();
        let th = self.theta_at(k);
        (self.delta * (1.0 / g + th * th / (g * g * g))).sqrt()
    }
}

/// One inverse-Gaussian variate with mean `shape / rate` and variance
/// `shape / rate^3`, by the Michael-Schucany-Haas transformation.
pub fn sample_ig<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let mean = shape / rate;
    let lambda = shape * shape;
    let n: f64 = rng.sample(StandardNormal);
    let w = 0.5 * mean * n * n / lambda;
    // smaller root of the quadratic, written without cancellation
    let x = mean / (1.0 + w + (w * (w + 2.0)).sqrt());
    let u: f64 = rng.random();
    if u * (mean + x) <= mean {
        x
    } else {
        mean * mean / x
    }
}

/// Seeded generator of NIG increments for the leading `n_modes` coordinates.
#[derive(Debug, Clone)]
pub struct LevySampler {
    params: NigParams,
    n_modes: usize,
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    gamma: f64,
    scale: Vec<f64>,
}

impl LevySampler {
    pub fn new(params: NigParams, n_modes: usize, seed: u64, stream: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let scale = (0..n_modes)
            .map(|k| {
                if params.normalize_unit_variance {
                    1.0 / params.marginal_sd(k)
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            gamma: params.gamma(),
            params,
            n_modes,
            seed,
            stream,
            rng,
            scale,
        })
    }

    pub fn params(&self) -> &NigParams {
        &self.params
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn sample_nig_increment(&mut self, dt: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_modes];
        self.fill_increment(dt, &mut out)?;
        Ok(out)
    }

    /// Writes one increment into `out`, whose length must equal `n_modes`.
    /// Draw order: one normal and one uniform for the clock, then one normal
    /// per coordinate.
    pub fn fill_increment(&mut self, dt: f64, out: &mut [f64]) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        if out.len() != self.n_modes {
            return Err(Error::InvalidArgument(format!(
                "increment buffer has {} slots for {} modes",
                out.len(),
                self.n_modes
            )));
        }
        let s = sample_ig(self.params.delta * dt, self.gamma, &mut self.rng);
        let root = s.sqrt();
        let skewed = !self.params.theta.is_empty() || !self.params.mu.is_empty();
        for (k, slot) in out.iter_mut().enumerate() {
            let z: f64 = self.rng.sample(StandardNormal);
            let mut v = root * z;
            if skewed {
                v += self.params.mu_at(k) * dt + s * self.params.theta_at(k);
            }
            *slot = v * self.scale[k];
        }
        Ok(())
    }

    /// Draws `n_steps` increments and writes `time,mode,increment` rows,
    /// one per mode and step, after a header with seed and stream.
    pub fn write_path_csv<W: Write>(&mut self, dt: f64, n_steps: usize, mut out: W) -> Result<()> {
        writeln!(out, "# seed={} stream={}", self.seed, self.stream)?;
        writeln!(
            out,
            "# alpha={} delta={} normalize_unit_variance={}",
            self.params.alpha, self.params.delta, self.params.normalize_unit_variance
        )?;
        writeln!(out, "time,mode,increment")?;
        let mut inc = vec![0.0; self.n_modes];
        for i in 0..n_steps {
            self.fill_increment(dt, &mut inc)?;
            let t = (i + 1) as f64 * dt;
            for (k, v) in inc.iter().enumerate() {
                writeln!(out, "{t},{},{v}", k + 1)?;
            }
        }
        Ok(())
    }
}

/// Parameters of a generalized hyperbolic law with identity correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct GhParams {
    pub lambda: f64,
    pub alpha: f64,
    pub delta: f64,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
}

impl From<&NigParams> for GhParams {
    fn from(p: &NigParams) -> Self {
        Self {
            lambda: NigParams::LAMBDA,
            alpha: p.alpha,
            delta: p.delta,
            theta: p.theta.clone(),
            mu: p.mu.clone(),
        }
    }
}

/// `E exp(i u . GH(t))` for the unnormalized process.
///
/// The power and Bessel ratio are combined as
/// `exp(t [ (lambda/2) ln(b/q) + ln K(delta sqrt q) - ln K(delta sqrt b) ])`
/// with principal logarithms and `b = alpha^2 - theta.theta`,
/// `q = alpha^2 - (iu + theta).(iu + theta)`. Real `q` works for any `lambda`;
/// complex `q` (non-zero skewness) is supported for `|lambda| = 1/2`, where
/// `K` has the closed form `sqrt(pi / 2z) e^-z`.
pub fn char_function_gh(u: &[f64], t: f64, params: &GhParams) -> Result<Complex64> {
    let dim = u.len().max(params.theta.len()).max(params.mu.len());
    let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
    let tt: f64 = (0..dim).map(|k| at(&params.theta, k).powi(2)).sum();
    let uu: f64 = (0..dim).map(|k| at(u, k).powi(2)).sum();
    let ut: f64 = (0..dim).map(|k| at(u, k) * at(&params.theta, k)).sum();
    let um: f64 = (0..dim).map(|k| at(u, k) * at(&params.mu, k)).sum();
    let base = params.alpha * params.alpha - tt;
    if !(base > 0.0) {
        return Err(Error::BranchDomain("alpha^2 - theta . theta must be positive".into()));
    }
    let q = Complex64::new(base + uu, -2.0 * ut);
    if q.re <= 0.0 {
        return Err(Error::BranchDomain(format!("Re q = {} is not positive", q.re)));
    }
    let drift = Complex64::new(0.0, um * t);
    let power = (Complex64::new(base, 0.0) / q).ln() * (0.5 * params.lambda * t);
    let zb = params.delta * base.sqrt();
    let log_ratio = if q.im == 0.0 {
        let zq = params.delta * q.re.sqrt();
        Complex64::new(
            bessel_k(params.lambda, zq)?.ln() - bessel_k(params.lambda, zb)?.ln(),
            0.0,
        )
    } else if (params.lambda.abs() - 0.5).abs() < 1e-15 {
        let zq = q.sqrt() * params.delta;
        // ln K_{1/2}(z) = ln sqrt(pi/2) - ln(z)/2 - z
        let ln_k = |z: Complex64| -0.5 * z.ln() - z;
        ln_k(zq) - ln_k(Complex64::new(zb, 0.0))
    } else {
        return Err(Error::BranchDomain(format!(
            "complex Bessel argument requires |lambda| = 1/2, got {}",
            params.lambda
        )));
    };
    Ok((drift + power + log_ratio * t).exp())
}

/// Values `sqrt(eta_k) e_k(x_i)` at the mesh nodes, stored mode by mode.
#[derive(Debug, Clone)]
pub struct NoiseBasis {
    mesh: Mesh1D,
    n_modes: usize,
    n_nodes: usize,
    values: Vec<f64>,
}

impl NoiseBasis {
    pub fn new(decomp: &KlDecomposition, mesh: &Mesh1D, n_modes: usize) -> Result<Self> {
        if n_modes > decomp.n_modes() {
            return Err(Error::NotEnoughModes {
                requested: n_modes,
                available: decomp.n_modes(),
            });
        }
        if let Some(k) = (0..n_modes).find(|&k| decomp.eigenvalues()[k] <= 0.0) {
            return Err(Error::DegenerateMode {
                mode: k,
                eigenvalue: decomp.eigenvalues()[k],
            });
        }
        let nodes = mesh.nodes();
        let mut values = decomp.eigenfunctions_on(&nodes, n_modes)?;
        for (k, row) in values.chunks_exact_mut(nodes.len()).enumerate() {
            let s = decomp.eigenvalues()[k].sqrt();
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(Self {
            mesh: *mesh,
            n_modes,
            n_nodes: nodes.len(),
            values,
        })
    }

    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// `sqrt(eta_k) e_k` at the mesh nodes.
    pub fn mode(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    /// `out[i] = sum_k increments[k] sqrt(eta_k) e_k(x_i)` using the leading
    /// `increments.len()` modes.
    pub fn nodal_field(&self, increments: &[f64], out: &mut [f64]) {
        assert!(increments.len() <= self.n_modes, "more increments than basis modes");
        assert_eq!(out.len(), self.n_nodes);
        out.fill(0.0);
        for (k, &c) in increments.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.mode(k)) {
                *o += c * v;
            }
        }
    }

    /// Nodal values copied into the two traces of every element.
    pub fn scatter_to_dofs(nodes: &[f64], dofs: &mut [f64]) {
        for (e, pair) in dofs.chunks_exact_mut(2).enumerate() {
            pair[0] = nodes[e];
            pair[1] = nodes[e + 1];
        }
    }
}

/// Draws one increment and returns the interpolated field
/// `Delta L_N = sum_k sqrt(eta_k) Delta l_k e_k` on the basis mesh.
pub fn field_increment(sampler: &mut LevySampler, dt: f64, basis: &NoiseBasis) -> Result<DgFunction> {
    if sampler.n_modes() > basis.n_modes() {
        return Err(Error::NotEnoughModes {
            requested: sampler.n_modes(),
            available: basis.n_modes(),
        });
    }
    let inc = sampler.sample_nig_increment(dt)?;
    Ok(field_from_increments(&inc, basis))
}

pub fn field_from_increments(increments: &[f64], basis: &NoiseBasis) -> DgFunction {
    let mut nodes = vec![0.0; basis.n_nodes];
    basis.nodal_field(increments, &mut nodes);
    let mut f = DgFunction::zeros(basis.mesh);
    NoiseBasis::scatter_to_dofs(&nodes, f.coefficients_mut());
    f
}
