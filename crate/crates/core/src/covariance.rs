//! Matérn covariance on (0, 1) and its Karhunen-Loève eigenpairs.
//!
//! The integral operator `[Q f](x) = int_0^1 k(x, y) f(y) dy` is discretized by
//! the midpoint rule (Nyström's method). With weights `W` and Gram matrix `K`
//! the symmetric matrix `W^{1/2} K W^{1/2}` has the same spectrum as the
//! discrete operator `K W`; its eigenvectors give the eigenfunctions at the
//! quadrature nodes, and the Nyström formula extends them to any `x`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::special::bessel_k;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternSpec {
    pub nu: f64,
    pub rho: f64,
}

impl MaternSpec {
    pub fn new(nu: f64, rho: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Matérn smoothness must be positive, got {nu}"
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "correlation length must be positive, got {rho}"
            )));
        }
        Ok(Self { nu, rho })
    }

    /// Correlation at distance `r >= 0`.
    pub fn correlation(&self, r: f64) -> f64 {
        let r = r.abs();
        if r == 0.0 {
            return 1.0;
        }
        let z = (2.0 * self.nu).sqrt() * r / self.rho;
        let k = bessel_k(self.nu, z).expect("Bessel K is defined for positive arguments");
        if k == 0.0 {
            return 0.0;
        }
        // log form keeps z^nu K_nu(z) finite for large nu
        let log_val = (1.0 - self.nu) * std::f64::consts::LN_2 - gamma(self.nu).ln() + self.nu * z.ln() + k.ln();
        log_val.exp()
    }
}

pub fn matern_kernel(x: f64, y: f64, spec: &MaternSpec) -> f64 {
    spec.correlation(x - y)
}

/// Covariance kernels the Nyström solver accepts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Matern(MaternSpec),
    /// `k(x, y) = 1`: a rank-one operator with the constant eigenfunction.
    Constant,
}

impl Kernel {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Kernel::Matern(spec) => matern_kernel(x, y, spec),
            Kernel::Constant => 1.0,
        }
    }

    /// Stationary kernels only depend on `|x - y|`.
    fn at_distance(&self, r: f64) -> f64 {
        self.eval(0.0, r)
    }
}

/// Leading eigenpairs of the covariance operator on the midpoint grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KlDecomposition {
    kernel: Kernel,
    quad_points: Vec<f64>,
    quad_weights: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Mode-major: `eigenvectors[k * n_quad + j] = e_k(q_j)`.
    eigenvectors: Vec<f64>,
    trace: f64,
}

pub fn nystrom_eigendecomposition(spec: &MaternSpec, n_quad: usize, n_modes: usize) -> Result<KlDecomposition> {
    KlDecomposition::nystrom(Kernel::Matern(*spec), n_quad, n_modes)
}

impl KlDecomposition {
    pub fn nystrom(kernel: Kernel, n_quad: usize, n_modes: usize) -> Result<Self> {
        if n_quad == 0 {
            return Err(Error::InvalidArgument("Nyström grid needs at least one point".into()));
        }
        if n_modes > n_quad {
            return Err(Error::NotEnoughModes {
                requested: n_modes,
                available: n_quad,
            });
        }
        let w = 1.0 / n_quad as f64;
        let quad_points: Vec<f64> = (0..n_quad).map(|j| (j as f64 + 0.5) * w).collect();
        let quad_weights = vec![w; n_quad];

        // uniform grid: the Gram matrix is Toeplitz
        let row: Vec<f64> = (0..n_quad).map(|d| kernel.at_distance(d as f64 * w)).collect();
        let scaled = DMatrix::from_fn(n_quad, n_quad, |i, j| w * row[i.abs_diff(j)]);
        if scaled.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigen("kernel produced non-finite Gram entries".into()));
        }
        let trace = quad_weights
            .iter()
            .zip(&quad_points)
            .map(|(wj, &q)| wj * kernel.eval(q, q))
            .sum();

        let eig = SymmetricEigen::try_new(scaled, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Eigen(format!("symmetric eigensolver did not converge (n = {n_quad})")))?;
        let mut order: Vec<usize> = (0..n_quad).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let inv_sqrt_w = 1.0 / w.sqrt();
        // eigenvalues below the rounding level of the solver are zero
        let floor = n_quad as f64 * f64::EPSILON * eig.eigenvalues[order[0]].abs();
        let mut eigenvalues = Vec::with_capacity(n_modes);
        let mut eigenvectors = Vec::with_capacity(n_modes * n_quad);
        for &idx in order.iter().take(n_modes) {
            let eta = eig.eigenvalues[idx];
            eigenvalues.push(if eta > floor { eta } else { 0.0 });
            let col = eig.eigenvectors.column(idx);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = col
                .iter()
                .fold(0.0f64, |acc, &v| if v.abs() > acc.abs() { v } else { acc });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            eigenvectors.extend(col.iter().map(|&v| sign * v * inv_sqrt_w));
        }
        Ok(Self {
            kernel,
            quad_points,
            quad_weights,
            eigenvalues,
            eigenvectors,
            trace,
        })
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn n_quad(&self) -> usize {
        self.quad_points.len()
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn quad_points(&self) -> &[f64] {
        &self.quad_points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// `eta_1 >= eta_2 >= ... >= 0`; index 0 is the leading mode.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Values of mode `k` (zero-based) at the quadrature points.
    pub fn eigenvector(&self, k: usize) -> &[f64] {
        let n = self.n_quad();
        &self.eigenvectors[k * n..(k + 1) * n]
    }

    /// Quadrature approximation of `int_0^1 k(x, x) dx`.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// `sum_{k > n} eta_k`, computed as the trace minus the leading `n` eigenvalues.
    pub fn truncation_tail(&self, n: usize) -> Result<f64> {
        if n > self.n_modes() {
            return Err(Error::NotEnoughModes {
                requested: n,
                available: self.n_modes(),
            });
        }
        let head: f64 = self.eigenvalues[..n].iter().sum();
        Ok((self.trace - head).max(0.0))
    }

    /// Smallest `n` with `truncation_tail(n) <= target`.
    pub fn modes_for_tail(&self, target: f64) -> Result<usize> {
        (0..=self.n_modes())
            .find(|&n| self.truncation_tail(n).is_ok_and(|t| t <= target))
            .ok_or(Error::NotEnoughModes {
                requested: self.n_modes() + 1,
                available: self.n_modes(),
            })
    }

    /// Nyström interpolation `e_k(x) = eta_k^-1 sum_j w_j k(x, q_j) e_k(q_j)`.
    pub fn eigenfunction_eval(&self, k: usize, x: f64) -> Result<f64> {
        let mut out = [0.0];
        self.eigenfunctions_at(x, k..k + 1, &mut out)?;
        Ok(out[0])
    }

    /// Evaluates modes `0..n_modes` at every point of `xs`; the result is
    /// mode-major, `out[k * xs.len() + i] = e_k(xs[i])`.
    pub fn eigenfunctions_on(&self, xs: &[f64], n_modes: usize) -> Result<Vec<f64>> {
        if n_modes > self.n_modes() {
            return Err(Error::NotEnoughModes {
                requested: n_modes,
                available: self.n_modes(),
            });
        }
        let mut out = vec![0.0; n_modes * xs.len()];
        let mut column = vec![0.0; n_modes];
        for (i, &x) in xs.iter().enumerate() {
            self.eigenfunctions_at(x, 0..n_modes, &mut column)?;
            for (k, v) in column.iter().enumerate() {
                out[k * xs.len() + i] = *v;
            }
        }
        Ok(out)
    }

    fn eigenfunctions_at(&self, x: f64, modes: std::ops::Range<usize>, out: &mut [f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutOfDomain(x));
        }
        if modes.end > self.n_modes() {
            return Err(Error::NotEnoughModes {
                requested: modes.end,
                available: self.n_modes(),
            });
        }
        let kx: Vec<f64> = self
            .quad_points
            .iter()
            .zip(&self.quad_weights)
            .map(|(&q, &w)| w * self.kernel.eval(x, q))
            .collect();
        for (slot, k) in out.iter_mut().zip(modes) {
            let eta = self.eigenvalues[k];
            if eta <= 0.0 {
                return Err(Error::DegenerateMode {
                    mode: k,
                    eigenvalue: eta,
                });
            }
            let dot: f64 = kx.iter().zip(self.eigenvector(k)).map(|(a, b)| a * b).sum();
            *slot = dot / eta;
        }
        Ok(())
    }

    /// File name used by [`KlDecomposition::save_cache`] for a Matérn spec.
    pub fn cache_file_name(spec: &MaternSpec, n_quad: usize, n_modes: usize) -> String {
        format!("matern_nu{}_rho{}_nq{}_nm{}.kl", spec.nu, spec.rho, n_quad, n_modes)
    }

    /// Loads a cached decomposition from `dir` or computes and stores it.
    pub fn load_or_compute(dir: &Path, spec: &MaternSpec, n_quad: usize, n_modes: usize) -> Result<Self> {
        let path = dir.join(Self::cache_file_name(spec, n_quad, n_modes));
        if path.exists() {
            let loaded = Self::load_cache(&path)?;
            if loaded.kernel == Kernel::Matern(*spec) && loaded.n_quad() == n_quad && loaded.n_modes() == n_modes {
                log::debug!("loaded KL cache {}", path.display());
                return Ok(loaded);
            }
            log::warn!("cache {} does not match the request; recomputing", path.display());
        }
        let decomp = nystrom_eigendecomposition(spec, n_quad, n_modes)?;
        fs::create_dir_all(dir)?;
        decomp.save_cache(&path)?;
        Ok(decomp)
    }

    /// Plain-text cache; every float is written in shortest round-trip form.
    pub fn save_cache(&self, path: &Path) -> Result<PathBuf> {
        let mut s = String::new();
        match self.kernel {
            Kernel::Matern(spec) => writeln!(s, "matern {} {}", spec.nu, spec.rho),
            Kernel::Constant => writeln!(s, "constant"),
        }
        .unwrap();
        writeln!(s, "{} {} {}", self.n_quad(), self.n_modes(), self.trace).unwrap();
        write_floats(&mut s, &self.eigenvalues);
        for k in 0..self.n_modes() {
            write_floats(&mut s, self.eigenvector(k));
        }
        fs::write(path, s)?;
        Ok(path.to_path_buf())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |what: &str| Error::Cache(format!("{}: {what}", path.display()));
        let head: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file"))?
            .split_whitespace()
            .collect();
        let kernel = match head.as_slice() {
            ["matern", nu, rho] => Kernel::Matern(MaternSpec::new(parse(nu, &bad)?, parse(rho, &bad)?)?),
            ["constant"] => Kernel::Constant,
            _ => return Err(bad("unknown kernel line")),
        };
        let dims: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing sizes"))?
            .split_whitespace()
            .collect();
        if dims.len() != 3 {
            return Err(bad("malformed size line"));
        }
        let n_quad: usize = dims[0].parse().map_err(|_| bad("bad n_quad"))?;
        let n_modes: usize = dims[1].parse().map_err(|_| bad("bad n_modes"))?;
        let trace = parse(dims[2], &bad)?;
        let eigenvalues = read_floats(lines.next(), n_modes, &bad)?;
        let mut eigenvectors = Vec::with_capacity(n_modes * n_quad);
        for _ in 0..n_modes {
            eigenvectors.extend(read_floats(lines.next(), n_quad, &bad)?);
        }
        let w = 1.0 / n_quad as f64;
        Ok(Self {
            kernel,
            quad_points: (0..n_quad).map(|j| (j as f64 + 0.5) * w).collect(),
            quad_weights: vec![w; n_quad],
            eigenvalues,
            eigenvectors,
            trace,
        })
    }
}

fn write_floats(s: &mut String, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s.push('\n');
}

fn parse(token: &str, bad: &dyn Fn(&str) -> Error) -> Result<f64> {
    token.parse().map_err(|_| bad(&format!("bad number {token:?}")))
}

fn read_floats(line: Option<&str>, expected: usize, bad: &dyn Fn(&str) -> Error) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| bad("truncated file"))?;
    let values = line
        .split_whitespace()
        .map(|t| parse(t, bad))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(bad(&format!("expected {expected} values, found {}", values.len())));
    }
    Ok(values)
}
