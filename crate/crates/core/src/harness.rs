//! Monte Carlo strong-error study: error equilibration, coupled reference and
//! coarse solves, RMSE estimation and log-log rate regression.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::covariance::{KlDecomposition, MaternSpec};
use crate::error::{Error, Result};
use crate::levy::{LevySampler, NigParams, NoiseBasis};
use crate::mesh::{project_l2, DgFunction, Mesh1D};
use crate::petrov::{assemble, SchemeMatrices};
use crate::solver::{homogenize, Coefficients, ForwardModel, Homogenized, Stepper};
use crate::sparse::SparseLu;

/// Noise fields are formed this many steps at a time with one matrix product.
const FIELD_BLOCK: usize = 32;

/// Samples advanced in lockstep so each sparse row is traversed once per batch.
pub const SAMPLE_BATCH: usize = 8;

/// Hard cap on reference steps after making all coarse step counts divide it.
pub const MAX_REFERENCE_STEPS: usize = 1 << 24;

/// Share of aborted paths above which a cell is flagged invalid.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

/// Exponent `gamma` used to equilibrate the error contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaMode {
    /// `gamma = min(3/2, nu)`.
    Paper,
    Custom(f64),
}

impl GammaMode {
    pub fn gamma(&self, nu: f64) -> f64 {
        match *self {
            GammaMode::Paper => nu.min(1.5),
            GammaMode::Custom(g) => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub nu_list: Vec<f64>,
    pub rho: f64,
    /// Study meshes `h = 2^-e`, coarse to fine.
    pub h_exps: Vec<u32>,
    pub ref_exp: u32,
    pub samples: usize,
    pub t_final: f64,
    pub model: ForwardModel,
    pub nig_delta: f64,
    pub normalize_variance: bool,
    pub seed: u64,
    /// Time steps and tails are never driven below `2^-dt_floor_exp`.
    pub dt_floor_exp: u32,
    pub gamma_mode: GammaMode,
    pub n_quad: usize,
    /// Directory for cached KL decompositions.
    pub cache_dir: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            nu_list: vec![0.5, 1.0, 2.0],
            rho: 0.25,
            h_exps: vec![3, 4, 5, 6],
            ref_exp: 8,
            samples: 100,
            t_final: 1.0,
            model: ForwardModel::default(),
            nig_delta: 1.0,
            normalize_variance: true,
            seed: 2024,
            dt_floor_exp: 20,
            gamma_mode: GammaMode::Paper,
            n_quad: 512,
            cache_dir: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nu_list.is_empty() || self.nu_list.iter().any(|&nu| !(nu > 0.0)) {
            return bad(format!(
                "smoothness list must be non-empty and positive: {:?}",
                self.nu_list
            ));
        }
        if self.h_exps.is_empty() {
            return bad("no study meshes".into());
        }
        if self.h_exps.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("mesh exponents must increase: {:?}", self.h_exps));
        }
        let finest = *self.h_exps.last().unwrap();
        if self.ref_exp <= finest {
            return bad(format!("reference exponent {} must exceed {finest}", self.ref_exp));
        }
        if self.samples < 2 {
            return bad("at least two samples are required".into());
        }
        if !(self.t_final > 0.0) || !(self.rho > 0.0) || !(self.nig_delta > 0.0) {
            return bad("horizon, correlation length and NIG scale must be positive".into());
        }
        if let GammaMode::Custom(g) = self.gamma_mode {
            if !(g > 0.0) {
                return bad(format!("gamma must be positive, got {g}"));
            }
        }
        self.model.validate()
    }

    fn nig(&self) -> Result<NigParams> {
        NigParams::symmetric(self.model.alpha_hat, self.nig_delta, self.normalize_variance)
    }

    /// Short SHA-256 digest of every field that affects the numbers.
    pub fn hash(&self) -> String {
        let text = format!(
            "{:?}|{}|{:?}|{}|{}|{}|{:?}|{}|{}|{}|{}|{:?}|{}",
            self.nu_list,
            self.rho,
            self.h_exps,
            self.ref_exp,
            self.samples,
            self.t_final,
            self.model,
            self.nig_delta,
            self.normalize_variance,
            self.seed,
            self.dt_floor_exp,
            self.gamma_mode,
            self.n_quad
        );
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Time steps and KL modes for one mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibration {
    pub target: f64,
    pub m: usize,
    pub n_modes: usize,
}

/// `target = max(h^{2 gamma}, dt_floor)`, `m = ceil(T / target)` and the
/// smallest `N` whose truncation tail is at most `target`.
pub fn equilibrate(h: f64, gamma: f64, decomp: &KlDecomposition, t_final: f64, dt_floor: f64) -> Result<Equilibration> {
    if !(gamma > 0.0) || !(h > 0.0) || !(t_final > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "equilibration needs positive h, gamma and T (h = {h}, gamma = {gamma}, T = {t_final})"
        )));
    }
    let target = h.powf(2.0 * gamma).max(dt_floor);
    let m = (t_final / target).ceil() as usize;
    let n_modes = decomp.modes_for_tail(target)?;
    Ok(Equilibration { target, m, n_modes })
}

/// Ordinary least squares of `y` on `x`: `(slope, slope standard error, intercept)`.
/// The standard error is zero for two points.
pub fn least_squares_slope(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if points.len() > 2 {
        let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, stderr, intercept)
}

/// Slope of `log rmse` against `log h` with its regression standard error.
pub fn fit_rate(h: &[f64], rmse: &[f64]) -> Result<(f64, f64)> {
    if h.len() != rmse.len() || h.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs at least 3 paired points, got {} and {}",
            h.len(),
            rmse.len()
        )));
    }
    if let Some(&r) = rmse.iter().chain(h).find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs positive values, got {r}"
        )));
    }
    let pts: Vec<(f64, f64)> = h.iter().zip(rmse).map(|(h, r)| (h.ln(), r.ln())).collect();
    let (slope, stderr, _) = least_squares_slope(&pts);
    Ok((slope, stderr))
}

/// RMSE with a 95% interval from the squared errors: normal approximation on
/// the mean, delta method for the square root, lower end floored at zero.
pub fn rmse_from_squared(squared: &[f64]) -> (f64, f64, f64) {
    let n = squared.len() as f64;
    if squared.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = squared.iter().sum::<f64>() / n;
    let rmse = mean.sqrt();
    if squared.len() < 2 || rmse == 0.0 {
        return (rmse, rmse, rmse);
    }
    let var = squared.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt() / (2.0 * rmse);
    (rmse, (rmse - half).max(0.0), rmse + half)
}

/// Broken L2 distance between a function on a nested finer mesh and one on a
/// coarser mesh, integrated exactly over the fine elements.
pub fn nested_broken_distance(fine: &DgFunction, coarse: &DgFunction) -> Result<f64> {
    let nf = fine.mesh().n_elements();
    let nc = coarse.mesh().n_elements();
    if nf < nc || !nf.is_multiple_of(nc) {
        return Err(Error::InvalidArgument(format!(
            "meshes with {nf} and {nc} elements are not nested"
        )));
    }
    let r = nf / nc;
    let hf = fine.mesh().h();
    // barycentric weights keep identical meshes bit-exact
    let at = |kc: usize, j: usize| {
        let (cl, cr) = coarse.element_values(kc);
        let t = j as f64 / r as f64;
        (1.0 - t) * cl + t * cr
    };
    let mut total = 0.0;
    for k in 0..nf {
        let (kc, j) = (k / r, k % r);
        let (fl, fr) = fine.element_values(k);
        let dl = fl - at(kc, j);
        let dr = fr - at(kc, j + 1);
        total += hf / 3.0 * (dl * dl + dl * dr + dr * dr);
    }
    Ok(total.sqrt())
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Mesh, step count, mode count and assembled system of one level.
pub struct Level {
    pub mesh: Mesh1D,
    pub m: usize,
    pub n_modes: usize,
    pub target: f64,
    matrices: SchemeMatrices,
    lu: SparseLu,
    /// `sqrt(eta_k) e_k` at the nodes, one column per mode.
    field: DMatrix<f64>,
    initial: Vec<f64>,
}

impl Level {
    pub fn new<C: Coefficients>(
        model: &Homogenized<C>,
        decomp: &KlDecomposition,
        exp: u32,
        eq: Equilibration,
        t_final: f64,
    ) -> Result<Self> {
        let mesh = Mesh1D::dyadic(exp)?;
        let matrices = assemble(&mesh, t_final / eq.m as f64, model.transport_speed())?;
        let lu = matrices.factor()?;
        let basis = NoiseBasis::new(decomp, &mesh, eq.n_modes)?;
        let n_nodes = mesh.n_elements() + 1;
        let mut field = DMatrix::zeros(n_nodes, eq.n_modes);
        for k in 0..eq.n_modes {
            field.column_mut(k).copy_from_slice(basis.mode(k));
        }
        let initial = project_l2(|x| model.initial_condition(x), &mesh)?.into_coefficients();
        Ok(Self {
            mesh,
            m: eq.m,
            n_modes: eq.n_modes,
            target: eq.target,
            matrices,
            lu,
            field,
            initial,
        })
    }

    pub fn dt(&self) -> f64 {
        self.matrices.dt
    }
}

/// State of one level for a batch of `k` samples while the fine noise is
/// streamed through. States are row-major, `state[i * k + s]`.
struct Runner<'a, C: Coefficients> {
    level: &'a Level,
    stepper: Stepper<'a, Homogenized<C>>,
    k: usize,
    state: Vec<f64>,
    ratio: usize,
    /// Running sums of fine increments, one run of `n_modes` per sample.
    acc: Vec<f64>,
    /// Column `c * k + s` holds the increment of step `c` for sample `s`.
    block: DMatrix<f64>,
    filled: usize,
    steps_done: usize,
    nodes: DMatrix<f64>,
    dofs: Vec<f64>,
    failed: Vec<bool>,
}

impl<'a, C: Coefficients> Runner<'a, C> {
    fn new(level: &'a Level, model: &'a Homogenized<C>, m_ref: usize, k: usize) -> Self {
        let n_nodes = level.mesh.n_elements() + 1;
        let n_dofs = level.mesh.n_dofs();
        let state = level.initial.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
        Self {
            level,
            stepper: Stepper::new(model, &level.matrices, &level.lu),
            k,
            state,
            ratio: m_ref / level.m,
            acc: vec![0.0; level.n_modes * k],
            block: DMatrix::zeros(level.n_modes, FIELD_BLOCK * k),
            filled: 0,
            steps_done: 0,
            nodes: DMatrix::zeros(n_nodes, FIELD_BLOCK * k),
            dofs: vec![0.0; n_dofs * k],
            failed: vec![false; k],
        }
    }

    fn all_failed(&self) -> bool {
        self.failed.iter().all(|&f| f)
    }

    /// Adds the fine increments of step `i` (zero based); `inc` holds
    /// `stride` modes per sample, of which the leading `n_modes` are used.
    fn push(&mut self, i: usize, inc: &[f64], stride: usize) {
        let n = self.level.n_modes;
        for (a, d) in self.acc.chunks_exact_mut(n.max(1)).zip(inc.chunks_exact(stride)) {
            for (a, &d) in a.iter_mut().zip(&d[..n]) {
                *a += d;
            }
        }
        if (i + 1).is_multiple_of(self.ratio) {
            for s in 0..self.k {
                self.block
                    .column_mut(self.filled * self.k + s)
                    .copy_from_slice(&self.acc[s * n..(s + 1) * n]);
            }
            self.acc.fill(0.0);
            self.filled += 1;
            if self.filled == FIELD_BLOCK {
                self.flush();
            }
        }
    }

    fn flush(&mut self) {
        if self.filled == 0 {
            return;
        }
        let cols = self.filled * self.k;
        self.filled = 0;
        if self.all_failed() {
            return;
        }
        let mut nodes = self.nodes.columns_mut(0, cols);
        nodes.gemm(1.0, &self.level.field, &self.block.columns(0, cols), 0.0);
        let k = self.k;
        let n_elements = self.level.mesh.n_elements();
        for c in 0..cols / k {
            for s in 0..k {
                let col = self.nodes.column(c * k + s);
                for e in 0..n_elements {
                    self.dofs[2 * e * k + s] = col[e];
                    self.dofs[(2 * e + 1) * k + s] = col[e + 1];
                }
            }
            self.steps_done += 1;
            self.stepper
                .step_batch(&mut self.state, &self.dofs, k, &mut self.failed);
            if self.all_failed() {
                log::debug!(
                    "all paths aborted on mesh h = {} at step {}",
                    self.level.mesh.h(),
                    self.steps_done
                );
                return;
            }
        }
    }

    fn finish(mut self) -> Vec<Option<DgFunction>> {
        self.flush();
        let k = self.k;
        (0..k)
            .map(|s| {
                if self.failed[s] {
                    log::debug!("path {s} of a batch aborted on mesh h = {}", self.level.mesh.h());
                    return None;
                }
                let coeffs = self.state.iter().skip(s).step_by(k).copied().collect();
                DgFunction::from_coefficients(self.level.mesh, coeffs).ok()
            })
            .collect()
    }
}

/// Squared broken-norm errors at `T` of each coarse level against the
/// reference, for a batch of noise paths driven by `samplers` in lockstep.
/// The result is indexed `[sample][level]`; `None` marks an aborted path.
pub fn coupled_batch<C: Coefficients>(
    model: &Homogenized<C>,
    reference: &Level,
    coarse: &[Level],
    m_ref: usize,
    samplers: &mut [LevySampler],
) -> Result<Vec<Vec<Option<f64>>>> {
    let k = samplers.len();
    let n = reference.n_modes;
    let dt = reference.dt();
    let mut fine = Runner::new(reference, model, m_ref, k);
    let mut runners: Vec<Runner<'_, C>> = coarse.iter().map(|l| Runner::new(l, model, m_ref, k)).collect();
    let mut inc = vec![0.0; n * k];
    for i in 0..m_ref {
        for (sampler, slot) in samplers.iter_mut().zip(inc.chunks_exact_mut(n.max(1))) {
            sampler.fill_increment(dt, &mut slot[..n])?;
        }
        fine.push(i, &inc, n);
        for r in runners.iter_mut() {
            r.push(i, &inc, n);
        }
        if fine.all_failed() {
            break;
        }
    }
    let references = fine.finish();
    let states: Vec<Vec<Option<DgFunction>>> = runners.into_iter().map(Runner::finish).collect();
    references
        .iter()
        .enumerate()
        .map(|(s, r)| {
            states
                .iter()
                .map(|level| match (r, &level[s]) {
                    (Some(r), Some(c)) => nested_broken_distance(r, c).map(|d| Some(d * d)),
                    _ => Ok(None),
                })
                .collect()
        })
        .collect()
}

/// [`coupled_batch`] for a single path.
pub fn coupled_sample<C: Coefficients>(
    model: &Homogenized<C>,
    reference: &Level,
    coarse: &[Level],
    m_ref: usize,
    sampler: &mut LevySampler,
) -> Result<Vec<Option<f64>>> {
    let mut out = coupled_batch(model, reference, coarse, m_ref, std::slice::from_mut(sampler))?;
    Ok(out.pop().expect("one sample in, one out"))
}

/// One `(nu, h)` cell of the study.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub nu: f64,
    pub h_exp: u32,
    pub h: f64,
    pub m: usize,
    pub n_modes: usize,
    pub samples: usize,
    pub aborted: usize,
    pub rmse: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub nu: f64,
    pub gamma: f64,
    pub slope: f64,
    pub stderr: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<CellResult>,
    pub rates: Vec<RateResult>,
    /// Failures that prevented a cell or a whole `nu` from being computed.
    pub failures: Vec<String>,
}

/// KL decomposition with all `n_quad` modes, cached when a directory is given.
pub fn decomposition(spec: &MaternSpec, n_quad: usize, cache_dir: Option<&Path>) -> Result<KlDecomposition> {
    match cache_dir {
        Some(dir) => KlDecomposition::load_or_compute(dir, spec, n_quad, n_quad),
        None => crate::covariance::nystrom_eigendecomposition(spec, n_quad, n_quad),
    }
}

/// Runs every coarse level of one `nu` against the shared reference level.
fn study_nu(config: &StudyConfig, nu_index: usize, nu: f64) -> Result<Vec<CellResult>> {
    let spec = MaternSpec::new(nu, config.rho)?;
    let decomp = decomposition(&spec, config.n_quad, config.cache_dir.as_deref())?;
    let gamma = config.gamma_mode.gamma(nu);
    let floor = (-(config.dt_floor_exp as f64)).exp2();
    let eq_of = |e: u32| equilibrate((-(e as f64)).exp2(), gamma, &decomp, config.t_final, floor);
    let ref_eq = eq_of(config.ref_exp)?;
    let coarse_eq = config.h_exps.iter().map(|&e| eq_of(e)).collect::<Result<Vec<_>>>()?;

    let mut m_ref = ref_eq.m;
    for eq in &coarse_eq {
        m_ref = lcm(m_ref, eq.m);
    }
    if m_ref > MAX_REFERENCE_STEPS {
        return Err(Error::InvalidArgument(format!(
            "reference step count {m_ref} needed for nested time grids exceeds {MAX_REFERENCE_STEPS}"
        )));
    }
    if m_ref != ref_eq.m {
        log::warn!(
            "nu = {nu}: reference steps raised from {} to {m_ref} so coarse grids nest",
            ref_eq.m
        );
    }
    if let Some(eq) = coarse_eq.iter().find(|eq| eq.n_modes > ref_eq.n_modes) {
        return Err(Error::NotEnoughModes {
            requested: eq.n_modes,
            available: ref_eq.n_modes,
        });
    }

    let model = homogenize(config.model);
    let reference = Level::new(
        &model,
        &decomp,
        config.ref_exp,
        Equilibration { m: m_ref, ..ref_eq },
        config.t_final,
    )?;
    let coarse = config
        .h_exps
        .iter()
        .zip(&coarse_eq)
        .map(|(&e, &eq)| Level::new(&model, &decomp, e, eq, config.t_final))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "nu = {nu}: reference m = {m_ref}, N = {}; coarse (m, N) = {:?}",
        ref_eq.n_modes,
        coarse_eq.iter().map(|e| (e.m, e.n_modes)).collect::<Vec<_>>()
    );

    let nig = config.nig()?;
    let starts: Vec<usize> = (0..config.samples).step_by(SAMPLE_BATCH).collect();
    let batches: Vec<Vec<Vec<Option<f64>>>> = starts
        .into_par_iter()
        .map(|start| {
            let mut samplers = (start..(start + SAMPLE_BATCH).min(config.samples))
                .map(|s| {
                    let stream = ((nu_index as u64) << 32) | s as u64;
                    LevySampler::new(nig.clone(), reference.n_modes, config.seed, stream)
                })
                .collect::<Result<Vec<_>>>()?;
            coupled_batch(&model, &reference, &coarse, m_ref, &mut samplers)
        })
        .collect::<Result<_>>()?;
    let per_sample: Vec<Vec<Option<f64>>> = batches.into_iter().flatten().collect();

    Ok(coarse
        .iter()
        .enumerate()
        .map(|(c, level)| {
            let squared: Vec<f64> = per_sample.iter().filter_map(|s| s[c]).collect();
            let aborted = config.samples - squared.len();
            let (rmse, ci_lo, ci_hi) = rmse_from_squared(&squared);
            CellResult {
                nu,
                h_exp: config.h_exps[c],
                h: level.mesh.h(),
                m: level.m,
                n_modes: level.n_modes,
                samples: squared.len(),
                aborted,
                rmse,
                ci_lo,
                ci_hi,
                valid: !squared.is_empty() && aborted as f64 <= MAX_ABORT_FRACTION * config.samples as f64,
            }
        })
        .collect())
}

/// Full study: equilibration, coupled RMSE estimation and a rate fit per `nu`.
/// Failures of one `nu` are recorded and the study moves on.
pub fn run_convergence_study(config: &StudyConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    let mut report = ConvergenceReport {
        config_hash: config.hash(),
        seed: config.seed,
        cells: Vec::new(),
        rates: Vec::new(),
        failures: Vec::new(),
    };
    for (i, &nu) in config.nu_list.iter().enumerate() {
        let cells = match study_nu(config, i, nu) {
            Ok(cells) => cells,
            Err(e) => {
                log::error!("nu = {nu}: {e}");
                report.failures.push(format!("nu={nu}: {e}"));
                continue;
            }
        };
        for cell in cells.iter().filter(|c| !c.valid) {
            report.failures.push(format!(
                "nu={nu} h=2^-{}: {} of {} paths aborted",
                cell.h_exp, cell.aborted, config.samples
            ));
        }
        let usable: Vec<&CellResult> = cells.iter().filter(|c| c.valid && c.rmse > 0.0).collect();
        if usable.len() >= 3 {
            let h: Vec<f64> = usable.iter().map(|c| c.h).collect();
            let r: Vec<f64> = usable.iter().map(|c| c.rmse).collect();
            let (slope, stderr) = fit_rate(&h, &r)?;
            report.rates.push(RateResult {
                nu,
                gamma: config.gamma_mode.gamma(nu),
                slope,
                stderr,
                n_points: usable.len(),
            });
        }
        report.cells.extend(cells);
    }
    Ok(report)
}

impl ConvergenceReport {
    fn header(&self, config: &StudyConfig) -> String {
        format!(
            "# levy-transport {}\n# config_hash={} seed={}\n# gamma_mode={:?} normalize_variance={} rho={} t_final={} ref_exp={}\n",
            env!("CARGO_PKG_VERSION"),
            self.config_hash,
            self.seed,
            config.gamma_mode,
            if config.normalize_variance { "on" } else { "off" },
            config.rho,
            config.t_final,
            config.ref_exp
        )
    }

    pub fn rmse_csv(&self, config: &StudyConfig) -> String {
        let mut s = self.header(config);
        s.push_str("nu,h,m,N,samples,aborted,rmse,ci_lo,ci_hi\n");
        for c in &self.cells {
            if !c.valid {
                let _ = writeln!(s, "# invalid cell: more than 1% of paths aborted");
            }
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.nu, c.h, c.m, c.n_modes, c.samples, c.aborted, c.rmse, c.ci_lo, c.ci_hi
            );
        }
        s
    }

    pub fn rates_csv(&self, config: &StudyConfig) -> String {
        let mut s = self.header(config);
        for f in &self.failures {
            let _ = writeln!(s, "# failure: {f}");
        }
        s.push_str("nu,slope,stderr,n_points\n");
        for r in &self.rates {
            let _ = writeln!(s, "{},{},{},{}", r.nu, r.slope, r.stderr, r.n_points);
        }
        s
    }

    /// Writes `rmse.csv` and `rates.csv` into `dir`.
    pub fn write(&self, config: &StudyConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let rmse = dir.join("rmse.csv");
        let rates = dir.join("rates.csv");
        fs::write(&rmse, self.rmse_csv(config))?;
        fs::write(&rates, self.rates_csv(config))?;
        Ok((rmse, rates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::nystrom_eigendecomposition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equilibration_formula() {
        let d = nystrom_eigendecomposition(&MaternSpec::new(1.0, 0.25).unwrap(), 256, 256).unwrap();
        let eq = equilibrate(0.25, 0.5, &d, 1.0, 2f64.powi(-20)).unwrap();
        assert_eq!((eq.target, eq.m), (0.25, 4));
        let eq = equilibrate(2f64.powi(-7), 1.5, &d, 1.0, 2f64.powi(-20)).unwrap();
        assert_eq!(eq.target, 2f64.powi(-20));
        assert_eq!(eq.m, 1 << 20);

        let eq = equilibrate(2f64.powi(-4), 1.0, &d, 1.0, 2f64.powi(-20)).unwrap();
        let target = 2f64.powi(-8);
        let scan = (0..=256).find(|&n| d.truncation_tail(n).unwrap() <= target).unwrap();
        assert_eq!(eq.n_modes, scan);
        assert!(eq.n_modes > 0 && d.truncation_tail(eq.n_modes - 1).unwrap() > target);

        assert!(equilibrate(0.25, 0.0, &d, 1.0, 0.0).is_err());
        let few = nystrom_eigendecomposition(&MaternSpec::new(0.5, 0.25).unwrap(), 64, 4).unwrap();
        assert!(matches!(
            equilibrate(2f64.powi(-8), 1.5, &few, 1.0, 2f64.powi(-40)),
            Err(Error::NotEnoughModes { .. })
        ));
    }

    #[test]
    fn rate_fit_examples() {
        let h: Vec<f64> = (3..8).map(|e| 2f64.powi(-e)).collect();
        let exact: Vec<f64> = h.iter().map(|h| h.powf(1.5)).collect();
        let (s, se) = fit_rate(&h, &exact).unwrap();
        assert!((s - 1.5).abs() < 1e-12 && se < 1e-12);

        for c in [1e-3, 1.0, 42.0] {
            let r: Vec<f64> = h.iter().map(|h| c * h).collect();
            assert!((fit_rate(&h, &r).unwrap().0 - 1.0).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r: Vec<f64> = h
                .iter()
                .map(|h| h.powf(1.2) * (1.0 + rng.random_range(-0.05..=0.05)))
                .collect();
            let s = fit_rate(&h, &r).unwrap().0;
            assert!((1.0..=1.4).contains(&s), "{s}");
        }

        assert!(fit_rate(&h[..2], &exact[..2]).is_err());
        let mut bad = exact.clone();
        bad[1] = 0.0;
        assert!(fit_rate(&h, &bad).is_err());
    }

    #[test]
    fn interval_from_squared_errors() {
        let (r, lo, hi) = rmse_from_squared(&[0.04; 10]);
        assert!((r - 0.2).abs() < 1e-15);
        assert_eq!((lo, hi), (r, r));
        assert_eq!(rmse_from_squared(&[0.0, 0.0]), (0.0, 0.0, 0.0));

        // independent oracle: delta method by hand for a two-point sample
        let (r, lo, hi) = rmse_from_squared(&[1.0, 3.0]);
        let se = (2.0f64 / 2.0).sqrt();
        let half = 1.96 * se / (2.0 * r);
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
        assert!((hi - r - half).abs() < 1e-14);
        assert!((r - lo - half).abs() < 1e-14);
    }

    #[test]
    fn interval_coverage_on_synthetic_cell() {
        // halves of a sample agree within the combined interval width in most trials
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 400;
        let mut agree = 0;
        for _ in 0..trials {
            let draws: Vec<f64> = (0..200).map(|_| rng.random::<f64>().powi(2) * 0.3).collect();
            let (a, alo, ahi) = rmse_from_squared(&draws[..100]);
            let (b, blo, bhi) = rmse_from_squared(&draws[100..]);
            if (a - b).abs() < (ahi - alo) / 2.0 + (bhi - blo) / 2.0 {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.9 * trials as f64, "{agree}");
    }

    #[test]
    fn nested_distance_matches_quadrature() {
        let fine = project_l2(|x: f64| (5.0 * x).sin(), &Mesh1D::dyadic(5).unwrap()).unwrap();
        let coarse = project_l2(|x: f64| (5.0 * x).sin(), &Mesh1D::dyadic(3).unwrap()).unwrap();
        let exact = nested_broken_distance(&fine, &coarse).unwrap();
        let rule = crate::quadrature::GaussLegendre::new(4);
        let mut total = 0.0;
        for k in 0..32 {
            let (a, b) = fine.mesh().element_bounds(k);
            for (x, w) in rule.mapped(a, b) {
                let d = fine.eval_in_element(k, x) - coarse.eval_in_element(k / 4, x);
                total += w * d * d;
            }
        }
        assert!((exact - total.sqrt()).abs() < 1e-14);
        assert_eq!(nested_broken_distance(&fine, &fine).unwrap(), 0.0);
        assert!(nested_broken_distance(&coarse, &fine).is_err());
    }

    fn small_study() -> StudyConfig {
        StudyConfig {
            nu_list: vec![1.0],
            h_exps: vec![2, 3, 4],
            ref_exp: 5,
            samples: 6,
            n_quad: 128,
            dt_floor_exp: 12,
            ..StudyConfig::default()
        }
    }

    #[test]
    fn identical_levels_give_zero_error() {
        let config = small_study();
        let decomp = nystrom_eigendecomposition(&MaternSpec::new(1.0, 0.25).unwrap(), 128, 128).unwrap();
        let eq = equilibrate(2f64.powi(-4), 1.0, &decomp, 1.0, 2f64.powi(-12)).unwrap();
        let model = homogenize(config.model);
        let a = Level::new(&model, &decomp, 4, eq, 1.0).unwrap();
        let b = Level::new(&model, &decomp, 4, eq, 1.0).unwrap();
        let nig = config.nig().unwrap();
        let mut s = LevySampler::new(nig, eq.n_modes, 3, 0).unwrap();
        let errs = coupled_sample(&model, &a, std::slice::from_ref(&b), eq.m, &mut s).unwrap();
        assert_eq!(errs, vec![Some(0.0)]);
    }

    #[test]
    fn coarse_noise_sums_fine_noise() {
        // a coarse level on the reference mesh stepping once per two fine
        // steps equals a direct solve fed with pairwise summed increments
        let decomp = nystrom_eigendecomposition(&MaternSpec::new(1.0, 0.25).unwrap(), 64, 64).unwrap();
        let model = homogenize(ForwardModel::default());
        let fine_eq = Equilibration {
            target: 1.0 / 16.0,
            m: 16,
            n_modes: 6,
        };
        let coarse_eq = Equilibration {
            target: 1.0 / 8.0,
            m: 8,
            n_modes: 4,
        };
        let reference = Level::new(&model, &decomp, 3, fine_eq, 1.0).unwrap();
        let coarse = Level::new(&model, &decomp, 3, coarse_eq, 1.0).unwrap();
        let nig = NigParams::default();
        let mut s = LevySampler::new(nig.clone(), 6, 8, 1).unwrap();
        let errs = coupled_sample(&model, &reference, std::slice::from_ref(&coarse), 16, &mut s).unwrap();

        let mut s = LevySampler::new(nig, 6, 8, 1).unwrap();
        let basis = NoiseBasis::new(&decomp, &coarse.mesh, 6).unwrap();
        let mut state_f = reference.initial.clone();
        let mut state_c = coarse.initial.clone();
        let mut sf = Stepper::new(&model, &reference.matrices, &reference.lu);
        let mut sc = Stepper::new(&model, &coarse.matrices, &coarse.lu);
        let mut nodes = vec![0.0; 9];
        let mut dofs = vec![0.0; 16];
        let mut acc = [0.0; 4];
        for i in 0..16 {
            let inc = s.sample_nig_increment(1.0 / 16.0).unwrap();
            basis.nodal_field(&inc, &mut nodes);
            NoiseBasis::scatter_to_dofs(&nodes, &mut dofs);
            sf.step(&mut state_f, Some(&dofs), i + 1).unwrap();
            for k in 0..4 {
                acc[k] += inc[k];
            }
            if i % 2 == 1 {
                basis.nodal_field(&acc, &mut nodes);
                NoiseBasis::scatter_to_dofs(&nodes, &mut dofs);
                sc.step(&mut state_c, Some(&dofs), i / 2 + 1).unwrap();
                acc = [0.0; 4];
            }
        }
        let f = DgFunction::from_coefficients(coarse.mesh, state_f).unwrap();
        let c = DgFunction::from_coefficients(coarse.mesh, state_c).unwrap();
        let want = nested_broken_distance(&f, &c).unwrap().powi(2);
        let got = errs[0].unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "{got} vs {want}");
    }

    #[test]
    fn deterministic_study_is_monotone_with_zero_width() {
        let mut config = small_study();
        config.model.sigma = 0.0;
        config.samples = 3;
        let report = run_convergence_study(&config).unwrap();
        assert_eq!(report.cells.len(), 3);
        for c in &report.cells {
            assert!((c.ci_lo - c.rmse).abs() <= 1e-14 * c.rmse);
            assert!((c.ci_hi - c.rmse).abs() <= 1e-14 * c.rmse);
            assert_eq!(c.aborted, 0);
        }
        assert!(report.cells.windows(2).all(|w| w[1].rmse < w[0].rmse));
    }

    #[test]
    fn smoke_study_emits_both_files() {
        let config = small_study();
        let report = run_convergence_study(&config).unwrap();
        assert_eq!(report.rates.len(), 1);
        assert!(report.failures.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = report.write(&config, dir.path()).unwrap();
        let rmse = fs::read_to_string(a).unwrap();
        let rates = fs::read_to_string(b).unwrap();
        assert!(rmse.starts_with("# levy-transport"));
        assert!(rmse.contains(&format!("config_hash={}", config.hash())));
        assert!(rmse.lines().any(|l| l == "nu,h,m,N,samples,aborted,rmse,ci_lo,ci_hi"));
        assert_eq!(rmse.lines().filter(|l| !l.starts_with('#')).count(), 4);
        assert!(rates.lines().any(|l| l == "nu,slope,stderr,n_points"));
        let again = run_convergence_study(&config).unwrap();
        assert_eq!(again.rmse_csv(&config), rmse);
    }

    #[test]
    fn invalid_studies_are_rejected() {
        let mut c = small_study();
        c.ref_exp = 4;
        assert!(c.validate().is_err());
        let mut c = small_study();
        c.samples = 1;
        assert!(c.validate().is_err());
        let mut c = small_study();
        c.h_exps = vec![3, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn gamma_modes() {
        assert_eq!(GammaMode::Paper.gamma(0.5), 0.5);
        assert_eq!(GammaMode::Paper.gamma(3.0), 1.5);
        assert_eq!(GammaMode::Custom(0.8).gamma(3.0), 0.8);
        assert_eq!(lcm(4, 6), 12);
    }
}
