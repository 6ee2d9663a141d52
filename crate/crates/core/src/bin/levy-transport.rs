use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use levy_transport::harness::{decomposition, least_squares_slope};
use levy_transport::solver::{deterministic_convergence, smooth_bump, SolverConfig};
use levy_transport::{
    run_convergence_study, solve_path, ForwardModel, GammaMode, KlDecomposition, LevySampler, MaternSpec, Mesh1D,
    NigParams, NoiseBasis, StudyConfig,
};

#[derive(Parser)]
#[command(name = "levy-transport", version, about = "Stochastic transport with NIG Levy noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaChoice {
    Paper,
    Custom,
}

#[derive(Subcommand)]
enum Command {
    /// Compute (and optionally cache) the Matérn KL decomposition.
    Eigs {
        #[arg(long)]
        nu: f64,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        #[arg(long, default_value_t = 512)]
        n_quad: usize,
        #[arg(long, default_value_t = 64)]
        n_modes: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Emit NIG increments as CSV.
    SampleNoise {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        #[arg(long)]
        dt: f64,
        #[arg(long, default_value_t = 8)]
        n_modes: usize,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        normalize_variance: Switch,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve single paths of the forward model and write their final states.
    Solve {
        #[arg(long)]
        nu: f64,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        #[arg(long)]
        h_exp: u32,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
        /// KL modes; by default the smallest count whose tail is below dt.
        #[arg(long)]
        n_modes: Option<usize>,
        #[arg(long, default_value_t = 512)]
        n_quad: usize,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        normalize_variance: Switch,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo convergence study; writes rmse.csv and rates.csv.
    Converge {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        nu_list: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "3,4,5,6")]
        h_exps: Vec<u32>,
        #[arg(long, default_value_t = 8)]
        ref_exp: u32,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = GammaChoice::Paper)]
        gamma_mode: GammaChoice,
        /// Exponent used with `--gamma-mode custom`.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        normalize_variance: Switch,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        t_final: f64,
        #[arg(long, default_value_t = 512)]
        n_quad: usize,
        #[arg(long, default_value_t = 20)]
        dt_floor_exp: u32,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Deterministic transport of a smooth bump against the exact shift.
    DetCheck {
        #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,7")]
        h_exps: Vec<u32>,
        #[arg(long, default_value_t = 0.2)]
        t_final: f64,
        /// Time steps are `dt = dt_scale * h^2`.
        #[arg(long, default_value_t = 1.0)]
        dt_scale: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Eigs {
            nu,
            rho,
            n_quad,
            n_modes,
            cache_dir,
        } => {
            let spec = MaternSpec::new(nu, rho)?;
            let d = match &cache_dir {
                Some(dir) => KlDecomposition::load_or_compute(dir, &spec, n_quad, n_modes)?,
                None => KlDecomposition::nystrom(levy_transport::covariance::Kernel::Matern(spec), n_quad, n_modes)?,
            };
            let mut out = output(None)?;
            writeln!(out, "# nu={nu} rho={rho} n_quad={n_quad} trace={}", d.trace())?;
            writeln!(out, "k,eta,tail")?;
            for (k, eta) in d.eigenvalues().iter().enumerate() {
                writeln!(out, "{},{eta},{}", k + 1, d.truncation_tail(k + 1)?)?;
            }
        }
        Command::SampleNoise {
            seed,
            stream,
            dt,
            n_modes,
            steps,
            normalize_variance,
            out,
        } => {
            let params = NigParams::symmetric(10.0, 1.0, normalize_variance.on())?;
            let mut sampler = LevySampler::new(params, n_modes, seed, stream)?;
            sampler.write_path_csv(dt, steps, output(out.as_deref())?)?;
        }
        Command::Solve {
            nu,
            rho,
            h_exp,
            m,
            samples,
            seed,
            t_final,
            n_modes,
            n_quad,
            normalize_variance,
            out,
        } => {
            let mesh = Mesh1D::dyadic(h_exp)?;
            let config = SolverConfig::new(mesh, m, t_final)?;
            let spec = MaternSpec::new(nu, rho)?;
            let decomp = decomposition(&spec, n_quad, None)?;
            let n = match n_modes {
                Some(n) => n,
                None => decomp.modes_for_tail(config.dt())?,
            };
            let basis = NoiseBasis::new(&decomp, &mesh, n)?;
            let model = ForwardModel::default();
            let params = NigParams::symmetric(model.alpha_hat, 1.0, normalize_variance.on())?;
            for s in 0..samples {
                let mut sampler = LevySampler::new(params.clone(), n, seed, s as u64)?;
                let path = solve_path(&config, &model, Some((&mut sampler, &basis)))?;
                let target = if samples == 1 {
                    out.clone()
                } else {
                    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("path");
                    out.with_file_name(format!("{stem}_{s}.csv"))
                };
                let header = vec![
                    format!("levy-transport {}", env!("CARGO_PKG_VERSION")),
                    format!("nu={nu} rho={rho} h=2^-{h_exp} m={m} modes={n} t_final={t_final}"),
                ];
                path.write_csv(BufWriter::new(File::create(&target)?), &header)?;
                log::info!("wrote {}", target.display());
            }
        }
        Command::Converge {
            nu_list,
            h_exps,
            ref_exp,
            samples,
            seed,
            gamma_mode,
            gamma,
            normalize_variance,
            rho,
            t_final,
            n_quad,
            dt_floor_exp,
            cache_dir,
            out_dir,
        } => {
            let gamma_mode = match (gamma_mode, gamma) {
                (GammaChoice::Paper, None) => GammaMode::Paper,
                (GammaChoice::Custom, Some(g)) => GammaMode::Custom(g),
                (GammaChoice::Paper, Some(_)) => return Err("--gamma requires --gamma-mode custom".into()),
                (GammaChoice::Custom, None) => return Err("--gamma-mode custom requires --gamma".into()),
            };
            let config = StudyConfig {
                nu_list,
                rho,
                h_exps,
                ref_exp,
                samples,
                t_final,
                normalize_variance: normalize_variance.on(),
                seed,
                dt_floor_exp,
                gamma_mode,
                n_quad,
                cache_dir,
                ..StudyConfig::default()
            };
            let report = run_convergence_study(&config)?;
            let (rmse, rates) = report.write(&config, &out_dir)?;
            for r in &report.rates {
                println!(
                    "nu={} slope={:.3} stderr={:.3} (gamma {})",
                    r.nu, r.slope, r.stderr, r.gamma
                );
            }
            for f in &report.failures {
                eprintln!("warning: {f}");
            }
            println!("wrote {} and {}", rmse.display(), rates.display());
        }
        Command::DetCheck {
            h_exps,
            t_final,
            dt_scale,
        } => {
            let runs = deterministic_convergence(smooth_bump, 1.0, t_final, &h_exps, dt_scale)?;
            println!("h,m,error");
            for r in &runs {
                println!("{},{},{}", r.h, r.m, r.error);
            }
            if runs.len() >= 2 {
                let pts: Vec<(f64, f64)> = runs.iter().map(|r| (r.h.ln(), r.error.ln())).collect();
                println!("# slope={:.4}", least_squares_slope(&pts).0);
            }
        }
    }
    Ok(())
}
