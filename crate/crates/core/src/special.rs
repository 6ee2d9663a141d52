//! Modified Bessel function of the second kind.
//!
//! Small arguments use Temme's series, large arguments Steed's continued
//! fraction; both are evaluated at an order `mu` in [-1/2, 1/2] and carried to
//! the requested order by the stable upward recurrence. Half-integer orders
//! have finite closed forms and skip all of that.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;
const SERIES_LIMIT: f64 = 2.0;

/// Taylor coefficients of `1/Gamma(z) = sum_k C[k] z^(k+1)`.
const RECIP_GAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// `K_nu(x)` for real order and `x > 0`.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    let nu = nu.abs();
    check_args(nu, x)?;
    let twice = 2.0 * nu;
    if twice == twice.round() && twice as i64 % 2 == 1 && nu < 64.0 {
        return Ok(bessel_k_half_integer((nu - 0.5) as usize, x));
    }
    Ok(bessel_k_pair(nu, x)?.0)
}

/// `K_nu(x)` without the half-integer shortcut; used to cross-check it.
pub fn bessel_k_generic(nu: f64, x: f64) -> Result<f64> {
    let nu = nu.abs();
    check_args(nu, x)?;
    Ok(bessel_k_pair(nu, x)?.0)
}

/// `K_{p+1/2}(x) = sqrt(pi/2x) e^-x sum_{k<=p} (p+k)!/(k!(p-k)!) (2x)^-k`.
pub fn bessel_k_half_integer(p: usize, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=p {
        // ratio of consecutive coefficients (p+k)(p-k+1)/k, times 1/(2x)
        term *= ((p + k) * (p - k + 1)) as f64 / (k as f64 * 2.0 * x);
        sum += term;
    }
    (PI / (2.0 * x)).sqrt() * (-x).exp() * sum
}

fn check_args(nu: f64, x: f64) -> Result<()> {
    if !nu.is_finite() {
        return Err(Error::InvalidArgument(format!("Bessel order {nu} is not finite")));
    }
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Bessel K needs a positive finite argument, got {x}"
        )));
    }
    Ok(())
}

/// Returns `(K_nu(x), K_{nu+1}(x))` for `nu >= 0`.
fn bessel_k_pair(nu: f64, x: f64) -> Result<(f64, f64)> {
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    let (mut k_mu, mut k_mu1) = if x < SERIES_LIMIT {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        let mut converged = false;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::InvalidArgument(format!(
                "Bessel series did not converge at x = {x}"
            )));
        }
        (sum, sum1 * xi2)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        let mut converged = false;
        for i in 2..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::InvalidArgument(format!(
                "Bessel continued fraction did not converge at x = {x}"
            )));
        }
        h *= a1;
        let k = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        (k, k * (mu + x + 0.5 - h) * xi)
    };

    for i in 1..=nl {
        let next = (mu + i as f64) * xi2 * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    Ok((k_mu, k_mu1))
}

/// Temme's auxiliary gamma terms for `|mu| <= 1/2`:
/// `gam1 = (1/G(1-mu) - 1/G(1+mu)) / (2 mu)`, `gam2 = (1/G(1-mu) + 1/G(1+mu)) / 2`,
/// `gampl = 1/G(1+mu)`, `gammi = 1/G(1-mu)`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    let mut even = 0.0;
    let mut odd = 0.0;
    // 1/G(1+mu) = sum_k C[k] mu^k, split into even and odd powers of mu
    for (k, &c) in RECIP_GAMMA.iter().enumerate().rev() {
        if k % 2 == 0 {
            even = even * mu2 + c;
        } else {
            odd = odd * mu2 + c;
        }
    }
    let gam2 = even;
    let gam1 = -odd;
    (gam1, gam2, gam2 - mu * gam1, gam2 + mu * gam1)
}
