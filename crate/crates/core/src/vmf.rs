//! Circular von Mises sampling and modified Bessel functions, used to check
//! that the coherence ratio of directions with concentration `kappa`
//! converges to `I1(kappa) / I0(kappa)`.

use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::error::{Error, Result};
use crate::stats::GradStats;

/// Largest argument accepted by the power series.
pub const BESSEL_MAX_ARG: f64 = 50.0;

/// Modified Bessel function of the first kind, `I_n(x)`, by its power series
/// `sum_k (x/2)^(2k+n) / (k! (k+n)!)`.
pub fn bessel_i(order: u32, x: f64) -> Result<f64> {
    if !(0.0..=BESSEL_MAX_ARG).contains(&x) {
        return Err(Error::OutOfRange(format!("bessel_i argument {x} outside [0, {BESSEL_MAX_ARG}]")));
    }
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=order {
        term *= half / f64::from(k);
    }
    let q = half * half;
    let mut sum = term;
    for k in 1..1000u32 {
        term *= q / (f64::from(k) * f64::from(k + order));
        sum += term;
        if term <= 1e-16 * sum {
            break;
        }
    }
    Ok(sum)
}

/// Mean resultant length of the circular von Mises distribution.
pub fn bessel_ratio(kappa: f64) -> Result<f64> {
    if kappa == 0.0 {
        return Ok(0.0);
    }
    Ok(bessel_i(1, kappa)? / bessel_i(0, kappa)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VmfParams {
    /// Mean direction, radians.
    pub mean: f64,
    /// Concentration; zero is the uniform distribution.
    pub kappa: f64,
}

/// Density `exp(kappa cos(theta - mean)) / (2 pi I0(kappa))`.
pub fn vmf_density(params: &VmfParams, theta: f64) -> Result<f64> {
    Ok((params.kappa * (theta - params.mean).cos()).exp() / (TAU * bessel_i(0, params.kappa)?))
}

/// Wraps an angle to `[0, 2 pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Draws one angle with the Best-Fisher wrapped-Cauchy rejection scheme.
pub fn sample_one<R: Rng + ?Sized>(params: &VmfParams, rng: &mut R) -> f64 {
    let kappa = params.kappa;
    if kappa < 1e-8 {
        return wrap_angle(params.mean + rng.random::<f64>() * TAU);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let u3: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let accept = c * (2.0 - c) - u2 > 0.0 || ((c / u2).ln() + 1.0 - c >= 0.0);
        if accept {
            let magnitude = f.clamp(-1.0, 1.0).acos();
            let theta = if u3 > 0.5 { params.mean + magnitude } else { params.mean - magnitude };
            return wrap_angle(theta);
        }
    }
}

pub fn sample_vmf<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| sample_one(params, rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyCheck {
    pub kappa: f64,
    /// Coherence ratio of the sampled unit vectors.
    pub empirical: f64,
    /// `I1(kappa) / I0(kappa)`.
    pub analytic: f64,
    /// `1 - 1 / (2 kappa)`.
    pub asymptotic: f64,
}

impl ConsistencyCheck {
    pub fn abs_error(&self) -> f64 {
        (self.empirical - self.analytic).abs()
    }
}

/// Feeds `n_samples` unit vectors at von Mises angles through the coherence
/// ratio accumulator and compares against the closed forms.
pub fn check_consistency_relation<R: Rng + ?Sized>(kappa: f64, n_samples: usize, rng: &mut R) -> Result<ConsistencyCheck> {
    if !(kappa > 0.0) {
        return Err(Error::OutOfRange(format!("kappa must be > 0, got {kappa}")));
    }
    let params = VmfParams { mean: rng.random::<f64>() * TAU, kappa };
    let mut stats = GradStats::new(1);
    for theta in sample_vmf(&params, n_samples, rng) {
        let (s, c) = theta.sin_cos();
        stats.accumulate(0, [c, s])?;
    }
    stats.end_step();
    Ok(ConsistencyCheck {
        kappa,
        empirical: stats.gcr(0),
        analytic: bessel_ratio(kappa)?,
        asymptotic: 1.0 - 1.0 / (2.0 * kappa),
    })
}
