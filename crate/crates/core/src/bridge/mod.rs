//! The Bayesian Bridge prior `p(beta_j | tau) ∝ exp(-|beta_j / tau|^alpha)`
//! written as a normal scale mixture
//!
//! ```text
//! beta | Lambda, tau ~ N(0, tau^2 Lambda^2),   Lambda = diag(lambda_j)
//! s_j = lambda_j^-2 / 2 has density ∝ s^-1/2 pi_st(s)
//! ```
//!
//! where `pi_st` is the positive stable law of index `alpha / 2` with
//! Laplace transform `exp(-u^(alpha/2))`. The global scale is updated in
//! collapsed form through `nu = tau^-alpha`.

mod tilted_stable;

pub use tilted_stable::TiltedStable;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Candidate exponents used when tuning.
pub const ALPHA_GRID: [f64; 3] = [0.125, 0.25, 0.5];

pub const DEFAULT_NU_SHAPE: f64 = 1.0;
pub const DEFAULT_NU_RATE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TauMode {
    /// Draw `nu | beta` every iteration.
    Sample,
    /// Hold `tau` at the value implied by a heritability guess.
    FixedFromHeritability { h2: f64, m_snps: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeHyper {
    pub alpha: f64,
    /// Gamma prior shape on `nu`.
    pub k: f64,
    /// Gamma prior rate on `nu`.
    pub theta: f64,
    pub tau_mode: TauMode,
}

impl BridgeHyper {
    pub fn new(alpha: f64, k: f64, theta: f64, tau_mode: TauMode) -> Result<Self> {
        let hyper = Self {
            alpha,
            k,
            theta,
            tau_mode,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn with_alpha(alpha: f64) -> Result<Self> {
        Self::new(alpha, DEFAULT_NU_SHAPE, DEFAULT_NU_RATE, TauMode::Sample)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha", format!("{} is outside (0, 1]", self.alpha)));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(Error::invalid("k", format!("{} must be positive", self.k)));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::invalid("theta", format!("{} must be positive", self.theta)));
        }
        if let TauMode::FixedFromHeritability { h2, m_snps } = self.tau_mode {
            check_heritability(h2, m_snps)?;
        }
        Ok(())
    }
}

/// Clamp range for the prior scale `tau * lambda_j` of each effect. The
/// local scale itself floats with `tau`, which can be tiny for small alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub floor: f64,
    pub cap: f64,
}

impl Default for LambdaBounds {
    fn default() -> Self {
        Self { floor: 1e-6, cap: 1e6 }
    }
}

impl LambdaBounds {
    pub fn clamp(&self, scale: f64) -> f64 {
        scale.clamp(self.floor, self.cap)
    }

    /// Local scale whose prior scale `tau * lambda` lies in the range.
    pub fn clamp_local(&self, lambda: f64, tau: f64) -> f64 {
        self.clamp(tau * lambda) / tau
    }
}

/// Global and local scales of the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageState {
    pub nu: f64,
    pub tau: f64,
    pub lambda: Vec<f64>,
}

impl ShrinkageState {
    pub fn from_nu(nu: f64, alpha: f64, lambda: Vec<f64>) -> Self {
        Self {
            nu,
            tau: tau_from_nu(nu, alpha),
            lambda,
        }
    }

    pub fn from_tau(tau: f64, alpha: f64, lambda: Vec<f64>) -> Self {
        Self {
            nu: nu_from_tau(tau, alpha),
            tau,
            lambda,
        }
    }
}

pub fn tau_from_nu(nu: f64, alpha: f64) -> f64 {
    nu.powf(-1.0 / alpha)
}

pub fn nu_from_tau(tau: f64, alpha: f64) -> f64 {
    tau.powf(-alpha)
}

fn check_heritability(h2: f64, m_snps: u64) -> Result<()> {
    if !(h2 > 0.0 && h2 < 1.0) {
        return Err(Error::invalid("h2", format!("{h2} is outside (0, 1)")));
    }
    if m_snps == 0 {
        return Err(Error::invalid("m_snps", "must be at least 1"));
    }
    Ok(())
}

/// `Gamma(3/alpha) / Gamma(1/alpha)`, the prior variance of `beta_j / tau`.
pub fn variance_factor(alpha: f64) -> f64 {
    (ln_gamma(3.0 / alpha) - ln_gamma(1.0 / alpha)).exp()
}

/// Global scale whose prior per-SNP variance equals `h2 / m_snps`.
///
/// `alpha` may exceed 1 here (2 is the Gaussian case).
pub fn tau_from_heritability(h2: f64, m_snps: u64, alpha: f64) -> Result<f64> {
    check_heritability(h2, m_snps)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("{alpha} must be positive")));
    }
    Ok((h2 / m_snps as f64 / variance_factor(alpha)).sqrt())
}

/// Collapsed draw `nu | beta ~ Gamma(k + p/alpha, theta + sum |beta_j|^alpha)`.
pub fn sample_nu<R: Rng + ?Sized>(beta: &[f64], hyper: &BridgeHyper, rng: &mut R) -> Result<(f64, f64)> {
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("beta passed to sample_nu"));
    }
    let abs_pow_sum = beta.iter().map(|b| b.abs().powf(hyper.alpha)).sum();
    sample_nu_from_sum(beta.len(), abs_pow_sum, hyper, rng)
}

/// [`sample_nu`] from the already reduced `sum |beta_j|^alpha` over `p`
/// coefficients.
pub fn sample_nu_from_sum<R: Rng + ?Sized>(
    p: usize,
    abs_pow_sum: f64,
    hyper: &BridgeHyper,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let shape = hyper.k + p as f64 / hyper.alpha;
    let rate = hyper.theta + abs_pow_sum;
    if !rate.is_finite() {
        return Err(Error::NonFinite("global scale rate"));
    }
    let gamma = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::invalid("nu posterior", e.to_string()))?;
    let nu = gamma.sample(rng);
    Ok((nu, tau_from_nu(nu, hyper.alpha)))
}

/// Draws `lambda_j | beta_j, tau`.
///
/// `s_j = lambda_j^-2 / 2` given `beta_j, tau` is positive stable of index
/// `alpha / 2` tilted by `exp(-(beta_j / tau)^2 s)`.
pub fn sample_local_shrinkage<R: Rng + ?Sized>(
    beta_j: f64,
    tau: f64,
    alpha: f64,
    bounds: Option<&LambdaBounds>,
    rng: &mut R,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("{tau} must be positive")));
    }
    let ratio = beta_j / tau;
    let tilt = ratio * ratio;
    let s = TiltedStable::new(alpha / 2.0, tilt)?.sample(rng);
    let lambda = (2.0 * s).sqrt().recip();
    Ok(match bounds {
        Some(b) => b.clamp_local(lambda, tau),
        None => lambda,
    })
}

/// One draw of `lambda` from its prior, by composition: `beta ~ Bridge(1)`
/// then `lambda | beta`.
pub fn sample_prior_local_scale<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = sample_bridge(1.0, alpha, rng)?;
    sample_local_shrinkage(beta, 1.0, alpha, None, rng)
}

/// Direct draw from the normalized Bridge density: `|beta/tau| = G^(1/alpha)`
/// with `G ~ Gamma(1/alpha, 1)` and a random sign.
pub fn sample_bridge<R: Rng + ?Sized>(tau: f64, alpha: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(1.0 / alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    let magnitude = tau * g.sample(rng).powf(1.0 / alpha);
    Ok(if rng.random::<bool>() { magnitude } else { -magnitude })
}

/// `sum_j [-ln(2 tau) - ln Gamma(1 + 1/alpha) - |beta_j / tau|^alpha]`.
pub fn bridge_log_density(beta: &[f64], tau: f64, alpha: f64) -> f64 {
    let norm = -(2.0 * tau).ln() - ln_gamma(1.0 + 1.0 / alpha);
    beta.iter().map(|b| norm - (b / tau).abs().powf(alpha)).sum()
}
