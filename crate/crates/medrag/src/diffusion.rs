//! Minimal denoising diffusion on flat vectors and small pixel grids.
//!
//! Implements the forward noising chain, its closed-form marginal, the
//! reverse denoising update, and the clean-data estimate, plus two noise
//! predictors: a test-only oracle that returns the noise actually drawn,
//! and an analytic posterior-mean denoiser for Gaussian data. There is no
//! learned model here; the predictor interface is where one would plug in.
//!
//! Used by the visual attack to synthesize seed images, and by the test
//! suite to verify the forward/reverse identities.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::vecmath::PixelGrid;

/// Per-step noise levels `beta_t in (0,1)` with precomputed cumulative
/// signal retention `alpha_bar_t = prod_{i<=t} (1 - beta_i)`.
///
/// Indexing convention: `beta(t)` is defined for `t in 1..=T`,
/// `alpha_bar(t)` for `t in 0..=T` with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Precondition("schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Precondition(
                "every beta must lie strictly in (0, 1)".into(),
            ));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Linear ramp from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Precondition("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::new(betas)
    }

    /// The conventional short schedule used throughout the crate:
    /// beta from 1e-4 to 0.02 over 200 steps.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1e-4, 0.02, 200).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::Precondition(format!(
                "step t={t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `alpha_bar(t)`, the exact product of `(1 - beta_i)` for `i <= t`;
    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("step t={t} outside 0..={}", self.steps())))
    }
}

/// Predicts the noise component of `x_t`. Implementations must return a
/// vector of the same shape with finite entries.
pub trait NoisePredictor {
    fn predict(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64>;
}

/// Test-only predictor that returns the exact noise drawn by
/// [`forward_marginal`]. Turns the clean-data estimate into an exact
/// inversion, which the identity tests rely on.
#[derive(Debug, Clone)]
pub struct TrueNoiseOracle {
    pub eps: Vec<f64>,
}

impl NoisePredictor for TrueNoiseOracle {
    fn predict(&self, _x_t: &[f64], _t: usize, _schedule: &NoiseSchedule) -> Vec<f64> {
        self.eps.clone()
    }
}

/// Posterior-mean denoiser for data distributed as `N(mu, sigma^2 I)`.
///
/// For Gaussian data the conditional mean of the clean sample given `x_t`
/// is available in closed form, and the implied noise estimate is the
/// MSE-optimal predictor. This is the stand-in for a trained network.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Precondition(format!("sigma must be >= 0, got {sigma}")));
        }
        if mu.is_empty() {
            return Err(Error::Precondition("denoiser mean must be non-empty".into()));
        }
        Ok(AnalyticGaussianDenoiser { mu, sigma })
    }

    /// `E[x0 | x_t]` under the Gaussian data model. The mean vector is
    /// cycled if shorter than the state.
    pub fn posterior_mean(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
        let ab = schedule.alpha_bar(t).expect("t validated by caller");
        let s2 = self.sigma * self.sigma;
        let denom = ab * s2 + (1.0 - ab);
        x_t.iter()
            .zip(self.mu.iter().cycle())
            .map(|(x, m)| (ab.sqrt() * s2 * x + (1.0 - ab) * m) / denom)
            .collect()
    }
}

impl NoisePredictor for AnalyticGaussianDenoiser {
    fn predict(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
        let ab = schedule.alpha_bar(t).expect("t validated by caller");
        let x0_hat = self.posterior_mean(x_t, t, schedule);
        let denom = (1.0 - ab).sqrt();
        x_t.iter()
            .zip(&x0_hat)
            .map(|(x, x0)| (x - ab.sqrt() * x0) / denom)
            .collect()
    }
}

fn draw_standard_normal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sample the closed-form marginal
/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` and return both
/// `x_t` and the drawn `eps` (which feeds [`TrueNoiseOracle`]).
pub fn forward_marginal(
    x0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t)?;
    let eps = draw_standard_normal(x0.len(), rng);
    let x_t = x0
        .iter()
        .zip(&eps)
        .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
        .collect();
    Ok((x_t, eps))
}

/// One Markov step of the forward chain:
/// `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z`.
pub fn forward_step(
    x_prev: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let beta = schedule.beta(t)?;
    let z = draw_standard_normal(x_prev.len(), rng);
    Ok(x_prev
        .iter()
        .zip(&z)
        .map(|(x, n)| (1.0 - beta).sqrt() * x + beta.sqrt() * n)
        .collect())
}

/// Clean-data estimate
/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn estimate_x0(
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t)?;
    if ab == 0.0 {
        return Err(Error::Precondition(
            "alpha_bar underflowed to zero; cannot invert".into(),
        ));
    }
    let eps_hat = predictor.predict(x_t, t, schedule);
    if eps_hat.len() != x_t.len() {
        return Err(Error::DimensionMismatch {
            context: "noise prediction",
            expected: x_t.len(),
            got: eps_hat.len(),
        });
    }
    Ok(x_t
        .iter()
        .zip(&eps_hat)
        .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
        .collect())
}

/// Noise scale used by the reverse update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    /// `sqrt(1 - alpha_t)` (= `sqrt(beta_t)`), the coefficient as printed
    /// in the update this module implements.
    SqrtBeta,
    /// The posterior variance
    /// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`, the common
    /// alternative.
    Posterior,
}

/// Options for [`reverse_step`].
#[derive(Debug, Clone, Copy)]
pub struct ReverseConfig {
    pub variance: VarianceKind,
    /// Draw no noise at t = 1 so the final step is a deterministic
    /// inversion. Disable to add noise at every step.
    pub suppress_final_noise: bool,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        ReverseConfig {
            variance: VarianceKind::SqrtBeta,
            suppress_final_noise: true,
        }
    }
}

/// One reverse-denoising step:
/// `x_{t-1} = (x_t - ((1 - alpha_t)/sqrt(1 - alpha_bar_t)) eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    rng: &mut ChaCha8Rng,
    cfg: &ReverseConfig,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let eps_hat = predictor.predict(x_t, t, schedule);
    if eps_hat.len() != x_t.len() {
        return Err(Error::DimensionMismatch {
            context: "noise prediction",
            expected: x_t.len(),
            got: eps_hat.len(),
        });
    }
    let sigma = match cfg.variance {
        VarianceKind::SqrtBeta => (1.0 - alpha).sqrt(),
        VarianceKind::Posterior => {
            let ab_prev = schedule.alpha_bar(t - 1)?;
            ((1.0 - alpha) * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
        }
    };
    let coeff = (1.0 - alpha) / (1.0 - ab).sqrt();
    let suppress = t == 1 && cfg.suppress_final_noise;
    let z = if suppress {
        vec![0.0; x_t.len()]
    } else {
        draw_standard_normal(x_t.len(), rng)
    };
    Ok(x_t
        .iter()
        .zip(&eps_hat)
        .zip(&z)
        .map(|((x, e), n)| (x - coeff * e) / alpha.sqrt() + sigma * n)
        .collect())
}

/// Run the full reverse chain from `x_T ~ N(0, I)` down to `x_0`.
pub fn reverse_chain(
    len: usize,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    rng: &mut ChaCha8Rng,
    cfg: &ReverseConfig,
) -> Result<Vec<f64>> {
    let mut x = draw_standard_normal(len, rng);
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(&x, t, schedule, predictor, rng, cfg)?;
    }
    Ok(x)
}

fn prompt_hash(prompt: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in prompt.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Synthesize a seed image by running the reverse chain, with the prompt
/// hashed into the rng seed.
///
/// The prompt conditions nothing but the noise stream - there is no
/// learned text-conditional model here - but identical (prompt, seed)
/// pairs reproduce the identical image, and distinct prompts give
/// independent draws. Output pixels are clamped to `[0, 1]`.
pub fn synthesize_seed(
    prompt: &str,
    height: usize,
    width: usize,
    schedule: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    base_seed: u64,
) -> Result<PixelGrid> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ prompt_hash(prompt));
    let x = reverse_chain(height * width, schedule, predictor, &mut rng, &ReverseConfig::default())?;
    Ok(PixelGrid::new(height, width, x)?.clamp01())
}
