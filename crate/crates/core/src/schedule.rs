//! Diffusion-process numerics.
//!
//! Noise schedule construction, the forward corruption `z_t = α_t z + σ_t ε`,
//! the v parameterization (`v = α_t ε − σ_t z`) and its algebraic inverse,
//! deterministic DDIM stepping, and classifier-free-guidance combination.
//!
//! Schedule arrays are kept in `f64`; the elementwise operations are generic
//! over the model element type.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Schedule family identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Variance-preserving cosine schedule:
    /// `ᾱ(t) = cos²(π/2 · (t/T + s)/(1 + s)) / cos²(π/2 · s/(1 + s))`
    /// with offset `s = 0.008`, `α_t = √ᾱ(t)`, `σ_t = √(1 − ᾱ(t))`.
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;

/// Signal/noise coefficient arrays over `t ∈ [0, T]`.
///
/// Invariants: `α_0 = 1`, `σ_0 = 0`, `α_t² + σ_t² = 1`, log-SNR strictly
/// decreasing for `t ≥ 1`, and `α_T < 1e-3`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `log(α_t² / σ_t²)`; `+∞` at `t = 0` where `σ_0 = 0`.
    pub fn log_snr(&self, t: usize) -> f64 {
        (self.alpha[t] * self.alpha[t]).ln() - (self.sigma[t] * self.sigma[t]).ln()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Range(format!(
                "step index {t} exceeds schedule maximum {}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Maximum step used for condition noise augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugNoiseRange {
    pub t_prime_max: usize,
}

impl Default for AugNoiseRange {
    fn default() -> Self {
        Self { t_prime_max: 300 }
    }
}

impl AugNoiseRange {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.t_prime_max < 1 || self.t_prime_max >= sched.t_max() {
            return Err(Error::Config(format!(
                "noise augmentation maximum must satisfy 1 <= T' < T, got T' = {}, T = {}",
                self.t_prime_max,
                sched.t_max()
            )));
        }
        Ok(())
    }
}

/// Build a schedule of `t_max` steps (arrays have `t_max + 1` entries).
pub fn build_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Config(format!(
            "schedule needs at least one step, got T = {t_max}"
        )));
    }
    match kind {
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            let f0 = f(0.0);
            let mut alpha = Vec::with_capacity(t_max + 1);
            let mut sigma = Vec::with_capacity(t_max + 1);
            for t in 0..=t_max {
                let abar = (f(t as f64) / f0).clamp(0.0, 1.0);
                alpha.push(abar.sqrt());
                sigma.push((1.0 - abar).sqrt());
            }
            Ok(NoiseSchedule {
                t_max,
                alpha,
                sigma,
                kind,
            })
        }
    }
}

fn check_same_shape<T: Scalar>(what: &str, a: &ArrayD<T>, b: &ArrayD<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `z_t = α_t z + σ_t ε`.
pub fn forward_diffuse<T: Scalar>(
    z: &ArrayD<T>,
    t: usize,
    eps: &ArrayD<T>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<T>> {
    sched.check_step(t)?;
    check_same_shape("forward_diffuse z vs eps", z, eps)?;
    let a = T::from_f64(sched.alpha(t));
    let s = T::from_f64(sched.sigma(t));
    Ok(z * a + eps * s)
}

/// `v = α_t ε − σ_t z`.
pub fn v_target<T: Scalar>(
    z: &ArrayD<T>,
    eps: &ArrayD<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<T>> {
    sched.check_step(t)?;
    check_same_shape("v_target z vs eps", z, eps)?;
    let a = T::from_f64(sched.alpha(t));
    let s = T::from_f64(sched.sigma(t));
    Ok(eps * a - z * s)
}

/// Invert the corruption at step `t`:
/// `z0 = α_t z_t − σ_t v`, `ε = σ_t z_t + α_t v`.
pub fn recover_from_v<T: Scalar>(
    z_t: &ArrayD<T>,
    v: &ArrayD<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    sched.check_step(t)?;
    check_same_shape("recover_from_v z_t vs v", z_t, v)?;
    let a = T::from_f64(sched.alpha(t));
    let s = T::from_f64(sched.sigma(t));
    let z0 = z_t * a - v * s;
    let eps = z_t * s + v * a;
    Ok((z0, eps))
}

/// Deterministic (η = 0) DDIM step from `t` to `t_prev`:
/// `z_{t_prev} = α_{t_prev} ẑ0 + σ_{t_prev} ε̂`.
pub fn ddim_step<T: Scalar>(
    z_t: &ArrayD<T>,
    v_pred: &ArrayD<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<ArrayD<T>> {
    if t_prev > t {
        return Err(Error::Range(format!(
            "ddim_step target {t_prev} is after source {t}"
        )));
    }
    if t_prev == t {
        check_same_shape("ddim_step z_t vs v_pred", z_t, v_pred)?;
        return Ok(z_t.clone());
    }
    let (z0, eps) = recover_from_v(z_t, v_pred, t, sched)?;
    let a = T::from_f64(sched.alpha(t_prev));
    let s = T::from_f64(sched.sigma(t_prev));
    Ok(z0 * a + eps * s)
}

/// `v = v_uncond + w (v_cond − v_uncond)`; `w = 1` and `w = 0` return the
/// corresponding input unchanged.
pub fn cfg_combine<T: Scalar>(
    v_cond: &ArrayD<T>,
    v_uncond: &ArrayD<T>,
    w: f64,
) -> Result<ArrayD<T>> {
    check_same_shape("cfg_combine", v_cond, v_uncond)?;
    if w < 0.0 {
        return Err(Error::Range(format!("guidance weight must be >= 0, got {w}")));
    }
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    let wt = T::from_f64(w);
    Ok(v_uncond + &((v_cond - v_uncond) * wt))
}

/// Descending step sequence `T = t_0 > t_1 > … > t_S = 0` with `S = steps`,
/// spaced uniformly by rounding.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_max);
    let mut ts: Vec<usize> = (0..=steps)
        .rev()
        .map(|k| ((k as f64 / steps as f64) * t_max as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}
