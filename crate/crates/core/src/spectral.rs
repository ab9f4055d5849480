//! Frequency-weighted regularization of adapter weights.
//!
//! A flattened weight matrix w is transformed with the real FFT and each
//! half-spectrum bin k is penalized by
//!
//!   rho(k, n, T) = 1 - phi(k, n, T)
//!   phi(k, n, T) = phi_low + (phi_high - phi_low) * min(1, k / (n * T))
//!
//! so with phi_low = 1 the DC bin is never penalized and the penalty ramps up
//! toward high frequencies. The loss is a real quadratic form in w, so its
//! gradient has a closed form through the inverse transform.
//!
//! Bin bookkeeping: sums run over the half-spectrum k = 0..=floor(n/2) with
//! Hermitian multiplicity (interior bins count twice), which equals the
//! full-spectrum sum with a symmetric penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{irfft, rfft, Spectrum};
use crate::lora::{AdapterGrads, LoraSet};
use crate::tensor::{matmul, Tensor};

/// Which tensors the penalty is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyTo {
    /// Transform each trainable factor (A and B) separately.
    FactorsSeparately,
    /// Transform the effective delta s*B*A and push gradients through the
    /// product rule.
    DeltaProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Regularizer hyperparameters. Defaults are the tuned values
/// lambda = 0.02, T = 0.5, phi_low = 1.0, phi_high = 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierRegConfig {
    pub lambda: f64,
    pub threshold: f64,
    pub phi_low: f64,
    pub phi_high: f64,
    pub apply_to: ApplyTo,
    pub reduction: Reduction,
}

impl Default for FourierRegConfig {
    fn default() -> Self {
        FourierRegConfig {
            lambda: 0.02,
            threshold: 0.5,
            phi_low: 1.0,
            phi_high: 0.1,
            apply_to: ApplyTo::FactorsSeparately,
            // Mean keeps the penalty scale independent of the factor length,
            // so one lambda works across adapter shapes.
            reduction: Reduction::Mean,
        }
    }
}

impl FourierRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "fourier lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fourier threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if !self.phi_low.is_finite() || !self.phi_high.is_finite() {
            return Err(Error::InvalidArgument("fourier phi values must be finite".into()));
        }
        Ok(())
    }
}

/// phi(k, n, T) = phi_low + (phi_high - phi_low) * min(1, k / (n * T))
pub fn phi(k: usize, n: usize, t: f64, phi_low: f64, phi_high: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "frequency threshold must be positive, got {t}"
        )));
    }
    let ramp = (k as f64 / (n as f64 * t)).min(1.0);
    Ok(phi_low + (phi_high - phi_low) * ramp)
}

/// rho(k, n, T) = 1 - phi(k, n, T)
pub fn rho(k: usize, n: usize, t: f64, phi_low: f64, phi_high: f64) -> Result<f64> {
    Ok(1.0 - phi(k, n, t, phi_low, phi_high)?)
}

/// Precomputed per-bin penalty weights and Hermitian multiplicities for a
/// signal of length n.
#[derive(Debug, Clone)]
pub struct PenaltyWeights {
    pub n: usize,
    pub rho: Vec<f64>,
    pub mult: Vec<f64>,
}

impl PenaltyWeights {
    pub fn new(n: usize, cfg: &FourierRegConfig) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("PenaltyWeights: empty signal".into()));
        }
        let half = n / 2;
        let mut rho_v = Vec::with_capacity(half + 1);
        let mut mult = Vec::with_capacity(half + 1);
        for k in 0..=half {
            rho_v.push(rho(k, n, cfg.threshold, cfg.phi_low, cfg.phi_high)?);
            mult.push(if k == 0 || (n % 2 == 0 && k == half) {
                1.0
            } else {
                2.0
            });
        }
        Ok(PenaltyWeights { n, rho: rho_v, mult })
    }
}

/// L(w) = sum_k mult_k * rho_k * |w_hat_k|^2, divided by n for mean reduction.
pub fn fourier_loss(w: &[f64], cfg: &FourierRegConfig) -> Result<f64> {
    let weights = PenaltyWeights::new(w.len(), cfg)?;
    let spec = rfft(w)?;
    let mut loss = 0.0;
    for (k, bin) in spec.bins.iter().enumerate() {
        loss += weights.mult[k] * weights.rho[k] * bin.norm_sqr();
    }
    if cfg.reduction == Reduction::Mean {
        loss /= w.len() as f64;
    }
    Ok(loss)
}

/// Closed-form gradient of [`fourier_loss`] with respect to w.
///
/// With S_k = rho_k * w_hat_k, grad = 2 * n * irfft(S) (the inverse transform
/// already supplies the interior-bin doubling), scaled by 1/n for mean
/// reduction.
pub fn fourier_loss_grad(w: &[f64], cfg: &FourierRegConfig) -> Result<Vec<f64>> {
    let weights = PenaltyWeights::new(w.len(), cfg)?;
    let spec = rfft(w)?;
    let weighted = Spectrum {
        n: spec.n,
        bins: spec
            .bins
            .iter()
            .enumerate()
            .map(|(k, b)| b * weights.rho[k])
            .collect(),
    };
    let mut grad = irfft(&weighted)?;
    let scale = match cfg.reduction {
        Reduction::Sum => 2.0 * w.len() as f64,
        Reduction::Mean => 2.0,
    };
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok(grad)
}

/// Per-bin power mult_k * |w_hat_k|^2 over the half-spectrum.
pub fn power_spectrum(w: &[f64]) -> Result<Vec<f64>> {
    let spec = rfft(w)?;
    Ok(spec
        .bins
        .iter()
        .enumerate()
        .map(|(k, b)| spec.multiplicity(k) * b.norm_sqr())
        .collect())
}

/// Share of spectral power at bins k >= ceil(n * T).
pub fn high_freq_fraction(w: &[f64], t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "frequency threshold must be positive, got {t}"
        )));
    }
    let power = power_spectrum(w)?;
    let total: f64 = power.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument(
            "high_freq_fraction is undefined for an all-zero signal".into(),
        ));
    }
    let cutoff = (w.len() as f64 * t).ceil() as usize;
    let high: f64 = power.iter().enumerate().filter(|(k, _)| *k >= cutoff).map(|(_, p)| p).sum();
    Ok(high / total)
}

/// Penalty over every adapter in the set, without the lambda factor.
///
/// Gradients come back keyed by target path, matching the layout of the task
/// gradients so the trainer can combine them with a single scaled add.
pub fn adapter_penalty(
    lora_set: &LoraSet,
    cfg: &FourierRegConfig,
) -> Result<(f64, BTreeMap<String, AdapterGrads>)> {
    if lora_set.adapters.is_empty() {
        return Err(Error::InvalidArgument("adapter_penalty: empty LoraSet".into()));
    }
    cfg.validate()?;
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (target, adapter) in &lora_set.adapters {
        let (loss, g) = match cfg.apply_to {
            ApplyTo::FactorsSeparately => {
                let loss_b = fourier_loss(adapter.b.data(), cfg)?;
                let loss_a = fourier_loss(adapter.a.data(), cfg)?;
                let gb = fourier_loss_grad(adapter.b.data(), cfg)?;
                let ga = fourier_loss_grad(adapter.a.data(), cfg)?;
                (
                    loss_b + loss_a,
                    AdapterGrads {
                        d_b: Tensor::from_vec(adapter.b.shape(), gb)?,
                        d_a: Tensor::from_vec(adapter.a.shape(), ga)?,
                    },
                )
            }
            ApplyTo::DeltaProduct => {
                let s = adapter.effective_scale();
                let mut delta = matmul(&adapter.b, &adapter.a)?;
                delta.scale(s);
                let loss = fourier_loss(delta.data(), cfg)?;
                let gd = fourier_loss_grad(delta.data(), cfg)?;
                let g = Tensor::from_vec(delta.shape(), gd)?;
                // delta = s * B * A  =>  dB = s * G * A^T, dA = s * B^T * G
                let mut d_b = matmul(&g, &adapter.a.transpose())?;
                d_b.scale(s);
                let mut d_a = matmul(&adapter.b.transpose(), &g)?;
                d_a.scale(s);
                (loss, AdapterGrads { d_b, d_a })
            }
        };
        total += loss;
        grads.insert(target.clone(), g);
    }
    Ok((total, grads))
}

/// lambda-scaled regularizer term: the Fourier contribution to the total loss
/// and its gradients.
pub fn regularizer_term(
    lora_set: &LoraSet,
    cfg: &FourierRegConfig,
) -> Result<(f64, BTreeMap<String, AdapterGrads>)> {
    let (loss, mut grads) = adapter_penalty(lora_set, cfg)?;
    for g in grads.values_mut() {
        g.d_b.scale(cfg.lambda);
        g.d_a.scale(cfg.lambda);
    }
    Ok((cfg.lambda * loss, grads))
}
