//! Training objectives.
//!
//! Rate is in bits (per pixel), GAN terms use the natural log. Distortion
//! `d` is MSE on the [0, 255] scale divided by 100 and the rate weight is
//! `λ' = 100 λ`. At β = 0 the objective is `100 λ (rate + MSE / (10⁴ λ))`,
//! a scaled `rate + λ MSE` with weight `1 / (10⁴ λ)`; at λ = 1/100 the two
//! coincide.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{RealismWeight, BETA_MAX_TRAIN};
use crate::error::{Error, Result};

/// Discriminator outputs are clamped to `[D_EPS, 1 - D_EPS]` before logs.
pub const D_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rate_bits_per_pixel: f64,
    pub distortion_d: f64,
    pub adversarial_g: f64,
    pub perceptual: f64,
    pub discriminator_loss: f64,
    pub total_egd: f64,
}

/// How `L_P` is weighted: `β C_P` in the main objective, or a constant `C_P'`
/// (decoupled from β) in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PerceptualWeight {
    Coupled(f64),
    Decoupled(f64),
}

impl PerceptualWeight {
    pub fn weight(self, beta: f64) -> f64 {
        match self {
            PerceptualWeight::Coupled(c) => beta * c,
            PerceptualWeight::Decoupled(c) => c,
        }
    }
}

pub fn lambda_prime(lambda: f64) -> f64 {
    100.0 * lambda
}

pub fn distortion_d(mse_255: f64) -> f64 {
    mse_255 / 100.0
}

/// `rate + λ MSE`.
pub fn loss_rd(rate_bpp: f64, mse_255: f64, lambda: f64) -> f64 {
    rate_bpp + lambda * mse_255
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(D_EPS, 1.0 - D_EPS)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `mean(-ln D(fake))`.
pub fn loss_gan_g(d_on_fake: &[f64]) -> f64 {
    mean(d_on_fake.iter().map(|&p| -clamp_prob(p).ln()))
}

/// `mean(-ln(1 - D(fake))) + mean(-ln D(real))`.
pub fn loss_gan_d(d_on_fake: &[f64], d_on_real: &[f64]) -> f64 {
    mean(d_on_fake.iter().map(|&p| -(1.0 - clamp_prob(p)).ln()))
        + mean(d_on_real.iter().map(|&p| -clamp_prob(p).ln()))
}

/// The full generator-side objective with coupled perceptual weight
/// `β C_P`; `discriminator_loss` is left at zero.
pub fn loss_egd(
    rate_bpp: f64,
    mse_255: f64,
    d_on_fake: &[f64],
    perc: f64,
    beta: f64,
    lambda: f64,
    c_p: f64,
) -> LossBreakdown {
    let adversarial_g = loss_gan_g(d_on_fake);
    let distortion_d = distortion_d(mse_255);
    let total_egd = lambda_prime(lambda) * rate_bpp + distortion_d + beta * (adversarial_g + c_p * perc);
    LossBreakdown {
        rate_bits_per_pixel: rate_bpp,
        distortion_d,
        adversarial_g,
        perceptual: perc,
        discriminator_loss: 0.0,
        total_egd,
    }
}

fn clamped_probs(d: &Tensor) -> Result<Tensor> {
    Ok(d.clamp(D_EPS, 1.0 - D_EPS)?)
}

/// Per-example `mean(-ln D(fake))` over patches, shape `(B,)`.
pub fn gan_g_per_example(d_on_fake: &Tensor) -> Result<Tensor> {
    let b = d_on_fake.dim(0)?;
    Ok(clamped_probs(d_on_fake)?.log()?.neg()?.reshape((b, ()))?.mean(1)?)
}

/// Scalar discriminator loss.
pub fn gan_d_tensor(d_on_fake: &Tensor, d_on_real: &Tensor) -> Result<Tensor> {
    let fake = clamped_probs(d_on_fake)?.affine(-1.0, 1.0)?.log()?.neg()?.mean_all()?;
    let real = clamped_probs(d_on_real)?.log()?.neg()?.mean_all()?;
    Ok((fake + real)?)
}

/// Per-example MSE on the [0, 255] scale, shape `(B,)`.
pub fn mse_per_example(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    let b = x.dim(0)?;
    Ok((x - x_hat)?.sqr()?.reshape((b, ()))?.mean(1)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Whether β is drawn once per batch or independently per example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSampling {
    #[default]
    PerExample,
    PerBatch,
}

/// `β ~ U(0, 5.12)`.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R) -> RealismWeight {
    RealismWeight::train(rng.gen_range(0.0..=BETA_MAX_TRAIN)).expect("sample within training range")
}

pub fn sample_betas<R: Rng + ?Sized>(rng: &mut R, batch: usize, sampling: BetaSampling) -> Vec<f64> {
    match sampling {
        BetaSampling::PerExample => (0..batch).map(|_| sample_beta(rng).value()).collect(),
        BetaSampling::PerBatch => vec![sample_beta(rng).value(); batch],
    }
}
