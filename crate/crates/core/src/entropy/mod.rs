//! Quantization, the conditional discretized-Gaussian model, the factorized
//! prior for the hyper-latent, the channel-autoregressive slice predictor and
//! differentiable rate estimates.

pub mod cdf;
pub mod charm;
pub mod factorized;
pub mod hyper;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cdf::CdfTable;
pub use charm::ChannelContext;
pub use factorized::FactorizedPrior;
pub use hyper::{HyperAnalysis, HyperSynthesis};

/// Smallest probability a symbol may be assigned inside rate estimates.
pub const LIKELIHOOD_BOUND: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Additive uniform noise in (-0.5, 0.5). Training only.
    Noise,
    /// Round forward, identity backward.
    Ste,
    /// Round half to even.
    Round,
}

pub fn uniform_noise<R: Rng + ?Sized>(
    dims: &[usize],
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
}

/// Elementwise round-half-to-even, without gradient.
pub fn round_tensor(y: &Tensor) -> Result<Tensor> {
    let dtype = y.dtype();
    let v: Vec<f64> = y
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(f64::round_ties_even)
        .collect();
    Ok(Tensor::from_vec(v, y.dims(), y.device())?.to_dtype(dtype)?)
}

/// Quantizes `y`. `noise` must be supplied for [`QuantMode::Noise`].
pub fn quantize(y: &Tensor, mode: QuantMode, noise: Option<&Tensor>) -> Result<Tensor> {
    match mode {
        QuantMode::Round => round_tensor(y),
        QuantMode::Ste => {
            let r = round_tensor(y)?;
            Ok((y + (r - y)?.detach())?)
        }
        QuantMode::Noise => {
            let noise = noise.ok_or_else(|| Error::Config("noise quantization needs noise".into()))?;
            Ok((y + noise)?)
        }
    }
}

/// Per-symbol Gaussian parameters for a latent (or one slice of it).
#[derive(Clone, Debug)]
pub struct EntropyParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Equal channel slices for the channel-autoregressive model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceLayout {
    pub num_slices: usize,
    pub slice_channels: usize,
}

impl SliceLayout {
    pub fn new(channels: usize, num_slices: usize) -> Result<Self> {
        if num_slices == 0 || channels % num_slices != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {num_slices} equal slices"
            )));
        }
        Ok(SliceLayout {
            num_slices,
            slice_channels: channels / num_slices,
        })
    }

    pub fn split(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        let c = y.dim(1)?;
        if c != self.num_slices * self.slice_channels {
            return Err(Error::Shape(format!("latent has {c} channels, layout expects {}", self.num_slices * self.slice_channels)));
        }
        (0..self.num_slices)
            .map(|i| Ok(y.narrow(1, i * self.slice_channels, self.slice_channels)?))
            .collect()
    }
}

fn std_normal_cdf_tensor(x: &Tensor) -> Result<Tensor> {
    Ok(((x * std::f64::consts::FRAC_1_SQRT_2)?.erf()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `p(y) = Φ((y+½-μ)/σ) - Φ((y-½-μ)/σ)`, evaluated on the side of the mean
/// that avoids cancellation, bounded below by [`LIKELIHOOD_BOUND`].
pub fn gaussian_likelihood(y: &Tensor, params: &EntropyParams) -> Result<Tensor> {
    let v = (y - &params.mu)?.abs()?;
    let upper = (v.neg()? + 0.5)?.div(&params.sigma)?;
    let lower = (v.neg()? - 0.5)?.div(&params.sigma)?;
    let p = (std_normal_cdf_tensor(&upper)? - std_normal_cdf_tensor(&lower)?)?;
    Ok(p.maximum(LIKELIHOOD_BOUND)?)
}

/// `-log2` of likelihoods summed per batch element, shape `(B,)`.
pub fn bits_per_example(likelihood: &Tensor) -> Result<Tensor> {
    let b = likelihood.dim(0)?;
    Ok(likelihood
        .log()?
        .reshape((b, ()))?
        .sum(1)?
        .affine(-1.0 / std::f64::consts::LN_2, 0.0)?)
}

/// Differentiable rate of `y` under `params`, in bits per batch element.
pub fn rate_bits(y: &Tensor, params: &EntropyParams) -> Result<Tensor> {
    bits_per_example(&gaussian_likelihood(y, params)?)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Discretized Gaussian mass of the integer `k`.
pub fn discretized_gaussian_pmf(k: f64, mu: f64, sigma: f64) -> f64 {
    let v = (k - mu).abs();
    std_normal_cdf((0.5 - v) / sigma) - std_normal_cdf((-0.5 - v) / sigma)
}

/// `-log2 p(k)` with the same lower bound as the differentiable estimate.
pub fn discretized_gaussian_bits(k: f64, mu: f64, sigma: f64) -> f64 {
    -discretized_gaussian_pmf(k, mu, sigma).max(LIKELIHOOD_BOUND).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn rounding_is_ties_to_even() {
        let r = round_tensor(&t(&[0.4, 0.6, -0.5, 1.5, 2.5, -1.5])).unwrap();
        assert_eq!(r.to_vec1::<f64>().unwrap(), [0.0, 1.0, -0.0, 2.0, 2.0, -2.0]);
    }

    #[test]
    fn ste_has_identity_gradient() {
        let y = candle_core::Var::new(&[0.3f64, -1.7, 2.5], &Device::Cpu).unwrap();
        let q = quantize(&y, QuantMode::Ste, None).unwrap();
        assert_eq!(q.to_vec1::<f64>().unwrap(), [0.0, -2.0, 2.0]);
        let grads = q.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(&y).unwrap().to_vec1::<f64>().unwrap(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn noise_stays_within_half() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::randn(0f64, 5.0, 1000, &Device::Cpu).unwrap();
        let n = uniform_noise(&[1000], DType::F64, &Device::Cpu, &mut rng).unwrap();
        let q = quantize(&y, QuantMode::Noise, Some(&n)).unwrap();
        let m = (q - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m <= 0.5);
        assert!(quantize(&t(&[1.0]), QuantMode::Noise, None).is_err());
    }

    #[test]
    fn unit_gaussian_zero_symbol_bits() {
        // -log2(Φ(0.5) - Φ(-0.5)), with Φ from an independent series expansion
        let phi = |x: f64| {
            let mut term = x;
            let mut sum = x;
            for n in 1..60 {
                term *= -x * x / 2.0 / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
        };
        let expect = -(phi(0.5) - phi(-0.5)).log2();
        assert!((expect - 1.385).abs() < 1e-3);
        assert!((discretized_gaussian_bits(0.0, 0.0, 1.0) - expect).abs() < 1e-12);
        let params = EntropyParams { mu: t(&[0.0]).reshape((1, 1)).unwrap(), sigma: t(&[1.0]).reshape((1, 1)).unwrap() };
        let bits = rate_bits(&t(&[0.0]).reshape((1, 1)).unwrap(), &params).unwrap();
        assert!((bits.to_vec1::<f64>().unwrap()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn degenerate_scale_costs_nothing() {
        assert!(discretized_gaussian_bits(0.0, 0.0, 0.11) < 1e-5);
        assert!(discretized_gaussian_bits(0.0, 0.0, 0.01) < 1e-12);
    }

    #[test]
    fn bits_are_additive() {
        let y = t(&[0.0, 1.0, -2.0, 3.0]).reshape((1, 4)).unwrap();
        let params = EntropyParams {
            mu: t(&[0.1, 0.5, -1.0, 0.0]).reshape((1, 4)).unwrap(),
            sigma: t(&[0.5, 1.0, 2.0, 3.0]).reshape((1, 4)).unwrap(),
        };
        let total = rate_bits(&y, &params).unwrap().to_vec1::<f64>().unwrap()[0];
        let sum: f64 = [(0.0, 0.1, 0.5), (1.0, 0.5, 1.0), (-2.0, -1.0, 2.0), (3.0, 0.0, 3.0)]
            .iter()
            .map(|&(k, m, s)| discretized_gaussian_bits(k, m, s))
            .sum();
        assert!((total - sum).abs() < 1e-9, "{total} vs {sum}");
        assert!(total >= 0.0);
    }

    #[test]
    fn slice_layout() {
        let l = SliceLayout::new(320, 10).unwrap();
        assert_eq!(l.slice_channels, 32);
        assert!(SliceLayout::new(192, 10).is_err());
        let y = Tensor::zeros((1, 320, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let parts = l.split(&y).unwrap();
        assert_eq!(parts.len(), 10);
        assert_eq!(parts[3].dims(), &[1, 32, 2, 2]);
    }
}
