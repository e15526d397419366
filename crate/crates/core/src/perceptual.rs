//! Fixed-weight feature networks: the default perceptual distance used in
//! training and the feature extractor behind the FID proxy.
//!
//! Weights are drawn from a seeded ChaCha8 stream, so the networks are
//! identical on every run and platform and need no downloaded artifacts.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const PERCEPTUAL_SEED: u64 = 0x5EED_0001;
const NORM_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

/// Stack of 3x3 convolutions with ReLU and constant (non-trainable) weights.
#[derive(Clone, Debug)]
pub struct FrozenConvStack {
    layers: Vec<FrozenConv>,
}

impl FrozenConvStack {
    pub fn new(
        seed: u64,
        in_ch: usize,
        widths: &[usize],
        strides: &[usize],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if widths.len() != strides.len() {
            return Err(Error::Config("widths and strides differ in length".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = in_ch;
        for (&cout, &stride) in widths.iter().zip(strides) {
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect();
            layers.push(FrozenConv {
                weight: Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::from_vec(b, (1, cout, 1, 1), device)?.to_dtype(dtype)?,
                stride,
            });
            cin = cout;
        }
        Ok(FrozenConvStack { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.dim(0).unwrap_or(0))
    }

    /// Activations after every layer.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = h.conv2d(&l.weight, 1, l.stride, 1, 1)?.broadcast_add(&l.bias)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Multi-scale feature distance on a random conv net applied to each color
/// channel separately, plus a raw-pixel term.
///
/// Sharing one single-channel network across R, G and B makes the distance
/// invariant to permuting the channels of both inputs; the pixel term makes
/// it zero only for identical inputs.
#[derive(Clone, Debug)]
pub struct PerceptualMetric {
    net: FrozenConvStack,
    pixel_weight: f64,
}

impl PerceptualMetric {
    pub fn new(dtype: DType, device: &Device) -> Result<Self> {
        Ok(PerceptualMetric {
            net: FrozenConvStack::new(PERCEPTUAL_SEED, 1, &[8, 16, 32], &[1, 2, 2], dtype, device)?,
            pixel_weight: 1.0,
        })
    }

    /// Per-example distance `(B,)` between images in [0, 255].
    pub fn distance(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        if x.dims() != x_hat.dims() {
            return Err(Error::Shape(format!(
                "perceptual inputs differ: {:?} vs {:?}",
                x.dims(),
                x_hat.dims()
            )));
        }
        let (b, c, h, w) = x.dims4()?;
        let prep = |t: &Tensor| -> Result<Tensor> {
            Ok(t.affine(1.0 / 127.5, -1.0)?.reshape((b * c, 1, h, w))?)
        };
        let fa = self.net.features(&prep(x)?)?;
        let fb = self.net.features(&prep(x_hat)?)?;
        let mut total: Option<Tensor> = None;
        for (a, bb) in fa.iter().zip(&fb) {
            let d = (unit_normalize(a)? - unit_normalize(bb)?)?
                .sqr()?
                .sum(1)?
                .mean((1, 2))?
                .reshape((b, c))?
                .mean(1)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        let layers = fa.len() as f64;
        let feat = total.expect("at least one layer").affine(1.0 / layers, 0.0)?;
        let pix = ((x - x_hat)? / 255.0)?.sqr()?.reshape((b, ()))?.mean(1)?;
        Ok((feat + pix.affine(self.pixel_weight, 0.0)?)?)
    }

    /// Batch-mean distance.
    pub fn perceptual(&self, x: &Tensor, x_hat: &Tensor) -> Result<f64> {
        Ok(self
            .distance(x, x_hat)?
            .mean_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}
