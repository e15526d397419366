//! Channel-autoregressive ("Charm") entropy parameter prediction: the latent
//! is split into equal channel slices, and the Gaussian parameters of slice
//! `i` are predicted from the hyper features and slices `0..i` only.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::entropy::{EntropyParams, SliceLayout};
use crate::error::{Error, Result};
use crate::nn::{join, softplus, Conv2d, ParamStore};

#[derive(Clone, Debug)]
struct SlicePredictor {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ChannelContext {
    predictors: Vec<SlicePredictor>,
    layout: SliceLayout,
    sigma_min: f64,
}

impl ChannelContext {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, hyper_ch: usize) -> Result<Self> {
        let layout = SliceLayout::new(cfg.latent_channels, cfg.slices())?;
        let sc = layout.slice_channels;
        let mut predictors = Vec::new();
        for i in 0..layout.num_slices {
            let p = join(prefix, &format!("slice{i}"));
            predictors.push(SlicePredictor {
                conv1: Conv2d::new(store, &join(&p, "conv1"), hyper_ch + i * sc, cfg.charm_width, 3, 1)?,
                conv2: Conv2d::new(store, &join(&p, "conv2"), cfg.charm_width, 2 * sc, 3, 1)?,
            });
        }
        Ok(ChannelContext {
            predictors,
            layout,
            sigma_min: cfg.sigma_min,
        })
    }

    pub fn layout(&self) -> SliceLayout {
        self.layout
    }

    /// Parameters for slice `index` given the already decoded slices `0..index`.
    pub fn predict(&self, hyper: &Tensor, decoded: &[Tensor], index: usize) -> Result<EntropyParams> {
        if index >= self.layout.num_slices || decoded.len() != index {
            return Err(Error::Shape(format!(
                "slice {index} of {} needs exactly {index} decoded slices, got {}",
                self.layout.num_slices,
                decoded.len()
            )));
        }
        let input = if decoded.is_empty() {
            hyper.clone()
        } else {
            let mut parts: Vec<&Tensor> = vec![hyper];
            parts.extend(decoded.iter());
            Tensor::cat(&parts, 1)?
        };
        let p = &self.predictors[index];
        let raw = p.conv2.forward(&p.conv1.forward(&input)?.relu()?)?;
        let sc = self.layout.slice_channels;
        let mu = raw.narrow(1, 0, sc)?;
        let sigma = softplus(&raw.narrow(1, sc, sc)?)?.maximum(self.sigma_min)?;
        Ok(EntropyParams { mu, sigma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn slice_predictions_are_causal() {
        let cfg = ModelConfig { latent_channels: 20, num_slices: 10, ..ModelConfig::tiny() };
        let mut s = ParamStore::new(5, DType::F64, &Device::Cpu);
        let ctx = ChannelContext::new(&mut s, "ctx", &cfg, 6).unwrap();
        let hyper = Tensor::randn(0f64, 1.0, (1, 6, 3, 3), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 2.0, (1, 20, 3, 3), &Device::Cpu).unwrap().round().unwrap();
        let slices = ctx.layout().split(&y).unwrap();
        let p0 = ctx.predict(&hyper, &[], 0).unwrap();
        assert_eq!(p0.mu.dims(), &[1, 2, 3, 3]);
        let p4 = ctx.predict(&hyper, &slices[..4], 4).unwrap();
        let mut changed = slices.clone();
        for s in changed.iter_mut().skip(4) {
            *s = (s.clone() + 7.0).unwrap();
        }
        let q4 = ctx.predict(&hyper, &changed[..4], 4).unwrap();
        let d = (p4.mu - q4.mu).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
        assert!(ctx.predict(&hyper, &slices[..3], 4).is_err());
        let sig = p4.sigma.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sig.iter().all(|&v| v >= 0.11));
    }
}
