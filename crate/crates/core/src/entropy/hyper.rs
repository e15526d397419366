//! Hyper analysis / synthesis transforms of the hyperprior.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{join, Conv2d, ConvTranspose2d, ParamStore};

/// `y -> z`, downsampling by `2^hyper_downsamples`.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    layers: Vec<Conv2d>,
}

impl HyperAnalysis {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (m, hc, zc) = (cfg.latent_channels, cfg.hyper_channels, cfg.hyper_latent_channels);
        let mut layers = Vec::new();
        if cfg.hyper_downsamples == 0 {
            layers.push(Conv2d::new(store, &join(prefix, "conv0"), m, hc, 3, 1)?);
            layers.push(Conv2d::new(store, &join(prefix, "out"), hc, zc, 3, 1)?);
        } else {
            layers.push(Conv2d::new(store, &join(prefix, "conv0"), m, hc, 3, 1)?);
            for d in 0..cfg.hyper_downsamples {
                let out = if d + 1 == cfg.hyper_downsamples { zc } else { hc };
                layers.push(Conv2d::new(store, &join(prefix, &format!("down{d}")), hc, out, 3, 2)?);
            }
        }
        Ok(HyperAnalysis { layers })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let mut h = y.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// `ẑ -> hyper features` at the spatial resolution of y.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    ups: Vec<ConvTranspose2d>,
    input: Option<Conv2d>,
    out: Conv2d,
}

impl HyperSynthesis {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (hc, zc) = (cfg.hyper_channels, cfg.hyper_latent_channels);
        let mut ups = Vec::new();
        for d in 0..cfg.hyper_downsamples {
            let in_ch = if d == 0 { zc } else { hc };
            ups.push(ConvTranspose2d::new(store, &join(prefix, &format!("up{d}")), in_ch, hc)?);
        }
        let input = if cfg.hyper_downsamples == 0 {
            Some(Conv2d::new(store, &join(prefix, "conv0"), zc, hc, 3, 1)?)
        } else {
            None
        };
        let out = Conv2d::new(store, &join(prefix, "out"), hc, hc, 3, 1)?;
        Ok(HyperSynthesis { ups, input, out })
    }

    pub fn out_channels(&self) -> usize {
        self.out.out_channels()
    }

    pub fn forward(&self, z_hat: &Tensor) -> Result<Tensor> {
        let mut h = z_hat.clone();
        if let Some(conv) = &self.input {
            h = conv.forward(&h)?.relu()?;
        }
        for up in &self.ups {
            h = up.forward(&h)?.relu()?;
        }
        self.out.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn hyper_shapes_and_zero_input() {
        let cfg = ModelConfig::smoke();
        let mut s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let ha = HyperAnalysis::new(&mut s, "ha", &cfg).unwrap();
        let hs = HyperSynthesis::new(&mut s, "hs", &cfg).unwrap();
        let y = Tensor::randn(0f32, 1.0, (1, cfg.latent_channels, 8, 4), &Device::Cpu).unwrap();
        let z = ha.forward(&y).unwrap();
        assert_eq!(z.dims(), &[1, cfg.hyper_latent_channels, 2, 1]);
        let f = hs.forward(&z.round().unwrap()).unwrap();
        assert_eq!(f.dims(), &[1, cfg.hyper_channels, 8, 4]);
        let a = hs.forward(&z.round().unwrap()).unwrap();
        assert_eq!(
            (f - a).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(),
            0.0
        );

        for (name, v) in s.vars() {
            if name.starts_with("hs") && name.ends_with("bias") {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
        let zero = Tensor::zeros((1, cfg.hyper_latent_channels, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let f = hs.forward(&zero).unwrap();
        assert_eq!(f.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}
