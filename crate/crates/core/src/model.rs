//! The assembled codec: encoder, hyperprior, channel context, generator and
//! (for training) the discriminator.

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::conditioning::RealismWeight;
use crate::config::ModelConfig;
use crate::entropy::{
    bits_per_example, gaussian_likelihood, quantize, round_tensor, ChannelContext, EntropyParams,
    FactorizedPrior, HyperAnalysis, HyperSynthesis, QuantMode,
};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::transforms::{Discriminator, Encoder, Generator};

const DISC_SEED_OFFSET: u64 = 0xD15C;

/// 16-byte identifier binding bitstreams to the weights that wrote them.
pub type ModelId = [u8; 16];

pub fn model_id_hex(id: &ModelId) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

/// How the latents are relaxed during a training forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainQuant {
    /// Noise for the rate terms, straight-through rounding for everything
    /// the decoder sees.
    Mixed,
    /// Additive noise everywhere; fully differentiable, used by gradient checks.
    Noise,
    /// Straight-through rounding everywhere.
    Ste,
}

/// Uniform noise in (-0.5, 0.5) shaped like `y` and `z`.
#[derive(Clone, Debug)]
pub struct LatentNoise {
    pub y: Tensor,
    pub z: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainForward {
    pub y: Tensor,
    /// Latent fed to the generator, the channel context and the discriminator.
    pub y_hat: Tensor,
    pub x_hat: Tensor,
    pub bits_y: Tensor,
    pub bits_z: Tensor,
}

pub struct CodecModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    hyper_analysis: HyperAnalysis,
    hyper_synthesis: HyperSynthesis,
    prior: FactorizedPrior,
    context: ChannelContext,
    generator: Generator,
    disc: Option<(ParamStore, Discriminator)>,
}

impl CodecModel {
    pub fn new(cfg: &ModelConfig, seed: u64, with_disc: bool, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let encoder = Encoder::new(&mut store, "encoder", cfg)?;
        let hyper_analysis = HyperAnalysis::new(&mut store, "hyper_analysis", cfg)?;
        let hyper_synthesis = HyperSynthesis::new(&mut store, "hyper_synthesis", cfg)?;
        let prior = FactorizedPrior::new(&mut store, "z_prior", cfg.hyper_latent_channels)?;
        let context = ChannelContext::new(&mut store, "context", cfg, hyper_synthesis.out_channels())?;
        let generator = Generator::new(&mut store, "generator", cfg)?;
        let disc = if with_disc {
            let mut ds = ParamStore::new(seed.wrapping_add(DISC_SEED_OFFSET), dtype, device);
            let d = Discriminator::new(&mut ds, "disc", cfg)?;
            Some((ds, d))
        } else {
            None
        };
        Ok(CodecModel {
            cfg: cfg.clone(),
            store,
            encoder,
            hyper_analysis,
            hyper_synthesis,
            prior,
            context,
            generator,
            disc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters of E, the entropy model and G.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn disc_store(&self) -> Option<&ParamStore> {
        self.disc.as_ref().map(|(s, _)| s)
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.disc.as_ref().map(|(_, d)| d)
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    pub fn context(&self) -> &ChannelContext {
        &self.context
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        let m = self.cfg.pad_multiple() as usize;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not a multiple of {m}")));
        }
        Ok(())
    }

    /// Continuous latents `(y, z)`.
    pub fn analyze(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let y = self.encoder.forward(x)?;
        let z = self.hyper_analysis.forward(&y)?;
        Ok((y, z))
    }

    pub fn hyper_features(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.hyper_synthesis.forward(z_hat)
    }

    /// Entropy parameters of slice `index` from the decoded slices `0..index`.
    pub fn slice_params(&self, hyper: &Tensor, decoded: &[Tensor], index: usize) -> Result<EntropyParams> {
        self.context.predict(hyper, decoded, index)
    }

    /// Parameters of every slice computed from a full latent; slice `i` only
    /// ever sees slices `0..i`.
    pub fn all_slice_params(&self, hyper: &Tensor, y_hat: &Tensor) -> Result<Vec<EntropyParams>> {
        let slices = self.context.layout().split(y_hat)?;
        (0..slices.len())
            .map(|i| self.context.predict(hyper, &slices[..i], i))
            .collect()
    }

    /// Training forward pass. `betas` has one entry per example (or one for
    /// the batch); `noise` is required unless `quant` is [`TrainQuant::Ste`].
    pub fn forward_train(
        &self,
        x: &Tensor,
        betas: &[f64],
        quant: TrainQuant,
        noise: Option<&LatentNoise>,
    ) -> Result<TrainForward> {
        let (y, z) = self.analyze(x)?;
        let (rate_mode, dec_mode) = match quant {
            TrainQuant::Mixed => (QuantMode::Noise, QuantMode::Ste),
            TrainQuant::Noise => (QuantMode::Noise, QuantMode::Noise),
            TrainQuant::Ste => (QuantMode::Ste, QuantMode::Ste),
        };
        let z_rate = quantize(&z, rate_mode, noise.map(|n| &n.z))?;
        let z_dec = quantize(&z, dec_mode, noise.map(|n| &n.z))?;
        let y_rate = quantize(&y, rate_mode, noise.map(|n| &n.y))?;
        let y_hat = quantize(&y, dec_mode, noise.map(|n| &n.y))?;

        let bits_z = bits_per_example(&self.prior.likelihood(&z_rate)?)?;
        let hyper = self.hyper_synthesis.forward(&z_dec)?;
        let params = self.all_slice_params(&hyper, &y_hat)?;
        let layout = self.context.layout();
        let rate_slices = layout.split(&y_rate)?;
        let mut bits_y: Option<Tensor> = None;
        for (s, p) in rate_slices.iter().zip(&params) {
            let b = bits_per_example(&gaussian_likelihood(s, p)?)?;
            bits_y = Some(match bits_y {
                Some(acc) => (acc + b)?,
                None => b,
            });
        }
        let x_hat = self.generator.forward(&y_hat, betas)?;
        Ok(TrainForward {
            y,
            y_hat,
            x_hat,
            bits_y: bits_y.expect("at least one slice"),
            bits_z,
        })
    }

    /// Rounded latents, clamped to the coder alphabet.
    pub fn quantized_latents(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (y, z) = self.analyze(x)?;
        let l = self.cfg.l_max as f64;
        Ok((round_tensor(&y)?.clamp(-l, l)?, round_tensor(&z)?.clamp(-l, l)?))
    }

    /// Receiver-side reconstruction on the [0, 255] scale.
    pub fn generate(&self, y_hat: &Tensor, beta: RealismWeight) -> Result<Tensor> {
        self.generator.generate(y_hat, beta)
    }

    /// Hash of the configuration and every E / entropy model / G parameter
    /// (as little-endian f32, in name order).
    pub fn model_id(&self) -> Result<ModelId> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg)?);
        for (name, var) in self.store.vars() {
            h.update(name.as_bytes());
            let v = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        Ok(id)
    }
}
