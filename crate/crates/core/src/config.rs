use serde::{Deserialize, Serialize};

use crate::conditioning::{CondScheme, BETA_FEATURE_DIM, FOURIER_LEVELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyKind {
    /// Channel-autoregressive slices on top of the hyperprior.
    Charm,
    /// Hyperprior only (a single slice without channel context).
    Hyperprior,
}

/// Architecture of the codec networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// M.
    pub latent_channels: usize,
    pub encoder_channels: usize,
    /// N.
    pub generator_channels: usize,
    pub res_blocks: usize,
    pub hyper_channels: usize,
    pub hyper_latent_channels: usize,
    /// Number of stride-2 stages in the hyper analysis transform.
    pub hyper_downsamples: usize,
    pub entropy: EntropyKind,
    pub num_slices: usize,
    pub charm_width: usize,
    pub cond: CondScheme,
    pub fourier_levels: usize,
    pub beta_mlp_width: usize,
    pub disc_channels: Vec<usize>,
    pub disc_latent_channels: usize,
    pub sigma_min: f64,
    pub l_max: i32,
}

impl ModelConfig {
    /// Desk-scale default used by the training presets.
    pub fn desk() -> Self {
        ModelConfig {
            latent_channels: 320,
            encoder_channels: 64,
            generator_channels: 64,
            res_blocks: 1,
            hyper_channels: 128,
            hyper_latent_channels: 64,
            hyper_downsamples: 2,
            entropy: EntropyKind::Charm,
            num_slices: 10,
            charm_width: 64,
            cond: CondScheme::Fourier,
            fourier_levels: FOURIER_LEVELS,
            beta_mlp_width: BETA_FEATURE_DIM,
            disc_channels: vec![32, 64, 128],
            disc_latent_channels: 12,
            sigma_min: 0.11,
            l_max: 64,
        }
    }

    /// Full-width generator (N = 256).
    pub fn paper() -> Self {
        ModelConfig {
            encoder_channels: 192,
            generator_channels: 256,
            hyper_channels: 192,
            hyper_latent_channels: 192,
            charm_width: 224,
            disc_channels: vec![64, 128, 256, 512],
            ..Self::desk()
        }
    }

    /// Small model for smoke runs: trains at a few steps per second on one CPU core.
    pub fn smoke() -> Self {
        ModelConfig {
            latent_channels: 40,
            encoder_channels: 24,
            generator_channels: 24,
            hyper_channels: 32,
            hyper_latent_channels: 16,
            charm_width: 24,
            beta_mlp_width: 64,
            disc_channels: vec![16, 32, 32],
            disc_latent_channels: 8,
            ..Self::desk()
        }
    }

    /// Tiny model for unit tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            latent_channels: 4,
            encoder_channels: 8,
            generator_channels: 8,
            res_blocks: 1,
            hyper_channels: 6,
            hyper_latent_channels: 3,
            hyper_downsamples: 0,
            entropy: EntropyKind::Charm,
            num_slices: 2,
            charm_width: 6,
            cond: CondScheme::Fourier,
            fourier_levels: FOURIER_LEVELS,
            beta_mlp_width: 8,
            disc_channels: vec![4, 6],
            disc_latent_channels: 2,
            sigma_min: 0.11,
            l_max: 64,
        }
    }

    /// Effective number of slices (1 for the plain hyperprior).
    pub fn slices(&self) -> usize {
        match self.entropy {
            EntropyKind::Charm => self.num_slices,
            EntropyKind::Hyperprior => 1,
        }
    }

    pub fn slice_channels(&self) -> usize {
        self.latent_channels / self.slices()
    }

    /// Stride of the latent relative to the image.
    pub fn latent_stride(&self) -> u32 {
        16
    }

    /// Images are padded to this multiple before encoding.
    pub fn pad_multiple(&self) -> u32 {
        self.latent_stride() << self.hyper_downsamples
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("encoder_channels", self.encoder_channels),
            ("generator_channels", self.generator_channels),
            ("hyper_channels", self.hyper_channels),
            ("hyper_latent_channels", self.hyper_latent_channels),
            ("charm_width", self.charm_width),
            ("fourier_levels", self.fourier_levels),
            ("beta_mlp_width", self.beta_mlp_width),
            ("disc_latent_channels", self.disc_latent_channels),
            ("num_slices", self.slices()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.latent_channels % self.slices() != 0 {
            return Err(Error::Config(format!(
                "latent_channels {} not divisible into {} equal slices",
                self.latent_channels,
                self.slices()
            )));
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return Err(Error::Config("disc_channels must be non-empty and positive".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be positive".into()));
        }
        if !(1..=32767).contains(&self.l_max) {
            return Err(Error::Config("l_max must be in 1..=32767".into()));
        }
        Ok(())
    }
}
