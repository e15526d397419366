//! Encoder E, β-conditional generator G and the conditional patch
//! discriminator D.
//!
//! E and G are ELIC-like stacks: four stride-2 (transposed) 3x3 convolutions
//! with residual blocks between them. Images enter E in [0, 255] and G emits
//! reconstructions on the same scale, unclipped.

use candle_core::Tensor;

use crate::conditioning::{
    add_channel_offset, table_index, BetaMlp, BetaTable, CondScheme, LayerProjection,
    RealismWeight, BETA_GRID,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, leaky_relu, sigmoid, Conv2d, ConvTranspose2d, ParamStore, ResBlock};

const STAGES: usize = 4;

#[derive(Clone, Debug)]
pub struct Encoder {
    downs: Vec<Conv2d>,
    blocks: Vec<Vec<ResBlock>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let n = cfg.encoder_channels;
        for s in 0..STAGES {
            let in_ch = if s == 0 { 3 } else { n };
            let out_ch = if s + 1 == STAGES { cfg.latent_channels } else { n };
            downs.push(Conv2d::new(store, &join(prefix, &format!("down{s}")), in_ch, out_ch, 3, 2)?);
            let mut stage = Vec::new();
            if s + 1 < STAGES {
                for r in 0..cfg.res_blocks {
                    stage.push(ResBlock::new(store, &join(prefix, &format!("rb{s}_{r}")), n)?);
                }
            }
            blocks.push(stage);
        }
        Ok(Encoder { downs, blocks })
    }

    /// `(B, 3, H, W)` in [0, 255] to the continuous latent `(B, M, H/16, W/16)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder expects (B, 3, 16k, 16l), got (.., {c}, {h}, {w})"
            )));
        }
        let mut h = x.affine(1.0 / 255.0, 0.0)?;
        for (down, stage) in self.downs.iter().zip(&self.blocks) {
            h = down.forward(&h)?;
            for rb in stage {
                h = rb.forward(&h)?;
            }
        }
        Ok(h)
    }
}

/// Residual block whose convs receive a β-dependent channel offset.
#[derive(Clone, Debug)]
struct CondResBlock {
    conv1: crate::nn::Conv2d,
    conv2: crate::nn::Conv2d,
    proj: Option<(LayerProjection, LayerProjection)>,
}

impl CondResBlock {
    fn new(store: &mut ParamStore, prefix: &str, ch: usize, fourier_width: Option<usize>) -> Result<Self> {
        let conv1 = Conv2d::new(store, &join(prefix, "conv1"), ch, ch, 3, 1)?;
        let conv2 = Conv2d::new(store, &join(prefix, "conv2"), ch, ch, 3, 1)?;
        let proj = match fourier_width {
            Some(width) => Some((
                LayerProjection::new(store, &join(prefix, "proj1"), width, ch)?,
                LayerProjection::new(store, &join(prefix, "proj2"), width, ch)?,
            )),
            None => None,
        };
        Ok(CondResBlock { conv1, conv2, proj })
    }

    fn forward(&self, x: &Tensor, f_beta: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(x)?;
        if let (Some((p1, _)), Some(f)) = (&self.proj, f_beta) {
            h = add_channel_offset(&h, &p1.project(f)?)?;
        }
        let mut h = self.conv2.forward(&h.relu()?)?;
        if let (Some((_, p2)), Some(f)) = (&self.proj, f_beta) {
            h = add_channel_offset(&h, &p2.project(f)?)?;
        }
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
enum GenCond {
    Fourier(BetaMlp),
    Table(Vec<BetaTable>),
    None,
}

#[derive(Clone, Debug)]
pub struct Generator {
    ups: Vec<ConvTranspose2d>,
    blocks: Vec<Vec<CondResBlock>>,
    cond: GenCond,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.generator_channels;
        let fourier_width = (cfg.cond == CondScheme::Fourier).then_some(cfg.beta_mlp_width);
        let cond = match cfg.cond {
            CondScheme::Fourier => GenCond::Fourier(BetaMlp::new(
                store,
                &join(prefix, "beta_mlp"),
                cfg.fourier_levels,
                cfg.beta_mlp_width,
            )?),
            CondScheme::Table => {
                let mut tables = Vec::new();
                for s in 0..STAGES {
                    let out_ch = if s + 1 == STAGES { 3 } else { n };
                    tables.push(BetaTable::new(store, &join(prefix, &format!("table{s}")), out_ch)?);
                }
                GenCond::Table(tables)
            }
            CondScheme::None => GenCond::None,
        };
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for s in 0..STAGES {
            let in_ch = if s == 0 { cfg.latent_channels } else { n };
            let out_ch = if s + 1 == STAGES { 3 } else { n };
            ups.push(ConvTranspose2d::new(store, &join(prefix, &format!("up{s}")), in_ch, out_ch)?);
            let mut stage = Vec::new();
            if s + 1 < STAGES {
                for r in 0..cfg.res_blocks {
                    stage.push(CondResBlock::new(
                        store,
                        &join(prefix, &format!("rb{s}_{r}")),
                        n,
                        fourier_width,
                    )?);
                }
            }
            blocks.push(stage);
        }
        Ok(Generator { ups, blocks, cond })
    }

    /// Reconstruction on the [0, 255] scale for one β per batch element
    /// (or a single β for the whole batch). No range checks on β.
    pub fn forward(&self, y_hat: &Tensor, betas: &[f64]) -> Result<Tensor> {
        let (b, _, _, _) = y_hat.dims4()?;
        if betas.len() != b && betas.len() != 1 {
            return Err(Error::Shape(format!("{} betas for batch of {b}", betas.len())));
        }
        let f_beta = match &self.cond {
            GenCond::Fourier(mlp) => Some(mlp.features(betas)?),
            _ => None,
        };
        let table_rows = match &self.cond {
            GenCond::Table(_) => Some(
                betas
                    .iter()
                    .map(|&beta| table_index(&BETA_GRID, beta, true))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let mut h = y_hat.clone();
        for (s, (up, stage)) in self.ups.iter().zip(&self.blocks).enumerate() {
            h = up.forward(&h)?;
            if let (GenCond::Table(tables), Some(rows)) = (&self.cond, &table_rows) {
                h = tables[s].apply(&h, rows)?;
            }
            for rb in stage {
                h = rb.forward(&h, f_beta.as_ref())?;
            }
        }
        Ok(h.affine(255.0, 0.0)?)
    }

    /// Receiver-side decode of a quantized latent at one realism weight.
    pub fn generate(&self, y_hat: &Tensor, beta: RealismWeight) -> Result<Tensor> {
        self.forward(y_hat, &[beta.value()])
    }
}

/// HiFiC-style conditional patch discriminator.
#[derive(Clone, Debug)]
pub struct Discriminator {
    latent_proj: Conv2d,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let latent_proj = Conv2d::new(
            store,
            &join(prefix, "latent_proj"),
            cfg.latent_channels,
            cfg.disc_latent_channels,
            1,
            1,
        )?;
        let mut convs = Vec::new();
        let mut in_ch = 3 + cfg.disc_latent_channels;
        for (i, &ch) in cfg.disc_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &join(prefix, &format!("conv{i}")), in_ch, ch, 3, 2)?);
            in_ch = ch;
        }
        let head = Conv2d::new(store, &join(prefix, "head"), in_ch, 1, 1, 1)?;
        Ok(Discriminator {
            latent_proj,
            convs,
            head,
        })
    }

    /// Patch logits `(B, 1, h, w)`.
    pub fn logits(&self, y_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (yb, _, yh, yw) = y_hat.dims4()?;
        let (xb, xc, xh, xw) = x.dims4()?;
        if yb != xb || xc != 3 || xh != 16 * yh || xw != 16 * yw {
            return Err(Error::Shape(format!(
                "discriminator conditioning ({yb}, .., {yh}, {yw}) does not match image ({xb}, {xc}, {xh}, {xw})"
            )));
        }
        let cond = leaky_relu(&self.latent_proj.forward(y_hat)?, 0.2)?.upsample_nearest2d(xh, xw)?;
        let img = x.affine(1.0 / 127.5, -1.0)?;
        let mut h = Tensor::cat(&[&img, &cond], 1)?;
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        self.head.forward(&h)
    }

    /// Per-patch probabilities in (0, 1).
    pub fn forward(&self, y_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(y_hat, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn desk_encoder_with(m: usize) -> (ParamStore, Encoder) {
        let cfg = ModelConfig {
            latent_channels: m,
            encoder_channels: 8,
            ..ModelConfig::desk()
        };
        let mut s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let e = Encoder::new(&mut s, "enc", &cfg).unwrap();
        (s, e)
    }

    fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 3 * h * w).map(|_| rng.gen_range(0.0..255.0)).collect();
        Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn encoder_shapes() {
        let (_, e) = desk_encoder_with(192);
        assert_eq!(e.forward(&image(1, 64, 64, 0)).unwrap().dims(), &[1, 192, 4, 4]);
        assert_eq!(e.forward(&image(1, 128, 64, 0)).unwrap().dims(), &[1, 192, 8, 4]);
        assert!(e.forward(&image(1, 60, 64, 0)).is_err());
    }

    #[test]
    fn encoder_deterministic() {
        let (_, e) = desk_encoder_with(16);
        let x = image(1, 32, 32, 1);
        let a = e.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = e.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generator_shape_and_zero_init_beta_agnostic() {
        let cfg = ModelConfig::tiny();
        let mut s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let g = Generator::new(&mut s, "gen", &cfg).unwrap();
        let y = Tensor::randn(0f32, 3.0, (1, cfg.latent_channels, 4, 4), &Device::Cpu).unwrap().round().unwrap();
        let a = g.generate(&y, RealismWeight::infer(0.0).unwrap()).unwrap();
        let b = g.generate(&y, RealismWeight::infer(2.56).unwrap()).unwrap();
        assert_eq!(a.dims(), &[1, 3, 64, 64]);
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn generator_depends_on_beta_once_projections_move() {
        for cond in [CondScheme::Fourier, CondScheme::Table] {
            let cfg = ModelConfig { cond, ..ModelConfig::tiny() };
            let mut s = ParamStore::new(0, DType::F32, &Device::Cpu);
            let g = Generator::new(&mut s, "gen", &cfg).unwrap();
            for (name, var) in s.vars() {
                if name.contains("proj") || name.contains("table") {
                    var.set(&Tensor::randn(0f32, 0.5, var.dims(), &Device::Cpu).unwrap()).unwrap();
                }
            }
            let y = Tensor::randn(0f32, 3.0, (1, 4, 2, 2), &Device::Cpu).unwrap();
            let a = g.forward(&y, &[0.0]).unwrap();
            let b = g.forward(&y, &[2.56]).unwrap();
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff > 0.0, "{cond:?}");
        }
    }

    #[test]
    fn discriminator_is_patchwise_probability() {
        let cfg = ModelConfig::tiny();
        let mut s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let d = Discriminator::new(&mut s, "disc", &cfg).unwrap();
        let y = Tensor::randn(0f32, 2.0, (3, 4, 2, 2), &Device::Cpu).unwrap();
        let x = image(3, 32, 32, 2);
        let p = d.forward(&y, &x).unwrap();
        assert_eq!(p.dims(), &[3, 1, 8, 8]);
        let v = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&e| e > 0.0 && e < 1.0));
        // batch equivariance
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let pp = d
            .forward(&y.index_select(&perm, 0).unwrap(), &x.index_select(&perm, 0).unwrap())
            .unwrap();
        let expect = p.index_select(&perm, 0).unwrap();
        let diff = (pp - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6);
        assert!(d.forward(&y, &image(3, 48, 32, 0)).is_err());
    }
}
