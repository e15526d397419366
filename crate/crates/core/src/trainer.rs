//! Joint optimization of E, the entropy model and G against D.
//!
//! One generator-side update and one discriminator update per step, on the
//! same batch. Every random draw of step `k` (crops, β, quantization noise)
//! comes from a ChaCha8 stream keyed by `(seed, k)`, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conditioning::{table_index, CondScheme, BETA_GRID, BETA_MAX_INFER, BETA_MAX_TRAIN};
use crate::config::{EntropyKind, ModelConfig};
use crate::data::{images_to_tensor, Dataset, ResizeRange};
use crate::entropy::uniform_noise;
use crate::error::{Error, Result};
use crate::losses::{
    gan_d_tensor, gan_g_per_example, lambda_prime, mse_per_example, sample_betas, scalar,
    BetaSampling, LossBreakdown, PerceptualWeight,
};
use crate::model::{CodecModel, LatentNoise, TrainForward, TrainQuant};
use crate::perceptual::PerceptualMetric;

/// λ values of the four-point rate sweep, highest rate first.
pub const LAMBDA_GRID: [f64; 4] = [0.32, 0.08, 0.02, 0.005];

/// `C_P` used with the coupled weight `β C_P`, chosen so that `β C_P = 4.26`
/// at the largest inference β.
pub const C_P_COUPLED: f64 = 4.26 / BETA_MAX_INFER;

/// Decoupled perceptual weights of the ablation sweep.
pub const C_P_PRIME_GRID: [f64; 5] = [0.0, 1.0, 2.0, 4.26, 8.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BetaMode {
    Fixed(f64),
    /// `β ~ U(0, 5.12)`.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub crop: u32,
    pub lambda: f64,
    /// Written into bitstream headers to identify the rate point.
    pub rate_label: u8,
    pub lr: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub precision: Precision,
    pub beta_sampling: BetaSampling,
    pub beta_mode: BetaMode,
    pub perceptual_weight: PerceptualWeight,
    pub resize: ResizeRange,
    pub model: ModelConfig,
}

impl TrainConfig {
    fn base(name: &str, model: ModelConfig) -> Self {
        TrainConfig {
            name: name.to_string(),
            seed: 0,
            total_steps: 200_000,
            batch_size: 8,
            crop: 64,
            lambda: LAMBDA_GRID[2],
            rate_label: 2,
            lr: 1e-4,
            warmup_frac: 0.15,
            decay_frac: 0.15,
            grad_clip: 1.0,
            checkpoint_every: 10_000,
            log_every: 100,
            precision: Precision::F32,
            beta_sampling: BetaSampling::PerExample,
            beta_mode: BetaMode::Sampled,
            perceptual_weight: PerceptualWeight::Coupled(C_P_COUPLED),
            resize: ResizeRange::default(),
            model,
        }
    }

    /// Rate-distortion only: β ≡ 0, no discriminator.
    pub fn mse_baseline() -> Self {
        TrainConfig {
            beta_mode: BetaMode::Fixed(0.0),
            model: ModelConfig { cond: CondScheme::None, ..ModelConfig::desk() },
            ..Self::base("mse_baseline", ModelConfig::desk())
        }
    }

    /// Single-realism GAN codec at β = 2.56.
    pub fn gan_baseline() -> Self {
        TrainConfig {
            beta_mode: BetaMode::Fixed(BETA_MAX_INFER),
            model: ModelConfig { cond: CondScheme::None, ..ModelConfig::desk() },
            ..Self::base("gan_baseline", ModelConfig::desk())
        }
    }

    /// β ~ U(0, 5.12) with Fourier conditioning.
    pub fn multi_realism() -> Self {
        Self::base("multi_realism", ModelConfig::desk())
    }

    /// β ~ U(0, 5.12) with per-grid-point lookup tables.
    pub fn multi_realism_table() -> Self {
        Self::base(
            "multi_realism_table",
            ModelConfig { cond: CondScheme::Table, ..ModelConfig::desk() },
        )
    }

    /// 20k-step smoke configuration on the small model.
    pub fn smoke(cond: CondScheme) -> Self {
        let name = match cond {
            CondScheme::Fourier => "smoke_fourier",
            CondScheme::Table => "smoke_table",
            CondScheme::None => "smoke_none",
        };
        TrainConfig {
            total_steps: 20_000,
            batch_size: 4,
            crop: 64,
            checkpoint_every: 5_000,
            log_every: 50,
            ..Self::base(name, ModelConfig { cond, ..ModelConfig::smoke() })
        }
    }

    /// Tiny model on 16x16 crops; seconds per hundred steps.
    pub fn tiny() -> Self {
        TrainConfig {
            total_steps: 100,
            batch_size: 2,
            crop: 16,
            checkpoint_every: 50,
            log_every: 1,
            ..Self::base("tiny", ModelConfig::tiny())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive");
        }
        if self.crop == 0 || self.crop % self.model.pad_multiple() != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of {}",
                self.crop,
                self.model.pad_multiple()
            )));
        }
        for (name, f) in [("warmup_frac", self.warmup_frac), ("decay_frac", self.decay_frac)] {
            if !(f > 0.0 && f < 0.5) {
                return Err(Error::Config(format!("{name} must be in (0, 0.5)")));
            }
        }
        if !(self.lambda >= 0.0 && self.lr > 0.0 && self.grad_clip > 0.0) {
            return bad("lambda must be nonnegative, lr and grad_clip positive");
        }
        if let BetaMode::Fixed(b) = self.beta_mode {
            if !(0.0..=BETA_MAX_TRAIN).contains(&b) {
                return bad("fixed beta outside [0, 5.12]");
            }
        }
        let pw = match self.perceptual_weight {
            PerceptualWeight::Coupled(c) | PerceptualWeight::Decoupled(c) => c,
        };
        if !(pw >= 0.0) {
            return bad("perceptual weight must be nonnegative");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive");
        }
        Ok(())
    }

    /// A discriminator is only needed if some β can be positive.
    pub fn uses_discriminator(&self) -> bool {
        !matches!(self.beta_mode, BetaMode::Fixed(b) if b == 0.0)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First step trained with the configured λ (earlier steps use 10 λ).
    pub fn warmup_end(&self) -> u64 {
        (self.warmup_frac * self.total_steps as f64 - 1e-9).ceil() as u64
    }

    /// First step trained with the decayed learning rate.
    pub fn decay_start(&self) -> u64 {
        ((1.0 - self.decay_frac) * self.total_steps as f64 + 1e-9).floor() as u64
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        if step < self.warmup_end() {
            10.0 * self.lambda
        } else {
            self.lambda
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.decay_start() {
            self.lr / 10.0
        } else {
            self.lr
        }
    }
}

/// Names accepted by [`preset`], ablation runs excluded.
pub const PRESET_NAMES: [&str; 7] = [
    "mse_baseline",
    "gan_baseline",
    "multi_realism",
    "multi_realism_table",
    "smoke_fourier",
    "smoke_table",
    "tiny",
];

/// A named configuration: one of [`PRESET_NAMES`] or an ablation run name.
pub fn preset(name: &str) -> Option<TrainConfig> {
    let cfg = match name {
        "mse_baseline" => TrainConfig::mse_baseline(),
        "gan_baseline" => TrainConfig::gan_baseline(),
        "multi_realism" => TrainConfig::multi_realism(),
        "multi_realism_table" => TrainConfig::multi_realism_table(),
        "smoke_fourier" => TrainConfig::smoke(CondScheme::Fourier),
        "smoke_table" => TrainConfig::smoke(CondScheme::Table),
        "tiny" => TrainConfig::tiny(),
        other => return ablation_grid().into_iter().find(|c| c.name == other),
    };
    Some(cfg)
}

/// The sweep axes of the ablation study, for both entropy models: β over the
/// grid with `C_P' = 4.26`, then `C_P'` over its grid with β = 2.56.
pub fn ablation_grid() -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for (tag, entropy) in [("charm", EntropyKind::Charm), ("hyperprior", EntropyKind::Hyperprior)] {
        let model = ModelConfig { entropy, cond: CondScheme::None, ..ModelConfig::desk() };
        for beta in BETA_GRID {
            out.push(TrainConfig {
                beta_mode: BetaMode::Fixed(beta),
                perceptual_weight: PerceptualWeight::Decoupled(4.26),
                ..TrainConfig::base(&format!("ablation_{tag}_beta{beta}"), model.clone())
            });
        }
        for c in C_P_PRIME_GRID {
            out.push(TrainConfig {
                beta_mode: BetaMode::Fixed(BETA_MAX_INFER),
                perceptual_weight: PerceptualWeight::Decoupled(c),
                ..TrainConfig::base(&format!("ablation_{tag}_cp{c}"), model.clone())
            });
        }
    }
    out
}

/// Adam with (0.9, 0.999, 1e-8) and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let mut sq = 0.0;
        let present: Vec<(&String, &Var, &Tensor)> = params
            .iter()
            .filter_map(|(k, v)| grads.get(v.as_tensor()).map(|g| (k, v, g)))
            .collect();
        for (_, _, g) in &present {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.t,
                detail: "non-finite gradient norm".into(),
            });
        }
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var, g) in present {
            // Detached, or each step's moments would keep the previous graph alive.
            let g = g.detach().affine(scale, 0.0)?;
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }

    fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (k, t) in &self.m {
            out.insert(format!("{prefix}.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}.v.{k}"), t.clone());
        }
    }

    fn import(t: u64, ck: &Checkpoint, prefix: &str) -> Self {
        Adam {
            t,
            m: ck.group(&format!("{prefix}.m.")),
            v: ck.group(&format!("{prefix}.v.")),
            ..Adam::default()
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lambda_eff: f64,
    pub lr: f64,
    pub mean_beta: f64,
    pub rate_bpp: f64,
    pub distortion_d: f64,
    pub adversarial_g: f64,
    pub perceptual: f64,
    pub discriminator_loss: f64,
    pub total_egd: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

impl StepRecord {
    fn new(step: u64, lambda_eff: f64, lr: f64, mean_beta: f64, l: LossBreakdown, gn: f64, dn: f64) -> Self {
        StepRecord {
            step,
            lambda_eff,
            lr,
            mean_beta,
            rate_bpp: l.rate_bits_per_pixel,
            distortion_d: l.distortion_d,
            adversarial_g: l.adversarial_g,
            perceptual: l.perceptual,
            discriminator_loss: l.discriminator_loss,
            total_egd: l.total_egd,
            grad_norm_g: gn,
            grad_norm_d: dn,
        }
    }

    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            rate_bits_per_pixel: self.rate_bpp,
            distortion_d: self.distortion_d,
            adversarial_g: self.adversarial_g,
            perceptual: self.perceptual,
            discriminator_loss: self.discriminator_loss,
            total_egd: self.total_egd,
        }
    }
}

/// Generator-side objective and the tensors the discriminator step reuses.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub forward: TrainForward,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: CodecModel,
    perceptual: PerceptualMetric,
    opt_g: Adam,
    opt_d: Option<Adam>,
    step: u64,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let with_disc = cfg.uses_discriminator();
        let model = CodecModel::new(&cfg.model, cfg.seed, with_disc, dtype, device)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            perceptual: PerceptualMetric::new(dtype, device)?,
            opt_g: Adam::default(),
            opt_d: with_disc.then(Adam::default),
            step: 0,
            dump_dir: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_value(
            ck.header
                .extra
                .get("train_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?,
        )?;
        cfg.validate()?;
        let model = ck.build_model(cfg.uses_discriminator(), device)?;
        if cfg.uses_discriminator() && model.disc_store().is_none() {
            return Err(Error::Checkpoint("discriminator weights missing".into()));
        }
        let counter = |k: &str| ck.header.extra.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(Trainer {
            perceptual: PerceptualMetric::new(cfg.precision.dtype(), device)?,
            opt_g: Adam::import(counter("opt_g_t"), ck, "opt_g"),
            opt_d: cfg
                .uses_discriminator()
                .then(|| Adam::import(counter("opt_d_t"), ck, "opt_d")),
            step: ck.header.step,
            dump_dir: None,
            cfg,
            model,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = BTreeMap::new();
        self.opt_g.export("opt_g", &mut extra);
        if let Some(d) = &self.opt_d {
            d.export("opt_d", &mut extra);
        }
        let meta = serde_json::json!({
            "train_config": self.cfg,
            "rate_label": self.cfg.rate_label,
            "opt_g_t": self.opt_g.steps_taken(),
            "opt_d_t": self.opt_d.as_ref().map_or(0, |d| d.steps_taken()),
        });
        Checkpoint::from_model(&self.model, self.step, self.cfg.seed, extra, meta)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn perceptual_metric(&self) -> &PerceptualMetric {
        &self.perceptual
    }

    /// Next step to run (= steps completed).
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    /// Random stream for step `step`.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        rng
    }

    /// Per-example β for a batch; Table conditioning snaps to its grid so the
    /// loss weight matches the table row actually used.
    pub fn draw_betas(&self, rng: &mut ChaCha8Rng, batch: usize) -> Result<Vec<f64>> {
        let raw = match self.cfg.beta_mode {
            BetaMode::Fixed(b) => vec![b; batch],
            BetaMode::Sampled => sample_betas(rng, batch, self.cfg.beta_sampling),
        };
        if self.cfg.model.cond == CondScheme::Table {
            raw.iter()
                .map(|&b| Ok(BETA_GRID[table_index(&BETA_GRID, b, true)?]))
                .collect()
        } else {
            Ok(raw)
        }
    }

    pub fn draw_noise(&self, rng: &mut ChaCha8Rng, batch: usize, h: usize, w: usize) -> Result<LatentNoise> {
        let m = &self.cfg.model;
        let dtype = self.model.dtype();
        let device = self.model.device().clone();
        let (lh, lw) = (h / 16, w / 16);
        let zs = 1usize << m.hyper_downsamples;
        Ok(LatentNoise {
            y: uniform_noise(&[batch, m.latent_channels, lh, lw], dtype, &device, rng)?,
            z: uniform_noise(&[batch, m.hyper_latent_channels, lh / zs, lw / zs], dtype, &device, rng)?,
        })
    }

    /// Generator-side objective
    /// `λ'·bpp + MSE/100 + mean_b[β_b L_G,b] + mean_b[w_P(β_b) L_P,b]`.
    pub fn generator_loss(
        &self,
        x: &Tensor,
        betas: &[f64],
        lambda: f64,
        quant: TrainQuant,
        noise: Option<&LatentNoise>,
    ) -> Result<GeneratorLoss> {
        self.generator_loss_with(x, betas, lambda, quant, noise, None)
    }

    /// [`Self::generator_loss`] with the latent that conditions D given
    /// explicitly. By default it is this pass's ŷ, detached: D's latent input
    /// passes no gradient to the encoder, so a finite-difference check of the
    /// analytic gradient must hold it fixed too.
    pub fn generator_loss_with(
        &self,
        x: &Tensor,
        betas: &[f64],
        lambda: f64,
        quant: TrainQuant,
        noise: Option<&LatentNoise>,
        disc_latent: Option<&Tensor>,
    ) -> Result<GeneratorLoss> {
        let (b, _, h, w) = x.dims4()?;
        if betas.len() != b {
            return Err(Error::Shape(format!("{} betas for batch of {b}", betas.len())));
        }
        let fwd = self.model.forward_train(x, betas, quant, noise)?;
        let device = x.device();
        let dtype = x.dtype();
        let bpp = ((&fwd.bits_y + &fwd.bits_z)? / (h * w) as f64)?;
        let rate = bpp.mean_all()?;
        let dist = mse_per_example(x, &fwd.x_hat)?.affine(0.01, 0.0)?.mean_all()?;
        let mut total = (rate.affine(lambda_prime(lambda), 0.0)? + &dist)?;
        let mut breakdown = LossBreakdown {
            rate_bits_per_pixel: scalar(&rate)?,
            distortion_d: scalar(&dist)?,
            ..LossBreakdown::default()
        };
        let to_vec = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, b, device)?.to_dtype(dtype)?) };
        if let Some(disc) = self.model.discriminator() {
            if betas.iter().any(|&v| v > 0.0) {
                let cond = match disc_latent {
                    Some(y) => y.detach(),
                    None => fwd.y_hat.detach(),
                };
                let d_fake = disc.forward(&cond, &fwd.x_hat)?;
                let adv = gan_g_per_example(&d_fake)?;
                breakdown.adversarial_g = scalar(&adv.mean_all()?)?;
                total = (total + (adv * to_vec(betas.to_vec())?)?.mean_all()?)?;
            }
        }
        let weights: Vec<f64> = betas.iter().map(|&v| self.cfg.perceptual_weight.weight(v)).collect();
        if weights.iter().any(|&v| v > 0.0) {
            let perc = self.perceptual.distance(x, &fwd.x_hat)?;
            breakdown.perceptual = scalar(&perc.mean_all()?)?;
            total = (total + (perc * to_vec(weights)?)?.mean_all()?)?;
        }
        breakdown.total_egd = scalar(&total)?;
        Ok(GeneratorLoss {
            total,
            breakdown,
            forward: fwd,
        })
    }

    /// `L_D` on the reconstructions of a generator pass (no gradient into G).
    pub fn discriminator_loss(&self, x: &Tensor, fwd: &TrainForward) -> Result<Option<Tensor>> {
        let Some(disc) = self.model.discriminator() else {
            return Ok(None);
        };
        let y = fwd.y_hat.detach();
        let d_fake = disc.forward(&y, &fwd.x_hat.detach())?;
        let d_real = disc.forward(&y, x)?;
        Ok(Some(gan_d_tensor(&d_fake, &d_real)?))
    }

    fn fail(&self, betas: &[f64], breakdown: &LossBreakdown, what: &str) -> Error {
        let detail = format!("{what}; losses {breakdown:?}; betas {betas:?}");
        if let Some(dir) = &self.dump_dir {
            let dump = serde_json::json!({
                "step": self.step,
                "what": what,
                "losses": breakdown,
                "betas": betas,
                "config": self.cfg,
            });
            let path = dir.join(format!("nonfinite-step{}.json", self.step));
            if let Err(e) = fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default()) {
                log::error!("could not write diagnostic dump {}: {e}", path.display());
            }
        }
        Error::NonFiniteLoss {
            step: self.step,
            detail,
        }
    }

    /// One G update and one D update on an explicit batch.
    pub fn train_step(&mut self, x: &Tensor, betas: &[f64], noise: &LatentNoise) -> Result<StepRecord> {
        let step = self.step;
        let lambda = self.cfg.lambda_at(step);
        let lr = self.cfg.lr_at(step);
        let g = self.generator_loss(x, betas, lambda, TrainQuant::Mixed, Some(noise))?;
        let mut breakdown = g.breakdown;
        if !breakdown.total_egd.is_finite() {
            return Err(self.fail(betas, &breakdown, "non-finite generator loss"));
        }
        let grads = g.total.backward()?;
        let gn = self.opt_g.step(self.model.store().vars(), &grads, lr, self.cfg.grad_clip)?;
        let mut dn = 0.0;
        if let Some(ld) = self.discriminator_loss(x, &g.forward)? {
            breakdown.discriminator_loss = scalar(&ld)?;
            if !breakdown.discriminator_loss.is_finite() {
                return Err(self.fail(betas, &breakdown, "non-finite discriminator loss"));
            }
            let grads = ld.backward()?;
            let (ds, opt) = (self.model.disc_store().expect("disc"), self.opt_d.as_mut().expect("opt_d"));
            dn = opt.step(ds.vars(), &grads, lr, self.cfg.grad_clip)?;
        }
        self.step += 1;
        let mean_beta = betas.iter().sum::<f64>() / betas.len() as f64;
        Ok(StepRecord::new(step, lambda, lr, mean_beta, breakdown, gn, dn))
    }

    /// Draws the step's batch, β and noise from the step stream, then trains.
    pub fn step_on(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let mut rng = self.step_rng(self.step);
        let crops = dataset.sample_batch(self.cfg.batch_size, self.cfg.crop, self.cfg.resize, &mut rng)?;
        let images: Vec<_> = crops.into_iter().map(|c| c.crop).collect();
        let x = images_to_tensor(&images, self.model.dtype(), self.model.device())?;
        let betas = self.draw_betas(&mut rng, self.cfg.batch_size)?;
        let side = self.cfg.crop as usize;
        let noise = self.draw_noise(&mut rng, self.cfg.batch_size, side, side)?;
        self.train_step(&x, &betas, &noise)
    }
}

pub const METRICS_HEADER: &str =
    "step,lambda_eff,lr,mean_beta,rate_bpp,distortion_d,adversarial_g,perceptual,discriminator_loss,total_egd,grad_norm_g,grad_norm_d";

fn csv_row(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.lambda_eff,
        r.lr,
        r.mean_beta,
        r.rate_bpp,
        r.distortion_d,
        r.adversarial_g,
        r.perceptual,
        r.discriminator_loss,
        r.total_egd,
        r.grad_norm_g,
        r.grad_norm_d
    )
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:08}.mrcm")
}

/// Most recent `ckpt-*.mrcm` in `dir`.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(num) = name.strip_prefix("ckpt-").and_then(|n| n.strip_suffix(".mrcm")) else { continue };
        if let Ok(step) = num.parse::<u64>() {
            if best.as_ref().map_or(true, |(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Records of the steps run by this call (not earlier, resumed ones).
    pub records: Vec<StepRecord>,
}

/// Trains `cfg` on `dataset` in `runs_root/<name>/`, resuming from the
/// latest checkpoint there if one exists. Writes `config.toml`,
/// `metrics.csv` and `ckpt-<step>.mrcm` files.
pub fn run_experiment(cfg: &TrainConfig, dataset: &Dataset, runs_root: impl AsRef<Path>, device: &Device) -> Result<RunOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let dir = runs_root.as_ref().join(&cfg.name);
    fs::create_dir_all(&dir)?;
    let mut trainer = match latest_checkpoint(&dir)? {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(&path, device)?, device)?;
            if t.config() != cfg {
                return Err(Error::Config(format!(
                    "{} holds a run with a different configuration",
                    dir.display()
                )));
            }
            log::info!("resuming {} from step {}", cfg.name, t.step());
            t
        }
        None => Trainer::new(cfg, device)?,
    };
    trainer.set_dump_dir(&dir);
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let metrics_path = dir.join("metrics.csv");
    let resumed = trainer.step() > 0;
    let mut metrics = if resumed && metrics_path.exists() {
        // Drop rows past the checkpoint so the log matches the state.
        let keep: Vec<StepRecord> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step < trainer.step())
            .collect();
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        for r in &keep {
            writeln!(f, "{}", csv_row(r))?;
        }
        f
    } else {
        let mut f = fs::File::create(&metrics_path)?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };
    let mut records = Vec::new();
    let mut last_ckpt = None;
    while trainer.step() < cfg.total_steps {
        let rec = trainer.step_on(dataset)?;
        if rec.step % cfg.log_every == 0 || rec.step + 1 == cfg.total_steps {
            writeln!(metrics, "{}", csv_row(&rec))?;
            log::info!(
                "{} step {} total {:.4} bpp {:.4} d {:.4}",
                cfg.name,
                rec.step,
                rec.total_egd,
                rec.rate_bpp,
                rec.distortion_d
            );
        }
        records.push(rec);
        let done = trainer.step();
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            let path = dir.join(checkpoint_name(done));
            trainer.checkpoint()?.save(&path)?;
            last_ckpt = Some(path);
        }
    }
    metrics.flush()?;
    let checkpoint = match last_ckpt {
        Some(p) => p,
        None => latest_checkpoint(&dir)?.ok_or_else(|| Error::Checkpoint("no checkpoint written".into()))?,
    };
    Ok(RunOutcome {
        dir,
        checkpoint,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_by_name() {
        for name in PRESET_NAMES {
            assert_eq!(preset(name).unwrap().name, name);
        }
        let abl = &ablation_grid()[3];
        assert_eq!(preset(&abl.name).as_ref(), Some(abl));
        assert!(preset("nope").is_none());
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = TrainConfig { total_steps: 100, ..TrainConfig::tiny() };
        assert_eq!(cfg.warmup_end(), 15);
        assert_eq!(cfg.decay_start(), 85);
        assert_eq!(cfg.lambda_at(0), 10.0 * cfg.lambda);
        assert_eq!(cfg.lambda_at(14), 10.0 * cfg.lambda);
        assert_eq!(cfg.lambda_at(15), cfg.lambda);
        assert_eq!(cfg.lr_at(84), 1e-4);
        assert_eq!(cfg.lr_at(85), 1e-5);
        let odd = TrainConfig { total_steps: 7, ..TrainConfig::tiny() };
        assert_eq!(odd.warmup_end(), 2);
        assert_eq!(odd.decay_start(), 5);
    }

    #[test]
    fn presets() {
        let mse = TrainConfig::mse_baseline();
        assert!(!mse.uses_discriminator());
        assert_eq!(TrainConfig::gan_baseline().beta_mode, BetaMode::Fixed(2.56));
        let mr = TrainConfig::multi_realism();
        assert_eq!(mr.beta_mode, BetaMode::Sampled);
        assert_eq!(mr.model.cond, CondScheme::Fourier);
        assert_eq!(mr.crop, 64);
        for cfg in [mse, mr, TrainConfig::multi_realism_table(), TrainConfig::smoke(CondScheme::Table), TrainConfig::tiny()] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = TrainConfig::multi_realism_table();
        let s = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&s).unwrap(), cfg);
        let bad = TrainConfig { warmup_frac: 0.6, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ablation_axes() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 26);
        let betas: Vec<f64> = grid
            .iter()
            .filter(|c| c.name.starts_with("ablation_charm_beta"))
            .map(|c| match c.beta_mode {
                BetaMode::Fixed(b) => b,
                BetaMode::Sampled => f64::NAN,
            })
            .collect();
        assert_eq!(betas.len(), 8);
        assert_eq!(*betas.last().unwrap(), 5.12);
        assert!(grid.iter().any(|c| c.perceptual_weight == PerceptualWeight::Decoupled(4.26)));
        assert!(grid.iter().any(|c| c.model.entropy == EntropyKind::Hyperprior));
        for c in &grid {
            c.validate().unwrap();
        }
    }

    #[test]
    fn adam_matches_hand_computation() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), x.clone());
        let mut opt = Adam::default();
        // loss = sum(x^2): gradient 2x; first Adam step moves each coordinate by lr.
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let norm = opt.step(&params, &grads, 0.1, 100.0).unwrap();
        assert!((norm - 20f64.sqrt()).abs() < 1e-12);
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn optimizer_state_holds_no_graph() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let params = BTreeMap::from([("x".to_string(), x.clone())]);
        let mut opt = Adam::default();
        for _ in 0..3 {
            let loss = (x.as_tensor().sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
            opt.step(&params, &loss.backward().unwrap(), 0.1, 100.0).unwrap();
        }
        assert!(opt.m.values().chain(opt.v.values()).all(|t| !t.track_op()));
    }
}
