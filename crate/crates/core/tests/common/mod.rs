#![allow(dead_code)]

use candle_core::Device;
use mrc_core::config::ModelConfig;
use mrc_core::data::Dataset;
use mrc_core::model::CodecModel;
use mrc_core::synthetic::synthetic_set;
use mrc_core::trainer::{BetaMode, TrainConfig, Trainer};

/// Tiny model, sampled β, a learning rate high enough to move the β
/// projections within a few hundred steps.
pub fn toy_config(steps: u64) -> TrainConfig {
    TrainConfig {
        name: "toy".into(),
        total_steps: steps,
        batch_size: 4,
        crop: 32,
        lr: 1e-3,
        beta_mode: BetaMode::Sampled,
        log_every: 50,
        checkpoint_every: steps,
        ..TrainConfig::tiny()
    }
}

pub fn toy_dataset() -> Dataset {
    Dataset::from_images(synthetic_set(16, 64, 64, 1000)).unwrap()
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> (CodecModel, Vec<f64>) {
    let mut t = Trainer::new(cfg, &Device::Cpu).unwrap();
    let mut totals = Vec::new();
    while t.step() < cfg.total_steps {
        totals.push(t.step_on(data).unwrap().total_egd);
    }
    let model = t.checkpoint().unwrap().build_model(false, &Device::Cpu).unwrap();
    (model, totals)
}

pub fn toy_model() -> CodecModel {
    train(&toy_config(400), &toy_dataset()).0
}

pub fn untrained(cfg: &ModelConfig, seed: u64) -> CodecModel {
    CodecModel::new(cfg, seed, false, candle_core::DType::F32, &Device::Cpu).unwrap()
}
