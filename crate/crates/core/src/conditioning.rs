//! Realism-weight conditioning for the generator.
//!
//! Two schemes turn the scalar β into per-layer modulation:
//!
//! * Fourier: β is normalized by the training maximum, embedded with
//!   sin/cos features at `L` octaves, passed through a 2-layer MLP, and
//!   projected per conv layer to a channel offset added after the conv.
//! * Table: a learned `(scale, bias)` row per grid value of β is applied to
//!   the output of each non-residual conv.
//!
//! For a fixed β both reduce to a fixed affine change of the conv output.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, Linear, ParamStore};

pub const BETA_MAX_TRAIN: f64 = 5.12;
pub const BETA_MAX_INFER: f64 = 2.56;
pub const FOURIER_LEVELS: usize = 10;
pub const BETA_FEATURE_DIM: usize = 512;

/// Grid used by the table scheme and by the β ablation sweep.
pub const BETA_GRID: [f64; 8] = [0.0, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56, 5.12];

/// Realism weight β. Construction validates the range for its use.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RealismWeight(f64);

impl RealismWeight {
    /// Valid for training: `0 <= β <= 5.12`.
    pub fn train(beta: f64) -> Result<Self> {
        Self::checked(beta, BETA_MAX_TRAIN)
    }

    /// Valid for decoding: `0 <= β <= 2.56`.
    pub fn infer(beta: f64) -> Result<Self> {
        Self::checked(beta, BETA_MAX_INFER)
    }

    fn checked(beta: f64, max: f64) -> Result<Self> {
        if beta.is_finite() && (0.0..=max).contains(&beta) {
            Ok(RealismWeight(beta))
        } else {
            Err(Error::OutOfRange(format!("beta {beta} outside [0, {max}]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// NeRF-style positional encoding of `t = β / β_max_train`:
/// `(sin(2^0 π t), cos(2^0 π t), ..., sin(2^(L-1) π t), cos(2^(L-1) π t))`.
pub fn fourier_embed(beta: f64, levels: usize) -> Vec<f64> {
    let t = beta / BETA_MAX_TRAIN;
    let mut out = Vec::with_capacity(2 * levels);
    for k in 0..levels {
        let arg = (1u64 << k) as f64 * std::f64::consts::PI * t;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Which conditioning the generator uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondScheme {
    Fourier,
    Table,
    None,
}

/// `f(β) = MLP(Fourier(β))`, shared by every conditioned layer.
#[derive(Clone, Debug)]
pub struct BetaMlp {
    levels: usize,
    dense1: Linear,
    dense2: Linear,
}

impl BetaMlp {
    pub fn new(store: &mut ParamStore, prefix: &str, levels: usize, width: usize) -> Result<Self> {
        Ok(BetaMlp {
            levels,
            dense1: Linear::new(store, &join(prefix, "dense1"), 2 * levels, width, true, None)?,
            dense2: Linear::new(store, &join(prefix, "dense2"), width, width, true, None)?,
        })
    }

    pub fn width(&self) -> usize {
        self.dense2.out_dim()
    }

    /// Features for a batch of β values, shape `(B, width)`.
    pub fn features(&self, betas: &[f64]) -> Result<Tensor> {
        let store_dtype = self.dense1.weight().dtype();
        let device = self.dense1.weight().device();
        let emb: Vec<f64> = betas
            .iter()
            .flat_map(|&b| fourier_embed(b, self.levels))
            .collect();
        let emb = Tensor::from_vec(emb, (betas.len(), 2 * self.levels), device)?
            .to_dtype(store_dtype)?;
        let h = self.dense1.forward(&emb)?.relu()?;
        self.dense2.forward(&h)
    }
}

/// Learned per-layer projection `W_i: R^width -> R^{C_i}`, zero-initialized.
#[derive(Clone, Debug)]
pub struct LayerProjection {
    proj: Linear,
}

impl LayerProjection {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, channels: usize) -> Result<Self> {
        Ok(LayerProjection {
            proj: Linear::new(store, prefix, width, channels, false, Some(Init::Zeros))?,
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.out_dim()
    }

    /// `(B, width) -> (B, C_i)`.
    pub fn project(&self, f_beta: &Tensor) -> Result<Tensor> {
        self.proj.forward(f_beta)
    }
}

/// Adds a per-example, per-channel offset `(B, C)` to a `(B, C, H, W)` map.
pub fn add_channel_offset(layer_out: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = layer_out.dims4()?;
    let (ob, oc) = offset.dims2()?;
    if oc != c || (ob != b && ob != 1) {
        return Err(Error::Shape(format!(
            "offset ({ob}, {oc}) does not match feature map ({b}, {c}, ..)"
        )));
    }
    Ok(layer_out.broadcast_add(&offset.reshape((ob, oc, 1, 1))?)?)
}

/// `layer_out + broadcast(W_i f(β))`.
pub fn apply_fourier_cond(
    layer_out: &Tensor,
    f_beta: &Tensor,
    projection: &LayerProjection,
) -> Result<Tensor> {
    let (_, c, _, _) = layer_out.dims4()?;
    if projection.channels() != c {
        return Err(Error::Shape(format!(
            "projection has {} channels, layer has {c}",
            projection.channels()
        )));
    }
    add_channel_offset(layer_out, &projection.project(f_beta)?)
}

/// Maps β to a grid index. Exact keys always match; off-grid values snap to
/// the nearest key (ties go to the lower key) when `snap` is set.
pub fn table_index(grid: &[f64], beta: f64, snap: bool) -> Result<usize> {
    if let Some(i) = grid.iter().position(|&k| (k - beta).abs() < 1e-9) {
        return Ok(i);
    }
    if !snap {
        return Err(Error::OutOfRange(format!(
            "beta {beta} is not on the conditioning grid"
        )));
    }
    let mut best = 0;
    for (i, &k) in grid.iter().enumerate() {
        if (k - beta).abs() < (grid[best] - beta).abs() {
            best = i;
        }
    }
    Ok(best)
}

/// Per-conv lookup table of channel scales and biases indexed by β.
#[derive(Clone, Debug)]
pub struct BetaTable {
    grid: Vec<f64>,
    scale: candle_core::Var,
    bias: candle_core::Var,
}

impl BetaTable {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let k = BETA_GRID.len();
        Ok(BetaTable {
            grid: BETA_GRID.to_vec(),
            scale: store.var(&join(prefix, "scale"), &[k, channels], Init::Const(1.0))?,
            bias: store.var(&join(prefix, "bias"), &[k, channels], Init::Zeros)?,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Applies the rows for `indices` (one per batch element).
    pub fn apply(&self, layer_out: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (b, c, _, _) = layer_out.dims4()?;
        if indices.len() != b && indices.len() != 1 {
            return Err(Error::Shape(format!(
                "{} table indices for batch of {b}",
                indices.len()
            )));
        }
        if self.scale.dims()[1] != c {
            return Err(Error::Shape(format!(
                "table has {} channels, layer has {c}",
                self.scale.dims()[1]
            )));
        }
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), layer_out.device())?;
        let n = indices.len();
        let scale = self.scale.index_select(&idx, 0)?.reshape((n, c, 1, 1))?;
        let bias = self.bias.index_select(&idx, 0)?.reshape((n, c, 1, 1))?;
        Ok(layer_out.broadcast_mul(&scale)?.broadcast_add(&bias)?)
    }
}

/// `scale ⊙ layer_out + bias` using the entry selected for `beta`.
pub fn apply_table_cond(
    layer_out: &Tensor,
    beta: f64,
    table: &BetaTable,
    snap: bool,
) -> Result<Tensor> {
    let idx = table_index(table.grid(), beta, snap)?;
    table.apply(layer_out, &[idx])
}

/// Maximum over channels of the spatial variance of `a - b`; used to check that
/// a modulation is a per-channel constant.
pub fn max_spatial_variance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = (a - b)?.to_dtype(candle_core::DType::F64)?;
    let (bsz, c, h, w) = diff.dims4()?;
    let flat = diff.reshape((bsz * c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
    Ok(var.max(0)?.to_scalar::<f64>()?)
}
