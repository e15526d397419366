//! Parameter storage, seeded initialization and the handful of layers the
//! codec networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    /// Uniform in [lo, hi].
    Range(f64, f64),
}

/// Named trainable parameters with a private seeded RNG for initialization.
///
/// Names are dotted paths (`encoder.down0.weight`); iteration order is
/// lexicographic, which keeps checkpoints and model hashes stable.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
            Init::Range(lo, hi) => (0..n).map(|_| self.rng.gen_range(lo..=hi)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `tensors`; all names must be present
    /// with matching shapes.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.var(
            &join(prefix, "weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = store.var(&join(prefix, "bias"), &[out_ch], Init::Uniform(bound))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.out_channels();
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Stride-2 transposed convolution that exactly doubles spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / ((out_ch * 9) as f64).sqrt();
        let weight = store.var(
            &join(prefix, "weight"),
            &[in_ch, out_ch, 3, 3],
            Init::Uniform(bound),
        )?;
        let bias = store.var(&join(prefix, "bias"), &[out_ch], Init::Uniform(bound))?;
        Ok(ConvTranspose2d { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 1, 1, 2, 1)?;
        let c = self.out_channels();
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Option<Init>,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let init = init.unwrap_or(Init::Uniform(bound));
        let weight = store.var(&join(prefix, "weight"), &[out_dim, in_dim], init)?;
        let bias = if bias {
            let b_init = match init {
                Init::Zeros => Init::Zeros,
                _ => Init::Uniform(bound),
            };
            Some(store.var(&join(prefix, "bias"), &[out_dim], b_init)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `(B, in) -> (B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Plain 3x3 residual block: `x + conv(relu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, ch: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(store, &join(prefix, "conv1"), ch, ch, 3, 1)?,
            conv2: Conv2d::new(store, &join(prefix, "conv2"), ch, ch, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}
