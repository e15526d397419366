//! Learned non-parametric factorized density for the hyper-latent ẑ:
//! per channel, a monotone cumulative function built from a small chain of
//! softplus-positive matrices with tanh gates.

use candle_core::{DType, Tensor};

use crate::entropy::cdf::{CdfTable, Escape};
use crate::entropy::LIKELIHOOD_BOUND;
use crate::error::Result;
use crate::nn::{join, softplus, sigmoid, Init, ParamStore};

const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;

/// ẑ table windows drop outer symbols whose cumulative mass is below this.
const TABLE_TAIL_MASS: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<candle_core::Var>,
    biases: Vec<candle_core::Var>,
    factors: Vec<candle_core::Var>,
}

impl FactorizedPrior {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(1)
            .chain(FILTERS)
            .chain(std::iter::once(1))
            .collect();
        let layers = dims.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..layers {
            let init = (1.0 / scale / dims[k + 1] as f64).exp_m1().ln();
            matrices.push(store.var(
                &join(prefix, &format!("matrix{k}")),
                &[channels, dims[k + 1], dims[k]],
                Init::Const(init),
            )?);
            biases.push(store.var(
                &join(prefix, &format!("bias{k}")),
                &[channels, dims[k + 1], 1],
                Init::Range(-0.5, 0.5),
            )?);
            if k + 1 < layers {
                factors.push(store.var(
                    &join(prefix, &format!("factor{k}")),
                    &[channels, dims[k + 1], 1],
                    Init::Zeros,
                )?);
            }
        }
        Ok(FactorizedPrior {
            channels,
            matrices,
            biases,
            factors,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Cumulative logits for inputs shaped `(C, 1, N)`.
    fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for k in 0..self.matrices.len() {
            let m = softplus(&self.matrices[k])?;
            h = m.matmul(&h)?.broadcast_add(&self.biases[k])?;
            if let Some(f) = self.factors.get(k) {
                h = (&h + f.tanh()?.broadcast_mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Likelihood of each element of `z` with shape `(B, C, H, W)`.
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        let x = z.permute((1, 0, 2, 3))?.reshape((c, 1, b * h * w))?;
        let lower = self.logits_cumulative(&(&x - 0.5)?)?;
        let upper = self.logits_cumulative(&(&x + 0.5)?)?;
        // Evaluate on the side where the sigmoids are far from 1.
        let flip = (&lower + &upper)?.ge(0.0)?.detach();
        let sign = flip.where_cond(
            &Tensor::full(-1.0, flip.dims(), z.device())?.to_dtype(z.dtype())?,
            &Tensor::ones(flip.dims(), z.dtype(), z.device())?,
        )?;
        let p = (sigmoid(&(&sign * &upper)?)? - sigmoid(&(&sign * &lower)?)?)?.abs()?;
        let p = p.maximum(LIKELIHOOD_BOUND)?;
        Ok(p.reshape((c, b, h, w))?.permute((1, 0, 2, 3))?.contiguous()?)
    }

    /// Parameters copied to the host in f64, for table construction.
    pub fn host(&self) -> Result<HostPrior> {
        let mut layers = Vec::new();
        for k in 0..self.matrices.len() {
            let to_host = |t: &Tensor| -> Result<Vec<f64>> {
                Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
            };
            let dims = self.matrices[k].dims();
            layers.push(HostLayer {
                rows: dims[1],
                cols: dims[2],
                matrix: to_host(&softplus(&self.matrices[k])?)?,
                bias: to_host(&self.biases[k])?,
                factor: match self.factors.get(k) {
                    Some(f) => Some(to_host(&f.tanh()?)?),
                    None => None,
                },
            });
        }
        Ok(HostPrior { layers })
    }

    /// Per-channel CDF tables over `[-l_max, l_max]`, trimmed to where the
    /// density has mass, with an escape for everything else.
    pub fn cdf_tables(&self, l_max: i32) -> Result<Vec<CdfTable>> {
        let host = self.host()?;
        (0..self.channels).map(|c| host.cdf_table(c, l_max)).collect()
    }
}

#[derive(Clone, Debug)]
struct HostLayer {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    bias: Vec<f64>,
    factor: Option<Vec<f64>>,
}

/// f64 host copy of a [`FactorizedPrior`].
#[derive(Clone, Debug)]
pub struct HostPrior {
    layers: Vec<HostLayer>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl HostPrior {
    fn logits(&self, c: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for layer in &self.layers {
            let m = &layer.matrix[c * layer.rows * layer.cols..(c + 1) * layer.rows * layer.cols];
            h = (0..layer.rows)
                .map(|r| {
                    let acc: f64 = h.iter().enumerate().map(|(j, v)| m[r * layer.cols + j] * v).sum();
                    let mut out = acc + layer.bias[c * layer.rows + r];
                    if let Some(f) = &layer.factor {
                        out += f[c * layer.rows + r] * out.tanh();
                    }
                    out
                })
                .collect();
        }
        h[0]
    }

    /// Mass of the integer `k` in channel `c`.
    pub fn pmf(&self, c: usize, k: i32) -> f64 {
        let lo = self.logits(c, k as f64 - 0.5);
        let hi = self.logits(c, k as f64 + 0.5);
        let s = if lo + hi >= 0.0 { -1.0 } else { 1.0 };
        (logistic(s * hi) - logistic(s * lo)).abs()
    }

    /// `-log2 p(k)` with the same lower bound as the tensor path.
    pub fn bits(&self, c: usize, k: i32) -> f64 {
        -self.pmf(c, k).max(LIKELIHOOD_BOUND).log2()
    }

    pub fn cdf_table(&self, c: usize, l_max: i32) -> Result<CdfTable> {
        let pmf: Vec<f64> = (-l_max..=l_max).map(|k| self.pmf(c, k)).collect();
        let mut lo = 0;
        let mut acc = logistic(self.logits(c, -l_max as f64 - 0.5));
        while lo + 1 < pmf.len() && acc + pmf[lo] < TABLE_TAIL_MASS {
            acc += pmf[lo];
            lo += 1;
        }
        let mut hi = pmf.len() - 1;
        let mut acc = 1.0 - logistic(self.logits(c, l_max as f64 + 0.5));
        while hi > lo && acc + pmf[hi] < TABLE_TAIL_MASS {
            acc += pmf[hi];
            hi -= 1;
        }
        CdfTable::from_pmf(
            lo as i32 - l_max,
            &pmf[lo..=hi],
            Some(Escape::for_alphabet(l_max)),
        )
    }
}
