//! Parameter storage and the handful of NHWC layers the network is built from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HrError, Result};

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    /// Uniform in ±sqrt(6 / fan_in) (He / Kaiming for ReLU nets).
    Kaiming(usize),
}

/// Named, seeded parameter registry.
///
/// Trainable parameters and non-trainable buffers (BN running statistics)
/// live in separate ordered maps so that iteration order, and therefore
/// initialisation and optimiser order, is deterministic.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| HrError::InvalidParameter(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Kaiming(fan_in) => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Registers a trainable parameter; panics on duplicate names since that
    /// is always a construction bug.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        let var = Var::from_tensor(&self.make(shape, init)?)?;
        self.params.insert(name, var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        let name = name.into();
        assert!(!self.buffers.contains_key(&name), "duplicate buffer {name}");
        let var = Var::from_tensor(&self.make(shape, init)?)?;
        self.buffers.insert(name, var.clone());
        Ok(var)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Sum of parameter counts over names accepted by `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all: HashMap<String, Tensor> = HashMap::new();
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            all.insert(k.clone(), v.as_tensor().clone());
        }
        candle_core::safetensors::save(&all, path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (k, v) in self.params.iter().chain(self.buffers.iter()) {
            let t = loaded
                .get(k)
                .ok_or_else(|| HrError::Format(format!("checkpoint is missing `{k}`")))?;
            if t.dims() != v.dims() {
                return Err(HrError::Format(format!(
                    "checkpoint tensor `{k}` has shape {:?}, expected {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// NHWC convolution backed by im2col + GEMM.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    k: usize,
    stride: usize,
    cout: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = k * k * cin;
        Self::with_init(store, name, cin, cout, k, stride, Init::Kaiming(fan_in))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(format!("{name}.weight"), &[k * k * cin, cout], init)?;
        let bias = store.param(format!("{name}.bias"), &[cout], Init::Zeros)?;
        Ok(Self { weight, bias, k, stride, cout })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let pad = self.k / 2;
        let (oh, ow) = ((h + 2 * pad - self.k) / self.stride + 1, (w + 2 * pad - self.k) / self.stride + 1);
        let cols = if self.k == 1 && self.stride == 1 {
            x.reshape((b * h * w, c))?
        } else {
            crate::ops::im2col(x, self.k, self.stride, pad)?
        };
        let y = crate::ops::add_channels(&cols.matmul(self.weight.as_tensor())?, self.bias.as_tensor())?;
        Ok(y.reshape((b, oh, ow, self.cout))?)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Self::with_init(store, name, din, dout, Init::Kaiming(din))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(format!("{name}.weight"), &[din, dout], init)?;
        let bias = store.param(format!("{name}.bias"), &[dout], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// Applies the map over the last axis of a 2- or 3-d input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(self.weight.as_tensor())?,
            _ => x.broadcast_matmul(self.weight.as_tensor())?,
        };
        Ok(crate::ops::add_channels(&y, self.bias.as_tensor())?)
    }
}

/// Global average pooling of an NHWC tensor to (B, C).
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    Ok((crate::ops::channel_sum(x, true)? / (h * w) as f64)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable softplus: relu(x) + log(1 + exp(-|x|)).
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Extracts every element of a tensor as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loop() {
        let mut store = ParamStore::new(3, DType::F64);
        let conv = Conv2d::with_init(&mut store, "c", 2, 3, 3, 2, Init::Uniform(1.0)).unwrap();
        conv.bias.set(&Tensor::new(&[0.1f64, -0.2, 0.3], store.device()).unwrap()).unwrap();
        let x = store.make(&[1, 5, 4, 2], Init::Uniform(1.0)).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 3, 2, 3]);
        let xv = to_f64_vec(&x).unwrap();
        let wv = to_f64_vec(conv.weight.as_tensor()).unwrap();
        let yv = to_f64_vec(&y).unwrap();
        let bias = [0.1, -0.2, 0.3];
        for oy in 0..3 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut s = bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                let xi = ((iy as usize) * 4 + ix as usize) * 2 + ci;
                                let wi = ((ky * 3 + kx) * 2 + ci) * 3 + co;
                                s += xv[xi] * wv[wi];
                            }
                        }
                    }
                    let got = yv[(oy * 2 + ox) * 3 + co];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new(1, DType::F32);
        a.param("x.w", &[3, 2], Init::Uniform(1.0)).unwrap();
        a.buffer("x.mean", &[2], Init::Const(0.5)).unwrap();
        let path = dir.path().join("ck.safetensors");
        a.save(&path).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        b.param("x.w", &[3, 2], Init::Zeros).unwrap();
        b.buffer("x.mean", &[2], Init::Zeros).unwrap();
        b.load(&path).unwrap();
        let av = to_f64_vec(a.get("x.w").unwrap().as_tensor()).unwrap();
        let bv = to_f64_vec(b.get("x.w").unwrap().as_tensor()).unwrap();
        assert_eq!(av, bv);
        assert_eq!(to_f64_vec(b.get("x.mean").unwrap().as_tensor()).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-50.0f64, 0.0, 50.0], &Device::Cpu).unwrap();
        let y = to_f64_vec(&softplus(&x).unwrap()).unwrap();
        assert!((0.0..1e-20).contains(&y[0]));
        assert!((y[1] - 2f64.ln()).abs() < 1e-12);
        assert!((y[2] - 50.0).abs() < 1e-12);
    }
}
