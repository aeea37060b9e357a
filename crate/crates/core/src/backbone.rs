//! Shared-weight multi-scale encoder with modality-specific batch norm.

use candle_core::{Tensor, Var};

use crate::error::{dim_err, Result};
use crate::geometry::Modality;
use crate::nn::{Conv2d, Init, ParamStore};
use crate::ops;

pub const NUM_LEVELS: usize = 5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// NHWC tensors; level `i` is at `1 / 2^i` of the input resolution.
    pub levels: Vec<Tensor>,
    pub modality: Modality,
}

impl FeaturePyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims()[3]).collect()
    }
}

/// One normalisation statistic set: affine parameters plus running moments.
#[derive(Clone)]
pub struct BnSet {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BnSet {
    fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(format!("{prefix}.weight"), &[c], Init::Const(1.0))?,
            bias: store.param(format!("{prefix}.bias"), &[c], Init::Zeros)?,
            running_mean: store.buffer(format!("{prefix}.running_mean"), &[c], Init::Zeros)?,
            running_var: store.buffer(format!("{prefix}.running_var"), &[c], Init::Const(1.0))?,
        })
    }
}

/// Batch normalisation with one statistic set per modality tag, or a single
/// shared set when modality-specific normalisation is disabled.
#[derive(Clone)]
pub struct Msbn {
    sets: Vec<BnSet>,
}

impl Msbn {
    pub fn new(store: &mut ParamStore, site: &str, c: usize, per_modality: bool) -> Result<Self> {
        let tags: &[&str] = if per_modality { &["a", "b"] } else { &["shared"] };
        let sets = tags
            .iter()
            .map(|t| BnSet::new(store, &format!("msbn.{site}.{t}"), c))
            .collect::<Result<_>>()?;
        Ok(Self { sets })
    }

    pub fn per_modality(&self) -> bool {
        self.sets.len() == 2
    }

    pub fn set(&self, tag: Modality) -> &BnSet {
        match (self.per_modality(), tag) {
            (true, Modality::B) => &self.sets[1],
            _ => &self.sets[0],
        }
    }

    /// Normalises over (B, H, W) per channel. In training mode batch
    /// statistics are used and the tag's running moments are updated.
    pub fn forward(&self, x: &Tensor, tag: Modality, train: bool) -> Result<Tensor> {
        let set = self.set(tag);
        let c = x.dims()[x.rank() - 1];
        let flat = x.reshape(((), c))?;
        let (mean, var) = if train {
            let n = flat.dims()[0];
            let mean = (ops::channel_sum(&flat, false)? / n as f64)?;
            let centred = ops::add_channels(&flat, &mean.neg()?)?;
            let var = (ops::channel_sum(&centred.sqr()?, false)? / n as f64)?;
            let unbiased = if n > 1 { (var.detach() * (n as f64 / (n as f64 - 1.0)))? } else { var.detach() };
            let m = BN_MOMENTUM;
            let rm = ((set.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
            let rv = ((set.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            set.running_mean.set(&rm)?;
            set.running_var.set(&rv)?;
            (mean, var)
        } else {
            (set.running_mean.as_tensor().clone(), set.running_var.as_tensor().clone())
        };
        let inv = (var + BN_EPS)?.sqrt()?.recip()?;
        let scale = (inv * set.weight.as_tensor())?;
        let shift = (set.bias.as_tensor() - (&mean * &scale)?)?;
        let y = ops::add_channels(&ops::mul_channels(&flat, &scale)?, &shift)?;
        Ok(y.reshape(x.dims())?)
    }
}

#[derive(Clone)]
struct Stage {
    down: Conv2d,
    norm: Msbn,
    res: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: [usize; NUM_LEVELS],
    pub msbn: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { in_channels: 1, widths: [16, 32, 48, 64, 96], msbn: true }
    }
}

/// Five stages of `conv3x3 (stride 1, then 2) → MSBN → ReLU → residual conv`.
#[derive(Clone)]
pub struct Backbone {
    stages: Vec<Stage>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig) -> Result<Self> {
        if config.widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(crate::HrError::Config(format!(
                "backbone widths must be non-decreasing, got {:?}",
                config.widths
            )));
        }
        let mut stages = Vec::with_capacity(NUM_LEVELS);
        let mut cin = config.in_channels;
        for (i, &c) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(Stage {
                down: Conv2d::new(store, &format!("backbone.stage{i}.down"), cin, c, 3, stride)?,
                norm: Msbn::new(store, &format!("stage{i}"), c, config.msbn)?,
                res: Conv2d::new(store, &format!("backbone.stage{i}.res"), c, c, 3, 1)?,
            });
            cin = c;
        }
        Ok(Self { stages, config })
    }

    pub fn msbn(&self, level: usize) -> &Msbn {
        &self.stages[level].norm
    }

    pub fn encode(&self, image: &Tensor, tag: Modality, train: bool) -> Result<FeaturePyramid> {
        let (_, h, w, c) = image.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return dim_err(format!("input {h}x{w} is not divisible by 16"));
        }
        if c != self.config.in_channels {
            return dim_err(format!("expected {} input channels, got {c}", self.config.in_channels));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for stage in &self.stages {
            let h = stage.norm.forward(&stage.down.forward(&x)?, tag, train)?.relu()?;
            x = (&h + stage.res.forward(&h)?)?.relu()?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels, modality: tag })
    }

    /// Encodes a fixed (A) / moving (B) batch pair. Without per-modality
    /// normalisation both batches go through the shared statistics jointly.
    pub fn encode_pair(&self, fixed: &Tensor, moving: &Tensor, train: bool) -> Result<(FeaturePyramid, FeaturePyramid)> {
        if self.config.msbn {
            return Ok((self.encode(fixed, Modality::A, train)?, self.encode(moving, Modality::B, train)?));
        }
        let b = fixed.dims()[0];
        let joint = self.encode(&Tensor::cat(&[fixed, moving], 0)?, Modality::A, train)?;
        let split = |from: usize, len: usize| -> Result<Vec<Tensor>> {
            joint.levels.iter().map(|l| Ok(l.narrow(0, from, len)?)).collect()
        };
        let mb = moving.dims()[0];
        Ok((
            FeaturePyramid { levels: split(0, b)?, modality: Modality::A },
            FeaturePyramid { levels: split(b, mb)?, modality: Modality::B },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::{DType, Device};
    use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};

    fn image(seed: u64, b: usize, n: usize) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F32);
        s.param("x", &[b, n, n, 1], Init::Uniform(1.0)).unwrap().as_tensor().clone()
    }

    #[test]
    fn pyramid_sizes() {
        let mut store = ParamStore::new(0, DType::F32);
        let bb = Backbone::new(&mut store, BackboneConfig::default()).unwrap();
        let p = bb.encode(&image(1, 2, 64), Modality::A, true).unwrap();
        let sizes: Vec<usize> = p.levels.iter().map(|l| l.dims()[1]).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4]);
        assert_eq!(p.channels(), vec![16, 32, 48, 64, 96]);
        assert!(matches!(
            bb.encode(&image(1, 1, 40), Modality::A, true),
            Err(crate::HrError::Dimension(_))
        ));
    }

    #[test]
    fn eval_identity_and_constant_batch() {
        let mut store = ParamStore::new(0, DType::F64);
        let bn = Msbn::new(&mut store, "t", 3, true).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0, 3.5], [0.25, 4.0, -1.0]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, Modality::B, false).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in to_f64_vec(&x).unwrap().iter().zip(to_f64_vec(&y).unwrap()) {
            assert!((a * scale - b).abs() < 1e-12);
        }
        bn.set(Modality::A).bias.set(&Tensor::new(&[0.5f64, -0.5, 2.0], &Device::Cpu).unwrap()).unwrap();
        let flat = Tensor::full(7.0f64, (4, 3), &Device::Cpu).unwrap();
        let y = to_f64_vec(&bn.forward(&flat, Modality::A, true).unwrap()).unwrap();
        assert_eq!(y, [0.5, -0.5, 2.0].repeat(4));
    }

    #[test]
    fn running_means_track_each_stream() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut store = ParamStore::new(0, DType::F64);
        let bn = Msbn::new(&mut store, "t", 2, true).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (ma, mb) = (2.0, -3.0);
        for step in 0..200 {
            let (tag, mu) = if step % 2 == 0 { (Modality::A, ma) } else { (Modality::B, mb) };
            let d = Normal::new(mu, 1.0).unwrap();
            let v: Vec<f64> = (0..64).map(|_| d.sample(&mut rng)).collect();
            bn.forward(&Tensor::from_vec(v, (32, 2), &Device::Cpu).unwrap(), tag, true).unwrap();
        }
        for (tag, mu) in [(Modality::A, ma), (Modality::B, mb)] {
            for m in to_f64_vec(bn.set(tag).running_mean.as_tensor()).unwrap() {
                assert!((m - mu).abs() <= 0.05 * mu.abs(), "{tag:?}: {m}");
            }
        }
    }

    #[test]
    fn census_and_shared_weights() {
        let mut with = ParamStore::new(0, DType::F32);
        Backbone::new(&mut with, BackboneConfig::default()).unwrap();
        let mut without = ParamStore::new(0, DType::F32);
        Backbone::new(&mut without, BackboneConfig { msbn: false, ..Default::default() }).unwrap();
        let conv = |s: &ParamStore| s.count_where(|k| k.starts_with("backbone."));
        let bn = |s: &ParamStore| s.count_where(|k| k.starts_with("msbn."));
        assert_eq!(conv(&with), conv(&without));
        assert_eq!(bn(&with), 2 * bn(&without));
        assert_eq!(with.num_params(), conv(&with) + 2 * bn(&without));
        assert_eq!(with.buffers().count(), 2 * without.buffers().count());
    }

    #[test]
    fn gradients_route_to_one_modality() {
        let mut store = ParamStore::new(0, DType::F32);
        let bb = Backbone::new(&mut store, BackboneConfig::default()).unwrap();
        let p = bb.encode(&image(2, 2, 32), Modality::A, true).unwrap();
        let loss = p.levels.iter().map(|l| l.sqr().unwrap().mean_all().unwrap()).reduce(|a, b| (a + b).unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let norm = |name: &str| {
            grads
                .get(store.get(name).unwrap().as_tensor())
                .map(|g| to_f64_vec(g).unwrap().iter().map(|v| v.abs()).sum::<f64>())
                .unwrap_or(0.0)
        };
        assert!(norm("backbone.stage0.down.weight") > 0.0);
        assert!(norm("msbn.stage2.a.weight") > 0.0);
        assert_eq!(norm("msbn.stage2.b.weight"), 0.0);
        assert_eq!(norm("msbn.stage2.b.bias"), 0.0);
    }

    #[test]
    fn tags_diverge_after_training() {
        let mut store = ParamStore::new(0, DType::F32);
        let bb = Backbone::new(&mut store, BackboneConfig::default()).unwrap();
        let x = image(3, 2, 32);
        let conv_sum = |s: &ParamStore| {
            s.params()
                .filter(|(k, _)| k.starts_with("backbone."))
                .map(|(_, v)| to_f64_vec(v.as_tensor()).unwrap().iter().sum::<f64>())
                .sum::<f64>()
        };
        let before = conv_sum(&store);
        bb.encode(&x, Modality::B, false).unwrap();
        assert_eq!(before, conv_sum(&store));

        let mut opt = AdamW::new(store.trainable_vars(), ParamsAdamW { lr: 1e-2, weight_decay: 0.0, ..Default::default() }).unwrap();
        for _ in 0..10 {
            let p = bb.encode(&x, Modality::A, true).unwrap();
            let loss = (p.levels[4].clone() - 1.0).unwrap().sqr().unwrap().mean_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let a = bb.encode(&x, Modality::A, false).unwrap();
        let b = bb.encode(&x, Modality::B, false).unwrap();
        let diff = (&a.levels[4] - &b.levels[4]).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() > 0.0);
    }
}
