//! Coarse-to-fine hybrid parameter prediction: rigid steps at the coarsest
//! scales, dense increments below, accumulated into one displacement field.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::NUM_LEVELS;
use crate::error::{dim_err, HrError, Result};
use crate::geometry;
use crate::nn::{gap, sigmoid, softplus, Conv2d, Init, Linear, ParamStore};
use crate::ops;

pub const R_MAX_DEG: f64 = 25.0;
pub const T_MAX: f64 = 0.2;
const SCAN_STATES: usize = 4;
const LN_EPS: f64 = 1e-5;

pub fn s_max() -> f64 {
    1.2f64.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    /// Bidirectional selective state-space scan over row-major tokens.
    Scan,
    /// 7×7 gated depthwise convolution.
    GatedConv,
}

impl std::str::FromStr for MixerKind {
    type Err = HrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Self::Scan),
            "gated-conv" => Ok(Self::GatedConv),
            other => Err(HrError::Config(format!("unknown mixer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HppmConfig {
    pub n_rigid: usize,
    pub n_nonrigid: usize,
    pub mixer: MixerKind,
}

impl Default for HppmConfig {
    fn default() -> Self {
        Self { n_rigid: 1, n_nonrigid: 4, mixer: MixerKind::Scan }
    }
}

impl HppmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rigid + self.n_nonrigid != NUM_LEVELS {
            return Err(HrError::Config(format!(
                "n_rigid + n_nonrigid must be {NUM_LEVELS}, got {} + {}",
                self.n_rigid, self.n_nonrigid
            )));
        }
        Ok(())
    }

    /// Scales `5 - n_rigid ..= 4` carry rigid heads.
    pub fn is_rigid(&self, scale: usize) -> bool {
        scale + self.n_rigid >= NUM_LEVELS
    }
}

/// Token-wise layer norm over the channel axis.
#[derive(Clone)]
struct LayerNorm {
    weight: Var,
    bias: Var,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(format!("{name}.weight"), &[c], Init::Const(1.0))?,
            bias: store.param(format!("{name}.bias"), &[c], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(last)?;
        let y = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(ops::add_channels(&ops::mul_channels(&y, self.weight.as_tensor())?, self.bias.as_tensor())?)
    }
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(x)?)?)
}

#[derive(Clone)]
struct ScanMixer {
    input: Linear,
    dt: Linear,
    bc: Linear,
    a_log: Var,
    skip: Var,
}

impl ScanMixer {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let dt = Linear::with_init(store, &format!("{name}.dt"), c, c, Init::Uniform(0.1 / (c as f64).sqrt()))?;
        // step sizes spread log-uniformly over [1e-3, 1e-1]
        let bias: Vec<f64> = (0..c)
            .map(|i| {
                let frac = if c > 1 { i as f64 / (c - 1) as f64 } else { 0.5 };
                let step = (1e-3f64.ln() + frac * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                (step.exp() - 1.0).ln()
            })
            .collect();
        dt.bias.set(&Tensor::new(bias, store.device())?.to_dtype(store.dtype())?)?;
        let a: Vec<f64> = (0..c).flat_map(|_| (1..=SCAN_STATES).map(|n| (n as f64).ln())).collect();
        let a_log = store.param(format!("{name}.a_log"), &[c, SCAN_STATES], Init::Zeros)?;
        a_log.set(&Tensor::from_vec(a, (c, SCAN_STATES), store.device())?.to_dtype(store.dtype())?)?;
        Ok(Self {
            input: Linear::new(store, &format!("{name}.in"), c, c)?,
            dt,
            bc: Linear::new(store, &format!("{name}.bc"), c, 2 * SCAN_STATES)?,
            a_log,
            skip: store.param(format!("{name}.d"), &[c], Init::Const(1.0))?,
        })
    }

    /// `x`: (B, L, C) normalised tokens → (B, L, C).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let u = silu(&self.input.forward(x)?)?;
        let delta = softplus(&self.dt.forward(&u)?)?;
        let bc = self.bc.forward(&u)?;
        let a = self.a_log.as_tensor().exp()?.neg()?;
        let y = ops::selective_scan(&Tensor::cat(&[&u, &delta], 2)?, &bc, &a)?;
        Ok((y + ops::mul_channels(&u, self.skip.as_tensor())?)?)
    }
}

#[derive(Clone)]
struct GatedConvMixer {
    input: Linear,
    weight: Var,
    bias: Var,
}

const DW_K: usize = 7;

impl GatedConvMixer {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.in"), c, c)?,
            weight: store.param(format!("{name}.dw.weight"), &[DW_K * DW_K, c], Init::Kaiming(DW_K * DW_K))?,
            bias: store.param(format!("{name}.dw.bias"), &[c], Init::Zeros)?,
        })
    }

    /// `x`: (B, H, W, C) normalised → (B, H, W, C).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let u = self.input.forward(x)?;
        let r = DW_K / 2;
        let padded = u.pad_with_zeros(1, r, r)?.pad_with_zeros(2, r, r)?;
        let mut acc: Option<Tensor> = None;
        for ky in 0..DW_K {
            let rows = padded.narrow(1, ky, h)?;
            for kx in 0..DW_K {
                let k = self.weight.as_tensor().get(ky * DW_K + kx)?;
                let term = ops::mul_channels(&rows.narrow(2, kx, w)?, &k)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        Ok(ops::add_channels(&acc.unwrap(), self.bias.as_tensor())?)
    }
}

#[derive(Clone)]
enum Mixer {
    Scan(ScanMixer),
    GatedConv(GatedConvMixer),
}

/// Residual block `x + out(mix(norm(x)) ⊙ silu(gate(norm(x))))` with a
/// small-initialised output projection.
#[derive(Clone)]
pub struct Rssb {
    norm: LayerNorm,
    gate: Linear,
    mixer: Mixer,
    out: Linear,
}

impl Rssb {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, kind: MixerKind) -> Result<Self> {
        let mixer = match kind {
            MixerKind::Scan => Mixer::Scan(ScanMixer::new(store, &format!("{name}.scan"), c)?),
            MixerKind::GatedConv => Mixer::GatedConv(GatedConvMixer::new(store, &format!("{name}.gconv"), c)?),
        };
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            gate: Linear::new(store, &format!("{name}.gate"), c, c)?,
            mixer,
            out: Linear::with_init(store, &format!("{name}.out"), c, c, Init::Normal(0.01))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let n = self.norm.forward(x)?;
        let mixed = match &self.mixer {
            Mixer::Scan(m) => m.forward(&n.reshape((b, h * w, c))?)?.reshape((b, h, w, c))?,
            Mixer::GatedConv(m) => m.forward(&n)?,
        };
        let gated = (mixed * silu(&self.gate.forward(&n)?)?)?;
        Ok((x + self.out.forward(&gated)?)?)
    }
}

/// Rigid head output bounds: rotation (rad), log-scale, translation fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidBounds {
    pub r_max: f64,
    pub s_max: f64,
    pub t_max: f64,
}

impl Default for RigidBounds {
    fn default() -> Self {
        Self { r_max: R_MAX_DEG.to_radians(), s_max: s_max(), t_max: T_MAX }
    }
}

#[derive(Clone)]
pub struct RigidHead {
    fc1: Linear,
    pub fc2: Linear,
    bounds: RigidBounds,
}

impl RigidHead {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, c)?,
            fc2: Linear::with_init(store, &format!("{name}.fc2"), c, 4, Init::Zeros)?,
            bounds: RigidBounds::default(),
        })
    }

    /// Raw `(B, 4)` parameters `[rotation, scale, ty, tx]`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let o = self.fc2.forward(&self.fc1.forward(&gap(f)?)?.relu()?)?.tanh()?;
        let rot = (o.narrow(1, 0, 1)? * self.bounds.r_max)?;
        let scale = (o.narrow(1, 1, 1)? * self.bounds.s_max)?.exp()?;
        let t = (o.narrow(1, 2, 2)? * self.bounds.t_max)?;
        Ok(Tensor::cat(&[rot, scale, t], 1)?)
    }
}

#[derive(Clone)]
pub struct NonRigidHead {
    c1: Conv2d,
    pub c2: Conv2d,
}

impl NonRigidHead {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1)?,
            c2: Conv2d::with_init(store, &format!("{name}.conv2"), c, 2, 3, 1, Init::Zeros)?,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        self.c2.forward(&self.c1.forward(f)?.relu()?)
    }
}

#[derive(Clone)]
pub enum Head {
    Rigid(RigidHead),
    NonRigid(NonRigidHead),
}

/// Fusion conv, two residual mixing blocks and one registration head.
#[derive(Clone)]
pub struct Hrb {
    fuse: Conv2d,
    blocks: Vec<Rssb>,
    pub head: Head,
}

impl Hrb {
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut f = self.fuse.forward(x)?;
        for b in &self.blocks {
            f = b.forward(&f)?;
        }
        Ok(f)
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Full-resolution `(B, H, W, 2)` field.
    pub final_field: Tensor,
    /// Composite raw `(B, 4)` similarity from all rigid steps, if any.
    pub rigid_params: Option<Tensor>,
    /// `φ_i` per scale, index 0 = finest.
    pub per_scale_fields: Vec<Tensor>,
    pub fused: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Hppm {
    pub blocks: Vec<Hrb>,
    f_proj: Vec<Option<Conv2d>>,
    pub config: HppmConfig,
}

impl Hppm {
    /// `dims[i]` is the feature width entering scale `i` from each image.
    pub fn new(store: &mut ParamStore, dims: &[usize; NUM_LEVELS], config: HppmConfig) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(NUM_LEVELS);
        let mut f_proj = Vec::with_capacity(NUM_LEVELS);
        for i in 0..NUM_LEVELS {
            let p = format!("hppm.scale{i}");
            let width = dims[i];
            let cin = if i == NUM_LEVELS - 1 { 2 * dims[i] } else { 2 * dims[i] + width };
            let fuse = Conv2d::new(store, &format!("{p}.fuse"), cin, width, 3, 1)?;
            let rssb = (0..2)
                .map(|k| Rssb::new(store, &format!("{p}.rssb{k}"), width, config.mixer))
                .collect::<Result<Vec<_>>>()?;
            let head = if config.is_rigid(i) {
                Head::Rigid(RigidHead::new(store, &format!("{p}.rigid_head"), width)?)
            } else {
                Head::NonRigid(NonRigidHead::new(store, &format!("{p}.nonrigid_head"), width)?)
            };
            blocks.push(Hrb { fuse, blocks: rssb, head });
            f_proj.push(if i + 1 < NUM_LEVELS {
                Some(Conv2d::new(store, &format!("{p}.f_proj"), dims[i + 1], width, 1, 1)?)
            } else {
                None
            });
        }
        Ok(Self { blocks, f_proj, config })
    }

    pub fn forward(&self, shared_f: &[Tensor], shared_m: &[Tensor]) -> Result<RegistrationResult> {
        if shared_f.len() != NUM_LEVELS || shared_m.len() != NUM_LEVELS {
            return dim_err(format!("hppm expects {NUM_LEVELS} scales"));
        }
        let mut fields: Vec<Option<Tensor>> = vec![None; NUM_LEVELS];
        let mut fused: Vec<Option<Tensor>> = vec![None; NUM_LEVELS];
        let mut rigid_steps = Vec::new();
        let mut prev: Option<(Tensor, Tensor)> = None;
        for i in (0..NUM_LEVELS).rev() {
            let (_, h, w, _) = shared_f[i].dims4()?;
            let (input, up) = match &prev {
                None => (Tensor::cat(&[&shared_m[i], &shared_f[i]], 3)?, None),
                Some((phi, f_next)) => {
                    let up = geometry::upsample_flow_tensor(phi)?;
                    let m_warped = geometry::warp_tensor(&shared_m[i], &up)?;
                    let f_up = self.f_proj[i].as_ref().unwrap().forward(&ops::upsample2x(f_next)?)?;
                    (Tensor::cat(&[&m_warped, &shared_f[i], &f_up], 3)?, Some(up))
                }
            };
            let block = &self.blocks[i];
            let f = block.trunk(&input)?;
            let increment = match &block.head {
                Head::Rigid(head) => {
                    let theta = head.forward(&f)?;
                    let flow = geometry::rigid_flow_tensor(&theta, h, w)?;
                    rigid_steps.push(theta);
                    flow
                }
                Head::NonRigid(head) => head.forward(&f)?,
            };
            let phi = match up {
                Some(up) => geometry::accumulate_tensor(&up, &increment)?,
                None => increment,
            };
            fields[i] = Some(phi.clone());
            fused[i] = Some(f.clone());
            prev = Some((phi, f));
        }
        let per_scale_fields: Vec<Tensor> = fields.into_iter().map(Option::unwrap).collect();
        Ok(RegistrationResult {
            final_field: per_scale_fields[0].clone(),
            rigid_params: compose_similarities(&rigid_steps)?,
            per_scale_fields,
            fused: fused.into_iter().map(Option::unwrap).collect(),
        })
    }
}

/// Combines additive similarity steps `A = I + Σ (A_k − I)`, `t = Σ t_k` back
/// into raw `[rotation, scale, ty, tx]`.
pub fn compose_similarities(steps: &[Tensor]) -> Result<Option<Tensor>> {
    match steps {
        [] => Ok(None),
        [one] => Ok(Some(one.clone())),
        many => {
            let mut a: Option<Tensor> = None;
            let mut b: Option<Tensor> = None;
            let mut t: Option<Tensor> = None;
            for p in many {
                let rot = p.narrow(1, 0, 1)?;
                let s = p.narrow(1, 1, 1)?;
                let ca = ((rot.cos()? * &s)? - 1.0)?;
                let cb = (rot.sin()? * &s)?;
                let ct = p.narrow(1, 2, 2)?;
                a = Some(match a {
                    Some(x) => (x + ca)?,
                    None => ca,
                });
                b = Some(match b {
                    Some(x) => (x + cb)?,
                    None => cb,
                });
                t = Some(match t {
                    Some(x) => (x + ct)?,
                    None => ct,
                });
            }
            let a = (a.unwrap() + 1.0)?;
            let b = b.unwrap();
            let rot = ops::atan2(&b, &a)?;
            let scale = (a.sqr()? + b.sqr()?)?.sqrt()?;
            Ok(Some(Tensor::cat(&[rot, scale, t.unwrap()], 1)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use candle_core::{DType, Device};

    fn rand(store: &mut ParamStore, name: &str, shape: &[usize]) -> Tensor {
        store.param(name, shape, Init::Uniform(1.0)).unwrap().as_tensor().clone()
    }

    #[test]
    fn config_and_mixer_parsing() {
        assert!(HppmConfig { n_rigid: 2, n_nonrigid: 2, mixer: MixerKind::Scan }.validate().is_err());
        let c = HppmConfig::default();
        assert!(c.is_rigid(4) && !c.is_rigid(3));
        assert_eq!("gated-conv".parse::<MixerKind>().unwrap(), MixerKind::GatedConv);
        assert!("attention".parse::<MixerKind>().is_err());
    }

    #[test]
    fn rssb_shapes_and_near_identity() {
        for kind in [MixerKind::Scan, MixerKind::GatedConv] {
            let mut s = ParamStore::new(1, DType::F64);
            let block = Rssb::new(&mut s, "r", 8, kind).unwrap();
            for n in [4, 8, 16] {
                let x = rand(&mut s, &format!("x{n}"), &[2, n, n, 8]);
                let y = block.forward(&x).unwrap();
                assert_eq!(y.dims(), x.dims());
                let xv = to_f64_vec(&x).unwrap();
                let yv = to_f64_vec(&y).unwrap();
                let diff: f64 = xv.iter().zip(&yv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = xv.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(diff / norm < 0.1, "{kind:?} {n}: {}", diff / norm);
            }
        }
    }

    #[test]
    fn scan_mixer_reaches_beyond_a_neighbourhood() {
        let mut s = ParamStore::new(2, DType::F64);
        let block = Rssb::new(&mut s, "r", 4, MixerKind::Scan).unwrap();
        let x = rand(&mut s, "x", &[1, 8, 8, 4]);
        let mut bumped = to_f64_vec(&x).unwrap();
        bumped[(4 * 8 + 4) * 4] += 1.0;
        let x2 = Tensor::from_vec(bumped, (1, 8, 8, 4), &Device::Cpu).unwrap();
        let d = to_f64_vec(&(block.forward(&x2).unwrap() - block.forward(&x).unwrap()).unwrap()).unwrap();
        let changed_far = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).any(|(y, x): (usize, usize)| {
            let far = y.abs_diff(4) > 1 || x.abs_diff(4) > 1;
            far && (0..4).any(|c| d[(y * 8 + x) * 4 + c].abs() > 1e-12)
        });
        assert!(changed_far);
    }

    #[test]
    fn rigid_head_identity_and_bounds() {
        let mut s = ParamStore::new(3, DType::F64);
        let head = RigidHead::new(&mut s, "h", 6).unwrap();
        let zero = Tensor::zeros((2, 4, 4, 6), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(to_f64_vec(&head.forward(&zero).unwrap()).unwrap(), [0.0, 1.0, 0.0, 0.0].repeat(2));
        head.fc2.weight.set(&(rand(&mut s, "w", &[6, 4]) * 50.0).unwrap()).unwrap();
        let f = (rand(&mut s, "f", &[8, 4, 4, 6]) * 10.0).unwrap();
        let p = to_f64_vec(&head.forward(&f).unwrap()).unwrap();
        let b = RigidBounds::default();
        for row in p.chunks(4) {
            assert!(row[0].abs() <= b.r_max + 1e-12);
            assert!(row[1].ln().abs() <= b.s_max + 1e-12);
            assert!(row[2].abs() <= b.t_max + 1e-12 && row[3].abs() <= b.t_max + 1e-12);
        }
    }

    #[test]
    fn rigid_head_flow_is_a_similarity() {
        let mut s = ParamStore::new(4, DType::F64);
        let head = RigidHead::new(&mut s, "h", 6).unwrap();
        head.fc2.weight.set(&rand(&mut s, "w", &[6, 4])).unwrap();
        let f = rand(&mut s, "f", &[1, 4, 4, 6]);
        let (h, w) = (12, 10);
        let flow = to_f64_vec(&geometry::rigid_flow_tensor(&head.forward(&f).unwrap(), h, w).unwrap()).unwrap();
        // least-squares fit of y' = a·y + b·x + c, x' = −b·y + a·x + d
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        let mut rows = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let i = (y * w + x) * 2;
                rows.push(([yf, xf, 1.0, 0.0], yf + flow[i]));
                rows.push(([xf, -yf, 0.0, 1.0], xf + flow[i + 1]));
            }
        }
        for (r, v) in &rows {
            for j in 0..4 {
                atb[j] += r[j] * v;
                for k in 0..4 {
                    ata[j][k] += r[j] * r[k];
                }
            }
        }
        // Gaussian elimination
        let mut m = ata;
        let mut rhs = atb;
        for c in 0..4 {
            for r in c + 1..4 {
                let f = m[r][c] / m[c][c];
                for k in c..4 {
                    m[r][k] -= f * m[c][k];
                }
                rhs[r] -= f * rhs[c];
            }
        }
        let mut sol = [0.0f64; 4];
        for c in (0..4).rev() {
            let acc: f64 = (c + 1..4).map(|k| m[c][k] * sol[k]).sum();
            sol[c] = (rhs[c] - acc) / m[c][c];
        }
        let worst = rows
            .iter()
            .map(|(r, v)| (r.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>() - v).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn nonrigid_head_zero_and_gradient() {
        let mut s = ParamStore::new(5, DType::F64);
        let head = NonRigidHead::new(&mut s, "h", 3).unwrap();
        let f = rand(&mut s, "f", &[1, 5, 6, 3]);
        let out = head.forward(&f).unwrap();
        assert_eq!(out.dims(), &[1, 5, 6, 2]);
        assert!(to_f64_vec(&out).unwrap().iter().all(|v| *v == 0.0));

        head.c2.weight.set(&rand(&mut s, "w", &[27, 2])).unwrap();
        let fv = Var::from_tensor(&f).unwrap();
        let probe = rand(&mut s, "p", &[1, 5, 6, 2]);
        let objective = |x: &Tensor| (head.forward(x).unwrap() * &probe).unwrap().sum_all().unwrap();
        let grads = objective(fv.as_tensor()).backward().unwrap();
        let g = to_f64_vec(grads.get(fv.as_tensor()).unwrap()).unwrap();
        let base = to_f64_vec(&f).unwrap();
        for idx in [0, 17, 41, 60, 89] {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                let t = Tensor::from_vec(v, (1, 5, 6, 3), &Device::Cpu).unwrap();
                objective(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel <= 1e-3, "index {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    fn features(s: &mut ParamStore, dims: &[usize; 5], b: usize, n: usize) -> Vec<Tensor> {
        (0..5).map(|i| rand(s, &format!("feat{i}_{}", s.num_params()), &[b, n >> i, n >> i, dims[i]])).collect()
    }

    #[test]
    fn zero_init_gives_zero_field() {
        let dims = [4, 4, 6, 6, 8];
        for (nr, nn) in [(1, 4), (0, 5), (5, 0), (2, 3)] {
            let mut s = ParamStore::new(6, DType::F32);
            let cfg = HppmConfig { n_rigid: nr, n_nonrigid: nn, mixer: MixerKind::Scan };
            let hppm = Hppm::new(&mut s, &dims, cfg).unwrap();
            let f = features(&mut s, &dims, 2, 32);
            let m = features(&mut s, &dims, 2, 32);
            let out = hppm.forward(&f, &m).unwrap();
            assert_eq!(out.final_field.dims(), &[2, 32, 32, 2]);
            for (i, phi) in out.per_scale_fields.iter().enumerate() {
                assert_eq!(phi.dims()[1], 32 >> i);
            }
            assert!(to_f64_vec(&out.final_field).unwrap().iter().all(|v| *v == 0.0));
            match out.rigid_params {
                Some(p) => {
                    for row in to_f64_vec(&p).unwrap().chunks(4) {
                        assert!((row[0]).abs() < 1e-7 && (row[1] - 1.0).abs() < 1e-6);
                    }
                }
                None => assert_eq!(nr, 0),
            }
        }
    }

    #[test]
    fn composition_of_similarities() {
        let p = |r: f64, s: f64, ty: f64, tx: f64| Tensor::new(&[[r, s, ty, tx]], &Device::Cpu).unwrap();
        let one = p(0.1, 1.1, 0.02, -0.01);
        let same = compose_similarities(&[one.clone()]).unwrap().unwrap();
        assert_eq!(to_f64_vec(&same).unwrap(), to_f64_vec(&one).unwrap());
        let two = compose_similarities(&[one.clone(), p(0.0, 1.0, 0.03, 0.0)]).unwrap().unwrap();
        let v = to_f64_vec(&two).unwrap();
        assert!((v[0] - 0.1).abs() < 1e-12 && (v[1] - 1.1).abs() < 1e-12);
        assert!((v[2] - 0.05).abs() < 1e-12 && (v[3] + 0.01).abs() < 1e-12);
        // the composite flow equals the sum of both step flows
        let a = p(0.2, 0.95, 0.01, 0.02);
        let b = p(-0.1, 1.05, -0.03, 0.01);
        let c = compose_similarities(&[a.clone(), b.clone()]).unwrap().unwrap();
        let sum = (geometry::rigid_flow_tensor(&a, 8, 8).unwrap() + geometry::rigid_flow_tensor(&b, 8, 8).unwrap()).unwrap();
        let direct = geometry::rigid_flow_tensor(&c, 8, 8).unwrap();
        for (x, y) in to_f64_vec(&sum).unwrap().iter().zip(to_f64_vec(&direct).unwrap()) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
