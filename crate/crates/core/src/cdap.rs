//! Shared/private decomposition, cross-scale attention gating and the
//! input-conditioned orthonormal projection of the shared stream.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, NUM_LEVELS};
use crate::error::{HrError, Result};
use crate::nn::{gap, sigmoid, softmax_last, softplus, to_f64_vec, Conv2d, Init, Linear, ParamStore};
use crate::ops;

const NS_ITERS: usize = 12;
const GAMMA_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct CdapConfig {
    pub widths: [usize; NUM_LEVELS],
    /// Projection rank; `None` keeps the full channel count at each scale.
    pub d_sub: Option<usize>,
    pub hard_ortho: bool,
}

impl CdapConfig {
    pub fn sub_dims(&self) -> Result<[usize; NUM_LEVELS]> {
        let mut out = self.widths;
        if let Some(d) = self.d_sub {
            for (i, c) in self.widths.iter().enumerate() {
                if d == 0 || d > *c {
                    return Err(HrError::Config(format!("d_sub {d} must be in 1..={c} at scale {i}")));
                }
                out[i] = d;
            }
        }
        Ok(out)
    }
}

/// Per-scale extractors `E_sh` (shared across modalities), `E_pf`, `E_pm`.
#[derive(Clone)]
pub struct Decompose {
    pub shared: Vec<Conv2d>,
    pub private_fixed: Vec<Conv2d>,
    pub private_moving: Vec<Conv2d>,
}

impl Decompose {
    pub fn new(store: &mut ParamStore, widths: &[usize; NUM_LEVELS]) -> Result<Self> {
        let mut make = |kind: &str| -> Result<Vec<Conv2d>> {
            widths
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv2d::new(store, &format!("cdap.scale{i}.{kind}"), c, c, 3, 1))
                .collect()
        };
        Ok(Self { shared: make("e_sh")?, private_fixed: make("e_pf")?, private_moving: make("e_pm")? })
    }

    /// Returns `(F^s, F^p, M^s, M^p)` per scale.
    #[allow(clippy::type_complexity)]
    pub fn forward(
        &self,
        f: &FeaturePyramid,
        m: &FeaturePyramid,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
        let run = |convs: &[Conv2d], p: &FeaturePyramid| -> Result<Vec<Tensor>> {
            convs.iter().zip(&p.levels).map(|(c, x)| c.forward(x)).collect()
        };
        Ok((
            run(&self.shared, f)?,
            run(&self.private_fixed, f)?,
            run(&self.shared, m)?,
            run(&self.private_moving, m)?,
        ))
    }
}

/// Softmax-weighted sum over the three scale slots.
///
/// `q`: (B, d); `keys`/`values`: three (B, d) tensors. Returns (B, d).
pub fn attend(q: &Tensor, keys: &[Tensor; 3], values: &[Tensor; 3]) -> Result<Tensor> {
    let d = q.dims()[1] as f64;
    let logits = keys
        .iter()
        .map(|k| Ok((q * k)?.sum_keepdim(1)?))
        .collect::<Result<Vec<_>>>()?;
    let weights = softmax_last(&(Tensor::cat(&logits, 1)? / d.sqrt())?)?;
    let mut c = values[0].broadcast_mul(&weights.narrow(1, 0, 1)?)?;
    for (s, v) in values.iter().enumerate().skip(1) {
        c = (c + v.broadcast_mul(&weights.narrow(1, s, 1)?)?)?;
    }
    Ok(c)
}

/// Neighbour indices `(i-1, i, i+1)` with edge scales duplicated.
pub fn neighbours(i: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(NUM_LEVELS - 1)]
}

#[derive(Clone)]
struct IldaScale {
    q: Linear,
    k: [Linear; 3],
    v: [Linear; 3],
    mlp1: Linear,
    mlp2: Linear,
}

/// Cross-scale attention producing a per-channel gate at every scale.
#[derive(Clone)]
pub struct Ilda {
    scales: Vec<IldaScale>,
}

impl Ilda {
    pub fn new(store: &mut ParamStore, branch: &str, widths: &[usize; NUM_LEVELS]) -> Result<Self> {
        let mut scales = Vec::with_capacity(NUM_LEVELS);
        for i in 0..NUM_LEVELS {
            let d = widths[i];
            let p = format!("cdap.scale{i}.ilda_{branch}");
            let nb = neighbours(i);
            let mut k = Vec::new();
            let mut v = Vec::new();
            for (s, &j) in nb.iter().enumerate() {
                k.push(Linear::new(store, &format!("{p}.k{s}"), widths[j], d)?);
                v.push(Linear::new(store, &format!("{p}.v{s}"), widths[j], d)?);
            }
            scales.push(IldaScale {
                q: Linear::new(store, &format!("{p}.q"), d, d)?,
                k: k.try_into().ok().unwrap(),
                v: v.try_into().ok().unwrap(),
                mlp1: Linear::new(store, &format!("{p}.mlp1"), d, d)?,
                mlp2: Linear::new(store, &format!("{p}.mlp2"), d, widths[i])?,
            });
        }
        Ok(Self { scales })
    }

    /// Gates `(B, C_i)` in (0, 1) for every scale from GAP-pooled features.
    pub fn gates(&self, pooled: &[Tensor]) -> Result<Vec<Tensor>> {
        (0..NUM_LEVELS)
            .map(|i| {
                let s = &self.scales[i];
                let nb = neighbours(i);
                let q = s.q.forward(&pooled[i])?;
                let keys = [0, 1, 2].map(|j| s.k[j].forward(&pooled[nb[j]]));
                let values = [0, 1, 2].map(|j| s.v[j].forward(&pooled[nb[j]]));
                let [k0, k1, k2] = keys;
                let [v0, v1, v2] = values;
                let c = attend(&q, &[k0?, k1?, k2?], &[v0?, v1?, v2?])?;
                sigmoid(&s.mlp2.forward(&s.mlp1.forward(&c)?.relu()?)?)
            })
            .collect()
    }
}

/// `alpha_s ⊙ shared − gamma · alpha_p ⊙ private`, channel-wise.
pub fn suppress(shared: &Tensor, private: &Tensor, alpha_s: &Tensor, alpha_p: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let a_p = alpha_p.broadcast_mul(gamma)?;
    Ok((ops::mul_channels(shared, alpha_s)? - ops::mul_channels(private, &a_p)?)?)
}

/// Newton–Schulz orthonormalisation of the rows of a batch of `(d, C)`
/// matrices, `d ≤ C`.
pub fn orthonormalize(w: &Tensor) -> Result<Tensor> {
    let wt = w.transpose(1, 2)?;
    let gram = w.matmul(&wt)?;
    let scale = gram.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.sqrt()?.sqrt()?;
    let mut x = w.broadcast_div(&scale)?;
    for _ in 0..NS_ITERS {
        let xxt = x.matmul(&x.transpose(1, 2)?)?;
        x = ((&x * 1.5)? - (xxt.matmul(&x)? * 0.5)?)?;
    }
    Ok(x)
}

/// Applies `x · Wᵀ` at every location: `(B,H,W,C) × (B,d,C) → (B,H,W,d)`.
pub fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    let d = w.dims()[1];
    let y = x.reshape((b, h * wd, c))?.matmul(&w.transpose(1, 2)?.contiguous()?)?;
    Ok(y.reshape((b, h, wd, d))?)
}

#[derive(Clone)]
pub struct Dss {
    gens: Vec<Linear>,
    eye: Vec<Tensor>,
    sub: [usize; NUM_LEVELS],
    widths: [usize; NUM_LEVELS],
    hard_ortho: bool,
}

impl Dss {
    pub fn new(store: &mut ParamStore, cfg: &CdapConfig) -> Result<Self> {
        let sub = cfg.sub_dims()?;
        let mut gens = Vec::new();
        let mut eye = Vec::new();
        for i in 0..NUM_LEVELS {
            let (d, c) = (sub[i], cfg.widths[i]);
            let std = 0.01 / ((2 * c) as f64).sqrt();
            gens.push(Linear::with_init(store, &format!("cdap.scale{i}.dss_gen"), 2 * c, d * c, Init::Normal(std))?);
            let mut v = vec![0.0f64; d * c];
            for r in 0..d {
                v[r * c + r] = 1.0;
            }
            eye.push(Tensor::from_vec(v, (1, d, c), store.device())?.to_dtype(store.dtype())?);
        }
        Ok(Self { gens, eye, sub, widths: cfg.widths, hard_ortho: cfg.hard_ortho })
    }

    /// Returns the raw generator output and the basis used for projection.
    pub fn bases(&self, i: usize, gated_f: &Tensor, gated_m: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = Tensor::cat(&[gap(gated_f)?, gap(gated_m)?], 1)?;
        let b = z.dims()[0];
        let raw = self.gens[i]
            .forward(&z)?
            .reshape((b, self.sub[i], self.widths[i]))?
            .broadcast_add(&self.eye[i])?;
        let basis = if self.hard_ortho { orthonormalize(&raw)? } else { raw.clone() };
        Ok((raw, basis))
    }
}

/// Everything CDAP produces for one batch; each `Vec` holds one entry per scale.
#[derive(Clone, Debug)]
pub struct SharedPrivateBundle {
    pub shared_f: Vec<Tensor>,
    pub private_f: Vec<Tensor>,
    pub shared_m: Vec<Tensor>,
    pub private_m: Vec<Tensor>,
    pub gated_f: Vec<Tensor>,
    pub gated_m: Vec<Tensor>,
    pub proj_f: Vec<Tensor>,
    pub proj_m: Vec<Tensor>,
    /// Generator output before orthonormalisation, (B, d_sub, C).
    pub bases_raw: Vec<Tensor>,
    pub bases: Vec<Tensor>,
    pub alpha_s_f: Vec<Tensor>,
    pub alpha_p_f: Vec<Tensor>,
    pub alpha_s_m: Vec<Tensor>,
    pub alpha_p_m: Vec<Tensor>,
    pub gammas: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Cdap {
    pub decompose: Decompose,
    pub ilda_shared: Ilda,
    pub ilda_private: Ilda,
    pub dss: Dss,
    gamma_raw: Vec<Var>,
    pub config: CdapConfig,
}

impl Cdap {
    pub fn new(store: &mut ParamStore, config: CdapConfig) -> Result<Self> {
        let raw0 = (GAMMA_INIT.exp() - 1.0).ln();
        let gamma_raw = (0..NUM_LEVELS)
            .map(|i| store.param(format!("cdap.scale{i}.gamma"), &[1], Init::Const(raw0)))
            .collect::<Result<_>>()?;
        Ok(Self {
            decompose: Decompose::new(store, &config.widths)?,
            ilda_shared: Ilda::new(store, "shared", &config.widths)?,
            ilda_private: Ilda::new(store, "private", &config.widths)?,
            dss: Dss::new(store, &config)?,
            gamma_raw,
            config,
        })
    }

    pub fn gamma(&self, i: usize) -> Result<Tensor> {
        softplus(self.gamma_raw[i].as_tensor())
    }

    pub fn forward(&self, f: &FeaturePyramid, m: &FeaturePyramid) -> Result<SharedPrivateBundle> {
        let (shared_f, private_f, shared_m, private_m) = self.decompose.forward(f, m)?;
        let pool = |v: &[Tensor]| v.iter().map(gap).collect::<Result<Vec<_>>>();
        let alpha_s_f = self.ilda_shared.gates(&pool(&shared_f)?)?;
        let alpha_s_m = self.ilda_shared.gates(&pool(&shared_m)?)?;
        let alpha_p_f = self.ilda_private.gates(&pool(&private_f)?)?;
        let alpha_p_m = self.ilda_private.gates(&pool(&private_m)?)?;
        let gammas = (0..NUM_LEVELS).map(|i| self.gamma(i)).collect::<Result<Vec<_>>>()?;

        let mut out = SharedPrivateBundle {
            gated_f: Vec::new(),
            gated_m: Vec::new(),
            proj_f: Vec::new(),
            proj_m: Vec::new(),
            bases_raw: Vec::new(),
            bases: Vec::new(),
            shared_f,
            private_f,
            shared_m,
            private_m,
            alpha_s_f,
            alpha_p_f,
            alpha_s_m,
            alpha_p_m,
            gammas,
        };
        for i in 0..NUM_LEVELS {
            let gf = suppress(&out.shared_f[i], &out.private_f[i], &out.alpha_s_f[i], &out.alpha_p_f[i], &out.gammas[i])?;
            let gm = suppress(&out.shared_m[i], &out.private_m[i], &out.alpha_s_m[i], &out.alpha_p_m[i], &out.gammas[i])?;
            let (raw, basis) = self.dss.bases(i, &gf, &gm)?;
            out.proj_f.push(project(&gf, &basis)?);
            out.proj_m.push(project(&gm, &basis)?);
            out.gated_f.push(gf);
            out.gated_m.push(gm);
            out.bases_raw.push(raw);
            out.bases.push(basis);
        }
        Ok(out)
    }

    /// Output channel count per scale.
    pub fn out_dims(&self) -> Result<[usize; NUM_LEVELS]> {
        self.config.sub_dims()
    }
}

/// Gate histograms and suppression strengths gathered over an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDiagnostics {
    /// Equal-width bins over `[0, 1]`.
    pub bins: usize,
    pub scales: Vec<ScaleGates>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleGates {
    pub scale: usize,
    pub gamma: f64,
    pub alpha_shared: Vec<u64>,
    pub alpha_private: Vec<u64>,
}

impl GateDiagnostics {
    pub fn new(bins: usize) -> Self {
        let bins = bins.max(1);
        let scales = (0..NUM_LEVELS)
            .map(|scale| ScaleGates {
                scale,
                gamma: f64::NAN,
                alpha_shared: vec![0; bins],
                alpha_private: vec![0; bins],
            })
            .collect();
        Self { bins, scales }
    }

    /// Adds both modalities' gate values from one batch.
    pub fn accumulate(&mut self, b: &SharedPrivateBundle) -> Result<()> {
        let bins = self.bins;
        let fill = |hist: &mut [u64], t: &Tensor| -> Result<()> {
            for v in to_f64_vec(t)? {
                let k = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
                hist[k] += 1;
            }
            Ok(())
        };
        for (i, s) in self.scales.iter_mut().enumerate() {
            fill(&mut s.alpha_shared, &b.alpha_s_f[i])?;
            fill(&mut s.alpha_shared, &b.alpha_s_m[i])?;
            fill(&mut s.alpha_private, &b.alpha_p_f[i])?;
            fill(&mut s.alpha_private, &b.alpha_p_m[i])?;
            s.gamma = to_f64_vec(&b.gammas[i])?[0];
        }
        Ok(())
    }
}
