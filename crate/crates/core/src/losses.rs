//! Registration and disentanglement objectives, their weighted total and the
//! three-phase curriculum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HrError, Result};
use crate::geometry;
use crate::nn::{gap, scalar_f64};

pub const DEFAULT_MARGIN: f64 = 0.3;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return dim_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Parameter L1 (in normalised parameter space) plus image L1.
pub fn loss_rigid(theta_pre: &Tensor, theta_gt: &Tensor, img: &Tensor, img_gt: &Tensor) -> Result<Tensor> {
    same_shape(theta_pre, theta_gt, "rigid parameters")?;
    same_shape(img, img_gt, "rigidly registered images")?;
    Ok((mean_l1(theta_pre, theta_gt)? + mean_l1(img, img_gt)?)?)
}

/// Field L1 (mean over both displacement channels) plus image L1.
pub fn loss_nonrigid(phi_pre: &Tensor, phi_gt: &Tensor, img: &Tensor, img_gt: &Tensor) -> Result<Tensor> {
    same_shape(phi_pre, phi_gt, "displacement fields")?;
    same_shape(img, img_gt, "registered images")?;
    Ok((mean_l1(phi_pre, phi_gt)? + mean_l1(img, img_gt)?)?)
}

pub fn loss_smooth(phi: &Tensor) -> Result<Tensor> {
    geometry::smoothness_energy_tensor(phi)
}

fn pooled(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        2 => Ok(x.clone()),
        4 => gap(x),
        r => dim_err(format!("expected a (B,C) or (B,H,W,C) feature, got rank {r}")),
    }
}

/// `‖X_cᵀ Y_c / (B − 1)‖_F²` for batch-centred `(B, p)` and `(B, q)`.
pub fn cross_cov_sq(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let b = x.dims()[0];
    if b < 2 {
        return Err(HrError::InvalidBatch(format!("covariance needs at least 2 samples, got {b}")));
    }
    if y.dims()[0] != b {
        return dim_err(format!("batch sizes differ: {b} vs {}", y.dims()[0]));
    }
    let xc = x.broadcast_sub(&x.mean_keepdim(0)?)?;
    let yc = y.broadcast_sub(&y.mean_keepdim(0)?)?;
    let cov = (xc.t()?.matmul(&yc)? / (b as f64 - 1.0))?;
    Ok(cov.sqr()?.sum_all()?)
}

/// Weighted mean over scales of the shared/private cross-covariance energy
/// of both modalities. Features may be NHWC maps or pooled `(B, C)` vectors.
pub fn loss_ccd(
    shared_f: &[Tensor],
    private_f: &[Tensor],
    shared_m: &[Tensor],
    private_m: &[Tensor],
    weights: &[f64],
) -> Result<Tensor> {
    let l = shared_f.len();
    if l == 0 || [private_f.len(), shared_m.len(), private_m.len(), weights.len()].iter().any(|&n| n != l) {
        return dim_err("loss_ccd: per-scale inputs must have equal non-zero length");
    }
    let mut total: Option<Tensor> = None;
    for i in 0..l {
        let f = cross_cov_sq(&pooled(&shared_f[i])?, &pooled(&private_f[i])?)?;
        let m = cross_cov_sq(&pooled(&shared_m[i])?, &pooled(&private_m[i])?)?;
        let term = ((f + m)? * weights[i])?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.unwrap() / l as f64)?)
}

/// Mean over scales (and batch) of `‖W Wᵀ − I‖_F²`; bases are `(d, C)` or
/// `(B, d, C)`.
pub fn loss_bo(bases: &[Tensor]) -> Result<Tensor> {
    if bases.is_empty() {
        return dim_err("loss_bo: no bases");
    }
    let mut terms = Vec::with_capacity(bases.len());
    for w in bases {
        let w = if w.rank() == 2 { w.unsqueeze(0)? } else { w.clone() };
        let d = w.dims()[1];
        let eye = Tensor::eye(d, w.dtype(), w.device())?.unsqueeze(0)?;
        let gram = w.matmul(&w.transpose(1, 2)?)?;
        let e = gram.broadcast_sub(&eye)?.sqr()?.sum((1, 2))?.mean_all()?;
        terms.push(e);
    }
    let l = terms.len() as f64;
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / l)?)
}

fn truncate_pair(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = a.dims()[1].min(b.dims()[1]);
    Ok((a.narrow(1, 0, d)?, b.narrow(1, 0, d)?))
}

fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(1)?;
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    Ok((dot / (na * nb)?.maximum(1e-12)?)?)
}

fn cs_one(shared: &[Tensor]) -> Result<Tensor> {
    let l = shared.len();
    if l < 2 {
        return dim_err("loss_cs needs at least two scales");
    }
    let pooled = shared.iter().map(pooled).collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(l - 1);
    for i in 0..l - 1 {
        let (a, b) = truncate_pair(&pooled[i], &pooled[i + 1])?;
        terms.push((1.0 - cosine(&a, &b)?)?.mean_all()?);
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / (l - 1) as f64)?)
}

/// Adjacent-scale directional consistency of pooled shared features.
/// Vectors of unequal width are compared over their common leading
/// components. With `shared_m` the two modalities' terms are averaged.
pub fn loss_cs(shared_f: &[Tensor], shared_m: Option<&[Tensor]>) -> Result<Tensor> {
    let f = cs_one(shared_f)?;
    match shared_m {
        Some(m) => Ok(((f + cs_one(m)?)? * 0.5)?),
        None => Ok(f),
    }
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&n)?)
}

/// Squared Euclidean distance between L2-normalised rows, per sample.
pub fn triplet_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (a, b) = truncate_pair(a, b)?;
    Ok((unit_rows(&a)? - unit_rows(&b)?)?.sqr()?.sum(1)?)
}

fn hinge(margin: f64, pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    Ok(((pos - neg)? + margin)?.relu()?.mean_all()?)
}

/// Cross-modal triplet: the other modality's shared feature is the positive,
/// the anchor's own raw private feature is the negative.
pub fn loss_tri(
    shared_f: &[Tensor],
    shared_m: &[Tensor],
    private_f: &[Tensor],
    private_m: &[Tensor],
    margin: f64,
) -> Result<Tensor> {
    if !(margin > 0.0) {
        return Err(HrError::Config(format!("triplet margin must be > 0, got {margin}")));
    }
    let l = shared_f.len();
    if l == 0 || [shared_m.len(), private_f.len(), private_m.len()].iter().any(|&n| n != l) {
        return dim_err("loss_tri: per-scale inputs must have equal non-zero length");
    }
    let mut terms = Vec::with_capacity(l);
    for i in 0..l {
        let (fs, ms) = (pooled(&shared_f[i])?, pooled(&shared_m[i])?);
        let (fp, mp) = (pooled(&private_f[i])?, pooled(&private_m[i])?);
        let d_fm = triplet_distance(&fs, &ms)?;
        let a = hinge(margin, &d_fm, &triplet_distance(&fs, &fp)?)?;
        let b = hinge(margin, &d_fm, &triplet_distance(&ms, &mp)?)?;
        terms.push((a + b)?);
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / l as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumWeights {
    pub r: f64,
    pub n: f64,
    pub s: f64,
    pub tri: f64,
    pub cs: f64,
    pub ccd: f64,
    pub bo: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Mid,
    Late,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Mid => "mid",
            Phase::Late => "late",
        }
    }
}

pub const PHASE_BOUNDARIES: [f64; 2] = [0.10, 0.60];

pub fn phase(progress: f64) -> Phase {
    if progress < PHASE_BOUNDARIES[0] {
        Phase::Warmup
    } else if progress < PHASE_BOUNDARIES[1] {
        Phase::Mid
    } else {
        Phase::Late
    }
}

pub fn phase_weights(p: Phase) -> CurriculumWeights {
    let w = |r, n, s, tri, cs, ccd, bo| CurriculumWeights { r, n, s, tri, cs, ccd, bo };
    match p {
        Phase::Warmup => w(7.0, 6.0, 0.5, 0.5, 0.05, 0.0, 0.1),
        Phase::Mid => w(5.0, 10.0, 0.5, 1.0, 0.1, 0.05, 0.2),
        Phase::Late => w(3.0, 12.0, 0.7, 1.0, 0.1, 0.05, 0.2),
    }
}

/// Loss weights for a training-progress fraction in `[0, 1]`.
pub fn curriculum(progress: f64) -> CurriculumWeights {
    phase_weights(phase(progress))
}

/// Differentiable loss terms for one step; disabled terms are `None`.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub r: Option<Tensor>,
    pub n: Option<Tensor>,
    pub s: Option<Tensor>,
    pub tri: Option<Tensor>,
    pub cs: Option<Tensor>,
    pub ccd: Option<Tensor>,
    pub bo: Option<Tensor>,
}

impl LossTerms {
    fn weighted(&self, w: &CurriculumWeights) -> [(&Option<Tensor>, f64); 7] {
        [
            (&self.r, w.r),
            (&self.n, w.n),
            (&self.s, w.s),
            (&self.tri, w.tri),
            (&self.cs, w.cs),
            (&self.ccd, w.ccd),
            (&self.bo, w.bo),
        ]
    }
}

/// `Σ weight · term` over the present terms; `None` if every term is absent.
pub fn total_loss(terms: &LossTerms, w: &CurriculumWeights) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for (t, wt) in terms.weighted(w) {
        if let Some(t) = t {
            let x = (t * wt)?;
            total = Some(match total {
                Some(acc) => (acc + x)?,
                None => x,
            });
        }
    }
    Ok(total)
}

/// Scalar summary of one step, serialised as a metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub phase: Phase,
    pub l_r: f64,
    pub l_n: f64,
    pub l_s: f64,
    pub l_tri: f64,
    pub l_cs: f64,
    pub l_ccd: f64,
    pub l_bo: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(step: usize, progress: f64, terms: &LossTerms) -> Result<Self> {
        let v = |t: &Option<Tensor>| -> Result<f64> {
            t.as_ref().map(|t| scalar_f64(&t.to_dtype(DType::F64)?)).unwrap_or(Ok(0.0))
        };
        let p = phase(progress);
        let mut r = Self {
            step,
            phase: p,
            l_r: v(&terms.r)?,
            l_n: v(&terms.n)?,
            l_s: v(&terms.s)?,
            l_tri: v(&terms.tri)?,
            l_cs: v(&terms.cs)?,
            l_ccd: v(&terms.ccd)?,
            l_bo: v(&terms.bo)?,
            total: 0.0,
        };
        r.total = r.weighted_sum(&phase_weights(p));
        Ok(r)
    }

    pub fn weighted_sum(&self, w: &CurriculumWeights) -> f64 {
        w.r * self.l_r
            + w.n * self.l_n
            + w.s * self.l_s
            + w.tri * self.l_tri
            + w.cs * self.l_cs
            + w.ccd * self.l_ccd
            + w.bo * self.l_bo
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_n, self.l_s, self.l_tri, self.l_cs, self.l_ccd, self.l_bo, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, Init, ParamStore};
    use candle_core::{Device, Var};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn val(x: &Tensor) -> f64 {
        scalar_f64(x).unwrap()
    }

    #[test]
    fn registration_terms() {
        let th = t(&[0.1, 0.2, 0.3, 0.4], &[1, 4]);
        let img = t(&[0.2; 16], &[1, 4, 4, 1]);
        assert_eq!(val(&loss_rigid(&th, &th, &img, &img).unwrap()), 0.0);
        let shifted = (&img + 0.5).unwrap();
        assert!((val(&loss_rigid(&th, &th, &img, &shifted).unwrap()) - 0.5).abs() < 1e-12);
        let phi = Tensor::zeros((1, 4, 4, 2), DType::F64, &Device::Cpu).unwrap();
        let phi2 = phi.broadcast_add(&t(&[1.0, 0.0], &[2])).unwrap();
        assert!((val(&loss_nonrigid(&phi, &phi2, &img, &img).unwrap()) - 0.5).abs() < 1e-12);
        assert!(matches!(loss_nonrigid(&phi, &img, &img, &img), Err(HrError::Dimension(_))));
    }

    #[test]
    fn ccd_cases() {
        let mut s = ParamStore::new(1, DType::F64);
        let x = s.param("x", &[6, 3], Init::Uniform(1.0)).unwrap().as_tensor().clone();
        let zero = x.zeros_like().unwrap();
        assert_eq!(val(&loss_ccd(&[x.clone()], &[zero.clone()], &[x.clone()], &[zero], &[1.0]).unwrap()), 0.0);
        let one = x.narrow(0, 0, 1).unwrap();
        assert!(matches!(cross_cov_sq(&one, &one), Err(HrError::InvalidBatch(_))));
    }

    #[test]
    fn ccd_independent_features_are_near_zero() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut draw = |n| -> Tensor {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            t(&v, &[256, 4])
        };
        let (a, b, c, d) = (draw(1024), draw(1024), draw(1024), draw(1024));
        let v = val(&loss_ccd(&[a], &[b], &[c], &[d], &[1.0]).unwrap());
        // each of the 2·d² covariance entries has variance ≈ 1/(B−1)
        let expected = 2.0 * 16.0 / 255.0;
        assert!(v < 2.0 * expected, "{v}");
        let e = draw(1024);
        // planted leakage: value per modality ≈ ‖I‖_F² = d
        let leak = val(&cross_cov_sq(&e, &e).unwrap());
        assert!((leak - 4.0).abs() < 1.0, "{leak}");
    }

    #[test]
    fn bo_cases() {
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&loss_bo(&[eye.clone()]).unwrap()), 0.0);
        let two = (eye * 2.0).unwrap();
        assert!((val(&loss_bo(&[two]).unwrap()) - 27.0).abs() < 1e-12);
    }

    #[test]
    fn cs_cases() {
        let a = t(&[1.0, 0.0], &[1, 2]);
        let b = t(&[0.0, 1.0], &[1, 2]);
        let neg = t(&[-1.0, 0.0], &[1, 2]);
        assert!(val(&loss_cs(&[a.clone(), a.clone(), a.clone()], None).unwrap()).abs() < 1e-12);
        assert!((val(&loss_cs(&[a.clone(), b.clone()], None).unwrap()) - 1.0).abs() < 1e-12);
        assert!((val(&loss_cs(&[a.clone(), neg.clone()], None).unwrap()) - 2.0).abs() < 1e-12);
        let both = loss_cs(&[a.clone(), b.clone()], Some(&[a.clone(), a.clone()])).unwrap();
        assert!((val(&both) - 0.5).abs() < 1e-12);
        // widths 2 → 3: compared over the first two components
        let wide = t(&[1.0, 0.0, 5.0], &[1, 3]);
        assert!(val(&loss_cs(&[a, wide], None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tri_cases() {
        let a = t(&[1.0, 0.0], &[1, 2]);
        let far = t(&[-1.0, 0.0], &[1, 2]);
        assert_eq!(val(&loss_tri(&[a.clone()], &[a.clone()], &[far.clone()], &[far.clone()], 0.3).unwrap()), 0.0);
        // d_pos = d_neg → margin per term
        let v = val(&loss_tri(&[a.clone()], &[far.clone()], &[far.clone()], &[a.clone()], 0.3).unwrap());
        assert!((v - 0.6).abs() < 1e-12);
        // hand oracle: unit vectors (1,0) and (0.6,0.8)
        let p = t(&[3.0, 4.0], &[1, 2]);
        let d_pos = (1.0f64 - 0.6).powi(2) + 0.8f64.powi(2);
        let v = val(&loss_tri(&[a.clone()], &[p.clone()], &[p.clone()], &[far.clone()], 0.5).unwrap());
        let expect = (0.5f64 + d_pos - d_pos).max(0.0) + (0.5f64 + d_pos - (0.6f64 + 1.0).powi(2) - 0.8f64.powi(2)).max(0.0);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        assert!(matches!(loss_tri(&[a.clone()], &[a.clone()], &[a.clone()], &[a], 0.0), Err(HrError::Config(_))));
    }

    #[test]
    fn curriculum_table() {
        let w = curriculum(0.05);
        assert_eq!((w.r, w.ccd), (7.0, 0.0));
        assert_eq!(curriculum(0.30).n, 10.0);
        let late = curriculum(0.95);
        assert_eq!((late.n, late.s), (12.0, 0.7));
        assert_eq!(phase(0.10), Phase::Mid);
        assert_eq!(phase(0.60), Phase::Late);
    }

    #[test]
    fn total_is_weighted_sum() {
        let terms = LossTerms { n: Some(t(&[2.0], &[])), ..Default::default() };
        let w = curriculum(0.3);
        assert_eq!(val(&total_loss(&terms, &w).unwrap().unwrap()), 20.0);
        assert!(total_loss(&LossTerms::default(), &w).unwrap().is_none());
        let r = LossReport::new(0, 0.3, &terms).unwrap();
        assert_eq!(r.total, 20.0);
    }

    #[test]
    fn bo_descent_reaches_orthonormal() {
        use candle_nn::optim::{Optimizer, SGD};
        let mut s = ParamStore::new(8, DType::F64);
        let w: Var = s.param("w", &[8, 8], Init::Uniform(0.6)).unwrap();
        let eye = Tensor::eye(8, DType::F64, &Device::Cpu).unwrap();
        w.set(&(w.as_tensor() + &eye).unwrap()).unwrap();
        let mut opt = SGD::new(vec![w.clone()], 0.02).unwrap();
        for _ in 0..500 {
            opt.backward_step(&loss_bo(&[w.as_tensor().clone()]).unwrap()).unwrap();
        }
        let e = val(&loss_bo(&[w.as_tensor().clone()]).unwrap()).sqrt();
        assert!(e < 1e-3, "{e}");
        assert!(to_f64_vec(w.as_tensor()).unwrap().iter().all(|v| v.is_finite()));
    }
}
