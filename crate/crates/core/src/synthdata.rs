//! Supervised pair synthesis: a source image, a sampled similarity + elastic
//! ground truth, and a second-modality rendering of the moving image.

use std::f64::consts::PI;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HrError, Result};
use crate::geometry::{self, DisplacementField, GridImage, Modality, RigidParams};

/// Symmetric sampling ranges for the similarity ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigidRanges {
    /// Half-width of the rotation range, degrees.
    pub rotation_deg: f64,
    /// Half-width of the translation range, fraction of image size.
    pub translation: f64,
    /// Half-width of the scale range around 1.
    pub scale: f64,
}

impl Default for RigidRanges {
    fn default() -> Self {
        Self { rotation_deg: 20.0, translation: 0.15, scale: 0.13 }
    }
}

impl RigidRanges {
    pub fn zero() -> Self {
        Self { rotation_deg: 0.0, translation: 0.0, scale: 0.0 }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self { rotation_deg: self.rotation_deg * f, translation: self.translation * f, scale: self.scale * f }
    }
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

pub fn sample_rigid(ranges: &RigidRanges, rng: &mut impl Rng) -> RigidParams {
    let rotation = symmetric(rng, ranges.rotation_deg.to_radians());
    let ty = symmetric(rng, ranges.translation);
    let tx = symmetric(rng, ranges.translation);
    let scale = 1.0 + symmetric(rng, ranges.scale);
    RigidParams { rotation, scale, translation: (ty, tx) }
}

/// Reflect-101-free ("symmetric") index folding as used by the classic
/// elastic-augmentation recipe; handles kernels wider than the image.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur of a single `(h, w)` plane with symmetric borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = reflect(x as isize + j as isize - radius, w);
                s += k * plane[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - radius, h);
                s += k * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Elastic displacement: uniform noise in `[-1, 1]²`, Gaussian-smoothed with
/// standard deviation `sigma`, scaled by `alpha` (pixels).
pub fn sample_elastic(alpha: f64, sigma: f64, h: usize, w: usize, rng: &mut impl Rng) -> Result<DisplacementField> {
    if !(sigma > 0.0) {
        return Err(HrError::InvalidParameter(format!("elastic sigma must be > 0, got {sigma}")));
    }
    if !(alpha >= 0.0) {
        return Err(HrError::InvalidParameter(format!("elastic alpha must be >= 0, got {alpha}")));
    }
    let mut noise = || -> Vec<f64> { (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect() };
    let ny = noise();
    let nx = noise();
    let sy = gaussian_blur(&ny, h, w, sigma);
    let sx = gaussian_blur(&nx, h, w, sigma);
    let data = sy
        .iter()
        .zip(&sx)
        .flat_map(|(a, b)| [(alpha * a) as f32, (alpha * b) as f32])
        .collect();
    DisplacementField::new(h, w, data)
}

/// Appearance transforms standing in for a second imaging modality. None of
/// them move any pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoKind {
    Invert,
    GammaBlur,
    GradientMagnitude,
    Speckle,
}

impl std::str::FromStr for PseudoKind {
    type Err = HrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invert" => Ok(Self::Invert),
            "gamma-blur" | "gamma+blur" => Ok(Self::GammaBlur),
            "gradient-magnitude" => Ok(Self::GradientMagnitude),
            "speckle" => Ok(Self::Speckle),
            other => Err(HrError::Config(format!("unknown pseudo-modality `{other}`"))),
        }
    }
}

impl PseudoKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Invert => "invert",
            Self::GammaBlur => "gamma-blur",
            Self::GradientMagnitude => "gradient-magnitude",
            Self::Speckle => "speckle",
        }
    }
}

const GAMMA: f64 = 2.2;
const GAMMA_BLUR_SIGMA: f64 = 1.0;
const SPECKLE_STD: f64 = 0.25;

/// Renders `image` in a pseudo second modality; the result carries tag `B`.
/// `seed` only matters for the stochastic `speckle` kind.
pub fn pseudo_modality(image: &GridImage, kind: PseudoKind, seed: u64) -> GridImage {
    let (h, w) = (image.height, image.width);
    let n = h * w;
    let mut data = Vec::with_capacity(image.data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speckle = Normal::new(0.0, SPECKLE_STD).unwrap();
    for c in 0..image.channels {
        let plane: Vec<f64> = image.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let out: Vec<f64> = match kind {
            PseudoKind::Invert => plane.iter().map(|v| 1.0 - v).collect(),
            PseudoKind::GammaBlur => {
                let g: Vec<f64> = plane.iter().map(|v| v.max(0.0).powf(GAMMA)).collect();
                gaussian_blur(&g, h, w, GAMMA_BLUR_SIGMA)
            }
            PseudoKind::GradientMagnitude => gradient_magnitude(&plane, h, w),
            PseudoKind::Speckle => plane
                .iter()
                .map(|v| v * (1.0 + speckle.sample(&mut rng)))
                .collect(),
        };
        data.extend(out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    GridImage { channels: image.channels, height: h, width: w, data, modality: Modality::B }
}

/// Central differences in the interior, one-sided at the borders.
fn gradient_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let d = |get: &dyn Fn(usize) -> f64, i: usize, n: usize| -> f64 {
        if n < 2 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            (get(i + 1) - get(i - 1)) / 2.0
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = d(&|xx| p[y * w + xx], x, w);
            let gy = d(&|yy| p[yy * w + x], y, h);
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Smooth procedural scene (Gaussian blobs plus low-frequency gratings)
/// normalised to `[0.05, 0.95]`.
pub fn synthetic_scene(h: usize, w: usize, channels: usize, rng: &mut impl Rng) -> GridImage {
    let size = h.min(w) as f64;
    let mut plane = vec![0.0; h * w];
    let blobs = 12;
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sy = rng.random_range(size / 16.0..size / 5.0);
        let sx = rng.random_range(size / 16.0..size / 5.0);
        let amp = rng.random_range(-1.0..1.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / sy;
                let dx = (x as f64 - cx) / sx;
                plane[y * w + x] += amp * (-0.5 * (dy * dy + dx * dx)).exp();
            }
        }
    }
    for _ in 0..2 {
        let theta = rng.random_range(0.0..PI);
        let wavelength = rng.random_range(size / 4.0..size);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.1..0.3);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let t = (c * x as f64 + s * y as f64) * 2.0 * PI / wavelength + phase;
                plane[y * w + x] += amp * t.sin();
            }
        }
    }
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let base: Vec<f32> = plane.iter().map(|v| (0.05 + 0.9 * (v - lo) / span) as f32).collect();
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        // mild per-channel tint so colour inputs are not exactly grey
        let gain = 1.0 - 0.05 * c as f32;
        data.extend(base.iter().map(|v| (v * gain).clamp(0.0, 1.0)));
    }
    GridImage { channels, height: h, width: w, data, modality: Modality::A }
}

/// Ground-truth transform recipe for one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub rigid: RigidParams,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        self.rigid.validate()?;
        if !(self.elastic_alpha >= 0.0) {
            return Err(HrError::InvalidParameter("elastic_alpha must be >= 0".into()));
        }
        if !(self.elastic_sigma > 0.0) {
            return Err(HrError::InvalidParameter("elastic_sigma must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub fixed: GridImage,
    pub moving: GridImage,
    pub gt_rigid: RigidParams,
    pub gt_field: DisplacementField,
    pub gt_rigid_image: GridImage,
    pub gt_registered_image: GridImage,
    /// Mean absolute re-alignment error of the moving rendering, measured
    /// over pixels whose ground-truth sample stays inside the frame.
    pub inversion_residual: f64,
}

/// Inverts `p ↦ p + φ(p)` where `φ = rigid + elastic` by fixed-point
/// iteration `u ← q − φ(u)`. The rigid part is evaluated analytically so
/// points that leave the frame are handled exactly; the elastic part is
/// sampled bilinearly with border clamping.
fn inverse_field(rigid: &RigidParams, elastic: &DisplacementField) -> DisplacementField {
    let (h, w) = (elastic.height, elastic.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let m = rigid.matrix_yx();
    let (ty, tx) = (rigid.translation.0 * h as f64, rigid.translation.1 * w as f64);
    let rigid_at = |y: f64, x: f64| {
        let (yc, xc) = (y - cy, x - cx);
        (m[0][0] * yc + m[0][1] * xc + ty - yc, m[1][0] * yc + m[1][1] * xc + tx - xc)
    };
    let elastic_at = |y: f64, x: f64| {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let v = |yy, xx| {
            let (a, b) = elastic.at(yy, xx);
            (a as f64, b as f64)
        };
        let (a00, b00) = v(y0, x0);
        let (a01, b01) = v(y0, x1);
        let (a10, b10) = v(y1, x0);
        let (a11, b11) = v(y1, x1);
        let lerp = |p00: f64, p01: f64, p10: f64, p11: f64| {
            (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11)
        };
        (lerp(a00, a01, a10, a11), lerp(b00, b01, b10, b11))
    };
    DisplacementField::from_fn(h, w, |y, x| {
        let (qy, qx) = (y as f64, x as f64);
        let (mut uy, mut ux) = (qy, qx);
        for _ in 0..100 {
            let (ry, rx) = rigid_at(uy, ux);
            let (ey, ex) = elastic_at(uy, ux);
            let (ny, nx) = (qy - ry - ey, qx - rx - ex);
            let delta = (ny - uy).abs() + (nx - ux).abs();
            uy = ny;
            ux = nx;
            if delta < 1e-7 {
                break;
            }
        }
        ((uy - qy) as f32, (ux - qx) as f32)
    })
}

/// Builds one supervised pair from a modality-A source image.
///
/// `fixed` is the source itself. `moving` is the pseudo-modality rendering
/// resampled by the inverse of `gt_field`, so that `warp(moving, gt_field)`
/// re-aligns it with `fixed`.
pub fn make_pair(source: &GridImage, spec: &TransformSpec, kind: PseudoKind) -> Result<TrainingPair> {
    spec.validate()?;
    let (h, w) = (source.height, source.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rigid_flow = geometry::rigid_to_flow(&spec.rigid, h, w)?;
    let elastic = if spec.elastic_alpha > 0.0 {
        sample_elastic(spec.elastic_alpha, spec.elastic_sigma, h, w, &mut rng)?
    } else {
        DisplacementField::zeros(h, w)
    };
    let gt_field = geometry::accumulate(&rigid_flow, &elastic)?;
    let fixed = source.clone().with_modality(Modality::A);
    let appearance = pseudo_modality(source, kind, spec.seed ^ 0x5eed_5eed);
    let inverse = inverse_field(&spec.rigid, &elastic);
    let moving = geometry::warp(&appearance, &inverse)?.with_modality(Modality::B);
    let gt_registered_image = geometry::warp(&moving, &gt_field)?;
    let gt_rigid_image = geometry::warp(&moving, &rigid_flow)?;

    let mut err = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = gt_field.at(y, x);
            let (sy, sx) = (y as f32 + dy, x as f32 + dx);
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f32 || sx > (w - 1) as f32 {
                continue;
            }
            for c in 0..source.channels {
                err += (gt_registered_image.at(c, y, x) - appearance.at(c, y, x)).abs() as f64;
                count += 1;
            }
        }
    }
    let inversion_residual = if count > 0 { err / count as f64 } else { 0.0 };

    Ok(TrainingPair {
        fixed,
        moving,
        gt_rigid: spec.rigid,
        gt_field,
        gt_rigid_image,
        gt_registered_image,
        inversion_residual,
    })
}

/// Recipe for generating a set of synthetic pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub rigid: RigidRanges,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub pseudo: PseudoKind,
    /// Maximum mean inversion residual before a pair is rejected.
    pub max_residual: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            rigid: RigidRanges::default(),
            elastic_alpha: 35.0,
            elastic_sigma: 9.0,
            pseudo: PseudoKind::GammaBlur,
            max_residual: 2e-2,
        }
    }
}

/// Derives an independent per-item seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates pair `index` of a seeded stream. Each pair depends only on
/// `(seed, index)`, so pairs can be produced in any order or in parallel.
/// Pairs whose inversion residual exceeds `cfg.max_residual` are resampled.
pub fn generate_pair(
    cfg: &SynthConfig,
    sources: Option<&[GridImage]>,
    seed: u64,
    index: u64,
) -> Result<TrainingPair> {
    let mut last = None;
    for attempt in 0..16u64 {
        let pair_seed = derive_seed(seed, index.wrapping_mul(31).wrapping_add(attempt));
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let source = match sources {
            Some(list) if !list.is_empty() => list[rng.random_range(0..list.len())].clone(),
            _ => synthetic_scene(cfg.image_size, cfg.image_size, cfg.channels, &mut rng),
        };
        let spec = TransformSpec {
            rigid: sample_rigid(&cfg.rigid, &mut rng),
            elastic_alpha: cfg.elastic_alpha,
            elastic_sigma: cfg.elastic_sigma,
            seed: rng.random(),
        };
        let pair = make_pair(&source, &spec, cfg.pseudo)?;
        if pair.inversion_residual <= cfg.max_residual {
            return Ok(pair);
        }
        last = Some(pair);
    }
    let pair = last.expect("at least one attempt");
    log::warn!(
        "pair {index}: inversion residual {:.4} above {:.4} after 16 attempts; keeping last",
        pair.inversion_residual,
        cfg.max_residual
    );
    Ok(pair)
}

pub fn generate_pairs(cfg: &SynthConfig, sources: Option<&[GridImage]>, seed: u64, n: usize) -> Result<Vec<TrainingPair>> {
    (0..n as u64).map(|i| generate_pair(cfg, sources, seed, i)).collect()
}

/// Stacked NHWC tensors for a batch of pairs.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub fixed: Tensor,
    pub moving: Tensor,
    /// Raw `[rotation, scale, ty, tx]` per pair, `(B, 4)`.
    pub gt_params: Tensor,
    pub gt_field: Tensor,
    pub gt_rigid_image: Tensor,
    pub gt_registered: Tensor,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[TrainingPair], dtype: DType) -> Result<Self> {
        if pairs.is_empty() {
            return Err(HrError::InvalidBatch("empty batch".into()));
        }
        let cat_images = |f: &dyn Fn(&TrainingPair) -> &GridImage| -> Result<Tensor> {
            let ts = pairs.iter().map(|p| f(p).to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&ts, 0)?)
        };
        let fields = pairs
            .iter()
            .map(|p| p.gt_field.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        let params: Vec<f64> = pairs.iter().flat_map(|p| p.gt_rigid.to_array()).collect();
        Ok(Self {
            fixed: cat_images(&|p| &p.fixed)?,
            moving: cat_images(&|p| &p.moving)?,
            gt_params: Tensor::from_vec(params, (pairs.len(), 4), &candle_core::Device::Cpu)?
                .to_dtype(dtype)?,
            gt_field: Tensor::cat(&fields, 0)?,
            gt_rigid_image: cat_images(&|p| &p.gt_rigid_image)?,
            gt_registered: cat_images(&|p| &p.gt_registered_image)?,
        })
    }

    pub fn len(&self) -> usize {
        self.fixed.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loads every image listed in `manifest` (one relative path per line) or,
/// without a manifest, every PNG/JPEG in `dir`, resized to `size × size`.
pub fn load_image_dir(dir: &Path, manifest: Option<&Path>, size: usize, channels: usize) -> Result<Vec<GridImage>> {
    let mut paths = Vec::new();
    match manifest {
        Some(m) => {
            for line in std::fs::read_to_string(m)?.lines() {
                let line = line.trim();
                if !line.is_empty() && !line.starts_with('#') {
                    paths.push(dir.join(line));
                }
            }
        }
        None => {
            for entry in std::fs::read_dir(dir)? {
                let p = entry?.path();
                let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
                if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                    paths.push(p);
                }
            }
            paths.sort();
        }
    }
    paths.iter().map(|p| load_image(p, size, channels)).collect()
}

pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<GridImage> {
    let img = image::open(path)?;
    let resized = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle);
    let n = size * size;
    let data = match channels {
        1 => resized.to_luma32f().into_raw(),
        3 => {
            let rgb = resized.to_rgb32f().into_raw();
            let mut planar = vec![0.0f32; 3 * n];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * n + i] = px[c];
                }
            }
            planar
        }
        other => return Err(HrError::Config(format!("channels must be 1 or 3, got {other}"))),
    };
    GridImage::new(channels, size, size, data, Modality::A)
}
