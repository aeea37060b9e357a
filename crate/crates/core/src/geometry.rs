//! Displacement fields, similarity parameters and the warping primitives.
//!
//! Conventions shared by every module:
//! * fields are backward maps: `out(p) = in(p + φ(p))`;
//! * displacements are `(dy, dx)` in pixels of the field's own resolution;
//! * sampling outside the image clamps to the border;
//! * batched tensors are NHWC, a field batch is `(B, H, W, 2)`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HrError, Result};
use crate::nn::to_f64_vec;
use crate::ops;

/// Modality tag of an image; each tag owns its own normalisation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn key(self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::B => "b",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = HrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Modality::A),
            "B" | "b" => Ok(Modality::B),
            other => Err(HrError::Config(format!("unknown modality tag `{other}`"))),
        }
    }
}

/// Planar `(C, H, W)` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub modality: Modality,
}

impl GridImage {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        modality: Modality,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return dim_err(format!(
                "image data has {} values, expected {channels}x{height}x{width}",
                data.len()
            ));
        }
        Ok(Self { channels, height, width, data, modality })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32, modality: Modality) -> Self {
        Self { channels, height, width, data: vec![v; channels * height * width], modality }
    }

    /// Single-channel image from a function of `(y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        modality: Modality,
        f: impl Fn(usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { channels: 1, height, width, data, modality }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// NHWC tensor of shape `(1, H, W, C)`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), &Device::Cpu)?
            .permute((1, 2, 0))?
            .unsqueeze(0)?
            .to_dtype(dtype)?;
        Ok(t.contiguous()?)
    }

    /// Inverse of [`GridImage::to_tensor`] for item `index` of a batch.
    pub fn from_tensor(t: &Tensor, index: usize, modality: Modality) -> Result<Self> {
        let (_, h, w, c) = t.dims4()?;
        let chw = t.get(index)?.permute((2, 0, 1))?.to_dtype(DType::F32)?;
        let data = chw.flatten_all()?.to_vec1::<f32>()?;
        Self::new(c, h, w, data, modality)
    }

    /// Luminance as a single plane (mean over channels).
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *o += *v as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.channels as f64);
        out
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }
}

/// Dense per-pixel `(dy, dx)` displacement stored row-major as `(H, W, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

const FLOW_MAGIC: &[u8; 8] = b"HRFLOW1\0";

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 2] }
    }

    pub fn constant(height: usize, width: usize, dy: f32, dx: f32) -> Self {
        let data = (0..height * width).flat_map(|_| [dy, dx]).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = f(y, x);
                data.push(dy);
                data.push(dx);
            }
        }
        Self { height, width, data }
    }

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return dim_err(format!(
                "field data has {} values, expected {height}x{width}x2",
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, self.height, self.width, 2), &Device::Cpu)?
            .to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, h, w, two) = t.dims4()?;
        if two != 2 {
            return dim_err(format!("field tensor has {two} channels"));
        }
        let data = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    /// Serialises to the `HRFLOW1` container: 8-byte magic, `u32` H, `u32` W,
    /// then `H·W·2` little-endian `f32` values in `(dy, dx)` row-major order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..8] != FLOW_MAGIC {
            return Err(HrError::Format("not an HRFLOW1 file".into()));
        }
        let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; h * w * 2 * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h, w, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Four-parameter similarity transform.
///
/// `translation` is `(ty, tx)` as a fraction of image height / width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub rotation: f64,
    pub scale: f64,
    pub translation: (f64, f64),
}

impl Default for RigidParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidParams {
    pub const IDENTITY: RigidParams = RigidParams { rotation: 0.0, scale: 1.0, translation: (0.0, 0.0) };

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(HrError::InvalidParameter(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }

    /// Raw tensor layout used by the network: `[rotation, scale, ty, tx]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.rotation, self.scale, self.translation.0, self.translation.1]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { rotation: a[0], scale: a[1], translation: (a[2], a[3]) }
    }

    /// Loss-space coordinates: `[rotation / π, ln scale, ty, tx]`.
    pub fn normalized(&self) -> [f64; 4] {
        [self.rotation / PI, self.scale.ln(), self.translation.0, self.translation.1]
    }

    /// The 2x2 linear part acting on `(y, x)` column vectors.
    pub fn matrix_yx(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        [[self.scale * c, self.scale * s], [-self.scale * s, self.scale * c]]
    }
}

fn check_same_field_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return dim_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Differentiable backward warp of an NHWC batch by a `(B, H, W, 2)` field.
pub fn warp_tensor(image: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (b, h, w, _) = image.dims4()?;
    let (fb, fh, fw, two) = field.dims4()?;
    if (b, h, w, 2) != (fb, fh, fw, two) {
        return dim_err(format!("warp: image {:?} vs field {:?}", image.dims(), field.dims()));
    }
    Ok(ops::warp(image, field)?)
}

/// Centred pixel coordinates `(yc, xc)` as `(1, H, W)` tensors.
fn centred_grid(h: usize, w: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut ys = Vec::with_capacity(h * w);
    let mut xs = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ys.push(y as f64 - cy);
            xs.push(x as f64 - cx);
        }
    }
    let dev = Device::Cpu;
    Ok((
        Tensor::from_vec(ys, (1, h, w), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(xs, (1, h, w), &dev)?.to_dtype(dtype)?,
    ))
}

/// Differentiable similarity-to-flow encoding for a `(B, 4)` batch of raw
/// `[rotation, scale, ty, tx]` parameters. Returns a `(B, h, w, 2)` field with
/// `φ(p) = s·R(θ)·p_c + t − p_c` in centred pixel coordinates.
pub fn rigid_flow_tensor(params: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, four) = params.dims2()?;
    if four != 4 {
        return dim_err(format!("rigid params must have 4 columns, got {four}"));
    }
    let (yc, xc) = centred_grid(h, w, params.dtype())?;
    let col = |i: usize| -> Result<Tensor> { Ok(params.narrow(1, i, 1)?.reshape((b, 1, 1))?) };
    let (rot, scale, ty, tx) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let sc = rot.cos()?.mul(&scale)?;
    let ss = rot.sin()?.mul(&scale)?;
    let dy = (sc.broadcast_mul(&yc)? + ss.broadcast_mul(&xc)?)?
        .broadcast_add(&(ty * h as f64)?)?
        .broadcast_sub(&yc)?;
    let dx = (sc.broadcast_mul(&xc)? - ss.broadcast_mul(&yc)?)?
        .broadcast_add(&(tx * w as f64)?)?
        .broadcast_sub(&xc)?;
    Ok(Tensor::stack(&[dy, dx], 3)?)
}

/// Maps raw `(B, 4)` parameters to loss space `[rot/π, ln s, ty, tx]`.
pub fn normalize_params_tensor(params: &Tensor) -> Result<Tensor> {
    let rot = (params.narrow(1, 0, 1)? / PI)?;
    let log_s = params.narrow(1, 1, 1)?.log()?;
    let t = params.narrow(1, 2, 2)?;
    Ok(Tensor::cat(&[rot, log_s, t], 1)?)
}

/// Bilinear 2x upsampling of a field batch; displacements are doubled to stay
/// in pixels of the new resolution.
pub fn upsample_flow_tensor(field: &Tensor) -> Result<Tensor> {
    let (_, _, _, two) = field.dims4()?;
    if two != 2 {
        return dim_err(format!("field must have 2 channels, got {two}"));
    }
    Ok((ops::upsample2x(field)? * 2.0)?)
}

/// Additive accumulation of an increment onto an already-upsampled estimate.
pub fn accumulate_tensor(prev: &Tensor, increment: &Tensor) -> Result<Tensor> {
    check_same_field_shape(prev, increment, "accumulate")?;
    Ok((prev + increment)?)
}

/// Mean-over-batch forward-difference smoothness energy:
/// `(1/S) Σ_p |∂φ/∂x|² + |∂φ/∂y|²` summed over both channels, `S = H·W`.
pub fn smoothness_energy_tensor(field: &Tensor) -> Result<Tensor> {
    let (b, h, w, _) = field.dims4()?;
    if h < 2 || w < 2 {
        return dim_err(format!("smoothness needs H, W >= 2, got {h}x{w}"));
    }
    let dx = (field.narrow(2, 1, w - 1)? - field.narrow(2, 0, w - 1)?)?;
    let dy = (field.narrow(1, 1, h - 1)? - field.narrow(1, 0, h - 1)?)?;
    let total = (dx.sqr()?.sum_all()? + dy.sqr()?.sum_all()?)?;
    Ok((total / (b * h * w) as f64)?)
}

// ----------------------------------------------------------------------------
// Plain-value conveniences over the tensor primitives.

pub fn warp(image: &GridImage, field: &DisplacementField) -> Result<GridImage> {
    if (image.height, image.width) != (field.height, field.width) {
        return dim_err(format!(
            "warp: image {}x{} vs field {}x{}",
            image.height, image.width, field.height, field.width
        ));
    }
    let out = warp_tensor(&image.to_tensor(DType::F32)?, &field.to_tensor(DType::F32)?)?;
    GridImage::from_tensor(&out, 0, image.modality)
}

pub fn rigid_to_flow(params: &RigidParams, h: usize, w: usize) -> Result<DisplacementField> {
    params.validate()?;
    if h < 2 || w < 2 {
        return dim_err(format!("rigid_to_flow needs H, W >= 2, got {h}x{w}"));
    }
    let p = Tensor::new(&[params.to_array()], &Device::Cpu)?;
    DisplacementField::from_tensor(&rigid_flow_tensor(&p, h, w)?, 0)
}

pub fn upsample_flow(field: &DisplacementField, factor: usize) -> Result<DisplacementField> {
    if factor != 2 {
        return Err(HrError::InvalidParameter(format!("upsample factor must be 2, got {factor}")));
    }
    DisplacementField::from_tensor(&upsample_flow_tensor(&field.to_tensor(DType::F32)?)?, 0)
}

pub fn accumulate(prev: &DisplacementField, increment: &DisplacementField) -> Result<DisplacementField> {
    if (prev.height, prev.width) != (increment.height, increment.width) {
        return dim_err(format!(
            "accumulate: {}x{} vs {}x{}",
            prev.height, prev.width, increment.height, increment.width
        ));
    }
    let data = prev.data.iter().zip(&increment.data).map(|(a, b)| a + b).collect();
    DisplacementField::new(prev.height, prev.width, data)
}

pub fn smoothness_energy(field: &DisplacementField) -> Result<f64> {
    let t = field.to_tensor(DType::F64)?;
    Ok(smoothness_energy_tensor(&t)?.to_scalar::<f64>()?)
}

/// Field values as `f64`, for callers doing host-side arithmetic.
pub fn field_values(t: &Tensor) -> Result<Vec<f64>> {
    to_f64_vec(t)
}
