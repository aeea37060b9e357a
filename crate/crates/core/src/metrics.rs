//! Reprojection error, normalised correlation and linear CKA.

use std::io::{Read, Write};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HrError, Result};
use crate::geometry::{DisplacementField, GridImage};

/// A metric value plus a flag set when the input was degenerate and the
/// value was defined by convention rather than computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReMode {
    /// Mean endpoint error over every pixel.
    #[default]
    Dense,
    /// Mean endpoint error over the four image corners.
    Corners,
}

fn endpoint(pred: &[f32], gt: &[f32], i: usize) -> f64 {
    let dy = pred[2 * i] as f64 - gt[2 * i] as f64;
    let dx = pred[2 * i + 1] as f64 - gt[2 * i + 1] as f64;
    (dy * dy + dx * dx).sqrt()
}

pub fn reprojection_error(pred: &DisplacementField, gt: &DisplacementField) -> Result<f64> {
    reprojection_error_with(pred, gt, ReMode::Dense)
}

pub fn reprojection_error_with(pred: &DisplacementField, gt: &DisplacementField, mode: ReMode) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return dim_err(format!(
            "reprojection error: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        ));
    }
    let (h, w) = (pred.height, pred.width);
    let idx: Vec<usize> = match mode {
        ReMode::Dense => (0..h * w).collect(),
        ReMode::Corners => vec![0, w - 1, (h - 1) * w, h * w - 1],
    };
    let sum: f64 = idx.iter().map(|&i| endpoint(&pred.data, &gt.data, i)).sum();
    Ok(sum / idx.len() as f64)
}

/// Dense reprojection error per batch element of `(B, H, W, 2)` fields.
pub fn reprojection_error_batch(pred: &Tensor, gt: &Tensor, mode: ReMode) -> Result<Vec<f64>> {
    if pred.dims() != gt.dims() {
        return dim_err(format!("reprojection error: {:?} vs {:?}", pred.dims(), gt.dims()));
    }
    (0..pred.dims()[0])
        .map(|b| {
            reprojection_error_with(
                &DisplacementField::from_tensor(pred, b)?,
                &DisplacementField::from_tensor(gt, b)?,
                mode,
            )
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Flagged {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Flagged { value: 0.0, degenerate: true };
    }
    Flagged { value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), degenerate: false }
}

/// Pearson correlation of the luminance channels. Constant inputs give 0
/// with the degenerate flag set.
pub fn ncc(a: &GridImage, b: &GridImage) -> Result<Flagged> {
    if (a.height, a.width) != (b.height, b.width) {
        return dim_err(format!("ncc: {}x{} vs {}x{}", a.height, a.width, b.height, b.width));
    }
    Ok(pearson(&a.luminance(), &b.luminance()))
}

/// Linear CKA between `(N, P)` and `(N, Q)` feature matrices (rows are
/// samples). All-zero centred inputs give 0 with the degenerate flag set.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<Flagged> {
    let (n, _) = x.dims2()?;
    let (ny, _) = y.dims2()?;
    if n != ny {
        return dim_err(format!("cka: {n} vs {ny} samples"));
    }
    if n < 2 {
        return Err(HrError::InvalidBatch(format!("cka needs at least 2 samples, got {n}")));
    }
    let x = x.to_dtype(DType::F64)?;
    let y = y.to_dtype(DType::F64)?;
    let xc = x.broadcast_sub(&x.mean_keepdim(0)?)?;
    let yc = y.broadcast_sub(&y.mean_keepdim(0)?)?;
    let fro2 = |a: &Tensor, b: &Tensor| -> Result<f64> {
        Ok(a.t()?.matmul(b)?.sqr()?.sum_all()?.to_scalar::<f64>()?)
    };
    let cross = fro2(&yc, &xc)?;
    let denom = fro2(&xc, &xc)?.sqrt() * fro2(&yc, &yc)?.sqrt();
    if denom <= 0.0 || !denom.is_finite() {
        return Ok(Flagged { value: 0.0, degenerate: true });
    }
    Ok(Flagged { value: (cross / denom).clamp(0.0, 1.0), degenerate: false })
}

/// CKA between two NHWC feature maps, treating every (sample, pixel) as an
/// observation and channels as features.
pub fn feature_map_cka(a: &Tensor, b: &Tensor) -> Result<Flagged> {
    let (ba, ha, wa, ca) = a.dims4()?;
    let (bb, hb, wb, cb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return dim_err(format!("cka: {:?} vs {:?}", a.dims(), b.dims()));
    }
    linear_cka(&a.reshape((ba * ha * wa, ca))?, &b.reshape((bb * hb * wb, cb))?)
}

/// One evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: usize,
    pub re: f64,
    pub ncc: f64,
    pub cka: [f64; 5],
    pub config_hash: String,
}

pub const CSV_HEADER: [&str; 9] =
    ["pair_id", "re", "ncc", "cka_s0", "cka_s1", "cka_s2", "cka_s3", "cka_s4", "config_hash"];

pub fn write_records_csv(records: &[EvalRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.pair_id.to_string(), r.re.to_string(), r.ncc.to_string()];
        row.extend(r.cka.iter().map(|v| v.to_string()));
        row.push(r.config_hash.clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(input: impl Read) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(HrError::Format(format!("unexpected CSV header: {header:?}")));
    }
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|e| HrError::Format(format!("row {}: column {}: {e}", line + 1, CSV_HEADER[i])))
        };
        out.push(EvalRecord {
            pair_id: row[0].parse().map_err(|e| HrError::Format(format!("row {}: pair_id: {e}", line + 1)))?,
            re: num(1)?,
            ncc: num(2)?,
            cka: [num(3)?, num(4)?, num(5)?, num(6)?, num(7)?],
            config_hash: row[8].to_string(),
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> HrError {
    HrError::Format(e.to_string())
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub re: MeanStd,
    pub ncc: MeanStd,
    pub cka: Vec<MeanStd>,
    pub config_hash: String,
}

impl EvalSummary {
    pub fn from_records(records: &[EvalRecord], config_hash: &str) -> Self {
        let col = |f: &dyn Fn(&EvalRecord) -> f64| MeanStd::of(&records.iter().map(f).collect::<Vec<_>>());
        Self {
            pairs: records.len(),
            re: col(&|r| r.re),
            ncc: col(&|r| r.ncc),
            cka: (0..5).map(|i| col(&|r| r.cka[i])).collect(),
            config_hash: config_hash.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Modality;
    use candle_core::Device;

    #[test]
    fn re_cases() {
        let z = DisplacementField::zeros(4, 5);
        assert_eq!(reprojection_error(&z, &z).unwrap(), 0.0);
        let c = DisplacementField::constant(4, 5, 3.0, 4.0);
        assert_eq!(reprojection_error(&c, &z).unwrap(), 5.0);
        assert_eq!(reprojection_error_with(&c, &z, ReMode::Corners).unwrap(), 5.0);
        assert!(reprojection_error(&c, &DisplacementField::zeros(5, 4)).is_err());
    }

    #[test]
    fn ncc_cases() {
        let a = GridImage::from_fn(6, 7, Modality::A, |y, x| ((y * 7 + x) as f32 * 0.37).sin());
        assert!((ncc(&a, &a).unwrap().value - 1.0).abs() < 1e-9);
        let neg = GridImage { data: a.data.iter().map(|v| 0.5 - v).collect(), ..a.clone() };
        assert!((ncc(&a, &neg).unwrap().value + 1.0).abs() < 1e-9);
        let aff = GridImage { data: a.data.iter().map(|v| 2.0 * v + 3.0).collect(), ..a.clone() };
        assert!((ncc(&a, &aff).unwrap().value - 1.0).abs() < 1e-6);
        let flat = GridImage::filled(1, 6, 7, 0.3, Modality::B);
        assert_eq!(ncc(&a, &flat).unwrap(), Flagged { value: 0.0, degenerate: true });
    }

    #[test]
    fn cka_cases() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut draw = |r: usize, c: usize| {
            let v: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::from_vec(v, (r, c), &Device::Cpu).unwrap()
        };
        let x = draw(256, 8);
        assert!((linear_cka(&x, &x).unwrap().value - 1.0).abs() < 1e-9);
        // orthogonal matrix from a 2-d rotation embedded in 8-d plus a swap
        let mut r = vec![0.0f64; 64];
        let (s, c) = 0.7f64.sin_cos();
        r[0] = c;
        r[1] = -s;
        r[8] = s;
        r[9] = c;
        for i in 2..8 {
            r[i * 8 + (if i % 2 == 0 { i + 1 } else { i - 1 })] = 1.0;
        }
        let rot = Tensor::from_vec(r, (8, 8), &Device::Cpu).unwrap();
        let xr = x.matmul(&rot).unwrap();
        assert!((linear_cka(&x, &xr).unwrap().value - 1.0).abs() < 1e-9);
        let y = draw(256, 8);
        assert!(linear_cka(&x, &y).unwrap().value < 0.2);
        let zero = Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(linear_cka(&zero, &draw(4, 3)).unwrap().degenerate);
    }

    #[test]
    fn csv_round_trip_and_summary() {
        let recs: Vec<EvalRecord> = (0..3)
            .map(|i| EvalRecord {
                pair_id: i,
                re: i as f64,
                ncc: 0.5,
                cka: [0.1, 0.2, 0.3, 0.4, 0.5],
                config_hash: "abc".into(),
            })
            .collect();
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("pair_id,re,ncc,cka_s0"));
        let back = read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let s = EvalSummary::from_records(&back, "abc");
        assert_eq!(s.re.mean, 1.0);
        assert!((s.re.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(read_records_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
