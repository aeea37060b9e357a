//! CPU kernels registered as candle custom ops.
//!
//! Every kernel works on contiguous NHWC tensors and is generic over `f32`
//! and `f64`, so the same differentiable code path serves both training
//! (single precision) and the double-precision gradient checks.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape,
    Tensor, WithDType,
};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

trait Real: WithDType + Float {}
impl<T: WithDType + Float> Real for T {}

fn data<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout, op: &'static str) -> CResult<&'a [T]> {
    let all = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&all[start..end]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

fn unsupported(op: &'static str, dt: DType) -> candle_core::Error {
    candle_core::Error::UnsupportedDTypeForOp(dt, op)
}

macro_rules! float_dispatch {
    ($op:expr, $dtype:expr, $run:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $run::<f32>($($arg),*),
            DType::F64 => $run::<f64>($($arg),*),
            dt => Err(unsupported($op, dt)),
        }
    };
}

/// Clamped bilinear tap along one axis: `(i0, i1, frac, inside)`.
///
/// `inside` is false when the unclamped coordinate fell outside `[0, n-1]`,
/// in which case the sample is constant with respect to the coordinate.
#[inline]
fn tap<T: Real>(pos: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((n - 1) as f64);
    let inside = pos >= T::zero() && pos <= hi;
    let p = Float::min(Float::max(pos, T::zero()), hi);
    if n == 1 {
        return (0, 0, T::zero(), inside);
    }
    let mut i0 = WithDType::to_f64(Float::floor(p)) as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    let frac = p - T::from_f64(i0 as f64);
    (i0, i0 + 1, frac, inside)
}

// ----------------------------------------------------------------------------
// im2col / col2im (NHWC)

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
    fn cols(&self) -> usize {
        self.k * self.k * self.c
    }
}

fn im2col_run<T: Real>(x: &[T], g: ConvGeom) -> CResult<(CpuStorage, Shape)> {
    let (oh, ow) = g.out_hw();
    let kk = g.cols();
    let mut out = vec![T::zero(); g.b * oh * ow * kk];
    for bi in 0..g.b {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((bi * oh + oy) * ow + ox) * kk;
                let row = &mut out[r..r + kk];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = (ky * g.k + kx) * g.c;
                        row[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((g.b * oh * ow, kk))))
}

fn col2im_run<T: Real>(cols: &[T], g: ConvGeom) -> CResult<(CpuStorage, Shape)> {
    let (oh, ow) = g.out_hw();
    let kk = g.cols();
    let mut out = vec![T::zero(); g.b * g.h * g.w * g.c];
    for bi in 0..g.b {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((bi * oh + oy) * ow + ox) * kk;
                let row = &cols[r..r + kk];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = (ky * g.k + kx) * g.c;
                        for (o, v) in out[dst..dst + g.c].iter_mut().zip(&row[src..src + g.c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    Ok((T::to_cpu_storage_owned(out), Shape::from((g.b, g.h, g.w, g.c))))
}

struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, h, w, c) = l.shape().dims4()?;
        let g = ConvGeom { b, h, w, c, k: self.k, stride: self.stride, pad: self.pad };
        fn run<T: Real>(s: &CpuStorage, l: &Layout, g: ConvGeom) -> CResult<(CpuStorage, Shape)> {
            im2col_run(data::<T>(s, l, "im2col")?, g)
        }
        float_dispatch!("im2col", s.dtype(), run(s, l, g))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (b, h, w, c) = arg.dims4()?;
        let g = ConvGeom { b, h, w, c, k: self.k, stride: self.stride, pad: self.pad };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(g))?))
    }
}

struct Col2Im(ConvGeom);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(s: &CpuStorage, l: &Layout, g: ConvGeom) -> CResult<(CpuStorage, Shape)> {
            col2im_run(data::<T>(s, l, "col2im")?, g)
        }
        float_dispatch!("col2im", s.dtype(), run(s, l, self.0))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = self.0;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col {
            k: g.k,
            stride: g.stride,
            pad: g.pad,
        })?))
    }
}

/// Unfolds `k×k` patches of an NHWC tensor into rows of a `(B·OH·OW, k·k·C)` matrix.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { k, stride, pad })
}

// ----------------------------------------------------------------------------
// Bilinear backward warp with border clamping.

fn warp_run<T: Real>(
    img: &[T],
    flow: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        let base = bi * h * w;
        for y in 0..h {
            for x in 0..w {
                let p = base + y * w + x;
                let sy = T::from_f64(y as f64) + flow[2 * p];
                let sx = T::from_f64(x as f64) + flow[2 * p + 1];
                let (y0, y1, fy, _) = tap(sy, h);
                let (x0, x1, fx, _) = tap(sx, w);
                let one = T::one();
                let w00 = (one - fy) * (one - fx);
                let w01 = (one - fy) * fx;
                let w10 = fy * (one - fx);
                let w11 = fy * fx;
                let i00 = (base + y0 * w + x0) * c;
                let i01 = (base + y0 * w + x1) * c;
                let i10 = (base + y1 * w + x0) * c;
                let i11 = (base + y1 * w + x1) * c;
                let o = &mut out[p * c..(p + 1) * c];
                for ch in 0..c {
                    o[ch] = w00 * img[i00 + ch]
                        + w01 * img[i01 + ch]
                        + w10 * img[i10 + ch]
                        + w11 * img[i11 + ch];
                }
            }
        }
    }
    out
}

fn warp_grad_image_run<T: Real>(
    flow: &[T],
    grad: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut gi = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        let base = bi * h * w;
        for y in 0..h {
            for x in 0..w {
                let p = base + y * w + x;
                let (y0, y1, fy, _) = tap(T::from_f64(y as f64) + flow[2 * p], h);
                let (x0, x1, fx, _) = tap(T::from_f64(x as f64) + flow[2 * p + 1], w);
                let one = T::one();
                let taps = [
                    ((base + y0 * w + x0) * c, (one - fy) * (one - fx)),
                    ((base + y0 * w + x1) * c, (one - fy) * fx),
                    ((base + y1 * w + x0) * c, fy * (one - fx)),
                    ((base + y1 * w + x1) * c, fy * fx),
                ];
                let g = &grad[p * c..(p + 1) * c];
                for (idx, wt) in taps {
                    for ch in 0..c {
                        gi[idx + ch] += wt * g[ch];
                    }
                }
            }
        }
    }
    gi
}

fn warp_grad_flow_run<T: Real>(
    img: &[T],
    flow: &[T],
    grad: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut gf = vec![T::zero(); b * h * w * 2];
    for bi in 0..b {
        let base = bi * h * w;
        for y in 0..h {
            for x in 0..w {
                let p = base + y * w + x;
                let (y0, y1, fy, in_y) = tap(T::from_f64(y as f64) + flow[2 * p], h);
                let (x0, x1, fx, in_x) = tap(T::from_f64(x as f64) + flow[2 * p + 1], w);
                let i00 = (base + y0 * w + x0) * c;
                let i01 = (base + y0 * w + x1) * c;
                let i10 = (base + y1 * w + x0) * c;
                let i11 = (base + y1 * w + x1) * c;
                let one = T::one();
                let g = &grad[p * c..(p + 1) * c];
                let mut dy = T::zero();
                let mut dx = T::zero();
                for ch in 0..c {
                    let (v00, v01, v10, v11) =
                        (img[i00 + ch], img[i01 + ch], img[i10 + ch], img[i11 + ch]);
                    // d/dfy and d/dfx of the bilinear blend
                    let ddy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
                    let ddx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
                    dy += g[ch] * ddy;
                    dx += g[ch] * ddx;
                }
                if in_y && h > 1 {
                    gf[2 * p] = dy;
                }
                if in_x && w > 1 {
                    gf[2 * p + 1] = dx;
                }
            }
        }
    }
    gf
}

fn check_warp_shapes(li: &Layout, lf: &Layout) -> CResult<(usize, usize, usize, usize)> {
    let dims = li.shape().dims4()?;
    let (fb, fh, fw, two) = lf.shape().dims4()?;
    if (fb, fh, fw) != (dims.0, dims.1, dims.2) || two != 2 {
        candle_core::bail!(
            "warp: image {:?} and flow {:?} disagree",
            li.shape(),
            lf.shape()
        );
    }
    Ok(dims)
}

struct Warp;

impl CustomOp2 for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn cpu_fwd(
        &self,
        si: &CpuStorage,
        li: &Layout,
        sf: &CpuStorage,
        lf: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = check_warp_shapes(li, lf)?;
        fn run<T: Real>(
            si: &CpuStorage,
            li: &Layout,
            sf: &CpuStorage,
            lf: &Layout,
            dims: (usize, usize, usize, usize),
        ) -> CResult<(CpuStorage, Shape)> {
            let out = warp_run(data::<T>(si, li, "warp")?, data::<T>(sf, lf, "warp")?, dims);
            Ok((T::to_cpu_storage_owned(out), li.shape().clone()))
        }
        float_dispatch!("warp", si.dtype(), run(si, li, sf, lf, dims))
    }

    fn bwd(
        &self,
        img: &Tensor,
        flow: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gi = flow.apply_op2_no_bwd(&grad, &WarpGradImage)?;
        let gf = img.apply_op3_no_bwd(flow, &grad, &WarpGradFlow)?;
        Ok((Some(gi), Some(gf)))
    }
}

struct WarpGradImage;

impl CustomOp2 for WarpGradImage {
    fn name(&self) -> &'static str {
        "warp-grad-image"
    }

    fn cpu_fwd(
        &self,
        sf: &CpuStorage,
        lf: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = check_warp_shapes(lg, lf)?;
        fn run<T: Real>(
            sf: &CpuStorage,
            lf: &Layout,
            sg: &CpuStorage,
            lg: &Layout,
            dims: (usize, usize, usize, usize),
        ) -> CResult<(CpuStorage, Shape)> {
            let out = warp_grad_image_run(
                data::<T>(sf, lf, "warp-grad-image")?,
                data::<T>(sg, lg, "warp-grad-image")?,
                dims,
            );
            Ok((T::to_cpu_storage_owned(out), lg.shape().clone()))
        }
        float_dispatch!("warp-grad-image", sf.dtype(), run(sf, lf, sg, lg, dims))
    }
}

struct WarpGradFlow;

impl CustomOp3 for WarpGradFlow {
    fn name(&self) -> &'static str {
        "warp-grad-flow"
    }

    fn cpu_fwd(
        &self,
        si: &CpuStorage,
        li: &Layout,
        sf: &CpuStorage,
        lf: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = check_warp_shapes(li, lf)?;
        #[allow(clippy::too_many_arguments)]
        fn run<T: Real>(
            si: &CpuStorage,
            li: &Layout,
            sf: &CpuStorage,
            lf: &Layout,
            sg: &CpuStorage,
            lg: &Layout,
            dims: (usize, usize, usize, usize),
        ) -> CResult<(CpuStorage, Shape)> {
            let out = warp_grad_flow_run(
                data::<T>(si, li, "warp-grad-flow")?,
                data::<T>(sf, lf, "warp-grad-flow")?,
                data::<T>(sg, lg, "warp-grad-flow")?,
                dims,
            );
            Ok((T::to_cpu_storage_owned(out), lf.shape().clone()))
        }
        float_dispatch!("warp-grad-flow", si.dtype(), run(si, li, sf, lf, sg, lg, dims))
    }
}

/// Samples `img` (B,H,W,C) at `p + flow(p)` with bilinear interpolation and
/// border clamping; `flow` is (B,H,W,2) in `(dy, dx)` pixel order.
pub fn warp(img: &Tensor, flow: &Tensor) -> CResult<Tensor> {
    img.contiguous()?.apply_op2(&flow.contiguous()?, Warp)
}

// ----------------------------------------------------------------------------
// 2x bilinear upsampling (half-pixel centres, clamped borders)

fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|f| {
            let src = ((f as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (src.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_run<T: Real>(x: &[T], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * oh * ow * c];
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fy = T::from_f64(fy);
                let fx = T::from_f64(fx);
                let one = T::one();
                let ws = [
                    ((bi * h + y0) * w + x0, (one - fy) * (one - fx)),
                    ((bi * h + y0) * w + x1, (one - fy) * fx),
                    ((bi * h + y1) * w + x0, fy * (one - fx)),
                    ((bi * h + y1) * w + x1, fy * fx),
                ];
                let o = ((bi * oh + oy) * ow + ox) * c;
                for (idx, wt) in ws {
                    for ch in 0..c {
                        out[o + ch] += wt * x[idx * c + ch];
                    }
                }
            }
        }
    }
    out
}

fn upsample_adjoint_run<T: Real>(g: &[T], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fy = T::from_f64(fy);
                let fx = T::from_f64(fx);
                let one = T::one();
                let ws = [
                    ((bi * h + y0) * w + x0, (one - fy) * (one - fx)),
                    ((bi * h + y0) * w + x1, (one - fy) * fx),
                    ((bi * h + y1) * w + x0, fy * (one - fx)),
                    ((bi * h + y1) * w + x1, fy * fx),
                ];
                let gi = ((bi * oh + oy) * ow + ox) * c;
                for (idx, wt) in ws {
                    for ch in 0..c {
                        out[idx * c + ch] += wt * g[gi + ch];
                    }
                }
            }
        }
    }
    out
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        fn run<T: Real>(
            s: &CpuStorage,
            l: &Layout,
            dims: (usize, usize, usize, usize),
        ) -> CResult<(CpuStorage, Shape)> {
            let out = upsample_run(data::<T>(s, l, "upsample2x")?, dims);
            let (b, h, w, c) = dims;
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, 2 * h, 2 * w, c))))
        }
        float_dispatch!("upsample2x", s.dtype(), run(s, l, dims))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let dims = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Upsample2xAdjoint(dims))?))
    }
}

struct Upsample2xAdjoint((usize, usize, usize, usize));

impl CustomOp1 for Upsample2xAdjoint {
    fn name(&self) -> &'static str {
        "upsample2x-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Real>(
            s: &CpuStorage,
            l: &Layout,
            dims: (usize, usize, usize, usize),
        ) -> CResult<(CpuStorage, Shape)> {
            let out = upsample_adjoint_run(data::<T>(s, l, "upsample2x-adjoint")?, dims);
            Ok((T::to_cpu_storage_owned(out), Shape::from(dims)))
        }
        float_dispatch!("upsample2x-adjoint", s.dtype(), run(s, l, self.0))
    }
}

/// Bilinear 2x spatial upsampling of an NHWC tensor (values unscaled).
pub fn upsample2x(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Upsample2x)
}

// ----------------------------------------------------------------------------
// First-order linear recurrence h_t = a_t * h_{t-1} + u_t along dim 1.

fn scan_run<T: Real>(a: &[T], u: &[T], (b, l, k): (usize, usize, usize), reverse: bool) -> Vec<T> {
    let mut h = vec![T::zero(); b * l * k];
    for bi in 0..b {
        let mut state = vec![T::zero(); k];
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            let off = (bi * l + t) * k;
            for j in 0..k {
                state[j] = a[off + j] * state[j] + u[off + j];
                h[off + j] = state[j];
            }
        }
    }
    h
}

/// Returns `[grad_a; grad_u]` stacked along a new leading axis.
fn scan_grad_run<T: Real>(
    a: &[T],
    h: &[T],
    g: &[T],
    (b, l, k): (usize, usize, usize),
    reverse: bool,
) -> Vec<T> {
    let n = b * l * k;
    let mut out = vec![T::zero(); 2 * n];
    let (ga, gu) = out.split_at_mut(n);
    for bi in 0..b {
        let mut carry = vec![T::zero(); k];
        for step in 0..l {
            // walk the recurrence backwards
            let t = if reverse { step } else { l - 1 - step };
            let off = (bi * l + t) * k;
            let prev = if reverse {
                (t + 1 < l).then(|| (bi * l + t + 1) * k)
            } else {
                (t > 0).then(|| (bi * l + t - 1) * k)
            };
            for j in 0..k {
                let total = g[off + j] + carry[j];
                gu[off + j] = total;
                ga[off + j] = match prev {
                    Some(p) => total * h[p + j],
                    None => T::zero(),
                };
                carry[j] = total * a[off + j];
            }
        }
    }
    out
}

struct LinearScan {
    reverse: bool,
}

impl CustomOp2 for LinearScan {
    fn name(&self) -> &'static str {
        "linear-scan"
    }

    fn cpu_fwd(
        &self,
        sa: &CpuStorage,
        la: &Layout,
        su: &CpuStorage,
        lu: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        if la.shape() != lu.shape() {
            candle_core::bail!("linear-scan: {:?} vs {:?}", la.shape(), lu.shape());
        }
        let dims = la.shape().dims3()?;
        fn run<T: Real>(
            sa: &CpuStorage,
            la: &Layout,
            su: &CpuStorage,
            lu: &Layout,
            dims: (usize, usize, usize),
            reverse: bool,
        ) -> CResult<(CpuStorage, Shape)> {
            let h = scan_run(
                data::<T>(sa, la, "linear-scan")?,
                data::<T>(su, lu, "linear-scan")?,
                dims,
                reverse,
            );
            Ok((T::to_cpu_storage_owned(h), la.shape().clone()))
        }
        float_dispatch!("linear-scan", sa.dtype(), run(sa, la, su, lu, dims, self.reverse))
    }

    fn bwd(
        &self,
        a: &Tensor,
        _u: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let both = a.apply_op3_no_bwd(
            &res.contiguous()?,
            &grad.contiguous()?,
            &LinearScanGrad { reverse: self.reverse },
        )?;
        Ok((Some(both.get(0)?), Some(both.get(1)?)))
    }
}

struct LinearScanGrad {
    reverse: bool,
}

impl CustomOp3 for LinearScanGrad {
    fn name(&self) -> &'static str {
        "linear-scan-grad"
    }

    fn cpu_fwd(
        &self,
        sa: &CpuStorage,
        la: &Layout,
        sh: &CpuStorage,
        lh: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = la.shape().dims3()?;
        #[allow(clippy::too_many_arguments)]
        fn run<T: Real>(
            sa: &CpuStorage,
            la: &Layout,
            sh: &CpuStorage,
            lh: &Layout,
            sg: &CpuStorage,
            lg: &Layout,
            dims: (usize, usize, usize),
            reverse: bool,
        ) -> CResult<(CpuStorage, Shape)> {
            let out = scan_grad_run(
                data::<T>(sa, la, "linear-scan-grad")?,
                data::<T>(sh, lh, "linear-scan-grad")?,
                data::<T>(sg, lg, "linear-scan-grad")?,
                dims,
                reverse,
            );
            let (b, l, k) = dims;
            Ok((T::to_cpu_storage_owned(out), Shape::from((2, b, l, k))))
        }
        float_dispatch!(
            "linear-scan-grad",
            sa.dtype(),
            run(sa, la, sh, lh, sg, lg, dims, self.reverse)
        )
    }
}

/// Evaluates `h_t = a_t ⊙ h_{t-1} + u_t` over the sequence axis of (B, L, K)
/// tensors, starting from a zero state. With `reverse` the scan runs from the
/// last token to the first.
pub fn linear_scan(a: &Tensor, u: &Tensor, reverse: bool) -> CResult<Tensor> {
    a.contiguous()?.apply_op2(&u.contiguous()?, LinearScan { reverse })
}

// ----------------------------------------------------------------------------
// Per-channel reductions and broadcasts over the last axis. A tensor
// (G·M·C elements) is viewed as G groups of M rows of C channels; a
// per-channel operand holds one C-vector per group.

fn channel_groups(x: &Shape, other: usize) -> CResult<(usize, usize, usize)> {
    let dims = x.dims();
    let c = *dims.last().unwrap_or(&1);
    if c == 0 || other % c != 0 {
        candle_core::bail!("channel op: operand of {other} elements for {x:?}");
    }
    let g = other / c;
    let n = x.elem_count();
    if g == 0 || (g != 1 && dims[0] != g) {
        candle_core::bail!("channel op: {g} groups do not match {x:?}");
    }
    Ok((g, n / (g * c), c))
}

struct ChannelSum {
    groups: usize,
    per_batch: bool,
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let c = *l.shape().dims().last().unwrap_or(&1);
        let (g, m, c) = channel_groups(l.shape(), self.groups * c)?;
        fn run<T: Real>(
            s: &CpuStorage,
            l: &Layout,
            (g, m, c): (usize, usize, usize),
            per_batch: bool,
        ) -> CResult<(CpuStorage, Shape)> {
            let x = data::<T>(s, l, "channel-sum")?;
            let mut out = vec![T::zero(); g * c];
            for gi in 0..g {
                let acc = &mut out[gi * c..(gi + 1) * c];
                for row in x[gi * m * c..(gi + 1) * m * c].chunks_exact(c) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a = *a + *v;
                    }
                }
            }
            let shape = if per_batch { Shape::from((g, c)) } else { Shape::from(c) };
            Ok((T::to_cpu_storage_owned(out), shape))
        }
        float_dispatch!("channel-sum", s.dtype(), run(s, l, (g, m, c), self.per_batch))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (g, m, c) = channel_groups(arg.shape(), grad.elem_count())?;
        let spread = grad.reshape((g, 1, c))?.broadcast_as((g, m, c))?.contiguous()?;
        Ok(Some(spread.reshape(arg.shape())?))
    }
}

/// Sums over every axis but the last (`per_batch = false`, giving `(C)`) or
/// over every axis but the first and last (`per_batch = true`, `(B, C)`).
pub fn channel_sum(x: &Tensor, per_batch: bool) -> CResult<Tensor> {
    let groups = if per_batch { x.dims()[0] } else { 1 };
    x.contiguous()?.apply_op1(ChannelSum { groups, per_batch })
}

#[derive(Clone, Copy)]
enum ChannelBinary {
    Add,
    Mul,
}

impl CustomOp2 for ChannelBinary {
    fn name(&self) -> &'static str {
        match self {
            ChannelBinary::Add => "add-channels",
            ChannelBinary::Mul => "mul-channels",
        }
    }

    fn cpu_fwd(&self, sx: &CpuStorage, lx: &Layout, sv: &CpuStorage, lv: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = channel_groups(lx.shape(), lv.shape().elem_count())?;
        fn run<T: Real>(
            sx: &CpuStorage,
            lx: &Layout,
            sv: &CpuStorage,
            lv: &Layout,
            (g, m, c): (usize, usize, usize),
            op: ChannelBinary,
        ) -> CResult<(CpuStorage, Shape)> {
            let x = data::<T>(sx, lx, "channel-op")?;
            let v = data::<T>(sv, lv, "channel-op")?;
            let mut out = Vec::with_capacity(x.len());
            for gi in 0..g {
                let vv = &v[gi * c..(gi + 1) * c];
                for row in x[gi * m * c..(gi + 1) * m * c].chunks_exact(c) {
                    match op {
                        ChannelBinary::Add => out.extend(row.iter().zip(vv).map(|(a, b)| *a + *b)),
                        ChannelBinary::Mul => out.extend(row.iter().zip(vv).map(|(a, b)| *a * *b)),
                    }
                }
            }
            Ok((T::to_cpu_storage_owned(out), lx.shape().clone()))
        }
        float_dispatch!(self.name(), sx.dtype(), run(sx, lx, sv, lv, dims, *self))
    }

    fn bwd(&self, x: &Tensor, v: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let per_batch = v.rank() == 2;
        match self {
            ChannelBinary::Add => Ok((Some(grad.clone()), Some(channel_sum(grad, per_batch)?))),
            ChannelBinary::Mul => {
                let gx = mul_channels(grad, v)?;
                let gv = channel_sum(&(grad * x)?, per_batch)?;
                Ok((Some(gx), Some(gv)))
            }
        }
    }
}

/// `x + v` with `v` of shape `(C)` or `(B, C)` broadcast over the rest of `x`.
pub fn add_channels(x: &Tensor, v: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&v.contiguous()?, ChannelBinary::Add)
}

/// `x ⊙ v` with `v` of shape `(C)` or `(B, C)` broadcast over the rest of `x`.
pub fn mul_channels(x: &Tensor, v: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&v.contiguous()?, ChannelBinary::Mul)
}

// ----------------------------------------------------------------------------
// Bidirectional selective scan.
//
// Per channel c and state n, with step size δ, input u, input map B, output
// map C and transition A:
//   h→_l = exp(δ_l A) h→_{l-1} + δ_l u_l B_l,   h←_l likewise from the end,
//   y_l  = Σ_n C_l (h→_l + h←_l).

#[derive(Clone, Copy)]
struct ScanDims {
    b: usize,
    l: usize,
    c: usize,
    n: usize,
}

impl ScanDims {
    fn from_layouts(lud: &Layout, lbc: &Layout, la: &Layout) -> CResult<Self> {
        let (b, l, c2) = lud.shape().dims3()?;
        let (bb, lb, n2) = lbc.shape().dims3()?;
        let (c, n) = la.shape().dims2()?;
        if bb != b || lb != l || c2 != 2 * c || n2 != 2 * n {
            candle_core::bail!(
                "selective-scan: ud {:?}, bc {:?}, a {:?}",
                lud.shape(),
                lbc.shape(),
                la.shape()
            );
        }
        Ok(Self { b, l, c, n })
    }
}

/// Discretised transition `exp(δ A)` and drive `δ u B` for every token of
/// batch `bi`, laid out `(L, C·N)`.
fn scan_discretise<T: Real>(ud: &[T], bc: &[T], a: &[T], d: ScanDims, bi: usize, da: &mut [T], drive: &mut [T]) {
    let k = d.c * d.n;
    for li in 0..d.l {
        let row = (bi * d.l + li) * 2 * d.c;
        let brow = (bi * d.l + li) * 2 * d.n;
        for ci in 0..d.c {
            let (u, delta) = (ud[row + ci], ud[row + d.c + ci]);
            for ni in 0..d.n {
                let j = li * k + ci * d.n + ni;
                da[j] = Float::exp(delta * a[ci * d.n + ni]);
                drive[j] = delta * u * bc[brow + ni];
            }
        }
    }
}

/// Runs both scan directions, writing states `(L, C·N)` into `hf` and `hb`.
fn scan_states<T: Real>(da: &[T], drive: &[T], l: usize, k: usize, hf: &mut [T], hb: &mut [T]) {
    for li in 0..l {
        for j in 0..k {
            let prev = if li > 0 { hf[(li - 1) * k + j] } else { T::zero() };
            hf[li * k + j] = da[li * k + j] * prev + drive[li * k + j];
        }
    }
    for li in (0..l).rev() {
        for j in 0..k {
            let next = if li + 1 < l { hb[(li + 1) * k + j] } else { T::zero() };
            hb[li * k + j] = da[li * k + j] * next + drive[li * k + j];
        }
    }
}

fn selective_scan_run<T: Real>(ud: &[T], bc: &[T], a: &[T], d: ScanDims) -> Vec<T> {
    let k = d.c * d.n;
    let mut y = vec![T::zero(); d.b * d.l * d.c];
    let buf = || vec![T::zero(); d.l * k];
    let (mut da, mut drive, mut hf, mut hb) = (buf(), buf(), buf(), buf());
    for bi in 0..d.b {
        scan_discretise(ud, bc, a, d, bi, &mut da, &mut drive);
        scan_states(&da, &drive, d.l, k, &mut hf, &mut hb);
        for li in 0..d.l {
            let brow = (bi * d.l + li) * 2 * d.n;
            for ci in 0..d.c {
                let mut acc = T::zero();
                for ni in 0..d.n {
                    let j = li * k + ci * d.n + ni;
                    acc = acc + bc[brow + d.n + ni] * (hf[j] + hb[j]);
                }
                y[(bi * d.l + li) * d.c + ci] = acc;
            }
        }
    }
    y
}

/// Gradients `(g_ud, g_bc, g_a)` of the selective scan for output grad `gy`.
fn selective_scan_grad_run(ud: &[f64], bc: &[f64], a: &[f64], gy: &[f64], d: ScanDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = d.c * d.n;
    let mut gud = vec![0.0; ud.len()];
    let mut gbc = vec![0.0; bc.len()];
    let mut ga = vec![0.0; a.len()];
    let buf = || vec![0.0f64; d.l * k];
    let (mut da, mut drive, mut hf, mut hb, mut g_drive, mut g_da) = (buf(), buf(), buf(), buf(), buf(), buf());
    let mut gh = buf();
    let mut lam = vec![0.0f64; k];
    for bi in 0..d.b {
        scan_discretise(ud, bc, a, d, bi, &mut da, &mut drive);
        scan_states(&da, &drive, d.l, k, &mut hf, &mut hb);
        for li in 0..d.l {
            let brow = (bi * d.l + li) * 2 * d.n;
            for ci in 0..d.c {
                let g = gy[(bi * d.l + li) * d.c + ci];
                for ni in 0..d.n {
                    gh[li * k + ci * d.n + ni] = g * bc[brow + d.n + ni];
                }
            }
        }
        // adjoint of the forward recurrence runs from the end
        lam.iter_mut().for_each(|v| *v = 0.0);
        for li in (0..d.l).rev() {
            for j in 0..k {
                let carry = if li + 1 < d.l { da[(li + 1) * k + j] * lam[j] } else { 0.0 };
                lam[j] = gh[li * k + j] + carry;
                g_drive[li * k + j] = lam[j];
                g_da[li * k + j] = if li > 0 { lam[j] * hf[(li - 1) * k + j] } else { 0.0 };
            }
        }
        lam.iter_mut().for_each(|v| *v = 0.0);
        for li in 0..d.l {
            for j in 0..k {
                let carry = if li > 0 { da[(li - 1) * k + j] * lam[j] } else { 0.0 };
                lam[j] = gh[li * k + j] + carry;
                g_drive[li * k + j] += lam[j];
                if li + 1 < d.l {
                    g_da[li * k + j] += lam[j] * hb[(li + 1) * k + j];
                }
            }
        }
        for li in 0..d.l {
            let row = (bi * d.l + li) * 2 * d.c;
            let brow = (bi * d.l + li) * 2 * d.n;
            let g_row = &gy[(bi * d.l + li) * d.c..(bi * d.l + li + 1) * d.c];
            for ci in 0..d.c {
                let (u, delta) = (ud[row + ci], ud[row + d.c + ci]);
                let (mut gu, mut gdelta) = (0.0, 0.0);
                for ni in 0..d.n {
                    let j = li * k + ci * d.n + ni;
                    let bm = bc[brow + ni];
                    let gd = g_drive[j];
                    let gexp = g_da[j] * da[j];
                    gu += gd * delta * bm;
                    gdelta += gd * u * bm + gexp * a[ci * d.n + ni];
                    gbc[brow + ni] += gd * delta * u;
                    gbc[brow + d.n + ni] += g_row[ci] * (hf[j] + hb[j]);
                    ga[ci * d.n + ni] += gexp * delta;
                }
                gud[row + ci] += gu;
                gud[row + d.c + ci] += gdelta;
            }
        }
    }
    (gud, gbc, ga)
}

struct SelectiveScan;

impl CustomOp3 for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective-scan"
    }

    fn cpu_fwd(
        &self,
        sud: &CpuStorage,
        lud: &Layout,
        sbc: &CpuStorage,
        lbc: &Layout,
        sa: &CpuStorage,
        la: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let d = ScanDims::from_layouts(lud, lbc, la)?;
        #[allow(clippy::too_many_arguments)]
        fn run<T: Real>(
            sud: &CpuStorage,
            lud: &Layout,
            sbc: &CpuStorage,
            lbc: &Layout,
            sa: &CpuStorage,
            la: &Layout,
            d: ScanDims,
        ) -> CResult<(CpuStorage, Shape)> {
            let y = selective_scan_run(
                data::<T>(sud, lud, "selective-scan")?,
                data::<T>(sbc, lbc, "selective-scan")?,
                data::<T>(sa, la, "selective-scan")?,
                d,
            );
            Ok((T::to_cpu_storage_owned(y), Shape::from((d.b, d.l, d.c))))
        }
        float_dispatch!("selective-scan", sud.dtype(), run(sud, lud, sbc, lbc, sa, la, d))
    }

    fn bwd(
        &self,
        ud: &Tensor,
        bc: &Tensor,
        a: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = ScanDims::from_layouts(ud.layout(), bc.layout(), a.layout())?;
        let flat = |t: &Tensor| t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (gud, gbc, ga) = selective_scan_grad_run(&flat(ud)?, &flat(bc)?, &flat(a)?, &flat(grad)?, d);
        let back = |v: Vec<f64>, like: &Tensor| Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype());
        Ok((Some(back(gud, ud)?), Some(back(gbc, bc)?), Some(back(ga, a)?)))
    }
}

/// Bidirectional selective scan. `ud` is (B, L, 2C) holding the input `u`
/// then the step size `δ`; `bc` is (B, L, 2N) holding the input map `B` then
/// the output map `C`; `a` is the (C, N) transition (negative for decay).
/// Returns (B, L, C).
pub fn selective_scan(ud: &Tensor, bc: &Tensor, a: &Tensor) -> CResult<Tensor> {
    ud.contiguous()?.apply_op3(&bc.contiguous()?, &a.contiguous()?, SelectiveScan)
}

// ----------------------------------------------------------------------------
// atan2

struct Atan2;

impl CustomOp2 for Atan2 {
    fn name(&self) -> &'static str {
        "atan2"
    }

    fn cpu_fwd(
        &self,
        sy: &CpuStorage,
        ly: &Layout,
        sx: &CpuStorage,
        lx: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        if ly.shape() != lx.shape() {
            candle_core::bail!("atan2: {:?} vs {:?}", ly.shape(), lx.shape());
        }
        fn run<T: Real>(
            sy: &CpuStorage,
            ly: &Layout,
            sx: &CpuStorage,
            lx: &Layout,
        ) -> CResult<(CpuStorage, Shape)> {
            let y = data::<T>(sy, ly, "atan2")?;
            let x = data::<T>(sx, lx, "atan2")?;
            let out: Vec<T> = y.iter().zip(x).map(|(&y, &x)| y.atan2(x)).collect();
            Ok((T::to_cpu_storage_owned(out), ly.shape().clone()))
        }
        float_dispatch!("atan2", sy.dtype(), run(sy, ly, sx, lx))
    }

    fn bwd(
        &self,
        y: &Tensor,
        x: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let r2 = (y.sqr()? + x.sqr()?)?;
        let gy = (grad * x)?.div(&r2)?;
        let gx = (grad * y)?.div(&r2)?.neg()?;
        Ok((Some(gy), Some(gx)))
    }
}

/// Elementwise, differentiable `atan2(y, x)`.
pub fn atan2(y: &Tensor, x: &Tensor) -> CResult<Tensor> {
    y.contiguous()?.apply_op2(&x.contiguous()?, Atan2)
}
