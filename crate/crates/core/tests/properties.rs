use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{Optimizer, SGD};
use proptest::prelude::*;

use hrlab::cdap::attend;
use hrlab::geometry::{self, DisplacementField, GridImage, Modality, RigidParams};
use hrlab::losses::{self, curriculum, phase, phase_weights, Phase};
use hrlab::metrics::{self, ReMode};
use hrlab::nn::{scalar_f64, to_f64_vec};

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[yy * w + xx];
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
}

fn field_of(v: &[f64], h: usize, w: usize) -> DisplacementField {
    DisplacementField::new(h, w, v.iter().map(|x| *x as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_field_warp_is_exact(img in values(2 * 9 * 7, -5.0, 5.0)) {
        let image = GridImage::new(2, 9, 7, img.iter().map(|v| *v as f32).collect(), Modality::A).unwrap();
        let out = geometry::warp(&image, &DisplacementField::zeros(9, 7)).unwrap();
        prop_assert_eq!(out.data, image.data);
    }

    #[test]
    fn identity_similarity_is_the_zero_field(h in 2usize..24, w in 2usize..24) {
        let f = geometry::rigid_to_flow(&RigidParams::IDENTITY, h, w).unwrap();
        prop_assert!(f.max_abs() <= 1e-6);
    }

    #[test]
    fn rigid_warp_is_direct_similarity_resampling(
        rot in -0.6f64..0.6,
        scale in 0.8f64..1.25,
        ty in -0.15f64..0.15,
        tx in -0.15f64..0.15,
        fy in 0.05f64..0.3,
        fx in 0.05f64..0.3,
    ) {
        let (h, w) = (20usize, 24usize);
        let img: Vec<f64> = (0..h * w)
            .map(|i| ((i / w) as f64 * fy).sin() + ((i % w) as f64 * fx).cos())
            .collect();
        let params = tensor(&[rot, scale, ty, tx], &[1, 4]);
        let flow = geometry::rigid_flow_tensor(&params, h, w).unwrap();
        let got = to_f64_vec(&geometry::warp_tensor(&tensor(&img, &[1, h, w, 1]), &flow).unwrap()).unwrap();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = rot.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (yc, xc) = (y as f64 - cy, x as f64 - cx);
                let sy = cy + scale * (c * yc + s * xc) + ty * h as f64;
                let sx = cx + scale * (c * xc - s * yc) + tx * w as f64;
                let want = bilinear(&img, h, w, sy, sx);
                prop_assert!((got[y * w + x] - want).abs() <= 1e-5, "({y},{x}): {} vs {want}", got[y * w + x]);
            }
        }
    }

    #[test]
    fn smoothness_is_zero_exactly_for_constant_fields(
        v in values(2 * 6 * 5, -3.0, 3.0),
        dy in -3.0f64..3.0,
        dx in -3.0f64..3.0,
        at in 0usize..30,
        bump in 0.01f64..1.0,
    ) {
        prop_assert!(geometry::smoothness_energy(&field_of(&v, 6, 5)).unwrap() >= 0.0);
        let flat = DisplacementField::constant(6, 5, dy as f32, dx as f32);
        prop_assert_eq!(geometry::smoothness_energy(&flat).unwrap(), 0.0);
        let mut bumped = flat.clone();
        bumped.data[2 * at] += bump as f32;
        prop_assert!(geometry::smoothness_energy(&bumped).unwrap() > 0.0);
    }

    #[test]
    fn every_loss_term_is_non_negative(
        a in values(3 * 4 * 4 * 3, -1.0, 1.0),
        b in values(3 * 4 * 4 * 3, -1.0, 1.0),
        c in values(3 * 4 * 4 * 3, -1.0, 1.0),
        d in values(3 * 4 * 4 * 3, -1.0, 1.0),
        margin in 0.01f64..2.0,
    ) {
        let shape = [3usize, 4, 4, 3];
        let (ta, tb, tc, td) = (tensor(&a, &shape), tensor(&b, &shape), tensor(&c, &shape), tensor(&d, &shape));
        let phi = ta.narrow(3, 0, 2).unwrap().contiguous().unwrap();
        let phi_gt = tb.narrow(3, 0, 2).unwrap().contiguous().unwrap();
        let theta = tensor(&a[..12], &[3, 4]);
        let theta_gt = tensor(&b[..12], &[3, 4]);
        let terms = [
            losses::loss_rigid(&theta, &theta_gt, &ta, &tb).unwrap(),
            losses::loss_nonrigid(&phi, &phi_gt, &ta, &tb).unwrap(),
            losses::loss_smooth(&phi).unwrap(),
            losses::loss_tri(&[ta.clone()], &[tb.clone()], &[tc.clone()], &[td.clone()], margin).unwrap(),
            losses::loss_cs(&[ta.clone(), tb.clone()], Some(&[tc.clone(), td.clone()])).unwrap(),
            losses::loss_ccd(&[ta.clone()], &[tb.clone()], &[tc.clone()], &[td.clone()], &[1.0]).unwrap(),
            losses::loss_bo(&[tensor(&c[..3 * 2 * 3], &[3, 2, 3])]).unwrap(),
        ];
        for t in &terms {
            let v = scalar_f64(t).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0, "{v}");
        }
    }

    #[test]
    fn curriculum_has_three_constant_phases(p in 0.0f64..1.0) {
        let expected = if p < 0.10 { Phase::Warmup } else if p < 0.60 { Phase::Mid } else { Phase::Late };
        prop_assert_eq!(phase(p), expected);
        prop_assert_eq!(curriculum(p), phase_weights(expected));
    }

    #[test]
    fn reprojection_error_is_a_metric(
        a in values(2 * 5 * 5, -4.0, 4.0),
        b in values(2 * 5 * 5, -4.0, 4.0),
        c in values(2 * 5 * 5, -4.0, 4.0),
    ) {
        let (fa, fb, fc) = (field_of(&a, 5, 5), field_of(&b, 5, 5), field_of(&c, 5, 5));
        for mode in [ReMode::Dense, ReMode::Corners] {
            let re = |x: &DisplacementField, y: &DisplacementField| metrics::reprojection_error_with(x, y, mode).unwrap();
            prop_assert_eq!(re(&fa, &fa), 0.0);
            prop_assert!((re(&fa, &fb) - re(&fb, &fa)).abs() <= 1e-6);
            prop_assert!(re(&fa, &fc) <= re(&fa, &fb) + re(&fb, &fc) + 1e-6);
        }
    }

    #[test]
    fn ncc_ignores_positive_affine_intensity_maps(
        a in values(6 * 6, 0.0, 1.0),
        noise in values(6 * 6, -0.3, 0.3),
        gain in 0.1f64..5.0,
        offset in -2.0f64..2.0,
    ) {
        let img = |v: Vec<f64>| GridImage::new(1, 6, 6, v.iter().map(|x| *x as f32).collect(), Modality::A).unwrap();
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let mapped: Vec<f64> = b.iter().map(|x| gain * x + offset).collect();
        let base = metrics::ncc(&img(a.clone()), &img(b)).unwrap().value;
        let left = metrics::ncc(&img(mapped.clone()), &img(a.clone())).unwrap().value;
        let right = metrics::ncc(&img(a), &img(mapped)).unwrap().value;
        prop_assert!((base - left).abs() <= 1e-4 && (base - right).abs() <= 1e-4, "{base} {left} {right}");
    }

    #[test]
    fn cka_is_symmetric_and_scale_invariant(
        x in values(20 * 4, -1.0, 1.0),
        y in values(20 * 3, -1.0, 1.0),
        k in 0.01f64..100.0,
    ) {
        let (tx, ty) = (tensor(&x, &[20, 4]), tensor(&y, &[20, 3]));
        let xy = metrics::linear_cka(&tx, &ty).unwrap().value;
        let yx = metrics::linear_cka(&ty, &tx).unwrap().value;
        let scaled = metrics::linear_cka(&(&tx * k).unwrap(), &ty).unwrap().value;
        prop_assert!((xy - yx).abs() <= 1e-9);
        prop_assert!((xy - scaled).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&xy));
    }

    #[test]
    fn attention_ignores_slot_order(
        q in values(2 * 4, -2.0, 2.0),
        kv in values(6 * 2 * 4, -2.0, 2.0),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let slot = |i: usize| tensor(&kv[i * 8..(i + 1) * 8], &[2, 4]);
        let keys = [slot(0), slot(1), slot(2)];
        let vals = [slot(3), slot(4), slot(5)];
        let q = tensor(&q, &[2, 4]);
        let base = to_f64_vec(&attend(&q, &keys, &vals).unwrap()).unwrap();
        let pk = [keys[perm[0]].clone(), keys[perm[1]].clone(), keys[perm[2]].clone()];
        let pv = [vals[perm[0]].clone(), vals[perm[1]].clone(), vals[perm[2]].clone()];
        let permuted = to_f64_vec(&attend(&q, &pk, &pv).unwrap()).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

/// Shared = private + noise; descending L_ccd on a learnable suppression of
/// the private part shrinks the covariance norm almost monotonically.
#[test]
fn ccd_descent_is_nearly_monotone() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (b, c) = (32, 3);
    let mut draw = |s: f64| tensor(&(0..b * c).map(|_| rng.random_range(-s..s)).collect::<Vec<_>>(), &[b, c]);
    let private = draw(1.0);
    let shared = (&private + draw(0.2)).unwrap();
    let g = Var::zeros((c, c), DType::F64, &Device::Cpu).unwrap();
    let cleaned = || (&shared - private.matmul(g.as_tensor()).unwrap()).unwrap();
    let norm = || scalar_f64(&losses::cross_cov_sq(&cleaned(), &private).unwrap()).unwrap().sqrt();
    let mut opt = SGD::new(vec![g.clone()], 0.3).unwrap();
    let mut prev = norm();
    let start = prev;
    let mut rises = 0;
    for _ in 0..50 {
        let loss = losses::loss_ccd(&[cleaned()], &[private.clone()], &[cleaned()], &[private.clone()], &[1.0]).unwrap();
        opt.backward_step(&loss).unwrap();
        let now = norm();
        if now > prev {
            rises += 1;
        }
        prev = now;
    }
    assert!(rises <= 5, "{rises} increases");
    assert!(prev < 0.1 * start, "{start} -> {prev}");
}
