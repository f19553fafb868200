use proptest::prelude::*;

use rgbd_inpaint::data::{decode_pgm, decode_ppm, encode_pgm16, encode_ppm};
use rgbd_inpaint::metrics::{depth_metrics, emd_1d, psnr, ssim};
use rgbd_inpaint::models::composite;
use rgbd_inpaint::Tensor;

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

fn point_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..24).prop_flat_map(|n| {
        let v = || prop::collection::vec(-50.0f64..50.0, n);
        (v(), v(), v())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_decreases_as_noise_grows(gt in unit_vec(48), noise in unit_vec(48), k in 1.05f64..4.0) {
        let small: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + 0.01 * (n - 0.5)).collect();
        let large: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + 0.01 * k * (n - 0.5)).collect();
        let (a, b) = (psnr(&small, &gt, 48, 1.0, None).unwrap(), psnr(&large, &gt, 48, 1.0, None).unwrap());
        prop_assert!(a >= b, "{a} < {b}");
    }

    #[test]
    fn ssim_is_symmetric_and_reflexive(a in unit_vec(144), b in unit_vec(144)) {
        let ab = ssim(&a, &b, 12, None).unwrap();
        let ba = ssim(&b, &a, 12, None).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((ssim(&a, &a, 12, None).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn emd_is_a_metric((a, b, c) in point_sets()) {
        let d = |x: &[f64], y: &[f64]| emd_1d(x, y).unwrap();
        prop_assert!(d(&a, &a).abs() <= 1e-12);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-9);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        let mut shuffled = a.clone();
        shuffled.reverse();
        prop_assert!(d(&shuffled, &b) == d(&a, &b));
    }

    #[test]
    fn emd_of_a_shift_is_the_shift(a in prop::collection::vec(-10.0f64..10.0, 1..20), s in -5.0f64..5.0) {
        let b: Vec<f64> = a.iter().map(|v| v + s).collect();
        prop_assert!((emd_1d(&a, &b).unwrap() - s.abs()).abs() <= 1e-9);
    }

    #[test]
    fn depth_errors_scale_with_depth(
        gt in prop::collection::vec(0.5f64..10.0, 32),
        pred in prop::collection::vec(0.5f64..10.0, 32),
        k in 0.25f64..4.0,
    ) {
        let e = depth_metrics(&pred, &gt, 1e-3, None).unwrap();
        let sp: Vec<f64> = pred.iter().map(|v| v * k).collect();
        let sg: Vec<f64> = gt.iter().map(|v| v * k).collect();
        let f = depth_metrics(&sp, &sg, 1e-3, None).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
        prop_assert!(close(f.abs_rel, e.abs_rel));
        prop_assert!(close(f.rmse_log, e.rmse_log));
        prop_assert!(close(f.rmse, k * e.rmse));
        prop_assert!(close(f.sq_rel, k * e.sq_rel));
    }

    #[test]
    fn composite_keeps_known_pixels(
        raw in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 16),
        z in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 16),
        hole in prop::collection::vec(any::<bool>(), 2 * 16),
    ) {
        let m: Vec<f64> = hole.iter().map(|&h| if h { 0.0 } else { 1.0 }).collect();
        let masked: Vec<f64> = z.iter().enumerate().map(|(i, v)| v * m[(i / 48) * 16 + i % 16]).collect();
        let out = composite(
            &Tensor::from_vec(raw.clone(), &[2, 3, 4, 4]).unwrap(),
            &Tensor::from_vec(masked.clone(), &[2, 3, 4, 4]).unwrap(),
            &Tensor::from_vec(m.clone(), &[2, 1, 4, 4]).unwrap(),
        )
        .unwrap();
        for (i, &o) in out.data().iter().enumerate() {
            let known = m[(i / 48) * 16 + i % 16] == 1.0;
            prop_assert_eq!(o, if known { masked[i] } else { raw[i] });
        }
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint(
        x in prop::collection::vec(-2.0f64..2.0, 3),
        y in prop::collection::vec(-2.0f64..2.0, 2 * 4 * 3),
    ) {
        // <broadcast(x), y> == <x, sum_to(y)>
        let xt = Tensor::from_vec(x.clone(), &[1, 3]).unwrap();
        let yt = Tensor::from_vec(y.clone(), &[2, 4, 3]).unwrap();
        let lhs: f64 = xt.broadcast_to(&[2, 4, 3]).unwrap().data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = yt.sum_to(&[1, 3]).unwrap().data().iter().zip(&x).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 7919) >> 3) as u8).collect();
        let gray: Vec<u16> = (0..w * h).map(|i| (seed.wrapping_add(i as u64 * 104_729) % 65_536) as u16).collect();
        let p6 = decode_ppm(&encode_ppm(w, h, &rgb).unwrap()).unwrap();
        prop_assert_eq!((p6.width, p6.height, &p6.samples), (w, h, &rgb));
        let p5 = decode_pgm(&encode_pgm16(w, h, &gray).unwrap()).unwrap();
        prop_assert_eq!((p5.width, p5.height, &p5.samples), (w, h, &gray));
    }
}
