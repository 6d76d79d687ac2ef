use gc4dgs::depth_reg::{patch_loss, ranking_loss, sample_pixel_pairs, RankingConfig};
use gc4dgs::field::GaussianField;
use gc4dgs::gaussian::{build_covariance, normalize_quat, slice_at_time, ColorModel, Gaussian4D};
use gc4dgs::geometry::{CameraView, Intrinsics};
use gc4dgs::image::{DepthMap, ImageBuf, RgbImage};
use gc4dgs::io::{decode_checkpoint, decode_pfm, encode_checkpoint, encode_pfm, quantize_srgb, srgb_decode, srgb_encode};
use gc4dgs::metrics::{image_metrics, mse, psnr, ssim, PSNR_CAP};
use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;

const W: usize = 12;
const H: usize = 10;

fn depth_map(lo: f64, hi: f64) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(lo..hi, W * H).prop_map(|v| ImageBuf::from_vec(W, H, v).unwrap())
}

fn rgb_image() -> impl Strategy<Value = RgbImage> {
    prop::collection::vec(prop::array::uniform3(0.0..1.0f64), W * H).prop_map(|v| ImageBuf::from_vec(W, H, v).unwrap())
}

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64).prop_filter("non-zero", |q| q.iter().map(|v| v * v).sum::<f64>() > 0.05)
}

fn gaussian() -> impl Strategy<Value = Gaussian4D> {
    (prop::array::uniform4(-1.0..1.0f64), quat(), quat(), prop::array::uniform4(-2.5..0.0f64), -3.0..3.0f64).prop_map(
        |(mean, l, r, s, o)| {
            let mut g = Gaussian4D::zero();
            g.mean = mean;
            g.rot_left = normalize_quat(l);
            g.rot_right = normalize_quat(r);
            g.log_scales = s;
            g.opacity_logit = o;
            g
        },
    )
}

/// Values a 32-bit float stores exactly.
fn f32_vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f32..4.0, n).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pfm_round_trips_single_precision_maps(vals in f32_vals(W * H), holes in prop::collection::vec(any::<bool>(), W * H)) {
        let v: Vec<f64> = vals.iter().zip(&holes).map(|(v, h)| if *h { f64::NAN } else { *v }).collect();
        let map = ImageBuf::from_vec(W, H, v).unwrap();
        let back = decode_pfm(&encode_pfm(&map)).unwrap();
        prop_assert_eq!((back.width(), back.height()), (W, H));
        for (a, b) in map.as_slice().iter().zip(back.as_slice()) {
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn checkpoints_round_trip(vals in f32_vals(3 * 29), degree in 0u32..=1) {
        let model = ColorModel { degree, time_modulation: true };
        let mut field = GaussianField::new(model);
        for chunk in vals.chunks(29) {
            let mut g = Gaussian4D::zero();
            g.mean = [chunk[0], chunk[1], chunk[2], chunk[3]];
            g.rot_left = [chunk[4], chunk[5], chunk[6], chunk[7]];
            g.rot_right = [chunk[8], chunk[9], chunk[10], chunk[11]];
            g.log_scales = [chunk[12], chunk[13], chunk[14], chunk[15]];
            g.opacity_logit = chunk[16];
            for k in 0..model.num_coeffs() {
                g.sh[k] = [chunk[17 + k], chunk[18 + k], chunk[19 + k]];
                g.sh_slope[k] = [chunk[21 + k], chunk[22 + k], 1.0];
            }
            field.push(&g);
        }
        let back = decode_checkpoint(&encode_checkpoint(&field)).unwrap();
        prop_assert_eq!(back, field);
    }

    #[test]
    fn srgb_codes_survive_decoding(code in any::<u8>()) {
        prop_assert_eq!(srgb_encode(srgb_decode(code)), code);
        let v = srgb_decode(code);
        prop_assert_eq!(quantize_srgb(v), v);
    }

    #[test]
    fn ranking_loss_only_sees_the_order(
        rendered in depth_map(1.0, 5.0),
        mde in depth_map(0.0, 10.0),
        a in 0.1..3.0f64,
        b in -5.0..5.0f64,
        g in 0.3..2.0f64,
        seed in any::<u64>(),
    ) {
        let warped = mde.map(|v| a * v.powf(g) + b);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pairs = sample_pixel_pairs(&mut rng, 64, &mde, &RankingConfig::default());
        let (l0, g0) = ranking_loss(&rendered, &mde, &pairs, 4.0, None).unwrap();
        let (l1, g1) = ranking_loss(&rendered, &warped, &pairs, 4.0, None).unwrap();
        prop_assert_eq!(l0.to_bits(), l1.to_bits());
        prop_assert_eq!(g0, g1);
        prop_assert!((0.0..=1.0).contains(&l0));
    }

    #[test]
    fn patch_loss_ignores_shifts_and_nearly_ignores_scale(
        d in depth_map(1.0, 40.0),
        side in 2usize..8,
        k in -64i32..64,
        s in 0.25..4.0f64,
    ) {
        let zero = patch_loss(&d, &d, side, 2e-4, None).unwrap().0;
        prop_assert_eq!(zero, 0.0);
        // sixteenths keep every patch sum and mean exact, so the shift cancels bit for bit
        let dyadic = d.map(|v| (v * 16.0).round() / 16.0);
        let shifted = dyadic.map(|v| v + k as f64 * 0.0625);
        prop_assert_eq!(patch_loss(&dyadic, &shifted, 4, 2e-4, None).unwrap().0, 0.0);
        let scaled = d.map(|v| s * v);
        prop_assert!(patch_loss(&d, &scaled, side, 2e-4, None).unwrap().0 < 1e-4);
    }

    #[test]
    fn slicing_matches_precision_conditioning(g in gaussian(), t in -1.0..2.0f64) {
        let cov = build_covariance(&g);
        let s = slice_at_time(&g, t, ColorModel::default()).unwrap();
        let p = cov.sigma.try_inverse().unwrap();
        let paa: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
        let pat = Vector3::new(p[(0, 3)], p[(1, 3)], p[(2, 3)]);
        let cond = paa.try_inverse().unwrap();
        let mean = Vector3::new(g.mean[0], g.mean[1], g.mean[2]) - cond * pat * (t - g.mean[3]);
        prop_assert!((s.cov - cond).abs().max() <= 1e-9 * cond.abs().max());
        prop_assert!((s.mean - mean).norm() <= 1e-9 * (1.0 + mean.norm()));
        prop_assert!(s.decay > 0.0 && s.decay <= 1.0);
        prop_assert!(s.cov.symmetric_eigenvalues().iter().all(|e| *e > 0.0));
    }

    #[test]
    fn projection_inverts_backprojection(x in 0.0..31.0f64, y in 0.0..23.0f64, depth in 0.1..50.0f64, yaw in -1.0..1.0f64) {
        let k = Intrinsics { fx: 30.0, fy: 28.0, cx: 15.5, cy: 11.5 };
        let rot = *nalgebra::Rotation3::from_euler_angles(0.1, yaw, -0.2).matrix();
        let cam = CameraView::new(k, rot, Vector3::new(0.3, -0.2, 2.0), 32, 24, 0, 0).unwrap();
        let p = Vector2::new(x, y);
        let world = cam.backproject(&p, depth).unwrap();
        let (q, z) = cam.project(&world);
        prop_assert!((q - p).norm() < 1e-9 * depth.max(1.0));
        prop_assert!((z - depth).abs() < 1e-10 * depth);
    }

    #[test]
    fn metrics_behave_on_random_images(x in rgb_image(), y in rgb_image()) {
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        prop_assert_eq!(image_metrics(&x, &x).unwrap().avge2, 0.0);
        let m = mse(&x, &y).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&x, &y).unwrap() <= 1.0);
    }
}
