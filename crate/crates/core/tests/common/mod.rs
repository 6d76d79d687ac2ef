#![allow(dead_code)]

use gc4dgs::consistency::structure_loss;
use gc4dgs::depth_reg::{patch_loss, ranking_loss, sample_pixel_pairs, PixelPairBatch, RankingConfig};
use gc4dgs::field::GaussianField;
use gc4dgs::gaussian::{normalize_quat, ColorModel, Gaussian4D};
use gc4dgs::geometry::{CameraView, Intrinsics};
use gc4dgs::image::{DepthMap, ImageBuf, Mask, RgbImage};
use gc4dgs::metrics::photometric_loss;
use gc4dgs::raster::{render_field, render_field_backward, RenderConfig};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(width: usize, height: usize) -> CameraView {
    let k = Intrinsics { fx: 28.0, fy: 28.0, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 };
    CameraView::look_at(Vector3::new(0.4, -0.3, -3.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), k, width, height, 0, 0)
        .unwrap()
}

fn quat(r: &mut impl Rng) -> [f64; 4] {
    normalize_quat(std::array::from_fn(|_| r.random_range(-1.0..1.0)))
}

/// Random primitives around the origin with opacities kept clear of the clamp.
pub fn random_field(seed: u64, count: usize, model: ColorModel) -> GaussianField {
    let mut r = rng(seed);
    let gs: Vec<Gaussian4D> = (0..count)
        .map(|_| {
            let mut g = Gaussian4D::axis_aligned(
                [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(-0.5..0.5), r.random_range(0.2..0.8)],
                [r.random_range(0.12..0.35), r.random_range(0.12..0.35), r.random_range(0.12..0.35), r.random_range(0.5..1.5)],
                r.random_range(0.3..0.8),
                [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)],
            );
            g.rot_left = quat(&mut r);
            g.rot_right = quat(&mut r);
            for k in 1..4 {
                g.sh[k] = std::array::from_fn(|_| r.random_range(-0.3..0.3));
            }
            for k in 0..4 {
                g.sh_slope[k] = std::array::from_fn(|_| r.random_range(-0.3..0.3));
            }
            g
        })
        .collect();
    GaussianField::from_gaussians(model, gs)
}

/// Fixed supervision for a gradient check.
pub struct Supervision {
    pub image: RgbImage,
    pub mvs: DepthMap,
    pub mask: Mask,
    pub mde: DepthMap,
    pub pairs: PixelPairBatch,
    pub kappa: f64,
    pub patch_side: usize,
    pub weights: [f64; 4],
}

pub fn supervision(seed: u64, width: usize, height: usize, weights: [f64; 4]) -> Supervision {
    let mut r = rng(seed);
    let image = ImageBuf::from_fn(width, height, |_, _| std::array::from_fn(|_| r.random_range(0.0..1.0)));
    let mvs = ImageBuf::from_fn(width, height, |_, _| r.random_range(2.0..3.5));
    let mask = ImageBuf::from_fn(width, height, |_, _| r.random_bool(0.6));
    let mde = ImageBuf::from_fn(width, height, |x, y| (x as f64 * 0.3 + y as f64 * 0.1).sin() + r.random_range(0.0..0.5));
    let pairs = sample_pixel_pairs(&mut r, 400, &mde, &RankingConfig::default());
    Supervision { image, mvs, mask, mde, pairs, kappa: 3.0, patch_side: 6, weights }
}

/// Weighted sum of the four losses on one render and its gradients with respect to colour and depth.
pub fn objective(color: &RgbImage, depth: &DepthMap, s: &Supervision) -> (f64, RgbImage, DepthMap) {
    let [wp, wr, wa, ws] = s.weights;
    let photo = photometric_loss(color, &s.image, 0.2).unwrap();
    let (lr, gr) = ranking_loss(depth, &s.mde, &s.pairs, s.kappa, None).unwrap();
    let (la, ga) = patch_loss(depth, &s.mde, s.patch_side, 2e-4, None).unwrap();
    let (ls, gs) = structure_loss(depth, &s.mvs, &s.mask, 1.0).unwrap();
    let gc = photo.grad.map(|p| p.map(|v| wp * v));
    let gd = ImageBuf::from_fn(depth.width(), depth.height(), |x, y| {
        wr * gr.get(x, y) + wa * ga.get(x, y) + ws * gs.get(x, y)
    });
    (wp * photo.value + wr * lr + wa * la + ws * ls, gc, gd)
}

pub fn field_loss(field: &GaussianField, cam: &CameraView, t: f64, cfg: &RenderConfig, s: &Supervision) -> f64 {
    let r = render_field(field, cam, t, cfg).unwrap();
    objective(&r.output.color, &r.output.depth, s).0
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Parameters where the loss is not smooth within the step (a fragment crossing a skip,
    /// clamp or termination threshold, or two fragments swapping depth order), detected by
    /// disagreeing step sizes.
    pub kinks: usize,
}

fn central(field: &GaussianField, base: &[f64], i: usize, h: f64, cam: &CameraView, t: f64, cfg: &RenderConfig, s: &Supervision) -> f64 {
    let mut probe = field.clone();
    let mut p = base.to_vec();
    p[i] = base[i] + h;
    probe.set_flat_params(&p);
    let up = field_loss(&probe, cam, t, cfg, s);
    p[i] = base[i] - h;
    probe.set_flat_params(&p);
    let down = field_loss(&probe, cam, t, cfg, s);
    (up - down) / (2.0 * h)
}

/// Worst relative error between the analytic gradient and central differences over every raw
/// parameter, with `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_error(field: &GaussianField, cam: &CameraView, t: f64, cfg: &RenderConfig, s: &Supervision) -> GradCheck {
    let r = render_field(field, cam, t, cfg).unwrap();
    let (_, gc, gd) = objective(&r.output.color, &r.output.depth, s);
    let analytic = render_field_backward(field, cam, cfg, &r, &gc, &gd).unwrap().flat_params();
    let base = field.flat_params();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * scale.max(1e-12);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(floor);
    let mut out = GradCheck { worst: 0.0, checked: 0, kinks: 0 };
    for i in 0..base.len() {
        let h = 1e-5 * base[i].abs().max(1.0);
        let numeric = central(field, &base, i, h, cam, t, cfg, s);
        let err = rel(analytic[i], numeric);
        if err > 1e-6 && rel(numeric, central(field, &base, i, 0.5 * h, cam, t, cfg, s)) > 1e-4 {
            out.kinks += 1;
            if std::env::var("FD_DEBUG").is_ok() {
                eprintln!("kink {i}: analytic {:e} numeric {:e}", analytic[i], numeric);
            }
            continue;
        }
        if err > out.worst && std::env::var("FD_DEBUG").is_ok() {
            eprintln!("param {i}: analytic {:e} numeric {:e} scale {scale:e}", analytic[i], numeric);
        }
        out.worst = out.worst.max(err);
        out.checked += 1;
    }
    out
}
