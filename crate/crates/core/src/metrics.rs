//! Image quality metrics (SSIM, PSNR, AVGE-2) and the photometric training loss.
//!
//! SSIM uses an 11×11 Gaussian window with σ = 1.5, `C1 = (0.01)²`, `C2 = (0.03)²`, averaged over
//! pixels and channels. Near the border the window is truncated to the image and renormalised, so
//! every local statistic is a proper weighted average.

use crate::error::Result;
use crate::image::RgbImage;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

fn kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    std::array::from_fn(|i| {
        let d = i as f64 - SSIM_RADIUS as f64;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    })
}

/// Separable windowed averaging over one channel plane.
struct Window {
    width: usize,
    height: usize,
    k: [f64; 2 * SSIM_RADIUS + 1],
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        let k = kernel();
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|p| {
                    let mut s = 0.0;
                    for (i, w) in k.iter().enumerate() {
                        let q = p as isize + i as isize - SSIM_RADIUS as isize;
                        if q >= 0 && (q as usize) < n {
                            s += w;
                        }
                    }
                    s
                })
                .collect()
        };
        Self { width, height, k, zx: norm(width), zy: norm(height) }
    }

    /// Unnormalised separable correlation with the Gaussian taps (symmetric, so also its transpose).
    fn blur_raw(&self, src: &[f64]) -> Vec<f64> {
        let (w, h, r) = (self.width, self.height, SSIM_RADIUS as isize);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut s = 0.0;
                for (i, k) in self.k.iter().enumerate() {
                    let q = x as isize + i as isize - r;
                    if q >= 0 && (q as usize) < w {
                        s += k * row[q as usize];
                    }
                }
                tmp[y * w + x] = s;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (i, k) in self.k.iter().enumerate() {
                let q = y as isize + i as isize - r;
                if q < 0 || q as usize >= h {
                    continue;
                }
                let src_row = &tmp[q as usize * w..(q as usize + 1) * w];
                let dst_row = &mut out[y * w..(y + 1) * w];
                for x in 0..w {
                    dst_row[x] += k * src_row[x];
                }
            }
        }
        out
    }

    fn scale(&self, v: &mut [f64]) {
        for y in 0..self.height {
            for x in 0..self.width {
                v[y * self.width + x] /= self.zx[x] * self.zy[y];
            }
        }
    }

    fn mean(&self, src: &[f64]) -> Vec<f64> {
        let mut v = self.blur_raw(src);
        self.scale(&mut v);
        v
    }

    fn mean_transpose(&self, src: &[f64]) -> Vec<f64> {
        let mut v = src.to_vec();
        self.scale(&mut v);
        self.blur_raw(&v)
    }
}

fn channel(img: &RgbImage, c: usize) -> Vec<f64> {
    img.as_slice().iter().map(|p| p[c]).collect()
}

/// Mean SSIM of one channel and, if requested, its gradient with respect to `x`.
fn ssim_plane(win: &Window, x: &[f64], y: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = x.len();
    let mx = win.mean(x);
    let my = win.mean(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = win.mean(&xx);
    let eyy = win.mean(&yy);
    let exy = win.mean(&xy);

    let mut total = 0.0;
    let (mut da, mut db, mut dc) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let vx = exx[p] - ux * ux;
        let vy = eyy[p] - uy * uy;
        let cxy = exy[p] - ux * uy;
        let l_num = 2.0 * ux * uy + SSIM_C1;
        let l_den = ux * ux + uy * uy + SSIM_C1;
        let c_num = 2.0 * cxy + SSIM_C2;
        let c_den = vx + vy + SSIM_C2;
        let s = (l_num * c_num) / (l_den * c_den);
        total += s;
        if want_grad {
            let inv = 1.0 / (l_den * c_den);
            // partials with respect to the windowed moments E[x], E[x²], E[xy]
            dc[p] = 2.0 * l_num * inv;
            db[p] = -s / c_den;
            da[p] = (2.0 * uy * c_num - 2.0 * uy * l_num) * inv - s * 2.0 * ux / l_den + s * 2.0 * ux / c_den;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let ta = win.mean_transpose(&da);
    let tb = win.mean_transpose(&db);
    let tc = win.mean_transpose(&dc);
    let grad = (0..n).map(|q| (ta[q] + 2.0 * x[q] * tb[q] + y[q] * tc[q]) / n as f64).collect();
    (mean, Some(grad))
}

fn ssim_impl(x: &RgbImage, y: &RgbImage, want_grad: bool) -> Result<(f64, Option<RgbImage>)> {
    x.ensure_same_shape(y, "ssim")?;
    let win = Window::new(x.width(), x.height());
    let mut total = 0.0;
    let mut grad = want_grad.then(|| RgbImage::filled(x.width(), x.height(), [0.0; 3]));
    for c in 0..3 {
        let (s, g) = ssim_plane(&win, &channel(x, c), &channel(y, c), want_grad);
        total += s / 3.0;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for (o, v) in out.as_mut_slice().iter_mut().zip(g) {
                o[c] = v / 3.0;
            }
        }
    }
    Ok((total, grad))
}

/// Structural similarity averaged over pixels and channels.
pub fn ssim(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &RgbImage, y: &RgbImage) -> Result<(f64, RgbImage)> {
    let (s, g) = ssim_impl(x, y, true)?;
    Ok((s, g.expect("gradient requested")))
}

pub fn mse(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    x.ensure_same_shape(y, "mse")?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * x.len()) as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Two-term average error: geometric mean of MSE and `sqrt(1 − SSIM)`.
pub fn avge2(mse: f64, ssim: f64) -> f64 {
    (mse * (1.0 - ssim).max(0.0).sqrt()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub avge2: f64,
}

/// Evaluation metrics of a render against ground truth; the render is clamped to `[0, 1]` first.
pub fn image_metrics(render: &RgbImage, gt: &RgbImage) -> Result<ImageMetrics> {
    let clamped = render.map(|p| p.map(|v| v.clamp(0.0, 1.0)));
    let m = mse(&clamped, gt)?;
    let s = ssim(&clamped, gt)?;
    Ok(ImageMetrics { psnr: psnr_from_mse(m), ssim: s, avge2: avge2(m, s) })
}

/// Value, components and gradient of the photometric loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    pub l1: f64,
    /// `None` when the SSIM weight is zero and SSIM was not evaluated.
    pub ssim: Option<f64>,
    pub grad: RgbImage,
}

/// `(1 − w)·L1 + w·(1 − SSIM)/2` and its gradient with respect to `render`.
pub fn photometric_loss(render: &RgbImage, gt: &RgbImage, ssim_weight: f64) -> Result<PhotometricLoss> {
    render.ensure_same_shape(gt, "photometric loss")?;
    let n = (3 * render.len()) as f64;
    let mut l1 = 0.0;
    let mut grad = RgbImage::filled(render.width(), render.height(), [0.0; 3]);
    for ((r, g), d) in render.as_slice().iter().zip(gt.as_slice()).zip(grad.as_mut_slice()) {
        for c in 0..3 {
            let diff = r[c] - g[c];
            l1 += diff.abs();
            d[c] = (1.0 - ssim_weight) * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 } / n;
        }
    }
    l1 /= n;
    let mut value = (1.0 - ssim_weight) * l1;
    let mut ssim = None;
    if ssim_weight > 0.0 {
        let (s, ds) = ssim_with_grad(render, gt)?;
        value += ssim_weight * (1.0 - s) / 2.0;
        for (d, v) in grad.as_mut_slice().iter_mut().zip(ds.as_slice()) {
            for c in 0..3 {
                d[c] -= ssim_weight * 0.5 * v[c];
            }
        }
        ssim = Some(s);
    }
    Ok(PhotometricLoss { value, l1, ssim, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> RgbImage {
        ImageBuf::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    /// Direct per-pixel SSIM with explicitly clipped windows.
    fn ssim_reference(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
        let r = SSIM_RADIUS as isize;
        let mut total = 0.0;
        for py in 0..h as isize {
            for px in 0..w as isize {
                let (mut z, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for qy in (py - r).max(0)..=(py + r).min(h as isize - 1) {
                    for qx in (px - r).max(0)..=(px + r).min(w as isize - 1) {
                        let d2 = ((qx - px).pow(2) + (qy - py).pow(2)) as f64;
                        let g = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                        let i = qy as usize * w + qx as usize;
                        z += g;
                        mx += g * x[i];
                        my += g * y[i];
                        xx += g * x[i] * x[i];
                        yy += g * y[i] * y[i];
                        xy += g * x[i] * y[i];
                    }
                }
                let (mx, my) = (mx / z, my / z);
                let (vx, vy, cxy) = (xx / z - mx * mx, yy / z - my * my, xy / z - mx * my);
                total += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 23, 17);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_direct_windowed_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (19, 13);
        let x = random_image(&mut rng, w, h);
        let y = random_image(&mut rng, w, h);
        let expected: f64 =
            (0..3).map(|c| ssim_reference(&channel(&x, c), &channel(&y, c), w, h)).sum::<f64>() / 3.0;
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_images_follow_luminance_closed_form() {
        let (a, b) = (0.5, 0.6);
        let x = RgbImage::filled(16, 16, [a; 3]);
        let y = RgbImage::filled(16, 16, [b; 3]);
        let lum = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        assert!((ssim(&x, &y).unwrap() - lum).abs() < 1e-12);
        let loss = photometric_loss(&x, &y, 0.2).unwrap().value;
        assert!((loss - (0.8 * 0.1 + 0.2 * (1.0 - lum) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let gray = RgbImage::filled(8, 8, [0.5; 3]);
        let black = RgbImage::filled(8, 8, [0.0; 3]);
        assert_eq!(mse(&gray, &black).unwrap(), 0.25);
        assert!((psnr(&gray, &black).unwrap() - 6.0206).abs() < 1e-3);
        assert_eq!(psnr(&gray, &gray).unwrap(), PSNR_CAP);
        let m = image_metrics(&gray, &gray).unwrap();
        assert_eq!((m.psnr, m.ssim, m.avge2), (99.0, 1.0, 0.0));
    }

    #[test]
    fn identical_images_have_zero_photometric_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 12, 12);
        assert_eq!(photometric_loss(&x, &x, 0.2).unwrap().value, 0.0);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (14, 12);
        let x = random_image(&mut rng, w, h);
        let y = random_image(&mut rng, w, h);
        let g = photometric_loss(&x, &y, 0.2).unwrap().grad;
        let eps = 1e-6;
        for _ in 0..40 {
            let i = rng.random_range(0..w * h);
            let c = rng.random_range(0..3);
            let mut p = x.clone();
            p.as_mut_slice()[i][c] += eps;
            let mut m = x.clone();
            m.as_mut_slice()[i][c] -= eps;
            let num = (photometric_loss(&p, &y, 0.2).unwrap().value - photometric_loss(&m, &y, 0.2).unwrap().value) / (2.0 * eps);
            let ana = g.as_slice()[i][c];
            assert!((num - ana).abs() <= 1e-6 * ana.abs().max(1e-3), "{num} vs {ana}");
        }
    }
}
