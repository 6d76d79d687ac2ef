//! Tile-based differentiable splatting of sliced Gaussians into colour and depth images.
//!
//! Per pixel, fragments are composited front to back in ascending z-depth:
//!
//! ```text
//! αᵢ = min(α_max, σᵢ Fᵢ exp(−½ Δᵀ Σ₂ᴰ⁻¹ Δ))        (skipped when below α_min)
//! C  = Σ cᵢ αᵢ Tᵢ + T_N · background,   Tᵢ = Π_{j<i} (1 − αⱼ)
//! D  = Σ dᵢ αᵢ Tᵢ                         (background depth is 0)
//! ```
//!
//! Compositing stops before a fragment whose inclusion would push the transmittance below
//! `transmittance_min`. Depth is not divided by accumulated alpha; see
//! [`RenderOutput::normalized_depth`] for the diagnostic variant.
//!
//! Work is split into 16×16 tiles. Forward and backward passes run tiles in parallel, but each
//! tile composites sequentially and per-tile gradient buffers are merged in tile order, so the
//! result does not depend on the number of worker threads.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::gaussian::{eval_sh, eval_sh_backward, slice_at_time, slice_backward, Gaussian3DSlice, SliceGrad};
use crate::geometry::CameraView;
use crate::image::{DepthMap, ImageBuf, RgbImage};

/// What to do when a tile collects more fragments than `tile_cap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    Error,
    DropFarthest,
}

impl Default for OverflowPolicy {
    fn default() -> Self {
        if cfg!(debug_assertions) {
            OverflowPolicy::Error
        } else {
            OverflowPolicy::DropFarthest
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub near_plane: f64,
    /// Screen-space low-pass added to every 2D covariance, in px².
    pub blur: f64,
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub tile_size: usize,
    pub tile_cap: usize,
    pub overflow: OverflowPolicy,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            near_plane: 0.01,
            blur: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            tile_size: 16,
            tile_cap: 2048,
            overflow: OverflowPolicy::default(),
        }
    }
}

/// A sliced Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatFragment {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// σ·F(t), the peak opacity before the spatial falloff.
    pub opacity: f64,
    pub depth: f64,
    pub color: [f64; 3],
    pub id: usize,
}

impl SplatFragment {
    /// Builds a fragment from its 2D footprint; `None` when the covariance is not invertible.
    pub fn new(
        mean: Vector2<f64>,
        cov: Matrix2<f64>,
        opacity: f64,
        depth: f64,
        color: [f64; 3],
        id: usize,
    ) -> Option<Self> {
        let conic = cov.try_inverse()?;
        if !conic.iter().all(|v| v.is_finite()) || cov.determinant() <= 0.0 {
            return None;
        }
        Some(Self { mean, cov, conic, opacity, depth, color, id })
    }

    /// Unclamped opacity at a pixel centre.
    #[inline]
    pub fn raw_alpha(&self, pixel: &Vector2<f64>) -> (f64, f64) {
        let d = pixel - self.mean;
        let power = -0.5 * (self.conic[(0, 0)] * d.x * d.x + 2.0 * self.conic[(0, 1)] * d.x * d.y + self.conic[(1, 1)] * d.y * d.y);
        let g = power.min(0.0).exp();
        (self.opacity * g, g)
    }

    /// Inclusive pixel bounding box of the region where the fragment reaches `alpha_min`.
    fn pixel_bounds(&self, width: usize, height: usize, alpha_min: f64) -> Option<[usize; 4]> {
        if self.opacity < alpha_min {
            return None;
        }
        let q = 2.0 * (self.opacity / alpha_min).ln();
        let ex = (q * self.cov[(0, 0)]).sqrt();
        let ey = (q * self.cov[(1, 1)]).sqrt();
        let x0 = (self.mean.x - ex).ceil().max(0.0);
        let y0 = (self.mean.y - ey).ceil().max(0.0);
        let x1 = (self.mean.x + ex).floor().min(width as f64 - 1.0);
        let y1 = (self.mean.y + ey).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some([x0 as usize, y0 as usize, x1 as usize, y1 as usize])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: DepthMap,
    pub alpha: DepthMap,
    pub count: ImageBuf<u32>,
}

impl RenderOutput {
    /// Depth divided by accumulated alpha (0 where nothing was composited).
    pub fn normalized_depth(&self) -> DepthMap {
        ImageBuf::from_fn(self.depth.width(), self.depth.height(), |x, y| {
            let a = *self.alpha.get(x, y);
            if a > 0.0 {
                self.depth.get(x, y) / a
            } else {
                0.0
            }
        })
    }
}

/// Projection Jacobian pieces shared by the forward and backward projection.
struct ProjectionTerms {
    pc: Vector3<f64>,
    jw: Matrix2x3<f64>,
}

fn projection_terms(mean: &Vector3<f64>, camera: &CameraView) -> ProjectionTerms {
    let pc = camera.world_to_camera(mean);
    let k = &camera.intrinsics;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    ProjectionTerms { pc, jw: j * camera.rotation }
}

/// EWA projection of a slice; `None` when culled (behind the near plane, too transparent, or a
/// singular footprint).
pub fn project_gaussian(
    slice: &Gaussian3DSlice,
    camera: &CameraView,
    degree: u32,
    id: usize,
    config: &RenderConfig,
) -> Option<SplatFragment> {
    let opacity = slice.opacity * slice.decay;
    if !(opacity >= config.alpha_min) {
        return None;
    }
    let terms = projection_terms(&slice.mean, camera);
    if !(terms.pc.z > config.near_plane) {
        return None;
    }
    let cov = terms.jw * slice.cov * terms.jw.transpose() + Matrix2::identity() * config.blur;
    let dir = (slice.mean - camera.center()).normalize();
    let color = eval_sh(&slice.sh, degree, &dir);
    SplatFragment::new(camera.project_camera(&terms.pc), cov, opacity, terms.pc.z, color, id)
}

/// Gradient with respect to one fragment's fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentGrad {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub opacity: f64,
    pub depth: f64,
    pub color: [f64; 3],
}

impl FragmentGrad {
    pub fn zero() -> Self {
        Self { mean: Vector2::zeros(), cov: Matrix2::zeros(), opacity: 0.0, depth: 0.0, color: [0.0; 3] }
    }

    fn add(&mut self, o: &FragmentGrad) {
        self.mean += o.mean;
        self.cov += o.cov;
        self.opacity += o.opacity;
        self.depth += o.depth;
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
    }
}

/// Chain rule through [`project_gaussian`] for a fragment that was not culled.
pub fn project_gaussian_backward(
    slice: &Gaussian3DSlice,
    camera: &CameraView,
    degree: u32,
    grad: &FragmentGrad,
) -> SliceGrad {
    let k = &camera.intrinsics;
    let w = camera.rotation;
    let terms = projection_terms(&slice.mean, camera);
    let (x, y, z) = (terms.pc.x, terms.pc.y, terms.pc.z);
    let mut d_pc = Vector3::new(0.0, 0.0, grad.depth);

    d_pc.x += grad.mean.x * k.fx / z;
    d_pc.y += grad.mean.y * k.fy / z;
    d_pc.z -= grad.mean.x * k.fx * x / (z * z) + grad.mean.y * k.fy * y / (z * z);

    let g2 = grad.cov;
    let jw = terms.jw;
    let d_cov3: Matrix3<f64> = jw.transpose() * g2 * jw;
    let d_jw = g2 * jw * slice.cov.transpose() + g2.transpose() * jw * slice.cov;
    let d_j = d_jw * w.transpose();
    d_pc.x += d_j[(0, 2)] * (-k.fx / (z * z));
    d_pc.y += d_j[(1, 2)] * (-k.fy / (z * z));
    d_pc.z += d_j[(0, 0)] * (-k.fx / (z * z))
        + d_j[(0, 2)] * (2.0 * k.fx * x / (z * z * z))
        + d_j[(1, 1)] * (-k.fy / (z * z))
        + d_j[(1, 2)] * (2.0 * k.fy * y / (z * z * z));

    let mut d_mean = w.transpose() * d_pc;
    let v = slice.mean - camera.center();
    let dist = v.norm();
    let dir = v / dist;
    let (d_sh, d_dir) = eval_sh_backward(&slice.sh, degree, &dir, &grad.color);
    if degree > 0 {
        d_mean += (d_dir - dir * dir.dot(&d_dir)) / dist;
    }

    SliceGrad {
        mean: d_mean,
        cov: d_cov3,
        decay: grad.opacity * slice.opacity,
        opacity: grad.opacity * slice.decay,
        sh: d_sh,
    }
}

/// Fragment indices per tile, each list ordered by `(depth, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
    bounds: Vec<Option<[usize; 4]>>,
}

const BLOCK: usize = 4;

impl TileBins {
    /// Splits a tile into 4×4 pixel blocks, each with the list positions of the fragments whose
    /// footprint reaches it, in list order.
    fn blocks(&self, tile: usize, width: usize, height: usize) -> Vec<([usize; 4], Vec<u32>)> {
        let (x0, y0, x1, y1) = self.tile_pixels(tile, width, height);
        let list = &self.lists[tile];
        let mut out = Vec::new();
        for by in (y0..y1).step_by(BLOCK) {
            for bx in (x0..x1).step_by(BLOCK) {
                let (ex, ey) = ((bx + BLOCK).min(x1), (by + BLOCK).min(y1));
                let positions = (0..list.len() as u32)
                    .filter(|&p| {
                        self.bounds[list[p as usize] as usize]
                            .is_some_and(|[fx0, fy0, fx1, fy1]| fx0 < ex && fx1 >= bx && fy0 < ey && fy1 >= by)
                    })
                    .collect();
                out.push(([bx, by, ex, ey], positions));
            }
        }
        out
    }

    fn tile_pixels(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

/// Orders fragments by `(depth, id)`; stable and independent of input order.
pub fn sort_by_depth(fragments: &[SplatFragment], list: &mut [u32]) {
    list.sort_by(|&a, &b| {
        let (fa, fb) = (&fragments[a as usize], &fragments[b as usize]);
        fa.depth.total_cmp(&fb.depth).then(fa.id.cmp(&fb.id))
    });
}

/// Bins fragments into tiles of the image and depth-sorts each tile.
pub fn sort_fragments(
    fragments: &[SplatFragment],
    width: usize,
    height: usize,
    config: &RenderConfig,
) -> Result<TileBins> {
    let ts = config.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let bounds: Vec<_> = fragments.iter().map(|f| f.pixel_bounds(width, height, config.alpha_min)).collect();
    for (i, b) in bounds.iter().enumerate() {
        let Some([x0, y0, x1, y1]) = *b else {
            continue;
        };
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    for (tile, list) in lists.iter_mut().enumerate() {
        sort_by_depth(fragments, list);
        if list.len() > config.tile_cap {
            match config.overflow {
                OverflowPolicy::Error => {
                    return Err(Error::TileOverflow { tile, count: list.len(), cap: config.tile_cap })
                }
                OverflowPolicy::DropFarthest => list.truncate(config.tile_cap),
            }
        }
    }
    Ok(TileBins { tile_size: ts, tiles_x, tiles_y, lists, bounds })
}

/// One composited fragment at one pixel.
#[derive(Clone, Copy)]
struct Contribution {
    fragment: u32,
    alpha: f64,
    transmittance: f64,
    gauss: f64,
    clamped: bool,
}

/// Front-to-back walk over a depth-sorted list, calling `visit` for every composited fragment.
#[inline]
fn composite_pixel(
    pixel: &Vector2<f64>,
    list: &[u32],
    fragments: &[SplatFragment],
    config: &RenderConfig,
    mut visit: impl FnMut(Contribution),
) -> f64 {
    let mut t = 1.0;
    for &fi in list {
        let f = &fragments[fi as usize];
        let (raw, gauss) = f.raw_alpha(pixel);
        if raw < config.alpha_min {
            continue;
        }
        let clamped = raw > config.alpha_max;
        let alpha = if clamped { config.alpha_max } else { raw };
        let next = t * (1.0 - alpha);
        if next < config.transmittance_min {
            break;
        }
        visit(Contribution { fragment: fi, alpha, transmittance: t, gauss, clamped });
        t = next;
    }
    t
}

struct TilePixels {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
    count: Vec<u32>,
}

/// Composites pre-binned fragments.
pub fn render_binned(
    fragments: &[SplatFragment],
    bins: &TileBins,
    width: usize,
    height: usize,
    config: &RenderConfig,
) -> RenderOutput {
    let tiles: Vec<TilePixels> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = bins.tile_pixels(tile, width, height);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TilePixels {
                color: vec![[0.0; 3]; n],
                depth: vec![0.0; n],
                alpha: vec![0.0; n],
                count: vec![0; n],
            };
            let list = &bins.lists[tile];
            for ([bx0, by0, bx1, by1], positions) in bins.blocks(tile, width, height) {
                let ids: Vec<u32> = positions.iter().map(|&p| list[p as usize]).collect();
                for y in by0..by1 {
                    for x in bx0..bx1 {
                        let px = Vector2::new(x as f64, y as f64);
                        let mut c = [0.0; 3];
                        let mut d = 0.0;
                        let mut count = 0;
                        let t = composite_pixel(&px, &ids, fragments, config, |k| {
                            let f = &fragments[k.fragment as usize];
                            let w = k.alpha * k.transmittance;
                            for ch in 0..3 {
                                c[ch] += f.color[ch] * w;
                            }
                            d += f.depth * w;
                            count += 1;
                        });
                        for ch in 0..3 {
                            c[ch] += t * config.background[ch];
                        }
                        let i = (y - y0) * (x1 - x0) + (x - x0);
                        out.color[i] = c;
                        out.depth[i] = d;
                        out.alpha[i] = 1.0 - t;
                        out.count[i] = count;
                    }
                }
            }
            out
        })
        .collect();

    let mut color = ImageBuf::filled(width, height, [0.0; 3]);
    let mut depth = ImageBuf::filled(width, height, 0.0);
    let mut alpha = ImageBuf::filled(width, height, 0.0);
    let mut count = ImageBuf::filled(width, height, 0u32);
    for (tile, px) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = bins.tile_pixels(tile, width, height);
        let mut i = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                *color.get_mut(x, y) = px.color[i];
                *depth.get_mut(x, y) = px.depth[i];
                *alpha.get_mut(x, y) = px.alpha[i];
                *count.get_mut(x, y) = px.count[i];
                i += 1;
            }
        }
    }
    RenderOutput { color, depth, alpha, count }
}

/// Sorts and composites a fragment list for `camera`'s image.
pub fn render(fragments: &[SplatFragment], camera: &CameraView, config: &RenderConfig) -> Result<RenderOutput> {
    let bins = sort_fragments(fragments, camera.width, camera.height, config)?;
    Ok(render_binned(fragments, &bins, camera.width, camera.height, config))
}

/// Gradients of a loss with respect to every fragment, given per-pixel colour and depth gradients.
pub fn render_backward_fragments(
    fragments: &[SplatFragment],
    bins: &TileBins,
    config: &RenderConfig,
    grad_color: &RgbImage,
    grad_depth: &DepthMap,
) -> Vec<FragmentGrad> {
    let (width, height) = (grad_color.width(), grad_color.height());
    let per_tile: Vec<Vec<FragmentGrad>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let mut acc = vec![FragmentGrad::zero(); list.len()];
            let mut contribs: Vec<(usize, Contribution)> = Vec::new();
            for ([bx0, by0, bx1, by1], positions) in bins.blocks(tile, width, height) {
                let ids: Vec<u32> = positions.iter().map(|&p| list[p as usize]).collect();
                for y in by0..by1 {
                    for x in bx0..bx1 {
                        let dc = grad_color.get(x, y);
                        let dd = *grad_depth.get(x, y);
                        if dc.iter().all(|v| *v == 0.0) && dd == 0.0 {
                            continue;
                        }
                        let px = Vector2::new(x as f64, y as f64);
                        contribs.clear();
                        let mut i = 0usize;
                        composite_pixel(&px, &ids, fragments, config, |k| {
                            while ids[i] != k.fragment {
                                i += 1;
                            }
                            contribs.push((positions[i] as usize, k));
                        });
                        let mut behind_c = config.background;
                        let mut behind_d = 0.0;
                        for &(pos, k) in contribs.iter().rev() {
                            let f = &fragments[k.fragment as usize];
                            let w = k.alpha * k.transmittance;
                            let g = &mut acc[pos];
                            let mut d_alpha = 0.0;
                            for ch in 0..3 {
                                g.color[ch] += dc[ch] * w;
                                d_alpha += dc[ch] * (f.color[ch] - behind_c[ch]) * k.transmittance;
                                behind_c[ch] = k.alpha * f.color[ch] + (1.0 - k.alpha) * behind_c[ch];
                            }
                            g.depth += dd * w;
                            d_alpha += dd * (f.depth - behind_d) * k.transmittance;
                            behind_d = k.alpha * f.depth + (1.0 - k.alpha) * behind_d;
                            if !k.clamped {
                                g.opacity += d_alpha * k.gauss;
                                let d_power = d_alpha * k.alpha;
                                let delta = px - f.mean;
                                g.mean += f.conic * delta * d_power;
                                // accumulate d/d(conic) in the cov slot; converted after the merge
                                g.cov += delta * delta.transpose() * (-0.5 * d_power);
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut out = vec![FragmentGrad::zero(); fragments.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (pos, g) in acc.iter().enumerate() {
            out[bins.lists[tile][pos] as usize].add(g);
        }
    }
    for (g, f) in out.iter_mut().zip(fragments) {
        g.cov = -(f.conic * g.cov * f.conic);
    }
    out
}

/// A field rendered at one camera and time, with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct FieldRender {
    pub output: RenderOutput,
    pub time: f64,
    pub slices: Vec<Option<Gaussian3DSlice>>,
    pub fragments: Vec<SplatFragment>,
    pub bins: TileBins,
}

/// Slices, projects and composites every primitive of `field` at normalised time `t`.
pub fn render_field(field: &GaussianField, camera: &CameraView, t: f64, config: &RenderConfig) -> Result<FieldRender> {
    let model = field.model;
    let slices: Vec<Option<Gaussian3DSlice>> =
        (0..field.len()).into_par_iter().map(|i| slice_at_time(&field.get(i), t, model).ok()).collect();
    let fragments: Vec<SplatFragment> = slices
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().and_then(|s| project_gaussian(s, camera, model.degree, i, config)))
        .collect();
    let bins = sort_fragments(&fragments, camera.width, camera.height, config)?;
    let output = render_binned(&fragments, &bins, camera.width, camera.height, config);
    Ok(FieldRender { output, time: t, slices, fragments, bins })
}

/// Gradients of a loss with respect to every parameter of `field`.
pub fn render_field_backward(
    field: &GaussianField,
    camera: &CameraView,
    config: &RenderConfig,
    render: &FieldRender,
    grad_color: &RgbImage,
    grad_depth: &DepthMap,
) -> Result<GaussianField> {
    render.output.color.ensure_same_shape(grad_color, "colour gradient")?;
    render.output.depth.ensure_same_shape(grad_depth, "depth gradient")?;
    let frag_grads = render_backward_fragments(&render.fragments, &render.bins, config, grad_color, grad_depth);
    let model = field.model;
    let per_gaussian: Vec<(usize, crate::gaussian::GaussianGrad)> = render
        .fragments
        .par_iter()
        .zip(frag_grads.par_iter())
        .map(|(f, g)| {
            let slice = render.slices[f.id].as_ref().expect("fragment without slice");
            let sg = project_gaussian_backward(slice, camera, model.degree, g);
            (f.id, slice_backward(&field.get(f.id), render.time, model, &sg))
        })
        .collect();
    let mut out = field.zeros_like();
    for (id, g) in per_gaussian {
        out.set(id, &g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize, f: f64) -> CameraView {
        CameraView::new(
            Intrinsics { fx: f, fy: f, cx: (w as f64 - 1.0) / 2.0, cy: (h as f64 - 1.0) / 2.0 },
            Matrix3::identity(),
            Vector3::zeros(),
            w,
            h,
            0,
            0,
        )
        .unwrap()
    }

    fn slice(mean: Vector3<f64>, cov: Matrix3<f64>, opacity: f64) -> Gaussian3DSlice {
        Gaussian3DSlice { mean, cov, decay: 1.0, opacity, sh: [[0.0; 3]; 4] }
    }

    fn frag(x: f64, y: f64, var: f64, opacity: f64, depth: f64, color: [f64; 3], id: usize) -> SplatFragment {
        SplatFragment::new(Vector2::new(x, y), Matrix2::identity() * var, opacity, depth, color, id).unwrap()
    }

    /// Direct evaluation of the compositing sums at one pixel, visiting fragments by depth.
    fn brute_force_pixel(px: Vector2<f64>, frags: &[SplatFragment], cfg: &RenderConfig) -> ([f64; 3], f64, f64) {
        let mut order: Vec<&SplatFragment> = frags.iter().collect();
        order.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.id.cmp(&b.id)));
        let mut alphas = Vec::new();
        for f in order {
            let d = px - f.mean;
            let q = (d.transpose() * f.cov.try_inverse().unwrap() * d)[0];
            let a = (f.opacity * (-0.5 * q).exp()).min(cfg.alpha_max);
            if a >= cfg.alpha_min {
                alphas.push((a, f));
            }
        }
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut t = 1.0;
        for (a, f) in alphas {
            if t * (1.0 - a) < cfg.transmittance_min {
                break;
            }
            for c in 0..3 {
                color[c] += f.color[c] * a * t;
            }
            depth += f.depth * a * t;
            t *= 1.0 - a;
        }
        for c in 0..3 {
            color[c] += t * cfg.background[c];
        }
        (color, depth, 1.0 - t)
    }

    #[test]
    fn isotropic_projection_scales_with_focal() {
        let cam = camera(64, 64, 70.0);
        let (r, z) = (0.1, 4.0);
        let s = slice(Vector3::new(0.0, 0.0, z), Matrix3::identity() * r * r, 0.9);
        let cfg = RenderConfig::default();
        let f = project_gaussian(&s, &cam, 0, 0, &cfg).unwrap();
        let expected = (70.0 * r / z).powi(2) + cfg.blur;
        assert!((f.cov - Matrix2::identity() * expected).abs().max() < 1e-12);
        assert!((f.mean - Vector2::new(31.5, 31.5)).norm() < 1e-12);
        assert_eq!(f.depth, z);
    }

    #[test]
    fn culling() {
        let cam = camera(32, 32, 30.0);
        let cfg = RenderConfig::default();
        let behind = slice(Vector3::new(0.0, 0.0, -1.0), Matrix3::identity() * 0.01, 0.9);
        assert!(project_gaussian(&behind, &cam, 0, 0, &cfg).is_none());
        let faint = slice(Vector3::new(0.0, 0.0, 2.0), Matrix3::identity() * 0.01, 1e-3);
        assert!(project_gaussian(&faint, &cam, 0, 0, &cfg).is_none());
        let faded = Gaussian3DSlice { decay: 1e-3, ..slice(Vector3::new(0.0, 0.0, 2.0), Matrix3::identity() * 0.01, 0.9) };
        assert!(project_gaussian(&faded, &cam, 0, 0, &cfg).is_none());
    }

    #[test]
    fn projected_covariance_matches_numerical_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = RenderConfig::default();
        for _ in 0..200 {
            let rot = *nalgebra::Rotation3::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
            )
            .matrix();
            let cam = CameraView::new(
                Intrinsics { fx: 60.0, fy: 75.0, cx: 31.5, cy: 31.5 },
                rot,
                Vector3::new(0.1, -0.2, 3.0),
                64,
                64,
                0,
                0,
            )
            .unwrap();
            let l = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let cov = l * l.transpose() + Matrix3::identity() * 1e-3;
            let mean = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = slice(mean, cov, 0.8);
            let f = project_gaussian(&s, &cam, 0, 0, &cfg).unwrap();
            // numerical Jacobian of the full world -> pixel map
            let h = 1e-6;
            let mut jac = nalgebra::Matrix2x3::zeros();
            for i in 0..3 {
                let mut p = mean;
                p[i] += h;
                let (a, _) = cam.project(&p);
                p[i] -= 2.0 * h;
                let (b, _) = cam.project(&p);
                jac.set_column(i, &((a - b) / (2.0 * h)));
            }
            let expected = jac * cov * jac.transpose() + Matrix2::identity() * cfg.blur;
            assert!((f.cov - expected).abs().max() < 1e-6, "{} vs {}", f.cov, expected);
        }
    }

    #[test]
    fn single_opaque_fragment() {
        let cam = camera(8, 8, 10.0);
        let cfg = RenderConfig::default();
        let f = frag(3.0, 4.0, 1.0, 0.99, 2.5, [0.2, 0.4, 0.6], 0);
        let out = render(&[f], &cam, &cfg).unwrap();
        let c = out.color.get(3, 4);
        for (a, b) in c.iter().zip([0.2, 0.4, 0.6]) {
            assert!((a - 0.99 * b).abs() < 1e-15);
        }
        assert!((out.depth.get(3, 4) - 0.99 * 2.5).abs() < 1e-15);
        assert_eq!(*out.count.get(3, 4), 1);
    }

    #[test]
    fn two_fragment_hand_example() {
        let cam = camera(8, 8, 10.0);
        let cfg = RenderConfig::default();
        // the far fragment is listed first to exercise the sort
        let back = frag(2.0, 2.0, 1.0, 1.0, 2.0, [0.0, 1.0, 0.0], 0);
        let front = frag(2.0, 2.0, 1.0, 0.5, 1.0, [1.0, 0.0, 0.0], 1);
        let out = render(&[back, front], &cam, &cfg).unwrap();
        assert_eq!(*out.color.get(2, 2), [0.5, 0.495, 0.0]);
        assert_eq!(*out.depth.get(2, 2), 1.49);
        assert!((out.alpha.get(2, 2) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = camera(20, 10, 10.0);
        let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..Default::default() };
        let out = render(&[], &cam, &cfg).unwrap();
        assert!(out.color.as_slice().iter().all(|c| *c == [0.1, 0.2, 0.3]));
        assert!(out.depth.as_slice().iter().all(|d| *d == 0.0));
        assert!(out.alpha.as_slice().iter().all(|a| *a == 0.0));
        assert!(out.count.as_slice().iter().all(|n| *n == 0));
    }

    #[test]
    fn normalized_depth_divides_by_alpha() {
        let cam = camera(8, 8, 10.0);
        let f = frag(3.0, 3.0, 2.0, 0.6, 3.0, [1.0; 3], 0);
        let out = render(&[f], &cam, &RenderConfig::default()).unwrap();
        let nd = out.normalized_depth();
        assert!((nd.get(3, 3) - 3.0).abs() < 1e-12);
        assert_eq!(*nd.get(7, 0), 0.0);
    }

    #[test]
    fn compositing_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cam = camera(40, 24, 10.0);
        let cfg = RenderConfig { background: [0.2, 0.1, 0.3], ..Default::default() };
        for _ in 0..40 {
            let frags: Vec<SplatFragment> = (0..5)
                .map(|i| {
                    let l = Matrix2::from_fn(|_, _| rng.random_range(-3.0..3.0));
                    let cov = l * l.transpose() + Matrix2::identity() * 0.3;
                    SplatFragment::new(
                        Vector2::new(rng.random_range(0.0..40.0), rng.random_range(0.0..24.0)),
                        cov,
                        rng.random_range(0.0..1.0),
                        rng.random_range(1.0..5.0),
                        [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                        i,
                    )
                    .unwrap()
                })
                .collect();
            let out = render(&frags, &cam, &cfg).unwrap();
            for y in 0..24 {
                for x in 0..40 {
                    let (c, d, a) = brute_force_pixel(Vector2::new(x as f64, y as f64), &frags, &cfg);
                    for ch in 0..3 {
                        assert!((out.color.get(x, y)[ch] - c[ch]).abs() < 1e-6);
                    }
                    assert!((out.depth.get(x, y) - d).abs() < 1e-6);
                    assert!((out.alpha.get(x, y) - a).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn depth_sort_tie_break() {
        let a = frag(1.0, 1.0, 1.0, 0.5, 2.0, [1.0; 3], 7);
        let b = frag(1.0, 1.0, 1.0, 0.5, 2.0, [1.0; 3], 3);
        let c = frag(1.0, 1.0, 1.0, 0.5, 1.0, [1.0; 3], 9);
        let frags = [a, b, c];
        let mut list = vec![0, 1, 2];
        sort_by_depth(&frags, &mut list);
        assert_eq!(list, vec![2, 1, 0]);
        let before = list.clone();
        sort_by_depth(&frags, &mut list);
        assert_eq!(list, before);
    }

    #[test]
    fn tile_overflow_policy() {
        let cam = camera(16, 16, 10.0);
        let frags: Vec<SplatFragment> =
            (0..10).map(|i| frag(8.0, 8.0, 4.0, 0.5, 1.0 + i as f64, [1.0; 3], i)).collect();
        let strict = RenderConfig { tile_cap: 4, overflow: OverflowPolicy::Error, ..Default::default() };
        assert!(matches!(render(&frags, &cam, &strict), Err(Error::TileOverflow { count: 10, .. })));
        let lenient = RenderConfig { tile_cap: 4, overflow: OverflowPolicy::DropFarthest, ..Default::default() };
        let bins = sort_fragments(&frags, 16, 16, &lenient).unwrap();
        assert_eq!(bins.lists[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn fragment_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = RenderConfig { background: [0.3, 0.5, 0.1], ..Default::default() };
        let (w, h) = (20, 18);
        let frags: Vec<SplatFragment> = (0..6)
            .map(|i| {
                let l = Matrix2::from_fn(|_, _| rng.random_range(-2.0..2.0));
                let cov = l * l.transpose() + Matrix2::identity() * 2.0;
                SplatFragment::new(
                    Vector2::new(rng.random_range(2.0..18.0), rng.random_range(2.0..16.0)),
                    cov,
                    rng.random_range(0.2..0.9),
                    rng.random_range(1.0..5.0),
                    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                    i,
                )
                .unwrap()
            })
            .collect();
        let gc = ImageBuf::from_fn(w, h, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let gd = ImageBuf::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
        let loss = |frags: &[SplatFragment]| {
            let bins = sort_fragments(frags, w, h, &cfg).unwrap();
            let out = render_binned(frags, &bins, w, h, &cfg);
            let mut l = 0.0;
            for i in 0..w * h {
                for c in 0..3 {
                    l += out.color.as_slice()[i][c] * gc.as_slice()[i][c];
                }
                l += out.depth.as_slice()[i] * gd.as_slice()[i];
            }
            l
        };
        let bins = sort_fragments(&frags, w, h, &cfg).unwrap();
        let grads = render_backward_fragments(&frags, &bins, &cfg, &gc, &gd);
        let eps = 1e-6;
        let check = |analytic: f64, perturb: &dyn Fn(&mut SplatFragment, f64)| {
            let mut plus = frags.clone();
            let mut minus = frags.clone();
            perturb(&mut plus[0], eps);
            perturb(&mut minus[0], -eps);
            // refresh the cached inverse
            for f in plus.iter_mut().chain(minus.iter_mut()) {
                f.conic = f.cov.try_inverse().unwrap();
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let err = (analytic - numeric).abs() / numeric.abs().max(1e-3);
            assert!(err < 1e-5, "analytic {analytic} numeric {numeric}");
        };
        let g = grads[0];
        check(g.opacity, &|f, e| f.opacity += e);
        check(g.depth, &|f, e| f.depth += e);
        check(g.mean.x, &|f, e| f.mean.x += e);
        check(g.mean.y, &|f, e| f.mean.y += e);
        check(g.color[1], &|f, e| f.color[1] += e);
        check(g.cov[(0, 0)], &|f, e| f.cov[(0, 0)] += e);
        check(g.cov[(1, 1)], &|f, e| f.cov[(1, 1)] += e);
        check(g.cov[(0, 1)] + g.cov[(1, 0)], &|f, e| {
            f.cov[(0, 1)] += e;
            f.cov[(1, 0)] += e;
        });
    }
}
