//! Dynamic consistency checking of metric depth streams, mask construction, masked point-cloud
//! fusion and the structure loss.
//!
//! For a reference pixel `p` with depth `D(p)`, the loop `p → X → p′ (neighbour) → X′ → p″`
//! gives a pixel error `ξ_p = ‖p − p″‖` and a relative depth error `ξ_d = |D(p) − z″| / D(p)`,
//! where `z″` is the depth of `X′` in the reference camera. Scores aggregate over neighbours and
//! frames:
//!
//! ```text
//! c(p) = (1/N_f) Σ_t Σ_{m ≠ n} exp(−(ξ_p + β ξ_d))
//! ```
//!
//! so with three views a perfectly consistent pixel scores 2.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, CameraView};
use crate::image::{is_valid_depth, DepthMap, ImageBuf, Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthKind {
    MvsMetric,
    MdeRelative,
    GroundTruth,
}

/// Depth maps for every `(t, n)` slot of a rig, stored frame-major like [`CameraRig::views`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthStream {
    pub kind: DepthKind,
    pub num_frames: usize,
    pub num_views: usize,
    pub depth: Vec<DepthMap>,
    pub prob: Option<Vec<DepthMap>>,
}

impl DepthStream {
    pub fn new(kind: DepthKind, rig: &CameraRig, depth: Vec<DepthMap>, prob: Option<Vec<DepthMap>>) -> Result<Self> {
        let s = Self { kind, num_frames: rig.num_frames(), num_views: rig.num_views(), depth, prob };
        s.validate(rig)?;
        Ok(s)
    }

    pub fn validate(&self, rig: &CameraRig) -> Result<()> {
        let n = rig.views().len();
        if self.depth.len() != n || self.prob.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::ShapeMismatch(format!("depth stream has {} maps for {n} rig slots", self.depth.len())));
        }
        for (i, cam) in rig.views().iter().enumerate() {
            let d = &self.depth[i];
            if d.width() != cam.width || d.height() != cam.height {
                return Err(Error::ShapeMismatch(format!(
                    "depth map for frame {} view {} is {}x{}, camera is {}x{}",
                    cam.frame,
                    cam.view,
                    d.width(),
                    d.height(),
                    cam.width,
                    cam.height
                )));
            }
            if let Some(p) = &self.prob {
                d.ensure_same_shape(&p[i], "probability map")?;
            }
        }
        Ok(())
    }

    pub fn get(&self, t: usize, n: usize) -> &DepthMap {
        &self.depth[t * self.num_views + n]
    }

    pub fn prob(&self, t: usize, n: usize) -> Option<&DepthMap> {
        self.prob.as_ref().map(|p| &p[t * self.num_views + n])
    }

    /// Restriction to the given view positions (ascending).
    pub fn subset(&self, positions: &[usize]) -> Self {
        let pick = |maps: &Vec<DepthMap>| {
            (0..self.num_frames)
                .flat_map(|t| positions.iter().map(move |&n| (t, n)))
                .map(|(t, n)| maps[t * self.num_views + n].clone())
                .collect::<Vec<_>>()
        };
        Self {
            kind: self.kind,
            num_frames: self.num_frames,
            num_views: positions.len(),
            depth: pick(&self.depth),
            prob: self.prob.as_ref().map(pick),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub beta: f64,
    pub score_threshold: f64,
    pub prob_threshold: f64,
    /// Relative tolerance of the forward-projection occlusion test; `None` disables it.
    pub occlusion_tolerance: Option<f64>,
    pub frame_stride: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { beta: 200.0, score_threshold: 1.8, prob_threshold: 0.5, occlusion_tolerance: Some(0.1), frame_stride: 1 }
    }
}

/// Depth at a continuous position, interpolated bilinearly in inverse depth.
///
/// Every neighbour carrying weight must hold a valid depth. Interpolating `1/z` makes the
/// result exact on planes, whose inverse depth is affine in pixel coordinates.
pub fn sample_depth(map: &DepthMap, pixel: &Vector2<f64>) -> Option<f64> {
    let (x, y) = (pixel.x, pixel.y);
    if !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut acc = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let w = wx * wy;
            if w == 0.0 {
                continue;
            }
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi >= map.width() || yi >= map.height() {
                return None;
            }
            let d = *map.get(xi, yi);
            if !is_valid_depth(d) {
                return None;
            }
            acc += w / d;
        }
    }
    Some(1.0 / acc)
}

/// Pixel and relative depth errors of the reprojection loop, or `None` when the loop leaves an
/// image, passes behind a camera, hits an invalid sample or fails the occlusion test.
pub fn reprojection_errors(
    reference: &CameraView,
    ref_depth: &DepthMap,
    neighbor: &CameraView,
    nbr_depth: &DepthMap,
    pixel: (usize, usize),
    occlusion_tolerance: Option<f64>,
) -> Option<(f64, f64)> {
    let d = *ref_depth.get(pixel.0, pixel.1);
    if !is_valid_depth(d) {
        return None;
    }
    let p = Vector2::new(pixel.0 as f64, pixel.1 as f64);
    let x = reference.backproject(&p, d).ok()?;
    let (p1, z1) = neighbor.project(&x);
    if !(z1 > 0.0) || !neighbor.contains(&p1) {
        return None;
    }
    let d1 = sample_depth(nbr_depth, &p1)?;
    if let Some(tol) = occlusion_tolerance {
        if (d1 - z1).abs() / z1 > tol {
            return None;
        }
    }
    let x1 = neighbor.backproject(&p1, d1).ok()?;
    let (p2, z2) = reference.project(&x1);
    if !(z2 > 0.0) {
        return None;
    }
    Some(((p - p2).norm(), (d - z2).abs() / d))
}

/// Consistency score map per view position, aggregated over (strided) frames.
pub fn dynamic_consistency(stream: &DepthStream, rig: &CameraRig, config: &ConsistencyConfig) -> Result<Vec<DepthMap>> {
    stream.validate(rig)?;
    let stride = config.frame_stride.max(1);
    let frames: Vec<usize> = (0..rig.num_frames()).step_by(stride).collect();
    let nf = frames.len() as f64;
    let nv = rig.num_views();
    let scores = (0..nv)
        .map(|n| {
            let cam0 = rig.get(0, n);
            let (w, h) = (cam0.width, cam0.height);
            let rows: Vec<Vec<f64>> = (0..h)
                .into_par_iter()
                .map(|y| {
                    (0..w)
                        .map(|x| {
                            let mut s = 0.0;
                            for &t in &frames {
                                for m in (0..nv).filter(|&m| m != n) {
                                    if let Some((xp, xd)) = reprojection_errors(
                                        rig.get(t, n),
                                        stream.get(t, n),
                                        rig.get(t, m),
                                        stream.get(t, m),
                                        (x, y),
                                        config.occlusion_tolerance,
                                    ) {
                                        s += (-(xp + config.beta * xd)).exp();
                                    }
                                }
                            }
                            s / nf
                        })
                        .collect()
                })
                .collect();
            ImageBuf::from_vec(w, h, rows.concat()).expect("row lengths match")
        })
        .collect();
    Ok(scores)
}

/// Score maps and the per-`(t, n)` masks derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMask {
    pub num_frames: usize,
    pub num_views: usize,
    pub scores: Vec<DepthMap>,
    pub masks: Vec<Mask>,
}

impl ConsistencyMask {
    pub fn get(&self, t: usize, n: usize) -> &Mask {
        &self.masks[t * self.num_views + n]
    }

    /// Fraction of pixels kept in each view position, averaged over frames.
    pub fn kept_fraction(&self) -> Vec<f64> {
        (0..self.num_views)
            .map(|n| {
                let mut kept = 0usize;
                let mut total = 0usize;
                for t in 0..self.num_frames {
                    let m = self.get(t, n);
                    kept += m.as_slice().iter().filter(|v| **v).count();
                    total += m.len();
                }
                kept as f64 / total.max(1) as f64
            })
            .collect()
    }
}

/// `mask = score ≥ score_threshold ∧ prob ≥ prob_threshold ∧ depth valid`. A missing probability
/// stream counts as probability 1.
pub fn build_masks(scores: &[DepthMap], stream: &DepthStream, score_threshold: f64, prob_threshold: f64) -> ConsistencyMask {
    let mut masks = Vec::with_capacity(stream.depth.len());
    for t in 0..stream.num_frames {
        for n in 0..stream.num_views {
            let depth = stream.get(t, n);
            let prob = stream.prob(t, n);
            let score = &scores[n];
            masks.push(ImageBuf::from_fn(depth.width(), depth.height(), |x, y| {
                is_valid_depth(*depth.get(x, y))
                    && *score.get(x, y) >= score_threshold
                    && prob.map_or(1.0, |p| *p.get(x, y)) >= prob_threshold
            }));
        }
    }
    ConsistencyMask { num_frames: stream.num_frames, num_views: stream.num_views, scores: scores.to_vec(), masks }
}

/// Scores plus masks with the thresholds from `config`.
pub fn check_consistency(stream: &DepthStream, rig: &CameraRig, config: &ConsistencyConfig) -> Result<ConsistencyMask> {
    let scores = dynamic_consistency(stream, rig, config)?;
    Ok(build_masks(&scores, stream, config.score_threshold, config.prob_threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Edge of the deduplication voxel grid; `0` keeps every point.
    pub voxel_size: f64,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { voxel_size: 0.02, max_points: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Backprojects the masked frame-0 pixels of every view into one coloured cloud.
///
/// Points sharing a voxel are averaged (in first-seen order), then a seeded uniform subsample
/// enforces `max_points`.
pub fn fuse_point_cloud(
    stream: &DepthStream,
    masks: &[Mask],
    images: &[RgbImage],
    rig: &CameraRig,
    config: &FusionConfig,
) -> Result<PointCloud> {
    let mut cloud = PointCloud::default();
    for n in 0..rig.num_views() {
        let cam = rig.get(0, n);
        let depth = stream.get(0, n);
        let mask = &masks[n];
        let img = &images[n];
        depth.ensure_same_shape(mask, "fusion mask")?;
        depth.ensure_same_shape(img, "fusion image")?;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let d = *depth.get(x, y);
                if !*mask.get(x, y) || !is_valid_depth(d) {
                    continue;
                }
                cloud.points.push(cam.backproject(&Vector2::new(x as f64, y as f64), d)?);
                cloud.colors.push(*img.get(x, y));
            }
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyFusion);
    }
    if config.voxel_size > 0.0 {
        cloud = voxel_dedup(&cloud, config.voxel_size);
    }
    if cloud.len() > config.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut keep = rand::seq::index::sample(&mut rng, cloud.len(), config.max_points).into_vec();
        keep.sort_unstable();
        cloud = PointCloud {
            points: keep.iter().map(|&i| cloud.points[i]).collect(),
            colors: keep.iter().map(|&i| cloud.colors[i]).collect(),
        };
    }
    Ok(cloud)
}

fn voxel_dedup(cloud: &PointCloud, cell: f64) -> PointCloud {
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, [f64; 3], f64)> = Vec::new();
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let key = [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64];
        let slot = *index.entry(key).or_insert_with(|| {
            sums.push((Vector3::zeros(), [0.0; 3], 0.0));
            sums.len() - 1
        });
        let s = &mut sums[slot];
        s.0 += p;
        for k in 0..3 {
            s.1[k] += c[k];
        }
        s.2 += 1.0;
    }
    PointCloud {
        points: sums.iter().map(|(p, _, n)| p / *n).collect(),
        colors: sums.iter().map(|(_, c, n)| c.map(|v| v / n)).collect(),
    }
}

/// Smooth-L1 with transition `beta`; the knee belongs to the quadratic branch.
#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() <= beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Mean smooth-L1 between rendered and metric depth over masked pixels with a valid metric depth,
/// and its gradient with respect to the rendered depth.
pub fn structure_loss(rendered: &DepthMap, metric: &DepthMap, mask: &Mask, beta: f64) -> Result<(f64, DepthMap)> {
    rendered.ensure_same_shape(metric, "structure loss depth")?;
    rendered.ensure_same_shape(mask, "structure loss mask")?;
    let mut grad = ImageBuf::filled(rendered.width(), rendered.height(), 0.0);
    let selected: Vec<usize> = (0..rendered.len())
        .filter(|&i| mask.as_slice()[i] && is_valid_depth(metric.as_slice()[i]))
        .collect();
    if selected.is_empty() {
        return Ok((0.0, grad));
    }
    let n = selected.len() as f64;
    let mut loss = 0.0;
    for &i in &selected {
        let (l, g) = smooth_l1(rendered.as_slice()[i] - metric.as_slice()[i], beta);
        loss += l;
        grad.as_mut_slice()[i] = g / n;
    }
    Ok((loss / n, grad))
}
