//! Synthetic dynamic scenes and the simulated supervision streams used to exercise the pipeline.
//!
//! Two scene families are available:
//!
//! * [`SceneFamily::Gaussians`]: ground-truth 3D Gaussians with analytic motion (static, linear,
//!   sinusoidal), rendered by this crate's own rasterizer.
//! * [`SceneFamily::TexturedPlanes`]: checkerboard planes and panels rendered by an independent
//!   ray tracer with closed-form depth, so reconstruction quality can be measured without relying
//!   on the renderer under test.
//!
//! Metric depth estimates are simulated by multiplicative noise plus spatially clustered outliers;
//! relative depth estimates by a per-`(t, n)` monotone warp `a·z^γ + b`.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{DepthKind, DepthStream};
use crate::dataset::{Dataset, SceneMeta};
use crate::error::{Error, Result};
use crate::gaussian::{rgb_to_dc, Gaussian3DSlice};
use crate::geometry::{CameraRig, CameraView, Intrinsics};
use crate::image::{is_valid_depth, DepthMap, ImageBuf, Mask, RgbImage};
use crate::io::quantize_srgb;
use crate::raster::{project_gaussian, render, RenderConfig, RenderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFamily {
    Gaussians,
    TexturedPlanes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvsNoise {
    /// Standard deviation of the multiplicative depth noise.
    pub sigma_d: f64,
    pub outlier_rate: f64,
    /// Edge of the world-space cells that are corrupted together; `None` draws outliers
    /// independently per pixel.
    pub outlier_cell: Option<f64>,
}

impl Default for MvsNoise {
    fn default() -> Self {
        Self { sigma_d: 0.0, outlier_rate: 0.1, outlier_cell: Some(0.5) }
    }
}

/// Uniform ranges for the relative-depth warp parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdeRanges {
    pub scale: [f64; 2],
    pub shift: [f64; 2],
    pub gamma: [f64; 2],
}

impl Default for MdeRanges {
    fn default() -> Self {
        Self { scale: [0.5, 2.0], shift: [0.0, 1.0], gamma: [0.7, 1.3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub family: SceneFamily,
    pub seed: u64,
    pub num_gaussians: usize,
    /// Training views; held-out views are placed between them.
    pub num_views: usize,
    pub num_heldout: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub arc_degrees: f64,
    pub radius: f64,
    pub background: [f64; 3],
    pub mvs: MvsNoise,
    pub mde: MdeRanges,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl SceneSpec {
    /// 64×64, 3 training views plus 1 held-out view on a 30° arc, 12 frames, 80 Gaussians.
    pub fn reference() -> Self {
        Self {
            family: SceneFamily::Gaussians,
            seed: 0,
            num_gaussians: 80,
            num_views: 3,
            num_heldout: 1,
            num_frames: 12,
            width: 64,
            height: 64,
            focal: 70.0,
            arc_degrees: 30.0,
            radius: 4.0,
            background: [0.0; 3],
            mvs: MvsNoise::default(),
            mde: MdeRanges::default(),
        }
    }

    /// Same rig as [`SceneSpec::reference`] over the textured-plane family.
    pub fn planes() -> Self {
        Self { family: SceneFamily::TexturedPlanes, ..Self::reference() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "planes" => Ok(Self::planes()),
            other => Err(Error::config(format!("unknown preset {other:?} (expected `reference` or `planes`)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_views < 2 {
            return Err(Error::config(format!(
                "{} training view(s) requested; consistency checking needs at least 2",
                self.num_views
            )));
        }
        if self.num_frames < 1 {
            return Err(Error::config("at least one frame is required"));
        }
        if self.width < 2 || self.height < 2 || !(self.focal > 0.0) || !(self.radius > 0.0) {
            return Err(Error::config("image size must be at least 2x2 with positive focal length and radius"));
        }
        if self.family == SceneFamily::Gaussians && self.num_gaussians < 8 {
            return Err(Error::config("the Gaussian scene family needs at least 8 primitives"));
        }
        let m = &self.mvs;
        if !(m.sigma_d >= 0.0) || !(0.0..=1.0).contains(&m.outlier_rate) || m.outlier_cell.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("MVS noise needs sigma_d >= 0, outlier_rate in [0, 1] and a positive cell size"));
        }
        let r = &self.mde;
        if !(r.scale[0] > 0.0 && r.scale[1] >= r.scale[0] && r.gamma[0] > 0.0 && r.gamma[1] >= r.gamma[0] && r.shift[1] >= r.shift[0]) {
            return Err(Error::config("MDE ranges need 0 < scale_lo <= scale_hi, 0 < gamma_lo <= gamma_hi, shift_lo <= shift_hi"));
        }
        Ok(())
    }

    /// Normalised time of frame `t`.
    pub fn time_of(&self, t: usize) -> f64 {
        frame_time(t, self.num_frames)
    }
}

/// Frame index to normalised time in `[0, 1]`.
pub fn frame_time(t: usize, num_frames: usize) -> f64 {
    if num_frames <= 1 {
        0.0
    } else {
        t as f64 / (num_frames - 1) as f64
    }
}

/// SplitMix64 finaliser used to derive independent seeds.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn unit_hash(seed: u64, parts: &[u64]) -> f64 {
    (mix_seed(seed, parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Cameras on a horizontal arc looking at the origin. Training views span the arc; held-out
/// views sit halfway between neighbouring training views, starting from the last gap.
pub fn arc_rig(spec: &SceneSpec) -> Result<(CameraRig, Vec<usize>, Vec<usize>)> {
    let n = spec.num_views;
    let half = spec.arc_degrees.to_radians() / 2.0;
    let train_angles: Vec<f64> = (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect();
    let mut angles = train_angles.clone();
    for h in 0..spec.num_heldout {
        let gap = (n - 2).saturating_sub(h % (n - 1));
        let offset = (h / (n - 1)) as f64 + 1.0;
        let a = train_angles[gap] + (train_angles[gap + 1] - train_angles[gap]) * (offset / (offset + 1.0));
        angles.push(a);
    }
    let k = Intrinsics {
        fx: spec.focal,
        fy: spec.focal,
        cx: (spec.width as f64 - 1.0) / 2.0,
        cy: (spec.height as f64 - 1.0) / 2.0,
    };
    let cams = angles
        .iter()
        .enumerate()
        .map(|(view, a)| {
            let eye = Vector3::new(spec.radius * a.sin(), 0.0, -spec.radius * a.cos());
            CameraView::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), k, spec.width, spec.height, view, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    let rig = CameraRig::from_static(&cams, spec.num_frames)?;
    Ok((rig, (0..n).collect(), (n..n + spec.num_heldout).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Displacement per unit of normalised time.
    Linear { velocity: [f64; 3] },
    /// `amplitude · sin(2π (frequency · t + phase))`.
    Sinusoidal { amplitude: [f64; 3], frequency: f64, phase: f64 },
}

impl Motion {
    pub fn offset(&self, t: f64) -> Vector3<f64> {
        match *self {
            Motion::Static => Vector3::zeros(),
            Motion::Linear { velocity } => Vector3::from(velocity) * t,
            Motion::Sinusoidal { amplitude, frequency, phase } => {
                Vector3::from(amplitude) * (2.0 * std::f64::consts::PI * (frequency * t + phase)).sin()
            }
        }
    }
}

/// A ground-truth 3D Gaussian whose mean moves analytically over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtGaussian {
    pub center: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub motion: Motion,
}

impl GtGaussian {
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        self.center + self.motion.offset(t)
    }

    pub fn slice(&self, t: f64) -> Gaussian3DSlice {
        let mut sh = [[0.0; 3]; 4];
        sh[0] = rgb_to_dc(self.color);
        Gaussian3DSlice { mean: self.center_at(t), cov: self.cov, decay: 1.0, opacity: self.opacity, sh }
    }
}

pub fn render_gt_gaussians(gts: &[GtGaussian], camera: &CameraView, t: f64, config: &RenderConfig) -> Result<RenderOutput> {
    let frags: Vec<_> =
        gts.iter().enumerate().filter_map(|(i, g)| project_gaussian(&g.slice(t), camera, 0, i, config)).collect();
    render(&frags, camera, config)
}

/// Colour and surface depth of the ground-truth Gaussians.
///
/// Colour is the rasterizer output. Depth ray-casts each Gaussian as the opaque ellipsoid on which
/// a lone copy of it would composite to alpha 0.5, `(x − μ)ᵀΣ⁻¹(x − μ) = 2·ln(2σ)`, and keeps the
/// nearest hit. Unlike composited centre depth this is a true surface, so it agrees between
/// views. Pixels with no hit or accumulated alpha ≤ 0.5 are NaN.
pub fn render_gt_surface(
    gts: &[GtGaussian],
    camera: &CameraView,
    t: f64,
    config: &RenderConfig,
) -> Result<(RenderOutput, DepthMap)> {
    let out = render_gt_gaussians(gts, camera, t, config)?;
    let origin = camera.center();
    let shells: Vec<(Vector3<f64>, Matrix3<f64>, f64)> = gts
        .iter()
        .filter(|g| g.opacity > 0.5)
        .filter_map(|g| Some((g.center_at(t), g.cov.try_inverse()?, 2.0 * (2.0 * g.opacity).ln())))
        .collect();
    let depth = ImageBuf::from_fn(camera.width, camera.height, |x, y| {
        if *out.alpha.get(x, y) <= 0.5 {
            return f64::NAN;
        }
        let Ok(p1) = camera.backproject(&Vector2::new(x as f64, y as f64), 1.0) else { return f64::NAN };
        // world ray o + s·d with camera depth s
        let d = p1 - origin;
        let mut best = f64::INFINITY;
        for (mu, q, k2) in &shells {
            let o = origin - mu;
            let qd = q * d;
            let a = d.dot(&qd);
            let b = 2.0 * o.dot(&qd);
            let c = o.dot(&(q * o)) - k2;
            let disc = b * b - 4.0 * a * c;
            if c <= 0.0 || disc < 0.0 {
                continue;
            }
            let s = (-b - disc.sqrt()) / (2.0 * a);
            if s > config.near_plane && s < best {
                best = s;
            }
        }
        if best.is_finite() {
            best
        } else {
            f64::NAN
        }
    });
    Ok((out, depth))
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    *Rotation3::from_euler_angles(
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .matrix()
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.08..0.92))
}

/// A textured wall of large flat Gaussians behind a cluster of small, partly moving ones.
pub fn reference_gaussians(spec: &SceneSpec) -> Vec<GtGaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[1]));
    let n = spec.num_gaussians;
    let side = ((0.6 * n as f64).sqrt().round() as usize).clamp(2, 7);
    let spacing = 6.0 / (side - 1) as f64;
    let mut out = Vec::with_capacity(n);
    for iy in 0..side {
        for ix in 0..side {
            let s = 0.65 * spacing;
            out.push(GtGaussian {
                center: Vector3::new(-3.0 + spacing * ix as f64, -3.0 + spacing * iy as f64, 1.2),
                cov: Matrix3::from_diagonal(&Vector3::new(s * s, s * s, 0.03 * 0.03)),
                opacity: 0.97,
                color: random_color(&mut rng),
                motion: Motion::Static,
            });
        }
    }
    for i in 0..n.saturating_sub(side * side) {
        let center = Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6));
        let r = random_rotation(&mut rng);
        let s = Vector3::new(rng.random_range(0.08..0.25), rng.random_range(0.08..0.25), rng.random_range(0.04..0.15));
        let motion = match i % 3 {
            0 => Motion::Static,
            1 => Motion::Linear {
                velocity: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2)],
            },
            _ => Motion::Sinusoidal {
                amplitude: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.1..0.1)],
                frequency: 1.0,
                phase: rng.random_range(0.0..1.0),
            },
        };
        out.push(GtGaussian {
            center,
            cov: r * Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose(),
            opacity: rng.random_range(0.7..0.95),
            color: random_color(&mut rng),
            motion,
        });
    }
    out
}

/// A checkerboard-textured planar region, optionally bounded and translating over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexturedPlane {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    /// Half extents along `u` and `v`; infinite for unbounded planes.
    pub half: [f64; 2],
    /// Planes bounded by `z < max_z` in world space (used to stop the floor at the wall).
    pub max_z: f64,
    pub cell: f64,
    pub colors: [[f64; 3]; 2],
    pub velocity: Vector3<f64>,
}

impl TexturedPlane {
    fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    /// Ray parameter and texture colour of the hit, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<(f64, [f64; 3])> {
        let o = self.origin + self.velocity * t;
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(o - origin)) / denom;
        if !(s > 1e-9) {
            return None;
        }
        let p = origin + dir * s;
        if !(p.z < self.max_z) {
            return None;
        }
        let d = p - o;
        let (a, b) = (d.dot(&self.u), d.dot(&self.v));
        if a.abs() > self.half[0] || b.abs() > self.half[1] {
            return None;
        }
        let parity = ((a / self.cell).floor() as i64 + (b / self.cell).floor() as i64).rem_euclid(2) as usize;
        let shade = 0.85 + 0.15 * (0.9 * a).sin() * (0.7 * b).cos();
        Some((s, self.colors[parity].map(|c| (c * shade).clamp(0.0, 1.0))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneScene {
    pub planes: Vec<TexturedPlane>,
}

/// Nearest hit along a ray: `(ray parameter, surface index, colour)`.
pub type PlaneHit = (f64, usize, [f64; 3]);

impl PlaneScene {
    /// A back wall, a floor, a static tilted panel and a panel sliding across the view.
    pub fn reference() -> Self {
        let inf = f64::INFINITY;
        let x = Vector3::x();
        let y = Vector3::y();
        let tilt = Rotation3::from_axis_angle(&Vector3::y_axis(), 30f64.to_radians());
        Self {
            planes: vec![
                TexturedPlane {
                    origin: Vector3::new(0.0, 0.0, 1.5),
                    u: x,
                    v: y,
                    half: [inf, inf],
                    max_z: inf,
                    cell: 0.35,
                    colors: [[0.85, 0.35, 0.2], [0.2, 0.35, 0.8]],
                    velocity: Vector3::zeros(),
                },
                TexturedPlane {
                    origin: Vector3::new(0.0, 1.0, 0.0),
                    u: Vector3::z(),
                    v: x,
                    half: [inf, inf],
                    max_z: 1.5,
                    cell: 0.4,
                    colors: [[0.9, 0.88, 0.8], [0.3, 0.3, 0.32]],
                    velocity: Vector3::zeros(),
                },
                TexturedPlane {
                    origin: Vector3::new(0.9, 0.3, 0.4),
                    u: tilt * x,
                    v: y,
                    half: [0.35, 0.6],
                    max_z: inf,
                    cell: 0.2,
                    colors: [[0.1, 0.8, 0.85], [0.8, 0.15, 0.7]],
                    velocity: Vector3::zeros(),
                },
                TexturedPlane {
                    origin: Vector3::new(-0.5, -0.1, -0.2),
                    u: x,
                    v: y,
                    half: [0.45, 0.45],
                    max_z: inf,
                    cell: 0.15,
                    colors: [[0.95, 0.85, 0.1], [0.1, 0.55, 0.2]],
                    velocity: Vector3::new(1.0, 0.0, 0.0),
                },
            ],
        }
    }

    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<PlaneHit> {
        let mut best: Option<PlaneHit> = None;
        for (i, p) in self.planes.iter().enumerate() {
            if let Some((s, c)) = p.intersect(origin, dir, t) {
                if best.is_none_or(|b| s < b.0) {
                    best = Some((s, i, c));
                }
            }
        }
        best
    }

    /// Surface index and z-depth seen through a (sub-)pixel position.
    pub fn probe(&self, camera: &CameraView, pixel: &Vector2<f64>, t: f64) -> Option<(usize, f64, Vector3<f64>)> {
        let origin = camera.center();
        let dir = camera.rotation.transpose() * camera.unproject_camera(pixel, 1.0);
        let (s, id, _) = self.trace(&origin, &dir, t)?;
        // `dir` has unit camera-z, so the ray parameter is the z-depth
        Some((id, s, origin + dir * s))
    }

    /// Colour, exact z-depth (NaN where no surface is hit) and surface index per pixel.
    pub fn render(&self, camera: &CameraView, t: f64, background: [f64; 3]) -> (RgbImage, DepthMap, ImageBuf<Option<usize>>) {
        let origin = camera.center();
        let (w, h) = (camera.width, camera.height);
        let mut color = ImageBuf::filled(w, h, background);
        let mut depth = ImageBuf::filled(w, h, f64::NAN);
        let mut ids = ImageBuf::filled(w, h, None);
        for y in 0..h {
            for x in 0..w {
                let dir = camera.rotation.transpose() * camera.unproject_camera(&Vector2::new(x as f64, y as f64), 1.0);
                if let Some((s, id, c)) = self.trace(&origin, &dir, t) {
                    *color.get_mut(x, y) = c;
                    *depth.get_mut(x, y) = s;
                    *ids.get_mut(x, y) = Some(id);
                }
            }
        }
        (color, depth, ids)
    }
}

/// Pixels of `reference` whose surface point is seen, unoccluded, by `neighbor`, with the whole
/// bilinear footprint around its projection on the same surface.
pub fn covisibility(scene: &PlaneScene, reference: &CameraView, neighbor: &CameraView, t: f64) -> Mask {
    ImageBuf::from_fn(reference.width, reference.height, |x, y| {
        let Some((id, _, point)) = scene.probe(reference, &Vector2::new(x as f64, y as f64), t) else {
            return false;
        };
        let (p, z) = neighbor.project(&point);
        if !(z > 0.0) || !neighbor.contains(&p) {
            return false;
        }
        let Some((hit_id, hit_z, _)) = scene.probe(neighbor, &p, t) else {
            return false;
        };
        if hit_id != id || (hit_z - z).abs() > 1e-9 * z {
            return false;
        }
        let (x0, y0) = (p.x.floor(), p.y.floor());
        let xs: &[f64] = if p.x > x0 { &[x0, x0 + 1.0] } else { &[x0] };
        let ys: &[f64] = if p.y > y0 { &[y0, y0 + 1.0] } else { &[y0] };
        ys.iter().all(|&py| xs.iter().all(|&px| scene.probe(neighbor, &Vector2::new(px, py), t).is_some_and(|h| h.0 == id)))
    })
}

/// Simulated metric depth and photometric probability for one `(t, n)` slot.
///
/// Valid pixels get `gt·(1 + ε)` with `ε ~ N(0, σ_d²)`. Outliers replace the depth with a uniform
/// draw in `[0.5·min, 2·max]` of the valid ground truth and get probability `U(0, 0.4)`; clean
/// pixels have probability 1. With a cell size, a pixel is an outlier when its ground-truth
/// surface point falls in a corrupted world cell, so corruption is coherent across views and
/// persists over time for static surfaces.
pub fn simulate_mvs_depth(gt: &DepthMap, camera: &CameraView, noise: &MvsNoise, seed: u64) -> (DepthMap, DepthMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[2, camera.frame as u64, camera.view as u64]));
    let normal = Normal::new(0.0, noise.sigma_d.max(0.0)).expect("finite sigma");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &d in gt.as_slice() {
        if is_valid_depth(d) {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let mut depth = ImageBuf::filled(gt.width(), gt.height(), f64::NAN);
    let mut prob = ImageBuf::filled(gt.width(), gt.height(), 0.0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let d = *gt.get(x, y);
            // draw every variate for every pixel so streams stay aligned across settings
            let eps = normal.sample(&mut rng);
            let u_pixel: f64 = rng.random();
            let u_value: f64 = rng.random();
            let u_prob: f64 = rng.random();
            if !is_valid_depth(d) {
                continue;
            }
            let outlier = match noise.outlier_cell {
                Some(cell) => {
                    let p = camera.backproject(&Vector2::new(x as f64, y as f64), d).expect("valid depth");
                    let key = [(p.x / cell).floor(), (p.y / cell).floor(), (p.z / cell).floor()].map(|v| v as i64 as u64);
                    unit_hash(seed, &[3, key[0], key[1], key[2]]) < noise.outlier_rate
                }
                None => u_pixel < noise.outlier_rate,
            };
            if outlier {
                *depth.get_mut(x, y) = 0.5 * lo + u_value * (2.0 * hi - 0.5 * lo);
                *prob.get_mut(x, y) = 0.4 * u_prob;
            } else {
                *depth.get_mut(x, y) = d * (1.0 + eps);
                *prob.get_mut(x, y) = 1.0;
            }
        }
    }
    (depth, prob)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdeWarp {
    pub scale: f64,
    pub shift: f64,
    pub gamma: f64,
}

impl MdeWarp {
    pub const IDENTITY: MdeWarp = MdeWarp { scale: 1.0, shift: 0.0, gamma: 1.0 };

    pub fn draw(ranges: &MdeRanges, seed: u64, frame: usize, view: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[4, frame as u64, view as u64]));
        let mut u = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        Self { scale: u(ranges.scale), gamma: u(ranges.gamma), shift: u(ranges.shift) }
    }
}

/// `a · gt^γ + b` on valid pixels, NaN elsewhere.
pub fn simulate_mde_depth(gt: &DepthMap, warp: &MdeWarp) -> DepthMap {
    gt.map(|&d| if is_valid_depth(d) { warp.scale * d.powf(warp.gamma) + warp.shift } else { f64::NAN })
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Gaussians(Vec<GtGaussian>),
    Planes(PlaneScene),
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Renders every `(t, n)` slot and simulates the depth streams.
///
/// Colour images are quantised to 8-bit sRGB so the in-memory dataset equals what a PNG round
/// trip produces. Ground-truth depth is exact for the plane family; for the Gaussian family it is
/// the ray-cast ellipsoid depth of [`render_gt_surface`].
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (rig, training_views, heldout_views) = arc_rig(spec)?;
    let render_cfg = RenderConfig { background: spec.background, overflow: crate::raster::OverflowPolicy::DropFarthest, ..Default::default() };
    let truth = match spec.family {
        SceneFamily::Gaussians => GroundTruth::Gaussians(reference_gaussians(spec)),
        SceneFamily::TexturedPlanes => GroundTruth::Planes(PlaneScene::reference()),
    };
    let slots: Vec<(RgbImage, DepthMap)> = rig
        .views()
        .par_iter()
        .map(|cam| -> Result<(RgbImage, DepthMap)> {
            let t = spec.time_of(cam.frame);
            match &truth {
                GroundTruth::Gaussians(gts) => {
                    let (out, depth) = render_gt_surface(gts, cam, t, &render_cfg)?;
                    Ok((out.color, depth))
                }
                GroundTruth::Planes(scene) => {
                    let (c, d, _) = scene.render(cam, t, spec.background);
                    Ok((c, d))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut images = Vec::with_capacity(slots.len());
    let mut gt = Vec::with_capacity(slots.len());
    for (c, d) in slots {
        images.push(c.map(|p| p.map(quantize_srgb)));
        gt.push(d);
    }
    let mut mvs = Vec::with_capacity(gt.len());
    let mut prob = Vec::with_capacity(gt.len());
    let mut mde = Vec::with_capacity(gt.len());
    for (cam, d) in rig.views().iter().zip(&gt) {
        let (m, p) = simulate_mvs_depth(d, cam, &spec.mvs, spec.seed);
        mvs.push(m);
        prob.push(p);
        mde.push(simulate_mde_depth(d, &MdeWarp::draw(&spec.mde, spec.seed, cam.frame, cam.view)));
    }
    let bounds = depth_bounds(&rig, &gt, &training_views);
    let meta = SceneMeta {
        spec: Some(spec.clone()),
        num_frames: spec.num_frames,
        training_views,
        heldout_views,
        bounds,
        background: spec.background,
    };
    let dataset = Dataset {
        meta,
        depth_gt: Some(DepthStream::new(DepthKind::GroundTruth, &rig, gt, None)?),
        mvs: DepthStream::new(DepthKind::MvsMetric, &rig, mvs, Some(prob))?,
        mde: DepthStream::new(DepthKind::MdeRelative, &rig, mde, None)?,
        images,
        rig,
    };
    Ok(SyntheticScene { dataset, truth })
}

/// Axis-aligned box around the frame-0 surface points seen by the given views.
pub fn depth_bounds(rig: &CameraRig, depth: &[DepthMap], views: &[usize]) -> [[f64; 3]; 2] {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &v in views {
        let Some(n) = rig.position_of(v) else { continue };
        let cam = rig.get(0, n);
        let d = &depth[n];
        for y in 0..cam.height {
            for x in 0..cam.width {
                let z = *d.get(x, y);
                if let Ok(p) = cam.backproject(&Vector2::new(x as f64, y as f64), z) {
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if !(lo.x <= hi.x) {
        return [[-1.0; 3], [1.0; 3]];
    }
    [lo.into(), hi.into()]
}
