//! Optimisation: the total objective, Adam updates per parameter group, pruning, checkpointing,
//! held-out evaluation and the ablation harness.
//!
//! ```text
//! L = L_photo + λ1·L_rank + λ2·L_patch + λ3·L_struct
//! ```

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{
    build_masks, check_consistency, fuse_point_cloud, structure_loss, ConsistencyConfig, ConsistencyMask, FusionConfig,
    PointCloud,
};
use crate::dataset::Dataset;
use crate::depth_reg::{median_depth, patch_loss, ranking_loss, sample_pixel_pairs, PatchConfig, RankingConfig};
use crate::error::{Error, Result};
use crate::field::{GaussianField, ParamGroup};
use crate::gaussian::{logit, rgb_to_dc, sigmoid, ColorModel, Gaussian4D, IDENTITY_QUAT};
use crate::geometry::CameraRig;
use crate::image::{is_valid_depth, DepthMap, ImageBuf, Mask, RgbImage};
use crate::io;
use crate::metrics::{image_metrics, photometric_loss, psnr_from_mse, ImageMetrics};
use crate::raster::{render_field, render_field_backward, RenderConfig};
use crate::synth::{frame_time, mix_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rank: f64,
    pub patch: f64,
    pub structure: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rank: 0.05, patch: 0.02, structure: 0.02 }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights { rank: 0.0, patch: 0.0, structure: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the camera extent and decayed exponentially to
    /// `means_final` over the run.
    pub means: f64,
    pub means_final: f64,
    pub rotation: f64,
    pub scales: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { means: 1.6e-4, means_final: 1.6e-6, rotation: 1e-3, scales: 5e-3, opacity: 5e-2, color: 2.5e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Uniform random points inside the scene bounds.
    Random,
    /// Every valid frame-0 metric depth pixel, downsampled to `downsample_points`.
    FusedDownsampled,
    /// Frame-0 metric depth pixels kept by the consistency masks.
    FusedMasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub strategy: InitStrategy,
    pub random_points: usize,
    pub downsample_points: usize,
    /// Temporal scale `s_t`; with `μ_t = 0` the decay stays above `exp(−1/(2 s_t²))` on `[0, 1]`.
    pub temporal_scale: f64,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            strategy: InitStrategy::FusedMasked,
            random_points: 2000,
            downsample_points: 2000,
            temporal_scale: 1.2,
            opacity: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr: LearningRates,
    pub ssim_weight: f64,
    pub weights: LossWeights,
    pub ranking: RankingConfig,
    pub patch: PatchConfig,
    /// Smooth-L1 transition of the structure loss, in scene units.
    pub structure_beta: f64,
    /// Rendered pixels below this accumulated alpha are ignored by the relative-depth losses.
    pub depth_alpha_threshold: f64,
    pub prune_threshold: f64,
    /// Prune every this many iterations; 0 disables pruning.
    pub prune_every: usize,
    /// Write an intermediate checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub render: RenderConfig,
    pub color: ColorModel,
    pub consistency: ConsistencyConfig,
    pub fusion: FusionConfig,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 0,
            lr: LearningRates::default(),
            ssim_weight: 0.2,
            weights: LossWeights::default(),
            ranking: RankingConfig::default(),
            patch: PatchConfig::default(),
            structure_beta: 1.0,
            depth_alpha_threshold: 0.5,
            prune_threshold: 0.005,
            prune_every: 500,
            checkpoint_every: 0,
            render: RenderConfig::default(),
            color: ColorModel::default(),
            consistency: ConsistencyConfig::default(),
            fusion: FusionConfig { voxel_size: 0.03, ..Default::default() },
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        if ![lr.means, lr.means_final, lr.rotation, lr.scales, lr.opacity, lr.color].iter().all(|v| *v > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ssim_weight) {
            return Err(Error::config("ssim_weight must lie in [0, 1]"));
        }
        let w = &self.weights;
        if !(w.rank >= 0.0 && w.patch >= 0.0 && w.structure >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.ranking.kappa > 0.0) || self.ranking.pairs_per_iter == 0 {
            return Err(Error::config("ranking needs kappa > 0 and at least one pair per iteration"));
        }
        if !(self.structure_beta > 0.0) {
            return Err(Error::config("structure_beta must be positive"));
        }
        self.patch.validate()?;
        self.color.validate()
    }
}

/// Loss values of one iteration and the norms of each term's gradient with respect to the
/// rendered image (photometric) or rendered depth (the other three, weighted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photometric: f64,
    pub ranking: f64,
    pub patch: f64,
    pub structure: f64,
    pub total: f64,
    pub grad_norms: [f64; 4],
}

impl LossReport {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.photometric + w.rank * self.ranking + w.patch * self.patch + w.structure * self.structure
    }
}

/// Per-`(t, view)` supervision for one training sample.
pub struct Targets<'a> {
    pub image: &'a RgbImage,
    pub mvs: Option<&'a DepthMap>,
    pub mask: Option<&'a Mask>,
    pub mde: Option<&'a DepthMap>,
}

/// Gradients with respect to the rendered image and depth, plus the loss report.
pub struct ImageLoss {
    pub report: LossReport,
    pub ssim: f64,
    pub mse: f64,
    pub grad_color: RgbImage,
    pub grad_depth: DepthMap,
}

fn image_norm(img: &RgbImage) -> f64 {
    img.as_slice().iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn depth_norm(d: &DepthMap, scale: f64) -> f64 {
    scale * d.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Evaluates the total objective on a rendered colour/depth/alpha triple. Terms whose weight is
/// zero, or whose supervision is missing, are skipped and reported as 0.
pub fn total_loss(
    color: &RgbImage,
    depth: &DepthMap,
    alpha: &DepthMap,
    targets: &Targets,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ImageLoss> {
    let photo = photometric_loss(color, targets.image, config.ssim_weight)?;
    let mse = crate::metrics::mse(color, targets.image)?;
    let w = &config.weights;
    let mut grad_depth = ImageBuf::filled(depth.width(), depth.height(), 0.0);
    let mut report = LossReport {
        photometric: photo.value,
        ranking: 0.0,
        patch: 0.0,
        structure: 0.0,
        total: 0.0,
        grad_norms: [image_norm(&photo.grad), 0.0, 0.0, 0.0],
    };
    let valid = alpha.map(|a| *a >= config.depth_alpha_threshold);
    let mut add = |g: &DepthMap, weight: f64| {
        for (d, v) in grad_depth.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *d += weight * v;
        }
    };
    if let (true, Some(mde)) = (w.rank > 0.0, targets.mde) {
        let batch = sample_pixel_pairs(rng, config.ranking.pairs_per_iter, mde, &config.ranking);
        if let Some(median) = median_depth(depth, Some(&valid)) {
            let (l, g) = ranking_loss(depth, mde, &batch, config.ranking.kappa / median, Some(&valid))?;
            report.ranking = l;
            report.grad_norms[1] = depth_norm(&g, w.rank);
            add(&g, w.rank);
        }
    }
    if let (true, Some(mde)) = (w.patch > 0.0, targets.mde) {
        let side = config.patch.sample_size(rng);
        let (l, g) = patch_loss(depth, mde, side, config.patch.delta, Some(&valid))?;
        report.patch = l;
        report.grad_norms[2] = depth_norm(&g, w.patch);
        add(&g, w.patch);
    }
    if let (true, Some(mvs), Some(mask)) = (w.structure > 0.0, targets.mvs, targets.mask) {
        let (l, g) = structure_loss(depth, mvs, mask, config.structure_beta)?;
        report.structure = l;
        report.grad_norms[3] = depth_norm(&g, w.structure);
        add(&g, w.structure);
    }
    report.total = report.weighted_sum(w);
    Ok(ImageLoss { report, ssim: photo.ssim.unwrap_or(f64::NAN), mse, grad_color: photo.grad, grad_depth })
}

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: GaussianField,
    v: GaussianField,
}

impl Adam {
    pub fn new(field: &GaussianField) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15, step: 0, m: field.zeros_like(), v: field.zeros_like() }
    }

    pub fn step(&mut self, field: &mut GaussianField, grad: &GaussianField, lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for group in ParamGroup::ALL {
            let rate = lr(group);
            let params = field.group_mut(group);
            let ms = self.m.group_mut(group);
            let vs = self.v.group_mut(group);
            let gs = grad.group(group);
            for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
                for i in 0..p.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p[i] -= rate * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }

    pub fn retain_mask(&mut self, keep: &[bool]) {
        self.m.retain_mask(keep);
        self.v.retain_mask(keep);
    }
}

/// Supervision shared by every run on a dataset: the training sub-rig and its consistency masks.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub positions: Vec<usize>,
    pub rig: CameraRig,
    pub masks: ConsistencyMask,
}

impl TrainingData {
    pub fn prepare(dataset: &Dataset, consistency: &ConsistencyConfig) -> Result<Self> {
        dataset.validate()?;
        let positions = dataset.training_positions();
        let rig = dataset.rig.subset(&dataset.meta.training_views)?;
        let mvs = dataset.mvs.subset(&positions);
        let masks = check_consistency(&mvs, &rig, consistency)?;
        Ok(Self { positions, rig, masks })
    }
}

/// Camera-centre spread of the training views, used to scale position learning rates.
pub fn camera_extent(rig: &CameraRig) -> f64 {
    let centers: Vec<Vector3<f64>> = (0..rig.num_views()).map(|n| rig.get(0, n).center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    1.1 * radius.max(1e-3)
}

/// Mean squared distance of every point to its `k` nearest neighbours, via a uniform grid.
pub fn knn_mean_sq_dist(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= 1 {
        return vec![1e-2; n];
    }
    let k = k.min(n - 1);
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max().max(1e-9);
    let cell = extent / (n as f64).cbrt().max(1.0);
    let key = |p: &Vector3<f64>| -> [i64; 3] {
        let d = (p - lo) / cell;
        [d.x.floor() as i64, d.y.floor() as i64, d.z.floor() as i64]
    };
    let mut grid: std::collections::HashMap<[i64; 3], Vec<usize>> = std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            let mut ring = 0i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                            for &j in list {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm_squared();
                                if best.len() < k || d < best[k - 1] {
                                    let pos = best.partition_point(|b| *b <= d);
                                    best.insert(pos, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                // every unvisited point is at least `ring · cell` away
                let reach = ring as f64 * cell;
                if best.len() == k && best[k - 1] <= reach * reach {
                    break;
                }
                ring += 1;
                if ring as f64 * cell > 2.0 * extent + cell {
                    break;
                }
            }
            (best.iter().sum::<f64>() / best.len().max(1) as f64).max(1e-10)
        })
        .collect()
}

/// Primitives at the given points: identity rotation, `μ_t = 0`, isotropic spatial scale from
/// the three nearest neighbours and the configured temporal scale and opacity.
pub fn field_from_points(cloud: &PointCloud, init: &InitConfig, model: ColorModel) -> GaussianField {
    let d2 = knn_mean_sq_dist(&cloud.points, 3);
    let mut field = GaussianField::new(model);
    for ((p, c), d2) in cloud.points.iter().zip(&cloud.colors).zip(d2) {
        let s = d2.sqrt().clamp(1e-4, 1.0);
        let mut g = Gaussian4D::zero();
        g.mean = [p.x, p.y, p.z, 0.0];
        g.rot_left = IDENTITY_QUAT;
        g.rot_right = IDENTITY_QUAT;
        g.log_scales = [s.ln(), s.ln(), s.ln(), init.temporal_scale.ln()];
        g.opacity_logit = logit(init.opacity);
        g.sh[0] = rgb_to_dc(*c);
        field.push(&g);
    }
    field
}

/// Initial field for `config.init.strategy`.
pub fn initialize(dataset: &Dataset, data: &TrainingData, config: &TrainConfig) -> Result<GaussianField> {
    let positions = &data.positions;
    let mvs = dataset.mvs.subset(positions);
    let images: Vec<RgbImage> = positions.iter().map(|&n| dataset.image(0, n).clone()).collect();
    let cloud = match config.init.strategy {
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[20]));
            let [lo, hi] = dataset.meta.bounds;
            let mut cloud = PointCloud::default();
            for _ in 0..config.init.random_points {
                let p: [f64; 3] = std::array::from_fn(|k| if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] });
                cloud.points.push(Vector3::from(p));
                cloud.colors.push(std::array::from_fn(|_| rng.random_range(0.0..1.0)));
            }
            cloud
        }
        InitStrategy::FusedDownsampled => {
            let all = build_masks(&data.masks.scores, &mvs, f64::NEG_INFINITY, f64::NEG_INFINITY);
            let masks: Vec<Mask> = (0..positions.len()).map(|n| all.get(0, n).clone()).collect();
            let fusion = FusionConfig { max_points: config.init.downsample_points, ..config.fusion };
            fuse_point_cloud(&mvs, &masks, &images, &data.rig, &fusion)?
        }
        InitStrategy::FusedMasked => {
            let masks: Vec<Mask> = (0..positions.len()).map(|n| data.masks.get(0, n).clone()).collect();
            fuse_point_cloud(&mvs, &masks, &images, &data.rig, &config.fusion)?
        }
    };
    Ok(field_from_points(&cloud, &config.init, config.color))
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub report: LossReport,
    pub num_gaussians: usize,
}

pub const METRICS_HEADER: &str = "iter,psnr,ssim,l_photo,l_rank,l_patch,l_struct,l_total,num_gaussians";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter, self.psnr, self.ssim, r.photometric, r.ranking, r.patch, r.structure, r.total, self.num_gaussians
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub field: GaussianField,
    pub log: Vec<LogRow>,
}

fn check_finite(report: &LossReport, iteration: usize) -> Result<()> {
    for (term, v) in [
        ("photometric", report.photometric),
        ("ranking", report.ranking),
        ("patch", report.patch),
        ("structure", report.structure),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, iteration });
        }
    }
    Ok(())
}

fn write_checkpoint_with_config(dir: &Path, name: &str, field: &GaussianField, config: &TrainConfig) -> Result<()> {
    io::write_checkpoint(&dir.join(format!("{name}.gc4d")), field)?;
    io::write_json(&dir.join(format!("{name}.config.json")), config)
}

/// Runs the optimisation. With `out`, writes `metrics.csv`, `checkpoint.gc4d` and its config
/// snapshot (plus intermediate checkpoints when `checkpoint_every > 0`) into that directory.
pub fn train(
    dataset: &Dataset,
    data: &TrainingData,
    init: GaussianField,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    let mut field = init;
    let mut adam = Adam::new(&field);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[10]));
    let extent = camera_extent(&data.rig);
    let nf = dataset.num_frames();
    let nv = data.positions.len();
    let mut log = Vec::with_capacity(config.iterations);
    let lr = &config.lr;
    for iter in 1..=config.iterations {
        let t = rng.random_range(0..nf);
        let i = rng.random_range(0..nv);
        let n = data.positions[i];
        let cam = dataset.rig.get(t, n);
        let time = frame_time(t, nf);
        let rendered = render_field(&field, cam, time, &config.render)?;
        let targets = Targets {
            image: dataset.image(t, n),
            mvs: Some(dataset.mvs.get(t, n)),
            mask: Some(data.masks.get(t, i)),
            mde: Some(dataset.mde.get(t, n)),
        };
        let out_loss = total_loss(&rendered.output.color, &rendered.output.depth, &rendered.output.alpha, &targets, config, &mut rng)?;
        let report = out_loss.report;
        check_finite(&report, iter)?;
        let grad = render_field_backward(&field, cam, &config.render, &rendered, &out_loss.grad_color, &out_loss.grad_depth)?;
        let progress = (iter - 1) as f64 / config.iterations.max(2).saturating_sub(1) as f64;
        let means_lr = extent * (lr.means.ln() * (1.0 - progress) + lr.means_final.ln() * progress).exp();
        adam.step(&mut field, &grad, |g| match g {
            ParamGroup::Means => means_lr,
            ParamGroup::Rotation => lr.rotation,
            ParamGroup::Scales => lr.scales,
            ParamGroup::Opacity => lr.opacity,
            ParamGroup::Color => lr.color,
        });
        field.renormalize_rotations();
        if config.prune_every > 0 && iter % config.prune_every == 0 && iter < config.iterations {
            let keep: Vec<bool> = field.opacity_logits.iter().map(|l| sigmoid(*l) >= config.prune_threshold).collect();
            if keep.iter().any(|k| !k) {
                field.retain_mask(&keep);
                adam.retain_mask(&keep);
            }
        }
        log.push(LogRow { iter, psnr: psnr_from_mse(out_loss.mse), ssim: out_loss.ssim, report, num_gaussians: field.len() });
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && iter % config.checkpoint_every == 0 {
                write_checkpoint_with_config(dir, &format!("checkpoint_{iter:06}"), &field, config)?;
            }
        }
    }
    if let Some(dir) = out {
        write_checkpoint_with_config(dir, "checkpoint", &field, config)?;
        io::write_csv(&dir.join("metrics.csv"), METRICS_HEADER, log.iter().map(LogRow::to_csv))?;
    }
    Ok(TrainOutput { field, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub view: usize,
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: ImageMetrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim,avge2\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.view, r.metrics.psnr, r.metrics.ssim, r.metrics.avge2));
        }
        s.push_str(&format!("mean,{},{},{}\n", self.mean.psnr, self.mean.ssim, self.mean.avge2));
        s
    }
}

fn mean_metrics(items: &[ImageMetrics]) -> ImageMetrics {
    let n = items.len().max(1) as f64;
    ImageMetrics {
        psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
        avge2: items.iter().map(|m| m.avge2).sum::<f64>() / n,
    }
}

/// Metrics of arbitrary renders per `(t, position)` against the dataset, averaged over frames per
/// view and then over views.
pub fn evaluate_images(
    dataset: &Dataset,
    positions: &[usize],
    mut render: impl FnMut(usize, usize) -> Result<RgbImage>,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for &n in positions {
        let mut per_frame = Vec::new();
        for t in 0..dataset.num_frames() {
            per_frame.push(image_metrics(&render(t, n)?, dataset.image(t, n))?);
        }
        rows.push(EvalRow { view: dataset.rig.get(0, n).view, metrics: mean_metrics(&per_frame) });
    }
    let mean = mean_metrics(&rows.iter().map(|r| r.metrics).collect::<Vec<_>>());
    Ok(EvalReport { rows, mean })
}

/// Renders `field` at every frame of the given views and scores it.
pub fn evaluate(field: &GaussianField, dataset: &Dataset, positions: &[usize], render: &RenderConfig) -> Result<EvalReport> {
    evaluate_images(dataset, positions, |t, n| {
        let cam = dataset.rig.get(t, n);
        Ok(render_field(field, cam, frame_time(t, dataset.num_frames()), render)?.output.color)
    })
}

pub const ABLATION_ROWS: [&str; 7] = ["baseline", "+fusion-init", "+DCC", "-rank", "-patch", "-struct", "full"];

/// The seven configurations of the ablation table, in table order, sharing seed and iterations.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |strategy: InitStrategy, weights: LossWeights| {
        let mut c = base.clone();
        c.init.strategy = strategy;
        c.weights = weights;
        c
    };
    let full = base.weights;
    vec![
        ("baseline", with(InitStrategy::Random, LossWeights::NONE)),
        ("+fusion-init", with(InitStrategy::FusedDownsampled, LossWeights::NONE)),
        ("+DCC", with(InitStrategy::FusedMasked, LossWeights::NONE)),
        ("-rank", with(InitStrategy::FusedMasked, LossWeights { rank: 0.0, ..full })),
        ("-patch", with(InitStrategy::FusedMasked, LossWeights { patch: 0.0, ..full })),
        ("-struct", with(InitStrategy::FusedMasked, LossWeights { structure: 0.0, ..full })),
        ("full", with(InitStrategy::FusedMasked, full)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub iterations: usize,
    pub seed: u64,
    pub initial_gaussians: usize,
    pub final_gaussians: usize,
    pub heldout: ImageMetrics,
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| run | PSNR | SSIM | AVGE-2 | Gaussians |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.3} | {:.4} | {:.4} | {} |\n",
            r.name, r.heldout.psnr, r.heldout.ssim, r.heldout.avge2, r.final_gaussians
        ));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("run,iterations,seed,psnr,ssim,avge2,initial_gaussians,final_gaussians\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.name, r.iterations, r.seed, r.heldout.psnr, r.heldout.ssim, r.heldout.avge2, r.initial_gaussians, r.final_gaussians
        ));
    }
    s
}

/// Trains every ablation configuration and scores it on the held-out views.
pub fn ablate(dataset: &Dataset, base: &TrainConfig, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let data = TrainingData::prepare(dataset, &base.consistency)?;
    let heldout = dataset.heldout_positions();
    if heldout.is_empty() {
        return Err(Error::config("ablation needs at least one held-out view"));
    }
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        let init = initialize(dataset, &data, &cfg)?;
        let initial = init.len();
        let out = train(dataset, &data, init, &cfg, None)?;
        let report = evaluate(&out.field, dataset, &heldout, &cfg.render)?;
        let row = AblationRow {
            name: name.to_string(),
            iterations: cfg.iterations,
            seed: cfg.seed,
            initial_gaussians: initial,
            final_gaussians: out.field.len(),
            heldout: report.mean,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Valid-depth fraction of a map, for reports.
pub fn valid_fraction(d: &DepthMap) -> f64 {
    d.as_slice().iter().filter(|v| is_valid_depth(**v)).count() as f64 / d.len().max(1) as f64
}
