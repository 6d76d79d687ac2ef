//! Regularisation of rendered depth by relative (monocular) depth: a global pairwise ranking loss
//! and a local loss on mean/std-normalised patches.
//!
//! Neither loss reads the scale of the relative depth. The ranking loss only reads the order of
//! pixel pairs; the patch loss compares patches after removing their mean and standard deviation.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{is_valid_depth, DepthMap, ImageBuf, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    /// Sigmoid sharpness applied to rendered depth differences after dividing by the median
    /// rendered depth.
    pub kappa: f64,
    pub pairs_per_iter: usize,
    /// Tie tolerance as a fraction of the relative-depth range.
    pub tie_fraction: f64,
    pub max_retries: usize,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self { kappa: 50.0, pairs_per_iter: 4096, tie_fraction: 1e-4, max_retries: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub min_size: usize,
    pub max_size: usize,
    pub delta: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { min_size: 8, max_size: 16, delta: 2e-4 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 2 || self.max_size < self.min_size {
            return Err(Error::config(format!("patch sizes must satisfy 2 <= min <= max, got [{}, {}]", self.min_size, self.max_size)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config("patch delta must be positive"));
        }
        Ok(())
    }

    pub fn sample_size(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min_size..=self.max_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelPair {
    pub u: (usize, usize),
    pub v: (usize, usize),
    /// Whether the relative depth at `u` exceeds the one at `v` when sampled.
    pub rank: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelPairBatch {
    pub pairs: Vec<PixelPair>,
}

impl PixelPairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `u_x,u_y,v_x,v_y,rank` rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "u_x,u_y,v_x,v_y,rank")?;
        for p in &self.pairs {
            writeln!(out, "{},{},{},{},{}", p.u.0, p.u.1, p.v.0, p.v.1, p.rank as u8)?;
        }
        Ok(())
    }
}

/// Draws up to `count` pixel pairs uniformly over the image. Pairs whose relative depths differ by
/// less than `tie_fraction` of the depth range, or touch an invalid pixel, are redrawn up to
/// `max_retries` times and then dropped.
pub fn sample_pixel_pairs(rng: &mut impl Rng, count: usize, mde: &DepthMap, config: &RankingConfig) -> PixelPairBatch {
    let n = mde.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &d in mde.as_slice() {
        if d.is_finite() {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    if n < 2 || !(hi > lo) {
        return PixelPairBatch::default();
    }
    let eps = config.tie_fraction * (hi - lo);
    let w = mde.width();
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..=config.max_retries {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let (da, db) = (mde.as_slice()[a], mde.as_slice()[b]);
            if !da.is_finite() || !db.is_finite() || (da - db).abs() < eps {
                continue;
            }
            pairs.push(PixelPair { u: (a % w, a / w), v: (b % w, b / w), rank: da > db });
            break;
        }
    }
    PixelPairBatch { pairs }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    crate::gaussian::sigmoid(x)
}

/// Median of the rendered depth over valid pixels, or `None` when no pixel is valid.
pub fn median_depth(rendered: &DepthMap, valid: Option<&Mask>) -> Option<f64> {
    let mut v: Vec<f64> = rendered
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(i, d)| is_valid_depth(**d) && valid.is_none_or(|m| m.as_slice()[*i]))
        .map(|(_, d)| *d)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// `mean |σ(κ (D(u) − D(v))) − [D_mde(u) > D_mde(v)]|` over the pairs whose two pixels are both
/// valid, and its gradient with respect to the rendered depth.
pub fn ranking_loss(
    rendered: &DepthMap,
    mde: &DepthMap,
    batch: &PixelPairBatch,
    kappa: f64,
    valid: Option<&Mask>,
) -> Result<(f64, DepthMap)> {
    rendered.ensure_same_shape(mde, "ranking loss")?;
    let mut grad = ImageBuf::filled(rendered.width(), rendered.height(), 0.0);
    let ok = |p: (usize, usize)| valid.is_none_or(|m| *m.get(p.0, p.1));
    let used: Vec<&PixelPair> = batch.pairs.iter().filter(|p| ok(p.u) && ok(p.v)).collect();
    if used.is_empty() {
        return Ok((0.0, grad));
    }
    let n = used.len() as f64;
    let mut loss = 0.0;
    for p in used {
        let target = if mde.get(p.u.0, p.u.1) > mde.get(p.v.0, p.v.1) { 1.0 } else { 0.0 };
        let s = sigmoid(kappa * (rendered.get(p.u.0, p.u.1) - rendered.get(p.v.0, p.v.1)));
        let r = s - target;
        loss += r.abs();
        let g = r.signum() * s * (1.0 - s) * kappa / n;
        *grad.get_mut(p.u.0, p.u.1) += g;
        *grad.get_mut(p.v.0, p.v.1) -= g;
    }
    Ok((loss / n, grad))
}

/// `(D − mean) / (std + δ)` with the population standard deviation.
pub fn patch_normalize(values: &[f64], delta: f64) -> Vec<f64> {
    let (m, s) = mean_std(values);
    values.iter().map(|v| (v - m) / (s + delta)).collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean over a non-overlapping `side × side` grid (border patches clipped) of the mean squared
/// difference between normalised rendered and relative depth patches. Pixels that are masked out
/// or lack a relative depth are skipped; patches with fewer than two usable pixels are ignored.
pub fn patch_loss(
    rendered: &DepthMap,
    mde: &DepthMap,
    side: usize,
    delta: f64,
    valid: Option<&Mask>,
) -> Result<(f64, DepthMap)> {
    rendered.ensure_same_shape(mde, "patch loss")?;
    if side < 2 {
        return Err(Error::config("patch side must be at least 2"));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let mut grad = ImageBuf::filled(w, h, 0.0);
    let mut patches: Vec<(Vec<usize>, f64, Vec<f64>)> = Vec::new();
    for y0 in (0..h).step_by(side) {
        for x0 in (0..w).step_by(side) {
            let mut idx = Vec::new();
            for y in y0..(y0 + side).min(h) {
                for x in x0..(x0 + side).min(w) {
                    let i = y * w + x;
                    if mde.as_slice()[i].is_finite() && valid.is_none_or(|m| m.as_slice()[i]) {
                        idx.push(i);
                    }
                }
            }
            if idx.len() < 2 {
                continue;
            }
            let d: Vec<f64> = idx.iter().map(|&i| rendered.as_slice()[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| mde.as_slice()[i]).collect();
            let (m, s) = mean_std(&d);
            let dn = patch_normalize(&d, delta);
            let tn = patch_normalize(&t, delta);
            let k = idx.len() as f64;
            let l = dn.iter().zip(&tn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k;
            let g: Vec<f64> = dn.iter().zip(&tn).map(|(a, b)| 2.0 * (a - b) / k).collect();
            // back through the normalisation, where mean and std depend on every pixel
            let gm = g.iter().sum::<f64>() / k;
            let cross: f64 = g.iter().zip(&d).map(|(gi, di)| gi * (di - m)).sum();
            let sd = s + delta;
            let back: Vec<f64> = (0..idx.len())
                .map(|j| {
                    let tail = if s > 0.0 { cross / (sd * sd) * (d[j] - m) / (k * s) } else { 0.0 };
                    (g[j] - gm) / sd - tail
                })
                .collect();
            patches.push((idx, l, back));
        }
    }
    if patches.is_empty() {
        return Ok((0.0, grad));
    }
    let p = patches.len() as f64;
    let mut loss = 0.0;
    for (idx, l, back) in patches {
        loss += l;
        for (i, b) in idx.into_iter().zip(back) {
            grad.as_mut_slice()[i] += b / p;
        }
    }
    Ok((loss / p, grad))
}
