//! Structure-of-arrays storage for a set of 4D Gaussians.

use serde::{Deserialize, Serialize};

use crate::gaussian::{ColorModel, Gaussian4D, ShCoeffs};

/// Optimiser parameter groups, each with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Means,
    Rotation,
    Scales,
    Opacity,
    Color,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Means, ParamGroup::Rotation, ParamGroup::Scales, ParamGroup::Opacity, ParamGroup::Color];
}

/// A fixed-budget set of primitives. The same type holds parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub model: ColorModel,
    pub means: Vec<[f64; 4]>,
    pub rot_left: Vec<[f64; 4]>,
    pub rot_right: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
    pub sh_slope: Vec<ShCoeffs>,
}

impl GaussianField {
    pub fn new(model: ColorModel) -> Self {
        Self {
            model,
            means: Vec::new(),
            rot_left: Vec::new(),
            rot_right: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_slope: Vec::new(),
        }
    }

    pub fn from_gaussians(model: ColorModel, gaussians: impl IntoIterator<Item = Gaussian4D>) -> Self {
        let mut f = Self::new(model);
        for g in gaussians {
            f.push(&g);
        }
        f
    }

    /// All-zero field with the same length, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let n = self.len();
        Self {
            model: self.model,
            means: vec![[0.0; 4]; n],
            rot_left: vec![[0.0; 4]; n],
            rot_right: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![[[0.0; 3]; 4]; n],
            sh_slope: vec![[[0.0; 3]; 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: &Gaussian4D) {
        self.means.push(g.mean);
        self.rot_left.push(g.rot_left);
        self.rot_right.push(g.rot_right);
        self.log_scales.push(g.log_scales);
        self.opacity_logits.push(g.opacity_logit);
        self.sh.push(g.sh);
        self.sh_slope.push(g.sh_slope);
    }

    pub fn get(&self, i: usize) -> Gaussian4D {
        Gaussian4D {
            mean: self.means[i],
            rot_left: self.rot_left[i],
            rot_right: self.rot_right[i],
            log_scales: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh[i],
            sh_slope: self.sh_slope[i],
        }
    }

    pub fn set(&mut self, i: usize, g: &Gaussian4D) {
        self.means[i] = g.mean;
        self.rot_left[i] = g.rot_left;
        self.rot_right[i] = g.rot_right;
        self.log_scales[i] = g.log_scales;
        self.opacity_logits[i] = g.opacity_logit;
        self.sh[i] = g.sh;
        self.sh_slope[i] = g.sh_slope;
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian4D> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Keeps the primitives whose flag is `true`.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn apply<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        }
        assert_eq!(keep.len(), self.len());
        apply(&mut self.means, keep);
        apply(&mut self.rot_left, keep);
        apply(&mut self.rot_right, keep);
        apply(&mut self.log_scales, keep);
        apply(&mut self.opacity_logits, keep);
        apply(&mut self.sh, keep);
        apply(&mut self.sh_slope, keep);
    }

    pub fn renormalize_rotations(&mut self) {
        for q in self.rot_left.iter_mut().chain(self.rot_right.iter_mut()) {
            *q = crate::gaussian::normalize_quat(*q);
        }
    }

    /// Mutable flat views of one parameter group.
    pub fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::Means => vec![self.means.as_flattened_mut()],
            ParamGroup::Rotation => vec![self.rot_left.as_flattened_mut(), self.rot_right.as_flattened_mut()],
            ParamGroup::Scales => vec![self.log_scales.as_flattened_mut()],
            ParamGroup::Opacity => vec![self.opacity_logits.as_mut_slice()],
            ParamGroup::Color => vec![
                self.sh.as_flattened_mut().as_flattened_mut(),
                self.sh_slope.as_flattened_mut().as_flattened_mut(),
            ],
        }
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::Means => vec![self.means.as_flattened()],
            ParamGroup::Rotation => vec![self.rot_left.as_flattened(), self.rot_right.as_flattened()],
            ParamGroup::Scales => vec![self.log_scales.as_flattened()],
            ParamGroup::Opacity => vec![self.opacity_logits.as_slice()],
            ParamGroup::Color => {
                vec![self.sh.as_flattened().as_flattened(), self.sh_slope.as_flattened().as_flattened()]
            }
        }
    }

    /// Every parameter in group order, for gradient checks and norms.
    pub fn flat_params(&self) -> Vec<f64> {
        ParamGroup::ALL.iter().flat_map(|g| self.group(*g).into_iter().flatten().copied().collect::<Vec<_>>()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for g in ParamGroup::ALL {
            for slice in self.group_mut(g) {
                for v in slice.iter_mut() {
                    *v = *it.next().expect("flat parameter vector too short");
                }
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn add_scaled(&mut self, other: &GaussianField, scale: f64) {
        for g in ParamGroup::ALL {
            let src = other.group(g);
            for (dst, src) in self.group_mut(g).into_iter().zip(src) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }

    pub fn accumulate(&mut self, i: usize, g: &Gaussian4D) {
        let mut cur = self.get(i);
        cur.add_assign(g);
        self.set(i, &cur);
    }

    pub fn norm(&self) -> f64 {
        self.flat_params().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip_and_retain() {
        let model = ColorModel::default();
        let mut f = GaussianField::from_gaussians(
            model,
            (0..3).map(|i| Gaussian4D::axis_aligned([i as f64; 4], [0.5; 4], 0.3, [0.1, 0.2, 0.3])),
        );
        let flat = f.flat_params();
        assert_eq!(flat.len(), 3 * crate::gaussian::NUM_PARAMS);
        let mut g = f.zeros_like();
        g.set_flat_params(&flat);
        assert_eq!(g, f);
        f.retain_mask(&[true, false, true]);
        assert_eq!(f.len(), 2);
        assert_eq!(f.means[1], [2.0; 4]);
    }
}
