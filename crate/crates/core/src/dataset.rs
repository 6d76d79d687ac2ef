//! On-disk dataset layout shared by synthetic and captured scenes.
//!
//! ```text
//! scene.json                     metadata and camera rig
//! rgb_t0000_v00.png              colour frame t of view n (8-bit sRGB)
//! depth_gt_t0000_v00.pfm         ground-truth depth (optional)
//! depth_mvs_t0000_v00.pfm        metric depth estimate
//! prob_t0000_v00.pfm             photometric probability of the metric depth
//! depth_mde_t0000_v00.pfm        relative depth estimate
//! ```
//!
//! Invalid depth pixels hold NaN.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::{DepthKind, DepthStream};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, RigEntry};
use crate::image::RgbImage;
use crate::io;
use crate::synth::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    /// Generator settings for synthetic scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SceneSpec>,
    pub num_frames: usize,
    pub training_views: Vec<usize>,
    pub heldout_views: Vec<usize>,
    /// Axis-aligned scene box `[min, max]`, used for random initialisation.
    pub bounds: [[f64; 3]; 2],
    #[serde(default)]
    pub background: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    #[serde(flatten)]
    meta: SceneMeta,
    rig: Vec<RigEntry>,
}

/// All streams of a scene, stored frame-major in rig order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: SceneMeta,
    pub rig: CameraRig,
    pub images: Vec<RgbImage>,
    pub depth_gt: Option<DepthStream>,
    pub mvs: DepthStream,
    pub mde: DepthStream,
}

pub fn slot_name(prefix: &str, frame: usize, view: usize, ext: &str) -> String {
    format!("{prefix}_t{frame:04}_v{view:02}.{ext}")
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.rig.num_frames()
    }

    pub fn image(&self, t: usize, n: usize) -> &RgbImage {
        &self.images[t * self.rig.num_views() + n]
    }

    /// Rig positions of the training views.
    pub fn training_positions(&self) -> Vec<usize> {
        self.meta.training_views.iter().filter_map(|v| self.rig.position_of(*v)).collect()
    }

    pub fn heldout_positions(&self) -> Vec<usize> {
        self.meta.heldout_views.iter().filter_map(|v| self.rig.position_of(*v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.rig.views().len() {
            return Err(Error::ShapeMismatch(format!("{} images for {} rig slots", self.images.len(), self.rig.views().len())));
        }
        for (img, cam) in self.images.iter().zip(self.rig.views()) {
            if img.width() != cam.width || img.height() != cam.height {
                return Err(Error::ShapeMismatch(format!("image for frame {} view {} has the wrong size", cam.frame, cam.view)));
            }
        }
        self.mvs.validate(&self.rig)?;
        self.mde.validate(&self.rig)?;
        if let Some(gt) = &self.depth_gt {
            gt.validate(&self.rig)?;
        }
        if self.meta.num_frames != self.rig.num_frames() {
            return Err(Error::config("scene.json num_frames disagrees with the rig"));
        }
        let training = self.training_positions();
        if training.len() != self.meta.training_views.len() || training.len() < 2 {
            return Err(Error::config("need at least two training views present in the rig"));
        }
        if self.heldout_positions().len() != self.meta.heldout_views.len() {
            return Err(Error::config("held-out views missing from the rig"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::File { path: dir.to_path_buf(), source })?;
        let file = SceneFile { meta: self.meta.clone(), rig: self.rig.to_entries() };
        io::write_json(&dir.join("scene.json"), &file)?;
        for (i, cam) in self.rig.views().iter().enumerate() {
            let (t, v) = (cam.frame, cam.view);
            io::write_rgb_png(&dir.join(slot_name("rgb", t, v, "png")), &self.images[i])?;
            if let Some(gt) = &self.depth_gt {
                io::write_pfm(&dir.join(slot_name("depth_gt", t, v, "pfm")), &gt.depth[i])?;
            }
            io::write_pfm(&dir.join(slot_name("depth_mvs", t, v, "pfm")), &self.mvs.depth[i])?;
            if let Some(p) = &self.mvs.prob {
                io::write_pfm(&dir.join(slot_name("prob", t, v, "pfm")), &p[i])?;
            }
            io::write_pfm(&dir.join(slot_name("depth_mde", t, v, "pfm")), &self.mde.depth[i])?;
        }
        Ok(())
    }

    /// Loads a dataset directory. Ground-truth depth and probability maps are optional; a
    /// missing probability map counts as probability 1.
    pub fn load(dir: &Path) -> Result<Self> {
        let file: SceneFile = io::read_json(&dir.join("scene.json"))?;
        let rig = CameraRig::from_entries(&file.rig)?;
        let mut images = Vec::new();
        let mut gt = Vec::new();
        let mut mvs = Vec::new();
        let mut prob = Vec::new();
        let mut mde = Vec::new();
        for cam in rig.views() {
            let (t, v) = (cam.frame, cam.view);
            images.push(io::read_rgb_png(&dir.join(slot_name("rgb", t, v, "png")))?);
            let gt_path = dir.join(slot_name("depth_gt", t, v, "pfm"));
            if gt_path.exists() {
                gt.push(io::read_pfm(&gt_path)?);
            }
            mvs.push(io::read_pfm(&dir.join(slot_name("depth_mvs", t, v, "pfm")))?);
            let prob_path = dir.join(slot_name("prob", t, v, "pfm"));
            if prob_path.exists() {
                prob.push(io::read_pfm(&prob_path)?);
            }
            mde.push(io::read_pfm(&dir.join(slot_name("depth_mde", t, v, "pfm")))?);
        }
        let n = rig.views().len();
        let depth_gt = if gt.len() == n { Some(DepthStream::new(DepthKind::GroundTruth, &rig, gt, None)?) } else { None };
        let prob = (prob.len() == n).then_some(prob);
        let ds = Self {
            meta: file.meta,
            mvs: DepthStream::new(DepthKind::MvsMetric, &rig, mvs, prob)?,
            mde: DepthStream::new(DepthKind::MdeRelative, &rig, mde, None)?,
            depth_gt,
            images,
            rig,
        };
        ds.validate()?;
        Ok(ds)
    }
}
