//! Pinhole cameras, rigs, and the world/camera/pixel transforms.
//!
//! Conventions used everywhere in the crate:
//!
//! * camera frame is x right, y down, z forward;
//! * depth is the camera-frame z coordinate ("z-depth"), never ray distance;
//! * pixel centres sit at integer coordinates with the origin at the top-left pixel, so an image
//!   of width `W` covers `[-0.5, W - 0.5]` horizontally.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One calibrated view at one frame: intrinsics, world-to-camera pose and its (view, frame) index.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, `x_cam = R x_world + t`.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub view: usize,
    pub frame: usize,
}

impl CameraView {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
        view: usize,
        frame: usize,
    ) -> Result<Self> {
        let cam = Self { intrinsics, rotation, translation, width, height, view, frame };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        view: usize,
        frame: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        // camera y points down, so "down" is the negated up vector projected off the forward axis
        let right = (-up).cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation, width, height, view, frame)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image dimensions must be positive".into()));
        }
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive: {k:?}")));
        }
        if !(k.cx >= 0.0 && k.cx < self.width as f64 && k.cy >= 0.0 && k.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside the {}x{} image",
                k.cx, k.cy, self.width, self.height
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidCamera(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR - I| = {err:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    #[inline]
    pub fn camera_to_world(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel and z-depth of a world point. Depth may be `<= 0` for points behind the camera;
    /// callers must treat those as invisible.
    #[inline]
    pub fn project(&self, point: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let pc = self.world_to_camera(point);
        (self.project_camera(&pc), pc.z)
    }

    #[inline]
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
    }

    /// World point seen at `pixel` with z-depth `depth`; exact inverse of [`CameraView::project`].
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.camera_to_world(&self.unproject_camera(pixel, depth)))
    }

    #[inline]
    pub fn unproject_camera(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth)
    }

    /// Unit direction of the ray through `pixel`, in world coordinates.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * self.unproject_camera(pixel, 1.0)).normalize()
    }

    /// True when the pixel lies in the region where bilinear sampling is defined.
    #[inline]
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    pub fn to_entry(&self) -> RigEntry {
        let k = &self.intrinsics;
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.rotation[(i, j)];
            }
        }
        RigEntry {
            view: self.view,
            frame: self.frame,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: self.width,
            height: self.height,
            r,
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
    }
}

/// On-disk description of one camera view (see `book/src/datasets.md`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigEntry {
    pub view: usize,
    pub frame: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl RigEntry {
    pub fn to_camera(&self) -> Result<CameraView> {
        CameraView::new(
            Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy },
            Matrix3::from_row_slice(&self.r),
            Vector3::from(self.t),
            self.width,
            self.height,
            self.view,
            self.frame,
        )
    }
}

/// Synchronised static rig: `num_frames × num_views` camera views ordered frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    views: Vec<CameraView>,
    num_frames: usize,
    num_views: usize,
}

impl CameraRig {
    /// Builds a rig from views in any order. Every (frame, view) slot must be filled exactly once
    /// and each view must keep the same intrinsics and image size across frames.
    pub fn new(mut views: Vec<CameraView>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidRig("no views".into()));
        }
        let mut view_ids: Vec<usize> = views.iter().map(|v| v.view).collect();
        view_ids.sort_unstable();
        view_ids.dedup();
        let num_frames = views.iter().map(|v| v.frame).max().unwrap_or(0) + 1;
        let num_views = view_ids.len();
        if views.len() != num_frames * num_views {
            return Err(Error::InvalidRig(format!(
                "expected {num_frames} frames x {num_views} views = {} entries, got {}",
                num_frames * num_views,
                views.len()
            )));
        }
        views.sort_by_key(|v| (v.frame, v.view));
        for (i, v) in views.iter().enumerate() {
            let (t, n) = (i / num_views, i % num_views);
            if v.frame != t || v.view != view_ids[n] {
                return Err(Error::InvalidRig(format!(
                    "duplicate or missing entry near frame {t}, view {}",
                    view_ids[n]
                )));
            }
            let first = &views[n];
            if v.intrinsics != first.intrinsics || v.width != first.width || v.height != first.height {
                return Err(Error::InvalidRig(format!(
                    "view {} changes intrinsics at frame {t}",
                    v.view
                )));
            }
        }
        Ok(Self { views, num_frames, num_views })
    }

    /// Static rig: the same cameras repeated for every frame.
    pub fn from_static(cameras: &[CameraView], num_frames: usize) -> Result<Self> {
        let mut views = Vec::with_capacity(cameras.len() * num_frames);
        for t in 0..num_frames {
            for cam in cameras {
                views.push(CameraView { frame: t, ..cam.clone() });
            }
        }
        Self::new(views)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    /// Camera at frame `t` and view position `n` (position in sorted view-id order).
    pub fn get(&self, t: usize, n: usize) -> &CameraView {
        &self.views[t * self.num_views + n]
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    /// View ids in position order.
    pub fn view_ids(&self) -> Vec<usize> {
        self.views[..self.num_views].iter().map(|v| v.view).collect()
    }

    pub fn position_of(&self, view_id: usize) -> Option<usize> {
        self.views[..self.num_views].iter().position(|v| v.view == view_id)
    }

    /// Sub-rig restricted to the given view ids (kept in ascending id order).
    pub fn subset(&self, view_ids: &[usize]) -> Result<Self> {
        let views =
            self.views.iter().filter(|v| view_ids.contains(&v.view)).cloned().collect::<Vec<_>>();
        Self::new(views)
    }

    pub fn to_entries(&self) -> Vec<RigEntry> {
        self.views.iter().map(CameraView::to_entry).collect()
    }

    pub fn from_entries(entries: &[RigEntry]) -> Result<Self> {
        Self::new(entries.iter().map(RigEntry::to_camera).collect::<Result<Vec<_>>>()?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<RigEntry> = serde_json::from_str(text)?;
        Self::from_entries(&entries)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_entries())?)
    }
}

/// Bilinear interpolation of a scalar grid at a continuous pixel position.
///
/// Returns `None` when any neighbour needed by the interpolation falls outside the grid. Exact
/// integer coordinates only read the neighbours that carry weight, so the last row and column
/// are addressable.
pub fn bilinear_sample(map: &ImageBuf<f64>, pixel: &Vector2<f64>) -> Option<f64> {
    let (x, y) = (pixel.x, pixel.y);
    if !(x >= 0.0 && y >= 0.0) {
        return None;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    if x1 >= map.width() || y1 >= map.height() {
        return None;
    }
    let top = if fx > 0.0 {
        map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx
    } else {
        *map.get(x0, y0)
    };
    if fy == 0.0 {
        return Some(top);
    }
    let bottom = if fx > 0.0 {
        map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx
    } else {
        *map.get(x0, y1)
    };
    Some(top * (1.0 - fy) + bottom * fy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn simple(fx: f64, cx: f64) -> CameraView {
        CameraView::new(
            Intrinsics { fx, fy: fx, cx, cy: cx },
            Matrix3::identity(),
            Vector3::zeros(),
            128,
            128,
            0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = CameraView { width: 1, height: 1, ..simple(1.0, 0.0) };
        let (px, d) = cam.project(&Vector3::new(0.0, 0.0, 2.0));
        assert_eq!((px.x, px.y, d), (0.0, 0.0, 2.0));
    }

    #[test]
    fn off_axis_projection() {
        let cam = simple(100.0, 50.0);
        let (px, d) = cam.project(&Vector3::new(1.0, 0.0, 2.0));
        assert_eq!((px.x, px.y, d), (100.0, 50.0, 2.0));
        let back = cam.backproject(&px, d).unwrap();
        assert!((back - Vector3::new(1.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let rot = *Rotation3::from_euler_angles(0.3, -0.2, 0.9).matrix();
        let cam = CameraView::new(
            Intrinsics { fx: 80.0, fy: 90.0, cx: 31.5, cy: 20.0 },
            rot,
            Vector3::new(0.5, -1.0, 2.0),
            64,
            48,
            0,
            0,
        )
        .unwrap();
        let p = cam.backproject(&Vector2::new(31.5, 20.0), 3.0).unwrap();
        let expected = cam.center() + rot.transpose() * Vector3::new(0.0, 0.0, 3.0);
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_depth() {
        let cam = simple(100.0, 50.0);
        assert!(matches!(
            cam.backproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(cam.backproject(&Vector2::new(1.0, 1.0), -2.0).is_err());
    }

    #[test]
    fn camera_validation() {
        let ok = simple(10.0, 5.0);
        let mut bad = ok.clone();
        bad.intrinsics.fx = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.intrinsics.cx = 128.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.rotation[(0, 0)] = 1.0 + 1e-6;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn look_at_faces_target() {
        let k = Intrinsics { fx: 70.0, fy: 70.0, cx: 31.5, cy: 31.5 };
        let cam = CameraView::look_at(
            Vector3::new(1.0, -0.5, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            k,
            64,
            64,
            0,
            0,
        )
        .unwrap();
        let (px, d) = cam.project(&Vector3::zeros());
        assert!((px - Vector2::new(31.5, 31.5)).norm() < 1e-9);
        assert!((d - Vector3::<f64>::new(1.0, -0.5, -4.0).norm()).abs() < 1e-9);
        // world up (-y) maps to image up (smaller row index)
        let (up, _) = cam.project(&Vector3::new(0.0, -0.1, 0.0));
        assert!(up.y < 31.5);
    }

    #[test]
    fn bilinear_examples() {
        let constant = ImageBuf::filled(4, 4, 5.0);
        assert_eq!(bilinear_sample(&constant, &Vector2::new(1.3, 2.7)), Some(5.0));
        let ramp = ImageBuf::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&ramp, &Vector2::new(0.5, 0.0)), Some(0.5));
        assert_eq!(bilinear_sample(&ramp, &Vector2::new(-0.5, 0.0)), None);
        assert_eq!(bilinear_sample(&ramp, &Vector2::new(1.0, 1.0)), Some(1.0));
        assert_eq!(bilinear_sample(&ramp, &Vector2::new(1.2, 0.0)), None);
    }

    #[test]
    fn rig_ordering_and_validation() {
        let a = simple(10.0, 5.0);
        let b = CameraView { view: 3, ..a.clone() };
        let rig = CameraRig::from_static(&[b.clone(), a.clone()], 2).unwrap();
        assert_eq!(rig.num_frames(), 2);
        assert_eq!(rig.view_ids(), vec![0, 3]);
        assert_eq!(rig.get(1, 1).view, 3);
        assert_eq!(rig.get(1, 1).frame, 1);
        let json = rig.to_json().unwrap();
        assert_eq!(CameraRig::from_json(&json).unwrap(), rig);
        // missing slot
        let mut views = rig.views().to_vec();
        views.pop();
        assert!(CameraRig::new(views).is_err());
        // changing intrinsics across frames
        let mut views = rig.views().to_vec();
        views[2].intrinsics.fx = 11.0;
        assert!(CameraRig::new(views).is_err());
    }

    #[test]
    fn rig_json_rejects_unknown_keys() {
        let text = r#"[{"view":0,"frame":0,"fx":1,"fy":1,"cx":0,"cy":0,"width":1,"height":1,
            "R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"extra":1}]"#;
        assert!(CameraRig::from_json(text).is_err());
        let text = r#"[{"view":0,"frame":0,"fx":1,"fy":1,"cx":0,"cy":0,"width":1,"height":1,
            "R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0]}]"#;
        assert_eq!(CameraRig::from_json(text).unwrap().num_views(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn project_backproject_round_trip(
            angles in prop::array::uniform3(-3.0f64..3.0),
            trans in prop::array::uniform3(-5.0f64..5.0),
            f in 20.0f64..500.0,
            pix in prop::array::uniform2(0.0f64..63.0),
            depth in 0.05f64..50.0,
        ) {
            let rot = *Rotation3::from_euler_angles(angles[0], angles[1], angles[2]).matrix();
            let cam = CameraView::new(
                Intrinsics { fx: f, fy: f * 1.1, cx: 31.5, cy: 30.0 },
                rot, Vector3::from(trans), 64, 64, 0, 0,
            ).unwrap();
            let pixel = Vector2::new(pix[0], pix[1]);
            let world = cam.backproject(&pixel, depth).unwrap();
            let (p2, d2) = cam.project(&world);
            prop_assert!((p2 - pixel).norm() < 1e-9);
            prop_assert!((d2 - depth).abs() < 1e-9 * depth.max(1.0));
            let again = cam.backproject(&p2, d2).unwrap();
            prop_assert!((again - world).norm() < 1e-9 * world.norm().max(1.0));
        }
    }
}
