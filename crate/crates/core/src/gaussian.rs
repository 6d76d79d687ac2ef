//! The 4D Gaussian primitive, its covariance factorisation and temporal slicing.
//!
//! A primitive carries a spacetime mean `(x, y, z, t)`, a rotation in SO(4) stored as a pair of
//! unit quaternions (left and right isoclinic factors), four log-scales, an opacity logit and
//! colour coefficients. The covariance is `Σ = R S Sᵀ Rᵀ`, partitioned as
//!
//! ```text
//!     ┌ A   m ┐      A: 3×3 spatial block
//! Σ = │       │      m: spatial/temporal coupling
//!     └ mᵀ  z ┘      z: temporal variance
//! ```
//!
//! Slicing at time `t` conditions the Gaussian on `t`:
//! `μ₃(t) = μ_xyz + m (t − μ_t)/z`, `Σ₃ = A − m mᵀ / z`, and the decay weight is the
//! unnormalised temporal marginal `F(t) = exp(−½ (t − μ_t)² / z)`.
//!
//! Every forward function here has a matching `*_backward` that maps output gradients to
//! parameter gradients; the finite-difference tests at the bottom of the file pin them down.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const MAX_SH_COEFFS: usize = 4;

/// Temporal variance below which slicing is refused.
pub const MIN_TEMPORAL_VARIANCE: f64 = 1e-12;

pub type ShCoeffs = [[f64; 3]; MAX_SH_COEFFS];

/// Appearance model shared by every primitive of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorModel {
    /// Spherical-harmonic degree, 0 or 1.
    pub degree: u32,
    /// Adds a per-coefficient slope in `(t − μ_t)`.
    pub time_modulation: bool,
}

impl Default for ColorModel {
    fn default() -> Self {
        Self { degree: 0, time_modulation: false }
    }
}

impl ColorModel {
    pub fn num_coeffs(&self) -> usize {
        ((self.degree + 1) * (self.degree + 1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > 1 {
            return Err(Error::config(format!("sh degree {} unsupported (max 1)", self.degree)));
        }
        Ok(())
    }
}

/// One anisotropic spacetime primitive, in raw (pre-activation) parameters.
///
/// The same layout doubles as the gradient of a loss with respect to those parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian4D {
    pub mean: [f64; 4],
    pub rot_left: [f64; 4],
    pub rot_right: [f64; 4],
    pub log_scales: [f64; 4],
    pub opacity_logit: f64,
    pub sh: ShCoeffs,
    pub sh_slope: ShCoeffs,
}

pub type GaussianGrad = Gaussian4D;

/// Number of scalars in [`Gaussian4D::to_params`].
pub const NUM_PARAMS: usize = 4 * 4 + 1 + 2 * 3 * MAX_SH_COEFFS;

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian4D {
    pub fn zero() -> Self {
        Self {
            mean: [0.0; 4],
            rot_left: [0.0; 4],
            rot_right: [0.0; 4],
            log_scales: [0.0; 4],
            opacity_logit: 0.0,
            sh: [[0.0; 3]; MAX_SH_COEFFS],
            sh_slope: [[0.0; 3]; MAX_SH_COEFFS],
        }
    }

    /// Axis-aligned primitive with the given spatial and temporal scales and base colour.
    pub fn axis_aligned(mean: [f64; 4], scales: [f64; 4], opacity: f64, rgb: [f64; 3]) -> Self {
        let mut g = Self::zero();
        g.mean = mean;
        g.rot_left = IDENTITY_QUAT;
        g.rot_right = IDENTITY_QUAT;
        g.log_scales = scales.map(f64::ln);
        g.opacity_logit = logit(opacity.clamp(1e-6, 1.0 - 1e-6));
        g.sh[0] = rgb_to_dc(rgb);
        g
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> [f64; 4] {
        self.log_scales.map(f64::exp)
    }

    pub fn renormalize(&mut self) {
        self.rot_left = normalize_quat(self.rot_left);
        self.rot_right = normalize_quat(self.rot_right);
    }

    pub fn to_params(&self) -> [f64; NUM_PARAMS] {
        let mut out = [0.0; NUM_PARAMS];
        let mut i = 0;
        for v in self.mean.iter().chain(&self.rot_left).chain(&self.rot_right).chain(&self.log_scales) {
            out[i] = *v;
            i += 1;
        }
        out[i] = self.opacity_logit;
        i += 1;
        for row in self.sh.iter().chain(&self.sh_slope) {
            for v in row {
                out[i] = *v;
                i += 1;
            }
        }
        out
    }

    pub fn from_params(p: &[f64; NUM_PARAMS]) -> Self {
        let mut g = Self::zero();
        let four = |o: usize| [p[o], p[o + 1], p[o + 2], p[o + 3]];
        g.mean = four(0);
        g.rot_left = four(4);
        g.rot_right = four(8);
        g.log_scales = four(12);
        g.opacity_logit = p[16];
        for k in 0..MAX_SH_COEFFS {
            for c in 0..3 {
                g.sh[k][c] = p[17 + 3 * k + c];
                g.sh_slope[k][c] = p[17 + 3 * MAX_SH_COEFFS + 3 * k + c];
            }
        }
        g
    }

    pub fn add_assign(&mut self, other: &Self) {
        let mut p = self.to_params();
        for (a, b) in p.iter_mut().zip(other.to_params()) {
            *a += b;
        }
        *self = Self::from_params(&p);
    }
}

/// DC coefficient that reproduces `rgb` under the `+0.5` offset convention.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = Vector4::from(q).norm();
    if n > 0.0 {
        q.map(|v| v / n)
    } else {
        IDENTITY_QUAT
    }
}

/// Left-multiplication matrix of the quaternion `(a, b, c, d)`.
pub fn left_isoclinic(q: [f64; 4]) -> Matrix4<f64> {
    let [a, b, c, d] = q;
    Matrix4::new(a, -b, -c, -d, b, a, -d, c, c, d, a, -b, d, -c, b, a)
}

/// Right-multiplication matrix of the quaternion `(p, q, r, s)`.
pub fn right_isoclinic(q: [f64; 4]) -> Matrix4<f64> {
    let [p, q, r, s] = q;
    Matrix4::new(p, -q, -r, -s, q, p, s, -r, r, -s, p, q, s, r, -q, p)
}

/// SO(4) rotation of a primitive, from its normalised quaternion pair.
pub fn rotation4(g: &Gaussian4D) -> Matrix4<f64> {
    left_isoclinic(normalize_quat(g.rot_left)) * right_isoclinic(normalize_quat(g.rot_right))
}

/// 4D covariance and its block partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance4 {
    pub sigma: Matrix4<f64>,
    pub a: Matrix3<f64>,
    pub m: Vector3<f64>,
    pub z: f64,
}

impl Covariance4 {
    fn from_sigma(sigma: Matrix4<f64>) -> Self {
        Self {
            sigma,
            a: sigma.fixed_view::<3, 3>(0, 0).into_owned(),
            m: sigma.fixed_view::<3, 1>(0, 3).into_owned(),
            z: sigma[(3, 3)],
        }
    }
}

pub fn build_covariance(g: &Gaussian4D) -> Covariance4 {
    let r = rotation4(g);
    let s2 = Vector4::from(g.log_scales.map(|l| (2.0 * l).exp()));
    let sigma = r * Matrix4::from_diagonal(&s2) * r.transpose();
    Covariance4::from_sigma(sigma)
}

/// A 4D primitive conditioned on a time instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3DSlice {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// `F(t)`, in `[0, 1]`.
    pub decay: f64,
    /// Activated opacity σ.
    pub opacity: f64,
    /// Colour coefficients evaluated at the slice time.
    pub sh: ShCoeffs,
}

pub fn slice_at_time(g: &Gaussian4D, t: f64, model: ColorModel) -> Result<Gaussian3DSlice> {
    let cov = build_covariance(g);
    slice_from_covariance(g, &cov, t, model)
}

fn slice_from_covariance(
    g: &Gaussian4D,
    cov: &Covariance4,
    t: f64,
    model: ColorModel,
) -> Result<Gaussian3DSlice> {
    if !(cov.z >= MIN_TEMPORAL_VARIANCE) {
        return Err(Error::DegenerateTemporalExtent(cov.z));
    }
    let dt = t - g.mean[3];
    let mean = Vector3::new(g.mean[0], g.mean[1], g.mean[2]) + cov.m * (dt / cov.z);
    let cov3 = cov.a - cov.m * cov.m.transpose() / cov.z;
    let decay = (-0.5 * dt * dt / cov.z).exp();
    Ok(Gaussian3DSlice { mean, cov: cov3, decay, opacity: g.opacity(), sh: coeffs_at(g, dt, model) })
}

fn coeffs_at(g: &Gaussian4D, dt: f64, model: ColorModel) -> ShCoeffs {
    let mut sh = [[0.0; 3]; MAX_SH_COEFFS];
    for (k, row) in sh.iter_mut().enumerate().take(model.num_coeffs()) {
        for c in 0..3 {
            row[c] = g.sh[k][c] + if model.time_modulation { g.sh_slope[k][c] * dt } else { 0.0 };
        }
    }
    sh
}

#[inline]
fn sh_basis(dir: &Vector3<f64>) -> [f64; MAX_SH_COEFFS] {
    [SH_C0, -SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]
}

/// Colour of a coefficient set seen along `dir`, with the `+0.5` offset and a floor at zero.
pub fn eval_sh(sh: &ShCoeffs, degree: u32, dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(dir);
    let n = ((degree + 1) * (degree + 1)) as usize;
    let mut out = [0.5; 3];
    for (k, b) in basis.iter().enumerate().take(n) {
        for c in 0..3 {
            out[c] += b * sh[k][c];
        }
    }
    out.map(|v| v.max(0.0))
}

pub fn eval_color(g: &Gaussian4D, view_direction: &Vector3<f64>, t: f64, model: ColorModel) -> [f64; 3] {
    eval_sh(&coeffs_at(g, t - g.mean[3], model), model.degree, view_direction)
}

/// Gradients of `eval_sh` with respect to its coefficients and the (unit) direction.
pub fn eval_sh_backward(
    sh: &ShCoeffs,
    degree: u32,
    dir: &Vector3<f64>,
    grad_color: &[f64; 3],
) -> (ShCoeffs, Vector3<f64>) {
    let basis = sh_basis(dir);
    let n = ((degree + 1) * (degree + 1)) as usize;
    let mut raw = [0.5; 3];
    for (k, b) in basis.iter().enumerate().take(n) {
        for c in 0..3 {
            raw[c] += b * sh[k][c];
        }
    }
    let g: [f64; 3] = std::array::from_fn(|c| if raw[c] < 0.0 { 0.0 } else { grad_color[c] });
    let mut d_sh = [[0.0; 3]; MAX_SH_COEFFS];
    for (k, b) in basis.iter().enumerate().take(n) {
        for c in 0..3 {
            d_sh[k][c] = g[c] * b;
        }
    }
    let mut d_dir = Vector3::zeros();
    if degree >= 1 {
        for c in 0..3 {
            d_dir.y -= SH_C1 * sh[1][c] * g[c];
            d_dir.z += SH_C1 * sh[2][c] * g[c];
            d_dir.x -= SH_C1 * sh[3][c] * g[c];
        }
    }
    (d_sh, d_dir)
}

/// Upstream gradient with respect to every field of a [`Gaussian3DSlice`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGrad {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub decay: f64,
    pub opacity: f64,
    pub sh: ShCoeffs,
}

impl SliceGrad {
    pub fn zero() -> Self {
        Self {
            mean: Vector3::zeros(),
            cov: Matrix3::zeros(),
            decay: 0.0,
            opacity: 0.0,
            sh: [[0.0; 3]; MAX_SH_COEFFS],
        }
    }
}

/// Chain rule through slicing, the covariance factorisation and the quaternion normalisation.
pub fn slice_backward(g: &Gaussian4D, t: f64, model: ColorModel, grad: &SliceGrad) -> GaussianGrad {
    let mut out = Gaussian4D::zero();
    let ql = Vector4::from(g.rot_left);
    let qr = Vector4::from(g.rot_right);
    let (ql_hat, qr_hat) = (ql / ql.norm(), qr / qr.norm());
    let left = left_isoclinic(ql_hat.into());
    let right = right_isoclinic(qr_hat.into());
    let r = left * right;
    let s2 = Vector4::from(g.log_scales.map(|l| (2.0 * l).exp()));
    let cov = Covariance4::from_sigma(r * Matrix4::from_diagonal(&s2) * r.transpose());
    let (m, z) = (cov.m, cov.z);
    let dt = t - g.mean[3];
    let decay = (-0.5 * dt * dt / z).exp();

    // colour coefficients at time t
    let mut d_dt = 0.0;
    for k in 0..model.num_coeffs() {
        for c in 0..3 {
            out.sh[k][c] = grad.sh[k][c];
            if model.time_modulation {
                out.sh_slope[k][c] = grad.sh[k][c] * dt;
                d_dt += grad.sh[k][c] * g.sh_slope[k][c];
            }
        }
    }

    let sig = g.opacity();
    out.opacity_logit = grad.opacity * sig * (1.0 - sig);

    let g_mu = grad.mean;
    let g3 = grad.cov;
    let mu_dot_m = g_mu.dot(&m);
    let d_m = g_mu * (dt / z) - (g3 + g3.transpose()) * m / z;
    let d_z = -mu_dot_m * dt / (z * z)
        + (m.transpose() * g3 * m)[0] / (z * z)
        + grad.decay * decay * 0.5 * dt * dt / (z * z);
    d_dt += mu_dot_m / z - grad.decay * decay * dt / z;

    out.mean = [g_mu.x, g_mu.y, g_mu.z, -d_dt];

    let mut g4 = Matrix4::zeros();
    g4.fixed_view_mut::<3, 3>(0, 0).copy_from(&g3);
    g4.fixed_view_mut::<3, 1>(0, 3).copy_from(&d_m);
    g4[(3, 3)] = d_z;

    let d = Matrix4::from_diagonal(&s2);
    let d_r = (g4 + g4.transpose()) * r * d;
    let rtgr = r.transpose() * g4 * r;
    for k in 0..4 {
        out.log_scales[k] = rtgr[(k, k)] * 2.0 * s2[k];
    }

    let d_left = d_r * right.transpose();
    let d_right = left.transpose() * d_r;
    out.rot_left = normalize_backward(&ql, &quat_grad(&d_left, left_isoclinic));
    out.rot_right = normalize_backward(&qr, &quat_grad(&d_right, right_isoclinic));
    out
}

/// Gradient with respect to the quaternion of a matrix that is linear in it.
fn quat_grad(d_mat: &Matrix4<f64>, build: fn([f64; 4]) -> Matrix4<f64>) -> Vector4<f64> {
    Vector4::from_fn(|k, _| {
        let mut e = [0.0; 4];
        e[k] = 1.0;
        d_mat.component_mul(&build(e)).sum()
    })
}

fn normalize_backward(q: &Vector4<f64>, d_hat: &Vector4<f64>) -> [f64; 4] {
    let n = q.norm();
    let q_hat = q / n;
    ((d_hat - q_hat * q_hat.dot(d_hat)) / n).into()
}
