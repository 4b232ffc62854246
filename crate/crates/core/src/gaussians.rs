//! The spherical 3D Gaussian pyramid: parameter decoding, unprojection and
//! consolidation.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::cost_volume::{softmax_inverse_depth, softmax_inverse_depth_backward};
use crate::error::{Error, Result};
use crate::geometry::{fibonacci_lattice, pyramid_counts, unit_square_to_sphere, CameraPose, FibonacciLattice};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Number of SH coefficients per color channel for degree `d_sh`.
pub fn sh_coeffs(d_sh: usize) -> usize {
    (d_sh + 1) * (d_sh + 1)
}

/// One anisotropic 3D Gaussian in world space.
///
/// SH coefficients are coefficient-major with rgb innermost:
/// `sh[k * 3 + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    pub opacity: f64,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub sh: Vec<f64>,
}

impl Gaussian {
    /// World-space covariance R diag(s^2) R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix();
        let d = Matrix3::from_diagonal(&self.scale.map(|s| s * s));
        r * d * r.transpose()
    }
}

/// Decoding configuration shared by a pyramid's levels.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// panorama width at the finest level
    pub width: usize,
    pub levels: usize,
    pub d_sh: usize,
    /// normalized scale range, multiples of the pixel world size
    pub s_min: f64,
    pub s_max: f64,
    /// inverse-depth candidates per level (fine first), shared with the
    /// cost-volume softmax rule
    pub inv_candidates: Vec<Vec<f64>>,
}

impl DecodeConfig {
    pub fn new(width: usize, levels: usize, d_sh: usize, inv_candidates: Vec<Vec<f64>>) -> Self {
        Self { width, levels, d_sh, s_min: 0.5, s_max: 15.0, inv_candidates }
    }

    /// Length of one raw head-output record at `level`.
    pub fn raw_len(&self, level: usize) -> usize {
        self.inv_candidates[level].len() + 1 + 3 + 4 + 3 * sh_coeffs(self.d_sh)
    }
}

/// View of one raw parameter vector: depth logits, opacity, scale,
/// quaternion, SH coefficients, in that order.
#[derive(Debug, Clone, Copy)]
pub struct RawHeadOutput<'a> {
    pub values: &'a [f64],
    pub candidates: usize,
}

impl<'a> RawHeadOutput<'a> {
    pub fn logits(&self) -> &[f64] {
        &self.values[..self.candidates]
    }

    pub fn opacity(&self) -> f64 {
        self.values[self.candidates]
    }

    pub fn scale(&self) -> &[f64] {
        &self.values[self.candidates + 1..self.candidates + 4]
    }

    pub fn quaternion(&self) -> &[f64] {
        &self.values[self.candidates + 4..self.candidates + 8]
    }

    pub fn sh(&self) -> &[f64] {
        &self.values[self.candidates + 8..]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// World-space footprint of one pixel at `level` seen at `depth`: the
/// equatorial angular pixel size (2 pi / W_l) times the range.
pub fn pixel_world_size(width: usize, level: usize, depth: f64) -> f64 {
    debug_assert!(depth > 0.0);
    let w_l = (width >> level) as f64;
    (2.0 * std::f64::consts::PI / w_l) * depth
}

/// Decodes one raw head output into a world-space Gaussian.
///
/// Opacity is sigmoid-activated; depth is the softmax-weighted inverse-depth
/// aggregation shared with the cost volume; scale is a sigmoid into
/// [s_min, s_max] times the pixel world size at the decoded depth; the
/// quaternion is normalized; SH coefficients pass through.
pub fn decode_gaussian(
    raw: &RawHeadOutput,
    lattice_pt: [f64; 2],
    level: usize,
    pose: &CameraPose,
    cfg: &DecodeConfig,
) -> Result<Gaussian> {
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw head output"));
    }
    let inv_candidates = &cfg.inv_candidates[level];
    debug_assert_eq!(raw.candidates, inv_candidates.len());
    let inv = softmax_inverse_depth(raw.logits(), inv_candidates);
    let depth = 1.0 / inv;
    let dir = unit_square_to_sphere(lattice_pt[0], lattice_pt[1]);
    let world_dir = pose.rotation * dir.vector();
    let center = pose.position + depth * world_dir;
    let pws = pixel_world_size(cfg.width, level, depth);
    let s = raw.scale();
    let scale = Vector3::new(
        (cfg.s_min + sigmoid(s[0]) * (cfg.s_max - cfg.s_min)) * pws,
        (cfg.s_min + sigmoid(s[1]) * (cfg.s_max - cfg.s_min)) * pws,
        (cfg.s_min + sigmoid(s[2]) * (cfg.s_max - cfg.s_min)) * pws,
    );
    let q = raw.quaternion();
    let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    Ok(Gaussian {
        center,
        opacity: sigmoid(raw.opacity()),
        scale,
        rotation,
        sh: raw.sh().to_vec(),
    })
}

/// Adjoints of one decoded Gaussian's parameters.
#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub center: Vector3<f64>,
    pub opacity: f64,
    pub scale: Vector3<f64>,
    /// gradient w.r.t. the *unit* quaternion (w, x, y, z)
    pub rotation: [f64; 4],
    pub sh: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros(d_sh: usize) -> Self {
        Self {
            center: Vector3::zeros(),
            opacity: 0.0,
            scale: Vector3::zeros(),
            rotation: [0.0; 4],
            sh: vec![0.0; 3 * sh_coeffs(d_sh)],
        }
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        self.center += other.center;
        self.opacity += other.opacity;
        self.scale += other.scale;
        for i in 0..4 {
            self.rotation[i] += other.rotation[i];
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = self.opacity.abs();
        for v in self.center.iter().chain(self.scale.iter()) {
            m = m.max(v.abs());
        }
        for v in self.rotation.iter().chain(self.sh.iter()) {
            m = m.max(v.abs());
        }
        m
    }
}

/// Pulls Gaussian-parameter adjoints back to the raw head output.
pub fn decode_gaussian_backward(
    raw: &RawHeadOutput,
    lattice_pt: [f64; 2],
    level: usize,
    pose: &CameraPose,
    cfg: &DecodeConfig,
    grad: &GaussianGrads,
) -> Vec<f64> {
    let inv_candidates = &cfg.inv_candidates[level];
    let inv = softmax_inverse_depth(raw.logits(), inv_candidates);
    let depth = 1.0 / inv;
    let dir = unit_square_to_sphere(lattice_pt[0], lattice_pt[1]);
    let world_dir = pose.rotation * dir.vector();
    let pws = pixel_world_size(cfg.width, level, depth);

    let mut out = vec![0.0; raw.values.len()];
    // depth receives gradient from the center ray and from the
    // depth-proportional scale decoding
    let mut d_depth = grad.center.dot(&world_dir);
    let srange = cfg.s_max - cfg.s_min;
    for c in 0..3 {
        let sig = sigmoid(raw.scale()[c]);
        let s_norm = cfg.s_min + sig * srange;
        d_depth += grad.scale[c] * s_norm * pws / depth;
        out[raw.candidates + 1 + c] = grad.scale[c] * pws * srange * sig * (1.0 - sig);
    }
    // depth = 1 / inv: d depth / d logit = -depth^2 * d inv / d logit
    let d_inv = -depth * depth * d_depth;
    softmax_inverse_depth_backward(
        raw.logits(),
        inv_candidates,
        d_inv,
        &mut out[..raw.candidates],
    );
    let alpha = sigmoid(raw.opacity());
    out[raw.candidates] = grad.opacity * alpha * (1.0 - alpha);
    // unit quaternion: dL/draw = (I - q q^T) / |raw| . dL/dq
    let qraw = raw.quaternion();
    let norm = (qraw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q: Vec<f64> = qraw.iter().map(|v| v / norm).collect();
    let qdot: f64 = (0..4).map(|i| q[i] * grad.rotation[i]).sum();
    for i in 0..4 {
        out[raw.candidates + 4 + i] = (grad.rotation[i] - q[i] * qdot) / norm;
    }
    out[raw.candidates + 8..].copy_from_slice(&grad.sh);
    out
}

/// Evaluates the real SH color for a view direction (unit vector from camera
/// to the Gaussian center). Degree 0 is the DC coefficient with the
/// conventional +0.5 offset; degree 1 follows the reference splatting basis.
pub fn sh_eval(sh: &[f64], d_sh: usize, view_dir: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let mut v = SH_C0 * sh[c] + 0.5;
        if d_sh >= 1 {
            v += -SH_C1 * view_dir.y * sh[3 + c] + SH_C1 * view_dir.z * sh[6 + c]
                - SH_C1 * view_dir.x * sh[9 + c];
        }
        *out = v;
    }
    rgb
}

/// Gradients of [`sh_eval`]: fills `grad_sh` and returns the gradient w.r.t.
/// the view direction.
pub fn sh_eval_backward(
    sh: &[f64],
    d_sh: usize,
    view_dir: &Vector3<f64>,
    grad_rgb: &[f64; 3],
    grad_sh: &mut [f64],
) -> Vector3<f64> {
    let mut d_dir = Vector3::zeros();
    for c in 0..3 {
        let g = grad_rgb[c];
        grad_sh[c] += SH_C0 * g;
        if d_sh >= 1 {
            grad_sh[3 + c] += -SH_C1 * view_dir.y * g;
            grad_sh[6 + c] += SH_C1 * view_dir.z * g;
            grad_sh[9 + c] += -SH_C1 * view_dir.x * g;
            d_dir.x += -SH_C1 * sh[9 + c] * g;
            d_dir.y += -SH_C1 * sh[3 + c] * g;
            d_dir.z += SH_C1 * sh[6 + c] * g;
        }
    }
    d_dir
}

/// One view's L-level Gaussian pyramid, finest level first.
#[derive(Debug, Clone)]
pub struct GaussianPyramid {
    pub levels: Vec<Vec<Gaussian>>,
    pub lattices: Vec<FibonacciLattice>,
    pub view: usize,
    pub pose: CameraPose,
}

/// Builds a pyramid from per-level raw head outputs (flattened records).
pub fn build_pyramid(
    raw_levels: &[Vec<f64>],
    pose: &CameraPose,
    cfg: &DecodeConfig,
    view: usize,
) -> Result<GaussianPyramid> {
    let counts = pyramid_counts(cfg.width, cfg.levels)?;
    if raw_levels.len() != cfg.levels {
        return Err(Error::SizeMismatch(format!(
            "expected {} levels of raw output, got {}",
            cfg.levels,
            raw_levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut lattices = Vec::with_capacity(cfg.levels);
    for (l, raw) in raw_levels.iter().enumerate() {
        let stride = cfg.raw_len(l);
        if raw.len() != counts[l] * stride {
            return Err(Error::SizeMismatch(format!(
                "level {} needs {} x {} raw values, got {}",
                l,
                counts[l],
                stride,
                raw.len()
            )));
        }
        let lattice = fibonacci_lattice(counts[l], l)?;
        let gaussians = (0..counts[l])
            .map(|j| {
                let rec = RawHeadOutput {
                    values: &raw[j * stride..(j + 1) * stride],
                    candidates: cfg.inv_candidates[l].len(),
                };
                decode_gaussian(&rec, lattice.point(j), l, pose, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        levels.push(gaussians);
        lattices.push(lattice);
    }
    Ok(GaussianPyramid { levels, lattices, view, pose: *pose })
}

/// Flattens pyramids into one Gaussian set: view-major, levels coarse to
/// fine, lattice order within a level.
pub fn consolidate(pyramids: &[GaussianPyramid]) -> Vec<Gaussian> {
    let total: usize = pyramids.iter().map(|p| p.levels.iter().map(Vec::len).sum::<usize>()).sum();
    let mut out = Vec::with_capacity(total);
    for p in pyramids {
        for level in p.levels.iter().rev() {
            out.extend(level.iter().cloned());
        }
    }
    out
}
