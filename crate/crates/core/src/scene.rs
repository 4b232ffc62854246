//! Deterministic synthetic scenes with exact ground truth.
//!
//! A box room with procedurally textured walls, rendered per ERP pixel by
//! analytic ray-box intersection: the depth maps are exact, which is what the
//! cost-volume and warp-cycle oracles lean on.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{Gaussian, SH_C0};
use crate::geometry::{pixel_to_dir, CameraPose};
use crate::raster::{DepthMap, ErpImage};

/// Procedural texture parameters; the seed fixes all randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextureSpec {
    pub seed: u64,
    /// 3D checker cell size, meters
    pub checker_scale: f64,
    /// value-noise cell size, meters
    pub noise_scale: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self { seed: 7, checker_scale: 1.0, noise_scale: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// room half-extents, meters
    pub half_extents: [f64; 3],
    pub texture: TextureSpec,
    /// camera positions (identity orientation unless quaternions given)
    pub cameras: Vec<PoseSpec>,
    pub width: usize,
    pub height: usize,
}

/// Serializable pose: position plus (w, x, y, z) quaternion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseSpec {
    pub position: [f64; 3],
    #[serde(default = "identity_quat")]
    pub quaternion: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl PoseSpec {
    pub fn to_pose(&self) -> CameraPose {
        CameraPose::new(
            Vector3::new(self.position[0], self.position[1], self.position[2]),
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                self.quaternion[0],
                self.quaternion[1],
                self.quaternion[2],
                self.quaternion[3],
            )),
        )
    }

    pub fn from_pose(pose: &CameraPose) -> Self {
        let q = pose.rotation.quaternion();
        Self {
            position: [pose.position.x, pose.position.y, pose.position.z],
            quaternion: [q.w, q.i, q.j, q.k],
        }
    }
}

impl SceneSpec {
    /// Two-view room with a baseline along x, default texture.
    pub fn two_view(width: usize, height: usize, baseline: f64, seed: u64) -> Self {
        Self {
            half_extents: [3.0, 2.0, 3.5],
            texture: TextureSpec { seed, ..TextureSpec::default() },
            cameras: vec![
                PoseSpec { position: [-baseline / 2.0, 0.0, 0.0], quaternion: identity_quat() },
                PoseSpec { position: [baseline / 2.0, 0.0, 0.0], quaternion: identity_quat() },
            ],
            width,
            height,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn lattice_hash(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(
        (ix as u64).wrapping_mul(0x8da6b343)
            ^ (iy as u64).wrapping_mul(0xd8163841)
            ^ (iz as u64).wrapping_mul(0xcb1ab31f)
            ^ seed,
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in [0, 1).
fn value_noise(p: &Vector3<f64>, scale: f64, seed: u64) -> f64 {
    let q = p / scale;
    let i = q.map(f64::floor);
    let f = q - i;
    let (ix, iy, iz) = (i.x as i64, i.y as i64, i.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 0 { 1.0 - f.x } else { f.x })
                    * (if dy == 0 { 1.0 - f.y } else { f.y })
                    * (if dz == 0 { 1.0 - f.z } else { f.z });
                acc += w * lattice_hash(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

fn checker(p: &Vector3<f64>, scale: f64) -> f64 {
    let s = p.map(|v| (v / scale).floor() as i64);
    (((s.x + s.y + s.z).rem_euclid(2)) as f64).clamp(0.0, 1.0)
}

/// Wall albedo keyed by the exit axis and sign.
fn wall_base(axis: usize, positive: bool) -> [f64; 3] {
    match (axis, positive) {
        (0, true) => [0.85, 0.45, 0.40],
        (0, false) => [0.40, 0.75, 0.85],
        (1, true) => [0.80, 0.80, 0.75],
        (1, false) => [0.45, 0.42, 0.40],
        (2, true) => [0.50, 0.80, 0.45],
        (_, _) => [0.80, 0.70, 0.35],
    }
}

/// Texture color at a wall point: checker plus three noise octaves, so
/// every cost-volume level sees resolvable contrast.
fn surface_color(p: &Vector3<f64>, axis: usize, positive: bool, tex: &TextureSpec) -> [f64; 3] {
    let base = wall_base(axis, positive);
    let ck = checker(p, tex.checker_scale);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let seed = tex.seed.wrapping_add(c as u64 * 0x9e37);
        let n = 0.35 * value_noise(p, tex.noise_scale * 3.0, seed)
            + 0.3 * value_noise(p, tex.noise_scale, seed ^ 0x517c)
            + 0.2 * value_noise(p, tex.noise_scale * 0.35, seed ^ 0xa001)
            + 0.15 * value_noise(p, tex.noise_scale * 0.14, seed ^ 0x3f91);
        let v = base[c] * (0.55 + 0.45 * ck) * (0.35 + 1.3 * n);
        *out = v.clamp(0.0, 1.0);
    }
    rgb
}

/// Exit distance of a ray from inside the box, plus the exit wall.
fn ray_box_exit(origin: &Vector3<f64>, dir: &Vector3<f64>, half: &[f64; 3]) -> (f64, usize, bool) {
    let mut best_t = f64::INFINITY;
    let mut best_axis = 0;
    let mut best_pos = true;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-15 {
            continue;
        }
        let bound = if d > 0.0 { half[axis] } else { -half[axis] };
        let t = (bound - origin[axis]) / d;
        if t > 0.0 && t < best_t {
            best_t = t;
            best_axis = axis;
            best_pos = d > 0.0;
        }
    }
    (best_t, best_axis, best_pos)
}

/// One rendered view: image plus exact depth.
pub struct SceneView {
    pub image: ErpImage,
    pub depth: DepthMap,
    pub pose: CameraPose,
}

/// Renders every listed camera by analytic ray casting.
pub fn synth_scene(spec: &SceneSpec) -> Result<Vec<SceneView>> {
    if spec.cameras.is_empty() {
        return Err(Error::InvalidArgument("scene needs at least one camera".into()));
    }
    for cam in &spec.cameras {
        for a in 0..3 {
            if cam.position[a].abs() >= spec.half_extents[a] {
                return Err(Error::CameraOutsideRoom);
            }
        }
    }
    let (w, h) = (spec.width, spec.height);
    let mut views = Vec::with_capacity(spec.cameras.len());
    for cam in &spec.cameras {
        let pose = cam.to_pose();
        let mut image = ErpImage::zeros(w, h, 3)?;
        let mut depth = ErpImage::zeros(w, h, 1)?;
        for v in 0..h {
            for u in 0..w {
                let d = pose.rotation * pixel_to_dir(u as f64, v as f64, w, h).vector();
                let (t, axis, positive) = ray_box_exit(&pose.position, &d, &spec.half_extents);
                let hit = pose.position + t * d;
                let rgb = surface_color(&hit, axis, positive, &spec.texture);
                for c in 0..3 {
                    image.set(u, v, c, rgb[c]);
                }
                depth.set(u, v, 0, t);
            }
        }
        views.push(SceneView { image, depth, pose });
    }
    Ok(views)
}

/// Seeded cloud of well-behaved Gaussians for renderer tests and benches:
/// centers in a shell around the origin, footprints of `scale_px` pixels at
/// their depth, moderate opacities.
pub fn random_gaussian_cloud(
    seed: u64,
    count: usize,
    span: f64,
    scale_px: (f64, f64),
    width: usize,
) -> Vec<Gaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let depth = rng.gen_range(1.0..span.max(1.5));
            let center = dir * depth;
            let px = crate::gaussians::pixel_world_size(width, 0, depth);
            let scale = Vector3::new(
                px * rng.gen_range(scale_px.0..scale_px.1),
                px * rng.gen_range(scale_px.0..scale_px.1),
                px * rng.gen_range(scale_px.0..scale_px.1),
            );
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let rotation = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                rng.gen_range(0.0..std::f64::consts::PI),
            );
            let sh: Vec<f64> = (0..3)
                .map(|_| (rng.gen_range(0.1..0.9) - 0.5) / SH_C0)
                .collect();
            Gaussian {
                center,
                opacity: rng.gen_range(0.2..0.8),
                scale,
                rotation,
                sh,
            }
        })
        .collect()
}
