//! Equirectangular geometry, the Fibonacci lattice and pyramid counts.
//!
//! Conventions used everywhere in this crate: y-up, z-forward, x-right;
//! longitude in [-pi, pi) increases left to right, latitude in [-pi/2, pi/2]
//! increases bottom to top; pixel centers sit at half-integer offsets, so the
//! pole rows are well defined and round trips are exact.

use nalgebra::{UnitQuaternion, Vector3};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::raster::ErpImage;

/// Golden ratio.
pub const PHI: f64 = 1.618_033_988_749_895;

/// Unit direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    /// Wraps a vector that is already unit length (within 1e-9).
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = Vector3::new(x, y, z);
        if (v.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "direction norm {} != 1",
                v.norm()
            )));
        }
        Ok(Self(v))
    }

    pub fn from_unnormalized(v: Vector3<f64>) -> Self {
        Self(v.normalize())
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }
}

/// World-from-camera rigid pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl CameraPose {
    pub fn new(position: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self { position, rotation }
    }

    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn at(position: Vector3<f64>) -> Self {
        Self {
            position,
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Camera-frame direction to world frame.
    pub fn dir_to_world(&self, d: &Direction) -> Direction {
        Direction(self.rotation * d.vector())
    }

    /// World point into the camera frame.
    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.position)
    }

    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.position
    }
}

/// Continuous ERP pixel coordinates to a unit direction.
pub fn pixel_to_dir(u: f64, v: f64, width: usize, height: usize) -> Direction {
    debug_assert_eq!(width, 2 * height);
    let lon = 2.0 * PI * (u + 0.5) / width as f64 - PI;
    let lat = PI / 2.0 - PI * (v + 0.5) / height as f64;
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    Direction(Vector3::new(cos_lat * sin_lon, sin_lat, cos_lat * cos_lon))
}

/// Unit direction to continuous ERP pixel coordinates.
///
/// Inverse of [`pixel_to_dir`] up to horizontal wrap; at the exact poles the
/// longitude is degenerate and `u` is pinned to the center column.
pub fn dir_to_pixel(d: &Direction, width: usize, height: usize) -> (f64, f64) {
    debug_assert_eq!(width, 2 * height);
    let lat = d.y().clamp(-1.0, 1.0).asin();
    let lon = if d.x() == 0.0 && d.z() == 0.0 {
        0.0
    } else {
        d.x().atan2(d.z())
    };
    let u = (lon + PI) / (2.0 * PI) * width as f64 - 0.5;
    let v = (PI / 2.0 - lat) / PI * height as f64 - 0.5;
    (u, v)
}

/// Number of lattice Gaussians for a raster width: floor(W^2 / pi).
pub fn lattice_count(width: usize) -> usize {
    debug_assert!(width >= 2);
    ((width * width) as f64 / PI).floor() as usize
}

/// Per-level lattice counts floor((W/2^l)^2 / pi) for l = 0..levels.
///
/// Level 0 is the finest. The width must divide evenly down to the coarsest
/// level.
pub fn pyramid_counts(width: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("levels must be >= 1".into()));
    }
    let div = 1usize << (levels - 1);
    if width % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {} not divisible by 2^{}",
            width,
            levels - 1
        )));
    }
    Ok((0..levels)
        .map(|l| lattice_count(width >> l))
        .collect())
}

/// Fibonacci lattice on the unit square: x_j = frac(j/phi), y_j = j/(n-1).
///
/// The y coordinate includes both endpoints, so j = 0 sits at the north pole
/// and j = n-1 at the south pole.
#[derive(Debug, Clone, PartialEq)]
pub struct FibonacciLattice {
    n: usize,
    level: usize,
    points: Vec<[f64; 2]>,
}

impl FibonacciLattice {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, j: usize) -> [f64; 2] {
        self.points[j]
    }

    /// Sphere direction of lattice point j.
    ///
    /// Uses the cylindrical equal-area mapping (lon = 2 pi x - pi,
    /// z = 1 - 2y), the canonical Fibonacci-sphere construction; this is what
    /// makes the point set near-uniform in solid angle rather than in
    /// latitude.
    pub fn direction(&self, j: usize) -> Direction {
        let [x, y] = self.points[j];
        unit_square_to_sphere(x, y)
    }
}

/// Equal-area mapping from the unit square to the sphere.
pub fn unit_square_to_sphere(x: f64, y: f64) -> Direction {
    let lon = 2.0 * PI * x - PI;
    let z = 1.0 - 2.0 * y;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let (sin_lon, cos_lon) = lon.sin_cos();
    Direction(Vector3::new(r * sin_lon, z, r * cos_lon))
}

pub fn fibonacci_lattice(n: usize, level: usize) -> Result<FibonacciLattice> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("lattice needs n >= 2, got {n}")));
    }
    let points = (0..n)
        .map(|j| {
            let x = (j as f64 / PHI).fract();
            let y = j as f64 / (n - 1) as f64;
            [x, y]
        })
        .collect();
    Ok(FibonacciLattice { n, level, points })
}

/// Per-pixel spherical density weights w(v) = cos(latitude of row v).
///
/// These are the WS-PSNR weights; they depend on the row only.
pub fn ws_weights(width: usize, height: usize) -> Result<ErpImage> {
    let mut img = ErpImage::zeros(width, height, 1)?;
    for v in 0..height {
        let w = ((v as f64 + 0.5 - height as f64 / 2.0) * PI / height as f64).cos();
        for u in 0..width {
            img.set(u, v, 0, w);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_center_is_forward() {
        let d = pixel_to_dir(511.5, 255.5, 1024, 512);
        assert_abs_diff_eq!(d.x(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.y(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.z(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn top_row_is_north_pole() {
        let d = pixel_to_dir(511.5, -0.5, 1024, 512);
        assert_abs_diff_eq!(d.y(), 1.0, epsilon = 1e-12);
        let d = pixel_to_dir(100.0, -0.5, 1024, 512);
        assert_abs_diff_eq!(d.y(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_is_plus_x() {
        let d = pixel_to_dir(767.5, 255.5, 1024, 512);
        assert_abs_diff_eq!(d.x(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.y(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.z(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dir_to_pixel_known_values() {
        let (u, v) = dir_to_pixel(&Direction::new(0.0, 0.0, 1.0).unwrap(), 1024, 512);
        assert_abs_diff_eq!(u, 511.5, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 255.5, epsilon = 1e-9);

        // south pole lands on the bottom row, center column tie-break
        let (u, v) = dir_to_pixel(&Direction::new(0.0, -1.0, 0.0).unwrap(), 1024, 512);
        assert_abs_diff_eq!(u, 511.5, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 511.5, epsilon = 1e-9);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (u, v) = dir_to_pixel(&Direction::new(s, 0.0, s).unwrap(), 1024, 512);
        assert_abs_diff_eq!(u, 639.5, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 255.5, epsilon = 1e-9);
    }

    #[test]
    fn round_trip_away_from_poles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let lat: f64 = rng.gen_range(-89.9f64..89.9).to_radians();
            let lon: f64 = rng.gen_range(-PI..PI);
            let d = Direction::new(
                lat.cos() * lon.sin(),
                lat.sin(),
                lat.cos() * lon.cos(),
            )
            .unwrap();
            let (u, v) = dir_to_pixel(&d, 1024, 512);
            let d2 = pixel_to_dir(u, v, 1024, 512);
            assert!(d.dot(&d2) > 1.0 - 1e-10, "round trip drifted: {:?}", d);
        }
    }

    #[test]
    fn lattice_count_values() {
        assert_eq!(lattice_count(1024), 333_772);
        assert_eq!(lattice_count(16), 81);
        // two views, one level
        assert_eq!(2 * lattice_count(1024), 667_544);
    }

    #[test]
    fn pyramid_counts_values() {
        assert_eq!(
            pyramid_counts(1024, 4).unwrap(),
            vec![333_772, 83_443, 20_860, 5_215]
        );
        assert_eq!(pyramid_counts(16, 2).unwrap(), vec![81, 20]);
        let total: usize = pyramid_counts(1024, 4).unwrap().iter().sum();
        assert_eq!(2 * total, 886_580);
        assert!(pyramid_counts(1022, 4).is_err());
    }

    #[test]
    fn pyramid_counts_monotone_with_floor_slack() {
        for &(w, l) in &[(1024usize, 4usize), (512, 4), (256, 3), (64, 3)] {
            let counts = pyramid_counts(w, l).unwrap();
            for i in 1..counts.len() {
                assert!(counts[i] < counts[i - 1]);
                let quad = counts[i] * 4;
                assert!(
                    quad + 4 >= counts[i - 1] && quad <= counts[i - 1] + 4,
                    "floor slack violated at level {i}: {:?}",
                    counts
                );
            }
        }
    }

    #[test]
    fn lattice_endpoints() {
        let lat = fibonacci_lattice(101, 0).unwrap();
        assert_eq!(lat.point(0), [0.0, 0.0]);
        assert_abs_diff_eq!(lat.point(1)[0], 0.6180339887, epsilon = 1e-9);
        assert_abs_diff_eq!(lat.point(1)[1], 0.01, epsilon = 1e-12);
        let last = lat.point(100);
        assert_eq!(last[1], 1.0);
        assert_abs_diff_eq!(last[0], (100.0 / PHI).fract(), epsilon = 1e-12);
        assert!(fibonacci_lattice(1, 0).is_err());
    }

    #[test]
    fn lattice_directions_hit_poles() {
        let lat = fibonacci_lattice(1000, 0).unwrap();
        assert_abs_diff_eq!(lat.direction(0).y(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lat.direction(999).y(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn ws_weights_values_and_symmetry() {
        let w = ws_weights(1024, 512).unwrap();
        // rows straddling the equator
        assert!(w.get(0, 255, 0) > 0.9999);
        assert!(w.get(0, 256, 0) > 0.9999);
        assert_abs_diff_eq!(w.get(0, 0, 0), 0.0030679568, epsilon = 1e-9);
        for v in 0..256 {
            assert_eq!(w.get(0, v, 0), w.get(0, 511 - v, 0));
        }
        // in (0, 1]
        assert!(w.as_slice().iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn ws_weights_separable_sum_and_mean() {
        let w = ws_weights(1024, 512).unwrap();
        let total: f64 = w.as_slice().iter().sum();
        let col: f64 = (0..512).map(|v| w.get(0, v, 0)).sum();
        assert_abs_diff_eq!(total, 1024.0 * col, epsilon = total.abs() * 1e-12);
        let mean = total / (1024.0 * 512.0);
        assert!((mean - 2.0 / PI).abs() / (2.0 / PI) < 0.01);
    }
}
