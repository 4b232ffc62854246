//! Cubemap faces: direction addressing, neighbor padding and the
//! differentiable stitch into an equirectangular panorama.
//!
//! Each face is a pinhole camera with a 90 degree field of view, principal
//! point at the face center and square pixels. The per-face bases and the
//! 24-entry edge adjacency table below fix every orientation choice; the
//! exhaustive oracle test at the bottom re-derives the table from directions.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_dir, Direction};
use crate::raster::{ErpImage, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceKey {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl FaceKey {
    /// Fixed face order used for storage and for every deterministic
    /// accumulation loop. Also the tie-break order on face boundaries
    /// (lexicographically smallest key wins: "+x" < "+y" < "+z" < "-x" ...).
    pub const ALL: [FaceKey; 6] = [
        FaceKey::PosX,
        FaceKey::PosY,
        FaceKey::PosZ,
        FaceKey::NegX,
        FaceKey::NegY,
        FaceKey::NegZ,
    ];

    pub fn index(self) -> usize {
        match self {
            FaceKey::PosX => 0,
            FaceKey::PosY => 1,
            FaceKey::PosZ => 2,
            FaceKey::NegX => 3,
            FaceKey::NegY => 4,
            FaceKey::NegZ => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FaceKey::PosX => "+x",
            FaceKey::NegX => "-x",
            FaceKey::PosY => "+y",
            FaceKey::NegY => "-y",
            FaceKey::PosZ => "+z",
            FaceKey::NegZ => "-z",
        }
    }

    /// (forward, right, down) basis in the camera frame.
    pub fn basis(self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        match self {
            FaceKey::PosX => (Vector3::x(), -Vector3::z(), -Vector3::y()),
            FaceKey::NegX => (-Vector3::x(), Vector3::z(), -Vector3::y()),
            FaceKey::PosY => (Vector3::y(), Vector3::x(), -Vector3::z()),
            FaceKey::NegY => (-Vector3::y(), Vector3::x(), Vector3::z()),
            FaceKey::PosZ => (Vector3::z(), Vector3::x(), -Vector3::y()),
            FaceKey::NegZ => (-Vector3::z(), -Vector3::x(), -Vector3::y()),
        }
    }

    /// Rotation taking camera-frame vectors to face-frame (right, down,
    /// forward) coordinates.
    pub fn cam_to_face(self) -> Matrix3<f64> {
        let (f, r, dn) = self.basis();
        Matrix3::from_rows(&[r.transpose(), dn.transpose(), f.transpose()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    LeftCol,
    RightCol,
    TopRow,
    BottomRow,
}

/// One adjacency: `side` of `face` copies `edge` of `neighbor`, index-reversed
/// when `reversed` is set.
#[derive(Debug, Clone, Copy)]
pub struct Adjacency {
    pub face: FaceKey,
    pub side: Side,
    pub neighbor: FaceKey,
    pub edge: Edge,
    pub reversed: bool,
}

/// The full 24-entry face adjacency table.
pub const ADJACENCY: [Adjacency; 24] = {
    use Edge::*;
    use FaceKey::*;
    use Side::*;
    const fn a(face: FaceKey, side: Side, neighbor: FaceKey, edge: Edge, reversed: bool) -> Adjacency {
        Adjacency { face, side, neighbor, edge, reversed }
    }
    [
        a(PosX, Left, PosZ, RightCol, false),
        a(PosX, Right, NegZ, LeftCol, false),
        a(PosX, Top, PosY, RightCol, false),
        a(PosX, Bottom, NegY, RightCol, true),
        a(NegX, Left, NegZ, RightCol, false),
        a(NegX, Right, PosZ, LeftCol, false),
        a(NegX, Top, PosY, LeftCol, true),
        a(NegX, Bottom, NegY, LeftCol, false),
        a(PosY, Left, NegX, TopRow, true),
        a(PosY, Right, PosX, TopRow, false),
        a(PosY, Top, PosZ, TopRow, false),
        a(PosY, Bottom, NegZ, TopRow, true),
        a(NegY, Left, NegX, BottomRow, false),
        a(NegY, Right, PosX, BottomRow, true),
        a(NegY, Top, NegZ, BottomRow, true),
        a(NegY, Bottom, PosZ, BottomRow, false),
        a(PosZ, Left, NegX, RightCol, false),
        a(PosZ, Right, PosX, LeftCol, false),
        a(PosZ, Top, PosY, TopRow, false),
        a(PosZ, Bottom, NegY, BottomRow, false),
        a(NegZ, Left, PosX, RightCol, false),
        a(NegZ, Right, NegX, LeftCol, false),
        a(NegZ, Top, PosY, BottomRow, true),
        a(NegZ, Bottom, NegY, TopRow, true),
    ]
};

/// Maps a unit direction to its cubemap face and continuous face pixel
/// coordinates in [-0.5, R-0.5]; pixel centers are half-integers in NDC.
pub fn dir_to_face_uv(d: &Direction, resolution: usize) -> (FaceKey, f64, f64) {
    let v = d.vector();
    let abs = [v.x.abs(), v.y.abs(), v.z.abs()];
    let max = abs[0].max(abs[1]).max(abs[2]);
    // candidates in tie-break order: +x, +y, +z, -x, -y, -z
    let face = FaceKey::ALL
        .into_iter()
        .find(|k| {
            let (f, _, _) = k.basis();
            let comp = v.dot(&f);
            comp > 0.0 && comp == max
        })
        .unwrap_or_else(|| {
            // all components zero never happens for unit directions; axis
            // tie with both signs at zero handled by the search above
            FaceKey::ALL
                .into_iter()
                .find(|k| {
                    let (f, _, _) = k.basis();
                    v.dot(&f) == max
                })
                .expect("direction has a dominant axis")
        });
    let (f, r, dn) = face.basis();
    let depth = v.dot(&f);
    let u_ndc = v.dot(&r) / depth;
    let v_ndc = v.dot(&dn) / depth;
    let half = resolution as f64 / 2.0;
    (face, (u_ndc + 1.0) * half - 0.5, (v_ndc + 1.0) * half - 0.5)
}

/// Direction through the (possibly out-of-face) continuous pixel (u, v) of a
/// face, in the camera frame.
pub fn face_pixel_dir(face: FaceKey, u: f64, v: f64, resolution: usize) -> Direction {
    let (f, r, dn) = face.basis();
    let half = resolution as f64 / 2.0;
    let u_ndc = (u + 0.5) / half - 1.0;
    let v_ndc = (v + 0.5) / half - 1.0;
    Direction::from_unnormalized(f + u_ndc * r + v_ndc * dn)
}

/// Six square rasters keyed by face, with an optional 1-pixel neighbor
/// padding ring.
#[derive(Debug, Clone, PartialEq)]
pub struct CubemapFaceSet {
    resolution: usize,
    channels: usize,
    pad: usize,
    faces: Vec<Raster>,
}

impl CubemapFaceSet {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        Self {
            resolution,
            channels,
            pad: 0,
            faces: (0..6).map(|_| Raster::zeros(resolution, resolution, channels)).collect(),
        }
    }

    pub fn from_faces(faces: Vec<Raster>, pad: usize) -> Result<Self> {
        if faces.len() != 6 {
            return Err(Error::InvalidArgument("face set needs 6 faces".into()));
        }
        if pad > 1 {
            return Err(Error::InvalidArgument("pad must be 0 or 1".into()));
        }
        let side = faces[0].width();
        let channels = faces[0].channels();
        for f in &faces {
            if f.width() != side || f.height() != side || f.channels() != channels {
                return Err(Error::DimensionMismatch("faces must be square and equal".into()));
            }
        }
        if side < 2 * pad + 1 {
            return Err(Error::InvalidArgument("face too small for padding".into()));
        }
        Ok(Self { resolution: side - 2 * pad, channels, pad, faces })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn face(&self, key: FaceKey) -> &Raster {
        &self.faces[key.index()]
    }

    pub fn face_mut(&mut self, key: FaceKey) -> &mut Raster {
        &mut self.faces[key.index()]
    }

    /// Unpadded sample access; with pad = 1 the stored raster is offset by one.
    #[inline]
    pub fn get(&self, key: FaceKey, x: usize, y: usize, c: usize) -> f64 {
        self.faces[key.index()].get(x + self.pad, y + self.pad, c)
    }

    /// Builds each face from a closure over (face, x, y) returning all
    /// channels; handy for analytic-field tests.
    pub fn from_fn(resolution: usize, channels: usize, mut f: impl FnMut(FaceKey, usize, usize, &mut [f64])) -> Self {
        let mut set = Self::zeros(resolution, channels);
        let mut px = vec![0.0; channels];
        for key in FaceKey::ALL {
            for y in 0..resolution {
                for x in 0..resolution {
                    f(key, x, y, &mut px);
                    for (c, &v) in px.iter().enumerate() {
                        set.face_mut(key).set(x, y, c, v);
                    }
                }
            }
        }
        set
    }
}

fn edge_coords(edge: Edge, i: usize, r: usize) -> (usize, usize) {
    match edge {
        Edge::LeftCol => (0, i),
        Edge::RightCol => (r - 1, i),
        Edge::TopRow => (i, 0),
        Edge::BottomRow => (i, r - 1),
    }
}

fn side_pad_coords(side: Side, i: usize, r: usize) -> (usize, usize) {
    // coordinates in the padded raster (size r + 2)
    match side {
        Side::Left => (0, i + 1),
        Side::Right => (r + 1, i + 1),
        Side::Top => (i + 1, 0),
        Side::Bottom => (i + 1, r + 1),
    }
}

/// Adds the 1-pixel neighbor padding ring to an unpadded face set.
///
/// Borders copy the adjacent face's edge samples with the table's
/// orientation; the four corners are the average of their two adjacent border
/// values.
pub fn pad_faces(set: &CubemapFaceSet) -> Result<CubemapFaceSet> {
    if set.pad != 0 {
        return Err(Error::InvalidArgument("face set already padded".into()));
    }
    let r = set.resolution;
    let c = set.channels;
    let mut faces: Vec<Raster> = (0..6).map(|_| Raster::zeros(r + 2, r + 2, c)).collect();
    // interior copy
    for key in FaceKey::ALL {
        let src = set.face(key);
        let dst = &mut faces[key.index()];
        for y in 0..r {
            for x in 0..r {
                for ch in 0..c {
                    dst.set(x + 1, y + 1, ch, src.get(x, y, ch));
                }
            }
        }
    }
    // borders from neighbors
    for adj in ADJACENCY {
        let src = set.face(adj.neighbor);
        for i in 0..r {
            let j = if adj.reversed { r - 1 - i } else { i };
            let (sx, sy) = edge_coords(adj.edge, j, r);
            let (dx, dy) = side_pad_coords(adj.side, i, r);
            for ch in 0..c {
                faces[adj.face.index()].set(dx, dy, ch, src.get(sx, sy, ch));
            }
        }
    }
    // corners: average of the two adjacent border samples
    for key in FaceKey::ALL {
        let f = &mut faces[key.index()];
        let n = r + 1;
        for ch in 0..c {
            let tl = 0.5 * (f.get(1, 0, ch) + f.get(0, 1, ch));
            let tr = 0.5 * (f.get(n - 1, 0, ch) + f.get(n, 1, ch));
            let bl = 0.5 * (f.get(1, n, ch) + f.get(0, n - 1, ch));
            let br = 0.5 * (f.get(n - 1, n, ch) + f.get(n, n - 1, ch));
            f.set(0, 0, ch, tl);
            f.set(n, 0, ch, tr);
            f.set(0, n, ch, bl);
            f.set(n, n, ch, br);
        }
    }
    CubemapFaceSet::from_faces(faces, 1)
}

/// Routes gradients w.r.t. padded-face samples back to the unpadded faces
/// they were copied from (exact adjoint of [`pad_faces`]).
pub fn pad_faces_adjoint(padded_grads: &CubemapFaceSet) -> Result<CubemapFaceSet> {
    if padded_grads.pad != 1 {
        return Err(Error::InvalidArgument("adjoint needs padded grads".into()));
    }
    let r = padded_grads.resolution;
    let c = padded_grads.channels;
    let mut out = CubemapFaceSet::zeros(r, c);
    // corner grads split in half onto the two adjacent border samples first
    let mut border_extra = vec![vec![0.0f64; 4 * r * c]; 6]; // [side][i][ch]
    let bidx = |side: usize, i: usize, ch: usize| (side * r + i) * c + ch;
    for key in FaceKey::ALL {
        let f = padded_grads.face(key);
        let n = r + 1;
        let e = &mut border_extra[key.index()];
        for ch in 0..c {
            let tl = f.get(0, 0, ch);
            e[bidx(2, 0, ch)] += 0.5 * tl; // top border, i = 0
            e[bidx(0, 0, ch)] += 0.5 * tl; // left border, i = 0
            let tr = f.get(n, 0, ch);
            e[bidx(2, r - 1, ch)] += 0.5 * tr;
            e[bidx(1, 0, ch)] += 0.5 * tr;
            let bl = f.get(0, n, ch);
            e[bidx(3, 0, ch)] += 0.5 * bl;
            e[bidx(0, r - 1, ch)] += 0.5 * bl;
            let br = f.get(n, n, ch);
            e[bidx(3, r - 1, ch)] += 0.5 * br;
            e[bidx(1, r - 1, ch)] += 0.5 * br;
        }
    }
    let side_num = |s: Side| match s {
        Side::Left => 0,
        Side::Right => 1,
        Side::Top => 2,
        Side::Bottom => 3,
    };
    // interior grads pass straight through
    for key in FaceKey::ALL {
        let src = padded_grads.face(key);
        let dst = out.face_mut(key);
        for y in 0..r {
            for x in 0..r {
                for ch in 0..c {
                    dst.set(x, y, ch, src.get(x + 1, y + 1, ch));
                }
            }
        }
    }
    // border grads (plus corner halves) flow to the neighbor edge pixels
    for adj in ADJACENCY {
        let grads = padded_grads.face(adj.face);
        let extra = &border_extra[adj.face.index()];
        let s = side_num(adj.side);
        for i in 0..r {
            let (px, py) = side_pad_coords(adj.side, i, r);
            let j = if adj.reversed { r - 1 - i } else { i };
            let (nx, ny) = edge_coords(adj.edge, j, r);
            for ch in 0..c {
                let g = grads.get(px, py, ch) + extra[bidx(s, i, ch)];
                let cur = out.face(adj.neighbor).get(nx, ny, ch);
                out.face_mut(adj.neighbor).set(nx, ny, ch, cur + g);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct StitchTap {
    pub face: FaceKey,
    /// padded-raster indices of the four bilinear corners
    pub idx: [(usize, usize); 4],
    pub weights: [f64; 4],
}

/// Bilinear tap of ERP pixel (u, v) into a padded face set.
pub fn stitch_tap(u: usize, v: usize, width: usize, height: usize, resolution: usize) -> StitchTap {
    let d = pixel_to_dir(u as f64, v as f64, width, height);
    let (face, fu, fv) = dir_to_face_uv(&d, resolution);
    // padded coordinates; taps always fall inside the padded raster
    let pu = fu + 1.0;
    let pv = fv + 1.0;
    let x0 = pu.floor();
    let y0 = pv.floor();
    let fx = pu - x0;
    let fy = pv - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    StitchTap {
        face,
        idx: [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)],
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

/// Stitches a padded face set into an equirectangular panorama by bilinear
/// sampling; linear in the face samples.
pub fn stitch(set: &CubemapFaceSet, width: usize, height: usize) -> Result<ErpImage> {
    if set.pad != 1 {
        return Err(Error::UnpaddedFaces);
    }
    let c = set.channels;
    let mut out = ErpImage::zeros(width, height, c)?;
    for v in 0..height {
        for u in 0..width {
            let tap = stitch_tap(u, v, width, height, set.resolution);
            let face = set.face(tap.face);
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += tap.weights[k] * face.get(tap.idx[k].0, tap.idx[k].1, ch);
                }
                out.set(u, v, ch, acc);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`stitch`]: scatters panorama gradients onto the padded face
/// samples with the same bilinear weights.
pub fn stitch_backward(grad: &ErpImage, resolution: usize, channels: usize) -> CubemapFaceSet {
    let mut out = CubemapFaceSet {
        resolution,
        channels,
        pad: 1,
        faces: (0..6)
            .map(|_| Raster::zeros(resolution + 2, resolution + 2, channels))
            .collect(),
    };
    for v in 0..grad.height() {
        for u in 0..grad.width() {
            let tap = stitch_tap(u, v, grad.width(), grad.height(), resolution);
            let face = out.face_mut(tap.face);
            for ch in 0..channels {
                let g = grad.get(u, v, ch);
                for k in 0..4 {
                    let (x, y) = tap.idx[k];
                    let cur = face.get(x, y, ch);
                    face.set(x, y, ch, cur + tap.weights[k] * g);
                }
            }
        }
    }
    out
}

/// Resamples an ERP image onto cubemap faces (bilinear, horizontal wrap).
pub fn erp_to_cubemap(img: &ErpImage, resolution: usize) -> CubemapFaceSet {
    let c = img.channels();
    let mut set = CubemapFaceSet::zeros(resolution, c);
    let mut px = vec![0.0; c];
    for key in FaceKey::ALL {
        for y in 0..resolution {
            for x in 0..resolution {
                let d = face_pixel_dir(key, x as f64, y as f64, resolution);
                let (pu, pv) = crate::geometry::dir_to_pixel(&d, img.width(), img.height());
                img.sample_wrap(pu, pv, &mut px);
                for (ch, &v) in px.iter().enumerate() {
                    set.face_mut(key).set(x, y, ch, v);
                }
            }
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn axis_directions_hit_face_centers() {
        let r = 64;
        let (face, u, v) = dir_to_face_uv(&Direction::new(0.0, 0.0, 1.0).unwrap(), r);
        assert_eq!(face, FaceKey::PosZ);
        assert_abs_diff_eq!(u, 31.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 31.5, epsilon = 1e-12);
        let (face, u, v) = dir_to_face_uv(&Direction::new(1.0, 0.0, 0.0).unwrap(), r);
        assert_eq!(face, FaceKey::PosX);
        assert_abs_diff_eq!(u, 31.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 31.5, epsilon = 1e-12);
    }

    #[test]
    fn corner_ties_break_to_lexicographic_face() {
        let s = 1.0 / 3.0f64.sqrt();
        let (face, u, v) = dir_to_face_uv(&Direction::new(s, s, s).unwrap(), 64);
        assert_eq!(face, FaceKey::PosX);
        // the corner lands on the face edge
        assert_abs_diff_eq!(u, -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(v, -0.5, epsilon = 1e-9);
    }

    #[test]
    fn face_pixel_dir_round_trips() {
        let r = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let d = Direction::from_unnormalized(v);
            let (face, u, vv) = dir_to_face_uv(&d, r);
            let d2 = face_pixel_dir(face, u, vv, r);
            assert!(d.dot(&d2) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn constant_faces_pad_constant() {
        let mut set = CubemapFaceSet::zeros(8, 2);
        for k in FaceKey::ALL {
            set.face_mut(k).fill(3.5);
        }
        let padded = pad_faces(&set).unwrap();
        for k in FaceKey::ALL {
            assert!(padded.face(k).as_slice().iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn pos_z_right_border_is_pos_x_left_column() {
        let r = 8;
        let set = CubemapFaceSet::from_fn(r, 1, |k, x, y, px| {
            px[0] = (k.index() * 10_000 + y * r + x) as f64;
        });
        let padded = pad_faces(&set).unwrap();
        for row in 0..r {
            assert_eq!(
                padded.face(FaceKey::PosZ).get(r + 1, row + 1, 0),
                set.get(FaceKey::PosX, 0, row, 0),
            );
        }
    }

    /// Exhaustive neighbor-edge oracle over all 6 x 4 borders: each padded
    /// border sample must equal the edge sample of the face its extended
    /// pixel direction lands on.
    #[test]
    fn pad_borders_match_direction_oracle() {
        let r = 16;
        let set = CubemapFaceSet::from_fn(r, 1, |k, x, y, px| {
            px[0] = (k.index() * 100_000 + y * r + x) as f64;
        });
        let padded = pad_faces(&set).unwrap();
        for key in FaceKey::ALL {
            let checks: Vec<(f64, f64, usize, usize)> = (0..r)
                .flat_map(|i| {
                    vec![
                        (-1.0, i as f64, 0usize, i + 1), // left border
                        (r as f64, i as f64, r + 1, i + 1), // right border
                        (i as f64, -1.0, i + 1, 0),      // top border
                        (i as f64, r as f64, i + 1, r + 1), // bottom border
                    ]
                })
                .collect();
            for (ux, vy, px, py) in checks {
                let d = face_pixel_dir(key, ux, vy, r);
                let (nf, nu, nv) = dir_to_face_uv(&d, r);
                assert_ne!(nf, key, "border pixel should leave the face");
                let nx = (nu.round() as isize).clamp(0, r as isize - 1) as usize;
                let ny = (nv.round() as isize).clamp(0, r as isize - 1) as usize;
                let expect = set.get(nf, nx, ny, 0);
                let got = padded.face(key).get(px, py, 0);
                assert_eq!(got, expect, "face {:?} pad ({px},{py})", key);
            }
        }
    }

    fn analytic_field(d: &Direction) -> f64 {
        0.3 * d.x() + 0.5 * d.y() - 0.8 * d.z()
    }

    #[test]
    fn stitch_constant_and_exact_centers() {
        let r = 16;
        let mut set = CubemapFaceSet::zeros(r, 1);
        for k in FaceKey::ALL {
            set.face_mut(k).fill(0.75);
        }
        let padded = pad_faces(&set).unwrap();
        let erp = stitch(&padded, 64, 32).unwrap();
        assert!(erp.as_slice().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        assert!(stitch(&set, 64, 32).is_err(), "unpadded input must be rejected");
    }

    #[test]
    fn stitch_matches_analytic_field() {
        let r = 256;
        let (w, h) = (1024, 512);
        let set = CubemapFaceSet::from_fn(r, 1, |k, x, y, px| {
            let d = face_pixel_dir(k, x as f64, y as f64, r);
            px[0] = analytic_field(&d);
        });
        let erp = stitch(&pad_faces(&set).unwrap(), w, h).unwrap();
        let mut max_err = 0.0f64;
        for v in 0..h {
            for u in 0..w {
                let d = pixel_to_dir(u as f64, v as f64, w, h);
                max_err = max_err.max((erp.get(u, v, 0) - analytic_field(&d)).abs());
            }
        }
        assert!(max_err < 2e-3, "stitch error {max_err}");
    }

    #[test]
    fn erp_cube_round_trip_band_limited() {
        let (w, h) = (256, 128);
        let mut img = ErpImage::zeros(w, h, 1).unwrap();
        for v in 0..h {
            for u in 0..w {
                let d = pixel_to_dir(u as f64, v as f64, w, h);
                // smooth low-order content
                img.set(u, v, 0, 0.5 + 0.2 * d.x() + 0.15 * d.y() * d.z() + 0.1 * d.z());
            }
        }
        let cube = erp_to_cubemap(&img, h);
        // faces must match the field within interpolation error
        let mut max_err = 0.0f64;
        for k in FaceKey::ALL {
            for y in 0..h {
                for x in 0..h {
                    let d = face_pixel_dir(k, x as f64, y as f64, h);
                    let want = 0.5 + 0.2 * d.x() + 0.15 * d.y() * d.z() + 0.1 * d.z();
                    max_err = max_err.max((cube.get(k, x, y, 0) - want).abs());
                }
            }
        }
        assert!(max_err < 2e-3, "erp_to_cubemap error {max_err}");
        let back = stitch(&pad_faces(&cube).unwrap(), w, h).unwrap();
        let mse: f64 = img
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (w * h) as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr > 40.0, "round-trip PSNR {psnr}");
    }

    #[test]
    fn stitch_is_linear() {
        let r = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f1 = CubemapFaceSet::zeros(r, 2);
        let mut f2 = CubemapFaceSet::zeros(r, 2);
        for k in FaceKey::ALL {
            for s in [&mut f1, &mut f2] {
                let face = s.face_mut(k);
                for i in 0..face.as_slice().len() {
                    face.as_mut_slice()[i] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let (a, b) = (2.25, -0.5);
        let mut combo = CubemapFaceSet::zeros(r, 2);
        for k in FaceKey::ALL {
            for i in 0..combo.face(k).as_slice().len() {
                combo.face_mut(k).as_mut_slice()[i] =
                    a * f1.face(k).as_slice()[i] + b * f2.face(k).as_slice()[i];
            }
        }
        let s1 = stitch(&pad_faces(&f1).unwrap(), 32, 16).unwrap();
        let s2 = stitch(&pad_faces(&f2).unwrap(), 32, 16).unwrap();
        let sc = stitch(&pad_faces(&combo).unwrap(), 32, 16).unwrap();
        for i in 0..sc.as_slice().len() {
            let want = a * s1.as_slice()[i] + b * s2.as_slice()[i];
            assert_abs_diff_eq!(sc.as_slice()[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn stitch_adjoint_dot_product() {
        let r = 8;
        let (w, h) = (32, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = CubemapFaceSet::zeros(r, 2);
        for k in FaceKey::ALL {
            let face = f.face_mut(k);
            for i in 0..face.as_slice().len() {
                face.as_mut_slice()[i] = rng.gen_range(-1.0..1.0);
            }
        }
        let mut g = ErpImage::zeros(w, h, 2).unwrap();
        for i in 0..g.as_slice().len() {
            g.as_mut_slice()[i] = rng.gen_range(-1.0..1.0);
        }
        // adjoint through stitch alone (padded samples)
        let padded = pad_faces(&f).unwrap();
        let out = stitch(&padded, w, h).unwrap();
        let lhs: f64 = out.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let grads = stitch_backward(&g, r, 2);
        let rhs: f64 = FaceKey::ALL
            .into_iter()
            .map(|k| {
                padded
                    .face(k)
                    .as_slice()
                    .iter()
                    .zip(grads.face(k).as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(rhs.abs()).max(1e-9));
        // and through pad + stitch (unpadded samples)
        let routed = pad_faces_adjoint(&grads).unwrap();
        let rhs2: f64 = FaceKey::ALL
            .into_iter()
            .map(|k| {
                f.face(k)
                    .as_slice()
                    .iter()
                    .zip(routed.face(k).as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        assert!((lhs - rhs2).abs() <= 1e-6 * lhs.abs().max(rhs2.abs()).max(1e-9));
    }

    #[test]
    fn seam_gradients_bounded_by_interior() {
        // analytic field stitched at W = 2H = 4R: cross-seam jumps must stay
        // within 1.5x the interior maximum
        let r = 128;
        let (w, h) = (512, 256);
        let set = CubemapFaceSet::from_fn(r, 1, |k, x, y, px| {
            let d = face_pixel_dir(k, x as f64, y as f64, r);
            px[0] = analytic_field(&d);
        });
        let erp = stitch(&pad_faces(&set).unwrap(), w, h).unwrap();
        let face_of = |u: usize, v: usize| {
            let d = pixel_to_dir(u as f64, v as f64, w, h);
            dir_to_face_uv(&d, r).0
        };
        let mut max_seam = 0.0f64;
        let mut max_interior = 0.0f64;
        for v in 0..h {
            for u in 0..w {
                let un = (u + 1) % w;
                let gh = (erp.get(un, v, 0) - erp.get(u, v, 0)).abs();
                if face_of(u, v) != face_of(un, v) {
                    max_seam = max_seam.max(gh);
                } else {
                    max_interior = max_interior.max(gh);
                }
                if v + 1 < h {
                    let gv = (erp.get(u, v + 1, 0) - erp.get(u, v, 0)).abs();
                    if face_of(u, v) != face_of(u, v + 1) {
                        max_seam = max_seam.max(gv);
                    } else {
                        max_interior = max_interior.max(gv);
                    }
                }
            }
        }
        assert!(
            max_seam <= 1.5 * max_interior,
            "seam {max_seam} vs interior {max_interior}"
        );
    }
}
