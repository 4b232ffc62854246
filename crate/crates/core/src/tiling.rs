//! Pre-padded tiled execution of local operators.
//!
//! An operator with receptive radius r applied to an r-padded input and run
//! tile by tile (tiles enlarged by r) is bit-identical to the untiled run:
//! every output pixel sees exactly the same input window and the same
//! floating-point evaluation order. Padding is spherical: columns wrap,
//! rows are zero past the poles (zero wins in the corners).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::FibonacciLattice;
use crate::raster::Raster;

/// A pure bounded-receptive-field raster operator with parameters.
///
/// `apply` consumes an input padded by `radius` on every side and produces
/// the unpadded result; each output pixel may depend only on inputs within
/// Chebyshev distance `radius` (certified by [`verify_locality`]).
pub trait LocalOperator: Sync {
    fn radius(&self) -> usize;
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// flattened parameter vector; may be empty
    fn theta(&self) -> &[f64];
    fn apply(&self, padded: &Raster) -> Raster;
    /// Gradients w.r.t. the padded input and theta for a given output
    /// gradient (recomputes its own forward state).
    fn vjp(&self, padded: &Raster, grad_out: &Raster) -> (Raster, Vec<f64>);
}

/// Spherical pre-padding: width and height grow by 2p; left/right borders
/// wrap-copy the opposite side, top/bottom are zero, and the corners are
/// zero (the vertical rule wins).
pub fn pre_pad(img: &Raster, p: usize) -> Raster {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = Raster::zeros(w + 2 * p, h + 2 * p, c);
    for y in 0..h {
        for x in 0..w + 2 * p {
            let sx = (x as i64 - p as i64).rem_euclid(w as i64) as usize;
            for ch in 0..c {
                out.set(x, y + p, ch, img.get(sx, y, ch));
            }
        }
    }
    out
}

/// Reads the region `[x0, x0+w) x [y0, y0+h)` under the [`pre_pad`]
/// convention: columns wrap modulo the raster width, rows outside are zero.
pub fn gather_patch(img: &Raster, x0: i64, y0: i64, w: usize, h: usize) -> Raster {
    let c = img.channels();
    let mut out = Raster::zeros(w, h, c);
    for y in 0..h {
        let sy = y0 + y as i64;
        if sy < 0 || sy >= img.height() as i64 {
            continue;
        }
        for x in 0..w {
            let sx = (x0 + x as i64).rem_euclid(img.width() as i64) as usize;
            for ch in 0..c {
                out.set(x, y, ch, img.get(sx, sy as usize, ch));
            }
        }
    }
    out
}

/// Tile layout: an n x n split with the remainder absorbed by the last row
/// and column.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub pad: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, n: usize, pad: usize) -> Result<Self> {
        if n == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("empty tile grid".into()));
        }
        let tile = (width / n).min(height / n);
        if tile < pad.max(1) {
            return Err(Error::RadiusExceedsTile { radius: pad, tile });
        }
        Ok(Self { n, width, height, pad })
    }

    /// Unpadded extent of tile (tx, ty): (x0, y0, w, h).
    pub fn tile_extent(&self, tx: usize, ty: usize) -> (usize, usize, usize, usize) {
        let bw = self.width / self.n;
        let bh = self.height / self.n;
        let x0 = tx * bw;
        let y0 = ty * bh;
        let w = if tx + 1 == self.n { self.width - x0 } else { bw };
        let h = if ty + 1 == self.n { self.height - y0 } else { bh };
        (x0, y0, w, h)
    }
}

/// Tiled execution of `op` over an n x n grid; bit-identical to
/// `op.apply(&pre_pad(img, r))`.
pub fn run_tiled(op: &dyn LocalOperator, img: &Raster, n: usize) -> Result<Raster> {
    let r = op.radius();
    let grid = TileGrid::new(img.width(), img.height(), n, r)?;
    let mut out = Raster::zeros(img.width(), img.height(), op.out_channels());
    let tiles: Vec<(usize, usize)> = (0..n)
        .flat_map(|ty| (0..n).map(move |tx| (tx, ty)))
        .collect();
    let results: Vec<((usize, usize, usize, usize), Raster)> = tiles
        .par_iter()
        .map(|&(tx, ty)| {
            let (x0, y0, w, h) = grid.tile_extent(tx, ty);
            let patch = gather_patch(
                img,
                x0 as i64 - r as i64,
                y0 as i64 - r as i64,
                w + 2 * r,
                h + 2 * r,
            );
            ((x0, y0, w, h), op.apply(&patch))
        })
        .collect();
    for ((x0, y0, w, h), tile_out) in results {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..op.out_channels() {
                    out.set(x0 + x, y0 + y, ch, tile_out.get(x, y, ch));
                }
            }
        }
    }
    Ok(out)
}

/// Randomized probe certifying an operator's declared receptive radius:
/// perturbing one input pixel must not move any output farther than r away
/// (Chebyshev, with column wrap).
pub fn verify_locality(op: &dyn LocalOperator, width: usize, height: usize, seed: u64) -> Result<()> {
    let r = op.radius();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Raster::zeros(width + 2 * r, height + 2 * r, op.in_channels());
    for v in base.as_mut_slice() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let out0 = op.apply(&base);
    for _ in 0..6 {
        let qx = rng.gen_range(0..width + 2 * r);
        let qy = rng.gen_range(0..height + 2 * r);
        let qc = rng.gen_range(0..op.in_channels());
        let mut probe = base.clone();
        probe.set(qx, qy, qc, probe.get(qx, qy, qc) + 0.5);
        let out1 = op.apply(&probe);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..op.out_channels() {
                    if out0.get(x, y, ch) != out1.get(x, y, ch) {
                        // output (x, y) reads padded inputs [x, x+2r] x [y, y+2r]
                        let dx = qx as i64 - (x + r) as i64;
                        let dy = qy as i64 - (y + r) as i64;
                        if dx.abs() > r as i64 || dy.abs() > r as i64 {
                            return Err(Error::LocalityViolation(format!(
                                "probe at ({qx},{qy}) moved output ({x},{y}), radius {r}"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn conv3x3_valid(input: &Raster, weights: &[f64], bias: &[f64], c_out: usize) -> Raster {
    let c_in = input.channels();
    let (w, h) = (input.width() - 2, input.height() - 2);
    let mut out = Raster::zeros(w, h, c_out);
    for y in 0..h {
        for x in 0..w {
            for o in 0..c_out {
                let mut acc = bias[o];
                for i in 0..c_in {
                    let wbase = ((o * c_in + i) * 3) * 3;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += weights[wbase + ky * 3 + kx] * input.get(x + kx, y + ky, i);
                        }
                    }
                }
                out.set(x, y, o, acc);
            }
        }
    }
    out
}

// scatter adjoint of conv3x3_valid: grad w.r.t. input, weights, bias
fn conv3x3_backward(
    input: &Raster,
    weights: &[f64],
    c_out: usize,
    grad_out: &Raster,
    grad_input: &mut Raster,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) {
    let c_in = input.channels();
    let (w, h) = (grad_out.width(), grad_out.height());
    for y in 0..h {
        for x in 0..w {
            for o in 0..c_out {
                let g = grad_out.get(x, y, o);
                grad_bias[o] += g;
                for i in 0..c_in {
                    let wbase = ((o * c_in + i) * 3) * 3;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            grad_weights[wbase + ky * 3 + kx] += g * input.get(x + kx, y + ky, i);
                            let cur = grad_input.get(x + kx, y + ky, i);
                            grad_input.set(x + kx, y + ky, i, cur + g * weights[wbase + ky * 3 + kx]);
                        }
                    }
                }
            }
        }
    }
}

/// Three stacked 3x3 cross-correlation stages with tanh between them:
/// receptive radius exactly 3, smooth in the input and in theta.
#[derive(Debug, Clone)]
pub struct ToyHead {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    theta: Vec<f64>,
}

impl ToyHead {
    pub fn theta_len(c_in: usize, c_mid: usize, c_out: usize) -> usize {
        9 * (c_in * c_mid + c_mid * c_mid + c_mid * c_out) + 2 * c_mid + c_out
    }

    pub fn new(c_in: usize, c_mid: usize, c_out: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != Self::theta_len(c_in, c_mid, c_out) {
            return Err(Error::SizeMismatch(format!(
                "toy head needs {} parameters, got {}",
                Self::theta_len(c_in, c_mid, c_out),
                theta.len()
            )));
        }
        Ok(Self { c_in, c_mid, c_out, theta })
    }

    /// Deterministically seeded parameters at conv-friendly magnitudes.
    pub fn seeded(c_in: usize, c_mid: usize, c_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::theta_len(c_in, c_mid, c_out);
        let theta = (0..n)
            .map(|_| rng.gen_range(-1.0..1.0) / (9.0 * c_mid.max(c_in) as f64).sqrt())
            .collect();
        Self { c_in, c_mid, c_out, theta }
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::SizeMismatch("theta length changed".into()));
        }
        self.theta = theta;
        Ok(())
    }

    // parameter slices: w1, b1, w2, b2, w3, b3
    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64], &[f64], &[f64]) {
        let (c_in, c_mid, c_out) = (self.c_in, self.c_mid, self.c_out);
        let mut o = 0;
        let mut take = |n: usize| {
            let s = &self.theta[o..o + n];
            o += n;
            s
        };
        (
            take(9 * c_in * c_mid),
            take(c_mid),
            take(9 * c_mid * c_mid),
            take(c_mid),
            take(9 * c_mid * c_out),
            take(c_out),
        )
    }

    fn forward_stages(&self, padded: &Raster) -> (Raster, Raster, Raster, Raster, Raster) {
        let (w1, b1, w2, b2, w3, b3) = self.split();
        let z1 = conv3x3_valid(padded, w1, b1, self.c_mid);
        let mut a1 = z1.clone();
        for v in a1.as_mut_slice() {
            *v = v.tanh();
        }
        let z2 = conv3x3_valid(&a1, w2, b2, self.c_mid);
        let mut a2 = z2.clone();
        for v in a2.as_mut_slice() {
            *v = v.tanh();
        }
        let y = conv3x3_valid(&a2, w3, b3, self.c_out);
        (z1, a1, z2, a2, y)
    }
}

impl LocalOperator for ToyHead {
    fn radius(&self) -> usize {
        3
    }

    fn in_channels(&self) -> usize {
        self.c_in
    }

    fn out_channels(&self) -> usize {
        self.c_out
    }

    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn apply(&self, padded: &Raster) -> Raster {
        self.forward_stages(padded).4
    }

    fn vjp(&self, padded: &Raster, grad_out: &Raster) -> (Raster, Vec<f64>) {
        let (w1, _b1, w2, _b2, w3, _b3) = self.split();
        let (_z1, a1, _z2, a2, _y) = self.forward_stages(padded);
        let mut grad_theta = vec![0.0; self.theta.len()];
        let (c_in, c_mid, c_out) = (self.c_in, self.c_mid, self.c_out);
        let n1 = 9 * c_in * c_mid;
        let n2 = 9 * c_mid * c_mid;
        let n3 = 9 * c_mid * c_out;
        let (gw1, rest) = grad_theta.split_at_mut(n1);
        let (gb1, rest) = rest.split_at_mut(c_mid);
        let (gw2, rest) = rest.split_at_mut(n2);
        let (gb2, rest) = rest.split_at_mut(c_mid);
        let (gw3, gb3) = rest.split_at_mut(n3);

        let mut ga2 = Raster::zeros(a2.width(), a2.height(), c_mid);
        conv3x3_backward(&a2, w3, c_out, grad_out, &mut ga2, gw3, gb3);
        // through tanh
        for (g, a) in ga2.as_mut_slice().iter_mut().zip(a2.as_slice()) {
            *g *= 1.0 - a * a;
        }
        let mut ga1 = Raster::zeros(a1.width(), a1.height(), c_mid);
        conv3x3_backward(&a1, w2, c_mid, &ga2, &mut ga1, gw2, gb2);
        for (g, a) in ga1.as_mut_slice().iter_mut().zip(a1.as_slice()) {
            *g *= 1.0 - a * a;
        }
        let mut gx = Raster::zeros(padded.width(), padded.height(), c_in);
        conv3x3_backward(padded, w1, c_mid, &ga1, &mut gx, gw1, gb1);
        (gx, grad_theta)
    }
}

/// Bilinear taps for a lattice point on a raster: positions (x * W, y * H),
/// columns wrap, rows clamp.
pub fn lattice_taps(
    pt: [f64; 2],
    width: usize,
    height: usize,
) -> ([(usize, usize); 4], [f64; 4]) {
    let u = pt[0] * width as f64;
    let v = pt[1] * height as f64;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (w, h) = (width as i64, height as i64);
    let xa = (x0 as i64).rem_euclid(w) as usize;
    let xb = (x0 as i64 + 1).rem_euclid(w) as usize;
    let ya = (y0 as i64).clamp(0, h - 1) as usize;
    let yb = (y0 as i64 + 1).clamp(0, h - 1) as usize;
    (
        [(xa, ya), (xb, ya), (xa, yb), (xb, yb)],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

/// Interpolates one feature vector per lattice point; row-major
/// `[point][channel]` output.
pub fn sample_lattice_features(raster: &Raster, lattice: &FibonacciLattice) -> Vec<f64> {
    let c = raster.channels();
    let mut out = vec![0.0; lattice.n() * c];
    for (j, &pt) in lattice.points().iter().enumerate() {
        let (taps, weights) = lattice_taps(pt, raster.width(), raster.height());
        for k in 0..4 {
            let px = raster.pixel(taps[k].0, taps[k].1);
            for ch in 0..c {
                out[j * c + ch] += weights[k] * px[ch];
            }
        }
    }
    out
}

/// Adjoint of [`sample_lattice_features`]: scatters per-point gradients back
/// onto the raster with the same bilinear weights.
pub fn scatter_lattice_grads(
    grads: &[f64],
    lattice: &FibonacciLattice,
    target: &mut Raster,
) {
    let c = target.channels();
    debug_assert_eq!(grads.len(), lattice.n() * c);
    for (j, &pt) in lattice.points().iter().enumerate() {
        let (taps, weights) = lattice_taps(pt, target.width(), target.height());
        for k in 0..4 {
            let (x, y) = taps[k];
            for ch in 0..c {
                let cur = target.get(x, y, ch);
                target.set(x, y, ch, cur + weights[k] * grads[j * c + ch]);
            }
        }
    }
}

/// Coarse-to-fine residual link: the head sees the fine inputs concatenated
/// with the 2x-upsampled coarse features and predicts a residual on top of
/// the upsampled features.
pub fn residual_chain(
    coarse: &Raster,
    head: &dyn LocalOperator,
    fine_inputs: &Raster,
) -> Result<Raster> {
    if coarse.width() * 2 != fine_inputs.width() || coarse.height() * 2 != fine_inputs.height() {
        return Err(Error::DimensionMismatch(
            "coarse features must be half the fine resolution".into(),
        ));
    }
    if head.out_channels() != coarse.channels() {
        return Err(Error::DimensionMismatch(
            "residual head must emit the coarse channel count".into(),
        ));
    }
    let up = coarse.upsample2();
    let input = fine_inputs.concat_channels(&up)?;
    if head.in_channels() != input.channels() {
        return Err(Error::DimensionMismatch(
            "head input channels must be fine + coarse".into(),
        ));
    }
    let mut out = head.apply(&pre_pad(&input, head.radius()));
    for (o, u) in out.as_mut_slice().iter_mut().zip(up.as_slice()) {
        *o += u;
    }
    Ok(out)
}
