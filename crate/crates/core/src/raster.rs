//! Raster containers: generic channel-interleaved grids and ERP panoramas.

use crate::error::{Error, Result};
use crate::mem::TrackedVec;

/// Row-major, channel-interleaved floating-point raster.
///
/// Index layout is `(y * width + x) * channels + c`, so all channels of a
/// pixel are contiguous (bilinear taps touch one cache line per corner).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: TrackedVec,
}

impl Raster {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: TrackedVec::zeros(width * height * channels),
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::SizeMismatch(format!(
                "raster {}x{}x{} needs {} samples, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: TrackedVec::from_vec(data),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.as_mut_slice().fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample with horizontal wrap and vertical clamp, the spherical
    /// raster convention used throughout: integer coordinates are pixel
    /// centers, rows clamp at the poles, columns wrap.
    pub fn sample_wrap(&self, u: f64, v: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let w = self.width as isize;
        let h = self.height as isize;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        let xa = x0.rem_euclid(w) as usize;
        let xb = (x0 + 1).rem_euclid(w) as usize;
        let ya = y0.clamp(0, h - 1) as usize;
        let yb = (y0 + 1).clamp(0, h - 1) as usize;
        let p00 = self.pixel(xa, ya);
        let p10 = self.pixel(xb, ya);
        let p01 = self.pixel(xa, yb);
        let p11 = self.pixel(xb, yb);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for c in 0..self.channels {
            out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
        }
    }

    /// 2x2 box-mean downsample; dimensions must be even.
    pub fn downsample2(&self) -> Result<Self> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "downsample2 needs even dims, got {}x{}",
                self.width, self.height
            )));
        }
        let (w, h, c) = (self.width / 2, self.height / 2, self.channels);
        let mut out = Raster::zeros(w, h, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let s = self.get(2 * x, 2 * y, ch)
                        + self.get(2 * x + 1, 2 * y, ch)
                        + self.get(2 * x, 2 * y + 1, ch)
                        + self.get(2 * x + 1, 2 * y + 1, ch);
                    out.set(x, y, ch, 0.25 * s);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear 2x upsample (align_corners = false), horizontal wrap and
    /// vertical clamp like [`Raster::sample_wrap`].
    pub fn upsample2(&self) -> Self {
        let (w, h, c) = (self.width * 2, self.height * 2, self.channels);
        let mut out = Raster::zeros(w, h, c);
        let mut px = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                let su = (x as f64 + 0.5) / 2.0 - 0.5;
                let sv = (y as f64 + 0.5) / 2.0 - 0.5;
                self.sample_wrap(su, sv, &mut px);
                for (ch, &v) in px.iter().enumerate() {
                    out.set(x, y, ch, v);
                }
            }
        }
        out
    }

    /// Concatenate channels of two equally-sized rasters.
    pub fn concat_channels(&self, other: &Raster) -> Result<Self> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                "concat_channels dims differ".into(),
            ));
        }
        let c = self.channels + other.channels;
        let mut out = Raster::zeros(self.width, self.height, c);
        for y in 0..self.height {
            for x in 0..self.width {
                let dst = out.idx(x, y, 0);
                out.as_mut_slice()[dst..dst + self.channels].copy_from_slice(self.pixel(x, y));
                out.as_mut_slice()[dst + self.channels..dst + c].copy_from_slice(other.pixel(x, y));
            }
        }
        Ok(out)
    }

    /// Copy of channels `c0..c1`.
    pub fn channel_range(&self, c0: usize, c1: usize) -> Result<Self> {
        if c1 > self.channels || c0 >= c1 {
            return Err(Error::InvalidArgument(format!(
                "channel range {}..{} of {}",
                c0, c1, self.channels
            )));
        }
        let mut out = Raster::zeros(self.width, self.height, c1 - c0);
        for y in 0..self.height {
            for x in 0..self.width {
                for (dc, sc) in (c0..c1).enumerate() {
                    out.set(x, y, dc, self.get(x, y, sc));
                }
            }
        }
        Ok(out)
    }
}

/// Equirectangular panorama: a [`Raster`] with the 2:1 invariant enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage(Raster);

impl ErpImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::from_raster(Raster::zeros(width, height, channels))
    }

    pub fn from_raster(raster: Raster) -> Result<Self> {
        if raster.width() != 2 * raster.height() || raster.width() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "ERP image must be 2:1, got {}x{}",
                raster.width(),
                raster.height()
            )));
        }
        Ok(Self(raster))
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_raster(Raster::from_vec(width, height, channels, data)?)
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn raster_mut(&mut self) -> &mut Raster {
        &mut self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }
}

impl std::ops::Deref for ErpImage {
    type Target = Raster;
    fn deref(&self) -> &Raster {
        &self.0
    }
}

impl std::ops::DerefMut for ErpImage {
    fn deref_mut(&mut self) -> &mut Raster {
        &mut self.0
    }
}

/// Depth maps are single-channel ERP rasters holding meters.
pub type DepthMap = ErpImage;
