//! On-disk formats: the PSGP Gaussian pyramid container, PFM depth maps,
//! PNG images and JSON pose lists.
//!
//! Everything numeric is little-endian f32 on disk; the engine computes in
//! f64 and converts at this boundary.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::gaussians::{sh_coeffs, Gaussian, GaussianPyramid};
use crate::geometry::{fibonacci_lattice, pyramid_counts, CameraPose};
use crate::raster::{DepthMap, ErpImage};
use crate::scene::PoseSpec;

pub const PSGP_MAGIC: &[u8; 4] = b"PSGP";
pub const PSGP_VERSION: u32 = 1;

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { format: "psgp", detail: detail.into() }
}

/// Writes a set of per-view pyramids.
///
/// Layout: magic, version, W, L, d_sh, view count, per-level counts
/// (finest first), then per view a pose (position 3xf32, quaternion wxyz
/// 4xf32) followed by level-major (finest first), lattice-ordered Gaussian
/// records: mu 3xf32, alpha f32, scale 3xf32, quaternion 4xf32, SH
/// coefficients.
pub fn write_psgp<W: Write>(out: &mut W, pyramids: &[GaussianPyramid], width: usize, d_sh: usize) -> Result<()> {
    if pyramids.is_empty() {
        return Err(Error::InvalidArgument("no pyramids to write".into()));
    }
    let levels = pyramids[0].levels.len();
    let counts = pyramid_counts(width, levels)?;
    for p in pyramids {
        if p.levels.len() != levels {
            return Err(Error::SizeMismatch("pyramids disagree on level count".into()));
        }
        for (l, lvl) in p.levels.iter().enumerate() {
            if lvl.len() != counts[l] {
                return Err(Error::SizeMismatch(format!(
                    "level {l} holds {} gaussians, lattice expects {}",
                    lvl.len(),
                    counts[l]
                )));
            }
        }
    }
    out.write_all(PSGP_MAGIC)?;
    let w32 = |out: &mut W, v: u32| -> Result<()> {
        out.write_all(&v.to_le_bytes())?;
        Ok(())
    };
    w32(out, PSGP_VERSION)?;
    w32(out, width as u32)?;
    w32(out, levels as u32)?;
    w32(out, d_sh as u32)?;
    w32(out, pyramids.len() as u32)?;
    for &c in &counts {
        w32(out, c as u32)?;
    }
    let wf = |out: &mut W, v: f64| -> Result<()> {
        out.write_all(&(v as f32).to_le_bytes())?;
        Ok(())
    };
    let n_sh = 3 * sh_coeffs(d_sh);
    for p in pyramids {
        for c in p.pose.position.iter() {
            wf(out, *c)?;
        }
        let q = p.pose.rotation.quaternion();
        for c in [q.w, q.i, q.j, q.k] {
            wf(out, c)?;
        }
        for level in &p.levels {
            for g in level {
                if g.sh.len() != n_sh {
                    return Err(Error::SizeMismatch("sh coefficient count".into()));
                }
                for c in g.center.iter() {
                    wf(out, *c)?;
                }
                wf(out, g.opacity)?;
                for c in g.scale.iter() {
                    wf(out, *c)?;
                }
                let q = g.rotation.quaternion();
                for c in [q.w, q.i, q.j, q.k] {
                    wf(out, c)?;
                }
                for &c in &g.sh {
                    wf(out, c)?;
                }
            }
        }
    }
    Ok(())
}

pub struct PsgpFile {
    pub width: usize,
    pub d_sh: usize,
    pub pyramids: Vec<GaussianPyramid>,
}

pub fn read_psgp<R: Read>(input: &mut R) -> Result<PsgpFile> {
    // a short stream is malformed data, not an I/O failure
    read_psgp_inner(input).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            fmt_err("payload truncated")
        }
        other => other,
    })
}

fn read_psgp_inner<R: Read>(input: &mut R) -> Result<PsgpFile> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != PSGP_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let r32 = |input: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = r32(input)?;
    if version != PSGP_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let width = r32(input)? as usize;
    let levels = r32(input)? as usize;
    let d_sh = r32(input)? as usize;
    let views = r32(input)? as usize;
    if levels == 0 || views == 0 || d_sh > 1 {
        return Err(fmt_err("implausible header"));
    }
    let expected = pyramid_counts(width, levels).map_err(|e| fmt_err(e.to_string()))?;
    let mut counts = Vec::with_capacity(levels);
    for _ in 0..levels {
        counts.push(r32(input)? as usize);
    }
    if counts != expected {
        return Err(fmt_err(format!(
            "per-level counts {counts:?} do not match the lattice {expected:?}"
        )));
    }
    let rf = |input: &mut R| -> Result<f64> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b) as f64)
    };
    let n_sh = 3 * sh_coeffs(d_sh);
    let mut pyramids = Vec::with_capacity(views);
    // quaternions were unit when written; keep the stored bits so the
    // write-read-write round trip is byte-exact
    for view in 0..views {
        let position = Vector3::new(rf(input)?, rf(input)?, rf(input)?);
        let rotation = UnitQuaternion::new_unchecked(Quaternion::new(
            rf(input)?,
            rf(input)?,
            rf(input)?,
            rf(input)?,
        ));
        let pose = CameraPose::new(position, rotation);
        let mut lattices = Vec::with_capacity(levels);
        let mut lvls = Vec::with_capacity(levels);
        for (l, &n) in counts.iter().enumerate() {
            let mut gaussians = Vec::with_capacity(n);
            for _ in 0..n {
                let center = Vector3::new(rf(input)?, rf(input)?, rf(input)?);
                let opacity = rf(input)?;
                let scale = Vector3::new(rf(input)?, rf(input)?, rf(input)?);
                let rotation = UnitQuaternion::new_unchecked(Quaternion::new(
                    rf(input)?,
                    rf(input)?,
                    rf(input)?,
                    rf(input)?,
                ));
                let mut sh = Vec::with_capacity(n_sh);
                for _ in 0..n_sh {
                    sh.push(rf(input)?);
                }
                gaussians.push(Gaussian { center, opacity, scale, rotation, sh });
            }
            lvls.push(gaussians);
            lattices.push(fibonacci_lattice(n, l)?);
        }
        pyramids.push(GaussianPyramid { levels: lvls, lattices, view, pose });
    }
    // the payload must end exactly where the header says
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(fmt_err("trailing bytes after payload"));
    }
    Ok(PsgpFile { width, d_sh, pyramids })
}

/// Writes a single-channel PFM (grayscale, little-endian, bottom-up rows).
pub fn write_pfm<W: Write>(out: &mut W, depth: &DepthMap) -> Result<()> {
    if depth.channels() != 1 {
        return Err(Error::InvalidArgument("pfm writer expects one channel".into()));
    }
    write!(out, "Pf\n{} {}\n-1.0\n", depth.width(), depth.height())?;
    for y in (0..depth.height()).rev() {
        for x in 0..depth.width() {
            out.write_all(&(depth.get(x, y, 0) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pfm<R: Read>(input: &mut R) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let perr = |d: &str| Error::Format { format: "pfm", detail: d.into() };
    // header: three whitespace-separated tokens
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(perr("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let kind = token()?;
    if kind != "Pf" {
        return Err(perr("only grayscale Pf supported"));
    }
    let width: usize = token()?.parse().map_err(|_| perr("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| perr("bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| perr("bad scale"))?;
    if scale >= 0.0 {
        return Err(perr("big-endian pfm unsupported"));
    }
    pos += 1; // single whitespace after the scale line
    let need = width * height * 4;
    if bytes.len() < pos + need {
        return Err(perr("payload truncated"));
    }
    let mut img = ErpImage::zeros(width, height, 1)?;
    for row in 0..height {
        let y = height - 1 - row;
        for x in 0..width {
            let o = pos + (row * width + x) * 4;
            let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            img.set(x, y, 0, v as f64);
        }
    }
    Ok(img)
}

/// Saves an image as PNG; rgb+alpha panoramas drop the alpha channel.
/// `bit16` selects 16-bit output.
pub fn save_png(path: &Path, img: &ErpImage, bit16: bool) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let to_rgb = |x: usize, y: usize| -> [f64; 3] {
        match img.channels() {
            1 => [img.get(x, y, 0); 3],
            _ => [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)],
        }
    };
    if bit16 {
        let mut buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> = image::ImageBuffer::new(w, h);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let rgb = to_rgb(x as usize, y as usize);
            *px = image::Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16));
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format { format: "png", detail: e.to_string() })?;
    } else {
        let mut buf: image::RgbImage = image::ImageBuffer::new(w, h);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let rgb = to_rgb(x as usize, y as usize);
            *px = image::Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format { format: "png", detail: e.to_string() })?;
    }
    Ok(())
}

/// Loads a PNG into a 3-channel panorama in [0, 1].
pub fn load_png(path: &Path) -> Result<ErpImage> {
    // read first so missing files surface as I/O, not as format errors
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format { format: "png", detail: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ErpImage::zeros(w, h, 3)?;
    match img {
        image::DynamicImage::ImageRgb16(buf) => {
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    out.set(x as usize, y as usize, c, px.0[c] as f64 / 65535.0);
                }
            }
        }
        other => {
            let buf = other.to_rgb8();
            for (x, y, px) in buf.enumerate_pixels() {
                for c in 0..3 {
                    out.set(x as usize, y as usize, c, px.0[c] as f64 / 255.0);
                }
            }
        }
    }
    Ok(out)
}

/// Pose list serialization: a JSON array of {position, quaternion}.
pub fn poses_to_json(poses: &[CameraPose]) -> Result<String> {
    let specs: Vec<PoseSpec> = poses.iter().map(PoseSpec::from_pose).collect();
    serde_json::to_string_pretty(&specs)
        .map_err(|e| Error::Format { format: "json", detail: e.to_string() })
}

pub fn poses_from_json(json: &str) -> Result<Vec<CameraPose>> {
    let specs: Vec<PoseSpec> = serde_json::from_str(json)
        .map_err(|e| Error::Format { format: "json", detail: e.to_string() })?;
    Ok(specs.iter().map(|s| s.to_pose()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{build_pyramid, DecodeConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_pyramids() -> (Vec<GaussianPyramid>, usize, usize) {
        let width = 16;
        let cfg = DecodeConfig::new(width, 2, 0, vec![vec![0.25, 0.5, 1.0], vec![0.5, 1.0]]);
        let counts = pyramid_counts(width, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pyramids: Vec<GaussianPyramid> = (0..2)
            .map(|view| {
                let raw: Vec<Vec<f64>> = (0..2)
                    .map(|l| {
                        (0..counts[l] * cfg.raw_len(l))
                            .map(|_| rng.gen_range(-1.0..1.0))
                            .collect()
                    })
                    .collect();
                let pose = CameraPose::at(Vector3::new(view as f64 * 0.5, 0.0, 0.0));
                build_pyramid(&raw, &pose, &cfg, view).unwrap()
            })
            .collect();
        (pyramids, width, 0)
    }

    #[test]
    fn psgp_round_trip_is_bit_exact() {
        let (pyramids, width, d_sh) = sample_pyramids();
        let mut buf = Vec::new();
        write_psgp(&mut buf, &pyramids, width, d_sh).unwrap();
        let file = read_psgp(&mut buf.as_slice()).unwrap();
        assert_eq!(file.width, width);
        assert_eq!(file.pyramids.len(), 2);
        // writing again reproduces the payload byte for byte
        let mut buf2 = Vec::new();
        write_psgp(&mut buf2, &file.pyramids, width, d_sh).unwrap();
        assert_eq!(buf, buf2);
        // values survive the f32 boundary
        for (a, b) in pyramids.iter().zip(&file.pyramids) {
            for (la, lb) in a.levels.iter().zip(&b.levels) {
                for (ga, gb) in la.iter().zip(lb) {
                    assert!((ga.opacity - gb.opacity).abs() < 1e-7);
                    assert!((ga.center - gb.center).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn psgp_rejects_malformed() {
        let (pyramids, width, d_sh) = sample_pyramids();
        let mut buf = Vec::new();
        write_psgp(&mut buf, &pyramids, width, d_sh).unwrap();
        // bad magic
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_psgp(&mut bad.as_slice()).is_err());
        // truncated payload
        let short = &buf[..buf.len() - 5];
        assert!(read_psgp(&mut &short[..]).is_err());
        // trailing garbage
        let mut long = buf.clone();
        long.push(0);
        assert!(read_psgp(&mut long.as_slice()).is_err());
        // inconsistent counts
        let mut wrong = buf.clone();
        wrong[24] = wrong[24].wrapping_add(1); // first per-level count
        assert!(read_psgp(&mut wrong.as_slice()).is_err());
    }

    #[test]
    fn pfm_round_trip_bit_exact() {
        let mut depth = ErpImage::zeros(16, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in depth.as_mut_slice() {
            *v = rng.gen_range(0.1f32..50.0) as f64; // f32-exact values
        }
        let mut buf = Vec::new();
        write_pfm(&mut buf, &depth).unwrap();
        let back = read_pfm(&mut buf.as_slice()).unwrap();
        assert_eq!(back.width(), 16);
        for (a, b) in depth.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(a, b);
        }
        let mut buf2 = Vec::new();
        write_pfm(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn poses_json_round_trip() {
        let poses = vec![
            CameraPose::at(Vector3::new(1.0, 2.0, 3.0)),
            CameraPose::new(
                Vector3::new(-0.5, 0.0, 0.25),
                UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
            ),
        ];
        let json = poses_to_json(&poses).unwrap();
        let back = poses_from_json(&json).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.position - b.position).norm() < 1e-12);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
        assert!(poses_from_json("not json").is_err());
    }
}
