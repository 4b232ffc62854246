//! Hierarchical spherical plane-sweep stereo.
//!
//! Features from one panorama are warped into the other over a sweep of
//! inverse-depth candidates, correlated by scaled dot product, and regressed
//! to depth with a softmax; coarser levels hand a narrowed per-pixel search
//! window to finer levels, and refinement is skipped at the finest level.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dir_to_pixel, pixel_to_dir, CameraPose, Direction};
use crate::raster::{DepthMap, ErpImage, Raster};

/// Feature rasters are plain channel-interleaved grids.
pub type FeatureMap = Raster;

/// Uniformly spaced inverse-depth candidates over [d_min, d_max].
///
/// Values ascend in inverse depth, i.e. depth strictly decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    inv: Vec<f64>,
    d_min: f64,
    d_max: f64,
}

impl DepthHypotheses {
    pub fn inverse_depths(&self) -> &[f64] {
        &self.inv
    }

    pub fn count(&self) -> usize {
        self.inv.len()
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }
}

pub fn make_hypotheses(d_min: f64, d_max: f64, count: usize) -> Result<DepthHypotheses> {
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(Error::InvalidArgument(format!(
            "invalid depth range [{d_min}, {d_max}]"
        )));
    }
    if count < 2 {
        return Err(Error::InvalidArgument("need at least 2 candidates".into()));
    }
    let lo = 1.0 / d_max;
    let hi = 1.0 / d_min;
    let step = (hi - lo) / (count - 1) as f64;
    Ok(DepthHypotheses {
        inv: (0..count).map(|k| lo + k as f64 * step).collect(),
        d_min,
        d_max,
    })
}

/// Candidate sets attached to a cost volume: one shared sweep at the coarsest
/// level, per-pixel windows after refinement.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeHypotheses {
    Shared(DepthHypotheses),
    PerPixel {
        count: usize,
        /// shared candidate spacing in inverse depth
        step: f64,
        /// first (smallest) inverse depth per pixel, row-major
        first: Vec<f64>,
        d_min: f64,
        d_max: f64,
    },
}

impl VolumeHypotheses {
    pub fn count(&self) -> usize {
        match self {
            VolumeHypotheses::Shared(h) => h.count(),
            VolumeHypotheses::PerPixel { count, .. } => *count,
        }
    }

    /// Inverse depth of candidate k at pixel index p.
    #[inline]
    pub fn inv(&self, p: usize, k: usize) -> f64 {
        match self {
            VolumeHypotheses::Shared(h) => h.inv[k],
            VolumeHypotheses::PerPixel { step, first, .. } => first[p] + k as f64 * *step,
        }
    }

    pub fn depth_range(&self) -> (f64, f64) {
        match self {
            VolumeHypotheses::Shared(h) => (h.d_min, h.d_max),
            VolumeHypotheses::PerPixel { d_min, d_max, .. } => (*d_min, *d_max),
        }
    }
}

/// Per-pixel correlation scores over depth candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    /// layout `(y * width + x) * count + k`
    pub scores: Vec<f64>,
    pub hypotheses: VolumeHypotheses,
}

impl CostVolume {
    pub fn candidate_count(&self) -> usize {
        self.hypotheses.count()
    }

    pub fn scores_at(&self, x: usize, y: usize) -> &[f64] {
        let d = self.candidate_count();
        let i = (y * self.width + x) * d;
        &self.scores[i..i + d]
    }
}

/// Softmax-weighted inverse-depth aggregation, the single depth-regression
/// rule shared by the cost volume and the Gaussian-head decode path.
pub fn softmax_inverse_depth(scores: &[f64], inv: &[f64]) -> f64 {
    debug_assert_eq!(scores.len(), inv.len());
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (s, iv) in scores.iter().zip(inv) {
        let e = (s - m).exp();
        z += e;
        acc += e * iv;
    }
    acc / z
}

/// Accumulates d(aggregated inverse depth)/d(score_k) * upstream into
/// `grad_scores`.
pub fn softmax_inverse_depth_backward(
    scores: &[f64],
    inv: &[f64],
    upstream: f64,
    grad_scores: &mut [f64],
) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores {
        z += (s - m).exp();
    }
    let agg = softmax_inverse_depth(scores, inv);
    for k in 0..scores.len() {
        let w = (scores[k] - m).exp() / z;
        grad_scores[k] += upstream * w * (inv[k] - agg);
    }
}

/// ERP sample position in `src` of reference pixel (u, v) hypothesized at
/// depth z: unproject along the reference ray, reproject into the source.
pub fn warp_position(
    src_pose: &CameraPose,
    ref_pose: &CameraPose,
    u: f64,
    v: f64,
    z: f64,
    width: usize,
    height: usize,
) -> (f64, f64) {
    let d = pixel_to_dir(u, v, width, height);
    let p = ref_pose.position + z * (ref_pose.rotation * d.vector());
    let local = src_pose.rotation.inverse() * (p - src_pose.position);
    let dir = Direction::from_unnormalized(local);
    dir_to_pixel(&dir, width, height)
}

/// Warps source features to the reference view at one inverse-depth
/// hypothesis (bilinear, horizontal wrap, pole rows clamp).
pub fn spherical_warp(
    src: &FeatureMap,
    src_pose: &CameraPose,
    ref_pose: &CameraPose,
    inv_depth: f64,
    width: usize,
    height: usize,
) -> FeatureMap {
    debug_assert!(inv_depth > 0.0);
    let z = 1.0 / inv_depth;
    let c = src.channels();
    let mut out = Raster::zeros(width, height, c);
    let mut px = vec![0.0; c];
    for y in 0..height {
        for x in 0..width {
            let (su, sv) = warp_position(src_pose, ref_pose, x as f64, y as f64, z, width, height);
            src.sample_wrap(su, sv, &mut px);
            for (ch, &val) in px.iter().enumerate() {
                out.set(x, y, ch, val);
            }
        }
    }
    out
}

/// Per-pixel correlation score <ref, warped> / sqrt(C).
pub fn correlate(reference: &FeatureMap, warped: &FeatureMap) -> Result<Raster> {
    if reference.width() != warped.width()
        || reference.height() != warped.height()
        || reference.channels() != warped.channels()
    {
        return Err(Error::DimensionMismatch("correlate inputs differ".into()));
    }
    let c = reference.channels();
    let norm = 1.0 / (c as f64).sqrt();
    let mut out = Raster::zeros(reference.width(), reference.height(), 1);
    for y in 0..reference.height() {
        for x in 0..reference.width() {
            let a = reference.pixel(x, y);
            let b = warped.pixel(x, y);
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            out.set(x, y, 0, dot * norm);
        }
    }
    Ok(out)
}

/// Full plane sweep: one warp + correlate per candidate.
pub fn build_volume(
    ref_feat: &FeatureMap,
    src_feat: &FeatureMap,
    ref_pose: &CameraPose,
    src_pose: &CameraPose,
    hypotheses: &DepthHypotheses,
) -> Result<CostVolume> {
    let (w, h) = (ref_feat.width(), ref_feat.height());
    if src_feat.width() != w || src_feat.height() != h || src_feat.channels() != ref_feat.channels() {
        return Err(Error::DimensionMismatch("feature maps differ".into()));
    }
    let d = hypotheses.count();
    let planes: Vec<Raster> = hypotheses
        .inv
        .par_iter()
        .map(|&inv| {
            let warped = spherical_warp(src_feat, src_pose, ref_pose, inv, w, h);
            correlate(ref_feat, &warped)
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0; w * h * d];
    for (k, plane) in planes.iter().enumerate() {
        for p in 0..w * h {
            scores[p * d + k] = plane.as_slice()[p];
        }
    }
    Ok(CostVolume {
        width: w,
        height: h,
        scores,
        hypotheses: VolumeHypotheses::Shared(hypotheses.clone()),
    })
}

/// Softmax depth regression over the candidate dimension.
pub fn softmax_depth(vol: &CostVolume) -> Result<DepthMap> {
    let d = vol.candidate_count();
    let mut out = ErpImage::zeros(vol.width, vol.height, 1)?;
    let mut inv_buf = vec![0.0; d];
    for p in 0..vol.width * vol.height {
        for k in 0..d {
            inv_buf[k] = vol.hypotheses.inv(p, k);
        }
        let agg = softmax_inverse_depth(&vol.scores[p * d..(p + 1) * d], &inv_buf);
        out.as_mut_slice()[p] = 1.0 / agg;
    }
    Ok(out)
}

/// Hook standing in for learned cost-volume refinement: returns a residual
/// added to the scores before the softmax, or `None` to leave them unchanged.
pub trait VolumeRefiner {
    fn residual(
        &self,
        vol: &CostVolume,
        coarse_depth: Option<&DepthMap>,
        ref_features: &FeatureMap,
    ) -> Option<Vec<f64>>;
}

/// Default refiner: identity.
pub struct IdentityRefiner;

impl VolumeRefiner for IdentityRefiner {
    fn residual(&self, _: &CostVolume, _: Option<&DepthMap>, _: &FeatureMap) -> Option<Vec<f64>> {
        None
    }
}

/// Deterministic stand-in for learned cost-volume refinement: spatial
/// aggregation of each candidate plane over a (2r+1)^2 window (columns wrap,
/// rows clamp), the classical cost-volume filtering move that a trained 2D
/// U-Net subsumes. Emitted as a residual so it plugs into the same hook.
pub struct BoxFilterRefiner {
    pub radius: usize,
}

impl VolumeRefiner for BoxFilterRefiner {
    fn residual(&self, vol: &CostVolume, _: Option<&DepthMap>, _: &FeatureMap) -> Option<Vec<f64>> {
        let (w, h) = (vol.width, vol.height);
        let d = vol.candidate_count();
        let r = self.radius as i64;
        let inv_count = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f64;
        let mut residual = vec![0.0; vol.scores.len()];
        residual
            .chunks_mut(w * d)
            .enumerate()
            .par_bridge()
            .for_each(|(y, row)| {
                for x in 0..w {
                    for k in 0..d {
                        let mut acc = 0.0;
                        for dy in -r..=r {
                            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            for dx in -r..=r {
                                let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                                acc += vol.scores[(sy * w + sx) * d + k];
                            }
                        }
                        row[x * d + k] = acc * inv_count - vol.scores[(y * w + x) * d + k];
                    }
                }
            });
        Some(residual)
    }
}

fn apply_refiner(
    vol: &mut CostVolume,
    refiner: &dyn VolumeRefiner,
    coarse: Option<&DepthMap>,
    ref_feat: &FeatureMap,
) -> Result<()> {
    if let Some(res) = refiner.residual(vol, coarse, ref_feat) {
        if res.len() != vol.scores.len() {
            return Err(Error::SizeMismatch("refiner residual size".into()));
        }
        for (s, r) in vol.scores.iter_mut().zip(&res) {
            *s += r;
        }
    }
    Ok(())
}

/// Volume construction parameters. The candidate count applies to the
/// coarsest level (l = 3); refinement uses D / 2^(3-l).
#[derive(Debug, Clone)]
pub struct VolumeConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub coarse_candidates: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self { d_min: 0.1, d_max: 100.0, coarse_candidates: 128 }
    }
}

/// Narrowed sweep at level l (1 or 2) around an upsampled coarser depth map.
///
/// The per-pixel window spans (1/d_min - 1/d_max) / 2^(3-l) in inverse depth
/// with D / 2^(3-l) candidates, clamped to stay inside the global range.
pub fn refine_level(
    coarse: &DepthMap,
    ref_feat: &FeatureMap,
    src_feat: &FeatureMap,
    ref_pose: &CameraPose,
    src_pose: &CameraPose,
    level: usize,
    cfg: &VolumeConfig,
    refiner: &dyn VolumeRefiner,
) -> Result<(CostVolume, DepthMap)> {
    if !(level == 1 || level == 2) {
        return Err(Error::InvalidArgument(format!(
            "refine_level handles levels 1 and 2, got {level}"
        )));
    }
    let (w, h) = (ref_feat.width(), ref_feat.height());
    if coarse.width() * 2 != w || coarse.height() * 2 != h {
        return Err(Error::DimensionMismatch(
            "coarse depth must be half the refined resolution".into(),
        ));
    }
    let shrink = 1 << (3 - level);
    let count = cfg.coarse_candidates / shrink;
    if count < 2 {
        return Err(Error::InvalidArgument("too few refined candidates".into()));
    }
    let inv_lo = 1.0 / cfg.d_max;
    let inv_hi = 1.0 / cfg.d_min;
    let window = (inv_hi - inv_lo) / shrink as f64;
    let step = window / (count - 1) as f64;

    // upsample coarse *inverse* depth bilinearly to the refined grid
    let mut inv_coarse = Raster::zeros(coarse.width(), coarse.height(), 1);
    for (o, &d) in inv_coarse_zip(&mut inv_coarse, coarse) {
        *o = 1.0 / d;
    }
    let inv_up = inv_coarse.upsample2();

    let mut first = vec![0.0; w * h];
    for p in 0..w * h {
        let center = inv_up.as_slice()[p];
        first[p] = (center - window / 2.0).clamp(inv_lo, inv_hi - window);
    }

    // sweep: candidate k warps each pixel at its own window depth
    let c = ref_feat.channels();
    let norm = 1.0 / (c as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * count];
            let mut px = vec![0.0; c];
            for x in 0..w {
                let p = y * w + x;
                for k in 0..count {
                    let inv = first[p] + k as f64 * step;
                    let (su, sv) =
                        warp_position(src_pose, ref_pose, x as f64, y as f64, 1.0 / inv, w, h);
                    src_feat.sample_wrap(su, sv, &mut px);
                    let dot: f64 = ref_feat.pixel(x, y).iter().zip(&px).map(|(a, b)| a * b).sum();
                    row[x * count + k] = dot * norm;
                }
            }
            row
        })
        .collect();
    let mut scores = vec![0.0; w * h * count];
    for (y, row) in rows.into_iter().enumerate() {
        scores[y * w * count..(y + 1) * w * count].copy_from_slice(&row);
    }
    let mut vol = CostVolume {
        width: w,
        height: h,
        scores,
        hypotheses: VolumeHypotheses::PerPixel {
            count,
            step,
            first,
            d_min: cfg.d_min,
            d_max: cfg.d_max,
        },
    };
    apply_refiner(&mut vol, refiner, Some(coarse), ref_feat)?;
    let depth = softmax_depth(&vol)?;
    Ok((vol, depth))
}

fn inv_coarse_zip<'a>(
    out: &'a mut Raster,
    coarse: &'a DepthMap,
) -> impl Iterator<Item = (&'a mut f64, &'a f64)> {
    out.as_mut_slice().iter_mut().zip(coarse.as_slice())
}

/// Depth predictions for one view at levels 3, 2, 1 plus the finest volume.
#[derive(Debug, Clone)]
pub struct ViewDepths {
    pub d3: DepthMap,
    pub d2: DepthMap,
    pub d1: DepthMap,
    pub vol1: CostVolume,
}

impl ViewDepths {
    pub fn at_level(&self, level: usize) -> &DepthMap {
        match level {
            1 => &self.d1,
            2 => &self.d2,
            3 => &self.d3,
            _ => panic!("hierarchical depth covers levels 1..=3"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HierarchicalDepth {
    pub views: Vec<ViewDepths>,
    /// set when the baseline is too short for parallax
    pub degenerate: bool,
}

/// Full hierarchy for a stereo pair: coarse sweep at level 3, refinement at
/// 2 and 1, refinement skipped at the finest level 0.
///
/// `features[i]` holds view i's pyramid with at least 4 levels (index = level).
pub fn hierarchical_depth(
    features: &[Vec<FeatureMap>; 2],
    poses: &[CameraPose; 2],
    cfg: &VolumeConfig,
    refiner: &dyn VolumeRefiner,
) -> Result<HierarchicalDepth> {
    for f in features {
        if f.len() < 4 {
            return Err(Error::InvalidArgument(
                "need feature levels up to l = 3".into(),
            ));
        }
    }
    let baseline = (poses[0].position - poses[1].position).norm();
    let degenerate = baseline < 1e-9;
    let coarse_hyp = make_hypotheses(cfg.d_min, cfg.d_max, cfg.coarse_candidates)?;
    let mut views = Vec::with_capacity(2);
    for i in 0..2 {
        let j = 1 - i;
        let mut vol3 = build_volume(&features[i][3], &features[j][3], &poses[i], &poses[j], &coarse_hyp)?;
        apply_refiner(&mut vol3, refiner, None, &features[i][3])?;
        let d3 = softmax_depth(&vol3)?;
        let (_, d2) = refine_level(
            &d3, &features[i][2], &features[j][2], &poses[i], &poses[j], 2, cfg, refiner,
        )?;
        let (vol1, d1) = refine_level(
            &d2, &features[i][1], &features[j][1], &poses[i], &poses[j], 1, cfg, refiner,
        )?;
        views.push(ViewDepths { d3, d2, d1, vol1 });
    }
    Ok(HierarchicalDepth { views, degenerate })
}

/// Deterministic built-in feature provider: raw channels plus 3x3 local mean
/// and standard deviation per channel (horizontal wrap, vertical clamp).
///
/// Channels are standardized to zero mean and unit variance over the level
/// and each pixel's vector is scaled to norm sqrt(C), so the dot-product
/// correlation behaves as a cosine score with |score| <= sqrt(C) — the
/// magnitude convention learned matching features settle into. Global
/// statistics are invariant under horizontal rotation, so the provider stays
/// translation-covariant on the ERP grid modulo wrap.
pub struct LocalStatsFeatures;

impl LocalStatsFeatures {
    /// Features for `img` downsampled to pyramid `level`.
    pub fn features(&self, img: &ErpImage, level: usize) -> Result<FeatureMap> {
        let mut base: Raster = img.raster().clone();
        for _ in 0..level {
            base = base.downsample2()?;
        }
        let mut f = local_stats(&base);
        standardize_channels(&mut f);
        normalize_pixels(&mut f);
        Ok(f)
    }
}

fn normalize_pixels(f: &mut Raster) {
    let (w, h, c) = (f.width(), f.height(), f.channels());
    let target = (c as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let norm: f64 = (0..c).map(|ch| f.get(x, y, ch).powi(2)).sum::<f64>().sqrt();
            let scale = target / norm.max(1e-9);
            for ch in 0..c {
                let v = f.get(x, y, ch) * scale;
                f.set(x, y, ch, v);
            }
        }
    }
}

/// Image-patch feature provider: each pixel's feature vector is its
/// (2r+1)^2 rgb neighborhood, mean-centered per color and normalized to
/// norm sqrt(C), so the dot-product correlation is a zero-mean normalized
/// cross-correlation with decisive logits (|score| up to sqrt(C)).
///
/// Heavier than [`LocalStatsFeatures`] but far more discriminative; this is
/// the provider the synthetic depth oracles use.
pub struct PatchFeatures {
    pub radius: usize,
    /// feature norm multiplier: correlation logits scale with its square
    pub contrast: f64,
}

impl Default for PatchFeatures {
    fn default() -> Self {
        Self { radius: 2, contrast: 1.0 }
    }
}

impl PatchFeatures {
    pub fn features(&self, img: &ErpImage, level: usize) -> Result<FeatureMap> {
        let mut base: Raster = img.raster().clone();
        for _ in 0..level {
            base = base.downsample2()?;
        }
        let r = self.radius as i64;
        let side = (2 * self.radius + 1) as i64;
        let (w, h, c) = (base.width(), base.height(), base.channels());
        let cc = (side * side) as usize * c;
        let mut out = Raster::zeros(w, h, cc);
        let target = (cc as f64).sqrt() * self.contrast;
        let mut patch = vec![0.0; cc];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x + dx).rem_euclid(w as i64) as usize;
                        let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                        for ch in 0..c {
                            patch[k] = base.get(sx, sy, ch);
                            k += 1;
                        }
                    }
                }
                // per-color zero mean over the window
                for ch in 0..c {
                    let mut mean = 0.0;
                    let mut i = ch;
                    while i < cc {
                        mean += patch[i];
                        i += c;
                    }
                    mean /= (side * side) as f64;
                    let mut i = ch;
                    while i < cc {
                        patch[i] -= mean;
                        i += c;
                    }
                }
                let norm: f64 = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = target / norm.max(1e-9);
                for (ch, &v) in patch.iter().enumerate() {
                    out.set(x as usize, y as usize, ch, v * scale);
                }
            }
        }
        Ok(out)
    }
}

fn standardize_channels(f: &mut Raster) {
    let (w, h, c) = (f.width(), f.height(), f.channels());
    let n = (w * h) as f64;
    for ch in 0..c {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += f.get(x, y, ch);
            }
        }
        mean /= n;
        let mut var = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = f.get(x, y, ch) - mean;
                var += d * d;
            }
        }
        let inv_std = 1.0 / (var / n).sqrt().max(1e-9);
        for y in 0..h {
            for x in 0..w {
                let v = (f.get(x, y, ch) - mean) * inv_std;
                f.set(x, y, ch, v);
            }
        }
    }
}

fn local_stats(base: &Raster) -> Raster {
    let (w, h, c) = (base.width(), base.height(), base.channels());
    let mut out = Raster::zeros(w, h, 3 * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sum2 = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let v = base.get(sx, sy, ch);
                        sum += v;
                        sum2 += v * v;
                    }
                }
                let mean = sum / 9.0;
                let var = (sum2 / 9.0 - mean * mean).max(0.0);
                out.set(x, y, ch, base.get(x, y, ch));
                out.set(x, y, c + ch, mean);
                out.set(x, y, 2 * c + ch, var.sqrt());
            }
        }
    }
    out
}
