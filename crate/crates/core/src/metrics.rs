//! Deferred blending, panorama-aware image metrics and the training loss
//! formulas.

use crate::error::{Error, Result};
use crate::geometry::ws_weights;
use crate::raster::{DepthMap, ErpImage, Raster};

/// Loss weighting: gamma decays per-level terms, lambda scales the
/// perceptual plugin, alpha scales depth supervision.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.9, lambda: 0.1, alpha: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument("gamma must be in (0, 1]".into()));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::InvalidArgument("lambda, alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Perceptual-metric hook; the default plugin returns zero (the learned
/// metric itself is out of scope).
pub trait PerceptualMetric {
    fn eval(&self, a: &ErpImage, b: &ErpImage) -> f64;
}

pub struct ZeroPerceptual;

impl PerceptualMetric for ZeroPerceptual {
    fn eval(&self, _: &ErpImage, _: &ErpImage) -> f64 {
        0.0
    }
}

/// Distance-weighted blend of two per-view renders:
/// (d1 * i0 + d0 * i1) / (d0 + d1), so the nearer view dominates.
pub fn deferred_blend(i0: &ErpImage, i1: &ErpImage, d0: f64, d1: f64) -> Result<ErpImage> {
    if i0.width() != i1.width() || i0.height() != i1.height() || i0.channels() != i1.channels() {
        return Err(Error::DimensionMismatch("blend inputs differ".into()));
    }
    if d0 < 0.0 || d1 < 0.0 || d0 + d1 == 0.0 {
        return Err(Error::InvalidArgument(
            "blend distances must be non-negative and not both zero".into(),
        ));
    }
    let w0 = d1 / (d0 + d1);
    let w1 = d0 / (d0 + d1);
    let mut out = i0.clone();
    for (o, (&a, &b)) in out
        .as_mut_slice()
        .iter_mut()
        .zip(i0.as_slice().iter().zip(i1.as_slice()))
    {
        *o = w0 * a + w1 * b;
    }
    Ok(out)
}

fn check_same_dims(a: &Raster, b: &Raster) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(Error::DimensionMismatch("metric inputs differ".into()));
    }
    Ok(())
}

pub fn mse(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    check_same_dims(a, b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.as_slice().len() as f64)
}

/// Peak signal-to-noise ratio for images in [0, 1]; +inf for identical
/// inputs.
pub fn psnr(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// PSNR with squared errors weighted by the spherical pixel-density weights
/// cos(latitude), normalized by the weight sum.
pub fn ws_psnr(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    check_same_dims(a, b)?;
    let weights = ws_weights(a.width(), a.height())?;
    let c = a.channels();
    let mut num = 0.0;
    let mut den = 0.0;
    for v in 0..a.height() {
        for u in 0..a.width() {
            let w = weights.get(u, v, 0);
            for ch in 0..c {
                let e = a.get(u, v, ch) - b.get(u, v, ch);
                num += w * e * e;
            }
            den += w * c as f64;
        }
    }
    let m = num / den;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - (SSIM_WINDOW as f64 - 1.0) / 2.0;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

// separable valid Gaussian filter over one channel
fn gauss_filter(img: &ErpImage, channel: usize, kernel: &[f64; SSIM_WINDOW]) -> Raster {
    let (w, h) = (img.width(), img.height());
    let mut horiz = Raster::zeros(w - SSIM_WINDOW + 1, h, 1);
    for y in 0..h {
        for x in 0..horiz.width() {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * img.get(x + k, y, channel);
            }
            horiz.set(x, y, 0, acc);
        }
    }
    let mut out = Raster::zeros(horiz.width(), h - SSIM_WINDOW + 1, 1);
    for y in 0..out.height() {
        for x in 0..out.width() {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * horiz.get(x, y + k, 0);
            }
            out.set(x, y, 0, acc);
        }
    }
    out
}

/// Structural similarity over the valid (fully-inside-window) region with
/// the standard 11x11 Gaussian window (sigma 1.5, K1 = 0.01, K2 = 0.03,
/// L = 1); channels scored independently and averaged.
pub fn ssim(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    check_same_dims(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument("image smaller than the SSIM window".into()));
    }
    let kernel = ssim_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let mu_a = gauss_filter(a, ch, &kernel);
        let mu_b = gauss_filter(b, ch, &kernel);
        // second moments, filtered
        let mut aa = a.clone();
        let mut bb = b.clone();
        let mut ab = a.clone();
        for i in 0..a.as_slice().len() {
            aa.as_mut_slice()[i] = a.as_slice()[i] * a.as_slice()[i];
            bb.as_mut_slice()[i] = b.as_slice()[i] * b.as_slice()[i];
            ab.as_mut_slice()[i] = a.as_slice()[i] * b.as_slice()[i];
        }
        let m_aa = gauss_filter(&aa, ch, &kernel);
        let m_bb = gauss_filter(&bb, ch, &kernel);
        let m_ab = gauss_filter(&ab, ch, &kernel);
        let mut acc = 0.0;
        let n = m_aa.as_slice().len();
        for i in 0..n {
            let (ma, mb) = (mu_a.as_slice()[i], mu_b.as_slice()[i]);
            let va = m_aa.as_slice()[i] - ma * ma;
            let vb = m_bb.as_slice()[i] - mb * mb;
            let cov = m_ab.as_slice()[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// L1 depth supervision over hierarchy levels 1..=3:
/// sum over views and levels of gamma^(l-1) * mean |pred - gt|.
pub fn depth_loss(
    preds: &[Vec<&DepthMap>],
    gts: &[Vec<&DepthMap>],
    gamma: f64,
) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch("view counts differ".into()));
    }
    let mut total = 0.0;
    for (pv, gv) in preds.iter().zip(gts) {
        if pv.len() != gv.len() {
            return Err(Error::DimensionMismatch("level counts differ".into()));
        }
        for (l, (p, g)) in pv.iter().zip(gv.iter()).enumerate() {
            check_same_dims(p, g)?;
            let mae: f64 = p
                .as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / p.as_slice().len() as f64;
            total += gamma.powi(l as i32) * mae;
        }
    }
    Ok(total)
}

/// Image loss: mean squared error plus lambda times the perceptual plugin.
pub fn rgb_loss(
    rendered: &ErpImage,
    target: &ErpImage,
    cfg: &LossConfig,
    perceptual: &dyn PerceptualMetric,
) -> Result<f64> {
    Ok(mse(rendered, target)? + cfg.lambda * perceptual.eval(rendered, target))
}

/// Synthetic-data objective: alpha * depth + rgb.
pub fn combined_loss_synthetic(depth: f64, rgb: f64, cfg: &LossConfig) -> f64 {
    cfg.alpha * depth + rgb
}

/// Real-data objective: per-level auxiliary renders weighted by
/// gamma^(l-1) plus the main render term.
pub fn combined_loss_real(
    level_renders: &[&ErpImage],
    main_render: &ErpImage,
    target: &ErpImage,
    cfg: &LossConfig,
    perceptual: &dyn PerceptualMetric,
) -> Result<f64> {
    if level_renders.len() != 3 {
        return Err(Error::InvalidArgument(
            "real mode needs auxiliary renders for levels 1..=3".into(),
        ));
    }
    let mut total = rgb_loss(main_render, target, cfg, perceptual)?;
    for (l, img) in level_renders.iter().enumerate() {
        total += cfg.gamma.powi(l as i32) * rgb_loss(img, target, cfg, perceptual)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(w: usize, h: usize, c: usize, v: f64) -> ErpImage {
        let mut img = ErpImage::zeros(w, h, c).unwrap();
        img.fill(v);
        img
    }

    fn random_img(w: usize, h: usize, c: usize, seed: u64) -> ErpImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ErpImage::zeros(w, h, c).unwrap();
        for v in img.as_mut_slice() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn blend_formula() {
        let i0 = constant(8, 4, 3, 0.2);
        let i1 = constant(8, 4, 3, 0.6);
        // d0 = 0: target sits at view 0
        let out = deferred_blend(&i0, &i1, 0.0, 2.0).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.2));
        // equal distances: average
        let out = deferred_blend(&i0, &i1, 1.0, 1.0).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        // hand value
        let out = deferred_blend(&i0, &i1, 1.0, 3.0).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(deferred_blend(&i0, &i1, 0.0, 0.0).is_err());
    }

    #[test]
    fn blend_stays_in_envelope() {
        let a = random_img(16, 8, 3, 1);
        let b = random_img(16, 8, 3, 2);
        let out = deferred_blend(&a, &b, 0.7, 1.3).unwrap();
        for i in 0..out.as_slice().len() {
            let lo = a.as_slice()[i].min(b.as_slice()[i]);
            let hi = a.as_slice()[i].max(b.as_slice()[i]);
            assert!(out.as_slice()[i] >= lo - 1e-12 && out.as_slice()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn psnr_values() {
        let a = constant(16, 8, 1, 0.5);
        let b = constant(16, 8, 1, 0.6);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        // uniform error: WS-PSNR equals PSNR (weights cancel)
        assert_abs_diff_eq!(ws_psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ws_psnr_downweights_poles() {
        let a = constant(32, 16, 1, 0.5);
        let mut pole_err = a.clone();
        let mut eq_err = a.clone();
        for u in 0..32 {
            pole_err.set(u, 0, 0, 0.9);
            eq_err.set(u, 8, 0, 0.9);
        }
        let ws_pole = ws_psnr(&a, &pole_err).unwrap();
        let p_pole = psnr(&a, &pole_err).unwrap();
        assert!(ws_pole > p_pole, "pole errors should matter less under ws");
        assert!(ws_psnr(&a, &eq_err).unwrap() < psnr(&a, &eq_err).unwrap());
    }

    #[test]
    fn metrics_match_naive_double_loop() {
        let a = random_img(32, 16, 3, 5);
        let b = random_img(32, 16, 3, 6);
        // naive MSE
        let mut acc = 0.0;
        let mut n = 0.0;
        for v in 0..16 {
            for u in 0..32 {
                for c in 0..3 {
                    let e = a.get(u, v, c) - b.get(u, v, c);
                    acc += e * e;
                    n += 1.0;
                }
            }
        }
        let naive_psnr = 10.0 * (1.0 / (acc / n)).log10();
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), naive_psnr, epsilon = 1e-9);
        // naive weighted
        let w = crate::geometry::ws_weights(32, 16).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for v in 0..16 {
            for u in 0..32 {
                for c in 0..3 {
                    let e = a.get(u, v, c) - b.get(u, v, c);
                    num += w.get(u, v, 0) * e * e;
                    den += w.get(u, v, 0);
                }
            }
        }
        let naive_ws = 10.0 * (den / num).log10();
        assert_abs_diff_eq!(ws_psnr(&a, &b).unwrap(), naive_ws, epsilon = 1e-9);
        // symmetry
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(ws_psnr(&a, &b).unwrap(), ws_psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = random_img(32, 16, 1, 9);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let mut neg = a.clone();
        for v in neg.as_mut_slice() {
            *v = 1.0 - *v;
        }
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        let b = random_img(32, 16, 1, 10);
        let s = ssim(&a, &b).unwrap();
        assert!(s > -1.0 && s < 1.0);
    }

    /// Independent windowed reference: direct per-window weighted moments,
    /// no separable filtering.
    fn ssim_reference(a: &ErpImage, b: &ErpImage) -> f64 {
        let kernel = ssim_kernel();
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        for ch in 0..a.channels() {
            let mut acc = 0.0;
            let mut count = 0.0;
            for y0 in 0..a.height() - SSIM_WINDOW + 1 {
                for x0 in 0..a.width() - SSIM_WINDOW + 1 {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let w = kernel[dy] * kernel[dx];
                            let va = a.get(x0 + dx, y0 + dy, ch);
                            let vb = b.get(x0 + dx, y0 + dy, ch);
                            ma += w * va;
                            mb += w * vb;
                            maa += w * va * va;
                            mbb += w * vb * vb;
                            mab += w * va * vb;
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
        total / a.channels() as f64
    }

    #[test]
    fn ssim_matches_windowed_reference() {
        for seed in 0..5 {
            let a = random_img(24, 12, 1, 100 + seed);
            let b = random_img(24, 12, 1, 200 + seed);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b);
            assert!((fast - slow).abs() < 1e-4, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn depth_loss_values() {
        let cfg = LossConfig::default();
        let mk = |v: f64| {
            let mut d = ErpImage::zeros(8, 4, 1).unwrap();
            d.fill(v);
            d
        };
        let (p1, p2, p3) = (mk(1.1), mk(2.2), mk(3.3));
        let (g1, g2, g3) = (mk(1.0), mk(2.0), mk(3.0));
        // identical inputs
        assert_eq!(
            depth_loss(&[vec![&g1, &g2, &g3]], &[vec![&g1, &g2, &g3]], cfg.gamma).unwrap(),
            0.0
        );
        // single view, single level, constant error
        let single = depth_loss(&[vec![&p1]], &[vec![&g1]], cfg.gamma).unwrap();
        assert_abs_diff_eq!(single, 0.1, epsilon = 1e-12);
        // two views, errors (0.1, 0.2, 0.3): 2 * (0.1 + 0.9*0.2 + 0.81*0.3)
        let preds = vec![vec![&p1, &p2, &p3], vec![&p1, &p2, &p3]];
        let gts = vec![vec![&g1, &g2, &g3], vec![&g1, &g2, &g3]];
        assert_abs_diff_eq!(depth_loss(&preds, &gts, 0.9).unwrap(), 1.046, epsilon = 1e-9);
    }

    struct UnitPerceptual;
    impl PerceptualMetric for UnitPerceptual {
        fn eval(&self, _: &ErpImage, _: &ErpImage) -> f64 {
            1.0
        }
    }

    #[test]
    fn rgb_and_combined_losses() {
        let cfg = LossConfig::default();
        let a = constant(8, 4, 3, 0.5);
        let b = constant(8, 4, 3, 0.6);
        assert_eq!(rgb_loss(&a, &a, &cfg, &ZeroPerceptual).unwrap(), 0.0);
        assert_abs_diff_eq!(
            rgb_loss(&a, &b, &cfg, &ZeroPerceptual).unwrap(),
            0.01,
            epsilon = 1e-12
        );
        // plugin contributes lambda * value
        assert_abs_diff_eq!(
            rgb_loss(&a, &a, &cfg, &UnitPerceptual).unwrap(),
            0.1,
            epsilon = 1e-15
        );
        // synthetic combination
        assert_abs_diff_eq!(combined_loss_synthetic(2.0, 0.5, &cfg), 0.6, epsilon = 1e-12);
        // real combination with all terms equal v: v * (1 + 0.9 + 0.81) + v
        let v = rgb_loss(&a, &b, &cfg, &ZeroPerceptual).unwrap();
        let real =
            combined_loss_real(&[&a, &a, &a], &a, &b, &cfg, &ZeroPerceptual).unwrap();
        assert_abs_diff_eq!(real, 3.71 * v, epsilon = 1e-9);
        assert!(combined_loss_real(&[&a, &a], &a, &b, &cfg, &ZeroPerceptual).is_err());
    }

    #[test]
    fn losses_nonnegative_zero_iff_match() {
        let a = random_img(16, 8, 3, 31);
        let b = random_img(16, 8, 3, 32);
        let cfg = LossConfig::default();
        assert!(rgb_loss(&a, &b, &cfg, &ZeroPerceptual).unwrap() > 0.0);
        assert_eq!(rgb_loss(&a, &a, &cfg, &ZeroPerceptual).unwrap(), 0.0);
    }
}
