//! Two-step deferred backpropagation.
//!
//! The pipeline head -> decode -> render is differentiated in pieces to bound
//! peak memory: a tape-free forward renders the panorama, the image-loss
//! gradient is cached, step one re-renders face by face accumulating
//! gradients to the Gaussian parameters, and step two re-generates the
//! Gaussians tile by tile accumulating gradients to the head parameters.
//! A full-tape monolithic adjoint serves as the equivalence oracle, and every
//! transient buffer is accounted through [`crate::mem`].

use std::sync::Arc;

use crate::cubemap::{stitch_tap, FaceKey};
use crate::error::{Error, Result};
use crate::gaussians::{
    build_pyramid, consolidate, decode_gaussian_backward, DecodeConfig, Gaussian, GaussianGrads,
    GaussianPyramid, RawHeadOutput,
};
use crate::geometry::{fibonacci_lattice, pyramid_counts, CameraPose, FibonacciLattice};
use crate::mem::{with_counter, MemCounter, MemGuard};
use crate::raster::{ErpImage, Raster};
use crate::render::{
    accumulate_face_backward, project_face, rasterize_face, render_backward, render_pano,
    RenderConfig, RenderTape,
};
use crate::tiling::{
    gather_patch, lattice_taps, pre_pad, sample_lattice_features, verify_locality, LocalOperator,
    TileGrid, ToyHead,
};
use crate::cost_volume::{softmax_inverse_depth, softmax_inverse_depth_backward};

/// Everything the scheduler needs to run the toy pipeline end to end.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub width: usize,
    pub levels: usize,
    /// tiles per side for step two
    pub tiles: usize,
    /// one head per level, shared across views; input channels must match
    /// the image channels and output channels the raw record length
    pub heads: Vec<ToyHead>,
    pub decode: DecodeConfig,
    pub render: RenderConfig,
    pub poses: Vec<CameraPose>,
    pub target_pose: CameraPose,
    /// depth-supervision weight (alpha); zero disables the term
    pub depth_weight: f64,
    /// per-level decay (gamma) for depth supervision
    pub depth_gamma: f64,
    /// per-Gaussian target depths, `[view][level][gaussian]`
    pub depth_targets: Option<Vec<Vec<Vec<f64>>>>,
}

impl PipelineSpec {
    /// Checks internal consistency and certifies each head's declared
    /// radius with the locality probe; uncertified operators are rejected.
    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.levels {
            return Err(Error::SizeMismatch("one head per level required".into()));
        }
        if self.decode.width != self.width || self.render.width != self.width {
            return Err(Error::DimensionMismatch("config widths disagree".into()));
        }
        if self.decode.levels != self.levels {
            return Err(Error::DimensionMismatch("decode levels disagree".into()));
        }
        let counts = pyramid_counts(self.width, self.levels)?;
        for (l, head) in self.heads.iter().enumerate() {
            if head.in_channels() != 3 {
                return Err(Error::DimensionMismatch(format!(
                    "head {l} must take 3 input channels"
                )));
            }
            if head.out_channels() != self.decode.raw_len(l) {
                return Err(Error::DimensionMismatch(format!(
                    "head {l} must emit {} channels, emits {}",
                    self.decode.raw_len(l),
                    head.out_channels()
                )));
            }
            verify_locality(head, 16.min(self.width >> l), 8.min(self.width >> (l + 1)), 17 + l as u64)?;
        }
        if let Some(t) = &self.depth_targets {
            if t.len() != self.poses.len() {
                return Err(Error::SizeMismatch("depth targets per view".into()));
            }
            for v in t {
                if v.len() != self.levels {
                    return Err(Error::SizeMismatch("depth targets per level".into()));
                }
                for (l, d) in v.iter().enumerate() {
                    if d.len() != counts[l] {
                        return Err(Error::SizeMismatch("depth targets per gaussian".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn level_dims(&self, level: usize) -> (usize, usize) {
        (self.width >> level, self.width >> (level + 1))
    }
}

/// Adjoint buffers plus instrumented live-bytes counters for one scheduler
/// run.
#[derive(Debug)]
pub struct GradientLedger {
    pub counter: Arc<MemCounter>,
    pub grad_image_cache: Option<ErpImage>,
    pub grads_gaussians: Option<Vec<GaussianGrads>>,
    pub grads_theta: Option<Vec<Vec<f64>>>,
}

impl GradientLedger {
    fn new() -> Self {
        Self {
            counter: MemCounter::new(),
            grad_image_cache: None,
            grads_gaussians: None,
            grads_theta: None,
        }
    }

    pub fn peak_live_bytes(&self) -> i64 {
        self.counter.peak_live_bytes()
    }

    pub fn current_live_bytes(&self) -> i64 {
        self.counter.current_live_bytes()
    }
}

// the image level inputs: view image downsampled to each pyramid level
fn level_inputs(spec: &PipelineSpec, img: &ErpImage) -> Result<Vec<Raster>> {
    let mut out = Vec::with_capacity(spec.levels);
    let mut cur: Raster = img.raster().clone();
    for l in 0..spec.levels {
        let (w, h) = spec.level_dims(l);
        if cur.width() != w || cur.height() != h {
            return Err(Error::DimensionMismatch(format!(
                "input image does not reduce to level {l} dims"
            )));
        }
        out.push(cur.clone());
        if l + 1 < spec.levels {
            cur = cur.downsample2()?;
        }
    }
    Ok(out)
}

fn lattices(spec: &PipelineSpec) -> Result<Vec<FibonacciLattice>> {
    pyramid_counts(spec.width, spec.levels)?
        .into_iter()
        .enumerate()
        .map(|(l, n)| fibonacci_lattice(n, l))
        .collect()
}

/// Offset of (view, level) inside the consolidated Gaussian ordering
/// (view-major, levels coarse to fine).
fn consolidated_offsets(spec: &PipelineSpec, counts: &[usize]) -> Vec<Vec<usize>> {
    let per_view: usize = counts.iter().sum();
    let mut out = vec![vec![0; spec.levels]; spec.poses.len()];
    for view in 0..spec.poses.len() {
        let mut off = view * per_view;
        for l in (0..spec.levels).rev() {
            out[view][l] = off;
            off += counts[l];
        }
    }
    out
}

/// Full-image head pass for one view: per level, pad, apply, sample the
/// lattice, build the pyramid.
fn generate_view(
    spec: &PipelineSpec,
    img: &ErpImage,
    view: usize,
    keep_state: bool,
) -> Result<(GaussianPyramid, Option<ViewState>)> {
    let inputs = level_inputs(spec, img)?;
    let latt = lattices(spec)?;
    let mut raw_levels = Vec::with_capacity(spec.levels);
    let mut padded_inputs = Vec::with_capacity(spec.levels);
    for l in 0..spec.levels {
        let head = &spec.heads[l];
        let padded = pre_pad(&inputs[l], head.radius());
        let features = head.apply(&padded);
        let raw = sample_lattice_features(&features, &latt[l]);
        raw_levels.push(raw);
        if keep_state {
            padded_inputs.push(padded);
        }
    }
    let pyramid = build_pyramid(&raw_levels, &spec.poses[view], &spec.decode, view)?;
    let state = keep_state.then(|| ViewState {
        guards: raw_levels.iter().map(|r| MemGuard::of_slice(r)).collect(),
        raw_levels,
        padded_inputs,
    });
    Ok((pyramid, state))
}

/// Retained per-view forward state for the monolithic adjoint.
struct ViewState {
    raw_levels: Vec<Vec<f64>>,
    padded_inputs: Vec<Raster>,
    #[allow(dead_code)]
    guards: Vec<MemGuard>,
}

/// Mean-squared-error image loss on the rgb channels (mean over pixels and
/// channels) between a rendered rgb+alpha panorama and an rgb target.
pub fn image_loss(rendered: &ErpImage, target: &ErpImage) -> Result<f64> {
    check_render_target(rendered, target)?;
    let c = target.channels();
    let mut acc = 0.0;
    for v in 0..target.height() {
        for u in 0..target.width() {
            for ch in 0..c {
                let e = rendered.get(u, v, ch) - target.get(u, v, ch);
                acc += e * e;
            }
        }
    }
    Ok(acc / (target.as_slice().len() as f64))
}

fn check_render_target(rendered: &ErpImage, target: &ErpImage) -> Result<()> {
    if rendered.width() != target.width()
        || rendered.height() != target.height()
        || rendered.channels() < target.channels()
    {
        return Err(Error::DimensionMismatch(
            "rendered and target images disagree".into(),
        ));
    }
    Ok(())
}

/// Gradient of [`image_loss`] w.r.t. the rendered rgb channels:
/// 2 (rendered - target) / N, cached but not yet propagated.
pub fn cache_image_grad(rendered: &ErpImage, target: &ErpImage) -> Result<ErpImage> {
    check_render_target(rendered, target)?;
    let c = target.channels();
    let n = target.as_slice().len() as f64;
    let mut grad = ErpImage::zeros(target.width(), target.height(), c)?;
    for v in 0..target.height() {
        for u in 0..target.width() {
            for ch in 0..c {
                grad.set(u, v, ch, 2.0 * (rendered.get(u, v, ch) - target.get(u, v, ch)) / n);
            }
        }
    }
    Ok(grad)
}

// rgb gradient expanded with a zero alpha channel for the renderer adjoint
fn expand_alpha(grad: &ErpImage) -> Result<ErpImage> {
    let mut out = ErpImage::zeros(grad.width(), grad.height(), 4)?;
    for v in 0..grad.height() {
        for u in 0..grad.width() {
            for c in 0..grad.channels() {
                out.set(u, v, c, grad.get(u, v, c));
            }
        }
    }
    Ok(out)
}

// depth-supervision gradient on the logits of one gaussian, plus its loss
// contribution; flows through the shared softmax inverse-depth rule
fn depth_term(
    raw: &RawHeadOutput,
    inv: &[f64],
    target: f64,
    weight: f64,
    grad_logits: Option<&mut [f64]>,
) -> f64 {
    let agg = softmax_inverse_depth(raw.logits(), inv);
    let depth = 1.0 / agg;
    let err = depth - target;
    if let Some(grads) = grad_logits {
        let d_depth = weight * err.signum();
        let d_inv = -depth * depth * d_depth;
        softmax_inverse_depth_backward(raw.logits(), inv, d_inv, grads);
    }
    weight * err.abs()
}

/// Per-level depth-supervision weight: gamma^level relative to the finest.
fn depth_level_weight(spec: &PipelineSpec, level: usize, n_gaussians: usize) -> f64 {
    spec.depth_weight * spec.depth_gamma.powi(level as i32) / n_gaussians as f64
}

/// Scalar pipeline loss: image MSE plus the optional depth-supervision term.
pub fn pipeline_loss(spec: &PipelineSpec, inputs: &[ErpImage], target: &ErpImage) -> Result<f64> {
    let rendered = forward_nograd(spec, inputs)?;
    let mut loss = image_loss(&rendered, target)?;
    if spec.depth_weight > 0.0 {
        if let Some(targets) = &spec.depth_targets {
            let latt = lattices(spec)?;
            for (view, img) in inputs.iter().enumerate() {
                let level_ins = level_inputs(spec, img)?;
                for l in 0..spec.levels {
                    let head = &spec.heads[l];
                    let features = head.apply(&pre_pad(&level_ins[l], head.radius()));
                    let raw = sample_lattice_features(&features, &latt[l]);
                    let stride = spec.decode.raw_len(l);
                    let w = depth_level_weight(spec, l, latt[l].n());
                    for j in 0..latt[l].n() {
                        let rec = RawHeadOutput {
                            values: &raw[j * stride..(j + 1) * stride],
                            candidates: spec.decode.inv_candidates[l].len(),
                        };
                        loss += depth_term(
                            &rec,
                            &spec.decode.inv_candidates[l],
                            targets[view][l][j],
                            w,
                            None,
                        );
                    }
                }
            }
        }
    }
    Ok(loss)
}

/// Tape-free forward pass: head -> decode -> render with nothing retained.
///
/// Bit-identical to the tape-retaining forward used by the monolithic
/// oracle.
pub fn forward_nograd(spec: &PipelineSpec, inputs: &[ErpImage]) -> Result<ErpImage> {
    if inputs.len() != spec.poses.len() {
        return Err(Error::SizeMismatch("one input image per pose".into()));
    }
    let mut pyramids = Vec::with_capacity(inputs.len());
    for (view, img) in inputs.iter().enumerate() {
        let (pyramid, _) = generate_view(spec, img, view, false)?;
        pyramids.push(pyramid);
    }
    let set = consolidate(&pyramids);
    drop(pyramids);
    let (img, _) = render_pano(&set, &spec.target_pose, &spec.render, false)?;
    Ok(img)
}

/// One deferred-backpropagation run; owns the pipeline state between the
/// scheduler's phases and the instrumented ledger.
pub struct DeferredBp {
    pub spec: PipelineSpec,
    pub inputs: Vec<ErpImage>,
    pub ledger: GradientLedger,
    consolidated: Option<Vec<Gaussian>>,
    rendered: Option<ErpImage>,
}

impl DeferredBp {
    pub fn new(spec: PipelineSpec, inputs: Vec<ErpImage>) -> Result<Self> {
        spec.validate()?;
        if inputs.len() != spec.poses.len() {
            return Err(Error::SizeMismatch("one input image per pose".into()));
        }
        Ok(Self {
            spec,
            inputs,
            ledger: GradientLedger::new(),
            consolidated: None,
            rendered: None,
        })
    }

    /// Tape-free forward; keeps only the consolidated Gaussians (the leaves
    /// step one accumulates into) and the rendered panorama.
    pub fn forward_nograd(&mut self) -> Result<ErpImage> {
        let counter = Arc::clone(&self.ledger.counter);
        let out = with_counter(&counter, || -> Result<ErpImage> {
            let mut pyramids = Vec::with_capacity(self.inputs.len());
            for (view, img) in self.inputs.iter().enumerate() {
                let (pyramid, _) = generate_view(&self.spec, img, view, false)?;
                pyramids.push(pyramid);
            }
            let set = consolidate(&pyramids);
            drop(pyramids);
            let (img, _) = render_pano(&set, &self.spec.target_pose, &self.spec.render, false)?;
            self.consolidated = Some(set);
            Ok(img)
        })?;
        self.rendered = Some(out.clone());
        Ok(out)
    }

    /// Evaluates the image loss and caches its gradient on the panorama.
    pub fn cache_image_grad(&mut self, target: &ErpImage) -> Result<f64> {
        let rendered = self.rendered.as_ref().ok_or(Error::MissingGradCache)?;
        let counter = Arc::clone(&self.ledger.counter);
        let loss = with_counter(&counter, || image_loss(rendered, target))?;
        // the cache itself is ledger state, not a transient buffer
        self.ledger.grad_image_cache = Some(cache_image_grad(rendered, target)?);
        Ok(loss)
    }

    /// Step one: re-render face by face, pulling the cached image gradient
    /// through the stitch restricted to each face and accumulating Gaussian
    /// gradients; each face tape is freed before the next face.
    pub fn step1_faces(&mut self) -> Result<()> {
        let grad_cache = self
            .ledger
            .grad_image_cache
            .as_ref()
            .ok_or(Error::MissingGradCache)?
            .clone();
        let set = self.consolidated.as_ref().ok_or(Error::MissingGradCache)?;
        let counter = Arc::clone(&self.ledger.counter);
        let spec = &self.spec;
        let grads = with_counter(&counter, || -> Result<Vec<GaussianGrads>> {
            let grad4 = expand_alpha(&grad_cache)?;
            let mut grads = vec![GaussianGrads::zeros(spec.decode.d_sh); set.len()];
            let r = spec.render.face_res;
            for face in FaceKey::ALL {
                // stitch adjoint restricted to this face's panorama pixels
                let mut face_grad = Raster::zeros(r + 2, r + 2, 4);
                for v in 0..grad4.height() {
                    for u in 0..grad4.width() {
                        let tap = stitch_tap(u, v, grad4.width(), grad4.height(), r);
                        if tap.face != face {
                            continue;
                        }
                        for ch in 0..4 {
                            let g = grad4.get(u, v, ch);
                            for k in 0..4 {
                                let (x, y) = tap.idx[k];
                                let cur = face_grad.get(x, y, ch);
                                face_grad.set(x, y, ch, cur + tap.weights[k] * g);
                            }
                        }
                    }
                }
                // re-render this face with tape, pull gradients, free the tape
                let sorted = project_face(set, &spec.target_pose, face, r);
                let _guard = MemGuard::of_slice(&sorted);
                let (_, tape) = rasterize_face(sorted, face, r);
                accumulate_face_backward(&tape, &face_grad, set, &spec.target_pose, &mut grads);
            }
            Ok(grads)
        })?;
        self.ledger.grads_gaussians = Some(grads);
        Ok(())
    }

    /// Step two: re-generate the Gaussians tile by tile, scattering each
    /// tile's Gaussian gradients back through the lattice sampling and the
    /// head adjoint into the head parameters.
    ///
    /// A Gaussian is owned by the tile containing its bilinear footprint's
    /// top-left sample; the tile recomputes a one-sample halo so the whole
    /// footprint scatters locally.
    pub fn step2_tiles(&mut self) -> Result<()> {
        let g_gauss = self
            .ledger
            .grads_gaussians
            .as_ref()
            .ok_or(Error::MissingStep1)?;
        let counter = Arc::clone(&self.ledger.counter);
        let spec = self.spec.clone();
        let inputs = &self.inputs;
        let grads_theta = with_counter(&counter, || {
            step2_tiles_impl(&spec, inputs, g_gauss)
        })?;
        self.ledger.grads_theta = Some(grads_theta);
        Ok(())
    }
}

fn step2_tiles_impl(
    spec: &PipelineSpec,
    inputs: &[ErpImage],
    g_gauss: &[GaussianGrads],
) -> Result<Vec<Vec<f64>>> {
    let counts = pyramid_counts(spec.width, spec.levels)?;
    let offsets = consolidated_offsets(spec, &counts);
    let latt = lattices(spec)?;
    let mut grads_theta: Vec<Vec<f64>> = spec
        .heads
        .iter()
        .map(|h| vec![0.0; h.theta().len()])
        .collect();

    for (view, img) in inputs.iter().enumerate() {
        let level_ins = level_inputs(spec, img)?;
        for l in 0..spec.levels {
            let head = &spec.heads[l];
            let r = head.radius();
            let (lw, lh) = spec.level_dims(l);
            let grid = TileGrid::new(lw, lh, spec.tiles, r)?;
            let stride = spec.decode.raw_len(l);
            let inv = &spec.decode.inv_candidates[l];
            let dw = if spec.depth_weight > 0.0 && spec.depth_targets.is_some() {
                depth_level_weight(spec, l, latt[l].n())
            } else {
                0.0
            };

            // tile ownership by the top-left bilinear tap
            let bw = lw / spec.tiles;
            let bh = lh / spec.tiles;
            let mut owners: Vec<Vec<u32>> = vec![Vec::new(); spec.tiles * spec.tiles];
            for (j, &pt) in latt[l].points().iter().enumerate() {
                let (taps, _) = lattice_taps(pt, lw, lh);
                let tx = (taps[0].0 / bw).min(spec.tiles - 1);
                let ty = (taps[0].1 / bh).min(spec.tiles - 1);
                owners[ty * spec.tiles + tx].push(j as u32);
            }

            for ty in 0..spec.tiles {
                for tx in 0..spec.tiles {
                    let owned = &owners[ty * spec.tiles + tx];
                    if owned.is_empty() {
                        continue;
                    }
                    let (x0, y0, tw, th) = grid.tile_extent(tx, ty);
                    // one-sample halo so wrapped/clamped second taps stay local
                    let ext_w = (tw + 1).min(lw);
                    let ext_h = (th + 1).min(lh - y0);
                    let patch = gather_patch(
                        &level_ins[l],
                        x0 as i64 - r as i64,
                        y0 as i64 - r as i64,
                        ext_w + 2 * r,
                        ext_h + 2 * r,
                    );
                    let features = head.apply(&patch);
                    let mut grad_features = Raster::zeros(ext_w, ext_h, stride);
                    let local = |gx: usize, gy: usize| -> Option<(usize, usize)> {
                        let lx = (gx + lw - x0) % lw;
                        let ly = gy.checked_sub(y0)?;
                        (lx < ext_w && ly < ext_h).then_some((lx, ly))
                    };
                    for &j in owned {
                        let j = j as usize;
                        let (taps, weights) = lattice_taps(latt[l].point(j), lw, lh);
                        // recompute this gaussian's raw record from the patch
                        let mut raw = vec![0.0; stride];
                        for k in 0..4 {
                            let (lx, ly) = local(taps[k].0, taps[k].1)
                                .expect("halo covers the owned footprint");
                            let px = features.pixel(lx, ly);
                            for ch in 0..stride {
                                raw[ch] += weights[k] * px[ch];
                            }
                        }
                        let rec = RawHeadOutput { values: &raw, candidates: inv.len() };
                        let gidx = offsets[view][l] + j;
                        let mut raw_grad = decode_gaussian_backward(
                            &rec,
                            latt[l].point(j),
                            l,
                            &spec.poses[view],
                            &spec.decode,
                            &g_gauss[gidx],
                        );
                        if dw > 0.0 {
                            depth_term(
                                &rec,
                                inv,
                                spec.depth_targets.as_ref().unwrap()[view][l][j],
                                dw,
                                Some(&mut raw_grad[..inv.len()]),
                            );
                        }
                        for k in 0..4 {
                            let (lx, ly) = local(taps[k].0, taps[k].1).unwrap();
                            for ch in 0..stride {
                                let cur = grad_features.get(lx, ly, ch);
                                grad_features.set(lx, ly, ch, cur + weights[k] * raw_grad[ch]);
                            }
                        }
                    }
                    let (_, g_theta) = head.vjp(&patch, &grad_features);
                    for (acc, g) in grads_theta[l].iter_mut().zip(&g_theta) {
                        *acc += g;
                    }
                }
            }
        }
    }
    Ok(grads_theta)
}

/// Full-tape end-to-end adjoint: the reference for every equivalence test.
pub fn monolithic_grads(
    spec: &PipelineSpec,
    inputs: &[ErpImage],
    target: &ErpImage,
) -> Result<(Vec<GaussianGrads>, Vec<Vec<f64>>, f64)> {
    monolithic_with_counter(spec, inputs, target, &MemCounter::new(), &MemCounter::new())
}

fn monolithic_with_counter(
    spec: &PipelineSpec,
    inputs: &[ErpImage],
    target: &ErpImage,
    counter: &Arc<MemCounter>,
    head_counter: &Arc<MemCounter>,
) -> Result<(Vec<GaussianGrads>, Vec<Vec<f64>>, f64)> {
    spec.validate()?;
    with_counter(counter, || {
        // tape-retaining forward
        let mut pyramids: Vec<GaussianPyramid> = Vec::new();
        let mut states: Vec<ViewState> = Vec::new();
        for (view, img) in inputs.iter().enumerate() {
            let (pyramid, state) = generate_view(spec, img, view, true)?;
            pyramids.push(pyramid);
            states.push(state.expect("state retained"));
        }
        let set = consolidate(&pyramids);
        drop(pyramids);
        let (rendered, tape) = render_pano(&set, &spec.target_pose, &spec.render, true)?;
        let tape: RenderTape = tape.expect("tape retained");
        let loss = image_loss(&rendered, target)?;

        // image gradient through the full renderer adjoint
        let grad = expand_alpha(&cache_image_grad(&rendered, target)?)?;
        let g_gauss = render_backward(&tape, &grad, &set)?;
        drop(tape);

        // head stage: decode adjoint, lattice scatter, one full vjp per level
        let counts = pyramid_counts(spec.width, spec.levels)?;
        let offsets = consolidated_offsets(spec, &counts);
        let latt = lattices(spec)?;
        let grads_theta = with_counter(head_counter, || -> Result<Vec<Vec<f64>>> {
            let mut grads_theta: Vec<Vec<f64>> = spec
                .heads
                .iter()
                .map(|h| vec![0.0; h.theta().len()])
                .collect();
            let mut total_depth = 0.0;
            for (view, state) in states.iter().enumerate() {
                for l in 0..spec.levels {
                    let head = &spec.heads[l];
                    let (lw, lh) = spec.level_dims(l);
                    let stride = spec.decode.raw_len(l);
                    let inv = &spec.decode.inv_candidates[l];
                    let dw = if spec.depth_weight > 0.0 && spec.depth_targets.is_some() {
                        depth_level_weight(spec, l, latt[l].n())
                    } else {
                        0.0
                    };
                    let raw = &state.raw_levels[l];
                    let mut grad_features = Raster::zeros(lw, lh, stride);
                    let mut raw_grads = vec![0.0; raw.len()];
                    let _rg = MemGuard::of_slice(&raw_grads);
                    for j in 0..latt[l].n() {
                        let rec = RawHeadOutput {
                            values: &raw[j * stride..(j + 1) * stride],
                            candidates: inv.len(),
                        };
                        let gidx = offsets[view][l] + j;
                        let g = decode_gaussian_backward(
                            &rec,
                            latt[l].point(j),
                            l,
                            &spec.poses[view],
                            &spec.decode,
                            &g_gauss[gidx],
                        );
                        raw_grads[j * stride..(j + 1) * stride].copy_from_slice(&g);
                        if dw > 0.0 {
                            total_depth += depth_term(
                                &rec,
                                inv,
                                spec.depth_targets.as_ref().unwrap()[view][l][j],
                                dw,
                                Some(&mut raw_grads[j * stride..j * stride + inv.len()]),
                            );
                        }
                    }
                    crate::tiling::scatter_lattice_grads(&raw_grads, &latt[l], &mut grad_features);
                    let (_, g_theta) = head.vjp(&state.padded_inputs[l], &grad_features);
                    for (acc, g) in grads_theta[l].iter_mut().zip(&g_theta) {
                        *acc += g;
                    }
                }
            }
            let _ = total_depth;
            Ok(grads_theta)
        })?;
        let mut loss = loss;
        if spec.depth_weight > 0.0 && spec.depth_targets.is_some() {
            // recompute the scalar term (kept out of the hot loop above)
            loss = pipeline_loss(spec, inputs, target)?;
        }
        Ok((g_gauss, grads_theta, loss))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpMode {
    /// full tape end to end
    Monolithic,
    /// full render tape, head stage tiled (step two only)
    OneStep,
    /// face-by-face render adjoint plus tiled head stage
    TwoStep,
}

impl BpMode {
    pub fn label(self) -> &'static str {
        match self {
            BpMode::Monolithic => "monolithic",
            BpMode::OneStep => "one-step",
            BpMode::TwoStep => "two-step",
        }
    }
}

/// Outcome of one accounted run.
#[derive(Debug)]
pub struct RunStats {
    pub loss: f64,
    pub peak_live_bytes: i64,
    /// peak of the head-gradient stage alone
    pub head_stage_peak: i64,
    pub grads_gaussians: Vec<GaussianGrads>,
    pub grads_theta: Vec<Vec<f64>>,
}

/// Runs one full gradient computation in the requested mode with live-byte
/// accounting.
pub fn run_mode(
    spec: &PipelineSpec,
    inputs: &[ErpImage],
    target: &ErpImage,
    mode: BpMode,
) -> Result<RunStats> {
    match mode {
        BpMode::Monolithic => {
            let counter = MemCounter::new();
            let head_counter = MemCounter::new();
            let (g, t, loss) =
                monolithic_with_counter(spec, inputs, target, &counter, &head_counter)?;
            Ok(RunStats {
                loss,
                peak_live_bytes: counter.peak_live_bytes(),
                head_stage_peak: head_counter.peak_live_bytes(),
                grads_gaussians: g,
                grads_theta: t,
            })
        }
        BpMode::OneStep => {
            spec.validate()?;
            let counter = MemCounter::new();
            let head_counter = MemCounter::new();
            let out = with_counter(&counter, || -> Result<(Vec<GaussianGrads>, f64, Vec<Gaussian>)> {
                let mut pyramids = Vec::new();
                for (view, img) in inputs.iter().enumerate() {
                    let (p, _) = generate_view(spec, img, view, false)?;
                    pyramids.push(p);
                }
                let set = consolidate(&pyramids);
                drop(pyramids);
                let (rendered, tape) = render_pano(&set, &spec.target_pose, &spec.render, true)?;
                let loss = image_loss(&rendered, target)?;
                let grad = expand_alpha(&cache_image_grad(&rendered, target)?)?;
                let g = render_backward(&tape.expect("tape"), &grad, &set)?;
                Ok((g, loss, set))
            })?;
            let (g_gauss, mut loss, _set) = out;
            let grads_theta = with_counter(&counter, || {
                with_counter(&head_counter, || step2_tiles_impl(spec, inputs, &g_gauss))
            })?;
            if spec.depth_weight > 0.0 && spec.depth_targets.is_some() {
                loss = pipeline_loss(spec, inputs, target)?;
            }
            Ok(RunStats {
                loss,
                peak_live_bytes: counter.peak_live_bytes(),
                head_stage_peak: head_counter.peak_live_bytes(),
                grads_gaussians: g_gauss,
                grads_theta,
            })
        }
        BpMode::TwoStep => {
            let mut bp = DeferredBp::new(spec.clone(), inputs.to_vec())?;
            bp.forward_nograd()?;
            let mut loss = bp.cache_image_grad(target)?;
            bp.step1_faces()?;
            let head_counter = MemCounter::new();
            {
                let counter = Arc::clone(&bp.ledger.counter);
                let g_gauss = bp.ledger.grads_gaussians.as_ref().unwrap();
                let grads_theta = with_counter(&counter, || {
                    with_counter(&head_counter, || step2_tiles_impl(spec, inputs, g_gauss))
                })?;
                bp.ledger.grads_theta = Some(grads_theta);
            }
            if spec.depth_weight > 0.0 && spec.depth_targets.is_some() {
                loss = pipeline_loss(spec, inputs, target)?;
            }
            Ok(RunStats {
                loss,
                peak_live_bytes: bp.ledger.peak_live_bytes(),
                head_stage_peak: head_counter.peak_live_bytes(),
                grads_gaussians: bp.ledger.grads_gaussians.take().unwrap(),
                grads_theta: bp.ledger.grads_theta.take().unwrap(),
            })
        }
    }
}

/// One row of the memory report.
#[derive(Debug, Clone)]
pub struct MemoryRow {
    pub mode: &'static str,
    pub resolution: usize,
    pub peak_live_bytes: i64,
}

/// Peak live bytes for each mode at each panorama height.
pub fn memory_report(
    spec_for_height: &dyn Fn(usize) -> Result<(PipelineSpec, Vec<ErpImage>, ErpImage)>,
    heights: &[usize],
    modes: &[BpMode],
) -> Result<Vec<MemoryRow>> {
    let mut rows = Vec::new();
    for &h in heights {
        let (spec, inputs, target) = spec_for_height(h)?;
        for &mode in modes {
            let stats = run_mode(&spec, &inputs, &target, mode)?;
            rows.push(MemoryRow {
                mode: mode.label(),
                resolution: h,
                peak_live_bytes: stats.peak_live_bytes,
            });
        }
    }
    Ok(rows)
}

/// Deterministic small pipeline for tests and the memory bench: smooth
/// random inputs, seeded heads, a slightly displaced target view.
pub fn bench_spec(
    width: usize,
    levels: usize,
    tiles: usize,
    candidates: usize,
    c_mid: usize,
    seed: u64,
) -> Result<(PipelineSpec, Vec<ErpImage>, ErpImage)> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let height = width / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let smooth_image = |seed_off: u64| -> Result<ErpImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ seed_off);
        let mut img = ErpImage::zeros(width, height, 3)?;
        let (a, b, c) = (
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        for v in 0..height {
            for u in 0..width {
                for ch in 0..3 {
                    let x = u as f64 / width as f64;
                    let y = v as f64 / height as f64;
                    let val = 0.5
                        + 0.25 * (a * std::f64::consts::TAU * x + c + ch as f64).sin()
                        + 0.2 * (b * std::f64::consts::PI * y + ch as f64 * 0.7).cos();
                    img.set(u, v, ch, val.clamp(0.0, 1.0));
                }
            }
        }
        Ok(img)
    };
    let inv: Vec<Vec<f64>> = (0..levels)
        .map(|_| {
            let h = crate::cost_volume::make_hypotheses(1.0, 12.0, candidates).unwrap();
            h.inverse_depths().to_vec()
        })
        .collect();
    let mut decode = DecodeConfig::new(width, levels, 0, inv);
    // keep splat footprints small so the memory benches stay rasterization-cheap
    decode.s_max = 4.0;
    let heads: Vec<ToyHead> = (0..levels)
        .map(|l| ToyHead::seeded(3, c_mid, decode.raw_len(l), seed.wrapping_add(l as u64)))
        .collect();
    let poses = vec![
        CameraPose::at(nalgebra::Vector3::new(-0.35, 0.0, 0.0)),
        CameraPose::at(nalgebra::Vector3::new(0.35, 0.0, 0.0)),
    ];
    let target_pose = CameraPose::at(nalgebra::Vector3::new(0.0, 0.05, 0.1));
    let spec = PipelineSpec {
        width,
        levels,
        tiles,
        heads,
        decode,
        render: RenderConfig::new(width)?,
        poses,
        target_pose,
        depth_weight: 0.0,
        depth_gamma: 0.9,
        depth_targets: None,
    };
    let inputs = vec![smooth_image(0x1111)?, smooth_image(0x2222)?];
    let target = smooth_image(0x3333)?;
    let _ = rng.gen_range(0..2);
    Ok((spec, inputs, target))
}

/// Maximum relative difference between two gradient sets (gaussians).
pub fn max_rel_diff_gaussians(a: &[GaussianGrads], b: &[GaussianGrads]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let pairs: Vec<(f64, f64)> = x
            .center
            .iter()
            .zip(y.center.iter())
            .map(|(p, q)| (*p, *q))
            .chain([(x.opacity, y.opacity)])
            .chain(x.scale.iter().zip(y.scale.iter()).map(|(p, q)| (*p, *q)))
            .chain(x.rotation.iter().zip(y.rotation.iter()).map(|(p, q)| (*p, *q)))
            .chain(x.sh.iter().zip(y.sh.iter()).map(|(p, q)| (*p, *q)))
            .collect();
        for (p, q) in pairs {
            let denom = p.abs().max(q.abs()).max(1e-8);
            worst = worst.max((p - q).abs() / denom);
        }
    }
    worst
}

/// Maximum relative difference between two theta gradient sets.
pub fn max_rel_diff_theta(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            let denom = p.abs().max(q.abs()).max(1e-8);
            worst = worst.max((p - q).abs() / denom);
        }
    }
    worst
}
