//! Command-line surface for the panoramic Gaussian pyramid engine.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use psgp_core::cost_volume::{hierarchical_depth, BoxFilterRefiner, PatchFeatures, VolumeConfig};
use psgp_core::deferred::{
    bench_spec, forward_nograd, memory_report, monolithic_grads, pipeline_loss, run_mode, BpMode,
    DeferredBp, PipelineSpec,
};
use psgp_core::error::Error as CoreError;
use psgp_core::formats;
use psgp_core::gaussians::{consolidate, DecodeConfig};
use psgp_core::geometry::{fibonacci_lattice, pyramid_counts, CameraPose};
use psgp_core::metrics::{deferred_blend, psnr, ssim, ws_psnr};
use psgp_core::raster::ErpImage;
use psgp_core::render::{render_pano, RenderConfig, RenderMode};
use psgp_core::scene::{synth_scene, PoseSpec, SceneSpec};
use psgp_core::tiling::{pre_pad, run_tiled, verify_locality, LocalOperator, ToyHead};

const EXIT_BAD_INPUT: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "psgp", version, about = "Panoramic spherical Gaussian pyramid engine")]
struct Cli {
    /// TOML or JSON config file with defaults for the flags below
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit Fibonacci lattice points and per-level counts
    Lattice(LatticeArgs),
    /// Generate a synthetic box-room scene with ground-truth depth
    Synth(SynthArgs),
    /// Hierarchical cost-volume depth for a panorama pair
    Depth(DepthArgs),
    /// Render a Gaussian pyramid file into a novel panorama
    Render(RenderArgs),
    /// End-to-end pair pipeline: depth, toy heads, pyramid, render
    Pipeline(PipelineArgs),
    /// PSNR / WS-PSNR / SSIM between two images
    Metrics(MetricsArgs),
    /// Tiling-equivalence self test (exits nonzero on mismatch)
    TileVerify(TileVerifyArgs),
    /// Deferred-BP vs monolithic vs finite-difference checks
    GradVerify(GradVerifyArgs),
    /// Peak-memory report across backpropagation modes and resolutions
    BenchMem(BenchMemArgs),
}

#[derive(Args)]
struct LatticeArgs {
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// scene description (JSON)
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// write 16-bit PNGs
    #[arg(long)]
    bit16: bool,
}

#[derive(Args)]
struct DepthArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// which view's depth to write (0 = left, 1 = right)
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long)]
    d_min: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    candidates: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    gaussians: PathBuf,
    /// JSON pose: {"position": [...], "quaternion": [w, x, y, z]}
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    out: PathBuf,
    /// cubemap face resolution (default: panorama height)
    #[arg(long)]
    face_res: Option<usize>,
    /// render faces one at a time
    #[arg(long)]
    sequential: bool,
    /// background color composited under the splats, e.g. 0.1,0.1,0.1
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    bit16: bool,
}

#[derive(Args)]
struct PipelineArgs {
    /// directory with 0.png, 1.png and poses.json
    #[arg(long)]
    pair: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// blend per-view renders by distance instead of joint rendering
    #[arg(long)]
    blend: bool,
    /// target pose JSON; defaults to the midpoint of the two views
    #[arg(long)]
    target_pose: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// run the deferred two-step backward once and report the loss
    #[arg(long)]
    check_grads: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TileVerifyArgs {
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    tiles: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct GradVerifyArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct BenchMemArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    heights: Option<Vec<usize>>,
    #[arg(long)]
    tiles: Option<usize>,
}

/// Optional config file; every field has a CLI or built-in default.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct Config {
    d_min: Option<f64>,
    d_max: Option<f64>,
    candidates: Option<usize>,
    s_min: Option<f64>,
    s_max: Option<f64>,
    levels: Option<usize>,
    tiles: Option<usize>,
    c_mid: Option<usize>,
    seed: Option<u64>,
    heights: Option<Vec<usize>>,
}

impl Config {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(toml::from_str(&text)?)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::Io(_) => EXIT_IO,
            CoreError::LocalityViolation(_) | CoreError::StaleTape(_) => EXIT_VERIFY,
            _ => EXIT_BAD_INPUT,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    EXIT_BAD_INPUT
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_BAD_INPUT);
        }
    };
    let result = match cli.command {
        Command::Lattice(args) => cmd_lattice(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Depth(args) => cmd_depth(args, &config),
        Command::Render(args) => cmd_render(args),
        Command::Pipeline(args) => cmd_pipeline(args, &config),
        Command::Metrics(args) => cmd_metrics(args),
        Command::TileVerify(args) => cmd_tile_verify(args, &config),
        Command::GradVerify(args) => cmd_grad_verify(args),
        Command::BenchMem(args) => cmd_bench_mem(args, &config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_lattice(args: LatticeArgs) -> anyhow::Result<ExitCode> {
    let counts = pyramid_counts(args.width, args.levels)?;
    println!("width = {}, levels = {}", args.width, args.levels);
    for (l, &n) in counts.iter().enumerate() {
        println!("level {l}: n = {n}");
    }
    println!("total = {}", counts.iter().sum::<usize>());
    if let Some(out) = args.out {
        let mut csv = String::from("level,index,x,y\n");
        for (l, &n) in counts.iter().enumerate() {
            let lattice = fibonacci_lattice(n, l)?;
            for (j, p) in lattice.points().iter().enumerate() {
                csv.push_str(&format!("{l},{j},{},{}\n", p[0], p[1]));
            }
        }
        fs::write(&out, csv)?;
        println!("wrote {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(&args.spec)?;
    let spec: SceneSpec = serde_json::from_str(&text)
        .map_err(|e| CoreError::Format { format: "json", detail: e.to_string() })?;
    let views = synth_scene(&spec)?;
    fs::create_dir_all(&args.out)?;
    let mut poses = Vec::new();
    for (i, view) in views.iter().enumerate() {
        formats::save_png(&args.out.join(format!("{i}.png")), &view.image, args.bit16)?;
        let mut pfm = Vec::new();
        formats::write_pfm(&mut pfm, &view.depth)?;
        fs::write(args.out.join(format!("{i}.pfm")), pfm)?;
        poses.push(view.pose);
    }
    fs::write(args.out.join("poses.json"), formats::poses_to_json(&poses)?)?;
    println!("wrote {} views to {}", views.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_pose_list(path: &Path) -> anyhow::Result<Vec<CameraPose>> {
    let text = fs::read_to_string(path)?;
    Ok(formats::poses_from_json(&text)?)
}

fn volume_config(cfg: &Config, d_min: Option<f64>, d_max: Option<f64>, candidates: Option<usize>) -> VolumeConfig {
    let defaults = VolumeConfig::default();
    VolumeConfig {
        d_min: d_min.or(cfg.d_min).unwrap_or(defaults.d_min),
        d_max: d_max.or(cfg.d_max).unwrap_or(defaults.d_max),
        coarse_candidates: candidates.or(cfg.candidates).unwrap_or(defaults.coarse_candidates),
    }
}

fn cmd_depth(args: DepthArgs, cfg: &Config) -> anyhow::Result<ExitCode> {
    let left = formats::load_png(&args.left)?;
    let right = formats::load_png(&args.right)?;
    let poses = load_pose_list(&args.poses)?;
    if poses.len() < 2 {
        bail!(CoreError::InvalidArgument("poses.json needs two poses".into()));
    }
    if args.view > 1 {
        bail!(CoreError::InvalidArgument("--view must be 0 or 1".into()));
    }
    let vol_cfg = volume_config(cfg, args.d_min, args.d_max, args.candidates);
    let provider = PatchFeatures::default();
    let feats = |img: &ErpImage| -> anyhow::Result<Vec<_>> {
        Ok((0..4)
            .map(|l| provider.features(img, l))
            .collect::<Result<_, _>>()?)
    };
    let out = hierarchical_depth(
        &[feats(&left)?, feats(&right)?],
        &[poses[0], poses[1]],
        &vol_cfg,
        &BoxFilterRefiner { radius: 4 },
    )?;
    if out.degenerate {
        eprintln!("warning: zero baseline, depth is unconstrained by parallax");
    }
    let mut pfm = Vec::new();
    formats::write_pfm(&mut pfm, &out.views[args.view].d1)?;
    fs::write(&args.out, pfm)?;
    println!(
        "wrote level-1 depth ({}x{}) to {}",
        out.views[args.view].d1.width(),
        out.views[args.view].d1.height(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_background(s: &str) -> anyhow::Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow!("bad background triple: {e}"))?;
    if parts.len() != 3 {
        bail!("background needs three comma-separated values");
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn composite_background(img: &ErpImage, bg: [f64; 3]) -> anyhow::Result<ErpImage> {
    let mut out = ErpImage::zeros(img.width(), img.height(), 3)?;
    for v in 0..img.height() {
        for u in 0..img.width() {
            let t = 1.0 - img.get(u, v, 3);
            for c in 0..3 {
                out.set(u, v, c, img.get(u, v, c) + t * bg[c]);
            }
        }
    }
    Ok(out)
}

fn load_single_pose(path: &Path) -> anyhow::Result<CameraPose> {
    let text = fs::read_to_string(path)?;
    if let Ok(spec) = serde_json::from_str::<PoseSpec>(&text) {
        return Ok(spec.to_pose());
    }
    let list = formats::poses_from_json(&text)?;
    list.first()
        .copied()
        .ok_or_else(|| anyhow!("pose file holds an empty list"))
}

fn cmd_render(args: RenderArgs) -> anyhow::Result<ExitCode> {
    let bytes = fs::read(&args.gaussians)?;
    let file = formats::read_psgp(&mut bytes.as_slice())?;
    let pose = load_single_pose(&args.pose)?;
    let set = consolidate(&file.pyramids);
    let mut cfg = RenderConfig::new(args.width)?;
    if let Some(r) = args.face_res {
        cfg = cfg.with_face_res(r);
    }
    if args.sequential {
        cfg = cfg.with_mode(RenderMode::Sequential);
    }
    let (img, _) = render_pano(&set, &pose, &cfg, false)?;
    let bg = args.background.as_deref().map(parse_background).transpose()?.unwrap_or([0.0; 3]);
    let out_img = composite_background(&img, bg)?;
    formats::save_png(&args.out, &out_img, args.bit16)?;
    println!("rendered {} gaussians to {}", set.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Builds the toy-head pipeline spec for a pair directory: candidate ranges
/// come from the hierarchical depth estimate.
fn pair_pipeline(args: &PipelineArgs, cfg: &Config) -> anyhow::Result<(PipelineSpec, Vec<ErpImage>, CameraPose)> {
    let left = formats::load_png(&args.pair.join("0.png"))?;
    let right = formats::load_png(&args.pair.join("1.png"))?;
    let poses = load_pose_list(&args.pair.join("poses.json"))?;
    if poses.len() < 2 {
        bail!(CoreError::InvalidArgument("poses.json needs two poses".into()));
    }
    if left.width() != right.width() || left.height() != right.height() {
        bail!(CoreError::DimensionMismatch("pair images disagree".into()));
    }
    let width = left.width();
    let levels = args.levels.or(cfg.levels).unwrap_or(4);
    let seed = args.seed.or(cfg.seed).unwrap_or(7);
    let tiles = cfg.tiles.unwrap_or(2);
    let c_mid = cfg.c_mid.unwrap_or(6);

    // estimate the scene depth range to anchor the decode candidates
    let vol_cfg = volume_config(cfg, None, None, None);
    let provider = PatchFeatures::default();
    let feats = |img: &ErpImage| -> anyhow::Result<Vec<_>> {
        Ok((0..4)
            .map(|l| provider.features(img, l))
            .collect::<Result<_, _>>()?)
    };
    let hier = hierarchical_depth(
        &[feats(&left)?, feats(&right)?],
        &[poses[0], poses[1]],
        &vol_cfg,
        &BoxFilterRefiner { radius: 4 },
    )?;
    // robust range: 2nd..98th percentile with margin
    let mut depths: Vec<f64> = hier
        .views
        .iter()
        .flat_map(|v| v.d1.as_slice().iter().copied())
        .collect();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = (depths[depths.len() / 50] * 0.8).max(vol_cfg.d_min);
    let hi = (depths[depths.len() - 1 - depths.len() / 50] * 1.25).min(vol_cfg.d_max).max(lo * 1.5);
    println!("depth range from cost volume: [{lo:.2}, {hi:.2}] m");

    let candidates = 16usize;
    let inv: Vec<Vec<f64>> = (0..levels)
        .map(|_| {
            psgp_core::cost_volume::make_hypotheses(lo, hi, candidates)
                .map(|h| h.inverse_depths().to_vec())
        })
        .collect::<Result<_, _>>()?;
    let mut decode = DecodeConfig::new(width, levels, 0, inv);
    if let Some(s) = cfg.s_min {
        decode.s_min = s;
    }
    if let Some(s) = cfg.s_max {
        decode.s_max = s;
    }
    let heads: Vec<ToyHead> = (0..levels)
        .map(|l| ToyHead::seeded(3, c_mid, decode.raw_len(l), seed.wrapping_add(l as u64)))
        .collect();
    let target_pose = match &args.target_pose {
        Some(p) => load_single_pose(p)?,
        None => CameraPose::at((poses[0].position + poses[1].position) / 2.0),
    };
    let spec = PipelineSpec {
        width,
        levels,
        tiles,
        heads,
        decode,
        render: RenderConfig::new(width)?,
        poses: vec![poses[0], poses[1]],
        target_pose,
        depth_weight: 0.0,
        depth_gamma: 0.9,
        depth_targets: None,
    };
    spec.validate()?;
    Ok((spec, vec![left, right], target_pose))
}

fn cmd_pipeline(args: PipelineArgs, cfg: &Config) -> anyhow::Result<ExitCode> {
    let (spec, inputs, target_pose) = pair_pipeline(&args, cfg)?;
    let rendered = if args.blend {
        // render each view's pyramid separately, then blend by distance
        let mut per_view = Vec::new();
        for view in 0..2 {
            let mut solo = spec.clone();
            solo.poses = vec![spec.poses[view]];
            let img = forward_nograd(&solo, std::slice::from_ref(&inputs[view]))?;
            per_view.push(img);
        }
        let d0 = (target_pose.position - spec.poses[0].position).norm();
        let d1 = (target_pose.position - spec.poses[1].position).norm();
        deferred_blend(&per_view[0], &per_view[1], d0, d1)?
    } else {
        forward_nograd(&spec, &inputs)?
    };
    if args.check_grads {
        let mut bp = DeferredBp::new(spec.clone(), inputs.clone())?;
        bp.forward_nograd()?;
        let loss = bp.cache_image_grad(&inputs[0])?;
        bp.step1_faces()?;
        bp.step2_tiles()?;
        println!(
            "two-step backward complete; image loss vs view 0 = {loss:.6}, peak live bytes = {}",
            bp.ledger.peak_live_bytes()
        );
    }
    let rgb = composite_background(&rendered, [0.0; 3])?;
    formats::save_png(&args.out, &rgb, false)?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_metrics(args: MetricsArgs) -> anyhow::Result<ExitCode> {
    let a = formats::load_png(&args.a)?;
    let b = formats::load_png(&args.b)?;
    let p = psnr(&a, &b)?;
    let wp = ws_psnr(&a, &b)?;
    let s = ssim(&a, &b)?;
    let num = |v: f64| {
        if v.is_infinite() {
            serde_json::Value::String("inf".into())
        } else {
            serde_json::json!(v)
        }
    };
    let json = serde_json::json!({
        "psnr": num(p),
        "ws_psnr": num(wp),
        "ssim": s,
    });
    let text = serde_json::to_string_pretty(&json)?;
    println!("{text}");
    if let Some(out) = args.out {
        fs::write(out, text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_tile_verify(args: TileVerifyArgs, cfg: &Config) -> anyhow::Result<ExitCode> {
    use rand::{Rng, SeedableRng};
    let c_mid = cfg.c_mid.unwrap_or(4);
    let head = ToyHead::seeded(3, c_mid, 5, args.seed);
    verify_locality(&head, 16, 8, args.seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed ^ 0x7177);
    let (w, h) = (args.width, args.width / 2);
    let mut img = psgp_core::raster::Raster::zeros(w, h, 3);
    for v in img.as_mut_slice() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let untiled = head.apply(&pre_pad(&img, head.radius()));
    let tiled = run_tiled(&head, &img, args.tiles)?;
    if untiled.as_slice() == tiled.as_slice() {
        println!(
            "PASS tile-verify: {}x{} image, {}x{} tiles, bit-identical",
            w, h, args.tiles, args.tiles
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("FAIL tile-verify: tiled output differs from untiled");
        Ok(ExitCode::from(EXIT_VERIFY))
    }
}

fn cmd_grad_verify(args: GradVerifyArgs) -> anyhow::Result<ExitCode> {
    use psgp_core::deferred::{max_rel_diff_gaussians, max_rel_diff_theta};
    let mut failures = 0usize;
    for (i, &width) in [32usize, 64].iter().enumerate() {
        let (spec, inputs, target) = bench_spec(width, 2, 2, 4, 2, args.seed.wrapping_add(i as u64))?;
        let mono = run_mode(&spec, &inputs, &target, BpMode::Monolithic)?;
        let two = run_mode(&spec, &inputs, &target, BpMode::TwoStep)?;
        let dg = max_rel_diff_gaussians(&mono.grads_gaussians, &two.grads_gaussians);
        let dt = max_rel_diff_theta(&mono.grads_theta, &two.grads_theta);
        let ok_eq = dg < 1e-6 && dt < 1e-6;
        println!(
            "{} equivalence W={width}: gaussian diff {dg:.2e}, theta diff {dt:.2e}",
            if ok_eq { "PASS" } else { "FAIL" }
        );
        if !ok_eq {
            failures += 1;
        }
        // finite-difference spot check on theta
        let (mut spec_fd, inputs, target) = bench_spec(32, 2, 2, 4, 2, args.seed.wrapping_add(100 + i as u64))?;
        let (_, grads_theta, _) = monolithic_grads(&spec_fd, &inputs, &target)?;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
        let mut bad = 0;
        let mut total = 0;
        for l in 0..spec_fd.levels {
            for _ in 0..6 {
                let idx = rng.gen_range(0..spec_fd.heads[l].theta().len());
                let orig = spec_fd.heads[l].theta().to_vec();
                let eps = 1e-5;
                let mut plus = orig.clone();
                plus[idx] += eps;
                spec_fd.heads[l].set_theta(plus)?;
                let lp = pipeline_loss(&spec_fd, &inputs, &target)?;
                let mut minus = orig.clone();
                minus[idx] -= eps;
                spec_fd.heads[l].set_theta(minus)?;
                let lm = pipeline_loss(&spec_fd, &inputs, &target)?;
                spec_fd.heads[l].set_theta(orig)?;
                let fd = (lp - lm) / (2.0 * eps);
                let analytic = grads_theta[l][idx];
                let denom = fd.abs().max(analytic.abs()).max(1e-7);
                total += 1;
                if (fd - analytic).abs() / denom >= 1e-3 {
                    bad += 1;
                }
            }
        }
        let ok_fd = bad == 0 || (bad as f64) < 0.01 * total as f64;
        println!(
            "{} finite differences: {}/{} theta parameters within 1e-3",
            if ok_fd { "PASS" } else { "FAIL" },
            total - bad,
            total
        );
        if !ok_fd {
            failures += 1;
        }
    }
    if failures == 0 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{failures} gradient check(s) failed");
        Ok(ExitCode::from(EXIT_VERIFY))
    }
}

fn cmd_bench_mem(args: BenchMemArgs, cfg: &Config) -> anyhow::Result<ExitCode> {
    let heights = args
        .heights
        .or_else(|| cfg.heights.clone())
        .unwrap_or_else(|| vec![128, 256]);
    let tiles = args.tiles.or(cfg.tiles).unwrap_or(4);
    let seed = cfg.seed.unwrap_or(7);
    let c_mid = cfg.c_mid.unwrap_or(6);
    let rows = memory_report(
        &|h| bench_spec(2 * h, 3.min(usize::max(2, h.trailing_zeros() as usize)), tiles, 8, c_mid, seed),
        &heights,
        &[BpMode::Monolithic, BpMode::OneStep, BpMode::TwoStep],
    )?;
    let mut csv = String::from("mode,resolution,peak_live_bytes\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{}\n", row.mode, row.resolution, row.peak_live_bytes));
        println!("{:<12} H={:<5} peak {:>12} bytes", row.mode, row.resolution, row.peak_live_bytes);
    }
    fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
