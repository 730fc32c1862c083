//! Batch command-line surface: scene synthesis, the full pipeline,
//! known-flows deblurring, metric evaluation and report rendering.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::datagen::{generate, SceneSpec};
use crate::deblur::{solve_latents, LatentProblem};
use crate::energy::EnergyBreakdown;
use crate::geometry::{FrameId, FrameLayout};
use crate::io;
use crate::metrics::{
    disparity_outlier_rate, flow_outlier_rate, psnr, segmentation_prf, MetricsReport,
};
use crate::pipeline::{run_pipeline, PipelineInput};
use crate::types::Image;
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "blurflow", version, about = "Joint stereo video deblurring, scene flow and moving-object segmentation")]
struct Cli {
    /// Override the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker-thread parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blurred stereo sequence with ground truth.
    Synth {
        /// Scene description file, or "default" for the built-in scene.
        scene_spec: String,
        out_dir: PathBuf,
    },
    /// Run the full joint solve on a sequence directory.
    Run {
        config: PathBuf,
        in_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Deblur with known per-frame flows (no scene-flow estimation).
    Deblur {
        config: PathBuf,
        in_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Compare a run directory against ground truth and write a CSV row.
    Eval {
        est_dir: PathBuf,
        gt_dir: PathBuf,
        report: PathBuf,
    },
    /// Summarize an evaluation CSV and emit PGM error heatmaps.
    Report {
        report: PathBuf,
        /// Heatmap output directory (default: heatmaps/ next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        // Ignore failure when a pool already exists (tests call this twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Synth { scene_spec, out_dir } => cmd_synth(scene_spec, out_dir, cli),
        Command::Run { config, in_dir, out_dir } => cmd_run(config, in_dir, out_dir, cli),
        Command::Deblur { config, in_dir, out_dir } => cmd_deblur(config, in_dir, out_dir, cli),
        Command::Eval { est_dir, gt_dir, report } => cmd_eval(est_dir, gt_dir, report, cli),
        Command::Report { report, out } => cmd_report(report, out.as_deref(), cli),
    }
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn frame_name(idx: usize) -> String {
    format!("{idx:03}.png")
}

fn view_dir(right: bool) -> &'static str {
    if right {
        "right"
    } else {
        "left"
    }
}

fn cmd_synth(scene_spec: &str, out_dir: &Path, cli: &Cli) -> Result<()> {
    let mut spec = if scene_spec == "default" {
        SceneSpec::default_scene()
    } else {
        SceneSpec::from_key_values(&io::read_key_values(scene_spec)?)?
    };
    if let Some(seed) = cli.seed {
        spec.texture_seed = seed;
    }
    let bundle = generate(&spec)?;
    let layout = &bundle.layout;

    for sub in ["left", "right", "gt/latent/left", "gt/latent/right", "gt/flow", "gt/frames", "gt/disp"] {
        mkdirs(&out_dir.join(sub))?;
    }
    for (idx, frame) in layout.frames().iter().enumerate() {
        let t = layout.times.iter().position(|&x| x == frame.time).unwrap();
        io::write_image(
            out_dir.join(view_dir(frame.right)).join(frame_name(t)),
            &bundle.blurred[idx],
            16,
        )?;
        io::write_image(
            out_dir.join("gt/latent").join(view_dir(frame.right)).join(frame_name(t)),
            &bundle.latents[idx],
            16,
        )?;
        let (fwd, bwd) = &bundle.frame_flows[idx];
        io::write_flow(out_dir.join(format!("gt/frames/f{idx}_fwd.flo")), fwd)?;
        io::write_flow(out_dir.join(format!("gt/frames/f{idx}_bwd.flo")), bwd)?;
    }
    io::write_mask(out_dir.join("semantic.png"), &bundle.semantic_prior)?;
    io::write_flow(out_dir.join("gt/flow/fwd.flo"), &bundle.flow_fwd)?;
    io::write_flow(out_dir.join("gt/flow/bwd.flo"), &bundle.flow_bwd)?;
    io::write_flow_png(out_dir.join("gt/flow/fwd.png"), &bundle.flow_fwd)?;
    io::write_flow_png(out_dir.join("gt/flow/bwd.png"), &bundle.flow_bwd)?;
    io::write_disparity(out_dir.join("gt/disp/m.png"), &bundle.disparity_m)?;
    io::write_disparity(out_dir.join("gt/disp/m1.png"), &bundle.disparity_m1)?;
    io::write_mask(out_dir.join("gt/mask.png"), &bundle.moving_mask)?;
    io::write_key_values(out_dir.join("scene.cfg"), &spec.to_key_values())?;

    // A matching run configuration next to the data.
    let mut cfg = crate::pipeline::PipelineConfig::default();
    cfg.params.tau = spec.tau;
    cfg.params.n_latent = spec.n_sub;
    io::write_key_values(out_dir.join("config.cfg"), &RunConfig::to_key_values(&cfg))?;
    if cli.verbose {
        eprintln!("synthesized {}x{} scene into {}", spec.height, spec.width, out_dir.display());
    }
    Ok(())
}

/// Load the blurred frames of a sequence directory in layout order.
fn load_frames(in_dir: &Path, layout: &FrameLayout) -> Result<Vec<Image>> {
    let mut frames = Vec::new();
    for frame in layout.frames() {
        // Files are named by time order; two-frame mode reads the middle
        // and next frames of a three-frame directory when present.
        let t = layout.times.iter().position(|&x| x == frame.time).unwrap();
        let dir = in_dir.join(view_dir(frame.right));
        let idx = if layout.two_frame_mode() && dir.join(frame_name(2)).exists() {
            t + 1
        } else {
            t
        };
        let path = dir.join(frame_name(idx));
        if !path.exists() {
            return Err(Error::InvalidInput(format!("missing input file {}", path.display())));
        }
        frames.push(io::read_image(&path)?);
    }
    Ok(frames)
}

fn load_config(path: &Path, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_key_values(&io::read_key_values(path)?)?;
    if let Some(seed) = cli.seed {
        cfg.pipeline.seed = seed;
    }
    if cli.verbose {
        for w in &cfg.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(cfg)
}

fn write_pipeline_outputs(out_dir: &Path, out: &crate::pipeline::PipelineOutput) -> Result<()> {
    for sub in ["left", "right", "flow", "disp"] {
        mkdirs(&out_dir.join(sub))?;
    }
    for (idx, frame) in out.layout.frames().iter().enumerate() {
        let t = out.layout.times.iter().position(|&x| x == frame.time).unwrap();
        io::write_image(
            out_dir.join(view_dir(frame.right)).join(frame_name(t)),
            &out.latents[idx],
            16,
        )?;
    }
    io::write_flow(out_dir.join("flow/fwd.flo"), &out.flow_fwd)?;
    io::write_flow(out_dir.join("flow/bwd.flo"), &out.flow_bwd)?;
    io::write_flow_png(out_dir.join("flow/fwd.png"), &out.flow_fwd)?;
    io::write_flow_png(out_dir.join("flow/bwd.png"), &out.flow_bwd)?;
    io::write_disparity(out_dir.join("disp/m.png"), &out.disparity_m)?;
    io::write_disparity(out_dir.join("disp/m1.png"), &out.disparity_m1)?;
    io::write_mask(out_dir.join("mask.png"), &out.moving_mask)?;

    let mut csv = format!("stage,{}\n", EnergyBreakdown::csv_header());
    for (stage, e) in &out.trace {
        csv.push_str(&format!("{stage},{}\n", e.csv_row()));
    }
    std::fs::write(out_dir.join("trace.csv"), csv).map_err(|source| Error::Io {
        path: out_dir.join("trace.csv").display().to_string(),
        source,
    })
}

fn cmd_run(config: &Path, in_dir: &Path, out_dir: &Path, cli: &Cli) -> Result<()> {
    let cfg = load_config(config, cli)?;
    let layout = if cfg.pipeline.two_frame {
        FrameLayout::two_frame()
    } else {
        FrameLayout::three_frame()
    };
    let blurred = load_frames(in_dir, &layout)?;
    let semantic = io::read_mask(in_dir.join("semantic.png"))?;
    let rig_kv = io::read_key_values(in_dir.join("scene.cfg"))
        .or_else(|_| io::read_key_values(in_dir.join("rig.cfg")))?;
    let rig = rig_from_kv(&rig_kv)?;
    let input = PipelineInput {
        blurred,
        semantic,
        rig,
        config: cfg.pipeline,
    };
    let t0 = std::time::Instant::now();
    let out = run_pipeline(&input)?;
    if cli.verbose {
        eprintln!("pipeline finished in {:.1}s", t0.elapsed().as_secs_f64());
        for (stage, e) in &out.trace {
            eprintln!("  {stage}: total={:.6}", e.total);
        }
    }
    mkdirs(out_dir)?;
    write_pipeline_outputs(out_dir, &out)
}

/// Camera parameters from a scene/rig key=value file.
fn rig_from_kv(kv: &std::collections::BTreeMap<String, String>) -> Result<crate::types::CameraRig> {
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .ok_or_else(|| Error::Config(format!("missing rig key {k}")))?
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad float for {k}")))
    };
    crate::types::CameraRig::new(get("fx")?, get("fy")?, get("cx")?, get("cy")?, get("baseline")?)
}

fn cmd_deblur(config: &Path, in_dir: &Path, out_dir: &Path, cli: &Cli) -> Result<()> {
    let cfg = load_config(config, cli)?;
    let layout = if cfg.pipeline.two_frame {
        FrameLayout::two_frame()
    } else {
        FrameLayout::three_frame()
    };
    let blurred = load_frames(in_dir, &layout)?;
    // Known per-frame flows from the generator.
    let mut ops = Vec::new();
    for idx in 0..layout.num_frames() {
        let fwd = io::read_flow(in_dir.join(format!("gt/frames/f{idx}_fwd.flo")))?;
        let bwd = io::read_flow(in_dir.join(format!("gt/frames/f{idx}_bwd.flo")))?;
        ops.push(crate::blur::build_kernel(
            &fwd,
            &bwd,
            cfg.pipeline.params.tau,
            cfg.pipeline.kernel_radius,
        )?);
    }
    let problem = LatentProblem::from_operators(ops, layout.reference_index());
    let mut params = cfg.pipeline.params.clone();
    params.theta1 = 0.0; // no cross-image couplings without a scene model
    let solve = solve_latents(
        &problem,
        &blurred,
        &blurred,
        &params,
        cfg.pipeline.pd_iters,
        cfg.pipeline.pd_tol,
    )?;
    for sub in ["left", "right"] {
        mkdirs(&out_dir.join(sub))?;
    }
    for (idx, frame) in layout.frames().iter().enumerate() {
        let t = layout.times.iter().position(|&x| x == frame.time).unwrap();
        io::write_image(
            out_dir.join(view_dir(frame.right)).join(frame_name(t)),
            &solve.latents[idx],
            16,
        )?;
    }
    let mut csv = String::from("iter,objective\n");
    for (i, v) in solve.trace.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(out_dir.join("trace.csv"), csv).map_err(|source| Error::Io {
        path: out_dir.join("trace.csv").display().to_string(),
        source,
    })
}

/// Resolve a ground-truth directory: accepts either a synth output
/// directory or its gt/ subdirectory.
fn resolve_gt(gt_dir: &Path) -> PathBuf {
    if gt_dir.join("gt").is_dir() {
        gt_dir.join("gt")
    } else {
        gt_dir.to_path_buf()
    }
}

fn cmd_eval(est_dir: &Path, gt_dir: &Path, report: &Path, _cli: &Cli) -> Result<()> {
    let gt = resolve_gt(gt_dir);
    let layout = FrameLayout::three_frame();

    let mut psnrs = Vec::new();
    let (mut left_sum, mut right_sum, mut left_n, mut right_n) = (0.0, 0.0, 0, 0);
    for frame in layout.frames() {
        let t = layout.times.iter().position(|&x| x == frame.time).unwrap();
        let est = io::read_image(est_dir.join(view_dir(frame.right)).join(frame_name(t)))?;
        let gt_img = io::read_image(gt.join("latent").join(view_dir(frame.right)).join(frame_name(t)))?;
        let p = psnr(&est, &gt_img)?;
        psnrs.push(p);
        if frame.right {
            right_sum += p;
            right_n += 1;
        } else {
            left_sum += p;
            left_n += 1;
        }
    }

    let est_fwd = io::read_flow(est_dir.join("flow/fwd.flo"))?;
    let est_bwd = io::read_flow(est_dir.join("flow/bwd.flo"))?;
    let gt_fwd = io::read_flow(gt.join("flow/fwd.flo"))?;
    let gt_bwd = io::read_flow(gt.join("flow/bwd.flo"))?;
    let all = vec![true; gt_fwd.u.len()];
    let flow_outlier_fwd = flow_outlier_rate(&est_fwd, &gt_fwd, &all)?;
    let flow_outlier_bwd = flow_outlier_rate(&est_bwd, &gt_bwd, &all)?;

    let disp_outlier_m =
        disparity_outlier_rate(&io::read_disparity(est_dir.join("disp/m.png"))?, &io::read_disparity(gt.join("disp/m.png"))?)?;
    let disp_outlier_m1 =
        disparity_outlier_rate(&io::read_disparity(est_dir.join("disp/m1.png"))?, &io::read_disparity(gt.join("disp/m1.png"))?)?;

    let (precision, recall, f_measure) = segmentation_prf(
        &io::read_mask(est_dir.join("mask.png"))?,
        &io::read_mask(gt.join("mask.png"))?,
    )?;

    let m = MetricsReport {
        psnr: psnrs,
        psnr_left: left_sum / left_n.max(1) as f64,
        psnr_right: right_sum / right_n.max(1) as f64,
        flow_outlier_fwd,
        flow_outlier_bwd,
        disp_outlier_m,
        disp_outlier_m1,
        precision,
        recall,
        f_measure,
    };
    let csv = format!(
        "est_dir,gt_dir,{}\n{},{},{}\n",
        MetricsReport::csv_header(layout.num_frames()),
        est_dir.display(),
        gt_dir.display(),
        m.csv_row()
    );
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            mkdirs(parent)?;
        }
    }
    std::fs::write(report, csv).map_err(|source| Error::Io {
        path: report.display().to_string(),
        source,
    })?;
    println!("{}", m.summary());
    Ok(())
}

fn cmd_report(report: &Path, out: Option<&Path>, _cli: &Cli) -> Result<()> {
    let text = std::fs::read_to_string(report).map_err(|source| Error::Io {
        path: report.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Codec(format!("{}: empty csv", report.display())))?;
    if !header.starts_with("est_dir,gt_dir,") {
        return Err(Error::Codec(format!(
            "{}: not an evaluation csv (header {header:?})",
            report.display()
        )));
    }
    let heat_root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| report.parent().unwrap_or(Path::new(".")).join("heatmaps"));
    for (row_idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            continue;
        }
        let est_dir = PathBuf::from(cols[0]);
        let gt = resolve_gt(&PathBuf::from(cols[1]));
        println!("row {row_idx}: est={} gt={}", cols[0], cols[1]);
        for (name, value) in header.split(',').skip(2).zip(cols.iter().skip(2)) {
            println!("  {name} = {value}");
        }

        let dir = heat_root.join(format!("row{row_idx}"));
        mkdirs(&dir)?;
        // Flow endpoint-error heatmap.
        let est_fwd = io::read_flow(est_dir.join("flow/fwd.flo"))?;
        let gt_fwd = io::read_flow(gt.join("flow/fwd.flo"))?;
        let err: Vec<f64> = est_fwd
            .u
            .iter()
            .zip(&est_fwd.v)
            .zip(gt_fwd.u.iter().zip(&gt_fwd.v))
            .map(|((eu, ev), (gu, gv))| ((eu - gu).powi(2) + (ev - gv).powi(2)).sqrt())
            .collect();
        io::write_pgm(dir.join("flow_error.pgm"), &err, est_fwd.height, est_fwd.width, 5.0)?;
        // Disparity error heatmap.
        let est_d = io::read_disparity(est_dir.join("disp/m.png"))?;
        let gt_d = io::read_disparity(gt.join("disp/m.png"))?;
        let derr: Vec<f64> = est_d
            .d
            .iter()
            .zip(&gt_d.d)
            .map(|(e, g)| if *g < 0.0 { 0.0 } else { (e - g).abs() })
            .collect();
        io::write_pgm(dir.join("disparity_error.pgm"), &derr, est_d.height, est_d.width, 5.0)?;
        // Reference-image absolute error.
        let ref_id = FrameId { right: false, time: 0 };
        let layout = FrameLayout::three_frame();
        let t = layout.times.iter().position(|&x| x == ref_id.time).unwrap();
        let est_img = io::read_image(est_dir.join("left").join(frame_name(t)))?;
        let gt_img = io::read_image(gt.join("latent/left").join(frame_name(t)))?;
        if est_img.same_shape(&gt_img) {
            let ierr: Vec<f64> = (0..est_img.height * est_img.width)
                .map(|i| {
                    (0..est_img.channels)
                        .map(|c| (est_img.data[i * est_img.channels + c] - gt_img.data[i * gt_img.channels + c]).abs())
                        .sum::<f64>()
                        / est_img.channels as f64
                })
                .collect();
            io::write_pgm(dir.join("image_error.pgm"), &ierr, est_img.height, est_img.width, 0.25)?;
        }
    }
    Ok(())
}
