//! Command-line front end for the mesh-deformation toolkit: synthetic
//! shape generation, distance transforms, topology correction, isosurface
//! extraction, mesh metrics, learned deformation, training, and the full
//! mask-to-surfaces pipeline.

mod formats;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use odeform::flow::{self, Method, SolverConfig};
use odeform::mesh::laplacian_smooth;
use odeform::metrics::{metrics_report, MetricsReport};
use odeform::net::scale_pyramid;
use odeform::pipeline::{level_total_ms, run_pipeline, PipelineConfig, StageLevel, StageTiming};
use odeform::sdf::{postprocess_sdf, signed_distance_transform, SdfPostprocess};
use odeform::synth::{make_corresponded_pair, make_sdf_volume, ShapeSpec};
use odeform::topology::{correct_topology, correct_topology_full_domain, TopoFixReport};
use odeform::train::{train, TrainConfig, TrainTask};

#[derive(Parser)]
#[command(name = "odeform", version, about = "Learned diffeomorphic surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape: its signed distance volume and,
    /// for star-shaped kinds, a radially mapped triangle mesh.
    Synth {
        /// JSON shape description (kind, parameters, center, seed).
        #[arg(long)]
        spec: PathBuf,
        /// Grid size: one value for a cube ("64") or three ("64,80,96").
        #[arg(long, default_value = "64")]
        dims: String,
        #[arg(long)]
        out_sdf: PathBuf,
        /// Optional binary segmentation mask (interior voxels get label 1).
        #[arg(long)]
        out_mask: Option<PathBuf>,
        /// Optional exact surface mesh (star-shaped kinds only).
        #[arg(long)]
        out_mesh: Option<PathBuf>,
        /// Icosphere subdivision level for --out-mesh.
        #[arg(long, default_value_t = 4)]
        subdiv: u32,
    },
    /// Signed distance transform of one label of a mask, then value
    /// scaling and Gaussian smoothing.
    Sdf {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 1)]
        label: u8,
        #[arg(long)]
        out: PathBuf,
        /// Value scale applied to the raw distances.
        #[arg(long, default_value_t = 1.0 / 16.0)]
        scale: f64,
        /// Gaussian smoothing width in voxels (0 disables smoothing).
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
    },
    /// Enforce spherical topology on a level set of a distance volume.
    Topofix {
        #[arg(long)]
        sdf: PathBuf,
        /// Level whose sublevel set is corrected.
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        alpha_hat: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON report (processed fraction, changed voxels, runtime).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Process the full domain instead of the restricted growth region.
        #[arg(long)]
        full_domain: bool,
    },
    /// Extract a triangle isosurface from a distance volume.
    Extract {
        #[arg(long)]
        sdf: PathBuf,
        #[arg(long, default_value_t = -0.05, allow_hyphen_values = true)]
        level: f64,
        /// Laplacian smoothing iterations applied to the raw surface.
        #[arg(long, default_value_t = 2)]
        smooth_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Surface-distance metrics and self-intersection fraction of a
    /// predicted mesh against a reference mesh.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Surface samples drawn from each mesh.
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Flow a mesh through a trained deformation field.
    Deform {
        #[arg(long)]
        mesh: PathBuf,
        /// Distance volume the network samples its features from.
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Integration scheme: euler, midpoint, or rk4.
        #[arg(long, default_value = "euler")]
        method: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-step snapshot meshes (step_000.obj, ...).
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Fit a deformation network that flows one mesh onto another.
    Train {
        /// Loss: "chamfer" (unmatched surfaces) or "mse" (matched vertices).
        #[arg(long)]
        task: String,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Optional JSON training configuration; omitted fields take
        /// defaults, and --task always overrides the configured task.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional loss-history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Full reconstruction: mask -> distance field -> topology fix ->
    /// initial surface -> two learned flows. Writes inner.obj, outer.obj,
    /// and a run manifest.
    Pipeline {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 1)]
        label: u8,
        /// Optional JSON pipeline configuration (numeric settings plus
        /// optional inner_net/outer_net paths).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained parameters for the first flow (overrides config).
        #[arg(long)]
        inner_net: Option<PathBuf>,
        /// Trained parameters for the second flow (overrides config).
        #[arg(long)]
        outer_net: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Optional reference meshes; when given, metrics are written
        /// next to the outputs.
        #[arg(long)]
        gt_inner: Option<PathBuf>,
        #[arg(long)]
        gt_outer: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { spec, dims, out_sdf, out_mask, out_mesh, subdiv } => {
            cmd_synth(&spec, &dims, &out_sdf, out_mask.as_deref(), out_mesh.as_deref(), subdiv)
        }
        Command::Sdf { mask, label, out, scale, sigma } => {
            cmd_sdf(&mask, label, &out, scale, sigma)
        }
        Command::Topofix { sdf, alpha_hat, out, report, full_domain } => {
            cmd_topofix(&sdf, alpha_hat, &out, report.as_deref(), full_domain)
        }
        Command::Extract { sdf, level, smooth_iters, out } => {
            cmd_extract(&sdf, level, smooth_iters, &out)
        }
        Command::Metrics { pred, gt, out, samples, seed } => {
            cmd_metrics(&pred, &gt, &out, samples, seed)
        }
        Command::Deform { mesh, volume, params, method, steps, horizon, out, snapshots } => {
            cmd_deform(&mesh, &volume, &params, &method, steps, horizon, &out, snapshots.as_deref())
        }
        Command::Train { task, init, target, volume, config, out, history } => {
            cmd_train(&task, &init, &target, &volume, config.as_deref(), &out, history.as_deref())
        }
        Command::Pipeline {
            mask,
            label,
            config,
            inner_net,
            outer_net,
            out_dir,
            gt_inner,
            gt_outer,
        } => cmd_pipeline(
            &mask,
            label,
            config.as_deref(),
            inner_net.as_deref(),
            outer_net.as_deref(),
            &out_dir,
            gt_inner.as_deref(),
            gt_outer.as_deref(),
        ),
    }
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = text.split(',').collect();
    let parse = |t: &str| -> Result<usize> {
        t.trim().parse().map_err(|_| anyhow::anyhow!("bad grid dimension {t:?}"))
    };
    match parts.as_slice() {
        [one] => {
            let n = parse(one)?;
            Ok([n, n, n])
        }
        [x, y, z] => Ok([parse(x)?, parse(y)?, parse(z)?]),
        _ => bail!("--dims takes one value or three comma-separated values, got {text:?}"),
    }
}

fn parse_method(text: &str) -> Result<Method> {
    match text {
        "euler" => Ok(Method::Euler),
        "midpoint" => Ok(Method::Midpoint),
        "rk4" => Ok(Method::Rk4),
        other => bail!("unknown method {other:?} (expected euler, midpoint, or rk4)"),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {what} {}", path.display()))
}

fn cmd_synth(
    spec_path: &Path,
    dims: &str,
    out_sdf: &Path,
    out_mask: Option<&Path>,
    out_mesh: Option<&Path>,
    subdiv: u32,
) -> Result<()> {
    let spec: ShapeSpec = read_json(spec_path, "shape spec")?;
    let dims = parse_dims(dims)?;
    let volume = make_sdf_volume(&spec, dims)?;
    formats::write_volume_vgrid(out_sdf, &volume)?;
    println!("wrote {} ({}x{}x{})", out_sdf.display(), dims[0], dims[1], dims[2]);
    if let Some(mask_path) = out_mask {
        let mask = odeform::volume::LabelMask::from_volume_threshold(&volume, 0.0, 1)?;
        formats::write_mask_vgrid(mask_path, &mask)?;
        println!("wrote {} ({} interior voxels)", mask_path.display(), mask.count(1));
    }
    if let Some(mesh_path) = out_mesh {
        let (mesh, _) = make_corresponded_pair(&spec, &spec, subdiv).with_context(|| {
            "--out-mesh needs a star-shaped kind; run `extract` on the distance volume instead"
        })?;
        formats::write_mesh(mesh_path, &mesh)?;
        println!(
            "wrote {} ({} vertices, {} faces)",
            mesh_path.display(),
            mesh.vertex_count(),
            mesh.face_count()
        );
    }
    Ok(())
}

fn cmd_sdf(mask_path: &Path, label: u8, out: &Path, scale: f64, sigma: f64) -> Result<()> {
    let mask = formats::read_mask_vgrid(mask_path)?;
    let raw = signed_distance_transform(&mask, label)?;
    let post = postprocess_sdf(&raw, &SdfPostprocess { scale, sigma })?;
    formats::write_volume_vgrid(out, &post)?;
    println!("wrote {} (scale {scale}, sigma {sigma})", out.display());
    Ok(())
}

fn cmd_topofix(
    sdf_path: &Path,
    alpha_hat: f64,
    out: &Path,
    report_path: Option<&Path>,
    full_domain: bool,
) -> Result<()> {
    let sdf = formats::read_volume_vgrid(sdf_path)?;
    let (fixed, report) = if full_domain {
        correct_topology_full_domain(&sdf)?
    } else {
        correct_topology(&sdf, alpha_hat)?
    };
    formats::write_volume_vgrid(out, &fixed)?;
    println!(
        "wrote {} ({} voxels changed, {:.2}% of domain processed, {:.0} ms)",
        out.display(),
        report.changed_voxel_count,
        100.0 * report.processed_voxel_fraction,
        report.runtime_ms
    );
    if let Some(path) = report_path {
        formats::write_json(path, &report)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_extract(sdf_path: &Path, level: f64, smooth_iters: usize, out: &Path) -> Result<()> {
    let sdf = formats::read_volume_vgrid(sdf_path)?;
    let raw = odeform::marching::extract_isosurface(&sdf, level)?;
    let mesh = laplacian_smooth(&raw, smooth_iters)?;
    formats::write_mesh(out, &mesh)?;
    println!(
        "wrote {} ({} vertices, {} faces, Euler characteristic {})",
        out.display(),
        mesh.vertex_count(),
        mesh.face_count(),
        mesh.euler_characteristic()
    );
    Ok(())
}

fn cmd_metrics(pred: &Path, gt: &Path, out: &Path, samples: usize, seed: u64) -> Result<()> {
    let pred_mesh = formats::read_mesh(pred)?;
    let gt_mesh = formats::read_mesh(gt)?;
    let report = metrics_report(&pred_mesh, &gt_mesh, samples, seed)?;
    formats::write_json(out, &report)?;
    println!(
        "assd {:.6}  hd90 {:.6}  sif {:.4}%",
        report.assd_mm,
        report.hd90_mm,
        100.0 * report.sif_fraction
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_deform(
    mesh_path: &Path,
    volume_path: &Path,
    params_path: &Path,
    method: &str,
    steps: usize,
    horizon: f64,
    out: &Path,
    snapshots: Option<&Path>,
) -> Result<()> {
    let mesh = formats::read_mesh(mesh_path)?;
    let volume = formats::read_volume_vgrid(volume_path)?;
    let net = formats::read_net(params_path)?;
    let cfg = SolverConfig { method: parse_method(method)?, steps, horizon };
    cfg.validate()?;
    let pyramid = scale_pyramid(&volume, net.hyper().scales)?;
    let field = |x: [f64; 3]| net.forward_cached(x, &pyramid);

    if let Some(dir) = snapshots {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating snapshot directory {}", dir.display()))?;
        let result = flow::integrate_recording(mesh.vertices(), &field, &cfg)?;
        let levels = result.snapshots.expect("recording integration returns snapshots");
        for (i, level) in levels.iter().enumerate() {
            let snap = mesh.with_vertices(level.clone())?;
            formats::write_obj(&dir.join(format!("step_{i:03}.obj")), &snap)?;
        }
        let final_mesh = mesh.with_vertices(result.final_vertices)?;
        formats::write_mesh(out, &final_mesh)?;
        println!("wrote {} and {} snapshots ({} derivative evaluations)", out.display(), levels.len(), result.nfe);
    } else {
        let flowed = flow::flow_mesh(&mesh, &field, &cfg)?;
        formats::write_mesh(out, &flowed)?;
        println!("wrote {} ({} derivative evaluations)", out.display(), cfg.nfe());
    }
    Ok(())
}

fn cmd_train(
    task: &str,
    init: &Path,
    target: &Path,
    volume_path: &Path,
    config: Option<&Path>,
    out: &Path,
    history_path: Option<&Path>,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(path) => read_json(path, "training config")?,
        None => TrainConfig::default(),
    };
    cfg.task = match task {
        "chamfer" => TrainTask::ChamferFit,
        "mse" => TrainTask::CorrespondedFit,
        other => bail!("unknown task {other:?} (expected chamfer or mse)"),
    };
    let initial = formats::read_mesh(init)?;
    let target_mesh = formats::read_mesh(target)?;
    let volume = formats::read_volume_vgrid(volume_path)?;

    let started = Instant::now();
    let (net, history) = train(&initial, &target_mesh, &volume, &cfg)?;
    let seconds = started.elapsed().as_secs_f64();

    formats::write_net(out, &net)?;
    let last = history.last();
    println!(
        "trained {} epochs in {seconds:.1}s; final sampled loss {}",
        history.len(),
        last.map_or(f64::NAN, |r| r.sampled_loss)
    );
    println!("wrote {}", out.display());
    if let Some(path) = history_path {
        formats::write_history_csv(path, &history)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Pipeline configuration as read from disk: the numeric settings plus
/// optional default parameter-file paths.
#[derive(Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
struct CliPipelineConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    inner_net: Option<String>,
    outer_net: Option<String>,
}

/// Everything needed to reproduce and audit one pipeline run.
#[derive(Debug, serde::Serialize)]
struct RunManifest {
    version: String,
    label: u8,
    config: PipelineConfig,
    inner_net: String,
    outer_net: String,
    timings: Vec<StageTiming>,
    volume_ms: f64,
    surface_ms: f64,
    topology_fix: TopoFixReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    inner_metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outer_metrics: Option<MetricsReport>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_pipeline(
    mask_path: &Path,
    label: u8,
    config: Option<&Path>,
    inner_net_flag: Option<&Path>,
    outer_net_flag: Option<&Path>,
    out_dir: &Path,
    gt_inner: Option<&Path>,
    gt_outer: Option<&Path>,
) -> Result<()> {
    let cli_cfg: CliPipelineConfig = match config {
        Some(path) => read_json(path, "pipeline config")?,
        None => CliPipelineConfig::default(),
    };
    let resolve = |flag: Option<&Path>, from_cfg: &Option<String>, which: &str| -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = from_cfg {
            return Ok(PathBuf::from(p));
        }
        bail!("no {which} parameter file: pass --{which} or set it in the config")
    };
    let inner_path = resolve(inner_net_flag, &cli_cfg.inner_net, "inner-net")?;
    let outer_path = resolve(outer_net_flag, &cli_cfg.outer_net, "outer-net")?;

    let mask = formats::read_mask_vgrid(mask_path)?;
    let inner_net = formats::read_net(&inner_path)?;
    let outer_net = formats::read_net(&outer_path)?;

    let output = run_pipeline(&mask, label, &inner_net, &outer_net, &cli_cfg.pipeline)?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let inner_obj = out_dir.join("inner.obj");
    let outer_obj = out_dir.join("outer.obj");
    formats::write_obj(&inner_obj, &output.inner_mesh)?;
    formats::write_obj(&outer_obj, &output.outer_mesh)?;

    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        label,
        config: cli_cfg.pipeline,
        inner_net: inner_path.display().to_string(),
        outer_net: outer_path.display().to_string(),
        volume_ms: level_total_ms(&output.timings, StageLevel::Volume),
        surface_ms: level_total_ms(&output.timings, StageLevel::Surface),
        timings: output.timings,
        topology_fix: output.topo_report,
        inner_metrics: None,
        outer_metrics: None,
    };
    for (gt, mesh, slot, name) in [
        (gt_inner, &output.inner_mesh, &mut manifest.inner_metrics, "inner"),
        (gt_outer, &output.outer_mesh, &mut manifest.outer_metrics, "outer"),
    ] {
        if let Some(gt_path) = gt {
            let gt_mesh = formats::read_mesh(gt_path)?;
            let report = metrics_report(mesh, &gt_mesh, 4000, 0)?;
            formats::write_json(&out_dir.join(format!("{name}_metrics.json")), &report)?;
            *slot = Some(report);
        }
    }
    formats::write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!(
        "wrote {}: inner.obj, outer.obj, manifest.json ({:.0} ms volume, {:.0} ms surface)",
        out_dir.display(),
        manifest.volume_ms,
        manifest.surface_ms
    );
    Ok(())
}
