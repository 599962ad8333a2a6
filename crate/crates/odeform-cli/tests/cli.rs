//! End-to-end tests of the `odeform` binary: every subcommand is driven
//! through its public interface on files in a temporary directory.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odeform::net::{DeformNetParams, NetHyper};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_odeform"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning the binary");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning the binary");
    assert!(!out.status.success(), "command {:?} unexpectedly succeeded", cmd);
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Write a zero-velocity-field parameter file in the documented layout
/// (JSON header line + little-endian doubles), independently of the
/// binary's own writer — doubling as an interoperability check.
fn write_identity_net(path: &Path, seed: u64) {
    let hyper = NetHyper { scales: 2, cube_width: 3, channels: 8, hidden: 8 };
    let net = DeformNetParams::seeded(hyper, seed).unwrap();
    let header = serde_json::json!({
        "format": "dnet-v1",
        "hyper": {"scales": 2, "cube_width": 3, "channels": 8, "hidden": 8},
        "param_count": net.param_count(),
        "activation": "leaky_relu_0.2",
    });
    let mut bytes = serde_json::to_vec(&header).unwrap();
    bytes.push(b'\n');
    for &p in net.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, bytes).unwrap();
}

fn write_sphere_spec(path: &Path, radius: f64, center: [f64; 3]) {
    let spec = serde_json::json!({
        "kind": "sphere",
        "radius": radius,
        "center": center,
        "seed": 0,
    });
    std::fs::write(path, serde_json::to_string(&spec).unwrap()).unwrap();
}

struct Workdir {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workdir {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workdir { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

#[test]
fn volume_chain_from_shape_to_metrics() {
    let w = Workdir::new();
    write_sphere_spec(&w.path("spec.json"), 10.0, [24.0, 24.0, 24.0]);

    run_ok(bin().args([
        "synth",
        "--spec", &w.arg("spec.json"),
        "--dims", "48",
        "--out-sdf", &w.arg("analytic.vgrid"),
        "--out-mask", &w.arg("mask.vgrid"),
        "--out-mesh", &w.arg("exact.obj"),
        "--subdiv", "3",
    ]));
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("analytic.vgrid.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["dims"], serde_json::json!([48, 48, 48]));
    assert_eq!(sidecar["dtype"], "f32");
    assert_eq!(sidecar["order"], "x-fastest");

    run_ok(bin().args([
        "sdf",
        "--mask", &w.arg("mask.vgrid"),
        "--out", &w.arg("sdf.vgrid"),
    ]));

    run_ok(bin().args([
        "topofix",
        "--sdf", &w.arg("sdf.vgrid"),
        "--alpha-hat", "-1.0",
        "--out", &w.arg("fixed.vgrid"),
        "--report", &w.arg("report.json"),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("report.json")).unwrap()).unwrap();
    for key in ["processed_voxel_fraction", "changed_voxel_count", "seed_count", "runtime_ms"] {
        assert!(report.get(key).is_some(), "topology report lacks {key}");
    }
    // A plain sphere is already spherical: correction must not touch it.
    assert_eq!(report["changed_voxel_count"], 0);

    run_ok(bin().args([
        "extract",
        "--sdf", &w.arg("fixed.vgrid"),
        "--level", "-0.05",
        "--smooth-iters", "2",
        "--out", &w.arg("surf.obj"),
    ]));

    run_ok(bin().args([
        "metrics",
        "--pred", &w.arg("surf.obj"),
        "--gt", &w.arg("exact.obj"),
        "--out", &w.arg("metrics.json"),
        "--samples", "2000",
        "--seed", "1",
    ]));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("metrics.json")).unwrap()).unwrap();
    let assd = metrics["assd_mm"].as_f64().unwrap();
    assert!(assd < 1.0, "extracted sphere should sit within a voxel of truth, assd {assd}");
    assert_eq!(metrics["n_samples"], 2000);
    assert_eq!(metrics["seed"], 1);
}

#[test]
fn deform_with_zero_field_returns_the_input_and_snapshots() {
    let w = Workdir::new();
    write_sphere_spec(&w.path("spec.json"), 8.0, [16.0, 16.0, 16.0]);
    run_ok(bin().args([
        "synth",
        "--spec", &w.arg("spec.json"),
        "--dims", "32",
        "--out-sdf", &w.arg("sdf.vgrid"),
        "--out-mesh", &w.arg("mesh.obj"),
        "--subdiv", "2",
    ]));
    write_identity_net(&w.path("id.bin"), 7);

    run_ok(bin().args([
        "deform",
        "--mesh", &w.arg("mesh.obj"),
        "--volume", &w.arg("sdf.vgrid"),
        "--params", &w.arg("id.bin"),
        "--method", "rk4",
        "--steps", "3",
        "--out", &w.arg("flowed.obj"),
        "--snapshots", &w.arg("snaps"),
    ]));

    // Zero velocity everywhere: the flowed mesh is bit-identical.
    assert_eq!(
        std::fs::read(w.path("mesh.obj")).unwrap(),
        std::fs::read(w.path("flowed.obj")).unwrap()
    );
    // Snapshots cover every time level, start included.
    for i in 0..=3 {
        assert!(w.path(&format!("snaps/step_{i:03}.obj")).exists(), "missing snapshot {i}");
    }
    assert!(!w.path("snaps/step_004.obj").exists());

    let err = run_err(bin().args([
        "deform",
        "--mesh", &w.arg("mesh.obj"),
        "--volume", &w.arg("sdf.vgrid"),
        "--params", &w.arg("id.bin"),
        "--method", "leapfrog",
        "--out", &w.arg("x.obj"),
    ]));
    assert!(err.contains("leapfrog"), "unknown method should be named: {err}");
}

#[test]
fn train_writes_parameters_and_history() {
    let w = Workdir::new();
    write_sphere_spec(&w.path("a.json"), 4.0, [16.0, 16.0, 16.0]);
    write_sphere_spec(&w.path("b.json"), 4.4, [16.0, 16.0, 16.0]);
    run_ok(bin().args([
        "synth",
        "--spec", &w.arg("a.json"),
        "--dims", "32",
        "--out-sdf", &w.arg("unused.vgrid"),
        "--out-mesh", &w.arg("a.obj"),
        "--subdiv", "2",
    ]));
    run_ok(bin().args([
        "synth",
        "--spec", &w.arg("b.json"),
        "--dims", "32",
        "--out-sdf", &w.arg("sdf.vgrid"),
        "--out-mesh", &w.arg("b.obj"),
        "--subdiv", "2",
    ]));
    std::fs::write(
        w.path("train.json"),
        serde_json::to_string(&serde_json::json!({
            "epochs": 3,
            "learning_rate": 1e-4,
            "sample_m": 100,
            "solver": {"method": "euler", "steps": 4, "horizon": 1.0},
            "seed": 5,
            "hyper": {"scales": 2, "cube_width": 3, "channels": 8, "hidden": 8},
        }))
        .unwrap(),
    )
    .unwrap();

    run_ok(bin().args([
        "train",
        "--task", "mse",
        "--init", &w.arg("a.obj"),
        "--target", &w.arg("b.obj"),
        "--volume", &w.arg("sdf.vgrid"),
        "--config", &w.arg("train.json"),
        "--out", &w.arg("net.bin"),
        "--history", &w.arg("hist.csv"),
    ]));

    let hist = std::fs::read_to_string(w.path("hist.csv")).unwrap();
    let lines: Vec<&str> = hist.trim_end().split('\n').collect();
    assert_eq!(lines[0], "epoch,sampled_loss,fullset_loss");
    assert_eq!(lines.len(), 4, "3 epochs after the header: {hist}");
    assert!(lines[1].starts_with("0,"), "{hist}");

    // The trained parameter file must be loadable by the flow command.
    run_ok(bin().args([
        "deform",
        "--mesh", &w.arg("a.obj"),
        "--volume", &w.arg("sdf.vgrid"),
        "--params", &w.arg("net.bin"),
        "--steps", "4",
        "--out", &w.arg("moved.obj"),
    ]));
}

#[test]
fn pipeline_produces_meshes_and_a_complete_manifest() {
    let w = Workdir::new();
    let spec = serde_json::json!({
        "kind": "handle_sphere",
        "radius": 12.0,
        "ring_radius": 6.0,
        "tube_radius": 2.2,
        "center": [32.0, 32.0, 32.0],
        "seed": 0,
    });
    std::fs::write(w.path("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    run_ok(bin().args([
        "synth",
        "--spec", &w.arg("spec.json"),
        "--dims", "64",
        "--out-sdf", &w.arg("analytic.vgrid"),
        "--out-mask", &w.arg("mask.vgrid"),
    ]));
    write_identity_net(&w.path("inner.bin"), 1);
    write_identity_net(&w.path("outer.bin"), 2);
    // Parameter paths in the config file, not on the command line.
    std::fs::write(
        w.path("pipe.json"),
        serde_json::to_string(&serde_json::json!({
            "inner_net": w.arg("inner.bin"),
            "outer_net": w.arg("outer.bin"),
        }))
        .unwrap(),
    )
    .unwrap();

    run_ok(bin().args([
        "pipeline",
        "--mask", &w.arg("mask.vgrid"),
        "--config", &w.arg("pipe.json"),
        "--out-dir", &w.arg("out"),
    ]));

    assert!(w.path("out/inner.obj").exists());
    assert!(w.path("out/outer.obj").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("out/manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["version"].as_str().is_some());
    assert_eq!(manifest["label"], 1);
    assert_eq!(manifest["config"]["alpha_hat"], -1.0);
    let timings = manifest["timings"].as_array().unwrap();
    assert_eq!(timings.len(), 10, "one entry per stage: {timings:?}");
    assert!(manifest["volume_ms"].as_f64().unwrap() > 0.0);
    assert!(manifest["surface_ms"].as_f64().unwrap() > 0.0);
    // The handle must actually have been cut.
    assert!(manifest["topology_fix"]["changed_voxel_count"].as_f64().unwrap() > 0.0);

    // A reference mesh turns on metric reporting.
    run_ok(bin().args([
        "pipeline",
        "--mask", &w.arg("mask.vgrid"),
        "--inner-net", &w.arg("inner.bin"),
        "--outer-net", &w.arg("outer.bin"),
        "--out-dir", &w.arg("out2"),
        "--gt-inner", &w.arg("out/inner.obj"),
    ]));
    let manifest2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("out2/manifest.json")).unwrap())
            .unwrap();
    // Same mask, same nets, default config: the run is deterministic, so
    // comparing against the first run's mesh gives exactly zero distance.
    let assd = manifest2["inner_metrics"]["assd_mm"].as_f64().unwrap();
    assert!(assd < 1e-9, "deterministic rerun should match exactly, assd {assd}");
    assert!(w.path("out2/inner_metrics.json").exists());
    assert!(manifest2.get("outer_metrics").is_none());
}

#[test]
fn helpful_errors_for_bad_inputs() {
    let w = Workdir::new();

    // Missing input file.
    let err = run_err(bin().args([
        "metrics",
        "--pred", &w.arg("nope.obj"),
        "--gt", &w.arg("nope.obj"),
        "--out", &w.arg("m.json"),
    ]));
    assert!(err.contains("nope.obj"), "{err}");

    // Malformed mesh: the byte offset of the bad record is reported.
    std::fs::write(w.path("bad.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 oops\n").unwrap();
    let err = run_err(bin().args([
        "metrics",
        "--pred", &w.arg("bad.obj"),
        "--gt", &w.arg("bad.obj"),
        "--out", &w.arg("m.json"),
    ]));
    assert!(err.contains("at byte 24"), "{err}");

    // Meshes are only exact for star-shaped kinds.
    let spec = serde_json::json!({
        "kind": "torus",
        "ring_radius": 8.0,
        "tube_radius": 3.0,
        "center": [16.0, 16.0, 16.0],
        "seed": 0,
    });
    std::fs::write(w.path("torus.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let err = run_err(bin().args([
        "synth",
        "--spec", &w.arg("torus.json"),
        "--dims", "32",
        "--out-sdf", &w.arg("t.vgrid"),
        "--out-mesh", &w.arg("t.obj"),
    ]));
    assert!(err.contains("extract"), "should point at the extract command: {err}");

    // Pipeline without parameter files from either source.
    std::fs::write(w.path("mask.vgrid"), [0u8; 8]).unwrap();
    let err = run_err(bin().args([
        "pipeline",
        "--mask", &w.arg("mask.vgrid"),
        "--out-dir", &w.arg("out"),
    ]));
    assert!(err.contains("inner-net"), "{err}");
}
