//! End-to-end surface reconstruction: a segmentation mask is distilled to
//! a smoothed signed distance field, its topology corrected to a sphere's,
//! an initial surface extracted and conditioned, and two learned flows
//! carry that surface to the inner and outer boundaries. Every stage is
//! timed and labeled volume- or surface-level.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::{flow_mesh, SolverConfig};
use crate::intersect::self_intersection_ratio;
use crate::marching::extract_isosurface;
use crate::mesh::{inflate_and_smooth, laplacian_smooth, TriangleMesh};
use crate::net::{scale_pyramid, DeformNetParams};
use crate::sdf::{postprocess_sdf, signed_distance_transform, SdfPostprocess};
use crate::topology::{correct_topology, TopoFixReport};
use crate::volume::{largest_connected_component, LabelMask};

/// Inflation settings applied between the two flows.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InflateSettings {
    pub iterations: usize,
    pub rho: f64,
}

impl Default for InflateSettings {
    fn default() -> Self {
        Self { iterations: 2, rho: 0.002 }
    }
}

/// Numeric settings of one pipeline run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Level the topology correction enforces spherical topology at.
    pub alpha_hat: f64,
    /// Level the initial surface is extracted at.
    pub alpha0: f64,
    /// Value scaling applied to the raw signed distance field.
    pub sdf_scale: f64,
    /// Gaussian smoothing applied after scaling.
    pub gaussian_sigma: f64,
    /// Laplacian smoothing iterations on the freshly extracted surface.
    pub initial_smooth_iters: usize,
    pub inflate: InflateSettings,
    pub inner_solver: SolverConfig,
    pub outer_solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha_hat: -1.0,
            alpha0: -0.05,
            sdf_scale: 1.0 / 16.0,
            gaussian_sigma: 0.5,
            initial_smooth_iters: 2,
            inflate: InflateSettings::default(),
            inner_solver: SolverConfig::default(),
            outer_solver: SolverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_hat.is_finite() && self.alpha0.is_finite()) {
            return Err(Error::InvalidInput("pipeline levels must be finite".into()));
        }
        // The correction level must sit strictly below the extraction
        // level, which must sit strictly outside the surface.
        if !(self.alpha_hat < self.alpha0 && self.alpha0 < 0.0) {
            return Err(Error::InvalidInput(format!(
                "levels must satisfy alpha_hat < alpha0 < 0, got {} and {}",
                self.alpha_hat, self.alpha0
            )));
        }
        if !(self.sdf_scale.is_finite() && self.sdf_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sdf_scale must be positive and finite, got {}",
                self.sdf_scale
            )));
        }
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "gaussian_sigma must be non-negative and finite, got {}",
                self.gaussian_sigma
            )));
        }
        if !(self.inflate.rho.is_finite() && self.inflate.rho >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "inflation rho must be non-negative and finite, got {}",
                self.inflate.rho
            )));
        }
        self.inner_solver.validate()?;
        self.outer_solver.validate()
    }
}

/// Which half of the runtime budget a stage belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLevel {
    Volume,
    Surface,
}

/// Wall-clock record of one pipeline stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub level: StageLevel,
    pub millis: f64,
}

/// Sum of stage times for one level, in milliseconds.
pub fn level_total_ms(timings: &[StageTiming], level: StageLevel) -> f64 {
    timings.iter().filter(|t| t.level == level).map(|t| t.millis).sum()
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub inner_mesh: TriangleMesh,
    pub outer_mesh: TriangleMesh,
    pub timings: Vec<StageTiming>,
    pub topo_report: TopoFixReport,
}

fn time_stage<T>(
    timings: &mut Vec<StageTiming>,
    name: &str,
    level: StageLevel,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| match e {
        already @ Error::PipelineCheck { .. } => already,
        other => Error::PipelineCheck { stage: name.into(), reason: other.to_string() },
    })?;
    timings.push(StageTiming {
        name: name.into(),
        level,
        millis: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok(out)
}

/// Run the full mask-to-surfaces pipeline for one label of a segmentation
/// mask, using trained (or identity) deformation networks for the two
/// flows. Both flows sample the corrected, postprocessed distance field.
pub fn run_pipeline(
    mask: &LabelMask,
    label: u8,
    inner_net: &DeformNetParams,
    outer_net: &DeformNetParams,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut timings = Vec::new();

    let component = time_stage(&mut timings, "largest_connected_component", StageLevel::Volume, || {
        largest_connected_component(mask, label)
    })?;
    let sdf = time_stage(&mut timings, "signed_distance_transform", StageLevel::Volume, || {
        signed_distance_transform(&component, label)
    })?;
    let post = time_stage(&mut timings, "sdf_postprocess", StageLevel::Volume, || {
        postprocess_sdf(&sdf, &SdfPostprocess { scale: cfg.sdf_scale, sigma: cfg.gaussian_sigma })
    })?;
    let (corrected, topo_report) =
        time_stage(&mut timings, "correct_topology", StageLevel::Volume, || {
            correct_topology(&post, cfg.alpha_hat)
        })?;

    let raw_surface = time_stage(&mut timings, "extract_isosurface", StageLevel::Surface, || {
        let mesh = extract_isosurface(&corrected, cfg.alpha0)?;
        let chi = mesh.euler_characteristic();
        if chi != 2 {
            return Err(Error::PipelineCheck {
                stage: "extract_isosurface".into(),
                reason: format!(
                    "surface has Euler characteristic {chi} after correction, expected 2"
                ),
            });
        }
        Ok(mesh)
    })?;
    let smoothed = time_stage(&mut timings, "initial_smooth", StageLevel::Surface, || {
        laplacian_smooth(&raw_surface, cfg.initial_smooth_iters)
    })?;
    time_stage(&mut timings, "pre_flow_check", StageLevel::Surface, || {
        let chi = smoothed.euler_characteristic();
        if chi != 2 {
            return Err(Error::PipelineCheck {
                stage: "pre_flow_check".into(),
                reason: format!("initial surface has Euler characteristic {chi}, expected 2"),
            });
        }
        let (sif, _) = self_intersection_ratio(&smoothed);
        if sif != 0.0 {
            return Err(Error::PipelineCheck {
                stage: "pre_flow_check".into(),
                reason: format!("initial surface self-intersects ({sif:.6} of faces)"),
            });
        }
        Ok(())
    })?;

    let inner_mesh = time_stage(&mut timings, "flow_inner", StageLevel::Surface, || {
        let pyramid = scale_pyramid(&corrected, inner_net.hyper().scales)?;
        flow_mesh(&smoothed, &|x| inner_net.forward_cached(x, &pyramid), &cfg.inner_solver)
    })?;
    let inflated = time_stage(&mut timings, "inflate_and_smooth", StageLevel::Surface, || {
        inflate_and_smooth(&inner_mesh, cfg.inflate.iterations, cfg.inflate.rho)
    })?;
    let outer_mesh = time_stage(&mut timings, "flow_outer", StageLevel::Surface, || {
        let pyramid = scale_pyramid(&corrected, outer_net.hyper().scales)?;
        flow_mesh(&inflated, &|x| outer_net.forward_cached(x, &pyramid), &cfg.outer_solver)
    })?;

    Ok(PipelineOutput { inner_mesh, outer_mesh, timings, topo_report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetHyper;
    use crate::synth::{make_sdf_volume, ShapeKind, ShapeSpec};

    fn handle_sphere_mask() -> LabelMask {
        let spec = ShapeSpec {
            kind: ShapeKind::HandleSphere { radius: 12.0, ring_radius: 6.0, tube_radius: 2.2 },
            center: [32.0; 3],
            seed: 0,
        };
        let vol = make_sdf_volume(&spec, [64, 64, 64]).unwrap();
        LabelMask::from_volume_threshold(&vol, 0.0, 1).unwrap()
    }

    fn identity_net(seed: u64) -> DeformNetParams {
        let hyper = NetHyper { scales: 2, cube_width: 3, channels: 8, hidden: 8 };
        DeformNetParams::seeded(hyper, seed).unwrap()
    }

    #[test]
    fn identity_networks_isolate_the_volumetric_half() {
        let mask = handle_sphere_mask();
        let cfg = PipelineConfig::default();
        let out =
            run_pipeline(&mask, 1, &identity_net(1), &identity_net(2), &cfg).unwrap();

        // The genus-1 input must come out spherical and intersection-free.
        assert_eq!(out.inner_mesh.euler_characteristic(), 2);
        assert_eq!(out.outer_mesh.euler_characteristic(), 2);
        assert!(out.inner_mesh.is_closed_manifold());
        assert_eq!(self_intersection_ratio(&out.inner_mesh).0, 0.0);
        assert!(out.topo_report.changed_voxel_count > 0, "a handle had to be cut");

        // With identity flows the inner mesh is exactly the conditioned
        // initial surface, and the outer mesh is exactly its inflation.
        let component = largest_connected_component(&mask, 1).unwrap();
        let sdf = signed_distance_transform(&component, 1).unwrap();
        let post = postprocess_sdf(
            &sdf,
            &SdfPostprocess { scale: cfg.sdf_scale, sigma: cfg.gaussian_sigma },
        )
        .unwrap();
        let (corrected, _) = correct_topology(&post, cfg.alpha_hat).unwrap();
        let reference = laplacian_smooth(
            &extract_isosurface(&corrected, cfg.alpha0).unwrap(),
            cfg.initial_smooth_iters,
        )
        .unwrap();
        assert_eq!(out.inner_mesh.vertices(), reference.vertices());
        assert_eq!(out.inner_mesh.faces(), reference.faces());
        let inflated = inflate_and_smooth(&reference, 2, 0.002).unwrap();
        assert_eq!(out.outer_mesh.vertices(), inflated.vertices());

        // Complete timing manifest with the volume/surface split.
        let names: Vec<&str> = out.timings.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "largest_connected_component",
                "signed_distance_transform",
                "sdf_postprocess",
                "correct_topology",
                "extract_isosurface",
                "initial_smooth",
                "pre_flow_check",
                "flow_inner",
                "inflate_and_smooth",
                "flow_outer",
            ]
        );
        assert!(out.timings.iter().all(|t| t.millis >= 0.0));
        assert_eq!(
            out.timings.iter().filter(|t| t.level == StageLevel::Volume).count(),
            4,
            "volumetric stages: component, distance, postprocess, correction"
        );
        assert!(level_total_ms(&out.timings, StageLevel::Volume) > 0.0);
        assert!(level_total_ms(&out.timings, StageLevel::Surface) > 0.0);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let mask = handle_sphere_mask();
        let cfg = PipelineConfig::default();
        let inner = identity_net(3);
        let outer = identity_net(4);
        let a = run_pipeline(&mask, 1, &inner, &outer, &cfg).unwrap();
        let b = run_pipeline(&mask, 1, &inner, &outer, &cfg).unwrap();
        assert_eq!(a.inner_mesh.vertices(), b.inner_mesh.vertices());
        assert_eq!(a.outer_mesh.vertices(), b.outer_mesh.vertices());
        assert_eq!(a.inner_mesh.faces(), b.inner_mesh.faces());
    }

    #[test]
    fn level_ordering_is_validated() {
        let bad_order = PipelineConfig { alpha_hat: -0.05, alpha0: -1.0, ..Default::default() };
        assert!(bad_order.validate().is_err());
        let bad_sign = PipelineConfig { alpha_hat: -1.0, alpha0: 0.5, ..Default::default() };
        assert!(bad_sign.validate().is_err());
        let equal = PipelineConfig { alpha_hat: -0.05, alpha0: -0.05, ..Default::default() };
        assert!(equal.validate().is_err());
    }

    #[test]
    fn stage_errors_carry_the_stage_name() {
        let mask = handle_sphere_mask();
        let err = run_pipeline(&mask, 9, &identity_net(1), &identity_net(2), &Default::default())
            .unwrap_err();
        match err {
            Error::PipelineCheck { stage, reason } => {
                assert_eq!(stage, "largest_connected_component");
                assert!(reason.contains('9'), "reason should name the label: {reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
