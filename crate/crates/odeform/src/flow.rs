//! Fixed-step explicit ODE integration of point sets under a derivative
//! field, with function-evaluation accounting and trajectory diagnostics.
//!
//! The field is autonomous: it maps a position to a velocity and may fail
//! (for example on shape mismatches); failures abort the integration.
//! Points advance independently — the integrator parallelizes over them and
//! is deterministic because each trajectory depends only on its own start.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::vec3;

/// Explicit fixed-step scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    /// Derivative evaluations per step.
    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
        }
    }
}

/// Integration schedule: `steps` equal steps of size `horizon / steps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
    pub horizon: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Euler, steps: 10, horizon: 1.0 }
    }
}

impl SolverConfig {
    pub fn new(method: Method, steps: usize) -> Self {
        Self { method, steps, horizon: 1.0 }
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nfe(&self) -> usize {
        self.steps * self.method.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidInput("integration needs at least one step".into()));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "integration horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Outcome of an integration run.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub final_vertices: Vec<[f64; 3]>,
    /// Positions at every time level (including the start), when recorded.
    pub snapshots: Option<Vec<Vec<[f64; 3]>>>,
    /// Derivative evaluations per trajectory: steps × stages.
    pub nfe: usize,
}

fn advance<F>(x: [f64; 3], field: &F, method: Method, h: f64) -> Result<[f64; 3]>
where
    F: Fn([f64; 3]) -> Result<[f64; 3]>,
{
    Ok(match method {
        Method::Euler => {
            let k1 = field(x)?;
            vec3::add(x, vec3::scale(k1, h))
        }
        Method::Midpoint => {
            let k1 = field(x)?;
            let k2 = field(vec3::add(x, vec3::scale(k1, h / 2.0)))?;
            vec3::add(x, vec3::scale(k2, h))
        }
        Method::Rk4 => {
            let k1 = field(x)?;
            let k2 = field(vec3::add(x, vec3::scale(k1, h / 2.0)))?;
            let k3 = field(vec3::add(x, vec3::scale(k2, h / 2.0)))?;
            let k4 = field(vec3::add(x, vec3::scale(k3, h)))?;
            let sum = vec3::add(vec3::add(k1, vec3::scale(k2, 2.0)), vec3::add(vec3::scale(k3, 2.0), k4));
            vec3::add(x, vec3::scale(sum, h / 6.0))
        }
    })
}

fn run<F>(
    vertices: &[[f64; 3]],
    field: &F,
    cfg: &SolverConfig,
    record: bool,
) -> Result<FlowResult>
where
    F: Fn([f64; 3]) -> Result<[f64; 3]> + Sync,
{
    cfg.validate()?;
    let h = cfg.step_size();
    let mut current = vertices.to_vec();
    let mut snapshots = record.then(|| vec![current.clone()]);
    for step in 0..cfg.steps {
        let next: Result<Vec<[f64; 3]>> = current
            .par_iter()
            .map(|&x| {
                let y = advance(x, field, cfg.method, h)?;
                if y.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFiniteFlow { step });
                }
                Ok(y)
            })
            .collect();
        current = next?;
        if let Some(s) = snapshots.as_mut() {
            s.push(current.clone());
        }
    }
    Ok(FlowResult { final_vertices: current, snapshots, nfe: cfg.nfe() })
}

/// Advance every point through `cfg.steps` steps of the selected scheme.
pub fn integrate<F>(vertices: &[[f64; 3]], field: &F, cfg: &SolverConfig) -> Result<FlowResult>
where
    F: Fn([f64; 3]) -> Result<[f64; 3]> + Sync,
{
    run(vertices, field, cfg, false)
}

/// `integrate`, additionally recording positions at every time level.
pub fn integrate_recording<F>(
    vertices: &[[f64; 3]],
    field: &F,
    cfg: &SolverConfig,
) -> Result<FlowResult>
where
    F: Fn([f64; 3]) -> Result<[f64; 3]> + Sync,
{
    run(vertices, field, cfg, true)
}

/// Flow a mesh's vertices through the field; connectivity is untouched.
pub fn flow_mesh<F>(mesh: &TriangleMesh, field: &F, cfg: &SolverConfig) -> Result<TriangleMesh>
where
    F: Fn([f64; 3]) -> Result<[f64; 3]> + Sync,
{
    let result = integrate(mesh.vertices(), field, cfg)?;
    mesh.with_vertices(result.final_vertices)
}

/// Minimum pairwise distance among tracked points over every recorded time
/// level (including the start).
///
/// Distinct trajectories of a Lipschitz field never meet; this measures how
/// close a discrete integration comes. Duplicate input points are rejected
/// because the quantity is identically zero for them.
pub fn min_pairwise_trajectory_gap<F>(
    points: &[[f64; 3]],
    field: &F,
    cfg: &SolverConfig,
) -> Result<f64>
where
    F: Fn([f64; 3]) -> Result<[f64; 3]> + Sync,
{
    if points.len() < 2 {
        return Err(Error::InvalidInput("trajectory gap needs at least two points".into()));
    }
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if points[i] == points[j] {
                return Err(Error::InvalidInput(format!(
                    "points {i} and {j} coincide; the gap is defined for distinct starts"
                )));
            }
        }
    }
    let result = integrate_recording(points, field, cfg)?;
    let snapshots = result.snapshots.expect("recording run returns snapshots");
    let gap = snapshots
        .par_iter()
        .map(|level| {
            let mut min = f64::INFINITY;
            for i in 0..level.len() {
                for j in (i + 1)..level.len() {
                    min = min.min(vec3::dist2(level[i], level[j]));
                }
            }
            min
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(gap.sqrt())
}
