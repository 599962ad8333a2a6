//! Discretize-then-optimize training of the deformation network: the flow
//! is unrolled for a fixed number of solver steps, the loss (Chamfer or
//! corresponded mean-squared error) is evaluated on a sampled vertex
//! subset, and gradients are backpropagated step by step through the
//! recorded trajectory (reverse-mode through the solver, not a continuous
//! adjoint) into an Adam update.

use rayon::prelude::*;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{integrate, Method, SolverConfig};
use crate::mesh::TriangleMesh;
use crate::metrics::{chamfer_loss, mse_points, nearest_neighbors};
use crate::net::{scale_pyramid, DeformNetParams, NetHyper, Workspace};
use crate::vec3;
use crate::volume::Volume;

/// Which objective the run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTask {
    /// Bidirectional Chamfer loss between sampled predicted vertices and
    /// sampled target vertices; meshes may differ in connectivity.
    ChamferFit,
    /// Mean squared displacement over matched vertex indices; requires
    /// equal vertex counts (corresponded meshes).
    CorrespondedFit,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: TrainTask,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Vertices sampled per epoch (without replacement, from each mesh).
    pub sample_m: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Network shape used when the run constructs its own parameters.
    pub hyper: NetHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TrainTask::ChamferFit,
            epochs: 400,
            learning_rate: 1e-4,
            sample_m: 2000,
            solver: SolverConfig::default(),
            seed: 0,
            hyper: NetHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("training needs at least one epoch".into()));
        }
        if self.sample_m == 0 {
            return Err(Error::InvalidInput("sample_m must be at least 1".into()));
        }
        self.solver.validate()?;
        self.hyper.validate()
    }
}

/// First and second moment accumulators of the Adam optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { first: vec![0.0; n_params], second: vec![0.0; n_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place. `path_of` names a parameter
/// index for the non-finite-gradient error.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    path_of: impl Fn(usize) -> String,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { path: path_of(i) });
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = ADAM_BETA1 * state.first[i] + (1.0 - ADAM_BETA1) * g;
        state.second[i] = ADAM_BETA2 * state.second[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.first[i] / bias1;
        let v_hat = state.second[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// `m` distinct vertex indices drawn uniformly, deterministic per seed.
pub fn sample_vertices(mesh: &TriangleMesh, m: usize, seed: u64) -> Result<Vec<u32>> {
    let count = mesh.vertex_count();
    if m == 0 || m > count {
        return Err(Error::InvalidInput(format!(
            "cannot sample {m} of {count} vertices"
        )));
    }
    Ok(sample_indices(count, m, seed))
}

/// Partial Fisher–Yates draw of `m` indices from `0..count`.
fn sample_indices(count: usize, m: usize, seed: u64) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..count as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..m {
        let j = rng.gen_range(i..count);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One row of the loss history. The loss over the full vertex sets is
/// recorded every tenth epoch and on the last.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sampled_loss: f64,
    pub fullset_loss: Option<f64>,
}

/// Per-vertex trajectory record: the final position plus every solver
/// stage point that the backward pass revisits, step-major.
struct Recorded {
    finals: Vec<[f64; 3]>,
    stages: Vec<Vec<[f64; 3]>>,
}

fn stages_per_step(method: Method) -> usize {
    match method {
        Method::Euler => 1,
        Method::Midpoint => 2,
        Method::Rk4 => 4,
    }
}

/// Forward integration that records stage points, mirroring the flow
/// module's arithmetic operation for operation so finals agree bitwise.
fn flow_recording(
    points: &[[f64; 3]],
    net: &DeformNetParams,
    pyramid: &[Volume],
    solver: &SolverConfig,
) -> Result<Recorded> {
    let h = solver.step_size();
    let per_vertex: Result<Vec<([f64; 3], Vec<[f64; 3]>)>> = points
        .par_iter()
        .map(|&start| {
            let mut x = start;
            let mut trail = Vec::with_capacity(solver.steps * stages_per_step(solver.method));
            for step in 0..solver.steps {
                let fin = |p: [f64; 3]| p.iter().all(|c| c.is_finite());
                let field = |p: [f64; 3]| net.forward_cached(p, pyramid);
                x = match solver.method {
                    Method::Euler => {
                        trail.push(x);
                        let k1 = field(x)?;
                        vec3::add(x, vec3::scale(k1, h))
                    }
                    Method::Midpoint => {
                        trail.push(x);
                        let k1 = field(x)?;
                        let mid = vec3::add(x, vec3::scale(k1, h / 2.0));
                        if !fin(mid) {
                            return Err(Error::NonFiniteFlow { step });
                        }
                        trail.push(mid);
                        let k2 = field(mid)?;
                        vec3::add(x, vec3::scale(k2, h))
                    }
                    Method::Rk4 => {
                        trail.push(x);
                        let k1 = field(x)?;
                        let a1 = vec3::add(x, vec3::scale(k1, h / 2.0));
                        if !fin(a1) {
                            return Err(Error::NonFiniteFlow { step });
                        }
                        trail.push(a1);
                        let k2 = field(a1)?;
                        let a2 = vec3::add(x, vec3::scale(k2, h / 2.0));
                        if !fin(a2) {
                            return Err(Error::NonFiniteFlow { step });
                        }
                        trail.push(a2);
                        let k3 = field(a2)?;
                        let a3 = vec3::add(x, vec3::scale(k3, h));
                        if !fin(a3) {
                            return Err(Error::NonFiniteFlow { step });
                        }
                        trail.push(a3);
                        let k4 = field(a3)?;
                        let sum = vec3::add(
                            vec3::add(k1, vec3::scale(k2, 2.0)),
                            vec3::add(vec3::scale(k3, 2.0), k4),
                        );
                        vec3::add(x, vec3::scale(sum, h / 6.0))
                    }
                };
                if !fin(x) {
                    return Err(Error::NonFiniteFlow { step });
                }
            }
            Ok((x, trail))
        })
        .collect();
    let per_vertex = per_vertex?;
    let mut finals = Vec::with_capacity(points.len());
    let mut stages = Vec::with_capacity(points.len());
    for (f, t) in per_vertex {
        finals.push(f);
        stages.push(t);
    }
    Ok(Recorded { finals, stages })
}

/// Reverse sweep through the recorded solver steps: accumulates the
/// parameter gradient of `Σᵢ λᵢ·x_N(i)` given `λ = d(loss)/d(final)`.
///
/// Vertices are processed in fixed-size chunks whose partial gradients are
/// reduced in chunk order, so the result is bit-identical regardless of
/// thread count.
fn backprop(
    net: &DeformNetParams,
    pyramid: &[Volume],
    solver: &SolverConfig,
    rec: &Recorded,
    lambda_final: &[[f64; 3]],
    grad: &mut [f64],
) -> Result<()> {
    let h = solver.step_size();
    let n = solver.steps;
    let per = stages_per_step(solver.method);
    const CHUNK: usize = 64;
    let partials: Result<Vec<Vec<f64>>> = rec
        .stages
        .par_chunks(CHUNK)
        .zip(lambda_final.par_chunks(CHUNK))
        .map(|(stage_chunk, lambda_chunk)| {
            let mut ws = Workspace::for_hyper(net.hyper());
            let mut g = vec![0.0; net.param_count()];
            for (trail, &lam0) in stage_chunk.iter().zip(lambda_chunk) {
                let mut lam = lam0;
                for k in (0..n).rev() {
                    let st = &trail[k * per..(k + 1) * per];
                    match solver.method {
                        Method::Euler => {
                            let (_, dx) = net.backward_ws(
                                st[0],
                                pyramid,
                                vec3::scale(lam, h),
                                &mut g,
                                &mut ws,
                            )?;
                            lam = vec3::add(lam, dx);
                        }
                        Method::Midpoint => {
                            let (_, u) = net.backward_ws(
                                st[1],
                                pyramid,
                                vec3::scale(lam, h),
                                &mut g,
                                &mut ws,
                            )?;
                            let (_, v) = net.backward_ws(
                                st[0],
                                pyramid,
                                vec3::scale(u, h / 2.0),
                                &mut g,
                                &mut ws,
                            )?;
                            lam = vec3::add(lam, vec3::add(u, v));
                        }
                        Method::Rk4 => {
                            let g4 = vec3::scale(lam, h / 6.0);
                            let (_, d3) = net.backward_ws(st[3], pyramid, g4, &mut g, &mut ws)?;
                            let g3 = vec3::add(vec3::scale(lam, h / 3.0), vec3::scale(d3, h));
                            let (_, d2) = net.backward_ws(st[2], pyramid, g3, &mut g, &mut ws)?;
                            let g2 = vec3::add(vec3::scale(lam, h / 3.0), vec3::scale(d2, h / 2.0));
                            let (_, d1) = net.backward_ws(st[1], pyramid, g2, &mut g, &mut ws)?;
                            let g1 = vec3::add(vec3::scale(lam, h / 6.0), vec3::scale(d1, h / 2.0));
                            let (_, d0) = net.backward_ws(st[0], pyramid, g1, &mut g, &mut ws)?;
                            lam = vec3::add(
                                vec3::add(d3, d2),
                                vec3::add(vec3::add(d1, d0), lam),
                            );
                        }
                    }
                }
            }
            Ok(g)
        })
        .collect();
    for part in partials? {
        for (dst, src) in grad.iter_mut().zip(&part) {
            *dst += src;
        }
    }
    Ok(())
}

/// Sampled Chamfer loss and its gradient with respect to the predicted
/// points; both loss directions contribute to the gradient.
fn chamfer_with_grad(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
) -> Result<(f64, Vec<[f64; 3]>)> {
    let ab = nearest_neighbors(pred, target)?;
    let ba = nearest_neighbors(target, pred)?;
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut loss_ab = 0.0;
    for (i, &(j, d2)) in ab.iter().enumerate() {
        loss_ab += d2;
        let pull = vec3::scale(vec3::sub(pred[i], target[j as usize]), 2.0);
        grad[i] = vec3::add(grad[i], pull);
    }
    let mut loss_ba = 0.0;
    for (j, &(i, d2)) in ba.iter().enumerate() {
        loss_ba += d2;
        let pull = vec3::scale(vec3::sub(pred[i as usize], target[j]), 2.0);
        grad[i as usize] = vec3::add(grad[i as usize], pull);
    }
    Ok((loss_ab + loss_ba, grad))
}

/// Corresponded mean-squared loss and gradient (matched indices).
fn mse_with_grad(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    let loss = mse_points(pred, target)?;
    let inv_m = 1.0 / pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, q)| vec3::scale(vec3::sub(*p, *q), 2.0 * inv_m))
        .collect();
    Ok((loss, grad))
}

/// Flow `init_pts` through the network's field and evaluate the task loss
/// against `tgt_pts`, without gradients. Useful for finite-difference
/// probes of the training objective.
pub fn sampled_loss(
    net: &DeformNetParams,
    pyramid: &[Volume],
    solver: &SolverConfig,
    task: TrainTask,
    init_pts: &[[f64; 3]],
    tgt_pts: &[[f64; 3]],
) -> Result<f64> {
    let rec = flow_recording(init_pts, net, pyramid, solver)?;
    match task {
        TrainTask::ChamferFit => chamfer_loss(&rec.finals, tgt_pts),
        TrainTask::CorrespondedFit => mse_points(&rec.finals, tgt_pts),
    }
}

/// Loss of one sampled epoch plus the parameter gradient (accumulated into
/// `grad`), backpropagated through every step of the unrolled flow. Skips
/// the backward pass when the loss is already non-finite.
pub fn epoch_loss_and_grad(
    net: &DeformNetParams,
    pyramid: &[Volume],
    solver: &SolverConfig,
    task: TrainTask,
    init_pts: &[[f64; 3]],
    tgt_pts: &[[f64; 3]],
    grad: &mut [f64],
) -> Result<f64> {
    let rec = flow_recording(init_pts, net, pyramid, solver)?;
    let (loss, lambda) = match task {
        TrainTask::ChamferFit => chamfer_with_grad(&rec.finals, tgt_pts)?,
        TrainTask::CorrespondedFit => mse_with_grad(&rec.finals, tgt_pts)?,
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    backprop(net, pyramid, solver, &rec, &lambda, grad)?;
    Ok(loss)
}

fn gather(verts: &[[f64; 3]], idx: &[u32]) -> Vec<[f64; 3]> {
    idx.iter().map(|&i| verts[i as usize]).collect()
}

/// Train a fresh network (shape and initialization from the config) to
/// deform `initial` toward `target` inside `volume`.
pub fn train(
    initial: &TriangleMesh,
    target: &TriangleMesh,
    volume: &Volume,
    cfg: &TrainConfig,
) -> Result<(DeformNetParams, Vec<EpochRecord>)> {
    let mut net = DeformNetParams::seeded(cfg.hyper, cfg.seed)?;
    let history = train_in_place(initial, target, volume, &mut net, cfg)?;
    Ok((net, history))
}

/// Train an existing network in place (its own shape wins over
/// `cfg.hyper`, which only directs fresh construction in [`train`]).
pub fn train_in_place(
    initial: &TriangleMesh,
    target: &TriangleMesh,
    volume: &Volume,
    net: &mut DeformNetParams,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if cfg.task == TrainTask::CorrespondedFit
        && initial.vertex_count() != target.vertex_count()
    {
        return Err(Error::ShapeMismatch(format!(
            "corresponded training requires equal vertex counts, got {} and {}",
            initial.vertex_count(),
            target.vertex_count()
        )));
    }
    if cfg.sample_m > initial.vertex_count() || cfg.sample_m > target.vertex_count() {
        return Err(Error::InvalidInput(format!(
            "sample_m = {} exceeds a mesh vertex count ({} initial, {} target)",
            cfg.sample_m,
            initial.vertex_count(),
            target.vertex_count()
        )));
    }
    let pyramid = scale_pyramid(volume, net.hyper().scales)?;
    let mut adam = AdamState::new(net.param_count());
    let mut grad = vec![0.0; net.param_count()];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let es = epoch_seed(cfg.seed, epoch);
        let (init_pts, tgt_pts) = match cfg.task {
            TrainTask::ChamferFit => {
                let pi = sample_vertices(initial, cfg.sample_m, es)?;
                let ti = sample_vertices(target, cfg.sample_m, es)?;
                (gather(initial.vertices(), &pi), gather(target.vertices(), &ti))
            }
            TrainTask::CorrespondedFit => {
                let pi = sample_vertices(initial, cfg.sample_m, es)?;
                (gather(initial.vertices(), &pi), gather(target.vertices(), &pi))
            }
        };
        grad.fill(0.0);
        let loss =
            epoch_loss_and_grad(net, &pyramid, &cfg.solver, cfg.task, &init_pts, &tgt_pts, &mut grad)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { path: net.describe_param(i) });
        }
        adam_step(net.params_mut(), &grad, &mut adam, cfg.learning_rate, |i| {
            format!("param[{i}]")
        })?;
        let fullset_loss = if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            Some(fullset_loss(initial, target, volume, net, cfg)?)
        } else {
            None
        };
        history.push(EpochRecord { epoch, sampled_loss: loss, fullset_loss });
    }
    Ok(history)
}

/// Loss over the complete vertex sets (no sampling), after flowing every
/// initial vertex through the current network.
pub fn fullset_loss(
    initial: &TriangleMesh,
    target: &TriangleMesh,
    volume: &Volume,
    net: &DeformNetParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    let pyramid = scale_pyramid(volume, net.hyper().scales)?;
    let flowed = integrate(
        initial.vertices(),
        &|x| net.forward_cached(x, &pyramid),
        &cfg.solver,
    )?;
    match cfg.task {
        TrainTask::ChamferFit => chamfer_loss(&flowed.final_vertices, target.vertices()),
        TrainTask::CorrespondedFit => mse_points(&flowed.final_vertices, target.vertices()),
    }
}
