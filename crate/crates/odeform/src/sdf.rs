//! Signed distance fields from voxel masks.
//!
//! Distances are propagated with the integral 3-4-5 weighting over the
//! 26-neighborhood (3 per face step, 4 per edge step, 5 per corner step)
//! using one forward and one backward raster sweep, then divided by 3 so a
//! single face step costs one voxel unit. The sign convention is
//! interior-positive: voxels carrying the requested label get `+d/3`,
//! everything else `-d/3`, where `d` is the weighted distance to the
//! nearest voxel of the opposite set.
//!
//! Error budget vs true Euclidean distance: the normalized 3-4-5 metric is
//! direction-dependent. It underestimates planar diagonals by up to
//! `1 - 4/(3*sqrt(2))` (about 5.8%) and overestimates `(3,1,1)`-type
//! directions by up to `sqrt(11)/3 - 1` (about 10.6%); both extremes are
//! attained, so per-voxel values sit within `[0.9428, 1.1056]` times the
//! exact Euclidean distance to the opposite voxel set.

use crate::error::{Error, Result};
use crate::volume::{gaussian_smooth, LabelMask, Volume};

const INF: u32 = u32::MAX / 2;

/// The 13 neighbor offsets preceding the origin in (z, y, x)-lexicographic
/// raster order, with their step weights. The backward sweep uses the
/// negations.
fn forward_mask() -> Vec<([i64; 3], u32)> {
    let mut mask = Vec::with_capacity(13);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dz, dy, dx) < (0, 0, 0) {
                    let w = 2 + (dx.abs() + dy.abs() + dz.abs()) as u32;
                    mask.push(([dx, dy, dz], w));
                }
            }
        }
    }
    mask
}

/// Weighted 3-4-5 distance from every voxel to the nearest `feature` voxel.
///
/// Feature voxels get 0. Two raster sweeps (forward, then backward with the
/// mirrored mask) propagate the exact weighted graph distance for this
/// weighting.
fn chamfer_distance(dims: [usize; 3], feature: &[bool]) -> Vec<u32> {
    debug_assert_eq!(feature.len(), dims[0] * dims[1] * dims[2]);
    let mut d: Vec<u32> = feature.iter().map(|&f| if f { 0 } else { INF }).collect();
    let fwd = forward_mask();

    let relax = |d: &mut Vec<u32>, x: usize, y: usize, z: usize, neg: bool| {
        let i = x + dims[0] * (y + dims[1] * z);
        if d[i] == 0 {
            return;
        }
        let mut best = d[i];
        for &([dx, dy, dz], w) in &fwd {
            let s = if neg { -1 } else { 1 };
            let nx = x as i64 + s * dx;
            let ny = y as i64 + s * dy;
            let nz = z as i64 + s * dz;
            if nx < 0
                || ny < 0
                || nz < 0
                || nx >= dims[0] as i64
                || ny >= dims[1] as i64
                || nz >= dims[2] as i64
            {
                continue;
            }
            let j = nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize);
            let cand = d[j].saturating_add(w);
            if cand < best {
                best = cand;
            }
        }
        d[i] = best;
    };

    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                relax(&mut d, x, y, z, false);
            }
        }
    }
    for z in (0..dims[2]).rev() {
        for y in (0..dims[1]).rev() {
            for x in (0..dims[0]).rev() {
                relax(&mut d, x, y, z, true);
            }
        }
    }
    d
}

/// Signed distance field of `label` in voxel units, interior-positive.
///
/// Every voxel holding `label` gets `+d/3` where `d` is its 3-4-5 distance
/// to the nearest non-label voxel; all other voxels get `-d/3` to the
/// nearest label voxel. The zero level therefore sits between voxels and
/// no voxel is exactly zero. Errors if the label is absent or fills the
/// whole grid (no surface to measure from).
pub fn signed_distance_transform(mask: &LabelMask, label: u8) -> Result<Volume> {
    let dims = mask.dims();
    let inside: Vec<bool> = mask.labels().iter().map(|&l| l == label).collect();
    let n_inside = inside.iter().filter(|&&b| b).count();
    if n_inside == 0 {
        return Err(Error::LabelNotFound { label });
    }
    if n_inside == inside.len() {
        return Err(Error::DegenerateMask(
            "label fills the entire grid; it has no boundary".into(),
        ));
    }
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let d_boundary_in = chamfer_distance(dims, &outside);
    let d_boundary_out = chamfer_distance(dims, &inside);
    let data = inside
        .iter()
        .enumerate()
        .map(|(i, &is_in)| {
            if is_in {
                d_boundary_in[i] as f64 / 3.0
            } else {
                -(d_boundary_out[i] as f64) / 3.0
            }
        })
        .collect();
    Volume::new(dims, 1.0, data)
}

/// Value scaling and smoothing applied to a raw signed distance field
/// before isosurface work.
#[derive(Debug, Clone, Copy)]
pub struct SdfPostprocess {
    /// Multiplier applied to every voxel value first.
    pub scale: f64,
    /// Standard deviation of the Gaussian smoothing that follows.
    pub sigma: f64,
}

impl Default for SdfPostprocess {
    fn default() -> Self {
        Self {
            scale: 1.0 / 16.0,
            sigma: 0.5,
        }
    }
}

/// Scales the field values, then smooths the result.
///
/// The scaling compresses the dynamic range so far-from-surface voxels stop
/// dominating downstream losses; smoothing then removes the faceting the
/// discrete distance propagation leaves behind.
pub fn postprocess_sdf(sdf: &Volume, cfg: &SdfPostprocess) -> Result<Volume> {
    if !(cfg.scale.is_finite() && cfg.scale > 0.0) {
        return Err(Error::InvalidInput(format!(
            "postprocess scale must be positive and finite, got {}",
            cfg.scale
        )));
    }
    let scaled = Volume::new(
        sdf.dims(),
        sdf.spacing(),
        sdf.data().iter().map(|v| v * cfg.scale).collect(),
    )?;
    gaussian_smooth(&scaled, cfg.sigma)
}
