//! Genus-zero enforcement for signed distance volumes.
//!
//! The corrector grows a committed object region outward from the global
//! maximum, admitting one voxel at a time and only when the addition is a
//! *simple point*: a flip that provably preserves the topology of both the
//! object and its background under the (26, 6) connectivity pair. Committed
//! voxels keep `min(original, last committed value)`, so corrected values
//! are non-increasing along commitment order and every superlevel set of
//! the output is a prefix of the commitment sequence. Each prefix is a
//! topological ball by induction (the seed is a ball, simple additions
//! preserve that), which is what guarantees Euler characteristic 2 for
//! every extracted probe-level surface.
//!
//! Voxels whose admission would ever change topology (the membrane closing
//! a handle, a piece disconnected from the seed) are simply never
//! committed; they are floored below every probe level at the end. Lowering
//! them is what actually cuts handles: raising values alone can never sever
//! a positive-valued tunnel ring.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::LazyLock;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Summary of one topology-correction run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TopoFixReport {
    /// Fraction of all voxels that were eligible for the march.
    pub processed_voxel_fraction: f64,
    /// Eligible voxels whose corrected value differs from the input.
    pub changed_voxel_count: usize,
    /// Voxels the growth was seeded from.
    pub seed_count: usize,
    /// Wall-clock march time in milliseconds.
    pub runtime_ms: f64,
}

/// Window cell index for offset `(dx, dy, dz)`, each in {-1, 0, 1}:
/// x-fastest, so the center voxel is cell 13.
const CENTER: usize = 13;

#[inline]
fn window_cell(dx: i32, dy: i32, dz: i32) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

#[inline]
fn cell_offset(i: usize) -> [i32; 3] {
    [(i % 3) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i / 9) as i32 - 1]
}

struct AdjacencyTables {
    /// 26-adjacency between window cells (Chebyshev distance 1).
    adj26: [u32; 27],
    /// 6-adjacency between window cells (Manhattan distance 1).
    adj6: [u32; 27],
    /// Cells with at most two nonzero offset components, center excluded.
    n18: u32,
    /// The six face-neighbor cells.
    faces: u32,
}

static TABLES: LazyLock<AdjacencyTables> = LazyLock::new(|| {
    let mut adj26 = [0u32; 27];
    let mut adj6 = [0u32; 27];
    let mut n18 = 0u32;
    let mut faces = 0u32;
    for i in 0..27 {
        let a = cell_offset(i);
        for j in 0..27 {
            if i == j {
                continue;
            }
            let b = cell_offset(j);
            let d = [(a[0] - b[0]).abs(), (a[1] - b[1]).abs(), (a[2] - b[2]).abs()];
            if d.iter().all(|&c| c <= 1) {
                adj26[i] |= 1 << j;
            }
            if d.iter().sum::<i32>() == 1 {
                adj6[i] |= 1 << j;
            }
        }
        let nz = a.iter().filter(|&&c| c != 0).count();
        if i != CENTER && nz <= 2 {
            n18 |= 1 << i;
        }
        if nz == 1 {
            faces |= 1 << i;
        }
    }
    AdjacencyTables { adj26, adj6, n18, faces }
});

/// Number of connected components of `set` under the given per-cell
/// adjacency masks, with an optional bitmask a component must intersect to
/// be counted.
fn component_count(mut set: u32, adj: &[u32; 27], must_touch: u32) -> usize {
    let mut count = 0;
    while set != 0 {
        let seed = set & set.wrapping_neg();
        let mut comp = seed;
        loop {
            let mut grown = comp;
            let mut bits = comp;
            while bits != 0 {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                grown |= adj[i] & set;
            }
            if grown == comp {
                break;
            }
            comp = grown;
        }
        if comp & must_touch != 0 {
            count += 1;
        }
        set &= !comp;
    }
    count
}

/// Whether flipping the center voxel preserves digital topology under the
/// (26, 6) object/background connectivity pair.
///
/// `neigh` is the 3x3x3 object configuration around the voxel, x-fastest
/// (cell 13 is the center; its state is irrelevant to the answer). The
/// test requires exactly one 26-component of object cells in the punctured
/// neighborhood, and exactly one 6-component of background cells within the
/// 18-neighborhood that touches a face neighbor. The 18-neighborhood
/// restriction matters: background paths that only connect through corner
/// cells do not count, which is what rules out configurations where naive
/// component counting looks preserved but a handle is actually pinched.
pub fn is_simple_point(neigh: &[bool; 27]) -> bool {
    let t = &*TABLES;
    let mut object = 0u32;
    for (i, &on) in neigh.iter().enumerate() {
        if on && i != CENTER {
            object |= 1 << i;
        }
    }
    if component_count(object, &t.adj26, u32::MAX) != 1 {
        return false;
    }
    let background = !object & t.n18;
    component_count(background, &t.adj6, t.faces) == 1
}

/// Max-heap entry: highest value first, ties to the lowest voxel index.
#[derive(PartialEq)]
struct Candidate {
    value: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Background,
    Pending,
    Object,
}

struct MarchOutcome {
    corrected: Vec<f64>,
    changed: usize,
    eligible_count: usize,
}

/// Grows the object over the eligible region; voxels that never commit are
/// floored to `floor_value`.
fn march(sdf: &Volume, eligible: &[bool], floor_value: f64) -> MarchOutcome {
    let dims = sdf.dims();
    let orig = sdf.data();
    let n = orig.len();
    let mut state: Vec<State> = eligible
        .iter()
        .map(|&e| if e { State::Pending } else { State::Background })
        .collect();
    let mut corrected = orig.to_vec();
    let eligible_count = eligible.iter().filter(|&&e| e).count();

    // Seed: the highest eligible value, ties to the lowest linear index.
    let mut seed = None;
    for i in 0..n {
        if eligible[i] && seed.is_none_or(|s: usize| orig[i] > orig[s]) {
            seed = Some(i);
        }
    }
    let Some(seed) = seed else {
        return MarchOutcome { corrected, changed: 0, eligible_count };
    };

    let neighbors26 = |i: usize, out: &mut Vec<usize>| {
        out.clear();
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    let nz = z as i64 + dz;
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= dims[0] as i64
                        || ny >= dims[1] as i64
                        || nz >= dims[2] as i64
                    {
                        continue;
                    }
                    out.push(nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize));
                }
            }
        }
    };

    let mut heap: BinaryHeap<Candidate> = BinaryHeap::new();
    let mut queued = vec![false; n];
    let mut last_commit = orig[seed];
    let mut scratch = Vec::with_capacity(26);

    // Committing pushes every pending neighbor that is not already queued,
    // which doubles as the re-queue of previously blocked voxels: a blocked
    // voxel's window only changes when some neighbor commits.
    let commit = |i: usize,
                      state: &mut Vec<State>,
                      corrected: &mut Vec<f64>,
                      heap: &mut BinaryHeap<Candidate>,
                      queued: &mut Vec<bool>,
                      last_commit: &mut f64,
                      scratch: &mut Vec<usize>| {
        state[i] = State::Object;
        corrected[i] = orig[i].min(*last_commit);
        *last_commit = corrected[i];
        neighbors26(i, scratch);
        for &nb in scratch.iter() {
            if state[nb] == State::Pending && !queued[nb] {
                queued[nb] = true;
                heap.push(Candidate { value: orig[nb], index: nb as u32 });
            }
        }
    };

    commit(
        seed,
        &mut state,
        &mut corrected,
        &mut heap,
        &mut queued,
        &mut last_commit,
        &mut scratch,
    );

    while let Some(Candidate { index, .. }) = heap.pop() {
        let i = index as usize;
        if state[i] != State::Pending {
            continue;
        }
        queued[i] = false;

        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        let mut window = [false; 27];
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    let nz = z as i64 + dz;
                    let inside = nx >= 0
                        && ny >= 0
                        && nz >= 0
                        && nx < dims[0] as i64
                        && ny < dims[1] as i64
                        && nz < dims[2] as i64;
                    let cell = window_cell(dx as i32, dy as i32, dz as i32);
                    window[cell] = inside
                        && state[nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize)]
                            == State::Object;
                }
            }
        }
        if is_simple_point(&window) {
            commit(
                i,
                &mut state,
                &mut corrected,
                &mut heap,
                &mut queued,
                &mut last_commit,
                &mut scratch,
            );
        }
        // Otherwise the voxel stays pending; a later neighbor commit
        // re-queues it, and if none ever does it is floored below.
    }

    let mut changed = 0;
    for i in 0..n {
        if !eligible[i] {
            continue;
        }
        if state[i] == State::Pending {
            corrected[i] = floor_value;
        }
        if corrected[i] != orig[i] {
            changed += 1;
        }
    }
    MarchOutcome { corrected, changed, eligible_count }
}

/// Topology correction restricted to the superlevel region above
/// `alpha_hat`.
///
/// Only voxels with `value > alpha_hat` take part in the march; every other
/// voxel is set to exactly `alpha_hat` in the output, so the whole exterior
/// collapses onto the clamp level. Requires a strictly negative, finite
/// `alpha_hat` and an input holding values on both sides of it.
pub fn correct_topology(sdf: &Volume, alpha_hat: f64) -> Result<(Volume, TopoFixReport)> {
    if !(alpha_hat.is_finite() && alpha_hat < 0.0) {
        return Err(Error::InvalidInput(format!(
            "clamp level must be negative and finite, got {alpha_hat}"
        )));
    }
    let eligible: Vec<bool> = sdf.data().iter().map(|&v| v > alpha_hat).collect();
    let n_eligible = eligible.iter().filter(|&&e| e).count();
    if n_eligible == 0 {
        return Err(Error::DegenerateMask(format!(
            "no voxel above the clamp level {alpha_hat}"
        )));
    }
    if n_eligible == eligible.len() {
        return Err(Error::DegenerateMask(format!(
            "no voxel at or below the clamp level {alpha_hat}; the restricted march needs an exterior"
        )));
    }

    let start = Instant::now();
    let mut outcome = march(sdf, &eligible, alpha_hat);
    for (i, &e) in eligible.iter().enumerate() {
        if !e {
            outcome.corrected[i] = alpha_hat;
        }
    }
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;

    let report = TopoFixReport {
        processed_voxel_fraction: outcome.eligible_count as f64 / eligible.len() as f64,
        changed_voxel_count: outcome.changed,
        seed_count: 1,
        runtime_ms,
    };
    Ok((Volume::new(sdf.dims(), sdf.spacing(), outcome.corrected)?, report))
}

/// Topology correction over the whole grid.
///
/// The outer one-voxel shell is permanent background (it keeps its input
/// values); every interior voxel is eligible. Voxels the march can never
/// admit are floored just below the global minimum so they fall outside
/// every probe level.
pub fn correct_topology_full_domain(sdf: &Volume) -> Result<(Volume, TopoFixReport)> {
    let dims = sdf.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidInput(format!(
            "full-domain correction needs at least 3 voxels per axis, got {dims:?}"
        )));
    }
    let n = sdf.len();
    let mut eligible = vec![false; n];
    for z in 1..dims[2] - 1 {
        for y in 1..dims[1] - 1 {
            for x in 1..dims[0] - 1 {
                eligible[x + dims[0] * (y + dims[1] * z)] = true;
            }
        }
    }
    let floor_value = sdf.min_value() - 1.0;

    let start = Instant::now();
    let outcome = march(sdf, &eligible, floor_value);
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;

    let report = TopoFixReport {
        processed_voxel_fraction: outcome.eligible_count as f64 / n as f64,
        changed_voxel_count: outcome.changed,
        seed_count: 1,
        runtime_ms,
    };
    Ok((Volume::new(dims, sdf.spacing(), outcome.corrected)?, report))
}
