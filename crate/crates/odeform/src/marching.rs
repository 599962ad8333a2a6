//! Isosurface extraction on regular grids.
//!
//! The per-cell lookup table is built at startup from first principles
//! instead of being transcribed: for every one of the 256 inside/outside
//! corner configurations, each cube face is walked along its corner cycle
//! (counter-clockwise as seen from outside the cube) and every in-to-out
//! crossing is paired with the cyclically preceding out-to-in crossing.
//! That pairing rule is invariant under reversing the walk direction, so
//! the two cells sharing a face always agree on the face's contour
//! segments and the extracted surface cannot crack, including on the
//! classically ambiguous faces (which this rule resolves by separating the
//! inside corners). The directed segments chain into closed loops inside
//! each cell; loops of length three become one triangle and longer loops
//! are triangulated around a cell-local centroid vertex, so no two cells
//! can ever disagree about an interior diagonal.
//!
//! A voxel is inside when its value is strictly above the level. Vertices
//! on cell edges interpolate the crossing exactly (clamped away from the
//! corners by 1e-6). The resulting orientation makes normals point toward
//! decreasing values: outward, under the interior-positive convention.

use std::collections::HashMap;
use std::sync::LazyLock;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::volume::Volume;

/// The 12 cube edges as (lower corner, upper corner, axis), with corner
/// bits (x, y, z) = (bit0, bit1, bit2). Edge ids follow this order.
static EDGES: LazyLock<Vec<(u8, u8, u8)>> = LazyLock::new(|| {
    let mut edges = Vec::with_capacity(12);
    for axis in 0..3u8 {
        for corner in 0..8u8 {
            if corner & (1 << axis) == 0 {
                edges.push((corner, corner | (1 << axis), axis));
            }
        }
    }
    edges
});

/// Edge id for an unordered corner pair.
fn edge_between(a: u8, b: u8) -> u8 {
    EDGES
        .iter()
        .position(|&(lo, hi, _)| (lo, hi) == (a.min(b), a.max(b)))
        .expect("corner pair is not a cube edge") as u8
}

/// Corner cycles of the six faces, counter-clockwise from outside the cube.
fn face_cycles() -> Vec<[u8; 4]> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3usize {
        // (u, w) with e_u x e_w = e_axis keeps the s = 1 cycle CCW around
        // the outward normal; the s = 0 face reverses.
        let (u, w) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        for side in 0..2u8 {
            let base = [(0u8, 0u8), (1, 0), (1, 1), (0, 1)];
            let mut cycle = [0u8; 4];
            for (k, &(cu, cw)) in base.iter().enumerate() {
                let corner = (side << axis) | (cu << u) | (cw << w);
                cycle[k] = corner;
            }
            if side == 0 {
                cycle.reverse();
            }
            faces.push(cycle);
        }
    }
    faces
}

/// For each corner configuration, the contour loops as cyclic edge-id
/// sequences.
static CASE_LOOPS: LazyLock<Vec<Vec<Vec<u8>>>> = LazyLock::new(|| {
    let faces = face_cycles();
    let mut table = Vec::with_capacity(256);
    for mask in 0..256u16 {
        let inside = |c: u8| mask & (1 << c) != 0;
        // next[e] = the edge the contour continues to after entering at e.
        let mut next = [u8::MAX; 12];
        let mut crossed = 0u16;
        for cycle in &faces {
            // Crossings in walk order, flagged entry (out -> in) or exit.
            let mut crossings: Vec<(u8, bool)> = Vec::new();
            for k in 0..4 {
                let a = cycle[k];
                let b = cycle[(k + 1) % 4];
                if inside(a) != inside(b) {
                    crossings.push((edge_between(a, b), inside(b)));
                }
            }
            for (i, &(edge, entry)) in crossings.iter().enumerate() {
                if entry {
                    continue;
                }
                // Entries and exits alternate, so the cyclic predecessor of
                // an exit is always an entry.
                let prev = crossings[(i + crossings.len() - 1) % crossings.len()];
                debug_assert!(prev.1, "exit crossing not preceded by an entry");
                next[prev.0 as usize] = edge;
                crossed |= (1 << prev.0) | (1 << edge);
            }
        }

        let mut loops = Vec::new();
        let mut visited = [false; 12];
        for start in 0..12u8 {
            if crossed & (1 << start) == 0 || visited[start as usize] {
                continue;
            }
            let mut contour = Vec::new();
            let mut e = start;
            loop {
                debug_assert!(!visited[e as usize], "contour revisits an edge");
                visited[e as usize] = true;
                contour.push(e);
                e = next[e as usize];
                debug_assert!(e != u8::MAX, "contour runs off a crossed edge");
                if e == start {
                    break;
                }
            }
            debug_assert!(contour.len() >= 3, "degenerate contour loop");
            loops.push(contour);
        }
        table.push(loops);
    }
    table
});

/// Extracts the closed triangle surface of the superlevel set
/// `{value > alpha}`.
///
/// The level must lie strictly between the volume's minimum and maximum,
/// and the superlevel set must not touch the outer voxel layer (a clipped
/// surface would be open). Output vertices are in voxel coordinates,
/// shared across cells by edge welding, and the mesh is verified closed
/// and consistently oriented before being returned.
pub fn extract_isosurface(sdf: &Volume, alpha: f64) -> Result<TriangleMesh> {
    let dims = sdf.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidInput(format!(
            "isosurface extraction needs at least 2 voxels per axis, got {dims:?}"
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::BadIsoLevel { level: alpha, reason: "level is not finite".into() });
    }
    let (lo, hi) = (sdf.min_value(), sdf.max_value());
    if !(lo < alpha && alpha < hi) {
        return Err(Error::BadIsoLevel {
            level: alpha,
            reason: format!("level must lie strictly inside the value range [{lo}, {hi}]"),
        });
    }
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let on_border = x == 0
                    || y == 0
                    || z == 0
                    || x == dims[0] - 1
                    || y == dims[1] - 1
                    || z == dims[2] - 1;
                if on_border && sdf.get(x, y, z) > alpha {
                    return Err(Error::BadIsoLevel {
                        level: alpha,
                        reason: format!(
                            "superlevel set reaches the volume boundary at voxel ({x}, {y}, {z}); the surface would be clipped open"
                        ),
                    });
                }
            }
        }
    }

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut welded: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();

    let mut corner_values = [0.0f64; 8];
    for z in 0..dims[2] - 1 {
        for y in 0..dims[1] - 1 {
            for x in 0..dims[0] - 1 {
                let mut mask = 0usize;
                for c in 0..8 {
                    let v = sdf.get(x + (c & 1), y + ((c >> 1) & 1), z + ((c >> 2) & 1));
                    corner_values[c] = v;
                    if v > alpha {
                        mask |= 1 << c;
                    }
                }
                if mask == 0 || mask == 0xFF {
                    continue;
                }
                for contour in &CASE_LOOPS[mask] {
                    let loop_verts: Vec<u32> = contour
                        .iter()
                        .map(|&e| {
                            let (ca, cb, axis) = EDGES[e as usize];
                            let g = (
                                (x + (ca & 1) as usize) as u32,
                                (y + ((ca >> 1) & 1) as usize) as u32,
                                (z + ((ca >> 2) & 1) as usize) as u32,
                            );
                            *welded.entry((g.0, g.1, g.2, axis)).or_insert_with(|| {
                                let va = corner_values[ca as usize];
                                let vb = corner_values[cb as usize];
                                let t = ((alpha - va) / (vb - va)).clamp(1e-6, 1.0 - 1e-6);
                                let mut p = [g.0 as f64, g.1 as f64, g.2 as f64];
                                p[axis as usize] += t;
                                vertices.push(p);
                                (vertices.len() - 1) as u32
                            })
                        })
                        .collect();
                    if loop_verts.len() == 3 {
                        faces.push([loop_verts[0], loop_verts[1], loop_verts[2]]);
                    } else {
                        let mut centroid = [0.0; 3];
                        for &v in &loop_verts {
                            for k in 0..3 {
                                centroid[k] += vertices[v as usize][k];
                            }
                        }
                        for c in &mut centroid {
                            *c /= loop_verts.len() as f64;
                        }
                        vertices.push(centroid);
                        let cv = (vertices.len() - 1) as u32;
                        for i in 0..loop_verts.len() {
                            let a = loop_verts[i];
                            let b = loop_verts[(i + 1) % loop_verts.len()];
                            faces.push([cv, a, b]);
                        }
                    }
                }
            }
        }
    }

    let mesh = TriangleMesh::new(vertices, faces)?;
    let defects = mesh.edge_defects();
    if !defects.is_empty() {
        return Err(Error::NonManifold(format!(
            "{} defective edges, first: {:?}",
            defects.len(),
            &defects[..defects.len().min(5)]
        )));
    }
    Ok(mesh)
}
