//! Triangle–triangle intersection and mesh self-intersection detection.
//!
//! The pairwise predicate treats triangles as closed sets: touching at a
//! single point or along an edge counts as intersecting. Exactly degenerate
//! triangles (zero-area, collinear vertices) never intersect anything.
//!
//! `self_intersection_ratio` reports the fraction of mesh faces involved in
//! at least one intersection with a face they share no vertex index with;
//! faces meeting along a shared vertex or edge are legitimately in contact
//! and are excluded from the count.

use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::mesh::TriangleMesh;
use crate::vec3;

/// True when the two closed triangles share at least one point.
pub fn triangles_intersect(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> bool {
    let na = vec3::cross(vec3::sub(a[1], a[0]), vec3::sub(a[2], a[0]));
    let nb = vec3::cross(vec3::sub(b[1], b[0]), vec3::sub(b[2], b[0]));
    if na == [0.0; 3] || nb == [0.0; 3] {
        return false;
    }

    // Signed "distances" (unnormalized) of each triangle's vertices against
    // the other's supporting plane.
    let sa: [f64; 3] = core::array::from_fn(|i| vec3::dot(nb, vec3::sub(a[i], b[0])));
    let sb: [f64; 3] = core::array::from_fn(|i| vec3::dot(na, vec3::sub(b[i], a[0])));

    if sa.iter().all(|&s| s > 0.0) || sa.iter().all(|&s| s < 0.0) {
        return false;
    }
    if sb.iter().all(|&s| s > 0.0) || sb.iter().all(|&s| s < 0.0) {
        return false;
    }

    // One triangle lying entirely in the other's plane means the supporting
    // planes coincide: fall back to a planar separating-axis test.
    if sa.iter().all(|&s| s == 0.0) || sb.iter().all(|&s| s == 0.0) {
        return coplanar_overlap(a, b, nb);
    }

    // General position: any intersection segment ends where an edge of one
    // triangle crosses the other's plane inside the other triangle.
    for i in 0..3 {
        let (p, q) = (a[i], a[(i + 1) % 3]);
        if edge_crosses_triangle(p, q, sa[i], sa[(i + 1) % 3], b) {
            return true;
        }
        let (p, q) = (b[i], b[(i + 1) % 3]);
        if edge_crosses_triangle(p, q, sb[i], sb[(i + 1) % 3], a) {
            return true;
        }
    }
    false
}

/// Whether segment `p..q`, with signed plane offsets `sp`/`sq` against the
/// triangle's plane, crosses the plane at a point inside the closed triangle.
fn edge_crosses_triangle(p: [f64; 3], q: [f64; 3], sp: f64, sq: f64, tri: &[[f64; 3]; 3]) -> bool {
    if sp == 0.0 && sq == 0.0 {
        // Edge lies in the plane; its contacts are found through the other
        // triangle's edges or the endpoints of the adjacent edges.
        return false;
    }
    if (sp > 0.0 && sq > 0.0) || (sp < 0.0 && sq < 0.0) {
        return false;
    }
    let t = sp / (sp - sq);
    let x = [
        p[0] + t * (q[0] - p[0]),
        p[1] + t * (q[1] - p[1]),
        p[2] + t * (q[2] - p[2]),
    ];
    point_in_triangle(x, tri)
}

/// Closed containment test, projecting the point onto the triangle's plane
/// via barycentric coordinates.
fn point_in_triangle(p: [f64; 3], tri: &[[f64; 3]; 3]) -> bool {
    let v0 = vec3::sub(tri[1], tri[0]);
    let v1 = vec3::sub(tri[2], tri[0]);
    let v2 = vec3::sub(p, tri[0]);
    let d00 = vec3::dot(v0, v0);
    let d01 = vec3::dot(v0, v1);
    let d11 = vec3::dot(v1, v1);
    let d20 = vec3::dot(v2, v0);
    let d21 = vec3::dot(v2, v1);
    let denom = d00 * d11 - d01 * d01;
    if denom <= 0.0 {
        return false;
    }
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    v >= 0.0 && w >= 0.0 && v + w <= 1.0
}

/// Separating-axis test for two triangles in a common plane with normal `n`.
fn coplanar_overlap(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3], n: [f64; 3]) -> bool {
    // Drop the dominant normal axis; edges stay non-degenerate in projection.
    let drop = (0..3).max_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs())).unwrap();
    let (u, v) = match drop {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let pa: [[f64; 2]; 3] = core::array::from_fn(|i| [a[i][u], a[i][v]]);
    let pb: [[f64; 2]; 3] = core::array::from_fn(|i| [b[i][u], b[i][v]]);

    let interval = |pts: &[[f64; 2]; 3], axis: [f64; 2]| {
        let d: Vec<f64> = pts.iter().map(|p| p[0] * axis[0] + p[1] * axis[1]).collect();
        (d.iter().copied().fold(f64::INFINITY, f64::min), d.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    for tri in [&pa, &pb] {
        for i in 0..3 {
            let e = [tri[(i + 1) % 3][0] - tri[i][0], tri[(i + 1) % 3][1] - tri[i][1]];
            let axis = [-e[1], e[0]];
            let (lo_a, hi_a) = interval(&pa, axis);
            let (lo_b, hi_b) = interval(&pb, axis);
            if hi_a < lo_b || hi_b < lo_a {
                return false;
            }
        }
    }
    true
}

/// Fraction of faces participating in at least one self-intersection, plus
/// the sorted indices of those faces.
///
/// Face pairs sharing any vertex index are excluded; candidate pairs are
/// pruned with a bounding-box hierarchy and tested in parallel. An empty
/// mesh reports a ratio of zero.
pub fn self_intersection_ratio(mesh: &TriangleMesh) -> (f64, Vec<u32>) {
    let faces = mesh.faces();
    if faces.is_empty() {
        return (0.0, Vec::new());
    }
    let tris: Vec<[[f64; 3]; 3]> = faces
        .iter()
        .map(|f| {
            [
                mesh.vertices()[f[0] as usize],
                mesh.vertices()[f[1] as usize],
                mesh.vertices()[f[2] as usize],
            ]
        })
        .collect();
    let bvh = Bvh::from_triangles(tris.clone());

    let shares_vertex = |i: usize, j: usize| {
        faces[i].iter().any(|v| faces[j].contains(v))
    };

    // Each face independently collects the higher-indexed faces it
    // intersects; merging marks both endpoints, which is order-independent.
    let pairs: Vec<(u32, u32)> = (0..faces.len())
        .into_par_iter()
        .map_init(Vec::new, |scratch, i| {
            let mut lo = tris[i][0];
            let mut hi = tris[i][0];
            for vtx in &tris[i][1..] {
                for k in 0..3 {
                    lo[k] = lo[k].min(vtx[k]);
                    hi[k] = hi[k].max(vtx[k]);
                }
            }
            bvh.overlapping(lo, hi, scratch);
            let mut hits = Vec::new();
            for &j in scratch.iter() {
                let j = j as usize;
                if j <= i || shares_vertex(i, j) {
                    continue;
                }
                if triangles_intersect(&tris[i], &tris[j]) {
                    hits.push((i as u32, j as u32));
                }
            }
            hits
        })
        .flatten()
        .collect();

    let mut involved = vec![false; faces.len()];
    for (i, j) in pairs {
        involved[i as usize] = true;
        involved[j as usize] = true;
    }
    let list: Vec<u32> = involved
        .iter()
        .enumerate()
        .filter_map(|(i, &hit)| hit.then_some(i as u32))
        .collect();
    (list.len() as f64 / faces.len() as f64, list)
}
