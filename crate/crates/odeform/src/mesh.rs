//! Triangle meshes and the explicit conditioning passes applied to them:
//! neighbor-mean smoothing, normal computation, and inflation.

use std::collections::BTreeSet;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vec3;

/// An indexed triangle mesh with derived vertex adjacency.
///
/// Construction validates that every face references three distinct
/// existing vertices and that all coordinates are finite. Adjacency is the
/// set of vertices sharing an edge, stored sorted, and is symmetric by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
    adjacency: Vec<Vec<u32>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("vertex count exceeds index range".into()));
        }
        for (i, v) in vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "vertex {i} has non-finite coordinates {v:?}"
                )));
            }
        }
        let n = vertices.len() as u32;
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&ix| ix >= n) {
                return Err(Error::InvalidInput(format!(
                    "face {i} references vertex beyond count {n}: {f:?}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateGeometry(format!(
                    "face {i} repeats a vertex index: {f:?}"
                )));
            }
        }

        let mut sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); vertices.len()];
        for f in &faces {
            for k in 0..3 {
                let a = f[k] as usize;
                let b = f[(k + 1) % 3];
                sets[a].insert(b);
                sets[b as usize].insert(f[k]);
            }
        }
        let adjacency = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self { vertices, faces, adjacency })
    }

    /// Same connectivity with replaced vertex positions.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "replacement has {} vertices, mesh has {}",
                vertices.len(),
                self.vertices.len()
            )));
        }
        for (i, v) in vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "vertex {i} has non-finite coordinates {v:?}"
                )));
            }
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            adjacency: self.adjacency.clone(),
        })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Sorted indices of the vertices sharing an edge with `i`.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<u32>] {
        &self.adjacency
    }

    /// Number of unique undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    /// V - E + F over unique undirected edges: 2 for a sphere-like closed
    /// mesh, 0 for a torus.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_count() as i64 + self.faces.len() as i64
    }

    /// Undirected edges violating closed-2-manifold structure: each edge
    /// must be used by exactly two faces, once in each direction (which is
    /// also what makes the orientation globally consistent).
    pub fn edge_defects(&self) -> Vec<[u32; 2]> {
        let mut use_counts: HashMap<[u32; 2], [u32; 2]> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let (key, slot) = if a < b { ([a, b], 0) } else { ([b, a], 1) };
                use_counts.entry(key).or_default()[slot] += 1;
            }
        }
        let mut defects: Vec<[u32; 2]> = use_counts
            .into_iter()
            .filter(|&(_, c)| c != [1, 1])
            .map(|(e, _)| e)
            .collect();
        defects.sort_unstable();
        defects
    }

    /// Whether every edge borders exactly two consistently oriented faces.
    pub fn is_closed_manifold(&self) -> bool {
        !self.faces.is_empty() && self.edge_defects().is_empty()
    }
}

/// Replaces every vertex simultaneously by the unweighted mean of its
/// neighbors, `iterations` times (double-buffered, so the update order
/// cannot leak). Connectivity is untouched. Errors if any vertex has no
/// neighbors, since its mean is undefined.
pub fn laplacian_smooth(mesh: &TriangleMesh, iterations: usize) -> Result<TriangleMesh> {
    if let Some(i) = mesh.adjacency().iter().position(|a| a.is_empty()) {
        return Err(Error::DegenerateGeometry(format!(
            "vertex {i} is isolated; neighbor-mean smoothing is undefined"
        )));
    }
    let mut cur = mesh.vertices().to_vec();
    let mut next = vec![[0.0; 3]; cur.len()];
    for _ in 0..iterations {
        for (i, out) in next.iter_mut().enumerate() {
            let mut acc = [0.0; 3];
            for &j in mesh.neighbors(i) {
                acc = vec3::add(acc, cur[j as usize]);
            }
            *out = vec3::scale(acc, 1.0 / mesh.neighbors(i).len() as f64);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    mesh.with_vertices(cur)
}

/// Unit vertex normals as the angle-weighted average of incident face
/// normals.
///
/// Each nondegenerate incident face contributes its unit normal weighted by
/// the wedge angle at the vertex; zero-area faces contribute nothing. A
/// vertex with no area-bearing incident face (or a cancelling combination)
/// has no defined normal and is an error.
pub fn vertex_normals(mesh: &TriangleMesh) -> Result<Vec<[f64; 3]>> {
    let vs = mesh.vertices();
    let mut acc = vec![[0.0; 3]; vs.len()];
    for f in mesh.faces() {
        let p = [vs[f[0] as usize], vs[f[1] as usize], vs[f[2] as usize]];
        let n = vec3::cross(vec3::sub(p[1], p[0]), vec3::sub(p[2], p[0]));
        let Some(unit) = vec3::normalize(n) else {
            continue;
        };
        for k in 0..3 {
            let u = vec3::sub(p[(k + 1) % 3], p[k]);
            let w = vec3::sub(p[(k + 2) % 3], p[k]);
            let angle = vec3::cross(u, w);
            let angle = vec3::norm(angle).atan2(vec3::dot(u, w));
            acc[f[k] as usize] = vec3::add(acc[f[k] as usize], vec3::scale(unit, angle));
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, a)| {
            vec3::normalize(a).ok_or_else(|| {
                Error::DegenerateGeometry(format!(
                    "vertex {i} has no area-bearing incident faces; normal undefined"
                ))
            })
        })
        .collect()
}

/// Inflation: `n_iters` rounds of one neighbor-mean smoothing pass followed
/// by a displacement of `rho` along each vertex's freshly recomputed
/// normal. With `rho = 0` this reduces to plain smoothing.
pub fn inflate_and_smooth(mesh: &TriangleMesh, n_iters: usize, rho: f64) -> Result<TriangleMesh> {
    if !rho.is_finite() {
        return Err(Error::InvalidInput(format!(
            "inflation scale must be finite, got {rho}"
        )));
    }
    let mut cur = mesh.clone();
    for _ in 0..n_iters {
        cur = laplacian_smooth(&cur, 1)?;
        let normals = vertex_normals(&cur)?;
        let moved = cur
            .vertices()
            .iter()
            .zip(&normals)
            .map(|(&v, &n)| vec3::add(v, vec3::scale(n, rho)))
            .collect();
        cur = cur.with_vertices(moved)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetrahedron() -> TriangleMesh {
        // Regular tetrahedron with outward-oriented faces.
        let vertices = vec![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ];
        let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        TriangleMesh::new(vertices, faces).unwrap()
    }

    fn icosahedron() -> TriangleMesh {
        let p = (1.0 + 5.0f64.sqrt()) / 2.0;
        let vertices = vec![
            [-1.0, p, 0.0],
            [1.0, p, 0.0],
            [-1.0, -p, 0.0],
            [1.0, -p, 0.0],
            [0.0, -1.0, p],
            [0.0, 1.0, p],
            [0.0, -1.0, -p],
            [0.0, 1.0, -p],
            [p, 0.0, -1.0],
            [p, 0.0, 1.0],
            [-p, 0.0, -1.0],
            [-p, 0.0, 1.0],
        ];
        let faces = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        TriangleMesh::new(vertices, faces).unwrap()
    }

    /// Parametric torus triangulated on an n-by-n wrap-around grid.
    fn grid_torus(n: usize) -> TriangleMesh {
        let mut vertices = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let u = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let v = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                let (ring, tube) = (2.0, 0.5);
                vertices.push([
                    (ring + tube * v.cos()) * u.cos(),
                    (ring + tube * v.cos()) * u.sin(),
                    tube * v.sin(),
                ]);
            }
        }
        let at = |i: usize, j: usize| ((i % n) * n + (j % n)) as u32;
        let mut faces = Vec::new();
        for i in 0..n {
            for j in 0..n {
                faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
        TriangleMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn euler_characteristic_of_standard_shapes() {
        assert_eq!(tetrahedron().euler_characteristic(), 2, "4 - 6 + 4");
        assert_eq!(icosahedron().euler_characteristic(), 2, "12 - 30 + 20");
        assert_eq!(grid_torus(8).euler_characteristic(), 0);
    }

    #[test]
    fn closed_manifold_detection() {
        assert!(tetrahedron().is_closed_manifold());
        assert!(icosahedron().is_closed_manifold());
        assert!(grid_torus(8).is_closed_manifold());

        // One face missing: three boundary edges.
        let t = tetrahedron();
        let open = TriangleMesh::new(t.vertices().to_vec(), t.faces()[..3].to_vec()).unwrap();
        assert!(!open.is_closed_manifold());
        assert_eq!(open.edge_defects().len(), 3);

        // A flipped face: still two uses per edge, but same-direction twice.
        let mut faces = t.faces().to_vec();
        faces[0] = [faces[0][0], faces[0][2], faces[0][1]];
        let flipped = TriangleMesh::new(t.vertices().to_vec(), faces).unwrap();
        assert!(!flipped.is_closed_manifold());
    }

    #[test]
    fn construction_validates_faces_and_coordinates() {
        assert!(TriangleMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 3]]).is_err());
        assert!(matches!(
            TriangleMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 1]]),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(TriangleMesh::new(vec![[f64::NAN; 3]], vec![]).is_err());
    }

    #[test]
    fn adjacency_is_symmetric_and_sorted() {
        for mesh in [tetrahedron(), icosahedron(), grid_torus(6)] {
            for (i, nbrs) in mesh.adjacency().iter().enumerate() {
                assert!(nbrs.windows(2).all(|w| w[0] < w[1]));
                for &j in nbrs {
                    assert!(
                        mesh.neighbors(j as usize).contains(&(i as u32)),
                        "adjacency must be symmetric"
                    );
                }
            }
        }
    }

    #[test]
    fn smoothing_tetrahedron_maps_each_vertex_to_opposite_centroid() {
        let t = tetrahedron();
        let s = laplacian_smooth(&t, 1).unwrap();
        for i in 0..4 {
            let mut want = [0.0; 3];
            for j in 0..4 {
                if j != i {
                    want = vec3::add(want, t.vertices()[j]);
                }
            }
            want = vec3::scale(want, 1.0 / 3.0);
            assert_eq!(s.vertices()[i], want);
        }
        assert_eq!(s.faces(), t.faces());
        assert_eq!(s.adjacency(), t.adjacency());
    }

    #[test]
    fn smoothing_zero_iterations_is_identity_and_translation_equivariant() {
        let t = icosahedron();
        assert_eq!(laplacian_smooth(&t, 0).unwrap(), t);

        let shift = [3.5, -2.0, 0.25];
        let shifted = t
            .with_vertices(t.vertices().iter().map(|&v| vec3::add(v, shift)).collect())
            .unwrap();
        let a = laplacian_smooth(&shifted, 3).unwrap();
        let b = laplacian_smooth(&t, 3).unwrap();
        for (va, vb) in a.vertices().iter().zip(b.vertices()) {
            // Neighbor means commute with translation exactly: the mean of
            // shifted points is the shifted mean in floating point too,
            // since counts are small powers summed in the same order.
            let diff = vec3::sub(*va, vec3::add(*vb, shift));
            assert!(vec3::norm(diff) < 1e-12);
        }
    }

    #[test]
    fn smoothing_rejects_isolated_vertices() {
        let mesh = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [9.0, 9.0, 9.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(
            laplacian_smooth(&mesh, 1),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn flat_grid_interior_normal_is_the_plane_normal() {
        // 3x3 vertex grid in the z = 0 plane, consistently wound so normals
        // point along +z.
        let mut vertices = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                vertices.push([x as f64, y as f64, 0.0]);
            }
        }
        let at = |x: usize, y: usize| (y * 3 + x) as u32;
        let mut faces = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                faces.push([at(x, y), at(x + 1, y), at(x + 1, y + 1)]);
                faces.push([at(x, y), at(x + 1, y + 1), at(x, y + 1)]);
            }
        }
        let mesh = TriangleMesh::new(vertices, faces).unwrap();
        let normals = vertex_normals(&mesh).unwrap();
        for n in &normals {
            assert!((vec3::norm(*n) - 1.0).abs() < 1e-9, "unit length");
        }
        let center = normals[at(1, 1) as usize];
        assert!((center[0]).abs() < 1e-12);
        assert!((center[1]).abs() < 1e-12);
        assert!((center[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tetrahedron_normals_point_outward() {
        let t = tetrahedron();
        let normals = vertex_normals(&t).unwrap();
        for (v, n) in t.vertices().iter().zip(&normals) {
            // The tetrahedron is centered at the origin, so outward means
            // positive dot with the vertex direction.
            assert!(vec3::dot(*v, *n) > 0.0);
            assert!((vec3::norm(*n) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normals_reject_zero_area_rings_but_skip_isolated_degenerate_faces() {
        // All three vertices collinear: every incident face has zero area.
        let flat = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(
            vertex_normals(&flat),
            Err(Error::DegenerateGeometry(_))
        ));

        // A degenerate face attached to an otherwise healthy mesh only
        // loses its own contribution.
        let t = tetrahedron();
        let mut vertices = t.vertices().to_vec();
        vertices.push(vec3::scale(vec3::add(vertices[0], vertices[1]), 0.5));
        let mut faces = t.faces().to_vec();
        faces.push([0, 1, 4]);
        let patched = TriangleMesh::new(vertices, faces).unwrap();
        assert!(vertex_normals(&patched).is_err(), "vertex 4 itself has no area");
    }

    #[test]
    fn inflation_with_zero_scale_is_plain_smoothing() {
        let t = icosahedron();
        let inflated = inflate_and_smooth(&t, 3, 0.0).unwrap();
        let smoothed = laplacian_smooth(&t, 3).unwrap();
        for (a, b) in inflated.vertices().iter().zip(smoothed.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
        assert!(inflate_and_smooth(&t, 1, f64::NAN).is_err());
    }

    #[test]
    fn inflation_pushes_outward_beyond_pure_smoothing() {
        let t = icosahedron();
        let rho = 0.01;
        let inflated = inflate_and_smooth(&t, 1, rho).unwrap();
        let smoothed = laplacian_smooth(&t, 1).unwrap();
        let mean_radius = |m: &TriangleMesh| {
            m.vertices().iter().map(|v| vec3::norm(*v)).sum::<f64>() / m.vertex_count() as f64
        };
        let gain = mean_radius(&inflated) - mean_radius(&smoothed);
        assert!(
            (gain - rho).abs() < 1e-3,
            "outward displacement should add about rho to the radius, got {gain}"
        );
    }
}
