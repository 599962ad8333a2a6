//! Analytic test-shape generators: signed-distance volumes for spheres,
//! ellipsoids, tori, handle-spheres (a sphere with a toroidal handle fused
//! on), and seeded harmonic blobs, plus corresponded mesh pairs built by
//! radially mapping a shared icosphere onto star-shaped surfaces.
//!
//! All volumes use the interior-positive convention: values are positive
//! inside the shape, negative outside, zero on the nominal surface.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::vec3;
use crate::volume::Volume;

/// Geometry family and its dimensions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere {
        radius: f64,
    },
    Ellipsoid {
        semi_axes: [f64; 3],
    },
    /// Ring in the xy-plane around the center; the hole axis is z.
    Torus {
        ring_radius: f64,
        tube_radius: f64,
    },
    /// Sphere with a toroidal handle anchored at the surface point
    /// `center + (radius, 0, 0)`; the handle ring lies in the xy-plane.
    HandleSphere {
        radius: f64,
        ring_radius: f64,
        tube_radius: f64,
    },
    /// Star-shaped radial perturbation r(û) = radius + amplitude·Y(û),
    /// where Y is a seeded low-order angular pattern with |Y| ≤ 1.
    HarmonicBlob {
        radius: f64,
        amplitude: f64,
    },
}

/// A fully specified test shape: geometry, placement, and pattern seed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub center: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl ShapeSpec {
    fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{what} must be positive and finite, got {v}")))
            }
        };
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("shape center must be finite".into()));
        }
        match self.kind {
            ShapeKind::Sphere { radius } => positive(radius, "sphere radius"),
            ShapeKind::Ellipsoid { semi_axes } => {
                semi_axes.iter().try_for_each(|&a| positive(a, "ellipsoid semi-axis"))
            }
            ShapeKind::Torus { ring_radius, tube_radius }
            | ShapeKind::HandleSphere { ring_radius, tube_radius, .. } => {
                positive(ring_radius, "ring radius")?;
                positive(tube_radius, "tube radius")?;
                if let ShapeKind::HandleSphere { radius, .. } = self.kind {
                    positive(radius, "sphere radius")?;
                }
                if tube_radius >= ring_radius {
                    return Err(Error::InvalidInput(format!(
                        "tube radius {tube_radius} must be smaller than ring radius {ring_radius}"
                    )));
                }
                Ok(())
            }
            ShapeKind::HarmonicBlob { radius, amplitude } => {
                positive(radius, "blob radius")?;
                if !amplitude.is_finite() || amplitude < 0.0 || amplitude >= radius {
                    return Err(Error::InvalidInput(format!(
                        "blob amplitude must lie in [0, radius); got {amplitude} with radius {radius}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Conservative per-axis half-extent of the shape.
    fn support_radius(&self) -> f64 {
        match self.kind {
            ShapeKind::Sphere { radius } => radius,
            ShapeKind::Ellipsoid { semi_axes } => semi_axes.iter().copied().fold(0.0, f64::max),
            ShapeKind::Torus { ring_radius, tube_radius } => ring_radius + tube_radius,
            ShapeKind::HandleSphere { radius, ring_radius, tube_radius } => {
                radius + ring_radius + tube_radius
            }
            ShapeKind::HarmonicBlob { radius, amplitude } => radius + amplitude,
        }
    }

    fn is_star_shaped(&self) -> bool {
        matches!(
            self.kind,
            ShapeKind::Sphere { .. } | ShapeKind::Ellipsoid { .. } | ShapeKind::HarmonicBlob { .. }
        )
    }

    /// Interior-positive level-set value at a point.
    ///
    /// Exact signed distance for spheres and tori; the ellipsoid uses the
    /// normalized-gradient approximation; the handle-sphere is the max
    /// union of its two parts; blobs report the radial offset r(û) − ‖p−c‖,
    /// exact on rays through the center but not a true distance.
    pub fn level_value(&self, p: [f64; 3]) -> f64 {
        let d = vec3::sub(p, self.center);
        match self.kind {
            ShapeKind::Sphere { radius } => radius - vec3::norm(d),
            ShapeKind::Ellipsoid { semi_axes } => {
                let k0 = (0..3).map(|i| (d[i] / semi_axes[i]).powi(2)).sum::<f64>().sqrt();
                if k0 == 0.0 {
                    return semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
                }
                let k1 = (0..3)
                    .map(|i| (d[i] / (semi_axes[i] * semi_axes[i])).powi(2))
                    .sum::<f64>()
                    .sqrt();
                k0 * (1.0 - k0) / k1
            }
            ShapeKind::Torus { ring_radius, tube_radius } => {
                torus_value(d, ring_radius, tube_radius)
            }
            ShapeKind::HandleSphere { radius, ring_radius, tube_radius } => {
                let sphere = radius - vec3::norm(d);
                let handle =
                    torus_value([d[0] - radius, d[1], d[2]], ring_radius, tube_radius);
                sphere.max(handle)
            }
            ShapeKind::HarmonicBlob { radius, amplitude } => {
                let r = vec3::norm(d);
                if r == 0.0 {
                    return radius;
                }
                let u = vec3::scale(d, 1.0 / r);
                radius + amplitude * BlobPattern::from_seed(self.seed).eval(u) - r
            }
        }
    }

    /// Distance from the center to the surface along direction `u`
    /// (unit length). Only defined for star-shaped kinds.
    fn radial_extent(&self, u: [f64; 3]) -> f64 {
        match self.kind {
            ShapeKind::Sphere { radius } => radius,
            ShapeKind::Ellipsoid { semi_axes } => {
                1.0 / (0..3).map(|i| (u[i] / semi_axes[i]).powi(2)).sum::<f64>().sqrt()
            }
            ShapeKind::HarmonicBlob { radius, amplitude } => {
                radius + amplitude * BlobPattern::from_seed(self.seed).eval(u)
            }
            _ => unreachable!("radial extent queried for a non-star-shaped kind"),
        }
    }
}

fn torus_value(d: [f64; 3], ring: f64, tube: f64) -> f64 {
    let in_plane = (d[0] * d[0] + d[1] * d[1]).sqrt();
    tube - ((in_plane - ring).powi(2) + d[2] * d[2]).sqrt()
}

/// Seeded angular pattern: a convex combination (in absolute weight) of
/// eight low-order angular basis functions, each bounded by 1 on the unit
/// sphere, so |Y| ≤ 1 everywhere.
#[derive(Debug, Clone, Copy)]
pub struct BlobPattern {
    weights: [f64; 8],
}

impl BlobPattern {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = [0.0f64; 8];
        for w in &mut weights {
            *w = rng.gen_range(-1.0..1.0);
        }
        let total: f64 = weights.iter().map(|w| w.abs()).sum();
        if total > 0.0 {
            for w in &mut weights {
                *w /= total;
            }
        } else {
            weights[0] = 1.0;
        }
        Self { weights }
    }

    /// Evaluate at a unit direction.
    pub fn eval(&self, u: [f64; 3]) -> f64 {
        let [x, y, z] = u;
        let basis = [
            z,
            x,
            y,
            (3.0 * z * z - 1.0) / 2.0,
            2.0 * x * y,
            2.0 * x * z,
            2.0 * y * z,
            x * (x * x - 3.0 * y * y),
        ];
        self.weights.iter().zip(basis).map(|(w, b)| w * b).sum()
    }
}

/// Rasterize a shape's level-set values over a voxel grid (spacing 1).
///
/// The shape must fit with at least a two-voxel margin to the grid boundary
/// so downstream isosurfaces are never clipped.
pub fn make_sdf_volume(spec: &ShapeSpec, dims: [usize; 3]) -> Result<Volume> {
    spec.validate()?;
    let support = spec.support_radius();
    for axis in 0..3 {
        let lo = spec.center[axis] - support - 2.0;
        let hi = spec.center[axis] + support + 2.0;
        if lo < 0.0 || hi > (dims[axis] - 1) as f64 {
            return Err(Error::InvalidInput(format!(
                "shape exceeds grid: axis {axis} needs [{lo:.1}, {hi:.1}] within [0, {}]",
                dims[axis] - 1
            )));
        }
    }
    Volume::from_fn(dims, 1.0, |x, y, z| spec.level_value([x as f64, y as f64, z as f64]))
}

fn icosahedron_table() -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let verts = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
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
    (verts, faces)
}

/// Unit icosphere: an icosahedron with `subdivisions` rounds of edge
/// midpoint subdivision, every vertex projected onto the unit sphere.
///
/// Vertex and face ordering are deterministic, so two calls with the same
/// level correspond vertex-for-vertex.
pub fn icosphere(subdivisions: u32) -> TriangleMesh {
    let (mut verts, mut faces) = icosahedron_table();
    for v in &mut verts {
        let n = vec3::norm(*v);
        *v = vec3::scale(*v, 1.0 / n);
    }
    for _ in 0..subdivisions {
        let mut cache: std::collections::BTreeMap<(u32, u32), u32> = Default::default();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0u32; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mids[e] = *cache.entry(key).or_insert_with(|| {
                    let m = vec3::add(verts[a as usize], verts[b as usize]);
                    let m = vec3::scale(m, 1.0 / vec3::norm(m));
                    verts.push(m);
                    (verts.len() - 1) as u32
                });
            }
            next_faces.push([f[0], mids[0], mids[2]]);
            next_faces.push([f[1], mids[1], mids[0]]);
            next_faces.push([f[2], mids[2], mids[1]]);
            next_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = next_faces;
    }
    TriangleMesh::new(verts, faces).expect("icosphere construction is always valid")
}

/// Two meshes with identical connectivity: one shared icosphere radially
/// mapped onto each star-shaped surface. Vertex i of one mesh corresponds
/// to vertex i of the other (same outward direction from the common
/// center).
pub fn make_corresponded_pair(
    spec_a: &ShapeSpec,
    spec_b: &ShapeSpec,
    subdivisions: u32,
) -> Result<(TriangleMesh, TriangleMesh)> {
    spec_a.validate()?;
    spec_b.validate()?;
    for (spec, name) in [(spec_a, "first"), (spec_b, "second")] {
        if !spec.is_star_shaped() {
            return Err(Error::InvalidInput(format!(
                "{name} shape is not star-shaped; radial correspondence is undefined"
            )));
        }
    }
    if spec_a.center != spec_b.center {
        return Err(Error::InvalidInput(
            "corresponded shapes must share a common center".into(),
        ));
    }
    let sphere = icosphere(subdivisions);
    let map = |spec: &ShapeSpec| -> Result<TriangleMesh> {
        let verts = sphere
            .vertices()
            .iter()
            .map(|&u| vec3::add(spec.center, vec3::scale(u, spec.radial_extent(u))))
            .collect();
        sphere.with_vertices(verts)
    };
    Ok((map(spec_a)?, map(spec_b)?))
}
