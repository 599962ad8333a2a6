//! Axis-aligned bounding-box hierarchy over mesh triangles.
//!
//! One structure serves both spatial queries the crate needs: enumerating
//! triangles whose boxes overlap a query box (self-intersection candidate
//! pruning) and branch-and-bound nearest-triangle searches (surface
//! distance metrics). The tree is built by median-splitting triangle
//! centroids along the widest axis, which is deterministic for a given
//! input order.

use crate::mesh::TriangleMesh;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Aabb {
    fn of_triangle(t: &[[f64; 3]; 3]) -> Self {
        let mut lo = t[0];
        let mut hi = t[0];
        for v in &t[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        Self { lo, hi }
    }

    fn merge(&self, other: &Aabb) -> Aabb {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for k in 0..3 {
            lo[k] = lo[k].min(other.lo[k]);
            hi[k] = hi[k].max(other.hi[k]);
        }
        Aabb { lo, hi }
    }

    fn overlaps(&self, lo: [f64; 3], hi: [f64; 3]) -> bool {
        (0..3).all(|k| self.lo[k] <= hi[k] && lo[k] <= self.hi[k])
    }

    /// Squared distance from a point to this box (zero inside).
    fn dist2(&self, p: [f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d2 += d * d;
        }
        d2
    }
}

#[derive(Debug, Clone)]
struct Node {
    aabb: Aabb,
    /// Leaf: range into `order`. Internal: child node indices.
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

const LEAF_SIZE: usize = 8;

/// Bounding-volume hierarchy over a fixed triangle list.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    triangles: Vec<[[f64; 3]; 3]>,
}

impl Bvh {
    pub fn from_triangles(triangles: Vec<[[f64; 3]; 3]>) -> Self {
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let boxes: Vec<Aabb> = triangles.iter().map(Aabb::of_triangle).collect();
        let centroids: Vec<[f64; 3]> = triangles
            .iter()
            .map(|t| {
                [
                    (t[0][0] + t[1][0] + t[2][0]) / 3.0,
                    (t[0][1] + t[1][1] + t[2][1]) / 3.0,
                    (t[0][2] + t[1][2] + t[2][2]) / 3.0,
                ]
            })
            .collect();
        let mut nodes = Vec::new();
        if !triangles.is_empty() {
            build(&mut nodes, &mut order, 0, triangles.len(), &boxes, &centroids);
        }
        Self { nodes, order, triangles }
    }

    pub fn from_mesh(mesh: &TriangleMesh) -> Self {
        let tris = mesh
            .faces()
            .iter()
            .map(|f| {
                [
                    mesh.vertices()[f[0] as usize],
                    mesh.vertices()[f[1] as usize],
                    mesh.vertices()[f[2] as usize],
                ]
            })
            .collect();
        Self::from_triangles(tris)
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: u32) -> &[[f64; 3]; 3] {
        &self.triangles[i as usize]
    }

    /// Indices of all triangles whose bounding box touches `[lo, hi]`
    /// (closed intervals), in ascending order.
    pub fn overlapping(&self, lo: [f64; 3], hi: [f64; 3], out: &mut Vec<u32>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if !node.aabb.overlaps(lo, hi) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start as usize..(start + count) as usize] {
                        let b = Aabb::of_triangle(&self.triangles[t as usize]);
                        if b.overlaps(lo, hi) {
                            out.push(t);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        out.sort_unstable();
    }

    /// Nearest triangle to `p` by branch-and-bound.
    ///
    /// `dist2` must return the squared distance from `p` to the given
    /// triangle (or any measure bounded below by the box distance, such as
    /// exact point-to-triangle distance). Returns `(squared distance,
    /// triangle index)`; ties resolve to the lowest index. `None` only for
    /// an empty tree.
    pub fn nearest(&self, p: [f64; 3], mut dist2: impl FnMut(u32) -> f64) -> Option<(f64, u32)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, u32::MAX);
        // Stack of candidate nodes with their box lower bounds.
        let mut stack: Vec<(f64, u32)> = vec![(self.nodes[0].aabb.dist2(p), 0)];
        while let Some((bound, ni)) = stack.pop() {
            if bound > best.0 {
                continue;
            }
            let node = &self.nodes[ni as usize];
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start as usize..(start + count) as usize] {
                        let d2 = dist2(t);
                        if d2 < best.0 || (d2 == best.0 && t < best.1) {
                            best = (d2, t);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.nodes[left as usize].aabb.dist2(p);
                    let dr = self.nodes[right as usize].aabb.dist2(p);
                    // Push the farther child first so the nearer pops first.
                    if dl <= dr {
                        stack.push((dr, right));
                        stack.push((dl, left));
                    } else {
                        stack.push((dl, left));
                        stack.push((dr, right));
                    }
                }
            }
        }
        Some(best)
    }
}

fn build(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[[f64; 3]],
) -> u32 {
    let slice = &order[start..end];
    let mut aabb = boxes[slice[0] as usize];
    for &t in &slice[1..] {
        aabb = aabb.merge(&boxes[t as usize]);
    }
    let this = nodes.len() as u32;
    nodes.push(Node {
        aabb,
        kind: NodeKind::Leaf { start: start as u32, count: (end - start) as u32 },
    });
    if end - start <= LEAF_SIZE {
        return this;
    }

    // Split at the centroid median of the widest centroid axis.
    let mut lo = centroids[slice[0] as usize];
    let mut hi = lo;
    for &t in slice {
        for k in 0..3 {
            lo[k] = lo[k].min(centroids[t as usize][k]);
            hi[k] = hi[k].max(centroids[t as usize][k]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        return this; // all centroids coincide; keep the big leaf
    }
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = build(nodes, order, start, start + mid, boxes, centroids);
    let right = build(nodes, order, start + mid, end, boxes, centroids);
    nodes[this as usize].kind = NodeKind::Inner { left, right };
    this
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vec3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_triangles(n: usize, rng: &mut ChaCha8Rng) -> Vec<[[f64; 3]; 3]> {
        (0..n)
            .map(|_| {
                let base = [
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                ];
                let mut t = [base; 3];
                for v in &mut t[1..] {
                    for c in 0..3 {
                        v[c] += rng.gen_range(-1.5..1.5);
                    }
                }
                t
            })
            .collect()
    }

    #[test]
    fn box_queries_match_brute_force_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let tris = random_triangles(300, &mut rng);
        let bvh = Bvh::from_triangles(tris.clone());
        let mut out = Vec::new();
        for _ in 0..200 {
            let c: [f64; 3] = [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ];
            let half = rng.gen_range(0.1..4.0);
            let lo = [c[0] - half, c[1] - half, c[2] - half];
            let hi = [c[0] + half, c[1] + half, c[2] + half];
            bvh.overlapping(lo, hi, &mut out);
            let brute: Vec<u32> = (0..tris.len() as u32)
                .filter(|&i| Aabb::of_triangle(&tris[i as usize]).overlaps(lo, hi))
                .collect();
            assert_eq!(out, brute);
        }
    }

    #[test]
    fn nearest_matches_brute_force_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let tris = random_triangles(250, &mut rng);
        let bvh = Bvh::from_triangles(tris.clone());
        // Distance to the triangle centroid is a valid query metric: the
        // centroid lies inside the triangle's box, so the box bound holds.
        let centroid = |t: &[[f64; 3]; 3]| {
            vec3::scale(vec3::add(vec3::add(t[0], t[1]), t[2]), 1.0 / 3.0)
        };
        for _ in 0..300 {
            let p = [
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            ];
            let (d2, idx) = bvh
                .nearest(p, |i| vec3::dist2(p, centroid(&tris[i as usize])))
                .unwrap();
            let (bd2, bidx) = (0..tris.len() as u32)
                .map(|i| (vec3::dist2(p, centroid(&tris[i as usize])), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .unwrap();
            assert_eq!((d2, idx), (bd2, bidx));
        }
    }

    #[test]
    fn empty_and_tiny_trees_behave() {
        let empty = Bvh::from_triangles(Vec::new());
        assert!(empty.is_empty());
        assert!(empty.nearest([0.0; 3], |_| 0.0).is_none());
        let mut out = vec![7];
        empty.overlapping([-1.0; 3], [1.0; 3], &mut out);
        assert!(out.is_empty());

        let one = Bvh::from_triangles(vec![[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]);
        assert_eq!(one.nearest([5.0, 0.0, 0.0], |_| 16.0), Some((16.0, 0)));
        one.overlapping([0.2; 3], [0.3; 3], &mut out);
        assert!(out.is_empty(), "query box above the triangle plane extent");
        one.overlapping([0.2, 0.2, 0.0], [0.3, 0.3, 0.0], &mut out);
        assert_eq!(out, vec![0]);
    }

    #[test]
    fn degenerate_layouts_still_build() {
        // All centroids identical: the tree degenerates to one leaf.
        let t = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let tris = vec![t; 40];
        let bvh = Bvh::from_triangles(tris);
        let mut out = Vec::new();
        bvh.overlapping([0.0; 3], [0.5; 3], &mut out);
        assert_eq!(out.len(), 40);
    }
}
