//! Dense scalar volumes and label masks with the resampling primitives the
//! rest of the pipeline is built on.
//!
//! Conventions used everywhere in this crate:
//!
//! - Linear layout is x-fastest: `index = x + dims[0] * (y + dims[1] * z)`.
//! - Continuous sampling positions are in voxel coordinates, where the
//!   center of voxel `(x, y, z)` sits at the point `(x, y, z)`.
//! - Sampling outside the grid clamps the position to the outermost voxel
//!   centers, so sampled fields are constant beyond the boundary.

use crate::error::{Error, Result};

/// A dense scalar field on a regular grid, stored as `f64` x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: f64,
    data: Vec<f64>,
}

impl Volume {
    /// Builds a volume from raw data, validating shape, spacing and
    /// finiteness.
    pub fn new(dims: [usize; 3], spacing: f64, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidInput(format!(
                "voxel spacing must be positive and finite, got {spacing}"
            )));
        }
        let expect = dims[0] * dims[1] * dims[2];
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                expect
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "volume voxel {i} is not finite"
            )));
        }
        Ok(Self { dims, spacing, data })
    }

    /// A volume filled with one value.
    pub fn filled(dims: [usize; 3], spacing: f64, value: f64) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel center.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: f64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Self::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clamped trilinear sample at a voxel-coordinate position.
    ///
    /// The position must be finite; use [`trilinear_sample`] for the
    /// validating entry point. Positions outside the grid are clamped to
    /// the boundary voxel centers per the module convention.
    #[inline]
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        debug_assert!(p.iter().all(|c| c.is_finite()));
        let (x0, x1, fx) = cell_coord(p[0], self.dims[0]);
        let (y0, y1, fy) = cell_coord(p[1], self.dims[1]);
        let (z0, z1, fz) = cell_coord(p[2], self.dims[2]);

        let c000 = self.get(x0, y0, z0);
        let c100 = self.get(x1, y0, z0);
        let c010 = self.get(x0, y1, z0);
        let c110 = self.get(x1, y1, z0);
        let c001 = self.get(x0, y0, z1);
        let c101 = self.get(x1, y0, z1);
        let c011 = self.get(x0, y1, z1);
        let c111 = self.get(x1, y1, z1);

        let c00 = c000 + fx * (c100 - c000);
        let c10 = c010 + fx * (c110 - c010);
        let c01 = c001 + fx * (c101 - c001);
        let c11 = c011 + fx * (c111 - c011);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        c0 + fz * (c1 - c0)
    }

    /// Trilinear sample together with its spatial gradient.
    ///
    /// The interpolant is only piecewise differentiable, so a convention is
    /// needed on cell boundaries: on an interior lattice plane the gradient
    /// of the *lower* cell is returned. Outside the grid the clamped sample
    /// is constant along the clamped axes and the corresponding gradient
    /// components are zero.
    pub fn sample_with_gradient(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        debug_assert!(p.iter().all(|c| c.is_finite()));
        let (x0, x1, fx, dx) = cell_coord_lower(p[0], self.dims[0]);
        let (y0, y1, fy, dy) = cell_coord_lower(p[1], self.dims[1]);
        let (z0, z1, fz, dz) = cell_coord_lower(p[2], self.dims[2]);

        let c000 = self.get(x0, y0, z0);
        let c100 = self.get(x1, y0, z0);
        let c010 = self.get(x0, y1, z0);
        let c110 = self.get(x1, y1, z0);
        let c001 = self.get(x0, y0, z1);
        let c101 = self.get(x1, y0, z1);
        let c011 = self.get(x0, y1, z1);
        let c111 = self.get(x1, y1, z1);

        let gx = (1.0 - fy) * (1.0 - fz) * (c100 - c000)
            + fy * (1.0 - fz) * (c110 - c010)
            + (1.0 - fy) * fz * (c101 - c001)
            + fy * fz * (c111 - c011);
        let gy = (1.0 - fx) * (1.0 - fz) * (c010 - c000)
            + fx * (1.0 - fz) * (c110 - c100)
            + (1.0 - fx) * fz * (c011 - c001)
            + fx * fz * (c111 - c101);
        let gz = (1.0 - fx) * (1.0 - fy) * (c001 - c000)
            + fx * (1.0 - fy) * (c101 - c100)
            + (1.0 - fx) * fy * (c011 - c010)
            + fx * fy * (c111 - c110);

        let c00 = c000 + fx * (c100 - c000);
        let c10 = c010 + fx * (c110 - c010);
        let c01 = c001 + fx * (c101 - c001);
        let c11 = c011 + fx * (c111 - c011);
        let c0 = c00 + fy * (c10 - c00);
        let c1 = c01 + fy * (c11 - c01);
        let value = c0 + fz * (c1 - c0);

        (value, [gx * dx, gy * dy, gz * dz])
    }
}

/// Interpolation cell for one axis: lower index, upper index, fraction.
#[inline]
fn cell_coord(coord: f64, d: usize) -> (usize, usize, f64) {
    if d == 1 {
        return (0, 0, 0.0);
    }
    let c = coord.clamp(0.0, (d - 1) as f64);
    let mut i = c as usize; // c >= 0, truncation == floor
    if i > d - 2 {
        i = d - 2;
    }
    (i, i + 1, c - i as f64)
}

/// Like [`cell_coord`] but resolves lattice-plane positions to the lower
/// cell and reports whether the axis was clamped (gradient mask 0/1).
#[inline]
fn cell_coord_lower(coord: f64, d: usize) -> (usize, usize, f64, f64) {
    if d == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let hi = (d - 1) as f64;
    let clamped = !(coord > 0.0 && coord < hi);
    let c = coord.clamp(0.0, hi);
    let mut i = c as usize;
    if i > d - 2 {
        i = d - 2;
    }
    let mut f = c - i as f64;
    if f == 0.0 && i > 0 {
        i -= 1;
        f = 1.0;
    }
    (i, i + 1, f, if clamped { 0.0 } else { 1.0 })
}

/// Validating trilinear interpolation at a voxel-coordinate position.
///
/// Positions outside the grid are clamped to the boundary before
/// interpolation; non-finite positions are an error.
pub fn trilinear_sample(volume: &Volume, p: [f64; 3]) -> Result<f64> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sample position {p:?} is not finite"
        )));
    }
    Ok(volume.sample(p))
}

/// Downsamples by block averaging with factor `2^(q-1)`; `q = 1` returns an
/// identical copy.
///
/// Output dims are `floor(dims / 2^(q-1))`; trailing voxels that do not fill
/// a complete block are dropped. Every output voxel is the mean of its full
/// `2^(q-1)` cube, so constant volumes stay constant at every scale.
pub fn downsample_pow2(volume: &Volume, q: u32) -> Result<Volume> {
    if q == 0 {
        return Err(Error::InvalidInput(
            "downsample scale index q must be >= 1".into(),
        ));
    }
    let f = 1usize << (q - 1);
    if f == 1 {
        return Ok(volume.clone());
    }
    let sd = volume.dims();
    let dd = [sd[0] / f, sd[1] / f, sd[2] / f];
    if dd.iter().any(|&d| d == 0) {
        return Err(Error::InvalidInput(format!(
            "volume dims {sd:?} too small for downsample factor {f}"
        )));
    }
    let inv = 1.0 / (f * f * f) as f64;
    let mut out = Vec::with_capacity(dd[0] * dd[1] * dd[2]);
    for bz in 0..dd[2] {
        for by in 0..dd[1] {
            for bx in 0..dd[0] {
                let mut sum = 0.0;
                for z in bz * f..(bz + 1) * f {
                    for y in by * f..(by + 1) * f {
                        for x in bx * f..(bx + 1) * f {
                            sum += volume.get(x, y, z);
                        }
                    }
                }
                out.push(sum * inv);
            }
        }
    }
    Volume::new(dd, volume.spacing() * f as f64, out)
}

/// Separable Gaussian smoothing with a truncated, unit-renormalized kernel.
///
/// The kernel radius is `ceil(4 * sigma)` taps on each side and the taps are
/// renormalized to sum to one, so constant volumes map to themselves (up to
/// rounding). Borders replicate the edge voxel.
pub fn gaussian_smooth(volume: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "gaussian sigma must be positive and finite, got {sigma}"
        )));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut taps = Vec::with_capacity((2 * radius + 1) as usize);
    for j in -radius..=radius {
        taps.push((-(j * j) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= norm;
    }

    let dims = volume.dims();
    let mut cur = volume.data().to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        blur_axis(&cur, &mut next, dims, axis, &taps, radius);
        std::mem::swap(&mut cur, &mut next);
    }
    Volume::new(dims, volume.spacing(), cur)
}

/// One separable blur pass along `axis`, replicating edge samples.
fn blur_axis(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize, taps: &[f64], radius: i64) {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as i64;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let idx = x + dims[0] * (y + dims[1] * z);
                let pos = [x, y, z][axis] as i64;
                let line_start = idx - pos as usize * stride;
                let mut acc = 0.0;
                for (k, &w) in taps.iter().enumerate() {
                    let q = (pos + k as i64 - radius).clamp(0, n - 1) as usize;
                    acc += w * src[line_start + q * stride];
                }
                dst[idx] = acc;
            }
        }
    }
}

/// A voxel label field over a small declared alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: [usize; 3],
    labels: Vec<u8>,
    alphabet: Vec<u8>,
}

impl LabelMask {
    /// Default alphabet: background plus two hemispheres.
    pub const DEFAULT_ALPHABET: [u8; 3] = [0, 1, 2];

    pub fn new(dims: [usize; 3], labels: Vec<u8>, alphabet: &[u8]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "mask dims must be positive, got {dims:?}"
            )));
        }
        let expect = dims[0] * dims[1] * dims[2];
        if labels.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} does not match dims {:?} ({} voxels)",
                labels.len(),
                dims,
                expect
            )));
        }
        if let Some(i) = labels.iter().position(|l| !alphabet.contains(l)) {
            return Err(Error::InvalidInput(format!(
                "mask voxel {i} holds label {} outside the declared alphabet {:?}",
                labels[i], alphabet
            )));
        }
        Ok(Self {
            dims,
            labels,
            alphabet: alphabet.to_vec(),
        })
    }

    /// Thresholds a volume into a binary mask: `label` where
    /// `value > level`, 0 elsewhere.
    pub fn from_volume_threshold(volume: &Volume, level: f64, label: u8) -> Result<Self> {
        let labels = volume
            .data()
            .iter()
            .map(|&v| if v > level { label } else { 0 })
            .collect();
        Self::new(volume.dims(), labels, &[0, label])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn alphabet(&self) -> &[u8] {
        &self.alphabet
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Keeps only the largest 26-connected component of `label`, zeroing every
/// other voxel.
///
/// Component size ties break deterministically toward the component whose
/// lowest voxel linear index is smallest. Errors if the label is absent.
pub fn largest_connected_component(mask: &LabelMask, label: u8) -> Result<LabelMask> {
    let dims = mask.dims();
    let n = mask.labels().len();
    let mut visited = vec![false; n];
    let mut best: Option<(usize, usize, Vec<u32>)> = None; // (size, first index, voxels)
    let mut stack = Vec::new();

    for start in 0..n {
        if visited[start] || mask.labels()[start] != label {
            continue;
        }
        let mut comp = Vec::new();
        visited[start] = true;
        stack.push(start as u32);
        while let Some(v) = stack.pop() {
            comp.push(v);
            let [x, y, z] = coords_of(v as usize, dims);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0
                            || ny < 0
                            || nz < 0
                            || nx >= dims[0] as i64
                            || ny >= dims[1] as i64
                            || nz >= dims[2] as i64
                        {
                            continue;
                        }
                        let ni = nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize);
                        if !visited[ni] && mask.labels()[ni] == label {
                            visited[ni] = true;
                            stack.push(ni as u32);
                        }
                    }
                }
            }
        }
        // `start` scans ascending, so it is this component's lowest index.
        let replace = match &best {
            None => true,
            Some((size, first, _)) => comp.len() > *size || (comp.len() == *size && start < *first),
        };
        if replace {
            best = Some((comp.len(), start, comp));
        }
    }

    let (_, _, keep) = best.ok_or(Error::LabelNotFound { label })?;
    let mut labels = vec![0u8; n];
    for v in keep {
        labels[v as usize] = label;
    }
    LabelMask::new(dims, labels, mask.alphabet())
}

#[inline]
fn coords_of(index: usize, dims: [usize; 3]) -> [usize; 3] {
    [
        index % dims[0],
        (index / dims[0]) % dims[1],
        index / (dims[0] * dims[1]),
    ]
}
