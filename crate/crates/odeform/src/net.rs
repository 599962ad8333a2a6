//! The deformation network: a Lipschitz-continuous field F(x) mapping a
//! point to a displacement derivative, built from a point-feature branch,
//! multi-scale cube sampling of a volume, a local-feature branch, and a
//! fused fully connected head.
//!
//! Architecture, for a point `x` in voxel coordinates of the base volume:
//!
//! ```text
//! z_p = φ(W1·x + b1)                               point branch   (3 → C)
//! γ   = cube taps at Q dyadic scales               (Q·K³ values)
//! z_l = φ(W3·φ(W2·γ + b2) + b3)                    local branch   (Q·K³ → C → C)
//! F   = W6·φ(W5·φ(W4·[z_p; z_l] + b4) + b5) + b6   head           (2C → H → H → 3)
//! ```
//!
//! φ is a leaky rectifier with slope 0.2 (Lipschitz constant 1). The final
//! layer has no activation so the output range is unrestricted; the
//! Lipschitz bound accounts for that. All parameters live in one flat
//! `Vec<f64>` laid out layer by layer (row-major weights, then biases), so
//! optimizers and serializers can treat the network as a plain vector.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{downsample_pow2, Volume};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Lipschitz constant of the activation (max of the two slopes).
pub const ACTIVATION_LIPSCHITZ: f64 = 1.0;

#[inline]
fn phi(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// One-sided derivative convention at the kink: the right derivative (1).
#[inline]
fn dphi(pre: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Structural hyperparameters.
///
/// `channels` is both the feature width C of the two branches and the width
/// of the intermediate local-branch layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetHyper {
    /// Q: number of dyadic volume scales sampled.
    pub scales: usize,
    /// K: cube side length (odd, so the center tap sits on the point).
    pub cube_width: usize,
    /// C: feature width of the point and local branches.
    pub channels: usize,
    /// H: hidden width of the fused head.
    pub hidden: usize,
}

impl Default for NetHyper {
    fn default() -> Self {
        Self { scales: 3, cube_width: 5, channels: 128, hidden: 128 }
    }
}

impl NetHyper {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput(
                "network widths and scale count must be positive".into(),
            ));
        }
        if self.cube_width == 0 || self.cube_width % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "cube width must be odd so the center offset is zero, got {}",
                self.cube_width
            )));
        }
        Ok(())
    }

    /// Number of cube taps feeding the local branch (Q·K³).
    pub fn tap_count(&self) -> usize {
        self.scales * self.cube_width.pow(3)
    }
}

/// Index, name, and shape of each affine layer in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    name: &'static str,
    w_off: usize,
    b_off: usize,
    inp: usize,
    out: usize,
}

fn layer_table(hyper: &NetHyper) -> [LayerSpec; 6] {
    let (c, h) = (hyper.channels, hyper.hidden);
    let dims = [
        ("f1", 3, c),
        ("f2", hyper.tap_count(), c),
        ("f3", c, c),
        ("f4", 2 * c, h),
        ("f5", h, h),
        ("f6", h, 3),
    ];
    let mut off = 0;
    dims.map(|(name, inp, out)| {
        let spec = LayerSpec { name, w_off: off, b_off: off + inp * out, inp, out };
        off += inp * out + out;
        spec
    })
}

/// Multi-scale cube of interpolated volume values around one point.
///
/// Entry `(q, h, i, j)` is the trilinear sample of the scale-`q` volume at
/// `x / 2^q + δ` with `δ = (h, i, j) − (K−1)/2` (all indices 0-based, `h`
/// along x, `j` along z). The flat layout is `((q·K + h)·K + i)·K + j`,
/// which is also the order the local branch consumes.
#[derive(Debug, Clone)]
pub struct CubeStack {
    scales: usize,
    width: usize,
    values: Vec<f64>,
}

impl CubeStack {
    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, q: usize, h: usize, i: usize, j: usize) -> f64 {
        let k = self.width;
        self.values[((q * k + h) * k + i) * k + j]
    }
}

/// The dyadic volume pyramid the network samples: level `q` (0-based) is
/// the input averaged over 2^q-wide blocks, so level 0 is the input itself.
pub fn scale_pyramid(volume: &Volume, scales: usize) -> Result<Vec<Volume>> {
    if scales == 0 {
        return Err(Error::InvalidInput("pyramid needs at least one scale".into()));
    }
    (1..=scales as u32).map(|q| downsample_pow2(volume, q)).collect()
}

/// Sample the K³ cube of clamped trilinear taps at each of the Q scales.
///
/// `volumes[q]` must be the 2^q-downsampled volume (`scale_pyramid` builds
/// exactly this), and the point is given in level-0 voxel coordinates.
pub fn cube_sample(x: [f64; 3], volumes: &[Volume], cube_width: usize) -> Result<CubeStack> {
    if volumes.is_empty() {
        return Err(Error::InvalidInput("cube sampling needs at least one volume".into()));
    }
    if cube_width == 0 || cube_width % 2 == 0 {
        return Err(Error::InvalidInput(format!(
            "cube width must be odd so the center offset is zero, got {cube_width}"
        )));
    }
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite sample point {x:?}")));
    }
    let k = cube_width;
    let half = (k as isize - 1) / 2;
    let mut values = Vec::with_capacity(volumes.len() * k * k * k);
    for (q, vol) in volumes.iter().enumerate() {
        let inv = 1.0 / (1u64 << q) as f64;
        let base = [x[0] * inv, x[1] * inv, x[2] * inv];
        for h in 0..k {
            for i in 0..k {
                for j in 0..k {
                    let d = [
                        (h as isize - half) as f64,
                        (i as isize - half) as f64,
                        (j as isize - half) as f64,
                    ];
                    values.push(vol.sample([base[0] + d[0], base[1] + d[1], base[2] + d[2]]));
                }
            }
        }
    }
    Ok(CubeStack { scales: volumes.len(), width: k, values })
}

/// Which vector norm an operator norm or Lipschitz bound refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PNorm {
    L1,
    L2,
    LInf,
}

impl PNorm {
    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            PNorm::L1 => a + b,
            PNorm::L2 => a.hypot(b),
            PNorm::LInf => a.max(b),
        }
    }

    pub fn vector_norm(self, v: &[f64]) -> f64 {
        match self {
            PNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            PNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            PNorm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Hölder factor bounding ‖g‖_dual for a gradient with per-component
    /// magnitude ≤ 1 in 3 dimensions: |f(x)−f(y)| ≤ 3^(1−1/p)·‖x−y‖_p.
    fn holder3(self) -> f64 {
        match self {
            PNorm::L1 => 1.0,
            PNorm::L2 => 3.0f64.sqrt(),
            PNorm::LInf => 3.0,
        }
    }
}

/// Scratch buffers for one forward/backward evaluation; reusable across
/// calls to avoid per-point allocation in hot loops.
#[derive(Debug, Clone)]
pub struct Workspace {
    gamma: Vec<f64>,
    tap_grad: Vec<[f64; 3]>,
    pre1: Vec<f64>,
    z1: Vec<f64>,
    pre2: Vec<f64>,
    a2: Vec<f64>,
    pre3: Vec<f64>,
    fused: Vec<f64>,
    pre4: Vec<f64>,
    a4: Vec<f64>,
    pre5: Vec<f64>,
    a5: Vec<f64>,
    d_a5: Vec<f64>,
    d_a4: Vec<f64>,
    d_fused: Vec<f64>,
    d_a2: Vec<f64>,
    d_gamma: Vec<f64>,
}

impl Workspace {
    pub fn for_hyper(hyper: &NetHyper) -> Self {
        let (c, h, t) = (hyper.channels, hyper.hidden, hyper.tap_count());
        Self {
            gamma: vec![0.0; t],
            tap_grad: vec![[0.0; 3]; t],
            pre1: vec![0.0; c],
            z1: vec![0.0; c],
            pre2: vec![0.0; c],
            a2: vec![0.0; c],
            pre3: vec![0.0; c],
            fused: vec![0.0; 2 * c],
            pre4: vec![0.0; h],
            a4: vec![0.0; h],
            pre5: vec![0.0; h],
            a5: vec![0.0; h],
            d_a5: vec![0.0; h],
            d_a4: vec![0.0; h],
            d_fused: vec![0.0; 2 * c],
            d_a2: vec![0.0; c],
            d_gamma: vec![0.0; t],
        }
    }
}

/// All parameters of one deformation network plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformNetParams {
    hyper: NetHyper,
    params: Vec<f64>,
}

impl DeformNetParams {
    /// All-zero parameters (the network is identically zero).
    pub fn new(hyper: NetHyper) -> Result<Self> {
        hyper.validate()?;
        let count = layer_table(&hyper).iter().map(|l| l.inp * l.out + l.out).sum();
        Ok(Self { hyper, params: vec![0.0; count] })
    }

    /// Fan-in uniform initialization (U(−1/√n, 1/√n) per layer) with the
    /// final layer zeroed, so the freshly initialized field is identically
    /// zero and the induced flow starts as the identity.
    pub fn seeded(hyper: NetHyper, seed: u64) -> Result<Self> {
        let mut net = Self::seeded_with_random_head(hyper, seed)?;
        let table = layer_table(&net.hyper);
        let last = &table[5];
        for v in &mut net.params[last.w_off..last.b_off + last.out] {
            *v = 0.0;
        }
        Ok(net)
    }

    /// Fan-in uniform initialization of every layer including the head;
    /// used where a nonzero random field is wanted.
    pub fn seeded_with_random_head(hyper: NetHyper, seed: u64) -> Result<Self> {
        let mut net = Self::new(hyper)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in layer_table(&net.hyper) {
            let bound = 1.0 / (layer.inp as f64).sqrt();
            for v in &mut net.params[layer.w_off..layer.b_off + layer.out] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Wrap an existing flat parameter vector (layout per `layer_table`).
    pub fn from_flat(hyper: NetHyper, params: Vec<f64>) -> Result<Self> {
        let template = Self::new(hyper)?;
        if params.len() != template.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters for {hyper:?}, got {}",
                template.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite network parameter".into()));
        }
        Ok(Self { hyper, params })
    }

    pub fn hyper(&self) -> &NetHyper {
        &self.hyper
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Human-readable location of a flat parameter index, e.g. `f4.w[2][7]`.
    pub fn describe_param(&self, index: usize) -> String {
        for layer in layer_table(&self.hyper) {
            if index < layer.b_off {
                if index >= layer.w_off {
                    let k = index - layer.w_off;
                    return format!("{}.w[{}][{}]", layer.name, k / layer.inp, k % layer.inp);
                }
            } else if index < layer.b_off + layer.out {
                return format!("{}.b[{}]", layer.name, index - layer.b_off);
            }
        }
        format!("param[{index}]")
    }

    fn affine(&self, layer: &LayerSpec, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), layer.inp);
        debug_assert_eq!(out.len(), layer.out);
        let w = &self.params[layer.w_off..layer.b_off];
        let b = &self.params[layer.b_off..layer.b_off + layer.out];
        for (o, (row, bias)) in w.chunks_exact(layer.inp).zip(b).enumerate() {
            let mut acc = *bias;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
    }

    /// Reverse sweep of one affine layer: accumulates parameter gradients
    /// into `grad` and writes the input cotangent into `d_input`.
    fn affine_backward(
        &self,
        layer: &LayerSpec,
        input: &[f64],
        upstream: &[f64],
        grad: &mut [f64],
        d_input: &mut [f64],
    ) {
        let w = &self.params[layer.w_off..layer.b_off];
        d_input.fill(0.0);
        for (o, up) in upstream.iter().enumerate() {
            let row = &w[o * layer.inp..(o + 1) * layer.inp];
            let grow = &mut grad[layer.w_off + o * layer.inp..layer.w_off + (o + 1) * layer.inp];
            for i in 0..layer.inp {
                grow[i] += up * input[i];
                d_input[i] += up * row[i];
            }
            grad[layer.b_off + o] += up;
        }
    }

    fn check_volumes(&self, volumes: &[Volume]) -> Result<()> {
        if volumes.len() != self.hyper.scales {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} volume scales, got {}",
                self.hyper.scales,
                volumes.len()
            )));
        }
        Ok(())
    }

    /// Evaluate the field at one point (voxel coordinates of `volumes[0]`).
    pub fn forward(&self, x: [f64; 3], volumes: &[Volume]) -> Result<[f64; 3]> {
        let mut ws = Workspace::for_hyper(&self.hyper);
        self.forward_ws(x, volumes, &mut ws)
    }

    /// `forward` with caller-provided scratch buffers.
    pub fn forward_ws(
        &self,
        x: [f64; 3],
        volumes: &[Volume],
        ws: &mut Workspace,
    ) -> Result<[f64; 3]> {
        self.check_volumes(volumes)?;
        self.sample_taps(x, volumes, ws, false)?;
        Ok(self.forward_from_taps(x, ws))
    }

    /// Fill `ws.gamma` (and optionally `ws.tap_grad`, with the dyadic scale
    /// factor folded in) from the volume pyramid.
    fn sample_taps(
        &self,
        x: [f64; 3],
        volumes: &[Volume],
        ws: &mut Workspace,
        with_grad: bool,
    ) -> Result<()> {
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample point {x:?}")));
        }
        let k = self.hyper.cube_width;
        let half = (k as isize - 1) / 2;
        let mut t = 0;
        for (q, vol) in volumes.iter().enumerate() {
            let inv = 1.0 / (1u64 << q) as f64;
            let base = [x[0] * inv, x[1] * inv, x[2] * inv];
            for h in 0..k {
                for i in 0..k {
                    for j in 0..k {
                        let p = [
                            base[0] + (h as isize - half) as f64,
                            base[1] + (i as isize - half) as f64,
                            base[2] + (j as isize - half) as f64,
                        ];
                        if with_grad {
                            let (v, g) = vol.sample_with_gradient(p);
                            ws.gamma[t] = v;
                            ws.tap_grad[t] = [g[0] * inv, g[1] * inv, g[2] * inv];
                        } else {
                            ws.gamma[t] = vol.sample(p);
                        }
                        t += 1;
                    }
                }
            }
        }
        Ok(())
    }

    fn forward_from_taps(&self, x: [f64; 3], ws: &mut Workspace) -> [f64; 3] {
        let table = layer_table(&self.hyper);
        let c = self.hyper.channels;

        self.affine(&table[0], &x, &mut ws.pre1);
        for (z, p) in ws.z1.iter_mut().zip(&ws.pre1) {
            *z = phi(*p);
        }
        self.affine(&table[1], &ws.gamma, &mut ws.pre2);
        for (a, p) in ws.a2.iter_mut().zip(&ws.pre2) {
            *a = phi(*p);
        }
        self.affine(&table[2], &ws.a2, &mut ws.pre3);
        for (f, p) in ws.fused[c..].iter_mut().zip(&ws.pre3) {
            *f = phi(*p);
        }
        ws.fused[..c].copy_from_slice(&ws.z1);

        self.affine(&table[3], &ws.fused, &mut ws.pre4);
        for (a, p) in ws.a4.iter_mut().zip(&ws.pre4) {
            *a = phi(*p);
        }
        self.affine(&table[4], &ws.a4, &mut ws.pre5);
        for (a, p) in ws.a5.iter_mut().zip(&ws.pre5) {
            *a = phi(*p);
        }
        let mut out = [0.0; 3];
        self.affine(&table[5], &ws.a5, &mut out);
        out
    }

    /// Exact reverse-mode derivatives of `forward`.
    ///
    /// Returns the output and the gradient with respect to the input point;
    /// parameter gradients are accumulated (`+=`) into `grad`, which must
    /// have `param_count()` entries. The trilinear-sampling derivative uses
    /// the lower-cell convention on voxel-plane boundaries.
    pub fn backward_ws(
        &self,
        x: [f64; 3],
        volumes: &[Volume],
        upstream: [f64; 3],
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> Result<([f64; 3], [f64; 3])> {
        self.check_volumes(volumes)?;
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient buffer holds {} entries, parameters {}",
                grad.len(),
                self.params.len()
            )));
        }
        self.sample_taps(x, volumes, ws, true)?;
        let out = self.forward_from_taps(x, ws);

        let table = layer_table(&self.hyper);
        let c = self.hyper.channels;

        // Head: f6 (no activation) then f5, f4 through the rectifier.
        let mut d_pre5 = std::mem::take(&mut ws.d_a5);
        self.affine_backward(&table[5], &ws.a5, &upstream, grad, &mut d_pre5);
        for (d, p) in d_pre5.iter_mut().zip(&ws.pre5) {
            *d *= dphi(*p);
        }
        let mut d_pre4 = std::mem::take(&mut ws.d_a4);
        self.affine_backward(&table[4], &ws.a4, &d_pre5, grad, &mut d_pre4);
        for (d, p) in d_pre4.iter_mut().zip(&ws.pre4) {
            *d *= dphi(*p);
        }
        self.affine_backward(&table[3], &ws.fused, &d_pre4, grad, &mut ws.d_fused);
        ws.d_a5 = d_pre5;
        ws.d_a4 = d_pre4;

        // Point branch: d_fused[..c] is dL/dz1.
        let mut d_pre1 = [0.0; 3]; // reused as the x-cotangent of f1
        {
            let mut d_z1pre: Vec<f64> = ws.d_fused[..c]
                .iter()
                .zip(&ws.pre1)
                .map(|(d, p)| d * dphi(*p))
                .collect();
            let d_up = std::mem::take(&mut d_z1pre);
            self.affine_backward(&table[0], &x, &d_up, grad, &mut d_pre1);
        }

        // Local branch: d_fused[c..] is dL/dz3.
        let mut d_pre3: Vec<f64> = ws.d_fused[c..]
            .iter()
            .zip(&ws.pre3)
            .map(|(d, p)| d * dphi(*p))
            .collect();
        self.affine_backward(&table[2], &ws.a2, &d_pre3, grad, &mut ws.d_a2);
        for (d, p) in ws.d_a2.iter_mut().zip(&ws.pre2) {
            *d *= dphi(*p);
        }
        d_pre3.clear();
        let d_a2 = std::mem::take(&mut ws.d_a2);
        self.affine_backward(&table[1], &ws.gamma, &d_a2, grad, &mut ws.d_gamma);
        ws.d_a2 = d_a2;

        // Chain the tap cotangents through the trilinear samplers into x.
        let mut dx = d_pre1;
        for (dg, tg) in ws.d_gamma.iter().zip(&ws.tap_grad) {
            dx[0] += dg * tg[0];
            dx[1] += dg * tg[1];
            dx[2] += dg * tg[2];
        }
        Ok((out, dx))
    }

    /// `forward` with a per-thread cached workspace, for use inside `Sync`
    /// closures (ODE field evaluation under a parallel integrator) where a
    /// `&mut Workspace` cannot be captured.
    pub fn forward_cached(&self, x: [f64; 3], volumes: &[Volume]) -> Result<[f64; 3]> {
        use std::cell::RefCell;
        thread_local! {
            static CACHE: RefCell<Vec<(NetHyper, Workspace)>> = const { RefCell::new(Vec::new()) };
        }
        CACHE.with(|cache| {
            let mut cache = cache.borrow_mut();
            if let Some((_, ws)) = cache.iter_mut().find(|(h, _)| *h == self.hyper) {
                return self.forward_ws(x, volumes, ws);
            }
            let mut ws = Workspace::for_hyper(&self.hyper);
            let out = self.forward_ws(x, volumes, &mut ws);
            cache.push((self.hyper, ws));
            out
        })
    }

    /// Allocating wrapper around `backward_ws`: returns parameter gradients
    /// and the input-point gradient.
    pub fn backward(
        &self,
        x: [f64; 3],
        volumes: &[Volume],
        upstream: [f64; 3],
    ) -> Result<(Vec<f64>, [f64; 3])> {
        let mut grad = vec![0.0; self.params.len()];
        let mut ws = Workspace::for_hyper(&self.hyper);
        let (_, dx) = self.backward_ws(x, volumes, upstream, &mut grad, &mut ws)?;
        Ok((grad, dx))
    }

    fn op_norm(&self, layer: &LayerSpec, p: PNorm) -> f64 {
        let w = &self.params[layer.w_off..layer.b_off];
        match p {
            PNorm::L1 => (0..layer.inp)
                .map(|i| (0..layer.out).map(|o| w[o * layer.inp + i].abs()).sum::<f64>())
                .fold(0.0, f64::max),
            PNorm::LInf => w
                .chunks_exact(layer.inp)
                .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            PNorm::L2 => spectral_norm(w, layer.out, layer.inp),
        }
    }

    /// Analytic upper bound on the Lipschitz constant of `forward` in x,
    /// with respect to the chosen p-norm on both input and output.
    ///
    /// Composition multiplies per-layer bounds L_φ·‖W‖_p (the final layer
    /// carries no activation, hence no L_φ factor there); the two branch
    /// constants combine as (L_p^p + L_l^p)^(1/p) because their outputs are
    /// concatenated; each cube tap at scale q is trilinear in a 2^−q-scaled
    /// coordinate, so its gradient components are bounded by
    /// 2^−q·(max−min) of that scale's volume and the per-tap constant picks
    /// up the 3^(1−1/p) Hölder factor relating gradient bounds to p-norms.
    pub fn lipschitz_upper_bound(&self, volumes: &[Volume], p: PNorm) -> Result<f64> {
        self.check_volumes(volumes)?;
        let table = layer_table(&self.hyper);
        let lphi = ACTIVATION_LIPSCHITZ;

        let l_point = lphi * self.op_norm(&table[0], p);

        let taps_per_scale = self.hyper.cube_width.pow(3) as f64;
        let mut l_gamma = 0.0;
        for (q, vol) in volumes.iter().enumerate() {
            let range = vol.max_value() - vol.min_value();
            let per_tap = range * p.holder3() / (1u64 << q) as f64;
            l_gamma = match p {
                PNorm::L1 => l_gamma + taps_per_scale * per_tap,
                PNorm::L2 => l_gamma.hypot(taps_per_scale.sqrt() * per_tap),
                PNorm::LInf => l_gamma.max(per_tap),
            };
        }
        let l_local =
            lphi * self.op_norm(&table[2], p) * lphi * self.op_norm(&table[1], p) * l_gamma;

        let l_head = lphi
            * self.op_norm(&table[3], p)
            * lphi
            * self.op_norm(&table[4], p)
            * self.op_norm(&table[5], p);
        Ok(l_head * p.combine(l_point, l_local))
    }
}

/// Largest singular value by power iteration on WᵀW (50 iterations,
/// tolerance 1e−9, all-ones start).
fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..50 {
        for (o, row) in w.chunks_exact(cols).enumerate() {
            u[o] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let next = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if next == 0.0 {
            return 0.0;
        }
        v.fill(0.0);
        for (o, row) in w.chunks_exact(cols).enumerate() {
            for (vi, wi) in v.iter_mut().zip(row) {
                *vi += wi * u[o];
            }
        }
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            return next;
        }
        for x in &mut v {
            *x /= vn;
        }
        if (next - sigma).abs() < 1e-9 {
            return next;
        }
        sigma = next;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::trilinear_sample;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64, lo: f64, hi: f64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, 1.0, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn small_hyper() -> NetHyper {
        NetHyper { scales: 2, cube_width: 3, channels: 8, hidden: 8 }
    }

    #[test]
    fn single_scale_single_tap_is_plain_trilinear() {
        let vol = random_volume([9, 7, 8], 1, -2.0, 2.0);
        let stack = cube_sample([3.4, 2.2, 5.1], &[vol.clone()], 1).unwrap();
        assert_eq!(stack.values().len(), 1);
        assert_eq!(stack.get(0, 0, 0, 0), trilinear_sample(&vol, [3.4, 2.2, 5.1]).unwrap());
    }

    #[test]
    fn constant_volume_gives_constant_taps() {
        let vol = Volume::filled([16, 16, 16], 1.0, 4.25).unwrap();
        let pyramid = scale_pyramid(&vol, 3).unwrap();
        let stack = cube_sample([2.0, 14.5, 7.3], &pyramid, 5).unwrap();
        assert!(stack.values().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn taps_match_directly_coded_definition() {
        // Independent evaluation of the sampling rule: scale the point by
        // 2^q, add the integer offset grid, sample that level's volume.
        let vol = random_volume([32, 32, 32], 2, -1.0, 1.0);
        let pyramid = scale_pyramid(&vol, 3).unwrap();
        let (q_n, k) = (3usize, 5usize);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = [
                rng.gen_range(0.0..31.0),
                rng.gen_range(0.0..31.0),
                rng.gen_range(0.0..31.0),
            ];
            let stack = cube_sample(x, &pyramid, k).unwrap();
            for q in 0..q_n {
                for h in 0..k {
                    for i in 0..k {
                        for j in 0..k {
                            let s = (1u64 << q) as f64;
                            let p = [
                                x[0] / s + (h as f64 - 2.0),
                                x[1] / s + (i as f64 - 2.0),
                                x[2] / s + (j as f64 - 2.0),
                            ];
                            let expect = pyramid[q].sample(p);
                            assert!(
                                (stack.get(q, h, i, j) - expect).abs() < 1e-12,
                                "tap ({q},{h},{i},{j})"
                            );
                        }
                    }
                }
            }
            // The center tap is the point itself at each scale.
            for q in 0..q_n {
                let s = (1u64 << q) as f64;
                let center = pyramid[q].sample([x[0] / s, x[1] / s, x[2] / s]);
                assert!((stack.get(q, 2, 2, 2) - center).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_cube_width_is_rejected() {
        let vol = Volume::filled([8, 8, 8], 1.0, 0.0).unwrap();
        assert!(matches!(
            cube_sample([1.0, 1.0, 1.0], &[vol], 4),
            Err(Error::InvalidInput(_))
        ));
        assert!(NetHyper { cube_width: 2, ..small_hyper() }.validate().is_err());
    }

    #[test]
    fn zero_head_means_zero_field_and_identity_seeding_zeroes_the_head() {
        let vol = random_volume([16, 16, 16], 4, -1.0, 1.0);
        let pyramid = scale_pyramid(&vol, 2).unwrap();
        let net = DeformNetParams::seeded(small_hyper(), 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = [
                rng.gen_range(0.0..15.0),
                rng.gen_range(0.0..15.0),
                rng.gen_range(0.0..15.0),
            ];
            assert_eq!(net.forward(x, &pyramid).unwrap(), [0.0, 0.0, 0.0]);
        }
    }

    /// Straight-line reimplementation of the whole composition with nested
    /// loops over explicit weight slices, used as the forward oracle.
    fn forward_oracle(net: &DeformNetParams, x: [f64; 3], pyramid: &[Volume]) -> [f64; 3] {
        let hy = *net.hyper();
        let (c, h, t) = (hy.channels, hy.hidden, hy.tap_count());
        let p = net.params();
        let mut off = 0;
        let mut take = |inp: usize, out: usize| {
            let w = &p[off..off + inp * out];
            let b = &p[off + inp * out..off + inp * out + out];
            off += inp * out + out;
            (w, b)
        };
        let (w1, b1) = take(3, c);
        let (w2, b2) = take(t, c);
        let (w3, b3) = take(c, c);
        let (w4, b4) = take(2 * c, h);
        let (w5, b5) = take(h, h);
        let (w6, b6) = take(h, 3);
        let act = |v: f64| if v >= 0.0 { v } else { 0.2 * v };
        let matvec = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            b.iter()
                .enumerate()
                .map(|(o, bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        };
        let gamma = cube_sample(x, pyramid, hy.cube_width).unwrap();
        let z1: Vec<f64> = matvec(w1, b1, &x).into_iter().map(act).collect();
        let a2: Vec<f64> = matvec(w2, b2, gamma.values()).into_iter().map(act).collect();
        let z3: Vec<f64> = matvec(w3, b3, &a2).into_iter().map(act).collect();
        let mut fused = z1;
        fused.extend(z3);
        let a4: Vec<f64> = matvec(w4, b4, &fused).into_iter().map(act).collect();
        let a5: Vec<f64> = matvec(w5, b5, &a4).into_iter().map(act).collect();
        let out = matvec(w6, b6, &a5);
        [out[0], out[1], out[2]]
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let vol = random_volume([16, 16, 16], 6, -1.0, 1.0);
        let pyramid = scale_pyramid(&vol, 2).unwrap();
        let net = DeformNetParams::seeded_with_random_head(small_hyper(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let x = [
                rng.gen_range(0.0..15.0),
                rng.gen_range(0.0..15.0),
                rng.gen_range(0.0..15.0),
            ];
            let got = net.forward(x, &pyramid).unwrap();
            let want = forward_oracle(&net, x, &pyramid);
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-12, "{got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn batched_evaluation_is_bit_identical_to_single_calls() {
        let vol = random_volume([16, 16, 16], 9, -1.0, 1.0);
        let pyramid = scale_pyramid(&vol, 2).unwrap();
        let net = DeformNetParams::seeded_with_random_head(small_hyper(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.gen_range(0.0..15.0),
                    rng.gen_range(0.0..15.0),
                    rng.gen_range(0.0..15.0),
                ]
            })
            .collect();
        let mut ws = Workspace::for_hyper(net.hyper());
        for &x in &points {
            let batched = net.forward_ws(x, &pyramid, &mut ws).unwrap();
            let single = net.forward(x, &pyramid).unwrap();
            assert_eq!(batched, single);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let vol = random_volume([16, 16, 16], 12, -1.0, 1.0);
        let pyramid = scale_pyramid(&vol, 2).unwrap();
        let net = DeformNetParams::seeded_with_random_head(small_hyper(), 13).unwrap();
        let (grad, dx) = net.backward([4.3, 7.7, 9.1], &pyramid, [0.0; 3]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
        assert_eq!(dx, [0.0; 3]);
    }

    #[test]
    fn point_gradient_matches_matrix_product_in_the_linear_regime() {
        // Constant volume ⇒ the local branch contributes no x-dependence;
        // large positive biases keep every rectifier on its identity side,
        // so the Jacobian is exactly W6·W5·W4[:, :C]·W1.
        let hy = small_hyper();
        let mut net = DeformNetParams::seeded_with_random_head(hy, 14).unwrap();
        let table = layer_table(&hy);
        for layer in &table[..5] {
            for b in layer.b_off..layer.b_off + layer.out {
                net.params_mut()[b] = 10.0;
            }
        }
        let vol = Volume::filled([16, 16, 16], 1.0, 0.3).unwrap();
        let pyramid = scale_pyramid(&vol, 2).unwrap();
        let x = [5.2, 6.6, 7.9];
        let p = net.params().to_vec();
        let slice = |l: &LayerSpec| p[l.w_off..l.b_off].to_vec();
        let (w1, w4, w5, w6) = (slice(&table[0]), slice(&table[3]), slice(&table[4]), slice(&table[5]));
        let (c, h) = (hy.channels, hy.hidden);
        // jac[o][i] over the chain, built by explicit matrix products.
        let mut j = vec![vec![0.0; 3]; c];
        for o in 0..c {
            for i in 0..3 {
                j[o][i] = w1[o * 3 + i];
            }
        }
        let mul = |a: &[f64], rows: usize, cols: usize, j: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|o| {
                    (0..3)
                        .map(|i| (0..cols).map(|m| a[o * cols + m] * j[m][i]).sum())
                        .collect()
                })
                .collect()
        };
        // W4 acts on [z1; z3]; only the first C columns see x.
        let w4_left: Vec<f64> =
            (0..h).flat_map(|o| w4[o * 2 * c..o * 2 * c + c].to_vec()).collect();
        let j = mul(&w4_left, h, c, &j);
        let j = mul(&w5, h, h, &j);
        let j = mul(&w6, 3, h, &j);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..5 {
            let up = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let (_, dx) = net.backward(x, &pyramid, up).unwrap();
            for i in 0..3 {
                let want: f64 = (0..3).map(|o| up[o] * j[o][i]).sum();
                assert!((dx[i] - want).abs() < 1e-10, "{} vs {}", dx[i], want);
            }
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let vol = random_volume([16, 16, 16], 16, -1.0, 1.0);
        let pyramid = scale_pyramid(&vol, 2).unwrap();
        let net = DeformNetParams::seeded_with_random_head(small_hyper(), 17).unwrap();
        let x = [5.37, 8.13, 10.42];
        let up = [0.7, -1.1, 0.4];
        let loss = |n: &DeformNetParams, x: [f64; 3]| -> f64 {
            let f = n.forward(x, &pyramid).unwrap();
            f[0] * up[0] + f[1] * up[1] + f[2] * up[2]
        };
        let (grad, dx) = net.backward(x, &pyramid, up).unwrap();

        let step = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut checked = 0;
        for _ in 0..50 {
            let k = rng.gen_range(0..net.param_count());
            let mut plus = net.clone();
            plus.params_mut()[k] += step;
            let mut minus = net.clone();
            minus.params_mut()[k] -= step;
            let fd = (loss(&plus, x) - loss(&minus, x)) / (2.0 * step);
            let denom = fd.abs().max(grad[k].abs());
            if denom < 1e-7 {
                continue; // both effectively zero; relative error undefined
            }
            assert!(
                (fd - grad[k]).abs() / denom < 1e-4,
                "param {} ({}): fd {fd} vs ad {}",
                k,
                net.describe_param(k),
                grad[k]
            );
            checked += 1;
        }
        assert!(checked >= 40, "only {checked} parameter coordinates checked");

        for axis in 0..3 {
            let mut xp = x;
            xp[axis] += step;
            let mut xm = x;
            xm[axis] -= step;
            let fd = (loss(&net, xp) - loss(&net, xm)) / (2.0 * step);
            assert!(
                (fd - dx[axis]).abs() / fd.abs().max(dx[axis].abs()).max(1e-9) < 1e-4,
                "axis {axis}: fd {fd} vs ad {}",
                dx[axis]
            );
        }
    }

    #[test]
    fn operator_norms_match_hand_values() {
        let hy = NetHyper { scales: 1, cube_width: 1, channels: 2, hidden: 2 };
        let mut net = DeformNetParams::new(hy).unwrap();
        let table = layer_table(&hy);
        // f3 is a 2×2 block we can control directly.
        let l = table[2];
        let w = [3.0, -1.0, 2.0, 4.0];
        net.params_mut()[l.w_off..l.w_off + 4].copy_from_slice(&w);
        assert_eq!(net.op_norm(&l, PNorm::L1), 5.0); // columns: |3|+|2|, |−1|+|4|
        assert_eq!(net.op_norm(&l, PNorm::LInf), 6.0); // rows: 4, 6
        // Spectral norm of [[3,−1],[2,4]]: singular values of WᵀW.
        let gram: [f64; 4] = [13.0, 5.0, 5.0, 17.0];
        let tr = gram[0] + gram[3];
        let det = gram[0] * gram[3] - gram[1] * gram[2];
        let sigma = ((tr + (tr * tr - 4.0 * det).sqrt()) / 2.0).sqrt();
        assert!((net.op_norm(&l, PNorm::L2) - sigma).abs() < 1e-8);
    }

    #[test]
    fn constant_volume_reduces_bound_to_the_point_branch() {
        let hy = small_hyper();
        let net = DeformNetParams::seeded_with_random_head(hy, 19).unwrap();
        let vol = Volume::filled([16, 16, 16], 1.0, 2.0).unwrap();
        let pyramid = scale_pyramid(&vol, hy.scales).unwrap();
        let table = layer_table(&hy);
        for p in [PNorm::L1, PNorm::L2, PNorm::LInf] {
            let got = net.lipschitz_upper_bound(&pyramid, p).unwrap();
            let head =
                net.op_norm(&table[3], p) * net.op_norm(&table[4], p) * net.op_norm(&table[5], p);
            let want = head * net.op_norm(&table[0], p);
            assert!((got - want).abs() < 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn empirical_ratio_never_exceeds_the_bound() {
        let vol = random_volume([16, 16, 16], 20, -3.0, 3.0);
        let hy = small_hyper();
        let pyramid = scale_pyramid(&vol, hy.scales).unwrap();
        for seed in 0..3 {
            let net = DeformNetParams::seeded_with_random_head(hy, 300 + seed).unwrap();
            for p in [PNorm::L1, PNorm::L2, PNorm::LInf] {
                let bound = net.lipschitz_upper_bound(&pyramid, p).unwrap();
                assert!(bound.is_finite() && bound > 0.0);
                let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
                for _ in 0..2000 {
                    let a: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.0..15.0));
                    let b: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.0..15.0));
                    let fa = net.forward(a, &pyramid).unwrap();
                    let fb = net.forward(b, &pyramid).unwrap();
                    let num = p.vector_norm(&[fa[0] - fb[0], fa[1] - fb[1], fa[2] - fb[2]]);
                    let den = p.vector_norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
                    if den > 0.0 {
                        assert!(num <= bound * den * (1.0 + 1e-12), "ratio {} bound {bound}", num / den);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_continuous_under_tiny_perturbations() {
        let vol = random_volume([16, 16, 16], 21, -2.0, 2.0);
        let hy = small_hyper();
        let pyramid = scale_pyramid(&vol, hy.scales).unwrap();
        let net = DeformNetParams::seeded_with_random_head(hy, 22).unwrap();
        let l = net.lipschitz_upper_bound(&pyramid, PNorm::L2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let x: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.5..14.5));
            let axis = rng.gen_range(0..3);
            let mut y = x;
            y[axis] += 1e-9;
            let fx = net.forward(x, &pyramid).unwrap();
            let fy = net.forward(y, &pyramid).unwrap();
            let d = ((fx[0] - fy[0]).powi(2) + (fx[1] - fy[1]).powi(2) + (fx[2] - fy[2]).powi(2))
                .sqrt();
            assert!(d < 1e-6 * l.max(1.0));
        }
    }

    #[test]
    fn shape_and_parameter_validation() {
        let hy = small_hyper();
        let net = DeformNetParams::new(hy).unwrap();
        let vol = Volume::filled([8, 8, 8], 1.0, 0.0).unwrap();
        // Wrong pyramid depth.
        assert!(matches!(
            net.forward([1.0; 3], &[vol.clone()]),
            Err(Error::ShapeMismatch(_))
        ));
        // Flat vector length must match the hyperparameters.
        assert!(matches!(
            DeformNetParams::from_flat(hy, vec![0.0; 7]),
            Err(Error::ShapeMismatch(_))
        ));
        let round = DeformNetParams::from_flat(hy, net.params().to_vec()).unwrap();
        assert_eq!(round, net);
        // Parameter naming covers weights and biases.
        assert_eq!(net.describe_param(0), "f1.w[0][0]");
        assert_eq!(net.describe_param(net.param_count() - 1), "f6.b[2]");
    }
}
