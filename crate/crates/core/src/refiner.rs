//! Toy-scale Gaussian refiner: anchors with latent features are refined by
//! sampling a feature field, interacting globally through a small latent
//! bank, and rectifying anchors residually; heads then decode primitive
//! attributes.
//!
//! The feature field stands in for image features. It is a regular 4D grid
//! (three spatial axes and time) interpolated multilinearly.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffops::ops::FnOp;
use crate::diffops::{Graph, Linear, Mlp, MultiHeadAttention, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, LabelGrid};
use crate::primitive::Gaussian4D;

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerConfig {
    /// Feature width D.
    pub dim: usize,
    /// Latent bank size M.
    pub latents: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Primitive count Q.
    pub gaussians: usize,
    pub num_classes: usize,
    /// Standard deviation of initial anchor features.
    pub feature_std: f64,
}

impl RefinerConfig {
    /// Desk-scale defaults: D = 16, M = 64, Q = 256, two blocks.
    pub fn desk(num_classes: usize) -> Self {
        RefinerConfig { dim: 16, latents: 64, heads: 2, blocks: 2, gaussians: 256, num_classes, feature_std: 0.1 }
    }

    /// Full-size settings: D = 256, M = 1280, Q = 25600, three blocks.
    pub fn full_scale(num_classes: usize) -> Self {
        RefinerConfig { dim: 256, latents: 1280, heads: 8, blocks: 3, gaussians: 25_600, num_classes, feature_std: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.latents == 0 || self.gaussians == 0 || self.num_classes == 0 {
            return Err(Error::validation("refiner blocks, latents, gaussians and classes must be >= 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::validation(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Width of the attribute head: logits, opacity, scales, quaternion,
    /// planar velocity, temporal scale.
    pub fn head_width(&self) -> usize {
        self.num_classes + 1 + 3 + 4 + 2 + 1
    }
}

// ---------------------------------------------------------------- feature field

/// Regular 4D grid of D-vectors, interpolated linearly along each axis and
/// clamped at the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    /// Position of node `(0, 0, 0, 0)`: x, y, z, t.
    pub origin: [f64; 4],
    pub spacing: [f64; 4],
    pub dims: [usize; 4],
    pub dim: usize,
    /// Node-major: `((((ix * ny + iy) * nz + iz) * nt + it) * D + d)`.
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn new(origin: [f64; 4], spacing: [f64; 4], dims: [usize; 4], dim: usize, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || spacing.iter().any(|&s| !(s > 0.0)) || dim == 0 {
            return Err(Error::validation("feature field needs positive dims and spacing"));
        }
        let n = dims.iter().product::<usize>() * dim;
        if data.len() != n {
            return Err(Error::shape("feature field", &[data.len()], &[n]));
        }
        Ok(FeatureField { origin, spacing, dims, dim, data })
    }

    pub fn constant(value: &[f64]) -> Self {
        FeatureField { origin: [0.0; 4], spacing: [1.0; 4], dims: [1; 4], dim: value.len(), data: value.to_vec() }
    }

    /// Nodes at voxel centers of `spec` and at `times`; each node carries a
    /// fixed random embedding of its ground-truth category.
    pub fn from_labels<R: Rng>(spec: &GridSpec, times: &[f64], labels: &[LabelGrid], dim: usize, rng: &mut R) -> Result<Self> {
        if times.len() != labels.len() || times.is_empty() {
            return Err(Error::validation("need one label grid per field time"));
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9) || !(dt > 0.0) {
            return Err(Error::validation("field times must be evenly spaced and increasing"));
        }
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let emb: Vec<f64> = (0..(spec.num_classes + 1) * dim).map(|_| normal.sample(rng)).collect();
        let nt = times.len();
        let nv = spec.num_voxels();
        let mut data = vec![0.0; nv * nt * dim];
        for v in 0..nv {
            for (it, l) in labels.iter().enumerate() {
                let c = l.labels[v] as usize;
                let dst = (v * nt + it) * dim;
                data[dst..dst + dim].copy_from_slice(&emb[c * dim..(c + 1) * dim]);
            }
        }
        let half = spec.voxel_size / 2.0;
        FeatureField::new(
            [spec.origin[0] + half, spec.origin[1] + half, spec.origin[2] + half, times[0]],
            [spec.voxel_size, spec.voxel_size, spec.voxel_size, dt],
            [spec.dims[0], spec.dims[1], spec.dims[2], nt],
            dim,
            data,
        )
    }

    /// Lower node index, fractional offset and d(offset)/d(coordinate) along one axis.
    fn axis(&self, a: usize, x: f64) -> (usize, f64, f64) {
        let n = self.dims[a];
        if n == 1 {
            return (0, 0.0, 0.0);
        }
        let u = (x - self.origin[a]) / self.spacing[a];
        let hi = (n - 1) as f64;
        if !(u > 0.0) {
            return (0, 0.0, 0.0);
        }
        if u >= hi {
            return (n - 2, 1.0, 0.0);
        }
        let i = (u.floor() as usize).min(n - 2);
        (i, u - i as f64, 1.0 / self.spacing[a])
    }

    fn node(&self, idx: [usize; 4]) -> &[f64] {
        let [nx, ny, nz, nt] = self.dims;
        let _ = nx;
        let base = (((idx[0] * ny + idx[1]) * nz + idx[2]) * nt + idx[3]) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// Interpolated feature at `(p, t)`; if `grad` is given, also accumulates
    /// `sum_d upstream[d] * d feature[d] / d coordinate` into it.
    fn eval(&self, p: [f64; 4], out: &mut [f64], upstream: Option<(&[f64], &mut [f64; 4])>) {
        let ax: Vec<(usize, f64, f64)> = (0..4).map(|a| self.axis(a, p[a])).collect();
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut dcoord = [0.0; 4];
        let want_grad = upstream.is_some();
        for corner in 0..16usize {
            let mut idx = [0usize; 4];
            let mut w = 1.0;
            let mut skip = false;
            let mut partial = [1.0; 4];
            for a in 0..4 {
                let bit = (corner >> a) & 1;
                let (i, f, _) = ax[a];
                if bit == 1 && self.dims[a] == 1 {
                    skip = true;
                    break;
                }
                idx[a] = i + bit;
                let wa = if bit == 1 { f } else { 1.0 - f };
                let dwa = if bit == 1 { 1.0 } else { -1.0 };
                for (b, pb) in partial.iter_mut().enumerate() {
                    *pb *= if a == b { dwa } else { wa };
                }
                w *= wa;
            }
            if skip {
                continue;
            }
            let node = self.node(idx);
            if w != 0.0 {
                for d in 0..self.dim {
                    out[d] += w * node[d];
                }
            }
            if want_grad {
                if let Some((up, _)) = &upstream {
                    let dot: f64 = (0..self.dim).map(|d| up[d] * node[d]).sum();
                    for a in 0..4 {
                        dcoord[a] += partial[a] * ax[a].2 * dot;
                    }
                }
            }
        }
        if let Some((_, g)) = upstream {
            for a in 0..4 {
                g[a] += dcoord[a];
            }
        }
    }

    /// Interpolated feature at a space-time point.
    pub fn sample(&self, p: [f64; 3], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval([p[0], p[1], p[2], t], &mut out, None);
        out
    }
}

impl Graph {
    /// Field features at anchors `mu_s [Q,3]`, `mu_t [Q,1]` -> `[Q, D]`.
    pub fn sample_field(&mut self, field: &Arc<FeatureField>, mu_s: Var, mu_t: Var) -> Result<Var> {
        let (ms, mt) = (self.value(mu_s), self.value(mu_t));
        let q = mt.len();
        if ms.len() != 3 * q {
            return Err(Error::shape("sample_field", ms.shape(), &[q, 3]));
        }
        let d = field.dim;
        let mut out = vec![0.0; q * d];
        for i in 0..q {
            let p = [ms.data()[3 * i], ms.data()[3 * i + 1], ms.data()[3 * i + 2], mt.data()[i]];
            field.eval(p, &mut out[i * d..(i + 1) * d], None);
        }
        let value = Tensor::matrix(q, d, out)?;
        let field = Arc::clone(field);
        Ok(self.push(
            value,
            &[mu_s, mu_t],
            FnOp::boxed("sample_field", move |inp, _, g| {
                let (ms, mt) = (inp[0], inp[1]);
                let mut gs = Tensor::zeros(ms.shape());
                let mut gt = Tensor::zeros(mt.shape());
                let mut scratch = vec![0.0; d];
                for i in 0..q {
                    let p = [ms.data()[3 * i], ms.data()[3 * i + 1], ms.data()[3 * i + 2], mt.data()[i]];
                    let mut gc = [0.0; 4];
                    field.eval(p, &mut scratch, Some((&g.data()[i * d..(i + 1) * d], &mut gc)));
                    gs.data_mut()[3 * i..3 * i + 3].copy_from_slice(&gc[..3]);
                    gt.data_mut()[i] = gc[3];
                }
                Ok(vec![Some(gs), Some(gt)])
            }),
        ))
    }
}

// ---------------------------------------------------------------- anchors

/// Anchors and their latent features as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub mu_s: Tensor,
    pub mu_t: Tensor,
    pub features: Tensor,
}

impl AnchorSet {
    /// Means uniform over the grid volume, anchors uniform over `[0, horizon]`,
    /// features normal with `cfg.feature_std`.
    pub fn random<R: Rng>(cfg: &RefinerConfig, spec: &GridSpec, horizon: f64, rng: &mut R) -> Result<Self> {
        let hi = spec.extent_max();
        let q = cfg.gaussians;
        let mu_s = (0..q * 3).map(|i| rng.random_range(spec.origin[i % 3]..hi[i % 3])).collect();
        let mu_t = (0..q).map(|_| rng.random_range(0.0..horizon)).collect();
        let normal = Normal::new(0.0, cfg.feature_std).map_err(|e| Error::invalid(e.to_string()))?;
        let features = (0..q * cfg.dim).map(|_| normal.sample(rng)).collect();
        Ok(AnchorSet {
            mu_s: Tensor::matrix(q, 3, mu_s)?,
            mu_t: Tensor::matrix(q, 1, mu_t)?,
            features: Tensor::matrix(q, cfg.dim, features)?,
        })
    }

    pub fn len(&self) -> usize {
        self.mu_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_t.is_empty()
    }

    /// Rows reordered by `perm` (row `i` of the result is row `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let data = perm.iter().flat_map(|&i| t.row_slice(i).to_vec()).collect();
            Tensor::matrix(perm.len(), c, data).expect("consistent shape")
        };
        AnchorSet { mu_s: pick(&self.mu_s), mu_t: pick(&self.mu_t), features: pick(&self.features) }
    }
}

/// Graph handles of anchors during refinement.
#[derive(Debug, Clone, Copy)]
pub struct AnchorVars {
    pub mu_s: Var,
    pub mu_t: Var,
    pub features: Var,
}

impl AnchorVars {
    pub fn constant(g: &mut Graph, a: &AnchorSet) -> Self {
        AnchorVars {
            mu_s: g.constant(a.mu_s.clone()),
            mu_t: g.constant(a.mu_t.clone()),
            features: g.constant(a.features.clone()),
        }
    }
}

// ---------------------------------------------------------------- network

pub const LATENTS: &str = "refiner.latents";

fn block_prefix(b: usize) -> String {
    format!("refiner.block{b}")
}

fn attn(prefix: &str, which: &str, cfg: &RefinerConfig) -> MultiHeadAttention {
    MultiHeadAttention::new(format!("{prefix}.{which}"), cfg.dim, cfg.heads).expect("validated config")
}

fn rectifier(prefix: &str, cfg: &RefinerConfig) -> Mlp {
    Mlp::new(&format!("{prefix}.rect"), &[cfg.dim, cfg.dim, 4])
}

pub fn head(cfg: &RefinerConfig) -> Linear {
    let _ = cfg;
    Linear::new("refiner.head")
}

/// Initializes refiner parameters: random attention/MLP weights, zeroed
/// rectifier output layers, and a head bias whose quaternion part is the
/// identity rotation.
pub fn init_refiner<R: Rng>(cfg: &RefinerConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let bank: Vec<f64> = (0..cfg.latents * cfg.dim).map(|_| normal.sample(rng)).collect();
    store.insert(LATENTS, Tensor::matrix(cfg.latents, cfg.dim, bank)?);
    for b in 0..cfg.blocks {
        let p = block_prefix(b);
        attn(&p, "latent_attn", cfg).init(store, rng);
        attn(&p, "primitive_attn", cfg).init(store, rng);
        let rect = rectifier(&p, cfg);
        rect.init(store, rng);
        rect.last().zero(store);
    }
    let h = head(cfg);
    h.init(store, rng, cfg.dim, cfg.head_width());
    let c = cfg.num_classes;
    let bias = store.get_mut(&format!("{}.b", h.name)).expect("just initialized");
    bias.data_mut()[c + 4] = 1.0;
    Ok(())
}

/// `Z = LN(B + Attn(B, F, F))`, `F' = LN(F + Attn(F, Z, Z))`.
pub fn global_interaction(g: &mut Graph, store: &ParamStore, cfg: &RefinerConfig, block: usize, features: Var) -> Result<Var> {
    let p = block_prefix(block);
    let bank = g.bind(store, LATENTS)?;
    let a1 = attn(&p, "latent_attn", cfg).forward(g, store, bank, features, features)?;
    let z = g.add(bank, a1)?;
    let z = g.layer_norm(z)?;
    let a2 = attn(&p, "primitive_attn", cfg).forward(g, store, features, z, z)?;
    let f = g.add(features, a2)?;
    g.layer_norm(f)
}

/// Adds `MLP_rect(features)` to the anchors: columns 0..3 space, 3 time.
pub fn rectify_anchors(g: &mut Graph, store: &ParamStore, cfg: &RefinerConfig, block: usize, a: AnchorVars) -> Result<AnchorVars> {
    let delta = rectifier(&block_prefix(block), cfg).forward(g, store, a.features)?;
    apply_delta(g, a, delta)
}

/// Adds a `[Q, 4]` offset to the anchors.
pub fn apply_delta(g: &mut Graph, a: AnchorVars, delta: Var) -> Result<AnchorVars> {
    let ds = g.slice_cols(delta, 0, 3)?;
    let dt = g.slice_cols(delta, 3, 4)?;
    Ok(AnchorVars { mu_s: g.add(a.mu_s, ds)?, mu_t: g.add(a.mu_t, dt)?, features: a.features })
}

/// Raw head outputs per primitive.
#[derive(Debug, Clone, Copy)]
pub struct DecodedHeads {
    pub logits: Var,
    pub opacity_logit: Var,
    pub log_scales: Var,
    /// Unnormalized; normalized wherever it is used.
    pub quat: Var,
    pub v_dyn: Var,
    pub log_sigma_t: Var,
}

pub fn decode_heads(g: &mut Graph, store: &ParamStore, cfg: &RefinerConfig, features: Var) -> Result<DecodedHeads> {
    let out = head(cfg).forward(g, store, features)?;
    let c = cfg.num_classes;
    Ok(DecodedHeads {
        logits: g.slice_cols(out, 0, c)?,
        opacity_logit: g.slice_cols(out, c, c + 1)?,
        log_scales: g.slice_cols(out, c + 1, c + 4)?,
        quat: g.slice_cols(out, c + 4, c + 8)?,
        v_dyn: g.slice_cols(out, c + 8, c + 10)?,
        log_sigma_t: g.slice_cols(out, c + 10, c + 11)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Refined {
    pub anchors: AnchorVars,
    pub heads: DecodedHeads,
}

/// One refinement block: sample, interact, rectify.
pub fn refine_block(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RefinerConfig,
    field: &Arc<FeatureField>,
    block: usize,
    a: AnchorVars,
) -> Result<AnchorVars> {
    let sampled = g.sample_field(field, a.mu_s, a.mu_t)?;
    let f = g.add(a.features, sampled)?;
    let f = global_interaction(g, store, cfg, block, f)?;
    rectify_anchors(g, store, cfg, block, AnchorVars { features: f, ..a })
}

/// `cfg.blocks` refinement blocks followed by the attribute heads.
pub fn refine(g: &mut Graph, store: &ParamStore, cfg: &RefinerConfig, field: &Arc<FeatureField>, anchors: AnchorVars) -> Result<Refined> {
    cfg.validate()?;
    if field.dim != cfg.dim {
        return Err(Error::validation(format!("field dim {} != refiner dim {}", field.dim, cfg.dim)));
    }
    let mut a = anchors;
    for b in 0..cfg.blocks {
        a = refine_block(g, store, cfg, field, b, a)?;
    }
    let heads = decode_heads(g, store, cfg, a.features)?;
    Ok(Refined { anchors: a, heads })
}

/// Materializes refined primitives; `alpha` comes from the dynamic-class mass.
pub fn to_gaussians(g: &Graph, r: &Refined, dynamic: &[usize]) -> Result<Vec<Gaussian4D>> {
    let h = &r.heads;
    let q = g.value(r.anchors.mu_t).len();
    (0..q)
        .map(|i| {
            let row = |v: Var| g.value(v).row_slice(i).to_vec();
            let (ms, lsc, qt, vd) = (row(r.anchors.mu_s), row(h.log_scales), row(h.quat), row(h.v_dyn));
            let logits = row(h.logits);
            let alpha = crate::dynamics::dynamic_probability(&logits, dynamic)?;
            let quat = crate::primitive::normalize_quat([qt[0], qt[1], qt[2], qt[3]])?;
            let gs = Gaussian4D {
                mu_s: [ms[0], ms[1], ms[2]],
                mu_t: g.value(r.anchors.mu_t).data()[i],
                log_scales: [lsc[0], lsc[1], lsc[2]],
                quat,
                log_sigma_t: g.value(h.log_sigma_t).data()[i],
                opacity_logit: g.value(h.opacity_logit).data()[i],
                logits,
                v_dyn: [vd[0], vd[1]],
                alpha,
            };
            gs.validate()?;
            Ok(gs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffops::gradcheck::{finite_diff_check, GradCheckConfig};

    fn small_cfg() -> RefinerConfig {
        RefinerConfig { dim: 8, latents: 3, heads: 2, blocks: 2, gaussians: 6, num_classes: 4, feature_std: 0.5 }
    }

    fn random_field(rng: &mut ChaCha8Rng, dim: usize) -> Arc<FeatureField> {
        let dims = [3, 3, 2, 3];
        let n = dims.iter().product::<usize>() * dim;
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Arc::new(FeatureField::new([-1.0, -1.0, -0.5, 0.0], [1.0, 1.0, 1.0, 1.5], dims, dim, data).unwrap())
    }

    #[test]
    fn field_interpolation_identities() {
        let c = FeatureField::constant(&[0.5, -2.0]);
        assert_eq!(c.sample([3.0, -7.0, 1.0], 9.0), vec![0.5, -2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, 3);
        // at a node
        let node = f.node([1, 2, 0, 1]).to_vec();
        let got = f.sample([0.0, 1.0, -0.5], 1.5);
        for d in 0..3 {
            assert!((got[d] - node[d]).abs() < 1e-12);
        }
        // midway along x between two nodes
        let a = f.node([0, 1, 1, 2]).to_vec();
        let b = f.node([1, 1, 1, 2]).to_vec();
        let got = f.sample([-0.5, 0.0, 0.5], 3.0);
        for d in 0..3 {
            assert!((got[d] - 0.5 * (a[d] + b[d])).abs() < 1e-12);
        }
        // clamped outside the domain
        assert_eq!(f.sample([-50.0, 1.0, -0.5], 1.5), f.sample([-1.0, 1.0, -0.5], 1.5));
    }

    #[test]
    fn constant_field_gives_equal_increments() {
        let cfg = small_cfg();
        let field = Arc::new(FeatureField::constant(&[0.25; 8]));
        let mut g = Graph::new();
        let ms = g.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, -5.0, 3.0, 0.1]).unwrap());
        let mt = g.constant(Tensor::matrix(2, 1, vec![0.5, 2.5]).unwrap());
        let s = g.sample_field(&field, ms, mt).unwrap();
        assert!(g.value(s).data().iter().all(|&x| x == 0.25));
        let _ = cfg;
    }

    #[test]
    fn sample_field_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = random_field(&mut rng, 4);
        let mut p = ParamStore::new();
        // keep points strictly inside cells so the interpolant is smooth there
        p.insert("ms", Tensor::matrix(2, 3, vec![-0.3, 0.4, -0.2, 0.6, -0.7, 0.2]).unwrap());
        p.insert("mt", Tensor::matrix(2, 1, vec![0.7, 2.2]).unwrap());
        let w = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let r = finite_diff_check(
            "sample_field",
            |g, p| {
                let ms = g.bind(p, "ms")?;
                let mt = g.bind(p, "mt")?;
                let s = g.sample_field(&field, ms, mt)?;
                let wc = g.constant(w.clone());
                let m = g.mul(s, wc)?;
                Ok(g.sum(m))
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    fn setup(seed: u64) -> (RefinerConfig, ParamStore, Arc<FeatureField>, AnchorSet) {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_refiner(&cfg, &mut store, &mut rng).unwrap();
        let field = random_field(&mut rng, cfg.dim);
        let spec = GridSpec::new([-1.0, -1.0, -0.5], [2, 2, 1], 1.0, 4).unwrap();
        let anchors = AnchorSet::random(&cfg, &spec, 3.0, &mut rng).unwrap();
        (cfg, store, field, anchors)
    }

    #[test]
    fn zero_rectifier_keeps_anchors_fixed() {
        let (cfg, store, field, anchors) = setup(3);
        let mut g = Graph::new();
        let a = AnchorVars::constant(&mut g, &anchors);
        let r = refine(&mut g, &store, &cfg, &field, a).unwrap();
        assert_eq!(g.value(r.anchors.mu_s), &anchors.mu_s);
        assert_eq!(g.value(r.anchors.mu_t), &anchors.mu_t);
        assert_eq!(to_gaussians(&g, &r, &[2, 3]).unwrap().len(), anchors.len());
    }

    #[test]
    fn rectify_adds_offsets() {
        let mut g = Graph::new();
        let a = AnchorVars {
            mu_s: g.constant(Tensor::zeros(&[1, 3])),
            mu_t: g.constant(Tensor::zeros(&[1, 1])),
            features: g.constant(Tensor::zeros(&[1, 2])),
        };
        let d = g.constant(Tensor::row(vec![1.0, 0.0, 0.0, 0.5]).reshape(&[1, 4]).unwrap());
        let b = apply_delta(&mut g, a, d).unwrap();
        assert_eq!(g.value(b.mu_s).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(g.value(b.mu_t).data(), &[0.5]);
    }

    #[test]
    fn two_frozen_linear_rectifiers_compose_additively() {
        // with a constant feature field and equal per-block offsets, two blocks
        // move anchors by exactly twice the single-block offset
        let cfg = RefinerConfig { blocks: 2, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_refiner(&cfg, &mut store, &mut rng).unwrap();
        for b in 0..2 {
            let rect = rectifier(&block_prefix(b), &cfg);
            rect.last().zero(&mut store);
            let bias = store.get_mut(&format!("{}.b", rect.last().name)).unwrap();
            bias.data_mut().copy_from_slice(&[0.3, -0.1, 0.2, 0.05]);
        }
        let field = Arc::new(FeatureField::constant(&[0.0; 8]));
        let spec = GridSpec::cube(2, 1.0, 4);
        let anchors = AnchorSet::random(&cfg, &spec, 3.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = AnchorVars::constant(&mut g, &anchors);
        let r = refine(&mut g, &store, &cfg, &field, a).unwrap();
        for i in 0..anchors.len() {
            for k in 0..3 {
                let want = anchors.mu_s.at(i, k) + 2.0 * [0.3, -0.1, 0.2][k];
                assert!((g.value(r.anchors.mu_s).at(i, k) - want).abs() < 1e-12);
            }
            assert!((g.value(r.anchors.mu_t).at(i, 0) - anchors.mu_t.at(i, 0) - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_feature_heads_closed_form() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        init_refiner(&cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[1, cfg.dim]));
        let h = decode_heads(&mut g, &store, &cfg, f).unwrap();
        assert_eq!(g.value(h.opacity_logit).item(), 0.0);
        assert_eq!(g.value(h.log_scales).data(), &[0.0; 3]);
        assert_eq!(g.value(h.quat).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_features_give_identical_outputs() {
        let (cfg, store, _, _) = setup(6);
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(2, cfg.dim, (0..2 * cfg.dim).map(|i| ((i % cfg.dim) as f64).sin()).collect()).unwrap());
        let out = global_interaction(&mut g, &store, &cfg, 0, f).unwrap();
        let v = g.value(out);
        assert_eq!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn single_latent_collapses_second_attention() {
        let cfg = RefinerConfig { latents: 1, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_refiner(&cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(3, cfg.dim, (0..3 * cfg.dim).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap());
        let p = block_prefix(0);
        let bank = g.bind(&store, LATENTS).unwrap();
        let a1 = attn(&p, "latent_attn", &cfg).forward(&mut g, &store, bank, f, f).unwrap();
        let z = g.add(bank, a1).unwrap();
        let z = g.layer_norm(z).unwrap();
        let a2 = attn(&p, "primitive_attn", &cfg).forward(&mut g, &store, f, z, z).unwrap();
        let v = g.value(a2);
        for r in 1..3 {
            for d in 0..cfg.dim {
                assert!((v.at(r, d) - v.at(0, d)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn refine_is_permutation_equivariant() {
        let (cfg, store, field, anchors) = setup(8);
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |a: &AnchorSet| {
            let mut g = Graph::new();
            let av = AnchorVars::constant(&mut g, a);
            let r = refine(&mut g, &store, &cfg, &field, av).unwrap();
            to_gaussians(&g, &r, &[2, 3]).unwrap()
        };
        let base = run(&anchors);
        let permuted = run(&anchors.permuted(&perm));
        let flat = |g: &Gaussian4D| {
            let mut v = g.mu_s.to_vec();
            v.extend([g.mu_t, g.log_sigma_t, g.opacity_logit, g.alpha]);
            v.extend(g.log_scales.iter().chain(&g.quat).chain(&g.logits).chain(&g.v_dyn));
            v
        };
        // attention sums run in a different order after permutation
        for (i, &j) in perm.iter().enumerate() {
            for (a, b) in flat(&permuted[i]).iter().zip(flat(&base[j])) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_gradients_through_slice_splat_loss() {
        use crate::optimize::{occupancy_term, LossWeights};
        use crate::splat::SplatOptions;
        let cfg = RefinerConfig { gaussians: 3, blocks: 1, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_refiner(&cfg, &mut store, &mut rng).unwrap();
        // non-trivial rectifier so anchor gradients matter
        for x in store.get_mut("refiner.block0.rect.l1.w").unwrap().data_mut() {
            *x = rng.random_range(-0.05..0.05);
        }
        for x in store.get_mut("refiner.head.w").unwrap().data_mut() {
            *x *= 0.3;
        }
        let field = random_field(&mut rng, cfg.dim);
        let spec = GridSpec::new([-0.8, -0.8, -0.4], [4, 4, 2], 0.4, 4).unwrap();
        let anchors = AnchorSet {
            mu_s: Tensor::matrix(3, 3, vec![-0.3, 0.1, 0.0, 0.2, -0.2, 0.1, 0.05, 0.3, -0.1]).unwrap(),
            mu_t: Tensor::matrix(3, 1, vec![0.4, 1.1, 0.8]).unwrap(),
            features: Tensor::matrix(3, cfg.dim, (0..3 * cfg.dim).map(|i| 0.2 * (i as f64).sin()).collect()).unwrap(),
        };
        let mut labels = LabelGrid::free(spec.clone());
        for v in [5usize, 6, 9, 10, 21] {
            labels.labels[v] = (v % 4) as u8;
        }
        let opts = SplatOptions { cutoff_sigma: 12.0, ..Default::default() };
        let names: Vec<String> = store.names();
        let keep: Vec<String> = names.into_iter().filter(|n| n.starts_with("refiner.head") || n.contains("rect")).collect();
        let sub = {
            let mut s = ParamStore::new();
            for n in &keep {
                s.insert(n.clone(), store.get(n).unwrap().clone());
            }
            s
        };
        let frozen = store.clone();
        let r = finite_diff_check(
            "refiner heads",
            |g, p| {
                let mut all = frozen.clone();
                for (k, v) in p.iter() {
                    all.insert(k.clone(), v.clone());
                }
                let a = AnchorVars::constant(g, &anchors);
                // re-bind the checked parameters by name so their adjoints are reported
                for k in p.names() {
                    g.bind(p, &k)?;
                }
                let r = refine(g, &all, &cfg, &field, a)?;
                let h = r.heads;
                let cov = g.covariance(h.log_scales, h.quat)?;
                let z = g.constant(Tensor::zeros(&[3, 2]));
                let vel = g.add(h.v_dyn, z)?;
                let vel = g.planar_to_3d(vel)?;
                let mean = g.slice_mean(r.anchors.mu_s, r.anchors.mu_t, vel, 0.9)?;
                let w = g.slice_weight(r.anchors.mu_t, h.log_sigma_t, h.opacity_logit, 0.9)?;
                let field = g.splat_field(mean, cov, w, h.logits, &spec, opts)?;
                occupancy_term(g, field, &labels, &LossWeights { lovasz: 0.0, ..Default::default() })
            },
            &sub,
            &GradCheckConfig { max_entries: Some(12), ..Default::default() },
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
