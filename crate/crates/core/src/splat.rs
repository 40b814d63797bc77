//! Gaussian-to-voxel splatting.
//!
//! Each sliced Gaussian contributes `a = weight * exp(-m / 2)` at a voxel
//! center, `m` being the squared Mahalanobis distance. Contributions are fused
//! by complement product for occupancy and by contribution-weighted mixing of
//! the per-Gaussian class softmax for semantics:
//!
//! ```text
//! occ(x)   = 1 - prod_q (1 - min(a_q, 1 - eps))
//! class(x) = sum_q a_q softmax(logits_q) / sum_q a_q
//! ```
//!
//! The local path rasterizes each Gaussian into the bounding box of its
//! cutoff ellipsoid; the grid is split into x-slabs that are processed
//! independently. [`splat_dense_oracle`] evaluates every pair with no cutoff.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LabelGrid, SemanticOccupancyGrid};
use crate::par::{self, Execution};
use crate::primitive::SlicedGaussian3D;

/// Upper clamp on a single contribution is `1 - CONTRIB_EPS`.
pub const CONTRIB_EPS: f64 = 1e-6;
/// Covariances with a larger condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;
pub const DEFAULT_CUTOFF_SIGMA: f64 = 3.0;
pub const DEFAULT_OCC_THRESHOLD: f64 = 0.5;

/// Flat, row-major view of sliced Gaussians.
#[derive(Debug, Clone, Copy)]
pub struct SplatInput<'a> {
    /// `Q x 3`
    pub means: &'a [f64],
    /// `Q x 9`, row-major 3x3
    pub covs: &'a [f64],
    /// `Q`
    pub weights: &'a [f64],
    /// `Q x C`
    pub logits: &'a [f64],
    pub num_classes: usize,
}

impl SplatInput<'_> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn check(&self, spec: &GridSpec) -> Result<()> {
        let q = self.len();
        if self.num_classes != spec.num_classes {
            return Err(Error::validation(format!(
                "Gaussian class count {} != grid class count {}",
                self.num_classes, spec.num_classes
            )));
        }
        if self.means.len() != 3 * q {
            return Err(Error::shape("splat.means", &[self.means.len()], &[3 * q]));
        }
        if self.covs.len() != 9 * q {
            return Err(Error::shape("splat.covs", &[self.covs.len()], &[9 * q]));
        }
        if self.logits.len() != q * self.num_classes {
            return Err(Error::shape("splat.logits", &[self.logits.len()], &[q * self.num_classes]));
        }
        Ok(())
    }
}

/// Owned flat buffers built from a slice of [`SlicedGaussian3D`].
#[derive(Debug, Clone, Default)]
pub struct FlatGaussians {
    pub means: Vec<f64>,
    pub covs: Vec<f64>,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
    pub num_classes: usize,
}

impl FlatGaussians {
    pub fn from_sliced(gaussians: &[SlicedGaussian3D], num_classes: usize) -> Result<Self> {
        let mut out = FlatGaussians { num_classes, ..Default::default() };
        for (i, g) in gaussians.iter().enumerate() {
            if g.logits.len() != num_classes {
                return Err(Error::validation(format!(
                    "Gaussian {i} has {} logits, expected {num_classes}",
                    g.logits.len()
                )));
            }
            out.means.extend(g.mean.iter());
            for r in 0..3 {
                for c in 0..3 {
                    out.covs.push(g.cov[(r, c)]);
                }
            }
            out.weights.push(g.weight);
            out.logits.extend(&g.logits);
        }
        Ok(out)
    }

    pub fn view(&self) -> SplatInput<'_> {
        SplatInput {
            means: &self.means,
            covs: &self.covs,
            weights: &self.weights,
            logits: &self.logits,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatOptions {
    /// Mahalanobis radius beyond which contributions are dropped.
    pub cutoff_sigma: f64,
    pub exec: Execution,
}

impl Default for SplatOptions {
    fn default() -> Self {
        SplatOptions { cutoff_sigma: DEFAULT_CUTOFF_SIGMA, exec: Execution::default() }
    }
}

/// Per-Gaussian quantities shared by every voxel it touches.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    mean: Vector3<f64>,
    precision: Matrix3<f64>,
    weight: f64,
    probs: Vec<f64>,
    /// Inclusive voxel ranges per axis; `None` if the box misses the grid.
    bbox: Option<[(usize, usize); 3]>,
}

fn cov_at(covs: &[f64], q: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&covs[9 * q..9 * q + 9])
}

/// Inverse of a covariance after checking conditioning.
pub fn checked_precision(cov: &Matrix3<f64>, index: usize) -> Result<Matrix3<f64>> {
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateCovariance { index, reason: "non-finite entries".into() });
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let lo = eig.min();
    let hi = eig.max();
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateCovariance {
            index,
            reason: format!("eigenvalues in [{lo:e}, {hi:e}]"),
        });
    }
    cov.try_inverse().ok_or_else(|| Error::DegenerateCovariance { index, reason: "not invertible".into() })
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.extend(logits.iter().map(|&l| (l - m).exp()));
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
}

pub(crate) fn prepare(input: &SplatInput<'_>, spec: &GridSpec, cutoff: f64) -> Result<Vec<Prepared>> {
    if !(cutoff > 0.0) {
        return Err(Error::invalid(format!("cutoff_sigma {cutoff} must be > 0")));
    }
    input.check(spec)?;
    let c = input.num_classes;
    (0..input.len())
        .map(|q| {
            let cov = cov_at(input.covs, q);
            let precision = checked_precision(&cov, q)?;
            let mean = Vector3::new(input.means[3 * q], input.means[3 * q + 1], input.means[3 * q + 2]);
            let mut probs = Vec::with_capacity(c);
            softmax_into(&input.logits[q * c..(q + 1) * c], &mut probs);
            let bbox = if cutoff.is_finite() {
                let mut b = [(0, 0); 3];
                let mut hit = true;
                for axis in 0..3 {
                    let half = cutoff * cov[(axis, axis)].sqrt();
                    match spec.center_range(axis, mean[axis] - half, mean[axis] + half) {
                        Some(r) => b[axis] = r,
                        None => hit = false,
                    }
                }
                hit.then_some(b)
            } else {
                Some([(0, spec.dims[0] - 1), (0, spec.dims[1] - 1), (0, spec.dims[2] - 1)])
            };
            Ok(Prepared { mean, precision, weight: input.weights[q], probs, bbox })
        })
        .collect()
}

/// Per-voxel accumulators of one x-slab.
struct SlabAccum {
    comp: Vec<f64>,
    total: Vec<f64>,
    sem: Vec<f64>,
    touched: Vec<bool>,
}

#[inline]
fn contribution(g: &Prepared, x: &Vector3<f64>) -> (f64, Vector3<f64>, f64) {
    let d = x - g.mean;
    let pd = g.precision * d;
    let m = d.dot(&pd);
    (g.weight * (-0.5 * m).exp(), pd, m)
}

/// Visits every (voxel, Gaussian) pair within the cutoff for voxels in the
/// x-slab `[x0, x1)`, in ascending Gaussian order.
fn for_each_pair_in_slab<F>(prepared: &[Prepared], spec: &GridSpec, cutoff2: f64, x0: usize, x1: usize, mut f: F)
where
    F: FnMut(usize, usize, &Vector3<f64>),
{
    for (q, g) in prepared.iter().enumerate() {
        let Some([(ax, bx), (ay, by), (az, bz)]) = g.bbox else { continue };
        let lo = ax.max(x0);
        let hi = bx.min(x1.saturating_sub(1));
        if lo > hi || x1 == 0 {
            continue;
        }
        for ix in lo..=hi {
            for iy in ay..=by {
                for iz in az..=bz {
                    let x = spec.center_of(ix, iy, iz);
                    let d = x - g.mean;
                    if cutoff2.is_finite() && d.dot(&(g.precision * d)) > cutoff2 {
                        continue;
                    }
                    let local = spec.index(ix - x0, iy, iz);
                    f(local, q, &x);
                }
            }
        }
    }
}

fn slab_bounds(spec: &GridSpec, slab: usize, slab_width: usize) -> (usize, usize) {
    let x0 = slab * slab_width;
    (x0, (x0 + slab_width).min(spec.dims[0]))
}

fn slab_width(spec: &GridSpec) -> usize {
    let per_x = spec.dims[1] * spec.dims[2];
    // keep slabs around a few thousand voxels
    (4096 / per_x.max(1)).clamp(1, spec.dims[0])
}

/// Forward splat with cached per-voxel aggregates for the adjoint.
#[derive(Debug, Clone)]
pub struct SplatForward {
    pub grid: SemanticOccupancyGrid,
    /// `1 - occ` computed directly from the complement product.
    pub complement: Vec<f64>,
    /// Sum of unclamped contributions per voxel.
    pub total: Vec<f64>,
}

pub fn splat_forward(input: &SplatInput<'_>, spec: &GridSpec, opts: SplatOptions) -> Result<SplatForward> {
    spec.validate()?;
    let prepared = prepare(input, spec, opts.cutoff_sigma)?;
    let cutoff2 = opts.cutoff_sigma * opts.cutoff_sigma;
    let c = spec.num_classes;
    let width = slab_width(spec);
    let n_slabs = spec.dims[0].div_ceil(width);

    let slabs = par::map_range(opts.exec, n_slabs, |s| {
        let (x0, x1) = slab_bounds(spec, s, width);
        let nv = (x1 - x0) * spec.dims[1] * spec.dims[2];
        let mut acc = SlabAccum {
            comp: vec![1.0; nv],
            total: vec![0.0; nv],
            sem: vec![0.0; nv * c],
            touched: vec![false; nv],
        };
        for_each_pair_in_slab(&prepared, spec, cutoff2, x0, x1, |v, q, x| {
            let g = &prepared[q];
            let (a, _, _) = contribution(g, x);
            acc.comp[v] *= 1.0 - a.min(1.0 - CONTRIB_EPS);
            acc.total[v] += a;
            for (k, p) in g.probs.iter().enumerate() {
                acc.sem[v * c + k] += a * p;
            }
            acc.touched[v] = true;
        });
        acc
    });

    let nv = spec.num_voxels();
    let mut grid = SemanticOccupancyGrid::empty(spec.clone());
    let mut complement = Vec::with_capacity(nv);
    let mut total = Vec::with_capacity(nv);
    let mut v = 0;
    for acc in slabs {
        for i in 0..acc.comp.len() {
            complement.push(acc.comp[i]);
            total.push(acc.total[i]);
            grid.occ_prob[v] = if acc.touched[i] { 1.0 - acc.comp[i] } else { 0.0 };
            if acc.total[i] > 0.0 {
                for k in 0..c {
                    grid.class_prob[v * c + k] = acc.sem[i * c + k] / acc.total[i];
                }
            }
            v += 1;
        }
    }
    Ok(SplatForward { grid, complement, total })
}

/// Local-aggregation splat of sliced Gaussians.
pub fn splat(gaussians: &[SlicedGaussian3D], spec: &GridSpec, cutoff_sigma: f64) -> Result<SemanticOccupancyGrid> {
    let flat = FlatGaussians::from_sliced(gaussians, spec.num_classes)?;
    let opts = SplatOptions { cutoff_sigma, ..Default::default() };
    Ok(splat_forward(&flat.view(), spec, opts)?.grid)
}

pub fn splat_with(gaussians: &[SlicedGaussian3D], spec: &GridSpec, opts: SplatOptions) -> Result<SemanticOccupancyGrid> {
    let flat = FlatGaussians::from_sliced(gaussians, spec.num_classes)?;
    Ok(splat_forward(&flat.view(), spec, opts)?.grid)
}

/// Adjoints of a splat with respect to its flat inputs.
#[derive(Debug, Clone)]
pub struct SplatGrads {
    pub means: Vec<f64>,
    pub covs: Vec<f64>,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

impl SplatGrads {
    fn zeros(q: usize, c: usize) -> Self {
        SplatGrads {
            means: vec![0.0; 3 * q],
            covs: vec![0.0; 9 * q],
            weights: vec![0.0; q],
            logits: vec![0.0; q * c],
        }
    }

    fn add(&mut self, other: &SplatGrads) {
        for (a, b) in [
            (&mut self.means, &other.means),
            (&mut self.covs, &other.covs),
            (&mut self.weights, &other.weights),
            (&mut self.logits, &other.logits),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Back-propagates `upstream`, the adjoint of the `V x (C + 1)` category
/// field (`occ * class_c` for semantic classes, `1 - occ` for free).
pub fn splat_backward(
    input: &SplatInput<'_>,
    spec: &GridSpec,
    opts: SplatOptions,
    fwd: &SplatForward,
    upstream: &[f64],
) -> Result<SplatGrads> {
    let prepared = prepare(input, spec, opts.cutoff_sigma)?;
    let c = spec.num_classes;
    let q_count = input.len();
    let nv = spec.num_voxels();
    if upstream.len() != nv * (c + 1) {
        return Err(Error::shape("splat_backward.upstream", &[upstream.len()], &[nv, c + 1]));
    }
    let cutoff2 = opts.cutoff_sigma * opts.cutoff_sigma;
    let width = slab_width(spec);
    let n_slabs = spec.dims[0].div_ceil(width);
    let per_x = spec.dims[1] * spec.dims[2];

    let partials = par::map_range(opts.exec, n_slabs, |s| {
        let (x0, x1) = slab_bounds(spec, s, width);
        let base = x0 * per_x;
        let n_local = (x1 - x0) * per_x;
        // per-voxel adjoints of occupancy, semantic sums and total
        let mut g_comp_term = vec![0.0; n_local];
        let mut g_sem = vec![0.0; n_local * c];
        let mut g_total = vec![0.0; n_local];
        for i in 0..n_local {
            let v = base + i;
            let row = &upstream[v * (c + 1)..(v + 1) * (c + 1)];
            let occ = fwd.grid.occ_prob[v];
            let cp = fwd.grid.class_row(v);
            let g_occ: f64 = row[..c].iter().zip(cp).map(|(g, p)| g * p).sum::<f64>() - row[c];
            g_comp_term[i] = g_occ * fwd.complement[v];
            let total = fwd.total[v];
            if total > 0.0 {
                let mut dot = 0.0;
                for k in 0..c {
                    let g_cp = row[k] * occ;
                    g_sem[i * c + k] = g_cp / total;
                    dot += g_cp * cp[k];
                }
                g_total[i] = -dot / total;
            }
        }
        let mut grads = SplatGrads::zeros(q_count, c);
        let mut g_probs = vec![0.0; q_count * c];
        for_each_pair_in_slab(&prepared, spec, cutoff2, x0, x1, |i, q, x| {
            let g = &prepared[q];
            let (a, pd, m) = contribution(g, x);
            let mut g_a = g_total[i];
            for k in 0..c {
                g_a += g_sem[i * c + k] * g.probs[k];
                g_probs[q * c + k] += a * g_sem[i * c + k];
            }
            if a < 1.0 - CONTRIB_EPS {
                g_a += g_comp_term[i] / (1.0 - a);
            }
            grads.weights[q] += g_a * (-0.5 * m).exp();
            let s = g_a * a;
            for r in 0..3 {
                grads.means[3 * q + r] += s * pd[r];
                for cc in 0..3 {
                    grads.covs[9 * q + 3 * r + cc] += 0.5 * s * pd[r] * pd[cc];
                }
            }
        });
        (grads, g_probs)
    });

    let mut out = SplatGrads::zeros(q_count, c);
    let mut g_probs = vec![0.0; q_count * c];
    for (g, gp) in &partials {
        out.add(g);
        g_probs.iter_mut().zip(gp).for_each(|(a, b)| *a += b);
    }
    for (q, g) in prepared.iter().enumerate() {
        let gp = &g_probs[q * c..(q + 1) * c];
        let dot: f64 = gp.iter().zip(&g.probs).map(|(a, b)| a * b).sum();
        for k in 0..c {
            out.logits[q * c + k] = g.probs[k] * (gp[k] - dot);
        }
    }
    Ok(out)
}

/// Every Gaussian visits every voxel; no cutoff, no bounding boxes.
pub fn splat_dense_oracle(gaussians: &[SlicedGaussian3D], spec: &GridSpec) -> Result<SemanticOccupancyGrid> {
    spec.validate()?;
    let c = spec.num_classes;
    let mut inv = Vec::with_capacity(gaussians.len());
    let mut probs = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        if g.logits.len() != c {
            return Err(Error::validation(format!("Gaussian {i} has {} logits, expected {c}", g.logits.len())));
        }
        inv.push(checked_precision(&g.cov, i)?);
        let mx = g.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = g.logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        probs.push(e.into_iter().map(|x| x / s).collect::<Vec<_>>());
    }
    let mut grid = SemanticOccupancyGrid::empty(spec.clone());
    for v in 0..spec.num_voxels() {
        let x = spec.center(v);
        let mut keep_free = 1.0;
        let mut total = 0.0;
        let mut sem = vec![0.0; c];
        for (q, g) in gaussians.iter().enumerate() {
            let d = x - g.mean;
            let a = g.weight * (-0.5 * (d.transpose() * inv[q] * d)[(0, 0)]).exp();
            keep_free *= 1.0 - a.min(1.0 - CONTRIB_EPS);
            total += a;
            for k in 0..c {
                sem[k] += a * probs[q][k];
            }
        }
        grid.occ_prob[v] = if gaussians.is_empty() { 0.0 } else { 1.0 - keep_free };
        if total > 0.0 {
            for k in 0..c {
                grid.class_prob[v * c + k] = sem[k] / total;
            }
        }
    }
    Ok(grid)
}

/// Hard labels: argmax class (lowest index on ties) where occupancy reaches
/// the threshold, free elsewhere.
pub fn to_labels(grid: &SemanticOccupancyGrid, occ_threshold: f64) -> LabelGrid {
    let spec = grid.spec.clone();
    let free = spec.free_label();
    let labels = (0..spec.num_voxels())
        .map(|v| {
            if grid.occ_prob[v] < occ_threshold {
                return free;
            }
            let row = grid.class_row(v);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelGrid { spec, labels }
}
