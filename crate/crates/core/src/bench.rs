//! Latency of querying a world at a target time: continuous slicing versus a
//! simulated autoregressive rollout that must produce every 0.5 s slice up
//! to the target.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, SemanticOccupancyGrid};
use crate::io::WorldFile;
use crate::optimize::query_world;
use crate::par::Execution;
use crate::primitive::{logit, Gaussian4D};
use crate::splat::DEFAULT_CUTOFF_SIGMA;

pub const REPORT_VERSION: &str = "bench v1";
/// Step of the simulated autoregressive baseline, seconds.
pub const AR_STEP: f64 = 0.5;
/// The continuous path passes when |slope| (per second of horizon) stays
/// below this fraction of the single-query cost.
pub const MAX_RELATIVE_SLOPE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub horizons: Vec<f64>,
    pub repeats: usize,
    pub exec: Execution,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { horizons: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0], repeats: 15, exec: Execution::Sequential }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonTiming {
    pub horizon: f64,
    pub ar_steps: usize,
    /// Median seconds per query.
    pub continuous: f64,
    pub autoregressive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFit {
    /// Seconds of latency per second of horizon.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub repeats: usize,
    pub gaussians: usize,
    pub rows: Vec<HorizonTiming>,
    pub continuous_fit: LineFit,
    pub ar_fit: LineFit,
    /// Mean continuous median across horizons.
    pub single_query: f64,
}

impl BenchReport {
    /// |continuous slope| as a fraction of the single-query cost.
    pub fn relative_slope(&self) -> f64 {
        self.continuous_fit.slope.abs() / self.single_query
    }

    pub fn continuous_flat(&self) -> bool {
        self.relative_slope() < MAX_RELATIVE_SLOPE
    }

    /// The baseline must grow: positive slope, well explained by a line.
    pub fn ar_linear(&self) -> bool {
        self.ar_fit.slope > 0.0 && self.ar_fit.r2 > 0.9
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_VERSION}");
        let _ = writeln!(s, "gaussians {}", self.gaussians);
        let _ = writeln!(s, "repeats {}", self.repeats);
        let _ = writeln!(s, "# horizon_s ar_steps continuous_median_s ar_median_s");
        for r in &self.rows {
            let _ = writeln!(s, "{} {} {:.6e} {:.6e}", r.horizon, r.ar_steps, r.continuous, r.autoregressive);
        }
        let _ = writeln!(s, "continuous_slope_s_per_s {:.6e}", self.continuous_fit.slope);
        let _ = writeln!(s, "continuous_single_query_s {:.6e}", self.single_query);
        let _ = writeln!(s, "continuous_relative_slope {:.6e}", self.relative_slope());
        let _ = writeln!(s, "continuous_flat {}", self.continuous_flat());
        let _ = writeln!(s, "ar_slope_s_per_s {:.6e}", self.ar_fit.slope);
        let _ = writeln!(s, "ar_r2 {:.6}", self.ar_fit.r2);
        let _ = writeln!(s, "ar_linear {}", self.ar_linear());
        s
    }
}

/// Least squares of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::validation("line fit needs at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::validation("line fit needs distinct abscissae"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LineFit { slope, intercept, r2 })
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Number of baseline steps needed to reach `horizon`.
pub fn ar_steps(horizon: f64) -> usize {
    ((horizon / AR_STEP) - 1e-9).ceil().max(1.0) as usize
}

/// The baseline: every intermediate slice is produced in order, the last at
/// exactly `horizon`.
pub fn autoregressive_query(world: &WorldFile, horizon: f64, exec: Execution) -> Result<SemanticOccupancyGrid> {
    let n = ar_steps(horizon);
    let mut last = None;
    for k in 1..=n {
        let t = if k == n { horizon } else { k as f64 * AR_STEP };
        last = Some(query_world(world, t, true, exec)?);
    }
    Ok(last.expect("at least one step"))
}

fn timed<F: FnMut() -> Result<SemanticOccupancyGrid>>(mut f: F) -> Result<f64> {
    let start = Instant::now();
    let grid = f()?;
    let dt = start.elapsed().as_secs_f64();
    std::hint::black_box(grid);
    Ok(dt)
}

/// Times both paths at every horizon. Horizons are interleaved inside each
/// repeat so drift in machine load spreads evenly.
pub fn run_bench(world: &WorldFile, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.horizons.len() < 2 || cfg.repeats == 0 {
        return Err(Error::validation("bench needs two or more horizons and at least one repeat"));
    }
    if let Some(h) = cfg.horizons.iter().find(|h| !h.is_finite() || **h <= 0.0) {
        return Err(Error::invalid(format!("bench horizon {h} must be positive")));
    }
    // warm caches and the allocator once
    query_world(world, cfg.horizons[0], true, cfg.exec)?;
    let k = cfg.horizons.len();
    let mut cont = vec![Vec::with_capacity(cfg.repeats); k];
    let mut ar = vec![Vec::with_capacity(cfg.repeats); k];
    for _ in 0..cfg.repeats {
        for (i, &h) in cfg.horizons.iter().enumerate() {
            cont[i].push(timed(|| query_world(world, h, true, cfg.exec))?);
            ar[i].push(timed(|| autoregressive_query(world, h, cfg.exec))?);
        }
    }
    let rows: Vec<HorizonTiming> = cfg
        .horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| HorizonTiming {
            horizon: h,
            ar_steps: ar_steps(h),
            continuous: median(&mut cont[i]),
            autoregressive: median(&mut ar[i]),
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.horizon).collect();
    let cy: Vec<f64> = rows.iter().map(|r| r.continuous).collect();
    let ay: Vec<f64> = rows.iter().map(|r| r.autoregressive).collect();
    Ok(BenchReport {
        repeats: cfg.repeats,
        gaussians: world.gaussians.len(),
        continuous_fit: fit_line(&xs, &cy)?,
        ar_fit: fit_line(&xs, &ay)?,
        single_query: cy.iter().sum::<f64>() / cy.len() as f64,
        rows,
    })
}

/// A world of slow-moving primitives kept away from the grid boundary, so the
/// splatting work is the same at every time in the horizon.
pub fn synthetic_world(seed: u64, count: usize, spec: GridSpec, horizon: f64) -> Result<WorldFile> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = spec.extent_max();
    let scale = 1.5 * spec.voxel_size;
    let speed = 0.2;
    let margin = DEFAULT_CUTOFF_SIGMA * scale + speed * horizon;
    let c = spec.num_classes;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let mut mu_s = [0.0; 3];
        for a in 0..3 {
            let (lo, hi) = (spec.origin[a] + margin, max[a] - margin);
            mu_s[a] = if lo < hi { rng.random_range(lo..hi) } else { 0.5 * (spec.origin[a] + max[a]) };
        }
        let mut g = Gaussian4D::isotropic(mu_s, rng.random_range(0.0..horizon), scale, 2.0 * horizon, 0.6, c);
        g.opacity_logit = logit(rng.random_range(0.3..0.9));
        g.logits = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.v_dyn = [rng.random_range(-speed..speed), rng.random_range(-speed..speed)];
        g.alpha = rng.random_range(0.0..1.0);
        gaussians.push(g);
    }
    Ok(WorldFile { horizon, v_scene: [0.0, 0.0], cutoff_sigma: DEFAULT_CUTOFF_SIGMA, spec, gaussians })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.5, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|a| 2.0 * a - 1.0).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn ar_step_counts() {
        assert_eq!(ar_steps(0.5), 1);
        assert_eq!(ar_steps(0.75), 2);
        assert_eq!(ar_steps(3.0), 6);
        assert_eq!(ar_steps(0.1), 1);
    }

    #[test]
    fn baseline_ends_at_the_continuous_answer() {
        let w = synthetic_world(1, 16, GridSpec::cube(8, 0.5, 3), 3.0).unwrap();
        for t in [0.5, 1.37, 3.0] {
            let a = autoregressive_query(&w, t, Execution::Sequential).unwrap();
            let c = query_world(&w, t, false, Execution::Sequential).unwrap();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn report_schema() {
        let w = synthetic_world(2, 8, GridSpec::cube(6, 0.5, 3), 3.0).unwrap();
        let cfg = BenchConfig { horizons: vec![0.5, 1.5], repeats: 2, ..Default::default() };
        let r = run_bench(&w, &cfg).unwrap();
        let text = r.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
        assert_eq!(
            keys,
            [
                "bench", "gaussians", "repeats", "#", "0.5", "1.5", "continuous_slope_s_per_s", "continuous_single_query_s",
                "continuous_relative_slope", "continuous_flat", "ar_slope_s_per_s", "ar_r2", "ar_linear"
            ]
        );
        assert_eq!(r.rows[1].ar_steps, 3);
        assert!(run_bench(&w, &BenchConfig { horizons: vec![1.0], ..cfg.clone() }).is_err());
        assert!(run_bench(&w, &BenchConfig { horizons: vec![1.0, -1.0], ..cfg }).is_err());
    }
}
