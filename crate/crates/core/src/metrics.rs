//! Occupancy and planning metrics.

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

/// Waypoint spacing used by the planning metrics, seconds.
pub const WAYPOINT_STEP: f64 = 0.5;
/// Reported planning horizons, seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];
/// Class index treated as drivable by the collision check.
pub const GROUND_CLASS: u8 = 0;

fn same_spec(pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
    pred.spec.same_as(&gt.spec)?;
    if pred.labels.len() != gt.labels.len() {
        return Err(Error::validation("label grids differ in length"));
    }
    Ok(())
}

/// Occupied-vs-free IoU; 1.0 when neither grid has occupied voxels.
pub fn binary_iou(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    same_spec(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for v in 0..pred.labels.len() {
        let (a, b) = (pred.is_occupied(v), gt.is_occupied(v));
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanIou {
    /// Per semantic class; `None` when absent from both grids.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; `None` when no class is present.
    pub mean: Option<f64>,
}

/// Per-class IoU over semantic classes (free excluded).
pub fn mean_iou(pred: &LabelGrid, gt: &LabelGrid) -> Result<MeanIou> {
    same_spec(pred, gt)?;
    let c = pred.spec.num_classes;
    let mut inter = vec![0u64; c];
    let mut union = vec![0u64; c];
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (a, b) = (a as usize, b as usize);
        if a == b {
            if a < c {
                inter[a] += 1;
                union[a] += 1;
            }
        } else {
            if a < c {
                union[a] += 1;
            }
            if b < c {
                union[b] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> =
        (0..c).map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(MeanIou { per_class, mean })
}

/// Values at the 1 s / 2 s / 3 s horizons and their average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonReport {
    pub per_horizon: [f64; 3],
    pub average: f64,
}

fn horizon_index(h: f64) -> usize {
    (h / WAYPOINT_STEP).round() as usize - 1
}

/// Euclidean error at each horizon's waypoint.
pub fn l2_at_horizons(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<HorizonReport> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!("trajectory lengths differ: {} vs {}", pred.len(), gt.len())));
    }
    let mut per = [0.0; 3];
    for (k, h) in HORIZONS.iter().enumerate() {
        let i = horizon_index(*h);
        if i >= pred.len() {
            return Err(Error::validation(format!("trajectory of {} waypoints does not reach {h} s", pred.len())));
        }
        per[k] = ((pred[i][0] - gt[i][0]).powi(2) + (pred[i][1] - gt[i][1]).powi(2)).sqrt();
    }
    Ok(HorizonReport { per_horizon: per, average: per.iter().sum::<f64>() / 3.0 })
}

/// Ego footprint rectangle, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Default for Footprint {
    fn default() -> Self {
        Footprint { length: 4.0, width: 1.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionReport {
    pub per_waypoint: Vec<bool>,
    /// Percent at the 1 s / 2 s / 3 s waypoints.
    pub per_horizon: [f64; 3],
    /// Percent of colliding waypoints.
    pub average: f64,
}

/// Heading of each plan step; a stationary step keeps the previous heading,
/// starting from `initial` (radians).
pub fn plan_headings(start: [f64; 2], positions: &[[f64; 2]], initial: f64) -> Vec<f64> {
    let mut prev = start;
    let mut heading = initial;
    positions
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
            if dx.hypot(dy) > 1e-9 {
                heading = dy.atan2(dx);
            }
            prev = *p;
            heading
        })
        .collect()
}

/// Whether the footprint at `pos` with `heading` covers any non-ground labeled voxel.
pub fn footprint_collides(grid: &LabelGrid, pos: [f64; 2], heading: f64, fp: Footprint) -> bool {
    let spec = &grid.spec;
    let (c, s) = (heading.cos(), heading.sin());
    let reach = 0.5 * fp.length.hypot(fp.width);
    let (Some((x0, x1)), Some((y0, y1))) =
        (spec.center_range(0, pos[0] - reach, pos[0] + reach), spec.center_range(1, pos[1] - reach, pos[1] + reach))
    else {
        return false;
    };
    for ix in x0..=x1 {
        for iy in y0..=y1 {
            let p = spec.center_of(ix, iy, 0);
            let (dx, dy) = (p.x - pos[0], p.y - pos[1]);
            let along = c * dx + s * dy;
            let across = -s * dx + c * dy;
            if along.abs() > fp.length / 2.0 || across.abs() > fp.width / 2.0 {
                continue;
            }
            for iz in 0..spec.dims[2] {
                let l = grid.get(ix, iy, iz);
                if l != spec.free_label() && l != GROUND_CLASS {
                    return true;
                }
            }
        }
    }
    false
}

/// Collision rate of planned positions against one ground-truth grid per
/// waypoint; positions and grids share a frame.
pub fn collision_rate(start: [f64; 2], positions: &[[f64; 2]], grids: &[&LabelGrid], fp: Footprint) -> Result<CollisionReport> {
    if grids.len() < positions.len() {
        return Err(Error::validation(format!(
            "{} waypoints but only {} ground-truth grids",
            positions.len(),
            grids.len()
        )));
    }
    let headings = plan_headings(start, positions, 0.0);
    let per_waypoint: Vec<bool> =
        positions.iter().zip(&headings).zip(grids).map(|((p, h), g)| footprint_collides(g, *p, *h, fp)).collect();
    let mut per_horizon = [0.0; 3];
    for (k, h) in HORIZONS.iter().enumerate() {
        let i = horizon_index(*h);
        if i >= per_waypoint.len() {
            return Err(Error::validation(format!("plan does not reach {h} s")));
        }
        per_horizon[k] = if per_waypoint[i] { 100.0 } else { 0.0 };
    }
    let hits = per_waypoint.iter().filter(|&&b| b).count();
    let average = 100.0 * hits as f64 / per_waypoint.len().max(1) as f64;
    Ok(CollisionReport { per_waypoint, per_horizon, average })
}

/// One row of the delimited metrics format `scenario,timestamp,metric,value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scenario: String,
    pub timestamp: f64,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "scenario,timestamp,metric,value";

pub fn write_metrics(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.scenario, r.timestamp, r.metric, r.value));
    }
    s
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == METRICS_HEADER || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::format(format!("metrics line {}: expected 4 fields, got {}", n + 1, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(format!("metrics line {}: bad number `{s}`", n + 1)));
        rows.push(MetricRow { scenario: f[0].to_string(), timestamp: num(f[1])?, metric: f[2].to_string(), value: num(f[3])? });
    }
    Ok(rows)
}
