//! Synthetic dynamic scenes: semantic boxes with planar velocities and an ego
//! motion profile, rasterized into ego-frame label grids.
//!
//! Scene text format, one record per line (`#` starts a comment):
//!
//! ```text
//! scene v1
//! horizon <T>
//! classes <C>
//! ego_pose <x> <y> <yaw>
//! ego_yaw <fixed|follow>
//! ego_segment <t_start> <vx> <vy>          (one or more, ascending t_start, first at 0)
//! box <cx> <cy> <cz> <sx> <sy> <sz> <yaw> <class> <vx> <vy>
//! ```

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LabelGrid};
use crate::metrics::WAYPOINT_STEP;

/// Default semantic classes of the desk-scale scenes.
pub const CLASS_NAMES: [&str; 4] = ["ground", "building", "car", "pedestrian"];
pub const GROUND: usize = 0;
pub const BUILDING: usize = 1;
pub const CAR: usize = 2;
pub const PEDESTRIAN: usize = 3;
pub const DYNAMIC_CLASSES: [usize; 2] = [CAR, PEDESTRIAN];
/// Planning horizon of generated scenarios, seconds.
pub const DEFAULT_HORIZON: f64 = 3.0;
/// Slack on the horizon bounds for accumulated floating-point error.
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    /// World-frame center at t = 0.
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: usize,
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub position: [f64; 2],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoProfile {
    pub start: EgoPose,
    /// `(t_start, velocity)`, ascending; the first starts at 0.
    pub segments: Vec<(f64, [f64; 2])>,
    /// Heading follows the velocity direction instead of staying at the start yaw.
    pub yaw_follows_velocity: bool,
}

impl EgoProfile {
    pub fn constant(velocity: [f64; 2]) -> Self {
        EgoProfile {
            start: EgoPose { position: [0.0, 0.0], yaw: 0.0 },
            segments: vec![(0.0, velocity)],
            yaw_follows_velocity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub boxes: Vec<BoxSpec>,
    pub ego: EgoProfile,
    pub horizon: f64,
    pub num_classes: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::validation(format!("horizon {} must be positive", self.horizon)));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::validation(format!("class count {} out of range", self.num_classes)));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::validation(format!("box {i} has non-positive size {:?}", b.size)));
            }
            if b.class >= self.num_classes {
                return Err(Error::validation(format!("box {i} class {} >= {}", b.class, self.num_classes)));
            }
        }
        let segs = &self.ego.segments;
        if segs.is_empty() || segs[0].0 != 0.0 {
            return Err(Error::validation("ego profile must start with a segment at t = 0"));
        }
        if segs.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::validation("ego segments must have ascending start times"));
        }
        Ok(())
    }
}

fn check_time(spec: &SceneSpec, t: f64) -> Result<()> {
    if !(t >= -TIME_TOL && t <= spec.horizon + TIME_TOL) {
        return Err(Error::Range { what: "scene time".into(), value: t, lo: 0.0, hi: spec.horizon });
    }
    Ok(())
}

/// Ego position and heading at `t`, integrating the piecewise-constant velocity.
pub fn ego_pose_at(spec: &SceneSpec, t: f64) -> Result<EgoPose> {
    check_time(spec, t)?;
    let ego = &spec.ego;
    let mut pos = ego.start.position;
    let mut yaw = ego.start.yaw;
    for (k, &(t0, v)) in ego.segments.iter().enumerate() {
        if t0 >= t {
            break;
        }
        let t1 = ego.segments.get(k + 1).map_or(f64::INFINITY, |s| s.0).min(t);
        pos[0] += v[0] * (t1 - t0);
        pos[1] += v[1] * (t1 - t0);
        if ego.yaw_follows_velocity && v[0].hypot(v[1]) > 0.0 {
            yaw = v[1].atan2(v[0]);
        }
    }
    Ok(EgoPose { position: pos, yaw })
}

/// Maps a world-frame planar point into the frame of `pose`.
pub fn world_to_frame(pose: EgoPose, p: [f64; 2]) -> [f64; 2] {
    let (c, s) = (pose.yaw.cos(), pose.yaw.sin());
    let (dx, dy) = (p[0] - pose.position[0], p[1] - pose.position[1]);
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Point-in-oriented-box test in the box's own frame.
fn inside(local: [f64; 3], half: [f64; 3]) -> bool {
    local[0].abs() <= half[0] && local[1].abs() <= half[1] && local[2].abs() <= half[2]
}

/// Rasterizes the scene at time `t` into `grid` expressed in the frame `pose`.
pub fn rasterize_in_frame(spec: &SceneSpec, t: f64, grid: &GridSpec, pose: EgoPose) -> Result<LabelGrid> {
    check_time(spec, t)?;
    if grid.num_classes != spec.num_classes {
        return Err(Error::validation(format!(
            "grid has {} classes, scene has {}",
            grid.num_classes, spec.num_classes
        )));
    }
    let mut out = LabelGrid::free(grid.clone());
    for b in &spec.boxes {
        let world = [b.center[0] + b.velocity[0] * t, b.center[1] + b.velocity[1] * t];
        let c = world_to_frame(pose, world);
        let yaw = b.yaw - pose.yaw;
        let (cs, sn) = (yaw.cos(), yaw.sin());
        let half = b.size.map(|s| s / 2.0);
        let ex = half[0] * cs.abs() + half[1] * sn.abs();
        let ey = half[0] * sn.abs() + half[1] * cs.abs();
        let ranges = (
            grid.center_range(0, c[0] - ex, c[0] + ex),
            grid.center_range(1, c[1] - ey, c[1] + ey),
            grid.center_range(2, b.center[2] - half[2], b.center[2] + half[2]),
        );
        let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = ranges else { continue };
        for ix in x0..=x1 {
            for iy in y0..=y1 {
                for iz in z0..=z1 {
                    let p = grid.center_of(ix, iy, iz);
                    let (dx, dy) = (p.x - c[0], p.y - c[1]);
                    let local = [cs * dx + sn * dy, -sn * dx + cs * dy, p.z - b.center[2]];
                    if inside(local, half) {
                        out.labels[grid.index(ix, iy, iz)] = b.class as u8;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ground-truth labels at `t` in the ego frame at `t`.
pub fn rasterize_gt(spec: &SceneSpec, t: f64, grid: &GridSpec) -> Result<LabelGrid> {
    rasterize_in_frame(spec, t, grid, ego_pose_at(spec, t)?)
}

/// Supervised timestamps `step, 2 step, ..., horizon`.
pub fn supervised_times(horizon: f64) -> Vec<f64> {
    let n = (horizon / WAYPOINT_STEP).round() as usize;
    (1..=n).map(|k| k as f64 * WAYPOINT_STEP).collect()
}

/// Ego displacement increments at `WAYPOINT_STEP` spacing, expressed in the
/// initial ego frame.
pub fn gt_waypoints(spec: &SceneSpec) -> Result<Vec<[f64; 2]>> {
    let start = ego_pose_at(spec, 0.0)?;
    let mut prev = [0.0, 0.0];
    supervised_times(spec.horizon)
        .into_iter()
        .map(|t| {
            let p = world_to_frame(start, ego_pose_at(spec, t)?.position);
            let d = [p[0] - prev[0], p[1] - prev[1]];
            prev = p;
            Ok(d)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Static,
    Mixed,
    Dense,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Difficulty::Static),
            "mixed" => Ok(Difficulty::Mixed),
            "dense" => Ok(Difficulty::Dense),
            other => Err(Error::validation(format!("unknown difficulty `{other}` (expected static, mixed or dense)"))),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Static => "static",
            Difficulty::Mixed => "mixed",
            Difficulty::Dense => "dense",
        })
    }
}

/// A generated scene with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: SceneSpec,
    pub grid: GridSpec,
    pub times: Vec<f64>,
    pub gt: Vec<LabelGrid>,
    pub waypoints: Vec<[f64; 2]>,
}

impl Scenario {
    pub fn from_spec(spec: SceneSpec, grid: GridSpec) -> Result<Self> {
        spec.validate()?;
        let times = supervised_times(spec.horizon);
        let gt = times.iter().map(|&t| rasterize_gt(&spec, t, &grid)).collect::<Result<Vec<_>>>()?;
        let waypoints = gt_waypoints(&spec)?;
        Ok(Scenario { spec, grid, times, gt, waypoints })
    }
}

/// Deterministic random street scene on the desk grid.
pub fn generate_scenario(seed: u64, difficulty: Difficulty) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (buildings, cars, peds) = match difficulty {
        Difficulty::Static => (4, 2, 0),
        Difficulty::Mixed => (4, 3, 2),
        Difficulty::Dense => (8, 6, 4),
    };
    let moving = difficulty != Difficulty::Static;
    let mut boxes = vec![BoxSpec {
        center: [0.0, 0.0, -0.8],
        size: [200.0, 200.0, 0.4],
        yaw: 0.0,
        class: GROUND,
        velocity: [0.0, 0.0],
    }];
    for k in 0..buildings {
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        let size = [rng.random_range(2.0..5.0), rng.random_range(1.5..3.0), rng.random_range(1.6..2.8)];
        boxes.push(BoxSpec {
            center: [rng.random_range(-8.0..20.0), side * rng.random_range(6.0..8.5), -0.6 + size[2] / 2.0],
            size,
            yaw: 0.0,
            class: BUILDING,
            velocity: [0.0, 0.0],
        });
    }
    for k in 0..cars {
        let lane = [-3.0, 3.0][k % 2];
        let speed = if moving { rng.random_range(2.0..8.0) } else { 0.0 };
        boxes.push(BoxSpec {
            center: [rng.random_range(-8.0..12.0), lane + rng.random_range(-0.3..0.3), 0.2],
            size: [4.0, 1.8, 1.6],
            yaw: 0.0,
            class: CAR,
            velocity: [speed, 0.0],
        });
    }
    for _ in 0..peds {
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.5..1.5);
        boxes.push(BoxSpec {
            center: [rng.random_range(-6.0..10.0), rng.random_range(-5.0..5.0), 0.2],
            size: [0.6, 0.6, 1.6],
            yaw: heading,
            class: PEDESTRIAN,
            velocity: [speed * heading.cos(), speed * heading.sin()],
        });
    }
    let v0 = rng.random_range(3.0..6.0);
    let mut ego = EgoProfile::constant([v0, 0.0]);
    if difficulty == Difficulty::Dense {
        ego.segments.push((1.5, [rng.random_range(1.0..3.0), 0.0]));
    }
    let spec = SceneSpec { boxes, ego, horizon: DEFAULT_HORIZON, num_classes: CLASS_NAMES.len() };
    Scenario::from_spec(spec, GridSpec::desk(CLASS_NAMES.len()))
}

/// Fixed scenes used by the fitting experiments.
pub mod fixtures {
    use super::*;

    /// One 1.2 m building cube at rest in an 8^3 grid; the ego stands still.
    pub fn static_box() -> (SceneSpec, GridSpec) {
        let grid = GridSpec::new([-1.6, -1.6, -1.6], [8, 8, 8], 0.4, CLASS_NAMES.len()).expect("valid grid");
        let spec = SceneSpec {
            boxes: vec![BoxSpec {
                center: [0.2, -0.2, 0.0],
                size: [1.2, 1.2, 1.2],
                yaw: 0.0,
                class: BUILDING,
                velocity: [0.0, 0.0],
            }],
            ego: EgoProfile::constant([0.0, 0.0]),
            horizon: DEFAULT_HORIZON,
            num_classes: CLASS_NAMES.len(),
        };
        (spec, grid)
    }

    /// A car crossing a 16 x 8 x 4 grid at `velocity` while the ego stands still.
    pub fn moving_car(velocity: [f64; 2]) -> (SceneSpec, GridSpec) {
        let grid = GridSpec::new([-3.2, -1.6, -0.8], [16, 8, 4], 0.4, CLASS_NAMES.len()).expect("valid grid");
        let spec = SceneSpec {
            boxes: vec![BoxSpec {
                center: [-velocity[0] * 1.5, -velocity[1] * 1.5, 0.0],
                size: [1.6, 1.2, 0.8],
                yaw: 0.0,
                class: CAR,
                velocity,
            }],
            ego: EgoProfile::constant([0.0, 0.0]),
            horizon: DEFAULT_HORIZON,
            num_classes: CLASS_NAMES.len(),
        };
        (spec, grid)
    }

    /// Two rows of static, irregularly spaced buildings passed by an ego
    /// driving along +x.
    pub fn straight_drive(speed: f64) -> (SceneSpec, GridSpec) {
        let grid = GridSpec::new([-8.0, -3.2, -0.8], [40, 16, 4], 0.4, CLASS_NAMES.len()).expect("valid grid");
        let placements: [(f64, f64, f64); 14] = [
            (-7.0, 2.0, 1.2),
            (-4.2, 2.0, 2.4),
            (0.2, 2.0, 1.6),
            (3.4, 2.0, 0.8),
            (7.6, 2.0, 2.8),
            (12.0, 2.0, 1.2),
            (16.4, 2.0, 2.0),
            (-5.6, -2.0, 2.8),
            (-1.4, -2.0, 0.8),
            (1.8, -2.0, 2.0),
            (6.2, -2.0, 1.2),
            (9.2, -2.0, 2.4),
            (14.6, -2.0, 0.8),
            (19.8, -2.0, 2.0),
        ];
        let boxes = placements
            .iter()
            .map(|&(x, y, len)| BoxSpec {
                center: [x, y, 0.0],
                size: [len, 1.2, 1.2],
                yaw: 0.0,
                class: BUILDING,
                velocity: [0.0, 0.0],
            })
            .collect();
        let spec = SceneSpec {
            boxes,
            ego: EgoProfile::constant([speed, 0.0]),
            horizon: DEFAULT_HORIZON,
            num_classes: CLASS_NAMES.len(),
        };
        (spec, grid)
    }
}

// ---------------------------------------------------------------- text format

pub fn scene_to_text(spec: &SceneSpec) -> String {
    let mut s = String::from("scene v1\n");
    let _ = writeln!(s, "horizon {}", spec.horizon);
    let _ = writeln!(s, "classes {}", spec.num_classes);
    let e = &spec.ego;
    let _ = writeln!(s, "ego_pose {} {} {}", e.start.position[0], e.start.position[1], e.start.yaw);
    let _ = writeln!(s, "ego_yaw {}", if e.yaw_follows_velocity { "follow" } else { "fixed" });
    for (t, v) in &e.segments {
        let _ = writeln!(s, "ego_segment {t} {} {}", v[0], v[1]);
    }
    for b in &spec.boxes {
        let _ = writeln!(
            s,
            "box {} {} {} {} {} {} {} {} {} {}",
            b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw, b.class, b.velocity[0], b.velocity[1]
        );
    }
    s
}

pub fn parse_scene(text: &str) -> Result<SceneSpec> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "scene v1")) => {}
        _ => return Err(Error::format("scene text must start with `scene v1`")),
    }
    let mut horizon = None;
    let mut classes = None;
    let mut ego = EgoProfile::constant([0.0, 0.0]);
    ego.segments.clear();
    let mut boxes = Vec::new();
    for (n, line) in lines {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let rest: Vec<&str> = it.collect();
        let nums = |k: usize| -> Result<Vec<f64>> {
            if rest.len() != k {
                return Err(Error::format(format!("line {n}: `{key}` expects {k} values, got {}", rest.len())));
            }
            rest.iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::format(format!("line {n}: bad number `{s}`"))))
                .collect()
        };
        match key {
            "horizon" => horizon = Some(nums(1)?[0]),
            "classes" => {
                let c = nums(1)?[0];
                if c.fract() != 0.0 || c < 1.0 {
                    return Err(Error::format(format!("line {n}: bad class count {c}")));
                }
                classes = Some(c as usize);
            }
            "ego_pose" => {
                let v = nums(3)?;
                ego.start = EgoPose { position: [v[0], v[1]], yaw: v[2] };
            }
            "ego_yaw" => {
                ego.yaw_follows_velocity = match rest.as_slice() {
                    ["fixed"] => false,
                    ["follow"] => true,
                    _ => return Err(Error::format(format!("line {n}: ego_yaw expects fixed or follow"))),
                }
            }
            "ego_segment" => {
                let v = nums(3)?;
                ego.segments.push((v[0], [v[1], v[2]]));
            }
            "box" => {
                let v = nums(10)?;
                if v[7].fract() != 0.0 || v[7] < 0.0 {
                    return Err(Error::format(format!("line {n}: bad class {}", v[7])));
                }
                boxes.push(BoxSpec {
                    center: [v[0], v[1], v[2]],
                    size: [v[3], v[4], v[5]],
                    yaw: v[6],
                    class: v[7] as usize,
                    velocity: [v[8], v[9]],
                });
            }
            other => return Err(Error::format(format!("line {n}: unknown record `{other}`"))),
        }
    }
    let spec = SceneSpec {
        boxes,
        ego,
        horizon: horizon.ok_or_else(|| Error::format("missing `horizon`"))?,
        num_classes: classes.ok_or_else(|| Error::format("missing `classes`"))?,
    };
    spec.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn one_box(center: [f64; 3], size: [f64; 3], yaw: f64, vel: [f64; 2], ego: [f64; 2]) -> SceneSpec {
        SceneSpec {
            boxes: vec![BoxSpec { center, size, yaw, class: 2, velocity: vel }],
            ego: EgoProfile::constant(ego),
            horizon: 3.0,
            num_classes: 4,
        }
    }

    #[test]
    fn ego_pose_integrates_segments() {
        let mut s = one_box([0.0; 3], [1.0; 3], 0.0, [0.0; 2], [5.0, 0.0]);
        assert_eq!(ego_pose_at(&s, 2.0).unwrap().position, [10.0, 0.0]);
        assert_eq!(ego_pose_at(&s, 0.0).unwrap().position, [0.0, 0.0]);
        s.ego.segments.push((1.0, [0.0, 2.0]));
        let before = ego_pose_at(&s, 1.0 - 1e-12).unwrap().position;
        let at = ego_pose_at(&s, 1.0).unwrap().position;
        assert!((before[0] - at[0]).abs() < 1e-10);
        assert_eq!(ego_pose_at(&s, 2.0).unwrap().position, [5.0, 2.0]);
        assert!(matches!(ego_pose_at(&s, 3.5), Err(Error::Range { .. })));
        assert!(ego_pose_at(&s, -0.1).is_err());
    }

    #[test]
    fn yaw_follow_mode() {
        let mut s = one_box([0.0; 3], [1.0; 3], 0.0, [0.0; 2], [0.0, 3.0]);
        assert_eq!(ego_pose_at(&s, 1.0).unwrap().yaw, 0.0);
        s.ego.yaw_follows_velocity = true;
        assert!((ego_pose_at(&s, 1.0).unwrap().yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn voxel_sized_box_marks_one_voxel() {
        let grid = GridSpec::cube(6, 0.4, 4);
        let c = grid.center_of(2, 3, 4);
        let s = one_box([c.x, c.y, c.z], [0.4; 3], 0.0, [0.0; 2], [0.0; 2]);
        let l = rasterize_gt(&s, 0.0, &grid).unwrap();
        assert_eq!(l.occupied_count(), 1);
        assert_eq!(l.get(2, 3, 4), 2);
    }

    #[test]
    fn ego_translation_by_one_voxel_shifts_labels() {
        let grid = GridSpec::cube(8, 0.4, 4);
        let s = one_box([0.1, 0.3, 0.2], [1.0, 0.7, 0.9], 0.3, [0.0; 2], [0.4, 0.0]);
        let a = rasterize_gt(&s, 0.0, &grid).unwrap();
        let b = rasterize_gt(&s, 1.0, &grid).unwrap();
        for ix in 1..8 {
            for iy in 0..8 {
                for iz in 0..8 {
                    assert_eq!(b.get(ix - 1, iy, iz), a.get(ix, iy, iz));
                }
            }
        }
    }

    #[test]
    fn later_box_wins_overlap() {
        let grid = GridSpec::cube(4, 0.5, 4);
        let mut s = one_box([0.0, 0.0, 0.0], [2.0; 3], 0.0, [0.0; 2], [0.0; 2]);
        s.boxes.push(BoxSpec { center: [0.0; 3], size: [0.5; 3], yaw: 0.0, class: 1, velocity: [0.0; 2] });
        let l = rasterize_gt(&s, 0.0, &grid).unwrap();
        assert!(l.labels.contains(&1) && l.labels.contains(&2));
    }

    proptest! {
        #[test]
        fn rotated_box_matches_brute_force(
            cx in -1.0f64..1.0, cy in -1.0f64..1.0, cz in -0.5f64..0.5,
            sx in 0.3f64..2.0, sy in 0.3f64..2.0, sz in 0.3f64..1.5,
            yaw in -3.2f64..3.2, vx in -1.0f64..1.0, t in 0.0f64..3.0, ex in -1.0f64..1.0,
        ) {
            let grid = GridSpec::cube(10, 0.3, 4);
            let s = one_box([cx, cy, cz], [sx, sy, sz], yaw, [vx, 0.5], [ex, 0.0]);
            let l = rasterize_gt(&s, t, &grid).unwrap();
            let pose = ego_pose_at(&s, t).unwrap();
            for v in 0..grid.num_voxels() {
                let p = grid.center(v);
                // world-frame point, then into the box frame
                let wx = pose.position[0] + p.x;
                let wy = pose.position[1] + p.y;
                let (bx, by) = (cx + vx * t, cy + 0.5 * t);
                let (dx, dy) = (wx - bx, wy - by);
                let lx = yaw.cos() * dx + yaw.sin() * dy;
                let ly = -yaw.sin() * dx + yaw.cos() * dy;
                let inside = lx.abs() <= sx / 2.0 && ly.abs() <= sy / 2.0 && (p.z - cz).abs() <= sz / 2.0;
                // exact ties on the boundary can differ by rounding
                let near = (lx.abs() - sx / 2.0).abs() < 1e-9 || (ly.abs() - sy / 2.0).abs() < 1e-9;
                if !near {
                    prop_assert_eq!(l.labels[v] == 2, inside, "voxel {}", v);
                }
            }
        }
    }

    #[test]
    fn dynamic_consistency_sign() {
        // box with velocity u, ego with velocity e: ego-frame displacement (u - e) t
        let grid = GridSpec::cube(16, 0.25, 4);
        let s = one_box([0.0, 0.0, 0.0], [0.5, 0.5, 0.5], 0.0, [1.5, 0.0], [0.5, 0.0]);
        let centroid = |l: &LabelGrid| {
            let occ: Vec<_> = (0..l.labels.len()).filter(|&v| l.is_occupied(v)).collect();
            occ.iter().map(|&v| l.spec.center(v).x).sum::<f64>() / occ.len() as f64
        };
        let a = rasterize_gt(&s, 0.0, &grid).unwrap();
        let b = rasterize_gt(&s, 1.0, &grid).unwrap();
        assert!((centroid(&b) - centroid(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn static_world_consistency_under_ego_motion() {
        let sc = generate_scenario(3, Difficulty::Static).unwrap();
        let spec = &sc.spec;
        let t = 2.0;
        let now = rasterize_gt(spec, t, &sc.grid).unwrap();
        let start = rasterize_gt(spec, 0.0, &sc.grid).unwrap();
        let shift = ego_pose_at(spec, t).unwrap().position;
        let g = &sc.grid;
        let (mut agree, mut total) = (0usize, 0usize);
        for ix in 1..g.dims[0] - 1 {
            for iy in 1..g.dims[1] - 1 {
                for iz in 0..g.dims[2] {
                    let p = g.center_of(ix, iy, iz);
                    // resample the t = 0 grid at the same world point
                    let q = [p.x + shift[0], p.y + shift[1]];
                    let jx = ((q[0] - g.origin[0]) / g.voxel_size).floor();
                    let jy = ((q[1] - g.origin[1]) / g.voxel_size).floor();
                    if jx < 1.0 || jy < 1.0 || jx >= (g.dims[0] - 1) as f64 || jy >= (g.dims[1] - 1) as f64 {
                        continue;
                    }
                    let (jx, jy) = (jx as usize, jy as usize);
                    let here = now.get(ix, iy, iz);
                    // interior voxels only: all 3x3 neighbours in the reference share a label
                    let interior = (jx - 1..=jx + 1).all(|a| (jy - 1..=jy + 1).all(|b| start.get(a, b, iz) == start.get(jx, jy, iz)));
                    if !interior {
                        continue;
                    }
                    total += 1;
                    agree += (here == start.get(jx, jy, iz)) as usize;
                }
            }
        }
        assert!(total > 1000);
        assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let a = generate_scenario(11, Difficulty::Mixed).unwrap();
        let b = generate_scenario(11, Difficulty::Mixed).unwrap();
        assert_eq!(a, b);
        assert_eq!(scene_to_text(&a.spec), scene_to_text(&b.spec));
        assert_ne!(a, generate_scenario(12, Difficulty::Mixed).unwrap());
        let s = generate_scenario(5, Difficulty::Static).unwrap();
        assert!(s.spec.boxes.iter().all(|b| b.velocity == [0.0, 0.0]));
        assert_eq!(a.waypoints.len(), 6);
        assert_eq!(a.times, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        // waypoints recompose to ego positions
        let mut acc = [0.0, 0.0];
        for (k, w) in a.waypoints.iter().enumerate() {
            acc = [acc[0] + w[0], acc[1] + w[1]];
            let p = ego_pose_at(&a.spec, a.times[k]).unwrap().position;
            assert!((acc[0] - p[0]).abs() < 1e-12 && (acc[1] - p[1]).abs() < 1e-12);
        }
        let d = generate_scenario(1, Difficulty::Dense).unwrap();
        assert_eq!(d.spec.ego.segments.len(), 2);
    }

    #[test]
    fn text_round_trip() {
        for diff in [Difficulty::Static, Difficulty::Mixed, Difficulty::Dense] {
            let s = generate_scenario(7, diff).unwrap().spec;
            assert_eq!(parse_scene(&scene_to_text(&s)).unwrap(), s);
        }
        assert!(parse_scene("scene v2\n").is_err());
        assert!(parse_scene("scene v1\nhorizon 3\nclasses 4\nego_segment 0 1 0\nbox 0 0 0 1 1 1 0 9 0 0\n").is_err());
        assert!(parse_scene("scene v1\nhorizon 3\nclasses 4\nwat 1\n").is_err());
        assert!("fast".parse::<Difficulty>().is_err());
    }
}
