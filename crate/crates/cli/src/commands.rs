//! Command implementations. Each returns an engine error; the binary maps
//! it to an exit code.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use gauss4d::bench::{run_bench, synthetic_world, BenchConfig};
use gauss4d::config::Config;
use gauss4d::diffops::{load_checkpoint, save_checkpoint};
use gauss4d::gradsuite::{corrupted_control, run_suite, suite_report, SuiteScale};
use gauss4d::io::{load_with, read_world, save_with, write_grid, write_world, GridFile};
use gauss4d::metrics::{parse_metrics, write_metrics, MetricRow, HORIZONS};
use gauss4d::optimize::{evaluate_world, fit_world_from, query_world, slice_world, FitConfig, FitState, Variant};
use gauss4d::scenegen::{generate_scenario, Difficulty, SceneSpec, CLASS_NAMES};
use gauss4d::splat::{to_labels, DEFAULT_OCC_THRESHOLD};
use gauss4d::{Error, Execution, GridSpec, Result};

use crate::scenario_dir::{read_scenario, write_scenario};

pub const WORLD_FILE: &str = "world.g4dw";
pub const CHECKPOINT_FILE: &str = "checkpoint.g4dc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "fit.txt";

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())?;
    Ok(())
}

pub fn gen(seed: u64, difficulty: &str, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let difficulty: Difficulty = difficulty.parse()?;
    let sc = generate_scenario(seed, difficulty)?;
    write_scenario(dir, &sc, seed, difficulty)?;
    say(out, &format!("wrote {} ground-truth grids and scene text to {}\n", sc.gt.len(), dir.display()))
}

// ---------------------------------------------------------------- fit

/// Command-line values; they override the config file and environment.
#[derive(Debug, Clone, Default)]
pub struct FitFlags {
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub halt_at: Option<usize>,
}

pub const FIT_SECTION: &str = "fit";
pub const FIT_KEYS: [&str; 15] = [
    "seed",
    "steps",
    "gaussians",
    "lr",
    "lr_floor",
    "variant",
    "cutoff_sigma",
    "log_every",
    "scene_velocity_lr_scale",
    "v_scene_init",
    "init_opacity",
    "init_scale",
    "init_sigma_t",
    "ce_weight",
    "lovasz_weight",
];

/// Apparent velocity of the static world in the initial ego frame.
pub fn ego_scene_velocity(spec: &SceneSpec) -> [f64; 2] {
    let v = spec.ego.segments.first().map_or([0.0, 0.0], |s| s.1);
    let (s, c) = spec.ego.start.yaw.sin_cos();
    // adding 0.0 turns a negated zero into +0
    [0.0 - (c * v[0] + s * v[1]), 0.0 - (-s * v[0] + c * v[1])]
}

/// Builds the fitting configuration: defaults, then `[fit]` keys from
/// `config`, then flags.
pub fn fit_config(config: &Config, flags: &FitFlags, scene: &SceneSpec) -> Result<FitConfig> {
    for section in config.sections() {
        if section != FIT_SECTION {
            let keys = config.keys(section).join(", ");
            return Err(Error::validation(format!("unknown config section `[{section}]` (keys: {keys})")));
        }
    }
    if let Some(k) = config.keys(FIT_SECTION).into_iter().find(|k| !FIT_KEYS.contains(k)) {
        return Err(Error::validation(format!("unknown [fit] key `{k}`")));
    }
    let s = FIT_SECTION;
    let mut cfg = FitConfig::default();
    cfg.seed = config.get_or(s, "seed", cfg.seed)?;
    cfg.steps = config.get_or(s, "steps", cfg.steps)?;
    cfg.num_gaussians = config.get_or(s, "gaussians", cfg.num_gaussians)?;
    cfg.lr = config.get_or(s, "lr", cfg.lr)?;
    cfg.lr_floor = config.get_or(s, "lr_floor", cfg.lr_floor)?;
    cfg.variant = config.get_or(s, "variant", cfg.variant)?;
    cfg.splat.cutoff_sigma = config.get_or(s, "cutoff_sigma", cfg.splat.cutoff_sigma)?;
    cfg.log_every = config.get_or(s, "log_every", cfg.log_every)?;
    cfg.scene_velocity_lr_scale = config.get_or(s, "scene_velocity_lr_scale", cfg.scene_velocity_lr_scale)?;
    cfg.init.opacity = config.get_or(s, "init_opacity", cfg.init.opacity)?;
    cfg.init.scale = config.get(s, "init_scale")?.or(cfg.init.scale);
    cfg.init.sigma_t = config.get(s, "init_sigma_t")?.or(cfg.init.sigma_t);
    cfg.weights.ce = config.get_or(s, "ce_weight", cfg.weights.ce)?;
    cfg.weights.lovasz = config.get_or(s, "lovasz_weight", cfg.weights.lovasz)?;
    cfg.v_scene_init = match config.raw(s, "v_scene_init").unwrap_or("ego") {
        "ego" => ego_scene_velocity(scene),
        "zero" => [0.0, 0.0],
        other => return Err(Error::validation(format!("[fit] v_scene_init must be `ego` or `zero`, got `{other}`"))),
    };
    if let Some(v) = &flags.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    cfg.seed = flags.seed.unwrap_or(cfg.seed);
    cfg.steps = flags.steps.unwrap_or(cfg.steps);
    cfg.halt_at = flags.halt_at;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite() && cfg.lr_floor >= 0.0 && cfg.splat.cutoff_sigma > 0.0) {
        return Err(Error::validation("[fit] lr, lr_floor and cutoff_sigma must be positive and finite"));
    }
    Ok(cfg)
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut config = match path {
        Some(p) => Config::parse(&std::fs::read_to_string(p)?)?,
        None => Config::new(),
    };
    config.apply_process_env(&[FIT_SECTION]);
    Ok(config)
}

fn summary_text(cfg: &FitConfig, name: &str, step: usize, loss: f64, v_scene: [f64; 2], dropped_vz: f64) -> String {
    let mut s = String::from("fit v1\n");
    let _ = writeln!(s, "scenario {name}");
    let _ = writeln!(s, "variant {}", cfg.variant);
    let _ = writeln!(s, "seed {}", cfg.seed);
    let _ = writeln!(s, "gaussians {}", cfg.num_gaussians);
    let _ = writeln!(s, "schedule_steps {}", cfg.steps);
    let _ = writeln!(s, "completed_steps {step}");
    let _ = writeln!(s, "lr {}", cfg.lr);
    let _ = writeln!(s, "v_scene_init {} {}", cfg.v_scene_init[0], cfg.v_scene_init[1]);
    let _ = writeln!(s, "last_loss {loss}");
    let _ = writeln!(s, "v_scene {} {}", v_scene[0], v_scene[1]);
    let _ = writeln!(s, "dropped_vz {dropped_vz}");
    s
}

pub fn fit(scenario: &Path, dir: &Path, config: Option<&Path>, flags: &FitFlags, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let sc = read_scenario(scenario)?;
    let cfg = fit_config(&load_config(config)?, flags, &sc.spec)?;
    let horizon = sc.spec.horizon;
    let state = match resume {
        Some(p) => {
            let st = FitState::from_store(&load_checkpoint(p)?)?;
            if st.step > cfg.steps {
                return Err(Error::validation(format!("checkpoint is at step {} beyond the {}-step schedule", st.step, cfg.steps)));
            }
            st
        }
        None => FitState::fresh(&cfg, &sc.gt[0].spec, horizon)?,
    };
    let result = fit_world_from(state, &sc.times, &sc.gt, horizon, &cfg)?;
    std::fs::create_dir_all(dir)?;
    save_with(&dir.join(WORLD_FILE), |w| write_world(w, &result.world))?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &result.state.to_store())?;

    let evals = evaluate_world(&result.world, &sc.times, &sc.gt)?;
    let mut rows = Vec::new();
    for e in &evals {
        rows.push(MetricRow { scenario: sc.name.clone(), timestamp: e.time, metric: "iou".into(), value: e.iou });
        if let Some(m) = e.miou.mean {
            rows.push(MetricRow { scenario: sc.name.clone(), timestamp: e.time, metric: "miou".into(), value: m });
        }
    }
    std::fs::write(dir.join(METRICS_FILE), write_metrics(&rows))?;

    let mut trace = String::from("step,time,loss,iou,miou\n");
    for r in &result.trace {
        let miou = r.miou.map_or(String::from("nan"), |m| m.to_string());
        let _ = writeln!(trace, "{},{},{},{},{}", r.step, r.time, r.loss, r.iou, miou);
    }
    std::fs::write(dir.join(TRACE_FILE), trace)?;

    let loss = result.losses.last().copied().unwrap_or(f64::NAN);
    let summary = summary_text(&cfg, &sc.name, result.state.step, loss, result.world.v_scene, result.dropped_vz);
    std::fs::write(dir.join(SUMMARY_FILE), &summary)?;
    say(out, &summary)
}

// ---------------------------------------------------------------- query

pub fn slices_text(world: &gauss4d::io::WorldFile, t: f64, allow_outside: bool) -> Result<String> {
    let sliced = slice_world(world, t, allow_outside)?;
    let mut s = String::from("# index mean_x mean_y mean_z weight\n");
    for (i, g) in sliced.iter().enumerate() {
        let _ = writeln!(s, "{i} {:?} {:?} {:?} {:?}", g.mean.x, g.mean.y, g.mean.z, g.weight);
    }
    Ok(s)
}

pub fn query(world: &Path, t: f64, grid_out: &Path, slices: Option<&Path>, allow_outside: bool, out: &mut dyn Write) -> Result<()> {
    let w = load_with(world, |r| read_world(r))?;
    let probs = query_world(&w, t, allow_outside, Execution::Parallel)?;
    let labels = to_labels(&probs, DEFAULT_OCC_THRESHOLD);
    let occupied = labels.occupied_count();
    save_with(grid_out, |wr| write_grid(wr, &GridFile::from_grid(probs, Some(labels))))?;
    if let Some(p) = slices {
        std::fs::write(p, slices_text(&w, t, allow_outside)?)?;
    }
    say(out, &format!("t {t}\noccupied_voxels {occupied}\n"))
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone)]
pub struct BenchFlags {
    pub synthetic_gaussians: usize,
    pub seed: u64,
    pub horizons: Vec<f64>,
    pub repeats: usize,
    pub parallel: bool,
}

pub fn bench(world: Option<&Path>, flags: &BenchFlags, report_out: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let w = match world {
        Some(p) => load_with(p, |r| read_world(r))?,
        None => synthetic_world(flags.seed, flags.synthetic_gaussians, GridSpec::desk(CLASS_NAMES.len()), 3.0)?,
    };
    let exec = if flags.parallel { Execution::Parallel } else { Execution::Sequential };
    let cfg = BenchConfig { horizons: flags.horizons.clone(), repeats: flags.repeats, exec };
    let text = run_bench(&w, &cfg)?.to_text();
    match report_out {
        Some(p) => std::fs::write(p, &text)?,
        None => say(out, &text)?,
    }
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

pub fn gradcheck(gaussians: usize, grid: usize, seed: u64, report_out: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    if gaussians == 0 || grid < 2 {
        return Err(Error::validation("gradcheck needs at least one Gaussian and a grid side of 2 or more"));
    }
    let reports = run_suite(SuiteScale { gaussians, grid, seed })?;
    let control = corrupted_control()?;
    let mut text = suite_report(&reports);
    let _ = writeln!(text, "control {} {}", control.label, if control.passed() { "UNDETECTED" } else { "DETECTED" });
    match report_out {
        Some(p) => std::fs::write(p, &text)?,
        None => say(out, &text)?,
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::Numeric(format!("gradient checks failed: {}", failed.join(", "))));
    }
    if control.passed() {
        return Err(Error::Numeric("corrupted-adjoint control was not detected".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------- report

/// Per-metric averages at 1 s, 2 s and 3 s plus their mean, as a table.
pub fn report_table(rows: &[MetricRow]) -> String {
    if rows.is_empty() {
        return String::from("empty report: no metric rows in the input\n");
    }
    let mut by_metric: BTreeMap<&str, [Vec<f64>; 3]> = BTreeMap::new();
    let mut scenarios: Vec<&str> = rows.iter().map(|r| r.scenario.as_str()).collect();
    scenarios.sort_unstable();
    scenarios.dedup();
    for r in rows {
        let cell = by_metric.entry(&r.metric).or_default();
        if let Some(h) = HORIZONS.iter().position(|h| (h - r.timestamp).abs() < 1e-9) {
            cell[h].push(r.value);
        }
    }
    let mut s = format!("scenarios {}\n", scenarios.len());
    let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", "metric", "1s", "2s", "3s", "Avg.");
    for (metric, cells) in &by_metric {
        let means: Vec<Option<f64>> =
            cells.iter().map(|c| (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)).collect();
        let present: Vec<f64> = means.iter().flatten().copied().collect();
        let avg = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        let fmt = |v: Option<f64>| v.map_or(String::from("-"), |x| format!("{x:.4}"));
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", metric, fmt(means[0]), fmt(means[1]), fmt(means[2]), fmt(avg));
    }
    s
}

pub fn report(files: &[std::path::PathBuf], report_out: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let mut rows = Vec::new();
    for f in files {
        rows.extend(parse_metrics(&std::fs::read_to_string(f)?)?);
    }
    let text = report_table(&rows);
    match report_out {
        Some(p) => std::fs::write(p, &text)?,
        None => say(out, &text)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gauss4d::scenegen::EgoProfile;

    #[test]
    fn ego_velocity_is_negated_into_the_ego_frame() {
        let mut spec = SceneSpec { boxes: vec![], ego: EgoProfile::constant([5.0, 0.0]), horizon: 3.0, num_classes: 4 };
        assert_eq!(ego_scene_velocity(&spec), [-5.0, 0.0]);
        spec.ego.start.yaw = std::f64::consts::FRAC_PI_2;
        spec.ego.segments[0].1 = [0.0, 2.0];
        let v = ego_scene_velocity(&spec);
        assert!((v[0] + 2.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn config_layers() {
        let spec = SceneSpec { boxes: vec![], ego: EgoProfile::constant([3.0, 0.0]), horizon: 3.0, num_classes: 4 };
        let c = Config::parse("[fit]\nsteps = 7\nvariant = unified_velocity\nv_scene_init = zero\n").unwrap();
        let cfg = fit_config(&c, &FitFlags::default(), &spec).unwrap();
        assert_eq!((cfg.steps, cfg.variant, cfg.v_scene_init), (7, Variant::UnifiedVelocity, [0.0, 0.0]));
        let flags = FitFlags { variant: Some("structured".into()), steps: Some(9), ..Default::default() };
        let cfg = fit_config(&Config::new(), &flags, &spec).unwrap();
        assert_eq!((cfg.steps, cfg.variant, cfg.v_scene_init), (9, Variant::Structured, [-3.0, 0.0]));
        for bad in ["[fit]\nstep = 3\n", "[train]\nx = 1\n", "[fit]\nlr = -1\n", "[fit]\nv_scene_init = up\n", "[fit]\nvariant = joint\n"] {
            let err = fit_config(&Config::parse(bad).unwrap(), &FitFlags::default(), &spec).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "{bad}: {err}");
        }
    }

    #[test]
    fn report_layout() {
        assert!(report_table(&[]).starts_with("empty report"));
        let row = |s: &str, t: f64, m: &str, v: f64| MetricRow { scenario: s.into(), timestamp: t, metric: m.into(), value: v };
        let rows = vec![
            row("b", 1.0, "iou", 0.5),
            row("a", 1.0, "iou", 0.3),
            row("a", 2.0, "iou", 0.2),
            row("a", 0.5, "iou", 0.9),
            row("a", 3.0, "iou", 0.1),
            row("a", 1.0, "miou", 0.25),
        ];
        let t = report_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "scenarios 2");
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["metric", "1s", "2s", "3s", "Avg."]);
        assert_eq!(lines[2].split_whitespace().collect::<Vec<_>>(), ["iou", "0.4000", "0.2000", "0.1000", "0.2333"]);
        assert_eq!(lines[3].split_whitespace().collect::<Vec<_>>(), ["miou", "0.2500", "-", "-", "0.2500"]);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        assert_eq!(report_table(&shuffled), t);
    }
}
