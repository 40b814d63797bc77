//! On-disk layout of a generated scenario.
//!
//! ```text
//! manifest.txt     "scenario v1", then `name <s>`, `seed <n>`, `difficulty <d>`,
//!                  `horizon <s>`, and one `gt <t> <file>` line per timestamp
//! scene.txt        scene description text
//! gt_<k>.g4do      ground-truth label grid at the k-th supervised timestamp
//! waypoints.txt    ground-truth ego waypoints, one `x y` per line
//! ```

use std::fmt::Write as _;
use std::path::Path;

use gauss4d::io::{load_with, read_grid, save_with, write_grid, GridFile};
use gauss4d::scenegen::{parse_scene, scene_to_text, Difficulty, SceneSpec, Scenario};
use gauss4d::{Error, LabelGrid, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const SCENE: &str = "scene.txt";
pub const WAYPOINTS: &str = "waypoints.txt";

/// A scenario as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub name: String,
    pub spec: SceneSpec,
    pub times: Vec<f64>,
    pub gt: Vec<LabelGrid>,
}

pub fn scenario_name(seed: u64, difficulty: Difficulty) -> String {
    format!("seed{seed}_{difficulty}")
}

pub fn write_scenario(dir: &Path, sc: &Scenario, seed: u64, difficulty: Difficulty) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("scenario v1\n");
    let _ = writeln!(manifest, "name {}", scenario_name(seed, difficulty));
    let _ = writeln!(manifest, "seed {seed}");
    let _ = writeln!(manifest, "difficulty {difficulty}");
    let _ = writeln!(manifest, "horizon {}", sc.spec.horizon);
    for (k, (t, g)) in sc.times.iter().zip(&sc.gt).enumerate() {
        let file = format!("gt_{k:02}.g4do");
        save_with(&dir.join(&file), |w| write_grid(w, &GridFile::from_labels(g.clone())))?;
        let _ = writeln!(manifest, "gt {t} {file}");
    }
    std::fs::write(dir.join(SCENE), scene_to_text(&sc.spec))?;
    let mut wp = String::from("# x y\n");
    for p in &sc.waypoints {
        let _ = writeln!(wp, "{} {}", p[0], p[1]);
    }
    std::fs::write(dir.join(WAYPOINTS), wp)?;
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn bad(line: usize, msg: &str) -> Error {
    Error::format(format!("{MANIFEST} line {line}: {msg}"))
}

pub fn read_scenario(dir: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    if lines.next().map(|(_, l)| l) != Some("scenario v1") {
        return Err(Error::format(format!("{MANIFEST} must start with `scenario v1`")));
    }
    let mut name = None;
    let mut times = Vec::new();
    let mut gt = Vec::new();
    for (n, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["name", s] => name = Some(s.to_string()),
            ["seed", _] | ["difficulty", _] | ["horizon", _] => {}
            ["gt", t, file] => {
                let t: f64 = t.parse().map_err(|_| bad(n, "bad timestamp"))?;
                if file.contains('/') || file.contains('\\') {
                    return Err(bad(n, "grid file must be inside the scenario directory"));
                }
                let g = load_with(&dir.join(file), |r| read_grid(r))?;
                let labels = g.labels.ok_or_else(|| bad(n, "ground-truth grid carries no labels"))?;
                times.push(t);
                gt.push(labels);
            }
            _ => return Err(bad(n, &format!("unrecognized entry `{line}`"))),
        }
    }
    let spec = parse_scene(&std::fs::read_to_string(dir.join(SCENE))?)?;
    if gt.is_empty() {
        return Err(Error::format(format!("{MANIFEST} lists no ground-truth grids")));
    }
    Ok(LoadedScenario { name: name.unwrap_or_else(|| "scenario".into()), spec, times, gt })
}
