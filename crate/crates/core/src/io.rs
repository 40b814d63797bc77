//! File formats. All binary formats are little-endian and start with a
//! four-byte magic and a `u32` version.
//!
//! Gaussian set (`G4DG`):
//!
//! ```text
//! magic "G4DG", u32 version, u32 Q, u32 C
//! Q records of f64: mu_s[3] mu_t log_scales[3] quat[4] log_sigma_t
//!                   opacity_logit logits[C] v_dyn[2] alpha
//! ```
//!
//! Occupancy grid (`G4DO`):
//!
//! ```text
//! magic "G4DO", u32 version
//! f64 origin[3], u32 dims[3], f64 voxel_size, u32 C
//! u32 flags (bit 0: probabilities present, bit 1: labels present)
//! [f32 occ_prob x V, f32 class_prob x V*C]
//! [u8 labels x V]
//! ```
//!
//! Fitted world (`G4DW`):
//!
//! ```text
//! magic "G4DW", u32 version
//! f64 horizon, f64 v_scene[2], f64 cutoff_sigma
//! grid spec as in G4DO
//! embedded Gaussian set (G4DG)
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, LabelGrid, SemanticOccupancyGrid};
use crate::primitive::Gaussian4D;

pub const GAUSSIAN_MAGIC: &[u8; 4] = b"G4DG";
pub const GRID_MAGIC: &[u8; 4] = b"G4DO";
pub const WORLD_MAGIC: &[u8; 4] = b"G4DW";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_PROBS: u32 = 1;
const FLAG_LABELS: u32 = 2;
/// Sanity bound on counts read from headers.
const MAX_COUNT: u64 = 1 << 28;

pub fn read_u32<R: Read + ?Sized>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read + ?Sized>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read + ?Sized>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32<R: Read + ?Sized>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn write_f64s<W: Write + ?Sized>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read + ?Sized>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

fn expect_header<R: Read + ?Sized>(r: &mut R, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(format!("not a {what} file (bad magic {m:?})")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported {what} version {version}")));
    }
    Ok(())
}

fn checked_count(n: u64, what: &str) -> Result<usize> {
    if n > MAX_COUNT {
        return Err(Error::format(format!("{what} count {n} exceeds limit")));
    }
    Ok(n as usize)
}

// ---------------------------------------------------------------- Gaussians

pub fn write_gaussians<W: Write + ?Sized>(w: &mut W, gaussians: &[Gaussian4D], num_classes: usize) -> Result<()> {
    w.write_all(GAUSSIAN_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(gaussians.len() as u32).to_le_bytes())?;
    w.write_all(&(num_classes as u32).to_le_bytes())?;
    for (i, g) in gaussians.iter().enumerate() {
        if g.logits.len() != num_classes {
            return Err(Error::validation(format!(
                "gaussian {i} has {} logits, expected {num_classes}",
                g.logits.len()
            )));
        }
        write_f64s(w, &g.mu_s)?;
        write_f64s(w, &[g.mu_t])?;
        write_f64s(w, &g.log_scales)?;
        write_f64s(w, &g.quat)?;
        write_f64s(w, &[g.log_sigma_t, g.opacity_logit])?;
        write_f64s(w, &g.logits)?;
        write_f64s(w, &g.v_dyn)?;
        write_f64s(w, &[g.alpha])?;
    }
    Ok(())
}

/// Returns the primitives and the class count.
pub fn read_gaussians<R: Read + ?Sized>(r: &mut R) -> Result<(Vec<Gaussian4D>, usize)> {
    expect_header(r, GAUSSIAN_MAGIC, "gaussian set")?;
    let q = checked_count(read_u32(r)? as u64, "gaussian")?;
    let c = checked_count(read_u32(r)? as u64, "class")?;
    let mut out = Vec::with_capacity(q);
    for _ in 0..q {
        let f = read_f64s(r, 3 + 1 + 3 + 4 + 2)?;
        let logits = read_f64s(r, c)?;
        let tail = read_f64s(r, 3)?;
        out.push(Gaussian4D {
            mu_s: [f[0], f[1], f[2]],
            mu_t: f[3],
            log_scales: [f[4], f[5], f[6]],
            quat: [f[7], f[8], f[9], f[10]],
            log_sigma_t: f[11],
            opacity_logit: f[12],
            logits,
            v_dyn: [tail[0], tail[1]],
            alpha: tail[2],
        });
    }
    Ok((out, c))
}

/// Human-readable dump, one primitive per line.
pub fn gaussians_to_text(gaussians: &[Gaussian4D]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# index mu_s mu_t scales quat sigma_t opacity v_dyn alpha | logits");
    for (i, g) in gaussians.iter().enumerate() {
        let sc = g.scales();
        let _ = write!(
            s,
            "{i} mu_s=({:.6},{:.6},{:.6}) mu_t={:.6} scales=({:.6},{:.6},{:.6}) quat=({:.6},{:.6},{:.6},{:.6}) \
             sigma_t={:.6} opacity={:.6} v_dyn=({:.6},{:.6}) alpha={:.6} |",
            g.mu_s[0], g.mu_s[1], g.mu_s[2], g.mu_t, sc[0], sc[1], sc[2], g.quat[0], g.quat[1], g.quat[2], g.quat[3],
            g.sigma_t(), g.opacity(), g.v_dyn[0], g.v_dyn[1], g.alpha,
        );
        for l in &g.logits {
            let _ = write!(s, " {l:.6}");
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------- grids

fn write_spec<W: Write + ?Sized>(w: &mut W, spec: &GridSpec) -> Result<()> {
    write_f64s(w, &spec.origin)?;
    for d in spec.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    write_f64s(w, &[spec.voxel_size])?;
    w.write_all(&(spec.num_classes as u32).to_le_bytes())?;
    Ok(())
}

fn read_spec<R: Read + ?Sized>(r: &mut R) -> Result<GridSpec> {
    let o = read_f64s(r, 3)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = checked_count(read_u32(r)? as u64, "dimension")?;
    }
    let voxel_size = read_f64(r)?;
    let c = checked_count(read_u32(r)? as u64, "class")?;
    if dims.iter().product::<usize>() as u64 > MAX_COUNT {
        return Err(Error::format(format!("grid dims {dims:?} too large")));
    }
    GridSpec::new([o[0], o[1], o[2]], dims, voxel_size, c).map_err(|e| Error::format(e.to_string()))
}

/// A grid file: probabilities, labels, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub spec: GridSpec,
    pub probs: Option<SemanticOccupancyGrid>,
    pub labels: Option<LabelGrid>,
}

impl GridFile {
    pub fn from_labels(labels: LabelGrid) -> Self {
        GridFile { spec: labels.spec.clone(), probs: None, labels: Some(labels) }
    }

    pub fn from_grid(probs: SemanticOccupancyGrid, labels: Option<LabelGrid>) -> Self {
        GridFile { spec: probs.spec.clone(), probs: Some(probs), labels }
    }
}

pub fn write_grid<W: Write + ?Sized>(w: &mut W, file: &GridFile) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_spec(w, &file.spec)?;
    let mut flags = 0;
    if file.probs.is_some() {
        flags |= FLAG_PROBS;
    }
    if file.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    w.write_all(&flags.to_le_bytes())?;
    if let Some(p) = &file.probs {
        p.spec.same_as(&file.spec)?;
        for x in p.occ_prob.iter().chain(&p.class_prob) {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    if let Some(l) = &file.labels {
        l.spec.same_as(&file.spec)?;
        w.write_all(&l.labels)?;
    }
    Ok(())
}

pub fn read_grid<R: Read + ?Sized>(r: &mut R) -> Result<GridFile> {
    expect_header(r, GRID_MAGIC, "occupancy grid")?;
    let spec = read_spec(r)?;
    let flags = read_u32(r)?;
    if flags & !(FLAG_PROBS | FLAG_LABELS) != 0 {
        return Err(Error::format(format!("unknown grid flags {flags:#x}")));
    }
    let v = spec.num_voxels();
    let probs = if flags & FLAG_PROBS != 0 {
        let occ = (0..v).map(|_| read_f32(r).map(f64::from)).collect::<Result<Vec<_>>>()?;
        let cls = (0..v * spec.num_classes).map(|_| read_f32(r).map(f64::from)).collect::<Result<Vec<_>>>()?;
        Some(SemanticOccupancyGrid { spec: spec.clone(), occ_prob: occ, class_prob: cls })
    } else {
        None
    };
    let labels = if flags & FLAG_LABELS != 0 {
        let mut buf = vec![0u8; v];
        r.read_exact(&mut buf)?;
        let lg = LabelGrid { spec: spec.clone(), labels: buf };
        lg.validate().map_err(|e| Error::format(e.to_string()))?;
        Some(lg)
    } else {
        None
    };
    Ok(GridFile { spec, probs, labels })
}

/// Plain-text list of occupied voxels: `ix iy iz label`.
pub fn labels_to_voxel_list(labels: &LabelGrid) -> String {
    let mut s = String::from("# ix iy iz label\n");
    for v in 0..labels.labels.len() {
        if labels.is_occupied(v) {
            let [x, y, z] = labels.spec.coords(v);
            let _ = writeln!(s, "{x} {y} {z} {}", labels.labels[v]);
        }
    }
    s
}

// ---------------------------------------------------------------- worlds

/// A fitted world: one primitive set over the whole horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldFile {
    pub horizon: f64,
    pub v_scene: [f64; 2],
    pub cutoff_sigma: f64,
    pub spec: GridSpec,
    pub gaussians: Vec<Gaussian4D>,
}

pub fn write_world<W: Write + ?Sized>(w: &mut W, world: &WorldFile) -> Result<()> {
    w.write_all(WORLD_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_f64s(w, &[world.horizon, world.v_scene[0], world.v_scene[1], world.cutoff_sigma])?;
    write_spec(w, &world.spec)?;
    write_gaussians(w, &world.gaussians, world.spec.num_classes)
}

pub fn read_world<R: Read + ?Sized>(r: &mut R) -> Result<WorldFile> {
    expect_header(r, WORLD_MAGIC, "world")?;
    let h = read_f64s(r, 4)?;
    let spec = read_spec(r)?;
    let (gaussians, c) = read_gaussians(r)?;
    if c != spec.num_classes {
        return Err(Error::format(format!("world class count {c} != grid class count {}", spec.num_classes)));
    }
    Ok(WorldFile { horizon: h[0], v_scene: [h[1], h[2]], cutoff_sigma: h[3], spec, gaussians })
}

// ---------------------------------------------------------------- helpers

pub fn save_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_with<T, F>(path: &Path, f: F) -> Result<T>
where
    F: FnOnce(&mut dyn Read) -> Result<T>,
{
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    f(&mut r)
}
