//! Point cloud sources: synthetic labelled scenes and shapes, LiDAR frame
//! and label files, and a text PLY export.
//!
//! Frames are consecutive little-endian `f32` records `(x, y, z, intensity)`.
//! Label files hold one little-endian `u32` per point whose low 16 bits are
//! the semantic id.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::voxel::PointCloud;

pub const GROUND: u32 = 0;
pub const BUILDING: u32 = 1;
pub const POLE: u32 = 2;
pub const VEGETATION: u32 = 3;
pub const SCENE_CLASSES: [&str; 4] = ["ground", "building", "pole", "vegetation"];

/// Height of the ground plane below the sensor.
pub const GROUND_Z: f64 = -1.7;

/// Layout of a synthetic street scene in the sensor frame: a ground plane
/// with box-shaped buildings, thin poles and blobby vegetation placed on
/// non-overlapping cells. Intensity is uniform noise and carries no class
/// information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub n_points: usize,
    /// Half-width of the square footprint, metres.
    pub extent: f64,
    pub n_boxes: usize,
    pub n_poles: usize,
    pub n_clutter: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_points: 4096,
            extent: 12.0,
            n_boxes: 3,
            n_poles: 4,
            n_clutter: 3,
            seed: 0,
        }
    }
}

struct Footprint {
    cx: f64,
    cy: f64,
    hx: f64,
    hy: f64,
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.hx && (y - self.cy).abs() <= self.hy
    }
}

/// Nudges a value onto the `f32` grid so frames written to disk read back
/// bit-identically.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn box_surface_point<R: Rng>(rng: &mut R, f: &Footprint, height: f64) -> [f64; 3] {
    let (wx, wy) = (2.0 * f.hx, 2.0 * f.hy);
    let areas = [wx * height, wx * height, wy * height, wy * height, wx * wy];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let u = rng.random_range(-1.0..1.0);
    let z = GROUND_Z + rng.random_range(0.05..1.0) * height;
    match face {
        0 => [f.cx + u * f.hx, f.cy - f.hy, z],
        1 => [f.cx + u * f.hx, f.cy + f.hy, z],
        2 => [f.cx - f.hx, f.cy + u * f.hy, z],
        3 => [f.cx + f.hx, f.cy + u * f.hy, z],
        _ => [
            f.cx + u * f.hx,
            f.cy + rng.random_range(-1.0..1.0) * f.hy,
            GROUND_Z + height,
        ],
    }
}

/// Splits `n` into shares proportional to `weights`, giving rounding
/// leftovers to the first share.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out: Vec<usize> = weights
        .iter()
        .map(|w| (n as f64 * w / total) as usize)
        .collect();
    let assigned: usize = out.iter().sum();
    out[0] += n - assigned;
    out
}

/// Generates a labelled scene with one intensity attribute. The result is
/// a pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud> {
    if spec.n_points == 0 || !(spec.extent > 0.0) {
        return Err(Error::Argument(format!("degenerate scene spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;

    // Objects sit on distinct cells of a coarse grid so classes never overlap.
    let grid = ((spec.n_boxes + spec.n_poles + spec.n_clutter) as f64)
        .sqrt()
        .ceil() as usize
        + 1;
    let cell = 1.6 * e / grid as f64;
    let mut cells: Vec<(usize, usize)> = (0..grid)
        .flat_map(|i| (0..grid).map(move |j| (i, j)))
        .collect();
    cells.shuffle(&mut rng);
    let mut cells = cells.into_iter().map(|(i, j)| {
        (
            -0.8 * e + (i as f64 + 0.5) * cell,
            -0.8 * e + (j as f64 + 0.5) * cell,
        )
    });
    let mut next_cell = || {
        cells
            .next()
            .ok_or_else(|| Error::Argument("too many scene objects".into()))
    };

    let mut boxes = Vec::new();
    for _ in 0..spec.n_boxes {
        let (cx, cy) = next_cell()?;
        let half = 0.45 * cell;
        let f = Footprint {
            cx,
            cy,
            hx: rng.random_range(0.5..1.0) * half,
            hy: rng.random_range(0.5..1.0) * half,
        };
        boxes.push((f, rng.random_range(2.0..3.5)));
    }
    let mut poles = Vec::new();
    for _ in 0..spec.n_poles {
        let (cx, cy) = next_cell()?;
        poles.push((cx, cy, rng.random_range(3.0..4.5)));
    }
    let mut blobs = Vec::new();
    for _ in 0..spec.n_clutter {
        let (cx, cy) = next_cell()?;
        blobs.push((cx, cy, rng.random_range(0.6..1.2)));
    }

    let shares = apportion(
        spec.n_points,
        &[
            0.4,
            if boxes.is_empty() { 0.0 } else { 0.3 },
            if poles.is_empty() { 0.0 } else { 0.12 },
            if blobs.is_empty() { 0.0 } else { 0.18 },
        ],
    );
    let mut points: Vec<([f64; 3], u32)> = Vec::with_capacity(spec.n_points);
    let height_noise = Normal::new(0.0, 0.02).expect("valid sigma");
    while points.len() < shares[0] {
        let (x, y) = (rng.random_range(-e..e), rng.random_range(-e..e));
        if boxes.iter().any(|(f, _)| f.contains(x, y)) {
            continue;
        }
        points.push(([x, y, GROUND_Z + height_noise.sample(&mut rng)], GROUND));
    }
    for k in 0..shares[1] {
        let (f, h) = &boxes[k % boxes.len()];
        points.push((box_surface_point(&mut rng, f, *h), BUILDING));
    }
    for k in 0..shares[2] {
        let (cx, cy, h) = poles[k % poles.len()];
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let z = GROUND_Z + rng.random_range(0.1..1.0) * h;
        points.push(([cx + 0.15 * a.cos(), cy + 0.15 * a.sin(), z], POLE));
    }
    for k in 0..shares[3] {
        let (cx, cy, r) = blobs[k % blobs.len()];
        let spread = Normal::new(0.0, r / 2.0).expect("valid sigma");
        let (dx, dy) = (spread.sample(&mut rng), spread.sample(&mut rng));
        let dz = rng.random_range(0.4..1.6) * r;
        points.push(([cx + dx, cy + dy, GROUND_Z + 0.3 + dz], VEGETATION));
    }
    points.shuffle(&mut rng);

    let coords = points.iter().map(|(c, _)| c.map(f32_exact)).collect();
    let labels = points.iter().map(|(_, l)| *l).collect();
    let intensity = (0..spec.n_points)
        .map(|_| f32_exact(rng.random_range(0.0..1.0)))
        .collect();
    PointCloud::new(
        coords,
        Tensor::from_vec(spec.n_points, 1, intensity)?,
        Some(labels),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cube,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 2] = [ShapeKind::Sphere, ShapeKind::Cube];

    pub fn class_id(self) -> u32 {
        match self {
            Self::Sphere => 0,
            Self::Cube => 1,
        }
    }
}

/// Surface samples of a randomly sized, placed and yawed shape inside the
/// unit cube centred at the origin.
pub fn generate_shape<R: Rng>(kind: ShapeKind, n_points: usize, rng: &mut R) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::Argument("shape needs at least one point".into()));
    }
    let size = rng.random_range(0.2..0.3);
    let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let yaw: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = yaw.sin_cos();
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let coords = (0..n_points)
        .map(|_| {
            let p = match kind {
                ShapeKind::Sphere => {
                    let v: [f64; 3] = std::array::from_fn(|_| unit.sample(rng));
                    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    v.map(|c| size * c / norm)
                }
                ShapeKind::Cube => {
                    let face = rng.random_range(0..6);
                    let mut v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-size..size));
                    v[face / 2] = if face % 2 == 0 { -size } else { size };
                    v
                }
            };
            let [x, y, z] = p;
            [
                center[0] + cos * x - sin * y,
                center[1] + sin * x + cos * y,
                center[2] + z,
            ]
        })
        .collect();
    PointCloud::from_coords(coords)
}

/// Equal numbers of spheres and cubes, alternating, with labels in
/// `(cloud, class)` pairs.
pub fn shape_dataset(
    per_class: usize,
    n_points: usize,
    seed: u64,
) -> Result<Vec<(PointCloud, u32)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for _ in 0..per_class {
        for kind in ShapeKind::ALL {
            out.push((generate_shape(kind, n_points, &mut rng)?, kind.class_id()));
        }
    }
    Ok(out)
}

fn read_words(path: &Path, width: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() % width != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a multiple of the {width}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Reads a frame of `(x, y, z, intensity)` records; intensity becomes the
/// single point attribute.
pub fn read_lidar_bin(path: &Path) -> Result<PointCloud> {
    let bytes = read_words(path, 16)?;
    let n = bytes.len() / 16;
    let mut coords = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        coords.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    PointCloud::new(coords, Tensor::from_vec(n, 1, intensity)?, None)
}

pub fn write_lidar_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for i in 0..pc.len() {
        let c = pc.coords()[i];
        let intensity = if pc.feat_dim() > 0 {
            pc.feats().get(i, 0)
        } else {
            0.0
        };
        for v in [c[0], c[1], c[2], intensity] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw semantic id to training id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelRemap {
    table: HashMap<u32, u32>,
}

impl LabelRemap {
    /// Parses `raw_id train_id` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(raw)), Some(Ok(train)), None) => {
                    table.insert(raw, train);
                }
                _ => {
                    return Err(Error::Format(format!(
                        "remap line {}: expected `raw_id train_id`, got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(Self { table })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn map(&self, raw: u32) -> Result<u32> {
        self.table
            .get(&raw)
            .copied()
            .ok_or_else(|| Error::Data(format!("no training id for semantic id {raw}")))
    }
}

/// Reads semantic ids (low 16 bits of each word), remapped when a table is
/// given.
pub fn read_labels(path: &Path, remap: Option<&LabelRemap>) -> Result<Vec<u32>> {
    let bytes = read_words(path, 4)?;
    bytes
        .chunks_exact(4)
        .map(|w| {
            let semantic = u32::from_le_bytes(w.try_into().unwrap()) & 0xFFFF;
            match remap {
                Some(r) => r.map(semantic),
                None => Ok(semantic),
            }
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Frames and labels under `dir/velodyne/*.bin` and `dir/labels/*.label`,
/// paired by file stem and sorted by name.
pub fn load_frames_dir(
    dir: &Path,
    remap: Option<&LabelRemap>,
) -> Result<Vec<(PathBuf, PointCloud)>> {
    let frames_dir = dir.join("velodyne");
    let mut frames: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", frames_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "no .bin frames in {}",
            frames_dir.display()
        )));
    }
    frames
        .into_iter()
        .map(|f| {
            let stem = f.file_stem().unwrap_or_default();
            let label_path = dir.join("labels").join(stem).with_extension("label");
            let mut pc = read_lidar_bin(&f)?;
            pc.set_labels(read_labels(&label_path, remap)?)?;
            Ok((f, pc))
        })
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128],
    [70, 70, 220],
    [250, 170, 30],
    [60, 180, 60],
    [220, 20, 60],
    [0, 130, 180],
    [190, 150, 100],
    [150, 60, 200],
];

/// ASCII PLY with one colour per class; ignored points are grey.
pub fn write_ply(path: &Path, pc: &PointCloud, classes: &[u32], ignore: u32) -> Result<()> {
    if classes.len() != pc.len() {
        return Err(Error::Contract(format!(
            "{} classes for {} points",
            classes.len(),
            pc.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", pc.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    writeln!(
        w,
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header"
    )?;
    for (c, &k) in pc.coords().iter().zip(classes) {
        let rgb = if k == ignore {
            [128, 128, 128]
        } else {
            PALETTE[k as usize % PALETTE.len()]
        };
        writeln!(
            w,
            "{} {} {} {} {} {}",
            c[0], c[1], c[2], rgb[0], rgb[1], rgb[2]
        )?;
    }
    w.flush()?;
    Ok(())
}
