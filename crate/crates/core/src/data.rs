//! Synthetic mast-cell scenes, tiling, scene-level splits, and PPM/PGM I/O.
//!
//! A scene holds 5 to 7 cells in one of three stages:
//!
//! * intact: filled ellipse with a crisp anti-aliased border,
//! * degranulating: ragged ellipse surrounded by a cluster of granules,
//! * dissolved: a Gaussian cloud of granules with no solid core.
//!
//! The mask is the exact union of the cell supports, granules included.
//! Pixel `(i, j)` has its centre at `(j + 0.5, i + 0.5)` in scene
//! coordinates, and a pixel belongs to a support when its centre does.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::metrics::Mask;
use crate::rng::{self, derive_seed, derive_seed_indexed};
use crate::tensor::{Element, Tensor};
use crate::training::TileSet;

/// Minimum number of pixels every rendered cell must own.
pub const MIN_CELL_PIXELS: usize = 20;
/// Smallest allowed major semi-axis.
pub const MIN_CELL_RADIUS: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 400;
const SCENE_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Intact,
    Degranulating,
    Dissolved,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Intact, Stage::Degranulating, Stage::Dissolved];
}

/// Generator parameters. Lengths are in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_cells: usize,
    pub max_cells: usize,
    /// Probabilities of intact, degranulating and dissolved cells.
    pub stage_mix: [f64; 3],
    /// Expected fraction of cells in contact with a neighbour.
    pub adjacency: f64,
    /// Range of the major semi-axis.
    pub cell_radius: (f64, f64),
    /// Minor to major axis ratio range.
    pub aspect: (f64, f64),
    pub granule_radius: f64,
    /// Foreground RGB mean, toluidine-blue purple.
    pub cell_color: [f64; 3],
    /// Background RGB mean.
    pub background_color: [f64; 3],
    /// Standard deviation of per-pixel sensor noise, in 8-bit units.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::with_size(1024, 1280)
    }
}

impl SceneConfig {
    /// Defaults with lengths scaled to the shorter image side (1024 is the
    /// reference).
    pub fn with_size(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64 / 1024.0;
        Self {
            height,
            width,
            min_cells: 5,
            max_cells: 7,
            stage_mix: [0.4, 0.3, 0.3],
            adjacency: 0.4,
            cell_radius: ((55.0 * s).max(MIN_CELL_RADIUS), (85.0 * s).max(1.5 * MIN_CELL_RADIUS)),
            aspect: (0.75, 1.0),
            granule_radius: (3.0 * s).max(1.0),
            cell_color: [118.0, 64.0, 150.0],
            background_color: [232.0, 226.0, 236.0],
            noise: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mix_sum: f64 = self.stage_mix.iter().sum();
        if self.stage_mix.iter().any(|p| !(0.0..=1.0).contains(p)) || (mix_sum - 1.0).abs() > 1e-9 {
            return contract_err(format!("stage mix {:?} must be probabilities summing to 1", self.stage_mix));
        }
        if !(0.0..=1.0).contains(&self.adjacency) {
            return contract_err(format!("adjacency fraction {} outside [0, 1]", self.adjacency));
        }
        if self.min_cells == 0 || self.min_cells > self.max_cells {
            return contract_err(format!("cell count range [{}, {}] is empty", self.min_cells, self.max_cells));
        }
        let (lo, hi) = self.cell_radius;
        if !(lo >= MIN_CELL_RADIUS && lo <= hi) || !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1 && self.aspect.1 <= 1.0) {
            return contract_err(format!("cell radius range must start at {MIN_CELL_RADIUS} or more, and ranges must be ordered"));
        }
        if self.granule_radius < 0.75 || self.noise < 0.0 {
            return contract_err("granule radius must be at least 0.75 and noise non-negative");
        }
        if 2.0 * self.extent_factor(Stage::Degranulating) * hi >= self.height.min(self.width) as f64 {
            return contract_err(format!("cells of radius {hi} do not fit a {}x{} scene", self.height, self.width));
        }
        Ok(())
    }

    /// Ratio of a cell's bounding radius to its major semi-axis.
    fn extent_factor(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Intact => 1.0,
            Stage::Degranulating => (1.0 + RAGGED_AMPLITUDE) * HALO_REACH,
            Stage::Dissolved => CLOUD_SIGMAS * CLOUD_SIGMA,
        }
    }
}

const RAGGED_AMPLITUDE: f64 = 0.15;
const HALO_REACH: f64 = 1.35;
const CLOUD_SIGMA: f64 = 0.5;
const CLOUD_SIGMAS: f64 = 2.2;

/// One placed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub stage: Stage,
    /// `(x, y)` in pixels.
    pub center: (f64, f64),
    /// Major and minor semi-axes.
    pub semi_axes: (f64, f64),
    pub angle: f64,
    /// Bounding radius; two cells touch when their bounding circles meet.
    pub extent: f64,
    /// Flat indices of the pixels this cell owns, ascending.
    #[serde(skip)]
    pub support: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub cells: Vec<CellMeta>,
    /// Pairs `(i, j)`, `i < j`, of touching cells.
    pub adjacency: Vec<(usize, usize)>,
}

impl SceneMeta {
    pub fn stages(&self) -> Vec<Stage> {
        self.cells.iter().map(|c| c.stage).collect()
    }

    /// Number of cells that touch at least one neighbour.
    pub fn touching_cells(&self) -> usize {
        self.adjacency.iter().flat_map(|&(a, b)| [a, b]).collect::<BTreeSet<_>>().len()
    }
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return shape_err(format!("rgb image {h}x{w} needs {} bytes, got {}", h * w * 3, data.len()));
        }
        Ok(Self { h, w, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub rgb: RgbImage,
    pub mask: Mask,
    pub meta: SceneMeta,
}

/// Places the cells of a scene without rendering them. `generate_scene`
/// renders exactly this layout.
pub fn plan_scene(seed: u64, cfg: &SceneConfig) -> Result<Vec<CellMeta>> {
    cfg.validate()?;
    let mut r = rng::rng(derive_seed(seed, "layout"));
    for _ in 0..SCENE_ATTEMPTS {
        if let Some(cells) = try_layout(&mut r, cfg) {
            return Ok(cells);
        }
    }
    Err(Error::Data(format!("could not place cells for scene seed {seed} after {SCENE_ATTEMPTS} attempts")))
}

fn try_layout(r: &mut rng::Rng, cfg: &SceneConfig) -> Option<Vec<CellMeta>> {
    let n = r.random_range(cfg.min_cells..=cfg.max_cells);
    let target = cfg.adjacency * n as f64;
    let mut touching = target.floor() as usize + usize::from(r.random_bool(target.fract()));
    if touching == 1 {
        // a lone touching cell has no partner; keep the expectation
        touching = if r.random_bool(0.5) { 0 } else { 2 };
    }
    let margin = (cfg.cell_radius.0 * 0.08).max(1.5);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut cells: Vec<CellMeta> = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = r.random();
        let stage = if u < cfg.stage_mix[0] {
            Stage::Intact
        } else if u < cfg.stage_mix[0] + cfg.stage_mix[1] {
            Stage::Degranulating
        } else {
            Stage::Dissolved
        };
        let major = r.random_range(cfg.cell_radius.0..=cfg.cell_radius.1);
        let minor = major * r.random_range(cfg.aspect.0..=cfg.aspect.1);
        let angle = r.random_range(0.0..PI);
        let extent = major * cfg.extent_factor(stage);
        let joins = i > 0 && i < touching;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (x, y) = if joins {
                let j = r.random_range(0..i);
                let d = (extent + cells[j].extent) * r.random_range(0.6..0.9);
                let t = r.random_range(0.0..2.0 * PI);
                (cells[j].center.0 + d * t.cos(), cells[j].center.1 + d * t.sin())
            } else {
                (r.random_range(extent..=w - extent), r.random_range(extent..=h - extent))
            };
            if x < extent || x > w - extent || y < extent || y > h - extent {
                continue;
            }
            // cells outside the touching group keep a clear gap from everyone
            let ok = cells.iter().enumerate().all(|(k, c)| {
                let d = (c.center.0 - x).hypot(c.center.1 - y);
                if i < touching && k < touching {
                    d > 0.5 * (extent + c.extent)
                } else {
                    d > extent + c.extent + margin
                }
            });
            if ok {
                placed = Some((x, y));
                break;
            }
        }
        let center = placed?;
        cells.push(CellMeta { stage, center, semi_axes: (major, minor), angle, extent, support: Vec::new() });
    }
    Some(cells)
}

fn adjacency(cells: &[CellMeta]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let (a, b) = (&cells[i], &cells[j]);
            if (a.center.0 - b.center.0).hypot(a.center.1 - b.center.1) <= a.extent + b.extent {
                out.push((i, j));
            }
        }
    }
    out
}

/// Float canvas with anti-aliased painting.
struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, idx: usize, color: [f64; 3], alpha: f64) {
        for (c, v) in color.iter().enumerate() {
            let p = &mut self.rgb[idx * 3 + c];
            *p += alpha * (v - *p);
        }
    }

    /// Pixel index range covering `[c - r, c + r]` on one axis.
    fn span(c: f64, r: f64, n: usize) -> std::ops::Range<usize> {
        let lo = (c - r - 1.0).floor().max(0.0) as usize;
        let hi = ((c + r + 1.0).ceil().max(0.0) as usize).min(n);
        lo.min(hi)..hi
    }
}

/// Boundary radius of a ragged cell in units of the ellipse, as a function
/// of the ellipse angle.
struct Outline {
    terms: Vec<(f64, f64, f64)>,
}

impl Outline {
    fn smooth() -> Self {
        Self { terms: Vec::new() }
    }

    fn ragged(r: &mut rng::Rng) -> Self {
        let mut terms: Vec<(f64, f64, f64)> = (3..=8).map(|k| (k as f64, r.random::<f64>(), r.random_range(0.0..2.0 * PI))).collect();
        let total: f64 = terms.iter().map(|t| t.1).sum();
        for t in &mut terms {
            t.1 *= RAGGED_AMPLITUDE / total;
        }
        Self { terms }
    }

    fn radius(&self, theta: f64) -> f64 {
        1.0 + self.terms.iter().map(|&(k, c, phi)| c * (k * theta + phi).cos()).sum::<f64>()
    }
}

struct CellPainter<'a> {
    canvas: &'a mut Canvas,
    owned: BTreeSet<u32>,
}

impl CellPainter<'_> {
    /// Paints an ellipse whose boundary is scaled by `outline`. Coverage is
    /// a one-pixel ramp on the approximate signed distance; the support is
    /// the set of pixel centres inside.
    fn body(&mut self, cell: &CellMeta, outline: &Outline, color: [f64; 3], grain: &mut impl FnMut() -> f64) {
        let (cx, cy) = cell.center;
        let (a, b) = cell.semi_axes;
        let reach = a * (1.0 + RAGGED_AMPLITUDE);
        let (cos, sin) = (cell.angle.cos(), cell.angle.sin());
        let (h, w) = (self.canvas.h, self.canvas.w);
        for i in Canvas::span(cy, reach, h) {
            for j in Canvas::span(cx, reach, w) {
                let (dx, dy) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
                let (u, v) = ((dx * cos + dy * sin) / a, (-dx * sin + dy * cos) / b);
                let rho = u.hypot(v);
                let d = (rho - outline.radius(v.atan2(u))) * b;
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let g = grain();
                    let shade = [color[0] + g, color[1] + g, color[2] + g];
                    self.canvas.blend(i * w + j, shade, alpha);
                }
                if d <= 0.0 {
                    self.owned.insert((i * w + j) as u32);
                }
            }
        }
    }

    fn granule(&mut self, x: f64, y: f64, radius: f64, color: [f64; 3]) {
        let (h, w) = (self.canvas.h, self.canvas.w);
        for i in Canvas::span(y, radius, h) {
            for j in Canvas::span(x, radius, w) {
                let d = (j as f64 + 0.5 - x).hypot(i as f64 + 0.5 - y) - radius;
                let alpha = (0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.canvas.blend(i * w + j, color, alpha);
                }
                if d <= 0.0 {
                    self.owned.insert((i * w + j) as u32);
                }
            }
        }
    }
}

/// Renders a scene. The same `(seed, cfg)` always yields the same bytes.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ImageSample> {
    let mut cells = plan_scene(seed, cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    let mut canvas = Canvas { h, w, rgb: vec![0.0; h * w * 3] };

    let mut r = rng::rng(derive_seed(seed, "background"));
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let period = r.random_range(0.15..0.6) * h.min(w) as f64;
            let t = r.random_range(0.0..PI);
            (2.0 * PI * t.cos() / period, 2.0 * PI * t.sin() / period, r.random_range(0.0..2.0 * PI), r.random_range(1.0..3.0))
        })
        .collect();
    for i in 0..h {
        for j in 0..w {
            let tex: f64 = waves.iter().map(|&(kx, ky, phi, amp)| amp * (kx * j as f64 + ky * i as f64 + phi).sin()).sum();
            for c in 0..3 {
                canvas.rgb[(i * w + j) * 3 + c] = cfg.background_color[c] + tex;
            }
        }
    }

    for (k, cell) in cells.iter_mut().enumerate() {
        let mut r = rng::rng(derive_seed_indexed(seed, "cell", k as u64));
        let jitter = r.random_range(-12.0..12.0);
        let color = [cfg.cell_color[0] + jitter, cfg.cell_color[1] + 0.5 * jitter, cfg.cell_color[2] + jitter];
        let dark = [color[0] - 30.0, color[1] - 20.0, color[2] - 25.0];
        let grain_dist = Normal::new(0.0, 10.0).expect("valid normal");
        let mut grain_rng = rng::rng(derive_seed_indexed(seed, "grain", k as u64));
        let mut grain = || grain_dist.sample(&mut grain_rng);
        let mut painter = CellPainter { canvas: &mut canvas, owned: BTreeSet::new() };
        let (a, b) = cell.semi_axes;
        let gr = cfg.granule_radius;
        match cell.stage {
            Stage::Intact => painter.body(cell, &Outline::smooth(), color, &mut grain),
            Stage::Degranulating => {
                let outline = Outline::ragged(&mut r);
                painter.body(cell, &outline, color, &mut grain);
                let count = (a * b / (gr * gr * 8.0)).round().clamp(6.0, 80.0) as usize;
                for _ in 0..count {
                    let t: f64 = r.random_range(0.0..2.0 * PI);
                    let reach = r.random_range(1.05..HALO_REACH) * outline.radius(t) * a - gr;
                    let (x, y) = (reach * t.cos(), reach * t.sin());
                    let (cos, sin) = (cell.angle.cos(), cell.angle.sin());
                    painter.granule(cell.center.0 + x * cos - y * sin, cell.center.1 + x * sin + y * cos, gr, dark);
                }
            }
            Stage::Dissolved => {
                let count = (a * b / (gr * gr * 4.0)).round().clamp(12.0, 150.0) as usize;
                let (sx, sy) = (Normal::new(0.0, CLOUD_SIGMA * a).expect("valid"), Normal::new(0.0, CLOUD_SIGMA * b).expect("valid"));
                let limit = CLOUD_SIGMAS * CLOUD_SIGMA * a - gr;
                let (cos, sin) = (cell.angle.cos(), cell.angle.sin());
                let mut drawn = 0;
                // sparse clouds keep growing until the cell owns enough pixels
                while drawn < count || (painter.owned.len() < MIN_CELL_PIXELS && drawn < 10 * count) {
                    let (x, y) = (sx.sample(&mut r), sy.sample(&mut r));
                    if x.hypot(y) > limit {
                        continue;
                    }
                    painter.granule(cell.center.0 + x * cos - y * sin, cell.center.1 + x * sin + y * cos, gr, dark);
                    drawn += 1;
                }
            }
        }
        cell.support = painter.owned.into_iter().collect();
        if cell.support.len() < MIN_CELL_PIXELS {
            return Err(Error::Data(format!("cell {k} of scene seed {seed} owns only {} pixels", cell.support.len())));
        }
    }

    let mut mask = Mask::zeros(h, w);
    for cell in &cells {
        for &p in &cell.support {
            mask.data[p as usize] = 1;
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut r = rng::rng(derive_seed(seed, "sensor"));
    let data = canvas
        .rgb
        .iter()
        .map(|&v| {
            let n = if cfg.noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let adjacency = adjacency(&cells);
    Ok(ImageSample { rgb: RgbImage { h, w, data }, mask, meta: SceneMeta { seed, cells, adjacency } })
}

/// One cell of a tile grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub rgb: RgbImage,
    pub mask: Mask,
}

/// Cuts a sample into a row-major grid of non-overlapping square tiles.
pub fn tile(sample: &ImageSample, size: usize) -> Result<Vec<Tile>> {
    let (h, w) = (sample.rgb.h, sample.rgb.w);
    if size == 0 || h % size != 0 || w % size != 0 {
        return shape_err(format!("{h}x{w} image is not divisible into {size}x{size} tiles"));
    }
    let mut out = Vec::with_capacity((h / size) * (w / size));
    for row in 0..h / size {
        for col in 0..w / size {
            let mut rgb = Vec::with_capacity(size * size * 3);
            let mut mask = Vec::with_capacity(size * size);
            for i in row * size..(row + 1) * size {
                let start = i * w + col * size;
                rgb.extend_from_slice(&sample.rgb.data[start * 3..(start + size) * 3]);
                mask.extend_from_slice(&sample.mask.data[start..start + size]);
            }
            out.push(Tile { row, col, rgb: RgbImage { h: size, w: size, data: rgb }, mask: Mask { h: size, w: size, data: mask } });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Shuffles `n` scene indices with `seed` and sends the first
/// `ceil(n * a / (a + b))` to training. Returns the tag of each index.
pub fn split_assignment(n: usize, ratio: (u32, u32), seed: u64) -> Result<Vec<Split>> {
    let (a, b) = (ratio.0 as usize, ratio.1 as usize);
    if a + b == 0 {
        return contract_err("split ratio must have a positive total");
    }
    let n_train = (n * a).div_ceil(a + b);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(derive_seed(seed, "split")));
    let mut tags = vec![Split::Validation; n];
    for &i in &order[..n_train] {
        tags[i] = Split::Train;
    }
    Ok(tags)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub row: usize,
    pub col: usize,
    pub rgb_path: String,
    pub mask_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub adjacency: Vec<(usize, usize)>,
    pub tiles: Vec<TileRecord>,
}

/// Dataset index. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ratio: (u32, u32),
    pub tile_size: usize,
    pub scene: SceneConfig,
    pub scenes: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn tile_count(&self) -> usize {
        self.scenes.iter().map(|s| s.tiles.len()).sum()
    }

    pub fn tiles(&self, split: Split) -> impl Iterator<Item = &TileRecord> {
        self.scenes.iter().flat_map(|s| &s.tiles).filter(move |t| t.split == split)
    }

    /// Re-tags every tile by a fresh scene-level split.
    pub fn split(&mut self, ratio: (u32, u32), seed: u64) -> Result<()> {
        if self.tile_count() < 2 {
            return contract_err("splitting needs at least two tiles");
        }
        let tags = split_assignment(self.scenes.len(), ratio, seed)?;
        for (scene, tag) in self.scenes.iter_mut().zip(tags) {
            for t in &mut scene.tiles {
                t.split = tag;
            }
        }
        self.ratio = ratio;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub seed: u64,
    pub tile_size: usize,
    pub ratio: (u32, u32),
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { scenes: 10, seed: 0, tile_size: 256, ratio: (74, 51), scene: SceneConfig::default() }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates, tiles and splits scenes, writing `scene_XXXX/` directories
/// and `manifest.json` under `root`. Scene `k` uses a seed derived from
/// `(seed, k)`, so outputs are identical across reruns.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    if cfg.scenes == 0 {
        return contract_err("scene count must be positive");
    }
    cfg.scene.validate()?;
    if cfg.tile_size == 0 || cfg.scene.height % cfg.tile_size != 0 || cfg.scene.width % cfg.tile_size != 0 {
        return contract_err(format!("{}x{} scenes are not divisible into {} tiles", cfg.scene.height, cfg.scene.width, cfg.tile_size));
    }
    let tags = split_assignment(cfg.scenes, cfg.ratio, cfg.seed)?;
    std::fs::create_dir_all(root)?;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for (id, tag) in tags.into_iter().enumerate() {
        let seed = derive_seed_indexed(cfg.seed, "scene", id as u64);
        let sample = generate_scene(seed, &cfg.scene)?;
        let dir = format!("scene_{id:04}");
        std::fs::create_dir_all(root.join(&dir))?;
        let mut tiles = Vec::new();
        for t in tile(&sample, cfg.tile_size)? {
            let rgb_path = format!("{dir}/r{}_c{}.ppm", t.row, t.col);
            let mask_path = format!("{dir}/r{}_c{}_mask.pgm", t.row, t.col);
            std::fs::write(root.join(&rgb_path), encode_ppm(&t.rgb))?;
            std::fs::write(root.join(&mask_path), encode_pgm(&t.mask))?;
            tiles.push(TileRecord { row: t.row, col: t.col, rgb_path, mask_path, split: tag });
        }
        scenes.push(SceneRecord { id, seed, stages: sample.meta.stages(), adjacency: sample.meta.adjacency, tiles });
    }
    let manifest = DatasetManifest { seed: cfg.seed, ratio: cfg.ratio, tile_size: cfg.tile_size, scene: cfg.scene.clone(), scenes };
    std::fs::write(root.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}

/// Reads every tile of one split into memory, in manifest order.
pub fn load_split<T: Element>(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<TileSet<T>> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for t in manifest.tiles(split) {
        let rgb = read_ppm(&root.join(&t.rgb_path))?;
        let mask = read_pgm_mask(&root.join(&t.mask_path))?;
        if (rgb.h, rgb.w) != (mask.h, mask.w) {
            return Err(Error::Data(format!("{} and {} differ in size", t.rgb_path, t.mask_path)));
        }
        images.push(normalize(&rgb));
        masks.push(mask);
    }
    TileSet::new(images, masks)
}

/// `(3, H, W)` tensor with every byte divided by 255.
pub fn normalize<T: Element>(rgb: &RgbImage) -> Tensor<T> {
    let plane = rgb.h * rgb.w;
    let mut data = vec![T::zero(); 3 * plane];
    for (p, px) in rgb.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = T::from_f64(f64::from(px[c]) / 255.0);
        }
    }
    Tensor::new(&[3, rgb.h, rgb.w], data).expect("shape matches data")
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Masks are stored as 0/255.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
    out
}

fn parse_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { offset, msg: msg.into() })
}

/// Parses a binary PNM header with the given magic. Returns width, height
/// and the payload offset.
fn pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return parse_err(0, format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maximum value"][k];
            return parse_err(pos, format!("expected {what}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| parse_err(start, "number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return parse_err(pos, format!("maximum value {maxval} is not 255"));
    }
    if w == 0 || h == 0 {
        return parse_err(pos, format!("empty image {w}x{h}"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((w, h, pos + 1)),
        _ => parse_err(pos, "expected one whitespace byte before the payload"),
    }
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    match start.checked_add(len) {
        Some(end) if end <= bytes.len() => Ok(&bytes[start..end]),
        _ => parse_err(bytes.len(), format!("payload truncated: need {len} bytes from offset {start}")),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, start) = pnm_header(bytes, b"P6")?;
    let data = payload(bytes, start, w.saturating_mul(h).saturating_mul(3))?.to_vec();
    RgbImage::new(h, w, data)
}

/// Loads a mask; bytes of 128 and above become 1.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Mask> {
    let (w, h, start) = pnm_header(bytes, b"P5")?;
    let data = payload(bytes, start, w.saturating_mul(h))?.iter().map(|&v| u8::from(v >= 128)).collect();
    Mask::new(h, w, data)
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse { offset, msg: format!("{}: {msg}", path.display()) },
        e => e,
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    with_path(path, decode_ppm(&std::fs::read(path)?))
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    with_path(path, decode_pgm_mask(&std::fs::read(path)?))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img))?)
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm(mask))?)
}

/// Paths of every file a manifest references, relative to its root.
pub fn manifest_files(manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.scenes.iter().flat_map(|s| &s.tiles).flat_map(|t| [PathBuf::from(&t.rgb_path), PathBuf::from(&t.mask_path)]).collect()
}
