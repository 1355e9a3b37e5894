//! Synthetic dense scenes with overlapping objects, plus the on-disk format.
//!
//! Objects are filled ellipses whose intensity falls off from the centre,
//! drawn back to front so later objects occlude earlier ones. Optional
//! clutter (thin bright bars) gives the proposal generator class-agnostic
//! distractors. Only the object count is meant for training; the object
//! centres are kept for evaluation.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LoocError, Result};
use crate::exec::{self, ExecMode};
use crate::grid::Image;

/// Continuous pixel coordinate; pixel `(i, j)` spans `[i, i+1) x [j, j+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub fn new(row: f64, col: f64) -> Self {
        Point { row, col }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.row >= 0.0 && self.col >= 0.0 && self.row < height as f64 && self.col < width as f64
    }

    /// The pixel containing this point.
    pub fn pixel(&self) -> (usize, usize) {
        (self.row.floor() as usize, self.col.floor() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Largest major/minor axis ratio of an object.
    pub aspect_max: f64,
    /// Maximum fraction of an object that later objects may occlude.
    pub overlap: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub background: f64,
    /// Amplitude of the smooth illumination ramp across the image.
    pub illumination: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub distractor_min: usize,
    pub distractor_max: usize,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            channels: 1,
            count_min: 1,
            count_max: 12,
            radius_min: 3.0,
            radius_max: 6.0,
            aspect_max: 1.5,
            overlap: 0.5,
            noise: 0.03,
            background: 0.15,
            illumination: 0.1,
            intensity_min: 0.6,
            intensity_max: 0.95,
            distractor_min: 0,
            distractor_max: 0,
            placement_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(LoocError::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return fail("image size must be non-zero");
        }
        if self.channels != 1 && self.channels != 3 {
            return fail("channels must be 1 or 3");
        }
        if self.count_min > self.count_max {
            return fail("count_min exceeds count_max");
        }
        if self.distractor_min > self.distractor_max {
            return fail("distractor_min exceeds distractor_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return fail("radius range must satisfy 0 < radius_min <= radius_max");
        }
        if self.aspect_max < 1.0 {
            return fail("aspect_max must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return fail("overlap must lie in [0, 1]");
        }
        if self.noise < 0.0 || self.illumination < 0.0 {
            return fail("noise and illumination must be non-negative");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.background)
            || !unit.contains(&self.intensity_min)
            || !unit.contains(&self.intensity_max)
            || self.intensity_min > self.intensity_max
        {
            return fail("intensities must lie in [0, 1] with min <= max");
        }
        if self.placement_attempts == 0 {
            return fail("placement_attempts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub image: Image,
    pub gt_points: Vec<Point>,
    pub count: usize,
}

impl Scene {
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| LoocError::Format {
            scene_id: self.scene_id.clone(),
            msg,
        };
        if self.count != self.gt_points.len() {
            return Err(bad(format!(
                "count {} does not match {} points",
                self.count,
                self.gt_points.len()
            )));
        }
        let (h, w) = self.image.shape();
        if let Some(p) = self.gt_points.iter().find(|p| !p.in_bounds(h, w)) {
            return Err(bad(format!("point ({}, {}) outside {h}x{w}", p.row, p.col)));
        }
        if self.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("pixel value outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub split_name: SplitName,
    pub seed: u64,
    pub scenes: Vec<Scene>,
}

impl DatasetSplit {
    pub fn counts(&self) -> Vec<usize> {
        self.scenes.iter().map(|s| s.count).collect()
    }

    pub fn counts_only(&self) -> CountsOnlySplit {
        CountsOnlySplit {
            split_name: self.split_name,
            scenes: self
                .scenes
                .iter()
                .map(|s| CountedImage {
                    scene_id: s.scene_id.clone(),
                    image: s.image.clone(),
                    count: s.count,
                })
                .collect(),
        }
    }
}

/// A training image that carries its object count and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct CountedImage {
    pub scene_id: String,
    pub image: Image,
    pub count: usize,
}

/// The only dataset view the weakly supervised trainers accept. It cannot
/// hold ground-truth points.
#[derive(Debug, Clone, PartialEq)]
pub struct CountsOnlySplit {
    pub split_name: SplitName,
    pub scenes: Vec<CountedImage>,
}

impl CountsOnlySplit {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius; `< 1` inside the ellipse.
    fn radius_at(&self, row: usize, col: usize) -> f64 {
        let dy = row as f64 + 0.5 - self.cy;
        let dx = col as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    fn pixels(&self, height: usize, width: usize) -> Vec<usize> {
        let reach = self.a.max(self.b).ceil() as i64 + 1;
        let r0 = (self.cy.floor() as i64 - reach).max(0) as usize;
        let r1 = ((self.cy.floor() as i64 + reach + 1).max(0) as usize).min(height);
        let c0 = (self.cx.floor() as i64 - reach).max(0) as usize;
        let c1 = ((self.cx.floor() as i64 + reach + 1).max(0) as usize).min(width);
        let mut out = Vec::new();
        for row in r0..r1 {
            for col in c0..c1 {
                if self.radius_at(row, col) < 1.0 {
                    out.push(row * width + col);
                }
            }
        }
        out
    }
}

fn sample_ellipse(cfg: &SceneConfig, rng: &mut ChaCha8Rng, margin: f64) -> Ellipse {
    let a = rng.gen_range(cfg.radius_min..=cfg.radius_max);
    let b = a / rng.gen_range(1.0..=cfg.aspect_max);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let my = margin.min(cfg.height as f64 / 2.0);
    let mx = margin.min(cfg.width as f64 / 2.0);
    let cy = sample_coord(rng, my, cfg.height as f64 - my);
    let cx = sample_coord(rng, mx, cfg.width as f64 - mx);
    Ellipse {
        cy,
        cx,
        a,
        b,
        cos: theta.cos(),
        sin: theta.sin(),
    }
}

fn sample_coord(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Places `count` objects honoring the occlusion allowance where possible.
/// When no attempt satisfies it, the least-occluding attempt is used so the
/// requested count is always rendered.
fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng, count: usize) -> Vec<(Ellipse, Vec<usize>)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut visible: Vec<usize> = Vec::new();
    let mut placed: Vec<(Ellipse, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, Ellipse, Vec<usize>)> = None;
        for _ in 0..cfg.placement_attempts {
            let e = sample_ellipse(cfg, rng, 2.0);
            let pix = e.pixels(h, w);
            if pix.is_empty() {
                continue;
            }
            let mut covered = vec![0usize; placed.len()];
            for &p in &pix {
                if let Some(o) = owner[p] {
                    covered[o] += 1;
                }
            }
            let worst = placed
                .iter()
                .enumerate()
                .map(|(i, (_, full))| 1.0 - (visible[i] - covered[i]) as f64 / full.len() as f64)
                .fold(0.0, f64::max);
            if best.as_ref().map_or(true, |(b, _, _)| worst < *b) {
                let ok = worst <= cfg.overlap;
                best = Some((worst, e, pix));
                if ok {
                    break;
                }
            }
        }
        let (_, e, pix) = best.unwrap_or_else(|| {
            // The centre pixel always lies inside the ellipse.
            let e = sample_ellipse(cfg, rng, 2.0);
            let centre = e.cy.floor() as usize * w + e.cx.floor() as usize;
            (0.0, e, vec![centre])
        });
        for &p in &pix {
            if let Some(o) = owner[p] {
                visible[o] -= 1;
            }
            owner[p] = Some(placed.len());
        }
        visible.push(pix.len());
        placed.push((e, pix));
    }
    placed
}

/// Renders one scene. Pure in `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    generate_scene_with_id(config, seed, format!("scene_{seed}"))
}

fn generate_scene_with_id(config: &SceneConfig, seed: u64, scene_id: String) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, ch) = (config.height, config.width, config.channels);
    let count = rng.gen_range(config.count_min..=config.count_max);
    let distractors = rng.gen_range(config.distractor_min..=config.distractor_max);

    let mut canvas = vec![0.0f64; h * w * ch];
    let ramp_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ry, rx) = (ramp_dir.sin(), ramp_dir.cos());
    for row in 0..h {
        for col in 0..w {
            let t = ((row as f64 + 0.5) / h as f64 - 0.5) * ry + ((col as f64 + 0.5) / w as f64 - 0.5) * rx;
            let v = config.background + config.illumination * t;
            for c in 0..ch {
                canvas[(row * w + col) * ch + c] = v;
            }
        }
    }

    let tint = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        if ch == 1 {
            vec![1.0]
        } else {
            (0..ch).map(|_| rng.gen_range(0.8..=1.0)).collect()
        }
    };

    for _ in 0..distractors {
        let len = rng.gen_range(6.0..=14.0f64);
        let half_width = rng.gen_range(0.5..=1.0f64);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let cy = sample_coord(&mut rng, 0.0, h as f64);
        let cx = sample_coord(&mut rng, 0.0, w as f64);
        let peak = rng.gen_range(config.intensity_min..=config.intensity_max);
        let colour = tint(&mut rng);
        let (s, c) = theta.sin_cos();
        for row in 0..h {
            for col in 0..w {
                let dy = row as f64 + 0.5 - cy;
                let dx = col as f64 + 0.5 - cx;
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                if along.abs() <= len / 2.0 && across.abs() <= half_width {
                    for k in 0..ch {
                        canvas[(row * w + col) * ch + k] = peak * colour[k];
                    }
                }
            }
        }
    }

    let objects = place_objects(config, &mut rng, count);
    let mut gt_points = Vec::with_capacity(count);
    for (e, pix) in &objects {
        let peak = rng.gen_range(config.intensity_min..=config.intensity_max);
        let colour = tint(&mut rng);
        for &p in pix {
            let d = e.radius_at(p / w, p % w);
            let v = peak * (1.0 - 0.5 * d * d);
            for k in 0..ch {
                canvas[p * ch + k] = v * colour[k];
            }
        }
        gt_points.push(Point::new(e.cy, e.cx));
    }

    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).expect("noise std validated");
        for v in canvas.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let mut image = Image::new(h, w, ch);
    for (dst, &v) in image.data.iter_mut().zip(&canvas) {
        *dst = quantize(v);
    }
    let scene = Scene {
        scene_id,
        image,
        gt_points,
        count,
    };
    scene.check_invariants()?;
    Ok(scene)
}

/// Snap to the 8-bit grid so PNG storage is lossless.
fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    q as f32 / 255.0
}

fn scene_seed(split_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = split_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_split(
    config: &SceneConfig,
    split_name: SplitName,
    n_scenes: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<DatasetSplit> {
    config.validate()?;
    let scenes = exec::map_range(mode, n_scenes, |i| {
        let id = format!("{}_{i:05}", split_name.as_str());
        generate_scene_with_id(config, scene_seed(seed, i), id)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        split_name,
        seed,
        scenes,
    })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    scene_id: String,
    count: usize,
    points: Vec<Point>,
    image: String,
    height: usize,
    width: usize,
    channels: usize,
}

/// Manifest record as seen by the counts-only loader: the points field is
/// skipped without being materialized.
#[derive(Debug, Deserialize)]
struct CountsRecord {
    scene_id: String,
    count: usize,
    image: String,
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitMeta {
    split_name: SplitName,
    seed: u64,
    scenes: usize,
}

/// Writes `images/<scene_id>.png`, `manifest.jsonl` and `split.json` into
/// `dir`; returns the manifest path.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| LoocError::io(&images, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = String::new();
    for scene in &split.scenes {
        scene.check_invariants()?;
        let rel = format!("images/{}.png", scene.scene_id);
        write_png(&scene.image, &dir.join(&rel))?;
        let rec = ManifestRecord {
            scene_id: scene.scene_id.clone(),
            count: scene.count,
            points: scene.gt_points.clone(),
            image: rel,
            height: scene.image.height,
            width: scene.image.width,
            channels: scene.image.channels,
        };
        manifest.push_str(&serde_json::to_string(&rec).map_err(|e| LoocError::json(&manifest_path, e))?);
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest).map_err(|e| LoocError::io(&manifest_path, e))?;
    let meta = SplitMeta {
        split_name: split.split_name,
        seed: split.seed,
        scenes: split.scenes.len(),
    };
    let meta_path = dir.join(SPLIT_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| LoocError::json(&meta_path, e))?;
    fs::write(&meta_path, text).map_err(|e| LoocError::io(&meta_path, e))?;
    Ok(manifest_path)
}

fn read_meta(dir: &Path) -> Result<SplitMeta> {
    let path = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LoocError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LoocError::json(&path, e))
}

fn manifest_lines(dir: &Path) -> Result<Vec<(usize, String)>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| LoocError::Format {
        scene_id: "<manifest>".into(),
        msg: format!("cannot open {}: {e}", path.display()),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LoocError::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn scene_id_hint(line: &str, lineno: usize) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("scene_id").and_then(|s| s.as_str()).map(str::to_string))
        .unwrap_or_else(|| format!("<line {lineno}>"))
}

fn load_image_checked(dir: &Path, rel: &str, scene_id: &str, shape: (usize, usize, usize)) -> Result<Image> {
    let image = read_png(&dir.join(rel)).map_err(|e| LoocError::Format {
        scene_id: scene_id.to_string(),
        msg: e.to_string(),
    })?;
    if (image.height, image.width, image.channels) != shape {
        return Err(LoocError::Format {
            scene_id: scene_id.to_string(),
            msg: format!(
                "image is {}x{}x{}, manifest says {}x{}x{}",
                image.height, image.width, image.channels, shape.0, shape.1, shape.2
            ),
        });
    }
    Ok(image)
}

/// Reads a full split, including ground-truth points. Evaluation only.
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let meta = read_meta(dir)?;
    let mut scenes = Vec::new();
    for (lineno, line) in manifest_lines(dir)? {
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| LoocError::Format {
            scene_id: scene_id_hint(&line, lineno),
            msg: format!("malformed record: {e}"),
        })?;
        let image = load_image_checked(dir, &rec.image, &rec.scene_id, (rec.height, rec.width, rec.channels))?;
        let scene = Scene {
            scene_id: rec.scene_id,
            image,
            gt_points: rec.points,
            count: rec.count,
        };
        scene.check_invariants()?;
        scenes.push(scene);
    }
    check_unique_ids(scenes.iter().map(|s| s.scene_id.as_str()))?;
    Ok(DatasetSplit {
        split_name: meta.split_name,
        seed: meta.seed,
        scenes,
    })
}

/// Reads images and counts only. Point annotations in the manifest are
/// skipped, so this loader works on manifests with the points removed.
pub fn read_counts_only(dir: &Path) -> Result<CountsOnlySplit> {
    let meta = read_meta(dir)?;
    let mut scenes = Vec::new();
    for (lineno, line) in manifest_lines(dir)? {
        let rec: CountsRecord = serde_json::from_str(&line).map_err(|e| LoocError::Format {
            scene_id: scene_id_hint(&line, lineno),
            msg: format!("malformed record: {e}"),
        })?;
        let image = load_image_checked(dir, &rec.image, &rec.scene_id, (rec.height, rec.width, rec.channels))?;
        scenes.push(CountedImage {
            scene_id: rec.scene_id,
            image,
            count: rec.count,
        });
    }
    check_unique_ids(scenes.iter().map(|s| s.scene_id.as_str()))?;
    Ok(CountsOnlySplit {
        split_name: meta.split_name,
        scenes,
    })
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(LoocError::Format {
                scene_id: id.to_string(),
                msg: "duplicate scene_id".into(),
            });
        }
    }
    Ok(())
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (image.width as u32, image.height as u32);
    let res = match image.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(LoocError::Contract(format!("cannot encode {c}-channel image"))),
    };
    match res {
        Some(r) => r.map_err(|source| LoocError::Image {
            path: path.to_path_buf(),
            source,
        }),
        None => Err(LoocError::Contract("image buffer size mismatch".into())),
    }
}

pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| LoocError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (channels, raw, w, h) = match dynimg {
        image::DynamicImage::ImageLuma8(g) => (1, g.as_raw().clone(), g.width(), g.height()),
        other => {
            let rgb = other.to_rgb8();
            (3, rgb.as_raw().clone(), rgb.width(), rgb.height())
        }
    };
    Ok(Image {
        height: h as usize,
        width: w as usize,
        channels,
        data: raw.into_iter().map(|b| b as f32 / 255.0).collect(),
    })
}

/// Writes a probability map as an 8-bit grayscale PNG.
pub fn write_map_png(values: &crate::grid::Grid<f32>, path: &Path) -> Result<()> {
    let image = Image {
        height: values.height(),
        width: values.width(),
        channels: 1,
        data: values.as_slice().to_vec(),
    };
    write_png(&image, path)
}
