//! Synthetic video corpus: moving-shape clips with templated captions, plus
//! frame-directory I/O.
//!
//! A clip is a solid shape (circle, square, or triangle) translating at a
//! constant velocity over a solid background, rendered with 3×3 supersampled
//! coverage so edges carry sub-pixel information. Frames are written as
//! zero-padded PNG files next to a JSON manifest.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::autoencoder::VideoClip;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

pub const FRAME_FILE_PREFIX: &str = "frame_";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_INDEX_FILE: &str = "corpus.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    White,
    Orange,
}

impl ColorName {
    pub fn name(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Magenta => "magenta",
            ColorName::Cyan => "cyan",
            ColorName::White => "white",
            ColorName::Orange => "orange",
        }
    }

    pub fn rgb(&self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.90, 0.15, 0.15],
            ColorName::Green => [0.15, 0.80, 0.20],
            ColorName::Blue => [0.15, 0.25, 0.90],
            ColorName::Yellow => [0.95, 0.90, 0.15],
            ColorName::Magenta => [0.85, 0.20, 0.80],
            ColorName::Cyan => [0.15, 0.85, 0.85],
            ColorName::White => [0.95, 0.95, 0.95],
            ColorName::Orange => [0.95, 0.55, 0.10],
        }
    }

    pub const FOREGROUND: [ColorName; 8] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Magenta,
        ColorName::Cyan,
        ColorName::White,
        ColorName::Orange,
    ];
}

/// Background shade (kept dark so foreground shapes have contrast).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Black,
    DarkGray,
    Navy,
}

impl Background {
    pub fn rgb(&self) -> [f32; 3] {
        match self {
            Background::Black => [0.02, 0.02, 0.02],
            Background::DarkGray => [0.15, 0.15, 0.15],
            Background::Navy => [0.05, 0.05, 0.20],
        }
    }

    pub const ALL: [Background; 3] = [Background::Black, Background::DarkGray, Background::Navy];
}

/// Everything needed to render one clip deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecipe {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub background: Background,
    /// Pixels per frame, (dx, dy).
    pub motion: (f64, f64),
    /// Center of the shape in frame 0, (x, y).
    pub start: (f64, f64),
    /// Half-extent of the shape in pixels.
    pub half_size: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub seed: u64,
}

impl ClipRecipe {
    /// Caption rendered from the template
    /// `"a {color} {shape} moving {direction}"`.
    pub fn caption(&self) -> String {
        let (dx, dy) = self.motion;
        if dx == 0.0 && dy == 0.0 {
            return format!("a {} {}", self.color.name(), self.shape.name());
        }
        format!(
            "a {} {} moving {}",
            self.color.name(),
            self.shape.name(),
            direction_word(dx, dy)
        )
    }

    fn center_at(&self, frame: usize) -> (f64, f64) {
        (
            self.start.0 + self.motion.0 * frame as f64,
            self.start.1 + self.motion.1 * frame as f64,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 1 || self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "degenerate recipe: {}x{}x{} frames",
                self.frames, self.height, self.width
            )));
        }
        if self.half_size <= 0.0 {
            return Err(Error::Config("shape half_size must be positive".into()));
        }
        for f in [0, self.frames - 1] {
            let (cx, cy) = self.center_at(f);
            if cx - self.half_size < 0.0
                || cy - self.half_size < 0.0
                || cx + self.half_size > self.width as f64
                || cy + self.half_size > self.height as f64
            {
                return Err(Error::Range(format!(
                    "trajectory leaves the frame at frame {f}: center ({cx:.1}, {cy:.1})"
                )));
            }
        }
        Ok(())
    }
}

fn direction_word(dx: f64, dy: f64) -> &'static str {
    let horiz = if dx > 0.0 {
        Some("right")
    } else if dx < 0.0 {
        Some("left")
    } else {
        None
    };
    let vert = if dy > 0.0 {
        Some("down")
    } else if dy < 0.0 {
        Some("up")
    } else {
        None
    };
    match (vert, horiz) {
        (Some("up"), None) => "up",
        (Some("down"), None) => "down",
        (None, Some("left")) => "left",
        (None, Some("right")) => "right",
        (Some("up"), Some("left")) => "up and left",
        (Some("up"), Some("right")) => "up and right",
        (Some("down"), Some("left")) => "down and left",
        (Some("down"), Some("right")) => "down and right",
        _ => unreachable!("zero motion handled by caller"),
    }
}

fn inside(shape: ShapeKind, cx: f64, cy: f64, hs: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= hs * hs,
        ShapeKind::Square => dx.abs() <= hs && dy.abs() <= hs,
        ShapeKind::Triangle => {
            // Apex at (cx, cy - hs), base from (cx - hs, cy + hs) to (cx + hs, cy + hs).
            if dy < -hs || dy > hs {
                return false;
            }
            let half_width_here = (dy + hs) / 2.0;
            dx.abs() <= half_width_here
        }
    }
}

/// Render the clip described by `recipe`.
pub fn gen_clip(recipe: &ClipRecipe) -> Result<VideoClip> {
    recipe.validate()?;
    let bg = recipe.background.rgb();
    let fg = recipe.color.rgb();
    let ss = 3; // supersampling grid per pixel side
    let mut frames = Array4::<f32>::zeros((recipe.frames, recipe.height, recipe.width, 3));
    for f in 0..recipe.frames {
        let (cx, cy) = recipe.center_at(f);
        for y in 0..recipe.height {
            for x in 0..recipe.width {
                let mut cover = 0u32;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        if inside(recipe.shape, cx, cy, recipe.half_size, px, py) {
                            cover += 1;
                        }
                    }
                }
                let a = cover as f32 / (ss * ss) as f32;
                for c in 0..3 {
                    frames[[f, y, x, c]] = bg[c] + a * (fg[c] - bg[c]);
                }
            }
        }
    }
    Ok(VideoClip::new(frames, recipe.caption(), recipe.fps))
}

/// On-disk description of one clip directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub caption: String,
    pub fps: u32,
    pub frame_count: usize,
    pub frame_files: Vec<String>,
    pub recipe: Option<ClipRecipe>,
}

/// Write frames as 8-bit PNGs plus a manifest.
pub fn save_clip(clip: &VideoClip, dir: &Path, recipe: Option<&ClipRecipe>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (f, h, w, _) = clip.frames.dim();
    let mut frame_files = Vec::with_capacity(f);
    for fi in 0..f {
        let name = format!("{FRAME_FILE_PREFIX}{fi:05}.png");
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(clip.frames[[fi, y, x, 0]]),
                    quantize(clip.frames[[fi, y, x, 1]]),
                    quantize(clip.frames[[fi, y, x, 2]]),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(dir.join(&name))?;
        frame_files.push(name);
    }
    let manifest = ClipManifest {
        caption: clip.caption.clone(),
        fps: clip.fps,
        frame_count: f,
        frame_files,
        recipe: recipe.cloned(),
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load a clip directory written by [`save_clip`].
pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let manifest: ClipManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.frame_files.len() != manifest.frame_count {
        return Err(Error::Corpus(format!(
            "manifest lists {} frame files but frame_count = {}",
            manifest.frame_files.len(),
            manifest.frame_count
        )));
    }
    for (i, name) in manifest.frame_files.iter().enumerate() {
        let expected = format!("{FRAME_FILE_PREFIX}{i:05}.png");
        if name != &expected {
            return Err(Error::Corpus(format!(
                "frame file {i} is {name}, expected contiguous {expected}"
            )));
        }
    }
    let mut frames: Option<Array4<f32>> = None;
    for (i, name) in manifest.frame_files.iter().enumerate() {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Corpus(format!("missing frame file {name}")));
        }
        let img = image::open(&path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let arr =
            frames.get_or_insert_with(|| Array4::<f32>::zeros((manifest.frame_count, h, w, 3)));
        if arr.shape()[1] != h || arr.shape()[2] != w {
            return Err(Error::Corpus(format!(
                "frame {name} size {w}x{h} differs from first frame"
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    arr[[i, y, x, c]] = px.0[c] as f32 / 255.0;
                }
            }
        }
    }
    let frames = frames.ok_or_else(|| Error::Corpus("clip has no frames".into()))?;
    Ok(VideoClip::new(frames, manifest.caption, manifest.fps))
}

/// Corpus generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clips: 64,
            frames: 25,
            height: 64,
            width: 64,
            fps: 24,
            seed: 7,
        }
    }
}

/// Index written next to the clip directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusIndex {
    pub clip_dirs: Vec<String>,
    pub config: CorpusConfig,
}

/// Draw a valid recipe for the given canvas.
pub fn sample_recipe(cfg: &CorpusConfig, index: usize, rng: &mut SeededRng) -> ClipRecipe {
    let shape = ShapeKind::ALL[index % ShapeKind::ALL.len()];
    let color = ColorName::FOREGROUND[(index / ShapeKind::ALL.len()) % ColorName::FOREGROUND.len()];
    let background = Background::ALL[index % Background::ALL.len()];
    let min_side = cfg.height.min(cfg.width) as f64;
    let half_size = min_side * rng.uniform_in(0.12, 0.2);
    // Pick a speed, then a start position that keeps the whole trajectory
    // inside the frame.
    let span = (cfg.frames - 1) as f64;
    let max_speed = ((min_side / 2.0 - half_size) / span).max(0.25);
    let speed = rng.uniform_in(0.25, max_speed.min(2.5));
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let (mut dx, mut dy) = (speed * angle.cos(), speed * angle.sin());
    // Snap near-zero components so captions use clean direction words.
    if dx.abs() < 0.05 {
        dx = 0.0;
    }
    if dy.abs() < 0.05 {
        dy = 0.0;
    }
    if dx == 0.0 && dy == 0.0 {
        dx = speed.max(0.25);
    }
    let margin = half_size + 1.0;
    let x_lo = margin + (-dx * span).max(0.0);
    let x_hi = cfg.width as f64 - margin - (dx * span).max(0.0);
    let y_lo = margin + (-dy * span).max(0.0);
    let y_hi = cfg.height as f64 - margin - (dy * span).max(0.0);
    let start = (rng.uniform_in(x_lo, x_hi), rng.uniform_in(y_lo, y_hi));
    ClipRecipe {
        shape,
        color,
        background,
        motion: (dx, dy),
        start,
        half_size,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        fps: cfg.fps,
        seed: derive_seed(cfg.seed, index as u64),
    }
}

/// Generate `cfg.clips` clip directories under `out_dir` plus a corpus index.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusIndex> {
    if cfg.clips < 1 {
        return Err(Error::Config("corpus needs at least one clip".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut clip_dirs = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let mut rng = SeededRng::new(derive_seed(cfg.seed, i as u64));
        let recipe = sample_recipe(cfg, i, &mut rng);
        let clip = gen_clip(&recipe)?;
        let name = format!("clip_{i:04}");
        save_clip(&clip, &out_dir.join(&name), Some(&recipe))?;
        clip_dirs.push(name);
    }
    let index = CorpusIndex {
        clip_dirs,
        config: cfg.clone(),
    };
    std::fs::write(
        out_dir.join(CORPUS_INDEX_FILE),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(index)
}

/// Load every clip listed in a corpus index.
pub fn load_corpus(dir: &Path) -> Result<(CorpusIndex, Vec<VideoClip>)> {
    let index: CorpusIndex =
        serde_json::from_str(&std::fs::read_to_string(dir.join(CORPUS_INDEX_FILE))?)?;
    let mut clips = Vec::with_capacity(index.clip_dirs.len());
    for name in &index.clip_dirs {
        clips.push(load_clip(&dir.join(name))?);
    }
    Ok((index, clips))
}

/// Paths of all clip directories in a corpus.
pub fn corpus_clip_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let index: CorpusIndex =
        serde_json::from_str(&std::fs::read_to_string(dir.join(CORPUS_INDEX_FILE))?)?;
    Ok(index.clip_dirs.iter().map(|n| dir.join(n)).collect())
}
