//! Synthetic labelled video: coloured shapes translating over a smooth
//! background, plus splits, augmentation and the on-disk layout.

use std::fs;
use std::path::Path;

use cellsearch_tensor::{Tensor, IGNORE_LABEL};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    /// Background plus shape classes.
    pub classes: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_velocity: i32,
    /// Chance that a shape is placed overlapping an earlier one.
    pub occlusion_prob: f64,
    pub noise_std: f64,
    pub min_shape: usize,
    pub max_shape: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_sequences: 200,
            seq_len: 3,
            height: 64,
            width: 64,
            classes: 5,
            max_velocity: 3,
            occlusion_prob: 0.3,
            noise_std: 0.03,
            min_shape: 10,
            max_shape: 24,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > 255 {
            return fail(format!("classes = {} must be in [2, 255]", self.classes));
        }
        if self.seq_len < 2 {
            return fail(format!("seq_len = {} must be at least 2", self.seq_len));
        }
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return fail(format!(
                "frame size {}x{} must be a positive multiple of 32",
                self.height, self.width
            ));
        }
        if self.n_sequences == 0 {
            return fail("n_sequences must be positive".into());
        }
        if self.max_velocity < 0 || !(0.0..=1.0).contains(&self.occlusion_prob) || self.noise_std < 0.0 {
            return fail("velocity, occlusion probability and noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Bar,
}

/// One moving object. Position is the top-left of its bounding box at frame 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: u8,
    pub kind: ShapeKind,
    pub top: i32,
    pub left: i32,
    pub height: i32,
    pub width: i32,
    /// `(dx, dy)` in pixels per frame.
    pub velocity: (i32, i32),
    pub color: [f64; 3],
}

impl ShapeSpec {
    fn covers(&self, y: i32, x: i32, t: i32) -> bool {
        let top = self.top + self.velocity.1 * t;
        let left = self.left + self.velocity.0 * t;
        let (dy, dx) = (y - top, x - left);
        if dy < 0 || dx < 0 || dy >= self.height || dx >= self.width {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle | ShapeKind::Bar => true,
            ShapeKind::Disk => {
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let ny = (dy as f64 + 0.5 - ry) / ry;
                let nx = (dx as f64 + 0.5 - rx) / rx;
                ny * ny + nx * nx <= 1.0
            }
        }
    }
}

/// Smooth background: a sum of low-frequency sinusoids per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: [f64; 3],
    /// `(channel, amplitude, fy, fx, phase)`.
    pub waves: Vec<(usize, f64, f64, f64, f64)>,
}

impl Background {
    fn value(&self, c: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let mut v = self.base[c];
        for &(ch, a, fy, fx, ph) in &self.waves {
            if ch == c {
                let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + ph;
                v += a * arg.sin();
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    /// Drawn in order; later shapes occlude earlier ones.
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub scene: SceneSpec,
    /// `(3, H, W)` planar, quantized to bytes.
    pub frames: Vec<Vec<u8>>,
    /// `(H, W)` class maps.
    pub labels: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub sequences: Vec<Sequence>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Draws a scene at every frame. Labels are noise-free; images get
/// additive Gaussian noise from `rng`.
pub fn render<R: Rng + ?Sized>(
    scene: &SceneSpec,
    h: usize,
    w: usize,
    seq_len: usize,
    noise_std: f64,
    rng: &mut R,
) -> Sequence {
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut frames = Vec::with_capacity(seq_len);
    let mut labels = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        let mut label = vec![0u8; h * w];
        let mut img = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut color = None;
                for s in &scene.shapes {
                    if s.covers(y as i32, x as i32, t as i32) {
                        label[y * w + x] = s.class;
                        color = Some(s.color);
                    }
                }
                for c in 0..3 {
                    let v = match color {
                        Some(col) => col[c],
                        None => scene.background.value(c, y, x, h, w),
                    };
                    let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                    img[(c * h + y) * w + x] = quantize(v + n);
                }
            }
        }
        frames.push(img);
        labels.push(label);
    }
    Sequence {
        scene: scene.clone(),
        frames,
        labels,
    }
}

/// Fixed, well-separated colour per class with a small per-object jitter.
fn class_color<R: Rng + ?Sized>(class: u8, classes: usize, rng: &mut R) -> [f64; 3] {
    let hue = class as f64 / (classes - 1).max(1) as f64;
    let mut c = [0.0; 3];
    for (k, v) in c.iter_mut().enumerate() {
        let phase = std::f64::consts::TAU * (hue + k as f64 / 3.0);
        *v = (0.5 + 0.45 * phase.cos() + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    c
}

fn random_scene<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Result<SceneSpec> {
    let (h, w) = (cfg.height as i32, cfg.width as i32);
    let max_side = cfg.max_shape.min(cfg.height).min(cfg.width) as i32;
    if cfg.min_shape == 0 || cfg.min_shape as i32 > max_side {
        return Err(Error::Data(format!(
            "shapes of {}..={} pixels never fit a {}x{} frame",
            cfg.min_shape, cfg.max_shape, cfg.height, cfg.width
        )));
    }
    let mut waves = Vec::new();
    for c in 0..3 {
        for _ in 0..2 {
            waves.push((
                c,
                rng.random_range(0.03..0.12),
                rng.random_range(0.2..1.5),
                rng.random_range(0.2..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            ));
        }
    }
    let background = Background {
        base: [
            rng.random_range(0.3..0.6),
            rng.random_range(0.3..0.6),
            rng.random_range(0.3..0.6),
        ],
        waves,
    };
    let mut pool: Vec<u8> = (1..cfg.classes as u8).collect();
    pool.shuffle(rng);
    let n_shapes = rng.random_range(1..=pool.len().min(4));
    let min = cfg.min_shape as i32;
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(n_shapes);
    for &class in &pool[..n_shapes] {
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Bar,
        };
        let (sh, sw) = match kind {
            ShapeKind::Bar => {
                let long = rng.random_range(min..=max_side);
                let thin = (long / 4).max(2);
                if rng.random_bool(0.5) {
                    (long, thin)
                } else {
                    (thin, long)
                }
            }
            _ => (rng.random_range(min..=max_side), rng.random_range(min..=max_side)),
        };
        let (top, left) = match shapes.last() {
            Some(prev) if rng.random_bool(cfg.occlusion_prob) => (
                (prev.top + prev.height / 2 - sh / 2).clamp(0, h - sh),
                (prev.left + prev.width / 2 - sw / 2).clamp(0, w - sw),
            ),
            _ => (rng.random_range(0..=h - sh), rng.random_range(0..=w - sw)),
        };
        let v = cfg.max_velocity;
        shapes.push(ShapeSpec {
            class,
            kind,
            top,
            left,
            height: sh,
            width: sw,
            velocity: (rng.random_range(-v..=v), rng.random_range(-v..=v)),
            color: class_color(class, cfg.classes, rng),
        });
    }
    Ok(SceneSpec { background, shapes })
}

const MAX_ATTEMPTS: u64 = 16;

/// Builds the dataset. Sequence `i` draws from its own stream of the seed,
/// so sequences are independent of generation order.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut sequences = Vec::with_capacity(cfg.n_sequences);
        for i in 0..cfg.n_sequences {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let scene = random_scene(cfg, &mut rng)?;
            sequences.push(render(&scene, cfg.height, cfg.width, cfg.seq_len, cfg.noise_std, &mut rng));
        }
        let ds = Dataset {
            config: cfg.clone(),
            sequences,
        };
        if ds.missing_classes(&(0..cfg.n_sequences).collect::<Vec<_>>()).is_empty() {
            return Ok(ds);
        }
    }
    Err(Error::Data(format!(
        "no seed among {MAX_ATTEMPTS} attempts shows every class; add sequences"
    )))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Shape classes that appear in none of the given sequences.
    pub fn missing_classes(&self, indices: &[usize]) -> Vec<u8> {
        let mut seen = vec![false; self.config.classes];
        for &i in indices {
            for l in &self.sequences[i].labels {
                for &v in l {
                    seen[v as usize] = true;
                }
            }
        }
        (1..self.config.classes as u8).filter(|&c| !seen[c as usize]).collect()
    }

    /// Per-channel pixel mean over all frames, in [0,1].
    pub fn channel_mean(&self) -> [f64; 3] {
        let (h, w) = (self.config.height, self.config.width);
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for s in &self.sequences {
            for f in &s.frames {
                for (c, acc) in sum.iter_mut().enumerate() {
                    *acc += f[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>();
                }
                n += h * w;
            }
        }
        sum.map(|s| s / (n as f64 * 255.0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (h, w) = (self.config.height as u32, self.config.width as u32);
        let mut scenes = Vec::with_capacity(self.len());
        for (i, seq) in self.sequences.iter().enumerate() {
            let sd = dir.join(format!("seq_{i:04}"));
            fs::create_dir_all(&sd)?;
            for (t, (frame, label)) in seq.frames.iter().zip(&seq.labels).enumerate() {
                let hw = (h * w) as usize;
                let mut rgb = Vec::with_capacity(3 * hw);
                for p in 0..hw {
                    rgb.extend([frame[p], frame[hw + p], frame[2 * hw + p]]);
                }
                let img = RgbImage::from_raw(w, h, rgb).expect("sized buffer");
                img.save(sd.join(format!("frame_{t:02}.ppm"))).map_err(|e| image_err(&sd, e))?;
                let lab = GrayImage::from_raw(w, h, label.clone()).expect("sized buffer");
                lab.save(sd.join(format!("label_{t:02}.pgm"))).map_err(|e| image_err(&sd, e))?;
            }
            scenes.push(seq.scene.clone());
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            scenes,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingArtifact(mpath));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: mpath,
                reason: format!("manifest version {}", manifest.version),
            });
        }
        let cfg = manifest.config;
        let (h, w) = (cfg.height, cfg.width);
        let mut sequences = Vec::with_capacity(manifest.scenes.len());
        for (i, scene) in manifest.scenes.into_iter().enumerate() {
            let sd = dir.join(format!("seq_{i:04}"));
            let mut frames = Vec::with_capacity(cfg.seq_len);
            let mut labels = Vec::with_capacity(cfg.seq_len);
            for t in 0..cfg.seq_len {
                let fp = sd.join(format!("frame_{t:02}.ppm"));
                let img = image::open(&fp).map_err(|e| image_err(&fp, e))?.into_rgb8();
                let lp = sd.join(format!("label_{t:02}.pgm"));
                let lab = image::open(&lp).map_err(|e| image_err(&lp, e))?.into_luma8();
                if img.dimensions() != (w as u32, h as u32) || lab.dimensions() != (w as u32, h as u32) {
                    return Err(Error::Format {
                        path: fp,
                        reason: "frame size disagrees with manifest".into(),
                    });
                }
                let raw = img.into_raw();
                let mut planar = vec![0u8; 3 * h * w];
                for p in 0..h * w {
                    for c in 0..3 {
                        planar[c * h * w + p] = raw[3 * p + c];
                    }
                }
                frames.push(planar);
                labels.push(lab.into_raw());
            }
            sequences.push(Sequence {
                scene,
                frames,
                labels,
            });
        }
        Ok(Self {
            config: cfg,
            sequences,
        })
    }
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: DatasetConfig,
    scenes: Vec<SceneSpec>,
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Sequence-level partition. The meta splits are drawn from `train` only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub meta_train: Vec<usize>,
    pub meta_val: Vec<usize>,
}

pub fn split(n: usize, train_frac: f64, meta_val_frac: f64, seed: u64) -> Result<Splits> {
    for f in [train_frac, meta_val_frac] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split fraction {f} outside (0,1)")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_train = (n as f64 * train_frac).round() as usize;
    let val = idx.split_off(n_train.min(n));
    let mut train = idx;
    let mut shuffled = train.clone();
    shuffled.shuffle(&mut rng);
    let n_meta_val = (train.len() as f64 * meta_val_frac).round() as usize;
    let meta_train = shuffled.split_off(n_meta_val.min(shuffled.len()));
    let meta_val = shuffled;
    let parts = [("train", &train), ("val", &val), ("meta-train", &meta_train), ("meta-val", &meta_val)];
    for (name, p) in parts {
        if p.is_empty() {
            return Err(Error::Data(format!("{name} split of {n} sequences is empty")));
        }
    }
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    let mut meta_train = meta_train;
    meta_train.sort_unstable();
    let mut meta_val = meta_val;
    meta_val.sort_unstable();
    Ok(Splits {
        train,
        val,
        meta_train,
        meta_val,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub scale_range: (f64, f64),
    pub shuffle: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            crop: 64,
            scale_range: (1.0, 1.0),
            shuffle: true,
        }
    }
}

/// Scale followed by a crop window, shared by every frame of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    pub scale: f64,
    pub offset_y: usize,
    pub offset_x: usize,
}

impl AugParams {
    pub const IDENTITY: AugParams = AugParams {
        scale: 1.0,
        offset_y: 0,
        offset_x: 0,
    };

    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, crop: usize, range: (f64, f64), rng: &mut R) -> Self {
        let scale = if range.0 < range.1 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        };
        let (sh, sw) = scaled_size(h, w, scale);
        let offset_y = if sh > crop { rng.random_range(0..=sh - crop) } else { 0 };
        let offset_x = if sw > crop { rng.random_range(0..=sw - crop) } else { 0 };
        Self {
            scale,
            offset_y,
            offset_x,
        }
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Output pixel `(i, j)` reads the scaled frame at `(i + oy, j + ox)`, i.e.
/// the source at that position divided by the scale. Positions past the
/// scaled frame are padding: `pad` for images, the ignore label for labels.
pub fn augment_frame(
    frame: &[u8],
    label: &[u8],
    h: usize,
    w: usize,
    crop: usize,
    aug: AugParams,
    pad: [f64; 3],
) -> (Vec<f64>, Vec<u8>) {
    let (sh, sw) = scaled_size(h, w, aug.scale);
    let mut img = vec![0.0; 3 * crop * crop];
    let mut lab = vec![IGNORE_LABEL; crop * crop];
    let identity = aug.scale == 1.0;
    for i in 0..crop {
        for j in 0..crop {
            let (yy, xx) = (i + aug.offset_y, j + aug.offset_x);
            let o = i * crop + j;
            if yy >= sh || xx >= sw {
                for c in 0..3 {
                    img[c * crop * crop + o] = pad[c];
                }
                continue;
            }
            if identity {
                lab[o] = label[yy * w + xx];
                for c in 0..3 {
                    img[c * crop * crop + o] = frame[(c * h + yy) * w + xx] as f64 / 255.0;
                }
                continue;
            }
            let sy = (yy as f64 / aug.scale).min((h - 1) as f64);
            let sx = (xx as f64 / aug.scale).min((w - 1) as f64);
            let ny = (sy.round() as usize).min(h - 1);
            let nx = (sx.round() as usize).min(w - 1);
            lab[o] = label[ny * w + nx];
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..3 {
                let p = |y: usize, x: usize| frame[(c * h + y) * w + x] as f64 / 255.0;
                img[c * crop * crop + o] = (1.0 - ly) * ((1.0 - lx) * p(y0, x0) + lx * p(y0, x1))
                    + ly * ((1.0 - lx) * p(y1, x0) + lx * p(y1, x1));
            }
        }
    }
    (img, lab)
}

/// A batch of clips: `frames[t]` is `(N, 3, crop, crop)`, `labels[t]` the
/// matching `N * crop * crop` label bytes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sequences: Vec<usize>,
    pub frames: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
}

/// Batches over `indices` for one epoch. With `shuffle` the order depends on
/// `seed`; augmentation parameters are drawn once per sequence.
pub fn batches(ds: &Dataset, indices: &[usize], cfg: &BatchConfig, seed: u64) -> Result<Vec<Batch>> {
    let (h, w) = (ds.config.height, ds.config.width);
    let max_scale = cfg.scale_range.1.max(cfg.scale_range.0);
    if cfg.batch_size == 0 || cfg.crop == 0 || cfg.crop > scaled_size(h, w, max_scale).0.max(h) {
        return Err(Error::Config(format!(
            "crop {} / batch size {} invalid for {h}x{w} frames",
            cfg.crop, cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = indices.to_vec();
    if cfg.shuffle {
        order.shuffle(&mut rng);
    }
    let pad = ds.channel_mean();
    let seq_len = ds.config.seq_len;
    let mut out = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let n = chunk.len();
        let mut frames: Vec<Vec<f64>> = vec![Vec::with_capacity(n * 3 * cfg.crop * cfg.crop); seq_len];
        let mut labels: Vec<Vec<u8>> = vec![Vec::with_capacity(n * cfg.crop * cfg.crop); seq_len];
        for &s in chunk {
            let aug = AugParams::sample(h, w, cfg.crop, cfg.scale_range, &mut rng);
            let seq = &ds.sequences[s];
            for t in 0..seq_len {
                let (img, lab) = augment_frame(&seq.frames[t], &seq.labels[t], h, w, cfg.crop, aug, pad);
                frames[t].extend(img);
                labels[t].extend(lab);
            }
        }
        out.push(Batch {
            sequences: chunk.to_vec(),
            frames: frames
                .into_iter()
                .map(|f| Tensor::from_vec(&[n, 3, cfg.crop, cfg.crop], f))
                .collect::<std::result::Result<_, _>>()?,
            labels,
        });
    }
    Ok(out)
}
