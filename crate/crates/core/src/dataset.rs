//! Synthetic moving-shapes sequences with exact flow, and frame-directory loading.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::flow::{estimate_flow_between, read_flo, write_flo, FlowField};
use crate::model::FrameMode;
use crate::tensor::Tensor;

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_HEIGHT: usize = 32;
pub const DEFAULT_INPUT_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceMeta {
    pub id: String,
    pub mode: FrameMode,
}

/// `N` input frames plus the target, with the `N` flows between consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[N+1, C, H, W]`
    pub frames: Tensor,
    /// `[N, 2, H, W]`; `flows[t]` maps frame `t` to frame `t+1`.
    pub flows: Tensor,
    pub meta: SequenceMeta,
}

impl SequenceSample {
    pub fn input_len(&self) -> usize {
        self.frames.shape()[0] - 1
    }

    /// Check shapes, value range and one-hot validity.
    pub fn validate(&self) -> Result<()> {
        let fs = self.frames.shape();
        let ls = self.flows.shape();
        if fs.len() != 4 || fs[0] < 2 || fs[1] != self.meta.mode.channels() {
            bail!(Data, "sample {}: bad frame shape {fs:?}", self.meta.id);
        }
        if ls != [fs[0] - 1, 2, fs[2], fs[3]] {
            bail!(
                Data,
                "sample {}: flows {ls:?} do not match frames {fs:?}",
                self.meta.id
            );
        }
        if self.frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(Data, "sample {}: frame values outside [0, 1]", self.meta.id);
        }
        self.flows.ensure_finite("flow")?;
        if let FrameMode::Semantic { num_classes } = self.meta.mode {
            let plane = fs[2] * fs[3];
            for f in 0..fs[0] {
                let base = f * num_classes * plane;
                for i in 0..plane {
                    let mut ones = 0;
                    for c in 0..num_classes {
                        match self.frames.data()[base + c * plane + i] {
                            1.0 => ones += 1,
                            0.0 => {}
                            _ => bail!(Data, "sample {}: frame {f} is not one-hot", self.meta.id),
                        }
                    }
                    if ones != 1 {
                        bail!(Data, "sample {}: frame {f} is not one-hot", self.meta.id);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    Constant(f64),
    /// Static horizontal ramp from 0.2 to 0.8.
    Gradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub num_shapes: usize,
    /// Kinds cycled over the shapes.
    pub kinds: Vec<ShapeKind>,
    /// Side length (rectangles) or diameter (disks) range, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest speed per axis in px/frame; smaller when the canvas requires it.
    pub max_speed: f64,
    /// Draw speeds from a continuous range instead of integers.
    pub subpixel: bool,
    /// Force every shape to this velocity instead of sampling one.
    pub velocity: Option<(f64, f64)>,
    pub background: Background,
    /// Input length `N`; `generate_synthetic_sequence` emits `N+1` frames.
    pub input_len: usize,
    pub mode: FrameMode,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            num_shapes: 1,
            kinds: vec![ShapeKind::Rectangle],
            min_size: 4,
            max_size: 8,
            max_speed: 2.0,
            subpixel: false,
            velocity: None,
            background: Background::Constant(0.0),
            input_len: DEFAULT_INPUT_LEN,
            mode: FrameMode::Rgb,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    size: f64,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
    label: usize,
}

impl Shape {
    fn covers(&self, t: usize, px: usize, py: usize) -> bool {
        let x = self.x0 + self.vx * t as f64;
        let y = self.y0 + self.vy * t as f64;
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        match self.kind {
            ShapeKind::Rectangle => cx >= x && cx < x + self.size && cy >= y && cy < y + self.size,
            ShapeKind::Disk => {
                let r = self.size / 2.0;
                (cx - x - r).powi(2) + (cy - y - r).powi(2) <= r * r
            }
        }
    }
}

fn sample_axis(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    extent: usize,
    size: usize,
    steps: usize,
    forced: Option<f64>,
) -> Result<(f64, f64)> {
    // Keep at least one pixel of margin on both sides for the whole sequence.
    let room = extent as f64 - 2.0 - size as f64;
    if room < 0.0 {
        bail!(
            Config,
            "shape of size {size} does not fit a {extent}-px axis with a 1-px margin"
        );
    }
    let travel_cap = if steps == 0 {
        f64::INFINITY
    } else {
        room / steps as f64
    };
    let v = match forced {
        Some(v) => {
            if v.abs() > travel_cap {
                bail!(
                    Config,
                    "velocity {v} leaves the canvas within {steps} frames"
                );
            }
            v
        }
        None => {
            let cap = cfg.max_speed.min(travel_cap).max(0.0);
            if cfg.subpixel {
                if cap > 0.0 {
                    rng.gen_range(-cap..=cap)
                } else {
                    0.0
                }
            } else {
                let c = cap.floor() as i64;
                rng.gen_range(-c..=c) as f64
            }
        }
    };
    let travel = v.abs() * steps as f64;
    let lo = 1.0 + if v < 0.0 { travel } else { 0.0 };
    let hi = extent as f64 - 1.0 - size as f64 - if v > 0.0 { travel } else { 0.0 };
    let start = if cfg.subpixel {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    } else {
        let (lo, hi) = (lo.ceil() as i64, hi.floor() as i64);
        rng.gen_range(lo..=hi.max(lo)) as f64
    };
    Ok((start, v))
}

fn validate_synthetic(cfg: &SyntheticConfig, num_frames: usize) -> Result<()> {
    if cfg.width == 0 || cfg.height == 0 {
        bail!(Config, "canvas must be non-empty");
    }
    if num_frames < 1 {
        bail!(Config, "at least one frame is required");
    }
    if cfg.kinds.is_empty() && cfg.num_shapes > 0 {
        bail!(Config, "no shape kinds given");
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size {
        bail!(
            Config,
            "shape size range {}..={} is invalid",
            cfg.min_size,
            cfg.max_size
        );
    }
    if cfg.max_size + 2 > cfg.width.min(cfg.height) {
        bail!(
            Config,
            "shapes up to {} px do not fit a {}x{} canvas",
            cfg.max_size,
            cfg.width,
            cfg.height
        );
    }
    if !(cfg.max_speed >= 0.0 && cfg.max_speed.is_finite()) {
        bail!(Config, "max speed must be a non-negative number");
    }
    if let FrameMode::Semantic { num_classes } = cfg.mode {
        if num_classes < 2 {
            bail!(Config, "semantic mode needs at least two classes");
        }
    }
    if let Background::Constant(v) = cfg.background {
        if !(0.0..=1.0).contains(&v) {
            bail!(Config, "background level must lie in [0, 1]");
        }
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Frames `[C,H,W]` and the exact flows between consecutive frames.
///
/// Flow is expressed on the grid of the earlier frame: a pixel covered by a
/// shape at time `t` carries that shape's velocity, everything else is zero.
/// Later shapes are painted over earlier ones.
pub fn generate_synthetic_frames(
    cfg: &SyntheticConfig,
    num_frames: usize,
) -> Result<(Vec<Tensor>, Vec<FlowField>)> {
    validate_synthetic(cfg, num_frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = num_frames - 1;
    let mut shapes = Vec::with_capacity(cfg.num_shapes);
    for i in 0..cfg.num_shapes {
        let size = rng.gen_range(cfg.min_size..=cfg.max_size);
        let (x0, vx) = sample_axis(
            &mut rng,
            cfg,
            cfg.width,
            size,
            steps,
            cfg.velocity.map(|v| v.0),
        )?;
        let (y0, vy) = sample_axis(
            &mut rng,
            cfg,
            cfg.height,
            size,
            steps,
            cfg.velocity.map(|v| v.1),
        )?;
        let color = [0; 3].map(|_| quantize(rng.gen_range(0.3..=1.0)));
        let label = match cfg.mode {
            FrameMode::Rgb => 0,
            FrameMode::Semantic { num_classes } => 1 + i % (num_classes - 1),
        };
        shapes.push(Shape {
            kind: cfg.kinds[i % cfg.kinds.len()],
            size: size as f64,
            x0,
            y0,
            vx,
            vy,
            color,
            label,
        });
    }

    let (w, h) = (cfg.width, cfg.height);
    let background = |x: usize| match cfg.background {
        Background::Constant(v) => quantize(v),
        Background::Gradient => quantize(0.2 + 0.6 * x as f64 / (w.max(2) - 1) as f64),
    };
    let top = |t: usize, x: usize, y: usize| shapes.iter().rev().find(|s| s.covers(t, x, y));

    let mut frames = Vec::with_capacity(num_frames);
    let mut flows = Vec::with_capacity(steps);
    for t in 0..num_frames {
        let frame = match cfg.mode {
            FrameMode::Rgb => Tensor::from_fn(&[3, h, w], |i| {
                let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                top(t, x, y).map_or_else(|| background(x), |s| s.color[c])
            }),
            FrameMode::Semantic { num_classes } => {
                let labels: Vec<usize> = (0..h * w)
                    .map(|i| top(t, i % w, i / w).map_or(0, |s| s.label))
                    .collect();
                encode_semantic(&labels, h, w, num_classes)?
            }
        };
        frames.push(frame);
        if t < steps {
            let mut u = vec![0f32; h * w];
            let mut v = vec![0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    if let Some(s) = top(t, x, y) {
                        u[y * w + x] = s.vx as f32;
                        v[y * w + x] = s.vy as f32;
                    }
                }
            }
            flows.push(FlowField::new(w, h, u, v)?);
        }
    }
    Ok((frames, flows))
}

/// One `N+1`-frame sample from the generator.
pub fn generate_synthetic_sequence(cfg: &SyntheticConfig) -> Result<SequenceSample> {
    if cfg.input_len < 1 {
        bail!(Config, "input length must be at least 1");
    }
    let (frames, flows) = generate_synthetic_frames(cfg, cfg.input_len + 1)?;
    let meta = SequenceMeta {
        id: format!("synthetic-{}", cfg.seed),
        mode: cfg.mode,
    };
    let mut samples = make_training_tuples(&frames, &flows, cfg.input_len, &meta)?;
    Ok(samples.remove(0))
}

/// Sliding windows of `N+1` frames with their aligned flows.
pub fn make_training_tuples(
    frames: &[Tensor],
    flows: &[FlowField],
    n: usize,
    meta: &SequenceMeta,
) -> Result<Vec<SequenceSample>> {
    if n < 1 {
        bail!(Config, "input length must be at least 1");
    }
    if !frames.is_empty() && flows.len() + 1 != frames.len() {
        bail!(
            Data,
            "{} frames need {} flows, got {}",
            frames.len(),
            frames.len() - 1,
            flows.len()
        );
    }
    if frames.len() < n + 1 {
        return Ok(Vec::new());
    }
    let flow_tensors: Vec<Tensor> = flows.iter().map(FlowField::to_tensor).collect();
    (0..=frames.len() - (n + 1))
        .map(|t| {
            let sample = SequenceSample {
                frames: Tensor::stack(&frames[t..t + n + 1])?,
                flows: Tensor::stack(&flow_tensors[t..t + n])?,
                meta: SequenceMeta {
                    id: format!("{}:{t}", meta.id),
                    mode: meta.mode,
                },
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Bilinear resize of `[C,H,W]` with pixel-center alignment and clamped borders.
pub fn resize_bilinear(image: &Tensor, width: usize, height: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        bail!(Dimension, "resize expects [C,H,W], got {s:?}");
    }
    if width == 0 || height == 0 {
        bail!(Config, "target size must be positive");
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (w, h) == (width, height) {
        return Ok(image.clone());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let p =
                    ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let xs = axis(width, w);
    let ys = axis(height, h);
    let d = image.data();
    Ok(Tensor::from_fn(&[c, height, width], |i| {
        let (ch, y, x) = (i / (height * width), (i / width) % height, i % width);
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// One-hot `[K,H,W]` from a row-major label map.
pub fn encode_semantic(
    labels: &[usize],
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Tensor> {
    if labels.len() != height * width {
        bail!(
            Dimension,
            "label map has {} entries, expected {}",
            labels.len(),
            height * width
        );
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        bail!(Data, "label {bad} out of range for {num_classes} classes");
    }
    let n = height * width;
    let mut data = vec![0.0; num_classes * n];
    for (i, &l) in labels.iter().enumerate() {
        data[l * n + i] = 1.0;
    }
    Tensor::new(&[num_classes, height, width], data)
}

/// Per-pixel argmax of `[K,H,W]`; ties go to the lowest class index.
pub fn decode_semantic(probs: &Tensor) -> Result<Vec<usize>> {
    let s = probs.shape();
    if s.len() != 3 {
        bail!(Dimension, "decode_semantic expects [K,H,W], got {s:?}");
    }
    let n = s[1] * s[2];
    let d = probs.data();
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..s[0] {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3,H,W]` frame as binary PPM (P6).
pub fn write_ppm(frame: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!(Dimension, "PPM output needs [3,H,W], got {s:?}");
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(image_error)
}

/// Write a label map as binary PGM (P5), one gray level per class.
pub fn write_label_pgm(
    labels: &[usize],
    height: usize,
    width: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    if labels.len() != height * width {
        bail!(
            Dimension,
            "label map has {} entries, expected {}",
            labels.len(),
            height * width
        );
    }
    if labels.iter().any(|&l| l > 255) {
        bail!(Data, "labels above 255 cannot be stored in 8 bits");
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([labels[y as usize * width + x as usize] as u8])
    });
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(image_error)
}

fn image_error(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(e) => Error::Io(e),
        e => Error::Data(e.to_string()),
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["ppm", "pgm", "pnm", "pbm", "png"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a directory in lexicographic order.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Decode an image file to `[3,H,W]` in `[0,1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open_image(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Decode a gray image whose pixel values are class labels.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(Vec<usize>, usize, usize)> {
    let img = open_image(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.as_raw().iter().map(|&v| v as usize).collect(), h, w))
}

fn resize_labels(labels: &[usize], h: usize, w: usize, width: usize, height: usize) -> Vec<usize> {
    (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let sy = ((y as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
            labels[sy.min(h - 1) * w + sx.min(w - 1)]
        })
        .collect()
}

/// Load every `stride`-th frame of a directory as `[C,H,W]` tensors.
///
/// RGB frames are bilinear-resized; semantic label maps use nearest neighbour
/// so labels stay valid. `resize_to` is `(width, height)`.
pub fn load_sequence_dir(
    path: impl AsRef<Path>,
    mode: FrameMode,
    resize_to: Option<(usize, usize)>,
    frame_stride: usize,
) -> Result<Vec<Tensor>> {
    if frame_stride == 0 {
        bail!(Config, "frame stride must be at least 1");
    }
    let files = list_frames(&path)?;
    let mut frames = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for f in files.iter().step_by(frame_stride) {
        let frame = match mode {
            FrameMode::Rgb => {
                let t = read_rgb(f)?;
                let (h, w) = (t.shape()[1], t.shape()[2]);
                check_dims(&mut dims, (w, h), f)?;
                match resize_to {
                    Some((rw, rh)) => resize_bilinear(&t, rw, rh)?,
                    None => t,
                }
            }
            FrameMode::Semantic { num_classes } => {
                let (labels, h, w) = read_labels(f)?;
                check_dims(&mut dims, (w, h), f)?;
                let (labels, h, w) = match resize_to {
                    Some((rw, rh)) if (rw, rh) != (w, h) => {
                        (resize_labels(&labels, h, w, rw, rh), rh, rw)
                    }
                    _ => (labels, h, w),
                };
                encode_semantic(&labels, h, w, num_classes)
                    .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?
            }
        };
        frames.push(frame);
    }
    Ok(frames)
}

fn check_dims(dims: &mut Option<(usize, usize)>, got: (usize, usize), f: &Path) -> Result<()> {
    match dims {
        Some(d) if *d != got => bail!(
            Data,
            "{}: frame is {}x{}, earlier frames are {}x{}",
            f.display(),
            got.0,
            got.1,
            d.0,
            d.1
        ),
        _ => *dims = Some(got),
    }
    Ok(())
}

/// Sidecar flows (`<stem>.flo` for every frame but the last), if all are present.
pub fn load_sidecar_flows(dir: impl AsRef<Path>) -> Result<Option<Vec<FlowField>>> {
    let files = list_frames(&dir)?;
    if files.len() < 2 {
        return Ok(None);
    }
    let mut flows = Vec::with_capacity(files.len() - 1);
    for f in &files[..files.len() - 1] {
        let p = f.with_extension("flo");
        if !p.is_file() {
            return Ok(None);
        }
        flows.push(read_flo(p)?);
    }
    Ok(Some(flows))
}

/// A directory of frames: either a single sequence, or one subdirectory per sequence.
pub fn sequence_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if !root.is_dir() {
        bail!(Data, "data directory {} does not exist", root.display());
    }
    if !list_frames(root)?.is_empty() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.retain(|d| list_frames(d).is_ok_and(|f| !f.is_empty()));
    if dirs.is_empty() {
        bail!(Data, "no frames found under {}", root.display());
    }
    Ok(dirs)
}

/// Where training and evaluation flows come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowSupply {
    /// Generator output or `.flo` sidecars.
    GroundTruth,
    HornSchunck {
        smoothness: f64,
        iterations: usize,
    },
}

/// A whole frame sequence with the flows between consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub mode: FrameMode,
    pub frames: Vec<Tensor>,
    pub flows: Vec<FlowField>,
}

impl Sequence {
    pub fn samples(&self, n: usize) -> Result<Vec<SequenceSample>> {
        let meta = SequenceMeta {
            id: self.id.clone(),
            mode: self.mode,
        };
        make_training_tuples(&self.frames, &self.flows, n, &meta)
    }

    /// Replace the flows with Horn–Schunck estimates between consecutive frames.
    pub fn estimate_flows(&mut self, smoothness: f64, iterations: usize) -> Result<()> {
        self.flows = self
            .frames
            .windows(2)
            .map(|p| estimate_flow_between(&p[0], &p[1], smoothness, iterations))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// Load every sequence under `root` (see [`sequence_dirs`]).
///
/// Ground-truth flows come from sidecar files and are only usable at native
/// resolution with stride 1, since they describe consecutive native frames.
pub fn load_sequences(
    root: impl AsRef<Path>,
    mode: FrameMode,
    resize_to: Option<(usize, usize)>,
    frame_stride: usize,
    supply: FlowSupply,
) -> Result<Vec<Sequence>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for dir in sequence_dirs(root)? {
        let frames = load_sequence_dir(&dir, mode, resize_to, frame_stride)?;
        let id = if dir == root {
            dir.file_name()
                .map_or("sequence".into(), |n| n.to_string_lossy().into_owned())
        } else {
            dir.strip_prefix(root)
                .unwrap_or(&dir)
                .to_string_lossy()
                .into_owned()
        };
        let mut seq = Sequence {
            id,
            mode,
            frames,
            flows: Vec::new(),
        };
        match supply {
            FlowSupply::GroundTruth => {
                if frame_stride != 1 {
                    bail!(
                        Data,
                        "{}: sidecar flows cannot be used with frame stride {frame_stride}",
                        dir.display()
                    );
                }
                let flows = load_sidecar_flows(&dir)?.ok_or_else(|| {
                    Error::Data(format!("{}: missing .flo sidecar files", dir.display()))
                })?;
                let (h, w) = (seq.frames[0].shape()[1], seq.frames[0].shape()[2]);
                if flows.iter().any(|f| (f.width(), f.height()) != (w, h)) {
                    bail!(
                        Data,
                        "{}: sidecar flows do not match the {w}x{h} frames",
                        dir.display()
                    );
                }
                seq.flows = flows;
            }
            FlowSupply::HornSchunck {
                smoothness,
                iterations,
            } => seq.estimate_flows(smoothness, iterations)?,
        }
        out.push(seq);
    }
    Ok(out)
}

/// Write frames (and optional flows) in the directory layout the loader reads.
pub fn write_sequence_dir(
    dir: impl AsRef<Path>,
    frames: &[Tensor],
    flows: &[FlowField],
    mode: FrameMode,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        match mode {
            FrameMode::Rgb => write_ppm(f, dir.join(format!("{i:06}.ppm")))?,
            FrameMode::Semantic { .. } => {
                let s = f.shape();
                write_label_pgm(
                    &decode_semantic(f)?,
                    s[1],
                    s[2],
                    dir.join(format!("{i:06}.pgm")),
                )?
            }
        }
    }
    for (i, flow) in flows.iter().enumerate() {
        write_flo(flow, dir.join(format!("{i:06}.flo")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(velocity: (f64, f64)) -> SyntheticConfig {
        SyntheticConfig {
            min_size: 4,
            max_size: 4,
            velocity: Some(velocity),
            background: Background::Constant(0.1),
            seed: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn square_flow_is_exact() {
        let s = generate_synthetic_sequence(&square((1.0, 0.0))).unwrap();
        s.validate().unwrap();
        assert_eq!(s.frames.shape(), &[6, 3, 32, 64]);
        assert_eq!(s.flows.shape(), &[5, 2, 32, 64]);
        let f0 = FlowField::from_tensor(&s.flows.index_first(0).unwrap()).unwrap();
        let moving = f0.u().iter().filter(|&&u| u == 1.0).count();
        assert_eq!(moving, 16);
        assert!(f0.u().iter().all(|&u| u == 0.0 || u == 1.0));
        assert!(f0.v().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_velocity_is_static() {
        let s = generate_synthetic_sequence(&square((0.0, 0.0))).unwrap();
        let first = s.frames.index_first(0).unwrap();
        for t in 1..6 {
            assert_eq!(s.frames.index_first(t).unwrap(), first);
        }
        assert!(s.flows.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = SyntheticConfig {
            num_shapes: 3,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk],
            seed: 42,
            ..SyntheticConfig::default()
        };
        assert_eq!(
            generate_synthetic_sequence(&cfg).unwrap(),
            generate_synthetic_sequence(&cfg).unwrap()
        );
        let other = SyntheticConfig {
            seed: 43,
            ..cfg.clone()
        };
        assert_ne!(
            generate_synthetic_sequence(&cfg).unwrap(),
            generate_synthetic_sequence(&other).unwrap()
        );
    }

    #[test]
    fn infeasible_geometry_is_a_config_error() {
        let cfg = SyntheticConfig {
            width: 8,
            height: 8,
            min_size: 8,
            max_size: 8,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_synthetic_sequence(&cfg),
            Err(Error::Config(_))
        ));
        let fast = SyntheticConfig {
            velocity: Some((30.0, 0.0)),
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_synthetic_sequence(&fast),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn semantic_frames_are_one_hot() {
        let cfg = SyntheticConfig {
            num_shapes: 2,
            mode: FrameMode::Semantic { num_classes: 3 },
            ..SyntheticConfig::default()
        };
        let s = generate_synthetic_sequence(&cfg).unwrap();
        s.validate().unwrap();
        assert_eq!(s.frames.shape()[1], 3);
    }

    #[test]
    fn tuple_counts() {
        let frames: Vec<Tensor> = (0..10)
            .map(|i| Tensor::full(&[3, 2, 2], i as f64 / 10.0))
            .collect();
        let flows: Vec<FlowField> = (0..9).map(|_| FlowField::zeros(2, 2)).collect();
        let meta = SequenceMeta {
            id: "s".into(),
            mode: FrameMode::Rgb,
        };
        let tuples = make_training_tuples(&frames, &flows, 5, &meta).unwrap();
        assert_eq!(tuples.len(), 5);
        assert_eq!(tuples[2].frames.index_first(0).unwrap(), frames[2]);
        assert_eq!(tuples[2].frames.index_first(5).unwrap(), frames[7]);
        assert_eq!(
            make_training_tuples(&frames[..6], &flows[..5], 5, &meta)
                .unwrap()
                .len(),
            1
        );
        assert!(make_training_tuples(&frames[..5], &flows[..4], 5, &meta)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn resize_cases() {
        let img = Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.37).sin());
        assert_eq!(resize_bilinear(&img, 5, 3).unwrap(), img);
        let checker = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&checker, 1, 1).unwrap().data(), &[0.5]);
        let constant = Tensor::full(&[3, 4, 4], 0.625);
        let up = resize_bilinear(&constant, 9, 7).unwrap();
        let back = resize_bilinear(&up, 4, 4).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn semantic_round_trip_and_errors() {
        let labels = vec![0, 2, 1, 1, 0, 2];
        let t = encode_semantic(&labels, 2, 3, 3).unwrap();
        assert_eq!(decode_semantic(&t).unwrap(), labels);
        let zeros = encode_semantic(&[0; 4], 2, 2, 2).unwrap();
        assert_eq!(&zeros.data()[..4], &[1.0; 4]);
        assert!(matches!(
            encode_semantic(&[3], 1, 1, 3),
            Err(Error::Data(_))
        ));
        let tie = Tensor::full(&[3, 1, 1], 0.5);
        assert_eq!(decode_semantic(&tie).unwrap(), vec![0]);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            num_shapes: 2,
            seed: 9,
            ..SyntheticConfig::default()
        };
        let (frames, flows) = generate_synthetic_frames(&cfg, 10).unwrap();
        write_sequence_dir(dir.path(), &frames, &flows, FrameMode::Rgb).unwrap();
        let loaded = load_sequence_dir(dir.path(), FrameMode::Rgb, None, 1).unwrap();
        assert_eq!(loaded, frames);
        assert_eq!(load_sidecar_flows(dir.path()).unwrap().unwrap(), flows);
        assert_eq!(
            load_sequence_dir(dir.path(), FrameMode::Rgb, None, 2)
                .unwrap()
                .len(),
            5
        );
        let same = load_sequence_dir(dir.path(), FrameMode::Rgb, Some((64, 32)), 1).unwrap();
        assert_eq!(same, frames);

        let sem = SyntheticConfig {
            mode: FrameMode::Semantic { num_classes: 4 },
            ..cfg
        };
        let (frames, flows) = generate_synthetic_frames(&sem, 4).unwrap();
        let d2 = dir.path().join("sem");
        write_sequence_dir(&d2, &frames, &flows, sem.mode).unwrap();
        assert_eq!(load_sequence_dir(&d2, sem.mode, None, 1).unwrap(), frames);
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_ppm(&Tensor::zeros(&[3, 4, 4]), dir.path().join("a.ppm")).unwrap();
        write_ppm(&Tensor::zeros(&[3, 4, 5]), dir.path().join("b.ppm")).unwrap();
        assert!(matches!(
            load_sequence_dir(dir.path(), FrameMode::Rgb, None, 1),
            Err(Error::Data(_))
        ));
        fs::write(dir.path().join("c.ppm"), b"garbage").unwrap();
        assert!(matches!(
            load_sequence_dir(dir.path(), FrameMode::Rgb, None, 1),
            Err(Error::Data(_))
        ));
    }
}
