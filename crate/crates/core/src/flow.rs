//! Optical-flow fields: Horn–Schunck estimation, Middlebury `.flo` I/O,
//! color-wheel visualization and backward warping.
//!
//! Convention: `flow(x, y) = (u, v)` means the pixel at `(x, y)` in the
//! reference frame appears at `(x + u, y + v)` in the next frame, so
//! `warp_by_flow(next, flow)` reconstructs the reference frame.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Result};
use crate::tensor::{kernels, Tensor};

/// Float32 tag at the start of every `.flo` file ("PIEH" in ASCII).
pub const FLO_MAGIC: f32 = 202021.25;

pub const DEFAULT_SMOOTHNESS: f64 = 0.01;
pub const DEFAULT_ITERATIONS: usize = 200;

/// Per-pixel displacement field, row-major, in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Dimension, "flow field must be at least 1x1");
        }
        if u.len() != width * height || v.len() != width * height {
            bail!(
                Dimension,
                "flow {width}x{height} needs {} values per component, got {} and {}",
                width * height,
                u.len(),
                v.len()
            );
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            bail!(Numeric, "flow field contains non-finite values");
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::uniform(width, height, 0.0, 0.0)
    }

    pub fn uniform(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// `[2, H, W]` tensor, channel 0 = u, channel 1 = v.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.u.iter().chain(&self.v).map(|&x| x as f64).collect();
        Tensor::new(&[2, self.height, self.width], data).expect("flow tensor shape")
    }

    /// Inverse of [`FlowField::to_tensor`]; values are rounded to `f32`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [2, h, w] | [1, 2, h, w] => (*h, *w),
            _ => bail!(Dimension, "flow tensor must be [2,H,W], got {s:?}"),
        };
        let (u, v) = t.data().split_at(h * w);
        Self::new(
            w,
            h,
            u.iter().map(|&x| x as f32).collect(),
            v.iter().map(|&x| x as f32).collect(),
        )
    }

    /// Euclidean endpoint error at every pixel.
    pub fn endpoint_errors(&self, other: &FlowField) -> Result<Vec<f64>> {
        if self.width != other.width || self.height != other.height {
            bail!(Dimension, "flow fields differ in size");
        }
        Ok((0..self.u.len())
            .map(|i| {
                let du = self.u[i] as f64 - other.u[i] as f64;
                let dv = self.v[i] as f64 - other.v[i] as f64;
                du.hypot(dv)
            })
            .collect())
    }

    pub fn mean_endpoint_error(&self, other: &FlowField) -> Result<f64> {
        let e = self.endpoint_errors(other)?;
        Ok(e.iter().sum::<f64>() / e.len() as f64)
    }
}

/// Luma with weights 0.299 / 0.587 / 0.114. Accepts `[3,H,W]`.
pub fn rgb_to_grayscale(frame: &Tensor) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!(Dimension, "rgb_to_grayscale expects [3,H,W], got {s:?}");
    }
    let n = s[1] * s[2];
    let d = frame.data();
    let data = (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect();
    Tensor::new(&[s[1], s[2]], data)
}

struct Derivatives {
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
}

/// Derivatives over the 2×2×2 cube of forward differences, border-replicated.
fn cube_derivatives(a: &[f64], b: &[f64], w: usize, h: usize) -> Derivatives {
    let n = w * h;
    let mut d = Derivatives {
        ix: vec![0.0; n],
        iy: vec![0.0; n],
        it: vec![0.0; n],
    };
    for y in 0..h {
        let y1 = (y + 1).min(h - 1);
        for x in 0..w {
            let x1 = (x + 1).min(w - 1);
            let (p00, p01, p10, p11) = (y * w + x, y * w + x1, y1 * w + x, y1 * w + x1);
            let i = p00;
            d.ix[i] = 0.25
                * ((a[p01] - a[p00]) + (a[p11] - a[p10]) + (b[p01] - b[p00]) + (b[p11] - b[p10]));
            d.iy[i] = 0.25
                * ((a[p10] - a[p00]) + (a[p11] - a[p01]) + (b[p10] - b[p00]) + (b[p11] - b[p01]));
            d.it[i] = 0.25
                * ((b[p00] - a[p00]) + (b[p01] - a[p01]) + (b[p10] - a[p10]) + (b[p11] - a[p11]));
        }
    }
    d
}

/// Neighbor offsets and weights of the smoothness average (weights sum to 1).
const NEIGHBORS: [(isize, isize, f64); 8] = [
    (-1, 0, 1.0 / 6.0),
    (1, 0, 1.0 / 6.0),
    (0, -1, 1.0 / 6.0),
    (0, 1, 1.0 / 6.0),
    (-1, -1, 1.0 / 12.0),
    (1, -1, 1.0 / 12.0),
    (-1, 1, 1.0 / 12.0),
    (1, 1, 1.0 / 12.0),
];

fn clamp_offset(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

fn neighbor_average(f: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for &(dx, dy, wt) in &NEIGHBORS {
                s += wt * f[clamp_offset(y, dy, h) * w + clamp_offset(x, dx, w)];
            }
            out[y * w + x] = s;
        }
    }
}

/// Horn–Schunck objective: squared brightness-constancy residual plus
/// `smoothness/2` times the weighted squared differences to every neighbor.
fn energy(d: &Derivatives, u: &[f64], v: &[f64], w: usize, h: usize, smoothness: f64) -> f64 {
    let mut data = 0.0;
    let mut smooth = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = d.ix[i] * u[i] + d.iy[i] * v[i] + d.it[i];
            data += r * r;
            for &(dx, dy, wt) in &NEIGHBORS {
                let j = clamp_offset(y, dy, h) * w + clamp_offset(x, dx, w);
                smooth += wt * ((u[i] - u[j]).powi(2) + (v[i] - v[j]).powi(2));
            }
        }
    }
    data + 0.5 * smoothness * smooth
}

/// Result of [`horn_schunck`]: the flow plus the objective after each iteration.
#[derive(Clone, Debug)]
pub struct HornSchunckRun {
    pub flow: FlowField,
    pub energies: Vec<f64>,
}

fn validate_pair(
    a: &Tensor,
    b: &Tensor,
    smoothness: f64,
    iterations: usize,
) -> Result<(usize, usize)> {
    if a.ndim() != 2 || a.shape() != b.shape() {
        bail!(
            Dimension,
            "flow estimation needs two equal [H,W] frames, got {:?} and {:?}",
            a.shape(),
            b.shape()
        );
    }
    a.ensure_finite("frame_a")?;
    b.ensure_finite("frame_b")?;
    if !(smoothness > 0.0) || !smoothness.is_finite() {
        bail!(Contract, "smoothness must be positive, got {smoothness}");
    }
    if iterations == 0 {
        bail!(Contract, "at least one Horn-Schunck iteration is required");
    }
    Ok((a.shape()[1], a.shape()[0]))
}

fn run_horn_schunck(
    a: &Tensor,
    b: &Tensor,
    smoothness: f64,
    iterations: usize,
    track_energy: bool,
) -> Result<HornSchunckRun> {
    let (w, h) = validate_pair(a, b, smoothness, iterations)?;
    let d = cube_derivatives(a.data(), b.data(), w, h);
    let n = w * h;
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut ubar, mut vbar) = (vec![0.0; n], vec![0.0; n]);
    let mut energies = Vec::new();
    for _ in 0..iterations {
        neighbor_average(&u, w, h, &mut ubar);
        neighbor_average(&v, w, h, &mut vbar);
        for i in 0..n {
            let (ix, iy, it) = (d.ix[i], d.iy[i], d.it[i]);
            let p = (ix * ubar[i] + iy * vbar[i] + it) / (smoothness + ix * ix + iy * iy);
            u[i] = ubar[i] - ix * p;
            v[i] = vbar[i] - iy * p;
        }
        if track_energy {
            energies.push(energy(&d, &u, &v, w, h, smoothness));
        }
    }
    let flow = FlowField::new(
        w,
        h,
        u.iter().map(|&x| x as f32).collect(),
        v.iter().map(|&x| x as f32).collect(),
    )?;
    Ok(HornSchunckRun { flow, energies })
}

/// Dense Horn–Schunck flow from `frame_a` to `frame_b` (grayscale `[H,W]`, values in `[0,1]`).
///
/// Jacobi iterations from zero flow; `smoothness` is the regularization weight α².
pub fn estimate_flow_horn_schunck(
    frame_a: &Tensor,
    frame_b: &Tensor,
    smoothness: f64,
    iterations: usize,
) -> Result<FlowField> {
    Ok(run_horn_schunck(frame_a, frame_b, smoothness, iterations, false)?.flow)
}

/// [`estimate_flow_horn_schunck`] that also records the objective per iteration.
pub fn horn_schunck_with_energy(
    frame_a: &Tensor,
    frame_b: &Tensor,
    smoothness: f64,
    iterations: usize,
) -> Result<HornSchunckRun> {
    run_horn_schunck(frame_a, frame_b, smoothness, iterations, true)
}

/// Flow between two frames of any channel count (`[C,H,W]` or `[H,W]`).
/// RGB frames go through luma; other multi-channel frames are channel-averaged.
pub fn estimate_flow_between(
    a: &Tensor,
    b: &Tensor,
    smoothness: f64,
    iterations: usize,
) -> Result<FlowField> {
    let gray = |t: &Tensor| -> Result<Tensor> {
        match t.shape() {
            [_, _] => Ok(t.clone()),
            [3, _, _] => rgb_to_grayscale(t),
            [c, h, w] => {
                let n = h * w;
                let d = t.data();
                let data = (0..n)
                    .map(|i| (0..*c).map(|k| d[k * n + i]).sum::<f64>() / *c as f64)
                    .collect();
                Tensor::new(&[*h, *w], data)
            }
            s => bail!(Dimension, "cannot estimate flow on frame of shape {s:?}"),
        }
    };
    estimate_flow_horn_schunck(&gray(a)?, &gray(b)?, smoothness, iterations)
}

/// Serialize in Middlebury `.flo` layout (little-endian).
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        bail!(Format, "flo file truncated: {} bytes", bytes.len());
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        bail!(Format, "bad flo magic {:?}", &bytes[..4]);
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        bail!(Format, "invalid flo dimensions {w}x{h}");
    }
    let n = w as usize * h as usize;
    let expected = 12 + 8 * n;
    if bytes.len() != expected {
        bail!(
            Format,
            "flo payload for {w}x{h} needs {expected} bytes, file has {}",
            bytes.len()
        );
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        u.push(f32::from_le_bytes(word(12 + 8 * i)));
        v.push(f32::from_le_bytes(word(16 + 8 * i)));
    }
    FlowField::new(w as usize, h as usize, u, v).map_err(|e| crate::Error::Format(e.to_string()))
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_flo(flow))?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ColorScale {
    /// Normalize by the largest magnitude in the field.
    Auto,
    /// Magnitudes at or above this value are fully saturated.
    Max(f64),
}

fn hsv_to_rgb(hue_deg: f64, sat: f64, val: f64) -> [f64; 3] {
    let c = val * sat;
    let hp = hue_deg / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Color-wheel rendering: hue encodes direction (0° = +x), saturation encodes
/// magnitude relative to the scale, zero flow is white. Returns `[3,H,W]` in `[0,1]`.
pub fn flow_to_color(flow: &FlowField, scale: ColorScale) -> Tensor {
    let n = flow.u.len();
    let max = match scale {
        ColorScale::Max(m) => m,
        ColorScale::Auto => flow
            .u
            .iter()
            .zip(&flow.v)
            .map(|(&u, &v)| (u as f64).hypot(v as f64))
            .fold(0.0, f64::max),
    };
    let max = if max > 0.0 { max } else { 1.0 };
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let (u, v) = (flow.u[i] as f64, flow.v[i] as f64);
        let sat = (u.hypot(v) / max).min(1.0);
        let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
        let rgb = hsv_to_rgb(hue, sat, 1.0);
        for (c, value) in rgb.iter().enumerate() {
            data[c * n + i] = value.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, flow.height, flow.width], data).expect("color image shape")
}

/// Pixel grid plus flow, as a `[1,2,H,W]` sampling-coordinate tensor.
pub fn flow_coordinates(flow: &FlowField) -> Tensor {
    let (w, h) = (flow.width, flow.height);
    let n = w * h;
    let mut data = vec![0.0; 2 * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            data[i] = x as f64 + flow.u[i] as f64;
            data[n + i] = y as f64 + flow.v[i] as f64;
        }
    }
    Tensor::new(&[1, 2, h, w], data).expect("coords shape")
}

/// Backward warp: `out(x, y) = frame(x + u, y + v)`, bilinear with border clamp.
pub fn warp_by_flow(frame: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[1] != flow.height || s[2] != flow.width {
        bail!(
            Dimension,
            "frame {s:?} does not match {}x{} flow",
            flow.width,
            flow.height
        );
    }
    let image = frame.clone().reshape(&[1, s[0], s[1], s[2]])?;
    kernels::bilinear_sample(&image, &flow_coordinates(flow))?.reshape(s)
}
