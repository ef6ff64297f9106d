//! Forward and backward kernels operating on raw buffers.
//!
//! Every kernel runs in a fixed loop order so results are bit-reproducible.
//! 2D convolution is expressed as a 3D convolution with a unit depth axis.

use super::Tensor;
use crate::error::{bail, Result};

/// Row-major GEMM: `c = a · b (+ c when accumulate)`, `a` is `m×k`, `b` is `k×n`.
/// `trans_a`/`trans_b` read the operand as stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths above cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a (up to) 3-spatial-axis convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    /// Validate shapes. `input` is `[B, C, D, H, W]`, `weight` is `[O, C, kD, kH, kW]`.
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            bail!(
                Dimension,
                "convolution expects 5-d input/weight, got {input:?} and {weight:?}"
            );
        }
        if input[1] != weight[1] {
            bail!(
                Dimension,
                "input has {} channels but weight expects {}",
                input[1],
                weight[1]
            );
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let k = weight[2 + a];
            if stride[a] == 0 {
                bail!(Contract, "stride must be at least 1");
            }
            let padded = input[2 + a] + 2 * padding[a];
            if padded < k {
                bail!(
                    Dimension,
                    "kernel {k} larger than padded extent {padded} on spatial axis {a}"
                );
            }
            output[a] = (padded - k) / stride[a] + 1;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            input: [input[2], input[3], input[4]],
            kernel: [weight[2], weight[3], weight[4]],
            stride,
            padding,
            output,
        })
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn output_shape(&self) -> [usize; 5] {
        [
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }
}

/// Range of output positions whose input index `o*stride + k - pad` lies in `[0, extent)`.
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // largest o with o*stride + k - pad < extent  =>  o*stride < extent + pad - k
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z0, z1) = valid_range(od, d, kz, sd, pd);
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, sh, ph);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(ow, w, kx, sw, pw);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(0.0);
                    for oz in z0..z1 {
                        let iz = oz * sd + kz - pd;
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let src_row = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let dst_row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if sw == 1 {
                                let ix0 = x0 + kx - pw;
                                dst_row[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    dst_row[ox] = src_row[ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z0, z1) = valid_range(od, d, kz, sd, pd);
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, sh, ph);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(ow, w, kx, sw, pw);
                    let src = &col[row * p..(row + 1) * p];
                    for oz in z0..z1 {
                        let iz = oz * sd + kz - pd;
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let src_row = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst_row = &mut dxc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            for ox in x0..x1 {
                                dst_row[ox * sw + kx - pw] += src_row[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation forward pass. Output layout `[B, O, oD, oH, oW]` flattened.
pub fn conv_forward(g: &ConvGeometry, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let k = g.patch();
    let p = g.out_volume();
    let o = g.out_channels;
    let in_stride = g.in_channels * g.in_volume();
    let mut out = vec![0.0; g.batch * o * p];
    let mut col = vec![0.0; k * p];
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
        let ob = &mut out[b * o * p..(b + 1) * o * p];
        gemm(o, k, p, weight, false, &col, false, ob, false);
        if let Some(bias) = bias {
            for (oc, chunk) in ob.chunks_exact_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
    }
    out
}

/// Gradients of a convolution. Each requested output buffer is accumulated into.
pub fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let k = g.patch();
    let p = g.out_volume();
    let o = g.out_channels;
    let in_stride = g.in_channels * g.in_volume();
    let mut col = vec![0.0; k * p];
    for b in 0..g.batch {
        let gy = &grad_out[b * o * p..(b + 1) * o * p];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (oc, chunk) in gy.chunks_exact(p).enumerate() {
                gb[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
            gemm(o, p, k, gy, false, &col, true, gw, true);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            gemm(k, o, p, weight, true, gy, false, &mut col, false);
            col2im(g, &col, &mut gx[b * in_stride..(b + 1) * in_stride]);
        }
    }
}

/// Sampling coordinates of one output pixel, clamped to the border.
#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the unclamped coordinate lies inside the image (gradient passes).
    inside_x: bool,
    inside_y: bool,
}

fn tap(x: f64, y: f64, w: usize, h: usize) -> Tap {
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let inside_x = (0.0..=xmax).contains(&x);
    let inside_y = (0.0..=ymax).contains(&y);
    let xc = x.clamp(0.0, xmax);
    let yc = y.clamp(0.0, ymax);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: xc - x0 as f64,
        fy: yc - y0 as f64,
        inside_x,
        inside_y,
    }
}

fn check_sample_shapes(image: &[usize], coords: &[usize]) -> Result<()> {
    if image.len() != 4 || coords.len() != 4 || coords[1] != 2 || image[0] != coords[0] {
        bail!(
            Dimension,
            "bilinear_sample expects image [B,C,H,W] and coords [B,2,H',W'], got {image:?} and {coords:?}"
        );
    }
    Ok(())
}

/// Bilinear sampling with border clamping. `coords` channel 0 is x, channel 1 is y (pixels).
pub fn bilinear_sample(image: &Tensor, coords: &Tensor) -> Result<Tensor> {
    check_sample_shapes(image.shape(), coords.shape())?;
    let [b, c, h, w] = [
        image.shape()[0],
        image.shape()[1],
        image.shape()[2],
        image.shape()[3],
    ];
    let [oh, ow] = [coords.shape()[2], coords.shape()[3]];
    let (img, crd) = (image.data(), coords.data());
    let op = oh * ow;
    let mut out = vec![0.0; b * c * op];
    for bi in 0..b {
        let cx = &crd[(bi * 2) * op..(bi * 2 + 1) * op];
        let cy = &crd[(bi * 2 + 1) * op..(bi * 2 + 2) * op];
        for i in 0..op {
            let t = tap(cx[i], cy[i], w, h);
            let w00 = (1.0 - t.fx) * (1.0 - t.fy);
            let w01 = t.fx * (1.0 - t.fy);
            let w10 = (1.0 - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            for ch in 0..c {
                let plane = &img[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                // Zero-weight taps are skipped so integer coordinates reproduce the source bitwise.
                let mut acc = w00 * plane[t.y0 * w + t.x0];
                if w01 != 0.0 {
                    acc += w01 * plane[t.y0 * w + t.x1];
                }
                if w10 != 0.0 {
                    acc += w10 * plane[t.y1 * w + t.x0];
                }
                if w11 != 0.0 {
                    acc += w11 * plane[t.y1 * w + t.x1];
                }
                out[(bi * c + ch) * op + i] = acc;
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Backward pass of [`bilinear_sample`], accumulating into the given buffers.
///
/// At integer coordinates the sampler has a kink; the coordinate gradient there
/// is the mean of the two one-sided derivatives, so a sampler sitting exactly
/// on the pixel grid still sees motion in both directions.
pub fn bilinear_sample_backward(
    image: &Tensor,
    coords: &Tensor,
    grad_out: &[f64],
    mut grad_image: Option<&mut [f64]>,
    mut grad_coords: Option<&mut [f64]>,
) {
    let [b, c, h, w] = [
        image.shape()[0],
        image.shape()[1],
        image.shape()[2],
        image.shape()[3],
    ];
    let [oh, ow] = [coords.shape()[2], coords.shape()[3]];
    let (img, crd) = (image.data(), coords.data());
    let op = oh * ow;
    for bi in 0..b {
        for i in 0..op {
            let t = tap(crd[(bi * 2) * op + i], crd[(bi * 2 + 1) * op + i], w, h);
            let w00 = (1.0 - t.fx) * (1.0 - t.fy);
            let w01 = t.fx * (1.0 - t.fy);
            let w10 = (1.0 - t.fx) * t.fy;
            let w11 = t.fx * t.fy;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let g = grad_out[(bi * c + ch) * op + i];
                if let Some(gi) = grad_image.as_deref_mut() {
                    gi[base + t.y0 * w + t.x0] += w00 * g;
                    gi[base + t.y0 * w + t.x1] += w01 * g;
                    gi[base + t.y1 * w + t.x0] += w10 * g;
                    gi[base + t.y1 * w + t.x1] += w11 * g;
                }
                let at = |y: usize, x: usize| img[base + y * w + x];
                let slope_x = |y: usize| {
                    if t.fx == 0.0 {
                        let left = if t.x0 > 0 {
                            at(y, t.x0) - at(y, t.x0 - 1)
                        } else {
                            0.0
                        };
                        0.5 * (left + at(y, t.x1) - at(y, t.x0))
                    } else {
                        at(y, t.x1) - at(y, t.x0)
                    }
                };
                let slope_y = |x: usize| {
                    if t.fy == 0.0 {
                        let up = if t.y0 > 0 {
                            at(t.y0, x) - at(t.y0 - 1, x)
                        } else {
                            0.0
                        };
                        0.5 * (up + at(t.y1, x) - at(t.y0, x))
                    } else {
                        at(t.y1, x) - at(t.y0, x)
                    }
                };
                gx += g * ((1.0 - t.fy) * slope_x(t.y0) + t.fy * slope_x(t.y1));
                gy += g * ((1.0 - t.fx) * slope_y(t.x0) + t.fx * slope_y(t.x1));
            }
            if let Some(gc) = grad_coords.as_deref_mut() {
                if t.inside_x {
                    gc[(bi * 2) * op + i] += gx;
                }
                if t.inside_y {
                    gc[(bi * 2 + 1) * op + i] += gy;
                }
            }
        }
    }
}

/// Per-channel statistics layout helper: `[B, C, rest...]`.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let b = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (b, c, inner)
}

/// Biased per-channel mean and variance over every non-channel axis.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, c, inner) = channel_layout(x.shape());
    let n = (b * inner) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += data[(bi * c + ch) * inner..(bi * c + ch + 1) * inner]
                .iter()
                .sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            v += data[(bi * c + ch) * inner..(bi * c + ch + 1) * inner]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

/// Softmax over axis 1 of a `[B, C, rest...]` tensor.
pub fn softmax_channels(x: &Tensor) -> Vec<f64> {
    let (b, c, inner) = channel_layout(x.shape());
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for i in 0..inner {
            let at = |ch: usize| (bi * c + ch) * inner + i;
            let max = (0..c)
                .map(|ch| data[at(ch)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (data[at(ch)] - max).exp();
                out[at(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                out[at(ch)] /= sum;
            }
        }
    }
    out
}
