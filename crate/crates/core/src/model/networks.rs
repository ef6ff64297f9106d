use super::{FrameMode, ModelParams, ModelVars, KERNEL};
use crate::error::{bail, Result};
use crate::flow::{estimate_flow_between, DEFAULT_ITERATIONS, DEFAULT_SMOOTHNESS};
use crate::tensor::layers::{self, Mode};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Forward-pass context: parameters on the tape, the BN mode, and the batch
/// statistics observed so far (train mode only).
pub struct Forward<'a, 't> {
    params: &'a ModelParams,
    vars: &'a ModelVars<'t>,
    mode: Mode,
    updates: Vec<(String, BatchStats)>,
}

impl<'a, 't> Forward<'a, 't> {
    pub fn new(params: &'a ModelParams, vars: &'a ModelVars<'t>, mode: Mode) -> Self {
        Self {
            params,
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name)
    }

    fn batch_norm(&mut self, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let (y, stats) = layers::batch_norm(x, &gamma, &beta, self.params.norm(name)?, self.mode)?;
        if let Some(stats) = stats {
            self.updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    /// Batch statistics to fold into the running averages after this pass.
    pub fn into_updates(self) -> Vec<(String, BatchStats)> {
        self.updates
    }
}

/// Flow-prediction network: `[B, 2(N-1), H, W]` flow history to the next `[B, 2, H, W]` flow.
pub fn ofpn_forward<'t>(fwd: &mut Forward<'_, 't>, flows: &Var<'t>) -> Result<Var<'t>> {
    let s = flows.shape();
    let want = 2 * (fwd.params.config.input_len - 1);
    if s.len() != 4 || s[1] != want {
        bail!(
            Dimension,
            "flow predictor expects [B, {want}, H, W], got {s:?}"
        );
    }
    let mut x = *flows;
    for i in 0..3 {
        let w = fwd.var(&format!("ofpn.conv{i}.weight"))?;
        x = x.conv2d(&w, None, 1, KERNEL / 2)?;
        x = fwd.batch_norm(&x, &format!("ofpn.bn{i}"))?.relu()?;
    }
    let w = fwd.var("ofpn.head.weight")?;
    let b = fwd.var("ofpn.head.bias")?;
    x.conv2d(&w, Some(&b), 1, KERNEL / 2)
}

/// Motion-estimation network: `[B, 2, N, H, W]` flows to a `[B, 6, H, W]` transform map.
pub fn men_forward<'t>(fwd: &mut Forward<'_, 't>, flows: &Var<'t>) -> Result<Var<'t>> {
    let s = flows.shape();
    if s.len() != 5 || s[1] != 2 {
        bail!(
            Dimension,
            "motion network expects [B, 2, N, H, W], got {s:?}"
        );
    }
    let mut x = *flows;
    for i in 0..3 {
        let w = fwd.var(&format!("men.conv{i}.weight"))?;
        x = x.conv3d(&w, None, 1, KERNEL / 2)?;
        x = fwd.batch_norm(&x, &format!("men.bn{i}"))?.relu()?;
    }
    let pooled = x.mean_axis(2)?;
    let w = fwd.var("men.head.weight")?;
    let b = fwd.var("men.head.bias")?;
    pooled.conv2d(&w, Some(&b), 1, KERNEL / 2)
}

/// `[B, 6, H, W]` map holding the identity affine at every pixel.
pub fn identity_transform(batch: usize, height: usize, width: usize) -> Tensor {
    let n = height * width;
    let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    Tensor::from_fn(&[batch, 6, height, width], |i| id[(i / n) % 6])
}

fn pixel_grid<'t>(tape: &'t Tape, b: usize, h: usize, w: usize) -> Result<(Var<'t>, Var<'t>)> {
    let xs = Tensor::from_fn(&[b, 1, h, w], |i| (i % w) as f64);
    let ys = Tensor::from_fn(&[b, 1, h, w], |i| ((i / w) % h) as f64);
    Ok((tape.constant(xs)?, tape.constant(ys)?))
}

/// Warp `frame` (`[B,C,H,W]`) by the per-pixel affine map `transform` (`[B,6,H,W]`).
///
/// Each output pixel `(x, y)` samples the source at `A·(x, y, 1)ᵀ`, where `A` is
/// the 2×3 matrix stored at that pixel as `(a11, a12, a13, a21, a22, a23)`.
pub fn apply_transform<'t>(frame: &Var<'t>, transform: &Var<'t>) -> Result<Var<'t>> {
    let fs = frame.shape();
    let ts = transform.shape();
    if fs.len() != 4 || ts.len() != 4 || ts[1] != 6 || fs[0] != ts[0] || fs[2..] != ts[2..] {
        bail!(
            Dimension,
            "apply_transform: frame {fs:?} and transform {ts:?} incompatible"
        );
    }
    let (b, h, w) = (fs[0], fs[2], fs[3]);
    let (gx, gy) = pixel_grid(frame.tape(), b, h, w)?;
    let a = |k: usize| transform.slice(1, k, 1);
    let sx = a(0)?.mul(&gx)?.add(&a(1)?.mul(&gy)?)?.add(&a(2)?)?;
    let sy = a(3)?.mul(&gx)?.add(&a(4)?.mul(&gy)?)?.add(&a(5)?)?;
    frame.bilinear_sample(&Var::concat(&[sx, sy], 1)?)
}

/// Stacked ConvLSTM over `frames` (`[B,N,C,H,W]`), fused with the warped last frame.
///
/// The top hidden state and the warped frame (in logit space) are concatenated
/// and mapped by a 1×1 convolution followed by sigmoid or channel softmax.
pub fn stpn_forward<'t>(
    fwd: &mut Forward<'_, 't>,
    frames: &Var<'t>,
    warped: &Var<'t>,
) -> Result<Var<'t>> {
    let cfg = fwd.params.config;
    let s = frames.shape();
    let c = cfg.channels();
    if s.len() != 5 || s[2] != c {
        bail!(
            Dimension,
            "frame stack must be [B, N, {c}, H, W], got {s:?}"
        );
    }
    let (b, n, h, w) = (s[0], s[1], s[3], s[4]);
    if warped.shape() != [b, c, h, w] {
        bail!(
            Dimension,
            "warped frame {:?} does not match frames {s:?}",
            warped.shape()
        );
    }
    let tape = frames.tape();
    let mut inputs = frames.reshape(&[b * n, c, h, w])?;
    let mut top = None;
    for (l, ch) in cfg.stpn_channels().into_iter().enumerate() {
        let w_x = fwd.var(&format!("stpn.lstm{l}.w_x"))?;
        let w_h = fwd.var(&format!("stpn.lstm{l}.w_h"))?;
        // The input-to-state path of every time step is convolved and normalized at once.
        let gates = inputs.conv2d(&w_x, None, 1, KERNEL / 2)?;
        let gates = fwd
            .batch_norm(&gates, &format!("stpn.lstm{l}.bn"))?
            .reshape(&[b, n, 4 * ch, h, w])?;
        let (mut hid, mut cell) = layers::zero_state(tape, b, ch, h, w)?;
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let g = gates.slice(1, t, 1)?.reshape(&[b, 4 * ch, h, w])?;
            (hid, cell) = layers::lstm_update(&g, &hid, &cell, &w_h)?;
            outputs.push(hid.reshape(&[b, 1, ch, h, w])?);
        }
        inputs = Var::concat(&outputs, 1)?.reshape(&[b * n, ch, h, w])?;
        top = Some(hid);
    }
    let top = top.expect("at least one ConvLSTM layer");
    let fused = Var::concat(&[top, warp_logits(warped, cfg.mode)?], 1)?;
    let logits = fused.conv2d(
        &fwd.var("stpn.head.weight")?,
        Some(&fwd.var("stpn.head.bias")?),
        1,
        0,
    )?;
    match cfg.mode {
        FrameMode::Rgb => logits.sigmoid(),
        FrameMode::Semantic { .. } => logits.softmax_channels(),
    }
}

/// Floor keeping the warped frame away from 0 and 1 before taking logs.
pub const WARP_FLOOR: f64 = 1e-3;

/// The warped frame in the head's pre-activation space: logits for rgb,
/// log-probabilities for semantic maps. Values are first squeezed into
/// `[ε, 1-ε]` (per class for semantic), so the output nonlinearity maps them
/// back to the squeezed frame.
fn warp_logits<'t>(warped: &Var<'t>, mode: FrameMode) -> Result<Var<'t>> {
    let e = WARP_FLOOR;
    match mode {
        FrameMode::Rgb => {
            let q = warped.scale(1.0 - 2.0 * e)?.add_scalar(e)?;
            let not_q = warped.scale(-(1.0 - 2.0 * e))?.add_scalar(1.0 - e)?;
            q.ln()?.sub(&not_q.ln()?)
        }
        FrameMode::Semantic { num_classes } => warped
            .scale(1.0 - num_classes as f64 * e)?
            .add_scalar(e)?
            .ln(),
    }
}

/// Outputs of one next-frame prediction.
pub struct Prediction<'t> {
    /// Predicted frame `[B, C, H, W]`.
    pub frame: Var<'t>,
    /// Predicted next flow `[B, 2, H, W]`.
    pub flow: Var<'t>,
    /// Per-pixel affine transform `[B, 6, H, W]`.
    pub transform: Var<'t>,
    /// Last input frame warped by `transform`.
    pub warped: Var<'t>,
    /// Train-mode batch statistics, in layer order.
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// Full pipeline: predict the next flow, estimate the transform from the flow
/// history plus that prediction, warp the last frame, refine with the ConvLSTM.
///
/// `frames` is `[B, N, C, H, W]`, `flows` is `[B, N-1, 2, H, W]`.
pub fn predict_next<'t>(
    params: &ModelParams,
    vars: &ModelVars<'t>,
    frames: &Var<'t>,
    flows: &Var<'t>,
    mode: Mode,
) -> Result<Prediction<'t>> {
    let cfg = params.config;
    let n = cfg.input_len;
    let fs = frames.shape();
    let ls = flows.shape();
    if fs.len() != 5 || fs[1] != n || fs[2] != cfg.channels() {
        bail!(
            Dimension,
            "expected frames [B, {n}, {}, H, W], got {fs:?}",
            cfg.channels()
        );
    }
    let (b, h, w) = (fs[0], fs[3], fs[4]);
    if ls != [b, n - 1, 2, h, w] {
        bail!(
            Dimension,
            "expected flows [{b}, {}, 2, {h}, {w}], got {ls:?}",
            n - 1
        );
    }
    let mut fwd = Forward::new(params, vars, mode);
    let flow = ofpn_forward(&mut fwd, &flows.reshape(&[b, 2 * (n - 1), h, w])?)?;
    let history =
        Var::concat(&[*flows, flow.reshape(&[b, 1, 2, h, w])?], 1)?.permute(&[0, 2, 1, 3, 4])?;
    let transform = men_forward(&mut fwd, &history)?;
    let last = frames
        .slice(1, n - 1, 1)?
        .reshape(&[b, cfg.channels(), h, w])?;
    let warped = apply_transform(&last, &transform)?;
    let frame = stpn_forward(&mut fwd, frames, &warped)?;
    Ok(Prediction {
        frame,
        flow,
        transform,
        warped,
        bn_updates: fwd.into_updates(),
    })
}

/// Where rollout gets the flow between the last frame and a new prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowSource {
    /// The flow network's own prediction.
    Model,
    /// Horn–Schunck between the last frame and the predicted frame.
    Estimate { smoothness: f64, iterations: usize },
}

impl FlowSource {
    pub fn estimate() -> Self {
        FlowSource::Estimate {
            smoothness: DEFAULT_SMOOTHNESS,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

/// One autoregressive step: the predicted frame and flow, and the transform used.
#[derive(Clone, Debug)]
pub struct RolloutStep {
    pub frame: Tensor,
    pub flow: Tensor,
    pub transform: Tensor,
}

fn drop_first_append(window: &Tensor, next: &Tensor) -> Result<Tensor> {
    // window [B, T, ...], next [B, ...]
    let s = window.shape();
    let (b, t) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(window.numel());
    for bi in 0..b {
        data.extend_from_slice(&window.data()[(bi * t + 1) * inner..(bi + 1) * t * inner]);
        data.extend_from_slice(&next.data()[bi * inner..(bi + 1) * inner]);
    }
    Tensor::new(s, data)
}

/// Predict `k` frames autoregressively, sliding the frame and flow windows.
pub fn rollout(
    params: &ModelParams,
    frames: &Tensor,
    flows: &Tensor,
    k: usize,
    source: FlowSource,
    mode: Mode,
) -> Result<Vec<RolloutStep>> {
    if k < 1 {
        bail!(Contract, "rollout length must be at least 1");
    }
    let mut frames = frames.clone();
    let mut flows = flows.clone();
    let mut steps = Vec::with_capacity(k);
    for _ in 0..k {
        let tape = Tape::new();
        let vars = params.register(&tape, false)?;
        let f = tape.constant(frames.clone())?;
        let l = tape.constant(flows.clone())?;
        let pred = predict_next(params, &vars, &f, &l, mode)?;
        let frame = pred.frame.value();
        let predicted_flow = pred.flow.value();
        let next_flow = match source {
            FlowSource::Model => predicted_flow.clone(),
            FlowSource::Estimate {
                smoothness,
                iterations,
            } => {
                let s = frames.shape();
                let (b, n) = (s[0], s[1]);
                let mut per_batch = Vec::with_capacity(b);
                for bi in 0..b {
                    let last = frames.index_first(bi)?.index_first(n - 1)?;
                    let next = frame.index_first(bi)?;
                    per_batch.push(
                        estimate_flow_between(&last, &next, smoothness, iterations)?.to_tensor(),
                    );
                }
                Tensor::stack(&per_batch)?
            }
        };
        frames = drop_first_append(&frames, &frame)?;
        flows = drop_first_append(&flows, &next_flow)?;
        steps.push(RolloutStep {
            frame,
            flow: next_flow,
            transform: pred.transform.value(),
        });
    }
    Ok(steps)
}
