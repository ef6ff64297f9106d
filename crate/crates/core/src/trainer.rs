//! Joint training of the three networks, checkpoint handling, and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{FlowSupply, Sequence, SequenceSample};
use crate::error::{bail, Error, Result};
use crate::flow::{DEFAULT_ITERATIONS, DEFAULT_SMOOTHNESS};
use crate::metrics::{mean_endpoint_error, psnr, ssim};
use crate::model::{
    init_params, predict_next, rollout, ChannelScale, Checkpoint, FlowSource, FrameMode,
    ModelConfig, ModelParams,
};
use crate::objectives::{loss_final, LossWeights};
use crate::optim::{adam_step, clip_grad_norm, AdamState, DEFAULT_LR};
use crate::tensor::layers::Mode;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_BATCH_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub weights: LossWeights,
    pub mode: FrameMode,
    pub input_len: usize,
    pub channel_scale: ChannelScale,
    /// Hand a checkpoint to the observer every this many steps.
    pub checkpoint_interval: Option<usize>,
    /// Score the training samples in eval mode every this many steps.
    pub eval_interval: Option<usize>,
    pub flow_source: FlowSupply,
    /// Global gradient-norm cap; off by default.
    pub clip_grad: Option<f64>,
    /// `(width, height)` frames are resized to when loaded from disk.
    pub resize: Option<(usize, usize)>,
    pub frame_stride: usize,
    /// Record elapsed milliseconds in the log; zeros keep logs byte-reproducible.
    pub log_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            lr: DEFAULT_LR,
            weights: LossWeights::default(),
            mode: FrameMode::Rgb,
            input_len: 5,
            channel_scale: ChannelScale::new(1, 8).unwrap(),
            checkpoint_interval: None,
            eval_interval: None,
            flow_source: FlowSupply::GroundTruth,
            clip_grad: None,
            resize: None,
            frame_stride: 1,
            log_wall_ms: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            bail!(Config, "steps must be at least 1");
        }
        if self.batch_size < 1 {
            bail!(Config, "batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive");
        }
        if self.input_len < 2 {
            bail!(Config, "input length must be at least 2");
        }
        if self.frame_stride < 1 {
            bail!(Config, "frame stride must be at least 1");
        }
        if matches!(self.checkpoint_interval, Some(0)) || matches!(self.eval_interval, Some(0)) {
            bail!(Config, "intervals must be positive");
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                bail!(Config, "gradient clip must be positive");
            }
        }
        if let FlowSupply::HornSchunck {
            smoothness,
            iterations,
        } = self.flow_source
        {
            if !(smoothness > 0.0) || iterations < 1 {
                bail!(
                    Config,
                    "Horn-Schunck needs positive smoothness and at least one iteration"
                );
            }
        }
        let weights = LossWeights {
            mode: self.mode,
            ..self.weights
        };
        weights.validate()
    }

    /// Parse `key = value` lines (`#` starts a comment) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut num_classes = None;
        let mut mode = None;
        let mut smoothness = DEFAULT_SMOOTHNESS;
        let mut iterations = DEFAULT_ITERATIONS;
        let mut flow = None;
        let (mut width, mut height) = (None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(Config, "line {}: expected `key = value`", lineno + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = || {
                Error::Config(format!(
                    "line {}: bad value {value:?} for {key}",
                    lineno + 1
                ))
            };
            macro_rules! parse {
                () => {
                    value.parse().map_err(|_| bad())?
                };
            }
            match key {
                "steps" => self.steps = parse!(),
                "batch_size" => self.batch_size = parse!(),
                "seed" => self.seed = parse!(),
                "lr" => self.lr = parse!(),
                "lambda_of" => self.weights.lambda_of = parse!(),
                "lambda_st" => self.weights.lambda_st = parse!(),
                "alpha" => self.weights.alpha = parse!(),
                "mode" => mode = Some(value.to_string()),
                "num_classes" => num_classes = Some(parse!()),
                "input_len" => self.input_len = parse!(),
                "channel_scale" => self.channel_scale = value.parse().map_err(|_| bad())?,
                "checkpoint_interval" => self.checkpoint_interval = Some(parse!()),
                "eval_interval" => self.eval_interval = Some(parse!()),
                "flow_source" => flow = Some(value.to_string()),
                "smoothness" => smoothness = parse!(),
                "iterations" => iterations = parse!(),
                "clip_grad" => self.clip_grad = Some(parse!()),
                "width" => width = Some(parse!()),
                "height" => height = Some(parse!()),
                "frame_stride" => self.frame_stride = parse!(),
                "log_wall_ms" => self.log_wall_ms = parse!(),
                _ => bail!(Config, "line {}: unknown key {key:?}", lineno + 1),
            }
        }
        match (mode.as_deref(), num_classes) {
            (None, None) => {}
            (Some("rgb"), None) => self.mode = FrameMode::Rgb,
            (Some("rgb"), Some(_)) => bail!(Config, "num_classes only applies to semantic mode"),
            (None | Some("semantic"), Some(k)) => {
                self.mode = FrameMode::Semantic { num_classes: k }
            }
            (Some("semantic"), None) => match self.mode {
                FrameMode::Semantic { .. } => {}
                FrameMode::Rgb => bail!(Config, "semantic mode needs num_classes"),
            },
            (Some(m), _) => bail!(Config, "unknown mode {m:?}"),
        }
        self.weights.mode = self.mode;
        match flow.as_deref() {
            None => {
                if let FlowSupply::HornSchunck { .. } = self.flow_source {
                    self.flow_source = FlowSupply::HornSchunck {
                        smoothness,
                        iterations,
                    };
                }
            }
            Some("ground_truth") => self.flow_source = FlowSupply::GroundTruth,
            Some("horn_schunck") => {
                self.flow_source = FlowSupply::HornSchunck {
                    smoothness,
                    iterations,
                }
            }
            Some(f) => bail!(Config, "unknown flow_source {f:?}"),
        }
        match (width, height) {
            (None, None) => {}
            (Some(w), Some(h)) => self.resize = Some((w, h)),
            _ => bail!(Config, "width and height must be given together"),
        }
        self.validate()
    }
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_of: f64,
    pub loss_st: f64,
    pub loss_final: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,loss_of,loss_st,loss_final,wall_ms";

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.loss_of, r.loss_st, r.loss_final, r.wall_ms
        );
    }
    s
}

/// Eval-mode next-frame scores averaged over samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScores {
    pub psnr: f64,
    pub ssim: f64,
    pub flow_epe: f64,
    /// Per-pixel argmax agreement (semantic mode), otherwise `None`.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Receives progress from [`train_with`].
pub trait TrainObserver {
    fn on_step(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _step: usize, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _step: usize, _scores: &SampleScores) -> Result<Control> {
        Ok(Control::Continue)
    }
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Steps actually run, counting from the start (resumed runs included).
    pub steps: usize,
}

fn leading(t: &Tensor, n: usize) -> Result<Tensor> {
    let s = t.shape();
    let inner: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = n;
    Tensor::new(&shape, t.data()[..n * inner].to_vec())
}

/// Model inputs and targets for a batch of samples.
pub struct Batch {
    /// `[B, N, C, H, W]`
    pub frames: Tensor,
    /// `[B, N-1, 2, H, W]`
    pub flows: Tensor,
    /// `[B, C, H, W]`
    pub target_frame: Tensor,
    /// `[B, 2, H, W]`
    pub target_flow: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&SequenceSample]) -> Result<Self> {
        if samples.is_empty() {
            bail!(Contract, "empty batch");
        }
        let n = samples[0].input_len();
        let mut frames = Vec::new();
        let mut flows = Vec::new();
        let mut target_frame = Vec::new();
        let mut target_flow = Vec::new();
        for s in samples {
            if s.input_len() != n {
                bail!(Data, "samples in a batch must share the input length");
            }
            frames.push(leading(&s.frames, n)?);
            flows.push(leading(&s.flows, n - 1)?);
            target_frame.push(s.frames.index_first(n)?);
            target_flow.push(s.flows.index_first(n - 1)?);
        }
        Ok(Self {
            frames: Tensor::stack(&frames)?,
            flows: Tensor::stack(&flows)?,
            target_frame: Tensor::stack(&target_frame)?,
            target_flow: Tensor::stack(&target_flow)?,
        })
    }
}

/// Single-writer training state; [`Trainer::step`] runs one Adam update.
pub struct Trainer<'d> {
    dataset: &'d [SequenceSample],
    config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d [SequenceSample], config: TrainConfig) -> Result<Self> {
        let model = check_dataset(dataset, &config)?;
        let params = init_params(model, config.seed)?;
        let optimizer = AdamState::new(params.iter().map(|(_, t)| t)).with_lr(config.lr);
        Ok(Self {
            dataset,
            config,
            params,
            optimizer,
            step: 0,
        })
    }

    /// Continue from a checkpoint; the step counter is the optimizer's timestep.
    pub fn resume(
        dataset: &'d [SequenceSample],
        config: TrainConfig,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        let model = check_dataset(dataset, &config)?;
        if ckpt.params.config != model {
            bail!(
                Config,
                "checkpoint model {:?} does not match the training setup {:?}",
                ckpt.params.config,
                model
            );
        }
        Ok(Self {
            dataset,
            step: ckpt.optimizer.t as usize,
            config,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Batch indices for a step depend only on the seed and the step number,
    /// so resumed runs draw the same batches as uninterrupted ones.
    fn batch_indices(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64);
        (0..self.config.batch_size)
            .map(|_| rng.gen_range(0..self.dataset.len()))
            .collect()
    }

    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.step + 1;
        let picked: Vec<&SequenceSample> = self
            .batch_indices()
            .into_iter()
            .map(|i| &self.dataset[i])
            .collect();
        let batch = Batch::from_samples(&picked)?;
        let weights = LossWeights {
            mode: self.config.mode,
            ..self.config.weights
        };
        let at_step = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            e => e,
        };
        let (row, mut grads, updates) = {
            let tape = Tape::new();
            let vars = self.params.register(&tape, true)?;
            let frames = tape.constant(batch.frames)?;
            let flows = tape.constant(batch.flows)?;
            let pred =
                predict_next(&self.params, &vars, &frames, &flows, Mode::Train).map_err(at_step)?;
            let target_frame = tape.constant(batch.target_frame)?;
            let target_flow = tape.constant(batch.target_flow)?;
            let terms = loss_final(
                &pred.frame,
                &target_frame,
                &pred.flow,
                &target_flow,
                &weights,
            )
            .map_err(at_step)?;
            let total = terms.total.item();
            if !total.is_finite() {
                bail!(Numeric, "step {step}: loss is {total}");
            }
            tape.backward(terms.total).map_err(at_step)?;
            let row = LogRow {
                step,
                loss_of: terms.flow.item(),
                loss_st: terms.frame.item(),
                loss_final: total,
                wall_ms: 0,
            };
            (row, vars.grads(), pred.bn_updates)
        };
        if let Some(c) = self.config.clip_grad {
            clip_grad_norm(&mut grads, c);
        }
        adam_step(self.params.tensors_mut(), &grads, &mut self.optimizer).map_err(at_step)?;
        self.params.apply_batch_stats(&updates)?;
        self.step = step;
        Ok(row)
    }

    /// Eval-mode scores on the whole training set.
    pub fn scores(&self) -> Result<SampleScores> {
        score_samples(&self.params, self.dataset)
    }
}

fn check_dataset(dataset: &[SequenceSample], config: &TrainConfig) -> Result<ModelConfig> {
    config.validate()?;
    let Some(first) = dataset.first() else {
        bail!(Data, "training set is empty");
    };
    let s = first.frames.shape();
    for d in dataset {
        if d.meta.mode != config.mode {
            bail!(
                Config,
                "sample {} is {:?}, training expects {:?}",
                d.meta.id,
                d.meta.mode,
                config.mode
            );
        }
        if d.input_len() != config.input_len {
            bail!(
                Data,
                "sample {} has input length {}, expected {}",
                d.meta.id,
                d.input_len(),
                config.input_len
            );
        }
        if d.frames.shape() != s {
            bail!(
                Data,
                "sample {} has frames {:?}, expected {s:?}",
                d.meta.id,
                d.frames.shape()
            );
        }
    }
    let model = ModelConfig {
        width: s[3],
        height: s[2],
        input_len: config.input_len,
        mode: config.mode,
        channel_scale: config.channel_scale,
    };
    model.validate()?;
    Ok(model)
}

/// Run `config.steps` steps from scratch.
pub fn train(dataset: &[SequenceSample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, None, &mut ())
}

/// Train, optionally resuming, reporting progress to `observer`.
///
/// A resumed run continues until the optimizer has taken `config.steps` steps.
pub fn train_with(
    dataset: &[SequenceSample],
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(c) => Trainer::resume(dataset, config.clone(), c)?,
        None => Trainer::new(dataset, config.clone())?,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    while trainer.step_count() < config.steps {
        let mut row = trainer.step()?;
        if config.log_wall_ms {
            row.wall_ms = start.elapsed().as_millis();
        }
        observer.on_step(&row)?;
        log.push(row);
        let s = trainer.step_count();
        if config.checkpoint_interval.is_some_and(|k| s % k == 0) {
            observer.on_checkpoint(s, &trainer.checkpoint())?;
        }
        if config.eval_interval.is_some_and(|k| s % k == 0)
            && observer.on_eval(s, &trainer.scores()?)? == Control::Stop
        {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        steps: trainer.step_count(),
        log,
    })
}

fn frame_accuracy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let s = pred.shape();
    let n = s[2] * s[3];
    let mut hits = 0usize;
    for b in 0..s[0] {
        let p = crate::dataset::decode_semantic(&pred.index_first(b)?)?;
        let t = crate::dataset::decode_semantic(&target.index_first(b)?)?;
        hits += p.iter().zip(&t).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / (s[0] * n) as f64)
}

/// Eval-mode next-frame metrics, one sample at a time, averaged.
pub fn score_samples(params: &ModelParams, samples: &[SequenceSample]) -> Result<SampleScores> {
    if samples.is_empty() {
        bail!(Data, "nothing to score");
    }
    let semantic = matches!(params.config.mode, FrameMode::Semantic { .. });
    let (mut p, mut q, mut e, mut a) = (0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let batch = Batch::from_samples(&[s])?;
        let tape = Tape::new();
        let vars = params.register(&tape, false)?;
        let pred = predict_next(
            params,
            &vars,
            &tape.constant(batch.frames)?,
            &tape.constant(batch.flows)?,
            Mode::Eval,
        )?;
        let frame = pred.frame.value();
        p += psnr(&frame, &batch.target_frame, 1.0)?;
        q += ssim(&frame, &batch.target_frame, 1.0)?;
        e += mean_endpoint_error(&pred.flow.value(), &batch.target_flow)?;
        if semantic {
            a += frame_accuracy(&frame, &batch.target_frame)?;
        }
    }
    let n = samples.len() as f64;
    Ok(SampleScores {
        psnr: p / n,
        ssim: q / n,
        flow_epe: e / n,
        accuracy: semantic.then_some(a / n),
    })
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sequence_id: String,
    /// Rollout step, starting at 1.
    pub step: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// `sequence_id,step,psnr_db,ssim` rows, then a `mean,all,…` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence_id,step,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6}",
                r.sequence_id, r.step, r.psnr_db, r.ssim
            );
        }
        let _ = writeln!(
            s,
            "mean,all,{:.6},{:.6}",
            self.mean_psnr(),
            self.mean_ssim()
        );
        s
    }
}

fn rows_for(id: &str, predicted: &[Tensor], truth: &[Tensor]) -> Result<Vec<EvalRow>> {
    predicted
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(j, (p, t))| {
            Ok(EvalRow {
                sequence_id: id.to_string(),
                step: j + 1,
                psnr_db: psnr(p, t, 1.0)?,
                ssim: ssim(p, t, 1.0)?,
            })
        })
        .collect()
}

fn check_length(seq: &Sequence, n: usize, k: usize) -> Result<()> {
    if k < 1 {
        bail!(Contract, "rollout length must be at least 1");
    }
    if seq.frames.len() < n + k {
        bail!(
            Data,
            "sequence {} has {} frames; {n} context + {k} rollout frames are needed",
            seq.id,
            seq.frames.len()
        );
    }
    if seq.flows.len() + 1 != seq.frames.len() {
        bail!(
            Data,
            "sequence {} has {} flows for {} frames",
            seq.id,
            seq.flows.len(),
            seq.frames.len()
        );
    }
    Ok(())
}

/// Roll out `k` frames from the first `N` frames of each sequence (eval-mode
/// normalization) and score each step against the ground truth.
pub fn evaluate(
    sequences: &[Sequence],
    params: &ModelParams,
    k: usize,
    source: FlowSource,
) -> Result<EvalReport> {
    let n = params.config.input_len;
    let mut rows = Vec::new();
    for seq in sequences {
        check_length(seq, n, k)?;
        if seq.mode != params.config.mode {
            bail!(
                Config,
                "sequence {} is {} but the model is {}",
                seq.id,
                seq.mode.name(),
                params.config.mode.name()
            );
        }
        let frames = Tensor::stack(&[Tensor::stack(&seq.frames[..n])?])?;
        let flows: Vec<Tensor> = seq.flows[..n - 1].iter().map(|f| f.to_tensor()).collect();
        let flows = Tensor::stack(&[Tensor::stack(&flows)?])?;
        let steps = rollout(params, &frames, &flows, k, source, Mode::Eval)?;
        let predicted = steps
            .iter()
            .map(|s| s.frame.index_first(0))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(rows_for(&seq.id, &predicted, &seq.frames[n..n + k])?);
    }
    if rows.is_empty() {
        bail!(Data, "no sequences to evaluate");
    }
    Ok(EvalReport { rows })
}

/// Score the ground-truth continuation against itself (self-check of the report path).
pub fn evaluate_ground_truth(sequences: &[Sequence], n: usize, k: usize) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for seq in sequences {
        check_length(seq, n, k)?;
        let truth = &seq.frames[n..n + k];
        rows.extend(rows_for(&seq.id, truth, truth)?);
    }
    if rows.is_empty() {
        bail!(Data, "no sequences to evaluate");
    }
    Ok(EvalReport { rows })
}
