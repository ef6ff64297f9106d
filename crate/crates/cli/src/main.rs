use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flowcast::dataset::{
    self, generate_synthetic_frames, load_sequences, sequence_dirs, write_label_pgm, write_ppm,
    write_sequence_dir, Background, FlowSupply, Sequence, ShapeKind, SyntheticConfig,
};
use flowcast::flow::{
    estimate_flow_between, flow_to_color, write_flo, ColorScale, FlowField, DEFAULT_ITERATIONS,
    DEFAULT_SMOOTHNESS,
};
use flowcast::model::{
    load_checkpoint, rollout, save_checkpoint, ChannelScale, Checkpoint, FlowSource,
};
use flowcast::tensor::layers::Mode;
use flowcast::tensor::Tensor;
use flowcast::trainer::{
    evaluate, evaluate_ground_truth, format_log, train_with, Control, SampleScores, TrainConfig,
    TrainObserver,
};
use flowcast::{Error, FrameMode, Result};

/// Flow-conditioned next-frame prediction.
#[derive(Parser, Debug)]
#[command(name = "flowcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum ModeArg {
    Rgb,
    Semantic,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum FlowArg {
    /// Flow predicted by the model itself.
    Model,
    /// Horn–Schunck between the last and the predicted frame.
    Estimate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic moving-shape sequences with exact `.flo` ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = dataset::DEFAULT_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = dataset::DEFAULT_HEIGHT)]
        height: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Rgb)]
        mode: ModeArg,
        #[arg(long, default_value_t = 3)]
        num_classes: usize,
        /// Number of sequences; more than one writes `seq_000/`, `seq_001/`, …
        #[arg(long, default_value_t = 1)]
        sequences: usize,
        #[arg(long, default_value_t = 4)]
        min_size: usize,
        #[arg(long, default_value_t = 8)]
        max_size: usize,
        #[arg(long, default_value_t = 2.0)]
        max_speed: f64,
        /// Mix disks in with rectangles.
        #[arg(long)]
        disks: bool,
        /// Sub-pixel velocities.
        #[arg(long)]
        subpixel: bool,
        /// Static horizontal ramp instead of a flat background.
        #[arg(long)]
        gradient_background: bool,
    },
    /// Horn–Schunck flow between consecutive frames of a directory.
    EstimateFlow {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SMOOTHNESS)]
        smoothness: f64,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
    },
    /// Train all three networks jointly.
    Train(TrainArgs),
    /// Roll out `k` frames from the last `N` frames of a directory.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write flow and transform color images per step.
        #[arg(long)]
        viz: bool,
        #[arg(long, value_enum, default_value_t = FlowArg::Model)]
        flow_source: FlowArg,
        /// Expected frame mode; must match the checkpoint.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// PSNR/SSIM of `k`-step rollouts against ground truth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FlowArg::Model)]
        flow_source: FlowArg,
        /// Score the ground-truth frames against themselves instead of predicting.
        #[arg(long)]
        ground_truth: bool,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (defaults to `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    channel_scale: Option<ChannelScale>,
    #[arg(long)]
    input_len: Option<usize>,
    /// Write zeros in the wall_ms column so logs are byte-reproducible.
    #[arg(long)]
    no_wall_time: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Numeric(_) => 3,
        Error::Dimension(_)
        | Error::StatisticsUnset(_)
        | Error::Format(_)
        | Error::Data(_)
        | Error::Io(_) => 2,
    }
}

fn frame_mode(mode: ModeArg, num_classes: usize) -> FrameMode {
    match mode {
        ModeArg::Rgb => FrameMode::Rgb,
        ModeArg::Semantic => FrameMode::Semantic { num_classes },
    }
}

fn flow_source(arg: FlowArg) -> FlowSource {
    match arg {
        FlowArg::Model => FlowSource::Model,
        FlowArg::Estimate => FlowSource::estimate(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Sidecar flows when every sequence has them, Horn–Schunck otherwise.
fn load_with_flows(root: &Path, mode: FrameMode) -> Result<Vec<Sequence>> {
    let all_sidecars = sequence_dirs(root)?
        .iter()
        .map(dataset::load_sidecar_flows)
        .collect::<Result<Vec<_>>>()?
        .iter()
        .all(Option::is_some);
    let supply = if all_sidecars {
        FlowSupply::GroundTruth
    } else {
        FlowSupply::HornSchunck {
            smoothness: DEFAULT_SMOOTHNESS,
            iterations: DEFAULT_ITERATIONS,
        }
    };
    load_sequences(root, mode, None, 1, supply)
}

fn gen_data(out: &Path, cfg: SyntheticConfig, frames: usize, sequences: usize) -> Result<()> {
    if frames < 1 || sequences < 1 {
        return Err(Error::Config(
            "--frames and --sequences must be at least 1".into(),
        ));
    }
    let mut written = Vec::new();
    for s in 0..sequences {
        let cfg = SyntheticConfig {
            seed: cfg.seed.wrapping_add(s as u64),
            ..cfg.clone()
        };
        written.push(generate_synthetic_frames(&cfg, frames)?);
    }
    for (s, (f, l)) in written.iter().enumerate() {
        let dir = if sequences == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seq_{s:03}"))
        };
        write_sequence_dir(&dir, f, l, cfg.mode)?;
    }
    println!(
        "wrote {sequences} sequence(s) of {frames} frames to {}",
        out.display()
    );
    Ok(())
}

fn estimate_flow(frames: &Path, out: &Path, smoothness: f64, iters: usize) -> Result<()> {
    let files = dataset::list_frames(frames)?;
    if files.len() < 2 {
        return Err(Error::Data(format!(
            "{} holds fewer than two frames",
            frames.display()
        )));
    }
    let images = files
        .iter()
        .map(dataset::read_rgb)
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    for (i, pair) in images.windows(2).enumerate() {
        if pair[0].shape() != pair[1].shape() {
            return Err(Error::Data(format!(
                "{}: frame size differs from its predecessor",
                files[i + 1].display()
            )));
        }
        let flow = estimate_flow_between(&pair[0], &pair[1], smoothness, iters)?;
        let stem = files[i]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(format!("{i:06}"));
        write_flo(&flow, out.join(format!("{stem}.flo")))?;
    }
    println!(
        "wrote {} flow file(s) to {}",
        images.len() - 1,
        out.display()
    );
    Ok(())
}

struct CheckpointWriter {
    base: PathBuf,
}

impl TrainObserver for CheckpointWriter {
    fn on_checkpoint(&mut self, step: usize, ckpt: &Checkpoint) -> Result<()> {
        let mut name = self.base.clone().into_os_string();
        name.push(format!(".step{step}"));
        save_checkpoint(ckpt, PathBuf::from(name))
    }

    fn on_eval(&mut self, step: usize, s: &SampleScores) -> Result<Control> {
        eprintln!(
            "step {step}: psnr {:.3} dB, ssim {:.4}, flow epe {:.4}",
            s.psnr, s.ssim, s.flow_epe
        );
        Ok(Control::Continue)
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let TrainArgs {
        data,
        config,
        out,
        log,
        resume,
        steps,
        seed,
        batch_size,
        lr,
        mode,
        num_classes,
        channel_scale,
        input_len,
        no_wall_time,
    } = args;
    let mut cfg = TrainConfig::default();
    if let Some(path) = &config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = channel_scale {
        cfg.channel_scale = v;
    }
    if let Some(v) = input_len {
        cfg.input_len = v;
    }
    match (mode, num_classes) {
        (Some(ModeArg::Rgb), Some(_)) => {
            return Err(Error::Config("--num-classes needs --mode semantic".into()))
        }
        (Some(ModeArg::Rgb), None) => cfg.mode = FrameMode::Rgb,
        (Some(ModeArg::Semantic), k) | (None, k @ Some(_)) => {
            let k = k.or(match cfg.mode {
                FrameMode::Semantic { num_classes } => Some(num_classes),
                FrameMode::Rgb => None,
            });
            let k = k.ok_or_else(|| Error::Config("semantic mode needs --num-classes".into()))?;
            cfg.mode = FrameMode::Semantic { num_classes: k };
        }
        (None, None) => {}
    }
    if no_wall_time {
        cfg.log_wall_ms = false;
    }
    cfg.weights.mode = cfg.mode;
    cfg.validate()?;

    let sequences = load_sequences(
        &data,
        cfg.mode,
        cfg.resize,
        cfg.frame_stride,
        cfg.flow_source,
    )?;
    let mut samples = Vec::new();
    for s in &sequences {
        samples.extend(s.samples(cfg.input_len)?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "no sequence under {} has the {} frames one training tuple needs",
            data.display(),
            cfg.input_len + 1
        )));
    }
    let resume = resume.map(load_checkpoint).transpose()?;
    let mut observer = CheckpointWriter { base: out.clone() };
    let outcome = train_with(&samples, &cfg, resume, &mut observer)?;
    save_checkpoint(&outcome.checkpoint, &out)?;
    let log = log.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    fs::write(&log, format_log(&outcome.log))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} steps on {} tuple(s); final loss {:.6} (of {:.6}, st {:.6})",
            outcome.steps,
            samples.len(),
            last.loss_final,
            last.loss_of,
            last.loss_st
        );
    }
    Ok(())
}

fn check_mode(expected: Option<ModeArg>, ckpt: &Checkpoint) -> Result<()> {
    let actual = ckpt.params.config.mode;
    match expected {
        Some(ModeArg::Rgb) if actual != FrameMode::Rgb => Err(Error::Config(format!(
            "checkpoint is {} but --mode rgb was given",
            actual.name()
        ))),
        Some(ModeArg::Semantic) if actual == FrameMode::Rgb => Err(Error::Config(
            "checkpoint is rgb but --mode semantic was given".into(),
        )),
        _ => Ok(()),
    }
}

/// Per-pixel displacement of a transform map, `A·(x, y, 1) − (x, y)`, as a flow field.
fn transform_displacement(t: &Tensor) -> Result<FlowField> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = t.data();
    let mut u = vec![0f32; n];
    let mut v = vec![0f32; n];
    for i in 0..n {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        u[i] = (d[i] * x + d[n + i] * y + d[2 * n + i] - x) as f32;
        v[i] = (d[3 * n + i] * x + d[4 * n + i] * y + d[5 * n + i] - y) as f32;
    }
    FlowField::new(w, h, u, v)
}

fn write_frame(frame: &Tensor, mode: FrameMode, stem: &Path) -> Result<()> {
    match mode {
        FrameMode::Rgb => write_ppm(frame, stem.with_extension("ppm")),
        FrameMode::Semantic { .. } => {
            let s = frame.shape();
            write_label_pgm(
                &dataset::decode_semantic(frame)?,
                s[1],
                s[2],
                stem.with_extension("pgm"),
            )
        }
    }
}

fn predict(
    ckpt: &Path,
    frames: &Path,
    k: usize,
    out: &Path,
    viz: bool,
    source: FlowArg,
    mode: Option<ModeArg>,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    check_mode(mode, &ck)?;
    let cfg = ck.params.config;
    let n = cfg.input_len;
    let seqs = load_with_flows(frames, cfg.mode)?;
    if seqs.len() != 1 {
        return Err(Error::Data(format!(
            "{} must hold a single frame sequence",
            frames.display()
        )));
    }
    let seq = &seqs[0];
    if seq.frames.len() < n {
        return Err(Error::Data(format!(
            "{} frames found, the model needs {n}",
            seq.frames.len()
        )));
    }
    let (h, w) = (seq.frames[0].shape()[1], seq.frames[0].shape()[2]);
    if (w, h) != (cfg.width, cfg.height) {
        return Err(Error::Data(format!(
            "frames are {w}x{h} but the model was trained on {}x{}",
            cfg.width, cfg.height
        )));
    }
    let start = seq.frames.len() - n;
    let context = Tensor::stack(&[Tensor::stack(&seq.frames[start..])?])?;
    let flows: Vec<Tensor> = seq.flows[start..start + n - 1]
        .iter()
        .map(FlowField::to_tensor)
        .collect();
    let flows = Tensor::stack(&[Tensor::stack(&flows)?])?;
    let steps = rollout(
        &ck.params,
        &context,
        &flows,
        k,
        flow_source(source),
        Mode::Eval,
    )?;
    create_dir(out)?;
    for (j, step) in steps.iter().enumerate() {
        let idx = j + 1;
        write_frame(
            &step.frame.index_first(0)?,
            cfg.mode,
            &out.join(format!("pred_{idx:06}")),
        )?;
        if viz {
            let flow = FlowField::from_tensor(&step.flow)?;
            write_ppm(
                &flow_to_color(&flow, ColorScale::Auto),
                out.join(format!("flow_{idx:06}.ppm")),
            )?;
            write_flo(&flow, out.join(format!("flow_{idx:06}.flo")))?;
            let disp = transform_displacement(&step.transform.index_first(0)?)?;
            write_ppm(
                &flow_to_color(&disp, ColorScale::Auto),
                out.join(format!("transform_{idx:06}.ppm")),
            )?;
        }
    }
    println!("wrote {k} predicted frame(s) to {}", out.display());
    Ok(())
}

fn eval(
    ckpt: &Path,
    data: &Path,
    k: usize,
    out: &Path,
    source: FlowArg,
    ground_truth: bool,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let cfg = ck.params.config;
    let seqs = load_with_flows(data, cfg.mode)?;
    let report = if ground_truth {
        evaluate_ground_truth(&seqs, cfg.input_len, k)?
    } else {
        evaluate(&seqs, &ck.params, k, flow_source(source))?
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, report.to_csv())?;
    println!(
        "{} row(s); mean psnr {:.6} dB, mean ssim {:.6}",
        report.rows.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            width,
            height,
            frames,
            shapes,
            seed,
            mode,
            num_classes,
            sequences,
            min_size,
            max_size,
            max_speed,
            disks,
            subpixel,
            gradient_background,
        } => {
            let cfg = SyntheticConfig {
                width,
                height,
                num_shapes: shapes,
                kinds: if disks {
                    vec![ShapeKind::Rectangle, ShapeKind::Disk]
                } else {
                    vec![ShapeKind::Rectangle]
                },
                min_size,
                max_size,
                max_speed,
                subpixel,
                velocity: None,
                background: if gradient_background {
                    Background::Gradient
                } else {
                    Background::Constant(0.0)
                },
                input_len: frames.saturating_sub(1).max(1),
                mode: frame_mode(mode, num_classes),
                seed,
            };
            gen_data(&out, cfg, frames, sequences)
        }
        Command::EstimateFlow {
            frames,
            out,
            smoothness,
            iters,
        } => estimate_flow(&frames, &out, smoothness, iters),
        Command::Train(args) => train(args),
        Command::Predict {
            ckpt,
            frames,
            k,
            out,
            viz,
            flow_source,
            mode,
        } => predict(&ckpt, &frames, k, &out, viz, flow_source, mode),
        Command::Eval {
            ckpt,
            data,
            k,
            out,
            flow_source,
            ground_truth,
        } => eval(&ckpt, &data, k, &out, flow_source, ground_truth),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
