//! Acceptance criteria 1-10, one pass/fail line each.
//!
//! Runs without the libtest harness so the lines always show:
//! `cargo test -p flowcast --test acceptance`.

use std::time::{Duration, Instant};

use flowcast::dataset::{
    generate_synthetic_frames, generate_synthetic_sequence, Background, Sequence, SyntheticConfig,
};
use flowcast::flow::{
    decode_flo, encode_flo, horn_schunck_with_energy, read_flo, warp_by_flow, write_flo, FlowField,
};
use flowcast::metrics::{psnr, psnr_from_mse, ssim, SSIM_K1};
use flowcast::model::{
    apply_transform, decode_checkpoint, encode_checkpoint, identity_transform, init_params,
    load_checkpoint, predict_next, save_checkpoint, ChannelScale, ModelConfig,
};
use flowcast::objectives::{loss_final, loss_gdl, loss_l1, loss_of, loss_st, LossWeights};
use flowcast::tensor::gradcheck::{finite_diff_check_many, project};
use flowcast::tensor::layers::{convlstm_cell_step, ConvLstmWeights, Mode};
use flowcast::tensor::{Tape, Tensor, Var};
use flowcast::trainer::{
    evaluate, train, train_with, Control, SampleScores, TrainConfig, TrainObserver,
};
use flowcast::{Error, FrameMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so relu and abs stay off their kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut run = |name: &'static str,
                   f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> flowcast::Result<Var<'t>>,
                   inputs: Vec<Tensor>| {
        let e = finite_diff_check_many(f, &inputs, FD_STEP).map_err(|e| format!("{name}: {e}"))?;
        worst.push((name, e));
        Ok::<_, String>(())
    };

    run(
        "conv2d",
        &|t, v| project(t, v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?),
        vec![
            uniform(&mut rng, &[2, 2, 4, 5], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        ],
    )?;
    run(
        "conv3d",
        &|t, v| project(t, v[0].conv3d(&v[1], Some(&v[2]), 1, 1)?),
        vec![
            uniform(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 2, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
    )?;
    run(
        "batch_norm (train)",
        &|t, v| project(t, v[0].batch_norm(&v[1], &v[2], None, 1e-5)?.0),
        vec![
            uniform(&mut rng, &[2, 3, 3, 4], -1.0, 1.0),
            uniform(&mut rng, &[3], 0.5, 1.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
    )?;
    let running = flowcast::tensor::BatchStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.2, 0.8],
    };
    run(
        "batch_norm (eval)",
        &move |t, v| project(t, v[0].batch_norm(&v[1], &v[2], Some(&running), 1e-5)?.0),
        vec![
            uniform(&mut rng, &[2, 3, 3, 4], -1.0, 1.0),
            uniform(&mut rng, &[3], 0.5, 1.5),
            uniform(&mut rng, &[3], -0.5, 0.5),
        ],
    )?;
    run(
        "relu",
        &|t, v| project(t, v[0].relu()?),
        vec![off_zero(&mut rng, &[2, 3, 4, 4])],
    )?;
    run(
        "sigmoid",
        &|t, v| project(t, v[0].sigmoid()?),
        vec![uniform(&mut rng, &[2, 3, 4, 4], -3.0, 3.0)],
    )?;
    run(
        "tanh",
        &|t, v| project(t, v[0].tanh()?),
        vec![uniform(&mut rng, &[2, 3, 4, 4], -3.0, 3.0)],
    )?;
    run(
        "ln",
        &|t, v| project(t, v[0].ln()?),
        vec![uniform(&mut rng, &[2, 3, 4, 4], 0.2, 2.0)],
    )?;
    run(
        "softmax",
        &|t, v| project(t, v[0].softmax_channels()?),
        vec![uniform(&mut rng, &[2, 4, 3, 3], -2.0, 2.0)],
    )?;
    run(
        "convlstm_cell_step",
        &|t, v| {
            let w = ConvLstmWeights {
                w_x: v[3],
                w_h: v[4],
                bias: v[5],
            };
            let (h, c) = convlstm_cell_step(&v[0], &v[1], &v[2], &w)?;
            project(t, Var::concat(&[h, c], 1)?)
        },
        vec![
            uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[8, 2, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[8, 2, 3, 3], -0.5, 0.5),
            uniform(&mut rng, &[8], -0.5, 0.5),
        ],
    )?;
    // Coordinates strictly between pixels, inside the image.
    let coords = Tensor::from_fn(&[1, 2, 4, 5], |i| {
        let limit: f64 = if i < 20 { 4.0 } else { 3.0 };
        rng.gen_range(0.0..limit).floor() + rng.gen_range(0.2..0.8)
    });
    run(
        "bilinear_sample",
        &|t, v| project(t, v[0].bilinear_sample(&v[1])?),
        vec![uniform(&mut rng, &[1, 2, 4, 5], -1.0, 1.0), coords],
    )?;

    let (p, q) = (
        uniform(&mut rng, &[2, 2, 5, 6], 0.0, 1.0),
        uniform(&mut rng, &[2, 2, 5, 6], 0.0, 1.0),
    );
    run(
        "loss_of",
        &|_, v| loss_of(&v[0], &v[1]),
        vec![p.clone(), q.clone()],
    )?;
    run(
        "loss_l1",
        &|_, v| loss_l1(&v[0], &v[1]),
        vec![p.clone(), q.clone()],
    )?;
    run(
        "loss_gdl (alpha 1)",
        &|_, v| loss_gdl(&v[0], &v[1], 1.0),
        vec![p.clone(), q.clone()],
    )?;
    run(
        "loss_gdl (alpha 2)",
        &|_, v| loss_gdl(&v[0], &v[1], 2.0),
        vec![p.clone(), q.clone()],
    )?;
    run(
        "loss_st",
        &|_, v| loss_st(&v[0], &v[1], 1.0),
        vec![p.clone(), q.clone()],
    )?;
    let weights = LossWeights {
        lambda_of: 0.7,
        lambda_st: 1.3,
        ..LossWeights::default()
    };
    run(
        "loss_final",
        &move |_, v| Ok(loss_final(&v[0], &v[1], &v[2], &v[3], &weights)?.total),
        vec![
            p.clone(),
            q.clone(),
            uniform(&mut rng, &[2, 2, 5, 6], -1.0, 1.0),
            uniform(&mut rng, &[2, 2, 5, 6], -1.0, 1.0),
        ],
    )?;

    let elapsed = start.elapsed();
    let (name, max) = worst.iter().fold(
        ("", 0.0f64),
        |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc },
    );
    check(
        max < FD_TOL && elapsed < Duration::from_secs(60),
        format!(
            "{} ops, worst rel err {max:.2e} ({name}), {:.1}s",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn ulps(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn criterion_loss_oracles() -> Outcome {
    let tape = Tape::new();
    let target = tape
        .constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    let zeros = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    let gdl = loss_gdl(&zeros, &target, 1.0).unwrap().item();
    if gdl != 6.0 {
        return Err(format!("gdl hand example gave {gdl}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = tape
        .constant(uniform(&mut rng, &[2, 3, 6, 7], 0.0, 1.0))
        .unwrap();
    let f = tape
        .constant(uniform(&mut rng, &[2, 2, 6, 7], -2.0, 2.0))
        .unwrap();
    let w = LossWeights::default();
    let zeros_on_identity = [
        loss_of(&f, &f).unwrap().item(),
        loss_l1(&x, &x).unwrap().item(),
        loss_gdl(&x, &x, 1.0).unwrap().item(),
        loss_gdl(&x, &x, 2.0).unwrap().item(),
        loss_st(&x, &x, 1.0).unwrap().item(),
        loss_final(&x, &x, &f, &f, &w).unwrap().total.item(),
    ];
    if zeros_on_identity.iter().any(|&v| v != 0.0) {
        return Err(format!(
            "non-zero loss on identical inputs: {zeros_on_identity:?}"
        ));
    }

    let mut worst = 0;
    for _ in 0..100 {
        let tape = Tape::new();
        let shape = [
            rng.gen_range(1..3),
            3,
            rng.gen_range(2..7),
            rng.gen_range(2..7),
        ];
        let fshape = [shape[0], 2, shape[2], shape[3]];
        let c = |t: Tensor| tape.constant(t).unwrap();
        let (pf, tf) = (
            c(uniform(&mut rng, &shape, 0.0, 1.0)),
            c(uniform(&mut rng, &shape, 0.0, 1.0)),
        );
        let (pl, tl) = (
            c(uniform(&mut rng, &fshape, -3.0, 3.0)),
            c(uniform(&mut rng, &fshape, -3.0, 3.0)),
        );
        let weights = LossWeights {
            lambda_of: rng.gen_range(0.0..5.0),
            lambda_st: rng.gen_range(0.0..5.0),
            alpha: rng.gen_range(1.0..3.0),
            mode: FrameMode::Rgb,
        };
        let total = loss_final(&pf, &tf, &pl, &tl, &weights)
            .unwrap()
            .total
            .item();
        let of = loss_of(&pl, &tl).unwrap().item();
        let st = loss_st(&pf, &tf, weights.alpha).unwrap().item();
        worst = worst.max(ulps(total, weights.lambda_of * of + weights.lambda_st * st));
    }
    check(worst <= 1, format!("gdl example = 6, zero on identical inputs, decomposition within {worst} ulp over 100 cases"))
}

// ---------------------------------------------------------------- 3

fn criterion_warp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let (b, c, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(2..12),
            rng.gen_range(2..12),
        );
        let img = uniform(&mut rng, &[b, c, h, w], -5.0, 5.0);
        let tape = Tape::new();
        let out = apply_transform(
            &tape.constant(img.clone()).unwrap(),
            &tape.constant(identity_transform(b, h, w)).unwrap(),
        )
        .unwrap()
        .value();
        if out
            .data()
            .iter()
            .zip(img.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("identity transform changed image {case}"));
        }
    }

    let mut worst = 0.0f64;
    for &(tx, ty) in &[(0.75f32, -1.25f32), (2.0, 0.5), (-0.375, 3.125), (0.0, 0.0)] {
        let (h, w) = (9, 13);
        let img = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
        let t = Tensor::from_fn(&[1, 6, h, w], |i| {
            [1.0, 0.0, tx as f64, 0.0, 1.0, ty as f64][i / (h * w)]
        });
        let tape = Tape::new();
        let by_transform = apply_transform(
            &tape
                .constant(img.clone().reshape(&[1, 3, h, w]).unwrap())
                .unwrap(),
            &tape.constant(t).unwrap(),
        )
        .unwrap()
        .value();
        let by_flow = warp_by_flow(&img, &FlowField::uniform(w, h, tx, ty)).unwrap();
        worst = worst.max(by_transform.max_abs_diff(&by_flow.reshape(&[1, 3, h, w]).unwrap()));
    }
    if worst > 1e-12 {
        return Err(format!(
            "translation transform differs from flow warp by {worst:e}"
        ));
    }

    let config = ModelConfig {
        width: 10,
        height: 8,
        input_len: 3,
        mode: FrameMode::Rgb,
        channel_scale: ChannelScale::new(1, 16).unwrap(),
    };
    let params = init_params(config, 9).unwrap();
    let tape = Tape::new();
    let vars = params.register(&tape, false).unwrap();
    let frames = tape
        .constant(uniform(&mut rng, &[2, 3, 3, 8, 10], 0.0, 1.0))
        .unwrap();
    let flows = tape
        .constant(uniform(&mut rng, &[2, 2, 2, 8, 10], -2.0, 2.0))
        .unwrap();
    let pred = predict_next(&params, &vars, &frames, &flows, Mode::Train).unwrap();
    let last = frames
        .slice(1, 2, 1)
        .unwrap()
        .value()
        .reshape(&[2, 3, 8, 10])
        .unwrap();
    let identity = pred.transform.value().data() == identity_transform(2, 8, 10).data()
        && pred.warped.value().data() == last.data();
    check(
        identity,
        format!("50 identity warps bitwise exact, translation vs flow warp {worst:.1e}, fresh motion network is the identity"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_metrics() -> Outcome {
    let a = Tensor::full(&[3, 16, 16], 0.5);
    let noise = Tensor::from_fn(&[3, 16, 16], |i| if i % 2 == 0 { 0.6 } else { 0.4 });
    let p = psnr(&a, &noise, 1.0).unwrap();
    let p_exact = psnr_from_mse(0.01, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, &[3, 20, 24], 0.0, 1.0);
    let y = uniform(&mut rng, &[3, 20, 24], 0.0, 1.0);
    let self_sim = ssim(&x, &x, 1.0).unwrap();
    let asym = (ssim(&x, &y, 1.0).unwrap() - ssim(&y, &x, 1.0).unwrap()).abs();
    let c1 = SSIM_K1 * SSIM_K1;
    let constant = ssim(
        &Tensor::zeros(&[1, 16, 16]),
        &Tensor::full(&[1, 16, 16], 1.0),
        1.0,
    )
    .unwrap();
    let ok = (p - 20.0).abs() <= 1e-9
        && (p_exact - 20.0).abs() <= 1e-9
        && (self_sim - 1.0).abs() <= 1e-12
        && asym <= 1e-12
        && (constant - c1 / (1.0 + c1)).abs() <= 1e-9;
    check(
        ok,
        format!(
            "psnr {p:.12} dB, ssim(a,a) - 1 = {:.1e}, asymmetry {asym:.1e}, constant pair {constant:.10} vs {:.10}",
            self_sim - 1.0,
            c1 / (1.0 + c1)
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_flow_estimator() -> Outcome {
    let (h, w) = (32, 64);
    let blob = |cx: f64, cy: f64| {
        Tensor::from_fn(&[h, w], |i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * 4.0f64.powi(2))).exp()
        })
    };
    let a = blob(30.0, 15.5);
    let b = blob(31.0, 15.5);
    let start = Instant::now();
    let run = horn_schunck_with_energy(&a, &b, 0.01, 200).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let truth = FlowField::uniform(w, h, 1.0, 0.0);
    let errors = run.flow.endpoint_errors(&truth).unwrap();
    let support: Vec<f64> = errors
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .filter(|(_, (p, q))| p.max(**q) > 0.1)
        .map(|(e, _)| *e)
        .collect();
    let epe = support.iter().sum::<f64>() / support.len() as f64;
    check(
        epe < 0.5 && elapsed < Duration::from_secs(5),
        format!(
            "blob EPE {epe:.3} px over {} px, {:.2}s",
            support.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6-8

/// Stops training once `goal` holds at an evaluation; remembers the last scores.
struct EarlyStop<F: Fn(&SampleScores) -> bool> {
    goal: F,
    last: Option<(usize, SampleScores)>,
}

impl<F: Fn(&SampleScores) -> bool> TrainObserver for EarlyStop<F> {
    fn on_eval(&mut self, step: usize, scores: &SampleScores) -> flowcast::Result<Control> {
        self.last = Some((step, *scores));
        Ok(if (self.goal)(scores) {
            Control::Stop
        } else {
            Control::Continue
        })
    }
}

fn overfit_config(mode: FrameMode) -> TrainConfig {
    TrainConfig {
        steps: 2000,
        batch_size: 1,
        mode,
        input_len: 5,
        channel_scale: ChannelScale::new(1, 8).unwrap(),
        eval_interval: Some(25),
        log_wall_ms: false,
        ..TrainConfig::default()
    }
}

fn moving_square(mode: FrameMode, size: usize, shapes: usize) -> SyntheticConfig {
    SyntheticConfig {
        width: 64,
        height: 32,
        num_shapes: shapes,
        min_size: size,
        max_size: size,
        velocity: Some((1.0, 0.0)),
        background: Background::Constant(0.1),
        input_len: 5,
        mode,
        seed: 3,
        ..SyntheticConfig::default()
    }
}

fn criterion_overfit_rgb() -> Outcome {
    let sample = generate_synthetic_sequence(&moving_square(FrameMode::Rgb, 4, 1))
        .map_err(|e| e.to_string())?;
    let data = [sample];
    let mut obs = EarlyStop {
        goal: |s: &SampleScores| s.psnr >= 30.0 && s.ssim >= 0.95 && s.flow_epe < 0.2,
        last: None,
    };
    let start = Instant::now();
    train_with(&data, &overfit_config(FrameMode::Rgb), None, &mut obs)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (step, s) = obs.last.ok_or("no evaluation ran")?;
    check(
        (obs.goal)(&s) && elapsed < Duration::from_secs(600),
        format!(
            "step {step}: PSNR {:.2} dB, SSIM {:.4}, flow EPE {:.3} px, {:.0}s",
            s.psnr,
            s.ssim,
            s.flow_epe,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_overfit_semantic() -> Outcome {
    let mode = FrameMode::Semantic { num_classes: 3 };
    let sample =
        generate_synthetic_sequence(&moving_square(mode, 8, 2)).map_err(|e| e.to_string())?;
    let data = [sample];
    let mut obs = EarlyStop {
        goal: |s: &SampleScores| s.accuracy.is_some_and(|a| a >= 0.99),
        last: None,
    };
    let start = Instant::now();
    train_with(&data, &overfit_config(mode), None, &mut obs).map_err(|e| e.to_string())?;
    let (step, s) = obs.last.ok_or("no evaluation ran")?;
    let acc = s.accuracy.unwrap_or(0.0);
    check(
        acc >= 0.99,
        format!(
            "step {step}: argmax accuracy {:.2}%, {:.0}s",
            100.0 * acc,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_rollout() -> Outcome {
    let cfg = SyntheticConfig {
        velocity: Some((0.0, 0.0)),
        ..moving_square(FrameMode::Rgb, 6, 2)
    };
    let (frames, flows) = generate_synthetic_frames(&cfg, 5 + 3).map_err(|e| e.to_string())?;
    let seq = Sequence {
        id: "static".into(),
        mode: FrameMode::Rgb,
        frames,
        flows,
    };
    let data = seq.samples(5).map_err(|e| e.to_string())?;
    let mut obs = EarlyStop {
        goal: |s: &SampleScores| s.psnr >= 35.0 && s.ssim >= 0.99,
        last: None,
    };
    let outcome = train_with(&data, &overfit_config(FrameMode::Rgb), None, &mut obs)
        .map_err(|e| e.to_string())?;
    let report = evaluate(
        &[seq],
        &outcome.checkpoint.params,
        3,
        flowcast::model::FlowSource::Model,
    )
    .map_err(|e| e.to_string())?;
    let psnrs: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{:.2}", r.psnr_db))
        .collect();
    check(
        report.rows.len() == 3 && report.rows.iter().all(|r| r.psnr_db >= 30.0),
        format!(
            "trained {} steps; rollout PSNR per step [{}] dB",
            outcome.steps,
            psnrs.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_reproducibility() -> Outcome {
    let data: Vec<_> = (0..2)
        .map(|seed| {
            generate_synthetic_sequence(&SyntheticConfig {
                seed,
                ..moving_square(FrameMode::Rgb, 5, 1)
            })
        })
        .collect::<Result<_, _>>()
        .map_err(|e: Error| e.to_string())?;
    let cfg = TrainConfig {
        steps: 8,
        batch_size: 2,
        seed: 11,
        ..overfit_config(FrameMode::Rgb)
    };
    let cfg = TrainConfig {
        eval_interval: None,
        ..cfg
    };
    let a = encode_checkpoint(&train(&data, &cfg).map_err(|e| e.to_string())?.checkpoint);
    let b = encode_checkpoint(&train(&data, &cfg).map_err(|e| e.to_string())?.checkpoint);
    if a != b {
        return Err("two identical runs produced different checkpoints".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("half.fcst");
    let half = train(
        &data,
        &TrainConfig {
            steps: 3,
            ..cfg.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    save_checkpoint(&half.checkpoint, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let resumed = train_with(&data, &cfg, Some(loaded), &mut ()).map_err(|e| e.to_string())?;
    check(
        encode_checkpoint(&resumed.checkpoint) == a,
        format!(
            "identical runs bitwise equal ({} bytes); 3 + 5 resumed steps equal 8 uninterrupted",
            a.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (w, h) = (17, 9);
    let flow = FlowField::new(
        w,
        h,
        (0..w * h).map(|_| rng.gen_range(-8.0f32..8.0)).collect(),
        (0..w * h).map(|_| rng.gen_range(-8.0f32..8.0)).collect(),
    )
    .unwrap();
    let bytes = encode_flo(&flow);
    let flo_path = dir.path().join("a.flo");
    write_flo(&flow, &flo_path).unwrap();
    let back = read_flo(&flo_path).unwrap();
    let flo_ok = back == flow
        && encode_flo(&decode_flo(&bytes).unwrap()) == bytes
        && std::fs::read(&flo_path).unwrap() == bytes;
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let flo_magic = matches!(decode_flo(&bad), Err(Error::Format(_)));

    let config = ModelConfig {
        width: 12,
        height: 8,
        input_len: 3,
        mode: FrameMode::Semantic { num_classes: 4 },
        channel_scale: ChannelScale::new(1, 16).unwrap(),
    };
    let samples = [generate_synthetic_sequence(&SyntheticConfig {
        width: 12,
        height: 8,
        max_size: 3,
        min_size: 2,
        input_len: 3,
        mode: config.mode,
        ..SyntheticConfig::default()
    })
    .unwrap()];
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 1,
        input_len: 3,
        mode: config.mode,
        channel_scale: config.channel_scale,
        ..TrainConfig::default()
    };
    let ckpt = train(&samples, &cfg).map_err(|e| e.to_string())?.checkpoint;
    let bytes = encode_checkpoint(&ckpt);
    let ck_path = dir.path().join("m.fcst");
    save_checkpoint(&ckpt, &ck_path).unwrap();
    let ck_ok = encode_checkpoint(&decode_checkpoint(&bytes).unwrap()) == bytes
        && encode_checkpoint(&load_checkpoint(&ck_path).unwrap()) == bytes
        && std::fs::read(&ck_path).unwrap() == bytes;

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let crc = matches!(decode_checkpoint(&flipped), Err(Error::Format(m)) if m.contains("CRC"));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    let magic =
        matches!(decode_checkpoint(&wrong_magic), Err(Error::Format(m)) if m.contains("magic"));

    check(
        flo_ok && flo_magic && ck_ok && crc && magic,
        format!("flo round trip {flo_ok}, flo bad magic rejected {flo_magic}, checkpoint round trip {ck_ok}, CRC rejected {crc}, magic rejected {magic}"),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("gradient suite", criterion_gradients),
        ("loss oracles", criterion_loss_oracles),
        ("warp correctness", criterion_warp),
        ("metric oracles", criterion_metrics),
        ("flow estimator", criterion_flow_estimator),
        ("end-to-end overfit", criterion_overfit_rgb),
        ("semantic mode", criterion_overfit_semantic),
        ("rollout", criterion_rollout),
        ("reproducibility", criterion_reproducibility),
        ("format round trips", criterion_formats),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {status} {name}: {detail}", i + 1);
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
