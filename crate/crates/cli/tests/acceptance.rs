//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use z2p_cli::{DatagenOptions, TrainOptions, TrainSummary};
use z2p_core::datagen::CameraRig;
use z2p_core::encoding::{FourierEncoding, ENCODING_CHANNELS};
use z2p_core::io::{
    load_model, parse_point_cloud, read_dataset, read_manifest, read_sample, save_model, write_sample, ModelBundle,
};
use z2p_core::network::{
    settings_batch, AdaInLayer, LightPosition, Settings, SettingsMode, UNetConfig, Z2pModel,
};
use z2p_core::pipeline;
use z2p_core::projection::{
    intensity, normalize_cloud, project, rasterize, Camera, PointCloud, ProjectedPoint, Vec3, ZBufferImage,
    ZBufferParams,
};
use z2p_core::training::{loss_tape, train, LossWeights, PackedDataset, TrainConfig, TrainingSample};
use z2p_tensor::gradcheck::{op_suite, GradCheck};
use z2p_tensor::{ops, ParamSet, Tape, Tensor};

type Outcome = Result<String, String>;

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL [{id}] {name}: {detail} ({secs:.1} s)");
            }
        }
    }
}

// ---------------------------------------------------------------- 1, 2

/// O(N * H * W) nearest covering point per pixel.
fn brute_force_zbuffer(points: &[ProjectedPoint], params: &ZBufferParams, w: usize, h: usize) -> Vec<f32> {
    let half = (params.window / 2) as f64;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            for p in points {
                if (p.u.round() - x as f64).abs() <= half && (p.v.round() - y as f64).abs() <= half {
                    best = best.min(p.depth);
                }
            }
            if best.is_finite() {
                out[y * w + x] = (intensity(best, params) as f32).max(f32::MIN_POSITIVE);
            }
        }
    }
    out
}

fn random_instance(rng: &mut ChaCha8Rng, case: usize) -> (Vec<ProjectedPoint>, ZBufferParams, usize, usize) {
    let w = rng.random_range(1..=64);
    let h = rng.random_range(1..=64);
    let params = ZBufferParams {
        alpha: rng.random_range(0.0..3.0),
        beta: rng.random_range(0.05..3.0),
        window: 5,
    };
    let n = rng.random_range(1..=1000);
    let points = if case % 2 == 0 {
        let mut pts: Vec<ProjectedPoint> = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = ProjectedPoint {
                u: rng.random_range(-6.0..w as f64 + 6.0),
                v: rng.random_range(-6.0..h as f64 + 6.0),
                depth: rng.random_range(0.01..6.0),
            };
            if i % 7 == 3 {
                // half-pixel centers exercise the rounding rule
                p.u = p.u.floor() + 0.5;
                p.v = p.v.floor() + 0.5;
            }
            if i % 11 == 5 {
                p.depth = pts[i - 1].depth;
            }
            pts.push(p);
        }
        pts
    } else {
        // a single point cannot be normalized
        let pts: Vec<Vec3> = (0..n.max(2))
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let (cloud, _) = normalize_cloud(&PointCloud::new(pts).unwrap()).unwrap();
        let cam = Camera::orbit(
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(-1.2..1.2),
            rng.random_range(1.5..4.0),
            rng.random_range(0.5..1.5),
            (w, h),
        )
        .unwrap();
        project(&cloud, &cam)
    };
    (points, params, w, h)
}

fn rasterizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatched = Vec::new();
    let mut pixels = 0usize;
    for case in 0..500 {
        let (points, params, w, h) = random_instance(&mut rng, case);
        let fast = rasterize(&points, &params, (w, h));
        pixels += w * h;
        if fast.intensities != brute_force_zbuffer(&points, &params, w, h) {
            mismatched.push(case);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatched.is_empty() && secs < 30.0,
        format!("500 instances, {pixels} pixels, mismatched cases {mismatched:?}, {secs:.2} s (limit 30 s)"),
    )
}

fn intensity_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e1 = (-1.0f64).exp();
    let mut worst_one = 0.0f64;
    let mut worst_e = 0.0f64;
    for _ in 0..1000 {
        let params = ZBufferParams {
            alpha: rng.random_range(0.0..5.0),
            beta: rng.random_range(0.01..5.0),
            window: 5,
        };
        worst_one = worst_one.max((intensity(params.alpha, &params) - 1.0).abs());
        worst_e = worst_e.max((intensity(params.alpha + params.beta, &params) - e1).abs());
        // the same values through the rasterizer's stored f32
        for (depth, expect) in [(params.alpha, 1.0), (params.alpha + params.beta, e1)] {
            let z = rasterize(&[ProjectedPoint { u: 3.0, v: 3.0, depth }], &params, (7, 7));
            let err = (f64::from(z.get(3, 3)) - expect).abs();
            if expect == 1.0 {
                worst_one = worst_one.max(err);
            } else {
                worst_e = worst_e.max(err);
            }
        }
    }
    let mut bad_uncovered = 0usize;
    let mut bad_covered = 0usize;
    let mut uncovered = 0usize;
    for case in 0..200 {
        let (points, params, w, h) = random_instance(&mut rng, case);
        let z = rasterize(&points, &params, (w, h));
        let half = 2.0;
        for y in 0..h {
            for x in 0..w {
                let covered = points
                    .iter()
                    .any(|p| (p.u.round() - x as f64).abs() <= half && (p.v.round() - y as f64).abs() <= half);
                let v = z.get(x, y);
                if covered {
                    bad_covered += usize::from(!(v > 0.0));
                } else {
                    uncovered += 1;
                    bad_uncovered += usize::from(v.to_bits() != 0);
                }
            }
        }
    }
    verdict(
        worst_one < 1e-6 && worst_e < 1e-6 && bad_uncovered == 0 && bad_covered == 0,
        format!(
            "|I(alpha)-1| <= {worst_one:.2e}, |I(alpha+beta)-1/e| <= {worst_e:.2e}; \
             {uncovered} uncovered pixels, {bad_uncovered} not exactly 0, {bad_covered} covered pixels at 0"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let check = GradCheck::default();
    let ops = op_suite(20, 3, &check).map_err(|e| e.to_string())?;
    let mut worst = (String::new(), 0.0f64);
    let mut failing = Vec::new();
    for r in &ops {
        if r.cases < 20 || !(r.worst.max_rel_error < 1e-4) {
            failing.push(format!("{} ({} cases, {:.2e})", r.op, r.cases, r.worst.max_rel_error));
        }
        if r.worst.max_rel_error > worst.1 {
            worst = (r.op.to_string(), r.worst.max_rel_error);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut loss_worst = 0.0f64;
    let loss_cases = 24;
    for _ in 0..loss_cases {
        let weights = LossWeights {
            mse_rgb: rng.random_range(0.1..2.0),
            l1_magnitude: rng.random_range(0.1..2.0),
            l1_alpha: rng.random_range(0.1..2.0),
        };
        let shape = [rng.random_range(1..4), 4, rng.random_range(1..7), rng.random_range(1..7)];
        let pred = Tensor::from_fn(shape, |_| rng.random_range(0.02..0.98));
        let target = Tensor::from_fn(shape, |_| rng.random_range(0.02..0.98));
        let report = check
            .run(&[pred, target], |tape, v| Ok(loss_tape(tape, v[0], v[1], &weights).expect("loss shapes").total))
            .map_err(|e| e.to_string())?;
        loss_worst = loss_worst.max(report.max_rel_error);
    }
    if !(loss_worst < 1e-4) {
        failing.push(format!("composed loss ({loss_worst:.2e})"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failing.is_empty() && secs < 300.0,
        format!(
            "{} ops x 20 shapes, worst {} {:.2e}; composed loss x {loss_cases} worst {loss_worst:.2e}; \
             failing {failing:?}; {secs:.1} s (limit 300 s)",
            ops.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Channels with exact target spread `sigma_c >= 0.1` around random means.
fn spread_input(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c * plane);
    for _ in 0..n * c {
        let sigma: f64 = rng.random_range(0.1005..3.0);
        let mu: f64 = rng.random_range(-2.0..2.0);
        let raw: Vec<f64> = (0..plane).map(|_| rng.random::<f64>() - 0.5).collect();
        let m = raw.iter().sum::<f64>() / plane as f64;
        let s = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane as f64).sqrt();
        data.extend(raw.iter().map(|v| (mu + sigma * (v - m) / s) as f32));
    }
    Tensor::new([n, c, h, w], data).unwrap()
}

fn gaussian_like(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let s: f32 = (0..12).map(|_| rng.random::<f32>()).sum();
        (s - 6.0) * std
    })
}

fn adain_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Z2pModel::new(UNetConfig::toy(), 9).map_err(|e| e.to_string())?;
    let mut layers: Vec<(AdaInLayer, ParamSet<f32>)> =
        model.adain_layers().into_iter().map(|l| (l, model.params().clone())).collect();
    // wider gamma range, including negative scales
    for _ in 0..8 {
        let c = rng.random_range(1..9);
        let style = 32;
        let mut params = ParamSet::new();
        let layer = AdaInLayer {
            channels: c,
            gamma_weight: params.add("g.w", gaussian_like(&mut rng, &[c, style], 0.4)),
            gamma_bias: params.add("g.b", gaussian_like(&mut rng, &[c], 1.0)),
            beta_weight: params.add("b.w", gaussian_like(&mut rng, &[c, style], 0.4)),
            beta_bias: params.add("b.b", gaussian_like(&mut rng, &[c], 1.0)),
            epsilon: 1e-5,
            weight_gain: 1.0,
        };
        layers.push((layer, params));
    }
    let (mut worst_mean, mut worst_std, mut channels, mut negative) = (0.0f64, 0.0f64, 0usize, 0usize);
    let mut min_sigma = f64::INFINITY;
    for (layer, params) in &layers {
        let style_dim = params.get(layer.gamma_weight).value.shape()[1];
        for _ in 0..3 {
            let (n, h, w) = (2, rng.random_range(3..24), rng.random_range(3..24));
            let x = spread_input(&mut rng, n, layer.channels, h, w);
            let style = gaussian_like(&mut rng, &[n, style_dim], 1.0);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let sv = tape.constant(style);
            let trace = layer.apply(&mut tape, params, xv, sv).map_err(|e| e.to_string())?;
            let (mu_out, sd_out) = ops::channel_stats(tape.value(trace.output)).unwrap();
            let (_, sd_in) = ops::channel_stats(&x).unwrap();
            let (gamma, beta) = (tape.value(trace.gamma), tape.value(trace.beta));
            for i in 0..n * layer.channels {
                let sigma = f64::from(sd_in.data()[i]);
                min_sigma = min_sigma.min(sigma);
                let g = f64::from(gamma.data()[i]);
                negative += usize::from(g < 0.0);
                let eps = f64::from(layer.epsilon);
                worst_mean = worst_mean.max((f64::from(mu_out.data()[i]) - f64::from(beta.data()[i])).abs());
                worst_std = worst_std.max((f64::from(sd_out.data()[i]) - g.abs() * sigma / (sigma + eps)).abs());
                channels += 1;
            }
        }
    }
    verdict(
        worst_mean < 1e-4 && worst_std < 1e-3 && min_sigma >= 0.1,
        format!(
            "{} layers, {channels} channels (min input std {min_sigma:.4}, {negative} negative gammas): \
             mean error {worst_mean:.2e} (< 1e-4), std error {worst_std:.2e} (< 1e-3)",
            layers.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn blob_zbuffer(size: usize, cx: f32, cy: f32) -> ZBufferImage {
    let intensities = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f32, (i / size) as f32);
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            if r2 < 100.0 {
                0.95 - r2 * 0.003 + (x * 0.7).sin() * 0.05
            } else {
                0.0
            }
        })
        .collect();
    ZBufferImage {
        width: size,
        height: size,
        intensities,
        params: ZBufferParams::default(),
    }
}

fn shifted(z: &ZBufferImage, dx: usize, dy: usize) -> ZBufferImage {
    let n = z.width;
    let mut out = vec![0.0; n * n];
    for y in dy..n {
        for x in dx..n {
            out[y * n + x] = z.intensities[(y - dy) * n + (x - dx)];
        }
    }
    ZBufferImage {
        intensities: out,
        ..z.clone()
    }
}

fn settings(color: [f64; 3]) -> Settings {
    Settings {
        color,
        light: LightPosition {
            azimuth: 0.6,
            elevation: 0.8,
            radius: 3.0,
        },
        material: None,
    }
}

/// Max |f(shift z) - shift f(z)| over the interior, excluding twice the
/// receptive field at the borders.
fn equivariance_deviation(model: &Z2pModel, dx: usize, dy: usize) -> f32 {
    let size = 160;
    let z = blob_zbuffer(size, 76.0, 74.0);
    let s = settings([0.3, 0.6, 0.9]);
    let a = model.forward(&z, &s).unwrap();
    let b = model.forward(&shifted(&z, dx, dy), &s).unwrap();
    let border = 2 * model.config().receptive_field_radius();
    let mut worst = 0.0f32;
    for y in border + dy..size - border {
        for x in border + dx..size - border {
            let (pa, pb) = (a.get(x - dx, y - dy), b.get(x, y));
            for c in 0..4 {
                worst = worst.max((pa[c] - pb[c]).abs());
            }
        }
    }
    worst
}

fn positional_encoding() -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..20u64 {
        let enc = FourierEncoding::sample(seed);
        let t = enc.encode(64, 48);
        if t.shape() != [ENCODING_CHANNELS, 48, 64] || ENCODING_CHANNELS != 40 {
            problems.push(format!("seed {seed}: shape {:?}", t.shape()));
        }
        if !t.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
            problems.push(format!("seed {seed}: value outside [-1, 1]"));
        }
        let plane = 64 * 48;
        for c in 0..40 {
            let expect = if c < 20 { 0.0 } else { 1.0 };
            if t.data()[c * plane] != expect {
                problems.push(format!("seed {seed}: corner channel {c} = {}", t.data()[c * plane]));
            }
        }
    }
    let mut ratios = Vec::new();
    for seed in [3u64, 7] {
        let mut plain = UNetConfig::toy();
        plain.encoding_enabled = false;
        let m_plain = Z2pModel::new(plain, seed).unwrap();
        let m_enc = Z2pModel::new(UNetConfig::toy(), seed).unwrap();
        for (dx, dy) in [(4, 0), (0, 8), (8, 4)] {
            let off = equivariance_deviation(&m_plain, dx, dy);
            let on = equivariance_deviation(&m_enc, dx, dy);
            if !(on > 10.0 * off) {
                problems.push(format!("seed {seed} shift ({dx},{dy}): on {on:.2e} vs off {off:.2e}"));
            }
            ratios.push((on, off));
        }
    }
    let min_on = ratios.iter().map(|r| r.0).fold(f32::INFINITY, f32::min);
    let max_off = ratios.iter().map(|r| r.1).fold(0.0, f32::max);
    verdict(
        problems.is_empty(),
        format!(
            "40 channels in [-1, 1], corner sin=0/cos=1 for 20 seeds; equivariance deviation \
             on >= {min_on:.2e}, off <= {max_off:.2e} over {} model/shift pairs; problems {problems:?}",
            ratios.len()
        ),
    )
}

// ---------------------------------------------------------------- toy run

const TOY_SAMPLES: usize = 200;
const TOY_STEPS: usize = 2000;
const TOY_LR: f64 = 1e-3;
const TOY_BATCH: usize = 8;

struct ToyRun {
    dir: TempDir,
    data: PathBuf,
    model_path: PathBuf,
    summary: TrainSummary,
    model: Z2pModel,
    samples: Vec<TrainingSample>,
    seconds: f64,
}

fn toy_run() -> Result<ToyRun, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("toy");
    z2p_cli::datagen(&DatagenOptions {
        count: TOY_SAMPLES,
        resolution: 64,
        seed: 2024,
        noise: 0.0,
        points: 2000,
        material: false,
        out_dir: data.clone(),
    })
    .map_err(|e| e.to_string())?;
    let model_path = dir.path().join("toy.z2pw");
    let summary = z2p_cli::train(&TrainOptions {
        data: data.clone(),
        steps: TOY_STEPS,
        lr: TOY_LR,
        batch: TOY_BATCH,
        mode: SettingsMode::Adain,
        encoding: true,
        levels: 2,
        base_channels: 8,
        seed: 0,
        init_seed: 0,
        out: model_path.clone(),
        loss_csv: dir.path().join("toy.loss.csv"),
        checkpoint_every: 0,
        log_every: 0,
    })
    .map_err(|e| e.to_string())?;
    let model = load_model(&model_path).and_then(|b| b.to_model()).map_err(|e| e.to_string())?;
    let (_, samples) = read_dataset(&data).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        dir,
        data,
        model_path,
        summary,
        model,
        samples,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn mae(pred: &z2p_core::image::RgbaImage, target: &z2p_core::image::RgbaImage) -> f64 {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum();
    sum / pred.data().len() as f64
}

/// First step (checked every 25) at which one example is reproduced with
/// per-pixel MAE < 0.05, within 1000 steps.
fn overfit_single(sample: &TrainingSample) -> Result<(Option<usize>, f64), String> {
    let data = PackedDataset::new(std::slice::from_ref(sample)).map_err(|e| e.to_string())?;
    let mut model = Z2pModel::new(UNetConfig::toy(), 1).map_err(|e| e.to_string())?;
    let mut config = TrainConfig {
        batch_size: 1,
        steps: 1000,
        seed: 1,
        ..TrainConfig::default()
    };
    config.adam.learning_rate = TOY_LR;
    let mut reached = None;
    let mut last = f64::NAN;
    train(&mut model, &data, &config, |record, model| {
        let step = record.step + 1;
        if reached.is_none() && step % 25 == 0 {
            last = mae(&model.forward(&sample.zbuffer, &sample.settings)?, &sample.target);
            if last < 0.05 {
                reached = Some(step);
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok((reached, last))
}

fn toy_training(toy: &ToyRun) -> Outcome {
    let start = Instant::now();
    let (reached, mae) = overfit_single(&toy.samples[0])?;
    let total = toy.seconds + start.elapsed().as_secs_f64();
    let (initial, last) = (toy.summary.initial.total, toy.summary.final_.total);
    verdict(
        last < initial / 5.0 && reached.is_some() && total < 1200.0,
        format!(
            "{TOY_SAMPLES} samples 64x64, 2 levels base 8, {TOY_STEPS} steps: loss {initial:.4} -> {last:.4} \
             (ratio {:.1}, need > 5); overfit MAE < 0.05 at step {} (last MAE {mae:.4}); {total:.0} s (limit 1200 s)",
            initial / last,
            reached.map_or("never".to_string(), |s| s.to_string())
        ),
    )
}

// ---------------------------------------------------------------- 7

fn masked_channel_mean(img: &z2p_core::image::RgbaImage, channel: usize) -> Option<f64> {
    let alpha = img.channel(3);
    let values = img.channel(channel);
    let (sum, n) = alpha
        .iter()
        .zip(values)
        .filter(|(a, _)| **a > 0.5)
        .fold((0.0f64, 0usize), |(s, n), (_, v)| (s + f64::from(*v), n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn mechanism_check(model: &Z2pModel, z: &ZBufferImage) -> Result<(), String> {
    let zt = z.to_tensor();
    let run = |color: [f64; 3]| {
        let mut tape = Tape::new();
        let batch = settings_batch(&[settings(color)]).unwrap();
        let pass = model.forward_tape(&mut tape, &zt, &batch).unwrap();
        (tape, pass)
    };
    let (ta, pa) = run([1.0, 0.0, 0.0]);
    let (tb, pb) = run([0.0, 0.0, 1.0]);
    if pa.norms.is_empty() {
        return Err("no normalization layers".into());
    }
    if ta.value(pa.norms[0].normalized) != tb.value(pb.norms[0].normalized) {
        return Err("first normalized map depends on settings".into());
    }
    for (tape, pass) in [(&ta, &pa), (&tb, &pb)] {
        for (i, trace) in pass.norms.iter().enumerate() {
            let scaled =
                ops::channel_binary(tape.value(trace.normalized), tape.value(trace.gamma), ops::ChannelOp::Mul).unwrap();
            let rebuilt = ops::channel_binary(&scaled, tape.value(trace.beta), ops::ChannelOp::Add).unwrap();
            if &rebuilt != tape.value(trace.output) {
                return Err(format!("layer {i} output is not gamma * normalized + beta"));
            }
        }
    }
    let style_a = ta.value(pa.style.ok_or("no style vector")?).clone();
    let style_b = tb.value(pb.style.ok_or("no style vector")?).clone();
    for (i, layer) in model.adain_layers().iter().enumerate() {
        let x = ta.value(pa.norms[i].input).clone();
        let normalize = |style: &Tensor<f32>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let sv = tape.constant(style.clone());
            let trace = layer.apply(&mut tape, model.params(), xv, sv).unwrap();
            tape.value(trace.normalized).clone()
        };
        if normalize(&style_a) != normalize(&style_b) {
            return Err(format!("layer {i} normalized map depends on the style"));
        }
    }
    Ok(())
}

fn disentanglement(toy: &ToyRun) -> Outcome {
    let mut failures = Vec::new();
    let (mut min_red, mut min_blue) = (f64::INFINITY, f64::INFINITY);
    let cases = 20;
    for (i, sample) in toy.samples.iter().take(cases).enumerate() {
        let with_color = |color| Settings {
            color,
            ..sample.settings
        };
        let red = toy.model.forward(&sample.zbuffer, &with_color([1.0, 0.0, 0.0])).unwrap();
        let blue = toy.model.forward(&sample.zbuffer, &with_color([0.0, 0.0, 1.0])).unwrap();
        match (
            masked_channel_mean(&red, 0),
            masked_channel_mean(&blue, 0),
            masked_channel_mean(&red, 2),
            masked_channel_mean(&blue, 2),
        ) {
            (Some(rr), Some(br), Some(rb), Some(bb)) => {
                min_red = min_red.min(rr - br);
                min_blue = min_blue.min(bb - rb);
                if !(rr > br && bb > rb) {
                    failures.push(format!("sample {i}: red {rr:.3}/{br:.3} blue {rb:.3}/{bb:.3}"));
                }
            }
            _ => failures.push(format!("sample {i}: empty alpha > 0.5 region")),
        }
    }
    let mechanism = mechanism_check(&toy.model, &toy.samples[0].zbuffer);
    verdict(
        failures.is_empty() && mechanism.is_ok(),
        format!(
            "{cases} z-buffers: min red margin {min_red:.3}, min blue margin {min_blue:.3}; failures {failures:?}; \
             normalized maps settings-independent: {}",
            match &mechanism {
                Ok(()) => "yes".to_string(),
                Err(e) => format!("no ({e})"),
            }
        ),
    )
}

// ---------------------------------------------------------------- 8

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn performance(toy: &ToyRun) -> Outcome {
    let cloud = z2p_cli::bench_cloud(5000, 0).map_err(|e| e.to_string())?;
    let rig = CameraRig::default();
    let cam = rig.camera(256, 256).unwrap();
    let params = ZBufferParams::default();
    let projected = project(&cloud, &cam);
    let zbuffer_ms = median(
        (0..21)
            .map(|_| {
                let t = Instant::now();
                let z = rasterize(&projected, &params, (256, 256));
                std::hint::black_box(z);
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect(),
    );
    let s = settings([0.7, 0.4, 0.2]);
    let runs: Vec<_> = (0..7)
        .map(|_| pipeline::render(&toy.model, &cloud, &rig, &s, (256, 256), &params).unwrap().timings)
        .collect();
    let total_ms = median(runs.iter().map(|t| t.total_ms).collect());
    let forward_ms = median(runs.iter().map(|t| t.forward_ms).collect());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        zbuffer_ms < 50.0 && total_ms < 1000.0,
        format!(
            "5000 points at 256x256: zbuffer {zbuffer_ms:.2} ms (limit 50), end-to-end toy render {total_ms:.1} ms \
             (forward {forward_ms:.1}; limit 1000); {threads} hardware thread(s)"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ablations(toy: &ToyRun) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, flags) in [("append", &["--mode", "append"][..]), ("no-encoding", &["--no-encoding"][..])] {
        let out = toy.dir.path().join(format!("{name}.z2pw"));
        let csv = toy.dir.path().join(format!("{name}.loss.csv"));
        let mut args = vec![
            "z2p", "train", "--data", s(&toy.data), "--steps", "150", "--lr", "1e-3", "--batch", "8", "--levels", "2",
            "--base-channels", "8", "--log-every", "0", "--out", s(&out), "--loss-csv", s(&csv),
        ];
        args.extend_from_slice(flags);
        let code = z2p_cli::run(args);
        if code != 0 {
            ok = false;
            notes.push(format!("{name}: exit code {code}"));
            continue;
        }
        let bundle = load_model(&out).map_err(|e| e.to_string())?;
        let has_adain = bundle.parameters.iter().any(|(n, _)| n.contains("adain"));
        let has_mapping = bundle.parameters.iter().any(|(n, _)| n.starts_with("mapping"));
        let recorded = match name {
            "append" => {
                bundle.config.settings_mode == SettingsMode::FeatureAppend
                    && bundle.config.encoding_enabled
                    && !has_adain
                    && !has_mapping
            }
            _ => {
                bundle.config.settings_mode == SettingsMode::Adain
                    && !bundle.config.encoding_enabled
                    && bundle.encoding.is_none()
                    && bundle.config.input_channels() == 1
            }
        };
        let losses: Vec<f64> = std::fs::read_to_string(&csv)
            .map_err(|e| e.to_string())?
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let finite = losses.len() == 150 && losses.iter().all(|l| l.is_finite());
        ok &= recorded && finite;
        notes.push(format!(
            "{name}: mode {} encoding {} adain params {has_adain}, {} steps, loss {:.4} -> {:.4}, bundle final {:.4}",
            bundle.config.settings_mode,
            bundle.config.encoding_enabled,
            losses.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN),
            bundle.provenance.final_loss
        ));
    }
    verdict(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 10

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const XYZ_SEED: &str = "# scan\n0.1 0.2 0.3\n-1.5 2.25 1e-3\n\n4 5 6 0.5 0.5 0.5\n7.0 8.0 9.0\n";
const PLY_SEED: &str = "ply\nformat ascii 1.0\ncomment fuzz\nelement vertex 3\nproperty float x\nproperty float y\n\
property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";

fn mutate(rng: &mut ChaCha8Rng, seed: &[u8]) -> Vec<u8> {
    const TOKENS: &[&[u8]] = &[
        b"nan", b"inf", b"-inf", b"1e999", b"-", b"ply", b"end_header", b"element vertex 99999999999",
        b"element vertex 2", b"property list uchar int x", b"format binary_little_endian 1.0", b"\n", b" ", b"\t",
        b"\r\n", b"#", b"0x10", b"1.5.2", b"\xff\xfe", b"18446744073709551616",
    ];
    let mut v = seed.to_vec();
    for _ in 0..rng.random_range(1..6) {
        let at = if v.is_empty() { 0 } else { rng.random_range(0..=v.len()) };
        match rng.random_range(0..6) {
            0 if !v.is_empty() => {
                let i = at.min(v.len() - 1);
                v[i] ^= 1 << rng.random_range(0..8);
            }
            1 if at < v.len() => {
                let end = (at + rng.random_range(1..8)).min(v.len());
                v.drain(at..end);
            }
            2 => {
                let t = TOKENS[rng.random_range(0..TOKENS.len())];
                v.splice(at..at, t.iter().copied());
            }
            3 => v.truncate(at),
            4 => v.insert(at, rng.random()),
            _ => {
                if !v.is_empty() {
                    let src = rng.random_range(0..v.len());
                    let len = rng.random_range(1..=(v.len() - src).min(16));
                    let chunk = v[src..src + len].to_vec();
                    v.splice(at..at, chunk);
                }
            }
        }
    }
    v
}

fn io_round_trips(toy: &ToyRun) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut bundles = vec![toy.model_path.clone()];
    for name in ["append", "no-encoding"] {
        let p = toy.dir.path().join(format!("{name}.z2pw"));
        if p.exists() {
            bundles.push(p);
        }
    }
    for path in &bundles {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        let bundle = ModelBundle::from_bytes(&bytes).map_err(|e| e.to_string())?;
        let model = bundle.to_model().map_err(|e| e.to_string())?;
        let again = ModelBundle::from_model(&model, bundle.provenance).to_bytes();
        let copy = toy.dir.path().join("copy.z2pw");
        save_model(&bundle, &copy).map_err(|e| e.to_string())?;
        let stable = bundle.to_bytes() == bytes && again == bytes && std::fs::read(&copy).unwrap() == bytes;
        ok &= stable;
        if !stable {
            notes.push(format!("{} not bitwise stable", path.display()));
        }
    }
    notes.push(format!("{} bundles bitwise stable through load/rebuild/save", bundles.len()));

    let manifest = read_manifest(&toy.data).map_err(|e| e.to_string())?;
    let rewritten = toy.dir.path().join("rewritten");
    for name in &manifest.samples {
        let sample = read_sample(&toy.data.join(name)).map_err(|e| e.to_string())?;
        write_sample(&rewritten.join(name), &sample).map_err(|e| e.to_string())?;
    }
    let original: Vec<_> = tree(&toy.data).into_iter().filter(|(p, _)| p != Path::new("manifest.json")).collect();
    let same_samples = tree(&rewritten) == original;
    let regenerated = toy.dir.path().join("regenerated");
    z2p_cli::datagen(&DatagenOptions {
        count: TOY_SAMPLES,
        resolution: 64,
        seed: 2024,
        noise: 0.0,
        points: 2000,
        material: false,
        out_dir: regenerated.clone(),
    })
    .map_err(|e| e.to_string())?;
    let same_regen = tree(&regenerated) == tree(&toy.data);
    ok &= same_samples && same_regen;
    notes.push(format!(
        "{} samples rewritten bitwise: {same_samples}; regenerated from seed bitwise: {same_regen}",
        manifest.samples.len()
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut panics, mut errors, mut parsed, mut bad_ok) = (0usize, 0usize, 0usize, 0usize);
    let mutations = 10_000;
    let previous_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..mutations {
        let seed = if i % 2 == 0 { XYZ_SEED } else { PLY_SEED };
        let input = mutate(&mut rng, seed.as_bytes());
        match catch_unwind(|| parse_point_cloud(&input)) {
            Err(_) => panics += 1,
            Ok(Err(e)) => {
                errors += 1;
                if e.to_string().is_empty() {
                    bad_ok += 1;
                }
            }
            Ok(Ok(cloud)) => {
                parsed += 1;
                if cloud.is_empty() || !cloud.points().iter().all(|p| p.iter().all(|c| c.is_finite())) {
                    bad_ok += 1;
                }
            }
        }
    }
    std::panic::set_hook(previous_hook);
    ok &= panics == 0 && bad_ok == 0;
    notes.push(format!(
        "{mutations} PLY/XYZ mutations: {errors} structured errors, {parsed} valid clouds, {panics} panics, \
         {bad_ok} malformed results"
    ));
    verdict(ok, notes.join("; "))
}

fn main() {
    // skip when the test binary is only listed
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut report = Report { failures: 0 };
    report.run(1, "rasterizer matches brute force", rasterizer_oracle);
    report.run(2, "depth intensity and empty pixels", intensity_points);
    report.run(3, "finite-difference gradient suite", gradient_suite);
    report.run(4, "AdaIN output statistics", adain_statistics);
    report.run(5, "positional encoding", positional_encoding);

    let toy = match catch_unwind(toy_run) {
        Ok(Ok(toy)) => Some(toy),
        Ok(Err(e)) => {
            println!("toy run failed: {e}");
            None
        }
        Err(_) => {
            println!("toy run panicked");
            None
        }
    };
    let with_toy = |f: fn(&ToyRun) -> Outcome| {
        let toy = toy.as_ref();
        move || toy.map_or_else(|| Err("toy run unavailable".to_string()), f)
    };
    report.run(6, "toy training", with_toy(toy_training));
    report.run(7, "control disentanglement", with_toy(disentanglement));
    report.run(8, "run time", with_toy(performance));
    report.run(9, "ablation variants", with_toy(ablations));
    report.run(10, "I/O round trips and parser fuzzing", with_toy(io_round_trips));

    println!(
        "acceptance: {} of 10 passed in {:.0} s",
        10 - report.failures,
        start.elapsed().as_secs_f64()
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}
