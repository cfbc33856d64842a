use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use z2p_core::datagen::{make_dataset, sample_points, sample_scene, CameraRig, DatagenConfig};
use z2p_core::io::{load_model, read_dataset, read_point_cloud, save_model, write_dataset, write_png_rgba, ModelBundle, Provenance};
use z2p_core::network::{LightPosition, Material, Settings, SettingsMode, UNetConfig, Z2pModel};
use z2p_core::pipeline::{self, StageTimings};
use z2p_core::projection::{normalize_cloud, PointCloud, ZBufferParams};
use z2p_core::training::{
    evaluate, train as train_model, write_loss_csv, AdamConfig, LossComponents, PackedDataset, StepRecord, TrainConfig,
};
use z2p_service::AppState;

use crate::CliError;

#[derive(Clone, Debug)]
pub struct DatagenOptions {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub noise: f64,
    pub points: usize,
    pub material: bool,
    pub out_dir: PathBuf,
}

/// Writes the dataset and returns the number of samples.
pub fn datagen(opts: &DatagenOptions) -> Result<usize, CliError> {
    if opts.resolution % 16 != 0 {
        log::warn!(
            "resolution {} is not a multiple of 16; a 4-level network cannot train or render at it",
            opts.resolution
        );
    }
    let config = DatagenConfig {
        resolution: opts.resolution,
        points: opts.points,
        noise_fraction: opts.noise,
        material: opts.material,
        ..DatagenConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let samples = make_dataset(&config, opts.count, opts.seed)?;
    write_dataset(&opts.out_dir, &samples, &config, opts.seed)?;
    Ok(samples.len())
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub mode: SettingsMode,
    pub encoding: bool,
    pub levels: usize,
    pub base_channels: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub out: PathBuf,
    pub loss_csv: PathBuf,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Whole-dataset loss before the first update.
    pub initial: LossComponents,
    /// Whole-dataset loss after the last update.
    pub final_: LossComponents,
    pub history: Vec<StepRecord>,
    pub config: UNetConfig,
}

fn write_bundle(model: &Z2pModel, provenance: Provenance, path: &Path) -> Result<(), CliError> {
    save_model(&ModelBundle::from_model(model, provenance), path)?;
    Ok(())
}

pub fn train(opts: &TrainOptions) -> Result<TrainSummary, CliError> {
    let (_, samples) = read_dataset(&opts.data)?;
    let data = PackedDataset::new(&samples)?;
    drop(samples);
    let config = UNetConfig {
        levels: opts.levels,
        base_channels: opts.base_channels,
        settings_mode: opts.mode,
        encoding_enabled: opts.encoding,
        settings_length: data.settings_len(),
        ..UNetConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train_config = TrainConfig {
        adam: AdamConfig {
            learning_rate: opts.lr,
            ..AdamConfig::default()
        },
        batch_size: opts.batch,
        steps: opts.steps,
        seed: opts.seed,
        ..TrainConfig::default()
    };
    train_config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (w, h) = data.resolution();
    config.check_resolution(w, h)?;

    let mut model = Z2pModel::new(config.clone(), opts.init_seed)?;
    let eval_batch = opts.batch.max(8);
    let initial = evaluate(&model, &data, &train_config.weights, eval_batch)?;
    log::info!(
        "{} samples at {w}x{h}, {} parameters, initial loss {:.6}",
        data.len(),
        config.parameter_count(),
        initial.total
    );
    let started = Instant::now();
    let report = train_model(&mut model, &data, &train_config, |record, model| {
        let step = record.step + 1;
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!(
                "step {step}/{} loss {:.6} ({:.1} s)",
                opts.steps,
                record.loss.total,
                started.elapsed().as_secs_f64()
            );
        }
        if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 && step < opts.steps {
            let provenance = Provenance {
                train_seed: opts.seed,
                steps: step as u64,
                final_loss: record.loss.total as f32,
            };
            write_bundle(model, provenance, &opts.out).map_err(|e| match e {
                CliError::Runtime(e) => z2p_core::Error::Dataset(format!("checkpoint: {e:#}")),
                CliError::Usage(m) => z2p_core::Error::Dataset(m),
            })?;
        }
        Ok(())
    })?;
    let final_ = evaluate(&model, &data, &train_config.weights, eval_batch)?;
    let provenance = Provenance {
        train_seed: opts.seed,
        steps: opts.steps as u64,
        final_loss: final_.total as f32,
    };
    write_bundle(&model, provenance, &opts.out)?;
    let csv = File::create(&opts.loss_csv).with_context(|| opts.loss_csv.display().to_string())?;
    write_loss_csv(&report.history, BufWriter::new(csv)).with_context(|| opts.loss_csv.display().to_string())?;
    Ok(TrainSummary {
        initial,
        final_,
        history: report.history,
        config,
    })
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub model: PathBuf,
    pub cloud: PathBuf,
    pub color: [f64; 3],
    /// Azimuth and elevation in degrees, then radius.
    pub light: [f64; 3],
    pub material: Option<[f64; 2]>,
    /// Yaw and pitch in degrees, then distance.
    pub camera: [f64; 3],
    pub fov: f64,
    pub resolution: usize,
    pub out: PathBuf,
}

impl RenderOptions {
    pub fn settings(&self) -> Settings {
        Settings {
            color: self.color,
            light: LightPosition {
                azimuth: self.light[0].to_radians(),
                elevation: self.light[1].to_radians(),
                radius: self.light[2],
            },
            material: self.material.map(|[metallic, roughness]| Material { metallic, roughness }),
        }
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig {
            yaw: self.camera[0].to_radians(),
            pitch: self.camera[1].to_radians(),
            distance: self.camera[2],
            fov_y: self.fov.to_radians(),
        }
    }
}

pub fn render(opts: &RenderOptions) -> Result<StageTimings, CliError> {
    let settings = opts.settings();
    settings.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let rig = opts.rig();
    rig.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = load_model(&opts.model)?.to_model()?;
    let expected = model.config().settings_length;
    if settings.len() != expected {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{} takes {expected} settings values; {}",
            opts.model.display(),
            if expected == 8 { "pass --material metallic,roughness" } else { "it has no material controls" }
        )));
    }
    let (cloud, _) = normalize_cloud(&read_point_cloud(&opts.cloud)?)?;
    let out = pipeline::render(
        &model,
        &cloud,
        &rig,
        &settings,
        (opts.resolution, opts.resolution),
        &ZBufferParams::default(),
    )?;
    write_png_rgba(&out.image, &opts.out)?;
    Ok(out.timings)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub points: Vec<usize>,
    pub resolution: usize,
    pub repeat: usize,
    pub model: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub points: usize,
    pub resolution: usize,
    pub repeat: usize,
    /// Per-stage medians.
    pub median: StageTimings,
}

/// Normalized points on a random datagen scene.
pub fn bench_cloud(points: usize, seed: u64) -> Result<PointCloud, CliError> {
    let config = DatagenConfig::default();
    let cam = config.camera.camera(64, 64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, _) = sample_scene(&mut rng, &config, &cam);
    Ok(normalize_cloud(&sample_points(&scene, points, &mut rng)?)?.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench(opts: &BenchOptions) -> Result<Vec<BenchRow>, CliError> {
    let model = match &opts.model {
        Some(path) => load_model(path)?.to_model()?,
        None => Z2pModel::new(UNetConfig::toy(), 0)?,
    };
    model
        .config()
        .check_resolution(opts.resolution, opts.resolution)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let settings = Settings {
        color: [0.8, 0.5, 0.3],
        light: LightPosition {
            azimuth: 0.5,
            elevation: 0.8,
            radius: 3.0,
        },
        material: (model.config().settings_length == 8).then_some(Material {
            metallic: 0.5,
            roughness: 0.5,
        }),
    };
    let rig = CameraRig::default();
    let mut rows = Vec::with_capacity(opts.points.len());
    for &n in &opts.points {
        let cloud = bench_cloud(n, opts.seed)?;
        let mut runs = Vec::with_capacity(opts.repeat);
        for _ in 0..opts.repeat {
            let out = pipeline::render(
                &model,
                &cloud,
                &rig,
                &settings,
                (opts.resolution, opts.resolution),
                &ZBufferParams::default(),
            )?;
            runs.push(out.timings);
        }
        let col = |f: fn(&StageTimings) -> f64| median(runs.iter().map(f).collect());
        rows.push(BenchRow {
            points: n,
            resolution: opts.resolution,
            repeat: opts.repeat,
            median: StageTimings {
                project_ms: col(|t| t.project_ms),
                zbuffer_ms: col(|t| t.zbuffer_ms),
                forward_ms: col(|t| t.forward_ms),
                total_ms: col(|t| t.total_ms),
            },
        });
    }
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str = "points,resolution,repeat,project_ms,zbuffer_ms,forward_ms,total_ms";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let m = &r.median;
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.points, r.resolution, r.repeat, m.project_ms, m.zbuffer_ms, m.forward_ms, m.total_ms
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub model: PathBuf,
    pub port: u16,
    pub host: String,
    pub static_dir: Option<PathBuf>,
}

pub fn serve(opts: &ServeOptions) -> Result<(), CliError> {
    let bundle = load_model(&opts.model)?;
    let model = bundle.to_model()?;
    let state = Arc::new(AppState::new(model, bundle.provenance));
    let static_dir = match &opts.static_dir {
        Some(dir) if !dir.is_dir() => {
            log::warn!("static dir {} not found; serving the API only", dir.display());
            None
        }
        other => other.clone(),
    };
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((opts.host.as_str(), opts.port))
            .await
            .with_context(|| format!("binding {}:{}", opts.host, opts.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        use std::io::Write;
        std::io::stdout().flush()?;
        z2p_service::serve(listener, state, static_dir).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
