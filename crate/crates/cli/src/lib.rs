//! `z2p` subcommands.
//!
//! Each subcommand resolves its flags against an optional `--config` file
//! (`key=value`, keys are the long flag names) before running. Exit codes:
//! 0 success, 1 usage error, 2 runtime failure.

mod commands;
pub mod options;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use z2p_core::network::SettingsMode;

pub use commands::{BENCH_CSV_HEADER, 
    bench, bench_cloud, bench_csv, datagen, render, serve, train, BenchOptions, BenchRow, DatagenOptions, RenderOptions, ServeOptions,
    TrainOptions, TrainSummary,
};
use options::{Counts, Overlay, Pair, Triple};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<z2p_core::Error> for CliError {
    fn from(e: z2p_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "z2p", version, about = "Point-cloud previews from z-buffers")]
pub struct Cli {
    /// key=value file supplying defaults for any long flag
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic training set
    Datagen(DatagenArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Render one point cloud to PNG
    Render(RenderArgs),
    /// Time the render stages on random clouds
    Bench(BenchArgs),
    /// Run the HTTP preview service
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Number of samples [default: 200]
    #[arg(long)]
    pub count: Option<usize>,
    /// Square image side in pixels [default: 64]
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of uniform noise points [default: 0]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Points sampled per scene [default: 2000]
    #[arg(long)]
    pub points: Option<usize>,
    /// Also sample metallic/roughness
    #[arg(long)]
    pub material: bool,
    /// [default: dataset]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory [default: dataset]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: 2000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 8]
    #[arg(long)]
    pub batch: Option<usize>,
    /// How settings reach the network: adain or append [default: adain]
    #[arg(long)]
    pub mode: Option<SettingsMode>,
    /// Drop the positional encoding channels
    #[arg(long)]
    pub no_encoding: bool,
    /// U-Net levels [default: 4]
    #[arg(long)]
    pub levels: Option<usize>,
    /// Channels at the first level [default: 64]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Minibatch sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight initialization seed [default: 0]
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Model bundle path [default: model.z2pw]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step loss CSV [default: <out stem>.loss.csv]
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Overwrite the bundle every N steps; 0 disables [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Log the loss every N steps [default: 100]
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Model bundle
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// XYZ or ASCII PLY point cloud
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    /// r,g,b in [0, 1] [default: 0.8,0.8,0.8]
    #[arg(long)]
    pub color: Option<Triple>,
    /// azimuth,elevation in degrees, radius [default: 30,45,3]
    #[arg(long)]
    pub light: Option<Triple>,
    /// metallic,roughness; required by material models
    #[arg(long)]
    pub material: Option<Pair>,
    /// yaw,pitch in degrees, distance [default: 0,20,2.2]
    #[arg(long)]
    pub camera: Option<Triple>,
    /// Vertical field of view in degrees [default: 60]
    #[arg(long)]
    pub fov: Option<f64>,
    /// Square image side [default: 256]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// [default: render.png]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Point counts, comma-separated [default: 5000]
    #[arg(long)]
    pub points: Option<Counts>,
    /// Square image side [default: 256]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Runs per point count; the median is reported [default: 11]
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Model bundle; a freshly initialized toy network otherwise
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Cloud sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model bundle
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// 0 picks a free port [default: 8080]
    #[arg(long)]
    pub port: Option<u16>,
    /// [default: 127.0.0.1]
    #[arg(long)]
    pub host: Option<String>,
    /// Viewer assets served at /
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

impl DatagenArgs {
    pub fn resolve(self, o: &Overlay) -> Result<DatagenOptions, CliError> {
        Ok(DatagenOptions {
            count: o.pick(self.count, "count", 200)?,
            resolution: o.pick(self.resolution, "resolution", 64)?,
            seed: o.pick(self.seed, "seed", 0)?,
            noise: o.pick(self.noise, "noise", 0.0)?,
            points: o.pick(self.points, "points", 2000)?,
            material: o.switch(self.material, "material")?,
            out_dir: o.pick(self.out_dir, "out-dir", PathBuf::from("dataset"))?,
        })
    }
}

impl TrainArgs {
    pub fn resolve(self, o: &Overlay) -> Result<TrainOptions, CliError> {
        let out = o.pick(self.out, "out", PathBuf::from("model.z2pw"))?;
        let loss_csv = match o.opt(self.loss_csv, "loss-csv")? {
            Some(p) => p,
            None => {
                let stem = out.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
                out.with_file_name(format!("{stem}.loss.csv"))
            }
        };
        Ok(TrainOptions {
            data: o.pick(self.data, "data", PathBuf::from("dataset"))?,
            steps: o.pick(self.steps, "steps", 2000)?,
            lr: o.pick(self.lr, "lr", 1e-4)?,
            batch: o.pick(self.batch, "batch", 8)?,
            mode: o.pick(self.mode, "mode", SettingsMode::Adain)?,
            encoding: !o.switch(self.no_encoding, "no-encoding")?,
            levels: o.pick(self.levels, "levels", 4)?,
            base_channels: o.pick(self.base_channels, "base-channels", 64)?,
            seed: o.pick(self.seed, "seed", 0)?,
            init_seed: o.pick(self.init_seed, "init-seed", 0)?,
            out,
            loss_csv,
            checkpoint_every: o.pick(self.checkpoint_every, "checkpoint-every", 0)?,
            log_every: o.pick(self.log_every, "log-every", 100)?,
        })
    }
}

impl RenderArgs {
    pub fn resolve(self, o: &Overlay) -> Result<RenderOptions, CliError> {
        Ok(RenderOptions {
            model: o.required(self.model, "model")?,
            cloud: o.required(self.cloud, "cloud")?,
            color: o.pick(self.color, "color", Triple([0.8, 0.8, 0.8]))?.0,
            light: o.pick(self.light, "light", Triple([30.0, 45.0, 3.0]))?.0,
            material: o.opt(self.material, "material")?.map(|p| p.0),
            camera: o.pick(self.camera, "camera", Triple([0.0, 20.0, 2.2]))?.0,
            fov: o.pick(self.fov, "fov", 60.0)?,
            resolution: o.pick(self.resolution, "resolution", 256)?,
            out: o.pick(self.out, "out", PathBuf::from("render.png"))?,
        })
    }
}

impl BenchArgs {
    pub fn resolve(self, o: &Overlay) -> Result<BenchOptions, CliError> {
        let repeat = o.pick(self.repeat, "repeat", 11)?;
        if repeat == 0 {
            return Err(CliError::Usage("--repeat must be at least 1".into()));
        }
        Ok(BenchOptions {
            points: o.pick(self.points, "points", Counts(vec![5000]))?.0,
            resolution: o.pick(self.resolution, "resolution", 256)?,
            repeat,
            model: o.opt(self.model, "model")?,
            seed: o.pick(self.seed, "seed", 0)?,
            out: o.opt(self.out, "out")?,
        })
    }
}

impl ServeArgs {
    pub fn resolve(self, o: &Overlay) -> Result<ServeOptions, CliError> {
        Ok(ServeOptions {
            model: o.required(self.model, "model")?,
            port: o.pick(self.port, "port", 8080)?,
            host: o.pick(self.host, "host", "127.0.0.1".to_string())?,
            static_dir: o.opt(self.static_dir, "static-dir")?,
        })
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let overlay = match &cli.config {
        Some(path) => Overlay::load(path)?,
        None => Overlay::default(),
    };
    match cli.command {
        Command::Datagen(a) => {
            let opts = a.resolve(&overlay)?;
            let n = datagen(&opts)?;
            println!("wrote {n} samples to {}", opts.out_dir.display());
        }
        Command::Train(a) => {
            let summary = train(&a.resolve(&overlay)?)?;
            println!("initial_loss={:.6}", summary.initial.total);
            println!("final_loss={:.6}", summary.final_.total);
        }
        Command::Render(a) => {
            let t = render(&a.resolve(&overlay)?)?;
            println!("project_ms={:.3}", t.project_ms);
            println!("zbuffer_ms={:.3}", t.zbuffer_ms);
            println!("forward_ms={:.3}", t.forward_ms);
            println!("total_ms={:.3}", t.total_ms);
        }
        Command::Bench(a) => {
            let opts = a.resolve(&overlay)?;
            let rows = bench(&opts)?;
            let csv = bench_csv(&rows);
            match &opts.out {
                Some(path) => std::fs::write(path, csv)
                    .map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
        }
        Command::Serve(a) => serve(&a.resolve(&overlay)?)?,
    }
    Ok(())
}
