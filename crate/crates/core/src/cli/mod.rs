//! The `panet` command line: data generation, training, evaluation, routing
//! statistics and forecasting.

mod settings;

pub use settings::{parse_grid, DataSettings, Settings};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use crate::engine::{
    forecast_dataset, load_checkpoint, log_csv, route_statistics, save_training, Checkpoint, DatasetForecast, PaNet,
    Trainer, WindowDataset,
};
use crate::error::{Error, Result};
use crate::field_store::{
    categorize, estimate_thresholds, generate_synthetic, read_container, write_container, GeoGrid, IntensityCategory,
    MeteoSequence, SeqDims, CATEGORY_COUNT,
};
use crate::verification::{categories_of, report, Climatology, VerificationReport};

#[derive(Debug, Parser)]
#[command(name = "panet", version, about = "Precipitation-adaptive MoE nowcasting at desk scale")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic long-tailed sequences as PANG containers.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus train_log.csv.
    Train(TrainArgs),
    /// Score a checkpoint (or a baseline) against held data.
    Eval(EvalArgs),
    /// Dump per-expert usage and per-tier token counts.
    RouteStats(RouteStatsArgs),
    /// Write argmax categories as a PANG container.
    Forecast(ForecastArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    /// File of key=value settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created when missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra key=value setting, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Grid as HxW.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub tail: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Container file or directory of containers.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Continue from a training checkpoint up to --epochs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Persistence,
    Climatology,
    WClimatology,
    /// The observations themselves.
    Truth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also score a reference forecast.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Fit climatology on this archive instead of the evaluation data.
    #[arg(long)]
    pub climatology_data: Option<PathBuf>,
    /// Write PGM heatmaps of predicted categories.
    #[arg(long)]
    pub heatmaps: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct RouteStatsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

/// 0 ok, 2 I/O, 3 validation, 4 divergence, 5 shape or configuration mismatch.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 2,
        Error::Divergence { .. } => 4,
        Error::ConfigMismatch(_) => 5,
        _ => 3,
    }
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(p) = &common.config {
        s.apply_file(p)?;
    }
    for o in &common.overrides {
        s.apply_override(o)?;
    }
    Ok(s)
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Every `.pang` file of a directory in name order, or a single file.
pub fn load_data(path: &Path) -> Result<Vec<MeteoSequence>> {
    require(path)?;
    if path.is_file() {
        return Ok(vec![read_container(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pang"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no .pang containers in {}", path.display()),
        )));
    }
    files.iter().map(read_container).collect()
}

/// Category shares in severity order, as percentages.
pub fn frequency_table(seqs: &[MeteoSequence]) -> Result<String> {
    let mut counts = [0u64; CATEGORY_COUNT];
    for s in seqs {
        for &r in &s.intensity().data {
            counts[categorize(r as f64)?.index()] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut head = format!("{:<10}", "category");
    let mut row = format!("{:<10}", "share(%)");
    let mut cnt = format!("{:<10}", "cells");
    for (c, n) in IntensityCategory::ALL.iter().zip(counts) {
        head.push_str(&format!("{:>12}", c.label()));
        row.push_str(&format!("{:>12.4}", 100.0 * n as f64 / total.max(1) as f64));
        cnt.push_str(&format!("{n:>12}"));
    }
    Ok(format!("{head}\n{row}\n{cnt}\n"))
}

/// Binary greyscale PGM with pixel value `category * 51`.
pub fn pgm(categories: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(categories.iter().map(|&c| c * 51));
    out
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    if let Some(v) = a.sequences {
        s.data.sequences = v;
    }
    if let Some(v) = a.frames {
        s.data.frames = v;
    }
    if let Some(g) = &a.grid {
        (s.data.height, s.data.width) = parse_grid(g)?;
    }
    if let Some(v) = a.channels {
        s.model.channels = v;
    }
    if let Some(v) = a.tail {
        s.data.tail_exponent = v;
    }
    if let Some(v) = a.patch {
        s.model.patch = v;
    }
    s.validate()?;
    prepare_out(&a.common.out)?;
    let d = &s.data;
    let seqs = generate_synthetic(
        a.common.seed.unwrap_or(0),
        d.sequences,
        (d.frames, d.height, d.width, s.model.channels),
        d.tail_exponent,
    )?;
    for (i, seq) in seqs.iter().enumerate() {
        write_container(a.common.out.join(format!("seq_{i:03}.pang")), seq)?;
    }
    print!("{}", frequency_table(&seqs)?);
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut s = settings(&a.common)?;
    if let Some(v) = a.epochs {
        s.train.epochs = v;
    }
    if let Some(v) = a.lr {
        s.train.lr = v;
    }
    if let Some(v) = a.gamma {
        s.train.loss.gamma = v;
    }
    if let Some(v) = a.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = &a.optimizer {
        s.train.optimizer = v.parse()?;
    }
    if let Some(seed) = a.common.seed {
        s.model.seed = seed;
        s.train.seed = seed;
    }
    require(&a.data)?;
    if let Some(r) = &a.resume {
        require(r)?;
    }
    prepare_out(&a.common.out)?;
    let seqs = load_data(&a.data)?;

    let mut trainer = match &a.resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::Training(mut t) => {
                t.config.epochs = s.train.epochs;
                *t
            }
            Checkpoint::Model(_) => return Err(Error::config("checkpoint holds no training state to resume")),
        },
        None => {
            s.model.channels = seqs[0].dims().channels;
            s.validate()?;
            let ds = WindowDataset::new(seqs.clone(), s.model.lookback, s.model.horizon)?;
            let rain = ds.observed_rain();
            let th = estimate_thresholds([rain.as_slice()], s.data.p_weak, s.data.p_strong)?;
            if th.fallback {
                warn!("training data is dry; using fixed routing thresholds");
            }
            Trainer::new(PaNet::new(s.model, th)?, s.train)?
        }
    };
    let ds = WindowDataset::new(seqs, trainer.model.config.lookback, trainer.model.config.horizon)?;
    let first_new = trainer.log.len();
    let result = trainer.train(&ds).map(|_| ());
    save_training(a.common.out.join("model.panc"), &trainer)?;
    fs::write(a.common.out.join("train_log.csv"), log_csv(&trainer.log[first_new..]))?;
    if let Some(last) = trainer.log.last() {
        println!(
            "epochs {}  pred_loss {:.6}  total {:.6}  cv {:.4}  entropy {:.4}",
            trainer.epoch, last.pred_loss, last.total, last.cv, last.entropy
        );
    }
    result
}

fn load_model(path: &Path) -> Result<PaNet> {
    require(path)?;
    Ok(load_checkpoint(path)?.into_model())
}

fn summary_line(name: &str, r: &VerificationReport) -> String {
    let mut s = format!("{name:<14}");
    for l in 0..r.lead_hours() {
        s.push_str(&format!(" {:>7.4}", r.lead_mean_iou(l)));
    }
    s.push_str(&format!(" | mean IoU {:.4}  TS {:.4}", r.mean_iou(), r.mean_ts()));
    s
}

fn baseline_forecast(kind: Baseline, f: &DatasetForecast, a: &EvalArgs, data: &[MeteoSequence]) -> Result<Vec<f32>> {
    Ok(match kind {
        Baseline::Persistence => f.persistence.clone(),
        Baseline::Truth => f.truth.clone(),
        Baseline::Climatology | Baseline::WClimatology => {
            let clim = match &a.climatology_data {
                Some(p) => Climatology::fit(&load_data(p)?)?,
                None => Climatology::fit(data)?,
            };
            if (clim.height, clim.width) != (f.height, f.width) {
                return Err(Error::ConfigMismatch("climatology grid differs from the evaluation grid".into()));
            }
            let mut out = Vec::with_capacity(f.truth.len());
            for &h0 in &f.first_lead_hours {
                let hours: Vec<i64> = (0..f.horizon as i64).map(|l| h0 + l).collect();
                out.extend(clim.forecast(&hours, kind == Baseline::WClimatology));
            }
            out
        }
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    settings(&a.common)?;
    require(&a.data)?;
    if let Some(p) = &a.climatology_data {
        require(p)?;
    }
    let model = load_model(&a.checkpoint)?;
    prepare_out(&a.common.out)?;
    let seqs = load_data(&a.data)?;
    let ds = WindowDataset::new(seqs.clone(), model.config.lookback, model.config.horizon)?;
    let f = forecast_dataset(&model, &ds, a.batch_size)?;
    let rep = report(&f.categories, &f.truth, f.windows, f.horizon)?;
    fs::write(a.common.out.join("verification.csv"), rep.to_csv())?;
    println!("{:<14} {}", "lead IoU", (1..=f.horizon).map(|l| format!("{:>7}", format!("+{l}h"))).collect::<String>());
    println!("{}", summary_line("PA-Net", &rep));
    if let Some(kind) = a.baseline {
        let rain = baseline_forecast(kind, &f, a, &seqs)?;
        let b = report(&categories_of(&rain)?, &f.truth, f.windows, f.horizon)?;
        let name = kind.to_possible_value().expect("no skipped variants").get_name().to_string();
        fs::write(a.common.out.join(format!("baseline_{name}.csv")), b.to_csv())?;
        println!("{}", summary_line(&name, &b));
    }
    if a.heatmaps {
        let dir = a.common.out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        let n = f.height * f.width;
        for (i, frame) in f.categories.chunks(n).enumerate() {
            let (w, l) = (i / f.horizon, i % f.horizon + 1);
            fs::write(dir.join(format!("w{w:03}_lead{l}.pgm")), pgm(frame, f.height, f.width))?;
        }
    }
    Ok(())
}

pub fn cmd_route_stats(a: &RouteStatsArgs) -> Result<()> {
    settings(&a.common)?;
    require(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    prepare_out(&a.common.out)?;
    let ds = WindowDataset::new(load_data(&a.data)?, model.config.lookback, model.config.horizon)?;
    let r = route_statistics(&model, &ds, a.batch_size, a.layer)?;
    fs::write(a.common.out.join("route_stats.csv"), r.usage_csv())?;
    fs::write(a.common.out.join("route_tiers.csv"), r.tier_csv())?;
    print!("{}", r.tier_csv());
    Ok(())
}

pub fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    settings(&a.common)?;
    require(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    prepare_out(&a.common.out)?;
    let seqs = load_data(&a.data)?;
    let ds = WindowDataset::new(seqs.clone(), model.config.lookback, model.config.horizon)?;
    let f = forecast_dataset(&model, &ds, a.batch_size)?;
    let dims = SeqDims::new(f.windows, f.horizon, f.height, f.width, 1);
    let data = f.categories.iter().map(|&c| c as f32).collect();
    let base = f.first_lead_hours.first().copied().unwrap_or(0);
    let geo: GeoGrid = seqs[0].geo();
    let out = MeteoSequence::new(dims, data, base, geo)?;
    write_container(a.common.out.join("forecast.pang"), &out)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RouteStats(a) => cmd_route_stats(a),
        Command::Forecast(a) => cmd_forecast(a),
    }
}
