//! `rcsnet` command line.
//!
//! Settings resolve as flags > config file > defaults; every command that
//! writes artifacts also writes `resolved_config.toml` next to them.
//! Exit codes: 0 success, 2 configuration/validation error, 3 numeric error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, SplitName};
use crate::data::container::{self, Header};
use crate::data::synth::SynthCity;
use crate::data::{build_splits, crop_spatial, load_dir, normalize_road, split_cities, write_city, Dataset, RawCity, Splits, WindowSpec};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_baseline, evaluate_model, forecast_split};
use crate::graph::Graph;
use crate::metrics::MetricReport;
use crate::model::prior_batch;
use crate::tensor::Tensor;
use crate::topology::{extract_prior, CHANNEL_NAMES};
use crate::trainer::{train, Checkpoint};

#[derive(Parser, Debug)]
#[command(name = "rcsnet", version, about = "Road-conditioned traffic movie forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Dataset directory (`<dir>/<city>/road.gtc`, `<dir>/<city>/movies/*.gtc`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Grid side (H = W).
        #[arg(long)]
        hw: Option<usize>,
        /// Frames per movie.
        #[arg(long)]
        t: Option<usize>,
        /// Number of movies.
        #[arg(long)]
        files: Option<usize>,
        #[arg(long)]
        city: Option<String>,
    },
    /// Dump the topology prior of a road map.
    Topology {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        road: Option<PathBuf>,
        #[arg(long)]
        pool_k: Option<usize>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write forecasts and an absolute-error heatmap for a split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the fusion gates of the first window.
        #[arg(long)]
        dump_gates: bool,
    },
    /// Evaluate the Historical Average baseline on a split.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn resolve_common(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(o) = &common.out {
        cfg.paths.out_dir = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(p) = &d.data {
        cfg.paths.data_dir = Some(p.clone());
    }
    if let Some(s) = d.split {
        cfg.split = s;
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing {what}")))
}

fn window_spec(cfg: &RunConfig) -> WindowSpec {
    let m = &cfg.train.model;
    WindowSpec { t_in: m.t_in, t_out: m.t_out, stride: cfg.train.stride, pool_k: m.pool_k }
}

fn load_splits(cfg: &RunConfig) -> Result<Splits<f32>> {
    let raw: Vec<RawCity<f32>> = load_dir(require(&cfg.paths.data_dir, "data directory (--data)")?)?;
    build_splits(&raw, cfg.train.seed, window_spec(cfg))
}

fn pick(splits: Splits<f32>, which: SplitName) -> Result<Dataset<f32>> {
    let d = match which {
        SplitName::Train => splits.train,
        SplitName::Val => splits.val,
        SplitName::Test => splits.test,
    };
    if d.is_empty() {
        return Err(Error::Validation(format!("the {which:?} split holds no windows")));
    }
    Ok(d)
}

fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    report.write_json(out.join("report.json"))?;
    report.write_horizon_csv(out.join("horizons.csv"))
}

/// Checkpoint whose training settings replace the file's, keeping paths,
/// split and metric settings.
fn with_checkpoint(cfg: &mut RunConfig, ck: Option<&PathBuf>) -> Result<Checkpoint<f32>> {
    if let Some(c) = ck {
        cfg.paths.checkpoint = Some(c.clone());
    }
    let ck = Checkpoint::<f32>::load(require(&cfg.paths.checkpoint, "checkpoint (--checkpoint)")?)?;
    cfg.train = ck.manifest.config.clone();
    Ok(ck)
}

/// The configured split, normalised with the checkpoint's statistics.
fn split_for_checkpoint(cfg: &RunConfig, ck: &Checkpoint<f32>) -> Result<Dataset<f32>> {
    let raw: Vec<RawCity<f32>> = load_dir(require(&cfg.paths.data_dir, "data directory (--data)")?)?;
    let [train, val, test] = split_cities(&raw, cfg.train.seed)?;
    let part = match cfg.split {
        SplitName::Train => train,
        SplitName::Val => val,
        SplitName::Test => test,
    };
    let w = window_spec(cfg);
    let d = Dataset::build(&part, &ck.manifest.norm, w.t_in, w.t_out, w.stride, w.pool_k)?;
    if d.is_empty() {
        return Err(Error::Validation(format!("the {:?} split holds no windows", cfg.split)));
    }
    Ok(d)
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common, hw, t, files, city } => {
            let mut cfg = resolve_common(&common)?;
            let s = &mut cfg.synth;
            if let Some(v) = hw {
                s.hw = v;
            }
            if let Some(v) = t {
                s.t = v;
            }
            if let Some(v) = files {
                s.files = v;
            }
            if let Some(v) = city {
                s.city = v;
            }
            let out = require(&cfg.paths.out_dir, "output directory (--out)")?.to_path_buf();
            let s = &cfg.synth;
            if s.files == 0 {
                return Err(Error::Config("files must be >= 1".into()));
            }
            let sc = SynthCity::new(s.seed, s.hw, s.hw, s.profile.clone())?;
            let movies = (0..s.files as u64).map(|d| sc.movie::<f32>(d, s.t)).collect::<Result<Vec<_>>>()?;
            write_city(&out, &RawCity { name: s.city.clone(), road: sc.road_map(), movies })?;
            cfg.write_resolved(&out)?;
            log::info!("wrote {} movie(s) of {} frames to {}", s.files, s.t, out.join(&s.city).display());
            Ok(())
        }
        Command::Topology { common, road, pool_k } => {
            let mut cfg = resolve_common(&common)?;
            if let Some(r) = road {
                cfg.paths.road_map = Some(r);
            }
            if let Some(k) = pool_k {
                cfg.train.model.pool_k = k;
            }
            let out = require(&cfg.paths.out_dir, "output directory (--out)")?.to_path_buf();
            let (_, raw) = container::read::<f32>(require(&cfg.paths.road_map, "road map (--road)")?)?;
            let prior = extract_prior(&normalize_road(&raw)?, cfg.train.model.pool_k)?;
            let t = prior.tensor();
            let h = Header::new(t.shape(), &["C", "H", "W"]).with_channels(CHANNEL_NAMES.iter().map(|s| s.to_string()).collect());
            container::write(out.join("prior.gtc"), &h, t)?;
            cfg.write_resolved(&out)
        }
        Command::Train { common, data, epochs, batch, lr } => {
            let mut cfg = resolve_common(&common)?;
            apply_data(&mut cfg, &data);
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = batch {
                cfg.train.batch = v;
            }
            if let Some(v) = lr {
                cfg.train.lr0 = v;
            }
            cfg.validate()?;
            let out = require(&cfg.paths.out_dir, "output directory (--out)")?.to_path_buf();
            cfg.write_resolved(&out)?;
            let splits = load_splits(&cfg)?;
            let outcome = train(&cfg.train, Arc::new(splits.train), &splits.val, Some(&out))?;
            let m = &outcome.best.manifest;
            log::info!("best epoch {} (validation loss {:?})", m.epoch, m.val_loss);
            let epochs = serde_json::to_string_pretty(&outcome.epochs).map_err(|e| Error::Format(e.to_string()))?;
            fs::write(out.join("epochs.json"), epochs + "\n")?;
            Ok(())
        }
        Command::Eval { common, data, checkpoint } => {
            let mut cfg = resolve_common(&common)?;
            apply_data(&mut cfg, &data);
            let ck = with_checkpoint(&mut cfg, checkpoint.as_ref())?;
            let out = require(&cfg.paths.out_dir, "output directory (--out)")?.to_path_buf();
            let ds = split_for_checkpoint(&cfg, &ck)?;
            let report = evaluate_model(&ck.model()?, &ds, cfg.train.batch, &cfg.metrics)?;
            write_report(&report, &out)?;
            cfg.write_resolved(&out)
        }
        Command::Baseline { common, data } => {
            let mut cfg = resolve_common(&common)?;
            apply_data(&mut cfg, &data);
            cfg.validate()?;
            let out = require(&cfg.paths.out_dir, "output directory (--out)")?.to_path_buf();
            let ds = pick(load_splits(&cfg)?, cfg.split)?;
            let report = evaluate_baseline(&ds, &cfg.metrics)?;
            write_report(&report, &out)?;
            cfg.write_resolved(&out)
        }
        Command::Predict { common, data, checkpoint, dump_gates } => {
            let mut cfg = resolve_common(&common)?;
            apply_data(&mut cfg, &data);
            let ck = with_checkpoint(&mut cfg, checkpoint.as_ref())?;
            let out = require(&cfg.paths.out_dir, "output directory (--out)")?.to_path_buf();
            let ds = split_for_checkpoint(&cfg, &ck)?;
            let model = ck.model()?;
            let preds = forecast_split(&model, &ds, cfg.train.batch)?;
            let order: Vec<usize> = ds.plan(cfg.train.batch, None).concat();
            let forecast = Tensor::stack(&preds)?;
            let h = Header::new(forecast.shape(), &["N", "T", "C", "H", "W"]).with_channels(container::traffic_channel_names());
            container::write(out.join("forecast.gtc"), &h, &forecast)?;

            // mean absolute error per cell over windows, frames and channels
            let s = forecast.shape().to_vec();
            let (hh, ww) = (s[3], s[4]);
            let mut heat = vec![0.0f64; hh * ww];
            for (pred, &i) in preds.iter().zip(&order) {
                let smp = ds.sample(i)?;
                let c = &ds.cities[smp.city];
                let y = crop_spatial(&ds.stats.invert(&smp.y, 1)?, 2, c.height, c.width)?;
                for (k, (a, b)) in pred.data().iter().zip(y.data()).enumerate() {
                    heat[k % (hh * ww)] += (a - b).abs() as f64;
                }
            }
            let denom = (preds.len() * s[1] * s[2]) as f64;
            let heat = Tensor::<f32>::from_fn(&[hh, ww], |i| (heat[i] / denom) as f32);
            container::write(out.join("error_heatmap.gtc"), &Header::new(&[hh, ww], &["H", "W"]), &heat)?;

            if dump_gates {
                let b = ds.batch(&order[..1], 0)?;
                let mut g = Graph::inference();
                let p = model.store.bind(&mut g);
                let xv = g.input(&b.x)?;
                let pv = g.input(&prior_batch(&ds.cities[b.city].prior)?)?;
                let f = model.forward(&mut g, &p, xv, pv)?.fusion;
                for (name, v) in [("channel", f.channel_gate), ("spatial", f.spatial_gate), ("direction", f.direction_gate)] {
                    let t = g.value(v);
                    container::write(out.join(format!("gate_{name}.gtc")), &Header::new(t.shape(), &["B", "C", "H", "W"]), &t)?;
                }
            }
            cfg.write_resolved(&out)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
