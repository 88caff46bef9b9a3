//! Command-line front end: JSON on stdout, logs on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{cost_table, count_flops, format_table, model_report};
use crate::backbone::Branch;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradsuite::{run_block, BLOCKS, TOLERANCE};
use crate::params::{load_checkpoint, save_checkpoint, Forward, ParamStore};
use crate::synthdata::{generate_dataset, resize_and_split, Dataset, Split};
use crate::traineval::{evaluate, segment_windows, train, train_groups, ReidModel};

#[derive(Debug, Parser)]
#[command(name = "bicnet", version, about = "Two-branch video re-identification toolkit")]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Run configuration file (JSON with model/data/train sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, default_value = "mini")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic tracklet dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        cams: Option<usize>,
        /// Tracklets per identity and camera.
        #[arg(long)]
        tracklets: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
        /// Frame size, e.g. 64x32.
        #[arg(long, value_parser = parse_res)]
        size: Option<[usize; 2]>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda_div: Option<f64>,
        /// Run directory for the checkpoint, config and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score retrieval on the query/gallery split with a trained run.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static FLOPs count.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input resolution, e.g. 256x128.
        #[arg(long, value_parser = parse_res)]
        res: Option<[usize; 2]>,
        #[arg(long)]
        alpha: Option<usize>,
        /// Print a text table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Static parameter count.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        table: bool,
    },
    /// Finite-difference gradient checks of the registered blocks.
    Gradcheck {
        #[arg(long)]
        all: bool,
        #[arg(long = "block")]
        blocks: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds per block.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write attention maps of one segment as PGM images plus a CSV.
    AttnDump {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tracklet name; defaults to the first query tracklet.
        #[arg(long)]
        tracklet: Option<String>,
        #[arg(long, default_value_t = 0)]
        segment: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_res(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err(format!("resolution must be positive, got `{s}`"));
    }
    Ok([h, w])
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn print_config(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    writeln!(std::io::stdout(), "{}", cfg.to_json()).map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            cfg,
            ids,
            cams,
            tracklets,
            len,
            size,
            out,
        } => {
            let mut run = cfg.resolve()?;
            let g = &mut run.data.generator;
            g.num_ids = ids.unwrap_or(g.num_ids);
            g.cams_per_id = cams.unwrap_or(g.cams_per_id);
            g.tracklets_per_cam = tracklets.unwrap_or(g.tracklets_per_cam);
            g.tracklet_len = len.unwrap_or(g.tracklet_len);
            g.frame_size = size.unwrap_or(g.frame_size);
            if let Some(seed) = cfg.seed {
                g.seed = seed;
            }
            if let Some(out) = out {
                run.data.root = out;
            }
            if cfg.print_config {
                return print_config(&run);
            }
            let index = generate_dataset(&run.data.generator, &run.data.root)?;
            let count = |s: Split| index.tracklets.iter().filter(|t| t.split == s).count();
            emit(&json!({
                "root": run.data.root,
                "identities": index.identities.len(),
                "tracklets": index.tracklets.len(),
                "frames": index.tracklets.iter().map(|t| t.frames).sum::<usize>(),
                "train": count(Split::Train),
                "query": count(Split::Query),
                "gallery": count(Split::Gallery),
            }))
        }
        Command::Train {
            cfg,
            data,
            epochs,
            lambda_div,
            out,
        } => {
            let mut run = cfg.resolve()?;
            if let Some(d) = data {
                run.data.root = d;
            }
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            if let Some(l) = lambda_div {
                run.train.lambda_div = l;
            }
            if cfg.print_config {
                return print_config(&run);
            }
            run.validate()?;
            let dataset = Dataset::load(&run.data.root)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg_path = out.join("config.json");
            fs::write(&cfg_path, run.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
            let metrics_path = out.join("metrics.jsonl");
            let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            let mut sink = Tee {
                file,
                stdout: std::io::stdout(),
            };
            let outcome = train(&run.model, &run.train, &dataset, run.seed, &mut sink, Some(&out))?;
            save_checkpoint(&outcome.store, &out.join("checkpoint"))?;
            log::info!("checkpoint written to {}", out.join("checkpoint").display());
            Ok(())
        }
        Command::Eval { run, data, seed, out } => {
            let (cfg, dataset, model, store) = load_run(&run, data.as_deref())?;
            let report = evaluate(&model.net, &store, &dataset, seed.unwrap_or(cfg.seed))?;
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report)?;
                fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            }
            emit(&report)
        }
        Command::Flops {
            cfg,
            res,
            alpha,
            table,
        } => {
            let mut run = cfg.resolve()?;
            if let Some(a) = alpha {
                run.model.alpha = a;
            }
            if cfg.print_config {
                return print_config(&run);
            }
            let res = res.unwrap_or(run.model.big_res);
            run.model.big_res = res;
            if table {
                run.model.validate()?;
                return write!(std::io::stdout(), "{}", format_table(&cost_table(&run.model)))
                    .map_err(|e| Error::io("<stdout>", e));
            }
            let backbone = count_flops(&run.model.backbone, res);
            let per_frame = match run.model.validate() {
                Ok(()) => Some(model_report(&run.model).avg_flops_per_frame),
                Err(e) => {
                    log::warn!("two-branch cost skipped: {e}");
                    None
                }
            };
            emit(&json!({
                "preset": cfg.config.is_none().then_some(&cfg.preset),
                "resolution": res,
                "total_gflops": backbone.gflops,
                "total_macs": backbone.total_macs,
                "modules": backbone.modules,
                "avg_flops_per_frame": per_frame.flatten(),
            }))
        }
        Command::Params { cfg, table } => {
            let run = cfg.resolve()?;
            if cfg.print_config {
                return print_config(&run);
            }
            run.model.validate()?;
            if table {
                return write!(std::io::stdout(), "{}", format_table(&cost_table(&run.model)))
                    .map_err(|e| Error::io("<stdout>", e));
            }
            emit(&model_report(&run.model))
        }
        Command::Gradcheck {
            all,
            blocks,
            seed,
            seeds,
        } => {
            let names: Vec<String> = if all {
                BLOCKS.iter().map(|s| s.to_string()).collect()
            } else if blocks.is_empty() {
                return Err(Error::Usage(format!(
                    "pass --all or --block NAME (blocks: {})",
                    BLOCKS.join(", ")
                )));
            } else {
                blocks
            };
            let mut results = Vec::new();
            for name in &names {
                for s in seed..seed + seeds.max(1) {
                    let r = run_block(name, s)?;
                    log::info!("{} seed {}: max rel err {:.2e}", name, s, r.report.max_rel_error);
                    results.push(r);
                }
            }
            let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
            let passed = results.iter().all(|r| r.passed);
            emit(&json!({
                "tolerance": TOLERANCE,
                "max_rel_error": worst,
                "passed": passed,
                "results": results,
            }))?;
            if passed {
                Ok(())
            } else {
                Err(Error::Verification(format!(
                    "max relative error {worst:.3e} exceeds {TOLERANCE:e}"
                )))
            }
        }
        Command::AttnDump {
            run,
            data,
            tracklet,
            segment,
            out,
        } => {
            let (cfg, dataset, model, store) = load_run(&run, data.as_deref())?;
            if model.net.dao.is_none() {
                return Err(Error::Config("model has no attention modules".into()));
            }
            let t = match tracklet {
                Some(name) => dataset
                    .tracklets
                    .iter()
                    .position(|t| t.info.name == name)
                    .ok_or_else(|| Error::Input(format!("no tracklet named `{name}`")))?,
                None => *dataset
                    .of_split(Split::Query)
                    .first()
                    .ok_or_else(|| Error::Input("dataset has no query tracklets".into()))?,
            };
            let windows = segment_windows(dataset.tracklets[t].len(), cfg.model.segment_len)?;
            let frames = windows.get(segment).ok_or_else(|| {
                Error::Input(format!("segment {segment} out of range ({} segments)", windows.len()))
            })?;
            let seg = dataset.frames_tensor(t, frames)?;
            let split = resize_and_split(&seg, cfg.model.alpha, cfg.model.big_res, cfg.model.small_res())?;
            let mut fw = Forward::new(&store, false);
            let result = model.net.forward_splits(&mut fw, &[split])?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut files = Vec::new();
            let mut csv = String::from("frame_index,branch,h,w,value\n");
            for (branch, maps) in &result.maps {
                let maps = fw.tape.value(*maps);
                for map in crate::dao::maps_of_segment(maps, 0, *branch) {
                    let name = format!("{}_frame{:02}.pgm", branch.name(), map.frame_index);
                    write_pgm(&out.join(&name), map.values.shape(), map.values.data())?;
                    files.push(name);
                    let w = map.values.shape()[1];
                    for (i, v) in map.values.data().iter().enumerate() {
                        csv.push_str(&format!(
                            "{},{},{},{},{}\n",
                            map.frame_index,
                            branch.name(),
                            i / w,
                            i % w,
                            v
                        ));
                    }
                }
            }
            let csv_path = out.join("maps.csv");
            fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
            emit(&json!({
                "tracklet": dataset.tracklets[t].info.name,
                "segment": segment,
                "frames": frames,
                "images": files,
                "csv": csv_path,
                "branches": [Branch::Detail.name(), Branch::Context.name()],
            }))
        }
    }
}

/// Loads a run directory: config, dataset, rebuilt model and checkpoint.
fn load_run(run: &Path, data: Option<&Path>) -> Result<(RunConfig, Dataset, ReidModel, ParamStore<f32>)> {
    let mut cfg = RunConfig::load(&run.join("config.json"))?;
    if let Some(d) = data {
        cfg.data.root = d.to_path_buf();
    }
    let dataset = Dataset::load(&cfg.data.root)?;
    let classes = train_groups(&dataset).len();
    let (model, mut store) = ReidModel::build(&cfg.model, classes, cfg.seed)?;
    load_checkpoint(&mut store, &run.join("checkpoint"))?;
    Ok((cfg, dataset, model, store))
}

/// 8-bit binary PGM, min-max normalised.
fn write_pgm(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    let (h, w) = (shape[0], shape[1]);
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let pixels: Vec<u8> = values
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(&pixels, w as u32, h as u32, ExtendedColorType::L8)?;
    Ok(())
}

/// Writes metric lines to the run's log file and to stdout.
struct Tee {
    file: fs::File,
    stdout: std::io::Stdout,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.stdout.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        self.stdout.flush()
    }
}
