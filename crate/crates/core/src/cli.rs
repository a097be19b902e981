//! Command-line front end. [`run`] parses arguments, dispatches and maps
//! failures to exit codes: 0 success, 1 usage error, 2 runtime error.
//!
//! Any config field can be overridden as `--train.<field>=<value>`,
//! `--densenet.<field>=<value>` or `--levit.<field>=<value>`; list values are
//! written comma-separated (`--levit.stage_dims=16,24`).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::bin2img::{bytes_to_grid, decode_png, grid_to_tensor, ImageTensor};
use crate::cascade::{load_cascade, CascadeModel, DEFAULT_THRESHOLD, STAGE1_FILE, STAGE2_FILE};
use crate::data::{
    convert_path, load_image, load_split, scan_dir, split, synth_generate, write_split_file, Manifest, Split,
    SynthSpec, MANIFEST_FILE,
};
use crate::densenet::{build_densenet, DenseNetConfig, ARCH_TAG as DENSENET_TAG};
use crate::error::{io_err, Error, Result};
use crate::eval::{bench_throughput, emit_report, evaluate, ReportFormat};
use crate::levit::{build_levit, LeViTConfig, ARCH_TAG as LEVIT_TAG, NUM_FAMILIES};
use crate::model::ModelGraph;
use crate::train::{fine_tune, resume, train_model, write_metrics_csv, Checkpoint, Stage, TrainConfig, TrainData};

pub const SEED_ENV: &str = "LMCK_SEED";

#[derive(Parser, Debug)]
#[command(name = "levitmc", version, about = "Two-stage malware image classifier")]
struct Cli {
    /// Seed for every random choice; falls back to $LMCK_SEED, then 0.
    #[arg(long, global = true, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a file or directory of binaries to PNG plus manifest.jsonl.
    Convert { input: PathBuf, out: PathBuf },
    /// Build, index or split datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train one cascade stage.
    Train(TrainArgs),
    /// Print one JSON verdict per input image.
    Classify {
        /// Directory holding stage1.lmck and stage2.lmck.
        #[arg(long)]
        cascade: PathBuf,
        /// PNG, raw binary, directory of either, or manifest.jsonl.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Measure cascade throughput in images per second.
    Bench {
        #[arg(long)]
        cascade: PathBuf,
        /// Manifest (or its directory) supplying the images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Score the cascade on a labelled manifest.
    Eval {
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score; defaults to val when the manifest is split.
        #[arg(long)]
        split: Option<SplitArg>,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
        /// Name of this run in the report.
        #[arg(long, default_value = "this run")]
        name: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Generate the synthetic corpus.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        families: usize,
        #[arg(long, default_value_t = 16)]
        per_family: usize,
        #[arg(long, default_value_t = 16)]
        benign: usize,
        #[arg(long, default_value_t = 48)]
        motif_len: usize,
    },
    /// Index a root/<class>/*.png tree.
    Scan {
        root: PathBuf,
        /// Manifest destination (default root/manifest.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified train/val split of a manifest.
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        fraction: f64,
        /// Destination (default: rewrite the input manifest).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export {"id","split"} lines here.
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(value_enum)]
    stage: StageArg,
    /// Manifest (or its directory).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path, or a directory to receive stage1.lmck / stage2.lmck.
    #[arg(long)]
    out: PathBuf,
    /// Architecture preset before overrides.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Continue a run from its last checkpoint.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Fine-tune from this checkpoint with a fresh head.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Comma-separated parameter prefixes to freeze (with --init).
    #[arg(long, value_delimiter = ',')]
    freeze: Vec<String>,
    /// Metric CSV destination (default next to the checkpoint).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Stage1,
    Stage2,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    Default,
    Toy,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Json,
    Markdown,
}

/// Configuration overrides pulled out of argv before clap sees it.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Overrides {
    pub train: Vec<(String, String)>,
    pub densenet: Vec<(String, String)>,
    pub levit: Vec<(String, String)>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Splits `--section.field=value` arguments from the rest.
pub fn extract_overrides(args: Vec<OsString>) -> std::result::Result<(Vec<OsString>, Overrides), String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut ov = Overrides::default();
    for arg in args {
        let Some(s) = arg.to_str() else {
            rest.push(arg);
            continue;
        };
        let Some(body) = s.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let Some((section, kv)) = body.split_once('.') else {
            rest.push(arg);
            continue;
        };
        let target = match section {
            "train" => &mut ov.train,
            "densenet" => &mut ov.densenet,
            "levit" => &mut ov.levit,
            _ => {
                rest.push(arg);
                continue;
            }
        };
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| format!("override --{body} needs the form --{section}.<field>=<value>"))?;
        target.push((key.to_string(), value.to_string()));
    }
    Ok((rest, ov))
}

fn parse_value(raw: &str, current: &Value) -> Value {
    if current.is_array() && !raw.trim_start().starts_with('[') {
        let items = raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| serde_json::from_str(s.trim()).unwrap_or_else(|_| Value::String(s.trim().into())))
            .collect();
        return Value::Array(items);
    }
    if current.is_string() {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `field=value` pairs to a config through its JSON form.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(
    base: &T,
    section: &str,
    pairs: &[(String, String)],
) -> std::result::Result<T, String> {
    let mut v = serde_json::to_value(base).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().expect("configs serialize to objects");
    for (key, raw) in pairs {
        let current = obj
            .get(key)
            .ok_or_else(|| format!("unknown option --{section}.{key}"))?;
        let parsed = parse_value(raw, current);
        obj.insert(key.clone(), parsed);
    }
    serde_json::from_value(v).map_err(|e| format!("invalid --{section} override: {e}"))
}

fn defaults_of<T: Serialize>(section: &str, config: &T, out: &mut String) {
    out.push_str(&format!("\n{section} (defaults):\n"));
    if let Ok(Value::Object(map)) = serde_json::to_value(config) {
        for (k, v) in map {
            let shown = match v {
                Value::Array(items) => items.iter().map(Value::to_string).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("  --{section}.{k}={shown}\n"));
        }
    }
}

/// Every override key with its default value.
pub fn overrides_help() -> String {
    let mut out = String::from("Override any config field with --<section>.<field>=<value>.\n");
    defaults_of("train", &TrainConfig::default(), &mut out);
    defaults_of("densenet", &DenseNetConfig::default(), &mut out);
    defaults_of("levit", &LeViTConfig::default(), &mut out);
    out
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn workers(n: usize) -> usize {
    if n == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        n
    }
}

fn stdout_line(s: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(io_err("<stdout>"))
}

fn stage_model(
    stage: StageArg,
    preset: Preset,
    ov: &Overrides,
    seed: u64,
) -> std::result::Result<ModelGraph, Failure> {
    let model = match stage {
        StageArg::Stage1 => {
            let base = match preset {
                Preset::Default => DenseNetConfig::default(),
                Preset::Toy => DenseNetConfig::toy(),
            };
            let cfg = apply_overrides(&base, "densenet", &ov.densenet).map_err(Failure::Usage)?;
            build_densenet(&cfg, seed)
        }
        StageArg::Stage2 => {
            let base = match preset {
                Preset::Default => LeViTConfig::default(),
                Preset::Toy => LeViTConfig::toy(),
            };
            let cfg = apply_overrides(&base, "levit", &ov.levit).map_err(Failure::Usage)?;
            build_levit(&cfg, seed)
        }
    };
    model.map_err(|e| match e {
        Error::Config(m) => Failure::Usage(m),
        other => Failure::Runtime(other),
    })
}

fn cmd_train(args: TrainArgs, seed: u64, ov: &Overrides) -> std::result::Result<(), Failure> {
    let base = TrainConfig { seed, ..TrainConfig::default() };
    let config = apply_overrides(&base, "train", &ov.train).map_err(Failure::Usage)?;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (own, other, other_stage) = match args.stage {
        StageArg::Stage1 => (&ov.densenet, &ov.levit, "levit"),
        StageArg::Stage2 => (&ov.levit, &ov.densenet, "densenet"),
    };
    if !other.is_empty() {
        return Err(Failure::Usage(format!("--{other_stage}.* overrides do not apply to this stage")));
    }
    if !own.is_empty() && (args.resume.is_some() || args.init.is_some()) {
        return Err(Failure::Usage("architecture overrides cannot change a loaded checkpoint".into()));
    }
    let fresh = if args.resume.is_none() && args.init.is_none() {
        Some(stage_model(args.stage, args.preset, ov, seed)?)
    } else {
        None
    };
    let manifest = Manifest::load(manifest_path(&args.data))?;
    let classes = manifest.class_index.clone();
    let (stage, file, tag, head) = match args.stage {
        StageArg::Stage1 => (Stage::Binary, STAGE1_FILE, DENSENET_TAG, 2),
        StageArg::Stage2 => (Stage::Family, STAGE2_FILE, LEVIT_TAG, NUM_FAMILIES),
    };
    let data = TrainData::load(&manifest)?.for_stage(&classes, stage)?;
    let outcome = if let Some(path) = &args.resume {
        resume(Checkpoint::load(path)?, &data, &config)?
    } else if let Some(path) = &args.init {
        fine_tune(Checkpoint::load(path)?, tag, head, &args.freeze, &data, &config)?
    } else {
        let model = fresh.expect("built when neither --resume nor --init is given");
        train_model(model, &data, &config, Some(classes))?
    };
    let out = if args.out.is_dir() || args.out.to_string_lossy().ends_with('/') {
        fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
        args.out.join(file)
    } else {
        args.out.clone()
    };
    outcome.best.save(&out)?;
    outcome.last.save(out.with_extension("last.lmck"))?;
    let metrics = args.metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
    write_metrics_csv(&outcome.log, &metrics)?;
    if let Some(best) = outcome.best.history.last() {
        eprintln!(
            "best epoch {} monitored accuracy {:.4}; wrote {}",
            best.epoch,
            best.monitored(),
            out.display()
        );
    }
    match outcome.aborted {
        Some(e) => Err(Failure::Runtime(e)),
        None => Ok(()),
    }
}

/// Images named by `--input`, with their ids.
fn classify_inputs(input: &Path) -> Result<Vec<(String, ImageTensor)>> {
    if input.extension().is_some_and(|e| e == "jsonl") || input.join(MANIFEST_FILE).is_file() {
        let m = Manifest::load(manifest_path(input))?;
        return m
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), load_image(&m, r)?)))
            .collect();
    }
    let files = if input.is_dir() {
        let mut f: Vec<PathBuf> = fs::read_dir(input)
            .map_err(io_err(input))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(input)))
            .collect::<Result<_>>()?;
        f.retain(|p| p.is_file());
        f.sort();
        f
    } else {
        vec![input.to_path_buf()]
    };
    files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(io_err(p))?;
            let grid = if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                decode_png(&bytes, 0)?
            } else {
                bytes_to_grid(&bytes)?
            };
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, grid_to_tensor(&grid)?))
        })
        .collect()
}

fn cascade_at(dir: &Path, threshold: f64) -> std::result::Result<CascadeModel, Failure> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Failure::Usage(format!("--threshold {threshold} is outside (0, 1)")));
    }
    Ok(load_cascade(dir, threshold)?)
}

fn dispatch(cli: Cli, ov: &Overrides) -> std::result::Result<(), Failure> {
    let seed = cli.seed;
    match cli.command {
        Command::Convert { input, out } => {
            let done = convert_path(&input, &out)?;
            eprintln!("wrote {} images to {}", done.written.len(), out.display());
        }
        Command::Dataset(DatasetCmd::Synth {
            out,
            families,
            per_family,
            benign,
            motif_len,
        }) => {
            let spec = SynthSpec {
                families,
                samples_per_family: per_family,
                benign_samples: benign,
                seed,
                motif_len,
                ..SynthSpec::default()
            };
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let m = synth_generate(&spec, &out)?;
            eprintln!("wrote {} samples to {}", m.records.len(), out.display());
        }
        Command::Dataset(DatasetCmd::Scan { root, out }) => {
            let m = scan_dir(&root)?;
            for w in m.class_index.warnings() {
                eprintln!("warning: {w}");
            }
            let dest = out.unwrap_or_else(|| root.join(MANIFEST_FILE));
            m.save(&dest)?;
            eprintln!("indexed {} images in {} classes", m.records.len(), m.class_index.discovered());
        }
        Command::Dataset(DatasetCmd::Split {
            manifest,
            fraction,
            out,
            split_file,
        }) => {
            let src = manifest_path(&manifest);
            let m = split(&Manifest::load(&src)?, fraction, seed)?;
            m.save(out.as_deref().unwrap_or(&src))?;
            if let Some(p) = split_file {
                write_split_file(&m, p)?;
            }
            eprintln!(
                "{} train / {} val",
                m.select(Some(Split::Train)).len(),
                m.select(Some(Split::Val)).len()
            );
        }
        Command::Train(args) => cmd_train(args, seed, ov)?,
        Command::Classify {
            cascade,
            input,
            threshold,
            workers: w,
        } => {
            let c = cascade_at(&cascade, threshold)?;
            let inputs = classify_inputs(&input)?;
            let images: Vec<ImageTensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
            let verdicts = c.classify_batch(&images, workers(w))?;
            for ((id, _), v) in inputs.iter().zip(&verdicts) {
                stdout_line(&v.to_json(id, c.class_index()))?;
            }
        }
        Command::Bench {
            cascade,
            data,
            batch_size,
            warmup,
            reps,
            workers: w,
        } => {
            let c = cascade_at(&cascade, DEFAULT_THRESHOLD)?;
            let m = Manifest::load(manifest_path(&data))?;
            let images = load_split(&m, None)?.images;
            let report = bench_throughput(&c, &images, batch_size, warmup, reps, workers(w))?;
            stdout_line(&serde_json::to_string(&report).map_err(Error::from)?)?;
        }
        Command::Eval {
            cascade,
            data,
            split: which,
            format,
            name,
            out,
            workers: w,
        } => {
            let c = cascade_at(&cascade, DEFAULT_THRESHOLD)?;
            let m = Manifest::load(manifest_path(&data))?;
            let tagged = m.records.iter().any(|r| r.split.is_some());
            let sel = match which {
                Some(SplitArg::Train) => Some(Split::Train),
                Some(SplitArg::Val) => Some(Split::Val),
                Some(SplitArg::All) => None,
                None if tagged => Some(Split::Val),
                None => None,
            };
            let report = evaluate(&c, &m, sel, workers(w))?;
            eprintln!("accuracy {:.4}", report.accuracy);
            let fmt = match format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Markdown => ReportFormat::Markdown,
            };
            let doc = emit_report(&[(&name, &report)], fmt)?;
            match out {
                Some(p) => fs::write(&p, doc).map_err(io_err(&p))?,
                None => print!("{doc}"),
            }
        }
    }
    Ok(())
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, ov) = match extract_overrides(args) {
        Ok(x) => x,
        Err(m) => {
            eprintln!("error: {m}");
            return 1;
        }
    };
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_long_help(overrides_help()));
    let parsed = cmd
        .try_get_matches_from(rest)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli, &ov) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
