//! `avru`: generate, render, train, evaluate and embed.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O or corrupt data,
//! 4 incompatibility, 5 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avru::dataset::{read_manifest, read_split_packed, write_dataset, DatasetError, Split};
use avru::eval::{evaluate, export_embeddings};
use avru::net::NetError;
use avru::render::write_sample;
use avru::render::{render_unified, RenderError, RenderLayout};
use avru::synthgen::{generate_dataset, GenerationError, GeneratorConfig};
use avru::train::data::{reduced_instance, reduction_seed};
use avru::train::{train, Checkpoint, Regime, TrainError, TrainRunSpec};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "avru", version, about = "Unified abstract visual reasoning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a JSON generator config.
    Generate {
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render every instance of a dataset as a unified canvas.
    Render {
        dataset: PathBuf,
        out: PathBuf,
        /// Write PNGs and JSON sidecars; without it canvases are only checked.
        #[arg(long)]
        png: bool,
        #[arg(long)]
        split: Option<Split>,
        /// Reduce answers to this count before rendering.
        #[arg(long = "n-a")]
        n_a: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON run config.
    Train {
        config: PathBuf,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        source: Option<PathBuf>,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long = "max-epochs")]
        max_epochs: Option<usize>,
    },
    /// Score a checkpoint on one split and print the report as JSON.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long = "n-a")]
        n_a: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export pooled embeddings as CSV.
    Embed {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long = "n-a")]
        n_a: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Incompatible(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Incompatible(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let m = e.to_string();
        match e {
            TrainError::Config(_) | TrainError::Net(NetError::Config(_)) => CliError::Config(m),
            TrainError::Io(_) | TrainError::Dataset(_) | TrainError::Checkpoint(_) => CliError::Io(m),
            TrainError::Incompatible(_) | TrainError::Net(_) => CliError::Incompatible(m),
            TrainError::NonFinite(_) => CliError::Numeric(m),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Incompatible(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Reads a JSON object, reporting syntax errors with their position.
fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::Config(format!(
            "{}: malformed JSON at line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))),
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Resolves a string path key against the config file's directory.
fn resolve_key(map: &mut Map<String, Value>, key: &str, base: &Path) {
    if let Some(Value::String(s)) = map.get(key) {
        let p = Path::new(s);
        if p.is_relative() {
            let joined = base.join(p).display().to_string();
            map.insert(key.to_string(), Value::String(joined));
        }
    }
}

fn take_out(map: &mut Map<String, Value>, flag: Option<PathBuf>, base: &Path) -> Result<PathBuf, CliError> {
    let from_file = match map.remove("out") {
        None => None,
        Some(Value::String(s)) => Some(base.join(s)),
        Some(_) => return Err(CliError::Config("`out` must be a string path".into())),
    };
    flag.or(from_file).ok_or_else(|| CliError::Config("no output directory: set `out` in the config or pass --out".into()))
}

fn parse<T: serde::de::DeserializeOwned>(map: Map<String, Value>, path: &Path) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn cmd_generate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut map = read_config(config)?;
    let base = base_dir(config);
    let out = take_out(&mut map, out, &base)?;
    if let Some(s) = seed {
        map.insert("seed".into(), s.into());
    }
    let cfg: GeneratorConfig = parse(map, config)?;
    let (manifest, splits) = generate_dataset(&cfg)?;
    write_dataset(&out, &manifest, &splits)?;
    println!(
        "{}: {} n_a={} train={} val={} test={} rules={}",
        out.display(),
        manifest.family,
        manifest.n_a,
        manifest.splits.train,
        manifest.splits.val,
        manifest.splits.test,
        manifest.rule_vocab.len()
    );
    Ok(())
}

fn cmd_render(dataset: &Path, out: &Path, png: bool, split: Option<Split>, n_a: Option<usize>, seed: u64) -> Result<(), CliError> {
    let manifest = read_manifest(dataset)?;
    let n_a = n_a.unwrap_or(manifest.n_a);
    if n_a < 2 || n_a > manifest.n_a {
        return Err(CliError::Config(format!("--n-a {n_a} must lie in [2, {}]", manifest.n_a)));
    }
    let structure = manifest.structure().with_n_a(n_a);
    let layout = RenderLayout::default();
    let reduce = reduction_seed(seed, n_a);
    let splits: Vec<Split> = split.map_or(Split::ALL.to_vec(), |s| vec![s]);
    let mut total = 0;
    let mut dims = None;
    for s in splits {
        let items = read_split_packed(dataset, &manifest, s)?;
        let dir = out.join(s.name());
        if png {
            fs::create_dir_all(&dir)?;
        }
        let sizes: Result<Vec<(usize, usize)>, CliError> = items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let inst = reduced_instance(item, s, i, n_a, reduce);
                let sample = render_unified(&inst, &structure, &layout)?;
                if png {
                    write_sample(&dir, &format!("{}-{i:06}", s.name()), &sample)?;
                }
                Ok(sample.canvas.dims())
            })
            .collect();
        let sizes = sizes?;
        total += sizes.len();
        dims = dims.or(sizes.first().copied());
    }
    let (h, w) = dims.unwrap_or_default();
    println!("{total} canvases {h}x{w}{}", if png { format!(" written to {}", out.display()) } else { String::new() });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    regime: Option<Regime>,
    source: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
) -> Result<(), CliError> {
    let mut map = read_config(config)?;
    let base = base_dir(config);
    let out = take_out(&mut map, out, &base)?;
    resolve_key(&mut map, "dataset", &base);
    resolve_key(&mut map, "source", &base);
    if let Some(r) = regime {
        map.insert("regime".into(), r.to_string().into());
    }
    if let Some(s) = source {
        map.insert("source".into(), s.display().to_string().into());
    }
    if let Some(v) = seed {
        map.insert("seed".into(), v.into());
    }
    if let Some(v) = lr {
        map.insert("lr".into(), v.into());
    }
    if let Some(v) = batch_size {
        map.insert("batch_size".into(), v.into());
    }
    if let Some(v) = max_epochs {
        map.insert("max_epochs".into(), v.into());
    }
    let spec: TrainRunSpec = parse(map, config)?;
    spec.validate()?;
    let outcome = train(&spec)?;
    outcome.write(&out)?;
    let s = &outcome.summary;
    match &s.test {
        Some(t) => println!(
            "{}: {} epochs, {} stage(s), test accuracy {:.4} at n_a={}",
            out.display(),
            s.epochs_run,
            s.stages.len(),
            t.accuracy,
            t.n_a
        ),
        None => println!("{}: {} epochs, {} stage(s)", out.display(), s.epochs_run, s.stages.len()),
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, split: Split, n_a: Option<usize>, seed: u64) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let n_a = n_a.unwrap_or(ckpt.network.config.n_a);
    let report = evaluate(&ckpt, dataset, split, n_a, seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    Ok(())
}

fn cmd_embed(checkpoint: &Path, dataset: &Path, out: &Path, split: Split, n_a: Option<usize>, seed: u64) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let n_a = n_a.unwrap_or(ckpt.network.config.n_a);
    let rows = export_embeddings(&ckpt, dataset, split, n_a, seed, out)?;
    println!("{rows} embeddings of width {} written to {}", ckpt.network.config.d(), out.display());
    Ok(())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("AVRU_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Config(format!("AVRU_THREADS={v:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(&config, out, seed),
        Command::Render { dataset, out, png, split, n_a, seed } => cmd_render(&dataset, &out, png, split, n_a, seed),
        Command::Train { config, regime, source, out, seed, lr, batch_size, max_epochs } => {
            cmd_train(&config, regime, source, out, seed, lr, batch_size, max_epochs)
        }
        Command::Eval { checkpoint, dataset, split, n_a, seed } => cmd_eval(&checkpoint, &dataset, split, n_a, seed),
        Command::Embed { checkpoint, dataset, out, split, n_a, seed } => {
            cmd_embed(&checkpoint, &dataset, &out, split, n_a, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
