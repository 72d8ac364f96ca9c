//! `seqmark`: synthesize well logs, train per-marker models, pick markers,
//! score picks and run the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use seqmark_core::config::RunConfig;
use seqmark_core::data::{
    load_checkpoint, load_dataset, load_picks_csv, load_wells, save_checkpoint, save_dataset, synthesize_wells,
    Dataset, LogChannel, MarkerSpec, SynthConfig,
};
use seqmark_core::evaluation::evaluate_dataset;
use seqmark_core::experiment::{ablation_csv, full_grid, run_ablation, summary_csv, threads_from_env};
use seqmark_core::inference::{append_curve_rows, predict_well, read_predictions_csv, well_curves, write_predictions_csv, CURVES_HEADER};
use seqmark_core::net::AblationMode;
use seqmark_core::training::train_marker_model;

#[derive(Parser)]
#[command(name = "seqmark", version, about = "Marker picking in well logs with a global/local attention CNN")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: wells/*.csv, picks.csv and manifest.txt.
    Synth(SynthArgs),
    /// Train one marker's model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Pick a marker in every well with a trained model.
    Predict(PredictArgs),
    /// Score picks against expert picks.
    Eval(EvalArgs),
    /// Run the mode × smoothing × seed grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 80)]
    wells: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Comma-separated logs to generate.
    #[arg(long, default_value = "gr")]
    channels: String,
    /// Markers shallowest first, as NAME:strong or NAME:subtle.
    #[arg(long, default_value = "UB000:strong,MB000:strong,TF180:subtle")]
    markers: String,
    /// Shortest well, in samples.
    #[arg(long, default_value_t = 1500)]
    min_len: usize,
    /// Longest well, in samples.
    #[arg(long, default_value_t = 2500)]
    max_len: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Combined,
    Global,
    Local,
}

impl From<Mode> for AblationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Combined => AblationMode::Combined,
            Mode::Global => AblationMode::GlobalOnly,
            Mode::Local => AblationMode::LocalOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding wells/ and picks.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    marker: String,
    /// `key = value` run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which views feed the head [default: combined, or the config's value].
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Gaussian label smoothing [default: on, or the config's value].
    #[arg(long, value_enum)]
    smoothing: Option<Switch>,
    /// Seed for the split, initialization and dropout [default: 42, or the config's value].
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path (.smck).
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV [default: next to the checkpoint, as NAME.history.csv].
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// A well CSV or a directory of them.
    #[arg(long)]
    wells: PathBuf,
    #[arg(long, default_value_t = 30)]
    mc_passes: usize,
    /// Master seed for the dropout passes.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// A detection needs a probability strictly above this.
    #[arg(long, default_value_t = 0.5)]
    prob_threshold: f64,
    /// A detection needs an uncertainty (ft) strictly below this.
    #[arg(long, default_value_t = 5.0)]
    uncertainty_threshold: f64,
    /// Predictions CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-depth probability and attention CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions CSV from `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Expert picks CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Depth tolerances in feet.
    #[arg(long, default_value = "1,2,5,10", value_delimiter = ',')]
    tolerances: Vec<f64>,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Error histogram CSV [default: next to the report, as NAME.histogram.csv].
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory holding wells/ and picks.csv.
    #[arg(long)]
    data: PathBuf,
    /// Markers to train and score.
    #[arg(long, value_delimiter = ',', required = true)]
    markers: Vec<String>,
    #[arg(long, default_value = "42,43,44", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// `key = value` base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-cell CSV.
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    /// Mean-per-cell CSV [default: next to --out, as NAME.summary.csv].
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// `dir/stem.suffix` for a sibling of `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_wells: a.wells,
        min_len: a.min_len,
        max_len: a.max_len,
        channels: LogChannel::parse_list(&a.channels)?,
        markers: MarkerSpec::parse_list(&a.markers)?,
        n_layers: a.layers,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (wells, picks) = synthesize_wells(&config)?;
    save_dataset(&Dataset { wells, picks }, &a.out)?;

    let mut manifest = String::new();
    let channels: Vec<&str> = config.channels.iter().map(|c| c.as_str()).collect();
    let rows = [
        ("wells", config.n_wells.to_string()),
        ("seed", config.seed.to_string()),
        ("channels", channels.join(",")),
        ("markers", MarkerSpec::format_list(&config.markers)),
        ("min_len", config.min_len.to_string()),
        ("max_len", config.max_len.to_string()),
        ("layers", config.n_layers.to_string()),
        ("trend_amplitude", config.trend_amplitude.to_string()),
        ("noise_std", config.noise_std.to_string()),
        ("strong_step", config.strong_step.to_string()),
        ("subtle_ratio", config.subtle_ratio.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(manifest, "{k} = {v}");
    }
    write(&a.out.join("manifest.txt"), &manifest)?;
    info!("wrote {} wells to {}", config.n_wells, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.train.mode = m.into();
    }
    if let Some(s) = a.smoothing {
        cfg.train.smoothing = matches!(s, Switch::On);
    }
    if let Some(seed) = a.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let ds = load_dataset(&a.data)?;
    if !ds.picks.iter().any(|p| p.marker == a.marker) {
        bail!("no picks for marker {} in {}", a.marker, a.data.display());
    }
    let model = train_marker_model(&ds, &a.marker, &cfg.net, &cfg.train)
        .with_context(|| format!("training {}", a.marker))?;
    if !model.skipped.is_empty() {
        log::warn!("{} wells lacked a {} pick: {}", model.skipped.len(), a.marker, model.skipped.join(","));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&model.checkpoint, &a.out)?;
    let history = a.history.unwrap_or_else(|| sibling(&a.out, "history.csv"));
    write(&history, &model.history.to_csv())?;
    info!(
        "{}: best epoch {} of {}, val loss {:.5}",
        a.marker,
        model.history.best_epoch,
        model.history.stopped_epoch,
        model.history.best_val_loss()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let wells = load_wells(&a.wells)?;
    let cfg = seqmark_core::inference::PredictConfig {
        mc_passes: a.mc_passes,
        seed: a.seed,
        prob_threshold: a.prob_threshold,
        uncertainty_threshold_ft: a.uncertainty_threshold,
    };
    let mut detections = Vec::with_capacity(wells.len());
    let mut curves = a.curves.as_ref().map(|_| format!("{CURVES_HEADER}\n"));
    for well in &wells {
        detections.push(predict_well(&ckpt, well, &cfg)?);
        if let Some(out) = curves.as_mut() {
            let (p, s) = well_curves(&ckpt, well)?;
            append_curve_rows(out, well, &p, &s);
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_predictions_csv(&detections, &a.out)?;
    if let (Some(path), Some(text)) = (&a.curves, &curves) {
        write(path, text)?;
    }
    let valid = detections.iter().filter(|d| d.valid).count();
    info!("{} of {} detections valid", valid, detections.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let detections = read_predictions_csv(&a.pred)?;
    let picks = load_picks_csv(&a.truth)?;
    let report = evaluate_dataset(&detections, &picks, &a.tolerances)?;
    write(&a.out, &report.to_csv())?;
    let histogram = a.histogram.unwrap_or_else(|| sibling(&a.out, "histogram.csv"));
    write(&histogram, &report.histogram.to_csv())?;
    println!("{}", report.summary_line());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(a.config.as_deref())?;
    let ds = load_dataset(&a.data)?;
    let cells = full_grid(&a.seeds);
    let results = run_ablation(&ds, &a.markers, &base, &cells, threads_from_env());
    write(&a.out, &ablation_csv(&results))?;
    let summary = a.summary.unwrap_or_else(|| sibling(&a.out, "summary.csv"));
    write(&summary, &summary_csv(&results))?;
    for r in results.iter().filter(|r| r.error.is_some()) {
        log::warn!(
            "{} smoothing={} seed={}: {}",
            r.cell.mode,
            r.cell.smoothing,
            r.cell.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    print!("{}", summary_csv(&results));
    Ok(())
}
