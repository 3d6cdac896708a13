//! `sfbc` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sfbc_core::annotator::{
    self, AnnotateOptions, AnnotationCache, AnnotatorBackend, EndpointConfig, OnFailure,
    PromptPair, RemoteBackend, ScriptedOracle,
};
use sfbc_core::datagen::{self, DatasetConfig};
use sfbc_core::env::{render, DEFAULT_FRAME_SIZE};
use sfbc_core::harness::{self, EvalConfig, EvalReport, ReproduceConfig, SuccessRule, TrainSettings};
use sfbc_core::learner::{self, Method, PolicyParams};
use sfbc_core::rng;
use sfbc_core::sfo::{self, AnnotationIndex, LastSegmentRule, Segmentation};
use sfbc_core::SfbcError;

#[derive(Parser)]
#[command(name = "sfbc", version, about = "Sub-trajectory filtered behavior cloning on a pendulum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the mixed expert/failure dataset.
    GenData(GenDataArgs),
    /// Score every sub-trajectory with both prompts.
    Annotate(AnnotateArgs),
    /// Retrospectively filter and weight samples for one preset.
    Filter(FilterArgs),
    /// Train a policy on a weighted sample file.
    Train(TrainArgs),
    /// Evaluate a trained policy across seeds.
    Eval(EvalArgs),
    /// Run the full pipeline for a list of presets.
    Reproduce(ReproduceArgs),
    /// Dump the frames an annotator would see for one sub-trajectory.
    RenderPreview(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = datagen::DEFAULT_TRAJECTORIES)]
    trajectories: usize,
    #[arg(long, default_value_t = datagen::DEFAULT_HORIZON)]
    horizon: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Args)]
struct EndpointArgs {
    #[arg(long)]
    endpoint_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key: Option<String>,
    /// Global request budget for the remote backend.
    #[arg(long)]
    requests_per_minute: Option<u32>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    /// Markov prompt override.
    #[arg(long)]
    markov_prompt: Option<String>,
    /// Non-Markov prompt override.
    #[arg(long)]
    nonmarkov_prompt: Option<String>,
}

impl EndpointArgs {
    fn backend(&self, kind: BackendKind) -> Result<Box<dyn AnnotatorBackend>> {
        Ok(match kind {
            BackendKind::Oracle => Box::new(ScriptedOracle),
            BackendKind::Remote => {
                let mut cfg = EndpointConfig::resolve(
                    self.endpoint_url.clone(),
                    self.model.clone(),
                    self.api_key.clone(),
                )?;
                cfg.requests_per_minute = self.requests_per_minute;
                cfg.timeout = Duration::from_secs(self.timeout_secs);
                Box::new(RemoteBackend::new(cfg))
            }
        })
    }

    fn prompts(&self) -> Result<PromptPair> {
        let d = PromptPair::default();
        Ok(PromptPair::new(
            self.markov_prompt.clone().unwrap_or(d.markov_text),
            self.nonmarkov_prompt.clone().unwrap_or(d.nonmarkov_text),
        )?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FailureMode {
    Skip,
    Abort,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = sfo::DEFAULT_SEGMENT_LENGTH)]
    segment_length: usize,
    #[arg(long, default_value_t = annotator::DEFAULT_SUBSAMPLE)]
    subsample: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Append-only cache file; reruns reuse its entries.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "skip")]
    on_failure: FailureMode,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Required unless the preset disables filtering and weighting.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value = "sfbc")]
    preset: Method,
    #[arg(long)]
    alpha: Option<f64>,
    /// Drop the final sub-trajectory, which has no successor to vouch for it.
    #[arg(long)]
    drop_last: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainShape {
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "256,256")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = learner::DEFAULT_SIGMA)]
    sigma: f64,
}

impl TrainShape {
    fn settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            hidden: self.hidden.clone(),
            sigma: self.sigma,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = "sfbc")]
    preset: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    shape: TrainShape,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalShape {
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_HORIZON)]
    eval_horizon: usize,
    /// Radians from upright.
    #[arg(long, default_value_t = 0.3)]
    upright_threshold: f64,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 0.9)]
    fraction: f64,
}

impl EvalShape {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.episodes,
            horizon: self.eval_horizon,
            rule: SuccessRule {
                upright_threshold: self.upright_threshold,
                window: self.window,
                fraction: self.fraction,
            },
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    /// Root seed for evaluation streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_SEEDS)]
    seeds: usize,
    #[command(flatten)]
    eval: EvalShape,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendKind,
    /// `all` or a comma-separated preset list.
    #[arg(long, default_value = "all")]
    presets: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_SEEDS)]
    seeds: usize,
    #[arg(long, default_value_t = datagen::DEFAULT_TRAJECTORIES)]
    trajectories: usize,
    #[arg(long, default_value_t = datagen::DEFAULT_HORIZON)]
    horizon: usize,
    #[command(flatten)]
    shape: TrainShape,
    #[command(flatten)]
    eval: EvalShape,
    #[arg(long, default_value_t = annotator::DEFAULT_SUBSAMPLE)]
    subsample: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Directory for the CSV reports and provenance record.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    traj: u32,
    #[arg(long, default_value_t = 0)]
    segment: usize,
    #[arg(long, default_value_t = sfo::DEFAULT_SEGMENT_LENGTH)]
    segment_length: usize,
    #[arg(long, default_value_t = annotator::DEFAULT_SUBSAMPLE)]
    subsample: usize,
    #[arg(long, default_value_t = DEFAULT_FRAME_SIZE)]
    size: u32,
    #[arg(long)]
    out: PathBuf,
}

fn parse_presets(list: &str) -> Result<Vec<Method>> {
    if list == "all" {
        return Ok(Method::ALL.to_vec());
    }
    list.split(',')
        .map(|p| p.trim().parse::<Method>().map_err(Into::into))
        .collect()
}

fn open_cache(path: Option<&Path>) -> Result<AnnotationCache> {
    Ok(match path {
        Some(p) => AnnotationCache::open(p)?,
        None => AnnotationCache::in_memory(),
    })
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = DatasetConfig {
        n_trajectories: a.trajectories,
        horizon: a.horizon,
        ..DatasetConfig::new(a.seed)
    };
    let generated = datagen::generate(&cfg)?;
    let gates = datagen::check_gates(&generated.dataset, &generated.labels)?;
    datagen::write(&generated, &a.out)?;
    print_json(&json!({
        "out": a.out,
        "trajectories": generated.dataset.trajectories.len(),
        "records": generated.dataset.record_count(),
        "checksum": generated.dataset.manifest.dataset_checksum(),
        "gates": gates,
        "gates_passed": gates.passed(),
    }));
    if !gates.passed() {
        bail!(SfbcError::InvalidArgument(format!("dataset gates failed: {gates:?}")));
    }
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let backend = a.endpoint.backend(a.backend)?;
    let prompts = a.endpoint.prompts()?;
    let dataset = datagen::load(&a.data)?;
    let cache = open_cache(a.cache.as_deref())?;
    let opts = AnnotateOptions {
        segment_length: a.segment_length,
        subsample: a.subsample,
        concurrency: a.concurrency,
        on_failure: match a.on_failure {
            FailureMode::Skip => OnFailure::Skip,
            FailureMode::Abort => OnFailure::Abort,
        },
    };
    let run = annotator::annotate_dataset(&dataset, backend.as_ref(), &prompts, &cache, &opts)?;
    annotator::write_annotations(&a.out, &run.annotations)?;
    print_json(&json!({
        "out": a.out,
        "backend": backend.id(),
        "annotations": run.annotations.len(),
        "failed": run.failures.len(),
        "stride": run.stride,
        "queries": run.queries,
        "cache_hits": run.cache_hits,
    }));
    for f in &run.failures {
        eprintln!("annotation failed: traj {} segment {}: {}", f.traj_id, f.i, f.error);
    }
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let dataset = datagen::load(&a.data)?;
    let mut cfg = a.preset.filter_config();
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    if a.drop_last {
        cfg.last_segment = LastSegmentRule::Drop;
    }
    let k = Segmentation::Length(a.preset.segment_length().resolve(dataset.horizon()))
        .segment_length(dataset.horizon())?;
    let index = match &a.annotations {
        Some(p) => AnnotationIndex::new(annotator::read_annotations(p)?),
        None if cfg.needs_annotations() => {
            bail!(SfbcError::InvalidArgument(format!(
                "preset {} requires --annotations",
                a.preset
            )))
        }
        None => AnnotationIndex::new(Vec::new()),
    };
    let weighted = sfo::build_weighted_dataset(&dataset, &index, &cfg, k)?;
    sfo::write_weighted(&a.out, &weighted.samples)?;
    print_json(&json!({
        "out": a.out,
        "preset": a.preset,
        "segment_length": k,
        "stats": weighted.stats,
    }));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let samples = sfo::read_weighted(&a.samples)?;
    let cfg = a.shape.settings().config(a.preset, a.seed);
    let params = learner::train(&samples, &cfg)?;
    params.save(&a.out)?;
    if let Some(path) = &a.loss_curve {
        std::fs::write(path, params.loss_curve_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(&json!({
        "out": a.out,
        "samples": params.sample_count,
        "initial_loss": params.initial_loss,
        "final_loss": params.loss_curve.last(),
    }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let params = PolicyParams::load(&a.params)?;
    let cfg = a.eval.config();
    let seeds = (0..a.seeds)
        .map(|s| harness::evaluate(&params, &cfg, rng::derive_seed(a.seed, "eval", s as u64), s))
        .collect::<sfbc_core::Result<Vec<_>>>()?;
    let report = EvalReport::from_seeds(params.config.method, seeds)?;
    if let Some(out) = &a.out {
        sfbc_core::io::write_json(out, &report)?;
    }
    print_json(&serde_json::to_value(&report)?);
    Ok(())
}

fn reproduce(a: ReproduceArgs) -> Result<()> {
    let backend = a.endpoint.backend(a.backend)?;
    let prompts = a.endpoint.prompts()?;
    let cfg = ReproduceConfig {
        n_trajectories: a.trajectories,
        horizon: a.horizon,
        n_seeds: a.seeds,
        presets: parse_presets(&a.presets)?,
        train: a.shape.settings(),
        eval: a.eval.config(),
        subsample: a.subsample,
        concurrency: a.concurrency,
        ..ReproduceConfig::new(a.seed)
    };
    let cache = open_cache(a.cache.as_deref())?;
    let report = harness::reproduce(&cfg, backend.as_ref(), &prompts, &cache)?;
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    print!("{}", report.table());
    println!();
    print!("{}", report.summary_csv());
    Ok(())
}

fn render_preview(a: RenderArgs) -> Result<()> {
    let dataset = datagen::load(&a.data)?;
    let traj = dataset
        .trajectories
        .iter()
        .find(|t| t.id == a.traj)
        .ok_or_else(|| SfbcError::InvalidArgument(format!("no trajectory {}", a.traj)))?;
    let segments = sfo::decompose(traj, Segmentation::Length(a.segment_length))?;
    let seg = segments.get(a.segment).ok_or_else(|| {
        SfbcError::InvalidArgument(format!(
            "segment {} out of range ({} segments)",
            a.segment,
            segments.len()
        ))
    })?;
    let stride = annotator::stride_for(a.segment_length, a.subsample, Some(annotator::MAX_FRAMES));
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = Vec::new();
    for j in annotator::subsample_indices(seg.len(), stride) {
        let frame = render(&seg.records[j].state, a.size, a.size)?;
        let path = a.out.join(format!("traj{}_seg{}_t{:04}.png", a.traj, a.segment, seg.start + j));
        frame.save(&path)?;
        written.push(path);
    }
    print_json(&json!({ "frames": written, "stride": stride }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Annotate(a) => annotate(a),
        Command::Filter(a) => filter(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Reproduce(a) => reproduce(a),
        Command::RenderPreview(a) => render_preview(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default();
            eprintln!("{}", json!({ "error": "usage", "message": first.trim_start_matches("error: ") }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<SfbcError>().map_or("error", SfbcError::kind);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}
