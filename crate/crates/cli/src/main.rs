//! Command-line driver: dataset synthesis, pretraining, downstream
//! evaluation and the whole-model gradient check.
//!
//! Exit codes: 0 on success, 2 when configuration or input validation
//! fails, 1 on runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avmae::checkpoint::load_checkpoint;
use avmae::config::{EvalTask, RunConfig};
use avmae::downstream::ProbeSource;
use avmae::error::{Error, Result};
use avmae::manifest::{ingest_manifest, write_dataset};
use avmae::model::ModalitySelect;
use avmae::runner::{persist_pretrain, run_eval, run_gradcheck, run_pretrain};
use avmae::synthetic::{generate_synthetic, Dataset};

#[derive(Parser)]
#[command(name = "avmae", version, about = "Temporally aligned contrastive masked autoencoder for audio-visual pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it with a JSON-lines manifest.
    Synth(SynthArgs),
    /// Pretrain a model; writes a checkpoint, a per-step JSONL log and a
    /// per-epoch summary.
    Pretrain(PretrainArgs),
    /// Linear-probe classification on a frozen checkpoint.
    Probe(ProbeArgs),
    /// Cross-modal retrieval metrics (both directions, all aggregation
    /// strategies).
    Retrieve(RetrieveArgs),
    /// Sound-prompted localization maps.
    Localize(LocalizeArgs),
    /// Intra-video temporal segmentation against labelled boundaries.
    Segment(SegmentArgs),
    /// Check every parameter group's gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run one config axis over several values, pretraining and evaluating
    /// each point.
    Sweep(SweepArgs),
}

/// Configuration source plus field overrides shared by every subcommand.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    enc_depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dec_depth: Option<usize>,
    #[arg(long)]
    dec_dim: Option<usize>,
    #[arg(long)]
    n_registers: Option<usize>,
    #[arg(long)]
    use_global_token: Option<bool>,
    #[arg(long)]
    patch: Option<usize>,
    /// Sets both modality masking ratios at once.
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    mask_ratio_audio: Option<f64>,
    #[arg(long)]
    mask_ratio_visual: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda_contrastive: Option<f64>,
    #[arg(long)]
    lambda_reconstruction: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    s_length: Option<usize>,
    #[arg(long)]
    spectrogram_len: Option<usize>,
    #[arg(long)]
    num_videos: Option<usize>,
    #[arg(long)]
    first_video: Option<usize>,
    #[arg(long)]
    correlation: Option<f64>,
    #[arg(long)]
    events_per_video: Option<usize>,
    #[arg(long)]
    num_latent_classes: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    eval_videos: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let cfg: RunConfig =
                    serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
                cfg
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.dim, cfg.arch.dim);
        set!(self.enc_depth, cfg.arch.enc_depth);
        set!(self.heads, cfg.arch.heads);
        set!(self.dec_depth, cfg.arch.dec_depth);
        set!(self.dec_dim, cfg.arch.dec_dim);
        set!(self.n_registers, cfg.arch.n_registers);
        set!(self.use_global_token, cfg.arch.use_global_token);
        set!(self.patch, cfg.arch.patch);
        set!(self.mask_ratio, cfg.train.mask_ratio_audio);
        set!(self.mask_ratio, cfg.train.mask_ratio_visual);
        set!(self.mask_ratio_audio, cfg.train.mask_ratio_audio);
        set!(self.mask_ratio_visual, cfg.train.mask_ratio_visual);
        set!(self.tau, cfg.train.tau);
        set!(self.lambda_contrastive, cfg.train.lambda_contrastive);
        set!(self.lambda_reconstruction, cfg.train.lambda_reconstruction);
        set!(self.learning_rate, cfg.train.optimizer.learning_rate);
        set!(self.epochs, cfg.train.epochs);
        set!(self.batch_size, cfg.train.batch_size);
        set!(self.frames, cfg.data.frames);
        set!(self.s_length, cfg.data.s_length);
        set!(self.spectrogram_len, cfg.data.spectrogram_len);
        set!(self.num_videos, cfg.data.num_videos);
        set!(self.first_video, cfg.data.first_video);
        set!(self.correlation, cfg.data.correlation);
        set!(self.events_per_video, cfg.data.events_per_video);
        set!(self.num_latent_classes, cfg.data.num_latent_classes);
        set!(self.noise_std, cfg.data.noise_std);
        set!(self.eval_videos, cfg.eval.eval_videos);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset seed; overrides the config's data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for tensors and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training seed (also the default dataset seed).
    #[arg(long)]
    seed: u64,
    /// Dataset manifest; omitted means synthetic data from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint/, train_log.jsonl and epochs.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe training seed.
    #[arg(long)]
    seed: u64,
    /// Probe-training manifest; omitted means synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out manifest; omitted means a synthetic held-out split.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, value_enum)]
    probe_source: Option<CliProbeSource>,
    #[arg(long, value_enum)]
    probe_modality: Option<CliModality>,
    #[arg(long)]
    probe_epochs: Option<usize>,
    #[arg(long)]
    probe_learning_rate: Option<f64>,
    /// Metrics JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation manifest; omitted means a synthetic held-out split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for the CAVT and PGM localization maps.
    #[arg(long)]
    map_dir: Option<PathBuf>,
    /// Metrics JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cluster count; omitted means the config's events_per_video.
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    tolerance: Option<usize>,
    #[arg(long, value_enum)]
    modality: Option<CliModality>,
    /// Seed for the k-means fallback.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Config axis to sweep: n_registers, mask_ratio, frames, s_length,
    /// use_global_token, correlation, or events_per_video.
    #[arg(long)]
    param: String,
    /// Comma-separated values for the axis.
    #[arg(long)]
    values: String,
    #[arg(long)]
    seed: u64,
    /// Evaluation task per point; defaults to the config's task or retrieve.
    #[arg(long, value_enum)]
    task: Option<CliTask>,
    /// Combined results JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliProbeSource {
    Global,
    RegisterMean,
    PatchMean,
}

impl From<CliProbeSource> for ProbeSource {
    fn from(v: CliProbeSource) -> Self {
        match v {
            CliProbeSource::Global => ProbeSource::Global,
            CliProbeSource::RegisterMean => ProbeSource::RegisterMean,
            CliProbeSource::PatchMean => ProbeSource::PatchMean,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliModality {
    Audio,
    Visual,
    Both,
}

impl From<CliModality> for ModalitySelect {
    fn from(v: CliModality) -> Self {
        match v {
            CliModality::Audio => ModalitySelect::Audio,
            CliModality::Visual => ModalitySelect::Visual,
            CliModality::Both => ModalitySelect::Both,
        }
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliTask {
    Retrieve,
    Classify,
    Localize,
    Segment,
}

impl From<CliTask> for EvalTask {
    fn from(v: CliTask) -> Self {
        match v {
            CliTask::Retrieve => EvalTask::Retrieve,
            CliTask::Classify => EvalTask::Classify,
            CliTask::Localize => EvalTask::Localize,
            CliTask::Segment => EvalTask::Segment,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Localize(args) => cmd_localize(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Load the evaluation dataset: an explicit manifest when given, otherwise
/// the synthetic held-out split past the training range.
fn eval_dataset(cfg: &RunConfig, manifest: &Option<PathBuf>) -> Result<Dataset> {
    match manifest {
        Some(path) => ingest_manifest(path, cfg.data.s_length, cfg.arch.patch),
        None => generate_synthetic(&cfg.data.held_out(cfg.eval.eval_videos), cfg.arch.patch),
    }
}

fn train_dataset(cfg: &RunConfig, manifest: &Option<PathBuf>) -> Result<Dataset> {
    match manifest {
        Some(path) => ingest_manifest(path, cfg.data.s_length, cfg.arch.patch),
        None => generate_synthetic(&cfg.data, cfg.arch.patch),
    }
}



fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    let data = generate_synthetic(&cfg.data, cfg.arch.patch)?;
    let manifest = write_dataset(&data, &args.out)?;
    eprintln!("wrote {} clips, manifest at {}", data.len(), manifest.display());
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    if args.data.is_none() {
        cfg.data.seed = args.seed;
    }
    let data = train_dataset(&cfg, &args.data)?;
    eprintln!(
        "pretraining on {} clips: dim {}, {} epochs, batch {}",
        data.len(),
        cfg.arch.dim,
        cfg.train.epochs,
        cfg.train.batch_size
    );
    let outcome = run_pretrain(&cfg, &data, args.seed)?;
    let ckpt = persist_pretrain(&outcome, args.seed, &args.out)?;
    let last = outcome.epochs.last().expect("at least one epoch");
    eprintln!(
        "done: total {:.4}, contrastive {:.4}, reconstruction {:.4}; checkpoint at {}",
        last.mean_total,
        last.mean_contrastive,
        last.mean_recon,
        ckpt.display()
    );
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let (state, _) = load_checkpoint(&args.checkpoint)?;
    let data = eval_dataset(&cfg, &args.data)?;
    let metrics = run_eval(&cfg, &state, EvalTask::Retrieve, &data, None, 0, None)?;
    write_json(&args.out, &metrics)?;
    eprintln!("retrieval over {} videos written to {}", data.len(), args.out.display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    if let Some(s) = args.probe_source {
        cfg.eval.probe.source = s.into();
    }
    if let Some(m) = args.probe_modality {
        cfg.eval.probe.modality = m.into();
    }
    if let Some(e) = args.probe_epochs {
        cfg.eval.probe.epochs = e;
    }
    if let Some(lr) = args.probe_learning_rate {
        cfg.eval.probe.learning_rate = lr;
    }
    cfg.validate()?;
    let (state, _) = load_checkpoint(&args.checkpoint)?;
    let train = train_dataset(&cfg, &args.data)?;
    let eval = eval_dataset(&cfg, &args.eval_data)?;
    let metrics = run_eval(&cfg, &state, EvalTask::Classify, &eval, Some(&train), args.seed, None)?;
    write_json(&args.out, &metrics)?;
    if let avmae::runner::EvalMetrics::Classify(m) = &metrics {
        eprintln!("probe {} = {:.4} written to {}", m.metric, m.value, args.out.display());
    }
    Ok(())
}

fn cmd_localize(args: LocalizeArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let (state, _) = load_checkpoint(&args.checkpoint)?;
    let data = eval_dataset(&cfg, &args.data)?;
    let metrics = run_eval(&cfg, &state, EvalTask::Localize, &data, None, 0, args.map_dir.as_deref())?;
    write_json(&args.out, &metrics)?;
    if let avmae::runner::EvalMetrics::Localize(m) = &metrics {
        eprintln!("{} localization maps written", m.maps);
    }
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    if let Some(s) = args.segments {
        cfg.eval.segments = Some(s);
    }
    if let Some(t) = args.tolerance {
        cfg.eval.boundary_tolerance = t;
    }
    if let Some(m) = args.modality {
        cfg.eval.segment_modality = m.into();
    }
    cfg.validate()?;
    let (state, _) = load_checkpoint(&args.checkpoint)?;
    let data = eval_dataset(&cfg, &args.data)?;
    let metrics = run_eval(&cfg, &state, EvalTask::Segment, &data, None, args.seed, None)?;
    write_json(&args.out, &metrics)?;
    if let avmae::runner::EvalMetrics::Segment(m) = &metrics {
        eprintln!(
            "boundary recall {:.4} over {} videos written to {}",
            m.mean_boundary_recall,
            m.videos,
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(args.seed, args.tolerance, args.step)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    for group in &report.groups {
        eprintln!(
            "{} {:>9.3e}  {}",
            if group.pass { "ok " } else { "FAIL" },
            group.max_rel_error,
            group.name
        );
    }
    eprintln!(
        "gradcheck over {} parameters: max rel error {:.3e} (tolerance {:.1e})",
        report.parameters, report.max_rel_error, report.tolerance
    );
    if !report.pass {
        return Err(Error::Numeric(format!(
            "gradient check failed: max rel error {:.3e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = args.config.build()?;
    let task = args
        .task
        .map(EvalTask::from)
        .or(base.task)
        .unwrap_or(EvalTask::Retrieve);
    let mut results = Vec::new();
    for raw in args.values.split(',') {
        let raw = raw.trim();
        let mut cfg = base.clone();
        apply_sweep_value(&mut cfg, &args.param, raw)?;
        cfg.validate()?;
        eprintln!("sweep {} = {raw}: pretraining", args.param);
        let data = generate_synthetic(&cfg.data, cfg.arch.patch)?;
        let outcome = run_pretrain(&cfg, &data, args.seed)?;
        let eval = generate_synthetic(&cfg.data.held_out(cfg.eval.eval_videos), cfg.arch.patch)?;
        let metrics = run_eval(&cfg, &outcome.state, task, &eval, Some(&data), args.seed, None)?;
        let metrics = serde_json::to_value(&metrics).map_err(|e| Error::Format(e.to_string()))?;
        let last = outcome.epochs.last().expect("at least one epoch");
        results.push(serde_json::json!({
            "param": args.param,
            "value": raw,
            "final_loss": {
                "total": last.mean_total,
                "contrastive": last.mean_contrastive,
                "reconstruction": last.mean_recon,
            },
            "metrics": metrics,
        }));
    }
    write_json(&args.out, &results)?;
    eprintln!("sweep results written to {}", args.out.display());
    Ok(())
}

fn apply_sweep_value(cfg: &mut RunConfig, param: &str, raw: &str) -> Result<()> {
    let parse_usize = || -> Result<usize> {
        raw.parse().map_err(|_| Error::Config(format!("{param}: expected integer, got '{raw}'")))
    };
    let parse_f64 = || -> Result<f64> {
        raw.parse().map_err(|_| Error::Config(format!("{param}: expected number, got '{raw}'")))
    };
    match param {
        "n_registers" => cfg.arch.n_registers = parse_usize()?,
        "mask_ratio" => {
            let v = parse_f64()?;
            cfg.train.mask_ratio_audio = v;
            cfg.train.mask_ratio_visual = v;
        }
        "frames" => cfg.data.frames = parse_usize()?,
        "s_length" => cfg.data.s_length = parse_usize()?,
        "use_global_token" => {
            cfg.arch.use_global_token = raw
                .parse()
                .map_err(|_| Error::Config(format!("{param}: expected bool, got '{raw}'")))?;
        }
        "correlation" => cfg.data.correlation = parse_f64()?,
        "events_per_video" => cfg.data.events_per_video = parse_usize()?,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter '{other}'; supported: n_registers, mask_ratio, frames, \
                 s_length, use_global_token, correlation, events_per_video"
            )))
        }
    }
    Ok(())
}
