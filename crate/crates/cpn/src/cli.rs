//! Command-line surface: `synth`, `pretrain`, `metatrain`, `eval`,
//! `ablate`, `gradcheck`, `export-viz`, with global `--config`, `--seed`,
//! and `--threads` flags. Flags override file values; every report carries
//! the resolved configuration inline.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O
//! error, 4 data validation failure, 5 missing artifact.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{AttributeNorm, ConfigError, RunConfig};
use crate::dataio::{
    load_attributes, load_embeddings, load_split, write_attributes, write_embeddings,
    write_split, AttributeLevel, DataError, DatasetBundle,
};
use crate::episodes::{eval_stream, sample_episode, EpisodeError, EpisodeSpec, RngStream};
use crate::eval::{evaluate, export_viz, run_ablation, AblationRow, EvalError, EvalReport};
use crate::gradcore::{fd_suite, FD_TOLERANCE};
use crate::model::{
    load_checkpoint, loss::loss_fd_suite, save_checkpoint, CheckpointError, Variant,
};
use crate::synthgen::{generate, save_truth, SynthError};
use crate::training::{meta_train, pretrain, randomize_protos, TrainError, TrainLog};

pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CHECK_FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DATA: i32 = 4;
    pub const MISSING_ARTIFACT: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("missing artifact: {0} (run the producing command first)")]
    Missing(PathBuf),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    CheckFailed(String),
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io(_) => exit_code::IO,
        _ => exit_code::DATA,
    }
}

fn checkpoint_code(e: &CheckpointError) -> i32 {
    match e {
        CheckpointError::Io(_) => exit_code::IO,
        _ => exit_code::DATA,
    }
}

fn episode_code(e: &EpisodeError) -> i32 {
    match e {
        EpisodeError::BadSpec(_) => exit_code::CONFIG,
        _ => exit_code::DATA,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::BadConfig(_) => exit_code::CONFIG,
        TrainError::NonFiniteLoss { .. } | TrainError::ShapeMismatch { .. } => {
            exit_code::CHECK_FAILURE
        }
        TrainError::Episode(ep) => episode_code(ep),
        TrainError::Model(_) => exit_code::DATA,
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit_code::CONFIG,
            CliError::Missing(_) => exit_code::MISSING_ARTIFACT,
            CliError::Io(_) => exit_code::IO,
            CliError::Data(e) => data_code(e),
            CliError::Checkpoint(e) => checkpoint_code(e),
            CliError::Synth(e) => match e {
                SynthError::BadConfig(_) | SynthError::RejectionBudgetExceeded { .. } => {
                    exit_code::CONFIG
                }
                SynthError::Data(d) => data_code(d),
                SynthError::File(c) => checkpoint_code(c),
            },
            CliError::Train(e) => train_code(e),
            CliError::Eval(e) => match e {
                EvalError::Episode(ep) => episode_code(ep),
                EvalError::Model(_) => exit_code::DATA,
                EvalError::Train(t) => train_code(t),
                EvalError::Io(_) | EvalError::Csv(_) => exit_code::IO,
            },
            CliError::CheckFailed(_) => exit_code::CHECK_FAILURE,
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

#[derive(Debug, Parser)]
#[command(
    name = "cpn",
    version,
    about = "Compositional prototype networks for few-shot classification \
             over precomputed embeddings"
)]
pub struct Cli {
    /// Run configuration JSON; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps worker threads (default: machine core count).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates the synthetic dataset files and their ground truth.
    Synth,
    /// Learns component prototypes on the base split (stage one).
    Pretrain,
    /// Learns the fusion machinery episodically from the pre-trained model
    /// (stage two), keeping the best validation epoch.
    Metatrain,
    /// Scores a trained model on the novel split.
    Eval {
        /// Prototype variant (default: the configured variant).
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Support shots per class.
        #[arg(long)]
        shots: Option<usize>,
        /// Number of evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Builds the prototype-variant and generator-input grid at one and
    /// five shots.
    Ablate {
        /// Number of evaluation episodes per cell.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Verifies every analytic gradient against central finite differences.
    Gradcheck {
        /// Random points per check.
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Writes query and prototype vectors to CSV for projection tools.
    ExportViz,
}

/// Parses arguments, runs the selected command, and returns the process
/// exit code. Help and version requests succeed; any other parse problem
/// is a configuration error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit_code::CONFIG
            } else {
                exit_code::SUCCESS
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => exit_code::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = Some(threads);
    }
    match cfg.threads {
        Some(0) => Err(ConfigError::Invalid("threads must be at least 1".into()).into()),
        // A scoped pool rather than the global one, so repeated in-process
        // runs can each honor their own cap.
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| ConfigError::Invalid(format!("threads: {e}")))?;
            pool.install(|| execute(&cfg, &cli.command))
        }
        None => execute(&cfg, &cli.command),
    }
}

fn execute(cfg: &RunConfig, cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth => cmd_synth(cfg),
        Command::Pretrain => cmd_pretrain(cfg),
        Command::Metatrain => cmd_metatrain(cfg),
        Command::Eval {
            variant,
            shots,
            episodes,
        } => cmd_eval(cfg, *variant, *shots, *episodes),
        Command::Ablate { episodes } => cmd_ablate(cfg, *episodes),
        Command::Gradcheck { points } => cmd_gradcheck(cfg, *points),
        Command::ExportViz => cmd_export_viz(cfg),
    }
}

// ------------------------------------------------------------- plumbing

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle, CliError> {
    require(&cfg.paths.embeddings)?;
    require(&cfg.paths.attributes)?;
    require(&cfg.paths.split)?;
    let embeddings = load_embeddings(&cfg.paths.embeddings)?;
    let labels = embeddings.labels().to_vec();
    let attributes = load_attributes(
        &cfg.paths.attributes,
        cfg.attribute_level,
        match cfg.attribute_level {
            AttributeLevel::Category => None,
            AttributeLevel::Image => Some(&labels),
        },
    )?;
    let attributes = match cfg.normalize_attributes {
        AttributeNorm::Max => attributes.normalized_by_max(),
        AttributeNorm::None => attributes,
    };
    let split = load_split(&cfg.paths.split)?;
    Ok(DatasetBundle::validate(embeddings, attributes, split)?)
}

fn emit<R: Serialize>(report: &R) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    println!("{text}");
    Ok(())
}

fn write_json_file<R: Serialize>(path: &Path, value: &R) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Non-fused variants read the stage-one checkpoint; everything else needs
/// the meta-trained one.
fn checkpoint_for(cfg: &RunConfig, variant: Variant) -> &PathBuf {
    match variant {
        Variant::Ricp | Variant::Vp | Variant::Lcp => &cfg.paths.pretrain_checkpoint,
        _ => &cfg.paths.meta_checkpoint,
    }
}

// ------------------------------------------------------------- commands

#[derive(Serialize)]
struct SynthReport<'a> {
    command: &'static str,
    records: usize,
    classes: usize,
    dim: usize,
    outputs: [&'a Path; 4],
    config: &'a RunConfig,
}

fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let synth = cfg.synth.to_synth(cfg.seed);
    let (bundle, truth) = generate(&synth)?;
    write_embeddings(&cfg.paths.embeddings, bundle.embeddings())?;
    write_attributes(&cfg.paths.attributes, bundle.attributes())?;
    write_split(&cfg.paths.split, bundle.split())?;
    save_truth(&cfg.paths.truth, &truth)?;
    emit(&SynthReport {
        command: "synth",
        records: bundle.embeddings().len(),
        classes: synth.total_classes(),
        dim: bundle.embeddings().dim(),
        outputs: [
            &cfg.paths.embeddings,
            &cfg.paths.attributes,
            &cfg.paths.split,
            &cfg.paths.truth,
        ],
        config: cfg,
    })
}

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'static str,
    selected_epoch: usize,
    final_train_loss: Option<f64>,
    best_val_acc: Option<f64>,
    checkpoint: &'a Path,
    log: &'a Path,
    config: &'a RunConfig,
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let bundle = load_bundle(cfg)?;
    let (params, log) = pretrain(&bundle, &cfg.pretrain, cfg.gen_input_mode, cfg.seed)?;
    save_checkpoint(&cfg.paths.pretrain_checkpoint, &params)?;
    log.write_jsonl(&cfg.paths.pretrain_log)?;
    emit(&TrainReport {
        command: "pretrain",
        selected_epoch: log.selected_epoch,
        final_train_loss: log.entries.last().and_then(|e| e.train_loss),
        best_val_acc: None,
        checkpoint: &cfg.paths.pretrain_checkpoint,
        log: &cfg.paths.pretrain_log,
        config: cfg,
    })
}

fn selected_val_acc(log: &TrainLog) -> Option<f64> {
    log.entries
        .iter()
        .find(|e| e.epoch == log.selected_epoch)
        .and_then(|e| e.val_acc)
}

fn cmd_metatrain(cfg: &RunConfig) -> Result<(), CliError> {
    let bundle = load_bundle(cfg)?;
    require(&cfg.paths.pretrain_checkpoint)?;
    let mut pretrained = load_checkpoint(&cfg.paths.pretrain_checkpoint)?;
    if pretrained.gen_input_mode() != cfg.gen_input_mode {
        // The stage-one generator is untrained, so switching modes here
        // loses nothing.
        pretrained = pretrained.with_gen_input_mode(cfg.gen_input_mode);
    }
    let (best, log) = meta_train(
        &bundle,
        &pretrained,
        &cfg.meta,
        cfg.variant,
        &cfg.train_episode,
        cfg.seed,
    )?;
    save_checkpoint(&cfg.paths.meta_checkpoint, &best)?;
    log.write_jsonl(&cfg.paths.meta_log)?;
    emit(&TrainReport {
        command: "metatrain",
        selected_epoch: log.selected_epoch,
        final_train_loss: log.entries.last().and_then(|e| e.train_loss),
        best_val_acc: selected_val_acc(&log),
        checkpoint: &cfg.paths.meta_checkpoint,
        log: &cfg.paths.meta_log,
        config: cfg,
    })
}

#[derive(Serialize)]
struct EvalCommandReport<'a> {
    command: &'static str,
    checkpoint: &'a Path,
    report: &'a EvalReport,
    config: &'a RunConfig,
}

fn cmd_eval(
    cfg: &RunConfig,
    variant: Option<Variant>,
    shots: Option<usize>,
    episodes: Option<usize>,
) -> Result<(), CliError> {
    let variant = variant.unwrap_or(cfg.variant);
    let mut spec = cfg.eval_episode;
    if let Some(k) = shots {
        spec.k_shot = k;
    }
    let spec = EpisodeSpec::new(spec.n_way, spec.k_shot, spec.n_query)
        .map_err(|e| ConfigError::Invalid(format!("eval episode: {e}")))?;
    let n_episodes = episodes.unwrap_or(cfg.eval_episodes);
    if n_episodes < 1 {
        return Err(ConfigError::Invalid("episodes must be at least 1".into()).into());
    }
    let bundle = load_bundle(cfg)?;
    let path = checkpoint_for(cfg, variant);
    require(path)?;
    let mut params = load_checkpoint(path)?;
    if variant == Variant::Ricp {
        params = randomize_protos(&params, cfg.seed);
    }
    let report = evaluate(
        &bundle,
        &params,
        variant,
        bundle.split().novel(),
        &spec,
        n_episodes,
        cfg.seed,
    )?;
    let wrapper = EvalCommandReport {
        command: "eval",
        checkpoint: path,
        report: &report,
        config: cfg,
    };
    write_json_file(&cfg.paths.eval_report, &wrapper)?;
    emit(&wrapper)
}

#[derive(Serialize)]
struct AblationReport<'a> {
    command: &'static str,
    rows: &'a [AblationRow],
    config: &'a RunConfig,
}

fn cmd_ablate(cfg: &RunConfig, episodes: Option<usize>) -> Result<(), CliError> {
    let n_episodes = episodes.unwrap_or(cfg.eval_episodes);
    if n_episodes < 1 {
        return Err(ConfigError::Invalid("episodes must be at least 1".into()).into());
    }
    let bundle = load_bundle(cfg)?;
    require(&cfg.paths.pretrain_checkpoint)?;
    require(&cfg.paths.meta_checkpoint)?;
    let pretrained = load_checkpoint(&cfg.paths.pretrain_checkpoint)?;
    let adaptive = load_checkpoint(&cfg.paths.meta_checkpoint)?;
    let spec1 = EpisodeSpec {
        k_shot: 1,
        ..cfg.eval_episode
    };
    let spec5 = EpisodeSpec {
        k_shot: 5,
        ..cfg.eval_episode
    };
    let table = run_ablation(
        &bundle,
        &pretrained,
        &adaptive,
        &cfg.meta,
        &cfg.train_episode,
        &spec1,
        &spec5,
        n_episodes,
        cfg.seed,
    )?;
    write_json_file(
        &cfg.paths.ablation_report,
        &AblationReport {
            command: "ablate",
            rows: &table.rows,
            config: cfg,
        },
    )?;
    print!("{}", table.render_text());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, points: usize) -> Result<(), CliError> {
    if points < 1 {
        return Err(ConfigError::Invalid("points must be at least 1".into()).into());
    }
    let mut checks = fd_suite(points, cfg.seed);
    checks.extend(loss_fd_suite(points, cfg.seed));
    let mut failed = 0usize;
    for c in &checks {
        let status = if c.passed() {
            "ok"
        } else {
            failed += 1;
            "FAIL"
        };
        println!(
            "{:<34} max rel err {:>10.3e} over {:>4} points  {status}",
            c.name, c.max_rel_err, c.points
        );
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failed} of {} gradient checks exceeded {FD_TOLERANCE:e}",
            checks.len()
        )));
    }
    println!(
        "all {} gradient checks within {FD_TOLERANCE:e}",
        checks.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct VizReport<'a> {
    command: &'static str,
    rows: usize,
    path: &'a Path,
    config: &'a RunConfig,
}

fn cmd_export_viz(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.viz.episode_spec()?;
    let bundle = load_bundle(cfg)?;
    let needs_meta = cfg
        .viz
        .variants
        .iter()
        .any(|v| !matches!(v, Variant::Ricp | Variant::Vp | Variant::Lcp));
    let path = if needs_meta {
        &cfg.paths.meta_checkpoint
    } else {
        &cfg.paths.pretrain_checkpoint
    };
    require(path)?;
    let params = load_checkpoint(path)?;
    let mut rng = RngStream::new(cfg.seed, eval_stream(cfg.viz.episode_index));
    let episode = sample_episode(&bundle, bundle.split().novel(), &spec, &mut rng)
        .map_err(EvalError::from)?;
    export_viz(&bundle, &params, &episode, &cfg.viz.variants, &cfg.paths.viz)?;
    emit(&VizReport {
        command: "export-viz",
        rows: episode.query.len() + cfg.viz.variants.len() * spec.n_way,
        path: &cfg.paths.viz,
        config: cfg,
    })
}
