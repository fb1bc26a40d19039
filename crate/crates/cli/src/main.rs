use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gotcha_core::dialog_model::ModelDims;
use gotcha_core::evaluator::{baseline_report, compare_modes, eval_rounds};
use gotcha_core::feedback_sim::{DisclosureMode, DisclosureSchedule, MaskStrategy};
use gotcha_core::gallery::{
    gen_synthetic, ingest_jsonl_with, load_any, save_packed, split, write_jsonl, Gallery, IngestOptions,
    SyntheticSpec, DEFAULT_FEATURE_DIM,
};
use gotcha_core::service::{AppState, ServiceConfig, DEFAULT_TTL};
use gotcha_core::trainer::{
    load_checkpoint, run_dialog, save_checkpoint, Checkpoint, EpisodeSeeds, Policy, TrainConfig, TrainError,
    Trainer,
};
use gotcha_core::{Error, SeedStream};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "gotcha", version, about = "Interactive face retrieval from attribute feedback")]
#[command(arg_required_else_help = true, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic gallery with attribute-correlated features.
    GenSynthetic(GenArgs),
    /// Convert a JSONL gallery into the packed binary format.
    Ingest(IngestArgs),
    /// Train the dialog model against the simulated witness.
    Train(TrainCmd),
    /// Evaluate a checkpoint (or an untrained model) on held-out dialogs.
    Eval(EvalArgs),
    /// Score the attribute-matching baseline.
    Baseline(BaselineArgs),
    /// Train and evaluate every disclosure mode across several seeds.
    Compare(CompareArgs),
    /// Print one dialog round by round.
    Simulate(SimulateArgs),
    /// Serve live retrieval sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Number of records.
    #[arg(long, env = "GOTCHA_N", default_value_t = 10_000)]
    n: usize,
    /// Attributes per record.
    #[arg(long, env = "GOTCHA_ATTRS", default_value_t = 40)]
    attrs: usize,
    /// Feature width.
    #[arg(long, env = "GOTCHA_FEAT_DIM", default_value_t = DEFAULT_FEATURE_DIM)]
    feat_dim: usize,
    /// Standard deviation of the feature noise.
    #[arg(long, env = "GOTCHA_NOISE", default_value_t = 0.1)]
    noise: f64,
    #[arg(long, env = "GOTCHA_SEED", default_value_t = 0)]
    seed: u64,
    /// Output path; `.jsonl` writes JSON lines, anything else the packed format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// JSONL gallery.
    #[arg(long = "in")]
    input: PathBuf,
    /// Packed output path.
    #[arg(long)]
    out: PathBuf,
    /// Scale every feature vector to unit length.
    #[arg(long)]
    l2_normalize: bool,
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    /// Gallery file (packed or `.jsonl`).
    #[arg(long, env = "GOTCHA_GALLERY")]
    gallery: PathBuf,
    #[arg(long, env = "GOTCHA_EPOCHS", default_value_t = 20)]
    epochs: usize,
    /// Feedback rounds per dialog.
    #[arg(long, env = "GOTCHA_ROUNDS", default_value_t = 5)]
    rounds: usize,
    /// Triplet margin.
    #[arg(long, env = "GOTCHA_MARGIN", default_value = "2.0", allow_negative_numbers = true)]
    margin: f64,
    /// Adam learning rate.
    #[arg(long, env = "GOTCHA_LR", default_value_t = 0.001, allow_negative_numbers = true)]
    lr: f64,
    /// Candidates considered per retrieval.
    #[arg(long, env = "GOTCHA_K", default_value_t = 10)]
    k: usize,
    /// Dialogs per optimizer step.
    #[arg(long, env = "GOTCHA_BATCH", default_value_t = 32)]
    batch: usize,
    /// Dialogs per epoch [default: one per training record].
    #[arg(long, env = "GOTCHA_EPISODES_PER_EPOCH")]
    episodes_per_epoch: Option<usize>,
    /// progressive, full or full-no-attr.
    #[arg(long, env = "GOTCHA_MODE", default_value = "progressive")]
    mode: DisclosureMode,
    /// Fraction of relevance entries hidden in each round.
    #[arg(long, env = "GOTCHA_SCHEDULE", default_value = "0.5,0.3,0.2,0.1,0.0")]
    schedule: DisclosureSchedule,
    /// nested (one permutation per dialog) or resampled (fresh each round).
    #[arg(long, env = "GOTCHA_MASK_STRATEGY", default_value = "nested")]
    mask_strategy: MaskStrategy,
    /// Hidden state width [default: the gallery's feature width].
    #[arg(long, env = "GOTCHA_HIDDEN")]
    hidden: Option<usize>,
    /// Leading share of the gallery used for training.
    #[arg(long, env = "GOTCHA_TRAIN_FRACTION", default_value_t = 0.9)]
    train_fraction: f64,
    /// Held-out dialogs evaluated after each epoch.
    #[arg(long, env = "GOTCHA_EVAL_EPISODES", default_value_t = 500)]
    eval_episodes: usize,
    /// Let greedy retrieval show a candidate more than once.
    #[arg(long, env = "GOTCHA_ALLOW_REPEATS")]
    allow_repeats: bool,
    #[arg(long, env = "GOTCHA_SEED", default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.rounds,
            margin: self.margin,
            lr: self.lr,
            k: self.k,
            batch_size: self.batch,
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            seed: self.seed,
            mode: self.mode,
            schedule: self.schedule.clone(),
            mask_strategy: self.mask_strategy,
            train_fraction: self.train_fraction,
            eval_episodes: self.eval_episodes,
            allow_repeats: self.allow_repeats,
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its configuration is kept and
    /// `--epochs` more epochs are run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum View {
    /// Records after the training split.
    Test,
    /// The whole gallery.
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, env = "GOTCHA_GALLERY")]
    gallery: PathBuf,
    /// Checkpoint to evaluate; without it a freshly initialised model is used.
    #[arg(long, env = "GOTCHA_CKPT")]
    ckpt: Option<PathBuf>,
    #[arg(long, env = "GOTCHA_EPISODES", default_value_t = 1000)]
    episodes: usize,
    /// Override the checkpoint's disclosure mode.
    #[arg(long, env = "GOTCHA_MODE")]
    mode: Option<DisclosureMode>,
    #[arg(long, env = "GOTCHA_SEED", default_value_t = 0)]
    seed: u64,
    /// Part of the gallery to search.
    #[arg(long, value_enum, default_value_t = View::Test)]
    split: View,
    /// Hidden width of the untrained model [default: feature width].
    #[arg(long)]
    hidden: Option<usize>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, env = "GOTCHA_GALLERY")]
    gallery: PathBuf,
    /// Per-attribute probability that the classifier gets an attribute wrong.
    #[arg(long, env = "GOTCHA_FLIP_PROB", default_value_t = 0.0)]
    flip_prob: f64,
    #[arg(long, env = "GOTCHA_SEED", default_value_t = 0)]
    seed: u64,
    /// Only score the first N records as targets.
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated seeds, at least two.
    #[arg(long, env = "GOTCHA_SEEDS", value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, env = "GOTCHA_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "GOTCHA_GALLERY")]
    gallery: PathBuf,
    /// Face the simulated witness remembers [default: drawn from the seed].
    #[arg(long)]
    target_id: Option<String>,
    #[arg(long, env = "GOTCHA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "GOTCHA_MODE")]
    mode: Option<DisclosureMode>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "GOTCHA_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "GOTCHA_GALLERY")]
    gallery: PathBuf,
    #[arg(long, env = "GOTCHA_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory with `<id>.jpg` or `<id>.png` face images.
    #[arg(long, env = "GOTCHA_ASSET_DIR")]
    asset_dir: Option<PathBuf>,
    /// Idle session lifetime in seconds.
    #[arg(long, env = "GOTCHA_TTL_SECS", default_value_t = DEFAULT_TTL.as_secs())]
    ttl_secs: u64,
    #[arg(long, env = "GOTCHA_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn emit(value: &serde_json::Value) -> Outcome {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_report(path: Option<&Path>, value: &serde_json::Value) -> Outcome {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_vec_pretty(value)?)?;
        log::info!("report written to {}", p.display());
    }
    Ok(())
}

fn load_gallery(path: &Path) -> Result<Gallery, Failure> {
    let g = load_any(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    log::info!("loaded {} records ({} attributes, {} features) from {}", g.len(), g.attrs(), g.feat_dim(), path.display());
    Ok(g)
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"))
}

fn gen_cmd(a: GenArgs) -> Outcome {
    let g = gen_synthetic(SyntheticSpec {
        n: a.n,
        attrs: a.attrs,
        feat_dim: a.feat_dim,
        noise: a.noise,
        seed: a.seed,
    })?;
    if is_jsonl(&a.out) {
        write_jsonl(&g, &a.out)?;
    } else {
        save_packed(&g, &a.out)?;
    }
    emit(&json!({ "out": a.out, "records": g.len(), "attrs": g.attrs(), "feat_dim": g.feat_dim(), "seed": a.seed }))
}

fn ingest_cmd(a: IngestArgs) -> Outcome {
    let g = ingest_jsonl_with(
        &a.input,
        IngestOptions {
            l2_normalize: a.l2_normalize,
        },
    )
    .map_err(|e| Failure::Data(format!("{}: {e}", a.input.display())))?;
    save_packed(&g, &a.out)?;
    emit(&json!({ "out": a.out, "records": g.len(), "attrs": g.attrs(), "feat_dim": g.feat_dim() }))
}

/// On divergence the last good state is written to `out` before failing.
fn train_failure(e: TrainError, out: &Path) -> Failure {
    match e {
        TrainError::Diverged { last_good, reason, .. } => match save_checkpoint(&last_good, out) {
            Ok(()) => Failure::Data(format!(
                "training diverged ({reason}); last good checkpoint after {} steps saved to {}",
                last_good.step,
                out.display()
            )),
            Err(e) => Failure::Data(format!("training diverged ({reason}); saving the last good checkpoint failed: {e}")),
        },
        TrainError::Other(e) => e.into(),
    }
}

fn train_cmd(a: TrainCmd) -> Outcome {
    let cfg = a.train.config();
    cfg.validate()?;
    let g = load_gallery(&a.train.gallery)?;
    let state = match &a.resume {
        Some(path) => {
            let c = load_checkpoint(path)?;
            log::info!("resuming from {} at epoch {}", path.display(), c.epoch);
            c
        }
        None => {
            let dims = ModelDims::new(g.attrs(), g.feat_dim(), a.train.hidden.unwrap_or(g.feat_dim()))?;
            Checkpoint::fresh(cfg.clone(), dims)?
        }
    };
    let (train_g, test_g) = split(&g, state.config.train_fraction)?;
    let mut trainer = Trainer::new(state, &train_g, &test_g)?;
    let mut emit_err = None;
    let result = trainer.run(a.train.epochs, |m| {
        log::info!("epoch {} loss {:.5}", m.epoch, m.loss);
        if let Err(e) = emit(&json!({
            "epoch": m.epoch,
            "loss": m.loss,
            "percentile_by_round": m.percentile_by_round,
            "loss_by_round": m.loss_by_round,
        })) {
            emit_err.get_or_insert(e);
        }
    });
    if let Err(e) = result {
        return Err(train_failure(e, &a.out));
    }
    if let Some(e) = emit_err {
        return Err(e);
    }
    save_checkpoint(trainer.checkpoint(), &a.out)?;
    log::info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn view(g: &Gallery, which: View, train_fraction: f64) -> Result<Gallery, Failure> {
    Ok(match which {
        View::All => g.clone(),
        View::Test => split(g, train_fraction)?.1,
    })
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let g = load_gallery(&a.gallery)?;
    let ckpt = match &a.ckpt {
        Some(p) => load_checkpoint(p)?,
        None => {
            let dims = ModelDims::new(g.attrs(), g.feat_dim(), a.hidden.unwrap_or(g.feat_dim()))?;
            let cfg = TrainConfig {
                seed: a.seed,
                ..TrainConfig::default()
            };
            log::info!("no checkpoint given; evaluating an untrained model");
            Checkpoint::fresh(cfg, dims)?
        }
    };
    let test = view(&g, a.split, ckpt.config.train_fraction)?;
    let report = eval_rounds(&ckpt, &test, a.episodes, a.mode, a.seed)?;
    let value = serde_json::to_value(&report)?;
    write_report(a.report.as_deref(), &value)?;
    emit(&value)
}

fn baseline_cmd(a: BaselineArgs) -> Outcome {
    let g = load_gallery(&a.gallery)?;
    let report = baseline_report(&g, a.flip_prob, a.seed, a.targets)?;
    let value = serde_json::to_value(&report)?;
    write_report(a.report.as_deref(), &value)?;
    emit(&value)
}

fn compare_cmd(a: CompareArgs) -> Outcome {
    let cfg = a.train.config();
    cfg.validate()?;
    let g = load_gallery(&a.train.gallery)?;
    let hidden = a.train.hidden.unwrap_or(g.feat_dim());
    let table = compare_modes(&g, &cfg, hidden, &a.seeds, |mode, seed, r| {
        log::info!("{mode} seed {seed}: percentile by round {:?}", r.percentile_by_round);
    })
    .map_err(|e| match e {
        TrainError::Other(e) => Failure::from(e),
        other => Failure::Data(other.to_string()),
    })?;
    eprintln!("mode          round  percentile (mean ± std)  loss (mean ± std)");
    for m in &table.modes {
        for t in 0..m.percentile_mean.len() {
            eprintln!(
                "{:<13} {:>5}  {:>7.2} ± {:<6.2}         {:.4} ± {:.4}",
                m.mode.as_str(),
                t + 1,
                m.percentile_mean[t],
                m.percentile_std[t],
                m.loss_mean[t],
                m.loss_std[t]
            );
        }
    }
    let value = serde_json::to_value(&table)?;
    write_report(a.report.as_deref(), &value)?;
    emit(&value)
}

fn simulate_cmd(a: SimulateArgs) -> Outcome {
    let g = load_gallery(&a.gallery)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut cfg = ckpt.config.clone();
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let target = match &a.target_id {
        Some(id) => Some(
            g.index_of(id)
                .ok_or_else(|| Failure::from(Error::UnknownId(id.clone())))?,
        ),
        None => None,
    };
    let policy = Policy::Greedy {
        exclude_shown: !cfg.allow_repeats,
    };
    let seeds = EpisodeSeeds::new(SeedStream::new(a.seed));
    let rollout = run_dialog(&ckpt.params, &g, &cfg.dialog(policy), seeds, target, g.len() >= 2)?;
    let t = &rollout.transcript;
    eprintln!("target {}  ({} attributes, {} mode)", t.target_id, g.attrs(), cfg.mode);
    eprintln!("round  candidate             matched attrs  percentile");
    for r in &t.rounds {
        let pct = match (r.matched, r.percentile) {
            (true, _) => "matched".to_owned(),
            (false, Some(p)) => format!("{p:.2}"),
            (false, None) => "-".to_owned(),
        };
        eprintln!("{:>5}  {:<20}  {:>13}  {}", r.round, r.candidate_id, r.matched_attributes, pct);
        emit(&json!({
            "round": r.round,
            "candidate_id": r.candidate_id,
            "matched_attributes": r.matched_attributes,
            "percentile": r.percentile,
            "matched": r.matched,
        }))?;
    }
    if let Some(c) = t.final_candidate {
        eprintln!("final  {}", g.ids()[c]);
    }
    eprintln!("note: the matched-attribute count can fall between rounds even while the target's percentile rises.");
    emit(&json!({
        "target_id": t.target_id,
        "matched": t.matched,
        "rounds": t.rounds.len(),
        "final_candidate": t.final_candidate.map(|c| g.ids()[c].clone()),
    }))
}

fn serve_cmd(a: ServeArgs) -> Outcome {
    let g = load_gallery(&a.gallery)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut config = ServiceConfig::from_checkpoint(&ckpt);
    config.ttl = Duration::from_secs(a.ttl_secs);
    config.asset_dir = a.asset_dir;
    config.seed = a.seed;
    let state = Arc::new(AppState::new(g, Some(ckpt.params), config)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(gotcha_core::service::serve(a.addr, state, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenSynthetic(a) => gen_cmd(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GOTCHA_LOG", "info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            log::error!("{msg}");
            ExitCode::from(2)
        }
    }
}
