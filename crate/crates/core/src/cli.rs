//! Command-line entry point.
//!
//! Machine-readable JSON goes to stdout, human-readable tables to stderr.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bt::{BtConfig, REFERENCE_CAP};
use crate::error::{Result, UolError};
use crate::losses::{KlMode, LossWeights};
use crate::metrics::MetricsReport;
use crate::ordering::{select_balanced_pairs, OrderRelation, DEFAULT_THETA};
use crate::persist::{read_dataset, write_dataset, write_trace_csv, ModelCheckpoint};
use crate::synth::{apply_label_shift, generate_dataset, LabelShift, ScoreDistribution, SyntheticConfig, BIN_WIDTH};
use crate::trainer::{self, EvalConfig, ScoreTarget, TrainConfig, TrainMode};
use crate::seeded_rng;

#[derive(Debug, Parser)]
#[command(name = "uol", version, about = "Uncertainty-aware order learning on rated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Seed for every random draw of the command.
    #[arg(long, env = "UOL_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic rated dataset.
    Gen(GenArgs),
    /// Apply a monotone label shift to a dataset.
    Shift(ShiftArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Estimate the score of a single instance.
    Estimate(EstimateArgs),
    /// Report balance statistics of pair selection on a dataset.
    PairAudit(PairAuditArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScoreDist {
    Uniform,
    Beta,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 20)]
    raters: usize,
    #[arg(long, default_value_t = 0.2)]
    dispersion_min: f64,
    #[arg(long, default_value_t = 1.0)]
    dispersion_max: f64,
    #[arg(long, value_enum, default_value_t = ScoreDist::Uniform)]
    score_dist: ScoreDist,
    #[arg(long, default_value_t = 2.0)]
    beta_a: f64,
    #[arg(long, default_value_t = 2.0)]
    beta_b: f64,
    #[arg(long, default_value_t = 0.05)]
    feature_noise: f64,
    /// Seed of the latent-to-feature map, shared by datasets that should live
    /// in the same feature space.
    #[arg(long)]
    feature_map_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct ShiftArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gamma: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Regression,
    OrderPoint,
    Uol,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Regression => TrainMode::Regression,
            ModeArg::OrderPoint => TrainMode::OrderPoint,
            ModeArg::Uol => TrainMode::Uol,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KlArg {
    Verbatim,
    Normalized,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Uol)]
    mode: ModeArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_min: f64,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1e-4)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = KlArg::Verbatim)]
    kl_mode: KlArg,
    #[arg(long, default_value_t = crate::distribution::TRAIN_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    pair_cap: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    comparator_hidden: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace path (default: the checkpoint path with extension `loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Mean,
    True,
}

#[derive(Debug, Args)]
struct EstimationArgs {
    /// Training-style dataset the reference set is drawn from (not needed for
    /// regression checkpoints).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = crate::distribution::ESTIMATION_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = REFERENCE_CAP)]
    reference_cap: usize,
    #[arg(long, default_value_t = 0.8)]
    bt_delta: f64,
    #[arg(long, default_value_t = 4.0)]
    bt_k: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetArg::Mean)]
    target: TargetArg,
    #[command(flatten)]
    est: EstimationArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset holding the instance.
    #[arg(long)]
    data: PathBuf,
    /// Zero-based position of the instance in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    est: EstimationArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Args)]
struct PairAuditArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pair_cap: usize,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    #[command(flatten)]
    seed: SeedArg,
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Shift(a) => shift(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Estimate(a) => estimate(a),
        Command::PairAudit(a) => pair_audit(a),
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let defaults = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        n: a.n,
        feature_dim: a.feature_dim,
        rater_count: a.raters,
        dispersion_range: (a.dispersion_min, a.dispersion_max),
        score_distribution: match a.score_dist {
            ScoreDist::Uniform => ScoreDistribution::Uniform,
            ScoreDist::Beta => ScoreDistribution::Beta { a: a.beta_a, b: a.beta_b },
        },
        feature_noise: a.feature_noise,
        seed: a.seed.seed,
        feature_map_seed: a.feature_map_seed.unwrap_or(defaults.feature_map_seed),
    };
    let data = generate_dataset(&cfg)?;
    write_dataset(&a.out, &data)?;
    eprintln!("wrote {} instances to {}", data.len(), a.out.display());
    Ok(())
}

fn shift(a: ShiftArgs) -> Result<()> {
    let data = read_dataset(&a.input)?;
    let shifted = apply_label_shift(&data, LabelShift::new(a.gamma)?);
    write_dataset(&a.out, &shifted)?;
    eprintln!("wrote {} shifted instances to {}", shifted.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let cfg = TrainConfig {
        mode: a.mode.into(),
        theta: a.theta,
        weights: LossWeights { alpha: a.alpha, beta: a.beta, tau: a.tau },
        kl_mode: match a.kl_mode {
            KlArg::Verbatim => KlMode::Verbatim,
            KlArg::Normalized => KlMode::Normalized,
        },
        samples: a.samples,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr_max: a.lr_max,
        lr_min: a.lr_min,
        pair_cap: a.pair_cap,
        hidden: a.hidden,
        embed_dim: a.embed_dim,
        comparator_hidden: a.comparator_hidden,
        seed: a.seed.seed,
    };
    let outcome = trainer::train(&data, &cfg)?;
    outcome.checkpoint.save(&a.out)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_trace_csv(&csv, &outcome.trace)?;
    eprintln!("{:>6} {:>12} {:>12} {:>12} {:>12}", "epoch", "ce", "hinge", "kl", "total");
    for t in &outcome.trace {
        eprintln!("{:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}", t.epoch, t.ce, t.hinge, t.kl, t.total);
    }
    Ok(())
}

struct Estimator {
    checkpoint: ModelCheckpoint,
    refset: Option<crate::bt::ReferenceSet>,
    cfg: EvalConfig,
}

fn estimator(model: &Path, est: &EstimationArgs, seed: u64, target: ScoreTarget) -> Result<Estimator> {
    let checkpoint = ModelCheckpoint::load(model)?;
    let refset = match (&est.reference, checkpoint.config.mode) {
        (_, TrainMode::Regression) => None,
        (Some(path), _) => {
            let refs = read_dataset(path)?;
            Some(trainer::model_reference_set(&checkpoint.model, &refs, est.reference_cap, BIN_WIDTH, seed)?)
        }
        (None, mode) => {
            return Err(UolError::InvalidArgument(format!("--reference is required for {mode:?} checkpoints")))
        }
    };
    let bt = BtConfig { delta: est.bt_delta, k: est.bt_k, ..BtConfig::default() };
    bt.validate()?;
    Ok(Estimator { checkpoint, refset, cfg: EvalConfig { bt, samples: est.samples, seed, target } })
}

fn eval(a: EvalArgs) -> Result<()> {
    let target = match a.target {
        TargetArg::Mean => ScoreTarget::MeanScore,
        TargetArg::True => ScoreTarget::TrueScore,
    };
    let e = estimator(&a.model, &a.est, a.seed.seed, target)?;
    let data = read_dataset(&a.data)?;
    let report: MetricsReport = trainer::evaluate(&e.checkpoint, &data, e.refset.as_ref(), &e.cfg)?;
    print_json(&serde_json::to_value(report).map_err(|e| UolError::InvalidArgument(e.to_string()))?)?;
    eprintln!("{:>8} {:>8} {:>8} {:>12}", "MAE", "RMSE", "PC", "pairwise");
    eprintln!("{:>8.4} {:>8.4} {:>8.4} {:>12.4}", report.mae, report.rmse, report.pc, report.pairwise_acc);
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let e = estimator(&a.model, &a.est, a.seed.seed, ScoreTarget::MeanScore)?;
    let data = read_dataset(&a.data)?;
    let inst = data.get(a.index).ok_or_else(|| {
        UolError::Range(format!("index {} outside a dataset of {} instances", a.index, data.len()))
    })?;
    let score = trainer::predict_scores(&e.checkpoint, std::slice::from_ref(inst), e.refset.as_ref(), &e.cfg)?[0];
    print_json(&json!({ "id": inst.id, "score": score }))
}

fn pair_audit(a: PairAuditArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    if a.batch_size < 2 || data.len() < a.batch_size {
        return Err(UolError::InvalidArgument(format!(
            "need a batch size >= 2 and at least one full batch, got {} instances and batch size {}",
            data.len(),
            a.batch_size
        )));
    }
    let mut rng = seeded_rng(a.seed.seed, 40);
    let (mut less, mut approx, mut greater, mut max_partners) = (0usize, 0usize, 0usize, 0usize);
    let mut batches = 0usize;
    for chunk in data.chunks_exact(a.batch_size) {
        let scores: Vec<f64> = chunk.iter().map(|d| d.mean_score).collect();
        let sel = select_balanced_pairs(&scores, a.pair_cap, a.theta, &mut rng)?;
        for p in &sel.pairs {
            match p.relation {
                OrderRelation::Less => less += 1,
                OrderRelation::Approx => approx += 1,
                OrderRelation::Greater => greater += 1,
            }
        }
        max_partners = max_partners.max(sel.partners.iter().map(Vec::len).max().unwrap_or(0));
        batches += 1;
    }
    let total = less + approx + greater;
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    print_json(&json!({
        "batches": batches,
        "pairs": total,
        "less": less,
        "approx": approx,
        "greater": greater,
        "approx_fraction": frac(approx),
        "max_partners": max_partners,
    }))?;
    eprintln!("{:>8} {:>8} {:>8} {:>8} {:>8}", "pairs", "less", "approx", "greater", "approx%");
    eprintln!("{:>8} {:>8} {:>8} {:>8} {:>8.3}", total, less, approx, greater, 100.0 * frac(approx));
    Ok(())
}
