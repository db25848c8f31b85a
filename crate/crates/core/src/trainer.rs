//! Training loop and model evaluation.
//!
//! Every `M`-instance batch is embedded once. Balanced pairs drawn from the
//! batch feed the cross-entropy on comparison logits, hard triplets from the
//! same batch feed the ordinal hinge, and the dispersions of all batch members
//! feed the dispersion KL. Parameters are updated with Adam under a cosine
//! learning-rate schedule.
//!
//! Three modes are supported: `uol` (Gaussian embeddings, Monte-Carlo
//! comparison, all three losses), `order_point` (comparison of the means only,
//! cross-entropy only) and `regression` (a scalar head on the encoder trunk
//! trained with squared error).

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bt::{self, BtConfig, ComparisonKind, ReferenceSet};
use crate::distribution::{compare_distributions_cached, frobenius_dispersion, SampleNoise, TRAIN_SAMPLES};
use crate::error::{Result, UolError};
use crate::losses::{ce_loss, ce_loss_grad, hinge_ordinal_backward, KlMode, LossWeights};
use crate::metrics::{self, MetricsReport};
use crate::networks::{EncoderPass, EncoderShape, GaussianEmbedding, ModelGrads, MlpGrads, UolModel};
use crate::optim::{cosine_lr, Adam};
use crate::ordering::{select_balanced_pairs, select_hard_triplets, Pair, Triplet, DEFAULT_THETA};
use crate::persist::ModelCheckpoint;
use crate::synth::RatedInstance;
use crate::{seeded_rng, Rng};

/// Added to the regression head output so that an untrained head predicts
/// the middle of the score scale.
pub const REGRESSION_OFFSET: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Regression,
    OrderPoint,
    Uol,
}

impl std::str::FromStr for TrainMode {
    type Err = UolError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TrainMode::Regression),
            "order_point" | "order-point" => Ok(TrainMode::OrderPoint),
            "uol" => Ok(TrainMode::Uol),
            other => Err(UolError::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub theta: f64,
    pub weights: LossWeights,
    pub kl_mode: KlMode,
    /// Monte-Carlo samples per comparison.
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub pair_cap: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub comparator_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Uol,
            theta: DEFAULT_THETA,
            weights: LossWeights::default(),
            kl_mode: KlMode::Verbatim,
            samples: TRAIN_SAMPLES,
            batch_size: 32,
            epochs: 50,
            lr_max: 1e-4,
            lr_min: 1e-6,
            pair_cap: 4,
            hidden: 64,
            embed_dim: 16,
            comparator_hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(UolError::InvalidArgument(format!("{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        positive("samples", self.samples)?;
        positive("epochs", self.epochs)?;
        positive("pair_cap", self.pair_cap)?;
        positive("hidden", self.hidden)?;
        positive("embed_dim", self.embed_dim)?;
        positive("comparator_hidden", self.comparator_hidden)?;
        let min_batch = match self.mode {
            TrainMode::Uol => 3,
            TrainMode::OrderPoint => 2,
            TrainMode::Regression => 1,
        };
        if self.batch_size < min_batch {
            return Err(UolError::InvalidArgument(format!(
                "batch_size must be >= {min_batch} in {:?} mode",
                self.mode
            )));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(UolError::InvalidArgument(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(UolError::InvalidArgument("need 0 <= lr_min <= lr_max, lr_max > 0".into()));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub hinge: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub hinge: f64,
    pub kl: f64,
    pub total: f64,
}

/// Inputs of one batch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub features: Vec<&'a [f64]>,
    pub scores: Vec<f64>,
    pub eta: Vec<f64>,
}

impl<'a> Batch<'a> {
    pub fn from_instances(instances: impl IntoIterator<Item = &'a RatedInstance>) -> Self {
        let mut batch = Batch { features: Vec::new(), scores: Vec::new(), eta: Vec::new() };
        for inst in instances {
            batch.features.push(&inst.features);
            batch.scores.push(inst.mean_score);
            batch.eta.push(inst.rating_variance);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// All randomness of one batch step, drawn up front. Freezing a plan makes
/// the batch loss a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub pairs: Vec<Pair>,
    /// One noise block per pair (empty in point and regression modes).
    pub noise: Vec<SampleNoise>,
    /// Triplets oriented so that `m` is the closer element.
    pub triplets: Vec<Triplet>,
}

pub fn plan_batch(scores: &[f64], cfg: &TrainConfig, rng: &mut Rng) -> Result<BatchPlan> {
    match cfg.mode {
        TrainMode::Regression => Ok(BatchPlan { pairs: Vec::new(), noise: Vec::new(), triplets: Vec::new() }),
        TrainMode::OrderPoint => {
            let pairs = select_balanced_pairs(scores, cfg.pair_cap, cfg.theta, rng)?.pairs;
            Ok(BatchPlan { pairs, noise: Vec::new(), triplets: Vec::new() })
        }
        TrainMode::Uol => {
            let pairs = select_balanced_pairs(scores, cfg.pair_cap, cfg.theta, rng)?.pairs;
            let noise = pairs
                .iter()
                .map(|_| SampleNoise::draw(cfg.samples, cfg.embed_dim, rng))
                .collect::<Result<Vec<_>>>()?;
            let triplets = select_hard_triplets(scores)?
                .triplets
                .into_iter()
                .map(|t| t.oriented(scores))
                .collect();
            Ok(BatchPlan { pairs, noise, triplets })
        }
    }
}

/// Loss of one batch under a frozen plan, with the gradient w.r.t. every
/// model parameter.
pub fn batch_loss_and_grad(
    model: &UolModel,
    batch: &Batch<'_>,
    plan: &BatchPlan,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let mut grads = ModelGrads::zeros_like(model);
    let loss = match cfg.mode {
        TrainMode::Regression => regression_step(model, batch, &mut grads)?,
        TrainMode::OrderPoint | TrainMode::Uol => order_step(model, batch, plan, cfg, &mut grads)?,
    };
    Ok((loss, grads))
}

fn regression_step(model: &UolModel, batch: &Batch<'_>, grads: &mut ModelGrads) -> Result<LossBreakdown> {
    let head = model
        .regression_head
        .as_ref()
        .ok_or_else(|| UolError::InvalidArgument("regression mode needs a regression head".into()))?;
    let head_grads = grads.regression_head.get_or_insert_with(|| MlpGrads::zeros_like(head));
    let n = batch.len() as f64;
    let mut mse = 0.0;
    for (x, y) in batch.features.iter().zip(&batch.scores) {
        let trunk = model.encoder.trunk.forward_cached(x)?;
        let out = head.forward_cached(trunk.output())?;
        let err = out.output()[0] + REGRESSION_OFFSET - y;
        mse += err * err / n;
        let d_hidden = head.backward(&out, &[2.0 * err / n], head_grads)?;
        model.encoder.trunk.backward(&trunk, &d_hidden, &mut grads.encoder.trunk)?;
    }
    Ok(LossBreakdown { ce: 0.0, hinge: 0.0, kl: 0.0, total: mse })
}

fn order_step(
    model: &UolModel,
    batch: &Batch<'_>,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    grads: &mut ModelGrads,
) -> Result<LossBreakdown> {
    let passes: Vec<EncoderPass> =
        batch.features.iter().map(|x| model.encoder.encode_cached(x)).collect::<Result<_>>()?;
    let embeddings: Vec<GaussianEmbedding> = passes.iter().map(|p| p.embedding.clone()).collect();
    let dim = model.comparator.embed_dim();
    let mut d_mu = vec![vec![0.0; dim]; batch.len()];
    let mut d_var = vec![vec![0.0; dim]; batch.len()];
    let comparator = &model.comparator;
    let mut ce = 0.0;
    let pair_weight = if plan.pairs.is_empty() { 0.0 } else { 1.0 / plan.pairs.len() as f64 };

    for (k, pair) in plan.pairs.iter().enumerate() {
        let (zi, zj) = (&embeddings[pair.i], &embeddings[pair.j]);
        match cfg.mode {
            TrainMode::Uol => {
                let run = compare_distributions_cached(comparator, zi, zj, &plan.noise[k])?;
                ce += pair_weight * ce_loss(&run.logits, pair.relation);
                let d_logits = ce_loss_grad(&run.logits, pair.relation).map(|g| g * pair_weight);
                let g = run.backward(comparator, zi, zj, &d_logits, &mut grads.comparator)?;
                accumulate(&mut d_mu[pair.i], &g.d_mu1);
                accumulate(&mut d_var[pair.i], &g.d_var1);
                accumulate(&mut d_mu[pair.j], &g.d_mu2);
                accumulate(&mut d_var[pair.j], &g.d_var2);
            }
            _ => {
                let (logits, cache) = comparator.compare_points_cached(&zi.mu, &zj.mu)?;
                ce += pair_weight * ce_loss(&logits, pair.relation);
                let d_logits = ce_loss_grad(&logits, pair.relation).map(|g| g * pair_weight);
                let (g1, g2) = comparator.backward(&cache, &d_logits, &mut grads.comparator)?;
                accumulate(&mut d_mu[pair.i], &g1);
                accumulate(&mut d_mu[pair.j], &g2);
            }
        }
    }

    let (mut hinge, mut kl) = (0.0, 0.0);
    if cfg.mode == TrainMode::Uol {
        let w = &cfg.weights;
        hinge = hinge_ordinal_backward(&embeddings, &plan.triplets, w.tau, w.alpha, &mut d_mu, &mut d_var)?.value;
        let dispersions: Vec<f64> =
            embeddings.iter().map(|z| frobenius_dispersion(&z.var_diag)).collect::<Result<_>>()?;
        let (value, d_disp) = cfg.kl_mode.loss_and_grad(&dispersions, &batch.eta)?;
        kl = value;
        for (m, (disp, g)) in dispersions.iter().zip(&d_disp).enumerate() {
            // d(dispersion)/d(var_j) = 1 / (2 * dispersion)
            let coef = w.beta * g * 0.5 / disp;
            d_var[m].iter_mut().for_each(|d| *d += coef);
        }
    }

    for (m, pass) in passes.iter().enumerate() {
        model.encoder.backward(pass, &d_mu[m], &d_var[m], &mut grads.encoder)?;
    }
    let total = crate::losses::total_loss(ce, hinge, kl, &cfg.weights);
    Ok(LossBreakdown { ce, hinge, kl, total })
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Freshly initialized model for `cfg` and the given feature width.
pub fn init_model(feature_dim: usize, cfg: &TrainConfig) -> Result<UolModel> {
    let shape = EncoderShape { feature_dim, hidden: cfg.hidden, embed_dim: cfg.embed_dim };
    UolModel::init(shape, cfg.comparator_hidden, cfg.mode == TrainMode::Regression, cfg.seed)
}

fn feature_dim_of(dataset: &[RatedInstance]) -> Result<usize> {
    let dim = dataset
        .first()
        .ok_or_else(|| UolError::InvalidArgument("dataset is empty".into()))?
        .features
        .len();
    if let Some(bad) = dataset.iter().find(|d| d.features.len() != dim) {
        return Err(UolError::DimensionMismatch { expected: dim, found: bad.features.len() });
    }
    Ok(dim)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub trace: Vec<EpochTrace>,
}

/// Trains from scratch. Each epoch shuffles the dataset and walks it in full
/// batches of `batch_size`; a trailing partial batch is skipped.
pub fn train(dataset: &[RatedInstance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.len() < cfg.batch_size {
        return Err(UolError::InvalidArgument(format!(
            "dataset has {} instances, fewer than one batch of {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let feature_dim = feature_dim_of(dataset)?;
    let mut model = init_model(feature_dim, cfg)?;
    let mut adam = Adam::new(model.param_count());
    let mut shuffle_rng = seeded_rng(cfg.seed, 20);
    let mut batch_rng = seeded_rng(cfg.seed, 21);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = Batch::from_instances(chunk.iter().map(|&i| &dataset[i]));
            let plan = plan_batch(&batch.scores, cfg, &mut batch_rng)?;
            let (loss, grads) = batch_loss_and_grad(&model, &batch, &plan, cfg)?;
            if !loss.total.is_finite() {
                return Err(UolError::InvalidArgument(format!(
                    "training diverged at epoch {epoch} (loss {})",
                    loss.total
                )));
            }
            let mut flat = model.flatten();
            adam.step(&mut flat, &grads.flatten(), lr)?;
            model.assign_flat(&flat)?;
            sums.ce += loss.ce;
            sums.hinge += loss.hinge;
            sums.kl += loss.kl;
            sums.total += loss.total;
            batches += 1;
        }
        let n = batches as f64;
        trace.push(EpochTrace {
            epoch,
            lr,
            ce: sums.ce / n,
            hinge: sums.hinge / n,
            kl: sums.kl / n,
            total: sums.total / n,
        });
    }
    Ok(TrainOutcome { checkpoint: ModelCheckpoint::new(model, cfg.clone()), trace })
}

/// Which score the metrics compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    MeanScore,
    TrueScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub bt: BtConfig,
    /// Monte-Carlo samples per reference comparison.
    pub samples: usize,
    pub seed: u64,
    pub target: ScoreTarget,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bt: BtConfig::default(),
            samples: crate::distribution::ESTIMATION_SAMPLES,
            seed: 0,
            target: ScoreTarget::MeanScore,
        }
    }
}

/// Embeds `instances` and keeps `min(n_i, cap)` of them per score bin.
pub fn model_reference_set(
    model: &UolModel,
    instances: &[RatedInstance],
    cap: usize,
    width: f64,
    seed: u64,
) -> Result<ReferenceSet> {
    let embeddings: Vec<GaussianEmbedding> =
        instances.iter().map(|d| model.encoder.encode(&d.features)).collect::<Result<_>>()?;
    bt::build_reference_set(instances, &embeddings, cap, width, &mut seeded_rng(seed, 30))
}

/// Predicted score of every instance. Instance `i` draws its comparison noise
/// from stream `i` of the evaluation seed, so predictions do not depend on
/// evaluation order or on the labels of other instances.
pub fn predict_scores(
    checkpoint: &ModelCheckpoint,
    instances: &[RatedInstance],
    refset: Option<&ReferenceSet>,
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let model = &checkpoint.model;
    match checkpoint.config.mode {
        TrainMode::Regression => {
            let head = model
                .regression_head
                .as_ref()
                .ok_or_else(|| UolError::Checkpoint("regression checkpoint without a head".into()))?;
            instances
                .par_iter()
                .map(|d| {
                    let hidden = model.encoder.trunk.forward(&d.features)?;
                    Ok(head.forward(&hidden)?[0] + REGRESSION_OFFSET)
                })
                .collect()
        }
        mode => {
            let refset = refset.ok_or_else(|| UolError::InvalidArgument("a reference set is required".into()))?;
            let kind = if mode == TrainMode::Uol {
                ComparisonKind::Distribution { samples: cfg.samples }
            } else {
                ComparisonKind::Point
            };
            instances
                .par_iter()
                .enumerate()
                .map(|(i, d)| {
                    let z = model.encoder.encode(&d.features)?;
                    let mut rng = seeded_rng(cfg.seed, i as u64);
                    bt::estimate_score(&model.comparator, &z, refset, &cfg.bt, kind, &mut rng)
                })
                .collect()
        }
    }
}

pub fn target_scores(instances: &[RatedInstance], target: ScoreTarget) -> Result<Vec<f64>> {
    instances
        .iter()
        .map(|d| match target {
            ScoreTarget::MeanScore => Ok(d.mean_score),
            ScoreTarget::TrueScore => d
                .true_score
                .ok_or_else(|| UolError::InvalidArgument(format!("instance {} has no true_score", d.id))),
        })
        .collect()
}

pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    dataset: &[RatedInstance],
    refset: Option<&ReferenceSet>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if dataset.len() < 2 {
        return Err(UolError::UndefinedMetric("evaluation needs at least 2 instances".into()));
    }
    let truth = target_scores(dataset, cfg.target)?;
    let pred = predict_scores(checkpoint, dataset, refset, cfg)?;
    metrics::report(&pred, &truth)
}
