//! Bradley-Terry score recovery.
//!
//! A test instance is compared against every entry of a binned reference set.
//! Each verdict `R_i` against a reference of known score `s_i` is modelled by a
//! cumulative-logit distribution
//!
//! ```text
//! P(Y <= j) = logistic(delta_j - k * (s_t - s_i)),  delta_0 = -delta, delta_1 = +delta, delta_2 = +inf
//! ```
//!
//! with `Y` ordered `Less < Approx < Greater`, so a higher `s_t` makes
//! `Greater` more likely. The score estimate maximizes the log-likelihood of
//! all verdicts over `[1, 5]`.

use rand::seq::SliceRandom;

use crate::distribution::{compare_distributions, SampleNoise};
use crate::error::{Result, UolError};
use crate::networks::{Comparator, GaussianEmbedding};
use crate::ordering::OrderRelation;
use crate::synth::{bin_count, bin_index, RatedInstance, BIN_WIDTH, SCORE_MAX, SCORE_MIN};
use crate::Rng;

/// Default per-bin cap of the reference set.
pub const REFERENCE_CAP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BtConfig {
    pub delta: f64,
    pub k: f64,
    pub lower: f64,
    pub upper: f64,
    pub tolerance: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self { delta: 0.8, k: 4.0, lower: SCORE_MIN, upper: SCORE_MAX, tolerance: 1e-6 }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite() && self.k > 0.0 && self.k.is_finite()) {
            return Err(UolError::InvalidArgument(format!(
                "delta and k must be positive and finite, got ({}, {})",
                self.delta, self.k
            )));
        }
        if !(self.lower < self.upper && self.lower.is_finite() && self.upper.is_finite()) {
            return Err(UolError::InvalidArgument("search range must be a finite interval".into()));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(UolError::InvalidArgument("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Verdict of a test instance against one reference.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonRecord {
    pub reference_score: f64,
    pub relation: OrderRelation,
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `P(Y <= ordinal)` for the ordinals `0` (Less), `1` (Approx), `2` (Greater).
pub fn bt_cumulative(ordinal: usize, s_ref: f64, s_t: f64, cfg: &BtConfig) -> f64 {
    let shift = cfg.k * (s_t - s_ref);
    match ordinal {
        0 => logistic(-cfg.delta - shift),
        1 => logistic(cfg.delta - shift),
        _ => 1.0,
    }
}

/// Probabilities of `(Less, Approx, Greater)`.
pub fn bt_probabilities(s_ref: f64, s_t: f64, cfg: &BtConfig) -> [f64; 3] {
    let shift = cfg.k * (s_t - s_ref);
    let less = logistic(-cfg.delta - shift);
    let greater = logistic(shift - cfg.delta);
    [less, (1.0 - less - greater).max(0.0), greater]
}

pub fn bt_prob(relation: OrderRelation, s_ref: f64, s_t: f64, cfg: &BtConfig) -> f64 {
    bt_probabilities(s_ref, s_t, cfg)[relation.bt_ordinal()]
}

/// `sum_i log P(Y = R_i; s_i, s_t)`; `-inf` when a verdict has probability 0.
pub fn bt_log_likelihood(records: &[ComparisonRecord], s_t: f64, cfg: &BtConfig) -> f64 {
    records
        .iter()
        .map(|r| bt_prob(r.relation, r.reference_score, s_t, cfg).ln())
        .sum()
}

/// Maximizer of a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tolerance: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tolerance {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximizer of `f` over the grid `lo, lo + step, ..., hi` (first wins ties).
pub fn grid_search_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .map(|i| (lo + i as f64 * step).min(hi))
        .fold((lo, f64::NEG_INFINITY), |best, x| {
            let v = f(x);
            if v > best.1 {
                (x, v)
            } else {
                best
            }
        })
        .0
}

/// Maximum-likelihood score for a set of verdicts. The likelihood is
/// log-concave in `s_t`; the golden-section optimum is compared with both
/// endpoints so monotone likelihoods land exactly on the boundary.
pub fn estimate_from_records(records: &[ComparisonRecord], cfg: &BtConfig) -> Result<f64> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(UolError::InvalidArgument("no comparison records".into()));
    }
    let f = |s: f64| bt_log_likelihood(records, s, cfg);
    let interior = golden_section_max(f, cfg.lower, cfg.upper, cfg.tolerance);
    let best = [interior, cfg.lower, cfg.upper]
        .into_iter()
        .fold((interior, f(interior)), |best, x| {
            let v = f(x);
            if v > best.1 {
                (x, v)
            } else {
                best
            }
        });
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub embedding: GaussianEmbedding,
    pub score: f64,
    pub bin: usize,
}

/// Scored reference instances, at most `cap` per score bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    entries: Vec<ReferenceEntry>,
    width: f64,
    cap: usize,
    bin_counts: Vec<usize>,
}

impl ReferenceSet {
    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Selected entries per bin.
    pub fn bin_counts(&self) -> &[usize] {
        &self.bin_counts
    }
}

/// Per score bin of `width`, keeps `min(n_i, cap)` instances drawn uniformly
/// at random. Empty bins stay empty.
pub fn build_reference_set(
    instances: &[RatedInstance],
    embeddings: &[GaussianEmbedding],
    cap: usize,
    width: f64,
    rng: &mut Rng,
) -> Result<ReferenceSet> {
    if instances.is_empty() {
        return Err(UolError::InvalidArgument("reference set needs training instances".into()));
    }
    if instances.len() != embeddings.len() {
        return Err(UolError::DimensionMismatch { expected: instances.len(), found: embeddings.len() });
    }
    if cap == 0 {
        return Err(UolError::InvalidArgument("reference cap must be >= 1".into()));
    }
    let bins = bin_count(width);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, inst) in instances.iter().enumerate() {
        members[bin_index(inst.mean_score, width)?].push(i);
    }
    let mut entries = Vec::new();
    let mut bin_counts = vec![0; bins];
    for (bin, idx) in members.iter_mut().enumerate() {
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
        bin_counts[bin] = idx.len();
        entries.extend(idx.iter().map(|&i| ReferenceEntry {
            embedding: embeddings[i].clone(),
            score: instances[i].mean_score,
            bin,
        }));
    }
    Ok(ReferenceSet { entries, width, cap, bin_counts })
}

pub fn build_reference_set_default(
    instances: &[RatedInstance],
    embeddings: &[GaussianEmbedding],
    rng: &mut Rng,
) -> Result<ReferenceSet> {
    build_reference_set(instances, embeddings, REFERENCE_CAP, BIN_WIDTH, rng)
}

/// How a test embedding is compared with a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonKind {
    /// Monte-Carlo comparison of the two distributions with `samples` draws.
    Distribution { samples: usize },
    /// Comparison of the means only.
    Point,
}

/// Verdicts of `test` against every reference (the test is the first argument
/// of the comparator, so `Greater` means the test outranks the reference).
pub fn compare_with_references(
    comparator: &Comparator,
    test: &GaussianEmbedding,
    refset: &ReferenceSet,
    kind: ComparisonKind,
    rng: &mut Rng,
) -> Result<Vec<ComparisonRecord>> {
    refset
        .entries
        .iter()
        .map(|entry| {
            let logits = match kind {
                ComparisonKind::Distribution { samples } => {
                    let noise = SampleNoise::draw(samples, test.dim(), rng)?;
                    compare_distributions(comparator, test, &entry.embedding, &noise)?
                }
                ComparisonKind::Point => comparator.compare_points(&test.mu, &entry.embedding.mu)?,
            };
            Ok(ComparisonRecord { reference_score: entry.score, relation: logits.argmax() })
        })
        .collect()
}

/// Full pipeline: compare against the reference set, then maximize the
/// Bradley-Terry likelihood.
pub fn estimate_score(
    comparator: &Comparator,
    test: &GaussianEmbedding,
    refset: &ReferenceSet,
    cfg: &BtConfig,
    kind: ComparisonKind,
    rng: &mut Rng,
) -> Result<f64> {
    if refset.is_empty() {
        return Err(UolError::InvalidArgument("reference set is empty".into()));
    }
    let records = compare_with_references(comparator, test, refset, kind, rng)?;
    estimate_from_records(&records, cfg)
}
