//! Simulated-rater datasets.
//!
//! Every instance carries a hidden true score in `[1, 5]`, a feature vector
//! that is a smooth function of that score, and the statistics of `K` noisy
//! ratings drawn around it. The spread of the ratings (the discriminal
//! dispersion of the instance) is drawn per instance from a configurable range.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UolError};
use crate::{seeded_rng, Rng};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;

/// Default reference-set bin width.
pub const BIN_WIDTH: f64 = 0.1;

/// Slack absorbed when flooring `(score - 1) / width`, so that decimal
/// literals such as `1.7` land in bin 7 despite binary rounding.
const BIN_SLACK: f64 = 1e-9;

/// One rated instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedInstance {
    pub id: u64,
    pub features: Vec<f64>,
    pub mean_score: f64,
    pub rating_variance: f64,
    #[serde(default)]
    pub true_score: Option<f64>,
    #[serde(default)]
    pub ratings: Option<Vec<f64>>,
}

impl RatedInstance {
    /// Checks the instance invariants. `expected_dim` pins the feature length.
    pub fn validate(&self, expected_dim: Option<usize>) -> std::result::Result<(), String> {
        if self.features.is_empty() {
            return Err("features must not be empty".into());
        }
        if let Some(dim) = expected_dim {
            if self.features.len() != dim {
                return Err(format!(
                    "features has length {}, expected {dim}",
                    self.features.len()
                ));
            }
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err("features must be finite".into());
        }
        if !in_score_range(self.mean_score) {
            return Err(format!("mean_score {} outside [1,5]", self.mean_score));
        }
        if !(self.rating_variance >= 0.0 && self.rating_variance.is_finite()) {
            return Err(format!("rating_variance {} must be >= 0", self.rating_variance));
        }
        if let Some(t) = self.true_score {
            if !in_score_range(t) {
                return Err(format!("true_score {t} outside [1,5]"));
            }
        }
        if let Some(ratings) = &self.ratings {
            if ratings.is_empty() {
                return Err("ratings must not be empty when present".into());
            }
            if let Some(bad) = ratings.iter().find(|r| !in_score_range(**r)) {
                return Err(format!("rating {bad} outside [1,5]"));
            }
            let (mean, var) = mean_and_population_variance(ratings);
            if (mean - self.mean_score).abs() > 1e-9 {
                return Err(format!(
                    "mean_score {} differs from mean of ratings {mean}",
                    self.mean_score
                ));
            }
            if (var - self.rating_variance).abs() > 1e-9 {
                return Err(format!(
                    "rating_variance {} differs from population variance of ratings {var}",
                    self.rating_variance
                ));
            }
        }
        Ok(())
    }
}

fn in_score_range(s: f64) -> bool {
    (SCORE_MIN..=SCORE_MAX).contains(&s)
}

/// Mean and population (divide-by-n) variance.
pub fn mean_and_population_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreDistribution {
    Uniform,
    /// Beta(a, b) rescaled from `[0, 1]` to `[1, 5]`.
    Beta { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub rater_count: usize,
    pub dispersion_range: (f64, f64),
    pub score_distribution: ScoreDistribution,
    pub feature_noise: f64,
    pub seed: u64,
    /// Seed of the score-to-feature mixing matrix. Datasets sharing it share
    /// the same generative feature map, so a model trained on one transfers.
    pub feature_map_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            feature_dim: 16,
            rater_count: 20,
            dispersion_range: (0.2, 1.0),
            score_distribution: ScoreDistribution::Uniform,
            feature_noise: 0.05,
            seed: 0,
            feature_map_seed: 0x5eed,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.dispersion_range;
        if self.n == 0 {
            return Err(UolError::InvalidArgument("n must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(UolError::InvalidArgument("feature_dim must be >= 1".into()));
        }
        if self.rater_count < 2 {
            return Err(UolError::InvalidArgument("rater_count must be >= 2".into()));
        }
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(UolError::InvalidArgument(format!(
                "dispersion_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(UolError::InvalidArgument("feature_noise must be >= 0".into()));
        }
        if let ScoreDistribution::Beta { a, b } = self.score_distribution {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(UolError::InvalidArgument(format!(
                    "beta parameters must be positive, got ({a}, {b})"
                )));
            }
        }
        Ok(())
    }
}

/// Ratings produced by one simulated rater panel.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterPanel {
    pub ratings: Vec<f64>,
    pub mean_score: f64,
    pub rating_variance: f64,
}

/// Draws `rater_count` ratings from `Normal(true_score, dispersion^2)`, each
/// clipped to `[1, 5]`.
pub fn simulate_raters(
    true_score: f64,
    dispersion: f64,
    rater_count: usize,
    rng: &mut Rng,
) -> Result<RaterPanel> {
    if rater_count < 2 {
        return Err(UolError::InvalidArgument(format!(
            "at least two raters are needed, got {rater_count}"
        )));
    }
    if !in_score_range(true_score) {
        return Err(UolError::Range(format!("true_score {true_score} outside [1,5]")));
    }
    if !(dispersion >= 0.0 && dispersion.is_finite()) {
        return Err(UolError::InvalidArgument(format!(
            "dispersion must be >= 0, got {dispersion}"
        )));
    }
    let ratings: Vec<f64> = (0..rater_count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (true_score + dispersion * z).clamp(SCORE_MIN, SCORE_MAX)
        })
        .collect();
    let (mean_score, rating_variance) = mean_and_population_variance(&ratings);
    Ok(RaterPanel {
        // the mean of values in [1,5] can drift past the bounds by an ulp
        mean_score: mean_score.clamp(SCORE_MIN, SCORE_MAX),
        rating_variance,
        ratings,
    })
}

/// Smooth basis of a score, before tiling to the feature dimension.
fn score_basis(score: f64) -> [f64; 4] {
    let u = (score - 3.0) / 2.0;
    [u, u * u, (2.0 * u).sin(), (2.0 * u).cos()]
}

/// Seeded `F x F` mixing matrix, row-major.
fn feature_map(feature_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 1);
    let scale = 1.0 / (feature_dim as f64).sqrt();
    (0..feature_dim * feature_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Vec<RatedInstance>> {
    cfg.validate()?;
    let f = cfg.feature_dim;
    let mixing = feature_map(f, cfg.feature_map_seed);
    let mut rng = seeded_rng(cfg.seed, 0);
    let beta = match cfg.score_distribution {
        ScoreDistribution::Beta { a, b } => Some(
            Beta::new(a, b).map_err(|e| UolError::InvalidArgument(format!("beta: {e}")))?,
        ),
        ScoreDistribution::Uniform => None,
    };
    let (lo, hi) = cfg.dispersion_range;

    let mut out = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n {
        let unit: f64 = match &beta {
            Some(b) => b.sample(&mut rng),
            None => rng.random::<f64>(),
        };
        let true_score = (SCORE_MIN + (SCORE_MAX - SCORE_MIN) * unit).clamp(SCORE_MIN, SCORE_MAX);
        let basis = score_basis(true_score);
        let features: Vec<f64> = (0..f)
            .map(|row| {
                let clean: f64 = (0..f)
                    .map(|col| mixing[row * f + col] * basis[col % basis.len()])
                    .sum();
                let z: f64 = StandardNormal.sample(&mut rng);
                clean + cfg.feature_noise * z
            })
            .collect();
        let dispersion = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let panel = simulate_raters(true_score, dispersion, cfg.rater_count, &mut rng)?;
        out.push(RatedInstance {
            id: id as u64,
            features,
            mean_score: panel.mean_score,
            rating_variance: panel.rating_variance,
            true_score: Some(true_score),
            ratings: Some(panel.ratings),
        });
    }
    Ok(out)
}

/// Monotone distortion `s -> 1 + 4 * ((s - 1) / 4)^gamma` of the score scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelShift {
    gamma: f64,
}

impl LabelShift {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(UolError::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn map(&self, score: f64) -> f64 {
        let unit = ((score - SCORE_MIN) / (SCORE_MAX - SCORE_MIN)).clamp(0.0, 1.0);
        SCORE_MIN + (SCORE_MAX - SCORE_MIN) * unit.powf(self.gamma)
    }
}

/// Applies `shift` to the mean and true scores. Individual ratings are
/// dropped from the copy: the mean of shifted ratings is not the shifted mean,
/// so keeping them would break the instance invariants.
pub fn apply_label_shift(instances: &[RatedInstance], shift: LabelShift) -> Vec<RatedInstance> {
    instances
        .iter()
        .map(|inst| RatedInstance {
            id: inst.id,
            features: inst.features.clone(),
            mean_score: shift.map(inst.mean_score),
            rating_variance: inst.rating_variance,
            true_score: inst.true_score.map(|s| shift.map(s)),
            ratings: None,
        })
        .collect()
}

/// Number of bins covering `[1, 5]` at `width`.
pub fn bin_count(width: f64) -> usize {
    (((SCORE_MAX - SCORE_MIN) / width) - BIN_SLACK).ceil().max(1.0) as usize
}

/// Half-open bin index `floor((score - 1) / width)`; the top score joins the
/// last bin.
pub fn bin_index(score: f64, width: f64) -> Result<usize> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(UolError::InvalidArgument(format!("bin width must be > 0, got {width}")));
    }
    if !in_score_range(score) {
        return Err(UolError::Range(format!("score {score} outside [1,5]")));
    }
    let raw = ((score - SCORE_MIN) / width + BIN_SLACK).floor() as usize;
    Ok(raw.min(bin_count(width) - 1))
}

/// Seeded shuffle then split; the first part holds `1 - test_fraction`.
pub fn train_test_split(
    instances: &[RatedInstance],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<RatedInstance>, Vec<RatedInstance>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(UolError::InvalidArgument(format!(
            "test_fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut seeded_rng(seed, 2));
    let n_test = (instances.len() as f64 * test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| idx.iter().map(|&i| instances[i].clone()).collect::<Vec<_>>();
    Ok((pick(train_idx), pick(test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean and variance of `clip(N(mu, sigma^2), 1, 5)` by midpoint quadrature.
    fn clipped_normal_moments(mu: f64, sigma: f64) -> (f64, f64) {
        let steps = 200_000;
        let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let h = (b - a) / steps as f64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..steps {
            let x = a + (i as f64 + 0.5) * h;
            let pdf = (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let c = x.clamp(1.0, 5.0);
            m1 += c * pdf * h;
            m2 += c * c * pdf * h;
        }
        (m1, m2 - m1 * m1)
    }

    #[test]
    fn zero_dispersion_gives_constant_ratings() {
        let panel = simulate_raters(3.0, 0.0, 5, &mut seeded_rng(1, 0)).unwrap();
        assert_eq!(panel.ratings, vec![3.0; 5]);
        assert_eq!(panel.mean_score, 3.0);
        assert_eq!(panel.rating_variance, 0.0);
    }

    #[test]
    fn single_rater_is_rejected() {
        let err = simulate_raters(3.0, 0.5, 1, &mut seeded_rng(1, 0)).unwrap_err();
        assert!(matches!(err, UolError::InvalidArgument(_)));
    }

    #[test]
    fn rater_statistics_match_clipped_normal_oracle() {
        let k = 60;
        let seeds = 1000;
        for &(mu, sigma) in &[(3.0, 0.5), (5.0, 1.0), (1.2, 0.8)] {
            let (o_mean, o_var) = clipped_normal_moments(mu, sigma);
            // expected population variance of k draws
            let o_pop_var = o_var * (k as f64 - 1.0) / k as f64;
            let mut means = Vec::new();
            let mut vars = Vec::new();
            for seed in 0..seeds {
                let p = simulate_raters(mu, sigma, k, &mut seeded_rng(seed, 0)).unwrap();
                means.push(p.mean_score);
                vars.push(p.rating_variance);
            }
            let (mm, mv) = mean_and_population_variance(&means);
            let (vm, vv) = mean_and_population_variance(&vars);
            let se_m = (mv / seeds as f64).sqrt();
            let se_v = (vv / seeds as f64).sqrt();
            assert!((mm - o_mean).abs() < 3.0 * se_m, "mean {mm} vs {o_mean}");
            assert!((vm - o_pop_var).abs() < 3.0 * se_v, "var {vm} vs {o_pop_var}");
            if mu == 3.0 {
                assert!((mm - 3.0).abs() < 0.02);
                assert!((vm - 0.25).abs() < 0.03);
            }
        }
    }

    #[test]
    fn clipping_pulls_mean_below_the_top() {
        let p = simulate_raters(5.0, 1.0, 60, &mut seeded_rng(3, 0)).unwrap();
        assert!(p.mean_score < 5.0);
        assert!(p.ratings.iter().all(|r| (1.0..=5.0).contains(r)));
    }

    #[test]
    fn dataset_shape_and_range() {
        let cfg = SyntheticConfig { n: 100, feature_dim: 16, seed: 7, ..Default::default() };
        let data = generate_dataset(&cfg).unwrap();
        assert_eq!(data.len(), 100);
        for inst in &data {
            assert_eq!(inst.features.len(), 16);
            assert!((1.0..=5.0).contains(&inst.mean_score));
            inst.validate(Some(16)).unwrap();
        }
        assert_eq!(data, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn beta_scores_concentrate_in_the_middle() {
        let cfg = SyntheticConfig {
            n: 2000,
            score_distribution: ScoreDistribution::Beta { a: 4.0, b: 4.0 },
            seed: 11,
            ..Default::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let count = |lo: f64, hi: f64| {
            data.iter().filter(|d| (lo..=hi).contains(&d.true_score.unwrap())).count()
        };
        let middle = count(2.75, 3.25);
        assert!(count(1.0, 1.5) < middle);
        assert!(count(4.5, 5.0) < middle);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SyntheticConfig { n: 0, ..Default::default() },
            SyntheticConfig { rater_count: 1, ..Default::default() },
            SyntheticConfig { dispersion_range: (1.0, 0.5), ..Default::default() },
            SyntheticConfig {
                score_distribution: ScoreDistribution::Beta { a: 0.0, b: 1.0 },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(generate_dataset(&cfg).is_err());
        }
    }

    #[test]
    fn label_shift_values() {
        let id = LabelShift::new(1.0).unwrap();
        for s in [1.0, 2.3, 3.0, 4.99, 5.0] {
            assert!((id.map(s) - s).abs() < 1e-15);
        }
        let sq = LabelShift::new(2.0).unwrap();
        assert_eq!(sq.map(3.0), 2.0);
        assert!(LabelShift::new(0.0).is_err());
        assert!(LabelShift::new(-1.0).is_err());
    }

    #[test]
    fn shifted_copy_keeps_features_and_invariants() {
        let cfg = SyntheticConfig { n: 50, seed: 5, ..Default::default() };
        let data = generate_dataset(&cfg).unwrap();
        let shifted = apply_label_shift(&data, LabelShift::new(2.0).unwrap());
        for (a, b) in data.iter().zip(&shifted) {
            assert_eq!(a.features, b.features);
            b.validate(None).unwrap();
        }
    }

    #[test]
    fn bin_index_boundaries() {
        assert_eq!(bin_index(1.0, 0.1).unwrap(), 0);
        assert_eq!(bin_index(1.05, 0.1).unwrap(), 0);
        assert_eq!(bin_index(1.10, 0.1).unwrap(), 1);
        assert_eq!(bin_index(1.7, 0.1).unwrap(), 7);
        assert_eq!(bin_index(5.0, 0.1).unwrap(), 39);
        assert_eq!(bin_count(0.1), 40);
        assert!(matches!(bin_index(0.99, 0.1), Err(UolError::Range(_))));
        assert!(matches!(bin_index(5.01, 0.1), Err(UolError::Range(_))));
    }

    #[test]
    fn split_partitions_the_dataset() {
        let data = generate_dataset(&SyntheticConfig { n: 10, ..Default::default() }).unwrap();
        let (train, test) = train_test_split(&data, 0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut ids: Vec<u64> = train.iter().chain(&test).map(|d| d.id).collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn label_shift_preserves_order(
                gamma in 0.1f64..5.0,
                a in 1.01f64..=5.0,
                b in 1.01f64..=5.0,
            ) {
                let shift = LabelShift::new(gamma).unwrap();
                let (fa, fb) = (shift.map(a), shift.map(b));
                prop_assert!((1.0..=5.0).contains(&fa));
                if b - a > 1e-3 {
                    prop_assert!(fa < fb);
                }
            }

            #[test]
            fn bin_index_matches_decimal_grid(k in 0usize..=400) {
                let score = 1.0 + k as f64 / 100.0;
                let expected = (k / 10).min(39);
                prop_assert_eq!(bin_index(score, 0.1).unwrap(), expected);
            }
        }
    }
}
