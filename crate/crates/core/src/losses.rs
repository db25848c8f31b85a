//! Training losses: three-way cross-entropy on comparison logits, an ordinal
//! hinge on Gaussian distances, and a dispersion KL tying predicted
//! dispersions to rating variances.

use serde::{Deserialize, Serialize};

use crate::distribution::{wasserstein_sq, wasserstein_sq_grad};
use crate::error::{check_dim, Result, UolError};
use crate::networks::{GaussianEmbedding, OrderLogits};
use crate::ordering::{OrderRelation, Triplet};

/// Floor inside `log(eta + floor)` for instances whose ratings all agree.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1e-4, beta: 1e-3, tau: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(UolError::InvalidArgument("alpha and beta must be finite and >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(UolError::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// How the dispersion KL treats the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `sum_m eta_m * (log eta_m - log pred_m)` as is; unnormalized and
    /// possibly negative.
    #[default]
    Verbatim,
    /// Proper KL between the batch-normalized distributions of `eta` and of
    /// the predictions.
    Normalized,
}

/// `-log softmax(logits)[target]`.
pub fn ce_loss(logits: &OrderLogits, target: OrderRelation) -> f64 {
    let c = target.one_hot_index();
    let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if logits.0[c] == max {
        // log(1 + rest) keeps full relative precision as the loss nears 0
        let rest: f64 = (0..3).filter(|&r| r != c).map(|r| (logits.0[r] - max).exp()).sum();
        return rest.ln_1p();
    }
    let log_z = max + logits.0.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    log_z - logits.0[c]
}

/// Gradient of [`ce_loss`] w.r.t. the logits.
pub fn ce_loss_grad(logits: &OrderLogits, target: OrderRelation) -> [f64; 3] {
    let mut g = logits.softmax();
    g[target.one_hot_index()] -= 1.0;
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingeOutcome {
    pub value: f64,
    /// Set when there were no triplets; the value is then 0.
    pub empty: bool,
}

/// `max(0, d_lm + tau - d_ln)` for one triplet.
pub fn hinge_term(d_lm: f64, d_ln: f64, tau: f64) -> f64 {
    (d_lm + tau - d_ln).max(0.0)
}

/// Mean hinge over `(z_l, z_m, z_n)` triplets with `d = sqrt(wasserstein_sq)`.
pub fn hinge_ordinal_loss(
    triplets: &[(&GaussianEmbedding, &GaussianEmbedding, &GaussianEmbedding)],
    tau: f64,
) -> Result<HingeOutcome> {
    if triplets.is_empty() {
        return Ok(HingeOutcome { value: 0.0, empty: true });
    }
    let mut total = 0.0;
    for (l, m, n) in triplets {
        total += hinge_term(wasserstein_sq(l, m)?.sqrt(), wasserstein_sq(l, n)?.sqrt(), tau);
    }
    Ok(HingeOutcome { value: total / triplets.len() as f64, empty: false })
}

/// Batch form of [`hinge_ordinal_loss`] over index triplets. Adds
/// `scale * gradient` into the per-embedding accumulators.
pub fn hinge_ordinal_backward(
    embeddings: &[GaussianEmbedding],
    triplets: &[Triplet],
    tau: f64,
    scale: f64,
    d_mu: &mut [Vec<f64>],
    d_var: &mut [Vec<f64>],
) -> Result<HingeOutcome> {
    if triplets.is_empty() {
        return Ok(HingeOutcome { value: 0.0, empty: true });
    }
    let weight = scale / triplets.len() as f64;
    let mut total = 0.0;
    for t in triplets {
        let (zl, zm, zn) = (&embeddings[t.l], &embeddings[t.m], &embeddings[t.n]);
        let d_lm = wasserstein_sq(zl, zm)?.sqrt();
        let d_ln = wasserstein_sq(zl, zn)?.sqrt();
        let term = hinge_term(d_lm, d_ln, tau);
        total += term;
        if term <= 0.0 {
            continue;
        }
        // +d_lm and -d_ln; d(sqrt w)/dw = 1/(2 sqrt w), zero at the cusp
        for (other, dist, sign) in [(t.m, d_lm, 1.0), (t.n, d_ln, -1.0)] {
            if dist == 0.0 {
                continue;
            }
            let coef = weight * sign / (2.0 * dist);
            let (g_mu, g_var) = wasserstein_sq_grad(zl, &embeddings[other])?;
            for j in 0..g_mu.len() {
                d_mu[t.l][j] += coef * g_mu[j];
                d_var[t.l][j] += coef * g_var[j];
                d_mu[other][j] -= coef * g_mu[j];
                d_var[other][j] -= coef * g_var[j];
            }
        }
    }
    Ok(HingeOutcome { value: total / triplets.len() as f64, empty: false })
}

fn check_kl_inputs(predicted: &[f64], eta: &[f64]) -> Result<()> {
    check_dim(predicted.len(), eta.len())?;
    if let Some(p) = predicted.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(UolError::InvalidArgument(format!("predicted dispersion {p} must be > 0")));
    }
    if let Some(e) = eta.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(UolError::InvalidArgument(format!("rating variance {e} must be >= 0")));
    }
    Ok(())
}

/// `sum_m eta_m * (log(eta_m + floor) - log(pred_m))`.
pub fn kl_dispersion_loss(predicted: &[f64], eta: &[f64]) -> Result<f64> {
    check_kl_inputs(predicted, eta)?;
    Ok(predicted
        .iter()
        .zip(eta)
        .map(|(p, e)| e * ((e + KL_FLOOR).ln() - p.ln()))
        .sum())
}

/// Gradient of [`kl_dispersion_loss`]: `-eta_m / pred_m`.
pub fn kl_dispersion_grad(predicted: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
    check_kl_inputs(predicted, eta)?;
    Ok(predicted.iter().zip(eta).map(|(p, e)| -e / p).collect())
}

/// KL between `eta / sum(eta)` and `pred / sum(pred)`. Zero when every eta is
/// zero.
pub fn kl_dispersion_loss_normalized(predicted: &[f64], eta: &[f64]) -> Result<f64> {
    check_kl_inputs(predicted, eta)?;
    let eta_sum: f64 = eta.iter().sum();
    if eta_sum == 0.0 {
        return Ok(0.0);
    }
    let pred_sum: f64 = predicted.iter().sum();
    Ok(predicted
        .iter()
        .zip(eta)
        .map(|(p, e)| {
            let pe = e / eta_sum;
            pe * ((pe + KL_FLOOR).ln() - (p / pred_sum).ln())
        })
        .sum())
}

pub fn kl_dispersion_grad_normalized(predicted: &[f64], eta: &[f64]) -> Result<Vec<f64>> {
    check_kl_inputs(predicted, eta)?;
    let eta_sum: f64 = eta.iter().sum();
    if eta_sum == 0.0 {
        return Ok(vec![0.0; predicted.len()]);
    }
    let pred_sum: f64 = predicted.iter().sum();
    Ok(predicted.iter().zip(eta).map(|(p, e)| -(e / eta_sum) / p + 1.0 / pred_sum).collect())
}

impl KlMode {
    pub fn loss_and_grad(self, predicted: &[f64], eta: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            KlMode::Verbatim => Ok((kl_dispersion_loss(predicted, eta)?, kl_dispersion_grad(predicted, eta)?)),
            KlMode::Normalized => Ok((
                kl_dispersion_loss_normalized(predicted, eta)?,
                kl_dispersion_grad_normalized(predicted, eta)?,
            )),
        }
    }
}

/// `ce + alpha * hinge + beta * kl`.
pub fn total_loss(ce: f64, hinge: f64, kl: f64, weights: &LossWeights) -> f64 {
    ce + weights.alpha * hinge + weights.beta * kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng as _;

    const ALL: [OrderRelation; 3] = [OrderRelation::Less, OrderRelation::Approx, OrderRelation::Greater];

    #[test]
    fn ce_on_uniform_logits_is_ln3() {
        for r in ALL {
            assert!((ce_loss(&OrderLogits([0.0; 3]), r) - 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_on_confident_logits() {
        let oracle = |c: f64| -(c.exp() / (c.exp() + 2.0)).ln();
        let v = ce_loss(&OrderLogits([10.0, 0.0, 0.0]), OrderRelation::Approx);
        assert!((v - oracle(10.0)).abs() < 1e-15);
        assert!((v - 9.0797e-5).abs() < 1e-8);
        let mut prev = f64::INFINITY;
        for c in [0.0, 1.0, 5.0, 10.0, 20.0] {
            let v = ce_loss(&OrderLogits([c, 0.0, 0.0]), OrderRelation::Approx);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn ce_is_shift_invariant() {
        let l = OrderLogits([0.3, -1.2, 2.0]);
        let shifted = OrderLogits(l.0.map(|x| x + 123.0));
        for r in ALL {
            assert!((ce_loss(&l, r) - ce_loss(&shifted, r)).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(3, 0);
        for _ in 0..100 {
            let l: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            for r in ALL {
                let g = ce_loss_grad(&OrderLogits(l), r);
                for c in 0..3 {
                    let h = 1e-6;
                    let (mut up, mut down) = (l, l);
                    up[c] += h;
                    down[c] -= h;
                    let numeric = (ce_loss(&OrderLogits(up), r) - ce_loss(&OrderLogits(down), r)) / (2.0 * h);
                    assert!((numeric - g[c]).abs() < 1e-8);
                }
            }
        }
    }

    fn point(mu: f64) -> GaussianEmbedding {
        GaussianEmbedding::new(vec![mu], vec![1.0]).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let (l, m, n) = (point(0.0), point(1.0), point(5.0));
        let v = hinge_ordinal_loss(&[(&l, &m, &n)], 1.0).unwrap();
        assert_eq!(v, HingeOutcome { value: 0.0, empty: false });

        let (m2, n2) = (point(2.0), point(-2.0));
        assert_eq!(hinge_ordinal_loss(&[(&l, &m2, &n2)], 1.0).unwrap().value, 1.0);
        assert_eq!(hinge_ordinal_loss(&[(&l, &m, &n), (&l, &m2, &n2)], 1.0).unwrap().value, 0.5);

        let empty = hinge_ordinal_loss(&[], 1.0).unwrap();
        assert!(empty.empty);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn kl_examples() {
        let eta = [0.3, 0.7, 1.2];
        assert!(kl_dispersion_loss(&eta, &eta).unwrap().abs() < 1e-7);
        let e = std::f64::consts::E;
        assert!((kl_dispersion_loss(&[e, e], &[1.0, 1.0]).unwrap() + 2.0).abs() < 1e-7);
        // zero-variance instances contribute nothing
        assert_eq!(kl_dispersion_loss(&[0.5], &[0.0]).unwrap(), 0.0);
        assert!(kl_dispersion_loss(&[0.0], &[1.0]).is_err());
        assert!(kl_dispersion_loss(&[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = seeded_rng(9, 0);
        for _ in 0..50 {
            let pred: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..3.0)).collect();
            let eta: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
            for mode in [KlMode::Verbatim, KlMode::Normalized] {
                let (_, g) = mode.loss_and_grad(&pred, &eta).unwrap();
                for m in 0..5 {
                    let h = 1e-6;
                    let (mut up, mut down) = (pred.clone(), pred.clone());
                    up[m] += h;
                    down[m] -= h;
                    let numeric =
                        (mode.loss_and_grad(&up, &eta).unwrap().0 - mode.loss_and_grad(&down, &eta).unwrap().0) / (2.0 * h);
                    assert!((numeric - g[m]).abs() < 1e-6 * (1.0 + numeric.abs()), "{mode:?}");
                }
                if mode == KlMode::Verbatim {
                    for m in 0..5 {
                        assert!((g[m] + eta[m] / pred[m]).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_kl_is_nonnegative_and_scale_free() {
        let eta = [0.2, 0.5, 0.9];
        let pred = [0.4, 1.0, 1.8];
        assert!(kl_dispersion_loss_normalized(&pred, &eta).unwrap().abs() < 1e-7);
        assert!(kl_dispersion_loss_normalized(&[1.0, 1.0, 1.0], &eta).unwrap() > 0.0);
        assert_eq!(kl_dispersion_loss_normalized(&pred, &[0.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 10.0, 100.0, &w) - 1.101).abs() < 1e-12);
        let zero = LossWeights { alpha: 0.0, beta: 0.0, tau: 1.0 };
        assert_eq!(total_loss(0.7, 10.0, -3.0, &zero), 0.7);
        assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn hinge_backward_matches_finite_differences() {
        let mut rng = seeded_rng(21, 0);
        let dim = 3;
        let mut emb: Vec<GaussianEmbedding> = (0..5)
            .map(|_| {
                GaussianEmbedding::new(
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    (0..dim).map(|_| rng.random_range(0.2..1.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let triplets = [Triplet { l: 0, m: 1, n: 2 }, Triplet { l: 3, m: 4, n: 0 }, Triplet { l: 2, m: 3, n: 1 }];
        let tau = 1.5;
        let mut d_mu = vec![vec![0.0; dim]; 5];
        let mut d_var = vec![vec![0.0; dim]; 5];
        hinge_ordinal_backward(&emb, &triplets, tau, 1.0, &mut d_mu, &mut d_var).unwrap();
        let value = |emb: &[GaussianEmbedding]| {
            let mut a = vec![vec![0.0; dim]; 5];
            let mut b = vec![vec![0.0; dim]; 5];
            hinge_ordinal_backward(emb, &triplets, tau, 1.0, &mut a, &mut b).unwrap().value
        };
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..dim {
                let orig = emb[i].mu[j];
                emb[i].mu[j] = orig + h;
                let up = value(&emb);
                emb[i].mu[j] = orig - h;
                let down = value(&emb);
                emb[i].mu[j] = orig;
                assert!(((up - down) / (2.0 * h) - d_mu[i][j]).abs() < 1e-7);
                let orig = emb[i].var_diag[j];
                emb[i].var_diag[j] = orig + h;
                let up = value(&emb);
                emb[i].var_diag[j] = orig - h;
                let down = value(&emb);
                emb[i].var_diag[j] = orig;
                assert!(((up - down) / (2.0 * h) - d_var[i][j]).abs() < 1e-7);
            }
        }
    }
}
