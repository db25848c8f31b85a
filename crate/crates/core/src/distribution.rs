//! Dispersion, distance and Monte-Carlo comparison of diagonal Gaussians.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Result, UolError};
use crate::networks::{Comparator, GaussianEmbedding, MlpCache, MlpGrads, OrderLogits};
use crate::Rng;

/// Default number of Monte-Carlo samples per comparison during training.
pub const TRAIN_SAMPLES: usize = 5;
/// Default number of Monte-Carlo samples per comparison during estimation.
pub const ESTIMATION_SAMPLES: usize = 10;

/// `sqrt(sum_j |var_j|)` over the diagonal of the covariance.
pub fn frobenius_dispersion(var_diag: &[f64]) -> Result<f64> {
    if var_diag.is_empty() {
        return Err(UolError::InvalidArgument("empty covariance diagonal".into()));
    }
    if let Some(bad) = var_diag.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(UolError::InvalidArgument(format!("variance {bad} is not positive")));
    }
    Ok(var_diag.iter().map(|v| v.abs()).sum::<f64>().sqrt())
}

/// Gradient of [`frobenius_dispersion`] w.r.t. each variance.
pub fn frobenius_dispersion_grad(var_diag: &[f64]) -> Result<Vec<f64>> {
    let norm = frobenius_dispersion(var_diag)?;
    Ok(vec![0.5 / norm; var_diag.len()])
}

/// Squared distance `sum_j (mu1_j - mu2_j)^2 + (var1_j - var2_j)^2`.
///
/// The second term differences the diagonal entries of the covariances
/// themselves (variances), not standard deviations.
pub fn wasserstein_sq(z1: &GaussianEmbedding, z2: &GaussianEmbedding) -> Result<f64> {
    check_dim(z1.dim(), z2.dim())?;
    let mean_part: f64 = z1.mu.iter().zip(&z2.mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let var_part: f64 = z1.var_diag.iter().zip(&z2.var_diag).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(mean_part + var_part)
}

/// Gradient of [`wasserstein_sq`] w.r.t. `(mu1, var1)`; the gradient w.r.t.
/// the second argument is the negation.
pub fn wasserstein_sq_grad(z1: &GaussianEmbedding, z2: &GaussianEmbedding) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(z1.dim(), z2.dim())?;
    let d_mu = z1.mu.iter().zip(&z2.mu).map(|(a, b)| 2.0 * (a - b)).collect();
    let d_var = z1.var_diag.iter().zip(&z2.var_diag).map(|(a, b)| 2.0 * (a - b)).collect();
    Ok((d_mu, d_var))
}

/// Reparameterized draw `mu + sqrt(var) * eps`.
pub fn reparam_sample(z: &GaussianEmbedding, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim(z.dim(), eps.len())?;
    Ok(z.mu
        .iter()
        .zip(&z.var_diag)
        .zip(eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

/// Adds the gradient through [`reparam_sample`] into `(d_mu, d_var)`.
pub fn reparam_backward(
    z: &GaussianEmbedding,
    eps: &[f64],
    d_sample: &[f64],
    d_mu: &mut [f64],
    d_var: &mut [f64],
) -> Result<()> {
    check_dim(z.dim(), eps.len())?;
    check_dim(z.dim(), d_sample.len())?;
    for j in 0..z.dim() {
        d_mu[j] += d_sample[j];
        d_var[j] += d_sample[j] * eps[j] / (2.0 * z.var_diag[j].sqrt());
    }
    Ok(())
}

/// Standard-normal draws for `T` comparisons, independent for each side.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNoise {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl SampleNoise {
    pub fn draw(samples: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut draw_side = || -> Vec<Vec<f64>> {
            (0..samples)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect())
                .collect()
        };
        let first = draw_side();
        let second = draw_side();
        Self::from_parts(first, second)
    }

    /// Injected noise, e.g. frozen for gradient checks.
    pub fn from_parts(first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<Self> {
        if first.is_empty() {
            return Err(UolError::InvalidArgument("at least one sample is required".into()));
        }
        check_dim(first.len(), second.len())?;
        let dim = first[0].len();
        for eps in first.iter().chain(&second) {
            check_dim(dim, eps.len())?;
        }
        Ok(Self { first, second })
    }

    pub fn zeros(samples: usize, dim: usize) -> Result<Self> {
        Self::from_parts(vec![vec![0.0; dim]; samples], vec![vec![0.0; dim]; samples])
    }

    pub fn samples(&self) -> usize {
        self.first.len()
    }

    pub fn dim(&self) -> usize {
        self.first[0].len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.first.iter().zip(&self.second).map(|(a, b)| (a.as_slice(), b.as_slice()))
    }
}

/// Anything that orders two embedding points.
pub trait PointComparator {
    fn compare(&self, z1: &[f64], z2: &[f64]) -> Result<OrderLogits>;
}

impl PointComparator for Comparator {
    fn compare(&self, z1: &[f64], z2: &[f64]) -> Result<OrderLogits> {
        self.compare_points(z1, z2)
    }
}

/// Mean of the comparator logits over `T` paired draws from `z1` and `z2`.
/// Averaging happens before any softmax.
pub fn compare_distributions<C: PointComparator + ?Sized>(
    comparator: &C,
    z1: &GaussianEmbedding,
    z2: &GaussianEmbedding,
    noise: &SampleNoise,
) -> Result<OrderLogits> {
    check_dim(z1.dim(), z2.dim())?;
    check_dim(z1.dim(), noise.dim())?;
    let mut sum = [0.0; 3];
    for (e1, e2) in noise.pairs() {
        let logits = comparator.compare(&reparam_sample(z1, e1)?, &reparam_sample(z2, e2)?)?;
        for (s, l) in sum.iter_mut().zip(logits.0) {
            *s += l;
        }
    }
    let t = noise.samples() as f64;
    Ok(OrderLogits(sum.map(|s| s / t)))
}

/// A differentiable [`compare_distributions`] evaluation.
#[derive(Debug, Clone)]
pub struct DistributionComparison {
    pub logits: OrderLogits,
    caches: Vec<MlpCache>,
    noise: SampleNoise,
}

/// Gradients of a comparison w.r.t. the two embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPairGrads {
    pub d_mu1: Vec<f64>,
    pub d_var1: Vec<f64>,
    pub d_mu2: Vec<f64>,
    pub d_var2: Vec<f64>,
}

impl EmbeddingPairGrads {
    fn zeros(dim: usize) -> Self {
        Self { d_mu1: vec![0.0; dim], d_var1: vec![0.0; dim], d_mu2: vec![0.0; dim], d_var2: vec![0.0; dim] }
    }
}

pub fn compare_distributions_cached(
    comparator: &Comparator,
    z1: &GaussianEmbedding,
    z2: &GaussianEmbedding,
    noise: &SampleNoise,
) -> Result<DistributionComparison> {
    check_dim(z1.dim(), z2.dim())?;
    check_dim(z1.dim(), noise.dim())?;
    let mut sum = [0.0; 3];
    let mut caches = Vec::with_capacity(noise.samples());
    for (e1, e2) in noise.pairs() {
        let (logits, cache) =
            comparator.compare_points_cached(&reparam_sample(z1, e1)?, &reparam_sample(z2, e2)?)?;
        for (s, l) in sum.iter_mut().zip(logits.0) {
            *s += l;
        }
        caches.push(cache);
    }
    let t = noise.samples() as f64;
    Ok(DistributionComparison { logits: OrderLogits(sum.map(|s| s / t)), caches, noise: noise.clone() })
}

impl DistributionComparison {
    /// Backpropagates `d_logits` (gradient w.r.t. the averaged logits).
    pub fn backward(
        &self,
        comparator: &Comparator,
        z1: &GaussianEmbedding,
        z2: &GaussianEmbedding,
        d_logits: &[f64; 3],
        grads: &mut MlpGrads,
    ) -> Result<EmbeddingPairGrads> {
        let t = self.noise.samples() as f64;
        let per_sample = d_logits.map(|g| g / t);
        let mut out = EmbeddingPairGrads::zeros(z1.dim());
        for (cache, (e1, e2)) in self.caches.iter().zip(self.noise.pairs()) {
            let (ds1, ds2) = comparator.backward(cache, &per_sample, grads)?;
            reparam_backward(z1, e1, &ds1, &mut out.d_mu1, &mut out.d_var1)?;
            reparam_backward(z2, e2, &ds2, &mut out.d_mu2, &mut out.d_var2)?;
        }
        Ok(out)
    }
}
