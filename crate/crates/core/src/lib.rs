//! Uncertainty-oriented order learning.
//!
//! Instances are embedded as diagonal Gaussians, compared pairwise by a small
//! comparator network through Monte-Carlo sampling, and finally scored by
//! maximizing a cumulative-logit Bradley-Terry likelihood against a binned
//! reference set.
//!
//! Module map:
//! - [`synth`]: simulated-rater datasets and monotone label shifts.
//! - [`networks`]: the Gaussian encoder and the three-layer comparator, with
//!   exact reverse-mode gradients.
//! - [`ordering`]: order labels and the hard-triplet / balanced-pair samplers.
//! - [`distribution`]: dispersion, Wasserstein and reparameterized comparison.
//! - [`losses`]: cross-entropy, ordinal hinge and dispersion KL losses.
//! - [`bt`]: reference sets and Bradley-Terry score estimation.
//! - [`optim`], [`trainer`], [`metrics`]: Adam, cosine schedule, training
//!   loop and evaluation.
//! - [`persist`], [`cli`]: file formats and the command-line front end.

pub mod bt;
pub mod cli;
pub mod distribution;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod ordering;
pub mod persist;
pub mod synth;
pub mod trainer;

pub use error::{Result, UolError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random generator used throughout. ChaCha output is stable across
/// platforms and crate releases, which the determinism guarantees rely on.
pub type Rng = ChaCha8Rng;

/// Seeded generator on a given stream; distinct streams are independent.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
