//! Order labels and the two batch samplers.
//!
//! [`select_hard_triplets`] builds one triplet per anchor whose two distances
//! to the anchor are as close as possible without being equal.
//! [`select_balanced_pairs`] pairs every instance with up to `N` partners,
//! giving the "approximately equal" candidates a third of the selection mass so
//! that roughly a third of the pairs in a batch are `Approx`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UolError};
use crate::Rng;

/// Default order threshold on the score scale.
pub const DEFAULT_THETA: f64 = 0.2;

/// Slack that keeps the `|y_i - y_j| <= theta` boundary inclusive for decimal
/// inputs such as `3.2 - 3.0`.
const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderRelation {
    Less,
    Approx,
    Greater,
}

impl OrderRelation {
    /// Position in the one-hot classification target: `Approx` 0, `Less` 1,
    /// `Greater` 2.
    pub fn one_hot_index(self) -> usize {
        match self {
            OrderRelation::Approx => 0,
            OrderRelation::Less => 1,
            OrderRelation::Greater => 2,
        }
    }

    pub fn from_one_hot_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(OrderRelation::Approx),
            1 => Some(OrderRelation::Less),
            2 => Some(OrderRelation::Greater),
            _ => None,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.one_hot_index()] = 1.0;
        v
    }

    /// Ordinal used by the Bradley-Terry model: `Less` 0, `Approx` 1,
    /// `Greater` 2.
    pub fn bt_ordinal(self) -> usize {
        match self {
            OrderRelation::Less => 0,
            OrderRelation::Approx => 1,
            OrderRelation::Greater => 2,
        }
    }

    pub fn from_bt_ordinal(ordinal: usize) -> Option<Self> {
        match ordinal {
            0 => Some(OrderRelation::Less),
            1 => Some(OrderRelation::Approx),
            2 => Some(OrderRelation::Greater),
            _ => None,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            OrderRelation::Less => OrderRelation::Greater,
            OrderRelation::Approx => OrderRelation::Approx,
            OrderRelation::Greater => OrderRelation::Less,
        }
    }
}

/// Relation of `y_i` to `y_j` under threshold `theta` (inclusive).
pub fn encode_order(y_i: f64, y_j: f64, theta: f64) -> Result<OrderRelation> {
    if !(y_i.is_finite() && y_j.is_finite()) {
        return Err(UolError::InvalidArgument(format!("non-finite scores ({y_i}, {y_j})")));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(UolError::InvalidArgument(format!("theta must be > 0, got {theta}")));
    }
    let diff = y_i - y_j;
    let slack = THRESHOLD_SLACK * theta.max(1.0);
    Ok(if diff.abs() <= theta + slack {
        OrderRelation::Approx
    } else if diff < 0.0 {
        OrderRelation::Less
    } else {
        OrderRelation::Greater
    })
}

/// Indices into a batch: anchor `l`, second element `m`, third element `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

impl Triplet {
    /// Swaps `m` and `n` when needed so that `|y_l - y_m| < |y_l - y_n|`,
    /// the orientation the ordinal hinge loss expects. The hard-triplet rule
    /// only guarantees the two distances differ, not which one is smaller.
    pub fn oriented(self, scores: &[f64]) -> Self {
        let dm = (scores[self.l] - scores[self.m]).abs();
        let dn = (scores[self.l] - scores[self.n]).abs();
        if dm < dn {
            self
        } else {
            Self { l: self.l, m: self.n, n: self.m }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSelection {
    pub triplets: Vec<Triplet>,
    /// Anchors for which every candidate tied with the second element.
    pub dropped: usize,
}

/// One hard triplet per anchor `i`: `m = (i + 1) mod M` and `n` minimizes
/// `||y_l - y_m| - |y_l - y_n||` over the remaining indices, excluding exact
/// ties. The first minimizer wins.
pub fn select_hard_triplets(scores: &[f64]) -> Result<TripletSelection> {
    let count = scores.len();
    if count < 3 {
        return Err(UolError::InvalidArgument(format!(
            "hard triplets need at least 3 instances, got {count}"
        )));
    }
    let mut triplets = Vec::with_capacity(count);
    let mut dropped = 0;
    for l in 0..count {
        let m = (l + 1) % count;
        let anchor_gap = (scores[l] - scores[m]).abs();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..count {
            if j == l || j == m {
                continue;
            }
            let gap = ((scores[l] - scores[j]).abs() - anchor_gap).abs();
            if gap != 0.0 && best.is_none_or(|(_, b)| gap < b) {
                best = Some((j, gap));
            }
        }
        match best {
            Some((n, _)) => triplets.push(Triplet { l, m, n }),
            None => dropped += 1,
        }
    }
    Ok(TripletSelection { triplets, dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub relation: OrderRelation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    pub pairs: Vec<Pair>,
    /// Partners of every instance, recorded symmetrically.
    pub partners: Vec<Vec<usize>>,
}

impl PairSelection {
    pub fn approx_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let approx = self.pairs.iter().filter(|p| p.relation == OrderRelation::Approx).count();
        approx as f64 / self.pairs.len() as f64
    }
}

/// Balanced pair sampler.
///
/// For each anchor in turn, the candidates are every other instance not yet
/// paired with it and not already holding `cap` partners. While the anchor
/// has fewer than `cap` partners, one candidate is drawn: the candidates closer
/// than `theta` share probability 1/3 and the rest share 2/3 (all mass goes to
/// the non-empty group when one group is empty).
pub fn select_balanced_pairs(scores: &[f64], cap: usize, theta: f64, rng: &mut Rng) -> Result<PairSelection> {
    let count = scores.len();
    if count < 2 {
        return Err(UolError::InvalidArgument(format!("pairs need at least 2 instances, got {count}")));
    }
    if cap == 0 {
        return Err(UolError::InvalidArgument("pair cap must be >= 1".into()));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(UolError::InvalidArgument(format!("theta must be > 0, got {theta}")));
    }
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); count];
    let mut pairs = Vec::new();
    let mut weights = Vec::with_capacity(count);
    for i in 0..count {
        let mut candidates: Vec<usize> = (0..count)
            .filter(|&j| j != i && !partners[i].contains(&j) && partners[j].len() < cap)
            .collect();
        while partners[i].len() < cap && !candidates.is_empty() {
            let is_similar = |j: usize| (scores[i] - scores[j]).abs() < theta;
            let similar = candidates.iter().filter(|&&j| is_similar(j)).count();
            let dissimilar = candidates.len() - similar;
            let (p_similar, p_dissimilar) = match (similar, dissimilar) {
                (0, d) => (0.0, 1.0 / d as f64),
                (s, 0) => (1.0 / s as f64, 0.0),
                (s, d) => (1.0 / (3.0 * s as f64), 2.0 / (3.0 * d as f64)),
            };
            weights.clear();
            weights.extend(
                candidates.iter().map(|&j| if is_similar(j) { p_similar } else { p_dissimilar }),
            );
            let pick = draw_weighted(&weights, rng);
            let r = candidates.remove(pick);
            partners[i].push(r);
            partners[r].push(i);
            pairs.push(Pair { i, j: r, relation: encode_order(scores[i], scores[r], theta)? });
        }
    }
    Ok(PairSelection { pairs, partners })
}

/// Index drawn with probability proportional to `weights`.
fn draw_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return k;
        }
    }
    // rounding left the target at the very end
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn encode_order_examples() {
        assert_eq!(encode_order(3.0, 3.1, 0.2).unwrap(), OrderRelation::Approx);
        assert_eq!(encode_order(2.0, 3.0, 0.2).unwrap(), OrderRelation::Less);
        assert_eq!(encode_order(3.5, 3.0, 0.2).unwrap(), OrderRelation::Greater);
        assert_eq!(encode_order(3.2, 3.0, 0.2).unwrap(), OrderRelation::Approx);
        assert_eq!(encode_order(2.8, 3.0, 0.2).unwrap(), OrderRelation::Approx);
        assert!(encode_order(f64::NAN, 3.0, 0.2).is_err());
        assert!(encode_order(3.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn encode_order_exhaustive_grid() {
        // integer re-statement: scores are 1 + a/100, theta is 20 steps
        for a in 0..=400i64 {
            for b in 0..=400i64 {
                let expected = if (a - b).abs() <= 20 {
                    OrderRelation::Approx
                } else if a < b {
                    OrderRelation::Less
                } else {
                    OrderRelation::Greater
                };
                let ya = 1.0 + a as f64 * 0.01;
                let yb = 1.0 + b as f64 * 0.01;
                assert_eq!(encode_order(ya, yb, 0.2).unwrap(), expected, "({ya}, {yb})");
            }
        }
    }

    #[test]
    fn label_encodings_are_bijective() {
        for r in [OrderRelation::Less, OrderRelation::Approx, OrderRelation::Greater] {
            assert_eq!(OrderRelation::from_one_hot_index(r.one_hot_index()), Some(r));
            assert_eq!(OrderRelation::from_bt_ordinal(r.bt_ordinal()), Some(r));
            assert_eq!(r.one_hot().iter().sum::<f64>(), 1.0);
        }
        assert_eq!(OrderRelation::Approx.one_hot(), [1.0, 0.0, 0.0]);
        assert_eq!(OrderRelation::Less.one_hot(), [0.0, 1.0, 0.0]);
        assert_eq!(OrderRelation::Greater.one_hot(), [0.0, 0.0, 1.0]);
        assert_eq!(OrderRelation::Less.bt_ordinal(), 0);
        assert_eq!(OrderRelation::Greater.bt_ordinal(), 2);
    }

    #[test]
    fn hard_triplet_hand_trace() {
        let sel = select_hard_triplets(&[1.0, 2.0, 3.0, 4.5]).unwrap();
        assert_eq!(sel.triplets.len(), 4);
        assert_eq!(sel.dropped, 0);
        assert_eq!(sel.triplets[0], Triplet { l: 0, m: 1, n: 2 });
        // anchor 3 wraps to m = 0
        assert_eq!(sel.triplets[3].m, 0);
    }

    #[test]
    fn hard_triplets_drop_fully_tied_anchors() {
        let sel = select_hard_triplets(&[2.0, 2.0, 2.0]).unwrap();
        assert!(sel.triplets.is_empty());
        assert_eq!(sel.dropped, 3);
        assert!(select_hard_triplets(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn orientation_makes_m_the_closer_element() {
        let scores = [3.0, 3.5, 3.2];
        let t = Triplet { l: 0, m: 1, n: 2 }.oriented(&scores);
        assert_eq!(t, Triplet { l: 0, m: 2, n: 1 });
        assert_eq!(t.oriented(&scores), t);
    }

    #[test]
    fn equal_scores_pair_as_approx_within_cap() {
        let scores = [3.0; 10];
        let sel = select_balanced_pairs(&scores, 4, 0.2, &mut seeded_rng(1, 0)).unwrap();
        assert!(!sel.pairs.is_empty());
        assert!(sel.pairs.iter().all(|p| p.relation == OrderRelation::Approx));
        assert!(sel.partners.iter().all(|p| p.len() <= 4));
    }

    #[test]
    fn pairs_are_symmetric_and_unique() {
        let mut rng = seeded_rng(4, 0);
        let scores: Vec<f64> = (0..32).map(|_| rng.random_range(1.0..5.0)).collect();
        let sel = select_balanced_pairs(&scores, 4, 0.2, &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in &sel.pairs {
            assert_ne!(p.i, p.j);
            assert!(sel.partners[p.i].contains(&p.j));
            assert!(sel.partners[p.j].contains(&p.i));
            assert!(seen.insert((p.i.min(p.j), p.i.max(p.j))));
            assert_eq!(p.relation, encode_order(scores[p.i], scores[p.j], 0.2).unwrap());
        }
        assert!(sel.partners.iter().all(|p| p.len() <= 4));
    }

    #[test]
    fn similar_candidates_get_a_third_of_the_mass() {
        // one similar candidate among many: it should be drawn first about 1/3
        // of the time for anchor 0 with cap 1
        let mut scores = vec![3.0, 3.1];
        scores.extend((0..20).map(|k| 1.0 + 0.1 * k as f64 / 20.0));
        let trials = 3000;
        let mut hits = 0;
        for seed in 0..trials {
            let sel = select_balanced_pairs(&scores, 1, 0.2, &mut seeded_rng(seed, 0)).unwrap();
            if sel.pairs[0].j == 1 {
                hits += 1;
            }
        }
        let frac = hits as f64 / trials as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.03, "{frac}");
    }

    #[test]
    fn draw_weighted_respects_zero_weights() {
        let mut rng = seeded_rng(0, 0);
        for _ in 0..1000 {
            let k = draw_weighted(&[0.0, 1.0, 0.0, 2.0], &mut rng);
            assert!(k == 1 || k == 3);
        }
    }
}
