//! Observed/unobserved partition of intersections and the views available to
//! agents at unobserved intersections.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ObservationError, SimError};
use crate::road_network::{IntersectionId, RoadNetwork};
use crate::traffic_sim::{SimState, StateVector};

const MAX_MASK_ATTEMPTS: usize = 10_000;

/// Width of the concatenated neighbor view: four arms of one state vector each.
pub const NEIGHBOR_CONCAT_DIM: usize = 4 * StateVector::DIM;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    observed: BTreeSet<IntersectionId>,
    unobserved: BTreeSet<IntersectionId>,
}

impl ObservationMask {
    pub fn all_observed(n: usize) -> Self {
        Self { observed: (0..n).collect(), unobserved: BTreeSet::new() }
    }

    pub fn from_unobserved(n: usize, unobserved: impl IntoIterator<Item = IntersectionId>) -> Result<Self, ObservationError> {
        let unobserved: BTreeSet<_> = unobserved.into_iter().collect();
        if let Some(&bad) = unobserved.iter().find(|&&k| k >= n) {
            return Err(ObservationError::UnknownIntersection(bad));
        }
        let observed = (0..n).filter(|i| !unobserved.contains(i)).collect();
        Ok(Self { observed, unobserved })
    }

    pub fn observed(&self) -> &BTreeSet<IntersectionId> {
        &self.observed
    }

    pub fn unobserved(&self) -> &BTreeSet<IntersectionId> {
        &self.unobserved
    }

    pub fn is_observed(&self, i: IntersectionId) -> bool {
        self.observed.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.observed.len() + self.unobserved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_rate(&self) -> f64 {
        self.unobserved.len() as f64 / self.len() as f64
    }

    /// True if some pair of unobserved intersections are grid neighbors.
    pub fn has_adjacent_unobserved(&self, net: &RoadNetwork) -> bool {
        self.unobserved
            .iter()
            .any(|&a| self.unobserved.iter().any(|&b| a < b && net.are_adjacent(a, b)))
    }
}

/// Uniformly samples `n_missing` unobserved intersections.
///
/// With `allow_adjacent == false` no two unobserved intersections may be
/// neighbors; with `true` and `n_missing >= 2` at least one adjacent pair is
/// required. Both constraints are met by rejection sampling.
pub fn sample_mask(net: &RoadNetwork, n_missing: usize, allow_adjacent: bool, seed: u64) -> Result<ObservationMask, ObservationError> {
    let n = net.num_intersections();
    if n_missing >= n {
        return Err(ObservationError::TooManyMissing { n_missing, total: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_MASK_ATTEMPTS {
        let chosen = sample(&mut rng, n, n_missing).into_iter();
        let mask = ObservationMask::from_unobserved(n, chosen)?;
        let adjacent = mask.has_adjacent_unobserved(net);
        let ok = if allow_adjacent { n_missing < 2 || adjacent } else { !adjacent };
        if ok {
            return Ok(mask);
        }
    }
    Err(ObservationError::Infeasible { n_missing, allow_adjacent, attempts: MAX_MASK_ATTEMPTS })
}

fn require_unobserved(mask: &ObservationMask, k: IntersectionId) -> Result<(), ObservationError> {
    if k >= mask.len() {
        return Err(ObservationError::UnknownIntersection(k));
    }
    if mask.is_observed(k) {
        return Err(ObservationError::Misuse(k));
    }
    Ok(())
}

/// State vectors of `k`'s four arms in `[N, E, S, W]` order; absent arms and
/// unobserved neighbors contribute zeros.
pub fn neighbor_concat_state(state: &SimState, net: &RoadNetwork, mask: &ObservationMask, k: IntersectionId) -> Result<Vec<f64>, ObservationError> {
    require_unobserved(mask, k)?;
    let mut out = Vec::with_capacity(NEIGHBOR_CONCAT_DIM);
    for arm in net.intersections[k].arms {
        match arm.filter(|&j| mask.is_observed(j)) {
            Some(j) => state
                .local_state(net, j)
                .map_err(|_: SimError| ObservationError::UnknownIntersection(j))?
                .write_features(&mut out),
            None => out.extend_from_slice(&[0.0; StateVector::DIM]),
        }
    }
    Ok(out)
}

/// Sum of the local rewards of `k`'s observed neighbors.
pub fn neighbor_reward_sum(state: &SimState, net: &RoadNetwork, mask: &ObservationMask, k: IntersectionId) -> Result<f64, ObservationError> {
    require_unobserved(mask, k)?;
    let mut total = 0.0;
    for j in net.intersections[k].neighbors() {
        if mask.is_observed(j) {
            total += state.local_reward(net, j).map_err(|_| ObservationError::UnknownIntersection(j))?;
        }
    }
    Ok(total)
}
