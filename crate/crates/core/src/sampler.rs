//! Popularity-based negative sampling with margin (PNSM).
//!
//! For a positive item with popularity `p`, negatives are drawn uniformly
//! from the items with popularity above `p + m_up` (case O2: the negative is
//! more popular) or below `p - m_down` (case O1: the negative is less
//! popular). Items are kept sorted by popularity so each eligible set is a
//! contiguous range.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Interaction, UserItems};
use crate::{par, rng};

/// Rejection retries inside the eligible ranges before falling back to
/// uniform sampling over all unseen items.
pub const MAX_PNSM_RETRIES: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("user {user} has interacted with every item; no negative exists")]
    NoNegative { user: u32 },
    #[error("invalid sampler config: {0}")]
    Config(String),
}

/// Which inequality set a triplet supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    /// Negative less popular than the positive.
    O1,
    /// Negative more popular than the positive.
    O2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
    pub case: Case,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Pnsm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub m_up: f64,
    pub m_down: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.m_up >= 0.0 && self.m_down >= 0.0) {
            return Err(SamplerError::Config(format!(
                "margins must be >= 0 (m_up = {}, m_down = {})",
                self.m_up, self.m_down
            )));
        }
        Ok(())
    }
}

/// Default margin: a tenth of the popularity span.
pub fn default_margin(popularity: &[u32]) -> f64 {
    match (popularity.iter().max(), popularity.iter().min()) {
        (Some(&max), Some(&min)) => 0.1 * (max - min) as f64,
        _ => 0.0,
    }
}

/// Items sorted ascending by popularity (ties by index).
#[derive(Debug, Clone)]
pub struct PopularityIndex {
    popularity: Vec<u32>,
    sorted_items: Vec<u32>,
    sorted_pop: Vec<u32>,
}

impl PopularityIndex {
    pub fn new(popularity: &[u32]) -> Self {
        let mut sorted_items: Vec<u32> = (0..popularity.len() as u32).collect();
        sorted_items.sort_by_key(|&i| (popularity[i as usize], i));
        let sorted_pop = sorted_items.iter().map(|&i| popularity[i as usize]).collect();
        Self {
            popularity: popularity.to_vec(),
            sorted_items,
            sorted_pop,
        }
    }

    pub fn n_items(&self) -> usize {
        self.popularity.len()
    }

    pub fn popularity(&self, item: u32) -> u32 {
        self.popularity[item as usize]
    }

    pub fn sorted_items(&self) -> &[u32] {
        &self.sorted_items
    }

    /// Items with popularity strictly greater than `t`.
    pub fn above(&self, t: f64) -> &[u32] {
        let start = self.sorted_pop.partition_point(|&p| p as f64 <= t);
        &self.sorted_items[start..]
    }

    /// Items with popularity strictly less than `t`.
    pub fn below(&self, t: f64) -> &[u32] {
        let end = self.sorted_pop.partition_point(|&p| (p as f64) < t);
        &self.sorted_items[..end]
    }

    /// Eligible (below, above) ranges for a positive item.
    pub fn eligible(&self, pos: u32, m_up: f64, m_down: f64) -> (&[u32], &[u32]) {
        let p = self.popularity(pos) as f64;
        (self.below(p - m_down), self.above(p + m_up))
    }

    fn case_by_sign(&self, pos: u32, neg: u32) -> Case {
        if self.popularity(neg) > self.popularity(pos) {
            Case::O2
        } else {
            Case::O1
        }
    }
}

fn uniform_unseen<R: rand::Rng>(user: u32, n_items: usize, seen: &UserItems, rng: &mut R) -> Option<u32> {
    let n_seen = seen.items(user).len();
    if n_seen >= n_items {
        return None;
    }
    // rejection is exactly uniform; enumerate when the user saw most items
    if n_seen * 2 <= n_items {
        loop {
            let i = rng.random_range(0..n_items as u32);
            if !seen.contains(user, i) {
                return Some(i);
            }
        }
    }
    let unseen: Vec<u32> = (0..n_items as u32).filter(|&i| !seen.contains(user, i)).collect();
    Some(unseen[rng.random_range(0..unseen.len())])
}

/// Draws one negative for `(user, pos)` under PNSM.
pub fn sample_negative_pnsm<R: rand::Rng>(
    user: u32,
    pos: u32,
    index: &PopularityIndex,
    seen: &UserItems,
    m_up: f64,
    m_down: f64,
    rng: &mut R,
) -> Result<(u32, Case), SamplerError> {
    let (below, above) = index.eligible(pos, m_up, m_down);
    let total = below.len() + above.len();
    if total > 0 {
        for _ in 0..MAX_PNSM_RETRIES {
            let k = rng.random_range(0..total);
            let (neg, case) = if k < below.len() {
                (below[k], Case::O1)
            } else {
                (above[k - below.len()], Case::O2)
            };
            if !seen.contains(user, neg) {
                return Ok((neg, case));
            }
        }
    }
    let neg = uniform_unseen(user, index.n_items(), seen, rng).ok_or(SamplerError::NoNegative { user })?;
    Ok((neg, index.case_by_sign(pos, neg)))
}

/// Draws one uniformly random unseen negative, tagged by popularity sign.
pub fn sample_negative_random<R: rand::Rng>(
    user: u32,
    pos: u32,
    index: &PopularityIndex,
    seen: &UserItems,
    rng: &mut R,
) -> Result<(u32, Case), SamplerError> {
    let neg = uniform_unseen(user, index.n_items(), seen, rng).ok_or(SamplerError::NoNegative { user })?;
    Ok((neg, index.case_by_sign(pos, neg)))
}

/// Emits `negatives_per_positive` triplets per record, then shuffles.
///
/// Record `k` draws from its own stream derived from `(cfg.seed, k)`, so the
/// output does not depend on how the records are spread over threads.
pub fn generate_epoch_triplets(
    records: &[Interaction],
    index: &PopularityIndex,
    seen: &UserItems,
    cfg: &SamplerConfig,
) -> Result<Vec<Triplet>, SamplerError> {
    cfg.validate()?;
    let per_record = par::map_range(records.len(), |k| {
        let r = records[k];
        let mut rng = rng::seeded(cfg.seed, &[rng::STREAM_SAMPLE, k as u64]);
        (0..cfg.negatives_per_positive)
            .map(|_| {
                let (neg, case) = match cfg.strategy {
                    Strategy::Pnsm => {
                        sample_negative_pnsm(r.user, r.item, index, seen, cfg.m_up, cfg.m_down, &mut rng)?
                    }
                    Strategy::Random => sample_negative_random(r.user, r.item, index, seen, &mut rng)?,
                };
                Ok(Triplet {
                    user: r.user,
                    pos: r.item,
                    neg,
                    case,
                })
            })
            .collect::<Result<Vec<_>, SamplerError>>()
    });
    let mut triplets = Vec::with_capacity(records.len() * cfg.negatives_per_positive);
    for chunk in per_record {
        triplets.extend(chunk?);
    }
    let mut rng = rng::seeded(cfg.seed, &[rng::STREAM_SHUFFLE]);
    triplets.shuffle(&mut rng);
    Ok(triplets)
}
