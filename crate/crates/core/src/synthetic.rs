//! Synthetic implicit-feedback generators used by tests, benches and the
//! `prepare` command.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, Interaction, InteractionTable};
use crate::rng;

/// Users pick a fixed number of distinct items from a Zipf law over item rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZipfSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub items_per_user: usize,
    pub exponent: f64,
}

impl Default for ZipfSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl ZipfSpec {
    pub fn small() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            items_per_user: 10,
            exponent: 1.0,
        }
    }

    /// 2,000 users, 500 items, 50 interactions each.
    pub fn standard() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            items_per_user: 50,
            exponent: 1.0,
        }
    }
}

pub fn zipf_table(spec: &ZipfSpec, seed: u64) -> Result<InteractionTable, DatasetError> {
    let mut rng = rng::seeded(seed, &[rng::STREAM_SYNTH, 0]);
    let mut item_of_rank: Vec<u32> = (0..spec.n_items as u32).collect();
    item_of_rank.shuffle(&mut rng);
    let zipf = Zipf::new(spec.n_items as f64, spec.exponent).expect("valid zipf parameters");
    let per_user = spec.items_per_user.min(spec.n_items);

    let mut records = Vec::with_capacity(spec.n_users * per_user);
    let mut picked = vec![false; spec.n_items];
    for user in 0..spec.n_users as u32 {
        let mut chosen = Vec::with_capacity(per_user);
        while chosen.len() < per_user {
            let rank = zipf.sample(&mut rng) as usize - 1;
            if !picked[rank] {
                picked[rank] = true;
                chosen.push(rank);
            }
        }
        for rank in chosen {
            picked[rank] = false;
            records.push(Interaction::new(user, item_of_rank[rank]));
        }
    }
    InteractionTable::from_indexed(spec.n_users, spec.n_items, records)
}

/// Clicks generated from planted interest and conformity factors:
/// `P(click) = logistic(scale * <a_u, b_i> + c_u * ln q_i + offset)` where
/// `q_i = rank_i^-exponent` is the item's latent popularity and `c_u > 0` the
/// user's conformity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub interest_scale: f64,
    pub conformity_mean: f64,
    pub conformity_spread: f64,
    pub popularity_exponent: f64,
    /// Expected fraction of (user, item) pairs that are clicked.
    pub density: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 1000,
            latent_dim: 8,
            interest_scale: 2.0,
            conformity_mean: 1.0,
            conformity_spread: 0.5,
            popularity_exponent: 1.0,
            density: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub table: InteractionTable,
    /// Latent popularity rank of each item (0 = most popular).
    pub item_rank: Vec<usize>,
    pub user_conformity: Vec<f64>,
    pub offset: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn planted_table(spec: &PlantedSpec, seed: u64) -> Result<PlantedData, DatasetError> {
    let mut rng = rng::seeded(seed, &[rng::STREAM_SYNTH, 1]);
    let k = spec.latent_dim.max(1);
    let normal = Normal::new(0.0, 1.0 / (k as f64).sqrt()).unwrap();
    let user_factors: Vec<Vec<f64>> = (0..spec.n_users)
        .map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let item_factors: Vec<Vec<f64>> = (0..spec.n_items)
        .map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut item_rank: Vec<usize> = (0..spec.n_items).collect();
    item_rank.shuffle(&mut rng);
    let user_conformity: Vec<f64> = (0..spec.n_users)
        .map(|_| {
            let c = spec.conformity_mean + spec.conformity_spread * (2.0 * rng.random::<f64>() - 1.0);
            c.max(0.0)
        })
        .collect();

    let log_q: Vec<f64> = item_rank
        .iter()
        .map(|&r| -spec.popularity_exponent * ((r + 1) as f64).ln())
        .collect();
    let mut logits = Vec::with_capacity(spec.n_users * spec.n_items);
    for u in 0..spec.n_users {
        for i in 0..spec.n_items {
            let dot: f64 = user_factors[u].iter().zip(&item_factors[i]).map(|(a, b)| a * b).sum();
            logits.push(spec.interest_scale * dot + user_conformity[u] * log_q[i]);
        }
    }

    // offset such that the mean click probability equals the target density
    let density = |off: f64| logits.iter().map(|&l| logistic(l + off)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if density(mid) < spec.density {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let offset = 0.5 * (lo + hi);

    let mut records = Vec::new();
    for u in 0..spec.n_users {
        for i in 0..spec.n_items {
            if rng.random::<f64>() < logistic(logits[u * spec.n_items + i] + offset) {
                records.push(Interaction::new(u as u32, i as u32));
            }
        }
    }
    let table = InteractionTable::from_indexed(spec.n_users, spec.n_items, records)?;
    Ok(PlantedData {
        table,
        item_rank,
        user_conformity,
        offset,
    })
}
