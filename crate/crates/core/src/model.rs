//! Causal embedding tables, scoring and top-K retrieval.
//!
//! Every user and item carries an interest vector and a conformity vector of
//! the same width `d`. The click score is the sum of the interest and
//! conformity inner products, which is the inner product of the
//! concatenated `2d` vectors.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{kind} index {index} out of range (have {len})")]
    IndexOutOfRange { kind: &'static str, index: u32, len: usize },
    #[error("asked for top {k} but only {available} candidates remain")]
    KTooLarge { k: usize, available: usize },
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
}

pub const USER_INTEREST: usize = 0;
pub const USER_CONFORMITY: usize = 1;
pub const ITEM_INTEREST: usize = 2;
pub const ITEM_CONFORMITY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    Full,
    InterestOnly,
    ConformityOnly,
}

impl ScoreVariant {
    pub fn short_name(self) -> &'static str {
        match self {
            ScoreVariant::Full => "full",
            ScoreVariant::InterestOnly => "int",
            ScoreVariant::ConformityOnly => "con",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(ScoreVariant::Full),
            "int" | "interest" | "interest_only" => Some(ScoreVariant::InterestOnly),
            "con" | "conformity" | "conformity_only" => Some(ScoreVariant::ConformityOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTriple {
    pub interest: f64,
    pub conformity: f64,
    pub click: f64,
}

/// Maps an entity to its interest and conformity representations.
///
/// This is the backbone seam: matrix factorization is a plain row lookup.
/// A graph backbone would compute these from propagated neighbourhoods.
pub trait RepresentationProvider {
    fn user_repr(&self, user: u32) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>);
    fn item_repr(&self, item: u32) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>);
}

/// The four embedding tables, indexed by [`USER_INTEREST`] and friends.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalEmbeddings {
    tables: [Array2<f64>; 4],
}

impl CausalEmbeddings {
    /// N(0, (0.1/sqrt(d))^2) entries, deterministic in `seed`.
    pub fn init(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Result<Self, ModelError> {
        if n_users == 0 || n_items == 0 || dim == 0 {
            return Err(ModelError::Dimensions(format!(
                "users={n_users}, items={n_items}, d={dim} must all be >= 1"
            )));
        }
        let std = 0.1 / (dim as f64).sqrt();
        let shapes = [n_users, n_users, n_items, n_items];
        let tables = std::array::from_fn(|t| gaussian_table(shapes[t], dim, std, seed, t as u64));
        Ok(Self { tables })
    }

    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        Self {
            tables: [
                Array2::zeros((n_users, dim)),
                Array2::zeros((n_users, dim)),
                Array2::zeros((n_items, dim)),
                Array2::zeros((n_items, dim)),
            ],
        }
    }

    pub fn from_tables(tables: [Array2<f64>; 4]) -> Result<Self, ModelError> {
        let d = tables[0].ncols();
        if tables.iter().any(|t| t.ncols() != d)
            || tables[0].nrows() != tables[1].nrows()
            || tables[2].nrows() != tables[3].nrows()
        {
            return Err(ModelError::Dimensions("table shapes disagree".into()));
        }
        Ok(Self { tables })
    }

    pub fn n_users(&self) -> usize {
        self.tables[USER_INTEREST].nrows()
    }

    pub fn n_items(&self) -> usize {
        self.tables[ITEM_INTEREST].nrows()
    }

    /// Per-cause width `d`.
    pub fn dim(&self) -> usize {
        self.tables[0].ncols()
    }

    pub fn tables(&self) -> &[Array2<f64>; 4] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Array2<f64>; 4] {
        &mut self.tables
    }

    pub fn into_tables(self) -> [Array2<f64>; 4] {
        self.tables
    }

    pub fn user_interest(&self) -> &Array2<f64> {
        &self.tables[USER_INTEREST]
    }

    pub fn user_conformity(&self) -> &Array2<f64> {
        &self.tables[USER_CONFORMITY]
    }

    pub fn item_interest(&self) -> &Array2<f64> {
        &self.tables[ITEM_INTEREST]
    }

    pub fn item_conformity(&self) -> &Array2<f64> {
        &self.tables[ITEM_CONFORMITY]
    }

    /// Concatenated `[interest | conformity]` vector of a user.
    pub fn user_concat(&self, user: u32) -> Vec<f64> {
        let (a, b) = self.user_repr(user);
        a.iter().chain(b.iter()).copied().collect()
    }

    pub fn item_concat(&self, item: u32) -> Vec<f64> {
        let (a, b) = self.item_repr(item);
        a.iter().chain(b.iter()).copied().collect()
    }

    fn check(&self, user: u32, item: u32) -> Result<(), ModelError> {
        if user as usize >= self.n_users() {
            return Err(ModelError::IndexOutOfRange {
                kind: "user",
                index: user,
                len: self.n_users(),
            });
        }
        if item as usize >= self.n_items() {
            return Err(ModelError::IndexOutOfRange {
                kind: "item",
                index: item,
                len: self.n_items(),
            });
        }
        Ok(())
    }

    pub fn score(&self, user: u32, item: u32) -> Result<ScoreTriple, ModelError> {
        self.check(user, item)?;
        let (ui, uc) = self.user_repr(user);
        let (ii, ic) = self.item_repr(item);
        let interest = ui.dot(&ii);
        let conformity = uc.dot(&ic);
        Ok(ScoreTriple {
            interest,
            conformity,
            click: interest + conformity,
        })
    }

    pub fn score_variant(&self, user: u32, item: u32, variant: ScoreVariant) -> Result<f64, ModelError> {
        let s = self.score(user, item)?;
        Ok(match variant {
            ScoreVariant::Full => s.click,
            ScoreVariant::InterestOnly => s.interest,
            ScoreVariant::ConformityOnly => s.conformity,
        })
    }

    /// Scores every item for `user` under `variant`.
    pub fn score_all(&self, user: u32, variant: ScoreVariant, out: &mut [f64]) {
        let (ui, uc) = self.user_repr(user);
        let int = || self.tables[ITEM_INTEREST].dot(&ui);
        let con = || self.tables[ITEM_CONFORMITY].dot(&uc);
        match variant {
            ScoreVariant::Full => {
                let (a, b) = (int(), con());
                for ((o, x), y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *o = x + y;
                }
            }
            ScoreVariant::InterestOnly => out.iter_mut().zip(int().iter()).for_each(|(o, x)| *o = *x),
            ScoreVariant::ConformityOnly => out.iter_mut().zip(con().iter()).for_each(|(o, x)| *o = *x),
        }
    }

    /// Top-`k` non-excluded items for `user`; `exclude` must be sorted.
    pub fn rank_all_items(
        &self,
        user: u32,
        exclude: &[u32],
        variant: ScoreVariant,
        k: usize,
    ) -> Result<Vec<u32>, ModelError> {
        self.check(user, 0)?;
        let mut scores = vec![0.0; self.n_items()];
        self.score_all(user, variant, &mut scores);
        top_k(&scores, exclude, k)
    }

    /// Multiplies every table by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            tables: self.tables.clone().map(|t| t * factor),
        }
    }

    /// Writes the embedding CSV: `kind,id,cause,d,v0..v{d-1}`, users first,
    /// interest before conformity.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let d = self.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["kind".to_string(), "id".into(), "cause".into(), "d".into()];
        header.extend((0..d).map(|k| format!("v{k}")));
        out.write_record(&header)?;
        let groups = [
            ("user", "interest", USER_INTEREST),
            ("user", "conformity", USER_CONFORMITY),
            ("item", "interest", ITEM_INTEREST),
            ("item", "conformity", ITEM_CONFORMITY),
        ];
        for (kind, cause, t) in groups {
            for (id, row) in self.tables[t].rows().into_iter().enumerate() {
                let mut rec = vec![kind.to_string(), id.to_string(), cause.to_string(), d.to_string()];
                rec.extend(row.iter().map(|x| x.to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

impl RepresentationProvider for CausalEmbeddings {
    fn user_repr(&self, user: u32) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        let u = user as usize;
        (self.tables[USER_INTEREST].row(u), self.tables[USER_CONFORMITY].row(u))
    }

    fn item_repr(&self, item: u32) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        let i = item as usize;
        (self.tables[ITEM_INTEREST].row(i), self.tables[ITEM_CONFORMITY].row(i))
    }
}

/// `rows x dim` table of i.i.d. N(0, std^2) draws from stream `(seed, tag)`.
pub fn gaussian_table(rows: usize, dim: usize, std: f64, seed: u64, tag: u64) -> Array2<f64> {
    let mut rng = rng::seeded(seed, &[rng::STREAM_INIT, tag]);
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, dim), || normal.sample(&mut rng))
}

/// Descending by score, ties by ascending index.
pub fn rank_order(scores: &[f64], a: u32, b: u32) -> Ordering {
    scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b))
}

/// The `k` best non-excluded indices of `scores`; `exclude` must be sorted.
pub fn top_k(scores: &[f64], exclude: &[u32], k: usize) -> Result<Vec<u32>, ModelError> {
    let mut candidates: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    if k > candidates.len() {
        return Err(ModelError::KTooLarge {
            k,
            available: candidates.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(candidates)
}

/// Anything that can score the full catalog for one user.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn score_items(&self, user: u32, out: &mut [f64]);
}

/// A [`CausalEmbeddings`] table viewed through one scoring variant.
pub struct VariantScorer<'a> {
    pub embeddings: &'a CausalEmbeddings,
    pub variant: ScoreVariant,
}

impl Scorer for VariantScorer<'_> {
    fn n_items(&self) -> usize {
        self.embeddings.n_items()
    }

    fn score_items(&self, user: u32, out: &mut [f64]) {
        self.embeddings.score_all(user, self.variant, out)
    }
}
