//! Rating ingestion, implicit-feedback binarization and the indexed
//! interaction table.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_RATING: f64 = 0.5;
pub const MAX_RATING: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("entropy is undefined for an all-zero count vector")]
    EmptyDistribution,
    #[error("record ({user}, {item}) is outside a {n_users}x{n_items} table")]
    OutOfRange {
        user: u32,
        item: u32,
        n_users: usize,
        n_items: usize,
    },
    #[error("invalid table cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One explicit rating as read from a ratings file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRating {
    pub user_tag: String,
    pub item_tag: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Column layout of a delimited ratings file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingFormat {
    pub delimiter: String,
    pub user_column: usize,
    pub item_column: usize,
    pub rating_column: usize,
    pub timestamp_column: Option<usize>,
    pub has_header: bool,
}

impl Default for RatingFormat {
    fn default() -> Self {
        Self::movielens()
    }
}

impl RatingFormat {
    /// `user::item::rating::timestamp`
    pub fn movielens() -> Self {
        Self {
            delimiter: "::".into(),
            user_column: 0,
            item_column: 1,
            rating_column: 2,
            timestamp_column: Some(3),
            has_header: false,
        }
    }

    /// `user,item,rating,timestamp` with a header line.
    pub fn csv() -> Self {
        Self {
            delimiter: ",".into(),
            has_header: true,
            ..Self::movielens()
        }
    }
}

/// Parses a line-oriented ratings stream. Blank lines are ignored.
pub fn parse_ratings<R: BufRead>(source: R, format: &RatingFormat) -> Result<Vec<RawRating>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (format.has_header && idx == 0) {
            continue;
        }
        out.push(parse_line(line, line_no, format)?);
    }
    Ok(out)
}

fn parse_line(line: &str, line_no: usize, format: &RatingFormat) -> Result<RawRating, DatasetError> {
    let fields: Vec<&str> = line.split(format.delimiter.as_str()).map(str::trim).collect();
    let err = |reason: String| DatasetError::Parse { line: line_no, reason };
    let field = |col: usize, name: &str| {
        fields
            .get(col)
            .copied()
            .ok_or_else(|| err(format!("missing {name} column {col}")))
    };

    let user_tag = field(format.user_column, "user")?;
    let item_tag = field(format.item_column, "item")?;
    if user_tag.is_empty() || item_tag.is_empty() {
        return Err(err("empty user or item identifier".into()));
    }
    let rating_text = field(format.rating_column, "rating")?;
    let rating: f64 = rating_text
        .parse()
        .map_err(|_| err(format!("rating {rating_text:?} is not a number")))?;
    if !(MIN_RATING..=MAX_RATING).contains(&rating) {
        return Err(err(format!("rating {rating} outside [{MIN_RATING}, {MAX_RATING}]")));
    }
    let timestamp = match format.timestamp_column {
        Some(col) => match fields.get(col) {
            Some(text) if !text.is_empty() => Some(
                text.parse()
                    .map_err(|_| err(format!("timestamp {text:?} is not an integer")))?,
            ),
            _ => None,
        },
        None => None,
    };

    Ok(RawRating {
        user_tag: user_tag.to_string(),
        item_tag: item_tag.to_string(),
        rating,
        timestamp,
    })
}

/// Keeps the ratings at or above `threshold` as positive interactions.
pub fn binarize(ratings: &[RawRating], threshold: f64) -> Vec<(String, String)> {
    ratings
        .iter()
        .filter(|r| r.rating >= threshold)
        .map(|r| (r.user_tag.clone(), r.item_tag.clone()))
        .collect()
}

/// A single (user, item) implicit-feedback record in dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Self { user, item }
    }
}

/// Deduplicated interactions with contiguous user/item indices and
/// per-item popularity counts.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTable {
    n_users: usize,
    n_items: usize,
    records: Vec<Interaction>,
    popularity: Vec<u32>,
    user_tags: Vec<String>,
    item_tags: Vec<String>,
    user_index: HashMap<String, u32>,
    item_index: HashMap<String, u32>,
}

impl InteractionTable {
    /// Assigns dense indices in first-appearance order and drops repeated
    /// (user, item) pairs, keeping the first occurrence.
    pub fn from_pairs<U, I>(pairs: impl IntoIterator<Item = (U, I)>) -> Self
    where
        U: AsRef<str>,
        I: AsRef<str>,
    {
        let mut user_tags = Vec::new();
        let mut item_tags = Vec::new();
        let mut user_index = HashMap::new();
        let mut item_index = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut records = Vec::new();

        for (u, i) in pairs {
            let user = intern(u.as_ref(), &mut user_index, &mut user_tags);
            let item = intern(i.as_ref(), &mut item_index, &mut item_tags);
            if seen.insert((user, item)) {
                records.push(Interaction { user, item });
            }
        }

        let popularity = popularity_counts(&records, item_tags.len());
        Self {
            n_users: user_tags.len(),
            n_items: item_tags.len(),
            records,
            popularity,
            user_tags,
            item_tags,
            user_index,
            item_index,
        }
    }

    /// Builds a table from already-indexed records. Tags are synthesized
    /// as the decimal index.
    pub fn from_indexed(
        n_users: usize,
        n_items: usize,
        records: impl IntoIterator<Item = Interaction>,
    ) -> Result<Self, DatasetError> {
        let mut seen = std::collections::HashSet::new();
        let mut kept = Vec::new();
        for r in records {
            if r.user as usize >= n_users || r.item as usize >= n_items {
                return Err(DatasetError::OutOfRange {
                    user: r.user,
                    item: r.item,
                    n_users,
                    n_items,
                });
            }
            if seen.insert(r) {
                kept.push(r);
            }
        }
        let user_tags: Vec<String> = (0..n_users).map(|u| u.to_string()).collect();
        let item_tags: Vec<String> = (0..n_items).map(|i| i.to_string()).collect();
        Ok(Self::assemble(n_users, n_items, kept, user_tags, item_tags))
    }

    fn assemble(
        n_users: usize,
        n_items: usize,
        records: Vec<Interaction>,
        user_tags: Vec<String>,
        item_tags: Vec<String>,
    ) -> Self {
        let popularity = popularity_counts(&records, n_items);
        let user_index = index_of(&user_tags);
        let item_index = index_of(&item_tags);
        Self {
            n_users,
            n_items,
            records,
            popularity,
            user_tags,
            item_tags,
            user_index,
            item_index,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn popularity(&self) -> &[u32] {
        &self.popularity
    }

    pub fn user_tag(&self, user: u32) -> Option<&str> {
        self.user_tags.get(user as usize).map(String::as_str)
    }

    pub fn item_tag(&self, item: u32) -> Option<&str> {
        self.item_tags.get(item as usize).map(String::as_str)
    }

    pub fn user_of(&self, tag: &str) -> Option<u32> {
        self.user_index.get(tag).copied()
    }

    pub fn item_of(&self, tag: &str) -> Option<u32> {
        self.item_index.get(tag).copied()
    }

    /// Re-emits the records with their external tags.
    pub fn tagged_pairs(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.records.iter().map(move |r| {
            (
                self.user_tags[r.user as usize].as_str(),
                self.item_tags[r.item as usize].as_str(),
            )
        })
    }

    /// Writes the binary cache (see README for the layout).
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_users as u64).to_le_bytes())?;
        w.write_all(&(self.n_items as u64).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.user.to_le_bytes())?;
            w.write_all(&r.item.to_le_bytes())?;
        }
        for tag in self.user_tags.iter().chain(&self.item_tags) {
            w.write_all(&(tag.len() as u32).to_le_bytes())?;
            w.write_all(tag.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(DatasetError::Cache("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(DatasetError::Cache(format!("unsupported version {version}")));
        }
        let n_users = read_u64(&mut r)? as usize;
        let n_items = read_u64(&mut r)? as usize;
        let n_records = read_u64(&mut r)? as usize;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let user = read_u32(&mut r)?;
            let item = read_u32(&mut r)?;
            if user as usize >= n_users || item as usize >= n_items {
                return Err(DatasetError::Cache(format!("record ({user}, {item}) out of range")));
            }
            records.push(Interaction { user, item });
        }
        let mut read_tags = |n: usize| -> Result<Vec<String>, DatasetError> {
            (0..n)
                .map(|_| {
                    let len = read_u32(&mut r)? as usize;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)?;
                    String::from_utf8(buf).map_err(|e| DatasetError::Cache(e.to_string()))
                })
                .collect()
        };
        let user_tags = read_tags(n_users)?;
        let item_tags = read_tags(n_items)?;
        Ok(Self::assemble(n_users, n_items, records, user_tags, item_tags))
    }
}

const CACHE_MAGIC: &[u8; 8] = b"DICETBL\0";
const CACHE_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn intern(tag: &str, index: &mut HashMap<String, u32>, tags: &mut Vec<String>) -> u32 {
    if let Some(&id) = index.get(tag) {
        return id;
    }
    let id = tags.len() as u32;
    tags.push(tag.to_string());
    index.insert(tag.to_string(), id);
    id
}

fn index_of(tags: &[String]) -> HashMap<String, u32> {
    tags.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect()
}

/// Per-item interaction counts over `records`.
pub fn popularity_counts(records: &[Interaction], n_items: usize) -> Vec<u32> {
    let mut counts = vec![0u32; n_items];
    for r in records {
        counts[r.item as usize] += 1;
    }
    counts
}

/// Shannon entropy (nats) of the item distribution implied by `popularity`.
pub fn interaction_entropy(popularity: &[u32]) -> Result<f64, DatasetError> {
    let total: u64 = popularity.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return Err(DatasetError::EmptyDistribution);
    }
    let total = total as f64;
    Ok(popularity
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total;
            -q * q.ln()
        })
        .sum())
}

/// Per-user sorted item lists, for membership tests during sampling and
/// candidate exclusion during evaluation.
#[derive(Debug, Clone, Default)]
pub struct UserItems {
    items: Vec<Vec<u32>>,
}

impl UserItems {
    pub fn new<'a>(n_users: usize, records: impl IntoIterator<Item = &'a Interaction>) -> Self {
        let mut items = vec![Vec::new(); n_users];
        for r in records {
            items[r.user as usize].push(r.item);
        }
        for list in &mut items {
            list.sort_unstable();
            list.dedup();
        }
        Self { items }
    }

    pub fn n_users(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self, user: u32) -> &[u32] {
        self.items.get(user as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.items(user).binary_search(&item).is_ok()
    }
}
