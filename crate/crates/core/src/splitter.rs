//! Intervened, non-IID partitioning by inverse-popularity record sampling.
//!
//! Every record enters an "intervened" pool with probability
//! `min(cap, c / popularity(item))`, where `c` is solved so that the expected
//! pool size is `intervened_fraction * total`. The pool is shuffled and cut
//! into intervened-train, validation and test; everything else is normal
//! training data.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{interaction_entropy, popularity_counts, Interaction, InteractionTable};
use crate::rng;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid split config: {0}")]
    Config(String),
    #[error("item {item} has zero popularity")]
    ZeroPopularity { item: u32 },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Fractions of the *total* record count routed to each intervened partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Allocation {
    pub train_intervened: f64,
    pub validation: f64,
    pub test: f64,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.train_intervened + self.validation + self.test
    }
}

impl Default for Allocation {
    fn default() -> Self {
        Self {
            train_intervened: 0.10,
            validation: 0.10,
            test: 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub intervened_fraction: f64,
    pub probability_cap: f64,
    pub allocation: Allocation,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            intervened_fraction: 0.4,
            probability_cap: 0.9,
            allocation: Allocation::default(),
            seed: 0,
        }
    }
}

impl SplitConfig {
    /// Sets the intervened-train share and keeps the other two shares,
    /// updating `intervened_fraction` to match.
    pub fn with_train_intervened(mut self, share: f64) -> Self {
        self.allocation.train_intervened = share;
        self.intervened_fraction = self.allocation.total();
        self
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let a = &self.allocation;
        if !(self.probability_cap > 0.0 && self.probability_cap <= 1.0) {
            return Err(SplitError::Config(format!(
                "probability_cap {} not in (0, 1]",
                self.probability_cap
            )));
        }
        if !(0.0..=1.0).contains(&self.intervened_fraction) {
            return Err(SplitError::Config(format!(
                "intervened_fraction {} not in [0, 1]",
                self.intervened_fraction
            )));
        }
        if [a.train_intervened, a.validation, a.test]
            .iter()
            .any(|f| f.is_nan() || *f < 0.0)
        {
            return Err(SplitError::Config("allocation shares must be >= 0".into()));
        }
        if (a.total() - self.intervened_fraction).abs() > 1e-9 {
            return Err(SplitError::Config(format!(
                "allocation sums to {} but intervened_fraction is {}",
                a.total(),
                self.intervened_fraction
            )));
        }
        if self.intervened_fraction > self.probability_cap {
            return Err(SplitError::Config(format!(
                "intervened_fraction {} is unattainable with probability cap {}",
                self.intervened_fraction, self.probability_cap
            )));
        }
        Ok(())
    }
}

/// Solves for per-record inclusion probabilities `min(cap, c / p)` whose sum
/// is `fraction * len`, given each record's item popularity `p`.
pub fn inverse_popularity_probabilities(
    record_popularity: &[u32],
    fraction: f64,
    cap: f64,
) -> Result<Vec<f64>, SplitError> {
    if fraction > cap {
        return Err(SplitError::Config(format!(
            "intervened_fraction {fraction} is unattainable with probability cap {cap}"
        )));
    }
    if record_popularity.is_empty() || fraction <= 0.0 {
        return Ok(vec![0.0; record_popularity.len()]);
    }
    if record_popularity.contains(&0) {
        return Err(SplitError::Config("record with zero item popularity".into()));
    }

    let target = fraction * record_popularity.len() as f64;
    let mass = |c: f64| -> f64 { record_popularity.iter().map(|&p| (c / p as f64).min(cap)).sum() };

    // mass(c) is continuous and non-decreasing; at hi every record is capped.
    let max_p = *record_popularity.iter().max().unwrap() as f64;
    let (mut lo, mut hi) = (0.0f64, cap * max_p);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = hi;
    Ok(record_popularity.iter().map(|&p| (c / p as f64).min(cap)).collect())
}

/// Inclusion probability of every record of `table`, in record order.
pub fn compute_record_probabilities(table: &InteractionTable, cfg: &SplitConfig) -> Result<Vec<f64>, SplitError> {
    cfg.validate()?;
    let pop = table.popularity();
    let record_pop: Vec<u32> = table.records().iter().map(|r| pop[r.item as usize]).collect();
    inverse_popularity_probabilities(&record_pop, cfg.intervened_fraction, cfg.probability_cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    TrainNormal,
    TrainIntervened,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::TrainNormal,
        Partition::TrainIntervened,
        Partition::Validation,
        Partition::Test,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Partition::TrainNormal => "train_normal.tsv",
            Partition::TrainIntervened => "train_intervened.tsv",
            Partition::Validation => "validation.tsv",
            Partition::Test => "test.tsv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub partition: Partition,
    pub records: usize,
    /// `None` for an empty partition.
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub total_records: usize,
    pub intervened_pool: usize,
    pub partitions: Vec<PartitionStats>,
    /// Entropy of the combined training partitions.
    pub train_entropy: Option<f64>,
    /// Test items never seen in training.
    pub cold_test_items: usize,
    /// Test users never seen in training.
    pub cold_test_users: usize,
}

impl SplitReport {
    pub fn entropy(&self, p: Partition) -> Option<f64> {
        self.partitions
            .iter()
            .find(|s| s.partition == p)
            .and_then(|s| s.entropy)
    }
}

/// Four disjoint partitions of an interaction table.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub n_users: usize,
    pub n_items: usize,
    pub train_normal: Vec<Interaction>,
    pub train_intervened: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub config: SplitConfig,
    pub report: SplitReport,
}

impl SplitBundle {
    /// Assembles a bundle from explicit partitions and computes its report.
    pub fn from_parts(
        n_users: usize,
        n_items: usize,
        train_normal: Vec<Interaction>,
        train_intervened: Vec<Interaction>,
        validation: Vec<Interaction>,
        test: Vec<Interaction>,
        config: SplitConfig,
    ) -> Self {
        let mut bundle = Self {
            n_users,
            n_items,
            train_normal,
            train_intervened,
            validation,
            test,
            config,
            report: SplitReport {
                total_records: 0,
                intervened_pool: 0,
                partitions: Vec::new(),
                train_entropy: None,
                cold_test_items: 0,
                cold_test_users: 0,
            },
        };
        bundle.report = bundle.compute_report();
        bundle
    }

    pub fn partition(&self, p: Partition) -> &[Interaction] {
        match p {
            Partition::TrainNormal => &self.train_normal,
            Partition::TrainIntervened => &self.train_intervened,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    pub fn popularity(&self, p: Partition) -> Vec<u32> {
        popularity_counts(self.partition(p), self.n_items)
    }

    /// train_normal followed by train_intervened.
    pub fn training_records(&self) -> Vec<Interaction> {
        let mut v = self.train_normal.clone();
        v.extend_from_slice(&self.train_intervened);
        v
    }

    /// Item popularity over both training partitions.
    pub fn training_popularity(&self) -> Vec<u32> {
        let mut p = self.popularity(Partition::TrainNormal);
        for r in &self.train_intervened {
            p[r.item as usize] += 1;
        }
        p
    }

    fn compute_report(&self) -> SplitReport {
        let partitions = Partition::ALL
            .iter()
            .map(|&p| PartitionStats {
                partition: p,
                records: self.partition(p).len(),
                entropy: interaction_entropy(&self.popularity(p)).ok(),
            })
            .collect();
        let train_pop = self.training_popularity();
        let mut train_users = vec![false; self.n_users];
        for r in self.train_normal.iter().chain(&self.train_intervened) {
            train_users[r.user as usize] = true;
        }
        let mut cold_items: Vec<u32> = self
            .test
            .iter()
            .filter(|r| train_pop[r.item as usize] == 0)
            .map(|r| r.item)
            .collect();
        cold_items.sort_unstable();
        cold_items.dedup();
        let mut cold_users: Vec<u32> = self
            .test
            .iter()
            .filter(|r| !train_users[r.user as usize])
            .map(|r| r.user)
            .collect();
        cold_users.sort_unstable();
        cold_users.dedup();

        SplitReport {
            total_records: Partition::ALL.iter().map(|&p| self.partition(p).len()).sum(),
            intervened_pool: self.train_intervened.len() + self.validation.len() + self.test.len(),
            partitions,
            train_entropy: interaction_entropy(&train_pop).ok(),
            cold_test_items: cold_items.len(),
            cold_test_users: cold_users.len(),
        }
    }

    /// Writes the four partition files and `split.json`.
    pub fn save(&self, dir: &Path) -> Result<(), SplitError> {
        fs::create_dir_all(dir)?;
        for p in Partition::ALL {
            let mut w = BufWriter::new(fs::File::create(dir.join(p.file_name()))?);
            for r in self.partition(p) {
                writeln!(w, "{}\t{}", r.user, r.item)?;
            }
            w.flush()?;
        }
        let manifest = SplitManifest {
            format_version: 1,
            n_users: self.n_users,
            n_items: self.n_items,
            config: self.config.clone(),
            report: self.report.clone(),
            files: Partition::ALL.iter().map(|p| p.file_name().to_string()).collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(SPLIT_MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SplitError> {
        let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.join(SPLIT_MANIFEST))?)?;
        let mut parts = Vec::with_capacity(4);
        for p in Partition::ALL {
            parts.push(read_partition(
                &dir.join(p.file_name()),
                manifest.n_users,
                manifest.n_items,
            )?);
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self::from_parts(
            manifest.n_users,
            manifest.n_items,
            next(),
            next(),
            next(),
            next(),
            manifest.config,
        ))
    }
}

pub const SPLIT_MANIFEST: &str = "split.json";

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    format_version: u32,
    n_users: usize,
    n_items: usize,
    config: SplitConfig,
    report: SplitReport,
    files: Vec<String>,
}

fn read_partition(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Interaction>, SplitError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| SplitError::Format {
            path: format!("{}:{}", path.display(), i + 1),
            reason: reason.to_string(),
        };
        let (u, it) = line.split_once('\t').ok_or_else(|| bad("expected user<TAB>item"))?;
        let user: u32 = u.parse().map_err(|_| bad("bad user index"))?;
        let item: u32 = it.parse().map_err(|_| bad("bad item index"))?;
        if user as usize >= n_users || item as usize >= n_items {
            return Err(bad("index out of range"));
        }
        out.push(Interaction { user, item });
    }
    Ok(out)
}

/// Draws the intervened split. Deterministic in `cfg.seed`.
pub fn draw_split(table: &InteractionTable, cfg: &SplitConfig) -> Result<SplitBundle, SplitError> {
    let probs = compute_record_probabilities(table, cfg)?;
    let mut rng = rng::seeded(cfg.seed, &[rng::STREAM_SPLIT]);

    let mut pool = Vec::new();
    let mut train_normal = Vec::new();
    for (r, &p) in table.records().iter().zip(&probs) {
        if rng.random::<f64>() < p {
            pool.push(*r);
        } else {
            train_normal.push(*r);
        }
    }
    pool.shuffle(&mut rng);

    let a = &cfg.allocation;
    let (n_ti, n_val) = if cfg.intervened_fraction > 0.0 {
        let n = pool.len() as f64;
        let ti = ((n * a.train_intervened / cfg.intervened_fraction).round() as usize).min(pool.len());
        let val = ((n * a.validation / cfg.intervened_fraction).round() as usize).min(pool.len() - ti);
        (ti, val)
    } else {
        (0, 0)
    };
    let test = pool.split_off(n_ti + n_val);
    let validation = pool.split_off(n_ti);
    let train_intervened = pool;

    Ok(SplitBundle::from_parts(
        table.n_users(),
        table.n_items(),
        train_normal,
        train_intervened,
        validation,
        test,
        cfg.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use proptest::prelude::*;

    /// Brute-force oracle: scan c on a fine grid, then refine with a
    /// secant-free interval halving written independently of the solver.
    fn oracle_scale(pop: &[u32], fraction: f64, cap: f64) -> f64 {
        let target = fraction * pop.len() as f64;
        let f = |c: f64| pop.iter().map(|&p| (c / p as f64).min(cap)).sum::<f64>() - target;
        let max_c = cap * *pop.iter().max().unwrap() as f64;
        let steps = 10_000;
        let mut prev = 0.0;
        for s in 1..=steps {
            let c = max_c * s as f64 / steps as f64;
            if f(c) >= 0.0 {
                let (mut a, mut b) = (prev, c);
                while b - a > 1e-14 * max_c {
                    let m = (a + b) / 2.0;
                    if f(m) >= 0.0 {
                        b = m
                    } else {
                        a = m
                    }
                }
                return b;
            }
            prev = c;
        }
        max_c
    }

    #[test]
    fn uniform_popularity_gives_flat_fraction() {
        let p = inverse_popularity_probabilities(&[1, 1], 0.4, 0.9).unwrap();
        assert!(p.iter().all(|x| (x - 0.4).abs() < 1e-12), "{p:?}");
    }

    #[test]
    fn two_item_example() {
        let p = inverse_popularity_probabilities(&[4, 1], 0.5, 0.9).unwrap();
        let c = oracle_scale(&[4, 1], 0.5, 0.9);
        assert!((c - 0.8).abs() < 1e-9);
        assert!((p[0] - 0.2).abs() < 1e-9 && (p[1] - 0.8).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn rare_item_clamped_to_cap() {
        // one record of a rare item among many records of a popular one
        let mut pop = vec![50u32; 50];
        pop.push(1);
        let p = inverse_popularity_probabilities(&pop, 0.4, 0.9).unwrap();
        assert_eq!(*p.last().unwrap(), 0.9);
        let sum: f64 = p.iter().sum();
        assert!((sum - 0.4 * 51.0).abs() <= 1e-9 * 0.4 * 51.0);
    }

    #[test]
    fn unattainable_fraction_is_config_error() {
        assert!(matches!(
            inverse_popularity_probabilities(&[1, 2], 0.95, 0.9),
            Err(SplitError::Config(_))
        ));
        let cfg = SplitConfig {
            intervened_fraction: 0.95,
            allocation: Allocation {
                train_intervened: 0.35,
                validation: 0.3,
                test: 0.3,
            },
            ..SplitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_fraction_keeps_everything_normal() {
        let table = synthetic::zipf_table(&synthetic::ZipfSpec::small(), 3).unwrap();
        let cfg = SplitConfig {
            intervened_fraction: 0.0,
            allocation: Allocation {
                train_intervened: 0.0,
                validation: 0.0,
                test: 0.0,
            },
            ..SplitConfig::default()
        };
        let b = draw_split(&table, &cfg).unwrap();
        assert_eq!(b.train_normal.len(), table.records().len());
        assert!(b.validation.is_empty() && b.test.is_empty() && b.train_intervened.is_empty());
    }

    #[test]
    fn seeded_split_is_reproducible_and_persists() {
        let table = synthetic::zipf_table(&synthetic::ZipfSpec::small(), 11).unwrap();
        let cfg = SplitConfig {
            seed: 5,
            ..SplitConfig::default()
        };
        let a = draw_split(&table, &cfg).unwrap();
        let b = draw_split(&table, &cfg).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = SplitBundle::load(dir.path()).unwrap();
        assert_eq!(back, a);
        let bytes1 = fs::read(dir.path().join(SPLIT_MANIFEST)).unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(bytes1, fs::read(dir.path().join(SPLIT_MANIFEST)).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solver_matches_oracle(pop in prop::collection::vec(1u32..200, 2..60), frac in 0.05f64..0.85) {
            let p = inverse_popularity_probabilities(&pop, frac, 0.9).unwrap();
            let target = frac * pop.len() as f64;
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - target).abs() <= 1e-9 * target);
            let c = oracle_scale(&pop, frac, 0.9);
            for (&pi, &q) in pop.iter().zip(&p) {
                prop_assert!(q > 0.0 && q <= 0.9);
                prop_assert!((q - (c / pi as f64).min(0.9)).abs() < 1e-8);
            }
            // non-increasing in popularity
            let mut pairs: Vec<(u32, f64)> = pop.iter().copied().zip(p.iter().copied()).collect();
            pairs.sort_by_key(|p| p.0);
            prop_assert!(pairs.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-15));
        }

        #[test]
        fn partitions_are_disjoint_and_exhaustive(seed in 0u64..1000) {
            let table = synthetic::zipf_table(&synthetic::ZipfSpec::small(), 1).unwrap();
            let cfg = SplitConfig { seed, ..SplitConfig::default() };
            let b = draw_split(&table, &cfg).unwrap();
            let mut all: Vec<Interaction> = Partition::ALL.iter().flat_map(|&p| b.partition(p).to_vec()).collect();
            prop_assert_eq!(all.len(), table.records().len());
            all.sort();
            let mut orig = table.records().to_vec();
            orig.sort();
            prop_assert_eq!(all, orig);
        }
    }
}
