//! Top-K ranking metrics, ItemPop overlap diagnostics and embedding export.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::itempop_rank;
use crate::dataset::{Interaction, UserItems};
use crate::model::{top_k, CausalEmbeddings, Scorer};
use crate::par;
use crate::splitter::{Partition, SplitBundle};

pub const DEFAULT_KS: [usize; 2] = [20, 50];

/// `|topk ∩ relevant| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(topk: &[u32], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(hits(topk, relevant) as f64 / relevant.len() as f64)
}

/// 1 if any recommended item is relevant.
pub fn hit_ratio_at_k(topk: &[u32], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(if hits(topk, relevant) > 0 { 1.0 } else { 0.0 })
}

/// Binary-relevance NDCG with `log2(rank + 1)` discounts.
pub fn ndcg_at_k(topk: &[u32], relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: HashSet<u32> = relevant.iter().copied().collect();
    let dcg: f64 = topk
        .iter()
        .enumerate()
        .filter(|(_, i)| rel.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..rel.len().min(topk.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

fn hits(topk: &[u32], relevant: &[u32]) -> usize {
    let rel: HashSet<u32> = relevant.iter().copied().collect();
    topk.iter().filter(|i| rel.contains(i)).count()
}

/// Intersection over union of two item sets.
pub fn iou(a: &[u32], b: &[u32]) -> f64 {
    let a: HashSet<u32> = a.iter().copied().collect();
    let b: HashSet<u32> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub hit_ratio: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouPoint {
    pub k: usize,
    /// Union of all users' top-K sets against the ItemPop top-K.
    pub pooled: f64,
    /// Mean over users of the per-user IOU.
    pub per_user_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDiagnostics {
    pub train_normal: Option<f64>,
    pub train: Option<f64>,
    pub validation: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub variant: String,
    pub partition: Partition,
    pub users: usize,
    /// Users with target interactions but no training history.
    pub skipped_cold_users: usize,
    pub metrics: Vec<KMetrics>,
    pub entropy: EntropyDiagnostics,
    pub iou: Vec<IouPoint>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat rows `model,variant,k,metric,value`.
    pub fn write_csv<W: Write>(&self, w: W, header: bool) -> Result<(), csv::Error> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if header {
            out.write_record(["model", "variant", "k", "metric", "value"])?;
        }
        for m in &self.metrics {
            for (name, v) in [("recall", m.recall), ("hit_ratio", m.hit_ratio), ("ndcg", m.ndcg)] {
                out.write_record([
                    self.model.as_str(),
                    self.variant.as_str(),
                    &m.k.to_string(),
                    name,
                    &v.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_iou_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "variant", "k", "iou_pooled", "iou_user_mean"])?;
        for p in &self.iou {
            out.write_record([
                self.model.as_str(),
                self.variant.as_str(),
                &p.k.to_string(),
                &p.pooled.to_string(),
                &p.per_user_mean.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Precomputed per-user item sets for repeated evaluation on one split.
pub struct EvalContext<'a> {
    pub split: &'a SplitBundle,
    pub train: UserItems,
    pub validation: UserItems,
    pub test: UserItems,
    pub train_popularity: Vec<u32>,
    /// Also drop validation items from test-time candidates.
    pub exclude_validation: bool,
}

impl<'a> EvalContext<'a> {
    pub fn new(split: &'a SplitBundle) -> Self {
        let n = split.n_users;
        Self {
            split,
            train: UserItems::new(n, split.train_normal.iter().chain(&split.train_intervened)),
            validation: UserItems::new(n, &split.validation),
            test: UserItems::new(n, &split.test),
            train_popularity: split.training_popularity(),
            exclude_validation: false,
        }
    }

    fn target(&self, p: Partition) -> &UserItems {
        match p {
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
            _ => panic!("evaluation target must be validation or test"),
        }
    }

    /// Users with at least one target and one training interaction, plus
    /// the count of target users skipped for lacking training history.
    pub fn users(&self, p: Partition) -> (Vec<u32>, usize) {
        let target = self.target(p);
        let mut users = Vec::new();
        let mut skipped = 0;
        for u in 0..self.split.n_users as u32 {
            if target.items(u).is_empty() {
                continue;
            }
            if self.train.items(u).is_empty() {
                skipped += 1;
            } else {
                users.push(u);
            }
        }
        (users, skipped)
    }

    /// Sorted items excluded from a user's candidates.
    pub fn excluded(&self, user: u32, p: Partition) -> Vec<u32> {
        let mut ex = self.train.items(user).to_vec();
        if p == Partition::Test && self.exclude_validation {
            ex.extend_from_slice(self.validation.items(user));
            ex.sort_unstable();
            ex.dedup();
        }
        ex
    }

    /// Top-`k` list per evaluated user (fewer if the candidate pool is
    /// smaller than `k`).
    pub fn top_lists(&self, scorer: &dyn Scorer, p: Partition, k: usize) -> (Vec<u32>, Vec<Vec<u32>>) {
        let (users, _) = self.users(p);
        let n_items = scorer.n_items();
        let lists = par::map_range(users.len(), |idx| {
            let u = users[idx];
            let mut scores = vec![0.0; n_items];
            scorer.score_items(u, &mut scores);
            let ex = self.excluded(u, p);
            let k = k.min(n_items - ex.len());
            top_k(&scores, &ex, k).expect("k clamped to candidates")
        });
        (users, lists)
    }
}

/// Average Recall/HitRatio/NDCG at each `k` over the evaluated users of
/// partition `p`.
pub fn evaluate(
    scorer: &dyn Scorer,
    ctx: &EvalContext,
    p: Partition,
    ks: &[usize],
    model: &str,
    variant: &str,
) -> MetricsReport {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let (users, lists) = ctx.top_lists(scorer, p, max_k);
    let (_, skipped) = ctx.users(p);
    let target = ctx.target(p);

    let mut sums = vec![[0.0f64; 3]; ks.len()];
    for (u, list) in users.iter().zip(&lists) {
        let rel = target.items(*u);
        for (slot, &k) in sums.iter_mut().zip(ks) {
            let top = &list[..k.min(list.len())];
            slot[0] += recall_at_k(top, rel).unwrap_or(0.0);
            slot[1] += hit_ratio_at_k(top, rel).unwrap_or(0.0);
            slot[2] += ndcg_at_k(top, rel).unwrap_or(0.0);
        }
    }
    let n = users.len().max(1) as f64;
    let metrics = ks
        .iter()
        .zip(&sums)
        .map(|(&k, s)| KMetrics {
            k,
            recall: s[0] / n,
            hit_ratio: s[1] / n,
            ndcg: s[2] / n,
        })
        .collect();

    let report = &ctx.split.report;
    MetricsReport {
        model: model.to_string(),
        variant: variant.to_string(),
        partition: p,
        users: users.len(),
        skipped_cold_users: skipped,
        metrics,
        entropy: EntropyDiagnostics {
            train_normal: report.entropy(Partition::TrainNormal),
            train: report.train_entropy,
            validation: report.entropy(Partition::Validation),
            test: report.entropy(Partition::Test),
        },
        iou: Vec::new(),
    }
}

/// Mean validation Recall@k, or `None` when no user qualifies.
pub fn validation_recall(scorer: &dyn Scorer, ctx: &EvalContext, k: usize) -> Option<f64> {
    let (users, lists) = ctx.top_lists(scorer, Partition::Validation, k);
    if users.is_empty() {
        return None;
    }
    let total: f64 = users
        .iter()
        .zip(&lists)
        .map(|(u, l)| recall_at_k(l, ctx.validation.items(*u)).unwrap_or(0.0))
        .sum();
    Some(total / users.len() as f64)
}

/// IOU between the scorer's recommendations and ItemPop for each `k`.
pub fn iou_with_itempop(scorer: &dyn Scorer, ctx: &EvalContext, p: Partition, ks: &[usize]) -> Vec<IouPoint> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let (_, lists) = ctx.top_lists(scorer, p, max_k);
    ks.iter()
        .map(|&k| {
            let pop_top = itempop_rank(&ctx.train_popularity, k.min(ctx.train_popularity.len()));
            let mut pooled: Vec<u32> = lists.iter().flat_map(|l| l[..k.min(l.len())].iter().copied()).collect();
            pooled.sort_unstable();
            pooled.dedup();
            let per_user_mean = if lists.is_empty() {
                0.0
            } else {
                lists.iter().map(|l| iou(&l[..k.min(l.len())], &pop_top)).sum::<f64>() / lists.len() as f64
            };
            IouPoint {
                k,
                pooled: iou(&pooled, &pop_top),
                per_user_mean,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopularityGroup {
    Unpopular,
    Normal,
    Popular,
}

impl PopularityGroup {
    pub fn name(self) -> &'static str {
        match self {
            PopularityGroup::Unpopular => "unpopular",
            PopularityGroup::Normal => "normal",
            PopularityGroup::Popular => "popular",
        }
    }
}

/// Tercile groups by popularity rank (ties broken by item index), so group
/// sizes differ by at most one.
pub fn popularity_groups(popularity: &[u32]) -> Vec<PopularityGroup> {
    let n = popularity.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (popularity[i], i));
    let mut groups = vec![PopularityGroup::Normal; n];
    for (rank, &i) in order.iter().enumerate() {
        groups[i] = match rank * 3 / n.max(1) {
            0 => PopularityGroup::Unpopular,
            1 => PopularityGroup::Normal,
            _ => PopularityGroup::Popular,
        };
    }
    groups
}

/// Writes `embeddings.csv` and `items.csv` (item, popularity, group) into
/// `dir`.
pub fn export_embeddings(emb: &CausalEmbeddings, popularity: &[u32], dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    emb.write_csv(&mut buf).map_err(std::io::Error::other)?;
    fs::write(dir.join("embeddings.csv"), buf)?;

    let groups = popularity_groups(popularity);
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["item", "popularity", "group"])
        .map_err(std::io::Error::other)?;
    for (i, (p, g)) in popularity.iter().zip(&groups).enumerate() {
        out.write_record([i.to_string(), p.to_string(), g.name().to_string()])
            .map_err(std::io::Error::other)?;
    }
    fs::write(
        dir.join("items.csv"),
        out.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?,
    )?;
    Ok(())
}

/// Records grouped per user, for callers that need raw relevance sets.
pub fn relevant_sets(n_users: usize, records: &[Interaction]) -> UserItems {
    UserItems::new(n_users, records)
}
