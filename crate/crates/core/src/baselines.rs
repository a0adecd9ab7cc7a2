//! Comparison methods: ItemPop, BPR matrix factorization, inverse-propensity
//! weighting, scalar-bias variants and CausE.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::evaluator::EvalContext;
use crate::losses::{bpr, bpr_grad_pos, pair_grad, BatchLoss, LossBreakdown, CHUNK};
use crate::model::{gaussian_table, top_k, Scorer};
use crate::par;
use crate::params::Gradients;
use crate::sampler::{Strategy, Triplet};
use crate::splitter::SplitBundle;
use crate::trainer::{
    fit_loop, loop_spec, training_pool, Curriculum, FitOutput, LoopData, Schedule, TrainConfig, TrainError, Trainable,
};

/// The `k` most popular items, ties by ascending index.
pub fn itempop_rank(popularity: &[u32], k: usize) -> Vec<u32> {
    let scores: Vec<f64> = popularity.iter().map(|&p| p as f64).collect();
    top_k(&scores, &[], k.min(popularity.len())).expect("k clamped")
}

/// Scores every item by its training popularity.
pub struct ItemPop {
    pub popularity: Vec<u32>,
}

impl Scorer for ItemPop {
    fn n_items(&self) -> usize {
        self.popularity.len()
    }

    fn score_items(&self, _user: u32, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(&self.popularity) {
            *o = p as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpsVariant {
    Plain,
    Capped,
    CappedNormalized,
    CappedNormalizedSmoothedRenorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasVariant {
    User,
    Item,
    UserItem,
}

impl BiasVariant {
    fn user(self) -> bool {
        matches!(self, BiasVariant::User | BiasVariant::UserItem)
    }

    fn item(self) -> bool {
        matches!(self, BiasVariant::Item | BiasVariant::UserItem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Mf,
    Ips(IpsVariant),
    Bias(BiasVariant),
    CausE,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 9] = [
        BaselineKind::Mf,
        BaselineKind::Ips(IpsVariant::Plain),
        BaselineKind::Ips(IpsVariant::Capped),
        BaselineKind::Ips(IpsVariant::CappedNormalized),
        BaselineKind::Ips(IpsVariant::CappedNormalizedSmoothedRenorm),
        BaselineKind::Bias(BiasVariant::User),
        BaselineKind::Bias(BiasVariant::Item),
        BaselineKind::Bias(BiasVariant::UserItem),
        BaselineKind::CausE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Mf => "mf",
            BaselineKind::Ips(IpsVariant::Plain) => "ips",
            BaselineKind::Ips(IpsVariant::Capped) => "ips-c",
            BaselineKind::Ips(IpsVariant::CappedNormalized) => "ips-cn",
            BaselineKind::Ips(IpsVariant::CappedNormalizedSmoothedRenorm) => "ips-cnsr",
            BaselineKind::Bias(BiasVariant::User) => "bias-u",
            BaselineKind::Bias(BiasVariant::Item) => "bias-i",
            BaselineKind::Bias(BiasVariant::UserItem) => "bias-ui",
            BaselineKind::CausE => "cause",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub ips_cap_quantile: f64,
    pub ips_smoothing: f64,
    pub cause_gamma: f64,
    pub cause_penalty: Penalty,
    /// Keep embedding tables at their initial values (bias-only training).
    pub freeze_embeddings: bool,
    /// Initialize embeddings at zero instead of small Gaussians.
    pub zero_init: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ips_cap_quantile: 0.95,
            ips_smoothing: 0.5,
            cause_gamma: 0.01,
            cause_penalty: Penalty::L2,
            freeze_embeddings: false,
            zero_init: false,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.ips_cap_quantile > 0.0 && self.ips_cap_quantile <= 1.0) {
            return Err(TrainError::Config(format!(
                "ips_cap_quantile must lie in (0, 1], got {}",
                self.ips_cap_quantile
            )));
        }
        if !(self.ips_smoothing > 0.0 && self.ips_smoothing <= 1.0) {
            return Err(TrainError::Config(format!(
                "ips_smoothing must lie in (0, 1], got {}",
                self.ips_smoothing
            )));
        }
        if self.cause_gamma.is_nan() || self.cause_gamma < 0.0 {
            return Err(TrainError::Config(format!(
                "cause_gamma must be >= 0, got {}",
                self.cause_gamma
            )));
        }
        Ok(())
    }
}

/// Weight before any cap or normalization: `1/p`, or `(1/p)^lambda` for the
/// smoothed variant.
pub fn raw_ips_weight(variant: IpsVariant, popularity: u32, smoothing: f64) -> f64 {
    let w = 1.0 / popularity.max(1) as f64;
    match variant {
        IpsVariant::CappedNormalizedSmoothedRenorm => w.powf(smoothing),
        _ => w,
    }
}

/// Linear-interpolation quantile of `values` (sorted in place).
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    if values.is_empty() {
        return f64::INFINITY;
    }
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Rescales `weights` in place to mean 1.
pub fn normalize_to_unit_mean(weights: &mut [f64]) {
    let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
    if mean > 0.0 {
        weights.iter_mut().for_each(|w| *w /= mean);
    }
}

/// IPS weighting rule with its training-set cap resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpsScheme {
    pub variant: IpsVariant,
    pub cap: f64,
    pub smoothing: f64,
}

impl IpsScheme {
    /// Resolves the cap as the `cap_quantile` quantile of the raw weights
    /// of `records`.
    pub fn fit(variant: IpsVariant, popularity: &[u32], records: &[Interaction], cfg: &BaselineConfig) -> Self {
        let mut raw: Vec<f64> = records
            .iter()
            .map(|r| raw_ips_weight(variant, popularity[r.item as usize], cfg.ips_smoothing))
            .collect();
        let cap = match variant {
            IpsVariant::Plain => f64::INFINITY,
            _ => quantile(&mut raw, cfg.ips_cap_quantile),
        };
        Self {
            variant,
            cap,
            smoothing: cfg.ips_smoothing,
        }
    }

    /// Per-instance weight before batch normalization.
    pub fn weight(&self, popularity: u32) -> f64 {
        raw_ips_weight(self.variant, popularity, self.smoothing).min(self.cap)
    }

    /// Weights for a batch of positive-item popularities.
    pub fn batch_weights(&self, popularity: impl Iterator<Item = u32>) -> Vec<f64> {
        let mut w: Vec<f64> = popularity.map(|p| self.weight(p)).collect();
        if matches!(
            self.variant,
            IpsVariant::CappedNormalized | IpsVariant::CappedNormalizedSmoothedRenorm
        ) {
            normalize_to_unit_mean(&mut w);
        }
        w
    }
}

pub const MF_USER: usize = 0;
pub const MF_ITEM: usize = 1;
pub const MF_USER_BIAS: usize = 2;
pub const MF_ITEM_BIAS: usize = 3;

fn init_pair(n_users: usize, n_items: usize, dim: usize, seed: u64, tag: u64, zero: bool) -> [Array2<f64>; 2] {
    if zero {
        return [Array2::zeros((n_users, dim)), Array2::zeros((n_items, dim))];
    }
    let std = 0.1 / (dim as f64).sqrt();
    [
        gaussian_table(n_users, dim, std, seed, tag),
        gaussian_table(n_items, dim, std, seed, tag + 1),
    ]
}

/// Single-set factorization `<u, i> (+ b_u) (+ b_i)` trained with
/// (optionally weighted) BPR.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// user, item, user bias (M x 1), item bias (N x 1)
    pub tables: Vec<Array2<f64>>,
    pub bias: Option<BiasVariant>,
    pub ips: Option<IpsScheme>,
    pub freeze_embeddings: bool,
    /// Training popularity, for IPS weights.
    pub popularity: Vec<u32>,
}

impl Factorization {
    pub fn new(n_users: usize, n_items: usize, dim: usize, seed: u64, zero_init: bool) -> Self {
        let [u, i] = init_pair(n_users, n_items, dim, seed, 10, zero_init);
        Self {
            tables: vec![u, i, Array2::zeros((n_users, 1)), Array2::zeros((n_items, 1))],
            bias: None,
            ips: None,
            freeze_embeddings: false,
            popularity: Vec::new(),
        }
    }

    pub fn scorer(&self) -> FactorScorer<'_> {
        FactorScorer {
            user: &self.tables[MF_USER],
            item: &self.tables[MF_ITEM],
            user_bias: self.bias.filter(|b| b.user()).map(|_| &self.tables[MF_USER_BIAS]),
            item_bias: self.bias.filter(|b| b.item()).map(|_| &self.tables[MF_ITEM_BIAS]),
        }
    }
}

impl Trainable for Factorization {
    fn params(&self) -> &[Array2<f64>] {
        &self.tables
    }

    fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tables
    }

    fn batch_loss(&self, _pool: usize, batch: &[Triplet], _s: &Schedule) -> (BatchLoss, LossBreakdown) {
        let weights = self
            .ips
            .map(|s| s.batch_weights(batch.iter().map(|t| self.popularity[t.pos as usize])));
        let scorer = self.scorer();
        let chunks = par::map_chunks(batch, CHUNK, |c, chunk| {
            let mut g = Gradients::like(&self.tables);
            let mut value = 0.0;
            for (k, t) in chunk.iter().enumerate() {
                let w = weights.as_ref().map_or(1.0, |w| w[c * CHUNK + k]);
                let (sp, sn) = (scorer.score(t.user, t.pos), scorer.score(t.user, t.neg));
                value += w * bpr(sp, sn);
                let coef = w * bpr_grad_pos(sp, sn);
                if !self.freeze_embeddings {
                    let u = self.tables[MF_USER].row(t.user as usize);
                    let i = self.tables[MF_ITEM].row(t.pos as usize);
                    let j = self.tables[MF_ITEM].row(t.neg as usize);
                    pair_grad(&mut g, MF_USER, MF_ITEM, t, u, i, j, coef);
                }
                // a user offset cancels in s_pos - s_neg, so it gets no gradient
                if scorer.item_bias.is_some() {
                    g.add_slice(MF_ITEM_BIAS, t.pos, &[coef], 1.0);
                    g.add_slice(MF_ITEM_BIAS, t.neg, &[-coef], 1.0);
                }
            }
            (value, g)
        });
        merge(chunks, &self.tables, 0.0)
    }

    fn scorer(&self) -> Box<dyn Scorer + '_> {
        Box::new(Factorization::scorer(self))
    }
}

fn merge(chunks: Vec<(f64, Gradients)>, tables: &[Array2<f64>], extra: f64) -> (BatchLoss, LossBreakdown) {
    let mut grads = Gradients::like(tables);
    let mut value = 0.0;
    for (v, g) in chunks {
        value += v;
        grads.merge(g);
    }
    let parts = LossBreakdown {
        click: value,
        discrepancy: extra,
        total: value + extra,
        ..LossBreakdown::default()
    };
    (
        BatchLoss {
            value: parts.total,
            grads,
        },
        parts,
    )
}

pub struct FactorScorer<'a> {
    pub user: &'a Array2<f64>,
    pub item: &'a Array2<f64>,
    pub user_bias: Option<&'a Array2<f64>>,
    pub item_bias: Option<&'a Array2<f64>>,
}

impl FactorScorer<'_> {
    pub fn score(&self, user: u32, item: u32) -> f64 {
        let mut s = self.user.row(user as usize).dot(&self.item.row(item as usize));
        if let Some(b) = self.user_bias {
            s += b[[user as usize, 0]];
        }
        if let Some(b) = self.item_bias {
            s += b[[item as usize, 0]];
        }
        s
    }
}

impl Scorer for FactorScorer<'_> {
    fn n_items(&self) -> usize {
        self.item.nrows()
    }

    fn score_items(&self, user: u32, out: &mut [f64]) {
        let scores = self.item.dot(&self.user.row(user as usize));
        let ub = self.user_bias.map_or(0.0, |b| b[[user as usize, 0]]);
        for (i, o) in out.iter_mut().enumerate() {
            *o = scores[i] + ub + self.item_bias.map_or(0.0, |b| b[[i, 0]]);
        }
    }
}

pub const CAUSE_USER_A: usize = 0;
pub const CAUSE_ITEM_A: usize = 1;
pub const CAUSE_USER_B: usize = 2;
pub const CAUSE_ITEM_B: usize = 3;

/// Two factorizations, set A on train_normal (pool 0) and set B on
/// train_intervened (pool 1), tied by a penalty on the rows a batch touches.
/// Serving uses set A.
#[derive(Debug, Clone, PartialEq)]
pub struct CausE {
    pub tables: Vec<Array2<f64>>,
    pub gamma: f64,
    pub penalty: Penalty,
}

impl CausE {
    pub fn new(n_users: usize, n_items: usize, dim: usize, seed: u64, cfg: &BaselineConfig) -> Self {
        let [ua, ia] = init_pair(n_users, n_items, dim, seed, 10, cfg.zero_init);
        let [ub, ib] = init_pair(n_users, n_items, dim, seed, 12, cfg.zero_init);
        Self {
            tables: vec![ua, ia, ub, ib],
            gamma: cfg.cause_gamma,
            penalty: cfg.cause_penalty,
        }
    }

    pub fn scorer(&self) -> FactorScorer<'_> {
        FactorScorer {
            user: &self.tables[CAUSE_USER_A],
            item: &self.tables[CAUSE_ITEM_A],
            user_bias: None,
            item_bias: None,
        }
    }

    /// Penalty over the listed rows of a table pair, with its gradient.
    fn tie(&self, a: usize, b: usize, rows: &[u32], g: &mut Gradients) -> f64 {
        let mut value = 0.0;
        for &r in rows {
            let (ra, rb) = (self.tables[a].row(r as usize), self.tables[b].row(r as usize));
            let diff: Vec<f64> = ra.iter().zip(rb.iter()).map(|(x, y)| x - y).collect();
            let grad: Vec<f64> = match self.penalty {
                Penalty::L2 => {
                    value += diff.iter().map(|d| d * d).sum::<f64>();
                    diff.iter().map(|d| 2.0 * d).collect()
                }
                Penalty::L1 => {
                    value += diff.iter().map(|d| d.abs()).sum::<f64>();
                    diff.iter().map(|d| d.signum()).collect()
                }
            };
            g.add_slice(a, r, &grad, self.gamma);
            g.add_slice(b, r, &grad, -self.gamma);
        }
        self.gamma * value
    }
}

impl Trainable for CausE {
    fn params(&self) -> &[Array2<f64>] {
        &self.tables
    }

    fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tables
    }

    fn batch_loss(&self, pool: usize, batch: &[Triplet], _s: &Schedule) -> (BatchLoss, LossBreakdown) {
        let (ut, it) = if pool == 0 {
            (CAUSE_USER_A, CAUSE_ITEM_A)
        } else {
            (CAUSE_USER_B, CAUSE_ITEM_B)
        };
        let chunks = par::map_chunks(batch, CHUNK, |_, chunk| {
            let mut g = Gradients::like(&self.tables);
            let mut value = 0.0;
            for t in chunk {
                let u = self.tables[ut].row(t.user as usize);
                let i = self.tables[it].row(t.pos as usize);
                let j = self.tables[it].row(t.neg as usize);
                let (sp, sn) = (u.dot(&i), u.dot(&j));
                value += bpr(sp, sn);
                pair_grad(&mut g, ut, it, t, u, i, j, bpr_grad_pos(sp, sn));
            }
            (value, g)
        });
        let mut tie_grads = Gradients::like(&self.tables);
        let mut tie = 0.0;
        if self.gamma != 0.0 {
            let mut users: Vec<u32> = batch.iter().map(|t| t.user).collect();
            let mut items: Vec<u32> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
            users.sort_unstable();
            users.dedup();
            items.sort_unstable();
            items.dedup();
            tie += self.tie(CAUSE_USER_A, CAUSE_USER_B, &users, &mut tie_grads);
            tie += self.tie(CAUSE_ITEM_A, CAUSE_ITEM_B, &items, &mut tie_grads);
        }
        let mut chunks = chunks;
        chunks.push((0.0, tie_grads));
        merge(chunks, &self.tables, tie)
    }

    fn scorer(&self) -> Box<dyn Scorer + '_> {
        Box::new(CausE::scorer(self))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedBaseline {
    Factorization(Factorization),
    CausE(CausE),
}

impl FittedBaseline {
    pub fn scorer(&self) -> Box<dyn Scorer + '_> {
        match self {
            FittedBaseline::Factorization(m) => Box::new(m.scorer()),
            FittedBaseline::CausE(m) => Box::new(m.scorer()),
        }
    }

    pub fn tables(&self) -> &[Array2<f64>] {
        match self {
            FittedBaseline::Factorization(m) => &m.tables,
            FittedBaseline::CausE(m) => &m.tables,
        }
    }
}

pub struct BaselineFit {
    pub kind: BaselineKind,
    pub model: FittedBaseline,
    pub output: FitOutput<()>,
}

fn strip<M>(o: FitOutput<M>) -> (M, FitOutput<()>) {
    (
        o.model,
        FitOutput {
            model: (),
            log: o.log,
            best_epoch: o.best_epoch,
            stop: o.stop,
        },
    )
}

/// Baselines sample negatives uniformly and use no curriculum.
fn baseline_spec(cfg: &TrainConfig) -> crate::trainer::LoopSpec {
    let mut spec = loop_spec(
        cfg,
        Curriculum {
            alpha0: 0.0,
            m_up0: 0.0,
            m_down0: 0.0,
            decay: 1.0,
            enabled: false,
        },
    );
    spec.strategy = Strategy::Random;
    spec
}

/// Trains one baseline on the split. Embedding baselines use `2 * cfg.dim`
/// dimensions per entity.
pub fn train_baseline(
    kind: BaselineKind,
    split: &SplitBundle,
    cfg: &TrainConfig,
    base: &BaselineConfig,
) -> Result<BaselineFit, TrainError> {
    cfg.validate()?;
    base.validate()?;
    let dim = 2 * cfg.dim;
    let ctx = EvalContext::new(split);
    let spec = baseline_spec(cfg);
    let (model, output) = match kind {
        BaselineKind::CausE => {
            let all = training_pool(split, cfg.intervened_proportion)?;
            let intervened = all[split.train_normal.len()..].to_vec();
            if intervened.is_empty() {
                return Err(TrainError::Config(
                    "cause needs a nonempty intervened training partition".into(),
                ));
            }
            let data = LoopData::new(
                split.n_users,
                split.n_items,
                vec![split.train_normal.clone(), intervened],
            );
            let model = CausE::new(split.n_users, split.n_items, dim, cfg.seed, base);
            let (m, o) = strip(fit_loop(model, &data, &ctx, &spec)?);
            (FittedBaseline::CausE(m), o)
        }
        _ => {
            let records = training_pool(split, cfg.intervened_proportion)?;
            let data = LoopData::new(split.n_users, split.n_items, vec![records]);
            let mut model = Factorization::new(split.n_users, split.n_items, dim, cfg.seed, base.zero_init);
            model.freeze_embeddings = base.freeze_embeddings;
            match kind {
                BaselineKind::Ips(v) => {
                    model.ips = Some(IpsScheme::fit(v, &data.popularity, &data.pools[0], base));
                    model.popularity = data.popularity.clone();
                }
                BaselineKind::Bias(b) => model.bias = Some(b),
                _ => {}
            }
            let (m, o) = strip(fit_loop(model, &data, &ctx, &spec)?);
            (FittedBaseline::Factorization(m), o)
        }
    };
    Ok(BaselineFit { kind, model, output })
}
