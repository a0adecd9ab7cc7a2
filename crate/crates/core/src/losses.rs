//! The four training tasks: conformity modeling, interest modeling, click
//! estimation and the interest/conformity discrepancy penalty, with analytic
//! row gradients.
//!
//! Batch reductions are sums over triplets, not means.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CausalEmbeddings, ITEM_CONFORMITY, ITEM_INTEREST, USER_CONFORMITY, USER_INTEREST};
use crate::par;
use crate::params::Gradients;
use crate::sampler::{Case, Triplet};

/// Triplets per parallel work unit. Fixed so that gradient sums are
/// reproducible regardless of thread count.
pub const CHUNK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("distance correlation needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("row-paired matrices differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyKind {
    /// Negated mean L1 distance between paired rows.
    L1Inv,
    /// Negated mean L2 distance between paired rows.
    L2Inv,
    /// Distance correlation.
    DCor,
}

impl DiscrepancyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "l1inv" | "l1" => Some(Self::L1Inv),
            "l2inv" | "l2" => Some(Self::L2Inv),
            "dcor" => Some(Self::DCor),
            _ => None,
        }
    }
}

/// Loss value plus row gradients for the tables it touched.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub value: f64,
    pub grads: Gradients,
}

/// Unweighted task values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub click: f64,
    pub interest: f64,
    pub conformity: f64,
    pub discrepancy: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.click += o.click;
        self.interest += o.interest;
        self.conformity += o.conformity;
        self.discrepancy += o.discrepancy;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub discrepancy: DiscrepancyKind,
    /// Drop the conformity task from the total (ablation).
    pub conformity_task: bool,
    /// Use `-BPR(pos, neg)` for O2 conformity instead of the swapped
    /// `BPR(neg, pos)`. Unbounded below; ablation only.
    pub literal_o2_conformity: bool,
    /// Per-row distance cap for L1/L2 discrepancy.
    pub distance_cap: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            discrepancy: DiscrepancyKind::DCor,
            conformity_task: true,
            literal_o2_conformity: false,
            distance_cap: None,
        }
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss `-ln sigmoid(pos - neg)`.
pub fn bpr(score_pos: f64, score_neg: f64) -> f64 {
    softplus(score_neg - score_pos)
}

/// d bpr / d score_pos; d bpr / d score_neg is the negation.
pub fn bpr_grad_pos(score_pos: f64, score_neg: f64) -> f64 {
    -sigmoid(score_neg - score_pos)
}

/// Accumulates `coef * d(<u,i> - <u,j>)` into the gradient of a
/// user table / item table pair.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_grad(
    g: &mut Gradients,
    user_table: usize,
    item_table: usize,
    t: &Triplet,
    u: ArrayView1<f64>,
    i: ArrayView1<f64>,
    j: ArrayView1<f64>,
    coef: f64,
) {
    if coef == 0.0 {
        return;
    }
    let diff: Vec<f64> = i.iter().zip(j.iter()).map(|(a, b)| a - b).collect();
    g.add_slice(user_table, t.user, &diff, coef);
    g.add(item_table, t.pos, u, coef);
    g.add(item_table, t.neg, u, -coef);
}

#[derive(Debug, Clone, Copy)]
struct TaskWeights {
    click: f64,
    interest: f64,
    conformity: f64,
    literal_o2: bool,
}

/// Sums the three triplet tasks with the given gradient weights. Values in
/// the returned breakdown are unweighted.
fn triplet_tasks(batch: &[Triplet], emb: &CausalEmbeddings, w: TaskWeights) -> (LossBreakdown, Gradients) {
    let tables = emb.tables();
    let chunks = par::map_chunks(batch, CHUNK, |_, chunk| {
        let mut parts = LossBreakdown::default();
        let mut g = Gradients::like(tables);
        for t in chunk {
            let ui = tables[USER_INTEREST].row(t.user as usize);
            let uc = tables[USER_CONFORMITY].row(t.user as usize);
            let (pi, pc) = (
                tables[ITEM_INTEREST].row(t.pos as usize),
                tables[ITEM_CONFORMITY].row(t.pos as usize),
            );
            let (ni, nc) = (
                tables[ITEM_INTEREST].row(t.neg as usize),
                tables[ITEM_CONFORMITY].row(t.neg as usize),
            );
            let int_pos = ui.dot(&pi);
            let int_neg = ui.dot(&ni);
            let con_pos = uc.dot(&pc);
            let con_neg = uc.dot(&nc);

            if w.click != 0.0 {
                let (sp, sn) = (int_pos + con_pos, int_neg + con_neg);
                parts.click += bpr(sp, sn);
                let coef = w.click * bpr_grad_pos(sp, sn);
                pair_grad(&mut g, USER_INTEREST, ITEM_INTEREST, t, ui, pi, ni, coef);
                pair_grad(&mut g, USER_CONFORMITY, ITEM_CONFORMITY, t, uc, pc, nc, coef);
            }
            if w.interest != 0.0 && t.case == Case::O2 {
                parts.interest += bpr(int_pos, int_neg);
                let coef = w.interest * bpr_grad_pos(int_pos, int_neg);
                pair_grad(&mut g, USER_INTEREST, ITEM_INTEREST, t, ui, pi, ni, coef);
            }
            if w.conformity != 0.0 {
                let (value, coef) = match (t.case, w.literal_o2) {
                    (Case::O1, _) => (bpr(con_pos, con_neg), bpr_grad_pos(con_pos, con_neg)),
                    // bpr(neg, pos): d/d pos = -d/d neg of the swapped call
                    (Case::O2, false) => (bpr(con_neg, con_pos), -bpr_grad_pos(con_neg, con_pos)),
                    (Case::O2, true) => (-bpr(con_pos, con_neg), -bpr_grad_pos(con_pos, con_neg)),
                };
                parts.conformity += value;
                pair_grad(
                    &mut g,
                    USER_CONFORMITY,
                    ITEM_CONFORMITY,
                    t,
                    uc,
                    pc,
                    nc,
                    w.conformity * coef,
                );
            }
        }
        (parts, g)
    });

    let mut parts = LossBreakdown::default();
    let mut grads = Gradients::like(tables);
    for (p, g) in chunks {
        parts += p;
        grads.merge(g);
    }
    (parts, grads)
}

/// Conformity task over O1 (standard direction) and O2 (reversed).
pub fn loss_conformity(batch: &[Triplet], emb: &CausalEmbeddings, literal_o2: bool) -> BatchLoss {
    let (parts, grads) = triplet_tasks(
        batch,
        emb,
        TaskWeights {
            click: 0.0,
            interest: 0.0,
            conformity: 1.0,
            literal_o2,
        },
    );
    BatchLoss {
        value: parts.conformity,
        grads,
    }
}

/// Interest task; only O2 triplets contribute.
pub fn loss_interest(batch: &[Triplet], emb: &CausalEmbeddings) -> BatchLoss {
    let (parts, grads) = triplet_tasks(
        batch,
        emb,
        TaskWeights {
            click: 0.0,
            interest: 1.0,
            conformity: 0.0,
            literal_o2: false,
        },
    );
    BatchLoss {
        value: parts.interest,
        grads,
    }
}

/// Click task on the summed (equivalently, concatenated) scores.
pub fn loss_click(batch: &[Triplet], emb: &CausalEmbeddings) -> BatchLoss {
    let (parts, grads) = triplet_tasks(
        batch,
        emb,
        TaskWeights {
            click: 1.0,
            interest: 0.0,
            conformity: 0.0,
            literal_o2: false,
        },
    );
    BatchLoss {
        value: parts.click,
        grads,
    }
}

/// Discrepancy between row-paired interest and conformity matrices, with
/// gradients with respect to both.
pub fn discrepancy(
    kind: DiscrepancyKind,
    interest: ArrayView2<f64>,
    conformity: ArrayView2<f64>,
    distance_cap: Option<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    if interest.dim() != conformity.dim() {
        return Err(LossError::ShapeMismatch(interest.dim(), conformity.dim()));
    }
    match kind {
        DiscrepancyKind::L1Inv => Ok(paired_distance(interest, conformity, distance_cap, false)),
        DiscrepancyKind::L2Inv => Ok(paired_distance(interest, conformity, distance_cap, true)),
        DiscrepancyKind::DCor => dcor_with_grad(interest, conformity),
    }
}

/// `-(1/n) sum_r ||x_r - y_r||` in L1 or L2.
fn paired_distance(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cap: Option<f64>,
    euclidean: bool,
) -> (f64, Array2<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mut gx = Array2::zeros((n, d));
    if n == 0 {
        return (0.0, gx.clone(), gx);
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for r in 0..n {
        let diff: Vec<f64> = x.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| a - b).collect();
        let dist = if euclidean {
            diff.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            diff.iter().map(|v| v.abs()).sum()
        };
        let capped = cap.is_some_and(|c| dist > c);
        total += cap.map_or(dist, |c| dist.min(c));
        if capped {
            continue;
        }
        for (k, v) in diff.iter().enumerate() {
            let dd = if euclidean {
                if dist > 0.0 {
                    v / dist
                } else {
                    0.0
                }
            } else {
                v.signum() * (*v != 0.0) as u8 as f64
            };
            gx[[r, k]] = -inv_n * dd;
        }
    }
    let gy = -&gx;
    (-inv_n * total, gx, gy)
}

/// Pairwise Euclidean distance matrix plus row sums and grand total.
struct Distances {
    n: usize,
    a: Array2<f64>,
    row_sums: Array1<f64>,
    total: f64,
}

impl Distances {
    /// Distances from the Gram matrix: `|x_k|^2 + |x_l|^2 - 2 <x_k, x_l>`.
    fn new(x: ArrayView2<f64>) -> Self {
        let n = x.nrows();
        let mut a = x.dot(&x.t());
        let sq: Vec<f64> = a.diag().to_vec();
        let buf = a.as_slice_mut().expect("standard layout");
        for k in 0..n {
            buf[k * n + k] = 0.0;
            for l in k + 1..n {
                let v = (sq[k] + sq[l] - 2.0 * buf[k * n + l]).max(0.0).sqrt();
                buf[k * n + l] = v;
                buf[l * n + k] = v;
            }
        }
        let row_sums = a.sum_axis(Axis(1));
        let total = row_sums.sum();
        Self { n, a, row_sums, total }
    }

    fn row_means(&self) -> (Vec<f64>, f64) {
        let n = self.n as f64;
        (self.row_sums.iter().map(|s| s / n).collect(), self.total / (n * n))
    }

    /// `(S_ab, S_aa, S_bb)`: inner products of the double-centered
    /// matrices, from raw entries and row sums without materializing them.
    fn centered_inners(&self, other: &Distances) -> (f64, f64, f64) {
        let n = self.n;
        let (a, b) = (
            self.a.as_slice().expect("standard layout"),
            other.a.as_slice().expect("standard layout"),
        );
        let mut acc = [[0.0f64; 4]; 3];
        for k in 0..n {
            let (ra, rb) = (&a[k * n + k + 1..(k + 1) * n], &b[k * n + k + 1..(k + 1) * n]);
            let (ca, cb) = (ra.chunks_exact(4), rb.chunks_exact(4));
            let (ta, tb) = (ca.remainder(), cb.remainder());
            for (xa, xb) in ca.zip(cb) {
                for j in 0..4 {
                    acc[0][j] += xa[j] * xb[j];
                    acc[1][j] += xa[j] * xa[j];
                    acc[2][j] += xb[j] * xb[j];
                }
            }
            for (x, y) in ta.iter().zip(tb) {
                acc[0][0] += x * y;
                acc[1][0] += x * x;
                acc[2][0] += y * y;
            }
        }
        let raw = acc.map(|v| 2.0 * v.iter().sum::<f64>());
        let nf = n as f64;
        let center = |raw: f64, p: &Distances, q: &Distances| {
            raw - 2.0 * p.row_sums.dot(&q.row_sums) / nf + p.total * q.total / (nf * nf)
        };
        (
            center(raw[0], self, other),
            center(raw[1], self, self),
            center(raw[2], other, other),
        )
    }
}

/// Biased (V-statistic) distance correlation of row-paired samples. Zero
/// when either distance variance vanishes.
pub fn distance_correlation(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64, LossError> {
    if x.dim() != y.dim() {
        return Err(LossError::ShapeMismatch(x.dim(), y.dim()));
    }
    if x.nrows() < 2 {
        return Err(LossError::TooFewRows(x.nrows()));
    }
    let (da, db) = (Distances::new(x), Distances::new(y));
    Ok(dcor_from(&da, &db).0)
}

/// (dCor, S_xy, S_xx, S_yy) with S the unnormalized centered inner products.
fn dcor_from(da: &Distances, db: &Distances) -> (f64, f64, f64, f64) {
    let (sxy, sxx, syy) = da.centered_inners(db);
    let (sxy, sxx, syy) = (sxy.max(0.0), sxx.max(0.0), syy.max(0.0));
    if sxx <= 0.0 || syy <= 0.0 || sxy <= 0.0 {
        return (0.0, sxy, sxx, syy);
    }
    let r = (sxy / (sxx * syy).sqrt()).sqrt().min(1.0);
    (r, sxy, sxx, syy)
}

fn dcor_with_grad(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>), LossError> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(LossError::TooFewRows(n));
    }
    let (da, db) = (Distances::new(x), Distances::new(y));
    let (r, sxy, sxx, syy) = dcor_from(&da, &db);
    if r == 0.0 {
        return Ok((0.0, Array2::zeros((n, d)), Array2::zeros((n, d))));
    }
    // d r / d a_kl = r (B_kl / (2 S_xy) - A_kl / (2 S_xx)), and symmetrically
    // for b. Each a_kl moves with x_k along (x_k - x_l) / a_kl, so with
    // W_kl = 2 (d r / d a_kl) / a_kl the gradient is diag(W 1) X - W X.
    let (ma, ga) = da.row_means();
    let (mb, gb) = db.row_means();
    let (a, b) = (
        da.a.as_slice().expect("standard layout"),
        db.a.as_slice().expect("standard layout"),
    );
    let (kxy, kxx, kyy) = (r / sxy, r / sxx, r / syy);
    let mut wx = Array2::<f64>::zeros((n, n));
    let mut wy = Array2::<f64>::zeros((n, n));
    {
        let (bx, by) = (
            wx.as_slice_mut().expect("standard layout"),
            wy.as_slice_mut().expect("standard layout"),
        );
        for k in 0..n {
            for l in k + 1..n {
                let i = k * n + l;
                let ca = a[i] - ma[k] - ma[l] + ga;
                let cb = b[i] - mb[k] - mb[l] + gb;
                if a[i] > 0.0 {
                    let v = (cb * kxy - ca * kxx) / a[i];
                    bx[i] = v;
                    bx[l * n + k] = v;
                }
                if b[i] > 0.0 {
                    let v = (ca * kxy - cb * kyy) / b[i];
                    by[i] = v;
                    by[l * n + k] = v;
                }
            }
        }
    }
    let apply = |w: &Array2<f64>, pts: ArrayView2<f64>| {
        let row = w.sum_axis(Axis(1));
        let mut g = w.dot(&pts);
        for (k, mut gr) in g.outer_iter_mut().enumerate() {
            gr.zip_mut_with(&pts.row(k), |gv, &p| *gv = p * row[k] - *gv);
        }
        g
    };
    Ok((r, apply(&wx, x), apply(&wy, y)))
}

fn unique_sorted(ids: impl Iterator<Item = u32>) -> Vec<u32> {
    let mut v: Vec<u32> = ids.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn gather(table: &Array2<f64>, ids: &[u32]) -> Array2<f64> {
    let d = table.ncols();
    let mut out = Array2::zeros((ids.len(), d));
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).assign(&table.row(id as usize));
    }
    out
}

/// Discrepancy summed over the batch's unique users and unique items.
/// Gradients are scaled by `weight`. A side with fewer than two entities
/// contributes nothing under dCor.
pub fn batch_discrepancy(
    batch: &[Triplet],
    emb: &CausalEmbeddings,
    kind: DiscrepancyKind,
    distance_cap: Option<f64>,
    weight: f64,
    grads: &mut Gradients,
) -> f64 {
    let users = unique_sorted(batch.iter().map(|t| t.user));
    let items = unique_sorted(batch.iter().flat_map(|t| [t.pos, t.neg]));
    let tables = emb.tables();
    let mut value = 0.0;
    for (ids, int_t, con_t) in [
        (&users, USER_INTEREST, USER_CONFORMITY),
        (&items, ITEM_INTEREST, ITEM_CONFORMITY),
    ] {
        if ids.is_empty() || (kind == DiscrepancyKind::DCor && ids.len() < 2) {
            continue;
        }
        let xi = gather(&tables[int_t], ids);
        let xc = gather(&tables[con_t], ids);
        let (v, gi, gc) = discrepancy(kind, xi.view(), xc.view(), distance_cap).expect("paired rows");
        value += v;
        if weight != 0.0 {
            for (r, &id) in ids.iter().enumerate() {
                grads.add(int_t, id, gi.row(r), weight);
                grads.add(con_t, id, gc.row(r), weight);
            }
        }
    }
    value
}

/// `click + alpha * (interest + conformity) + beta * discrepancy`.
pub fn total_loss(batch: &[Triplet], emb: &CausalEmbeddings, cfg: &LossConfig) -> (BatchLoss, LossBreakdown) {
    let conformity_weight = if cfg.conformity_task { cfg.alpha } else { 0.0 };
    let (mut parts, mut grads) = triplet_tasks(
        batch,
        emb,
        TaskWeights {
            click: 1.0,
            interest: cfg.alpha,
            conformity: conformity_weight,
            literal_o2: cfg.literal_o2_conformity,
        },
    );
    if cfg.beta != 0.0 {
        parts.discrepancy = batch_discrepancy(batch, emb, cfg.discrepancy, cfg.distance_cap, cfg.beta, &mut grads);
    }
    parts.total =
        parts.click + cfg.alpha * parts.interest + conformity_weight * parts.conformity + cfg.beta * parts.discrepancy;
    (
        BatchLoss {
            value: parts.total,
            grads,
        },
        parts,
    )
}
