use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use dice_rec::baselines::{
    train_baseline, BaselineConfig, BaselineKind, CausE, IpsVariant, CAUSE_ITEM_A, CAUSE_ITEM_B, CAUSE_USER_A,
    CAUSE_USER_B,
};
use dice_rec::dataset::{Interaction, UserItems};
use dice_rec::evaluator::{evaluate, hit_ratio_at_k, iou, iou_with_itempop, ndcg_at_k, recall_at_k, EvalContext};
use dice_rec::losses::{
    bpr, bpr_grad_pos, distance_correlation, loss_click, loss_conformity, loss_interest, total_loss, BatchLoss,
    DiscrepancyKind, LossConfig,
};
use dice_rec::model::{top_k, CausalEmbeddings, ScoreVariant, VariantScorer};
use dice_rec::rng::seeded;
use dice_rec::sampler::{
    default_margin, generate_epoch_triplets, Case, PopularityIndex, SamplerConfig, Strategy, Triplet,
};
use dice_rec::splitter::{draw_split, Partition, SplitBundle, SplitConfig};
use dice_rec::synthetic::{planted_table, zipf_table, PlantedSpec, ZipfSpec};
use dice_rec::trainer::{fit, fit_loop, Curriculum, LoopData, LoopSpec, TrainConfig};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// 1: split statistics on a Zipf table

fn split_statistics() -> Outcome {
    let start = Instant::now();
    let mut worst_gap: f64 = 0.0;
    let mut entropy_wins = 0;
    for seed in 0..100 {
        let table = zipf_table(&ZipfSpec::standard(), seed).expect("zipf table");
        let split = draw_split(
            &table,
            &SplitConfig {
                seed,
                ..Default::default()
            },
        )
        .expect("split");
        let share = split.report.intervened_pool as f64 / split.report.total_records as f64;
        worst_gap = worst_gap.max((share - 0.4).abs());
        let test = split.report.entropy(Partition::Test).expect("test entropy");
        let normal = split.report.entropy(Partition::TrainNormal).expect("normal entropy");
        if test > normal {
            entropy_wins += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst_gap <= 0.02 && entropy_wins >= 95 && elapsed < Duration::from_secs(30),
        format!(
            "max |pool share - 0.40| = {:.4}, entropy(test) > entropy(train_normal) in {entropy_wins}/100, {}",
            worst_gap,
            secs(elapsed)
        ),
    )
}

// 2: analytic vs central-difference gradients

type LossFn<'a> = Box<dyn Fn(&CausalEmbeddings) -> BatchLoss + 'a>;

const FD_STEP: f64 = 1e-6;

fn random_batch(rng: &mut impl Rng, n_users: u32, n_items: u32, len: usize) -> Vec<Triplet> {
    (0..len)
        .map(|_| {
            let pos = rng.random_range(0..n_items);
            let mut neg = rng.random_range(0..n_items);
            while neg == pos {
                neg = rng.random_range(0..n_items);
            }
            Triplet {
                user: rng.random_range(0..n_users),
                pos,
                neg,
                case: if rng.random_bool(0.5) { Case::O1 } else { Case::O2 },
            }
        })
        .collect()
}

/// Relative error `|a - n| / max(|a|, |n|)` over every parameter of every
/// table, with untouched rows counted as analytic zeros.
fn gradient_error(emb: &CausalEmbeddings, f: &dyn Fn(&CausalEmbeddings) -> BatchLoss) -> f64 {
    let analytic = f(emb).grads;
    let mut probe = emb.clone();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for t in 0..4 {
        let (rows, cols) = emb.tables()[t].dim();
        for r in 0..rows {
            let row = analytic.get(t, r as u32);
            for c in 0..cols {
                let x = emb.tables()[t][[r, c]];
                probe.tables_mut()[t][[r, c]] = x + FD_STEP;
                let up = f(&probe).value;
                probe.tables_mut()[t][[r, c]] = x - FD_STEP;
                let down = f(&probe).value;
                probe.tables_mut()[t][[r, c]] = x;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = row.map_or(0.0, |g| g[c]);
                diff += (a - numeric).powi(2);
                scale = scale.max(a.abs()).max(numeric.abs());
            }
        }
    }
    diff.sqrt() / scale.max(f64::MIN_POSITIVE)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(2, &[]);
    let mut worst_bpr: f64 = 0.0;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for b in 0..50u64 {
        let (x, y) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
        let numeric = (bpr(x + FD_STEP, y) - bpr(x - FD_STEP, y)) / (2.0 * FD_STEP);
        let analytic = bpr_grad_pos(x, y);
        worst_bpr = worst_bpr.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));

        let emb = CausalEmbeddings::init(8, 10, 8, b).expect("init").scaled(5.0);
        let batch = random_batch(&mut rng, 8, 10, 16);
        let mut checks: Vec<(&str, LossFn)> = vec![
            ("loss_click", Box::new(|e| loss_click(&batch, e))),
            ("loss_interest", Box::new(|e| loss_interest(&batch, e))),
            ("loss_conformity", Box::new(|e| loss_conformity(&batch, e, false))),
            (
                "loss_conformity(literal)",
                Box::new(|e| loss_conformity(&batch, e, true)),
            ),
        ];
        for (name, kind) in [
            ("total_loss(l1inv)", DiscrepancyKind::L1Inv),
            ("total_loss(l2inv)", DiscrepancyKind::L2Inv),
            ("total_loss(dcor)", DiscrepancyKind::DCor),
        ] {
            let cfg = LossConfig {
                alpha: 0.7,
                beta: 0.3,
                discrepancy: kind,
                ..Default::default()
            };
            let batch = &batch;
            checks.push((name, Box::new(move |e| total_loss(batch, e, &cfg).0)));
        }
        for (i, (name, f)) in checks.iter().enumerate() {
            let err = gradient_error(&emb, f.as_ref());
            if worst.len() <= i {
                worst.push((name, err));
            } else {
                worst[i].1 = worst[i].1.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    let max_err = worst.iter().map(|w| w.1).fold(worst_bpr, f64::max);
    let detail: Vec<String> = std::iter::once(format!("bpr {worst_bpr:.1e}"))
        .chain(worst.iter().map(|(n, e)| format!("{n} {e:.1e}")))
        .collect();
    Outcome::new(
        max_err <= 1e-4 && elapsed < Duration::from_secs(10),
        format!(
            "worst relative error over 50 batches: {}; {}",
            detail.join(", "),
            secs(elapsed)
        ),
    )
}

// 3: distance correlation against a double-centering reference

fn reference_dcor(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let centered = |m: ArrayView2<f64>| {
        let n = m.nrows();
        let mut d = Array2::<f64>::zeros((n, n));
        for k in 0..n {
            for l in 0..n {
                d[[k, l]] = (&m.row(k) - &m.row(l)).mapv(|v| v * v).sum().sqrt();
            }
        }
        let rows: Vec<f64> = (0..n).map(|k| d.row(k).mean().unwrap()).collect();
        let cols: Vec<f64> = (0..n).map(|l| d.column(l).mean().unwrap()).collect();
        let grand = d.mean().unwrap();
        for k in 0..n {
            for l in 0..n {
                d[[k, l]] += grand - rows[k] - cols[l];
            }
        }
        d
    };
    let (a, b) = (centered(x), centered(y));
    let n2 = (x.nrows() * x.nrows()) as f64;
    let dcov = (&a * &b).sum() / n2;
    let vx = (&a * &a).sum() / n2;
    let vy = (&b * &b).sum() / n2;
    if vx * vy <= 0.0 {
        return 0.0;
    }
    (dcov.max(0.0) / (vx * vy).sqrt()).sqrt()
}

fn dcor_oracle() -> Outcome {
    let mut rng = seeded(3, &[]);
    let mut worst: f64 = 0.0;
    let mut identities = true;
    for _ in 0..100 {
        let x = Array2::from_shape_simple_fn((20, 4), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((20, 4), || rng.random_range(-1.0..1.0));
        let got = distance_correlation(x.view(), y.view()).expect("dcor");
        worst = worst.max((got - reference_dcor(x.view(), y.view())).abs());
        let same = distance_correlation(x.view(), x.view()).expect("dcor");
        let doubled = distance_correlation(x.view(), (&x * 2.0).view()).expect("dcor");
        let constant = distance_correlation(x.view(), Array2::from_elem((20, 4), 0.7).view()).expect("dcor");
        identities &= (same - 1.0).abs() < 1e-10 && (doubled - 1.0).abs() < 1e-10 && constant == 0.0;
    }
    Outcome::new(
        worst <= 1e-10 && identities,
        format!("max |dcor - reference| = {worst:.1e}; identities hold: {identities}"),
    )
}

// 4: ranking metrics against brute-force references

fn metric_oracles() -> Outcome {
    let mut rng = seeded(4, &[]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50usize);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let mut items: Vec<u32> = (0..n as u32).collect();
        items.shuffle(&mut rng);
        let n_excluded = rng.random_range(0..n / 2);
        let mut excluded = items[..n_excluded].to_vec();
        excluded.sort_unstable();
        let candidates = n - n_excluded;
        let k = rng.random_range(1..=10usize.min(candidates));
        let relevant: Vec<u32> = items[n_excluded..]
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.3))
            .collect();

        let mut order: Vec<u32> = items[n_excluded..].to_vec();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let expected_top = &order[..k];
        let top = top_k(&scores, &excluded, k).expect("top_k");
        if top != expected_top {
            mismatches += 1;
            continue;
        }

        let rel: BTreeSet<u32> = relevant.iter().copied().collect();
        let hit_ranks: Vec<usize> = (0..k).filter(|&r| rel.contains(&top[r])).collect();
        let (recall, hr, ndcg) = if rel.is_empty() {
            (None, None, None)
        } else {
            let dcg: f64 = hit_ranks.iter().map(|&r| 1.0 / ((r + 2) as f64).log2()).sum();
            let idcg: f64 = (0..rel.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
            (
                Some(hit_ranks.len() as f64 / rel.len() as f64),
                Some(if hit_ranks.is_empty() { 0.0 } else { 1.0 }),
                Some(dcg / idcg),
            )
        };
        let other: Vec<u32> = order.iter().rev().take(k).copied().collect();
        let a: BTreeSet<u32> = top.iter().copied().collect();
        let b: BTreeSet<u32> = other.iter().copied().collect();
        let expected_iou = a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
        if recall_at_k(&top, &relevant) != recall
            || hit_ratio_at_k(&top, &relevant) != hr
            || ndcg_at_k(&top, &relevant) != ndcg
            || iou(&top, &other) != expected_iou
        {
            mismatches += 1;
        }
    }
    let single = ndcg_at_k(&[7, 3, 9], &[3]).expect("nonempty");
    let rank2 = (single - 1.0 / 3f64.log2()).abs();
    Outcome::new(
        mismatches == 0 && rank2 <= 1e-12,
        format!("{mismatches}/1000 mismatches; |ndcg(rank 2) - 1/log2(3)| = {rank2:.1e}"),
    )
}

// 5: PNSM margin contract

fn pnsm_contract() -> Outcome {
    let table = zipf_table(&ZipfSpec::standard(), 5).expect("zipf table");
    let pop = table.popularity().to_vec();
    let index = PopularityIndex::new(&pop);
    let seen = UserItems::new(table.n_users(), table.records());
    let margin = default_margin(&pop);
    let records: Vec<Interaction> = table
        .records()
        .iter()
        .copied()
        .filter(|r| {
            let (below, above) = index.eligible(r.item, margin, margin);
            !below.is_empty() || !above.is_empty()
        })
        .take(2500)
        .collect();
    let cfg = SamplerConfig {
        strategy: Strategy::Pnsm,
        m_up: margin,
        m_down: margin,
        negatives_per_positive: 4,
        seed: 5,
    };
    let triplets = generate_epoch_triplets(&records, &index, &seen, &cfg).expect("sampling");
    let p = |i: u32| pop[i as usize] as f64;
    let margin_ok = triplets
        .iter()
        .filter(|t| match t.case {
            Case::O1 => p(t.neg) < p(t.pos) - margin,
            Case::O2 => p(t.neg) > p(t.pos) + margin,
        })
        .count();
    let seen_negatives = triplets.iter().filter(|t| seen.contains(t.user, t.neg)).count();
    Outcome::new(
        triplets.len() == 10_000 && margin_ok == triplets.len() && seen_negatives == 0,
        format!(
            "{} triplets, margin {margin:.1}: {margin_ok} satisfy the case inequality, {seen_negatives} seen negatives",
            triplets.len()
        ),
    )
}

// 6: curriculum schedule as logged by the trainer

fn curriculum_schedule() -> Outcome {
    let table = zipf_table(&ZipfSpec::small(), 6).expect("zipf table");
    let split = draw_split(
        &table,
        &SplitConfig {
            seed: 6,
            ..Default::default()
        },
    )
    .expect("split");
    let run = |curriculum: bool| {
        let cfg = TrainConfig {
            dim: 4,
            epochs: 12,
            patience: 100,
            curriculum,
            seed: 6,
            ..Default::default()
        };
        fit(&split, &cfg).expect("fit")
    };
    let on = run(true);
    let off = run(false);
    let (m_up0, m_down0) = (on.resolved.m_up0, on.resolved.m_down0);
    let mut worst: f64 = 0.0;
    for e in &on.output.log {
        let f = 0.9f64.powi(e.epoch as i32);
        worst = worst
            .max((e.alpha - 0.1 * f).abs())
            .max((e.m_up - m_up0 * f).abs() / m_up0)
            .max((e.m_down - m_down0 * f).abs() / m_down0);
    }
    let constant = off
        .output
        .log
        .iter()
        .all(|e| e.alpha == 0.1 && e.m_up == off.resolved.m_up0 && e.m_down == off.resolved.m_down0);
    Outcome::new(
        on.output.log.len() == 12 && worst <= 1e-12 && constant,
        format!(
            "{} epochs logged, max deviation from 0.9^e decay {worst:.1e}; constant when off: {constant}",
            on.output.log.len()
        ),
    )
}

// 7-9: planted-factor experiments

const PLANTED_SEEDS: u64 = 5;

fn planted_spec() -> PlantedSpec {
    PlantedSpec {
        interest_scale: 4.0,
        ..Default::default()
    }
}

fn planted_train_config(seed: u64, strategy: Strategy) -> TrainConfig {
    TrainConfig {
        dim: 32,
        epochs: 30,
        patience: 5,
        seed,
        strategy,
        ..Default::default()
    }
}

struct PlantedRun {
    dice_ndcg: f64,
    dice_recall: f64,
    random_recall: f64,
    mf_ndcg: f64,
    con_iou: f64,
    int_iou: f64,
    dice_time: Duration,
    random_time: Duration,
    mf_time: Duration,
}

fn planted_split(seed: u64) -> SplitBundle {
    let data = planted_table(&planted_spec(), seed).expect("planted table");
    draw_split(
        &data.table,
        &SplitConfig {
            seed,
            ..Default::default()
        },
    )
    .expect("split")
}

fn planted_run(seed: u64) -> PlantedRun {
    let split = planted_split(seed);
    let ctx = EvalContext::new(&split);
    let test_at_20 = |scorer: &dyn dice_rec::model::Scorer| {
        let r = evaluate(scorer, &ctx, Partition::Test, &[20], "", "");
        let m = r.at(20).expect("k=20");
        (m.ndcg, m.recall)
    };

    let start = Instant::now();
    let dice = fit(&split, &planted_train_config(seed, Strategy::Pnsm)).expect("dice");
    let dice_time = start.elapsed();
    let emb = dice.embeddings();
    let scorer = |variant| VariantScorer {
        embeddings: emb,
        variant,
    };
    let (dice_ndcg, dice_recall) = test_at_20(&scorer(ScoreVariant::Full));
    let con_iou = iou_with_itempop(&scorer(ScoreVariant::ConformityOnly), &ctx, Partition::Test, &[50])[0].pooled;
    let int_iou = iou_with_itempop(&scorer(ScoreVariant::InterestOnly), &ctx, Partition::Test, &[50])[0].pooled;

    let start = Instant::now();
    let random = fit(&split, &planted_train_config(seed, Strategy::Random)).expect("dice random");
    let random_time = start.elapsed();
    let (_, random_recall) = test_at_20(&VariantScorer {
        embeddings: random.embeddings(),
        variant: ScoreVariant::Full,
    });

    let start = Instant::now();
    let mf = train_baseline(
        BaselineKind::Mf,
        &split,
        &planted_train_config(seed, Strategy::Random),
        &BaselineConfig::default(),
    )
    .expect("mf");
    let mf_time = start.elapsed();
    let (mf_ndcg, _) = test_at_20(mf.model.scorer().as_ref());

    PlantedRun {
        dice_ndcg,
        dice_recall,
        random_recall,
        mf_ndcg,
        con_iou,
        int_iou,
        dice_time,
        random_time,
        mf_time,
    }
}

fn disentanglement(runs: &[PlantedRun]) -> Outcome {
    let r = &runs[0];
    Outcome::new(
        r.con_iou >= 0.3 && r.int_iou <= 0.1 && r.dice_time < Duration::from_secs(300),
        format!(
            "pooled IOU@50 with ItemPop: conformity {:.3} (need >= 0.3), interest {:.3} (need <= 0.1); {}",
            r.con_iou,
            r.int_iou,
            secs(r.dice_time)
        ),
    )
}

fn robustness(runs: &[PlantedRun]) -> Outcome {
    let n = runs.len() as f64;
    let dice = runs.iter().map(|r| r.dice_ndcg).sum::<f64>() / n;
    let mf = runs.iter().map(|r| r.mf_ndcg).sum::<f64>() / n;
    let elapsed: Duration = runs.iter().map(|r| r.dice_time + r.mf_time).sum();
    let lift = dice / mf - 1.0;
    Outcome::new(
        lift >= 0.05 && elapsed < Duration::from_secs(900),
        format!(
            "mean test NDCG@20 over {} seeds: DICE {dice:.4}, MF {mf:.4}, lift {:+.1}% (need >= +5%); {}",
            runs.len(),
            100.0 * lift,
            secs(elapsed)
        ),
    )
}

fn ablation(runs: &[PlantedRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.dice_recall >= r.random_recall).count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}", r.dice_recall, r.random_recall))
        .collect();
    let random_time: Duration = runs.iter().map(|r| r.random_time).sum();
    Outcome::new(
        wins >= 4,
        format!(
            "PNSM >= RANDOM on test Recall@20 in {wins}/{} seeds (pnsm/random: {}); random runs {}",
            runs.len(),
            pairs.join(", "),
            secs(random_time)
        ),
    )
}

// 10: end-to-end determinism through the CLI

const CLI_CONFIG: &str = r#"
[data]
source = "planted"
seed = 10

[data.planted]
n_users = 150
n_items = 120
density = 0.06

[split]
seed = 10

[train]
dim = 8
epochs = 3
seed = 10
"#;

fn cli_pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let config = root.join("config.toml");
    fs::write(&config, CLI_CONFIG).expect("write config");
    let cfg = config.to_str().expect("utf-8 path");
    let out = root.join("out");
    let out = out.to_str().expect("utf-8 path");
    for args in [
        vec!["prepare", "--config", cfg],
        vec!["train", "--config", cfg, "--model", "dice"],
        vec!["evaluate", "--config", cfg, "--model", "dice"],
        vec!["train", "--config", cfg, "--model", "mf"],
        vec!["evaluate", "--config", cfg, "--model", "mf"],
    ] {
        let argv = ["dice", "--output-root", out].into_iter().chain(args);
        dice_rec::cli::run(argv).expect("cli command");
    }
    let mut files = Vec::new();
    for model in ["dice", "mf"] {
        let dir = root.join("out/reports").join(model);
        let mut names: Vec<_> = fs::read_dir(&dir)
            .expect("report dir")
            .map(|e| e.expect("entry").file_name().into_string().expect("utf-8"))
            .filter(|n| n != "manifest.json")
            .collect();
        names.sort();
        for n in names {
            files.push((format!("{model}/{n}"), fs::read(dir.join(&n)).expect("read report")));
        }
    }
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let first = cli_pipeline(a.path());
    let second = cli_pipeline(b.path());
    let identical = !first.is_empty() && first == second;
    Outcome::new(
        identical,
        format!("{} report files compared, byte-identical: {identical}", first.len()),
    )
}

// 11: baseline parity

fn uniform_split() -> SplitBundle {
    let (n_users, n_items, per_user) = (60u32, 30u32, 6u32);
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for u in 0..n_users {
        for j in 0..per_user {
            train.push(Interaction::new(u, (u + j) % n_items));
        }
        held_out.push(Interaction::new(u, (u + per_user + u % 5) % n_items));
    }
    let (validation, test): (Vec<_>, Vec<_>) = held_out.into_iter().partition(|r| r.user % 2 == 0);
    SplitBundle::from_parts(
        n_users as usize,
        n_items as usize,
        train,
        Vec::new(),
        validation,
        test,
        SplitConfig::default(),
    )
}

fn baseline_parity() -> Outcome {
    let split = uniform_split();
    let ctx = EvalContext::new(&split);
    let cfg = TrainConfig {
        dim: 4,
        epochs: 15,
        patience: 100,
        seed: 11,
        ..Default::default()
    };
    let base = BaselineConfig::default();
    let lists = |kind| {
        let fit = train_baseline(kind, &split, &cfg, &base).expect("baseline");
        let scorer = fit.model.scorer();
        ctx.top_lists(scorer.as_ref(), Partition::Test, 20).1
    };
    let mf = lists(BaselineKind::Mf);
    let variants = [
        IpsVariant::Plain,
        IpsVariant::Capped,
        IpsVariant::CappedNormalized,
        IpsVariant::CappedNormalizedSmoothedRenorm,
    ];
    let ips_same: Vec<bool> = variants.iter().map(|&v| lists(BaselineKind::Ips(v)) == mf).collect();

    let table = zipf_table(&ZipfSpec::small(), 11).expect("zipf table");
    let mut zsplit = draw_split(
        &table,
        &SplitConfig {
            seed: 11,
            ..Default::default()
        },
    )
    .expect("split");
    // no validation users: the loop returns the last epoch
    zsplit.validation.clear();
    let zctx = EvalContext::new(&zsplit);
    let normal = zsplit.train_normal.clone();
    let intervened = zsplit.train_intervened.clone();
    let both = LoopData::new(zsplit.n_users, zsplit.n_items, vec![normal.clone(), intervened.clone()]);
    let only = |pools: Vec<Vec<Interaction>>| LoopData {
        pools,
        popularity: both.popularity.clone(),
        seen: both.seen.clone(),
    };
    let spec = LoopSpec {
        curriculum: Curriculum {
            alpha0: 0.0,
            m_up0: 0.0,
            m_down0: 0.0,
            decay: 1.0,
            enabled: false,
        },
        strategy: Strategy::Random,
        negatives_per_positive: 2,
        learning_rate: 0.01,
        weight_decay: 0.0,
        batch_size: 256,
        epochs: 3,
        patience: 100,
        seed: 11,
        validation_k: 20,
    };
    let cause_base = BaselineConfig {
        cause_gamma: 0.0,
        ..Default::default()
    };
    let init = CausE::new(zsplit.n_users, zsplit.n_items, 8, 11, &cause_base);
    let train = |data: &LoopData| fit_loop(init.clone(), data, &zctx, &spec).expect("cause").model.tables;
    let joint = train(&both);
    let normal_alone = train(&only(vec![normal, Vec::new()]));
    let intervened_alone = train(&only(vec![Vec::new(), intervened]));
    let (a, b) = (CAUSE_USER_A..=CAUSE_ITEM_A, CAUSE_USER_B..=CAUSE_ITEM_B);
    let untouched =
        normal_alone[b.clone()] == init.tables[b.clone()] && intervened_alone[a.clone()] == init.tables[a.clone()];
    let reproduced = joint[a.clone()] == normal_alone[a] && joint[b.clone()] == intervened_alone[b];

    let ips_ok = ips_same.iter().all(|&s| s);
    Outcome::new(
        ips_ok && untouched && reproduced,
        format!(
            "IPS rankings equal MF under uniform popularity (plain, c, cn, cnsr): {ips_same:?}; \
             CausE gamma=0: each set untouched by the other pool's batches {untouched}, \
             joint training equals the two separate factorizations {reproduced}"
        ),
    )
}

/// Set to make any failing criterion fail the test process.
const STRICT_ENV: &str = "ACCEPTANCE_STRICT";

/// Runs every criterion, or only those whose numbers are given as arguments.
/// Each criterion prints one PASS or FAIL line.
fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &str, run: &dyn Fn() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let o = run();
        println!(
            "criterion {n:>2} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };
    record(1, "split statistics", &split_statistics);
    record(2, "gradient correctness", &gradient_checks);
    record(3, "dcor oracle", &dcor_oracle);
    record(4, "metric oracles", &metric_oracles);
    record(5, "pnsm contract", &pnsm_contract);
    record(6, "curriculum schedule", &curriculum_schedule);
    let runs: Vec<PlantedRun> = if [7, 8, 9].into_iter().any(wanted) {
        (0..PLANTED_SEEDS).map(planted_run).collect()
    } else {
        Vec::new()
    };
    record(7, "disentanglement", &|| disentanglement(&runs));
    record(8, "robustness", &|| robustness(&runs));
    record(9, "sampling ablation", &|| ablation(&runs));
    record(10, "determinism", &determinism);
    record(11, "baseline parity", &baseline_parity);

    let failed: Vec<String> = results.iter().filter(|r| !r.1.pass).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        if std::env::var_os(STRICT_ENV).is_some() {
            std::process::exit(1);
        }
    }
}
