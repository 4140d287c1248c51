//! Natural accuracy, robust accuracy, and the kNN topology score.
//!
//! The topology score is kNN classification accuracy over penultimate-layer
//! features under cosine distance: the support set holds the natural
//! training features plus (by default) features of PGD-attacked copies of
//! the same points keeping their natural labels, and each test point is
//! classified by majority vote among its `k` nearest support features. Vote
//! ties break toward the smaller summed distance, then the lower label, so
//! the score is fully deterministic.
//!
//! A feature row with near-zero norm (every ReLU unit dead, which heavily
//! regularized training can produce) has no direction, so its cosine
//! distance to everything is fixed at 1, the orthogonal value: the point
//! stays in the support as a maximally uninformative neighbor instead of
//! aborting the score.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackObjective};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::numerics::rng::Seed;
use crate::numerics::{ensure_finite, Matrix};
use crate::topology::NORM_FLOOR;
use crate::training::{self, RobustKind, TrainConfig};

/// Fraction of `data` the model labels correctly. Prediction ties break
/// toward the lowest class index.
pub fn accuracy(model: &Mlp, data: &Dataset) -> Result<f64> {
    check_eval_shapes(model, data)?;
    let preds = model.predict(&data.x);
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy after attacking every input against `model`.
pub fn robust_accuracy(
    model: &Mlp,
    data: &Dataset,
    attack: &AttackConfig,
    seed: Seed,
) -> Result<f64> {
    check_eval_shapes(model, data)?;
    let x_adv = attacks::perturb(model, &data.x, &data.labels, attack, seed)?;
    let preds = model.predict(&x_adv);
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

fn check_eval_shapes(model: &Mlp, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("evaluation batch is empty"));
    }
    if model.input_dim() != data.dim() {
        return Err(Error::shape("evaluation batch", model.input_dim(), data.dim()));
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::shape(
            "evaluation labels",
            format!("at most {} classes", model.num_classes()),
            data.num_classes,
        ));
    }
    Ok(())
}

/// Settings for [`topology_score`].
#[derive(Debug, Clone)]
pub struct TopologyScoreConfig {
    /// Neighbors consulted per test point; must satisfy
    /// `1 <= k <= support size - 1` after the adversarial rows are added.
    pub k: usize,
    /// Add PGD-attacked copies of the support points (natural labels kept).
    pub include_adversarial_support: bool,
    /// Attack used for those copies.
    pub support_attack: AttackConfig,
}

impl Default for TopologyScoreConfig {
    fn default() -> TopologyScoreConfig {
        TopologyScoreConfig {
            k: 30,
            include_adversarial_support: true,
            support_attack: AttackConfig::pgd_eval(0.05, 0.0125, 20),
        }
    }
}

/// kNN accuracy of `test` against the support features. Test features come
/// from `test.x` as given; pass pre-attacked inputs to score the robust
/// side.
pub fn topology_score(
    model: &Mlp,
    support: &Dataset,
    test: &Dataset,
    cfg: &TopologyScoreConfig,
    seed: Seed,
) -> Result<f64> {
    check_eval_shapes(model, support)?;
    check_eval_shapes(model, test)?;

    let (mut feats, _) = model.forward(&support.x);
    let mut labels = support.labels.clone();
    if cfg.include_adversarial_support {
        let x_adv =
            attacks::perturb(model, &support.x, &support.labels, &cfg.support_attack, seed)?;
        let (feat_adv, _) = model.forward(&x_adv);
        feats = ndarray::concatenate(ndarray::Axis(0), &[feats.view(), feat_adv.view()])
            .expect("support feature blocks share their width");
        labels.extend_from_slice(&support.labels);
    }
    let support_size = feats.nrows();
    if cfg.k < 1 || cfg.k > support_size - 1 {
        return Err(Error::config(format!(
            "k = {} outside 1..={} for a support of {support_size} points",
            cfg.k,
            support_size - 1
        )));
    }
    ensure_finite(&feats, "support features")?;
    let (test_feats, _) = model.forward(&test.x);
    ensure_finite(&test_feats, "test features")?;

    let support_sq = row_square_norms(&feats);
    let test_sq = row_square_norms(&test_feats);

    let mut correct = 0usize;
    let mut dists = vec![0.0f64; support_size];
    for (t, feat_t) in test_feats.rows().into_iter().enumerate() {
        for (s, feat_s) in feats.rows().into_iter().enumerate() {
            dists[s] = score_distance(feat_t.dot(&feat_s), test_sq[t], support_sq[s]);
        }
        if knn_vote(&dists, &labels, cfg.k, support.num_classes) == test.labels[t] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn row_square_norms(feats: &Matrix) -> Vec<f64> {
    feats.rows().into_iter().map(|row| row.dot(&row)).collect()
}

/// Cosine distance from a dot product and the two squared norms. Either
/// vector below the norm floor pins the distance at the orthogonal value.
fn score_distance(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    let floor = NORM_FLOOR * NORM_FLOOR;
    if sq_a < floor || sq_b < floor {
        return 1.0;
    }
    1.0 - (dot / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
}

/// Majority vote among the `k` nearest entries, ties by count, then smaller
/// summed distance, then lower label. Neighbor selection orders by
/// (distance, index).
fn knn_vote(dists: &[f64], labels: &[usize], k: usize, num_classes: usize) -> usize {
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));

    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![0.0f64; num_classes];
    for &s in &order[..k] {
        counts[labels[s]] += 1;
        sums[labels[s]] += dists[s];
    }
    let mut best = usize::MAX;
    for c in 0..num_classes {
        if counts[c] == 0 {
            continue;
        }
        if best == usize::MAX
            || counts[c] > counts[best]
            || (counts[c] == counts[best] && sums[c] < sums[best])
        {
            best = c;
        }
    }
    best
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// fewer than two points or either side has zero rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 averaged over the tie group.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Attack and scoring knobs for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub attack: AttackConfig,
    pub score: TopologyScoreConfig,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            attack: AttackConfig::pgd_eval(0.05, 0.0125, 20),
            score: TopologyScoreConfig::default(),
        }
    }
}

/// The metrics report printed by the evaluate command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub natural_acc: f64,
    pub pgd20_acc: f64,
    pub margin_pgd20_acc: f64,
    pub topology_score_natural: f64,
    pub topology_score_robust: f64,
}

/// Full evaluation: accuracies on `test`, plus topology scores with
/// `support` as the kNN support set, on natural and attacked test points.
pub fn evaluate(
    model: &Mlp,
    support: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    seed: Seed,
) -> Result<EvalReport> {
    let natural_acc = accuracy(model, test)?;
    let pgd20_acc = robust_accuracy(model, test, &cfg.attack, seed.child_str("pgd"))?;
    let margin_attack = AttackConfig {
        objective: AttackObjective::Margin,
        ..cfg.attack.clone()
    };
    let margin_pgd20_acc =
        robust_accuracy(model, test, &margin_attack, seed.child_str("margin"))?;

    let support_seed = seed.child_str("score-support");
    let topology_score_natural = topology_score(model, support, test, &cfg.score, support_seed)?;
    let attacked_test = Dataset {
        x: attacks::perturb(
            model,
            &test.x,
            &test.labels,
            &cfg.attack,
            seed.child_str("score-test"),
        )?,
        labels: test.labels.clone(),
        num_classes: test.num_classes,
    };
    let topology_score_robust =
        topology_score(model, support, &attacked_test, &cfg.score, support_seed)?;

    Ok(EvalReport {
        natural_acc,
        pgd20_acc,
        margin_pgd20_acc,
        topology_score_natural,
        topology_score_robust,
    })
}

/// Writes `split,label,is_adversarial,f_0,...` rows: natural features for
/// every sample, then attacked features when an attack is given.
pub fn export_features<W: Write>(
    model: &Mlp,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    split: &str,
    seed: Seed,
    out: &mut W,
) -> Result<()> {
    check_eval_shapes(model, data)?;
    write!(out, "split,label,is_adversarial")?;
    for j in 0..model.feature_dim() {
        write!(out, ",f_{j}")?;
    }
    writeln!(out)?;

    let write_rows = |out: &mut W, feats: &Matrix, adversarial: bool| -> Result<()> {
        for (i, row) in feats.rows().into_iter().enumerate() {
            write!(out, "{split},{},{}", data.labels[i], adversarial as u8)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    };
    let (feats, _) = model.forward(&data.x);
    write_rows(out, &feats, false)?;
    if let Some(attack) = attack {
        let x_adv = attacks::perturb(model, &data.x, &data.labels, attack, seed)?;
        let (feats_adv, _) = model.forward(&x_adv);
        write_rows(out, &feats_adv, true)?;
    }
    Ok(())
}

/// One trained cell of a β sweep. `scores[i]` is the topology score at the
/// sweep's `ks[i]`.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub beta: f64,
    pub seed: u64,
    pub natural_acc: f64,
    pub scores: Vec<f64>,
}

/// β sweep outcome. Spearman correlations between β and topology score are
/// indexed `[k][seed]`; `mean_spearman[k]` averages the seeds where the
/// correlation is defined, `None` when no seed defines one.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub ks: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub per_seed_spearman: Vec<Vec<Option<f64>>>,
    pub mean_spearman: Vec<Option<f64>>,
}

/// Scoring support size for sweep cells. A support that blankets the data
/// manifold makes the kNN score insensitive to feature quality (every model
/// scores near the ceiling), so each cell subsamples its training set down
/// to this many points before scoring; k = 30 against 100 points per class
/// keeps the vote in the regime where global feature geometry matters.
pub const SWEEP_SUPPORT_SIZE: usize = 200;

/// Trains TRADES once per (β, seed) on the base config's dataset and scores
/// each run's adversarial model: natural accuracy and topology score at
/// every requested `k`, on a held-out draw of the same data spec. The score
/// support is a seeded [`SWEEP_SUPPORT_SIZE`] subsample of the training set
/// (the whole set when it is no larger). An empty `ks` means just `score.k`.
/// Cells run on worker threads; the output order and values are
/// deterministic.
pub fn sweep_beta(
    base: &TrainConfig,
    betas: &[f64],
    seeds: &[u64],
    score: &TopologyScoreConfig,
    ks: &[usize],
) -> Result<SweepResult> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(Error::config("beta list and seed list must be non-empty"));
    }
    if betas.iter().any(|b| !b.is_finite() || *b <= 0.0) {
        return Err(Error::config("betas must be finite and positive"));
    }
    let ks: Vec<usize> = if ks.is_empty() { vec![score.k] } else { ks.to_vec() };

    let mut cell_cfgs = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for (bi, &beta) in betas.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.run_id = format!("{}-s{si}-b{bi}", base.run_id);
            cfg.seed = seed;
            cfg.method.robust_kind = RobustKind::Trades;
            cfg.method.trades_beta = beta;
            cfg.method.use_topology_regularizer = false;
            cfg.method.use_absolute_relation = false;
            cfg.attack.objective = AttackObjective::KlToNatural;
            cfg.attack.random_start = true;
            cfg.validate()?;
            cell_cfgs.push((beta, seed, cfg));
        }
    }

    let outcomes = run_cells(&cell_cfgs, score, &ks)?;
    let mut cells = Vec::with_capacity(outcomes.len());
    for ((beta, seed, _), (natural_acc, scores)) in cell_cfgs.iter().zip(outcomes) {
        cells.push(SweepCell { beta: *beta, seed: *seed, natural_acc, scores });
    }

    let per_seed_spearman: Vec<Vec<Option<f64>>> = (0..ks.len())
        .map(|ki| {
            seeds
                .iter()
                .map(|&seed| {
                    let (bs, ss): (Vec<f64>, Vec<f64>) = cells
                        .iter()
                        .filter(|c| c.seed == seed)
                        .map(|c| (c.beta, c.scores[ki]))
                        .unzip();
                    spearman(&bs, &ss)
                })
                .collect()
        })
        .collect();
    let mean_spearman: Vec<Option<f64>> = per_seed_spearman
        .iter()
        .map(|row| {
            let defined: Vec<f64> = row.iter().flatten().copied().collect();
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        })
        .collect();
    Ok(SweepResult { ks, cells, per_seed_spearman, mean_spearman })
}

/// Trains and scores every cell, splitting the list over worker threads.
fn run_cells(
    cell_cfgs: &[(f64, u64, TrainConfig)],
    score: &TopologyScoreConfig,
    ks: &[usize],
) -> Result<Vec<(f64, Vec<f64>)>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cell_cfgs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<(f64, Vec<f64>)>>>> =
        (0..cell_cfgs.len()).map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cell_cfgs.len() {
                    break;
                }
                let outcome = score_cell(&cell_cfgs[i].2, score, ks);
                *results[i].lock().expect("sweep worker poisoned a result slot") = Some(outcome);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("sweep worker poisoned a result slot")
                .expect("every sweep cell was claimed by a worker")
        })
        .collect()
}

fn score_cell(
    cfg: &TrainConfig,
    score: &TopologyScoreConfig,
    ks: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let train_data = cfg.data.generate(Seed(cfg.data_seed))?;
    let test_data = cfg.data.generate(Seed(cfg.data_seed).child_str("eval"))?;
    let (_, m_adv, _) = training::train(cfg, &train_data)?;
    let natural_acc = accuracy(&m_adv, &test_data)?;
    let score_seed = Seed(cfg.seed).child_str("score");
    let support = if train_data.len() > SWEEP_SUPPORT_SIZE {
        let perm = score_seed
            .child_str("subsample")
            .rng()
            .permutation(train_data.len());
        train_data.select(&perm[..SWEEP_SUPPORT_SIZE])
    } else {
        train_data
    };
    let scores = ks
        .iter()
        .map(|&k| {
            let cfg_k = TopologyScoreConfig { k, ..score.clone() };
            topology_score(&m_adv, &support, &test_data, &cfg_k, score_seed)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((natural_acc, scores))
}
