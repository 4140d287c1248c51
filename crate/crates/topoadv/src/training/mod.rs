//! Joint training of a standard and an adversarial classifier.
//!
//! Each batch runs one optimization step for both models on a single tape:
//! the standard model sees clean inputs and minimizes cross-entropy; the
//! adversarial model sees attacked inputs and minimizes its robust loss plus
//! the weighted relation regularizer. Both losses are summed into one scalar
//! and differentiated together, but the graph is wired so that each model's
//! parameters receive gradient only from its own loss: the standard logits
//! entering the logit coupling are detached, and the standard features
//! entering the relation losses are constants unless the
//! `topology_into_standard` ablation is on. The standard model's update is
//! therefore bitwise independent of the regularizer.
//!
//! Determinism: batch order, attack noise, and per-epoch evaluation all draw
//! from named substreams of the run seed, and the batch shuffle stream does
//! not depend on the method, so method variants with the same seed see the
//! same batches in the same order. Trailing samples that do not fill a batch
//! are dropped for the epoch (the shuffle rotates them in across epochs),
//! keeping every relation graph at exactly `batch_size` nodes.

pub mod config;

use std::io::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::attacks;
use crate::autodiff::{GraphTarget, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{Mlp, StagedMlp};
use crate::numerics::rng::Seed;
use crate::numerics::{ensure_finite, Matrix};

pub use config::{DataSpec, LambdaSchedule, MethodSpec, RobustKind, TrainConfig};

use crate::datasets::Dataset;

/// Per-epoch metrics, one JSON object per line in the run's metrics file.
/// Losses are batch means; the relation loss is recorded unweighted.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub standard_loss: f64,
    pub robust_loss: f64,
    pub topology_loss: f64,
    pub lambda: f64,
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub wall_clock_seconds: f64,
}

/// Regularizer weight at epoch `t` of `total`.
///
/// The ramp is `base * 2 / (1 + exp(-(10 t / total) - 1))`, rising from
/// about 1.46 base toward 2 base. `alt_exponent` flips the printed formula's
/// ambiguous sign grouping to `-(10 t / total - 1)`, which instead rises
/// from about 0.54 base; both are monotone non-decreasing.
pub fn lambda_at(
    t: usize,
    total: usize,
    base: f64,
    schedule: LambdaSchedule,
    alt_exponent: bool,
) -> f64 {
    assert!(t < total, "epoch {t} out of range 0..{total}");
    match schedule {
        LambdaSchedule::Constant => base,
        LambdaSchedule::SigmoidRamp => {
            let ratio = 10.0 * t as f64 / total as f64;
            let exponent = if alt_exponent { -(ratio - 1.0) } else { -ratio - 1.0 };
            base * 2.0 / (1.0 + exponent.exp())
        }
    }
}

/// Learning rate at epoch `t`: the base rate decayed once per milestone
/// already reached. Milestones are epoch fractions of the total.
pub fn decayed_lr(cfg: &TrainConfig, t: usize) -> f64 {
    let passed = cfg
        .lr_milestones
        .iter()
        .filter(|&&frac| t >= (frac * cfg.epochs as f64).floor() as usize)
        .count();
    cfg.lr * cfg.lr_decay_factor.powi(passed as i32)
}

/// SGD with momentum and coupled weight decay, one state per model.
///
/// Per parameter: `g' = g + wd * p; v = mu * v + g'; p -= lr * v`.
pub struct Sgd {
    vel_w: Vec<Matrix>,
    vel_b: Vec<Matrix>,
}

impl Sgd {
    pub fn new(model: &Mlp) -> Sgd {
        Sgd {
            vel_w: model.weights.iter().map(|w| Matrix::zeros(w.raw_dim())).collect(),
            vel_b: model.biases.iter().map(|b| Matrix::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn step(
        &mut self,
        model: &mut Mlp,
        staged: &StagedMlp,
        grads: &Grads,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for layer in 0..model.num_layers() {
            apply_sgd(
                &mut model.weights[layer],
                &mut self.vel_w[layer],
                grads.wrt(staged.ws[layer]),
                lr,
                momentum,
                weight_decay,
            );
            apply_sgd(
                &mut model.biases[layer],
                &mut self.vel_b[layer],
                grads.wrt(staged.bs[layer]),
                lr,
                momentum,
                weight_decay,
            );
        }
    }
}

fn apply_sgd(
    param: &mut Matrix,
    vel: &mut Matrix,
    grad: &Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    ndarray::Zip::from(param).and(vel).and(grad).for_each(|p, v, g| {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    });
}

struct StepOutcome {
    standard_loss: f64,
    robust_loss: f64,
    topology_loss: f64,
}

/// One optimization step on one batch. See the module doc for the wiring.
fn batch_step(
    m: &mut Mlp,
    m_adv: &mut Mlp,
    opt_std: &mut Sgd,
    opt_adv: &mut Sgd,
    batch_x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    lr_t: f64,
    lambda_t: f64,
    attack_seed: Seed,
) -> Result<StepOutcome> {
    let method = &cfg.method;
    let kind = method.robust_kind;

    let x_adv = if kind.trains_adversarial_model() {
        Some(attacks::perturb(m_adv, batch_x, labels, &cfg.attack, attack_seed)?)
    } else {
        None
    };

    let mut tape = Tape::new();
    let staged_std = m.stage(&mut tape);
    let xv = tape.leaf(batch_x.clone());
    let (feat_std, logits_std) = staged_std.apply(&mut tape, xv);
    let standard_loss = tape.cross_entropy_mean(logits_std, labels);

    let mut adv_parts: Option<(StagedMlp, Var)> = None;
    let mut topology_var: Option<Var> = None;

    let total = if let Some(x_adv) = &x_adv {
        let staged_adv = m_adv.stage(&mut tape);
        let x_adv_v = tape.leaf(x_adv.clone());
        let (feat_adv, logits_adv) = staged_adv.apply(&mut tape, x_adv_v);

        let robust = match kind {
            RobustKind::StandardOnly => unreachable!("guarded by trains_adversarial_model"),
            RobustKind::VanillaAt => tape.cross_entropy_mean(logits_adv, labels),
            RobustKind::Trades => {
                let (_, logits_nat) = staged_adv.apply(&mut tape, xv);
                trades_loss(&mut tape, logits_nat, logits_adv, labels, method.trades_beta)
            }
            RobustKind::VanillaAtLbgat => {
                let ce = tape.cross_entropy_mean(logits_adv, labels);
                let coupling =
                    lbgat_coupling(&mut tape, logits_adv, logits_std, method.lbgat_gamma);
                tape.add(ce, coupling)
            }
            RobustKind::TradesLbgat => {
                let (_, logits_nat) = staged_adv.apply(&mut tape, xv);
                let base =
                    trades_loss(&mut tape, logits_nat, logits_adv, labels, method.trades_beta);
                let coupling =
                    lbgat_coupling(&mut tape, logits_adv, logits_std, method.lbgat_gamma);
                tape.add(base, coupling)
            }
        };

        let adversarial_total = if method.regularizer_active() {
            let target = if method.topology_into_standard {
                GraphTarget::Var(feat_std)
            } else {
                GraphTarget::Constant(tape.value(feat_std).clone())
            };
            let tp = if method.use_topology_regularizer {
                tape.topology_loss(target, feat_adv)?
            } else {
                tape.absolute_relation_loss(target, feat_adv)?
            };
            topology_var = Some(tp);
            let weighted = tape.scale(tp, lambda_t);
            tape.add(robust, weighted)
        } else {
            robust
        };
        adv_parts = Some((staged_adv, robust));
        tape.add(standard_loss, adversarial_total)
    } else {
        standard_loss
    };

    let outcome = StepOutcome {
        standard_loss: tape.scalar(standard_loss),
        robust_loss: adv_parts.as_ref().map_or(0.0, |(_, robust)| tape.scalar(*robust)),
        topology_loss: topology_var.map_or(0.0, |tp| tape.scalar(tp)),
    };
    for (name, v) in [
        ("standard", outcome.standard_loss),
        ("robust", outcome.robust_loss),
        ("topology", outcome.topology_loss),
    ] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!(
                "{name} loss {v} (standard {}, robust {}, topology {})",
                outcome.standard_loss, outcome.robust_loss, outcome.topology_loss
            )));
        }
    }

    let grads = tape.backward(total)?;
    if !cfg.freeze_standard {
        opt_std.step(m, &staged_std, &grads, lr_t, cfg.momentum, cfg.weight_decay);
    }
    if let Some((staged_adv, _)) = &adv_parts {
        opt_adv.step(m_adv, staged_adv, &grads, lr_t, cfg.momentum, cfg.weight_decay);
    }
    Ok(outcome)
}

/// Natural cross-entropy plus `beta` times KL from natural to adversarial
/// predictions, both under the adversarial model.
pub fn trades_loss(
    tape: &mut Tape,
    logits_natural: Var,
    logits_adversarial: Var,
    labels: &[usize],
    beta: f64,
) -> Var {
    let ce = tape.cross_entropy_mean(logits_natural, labels);
    let kl = tape.kl_mean(logits_natural, logits_adversarial);
    let weighted = tape.scale(kl, beta);
    tape.add(ce, weighted)
}

/// `gamma` times the mean squared logit gap to the standard model. The
/// standard logits are detached: the coupling pulls only the adversarial
/// model.
pub fn lbgat_coupling(
    tape: &mut Tape,
    logits_adversarial: Var,
    logits_standard: Var,
    gamma: f64,
) -> Var {
    let detached = tape.leaf(tape.value(logits_standard).clone());
    let gap = tape.sq_dist_row_mean(logits_adversarial, detached);
    tape.scale(gap, gamma)
}

/// Runs one epoch: shuffled fixed-size batches, one [`batch_step`] each,
/// then an evaluation pass on the training data. `t` is 0-based.
pub fn train_epoch(
    m: &mut Mlp,
    m_adv: &mut Mlp,
    data: &Dataset,
    cfg: &TrainConfig,
    t: usize,
    opt_std: &mut Sgd,
    opt_adv: &mut Sgd,
) -> Result<EpochRecord> {
    let start = Instant::now();
    let lr_t = decayed_lr(cfg, t);
    let lambda_t = lambda_at(
        t,
        cfg.epochs,
        cfg.method.lambda_base,
        cfg.method.lambda_schedule,
        cfg.method.lambda_exp_variant,
    );
    let num_batches = data.len() / cfg.batch_size;
    if num_batches == 0 {
        return Err(Error::config(format!(
            "batch_size {} exceeds dataset size {}",
            cfg.batch_size,
            data.len()
        )));
    }

    let perm = Seed(cfg.seed)
        .child_str("shuffle")
        .child(t as u64)
        .rng()
        .permutation(data.len());

    let (mut sum_st, mut sum_rob, mut sum_tp) = (0.0, 0.0, 0.0);
    for b in 0..num_batches {
        let indices = &perm[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let batch = data.select(indices);
        let attack_seed = Seed(cfg.seed)
            .child_str("attack")
            .child(t as u64)
            .child(b as u64);
        let outcome = batch_step(
            m,
            m_adv,
            opt_std,
            opt_adv,
            &batch.x,
            &batch.labels,
            cfg,
            lr_t,
            lambda_t,
            attack_seed,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => {
                Error::NonFinite(format!("epoch {t} batch {b}: {msg}"))
            }
            other => other,
        })?;
        sum_st += outcome.standard_loss;
        sum_rob += outcome.robust_loss;
        sum_tp += outcome.topology_loss;
    }

    let report_model: &Mlp = if cfg.method.robust_kind.trains_adversarial_model() {
        m_adv
    } else {
        m
    };
    let natural_acc = evaluation::accuracy(report_model, data)?;
    let robust_acc = evaluation::robust_accuracy(
        report_model,
        data,
        &cfg.attack,
        Seed(cfg.seed).child_str("epoch-eval").child(t as u64),
    )?;

    Ok(EpochRecord {
        epoch: t,
        standard_loss: sum_st / num_batches as f64,
        robust_loss: sum_rob / num_batches as f64,
        topology_loss: sum_tp / num_batches as f64,
        lambda: lambda_t,
        natural_acc,
        robust_acc,
        wall_clock_seconds: if cfg.record_wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

/// Trains both models from the given initializations. Writes the metrics
/// file and checkpoints into `cfg.out_dir` and returns the trained models
/// with their per-epoch records.
pub fn train_from(
    cfg: &TrainConfig,
    data: &Dataset,
    mut m: Mlp,
    mut m_adv: Mlp,
) -> Result<(Mlp, Mlp, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_model_against_data(&m, data, "standard model")?;
    check_model_against_data(&m_adv, data, "adversarial model")?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(cfg.metrics_path())?);

    let mut opt_std = Sgd::new(&m);
    let mut opt_adv = Sgd::new(&m_adv);
    let mut records = Vec::with_capacity(cfg.epochs);
    for t in 0..cfg.epochs {
        let record = train_epoch(&mut m, &mut m_adv, data, cfg, t, &mut opt_std, &mut opt_adv)?;
        let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
        writeln!(metrics, "{line}")?;
        records.push(record);

        let completed = t + 1;
        if cfg.checkpoint_every > 0
            && completed % cfg.checkpoint_every == 0
            && completed < cfg.epochs
        {
            save_checkpoints(cfg, &m, &m_adv, completed)?;
        }
    }
    metrics.flush()?;

    for w in m.weights.iter().chain(m_adv.weights.iter()) {
        ensure_finite(w, "trained parameters")?;
    }
    save_checkpoints(cfg, &m, &m_adv, cfg.epochs)?;
    Ok((m, m_adv, records))
}

/// Trains from seeded initializations (or a loaded standard checkpoint).
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(Mlp, Mlp, Vec<EpochRecord>)> {
    cfg.validate()?;
    let m = match &cfg.standard_init_ckpt {
        Some(path) => {
            let (loaded, _, _) = Mlp::load(path)?;
            if loaded.dims() != cfg.std_dims {
                return Err(Error::config(format!(
                    "checkpoint {} has dims {:?}, config expects {:?}",
                    path.display(),
                    loaded.dims(),
                    cfg.std_dims
                )));
            }
            loaded
        }
        None => Mlp::new(&cfg.std_dims, Seed(cfg.seed).child_str("standard-init"))?,
    };
    let m_adv = Mlp::new(&cfg.adv_dims, Seed(cfg.seed).child_str("adversarial-init"))?;
    train_from(cfg, data, m, m_adv)
}

fn check_model_against_data(model: &Mlp, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if model.input_dim() != data.dim() {
        return Err(Error::shape(what, format!("input dim {}", data.dim()), model.input_dim()));
    }
    if model.num_classes() != data.num_classes {
        return Err(Error::shape(
            what,
            format!("{} classes", data.num_classes),
            model.num_classes(),
        ));
    }
    Ok(())
}

fn save_checkpoints(cfg: &TrainConfig, m: &Mlp, m_adv: &Mlp, epoch: usize) -> Result<()> {
    m.save(&cfg.checkpoint_path("standard", epoch), cfg.seed, epoch as u64)?;
    if cfg.method.robust_kind.trains_adversarial_model() {
        m_adv.save(&cfg.checkpoint_path("adversarial", epoch), cfg.seed, epoch as u64)?;
    }
    Ok(())
}
