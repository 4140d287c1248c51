//! Trained-model directional properties: slow, multi-seed checks that the
//! training pipeline produces models with the qualitative behavior the
//! method is built around. Thresholds are generous on purpose; these guard
//! directions, not exact numbers.

use topoadv::attacks::AttackConfig;
use topoadv::evaluation;
use topoadv::model::Mlp;
use topoadv::numerics::rng::Seed;
use topoadv::training::{self, DataSpec, RobustKind, TrainConfig};
use topoadv::Matrix;

fn base_cfg(run_id: &str, out: &std::path::Path, seed: u64) -> TrainConfig {
    TrainConfig {
        run_id: run_id.into(),
        out_dir: out.to_path_buf(),
        seed,
        data_seed: seed,
        ..TrainConfig::default()
    }
}

#[test]
fn standard_training_fits_separable_blobs() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5u64 {
        let mut cfg = base_cfg(&format!("blobs-{seed}"), dir.path(), seed);
        cfg.method.robust_kind = RobustKind::StandardOnly;
        cfg.std_dims = vec![2, 32, 16, 3];
        cfg.adv_dims = vec![2, 32, 16, 3];
        cfg.data = DataSpec::GaussianBlobs { n: 600, classes: 3, spread: 0.08 };
        let data = cfg.data.generate(Seed(cfg.data_seed)).unwrap();
        let (model, _, _) = training::train(&cfg, &data).unwrap();
        let test = cfg.data.generate(Seed(cfg.data_seed).child_str("eval")).unwrap();
        let acc = evaluation::accuracy(&model, &test).unwrap();
        assert!(acc >= 0.95, "seed {seed}: natural accuracy {acc} below 0.95");
    }
}

#[test]
fn vanilla_at_beats_the_standard_model_under_attack() {
    // The evaluation perturbation is sized to bridge the inter-moon gap:
    // the standard model collapses under PGD-20 while adversarial training
    // holds ground. The robust accuracy never exceeds the natural one on
    // average.
    let dir = tempfile::tempdir().unwrap();
    let eval_attack = AttackConfig::pgd_eval(0.2, 0.05, 20);
    let mut standard_robust = Vec::new();
    let mut natural_by_kind: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];
    let mut robust_by_kind: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];

    for seed in 0..5u64 {
        let mut pair = Vec::new();
        for (i, kind) in [RobustKind::StandardOnly, RobustKind::VanillaAt]
            .into_iter()
            .enumerate()
        {
            let mut cfg = base_cfg(&format!("van-{i}-{seed}"), dir.path(), seed);
            cfg.method.robust_kind = kind;
            cfg.epochs = 30;
            cfg.data = DataSpec::TwoMoons { n: 2000, noise: 0.1 };
            cfg.attack = AttackConfig::pgd(0.15, 0.0375, 10);
            let data = cfg.data.generate(Seed(cfg.data_seed)).unwrap();
            let (m, m_adv, _) = training::train(&cfg, &data).unwrap();
            let model = if kind.trains_adversarial_model() { m_adv } else { m };

            let test = cfg.data.generate(Seed(cfg.data_seed).child_str("eval")).unwrap();
            let natural = evaluation::accuracy(&model, &test).unwrap();
            let robust =
                evaluation::robust_accuracy(&model, &test, &eval_attack, Seed(0)).unwrap();
            natural_by_kind[i].push(natural);
            robust_by_kind[i].push(robust);
            pair.push(robust);
        }
        assert!(
            pair[1] > pair[0],
            "seed {seed}: vanilla robust {} not above standard robust {}",
            pair[1],
            pair[0]
        );
        standard_robust.push(pair[0]);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let standard_mean = mean(&standard_robust);
    assert!(
        standard_mean < 0.1,
        "standard model robust accuracy {standard_mean} not near zero"
    );
    for i in 0..2 {
        assert!(
            mean(&robust_by_kind[i]) <= mean(&natural_by_kind[i]),
            "robust accuracy above natural accuracy on average for kind {i}"
        );
    }
}

/// Full-batch multinomial logistic regression, the linear baseline the
/// model type deliberately does not offer.
fn train_linear(x: &Matrix, labels: &[usize], classes: usize) -> (Matrix, Matrix) {
    let n = x.nrows() as f64;
    let mut w = Matrix::zeros((x.ncols(), classes));
    let mut b = Matrix::zeros((1, classes));
    for _ in 0..500 {
        let mut p = x.dot(&w) + &b;
        for mut row in p.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        for (i, &label) in labels.iter().enumerate() {
            p[[i, label]] -= 1.0;
        }
        let lr = 0.5;
        w = w - x.t().dot(&p).mapv(|v| lr * v / n);
        b = b - p.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)).mapv(|v| lr * v / n);
    }
    (w, b)
}

fn linear_accuracy(w: &Matrix, b: &Matrix, data: &topoadv::datasets::Dataset) -> f64 {
    let logits = data.x.dot(w) + b;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn moons_need_a_hidden_layer() {
    // Nonlinear separability check: a converged linear classifier stalls
    // where a small trained MLP does not.
    let dir = tempfile::tempdir().unwrap();
    let data_spec = DataSpec::TwoMoons { n: 1000, noise: 0.1 };
    let data = data_spec.generate(Seed(0)).unwrap();
    let test = data_spec.generate(Seed(0).child_str("eval")).unwrap();

    let (w, b) = train_linear(&data.x, &data.labels, data.num_classes);
    let linear_acc = linear_accuracy(&w, &b, &test);

    let mut cfg = base_cfg("mlp", dir.path(), 0);
    cfg.method.robust_kind = RobustKind::StandardOnly;
    cfg.epochs = 50;
    cfg.data = data_spec;
    let (model, _, _) = training::train(&cfg, &data).unwrap();
    let mlp_acc = evaluation::accuracy(&model, &test).unwrap();

    assert!(linear_acc < 0.95, "linear classifier at {linear_acc} should stall below 0.95");
    assert!(mlp_acc >= 0.97, "mlp at {mlp_acc} should reach 0.97");
}

#[test]
fn loading_a_saved_model_reproduces_its_predictions() {
    // Round trip through the checkpoint format at the integration level.
    let dir = tempfile::tempdir().unwrap();
    let model = Mlp::new(&[2, 16, 8, 3], Seed(42)).unwrap();
    let path = dir.path().join("round.ckpt");
    model.save(&path, 7, 3).unwrap();
    let (loaded, seed, epoch) = Mlp::load(&path).unwrap();
    assert_eq!(seed, 7);
    assert_eq!(epoch, 3);
    let x = DataSpec::TwoMoons { n: 64, noise: 0.1 }.generate(Seed(1)).unwrap().x;
    assert_eq!(model.predict(&x), loaded.predict(&x));
}
