use kneeoa::svm::{
    hinge_objective, train_linear_svm, train_linear_svm_traced, train_ovr, LinearSvmModel, MulticlassSvm, Standardizer,
    SvmTrainConfig,
};
use kneeoa::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Five Gaussian clusters on a circle of radius 10, one per grade.
fn clusters(per_grade: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for g in 0..5u8 {
        let a = g as f64 * std::f64::consts::TAU / 5.0;
        for _ in 0..per_grade {
            xs.push(vec![
                10.0 * a.cos() + noise.sample(&mut rng),
                10.0 * a.sin() + noise.sample(&mut rng),
            ]);
            ys.push(g);
        }
    }
    (xs, ys)
}

fn binary_set(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<i8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys = xs
        .iter()
        .enumerate()
        .map(|(i, x)| if x[0] + 0.5 * x[1] > 0.0 || i == 0 { 1 } else { -1 })
        .collect();
    (xs, ys)
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dim)
}

proptest! {
    #[test]
    fn decision_function_is_affine(
        w in vector(6), b in -3.0f64..3.0, x in vector(6), x2 in vector(6), alpha in 0.0f64..1.0,
    ) {
        let m = LinearSvmModel::new(w, b, Standardizer::Identity).unwrap();
        let mix: Vec<f64> = x.iter().zip(&x2).map(|(p, q)| alpha * p + (1.0 - alpha) * q).collect();
        let lhs = m.decision_function(&mix).unwrap();
        let rhs = alpha * m.decision_function(&x).unwrap() + (1.0 - alpha) * m.decision_function(&x2).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn grade_argmax_ignores_positive_rescaling(
        ws in prop::collection::vec((vector(4), -2.0f64..2.0), 5), x in vector(4), k in 0.01f64..100.0,
    ) {
        let mc = MulticlassSvm::new(ws.iter().map(|(w, b)| LinearSvmModel::new(w.clone(), *b, Standardizer::Identity).unwrap()).collect()).unwrap();
        let scaled = MulticlassSvm::new(
            ws.iter()
                .map(|(w, b)| LinearSvmModel::new(w.iter().map(|v| v * k).collect(), b * k, Standardizer::Identity).unwrap())
                .collect(),
        )
        .unwrap();
        prop_assert_eq!(mc.predict_grade(&x).unwrap(), scaled.predict_grade(&x).unwrap());
    }

    #[test]
    fn best_objective_never_increases(seed in 0u64..500, c in 0.01f64..10.0) {
        let (xs, ys) = binary_set(40, 3, seed);
        let cfg = SvmTrainConfig { c, epochs: 15, seed, ..SvmTrainConfig::default() };
        let (model, trace) = train_linear_svm_traced(&xs, &ys, &cfg).unwrap();
        prop_assert_eq!(trace.best_objective.len(), 15);
        for w in trace.best_objective.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        let std: Vec<Vec<f64>> = xs.iter().map(|x| model.standardizer.apply(x)).collect();
        let yf: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
        let fin = hinge_objective(&model.weights, model.bias, &std, &yf, c);
        let best = *trace.best_objective.last().unwrap();
        prop_assert!(fin <= best * 1.01 + 1e-12, "final {} best {}", fin, best);
    }
}

#[test]
fn retraining_is_bit_identical_and_order_free() {
    let (xs, ys) = binary_set(60, 5, 3);
    let cfg = SvmTrainConfig {
        seed: 11,
        ..SvmTrainConfig::default()
    };
    let a = train_linear_svm(&xs, &ys, &cfg).unwrap();
    let b = train_linear_svm(&xs, &ys, &cfg).unwrap();
    assert_eq!(
        a.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.bias.to_bits(), b.bias.to_bits());

    let mut perm: Vec<usize> = (0..xs.len()).collect();
    perm.reverse();
    perm.rotate_left(17);
    let px: Vec<Vec<f64>> = perm.iter().map(|&i| xs[i].clone()).collect();
    let py: Vec<i8> = perm.iter().map(|&i| ys[i]).collect();
    assert_eq!(train_linear_svm(&px, &py, &cfg).unwrap(), a);
}

#[test]
fn clusters_are_graded_almost_perfectly() {
    let (xs, ys) = clusters(60, 5);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (i, (x, y)) in xs.into_iter().zip(ys).enumerate() {
        let part = if i % 10 < 7 { &mut train } else { &mut test };
        part.0.push(x);
        part.1.push(y);
    }
    let mc = train_ovr(&train.0, &train.1, &SvmTrainConfig::default()).unwrap();
    let hits = test
        .0
        .iter()
        .zip(&test.1)
        .filter(|(x, y)| mc.predict_grade(x).unwrap() == **y)
        .count();
    let acc = hits as f64 / test.1.len() as f64;
    assert!(acc >= 0.95, "cluster accuracy {acc}");
}

#[test]
fn ovr_needs_every_grade() {
    let xs = vec![vec![1.0]; 4];
    assert!(matches!(
        train_ovr(&xs, &[0, 0, 0, 0], &SvmTrainConfig::default()),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        train_ovr(&xs, &[0, 1, 2, 3], &SvmTrainConfig::default()),
        Err(Error::Data(_))
    ));
}

#[test]
fn files_round_trip_exactly() {
    let (xs, ys) = clusters(10, 1);
    let mc = train_ovr(&xs, &ys, &SvmTrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ovr.txt");
    mc.save(&path).unwrap();
    let back = MulticlassSvm::load(&path).unwrap();
    assert_eq!(back, mc);
    let again = dir.path().join("again.txt");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let single = dir.path().join("one.txt");
    mc.models[2].save(&single).unwrap();
    assert_eq!(LinearSvmModel::load(&single).unwrap(), mc.models[2]);
    let text = std::fs::read_to_string(&single).unwrap();
    std::fs::write(&single, &text[..text.len() / 2]).unwrap();
    assert!(matches!(LinearSvmModel::load(&single), Err(Error::Corrupt { .. })));
    std::fs::write(&single, text.replacen("svm-v1", "svm-v0", 1)).unwrap();
    assert!(matches!(LinearSvmModel::load(&single), Err(Error::Version { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let (xs, ys) = binary_set(10, 2, 0);
    for cfg in [
        SvmTrainConfig {
            c: 0.0,
            ..SvmTrainConfig::default()
        },
        SvmTrainConfig {
            epochs: 0,
            ..SvmTrainConfig::default()
        },
        SvmTrainConfig {
            eta0: -1.0,
            ..SvmTrainConfig::default()
        },
    ] {
        assert!(matches!(train_linear_svm(&xs, &ys, &cfg), Err(Error::Argument(_))));
    }
}
