use kneeoa::minicnn::{
    backward, evaluate, extract_features, finetune, load_model, loss_euclidean, loss_softmax_ce, model_bytes,
    parse_model, replace_head, save_model, sgd_step, softmax, HeadKind, LayerKind, LayerSpec, LossKind, Network,
    Tensor, TrainConfig, HEAD_LAYER,
};
use kneeoa::{Error, GrayImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 12;

/// Grade `g` draws a bright horizontal band `g + 1` rows thick at a random
/// height over noise.
fn band_task(n: usize, seed: u64) -> Vec<(Tensor, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let g = (i % 5) as u8;
            let top = rng.random_range(0..SIDE - g as usize - 1);
            let data = (0..SIDE * SIDE)
                .map(|k| {
                    let row = k / SIDE;
                    let band = if (top..=top + g as usize).contains(&row) {
                        0.6
                    } else {
                        0.0
                    };
                    band + rng.random_range(-0.2..0.2)
                })
                .collect();
            (Tensor::new(vec![1, SIDE, SIDE], data).unwrap(), g)
        })
        .collect()
}

fn small_net(head: HeadKind, seed: u64) -> Network {
    let specs = vec![
        LayerSpec::new(
            "conv",
            LayerKind::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
        ),
        LayerSpec::new("relu", LayerKind::Relu),
        LayerSpec::new("pool", LayerKind::MaxPool { kernel: 2, stride: 2 }),
        LayerSpec::new("fc", LayerKind::Fc { out: 16 }),
        LayerSpec::new("fc-relu", LayerKind::Relu),
        LayerSpec::new(
            HEAD_LAYER,
            LayerKind::LinearHead {
                out: head.outputs().unwrap(),
            },
        ),
    ];
    Network::new([1, SIDE, SIDE], specs, head, seed).unwrap()
}

fn param_bits(net: &Network, name: &str) -> Vec<u64> {
    net.layer(name)
        .unwrap()
        .params
        .as_ref()
        .unwrap()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 5)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_head_outputs_sum_to_one(seed in 0u64..200) {
        let net = small_net(HeadKind::Softmax5, seed);
        let (x, _) = band_task(1, seed).pop().unwrap();
        let out = net.forward(&x).unwrap().output;
        prop_assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences(logits in prop::collection::vec(-4.0f64..4.0, 5), label in 0u8..5) {
        let (_, grad) = loss_softmax_ce(&logits, label).unwrap();
        for k in 0..5 {
            let eps = 1e-6;
            let mut up = logits.clone();
            up[k] += eps;
            let mut down = logits.clone();
            down[k] -= eps;
            let num = (loss_softmax_ce(&up, label).unwrap().0 - loss_softmax_ce(&down, label).unwrap().0) / (2.0 * eps);
            let scale = num.abs().max(grad[k].abs()).max(1e-8);
            prop_assert!((num - grad[k]).abs() / scale < 1e-4);
        }
    }

    #[test]
    fn euclidean_loss_and_gradient(pred in -10.0f64..10.0, label in 0u8..5) {
        let (loss, grad) = loss_euclidean(&[pred], label as f64).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, pred == label as f64);
        let eps = 1e-6;
        let num = (loss_euclidean(&[pred + eps], label as f64).unwrap().0
            - loss_euclidean(&[pred - eps], label as f64).unwrap().0)
            / (2.0 * eps);
        prop_assert!((num - grad[0]).abs() / num.abs().max(grad[0].abs()).max(1e-3) < 1e-6);
    }
}

#[test]
fn uniform_logits_cost_ln_five() {
    let (loss, _) = loss_softmax_ce(&[0.7; 5], 3).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-9);
    let (sure, _) = loss_softmax_ce(&[50.0, 0.0, 0.0, 0.0, 0.0], 0).unwrap();
    assert!(sure < 1e-9);
    assert_eq!(loss_euclidean(&[1.5], 0.0).unwrap().0, 2.25);
    assert!(loss_softmax_ce(&[0.0; 5], 5).is_err());
}

#[test]
fn single_parameter_step_is_exact() {
    let specs = vec![LayerSpec::new(HEAD_LAYER, LayerKind::LinearHead { out: 1 })];
    let mut net = Network::new([1, 1, 1], specs, HeadKind::Regression1, 0).unwrap();
    let p = net.params_mut(HEAD_LAYER).unwrap();
    p.weights[0] = 0.5;
    p.bias[0] = 0.0;
    let batch = vec![(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(), 0u8)];
    let grads = backward(&net, &batch, LossKind::Euclidean).unwrap();
    let g = grads.get(HEAD_LAYER).unwrap().weights[0];
    assert_eq!(g, 4.0);
    let cfg = TrainConfig {
        lr: 0.1,
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let mut boosted = net.clone();
    boosted.set_lr_mult(HEAD_LAYER, 10.0).unwrap();
    sgd_step(&mut net, &grads, &cfg).unwrap();
    sgd_step(&mut boosted, &grads, &cfg).unwrap();
    let w1 = net.layer(HEAD_LAYER).unwrap().params.as_ref().unwrap().weights[0];
    let w10 = boosted.layer(HEAD_LAYER).unwrap().params.as_ref().unwrap().weights[0];
    assert_eq!(w1, 0.5 - 0.1 * g);
    assert!(((0.5 - w10) / (0.5 - w1) - 10.0).abs() < 1e-12);
}

#[test]
fn frozen_layers_survive_finetune_bit_for_bit() {
    let train = band_task(40, 1);
    let val = band_task(10, 2);
    let mut net = small_net(HeadKind::Softmax5, 3);
    net.set_lr_mult("conv", 0.0).unwrap();
    net.set_lr_mult("fc", 0.0).unwrap();
    let before = (
        param_bits(&net, "conv"),
        param_bits(&net, "fc"),
        param_bits(&net, HEAD_LAYER),
    );
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 4,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (tuned, _) = finetune(&net, &train, &val, LossKind::SoftmaxCrossEntropy, &cfg).unwrap();
    assert_eq!(param_bits(&tuned, "conv"), before.0);
    assert_eq!(param_bits(&tuned, "fc"), before.1);
    assert_ne!(param_bits(&tuned, HEAD_LAYER), before.2);
}

#[test]
fn classification_finetune_gains_twenty_points() {
    let train = band_task(200, 10);
    let val = band_task(50, 11);
    let net = small_net(HeadKind::Softmax5, 4);
    let (_, initial) = evaluate(&net, &val, LossKind::SoftmaxCrossEntropy).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (_, curves) = finetune(&net, &train, &val, LossKind::SoftmaxCrossEntropy, &cfg).unwrap();
    let last = curves.epochs.last().unwrap().val_metric;
    assert_eq!(curves.epochs.len(), 20);
    assert!(last >= initial + 0.20, "accuracy {initial} -> {last}");
}

#[test]
fn regression_finetune_mse_drops_each_early_epoch() {
    let train = band_task(200, 12);
    let val = band_task(50, 13);
    let net = small_net(HeadKind::Regression1, 5);
    let cfg = TrainConfig {
        lr: 0.002,
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (_, initial) = evaluate(&net, &val, LossKind::Euclidean).unwrap();
    let (_, curves) = finetune(&net, &train, &val, LossKind::Euclidean, &cfg).unwrap();
    let mut prev = initial;
    for e in &curves.epochs {
        assert!(e.val_metric < prev, "{:?}", curves.epochs);
        prev = e.val_metric;
    }
}

#[test]
fn finetune_is_reproducible_and_rejects_bad_input() {
    let train = band_task(30, 1);
    let val = band_task(10, 2);
    let net = small_net(HeadKind::Regression1, 3);
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = finetune(&net, &train, &val, LossKind::Euclidean, &cfg).unwrap();
    let b = finetune(&net, &train, &val, LossKind::Euclidean, &cfg).unwrap();
    assert_eq!(model_bytes(&a.0), model_bytes(&b.0));
    assert_eq!(a.1, b.1);
    assert!(matches!(
        finetune(
            &net,
            &train,
            &val,
            LossKind::Euclidean,
            &TrainConfig { epochs: 0, ..cfg }
        ),
        Err(Error::Argument(_))
    ));
    assert!(matches!(
        finetune(&net, &[], &val, LossKind::Euclidean, &cfg),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        finetune(&net, &train, &val, LossKind::SoftmaxCrossEntropy, &cfg),
        Err(Error::Argument(_))
    ));
}

#[test]
fn replace_head_keeps_the_body() {
    let base = Network::standard(HeadKind::Softmax5, 7).unwrap();
    let reg = replace_head(&base, HeadKind::Regression1, 1).unwrap();
    let cls = replace_head(&base, HeadKind::Softmax5, 1).unwrap();
    for l in base.layers().iter().filter(|l| l.name() != HEAD_LAYER) {
        for net in [&reg, &cls] {
            let same = net.layer(l.name()).unwrap();
            assert_eq!(same.params, l.params);
            assert_eq!(same.spec.lr_mult, 1.0);
        }
    }
    assert_eq!(reg.layer(HEAD_LAYER).unwrap().spec.lr_mult, 10.0);
    assert_ne!(
        cls.layer(HEAD_LAYER).unwrap().params,
        base.layer(HEAD_LAYER).unwrap().params
    );
    let img = GrayImage::from_fn(64, 64, |x, y| ((x * y) % 7) as f64 / 7.0).unwrap();
    let x = Tensor::from_image(&img);
    assert_eq!(reg.forward(&x).unwrap().output.len(), 1);
    let p = cls.forward(&x).unwrap().output;
    assert_eq!(p.len(), 5);
    assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(replace_head(&base, HeadKind::Regression1, 1).unwrap(), reg);
}

#[test]
fn feature_taps_have_layer_widths() {
    let net = Network::standard(HeadKind::Softmax5, 0).unwrap();
    let img = GrayImage::from_fn(64, 64, |x, _| x as f64 / 63.0).unwrap();
    assert_eq!(extract_features(&net, &img, "fc-feat").unwrap().len(), 32);
    assert_eq!(extract_features(&net, &img, "pool2").unwrap().len(), 16 * 16 * 16);
    assert_eq!(extract_features(&net, &img, "conv2").unwrap().len(), 16 * 32 * 32);
    assert_eq!(
        extract_features(&net, &img, "pool2").unwrap(),
        extract_features(&net, &img.clone(), "pool2").unwrap()
    );
    assert!(matches!(extract_features(&net, &img, "fc7"), Err(Error::Argument(_))));
}

#[test]
fn basic_layers_behave() {
    let pool = Network::new(
        [1, 2, 2],
        vec![LayerSpec::new("p", LayerKind::MaxPool { kernel: 2, stride: 2 })],
        HeadKind::None,
        0,
    )
    .unwrap();
    let out = pool
        .forward(&Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap())
        .unwrap();
    assert_eq!(out.get("p").unwrap().data(), &[3.0]);

    let relu = Network::new([1, 1, 3], vec![LayerSpec::new("r", LayerKind::Relu)], HeadKind::None, 0).unwrap();
    let out = relu
        .forward(&Tensor::new(vec![1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap())
        .unwrap();
    assert_eq!(out.get("r").unwrap().data(), &[0.0, 0.0, 2.0]);

    let conv = LayerKind::Conv {
        out_channels: 1,
        kernel: 1,
        stride: 1,
        pad: 0,
    };
    let mut id = Network::new([1, 2, 3], vec![LayerSpec::new("c", conv)], HeadKind::None, 0).unwrap();
    let p = id.params_mut("c").unwrap();
    p.weights[0] = 1.0;
    p.bias[0] = 0.0;
    let x = Tensor::new(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    assert_eq!(id.forward(&x).unwrap().get("c").unwrap().data(), x.data());
}

#[test]
fn model_files_are_canonical() {
    let net = replace_head(
        &Network::standard(HeadKind::Softmax5, 2).unwrap(),
        HeadKind::Regression1,
        3,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.cnn");
    let b = dir.path().join("b.cnn");
    save_model(&net, &a).unwrap();
    let loaded = load_model(&a).unwrap();
    save_model(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let img = GrayImage::from_fn(64, 64, |x, y| ((x + 2 * y) % 11) as f64 / 11.0).unwrap();
    let x = Tensor::from_image(&img);
    assert_eq!(loaded.forward(&x).unwrap(), net.forward(&x).unwrap());

    let bytes = std::fs::read(&a).unwrap();
    assert!(matches!(
        parse_model(&bytes[..bytes.len() - 3], &a),
        Err(Error::Corrupt { .. })
    ));
    assert!(matches!(parse_model(&bytes[..40], &a), Err(Error::Corrupt { .. })));
    let mut other = bytes.clone();
    other[5] = b'9';
    assert!(matches!(parse_model(&other, &a), Err(Error::Version { .. })));
}
