#![allow(dead_code)]

use kneeoa::detect::PreprocessConfig;
use kneeoa::minicnn::{backward_with_loss, batch_loss, HeadKind, LayerKind, LayerSpec, LossKind, Network, Tensor};
use kneeoa::pipeline::{synth_images, DetectionImage, RunConfig, SynthConfig};
use kneeoa::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pixel-membership Jaccard: counts cells of the joint bounding rectangle.
pub fn brute_jaccard(a: &BBox, b: &BBox) -> f64 {
    let (x0, y0) = (a.x.min(b.x), a.y.min(b.y));
    let (x1, y1) = ((a.x + a.w).max(b.x + b.w), (a.y + a.h).max(b.y + b.h));
    let inside = |r: &BBox, x: i64, y: i64| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    inter as f64 / union as f64
}

/// Seeded synthetic radiographs reduced to detection scale.
pub fn detection_corpus(per_grade: usize, seed: u64) -> Vec<DetectionImage> {
    let cfg = SynthConfig {
        per_grade: [per_grade; 5],
        seed,
        ..SynthConfig::default()
    };
    synth_images(&cfg)
        .unwrap()
        .map(|s| {
            let s = s.unwrap();
            DetectionImage::new(
                &s.image_id,
                s.grade,
                &s.image,
                s.annotations.to_vec(),
                &PreprocessConfig::default(),
            )
            .unwrap()
        })
        .collect()
}

/// A full run over a 50-image corpus with short training schedules.
pub fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.per_grade = [10; 5];
    cfg.synth.seed = 3;
    cfg.detect.templates_per_grade = 2;
    cfg.detect.c_sweep = vec![1.0];
    cfg.pretrain.per_grade = 4;
    cfg.pretrain.epochs = 2;
    cfg.features.taps = vec!["fc-feat".into(), "pool2".into()];
    cfg.features.c_sweep = vec![];
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 8;
    cfg
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(-20..40),
        rng.random_range(-20..40),
        rng.random_range(1..30),
        rng.random_range(1..30),
    )
    .unwrap()
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinds: Vec<&'static str>,
    pub loss: Option<LossKind>,
}

fn kind_name(k: &LayerKind) -> &'static str {
    match k {
        LayerKind::Conv { .. } => "conv",
        LayerKind::MaxPool { .. } => "maxpool",
        LayerKind::Relu => "relu",
        LayerKind::Fc { .. } => "fc",
        LayerKind::LinearHead { .. } => "linear-head",
    }
}

/// Random small network touching every layer kind, with the head picked by
/// seed parity.
pub fn random_net(seed: u64) -> (Network, Vec<(Tensor, u8)>, LossKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=2);
    let h = rng.random_range(6..=9);
    let w = rng.random_range(6..=9);
    let conv = |rng: &mut ChaCha8Rng| LayerKind::Conv {
        out_channels: rng.random_range(2..=3),
        kernel: rng.random_range(1..=3),
        stride: rng.random_range(1..=2),
        pad: rng.random_range(0..=1),
    };
    let mut specs = vec![
        LayerSpec::new("c1", conv(&mut rng)),
        LayerSpec::new("r1", LayerKind::Relu),
        LayerSpec::new(
            "p1",
            LayerKind::MaxPool {
                kernel: 2,
                stride: rng.random_range(1..=2),
            },
        ),
    ];
    if rng.random_bool(0.5) {
        specs.push(LayerSpec::new(
            "c2",
            LayerKind::Conv {
                out_channels: 2,
                kernel: 1 + 2 * rng.random_range(0..=1),
                stride: 1,
                pad: 1,
            },
        ));
    }
    specs.push(LayerSpec::new(
        "f1",
        LayerKind::Fc {
            out: rng.random_range(3..=6),
        },
    ));
    specs.push(LayerSpec::new("r2", LayerKind::Relu));
    let (head, loss) = if seed.is_multiple_of(2) {
        (HeadKind::Softmax5, LossKind::SoftmaxCrossEntropy)
    } else {
        (HeadKind::Regression1, LossKind::Euclidean)
    };
    specs.push(LayerSpec::new(
        "head",
        LayerKind::LinearHead {
            out: head.outputs().unwrap(),
        },
    ));
    let mut net = Network::new([c, h, w], specs, head, seed).unwrap();
    // Zero biases put padded conv outputs exactly on the ReLU kink.
    let names: Vec<String> = net
        .layers()
        .iter()
        .filter(|l| l.params.is_some())
        .map(|l| l.name().to_string())
        .collect();
    for name in names {
        for b in &mut net.params_mut(&name).unwrap().bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let batch = (0..rng.random_range(1..=3))
        .map(|_| {
            let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            (Tensor::new(vec![c, h, w], data).unwrap(), rng.random_range(0..5u8))
        })
        .collect();
    (net, batch, loss)
}

/// Central differences of the mean batch loss against every analytic
/// parameter gradient. Entries where both values are below `1e-9` in
/// magnitude count as agreeing zeros.
pub fn gradient_check(seed: u64) -> GradCheck {
    let (mut net, batch, loss) = random_net(seed);
    let (grads, _) = backward_with_loss(&net, &batch, loss).unwrap();
    let eps = 1e-5;
    let mut out = GradCheck {
        kinds: net.layers().iter().map(|l| kind_name(&l.spec.kind)).collect(),
        loss: Some(loss),
        ..Default::default()
    };
    let names: Vec<String> = net
        .layers()
        .iter()
        .filter(|l| l.params.is_some())
        .map(|l| l.name().to_string())
        .collect();
    for name in names {
        let analytic: Vec<f64> = grads.get(&name).unwrap().iter().copied().collect();
        for (k, a) in analytic.iter().enumerate() {
            let probe = |net: &mut Network, delta: f64| {
                *net.params_mut(&name).unwrap().iter_mut().nth(k).unwrap() += delta;
            };
            probe(&mut net, eps);
            let up = batch_loss(&net, &batch, loss).unwrap();
            probe(&mut net, -2.0 * eps);
            let down = batch_loss(&net, &batch, loss).unwrap();
            probe(&mut net, eps);
            let numeric = (up - down) / (2.0 * eps);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (a - numeric).abs() / scale };
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        }
    }
    out
}
