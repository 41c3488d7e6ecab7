use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backprop::{accumulate, Gradients, LossKind, Workspace};
use super::network::{HeadKind, Network, Params};
use super::Tensor;
use crate::error::{arg, data, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 20,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(arg("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(arg("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(arg(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·mult·v`. Layers with multiplier 0
/// are skipped entirely.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: TrainConfig,
    velocity: Vec<Option<Params>>,
}

impl Sgd {
    pub fn new(net: &Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: net
                .layers()
                .iter()
                .map(|l| l.params.as_ref().map(Params::zeros_like))
                .collect(),
        })
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.slots().len() != net.layers().len() || self.velocity.len() != net.layers().len() {
            return Err(arg("gradients do not cover the network's layers"));
        }
        let mu = self.cfg.momentum;
        for ((layer, g), v) in net.layers_mut().iter_mut().zip(grads.slots()).zip(&mut self.velocity) {
            let Some(p) = layer.params.as_mut() else { continue };
            let (Some(g), Some(v)) = (g, v.as_mut()) else {
                return Err(arg(format!("missing gradient for layer {}", layer.spec.name)));
            };
            if g.len() != p.len() {
                return Err(arg(format!("gradient size mismatch for layer {}", layer.spec.name)));
            }
            let mult = layer.spec.lr_mult;
            if mult == 0.0 {
                continue;
            }
            let step = self.cfg.lr * mult;
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vv = mu * *vv + gv;
                *pv -= step * *vv;
            }
        }
        Ok(())
    }
}

/// One-shot update without momentum state.
pub fn sgd_step(net: &mut Network, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    if grads.names().len() != net.layers().len() {
        return Err(arg("gradients do not cover the network's layers"));
    }
    Sgd::new(net, *cfg)?.step(net, grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for a softmax head, MSE for a regression head.
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurves {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose snapshot was returned.
    pub best_epoch: usize,
}

impl LearningCurves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_metric\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.10},{:.10},{:.10}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_metric
            ));
        }
        s
    }
}

/// Grade-valued prediction: the most probable class (lowest on ties) for a
/// softmax head, the raw output for a regression head.
pub fn predict(net: &Network, input: &Tensor) -> Result<f64> {
    let out = net.forward(input)?.output;
    let v = out.data();
    Ok(match net.head() {
        HeadKind::Softmax5 => crate::svm::argmax_lowest(v) as f64,
        HeadKind::Regression1 => v[0],
        HeadKind::None => return Err(arg("network has no prediction head")),
    })
}

pub fn predict_all(net: &Network, inputs: &[(Tensor, u8)]) -> Result<Vec<f64>> {
    inputs.iter().map(|(x, _)| predict(net, x)).collect()
}

/// `(loss, metric)` over a labelled set.
pub fn evaluate(net: &Network, set: &[(Tensor, u8)], loss: LossKind) -> Result<(f64, f64)> {
    let l = super::batch_loss(net, set, loss)?;
    let preds = predict_all(net, set)?;
    let metric = match loss {
        LossKind::SoftmaxCrossEntropy => {
            preds.iter().zip(set).filter(|(p, (_, y))| **p == *y as f64).count() as f64 / set.len() as f64
        }
        LossKind::Euclidean => {
            preds
                .iter()
                .zip(set)
                .map(|(p, (_, y))| (p - *y as f64).powi(2))
                .sum::<f64>()
                / set.len() as f64
        }
    };
    Ok((l, metric))
}

/// Trains with seeded per-epoch shuffling and returns the snapshot with the
/// best validation metric (earliest epoch on ties) plus the full curves.
pub fn finetune(
    net: &Network,
    train: &[(Tensor, u8)],
    val: &[(Tensor, u8)],
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<(Network, LearningCurves)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(data("finetune needs non-empty train and validation splits"));
    }
    if LossKind::for_head(net.head()) != Some(loss) {
        return Err(arg(format!("loss {loss:?} does not match head {}", net.head())));
    }
    let want: usize = net.input_shape().iter().product();
    if let Some((x, _)) = train.iter().chain(val).find(|(x, _)| x.len() != want) {
        return Err(arg(format!("input shape {:?} does not match network input", x.shape())));
    }
    let better = |a: f64, b: f64| match loss {
        LossKind::SoftmaxCrossEntropy => a > b,
        LossKind::Euclidean => a < b,
    };

    let mut net = net.clone();
    let mut sgd = Sgd::new(&net, *cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut ws = Workspace::default();
    let mut curves = LearningCurves::default();
    let mut best: Option<(f64, Network)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(&net);
            for &i in chunk {
                let (x, y) = &train[i];
                total += accumulate(&net, x.data(), *y, loss, &mut grads, &mut ws)?;
            }
            grads.scale(1.0 / chunk.len() as f64);
            sgd.step(&mut net, &grads)?;
        }
        let (val_loss, val_metric) = evaluate(&net, val, loss)?;
        curves.epochs.push(EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_metric,
        });
        if best.as_ref().is_none_or(|(m, _)| better(val_metric, *m)) {
            best = Some((val_metric, net.clone()));
            curves.best_epoch = epoch;
        }
    }
    Ok((best.unwrap().1, curves))
}
