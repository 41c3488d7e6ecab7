use super::layers;
use super::network::{Cache, HeadKind, LayerKind, Network, Params};
use super::Tensor;
use crate::error::{arg, Result};

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of softmax(logits) against `label`, with gradient
/// `softmax − onehot`.
pub fn loss_softmax_ce(logits: &[f64], label: u8) -> Result<(f64, Vec<f64>)> {
    let label = label as usize;
    if label >= logits.len() {
        return Err(arg(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let log_z = m + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `(pred − label)²` with gradient `2(pred − label)`.
pub fn loss_euclidean(pred: &[f64], label: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != 1 {
        return Err(arg(format!("euclidean loss expects one output, got {}", pred.len())));
    }
    let d = pred[0] - label;
    Ok((d * d, vec![2.0 * d]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Euclidean,
}

impl LossKind {
    pub fn for_head(head: HeadKind) -> Option<Self> {
        match head {
            HeadKind::Softmax5 => Some(LossKind::SoftmaxCrossEntropy),
            HeadKind::Regression1 => Some(LossKind::Euclidean),
            HeadKind::None => None,
        }
    }

    fn eval(self, out: &[f64], label: u8) -> Result<(f64, Vec<f64>)> {
        match self {
            LossKind::SoftmaxCrossEntropy => loss_softmax_ce(out, label),
            LossKind::Euclidean => loss_euclidean(out, label as f64),
        }
    }
}

fn check_head(net: &Network, loss: LossKind) -> Result<()> {
    if LossKind::for_head(net.head()) != Some(loss) {
        return Err(arg(format!("loss {loss:?} does not match head {}", net.head())));
    }
    Ok(())
}

fn check_input(net: &Network, x: &Tensor) -> Result<()> {
    let want: usize = net.input_shape().iter().product();
    if x.len() != want {
        return Err(arg(format!(
            "input of {} values does not match network input {:?}",
            x.len(),
            net.input_shape()
        )));
    }
    Ok(())
}

/// Parameter gradients aligned with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Option<Params>>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Self {
            names: net.layers().iter().map(|l| l.name().to_string()).collect(),
            grads: net
                .layers()
                .iter()
                .map(|l| l.params.as_ref().map(Params::zeros_like))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Params> {
        self.names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.grads[i].as_ref())
    }

    pub(crate) fn slots(&self) -> &[Option<Params>] {
        &self.grads
    }

    pub(crate) fn names(&self) -> &[String] {
        &self.names
    }

    pub(crate) fn scale(&mut self, s: f64) {
        for p in self.grads.iter_mut().flatten() {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Reusable buffers for backpropagation.
#[derive(Default)]
pub(crate) struct Workspace {
    scratch: Vec<f64>,
}

/// Accumulates one example's gradient into `grads`; returns its loss.
pub(crate) fn accumulate(
    net: &Network,
    input: &[f64],
    label: u8,
    loss: LossKind,
    grads: &mut Gradients,
    ws: &mut Workspace,
) -> Result<f64> {
    let trace = net.forward_trace(input);
    let (value, mut dout) = loss.eval(trace.acts.last().unwrap(), label)?;
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let x = &trace.acts[i];
        let need_dinput = i > 0;
        let mut dinput = vec![0.0; if need_dinput { x.len() } else { 0 }];
        let g = grads.grads[i].as_mut();
        match (&layer.spec.kind, &trace.caches[i]) {
            (LayerKind::Conv { .. }, Cache::Cols(cols)) => {
                let p = layer.params.as_ref().unwrap();
                let g = g.unwrap();
                layers::conv_backward(
                    &layer.conv_geom().unwrap(),
                    &p.weights,
                    cols,
                    &dout,
                    &mut g.weights,
                    &mut g.bias,
                    need_dinput.then_some(dinput.as_mut_slice()),
                    &mut ws.scratch,
                );
            }
            (LayerKind::MaxPool { .. }, Cache::Argmax(argmax)) => {
                if need_dinput {
                    layers::maxpool_backward(argmax, &dout, &mut dinput);
                }
            }
            (LayerKind::Relu, _) => {
                if need_dinput {
                    layers::relu_backward(x, &dout, &mut dinput);
                }
            }
            (LayerKind::Fc { .. } | LayerKind::LinearHead { .. }, _) => {
                let p = layer.params.as_ref().unwrap();
                let g = g.unwrap();
                layers::dense_backward(
                    &p.weights,
                    x,
                    &dout,
                    &mut g.weights,
                    &mut g.bias,
                    need_dinput.then_some(dinput.as_mut_slice()),
                );
            }
            _ => unreachable!("forward cache does not match layer kind"),
        }
        dout = dinput;
    }
    Ok(value)
}

/// Mean-over-batch gradients of the loss, and the mean loss.
pub fn backward_with_loss(net: &Network, batch: &[(Tensor, u8)], loss: LossKind) -> Result<(Gradients, f64)> {
    check_head(net, loss)?;
    if batch.is_empty() {
        return Err(arg("batch is empty"));
    }
    let mut grads = Gradients::zeros(net);
    let mut ws = Workspace::default();
    let mut total = 0.0;
    for (x, y) in batch {
        check_input(net, x)?;
        total += accumulate(net, x.data(), *y, loss, &mut grads, &mut ws)?;
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((grads, total / n))
}

pub fn backward(net: &Network, batch: &[(Tensor, u8)], loss: LossKind) -> Result<Gradients> {
    backward_with_loss(net, batch, loss).map(|(g, _)| g)
}

/// Mean loss over `batch` without gradients.
pub fn batch_loss(net: &Network, batch: &[(Tensor, u8)], loss: LossKind) -> Result<f64> {
    check_head(net, loss)?;
    if batch.is_empty() {
        return Err(arg("batch is empty"));
    }
    let mut total = 0.0;
    for (x, y) in batch {
        check_input(net, x)?;
        total += loss.eval(&net.raw_output(x.data()), *y)?.0;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln5() {
        let (l, g) = loss_softmax_ce(&[0.3; 5], 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn confident_logit_has_vanishing_loss() {
        let (l, _) = loss_softmax_ce(&[0.0, 50.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert!(l < 1e-9);
        assert!(loss_softmax_ce(&[0.0; 5], 5).is_err());
    }

    #[test]
    fn euclidean_examples() {
        assert_eq!(loss_euclidean(&[3.0], 3.0).unwrap(), (0.0, vec![0.0]));
        assert_eq!(loss_euclidean(&[1.5], 0.0).unwrap(), (2.25, vec![3.0]));
    }
}
