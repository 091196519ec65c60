//! KL-type training losses and their reverse-mode gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{apply_head, sigmoid, softmax_rows, Activation, LayeredNet, OutputHead, ScalarLink};
use crate::divergence::kl_entries;
use crate::error::{check_len, Error, Result};

/// Which argument of the KL the model occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(target ∥ model)`.
    #[serde(rename = "forward-kl")]
    Forward,
    /// `KL(model ∥ target)`.
    #[serde(rename = "reverse-kl")]
    Reverse,
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// One probability row per input; the loss is the mean pointwise KL.
    Pointwise(ArrayView2<'a, f64>),
    /// A distribution over the sample points; the model's scalar outputs are
    /// normalized over the sample and compared with it.
    Distribution(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct Loss<'a> {
    pub direction: KlDirection,
    pub targets: Targets<'a>,
    pub scale: f64,
}

impl<'a> Loss<'a> {
    pub fn new(direction: KlDirection, targets: Targets<'a>) -> Self {
        Self { direction, targets, scale: 1.0 }
    }

    pub fn scaled(self, scale: f64) -> Self {
        Self { scale, ..self }
    }
}

/// Gradients shaped like the net's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub loss_value: f64,
}

impl GradientRecord {
    pub fn zeros_like(net: &LayeredNet) -> Self {
        Self {
            weights: net.layers().iter().map(|l| Array2::zeros(l.weight.dim())).collect(),
            biases: net.layers().iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            loss_value: 0.0,
        }
    }

    /// Euclidean norm over the layers selected by `mask`.
    pub fn norm(&self, mask: &[bool]) -> f64 {
        self.weights
            .iter()
            .zip(&self.biases)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((w, b), _)| w.iter().chain(b.iter()).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }

    /// `self += factor · other`, layer by layer.
    pub fn add_scaled(&mut self, other: &GradientRecord, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(factor, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(factor, b);
        }
        self.loss_value += factor * other.loss_value;
    }

    fn all_finite(&self) -> bool {
        self.loss_value.is_finite()
            && self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

struct Tape {
    /// Input of every layer; the last entry is the output of the last layer.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

fn record(net: &LayeredNet, inputs: ArrayView2<f64>) -> Result<Tape> {
    if inputs.ncols() != net.input_dim() {
        return Err(Error::DimensionMismatch { expected: net.input_dim(), actual: inputs.ncols() });
    }
    let mut activations = Vec::with_capacity(net.depth() + 1);
    let mut pre_activations = Vec::with_capacity(net.depth());
    activations.push(inputs.to_owned());
    for layer in net.layers() {
        let z = layer.pre_activation(&activations[activations.len() - 1].view());
        activations.push(layer.activation.apply(&z));
        pre_activations.push(z);
    }
    Ok(Tape { activations, pre_activations })
}

/// Loss and `∂loss/∂outputs` for head outputs `y`.
fn loss_and_output_grad(head: OutputHead, y: &Array2<f64>, loss: &Loss) -> Result<(f64, Array2<f64>)> {
    let n = y.nrows();
    match (loss.targets, head) {
        (Targets::Pointwise(targets), OutputHead::Softmax { .. }) => {
            if targets.dim() != y.dim() {
                return Err(Error::Contract(format!("targets {:?} vs outputs {:?}", targets.dim(), y.dim())));
            }
            let weight = loss.scale / n as f64;
            let mut value = 0.0;
            let mut grad = Array2::zeros(y.dim());
            for ((q, p), mut g) in y.axis_iter(Axis(0)).zip(targets.axis_iter(Axis(0))).zip(grad.axis_iter_mut(Axis(0)))
            {
                let (q, p) = (q.to_vec(), p.to_vec());
                match loss.direction {
                    KlDirection::Forward => {
                        value += kl_entries(&p, &q);
                        Zip::from(&mut g).and(&q).and(&p).for_each(|g, &q, &p| *g = -weight * p / q);
                    }
                    KlDirection::Reverse => {
                        value += kl_entries(&q, &p);
                        Zip::from(&mut g).and(&q).and(&p).for_each(|g, &q, &p| *g = weight * ((q / p).ln() + 1.0));
                    }
                }
            }
            Ok((weight * value, grad))
        }
        (Targets::Distribution(targets), OutputHead::ScalarPositive { .. }) => {
            check_len(n, targets.len())?;
            let raw = y.column(0);
            let total = raw.sum();
            let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let (value, g): (f64, Vec<f64>) = match loss.direction {
                KlDirection::Forward => (kl_entries(targets, &q), q.iter().zip(targets).map(|(q, p)| -p / q).collect()),
                KlDirection::Reverse => {
                    (kl_entries(&q, targets), q.iter().zip(targets).map(|(q, p)| (q / p).ln() + 1.0).collect())
                }
            };
            // Chain through q = y / Σy.
            let mean_g: f64 = g.iter().zip(&q).map(|(g, q)| g * q).sum();
            let grad = Array2::from_shape_fn((n, 1), |(j, _)| loss.scale * (g[j] - mean_g) / total);
            Ok((loss.scale * value, grad))
        }
        (Targets::Pointwise(_), _) => Err(Error::Contract("pointwise KL needs a softmax head".into())),
        (Targets::Distribution(_), _) => Err(Error::Contract("distribution KL needs a scalar head".into())),
    }
}

/// `∂loss/∂(last layer output)` from `∂loss/∂(head output)`.
fn head_backward(head: OutputHead, z: &Array2<f64>, grad_out: Array2<f64>) -> Array2<f64> {
    match head {
        OutputHead::None => grad_out,
        OutputHead::Softmax { classes, floor } => {
            let s = softmax_rows(z);
            let scale = 1.0 - classes as f64 * floor;
            let mut grad = grad_out * scale;
            for (mut g, s) in grad.axis_iter_mut(Axis(0)).zip(s.axis_iter(Axis(0))) {
                let inner = g.dot(&s);
                Zip::from(&mut g).and(&s).for_each(|g, &s| *g = s * (*g - inner));
            }
            grad
        }
        OutputHead::ScalarPositive { link: ScalarLink::Linear, floor } => {
            Zip::from(&grad_out).and(z).map_collect(|&g, &z| if z > floor && z < 1.0 { g } else { 0.0 })
        }
        OutputHead::ScalarPositive { link: ScalarLink::Logistic, floor } => {
            Zip::from(&grad_out).and(z).map_collect(|&g, &z| {
                let s = sigmoid(z);
                g * (1.0 - floor) * s * (1.0 - s)
            })
        }
    }
}

/// Loss of `net` on `inputs` without gradients.
pub fn loss_value(net: &LayeredNet, inputs: ArrayView2<f64>, loss: &Loss) -> Result<f64> {
    let z = net.forward_matrix_raw(inputs)?;
    let y = apply_head(net.head(), &z);
    let (value, _) = loss_and_output_grad(net.head(), &y, loss)?;
    if !value.is_finite() {
        return Err(Error::NumericOverflow(format!("loss evaluated to {value}")));
    }
    Ok(value)
}

/// Exact gradient of `loss` with respect to every weight and bias.
pub fn backward(net: &LayeredNet, inputs: ArrayView2<f64>, loss: &Loss) -> Result<GradientRecord> {
    let tape = record(net, inputs)?;
    let last = &tape.activations[tape.activations.len() - 1];
    let y = apply_head(net.head(), last);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow("non-finite network output".into()));
    }
    let (loss_value, grad_y) = loss_and_output_grad(net.head(), &y, loss)?;
    let mut upstream = head_backward(net.head(), last, grad_y);

    let depth = net.depth();
    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let grad_z = match layer.activation {
            Activation::Identity => upstream,
            Activation::Relu => {
                Zip::from(&upstream).and(&tape.pre_activations[i]).map_collect(|&g, &z| if z > 0.0 { g } else { 0.0 })
            }
        };
        weights.push(grad_z.t().dot(&tape.activations[i]));
        biases.push(grad_z.sum_axis(Axis(0)));
        if i == 0 {
            break;
        }
        upstream = grad_z.dot(&layer.weight);
    }
    weights.reverse();
    biases.reverse();
    let record = GradientRecord { weights, biases, loss_value };
    if !record.all_finite() {
        return Err(Error::NumericOverflow("non-finite gradient".into()));
    }
    Ok(record)
}

impl LayeredNet {
    /// Output of the last layer before the head.
    pub(crate) fn forward_matrix_raw(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: inputs.ncols() });
        }
        let mut current = inputs.to_owned();
        for layer in self.layers() {
            let z = layer.pre_activation(&current.view());
            current = layer.activation.apply(&z);
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlpnet::{init_net, ArchSpec, SampleSet};
    use crate::selftest::{finite_difference, relative_error as max_rel_err};

    #[test]
    fn pointwise_forward_kl_matches_finite_differences() {
        let head = OutputHead::Softmax { classes: 3, floor: 0.01 };
        let net = init_net(&ArchSpec { head, ..ArchSpec::representation(4, 3, 2) }, 7).unwrap();
        let x = SampleSet::gaussian(6, 4, 1.0, 1, 0).unwrap();
        let target_net = init_net(&ArchSpec { head, ..ArchSpec::representation(4, 3, 2) }, 8).unwrap();
        let targets = target_net.forward(&x).unwrap();
        let loss = Loss::new(KlDirection::Forward, Targets::Pointwise(targets.view()));
        let exact = backward(&net, x.inputs.view(), &loss).unwrap();
        let fd = finite_difference(&net, x.inputs.view(), &loss, 1e-5).unwrap();
        assert!(max_rel_err(&exact, &fd) < 1e-4);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let head = OutputHead::ScalarPositive { link: ScalarLink::Logistic, floor: 1e-4 };
        let net = init_net(&ArchSpec { head, ..ArchSpec::representation(4, 1, 2) }, 2).unwrap();
        let x = SampleSet::gaussian(20, 4, 1.0, 3, 0).unwrap();
        let y = net.forward_scalar(&x).unwrap();
        let total: f64 = y.iter().sum();
        let p: Vec<f64> = y.iter().map(|v| v / total).collect();
        for direction in [KlDirection::Forward, KlDirection::Reverse] {
            let g = backward(&net, x.inputs.view(), &Loss::new(direction, Targets::Distribution(&p))).unwrap();
            assert!(g.max_abs() < 1e-10, "{direction:?}: {}", g.max_abs());
        }
    }

    #[test]
    fn gradients_are_linear_in_loss_scale() {
        let head = OutputHead::Softmax { classes: 2, floor: 0.01 };
        let net = init_net(&ArchSpec { head, ..ArchSpec::representation(3, 2, 2) }, 4).unwrap();
        let x = SampleSet::gaussian(5, 3, 1.0, 5, 0).unwrap();
        let targets = Array2::from_shape_fn((5, 2), |(_, j)| if j == 0 { 0.3 } else { 0.7 });
        let loss = Loss::new(KlDirection::Reverse, Targets::Pointwise(targets.view()));
        let one = backward(&net, x.inputs.view(), &loss).unwrap();
        let two = backward(&net, x.inputs.view(), &loss.scaled(2.0)).unwrap();
        let mut doubled = GradientRecord::zeros_like(&net);
        doubled.add_scaled(&one, 2.0);
        assert!(max_rel_err(&doubled, &two) < 1e-14);
        assert_eq!(two.loss_value, 2.0 * one.loss_value);
    }

    #[test]
    fn head_and_target_kinds_must_agree() {
        let head = OutputHead::Softmax { classes: 2, floor: 0.01 };
        let net = init_net(&ArchSpec { head, ..ArchSpec::representation(3, 2, 1) }, 4).unwrap();
        let x = SampleSet::gaussian(5, 3, 1.0, 5, 0).unwrap();
        let p = vec![0.2; 5];
        let err = backward(&net, x.inputs.view(), &Loss::new(KlDirection::Forward, Targets::Distribution(&p)));
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
