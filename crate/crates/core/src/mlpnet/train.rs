use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::grad::{backward, GradientRecord, Loss};
use super::{LayeredNet, SampleSet};
use crate::error::{Error, Result};

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub learning_rate: f64,
    pub steps: usize,
    /// Stop once the gradient norm over trainable layers drops to this.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    /// Whiten the frozen features feeding the first trainable layer and fold
    /// the transform back into that layer afterwards. The function class
    /// is unchanged; only the conditioning of the descent improves.
    #[serde(default)]
    pub precondition: bool,
    /// Record the loss every this many steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_grad_tol() -> f64 {
    1e-5
}

fn default_log_every() -> usize {
    50
}

impl Schedule {
    pub fn new(learning_rate: f64, steps: usize) -> Self {
        Self { learning_rate, steps, grad_tol: default_grad_tol(), precondition: false, log_every: default_log_every() }
    }

    pub fn preconditioned(self) -> Self {
        Self { precondition: true, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 || self.log_every == 0 {
            return Err(Error::Contract("grad_tol must be non-negative and log_every positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// Final gradient norm within `grad_tol`.
    pub converged: bool,
    /// Set when the final loss exceeds the initial one.
    pub loss_increased: bool,
    /// Loss at step 0 and every `log_every` steps after.
    pub checkpoints: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub net: LayeredNet,
    pub report: FitReport,
}

/// Gradient descent on the layers selected by `trainable`; the others are
/// returned bitwise unchanged.
///
/// Frozen layers ahead of the first trainable one are evaluated once and
/// cached.
pub fn sgd_fit(
    net: &LayeredNet,
    trainable: &[bool],
    data: &SampleSet,
    loss: &Loss,
    schedule: &Schedule,
) -> Result<FitOutcome> {
    schedule.validate()?;
    if trainable.len() != net.depth() {
        return Err(Error::DimensionMismatch { expected: net.depth(), actual: trainable.len() });
    }
    let Some(first) = trainable.iter().position(|&t| t) else {
        let value = super::grad::loss_value(net, data.inputs.view(), loss)?;
        return Ok(FitOutcome { net: net.clone(), report: idle_report(value, f64::NAN) });
    };

    let features =
        if first == 0 { data.inputs.clone() } else { net.prefix(first)?.forward_matrix_raw(data.inputs.view())? };
    let (features, whitener) = if schedule.precondition {
        let st = Whitener::fit(&features);
        (st.apply(&features), Some(st))
    } else {
        (features, None)
    };

    let mut sub = LayeredNet::new(net.layers()[first..].to_vec(), net.head())?;
    if let Some(st) = &whitener {
        st.absorb(&mut sub.layers_mut()[0]);
    }
    let mask = &trainable[first..];

    let mut grads = backward(&sub, features.view(), loss)?;
    let initial_loss = grads.loss_value;
    let mut checkpoints = vec![initial_loss];
    let mut steps_run = 0;
    while steps_run < schedule.steps {
        if grads.norm(mask) <= schedule.grad_tol {
            break;
        }
        apply_step(&mut sub, &grads, mask, schedule.learning_rate);
        steps_run += 1;
        grads = backward(&sub, features.view(), loss).map_err(|e| match e {
            Error::NumericOverflow(msg) => Error::NumericOverflow(format!("{msg} after {steps_run} descent steps")),
            other => other,
        })?;
        if steps_run % schedule.log_every == 0 {
            checkpoints.push(grads.loss_value);
        }
    }
    let final_grad_norm = grads.norm(mask);
    let report = FitReport {
        steps_run,
        initial_loss,
        final_loss: grads.loss_value,
        final_grad_norm,
        converged: final_grad_norm <= schedule.grad_tol,
        loss_increased: grads.loss_value > initial_loss,
        checkpoints,
    };
    if steps_run == 0 {
        return Ok(FitOutcome { net: net.clone(), report });
    }

    if let Some(st) = &whitener {
        st.release(&mut sub.layers_mut()[0]);
    }
    let mut layers = net.layers()[..first].to_vec();
    layers.extend(sub.layers().iter().cloned());
    Ok(FitOutcome { net: LayeredNet::new(layers, net.head())?, report })
}

fn idle_report(loss: f64, grad_norm: f64) -> FitReport {
    FitReport {
        steps_run: 0,
        initial_loss: loss,
        final_loss: loss,
        final_grad_norm: grad_norm,
        converged: true,
        loss_increased: false,
        checkpoints: vec![loss],
    }
}

pub(crate) fn apply_step(net: &mut LayeredNet, grads: &GradientRecord, mask: &[bool], learning_rate: f64) {
    for ((layer, (gw, gb)), &m) in net.layers_mut().iter_mut().zip(grads.weights.iter().zip(&grads.biases)).zip(mask) {
        if m {
            layer.weight.scaled_add(-learning_rate, gw);
            layer.bias.scaled_add(-learning_rate, gb);
        }
    }
}

/// Affine whitening `h̃ = A(h − μ)` with `A = Λ^{-1/2}Vᵀ` from the feature
/// covariance `VΛVᵀ`. Eigenvalues are floored relative to the largest so `A`
/// stays invertible.
struct Whitener {
    mean: Array1<f64>,
    forward: Array2<f64>,
    inverse: Array2<f64>,
}

const EIGEN_FLOOR: f64 = 1e-10;

impl Whitener {
    fn fit(features: &Array2<f64>) -> Self {
        let n = features.nrows() as f64;
        let d = features.ncols();
        let mean = features.mean_axis(Axis(0)).expect("non-empty sample");
        let centered = features - &mean;
        let cov = centered.t().dot(&centered) / n;
        let eig = nalgebra::DMatrix::from_fn(d, d, |i, j| cov[[i, j]]).symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
        let lambda: Vec<f64> =
            eig.eigenvalues.iter().map(|&v| v.max(EIGEN_FLOOR * top).max(f64::MIN_POSITIVE)).collect();
        let v = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, j)]);
        let forward = Array2::from_shape_fn((d, d), |(k, i)| v[[i, k]] / lambda[k].sqrt());
        let inverse = Array2::from_shape_fn((d, d), |(i, k)| v[[i, k]] * lambda[k].sqrt());
        Self { mean, forward, inverse }
    }

    fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        (features - &self.mean).dot(&self.forward.t())
    }

    /// Rewrites `W h + b` as `W̃ h̃ + b̃`.
    fn absorb(&self, layer: &mut super::Layer) {
        layer.bias = &layer.bias + &layer.weight.dot(&self.mean);
        layer.weight = layer.weight.dot(&self.inverse);
    }

    /// Inverse of [`Whitener::absorb`].
    fn release(&self, layer: &mut super::Layer) {
        layer.weight = layer.weight.dot(&self.forward);
        layer.bias = &layer.bias - &layer.weight.dot(&self.mean);
    }
}

/// Adds independent `N(0, sigma²)` noise to every weight and bias.
pub fn perturb_net(net: &LayeredNet, sigma: f64, seed: u64) -> Result<LayeredNet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("perturbation sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(net.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = net.clone();
    for layer in out.layers_mut() {
        layer.weight.mapv_inplace(|w| w + normal.sample(&mut rng));
        layer.bias.mapv_inplace(|b| b + normal.sample(&mut rng));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlpnet::{init_net, ArchSpec, KlDirection, OutputHead, Targets};
    use ndarray::array;

    fn two_point_problem() -> (LayeredNet, SampleSet, Array2<f64>) {
        let rep = init_net(&ArchSpec::representation(2, 3, 2), 11).unwrap();
        let head = init_net(&ArchSpec::head(3, OutputHead::Softmax { classes: 2, floor: 0.01 }), 12).unwrap();
        let net = rep.compose(&head).unwrap();
        let x = SampleSet::new(array![[1.0, -0.5], [-0.3, 0.8]], 0, 0, "fixed").unwrap();
        let targets = array![[0.8, 0.2], [0.3, 0.7]];
        (net, x, targets)
    }

    #[test]
    fn zero_steps_leaves_net_unchanged() {
        let (net, x, targets) = two_point_problem();
        let loss = Loss::new(KlDirection::Forward, Targets::Pointwise(targets.view()));
        let out = sgd_fit(&net, &[false, false, true], &x, &loss, &Schedule::new(0.05, 0).preconditioned()).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.report.steps_run, 0);
    }

    #[test]
    fn frozen_layers_are_bitwise_unchanged() {
        let (net, x, targets) = two_point_problem();
        let loss = Loss::new(KlDirection::Forward, Targets::Pointwise(targets.view()));
        let out = sgd_fit(&net, &[false, false, true], &x, &loss, &Schedule::new(0.05, 200).preconditioned()).unwrap();
        assert_eq!(out.net.layers()[..2], net.layers()[..2]);
        assert_ne!(out.net.layers()[2], net.layers()[2]);
        assert!(out.report.final_loss < out.report.initial_loss);
    }

    #[test]
    fn preconditioning_preserves_the_function() {
        let (net, _, _) = two_point_problem();
        let x = SampleSet::gaussian(30, 2, 1.0, 3, 0).unwrap();
        let features = net.prefix(2).unwrap().forward_matrix_raw(x.inputs.view()).unwrap();
        let st = Whitener::fit(&features);
        let mut layer = net.layers()[2].clone();
        let before = features.dot(&layer.weight.t()) + &layer.bias;
        st.absorb(&mut layer);
        let during = st.apply(&features).dot(&layer.weight.t()) + &layer.bias;
        st.release(&mut layer);
        let after = features.dot(&layer.weight.t()) + &layer.bias;
        for ((a, b), c) in before.iter().zip(&during).zip(&after) {
            assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_is_seeded() {
        let net = init_net(&ArchSpec::representation(8, 16, 3), 0).unwrap();
        assert_eq!(perturb_net(&net, 0.0, 5).unwrap(), net);
        let a = perturb_net(&net, 0.1, 5).unwrap();
        assert_eq!(a, perturb_net(&net, 0.1, 5).unwrap());
        assert_ne!(a, perturb_net(&net, 0.1, 6).unwrap());
        let diff = a.max_abs_diff(&net).unwrap();
        assert!(diff > 0.0 && diff < 1.0);
        assert!(perturb_net(&net, -1.0, 0).is_err());
    }
}
