//! Small fully connected networks with exact reverse-mode gradients.
//!
//! A [`LayeredNet`] is a chain of affine layers, each followed by its own
//! activation, and an optional output head. Representations (`h`) have no
//! head; task heads (`f`) are single linear layers carrying the setting's
//! output head; a composed model `f ∘ h` is the concatenation of both.

mod grad;
mod text;
mod train;

pub use grad::{backward, loss_value, GradientRecord, KlDirection, Loss, Targets};
pub use text::{net_from_text, net_to_text};
pub(crate) use train::apply_step;
pub use train::{perturb_net, sgd_fit, FitOutcome, FitReport, Schedule};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::divergence::ProbVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }
}

/// Map from the final scalar pre-activation to a strictly positive output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalarLink {
    /// `z` clamped to `[floor, 1]`: affine in the head parameters away from
    /// the clamps.
    Linear,
    /// `floor + (1 − floor)·σ(z)`, always inside `[floor, 1]`.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutputHead {
    None,
    /// `floor + (1 − k·floor)·softmax(z)`: rows are probability vectors with
    /// every entry at least `floor`.
    Softmax {
        classes: usize,
        floor: f64,
    },
    ScalarPositive {
        link: ScalarLink,
        floor: f64,
    },
}

impl OutputHead {
    /// Width of the layer feeding the head; 1 for scalar and bare heads.
    pub fn width(&self) -> usize {
        match self {
            Self::Softmax { classes, .. } => *classes,
            _ => 1,
        }
    }

    pub fn floor(&self) -> f64 {
        match self {
            Self::Softmax { floor, .. } | Self::ScalarPositive { floor, .. } => *floor,
            Self::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn pre_activation(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        input.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredNet {
    layers: Vec<Layer>,
    head: OutputHead,
}

impl LayeredNet {
    pub fn new(layers: Vec<Layer>, head: OutputHead) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("a net needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Contract(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Contract(format!("layer {i} bias length mismatch")));
            }
        }
        let out = layers.last().map(Layer::output_dim).unwrap_or(0);
        match head {
            OutputHead::None => {}
            OutputHead::Softmax { classes, floor } => {
                if classes != out || classes < 2 {
                    return Err(Error::Contract(format!("softmax head over {classes} classes on {out} outputs")));
                }
                if !(floor > 0.0 && floor * (classes as f64) < 1.0) {
                    return Err(Error::Contract(format!("softmax floor {floor} infeasible for {classes} classes")));
                }
            }
            OutputHead::ScalarPositive { floor, .. } => {
                if out != 1 {
                    return Err(Error::Contract(format!("scalar head on {out} outputs")));
                }
                if !(floor > 0.0 && floor < 1.0) {
                    return Err(Error::Contract(format!("scalar floor {floor} outside (0, 1)")));
                }
            }
        }
        Ok(Self { layers, head })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `head ∘ self`: the layers of `head` appended after these, with the
    /// head's output map.
    pub fn compose(&self, head: &LayeredNet) -> Result<LayeredNet> {
        if self.head != OutputHead::None {
            return Err(Error::Contract("cannot compose after a net with an output head".into()));
        }
        let mut layers = self.layers.clone();
        layers.extend(head.layers.iter().cloned());
        LayeredNet::new(layers, head.head)
    }

    /// The first `count` layers as a headless net.
    pub fn prefix(&self, count: usize) -> Result<LayeredNet> {
        if count == 0 || count > self.layers.len() {
            return Err(Error::Contract(format!("prefix of {count} layers from {}", self.layers.len())));
        }
        LayeredNet::new(self.layers[..count].to_vec(), OutputHead::None)
    }

    /// Largest absolute parameter difference against a net of the same shape.
    pub fn max_abs_diff(&self, other: &LayeredNet) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::DimensionMismatch { expected: self.layers.len(), actual: other.layers.len() });
        }
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.weight.dim() != b.weight.dim() {
                return Err(Error::Contract("layer shapes differ".into()));
            }
            for (x, y) in a.weight.iter().zip(&b.weight).chain(a.bias.iter().zip(&b.bias)) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }

    /// Applies the net to the rows of `inputs`.
    ///
    /// Softmax heads yield one probability row per input; scalar heads yield an
    /// `n × 1` column of positive values that still need normalizing over the
    /// sample.
    pub fn forward_matrix(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = apply_head(self.head, &self.forward_matrix_raw(inputs)?);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite network output".into()));
        }
        Ok(out)
    }

    pub fn forward(&self, sample: &SampleSet) -> Result<Array2<f64>> {
        self.forward_matrix(sample.inputs.view())
    }

    /// Rows of a softmax-headed net as probability vectors.
    pub fn forward_probs(&self, sample: &SampleSet) -> Result<Vec<ProbVector>> {
        let OutputHead::Softmax { floor, .. } = self.head else {
            return Err(Error::Contract("forward_probs needs a softmax head".into()));
        };
        let out = self.forward(sample)?;
        out.axis_iter(Axis(0)).map(|row| ProbVector::new(row.to_vec(), floor)).collect()
    }

    /// Scalar outputs of a scalar-headed net, one per input.
    pub fn forward_scalar(&self, sample: &SampleSet) -> Result<Vec<f64>> {
        if !matches!(self.head, OutputHead::ScalarPositive { .. }) {
            return Err(Error::Contract("forward_scalar needs a scalar head".into()));
        }
        Ok(self.forward(sample)?.column(0).to_vec())
    }
}

pub(crate) fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn apply_head(head: OutputHead, z: &Array2<f64>) -> Array2<f64> {
    match head {
        OutputHead::None => z.clone(),
        OutputHead::Softmax { classes, floor } => {
            let scale = 1.0 - classes as f64 * floor;
            softmax_rows(z).mapv(|s| floor + scale * s)
        }
        OutputHead::ScalarPositive { link: ScalarLink::Linear, floor } => z.mapv(|v| v.clamp(floor, 1.0)),
        OutputHead::ScalarPositive { link: ScalarLink::Logistic, floor } => {
            z.mapv(|v| floor + (1.0 - floor) * sigmoid(v))
        }
    }
}

/// Shape of a freshly initialized net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Width of every hidden layer; defaults to `output_dim`.
    pub hidden_dim: Option<usize>,
    pub depth: usize,
    pub head: OutputHead,
}

impl ArchSpec {
    /// ReLU representation `input_dim → output_dim` with `depth` layers.
    pub fn representation(input_dim: usize, output_dim: usize, depth: usize) -> Self {
        Self { input_dim, output_dim, hidden_dim: None, depth, head: OutputHead::None }
    }

    /// Single linear layer carrying an output head.
    pub fn head(input_dim: usize, head: OutputHead) -> Self {
        Self { input_dim, output_dim: head.width(), hidden_dim: None, depth: 1, head }
    }
}

/// Weights `N(0, 2/fan_in)`, zero biases, ReLU between layers and identity
/// after the last one.
pub fn init_net(spec: &ArchSpec, seed: u64) -> Result<LayeredNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_net_with(spec, &mut rng)
}

pub(crate) fn init_net_with(spec: &ArchSpec, rng: &mut ChaCha8Rng) -> Result<LayeredNet> {
    let hidden = spec.hidden_dim.unwrap_or(spec.output_dim);
    if spec.depth == 0 || spec.input_dim == 0 || spec.output_dim == 0 || hidden == 0 {
        return Err(Error::Contract(format!("invalid architecture {spec:?}")));
    }
    let mut layers = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let fan_in = if i == 0 { spec.input_dim } else { hidden };
        let fan_out = if i + 1 == spec.depth { spec.output_dim } else { hidden };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng));
        let activation = if i + 1 == spec.depth { Activation::Identity } else { Activation::Relu };
        layers.push(Layer { weight, bias: Array1::zeros(fan_out), activation });
    }
    LayeredNet::new(layers, spec.head)
}

/// A batch of inputs drawn from a named, seeded stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// `n × d`, one row per point.
    pub inputs: Array2<f64>,
    pub source_seed: u64,
    pub stream: u64,
    pub distribution_tag: String,
}

impl SampleSet {
    pub fn new(
        inputs: Array2<f64>,
        source_seed: u64,
        stream: u64,
        distribution_tag: impl Into<String>,
    ) -> Result<Self> {
        if inputs.nrows() < 2 {
            return Err(Error::Contract(format!("sample needs at least 2 points, got {}", inputs.nrows())));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("sample contains non-finite values".into()));
        }
        Ok(Self { inputs, source_seed, stream, distribution_tag: distribution_tag.into() })
    }

    /// `n` draws from `N(0, std²·I_dim)` on ChaCha stream `stream` of `seed`.
    pub fn gaussian(n: usize, dim: usize, std: f64, seed: u64, stream: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let inputs = Array2::from_shape_simple_fn((n, dim), || normal.sample(&mut rng));
        Self::new(inputs, seed, stream, format!("normal(0,{std}^2 I_{dim})"))
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// The first `n` points, keeping the stream identity.
    pub fn head_rows(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::Contract(format!("asked for {n} of {} points", self.len())));
        }
        Self::new(
            self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            self.source_seed,
            self.stream,
            self.distribution_tag.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn softmax_head(k: usize) -> OutputHead {
        OutputHead::Softmax { classes: k, floor: 0.01 }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = ArchSpec::representation(8, 16, 2);
        let a = init_net(&spec, 0).unwrap();
        let b = init_net(&spec, 0).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<_> = a.layers().iter().map(|l| l.weight.dim()).collect();
        assert_eq!(shapes, vec![(16, 8), (16, 16)]);
        assert_eq!(a.layers()[0].activation, Activation::Relu);
        assert_eq!(a.layers()[1].activation, Activation::Identity);
        let c = init_net(&spec, 1).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);
    }

    #[test]
    fn init_rejects_bad_spec() {
        assert!(init_net(&ArchSpec::representation(8, 16, 0), 0).is_err());
        assert!(init_net(&ArchSpec::representation(0, 16, 2), 0).is_err());
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let layer = Layer { weight: Array2::eye(3), bias: Array1::zeros(3), activation: Activation::Identity };
        let net = LayeredNet::new(vec![layer], OutputHead::None).unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(net.forward_matrix(x.view()).unwrap(), x);
    }

    #[test]
    fn softmax_rows_are_prob_vectors() {
        let spec = ArchSpec { head: softmax_head(4), ..ArchSpec::representation(8, 4, 3) };
        let mut net = init_net(&spec, 3).unwrap();
        // Huge weights push logits to the saturation regime.
        net.layers_mut()[2].weight.mapv_inplace(|w| w * 1e6);
        let sample = SampleSet::gaussian(50, 8, 1.0, 9, 0).unwrap();
        let rows = net.forward_probs(&sample).unwrap();
        assert_eq!(rows.len(), 50);
        assert!(rows.iter().all(|r| r.entries().iter().all(|&v| v >= 0.01)));
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let layer = Layer { weight: Array2::zeros((2, 5)), bias: Array1::zeros(2), activation: Activation::Identity };
        let net = LayeredNet::new(vec![layer], softmax_head(2)).unwrap();
        let sample = SampleSet::gaussian(4, 5, 1.0, 0, 0).unwrap();
        for row in net.forward_probs(&sample).unwrap() {
            assert_eq!(row.entries(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn scalar_heads_stay_positive() {
        for link in [ScalarLink::Linear, ScalarLink::Logistic] {
            let spec = ArchSpec::head(8, OutputHead::ScalarPositive { link, floor: 1e-4 });
            let net = init_net(&spec, 5).unwrap();
            let sample = SampleSet::gaussian(200, 8, 3.0, 1, 0).unwrap();
            assert!(net.forward_scalar(&sample).unwrap().iter().all(|&y| y >= 1e-4));
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = init_net(&ArchSpec::representation(8, 16, 2), 0).unwrap();
        let sample = SampleSet::gaussian(4, 7, 1.0, 0, 0).unwrap();
        assert!(matches!(net.forward(&sample), Err(Error::DimensionMismatch { expected: 8, actual: 7 })));
    }

    #[test]
    fn compose_chains_layers() {
        let rep = init_net(&ArchSpec::representation(8, 16, 3), 0).unwrap();
        let head = init_net(&ArchSpec::head(16, softmax_head(4)), 1).unwrap();
        let model = rep.compose(&head).unwrap();
        assert_eq!(model.depth(), 4);
        assert_eq!(model.prefix(3).unwrap(), rep);
        assert!(head.compose(&rep).is_err());
    }

    #[test]
    fn samples_are_reproducible_per_stream() {
        let a = SampleSet::gaussian(10, 8, 1.0, 42, 3).unwrap();
        let b = SampleSet::gaussian(10, 8, 1.0, 42, 3).unwrap();
        let c = SampleSet::gaussian(10, 8, 1.0, 42, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs, c.inputs);
        assert_eq!(a.head_rows(4).unwrap().inputs, a.inputs.slice(ndarray::s![..4, ..]));
    }
}
