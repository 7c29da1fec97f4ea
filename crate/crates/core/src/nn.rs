//! Dense feed-forward classifiers with a hand-written reverse pass.
//!
//! A [`DenseNetwork`] is a chain of affine layers, each followed by ReLU or
//! the identity; the last layer emits the logits and the softmax head is
//! applied on top. [`Tape`] records one batched forward pass and replays it
//! backwards, giving gradients with respect to every parameter and,
//! optionally, the input batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Identity => pre.clone(),
        }
    }
}

/// One affine layer. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct DenseNetwork {
    layers: Vec<Dense>,
}

#[derive(Deserialize)]
struct RawNetwork {
    layers: Vec<Dense>,
}

impl TryFrom<RawNetwork> for DenseNetwork {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        DenseNetwork::new(raw.layers)
    }
}

impl DenseNetwork {
    /// Builds a network from explicit layers, checking that dimensions chain
    /// and that every parameter is finite.
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::shape("layer bias", layer.output_dim(), layer.bias.len()));
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(Error::shape(
                    "layer chain",
                    layers[i - 1].output_dim(),
                    layer.input_dim(),
                ));
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        if layers.last().map(Dense::output_dim) < Some(2) {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform initialisation: weights in `[-s, s]` with
    /// `s = sqrt(6 / (fan_in + fan_out))`, zero biases. Hidden layers use
    /// ReLU, the output layer is linear.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive and at least two long, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-s..=s));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if i == last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn linear(input_dim: usize, class_count: usize, seed: u64) -> Result<Self> {
        Self::init(&[input_dim, class_count], seed)
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], class_count: usize, seed: u64) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(class_count))
            .collect();
        Self::init(&widths, seed)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), cols));
        }
        Ok(())
    }

    /// Logits for a batch (one example per row).
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let pre = h.dot(&layer.weight.t()) + &layer.bias;
            h = layer.activation.apply(&pre);
        }
        Ok(h)
    }

    /// Logits and softmax predictions for a single example.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Forward> {
        let logits = self.logits(x.insert_axis(Axis(0)))?.row(0).to_owned();
        let predictions = softmax(logits.view());
        Ok(Forward { logits, predictions })
    }

    /// Arg-max class per row (lowest index on ties).
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.rows().into_iter().map(argmax).collect())
    }

    /// Jacobian of the logits with respect to the input, `K x d`; row `k` is
    /// the gradient of logit `k`.
    pub fn input_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_input(x.len())?;
        let k = self.class_count();
        let batch = x.insert_axis(Axis(0)).broadcast((k, x.len())).unwrap().to_owned();
        let mut tape = Tape::new();
        tape.forward(self, batch.view())?;
        let seed = LossGrad::new(0.0, Array2::eye(k));
        let grads = tape.backward(self, &seed, true)?;
        Ok(grads.input.expect("input gradient requested"))
    }

    /// Plain SGD: `theta <- theta - lr * grad`, element-wise.
    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("gradient layers", self.layers.len(), grads.layers.len()));
        }
        for (layer, g) in self.layers.iter().zip(&grads.layers) {
            if g.weight.dim() != layer.weight.dim() || g.bias.len() != layer.bias.len() {
                return Err(Error::shape(
                    "gradient",
                    format!("{:?}", layer.weight.dim()),
                    format!("{:?}", g.weight.dim()),
                ));
            }
            if !g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.scaled_add(-lr, &g.weight);
            layer.bias.scaled_add(-lr, &g.bias);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Array1<f64>,
    pub predictions: Array1<f64>,
}

/// A scalar loss together with its gradient with respect to the logits
/// (`batch x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub cotangent: Array2<f64>,
}

impl LossGrad {
    pub fn new(value: f64, cotangent: Array2<f64>) -> Self {
        Self { value, cotangent }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub layers: Vec<LayerGrad>,
    /// Gradient with respect to the input batch, when requested.
    pub input: Option<Array2<f64>>,
}

struct Record {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

/// Records a batched forward pass so it can be differentiated.
#[derive(Default)]
pub struct Tape {
    record: Option<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs the network on `x` and keeps every intermediate needed by
    /// [`Tape::backward`]. Returns the logits.
    pub fn forward(&mut self, net: &DenseNetwork, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        net.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(net.layers.len());
        let mut pre_activations = Vec::with_capacity(net.layers.len());
        let mut h = x.to_owned();
        for layer in &net.layers {
            let pre = h.dot(&layer.weight.t()) + &layer.bias;
            let next = layer.activation.apply(&pre);
            inputs.push(h);
            pre_activations.push(pre);
            h = next;
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        self.record = Some(Record {
            inputs,
            pre_activations,
        });
        Ok(h)
    }

    /// Reverse pass for the recorded batch. `loss.cotangent` is the gradient
    /// of the scalar loss with respect to the logits.
    pub fn backward(&self, net: &DenseNetwork, loss: &LossGrad, input_grad: bool) -> Result<GradientBundle> {
        let record = self.record.as_ref().ok_or(Error::NoForwardPass)?;
        if record.inputs.len() != net.layers.len()
            || record.inputs.iter().zip(&net.layers).any(|(h, l)| h.ncols() != l.input_dim())
        {
            return Err(Error::shape("recorded network", "same architecture as forward", "different network"));
        }
        let batch = record.inputs[0].nrows();
        if loss.cotangent.dim() != (batch, net.class_count()) {
            return Err(Error::shape(
                "loss cotangent",
                format!("({batch}, {})", net.class_count()),
                format!("{:?}", loss.cotangent.dim()),
            ));
        }
        if !loss.cotangent.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("loss cotangent"));
        }

        let mut layer_grads = Vec::with_capacity(net.layers.len());
        let mut delta = loss.cotangent.clone();
        let mut input = None;
        for (i, layer) in net.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&record.pre_activations[i])
                    .for_each(|d, &pre| {
                        if pre <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let weight = delta.t().dot(&record.inputs[i]);
            let bias = delta.sum_axis(Axis(0));
            layer_grads.push(LayerGrad { weight, bias });
            if i > 0 || input_grad {
                let back = delta.dot(&layer.weight);
                if i == 0 {
                    input = Some(back);
                    break;
                }
                delta = back;
            }
        }
        layer_grads.reverse();
        Ok(GradientBundle {
            loss: loss.value,
            layers: layer_grads,
            input,
        })
    }
}

/// Softmax with max subtraction.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// `log softmax(z)` via the log-sum-exp form.
pub fn log_softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let p = softmax(row.view());
        row.assign(&p);
    }
    out
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry, lowest index on ties.
pub fn argmin(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}
