//! Multilayer perceptrons over flat parameter vectors.
//!
//! A network is described by a [`NetworkSpec`]; its parameters live in a
//! [`ParamVector`] laid out per layer as the weight matrix (row-major, shape
//! `out x in`) followed by the bias. Hidden layers apply the configured activation,
//! the output layer is affine. Batch losses are means over samples:
//!
//! - softmax cross-entropy: `logsumexp(z) - z_y`
//! - squared error: `0.5 * |z - y|^2`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, GradVector, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Tanh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub loss: LossKind,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class indices, for softmax cross-entropy.
    Classes(Vec<usize>),
    /// Real target vectors, for squared error.
    Values(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A minibatch drawn from a single domain (or a pooled mixture).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
    pub domain_id: usize,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Targets, domain_id: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Shape("batch must contain at least one sample".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Concatenates batches; the result carries the first batch's domain id.
    pub fn concat(batches: &[Batch]) -> Result<Batch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero batches".into()))?;
        let mut inputs = Vec::new();
        let mut targets = match &first.targets {
            Targets::Classes(_) => Targets::Classes(Vec::new()),
            Targets::Values(_) => Targets::Values(Vec::new()),
        };
        for b in batches {
            inputs.extend(b.inputs.iter().cloned());
            match (&mut targets, &b.targets) {
                (Targets::Classes(acc), Targets::Classes(c)) => acc.extend_from_slice(c),
                (Targets::Values(acc), Targets::Values(v)) => acc.extend(v.iter().cloned()),
                _ => return Err(Error::Shape("mixed target kinds".into())),
            }
        }
        Batch::new(inputs, targets, first.domain_id)
    }
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig("layer sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layout = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                layout
            })
            .collect()
    }

    /// Index ranges of the bias entries, in layer order.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers()
            .iter()
            .map(|l| l.bias..l.bias + l.fan_out)
            .collect()
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let limit = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut values[layer.weights..layer.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        ParamVector::new(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, network {:?} needs {}",
                params.len(),
                self.layer_sizes,
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &[Vec<f64>]) -> Result<()> {
        if let Some((i, x)) = inputs
            .iter()
            .enumerate()
            .find(|(_, x)| x.len() != self.input_dim())
        {
            return Err(Error::Shape(format!(
                "sample {i} has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        self.check_params(params)?;
        if batch.is_empty() || batch.len() != batch.targets.len() {
            return Err(Error::Shape("malformed batch".into()));
        }
        self.check_inputs(&batch.inputs)?;
        match (&batch.targets, self.loss) {
            (Targets::Classes(classes), LossKind::SoftmaxCrossEntropy) => {
                if let Some(c) = classes.iter().find(|&&c| c >= self.output_dim()) {
                    return Err(Error::Shape(format!(
                        "class index {c} out of range for {} outputs",
                        self.output_dim()
                    )));
                }
            }
            (Targets::Values(values), LossKind::SquaredError) => {
                if let Some(v) = values.iter().find(|v| v.len() != self.output_dim()) {
                    return Err(Error::Shape(format!(
                        "target of length {} for {} outputs",
                        v.len(),
                        self.output_dim()
                    )));
                }
            }
            (Targets::Classes(_), LossKind::SquaredError) => {
                return Err(Error::Shape(
                    "class targets given to a squared-error network".into(),
                ))
            }
            (Targets::Values(_), LossKind::SoftmaxCrossEntropy) => {
                return Err(Error::Shape(
                    "real targets given to a cross-entropy network".into(),
                ))
            }
        }
        Ok(())
    }

    /// Forward pass for one sample. Returns pre-activations and activations
    /// per layer; `acts[0]` is the input and the last entry the raw output.
    fn forward_trace(
        &self,
        layers: &[LayerLayout],
        params: &[f64],
        x: &[f64],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(layers.len());
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (li, layer) in layers.iter().enumerate() {
            let input = &acts[li];
            let mut z = params[layer.bias..layer.bias + layer.fan_out].to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &params[layer.weights + o * layer.fan_in..][..layer.fan_in];
                *zo += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
            }
            let a = if li + 1 == layers.len() {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    /// Raw network outputs (pre-softmax logits for classifiers).
    pub fn outputs(&self, params: &ParamVector, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        self.check_inputs(inputs)?;
        let layers = self.layers();
        Ok(inputs
            .iter()
            .map(|x| {
                let (_, mut acts) = self.forward_trace(&layers, params.as_slice(), x);
                acts.pop().expect("at least one layer")
            })
            .collect())
    }

    /// Per-sample loss and its gradient with respect to the raw output.
    fn sample_loss(&self, out: &[f64], batch: &Batch, i: usize) -> (f64, Vec<f64>) {
        match &batch.targets {
            Targets::Classes(classes) => {
                let y = classes[i];
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = out.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let loss = (max + sum.ln() - out[y]).max(0.0);
                let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                d[y] -= 1.0;
                (loss, d)
            }
            Targets::Values(values) => {
                let d: Vec<f64> = out.iter().zip(&values[i]).map(|(z, y)| z - y).collect();
                let loss = 0.5 * d.iter().map(|r| r * r).sum::<f64>();
                (loss, d)
            }
        }
    }

    pub fn forward_loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check_batch(params, batch)?;
        let layers = self.layers();
        let total: f64 = batch
            .inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let (_, acts) = self.forward_trace(&layers, params.as_slice(), x);
                self.sample_loss(acts.last().expect("output"), batch, i).0
            })
            .sum();
        Ok(total / batch.len() as f64)
    }

    pub fn backward(&self, params: &ParamVector, batch: &Batch) -> Result<GradVector> {
        Ok(self.loss_and_grad(params, batch)?.1)
    }

    /// Mean batch loss together with its analytic gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, GradVector)> {
        self.check_batch(params, batch)?;
        let layers = self.layers();
        let p = params.as_slice();
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; p.len()];
        let mut total = 0.0;
        for (i, x) in batch.inputs.iter().enumerate() {
            let (pre, acts) = self.forward_trace(&layers, p, x);
            let (loss, mut delta) = self.sample_loss(acts.last().expect("output"), batch, i);
            total += loss;
            for (li, layer) in layers.iter().enumerate().rev() {
                let input = &acts[li];
                for (o, d) in delta.iter().enumerate() {
                    let d = d * scale;
                    grad[layer.bias + o] += d;
                    let row = &mut grad[layer.weights + o * layer.fan_in..][..layer.fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                if li == 0 {
                    break;
                }
                let mut next = vec![0.0; layer.fan_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &p[layer.weights + o * layer.fan_in..][..layer.fan_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                for (j, n) in next.iter_mut().enumerate() {
                    *n *= self.activation.derivative(pre[li - 1][j], acts[li][j]);
                }
                delta = next;
            }
        }
        Ok((total * scale, GradVector::new(grad)))
    }

    /// Fraction of correctly classified samples. Classification networks only.
    pub fn accuracy(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check_batch(params, batch)?;
        let Targets::Classes(classes) = &batch.targets else {
            return Err(Error::Shape("accuracy needs class targets".into()));
        };
        let outputs = self.outputs(params, &batch.inputs)?;
        let correct = outputs
            .iter()
            .zip(classes)
            .filter(|(out, &y)| argmax(out) == y)
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Central-difference gradient of an arbitrary scalar function.
pub fn finite_diff<F>(f: F, params: &ParamVector, h: f64) -> GradVector
where
    F: Fn(&ParamVector) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    let grad = (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    GradVector::new(grad)
}

/// Central-difference estimate of the batch-loss gradient.
pub fn finite_diff_grad(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &Batch,
    h: f64,
) -> Result<GradVector> {
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    spec.check_batch(params, batch)?;
    Ok(finite_diff(
        |p| spec.forward_loss(p, batch).expect("shapes checked above"),
        params,
        h,
    ))
}

/// Tolerance rule for comparing analytic and numeric gradients: a coordinate
/// passes if its absolute error is at most `abs_tol` or its relative error is
/// at most `rel_tol`. Returns the worst relative error among failing
/// coordinates, or `None` if all pass.
pub fn grad_mismatch(
    analytic: &GradVector,
    numeric: &GradVector,
    rel_tol: f64,
    abs_tol: f64,
) -> Option<(usize, f64)> {
    analytic
        .iter()
        .zip(numeric.iter())
        .enumerate()
        .filter_map(|(i, (a, n))| {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs());
            (abs > abs_tol && rel > rel_tol).then_some((i, rel))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
}
