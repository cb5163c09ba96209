//! Fully connected ReLU networks in SP / µP / simple-µP, MSE and
//! cross-entropy losses with hand-written reverse-mode gradients, and the
//! quadratic oracle model.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{truncated_normal, FlatVector, RngStream, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Sp,
    Mup,
    /// µP initialization and forward scaling without the per-layer Adam
    /// learning-rate rescaling.
    SimpleMup,
}

/// FCN-d-n: `depth` weight layers, hidden width `width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub depth: usize,
    pub width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub sigma_w2_hidden: f64,
    pub sigma_w2_last: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            in_dim: 32,
            out_dim: 10,
            activation: Activation::Relu,
            parameterization: Parameterization::Sp,
            sigma_w2_hidden: 2.0,
            sigma_w2_last: 1.0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("depth {} < 2", self.depth)));
        }
        if self.width == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidArgument(
                "network dimensions must be positive".into(),
            ));
        }
        if !(self.sigma_w2_hidden >= 0.0 && self.sigma_w2_last >= 0.0) {
            return Err(Error::InvalidArgument(
                "weight variances must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Widths of every layer boundary, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim];
        w.extend(std::iter::repeat_n(self.width, self.depth - 1));
        w.push(self.out_dim);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over batch and output coordinates of the squared error.
    #[default]
    Mse,
    /// Mean over batch of `-log softmax(logits)[label]`.
    Xent,
}

/// Placement and scaling of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in x fan_out` weight block.
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub init_variance: f64,
    /// Multiplies the layer's pre-activation.
    pub forward_scale: f64,
    pub adam_lr_multiplier: f64,
}

impl LayerLayout {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }
}

/// Shape map of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub layers: Vec<LayerLayout>,
    pub len: usize,
}

impl ParamLayout {
    pub fn for_spec(spec: &NetworkSpec) -> Self {
        let widths = spec.widths();
        let last = widths.len() - 2;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let is_last = l == last;
            let sigma2 = if is_last {
                spec.sigma_w2_last
            } else {
                spec.sigma_w2_hidden
            };
            let (init_variance, forward_scale, adam_lr_multiplier) = match spec.parameterization {
                Parameterization::Sp => (sigma2 / fan_in as f64, 1.0, 1.0),
                Parameterization::Mup | Parameterization::SimpleMup => {
                    let lr = if l == 0 {
                        1.0 / (fan_out as f64).sqrt()
                    } else if is_last {
                        1.0 / fan_in as f64
                    } else {
                        1.0 / (fan_in as f64).sqrt()
                    };
                    let lr = if spec.parameterization == Parameterization::Mup {
                        lr
                    } else {
                        1.0
                    };
                    if is_last {
                        (sigma2 / fan_in as f64, (1.0 / fan_in as f64).sqrt(), lr)
                    } else {
                        (
                            sigma2 / fan_out as f64,
                            (fan_out as f64 / fan_in as f64).sqrt(),
                            lr,
                        )
                    }
                }
            };
            let weight_offset = offset;
            offset += fan_in * fan_out;
            let bias_offset = offset;
            offset += fan_out;
            layers.push(LayerLayout {
                fan_in,
                fan_out,
                weight_offset,
                bias_offset,
                init_variance,
                forward_scale,
                adam_lr_multiplier,
            });
        }
        Self {
            layers,
            len: offset,
        }
    }

    /// Per-parameter expansion of the per-layer Adam multipliers.
    pub fn adam_lr_multipliers(&self) -> FlatVector {
        let mut out = vec![1.0; self.len];
        for layer in &self.layers {
            out[layer.weight_range()].fill(layer.adam_lr_multiplier);
            out[layer.bias_range()].fill(layer.adam_lr_multiplier);
        }
        out
    }
}

/// Flat parameters together with their shape map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: FlatVector,
    pub layout: Arc<ParamLayout>,
}

/// Inputs with their regression targets (one-hot rows for classification)
/// and, for classification, the class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Array2<f64>,
    pub targets: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: Option<usize>,
}

impl Samples {
    pub fn classification(x: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Shape {
                expected: format!("{} labels", x.nrows()),
                got: labels.len().to_string(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} >= {classes} classes"
            )));
        }
        let mut targets = Array2::zeros((labels.len(), classes));
        for (i, &l) in labels.iter().enumerate() {
            targets[[i, l]] = 1.0;
        }
        Ok(Self {
            x,
            targets,
            labels,
            classes: Some(classes),
        })
    }

    pub fn regression(x: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if x.nrows() != targets.nrows() {
            return Err(Error::Shape {
                expected: format!("{} target rows", x.nrows()),
                got: targets.nrows().to_string(),
            });
        }
        Ok(Self {
            x,
            targets,
            labels: Vec::new(),
            classes: None,
        })
    }

    /// Placeholder for models that ignore data (the quadratic oracle).
    pub fn empty() -> Self {
        Self {
            x: Array2::zeros((0, 0)),
            targets: Array2::zeros((0, 0)),
            labels: Vec::new(),
            classes: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
            labels: if self.labels.is_empty() {
                Vec::new()
            } else {
                rows.iter().map(|&r| self.labels[r]).collect()
            },
            classes: self.classes,
        }
    }
}

/// A differentiable model evaluated on a batch of samples.
pub trait Model: Send + Sync {
    fn num_params(&self) -> usize;

    fn check_samples(&self, samples: &Samples) -> Result<()>;

    fn loss(&self, theta: &[f64], samples: &Samples) -> f64;

    fn loss_and_grad(&self, theta: &[f64], samples: &Samples) -> (f64, FlatVector);

    /// Classification accuracy, when the model/task defines one.
    fn accuracy(&self, _theta: &[f64], _samples: &Samples) -> Option<f64> {
        None
    }

    /// Per-parameter Adam learning-rate multipliers; `None` means all ones.
    fn adam_lr_multipliers(&self) -> Option<FlatVector> {
        None
    }

    /// Closed-form Hessian action, for models whose curvature is known.
    fn exact_hvp(&self, _theta: &[f64], _v: &[f64]) -> Option<FlatVector> {
        None
    }
}

/// A scalar function of the parameters alone (a model bound to fixed data).
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> f64;
    fn loss_and_grad(&self, theta: &[f64]) -> (f64, FlatVector);

    /// Closed-form Hessian action; `hvp` falls back to finite differences.
    fn exact_hvp(&self, _theta: &[f64], _v: &[f64]) -> Option<FlatVector> {
        None
    }
}

/// A model bound to a fixed batch.
pub struct Bound<'a, M: ?Sized> {
    model: &'a M,
    samples: &'a Samples,
}

impl<'a, M: Model + ?Sized> Bound<'a, M> {
    pub fn new(model: &'a M, samples: &'a Samples) -> Result<Self> {
        model.check_samples(samples)?;
        Ok(Self { model, samples })
    }
}

impl<M: Model + ?Sized> Objective for Bound<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        self.model.loss(theta, self.samples)
    }

    fn loss_and_grad(&self, theta: &[f64]) -> (f64, FlatVector) {
        self.model.loss_and_grad(theta, self.samples)
    }

    fn exact_hvp(&self, theta: &[f64], v: &[f64]) -> Option<FlatVector> {
        self.model.exact_hvp(theta, v)
    }
}

/// Fully connected ReLU network.
#[derive(Debug, Clone)]
pub struct Fcn {
    spec: NetworkSpec,
    layout: Arc<ParamLayout>,
    loss: LossKind,
}

impl Fcn {
    pub fn new(spec: NetworkSpec, loss: LossKind) -> Result<Self> {
        spec.validate()?;
        let layout = Arc::new(ParamLayout::for_spec(&spec));
        Ok(Self { spec, layout, loss })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Truncated-normal weights per the parameterization, zero biases.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut values = vec![0.0; self.layout.len];
        for layer in &self.layout.layers {
            let w = truncated_normal(
                rng,
                layer.fan_in * layer.fan_out,
                layer.init_variance.sqrt(),
            );
            values[layer.weight_range()].copy_from_slice(&w);
        }
        ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    fn weights<'a>(&self, theta: &'a [f64], layer: &LayerLayout) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((layer.fan_in, layer.fan_out), &theta[layer.weight_range()])
            .expect("layout matches parameter vector")
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.layout.len {
            return Err(Error::Shape {
                expected: format!("{} parameters", self.layout.len),
                got: theta.len().to_string(),
            });
        }
        Ok(())
    }

    /// Network outputs for a batch of inputs (rows).
    pub fn forward(&self, theta: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_theta(theta)?;
        if x.ncols() != self.spec.in_dim {
            return Err(Error::Shape {
                expected: format!("{} input features", self.spec.in_dim),
                got: x.ncols().to_string(),
            });
        }
        Ok(self
            .forward_cached(theta, x)
            .pop()
            .expect("at least one layer"))
    }

    /// Returns every layer's scaled pre-activation; the last entry is the output.
    fn forward_cached(&self, theta: &[f64], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let n_layers = self.layout.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut h: Array2<f64> = x.to_owned();
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let w = self.weights(theta, layer);
            let b = ndarray::ArrayView1::from(&theta[layer.bias_range()]);
            let mut z = h.dot(&w) + b;
            if layer.forward_scale != 1.0 {
                z *= layer.forward_scale;
            }
            if l + 1 < n_layers {
                h = z.mapv(|v| v.max(0.0));
            }
            pre.push(z);
        }
        pre
    }

    /// Loss value and its gradient with respect to the network output.
    fn loss_and_output_grad(&self, out: &Array2<f64>, samples: &Samples) -> (f64, Array2<f64>) {
        let b = out.nrows() as f64;
        match self.loss {
            LossKind::Mse => {
                let diff = out - &samples.targets;
                let count = b * out.ncols() as f64;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
                (loss, diff * (2.0 / count))
            }
            LossKind::Xent => {
                let mut grad = Array2::zeros(out.raw_dim());
                let mut loss = 0.0;
                for (i, row) in out.outer_iter().enumerate() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let log_z = max + sum.ln();
                    let label = samples.labels[i];
                    loss += log_z - row[label];
                    for (j, &v) in row.iter().enumerate() {
                        grad[[i, j]] = (v - log_z).exp() / b;
                    }
                    grad[[i, label]] -= 1.0 / b;
                }
                (loss / b, grad)
            }
        }
    }

    /// Raw network outputs for `samples`, assuming they were validated.
    pub fn outputs(&self, theta: &[f64], samples: &Samples) -> Array2<f64> {
        self.forward_cached(theta, samples.x.view())
            .pop()
            .expect("at least one layer")
    }

    /// Frobenius norm of each hidden layer's post-activation over the batch.
    pub fn hidden_activation_norms(&self, theta: &[f64], samples: &Samples) -> Vec<f64> {
        let mut pre = self.forward_cached(theta, samples.x.view());
        pre.pop();
        pre.iter()
            .map(|z| z.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

impl Model for Fcn {
    fn num_params(&self) -> usize {
        self.layout.len
    }

    fn check_samples(&self, samples: &Samples) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if samples.x.ncols() != self.spec.in_dim {
            return Err(Error::Shape {
                expected: format!("{} input features", self.spec.in_dim),
                got: samples.x.ncols().to_string(),
            });
        }
        match self.loss {
            LossKind::Mse if samples.targets.ncols() != self.spec.out_dim => Err(Error::Shape {
                expected: format!("{} target columns", self.spec.out_dim),
                got: samples.targets.ncols().to_string(),
            }),
            LossKind::Xent if samples.labels.len() != samples.len() => Err(Error::InvalidArgument(
                "cross-entropy needs class labels".into(),
            )),
            LossKind::Xent if samples.classes.is_some_and(|c| c > self.spec.out_dim) => Err(
                Error::InvalidArgument("more classes than network outputs".into()),
            ),
            _ => Ok(()),
        }
    }

    fn loss(&self, theta: &[f64], samples: &Samples) -> f64 {
        let out = self.outputs(theta, samples);
        self.loss_and_output_grad(&out, samples).0
    }

    fn loss_and_grad(&self, theta: &[f64], samples: &Samples) -> (f64, FlatVector) {
        let pre = self.forward_cached(theta, samples.x.view());
        let (loss, mut delta) = self.loss_and_output_grad(pre.last().expect("output"), samples);
        let mut grad = vec![0.0; self.layout.len];
        for l in (0..self.layout.layers.len()).rev() {
            let layer = &self.layout.layers[l];
            let scale = layer.forward_scale;
            if scale != 1.0 {
                delta *= scale;
            }
            let input_owned;
            let input = if l == 0 {
                samples.x.view()
            } else {
                input_owned = pre[l - 1].mapv(|v| v.max(0.0));
                input_owned.view()
            };
            let dw = input.t().dot(&delta);
            grad[layer.weight_range()]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            let db: Array1<f64> = delta.sum_axis(Axis(0));
            grad[layer.bias_range()].copy_from_slice(db.as_slice().expect("contiguous"));
            if l > 0 {
                let w = self.weights(theta, layer);
                let mut back = delta.dot(&w.t());
                // ReLU subgradient at exactly zero is zero.
                ndarray::Zip::from(&mut back)
                    .and(&pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = back;
            }
        }
        (loss, grad)
    }

    fn accuracy(&self, theta: &[f64], samples: &Samples) -> Option<f64> {
        samples.classes?;
        if samples.labels.is_empty() {
            return None;
        }
        let out = self.outputs(theta, samples);
        let correct = out
            .outer_iter()
            .zip(&samples.labels)
            .filter(|(row, &label)| argmax(row.as_slice().expect("row-major")) == label)
            .count();
        Some(correct as f64 / samples.len() as f64)
    }

    fn adam_lr_multipliers(&self) -> Option<FlatVector> {
        (self.spec.parameterization == Parameterization::Mup)
            .then(|| self.layout.adam_lr_multipliers())
    }
}

fn argmax(row: &[f64]) -> usize {
    // NaN outputs never win.
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `L(θ) = ½ θᵀAθ` with gradient `Aθ` and Hessian `A`.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    pub a: SymMatrix,
}

impl QuadraticOracle {
    pub fn new(a: SymMatrix) -> Self {
        Self { a }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Self::new(SymMatrix::diagonal(diag))
    }
}

impl Objective for QuadraticOracle {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * self.a.quadratic_form(theta)
    }

    fn loss_and_grad(&self, theta: &[f64]) -> (f64, FlatVector) {
        let g = self.a.matvec(theta);
        (0.5 * crate::numerics::dot(theta, &g), g)
    }

    fn exact_hvp(&self, _theta: &[f64], v: &[f64]) -> Option<FlatVector> {
        Some(self.a.matvec(v))
    }
}

impl Model for QuadraticOracle {
    fn num_params(&self) -> usize {
        self.a.dim()
    }

    fn check_samples(&self, _samples: &Samples) -> Result<()> {
        Ok(())
    }

    fn loss(&self, theta: &[f64], _samples: &Samples) -> f64 {
        Objective::loss(self, theta)
    }

    fn loss_and_grad(&self, theta: &[f64], _samples: &Samples) -> (f64, FlatVector) {
        Objective::loss_and_grad(self, theta)
    }

    fn exact_hvp(&self, theta: &[f64], v: &[f64]) -> Option<FlatVector> {
        Objective::exact_hvp(self, theta, v)
    }
}
