use sha2::{Digest, Sha256};

use super::layer::{Activation, Layer};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};

/// Anything holding trainable tensors that an optimizer can step.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    fn parameter_names(&self) -> Vec<String>;
    fn is_frozen(&self) -> bool {
        false
    }
}

/// Ordered layer stack with a fixed per-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    names: Vec<String>,
    input_shape: Vec<usize>,
    output_shapes: Vec<Vec<usize>>,
    frozen: bool,
}

/// Activations recorded by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// Output of every layer, in order. Empty unless the trace was kept.
    pub outputs: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl ForwardTrace {
    /// Input of layer `i` (the batch itself for `i == 0`).
    pub fn layer_input(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BackwardOptions {
    /// Accumulate parameter gradients.
    pub params: bool,
    /// Keep the gradient with respect to every layer output.
    pub output_grads: bool,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Per-parameter gradients in [`Parameterized::parameters`] order; empty
    /// unless requested.
    pub params: Vec<Tensor>,
    pub input: Tensor,
    /// Gradient w.r.t. each layer output (`None` above the highest seed).
    pub outputs: Vec<Option<Tensor>>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model without layers".into()));
        }
        let mut output_shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::Activation(Activation::Softmax)) && i + 1 != layers.len() {
                return Err(Error::Shape("softmax is only allowed as the terminal layer".into()));
            }
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.kind())))?;
            output_shapes.push(shape.clone());
        }
        let names = layer_names(&layers);
        Ok(Model { layers, names, input_shape, output_shapes, frozen: false })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.output_shapes[i]
    }

    /// Index of the layer whose output is the logit vector.
    pub fn logits_index(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Activation(Activation::Softmax)) if self.layers.len() > 1 => self.layers.len() - 2,
            _ => self.layers.len() - 1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.output_shapes[self.logits_index()].iter().product()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn layers_mut(&mut self) -> Result<&mut [Layer]> {
        if self.frozen {
            return Err(Error::Frozen("layers of a frozen model cannot be edited".into()));
        }
        Ok(&mut self.layers)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor, keep_trace: bool) -> Result<ForwardTrace> {
        self.check_batch(batch)?;
        let logits_at = self.logits_index();
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut last: Option<Tensor> = None;
        for (i, layer) in self.layers.iter().enumerate().take(logits_at + 1) {
            let next = layer.forward(last.as_ref().unwrap_or(batch))?;
            next.check_finite(&format!("output of layer {}", self.names[i]))?;
            if let Some(prev) = last.replace(next) {
                if keep_trace {
                    outputs.push(prev);
                }
            }
        }
        let raw_logits = last.expect("model has at least one layer");
        let k = raw_logits.row_len();
        let n = batch.batch();
        let probs = Tensor::new(vec![n, k], softmax_rows(raw_logits.data(), k))?;
        if keep_trace {
            outputs.push(raw_logits.clone());
            if logits_at + 1 < self.layers.len() {
                outputs.push(probs.reshape(raw_logits.shape())?);
            }
        }
        let logits = raw_logits.into_reshaped(&[n, k])?;
        Ok(ForwardTrace { input: batch.clone(), outputs, logits, probs })
    }

    /// Outputs of layers `0..=last` only.
    pub fn forward_prefix(&self, batch: &Tensor, last: usize) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(last + 1);
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            let input = outputs.last().unwrap_or(batch);
            let next = layer.forward(input)?;
            next.check_finite(&format!("output of layer {}", self.names[i]))?;
            outputs.push(next);
        }
        Ok(outputs)
    }

    /// Reverse pass over a kept trace.
    ///
    /// `logits_grad` seeds the logit layer; `seeds` inject extra gradients at
    /// arbitrary layer outputs (used when a head reads intermediate
    /// activations). Propagation starts at the highest seeded layer; a
    /// terminal softmax is never traversed.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        logits_grad: Option<&Tensor>,
        seeds: &[(usize, Tensor)],
        opts: BackwardOptions,
    ) -> Result<Gradients> {
        if trace.outputs.len() != self.layers.len() {
            return Err(Error::Shape("backward needs a kept forward trace".into()));
        }
        let n = trace.input.batch();
        let mut pending: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let logits_at = self.logits_index();
        if let Some(g) = logits_grad {
            let want = trace.outputs[logits_at].shape();
            pending[logits_at] = Some(g.reshape(want)?);
        }
        for (idx, g) in seeds {
            if *idx > logits_at {
                return Err(Error::Shape(format!("cannot seed layer {idx} above the logits")));
            }
            match &mut pending[*idx] {
                Some(acc) => acc.add_assign(g)?,
                slot => *slot = Some(g.reshape(trace.outputs[*idx].shape())?),
            }
        }
        let top = pending.iter().rposition(Option::is_some);
        let mut param_grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut kept = vec![None; self.layers.len()];
        let mut flowing: Option<Tensor> = None;
        if let Some(top) = top {
            for i in (0..=top).rev() {
                let mut grad = flowing.take();
                if let Some(seed) = pending[i].take() {
                    match &mut grad {
                        Some(g) => g.add_assign(&seed)?,
                        None => grad = Some(seed),
                    }
                }
                let Some(grad) = grad else { continue };
                let layer = &self.layers[i];
                let (dx, dp) = layer.backward(
                    trace.layer_input(i),
                    &trace.outputs[i],
                    &grad,
                    opts.params && !layer.parameters().is_empty(),
                )?;
                dx.check_finite(&format!("gradient into layer {}", self.names[i]))?;
                param_grads[i] = dp;
                if opts.output_grads {
                    kept[i] = Some(grad);
                }
                flowing = Some(dx);
            }
        }
        let input = flowing.unwrap_or_else(|| Tensor::zeros(trace.input.shape()));
        let params = if opts.params {
            self.layers
                .iter()
                .zip(param_grads)
                .flat_map(|(layer, dp)| {
                    if dp.is_empty() {
                        layer.parameters().into_iter().map(|p| Tensor::zeros(p.shape())).collect()
                    } else {
                        dp
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        debug_assert_eq!(input.batch(), n);
        Ok(Gradients { params, input, outputs: kept })
    }

    /// SHA-256 over architecture and parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.input_shape {
            h.update((*d as u64).to_le_bytes());
        }
        for layer in &self.layers {
            h.update(layer.kind().as_bytes());
            for p in layer.parameters() {
                for d in p.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in p.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

impl Parameterized for Model {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::parameters_mut).collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .zip(&self.names)
            .flat_map(|(layer, name)| match layer {
                Layer::Dense(_) | Layer::Conv2d(_) => vec![format!("{name}.weight"), format!("{name}.bias")],
                _ => Vec::new(),
            })
            .collect()
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// `conv1, pool1, conv2, ..., fc1, fc2`; activations are named after the
/// layer they follow.
fn layer_names(layers: &[Layer]) -> Vec<String> {
    let (mut conv, mut pool, mut fc, mut flat) = (0, 0, 0, 0);
    let mut names: Vec<String> = Vec::with_capacity(layers.len());
    for layer in layers {
        let name = match layer {
            Layer::Conv2d(_) => {
                conv += 1;
                format!("conv{conv}")
            }
            Layer::AvgPool2d(_) | Layer::MaxPool2d(_) => {
                pool += 1;
                format!("pool{pool}")
            }
            Layer::Dense(_) => {
                fc += 1;
                format!("fc{fc}")
            }
            Layer::Flatten => {
                flat += 1;
                if flat == 1 {
                    "flatten".to_string()
                } else {
                    format!("flatten{flat}")
                }
            }
            Layer::Activation(a) => match names.last() {
                Some(prev) => format!("{prev}_{}", a.name()),
                None => a.name().to_string(),
            },
        };
        names.push(name);
    }
    names
}

/// Scalar objective over a logit batch: returns the loss and its gradient.
pub type Objective<'a> = dyn Fn(&Tensor) -> Result<(f64, Tensor)> + 'a;

/// Named parameter gradients of `objective(logits(batch))`. Frozen models
/// yield no gradients.
pub fn grad_params(model: &Model, batch: &Tensor, objective: &Objective) -> Result<Vec<(String, Tensor)>> {
    if model.is_frozen() {
        return Ok(Vec::new());
    }
    let trace = model.forward(batch, true)?;
    let (loss, g) = objective(&trace.logits)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let grads = model.backward(&trace, Some(&g), &[], BackwardOptions { params: true, output_grads: false })?;
    for g in &grads.params {
        g.check_finite("parameter gradient")?;
    }
    Ok(model.parameter_names().into_iter().zip(grads.params).collect())
}

/// Gradient of `objective(logits(x))` with respect to the input batch.
pub fn grad_input(model: &Model, x: &Tensor, objective: &Objective) -> Result<Tensor> {
    let trace = model.forward(x, true)?;
    let (loss, g) = objective(&trace.logits)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let grads = model.backward(&trace, Some(&g), &[], BackwardOptions::default())?;
    Ok(grads.input)
}

/// Mean cross-entropy of softmax(logits) against integer labels, with its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let k = logits.row_len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    let probs = softmax_rows(logits.data(), k);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        loss -= probs[i * k + y].max(1e-300).ln();
        grad[i * k + y] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, Tensor::new(vec![n, k], grad)?))
}
