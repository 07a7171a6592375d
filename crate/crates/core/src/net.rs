//! Small convolutional classifier with reverse-mode gradients. Layout is
//! channels-height-width, f64 throughout, deterministic single-threaded
//! execution with fixed reduction order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bytesio::{self, Reader};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        out_features: usize,
    },
}

/// Architecture description. `last_conv` designates the conv layer whose
/// output feeds attention-map extraction; that output is taken before any
/// following activation, so it may contain negative values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub last_conv: usize,
}

impl NetworkSpec {
    /// Checks structural invariants and returns per-layer output shapes.
    /// Element 0 is the input shape; element i+1 the output of layer i.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        if self.input.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "input extents must be positive, got {:?}",
                self.input
            )));
        }
        match self.layers.get(self.last_conv) {
            Some(Layer::Conv2d { .. }) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "attention source index {} does not name a conv layer",
                    self.last_conv
                )))
            }
        }
        let mut shapes = vec![self.input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = shapes.last().expect("seeded with input shape");
            let next = layer_output_shape(layer, prev)
                .map_err(|e| Error::ShapeMismatch(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        let last = shapes.last().expect("non-empty");
        if last.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "final layer must output a flat score vector, got shape {last:?}"
            )));
        }
        Ok(shapes)
    }

    pub fn class_count(&self) -> Result<usize> {
        Ok(self.layer_shapes()?.last().expect("non-empty")[0])
    }

    /// Shape of the designated conv layer's output: [channels, h, w].
    pub fn attention_shape(&self) -> Result<[usize; 3]> {
        let shapes = self.layer_shapes()?;
        let s = &shapes[self.last_conv + 1];
        Ok([s[0], s[1], s[2]])
    }
}

fn layer_output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if input.len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "conv needs rank-3 input, got {input:?}"
                )));
            }
            if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                return Err(Error::InvalidArgument(
                    "conv channels, kernel and stride must be positive".into(),
                ));
            }
            let (h, w) = (input[1], input[2]);
            let span_h = h + 2 * padding;
            let span_w = w + 2 * padding;
            if span_h < *kernel || span_w < *kernel {
                return Err(Error::ShapeMismatch(format!(
                    "conv kernel {kernel} exceeds padded input {span_h}x{span_w}"
                )));
            }
            Ok(vec![
                *out_channels,
                (span_h - kernel) / stride + 1,
                (span_w - kernel) / stride + 1,
            ])
        }
        Layer::Relu => Ok(input.to_vec()),
        Layer::MaxPool2d { kernel, stride } => {
            if input.len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "maxpool needs rank-3 input, got {input:?}"
                )));
            }
            if *kernel == 0 || *stride == 0 {
                return Err(Error::InvalidArgument(
                    "pool kernel and stride must be positive".into(),
                ));
            }
            let (h, w) = (input[1], input[2]);
            if h < *kernel || w < *kernel {
                return Err(Error::ShapeMismatch(format!(
                    "pool kernel {kernel} exceeds input {h}x{w}"
                )));
            }
            Ok(vec![
                input[0],
                (h - kernel) / stride + 1,
                (w - kernel) / stride + 1,
            ])
        }
        Layer::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "global average pool needs rank-3 input, got {input:?}"
                )));
            }
            Ok(vec![input[0]])
        }
        Layer::Dense { out_features } => {
            if *out_features == 0 {
                return Err(Error::InvalidArgument(
                    "dense output width must be positive".into(),
                ));
            }
            Ok(vec![*out_features])
        }
    }
}

/// Weight and bias of one parameterized layer. The same struct carries
/// gradients, which mirror the parameter shapes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Concrete parameter values for a [`NetworkSpec`]. `layers[i]` is `Some`
/// exactly when spec layer i is conv or dense.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub layers: Vec<Option<LayerParams>>,
    pub seed: u64,
}

/// Gradients with the same structure as [`NetworkParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Option<LayerParams>>,
}

/// All intermediate activations of one forward pass. `activations[0]` is the
/// input; `activations[i + 1]` is the output of layer i.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace is never empty")
    }

    /// Output of the designated conv layer, before any following activation.
    pub fn attention_source<'a>(&'a self, spec: &NetworkSpec) -> &'a Tensor {
        &self.activations[spec.last_conv + 1]
    }
}

pub(crate) fn glorot_uniform<R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    count: usize,
) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-limit..=limit)).collect()
}

impl NetworkParams {
    /// Uniform init with per-layer limit sqrt(6 / (fan_in + fan_out)),
    /// zero biases. Deterministic per seed.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut rng = rng::stream(seed, "net-init");
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let params = match layer {
                Layer::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let in_channels = shapes[i][0];
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let count = out_channels * in_channels * kernel * kernel;
                    let weight = Tensor::new(
                        vec![*out_channels, in_channels, *kernel, *kernel],
                        glorot_uniform(&mut rng, fan_in, fan_out, count),
                    )?;
                    Some(LayerParams {
                        weight,
                        bias: Tensor::zeros(&[*out_channels]),
                    })
                }
                Layer::Dense { out_features } => {
                    let in_features: usize = shapes[i].iter().product();
                    let weight = Tensor::new(
                        vec![*out_features, in_features],
                        glorot_uniform(&mut rng, in_features, *out_features, out_features * in_features),
                    )?;
                    Some(LayerParams {
                        weight,
                        bias: Tensor::zeros(&[*out_features]),
                    })
                }
                _ => None,
            };
            layers.push(params);
        }
        Ok(NetworkParams {
            spec: spec.clone(),
            layers,
            seed,
        })
    }

    /// Checks that parameter tensors exist exactly where the architecture
    /// demands and have the implied shapes.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.spec.layer_shapes()?;
        if self.layers.len() != self.spec.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter slots for {} layers",
                self.layers.len(),
                self.spec.layers.len()
            )));
        }
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            match (layer, params) {
                (
                    Layer::Conv2d {
                        out_channels,
                        kernel,
                        ..
                    },
                    Some(p),
                ) => {
                    let in_channels = shapes[i][0];
                    let want = [*out_channels, in_channels, *kernel, *kernel];
                    if p.weight.shape() != want || p.bias.shape() != [*out_channels] {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv params have shape {:?}/{:?}, expected {want:?}/[{out_channels}]",
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                }
                (Layer::Dense { out_features }, Some(p)) => {
                    let in_features: usize = shapes[i].iter().product();
                    let want = [*out_features, in_features];
                    if p.weight.shape() != want || p.bias.shape() != [*out_features] {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: dense params have shape {:?}/{:?}, expected {want:?}/[{out_features}]",
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                }
                (Layer::Relu | Layer::MaxPool2d { .. } | Layer::GlobalAvgPool, None) => {}
                (_, Some(_)) => {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i} takes no parameters but has some"
                    )))
                }
                (_, None) => {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i} needs parameters but has none"
                    )))
                }
            }
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|slot| {
                slot.as_ref().map(|p| LayerParams {
                    weight: Tensor::zeros(p.weight.shape()),
                    bias: Tensor::zeros(p.bias.shape()),
                })
            })
            .collect();
        GradientSet { layers }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.weight.values_mut().iter_mut().zip(b.weight.values()) {
                    *x += y;
                }
                for (x, y) in a.bias.values_mut().iter_mut().zip(b.bias.values()) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.layers.iter_mut().flatten() {
            for v in slot.weight.values_mut() {
                *v *= factor;
            }
            for v in slot.bias.values_mut() {
                *v *= factor;
            }
        }
    }
}

/// Runs the network on one input, recording every activation.
pub fn forward(params: &NetworkParams, input: &Tensor) -> Result<ForwardTrace> {
    params.validate()?;
    if input.shape() != params.spec.input {
        return Err(Error::ShapeMismatch(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape(),
            params.spec.input
        )));
    }
    let shapes = params.spec.layer_shapes()?;
    let mut activations = Vec::with_capacity(params.spec.layers.len() + 1);
    activations.push(input.clone());
    for (i, layer) in params.spec.layers.iter().enumerate() {
        let x = activations.last().expect("seeded with input");
        let out = match layer {
            Layer::Conv2d {
                stride, padding, ..
            } => {
                let p = params.layers[i].as_ref().expect("validated");
                conv_forward(x, &p.weight, &p.bias, *stride, *padding, &shapes[i + 1])
            }
            Layer::Relu => relu_forward(x),
            Layer::MaxPool2d { kernel, stride } => {
                maxpool_forward(x, *kernel, *stride, &shapes[i + 1])
            }
            Layer::GlobalAvgPool => gap_forward(x),
            Layer::Dense { .. } => {
                let p = params.layers[i].as_ref().expect("validated");
                dense_forward(x, &p.weight, &p.bias)
            }
        };
        activations.push(out);
    }
    Ok(ForwardTrace { activations })
}

/// Mean-softmax cross entropy for a single sample. Returns the loss and its
/// gradient with respect to the logits (softmax minus one-hot).
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "logits must be rank 1, got {:?}",
            logits.shape()
        )));
    }
    let z = logits.values();
    if label >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let loss = max + sum.ln() - z[label];
    let mut grad: Vec<f64> = z.iter().map(|&v| (v - max).exp() / sum).collect();
    grad[label] -= 1.0;
    let grad = Tensor::new(vec![z.len()], grad)?;
    Ok((loss, grad))
}

/// Backpropagates `grad_logits` through the trace, producing parameter
/// gradients in the same structure as the parameters.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
) -> Result<GradientSet> {
    params.validate()?;
    let shapes = params.spec.layer_shapes()?;
    if trace.activations.len() != shapes.len() {
        return Err(Error::ShapeMismatch(format!(
            "trace has {} activations, spec implies {}",
            trace.activations.len(),
            shapes.len()
        )));
    }
    for (act, shape) in trace.activations.iter().zip(&shapes) {
        if act.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "trace activation shape {:?} does not match spec shape {shape:?}",
                act.shape()
            )));
        }
    }
    if grad_logits.shape() != trace.logits().shape() {
        return Err(Error::ShapeMismatch(format!(
            "logit gradient shape {:?} does not match logits {:?}",
            grad_logits.shape(),
            trace.logits().shape()
        )));
    }
    let mut grads = GradientSet::zeros_like(params);
    let mut upstream = grad_logits.clone();
    for i in (0..params.spec.layers.len()).rev() {
        let x = &trace.activations[i];
        upstream = match &params.spec.layers[i] {
            Layer::Conv2d {
                stride, padding, ..
            } => {
                let p = params.layers[i].as_ref().expect("validated");
                let (dw, db, dx) = conv_backward(x, &p.weight, &upstream, *stride, *padding);
                let g = grads.layers[i].as_mut().expect("same structure");
                g.weight = dw;
                g.bias = db;
                dx
            }
            Layer::Relu => relu_backward(x, &upstream),
            Layer::MaxPool2d { kernel, stride } => {
                maxpool_backward(x, &upstream, *kernel, *stride)
            }
            Layer::GlobalAvgPool => gap_backward(x, &upstream),
            Layer::Dense { .. } => {
                let p = params.layers[i].as_ref().expect("validated");
                let (dw, db, dx) = dense_backward(x, &p.weight, &upstream);
                let g = grads.layers[i].as_mut().expect("same structure");
                g.weight = dw;
                g.bias = db;
                dx
            }
        };
    }
    Ok(grads)
}

/// Gradient of a scalar function of the logits with respect to the output of
/// layer `layer_index`, given the gradient at the logits. Propagates through
/// layers above `layer_index` only; parameter gradients are discarded.
pub fn activation_gradient(
    params: &NetworkParams,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
    layer_index: usize,
) -> Result<Tensor> {
    params.validate()?;
    if layer_index >= params.spec.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "layer index {layer_index} out of range for {} layers",
            params.spec.layers.len()
        )));
    }
    let shapes = params.spec.layer_shapes()?;
    if trace.activations.len() != shapes.len() {
        return Err(Error::ShapeMismatch(format!(
            "trace has {} activations, spec implies {}",
            trace.activations.len(),
            shapes.len()
        )));
    }
    for (act, shape) in trace.activations.iter().zip(&shapes) {
        if act.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "trace activation shape {:?} does not match spec shape {shape:?}",
                act.shape()
            )));
        }
    }
    if grad_logits.shape() != trace.logits().shape() {
        return Err(Error::ShapeMismatch(format!(
            "logit gradient shape {:?} does not match logits {:?}",
            grad_logits.shape(),
            trace.logits().shape()
        )));
    }
    let mut upstream = grad_logits.clone();
    for i in (layer_index + 1..params.spec.layers.len()).rev() {
        let x = &trace.activations[i];
        upstream = match &params.spec.layers[i] {
            Layer::Conv2d {
                stride, padding, ..
            } => {
                let p = params.layers[i].as_ref().expect("validated");
                conv_backward(x, &p.weight, &upstream, *stride, *padding).2
            }
            Layer::Relu => relu_backward(x, &upstream),
            Layer::MaxPool2d { kernel, stride } => {
                maxpool_backward(x, &upstream, *kernel, *stride)
            }
            Layer::GlobalAvgPool => gap_backward(x, &upstream),
            Layer::Dense { .. } => {
                let p = params.layers[i].as_ref().expect("validated");
                dense_backward(x, &p.weight, &upstream).2
            }
        };
    }
    Ok(upstream)
}

/// One SGD step: w -= lr * (g + weight_decay * w). Biases skip the decay
/// term. Rejects non-finite gradients with a diagnostic naming the layer.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &GradientSet,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient set has {} slots, params have {}",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    for (i, (p, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        match (p, g) {
            (Some(p), Some(g)) => {
                if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: gradient shapes do not match parameters"
                    )));
                }
                g.weight
                    .ensure_finite(&format!("layer {i} weight gradient"))?;
                g.bias.ensure_finite(&format!("layer {i} bias gradient"))?;
                for (w, gw) in p.weight.values_mut().iter_mut().zip(g.weight.values()) {
                    *w -= learning_rate * (gw + weight_decay * *w);
                }
                for (b, gb) in p.bias.values_mut().iter_mut().zip(g.bias.values()) {
                    *b -= learning_rate * gb;
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: gradient structure does not match parameters"
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Augment each sample with a fair-coin horizontal flip.
    pub hflip: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains a classifier from scratch with mini-batch SGD. Deterministic per
/// seed: fixed shuffle, flip and reduction order, single-threaded.
pub fn train_classifier(
    spec: &NetworkSpec,
    samples: &[(Tensor, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let classes = spec.class_count()?;
    for (i, (x, label)) in samples.iter().enumerate() {
        if x.shape() != spec.input {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has shape {:?}, network expects {:?}",
                x.shape(),
                spec.input
            )));
        }
        if *label >= classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i} label {label} out of range for {classes} classes"
            )));
        }
    }
    let mut params = NetworkParams::init(spec, cfg.seed)?;
    let mut shuffle_rng = rng::stream(cfg.seed, "pretrain-shuffle");
    let mut flip_rng = rng::stream(cfg.seed, "pretrain-flip");
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradientSet::zeros_like(&params);
            for &idx in batch {
                let (image, label) = &samples[idx];
                let flipped;
                let input = if cfg.hflip && flip_rng.random_bool(0.5) {
                    flipped = image.flipped_w()?;
                    &flipped
                } else {
                    image
                };
                let trace = forward(&params, input)?;
                let (loss, grad_logits) = softmax_cross_entropy(trace.logits(), *label)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("loss {loss} on sample {idx}"),
                    });
                }
                epoch_loss += loss;
                let g = backward(&params, &trace, &grad_logits)?;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut params, &grads, cfg.learning_rate, cfg.weight_decay).map_err(|e| {
                match e {
                    Error::NonFinite(msg) => Error::Diverged { epoch, reason: msg },
                    other => other,
                }
            })?;
        }
        let mean = epoch_loss / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("epoch mean loss {mean}"),
            });
        }
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        losses.push(mean);
    }
    Ok(TrainOutcome { params, losses })
}

// ---- layer kernels ----

fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let (ic, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = weight.shape()[2];
    let iv = input.values();
    let wv = weight.values();
    let bv = bias.values();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bv[o];
                for i in 0..ic {
                    for u in 0..k {
                        let iy = (y * stride + u) as isize - padding as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = (i * ih + iy as usize) * iw;
                        let w_row = ((o * ic + i) * k + u) * k;
                        for v in 0..k {
                            let ix = (x * stride + v) as isize - padding as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            acc += wv[w_row + v] * iv[in_row + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output is finite by construction of finite inputs")
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (ic, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oc, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let k = weight.shape()[2];
    let iv = input.values();
    let wv = weight.values();
    let gv = grad_out.values();
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; oc];
    let mut dx = vec![0.0; iv.len()];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let g = gv[(o * oh + y) * ow + x];
                db[o] += g;
                for i in 0..ic {
                    for u in 0..k {
                        let iy = (y * stride + u) as isize - padding as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let in_row = (i * ih + iy as usize) * iw;
                        let w_row = ((o * ic + i) * k + u) * k;
                        for v in 0..k {
                            let ix = (x * stride + v) as isize - padding as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            dw[w_row + v] += g * iv[in_row + ix as usize];
                            dx[in_row + ix as usize] += g * wv[w_row + v];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(weight.shape().to_vec(), dw).expect("finite"),
        Tensor::new(vec![oc], db).expect("finite"),
        Tensor::new(input.shape().to_vec(), dx).expect("finite"),
    )
}

fn relu_forward(input: &Tensor) -> Tensor {
    let values = input.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), values).expect("finite")
}

fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    // Gradient is zero exactly where the forward pass clamped to zero.
    let values = input
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), values).expect("finite")
}

fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize, out_shape: &[usize]) -> Tensor {
    let (c, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let iv = input.values();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for u in 0..kernel {
                    let row = (ch * ih + y * stride + u) * iw + x * stride;
                    for v in 0..kernel {
                        let val = iv[row + v];
                        if val > best {
                            best = val;
                        }
                    }
                }
                out[(ch * oh + y) * ow + x] = best;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("finite")
}

fn maxpool_backward(input: &Tensor, grad_out: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let (c, ih, iw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let iv = input.values();
    let gv = grad_out.values();
    let mut dx = vec![0.0; iv.len()];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                // First maximum in row-major window order receives the
                // gradient; strict comparison keeps the first on ties.
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for u in 0..kernel {
                    let row = (ch * ih + y * stride + u) * iw + x * stride;
                    for v in 0..kernel {
                        let val = iv[row + v];
                        if val > best {
                            best = val;
                            best_idx = row + v;
                        }
                    }
                }
                dx[best_idx] += gv[(ch * oh + y) * ow + x];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), dx).expect("finite")
}

fn gap_forward(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let iv = input.values();
    let area = (h * w) as f64;
    let mut out = vec![0.0; c];
    for (ch, slot) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for &v in &iv[ch * h * w..(ch + 1) * h * w] {
            sum += v;
        }
        *slot = sum / area;
    }
    Tensor::new(vec![c], out).expect("finite")
}

fn gap_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let gv = grad_out.values();
    let area = (h * w) as f64;
    let mut dx = vec![0.0; input.count()];
    for ch in 0..c {
        let g = gv[ch] / area;
        for slot in &mut dx[ch * h * w..(ch + 1) * h * w] {
            *slot = g;
        }
    }
    Tensor::new(input.shape().to_vec(), dx).expect("finite")
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let n_out = weight.shape()[0];
    let n_in = weight.shape()[1];
    let iv = input.values();
    debug_assert_eq!(iv.len(), n_in);
    let wv = weight.values();
    let bv = bias.values();
    let mut out = vec![0.0; n_out];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = bv[o];
        let row = o * n_in;
        for j in 0..n_in {
            acc += wv[row + j] * iv[j];
        }
        *slot = acc;
    }
    Tensor::new(vec![n_out], out).expect("finite")
}

fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n_out = weight.shape()[0];
    let n_in = weight.shape()[1];
    let iv = input.values();
    let wv = weight.values();
    let gv = grad_out.values();
    let mut dw = vec![0.0; wv.len()];
    let mut dx = vec![0.0; n_in];
    for o in 0..n_out {
        let g = gv[o];
        let row = o * n_in;
        for j in 0..n_in {
            dw[row + j] += g * iv[j];
            dx[j] += g * wv[row + j];
        }
    }
    (
        Tensor::new(weight.shape().to_vec(), dw).expect("finite"),
        Tensor::new(vec![n_out], gv.to_vec()).expect("finite"),
        Tensor::new(input.shape().to_vec(), dx).expect("finite"),
    )
}

// ---- architecture text form ----

/// Parses a whitespace-separated architecture string, e.g.
/// `conv(8,3) relu maxpool(2) conv(8,3,last) relu gap dense(n)`.
/// `dense(n)` resolves to `n_classes`. The attention source is the conv
/// marked `last`, or the final conv when none is marked.
pub fn parse_architecture(
    text: &str,
    n_classes: usize,
    input: [usize; 3],
) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut marked: Option<usize> = None;
    let mut last_conv_seen: Option<usize> = None;
    for token in text.split_whitespace() {
        let (name, args) = split_token(token)?;
        let layer = match name {
            "conv" => {
                if !(args.len() == 2 || (args.len() == 3 && args[2] == "last")) {
                    return Err(Error::Config(format!(
                        "conv takes (channels,kernel[,last]), got `{token}`"
                    )));
                }
                let out_channels = parse_extent(args[0], token)?;
                let kernel = parse_extent(args[1], token)?;
                if args.len() == 3 {
                    if marked.is_some() {
                        return Err(Error::Config(
                            "more than one conv layer marked `last`".into(),
                        ));
                    }
                    marked = Some(layers.len());
                }
                last_conv_seen = Some(layers.len());
                Layer::Conv2d {
                    out_channels,
                    kernel,
                    stride: 1,
                    padding: 0,
                }
            }
            "relu" => {
                if !args.is_empty() {
                    return Err(Error::Config(format!("relu takes no arguments: `{token}`")));
                }
                Layer::Relu
            }
            "maxpool" => {
                if args.len() != 1 {
                    return Err(Error::Config(format!(
                        "maxpool takes (kernel), got `{token}`"
                    )));
                }
                let kernel = parse_extent(args[0], token)?;
                Layer::MaxPool2d {
                    kernel,
                    stride: kernel,
                }
            }
            "gap" => {
                if !args.is_empty() {
                    return Err(Error::Config(format!("gap takes no arguments: `{token}`")));
                }
                Layer::GlobalAvgPool
            }
            "dense" => {
                if args.len() != 1 {
                    return Err(Error::Config(format!(
                        "dense takes (width), got `{token}`"
                    )));
                }
                let out_features = if args[0] == "n" {
                    n_classes
                } else {
                    parse_extent(args[0], token)?
                };
                Layer::Dense { out_features }
            }
            other => {
                return Err(Error::Config(format!("unknown layer kind `{other}`")));
            }
        };
        layers.push(layer);
    }
    let last_conv = marked.or(last_conv_seen).ok_or_else(|| {
        Error::Config("architecture needs at least one conv layer to source attention".into())
    })?;
    let spec = NetworkSpec {
        input,
        layers,
        last_conv,
    };
    spec.layer_shapes()?;
    Ok(spec)
}

fn split_token(token: &str) -> Result<(&str, Vec<&str>)> {
    match token.find('(') {
        None => Ok((token, Vec::new())),
        Some(open) => {
            let name = &token[..open];
            let rest = &token[open + 1..];
            let close = rest
                .rfind(')')
                .ok_or_else(|| Error::Config(format!("missing `)` in `{token}`")))?;
            if close != rest.len() - 1 {
                return Err(Error::Config(format!("trailing text after `)` in `{token}`")));
            }
            let args = rest[..close]
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .collect();
            Ok((name, args))
        }
    }
}

fn parse_extent(text: &str, token: &str) -> Result<usize> {
    let v: usize = text
        .parse()
        .map_err(|_| Error::Config(format!("bad number `{text}` in `{token}`")))?;
    if v == 0 {
        return Err(Error::Config(format!("zero extent in `{token}`")));
    }
    Ok(v)
}

// ---- checkpoint format ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"ATNW";
const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_GAP: u8 = 3;
const TAG_DENSE: u8 = 4;

/// Writes a network checkpoint: magic, version, input shape, attention
/// source index, layer list, then each parameter tensor as 64-bit LE reals.
pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    bytesio::put_u32(&mut out, CHECKPOINT_VERSION);
    for &e in &params.spec.input {
        bytesio::put_usize_as_u32(&mut out, e, "input extent")?;
    }
    bytesio::put_usize_as_u32(&mut out, params.spec.last_conv, "attention source index")?;
    bytesio::put_usize_as_u32(&mut out, params.spec.layers.len(), "layer count")?;
    for layer in &params.spec.layers {
        match layer {
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push(TAG_CONV);
                bytesio::put_usize_as_u32(&mut out, *out_channels, "conv channels")?;
                bytesio::put_usize_as_u32(&mut out, *kernel, "conv kernel")?;
                bytesio::put_usize_as_u32(&mut out, *stride, "conv stride")?;
                bytesio::put_usize_as_u32(&mut out, *padding, "conv padding")?;
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::MaxPool2d { kernel, stride } => {
                out.push(TAG_MAXPOOL);
                bytesio::put_usize_as_u32(&mut out, *kernel, "pool kernel")?;
                bytesio::put_usize_as_u32(&mut out, *stride, "pool stride")?;
            }
            Layer::GlobalAvgPool => out.push(TAG_GAP),
            Layer::Dense { out_features } => {
                out.push(TAG_DENSE);
                bytesio::put_usize_as_u32(&mut out, *out_features, "dense width")?;
            }
        }
    }
    for slot in self_params(params) {
        if let Some(p) = slot {
            put_tensor(&mut out, &p.weight)?;
            put_tensor(&mut out, &p.bias)?;
        }
    }
    bytesio::write_file(path, &out)
}

fn self_params(params: &NetworkParams) -> impl Iterator<Item = Option<&LayerParams>> {
    params.layers.iter().map(|s| s.as_ref())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    bytesio::put_usize_as_u32(out, t.shape().len(), "tensor rank")?;
    for &e in t.shape() {
        bytesio::put_usize_as_u32(out, e, "tensor extent")?;
    }
    for &v in t.values() {
        bytesio::put_f64(out, v);
    }
    Ok(())
}

fn take_tensor(r: &mut Reader) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.error(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.u32()? as usize;
        if e == 0 {
            return Err(r.error("zero extent in tensor shape"));
        }
        shape.push(e);
    }
    let count: usize = shape.iter().product();
    let count = r.checked_count(count as u32, 8, "tensor value")?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f64()?);
    }
    Tensor::new(shape, values).map_err(|e| r.error(e.to_string()))
}

/// Reads a checkpoint written by [`save_checkpoint`] and validates it
/// against its own embedded architecture. The seed is not stored; the loaded
/// value is zero.
pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let buf = bytesio::read_file(path)?;
    let mut r = Reader::new(path, &buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let last_conv = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    if n_layers > 256 {
        return Err(r.error(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag = r.bytes(1)?[0];
        let layer = match tag {
            TAG_CONV => Layer::Conv2d {
                out_channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                padding: r.u32()? as usize,
            },
            TAG_RELU => Layer::Relu,
            TAG_MAXPOOL => Layer::MaxPool2d {
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
            },
            TAG_GAP => Layer::GlobalAvgPool,
            TAG_DENSE => Layer::Dense {
                out_features: r.u32()? as usize,
            },
            other => return Err(r.error(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    let spec = NetworkSpec {
        input,
        layers,
        last_conv,
    };
    spec.layer_shapes()
        .map_err(|e| r.error(format!("invalid embedded architecture: {e}")))?;
    let mut slots = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let slot = match layer {
            Layer::Conv2d { .. } | Layer::Dense { .. } => Some(LayerParams {
                weight: take_tensor(&mut r)?,
                bias: take_tensor(&mut r)?,
            }),
            _ => None,
        };
        slots.push(slot);
    }
    r.finish()?;
    let params = NetworkParams {
        spec,
        layers: slots,
        seed: 0,
    };
    params
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(params)
}
