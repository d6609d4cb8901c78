//! A small layer graph: a chain of stages with optional channel-concatenation
//! skips from earlier stages, plus reverse-mode gradients for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::conv::{
    conv2d_backward, conv2d_forward_cached, transpose_conv2d_backward, transpose_conv2d_forward, ConvGeometry,
};
use super::loss::{bce_grad, bce_loss, bce_sigmoid_logit_grad};
use super::tensor::{concat_channels, split_channels};
use super::{NetError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    TransposeConv2d,
    Relu,
    Sigmoid,
    ConcatSkip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_source: Option<String>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.to_owned(),
            kind,
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            skip_source: None,
        }
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize, geom: ConvGeometry) -> Self {
        Self {
            kernel: geom.kernel,
            stride: geom.stride,
            padding: geom.padding,
            ..Self::base(name, LayerKind::Conv2d, in_channels, out_channels)
        }
    }

    pub fn transpose_conv(name: &str, in_channels: usize, out_channels: usize, geom: ConvGeometry) -> Self {
        Self {
            kernel: geom.kernel,
            stride: geom.stride,
            padding: geom.padding,
            ..Self::base(name, LayerKind::TransposeConv2d, in_channels, out_channels)
        }
    }

    pub fn relu(name: &str, channels: usize) -> Self {
        Self::base(name, LayerKind::Relu, channels, channels)
    }

    pub fn sigmoid(name: &str, channels: usize) -> Self {
        Self::base(name, LayerKind::Sigmoid, channels, channels)
    }

    /// Appends the output of stage `source` (with `skip_channels` channels)
    /// after the running tensor's channels.
    pub fn concat_skip(name: &str, in_channels: usize, source: &str, skip_channels: usize) -> Self {
        Self {
            skip_source: Some(source.to_owned()),
            ..Self::base(name, LayerKind::ConcatSkip, in_channels, in_channels + skip_channels)
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.padding)
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::TransposeConv2d)
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Conv2d => self.geometry().conv_output(h, w),
            LayerKind::TransposeConv2d => self.geometry().transpose_output(h, w),
            _ => Some((h, w)),
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Conv2d => vec![kh, kw, self.in_channels, self.out_channels],
            _ => vec![kh, kw, self.out_channels, self.in_channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    stage_shapes: Vec<(usize, usize, usize)>,
    skips: Vec<Option<usize>>,
    params: Vec<Option<Param<T>>>,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    cols: Vec<Option<Vec<T>>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("networks have at least one stage")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// `(d weights, d bias)` per stage; `None` for stages without parameters.
    pub params: Vec<Option<Param<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<&[T]> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.data(), p.bias.data()])
            .collect()
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                    *x += *y;
                }
                for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                    *x += *y;
                }
            }
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Validates channel flow and spatial extents for `input_shape = (h, w, c)`.
    /// Parameters start at zero.
    pub fn new(input_shape: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::BadGraph("network has no layers".into()));
        }
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(layers.len());
        let mut skips = Vec::with_capacity(layers.len());
        let mut params = Vec::with_capacity(layers.len());
        let (mut h, mut w, mut c) = input_shape;
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|p| p.name == l.name) {
                return Err(NetError::BadGraph(format!("duplicate layer name {}", l.name)));
            }
            if l.in_channels != c {
                return Err(NetError::BadGraph(format!(
                    "layer {} expects {} channels, receives {c}",
                    l.name, l.in_channels
                )));
            }
            let skip = match (&l.kind, &l.skip_source) {
                (LayerKind::ConcatSkip, Some(src)) => {
                    let j = layers[..i]
                        .iter()
                        .position(|p| &p.name == src)
                        .ok_or_else(|| NetError::BadGraph(format!("skip source {src} is not an earlier layer")))?;
                    let (sh, sw, sc) = shapes[j];
                    if (sh, sw) != (h, w) || l.out_channels != c + sc {
                        return Err(NetError::BadGraph(format!(
                            "skip {} joins {h}x{w}x{c} with {sh}x{sw}x{sc} but declares {} channels",
                            l.name, l.out_channels
                        )));
                    }
                    Some(j)
                }
                (LayerKind::ConcatSkip, None) => {
                    return Err(NetError::BadGraph(format!("concat layer {} has no source", l.name)))
                }
                _ => None,
            };
            if !l.has_params() && l.kind != LayerKind::ConcatSkip && l.out_channels != l.in_channels {
                return Err(NetError::BadGraph(format!("activation {} changes channel count", l.name)));
            }
            let (nh, nw) = l
                .output_extent(h, w)
                .ok_or_else(|| NetError::BadGraph(format!("layer {} does not fit a {h}x{w} input", l.name)))?;
            (h, w, c) = (nh, nw, l.out_channels);
            shapes.push((h, w, c));
            skips.push(skip);
            params.push(l.has_params().then(|| Param {
                weights: Tensor::zeros(l.weight_shape()),
                bias: Tensor::zeros(vec![l.out_channels]),
            }));
        }
        Ok(Self {
            input_shape,
            layers,
            stage_shapes: shapes,
            skips,
            params,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        *self.stage_shapes.last().expect("non-empty")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// `(h, w, c)` produced by each stage.
    pub fn stage_shapes(&self) -> &[(usize, usize, usize)] {
        &self.stage_shapes
    }

    pub fn params(&self) -> &[Option<Param<T>>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weights.len() + p.bias.len()).sum()
    }

    /// Lengths of the flattened parameter tensors (weights then bias per layer).
    pub fn param_lens(&self) -> Vec<usize> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [p.weights.len(), p.bias.len()])
            .collect()
    }

    pub fn params_flat_mut(&mut self) -> Vec<&mut [T]> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [p.weights.data_mut(), p.bias.data_mut()])
            .collect()
    }

    /// `("<layer>.weight", tensor)` and `("<layer>.bias", tensor)` pairs in layer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().zip(&self.params) {
            if let Some(p) = p {
                out.push((format!("{}.weight", l.name), &p.weights));
                out.push((format!("{}.bias", l.name), &p.bias));
            }
        }
        out
    }

    pub fn set_named_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), NetError> {
        let (layer, part) = name
            .rsplit_once('.')
            .ok_or_else(|| NetError::BadGraph(format!("parameter name {name} lacks a suffix")))?;
        let idx = self
            .layers
            .iter()
            .position(|l| l.name == layer)
            .ok_or_else(|| NetError::BadGraph(format!("no layer named {layer}")))?;
        let p = self.params[idx]
            .as_mut()
            .ok_or_else(|| NetError::BadGraph(format!("layer {layer} has no parameters")))?;
        let slot = match part {
            "weight" => &mut p.weights,
            "bias" => &mut p.bias,
            _ => return Err(NetError::BadGraph(format!("unknown parameter {name}"))),
        };
        if slot.shape() != value.shape() {
            return Err(NetError::ShapeMismatch(format!(
                "{name}: stored {:?}, given {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Seeded uniform initialization: Xavier for the layer feeding a sigmoid,
    /// He for everything else. Biases start at zero.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.layers.len() {
            let Some(p) = self.params[i].as_mut() else { continue };
            let l = &self.layers[i];
            let (kh, kw) = l.kernel;
            let taps = (kh * kw) as f64;
            let (fan_in, fan_out) = match l.kind {
                LayerKind::Conv2d => (taps * l.in_channels as f64, taps * l.out_channels as f64),
                _ => {
                    let s = (l.stride.0 * l.stride.1) as f64;
                    (taps * l.in_channels as f64 / s, taps * l.out_channels as f64 / s)
                }
            };
            let feeds_sigmoid = self.layers.get(i + 1).is_some_and(|n| n.kind == LayerKind::Sigmoid);
            let limit = if feeds_sigmoid {
                (6.0 / (fan_in + fan_out)).sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            for v in p.weights.data_mut() {
                *v = T::from_f64_lossy(rng.gen_range(-limit..limit));
            }
            p.bias.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            stage_shapes: self.stage_shapes.clone(),
            skips: self.skips.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Param {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NetError> {
        let (_, h, w, c) = input.dims4()?;
        if (h, w, c) != self.input_shape {
            return Err(NetError::ShapeMismatch(format!(
                "network takes [N,{},{},{}], got {:?}",
                self.input_shape.0,
                self.input_shape.1,
                self.input_shape.2,
                input.shape()
            )));
        }
        if !input.is_finite() {
            return Err(NetError::NaNDetected("input".into()));
        }
        Ok(())
    }

    /// Forward pass over an `[N,H,W,C]` batch keeping every activation.
    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<Trace<T>, NetError> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let (y, c) = match l.kind {
                LayerKind::Conv2d => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    let (y, c) = conv2d_forward_cached(x, &p.weights, &p.bias, &l.geometry())?;
                    (y, Some(c))
                }
                LayerKind::TransposeConv2d => {
                    let p = self.params[i].as_ref().expect("transpose conv has params");
                    (transpose_conv2d_forward(x, &p.weights, &p.bias, &l.geometry())?, None)
                }
                LayerKind::Relu => (x.map(|v| v.max(T::zero())), None),
                LayerKind::Sigmoid => (x.map(|v| T::one() / (T::one() + (-v).exp())), None),
                LayerKind::ConcatSkip => {
                    let j = self.skips[i].expect("validated at construction");
                    (concat_channels(x, &outputs[j])?, None)
                }
            };
            if !y.is_finite() {
                return Err(NetError::NaNDetected(l.name.clone()));
            }
            outputs.push(y);
            cols.push(c);
        }
        Ok(Trace {
            input: input.clone(),
            outputs,
            cols,
        })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.outputs.pop().expect("non-empty"))
    }

    /// Back-propagates `grad`, the loss gradient with respect to the output of
    /// stage `from`. Stages after `from` are ignored.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        from: usize,
        grad: Tensor<T>,
        want_input: bool,
    ) -> Result<Gradients<T>, NetError> {
        if from >= self.layers.len() || grad.shape() != trace.outputs[from].shape() {
            return Err(NetError::ShapeMismatch(format!(
                "gradient {:?} does not match stage {from}",
                grad.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.layers.len()];
        pending[from] = Some(grad);
        let mut input_grad = None;
        let mut params: Vec<Option<Param<T>>> = self
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Param {
                    weights: Tensor::zeros(p.weights.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();

        for i in (0..=from).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !g.is_finite() {
                return Err(NetError::NaNDetected(format!("gradient at {}", self.layers[i].name)));
            }
            let l = &self.layers[i];
            let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let need_dx = i > 0 || want_input;
            let dx = match l.kind {
                LayerKind::Conv2d => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    let cols = trace.cols[i].as_ref().expect("conv records im2col");
                    let lg = conv2d_backward(x.shape(), cols, &p.weights, &g, &l.geometry(), need_dx)?;
                    params[i] = Some(Param {
                        weights: lg.weights,
                        bias: lg.bias,
                    });
                    lg.input
                }
                LayerKind::TransposeConv2d => {
                    let p = self.params[i].as_ref().expect("transpose conv has params");
                    let lg = transpose_conv2d_backward(x, &p.weights, &g, &l.geometry(), need_dx)?;
                    params[i] = Some(Param {
                        weights: lg.weights,
                        bias: lg.bias,
                    });
                    lg.input
                }
                LayerKind::Relu => {
                    let mut g = g;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    Some(g)
                }
                LayerKind::Sigmoid => {
                    let y = &trace.outputs[i];
                    let mut g = g;
                    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv * (T::one() - yv);
                    }
                    Some(g)
                }
                LayerKind::ConcatSkip => {
                    let j = self.skips[i].expect("validated");
                    let (main, skip) = split_channels(&g, l.in_channels)?;
                    add_into(&mut pending[j], skip);
                    Some(main)
                }
            };
            if let Some(dx) = dx {
                if i == 0 {
                    if want_input {
                        input_grad = Some(dx);
                    }
                } else {
                    add_into(&mut pending[i - 1], dx);
                }
            }
        }
        Ok(Gradients {
            params,
            input: input_grad,
        })
    }

    /// Mean (optionally weighted) binary cross-entropy of the network output
    /// against `target`, and its gradients.
    ///
    /// When the final stage is a sigmoid the gradient enters at the logits
    /// (see [`bce_sigmoid_logit_grad`]).
    pub fn loss_and_grad(
        &self,
        input: &Tensor<T>,
        target: &Tensor<T>,
        weights: Option<&Tensor<T>>,
        want_input: bool,
    ) -> Result<(T, Gradients<T>), NetError> {
        let trace = self.forward_trace(input)?;
        let out = trace.output();
        let loss = bce_loss(out, target, weights)?;
        if !loss.is_finite() {
            return Err(NetError::NaNDetected("loss".into()));
        }
        let last = self.layers.len() - 1;
        let grads = if self.layers[last].kind == LayerKind::Sigmoid && last > 0 {
            let g = bce_sigmoid_logit_grad(out, target, weights)?;
            self.backward(&trace, last - 1, g, want_input)?
        } else {
            let g = bce_grad(out, target, weights)?;
            self.backward(&trace, last, g, want_input)?
        };
        Ok((loss, grads))
    }

    pub fn loss(&self, input: &Tensor<T>, target: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<T, NetError> {
        let out = self.forward(input)?;
        bce_loss(&out, target, weights)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}
