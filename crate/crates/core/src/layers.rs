//! Closed-form forward/backward passes for the toy encoder stack.
//!
//! An [`LayerSpec::EncoderBlock`] computes, row by row,
//!
//! ```text
//! pre = x·W1 + b1        [batch × I]
//! act = gelu(pre)        [batch × I]
//! y   = x + act·W2 + b2  [batch × H]
//! ```
//!
//! `pre` and `act` are the within-layer intermediates kept in [`Residuals`].
//! They can always be regenerated from `x`, which is what the relay schedule
//! relies on when it recomputes a layer during the backward phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Feed-forward block with residual: `hidden → intermediate → hidden`.
    EncoderBlock { hidden: usize, intermediate: usize },
    /// Plain `y = x·W + b`.
    Affine { input: usize, output: usize },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::EncoderBlock {
                hidden,
                intermediate,
            } => hidden * intermediate + intermediate + intermediate * hidden + hidden,
            LayerSpec::Affine { input, output } => input * output + output,
        }
    }

    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::EncoderBlock { hidden, .. } => hidden,
            LayerSpec::Affine { input, .. } => input,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::EncoderBlock { hidden, .. } => hidden,
            LayerSpec::Affine { output, .. } => output,
        }
    }

    /// Parameter shapes in storage order, with the fan-in used for init.
    pub fn param_shapes(&self) -> Vec<(&'static str, [usize; 2], usize)> {
        match *self {
            LayerSpec::EncoderBlock {
                hidden,
                intermediate,
            } => vec![
                ("w1", [hidden, intermediate], hidden),
                ("b1", [1, intermediate], hidden),
                ("w2", [intermediate, hidden], intermediate),
                ("b2", [1, hidden], intermediate),
            ],
            LayerSpec::Affine { input, output } => {
                vec![("w", [input, output], input), ("b", [1, output], input)]
            }
        }
    }

    /// Elements of within-layer intermediates per input row.
    pub fn residual_elements_per_row(&self) -> usize {
        match *self {
            LayerSpec::EncoderBlock { intermediate, .. } => 2 * intermediate,
            LayerSpec::Affine { .. } => 0,
        }
    }

    /// Multiply-accumulate operations of one forward pass per input row.
    pub fn macs_per_row(&self) -> usize {
        match *self {
            LayerSpec::EncoderBlock {
                hidden,
                intermediate,
            } => hidden * intermediate + intermediate * hidden,
            LayerSpec::Affine { input, output } => input * output,
        }
    }
}

/// Mean-squared-error loss head. Carries no parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossHead;

impl LossHead {
    pub const fn param_count(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub hidden: usize,
    pub seed: u64,
    pub head: LossHead,
}

impl ModelSpec {
    /// `n_layers` identical encoder blocks.
    pub fn encoder(n_layers: usize, hidden: usize, intermediate: usize, seed: u64) -> Self {
        ModelSpec {
            layers: vec![
                LayerSpec::EncoderBlock {
                    hidden,
                    intermediate,
                };
                n_layers
            ],
            hidden,
            seed,
            head: LossHead,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .last()
            .map_or(self.hidden, LayerSpec::output_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Plan("model has no layers".into()));
        }
        let mut width = self.hidden;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.param_count() == 0 || layer.output_width() == 0 {
                return Err(Error::Plan(format!("layer {i} has zero size")));
            }
            if layer.input_width() != width {
                return Err(Error::dim(
                    "model",
                    format!(
                        "layer {i} expects width {}, previous boundary is {width}",
                        layer.input_width()
                    ),
                ));
            }
            width = layer.output_width();
        }
        Ok(())
    }
}

/// Parameter tensors of one layer, in the order of [`LayerSpec::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub spec: LayerSpec,
    pub tensors: Vec<Tensor>,
}

impl LayerParams {
    pub fn zeros(spec: LayerSpec, precision: Precision) -> Self {
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|(_, shape, _)| Tensor::zeros(shape.to_vec(), precision))
            .collect();
        LayerParams { spec, tensors }
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn precision(&self) -> Precision {
        self.tensors[0].precision()
    }

    pub fn byte_size(&self) -> u64 {
        self.tensors.iter().map(Tensor::byte_size).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.spec
            .param_shapes()
            .iter()
            .position(|(n, _, _)| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn to_precision(&self, precision: Precision) -> LayerParams {
        LayerParams {
            spec: self.spec,
            tensors: self
                .tensors
                .iter()
                .map(|t| t.to_precision(precision))
                .collect(),
        }
    }

    pub fn add(&self, other: &LayerParams) -> Result<LayerParams> {
        self.check_layout(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Ok(LayerParams {
            spec: self.spec,
            tensors,
        })
    }

    pub fn div_scalar(&self, divisor: f64) -> LayerParams {
        LayerParams {
            spec: self.spec,
            tensors: self.tensors.iter().map(|t| t.div_scalar(divisor)).collect(),
        }
    }

    pub fn check_layout(&self, other: &LayerParams) -> Result<()> {
        let same = self.spec == other.spec
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::dim(
                "layer params",
                format!("{:?} vs {:?}", self.spec, other.spec),
            ));
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &LayerParams) -> bool {
        self.spec == other.spec
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Flattened values, tensor by tensor.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }
}

/// Adds `grads` into an accumulator, taking the first contribution as is.
///
/// Every schedule accumulates through this function so that identical
/// contributions in identical order give bitwise-identical sums.
pub fn accumulate(acc: &mut Option<LayerParams>, grads: LayerParams) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(sum) => *sum = sum.add(&grads)?,
    }
    Ok(())
}

/// Within-layer intermediates of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    input_shape: Vec<usize>,
    tensors: Vec<Tensor>,
}

impl Residuals {
    pub fn byte_size(&self) -> u64 {
        self.tensors.iter().map(Tensor::byte_size).sum()
    }

    pub fn bitwise_eq(&self, other: &Residuals) -> bool {
        self.input_shape == other.input_shape
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

fn check_params(spec: &LayerSpec, params: &LayerParams) -> Result<()> {
    if params.spec != *spec {
        return Err(Error::dim(
            "layer",
            format!("params for {:?} used with {:?}", params.spec, spec),
        ));
    }
    for (t, (name, shape, _)) in params.tensors.iter().zip(spec.param_shapes()) {
        if t.shape() != shape {
            return Err(Error::dim(
                "layer",
                format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
    }
    Ok(())
}

fn check_input(spec: &LayerSpec, x: &Tensor) -> Result<()> {
    match x.shape() {
        [_, w] if *w == spec.input_width() => Ok(()),
        other => Err(Error::dim(
            "layer_forward",
            format!(
                "input {other:?} does not match width {}",
                spec.input_width()
            ),
        )),
    }
}

pub fn layer_forward(
    spec: &LayerSpec,
    params: &LayerParams,
    x: &Tensor,
) -> Result<(Tensor, Residuals)> {
    check_params(spec, params)?;
    check_input(spec, x)?;
    let p = &params.tensors;
    match spec {
        LayerSpec::EncoderBlock { .. } => {
            let pre = x.matmul(&p[0])?.add_row(&p[1])?;
            let act = pre.gelu();
            let y = x.add(&act.matmul(&p[2])?.add_row(&p[3])?)?;
            Ok((
                y,
                Residuals {
                    input_shape: x.shape().to_vec(),
                    tensors: vec![pre, act],
                },
            ))
        }
        LayerSpec::Affine { .. } => {
            let y = x.matmul(&p[0])?.add_row(&p[1])?;
            Ok((
                y,
                Residuals {
                    input_shape: x.shape().to_vec(),
                    tensors: Vec::new(),
                },
            ))
        }
    }
}

pub fn layer_backward(
    spec: &LayerSpec,
    params: &LayerParams,
    x: &Tensor,
    residuals: &Residuals,
    dy: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    check_params(spec, params)?;
    check_input(spec, x)?;
    if residuals.input_shape != x.shape() {
        return Err(Error::Consistency(format!(
            "residuals recorded for input {:?}, backward called with {:?}",
            residuals.input_shape,
            x.shape()
        )));
    }
    let out_shape = [x.rows(), spec.output_width()];
    if dy.shape() != out_shape {
        return Err(Error::dim(
            "layer_backward",
            format!("cotangent {:?}, expected {out_shape:?}", dy.shape()),
        ));
    }
    let p = &params.tensors;
    match spec {
        LayerSpec::EncoderBlock { intermediate, .. } => {
            let [pre, act] = residuals.tensors.as_slice() else {
                return Err(Error::Consistency("encoder residuals incomplete".into()));
            };
            if pre.shape() != [x.rows(), *intermediate] {
                return Err(Error::Consistency("stale encoder residuals".into()));
            }
            let dw2 = act.transpose()?.matmul(dy)?;
            let db2 = dy.sum_rows()?;
            let dact = dy.matmul(&p[2].transpose()?)?;
            let dpre = dact.mul(&pre.gelu_grad())?;
            let dw1 = x.transpose()?.matmul(&dpre)?;
            let db1 = dpre.sum_rows()?;
            let dx = dy.add(&dpre.matmul(&p[0].transpose()?)?)?;
            Ok((
                dx,
                LayerParams {
                    spec: *spec,
                    tensors: vec![dw1, db1, dw2, db2],
                },
            ))
        }
        LayerSpec::Affine { .. } => {
            let dw = x.transpose()?.matmul(dy)?;
            let db = dy.sum_rows()?;
            let dx = dy.matmul(&p[0].transpose()?)?;
            Ok((
                dx,
                LayerParams {
                    spec: *spec,
                    tensors: vec![dw, db],
                },
            ))
        }
    }
}

/// `loss = scale · mean((pred − target)²)` and its gradient with respect to
/// `pred`. The loss is returned as `f64` but accumulated in the working type
/// of `pred` (`f32` for fp16 tensors).
pub fn loss_head(pred: &Tensor, target: &Tensor, scale: f64) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "loss_head",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Domain {
            param: "scale",
            value: scale,
            reason: "loss scale must be positive",
        });
    }
    let diff = pred.sub(target)?;
    let count = diff.len() as f64;
    let loss = diff.mul(&diff)?.sum() / count * scale;
    let dpred = diff.scale(2.0 * scale).div_scalar(count);
    Ok((loss, dpred))
}

/// Deterministic uniform initialization in `[-1/√fan_in, 1/√fan_in]`,
/// layer-major, tensor by tensor.
pub fn init_params(model: &ModelSpec, precision: Precision) -> Vec<LayerParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    model
        .layers
        .iter()
        .map(|spec| {
            let tensors = spec
                .param_shapes()
                .into_iter()
                .map(|(_, shape, fan_in)| {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                    Tensor::from_f64(shape.to_vec(), precision, data)
                        .expect("shape from param_shapes is valid")
                })
                .collect();
            LayerParams {
                spec: *spec,
                tensors,
            }
        })
        .collect()
}
