//! Minimal differentiable network engine: dense and 2-D convolution layers
//! with ReLU or identity activations, exact manual gradients, SGD, and a
//! documented parameter flattening order.
//!
//! Convolutions are valid-padding, stride 1. All math is in f64. The engine is
//! deliberately small: it exists so that every attack and defense in the crate
//! can manipulate concrete weight tensors with reproducible numerics.

mod loss;

pub use loss::{
    first_layer_diff_loss_and_input_grad, kl_divergence, loss_and_grad, softmax_rows, Loss,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activation applied to a layer's pre-activation output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at pre-activation `z` (ReLU subgradient 0 at 0).
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// What a layer computes, with its learnable dimensions.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    /// Valid-padding, stride-1 convolution.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
}

/// One layer of the architecture: its kind plus activation.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { in_dim, out_dim },
            activation,
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            },
            activation,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }

    /// Shape of the weight tensor: `[out, in]` or `[out_c, in_c, kh, kw]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { in_dim, out_dim } => vec![out_dim, in_dim],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => vec![out_channels, in_channels, kernel_h, kernel_w],
        }
    }

    /// Shape of the bias tensor: `[out]` or `[out_c]`.
    pub fn bias_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { out_dim, .. } => vec![out_dim],
            LayerKind::Conv2d { out_channels, .. } => vec![out_channels],
        }
    }
}

/// Weights and biases of a single layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

/// Ordered per-layer parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// All-zero parameters for an architecture (also the gradient accumulator).
    pub fn zeros(arch: &[LayerSpec]) -> Self {
        ModelParams {
            layers: arch
                .iter()
                .map(|spec| LayerParams {
                    weights: Tensor::zeros(spec.weight_shape()),
                    biases: Tensor::zeros(spec.bias_shape()),
                })
                .collect(),
        }
    }

    /// Glorot-uniform initialization, reading all randomness from `rng`.
    pub fn init_glorot(arch: &[LayerSpec], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(arch.len());
        for spec in arch {
            let (fan_in, fan_out) = match spec.kind {
                LayerKind::Dense { in_dim, out_dim } => (in_dim, out_dim),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => (in_channels * kernel_h * kernel_w, out_channels * kernel_h * kernel_w),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let wshape = spec.weight_shape();
            let n: usize = wshape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
            layers.push(LayerParams {
                weights: Tensor::from_vec(wshape, data).expect("weight shape product"),
                biases: Tensor::zeros(spec.bias_shape()),
            });
        }
        ModelParams { layers }
    }

    pub fn shapes_match(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(other.layers.iter()).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.biases.shape() == b.biases.shape()
            })
    }

    /// In-place `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        if !self.shapes_match(other) {
            return Err(Error::ShapeMismatch {
                context: "ModelParams::add_scaled",
                expected: vec![self.layers.len()],
                got: vec![other.layers.len()],
            });
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.weights.add_scaled(&b.weights, scale)?;
            a.biases.add_scaled(&b.biases, scale)?;
        }
        Ok(())
    }

    /// Squared L2 distance to another parameter set.
    pub fn sq_distance(&self, other: &ModelParams) -> f64 {
        self.layers
            .iter()
            .zip(other.layers.iter())
            .map(|(a, b)| {
                let w: f64 = a
                    .weights
                    .data()
                    .iter()
                    .zip(b.weights.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let bsum: f64 = a
                    .biases
                    .data()
                    .iter()
                    .zip(b.biases.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                w + bsum
            })
            .sum()
    }

    /// Global L2 norm over every weight and bias.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.sq_norm() + l.biases.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }
}

/// Per-layer pre- and post-activation values for one batch.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
}

/// One layer's batched outputs: `pre` is `z`, `post` is `sigma(z)`.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub pre: Tensor,
    pub post: Tensor,
}

/// Resolve the per-sample output shape of every layer, validating the chain.
///
/// `input_shape` is the per-sample shape of the network input, e.g. `[C, H, W]`
/// for image data or `[n]` for flat features. Conv input must be 3-D with a
/// matching channel count; dense layers accept anything whose element count
/// equals `in_dim` (an implicit flatten).
pub fn layer_output_shapes(arch: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(arch.len());
    let mut current: Vec<usize> = input_shape.to_vec();
    for spec in arch {
        let out_shape = match spec.kind {
            LayerKind::Dense { in_dim, out_dim } => {
                let n: usize = current.iter().product();
                if n != in_dim {
                    return Err(Error::ShapeMismatch {
                        context: "dense layer input",
                        expected: vec![in_dim],
                        got: current.clone(),
                    });
                }
                vec![out_dim]
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                if kernel_h == 0 || kernel_w == 0 {
                    return Err(Error::Config("conv kernel dims must be positive".into()));
                }
                if current.len() != 3 || current[0] != in_channels {
                    return Err(Error::ShapeMismatch {
                        context: "conv layer input",
                        expected: vec![in_channels],
                        got: current.clone(),
                    });
                }
                let (h, w) = (current[1], current[2]);
                if h < kernel_h || w < kernel_w {
                    return Err(Error::ShapeMismatch {
                        context: "conv kernel larger than input",
                        expected: vec![kernel_h, kernel_w],
                        got: vec![h, w],
                    });
                }
                vec![out_channels, h - kernel_h + 1, w - kernel_w + 1]
            }
        };
        shapes.push(out_shape.clone());
        current = out_shape;
    }
    Ok(shapes)
}

fn batch_per_sample_shape(batch: &Tensor) -> (usize, Vec<usize>) {
    let shape = batch.shape();
    (shape[0], shape[1..].to_vec())
}

/// Run the network, recording each layer's pre- and post-activation.
///
/// Returns the logits (the last layer's pre-activation) and the full trace.
pub fn forward_with_trace(
    model: &ModelParams,
    arch: &[LayerSpec],
    batch: &Tensor,
) -> Result<(Tensor, ActivationTrace)> {
    if model.layers.len() != arch.len() {
        return Err(Error::ShapeMismatch {
            context: "forward: model vs architecture layer count",
            expected: vec![arch.len()],
            got: vec![model.layers.len()],
        });
    }
    let (batch_size, per_sample) = batch_per_sample_shape(batch);
    let out_shapes = layer_output_shapes(arch, &per_sample)?;

    let mut traces = Vec::with_capacity(arch.len());
    let mut current = batch.clone();
    for (idx, spec) in arch.iter().enumerate() {
        let params = &model.layers[idx];
        let pre = layer_forward(spec, params, &current, batch_size, &out_shapes[idx])?;
        let post = pre.map(|z| spec.activation.apply(z));
        current = post.clone();
        traces.push(LayerTrace { pre, post });
    }
    let logits = traces.last().expect("non-empty architecture").pre.clone();
    Ok((logits, ActivationTrace { layers: traces }))
}

fn layer_forward(
    spec: &LayerSpec,
    params: &LayerParams,
    input: &Tensor,
    batch: usize,
    out_shape: &[usize],
) -> Result<Tensor> {
    let x = input.data();
    let w = params.weights.data();
    let b = params.biases.data();
    let per_sample_in = input.len() / batch;
    match spec.kind {
        LayerKind::Dense { in_dim, out_dim } => {
            let mut out = vec![0.0; batch * out_dim];
            for s in 0..batch {
                let xs = &x[s * per_sample_in..(s + 1) * per_sample_in];
                let os = &mut out[s * out_dim..(s + 1) * out_dim];
                for (o, os_o) in os.iter_mut().enumerate() {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = b[o];
                    for (xi, wi) in xs.iter().zip(row.iter()) {
                        acc += xi * wi;
                    }
                    *os_o = acc;
                }
            }
            let mut shape = vec![batch];
            shape.extend_from_slice(out_shape);
            Tensor::from_vec(shape, out)
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => {
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let (ih, iw) = (oh + kernel_h - 1, ow + kernel_w - 1);
            let mut out = vec![0.0; batch * out_channels * oh * ow];
            for s in 0..batch {
                let xs = &x[s * per_sample_in..(s + 1) * per_sample_in];
                for oc in 0..out_channels {
                    let kbase = oc * in_channels * kernel_h * kernel_w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[oc];
                            for ic in 0..in_channels {
                                let ibase = ic * ih * iw;
                                let kcbase = kbase + ic * kernel_h * kernel_w;
                                for ky in 0..kernel_h {
                                    let irow = ibase + (oy + ky) * iw + ox;
                                    let krow = kcbase + ky * kernel_w;
                                    for kx in 0..kernel_w {
                                        acc += xs[irow + kx] * w[krow + kx];
                                    }
                                }
                            }
                            out[((s * out_channels + oc) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            let mut shape = vec![batch];
            shape.extend_from_slice(out_shape);
            Tensor::from_vec(shape, out)
        }
    }
}

/// Argmax predictions for a batch; ties resolve to the lowest class index.
pub fn predict_batch(model: &ModelParams, arch: &[LayerSpec], batch: &Tensor) -> Result<Vec<usize>> {
    let (logits, _) = forward_with_trace(model, arch, batch)?;
    let classes = *logits.shape().last().expect("classifier output");
    Ok(logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// One SGD step: `w <- w - lr * g` elementwise over every weight and bias.
pub fn sgd_step(model: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    let mut next = model.clone();
    next.add_scaled(grads, -lr)?;
    Ok(next)
}

/// Flatten parameters into one vector: layer-major, weights before biases,
/// row-major within each tensor.
pub fn flatten(model: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.num_params());
    for layer in &model.layers {
        out.extend_from_slice(layer.weights.data());
        out.extend_from_slice(layer.biases.data());
    }
    out
}

/// Inverse of [`flatten`] for the given architecture.
pub fn unflatten(flat: &[f64], arch: &[LayerSpec]) -> Result<ModelParams> {
    let mut layers = Vec::with_capacity(arch.len());
    let mut offset = 0;
    for spec in arch {
        let wshape = spec.weight_shape();
        let wlen: usize = wshape.iter().product();
        let bshape = spec.bias_shape();
        let blen: usize = bshape.iter().product();
        if offset + wlen + blen > flat.len() {
            return Err(Error::ShapeMismatch {
                context: "unflatten: vector too short",
                expected: vec![offset + wlen + blen],
                got: vec![flat.len()],
            });
        }
        let weights = Tensor::from_vec(wshape, flat[offset..offset + wlen].to_vec())?;
        offset += wlen;
        let biases = Tensor::from_vec(bshape, flat[offset..offset + blen].to_vec())?;
        offset += blen;
        layers.push(LayerParams { weights, biases });
    }
    if offset != flat.len() {
        return Err(Error::ShapeMismatch {
            context: "unflatten: vector too long",
            expected: vec![offset],
            got: vec![flat.len()],
        });
    }
    Ok(ModelParams { layers })
}

/// Which parameter tensor a flat coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
}

/// Map a flat-vector coordinate back to `(layer, slot, offset-within-tensor)`
/// according to the flattening contract.
pub fn locate_flat_index(arch: &[LayerSpec], index: usize) -> Option<(usize, ParamSlot, usize)> {
    let mut offset = 0;
    for (li, spec) in arch.iter().enumerate() {
        let wlen: usize = spec.weight_shape().iter().product();
        if index < offset + wlen {
            return Some((li, ParamSlot::Weight, index - offset));
        }
        offset += wlen;
        let blen: usize = spec.bias_shape().iter().product();
        if index < offset + blen {
            return Some((li, ParamSlot::Bias, index - offset));
        }
        offset += blen;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn identity_dense(dim: usize) -> (Vec<LayerSpec>, ModelParams) {
        let arch = vec![LayerSpec::dense(dim, dim, Activation::Identity)];
        let mut params = ModelParams::zeros(&arch);
        for i in 0..dim {
            params.layers[0].weights.data_mut()[i * dim + i] = 1.0;
        }
        (arch, params)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (arch, params) = identity_dense(2);
        let batch = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (logits, trace) = forward_with_trace(&params, &arch, &batch).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0]);
        assert_eq!(trace.layers[0].pre.data(), &[1.0, 2.0]);
        assert_eq!(trace.layers[0].post.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let arch = vec![
            LayerSpec::conv2d(1, 2, 2, 2, Activation::Relu),
            LayerSpec::dense(2 * 2 * 2, 3, Activation::Identity),
        ];
        let params = ModelParams::zeros(&arch);
        let batch = Tensor::from_vec(vec![2, 1, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        let (logits, _) = forward_with_trace(&params, &arch, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_forward_matches_brute_force_oracle() {
        // Independent oracle: plain triple-loop matrix multiply on the same
        // random two-layer net.
        let arch = vec![
            LayerSpec::dense(4, 5, Activation::Relu),
            LayerSpec::dense(5, 3, Activation::Identity),
        ];
        let mut rng = seeds::stream(99, &[1]);
        let params = ModelParams::init_glorot(&arch, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let batch = Tensor::from_vec(vec![2, 4], x.clone()).unwrap();
        let (logits, _) = forward_with_trace(&params, &arch, &batch).unwrap();

        let w1 = params.layers[0].weights.data();
        let b1 = params.layers[0].biases.data();
        let w2 = params.layers[1].weights.data();
        let b2 = params.layers[1].biases.data();
        for s in 0..2 {
            let xs = &x[s * 4..(s + 1) * 4];
            let mut hidden = vec![0.0; 5];
            for (o, h) in hidden.iter_mut().enumerate() {
                let mut acc = b1[o];
                for i in 0..4 {
                    acc += xs[i] * w1[o * 4 + i];
                }
                *h = acc.max(0.0);
            }
            for o in 0..3 {
                let mut acc = b2[o];
                for i in 0..5 {
                    acc += hidden[i] * w2[o * 5 + i];
                }
                let got = logits.data()[s * 3 + o];
                assert!((got - acc).abs() < 1e-12, "sample {s} logit {o}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn relu_trace_consistency() {
        let arch = vec![
            LayerSpec::conv2d(1, 2, 2, 2, Activation::Relu),
            LayerSpec::dense(2 * 2 * 2, 2, Activation::Relu),
        ];
        let mut rng = seeds::stream(5, &[2]);
        let params = ModelParams::init_glorot(&arch, &mut rng);
        let batch = Tensor::from_vec(vec![3, 1, 3, 3], (0..27).map(|v| v as f64 * 0.1 - 1.0).collect())
            .unwrap();
        let (_, trace) = forward_with_trace(&params, &arch, &batch).unwrap();
        for layer in &trace.layers {
            for (&z, &a) in layer.pre.data().iter().zip(layer.post.data()) {
                assert_eq!(a, z.max(0.0));
            }
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let (arch, params) = identity_dense(2);
        let batch = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            forward_with_trace(&params, &arch, &batch),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sgd_arithmetic() {
        let arch = vec![LayerSpec::dense(1, 1, Activation::Identity)];
        let mut model = ModelParams::zeros(&arch);
        model.layers[0].weights.data_mut()[0] = 1.0;
        let mut grads = ModelParams::zeros(&arch);
        grads.layers[0].weights.data_mut()[0] = 2.0;

        let unchanged = sgd_step(&model, &grads, 0.0).unwrap();
        assert_eq!(unchanged, model);

        let stepped = sgd_step(&model, &grads, 0.5).unwrap();
        assert_eq!(stepped.layers[0].weights.data()[0], 0.0);
    }

    #[test]
    fn sgd_descends_convex_quadratic() {
        // Closed-form oracle: for L = 0.5 * w^2 the gradient is w, so SGD with
        // lr < 1 contracts w geometrically and the loss is strictly decreasing.
        let arch = vec![LayerSpec::dense(1, 1, Activation::Identity)];
        let mut model = ModelParams::zeros(&arch);
        model.layers[0].weights.data_mut()[0] = 3.0;
        let mut last_loss = f64::INFINITY;
        for _ in 0..20 {
            let w = model.layers[0].weights.data()[0];
            let loss = 0.5 * w * w;
            assert!(loss < last_loss);
            last_loss = loss;
            let mut grads = ModelParams::zeros(&arch);
            grads.layers[0].weights.data_mut()[0] = w;
            model = sgd_step(&model, &grads, 0.3).unwrap();
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let arch = vec![
            LayerSpec::conv2d(2, 3, 2, 2, Activation::Relu),
            LayerSpec::dense(3 * 2 * 2, 4, Activation::Identity),
        ];
        let mut rng = seeds::stream(11, &[3]);
        let params = ModelParams::init_glorot(&arch, &mut rng);
        let flat = flatten(&params);
        assert_eq!(flat.len(), params.num_params());
        let back = unflatten(&flat, &arch).unwrap();
        assert_eq!(back, params);

        assert!(unflatten(&flat[..flat.len() - 1], &arch).is_err());
    }

    #[test]
    fn flat_distance_decomposes_per_layer() {
        let arch = vec![
            LayerSpec::dense(3, 2, Activation::Relu),
            LayerSpec::dense(2, 2, Activation::Identity),
        ];
        let mut rng = seeds::stream(12, &[4]);
        let a = ModelParams::init_glorot(&arch, &mut rng);
        let b = ModelParams::init_glorot(&arch, &mut rng);
        let flat_sq: f64 = flatten(&a)
            .iter()
            .zip(flatten(&b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!((flat_sq - a.sq_distance(&b)).abs() < 1e-12);
    }

    #[test]
    fn flat_index_mapping_is_exhaustively_correct() {
        // Index-contract oracle on a tiny model: walk the documented order and
        // check that every flat coordinate resolves to the right slot.
        let arch = vec![
            LayerSpec::conv2d(1, 2, 2, 2, Activation::Relu),
            LayerSpec::dense(2, 3, Activation::Identity),
        ];
        let mut expected = Vec::new();
        for (li, spec) in arch.iter().enumerate() {
            let wlen: usize = spec.weight_shape().iter().product();
            for k in 0..wlen {
                expected.push((li, ParamSlot::Weight, k));
            }
            let blen: usize = spec.bias_shape().iter().product();
            for k in 0..blen {
                expected.push((li, ParamSlot::Bias, k));
            }
        }
        let total: usize = expected.len();
        for idx in 0..total {
            assert_eq!(locate_flat_index(&arch, idx), Some(expected[idx]));
        }
        assert_eq!(locate_flat_index(&arch, total), None);
    }
}
