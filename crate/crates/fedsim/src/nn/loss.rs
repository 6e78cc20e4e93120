//! Loss functions with exact manual gradients.
//!
//! Four loss kinds are supported: plain cross-entropy, the composite backdoor
//! objective (clean CE + weighted triggered CE + proximal anchor term), KL
//! distillation toward fixed teacher logits, and the first-layer activation
//! difference used for trigger optimization. Softmax is always computed with
//! max subtraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ActivationTrace, LayerKind, LayerSpec, ModelParams};

/// Loss selector with per-kind context.
///
/// `lambda` and `alpha` are the trade-off weights of the composite objective;
/// `anchor` is the global model the proximal term pulls toward.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    CrossEntropy,
    BackdoorComposite {
        lambda: f64,
        alpha: f64,
        anchor: &'a ModelParams,
        triggered_x: &'a Tensor,
        target_label: usize,
    },
    KlDistill {
        teacher_logits: &'a Tensor,
        temperature: f64,
    },
    TriggerActivation {
        triggered_x: &'a Tensor,
    },
}

/// Row-wise softmax over the last axis, stabilized by max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let classes = *logits.shape().last().expect("softmax on empty shape");
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(logits.shape().to_vec(), out).expect("softmax preserves shape")
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let classes = *logits.shape().last().expect("log softmax on empty shape");
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v - max - log_sum;
        }
    }
    Tensor::from_vec(logits.shape().to_vec(), out).expect("log softmax preserves shape")
}

/// `KL(softmax(p) || softmax(q))`, averaged over rows when the tensors carry
/// a batch dimension. Non-negative, zero iff the logits agree up to a
/// per-row constant shift.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> f64 {
    assert_eq!(
        p_logits.shape(),
        q_logits.shape(),
        "kl_divergence requires matching shapes"
    );
    let classes = *p_logits.shape().last().expect("kl on empty shape");
    let rows = p_logits.len() / classes;
    let p = softmax_rows(p_logits);
    let log_p = log_softmax_rows(p_logits);
    let log_q = log_softmax_rows(q_logits);
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..classes {
            let i = r * classes + c;
            total += p.data()[i] * (log_p.data()[i] - log_q.data()[i]);
        }
    }
    (total / rows as f64).max(0.0)
}

/// Mean cross-entropy of `logits` against integer labels, plus the gradient
/// with respect to the logits.
fn cross_entropy_value_and_dlogits(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let classes = *logits.shape().last().expect("CE on empty shape");
    let batch = logits.len() / classes;
    assert_eq!(batch, labels.len(), "label count must match batch");
    let log_p = log_softmax_rows(logits);
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut dlogits = probs.into_data();
    for (b, &y) in labels.iter().enumerate() {
        debug_assert!(y < classes, "label out of range");
        loss -= log_p.data()[b * classes + y];
        dlogits[b * classes + y] -= 1.0;
    }
    let scale = 1.0 / batch as f64;
    for v in dlogits.iter_mut() {
        *v *= scale;
    }
    (
        loss * scale,
        Tensor::from_vec(logits.shape().to_vec(), dlogits).expect("dlogits shape"),
    )
}

/// Accumulate one layer's parameter gradients given the gradient `g` with
/// respect to its pre-activation, and optionally return the gradient with
/// respect to the layer input.
fn layer_backward(
    spec: &LayerSpec,
    params: &super::LayerParams,
    input: &Tensor,
    g: &Tensor,
    wgrad: &mut Tensor,
    bgrad: &mut Tensor,
    want_input_grad: bool,
) -> Option<Tensor> {
    let batch = g.shape()[0];
    let x = input.data();
    let gd = g.data();
    let w = params.weights.data();
    let per_sample_in = input.len() / batch;
    match spec.kind {
        LayerKind::Dense { in_dim, out_dim } => {
            let wg = wgrad.data_mut();
            {
                let bg = bgrad.data_mut();
                for s in 0..batch {
                    let xs = &x[s * per_sample_in..(s + 1) * per_sample_in];
                    let gs = &gd[s * out_dim..(s + 1) * out_dim];
                    for (o, &go) in gs.iter().enumerate() {
                        bg[o] += go;
                        let row = &mut wg[o * in_dim..(o + 1) * in_dim];
                        for (wi, &xi) in row.iter_mut().zip(xs.iter()) {
                            *wi += go * xi;
                        }
                    }
                }
            }
            if want_input_grad {
                let mut din = vec![0.0; input.len()];
                for s in 0..batch {
                    let gs = &gd[s * out_dim..(s + 1) * out_dim];
                    let ds = &mut din[s * per_sample_in..(s + 1) * per_sample_in];
                    for (o, &go) in gs.iter().enumerate() {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        for (di, &wi) in ds.iter_mut().zip(row.iter()) {
                            *di += go * wi;
                        }
                    }
                }
                Some(Tensor::from_vec(input.shape().to_vec(), din).expect("din shape"))
            } else {
                None
            }
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => {
            let oh = g.shape()[2];
            let ow = g.shape()[3];
            let ih = oh + kernel_h - 1;
            let iw = ow + kernel_w - 1;
            let mut din = if want_input_grad {
                vec![0.0; input.len()]
            } else {
                Vec::new()
            };
            let wg = wgrad.data_mut();
            let bg = bgrad.data_mut();
            for s in 0..batch {
                let xs = &x[s * per_sample_in..(s + 1) * per_sample_in];
                for oc in 0..out_channels {
                    let kbase = oc * in_channels * kernel_h * kernel_w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gd[((s * out_channels + oc) * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            bg[oc] += go;
                            for ic in 0..in_channels {
                                let ibase = ic * ih * iw;
                                let kcbase = kbase + ic * kernel_h * kernel_w;
                                for ky in 0..kernel_h {
                                    let irow = ibase + (oy + ky) * iw + ox;
                                    let krow = kcbase + ky * kernel_w;
                                    for kx in 0..kernel_w {
                                        wg[krow + kx] += go * xs[irow + kx];
                                        if want_input_grad {
                                            din[s * per_sample_in + irow + kx] += go * w[krow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if want_input_grad {
                Some(Tensor::from_vec(input.shape().to_vec(), din).expect("din shape"))
            } else {
                None
            }
        }
    }
}

/// Full backward pass from a gradient on the logits (last pre-activation).
/// Adds parameter gradients into `grads`; returns the input gradient when
/// requested.
fn backward_from_dlogits(
    model: &ModelParams,
    arch: &[LayerSpec],
    batch_x: &Tensor,
    trace: &ActivationTrace,
    dlogits: &Tensor,
    grads: &mut ModelParams,
    want_input_grad: bool,
) -> Option<Tensor> {
    let mut g = dlogits.clone();
    for j in (0..arch.len()).rev() {
        let input = if j == 0 {
            batch_x
        } else {
            &trace.layers[j - 1].post
        };
        let need_din = j > 0 || want_input_grad;
        let glayer = &mut grads.layers[j];
        let din = layer_backward(
            &arch[j],
            &model.layers[j],
            input,
            &g,
            &mut glayer.weights,
            &mut glayer.biases,
            need_din,
        );
        if j == 0 {
            return din;
        }
        let din = din.expect("input grad requested for non-first layer");
        let pre = &trace.layers[j - 1].pre;
        g = din
            .zip_map(pre, |d, z| d * arch[j - 1].activation.derivative(z))
            .expect("shape preserved through backward");
    }
    None
}

fn first_nonfinite_layer(trace: &ActivationTrace) -> usize {
    for (i, layer) in trace.layers.iter().enumerate() {
        if !layer.pre.all_finite() {
            return i;
        }
    }
    trace.layers.len().saturating_sub(1)
}

/// Evaluate a loss and its exact gradient with respect to every parameter.
///
/// `batch_y` carries the integer labels for the CE-based losses and is ignored
/// by `KlDistill` and `TriggerActivation`.
pub fn loss_and_grad(
    model: &ModelParams,
    arch: &[LayerSpec],
    batch_x: &Tensor,
    batch_y: &[usize],
    loss: &Loss<'_>,
) -> Result<(f64, ModelParams)> {
    let mut grads = ModelParams::zeros(arch);
    let (logits, trace) = super::forward_with_trace(model, arch, batch_x)?;

    let value = match *loss {
        Loss::CrossEntropy => {
            let (v, dlogits) = cross_entropy_value_and_dlogits(&logits, batch_y);
            backward_from_dlogits(model, arch, batch_x, &trace, &dlogits, &mut grads, false);
            v
        }
        Loss::BackdoorComposite {
            lambda,
            alpha,
            anchor,
            triggered_x,
            target_label,
        } => {
            let (clean_v, dlogits) = cross_entropy_value_and_dlogits(&logits, batch_y);
            backward_from_dlogits(model, arch, batch_x, &trace, &dlogits, &mut grads, false);
            let mut v = clean_v;
            if lambda != 0.0 {
                let (trig_logits, trig_trace) =
                    super::forward_with_trace(model, arch, triggered_x)?;
                let targets = vec![target_label; triggered_x.shape()[0]];
                let (trig_v, mut trig_dlogits) =
                    cross_entropy_value_and_dlogits(&trig_logits, &targets);
                for d in trig_dlogits.data_mut() {
                    *d *= lambda;
                }
                backward_from_dlogits(
                    model,
                    arch,
                    triggered_x,
                    &trig_trace,
                    &trig_dlogits,
                    &mut grads,
                    false,
                );
                v += lambda * trig_v;
            }
            if alpha != 0.0 {
                v += alpha * model.sq_distance(anchor);
                for (g, (m, a)) in grads
                    .layers
                    .iter_mut()
                    .zip(model.layers.iter().zip(anchor.layers.iter()))
                {
                    for (gd, (&mw, &aw)) in g
                        .weights
                        .data_mut()
                        .iter_mut()
                        .zip(m.weights.data().iter().zip(a.weights.data()))
                    {
                        *gd += 2.0 * alpha * (mw - aw);
                    }
                    for (gd, (&mb, &ab)) in g
                        .biases
                        .data_mut()
                        .iter_mut()
                        .zip(m.biases.data().iter().zip(a.biases.data()))
                    {
                        *gd += 2.0 * alpha * (mb - ab);
                    }
                }
            }
            v
        }
        Loss::KlDistill {
            teacher_logits,
            temperature,
        } => {
            if teacher_logits.shape() != logits.shape() {
                return Err(Error::ShapeMismatch {
                    context: "kl distill teacher vs student logits",
                    expected: logits.shape().to_vec(),
                    got: teacher_logits.shape().to_vec(),
                });
            }
            let t = temperature;
            let scaled_teacher = teacher_logits.map(|v| v / t);
            let scaled_student = logits.map(|v| v / t);
            let v = kl_divergence(&scaled_teacher, &scaled_student);
            let p = softmax_rows(&scaled_teacher);
            let q = softmax_rows(&scaled_student);
            let batch = logits.shape()[0] as f64;
            let dlogits = q
                .zip_map(&p, |qi, pi| (qi - pi) / (batch * t))
                .expect("teacher/student same shape");
            backward_from_dlogits(model, arch, batch_x, &trace, &dlogits, &mut grads, false);
            v
        }
        Loss::TriggerActivation { triggered_x } => {
            let (_, trig_trace) = super::forward_with_trace(model, arch, triggered_x)?;
            let (v, dz_clean, dz_trig) = trigger_diff_terms(arch, &trace, &trig_trace);
            let glayer = &mut grads.layers[0];
            layer_backward(
                &arch[0],
                &model.layers[0],
                batch_x,
                &dz_clean,
                &mut glayer.weights,
                &mut glayer.biases,
                false,
            );
            layer_backward(
                &arch[0],
                &model.layers[0],
                triggered_x,
                &dz_trig,
                &mut glayer.weights,
                &mut glayer.biases,
                false,
            );
            v
        }
    };

    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "loss",
            layer: first_nonfinite_layer(&trace),
        });
    }
    Ok((value, grads))
}

/// Shared pieces of the trigger-activation objective:
/// `L = || sigma(z1(clean)) - sigma(z1(triggered)) ||^2` summed over the batch,
/// plus the gradients with respect to the two first-layer pre-activations.
fn trigger_diff_terms(
    arch: &[LayerSpec],
    clean_trace: &ActivationTrace,
    trig_trace: &ActivationTrace,
) -> (f64, Tensor, Tensor) {
    let act = arch[0].activation;
    let clean_post = &clean_trace.layers[0].post;
    let trig_post = &trig_trace.layers[0].post;
    let diff = clean_post
        .zip_map(trig_post, |a, b| a - b)
        .expect("first-layer outputs same shape");
    let value = diff.sq_norm();
    let dz_clean = diff
        .zip_map(&clean_trace.layers[0].pre, |d, z| 2.0 * d * act.derivative(z))
        .expect("diff matches pre shape");
    let dz_trig = diff
        .zip_map(&trig_trace.layers[0].pre, |d, z| -2.0 * d * act.derivative(z))
        .expect("diff matches pre shape");
    (value, dz_clean, dz_trig)
}

/// Trigger-optimization objective plus its gradient with respect to the
/// triggered input batch.
///
/// Returns `(loss, dL/d(triggered_x))`; the caller chains through the trigger
/// placement mask to get the gradient on the trigger pattern itself.
pub fn first_layer_diff_loss_and_input_grad(
    model: &ModelParams,
    arch: &[LayerSpec],
    clean_x: &Tensor,
    triggered_x: &Tensor,
) -> Result<(f64, Tensor)> {
    let (_, clean_trace) = super::forward_with_trace(model, arch, clean_x)?;
    let (_, trig_trace) = super::forward_with_trace(model, arch, triggered_x)?;
    let (value, _, dz_trig) = trigger_diff_terms(arch, &clean_trace, &trig_trace);
    let mut wg = Tensor::zeros(arch[0].weight_shape());
    let mut bg = Tensor::zeros(arch[0].bias_shape());
    let din = layer_backward(
        &arch[0],
        &model.layers[0],
        triggered_x,
        &dz_trig,
        &mut wg,
        &mut bg,
        true,
    )
    .expect("input grad requested");
    Ok((value, din))
}
