//! The focused sign-flip backdoor attack with optional trigger optimization,
//! plus the classic train-and-rescale baseline.
//!
//! The attack runs in three stages: movement-based importance scoring picks
//! the least important weights per layer, their signs are flipped to align
//! with the trigger (first layer) or with the trigger-induced activation
//! difference (subsequent layers), and local training on the composite
//! objective binds the trigger to the target label. Flips preserve weight
//! magnitudes exactly and touch only masked coordinates.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::{apply_trigger, resize_trigger, Dataset, Trigger};
use crate::error::{Error, Result};
use crate::federation::{BatchCycler, ClientUpdate, RoundConfig};
use crate::nn::{
    first_layer_diff_loss_and_input_grad, forward_with_trace, loss_and_grad, sgd_step, LayerKind,
    LayerSpec, Loss, ModelParams,
};
use crate::seeds::{self, domain};
use crate::tensor::{resize_nearest_1d, resize_nearest_2d, Tensor};

/// Which movement-based importance metric to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceCriterion {
    /// `(w_t - w_{t-1}) .* w_t`: low for weights moving toward zero.
    Directional,
    /// `|(w_t - w_{t-1}) .* w_t|`: low for weights small in both value and update.
    Directionless,
}

/// Per-layer importance scores, shaped like each layer's weight tensor.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub layers: Vec<Tensor>,
}

/// Per-layer binary candidate masks over weight tensors.
#[derive(Debug, Clone)]
pub struct CandidateMask {
    pub layers: Vec<Tensor>,
}

/// Attack hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub criterion: ImportanceCriterion,
    /// Candidate fraction for convolutional layers.
    pub s_conv: f64,
    /// Candidate fraction for dense layers.
    pub s_dense: f64,
    /// Weight of the triggered-CE term in the composite loss.
    pub lambda: f64,
    /// Weight of the proximal anchor term in the composite loss.
    pub alpha: f64,
    /// Trigger optimization iterations P (0 disables optimization).
    pub trig_opt_iters: usize,
    /// Trigger ascent step size.
    pub trig_lr: f64,
    /// Validation batch size for activation differences.
    pub val_batch: usize,
    /// Master switch for the sign-flip stage (off leaves pure training).
    pub flip_enabled: bool,
    /// Local steps override; `None` trains like a benign client.
    pub local_steps: Option<usize>,
    /// Update scale factor for the rescale baseline.
    pub rescale_gamma: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            criterion: ImportanceCriterion::Directional,
            s_conv: 0.01,
            s_dense: 0.001,
            lambda: 1.0,
            alpha: 0.0,
            trig_opt_iters: 10,
            trig_lr: 0.1,
            val_batch: 32,
            flip_enabled: true,
            local_steps: None,
            rescale_gamma: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("s_conv", self.s_conv), ("s_dense", self.s_dense)] {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {s}")));
            }
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("lambda and alpha must be >= 0".into()));
        }
        if self.trig_lr <= 0.0 {
            return Err(Error::Config("trig_lr must be > 0".into()));
        }
        if self.rescale_gamma < 1.0 {
            return Err(Error::Config("rescale_gamma must be >= 1".into()));
        }
        if self.val_batch == 0 {
            return Err(Error::Config("val_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sign convention used by every flip: non-negative maps to +1, so flipped
/// coordinates always keep their magnitude.
#[inline]
fn flip_sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Movement-based importance: `(w_t - w_{t-1}) .* w_t`, elementwise absolute
/// value for the directionless variant. With no previous model the scores are
/// drawn at random from `rng`.
pub fn importance_scores(
    current: &ModelParams,
    previous: Option<&ModelParams>,
    criterion: ImportanceCriterion,
    rng: &mut impl Rng,
) -> Result<ImportanceScores> {
    let layers = match previous {
        Some(prev) => {
            if !current.shapes_match(prev) {
                return Err(Error::ShapeMismatch {
                    context: "importance_scores model pair",
                    expected: vec![current.num_params()],
                    got: vec![prev.num_params()],
                });
            }
            current
                .layers
                .iter()
                .zip(prev.layers.iter())
                .map(|(cur, old)| {
                    cur.weights
                        .zip_map(&old.weights, |wt, wp| {
                            let s = (wt - wp) * wt;
                            match criterion {
                                ImportanceCriterion::Directional => s,
                                ImportanceCriterion::Directionless => s.abs(),
                            }
                        })
                        .expect("shapes checked")
                })
                .collect()
        }
        None => current
            .layers
            .iter()
            .map(|l| {
                let n = l.weights.len();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::from_vec(l.weights.shape().to_vec(), data).expect("score shape")
            })
            .collect(),
    };
    Ok(ImportanceScores { layers })
}

/// Mark the `s`-fraction lowest-scored weights per layer (at least one), with
/// ties broken toward the lowest flat index.
pub fn select_candidates(
    scores: &ImportanceScores,
    arch: &[LayerSpec],
    s_conv: f64,
    s_dense: f64,
) -> CandidateMask {
    let layers = scores
        .layers
        .iter()
        .zip(arch.iter())
        .map(|(score, spec)| {
            let s = if spec.is_conv() { s_conv } else { s_dense };
            let n = score.len();
            let k = ((s * n as f64).round() as usize).clamp(1, n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                score.data()[a]
                    .partial_cmp(&score.data()[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut mask = vec![0.0; n];
            for &i in order.iter().take(k) {
                mask[i] = 1.0;
            }
            Tensor::from_vec(score.shape().to_vec(), mask).expect("mask shape")
        })
        .collect();
    CandidateMask { layers }
}

/// Core flip algebra: `w = m .* sign(src) .* |w| + (1 - m) .* w`.
pub fn flip_with_signs(weights: &Tensor, mask: &Tensor, sign_source: &Tensor) -> Result<Tensor> {
    if weights.shape() != mask.shape() || weights.shape() != sign_source.shape() {
        return Err(Error::ShapeMismatch {
            context: "flip_with_signs",
            expected: weights.shape().to_vec(),
            got: mask.shape().to_vec(),
        });
    }
    let mut out = weights.clone();
    for ((w, &m), &s) in out
        .data_mut()
        .iter_mut()
        .zip(mask.data())
        .zip(sign_source.data())
    {
        if m != 0.0 {
            *w = flip_sign(s) * w.abs();
        }
    }
    Ok(out)
}

/// Broadcast a per-input sign source onto a layer's weight shape: tiled across
/// output channels for conv kernels, across output rows for dense layers.
/// Inputs whose element count does not match are nearest-neighbor resized.
pub fn sign_source_for_layer(delta: &Tensor, spec: &LayerSpec) -> Tensor {
    match spec.kind {
        LayerKind::Dense { in_dim, out_dim } => {
            let flat = if delta.len() == in_dim {
                delta.data().to_vec()
            } else {
                resize_nearest_1d(delta.data(), in_dim)
            };
            let mut data = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                data.extend_from_slice(&flat);
            }
            Tensor::from_vec(spec.weight_shape(), data).expect("dense sign source")
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => {
            let per_kernel = in_channels * kernel_h * kernel_w;
            let kernel_map = if delta.shape().len() == 3 && delta.shape()[0] == in_channels {
                let (h, w) = (delta.shape()[1], delta.shape()[2]);
                let mut map = Vec::with_capacity(per_kernel);
                for c in 0..in_channels {
                    let src = &delta.data()[c * h * w..(c + 1) * h * w];
                    map.extend(resize_nearest_2d(src, h, w, kernel_h, kernel_w));
                }
                map
            } else {
                resize_nearest_1d(delta.data(), per_kernel)
            };
            let mut data = Vec::with_capacity(per_kernel * out_channels);
            for _ in 0..out_channels {
                data.extend_from_slice(&kernel_map);
            }
            Tensor::from_vec(spec.weight_shape(), data).expect("conv sign source")
        }
    }
}

/// Flip the first conv layer's candidates toward the resized trigger pattern.
pub fn flip_first_layer(
    weights: &Tensor,
    mask: &Tensor,
    resized_pattern: &Tensor,
    spec: &LayerSpec,
) -> Result<Tensor> {
    let signs = sign_source_for_layer(resized_pattern, spec);
    flip_with_signs(weights, mask, &signs)
}

/// Flip a subsequent layer's candidates toward the resized activation
/// difference.
pub fn flip_subsequent_layer(
    weights: &Tensor,
    mask: &Tensor,
    resized_delta: &Tensor,
    spec: &LayerSpec,
) -> Result<Tensor> {
    let signs = sign_source_for_layer(resized_delta, spec);
    flip_with_signs(weights, mask, &signs)
}

/// Batch-averaged activation difference of one layer caused by the trigger:
/// `delta = mean_b [ sigma(z_layer(x')) - sigma(z_layer(x)) ]`, shaped like the
/// layer's per-sample output.
pub fn activation_difference(
    model: &ModelParams,
    arch: &[LayerSpec],
    layer: usize,
    x_v: &Tensor,
    trigger: &Trigger,
) -> Result<Tensor> {
    let triggered = apply_trigger(x_v, trigger)?;
    let (_, clean_trace) = forward_with_trace(model, arch, x_v)?;
    let (_, trig_trace) = forward_with_trace(model, arch, &triggered)?;
    let clean = &clean_trace.layers[layer].post;
    let trig = &trig_trace.layers[layer].post;
    let batch = clean.shape()[0];
    let per: usize = clean.shape()[1..].iter().product();
    let mut mean = vec![0.0; per];
    for b in 0..batch {
        for i in 0..per {
            mean[i] += (trig.data()[b * per + i] - clean.data()[b * per + i]) / batch as f64;
        }
    }
    Tensor::from_vec(clean.shape()[1..].to_vec(), mean)
}

fn sample_batch(ds: &Dataset, size: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
    let mut ids: Vec<usize> = (0..ds.len()).collect();
    ids.shuffle(rng);
    ids.truncate(size.clamp(1, ds.len()));
    ds.gather(&ids)
}

/// Flip the first layer toward the trigger's current sign pattern. Conv first
/// layers use the resized trigger; dense first layers use the sign of the
/// trigger-induced input delta, restricted to pixels the trigger changes.
fn flip_first_toward_trigger(
    model: &mut ModelParams,
    arch: &[LayerSpec],
    mask1: &Tensor,
    trigger: &Trigger,
    val_x: &Tensor,
) -> Result<()> {
    match arch[0].kind {
        LayerKind::Conv2d {
            kernel_h, kernel_w, ..
        } => {
            let resized = resize_trigger(&trigger.pattern, kernel_h, kernel_w);
            model.layers[0].weights =
                flip_first_layer(&model.layers[0].weights, mask1, &resized, &arch[0])?;
        }
        LayerKind::Dense { in_dim, out_dim } => {
            let triggered = apply_trigger(val_x, trigger)?;
            let batch = val_x.shape()[0];
            let per: usize = val_x.shape()[1..].iter().product();
            let mut delta = vec![0.0; per];
            for b in 0..batch {
                for i in 0..per {
                    delta[i] +=
                        (triggered.data()[b * per + i] - val_x.data()[b * per + i]) / batch as f64;
                }
            }
            // Restrict to pixels the trigger actually changes; everything else
            // keeps its sign and value.
            let flat = if per == in_dim {
                delta
            } else {
                resize_nearest_1d(&delta, in_dim)
            };
            let mut signs = Vec::with_capacity(in_dim * out_dim);
            let mut gate = Vec::with_capacity(in_dim * out_dim);
            for _ in 0..out_dim {
                signs.extend_from_slice(&flat);
                gate.extend(flat.iter().map(|&d| if d != 0.0 { 1.0 } else { 0.0 }));
            }
            let wshape = arch[0].weight_shape();
            let signs = Tensor::from_vec(wshape.clone(), signs)?;
            let gate = Tensor::from_vec(wshape, gate)?;
            let restricted = mask1.zip_map(&gate, |m, g| m * g)?;
            model.layers[0].weights =
                flip_with_signs(&model.layers[0].weights, &restricted, &signs)?;
        }
    }
    Ok(())
}

/// Gradient-ascend the trigger pattern to maximize the first layer's
/// activation difference, re-flipping the first layer each iteration.
///
/// Returns the optimized trigger; the model's first layer is left flipped
/// with respect to it. With `iters == 0` the pattern is untouched but the
/// flip is still applied once.
pub fn optimize_trigger(
    model: &mut ModelParams,
    arch: &[LayerSpec],
    trigger: &Trigger,
    mask1: &Tensor,
    cfg: &AttackConfig,
    data: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Trigger> {
    let mut trig = trigger.clone();
    let (h, w) = (trig.mask.shape()[0], trig.mask.shape()[1]);
    let (y0, x0) = trig.mask_origin();
    let pshape = trig.pattern.shape().to_vec();
    let (channels, th, tw) = (pshape[0], pshape[1], pshape[2]);

    for iteration in 0..cfg.trig_opt_iters {
        let (val_x, _) = sample_batch(data, cfg.val_batch, rng);
        flip_first_toward_trigger(model, arch, mask1, &trig, &val_x)?;

        let (batch_x, _) = sample_batch(data, batch_size, rng);
        let triggered = apply_trigger(&batch_x, &trig)?;
        let (_, din) = first_layer_diff_loss_and_input_grad(model, arch, &batch_x, &triggered)?;

        // Chain through x' = (1-m) x + m pattern: the pattern gradient is the
        // input gradient summed over the batch at masked positions.
        let batch = batch_x.shape()[0];
        let per = channels * h * w;
        let mut grad = vec![0.0; channels * th * tw];
        for b in 0..batch {
            for c in 0..channels {
                for ty in 0..th {
                    for tx in 0..tw {
                        let (iy, ix) = (y0 + ty, x0 + tx);
                        if trig.mask.data()[iy * w + ix] != 0.0 {
                            grad[c * th * tw + ty * tw + tx] +=
                                din.data()[b * per + c * h * w + iy * w + ix];
                        }
                    }
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteTriggerGrad { iteration });
        }
        // din is d/d(x') of || sigma(z1(x)) - sigma(z1(x')) ||^2, which we
        // maximize, so ascend along it.
        let pdata = trig.pattern.data_mut();
        for (p, g) in pdata.iter_mut().zip(grad.iter()) {
            *p = (*p + cfg.trig_lr * g).clamp(0.0, 1.0);
        }
    }

    // Leave the first layer flipped with respect to the final pattern.
    let (val_x, _) = sample_batch(data, cfg.val_batch, rng);
    flip_first_toward_trigger(model, arch, mask1, &trig, &val_x)?;
    Ok(trig)
}

/// Run the composite-loss local training loop shared by the attack and the
/// rescale baseline. Consumes the same seeded stream as benign training so the
/// attack-off limit is bit-identical to `local_train_benign`.
fn train_composite(
    model: &mut ModelParams,
    arch: &[LayerSpec],
    anchor: &ModelParams,
    data: &Dataset,
    trigger: &Trigger,
    lambda: f64,
    alpha: f64,
    steps: usize,
    round_cfg: &RoundConfig,
    round: usize,
    client_id: usize,
) -> Result<()> {
    let mut rng = seeds::stream(
        round_cfg.seed,
        &[domain::LOCAL_TRAIN, round as u64, client_id as u64],
    );
    let mut cycler = BatchCycler::new(data.len(), round_cfg.batch_size, &mut rng);
    for _ in 0..steps {
        let idx = cycler.next(&mut rng);
        let (bx, by) = data.gather(&idx);
        let triggered;
        let trig_ref = if lambda != 0.0 {
            triggered = apply_trigger(&bx, trigger)?;
            &triggered
        } else {
            &bx
        };
        let loss = Loss::BackdoorComposite {
            lambda,
            alpha,
            anchor,
            triggered_x: trig_ref,
            target_label: trigger.target_label,
        };
        let (_, grads) = loss_and_grad(model, arch, &bx, &by, &loss)?;
        *model = sgd_step(model, &grads, round_cfg.local_lr)?;
    }
    Ok(())
}

/// The full attack for one sampled malicious client: score, mask, flip (with
/// optional trigger optimization), flip subsequent layers, then train the
/// composite objective. Returns the proposed update and the trigger actually
/// used, without any rescaling.
#[allow(clippy::too_many_arguments)]
pub fn f3ba_update(
    global: &ModelParams,
    prev_global: Option<&ModelParams>,
    arch: &[LayerSpec],
    client_data: &Dataset,
    trigger: &Trigger,
    cfg: &AttackConfig,
    round_cfg: &RoundConfig,
    round: usize,
    client_id: usize,
) -> Result<(ClientUpdate, Trigger)> {
    cfg.validate()?;
    if client_data.is_empty() {
        return Err(Error::Config(format!(
            "malicious client {client_id} has no samples"
        )));
    }
    let mut attack_rng = seeds::stream(
        round_cfg.seed,
        &[domain::ATTACK, round as u64, client_id as u64],
    );
    let mut model = global.clone();
    let mut trig = trigger.clone();

    if cfg.flip_enabled {
        let scores = importance_scores(global, prev_global, cfg.criterion, &mut attack_rng)?;
        let masks = select_candidates(&scores, arch, cfg.s_conv, cfg.s_dense);

        if cfg.trig_opt_iters > 0 {
            trig = optimize_trigger(
                &mut model,
                arch,
                &trig,
                &masks.layers[0],
                cfg,
                client_data,
                round_cfg.batch_size,
                &mut attack_rng,
            )?;
        } else {
            let (val_x, _) = sample_batch(client_data, cfg.val_batch, &mut attack_rng);
            flip_first_toward_trigger(&mut model, arch, &masks.layers[0], &trig, &val_x)?;
        }

        // Subsequent layers: flip toward the resized activation difference of
        // the layer below, computed on one validation batch.
        if arch.len() > 1 {
            let (val_x, _) = sample_batch(client_data, cfg.val_batch, &mut attack_rng);
            for j in 1..arch.len() {
                let delta = activation_difference(&model, arch, j - 1, &val_x, &trig)?;
                model.layers[j].weights = flip_subsequent_layer(
                    &model.layers[j].weights,
                    &masks.layers[j],
                    &delta,
                    &arch[j],
                )?;
            }
        }
    }

    let steps = cfg.local_steps.unwrap_or(round_cfg.local_steps);
    train_composite(
        &mut model,
        arch,
        global,
        client_data,
        &trig,
        cfg.lambda,
        cfg.alpha,
        steps,
        round_cfg,
        round,
        client_id,
    )?;

    let update = ClientUpdate::new(client_id, client_data.len(), model, true)?;
    Ok((update, trig))
}

/// Train-and-rescale baseline: composite-loss training on a fixed trigger,
/// then propose `theta_t + gamma * (theta_trained - theta_t)`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_rescale_update(
    global: &ModelParams,
    arch: &[LayerSpec],
    client_data: &Dataset,
    trigger: &Trigger,
    cfg: &AttackConfig,
    round_cfg: &RoundConfig,
    round: usize,
    client_id: usize,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    let mut model = global.clone();
    let steps = cfg.local_steps.unwrap_or(round_cfg.local_steps);
    train_composite(
        &mut model,
        arch,
        global,
        client_data,
        trigger,
        cfg.lambda,
        cfg.alpha,
        steps,
        round_cfg,
        round,
        client_id,
    )?;
    let proposed = if cfg.rescale_gamma == 1.0 {
        model
    } else {
        let mut scaled = global.clone();
        let mut delta = model;
        delta.add_scaled(global, -1.0)?;
        scaled.add_scaled(&delta, cfg.rescale_gamma)?;
        scaled
    };
    ClientUpdate::new(client_id, client_data.len(), proposed, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs_dataset, TriggerPlacement};
    use crate::federation::local_train_benign;
    use crate::nn::Activation;

    fn conv_arch() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv2d(1, 3, 3, 3, Activation::Relu),
            LayerSpec::dense(3 * 4 * 4, 8, Activation::Relu),
            LayerSpec::dense(8, 4, Activation::Identity),
        ]
    }

    fn small_ds(seed: u64) -> Dataset {
        gen_blobs_dataset(4, 10, (1, 6, 6), 0.15, seed, 0)
    }

    fn round_cfg() -> RoundConfig {
        RoundConfig {
            clients_per_round: 1,
            local_steps: 4,
            local_lr: 0.05,
            batch_size: 8,
            seed: 77,
        }
    }

    #[test]
    fn directional_scores_match_formula() {
        let arch = vec![LayerSpec::dense(2, 1, Activation::Identity)];
        let mut cur = ModelParams::zeros(&arch);
        cur.layers[0].weights.data_mut().copy_from_slice(&[2.0, -1.0]);
        let mut prev = ModelParams::zeros(&arch);
        prev.layers[0].weights.data_mut().copy_from_slice(&[1.0, -0.5]);
        let mut rng = seeds::stream(0, &[0]);
        let s = importance_scores(&cur, Some(&prev), ImportanceCriterion::Directional, &mut rng)
            .unwrap();
        assert_eq!(s.layers[0].data(), &[2.0, 0.5]);
    }

    #[test]
    fn shrinking_weight_scores_negative() {
        let arch = vec![LayerSpec::dense(1, 1, Activation::Identity)];
        let mut cur = ModelParams::zeros(&arch);
        cur.layers[0].weights.data_mut()[0] = 0.5;
        let mut prev = ModelParams::zeros(&arch);
        prev.layers[0].weights.data_mut()[0] = 1.0;
        let mut rng = seeds::stream(0, &[0]);
        let s = importance_scores(&cur, Some(&prev), ImportanceCriterion::Directional, &mut rng)
            .unwrap();
        assert_eq!(s.layers[0].data(), &[-0.25]);
    }

    #[test]
    fn directionless_is_absolute_directional() {
        let arch = conv_arch();
        let mut rng = seeds::stream(3, &[1]);
        let cur = ModelParams::init_glorot(&arch, &mut rng);
        let prev = ModelParams::init_glorot(&arch, &mut rng);
        let mut r1 = seeds::stream(0, &[0]);
        let mut r2 = seeds::stream(0, &[0]);
        let d = importance_scores(&cur, Some(&prev), ImportanceCriterion::Directional, &mut r1)
            .unwrap();
        let dl = importance_scores(&cur, Some(&prev), ImportanceCriterion::Directionless, &mut r2)
            .unwrap();
        for (a, b) in d.layers.iter().zip(dl.layers.iter()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert_eq!(y, x.abs());
            }
        }
    }

    #[test]
    fn candidate_selection_picks_lowest_scores() {
        let arch = vec![LayerSpec::dense(4, 1, Activation::Identity)];
        let scores = ImportanceScores {
            layers: vec![Tensor::from_vec(vec![1, 4], vec![5.0, -1.0, 3.0, 0.0]).unwrap()],
        };
        let mask = select_candidates(&scores, &arch, 0.25, 0.25);
        assert_eq!(mask.layers[0].data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn candidate_ties_break_by_lowest_index() {
        let arch = vec![LayerSpec::dense(4, 1, Activation::Identity)];
        let scores = ImportanceScores {
            layers: vec![Tensor::from_vec(vec![1, 4], vec![2.0; 4]).unwrap()],
        };
        let mask = select_candidates(&scores, &arch, 0.5, 0.5);
        assert_eq!(mask.layers[0].data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn candidate_set_matches_sort_oracle() {
        let arch = conv_arch();
        let mut rng = seeds::stream(9, &[2]);
        let cur = ModelParams::init_glorot(&arch, &mut rng);
        let prev = ModelParams::init_glorot(&arch, &mut rng);
        let mut r = seeds::stream(0, &[0]);
        let scores =
            importance_scores(&cur, Some(&prev), ImportanceCriterion::Directional, &mut r).unwrap();
        let masks = select_candidates(&scores, &arch, 0.2, 0.05);
        for (li, (score, mask)) in scores.layers.iter().zip(masks.layers.iter()).enumerate() {
            let s = if arch[li].is_conv() { 0.2 } else { 0.05 };
            let k = ((s * score.len() as f64).round() as usize).clamp(1, score.len());
            // Full-sort oracle of the bottom-k set.
            let mut order: Vec<usize> = (0..score.len()).collect();
            order.sort_by(|&a, &b| {
                score.data()[a]
                    .partial_cmp(&score.data()[b])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let expected: std::collections::BTreeSet<usize> =
                order[..k].iter().copied().collect();
            let got: std::collections::BTreeSet<usize> = mask
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &m)| m != 0.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(got, expected, "layer {li}");
            assert_eq!(got.len(), k);
        }
    }

    #[test]
    fn flip_sign_algebra() {
        let w = Tensor::from_vec(vec![2], vec![2.0, -3.0]).unwrap();
        let mask = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let signs = Tensor::from_vec(vec![2], vec![-1.0, 1.0]).unwrap();
        let out = flip_with_signs(&w, &mask, &signs).unwrap();
        assert_eq!(out.data(), &[-2.0, 3.0]);
    }

    #[test]
    fn flip_with_empty_mask_is_identity() {
        let w = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mask = Tensor::zeros(vec![3]);
        let signs = Tensor::from_vec(vec![3], vec![-1.0, -1.0, -1.0]).unwrap();
        let out = flip_with_signs(&w, &mask, &signs).unwrap();
        assert_eq!(out.data(), w.data());
    }

    #[test]
    fn flip_preserves_magnitudes_and_sets_signs() {
        let mut rng = seeds::stream(4, &[5]);
        for _ in 0..50 {
            let n = 16;
            let w = Tensor::from_vec(vec![n], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let mask = Tensor::from_vec(
                vec![n],
                (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
            )
            .unwrap();
            let signs =
                Tensor::from_vec(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap();
            let out = flip_with_signs(&w, &mask, &signs).unwrap();
            for i in 0..n {
                assert_eq!(out.data()[i].abs(), w.data()[i].abs());
                if mask.data()[i] != 0.0 {
                    assert_eq!(out.data()[i] >= 0.0, signs.data()[i] >= 0.0);
                } else {
                    assert_eq!(out.data()[i], w.data()[i]);
                }
            }
        }
    }

    #[test]
    fn activation_difference_zero_for_empty_mask() {
        let arch = conv_arch();
        let mut rng = seeds::stream(6, &[1]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(8);
        let trig = Trigger {
            pattern: Tensor::full(vec![1, 2, 2], 1.0),
            mask: Tensor::zeros(vec![6, 6]),
            target_label: 0,
        };
        let (val, _) = ds.gather(&[0, 1, 2]);
        let delta = activation_difference(&model, &arch, 0, &val, &trig).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_difference_identity_layer_propagates_pixel_bump() {
        // Identity-weight dense layer; the trigger lifts one pixel from 0 to 1.
        let arch = vec![LayerSpec::dense(9, 9, Activation::Relu)];
        let mut model = ModelParams::zeros(&arch);
        for i in 0..9 {
            model.layers[0].weights.data_mut()[i * 9 + i] = 1.0;
        }
        let x = Tensor::zeros(vec![1, 1, 3, 3]);
        let mut mask = Tensor::zeros(vec![3, 3]);
        mask.data_mut()[4] = 1.0;
        let trig = Trigger {
            pattern: Tensor::full(vec![1, 1, 1], 1.0),
            mask,
            target_label: 0,
        };
        let delta = activation_difference(&model, &arch, 0, &x, &trig).unwrap();
        let mut expected = vec![0.0; 9];
        expected[4] = 1.0;
        assert_eq!(delta.data(), expected.as_slice());
    }

    #[test]
    fn activation_difference_matches_double_forward_oracle() {
        let arch = conv_arch();
        let mut rng = seeds::stream(61, &[2]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(13);
        let trig = Trigger::solid(1, 2, 2, 6, 6, TriggerPlacement::BottomRight, 1).unwrap();
        let (val, _) = ds.gather(&[0, 5, 9]);
        for layer in 0..arch.len() {
            let delta = activation_difference(&model, &arch, layer, &val, &trig).unwrap();
            // Independent oracle: two forward passes subtracted by hand.
            let triggered = apply_trigger(&val, &trig).unwrap();
            let (_, tr_c) = forward_with_trace(&model, &arch, &val).unwrap();
            let (_, tr_t) = forward_with_trace(&model, &arch, &triggered).unwrap();
            let per: usize = delta.len();
            for i in 0..per {
                let mut acc = 0.0;
                for b in 0..3 {
                    acc += (tr_t.layers[layer].post.data()[b * per + i]
                        - tr_c.layers[layer].post.data()[b * per + i])
                        / 3.0;
                }
                assert!((acc - delta.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trigger_opt_zero_iters_keeps_pattern_but_flips_once() {
        let arch = conv_arch();
        let mut rng = seeds::stream(7, &[3]);
        let model0 = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(21);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let mut cfg = AttackConfig::default();
        cfg.trig_opt_iters = 0;
        let scores = importance_scores(&model0, None, cfg.criterion, &mut rng).unwrap();
        let masks = select_candidates(&scores, &arch, 0.3, 0.05);

        let mut model = model0.clone();
        let mut opt_rng = seeds::stream(1, &[domain::ATTACK]);
        let out = optimize_trigger(
            &mut model, &arch, &trig, &masks.layers[0], &cfg, &ds, 8, &mut opt_rng,
        )
        .unwrap();
        assert_eq!(out.pattern, trig.pattern);
        // Masked first-layer weights now carry the (all-positive) pattern sign.
        for (i, &m) in masks.layers[0].data().iter().enumerate() {
            let w0 = model0.layers[0].weights.data()[i];
            let w1 = model.layers[0].weights.data()[i];
            if m != 0.0 {
                assert_eq!(w1, w0.abs());
            } else {
                assert_eq!(w1, w0);
            }
        }
    }

    #[test]
    fn trigger_opt_zero_lr_keeps_pattern() {
        let arch = conv_arch();
        let mut rng = seeds::stream(71, &[3]);
        let model0 = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(22);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let mut cfg = AttackConfig::default();
        cfg.trig_opt_iters = 3;
        cfg.trig_lr = 1e-300; // effectively zero while passing validation
        let scores = importance_scores(&model0, None, cfg.criterion, &mut rng).unwrap();
        let masks = select_candidates(&scores, &arch, 0.3, 0.05);
        let mut model = model0.clone();
        let mut opt_rng = seeds::stream(2, &[domain::ATTACK]);
        let out = optimize_trigger(
            &mut model, &arch, &trig, &masks.layers[0], &cfg, &ds, 8, &mut opt_rng,
        )
        .unwrap();
        for (a, b) in out.pattern.data().iter().zip(trig.pattern.data()) {
            assert!((a - b).abs() < 1e-250);
        }
        assert_ne!(model.layers[0].weights, model0.layers[0].weights);
    }

    #[test]
    fn trigger_opt_ascends_the_objective() {
        // Ascent sanity over seeds: the final pattern should score at least as
        // well as the initial one under the final flipped first layer.
        let arch = conv_arch();
        let mut improved = 0;
        let runs = 20;
        for seed in 0..runs {
            let mut rng = seeds::stream(seed, &[11]);
            let model0 = ModelParams::init_glorot(&arch, &mut rng);
            let ds = small_ds(seed + 40);
            let init = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
            let mut cfg = AttackConfig::default();
            cfg.trig_opt_iters = 8;
            cfg.trig_lr = 0.05;
            cfg.val_batch = 8;
            let scores = importance_scores(&model0, None, cfg.criterion, &mut rng).unwrap();
            let masks = select_candidates(&scores, &arch, 0.3, 0.05);
            let mut model = model0.clone();
            let mut opt_rng = seeds::stream(seed, &[domain::ATTACK, 0]);
            let out = optimize_trigger(
                &mut model, &arch, &init, &masks.layers[0], &cfg, &ds, 8, &mut opt_rng,
            )
            .unwrap();

            let all: Vec<usize> = (0..ds.len()).collect();
            let (bx, _) = ds.gather(&all);
            let l_init = {
                let t = apply_trigger(&bx, &init).unwrap();
                first_layer_diff_loss_and_input_grad(&model, &arch, &bx, &t)
                    .unwrap()
                    .0
            };
            let l_final = {
                let t = apply_trigger(&bx, &out).unwrap();
                first_layer_diff_loss_and_input_grad(&model, &arch, &bx, &t)
                    .unwrap()
                    .0
            };
            if l_final >= l_init {
                improved += 1;
            }
        }
        assert!(
            improved * 10 >= runs * 9,
            "trigger optimization improved only {improved}/{runs} runs"
        );
    }

    #[test]
    fn attack_off_limit_equals_benign_training() {
        let arch = conv_arch();
        let mut rng = seeds::stream(88, &[domain::MODEL_INIT]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(50);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let cfg = AttackConfig {
            lambda: 0.0,
            alpha: 0.0,
            trig_opt_iters: 0,
            flip_enabled: false,
            ..AttackConfig::default()
        };
        let rc = round_cfg();
        let (up, _) = f3ba_update(&model, None, &arch, &ds, &trig, &cfg, &rc, 2, 9).unwrap();
        let benign = local_train_benign(&model, &arch, &ds, &rc, 2, 9).unwrap();
        assert_eq!(up.proposed, benign.proposed);
    }

    #[test]
    fn f3ba_update_is_deterministic() {
        let arch = conv_arch();
        let mut rng = seeds::stream(90, &[domain::MODEL_INIT]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let prev = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(51);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let cfg = AttackConfig {
            s_conv: 0.2,
            s_dense: 0.02,
            ..AttackConfig::default()
        };
        let rc = round_cfg();
        let (a, ta) = f3ba_update(&model, Some(&prev), &arch, &ds, &trig, &cfg, &rc, 5, 3).unwrap();
        let (b, tb) = f3ba_update(&model, Some(&prev), &arch, &ds, &trig, &cfg, &rc, 5, 3).unwrap();
        assert_eq!(a.proposed, b.proposed);
        assert_eq!(ta, tb);
    }

    #[test]
    fn full_pipeline_raises_target_logit_on_triggered_batch() {
        let arch = conv_arch();
        let mut rng = seeds::stream(91, &[domain::MODEL_INIT]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(52);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let cfg = AttackConfig {
            s_conv: 0.25,
            s_dense: 0.02,
            lambda: 2.0,
            ..AttackConfig::default()
        };
        let mut rc = round_cfg();
        rc.local_steps = 20;
        let (up, out_trig) =
            f3ba_update(&model, None, &arch, &ds, &trig, &cfg, &rc, 0, 0).unwrap();

        let all: Vec<usize> = (0..ds.len()).collect();
        let (bx, _) = ds.gather(&all);
        let triggered = apply_trigger(&bx, &out_trig).unwrap();
        let before = crate::federation::mean_logits(&model, &arch, &triggered).unwrap();
        let after = crate::federation::mean_logits(&up.proposed, &arch, &triggered).unwrap();
        assert!(
            after[0] > before[0],
            "target logit did not rise: {} -> {}",
            before[0],
            after[0]
        );
    }

    #[test]
    fn baseline_gamma_one_is_plain_backdoor_training() {
        let arch = conv_arch();
        let mut rng = seeds::stream(92, &[domain::MODEL_INIT]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(53);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let cfg = AttackConfig {
            rescale_gamma: 1.0,
            flip_enabled: false,
            trig_opt_iters: 0,
            ..AttackConfig::default()
        };
        let rc = round_cfg();
        let up = baseline_rescale_update(&model, &arch, &ds, &trig, &cfg, &rc, 1, 2).unwrap();
        let mut trained = model.clone();
        train_composite(
            &mut trained,
            &arch,
            &model,
            &ds,
            &trig,
            cfg.lambda,
            cfg.alpha,
            rc.local_steps,
            &rc,
            1,
            2,
        )
        .unwrap();
        assert_eq!(up.proposed, trained);
    }

    #[test]
    fn baseline_gamma_scales_update_norm_linearly() {
        let arch = conv_arch();
        let mut rng = seeds::stream(93, &[domain::MODEL_INIT]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(54);
        let trig = Trigger::solid(1, 3, 3, 6, 6, TriggerPlacement::BottomRight, 0).unwrap();
        let base = AttackConfig {
            flip_enabled: false,
            trig_opt_iters: 0,
            ..AttackConfig::default()
        };
        let rc = round_cfg();
        let norm_of = |gamma: f64| {
            let cfg = AttackConfig {
                rescale_gamma: gamma,
                ..base.clone()
            };
            let up = baseline_rescale_update(&model, &arch, &ds, &trig, &cfg, &rc, 4, 6).unwrap();
            let mut delta = up.proposed;
            delta.add_scaled(&model, -1.0).unwrap();
            delta.norm()
        };
        let n1 = norm_of(1.0);
        let n10 = norm_of(10.0);
        assert!((n10 - 10.0 * n1).abs() < 1e-9 * n1.max(1.0));
    }

    #[test]
    fn mlp_path_flips_only_trigger_pixels() {
        // Dense first layer: coordinates with zero input delta stay untouched.
        let arch = vec![
            LayerSpec::dense(36, 12, Activation::Relu),
            LayerSpec::dense(12, 4, Activation::Identity),
        ];
        let mut rng = seeds::stream(94, &[domain::MODEL_INIT]);
        let model = ModelParams::init_glorot(&arch, &mut rng);
        let ds = small_ds(55);
        let trig = Trigger::solid(1, 2, 2, 6, 6, TriggerPlacement::TopLeft, 0).unwrap();
        let cfg = AttackConfig {
            s_dense: 0.5,
            trig_opt_iters: 0,
            lambda: 0.0,
            local_steps: Some(0),
            ..AttackConfig::default()
        };
        let rc = round_cfg();
        let (up, _) = f3ba_update(&model, None, &arch, &ds, &trig, &cfg, &rc, 3, 1).unwrap();

        // Trigger pixels: top-left 2x2 of the 6x6 image; flat input indices.
        let trigger_inputs: std::collections::BTreeSet<usize> =
            [0usize, 1, 6, 7].into_iter().collect();
        let w_before = model.layers[0].weights.data();
        let w_after = up.proposed.layers[0].weights.data();
        for o in 0..12 {
            for i in 0..36 {
                let idx = o * 36 + i;
                if !trigger_inputs.contains(&i) {
                    assert_eq!(
                        w_after[idx], w_before[idx],
                        "non-trigger input {i} was flipped"
                    );
                }
            }
        }
        // At least one trigger-pixel weight must have been touched.
        let touched = trigger_inputs.iter().any(|&i| {
            (0..12).any(|o| w_after[o * 36 + i] != w_before[o * 36 + i])
        });
        assert!(touched);
    }
}
