//! Model-refinement defenses (ensemble distillation, median-scored
//! distillation, filter pruning) and the clip/perturb/vote certified defense.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::federation::{
    fedavg_aggregate, AggregateOutput, Aggregator, ClientUpdate, FedAvgDivisor, GlobalState,
    ServerContext,
};
use crate::nn::{
    forward_with_trace, loss_and_grad, predict_batch, sgd_step, LayerKind, LayerSpec, Loss,
    ModelParams,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// FedDF
// ---------------------------------------------------------------------------

/// Server-side distillation parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 10,
            lr: 0.5,
            temperature: 1.0,
        }
    }
}

/// Elementwise mean of the client models' logits on a batch.
pub fn ensemble_logits(
    models: &[&ModelParams],
    arch: &[LayerSpec],
    x: &Tensor,
) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::Aggregation("ensemble of zero models".into()));
    }
    let mut acc: Option<Tensor> = None;
    for m in models {
        let (logits, _) = forward_with_trace(m, arch, x)?;
        acc = Some(match acc {
            None => logits,
            Some(mut a) => {
                a.add_scaled(&logits, 1.0)?;
                a
            }
        });
    }
    let scale = 1.0 / models.len() as f64;
    Ok(acc.expect("non-empty ensemble").map(|v| v * scale))
}

fn distill_toward(
    start: &ModelParams,
    arch: &[LayerSpec],
    teacher_logits: &Tensor,
    unlabeled_x: &Tensor,
    cfg: &DistillConfig,
) -> Result<ModelParams> {
    let mut model = start.clone();
    for step in 0..cfg.steps {
        let loss = Loss::KlDistill {
            teacher_logits,
            temperature: cfg.temperature,
        };
        let (_, grads) = loss_and_grad(&model, arch, unlabeled_x, &[], &loss).map_err(|e| {
            Error::Aggregation(format!("distillation aborted at step {step}: {e}"))
        })?;
        model = sgd_step(&model, &grads, cfg.lr)?;
    }
    Ok(model)
}

/// FedDF: start from the FedAvg aggregate and descend the KL divergence to
/// the ensembled teacher's soft labels on the server's unlabeled set.
pub fn feddf_distill(
    fedavg_model: &ModelParams,
    arch: &[LayerSpec],
    client_models: &[&ModelParams],
    unlabeled_x: &Tensor,
    cfg: &DistillConfig,
) -> Result<ModelParams> {
    if unlabeled_x.shape()[0] == 0 {
        return Err(Error::Config("distillation set is empty".into()));
    }
    let teacher = ensemble_logits(client_models, arch, unlabeled_x)?;
    distill_toward(fedavg_model, arch, &teacher, unlabeled_x, cfg)
}

/// FedDF as an [`Aggregator`].
pub struct FedDf {
    pub cfg: DistillConfig,
}

impl Aggregator for FedDf {
    fn name(&self) -> &'static str {
        "feddf"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let server = ctx
            .server_data
            .ok_or_else(|| Error::Config("feddf needs a server dataset".into()))?;
        let base = fedavg_aggregate(state, updates, FedAvgDivisor::Participating)?;
        let models: Vec<&ModelParams> = updates.iter().map(|u| &u.proposed).collect();
        let model = feddf_distill(&base, ctx.arch, &models, &server.xs, &self.cfg)?;
        Ok(AggregateOutput::plain(model))
    }
}

// ---------------------------------------------------------------------------
// FedRAD
// ---------------------------------------------------------------------------

/// Per-client median-count scores and their normalized weights.
#[derive(Debug, Clone)]
pub struct FedRadScores {
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
    /// True when every raw score was zero and uniform weights were used.
    pub degenerate: bool,
}

/// Median of a slice under the member-value convention: for even counts the
/// lower middle is taken, so the median always equals some client's logit.
fn member_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values[(values.len() - 1) / 2]
}

/// Count, per client, the (sample, class) pairs where its logit equals the
/// cross-client median on the server set.
pub fn fedrad_scores(
    client_models: &[&ModelParams],
    arch: &[LayerSpec],
    server_x: &Tensor,
) -> Result<FedRadScores> {
    if client_models.is_empty() {
        return Err(Error::Aggregation("fedrad needs at least one model".into()));
    }
    if server_x.shape()[0] == 0 {
        return Err(Error::Config("fedrad server set is empty".into()));
    }
    let mut logits = Vec::with_capacity(client_models.len());
    for m in client_models {
        let (l, _) = forward_with_trace(m, arch, server_x)?;
        logits.push(l);
    }
    let cells = logits[0].len();
    let mut raw = vec![0.0; client_models.len()];
    let mut column = vec![0.0; client_models.len()];
    for cell in 0..cells {
        for (ci, l) in logits.iter().enumerate() {
            column[ci] = l.data()[cell];
        }
        let mut sorted = column.clone();
        let med = member_median(&mut sorted);
        for (ci, &v) in column.iter().enumerate() {
            if v == med {
                raw[ci] += 1.0;
            }
        }
    }
    let total: f64 = raw.iter().sum();
    let (weights, degenerate) = if total > 0.0 {
        (raw.iter().map(|s| s / total).collect(), false)
    } else {
        (
            vec![1.0 / client_models.len() as f64; client_models.len()],
            true,
        )
    };
    Ok(FedRadScores {
        raw,
        weights,
        degenerate,
    })
}

/// Per-(sample, class) median logits across clients: the distillation teacher
/// FedRAD uses instead of the ensemble mean.
pub fn median_teacher_logits(
    client_models: &[&ModelParams],
    arch: &[LayerSpec],
    x: &Tensor,
) -> Result<Tensor> {
    let mut logits = Vec::with_capacity(client_models.len());
    for m in client_models {
        let (l, _) = forward_with_trace(m, arch, x)?;
        logits.push(l);
    }
    let cells = logits[0].len();
    let mut out = vec![0.0; cells];
    let mut column = vec![0.0; client_models.len()];
    for (cell, o) in out.iter_mut().enumerate() {
        for (ci, l) in logits.iter().enumerate() {
            column[ci] = l.data()[cell];
        }
        *o = member_median(&mut column);
    }
    Tensor::from_vec(logits[0].shape().to_vec(), out)
}

/// FedRAD: median-count score weighting in the aggregation, then distillation
/// toward the per-cell median teacher. Returns the model and the scores.
pub fn fedrad_aggregate_distill(
    state: &GlobalState,
    arch: &[LayerSpec],
    updates: &[ClientUpdate],
    server_x: &Tensor,
    cfg: &DistillConfig,
) -> Result<(ModelParams, FedRadScores)> {
    let models: Vec<&ModelParams> = updates.iter().map(|u| &u.proposed).collect();
    let scores = fedrad_scores(&models, arch, server_x)?;

    // Score-and-sample weighted aggregation around the current model.
    let denom: f64 = updates
        .iter()
        .zip(&scores.raw)
        .map(|(u, s)| u.num_samples as f64 * s)
        .sum();
    let mut base = state.model.clone();
    if denom > 0.0 {
        for (u, s) in updates.iter().zip(&scores.raw) {
            let w = u.num_samples as f64 * s / denom;
            if w == 0.0 {
                continue;
            }
            let mut delta = u.proposed.clone();
            delta.add_scaled(&state.model, -1.0)?;
            base.add_scaled(&delta, w)?;
        }
    } else {
        base = fedavg_aggregate(state, updates, FedAvgDivisor::Participating)?;
    }

    let teacher = median_teacher_logits(&models, arch, server_x)?;
    let model = distill_toward(&base, arch, &teacher, server_x, cfg)?;
    Ok((model, scores))
}

/// FedRAD as an [`Aggregator`].
pub struct FedRad {
    pub cfg: DistillConfig,
}

impl Aggregator for FedRad {
    fn name(&self) -> &'static str {
        "fedrad"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let server = ctx
            .server_data
            .ok_or_else(|| Error::Config("fedrad needs a server dataset".into()))?;
        let (model, scores) =
            fedrad_aggregate_distill(state, ctx.arch, updates, &server.xs, &self.cfg)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert(
            "fedrad_scores".into(),
            scores
                .weights
                .iter()
                .map(|w| format!("{w:.6}"))
                .collect::<Vec<_>>()
                .join(";"),
        );
        diagnostics.insert("fedrad_degenerate".into(), scores.degenerate.to_string());
        Ok(AggregateOutput { model, diagnostics })
    }
}

// ---------------------------------------------------------------------------
// FedMV pruning
// ---------------------------------------------------------------------------

/// FedMV pruning parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FedMvConfig {
    /// Fraction of last-conv filters pruned each round.
    pub prune_fraction: f64,
    /// Erase outliers every this many rounds (0 disables erasure).
    pub erasure_period: usize,
    /// Outlier threshold in global standard deviations.
    pub erasure_zscore: f64,
    /// Prune the filters with the largest averaged ranking (true) or the
    /// smallest (false).
    pub prune_largest: bool,
}

impl Default for FedMvConfig {
    fn default() -> Self {
        FedMvConfig {
            prune_fraction: 0.25,
            erasure_period: 10,
            erasure_zscore: 3.0,
            prune_largest: true,
        }
    }
}

/// Index of the last convolutional layer, if any.
pub fn last_conv_layer(arch: &[LayerSpec]) -> Option<usize> {
    (0..arch.len()).rev().find(|&i| arch[i].is_conv())
}

/// Rank the last conv layer's filters by mean absolute activation on the
/// client's data, ascending (rank 0 = quietest filter, ties by filter index).
pub fn fedmv_rank_filters(
    model: &ModelParams,
    arch: &[LayerSpec],
    data_x: &Tensor,
) -> Result<Vec<usize>> {
    let layer = last_conv_layer(arch).ok_or_else(|| {
        Error::DefenseInapplicable("fedmv pruning needs a convolutional layer".into())
    })?;
    let (_, trace) = forward_with_trace(model, arch, data_x)?;
    let post = &trace.layers[layer].post;
    let filters = post.shape()[1];
    let batch = post.shape()[0];
    let spatial: usize = post.shape()[2..].iter().product();
    let mut mean_act = vec![0.0; filters];
    for b in 0..batch {
        for f in 0..filters {
            let base = (b * filters + f) * spatial;
            for k in 0..spatial {
                mean_act[f] += post.data()[base + k].abs();
            }
        }
    }
    for m in mean_act.iter_mut() {
        *m /= (batch * spatial) as f64;
    }
    // Ascending activation order; position in that order is the rank.
    let mut order: Vec<usize> = (0..filters).collect();
    order.sort_by(|&a, &b| {
        mean_act[a]
            .partial_cmp(&mean_act[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0usize; filters];
    for (rank, &f) in order.iter().enumerate() {
        ranks[f] = rank;
    }
    Ok(ranks)
}

/// FedMV aggregation: FedAvg, prune the filters with the extremal averaged
/// rankings, and periodically zero global outlier weights. Returns the model,
/// the pruned filter indices, and how many weights the erasure zeroed.
pub fn fedmv_aggregate(
    state: &GlobalState,
    arch: &[LayerSpec],
    updates: &[ClientUpdate],
    cfg: &FedMvConfig,
) -> Result<(ModelParams, Vec<usize>, usize)> {
    if !(0.0..1.0).contains(&cfg.prune_fraction) {
        return Err(Error::Config(format!(
            "prune_fraction must be in [0, 1), got {}",
            cfg.prune_fraction
        )));
    }
    let layer = last_conv_layer(arch).ok_or_else(|| {
        Error::DefenseInapplicable("fedmv pruning needs a convolutional layer".into())
    })?;
    let mut model = fedavg_aggregate(state, updates, FedAvgDivisor::Participating)?;

    // Average the clients' filter rankings.
    let filters = match arch[layer].kind {
        LayerKind::Conv2d { out_channels, .. } => out_channels,
        LayerKind::Dense { .. } => unreachable!("last_conv_layer returned a dense layer"),
    };
    let mut avg_rank = vec![0.0; filters];
    let mut rankings = 0usize;
    for u in updates {
        if let Some(ranks) = &u.filter_ranks {
            if ranks.len() != filters {
                return Err(Error::Config("filter ranking length mismatch".into()));
            }
            for (a, &r) in avg_rank.iter_mut().zip(ranks) {
                *a += r as f64;
            }
            rankings += 1;
        }
    }
    if rankings == 0 {
        return Err(Error::Config(
            "fedmv aggregation received no filter rankings".into(),
        ));
    }
    for a in avg_rank.iter_mut() {
        *a /= rankings as f64;
    }

    let prune_count = ((cfg.prune_fraction * filters as f64).round() as usize).min(filters);
    let mut order: Vec<usize> = (0..filters).collect();
    order.sort_by(|&a, &b| {
        let cmp = avg_rank[a]
            .partial_cmp(&avg_rank[b])
            .unwrap_or(std::cmp::Ordering::Equal);
        if cfg.prune_largest {
            cmp.reverse().then(a.cmp(&b))
        } else {
            cmp.then(a.cmp(&b))
        }
    });
    let mut pruned: Vec<usize> = order[..prune_count].to_vec();
    pruned.sort_unstable();

    // Zero the pruned filters' kernels and biases.
    {
        let lp = &mut model.layers[layer];
        let per_filter = lp.weights.len() / filters;
        for &f in &pruned {
            for v in lp.weights.data_mut()[f * per_filter..(f + 1) * per_filter].iter_mut() {
                *v = 0.0;
            }
            lp.biases.data_mut()[f] = 0.0;
        }
    }

    // Outlier erasure on the configured period (rounds are 1-indexed here so
    // the first round never erases).
    let mut erased = 0usize;
    if cfg.erasure_period > 0 && (state.round + 1) % cfg.erasure_period == 0 {
        let flat = crate::nn::flatten(&model);
        let n = flat.len() as f64;
        let mean: f64 = flat.iter().sum::<f64>() / n;
        let var: f64 = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let limit = cfg.erasure_zscore * sd;
        let mut cleaned = flat;
        for v in cleaned.iter_mut() {
            if (*v - mean).abs() > limit {
                *v = 0.0;
                erased += 1;
            }
        }
        model = crate::nn::unflatten(&cleaned, arch)?;
    }
    Ok((model, pruned, erased))
}

/// FedMV as an [`Aggregator`].
pub struct FedMv {
    pub cfg: FedMvConfig,
}

impl Aggregator for FedMv {
    fn name(&self) -> &'static str {
        "fedmv"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let (model, pruned, erased) = fedmv_aggregate(state, ctx.arch, updates, &self.cfg)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert(
            "fedmv_pruned".into(),
            pruned
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        diagnostics.insert("fedmv_erased".into(), erased.to_string());
        Ok(AggregateOutput { model, diagnostics })
    }
}

// ---------------------------------------------------------------------------
// CRFL
// ---------------------------------------------------------------------------

/// CRFL parameters: clip bound, train/test noise, and the vote count.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CrflConfig {
    pub clip_bound: f64,
    pub sigma_train: f64,
    pub sigma_test: f64,
    pub votes: usize,
}

impl Default for CrflConfig {
    fn default() -> Self {
        CrflConfig {
            clip_bound: 10.0,
            sigma_train: 0.01,
            sigma_test: 0.01,
            votes: 5,
        }
    }
}

/// Norm-clip the model to `rho`, then add isotropic Gaussian noise:
/// `Clip_rho(theta) = theta / max(1, ||theta|| / rho)`.
pub fn crfl_clip_noise(
    model: &ModelParams,
    rho: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    if rho <= 0.0 {
        return Err(Error::Config("crfl clip bound must be > 0".into()));
    }
    let mut out = model.clone();
    // Rescale until the norm bound holds exactly; rounding can leave the norm
    // an ulp above rho after one pass. A model already inside the ball is
    // returned untouched, which also makes clipping idempotent.
    loop {
        let norm = out.norm();
        if norm <= rho || norm == 0.0 {
            break;
        }
        let mut scale = rho / norm;
        if scale >= 1.0 {
            scale = 1.0 - f64::EPSILON;
        }
        for layer in out.layers.iter_mut() {
            for v in layer
                .weights
                .data_mut()
                .iter_mut()
                .chain(layer.biases.data_mut().iter_mut())
            {
                *v *= scale;
            }
        }
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for layer in out.layers.iter_mut() {
            for v in layer
                .weights
                .data_mut()
                .iter_mut()
                .chain(layer.biases.data_mut().iter_mut())
            {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(out)
}

/// Majority-vote predictions over `votes` noisy copies of the model.
/// Returns per-sample labels; ties break toward the smaller label index.
pub fn crfl_predict_batch(
    model: &ModelParams,
    arch: &[LayerSpec],
    batch: &Tensor,
    cfg: &CrflConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let (labels, _) = crfl_vote_batch(model, arch, batch, cfg, rng)?;
    Ok(labels)
}

/// As [`crfl_predict_batch`] but also returns the per-sample vote tallies.
pub fn crfl_vote_batch(
    model: &ModelParams,
    arch: &[LayerSpec],
    batch: &Tensor,
    cfg: &CrflConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if cfg.votes == 0 {
        return Err(Error::Config("crfl vote count must be >= 1".into()));
    }
    let samples = batch.shape()[0];
    let mut tallies: Vec<Vec<usize>> = Vec::new();
    for _ in 0..cfg.votes {
        let noisy = if cfg.sigma_test > 0.0 {
            let normal = Normal::new(0.0, cfg.sigma_test).expect("valid sigma");
            let mut m = model.clone();
            for layer in m.layers.iter_mut() {
                for v in layer
                    .weights
                    .data_mut()
                    .iter_mut()
                    .chain(layer.biases.data_mut().iter_mut())
                {
                    *v += normal.sample(rng);
                }
            }
            m
        } else {
            model.clone()
        };
        let preds = predict_batch(&noisy, arch, batch)?;
        if tallies.is_empty() {
            let classes = preds.iter().max().map_or(1, |&m| m + 1);
            tallies = vec![vec![0; classes]; samples];
        }
        for (s, &p) in preds.iter().enumerate() {
            if p >= tallies[s].len() {
                for t in tallies.iter_mut() {
                    t.resize(p + 1, 0);
                }
            }
            tallies[s][p] += 1;
        }
    }
    let labels = tallies
        .iter()
        .map(|t| {
            let mut best = 0;
            for (i, &c) in t.iter().enumerate() {
                if c > t[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok((labels, tallies))
}

/// Single-sample majority vote.
pub fn crfl_predict(
    model: &ModelParams,
    arch: &[LayerSpec],
    x: &Tensor,
    cfg: &CrflConfig,
    rng: &mut impl Rng,
) -> Result<usize> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.reshape(shape)?;
    Ok(crfl_predict_batch(model, arch, &batch, cfg, rng)?[0])
}

/// CRFL as an [`Aggregator`]: FedAvg, then clip and perturb the global model.
pub struct Crfl {
    pub cfg: CrflConfig,
}

impl Aggregator for Crfl {
    fn name(&self) -> &'static str {
        "crfl"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let base = fedavg_aggregate(state, updates, FedAvgDivisor::Participating)?;
        let model = crfl_clip_noise(&base, self.cfg.clip_bound, self.cfg.sigma_train, &mut ctx.rng)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("crfl_norm".into(), format!("{:.6}", model.norm()));
        Ok(AggregateOutput { model, diagnostics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::seeds;

    fn dense_arch() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(4, 6, Activation::Relu),
            LayerSpec::dense(6, 3, Activation::Identity),
        ]
    }

    fn rand_model(arch: &[LayerSpec], seed: u64) -> ModelParams {
        let mut rng = seeds::stream(seed, &[99]);
        ModelParams::init_glorot(arch, &mut rng)
    }

    fn rand_batch(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = seeds::stream(seed, &[98]);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ensemble_of_one_is_identity() {
        let arch = dense_arch();
        let m = rand_model(&arch, 1);
        let x = rand_batch(vec![3, 4], 2);
        let ens = ensemble_logits(&[&m], &arch, &x).unwrap();
        let (direct, _) = forward_with_trace(&m, &arch, &x).unwrap();
        assert_eq!(ens.data(), direct.data());
    }

    #[test]
    fn opposite_logit_models_cancel() {
        let arch = vec![LayerSpec::dense(2, 2, Activation::Identity)];
        let mut a = ModelParams::zeros(&arch);
        a.layers[0].weights.data_mut().copy_from_slice(&[1.0, 2.0, -3.0, 0.5]);
        let mut b = ModelParams::zeros(&arch);
        for (dst, src) in b.layers[0]
            .weights
            .data_mut()
            .iter_mut()
            .zip(a.layers[0].weights.data())
        {
            *dst = -src;
        }
        let x = rand_batch(vec![4, 2], 3);
        let ens = ensemble_logits(&[&a, &b], &arch, &x).unwrap();
        assert!(ens.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ensemble_matches_per_sample_average_oracle() {
        let arch = dense_arch();
        let models: Vec<ModelParams> = (0..4).map(|s| rand_model(&arch, s)).collect();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let x = rand_batch(vec![5, 4], 7);
        let ens = ensemble_logits(&refs, &arch, &x).unwrap();
        for (i, &v) in ens.data().iter().enumerate() {
            let mut acc = 0.0;
            for m in &models {
                let (l, _) = forward_with_trace(m, &arch, &x).unwrap();
                acc += l.data()[i];
            }
            assert!((v - acc / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distillation_fixed_point_when_student_matches_teacher() {
        let arch = dense_arch();
        let m = rand_model(&arch, 11);
        let x = rand_batch(vec![6, 4], 12);
        let cfg = DistillConfig {
            steps: 3,
            lr: 0.5,
            temperature: 1.0,
        };
        // Teacher ensemble = the student itself.
        let out = feddf_distill(&m, &arch, &[&m], &x, &cfg).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn distillation_zero_lr_is_identity() {
        let arch = dense_arch();
        let student = rand_model(&arch, 13);
        let teacher = rand_model(&arch, 14);
        let x = rand_batch(vec![6, 4], 15);
        let cfg = DistillConfig {
            steps: 1,
            lr: 0.0,
            temperature: 1.0,
        };
        let out = feddf_distill(&student, &arch, &[&teacher], &x, &cfg).unwrap();
        assert_eq!(out, student);
    }

    #[test]
    fn distillation_kl_is_non_increasing() {
        let arch = dense_arch();
        let student = rand_model(&arch, 16);
        let teacher = rand_model(&arch, 17);
        let x = rand_batch(vec![8, 4], 18);
        let teacher_logits = ensemble_logits(&[&teacher], &arch, &x).unwrap();
        let mut model = student;
        let mut last = f64::INFINITY;
        for _ in 0..12 {
            let (student_logits, _) = forward_with_trace(&model, &arch, &x).unwrap();
            let kl = crate::nn::kl_divergence(&teacher_logits, &student_logits);
            assert!(kl <= last + 1e-12, "KL rose from {last} to {kl}");
            last = kl;
            let cfg = DistillConfig {
                steps: 1,
                lr: 0.2,
                temperature: 1.0,
            };
            model = distill_toward(&model, &arch, &teacher_logits, &x, &cfg).unwrap();
        }
    }

    #[test]
    fn fedrad_identical_clients_share_weight() {
        let arch = dense_arch();
        let m = rand_model(&arch, 21);
        let x = rand_batch(vec![4, 4], 22);
        let scores = fedrad_scores(&[&m, &m, &m], &arch, &x).unwrap();
        assert!(!scores.degenerate);
        for w in &scores.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fedrad_median_client_takes_all() {
        // One sample, one class; logits {0, 5, 100}: only the middle scores.
        let arch = vec![LayerSpec::dense(1, 1, Activation::Identity)];
        let mk = |w: f64| {
            let mut m = ModelParams::zeros(&arch);
            m.layers[0].weights.data_mut()[0] = w;
            m
        };
        let a = mk(0.0);
        let b = mk(5.0);
        let c = mk(100.0);
        let x = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let scores = fedrad_scores(&[&a, &b, &c], &arch, &x).unwrap();
        assert_eq!(scores.weights, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn fedrad_scores_match_brute_force_count() {
        let arch = dense_arch();
        let models: Vec<ModelParams> = (0..5).map(|s| rand_model(&arch, 30 + s)).collect();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let x = rand_batch(vec![6, 4], 36);
        let scores = fedrad_scores(&refs, &arch, &x).unwrap();

        // Exhaustive oracle over every (sample, class) cell.
        let all_logits: Vec<Tensor> = models
            .iter()
            .map(|m| forward_with_trace(m, &arch, &x).unwrap().0)
            .collect();
        let mut expected = vec![0.0; 5];
        for cell in 0..all_logits[0].len() {
            let mut vals: Vec<f64> = all_logits.iter().map(|l| l.data()[cell]).collect();
            vals.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let med = vals[(vals.len() - 1) / 2];
            for (ci, l) in all_logits.iter().enumerate() {
                if l.data()[cell] == med {
                    expected[ci] += 1.0;
                }
            }
        }
        assert_eq!(scores.raw, expected);
    }

    #[test]
    fn median_teacher_differs_from_mean_on_skewed_logits() {
        let arch = vec![LayerSpec::dense(1, 1, Activation::Identity)];
        let mk = |w: f64| {
            let mut m = ModelParams::zeros(&arch);
            m.layers[0].weights.data_mut()[0] = w;
            m
        };
        let a = mk(0.0);
        let b = mk(1.0);
        let c = mk(100.0);
        let x = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let med = median_teacher_logits(&[&a, &b, &c], &arch, &x).unwrap();
        let mean = ensemble_logits(&[&a, &b, &c], &arch, &x).unwrap();
        assert_eq!(med.data()[0], 1.0);
        assert!((mean.data()[0] - 101.0 / 3.0).abs() < 1e-12);
        assert_ne!(med.data()[0], mean.data()[0]);
    }

    #[test]
    fn crfl_clip_arithmetic() {
        let arch = vec![LayerSpec::dense(2, 1, Activation::Identity)];
        let mut m = ModelParams::zeros(&arch);
        m.layers[0].weights.data_mut().copy_from_slice(&[6.0, 8.0]); // norm 10
        let mut rng = seeds::stream(40, &[1]);
        let clipped = crfl_clip_noise(&m, 5.0, 0.0, &mut rng).unwrap();
        assert_eq!(clipped.layers[0].weights.data(), &[3.0, 4.0]);

        let untouched = crfl_clip_noise(&m, 20.0, 0.0, &mut rng).unwrap();
        assert_eq!(untouched, m);
    }

    #[test]
    fn crfl_clip_is_idempotent_and_bounded() {
        let arch = dense_arch();
        let m = rand_model(&arch, 41);
        let mut rng = seeds::stream(42, &[1]);
        let rho = 0.5;
        let once = crfl_clip_noise(&m, rho, 0.0, &mut rng).unwrap();
        let twice = crfl_clip_noise(&once, rho, 0.0, &mut rng).unwrap();
        assert_eq!(once, twice);
        assert!(once.norm() <= rho + 1e-12);
    }

    #[test]
    fn crfl_noise_has_zero_mean() {
        let mut rng = seeds::stream(43, &[1]);
        let arch = vec![LayerSpec::dense(100, 100, Activation::Identity)];
        let base = ModelParams::zeros(&arch);
        let sigma = 0.3;
        let noisy = crfl_clip_noise(&base, 1.0, sigma, &mut rng).unwrap();
        let n = noisy.layers[0].weights.len() as f64;
        let mean: f64 = noisy.layers[0].weights.data().iter().sum::<f64>() / n;
        let se = sigma / n.sqrt();
        assert!(mean.abs() < 4.0 * se, "noise mean {mean} too far from zero");
    }

    #[test]
    fn crfl_zero_test_noise_equals_plain_argmax() {
        let arch = dense_arch();
        let m = rand_model(&arch, 44);
        let x = rand_batch(vec![7, 4], 45);
        let cfg = CrflConfig {
            clip_bound: 10.0,
            sigma_train: 0.0,
            sigma_test: 0.0,
            votes: 7,
        };
        let mut rng = seeds::stream(46, &[1]);
        let votes = crfl_predict_batch(&m, &arch, &x, &cfg, &mut rng).unwrap();
        let plain = predict_batch(&m, &arch, &x).unwrap();
        assert_eq!(votes, plain);
    }

    #[test]
    fn crfl_vote_tallies_sum_to_m_and_are_reproducible() {
        let arch = dense_arch();
        let m = rand_model(&arch, 47);
        let x = rand_batch(vec![5, 4], 48);
        let cfg = CrflConfig {
            clip_bound: 10.0,
            sigma_train: 0.0,
            sigma_test: 0.5,
            votes: 9,
        };
        let mut r1 = seeds::stream(49, &[1]);
        let (l1, t1) = crfl_vote_batch(&m, &arch, &x, &cfg, &mut r1).unwrap();
        let mut r2 = seeds::stream(49, &[1]);
        let (l2, t2) = crfl_vote_batch(&m, &arch, &x, &cfg, &mut r2).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(t1, t2);
        for t in &t1 {
            assert_eq!(t.iter().sum::<usize>(), 9);
        }
    }
}
