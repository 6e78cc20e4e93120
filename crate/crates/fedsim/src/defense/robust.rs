//! Robust-aggregation defenses over flattened updates: Bulyan, Robust LR,
//! and DeepSight's cluster-and-exclude pipeline with its own DBSCAN.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::federation::{
    fedavg_aggregate, AggregateOutput, Aggregator, ClientUpdate, FedAvgDivisor, GlobalState,
    ServerContext,
};
use crate::nn::{flatten, forward_with_trace, softmax_rows, unflatten, LayerSpec, ModelParams};
use crate::tensor::Tensor;

fn update_vector(state: &GlobalState, update: &ClientUpdate) -> Vec<f64> {
    let base = flatten(&state.model);
    flatten(&update.proposed)
        .iter()
        .zip(base.iter())
        .map(|(p, g)| p - g)
        .collect()
}

fn sgn(x: f64) -> i64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

// ---------------------------------------------------------------------------
// Bulyan
// ---------------------------------------------------------------------------

/// Bulyan's server-side assumption on the attacker count. Aggregation
/// requires `n >= 4 * assumed_f + 3` participants.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BulyanConfig {
    pub assumed_f: usize,
}

/// Two-step Bulyan over update vectors `theta_i - theta_t`.
///
/// Step 1 repeatedly moves the update with the smallest sum of Euclidean
/// distances to the remaining received set into the selection set, until
/// `n - 2f` updates are selected. Step 2 takes, per flat coordinate, the
/// member-valued median of the selected set and averages the `n - 4f` values
/// closest to it. Ties anywhere break on the lower client id. Returns the
/// next model plus the selected client ids.
pub fn bulyan_aggregate(
    state: &GlobalState,
    arch: &[LayerSpec],
    updates: &[ClientUpdate],
    cfg: &BulyanConfig,
) -> Result<(ModelParams, Vec<usize>)> {
    let n = updates.len();
    let f = cfg.assumed_f;
    if n < 4 * f + 3 {
        return Err(Error::BulyanBound { n, f });
    }
    let vectors: Vec<Vec<f64>> = updates.iter().map(|u| update_vector(state, u)).collect();
    let ids: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
    let d = vectors[0].len();

    // Pairwise Euclidean distances, fixed for the whole selection phase.
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let e = sq.sqrt();
            dist[i * n + j] = e;
            dist[j * n + i] = e;
        }
    }

    let select_count = n - 2 * f;
    let mut received: Vec<usize> = (0..n).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(select_count);
    while selected.len() < select_count {
        let mut best: Option<(f64, usize, usize)> = None;
        for (pos, &c) in received.iter().enumerate() {
            let sum: f64 = received
                .iter()
                .filter(|&&o| o != c)
                .map(|&o| dist[c * n + o])
                .sum();
            if best.map_or(true, |(bs, bid, _)| (sum, ids[c]) < (bs, bid)) {
                best = Some((sum, ids[c], pos));
            }
        }
        let (_, _, pos) = best.expect("received set non-empty");
        selected.push(received.remove(pos));
    }

    let keep = n - 4 * f;
    let mut aggregate = vec![0.0; d];
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(selected.len());
    for (i, agg) in aggregate.iter_mut().enumerate() {
        column.clear();
        column.extend(selected.iter().map(|&s| (vectors[s][i], ids[s])));
        column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let median = column[(column.len() - 1) / 2].0;
        column.sort_by(|a, b| {
            ((a.0 - median).abs(), a.1)
                .partial_cmp(&((b.0 - median).abs(), b.1))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        *agg = column[..keep].iter().map(|(v, _)| v).sum::<f64>() / keep as f64;
    }

    let mut next_flat = flatten(&state.model);
    for (c, g) in next_flat.iter_mut().zip(aggregate.iter()) {
        *c += g;
    }
    let model = unflatten(&next_flat, arch)?;
    let mut selected_ids: Vec<usize> = selected.iter().map(|&s| ids[s]).collect();
    selected_ids.sort_unstable();
    Ok((model, selected_ids))
}

/// Bulyan as an [`Aggregator`].
pub struct Bulyan {
    pub cfg: BulyanConfig,
}

impl Aggregator for Bulyan {
    fn name(&self) -> &'static str {
        "bulyan"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let (model, selected) = bulyan_aggregate(state, ctx.arch, updates, &self.cfg)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert(
            "bulyan_selected".into(),
            selected
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        Ok(AggregateOutput { model, diagnostics })
    }
}

// ---------------------------------------------------------------------------
// Robust LR
// ---------------------------------------------------------------------------

/// Robust learning rate: a sign-vote threshold `beta` and the server step
/// size `eta` applied per coordinate.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RobustLrConfig {
    pub beta: usize,
    pub eta: f64,
}

/// Fraction of flat coordinates whose sign-vote magnitude falls below `beta`
/// (the coordinates whose learning rate gets reversed). Zero coordinates vote
/// zero.
pub fn reversed_coordinate_fraction(update_vectors: &[Vec<f64>], beta: usize) -> f64 {
    assert!(
        !update_vectors.is_empty(),
        "reversed_coordinate_fraction needs at least one update"
    );
    let d = update_vectors[0].len();
    if d == 0 {
        return 0.0;
    }
    let mut reversed = 0usize;
    for k in 0..d {
        let vote: i64 = update_vectors.iter().map(|v| sgn(v[k])).sum();
        if (vote.unsigned_abs() as usize) < beta {
            reversed += 1;
        }
    }
    reversed as f64 / d as f64
}

/// Robust LR aggregation: the sample-weighted mean update is applied with a
/// per-coordinate learning rate of `+eta` where at least `beta` sign votes
/// agree in magnitude, and `-eta` elsewhere. Returns the next model and the
/// reversed-coordinate fraction.
pub fn robust_lr_aggregate(
    state: &GlobalState,
    arch: &[LayerSpec],
    updates: &[ClientUpdate],
    cfg: &RobustLrConfig,
) -> Result<(ModelParams, f64)> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates".into()));
    }
    if cfg.beta == 0 || cfg.beta > updates.len() {
        return Err(Error::Config(format!(
            "robust lr threshold beta {} must be in 1..={}",
            cfg.beta,
            updates.len()
        )));
    }
    let vectors: Vec<Vec<f64>> = updates.iter().map(|u| update_vector(state, u)).collect();
    let d = vectors[0].len();
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    let mut mean = vec![0.0; d];
    for (vec, u) in vectors.iter().zip(updates.iter()) {
        let w = u.num_samples as f64 / total as f64;
        for (m, v) in mean.iter_mut().zip(vec.iter()) {
            *m += w * v;
        }
    }

    let mut reversed = 0usize;
    let mut next_flat = flatten(&state.model);
    for k in 0..d {
        let vote: i64 = vectors.iter().map(|v| sgn(v[k])).sum();
        let lr = if (vote.unsigned_abs() as usize) >= cfg.beta {
            cfg.eta
        } else {
            reversed += 1;
            -cfg.eta
        };
        next_flat[k] += lr * mean[k];
    }
    let model = unflatten(&next_flat, arch)?;
    Ok((model, reversed as f64 / d as f64))
}

/// Robust LR as an [`Aggregator`].
pub struct RobustLr {
    pub cfg: RobustLrConfig,
}

impl Aggregator for RobustLr {
    fn name(&self) -> &'static str {
        "robust_lr"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let (model, reversed) = robust_lr_aggregate(state, ctx.arch, updates, &self.cfg)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("reversed_fraction".into(), format!("{reversed:.6}"));
        Ok(AggregateOutput { model, diagnostics })
    }
}

// ---------------------------------------------------------------------------
// DBSCAN
// ---------------------------------------------------------------------------

/// Symmetric, zero-diagonal matrix of pairwise distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Build from a symmetric function of index pairs.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        DistanceMatrix { n, data }
    }

    /// Validate and wrap an explicit matrix.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Config("distance matrix size mismatch".into()));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(Error::Config("distance matrix diagonal must be zero".into()));
            }
            for j in 0..n {
                if data[i * n + j] < 0.0 || data[i * n + j] != data[j * n + i] {
                    return Err(Error::Config(
                        "distance matrix must be symmetric and nonnegative".into(),
                    ));
                }
            }
        }
        Ok(DistanceMatrix { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

pub const DBSCAN_NOISE: i64 = -1;

/// Density clustering on a precomputed distance matrix. A point is core when
/// its eps-neighborhood (including itself) holds at least `min_pts` points.
/// Clusters expand from cores in ascending index order; noise is `-1`.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> Vec<i64> {
    let n = dist.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![DBSCAN_NOISE; n];
    let mut visited = vec![false; n];
    let mut cluster: i64 = 0;
    for start in 0..n {
        if visited[start] || !core[start] {
            continue;
        }
        visited[start] = true;
        labels[start] = cluster;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] == DBSCAN_NOISE {
                    labels[q] = cluster;
                }
                if !visited[q] {
                    visited[q] = true;
                    labels[q] = cluster;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        cluster += 1;
    }
    labels
}

// ---------------------------------------------------------------------------
// DeepSight
// ---------------------------------------------------------------------------

/// DeepSight parameters: probe-input count, per-distance DBSCAN radii, the
/// exclusion threshold, and the concentration-flag rule factor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DeepSightConfig {
    /// Number of random probe inputs `d_0`.
    pub num_probe_inputs: usize,
    pub eps_bias: f64,
    pub eps_conv: f64,
    pub eps_prob: f64,
    pub eps_final: f64,
    pub min_pts: usize,
    /// Drop a cluster when its flagged fraction exceeds this threshold.
    pub exclusion_threshold: f64,
    /// Flag a client when its max mean class probability exceeds the cohort
    /// median by this many MADs.
    pub flag_mad_factor: f64,
}

impl Default for DeepSightConfig {
    fn default() -> Self {
        DeepSightConfig {
            num_probe_inputs: 16,
            eps_bias: 0.3,
            eps_conv: 1.0,
            eps_prob: 0.15,
            eps_final: 1.0,
            min_pts: 2,
            exclusion_threshold: 0.34,
            flag_mad_factor: 2.0,
        }
    }
}

/// Per-round DeepSight diagnostics.
#[derive(Debug, Clone)]
pub struct DeepSightReport {
    pub flagged: Vec<bool>,
    pub final_labels: Vec<i64>,
    pub kept_ids: Vec<usize>,
    pub excluded_ids: Vec<usize>,
    /// True when every cluster was excluded and the round fell back to
    /// keeping all updates.
    pub fallback_all: bool,
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values[(values.len() - 1) / 2]
}

fn last_layer_vector(model: &ModelParams) -> Vec<f64> {
    let last = model.layers.last().expect("non-empty model");
    let mut v = last.weights.data().to_vec();
    v.extend_from_slice(last.biases.data());
    v
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The DeepSight filter: flag concentration-suspicious clients, cluster them
/// three ways (last-layer update cosine distance, last-layer weight distance,
/// mean output probability distance), combine the labelings into an agreement
/// distance, cluster once more, and drop clusters whose flagged fraction
/// exceeds the threshold. Returns the kept updates' indices (into a
/// client-id-sorted view, making the kept set permutation invariant).
pub fn deepsight_filter(
    state: &GlobalState,
    updates: &[ClientUpdate],
    ctx: &mut ServerContext<'_>,
    cfg: &DeepSightConfig,
) -> Result<(Vec<usize>, DeepSightReport)> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates".into()));
    }
    // Canonical order: ascending client id, so the kept set cannot depend on
    // the caller's update ordering.
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let n = order.len();

    // Random probe inputs drawn once per round from the server stream.
    let per: usize = ctx.input_shape.iter().product();
    let d0 = cfg.num_probe_inputs.max(1);
    let mut probe = Vec::with_capacity(d0 * per);
    for _ in 0..d0 * per {
        probe.push(ctx.rng.gen_range(0.0..1.0));
    }
    let mut probe_shape = vec![d0];
    probe_shape.extend_from_slice(&ctx.input_shape);
    let probe = Tensor::from_vec(probe_shape, probe)?;

    // Mean softmax output per client over the probe inputs.
    let mut mean_probs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &i in &order {
        let (logits, _) = forward_with_trace(&updates[i].proposed, ctx.arch, &probe)?;
        let probs = softmax_rows(&logits);
        let classes = *logits.shape().last().expect("classifier output");
        let mut mean = vec![0.0; classes];
        for row in probs.data().chunks_exact(classes) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / d0 as f64;
            }
        }
        mean_probs.push(mean);
    }

    // Concentration flags: max mean class probability far above the cohort.
    let peaks: Vec<f64> = mean_probs
        .iter()
        .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let med = median_of(peaks.clone());
    let mad = median_of(peaks.iter().map(|p| (p - med).abs()).collect());
    let flagged: Vec<bool> = peaks
        .iter()
        .map(|&p| p > med + cfg.flag_mad_factor * mad)
        .collect();

    // Three distance matrices over the canonical order.
    let last_updates: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let mut v = last_layer_vector(&updates[i].proposed);
            let base = last_layer_vector(&state.model);
            for (x, b) in v.iter_mut().zip(base.iter()) {
                *x -= b;
            }
            v
        })
        .collect();
    let last_weights: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| last_layer_vector(&updates[i].proposed))
        .collect();

    let d_bias = DistanceMatrix::from_fn(n, |i, j| cosine_distance(&last_updates[i], &last_updates[j]));
    let d_conv = DistanceMatrix::from_fn(n, |i, j| euclidean(&last_weights[i], &last_weights[j]));
    let d_prob = DistanceMatrix::from_fn(n, |i, j| euclidean(&mean_probs[i], &mean_probs[j]));

    let re_bias = dbscan(&d_bias, cfg.eps_bias, cfg.min_pts);
    let re_conv = dbscan(&d_conv, cfg.eps_conv, cfg.min_pts);
    let re_prob = dbscan(&d_prob, cfg.eps_prob, cfg.min_pts);

    // Agreement count converted to a distance: 3 - #labelings that agree.
    let d_final = DistanceMatrix::from_fn(n, |i, j| {
        let agree = [&re_bias, &re_conv, &re_prob]
            .iter()
            .filter(|r| r[i] == r[j])
            .count();
        (3 - agree) as f64
    });
    let final_labels = dbscan(&d_final, cfg.eps_final, cfg.min_pts);

    // Exclude clusters whose flagged fraction exceeds the threshold; noise
    // points stand alone.
    let mut kept: Vec<usize> = Vec::new();
    let mut excluded: Vec<usize> = Vec::new();
    let max_label = final_labels.iter().copied().max().unwrap_or(-1);
    let mut drop_cluster = vec![false; (max_label + 1).max(0) as usize];
    for c in 0..=max_label {
        if c < 0 {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&i| final_labels[i] == c).collect();
        let flags = members.iter().filter(|&&i| flagged[i]).count();
        if flags as f64 / members.len() as f64 > cfg.exclusion_threshold {
            drop_cluster[c as usize] = true;
        }
    }
    for i in 0..n {
        let drop = match final_labels[i] {
            DBSCAN_NOISE => flagged[i],
            c => drop_cluster[c as usize],
        };
        if drop {
            excluded.push(order[i]);
        } else {
            kept.push(order[i]);
        }
    }

    let fallback_all = kept.is_empty();
    if fallback_all {
        kept = order.clone();
        excluded.clear();
    }
    let report = DeepSightReport {
        flagged,
        final_labels,
        kept_ids: kept.iter().map(|&i| updates[i].client_id).collect(),
        excluded_ids: excluded.iter().map(|&i| updates[i].client_id).collect(),
        fallback_all,
    };
    Ok((kept, report))
}

/// DeepSight as an [`Aggregator`]: filter, then FedAvg over the survivors.
pub struct DeepSight {
    pub cfg: DeepSightConfig,
}

impl Aggregator for DeepSight {
    fn name(&self) -> &'static str {
        "deepsight"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        let (kept, report) = deepsight_filter(state, updates, ctx, &self.cfg)?;
        let surviving: Vec<ClientUpdate> = kept.iter().map(|&i| updates[i].clone()).collect();
        let model = fedavg_aggregate(state, &surviving, FedAvgDivisor::Participating)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert(
            "deepsight_labels".into(),
            report
                .final_labels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        diagnostics.insert(
            "deepsight_excluded".into(),
            report
                .excluded_ids
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        );
        diagnostics.insert(
            "deepsight_fallback".into(),
            report.fallback_all.to_string(),
        );
        Ok(AggregateOutput { model, diagnostics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use crate::seeds;

    fn scalar_arch() -> Vec<LayerSpec> {
        vec![LayerSpec::dense(1, 1, Activation::Identity)]
    }

    fn scalar_state(w: f64) -> GlobalState {
        let arch = scalar_arch();
        let mut m = ModelParams::zeros(&arch);
        m.layers[0].weights.data_mut()[0] = w;
        GlobalState::new(m)
    }

    fn scalar_update(id: usize, value: f64) -> ClientUpdate {
        let arch = scalar_arch();
        let mut m = ModelParams::zeros(&arch);
        m.layers[0].weights.data_mut()[0] = value;
        // Bias coordinate stays zero for everyone.
        ClientUpdate::new(id, 1, m, false).unwrap()
    }

    #[test]
    fn bulyan_unanimous_updates_pass_through() {
        let arch = scalar_arch();
        let state = scalar_state(0.0);
        let ups: Vec<ClientUpdate> = (0..7).map(|i| scalar_update(i, 2.5)).collect();
        let cfg = BulyanConfig { assumed_f: 1 };
        let (model, selected) = bulyan_aggregate(&state, &arch, &ups, &cfg).unwrap();
        assert!((model.layers[0].weights.data()[0] - 2.5).abs() < 1e-12);
        assert_eq!(selected.len(), 5);
    }

    #[test]
    fn bulyan_bounds_outlier_influence() {
        let arch = scalar_arch();
        let state = scalar_state(0.0);
        let benign = [-0.9, -0.5, 0.1, 0.3, 0.6, 1.0];
        let mut ups: Vec<ClientUpdate> = benign
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_update(i, v))
            .collect();
        ups.push(scalar_update(6, 1e6));
        let cfg = BulyanConfig { assumed_f: 1 };
        let (model, _) = bulyan_aggregate(&state, &arch, &ups, &cfg).unwrap();
        let out = model.layers[0].weights.data()[0];
        assert!((-1.0..=1.0).contains(&out), "outlier leaked: {out}");
    }

    #[test]
    fn bulyan_rejects_insufficient_clients() {
        let arch = scalar_arch();
        let state = scalar_state(0.0);
        let ups: Vec<ClientUpdate> = (0..6).map(|i| scalar_update(i, 1.0)).collect();
        let cfg = BulyanConfig { assumed_f: 1 };
        match bulyan_aggregate(&state, &arch, &ups, &cfg) {
            Err(Error::BulyanBound { n: 6, f: 1 }) => {}
            other => panic!("expected BulyanBound, got {other:?}"),
        }
    }

    #[test]
    fn bulyan_is_permutation_invariant() {
        let arch = scalar_arch();
        let state = scalar_state(0.5);
        let values = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 100.0];
        let ups: Vec<ClientUpdate> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_update(i, v))
            .collect();
        let cfg = BulyanConfig { assumed_f: 1 };
        let (a, sel_a) = bulyan_aggregate(&state, &arch, &ups, &cfg).unwrap();
        let mut shuffled = ups;
        shuffled.reverse();
        shuffled.swap(0, 3);
        let (b, sel_b) = bulyan_aggregate(&state, &arch, &shuffled, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sel_a, sel_b);
    }

    #[test]
    fn robust_lr_vote_rules() {
        let arch = scalar_arch();
        let state = scalar_state(0.0);
        let cfg = RobustLrConfig { beta: 4, eta: 1.0 };

        // Five positive updates of 1: consensus, +eta applied to mean 1.
        let ups: Vec<ClientUpdate> = (0..5).map(|i| scalar_update(i, 1.0)).collect();
        let (model, reversed) = robust_lr_aggregate(&state, &arch, &ups, &cfg).unwrap();
        assert!((model.layers[0].weights.data()[0] - 1.0).abs() < 1e-12);
        // The weight coordinate has consensus; the bias coordinate is all
        // zeros, votes 0, and counts as reversed.
        assert!((reversed - 0.5).abs() < 1e-12);

        // Signs (+,+,+,-,-): |sum| = 1 < 4, learning rate flips.
        let vals = [1.0, 2.0, 3.0, -1.0, -2.0];
        let ups: Vec<ClientUpdate> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_update(i, v))
            .collect();
        let (model, _) = robust_lr_aggregate(&state, &arch, &ups, &cfg).unwrap();
        let mean = vals.iter().sum::<f64>() / 5.0;
        assert!((model.layers[0].weights.data()[0] - (-mean)).abs() < 1e-12);
    }

    #[test]
    fn robust_lr_zero_votes_are_neutral() {
        let arch = scalar_arch();
        let state = scalar_state(0.0);
        let cfg = RobustLrConfig { beta: 2, eta: 1.0 };
        // Signs (+,+,0,0,0): |sum| = 2 >= beta, so +eta.
        let vals = [1.0, 3.0, 0.0, 0.0, 0.0];
        let ups: Vec<ClientUpdate> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_update(i, v))
            .collect();
        let (model, _) = robust_lr_aggregate(&state, &arch, &ups, &cfg).unwrap();
        let mean = vals.iter().sum::<f64>() / 5.0;
        assert!((model.layers[0].weights.data()[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn reversed_fraction_edges() {
        // Unanimous signs: never reversed for beta <= n.
        let vectors: Vec<Vec<f64>> = (0..4).map(|_| vec![1.0, -2.0, 3.0]).collect();
        assert_eq!(reversed_coordinate_fraction(&vectors, 4), 0.0);
        // Perfectly split signs: always reversed for beta >= 1.
        let vectors = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
        assert_eq!(reversed_coordinate_fraction(&vectors, 1), 1.0);
    }

    #[test]
    fn reversed_fraction_matches_counting_oracle() {
        let mut rng = seeds::stream(5, &[1]);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let d = rng.gen_range(1..40);
            let vectors: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| [-1.0, 0.0, 1.0][rng.gen_range(0..3)])
                        .collect()
                })
                .collect();
            let beta = rng.gen_range(1..=n);
            let got = reversed_coordinate_fraction(&vectors, beta);
            let mut count = 0usize;
            for k in 0..d {
                let s: i64 = vectors.iter().map(|v| sgn(v[k])).sum();
                if (s.abs() as usize) < beta {
                    count += 1;
                }
            }
            assert_eq!(got, count as f64 / d as f64);
        }
    }

    #[test]
    fn dbscan_all_far_points_are_noise() {
        let dist = DistanceMatrix::from_fn(4, |i, j| 10.0 + (i + j) as f64);
        let labels = dbscan(&dist, 1.0, 2);
        assert!(labels.iter().all(|&l| l == DBSCAN_NOISE));
    }

    #[test]
    fn dbscan_min_pts_one_marks_everything_core() {
        let dist = DistanceMatrix::from_fn(3, |_, _| 100.0);
        let labels = dbscan(&dist, 1.0, 1);
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn dbscan_two_tight_groups() {
        // Points 0-2 mutually close, 3-5 mutually close, groups far apart.
        let dist = DistanceMatrix::from_fn(6, |i, j| {
            let gi = i / 3;
            let gj = j / 3;
            if gi == gj {
                0.5
            } else {
                50.0
            }
        });
        let labels = dbscan(&dist, 1.0, 2);
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn distance_matrix_validation() {
        assert!(DistanceMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).is_ok());
        assert!(DistanceMatrix::new(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::new(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
    }

    // DeepSight fixtures: a dense 4->2 classifier where "benign" models have
    // flat outputs and "suspect" models slam one class.
    fn ds_arch() -> Vec<LayerSpec> {
        vec![LayerSpec::dense(4, 2, Activation::Identity)]
    }

    fn ds_ctx<'a>(arch: &'a [LayerSpec]) -> ServerContext<'a> {
        ServerContext {
            arch,
            rng: seeds::stream(77, &[1]),
            server_data: None,
            input_shape: vec![1, 2, 2],
        }
    }

    fn flat_output_update(id: usize) -> ClientUpdate {
        let arch = ds_arch();
        let mut m = ModelParams::zeros(&arch);
        for v in m.layers[0].weights.data_mut() {
            *v = 0.1;
        }
        ClientUpdate::new(id, 1, m, false).unwrap()
    }

    fn concentrated_update(id: usize) -> ClientUpdate {
        let arch = ds_arch();
        let mut m = ModelParams::zeros(&arch);
        m.layers[0].biases.data_mut()[0] = 10.0;
        ClientUpdate::new(id, 1, m, true).unwrap()
    }

    #[test]
    fn deepsight_keeps_identical_benign_models() {
        let arch = ds_arch();
        let state = GlobalState::new(ModelParams::zeros(&arch));
        let ups: Vec<ClientUpdate> = (0..5).map(flat_output_update).collect();
        let mut ctx = ds_ctx(&arch);
        let cfg = DeepSightConfig::default();
        let (kept, report) = deepsight_filter(&state, &ups, &mut ctx, &cfg).unwrap();
        assert_eq!(kept.len(), 5);
        assert!(!report.fallback_all);
        assert!(report.flagged.iter().all(|&f| !f));
    }

    #[test]
    fn deepsight_drops_flagged_cluster() {
        // Two well-separated groups in every distance; the concentrated group
        // is fully flagged and must be excluded.
        let arch = ds_arch();
        let state = GlobalState::new(ModelParams::zeros(&arch));
        let mut ups: Vec<ClientUpdate> = (0..3).map(flat_output_update).collect();
        ups.extend((3..6).map(concentrated_update));
        let mut ctx = ds_ctx(&arch);
        let cfg = DeepSightConfig::default();
        let (kept, report) = deepsight_filter(&state, &ups, &mut ctx, &cfg).unwrap();
        let kept_ids: Vec<usize> = kept.iter().map(|&i| ups[i].client_id).collect();
        assert_eq!(kept_ids, vec![0, 1, 2]);
        assert_eq!(report.excluded_ids, vec![3, 4, 5]);
    }

    #[test]
    fn deepsight_single_client_is_kept() {
        let arch = ds_arch();
        let state = GlobalState::new(ModelParams::zeros(&arch));
        let ups = vec![concentrated_update(0)];
        let mut ctx = ds_ctx(&arch);
        let cfg = DeepSightConfig::default();
        let (kept, _) = deepsight_filter(&state, &ups, &mut ctx, &cfg).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn deepsight_kept_set_is_permutation_invariant() {
        let arch = ds_arch();
        let state = GlobalState::new(ModelParams::zeros(&arch));
        let mut ups: Vec<ClientUpdate> = (0..3).map(flat_output_update).collect();
        ups.extend((3..6).map(concentrated_update));
        let cfg = DeepSightConfig::default();

        let mut ctx = ds_ctx(&arch);
        let (kept_a, _) = deepsight_filter(&state, &ups, &mut ctx, &cfg).unwrap();
        let ids_a: std::collections::BTreeSet<usize> =
            kept_a.iter().map(|&i| ups[i].client_id).collect();

        let mut shuffled = ups.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        let mut ctx = ds_ctx(&arch);
        let (kept_b, _) = deepsight_filter(&state, &shuffled, &mut ctx, &cfg).unwrap();
        let ids_b: std::collections::BTreeSet<usize> =
            kept_b.iter().map(|&i| shuffled[i].client_id).collect();
        assert_eq!(ids_a, ids_b);
    }
}
