//! Round orchestration: client sampling, benign local training, update
//! collection, the aggregation seam every defense plugs into, and ACC/ASR
//! evaluation.
//!
//! Aggregators never see whether an update came from a malicious client. The
//! ground-truth tag exists for metrics only and every read of it is counted,
//! so tests can assert that no aggregation code path touches it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data::{apply_trigger, Dataset, Trigger};
use crate::error::{Error, Result};
use crate::nn::{
    forward_with_trace, loss_and_grad, predict_batch, sgd_step, LayerSpec, Loss, ModelParams,
};
use crate::seeds::{self, domain};
use crate::tensor::Tensor;

static GROUND_TRUTH_READS: AtomicU64 = AtomicU64::new(0);

/// How many times any ground-truth malicious tag has been read, process-wide.
pub fn ground_truth_read_count() -> u64 {
    GROUND_TRUTH_READS.load(Ordering::SeqCst)
}

/// One client's proposed model for a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Sample count `n_i` used for weighted aggregation.
    pub num_samples: usize,
    pub proposed: ModelParams,
    /// Last-conv filter ranking, attached only when the FedMV defense runs.
    pub filter_ranks: Option<Vec<usize>>,
    malicious: bool,
}

impl ClientUpdate {
    pub fn new(
        client_id: usize,
        num_samples: usize,
        proposed: ModelParams,
        malicious: bool,
    ) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::Config("client update needs num_samples >= 1".into()));
        }
        Ok(ClientUpdate {
            client_id,
            num_samples,
            proposed,
            filter_ranks: None,
            malicious,
        })
    }

    /// Ground-truth attacker tag, for metrics and analysis only. Defenses must
    /// not call this; reads are counted so the blindness contract is testable.
    pub fn malicious_ground_truth(&self) -> bool {
        GROUND_TRUTH_READS.fetch_add(1, Ordering::SeqCst);
        self.malicious
    }
}

/// Per-round orchestration parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundConfig {
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Global model state carried across rounds.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: usize,
    pub model: ModelParams,
    pub prev_model: Option<ModelParams>,
    pub history: Vec<RoundMetrics>,
}

impl GlobalState {
    pub fn new(model: ModelParams) -> Self {
        GlobalState {
            round: 0,
            model,
            prev_model: None,
            history: Vec::new(),
        }
    }
}

/// Core per-round metrics; richer diagnostics travel in the aggregation output.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc: f64,
    pub asr: f64,
    pub malicious_sampled: usize,
}

/// Server-side resources an aggregator may use.
pub struct ServerContext<'a> {
    pub arch: &'a [LayerSpec],
    /// Per-round server randomness (DeepSight probe inputs, CRFL noise).
    pub rng: ChaCha20Rng,
    /// Held-out server dataset for distillation-style defenses.
    pub server_data: Option<&'a Dataset>,
    /// Per-sample input shape `[C, H, W]` of the task the clients train on.
    pub input_shape: Vec<usize>,
}

/// What an aggregation strategy returns: the next global model plus
/// defense-specific diagnostics for the metrics sidecar.
#[derive(Debug)]
pub struct AggregateOutput {
    pub model: ModelParams,
    pub diagnostics: BTreeMap<String, String>,
}

impl AggregateOutput {
    pub fn plain(model: ModelParams) -> Self {
        AggregateOutput {
            model,
            diagnostics: BTreeMap::new(),
        }
    }
}

/// The seam every defense implements. Implementations read only
/// `(client_id, num_samples, proposed)` plus server resources.
pub trait Aggregator {
    fn name(&self) -> &'static str;
    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput>;
}

/// Deterministic minibatch cycler: shuffles once per epoch, hands out
/// consecutive chunks. Both benign and malicious local training use this so
/// the attack-off limit is bit-identical to benign training.
pub(crate) struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchCycler {
    pub(crate) fn new(n: usize, batch_size: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchCycler {
            order,
            pos: 0,
            batch_size: batch_size.max(1),
        }
    }

    pub(crate) fn next(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// Benign local training: `local_steps` SGD steps of plain cross-entropy
/// starting from the current global model. Deterministic per
/// `(seed, round, client_id)`.
pub fn local_train_benign(
    global: &ModelParams,
    arch: &[LayerSpec],
    client_data: &Dataset,
    cfg: &RoundConfig,
    round: usize,
    client_id: usize,
) -> Result<ClientUpdate> {
    if client_data.is_empty() {
        return Err(Error::Config(format!("client {client_id} has no samples")));
    }
    let mut rng = seeds::stream(cfg.seed, &[domain::LOCAL_TRAIN, round as u64, client_id as u64]);
    let mut cycler = BatchCycler::new(client_data.len(), cfg.batch_size, &mut rng);
    let mut model = global.clone();
    for _ in 0..cfg.local_steps {
        let idx = cycler.next(&mut rng);
        let (bx, by) = client_data.gather(&idx);
        let (_, grads) = loss_and_grad(&model, arch, &bx, &by, &Loss::CrossEntropy)?;
        model = sgd_step(&model, &grads, cfg.local_lr)?;
    }
    ClientUpdate::new(client_id, client_data.len(), model, false)
}

/// Which total the sample-weighted FedAvg update is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgDivisor {
    /// Divide by the participating clients' total sample count (standard).
    Participating,
    /// Divide by a fixed global total `N`, which damps updates under partial
    /// participation.
    GlobalTotal(usize),
}

/// Sample-weighted averaging of client updates around the current model:
/// `theta_{t+1} = theta_t + sum n_i (theta_i - theta_t) / D`.
pub fn fedavg_aggregate(
    state: &GlobalState,
    updates: &[ClientUpdate],
    divisor: FedAvgDivisor,
) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    }
    let total: usize = match divisor {
        FedAvgDivisor::Participating => updates.iter().map(|u| u.num_samples).sum(),
        FedAvgDivisor::GlobalTotal(n) => n,
    };
    if total == 0 {
        return Err(Error::Aggregation("zero total sample count".into()));
    }
    let mut next = state.model.clone();
    for u in updates {
        if !state.model.shapes_match(&u.proposed) {
            return Err(Error::ShapeMismatch {
                context: "fedavg update shape",
                expected: vec![state.model.num_params()],
                got: vec![u.proposed.num_params()],
            });
        }
        let w = u.num_samples as f64 / total as f64;
        let mut delta = u.proposed.clone();
        delta.add_scaled(&state.model, -1.0)?;
        next.add_scaled(&delta, w)?;
    }
    Ok(next)
}

/// Plain FedAvg as an [`Aggregator`].
pub struct FedAvg {
    pub divisor: FedAvgDivisor,
}

impl Default for FedAvg {
    fn default() -> Self {
        FedAvg {
            divisor: FedAvgDivisor::Participating,
        }
    }
}

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(
        &mut self,
        state: &GlobalState,
        updates: &[ClientUpdate],
        _ctx: &mut ServerContext<'_>,
    ) -> Result<AggregateOutput> {
        Ok(AggregateOutput::plain(fedavg_aggregate(
            state,
            updates,
            self.divisor,
        )?))
    }
}

/// Sample `m` distinct client ids uniformly, in ascending order.
pub fn sample_clients(num_clients: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..num_clients).collect();
    // Partial Fisher-Yates: the first m slots become the sample.
    for i in 0..m.min(num_clients) {
        let j = rng.gen_range(i..num_clients);
        ids.swap(i, j);
    }
    let mut sampled = ids[..m.min(num_clients)].to_vec();
    sampled.sort_unstable();
    sampled
}

/// Everything a round produced besides the model in `state`.
#[derive(Debug)]
pub struct RoundOutcome {
    pub sampled: Vec<usize>,
    pub malicious_sampled: usize,
    pub diagnostics: BTreeMap<String, String>,
}

/// Run one federated round: sample clients, train locally (benign clients run
/// plain CE training, sampled attackers call `malicious_update`), aggregate,
/// and advance the global state.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    state: &mut GlobalState,
    arch: &[LayerSpec],
    client_datasets: &[Dataset],
    malicious_ids: &[usize],
    aggregator: &mut dyn Aggregator,
    cfg: &RoundConfig,
    server_data: Option<&Dataset>,
    mut attach_ranks: Option<&mut dyn FnMut(&ModelParams, usize) -> Result<Vec<usize>>>,
    mut malicious_update: impl FnMut(usize, &GlobalState, &RoundConfig) -> Result<ClientUpdate>,
) -> Result<RoundOutcome> {
    let round = state.round;
    if cfg.clients_per_round == 0 || cfg.clients_per_round > client_datasets.len() {
        return Err(Error::Config(format!(
            "clients_per_round {} out of range for {} clients",
            cfg.clients_per_round,
            client_datasets.len()
        ))
        .in_round(round));
    }
    let mut sample_rng = seeds::stream(cfg.seed, &[domain::ROUND_SAMPLING, round as u64]);
    let sampled = sample_clients(client_datasets.len(), cfg.clients_per_round, &mut sample_rng);

    let mut updates = Vec::with_capacity(sampled.len());
    let mut malicious_sampled = 0;
    for &cid in &sampled {
        let mut update = if malicious_ids.contains(&cid) {
            malicious_sampled += 1;
            malicious_update(cid, state, cfg).map_err(|e| e.in_round(round))?
        } else {
            local_train_benign(&state.model, arch, &client_datasets[cid], cfg, round, cid)
                .map_err(|e| e.in_round(round))?
        };
        if let Some(ranker) = attach_ranks.as_mut() {
            update.filter_ranks = Some(ranker(&update.proposed, cid).map_err(|e| e.in_round(round))?);
        }
        updates.push(update);
    }

    let mut ctx = ServerContext {
        arch,
        rng: seeds::stream(cfg.seed, &[domain::SERVER, round as u64]),
        server_data,
        input_shape: client_datasets[0].sample_shape(),
    };
    let out = aggregator
        .aggregate(state, &updates, &mut ctx)
        .map_err(|e| e.in_round(round))?;

    state.prev_model = Some(std::mem::replace(&mut state.model, out.model));
    state.round += 1;
    Ok(RoundOutcome {
        sampled,
        malicious_sampled,
        diagnostics: out.diagnostics,
    })
}

/// Clean top-1 accuracy on a test set.
pub fn evaluate_acc(model: &ModelParams, arch: &[LayerSpec], test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let preds = predict_batch(model, arch, &test.xs)?;
    let correct = preds.iter().zip(&test.ys).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Attack success rate: the fraction of triggered non-target-class test
/// samples classified as the trigger's target label.
pub fn evaluate_asr(
    model: &ModelParams,
    arch: &[LayerSpec],
    test: &Dataset,
    trigger: &Trigger,
) -> Result<f64> {
    let victims: Vec<usize> = (0..test.len())
        .filter(|&i| test.ys[i] != trigger.target_label)
        .collect();
    if victims.is_empty() {
        return Err(Error::EmptyAsrDenominator {
            target: trigger.target_label,
        });
    }
    let (batch, _) = test.gather(&victims);
    let triggered = apply_trigger(&batch, trigger)?;
    let preds = predict_batch(model, arch, &triggered)?;
    let hits = preds.iter().filter(|&&p| p == trigger.target_label).count();
    Ok(hits as f64 / victims.len() as f64)
}

/// Mean logits across a test batch, available for diagnostics.
pub fn mean_logits(model: &ModelParams, arch: &[LayerSpec], batch: &Tensor) -> Result<Vec<f64>> {
    let (logits, _) = forward_with_trace(model, arch, batch)?;
    let classes = *logits.shape().last().expect("classifier output");
    let rows = logits.len() / classes;
    let mut mean = vec![0.0; classes];
    for row in logits.data().chunks_exact(classes) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / rows as f64;
        }
    }
    Ok(mean)
}
