//! Experiment orchestration: seeded end-to-end runs, metrics CSV persistence,
//! the ablation suite, and parameter sweeps.
//!
//! A run is fully described by one [`ExperimentConfig`]; the same config (and
//! seed) always produces byte-identical metrics output. The CSV begins with a
//! `# config:` echo line holding the full JSON config, followed by a stable
//! column header that depends only on the chosen defense.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{baseline_rescale_update, f3ba_update, AttackConfig};
use crate::checkpoint;
use crate::data::{
    dirichlet_partition, gen_blobs_dataset, Dataset, Trigger, TriggerPlacement,
};
use crate::defense::refine::{
    crfl_predict_batch, crfl_vote_batch, fedmv_rank_filters, Crfl, CrflConfig, DistillConfig,
    FedDf, FedMv, FedMvConfig, FedRad,
};
use crate::defense::robust::{
    reversed_coordinate_fraction as reversed_fraction_vectors, Bulyan, BulyanConfig, DeepSight,
    DeepSightConfig, RobustLr, RobustLrConfig,
};
use crate::error::{Error, Result};
use crate::federation::{
    evaluate_acc, evaluate_asr, run_round, Aggregator, ClientUpdate, FedAvg, FedAvgDivisor,
    GlobalState, RoundConfig,
};
use crate::nn::{flatten, Activation, LayerSpec, ModelParams};
use crate::seeds::{self, domain};

/// Synthetic dataset geometry and splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Held-out server split used by distillation defenses.
    pub server_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sd: f64,
}

impl DatasetConfig {
    pub fn img_dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Network template instantiated against the dataset dims.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    /// One conv layer plus two dense layers, ReLU hidden, linear output.
    Cnn {
        conv_filters: usize,
        kernel: usize,
        hidden: usize,
    },
    /// Dense-only network, ReLU hidden, linear output.
    Mlp { hidden: Vec<usize> },
}

impl ModelArch {
    pub fn build(&self, ds: &DatasetConfig) -> Result<Vec<LayerSpec>> {
        let inputs = ds.channels * ds.height * ds.width;
        match self {
            ModelArch::Cnn {
                conv_filters,
                kernel,
                hidden,
            } => {
                if *kernel == 0 || *kernel > ds.height.min(ds.width) {
                    return Err(Error::Config(format!(
                        "conv kernel {kernel} does not fit {}x{} images",
                        ds.height, ds.width
                    )));
                }
                let oh = ds.height - kernel + 1;
                let ow = ds.width - kernel + 1;
                Ok(vec![
                    LayerSpec::conv2d(ds.channels, *conv_filters, *kernel, *kernel, Activation::Relu),
                    LayerSpec::dense(conv_filters * oh * ow, *hidden, Activation::Relu),
                    LayerSpec::dense(*hidden, ds.num_classes, Activation::Identity),
                ])
            }
            ModelArch::Mlp { hidden } => {
                let mut arch = Vec::new();
                let mut prev = inputs;
                for &h in hidden {
                    arch.push(LayerSpec::dense(prev, h, Activation::Relu));
                    prev = h;
                }
                arch.push(LayerSpec::dense(prev, ds.num_classes, Activation::Identity));
                Ok(arch)
            }
        }
    }
}

/// Trigger geometry; the pattern starts all-ones and may be optimized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerSetup {
    pub patch_h: usize,
    pub patch_w: usize,
    pub placement: TriggerPlacement,
    pub target_label: usize,
}

impl TriggerSetup {
    pub fn build(&self, ds: &DatasetConfig) -> Result<Trigger> {
        Trigger::solid(
            ds.channels,
            self.patch_h,
            self.patch_w,
            ds.height,
            ds.width,
            self.placement,
            self.target_label,
        )
    }
}

/// Which attack the malicious clients run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    /// Focused flip with a fixed trigger (no trigger optimization).
    F3ba,
    /// Focused flip with trigger optimization.
    F3baTrigopt,
    /// Composite-loss training followed by gamma rescaling.
    BaselineRescale,
}

/// Defense selection with per-defense parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    Fedavg {
        /// Optional literal global divisor `N`; default divides by the
        /// participating total.
        #[serde(default)]
        global_divisor: Option<usize>,
    },
    Feddf(DistillConfig),
    Fedrad(DistillConfig),
    Fedmv(FedMvConfig),
    Bulyan(BulyanConfig),
    RobustLr(RobustLrConfig),
    Deepsight(DeepSightConfig),
    Crfl(CrflConfig),
}

impl DefenseConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DefenseConfig::Fedavg { .. } => "fedavg",
            DefenseConfig::Feddf(_) => "feddf",
            DefenseConfig::Fedrad(_) => "fedrad",
            DefenseConfig::Fedmv(_) => "fedmv",
            DefenseConfig::Bulyan(_) => "bulyan",
            DefenseConfig::RobustLr(_) => "robust_lr",
            DefenseConfig::Deepsight(_) => "deepsight",
            DefenseConfig::Crfl(_) => "crfl",
        }
    }

    fn build(&self) -> Box<dyn Aggregator> {
        match self {
            DefenseConfig::Fedavg { global_divisor } => Box::new(FedAvg {
                divisor: match global_divisor {
                    Some(n) => FedAvgDivisor::GlobalTotal(*n),
                    None => FedAvgDivisor::Participating,
                },
            }),
            DefenseConfig::Feddf(cfg) => Box::new(FedDf { cfg: *cfg }),
            DefenseConfig::Fedrad(cfg) => Box::new(FedRad { cfg: *cfg }),
            DefenseConfig::Fedmv(cfg) => Box::new(FedMv { cfg: *cfg }),
            DefenseConfig::Bulyan(cfg) => Box::new(Bulyan { cfg: *cfg }),
            DefenseConfig::RobustLr(cfg) => Box::new(RobustLr { cfg: *cfg }),
            DefenseConfig::Deepsight(cfg) => Box::new(DeepSight { cfg: cfg.clone() }),
            DefenseConfig::Crfl(cfg) => Box::new(Crfl { cfg: *cfg }),
        }
    }

    /// Diagnostics columns this defense contributes to the CSV schema.
    fn diagnostic_columns(&self) -> &'static [&'static str] {
        match self {
            DefenseConfig::Fedavg { .. } | DefenseConfig::Feddf(_) => &[],
            DefenseConfig::Fedrad(_) => &["fedrad_scores", "fedrad_degenerate"],
            DefenseConfig::Fedmv(_) => &["fedmv_pruned", "fedmv_erased"],
            DefenseConfig::Bulyan(_) => &["bulyan_selected"],
            DefenseConfig::RobustLr(_) => &["reversed_fraction"],
            DefenseConfig::Deepsight(_) => {
                &["deepsight_labels", "deepsight_excluded", "deepsight_fallback"]
            }
            DefenseConfig::Crfl(_) => &["crfl_norm", "crfl_vote_agreement"],
        }
    }
}

/// Full seeded description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelArch,
    pub num_clients: usize,
    pub num_malicious: usize,
    pub clients_per_round: usize,
    /// Dirichlet concentration; larger is more i.i.d.
    pub dirichlet_h: f64,
    pub rounds: usize,
    pub local_lr: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub attack: AttackKind,
    pub attack_config: AttackConfig,
    pub trigger: TriggerSetup,
    pub defense: DefenseConfig,
    /// Rounds at which suite summaries sample the metrics.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
}

fn default_checkpoints() -> Vec<usize> {
    vec![10, 25, 50]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if self.num_malicious > self.num_clients {
            return Err(Error::Config(format!(
                "num_malicious {} exceeds num_clients {}",
                self.num_malicious, self.num_clients
            )));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::Config(format!(
                "clients_per_round {} out of 1..={}",
                self.clients_per_round, self.num_clients
            )));
        }
        if self.dirichlet_h <= 0.0 {
            return Err(Error::Config("dirichlet_h must be > 0".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.trigger.target_label >= self.dataset.num_classes {
            return Err(Error::Config("trigger target label out of range".into()));
        }
        if self.trigger.patch_h > self.dataset.height || self.trigger.patch_w > self.dataset.width
        {
            return Err(Error::Config("trigger patch exceeds image".into()));
        }
        self.attack_config.validate()?;
        self.model.build(&self.dataset)?;
        Ok(())
    }

    fn round_config(&self) -> RoundConfig {
        RoundConfig {
            clients_per_round: self.clients_per_round,
            local_steps: self.local_steps,
            local_lr: self.local_lr,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

/// The stock desk-scale scenario: 20 clients with 4 malicious, h = 1.0,
/// 10 clients sampled per round, 50 rounds of FedAvg under the full attack.
/// Suites and the CLI's example config both start from here.
pub fn desk_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        dataset: DatasetConfig {
            num_classes: 4,
            train_per_class: 200,
            test_per_class: 40,
            server_per_class: 15,
            channels: 1,
            height: 8,
            width: 8,
            noise_sd: 0.5,
        },
        model: ModelArch::Cnn {
            conv_filters: 4,
            kernel: 3,
            hidden: 24,
        },
        num_clients: 20,
        num_malicious: 4,
        clients_per_round: 10,
        dirichlet_h: 1.0,
        rounds: 50,
        local_lr: 0.08,
        local_steps: 8,
        batch_size: 16,
        attack: AttackKind::F3baTrigopt,
        attack_config: AttackConfig {
            criterion: crate::attack::ImportanceCriterion::Directional,
            s_conv: 0.35,
            s_dense: 0.03,
            lambda: 2.0,
            alpha: 0.0001,
            trig_opt_iters: 10,
            trig_lr: 0.1,
            val_batch: 16,
            flip_enabled: true,
            local_steps: None,
            rescale_gamma: 10.0,
        },
        trigger: TriggerSetup {
            patch_h: 3,
            patch_w: 3,
            placement: TriggerPlacement::BottomRight,
            target_label: 0,
        },
        defense: DefenseConfig::Fedavg {
            global_divisor: None,
        },
        checkpoints: vec![10, 25, 50],
    }
}

/// One metrics row; diagnostics hold the defense-specific extras.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub round: usize,
    pub acc: f64,
    pub asr: f64,
    pub aggregator: String,
    pub malicious_sampled: usize,
    pub diagnostics: BTreeMap<String, String>,
}

/// Everything a finished run returns.
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub csv: String,
    pub final_model: ModelParams,
    pub arch: Vec<LayerSpec>,
    pub final_acc: f64,
    pub final_asr: f64,
}

struct AttackerState {
    last_seen_global: Option<ModelParams>,
    trigger: Trigger,
}

fn csv_header(cfg: &ExperimentConfig) -> String {
    let mut cols = vec![
        "round".to_string(),
        "acc".to_string(),
        "asr".to_string(),
        "aggregator".to_string(),
        "malicious_sampled".to_string(),
    ];
    cols.extend(cfg.defense.diagnostic_columns().iter().map(|s| s.to_string()));
    cols.join(",")
}

fn csv_row(cfg: &ExperimentConfig, row: &MetricsRow) -> String {
    let mut fields = vec![
        row.round.to_string(),
        row.acc.to_string(),
        row.asr.to_string(),
        row.aggregator.clone(),
        row.malicious_sampled.to_string(),
    ];
    for col in cfg.defense.diagnostic_columns() {
        fields.push(row.diagnostics.get(*col).cloned().unwrap_or_default());
    }
    fields.join(",")
}

/// Run one experiment end to end, optionally persisting the metrics CSV,
/// per-round attacker triggers, the final checkpoint, and a JSON summary
/// under `out_dir`. The CSV is written incrementally so aborted runs keep
/// their partial history.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let arch = cfg.model.build(&cfg.dataset)?;
    let ds = &cfg.dataset;

    let train = gen_blobs_dataset(
        ds.num_classes,
        ds.train_per_class,
        ds.img_dims(),
        ds.noise_sd,
        cfg.seed,
        0,
    );
    let test = gen_blobs_dataset(
        ds.num_classes,
        ds.test_per_class,
        ds.img_dims(),
        ds.noise_sd,
        cfg.seed,
        1,
    );
    let server = if ds.server_per_class > 0 {
        Some(gen_blobs_dataset(
            ds.num_classes,
            ds.server_per_class,
            ds.img_dims(),
            ds.noise_sd,
            cfg.seed,
            2,
        ))
    } else {
        None
    };

    let partition = dirichlet_partition(&train, cfg.num_clients, cfg.dirichlet_h, cfg.seed)?;
    let client_datasets: Vec<Dataset> = partition
        .assignments
        .iter()
        .map(|idx| {
            let (xs, ys) = train.gather(idx);
            Dataset {
                xs,
                ys,
                num_classes: ds.num_classes,
            }
        })
        .collect();

    let malicious_ids: Vec<usize> = if cfg.attack == AttackKind::None {
        Vec::new()
    } else {
        (0..cfg.num_malicious).collect()
    };
    let base_trigger = cfg.trigger.build(ds)?;
    let mut attackers: BTreeMap<usize, AttackerState> = malicious_ids
        .iter()
        .map(|&id| {
            (
                id,
                AttackerState {
                    last_seen_global: None,
                    trigger: base_trigger.clone(),
                },
            )
        })
        .collect();

    let mut init_rng = seeds::stream(cfg.seed, &[domain::MODEL_INIT]);
    let mut state = GlobalState::new(ModelParams::init_glorot(&arch, &mut init_rng));
    let mut aggregator = cfg.defense.build();
    let round_cfg = cfg.round_config();

    // Output plumbing.
    let mut csv = String::new();
    let config_echo = serde_json::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    csv.push_str("# config: ");
    csv.push_str(&config_echo);
    csv.push('\n');
    csv.push_str(&csv_header(cfg));
    csv.push('\n');
    let mut csv_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
            f.write_all(csv.as_bytes())?;
            Some(f)
        }
        None => None,
    };

    let mut rows = Vec::with_capacity(cfg.rounds);
    let is_crfl = matches!(cfg.defense, DefenseConfig::Crfl(_));
    let is_fedmv = matches!(cfg.defense, DefenseConfig::Fedmv(_));

    for _ in 0..cfg.rounds {
        let round = state.round;
        let mut new_triggers: Vec<(usize, Trigger)> = Vec::new();

        let outcome = {
            let attackers_ref = &mut attackers;
            let new_triggers_ref = &mut new_triggers;
            let arch_ref = &arch;
            let cds = &client_datasets;
            let acfg = &cfg.attack_config;
            let attack = cfg.attack;
            let rcfg = &round_cfg;

            let mut ranker = |model: &ModelParams, cid: usize| -> Result<Vec<usize>> {
                fedmv_rank_filters(model, arch_ref, &cds[cid].xs)
            };
            run_round(
                &mut state,
                &arch,
                &client_datasets,
                &malicious_ids,
                aggregator.as_mut(),
                &round_cfg,
                server.as_ref(),
                if is_fedmv { Some(&mut ranker) } else { None },
                |cid, st, _| -> Result<ClientUpdate> {
                    let attacker = attackers_ref
                        .get_mut(&cid)
                        .expect("malicious id has attacker state");
                    let update = match attack {
                        AttackKind::None => unreachable!("no malicious ids when attack is none"),
                        AttackKind::BaselineRescale => baseline_rescale_update(
                            &st.model,
                            arch_ref,
                            &cds[cid],
                            &attacker.trigger,
                            acfg,
                            rcfg,
                            st.round,
                            cid,
                        )?,
                        AttackKind::F3ba | AttackKind::F3baTrigopt => {
                            let mut cfg_round = acfg.clone();
                            if attack == AttackKind::F3ba {
                                cfg_round.trig_opt_iters = 0;
                            }
                            let (update, trig) = f3ba_update(
                                &st.model,
                                attacker.last_seen_global.as_ref(),
                                arch_ref,
                                &cds[cid],
                                &attacker.trigger,
                                &cfg_round,
                                rcfg,
                                st.round,
                                cid,
                            )?;
                            attacker.trigger = trig.clone();
                            new_triggers_ref.push((cid, trig));
                            update
                        }
                    };
                    attacker.last_seen_global = Some(st.model.clone());
                    Ok(update)
                },
            )?
        };

        // The trigger ASR is evaluated with: the average of the attackers'
        // current (possibly optimized) patterns for the flip attacks, the
        // fixed pattern otherwise.
        let eval_trigger = match cfg.attack {
            AttackKind::F3ba | AttackKind::F3baTrigopt => {
                let trigs: Vec<&Trigger> = attackers.values().map(|a| &a.trigger).collect();
                Trigger::average_patterns(&trigs).unwrap_or_else(|| base_trigger.clone())
            }
            _ => base_trigger.clone(),
        };

        let mut diagnostics = outcome.diagnostics;
        let (acc, asr) = if is_crfl {
            let crfl_cfg = match &cfg.defense {
                DefenseConfig::Crfl(c) => *c,
                _ => unreachable!(),
            };
            let mut eval_rng = seeds::stream(cfg.seed, &[domain::EVAL, round as u64]);
            let (labels, tallies) =
                crfl_vote_batch(&state.model, &arch, &test.xs, &crfl_cfg, &mut eval_rng)?;
            let correct = labels.iter().zip(&test.ys).filter(|(p, y)| p == y).count();
            let acc = correct as f64 / test.len() as f64;
            let agreement: f64 = tallies
                .iter()
                .map(|t| *t.iter().max().expect("non-empty tally") as f64 / crfl_cfg.votes as f64)
                .sum::<f64>()
                / tallies.len() as f64;
            diagnostics.insert("crfl_vote_agreement".into(), agreement.to_string());

            let victims: Vec<usize> = (0..test.len())
                .filter(|&i| test.ys[i] != eval_trigger.target_label)
                .collect();
            if victims.is_empty() {
                return Err(Error::EmptyAsrDenominator {
                    target: eval_trigger.target_label,
                });
            }
            let (vx, _) = test.gather(&victims);
            let triggered = crate::data::apply_trigger(&vx, &eval_trigger)?;
            let preds = crfl_predict_batch(&state.model, &arch, &triggered, &crfl_cfg, &mut eval_rng)?;
            let hits = preds
                .iter()
                .filter(|&&p| p == eval_trigger.target_label)
                .count();
            (acc, hits as f64 / victims.len() as f64)
        } else {
            (
                evaluate_acc(&state.model, &arch, &test)?,
                evaluate_asr(&state.model, &arch, &test, &eval_trigger)?,
            )
        };

        let row = MetricsRow {
            round,
            acc,
            asr,
            aggregator: aggregator.name().to_string(),
            malicious_sampled: outcome.malicious_sampled,
            diagnostics,
        };
        state.history.push(crate::federation::RoundMetrics {
            round,
            acc,
            asr,
            malicious_sampled: outcome.malicious_sampled,
        });
        let line = csv_row(cfg, &row);
        csv.push_str(&line);
        csv.push('\n');
        if let Some(f) = csv_file.as_mut() {
            f.write_all(line.as_bytes())?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        rows.push(row);

        if let Some(dir) = out_dir {
            if !new_triggers.is_empty() {
                let tdir = dir.join("triggers");
                std::fs::create_dir_all(&tdir)?;
                for (cid, trig) in &new_triggers {
                    save_trigger(&tdir.join(format!("round_{round:04}_client_{cid}.fsim")), trig)?;
                }
            }
        }
    }

    let final_acc = rows.last().map_or(0.0, |r| r.acc);
    let final_asr = rows.last().map_or(0.0, |r| r.asr);

    if let Some(dir) = out_dir {
        checkpoint::save_model(&dir.join("final_model.fsim"), &arch, &state.model)?;
        let summary = serde_json::json!({
            "rounds": cfg.rounds,
            "final_acc": final_acc,
            "final_asr": final_asr,
            "aggregator": cfg.defense.kind_name(),
            "attack": cfg.attack,
        });
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?,
        )?;
    }

    Ok(ExperimentResult {
        rows,
        csv,
        final_model: state.model,
        arch,
        final_acc,
        final_asr,
    })
}

fn save_trigger(path: &Path, trig: &Trigger) -> Result<()> {
    let mut data = trig.pattern.data().to_vec();
    data.extend_from_slice(trig.mask.data());
    let mut meta = BTreeMap::new();
    meta.insert(
        "target_label".to_string(),
        serde_json::Value::from(trig.target_label),
    );
    let header = checkpoint::Header {
        kind: "trigger".into(),
        len: data.len(),
        shapes: vec![trig.pattern.shape().to_vec(), trig.mask.shape().to_vec()],
        order: "pattern row-major, then mask row-major".into(),
        layer_specs: vec![],
        meta,
    };
    let file = std::fs::File::create(path)?;
    checkpoint::write_blob(std::io::BufWriter::new(file), &header, &data)
}

/// Load a trigger persisted by a run.
pub fn load_trigger(path: &Path) -> Result<Trigger> {
    let file = std::fs::File::open(path)?;
    let (header, data) = checkpoint::read_blob(std::io::BufReader::new(file))?;
    if header.kind != "trigger" || header.shapes.len() != 2 {
        return Err(Error::Checkpoint("not a trigger blob".into()));
    }
    let plen: usize = header.shapes[0].iter().product();
    let pattern = crate::tensor::Tensor::from_vec(header.shapes[0].clone(), data[..plen].to_vec())?;
    let mask = crate::tensor::Tensor::from_vec(header.shapes[1].clone(), data[plen..].to_vec())?;
    let target_label = header
        .meta
        .get("target_label")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("trigger blob missing target label".into()))? as usize;
    Ok(Trigger {
        pattern,
        mask,
        target_label,
    })
}

/// Fraction of flat coordinates whose sign votes fall below `beta`, computed
/// from client updates against the current global model.
pub fn reversed_coordinate_fraction(
    state: &GlobalState,
    updates: &[ClientUpdate],
    beta: usize,
) -> f64 {
    let base = flatten(&state.model);
    let vectors: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| {
            flatten(&u.proposed)
                .iter()
                .zip(base.iter())
                .map(|(p, g)| p - g)
                .collect()
        })
        .collect();
    reversed_fraction_vectors(&vectors, beta)
}

/// The three ablation arms: training only, training plus flips, and the full
/// attack with trigger optimization.
pub const ABLATION_ARMS: [&str; 3] = ["train", "train_flip", "train_flip_trigopt"];

/// ASR table produced by [`ablation_suite`]: one row per checkpoint round,
/// one column per arm.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub checkpoints: Vec<usize>,
    pub arms: Vec<String>,
    /// `asr[checkpoint_index][arm_index]`.
    pub asr: Vec<Vec<f64>>,
    pub final_asr: Vec<f64>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::from("round");
        for arm in &self.arms {
            out.push(',');
            out.push_str(arm);
        }
        out.push('\n');
        for (ci, &cp) in self.checkpoints.iter().enumerate() {
            out.push_str(&cp.to_string());
            for ai in 0..self.arms.len() {
                out.push(',');
                out.push_str(&self.asr[ci][ai].to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Run the component ablation: the same seeded scenario with the attack
/// reduced to training only, training plus flips, and the full pipeline.
/// Shared seeds keep every benign sample, partition, and sampling decision
/// identical across arms.
pub fn ablation_suite(base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationTable> {
    let mut checkpoints: Vec<usize> = base
        .checkpoints
        .iter()
        .copied()
        .filter(|&c| c >= 1 && c <= base.rounds)
        .collect();
    if checkpoints.is_empty() {
        checkpoints.push(base.rounds);
    }

    let mut arms_cfg = Vec::new();
    for arm in ABLATION_ARMS {
        let mut cfg = base.clone();
        cfg.attack = AttackKind::F3baTrigopt;
        match arm {
            "train" => {
                cfg.attack_config.flip_enabled = false;
                cfg.attack_config.trig_opt_iters = 0;
            }
            "train_flip" => {
                cfg.attack_config.flip_enabled = true;
                cfg.attack_config.trig_opt_iters = 0;
            }
            _ => {
                cfg.attack_config.flip_enabled = true;
                if cfg.attack_config.trig_opt_iters == 0 {
                    cfg.attack_config.trig_opt_iters = 10;
                }
            }
        }
        arms_cfg.push((arm.to_string(), cfg));
    }

    let mut asr = vec![vec![0.0; arms_cfg.len()]; checkpoints.len()];
    let mut final_asr = vec![0.0; arms_cfg.len()];
    for (ai, (arm, cfg)) in arms_cfg.iter().enumerate() {
        let arm_dir = out_dir.map(|d| d.join(arm));
        let result = run_experiment(cfg, arm_dir.as_deref())?;
        for (ci, &cp) in checkpoints.iter().enumerate() {
            asr[ci][ai] = result.rows[cp - 1].asr;
        }
        final_asr[ai] = result.final_asr;
    }

    let table = AblationTable {
        checkpoints,
        arms: ABLATION_ARMS.iter().map(|s| s.to_string()).collect(),
        asr,
        final_asr,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), table.render())?;
    }
    Ok(table)
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Dirichlet concentration `h`.
    DirichletH,
    /// CRFL noise (applied to both training and test smoothing).
    CrflSigma,
    /// Number of actually-malicious clients under a fixed server assumption.
    NumMalicious,
}

/// One sweep point's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_acc: f64,
    pub final_asr: f64,
}

/// Run the base experiment once per value of the swept parameter.
pub fn run_sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut cfg = base.clone();
        match param {
            SweepParam::DirichletH => cfg.dirichlet_h = value,
            SweepParam::CrflSigma => match &mut cfg.defense {
                DefenseConfig::Crfl(c) => {
                    c.sigma_train = value;
                    c.sigma_test = value;
                }
                _ => {
                    return Err(Error::Config(
                        "crfl_sigma sweep requires the crfl defense".into(),
                    ))
                }
            },
            SweepParam::NumMalicious => {
                let n = value as usize;
                if value.fract() != 0.0 || n > cfg.num_clients {
                    return Err(Error::Config(format!(
                        "num_malicious sweep value {value} invalid"
                    )));
                }
                cfg.num_malicious = n;
            }
        }
        let point_dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("point_{i}")));
        let result = run_experiment(&cfg, point_dir.as_deref())?;
        rows.push(SweepRow {
            value,
            final_acc: result.final_acc,
            final_asr: result.final_asr,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut out = String::from("value,final_acc,final_asr\n");
        for r in &rows {
            out.push_str(&format!("{},{},{}\n", r.value, r.final_acc, r.final_asr));
        }
        std::fs::write(dir.join("sweep.csv"), out)?;
    }
    Ok(rows)
}
