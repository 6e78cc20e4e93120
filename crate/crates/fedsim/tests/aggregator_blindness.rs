//! Every aggregation strategy must decide without looking at the ground-truth
//! malicious tag. Reads of the tag are counted process-wide; running each
//! defense over a mixed cohort must leave the counter untouched.

use fedsim::data::gen_blobs_dataset;
use fedsim::defense::refine::{Crfl, CrflConfig, DistillConfig, FedDf, FedMv, FedMvConfig, FedRad};
use fedsim::defense::robust::{
    Bulyan, BulyanConfig, DeepSight, DeepSightConfig, RobustLr, RobustLrConfig,
};
use fedsim::federation::{
    ground_truth_read_count, Aggregator, ClientUpdate, FedAvg, GlobalState, ServerContext,
};
use fedsim::nn::{Activation, LayerSpec, ModelParams};
use fedsim::seeds;

fn arch() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(1, 2, 3, 3, Activation::Relu),
        LayerSpec::dense(2 * 4 * 4, 8, Activation::Relu),
        LayerSpec::dense(8, 4, Activation::Identity),
    ]
}

fn cohort(arch: &[LayerSpec]) -> (GlobalState, Vec<ClientUpdate>) {
    let mut rng = seeds::stream(99, &[7000]);
    let global = ModelParams::init_glorot(arch, &mut rng);
    let state = GlobalState::new(global.clone());
    let updates: Vec<ClientUpdate> = (0..8)
        .map(|i| {
            let mut proposed = global.clone();
            let step = ModelParams::init_glorot(arch, &mut rng);
            proposed.add_scaled(&step, 0.05).unwrap();
            let mut up = ClientUpdate::new(i, i + 1, proposed, i % 3 == 0).unwrap();
            up.filter_ranks = Some(vec![(i) % 2, (i + 1) % 2]);
            up
        })
        .collect();
    (state, updates)
}

#[test]
fn no_aggregator_reads_the_ground_truth_tag() {
    let arch = arch();
    let (state, updates) = cohort(&arch);
    let server = gen_blobs_dataset(4, 6, (1, 6, 6), 0.2, 5, 2);

    let mut aggregators: Vec<Box<dyn Aggregator>> = vec![
        Box::new(FedAvg::default()),
        Box::new(FedDf {
            cfg: DistillConfig::default(),
        }),
        Box::new(FedRad {
            cfg: DistillConfig::default(),
        }),
        Box::new(FedMv {
            cfg: FedMvConfig::default(),
        }),
        Box::new(Bulyan {
            cfg: BulyanConfig { assumed_f: 1 },
        }),
        Box::new(RobustLr {
            cfg: RobustLrConfig { beta: 4, eta: 1.0 },
        }),
        Box::new(DeepSight {
            cfg: DeepSightConfig::default(),
        }),
        Box::new(Crfl {
            cfg: CrflConfig::default(),
        }),
    ];

    for agg in aggregators.iter_mut() {
        let mut ctx = ServerContext {
            arch: &arch,
            rng: seeds::stream(1, &[7001]),
            server_data: Some(&server),
            input_shape: vec![1, 6, 6],
        };
        let before = ground_truth_read_count();
        agg.aggregate(&state, &updates, &mut ctx)
            .unwrap_or_else(|e| panic!("{} failed: {e}", agg.name()));
        let after = ground_truth_read_count();
        assert_eq!(
            before,
            after,
            "aggregator {} read the ground-truth malicious tag",
            agg.name()
        );
    }
}
