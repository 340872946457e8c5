use forestnet::autocontext::{LabeledStack, LevelParams};
use forestnet::deepnet::{LossPixels, SparseNet};
use forestnet::forest::{ForestParams, SamplingParams, TreeParams};
use forestnet::pipeline::{finetune, map_net, prepare, train_stack, ExperimentConfig};
use forestnet::synth::SyntheticTask;

fn training_loss(net: &SparseNet, data: &[LabeledStack], cfg: &ExperimentConfig) -> f64 {
    data.iter()
        .map(|d| {
            let lp = LossPixels::new(&d.labels, cfg.classes, cfg.train.loss, cfg.train.stride, (0, 0)).unwrap();
            net.loss_at(&d.stack, &lp).unwrap()
        })
        .sum::<f64>()
        / data.len() as f64
}

#[test]
fn hundred_iterations_from_forest_init_lower_training_loss() {
    for seed in 0..3 {
        let task = SyntheticTask { width: 64, height: 64, classes: 4, train: 6, test: 1, seed, ..SyntheticTask::default() };
        let set = task.generate().unwrap();
        let mut cfg = ExperimentConfig {
            classes: 4,
            level: LevelParams {
                forest: ForestParams { trees: 3, tree: TreeParams { max_depth: 6, candidate_features: 30, delta_max: 12, ..TreeParams::default() } },
                sampling: SamplingParams { stride: 2, per_class_per_image: Some(60), fraction: 1.0 },
            },
            seed,
            ..ExperimentConfig::default()
        };
        cfg.train.iterations = 100;
        cfg.train.stride = 3;
        cfg.train.seed = seed;
        let (pre, data) = prepare(cfg.bank().unwrap(), &set.train).unwrap();
        let stack = train_stack(&cfg, &pre, &data).unwrap();
        let net = map_net(&cfg, &stack).unwrap();
        let before = training_loss(&net, &data, &cfg);
        let (tuned, curve) = finetune(&cfg, net, &data).unwrap();
        assert_eq!(curve.len(), 100);
        let after = training_loss(&tuned, &data, &cfg);
        assert!(after < before, "seed {seed}: loss {before} -> {after}");
    }
}
