use units_core::data::{make_synthetic, SyntheticKind, SyntheticParams};
use units_core::model::ModelConfig;
use units_core::tasks::TaskSpec;
use units_core::trainer::{Regime, Schedule, Trainer, TrainingConfig};
use units_core::Model;

fn small() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        d: 16,
        patch: 8,
        heads: 2,
        prompt_len: 2,
        dylinear_base: 8,
        max_positions: 16,
    }
}

#[test]
fn pretraining_halves_the_loss_in_two_hundred_steps() {
    let p = SyntheticParams {
        samples: 64,
        length: 64,
        ..Default::default()
    };
    let ds = make_synthetic(TaskSpec::forecast("sine", "sine", 1), SyntheticKind::SineForecast, 3, &p).unwrap();
    let mut m = Model::new(small(), 8).unwrap();
    let mut cfg = TrainingConfig::new(Regime::Pretrain, 200, 16, 5e-3);
    cfg.schedule = Schedule::Cosine;
    let mut tr = Trainer::new(&mut m, cfg, vec![ds]).unwrap();
    let rows = tr.run(&mut m).unwrap();
    let first = rows.first().unwrap().loss;
    let last = rows.last().unwrap().loss;
    assert_eq!(rows.len(), 200);
    assert!(last <= 0.5 * first, "step-0 loss {first}, final {last}");
}

#[test]
fn identical_seeds_train_identically() {
    let p = SyntheticParams {
        samples: 16,
        length: 32,
        ..Default::default()
    };
    let sets = || {
        vec![
            make_synthetic(TaskSpec::forecast("f", "f", 2), SyntheticKind::SineForecast, 1, &p).unwrap(),
            make_synthetic(TaskSpec::classify("c", "c", 2), SyntheticKind::TwoClass, 2, &p).unwrap(),
        ]
    };
    let run = |seed| {
        let mut m = Model::new(small(), 4).unwrap();
        let mut cfg = TrainingConfig::new(Regime::Supervised, 20, 4, 1e-2);
        cfg.seed = seed;
        let rows = Trainer::new(&mut m, cfg, sets()).unwrap().run(&mut m).unwrap();
        (rows, m.registry)
    };
    let (ra, ma) = run(5);
    let (rb, mb) = run(5);
    assert_eq!(ra, rb);
    assert_eq!(ma, mb);
    let (rc, _) = run(6);
    assert_ne!(ra, rc);
}
