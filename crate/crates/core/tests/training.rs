use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thrifty::data::{synthetic, ImageDataset};
use thrifty::model::{checkpoint, init_params, Params};
use thrifty::planner::{make_schedule, Placement};
use thrifty::train::{
    ablation_alpha, alpha_well_distance, evaluate, train, AblationConfig, AlphaRegConfig, TrainConfig, TrainOptions,
    LAST_CHECKPOINT,
};
use thrifty::ThriftyConfig;

fn toy(n: usize, seed: u64) -> ImageDataset {
    let mut ds = synthetic(n, 4, (3, 8, 8), 0.8, seed).unwrap();
    ds.augmentation = None;
    ds
}

fn model(h: usize) -> ThriftyConfig {
    ThriftyConfig::new(8, 4, h, 4).with_schedule(make_schedule(4, 1, &Placement::Regular, (8, 8)).unwrap())
}

fn tc(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr0: 0.05,
        lr_drops: vec![],
        batch_size: 16,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn small_model_overfits_toy_set() {
    let data = toy(32, 1);
    let config = model(2);
    let params = init_params::<f32>(&config, 0).unwrap();
    let out = train(&config, params, &data, &data, &tc(60), None, TrainOptions::default()).unwrap();
    let best = out.log.rows().iter().map(|r| r.train_acc).fold(0.0, f64::max);
    assert_eq!(best, 100.0, "{:?}", out.log.last());
    let first = &out.log.rows()[0];
    assert!(out.log.last().unwrap().train_loss < first.train_loss / 5.0);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = synthetic(24, 4, (3, 8, 8), 0.8, 2).unwrap();
    let config = model(1);
    let run = || {
        let p = init_params::<f32>(&config, 3).unwrap();
        train(&config, p, &data, &data, &tc(3), None, TrainOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.log.same_values(&b.log));
    assert_eq!(a.params, b.params);
    let other = {
        let p = init_params::<f32>(&config, 3).unwrap();
        let t = TrainConfig { seed: 6, ..tc(3) };
        train(&config, p, &data, &data, &t, None, TrainOptions::default()).unwrap()
    };
    assert!(!a.log.same_values(&other.log));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = synthetic(24, 4, (3, 8, 8), 0.8, 2).unwrap();
    let config = model(2);
    let t = TrainConfig {
        lr_drops: vec![2],
        alpha_reg: Some(AlphaRegConfig {
            lambda0: 1e-2,
            eps: 1e-2,
            epochs: 3,
        }),
        ..tc(4)
    };
    let full = {
        let p = init_params::<f32>(&config, 4).unwrap();
        train(&config, p, &data, &data, &t, None, TrainOptions::default()).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let p = init_params::<f32>(&config, 4).unwrap();
    let first = train(
        &config,
        p,
        &data,
        &data,
        &t,
        None,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.log.len(), 2);
    let ckpt = checkpoint::load::<f32>(dir.path().join(LAST_CHECKPOINT)).unwrap();
    let rest = train(&config, ckpt.params, &data, &data, &t, ckpt.training, TrainOptions::default()).unwrap();
    let mut joined = first.log.clone();
    joined.extend(rest.log).unwrap();
    assert!(joined.same_values(&full.log));
    assert_eq!(rest.params, full.params);
}

#[test]
fn eval_does_not_touch_parameters() {
    let data = synthetic(10, 4, (3, 8, 8), 0.8, 2).unwrap();
    let config = model(2);
    let p = init_params::<f32>(&config, 4).unwrap();
    let before = p.clone();
    evaluate(&config, &p, &data, 4).unwrap();
    assert_eq!(p, before);
}

/// α drawn away from both wells, so the penalty has something to do.
fn off_well(config: &ThriftyConfig, seed: u64) -> Params<f32> {
    let mut p = init_params::<f32>(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = p.alpha.as_mut().unwrap();
    for (t, lag, _) in alpha.clone().unmasked() {
        alpha.set(t, lag, rng.gen_range(0.2..0.8));
    }
    p
}

#[test]
fn alpha_penalty_pulls_towards_the_wells() {
    let data = toy(32, 3);
    let config = model(3);
    let start = off_well(&config, 8);
    let d0 = alpha_well_distance(start.alpha.as_ref().unwrap());
    let run = |reg: Option<AlphaRegConfig>| {
        let t = TrainConfig { alpha_reg: reg, ..tc(20) };
        train(&config, start.clone(), &data, &data, &t, None, TrainOptions::default()).unwrap()
    };
    let with = run(Some(AlphaRegConfig {
        lambda0: 0.5,
        eps: 0.05,
        epochs: 20,
    }));
    let d1 = alpha_well_distance(with.params.alpha.as_ref().unwrap());
    assert!(d1 < d0, "{d0} -> {d1}");
    let without = run(None);
    assert!(d1 < alpha_well_distance(without.params.alpha.as_ref().unwrap()));
    assert!(with.log.last().unwrap().lambda > 0.5);
}

#[test]
fn ablation_keeps_binarized_alpha_frozen() {
    let data = toy(16, 4);
    let config = model(2);
    let mut ab = AblationConfig::scaled(2, 8, 1);
    ab.phase1.alpha_reg = Some(AlphaRegConfig {
        lambda0: 1.0,
        eps: 0.1,
        epochs: 2,
    });
    let report = ablation_alpha::<f32>(&config, &data, &data, &ab, None, |_, _| {}).unwrap();
    assert!(report.alpha.iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(report.rows().len(), 5);
    for v in [&report.continued, &report.same_init, &report.fresh_init] {
        assert_eq!(v.log.len(), 2);
    }
}
