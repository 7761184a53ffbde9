mod common;

use afgm_core::data_io::{split, synthetic_ett, SplitScheme};
use afgm_core::model::{Model, ModelConfig, ParamSet};
use afgm_core::trainer::{batch_loss_and_grad, batch_loss_and_grad_seq, evaluate, train, TrainConfig, TrainData};

fn setup() -> (Model, TrainData) {
    let ds = synthetic_ett(500, 3);
    let cfg = ModelConfig {
        n_vars: ds.vars(),
        ..ModelConfig::toy()
    };
    let splits = split(ds.rows(), SplitScheme::Ratio, cfg.input_len, cfg.horizon).unwrap();
    let data = TrainData::new(&ds, &splits, cfg.input_len, cfg.horizon).unwrap();
    (Model::new(cfg).unwrap(), data)
}

fn short_run(model: &Model, data: &TrainData, epochs: usize) -> afgm_core::trainer::TrainOutcome {
    let init = model.init_params(1, Some((data.mean.clone(), data.std.clone())));
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: epochs,
        seed: 4,
        ..Default::default()
    };
    train(model, init, data, &cfg, |_, _, _| Ok(())).unwrap()
}

#[test]
fn replay_is_bit_identical() {
    let (model, data) = setup();
    let runs: Vec<_> = (0..3).map(|_| short_run(&model, &data, 2)).collect();
    for r in &runs[1..] {
        assert_eq!(r.history[0].train_mse.to_bits(), runs[0].history[0].train_mse.to_bits());
        for (a, b) in r.history.iter().zip(&runs[0].history) {
            assert_eq!((a.train_mse, a.val_mse), (b.train_mse, b.val_mse));
        }
        assert_eq!(r.best.params, runs[0].best.params);
    }
}

#[test]
fn parallel_and_sequential_batches_agree() {
    let (model, data) = setup();
    let set = model.init_params(2, None);
    let batch: Vec<usize> = (0..24).map(|i| i * 7 % data.train.len()).collect();
    let (lp, gp) = batch_loss_and_grad(&model, &set.params, &data.train, &batch).unwrap();
    let (ls, gs) = batch_loss_and_grad_seq(&model, &set.params, &data.train, &batch).unwrap();
    assert_eq!(lp.to_bits(), ls.to_bits());
    assert_eq!(gp, gs);
}

#[test]
fn best_epoch_tracks_validation_minimum() {
    let (model, data) = setup();
    let out = short_run(&model, &data, 3);
    let min = out.history.iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_mse, min);
    assert_eq!(out.history[out.best_epoch].val_mse, min);
    let (val, _) = evaluate(&model, &out.best, &data.val).unwrap();
    assert!((val - min).abs() < 1e-12);
    // training on the toy data beats the untrained model
    let (untrained, _) = evaluate(&model, &model.init_params(1, None), &data.val).unwrap();
    assert!(min < untrained);
}

#[test]
fn checkpoint_reload_gives_identical_forecasts() {
    let (model, data) = setup();
    let out = short_run(&model, &data, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    out.best.save(&path).unwrap();
    let back = ParamSet::load(&path, &model).unwrap();
    assert_eq!(back, out.best);
    let w = data.test.get(0);
    let a = model.forward_normalized(&out.best, &w.input).unwrap();
    let b = model.forward_normalized(&back, &w.input).unwrap();
    assert_eq!(a, b);
}
