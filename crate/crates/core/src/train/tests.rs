use super::*;
use crate::model::ModelConfig;
use rand::Rng;

fn tiny(family: Family) -> TransformerModel {
    let mut cfg = ModelConfig::preset("desk", family, 3).unwrap();
    cfg.depth = 1;
    cfg.dim = 16;
    cfg.image_size = 8;
    TransformerModel::new(cfg, 5).unwrap()
}

/// Images whose mean brightness encodes the class.
fn toy(model: &TransformerModel, n: usize, seed: u64) -> Examples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = model.config().image_size;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 3;
        labels.push(y);
        let base = 0.2 + 0.3 * y as f64;
        data.extend((0..3 * s * s).map(|_| (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)));
    }
    let rgb = Tensor::new(vec![n, 3, s, s], data).unwrap();
    Examples::new(model.prepare_input(&rgb).unwrap(), labels).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        epochs: 2,
        shard_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn default_config_parses_and_validates() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.weight_decay, 1e-4);
    assert_eq!(cfg.betas, (0.9, 0.999));
    assert!(!cfg.grad_clip);
    assert_eq!(cfg.lr_for(Family::Bvt), 1e-3);
    assert_eq!(cfg.lr_for(Family::Swin), 1e-4);
    cfg.validate(Family::Vit).unwrap();
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    let bad = TrainConfig {
        lr_min: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate(Family::Vit).is_err());
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut model = tiny(Family::Bvt);
    let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let data = toy(&model, 12, 1);
    let cfg = TrainConfig {
        lr_max: Some(0.0),
        ..quick_cfg()
    };
    train(&mut model, &data, &data, &cfg, &mut Vec::new()).unwrap();
    for (p, b) in model.params().iter().zip(&before) {
        assert_eq!(p.value.data(), b.data(), "{}", p.name);
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let run = || {
        let mut model = tiny(Family::Vit);
        let data = toy(&model, 12, 2);
        let mut log = Vec::new();
        train(&mut model, &data, &data, &quick_cfg(), &mut log).unwrap();
        log
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["epoch", "split", "loss", "f1_macro", "top1", "top3", "lr"] {
        assert!(keys.contains(&k));
    }
    assert_eq!(keys.len(), 7);
}

#[test]
fn sharding_matches_single_pass() {
    let model = tiny(Family::Bvt);
    let data = toy(&model, 7, 3);
    let whole = batch_gradients(&model, &data, Loss::Bce, 7).unwrap();
    let split = batch_gradients(&model, &data, Loss::Bce, 3).unwrap();
    assert!((whole.loss - split.loss).abs() < 1e-12);
    assert!(whole.logits.max_abs_diff(&split.logits) < 1e-12);
    for (a, b) in whole.grads.iter().zip(&split.grads) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn non_finite_parameters_abort_with_diagnostic() {
    let mut model = tiny(Family::Vit);
    let data = toy(&model, 6, 4);
    model.params_mut().find_mut("head.weight").unwrap().value.data_mut()[0] = f64::NAN;
    let err = train(&mut model, &data, &data, &quick_cfg(), &mut Vec::new()).unwrap_err();
    match err {
        Error::Numerical(msg) => assert!(msg.contains("step 0") && msg.contains("grad norm"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn learns_a_separable_toy_problem() {
    let mut model = tiny(Family::Bvt);
    let data = toy(&model, 24, 5);
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 8,
        ..quick_cfg()
    };
    let out = train(&mut model, &data, &data, &cfg, &mut Vec::new()).unwrap();
    let first = out.history[0].loss;
    let last = out.history[out.history.len() - 2].loss;
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(out.steps, 15 * 3);
    assert!(out.history.iter().all(|r| r.top1 <= r.top3));
}

#[test]
fn max_steps_caps_training() {
    let mut model = tiny(Family::Vit);
    let data = toy(&model, 12, 6);
    let cfg = TrainConfig {
        max_steps: Some(3),
        epochs: 5,
        ..quick_cfg()
    };
    let out = train(&mut model, &data, &data, &cfg, &mut Vec::new()).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.history.len(), 4);
}

#[test]
fn best_checkpoint_restores_a_model() {
    let mut model = tiny(Family::Bvt);
    let data = toy(&model, 12, 7);
    let out = train(&mut model, &data, &data, &quick_cfg(), &mut Vec::new()).unwrap();
    let restored = out.best.to_model().unwrap();
    let best_f1 = out
        .history
        .iter()
        .filter(|r| r.split == "val")
        .map(|r| r.f1_macro)
        .fold(0.0, f64::max);
    let (_, report) = evaluate(&restored, &data, Loss::Cce, 8).unwrap();
    assert!((report.f1_macro - best_f1).abs() < 1e-12);
    assert_eq!(out.history[2 * out.best_epoch + 1].f1_macro, best_f1);
}
