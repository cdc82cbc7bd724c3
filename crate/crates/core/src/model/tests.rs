use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_check, OpKind};

const FAMILIES: [Family; 4] = [Family::Vit, Family::Bvt, Family::Swin, Family::Bwin];

fn desk(family: Family) -> ModelConfig {
    ModelConfig::preset("desk", family, 3).unwrap()
}

fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Tensor::uniform(vec![batch, 3, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut rng);
    if cfg.in_channels == 6 {
        encode_six_channel(&rgb, true).unwrap()
    } else {
        rgb
    }
}

/// Configuration small enough for exhaustive finite differences.
fn pico(family: Family) -> ModelConfig {
    let mut cfg = ModelConfig {
        family,
        modified_last_block: false,
        depth: 1,
        dim: 4,
        heads: 2,
        patch_size: 2,
        image_size: 4,
        in_channels: family.default_channels(),
        num_classes: 2,
        mlp_ratio: 2,
        exponent: 2,
        window_size: 2,
        stages: Vec::new(),
    };
    if family.is_windowed() {
        cfg.stages = vec![1];
    }
    cfg
}

#[test]
fn six_channel_examples() {
    let px = |r, g, b| Tensor::new(vec![3, 1, 1], vec![r, g, b]).unwrap();
    assert_eq!(
        encode_six_channel(&px(0.0, 0.0, 0.0), true).unwrap().data(),
        &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
    );
    assert_eq!(
        encode_six_channel(&px(1.0, 0.5, 0.0), true).unwrap().data(),
        &[1.0, 0.5, 0.0, 0.0, 0.5, 1.0]
    );
    assert!(encode_six_channel(&px(1.2, 0.5, 0.0), true).is_err());
    assert_eq!(
        encode_six_channel(&px(1.2, 0.5, -1.0), false).unwrap().data()[..3],
        [1.0, 0.5, 0.0]
    );
}

#[test]
fn complement_pairs_sum_to_one_exactly() {
    let cfg = desk(Family::Bvt);
    let x = images(&cfg, 2, 1);
    let plane = 16 * 16;
    for b in 0..2 {
        for c in 0..3 {
            for i in 0..plane {
                let base = b * 6 * plane;
                assert_eq!(
                    x.data()[base + c * plane + i] + x.data()[base + (c + 3) * plane + i],
                    1.0
                );
            }
        }
    }
}

#[test]
fn logits_shape_for_every_family() {
    for f in FAMILIES {
        let cfg = desk(f);
        let model = TransformerModel::new(cfg.clone(), 0).unwrap();
        let (logits, trace) = model.forward(&images(&cfg, 2, 2)).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(trace.depth(), cfg.depth);
    }
}

#[test]
fn closed_form_count_matches_built_model() {
    for preset in ["desk", "micro"] {
        for f in FAMILIES {
            for modified in [false, true] {
                if modified && !f.is_windowed() {
                    continue;
                }
                let mut cfg = ModelConfig::preset(preset, f, 5).unwrap();
                cfg.modified_last_block = modified;
                let model = TransformerModel::new(cfg.clone(), 0).unwrap();
                assert_eq!(model.param_count(), cfg.param_count(), "{preset} {f:?} {modified}");
            }
        }
    }
}

#[test]
fn bcos_graphs_have_no_relu_and_no_bias() {
    for f in FAMILIES {
        let cfg = desk(f);
        let model = TransformerModel::new(cfg.clone(), 0).unwrap();
        let tape = Tape::new();
        let b = model.params().bind(&tape);
        let x = tape.input(images(&cfg, 1, 3));
        model.forward_on(&b, x, TraceOptions::default()).unwrap();
        let relus = tape.count_ops(OpKind::Relu);
        let biases = model.params().iter().filter(|p| p.role == ParamRole::Bias).count();
        if f.is_bcos() {
            assert_eq!(relus, 0);
            assert_eq!(biases, 0);
        } else {
            assert_eq!(relus, cfg.depth);
            assert!(biases > 0);
        }
    }
}

#[test]
fn token_count_follows_patch_grid() {
    let mut cfg = desk(Family::Vit);
    cfg.patch_size = 8;
    let model = TransformerModel::new(cfg.clone(), 0).unwrap();
    let (_, trace) = model.forward(&images(&cfg, 1, 4)).unwrap();
    assert_eq!(trace.block_inputs[0].shape(), &[1, 5, 32]);
    let rec = &trace.records[0];
    assert_eq!(rec.probs.shape(), &[1, 2, 5, 5]);
}

#[test]
fn zero_image_gives_equal_patch_tokens() {
    let cfg = desk(Family::Vit);
    let mut model = TransformerModel::new(cfg.clone(), 0).unwrap();
    model
        .params_mut()
        .find_mut("pos_embed")
        .unwrap()
        .value
        .data_mut()
        .fill(0.0);
    let (_, trace) = model.forward(&Tensor::zeros(vec![1, 3, 16, 16])).unwrap();
    let t = &trace.block_inputs[0];
    let first = &t.data()[32..64];
    for tok in 2..t.shape()[1] {
        assert_eq!(&t.data()[tok * 32..(tok + 1) * 32], first);
    }
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    for f in FAMILIES {
        let cfg = desk(f);
        let model = TransformerModel::new(cfg.clone(), 7).unwrap();
        let one = images(&cfg, 1, 5);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let mut shape = one.shape().to_vec();
        shape[0] = 2;
        let (logits, _) = model.forward(&Tensor::new(shape, two).unwrap()).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        let (again, _) = model.forward(&one).unwrap();
        assert_eq!(again.row(0), logits.row(0));
        let par = model.logits(&images(&cfg, 5, 6), 2).unwrap();
        let (seq, _) = model.forward(&images(&cfg, 5, 6)).unwrap();
        assert_eq!(par, seq);
    }
}

#[test]
fn wrong_channel_count_rejected() {
    let cfg = desk(Family::Bvt);
    let model = TransformerModel::new(cfg, 0).unwrap();
    assert!(model.forward(&Tensor::zeros(vec![1, 3, 16, 16])).is_err());
}

#[test]
fn modified_windowed_models_end_with_one_global_block() {
    for f in [Family::Swin, Family::Bwin] {
        let cfg = desk(f);
        let mut mcfg = cfg.clone();
        mcfg.modified_last_block = true;
        let plain = TransformerModel::new(cfg.clone(), 0).unwrap();
        let modified = TransformerModel::new(mcfg, 0).unwrap();
        let x = images(&cfg, 2, 8);
        let (lp, tp) = plain.forward(&x).unwrap();
        let (lm, tm) = modified.forward(&x).unwrap();
        assert_eq!(lp.shape(), lm.shape());
        assert_eq!(tp.global_records().count(), 0);
        let globals: Vec<_> = tm.global_records().collect();
        assert_eq!(globals.len(), 1);
        assert_eq!(globals[0].layer, cfg.depth - 1);
        let n = tm.grid(cfg.depth - 1).0.pow(2);
        assert_eq!(globals[0].probs.shape()[2..], [n, n]);

        let a: BTreeSet<&str> = plain.params().names().collect();
        let b: BTreeSet<&str> = modified.params().names().collect();
        let last = format!("stages.{}.", cfg.stages.len() - 1);
        for name in a.symmetric_difference(&b) {
            assert!(name.starts_with(&last), "{name}");
            assert!(
                name.contains("global_block") || name.contains(&format!("blocks.{}", cfg.stages.last().unwrap() - 1))
            );
        }
    }
}

#[test]
fn window_traces_on_request() {
    let cfg = desk(Family::Swin);
    let model = TransformerModel::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let b = model.params().bind(&tape);
    let x = tape.input(images(&cfg, 1, 9));
    let pass = model.forward_on(&b, x, TraceOptions { windows: true }).unwrap();
    let trace = pass.trace(&tape, cfg.family).unwrap();
    assert_eq!(trace.records.len(), cfg.depth);
    for r in &trace.records {
        for row in r.probs.data().chunks(r.tokens()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for f in FAMILIES {
        let cfg = desk(f);
        let model = TransformerModel::new(cfg.clone(), 11).unwrap();
        let ckpt = Checkpoint::from_model(&model, 42, 11);
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.to_model().unwrap();
        let x = images(&cfg, 2, 12);
        assert_eq!(model.forward(&x).unwrap().0, restored.forward(&x).unwrap().0);
    }
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let model = TransformerModel::new(desk(Family::Vit), 0).unwrap();
    let mut buf = Vec::new();
    Checkpoint::from_model(&model, 0, 0).write_to(&mut buf).unwrap();
    buf[0] ^= 0xff;
    assert!(matches!(Checkpoint::read_from(buf.as_slice()), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::read_from(&b"BVTCKPT0"[..]), Err(Error::Format(_))));
}

#[test]
fn transfer_to_a_new_head() {
    let src = TransformerModel::new(desk(Family::Bvt), 1).unwrap();
    let ckpt = Checkpoint::from_model(&src, 0, 1);
    let mut cfg = desk(Family::Bvt);
    cfg.num_classes = 5;
    let mut dst = TransformerModel::new(cfg.clone(), 2).unwrap();
    assert!(load_pretrained(&mut dst.clone(), &ckpt, true).is_err());
    let report = load_pretrained(&mut dst, &ckpt, false).unwrap();
    assert_eq!(report.reinitialized, vec!["head.weight_a", "head.weight_b"]);
    assert!(report.missing.is_empty() && report.unexpected.is_empty());
    assert_eq!(report.matched.len(), src.params().len() - 2);
    for name in &report.matched {
        assert_eq!(
            dst.params().find(name).unwrap().value.data(),
            src.params().find(name).unwrap().value.data()
        );
    }
    let mut vit = TransformerModel::new(desk(Family::Vit), 0).unwrap();
    assert!(load_pretrained(&mut vit, &ckpt, false).is_err());
}

#[test]
fn end_to_end_gradient_check_on_pico_models() {
    for f in FAMILIES {
        let cfg = pico(f);
        cfg.validate().unwrap();
        assert!(cfg.param_count() <= 10_000);
        let model = TransformerModel::new(cfg.clone(), 3).unwrap();
        let x = images(&cfg, 1, 13);
        let check = finite_difference_check(
            |tape, xv| {
                let b = model.params().bind(tape);
                let pass = model.forward_on(&b, xv, TraceOptions::default())?;
                tape.cross_entropy(pass.logits, &[1])
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{f:?}: {}", check.max_rel_error);
    }
}
