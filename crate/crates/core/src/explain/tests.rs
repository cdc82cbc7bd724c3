use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{AttentionRecord, AttentionScope};
use crate::model::{encode_six_channel, Family, ModelConfig};
use crate::netpbm::quantize;

fn mat(n: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![n, n], data.to_vec()).unwrap()
}

/// A trace holding single-sample, single-head global attention matrices.
fn trace_of(mats: &[Tensor], grads: Option<&[Tensor]>, has_cls: bool, grid: (usize, usize)) -> ExecutionTrace {
    let n = mats[0].shape()[0];
    let lift = |t: &Tensor| t.reshape(vec![1, 1, n, n]).unwrap();
    let records = mats
        .iter()
        .enumerate()
        .map(|(i, a)| AttentionRecord {
            layer: i,
            scope: AttentionScope::Global,
            probs: lift(a),
            grad: grads.map(|g| lift(&g[i])),
        })
        .collect();
    ExecutionTrace {
        family: Family::Vit,
        has_cls,
        records,
        block_inputs: vec![Tensor::zeros(vec![1, n, 1]); mats.len()],
        block_input_grads: vec![None; mats.len()],
        block_outputs: vec![Tensor::zeros(vec![1, n, 1]); mats.len()],
        block_grids: vec![grid; mats.len()],
        logits: Tensor::zeros(vec![1, 2]),
    }
}

fn uniform(n: usize) -> Tensor {
    Tensor::full(vec![n, n], 1.0 / n as f64)
}

fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(vec![n, n], 0.0, 1.0, rng);
    for row in t.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

#[test]
fn attention_last_reads_the_cls_row() {
    let a = mat(3, &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4]);
    let map = attention_last(&trace_of(&[a], None, true, (1, 2)), 0, 0).unwrap();
    assert_eq!(map.raw.data(), &[0.5, 0.3]);
    assert_eq!(map.grid.data(), &[1.0, 0.3 / 0.5]);
    assert!(!map.degenerate);
}

#[test]
fn identity_attention_is_degenerate() {
    let map = attention_last(&trace_of(&[Tensor::eye(5)], None, true, (2, 2)), 0, 0).unwrap();
    assert!(map.degenerate);
    assert!(map.grid.data().iter().all(|&v| v == 0.0));
    let map = rollout(&trace_of(&[Tensor::eye(5)], None, true, (2, 2)), 0, 0).unwrap();
    assert!(map.degenerate);
}

#[test]
fn uniform_attention_gives_uniform_maps() {
    let trace = trace_of(&[uniform(5), uniform(5), uniform(5)], None, true, (2, 2));
    let last = attention_last(&trace, 0, 0).unwrap();
    assert!(last.grid.data().iter().all(|&v| v == 1.0));
    // With identity mixing, L uniform layers give 2^-L·I + (1 - 2^-L)·U.
    let r = rollout_matrix(&[uniform(5), uniform(5), uniform(5)]).unwrap();
    let off = (1.0 - 0.125) / 5.0;
    for (j, v) in r.row(0).iter().enumerate() {
        let expect = if j == 0 { 0.125 + off } else { off };
        assert!((v - expect).abs() < 1e-12);
    }
    let map = rollout(&trace, 0, 0).unwrap();
    assert!(map.grid.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn windowed_trace_without_global_layer_is_rejected() {
    let mut trace = trace_of(&[uniform(4)], None, false, (2, 2));
    trace.records[0].scope = AttentionScope::Window {
        size: 2,
        shift: 0,
        windows: 1,
    };
    assert!(attention_last(&trace, 0, 0).is_err());
    assert!(rollout(&trace, 0, 0).is_err());
}

#[test]
fn no_cls_uses_mean_query_row() {
    let a = mat(2, &[1.0, 0.0, 0.5, 0.5]);
    let map = attention_last(&trace_of(&[a], None, false, (1, 2)), 0, 0).unwrap();
    assert_eq!(map.raw.data(), &[0.75, 0.25]);
}

#[test]
fn grad_cam_examples() {
    let t = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, -1.0, 3.0, 0.0]).unwrap();
    let zero = grad_cam_scores(&t, &Tensor::zeros(vec![3, 2])).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    let g = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(grad_cam_scores(&t, &g).unwrap(), vec![1.0, 2.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::randn(vec![4, 3], 1.0, &mut rng);
    let g = Tensor::randn(vec![4, 3], 1.0, &mut rng);
    let alpha = to_na(&g).row_mean().transpose();
    let oracle = to_na(&t) * alpha;
    for (a, b) in grad_cam_scores(&t, &g).unwrap().iter().zip(oracle.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn grad_cam_requires_gradients() {
    let trace = trace_of(&[uniform(5)], None, true, (2, 2));
    assert!(matches!(grad_cam(&trace, 0, 0, 0), Err(Error::Missing(_))));
    assert!(matches!(transformer_attribution(&trace, 0, 0), Err(Error::Missing(_))));
}

#[test]
fn attribution_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zero = trace_of(&[uniform(5)], Some(&[Tensor::zeros(vec![5, 5])]), true, (2, 2));
    assert!(transformer_attribution(&zero, 0, 0).unwrap().degenerate);

    let a1 = Tensor::uniform(vec![4, 4], 0.0, 1.0, &mut rng);
    let one = attribution_matrix(std::slice::from_ref(&a1)).unwrap();
    assert_eq!(
        one,
        mat(4, (to_na(&a1) + DMatrix::identity(4, 4)).transpose().as_slice())
    );

    let a2 = Tensor::uniform(vec![4, 4], 0.0, 1.0, &mut rng);
    let r = attribution_matrix(&[a1.clone(), a2.clone()]).unwrap();
    let id = DMatrix::<f64>::identity(4, 4);
    let oracle = (&id + to_na(&a2)) * (&id + to_na(&a1));
    assert!((to_na(&r) - oracle).abs().max() < 1e-12);

    // The trace path rectifies grad ⊙ A before the recurrence.
    let a = random_stochastic(4, &mut rng);
    let g = Tensor::randn(vec![4, 4], 1.0, &mut rng);
    let trace = trace_of(std::slice::from_ref(&a), Some(std::slice::from_ref(&g)), true, (1, 3));
    let map = transformer_attribution(&trace, 0, 0).unwrap();
    let abar = Tensor::new(
        vec![4, 4],
        a.data().iter().zip(g.data()).map(|(a, g)| (a * g).max(0.0)).collect(),
    )
    .unwrap();
    let expect = attribution_matrix(&[abar]).unwrap();
    assert_eq!(map.raw.data(), &expect.row(0)[1..]);
}

#[test]
fn head_mass_examples() {
    let hm = accumulate_rows(&[vec![0.25; 4], vec![0.25; 4]], 0.5).unwrap();
    assert_eq!(hm.kept, vec![vec![0, 1], vec![0, 1]]);
    assert_eq!(hm.counts, vec![2, 2, 0, 0]);
    for mass in [0.1, 0.5, 1.0] {
        let hm = accumulate_rows(&[vec![0.0, 1.0, 0.0]], mass).unwrap();
        assert_eq!(hm.kept, vec![vec![1]]);
    }
    let hm = accumulate_rows(&[vec![0.5, 0.0, 0.3, 0.2]], 1.0).unwrap();
    assert_eq!(hm.kept, vec![vec![0, 2, 3]]);
    assert!(accumulate_rows(&[vec![1.0]], 0.0).is_err());
    for n in 1..=12 {
        for mass in [0.1, 0.25, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let hm = accumulate_rows(&[vec![1.0 / n as f64; n]], mass).unwrap();
            assert_eq!(
                hm.kept[0].len(),
                (mass * n as f64 - 1e-9).ceil() as usize,
                "n={n} mass={mass}"
            );
        }
    }
}

#[test]
fn render_examples() {
    let g = mat(2, &[0.0, 1.0, 1.0, 0.0]);
    let up = render_saliency(&g, 4, 4, Upsample::Nearest).unwrap();
    let expect = [0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 0., 0., 1., 1., 0., 0.];
    assert_eq!(up.data(), &expect);
    let c = Tensor::full(vec![3, 3], 0.4);
    for mode in [Upsample::Nearest, Upsample::Bilinear] {
        assert!(render_saliency(&c, 7, 5, mode)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.4).abs() < 1e-15));
    }
    let line = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let mid = render_saliency(&line, 1, 3, Upsample::Bilinear).unwrap();
    assert_eq!(mid.data(), &[0.0, 0.5, 1.0]);
    assert_eq!(quantize(mid.data()[1]), 128);
}

#[test]
fn localization_counts_mass_inside_mask() {
    let s = Tensor::new(vec![1, 20], (0..20).map(|i| i as f64).collect()).unwrap();
    let mut mask = vec![false; 20];
    mask[19] = true;
    assert!((localization_score(&s, &mask).unwrap() - 19.0 / 37.0).abs() < 1e-15);
    assert_eq!(localization_score(&Tensor::zeros(vec![1, 20]), &mask).unwrap(), 0.0);
}

fn desk_model(f: Family, seed: u64) -> (TransformerModel, Tensor) {
    let cfg = ModelConfig::preset("desk", f, 3).unwrap();
    let model = TransformerModel::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let rgb = Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let x = if cfg.in_channels == 6 {
        encode_six_channel(&rgb, true).unwrap()
    } else {
        rgb
    };
    (model, x)
}

#[test]
fn lrp_conserves_relevance_on_micro_models() {
    for f in [Family::Vit, Family::Bvt, Family::Swin, Family::Bwin] {
        let (model, x) = desk_model(f, 1);
        for class in 0..3 {
            let out = lrp_epsilon(&model, &x, class, Readout::All, 1e-6).unwrap();
            assert!(out.conservation_error() < 1e-3, "{f:?}: {}", out.conservation_error());
            assert_eq!(out.map.shape(), (4, 4));
        }
        let second = lrp_epsilon(&model, &x, 0, Readout::Second, 1e-6).unwrap();
        assert_eq!(second.map.layer, Some(1));
    }
}

#[test]
fn explain_runs_every_method_and_is_deterministic() {
    let (model, x) = desk_model(Family::Bvt, 3);
    let a = explain(&model, &x, &Method::ALL, None, None, 0.5, 1e-6).unwrap();
    let b = explain(&model, &x, &Method::ALL, None, None, 0.5, 1e-6).unwrap();
    assert_eq!(a.maps, b.maps);
    assert_eq!(a.maps.len(), Method::ALL.len());
    assert_eq!(a.class, argmax(&a.logits));
    assert_eq!(a.head_mass.unwrap().counts.len(), 16);
}

#[test]
fn windowed_models_need_the_modified_block() {
    let (model, x) = desk_model(Family::Bwin, 4);
    assert!(explain(&model, &x, &[Method::AttnLast], None, None, 0.5, 1e-6).is_err());
    assert!(explain(&model, &x, &[Method::GradCam, Method::Lrp], None, None, 0.5, 1e-6).is_ok());
    let mut cfg = model.config().clone();
    cfg.modified_last_block = true;
    let model = TransformerModel::new(cfg, 4).unwrap();
    let e = explain(
        &model,
        &x,
        &[Method::AttnLast, Method::Rollout, Method::TransformerAttribution],
        None,
        None,
        0.5,
        1e-6,
    )
    .unwrap();
    assert_eq!(e.maps[0].shape(), (2, 2));
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("saliency".parse::<Method>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollout_is_row_stochastic(seed in any::<u64>(), n in 2usize..9, layers in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats: Vec<Tensor> = (0..layers).map(|_| random_stochastic(n, &mut rng)).collect();
        for l in 1..=layers {
            let r = rollout_matrix(&mats[..l]).unwrap();
            for row in r.data().chunks(n) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn head_mass_is_monotone(seed in any::<u64>(), n in 1usize..10, m1 in 0.01f64..1.0, m2 in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = random_stochastic(n, &mut rng).row(0).to_vec();
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = accumulate_rows(std::slice::from_ref(&row), lo).unwrap();
        let b = accumulate_rows(&[row], hi).unwrap();
        prop_assert!(a.kept[0].iter().all(|i| b.kept[0].contains(i)));
    }
}
