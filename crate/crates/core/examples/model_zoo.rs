//! Builds every family at the desk and full-sized presets, prints parameter
//! counts, and round-trips a checkpoint.

use bvt::model::{load_pretrained, Checkpoint, Family, ModelConfig, TransformerModel};
use bvt::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bvt::error::Result<()> {
    let families = [Family::Vit, Family::Bvt, Family::Swin, Family::Bwin];
    for preset in ["desk", "micro", "tiny", "small"] {
        let counts: Vec<String> = families
            .iter()
            .map(|&f| {
                Ok(format!(
                    "{} {}",
                    f.name(),
                    ModelConfig::preset(preset, f, 1000)?.param_count()
                ))
            })
            .collect::<bvt::error::Result<_>>()?;
        println!("{preset:>6}: {}", counts.join(", "));
    }

    let mut cfg = ModelConfig::preset("desk", Family::Bwin, 3)?;
    cfg.modified_last_block = true;
    let model = TransformerModel::new(cfg, 0)?;
    let rgb = Tensor::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (logits, trace) = model.forward(&model.prepare_input(&rgb)?)?;
    println!(
        "bwin logits {:?}; global attention layers {}",
        logits.shape(),
        trace.global_records().count()
    );

    let dir = std::env::temp_dir().join("bvt-model-zoo");
    std::fs::create_dir_all(&dir).map_err(|e| bvt::error::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("bwin.ckpt");
    Checkpoint::from_model(&model, 0, 0).save(&path)?;
    let restored = Checkpoint::load(&path)?.to_model()?;
    let (again, _) = restored.forward(&restored.prepare_input(&rgb)?)?;
    println!("checkpoint round trip identical: {}", again == logits);

    let mut ten_way = TransformerModel::new(
        ModelConfig {
            num_classes: 10,
            ..model.config().clone()
        },
        5,
    )?;
    let report = load_pretrained(&mut ten_way, &Checkpoint::load(&path)?, false)?;
    println!(
        "transfer: {} tensors copied, {} re-drawn",
        report.matched.len(),
        report.reinitialized.len()
    );
    Ok(())
}
