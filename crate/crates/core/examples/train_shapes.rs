//! Trains a desk-sized BvT on the synthetic shapes and reports validation
//! metrics. Pass the number of epochs as the first argument.

use bvt::data::{generate_synthetic, Split, SyntheticSpec};
use bvt::model::{Family, ModelConfig, TransformerModel};
use bvt::train::{evaluate, train, Loss, TrainConfig};

fn main() -> bvt::error::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let ds = generate_synthetic(&SyntheticSpec::three_class(7, 16, 40))?;
    let family = Family::Bvt;
    let (tr, va) = (
        ds.examples(Split::Train, family, None)?,
        ds.examples(Split::Val, family, None)?,
    );
    let mut model = TransformerModel::new(ModelConfig::preset("desk", family, 3)?, 7)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let outcome = train(&mut model, &tr, &va, &cfg, &mut log)?;
    for rec in outcome.history.iter().filter(|r| r.split == "val") {
        println!(
            "epoch {:>3}  lr {:.2e}  val loss {:.4}  f1 {:.3}",
            rec.epoch, rec.lr, rec.loss, rec.f1_macro
        );
    }
    let best = outcome.best.to_model()?;
    let (loss, report) = evaluate(&best, &ds.examples(Split::Test, family, None)?, Loss::Cce, 16)?;
    println!(
        "best epoch {}: test loss {loss:.4}, top-1 {:.3}, macro F1 {:.3}",
        outcome.best_epoch, report.top1, report.f1_macro
    );
    Ok(())
}
