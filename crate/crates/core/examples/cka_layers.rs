//! Compares the block outputs of a BvT and a ViT with linear CKA.

use bvt::cka::{cka_matrix, ActivationStack, Pooling};
use bvt::data::{generate_synthetic, Split, SyntheticSpec};
use bvt::model::{Family, ModelConfig, TransformerModel};

fn main() -> bvt::error::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec::three_class(5, 16, 20))?;
    for family in [Family::Bvt, Family::Vit] {
        let mut cfg = ModelConfig::preset("desk", family, 3)?;
        cfg.depth = 4;
        let model = TransformerModel::new(cfg, 5)?;
        let ex = ds.examples(Split::Train, family, None)?;
        let ids = (0..ex.len()).map(|i| format!("s{i}")).collect();
        let stack = ActivationStack::from_model(&model, &ex.images, ids, Pooling::PatchMean, 16)?;
        let m = cka_matrix(&stack)?;
        println!(
            "{} ({} samples), mean off-diagonal {:.4}",
            family.name(),
            stack.samples(),
            m.mean_off_diagonal()
        );
        m.write_csv(std::io::stdout())?;
    }
    Ok(())
}
