//! Trains a small BvT briefly, then writes every saliency map of one test
//! image as PGM plus JSON and scores it against the shape mask.

use bvt::data::{generate_synthetic, six_channel_pipeline, Split, SyntheticSpec};
use bvt::explain::{explain, localization_score, render_saliency, Method, Sidecar, Upsample};
use bvt::model::{Family, ModelConfig, TransformerModel};
use bvt::train::{train, TrainConfig};

fn main() -> bvt::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("bvt-explain"));
    std::fs::create_dir_all(&out).map_err(|e| bvt::error::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let ds = generate_synthetic(&SyntheticSpec::three_class(3, 16, 30))?;
    let family = Family::Bvt;
    let mut model = TransformerModel::new(ModelConfig::preset("desk", family, 3)?, 3)?;
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &ds.examples(Split::Train, family, None)?,
        &ds.examples(Split::Val, family, None)?,
        &cfg,
        &mut std::io::sink(),
    )?;

    let test = ds.split(Split::Test);
    let sample = test[0];
    let input = six_channel_pipeline(&[sample], family, None)?.images;
    let methods = [
        Method::AttnLast,
        Method::Rollout,
        Method::GradCam,
        Method::Lrp,
        Method::TransformerAttribution,
    ];
    let result = explain(&model, &input, &methods, None, None, 0.5, 1e-6)?;
    println!(
        "{} (label {}), predicted class {}",
        sample.id, sample.label, result.class
    );
    let mask = sample.mask.as_deref().expect("synthetic samples carry masks");
    for map in &result.maps {
        let up = render_saliency(&map.grid, 16, 16, Upsample::Nearest)?;
        let score = localization_score(&up, mask)?;
        map.write(
            &out,
            map.method.name(),
            &up,
            &Sidecar::new(map, Upsample::Nearest, Some(score)),
        )?;
        println!("  {:<10} localization {score:.3}", map.method.name());
    }
    for l in &result.lrp {
        println!(
            "  lrp relevance: input {:.4} + absorbed {:.4} vs logit {:.4}",
            l.input_total, l.absorbed_total, l.logit
        );
    }
    println!("maps written to {}", out.display());
    Ok(())
}
