//! Generates the three-shape dataset, writes it as an image folder and loads
//! it back.

use bvt::data::{generate_synthetic, load_image_folder, Split, SyntheticSpec, LABELS_FILE};
use bvt::model::Family;

fn main() -> bvt::error::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("bvt-shapes"));
    let spec = SyntheticSpec::three_class(0, 16, 20);
    let ds = generate_synthetic(&spec)?;
    ds.write_folder(&out)?;
    let back = load_image_folder(&out, &out.join(LABELS_FILE))?;
    println!(
        "wrote {} images of classes {:?} to {}",
        back.len(),
        ds.class_names(),
        out.display()
    );
    for split in Split::ALL {
        println!("  {split}: {} images", back.split(split).len());
    }
    let masked: usize = back
        .samples()
        .iter()
        .filter_map(|s| s.mask.as_ref())
        .map(|m| m.iter().filter(|&&v| v).count())
        .sum();
    println!("mean shape area: {:.1} pixels", masked as f64 / back.len() as f64);
    let encoded = back.examples(Split::Train, Family::Bvt, None)?;
    println!("B-cos input batch {:?}", encoded.images.shape());
    Ok(())
}
