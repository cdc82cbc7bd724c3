//! A B-cos unit never exceeds the input norm, reaches it only for inputs
//! aligned with its weight, and acts as an input-dependent linear map.

use bvt::bcos::{bcos_star, BcosLayer};
use bvt::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bvt::error::Result<()> {
    let w = [1.0, 2.0, -0.5];
    let aligned = [2.0, 4.0, -1.0];
    let oblique = [2.0, -1.0, 1.0];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for b in 1..=3 {
        println!(
            "B={b}: aligned {:.4} (norm {:.4}), oblique {:.4} (norm {:.4})",
            bcos_star(&aligned, &w, b)?,
            norm(&aligned),
            bcos_star(&oblique, &w, b)?,
            norm(&oblique)
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = BcosLayer::random(4, 3, 2, &mut rng)?;
    let x = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.9, 0.1])?;
    let y = layer.apply(&x)?;
    let summary = layer.dynamic_linear_summary(x.row(0))?;
    let via_summary = summary.matmul(&x.t())?;
    println!("layer output      {:?}", y.data());
    println!("W(x) applied to x {:?}", via_summary.data());
    assert!(y.max_abs_diff(&via_summary.reshape(vec![1, 3])?) < 1e-12);
    Ok(())
}
