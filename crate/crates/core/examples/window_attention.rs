//! Window attention restricted to disjoint windows, its shifted variant, and
//! the case where one window covers the whole grid.

use bvt::attention::{shift_mask, AttentionConfig, MultiHeadAttention, WindowSpec};
use bvt::autodiff::Tape;
use bvt::nn::{ParamStore, ProjectionKind};
use bvt::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(
    store: &ParamStore,
    m: &MultiHeadAttention,
    x: &Tensor,
    grid: Option<(usize, usize)>,
) -> bvt::error::Result<Tensor> {
    let tape = Tape::new();
    let b = store.bind(&tape);
    let xv = tape.input(x.clone());
    let out = match grid {
        Some(g) => m.forward_grid(&b, xv, g)?,
        None => m.forward(&b, xv)?,
    };
    tape.value(out.out)
}

fn main() -> bvt::error::Result<()> {
    let x = Tensor::randn(vec![1, 16, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let kind = ProjectionKind::Bcos { exponent: 2 };
    let mut store = ParamStore::new();
    let global = MultiHeadAttention::new(
        &mut store,
        "attn",
        AttentionConfig::global(8, 2, kind),
        &mut ChaCha8Rng::seed_from_u64(2),
    )?;
    let reference = run(&store, &global, &x, None)?;

    for (size, shift) in [(4, 0), (2, 0), (2, 1)] {
        let cfg = AttentionConfig {
            window: Some(WindowSpec { size, shift }),
            ..AttentionConfig::global(8, 2, kind)
        };
        let windowed = MultiHeadAttention::new(&mut ParamStore::new(), "attn", cfg, &mut ChaCha8Rng::seed_from_u64(2))?;
        let out = run(&store, &windowed, &x, Some((4, 4)))?;
        println!(
            "window {size} shift {shift}: max difference from global {:.3e}",
            out.max_abs_diff(&reference)
        );
    }

    let mask = shift_mask(4, 4, 2, 1)?;
    let blocked = mask.data().iter().filter(|&&v| v < 0.0).count();
    println!(
        "shift mask {:?} blocks {blocked} of {} token pairs",
        mask.shape(),
        mask.len()
    );
    Ok(())
}
