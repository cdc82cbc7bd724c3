//! Records a small computation on a tape, backpropagates, and checks the
//! gradient against central differences.

use bvt::autodiff::{finite_difference_check, Tape};
use bvt::tensor::Tensor;

fn main() -> bvt::error::Result<()> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])?.with_requires_grad());
    let w = tape.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25])?);
    let y = tape.matmul(x, w)?;
    let p = tape.softmax(y, 1)?;
    let loss = tape.cross_entropy(y, &[0, 1])?;
    tape.backward(loss)?;
    println!("softmax rows: {:?}", tape.value(p)?.data());
    println!("loss: {:.6}", tape.value(loss)?.item());
    println!("d loss / dx: {:?}", tape.grad(x)?.expect("x requires grad").data());

    let input = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let check = finite_difference_check(
        |t, v| {
            let w = t.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25])?);
            let y = t.matmul(v, w)?;
            t.cross_entropy(y, &[0, 1])
        },
        &input,
        1e-6,
    )?;
    println!("max relative gradient error: {:.2e}", check.max_rel_error);
    assert!(check.max_rel_error < 1e-6);
    Ok(())
}
