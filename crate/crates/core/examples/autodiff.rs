//! Reverse-mode autodiff with gradients of gradients.
//!
//! One SGD step on `f(w) = sum((x w)^2)` followed by a loss on the updated
//! weights; the learning rate gets its gradient through the update.

use mct::numeric::{Tape, Tensor};

fn main() -> mct::Result<()> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5])?);
    let w = tape.leaf(Tensor::matrix(2, 1, vec![0.3, -0.7])?);
    let lr = tape.scalar(0.1);

    let inner = x.matmul(w)?.square().sum();
    let g = tape.grad(inner, &[w])?[0];
    let w1 = w.sub(g.mul_scalar(lr)?)?;
    let outer = w1.square().sum();

    let d = tape.grad(outer, &[lr, x])?;
    println!("inner loss {:.6}, outer loss {:.6}", inner.item(), outer.item());
    println!("d outer / d lr = {:.6}", d[0].item());
    println!("d outer / d x  = {:?}", d[1].value().data());
    println!("tape holds {} nodes", tape.len());
    Ok(())
}
