//! Reverse-mode gradients on the tape, checked against a central difference.

use bat_lab::tensor::{Tape, Tensor};

fn main() -> bat_lab::Result<()> {
    let x = Tensor::matrix(2, 3, vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.7])?;
    let w = Tensor::matrix(2, 3, vec![0.5, -0.1, 0.3, 0.8, 0.2, -0.6])?;
    let b = Tensor::vector(vec![0.1, -0.2])?;

    let f = |w: &Tensor| -> bat_lab::Result<f64> {
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let z = t.linear(xv, wv, bv)?;
        let h = t.relu(z)?;
        let l = t.softmax_cross_entropy(h, &[0, 1])?;
        Ok(t.value(l).item())
    };

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone(), true);
    let bv = tape.leaf(b.clone(), true);
    let z = tape.linear(xv, wv, bv)?;
    let h = tape.relu(z)?;
    let loss = tape.softmax_cross_entropy(h, &[0, 1])?;
    tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());

    let grad = tape.grad(wv).expect("weights require grad").to_vec();
    let eps = 1e-5;
    for (i, g) in grad.iter().enumerate() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[i] += eps;
        down.data_mut()[i] -= eps;
        let fd = (f(&up)? - f(&down)?) / (2.0 * eps);
        println!("dL/dw[{i}]  tape {g:+.8}  central difference {fd:+.8}");
    }
    Ok(())
}
