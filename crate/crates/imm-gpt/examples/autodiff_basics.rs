//! Walks the reverse-mode tape through a two-layer computation by hand:
//! parameters in, loss out, one backward sweep, and a finite-difference
//! probe confirming an analytic gradient.
//!
//!     cargo run --release -p imm-gpt --example autodiff_basics

use imm_gpt::tape::Tape;

fn main() {
    let mut tape = Tape::<f64>::new();

    // A 3 -> 4 affine map into gelu, then 4 -> 2 logits, cross-entropy on
    // two rows. Parameters must exist before freeze_params so they survive
    // tape resets between forward passes.
    let w1 = tape.param((0..12).map(|i| (i as f64 * 0.37).sin() * 0.5).collect(), &[3, 4]);
    let b1 = tape.param(vec![0.1, -0.2, 0.05, 0.0], &[4]);
    let w2 = tape.param((0..8).map(|i| (i as f64 * 0.61).cos() * 0.5).collect(), &[4, 2]);
    let b2 = tape.param(vec![0.0, 0.0], &[2]);
    tape.freeze_params();

    let forward = |tape: &mut Tape<f64>| {
        let x = tape.constant(vec![0.2, -0.4, 0.9, 1.1, 0.0, -0.7], &[2, 3]);
        let h = tape.linear(x, w1, Some(b1)).unwrap();
        let h = tape.gelu(h);
        let logits = tape.linear(h, w2, Some(b2)).unwrap();
        tape.cross_entropy(logits, &[1, 0]).unwrap()
    };

    let loss = forward(&mut tape);
    println!("loss = {:.6}", tape.value(loss));

    tape.backward(loss).unwrap();
    let analytic = tape.grad(w1)[5];
    println!("analytic dloss/dw1[5] = {analytic:+.9}");

    // Central difference at the same element. reset() drops everything
    // after the parameter boundary, so the next forward reuses the nudged
    // parameters.
    let eps = 1e-6;
    let original = tape.data(w1)[5];
    tape.data_mut(w1)[5] = original + eps;
    tape.reset();
    let up = forward(&mut tape);
    let up = tape.value(up);
    tape.data_mut(w1)[5] = original - eps;
    tape.reset();
    let down = forward(&mut tape);
    let down = tape.value(down);
    tape.data_mut(w1)[5] = original;

    let numeric = (up - down) / (2.0 * eps);
    println!("numeric  dloss/dw1[5] = {numeric:+.9}");
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
    println!("relative error = {rel:.3e}");
    assert!(rel < 1e-7, "tape gradient disagrees with the finite difference");

    println!("tape holds {} parameter tensors; activations are discarded on reset", tape.num_params());
}
