//! Shows the slot bank's mechanics directly: round-robin writes, softmax
//! reads over all slots, causal versus noncausal visibility, and the
//! agreement between the position-by-position loop and the vectorized
//! kernel the model actually trains through.
//!
//!     cargo run --release -p imm-gpt --example memory_bank

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use imm_gpt::imm::{
    apply_parallel, apply_sequential, visible_source, AffineMap, ImmParams, MemoryBank, MemoryMode,
};

fn identity_params(d: usize) -> ImmParams<f64> {
    let eye = |scale: f64| {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = scale;
        }
        AffineMap::Dense { w, b: vec![0.0; d] }
    };
    ImmParams {
        f_write: eye(1.0),
        f_query: eye(1.0),
        g: eye(1.0),
        ln_gain: vec![1.0; d],
        ln_bias: vec![0.0; d],
        ln_eps: 1e-5,
        scaled_scores: false,
    }
}

fn main() {
    let (slots, d) = (3, 4);
    let params = identity_params(d);
    let mut bank = MemoryBank::<f64>::new(1, slots, d);

    // Positions 0..5 write round-robin: position t lands in slot t % 3,
    // so positions 3 and 4 overwrite what 0 and 1 left.
    for t in 0..5 {
        let mut h = vec![0.0; d];
        h[t % d] = 1.0 + t as f64;
        imm_gpt::imm::write(&mut bank, &h, t, &params);
        println!("after write t={t}: slot {} holds {:?}", t % slots, bank.slot(0, t % slots));
    }

    // A read attends over every slot with plain dot-product softmax.
    let mut query = vec![0.0; d];
    query[3] = 2.0;
    let r = imm_gpt::imm::read(&bank, &query, &params);
    println!("read with query {query:?} -> {r:?}");

    // Visibility rule used by the vectorized kernel: which position's
    // write does position ti see in slot i, for a 6-position sequence?
    println!("\nvisibility (seq len 6, 3 slots), causal then noncausal:");
    for mode in [MemoryMode::Causal, MemoryMode::Noncausal] {
        for ti in [0, 2, 5] {
            let seen: Vec<String> = (0..slots)
                .map(|i| match visible_source(ti, i, 6, slots, mode) {
                    Some(src) => format!("t{src}"),
                    None => "zero".into(),
                })
                .collect();
            println!("  {mode:<9} position {ti}: slots hold [{}]", seen.join(", "));
        }
    }

    // The literal loop and the fused kernel agree to roundoff on random
    // parameters, in both modes.
    let mut rng = StdRng::seed_from_u64(11);
    let (b, t) = (2, 7);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect() };
    let random = ImmParams {
        f_write: AffineMap::Dense { w: draw(d * d), b: draw(d) },
        f_query: AffineMap::Dense { w: draw(d * d), b: draw(d) },
        g: AffineMap::Dense { w: draw(d * d), b: draw(d) },
        ln_gain: draw(d),
        ln_bias: draw(d),
        ln_eps: 1e-5,
        scaled_scores: false,
    };
    let h = draw(b * t * d);
    for mode in [MemoryMode::Causal, MemoryMode::Noncausal] {
        let mut bank = MemoryBank::new(b, slots, d);
        let slow = apply_sequential(&h, b, t, &mut bank, &random, mode);
        let fast = apply_parallel(&h, b, t, slots, &random, mode, None);
        let max_diff = slow
            .iter()
            .zip(fast.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!("\n{mode} mode: sequential vs vectorized max |diff| = {max_diff:.2e}");
        assert!(max_diff < 1e-10);
    }
}
