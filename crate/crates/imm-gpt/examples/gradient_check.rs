//! Checks every analytic gradient of a small memory-equipped model
//! against 64-bit central differences, printing the per-tensor worst
//! relative error.
//!
//!     cargo run --release -p imm-gpt --example gradient_check

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use imm_gpt::gradcheck::{self, ModelBatch};
use imm_gpt::imm::ImmVariant;
use imm_gpt::model::GPTModel;
use imm_gpt::tape::TensorId;

fn main() {
    for variant in [ImmVariant::Dense, ImmVariant::Lowrank] {
        let cfg = gradcheck::verification_model_config(variant);
        let vocab = cfg.vocab_size;
        let mut model = GPTModel::<f64>::new(cfg).expect("verification config is valid");
        // Check at a generic point: the fresh init leaves some gradients
        // too small for finite differences to resolve.
        gradcheck::randomize_params(&mut model, 0.25, 52);

        let named: Vec<(String, TensorId)> =
            model.named_params().map(|(n, id)| (n.to_string(), id)).collect();
        let mut rng = StdRng::seed_from_u64(51);
        let (b, t) = (2, 5);
        let mut prog = ModelBatch {
            model: &mut model,
            tokens: (0..b * t).map(|_| rng.gen_range(0..vocab)).collect(),
            targets: (0..b * t).map(|_| rng.gen_range(0..vocab)).collect(),
            b,
            t,
        };

        // Probe 8 elements per tensor here to stay fast; the gradcheck
        // command and the acceptance suite probe every element.
        let reports = gradcheck::grad_check(&mut prog, &named, 1e-5, Some(8))
            .expect("the loss is deterministic");
        println!("{variant} maps:");
        for r in reports.iter().filter(|r| r.name.contains("imm")) {
            println!("  {:<34} max rel err {:.3e}", r.name, r.max_rel_err);
        }
        let worst = gradcheck::worst(&reports).unwrap();
        println!(
            "  worst of all {} tensors: {} at {:.3e}\n",
            reports.len(),
            worst.name,
            worst.max_rel_err
        );
        assert!(worst.max_rel_err < 1e-4);
    }
}
