//! Trains a baseline and a memory-equipped twin on the same data stream
//! and reports the final losses side by side. A desk-scale version of the
//! compare command; the full-size reproduction uses the block64 preset.
//!
//!     cargo run --release -p imm-gpt --example compare_memory

use imm_gpt::imm::MemoryMode;
use imm_gpt::model::{GPTModel, ModelConfig};
use imm_gpt::tokenizer::{TokenDataset, Vocab};
use imm_gpt::train::{train, TrainConfig, Variant};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");

fn main() {
    let text = std::fs::read_to_string(CORPUS).expect("bundled corpus is readable");
    let vocab = Vocab::from_text(&text);
    let data = TokenDataset::from_text(&text, &vocab).expect("corpus tokenizes");

    let base = ModelConfig {
        vocab_size: vocab.size(),
        block_size: 32,
        n_layer: 2,
        n_head: 2,
        n_embd: 64,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 8,
        max_iters: 400,
        lr_decay_iters: 400,
        warmup_iters: 40,
        eval_interval: 100,
        eval_iters: 8,
        ..TrainConfig::default()
    };

    let mut results = Vec::new();
    for (label, imm_enabled, mode) in [
        ("baseline", false, MemoryMode::Causal),
        ("memory causal", true, MemoryMode::Causal),
        ("memory noncausal", true, MemoryMode::Noncausal),
    ] {
        let mc = ModelConfig { imm_enabled, imm_memory_mode: mode, ..base.clone() };
        let mut model = GPTModel::<f32>::new(mc).expect("config is valid");
        let variant = if imm_enabled { Variant::Imm } else { Variant::Baseline };
        // Same train seed everywhere: all three see identical batches.
        let log = train(&mut model, &data, &tc, variant, None).expect("training stays finite");
        let loss = log.final_summary.final_smoothed_loss;
        println!("{label:<17} final smoothed train loss {loss:.4}");
        results.push((label, loss));
    }

    let base_loss = results[0].1;
    for (label, loss) in &results[1..] {
        println!(
            "{label:<17} reduces the baseline by {:.1}%",
            (base_loss - loss) / base_loss * 100.0
        );
    }
}
