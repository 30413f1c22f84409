//! Trains a small memory-equipped model for a few hundred steps on the
//! bundled corpus and prints the loss trajectory.
//!
//!     cargo run --release -p imm-gpt --example train_tiny

use imm_gpt::model::{GPTModel, ModelConfig};
use imm_gpt::tokenizer::{Split, TokenDataset, Vocab};
use imm_gpt::train::{train, TrainConfig, Variant};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");

fn main() {
    let text = std::fs::read_to_string(CORPUS).expect("bundled corpus is readable");
    let vocab = Vocab::from_text(&text);
    let data = TokenDataset::from_text(&text, &vocab).expect("corpus tokenizes");

    let mc = ModelConfig {
        vocab_size: vocab.size(),
        block_size: 32,
        n_layer: 2,
        n_head: 2,
        n_embd: 64,
        imm_enabled: true,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 8,
        max_iters: 300,
        lr_decay_iters: 300,
        warmup_iters: 30,
        eval_interval: 50,
        eval_iters: 10,
        ..TrainConfig::default()
    };

    let mut model = GPTModel::<f32>::new(mc).expect("config is valid");
    println!(
        "{} parameters, vocab {}, {} train tokens",
        model.count_params().total,
        vocab.size(),
        data.split_len(Split::Train)
    );

    let mut first = None;
    let mut on_record = |r: &imm_gpt::train::TrainRecord| {
        if r.split == Split::Train {
            first.get_or_insert(r.smoothed_loss);
            println!("step {:>4} | train {:.4} | lr {:.2e}", r.step, r.smoothed_loss, r.lr);
        } else {
            println!("step {:>4} |   val {:.4}", r.step, r.smoothed_loss);
        }
    };
    let log = train(&mut model, &data, &tc, Variant::Imm, Some(&mut on_record))
        .expect("training stays finite");

    let last = log.final_summary.final_smoothed_loss;
    println!(
        "loss {:.4} -> {:.4} over {} iters ({:.1} s)",
        first.unwrap(),
        last,
        tc.max_iters,
        log.final_summary.total_s
    );
    assert!(last < first.unwrap(), "loss should fall from its starting value");
}
