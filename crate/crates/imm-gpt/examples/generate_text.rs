//! Trains briefly, saves a checkpoint, reloads it, and samples text two
//! ways: greedy argmax (deterministic) and temperature sampling.
//!
//!     cargo run --release -p imm-gpt --example generate_text

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use imm_gpt::checkpoint;
use imm_gpt::model::{GPTModel, ModelConfig};
use imm_gpt::tokenizer::{TokenDataset, Vocab};
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
        max_iters: 400,
        lr_decay_iters: 400,
        warmup_iters: 40,
        eval_interval: 200,
        eval_iters: 5,
        ..TrainConfig::default()
    };
    let mut model = GPTModel::<f32>::new(mc).expect("config is valid");
    println!("training {} params for {} iters...", model.count_params().total, tc.max_iters);
    let log = train(&mut model, &data, &tc, Variant::Imm, None).expect("training stays finite");
    println!("final smoothed train loss {:.4}", log.final_summary.final_smoothed_loss);

    let dir = std::env::temp_dir().join("imm-gpt-example");
    std::fs::create_dir_all(&dir).expect("temp dir is writable");
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &vocab, &path).expect("checkpoint writes");
    let (mut reloaded, vocab) = checkpoint::load::<f32>(&path).expect("checkpoint reads back");
    println!("checkpoint round-tripped through {}", path.display());

    let prompt = "And the ";
    let ids: Vec<usize> =
        vocab.encode(prompt).expect("prompt uses corpus characters").iter().map(|&i| i as usize).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let greedy = reloaded.generate(&ids, 160, 1.0, 1, &mut rng).expect("generation succeeds");
    let greedy: Vec<u32> = greedy.iter().map(|&i| i as u32).collect();
    println!("\n--- greedy (top_k=1) ---\n{}", vocab.decode(&greedy).unwrap());

    let sampled = reloaded.generate(&ids, 160, 0.8, 40, &mut rng).expect("generation succeeds");
    let sampled: Vec<u32> = sampled.iter().map(|&i| i as u32).collect();
    println!("\n--- sampled (temperature 0.8, top_k=40) ---\n{}", vocab.decode(&sampled).unwrap());
}
