//! Builds a character vocabulary from the bundled corpus, round-trips a
//! sentence through encode/decode, and samples a training batch.
//!
//!     cargo run --release -p imm-gpt --example build_vocab

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use imm_gpt::tokenizer::{Split, TokenDataset, Vocab};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");

fn main() {
    let text = std::fs::read_to_string(CORPUS).expect("bundled corpus is readable");
    let vocab = Vocab::from_text(&text);
    println!("corpus: {} chars, vocabulary: {} distinct", text.len(), vocab.size());

    let sample = "Call me Ishmael.";
    let ids = vocab.encode(sample).expect("sample uses corpus characters");
    let back = vocab.decode(&ids).expect("ids come from this vocab");
    println!("encode {sample:?} -> {ids:?}");
    assert_eq!(back, sample, "decode inverts encode");

    let json = vocab.to_json();
    let reloaded = Vocab::from_json(&json).expect("round-trip through JSON");
    assert_eq!(reloaded.size(), vocab.size());
    println!("vocab JSON round-trips ({} bytes)", json.len());

    // The first 90% of characters train, the last 10% validate.
    let data = TokenDataset::from_text(&text, &vocab).expect("corpus tokenizes");
    println!(
        "dataset: {} tokens ({} train / {} val)",
        data.len(),
        data.split_len(Split::Train),
        data.split_len(Split::Val)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, t) = (4, 16);
    let (xs, ys) = data.sample_batch(Split::Train, b, t, &mut rng).expect("corpus is long enough");
    assert_eq!(xs.len(), b * t);
    assert_eq!(ys.len(), b * t);
    // Targets are the inputs shifted left by one position.
    assert_eq!(&xs[1..t], &ys[..t - 1]);
    let row: Vec<u32> = xs[..t].iter().map(|&i| i as u32).collect();
    println!("one sampled row decodes to {:?}", vocab.decode(&row).unwrap());
}
