//! Times full optimization steps for the baseline and both memory
//! variants at the block64 scale and prints the overhead ratios.
//!
//!     cargo run --release -p imm-gpt --example step_timing

use imm_gpt::imm::ImmVariant;
use imm_gpt::model::GPTModel;
use imm_gpt::tokenizer::{TokenDataset, Vocab};
use imm_gpt::train::{preset, profile_step};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");

fn main() {
    let text = std::fs::read_to_string(CORPUS).expect("bundled corpus is readable");
    let vocab = Vocab::from_text(&text);
    let data = TokenDataset::from_text(&text, &vocab).expect("corpus tokenizes");

    let (mut mc, tc) = preset("block64").expect("block64 is a known preset");
    mc.vocab_size = vocab.size();
    let steps = 10;

    println!("{:<16} {:>9} {:>9} {:>9}", "variant", "mean ms", "p50 ms", "p90 ms");
    let mut baseline_mean = 0.0;
    for (label, enabled, variant) in [
        ("baseline", false, ImmVariant::Dense),
        ("memory dense", true, ImmVariant::Dense),
        ("memory lowrank", true, ImmVariant::Lowrank),
    ] {
        let mut cfg = mc.clone();
        cfg.imm_enabled = enabled;
        cfg.imm_variant = variant;
        let mut model = GPTModel::<f32>::new(cfg).expect("config is valid");
        let stats = profile_step(&mut model, &data, &tc, steps).expect("profiling runs");
        println!(
            "{label:<16} {:>9.1} {:>9.1} {:>9.1}",
            stats.mean_ms, stats.p50_ms, stats.p90_ms
        );
        if enabled {
            println!(
                "  -> {:.2}x the baseline step time",
                stats.mean_ms / baseline_mean
            );
        } else {
            baseline_mean = stats.mean_ms;
        }
    }
}
