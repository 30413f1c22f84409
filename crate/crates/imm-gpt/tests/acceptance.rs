//! Release acceptance suite. Each numbered criterion prints exactly one
//! PASS or FAIL line with its measured numbers; the process exits nonzero
//! if any criterion fails. It runs as a plain binary rather than under the
//! libtest harness so the lines stream in a fixed order and the expensive
//! training reproduction (criterion 7, tens of minutes on one CPU) runs
//! after everything cheap has reported.
//!
//! Run it alone with `cargo test --test acceptance`, or as part of
//! `cargo test --workspace`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use imm_gpt::gradcheck::{
    grad_check, randomize_params, verification_model_config, worst, ModelBatch,
};
use imm_gpt::imm::{self, AffineMap, ImmParams, ImmVariant, MemoryBank, MemoryMode};
use imm_gpt::model::{GPTModel, ModelConfig};
use imm_gpt::tokenizer::{Split, TokenDataset, Vocab};
use imm_gpt::train::{preset, profile_step, train, TrainConfig, Variant};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");

type Criterion = fn() -> Result<String, String>;

fn main() {
    // Criterion 7 trains three full block64 models and dominates the
    // runtime, so it goes last; every line names its own criterion number.
    let criteria: [(u32, &str, Criterion); 9] = [
        (1, "gradients match central differences", c1_gradients),
        (2, "causal memory preserves autoregressive masking", c2_causality),
        (3, "vectorized memory matches sequential reference", c3_equivalence),
        (4, "memory read matches brute-force attention oracle", c4_read_oracle),
        (5, "bank reset isolates forward passes", c5_reset_isolation),
        (6, "untrained loss sits at the uniform level on all presets", c6_init_sanity),
        (8, "memory overhead and factored parameter savings", c8_overhead),
        (9, "replayed training runs produce byte-identical logs", c9_determinism),
        (7, "block64 loss reproduction, baseline vs memory", c7_reproduction),
    ];
    let mut failures = 0;
    for (n, name, f) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}

fn corpus() -> Result<(Vocab, TokenDataset), String> {
    let text = std::fs::read_to_string(CORPUS)
        .map_err(|e| format!("cannot read bundled corpus {CORPUS}: {e}"))?;
    let vocab = Vocab::from_text(&text);
    let data = TokenDataset::from_text(&text, &vocab).map_err(|e| e.to_string())?;
    Ok((vocab, data))
}

// Criterion 1: on the small memory-equipped model (d=8, N=3, k=2) with a
// fixed batch (B=2, T=5) in 64-bit, every parameter's analytic gradient
// matches central differences to within 1e-4 relative error, for both the
// dense and the factored map parameterizations, in under a minute.
fn c1_gradients() -> Result<String, String> {
    let t0 = Instant::now();
    let mut details = Vec::new();
    for variant in [ImmVariant::Dense, ImmVariant::Lowrank] {
        let cfg = verification_model_config(variant);
        let vocab = cfg.vocab_size;
        let mut model = GPTModel::<f64>::new(cfg).map_err(|e| e.to_string())?;
        randomize_params(&mut model, 0.25, 52);
        let named: Vec<(String, _)> = model
            .named_params()
            .map(|(n, id)| (n.to_string(), id))
            .collect();
        let (b, t) = (2usize, 5usize);
        let mut rng = StdRng::seed_from_u64(51);
        let tokens: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
        let targets: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
        let mut prog = ModelBatch {
            model: &mut model,
            tokens,
            targets,
            b,
            t,
        };
        let reports =
            grad_check(&mut prog, &named, 1e-5, None).map_err(|e| format!("{variant}: {e}"))?;
        for needle in ["imm.f_write", "imm.f_query", "imm.g"] {
            if !reports.iter().any(|r| r.name.contains(needle)) {
                return Err(format!("{variant}: no checked parameter matches {needle}"));
            }
        }
        let w = worst(&reports).ok_or("no parameters were checked")?;
        if w.max_rel_err.is_nan() || w.max_rel_err >= 1e-4 {
            return Err(format!(
                "{variant}: {} rel err {:.3e} is not below 1e-4",
                w.name, w.max_rel_err
            ));
        }
        details.push(format!("{variant} worst {:.2e} ({})", w.max_rel_err, w.name));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s, limit is one minute"));
    }
    Ok(details.join(", "))
}

// Criterion 2: with causal memory mode, perturbing tokens at positions
// after a cut leaves logits at and before the cut unchanged to 1e-12 in
// 64-bit, over 50 random inputs.
fn c2_causality() -> Result<String, String> {
    let cfg = verification_model_config(ImmVariant::Dense);
    let vocab = cfg.vocab_size;
    let block = cfg.block_size;
    let mut model = GPTModel::<f64>::new(cfg).map_err(|e| e.to_string())?;
    randomize_params(&mut model, 0.25, 7);
    let mut rng = StdRng::seed_from_u64(8);
    let mut worst_leak = 0.0f64;
    for case in 0..50usize {
        let b = 1 + case % 2;
        let t = rng.gen_range(3..=block);
        let cut = rng.gen_range(0..t - 1);
        let tokens: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
        let mut perturbed = tokens.clone();
        for bi in 0..b {
            for ti in cut + 1..t {
                let idx = bi * t + ti;
                let fresh = rng.gen_range(0..vocab);
                perturbed[idx] = if fresh == perturbed[idx] {
                    (fresh + 1) % vocab
                } else {
                    fresh
                };
            }
        }
        let logits_a = {
            let id = model.forward(&tokens, b, t, None).map_err(|e| e.to_string())?;
            model.tape().data(id).to_vec()
        };
        let logits_b = {
            let id = model
                .forward(&perturbed, b, t, None)
                .map_err(|e| e.to_string())?;
            model.tape().data(id).to_vec()
        };
        for bi in 0..b {
            for ti in 0..=cut {
                let row = (bi * t + ti) * vocab;
                for j in 0..vocab {
                    worst_leak = worst_leak.max((logits_a[row + j] - logits_b[row + j]).abs());
                }
            }
        }
    }
    if worst_leak < 1e-12 {
        Ok(format!("50 random inputs, worst past-logit change {worst_leak:.1e}"))
    } else {
        Err(format!("future tokens moved past logits by {worst_leak:.3e} (limit 1e-12)"))
    }
}

fn random_map(rng: &mut StdRng, d: usize, rank: Option<usize>) -> AffineMap<f64> {
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-0.8..0.8)).collect() };
    match rank {
        None => AffineMap::Dense {
            w: draw(d * d),
            b: draw(d),
        },
        Some(k) => AffineMap::Lowrank {
            u: draw(d * k),
            v: draw(k * d),
            b: draw(d),
        },
    }
}

fn random_imm_params(rng: &mut StdRng, d: usize, rank: Option<usize>, scaled: bool) -> ImmParams<f64> {
    ImmParams {
        f_write: random_map(rng, d, rank),
        f_query: random_map(rng, d, rank),
        g: random_map(rng, d, rank),
        ln_gain: (0..d).map(|_| rng.gen_range(0.5..1.5)).collect(),
        ln_bias: (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        ln_eps: 1e-5,
        scaled_scores: scaled,
    }
}

// Criterion 3: the vectorized memory pass agrees with the position-by-
// position reference to 1e-10 over 25 random instances whose lengths span
// T < N, T = N, and T > 2N, in both memory modes.
fn c3_equivalence() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(23);
    let (d, n) = (12usize, 5usize);
    let mut instances = 0usize;
    let mut worst_diff = 0.0f64;
    for &t in &[2usize, 3, 5, 11, 13] {
        for rep in 0..5usize {
            let b = 1 + rep % 3;
            let rank = if rep % 2 == 1 { Some(3) } else { None };
            let params = random_imm_params(&mut rng, d, rank, rep % 3 == 0);
            let h: Vec<f64> = (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for mode in [MemoryMode::Causal, MemoryMode::Noncausal] {
                let mut bank = MemoryBank::new(b, n, d);
                let seq = imm::apply_sequential(&h, b, t, &mut bank, &params, mode);
                let par = imm::apply_parallel(&h, b, t, n, &params, mode, None);
                for (a, b) in seq.iter().zip(par.iter()) {
                    worst_diff = worst_diff.max((a - b).abs());
                }
            }
            instances += 1;
        }
    }
    if worst_diff <= 1e-10 {
        Ok(format!(
            "{instances} instances (T in 2,3,5,11,13 with N={n}), worst diff {worst_diff:.2e}"
        ))
    } else {
        Err(format!("sequential and vectorized passes differ by {worst_diff:.3e} (limit 1e-10)"))
    }
}

// Independent per-row affine map used by the read oracle, written from the
// definition with plain index arithmetic.
fn naive_map(map: &AffineMap<f64>, x: &[f64]) -> Vec<f64> {
    match map {
        AffineMap::Dense { w, b } => {
            let d = b.len();
            let mut out = b.clone();
            for i in 0..d {
                for j in 0..d {
                    out[j] += x[i] * w[i * d + j];
                }
            }
            out
        }
        AffineMap::Lowrank { u, v, b } => {
            let d = b.len();
            let k = u.len() / d;
            let mut mid = vec![0.0f64; k];
            for i in 0..d {
                for j in 0..k {
                    mid[j] += x[i] * u[i * k + j];
                }
            }
            let mut out = b.clone();
            for j in 0..k {
                for o in 0..d {
                    out[o] += mid[j] * v[j * d + o];
                }
            }
            out
        }
    }
}

// Criterion 4: the memory read agrees to 1e-10 with a from-scratch oracle
// that rebuilds the expected slot contents (round-robin, last write wins,
// untouched slots zero) and runs a plain softmax attention over them.
fn c4_read_oracle() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(41);
    let mut worst_diff = 0.0f64;
    let mut cases = 0usize;
    while cases < 30 {
        let b = rng.gen_range(1..=4usize);
        let n = rng.gen_range(1..=8usize);
        let d = rng.gen_range(2..=16usize);
        let rank = if cases % 2 == 1 {
            Some(rng.gen_range(1..=d.min(4)))
        } else {
            None
        };
        let params = random_imm_params(&mut rng, d, rank, cases.is_multiple_of(3));
        let mut bank = MemoryBank::new(b, n, d);
        let writes = rng.gen_range(0..=n + 2);
        let mut history: Vec<Vec<f64>> = Vec::new();
        for t in 0..writes {
            let h_t: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            imm::write(&mut bank, &h_t, t, &params);
            history.push(h_t);
        }
        let h_q: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = imm::read(&bank, &h_q, &params);
        for bi in 0..b {
            let mut slots = vec![vec![0.0f64; d]; n];
            for (t, h_t) in history.iter().enumerate() {
                slots[t % n] = naive_map(&params.f_write, &h_t[bi * d..(bi + 1) * d]);
            }
            let q = naive_map(&params.f_query, &h_q[bi * d..(bi + 1) * d]);
            let scale = if params.scaled_scores {
                1.0 / (d as f64).sqrt()
            } else {
                1.0
            };
            let scores: Vec<f64> = slots
                .iter()
                .map(|s| scale * s.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = weights.iter().sum();
            let mut want = vec![0.0f64; d];
            for (i, w) in weights.iter().enumerate() {
                for j in 0..d {
                    want[j] += w / z * slots[i][j];
                }
            }
            for j in 0..d {
                worst_diff = worst_diff.max((want[j] - got[bi * d + j]).abs());
            }
        }
        cases += 1;
    }
    if worst_diff <= 1e-10 {
        Ok(format!("{cases} random banks (B<=4, N<=8, d<=16), worst diff {worst_diff:.2e}"))
    } else {
        Err(format!("read deviates from the oracle by {worst_diff:.3e} (limit 1e-10)"))
    }
}

// Criterion 5: repeating a forward pass gives bit-identical logits, and a
// different input run in between does not disturb the repeat. This only
// holds if every bank starts each pass from zeros.
fn c5_reset_isolation() -> Result<String, String> {
    let mut cfg = verification_model_config(ImmVariant::Dense);
    cfg.vocab_size = 29;
    cfg.block_size = 12;
    cfg.n_embd = 16;
    cfg.imm_slots = 4;
    let mut model = GPTModel::<f32>::new(cfg).map_err(|e| e.to_string())?;
    randomize_params(&mut model, 0.25, 5);
    let (b, t) = (2usize, 12usize);
    let mut rng = StdRng::seed_from_u64(6);
    let first: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..29)).collect();
    let other: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..29)).collect();
    let mut bits = |toks: &[usize]| -> Result<Vec<u32>, String> {
        let id = model.forward(toks, b, t, None).map_err(|e| e.to_string())?;
        Ok(model.tape().data(id).iter().map(|v| v.to_bits()).collect())
    };
    let a1 = bits(&first)?;
    let a2 = bits(&first)?;
    if a1 != a2 {
        return Err("back-to-back passes on the same input differ".into());
    }
    bits(&other)?;
    let a3 = bits(&first)?;
    if a1 != a3 {
        return Err("a pass on different input changed a later pass's logits".into());
    }
    Ok(format!(
        "logits bit-identical across repeats and an interleaved pass ({} values)",
        a1.len()
    ))
}

// Criterion 6: a freshly initialized model scores close to the uniform
// prediction level ln(vocab) on every preset. Residual projections are
// scaled down at init, so the untrained logits stay near zero. A model
// with memory enabled renormalizes the stream through each module's own
// layer norm and sits slightly higher by construction; the presets
// themselves (memory off) are what this check pins.
fn c6_init_sanity() -> Result<String, String> {
    let (vocab, data) = corpus()?;
    let target = (vocab.size() as f64).ln();
    let mut parts = Vec::new();
    for name in ["block64", "block128", "block256"] {
        let (mut mc, _) = preset(name).ok_or_else(|| format!("unknown preset {name}"))?;
        mc.vocab_size = vocab.size();
        let mut model = GPTModel::<f32>::new(mc).map_err(|e| e.to_string())?;
        let mut rng = StdRng::seed_from_u64(3);
        let loss = imm_gpt::train::estimate_loss(&mut model, &data, Split::Train, 2, &mut rng)
            .map_err(|e| e.to_string())?;
        if (loss - target).abs() > 0.2 {
            return Err(format!(
                "{name}: untrained loss {loss:.4} vs ln V {target:.4} (band 0.2)"
            ));
        }
        parts.push(format!("{name} {loss:.3}"));
    }
    Ok(format!("ln V {target:.3}; {}", parts.join(", ")))
}

// Criterion 7: on the block64 preset the baseline converges near the
// reference level 1.70 (within 0.25), and the memory model cuts the final
// smoothed train loss by at least 30 percent in at least one memory mode.
// Both modes train and both numbers are reported.
fn c7_reproduction() -> Result<String, String> {
    eprintln!("(criterion 7 trains three block64 models for 2000 steps; expect tens of minutes)");
    let (vocab, data) = corpus()?;
    let (mut mc, tc) = preset("block64").ok_or("unknown preset block64")?;
    mc.vocab_size = vocab.size();
    let mut causal = mc.clone();
    causal.imm_enabled = true;
    causal.imm_memory_mode = MemoryMode::Causal;
    let mut noncausal = causal.clone();
    noncausal.imm_memory_mode = MemoryMode::Noncausal;
    let jobs: Vec<(&str, ModelConfig)> = vec![
        ("baseline", mc),
        ("causal", causal),
        ("noncausal", noncausal),
    ];
    let results: Vec<(String, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(label, cfg)| {
                let data = &data;
                let tc = &tc;
                s.spawn(move || -> Result<(String, f64), String> {
                    let variant = if cfg.imm_enabled {
                        Variant::Imm
                    } else {
                        Variant::Baseline
                    };
                    let mut model = GPTModel::<f32>::new(cfg).map_err(|e| e.to_string())?;
                    let log = train(&mut model, data, tc, variant, None)
                        .map_err(|e| format!("{label}: {e}"))?;
                    Ok((label.to_string(), log.final_summary.final_smoothed_loss))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>, String>>()
    })?;
    let base = results[0].1;
    let reduction = |loss: f64| (base - loss) / base * 100.0;
    let summary = format!(
        "baseline {base:.4}; memory causal {c:.4} ({rc:.1}% lower), noncausal {n:.4} ({rn:.1}% lower)",
        c = results[1].1,
        rc = reduction(results[1].1),
        n = results[2].1,
        rn = reduction(results[2].1),
    );
    if (base - 1.70).abs() > 0.25 {
        return Err(format!("baseline outside 1.70 +/- 0.25: {summary}"));
    }
    let best = results[1..]
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("losses are finite"))
        .expect("two memory runs");
    if reduction(best.1) < 30.0 {
        return Err(format!("no memory mode reaches a 30% reduction: {summary}"));
    }
    Ok(format!("{summary}; best mode {}", best.0))
}

// Criterion 8: one full optimization step with memory costs at most 1.5x
// the baseline step on block64, and the factored parameterization is
// strictly smaller than the dense one at every preset width.
fn c8_overhead() -> Result<String, String> {
    let (vocab, data) = corpus()?;
    let (mut mc, mut tc) = preset("block64").ok_or("unknown preset block64")?;
    mc.vocab_size = vocab.size();
    tc.seed = 11;
    let timed_steps = 8;
    let mut base_model = GPTModel::<f32>::new(mc.clone()).map_err(|e| e.to_string())?;
    let base = profile_step(&mut base_model, &data, &tc, timed_steps).map_err(|e| e.to_string())?;
    let mut mem_mc = mc.clone();
    mem_mc.imm_enabled = true;
    let mut mem_model = GPTModel::<f32>::new(mem_mc).map_err(|e| e.to_string())?;
    let mem = profile_step(&mut mem_model, &data, &tc, timed_steps).map_err(|e| e.to_string())?;
    let ratio = mem.mean_ms / base.mean_ms;
    if ratio > 1.5 {
        return Err(format!(
            "step-time ratio {ratio:.3} over the 1.5 limit (memory {:.1}ms vs baseline {:.1}ms)",
            mem.mean_ms, base.mean_ms
        ));
    }
    for d in [128usize, 256, 512] {
        let k = imm::num_slots(d);
        let dense = imm::param_count(ImmVariant::Dense, d, k);
        let lowrank = imm::param_count(ImmVariant::Lowrank, d, k);
        if lowrank >= dense {
            return Err(format!(
                "lowrank params {lowrank} not below dense {dense} at d={d} (k={k})"
            ));
        }
    }
    Ok(format!(
        "step-time ratio {ratio:.3} (memory {:.1}ms vs baseline {:.1}ms); lowrank params below dense at d=128,256,512",
        mem.mean_ms, base.mean_ms
    ))
}

// Criterion 9: replaying one manifest twice through the real binary with
// kernel parallelism pinned to one thread yields byte-identical log.csv
// files.
fn c9_determinism() -> Result<String, String> {
    let bin = env!("CARGO_BIN_EXE_imm-gpt");
    let (vocab, _) = corpus()?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mc = ModelConfig {
        vocab_size: vocab.size(),
        block_size: 32,
        n_layer: 2,
        n_head: 2,
        n_embd: 32,
        imm_enabled: true,
        imm_slots: 5,
        imm_rank: 5,
        seed: 31,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 4,
        max_iters: 30,
        warmup_iters: 5,
        lr_decay_iters: 30,
        eval_interval: 10,
        eval_iters: 2,
        seed: 17,
        ..TrainConfig::default()
    };
    let manifest = imm_gpt::cli::RunManifest {
        tool: "imm-gpt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "train".into(),
        started_unix_ms: 0,
        corpus: CORPUS.into(),
        out_dir: String::new(),
        model: mc,
        train: tc,
        compare_modes: None,
    };
    let mpath = tmp.path().join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| e.to_string())?;
    let run = |out: &std::path::Path| -> Result<Vec<u8>, String> {
        let output = Command::new(bin)
            .args([
                "train",
                "--manifest",
                mpath.to_str().expect("utf-8 temp path"),
                "--out",
                out.to_str().expect("utf-8 temp path"),
            ])
            .env("IMM_GPT_THREADS", "1")
            .output()
            .map_err(|e| format!("spawning {bin}: {e}"))?;
        if !output.status.success() {
            return Err(format!(
                "train exited with {:?}: {}",
                output.status.code(),
                String::from_utf8_lossy(&output.stderr)
            ));
        }
        std::fs::read(out.join("log.csv")).map_err(|e| format!("reading log.csv: {e}"))
    };
    let first = run(&tmp.path().join("a"))?;
    let second = run(&tmp.path().join("b"))?;
    if first == second {
        Ok(format!("two replayed runs, {}-byte logs identical", first.len()))
    } else {
        let at = first
            .iter()
            .zip(second.iter())
            .position(|(a, b)| a != b)
            .unwrap_or(first.len().min(second.len()));
        Err(format!("log.csv files differ at byte {at}"))
    }
}
