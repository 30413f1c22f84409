//! Command-line front door: train single models, run baseline-vs-memory
//! comparisons, check gradients, sample text, and profile step overhead.
//!
//! Every flag is parsed by hand; configuration resolves preset -> JSON
//! config file -> individual flags, and each training run writes a
//! manifest first so it can be replayed exactly with `--manifest`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::gradcheck::{self, ModelBatch};
use crate::imm::{self, BankScope, ImmVariant, MemoryMode};
use crate::model::{GPTModel, ModelConfig};
use crate::threads;
use crate::tokenizer::{Split, TokenDataset, Vocab};
use crate::train::{
    self, preset, profile_step, train as run_training, StepStats, TrainConfig, TrainError,
    TrainRecord, TrainingLog, Variant,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_NUMERIC_ABORT: i32 = 3;

/// A terminal failure: message for stderr plus the process exit code.
#[derive(Debug)]
struct CliError {
    code: i32,
    msg: String,
}

fn bad_input(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_BAD_INPUT, msg: msg.into() }
}

fn check_failed(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_CHECK_FAILED, msg: msg.into() }
}

fn from_train_error(e: TrainError) -> CliError {
    let code = match e {
        TrainError::NonFinite { .. } => EXIT_NUMERIC_ABORT,
        _ => EXIT_BAD_INPUT,
    };
    CliError { code, msg: e.to_string() }
}

/// Entry point for the binary: dispatches on the first argument and turns
/// errors into exit codes (0 success, 1 check failure, 2 bad input,
/// 3 numeric abort).
pub fn run(args: &[String]) -> i32 {
    let result = match args.first().map(String::as_str) {
        None | Some("-h") | Some("--help") | Some("help") => {
            print!("{}", usage());
            return EXIT_OK;
        }
        Some("train") => parse_flags(&args[1..]).and_then(|f| cmd_train(&f)),
        Some("compare") => parse_flags(&args[1..]).and_then(|f| cmd_compare(&f)),
        Some("gradcheck") => parse_flags(&args[1..]).and_then(|f| cmd_gradcheck(&f)),
        Some("sample") => parse_flags(&args[1..]).and_then(|f| cmd_sample(&f)),
        Some("profile") => parse_flags(&args[1..]).and_then(|f| cmd_profile(&f)),
        Some(other) => Err(bad_input(format!(
            "unknown command '{other}' (expected train, compare, gradcheck, sample, or profile)"
        ))),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

fn usage() -> String {
    "usage: imm-gpt <command> [flags]

commands:
  train      train one model; writes log.csv, model.ckpt, manifest.json
  compare    train a baseline and memory-equipped models on shared data
  gradcheck  verify analytic gradients against central differences
  sample     generate text from a saved checkpoint
  profile    time optimization steps for baseline and memory variants

flags:
  --corpus PATH       character corpus text file (train, compare, profile)
  --preset NAME       block64 | block128 | block256 (default block64)
  --imm MODE          off | dense | lowrank (train defaults to off;
                      compare and profile need a variant, default dense)
  --memory-mode MODE  causal | noncausal (default causal; compare runs
                      both when the flag is absent)
  --bank-scope SCOPE  per_layer | shared (default per_layer)
  --slots N           memory slots per bank (defaults: dense 16,
                      lowrank floor(sqrt(n_embd)))
  --rank K            factorization rank (default floor(sqrt(n_embd)))
  --seed S            parameter-init and data seed (default 1337)
  --out DIR           output directory (default runs/<command>)
  --config FILE       JSON {\"model\": {..}, \"train\": {..}} overriding the preset
  --manifest FILE     replay a recorded run; only --out may accompany it
  --steps N           max_iters override (train, compare) or timed sample
                      count (profile, default 30)
  --tolerance T       gradcheck pass threshold (default 1e-4)
  --variant V         gradcheck map parameterization: dense | lowrank
  --ckpt PATH         checkpoint to sample from
  --prompt TEXT       sampling prompt (default: a newline)
  --max-new N         tokens to generate (default 200)
  --top-k K           sample from the K most likely tokens (0 all, 1 argmax)
  --temperature T     logit divisor for sampling (default 1.0)

environment:
  IMM_GPT_THREADS     caps kernel threads; set to 1 for bit-identical runs

exit codes: 0 success, 1 check failure, 2 bad input, 3 numeric abort
"
    .to_string()
}

// ---- flag parsing ----------------------------------------------------------

#[derive(Debug, Default, Clone)]
struct Flags {
    corpus: Option<String>,
    preset: Option<String>,
    imm: Option<String>,
    memory_mode: Option<String>,
    bank_scope: Option<String>,
    slots: Option<usize>,
    rank: Option<usize>,
    seed: Option<u64>,
    out: Option<String>,
    config: Option<String>,
    manifest: Option<String>,
    steps: Option<usize>,
    tolerance: Option<f64>,
    variant: Option<String>,
    ckpt: Option<String>,
    prompt: Option<String>,
    max_new: Option<usize>,
    top_k: Option<usize>,
    temperature: Option<f64>,
}

fn parse_flags(args: &[String]) -> Result<Flags, CliError> {
    let mut flags = Flags::default();
    let mut it = args.iter();
    while let Some(name) = it.next() {
        let mut value = || {
            it.next()
                .cloned()
                .ok_or_else(|| bad_input(format!("flag {name} expects a value")))
        };
        match name.as_str() {
            "--corpus" => flags.corpus = Some(value()?),
            "--preset" => flags.preset = Some(value()?),
            "--imm" => flags.imm = Some(value()?),
            "--memory-mode" => flags.memory_mode = Some(value()?),
            "--bank-scope" => flags.bank_scope = Some(value()?),
            "--slots" => flags.slots = Some(parse_num(name, &value()?)?),
            "--rank" => flags.rank = Some(parse_num(name, &value()?)?),
            "--seed" => flags.seed = Some(parse_num(name, &value()?)?),
            "--out" => flags.out = Some(value()?),
            "--config" => flags.config = Some(value()?),
            "--manifest" => flags.manifest = Some(value()?),
            "--steps" => flags.steps = Some(parse_num(name, &value()?)?),
            "--tolerance" => flags.tolerance = Some(parse_num(name, &value()?)?),
            "--variant" => flags.variant = Some(value()?),
            "--ckpt" => flags.ckpt = Some(value()?),
            "--prompt" => flags.prompt = Some(value()?),
            "--max-new" => flags.max_new = Some(parse_num(name, &value()?)?),
            "--top-k" => flags.top_k = Some(parse_num(name, &value()?)?),
            "--temperature" => flags.temperature = Some(parse_num(name, &value()?)?),
            other => return Err(bad_input(format!("unknown flag '{other}' (see --help)"))),
        }
    }
    Ok(flags)
}

fn parse_num<T: std::str::FromStr>(flag: &str, raw: &str) -> Result<T, CliError> {
    raw.parse()
        .map_err(|_| bad_input(format!("flag {flag} got unparseable value '{raw}'")))
}

fn parse_memory_mode(raw: &str) -> Result<MemoryMode, CliError> {
    match raw {
        "causal" => Ok(MemoryMode::Causal),
        "noncausal" => Ok(MemoryMode::Noncausal),
        other => Err(bad_input(format!(
            "--memory-mode expects causal or noncausal, got '{other}'"
        ))),
    }
}

fn parse_bank_scope(raw: &str) -> Result<BankScope, CliError> {
    match raw {
        "per_layer" => Ok(BankScope::PerLayer),
        "shared" => Ok(BankScope::Shared),
        other => Err(bad_input(format!(
            "--bank-scope expects per_layer or shared, got '{other}'"
        ))),
    }
}

// ---- configuration resolution ----------------------------------------------

/// Layers one JSON object's keys over a serializable config and
/// deserializes the result, so unknown keys are rejected with the struct's
/// own error message.
fn overlay<T>(base: &T, patch: &serde_json::Value, section: &str) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut merged = serde_json::to_value(base)
        .map_err(|e| bad_input(format!("internal serialization failure: {e}")))?;
    let patch_obj = patch
        .as_object()
        .ok_or_else(|| bad_input(format!("config section \"{section}\" must be a JSON object")))?;
    let merged_obj = merged.as_object_mut().expect("configs serialize to objects");
    for (k, v) in patch_obj {
        merged_obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(merged)
        .map_err(|e| bad_input(format!("config section \"{section}\": {e}")))
}

/// Applies preset, optional config file, then flags, in that order. Slot
/// and rank defaults depend on the chosen variant, so they resolve last
/// unless something set them explicitly.
fn resolve_configs(flags: &Flags) -> Result<(ModelConfig, TrainConfig), CliError> {
    let preset_name = flags.preset.as_deref().unwrap_or("block64");
    let (mut mc, mut tc) = preset(preset_name).ok_or_else(|| {
        bad_input(format!(
            "unknown preset '{preset_name}' (expected block64, block128, or block256)"
        ))
    })?;

    let mut json_set_slots = false;
    let mut json_set_rank = false;
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .map_err(|e| bad_input(format!("cannot read config file {path}: {e}")))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| bad_input(format!("config file {path} is not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| bad_input(format!("config file {path} must hold a JSON object")))?;
        for key in obj.keys() {
            if key != "model" && key != "train" {
                return Err(bad_input(format!(
                    "config file {path} has unknown section \"{key}\" (expected \"model\" and/or \"train\")"
                )));
            }
        }
        if let Some(patch) = obj.get("model") {
            json_set_slots = patch.get("imm_slots").is_some();
            json_set_rank = patch.get("imm_rank").is_some();
            mc = overlay(&mc, patch, "model")?;
        }
        if let Some(patch) = obj.get("train") {
            tc = overlay(&tc, patch, "train")?;
        }
    }

    let mut variant_flagged = false;
    if let Some(choice) = &flags.imm {
        match choice.as_str() {
            "off" => mc.imm_enabled = false,
            "dense" => {
                mc.imm_enabled = true;
                mc.imm_variant = ImmVariant::Dense;
                variant_flagged = true;
            }
            "lowrank" => {
                mc.imm_enabled = true;
                mc.imm_variant = ImmVariant::Lowrank;
                variant_flagged = true;
            }
            other => {
                return Err(bad_input(format!(
                    "--imm expects off, dense, or lowrank, got '{other}'"
                )))
            }
        }
    }
    if let Some(raw) = &flags.memory_mode {
        mc.imm_memory_mode = parse_memory_mode(raw)?;
    }
    if let Some(raw) = &flags.bank_scope {
        mc.imm_bank_scope = parse_bank_scope(raw)?;
    }
    if let Some(seed) = flags.seed {
        mc.seed = seed;
        tc.seed = seed;
    }
    if let Some(slots) = flags.slots {
        mc.imm_slots = slots;
    } else if variant_flagged && !json_set_slots {
        mc.imm_slots = match mc.imm_variant {
            ImmVariant::Dense => 16,
            ImmVariant::Lowrank => imm::num_slots(mc.n_embd),
        };
    }
    if let Some(rank) = flags.rank {
        mc.imm_rank = rank;
    } else if variant_flagged && !json_set_rank {
        mc.imm_rank = imm::num_slots(mc.n_embd);
    }
    if let Some(steps) = flags.steps {
        tc.max_iters = steps;
    }

    mc.validate().map_err(|e| bad_input(e.to_string()))?;
    tc.validate().map_err(|e| bad_input(e.to_string()))?;
    for w in tc.warnings() {
        eprintln!("warning: {w}");
    }
    Ok((mc, tc))
}

// ---- manifests ---------------------------------------------------------------

/// Everything needed to rerun a training command: the fully resolved
/// configs plus where the data came from and where outputs went. Written
/// to the output directory before the first optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub started_unix_ms: u64,
    pub corpus: String,
    pub out_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Memory modes a compare run trains, in order; absent for plain runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_modes: Option<Vec<MemoryMode>>,
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn load_manifest(path: &str) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| bad_input(format!("cannot read manifest {path}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| bad_input(format!("manifest {path}: {e}")))
}

fn write_manifest(man: &RunManifest, out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| bad_input(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(man)
        .map_err(|e| bad_input(format!("manifest serialization failed: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| bad_input(format!("cannot write {}: {e}", path.display())))
}

/// Replay mode forbids every knob the manifest already pins down.
fn reject_flags_beside_manifest(flags: &Flags) -> Result<(), CliError> {
    let pinned = [
        ("--corpus", flags.corpus.is_some()),
        ("--preset", flags.preset.is_some()),
        ("--imm", flags.imm.is_some()),
        ("--memory-mode", flags.memory_mode.is_some()),
        ("--bank-scope", flags.bank_scope.is_some()),
        ("--slots", flags.slots.is_some()),
        ("--rank", flags.rank.is_some()),
        ("--seed", flags.seed.is_some()),
        ("--config", flags.config.is_some()),
        ("--steps", flags.steps.is_some()),
    ];
    for (name, present) in pinned {
        if present {
            return Err(bad_input(format!(
                "{name} conflicts with --manifest; a manifest replays the recorded run exactly (only --out may be added)"
            )));
        }
    }
    Ok(())
}

// ---- shared data loading -----------------------------------------------------

/// Reads the corpus, builds the vocabulary, and fixes the model's vocab
/// size. A replayed manifest must see the same vocabulary it recorded.
fn load_corpus(
    path: &str,
    mc: &mut ModelConfig,
    expected_vocab: Option<usize>,
) -> Result<(Vocab, TokenDataset), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| bad_input(format!("cannot read corpus {path}: {e}")))?;
    let vocab = Vocab::from_text(&text);
    let data = TokenDataset::from_text(&text, &vocab)
        .map_err(|e| bad_input(format!("corpus {path}: {e}")))?;
    let need = mc.block_size + 1;
    if data.split_len(Split::Train) < need || data.split_len(Split::Val) < need {
        return Err(bad_input(format!(
            "corpus {path} is too short: both the 90% train and 10% val splits need at least {need} characters for block_size {}",
            mc.block_size
        )));
    }
    if let Some(expected) = expected_vocab {
        if vocab.size() != expected {
            return Err(bad_input(format!(
                "corpus {path} has {} distinct characters but the manifest recorded {expected}; the file changed since the original run",
                vocab.size()
            )));
        }
    }
    mc.vocab_size = vocab.size();
    Ok((vocab, data))
}

fn variant_of(mc: &ModelConfig) -> Variant {
    if mc.imm_enabled {
        Variant::Imm
    } else {
        Variant::Baseline
    }
}

fn print_run_header(label: &str, mc: &ModelConfig, tc: &TrainConfig, corpus: &str) {
    let counts = ParamPreview::from_config(mc);
    println!(
        "{label}: {} params ({} embedding, {} core/layer, {} memory/layer), vocab {}, block {}, {} layers, corpus {corpus}",
        counts.total, counts.embedding, counts.per_layer_core, counts.per_layer_imm, mc.vocab_size, mc.block_size, mc.n_layer
    );
    println!(
        "{label}: {} iters, batch {}, lr {:.1e} -> {:.1e}, {} kernel threads",
        tc.max_iters,
        tc.batch_size,
        tc.lr_max,
        tc.lr_min,
        threads::kernel_threads()
    );
}

/// Parameter counts computed from the configuration alone, so headers can
/// print before any model is built.
struct ParamPreview {
    embedding: usize,
    per_layer_core: usize,
    per_layer_imm: usize,
    total: usize,
}

impl ParamPreview {
    fn from_config(mc: &ModelConfig) -> ParamPreview {
        let d = mc.n_embd;
        let embedding = mc.vocab_size * d + mc.block_size * d;
        let per_layer_core = 12 * d * d + 13 * d;
        let per_layer_imm = if mc.imm_enabled {
            imm::param_count(mc.imm_variant, d, mc.imm_rank)
        } else {
            0
        };
        let total = embedding + mc.n_layer * (per_layer_core + per_layer_imm) + 2 * d;
        ParamPreview { embedding, per_layer_core, per_layer_imm, total }
    }
}

/// Prints progress lines, timing the stretch since the previous record
/// itself because log records deliberately carry no wall-clock data.
struct RecordPrinter {
    prefix: String,
    last: Instant,
}

impl RecordPrinter {
    fn new(prefix: impl Into<String>) -> RecordPrinter {
        RecordPrinter { prefix: prefix.into(), last: Instant::now() }
    }

    fn print(&mut self, r: &TrainRecord) {
        match r.split {
            Split::Train => println!(
                "{}step {:>5} | train loss {:.4} (raw {:.4}) | lr {:.2e} | {:6.1} s",
                self.prefix,
                r.step,
                r.smoothed_loss,
                r.raw_loss,
                r.lr,
                self.last.elapsed().as_secs_f64()
            ),
            Split::Val => {
                println!("{}step {:>5} |   val loss {:.4}", self.prefix, r.step, r.smoothed_loss)
            }
        }
        self.last = Instant::now();
    }
}

// ---- train -------------------------------------------------------------------

fn cmd_train(flags: &Flags) -> Result<i32, CliError> {
    let (mut mc, tc, corpus_path, expected_vocab) = if let Some(mpath) = &flags.manifest {
        reject_flags_beside_manifest(flags)?;
        let man = load_manifest(mpath)?;
        if man.command != "train" {
            return Err(bad_input(format!(
                "manifest {mpath} records a '{}' run, not 'train'",
                man.command
            )));
        }
        let expected = man.model.vocab_size;
        (man.model, man.train, man.corpus, Some(expected))
    } else {
        let (mc, tc) = resolve_configs(flags)?;
        let corpus = flags
            .corpus
            .clone()
            .ok_or_else(|| bad_input("--corpus PATH is required (or replay with --manifest)"))?;
        (mc, tc, corpus, None)
    };

    let out_dir = PathBuf::from(flags.out.as_deref().unwrap_or("runs/train"));
    let (vocab, data) = load_corpus(&corpus_path, &mut mc, expected_vocab)?;

    let man = RunManifest {
        tool: "imm-gpt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "train".into(),
        started_unix_ms: now_unix_ms(),
        corpus: corpus_path.clone(),
        out_dir: out_dir.display().to_string(),
        model: mc.clone(),
        train: tc.clone(),
        compare_modes: None,
    };
    write_manifest(&man, &out_dir)?;

    let variant = variant_of(&mc);
    let mut model =
        GPTModel::<f32>::new(mc.clone()).map_err(|e| bad_input(e.to_string()))?;
    print_run_header(&variant.to_string(), &mc, &tc, &corpus_path);

    let started = Instant::now();
    let mut printer = RecordPrinter::new("");
    let mut on_record = |r: &TrainRecord| printer.print(r);
    let log = run_training(&mut model, &data, &tc, variant, Some(&mut on_record))
        .map_err(from_train_error)?;

    let csv_path = out_dir.join("log.csv");
    fs::write(&csv_path, log.to_csv_string())
        .map_err(|e| bad_input(format!("cannot write {}: {e}", csv_path.display())))?;
    let ckpt_path = out_dir.join("model.ckpt");
    checkpoint::save(&model, &vocab, &ckpt_path).map_err(|e| bad_input(e.to_string()))?;

    println!(
        "done: final smoothed train loss {:.4} after {} iters in {:.1} s",
        log.final_summary.final_smoothed_loss,
        tc.max_iters,
        started.elapsed().as_secs_f64()
    );
    println!(
        "wrote {}, {}, {}",
        out_dir.join("manifest.json").display(),
        csv_path.display(),
        ckpt_path.display()
    );
    Ok(EXIT_OK)
}

// ---- compare -----------------------------------------------------------------

struct CompareRun {
    label: String,
    log: TrainingLog,
}

fn cmd_compare(flags: &Flags) -> Result<i32, CliError> {
    let (mut mc, tc, corpus_path, expected_vocab, modes) = if let Some(mpath) = &flags.manifest {
        reject_flags_beside_manifest(flags)?;
        let man = load_manifest(mpath)?;
        if man.command != "compare" {
            return Err(bad_input(format!(
                "manifest {mpath} records a '{}' run, not 'compare'",
                man.command
            )));
        }
        let expected = man.model.vocab_size;
        let modes = man
            .compare_modes
            .clone()
            .unwrap_or_else(|| vec![man.model.imm_memory_mode]);
        (man.model, man.train, man.corpus, Some(expected), modes)
    } else {
        if flags.imm.as_deref() == Some("off") {
            return Err(bad_input(
                "compare needs a memory variant for its second run; use --imm dense or --imm lowrank",
            ));
        }
        let (mut mc, tc) = resolve_configs(flags)?;
        mc.imm_enabled = true;
        let corpus = flags
            .corpus
            .clone()
            .ok_or_else(|| bad_input("--corpus PATH is required (or replay with --manifest)"))?;
        // Without an explicit flag both visibility rules run, since either
        // is a defensible reading of round-robin memory.
        let modes = match &flags.memory_mode {
            Some(raw) => vec![parse_memory_mode(raw)?],
            None => vec![MemoryMode::Causal, MemoryMode::Noncausal],
        };
        (mc, tc, corpus, None, modes)
    };

    let out_dir = PathBuf::from(flags.out.as_deref().unwrap_or("runs/compare"));
    let (_vocab, data) = load_corpus(&corpus_path, &mut mc, expected_vocab)?;

    let man = RunManifest {
        tool: "imm-gpt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "compare".into(),
        started_unix_ms: now_unix_ms(),
        corpus: corpus_path.clone(),
        out_dir: out_dir.display().to_string(),
        model: mc.clone(),
        train: tc.clone(),
        compare_modes: Some(modes.clone()),
    };
    write_manifest(&man, &out_dir)?;

    let mut jobs: Vec<(String, ModelConfig)> = Vec::new();
    let mut base_mc = mc.clone();
    base_mc.imm_enabled = false;
    jobs.push(("baseline".into(), base_mc));
    for mode in &modes {
        let mut imm_mc = mc.clone();
        imm_mc.imm_memory_mode = *mode;
        jobs.push((format!("imm {mode}"), imm_mc));
    }

    for (label, job_mc) in &jobs {
        print_run_header(label, job_mc, &tc, &corpus_path);
    }
    println!("training {} runs concurrently on the shared data seed...", jobs.len());

    let started = Instant::now();
    let results: Vec<Result<TrainingLog, TrainError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(label, job_mc)| {
                let tc = &tc;
                let data = &data;
                scope.spawn(move || {
                    let mut model = GPTModel::<f32>::new(job_mc.clone())
                        .map_err(TrainError::Model)?;
                    let mut printer = RecordPrinter::new(format!("[{label}] "));
                    let mut on_record = |r: &TrainRecord| printer.print(r);
                    run_training(&mut model, data, tc, variant_of(job_mc), Some(&mut on_record))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });

    let mut runs: Vec<CompareRun> = Vec::new();
    for ((label, _), result) in jobs.into_iter().zip(results) {
        let log = result.map_err(from_train_error)?;
        runs.push(CompareRun { label, log });
    }

    let baseline = &runs[0];
    let base_loss = baseline.log.final_summary.final_smoothed_loss;
    let best_imm = runs[1..]
        .iter()
        .min_by(|a, b| {
            a.log
                .final_summary
                .final_smoothed_loss
                .partial_cmp(&b.log.final_summary.final_smoothed_loss)
                .expect("final losses are finite")
        })
        .expect("compare always trains at least one memory run");

    let mut summary = String::new();
    summary.push_str(&format!(
        "baseline         final smoothed train loss {:.4}\n",
        base_loss
    ));
    for run in &runs[1..] {
        let loss = run.log.final_summary.final_smoothed_loss;
        let reduction = (base_loss - loss) / base_loss * 100.0;
        summary.push_str(&format!(
            "{:<16} final smoothed train loss {:.4}  ({:.1}% reduction vs baseline)\n",
            run.label, loss, reduction
        ));
    }
    summary.push_str(&format!("best memory run: {}\n", best_imm.label));
    print!("{summary}");
    println!("compare wall time {:.1} s", started.elapsed().as_secs_f64());

    for run in &runs {
        let name = format!("log_{}.csv", run.label.replace(' ', "_"));
        let path = out_dir.join(name);
        fs::write(&path, run.log.to_csv_string())
            .map_err(|e| bad_input(format!("cannot write {}: {e}", path.display())))?;
    }
    // The combined log keeps the two-series schema: baseline rows, then
    // the better memory run's rows.
    let mut combined = String::from(train::CSV_HEADER);
    combined.push('\n');
    for r in baseline.log.records.iter().chain(best_imm.log.records.iter()) {
        combined.push_str(&r.csv_row());
        combined.push('\n');
    }
    let combined_path = out_dir.join("log.csv");
    fs::write(&combined_path, combined)
        .map_err(|e| bad_input(format!("cannot write {}: {e}", combined_path.display())))?;
    let summary_path = out_dir.join("summary.txt");
    fs::write(&summary_path, &summary)
        .map_err(|e| bad_input(format!("cannot write {}: {e}", summary_path.display())))?;

    let svg_path = out_dir.join("compare.svg");
    let series = [
        ("baseline", "#7f8c8d", train_curve(&baseline.log)),
        (best_imm.label.as_str(), "#c0392b", train_curve(&best_imm.log)),
    ];
    write_loss_svg(&svg_path, &series)?;
    println!("wrote {}, {}, {}", combined_path.display(), summary_path.display(), svg_path.display());
    Ok(EXIT_OK)
}

fn train_curve(log: &TrainingLog) -> Vec<(f64, f64)> {
    log.records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (r.step as f64, r.smoothed_loss))
        .collect()
}

/// One plotted line: label, stroke color, (step, loss) points.
type Series<'a> = (&'a str, &'a str, Vec<(f64, f64)>);

/// Writes a self-contained SVG line chart of loss against step.
fn write_loss_svg(path: &Path, series: &[Series]) -> Result<(), CliError> {
    let (w, h) = (880.0, 560.0);
    let (left, right, top, bottom) = (72.0, 24.0, 28.0, 56.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, _, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        return Err(bad_input("no data points to plot"));
    }
    let x_max = points.iter().map(|p| p.0).fold(1.0f64, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let y_pad = ((y_max - y_min) * 0.05).max(1e-6);
    let (y_lo, y_hi) = (y_min - y_pad, y_max + y_pad);
    let sx = |x: f64| left + x / x_max * (w - left - right);
    let sy = |y: f64| top + (y_hi - y) / (y_hi - y_lo) * (h - top - bottom);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"14\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    // Axes with five ticks each.
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom
    ));
    svg.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom
    ));
    for i in 0..=4 {
        let fx = i as f64 / 4.0;
        let xv = fx * x_max;
        let px = sx(xv);
        svg.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - bottom,
            h - bottom + 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            h - bottom + 24.0,
            xv.round() as u64
        ));
        let yv = y_lo + fx * (y_hi - y_lo);
        let py = sy(yv);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{left}\" y2=\"{py}\" stroke=\"black\"/>\n",
            left - 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yv:.2}</text>\n",
            left - 10.0,
            py + 5.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>\n",
        left + (w - left - right) / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">loss</text>\n",
        top + (h - top - bottom) / 2.0,
        top + (h - top - bottom) / 2.0
    ));
    for (i, (label, color, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        let ly = top + 10.0 + i as f64 * 22.0;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"14\" fill=\"{color}\"/>\n",
            w - right - 170.0,
            ly - 11.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\">{label}</text>\n",
            w - right - 150.0
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| bad_input(format!("cannot write {}: {e}", path.display())))
}

// ---- gradcheck ---------------------------------------------------------------

fn cmd_gradcheck(flags: &Flags) -> Result<i32, CliError> {
    let tolerance = flags.tolerance.unwrap_or(1e-4);
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(bad_input(format!("--tolerance must be positive, got {tolerance}")));
    }
    let variant = match flags.variant.as_deref().or(flags.imm.as_deref()).unwrap_or("dense") {
        "dense" => ImmVariant::Dense,
        "lowrank" => ImmVariant::Lowrank,
        other => {
            return Err(bad_input(format!(
                "--variant expects dense or lowrank, got '{other}'"
            )))
        }
    };

    let mc = gradcheck::verification_model_config(variant);
    let vocab = mc.vocab_size;
    let mut model = GPTModel::<f64>::new(mc).map_err(|e| bad_input(e.to_string()))?;
    // Fresh 0.02-std inits leave some gradients below the resolution of
    // central differences, so the check runs at a seeded generic point.
    gradcheck::randomize_params(&mut model, 0.25, 52);
    let named: Vec<(String, crate::tape::TensorId)> = model
        .named_params()
        .map(|(n, id)| (n.to_string(), id))
        .collect();

    use rand::Rng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(flags.seed.unwrap_or(51));
    let (b, t) = (2, 5);
    let tokens: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
    let mut prog = ModelBatch { model: &mut model, tokens, targets, b, t };

    println!("checking {variant} maps, every element, central differences at eps 1e-5");
    let started = Instant::now();
    let reports = gradcheck::grad_check(&mut prog, &named, 1e-5, None).map_err(|e| match e {
        gradcheck::GradCheckError::NonDeterministic { .. } => check_failed(e.to_string()),
        gradcheck::GradCheckError::Eval(msg) => bad_input(msg),
    })?;

    println!("{:<38} {:>8} {:>14}", "parameter", "elements", "max rel err");
    for r in &reports {
        println!("{:<38} {:>8} {:>14.3e}", r.name, r.checked, r.max_rel_err);
    }
    let worst = gradcheck::worst(&reports).expect("the model has parameters");
    println!(
        "checked {} tensors in {:.1} s; worst: {} at {:.3e}",
        reports.len(),
        started.elapsed().as_secs_f64(),
        worst.name,
        worst.max_rel_err
    );
    if worst.max_rel_err < tolerance {
        println!("PASS: every parameter within tolerance {tolerance:.0e}");
        Ok(EXIT_OK)
    } else {
        Err(check_failed(format!(
            "gradient check failed: {} has max relative error {:.3e} (tolerance {tolerance:.0e})",
            worst.name, worst.max_rel_err
        )))
    }
}

// ---- sample ------------------------------------------------------------------

fn cmd_sample(flags: &Flags) -> Result<i32, CliError> {
    let ckpt = flags
        .ckpt
        .clone()
        .ok_or_else(|| bad_input("--ckpt PATH is required"))?;
    let (mut model, vocab) =
        checkpoint::load::<f32>(Path::new(&ckpt)).map_err(|e| bad_input(e.to_string()))?;

    let prompt = flags.prompt.clone().unwrap_or_else(|| "\n".to_string());
    let prompt_ids = vocab
        .encode(&prompt)
        .map_err(|e| bad_input(format!("prompt: {e}")))?;
    if prompt_ids.is_empty() {
        return Err(bad_input("prompt must contain at least one character"));
    }
    let prompt_usize: Vec<usize> = prompt_ids.iter().map(|&i| i as usize).collect();

    let max_new = flags.max_new.unwrap_or(200);
    let top_k = flags.top_k.unwrap_or(0);
    let temperature = flags.temperature.unwrap_or(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(flags.seed.unwrap_or(1337));
    rng.set_stream(5);

    let out_ids = model
        .generate(&prompt_usize, max_new, temperature, top_k, &mut rng)
        .map_err(|e| bad_input(e.to_string()))?;
    let out_u32: Vec<u32> = out_ids.iter().map(|&i| i as u32).collect();
    let text = vocab
        .decode(&out_u32)
        .map_err(|e| bad_input(format!("generated ids failed to decode: {e}")))?;
    println!("{text}");
    Ok(EXIT_OK)
}

// ---- profile -----------------------------------------------------------------

fn cmd_profile(flags: &Flags) -> Result<i32, CliError> {
    let steps = flags.steps.unwrap_or(30);
    if steps == 0 {
        return Err(check_failed("no samples: --steps must be at least 1"));
    }
    if flags.imm.as_deref() == Some("off") {
        return Err(bad_input(
            "profile times baseline against a memory variant; use --imm dense or --imm lowrank",
        ));
    }
    // The steps flag picks the timed sample count here, not a training
    // length, so it must not reach the training config.
    let mut config_flags = flags.clone();
    config_flags.steps = None;
    let (mut mc, tc) = resolve_configs(&config_flags)?;
    mc.imm_enabled = true;
    let corpus = flags
        .corpus
        .clone()
        .ok_or_else(|| bad_input("--corpus PATH is required"))?;
    let (_vocab, data) = load_corpus(&corpus, &mut mc, None)?;

    let mut base_mc = mc.clone();
    base_mc.imm_enabled = false;

    println!(
        "timing {} optimization steps per variant (5 warmup discarded), {} kernel threads",
        steps,
        threads::kernel_threads()
    );
    let mut rows: Vec<(String, StepStats)> = Vec::new();
    for (label, job_mc) in [("baseline".to_string(), base_mc), (format!("imm {}", mc.imm_variant), mc.clone())] {
        let mut model =
            GPTModel::<f32>::new(job_mc).map_err(|e| bad_input(e.to_string()))?;
        let stats = profile_step(&mut model, &data, &tc, steps).map_err(from_train_error)?;
        rows.push((label, stats));
    }

    println!("{:<14} {:>10} {:>10} {:>10}", "variant", "mean ms", "p50 ms", "p90 ms");
    for (label, s) in &rows {
        println!("{:<14} {:>10.2} {:>10.2} {:>10.2}", label, s.mean_ms, s.p50_ms, s.p90_ms);
    }
    let ratio = rows[1].1.mean_ms / rows[0].1.mean_ms;
    println!("memory/baseline mean step-time ratio: {ratio:.3}");
    if ratio > 1.5 {
        println!("WARN: ratio {ratio:.3} exceeds 1.5; the memory module is costing more than expected here");
    }
    Ok(EXIT_OK)
}
