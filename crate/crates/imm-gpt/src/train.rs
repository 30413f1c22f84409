//! Training loop: AdamW with decoupled weight decay, linear-warmup cosine
//! learning-rate schedule, global gradient-norm clipping, windowed loss
//! logging, and step profiling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write as IoWrite;
use std::time::Instant;

use crate::element::{c, Element};
use crate::model::{GPTModel, ModelConfig, ModelError};
use crate::tape::{Tape, TensorId};
use crate::tokenizer::{Split, TokenDataset, TokenizerError};

const ADAM_EPS: f64 = 1e-8;

/// Optimization hyperparameters. Defaults follow the small character-level
/// GPT recipe this tool reproduces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_iters: usize,
    pub lr_decay_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_iters: usize,
    /// Seed for data sampling and dropout; independent of the model's
    /// parameter-init seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            max_iters: 2000,
            lr_max: 1e-3,
            lr_min: 1e-4,
            warmup_iters: 100,
            lr_decay_iters: 2000,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.1,
            grad_clip: 1.0,
            eval_interval: 40,
            eval_iters: 20,
            seed: 1337,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.max_iters == 0 {
            return fail("batch_size and max_iters must be at least 1".into());
        }
        if self.lr_max <= 0.0 || self.lr_min <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be nonnegative".into());
        }
        if self.eval_interval == 0 || self.eval_iters == 0 {
            return fail("eval_interval and eval_iters must be at least 1".into());
        }
        Ok(())
    }

    /// Soft sanity checks: violations are legal but usually mistakes.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.warmup_iters >= self.lr_decay_iters {
            out.push(format!(
                "warmup_iters ({}) is not below lr_decay_iters ({})",
                self.warmup_iters, self.lr_decay_iters
            ));
        }
        if self.lr_decay_iters > self.max_iters {
            out.push(format!(
                "lr_decay_iters ({}) exceeds max_iters ({}); the schedule will not finish",
                self.lr_decay_iters, self.max_iters
            ));
        }
        if self.lr_min > self.lr_max {
            out.push(format!(
                "lr_min ({}) exceeds lr_max ({})",
                self.lr_min, self.lr_max
            ));
        }
        out
    }
}

/// Named presets matching the three reproduction scales. The vocab size is
/// a placeholder until the corpus is read.
pub fn preset(name: &str) -> Option<(ModelConfig, TrainConfig)> {
    let (block_size, n_embd) = match name {
        "block64" => (64, 128),
        "block128" => (128, 256),
        "block256" => (256, 512),
        _ => return None,
    };
    let model = ModelConfig {
        block_size,
        n_embd,
        imm_rank: crate::imm::num_slots(n_embd),
        ..ModelConfig::default()
    };
    Some((model, TrainConfig::default()))
}

#[derive(Debug)]
pub enum TrainError {
    /// Loss became NaN or infinite; the step is named for diagnosis.
    NonFinite { step: usize },
    Config(String),
    Model(ModelError),
    Data(TokenizerError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFinite { step } => {
                write!(f, "loss became non-finite at step {step}; aborting")
            }
            TrainError::Config(m) => write!(f, "invalid training config: {m}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TokenizerError> for TrainError {
    fn from(e: TokenizerError) -> Self {
        TrainError::Data(e)
    }
}

/// Learning rate at `step`: linear warmup to lr_max, cosine decay to
/// lr_min over [warmup_iters, lr_decay_iters], flat lr_min afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr_max * (step + 1) as f64 / (cfg.warmup_iters + 1) as f64;
    }
    if step > cfg.lr_decay_iters {
        return cfg.lr_min;
    }
    let span = cfg.lr_decay_iters.saturating_sub(cfg.warmup_iters);
    let ratio = if span == 0 {
        1.0
    } else {
        (step - cfg.warmup_iters) as f64 / span as f64
    };
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * ratio).cos())
}

/// AdamW over a set of named tape parameters. Weight decay is decoupled
/// and skipped for biases, layer-norm gains, and the two embedding tables.
pub struct AdamW<E: Element> {
    ids: Vec<TensorId>,
    decay: Vec<bool>,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    steps: usize,
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gain")
        || name == "wte.weight"
        || name == "wpe.weight")
}

impl<E: Element> AdamW<E> {
    pub fn new<'a>(params: impl Iterator<Item = (&'a str, TensorId)>, tape: &Tape<E>) -> Self {
        let mut ids = Vec::new();
        let mut decay = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, id) in params {
            ids.push(id);
            decay.push(decays(name));
            m.push(vec![E::zero(); tape.data(id).len()]);
            v.push(vec![E::zero(); tape.data(id).len()]);
        }
        AdamW {
            ids,
            decay,
            m,
            v,
            steps: 0,
        }
    }

    pub fn for_model(model: &GPTModel<E>) -> Self {
        AdamW::new(model.named_params(), model.tape())
    }

    /// One update from the gradients currently on the tape. Returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, tape: &mut Tape<E>, lr: f64, cfg: &TrainConfig) -> f64 {
        let mut sq = 0.0f64;
        for &id in &self.ids {
            for &g in tape.grad(id) {
                let g = g.to_f64();
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        let (b1, b2): (E, E) = (c(cfg.beta1), c(cfg.beta2));
        let (ob1, ob2): (E, E) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
        let scale_e: E = c(scale);
        let eps: E = c(ADAM_EPS);
        let lr_over_bc1: E = c(lr / bc1);
        let rsqrt_bc2: E = c(1.0 / bc2.sqrt());
        let wd: E = c(lr * cfg.weight_decay);
        for (i, &id) in self.ids.iter().enumerate() {
            let (data, grad) = tape.data_and_grad_mut(id);
            let apply_decay = self.decay[i] && cfg.weight_decay > 0.0;
            for (((p, &graw), m), v) in data
                .iter_mut()
                .zip(grad.iter())
                .zip(self.m[i].iter_mut())
                .zip(self.v[i].iter_mut())
            {
                let g = graw * scale_e;
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m * lr_over_bc1;
                let denom = (*v).sqrt() * rsqrt_bc2 + eps;
                if apply_decay {
                    *p = *p - wd * *p;
                }
                *p = *p - mhat / denom;
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Imm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Imm => write!(f, "imm"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub split: Split,
    /// Mean raw training loss over the logging window ending at this step;
    /// equals the evaluation mean for val rows.
    pub smoothed_loss: f64,
    pub raw_loss: f64,
    pub lr: f64,
    /// Reserved timing column, always 0. Wall-clock noise here would break
    /// the byte-reproducibility of logs; live timing goes to stdout and
    /// [`profile_step`] measures performance properly.
    pub step_ms: f64,
    pub variant: Variant,
}

#[derive(Debug, Clone, Copy)]
pub struct FinalSummary {
    pub final_smoothed_loss: f64,
    pub total_s: f64,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub records: Vec<TrainRecord>,
    pub final_summary: FinalSummary,
}

pub const CSV_HEADER: &str = "step,split,smoothed_loss,raw_loss,lr,step_ms,variant";

impl TrainRecord {
    /// One CSV line matching [`CSV_HEADER`]. Floats print in shortest
    /// round-trip decimal form.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.split, self.smoothed_loss, self.raw_loss, self.lr, self.step_ms, self.variant
        )
    }
}

impl TrainingLog {
    /// Serializes records as CSV with LF endings and full float precision
    /// (shortest round-trip decimal form).
    pub fn write_csv(&self, w: &mut dyn IoWrite) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

/// Mean loss over freshly sampled evaluation batches. Runs the model in
/// evaluation mode (no dropout) and never touches parameters.
pub fn estimate_loss<E: Element>(
    model: &mut GPTModel<E>,
    data: &TokenDataset,
    split: Split,
    eval_iters: usize,
    rng: &mut dyn RngCore,
) -> Result<f64, TrainError> {
    if eval_iters == 0 {
        return Err(TrainError::Config("eval_iters must be at least 1".into()));
    }
    let b = 4.min(data.split_len(split)).max(1);
    let t = model.config().block_size;
    let mut total = 0.0;
    for _ in 0..eval_iters {
        let (xs, ys) = data.sample_batch(split, b, t, rng)?;
        let loss = model.loss(&xs, &ys, b, t, None)?;
        total += model.tape().value(loss).to_f64();
    }
    Ok(total / eval_iters as f64)
}

/// Runs the full optimization loop: sample, forward, loss, backward, clip,
/// update. Records are appended at step 0 and every `eval_interval` steps
/// thereafter (train row with windowed loss, then a val row). Aborts on a
/// non-finite loss, naming the step. Deterministic for fixed seeds and a
/// fixed kernel thread count.
pub fn train<E: Element>(
    model: &mut GPTModel<E>,
    data: &TokenDataset,
    cfg: &TrainConfig,
    variant: Variant,
    mut on_record: Option<&mut dyn FnMut(&TrainRecord)>,
) -> Result<TrainingLog, TrainError> {
    cfg.validate()?;
    let b = cfg.batch_size;
    let t = model.config().block_size;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(4);

    let mut opt = AdamW::for_model(model);
    let mut records: Vec<TrainRecord> = Vec::new();
    let mut window: Vec<f64> = Vec::new();
    let started = Instant::now();

    for step in 0..cfg.max_iters {
        let lr = lr_at(step, cfg);
        let (xs, ys) = data.sample_batch(Split::Train, b, t, &mut data_rng)?;
        let loss_id = model.loss(&xs, &ys, b, t, Some(&mut dropout_rng))?;
        let raw = model.tape().value(loss_id).to_f64();
        if !raw.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        model.tape_mut().zero_grads();
        model.backward(loss_id)?;
        opt.step(model.tape_mut(), lr, cfg);
        window.push(raw);

        let log_now = step == 0 || (step + 1) % cfg.eval_interval == 0;
        if log_now {
            let logged_step = if step == 0 { 0 } else { step + 1 };
            let smoothed = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let rec = TrainRecord {
                step: logged_step,
                split: Split::Train,
                smoothed_loss: smoothed,
                raw_loss: raw,
                lr,
                step_ms: 0.0,
                variant,
            };
            if let Some(cb) = on_record.as_deref_mut() {
                cb(&rec);
            }
            records.push(rec);
            let val = estimate_loss(model, data, Split::Val, cfg.eval_iters, &mut eval_rng)?;
            let rec = TrainRecord {
                step: logged_step,
                split: Split::Val,
                smoothed_loss: val,
                raw_loss: val,
                lr,
                step_ms: 0.0,
                variant,
            };
            if let Some(cb) = on_record.as_deref_mut() {
                cb(&rec);
            }
            records.push(rec);
        }
    }

    let final_smoothed_loss = records
        .iter()
        .rev()
        .find(|r| r.split == Split::Train)
        .map(|r| r.smoothed_loss)
        .unwrap_or(f64::NAN);
    let summary = FinalSummary {
        final_smoothed_loss,
        total_s: started.elapsed().as_secs_f64(),
        params: model.count_params().total,
    };
    Ok(TrainingLog {
        records,
        final_summary: summary,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
}

/// Times `n_steps` full optimization steps after 5 untimed warmup steps.
pub fn profile_step<E: Element>(
    model: &mut GPTModel<E>,
    data: &TokenDataset,
    cfg: &TrainConfig,
    n_steps: usize,
) -> Result<StepStats, TrainError> {
    if n_steps == 0 {
        return Err(TrainError::Config("no samples: n_steps must be at least 1".into()));
    }
    let b = cfg.batch_size;
    let t = model.config().block_size;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);
    let mut opt = AdamW::for_model(model);
    let warmup = 5;
    let mut samples = Vec::with_capacity(n_steps);
    for step in 0..warmup + n_steps {
        let t0 = Instant::now();
        let (xs, ys) = data.sample_batch(Split::Train, b, t, &mut data_rng)?;
        let loss_id = model.loss(&xs, &ys, b, t, Some(&mut dropout_rng))?;
        let raw = model.tape().value(loss_id).to_f64();
        if !raw.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        model.tape_mut().zero_grads();
        model.backward(loss_id)?;
        opt.step(model.tape_mut(), lr_at(step, cfg), cfg);
        if step >= warmup {
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let mut sorted = samples;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| -> f64 {
        let idx = ((q * sorted.len() as f64).ceil() as usize).max(1) - 1;
        sorted[idx.min(sorted.len() - 1)]
    };
    Ok(StepStats {
        mean_ms: mean,
        p50_ms: pick(0.5),
        p90_ms: pick(0.9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imm::{BankScope, ImmVariant, MemoryMode};
    use crate::tokenizer::Vocab;

    fn tiny_setup(imm: bool) -> (GPTModel<f32>, TokenDataset) {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(40);
        let vocab = Vocab::from_text(&text);
        let data = TokenDataset::from_text(&text, &vocab).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            block_size: 16,
            n_layer: 2,
            n_head: 2,
            n_embd: 32,
            dropout: 0.0,
            imm_enabled: imm,
            imm_variant: ImmVariant::Dense,
            imm_slots: 4,
            imm_rank: 4,
            imm_memory_mode: MemoryMode::Causal,
            imm_bank_scope: BankScope::PerLayer,
            imm_scaled_scores: false,
            seed: 5,
        };
        (GPTModel::new(cfg).unwrap(), data)
    }

    fn short_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_iters: iters,
            warmup_iters: 10,
            lr_decay_iters: iters,
            eval_interval: 10,
            eval_iters: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_hits_its_landmarks() {
        let cfg = TrainConfig::default();
        let tol = 1e-12;
        assert!((lr_at(cfg.warmup_iters, &cfg) - cfg.lr_max).abs() < tol);
        assert!((lr_at(cfg.lr_decay_iters, &cfg) - cfg.lr_min).abs() < tol);
        let mid = (cfg.warmup_iters + cfg.lr_decay_iters) / 2;
        assert!((lr_at(mid, &cfg) - (cfg.lr_max + cfg.lr_min) / 2.0).abs() < tol);
        assert!((lr_at(cfg.lr_decay_iters + 500, &cfg) - cfg.lr_min).abs() < tol);
        // Warmup ramps linearly from the first step.
        assert!((lr_at(0, &cfg) - cfg.lr_max / 101.0).abs() < tol);
    }

    #[test]
    fn lr_schedule_is_nonincreasing_after_warmup() {
        let cfg = TrainConfig::default();
        let mut prev = lr_at(cfg.warmup_iters, &cfg);
        for step in cfg.warmup_iters + 1..cfg.max_iters + 100 {
            let lr = lr_at(step, &cfg);
            assert!(lr <= prev + 1e-15, "lr rose at step {step}");
            prev = lr;
        }
        // And the boundary step is where the maximum is attained.
        assert!(lr_at(cfg.warmup_iters - 1, &cfg) < lr_at(cfg.warmup_iters, &cfg));
    }

    #[test]
    fn adamw_first_step_is_a_signed_unit_move() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(vec![0.0], &[1]);
        tape.freeze_params();
        let mut opt = AdamW::new([("w.weight", w)].into_iter(), &tape);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let norm = opt.step(&mut tape, 0.1, &cfg);
        assert!((norm - 1.0).abs() < 1e-12);
        let p = tape.data(w)[0];
        assert!((p + 0.1).abs() < 1e-6, "expected about -0.1, got {p}");
    }

    #[test]
    fn adamw_zero_gradient_zero_decay_is_identity() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(vec![3.5, -2.0], &[2]);
        tape.freeze_params();
        let mut opt = AdamW::new([("w.weight", w)].into_iter(), &tape);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        opt.step(&mut tape, 0.1, &cfg);
        assert_eq!(tape.data(w), &[3.5, -2.0]);
    }

    #[test]
    fn gradient_clipping_rescales_to_the_norm_bound() {
        // Gradients [6, 8] have norm 10; with clip 1.0 the update must
        // equal the update from gradients [0.6, 0.8] with clipping off.
        let run = |grads: [f64; 2], clip: f64| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let w = tape.param(vec![1.0, -1.0], &[2]);
            tape.freeze_params();
            let mut opt = AdamW::new([("w.weight", w)].into_iter(), &tape);
            tape.grad_mut(w).copy_from_slice(&grads);
            let cfg = TrainConfig {
                weight_decay: 0.0,
                grad_clip: clip,
                ..TrainConfig::default()
            };
            let norm = opt.step(&mut tape, 0.01, &cfg);
            (norm, tape.data(w).to_vec())
        };
        let (norm_clipped, clipped) = run([6.0, 8.0], 1.0);
        let (_, reference) = run([0.6, 0.8], 0.0);
        assert!((norm_clipped - 10.0).abs() < 1e-9);
        for (a, b) in clipped.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_skips_the_no_decay_names() {
        let mut tape = Tape::<f64>::new();
        let wb = tape.param(vec![2.0], &[1]);
        let gg = tape.param(vec![2.0], &[1]);
        let te = tape.param(vec![2.0], &[1]);
        let pe = tape.param(vec![2.0], &[1]);
        let ww = tape.param(vec![2.0], &[1]);
        tape.freeze_params();
        let named = [
            ("attn.qkv.bias", wb),
            ("ln1.gain", gg),
            ("wte.weight", te),
            ("wpe.weight", pe),
            ("mlp.fc.weight", ww),
        ];
        let mut opt = AdamW::new(named.into_iter(), &tape);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        opt.step(&mut tape, 0.5, &cfg);
        assert_eq!(tape.data(wb), &[2.0], "bias must not decay");
        assert_eq!(tape.data(gg), &[2.0], "norm gain must not decay");
        assert_eq!(tape.data(te), &[2.0], "token embedding must not decay");
        assert_eq!(tape.data(pe), &[2.0], "position embedding must not decay");
        let w = tape.data(ww)[0];
        assert!((w - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12, "weight must decay, got {w}");
    }

    #[test]
    fn estimate_loss_leaves_parameters_untouched() {
        let (mut model, data) = tiny_setup(true);
        let checksum = |m: &GPTModel<f32>| -> f64 {
            m.named_params()
                .map(|(_, id)| m.tape().data(id).iter().map(|v| v.to_f64()).sum::<f64>())
                .sum()
        };
        let before = checksum(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = estimate_loss(&mut model, &data, Split::Val, 3, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(before, checksum(&model));
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let (mut model, data) = tiny_setup(true);
        let log = train(&mut model, &data, &short_cfg(50), Variant::Imm, None).unwrap();
        let train_rows: Vec<&TrainRecord> =
            log.records.iter().filter(|r| r.split == Split::Train).collect();
        assert_eq!(train_rows.first().unwrap().step, 0);
        let first = train_rows.first().unwrap().smoothed_loss;
        let last = train_rows.last().unwrap().smoothed_loss;
        assert!(
            last < first,
            "loss should fall on a repetitive corpus: {first} -> {last}"
        );
        assert_eq!(log.final_summary.final_smoothed_loss, last);
        assert!(log.final_summary.params > 0);
        // Record steps strictly increase per split.
        for pair in train_rows.windows(2) {
            assert!(pair[0].step < pair[1].step);
        }
    }

    #[test]
    fn training_is_deterministic_for_fixed_seeds() {
        let (mut a, data) = tiny_setup(true);
        let (mut b, _) = tiny_setup(true);
        let la = train(&mut a, &data, &short_cfg(25), Variant::Imm, None).unwrap();
        let lb = train(&mut b, &data, &short_cfg(25), Variant::Imm, None).unwrap();
        assert_eq!(la.records.len(), lb.records.len());
        for (ra, rb) in la.records.iter().zip(lb.records.iter()) {
            assert_eq!(ra.raw_loss.to_bits(), rb.raw_loss.to_bits(), "step {}", ra.step);
            assert_eq!(ra.smoothed_loss.to_bits(), rb.smoothed_loss.to_bits());
        }
        // The serialized logs carry no wall-clock noise, so whole files
        // match byte for byte.
        assert_eq!(la.to_csv_string(), lb.to_csv_string());
    }

    #[test]
    fn non_finite_loss_aborts_and_names_the_step() {
        let (mut model, data) = tiny_setup(false);
        model.param_data_mut("wte.weight").unwrap()[0] = f32::NAN;
        match train(&mut model, &data, &short_cfg(5), Variant::Baseline, None) {
            Err(TrainError::NonFinite { step: 0 }) => {}
            other => panic!("expected non-finite abort at step 0, got {other:?}"),
        }
        let msg = TrainError::NonFinite { step: 7 }.to_string();
        assert!(msg.contains("step 7"), "diagnostic must name the step: {msg}");
    }

    #[test]
    fn csv_serialization_matches_schema() {
        let log = TrainingLog {
            records: vec![
                TrainRecord {
                    step: 0,
                    split: Split::Train,
                    smoothed_loss: 4.174387269895637,
                    raw_loss: 4.174387269895637,
                    lr: 9.900990099009901e-6,
                    step_ms: 12.5,
                    variant: Variant::Baseline,
                },
                TrainRecord {
                    step: 0,
                    split: Split::Val,
                    smoothed_loss: 4.2,
                    raw_loss: 4.2,
                    lr: 9.900990099009901e-6,
                    step_ms: 2.0,
                    variant: Variant::Baseline,
                },
            ],
            final_summary: FinalSummary {
                final_smoothed_loss: 4.174387269895637,
                total_s: 0.1,
                params: 10,
            },
        };
        let csv = log.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,split,smoothed_loss,raw_loss,lr,step_ms,variant"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("0,train,"), "got row: {row}");
        assert!(row.ends_with(",baseline"));
        // Full precision: the float round-trips exactly.
        let loss_field: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(loss_field, 4.174387269895637);
        assert!(!csv.contains('\r'), "line endings must be LF only");
    }

    #[test]
    fn profiling_reports_ordered_quantiles_and_rejects_empty() {
        let (mut model, data) = tiny_setup(true);
        let cfg = short_cfg(50);
        match profile_step(&mut model, &data, &cfg, 0) {
            Err(TrainError::Config(msg)) => assert!(msg.contains("no samples")),
            other => panic!("expected a no-samples error, got {other:?}"),
        }
        let stats = profile_step(&mut model, &data, &cfg, 8).unwrap();
        assert!(stats.mean_ms > 0.0);
        assert!(stats.p50_ms <= stats.p90_ms);
    }

    #[test]
    fn presets_resolve_the_documented_shapes() {
        let (m64, t64) = preset("block64").unwrap();
        assert_eq!(
            (m64.block_size, m64.n_embd, m64.n_layer, m64.n_head),
            (64, 128, 4, 4)
        );
        assert_eq!((t64.batch_size, t64.max_iters, t64.lr_decay_iters), (12, 2000, 2000));
        assert_eq!(m64.dropout, 0.0);
        let (m128, _) = preset("block128").unwrap();
        assert_eq!((m128.block_size, m128.n_embd), (128, 256));
        let (m256, _) = preset("block256").unwrap();
        assert_eq!((m256.block_size, m256.n_embd), (256, 512));
        assert!(preset("block999").is_none());
    }

    #[test]
    fn config_validation_and_warnings() {
        let cfg = TrainConfig { lr_max: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { warmup_iters: 3000, ..TrainConfig::default() };
        assert!(!cfg.warnings().is_empty());
        assert!(TrainConfig::default().warnings().is_empty());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
