//! Decoder-only character-level GPT with an optional memory module applied
//! after each block's MLP.
//!
//! The model owns its tape. A forward pass resets the tape to the frozen
//! parameter prefix, so no activation state survives between calls and the
//! memory banks implied by the fused read start from zero every time.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::element::{c, Element};
use crate::imm::{self, BankScope, ImmParamIds, ImmVariant, MapIds, MemoryMode};
use crate::tape::{Tape, TensorError, TensorId};

/// Layer-norm epsilon used everywhere in the model, including the memory
/// module's own norm.
pub const LN_EPS: f64 = 1e-5;

const INIT_STD: f64 = 0.02;

/// Architecture and memory-module hyperparameters. All fields have serde
/// defaults so partial JSON configs overlay cleanly onto a preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Maximum context length T.
    pub block_size: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    pub dropout: f64,
    pub imm_enabled: bool,
    pub imm_variant: ImmVariant,
    /// Slot count N of each memory bank.
    pub imm_slots: usize,
    /// Factorization rank k (lowrank variant only).
    pub imm_rank: usize,
    pub imm_memory_mode: MemoryMode,
    pub imm_bank_scope: BankScope,
    /// Scale memory attention scores by 1/sqrt(d) instead of using raw
    /// dot products.
    pub imm_scaled_scores: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 65,
            block_size: 64,
            n_layer: 4,
            n_head: 4,
            n_embd: 128,
            dropout: 0.0,
            imm_enabled: false,
            imm_variant: ImmVariant::Dense,
            imm_slots: 16,
            imm_rank: imm::num_slots(128),
            imm_memory_mode: MemoryMode::Causal,
            imm_bank_scope: BankScope::PerLayer,
            imm_scaled_scores: false,
            seed: 1337,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be at least 1".into());
        }
        if self.block_size == 0 {
            return fail("block_size must be at least 1".into());
        }
        if self.n_layer == 0 || self.n_head == 0 || self.n_embd == 0 {
            return fail("n_layer, n_head and n_embd must all be at least 1".into());
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return fail(format!(
                "n_embd ({}) must be divisible by n_head ({})",
                self.n_embd, self.n_head
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if self.imm_enabled {
            if self.imm_slots == 0 {
                return fail("imm_slots must be at least 1".into());
            }
            if self.imm_variant == ImmVariant::Lowrank && self.imm_rank == 0 {
                return fail("imm_rank must be at least 1 for the lowrank variant".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ModelError {
    /// A config invariant is violated; the message names it.
    Config(String),
    ContextTooLong { t: usize, block_size: usize },
    EmptyPrompt,
    BadTemperature(f64),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "invalid config: {msg}"),
            ModelError::ContextTooLong { t, block_size } => {
                write!(f, "sequence length {t} exceeds block_size {block_size}")
            }
            ModelError::EmptyPrompt => write!(f, "generation needs a non-empty prompt"),
            ModelError::BadTemperature(v) => {
                write!(f, "temperature must be positive, got {v}")
            }
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Parameter counts grouped the way the comparison harness reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub per_layer_core: usize,
    pub per_layer_imm: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_gain: TensorId,
    ln1_bias: TensorId,
    qkv_w: TensorId,
    qkv_b: TensorId,
    proj_w: TensorId,
    proj_b: TensorId,
    ln2_gain: TensorId,
    ln2_bias: TensorId,
    fc_w: TensorId,
    fc_b: TensorId,
    mlp_proj_w: TensorId,
    mlp_proj_b: TensorId,
    imm: Option<ImmParamIds>,
}

/// The assembled model: tape, named parameters, and the wiring handles.
/// The output head is tied to the token embedding.
pub struct GPTModel<E: Element> {
    config: ModelConfig,
    tape: Tape<E>,
    names: Vec<String>,
    ids: Vec<TensorId>,
    wte: TensorId,
    wpe: TensorId,
    layers: Vec<LayerIds>,
    lnf_gain: TensorId,
    lnf_bias: TensorId,
}

impl<E: Element> GPTModel<E> {
    /// Initializes all parameters: normal(0, 0.02) weights, zero biases,
    /// unit layer-norm gains, residual projections scaled by
    /// 1/sqrt(2*n_layer). Core and memory parameters draw from separate
    /// seeded streams, so the baseline weights are bit-identical whether
    /// the memory module is enabled or not.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.n_embd;
        let v = config.vocab_size;
        let mut core_rng = ChaCha8Rng::seed_from_u64(config.seed);
        core_rng.set_stream(0);
        let mut imm_rng = ChaCha8Rng::seed_from_u64(config.seed);
        imm_rng.set_stream(1);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let scaled = Normal::new(0.0, INIT_STD / (2.0 * config.n_layer as f64).sqrt())
            .expect("valid std");

        let mut model = GPTModel {
            config: config.clone(),
            tape: Tape::new(),
            names: Vec::new(),
            ids: Vec::new(),
            wte: TensorId(0),
            wpe: TensorId(0),
            layers: Vec::new(),
            lnf_gain: TensorId(0),
            lnf_bias: TensorId(0),
        };

        let draw = |rng: &mut ChaCha8Rng, dist: &Normal<f64>, n: usize| -> Vec<E> {
            (0..n).map(|_| c(dist.sample(rng))).collect()
        };

        model.wte = {
            let data = draw(&mut core_rng, &normal, v * d);
            model.add_param("wte.weight", data, &[v, d])
        };
        model.wpe = {
            let data = draw(&mut core_rng, &normal, config.block_size * d);
            model.add_param("wpe.weight", data, &[config.block_size, d])
        };

        for li in 0..config.n_layer {
            let n = |suffix: &str| format!("layer.{li}.{suffix}");
            let ln1_gain = model.add_param(&n("ln1.gain"), vec![E::one(); d], &[d]);
            let ln1_bias = model.add_param(&n("ln1.bias"), vec![E::zero(); d], &[d]);
            let qkv_w = {
                let data = draw(&mut core_rng, &normal, d * 3 * d);
                model.add_param(&n("attn.qkv.weight"), data, &[d, 3 * d])
            };
            let qkv_b = model.add_param(&n("attn.qkv.bias"), vec![E::zero(); 3 * d], &[3 * d]);
            let proj_w = {
                let data = draw(&mut core_rng, &scaled, d * d);
                model.add_param(&n("attn.proj.weight"), data, &[d, d])
            };
            let proj_b = model.add_param(&n("attn.proj.bias"), vec![E::zero(); d], &[d]);
            let ln2_gain = model.add_param(&n("ln2.gain"), vec![E::one(); d], &[d]);
            let ln2_bias = model.add_param(&n("ln2.bias"), vec![E::zero(); d], &[d]);
            let fc_w = {
                let data = draw(&mut core_rng, &normal, d * 4 * d);
                model.add_param(&n("mlp.fc.weight"), data, &[d, 4 * d])
            };
            let fc_b = model.add_param(&n("mlp.fc.bias"), vec![E::zero(); 4 * d], &[4 * d]);
            let mlp_proj_w = {
                let data = draw(&mut core_rng, &scaled, 4 * d * d);
                model.add_param(&n("mlp.proj.weight"), data, &[4 * d, d])
            };
            let mlp_proj_b = model.add_param(&n("mlp.proj.bias"), vec![E::zero(); d], &[d]);

            let imm_ids = if config.imm_enabled {
                let mut map = |stem: &str| -> MapIds {
                    match config.imm_variant {
                        ImmVariant::Dense => {
                            let w = draw(&mut imm_rng, &normal, d * d);
                            MapIds::Dense {
                                w: model.add_param(&n(&format!("imm.{stem}.weight")), w, &[d, d]),
                                b: model.add_param(
                                    &n(&format!("imm.{stem}.bias")),
                                    vec![E::zero(); d],
                                    &[d],
                                ),
                            }
                        }
                        ImmVariant::Lowrank => {
                            let k = config.imm_rank;
                            let u = draw(&mut imm_rng, &normal, d * k);
                            let vmat = draw(&mut imm_rng, &normal, k * d);
                            MapIds::Lowrank {
                                u: model.add_param(&n(&format!("imm.{stem}.u")), u, &[d, k]),
                                v: model.add_param(&n(&format!("imm.{stem}.v")), vmat, &[k, d]),
                                b: model.add_param(
                                    &n(&format!("imm.{stem}.bias")),
                                    vec![E::zero(); d],
                                    &[d],
                                ),
                            }
                        }
                    }
                };
                let f_write = map("f_write");
                let f_query = map("f_query");
                let g = map("g");
                Some(ImmParamIds {
                    f_write,
                    f_query,
                    g,
                    ln_gain: model.add_param(&n("imm.ln.gain"), vec![E::one(); d], &[d]),
                    ln_bias: model.add_param(&n("imm.ln.bias"), vec![E::zero(); d], &[d]),
                })
            } else {
                None
            };

            model.layers.push(LayerIds {
                ln1_gain,
                ln1_bias,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_gain,
                ln2_bias,
                fc_w,
                fc_b,
                mlp_proj_w,
                mlp_proj_b,
                imm: imm_ids,
            });
        }

        model.lnf_gain = model.add_param("lnf.gain", vec![E::one(); d], &[d]);
        model.lnf_bias = model.add_param("lnf.bias", vec![E::zero(); d], &[d]);
        model.tape.freeze_params();
        Ok(model)
    }

    fn add_param(&mut self, name: &str, data: Vec<E>, shape: &[usize]) -> TensorId {
        let id = self.tape.param(data, shape);
        self.names.push(name.to_string());
        self.ids.push(id);
        id
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<E> {
        &mut self.tape
    }

    /// Named parameters in registration order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.names.iter().map(|s| s.as_str()).zip(self.ids.iter().copied())
    }

    pub fn param_id(&self, name: &str) -> Option<TensorId> {
        self.names.iter().position(|n| n == name).map(|i| self.ids[i])
    }

    pub fn param_data_mut(&mut self, name: &str) -> Option<&mut [E]> {
        let id = self.param_id(name)?;
        Some(self.tape.data_mut(id))
    }

    /// Runs the full network and returns the logits tensor [B*T, V].
    /// Resets the tape first, so ids from earlier passes become invalid.
    /// `rng` enables dropout; pass None for evaluation.
    pub fn forward(
        &mut self,
        tokens: &[usize],
        b: usize,
        t: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<TensorId, ModelError> {
        Ok(self.forward_ids(tokens, b, t, rng)?.1)
    }

    /// Like [`GPTModel::forward`] but returns a copy of the hidden state
    /// entering the final layer norm (the last block's output).
    pub fn forward_hidden(
        &mut self,
        tokens: &[usize],
        b: usize,
        t: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<E>, ModelError> {
        let (hidden, _) = self.forward_ids(tokens, b, t, rng)?;
        Ok(self.tape.data(hidden).to_vec())
    }

    fn forward_ids(
        &mut self,
        tokens: &[usize],
        b: usize,
        t: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(TensorId, TensorId), ModelError> {
        if t == 0 || b == 0 || tokens.len() != b * t {
            return Err(ModelError::Config(format!(
                "token buffer of {} ids does not match batch {} x length {}",
                tokens.len(),
                b,
                t
            )));
        }
        if t > self.config.block_size {
            return Err(ModelError::ContextTooLong {
                t,
                block_size: self.config.block_size,
            });
        }
        self.tape.reset();
        let p = self.config.dropout;
        let tok = self.tape.embedding(self.wte, tokens)?;
        let mut h = self.tape.add_rows(tok, self.wpe, t)?;
        h = maybe_drop(&mut self.tape, h, p, &mut rng);

        let mut prev_summaries: Option<TensorId> = None;
        for li in 0..self.config.n_layer {
            let ids = self.layers[li];
            // Attention sublayer.
            let normed = self.tape.layer_norm(h, ids.ln1_gain, ids.ln1_bias, LN_EPS)?;
            let attn = causal_self_attention(
                &mut self.tape,
                normed,
                ids.qkv_w,
                ids.qkv_b,
                ids.proj_w,
                ids.proj_b,
                b,
                t,
                self.config.n_head,
                p,
                &mut rng,
            )?;
            let attn = maybe_drop(&mut self.tape, attn, p, &mut rng);
            h = self.tape.add(h, attn)?;
            // MLP sublayer.
            let normed = self.tape.layer_norm(h, ids.ln2_gain, ids.ln2_bias, LN_EPS)?;
            let mid = self.tape.linear(normed, ids.fc_w, Some(ids.fc_b))?;
            let mid = self.tape.gelu(mid);
            let mlp = self.tape.linear(mid, ids.mlp_proj_w, Some(ids.mlp_proj_b))?;
            let mlp = maybe_drop(&mut self.tape, mlp, p, &mut rng);
            h = self.tape.add(h, mlp)?;
            // Memory module, after the MLP residual.
            if let Some(imm_ids) = &ids.imm {
                let prev = match self.config.imm_bank_scope {
                    BankScope::PerLayer => None,
                    BankScope::Shared => prev_summaries,
                };
                let (out, summaries) = imm::apply_on_tape(
                    &mut self.tape,
                    h,
                    imm_ids,
                    b,
                    t,
                    self.config.imm_slots,
                    self.config.imm_memory_mode,
                    self.config.imm_scaled_scores,
                    LN_EPS,
                    prev,
                )?;
                h = out;
                prev_summaries = Some(summaries);
            }
        }
        let hidden = self.tape.layer_norm(h, self.lnf_gain, self.lnf_bias, LN_EPS)?;
        let logits = self.tape.linear_t(hidden, self.wte)?;
        Ok((h, logits))
    }

    /// Forward pass plus mean cross-entropy against `targets` (length B*T).
    pub fn loss(
        &mut self,
        tokens: &[usize],
        targets: &[usize],
        b: usize,
        t: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<TensorId, ModelError> {
        let logits = self.forward(tokens, b, t, rng)?;
        Ok(self.tape.cross_entropy(logits, targets)?)
    }

    pub fn backward(&mut self, loss: TensorId) -> Result<(), ModelError> {
        Ok(self.tape.backward(loss)?)
    }

    /// Appends `max_new` sampled tokens to the prompt. The context is
    /// cropped to the last block_size ids each step. `top_k` of 0 keeps the
    /// whole distribution; `top_k` of 1 is deterministic argmax.
    pub fn generate(
        &mut self,
        prompt: &[usize],
        max_new: usize,
        temperature: f64,
        top_k: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if temperature <= 0.0 {
            return Err(ModelError::BadTemperature(temperature));
        }
        let v = self.config.vocab_size;
        let mut ids = prompt.to_vec();
        for _ in 0..max_new {
            let start = ids.len().saturating_sub(self.config.block_size);
            let ctx = ids[start..].to_vec();
            let t = ctx.len();
            let logits = self.forward(&ctx, 1, t, None)?;
            let row = &self.tape.data(logits)[(t - 1) * v..t * v];
            let mut scored: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .map(|(i, &l)| (i, l.to_f64() / temperature))
                .collect();
            // Sort by score descending, index ascending for stable ties.
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let keep = if top_k == 0 { v } else { top_k.min(v) };
            scored.truncate(keep);
            let mx = scored[0].1;
            let mut weights: Vec<f64> = scored.iter().map(|&(_, s)| (s - mx).exp()).collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            let next = if keep == 1 {
                scored[0].0
            } else {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = scored[keep - 1].0;
                for (&(id, _), &w) in scored.iter().zip(weights.iter()) {
                    acc += w;
                    if u < acc {
                        chosen = id;
                        break;
                    }
                }
                chosen
            };
            ids.push(next);
        }
        Ok(ids)
    }

    /// Exact parameter counts from walking the registered tensors.
    pub fn count_params(&self) -> ParamBreakdown {
        let numel = |id: TensorId| self.tape.shape(id).iter().product::<usize>();
        let mut out = ParamBreakdown {
            embedding: 0,
            per_layer_core: 0,
            per_layer_imm: 0,
            total: 0,
        };
        for (name, id) in self.named_params() {
            let n = numel(id);
            out.total += n;
            if name == "wte.weight" || name == "wpe.weight" {
                out.embedding += n;
            } else if name.starts_with("layer.0.imm.") {
                out.per_layer_imm += n;
            } else if name.starts_with("layer.0.") {
                out.per_layer_core += n;
            }
        }
        out
    }
}

fn maybe_drop<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    p: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> TensorId {
    match rng {
        Some(r) => tape.dropout(x, p, &mut **r),
        None => x,
    }
}

/// Multi-head scaled-dot-product attention with a strict causal mask:
/// position t attends to positions 0..=t. `h` is the already-normed input
/// [b*t, d]; the result is the output projection, without the residual add.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_self_attention<E: Element>(
    tape: &mut Tape<E>,
    h: TensorId,
    qkv_w: TensorId,
    qkv_b: TensorId,
    proj_w: TensorId,
    proj_b: TensorId,
    b: usize,
    t: usize,
    n_head: usize,
    attn_dropout: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<TensorId, TensorError> {
    let d = *tape.shape(h).last().unwrap_or(&0);
    let qkv = tape.linear(h, qkv_w, Some(qkv_b))?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let qh = tape.split_heads(q, b, t, n_head)?;
    let kh = tape.split_heads(k, b, t, n_head)?;
    let vh = tape.split_heads(v, b, t, n_head)?;
    let hd = d / n_head;
    let att = tape.bmm_nt(qh, kh, c::<E>(1.0 / (hd as f64).sqrt()))?;
    let att = tape.causal_softmax(att)?;
    let att = maybe_drop(tape, att, attn_dropout, rng);
    let y = tape.bmm(att, vh)?;
    let y = tape.merge_heads(y, b, t, n_head)?;
    tape.linear(y, proj_w, Some(proj_b))
}
