//! Implicit memory module: a small bank of vector slots that each sequence
//! position writes a summary into (round-robin, slot = position mod N) and
//! reads back with softmax attention, with the result folded into the
//! hidden state through a residual add and the module's own layer norm.
//!
//! Two implementations exist deliberately. [`apply_sequential`] is the
//! literal write-then-read loop over positions, built on [`MemoryBank`];
//! it defines the semantics and serves as the oracle. [`apply_parallel`]
//! (and [`apply_on_tape`], the differentiable form the model trains
//! through) vectorizes the same schedule with a closed-form index rule.
//! Tests hold the two equal to 1e-10 in 64-bit.

use serde::{Deserialize, Serialize};

use crate::element::{c, Element};
use crate::tape::{slot_source, Tape, TensorError, TensorId};

/// Parameterization of the three per-block maps (write, query, integrate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImmVariant {
    /// Full d x d weight per map.
    Dense,
    /// Each map factored as d -> rank -> d.
    Lowrank,
}

/// Which writes a reading position can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    /// Position t reads the bank as of its own write: only summaries from
    /// positions <= t are visible, preserving the autoregressive property.
    Causal,
    /// Every position reads the bank left after the whole sequence has
    /// written, so summaries of later positions leak backward in time.
    Noncausal,
}

/// Whether each block owns a bank or all blocks pass one along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankScope {
    /// Every block starts from a zeroed bank of its own (default).
    PerLayer,
    /// One bank per forward pass: each block inherits the slots the
    /// previous block left behind, so early positions can read the prior
    /// block's summaries of later positions even in causal mode.
    Shared,
}

impl std::fmt::Display for ImmVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImmVariant::Dense => "dense",
            ImmVariant::Lowrank => "lowrank",
        })
    }
}

impl std::fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MemoryMode::Causal => "causal",
            MemoryMode::Noncausal => "noncausal",
        })
    }
}

impl std::fmt::Display for BankScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BankScope::PerLayer => "per_layer",
            BankScope::Shared => "shared",
        })
    }
}

/// Default slot count for a given embedding width: floor(sqrt(n_embd)),
/// at least 1.
pub fn num_slots(n_embd: usize) -> usize {
    ((n_embd as f64).sqrt().floor() as usize).max(1)
}

/// Trainable parameter count of one block's memory module: three d -> d
/// maps with bias (dense or rank-factored) plus the module's own layer-norm
/// gain and bias.
pub fn param_count(variant: ImmVariant, n_embd: usize, rank: usize) -> usize {
    let per_map = match variant {
        ImmVariant::Dense => n_embd * n_embd + n_embd,
        ImmVariant::Lowrank => 2 * n_embd * rank + n_embd,
    };
    3 * per_map + 2 * n_embd
}

// ---- plain (non-tape) reference implementation ----------------------------

/// A d -> d affine map in either parameterization. Weight layout matches
/// the tape's `linear`: row-major [d_in, d_out], bias on the output.
#[derive(Debug, Clone)]
pub enum AffineMap<E: Element> {
    Dense { w: Vec<E>, b: Vec<E> },
    Lowrank { u: Vec<E>, v: Vec<E>, b: Vec<E> },
}

impl<E: Element> AffineMap<E> {
    pub fn dim(&self) -> usize {
        match self {
            AffineMap::Dense { b, .. } | AffineMap::Lowrank { b, .. } => b.len(),
        }
    }

    fn rank(&self, d: usize) -> usize {
        match self {
            AffineMap::Dense { .. } => 0,
            AffineMap::Lowrank { u, .. } => u.len() / d,
        }
    }

    /// Applies the map to each of `rows` rows of `x` (row-major [rows, d]).
    pub fn apply_rows(&self, x: &[E], rows: usize) -> Vec<E> {
        let d = self.dim();
        assert_eq!(x.len(), rows * d);
        match self {
            AffineMap::Dense { w, b } => {
                let mut out = vec![E::zero(); rows * d];
                for (xrow, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
                    orow.copy_from_slice(b);
                    for (i, &xv) in xrow.iter().enumerate() {
                        for (o, &wv) in orow.iter_mut().zip(w[i * d..(i + 1) * d].iter()) {
                            *o = *o + xv * wv;
                        }
                    }
                }
                out
            }
            AffineMap::Lowrank { u, v, b } => {
                let k = self.rank(d);
                let mut out = vec![E::zero(); rows * d];
                let mut mid = vec![E::zero(); k];
                for (xrow, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
                    mid.fill(E::zero());
                    for (i, &xv) in xrow.iter().enumerate() {
                        for (m, &uv) in mid.iter_mut().zip(u[i * k..(i + 1) * k].iter()) {
                            *m = *m + xv * uv;
                        }
                    }
                    orow.copy_from_slice(b);
                    for (j, &mv) in mid.iter().enumerate() {
                        for (o, &vv) in orow.iter_mut().zip(v[j * d..(j + 1) * d].iter()) {
                            *o = *o + mv * vv;
                        }
                    }
                }
                out
            }
        }
    }
}

/// All trainable pieces of one block's memory module, in plain storage.
/// This mirrors the tape-registered parameters one-to-one and exists for
/// the reference implementation and its oracles.
#[derive(Debug, Clone)]
pub struct ImmParams<E: Element> {
    pub f_write: AffineMap<E>,
    pub f_query: AffineMap<E>,
    pub g: AffineMap<E>,
    pub ln_gain: Vec<E>,
    pub ln_bias: Vec<E>,
    pub ln_eps: f64,
    /// Multiply attention scores by 1/sqrt(d). Off by default: the memory
    /// read is defined over raw dot products.
    pub scaled_scores: bool,
}

/// Per-sequence slot banks for a whole batch, stored [batch, slots, dim].
/// Slots start (and reset to) exactly zero, so a fresh bank contributes
/// nothing to reads.
#[derive(Debug, Clone)]
pub struct MemoryBank<E: Element> {
    data: Vec<E>,
    batch: usize,
    slots: usize,
    dim: usize,
    write_count: usize,
}

impl<E: Element> MemoryBank<E> {
    pub fn new(batch: usize, slots: usize, dim: usize) -> Self {
        assert!(batch > 0 && slots > 0 && dim > 0);
        MemoryBank {
            data: vec![E::zero(); batch * slots * dim],
            batch,
            slots,
            dim,
            write_count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.data.fill(E::zero());
        self.write_count = 0;
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Writes performed since the last reset.
    pub fn write_count(&self) -> usize {
        self.write_count
    }

    pub fn slot(&self, bi: usize, i: usize) -> &[E] {
        let off = (bi * self.slots + i) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Stores each sequence's summary (s: [batch, dim]) for position `t` in
    /// slot t % slots, overwriting whatever was there.
    pub fn write_raw(&mut self, t: usize, summaries: &[E]) {
        assert_eq!(summaries.len(), self.batch * self.dim);
        let i = t % self.slots;
        for bi in 0..self.batch {
            let off = (bi * self.slots + i) * self.dim;
            self.data[off..off + self.dim]
                .copy_from_slice(&summaries[bi * self.dim..(bi + 1) * self.dim]);
        }
        self.write_count += 1;
    }

    /// Soft read for each sequence: scores are dot products of the query
    /// with each slot (times 1/sqrt(dim) when `scaled`), weights their
    /// softmax over all slots, and the result the weight-averaged slot
    /// contents. Returns (reads [batch, dim], weights [batch, slots]).
    pub fn read_raw(&self, queries: &[E], scaled: bool) -> (Vec<E>, Vec<E>) {
        assert_eq!(queries.len(), self.batch * self.dim);
        let kscale: E = if scaled {
            c(1.0 / (self.dim as f64).sqrt())
        } else {
            E::one()
        };
        let mut reads = vec![E::zero(); self.batch * self.dim];
        let mut alpha = vec![E::zero(); self.batch * self.slots];
        for bi in 0..self.batch {
            let q = &queries[bi * self.dim..(bi + 1) * self.dim];
            let arow = &mut alpha[bi * self.slots..(bi + 1) * self.slots];
            for (i, a) in arow.iter_mut().enumerate() {
                let mut s = E::zero();
                for (&m, &qv) in self.slot(bi, i).iter().zip(q.iter()) {
                    s = s + m * qv;
                }
                *a = kscale * s;
            }
            // Softmax with max-shift; zero slots participate like any other.
            let mut mx = arow[0];
            for &v in arow.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = E::zero();
            for v in arow.iter_mut() {
                *v = (*v - mx).exp();
                denom = denom + *v;
            }
            for v in arow.iter_mut() {
                *v = *v / denom;
            }
            let r = &mut reads[bi * self.dim..(bi + 1) * self.dim];
            for (i, &a) in arow.iter().enumerate() {
                for (rv, &m) in r.iter_mut().zip(self.slot(bi, i).iter()) {
                    *rv = *rv + a * m;
                }
            }
        }
        (reads, alpha)
    }
}

/// Write step: summarize the hidden rows (h_t: [batch, dim]) through
/// f_write and store at position t's slot.
pub fn write<E: Element>(bank: &mut MemoryBank<E>, h_t: &[E], t: usize, params: &ImmParams<E>) {
    let s = params.f_write.apply_rows(h_t, bank.batch);
    bank.write_raw(t, &s);
}

/// Read step: query the bank with f_query(h_t) and return the attention-
/// weighted slot average per sequence.
pub fn read<E: Element>(bank: &MemoryBank<E>, h_t: &[E], params: &ImmParams<E>) -> Vec<E> {
    let q = params.f_query.apply_rows(h_t, bank.batch);
    bank.read_raw(&q, params.scaled_scores).0
}

/// Integration step: fold the read back into the hidden state as
/// layer_norm(h_t + g(r_t)) using the module's own gain/bias.
pub fn integrate<E: Element>(h_t: &[E], r_t: &[E], rows: usize, params: &ImmParams<E>) -> Vec<E> {
    let d = params.g.dim();
    let gr = params.g.apply_rows(r_t, rows);
    let mut sum: Vec<E> = h_t.iter().zip(gr.iter()).map(|(&h, &g)| h + g).collect();
    layer_norm_rows(&mut sum, &params.ln_gain, &params.ln_bias, params.ln_eps, d);
    sum
}

/// In-place row-wise layer norm over `cols`-wide rows.
pub(crate) fn layer_norm_rows<E: Element>(
    x: &mut [E],
    gain: &[E],
    bias: &[E],
    eps: f64,
    cols: usize,
) {
    let inv: E = c(1.0 / cols as f64);
    let epse: E = c(eps);
    for row in x.chunks_mut(cols) {
        let mut s = E::zero();
        for &v in row.iter() {
            s = s + v;
        }
        let mu = s * inv;
        let mut var = E::zero();
        for &v in row.iter() {
            let d = v - mu;
            var = var + d * d;
        }
        let rs = (var * inv + epse).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(gain.iter()).zip(bias.iter()) {
            *v = (*v - mu) * rs * g + b;
        }
    }
}

/// Reference semantics of the whole memory pass, written as the literal
/// loop. `h` is [b*t, dim] rows; the caller supplies the bank (freshly
/// reset for a block that owns its own, carrying earlier contents under
/// shared scope). Causal interleaves write and read position by position
/// (a position may attend to its own summary); noncausal performs all
/// writes, then all reads.
pub fn apply_sequential<E: Element>(
    h: &[E],
    b: usize,
    t: usize,
    bank: &mut MemoryBank<E>,
    params: &ImmParams<E>,
    mode: MemoryMode,
) -> Vec<E> {
    let d = params.g.dim();
    assert_eq!(h.len(), b * t * d);
    assert_eq!(bank.batch, b);
    let mut out = vec![E::zero(); b * t * d];
    // Gather one position's rows across the batch (b-major layout).
    let gather = |src: &[E], ti: usize| -> Vec<E> {
        let mut rows = vec![E::zero(); b * d];
        for bi in 0..b {
            rows[bi * d..(bi + 1) * d]
                .copy_from_slice(&src[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
        }
        rows
    };
    let read_into = |bank: &MemoryBank<E>, out: &mut [E], ti: usize| {
        let h_t = gather(h, ti);
        let r_t = read(bank, &h_t, params);
        let y = integrate(&h_t, &r_t, b, params);
        for bi in 0..b {
            out[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                .copy_from_slice(&y[bi * d..(bi + 1) * d]);
        }
    };
    match mode {
        MemoryMode::Causal => {
            for ti in 0..t {
                write(bank, &gather(h, ti), ti, params);
                read_into(bank, &mut out, ti);
            }
        }
        MemoryMode::Noncausal => {
            for ti in 0..t {
                write(bank, &gather(h, ti), ti, params);
            }
            for ti in 0..t {
                read_into(bank, &mut out, ti);
            }
        }
    }
    out
}

// ---- differentiable (tape) implementation --------------------------------

/// Tape handles for one block's memory-module parameters.
#[derive(Debug, Clone, Copy)]
pub enum MapIds {
    Dense { w: TensorId, b: TensorId },
    Lowrank { u: TensorId, v: TensorId, b: TensorId },
}

#[derive(Debug, Clone, Copy)]
pub struct ImmParamIds {
    pub f_write: MapIds,
    pub f_query: MapIds,
    pub g: MapIds,
    pub ln_gain: TensorId,
    pub ln_bias: TensorId,
}

/// Applies one affine map on the tape.
pub fn map_on_tape<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    map: &MapIds,
) -> Result<TensorId, TensorError> {
    match *map {
        MapIds::Dense { w, b } => tape.linear(x, w, Some(b)),
        MapIds::Lowrank { u, v, b } => {
            let mid = tape.linear(x, u, None)?;
            tape.linear(mid, v, Some(b))
        }
    }
}

/// Differentiable memory pass: summaries and queries from their maps, the
/// fused slot read, then integrate. `prev` carries the previous block's
/// summaries under shared bank scope. Returns (updated hidden, summaries),
/// the summaries being what a later block needs as its own `prev`.
#[allow(clippy::too_many_arguments)]
pub fn apply_on_tape<E: Element>(
    tape: &mut Tape<E>,
    h: TensorId,
    ids: &ImmParamIds,
    b: usize,
    t: usize,
    slots: usize,
    mode: MemoryMode,
    scaled: bool,
    ln_eps: f64,
    prev: Option<TensorId>,
) -> Result<(TensorId, TensorId), TensorError> {
    let s = map_on_tape(tape, h, &ids.f_write)?;
    let q = map_on_tape(tape, h, &ids.f_query)?;
    let r = tape.mem_read(s, q, prev, b, t, slots, mode == MemoryMode::Causal, scaled)?;
    let gr = map_on_tape(tape, r, &ids.g)?;
    let sum = tape.add(h, gr)?;
    let out = tape.layer_norm(sum, ids.ln_gain, ids.ln_bias, ln_eps)?;
    Ok((out, s))
}

/// Vectorized memory pass over plain slices: the non-sequential counterpart
/// of [`apply_sequential`], evaluated through a throwaway tape. `prev_s` is
/// the previous block's summary tensor for shared scope.
pub fn apply_parallel<E: Element>(
    h: &[E],
    b: usize,
    t: usize,
    slots: usize,
    params: &ImmParams<E>,
    mode: MemoryMode,
    prev_s: Option<&[E]>,
) -> Vec<E> {
    let d = params.g.dim();
    assert_eq!(h.len(), b * t * d);
    let mut tape = Tape::<E>::new();
    let register = |tape: &mut Tape<E>, map: &AffineMap<E>| -> MapIds {
        match map {
            AffineMap::Dense { w, b } => MapIds::Dense {
                w: tape.param(w.clone(), &[d, d]),
                b: tape.param(b.clone(), &[d]),
            },
            AffineMap::Lowrank { u, v, b } => {
                let k = u.len() / d;
                MapIds::Lowrank {
                    u: tape.param(u.clone(), &[d, k]),
                    v: tape.param(v.clone(), &[k, d]),
                    b: tape.param(b.clone(), &[d]),
                }
            }
        }
    };
    let ids = ImmParamIds {
        f_write: register(&mut tape, &params.f_write),
        f_query: register(&mut tape, &params.f_query),
        g: register(&mut tape, &params.g),
        ln_gain: tape.param(params.ln_gain.clone(), &[d]),
        ln_bias: tape.param(params.ln_bias.clone(), &[d]),
    };
    tape.freeze_params();
    let hid = tape.constant(h.to_vec(), &[b * t, d]);
    let prev = prev_s.map(|p| tape.constant(p.to_vec(), &[b * t, d]));
    let (out, _) = apply_on_tape(
        &mut tape,
        hid,
        &ids,
        b,
        t,
        slots,
        mode,
        params.scaled_scores,
        params.ln_eps,
        prev,
    )
    .expect("shapes are consistent by construction");
    tape.data(out).to_vec()
}

/// Which position's summary occupies slot `i` when position `ti` reads,
/// for a fresh bank of `slots` entries over a length-`t` sequence. `None`
/// means the slot is still zero. This is the closed form the fused kernel
/// uses; tests pin it to the write loop.
pub fn visible_source(
    ti: usize,
    i: usize,
    t: usize,
    slots: usize,
    mode: MemoryMode,
) -> Option<usize> {
    slot_source(ti, i, t, slots, mode == MemoryMode::Causal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_map(rng: &mut StdRng, variant: ImmVariant, d: usize, k: usize) -> AffineMap<f64> {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect() };
        match variant {
            ImmVariant::Dense => AffineMap::Dense {
                w: draw(d * d),
                b: draw(d),
            },
            ImmVariant::Lowrank => AffineMap::Lowrank {
                u: draw(d * k),
                v: draw(k * d),
                b: draw(d),
            },
        }
    }

    fn random_params(
        rng: &mut StdRng,
        variant: ImmVariant,
        d: usize,
        k: usize,
        scaled: bool,
    ) -> ImmParams<f64> {
        ImmParams {
            f_write: random_map(rng, variant, d, k),
            f_query: random_map(rng, variant, d, k),
            g: random_map(rng, variant, d, k),
            ln_gain: (0..d).map(|_| rng.gen_range(0.5..1.5)).collect(),
            ln_bias: (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            ln_eps: 1e-5,
            scaled_scores: scaled,
        }
    }

    fn identity_params(d: usize) -> ImmParams<f64> {
        let eye = |_: ()| -> AffineMap<f64> {
            let mut w = vec![0.0; d * d];
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
            AffineMap::Dense { w, b: vec![0.0; d] }
        };
        ImmParams {
            f_write: eye(()),
            f_query: eye(()),
            g: eye(()),
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            ln_eps: 1e-5,
            scaled_scores: false,
        }
    }

    #[test]
    fn slot_heuristic_floors_square_root() {
        assert_eq!(num_slots(128), 11);
        assert_eq!(num_slots(256), 16);
        assert_eq!(num_slots(512), 22);
        assert_eq!(num_slots(1), 1);
        assert_eq!(num_slots(0), 1);
    }

    #[test]
    fn param_count_matches_shape_walk() {
        // Dense, d=128: three (128*128 + 128) maps + 2*128 norm params.
        assert_eq!(param_count(ImmVariant::Dense, 128, 0), 49_792);
        // Low-rank d=256, k=16: 3*(2*256*16 + 256) + 512.
        assert_eq!(param_count(ImmVariant::Lowrank, 256, 16), 25_856);
        // The factored variant is smaller whenever 2k < d.
        for &d in &[128usize, 256, 512] {
            let r = num_slots(d);
            assert!(param_count(ImmVariant::Lowrank, d, r) < param_count(ImmVariant::Dense, d, 0));
        }
    }

    #[test]
    fn affine_map_variants_agree_with_tape_linears() {
        let mut rng = StdRng::seed_from_u64(31);
        let (rows, d, k) = (5, 6, 3);
        for variant in [ImmVariant::Dense, ImmVariant::Lowrank] {
            let map = random_map(&mut rng, variant, d, k);
            let x: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plain = map.apply_rows(&x, rows);
            let mut tape = Tape::<f64>::new();
            let ids = match &map {
                AffineMap::Dense { w, b } => MapIds::Dense {
                    w: tape.param(w.clone(), &[d, d]),
                    b: tape.param(b.clone(), &[d]),
                },
                AffineMap::Lowrank { u, v, b } => MapIds::Lowrank {
                    u: tape.param(u.clone(), &[d, k]),
                    v: tape.param(v.clone(), &[k, d]),
                    b: tape.param(b.clone(), &[d]),
                },
            };
            tape.freeze_params();
            let xid = tape.constant(x, &[rows, d]);
            let out = map_on_tape(&mut tape, xid, &ids).unwrap();
            for (a, b) in plain.iter().zip(tape.data(out).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_bank_reads_zero_with_uniform_weights() {
        let bank = MemoryBank::<f64>::new(2, 4, 3);
        let (r, alpha) = bank.read_raw(&[1.0, -2.0, 0.5, 0.3, 0.1, -0.9], false);
        assert_eq!(r, vec![0.0; 6]);
        for &a in &alpha {
            assert!((a - 0.25).abs() < 1e-15);
        }
        assert_eq!(bank.write_count(), 0);
    }

    #[test]
    fn write_is_round_robin_overwrite() {
        let mut bank = MemoryBank::<f64>::new(1, 2, 1);
        bank.write_raw(0, &[10.0]);
        bank.write_raw(1, &[20.0]);
        bank.write_raw(2, &[30.0]); // t=2 lands on slot 0
        assert_eq!(bank.slot(0, 0), &[30.0]);
        assert_eq!(bank.slot(0, 1), &[20.0]);
        assert_eq!(bank.write_count(), 3);
    }

    #[test]
    fn read_matches_hand_computed_softmax() {
        // Bank [[1,0],[0,1]], query [ln 2, 0]: weights [2/3, 1/3],
        // read [2/3, 1/3].
        let mut bank = MemoryBank::<f64>::new(1, 2, 2);
        bank.write_raw(0, &[1.0, 0.0]);
        bank.write_raw(1, &[0.0, 1.0]);
        let (r, alpha) = bank.read_raw(&[2.0f64.ln(), 0.0], false);
        assert!((alpha[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((alpha[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((r[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_slot_bank_returns_its_content() {
        let mut bank = MemoryBank::<f64>::new(1, 1, 3);
        bank.write_raw(0, &[4.0, -1.0, 2.5]);
        let (r, alpha) = bank.read_raw(&[9.9, 9.9, 9.9], false);
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(r, vec![4.0, -1.0, 2.5]);
    }

    #[test]
    fn reset_restores_exact_zero_state_idempotently() {
        let mut bank = MemoryBank::<f64>::new(1, 2, 2);
        bank.write_raw(0, &[1.0, 2.0]);
        bank.write_raw(1, &[3.0, 4.0]);
        let q = [0.3, -0.9];
        let before = bank.read_raw(&q, false);
        bank.reset();
        bank.reset();
        assert_eq!(bank.write_count(), 0);
        assert!(bank.slot(0, 0).iter().chain(bank.slot(0, 1)).all(|&v| v == 0.0));
        bank.write_raw(0, &[1.0, 2.0]);
        bank.write_raw(1, &[3.0, 4.0]);
        let after = bank.read_raw(&q, false);
        assert_eq!(before, after, "reset must leave no trace of earlier writes");
    }

    #[test]
    fn attention_weights_are_distributions() {
        let mut rng = StdRng::seed_from_u64(32);
        let mut bank = MemoryBank::<f64>::new(3, 5, 4);
        for t in 0..7 {
            let s: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            bank.write_raw(t, &s);
        }
        let q: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, alpha) = bank.read_raw(&q, false);
        for arow in alpha.chunks(5) {
            assert!(arow.iter().all(|&a| a >= 0.0));
            let sum: f64 = arow.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn write_uses_f_write_summary() {
        // With f_write = identity, the slot holds the hidden row itself.
        let params = identity_params(3);
        let mut bank = MemoryBank::<f64>::new(1, 2, 3);
        write(&mut bank, &[1.0, 0.0, 0.0], 0, &params);
        assert_eq!(bank.slot(0, 0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn integrate_with_zero_g_is_plain_layer_norm() {
        let d = 4;
        let mut params = identity_params(d);
        params.g = AffineMap::Dense {
            w: vec![0.0; d * d],
            b: vec![0.0; d],
        };
        let h = [1.0, 3.0, 5.0, 7.0];
        let r = [9.0, -2.0, 4.4, 0.1]; // ignored by the zero map
        let y = integrate(&h, &r, 1, &params);
        let mut want = h.to_vec();
        layer_norm_rows(&mut want, &params.ln_gain, &params.ln_bias, params.ln_eps, d);
        assert_eq!(y, want);
    }

    #[test]
    fn causal_apply_never_sees_future_positions() {
        let mut rng = StdRng::seed_from_u64(33);
        let (b, t, d, n) = (1, 6, 4, 3);
        let params = random_params(&mut rng, ImmVariant::Dense, d, 0, false);
        let mut h: Vec<f64> = (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut bank = MemoryBank::new(b, n, d);
        let base = apply_sequential(&h, b, t, &mut bank, &params, MemoryMode::Causal);
        for v in &mut h[3 * d..] {
            *v += 50.0;
        }
        bank.reset();
        let bumped = apply_sequential(&h, b, t, &mut bank, &params, MemoryMode::Causal);
        for j in 0..3 * d {
            assert_eq!(base[j], bumped[j], "positions before the bump must be untouched");
        }
        assert_ne!(&base[3 * d..], &bumped[3 * d..]);
    }

    #[test]
    fn noncausal_apply_reads_the_final_bank() {
        // All positions face the identical final bank, so two positions
        // with equal hidden rows must produce equal outputs.
        let mut rng = StdRng::seed_from_u64(34);
        let (b, t, d, n) = (1, 5, 3, 4);
        let params = random_params(&mut rng, ImmVariant::Dense, d, 0, false);
        let mut h: Vec<f64> = (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let first: Vec<f64> = h[0..d].to_vec();
        h[2 * d..3 * d].copy_from_slice(&first);
        let mut bank = MemoryBank::new(b, n, d);
        let out = apply_sequential(&h, b, t, &mut bank, &params, MemoryMode::Noncausal);
        for j in 0..d {
            assert!((out[j] - out[2 * d + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn visible_source_matches_literal_write_loop() {
        for &(t, n) in &[(1usize, 3usize), (3, 3), (5, 2), (8, 3), (2, 5)] {
            for mode in [MemoryMode::Causal, MemoryMode::Noncausal] {
                for ti in 0..t {
                    let mut holder: Vec<Option<usize>> = vec![None; n];
                    let last = match mode {
                        MemoryMode::Causal => ti,
                        MemoryMode::Noncausal => t - 1,
                    };
                    for p in 0..=last {
                        holder[p % n] = Some(p);
                    }
                    for (i, want) in holder.iter().enumerate() {
                        assert_eq!(
                            visible_source(ti, i, t, n, mode),
                            *want,
                            "t={t} n={n} ti={ti} i={i} mode={mode:?}"
                        );
                    }
                }
            }
        }
    }

    /// The central equivalence oracle: the vectorized pass must match the
    /// literal loop on instances spanning t < slots, t = slots, t > 2*slots,
    /// both variants, both modes, scaled and unscaled.
    #[test]
    fn parallel_matches_sequential_reference() {
        let mut rng = StdRng::seed_from_u64(35);
        let cases = [
            (2usize, 3usize, 4usize, 5usize),
            (1, 5, 3, 5),
            (2, 11, 4, 5),
            (3, 7, 2, 7),
            (1, 16, 6, 4),
            (2, 9, 8, 3),
        ];
        for &(b, t, d, n) in &cases {
            for variant in [ImmVariant::Dense, ImmVariant::Lowrank] {
                for mode in [MemoryMode::Causal, MemoryMode::Noncausal] {
                    for scaled in [false, true] {
                        let params = random_params(&mut rng, variant, d, 2, scaled);
                        let h: Vec<f64> =
                            (0..b * t * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
                        let mut bank = MemoryBank::new(b, n, d);
                        let want = apply_sequential(&h, b, t, &mut bank, &params, mode);
                        let got = apply_parallel(&h, b, t, n, &params, mode, None);
                        let worst = want
                            .iter()
                            .zip(got.iter())
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        assert!(
                            worst < 1e-10,
                            "b={b} t={t} d={d} n={n} {variant:?} {mode:?} scaled={scaled}: max diff {worst:e}"
                        );
                    }
                }
            }
        }
    }

    /// Shared-bank scope: a second block inherits the bank the first block
    /// left behind. The vectorized path models this with the previous
    /// block's summary tensor.
    #[test]
    fn shared_bank_chain_matches_sequential_reference() {
        let mut rng = StdRng::seed_from_u64(36);
        for &(b, t, d, n) in &[(2usize, 4usize, 3usize, 6usize), (1, 7, 4, 3), (2, 5, 2, 5)] {
            for mode in [MemoryMode::Causal, MemoryMode::Noncausal] {
                let p0 = random_params(&mut rng, ImmVariant::Dense, d, 0, false);
                let p1 = random_params(&mut rng, ImmVariant::Dense, d, 0, false);
                let h0: Vec<f64> = (0..b * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                // Sequential: one bank through both blocks.
                let mut bank = MemoryBank::new(b, n, d);
                let h1 = apply_sequential(&h0, b, t, &mut bank, &p0, mode);
                let want = apply_sequential(&h1, b, t, &mut bank, &p1, mode);
                // Vectorized: block 1 receives block 0's summaries as prev.
                let got1 = apply_parallel(&h0, b, t, n, &p0, mode, None);
                let s0 = p0.f_write.apply_rows(&h0, b * t);
                let got = apply_parallel(&got1, b, t, n, &p1, mode, Some(&s0));
                let worst = want
                    .iter()
                    .zip(got.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(
                    worst < 1e-10,
                    "b={b} t={t} d={d} n={n} {mode:?}: max diff {worst:e}"
                );
            }
        }
    }

    #[test]
    fn config_enums_serialize_to_flag_spellings() {
        assert_eq!(serde_json::to_string(&ImmVariant::Dense).unwrap(), "\"dense\"");
        assert_eq!(serde_json::to_string(&ImmVariant::Lowrank).unwrap(), "\"lowrank\"");
        assert_eq!(serde_json::to_string(&MemoryMode::Noncausal).unwrap(), "\"noncausal\"");
        assert_eq!(serde_json::to_string(&BankScope::PerLayer).unwrap(), "\"per_layer\"");
        let m: MemoryMode = serde_json::from_str("\"causal\"").unwrap();
        assert_eq!(m, MemoryMode::Causal);
    }
}
