//! Central-difference gradient verification for any differentiable program
//! expressed on a tape, including a whole model on a fixed batch.

use std::fmt;

use crate::element::{c, Element};
use crate::model::GPTModel;
use crate::tape::{Tape, TensorId};

/// Something that can rebuild its loss from the current parameter values.
/// The loss must be a pure function of the parameters; the checker verifies
/// this by evaluating twice before measuring anything.
pub trait LossProgram<E: Element> {
    fn tape_mut(&mut self) -> &mut Tape<E>;
    fn loss(&mut self) -> Result<TensorId, String>;
}

/// A model plus one fixed batch, evaluated without dropout.
pub struct ModelBatch<'m, E: Element> {
    pub model: &'m mut GPTModel<E>,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub b: usize,
    pub t: usize,
}

impl<E: Element> LossProgram<E> for ModelBatch<'_, E> {
    fn tape_mut(&mut self) -> &mut Tape<E> {
        self.model.tape_mut()
    }

    fn loss(&mut self) -> Result<TensorId, String> {
        self.model
            .loss(&self.tokens, &self.targets, self.b, self.t, None)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug)]
pub enum GradCheckError {
    /// Two evaluations of the loss differed, so finite differences would
    /// measure noise instead of gradients.
    NonDeterministic { first: f64, second: f64 },
    Eval(String),
}

impl fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradCheckError::NonDeterministic { first, second } => write!(
                f,
                "loss is not deterministic ({first} vs {second}); cannot check gradients"
            ),
            GradCheckError::Eval(m) => write!(f, "loss evaluation failed: {m}"),
        }
    }
}

impl std::error::Error for GradCheckError {}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Elements actually probed (all of them unless a limit was set).
    pub checked: usize,
}

/// Worst entry of a report, for the one-line verdict.
pub fn worst(reports: &[ParamReport]) -> Option<&ParamReport> {
    reports
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
}

/// Adds seeded uniform noise in [-scale, scale] to every parameter. Fresh
/// 0.02-std inits leave some memory-attention gradients below what central
/// differences can resolve in 64-bit, so checks run at a generic point.
pub fn randomize_params<E: Element>(model: &mut GPTModel<E>, scale: f64, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let ids: Vec<TensorId> = model.named_params().map(|(_, id)| id).collect();
    for id in ids {
        for v in model.tape_mut().data_mut(id) {
            *v = *v + c(rng.gen_range(-scale..scale));
        }
    }
}

/// The small memory-equipped configuration the verification command runs:
/// width 8, 3 slots, rank 2, two layers, checked on a T=5, B=2 batch in
/// 64-bit.
pub fn verification_model_config(variant: crate::imm::ImmVariant) -> crate::model::ModelConfig {
    crate::model::ModelConfig {
        vocab_size: 11,
        block_size: 8,
        n_layer: 2,
        n_head: 2,
        n_embd: 8,
        dropout: 0.0,
        imm_enabled: true,
        imm_variant: variant,
        imm_slots: 3,
        imm_rank: 2,
        imm_memory_mode: crate::imm::MemoryMode::Causal,
        imm_bank_scope: crate::imm::BankScope::PerLayer,
        imm_scaled_scores: false,
        seed: 99,
    }
}

fn eval<E: Element, P: LossProgram<E> + ?Sized>(prog: &mut P) -> Result<f64, GradCheckError> {
    let id = prog.loss().map_err(GradCheckError::Eval)?;
    Ok(prog.tape_mut().value(id).to_f64())
}

/// Checks every named parameter's analytic gradient against central
/// differences with step `eps`. `limit` caps probed elements per parameter
/// (an evenly spaced deterministic subset); None probes all. Relative error
/// is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<E: Element, P: LossProgram<E> + ?Sized>(
    prog: &mut P,
    named: &[(String, TensorId)],
    eps: f64,
    limit: Option<usize>,
) -> Result<Vec<ParamReport>, GradCheckError> {
    let analytic = analytic_grads(prog, named)?;
    grad_check_against(prog, named, &analytic, eps, limit)
}

/// The analytic gradients of the loss for each named parameter, from one
/// backward pass.
pub fn analytic_grads<E: Element, P: LossProgram<E> + ?Sized>(
    prog: &mut P,
    named: &[(String, TensorId)],
) -> Result<Vec<Vec<f64>>, GradCheckError> {
    let first = eval(prog)?;
    let second = eval(prog)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }
    let loss = prog.loss().map_err(GradCheckError::Eval)?;
    let tape = prog.tape_mut();
    tape.zero_grads();
    tape.backward(loss)
        .map_err(|e| GradCheckError::Eval(e.to_string()))?;
    Ok(named
        .iter()
        .map(|&(_, id)| tape.grad(id).iter().map(|&g| Element::to_f64(g)).collect())
        .collect())
}

/// Central-difference comparison against externally supplied gradients.
/// [`grad_check`] feeds it the tape's own backward results; tests feed it
/// corrupted ones to prove the checker catches wrong gradients.
pub fn grad_check_against<E: Element, P: LossProgram<E> + ?Sized>(
    prog: &mut P,
    named: &[(String, TensorId)],
    analytic: &[Vec<f64>],
    eps: f64,
    limit: Option<usize>,
) -> Result<Vec<ParamReport>, GradCheckError> {
    assert_eq!(named.len(), analytic.len());
    let mut reports = Vec::with_capacity(named.len());
    for ((name, id), grads) in named.iter().zip(analytic.iter()) {
        let n = grads.len();
        let indices: Vec<usize> = match limit {
            Some(k) if k < n && k > 0 => {
                // Evenly spaced deterministic coverage of the tensor.
                (0..k).map(|i| i * n / k).collect()
            }
            _ => (0..n).collect(),
        };
        let mut max_rel = 0.0f64;
        for &j in &indices {
            let orig = prog.tape_mut().data(*id)[j];
            prog.tape_mut().data_mut(*id)[j] = orig + c(eps);
            let plus = eval(prog)?;
            prog.tape_mut().data_mut(*id)[j] = orig - c(eps);
            let minus = eval(prog)?;
            prog.tape_mut().data_mut(*id)[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_err: max_rel,
            checked: indices.len(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imm::ImmVariant;
    use crate::tape::TensorError;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// A plain affine regression program with a quadratic loss substitute
    /// (sum of outputs), entirely linear in the parameters.
    struct LinearProgram {
        tape: Tape<f64>,
        w: TensorId,
        b: TensorId,
        x: Vec<f64>,
    }

    impl LinearProgram {
        fn new() -> Self {
            let mut rng = StdRng::seed_from_u64(50);
            let mut tape = Tape::<f64>::new();
            let w = tape.param((0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[4, 3]);
            let b = tape.param((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[3]);
            tape.freeze_params();
            let x = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            LinearProgram { tape, w, b, x }
        }

        fn named(&self) -> Vec<(String, TensorId)> {
            vec![("w".into(), self.w), ("b".into(), self.b)]
        }
    }

    impl LossProgram<f64> for LinearProgram {
        fn tape_mut(&mut self) -> &mut Tape<f64> {
            &mut self.tape
        }

        fn loss(&mut self) -> Result<TensorId, String> {
            self.tape.reset();
            let x = self.tape.constant(self.x.clone(), &[5, 4]);
            let y = self
                .tape
                .linear(x, self.w, Some(self.b))
                .map_err(|e: TensorError| e.to_string())?;
            Ok(self.tape.sum_all(y))
        }
    }

    #[test]
    fn linear_program_checks_to_roundoff() {
        let mut prog = LinearProgram::new();
        let named = prog.named();
        let reports = grad_check(&mut prog, &named, 1e-5, None).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-8,
                "{} error {} should be at roundoff for a linear loss",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let mut prog = LinearProgram::new();
        let named = prog.named();
        let mut analytic = analytic_grads(&mut prog, &named).unwrap();
        for g in analytic[0].iter_mut() {
            *g *= 1.01;
        }
        let reports = grad_check_against(&mut prog, &named, &analytic, 1e-5, None).unwrap();
        assert!(
            reports[0].max_rel_err > 1e-4,
            "a one percent corruption must exceed the tolerance, got {}",
            reports[0].max_rel_err
        );
        assert!(reports[1].max_rel_err < 1e-8, "untouched parameter stays clean");
        assert_eq!(worst(&reports).unwrap().name, "w");
    }

    struct FlickeringProgram {
        inner: LinearProgram,
        calls: usize,
    }

    impl LossProgram<f64> for FlickeringProgram {
        fn tape_mut(&mut self) -> &mut Tape<f64> {
            self.inner.tape_mut()
        }

        fn loss(&mut self) -> Result<TensorId, String> {
            self.calls += 1;
            let id = self.inner.loss()?;
            let bump = self.calls as f64 * 1e-3;
            let noisy = self.inner.tape.constant(vec![bump], &[1]);
            self.inner.tape.add(id, noisy).map_err(|e| e.to_string())
        }
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut prog = FlickeringProgram {
            inner: LinearProgram::new(),
            calls: 0,
        };
        let named = prog.inner.named();
        match grad_check(&mut prog, &named, 1e-5, None) {
            Err(GradCheckError::NonDeterministic { .. }) => {}
            other => panic!("expected nondeterminism rejection, got {other:?}"),
        }
    }

    #[test]
    fn subset_limit_probes_fewer_elements() {
        let mut prog = LinearProgram::new();
        let named = prog.named();
        let reports = grad_check(&mut prog, &named, 1e-5, Some(5)).unwrap();
        assert_eq!(reports[0].checked, 5);
        assert_eq!(reports[1].checked, 3, "limit above the size probes everything");
    }

    #[test]
    fn whole_model_gradients_verify_in_both_variants() {
        let mut rng = StdRng::seed_from_u64(51);
        for variant in [ImmVariant::Dense, ImmVariant::Lowrank] {
            let mut model = GPTModel::<f64>::new(verification_model_config(variant)).unwrap();
            randomize_params(&mut model, 0.25, 52);
            let named: Vec<(String, TensorId)> = model
                .named_params()
                .map(|(n, id)| (n.to_string(), id))
                .collect();
            let (b, t) = (2, 5);
            let mut prog = ModelBatch {
                model: &mut model,
                tokens: (0..b * t).map(|_| rng.gen_range(0..11)).collect(),
                targets: (0..b * t).map(|_| rng.gen_range(0..11)).collect(),
                b,
                t,
            };
            // Cap per-tensor probes to keep the unit test quick; the
            // acceptance suite checks every element.
            let reports = grad_check(&mut prog, &named, 1e-5, Some(24)).unwrap();
            for r in &reports {
                assert!(
                    r.max_rel_err < 1e-4,
                    "{} ({variant:?}) rel err {}",
                    r.name,
                    r.max_rel_err
                );
            }
            let imm_rows = reports.iter().filter(|r| r.name.contains(".imm.")).count();
            let expected = match variant {
                ImmVariant::Dense => 8,
                ImmVariant::Lowrank => 11,
            } * 2;
            assert_eq!(imm_rows, expected, "every memory tensor must be covered");
        }
    }
}
