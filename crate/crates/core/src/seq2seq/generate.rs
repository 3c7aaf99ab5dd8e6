use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::{EncoderStates, PrefixSet, Seq2Seq};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    /// Sample among the `k` highest-scoring tokens.
    TopK(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Start token fed to the decoder; not part of the output.
    pub bos: usize,
    pub eos: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
}

/// Autoregressive decoding from `bos` until `eos` or `max_len` tokens.
/// Returns the generated tokens without `bos` and `eos`.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &Seq2Seq,
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderStates,
    fused_kv: crate::numerics::Var,
    prefixes: &PrefixSet,
    opts: GenerateOptions,
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>> {
    if opts.max_len > model.config().max_seq_len {
        return Err(Error::Contract(format!(
            "max_len {} exceeds max_seq_len {}",
            opts.max_len,
            model.config().max_seq_len
        )));
    }
    let mut seq = alloc::vec![opts.bos];
    for _ in 0..opts.max_len {
        let logits = model.decode_step(tape, store, enc, fused_kv, &seq, prefixes)?;
        let next = pick(tape.value(logits).data(), opts.mode, rng)?;
        if next == opts.eos {
            break;
        }
        seq.push(next);
    }
    seq.remove(0);
    Ok(seq)
}

/// Index of the largest logit; ties go to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn pick(logits: &[f64], mode: DecodeMode, rng: &mut dyn RngCore) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => Ok(argmax(logits)),
        DecodeMode::TopK(k) => {
            if k == 0 {
                return Err(Error::InvalidParameter("top-k with k = 0".into()));
            }
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(k);
            let max = logits[order[0]];
            let w: Vec<f64> = order.iter().map(|&i| libm::exp(logits[i] - max)).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (&i, &wi) in order.iter().zip(&w) {
                if u < wi {
                    return Ok(i);
                }
                u -= wi;
            }
            Ok(order[order.len() - 1])
        }
    }
}
