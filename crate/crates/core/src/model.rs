//! The full dialogue model: transformer, latent nets and the wiring between
//! them for training losses and for inference.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus_gen::Vocab;
use crate::dialogue_core::{gold_stages, Db, Dialogue, DialogueModel, Stage, Style, EOS};
use crate::error::{Error, Result};
use crate::latent_style::{kl_divergence, pool, reparameterize_with, Gaussian, LatentNets};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::seq2seq::{
    generate, DecodeMode, EncoderStates, GenerateOptions, ModelConfig, PrefixSet, Seq2Seq, Site, PAD,
};

/// Token ids of the stage start markers and the end marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerIds {
    pub bos: [usize; 3],
    pub eos: usize,
}

impl MarkerIds {
    pub fn from_vocab(vocab: &Vocab) -> Result<Self> {
        let id = |t: &str| {
            vocab
                .id(t)
                .ok_or_else(|| Error::Spec(format!("vocabulary lacks marker {t}")))
        };
        Ok(Self {
            bos: [
                id(Stage::Belief.bos())?,
                id(Stage::Act.bos())?,
                id(Stage::Response.bos())?,
            ],
            eos: id(EOS)?,
        })
    }

    pub fn bos(&self, stage: Stage) -> usize {
        self.bos[stage_index(stage)]
    }
}

fn stage_index(stage: Stage) -> usize {
    match stage {
        Stage::Belief => 0,
        Stage::Act => 1,
        Stage::Response => 2,
    }
}

/// Encoder input and decoder target ids for one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageExample {
    pub input: Vec<usize>,
    /// Target body, without start or end markers.
    pub target: Vec<usize>,
}

/// One gold turn as id sequences for all three stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnExample {
    pub dialogue_id: String,
    pub turn: usize,
    pub style: Style,
    pub stages: [StageExample; 3],
}

impl TurnExample {
    pub fn stage(&self, stage: Stage) -> &StageExample {
        &self.stages[stage_index(stage)]
    }
}

/// Flattens dialogues into gold-history turn examples.
pub fn encode_turns(
    dialogues: &[Dialogue],
    db: &Db,
    vocab: &Vocab,
    context_budget: usize,
) -> Vec<TurnExample> {
    let mut out = Vec::new();
    for d in dialogues {
        for (i, turn) in d.turns.iter().enumerate() {
            let (_, seqs) = gold_stages(d, i, db, context_budget);
            let stages = seqs.map(|s| StageExample {
                input: vocab.encode_tokens(&s.input),
                target: vocab.encode_tokens(&s.target),
            });
            out.push(TurnExample {
                dialogue_id: d.id.clone(),
                turn: i,
                style: turn.style,
                stages,
            });
        }
    }
    out
}

/// Tokens reserved in the encoder window for belief, database and act.
pub const DIAL_INFO_RESERVE: usize = 24;

/// Token budget for the role-marked history under `config`.
pub fn context_budget(config: &ModelConfig) -> usize {
    config.max_seq_len.saturating_sub(DIAL_INFO_RESERVE).max(1)
}

/// Tape variables of one training turn.
#[derive(Clone, Debug)]
pub struct TurnForward {
    /// Token-mean cross-entropy of the belief, act and response stages.
    pub ce: [Var; 3],
    pub kl: Var,
    pub prior: Gaussian,
    pub posterior: Gaussian,
    pub z: Var,
    pub z_hat: Option<Var>,
}

/// Which latent drives the response at inference.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentChoice {
    PriorMean,
    /// A prior draw from the supplied RNG.
    PriorSample,
    Fixed(Vec<f64>),
}

/// Transformer plus latent networks, with their parameters.
#[derive(Clone, Debug)]
pub struct StyleDialModel {
    seq: Seq2Seq,
    latent: LatentNets,
    markers: MarkerIds,
    latent_fusion: bool,
    pub store: ParamStore,
}

/// Decoding length caps per stage.
const MAX_BELIEF: usize = 24;
const MAX_ACT: usize = 2;
const MAX_RESPONSE: usize = 40;

impl StyleDialModel {
    /// Builds a freshly initialized model; identical arguments give
    /// identical parameters.
    pub fn new(config: &ModelConfig, latent_fusion: bool, markers: MarkerIds, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let seq = Seq2Seq::build(config, &mut store, &mut rng)?;
        let latent = LatentNets::build(config, &mut store, &mut rng);
        if markers.bos.iter().chain([&markers.eos]).any(|&t| t >= config.vocab_size) {
            return Err(Error::Contract("marker id outside the vocabulary".into()));
        }
        Ok(Self {
            seq,
            latent,
            markers,
            latent_fusion,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.seq.config()
    }

    pub fn seq2seq(&self) -> &Seq2Seq {
        &self.seq
    }

    pub fn latent_nets(&self) -> &LatentNets {
        &self.latent
    }

    pub fn markers(&self) -> MarkerIds {
        self.markers
    }

    pub fn latent_fusion(&self) -> bool {
        self.latent_fusion
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.latent_dim()
    }

    fn teacher_ce(
        &self,
        tape: &mut Tape,
        stage: Stage,
        memory: Var,
        enc: &EncoderStates,
        target: &[usize],
        prefixes: &PrefixSet,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut prev = alloc::vec![self.markers.bos(stage)];
        prev.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(self.markers.eos);
        let logits = self
            .seq
            .decode(tape, &self.store, memory, &enc.mask, &prev, prefixes, rng)?;
        tape.cross_entropy(logits, &gold, PAD)
    }

    /// Belief or act stage: base prefixes, no latent.
    fn plain_stage_ce(
        &self,
        tape: &mut Tape,
        stage: Stage,
        ex: &StageExample,
        base: &PrefixSet,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let enc = self
            .seq
            .encode(tape, &self.store, &ex.input, base, reborrow(&mut rng))?;
        self.teacher_ce(tape, stage, enc.states, &enc, &ex.target, base, rng)
    }

    /// Prefixes and decoder memory for a given latent `z`. `h_base` is the
    /// encoding under base prefixes; the input is re-encoded when the
    /// encoder carries latent-conditioned prefixes.
    fn condition_on(
        &self,
        tape: &mut Tape,
        input: &[usize],
        h_base: EncoderStates,
        base: &PrefixSet,
        z: Var,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(EncoderStates, Var, PrefixSet)> {
        let prefixes = if base.is_empty() {
            PrefixSet::empty()
        } else {
            self.latent.style_prefix_from_z(tape, &self.store, z, base)?
        };
        let enc = if self.config().active_sites().contains(&Site::EncoderSelf) {
            self.seq.encode(tape, &self.store, input, &prefixes, rng)?
        } else {
            h_base
        };
        let memory = if self.latent_fusion {
            self.latent.fuse(tape, &self.store, z, &enc)?
        } else {
            enc.states
        };
        Ok((enc, memory, prefixes))
    }

    /// Prior and posterior of the response latent.
    pub fn latent_distributions(
        &self,
        tape: &mut Tape,
        input: &[usize],
        response: &[usize],
        base: &PrefixSet,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(EncoderStates, Gaussian, Gaussian)> {
        let h = self
            .seq
            .encode(tape, &self.store, input, base, reborrow(&mut rng))?;
        let r_tokens = if response.is_empty() {
            alloc::vec![self.markers.eos]
        } else {
            response.to_vec()
        };
        let r = self.seq.encode(tape, &self.store, &r_tokens, base, rng)?;
        let hp = pool(tape, &h)?;
        let rp = pool(tape, &r)?;
        let prior = self.latent.prior(tape, &self.store, hp)?;
        let posterior = self.latent.posterior(tape, &self.store, hp, rp)?;
        Ok((h, prior, posterior))
    }

    /// All per-turn training quantities. `eps` holds one or two noise
    /// vectors for the posterior draws; the first one drives decoding.
    pub fn forward_turn(
        &self,
        tape: &mut Tape,
        ex: &TurnExample,
        eps: Vec<Vec<f64>>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<TurnForward> {
        let base = self.seq.base_prefixes(tape, &self.store);
        let ce_b = self.plain_stage_ce(tape, Stage::Belief, &ex.stages[0], &base, reborrow(&mut rng))?;
        let ce_a = self.plain_stage_ce(tape, Stage::Act, &ex.stages[1], &base, reborrow(&mut rng))?;
        let resp = &ex.stages[2];
        let (h, prior, posterior) =
            self.latent_distributions(tape, &resp.input, &resp.target, &base, reborrow(&mut rng))?;
        let sample = reparameterize_with(tape, posterior, eps)?;
        let (enc, memory, prefixes) =
            self.condition_on(tape, &resp.input, h, &base, sample.z, reborrow(&mut rng))?;
        let ce_r = self.teacher_ce(tape, Stage::Response, memory, &enc, &resp.target, &prefixes, rng)?;
        let kl = kl_divergence(tape, posterior, prior)?;
        Ok(TurnForward {
            ce: [ce_b, ce_a, ce_r],
            kl,
            prior,
            posterior,
            z: sample.z,
            z_hat: sample.z_hat,
        })
    }

    /// Posterior and prior `(μ, σ)` of one turn, as plain vectors.
    pub fn latent_stats(&self, ex: &TurnExample) -> Result<LatentStats> {
        let mut tape = Tape::inference();
        let base = self.seq.base_prefixes(&mut tape, &self.store);
        let resp = ex.stage(Stage::Response);
        let (_, prior, post) = self.latent_distributions(&mut tape, &resp.input, &resp.target, &base, None)?;
        let v = |x: Var| tape.value(x).data().to_vec();
        Ok(LatentStats {
            prior_mu: v(prior.mu),
            prior_sigma: v(prior.sigma),
            posterior_mu: v(post.mu),
            posterior_sigma: v(post.sigma),
        })
    }

    /// Greedy (or top-k) decoding of a belief or act stage.
    fn generate_plain(
        &self,
        stage: Stage,
        input: &[usize],
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::inference();
        let base = self.seq.base_prefixes(&mut tape, &self.store);
        let enc = self.seq.encode(&mut tape, &self.store, input, &base, None)?;
        let max_len = if stage == Stage::Act { MAX_ACT } else { MAX_BELIEF };
        let opts = GenerateOptions {
            bos: self.markers.bos(stage),
            eos: self.markers.eos,
            max_len: max_len.min(self.config().max_seq_len),
            mode,
        };
        generate(&self.seq, &mut tape, &self.store, &enc, enc.states, &base, opts, rng)
    }

    /// Response for a Dial-INFO input under the chosen latent. Prior-based
    /// and forced latents share everything downstream of `z`.
    pub fn respond_with_latent(
        &self,
        input: &[usize],
        latent: &LatentChoice,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::inference();
        let base = self.seq.base_prefixes(&mut tape, &self.store);
        let h = self.seq.encode(&mut tape, &self.store, input, &base, None)?;
        let z = match latent {
            LatentChoice::Fixed(v) => {
                if v.len() != self.latent_dim() {
                    return Err(Error::Contract(format!(
                        "forced latent has {} dims, expected {}",
                        v.len(),
                        self.latent_dim()
                    )));
                }
                tape.constant(Tensor::vector(v.clone()))?
            }
            LatentChoice::PriorMean | LatentChoice::PriorSample => {
                let hp = pool(&mut tape, &h)?;
                let prior = self.latent.prior(&mut tape, &self.store, hp)?;
                if *latent == LatentChoice::PriorMean {
                    prior.mu
                } else {
                    let eps: Vec<f64> = (0..self.latent_dim())
                        .map(|_| StandardNormal.sample(&mut *rng))
                        .collect();
                    reparameterize_with(&mut tape, prior, alloc::vec![eps])?.z
                }
            }
        };
        self.respond_from_z(&mut tape, input, h, &base, z, mode, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn respond_from_z(
        &self,
        tape: &mut Tape,
        input: &[usize],
        h: EncoderStates,
        base: &PrefixSet,
        z: Var,
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let (enc, memory, prefixes) = self.condition_on(tape, input, h, base, z, None)?;
        let opts = GenerateOptions {
            bos: self.markers.bos(Stage::Response),
            eos: self.markers.eos,
            max_len: MAX_RESPONSE.min(self.config().max_seq_len),
            mode,
        };
        generate(&self.seq, tape, &self.store, &enc, memory, &prefixes, opts, rng)
    }

    /// Response decoded from `z = μ + σ ⊙ ε` for explicit `(μ, σ, ε)`.
    pub fn respond_with_gaussian(
        &self,
        input: &[usize],
        mu: &[f64],
        sigma: &[f64],
        eps: &[f64],
        mode: DecodeMode,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::inference();
        let base = self.seq.base_prefixes(&mut tape, &self.store);
        let h = self.seq.encode(&mut tape, &self.store, input, &base, None)?;
        let g = Gaussian {
            mu: tape.constant(Tensor::vector(mu.to_vec()))?,
            sigma: tape.constant(Tensor::vector(sigma.to_vec()))?,
        };
        let z = reparameterize_with(&mut tape, g, alloc::vec![eps.to_vec()])?.z;
        self.respond_from_z(&mut tape, input, h, &base, z, mode, rng)
    }

    /// Teacher-forced response cross-entropy under the prior mean.
    pub fn response_nll_prior_mean(&self, ex: &StageExample) -> Result<f64> {
        let mut tape = Tape::inference();
        let base = self.seq.base_prefixes(&mut tape, &self.store);
        let h = self.seq.encode(&mut tape, &self.store, &ex.input, &base, None)?;
        let hp = pool(&mut tape, &h)?;
        let prior = self.latent.prior(&mut tape, &self.store, hp)?;
        let (enc, memory, prefixes) = self.condition_on(&mut tape, &ex.input, h, &base, prior.mu, None)?;
        let ce = self.teacher_ce(&mut tape, Stage::Response, memory, &enc, &ex.target, &prefixes, None)?;
        Ok(tape.value(ce).item())
    }
}

/// Prior and posterior parameters of one turn's latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub prior_mu: Vec<f64>,
    pub prior_sigma: Vec<f64>,
    pub posterior_mu: Vec<f64>,
    pub posterior_sigma: Vec<f64>,
}

/// Adapts a trained model to the cascade's [`DialogueModel`] interface.
pub struct NeuralAgent<'a> {
    pub model: &'a StyleDialModel,
    pub vocab: &'a Vocab,
    pub latent: LatentChoice,
    pub mode: DecodeMode,
    pub rng: ChaCha8Rng,
}

impl<'a> NeuralAgent<'a> {
    pub fn new(model: &'a StyleDialModel, vocab: &'a Vocab, latent: LatentChoice, seed: u64) -> Self {
        Self {
            model,
            vocab,
            latent,
            mode: DecodeMode::Greedy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl DialogueModel for NeuralAgent<'_> {
    fn generate(&mut self, stage: Stage, input: &[String]) -> Result<Vec<String>> {
        let ids = self.vocab.encode_tokens(input);
        let out = match stage {
            Stage::Response => self
                .model
                .respond_with_latent(&ids, &self.latent, self.mode, &mut self.rng)?,
            _ => self.model.generate_plain(stage, &ids, self.mode, &mut self.rng)?,
        };
        Ok(out.iter().map(|&i| self.vocab.token(i).to_string()).collect())
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}
