//! Composite-objective training: losses, AdamW with warmup and decay,
//! per-epoch dev selection, resumable state, and experiment suites.

mod eval;
mod optim;
mod suite;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrast::{
    build_self_supervised_triplets, build_supervised_triplets, info_nce_loss, triplet_loss,
    DEFAULT_MARGIN,
};
use crate::corpus_gen::{derived_rng, Corpus};
use crate::dialogue_core::Style;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{context_budget, encode_turns, MarkerIds, StyleDialModel, TurnExample};
use crate::numerics::{Tape, Var};
use crate::seq2seq::ModelConfig;

pub use eval::{
    evaluate_model, forced_latent_responses, latent_diagnostics, latent_records, style_centroids,
    EvalOptions, LatentRecord,
};
pub use optim::{alpha_at, clip_grad_norm, lr_at, AdamW};
pub use suite::{
    ablation_configs, ablation_suite, run_and_evaluate, summarize, sweep, sweep_points, PREFIX_LEN_GRID, PREFIX_POS_GRID, AblationReport, AblationRow, RunSummary,
    SweepAxis, SweepReport, SweepRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastMode {
    Off,
    Supervised,
    SelfSupervised,
    /// Self-supervised pairs scored with InfoNCE instead of triplets.
    InfoNce,
}

impl ContrastMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "supervised" => Ok(Self::Supervised),
            "self-supervised" => Ok(Self::SelfSupervised),
            "info-nce" => Ok(Self::InfoNce),
            other => Err(Error::InvalidParameter(format!("contrast mode `{other}`"))),
        }
    }

    /// Posterior draws needed per example.
    pub fn draws(self) -> usize {
        match self {
            Self::SelfSupervised | Self::InfoNce => 2,
            _ => 1,
        }
    }
}

/// How the best epoch is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevSelection {
    /// Highest dev Combined from full cascade decoding.
    Combined,
    /// Lowest dev teacher-forced loss.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_rate: f64,
    /// KL weight after annealing.
    pub alpha: f64,
    /// Fraction of all steps over which the KL weight ramps up from 0.
    pub kl_anneal_rate: f64,
    /// Contrastive weight.
    pub beta: f64,
    pub margin: f64,
    pub temperature: f64,
    pub contrast_mode: ContrastMode,
    pub latent_fusion: bool,
    pub style_prefix: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub dev_selection: DevSelection,
    /// Architecture; `vocab_size` is taken from the corpus.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            batch_size: 12,
            epochs: 12,
            warmup_rate: 0.1,
            alpha: 1.0,
            kl_anneal_rate: 0.2,
            beta: 0.1,
            margin: DEFAULT_MARGIN,
            temperature: 0.1,
            contrast_mode: ContrastMode::Supervised,
            latent_fusion: true,
            style_prefix: true,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 1,
            dev_selection: DevSelection::Combined,
            model: ModelConfig::new(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha {} and beta {} must be >= 0", self.alpha, self.beta));
        }
        if !(0.0..=1.0).contains(&self.warmup_rate) || !(0.0..=1.0).contains(&self.kl_anneal_rate) {
            return bad("warmup_rate and kl_anneal_rate must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {}", self.lr));
        }
        if !(self.margin >= 0.0) || !(self.temperature > 0.0) {
            return bad("margin must be >= 0 and temperature > 0".into());
        }
        if self.contrast_mode != ContrastMode::Off && self.batch_size < 2 {
            return bad("contrastive training needs batches of two or more".into());
        }
        Ok(())
    }

    /// The architecture for a vocabulary of `vocab_size`; turning the style
    /// prefix off removes prefixes altogether.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        if !self.style_prefix {
            m.prefix_len = 0;
        }
        m
    }
}

/// Loss terms of one batch on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub mle: Var,
    pub kl: Var,
    /// `None` when contrast is off or the batch has no usable triplet.
    pub cl: Option<Var>,
}

/// Standard-normal noise for each example: `draws` vectors of `dim`.
pub fn draw_noise(rng: &mut dyn RngCore, examples: usize, draws: usize, dim: usize) -> Vec<Vec<Vec<f64>>> {
    (0..examples)
        .map(|_| {
            (0..draws)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect())
                .collect()
        })
        .collect()
}

/// `L = L_MLE + α L_KL + β L_CL` for a batch with the given posterior noise.
///
/// `L_MLE` is the batch mean of the summed token-mean cross-entropies of
/// the belief, act and response stages; `L_KL` the batch mean KL; `L_CL`
/// the contrastive loss. Supervised triplets compare posterior means; the
/// self-supervised and InfoNCE variants compare posterior draws.
pub fn compute_loss(
    tape: &mut Tape,
    model: &StyleDialModel,
    batch: &[&TurnExample],
    cfg: &TrainConfig,
    alpha: f64,
    noise: &[Vec<Vec<f64>>],
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("training batch"));
    }
    if noise.len() != batch.len() {
        return Err(Error::Contract("one noise entry per example required".into()));
    }
    let mut mle_sum: Option<Var> = None;
    let mut kl_sum: Option<Var> = None;
    let mut zs = Vec::with_capacity(batch.len());
    let mut mus = Vec::with_capacity(batch.len());
    let mut z_hats = Vec::new();
    for (ex, eps) in batch.iter().zip(noise) {
        let f = model.forward_turn(tape, ex, eps.clone(), dropout.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let s = tape.add(f.ce[0], f.ce[1])?;
        let s = tape.add(s, f.ce[2])?;
        mle_sum = Some(match mle_sum {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        kl_sum = Some(match kl_sum {
            Some(acc) => tape.add(acc, f.kl)?,
            None => f.kl,
        });
        zs.push(f.z);
        mus.push(f.posterior.mu);
        z_hats.extend(f.z_hat);
    }
    let inv = 1.0 / batch.len() as f64;
    let mle = tape.scale(mle_sum.expect("non-empty"), inv)?;
    let kl = tape.scale(kl_sum.expect("non-empty"), inv)?;
    let cl = match cfg.contrast_mode {
        ContrastMode::Off => None,
        ContrastMode::Supervised => {
            let labels: Vec<Style> = batch.iter().map(|e| e.style).collect();
            let trip = build_supervised_triplets(&labels);
            if trip.is_empty() {
                None
            } else {
                Some(triplet_loss(tape, &mus, &trip, cfg.margin)?)
            }
        }
        ContrastMode::SelfSupervised => {
            check_pairs(&z_hats, batch.len())?;
            let trip = build_self_supervised_triplets(batch.len());
            let mut pool = zs.clone();
            pool.extend(&z_hats);
            if trip.is_empty() {
                None
            } else {
                Some(triplet_loss(tape, &pool, &trip, cfg.margin)?)
            }
        }
        ContrastMode::InfoNce => {
            check_pairs(&z_hats, batch.len())?;
            if batch.len() < 2 {
                None
            } else {
                Some(info_nce_loss(tape, &zs, &z_hats, cfg.temperature)?)
            }
        }
    };
    let w_kl = tape.scale(kl, alpha)?;
    let mut total = tape.add(mle, w_kl)?;
    if let Some(c) = cl {
        let w_cl = tape.scale(c, cfg.beta)?;
        total = tape.add(total, w_cl)?;
    }
    Ok(BatchLoss { total, mle, kl, cl })
}

fn check_pairs(z_hats: &[Var], n: usize) -> Result<()> {
    if z_hats.len() != n {
        return Err(Error::Contract("pairwise contrast needs two posterior draws per example".into()));
    }
    Ok(())
}

/// Logged quantities of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub loss: f64,
    pub mle: f64,
    pub kl: f64,
    pub cl: f64,
    pub grad_norm: f64,
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub mle: f64,
    pub kl: f64,
    pub cl: f64,
    /// Mean contrastive loss over the first and last tenth of the epoch.
    pub cl_start: f64,
    pub cl_end: f64,
    pub dev_loss: f64,
    pub dev: Option<MetricsReport>,
    /// Score used for best-epoch selection (higher is better).
    pub dev_score: f64,
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: usize,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
}

/// Callbacks for checkpointing and progress.
pub trait TrainHooks {
    /// Called after every epoch with the current model; `is_best` marks a
    /// new best dev score.
    fn epoch_end(&mut self, _model: &StyleDialModel, _state: &TrainState, _is_best: bool) -> Result<()> {
        Ok(())
    }

    fn step_end(&mut self, _record: &StepRecord) {}
}

impl TrainHooks for () {}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model after the last epoch.
    pub last: StyleDialModel,
    /// Model of the best dev epoch.
    pub best: StyleDialModel,
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    /// Per-style mean posterior μ on the training split, from `best`.
    pub centroids: BTreeMap<Style, Vec<f64>>,
}

/// Fresh model and optimizer for `corpus` under `cfg`.
pub fn init_model(corpus: &Corpus, cfg: &TrainConfig) -> Result<(StyleDialModel, TrainState)> {
    cfg.validate()?;
    let mc = cfg.model_config(corpus.vocab.len());
    let markers = MarkerIds::from_vocab(&corpus.vocab)?;
    let model = StyleDialModel::new(&mc, cfg.latent_fusion, markers, cfg.seed)?;
    let state = TrainState {
        epochs_done: 0,
        step: 0,
        optimizer: AdamW::new(&model.store, cfg.weight_decay),
        history: Vec::new(),
        best_epoch: None,
        best_score: None,
    };
    Ok((model, state))
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Trains from scratch.
pub fn train(corpus: &Corpus, cfg: &TrainConfig, hooks: &mut dyn TrainHooks) -> Result<TrainOutcome> {
    let (model, state) = init_model(corpus, cfg)?;
    resume(corpus, cfg, model, state, None, hooks)
}

/// Continues training from an epoch boundary. `best` is the best model so
/// far, when one exists. All randomness is derived from the seed and the
/// epoch index, so resuming reproduces an uninterrupted run exactly.
pub fn resume(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut model: StyleDialModel,
    mut state: TrainState,
    best: Option<StyleDialModel>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let expected = cfg.model_config(corpus.vocab.len());
    if *model.config() != expected {
        return Err(Error::ConfigMismatch("model does not match the training config".into()));
    }
    let budget = context_budget(model.config());
    let train_ex = encode_turns(corpus.train(), &corpus.db, &corpus.vocab, budget);
    let dev_ex = encode_turns(corpus.dev(), &corpus.db, &corpus.vocab, budget);
    if train_ex.is_empty() {
        return Err(Error::EmptyBatch("training split has no turns"));
    }
    let per_epoch = train_ex.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut best = best.unwrap_or_else(|| model.clone());
    let mut steps = Vec::new();
    let draws = cfg.contrast_mode.draws();
    let dim = model.latent_dim();
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train_ex.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        let mut noise_rng = derived_rng(cfg.seed ^ NOISE_STREAM, epoch as u64);
        let mut drop_rng = derived_rng(cfg.seed ^ DROPOUT_STREAM, epoch as u64);
        let mut records: Vec<StepRecord> = Vec::with_capacity(per_epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TurnExample> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let lr = lr_at(state.step + 1, total, cfg.warmup_rate, cfg.lr);
            let alpha = alpha_at(state.step, total, cfg.kl_anneal_rate, cfg.alpha);
            let noise = draw_noise(&mut noise_rng, batch.len(), draws, dim);
            let rec = train_step(&mut model, &mut state, &batch, cfg, lr, alpha, &noise, &mut drop_rng)
                .map_err(|e| numeric_context(e, epoch, state.step, &batch))?;
            hooks.step_end(&rec);
            records.push(rec);
        }
        let dev_loss = dev_loss(&model, &dev_ex)?;
        let dev = match cfg.dev_selection {
            DevSelection::Combined if !corpus.dev().is_empty() => {
                let opts = EvalOptions::default_for(cfg.seed);
                Some(evaluate_model(&model, &corpus.vocab, corpus.dev(), &corpus.db, &opts)?.1)
            }
            _ => None,
        };
        let dev_score = dev.as_ref().and_then(|r| r.combined).unwrap_or(-dev_loss);
        let rec = epoch_record(epoch, &records, dev_loss, dev, dev_score);
        steps.extend(records);
        state.epochs_done = epoch + 1;
        state.history.push(rec);
        let is_best = state.best_score.is_none_or(|b| dev_score > b);
        if is_best {
            state.best_score = Some(dev_score);
            state.best_epoch = Some(epoch);
            best = model.clone();
        }
        hooks.epoch_end(&model, &state, is_best)?;
    }
    let centroids = style_centroids(&best, &train_ex)?;
    Ok(TrainOutcome {
        last: model,
        best,
        state,
        steps,
        centroids,
    })
}

fn numeric_context(e: Error, epoch: usize, step: usize, batch: &[&TurnExample]) -> Error {
    if !e.is_numeric() {
        return e;
    }
    Error::NumericFailure {
        epoch,
        step,
        detail: e.to_string(),
        batch: batch
            .iter()
            .map(|b| format!("{}:{}", b.dialogue_id, b.turn))
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut StyleDialModel,
    state: &mut TrainState,
    batch: &[&TurnExample],
    cfg: &TrainConfig,
    lr: f64,
    alpha: f64,
    noise: &[Vec<Vec<f64>>],
    drop_rng: &mut dyn RngCore,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let loss = compute_loss(&mut tape, model, batch, cfg, alpha, noise, Some(drop_rng))?;
    tape.backward(loss.total)?;
    model.store.zero_grad();
    tape.accumulate_param_grads(&mut model.store);
    let grad_norm = clip_grad_norm(&mut model.store, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    state.optimizer.step(&mut model.store, lr)?;
    if model.store.iter().any(|(_, p)| !p.value.all_finite()) {
        return Err(Error::NonFinite("parameter update"));
    }
    state.step += 1;
    let v = |x: Var| tape.value(x).item();
    Ok(StepRecord {
        epoch: state.epochs_done,
        step: state.step,
        lr,
        alpha,
        loss: v(loss.total),
        mle: v(loss.mle),
        kl: v(loss.kl),
        cl: loss.cl.map_or(0.0, v),
        grad_norm,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn epoch_record(
    epoch: usize,
    records: &[StepRecord],
    dev_loss: f64,
    dev: Option<MetricsReport>,
    dev_score: f64,
) -> EpochRecord {
    let tenth = (records.len() / 10).max(1);
    EpochRecord {
        epoch,
        steps: records.len(),
        loss: mean(records.iter().map(|r| r.loss)),
        mle: mean(records.iter().map(|r| r.mle)),
        kl: mean(records.iter().map(|r| r.kl)),
        cl: mean(records.iter().map(|r| r.cl)),
        cl_start: mean(records.iter().take(tenth).map(|r| r.cl)),
        cl_end: mean(records.iter().rev().take(tenth).map(|r| r.cl)),
        dev_loss,
        dev,
        dev_score,
    }
}

/// Mean teacher-forced `L_MLE` with the posterior mean as latent.
pub fn dev_loss(model: &StyleDialModel, examples: &[TurnExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::inference();
        let zero = alloc::vec![alloc::vec![0.0; model.latent_dim()]];
        let f = model.forward_turn(&mut tape, ex, zero, None)?;
        total += f.ce.iter().map(|&c| tape.value(c).item()).sum::<f64>();
    }
    Ok(if examples.is_empty() { 0.0 } else { total / examples.len() as f64 })
}

/// Teacher-forced mean `L_MLE` under the prior mean, as used at inference.
pub fn prior_mle(model: &StyleDialModel, examples: &[TurnExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::inference();
        let zero = alloc::vec![alloc::vec![0.0; model.latent_dim()]];
        let f = model.forward_turn(&mut tape, ex, zero, None)?;
        total += tape.value(f.ce[0]).item() + tape.value(f.ce[1]).item();
        total += model.response_nll_prior_mean(&ex.stages[2])?;
    }
    Ok(if examples.is_empty() { 0.0 } else { total / examples.len() as f64 })
}
