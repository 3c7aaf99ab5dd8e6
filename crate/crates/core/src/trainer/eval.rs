use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus_gen::{derived_rng, Vocab};
use crate::dialogue_core::{evaluate_dialogues, Db, Dialogue, PipelineOptions, Stage, Style, TurnRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_records, latent_separation, LatentDiagnostics, MetricsReport};
use crate::model::{context_budget, LatentChoice, NeuralAgent, StyleDialModel, TurnExample};
use crate::seq2seq::DecodeMode;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub latent: LatentChoice,
    pub mode: DecodeMode,
    pub seed: u64,
}

impl EvalOptions {
    /// Greedy decoding from the prior mean.
    pub fn default_for(seed: u64) -> Self {
        Self {
            latent: LatentChoice::PriorMean,
            mode: DecodeMode::Greedy,
            seed,
        }
    }
}

/// Runs the cascade over `dialogues` with gold history and scores it.
pub fn evaluate_model(
    model: &StyleDialModel,
    vocab: &Vocab,
    dialogues: &[Dialogue],
    db: &Db,
    opts: &EvalOptions,
) -> Result<(Vec<TurnRecord>, MetricsReport)> {
    let mut agent = NeuralAgent::new(model, vocab, opts.latent.clone(), opts.seed);
    agent.mode = opts.mode;
    let popts = PipelineOptions {
        context_budget: context_budget(model.config()),
    };
    let records = evaluate_dialogues(&mut agent, dialogues, db, popts);
    let report = evaluate_records(&records, dialogues, db)?;
    Ok((records, report))
}

/// One line of a latent dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub style: Style,
    /// Posterior parameters given context and gold response.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// A posterior draw.
    pub z: Vec<f64>,
}

/// Posterior statistics and one seeded draw for every example.
pub fn latent_records(model: &StyleDialModel, examples: &[TurnExample], seed: u64) -> Result<Vec<LatentRecord>> {
    let mut rng = derived_rng(seed, 0x4c41_5445);
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = model.latent_stats(ex)?;
        let eps = crate::trainer::draw_noise(&mut rng, 1, 1, s.posterior_mu.len());
        let z = s
            .posterior_mu
            .iter()
            .zip(&s.posterior_sigma)
            .zip(&eps[0][0])
            .map(|((m, sd), e)| m + sd * e)
            .collect();
        out.push(LatentRecord {
            dialogue_id: ex.dialogue_id.clone(),
            turn: ex.turn,
            style: ex.style,
            mu: s.posterior_mu,
            sigma: s.posterior_sigma,
            z,
        });
    }
    Ok(out)
}

/// Style separation of posterior means.
pub fn latent_diagnostics(records: &[LatentRecord]) -> Result<LatentDiagnostics> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.mu.clone()).collect();
    let labels: Vec<Style> = records.iter().map(|r| r.style).collect();
    latent_separation(&points, &labels)
}

/// Mean posterior μ per style.
pub fn style_centroids(model: &StyleDialModel, examples: &[TurnExample]) -> Result<BTreeMap<Style, Vec<f64>>> {
    let mut sums: BTreeMap<Style, (Vec<f64>, usize)> = BTreeMap::new();
    for ex in examples {
        let mu = model.latent_stats(ex)?.posterior_mu;
        let e = sums
            .entry(ex.style)
            .or_insert_with(|| (alloc::vec![0.0; mu.len()], 0));
        e.0.iter_mut().zip(&mu).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(s, (v, n))| (s, v.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

/// Responses to the gold response-stage inputs of `examples` with `z`
/// forced to `latent`. Top-k draws come from one stream seeded by `seed`.
pub fn forced_latent_responses(
    model: &StyleDialModel,
    vocab: &Vocab,
    examples: &[TurnExample],
    latent: &[f64],
    mode: DecodeMode,
    seed: u64,
) -> Result<Vec<String>> {
    if latent.len() != model.latent_dim() {
        return Err(Error::Contract("forced latent has the wrong width".into()));
    }
    let choice = LatentChoice::Fixed(latent.to_vec());
    let mut rng = derived_rng(seed, 0);
    examples
        .iter()
        .map(|ex| {
            let ids = model.respond_with_latent(
                &ex.stage(Stage::Response).input,
                &choice,
                mode,
                &mut rng,
            )?;
            Ok(vocab.detokenize(&ids))
        })
        .collect()
}
