use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, latent_diagnostics, latent_records, train, ContrastMode, EvalOptions, TrainConfig, TrainOutcome};
use crate::contrast::{MARGIN_GRID, TEMPERATURE_GRID};
use crate::corpus_gen::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{LatentDiagnostics, MetricsReport};
use crate::model::{context_budget, encode_turns};
use crate::seq2seq::PrefixPositions;

/// Test-split results of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
    pub test: MetricsReport,
    pub latent: Option<LatentDiagnostics>,
}

/// Trains `cfg` and scores its best-dev model on the test split.
pub fn run_and_evaluate(corpus: &Corpus, cfg: &TrainConfig, label: &str) -> Result<(TrainOutcome, RunSummary)> {
    let out = train(corpus, cfg, &mut ())?;
    let summary = summarize(corpus, cfg, label, &out)?;
    Ok((out, summary))
}

/// Test metrics and latent diagnostics of a finished run.
pub fn summarize(corpus: &Corpus, cfg: &TrainConfig, label: &str, out: &TrainOutcome) -> Result<RunSummary> {
    let (_, mut test) = evaluate_model(
        &out.best,
        &corpus.vocab,
        corpus.test(),
        &corpus.db,
        &EvalOptions::default_for(cfg.seed),
    )?;
    let ex = encode_turns(corpus.test(), &corpus.db, &corpus.vocab, context_budget(out.best.config()));
    let latent = latent_records(&out.best, &ex, cfg.seed)
        .and_then(|r| latent_diagnostics(&r))
        .ok();
    test.latent_diag = latent;
    Ok(RunSummary {
        label: label.to_string(),
        config: cfg.clone(),
        best_epoch: out.state.best_epoch,
        test,
        latent,
    })
}

/// The four ablation rows: neither addition, the contrastive latent
/// objective, the latent-conditioned style prefix, and both. The latent
/// and its fusion path are present in every row.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let clv_mode = match base.contrast_mode {
        ContrastMode::Off => ContrastMode::Supervised,
        m => m,
    };
    let make = |clv: bool, sp: bool| {
        let mut c = base.clone();
        c.contrast_mode = if clv { clv_mode } else { ContrastMode::Off };
        c.style_prefix = sp;
        c
    };
    alloc::vec![
        ("base".to_string(), make(false, false)),
        ("+CLV".to_string(), make(true, false)),
        ("+SP".to_string(), make(false, true)),
        ("+CLV+SP".to_string(), make(true, true)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub summary: RunSummary,
    pub delta_inform: Option<f64>,
    pub delta_success: Option<f64>,
    pub delta_bleu: Option<f64>,
    pub delta_combined: Option<f64>,
    pub delta_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    a.zip(b).map(|(x, y)| x - y)
}

impl AblationReport {
    /// Rows with deltas against the first summary.
    pub fn from_summaries(summaries: Vec<RunSummary>) -> Result<Self> {
        let base = summaries
            .first()
            .cloned()
            .ok_or(Error::EmptyBatch("ablation without rows"))?;
        let gap = |s: &RunSummary| s.latent.map(|l| l.separation_gap);
        let rows = summaries
            .into_iter()
            .map(|s| AblationRow {
                delta_inform: delta(s.test.inform, base.test.inform),
                delta_success: delta(s.test.success, base.test.success),
                delta_bleu: delta(s.test.bleu, base.test.bleu),
                delta_combined: delta(s.test.combined, base.test.combined),
                delta_gap: delta(gap(&s), gap(&base)),
                summary: s,
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.summary.label == label)
    }
}

/// Runs every ablation row with the shared seed of `base`. `on_run` sees
/// each finished run, e.g. to store its checkpoint.
pub fn ablation_suite(
    corpus: &Corpus,
    base: &TrainConfig,
    on_run: &mut dyn FnMut(&str, &TrainOutcome, &RunSummary) -> Result<()>,
) -> Result<AblationReport> {
    let mut summaries = Vec::new();
    for (label, cfg) in ablation_configs(base) {
        let (out, s) = run_and_evaluate(corpus, &cfg, &label)?;
        on_run(&label, &out, &s)?;
        summaries.push(s);
    }
    AblationReport::from_summaries(summaries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Margin,
    Temperature,
    PrefixLen,
    PrefixPos,
    /// Every prefix length crossed with every position set.
    Prefix,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(Self::Margin),
            "temperature" => Ok(Self::Temperature),
            "prefix_len" | "prefix-len" => Ok(Self::PrefixLen),
            "prefix_pos" | "prefix-pos" => Ok(Self::PrefixPos),
            "prefix" => Ok(Self::Prefix),
            other => Err(Error::InvalidParameter(format!("sweep axis `{other}`"))),
        }
    }
}

pub const PREFIX_LEN_GRID: [usize; 4] = [30, 50, 70, 100];
pub const PREFIX_POS_GRID: [PrefixPositions; 3] =
    [PrefixPositions::DEC, PrefixPositions::ENC_DEC, PrefixPositions::ALL];

/// Labeled configurations of a sweep around `base`.
pub fn sweep_points(base: &TrainConfig, axis: SweepAxis) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    match axis {
        SweepAxis::Margin => {
            for m in MARGIN_GRID {
                let mut c = base.clone();
                if c.contrast_mode == ContrastMode::Off || c.contrast_mode == ContrastMode::InfoNce {
                    c.contrast_mode = ContrastMode::Supervised;
                }
                c.margin = m;
                out.push((format!("margin={m}"), c));
            }
        }
        SweepAxis::Temperature => {
            for t in TEMPERATURE_GRID {
                let mut c = base.clone();
                c.contrast_mode = ContrastMode::InfoNce;
                c.temperature = t;
                out.push((format!("temperature={t}"), c));
            }
        }
        SweepAxis::PrefixLen | SweepAxis::PrefixPos | SweepAxis::Prefix => {
            let lens: Vec<usize> = if axis == SweepAxis::PrefixPos {
                alloc::vec![base.model.prefix_len]
            } else {
                PREFIX_LEN_GRID.to_vec()
            };
            let poss: Vec<PrefixPositions> = if axis == SweepAxis::PrefixLen {
                alloc::vec![base.model.prefix_positions]
            } else {
                PREFIX_POS_GRID.to_vec()
            };
            for &len in &lens {
                for &pos in &poss {
                    let mut c = base.clone();
                    c.style_prefix = true;
                    c.model.prefix_len = len;
                    c.model.prefix_positions = pos;
                    out.push((format!("{} len={len}", pos.label()), c));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub task_score: Option<f64>,
    pub bleu: Option<f64>,
    pub combined: Option<f64>,
    pub inform: Option<f64>,
    pub success: Option<f64>,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// One training and test evaluation per grid point, all with the seed of
/// `base`.
pub fn sweep(
    corpus: &Corpus,
    base: &TrainConfig,
    axis: SweepAxis,
    on_run: &mut dyn FnMut(&str, &TrainOutcome, &RunSummary) -> Result<()>,
) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for (label, cfg) in sweep_points(base, axis) {
        let (out, s) = run_and_evaluate(corpus, &cfg, &label)?;
        on_run(&label, &out, &s)?;
        rows.push(SweepRow {
            label,
            task_score: s.test.task_score,
            bleu: s.test.bleu,
            combined: s.test.combined,
            inform: s.test.inform,
            success: s.test.success,
            summary: s,
        });
    }
    Ok(SweepReport { axis, rows })
}
