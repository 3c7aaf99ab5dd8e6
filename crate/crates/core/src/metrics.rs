//! Task completion, fluency, diversity and latent-geometry metrics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dialogue_core::{Db, Dialogue, Entity, Style, TurnRecord};
use crate::error::{Error, Result};

/// Smoothing floor for n-gram orders without any match.
pub const BLEU_EPSILON: f64 = 1e-9;

/// `(Inform + Success) * 0.5 + BLEU`.
pub fn combined(inform: f64, success: f64, bleu: f64) -> f64 {
    task_score(inform, success) + bleu
}

/// `(Inform + Success) * 0.5`.
pub fn task_score(inform: f64, success: f64) -> f64 {
    (inform + success) * 0.5
}

/// Per-dialogue task outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub dialogue_id: String,
    /// Last entity of the goal domain named in the generated responses.
    pub offered: Option<String>,
    pub inform: bool,
    pub success: bool,
}

fn group_responses(records: &[TurnRecord]) -> BTreeMap<&str, Vec<&str>> {
    let mut by_dialogue: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    for r in records {
        by_dialogue
            .entry(r.dialogue_id.as_str())
            .or_default()
            .push((r.turn, r.response.as_str()));
    }
    by_dialogue
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|x| x.0);
            (k, v.into_iter().map(|x| x.1).collect())
        })
        .collect()
}

/// Inform and Success for every dialogue with a goal.
///
/// Inform holds when the last goal-domain entity named in the generated
/// responses satisfies the goal constraints. Success additionally needs
/// that entity's value for every requested slot to appear in some response.
pub fn task_outcomes(records: &[TurnRecord], dialogues: &[Dialogue], db: &Db) -> Vec<TaskOutcome> {
    let responses = group_responses(records);
    let mut out = Vec::new();
    for d in dialogues {
        let Some(goal) = &d.goal else { continue };
        let names: BTreeMap<&str, &Entity> = db
            .in_domain(&goal.domain)
            .map(|e| (e.name.as_str(), e))
            .collect();
        let said = responses.get(d.id.as_str()).cloned().unwrap_or_default();
        let offered = said
            .iter()
            .flat_map(|r| r.split_whitespace())
            .filter_map(|w| names.get(w).copied())
            .last();
        let inform = offered.is_some_and(|e| e.satisfies(&goal.constraints));
        let success = inform
            && goal.requested.iter().all(|slot| {
                let value = offered.and_then(|e| e.get(slot));
                value.is_some_and(|v| said.iter().any(|r| r.split_whitespace().any(|w| w == v)))
            });
        out.push(TaskOutcome {
            dialogue_id: d.id.clone(),
            offered: offered.map(|e| e.name.clone()),
            inform,
            success,
        });
    }
    out
}

fn percent(outcomes: &[TaskOutcome], f: impl Fn(&TaskOutcome) -> bool) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let hits = outcomes.iter().filter(|o| f(o)).count();
    Some(100.0 * hits as f64 / outcomes.len() as f64)
}

/// Percent of goal-bearing dialogues whose offered entity fits the goal;
/// `None` when no dialogue carries a goal.
pub fn inform(records: &[TurnRecord], dialogues: &[Dialogue], db: &Db) -> Option<f64> {
    percent(&task_outcomes(records, dialogues, db), |o| o.inform)
}

/// Percent of goal-bearing dialogues that are Inform-correct and deliver
/// every requested value.
pub fn success(records: &[TurnRecord], dialogues: &[Dialogue], db: &Db) -> Option<f64> {
    percent(&task_outcomes(records, dialogues, db), |o| o.success)
}

fn ngrams<'a>(tokens: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with uniform weights and brevity penalty, scaled to
/// 0..100. Orders with no clipped match use [`BLEU_EPSILON`] as their count.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyBatch("bleu needs at least one pair"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(alloc::format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngrams(&h, n);
            let rc = ngrams(&r, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let num = if matched[n] == 0 {
            BLEU_EPSILON
        } else {
            matched[n] as f64
        };
        log_sum += 0.25 * libm::log(num / total[n].max(1) as f64);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok(100.0 * bp * libm::exp(log_sum))
}

/// Corpus-level distinct-n: unique n-grams over total n-grams.
pub fn distinct<S: AsRef<str>>(sentences: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("distinct needs n >= 1".into()));
    }
    let mut unique = BTreeSet::new();
    let mut total = 0usize;
    for s in sentences {
        let toks: Vec<&str> = s.as_ref().split_whitespace().collect();
        for w in toks.windows(n) {
            unique.insert(w.to_vec());
            total += 1;
        }
    }
    Ok(unique.len() as f64 / total.max(1) as f64)
}

/// Mean of per-sentence distinct-n over sentences with at least one n-gram.
pub fn distinct_sentence_mean<S: AsRef<str>>(sentences: &[S], n: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in sentences {
        let toks: Vec<&str> = s.as_ref().split_whitespace().collect();
        if toks.len() >= n {
            sum += distinct(&[s.as_ref()], n)?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Cosine distance in `[0, 2]`; a zero-norm vector is at distance 0 from
/// everything.
pub fn cosine_distance_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (libm::sqrt(na), libm::sqrt(nb));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Geometry of latent vectors grouped by style.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub intra_style_dist: f64,
    pub inter_style_dist: f64,
    pub separation_gap: f64,
    pub silhouette: f64,
}

/// Mean within-style and cross-style pairwise cosine distance, their gap,
/// and the mean silhouette under cosine distance.
pub fn latent_separation<L: Ord + Clone>(points: &[Vec<f64>], labels: &[L]) -> Result<LatentDiagnostics> {
    if points.len() != labels.len() {
        return Err(Error::Contract("one label per point required".into()));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    if groups.len() < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(Error::Contract(
            "latent separation needs two or more styles with two or more points each".into(),
        ));
    }
    let n = points.len();
    let mut dist = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance_or_zero(&points[i], &points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                intra += dist[i * n + j];
                n_intra += 1;
            } else {
                inter += dist[i * n + j];
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra as f64;
    let inter = inter / n_inter as f64;
    let mut sil = 0.0;
    for i in 0..n {
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for (label, members) in &groups {
            let own = *label == labels[i];
            let sum: f64 = members.iter().filter(|&&j| j != i).map(|&j| dist[i * n + j]).sum();
            let cnt = members.len() - usize::from(own);
            let mean = sum / cnt as f64;
            if own {
                a = mean;
            } else {
                b = b.min(mean);
            }
        }
        let m = a.max(b);
        if m > 0.0 {
            sil += (b - a) / m;
        }
    }
    Ok(LatentDiagnostics {
        intra_style_dist: intra,
        inter_style_dist: inter,
        separation_gap: inter - intra,
        silhouette: sil / n as f64,
    })
}

/// Evaluation summary. A metric without the data it needs is `None`
/// rather than zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub inform: Option<f64>,
    pub success: Option<f64>,
    /// BLEU over task-oriented turns.
    pub bleu: Option<f64>,
    pub combined: Option<f64>,
    pub task_score: Option<f64>,
    /// Distinct-1/2/3 over generated open-domain responses.
    pub distinct_1: Option<f64>,
    pub distinct_2: Option<f64>,
    pub distinct_3: Option<f64>,
    pub odd_bleu: Option<f64>,
    pub latent_diag: Option<LatentDiagnostics>,
    pub turns: usize,
    pub failed_turns: usize,
}

/// Tolerance of the report identities.
const IDENTITY_TOL: f64 = 1e-9;

impl MetricsReport {
    /// Builds a report, deriving Combined and Task Score from the parts.
    pub fn from_parts(inform: Option<f64>, success: Option<f64>, bleu: Option<f64>) -> Self {
        let task = inform.zip(success).map(|(i, s)| task_score(i, s));
        Self {
            inform,
            success,
            bleu,
            combined: task.zip(bleu).map(|(t, b)| t + b),
            task_score: task,
            distinct_1: None,
            distinct_2: None,
            distinct_3: None,
            odd_bleu: None,
            latent_diag: None,
            turns: 0,
            failed_turns: 0,
        }
    }

    /// Checks the Combined and Task Score identities and distinct ranges.
    pub fn check(&self) -> Result<()> {
        if let (Some(i), Some(s)) = (self.inform, self.success) {
            let t = self.task_score.ok_or_else(|| Error::Contract("task score missing".into()))?;
            if (t - task_score(i, s)).abs() > IDENTITY_TOL {
                return Err(Error::Contract("task score identity violated".into()));
            }
            if s > i + IDENTITY_TOL {
                return Err(Error::Contract("success exceeds inform".into()));
            }
            if let Some(b) = self.bleu {
                let c = self.combined.ok_or_else(|| Error::Contract("combined missing".into()))?;
                if (c - combined(i, s, b)).abs() > IDENTITY_TOL {
                    return Err(Error::Contract("combined identity violated".into()));
                }
            }
        }
        for d in [self.distinct_1, self.distinct_2, self.distinct_3].into_iter().flatten() {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Contract("distinct outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Metrics of a pipeline run over `dialogues` (records from
/// [`crate::dialogue_core::evaluate_dialogues`]).
pub fn evaluate_records(records: &[TurnRecord], dialogues: &[Dialogue], db: &Db) -> Result<MetricsReport> {
    let outcomes = task_outcomes(records, dialogues, db);
    let inform = percent(&outcomes, |o| o.inform);
    let success = percent(&outcomes, |o| o.success);
    let pick = |style: Style| -> (Vec<&str>, Vec<&str>) {
        records
            .iter()
            .filter(|r| r.style == style)
            .map(|r| (r.response.as_str(), r.gold_response.as_str()))
            .unzip()
    };
    let (tod_h, tod_r) = pick(Style::Tod);
    let (odd_h, odd_r) = pick(Style::Odd);
    let tod_bleu = if tod_h.is_empty() { None } else { Some(bleu(&tod_h, &tod_r)?) };
    let mut report = MetricsReport::from_parts(inform, success, tod_bleu);
    if !odd_h.is_empty() {
        report.odd_bleu = Some(bleu(&odd_h, &odd_r)?);
        report.distinct_1 = Some(distinct(&odd_h, 1)?);
        report.distinct_2 = Some(distinct(&odd_h, 2)?);
        report.distinct_3 = Some(distinct(&odd_h, 3)?);
    }
    report.turns = records.len();
    report.failed_turns = records.iter().filter(|r| r.error.is_some()).count();
    report.check()?;
    Ok(report)
}
