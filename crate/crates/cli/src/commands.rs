use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use styledial_core::corpus_gen::{generate_corpus, Corpus, CorpusSpec, Ontology, SplitName};
use styledial_core::dialogue_core::{run_turn, Act, DialogueTurn, PipelineOptions, Style};
use styledial_core::metrics::{distinct_sentence_mean, MetricsReport};
use styledial_core::model::{context_budget, encode_turns, LatentChoice, NeuralAgent, StyleDialModel};
use styledial_core::trainer::{
    ablation_suite, evaluate_model, latent_diagnostics, latent_records, resume, style_centroids, sweep,
    AblationReport, EvalOptions, RunSummary, StepRecord, SweepAxis, SweepReport, TrainConfig, TrainHooks,
    TrainOutcome, TrainState,
};

use crate::checkpoint::Checkpoint;
use crate::formats::{
    append_jsonl, dir_non_empty, read_corpus, read_json, to_json_pretty, to_jsonl, vocab_checksum,
    write_atomic, write_corpus,
};
use crate::manifest::RunManifest;
use crate::pca::pca_2d;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "STYLEDIAL_OUT";
pub const CONFIG_VERSION: u64 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const NUMERIC_FAILURE_FILE: &str = "numeric_failure.json";

#[derive(Parser, Debug)]
#[command(name = "styledial", version, about = "Style-controlled hybrid dialogue experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with db and vocab sidecars.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write its checkpoint and loss curves.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the four-row ablation.
    Ablate(SuiteArgs),
    /// Train and score one model per grid point of an axis.
    Sweep(SweepArgs),
    /// Talk to a checkpoint on standard input and output.
    Chat(ChatArgs),
    /// Dump posterior latents and a 2-D principal projection.
    InspectLatent(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// JSON corpus spec; defaults are used for missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_dialogues: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON training config; defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint written at an epoch boundary.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Dev => SplitName::Dev,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LatentArg {
    PriorMean,
    PriorSample,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "prior-mean")]
    pub latent: LatentArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report sentence-level mean Distinct-n instead of corpus-level.
    #[arg(long)]
    pub distinct_sentence: bool,
    /// Directory for the machine-readable report, records and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SuiteArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep one checkpoint per trained configuration.
    #[arg(long)]
    pub save_checkpoints: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// margin, temperature, prefix-len, prefix-pos or prefix.
    #[arg(long)]
    pub axis: String,
    #[command(flatten)]
    pub suite: SuiteArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Tod,
    Odd,
    Auto,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus providing the database and vocabulary.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub style: StyleArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also print belief, db count and act for each turn.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command. Chat reads `input`; every command writes its
/// human-readable output to `out`.
pub fn run(cli: Cli, argv: &[String], input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&a, argv, out),
        Command::Train(a) => train_cmd(&a, argv, out),
        Command::Eval(a) => eval_cmd(&a, argv, out),
        Command::Ablate(a) => ablate_cmd(&a, argv, out),
        Command::Sweep(a) => sweep_cmd(&a, argv, out),
        Command::Chat(a) => chat_cmd(&a, input, out),
        Command::InspectLatent(a) => inspect_cmd(&a, argv, out),
    }
}

fn out_dir(given: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(command)),
        None => bail!("--out is required when {OUT_ROOT_ENV} is not set"),
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir_non_empty(dir)? && !force {
        bail!("{} is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn load_spec(path: Option<&Path>) -> Result<CorpusSpec> {
    match path {
        Some(p) => read_json(p),
        None => Ok(CorpusSpec::default()),
    }
}

fn gen_corpus(a: &GenCorpusArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let mut spec = load_spec(a.spec.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_dialogues {
        spec.n_dialogues = n;
    }
    let dir = out_dir(&a.out, "corpus")?;
    prepare_out(&dir, a.force)?;
    let mut man = RunManifest::begin("gen-corpus", argv);
    let corpus = generate_corpus(&spec, &Ontology::default())?;
    let checksum = write_corpus(&dir, &corpus)?;
    man.config = serde_json::to_value(&spec)?;
    man.seed = Some(spec.seed);
    man.corpus_checksum = Some(checksum.clone());
    for f in crate::formats::CORPUS_FILES {
        man.output(&dir.join(f));
    }
    man.finish(&dir)?;
    writeln!(
        out,
        "corpus {checksum}: {} dialogues (train {}, dev {}, test {}), vocab {}",
        corpus.dialogues.len(),
        corpus.train().len(),
        corpus.dev().len(),
        corpus.test().len(),
        corpus.vocab.len()
    )?;
    Ok(())
}

/// Reads a training config. Unknown keys are rejected, and an optional
/// `config_version` must match this build.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let mut v: serde_json::Value = read_json(path)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| anyhow!("{} must hold a JSON object", path.display()))?;
    if let Some(ver) = obj.remove("config_version") {
        if ver.as_u64() != Some(CONFIG_VERSION) {
            bail!("config version {ver} in {}, this build reads version {CONFIG_VERSION}", path.display());
        }
    }
    let known = serde_json::to_value(TrainConfig::default())?;
    let known = known.as_object().expect("config serializes to an object");
    if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
        bail!("unknown config key `{k}` in {}", path.display());
    }
    let cfg: TrainConfig = serde_json::from_value(v).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, seed: Option<u64>, epochs: Option<usize>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
}

struct CliHooks<'a> {
    dir: &'a Path,
    corpus_checksum: &'a str,
    vocab_checksum: &'a str,
    cfg: &'a TrainConfig,
    best: Option<StyleDialModel>,
    pending: Vec<StepRecord>,
    failure: Option<anyhow::Error>,
    quiet: bool,
}

impl CliHooks<'_> {
    fn persist(&mut self, model: &StyleDialModel, state: &TrainState, is_best: bool) -> Result<()> {
        if is_best || self.best.is_none() {
            self.best = Some(model.clone());
        }
        append_jsonl(&self.dir.join(STEPS_FILE), &self.pending)?;
        self.pending.clear();
        if let Some(rec) = state.history.last() {
            append_jsonl(&self.dir.join(EPOCHS_FILE), std::slice::from_ref(rec))?;
            if !self.quiet {
                eprintln!(
                    "epoch {} loss {:.4} mle {:.4} kl {:.4} cl {:.4} dev_loss {:.4} dev_score {:.3}{}",
                    rec.epoch,
                    rec.loss,
                    rec.mle,
                    rec.kl,
                    rec.cl,
                    rec.dev_loss,
                    rec.dev_score,
                    if is_best { " *" } else { "" }
                );
            }
        }
        let best = self.best.as_ref().expect("set above");
        Checkpoint::new(self.corpus_checksum, self.vocab_checksum, self.cfg, model, best, state, None)
            .save(&self.dir.join(CHECKPOINT_FILE))
    }
}

impl TrainHooks for CliHooks<'_> {
    fn epoch_end(&mut self, model: &StyleDialModel, state: &TrainState, is_best: bool) -> styledial_core::Result<()> {
        self.persist(model, state, is_best).map_err(|e| {
            let msg = format!("{e:#}");
            self.failure = Some(e);
            styledial_core::Error::Contract(msg)
        })
    }

    fn step_end(&mut self, record: &StepRecord) {
        self.pending.push(record.clone());
    }
}

/// Trains from a corpus directory into `dir`. Returns the outcome for
/// callers that keep working with the models.
pub fn train_into(
    corpus_dir: &Path,
    cfg: &TrainConfig,
    dir: &Path,
    resume_from: Option<&Path>,
    quiet: bool,
) -> Result<TrainOutcome> {
    let (corpus, checksum) = read_corpus(corpus_dir)?;
    let vck = vocab_checksum(&corpus.vocab)?;
    let (cfg, model, state, best) = match resume_from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.vocab_checksum != vck {
                return Err(styledial_core::Error::ConfigMismatch(
                    "checkpoint vocabulary differs from the corpus vocabulary".into(),
                )
                .into());
            }
            let mut c = ck.config.clone();
            if cfg.seed != c.seed {
                bail!("resuming with seed {} but the checkpoint used {}", cfg.seed, c.seed);
            }
            c.epochs = cfg.epochs;
            (c, ck.last.restore()?, ck.state.clone(), Some(ck.best.restore()?))
        }
        None => {
            for f in [STEPS_FILE, EPOCHS_FILE, NUMERIC_FAILURE_FILE] {
                let _ = fs::remove_file(dir.join(f));
            }
            let (m, s) = styledial_core::trainer::init_model(&corpus, cfg)?;
            (cfg.clone(), m, s, None)
        }
    };
    let mut hooks = CliHooks {
        dir,
        corpus_checksum: &checksum,
        vocab_checksum: &vck,
        cfg: &cfg,
        best: best.clone(),
        pending: Vec::new(),
        failure: None,
        quiet,
    };
    let result = resume(&corpus, &cfg, model, state, best, &mut hooks);
    if let Some(f) = hooks.failure.take() {
        return Err(f);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if let styledial_core::Error::NumericFailure { epoch, step, detail, batch } = &e {
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "epoch": epoch,
                    "step": step,
                    "detail": detail,
                    "batch": batch,
                    "config": cfg,
                });
                write_atomic(&dir.join(NUMERIC_FAILURE_FILE), &to_json_pretty(&dump)?)?;
            }
            return Err(e.into());
        }
    };
    Checkpoint::new(
        &checksum,
        &vck,
        &cfg,
        &outcome.last,
        &outcome.best,
        &outcome.state,
        Some(&outcome.centroids),
    )
    .save(&dir.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

fn train_cmd(a: &TrainArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let mut cfg = match (&a.config, &a.resume) {
        (Some(p), _) => load_config(Some(p))?,
        (None, Some(r)) => Checkpoint::load(r)?.config,
        (None, None) => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, a.seed, a.epochs);
    let dir = out_dir(&a.out, "train")?;
    if a.resume.is_none() {
        prepare_out(&dir, a.force)?;
    } else {
        fs::create_dir_all(&dir)?;
    }
    let mut man = RunManifest::begin("train", argv);
    man.config = serde_json::to_value(&cfg)?;
    man.seed = Some(cfg.seed);
    let (_, checksum) = read_corpus(&a.corpus)?;
    man.corpus_checksum = Some(checksum);
    let outcome = train_into(&a.corpus, &cfg, &dir, a.resume.as_deref(), a.quiet)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    man.checkpoint = Some(ckpt.display().to_string());
    for f in [CHECKPOINT_FILE, STEPS_FILE, EPOCHS_FILE] {
        man.output(&dir.join(f));
    }
    man.finish(&dir)?;
    writeln!(
        out,
        "trained {} epochs ({} steps), best epoch {:?}, checkpoint {}",
        outcome.state.epochs_done,
        outcome.state.step,
        outcome.state.best_epoch,
        ckpt.display()
    )?;
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Two-block text table: task metrics, then open-domain metrics.
pub fn format_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<4} {:>8} {:>8} {:>8} {:>9}\n",
        "TOD", "Inform", "Success", "BLEU", "Combined"
    ));
    s.push_str(&format!(
        "{:<4} {:>8} {:>8} {:>8} {:>9}\n",
        "",
        fmt_metric(r.inform),
        fmt_metric(r.success),
        fmt_metric(r.bleu),
        fmt_metric(r.combined)
    ));
    s.push_str(&format!(
        "{:<4} {:>10} {:>10} {:>10} {:>8}\n",
        "ODD", "Distinct-1", "Distinct-2", "Distinct-3", "BLEU"
    ));
    s.push_str(&format!(
        "{:<4} {:>10} {:>10} {:>10} {:>8}\n",
        "",
        fmt_ratio(r.distinct_1),
        fmt_ratio(r.distinct_2),
        fmt_ratio(r.distinct_3),
        fmt_metric(r.odd_bleu)
    ));
    s.push_str(&format!("turns {} failed {}\n", r.turns, r.failed_turns));
    s
}

/// Loads a checkpoint and checks that it fits `corpus`.
pub fn load_for_corpus(checkpoint: &Path, corpus: &Corpus) -> Result<Checkpoint> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.vocab_checksum != vocab_checksum(&corpus.vocab)? {
        return Err(styledial_core::Error::ConfigMismatch(
            "checkpoint vocabulary differs from the corpus vocabulary".into(),
        )
        .into());
    }
    Ok(ck)
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    checkpoint: String,
    corpus_checksum: &'a str,
    split: SplitName,
    latent: &'a str,
    distinct: &'a str,
    config: &'a TrainConfig,
    report: &'a MetricsReport,
}

fn eval_cmd(a: &EvalArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let (corpus, checksum) = read_corpus(&a.corpus)?;
    let ck = load_for_corpus(&a.checkpoint, &corpus)?;
    let model = ck.best.restore()?;
    let split: SplitName = a.split.into();
    let mut opts = EvalOptions::default_for(a.seed);
    if a.latent == LatentArg::PriorSample {
        opts.latent = LatentChoice::PriorSample;
    }
    let (records, mut report) = evaluate_model(&model, &corpus.vocab, corpus.part(split), &corpus.db, &opts)?;
    if a.distinct_sentence {
        let odd: Vec<&str> = records
            .iter()
            .filter(|r| r.style == Style::Odd)
            .map(|r| r.response.as_str())
            .collect();
        if !odd.is_empty() {
            report.distinct_1 = Some(distinct_sentence_mean(&odd, 1)?);
            report.distinct_2 = Some(distinct_sentence_mean(&odd, 2)?);
            report.distinct_3 = Some(distinct_sentence_mean(&odd, 3)?);
        }
    }
    write!(out, "{}", format_report(&report))?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let mut man = RunManifest::begin("eval", argv);
        man.config = serde_json::to_value(&ck.config)?;
        man.seed = Some(a.seed);
        man.corpus_checksum = Some(checksum.clone());
        man.checkpoint = Some(a.checkpoint.display().to_string());
        let rec = EvalRecord {
            checkpoint: a.checkpoint.display().to_string(),
            corpus_checksum: &checksum,
            split,
            latent: if a.latent == LatentArg::PriorSample { "prior-sample" } else { "prior-mean" },
            distinct: if a.distinct_sentence { "sentence" } else { "corpus" },
            config: &ck.config,
            report: &report,
        };
        write_atomic(&dir.join("report.json"), &to_json_pretty(&rec)?)?;
        write_atomic(&dir.join("records.jsonl"), &to_jsonl(&records)?)?;
        man.output(&dir.join("report.json"));
        man.output(&dir.join("records.jsonl"));
        man.finish(dir)?;
    }
    Ok(())
}

fn suite_setup(a: &SuiteArgs, command: &str) -> Result<(TrainConfig, PathBuf, Corpus, String)> {
    let mut cfg = load_config(a.config.as_deref())?;
    apply_overrides(&mut cfg, a.seed, a.epochs);
    let dir = out_dir(&a.out, command)?;
    prepare_out(&dir, a.force)?;
    let (corpus, checksum) = read_corpus(&a.corpus)?;
    Ok((cfg, dir, corpus, checksum))
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn run_saver<'a>(
    save: bool,
    dir: &'a Path,
    checksum: &'a str,
    vck: &'a str,
) -> impl FnMut(&str, &TrainOutcome, &RunSummary) -> styledial_core::Result<()> + 'a {
    move |label: &str, o: &TrainOutcome, s: &RunSummary| {
        eprintln!(
            "finished {label}: combined {} gap {}",
            fmt_metric(s.test.combined),
            fmt_ratio(s.latent.map(|l| l.separation_gap))
        );
        if save {
            let ck = Checkpoint::new(checksum, vck, &s.config, &o.last, &o.best, &o.state, Some(&o.centroids));
            let path = dir.join(format!("{}.ckpt", slug(label)));
            ck.save(&path)
                .map_err(|e| styledial_core::Error::Contract(format!("saving {}: {e:#}", path.display())))?;
        }
        Ok(())
    }
}

pub fn format_ablation(r: &AblationReport) -> String {
    let mut s = format!(
        "{:<9} {:>8} {:>8} {:>8} {:>9} {:>8} {:>9}\n",
        "row", "Inform", "Success", "BLEU", "Combined", "gap", "dCombined"
    );
    for row in &r.rows {
        let t = &row.summary.test;
        s.push_str(&format!(
            "{:<9} {:>8} {:>8} {:>8} {:>9} {:>8} {:>9}\n",
            row.summary.label,
            fmt_metric(t.inform),
            fmt_metric(t.success),
            fmt_metric(t.bleu),
            fmt_metric(t.combined),
            fmt_ratio(row.summary.latent.map(|l| l.separation_gap)),
            fmt_metric(row.delta_combined)
        ));
    }
    s
}

fn ablate_cmd(a: &SuiteArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let (cfg, dir, corpus, checksum) = suite_setup(a, "ablate")?;
    let vck = vocab_checksum(&corpus.vocab)?;
    let mut man = RunManifest::begin("ablate", argv);
    man.config = serde_json::to_value(&cfg)?;
    man.seed = Some(cfg.seed);
    man.corpus_checksum = Some(checksum.clone());
    let mut saver = run_saver(a.save_checkpoints, &dir, &checksum, &vck);
    let report = ablation_suite(&corpus, &cfg, &mut saver)?;
    write_atomic(&dir.join("ablation.json"), &to_json_pretty(&report)?)?;
    man.output(&dir.join("ablation.json"));
    man.finish(&dir)?;
    write!(out, "{}", format_ablation(&report))?;
    Ok(())
}

pub fn format_sweep(r: &SweepReport) -> String {
    let mut s = format!(
        "{:<24} {:>10} {:>8} {:>8} {:>8} {:>9}\n",
        "point", "TaskScore", "BLEU", "Inform", "Success", "Combined"
    );
    for row in &r.rows {
        s.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>8} {:>8} {:>9}\n",
            row.label,
            fmt_metric(row.task_score),
            fmt_metric(row.bleu),
            fmt_metric(row.inform),
            fmt_metric(row.success),
            fmt_metric(row.combined)
        ));
    }
    s
}

fn sweep_cmd(a: &SweepArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let axis = SweepAxis::parse(&a.axis)?;
    let (cfg, dir, corpus, checksum) = suite_setup(&a.suite, "sweep")?;
    let vck = vocab_checksum(&corpus.vocab)?;
    let mut man = RunManifest::begin("sweep", argv);
    man.config = serde_json::to_value(&cfg)?;
    man.seed = Some(cfg.seed);
    man.corpus_checksum = Some(checksum.clone());
    let mut saver = run_saver(a.suite.save_checkpoints, &dir, &checksum, &vck);
    let report = sweep(&corpus, &cfg, axis, &mut saver)?;
    write_atomic(&dir.join("sweep.jsonl"), &to_jsonl(&report.rows)?)?;
    man.output(&dir.join("sweep.jsonl"));
    man.finish(&dir)?;
    write!(out, "{}", format_sweep(&report))?;
    Ok(())
}

/// Per-style centroids stored in the checkpoint, or recomputed from the
/// training split when the checkpoint predates them.
pub fn centroids_for(ck: &Checkpoint, model: &StyleDialModel, corpus: &Corpus) -> Result<BTreeMap<Style, Vec<f64>>> {
    if let Some(c) = ck.centroid_map() {
        return Ok(c);
    }
    let ex = encode_turns(corpus.train(), &corpus.db, &corpus.vocab, context_budget(model.config()));
    Ok(style_centroids(model, &ex)?)
}

fn normalize_utterance(line: &str) -> String {
    line.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn chat_cmd(a: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let (corpus, _) = read_corpus(&a.corpus)?;
    let ck = load_for_corpus(&a.checkpoint, &corpus)?;
    let model = ck.best.restore()?;
    let latent = match a.style {
        StyleArg::Auto => LatentChoice::PriorSample,
        StyleArg::Tod | StyleArg::Odd => {
            let style = if a.style == StyleArg::Tod { Style::Tod } else { Style::Odd };
            let c = centroids_for(&ck, &model, &corpus)?;
            let v = c
                .get(&style)
                .ok_or_else(|| anyhow!("no {} turns to form a centroid", style.as_str()))?;
            LatentChoice::Fixed(v.clone())
        }
    };
    let mut agent = NeuralAgent::new(&model, &corpus.vocab, latent, a.seed);
    let opts = PipelineOptions {
        context_budget: context_budget(model.config()),
    };
    let mut history: Vec<DialogueTurn> = Vec::new();
    for line in input.lines() {
        let line = line?;
        let user = normalize_utterance(&line);
        match user.as_str() {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                writeln!(out, "-- reset")?;
                continue;
            }
            _ => {}
        }
        let o = run_turn(&mut agent, &history, &user, &corpus.db, opts)?;
        let response = o.response.join(" ");
        if a.verbose {
            writeln!(
                out,
                "[belief {}] [db {}] [act {}]",
                o.info.belief.serialize(),
                o.info.db.match_count,
                o.info.act.token()
            )?;
        }
        writeln!(out, "sys: {response}")?;
        history.push(DialogueTurn {
            user,
            system: response,
            style: if o.info.act == Act::Chat { Style::Odd } else { Style::Tod },
            belief: o.info.belief,
            act: o.info.act,
        });
    }
    out.flush()?;
    Ok(())
}

fn inspect_cmd(a: &InspectArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let (corpus, checksum) = read_corpus(&a.corpus)?;
    let ck = load_for_corpus(&a.checkpoint, &corpus)?;
    let model = ck.best.restore()?;
    let dir = out_dir(&a.out, "inspect-latent")?;
    fs::create_dir_all(&dir)?;
    let split: SplitName = a.split.into();
    let ex = encode_turns(corpus.part(split), &corpus.db, &corpus.vocab, context_budget(model.config()));
    let records = latent_records(&model, &ex, a.seed)?;
    let mus: Vec<Vec<f64>> = records.iter().map(|r| r.mu.clone()).collect();
    let proj = pca_2d(&mus)?;
    let diag = latent_diagnostics(&records).ok();
    let mut table = String::from("dialogue_id\tturn\tstyle\tpc1\tpc2\n");
    for (r, c) in records.iter().zip(&proj.coords) {
        table.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.dialogue_id, r.turn, r.style.as_str(), c[0], c[1]));
    }
    let pca = serde_json::json!({
        "mean": proj.mean,
        "axes": proj.axes,
        "variance": proj.variance,
        "total_variance": proj.total_variance,
    });
    write_atomic(&dir.join("latents.jsonl"), &to_jsonl(&records)?)?;
    write_atomic(&dir.join("projection.tsv"), table.as_bytes())?;
    write_atomic(&dir.join("pca.json"), &to_json_pretty(&pca)?)?;
    write_atomic(&dir.join("diagnostics.json"), &to_json_pretty(&diag)?)?;
    let mut man = RunManifest::begin("inspect-latent", argv);
    man.config = serde_json::to_value(&ck.config)?;
    man.seed = Some(a.seed);
    man.corpus_checksum = Some(checksum);
    man.checkpoint = Some(a.checkpoint.display().to_string());
    for f in ["latents.jsonl", "projection.tsv", "pca.json", "diagnostics.json"] {
        man.output(&dir.join(f));
    }
    man.finish(&dir)?;
    writeln!(
        out,
        "{} latent records; pc variance {:.4} {:.4} of {:.4}; separation gap {}",
        records.len(),
        proj.variance[0],
        proj.variance[1],
        proj.total_variance,
        fmt_ratio(diag.map(|d| d.separation_gap))
    )?;
    Ok(())
}
