use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use styledial::checkpoint::Checkpoint;
use styledial::commands::{load_config, CHECKPOINT_FILE, EPOCHS_FILE, NUMERIC_FAILURE_FILE, STEPS_FILE};
use styledial::formats::read_corpus;
use styledial::pca::pca_2d;
use styledial_core::trainer::{StepRecord, TrainConfig};

fn bin(args: &[&str], stdin: Option<&str>) -> Output {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = Command::new(env!("CARGO_BIN_EXE_styledial"))
        .args(args)
        .env_remove("STYLEDIAL_OUT")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = bin(args, None);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 8,
        lr: 3e-3,
        beta: 1.0,
        ..TrainConfig::default()
    };
    let m = &mut cfg.model;
    m.d_model = 16;
    m.d_ff = 24;
    m.max_seq_len = 96;
    m.prefix_len = 4;
    m.latent_dim = 6;
    m.latent_hidden = 8;
    m.prefix_hidden = 5;
    cfg
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn gen(dir: &Path, n: usize, seed: u64) -> String {
    ok(&["gen-corpus", "--out", p(dir), "--n-dialogues", &n.to_string(), "--seed", &seed.to_string()])
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_corpus_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, c) = (t.path().join("a"), t.path().join("b"), t.path().join("c"));
    let la = gen(&a, 30, 5);
    assert_eq!(la, gen(&b, 30, 5));
    assert_ne!(la, gen(&c, 30, 6));
    for f in ["dialogues.jsonl", "db.json", "vocab.json", "corpus.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("manifest.json").exists());
    assert_eq!(lines(&a.join("dialogues.jsonl")), 30);
    let (corpus, sum) = read_corpus(&a).unwrap();
    assert!(la.contains(&sum));
    assert_eq!(corpus.dialogues.len(), 30);

    // A populated directory needs --force.
    let o = bin(&["gen-corpus", "--out", p(&a), "--n-dialogues", "30"], None);
    assert_eq!(o.status.code(), Some(1));
    ok(&["gen-corpus", "--out", p(&a), "--n-dialogues", "30", "--force"]);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bin(&["no-such-command"], None).status.code(), Some(1));
    assert_eq!(bin(&["train"], None).status.code(), Some(1));
    assert_eq!(bin(&["gen-corpus"], None).status.code(), Some(1), "no --out and no env root");
    assert_eq!(bin(&["--help"], None).status.code(), Some(0));
}

#[test]
fn config_files_are_checked() {
    let t = tempfile::tempdir().unwrap();
    let path = t.path().join("c.json");
    fs::write(&path, r#"{"lr": 0.001, "config_version": 1}"#).unwrap();
    assert_eq!(load_config(Some(&path)).unwrap().lr, 0.001);
    fs::write(&path, r#"{"learning_rate": 0.001}"#).unwrap();
    assert!(format!("{:#}", load_config(Some(&path)).unwrap_err()).contains("learning_rate"));
    fs::write(&path, r#"{"config_version": 9}"#).unwrap();
    assert!(load_config(Some(&path)).is_err());
    fs::write(&path, r#"{"batch_size": 0}"#).unwrap();
    assert!(load_config(Some(&path)).is_err());
    fs::write(&path, "[1]").unwrap();
    assert!(load_config(Some(&path)).is_err());
}

#[test]
fn train_resume_eval_chat_and_inspect() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    gen(&corpus, 20, 3);
    let cfg = write_config(t.path(), &tiny_config(1));
    let run = t.path().join("run");
    let out = ok(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&run), "--quiet"]);
    assert!(out.starts_with("trained 1 epochs"), "{out}");
    let ckpt = run.join(CHECKPOINT_FILE);
    let ck = Checkpoint::load(&ckpt).unwrap();
    let per_epoch = ck.state.step;
    assert_eq!(lines(&run.join(STEPS_FILE)), per_epoch);
    assert_eq!(lines(&run.join(EPOCHS_FILE)), 1);
    assert!(ck.centroids.is_some());

    // Resume to two epochs: the step counter carries on.
    ok(&["train", "--corpus", p(&corpus), "--resume", p(&ckpt), "--epochs", "2", "--out", p(&run), "--quiet"]);
    let ck2 = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck2.state.epochs_done, 2);
    assert_eq!(ck2.state.step, 2 * per_epoch);
    assert_eq!(lines(&run.join(EPOCHS_FILE)), 2);
    let steps: Vec<StepRecord> = fs::read_to_string(run.join(STEPS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 2 * per_epoch);
    assert!(steps.windows(2).all(|w| w[1].step == w[0].step + 1));

    // Eval prints the table and writes identical reports on reruns.
    let (e1, e2) = (t.path().join("e1"), t.path().join("e2"));
    let table = ok(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&e1)]);
    assert!(table.contains("Inform") && table.contains("Distinct-2"), "{table}");
    assert_eq!(table, ok(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&e2)]));
    for f in ["report.json", "records.jsonl"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let (c, _) = read_corpus(&corpus).unwrap();
    let test_turns: usize = c.test().iter().map(|d| d.turns.len()).sum();
    assert_eq!(lines(&e1.join("records.jsonl")), test_turns);

    // Chat transcripts are reproducible for a fixed seed.
    let script = "I want a cheap restaurant\n\n/reset\nwhat do you like\n/quit\nignored\n";
    let chat = |style: &str| {
        let args = ["chat", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--style", style, "--seed", "4", "--verbose"];
        let o = bin(&args, Some(script));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let transcript = chat("auto");
    assert_eq!(transcript, chat("auto"));
    assert_eq!(transcript.matches("sys: ").count(), 2);
    assert_eq!(transcript.matches("-- reset").count(), 1);
    assert_eq!(transcript.matches("[belief").count(), 2);
    assert_eq!(chat("odd"), chat("odd"));

    // One latent record per test turn.
    let ins = t.path().join("inspect");
    let msg = ok(&["inspect-latent", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&ins)]);
    assert!(msg.starts_with(&format!("{test_turns} latent records")), "{msg}");
    assert_eq!(lines(&ins.join("latents.jsonl")), test_turns);
    assert_eq!(lines(&ins.join("projection.tsv")), test_turns + 1);

    // A corpus with another vocabulary is refused.
    let other = t.path().join("other");
    ok(&["gen-corpus", "--out", p(&other), "--n-dialogues", "3"]);
    fs::write(
        other.join("vocab.json"),
        fs::read_to_string(other.join("vocab.json")).unwrap().replacen("\"", "\"x", 3),
    )
    .unwrap();
    let o = bin(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&other)], None);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn diverging_training_exits_with_two_and_dumps_state() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    gen(&corpus, 12, 3);
    let mut bad = tiny_config(1);
    bad.lr = 1e300;
    bad.grad_clip = 0.0;
    bad.warmup_rate = 0.0;
    let cfg = write_config(t.path(), &bad);
    let run = t.path().join("run");
    let o = bin(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&run), "--quiet"], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let dump: serde_json::Value = serde_json::from_slice(&fs::read(run.join(NUMERIC_FAILURE_FILE)).unwrap()).unwrap();
    assert!(dump["step"].as_u64().is_some());
    assert!(dump["batch"].as_array().is_some_and(|b| !b.is_empty()));
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let t = tempfile::tempdir().unwrap();
    let corpus = t.path().join("corpus");
    gen(&corpus, 12, 3);
    let cfg = write_config(t.path(), &tiny_config(1));
    let run = t.path().join("run");
    ok(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&run), "--quiet"]);
    let path = run.join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    let model = ck.best.restore().unwrap();
    assert_eq!(styledial::checkpoint::ModelWeights::capture(&model), ck.best);

    // Flip one payload byte.
    let mut broken = bytes.clone();
    let at = bytes.len() - 40;
    broken[at] = if broken[at] == b'1' { b'2' } else { b'1' };
    let err = format!("{:#}", Checkpoint::from_bytes(&broken).unwrap_err());
    assert!(err.contains("checksum"), "{err}");

    let text = String::from_utf8(bytes.clone()).unwrap();
    let newer = text.replacen("\"version\":1", "\"version\":2", 1);
    assert!(format!("{:#}", Checkpoint::from_bytes(newer.as_bytes()).unwrap_err()).contains("version"));
    assert!(Checkpoint::from_bytes(b"{}").is_err());

    // A missing parameter is refused on restore.
    let mut short = ck.best.clone();
    short.params.pop();
    assert!(short.restore().is_err());
}

/// Leading eigenpairs by power iteration with deflation.
fn eigen_oracle(points: &[Vec<f64>]) -> Vec<(f64, Vec<f64>)> {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let mut out = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        let lead = v.iter().copied().fold(0.0f64, |a, c| if c.abs() > a.abs() { c } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

#[test]
fn pca_matches_power_iteration() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    // Anisotropic cloud with well-separated variances 9, 4, 1, 0.25.
    let scales = [3.0, 2.0, 1.0, 0.5];
    let points: Vec<Vec<f64>> = (0..400)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0) + 1.0).collect())
        .collect();
    let got = pca_2d(&points).unwrap();
    let oracle = eigen_oracle(&points);
    for k in 0..2 {
        assert!((got.variance[k] - oracle[k].0).abs() < 1e-8, "{k}");
        for (a, b) in got.axes[k].iter().zip(&oracle[k].1) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(pca_2d(&[]).is_err());
    assert!(pca_2d(&[vec![1.0]]).is_err());
}

proptest! {
    #[test]
    fn pca_axes_are_orthonormal_and_coords_centered(
        pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 3..30)
    ) {
        let pr = pca_2d(&pts).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!((dot(&pr.axes[0], &pr.axes[0]) - 1.0).abs() < 1e-9);
        prop_assert!(dot(&pr.axes[0], &pr.axes[1]).abs() < 1e-9);
        prop_assert!(pr.variance[0] + 1e-12 >= pr.variance[1]);
        prop_assert!(pr.variance[0] + pr.variance[1] <= pr.total_variance + 1e-9);
        let n = pts.len() as f64;
        for k in 0..2 {
            let m = pr.coords.iter().map(|c| c[k]).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9);
            let var = pr.coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / n;
            prop_assert!((var - pr.variance[k]).abs() < 1e-8);
        }
    }
}
