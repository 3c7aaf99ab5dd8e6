use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use styledial_core::dialogue_core::*;
use styledial_core::metrics::*;

#[test]
fn combined_reference_value() {
    let c = combined(92.85, 84.30, 20.12);
    assert!((c - 108.695).abs() < 1e-9);
    assert!((c - 108.70).abs() <= 0.005 + 1e-12);
    assert_eq!(task_score(80.0, 60.0), 70.0);
}

#[test]
fn task_score_identity_on_random_reports() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let i = rng.random_range(0.0..100.0);
        let s = rng.random_range(0.0..=i);
        let b = rng.random_range(0.0..100.0);
        let r = MetricsReport::from_parts(Some(i), Some(s), Some(b));
        r.check().unwrap();
        assert!((r.task_score.unwrap() - (i + s) / 2.0).abs() < 1e-12);
        assert!((r.combined.unwrap() - r.task_score.unwrap() - b).abs() < 1e-12);
    }
    let mut broken = MetricsReport::from_parts(Some(50.0), Some(40.0), Some(10.0));
    broken.combined = Some(1.0);
    assert!(broken.check().is_err());
    let partial = MetricsReport::from_parts(None, Some(1.0), Some(2.0));
    assert_eq!((partial.task_score, partial.combined), (None, None));
}

#[test]
fn bleu_hand_computed_short_hypothesis() {
    // Precisions 3/3, 2/2, 1/1 and an empty 4-gram order floored at 1e-9;
    // brevity penalty exp(1 - 4/3).
    let expect = 100.0 * (-1.0f64 / 3.0).exp() * (1e-9f64).powf(0.25);
    let got = bleu(&["the cat sat"], &["the cat sat down"]).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn bleu_examples() {
    let s = "a b c d e";
    assert!((bleu(&[s], &[s]).unwrap() - 100.0).abs() < 1e-12);
    // Clipping: "the the the the" against "the cat" matches one unigram.
    let got = bleu(&["the the the the"], &["the cat"]).unwrap();
    let p = [1.0 / 4.0, 1e-9 / 3.0, 1e-9 / 2.0, 1e-9 / 1.0];
    let oracle = 100.0 * p.iter().map(|x: &f64| 0.25 * x.ln()).sum::<f64>().exp();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    assert_eq!(bleu(&[""], &["x"]).unwrap(), 0.0);
    assert!(bleu::<&str, &str>(&[], &[]).is_err());
    assert!(bleu(&["a"], &["a", "b"]).is_err());
}

#[test]
fn bleu_is_corpus_level() {
    // Pooled counts differ from the mean of sentence scores.
    let h = ["a b c d e f", "x y"];
    let r = ["a b c d e f", "x z"];
    let corpus = bleu(&h, &r).unwrap();
    // Unigram 7/8, bigram 5/6, trigram 4/4, 4-gram 3/3.
    let oracle = 100.0 * (0.25 * ((7.0f64 / 8.0).ln() + (5.0f64 / 6.0).ln())).exp();
    assert!((corpus - oracle).abs() < 1e-12, "{corpus} vs {oracle}");
}

#[test]
fn distinct_examples() {
    assert_eq!(distinct(&["i like like cats"], 1).unwrap(), 0.75);
    assert_eq!(distinct(&["i like like cats"], 2).unwrap(), 1.0);
    assert_eq!(distinct(&["a b", "a b"], 2).unwrap(), 0.5);
    assert_eq!(distinct(&["a"], 2).unwrap(), 0.0);
    assert!(distinct(&["a"], 0).is_err());
    // Sentence mean skips sentences that are too short.
    let m = distinct_sentence_mean(&["a a", "b c", "d"], 1).unwrap();
    assert!((m - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
    assert_eq!(distinct_sentence_mean(&["a a", "b c", "d"], 2).unwrap(), 1.0);
}

/// Silhouette with distances computed from planar angles.
fn silhouette_oracle(angles: &[f64], labels: &[u8]) -> (f64, f64, f64) {
    let d = |i: usize, j: usize| 1.0 - (angles[i] - angles[j]).cos();
    let n = angles.len();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                intra += d(i, j);
                ni += 1.0;
            } else {
                inter += d(i, j);
                nx += 1.0;
            }
        }
    }
    let mut s = 0.0;
    for i in 0..n {
        let mean = |same: bool| {
            let js: Vec<usize> = (0..n).filter(|&j| j != i && (labels[j] == labels[i]) == same).collect();
            js.iter().map(|&j| d(i, j)).sum::<f64>() / js.len() as f64
        };
        let (a, b) = (mean(true), mean(false));
        s += (b - a) / a.max(b);
    }
    (intra / ni, inter / nx, s / n as f64)
}

#[test]
fn silhouette_six_point_fixture() {
    let deg = |x: f64| x.to_radians();
    let angles = [deg(0.0), deg(10.0), deg(25.0), deg(80.0), deg(95.0), deg(100.0)];
    let labels = [0u8, 0, 0, 1, 1, 1];
    let points: Vec<Vec<f64>> = angles.iter().map(|a| vec![2.0 * a.cos(), 2.0 * a.sin()]).collect();
    let got = latent_separation(&points, &labels).unwrap();
    let (intra, inter, sil) = silhouette_oracle(&angles, &labels);
    assert!((got.intra_style_dist - intra).abs() < 1e-12);
    assert!((got.inter_style_dist - inter).abs() < 1e-12);
    assert!((got.separation_gap - (inter - intra)).abs() < 1e-12);
    assert!((got.silhouette - sil).abs() < 1e-12);
    assert!(got.silhouette > 0.5);

    // Swapping labels makes clusters meaningless.
    let mixed = [0u8, 1, 0, 1, 0, 1];
    let m = latent_separation(&points, &mixed).unwrap();
    assert!(m.silhouette < 0.0);
    assert!(latent_separation(&points, &[0u8; 6]).is_err());
    assert!(latent_separation(&points[..3], &[0u8, 0, 1]).is_err());
}

#[test]
fn cosine_distance_conventions() {
    assert_eq!(cosine_distance_or_zero(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
    assert!((cosine_distance_or_zero(&[1.0, 0.0], &[-3.0, 0.0]) - 2.0).abs() < 1e-15);
    assert!(cosine_distance_or_zero(&[1.0, 1.0], &[2.0, 2.0]).abs() < 1e-15);
}

fn task_fixture() -> (Db, Vec<Dialogue>) {
    let e = |name: &str, area: &str, phone: &str| Entity {
        name: name.into(),
        domain: "restaurant".into(),
        slots: [("area", area), ("phone", phone)]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    };
    let db = Db {
        entities: vec![e("good", "north", "111"), e("bad", "south", "222")],
        columns: BTreeMap::from([("restaurant".into(), vec!["area".into(), "phone".into()])]),
    };
    let goal = Goal {
        domain: "restaurant".into(),
        constraints: BTreeMap::from([("area".into(), "north".into())]),
        requested: vec!["phone".into()],
    };
    let d = |id: &str| Dialogue {
        id: id.into(),
        goal: Some(goal.clone()),
        turns: vec![],
    };
    (db, vec![d("a"), d("b"), d("c"), d("e")])
}

fn rec(id: &str, turn: usize, style: Style, response: &str, gold: &str) -> TurnRecord {
    TurnRecord {
        dialogue_id: id.into(),
        turn,
        style,
        gold_response: gold.into(),
        gold_act: Act::Inform,
        belief: String::new(),
        db_count: 0,
        act: Some(Act::Inform),
        response: response.into(),
        warnings: 0,
        error: None,
    }
}

#[test]
fn inform_and_success_fixture() {
    let (db, dialogues) = task_fixture();
    let records = vec![
        // a: right entity and phone, split over turns (out of order on purpose).
        rec("a", 1, Style::Tod, "call 111", "call 111"),
        rec("a", 0, Style::Tod, "try good", "try good"),
        // b: right entity, wrong phone.
        rec("b", 0, Style::Tod, "try good call 222", "x"),
        // c: last offer wins, and it is wrong.
        rec("c", 0, Style::Tod, "try good", "x"),
        rec("c", 1, Style::Tod, "no , bad 111", "x"),
        // e: no entity at all.
        rec("e", 0, Style::Odd, "nice weather", "nice weather"),
    ];
    let out = task_outcomes(&records, &dialogues, &db);
    let flags: Vec<(bool, bool)> = out.iter().map(|o| (o.inform, o.success)).collect();
    assert_eq!(flags, vec![(true, true), (true, false), (false, false), (false, false)]);
    assert_eq!(out[2].offered.as_deref(), Some("bad"));
    assert_eq!(inform(&records, &dialogues, &db), Some(50.0));
    assert_eq!(success(&records, &dialogues, &db), Some(25.0));
    let rep = evaluate_records(&records, &dialogues, &db).unwrap();
    assert_eq!(rep.combined, Some(37.5 + rep.bleu.unwrap()));
    assert_eq!(rep.distinct_1, Some(1.0));
    // Two words: exact unigram and bigram, two floored orders.
    let odd = rep.odd_bleu.unwrap();
    assert!((odd - 100.0 * (1e-9f64).sqrt()).abs() < 1e-12);
    assert_eq!(rep.turns, 6);
    assert!(inform(&[], &[], &db).is_none());
}

proptest! {
    #[test]
    fn distinct_is_a_ratio(words in proptest::collection::vec("[a-c]{1,2}", 0..30), n in 1usize..4) {
        let s = words.join(" ");
        let d = distinct(&[s.as_str()], n).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_identity(words in proptest::collection::vec("[a-e]{1,3}", 4..20)) {
        let s = words.join(" ");
        let other = words.iter().rev().cloned().collect::<Vec<_>>().join(" ");
        let b = bleu(&[other.as_str()], &[s.as_str()]).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        prop_assert!((bleu(&[s.as_str()], &[s.as_str()]).unwrap() - 100.0).abs() < 1e-9);
    }
}
