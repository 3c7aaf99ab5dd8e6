use std::collections::BTreeMap;

use proptest::prelude::*;
use styledial_core::corpus_gen::{generate_corpus, CorpusSpec, Ontology};
use styledial_core::dialogue_core::*;
use styledial_core::metrics::evaluate_records;

fn turn(user: &str, system: &str) -> DialogueTurn {
    DialogueTurn {
        user: user.into(),
        system: system.into(),
        style: Style::Tod,
        belief: BeliefState::new(),
        act: Act::Inform,
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn context_layout_and_truncation() {
    let h = [turn("u0 a", "r0")];
    let c = build_context(&h, "u1", 100);
    assert_eq!(c.tokens, toks("<user> u0 a <sys> r0 <user> u1"));
    assert_eq!((c.dropped_turns, c.dropped_tokens), (0, 0));

    let h = [turn("a b", "c"), turn("d", "e f")];
    // Current needs 2, each history turn 5.
    let c = build_context(&h, "g", 11);
    assert_eq!(c.tokens, toks("<user> d <sys> e f <user> g"));
    assert_eq!(c.dropped_turns, 1);
    let c = build_context(&h, "g", 6);
    assert_eq!(c.tokens, toks("<user> g"));
    assert_eq!(c.dropped_turns, 2);

    let c = build_context(&[], "w x y z", 3);
    assert_eq!(c.tokens, toks("x y z"));
    assert_eq!(c.dropped_tokens, 2);
}

#[test]
fn belief_serialization_format() {
    let mut b = BeliefState::new();
    b.set("restaurant", "area", "north");
    b.set("restaurant", "food", "thai");
    b.touch("hotel");
    assert_eq!(b.serialize(), "[hotel] | [restaurant] area=north ; food=thai");
    let p = BeliefState::parse(&b.serialize());
    assert_eq!(p.belief, b);
    assert_eq!(p.warnings, 0);
    assert_eq!(BeliefState::new().serialize(), "");
    assert!(BeliefState::parse("").belief.is_empty());
}

#[test]
fn belief_parse_tolerates_garbage() {
    let p = BeliefState::parse("blah =x [restaurant] area=north");
    let mut want = BeliefState::new();
    want.set("restaurant", "area", "north");
    assert_eq!(p.belief, want);
    assert!(p.warnings >= 1);

    let p = BeliefState::parse("zzz [restaurant] area=north");
    assert_eq!(p.belief, want);
    assert_eq!(p.warnings, 1);

    // Slot pairs before any domain have nowhere to go.
    let p = BeliefState::parse("area=north ; [db_1]");
    assert!(p.belief.is_empty());
    assert_eq!(p.warnings, 3);
}

#[test]
fn act_parse_and_fallback() {
    for a in Act::ALL {
        assert_eq!(Act::parse_generated(&[a.token()]), (a, false));
    }
    assert_eq!(Act::parse_generated(&["foo"]), (Act::Inform, true));
    assert_eq!(Act::parse_generated::<&str>(&[]), (Act::Inform, true));
    assert_eq!(Act::from_token("[chat]"), Some(Act::Chat));
}

fn small_db() -> Db {
    let e = |name: &str, domain: &str, kv: &[(&str, &str)]| Entity {
        name: name.into(),
        domain: domain.into(),
        slots: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    let mut columns = BTreeMap::new();
    columns.insert("restaurant".to_string(), vec!["area".to_string(), "food".to_string()]);
    columns.insert("hotel".to_string(), vec!["area".to_string()]);
    Db {
        entities: vec![
            e("zeta", "restaurant", &[("area", "north"), ("food", "thai")]),
            e("alpha", "restaurant", &[("area", "north"), ("food", "thai")]),
            e("mid", "restaurant", &[("area", "north"), ("food", "indian")]),
            e("gamma", "restaurant", &[("area", "south"), ("food", "thai")]),
            e("inn", "hotel", &[("area", "north")]),
        ],
        columns,
    }
}

#[test]
fn db_query_examples() {
    let db = small_db();
    let mut b = BeliefState::new();
    b.set("restaurant", "area", "north");
    let r = db_query(&b, &db);
    assert_eq!(r.match_count, 3);
    assert_eq!(r.bucket, DbBucket::Many);
    assert_eq!(r.top.as_ref().unwrap().name, "alpha");
    assert_eq!(r.tokens(&db), toks("[db_3plus] alpha north thai"));
    b.set("restaurant", "food", "THAI");
    let r = db_query(&b, &db);
    assert_eq!((r.match_count, r.bucket), (2, DbBucket::Two));
    b.set("restaurant", "food", "french");
    assert_eq!(db_query(&b, &db), DbResult { match_count: 0, bucket: DbBucket::None, top: None });
    assert_eq!(db_query(&BeliefState::new(), &db), DbResult::sentinel());
    assert_eq!(DbResult::sentinel().tokens(&db), toks("[db_0]"));
    let mut h = BeliefState::new();
    h.touch("hotel");
    assert_eq!(db_query(&h, &db).bucket, DbBucket::One);
}

#[test]
fn db_query_matches_brute_force_on_generated_db() {
    let corpus = generate_corpus(
        &CorpusSpec {
            n_dialogues: 20,
            ..CorpusSpec::default()
        },
        &Ontology::default(),
    )
    .unwrap();
    let db = &corpus.db;
    for d in &corpus.ontology.domains {
        let areas = &d.informable[0].values;
        let prices = &d.informable[2].values;
        for a in areas {
            for p in prices {
                let mut b = BeliefState::new();
                b.set(&d.name, &d.informable[0].name, a);
                b.set(&d.name, &d.informable[2].name, p);
                let got = db_query(&b, db);
                let mut hits: Vec<&Entity> = db
                    .entities
                    .iter()
                    .filter(|e| {
                        e.domain == d.name
                            && e.slots.get(&d.informable[0].name) == Some(a)
                            && e.slots.get(&d.informable[2].name) == Some(p)
                    })
                    .collect();
                hits.sort_by(|x, y| x.name.cmp(&y.name));
                assert_eq!(got.match_count, hits.len());
                assert_eq!(got.top.as_ref().map(|e| &e.name), hits.first().map(|e| &e.name));
            }
        }
    }
}

#[test]
fn gold_stage_sequences() {
    let db = small_db();
    let mut b = BeliefState::new();
    b.set("restaurant", "area", "south");
    let d = Dialogue {
        id: "d".into(),
        goal: None,
        turns: vec![
            DialogueTurn {
                user: "i want food in the south".into(),
                system: "gamma is nice".into(),
                style: Style::Tod,
                belief: b.clone(),
                act: Act::Recommend,
            },
            DialogueTurn {
                user: "i love food".into(),
                system: "me too".into(),
                style: Style::Odd,
                belief: b,
                act: Act::Chat,
            },
        ],
    };
    let (info, stages) = gold_stages(&d, 0, &db, 50);
    assert_eq!(info.db.match_count, 1);
    assert_eq!(stages[0].input, toks("<ctx> <user> i want food in the south"));
    assert_eq!(stages[0].target, toks("[restaurant] area=south"));
    assert_eq!(
        stages[1].input,
        toks("<ctx> <user> i want food in the south <bs> [restaurant] area=south <db> [db_1] gamma south thai")
    );
    assert_eq!(stages[1].target, toks("[recommend]"));
    assert_eq!(stages[2].input.last().unwrap(), "[recommend]");
    assert_eq!(stages[2].target, toks("gamma is nice"));

    // Chat turns carry the empty database result.
    let (info, stages) = gold_stages(&d, 1, &db, 50);
    assert_eq!(info.db, DbResult::sentinel());
    assert!(stages[2].input.ends_with(&toks("<db> [db_0] <act> [chat]")));
}

#[test]
fn scripted_pipeline_reproduces_gold_and_scores_perfectly() {
    let corpus = generate_corpus(
        &CorpusSpec {
            n_dialogues: 40,
            ..CorpusSpec::default()
        },
        &Ontology::default(),
    )
    .unwrap();
    let mut model = ScriptedModel::from_dialogues(&corpus.dialogues, &corpus.db, 120);
    let opts = PipelineOptions { context_budget: 120 };
    let recs = evaluate_dialogues(&mut model, &corpus.dialogues, &corpus.db, opts);
    assert!(recs.iter().all(|r| r.error.is_none() && r.warnings == 0));
    assert!(recs.iter().all(|r| r.response == r.gold_response && r.act == Some(r.gold_act)));
    let rep = evaluate_records(&recs, &corpus.dialogues, &corpus.db).unwrap();
    assert_eq!(rep.inform, Some(100.0));
    assert_eq!(rep.success, Some(100.0));
    assert_eq!(rep.bleu, Some(100.0));
}

#[test]
fn unscripted_input_is_recorded_not_fatal() {
    let corpus = generate_corpus(
        &CorpusSpec {
            n_dialogues: 4,
            ..CorpusSpec::default()
        },
        &Ontology::default(),
    )
    .unwrap();
    let mut model = ScriptedModel::default();
    let recs = evaluate_dialogues(&mut model, &corpus.dialogues, &corpus.db, PipelineOptions { context_budget: 120 });
    assert_eq!(recs.len(), corpus.dialogues.iter().map(|d| d.turns.len()).sum::<usize>());
    assert!(recs.iter().all(|r| r.error.is_some()));
}

/// Answers every stage with a fixed token list.
struct Fixed(BTreeMap<Stage, Vec<String>>);

impl DialogueModel for Fixed {
    fn generate(&mut self, stage: Stage, _: &[String]) -> styledial_core::Result<Vec<String>> {
        Ok(self.0[&stage].clone())
    }
}

#[test]
fn run_turn_counts_warnings_and_drops_unknown_domains() {
    let db = small_db();
    let mut m = Fixed(BTreeMap::from([
        (Stage::Belief, toks("junk [spa] area=north | [restaurant] area=north")),
        (Stage::Act, toks("foo")),
        (Stage::Response, toks("ok")),
    ]));
    let out = run_turn(&mut m, &[], "hello", &db, PipelineOptions { context_budget: 20 }).unwrap();
    assert_eq!(out.belief_warnings, 2);
    assert!(out.act_warning);
    assert_eq!(out.info.act, Act::Inform);
    assert_eq!(out.info.db.match_count, 3);
    assert_eq!(out.response, toks("ok"));

    // A chat act blanks the database result.
    m.0.insert(Stage::Act, toks("[chat]"));
    let out = run_turn(&mut m, &[], "hello", &db, PipelineOptions { context_budget: 20 }).unwrap();
    assert_eq!(out.info.db, DbResult::sentinel());
}

fn belief_strategy() -> impl Strategy<Value = BeliefState> {
    // `[db_*]` tokens are database buckets, never domains.
    let domain = "[a-z][a-z_]{0,6}".prop_filter("reserved", |n: &String| !n.starts_with("db_"));
    let slot = "[a-z][a-z_]{0,6}";
    let value = "[a-z0-9_]{1,6}";
    proptest::collection::btree_map(domain, proptest::collection::btree_map(slot, value, 0..4), 0..4)
        .prop_map(|domains| BeliefState { domains })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn belief_round_trip(b in belief_strategy()) {
        let p = BeliefState::parse(&b.serialize());
        prop_assert_eq!(p.warnings, 0);
        prop_assert_eq!(p.belief, b);
    }
}
