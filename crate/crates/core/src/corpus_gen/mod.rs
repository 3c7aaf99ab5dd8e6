//! Deterministic synthetic hybrid corpus: a task-oriented segment grounded
//! in a small entity database plus topically linked open-domain turns.

mod templates;
mod tokenizer;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue_core::{
    db_query, Act, BeliefState, Db, DbBucket, Dialogue, DialogueTurn, Entity, Goal, Stage, Style,
    ACT, BS, CTX, DB, EOS, RESP, SYS, USER,
};
use crate::error::{Error, Result};
use templates::{Family, FAMILIES};
pub use tokenizer::{Vocab, PAD_TOKEN, UNK_TOKEN};

/// Version tag written into corpus files.
pub const CORPUS_VERSION: u32 = 1;

pub const REQUESTABLE: [&str; 2] = ["phone", "address"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Noun that open-domain turns about this domain revolve around.
    pub topic: String,
    pub informable: Vec<SlotSpec>,
    pub entity_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub domains: Vec<DomainSpec>,
}

fn slot(name: &str, values: &[&str]) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

impl Default for Ontology {
    fn default() -> Self {
        let area = slot("area", &["north", "south", "east", "west", "centre"]);
        let price = slot("pricerange", &["cheap", "moderate", "expensive"]);
        Self {
            domains: alloc::vec![
                DomainSpec {
                    name: "restaurant".into(),
                    topic: "food".into(),
                    informable: alloc::vec![
                        area.clone(),
                        slot("food", &["italian", "chinese", "indian", "french", "thai", "british"]),
                        price.clone(),
                    ],
                    entity_count: 24,
                },
                DomainSpec {
                    name: "hotel".into(),
                    topic: "travel".into(),
                    informable: alloc::vec![area, slot("stars", &["2", "3", "4", "5"]), price],
                    entity_count: 24,
                },
            ],
        }
    }
}

impl Ontology {
    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OddPosition {
    Prepend,
    Append,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_dialogues: usize,
    pub seed: u64,
    /// Inclusive range of task-oriented turns per dialogue.
    pub tod_turns: (usize, usize),
    /// Inclusive range of open-domain turns per dialogue.
    pub odd_turns: (usize, usize),
    pub odd_position: OddPosition,
    /// Upper bound on the vocabulary size.
    pub vocab_target: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_dialogues: 800,
            seed: 7,
            tod_turns: (2, 4),
            odd_turns: (1, 3),
            odd_position: OddPosition::Append,
            vocab_target: 600,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.into()));
        if self.n_dialogues == 0 {
            return bad("n_dialogues must be positive");
        }
        if self.tod_turns.0 == 0 || self.tod_turns.0 > self.tod_turns.1 {
            return bad("tod_turns must be a non-empty range starting at 1 or more");
        }
        if self.odd_turns.0 > self.odd_turns.1 {
            return bad("odd_turns range is empty");
        }
        Ok(())
    }
}

/// Generated dialogues, their database and vocabulary, and the split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
    pub db: Db,
    pub vocab: Vocab,
    pub split: Split,
}

/// Dialogue index ranges of the 80/10/10 split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub dev: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    pub fn for_count(n: usize) -> Self {
        let n_train = n * 8 / 10;
        let n_dev = n / 10;
        Self {
            train: 0..n_train,
            dev: n_train..n_train + n_dev,
            test: n_train + n_dev..n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl Corpus {
    pub fn part(&self, which: SplitName) -> &[Dialogue] {
        let r = match which {
            SplitName::Train => &self.split.train,
            SplitName::Dev => &self.split.dev,
            SplitName::Test => &self.split.test,
        };
        &self.dialogues[r.clone()]
    }

    pub fn train(&self) -> &[Dialogue] {
        self.part(SplitName::Train)
    }

    pub fn dev(&self) -> &[Dialogue] {
        self.part(SplitName::Dev)
    }

    pub fn test(&self) -> &[Dialogue] {
        self.part(SplitName::Test)
    }

    /// The topic noun of every domain, in ontology order.
    pub fn topics(&self) -> Vec<(String, String)> {
        self.ontology
            .domains
            .iter()
            .map(|d| (d.name.clone(), d.topic.clone()))
            .collect()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for item `index` under `seed`.
pub fn derived_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index.wrapping_add(1))))
}

/// Builds the entity table for every domain of `ontology`.
pub fn generate_db(ontology: &Ontology, seed: u64) -> Db {
    let mut rng = derived_rng(seed, u64::MAX);
    let mut db = Db::default();
    let mut phones = BTreeSet::new();
    let mut addresses = BTreeSet::new();
    for d in &ontology.domains {
        let suffixes: &[&str] = if d.name == "hotel" {
            &templates::HOTEL_SUFFIXES
        } else {
            &templates::RESTAURANT_SUFFIXES
        };
        let mut names: Vec<String> = templates::NAME_PREFIXES
            .iter()
            .flat_map(|p| suffixes.iter().map(move |s| format!("{p}_{s}")))
            .collect();
        names.shuffle(&mut rng);
        names.truncate(d.entity_count);
        let mut columns: Vec<String> = d.informable.iter().map(|s| s.name.clone()).collect();
        columns.extend(REQUESTABLE.iter().map(|s| s.to_string()));
        db.columns.insert(d.name.clone(), columns);
        for name in names {
            let mut slots = BTreeMap::new();
            for s in &d.informable {
                slots.insert(s.name.clone(), s.values.choose(&mut rng).expect("values").clone());
            }
            let phone = loop {
                let p = format!("01223-{:04}", rng.random_range(0..10_000u32));
                if phones.insert(p.clone()) {
                    break p;
                }
            };
            let address = loop {
                let street = templates::STREETS.choose(&mut rng).expect("streets");
                let a = format!("{}_{street}", rng.random_range(1..100u32));
                if addresses.insert(a.clone()) {
                    break a;
                }
            };
            slots.insert("phone".into(), phone);
            slots.insert("address".into(), address);
            db.entities.push(Entity {
                name,
                domain: d.name.clone(),
                slots,
            });
        }
    }
    db
}

fn fill(pattern: &str, topic: &str, rng: &mut ChaCha8Rng) -> String {
    let mut out = Vec::new();
    for w in pattern.split(' ') {
        if let Some(name) = w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            if name == "t" {
                out.push(topic.to_string());
            } else {
                let opts = templates::filler(name);
                out.push(opts.choose(rng).copied().unwrap_or(name).to_string());
            }
        } else {
            out.push(w.to_string());
        }
    }
    out.join(" ")
}

/// Share of open-domain responses drawn from topic-free patterns.
const TOPICLESS_RATE: f64 = 0.08;

fn odd_turn(topic: &str, rng: &mut ChaCha8Rng) -> DialogueTurn {
    let fam: &Family = FAMILIES.choose(rng).expect("families");
    let user = fill(fam.user.choose(rng).expect("user"), topic, rng);
    let pattern = if rng.random_bool(TOPICLESS_RATE) {
        fam.without_topic.choose(rng)
    } else {
        fam.response.choose(rng)
    };
    let system = fill(pattern.expect("response"), topic, rng);
    DialogueTurn {
        user,
        system,
        style: Style::Odd,
        belief: BeliefState::new(),
        act: Act::Chat,
    }
}

fn value_phrase(domain: &str, slot: &str, value: &str) -> String {
    match (domain, slot) {
        (_, "area") => format!("in the {value}"),
        (_, "stars") => format!("{value} star"),
        _ => value.to_string(),
    }
}

fn constraint_utterance(dom: &DomainSpec, stated: &BTreeMap<String, String>, rng: &mut ChaCha8Rng) -> String {
    let opener = templates::USER_OPENERS.choose(rng).expect("openers");
    let mut words = alloc::vec![opener.to_string()];
    let get = |s: &str| stated.get(s).map(|v| value_phrase(&dom.name, s, v));
    if let Some(p) = get("pricerange") {
        words.push(p);
    }
    for s in ["food", "stars"] {
        if let Some(p) = get(s) {
            words.push(p);
        }
    }
    words.push(dom.name.clone());
    if let Some(p) = get("area") {
        words.push(p);
    }
    words.join(" ")
}

fn answer_utterance(slot: &str, value: &str) -> String {
    match slot {
        "area" => format!("the {value} please"),
        "food" => format!("{value} food please"),
        "stars" => format!("{value} stars please"),
        _ => format!("something {value} please"),
    }
}

fn request_response(slot: &str) -> String {
    match slot {
        "area" => "which area would you like ?".into(),
        "food" => "what type of food would you like ?".into(),
        "stars" => "how many stars would you like ?".into(),
        _ => "what price range would you like ?".into(),
    }
}

fn recommend_response(dom: &DomainSpec, e: &Entity) -> String {
    let v = |s: &str| e.get(s).unwrap_or("");
    if dom.name == "hotel" {
        format!(
            "{} is a {} {} star hotel in the {} .",
            e.name,
            v("pricerange"),
            v("stars"),
            v("area")
        )
    } else {
        format!(
            "{} is a {} {} {} in the {} .",
            e.name,
            v("pricerange"),
            v("food"),
            dom.name,
            v("area")
        )
    }
}

fn info_turn(slots: &[&str], e: &Entity) -> (String, String) {
    let v = |s: &str| e.get(s).unwrap_or("").to_string();
    match slots {
        ["phone"] => (
            "what is the phone number ?".into(),
            format!("the phone number of {} is {} .", e.name, v("phone")),
        ),
        ["address"] => (
            "what is the address ?".into(),
            format!("{} is located at {} .", e.name, v("address")),
        ),
        _ => (
            "what is the phone number and address ?".into(),
            format!(
                "the phone number of {} is {} and the address is {} .",
                e.name,
                v("phone"),
                v("address")
            ),
        ),
    }
}

/// Task-oriented segment: constraints, clarifying requests while many
/// entities match, a recommendation, then requests for details.
fn tod_segment(
    dom: &DomainSpec,
    db: &Db,
    turns_range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> (Goal, Vec<DialogueTurn>) {
    let pool: Vec<&Entity> = db.in_domain(&dom.name).collect();
    let target = *pool.choose(rng).expect("entities");
    let n_target = rng.random_range(turns_range.0..=turns_range.1);
    let all: Vec<&str> = dom.informable.iter().map(|s| s.name.as_str()).collect();
    let k = rng.random_range(1..=all.len());
    let mut order = all.clone();
    order.shuffle(rng);
    let mut stated: BTreeMap<String, String> = order[..k]
        .iter()
        .map(|s| (s.to_string(), target.get(s).unwrap_or("").to_string()))
        .collect();
    let mut belief = BeliefState::new();
    let mut turns = Vec::new();
    let mut user = constraint_utterance(dom, &stated, rng);
    let top = loop {
        belief.touch(&dom.name);
        for (s, v) in &stated {
            belief.set(&dom.name, s, v);
        }
        let found = db_query(&belief, db);
        let missing = all.iter().find(|s| !stated.contains_key(**s));
        match missing {
            Some(&slot) if found.bucket == DbBucket::Many => {
                turns.push(DialogueTurn {
                    user: user.clone(),
                    system: request_response(slot),
                    style: Style::Tod,
                    belief: belief.clone(),
                    act: Act::Request,
                });
                let value = target.get(slot).unwrap_or("").to_string();
                user = answer_utterance(slot, &value);
                stated.insert(slot.to_string(), value);
            }
            _ => {
                let top = found.top.expect("the target always matches");
                turns.push(DialogueTurn {
                    user: user.clone(),
                    system: recommend_response(dom, &top),
                    style: Style::Tod,
                    belief: belief.clone(),
                    act: Act::Recommend,
                });
                break top;
            }
        }
    };
    let extra = n_target.saturating_sub(turns.len()).min(2);
    let mut requested: Vec<&str> = Vec::new();
    let plan: Vec<Vec<&str>> = match extra {
        0 => Vec::new(),
        1 => {
            let pick = rng.random_range(0..3);
            alloc::vec![match pick {
                0 => alloc::vec!["phone"],
                1 => alloc::vec!["address"],
                _ => alloc::vec!["phone", "address"],
            }]
        }
        _ => {
            let mut p = alloc::vec![alloc::vec!["phone"], alloc::vec!["address"]];
            p.shuffle(rng);
            p
        }
    };
    for slots in plan {
        let (u, s) = info_turn(&slots, &top);
        requested.extend(slots.iter());
        turns.push(DialogueTurn {
            user: u,
            system: s,
            style: Style::Tod,
            belief: belief.clone(),
            act: Act::Inform,
        });
    }
    requested.sort_unstable();
    requested.dedup();
    let goal = Goal {
        domain: dom.name.clone(),
        constraints: stated,
        requested: requested.into_iter().map(String::from).collect(),
    };
    (goal, turns)
}

fn generate_dialogue(
    index: usize,
    spec: &CorpusSpec,
    ontology: &Ontology,
    db: &Db,
) -> Dialogue {
    let mut rng = derived_rng(spec.seed, index as u64);
    let dom = ontology.domains.choose(&mut rng).expect("domains");
    let (goal, tod) = tod_segment(dom, db, spec.tod_turns, &mut rng);
    let n_odd = rng.random_range(spec.odd_turns.0..=spec.odd_turns.1);
    let odd: Vec<DialogueTurn> = (0..n_odd).map(|_| odd_turn(&dom.topic, &mut rng)).collect();
    let before = match spec.odd_position {
        OddPosition::Append => 0,
        OddPosition::Prepend => n_odd,
        OddPosition::Both => rng.random_range(0..=n_odd),
    };
    let mut turns = odd[..before].to_vec();
    turns.extend(tod);
    turns.extend_from_slice(&odd[before..]);
    Dialogue {
        id: format!("d{index:05}"),
        goal: Some(goal),
        turns,
    }
}

/// Marker and label tokens that lead every vocabulary, in id order.
pub fn special_tokens(ontology: &Ontology) -> Vec<String> {
    let mut v: Vec<String> = [EOS, CTX, BS, DB, ACT, RESP, USER, SYS, ";", "|"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend(DbBucket::ALL.iter().map(|b| b.token().to_string()));
    v.extend(Act::ALL.iter().map(|a| a.token().to_string()));
    v.extend(ontology.domains.iter().map(|d| format!("[{}]", d.name)));
    debug_assert!(Stage::ALL.iter().all(|s| v.iter().any(|t| t == s.bos())));
    v
}

fn build_vocab(ontology: &Ontology, db: &Db, dialogues: &[Dialogue], target: usize) -> Result<Vocab> {
    let specials = special_tokens(ontology);
    let mut words = BTreeSet::new();
    for d in &ontology.domains {
        for s in &d.informable {
            for v in &s.values {
                words.insert(format!("{}={v}", s.name));
                words.insert(v.clone());
            }
        }
    }
    for e in &db.entities {
        words.insert(e.name.clone());
        words.extend(e.slots.values().cloned());
    }
    for d in dialogues {
        for t in &d.turns {
            words.extend(t.user.split_whitespace().map(str::to_string));
            words.extend(t.system.split_whitespace().map(str::to_string));
            words.extend(t.belief.tokens());
        }
    }
    for s in &specials {
        words.remove(s);
    }
    let vocab = Vocab::new(specials.iter().chain(words.iter()))?;
    if vocab.len() > target {
        return Err(Error::Spec(format!(
            "vocabulary of {} types exceeds target {target}",
            vocab.len()
        )));
    }
    Ok(vocab)
}

/// Generates dialogues, database and vocabulary. Identical `(spec, ontology)`
/// always yields an identical corpus.
pub fn generate_corpus(spec: &CorpusSpec, ontology: &Ontology) -> Result<Corpus> {
    spec.validate()?;
    if ontology.domains.is_empty() {
        return Err(Error::Spec("ontology has no domains".into()));
    }
    let db = generate_db(ontology, spec.seed);
    let dialogues: Vec<Dialogue> = (0..spec.n_dialogues)
        .map(|i| generate_dialogue(i, spec, ontology, &db))
        .collect();
    let vocab = build_vocab(ontology, &db, &dialogues, spec.vocab_target)?;
    Ok(Corpus {
        spec: spec.clone(),
        ontology: ontology.clone(),
        split: Split::for_count(dialogues.len()),
        dialogues,
        db,
        vocab,
    })
}
